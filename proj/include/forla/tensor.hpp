#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "forla/rng.hpp"

// Reverse-mode tape over flat row-major float tensors. Storage is float for
// training; the same code instantiates with double for gradient verification.

namespace forla {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct AxisError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline void check_axis(const char* op, size_t axis, size_t rank) {
    if (axis >= rank) {
        throw AxisError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                        std::to_string(rank));
    }
}

// Thread-local recording switch shared by all scalar types.
struct GradMode {
    inline static thread_local bool enabled = true;
};

// RAII guard: forwards inside the scope are not recorded.
struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled) { GradMode::enabled = false; }
    ~NoGradGuard() { GradMode::enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class S>
struct TensorData {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated lazily, same length as value
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

template <class S>
class TapeT;

template <class S>
class TensorT {
public:
    using Data = TensorData<S>;

    TensorT() = default;

    static TensorT zeros(Shape shape) {
        TensorT t;
        t.d_ = std::make_shared<Data>();
        t.d_->value.assign(shape_numel(shape), S(0));
        t.d_->shape = std::move(shape);
        return t;
    }

    static TensorT full(Shape shape, S v) {
        TensorT t = zeros(std::move(shape));
        std::fill(t.d_->value.begin(), t.d_->value.end(), v);
        return t;
    }

    static TensorT from(Shape shape, std::vector<S> vals) {
        if (shape_numel(shape) != vals.size()) {
            throw ShapeError("tensor: " + shape_str(shape) + " does not hold " + std::to_string(vals.size()) +
                             " values");
        }
        TensorT t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        t.d_->value = std::move(vals);
        return t;
    }

    static TensorT scalar(S v) { return from({}, {v}); }

    // Trainable leaf.
    static TensorT param(Shape shape, std::vector<S> vals) {
        TensorT t = from(std::move(shape), std::move(vals));
        t.d_->requires_grad = true;
        t.d_->ensure_grad();
        return t;
    }

    static TensorT param_uniform(Shape shape, Rng& rng, double lo, double hi) {
        size_t n = shape_numel(shape);
        std::vector<S> v(n);
        for (size_t i = 0; i < n; ++i) v[i] = S(rng.uniform(lo, hi));
        return param(std::move(shape), std::move(v));
    }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    size_t rank() const { return d_->shape.size(); }
    size_t numel() const { return d_->value.size(); }

    S* data() { return d_->value.data(); }
    const S* data() const { return d_->value.data(); }
    std::vector<S>& values() { return d_->value; }
    const std::vector<S>& values() const { return d_->value; }

    S item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return d_->value[0];
    }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    void set_requires_grad(bool b) {
        d_->requires_grad = b;
        if (b) d_->ensure_grad();
    }

    // True when gradients should flow through this handle.
    bool grad_active() const { return d_ && d_->requires_grad && !detached_; }

    const std::vector<S>& grad() const { return d_->grad; }
    std::vector<S>& grad() { return d_->grad; }
    void zero_grad() {
        if (d_) d_->grad.assign(d_->value.size(), S(0));
    }

    // Same storage, gradient wall.
    TensorT detach() const {
        TensorT t = *this;
        t.detached_ = true;
        return t;
    }

    std::shared_ptr<Data> ptr() const { return d_; }

private:
    std::shared_ptr<Data> d_;
    bool detached_ = false;
};

// Recorded operation list. Creation order is topological (an op's inputs
// always exist before its output), so reverse iteration visits every node
// after all of its consumers.
template <class S>
class TapeT {
public:
    TapeT() : prev_(tl_current) { tl_current = this; }
    ~TapeT() { tl_current = prev_; }
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    static TapeT* current() { return tl_current; }
    static bool recording() { return tl_current != nullptr && GradMode::enabled; }

    size_t node_count() const { return nodes_.size(); }

    void record(const std::shared_ptr<TensorData<S>>& out,
                std::initializer_list<const TensorData<S>*> parents,
                std::function<void()> backward_fn) {
        record_multi(out, std::vector<const TensorData<S>*>(parents), std::move(backward_fn));
    }

    void record_multi(const std::shared_ptr<TensorData<S>>& out,
                      const std::vector<const TensorData<S>*>& parents,
                      std::function<void()> backward_fn) {
        Node n;
        n.out = out;
        n.backward = std::move(backward_fn);
        for (const TensorData<S>* p : parents) {
            auto it = producer_.find(p);
            if (it != producer_.end()) n.parents.push_back(it->second);
        }
        producer_[out.get()] = nodes_.size();
        nodes_.push_back(std::move(n));
    }

    // Fills d(loss)/d(x) for every grad-active tensor reachable from loss.
    // Leaf gradients accumulate (+=) so per-scene backward passes can sum.
    void backward(const TensorT<S>& loss) {
        if (consumed_) throw TapeError("backward: tape already consumed");
        if (loss.numel() != 1) throw TapeError("backward: loss " + shape_str(loss.shape()) + " is not scalar");
        auto it = producer_.find(loss.ptr().get());
        if (it == producer_.end()) throw TapeError("backward: loss was not produced on this tape");
        consumed_ = true;

        loss.ptr()->ensure_grad();
        loss.ptr()->grad[0] = S(1);

        std::vector<char> reachable(nodes_.size(), 0);
        reachable[it->second] = 1;
        for (size_t i = it->second + 1; i-- > 0;) {
            if (!reachable[i]) continue;
            for (size_t p : nodes_[i].parents) reachable[p] = 1;
            nodes_[i].backward();
        }
    }

private:
    struct Node {
        std::shared_ptr<TensorData<S>> out;
        std::vector<size_t> parents;
        std::function<void()> backward;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const TensorData<S>*, size_t> producer_;
    TapeT* prev_ = nullptr;
    bool consumed_ = false;

    inline static thread_local TapeT* tl_current = nullptr;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

// ---------------------------------------------------------------------------
// kernels

namespace detail {

template <class S>
void mm_nn(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c, size_t m, size_t k, size_t n,
           bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, S(0));
    for (size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (size_t kk = 0; kk < k; ++kk) {
            S av = arow[kk];
            const S* brow = b + kk * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c (m x n) (+)= a (m x k) * b^T, b given as n x k
template <class S>
void mm_nt(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c, size_t m, size_t k, size_t n,
           bool accumulate) {
    for (size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        for (size_t j = 0; j < n; ++j) {
            const S* brow = b + j * k;
            S acc = 0;
            for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            S* cij = c + i * n + j;
            *cij = accumulate ? *cij + acc : acc;
        }
    }
}

// c (m x n) (+)= a^T * b, a given as k x m, b as k x n
template <class S>
void mm_tn(const S* __restrict__ a, const S* __restrict__ b, S* __restrict__ c, size_t m, size_t k, size_t n,
           bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, S(0));
    for (size_t kk = 0; kk < k; ++kk) {
        const S* arow = a + kk * m;
        const S* brow = b + kk * n;
        for (size_t i = 0; i < m; ++i) {
            S av = arow[i];
            S* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class S>
S stable_sigmoid(S x) {
    if (x >= 0) {
        S e = std::exp(-x);
        return S(1) / (S(1) + e);
    }
    S e = std::exp(x);
    return e / (S(1) + e);
}

// b broadcasts over the leading axes of a when b.shape is a suffix of a.shape.
inline bool is_suffix(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <class S>
void check_binary(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() == b.shape()) return;
    if (is_suffix(a.shape(), b.shape())) return;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not match");
}

// axis split for reductions/softmax: outer * n * inner
struct AxisSpan {
    size_t outer, n, inner;
};
inline AxisSpan axis_span(const Shape& s, size_t axis) {
    AxisSpan sp{1, s[axis], 1};
    for (size_t i = 0; i < axis; ++i) sp.outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// op helpers

namespace detail {

template <class S>
TensorT<S> make_out(Shape shape, std::vector<S> vals) {
    return TensorT<S>::from(std::move(shape), std::move(vals));
}

template <class S>
bool will_record(std::initializer_list<const TensorT<S>*> ins) {
    if (!TapeT<S>::recording()) return false;
    for (const TensorT<S>* t : ins)
        if (t->grad_active()) return true;
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (second operand may broadcast over leading axes)

namespace detail {

enum class BinKind { add, sub, mul, div };

template <class S, BinKind K>
TensorT<S> binary_op(const char* name, const TensorT<S>& a, const TensorT<S>& b) {
    check_binary(name, a, b);
    const size_t n = a.numel(), bn = b.numel();
    std::vector<S> out(n);
    const S* pa = a.data();
    const S* pb = b.data();
    for (size_t i = 0; i < n; ++i) {
        S x = pa[i], y = pb[i % bn];
        if constexpr (K == BinKind::add) out[i] = x + y;
        if constexpr (K == BinKind::sub) out[i] = x - y;
        if constexpr (K == BinKind::mul) out[i] = x * y;
        if constexpr (K == BinKind::div) out[i] = x / y;
    }
    TensorT<S> o = make_out(a.shape(), std::move(out));
    if (will_record<S>({&a, &b})) {
        o.set_requires_grad(true);
        auto ad = a.ptr(), bd = b.ptr(), od = o.ptr();
        bool na = a.grad_active(), nb = b.grad_active();
        TapeT<S>::current()->record(od, {ad.get(), bd.get()}, [ad, bd, od, na, nb, n, bn]() {
            const S* g = od->grad.data();
            const S* pa2 = ad->value.data();
            const S* pb2 = bd->value.data();
            if (na) {
                ad->ensure_grad();
                S* ga = ad->grad.data();
                for (size_t i = 0; i < n; ++i) {
                    if constexpr (K == BinKind::add) ga[i] += g[i];
                    if constexpr (K == BinKind::sub) ga[i] += g[i];
                    if constexpr (K == BinKind::mul) ga[i] += g[i] * pb2[i % bn];
                    if constexpr (K == BinKind::div) ga[i] += g[i] / pb2[i % bn];
                }
            }
            if (nb) {
                bd->ensure_grad();
                S* gb = bd->grad.data();
                for (size_t i = 0; i < n; ++i) {
                    size_t j = i % bn;
                    if constexpr (K == BinKind::add) gb[j] += g[i];
                    if constexpr (K == BinKind::sub) gb[j] -= g[i];
                    if constexpr (K == BinKind::mul) gb[j] += g[i] * pa2[i];
                    if constexpr (K == BinKind::div) gb[j] -= g[i] * pa2[i] / (pb2[j] * pb2[j]);
                }
            }
        });
    }
    return o;
}

}  // namespace detail

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op<S, detail::BinKind::add>("add", a, b);
}
template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op<S, detail::BinKind::sub>("sub", a, b);
}
template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op<S, detail::BinKind::mul>("mul", a, b);
}
template <class S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_op<S, detail::BinKind::div>("div", a, b);
}

// out = a * x + b, elementwise constants
template <class S>
TensorT<S> affine(const TensorT<S>& x, S a, S b) {
    std::vector<S> out(x.numel());
    const S* p = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = a * p[i] + b;
    TensorT<S> o = detail::make_out(x.shape(), std::move(out));
    if (detail::will_record<S>({&x})) {
        o.set_requires_grad(true);
        auto xd = x.ptr(), od = o.ptr();
        TapeT<S>::current()->record(od, {xd.get()}, [xd, od, a]() {
            xd->ensure_grad();
            const S* g = od->grad.data();
            S* gx = xd->grad.data();
            for (size_t i = 0; i < od->grad.size(); ++i) gx[i] += a * g[i];
        });
    }
    return o;
}

template <class S>
TensorT<S> scale(const TensorT<S>& x, S a) {
    return affine(x, a, S(0));
}

// ---------------------------------------------------------------------------
// unary activations

namespace detail {

template <class S, class FwdF, class BwdF>
TensorT<S> unary_op(const TensorT<S>& x, FwdF f, BwdF dfdx_from_xy) {
    std::vector<S> out(x.numel());
    const S* p = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(p[i]);
    TensorT<S> o = make_out(x.shape(), std::move(out));
    if (will_record<S>({&x})) {
        o.set_requires_grad(true);
        auto xd = x.ptr(), od = o.ptr();
        TapeT<S>::current()->record(od, {xd.get()}, [xd, od, dfdx_from_xy]() {
            xd->ensure_grad();
            const S* g = od->grad.data();
            const S* xv = xd->value.data();
            const S* yv = od->value.data();
            S* gx = xd->grad.data();
            for (size_t i = 0; i < od->grad.size(); ++i) gx[i] += g[i] * dfdx_from_xy(xv[i], yv[i]);
        });
    }
    return o;
}

}  // namespace detail

template <class S>
TensorT<S> relu(const TensorT<S>& x) {
    return detail::unary_op(
        x, [](S v) { return v > 0 ? v : S(0); }, [](S xv, S) { return xv > 0 ? S(1) : S(0); });
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& x) {
    return detail::unary_op(
        x, [](S v) { return detail::stable_sigmoid(v); }, [](S, S yv) { return yv * (S(1) - yv); });
}

template <class S>
TensorT<S> tanh(const TensorT<S>& x) {
    return detail::unary_op(
        x, [](S v) { return std::tanh(v); }, [](S, S yv) { return S(1) - yv * yv; });
}

template <class S>
TensorT<S> exp(const TensorT<S>& x) {
    return detail::unary_op(
        x, [](S v) { return std::exp(v); }, [](S, S yv) { return yv; });
}

// ---------------------------------------------------------------------------
// matmul / transpose

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " do not match");
    }
    const size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<S> out(m * n);
    detail::mm_nn(a.data(), b.data(), out.data(), m, k, n, false);
    TensorT<S> o = detail::make_out({m, n}, std::move(out));
    if (detail::will_record<S>({&a, &b})) {
        o.set_requires_grad(true);
        auto ad = a.ptr(), bd = b.ptr(), od = o.ptr();
        bool na = a.grad_active(), nb = b.grad_active();
        TapeT<S>::current()->record(od, {ad.get(), bd.get()}, [ad, bd, od, na, nb, m, k, n]() {
            const S* g = od->grad.data();
            if (na) {
                ad->ensure_grad();
                detail::mm_nt(g, bd->value.data(), ad->grad.data(), m, n, k, true);
            }
            if (nb) {
                bd->ensure_grad();
                detail::mm_tn(ad->value.data(), g, bd->grad.data(), k, m, n, true);
            }
        });
    }
    return o;
}

template <class S>
TensorT<S> transpose(const TensorT<S>& x) {
    if (x.rank() != 2) throw ShapeError("transpose: tensor " + shape_str(x.shape()) + " is not 2-d");
    const size_t m = x.shape()[0], n = x.shape()[1];
    std::vector<S> out(m * n);
    const S* p = x.data();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[j * m + i] = p[i * n + j];
    TensorT<S> o = detail::make_out({n, m}, std::move(out));
    if (detail::will_record<S>({&x})) {
        o.set_requires_grad(true);
        auto xd = x.ptr(), od = o.ptr();
        TapeT<S>::current()->record(od, {xd.get()}, [xd, od, m, n]() {
            xd->ensure_grad();
            const S* g = od->grad.data();
            S* gx = xd->grad.data();
            for (size_t j = 0; j < n; ++j)
                for (size_t i = 0; i < m; ++i) gx[i * n + j] += g[j * m + i];
        });
    }
    return o;
}

// rows of x scaled by w: out[i, :] = x[i, :] * w[i]; w is (m) or (m, 1)
template <class S>
TensorT<S> scale_rows(const TensorT<S>& x, const TensorT<S>& w) {
    if (x.rank() != 2 || w.numel() != x.shape()[0]) {
        throw ShapeError("scale_rows: shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()) +
                         " do not match");
    }
    const size_t m = x.shape()[0], n = x.shape()[1];
    std::vector<S> out(m * n);
    const S* px = x.data();
    const S* pw = w.data();
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[i * n + j] = px[i * n + j] * pw[i];
    TensorT<S> o = detail::make_out(x.shape(), std::move(out));
    if (detail::will_record<S>({&x, &w})) {
        o.set_requires_grad(true);
        auto xd = x.ptr(), wd = w.ptr(), od = o.ptr();
        bool nx = x.grad_active(), nw = w.grad_active();
        TapeT<S>::current()->record(od, {xd.get(), wd.get()}, [xd, wd, od, nx, nw, m, n]() {
            const S* g = od->grad.data();
            if (nx) {
                xd->ensure_grad();
                S* gx = xd->grad.data();
                const S* pw2 = wd->value.data();
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * pw2[i];
            }
            if (nw) {
                wd->ensure_grad();
                S* gw = wd->grad.data();
                const S* px2 = xd->value.data();
                for (size_t i = 0; i < m; ++i) {
                    S acc = 0;
                    for (size_t j = 0; j < n; ++j) acc += g[i * n + j] * px2[i * n + j];
                    gw[i] += acc;
                }
            }
        });
    }
    return o;
}

// ---------------------------------------------------------------------------
// softmax / layer norm / reductions

template <class S>
TensorT<S> softmax(const TensorT<S>& x, size_t axis) {
    check_axis("softmax", axis, std::max<size_t>(x.rank(), 1));
    if (x.rank() == 0) throw AxisError("softmax: scalar input");
    auto sp = detail::axis_span(x.shape(), axis);
    std::vector<S> out(x.numel());
    const S* p = x.data();
    for (size_t o = 0; o < sp.outer; ++o) {
        for (size_t in = 0; in < sp.inner; ++in) {
            const size_t base = o * sp.n * sp.inner + in;
            S mx = p[base];
            for (size_t k = 1; k < sp.n; ++k) mx = std::max(mx, p[base + k * sp.inner]);
            S sum = 0;
            for (size_t k = 0; k < sp.n; ++k) {
                S e = std::exp(p[base + k * sp.inner] - mx);
                out[base + k * sp.inner] = e;
                sum += e;
            }
            for (size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= sum;
        }
    }
    TensorT<S> o = detail::make_out(x.shape(), std::move(out));
    if (detail::will_record<S>({&x})) {
        o.set_requires_grad(true);
        auto xd = x.ptr(), od = o.ptr();
        TapeT<S>::current()->record(od, {xd.get()}, [xd, od, sp]() {
            xd->ensure_grad();
            const S* g = od->grad.data();
            const S* y = od->value.data();
            S* gx = xd->grad.data();
            for (size_t o2 = 0; o2 < sp.outer; ++o2) {
                for (size_t in = 0; in < sp.inner; ++in) {
                    const size_t base = o2 * sp.n * sp.inner + in;
                    S dot = 0;
                    for (size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
                    for (size_t k = 0; k < sp.n; ++k) {
                        size_t idx = base + k * sp.inner;
                        gx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    }
    return o;
}

// normalize over the last axis; affine parameters, when used, are applied by
// the caller with mul/add
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, S eps = S(1e-5)) {
    if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
    const size_t n = x.shape().back();
    const size_t rows = x.numel() / n;
    std::vector<S> out(x.numel());
    std::vector<S> inv_sigma(rows);
    const S* p = x.data();
    for (size_t r = 0; r < rows; ++r) {
        const S* row = p + r * n;
        S mean = 0;
        for (size_t j = 0; j < n; ++j) mean += row[j];
        mean /= S(n);
        S var = 0;
        for (size_t j = 0; j < n; ++j) {
            S d = row[j] - mean;
            var += d * d;
        }
        var /= S(n);
        S is = S(1) / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (size_t j = 0; j < n; ++j) out[r * n + j] = (row[j] - mean) * is;
    }
    TensorT<S> o = detail::make_out(x.shape(), std::move(out));
    if (detail::will_record<S>({&x})) {
        o.set_requires_grad(true);
        auto xd = x.ptr(), od = o.ptr();
        TapeT<S>::current()->record(od, {xd.get()}, [xd, od, rows, n, inv_sigma = std::move(inv_sigma)]() {
            xd->ensure_grad();
            const S* g = od->grad.data();
            const S* y = od->value.data();
            S* gx = xd->grad.data();
            for (size_t r = 0; r < rows; ++r) {
                const size_t base = r * n;
                S gm = 0, gym = 0;
                for (size_t j = 0; j < n; ++j) {
                    gm += g[base + j];
                    gym += g[base + j] * y[base + j];
                }
                gm /= S(n);
                gym /= S(n);
                for (size_t j = 0; j < n; ++j)
                    gx[base + j] += inv_sigma[r] * (g[base + j] - gm - y[base + j] * gym);
            }
        });
    }
    return o;
}

template <class S>
TensorT<S> reduce_sum(const TensorT<S>& x, size_t axis) {
    check_axis("reduce_sum", axis, x.rank());
    auto sp = detail::axis_span(x.shape(), axis);
    Shape oshape;
    for (size_t i = 0; i < x.rank(); ++i)
        if (i != axis) oshape.push_back(x.shape()[i]);
    std::vector<S> out(sp.outer * sp.inner, S(0));
    const S* p = x.data();
    for (size_t o = 0; o < sp.outer; ++o)
        for (size_t k = 0; k < sp.n; ++k)
            for (size_t in = 0; in < sp.inner; ++in)
                out[o * sp.inner + in] += p[o * sp.n * sp.inner + k * sp.inner + in];
    TensorT<S> o = detail::make_out(std::move(oshape), std::move(out));
    if (detail::will_record<S>({&x})) {
        o.set_requires_grad(true);
        auto xd = x.ptr(), od = o.ptr();
        TapeT<S>::current()->record(od, {xd.get()}, [xd, od, sp]() {
            xd->ensure_grad();
            const S* g = od->grad.data();
            S* gx = xd->grad.data();
            for (size_t o2 = 0; o2 < sp.outer; ++o2)
                for (size_t k = 0; k < sp.n; ++k)
                    for (size_t in = 0; in < sp.inner; ++in)
                        gx[o2 * sp.n * sp.inner + k * sp.inner + in] += g[o2 * sp.inner + in];
        });
    }
    return o;
}

// mean of squared differences over all elements
template <class S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mse: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " do not match");
    }
    const size_t n = a.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S acc = 0;
    for (size_t i = 0; i < n; ++i) {
        S d = pa[i] - pb[i];
        acc += d * d;
    }
    TensorT<S> o = TensorT<S>::scalar(acc / S(n));
    if (detail::will_record<S>({&a, &b})) {
        o.set_requires_grad(true);
        auto ad = a.ptr(), bd = b.ptr(), od = o.ptr();
        bool na = a.grad_active(), nb = b.grad_active();
        TapeT<S>::current()->record(od, {ad.get(), bd.get()}, [ad, bd, od, na, nb, n]() {
            const S g = od->grad[0] * S(2) / S(n);
            const S* pa2 = ad->value.data();
            const S* pb2 = bd->value.data();
            if (na) {
                ad->ensure_grad();
                for (size_t i = 0; i < n; ++i) ad->grad[i] += g * (pa2[i] - pb2[i]);
            }
            if (nb) {
                bd->ensure_grad();
                for (size_t i = 0; i < n; ++i) bd->grad[i] -= g * (pa2[i] - pb2[i]);
            }
        });
    }
    return o;
}

// ---------------------------------------------------------------------------
// shape ops

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    TensorT<S> o = detail::make_out(std::move(shape), std::vector<S>(x.values()));
    if (detail::will_record<S>({&x})) {
        o.set_requires_grad(true);
        auto xd = x.ptr(), od = o.ptr();
        TapeT<S>::current()->record(od, {xd.get()}, [xd, od]() {
            xd->ensure_grad();
            const S* g = od->grad.data();
            S* gx = xd->grad.data();
            for (size_t i = 0; i < od->grad.size(); ++i) gx[i] += g[i];
        });
    }
    return o;
}

template <class S>
TensorT<S> slice(const TensorT<S>& x, size_t axis, size_t start, size_t len) {
    check_axis("slice", axis, x.rank());
    if (start + len > x.shape()[axis] || len == 0) {
        throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of range for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
    }
    auto sp = detail::axis_span(x.shape(), axis);
    Shape oshape = x.shape();
    oshape[axis] = len;
    std::vector<S> out(sp.outer * len * sp.inner);
    const S* p = x.data();
    for (size_t o = 0; o < sp.outer; ++o)
        for (size_t k = 0; k < len; ++k)
            std::copy_n(p + (o * sp.n + start + k) * sp.inner, sp.inner, out.data() + (o * len + k) * sp.inner);
    TensorT<S> o = detail::make_out(std::move(oshape), std::move(out));
    if (detail::will_record<S>({&x})) {
        o.set_requires_grad(true);
        auto xd = x.ptr(), od = o.ptr();
        TapeT<S>::current()->record(od, {xd.get()}, [xd, od, sp, start, len]() {
            xd->ensure_grad();
            const S* g = od->grad.data();
            S* gx = xd->grad.data();
            for (size_t o2 = 0; o2 < sp.outer; ++o2)
                for (size_t k = 0; k < len; ++k) {
                    const S* gs = g + (o2 * len + k) * sp.inner;
                    S* gd = gx + (o2 * sp.n + start + k) * sp.inner;
                    for (size_t in = 0; in < sp.inner; ++in) gd[in] += gs[in];
                }
        });
    }
    return o;
}

// concatenation over the last axis
template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (first.empty()) throw ShapeError("concat: scalar input");
    size_t total_last = 0;
    for (const auto& t : parts) {
        if (t.rank() != first.size() ||
            !std::equal(first.begin(), first.end() - 1, t.shape().begin())) {
            throw ShapeError("concat: shapes " + shape_str(first) + " and " + shape_str(t.shape()) +
                             " do not match");
        }
        total_last += t.shape().back();
    }
    Shape oshape = first;
    oshape.back() = total_last;
    const size_t rows = shape_numel(first) / first.back();
    std::vector<S> out(rows * total_last);
    size_t off = 0;
    for (const auto& t : parts) {
        const size_t w = t.shape().back();
        const S* p = t.data();
        for (size_t r = 0; r < rows; ++r) std::copy_n(p + r * w, w, out.data() + r * total_last + off);
        off += w;
    }
    TensorT<S> o = detail::make_out(std::move(oshape), std::move(out));
    bool any = false;
    for (const auto& t : parts)
        if (t.grad_active()) any = true;
    if (TapeT<S>::recording() && any) {
        o.set_requires_grad(true);
        struct Part {
            std::shared_ptr<TensorData<S>> d;
            size_t off, w;
            bool need;
        };
        std::vector<Part> ps;
        size_t o2 = 0;
        for (const auto& t : parts) {
            ps.push_back({t.ptr(), o2, t.shape().back(), t.grad_active()});
            o2 += t.shape().back();
        }
        auto od = o.ptr();
        std::vector<const TensorData<S>*> raw;
        for (auto& p : ps) raw.push_back(p.d.get());
        // record() takes an initializer_list; use the two-parent overload trick:
        // register parents manually through repeated record of a single node.
        TapeT<S>* tape = TapeT<S>::current();
        tape->record_multi(od, raw, [ps = std::move(ps), od, rows, total_last]() {
            const S* g = od->grad.data();
            for (const auto& p : ps) {
                if (!p.need) continue;
                p.d->ensure_grad();
                S* gx = p.d->grad.data();
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < p.w; ++j) gx[r * p.w + j] += g[r * total_last + p.off + j];
            }
        });
    }
    return o;
}

template <class S>
TensorT<S> detach(const TensorT<S>& x) {
    return x.detach();
}

}  // namespace forla
