#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "forla/tensor.hpp"

namespace forla {

// Linear layers initialize uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
template <class S>
struct LinearT {
    TensorT<S> weight;  // in x out
    TensorT<S> bias;    // out, absent when has_bias == false
    bool has_bias = true;

    LinearT() = default;
    LinearT(size_t in, size_t out, Rng rng, bool with_bias = true) : has_bias(with_bias) {
        const double bound = 1.0 / std::sqrt(double(in));
        weight = TensorT<S>::param_uniform({in, out}, rng, -bound, bound);
        if (with_bias) bias = TensorT<S>::param_uniform({out}, rng, -bound, bound);
    }

    TensorT<S> operator()(const TensorT<S>& x) const {
        TensorT<S> y = matmul(x, weight);
        return has_bias ? add(y, bias) : y;
    }

    void collect(std::vector<TensorT<S>*>& out) {
        out.push_back(&weight);
        if (has_bias) out.push_back(&bias);
    }
};

// Normalization over the last axis with optional learnable scale/shift.
template <class S>
struct LayerNormT {
    bool affine = true;
    TensorT<S> gamma, beta;

    LayerNormT() = default;
    LayerNormT(size_t dim, bool with_affine) : affine(with_affine) {
        if (affine) {
            gamma = TensorT<S>::param({dim}, std::vector<S>(dim, S(1)));
            beta = TensorT<S>::param({dim}, std::vector<S>(dim, S(0)));
        }
    }

    TensorT<S> operator()(const TensorT<S>& x) const {
        TensorT<S> y = layer_norm(x);
        if (!affine) return y;
        return add(mul(y, gamma), beta);
    }

    void collect(std::vector<TensorT<S>*>& out) {
        if (affine) {
            out.push_back(&gamma);
            out.push_back(&beta);
        }
    }
};

template <class S>
struct MlpT {
    LinearT<S> l1, l2;

    MlpT() = default;
    MlpT(size_t in, size_t hidden, size_t out, Rng rng)
        : l1(in, hidden, rng.split("l1")), l2(hidden, out, rng.split("l2")) {}

    TensorT<S> operator()(const TensorT<S>& x) const { return l2(relu(l1(x))); }

    void collect(std::vector<TensorT<S>*>& out) {
        l1.collect(out);
        l2.collect(out);
    }
};

// Gated recurrent cell over row batches. Convention: the update gate scales
// the candidate, h' = z*n + (1-z)*h, so a closed gate (z = 0) leaves the
// state untouched.
template <class S>
struct GruCellT {
    TensorT<S> wz, uz, bz;
    TensorT<S> wr, ur, br;
    TensorT<S> wn, un, bn_in, bn_hid;

    GruCellT() = default;
    GruCellT(size_t dim, Rng rng) {
        const double bound = 1.0 / std::sqrt(double(dim));
        auto mk = [&](const char* tag) {
            Rng r = rng.split(tag);
            return TensorT<S>::param_uniform({dim, dim}, r, -bound, bound);
        };
        auto mkb = [&](const char* tag) {
            Rng r = rng.split(tag);
            return TensorT<S>::param_uniform({dim}, r, -bound, bound);
        };
        wz = mk("wz"); uz = mk("uz"); bz = mkb("bz");
        wr = mk("wr"); ur = mk("ur"); br = mkb("br");
        wn = mk("wn"); un = mk("un"); bn_in = mkb("bn_in"); bn_hid = mkb("bn_hid");
    }

    TensorT<S> operator()(const TensorT<S>& h, const TensorT<S>& input) const {
        TensorT<S> z = sigmoid(add(add(matmul(input, wz), matmul(h, uz)), bz));
        TensorT<S> r = sigmoid(add(add(matmul(input, wr), matmul(h, ur)), br));
        TensorT<S> n = tanh(add(add(matmul(input, wn), bn_in), mul(r, add(matmul(h, un), bn_hid))));
        TensorT<S> keep = affine(z, S(-1), S(1));  // 1 - z
        return add(mul(z, n), mul(keep, h));
    }

    void collect(std::vector<TensorT<S>*>& out) {
        for (TensorT<S>* t : {&wz, &uz, &bz, &wr, &ur, &br, &wn, &un, &bn_in, &bn_hid}) out.push_back(t);
    }
};

// ---------------------------------------------------------------------------
// parameter set utilities
//
// Modules expose parameters as an ordered list of tensor handles; flattening
// concatenates each tensor row-major in that order. The order is the wire
// contract for snapshots and federation messages.

template <class S>
size_t param_count(std::span<TensorT<S>* const> params) {
    size_t n = 0;
    for (auto* p : params) n += p->numel();
    return n;
}

template <class S>
std::vector<S> flatten_params(std::span<TensorT<S>* const> params) {
    std::vector<S> out;
    out.reserve(param_count(params));
    for (auto* p : params) out.insert(out.end(), p->values().begin(), p->values().end());
    return out;
}

template <class S>
void unflatten_params(std::span<TensorT<S>* const> params, std::span<const S> flat) {
    const size_t want = param_count(params);
    if (flat.size() != want) {
        throw ShapeError("import: expected " + std::to_string(want) + " values, got " +
                         std::to_string(flat.size()));
    }
    size_t off = 0;
    for (auto* p : params) {
        std::copy_n(flat.data() + off, p->numel(), p->data());
        off += p->numel();
    }
}

template <class S>
void zero_grads(std::span<TensorT<S>* const> params) {
    for (auto* p : params) p->zero_grad();
}

// target <- momentum * target + (1 - momentum) * source
template <class S>
void ema_blend(std::span<TensorT<S>* const> target, std::span<TensorT<S>* const> source, S momentum) {
    if (momentum < S(0) || momentum > S(1)) throw ShapeError("ema_blend: momentum out of [0, 1]");
    if (target.size() != source.size()) throw ShapeError("ema_blend: parameter lists differ in length");
    for (size_t i = 0; i < target.size(); ++i) {
        TensorT<S>& t = *target[i];
        const TensorT<S>& s = *source[i];
        if (t.shape() != s.shape()) {
            throw ShapeError("ema_blend: shapes " + shape_str(t.shape()) + " and " + shape_str(s.shape()) +
                             " do not match");
        }
        S* pt = t.data();
        const S* ps = s.data();
        for (size_t j = 0; j < t.numel(); ++j) pt[j] = momentum * pt[j] + (S(1) - momentum) * ps[j];
    }
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay (applied after the update step)

struct AdamConfig {
    float lr = 4e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 4e-4f;
};

template <class S>
struct AdamStateT {
    AdamConfig cfg;
    uint64_t step = 0;
    std::vector<std::vector<S>> m, v;

    AdamStateT() = default;
    explicit AdamStateT(AdamConfig c) : cfg(c) {}

    void init(std::span<TensorT<S>* const> params) {
        m.clear();
        v.clear();
        for (auto* p : params) {
            m.emplace_back(p->numel(), S(0));
            v.emplace_back(p->numel(), S(0));
        }
    }

    // Frozen entries (active[i] == 0) are skipped entirely: no moment update,
    // no weight decay, value bitwise unchanged. Gradients of all listed
    // parameters are cleared afterwards.
    void update(std::span<TensorT<S>* const> params, const std::vector<uint8_t>* active = nullptr) {
        if (m.size() != params.size()) throw ShapeError("adam: state tracks a different parameter list");
        ++step;
        const S bc1 = S(1) - S(std::pow(double(cfg.beta1), double(step)));
        const S bc2 = S(1) - S(std::pow(double(cfg.beta2), double(step)));
        for (size_t i = 0; i < params.size(); ++i) {
            TensorT<S>& p = *params[i];
            if (m[i].size() != p.numel()) throw ShapeError("adam: parameter " + std::to_string(i) + " changed size");
            if (active && !(*active)[i]) continue;
            if (!p.requires_grad()) continue;
            const S* g = p.grad().data();
            if (p.grad().size() != p.numel()) continue;  // never touched by backward
            S* pv = p.data();
            S* mi = m[i].data();
            S* vi = v[i].data();
            const S decay = S(1) - S(cfg.lr) * S(cfg.weight_decay);
            for (size_t j = 0; j < p.numel(); ++j) {
                mi[j] = S(cfg.beta1) * mi[j] + (S(1) - S(cfg.beta1)) * g[j];
                vi[j] = S(cfg.beta2) * vi[j] + (S(1) - S(cfg.beta2)) * g[j] * g[j];
                const S mhat = mi[j] / bc1;
                const S vhat = vi[j] / bc2;
                pv[j] -= S(cfg.lr) * mhat / (std::sqrt(vhat) + S(cfg.eps));
                pv[j] *= decay;
            }
        }
        for (auto* p : params) p->zero_grad();
    }
};

using AdamState = AdamStateT<float>;

}  // namespace forla
