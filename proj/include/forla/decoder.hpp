#pragma once

#include <string>
#include <vector>

#include "forla/mask.hpp"
#include "forla/nn.hpp"
#include "forla/tensor.hpp"

// Spatial-broadcast decoding: each slot is copied to every grid position,
// shifted by a learned positional embedding, and pushed through a shared MLP
// whose last channel is the slot's alpha logit. Alphas are softmaxed across
// slots per location and mix the per-slot feature reconstructions.

namespace forla {

struct DecoderConfig {
    size_t slot_dim = 16;
    size_t positions = 256;  // N = H * W
    size_t c_target = 40;    // c_tot for the student, d for the teacher
    size_t hidden = 64;
};

template <class S>
struct ReconstructionT {
    TensorT<S> features;                  // N x c_target, alpha-mixed
    TensorT<S> alpha;                     // N x K, rows sum to 1
    std::vector<TensorT<S>> components;   // K tensors, N x c_target
};

template <class S>
class BroadcastDecoderT {
public:
    BroadcastDecoderT() = default;

    BroadcastDecoderT(const DecoderConfig& cfg, Rng rng) : cfg_(cfg) {
        const double bound = 1.0 / std::sqrt(double(cfg.slot_dim));
        Rng pos_rng = rng.split("pos");
        pos_ = TensorT<S>::param_uniform({cfg.positions, cfg.slot_dim}, pos_rng, -bound, bound);
        l1_ = LinearT<S>(cfg.slot_dim, cfg.hidden, rng.split("l1"));
        l2_ = LinearT<S>(cfg.hidden, cfg.hidden, rng.split("l2"));
        l3_ = LinearT<S>(cfg.hidden, cfg.c_target + 1, rng.split("l3"));
    }

    const DecoderConfig& config() const { return cfg_; }

    ReconstructionT<S> decode(const TensorT<S>& slots) const {
        if (slots.rank() != 2 || slots.shape()[1] != cfg_.slot_dim) {
            throw ShapeError("decoder: slots " + shape_str(slots.shape()) + " do not have dim " +
                             std::to_string(cfg_.slot_dim));
        }
        const size_t K = slots.shape()[0];
        // First layer split: l1(pos + s_k) = pos*W1 + (s_k*W1 + b1); the
        // positional half is shared by every slot.
        TensorT<S> pos_part = matmul(pos_, l1_.weight);  // N x hidden
        TensorT<S> slot_part = add(matmul(slots, l1_.weight), l1_.bias);  // K x hidden
        ReconstructionT<S> rec;
        std::vector<TensorT<S>> alpha_logits;
        rec.components.reserve(K);
        alpha_logits.reserve(K);
        for (size_t k = 0; k < K; ++k) {
            TensorT<S> row = reshape(slice(slot_part, 0, k, 1), {cfg_.hidden});
            TensorT<S> h1 = relu(add(pos_part, row));
            TensorT<S> out = l3_(relu(l2_(h1)));  // N x (c_target + 1)
            rec.components.push_back(slice(out, 1, 0, cfg_.c_target));
            alpha_logits.push_back(slice(out, 1, cfg_.c_target, 1));
        }
        rec.alpha = softmax(concat(alpha_logits), 1);  // N x K
        for (size_t k = 0; k < K; ++k) {
            TensorT<S> mixed = scale_rows(rec.components[k], slice(rec.alpha, 1, k, 1));
            rec.features = k == 0 ? mixed : add(rec.features, mixed);
        }
        return rec;
    }

    // Ordering contract: pos, l1.w, l1.b, l2.w, l2.b, l3.w, l3.b.
    std::vector<TensorT<S>*> params() {
        std::vector<TensorT<S>*> out;
        out.push_back(&pos_);
        l1_.collect(out);
        l2_.collect(out);
        l3_.collect(out);
        return out;
    }

    std::string fingerprint_text() const {
        return "dec:" + std::to_string(cfg_.slot_dim) + ":" + std::to_string(cfg_.positions) + ":" +
               std::to_string(cfg_.c_target) + ":" + std::to_string(cfg_.hidden);
    }

private:
    DecoderConfig cfg_;
    TensorT<S> pos_;
    LinearT<S> l1_, l2_, l3_;
};

// Mean squared error over all H*W*C elements.
template <class S>
TensorT<S> student_loss(const TensorT<S>& reconstructed, const TensorT<S>& target) {
    return mse(reconstructed, target);
}

// Teacher reconstruction loss. With stop_gradient (stage 1) the target must
// already be cut off from the adapter; a live target is a wiring bug.
template <class S>
TensorT<S> teacher_loss(const TensorT<S>& reconstructed, const TensorT<S>& target, bool stop_gradient) {
    if (stop_gradient && target.grad_active()) {
        throw TapeError("teacher_loss: stage-1 target carries gradient; detach it");
    }
    return mse(reconstructed, target);
}

// Per-location argmax over slots; ties go to the lowest slot index.
template <class S>
MaskSet masks_from_alpha(const TensorT<S>& alpha, size_t h, size_t w) {
    if (alpha.rank() != 2 || alpha.shape()[0] != h * w) {
        throw ShapeError("masks_from_alpha: alpha " + shape_str(alpha.shape()) + " does not cover a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
    }
    const size_t K = alpha.shape()[1];
    MaskSet m;
    m.h = h;
    m.w = w;
    m.labels.resize(h * w);
    const S* p = alpha.data();
    for (size_t i = 0; i < h * w; ++i) {
        size_t best = 0;
        for (size_t k = 1; k < K; ++k)
            if (p[i * K + k] > p[i * K + best]) best = k;
        m.labels[i] = int(best);
    }
    return m;
}

using BroadcastDecoder = BroadcastDecoderT<float>;
using Reconstruction = ReconstructionT<float>;

}  // namespace forla
