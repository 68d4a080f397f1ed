#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "forla/nn.hpp"
#include "forla/tensor.hpp"

// Iterative slot attention encoder: N input features -> K slot vectors.
// Queries come from the inputs and keys from the slots; the softmax runs
// over the slot axis, so each input distributes one unit of attention.

namespace forla {

struct SlotAttentionConfig {
    size_t input_dim = 16;
    size_t slot_dim = 16;
    size_t num_slots = 5;
    size_t iters = 3;
    size_t mlp_hidden = 32;
    bool layernorm_affine = true;
    // Renormalize attention over the input axis before aggregating values
    // (weighted mean). Plain-sum aggregation is kept for ablation.
    bool weighted_mean = true;
    double init_sigma = 1.0;  // starting value of exp(log_sigma); 0 collapses init to mu
};

template <class S>
struct SlotStateT {
    TensorT<S> slots;  // K x slot_dim
    TensorT<S> attn;   // N x K, final iteration, rows sum to 1
};

template <class S>
class SlotAttentionT {
public:
    SlotAttentionT() = default;

    SlotAttentionT(const SlotAttentionConfig& cfg, Rng rng) : cfg_(cfg) {
        if (cfg.num_slots < 2) throw ShapeError("slot attention: needs at least 2 slots");
        if (cfg.iters < 1) throw ShapeError("slot attention: needs at least 1 iteration");
        q_proj_ = LinearT<S>(cfg.input_dim, cfg.slot_dim, rng.split("q"), /*with_bias=*/false);
        k_proj_ = LinearT<S>(cfg.slot_dim, cfg.slot_dim, rng.split("k"), false);
        v_proj_ = LinearT<S>(cfg.input_dim, cfg.slot_dim, rng.split("v"), false);
        gru_ = GruCellT<S>(cfg.slot_dim, rng.split("gru"));
        mlp_ = MlpT<S>(cfg.slot_dim, cfg.mlp_hidden, cfg.slot_dim, rng.split("mlp"));
        ln_input_ = LayerNormT<S>(cfg.input_dim, cfg.layernorm_affine);
        ln_slots_ = LayerNormT<S>(cfg.slot_dim, cfg.layernorm_affine);
        ln_mlp_ = LayerNormT<S>(cfg.slot_dim, cfg.layernorm_affine);
        const double bound = 1.0 / std::sqrt(double(cfg.slot_dim));
        Rng mu_rng = rng.split("mu");
        mu_ = TensorT<S>::param_uniform({cfg.slot_dim}, mu_rng, -bound, bound);
        const double ls = cfg.init_sigma > 0 ? std::log(cfg.init_sigma) : -1e30;
        log_sigma_ = TensorT<S>::param({cfg.slot_dim}, std::vector<S>(cfg.slot_dim, S(ls)));
    }

    const SlotAttentionConfig& config() const { return cfg_; }

    // slots ~ mu + exp(log_sigma) * eps, one standard-normal eps per slot.
    TensorT<S> init_slots(Rng rng) const {
        const size_t K = cfg_.num_slots, D = cfg_.slot_dim;
        std::vector<S> eps(K * D);
        for (auto& e : eps) e = S(rng.normal());
        TensorT<S> noise = TensorT<S>::from({K, D}, std::move(eps));
        return add(mul(noise, exp(log_sigma_)), mu_);
    }

    TensorT<S> attention_weights(const TensorT<S>& inputs, const TensorT<S>& slots) const {
        check_input(inputs);
        return attention_from(q_proj_(ln_input_(inputs)), slots);
    }

    TensorT<S> slot_update(const TensorT<S>& slots, const TensorT<S>& inputs, const TensorT<S>& attn) const {
        check_input(inputs);
        return update_from(slots, v_proj_(ln_input_(inputs)), attn);
    }

    SlotStateT<S> run(const TensorT<S>& inputs, Rng slot_rng) const {
        check_input(inputs);
        TensorT<S> x = ln_input_(inputs);
        TensorT<S> q = q_proj_(x);
        TensorT<S> v = v_proj_(x);
        TensorT<S> slots = init_slots(slot_rng);
        TensorT<S> attn;
        for (size_t t = 0; t < cfg_.iters; ++t) {
            attn = attention_from(q, slots);
            slots = update_from(slots, v, attn);
        }
        return {slots, attn};
    }

    // Runs the iterations from caller-provided initial slots (permutation and
    // determinism tests drive this directly).
    SlotStateT<S> run_from(const TensorT<S>& inputs, TensorT<S> slots) const {
        check_input(inputs);
        TensorT<S> x = ln_input_(inputs);
        TensorT<S> q = q_proj_(x);
        TensorT<S> v = v_proj_(x);
        TensorT<S> attn;
        for (size_t t = 0; t < cfg_.iters; ++t) {
            attn = attention_from(q, slots);
            slots = update_from(slots, v, attn);
        }
        return {slots, attn};
    }

    const GruCellT<S>& gru() const { return gru_; }
    GruCellT<S>& gru() { return gru_; }

    // Ordering contract: q.weight, k.weight, v.weight, gru (wz, uz, bz, wr,
    // ur, br, wn, un, bn_in, bn_hid), mlp (l1.w, l1.b, l2.w, l2.b), then the
    // three layer norms (gamma, beta each, when affine), mu, log_sigma.
    std::vector<TensorT<S>*> params() {
        std::vector<TensorT<S>*> out;
        q_proj_.collect(out);
        k_proj_.collect(out);
        v_proj_.collect(out);
        gru_.collect(out);
        mlp_.collect(out);
        ln_input_.collect(out);
        ln_slots_.collect(out);
        ln_mlp_.collect(out);
        out.push_back(&mu_);
        out.push_back(&log_sigma_);
        return out;
    }

    std::string fingerprint_text() const {
        return "sa:" + std::to_string(cfg_.input_dim) + ":" + std::to_string(cfg_.slot_dim) + ":" +
               std::to_string(cfg_.num_slots) + ":" + std::to_string(cfg_.iters) + ":" +
               std::to_string(cfg_.mlp_hidden) + ":" + (cfg_.layernorm_affine ? "affine" : "plain") + ":" +
               (cfg_.weighted_mean ? "wmean" : "sum");
    }

private:
    void check_input(const TensorT<S>& inputs) const {
        if (inputs.rank() != 2 || inputs.shape()[1] != cfg_.input_dim) {
            throw ShapeError("slot attention: input " + shape_str(inputs.shape()) + " does not provide " +
                             std::to_string(cfg_.input_dim) + " features");
        }
    }

    TensorT<S> attention_from(const TensorT<S>& q, const TensorT<S>& slots) const {
        TensorT<S> k = k_proj_(ln_slots_(slots));
        TensorT<S> logits = scale(matmul(q, transpose(k)), S(1.0 / std::sqrt(double(cfg_.slot_dim))));
        return softmax(logits, 1);  // over slots
    }

    TensorT<S> update_from(const TensorT<S>& slots, const TensorT<S>& v, const TensorT<S>& attn) const {
        TensorT<S> weights = attn;
        if (cfg_.weighted_mean) {
            TensorT<S> denom = affine(reduce_sum(attn, 0), S(1), S(1e-12));  // per-slot mass
            weights = div(attn, denom);
        }
        TensorT<S> updates = matmul(transpose(weights), v);  // K x slot_dim
        TensorT<S> next = gru_(slots, updates);
        return add(next, mlp_(ln_mlp_(next)));
    }

    SlotAttentionConfig cfg_;
    LinearT<S> q_proj_, k_proj_, v_proj_;
    GruCellT<S> gru_;
    MlpT<S> mlp_;
    LayerNormT<S> ln_input_, ln_slots_, ln_mlp_;
    TensorT<S> mu_, log_sigma_;
};

using SlotAttention = SlotAttentionT<float>;
using SlotState = SlotStateT<float>;

}  // namespace forla
