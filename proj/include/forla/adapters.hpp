#pragma once

#include <optional>
#include <string>
#include <vector>

#include "forla/nn.hpp"
#include "forla/tensor.hpp"

// Feature adapters: map stacked per-location features (N x c_tot) to a
// compact representation (N x d).

namespace forla {

enum class AdapterKind { mlp, moe, afm, none };

inline const char* adapter_kind_name(AdapterKind k) {
    switch (k) {
        case AdapterKind::mlp: return "mlp";
        case AdapterKind::moe: return "moe";
        case AdapterKind::afm: return "afm";
        case AdapterKind::none: return "none";
    }
    return "?";
}

struct AdapterConfig {
    AdapterKind kind = AdapterKind::afm;
    size_t c_tot = 40;
    size_t d = 16;
    size_t hidden = 64;        // mlp only
    size_t experts = 3;        // moe only; one expert per stacked model by default
    float afm_gate_init = 2.0f;  // sigmoid(2) ~ 0.88, near pass-through
    bool afm_input_conditioned = false;  // SE-style gates computed from the input
};

template <class S>
class AdapterT {
public:
    AdapterT() = default;

    AdapterT(const AdapterConfig& cfg, Rng rng) : cfg_(cfg) {
        if (cfg.kind == AdapterKind::none) {
            cfg_.d = cfg_.c_tot;  // pass-through keeps the stacked width
            return;
        }
        if (cfg.d >= cfg.c_tot) {
            throw ShapeError("adapter: d = " + std::to_string(cfg.d) + " must be smaller than c_tot = " +
                             std::to_string(cfg.c_tot));
        }
        switch (cfg.kind) {
            case AdapterKind::mlp:
                l1_ = LinearT<S>(cfg.c_tot, cfg.hidden, rng.split("l1"));
                l2_ = LinearT<S>(cfg.hidden, cfg.d, rng.split("l2"));
                break;
            case AdapterKind::moe:
                if (cfg.experts < 1) throw ShapeError("adapter: moe needs at least one expert");
                for (size_t e = 0; e < cfg.experts; ++e)
                    experts_.emplace_back(cfg.c_tot, cfg.d, rng.split(mix64(0x0e, e)));
                gate_ = LinearT<S>(cfg.c_tot, cfg.experts, rng.split("gate"));
                break;
            case AdapterKind::afm:
                mask_ = TensorT<S>::param({cfg.c_tot}, std::vector<S>(cfg.c_tot, S(cfg.afm_gate_init)));
                if (cfg.afm_input_conditioned) se_ = LinearT<S>(cfg.c_tot, cfg.c_tot, rng.split("se"));
                proj_ = LinearT<S>(cfg.c_tot, cfg.d, rng.split("proj"));
                break;
            case AdapterKind::none:
                break;
        }
    }

    const AdapterConfig& config() const { return cfg_; }
    size_t out_dim() const { return cfg_.d; }

    // features: N x c_tot -> N x d. When gates_out is given (MoE), the
    // per-location expert weights are copied there for inspection.
    TensorT<S> forward(const TensorT<S>& f, std::vector<S>* gates_out = nullptr) const {
        if (f.rank() != 2 || f.shape()[1] != cfg_.c_tot) {
            throw ShapeError("adapter: input " + shape_str(f.shape()) + " does not provide " +
                             std::to_string(cfg_.c_tot) + " channels");
        }
        switch (cfg_.kind) {
            case AdapterKind::none:
                return f;
            case AdapterKind::mlp:
                return l2_(relu(l1_(f)));
            case AdapterKind::moe: {
                TensorT<S> alpha = softmax(gate_(f), 1);  // N x E, rows sum to 1
                if (gates_out) *gates_out = alpha.values();
                TensorT<S> out;
                for (size_t e = 0; e < experts_.size(); ++e) {
                    TensorT<S> weighted = scale_rows(experts_[e](f), slice(alpha, 1, e, 1));
                    out = e == 0 ? weighted : add(out, weighted);
                }
                return out;
            }
            case AdapterKind::afm: {
                TensorT<S> gates =
                    cfg_.afm_input_conditioned ? sigmoid(se_(f)) : sigmoid(mask_);
                return proj_(mul(f, gates));
            }
        }
        throw ShapeError("adapter: unknown kind");
    }

    // Ordering contract: layers in construction order, each tensor row-major.
    //   mlp:  l1.weight, l1.bias, l2.weight, l2.bias
    //   moe:  expert_e.weight, expert_e.bias (e ascending), gate.weight, gate.bias
    //   afm:  mask, [se.weight, se.bias,] proj.weight, proj.bias
    std::vector<TensorT<S>*> params() {
        std::vector<TensorT<S>*> out;
        switch (cfg_.kind) {
            case AdapterKind::none:
                break;
            case AdapterKind::mlp:
                l1_.collect(out);
                l2_.collect(out);
                break;
            case AdapterKind::moe:
                for (auto& e : experts_) e.collect(out);
                gate_.collect(out);
                break;
            case AdapterKind::afm:
                out.push_back(&mask_);
                if (cfg_.afm_input_conditioned) se_.collect(out);
                proj_.collect(out);
                break;
        }
        return out;
    }

    std::vector<S> export_params() {
        auto p = params();
        return flatten_params<S>(p);
    }

    void import_params(std::span<const S> flat) {
        auto p = params();
        unflatten_params<S>(p, flat);
    }

    std::string fingerprint_text() const {
        return std::string("adapter:") + adapter_kind_name(cfg_.kind) + ":" + std::to_string(cfg_.c_tot) + ":" +
               std::to_string(cfg_.d) + ":" + std::to_string(cfg_.hidden) + ":" + std::to_string(cfg_.experts) +
               ":" + (cfg_.afm_input_conditioned ? "se" : "static");
    }

private:
    AdapterConfig cfg_;
    LinearT<S> l1_, l2_;                 // mlp
    std::vector<LinearT<S>> experts_;    // moe
    LinearT<S> gate_;                    // moe
    TensorT<S> mask_;                    // afm
    LinearT<S> se_;                      // afm input-conditioned variant
    LinearT<S> proj_;                    // afm
};

using Adapter = AdapterT<float>;

}  // namespace forla
