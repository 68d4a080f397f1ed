#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forla/adapters.hpp"
#include "forla/decoder.hpp"
#include "forla/io.hpp"
#include "forla/nn.hpp"
#include "forla/slot_attention.hpp"
#include "forla/synth.hpp"

// One federated client: student and teacher branches over the same adapter /
// slot-attention architecture, trained in two stages. Stage 1 blocks all
// gradients into the teacher adapter and tracks the student via EMA; stage 2
// trains the teacher end-to-end and periodically averages the shared modules
// of the two branches (local FedAvg).

namespace forla {

struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Stage : uint8_t { ema = 0, local_fedavg = 1 };

inline const char* stage_name(Stage s) { return s == Stage::ema ? "EMA" : "LOCAL_FEDAVG"; }

struct ClientConfig {
    uint64_t client_id = 0;
    uint64_t seed = 1;
    AdapterConfig adapter;
    SlotAttentionConfig slot_attention;
    size_t decoder_hidden = 64;
    AdamConfig optim;  // lr 4e-4, decoupled weight decay 4e-4
    size_t batch = 16;
    float ema_momentum = 0.996f;
    float local_alpha = 0.5f;  // student weight in the local blend
    uint64_t stage_switch_iter = 2000;
    uint64_t local_fedavg_period = 1000;
    float fedprox_mu = 0.0f;
    bool literal_blend = false;   // blend writes back to the student only
    bool teacher_enabled = true;  // false: student-only training
};

struct TrainStepReport {
    uint64_t iter = 0;
    float loss1 = 0, loss2 = 0;
    float feat_variance = 0;
    Stage stage = Stage::ema;
    bool blended = false;
    bool switched = false;
};

class Client {
public:
    enum class Freeze { adapter, slot_attention };

    Client(const ClientConfig& cfg, std::vector<Scene> scenes);

    // One optimization step on the next deterministic batch.
    TrainStepReport train_step();

    // Explicit stage transition; no-op with a warning when already switched.
    void stage_switch();

    Stage stage() const { return stage_; }
    uint64_t iter() const { return iter_; }
    uint32_t n_scenes() const { return uint32_t(scenes_.size()); }
    uint64_t client_id() const { return cfg_.client_id; }
    const ClientConfig& config() const { return cfg_; }

    // Shared-parameter surface: adapter block then slot-attention block,
    // each tensor row-major in its module's documented order.
    size_t shared_param_count();
    size_t full_param_count();  // every trainable parameter, both branches
    std::vector<float> snapshot_shared();
    void apply_global(std::span<const float> flat);
    bool has_global() const { return !w_global_.empty(); }
    uint64_t fingerprint() const;

    // Local fine-tuning with one shared module frozen; decoders stay
    // trainable. Requires a previously applied global model.
    void personalize(Freeze freeze, size_t steps);

    std::span<const TrainStepReport> history() const { return history_; }
    std::string event_log() const;  // iter \t loss1 \t loss2 \t stage \t blend_flag
    std::span<const float> epoch_losses() const { return epoch_losses_; }
    float min_feat_variance() const { return min_feat_variance_; }

    const std::vector<Scene>& scenes() const { return scenes_; }

    Adapter& student_adapter() { return adapter_s_; }
    SlotAttention& student_slot_attention() { return sa_s_; }
    BroadcastDecoder& student_decoder() { return dec_s_; }
    Adapter& teacher_adapter() { return adapter_t_; }
    SlotAttention& teacher_slot_attention() { return sa_t_; }
    BroadcastDecoder& teacher_decoder() { return dec_t_; }

    // Gradient buffers of the teacher adapter after the latest step; used by
    // the stage-contract tests.
    std::vector<float> teacher_adapter_grad_norms();

    void save(std::vector<uint8_t>& out);
    void load(io::Reader& in);

private:
    std::vector<size_t> batch_indices() const;
    void blend_branches();
    void apply_freeze();
    void forward_backward_student(const StackedFeatures& f, uint64_t slot_seed, float inv_batch, double& loss_acc,
                                  double& sum, double& sumsq, size_t& count);
    void forward_backward_teacher(const StackedFeatures& f, uint64_t slot_seed, float inv_batch, double& loss_acc);

    ClientConfig cfg_;
    std::vector<Scene> scenes_;
    std::vector<StackedFeatures> features_;

    Adapter adapter_s_, adapter_t_;
    SlotAttention sa_s_, sa_t_;
    BroadcastDecoder dec_s_, dec_t_;

    std::vector<Tensor*> student_params_, teacher_params_, shared_params_;
    std::vector<uint8_t> teacher_active_;  // stage-dependent adam mask
    std::vector<uint8_t> student_active_;
    AdamState adam_s_, adam_t_;

    Stage stage_ = Stage::ema;
    uint64_t iter_ = 0;
    std::optional<Freeze> frozen_;
    std::vector<float> w_global_;  // fedprox anchor, shared layout
    float min_feat_variance_ = std::numeric_limits<float>::max();

    std::vector<TrainStepReport> history_;
    std::vector<float> epoch_losses_;
    double epoch_loss_acc_ = 0;
    size_t epoch_step_count_ = 0;

    size_t teacher_adapter_param_count_ = 0;
};

}  // namespace forla
