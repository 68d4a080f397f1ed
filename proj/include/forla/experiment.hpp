#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "forla/client.hpp"
#include "forla/evaluate.hpp"
#include "forla/federation.hpp"

// Experiment harness: configuration, the five training regimes, early
// stopping, checkpointing, mode comparison, and feature export.

namespace forla {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Mode { individual, centralized, slot_fedavg, forla, forla_personalize };

const char* mode_name(Mode m);
Mode mode_from_name(const std::string& name);

struct ExperimentConfig {
    Mode mode = Mode::forla;
    AdapterKind adapter = AdapterKind::afm;
    AggregatorKind aggregator = AggregatorKind::fedavg;
    uint64_t seed = 1;

    struct Data {
        size_t domains = 2;
        double overlap = 0.5;  // prototype-pool overlap between domains
        size_t grid = 16;
        size_t scenes_per_domain = 64;
        size_t eval_scenes_per_domain = 50;
        size_t objects_min = 1, objects_max = 4;
        size_t prototypes_per_domain = 6;
        float noise = 0.05f;
        std::vector<uint32_t> channels = {16, 8, 16};
        PartitionMode partition = PartitionMode::one_domain_per_client;
        double split_fraction = 0.5;
        std::string cache_dir;  // when set, gen-data writes and train reads here
    } data;

    struct Model {
        size_t d = 16;
        size_t slots = 5;
        size_t slot_dim = 16;
        size_t iterations = 3;
        size_t adapter_hidden = 64;
        size_t sa_mlp_hidden = 32;
        size_t decoder_hidden = 64;
        size_t experts = 3;
        bool layernorm_affine = true;
        bool weighted_mean = true;
        bool afm_input_conditioned = false;
    } model;

    struct Train {
        size_t iterations = 3000;  // local iterations per client
        size_t batch = 16;
        float lr = 4e-4f;
        float weight_decay = 4e-4f;
        size_t global_round_period = 100;
        size_t local_fedavg_period = 1000;
        size_t stage_switch_iter = 2000;
        float ema_momentum = 0.996f;
        float local_alpha = 0.5f;
        bool literal_blend = false;
        float fedprox_mu = 1e-3f;
        float fedadam_lr = 1e-2f;
        size_t min_epochs = 0;
        size_t early_stop_patience = 30;
        bool parallel_clients = true;
    } train;

    struct Personalize {
        Client::Freeze freeze = Client::Freeze::adapter;
        size_t steps = 200;
    } personalize;

    struct Eval {
        bool use_attention_masks = false;
        bool eval_teacher = false;
    } eval;

    std::string out_dir;

    void validate() const;  // throws ConfigError
    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
    uint64_t hash() const;

    size_t clients() const;
    size_t rounds() const;  // training chunks of global_round_period iterations
    bool federated() const { return mode != Mode::individual && mode != Mode::centralized; }
};

// Track per-epoch student loss; fires after `patience` consecutive epochs
// without improvement, once past the minimum epoch count.
struct EarlyStopper {
    size_t min_epochs = 0;
    size_t patience = 30;
    float best = std::numeric_limits<float>::max();
    size_t stagnant = 0;
    size_t epochs_seen = 0;
    bool stopped = false;

    bool observe(float epoch_loss) {
        ++epochs_seen;
        if (epoch_loss < best) {
            best = epoch_loss;
            stagnant = 0;
        } else {
            ++stagnant;
        }
        if (epochs_seen >= min_epochs && stagnant >= patience) stopped = true;
        return stopped;
    }
};

struct ExperimentResult {
    MetricReport report;
    std::optional<MetricReport> report_before_personalization;
    CommLedger ledger;
    CommReport comm;
    std::vector<std::vector<TrainStepReport>> histories;  // per client
    std::vector<std::string> event_logs;                  // per client
    float min_feat_variance = std::numeric_limits<float>::max();
    size_t shared_params = 0;
    size_t full_model_params = 0;
    std::vector<float> final_global;  // federated modes
};

// Stepwise runner so training can checkpoint and resume mid-run.
class ExperimentRun {
public:
    explicit ExperimentRun(const ExperimentConfig& cfg);

    // One chunk of global_round_period local iterations per active client
    // (with aggregation in federated modes). False once the budget is
    // exhausted or every client early-stopped.
    bool step_round();

    uint64_t rounds_done() const { return rounds_done_; }
    void save_checkpoint(const std::string& path);
    void load_checkpoint(const std::string& path);

    // Personalization (when configured), evaluation, reports.
    ExperimentResult finish();

    const std::vector<std::unique_ptr<Client>>& clients() const { return clients_; }
    FederationRunner* runner() { return runner_.get(); }

    // Scenes used for held-out evaluation (per domain).
    const std::vector<Scene>& eval_scenes() const { return eval_scenes_; }

private:
    void train_chunk(Client& client, size_t iters, EarlyStopper& stopper);
    MetricReport evaluate_current();

    ExperimentConfig cfg_;
    std::vector<std::unique_ptr<Client>> clients_;
    std::vector<EarlyStopper> stoppers_;
    std::unique_ptr<FederationRunner> runner_;
    std::vector<Scene> eval_scenes_;
    uint64_t rounds_done_ = 0;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg);

// Builds the per-domain specs implied by the config (prototype pools with
// the configured overlap) and the deterministic scene streams.
std::vector<PseudoModelSpec> build_models(const ExperimentConfig& cfg);
std::vector<DomainSpec> build_domains(const ExperimentConfig& cfg);
std::vector<Scene> build_train_scenes(const ExperimentConfig& cfg, uint32_t domain);
std::vector<Scene> build_eval_scenes(const ExperimentConfig& cfg, uint32_t domain);

// Paired comparison across modes sharing seeds and data configuration.
struct CompareResult {
    std::vector<std::string> modes;
    std::vector<std::string> domains;
    // mean mbo / fg_ari per (mode, domain) over seeds
    std::vector<std::vector<MetricReport::Row>> rows;  // [mode][domain]
    std::string to_table() const;
};
CompareResult compare_modes(const ExperimentConfig& base, const std::vector<Mode>& modes,
                            const std::vector<uint64_t>& seeds);

// Adapted features of the given scenes, written in the dump container.
void export_features(ExperimentRun& run, const std::string& path);

}  // namespace forla
