#include "forla/experiment.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

namespace forla {

using nlohmann::json;

const char* mode_name(Mode m) {
    switch (m) {
        case Mode::individual: return "individual";
        case Mode::centralized: return "centralized";
        case Mode::slot_fedavg: return "slot-fedavg";
        case Mode::forla: return "forla";
        case Mode::forla_personalize: return "forla-personalize";
    }
    return "?";
}

Mode mode_from_name(const std::string& name) {
    for (Mode m : {Mode::individual, Mode::centralized, Mode::slot_fedavg, Mode::forla, Mode::forla_personalize})
        if (name == mode_name(m)) return m;
    throw ConfigError("unknown mode '" + name + "'");
}

namespace {

AdapterKind adapter_from_name(const std::string& name) {
    for (AdapterKind k : {AdapterKind::mlp, AdapterKind::moe, AdapterKind::afm, AdapterKind::none})
        if (name == adapter_kind_name(k)) return k;
    throw ConfigError("unknown adapter '" + name + "'");
}

AggregatorKind aggregator_from_name(const std::string& name) {
    for (AggregatorKind k : {AggregatorKind::fedavg, AggregatorKind::fedprox, AggregatorKind::fedadam})
        if (name == aggregator_name(k)) return k;
    throw ConfigError("unknown aggregator '" + name + "'");
}

template <class T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

size_t ExperimentConfig::clients() const {
    switch (mode) {
        case Mode::individual: return data.domains;
        case Mode::centralized: return 1;
        default:
            if (data.partition == PartitionMode::one_domain_per_client) return data.domains;
            return data.domains * size_t(std::llround(1.0 / data.split_fraction));
    }
}

size_t ExperimentConfig::rounds() const {
    return (train.iterations + train.global_round_period - 1) / train.global_round_period;
}

void ExperimentConfig::validate() const {
    if (data.domains == 0) throw ConfigError("data.domains must be positive");
    if (data.grid < 8) throw ConfigError("data.grid must be at least 8");
    if (data.channels.empty()) throw ConfigError("data.channels must list at least one model");
    if (data.scenes_per_domain == 0 || data.eval_scenes_per_domain == 0)
        throw ConfigError("scene counts must be positive");
    if (data.objects_min < 1 || data.objects_max < data.objects_min)
        throw ConfigError("objects range is invalid");
    if (data.objects_max > model.slots - 1)
        throw ConfigError("objects_max must leave one slot for the background (objects_max <= slots - 1)");
    if (data.prototypes_per_domain == 0) throw ConfigError("prototypes_per_domain must be positive");
    if (data.overlap < 0.0 || data.overlap > 1.0) throw ConfigError("overlap must be in [0, 1]");
    size_t c_tot = 0;
    for (uint32_t c : data.channels) c_tot += c;
    if (adapter != AdapterKind::none && model.d >= c_tot)
        throw ConfigError("model.d must be smaller than the stacked channel count");
    if (model.slots < 2 || model.iterations < 1 || model.slot_dim == 0)
        throw ConfigError("slot attention dimensions are invalid");
    if (train.batch == 0 || train.iterations == 0) throw ConfigError("training budget is invalid");
    if (train.global_round_period == 0 || train.local_fedavg_period == 0)
        throw ConfigError("cadences must be positive");
    if (!federated() && aggregator != AggregatorKind::fedavg)
        throw ConfigError(std::string(aggregator_name(aggregator)) + " requires a federated mode");
    if (data.partition == PartitionMode::split_within_domain) {
        if (data.split_fraction <= 0.0 || data.split_fraction > 1.0)
            throw ConfigError("split_fraction must be in (0, 1]");
        if (double(data.scenes_per_domain) * data.split_fraction < 1.0)
            throw ConfigError("split_fraction leaves a client without scenes");
    }
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["mode"] = mode_name(mode);
    j["adapter"] = adapter_kind_name(adapter);
    j["aggregator"] = aggregator_name(aggregator);
    j["seed"] = seed;
    j["data"] = {{"domains", data.domains},
                 {"overlap", data.overlap},
                 {"grid", data.grid},
                 {"scenes_per_domain", data.scenes_per_domain},
                 {"eval_scenes_per_domain", data.eval_scenes_per_domain},
                 {"objects_min", data.objects_min},
                 {"objects_max", data.objects_max},
                 {"prototypes_per_domain", data.prototypes_per_domain},
                 {"noise", data.noise},
                 {"channels", data.channels},
                 {"partition", data.partition == PartitionMode::one_domain_per_client ? "one-domain-per-client"
                                                                                      : "split-within-domain"},
                 {"split_fraction", data.split_fraction},
                 {"cache_dir", data.cache_dir}};
    j["model"] = {{"d", model.d},
                  {"slots", model.slots},
                  {"slot_dim", model.slot_dim},
                  {"iterations", model.iterations},
                  {"adapter_hidden", model.adapter_hidden},
                  {"sa_mlp_hidden", model.sa_mlp_hidden},
                  {"decoder_hidden", model.decoder_hidden},
                  {"experts", model.experts},
                  {"layernorm_affine", model.layernorm_affine},
                  {"weighted_mean", model.weighted_mean},
                  {"afm_input_conditioned", model.afm_input_conditioned}};
    j["train"] = {{"iterations", train.iterations},
                  {"batch", train.batch},
                  {"lr", train.lr},
                  {"weight_decay", train.weight_decay},
                  {"global_round_period", train.global_round_period},
                  {"local_fedavg_period", train.local_fedavg_period},
                  {"stage_switch_iter", train.stage_switch_iter},
                  {"ema_momentum", train.ema_momentum},
                  {"local_alpha", train.local_alpha},
                  {"literal_blend", train.literal_blend},
                  {"fedprox_mu", train.fedprox_mu},
                  {"fedadam_lr", train.fedadam_lr},
                  {"min_epochs", train.min_epochs},
                  {"early_stop_patience", train.early_stop_patience},
                  {"parallel_clients", train.parallel_clients}};
    j["personalize"] = {{"freeze", personalize.freeze == Client::Freeze::adapter ? "adapter" : "slot_attention"},
                        {"steps", personalize.steps}};
    j["eval"] = {{"use_attention_masks", eval.use_attention_masks}, {"eval_teacher", eval.eval_teacher}};
    j["out_dir"] = out_dir;
    return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    ExperimentConfig cfg;
    try {
        if (j.contains("mode")) cfg.mode = mode_from_name(j.at("mode").get<std::string>());
        if (j.contains("adapter")) cfg.adapter = adapter_from_name(j.at("adapter").get<std::string>());
        if (j.contains("aggregator")) cfg.aggregator = aggregator_from_name(j.at("aggregator").get<std::string>());
        maybe(j, "seed", cfg.seed);
        maybe(j, "out_dir", cfg.out_dir);
        if (j.contains("data")) {
            const json& d = j.at("data");
            maybe(d, "domains", cfg.data.domains);
            maybe(d, "overlap", cfg.data.overlap);
            maybe(d, "grid", cfg.data.grid);
            maybe(d, "scenes_per_domain", cfg.data.scenes_per_domain);
            maybe(d, "eval_scenes_per_domain", cfg.data.eval_scenes_per_domain);
            maybe(d, "objects_min", cfg.data.objects_min);
            maybe(d, "objects_max", cfg.data.objects_max);
            maybe(d, "prototypes_per_domain", cfg.data.prototypes_per_domain);
            maybe(d, "noise", cfg.data.noise);
            maybe(d, "channels", cfg.data.channels);
            maybe(d, "split_fraction", cfg.data.split_fraction);
            maybe(d, "cache_dir", cfg.data.cache_dir);
            if (d.contains("partition")) {
                const std::string p = d.at("partition").get<std::string>();
                if (p == "one-domain-per-client")
                    cfg.data.partition = PartitionMode::one_domain_per_client;
                else if (p == "split-within-domain")
                    cfg.data.partition = PartitionMode::split_within_domain;
                else
                    throw ConfigError("unknown partition '" + p + "'");
            }
        }
        if (j.contains("model")) {
            const json& m = j.at("model");
            maybe(m, "d", cfg.model.d);
            maybe(m, "slots", cfg.model.slots);
            maybe(m, "slot_dim", cfg.model.slot_dim);
            maybe(m, "iterations", cfg.model.iterations);
            maybe(m, "adapter_hidden", cfg.model.adapter_hidden);
            maybe(m, "sa_mlp_hidden", cfg.model.sa_mlp_hidden);
            maybe(m, "decoder_hidden", cfg.model.decoder_hidden);
            maybe(m, "experts", cfg.model.experts);
            maybe(m, "layernorm_affine", cfg.model.layernorm_affine);
            maybe(m, "weighted_mean", cfg.model.weighted_mean);
            maybe(m, "afm_input_conditioned", cfg.model.afm_input_conditioned);
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            maybe(t, "iterations", cfg.train.iterations);
            maybe(t, "batch", cfg.train.batch);
            maybe(t, "lr", cfg.train.lr);
            maybe(t, "weight_decay", cfg.train.weight_decay);
            maybe(t, "global_round_period", cfg.train.global_round_period);
            maybe(t, "local_fedavg_period", cfg.train.local_fedavg_period);
            maybe(t, "stage_switch_iter", cfg.train.stage_switch_iter);
            maybe(t, "ema_momentum", cfg.train.ema_momentum);
            maybe(t, "local_alpha", cfg.train.local_alpha);
            maybe(t, "literal_blend", cfg.train.literal_blend);
            maybe(t, "fedprox_mu", cfg.train.fedprox_mu);
            maybe(t, "fedadam_lr", cfg.train.fedadam_lr);
            maybe(t, "min_epochs", cfg.train.min_epochs);
            maybe(t, "early_stop_patience", cfg.train.early_stop_patience);
            maybe(t, "parallel_clients", cfg.train.parallel_clients);
        }
        if (j.contains("personalize")) {
            const json& p = j.at("personalize");
            if (p.contains("freeze")) {
                const std::string f = p.at("freeze").get<std::string>();
                if (f == "adapter")
                    cfg.personalize.freeze = Client::Freeze::adapter;
                else if (f == "slot_attention")
                    cfg.personalize.freeze = Client::Freeze::slot_attention;
                else
                    throw ConfigError("unknown freeze target '" + f + "'");
            }
            maybe(p, "steps", cfg.personalize.steps);
        }
        if (j.contains("eval")) {
            const json& e = j.at("eval");
            maybe(e, "use_attention_masks", cfg.eval.use_attention_masks);
            maybe(e, "eval_teacher", cfg.eval.eval_teacher);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field error: ") + e.what());
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_json(ss.str());
}

uint64_t ExperimentConfig::hash() const { return fnv1a64(to_json()); }

// ---------------------------------------------------------------------------
// data construction

std::vector<PseudoModelSpec> build_models(const ExperimentConfig& cfg) {
    std::vector<PseudoModelSpec> models;
    for (uint32_t m = 0; m < cfg.data.channels.size(); ++m) {
        PseudoModelSpec spec;
        spec.model_id = m;
        spec.channels = cfg.data.channels[m];
        spec.signature_noise = cfg.data.noise;
        spec.signature_seed = seed_of({cfg.seed, fnv1a64("signatures")});
        models.push_back(spec);
    }
    return models;
}

std::vector<DomainSpec> build_domains(const ExperimentConfig& cfg) {
    // Shared prototypes model cross-domain concept overlap: the first
    // round(overlap * P) prototype ids are common to every domain, the rest
    // are domain-specific. Backgrounds are always domain-specific.
    const size_t per_domain = cfg.data.prototypes_per_domain;
    const size_t shared = size_t(std::llround(cfg.data.overlap * double(per_domain)));
    std::vector<DomainSpec> out;
    for (uint32_t d = 0; d < cfg.data.domains; ++d) {
        DomainSpec dom;
        dom.domain_id = d;
        dom.h = dom.w = cfg.data.grid;
        dom.k_min = cfg.data.objects_min;
        dom.k_max = cfg.data.objects_max;
        dom.background_prototype = 900000 + d;
        for (uint32_t p = 0; p < shared; ++p) dom.prototype_ids.push_back(1 + p);
        for (uint32_t p = uint32_t(shared); p < per_domain; ++p)
            dom.prototype_ids.push_back(1000 + d * 1000 + p);
        out.push_back(dom);
    }
    return out;
}

namespace {

std::string cache_path(const ExperimentConfig& cfg, uint32_t domain, bool eval) {
    return cfg.data.cache_dir + "/" + (eval ? "eval" : "train") + "_domain" + std::to_string(domain) + ".forlache";
}

std::vector<Scene> build_scenes(const ExperimentConfig& cfg, uint32_t domain, bool eval) {
    const size_t count = eval ? cfg.data.eval_scenes_per_domain : cfg.data.scenes_per_domain;
    if (!cfg.data.cache_dir.empty()) {
        const std::string path = cache_path(cfg, domain, eval);
        if (std::filesystem::exists(path)) {
            auto scenes = load_cached(path);
            if (scenes.size() < count) {
                throw ConfigError("cache " + path + " holds " + std::to_string(scenes.size()) +
                                  " scenes, config needs " + std::to_string(count));
            }
            scenes.resize(count);
            for (size_t i = 0; i < scenes.size(); ++i) {
                scenes[i].domain_id = domain;
                scenes[i].scene_id = seed_of({cfg.seed, fnv1a64(eval ? "eval-data" : "data"), domain, i});
            }
            return scenes;
        }
    }
    auto domains = build_domains(cfg);
    auto models = build_models(cfg);
    std::vector<Scene> out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        const uint64_t seed = seed_of({cfg.seed, fnv1a64(eval ? "eval-data" : "data"), domain, i});
        out.push_back(generate_scene(domains[domain], models, seed));
    }
    return out;
}

}  // namespace

std::vector<Scene> build_train_scenes(const ExperimentConfig& cfg, uint32_t domain) {
    return build_scenes(cfg, domain, false);
}

std::vector<Scene> build_eval_scenes(const ExperimentConfig& cfg, uint32_t domain) {
    return build_scenes(cfg, domain, true);
}

// ---------------------------------------------------------------------------
// experiment run

namespace {

ClientConfig make_client_config(const ExperimentConfig& cfg, uint64_t client_id) {
    ClientConfig cc;
    cc.client_id = client_id;
    cc.seed = cfg.seed;  // shared-module initialization is identical across clients
    size_t c_tot = 0;
    for (uint32_t c : cfg.data.channels) c_tot += c;
    cc.adapter.kind = cfg.adapter;
    cc.adapter.c_tot = c_tot;
    cc.adapter.d = cfg.model.d;
    cc.adapter.hidden = cfg.model.adapter_hidden;
    cc.adapter.experts = cfg.model.experts;
    cc.adapter.afm_input_conditioned = cfg.model.afm_input_conditioned;
    cc.slot_attention.input_dim = cfg.adapter == AdapterKind::none ? c_tot : cfg.model.d;
    cc.slot_attention.slot_dim = cfg.model.slot_dim;
    cc.slot_attention.num_slots = cfg.model.slots;
    cc.slot_attention.iters = cfg.model.iterations;
    cc.slot_attention.mlp_hidden = cfg.model.sa_mlp_hidden;
    cc.slot_attention.layernorm_affine = cfg.model.layernorm_affine;
    cc.slot_attention.weighted_mean = cfg.model.weighted_mean;
    cc.decoder_hidden = cfg.model.decoder_hidden;
    cc.optim.lr = cfg.train.lr;
    cc.optim.weight_decay = cfg.train.weight_decay;
    cc.batch = cfg.train.batch;
    cc.ema_momentum = cfg.train.ema_momentum;
    cc.local_alpha = cfg.train.local_alpha;
    cc.stage_switch_iter = cfg.train.stage_switch_iter;
    cc.local_fedavg_period = cfg.train.local_fedavg_period;
    cc.literal_blend = cfg.train.literal_blend;
    cc.teacher_enabled = cfg.mode != Mode::slot_fedavg;
    cc.fedprox_mu =
        (cfg.federated() && cfg.aggregator == AggregatorKind::fedprox) ? cfg.train.fedprox_mu : 0.0f;
    return cc;
}

}  // namespace

ExperimentRun::ExperimentRun(const ExperimentConfig& cfg) : cfg_(cfg) {
    cfg_.validate();

    std::vector<std::vector<Scene>> per_domain;
    for (uint32_t d = 0; d < cfg_.data.domains; ++d) per_domain.push_back(build_train_scenes(cfg_, d));
    for (uint32_t d = 0; d < cfg_.data.domains; ++d) {
        auto ev = build_eval_scenes(cfg_, d);
        eval_scenes_.insert(eval_scenes_.end(), ev.begin(), ev.end());
    }

    switch (cfg_.mode) {
        case Mode::individual: {
            for (uint32_t d = 0; d < cfg_.data.domains; ++d)
                clients_.push_back(std::make_unique<Client>(make_client_config(cfg_, d), per_domain[d]));
            break;
        }
        case Mode::centralized: {
            std::vector<Scene> pooled;
            for (auto& dom : per_domain) pooled.insert(pooled.end(), dom.begin(), dom.end());
            clients_.push_back(std::make_unique<Client>(make_client_config(cfg_, 0), std::move(pooled)));
            break;
        }
        default: {
            std::vector<size_t> counts;
            for (auto& dom : per_domain) counts.push_back(dom.size());
            auto refs = partition(counts, cfg_.clients(), cfg_.data.partition, cfg_.data.split_fraction);
            for (size_t c = 0; c < refs.size(); ++c) {
                std::vector<Scene> scenes;
                for (const SceneRef& r : refs[c]) scenes.push_back(per_domain[r.domain][r.index]);
                clients_.push_back(std::make_unique<Client>(make_client_config(cfg_, c), std::move(scenes)));
            }
            std::vector<Client*> raw;
            for (auto& c : clients_) raw.push_back(c.get());
            AggregatorConfig agg;
            agg.kind = cfg_.aggregator;
            agg.fedprox_mu = cfg_.train.fedprox_mu;
            agg.server_lr = cfg_.train.fedadam_lr;
            runner_ = std::make_unique<FederationRunner>(agg, raw, cfg_.train.global_round_period,
                                                         cfg_.train.parallel_clients);
            break;
        }
    }
    for (size_t i = 0; i < clients_.size(); ++i) {
        EarlyStopper st;
        st.min_epochs = cfg_.train.min_epochs;
        st.patience = cfg_.train.early_stop_patience;
        stoppers_.push_back(st);
    }
}

void ExperimentRun::train_chunk(Client& client, size_t iters, EarlyStopper& stopper) {
    for (size_t i = 0; i < iters && !stopper.stopped; ++i) {
        client.train_step();
        // feed any newly completed epochs
        while (stopper.epochs_seen < client.epoch_losses().size()) {
            if (stopper.observe(client.epoch_losses()[stopper.epochs_seen])) break;
        }
    }
}

bool ExperimentRun::step_round() {
    if (rounds_done_ >= cfg_.rounds()) return false;
    bool all_stopped = true;
    for (const auto& st : stoppers_)
        if (!st.stopped) all_stopped = false;
    if (all_stopped) return false;

    const size_t done_iters = size_t(rounds_done_) * cfg_.train.global_round_period;
    const size_t chunk = std::min(cfg_.train.global_round_period, cfg_.train.iterations - done_iters);

    if (runner_) {
        std::vector<size_t> iters(clients_.size(), chunk);
        for (size_t i = 0; i < clients_.size(); ++i)
            if (stoppers_[i].stopped) iters[i] = 0;
        runner_->run_round(iters);
        for (size_t i = 0; i < clients_.size(); ++i) {
            auto& stopper = stoppers_[i];
            while (stopper.epochs_seen < clients_[i]->epoch_losses().size() && !stopper.stopped)
                stopper.observe(clients_[i]->epoch_losses()[stopper.epochs_seen]);
        }
    } else if (cfg_.train.parallel_clients && clients_.size() > 1) {
        std::vector<std::thread> threads;
        std::vector<std::exception_ptr> errors(clients_.size());
        for (size_t i = 0; i < clients_.size(); ++i) {
            threads.emplace_back([&, i]() {
                try {
                    train_chunk(*clients_[i], chunk, stoppers_[i]);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            });
        }
        for (auto& t : threads) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    } else {
        for (size_t i = 0; i < clients_.size(); ++i) train_chunk(*clients_[i], chunk, stoppers_[i]);
    }
    ++rounds_done_;
    return rounds_done_ < cfg_.rounds();
}

MetricReport ExperimentRun::evaluate_current() {
    EvalOptions opts;
    opts.seed = cfg_.seed;
    opts.use_attention_masks = cfg_.eval.use_attention_masks;

    // Every domain is scored by the lowest-id client holding its scenes
    // (the only client in centralized mode).
    std::map<uint32_t, Client*> scorer;
    if (cfg_.mode == Mode::centralized) {
        for (uint32_t d = 0; d < cfg_.data.domains; ++d) scorer[d] = clients_[0].get();
    } else {
        for (auto& c : clients_) {
            std::set<uint32_t> domains;
            for (const Scene& s : c->scenes()) domains.insert(s.domain_id);
            for (uint32_t d : domains)
                if (!scorer.count(d)) scorer[d] = c.get();
        }
    }

    std::map<uint32_t, std::vector<SceneMetrics>> by_domain;
    std::vector<SceneMetrics> all;
    for (const Scene& s : eval_scenes_) {
        Client* c = scorer.at(s.domain_id);
        Adapter& adapter = cfg_.eval.eval_teacher ? c->teacher_adapter() : c->student_adapter();
        SlotAttention& sa = cfg_.eval.eval_teacher ? c->teacher_slot_attention() : c->student_slot_attention();
        BroadcastDecoder& dec = cfg_.eval.eval_teacher ? c->teacher_decoder() : c->student_decoder();
        SceneMetrics m = evaluate_scene(adapter, sa, dec, s, opts);
        by_domain[s.domain_id].push_back(m);
        all.push_back(m);
    }
    MetricReport report;
    for (const auto& [domain, metrics] : by_domain)
        report.rows.push_back(MetricReport::aggregate("domain" + std::to_string(domain), metrics));
    report.rows.push_back(MetricReport::aggregate("all", all));
    return report;
}

ExperimentResult ExperimentRun::finish() {
    ExperimentResult result;
    if (cfg_.mode == Mode::forla_personalize) {
        // personalization starts from the final global model
        if (runner_) {
            for (auto& c : clients_) c->apply_global(runner_->server().global());
        }
        result.report_before_personalization = evaluate_current();
        for (auto& c : clients_) c->personalize(cfg_.personalize.freeze, cfg_.personalize.steps);
    } else if (runner_) {
        for (auto& c : clients_) c->apply_global(runner_->server().global());
    }
    result.report = evaluate_current();
    if (runner_) {
        result.ledger = runner_->ledger();
        result.final_global = runner_->server().global();
    }
    result.shared_params = clients_[0]->shared_param_count();
    result.full_model_params = clients_[0]->full_param_count();
    result.comm = comm_report(result.ledger, result.shared_params, result.full_model_params, cfg_.adapter);
    for (auto& c : clients_) {
        result.histories.emplace_back(c->history().begin(), c->history().end());
        result.event_logs.push_back(c->event_log());
        result.min_feat_variance = std::min(result.min_feat_variance, c->min_feat_variance());
    }
    return result;
}

// ---------------------------------------------------------------------------
// checkpointing

namespace {
constexpr std::string_view kCkptMagic = "FORLACKPT";
constexpr uint32_t kCkptVersion = 1;
}  // namespace

void ExperimentRun::save_checkpoint(const std::string& path) {
    std::vector<uint8_t> buf;
    io::put_bytes(buf, kCkptMagic.data(), kCkptMagic.size());
    io::put_u32(buf, kCkptVersion);
    io::put_u64(buf, cfg_.hash());
    io::put_u64(buf, rounds_done_);
    io::put_u32(buf, uint32_t(clients_.size()));
    for (size_t i = 0; i < clients_.size(); ++i) {
        clients_[i]->save(buf);
        io::put_f32(buf, stoppers_[i].best);
        io::put_u32(buf, uint32_t(stoppers_[i].stagnant));
        io::put_u32(buf, uint32_t(stoppers_[i].epochs_seen));
        buf.push_back(stoppers_[i].stopped ? 1 : 0);
    }
    buf.push_back(runner_ ? 1 : 0);
    if (runner_) {
        runner_->server().save(buf);
        const auto& rows = runner_->ledger().rows;
        io::put_u32(buf, uint32_t(rows.size()));
        for (const auto& r : rows) {
            io::put_u64(buf, r.round);
            io::put_u64(buf, r.client);
            io::put_u64(buf, r.uplink_bytes);
            io::put_u64(buf, r.downlink_bytes);
        }
    }
    io::put_u32(buf, io::crc32(buf));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
    if (!f) throw IoError("short write to " + path);
}

void ExperimentRun::load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < kCkptMagic.size() + 8) throw IoError(path + ": file too short");
    const uint32_t computed = io::crc32(buf.data(), buf.size() - 4);
    io::Reader tail(buf.data() + buf.size() - 4, 4);
    if (tail.u32() != computed) throw IoError(path + ": checksum mismatch");

    io::Reader r(buf.data(), buf.size() - 4);
    if (r.tag(kCkptMagic.size()) != kCkptMagic) throw IoError(path + ": bad magic");
    if (r.u32() != kCkptVersion) throw IoError(path + ": unsupported version");
    const uint64_t hash = r.u64();
    if (hash != cfg_.hash()) throw IoError(path + ": config hash mismatch");
    rounds_done_ = r.u64();
    const uint32_t n = r.u32();
    if (n != clients_.size()) throw IoError(path + ": client count mismatch");
    for (size_t i = 0; i < clients_.size(); ++i) {
        clients_[i]->load(r);
        stoppers_[i].best = r.f32();
        stoppers_[i].stagnant = r.u32();
        stoppers_[i].epochs_seen = r.u32();
        uint8_t stopped;
        r.bytes(&stopped, 1);
        stoppers_[i].stopped = stopped != 0;
    }
    uint8_t has_server;
    r.bytes(&has_server, 1);
    if (bool(has_server) != bool(runner_)) throw IoError(path + ": mode mismatch");
    if (runner_) {
        runner_->server().load(r);
        const uint32_t rows = r.u32();
        runner_->ledger().rows.clear();
        for (uint32_t i = 0; i < rows; ++i) {
            CommLedger::Row row;
            row.round = r.u64();
            row.client = r.u64();
            row.uplink_bytes = r.u64();
            row.downlink_bytes = r.u64();
            runner_->ledger().rows.push_back(row);
        }
    }
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    ExperimentRun run(cfg);
    while (run.step_round()) {
    }
    return run.finish();
}

// ---------------------------------------------------------------------------
// mode comparison

CompareResult compare_modes(const ExperimentConfig& base, const std::vector<Mode>& modes,
                            const std::vector<uint64_t>& seeds) {
    if (modes.size() < 2) throw ConfigError("compare: need at least two modes");
    if (seeds.empty()) throw ConfigError("compare: need at least one seed");
    CompareResult result;
    for (Mode m : modes) result.modes.push_back(mode_name(m));
    for (uint32_t d = 0; d < base.data.domains; ++d) result.domains.push_back("domain" + std::to_string(d));

    // per mode, per domain, per seed scene metrics
    result.rows.resize(modes.size());
    for (size_t mi = 0; mi < modes.size(); ++mi) {
        std::vector<std::vector<SceneMetrics>> per_domain(base.data.domains);
        for (uint64_t seed : seeds) {
            ExperimentConfig cfg = base;
            cfg.mode = modes[mi];
            cfg.seed = seed;  // identical data seeds across modes by construction
            if (!cfg.federated()) cfg.aggregator = AggregatorKind::fedavg;
            ExperimentResult r = run_experiment(cfg);
            for (uint32_t d = 0; d < base.data.domains; ++d) {
                const auto* row = r.report.find("domain" + std::to_string(d));
                if (!row) continue;
                SceneMetrics s;
                s.fg_ari = row->mean_fg_ari;
                s.mbo = row->mean_mbo;
                s.corloc = row->mean_corloc;
                s.mbhd = row->mean_mbhd;
                per_domain[d].push_back(s);
            }
        }
        for (uint32_t d = 0; d < base.data.domains; ++d)
            result.rows[mi].push_back(MetricReport::aggregate(result.domains[d], per_domain[d]));
    }
    return result;
}

std::string CompareResult::to_table() const {
    std::ostringstream os;
    os << "mode              domain     mbo            fg-ari         corloc         mbhd       d(mbo)\n";
    char buf[200];
    for (size_t mi = 0; mi < modes.size(); ++mi) {
        for (size_t d = 0; d < domains.size(); ++d) {
            const auto& r = rows[mi][d];
            const double delta = r.mean_mbo - rows[0][d].mean_mbo;
            std::snprintf(buf, sizeof buf, "%-17s %-9s %.3f±%.3f   %.3f±%.3f   %6.2f±%5.2f  %7.3f   %+.3f\n",
                          modes[mi].c_str(), domains[d].c_str(), r.mean_mbo, r.std_mbo, r.mean_fg_ari,
                          r.std_fg_ari, r.mean_corloc, r.std_corloc, r.mean_mbhd, delta);
            os << buf;
        }
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// feature export

void export_features(ExperimentRun& run, const std::string& path) {
    std::vector<Scene> dump;
    EvalOptions opts;
    NoGradGuard ng;
    // the same client choice as evaluation: lowest-id holder of the domain
    std::map<uint32_t, Client*> scorer;
    for (auto& c : run.clients()) {
        std::set<uint32_t> domains;
        for (const Scene& s : c->scenes()) domains.insert(s.domain_id);
        for (uint32_t d : domains)
            if (!scorer.count(d)) scorer[d] = c.get();
    }
    for (const Scene& s : run.eval_scenes()) {
        auto it = scorer.find(s.domain_id);
        Client* c = it != scorer.end() ? it->second : run.clients()[0].get();
        StackedFeatures stacked = stack_features(s);
        Tensor adapted = c->student_adapter().forward(stacked.f);
        Scene rec;
        rec.domain_id = s.domain_id;
        rec.scene_id = s.scene_id;
        rec.h = s.h;
        rec.w = s.w;
        rec.model_channels = {uint32_t(adapted.shape()[1])};
        rec.model_features = {adapted.values()};
        rec.gt = s.gt;
        dump.push_back(std::move(rec));
    }
    write_feature_dump(dump, path);
}

}  // namespace forla
