#include "forla/client.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

namespace forla {

namespace {

std::vector<uint8_t> all_active(size_t n) { return std::vector<uint8_t>(n, 1); }

}  // namespace

Client::Client(const ClientConfig& cfg, std::vector<Scene> scenes)
    : cfg_(cfg),
      scenes_(std::move(scenes)),
      adapter_s_(cfg.adapter, Rng(cfg.seed).split("adapter")),
      adapter_t_(cfg.adapter, Rng(cfg.seed).split("adapter")),
      sa_s_(cfg.slot_attention, Rng(cfg.seed).split("sa")),
      sa_t_(cfg.slot_attention, Rng(cfg.seed).split("sa")),
      adam_s_(cfg.optim),
      adam_t_(cfg.optim) {
    if (scenes_.empty()) throw std::invalid_argument("client: no scenes");
    if (cfg.batch == 0) throw std::invalid_argument("client: batch must be positive");
    features_.reserve(scenes_.size());
    for (const Scene& s : scenes_) features_.push_back(stack_features(s));
    for (const auto& f : features_) {
        if (f.c_tot != cfg.adapter.c_tot) {
            throw ShapeError("client: scene provides " + std::to_string(f.c_tot) + " channels, adapter expects " +
                             std::to_string(cfg.adapter.c_tot));
        }
    }

    DecoderConfig stu;
    stu.slot_dim = cfg.slot_attention.slot_dim;
    stu.positions = scenes_[0].h * scenes_[0].w;
    stu.c_target = cfg.adapter.c_tot;
    stu.hidden = cfg.decoder_hidden;
    DecoderConfig tea = stu;
    tea.c_target = adapter_s_.out_dim();
    // Branches start from the same shared weights; decoders differ in width
    // and are seeded apart.
    dec_s_ = BroadcastDecoder(stu, Rng(cfg.seed).split("dec_stu"));
    dec_t_ = BroadcastDecoder(tea, Rng(cfg.seed).split("dec_tea"));

    auto collect = [](Adapter& a, SlotAttention& s, BroadcastDecoder& d) {
        std::vector<Tensor*> out;
        for (auto* p : a.params()) out.push_back(p);
        for (auto* p : s.params()) out.push_back(p);
        for (auto* p : d.params()) out.push_back(p);
        return out;
    };
    student_params_ = collect(adapter_s_, sa_s_, dec_s_);
    teacher_params_ = collect(adapter_t_, sa_t_, dec_t_);
    for (auto* p : adapter_s_.params()) shared_params_.push_back(p);
    for (auto* p : sa_s_.params()) shared_params_.push_back(p);

    adam_s_.init(student_params_);
    adam_t_.init(teacher_params_);
    student_active_ = all_active(student_params_.size());
    teacher_active_ = all_active(teacher_params_.size());
    teacher_adapter_param_count_ = adapter_t_.params().size();
    // Stage 1: the teacher adapter is EMA-tracked, never optimized.
    for (size_t i = 0; i < teacher_adapter_param_count_; ++i) teacher_active_[i] = 0;
}

std::vector<size_t> Client::batch_indices() const {
    const size_t n = scenes_.size();
    const size_t iters_per_epoch = (n + cfg_.batch - 1) / cfg_.batch;
    const uint64_t epoch = iter_ / iters_per_epoch;
    const size_t pos = size_t(iter_ % iters_per_epoch);
    // deterministic per-epoch permutation
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(seed_of({cfg_.seed, cfg_.client_id, fnv1a64("order"), epoch}));
    for (size_t i = 0; i + 1 < n; ++i) {
        size_t j = i + size_t(rng.below(n - i));
        std::swap(perm[i], perm[j]);
    }
    std::vector<size_t> out(cfg_.batch);
    for (size_t i = 0; i < cfg_.batch; ++i) out[i] = perm[(pos * cfg_.batch + i) % n];
    return out;
}

void Client::forward_backward_student(const StackedFeatures& f, uint64_t slot_seed, float inv_batch,
                                      double& loss_acc, double& sum, double& sumsq, size_t& count) {
    Tape tape;
    Tensor adapted = adapter_s_.forward(f.f);
    for (size_t i = 0; i < adapted.numel(); ++i) {
        const double v = adapted.data()[i];
        sum += v;
        sumsq += v * v;
    }
    count += adapted.numel();
    SlotState state = sa_s_.run(adapted, Rng(slot_seed));
    Reconstruction rec = dec_s_.decode(state.slots);
    Tensor loss = student_loss(rec.features, f.f);
    loss_acc += double(loss.item());
    tape.backward(scale(loss, inv_batch));
}

void Client::forward_backward_teacher(const StackedFeatures& f, uint64_t slot_seed, float inv_batch,
                                      double& loss_acc) {
    Tape tape;
    Tensor adapted;
    if (stage_ == Stage::ema) {
        // Gradients from the teacher decoder to its adapter are blocked: the
        // adapted features enter the rest of the branch as constants.
        NoGradGuard ng;
        adapted = adapter_t_.forward(f.f);
    } else {
        adapted = adapter_t_.forward(f.f);
    }
    SlotState state = sa_t_.run(adapted, Rng(slot_seed));
    Reconstruction rec = dec_t_.decode(state.slots);
    Tensor loss = teacher_loss(rec.features, adapted, /*stop_gradient=*/stage_ == Stage::ema);
    loss_acc += double(loss.item());
    tape.backward(scale(loss, inv_batch));
}

TrainStepReport Client::train_step() {
    const auto indices = batch_indices();
    const float inv_batch = 1.0f / float(cfg_.batch);

    double l1_acc = 0, l2_acc = 0, sum = 0, sumsq = 0;
    size_t count = 0;
    for (size_t i = 0; i < indices.size(); ++i) {
        const StackedFeatures& f = features_[indices[i]];
        const uint64_t slot_seed =
            seed_of({cfg_.seed, cfg_.client_id, iter_, uint64_t(i), fnv1a64("slots")});
        forward_backward_student(f, slot_seed, inv_batch, l1_acc, sum, sumsq, count);
        if (cfg_.teacher_enabled) {
            const uint64_t teacher_seed =
                seed_of({cfg_.seed, cfg_.client_id, iter_, uint64_t(i), fnv1a64("slots_tea")});
            forward_backward_teacher(f, teacher_seed, inv_batch, l2_acc);
        }
    }

    // proximal pull toward the last received global snapshot
    if (cfg_.fedprox_mu > 0.0f && !w_global_.empty()) {
        Tape tape;
        Tensor total;
        size_t off = 0;
        for (Tensor* w : shared_params_) {
            Tensor anchor = Tensor::from(w->shape(),
                                         std::vector<float>(w_global_.begin() + long(off),
                                                            w_global_.begin() + long(off + w->numel())));
            Tensor term = scale(mse(*w, anchor), float(w->numel()));
            total = total.defined() ? add(total, term) : term;
            off += w->numel();
        }
        tape.backward(scale(total, 0.5f * cfg_.fedprox_mu));
    }

    const float loss1 = float(l1_acc / double(cfg_.batch));
    const float loss2 = float(l2_acc / double(cfg_.batch));
    if (!std::isfinite(loss1) || !std::isfinite(loss2)) {
        std::ostringstream os;
        os << "client " << cfg_.client_id << ": non-finite loss at iter " << iter_ << " (loss1 " << loss1
           << ", loss2 " << loss2 << "), batch scenes";
        for (size_t idx : indices) os << " " << scenes_[idx].scene_id;
        throw NumericalError(os.str());
    }

    adam_s_.update(student_params_, &student_active_);
    if (cfg_.teacher_enabled) {
        adam_t_.update(teacher_params_, &teacher_active_);
        if (stage_ == Stage::ema) {
            auto target = adapter_t_.params();
            auto source = adapter_s_.params();
            ema_blend<float>(target, source, cfg_.ema_momentum);
        }
    }

    ++iter_;

    TrainStepReport report;
    report.iter = iter_;
    report.loss1 = loss1;
    report.loss2 = loss2;
    const double mean = sum / double(count);
    report.feat_variance = float(sumsq / double(count) - mean * mean);
    min_feat_variance_ = std::min(min_feat_variance_, report.feat_variance);
    if (report.feat_variance < 1e-4f) {
        std::cerr << "client " << cfg_.client_id << ": adapted-feature variance " << report.feat_variance
                  << " below collapse threshold at iter " << iter_ << "\n";
    }

    if (cfg_.teacher_enabled && stage_ == Stage::ema && iter_ >= cfg_.stage_switch_iter) {
        stage_switch();
        report.switched = true;
    }
    if (cfg_.teacher_enabled && stage_ == Stage::local_fedavg && iter_ % cfg_.local_fedavg_period == 0) {
        blend_branches();
        report.blended = true;
    }
    report.stage = stage_;
    history_.push_back(report);

    epoch_loss_acc_ += loss1;
    ++epoch_step_count_;
    const size_t iters_per_epoch = (scenes_.size() + cfg_.batch - 1) / cfg_.batch;
    if (epoch_step_count_ == iters_per_epoch) {
        epoch_losses_.push_back(float(epoch_loss_acc_ / double(epoch_step_count_)));
        epoch_loss_acc_ = 0;
        epoch_step_count_ = 0;
    }
    return report;
}

void Client::stage_switch() {
    if (stage_ == Stage::local_fedavg) {
        std::cerr << "client " << cfg_.client_id << ": stage switch requested twice, ignoring\n";
        return;
    }
    if (iter_ < cfg_.stage_switch_iter) {
        throw std::logic_error("client: stage switch before iter " + std::to_string(cfg_.stage_switch_iter));
    }
    stage_ = Stage::local_fedavg;
    // the teacher adapter becomes gradient-receiving
    for (size_t i = 0; i < teacher_adapter_param_count_; ++i) teacher_active_[i] = 1;
}

void Client::blend_branches() {
    auto student = shared_params_;
    std::vector<Tensor*> teacher;
    for (auto* p : adapter_t_.params()) teacher.push_back(p);
    for (auto* p : sa_t_.params()) teacher.push_back(p);
    const float alpha = cfg_.local_alpha;
    for (size_t i = 0; i < student.size(); ++i) {
        float* s = student[i]->data();
        float* t = teacher[i]->data();
        for (size_t j = 0; j < student[i]->numel(); ++j) {
            const float blended = alpha * s[j] + (1.0f - alpha) * t[j];
            s[j] = blended;
            if (!cfg_.literal_blend) t[j] = blended;
        }
    }
}

size_t Client::shared_param_count() { return param_count<float>(shared_params_); }

size_t Client::full_param_count() {
    return param_count<float>(student_params_) + param_count<float>(teacher_params_);
}

std::vector<float> Client::snapshot_shared() { return flatten_params<float>(shared_params_); }

void Client::apply_global(std::span<const float> flat) {
    unflatten_params<float>(shared_params_, flat);
    w_global_.assign(flat.begin(), flat.end());
}

uint64_t Client::fingerprint() const {
    return fnv1a64(adapter_s_.fingerprint_text() + "|" + sa_s_.fingerprint_text());
}

void Client::personalize(Freeze freeze, size_t steps) {
    if (w_global_.empty()) throw std::logic_error("personalize: no global model has been applied");
    frozen_ = freeze;
    apply_freeze();
    for (size_t i = 0; i < steps; ++i) train_step();
}

void Client::apply_freeze() {
    if (!frozen_) return;
    auto freeze_student = [&](std::vector<Tensor*> params, size_t offset) {
        for (size_t i = 0; i < params.size(); ++i) {
            params[i]->set_requires_grad(false);
            student_active_[offset + i] = 0;
        }
    };
    const size_t adapter_n = adapter_s_.params().size();
    const size_t sa_n = sa_s_.params().size();
    if (*frozen_ == Freeze::adapter) {
        freeze_student(adapter_s_.params(), 0);
        for (auto* p : adapter_t_.params()) p->set_requires_grad(false);
        for (size_t i = 0; i < adapter_n; ++i) teacher_active_[i] = 0;
    } else {
        freeze_student(sa_s_.params(), adapter_n);
        for (auto* p : sa_t_.params()) p->set_requires_grad(false);
        for (size_t i = 0; i < sa_n; ++i) teacher_active_[teacher_adapter_param_count_ + i] = 0;
    }
}

std::vector<float> Client::teacher_adapter_grad_norms() {
    std::vector<float> out;
    for (auto* p : adapter_t_.params()) {
        double n = 0;
        for (float g : p->grad()) n += double(g) * g;
        out.push_back(float(std::sqrt(n)));
    }
    return out;
}

std::string Client::event_log() const {
    std::ostringstream os;
    for (const auto& r : history_) {
        os << r.iter << "\t" << r.loss1 << "\t" << r.loss2 << "\t" << stage_name(r.stage) << "\t"
           << (r.blended ? 1 : 0) << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// checkpoint blocks

namespace {

void put_param_block(std::vector<uint8_t>& out, std::span<Tensor* const> params) {
    io::put_u32(out, uint32_t(param_count<float>(params)));
    for (auto* p : params)
        for (float v : p->values()) io::put_f32(out, v);
}

void read_param_block(io::Reader& in, std::span<Tensor* const> params) {
    const uint32_t n = in.u32();
    std::vector<float> flat(n);
    for (auto& v : flat) v = in.f32();
    unflatten_params<float>(params, flat);
}

void put_adam(std::vector<uint8_t>& out, const AdamState& st) {
    io::put_u64(out, st.step);
    io::put_u32(out, uint32_t(st.m.size()));
    for (size_t i = 0; i < st.m.size(); ++i) {
        io::put_u32(out, uint32_t(st.m[i].size()));
        for (float v : st.m[i]) io::put_f32(out, v);
        for (float v : st.v[i]) io::put_f32(out, v);
    }
}

void read_adam(io::Reader& in, AdamState& st) {
    st.step = in.u64();
    const uint32_t blocks = in.u32();
    if (blocks != st.m.size()) throw IoError("checkpoint: adam state block count mismatch");
    for (size_t i = 0; i < blocks; ++i) {
        const uint32_t n = in.u32();
        if (n != st.m[i].size()) throw IoError("checkpoint: adam state size mismatch");
        for (auto& v : st.m[i]) v = in.f32();
        for (auto& v : st.v[i]) v = in.f32();
    }
}

}  // namespace

void Client::save(std::vector<uint8_t>& out) {
    io::put_u64(out, cfg_.client_id);
    io::put_u64(out, iter_);
    out.push_back(uint8_t(stage_));
    out.push_back(frozen_ ? uint8_t(*frozen_) + 1 : 0);
    io::put_f32(out, min_feat_variance_);
    put_param_block(out, student_params_);
    put_param_block(out, teacher_params_);
    put_adam(out, adam_s_);
    put_adam(out, adam_t_);
    io::put_u32(out, uint32_t(w_global_.size()));
    for (float v : w_global_) io::put_f32(out, v);
    io::put_u32(out, uint32_t(epoch_losses_.size()));
    for (float v : epoch_losses_) io::put_f32(out, v);
    io::put_f32(out, float(epoch_loss_acc_));
    io::put_u32(out, uint32_t(epoch_step_count_));
}

void Client::load(io::Reader& in) {
    const uint64_t id = in.u64();
    if (id != cfg_.client_id) throw IoError("checkpoint: client id mismatch");
    iter_ = in.u64();
    uint8_t st;
    in.bytes(&st, 1);
    stage_ = Stage(st);
    uint8_t fz;
    in.bytes(&fz, 1);
    frozen_ = fz == 0 ? std::optional<Freeze>{} : std::optional<Freeze>(Freeze(fz - 1));
    min_feat_variance_ = in.f32();
    read_param_block(in, student_params_);
    read_param_block(in, teacher_params_);
    read_adam(in, adam_s_);
    read_adam(in, adam_t_);
    const uint32_t gn = in.u32();
    w_global_.resize(gn);
    for (auto& v : w_global_) v = in.f32();
    const uint32_t en = in.u32();
    epoch_losses_.resize(en);
    for (auto& v : epoch_losses_) v = in.f32();
    epoch_loss_acc_ = double(in.f32());
    epoch_step_count_ = in.u32();
    // rebuild the stage-dependent optimizer masks and freeze flags
    student_active_ = all_active(student_params_.size());
    teacher_active_ = all_active(teacher_params_.size());
    if (stage_ == Stage::ema)
        for (size_t i = 0; i < teacher_adapter_param_count_; ++i) teacher_active_[i] = 0;
    for (auto* p : student_params_) p->set_requires_grad(true);
    for (auto* p : teacher_params_) p->set_requires_grad(true);
    apply_freeze();
}

}  // namespace forla
