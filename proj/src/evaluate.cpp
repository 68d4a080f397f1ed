#include "forla/evaluate.hpp"

#include <map>
#include <stdexcept>

namespace forla {

MaskSet predict_mask(Adapter& adapter, SlotAttention& sa, BroadcastDecoder& decoder, const Scene& scene,
                     const EvalOptions& opts) {
    NoGradGuard ng;
    StackedFeatures stacked = stack_features(scene);
    Tensor adapted = adapter.forward(stacked.f);
    const uint64_t slot_seed = seed_of({opts.seed, fnv1a64("eval"), scene.domain_id, scene.scene_id});
    SlotState state = sa.run(adapted, Rng(slot_seed));
    if (opts.use_attention_masks) return masks_from_alpha(state.attn, scene.h, scene.w);
    Reconstruction rec = decoder.decode(state.slots);
    return masks_from_alpha(rec.alpha, scene.h, scene.w);
}

SceneMetrics evaluate_scene(Adapter& adapter, SlotAttention& sa, BroadcastDecoder& decoder, const Scene& scene,
                            const EvalOptions& opts) {
    MaskSet pred = predict_mask(adapter, sa, decoder, scene, opts);
    return score_masks(pred, scene.gt, opts.metrics);
}

MetricReport evaluate(Adapter& adapter, SlotAttention& sa, BroadcastDecoder& decoder,
                      const std::vector<const Scene*>& scenes, const EvalOptions& opts) {
    if (scenes.empty()) throw std::invalid_argument("evaluate: no scenes");
    std::map<uint32_t, std::vector<SceneMetrics>> by_domain;
    std::vector<SceneMetrics> all;
    for (const Scene* s : scenes) {
        SceneMetrics m = evaluate_scene(adapter, sa, decoder, *s, opts);
        by_domain[s->domain_id].push_back(m);
        all.push_back(m);
    }
    MetricReport report;
    for (const auto& [domain, metrics] : by_domain)
        report.rows.push_back(MetricReport::aggregate("domain" + std::to_string(domain), metrics));
    report.rows.push_back(MetricReport::aggregate("all", all));
    return report;
}

}  // namespace forla
