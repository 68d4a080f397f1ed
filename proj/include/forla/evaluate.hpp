#pragma once

#include <vector>

#include "forla/adapters.hpp"
#include "forla/decoder.hpp"
#include "forla/metrics.hpp"
#include "forla/slot_attention.hpp"
#include "forla/synth.hpp"

// Held-out evaluation: adapt -> slot attention -> decode -> argmax masks,
// scored against ground truth with the four segmentation metrics.

namespace forla {

struct EvalOptions {
    uint64_t seed = 1;
    // score encoder attention argmax instead of decoder alpha argmax
    bool use_attention_masks = false;
    MetricOptions metrics;
};

MaskSet predict_mask(Adapter& adapter, SlotAttention& sa, BroadcastDecoder& decoder, const Scene& scene,
                     const EvalOptions& opts);

SceneMetrics evaluate_scene(Adapter& adapter, SlotAttention& sa, BroadcastDecoder& decoder, const Scene& scene,
                            const EvalOptions& opts);

// Per-domain rows plus an "all" row. Throws on an empty scene list.
MetricReport evaluate(Adapter& adapter, SlotAttention& sa, BroadcastDecoder& decoder,
                      const std::vector<const Scene*>& scenes, const EvalOptions& opts);

}  // namespace forla
