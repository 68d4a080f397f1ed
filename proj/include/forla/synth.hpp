#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "forla/mask.hpp"
#include "forla/rng.hpp"
#include "forla/tensor.hpp"

// Synthetic multi-domain scenes. Each grid cell carries one feature vector
// per pseudo foundation model: the unit-norm signature of the prototype
// occupying that cell plus Gaussian noise. Objects are axis-aligned
// rectangles; later placements overwrite earlier ones, so ground-truth masks
// and boxes are exact.

namespace forla {

struct PseudoModelSpec {
    uint32_t model_id = 0;
    uint32_t channels = 16;
    float signature_noise = 0.05f;
    uint64_t signature_seed = 0x51674DULL;

    // Deterministic unit-norm signature of a prototype under this model.
    std::vector<float> signature(uint32_t prototype) const;
};

struct DomainSpec {
    uint32_t domain_id = 0;
    std::vector<uint32_t> prototype_ids;   // object prototypes available here
    uint32_t background_prototype = 0;
    size_t k_min = 1, k_max = 4;           // objects per scene
    size_t h = 16, w = 16;
};

struct Scene {
    uint32_t domain_id = 0;
    uint64_t scene_id = 0;
    size_t h = 0, w = 0;
    std::vector<uint32_t> model_channels;           // C_m per model
    std::vector<std::vector<float>> model_features; // per model, (h*w) x C_m row-major
    std::vector<uint32_t> instance_prototypes;      // [0] background, then one per instance
    MaskSet gt;                                     // labels 0 (background) .. k
};

struct StackedFeatures {
    size_t h = 0, w = 0, c_tot = 0;
    std::vector<size_t> channel_offsets;  // per-model start channel
    Tensor f;                             // (h*w) x c_tot
};

// Places k rectangles (k uniform in [k_min, k_max]); every instance must
// keep a single 4-connected visible region of >= 4 cells, retried up to 100
// times per rectangle before giving up.
Scene generate_scene(const DomainSpec& domain, const std::vector<PseudoModelSpec>& models, uint64_t seed);

StackedFeatures stack_features(const Scene& scene);

enum class PartitionMode { one_domain_per_client, split_within_domain };

struct SceneRef {
    uint32_t domain = 0;
    size_t index = 0;
    bool operator==(const SceneRef&) const = default;
};

// Disjoint assignment of scene ids to clients. one_domain_per_client needs
// clients == domains; split_within_domain splits every domain across
// round(1/fraction) consecutive clients by index round-robin.
std::vector<std::vector<SceneRef>> partition(const std::vector<size_t>& scenes_per_domain, size_t clients,
                                             PartitionMode mode, double fraction = 1.0);

// Cache file: magic "FORLACHE", u32 version, u32 scene count; per scene u32
// h, w, m, then per model u32 c_m + little-endian f32 grid, then u8 mask
// grid; trailing CRC-32 over everything before it.
void cache_features(const std::vector<Scene>& scenes, const std::string& path);
std::vector<Scene> load_cached(const std::string& path);

// Same container with magic "FORLAFEAT": one pseudo-model whose grid holds
// the adapted features of each scene.
void write_feature_dump(const std::vector<Scene>& scenes, const std::string& path);
std::vector<Scene> load_feature_dump(const std::string& path);

}  // namespace forla
