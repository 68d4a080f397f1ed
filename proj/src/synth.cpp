#include "forla/synth.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <queue>
#include <stdexcept>

#include "forla/io.hpp"

namespace forla {

std::vector<float> PseudoModelSpec::signature(uint32_t prototype) const {
    Rng rng(seed_of({signature_seed, model_id, prototype}));
    std::vector<float> v(channels);
    double norm2 = 0;
    for (auto& x : v) {
        double g = rng.normal();
        x = float(g);
        norm2 += g * g;
    }
    const float inv = float(1.0 / std::sqrt(std::max(norm2, 1e-30)));
    for (auto& x : v) x *= inv;
    return v;
}

namespace {

// Every instance label must form exactly one 4-connected region of >= 4
// visible cells.
bool instances_valid(const std::vector<int>& mask, size_t h, size_t w, int max_label) {
    for (int label = 1; label <= max_label; ++label) {
        size_t total = 0, first = size_t(-1);
        for (size_t i = 0; i < h * w; ++i) {
            if (mask[i] == label) {
                ++total;
                if (first == size_t(-1)) first = i;
            }
        }
        if (total < 4) return false;
        std::vector<char> seen(h * w, 0);
        std::queue<size_t> q;
        q.push(first);
        seen[first] = 1;
        size_t reached = 0;
        while (!q.empty()) {
            size_t i = q.front();
            q.pop();
            ++reached;
            size_t r = i / w, c = i % w;
            const size_t nbrs[4] = {i - w, i + w, i - 1, i + 1};
            const bool ok[4] = {r > 0, r + 1 < h, c > 0, c + 1 < w};
            for (int d = 0; d < 4; ++d) {
                if (!ok[d]) continue;
                size_t j = nbrs[d];
                if (!seen[j] && mask[j] == label) {
                    seen[j] = 1;
                    q.push(j);
                }
            }
        }
        if (reached != total) return false;
    }
    return true;
}

}  // namespace

Scene generate_scene(const DomainSpec& domain, const std::vector<PseudoModelSpec>& models, uint64_t seed) {
    if (domain.h < 8 || domain.w < 8) throw std::invalid_argument("generate_scene: grid must be at least 8x8");
    if (domain.prototype_ids.empty()) throw std::invalid_argument("generate_scene: domain has no prototypes");
    if (domain.k_min < 1 || domain.k_max < domain.k_min)
        throw std::invalid_argument("generate_scene: bad objects-per-scene range");

    const size_t h = domain.h, w = domain.w;
    Rng rng = Rng(seed).split("layout");
    const size_t k = domain.k_min + rng.below(domain.k_max - domain.k_min + 1);

    // Distinct prototypes per scene whenever the pool allows it.
    std::vector<uint32_t> pool = domain.prototype_ids;
    std::vector<uint32_t> protos(k);
    if (pool.size() >= k) {
        for (size_t j = 0; j < k; ++j) {
            size_t pick = j + rng.below(pool.size() - j);
            std::swap(pool[j], pool[pick]);
            protos[j] = pool[j];
        }
    } else {
        for (size_t j = 0; j < k; ++j) protos[j] = pool[rng.below(pool.size())];
    }

    std::vector<int> mask(h * w, 0);
    for (size_t j = 1; j <= k; ++j) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            const size_t rh = 2 + rng.below(h / 2 - 1);
            const size_t rw = 2 + rng.below(w / 2 - 1);
            const size_t r0 = rng.below(h - rh + 1);
            const size_t c0 = rng.below(w - rw + 1);
            std::vector<int> trial = mask;
            for (size_t r = r0; r < r0 + rh; ++r)
                for (size_t c = c0; c < c0 + rw; ++c) trial[r * w + c] = int(j);
            if (instances_valid(trial, h, w, int(j))) {
                mask = std::move(trial);
                placed = true;
            }
        }
        if (!placed) {
            throw std::runtime_error("generate_scene: could not place object " + std::to_string(j) +
                                     " without breaking the 4-cell invariant after 100 attempts");
        }
    }

    Scene scene;
    scene.domain_id = domain.domain_id;
    scene.scene_id = seed;
    scene.h = h;
    scene.w = w;
    scene.gt.h = h;
    scene.gt.w = w;
    scene.gt.labels = std::move(mask);
    scene.gt.is_gt = true;
    scene.instance_prototypes.push_back(domain.background_prototype);
    scene.instance_prototypes.insert(scene.instance_prototypes.end(), protos.begin(), protos.end());

    for (const auto& model : models) {
        std::vector<float> grid(h * w * model.channels);
        std::vector<std::vector<float>> sigs(scene.instance_prototypes.size());
        for (size_t i = 0; i < sigs.size(); ++i) sigs[i] = model.signature(scene.instance_prototypes[i]);
        Rng noise = Rng(seed).split("noise").split(model.model_id);
        for (size_t cell = 0; cell < h * w; ++cell) {
            const auto& sig = sigs[size_t(scene.gt.labels[cell])];
            float* dst = grid.data() + cell * model.channels;
            for (size_t ch = 0; ch < model.channels; ++ch)
                dst[ch] = sig[ch] + model.signature_noise * float(noise.normal());
        }
        scene.model_channels.push_back(model.channels);
        scene.model_features.push_back(std::move(grid));
    }
    return scene;
}

StackedFeatures stack_features(const Scene& scene) {
    StackedFeatures out;
    out.h = scene.h;
    out.w = scene.w;
    const size_t cells = scene.h * scene.w;
    for (size_t m = 0; m < scene.model_channels.size(); ++m) {
        if (scene.model_features[m].size() != cells * scene.model_channels[m]) {
            throw ShapeError("stack_features: model " + std::to_string(m) + " grid does not match " +
                             std::to_string(scene.h) + "x" + std::to_string(scene.w));
        }
        out.channel_offsets.push_back(out.c_tot);
        out.c_tot += scene.model_channels[m];
    }
    std::vector<float> stacked(cells * out.c_tot);
    for (size_t m = 0; m < scene.model_channels.size(); ++m) {
        const size_t cm = scene.model_channels[m];
        const size_t off = out.channel_offsets[m];
        const float* src = scene.model_features[m].data();
        for (size_t cell = 0; cell < cells; ++cell)
            std::memcpy(stacked.data() + cell * out.c_tot + off, src + cell * cm, cm * sizeof(float));
    }
    out.f = Tensor::from({cells, out.c_tot}, std::move(stacked));
    return out;
}

std::vector<std::vector<SceneRef>> partition(const std::vector<size_t>& scenes_per_domain, size_t clients,
                                             PartitionMode mode, double fraction) {
    if (clients < 1) throw std::invalid_argument("partition: needs at least one client");
    const size_t domains = scenes_per_domain.size();
    std::vector<std::vector<SceneRef>> out(clients);
    if (mode == PartitionMode::one_domain_per_client) {
        if (clients != domains) {
            throw std::invalid_argument("partition: one-domain-per-client needs clients == domains (" +
                                        std::to_string(clients) + " vs " + std::to_string(domains) + ")");
        }
        for (uint32_t d = 0; d < domains; ++d)
            for (size_t i = 0; i < scenes_per_domain[d]; ++i) out[d].push_back({d, i});
        return out;
    }
    if (fraction <= 0.0 || fraction > 1.0) throw std::invalid_argument("partition: fraction must be in (0, 1]");
    const size_t per_domain = size_t(std::llround(1.0 / fraction));
    if (per_domain * domains != clients) {
        throw std::invalid_argument("partition: split-within-domain at fraction " + std::to_string(fraction) +
                                    " needs " + std::to_string(per_domain * domains) + " clients, got " +
                                    std::to_string(clients));
    }
    for (uint32_t d = 0; d < domains; ++d) {
        if (scenes_per_domain[d] < per_domain) {
            throw std::invalid_argument("partition: domain " + std::to_string(d) + " has " +
                                        std::to_string(scenes_per_domain[d]) + " scenes, fewer than one per client");
        }
        for (size_t i = 0; i < scenes_per_domain[d]; ++i)
            out[size_t(d) * per_domain + i % per_domain].push_back({d, i});
    }
    return out;
}

// ---------------------------------------------------------------------------
// cache files

namespace {

constexpr std::string_view kCacheMagic = "FORLACHE";
constexpr std::string_view kFeatMagic = "FORLAFEAT";
constexpr uint32_t kCacheVersion = 1;

void write_container(const std::vector<Scene>& scenes, const std::string& path, std::string_view magic) {
    std::vector<uint8_t> buf;
    io::put_bytes(buf, magic.data(), magic.size());
    io::put_u32(buf, kCacheVersion);
    io::put_u32(buf, uint32_t(scenes.size()));
    for (const Scene& s : scenes) {
        io::put_u32(buf, uint32_t(s.h));
        io::put_u32(buf, uint32_t(s.w));
        io::put_u32(buf, uint32_t(s.model_channels.size()));
        for (size_t m = 0; m < s.model_channels.size(); ++m) {
            io::put_u32(buf, s.model_channels[m]);
            for (float v : s.model_features[m]) io::put_f32(buf, v);
        }
        for (int label : s.gt.labels) buf.push_back(uint8_t(label));
    }
    io::put_u32(buf, io::crc32(buf));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
    if (!f) throw IoError("short write to " + path);
}

std::vector<Scene> load_container(const std::string& path, std::string_view magic) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < magic.size() + 12) throw IoError(path + ": file too short");
    const uint32_t computed = io::crc32(buf.data(), buf.size() - 4);
    io::Reader tail(buf.data() + buf.size() - 4, 4);
    if (tail.u32() != computed) throw IoError(path + ": checksum mismatch");

    io::Reader r(buf.data(), buf.size() - 4);
    if (r.tag(magic.size()) != magic) throw IoError(path + ": bad magic");
    const uint32_t version = r.u32();
    if (version != kCacheVersion) throw IoError(path + ": unsupported version " + std::to_string(version));
    const uint32_t count = r.u32();
    std::vector<Scene> scenes;
    scenes.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        Scene s;
        s.scene_id = i;
        s.h = r.u32();
        s.w = r.u32();
        const uint32_t models = r.u32();
        for (uint32_t m = 0; m < models; ++m) {
            const uint32_t cm = r.u32();
            std::vector<float> grid(size_t(s.h) * s.w * cm);
            for (auto& v : grid) v = r.f32();
            s.model_channels.push_back(cm);
            s.model_features.push_back(std::move(grid));
        }
        s.gt.h = s.h;
        s.gt.w = s.w;
        s.gt.labels.resize(s.h * s.w);
        for (auto& label : s.gt.labels) {
            uint8_t b;
            r.bytes(&b, 1);
            label = int(b);
        }
        s.gt.is_gt = true;
        scenes.push_back(std::move(s));
    }
    if (r.remaining() != 0) throw IoError(path + ": trailing bytes");
    return scenes;
}

}  // namespace

void cache_features(const std::vector<Scene>& scenes, const std::string& path) {
    write_container(scenes, path, kCacheMagic);
}

std::vector<Scene> load_cached(const std::string& path) { return load_container(path, kCacheMagic); }

void write_feature_dump(const std::vector<Scene>& scenes, const std::string& path) {
    write_container(scenes, path, kFeatMagic);
}

std::vector<Scene> load_feature_dump(const std::string& path) { return load_container(path, kFeatMagic); }

}  // namespace forla
