#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "forla/io.hpp"
#include "forla/metrics.hpp"
#include "forla/synth.hpp"

using namespace forla;

namespace {

std::vector<PseudoModelSpec> desk_models(float noise) {
    std::vector<PseudoModelSpec> models;
    uint32_t channels[] = {16, 8, 16};
    for (uint32_t m = 0; m < 3; ++m) models.push_back({m, channels[m], noise});
    return models;
}

DomainSpec desk_domain() {
    DomainSpec d;
    d.domain_id = 0;
    d.prototype_ids = {1, 2, 3, 4, 5, 6};
    d.background_prototype = 100;
    d.k_min = 1;
    d.k_max = 4;
    d.h = d.w = 16;
    return d;
}

}  // namespace

TEST_CASE("zero noise: object cells carry the prototype signature exactly") {
    DomainSpec dom = desk_domain();
    dom.k_min = dom.k_max = 1;
    auto models = desk_models(0.0f);
    Scene s = generate_scene(dom, models, 7);
    REQUIRE(s.instance_prototypes.size() == 2);
    for (size_t m = 0; m < models.size(); ++m) {
        auto sig = models[m].signature(s.instance_prototypes[1]);
        auto bg = models[m].signature(dom.background_prototype);
        for (size_t cell = 0; cell < s.h * s.w; ++cell) {
            const float* f = s.model_features[m].data() + cell * models[m].channels;
            const auto& expect = s.gt.labels[cell] == 1 ? sig : bg;
            for (size_t ch = 0; ch < models[m].channels; ++ch) CHECK(f[ch] == expect[ch]);
        }
    }
}

TEST_CASE("same seed yields bitwise-identical scenes") {
    auto models = desk_models(0.05f);
    Scene a = generate_scene(desk_domain(), models, 123);
    Scene b = generate_scene(desk_domain(), models, 123);
    CHECK(a.gt.labels == b.gt.labels);
    for (size_t m = 0; m < 3; ++m) CHECK(a.model_features[m] == b.model_features[m]);
    Scene c = generate_scene(desk_domain(), models, 124);
    CHECK(a.gt.labels != c.gt.labels);
}

TEST_CASE("label count matches requested objects over 100 seeds") {
    auto models = desk_models(0.05f);
    DomainSpec dom = desk_domain();
    dom.k_min = dom.k_max = 3;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Scene s = generate_scene(dom, models, seed);
        std::set<int> labels(s.gt.labels.begin(), s.gt.labels.end());
        CHECK(labels.size() == 4);  // background + 3 instances
        for (int l = 1; l <= 3; ++l) {
            size_t count = 0;
            for (int v : s.gt.labels)
                if (v == l) ++count;
            CHECK(count >= 4);
        }
    }
}

TEST_CASE("stacking: offsets, identity, and bitwise slice-back") {
    auto models = desk_models(0.05f);
    Scene s = generate_scene(desk_domain(), models, 5);
    StackedFeatures f = stack_features(s);
    CHECK(f.c_tot == 40);
    CHECK(f.channel_offsets == std::vector<size_t>{0, 16, 24});
    CHECK(f.f.shape() == Shape{256, 40});
    for (size_t m = 0; m < 3; ++m) {
        const size_t cm = models[m].channels, off = f.channel_offsets[m];
        for (size_t cell = 0; cell < 256; ++cell)
            for (size_t ch = 0; ch < cm; ++ch)
                CHECK(f.f.data()[cell * 40 + off + ch] == s.model_features[m][cell * cm + ch]);
    }

    Scene single = s;
    single.model_channels = {s.model_channels[0]};
    single.model_features = {s.model_features[0]};
    StackedFeatures f1 = stack_features(single);
    CHECK(f1.f.values() == s.model_features[0]);
}

TEST_CASE("oracle solvability: nearest signature recovers the gt partition at zero noise") {
    auto models = desk_models(0.0f);
    DomainSpec dom = desk_domain();
    Scene s = generate_scene(dom, models, 11);
    StackedFeatures f = stack_features(s);

    // candidate prototypes: background + every domain prototype, stacked
    std::vector<uint32_t> cands = dom.prototype_ids;
    cands.push_back(dom.background_prototype);
    std::vector<std::vector<float>> sigs;
    for (uint32_t p : cands) {
        std::vector<float> stacked;
        for (const auto& m : models) {
            auto sig = m.signature(p);
            stacked.insert(stacked.end(), sig.begin(), sig.end());
        }
        sigs.push_back(std::move(stacked));
    }
    MaskSet pred;
    pred.h = s.h;
    pred.w = s.w;
    pred.labels.resize(s.h * s.w);
    for (size_t cell = 0; cell < s.h * s.w; ++cell) {
        const float* x = f.f.data() + cell * f.c_tot;
        size_t best = 0;
        double best_d = 1e30;
        for (size_t c = 0; c < sigs.size(); ++c) {
            double d = 0;
            for (size_t ch = 0; ch < f.c_tot; ++ch) {
                double diff = double(x[ch]) - double(sigs[c][ch]);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        pred.labels[cell] = int(best);
    }
    // exact partition recovery: prototype classes and instance labels biject
    CHECK(fg_ari(pred, s.gt) == doctest::Approx(1.0));
    MetricOptions opts;
    CHECK(mbo(pred, s.gt, opts) == doctest::Approx(1.0));
}

TEST_CASE("partition: one domain per client") {
    auto parts = partition({10, 12}, 2, PartitionMode::one_domain_per_client);
    CHECK(parts[0].size() == 10);
    CHECK(parts[1].size() == 12);
    for (const auto& ref : parts[0]) CHECK(ref.domain == 0);
    for (const auto& ref : parts[1]) CHECK(ref.domain == 1);
    CHECK_THROWS_AS(partition({10}, 2, PartitionMode::one_domain_per_client), std::invalid_argument);
}

TEST_CASE("partition: split within domain is disjoint and covering") {
    auto parts = partition({11}, 2, PartitionMode::split_within_domain, 0.5);
    std::set<size_t> seen;
    for (const auto& client : parts)
        for (const auto& ref : client) CHECK(seen.insert(ref.index).second);
    CHECK(seen.size() == 11);

    auto quarters = partition({21, 18}, 8, PartitionMode::split_within_domain, 0.25);
    for (uint32_t d = 0; d < 2; ++d) {
        const size_t total = d == 0 ? 21 : 18;
        for (size_t j = 0; j < 4; ++j) {
            const double share = double(quarters[d * 4 + j].size());
            CHECK(std::abs(share - double(total) / 4.0) <= 1.0);
        }
    }
    CHECK_THROWS_AS(partition({3}, 4, PartitionMode::split_within_domain, 0.25), std::invalid_argument);
}

TEST_CASE("cache round trip is bit-exact and order preserving") {
    auto models = desk_models(0.05f);
    std::vector<Scene> scenes;
    for (uint64_t seed = 0; seed < 100; ++seed) scenes.push_back(generate_scene(desk_domain(), models, seed));
    const std::string path = "test_cache.bin";
    cache_features(scenes, path);
    auto loaded = load_cached(path);
    REQUIRE(loaded.size() == scenes.size());
    for (size_t i = 0; i < scenes.size(); ++i) {
        CHECK(loaded[i].gt.labels == scenes[i].gt.labels);
        CHECK(loaded[i].model_features == scenes[i].model_features);
        CHECK(loaded[i].model_channels == scenes[i].model_channels);
    }
    std::remove(path.c_str());
}

TEST_CASE("cache corruption and truncation are typed errors") {
    auto models = desk_models(0.05f);
    std::vector<Scene> scenes = {generate_scene(desk_domain(), models, 1)};
    const std::string path = "test_cache_bad.bin";
    cache_features(scenes, path);

    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    {  // flip one payload byte
        auto corrupted = bytes;
        corrupted[bytes.size() / 2] ^= 0x40;
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(corrupted.data(), std::streamsize(corrupted.size()));
        out.close();
        CHECK_THROWS_AS(load_cached(path), IoError);
    }
    {  // truncate
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), std::streamsize(bytes.size() / 3));
        out.close();
        CHECK_THROWS_AS(load_cached(path), IoError);
    }
    {  // wrong magic
        auto wrong = bytes;
        wrong[0] = 'X';
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(wrong.data(), std::streamsize(wrong.size()));
        out.close();
        CHECK_THROWS_AS(load_cached(path), IoError);
    }
    std::remove(path.c_str());
}

TEST_CASE("signatures are unit norm and model specific") {
    PseudoModelSpec a{0, 16, 0.0f};
    PseudoModelSpec b{1, 16, 0.0f};
    auto sa = a.signature(3);
    auto sb = b.signature(3);
    double na = 0, nb = 0;
    for (size_t i = 0; i < 16; ++i) {
        na += double(sa[i]) * sa[i];
        nb += double(sb[i]) * sb[i];
    }
    CHECK(na == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(nb == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(sa != sb);
    CHECK(a.signature(3) == sa);  // deterministic
}

TEST_CASE("grid below 8x8 is rejected") {
    DomainSpec dom = desk_domain();
    dom.h = 4;
    CHECK_THROWS_AS(generate_scene(dom, desk_models(0.0f), 1), std::invalid_argument);
}
