#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "forla/adapters.hpp"
#include "gradcheck.hpp"

using namespace forla;
using forla::testing::gradcheck;
using forla::testing::rand_tensor;

namespace {

Tensor random_features(size_t n, size_t c, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n * c);
    for (auto& x : v) x = float(rng.uniform(-1, 1));
    return Tensor::from({n, c}, std::move(v));
}

}  // namespace

TEST_CASE("moe with a single expert collapses to that expert's projection") {
    AdapterConfig cfg;
    cfg.kind = AdapterKind::moe;
    cfg.c_tot = 12;
    cfg.d = 4;
    cfg.experts = 1;
    Adapter moe(cfg, Rng(3));
    auto f = random_features(10, 12, 1);
    auto out = moe.forward(f);
    // expert 0 params are the first two tensors of the ordering contract
    auto params = moe.params();
    LinearT<float> expert;
    expert.weight = *params[0];
    expert.bias = *params[1];
    auto direct = expert(f);
    for (size_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == direct.data()[i]);
}

TEST_CASE("afm with saturated gates equals the plain projection") {
    AdapterConfig cfg;
    cfg.kind = AdapterKind::afm;
    cfg.c_tot = 12;
    cfg.d = 4;
    Adapter afm(cfg, Rng(4));
    auto params = afm.params();  // mask, proj.weight, proj.bias
    std::fill(params[0]->data(), params[0]->data() + params[0]->numel(), 100.f);
    auto f = random_features(9, 12, 2);
    auto out = afm.forward(f);
    LinearT<float> proj;
    proj.weight = *params[1];
    proj.bias = *params[2];
    auto direct = proj(f);
    for (size_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == direct.data()[i]);
}

TEST_CASE("desk-scale shapes and moe gate normalization") {
    AdapterConfig cfg;
    cfg.kind = AdapterKind::moe;
    cfg.c_tot = 40;
    cfg.d = 16;
    cfg.experts = 3;
    Adapter moe(cfg, Rng(5));
    auto f = random_features(256, 40, 3);
    std::vector<float> gates;
    auto out = moe.forward(f, &gates);
    CHECK(out.shape() == Shape{256, 16});
    REQUIRE(gates.size() == 256 * 3);
    for (size_t cell = 0; cell < 256; ++cell) {
        double sum = 0;
        for (size_t e = 0; e < 3; ++e) {
            CHECK(gates[cell * 3 + e] >= 0.f);
            sum += gates[cell * 3 + e];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("export length equals the closed-form parameter count") {
    AdapterConfig cfg;
    cfg.kind = AdapterKind::mlp;
    cfg.c_tot = 40;
    cfg.d = 16;
    cfg.hidden = 64;
    Adapter a(cfg, Rng(6)), b(cfg, Rng(7));
    auto flat = a.export_params();
    CHECK(flat.size() == 40 * 64 + 64 + 64 * 16 + 16);  // 3,664
    CHECK(flat.size() == b.export_params().size());

    // round trip is bitwise
    auto before = flat;
    a.import_params(flat);
    CHECK(a.export_params() == before);
    // cross-import changes values deterministically
    b.import_params(flat);
    CHECK(b.export_params() == before);

    std::vector<float> wrong(10);
    CHECK_THROWS_WITH_AS(a.import_params(wrong), doctest::Contains("expected 3664"), ShapeError);
}

TEST_CASE("channel mismatch and oversized d are rejected") {
    AdapterConfig cfg;
    cfg.kind = AdapterKind::mlp;
    cfg.c_tot = 12;
    cfg.d = 4;
    Adapter a(cfg, Rng(8));
    CHECK_THROWS_AS(a.forward(random_features(4, 9, 1)), ShapeError);

    AdapterConfig bad = cfg;
    bad.d = 12;
    CHECK_THROWS_AS(Adapter(bad, Rng(9)), ShapeError);
}

TEST_CASE("none adapter passes features through") {
    AdapterConfig cfg;
    cfg.kind = AdapterKind::none;
    cfg.c_tot = 12;
    Adapter a(cfg, Rng(1));
    CHECK(a.out_dim() == 12);
    auto f = random_features(5, 12, 4);
    auto out = a.forward(f);
    CHECK(out.values() == f.values());
    CHECK(a.params().empty());
}

TEST_CASE("gradcheck through all three adapters, 5 seeds") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const size_t n = 6, c = 6, d = 3;
        auto f = rand_tensor({n, c}, rng, -1, 1, false);
        auto t = rand_tensor({n, d}, rng, -1, 1, false);
        for (AdapterKind kind : {AdapterKind::mlp, AdapterKind::moe, AdapterKind::afm}) {
            AdapterConfig cfg;
            cfg.kind = kind;
            cfg.c_tot = c;
            cfg.d = d;
            cfg.hidden = 5;
            cfg.experts = 2;
            AdapterT<double> adapter(cfg, Rng(seed * 31));
            auto params = adapter.params();
            auto r = gradcheck([&]() { return mse(adapter.forward(f), t); }, params);
            CHECK_MESSAGE(r.max_rel_err < 1e-4, adapter_kind_name(kind), " seed ", seed, ": ", r.worst);
        }
    }
}

TEST_CASE("afm gates receive gradient from a downstream loss") {
    AdapterConfig cfg;
    cfg.kind = AdapterKind::afm;
    cfg.c_tot = 8;
    cfg.d = 3;
    Adapter afm(cfg, Rng(10));
    auto f = random_features(6, 8, 5);
    auto params = afm.params();
    Tape tape;
    auto loss = mse(afm.forward(f), Tensor::zeros({6, 3}));
    tape.backward(loss);
    const auto& mask_grad = params[0]->grad();
    bool any_nonzero = false;
    for (float g : mask_grad)
        if (g != 0.f) any_nonzero = true;
    CHECK(any_nonzero);
}

TEST_CASE("input-conditioned afm variant runs and differs from static gating") {
    AdapterConfig cfg;
    cfg.kind = AdapterKind::afm;
    cfg.c_tot = 8;
    cfg.d = 3;
    Adapter plain(cfg, Rng(11));
    cfg.afm_input_conditioned = true;
    Adapter se(cfg, Rng(11));
    auto f = random_features(6, 8, 6);
    auto a = plain.forward(f);
    auto b = se.forward(f);
    CHECK(a.shape() == b.shape());
    CHECK(se.params().size() == plain.params().size() + 2);
}
