#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "forla/decoder.hpp"
#include "gradcheck.hpp"

using namespace forla;
using forla::testing::gradcheck;
using forla::testing::rand_tensor;

namespace {

DecoderConfig tiny_cfg() {
    DecoderConfig cfg;
    cfg.slot_dim = 4;
    cfg.positions = 9;
    cfg.c_target = 5;
    cfg.hidden = 6;
    return cfg;
}

Tensor random_slots(size_t k, size_t d, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(k * d);
    for (auto& x : v) x = float(rng.uniform(-1, 1));
    return Tensor::from({k, d}, std::move(v));
}

}  // namespace

TEST_CASE("identical slots share alpha uniformly") {
    BroadcastDecoder dec(tiny_cfg(), Rng(1));
    std::vector<float> same;
    for (int k = 0; k < 3; ++k) same.insert(same.end(), {0.4f, -0.1f, 0.2f, 0.7f});
    auto rec = dec.decode(Tensor::from({3, 4}, std::move(same)));
    for (size_t i = 0; i < 9; ++i)
        for (size_t k = 0; k < 3; ++k)
            CHECK(rec.alpha.data()[i * 3 + k] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("single slot: alpha is one and features equal the component") {
    BroadcastDecoder dec(tiny_cfg(), Rng(2));
    auto rec = dec.decode(random_slots(1, 4, 3));
    for (size_t i = 0; i < 9; ++i) CHECK(rec.alpha.data()[i] == 1.0f);
    CHECK(rec.features.values() == rec.components[0].values());
}

TEST_CASE("alpha rows sum to one and recomposition matches") {
    BroadcastDecoder dec(tiny_cfg(), Rng(3));
    auto rec = dec.decode(random_slots(4, 4, 4));
    const size_t N = 9, K = 4, C = 5;
    for (size_t i = 0; i < N; ++i) {
        double sum = 0;
        for (size_t k = 0; k < K; ++k) sum += rec.alpha.data()[i * K + k];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    for (size_t i = 0; i < N; ++i) {
        for (size_t c = 0; c < C; ++c) {
            double mix = 0;
            for (size_t k = 0; k < K; ++k)
                mix += double(rec.alpha.data()[i * K + k]) * double(rec.components[k].data()[i * C + c]);
            CHECK(rec.features.data()[i * C + c] == doctest::Approx(mix).epsilon(1e-6));
        }
    }
}

TEST_CASE("slot dim mismatch is rejected") {
    BroadcastDecoder dec(tiny_cfg(), Rng(4));
    CHECK_THROWS_AS(dec.decode(random_slots(2, 7, 5)), ShapeError);
}

TEST_CASE("student loss examples") {
    auto f = random_slots(6, 5, 6);  // any 2-d tensor works
    CHECK(student_loss(f, f).item() == 0.0f);
    auto shifted = affine(f, 1.0f, 1.0f);
    CHECK(student_loss(shifted, f).item() == doctest::Approx(1.0).epsilon(1e-6));
    // direct sum oracle
    auto g = random_slots(6, 5, 7);
    double acc = 0;
    for (size_t i = 0; i < f.numel(); ++i) {
        double d = double(f.data()[i]) - double(g.data()[i]);
        acc += d * d;
    }
    CHECK(student_loss(f, g).item() == doctest::Approx(acc / double(f.numel())).epsilon(1e-6));
    CHECK_THROWS_AS(student_loss(f, random_slots(3, 5, 8)), ShapeError);
}

TEST_CASE("teacher loss enforces the stage-1 stop gradient") {
    auto f_hat = random_slots(4, 3, 9);
    auto target = random_slots(4, 3, 10);
    target.set_requires_grad(true);
    CHECK_THROWS_AS(teacher_loss(f_hat, target, /*stop_gradient=*/true), TapeError);
    CHECK_NOTHROW(teacher_loss(f_hat, target.detach(), true));
    CHECK_NOTHROW(teacher_loss(f_hat, target, /*stop_gradient=*/false));
    CHECK(teacher_loss(f_hat, f_hat.detach(), true).item() == 0.0f);
}

TEST_CASE("masks from alpha: argmax, tie to lowest index, oracle") {
    // one-hot
    auto onehot = Tensor::from({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 0});
    auto m = masks_from_alpha(onehot, 2, 2);
    CHECK(m.labels == std::vector<int>{0, 1, 2, 1});
    // exact tie -> lowest slot index
    auto tie = Tensor::from({1, 3}, {0.4f, 0.4f, 0.2f});
    CHECK(masks_from_alpha(tie, 1, 1).labels[0] == 0);
    // random argmax oracle
    Rng rng(11);
    std::vector<float> v(16 * 5);
    for (auto& x : v) x = float(rng.uniform(0, 1));
    auto alpha = Tensor::from({16, 5}, std::vector<float>(v));
    auto mask = masks_from_alpha(alpha, 4, 4);
    for (size_t i = 0; i < 16; ++i) {
        int best = 0;
        for (int k = 1; k < 5; ++k)
            if (v[i * 5 + size_t(k)] > v[i * 5 + size_t(best)]) best = k;
        CHECK(mask.labels[i] == best);
    }
    CHECK_THROWS_AS(masks_from_alpha(alpha, 5, 5), ShapeError);
}

TEST_CASE("gradcheck through the decoder, 5 seeds") {
    DecoderConfig cfg;
    cfg.slot_dim = 3;
    cfg.positions = 4;
    cfg.c_target = 3;
    cfg.hidden = 5;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        BroadcastDecoderT<double> dec(cfg, Rng(seed));
        Rng rng(seed + 50);
        auto slots = rand_tensor({2, 3}, rng, -1, 1, false);
        auto target = rand_tensor({4, 3}, rng, -1, 1, false);
        auto params = dec.params();
        auto r = gradcheck([&]() { return mse(dec.decode(slots).features, target); }, params);
        CHECK_MESSAGE(r.max_rel_err < 1e-4, "seed ", seed, ": ", r.worst);
    }
}

TEST_CASE("gradient flows through alpha as well as components") {
    DecoderConfig cfg = tiny_cfg();
    BroadcastDecoderT<double> dec(cfg, Rng(8));
    Rng rng(20);
    auto slots = rand_tensor({3, 4}, rng);  // differentiate through the slots too
    auto target = rand_tensor({9, 5}, rng, -1, 1, false);
    TensorT<double>* params[] = {&slots};
    auto r = gradcheck([&]() { return mse(dec.decode(slots).features, target); }, params);
    CHECK_MESSAGE(r.max_rel_err < 1e-4, r.worst);
}
