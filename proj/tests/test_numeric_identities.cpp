#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gazemoe/model.hpp"
#include "gazemoe/ops.hpp"
#include "gazemoe/rng.hpp"
#include "gazemoe/train.hpp"

using namespace gazemoe;
namespace o = gazemoe::ops;
using T = Tensor<double>;

TEST_CASE("angular loss identities on canonical vector pairs") {
    auto ex = T::from_data({1, 3}, {1.0, 0.0, 0.0});
    auto ey = T::from_data({1, 3}, {0.0, 1.0, 0.0});
    auto nx = T::from_data({1, 3}, {-1.0, 0.0, 0.0});

    CHECK(std::abs(o::angular_loss(ex, ex).item()) < 1e-6);
    CHECK(o::angular_loss(ex, ey).item() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(o::angular_loss(ex, nx).item() == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("angular loss is scale invariant in the prediction") {
    Rng rng(500);
    for (int i = 0; i < 100; ++i) {
        std::vector<double> p(3), t(3);
        for (auto& v : p) v = rng.normal();
        for (auto& v : t) v = rng.normal();
        const double c = std::exp(rng.uniform(-3.0, 3.0));
        auto pred = T::from_data({1, 3}, p);
        auto scaled = T::from_data({1, 3}, {c * p[0], c * p[1], c * p[2]});
        auto tgt = T::from_data({1, 3}, t);
        const double l1 = o::angular_loss(pred, tgt).item();
        const double l2 = o::angular_loss(scaled, tgt).item();
        CHECK(std::abs(l1 - l2) < 1e-6);
    }
}

TEST_CASE("loss and degree metric agree on random unit pairs") {
    Rng rng(501);
    for (int i = 0; i < 50; ++i) {
        double p[3], t[3];
        double np = 0, nt = 0;
        for (int k = 0; k < 3; ++k) {
            p[k] = rng.normal();
            t[k] = rng.normal();
            np += p[k] * p[k];
            nt += t[k] * t[k];
        }
        np = std::sqrt(np);
        nt = std::sqrt(nt);
        for (int k = 0; k < 3; ++k) {
            p[k] /= np;
            t[k] /= nt;
        }
        auto pred = T::from_data({1, 3}, {p[0], p[1], p[2]});
        auto tgt = T::from_data({1, 3}, {t[0], t[1], t[2]});
        const double loss = o::angular_loss(pred, tgt).item();
        const double deg = angular_error_degrees(p, t);
        CHECK(std::abs(loss - (1.0 - std::cos(deg * kPi / 180.0))) < 1e-6);
    }
    // cos similarity 0.5 corresponds to 60 degrees
    double a[3] = {1.0, 0.0, 0.0};
    double b[3] = {0.5, std::sqrt(3.0) / 2.0, 0.0};
    CHECK(angular_error_degrees(a, b) == doctest::Approx(60.0).epsilon(1e-9));
}

TEST_CASE("softmax rows are probability vectors") {
    Rng rng(502);
    auto x = T::randn({5, 7}, rng, 2.0);
    auto y = o::softmax(x, 1);
    for (std::size_t r = 0; r < 5; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 7; ++c) {
            const double v = y.data()[r * 7 + c];
            CHECK(v > 0.0);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("softmax is invariant to per-row shifts") {
    auto x = T::from_data({1, 3}, {0.3, -1.2, 2.0});
    auto xs = T::from_data({1, 3}, {0.3 + 100, -1.2 + 100, 2.0 + 100});
    auto y = o::softmax(x, 1);
    auto ys = o::softmax(xs, 1);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(y.data()[i] == doctest::Approx(ys.data()[i]).epsilon(1e-12));
}

TEST_CASE("layer_norm output is standardized and scale invariant") {
    Rng rng(503);
    auto x = T::randn({4, 16}, rng, 3.0);
    auto g = T::full({16}, 1.0);
    auto b = T::full({16}, 0.0);
    auto y = o::layer_norm(x, g, b, 1e-10);
    for (std::size_t r = 0; r < 4; ++r) {
        double mean = 0, var = 0;
        for (std::size_t c = 0; c < 16; ++c) mean += y.data()[r * 16 + c];
        mean /= 16;
        for (std::size_t c = 0; c < 16; ++c) {
            const double d = y.data()[r * 16 + c] - mean;
            var += d * d;
        }
        var /= 16;
        CHECK(std::abs(mean) < 1e-9);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
    }

    // positive rescaling of the input leaves the normalized output unchanged,
    // which is what makes the network brightness invariant after conditioning
    auto xs = o::scale(x, 3.7);
    auto ys = o::layer_norm(xs, g, b, 1e-10);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(y.data()[i] == doctest::Approx(ys.data()[i]).epsilon(1e-9));
}

TEST_CASE("gelu matches the exact Gauss error form") {
    auto x = T::from_data({5}, {-3.0, -1.0, 0.0, 1.0, 3.0});
    auto y = o::gelu(x);
    for (std::size_t i = 0; i < 5; ++i) {
        const double v = x.data()[i];
        const double want = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
        CHECK(y.data()[i] == doctest::Approx(want).epsilon(1e-15));
    }
    CHECK(y.data()[2] == 0.0);
}

TEST_CASE("cosine schedule hits the pinned endpoints and midpoint") {
    CHECK(cosine_lr(0, 1000, 1e-4, 1e-6) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(cosine_lr(1000, 1000, 1e-4, 1e-6) == doctest::Approx(1e-6).epsilon(1e-12));
    CHECK(cosine_lr(500, 1000, 1e-4, 1e-6) == doctest::Approx(5.05e-5).epsilon(1e-9));
    CHECK_THROWS_AS(cosine_lr(1, 0, 1e-4, 1e-6), ContractError);
    CHECK_THROWS_AS(cosine_lr(11, 10, 1e-4, 1e-6), ContractError);
    // monotone non-increasing over the whole schedule
    double prev = cosine_lr(0, 97, 1e-4, 1e-6);
    for (std::size_t s = 1; s <= 97; ++s) {
        const double cur = cosine_lr(s, 97, 1e-4, 1e-6);
        CHECK(cur <= prev + 1e-18);
        prev = cur;
    }
}

TEST_CASE("adamw first step and decay behave as closed forms predict") {
    // single scalar, g = 1: bias-corrected ratio is 1, so the step is -lr
    Params<double> ps;
    auto w = ps.add_full("w", {1}, 0.5);
    AdamW<double> opt(ps, 0.0, 0.9, 0.999);
    w.grad_buffer()[0] = 1.0;
    opt.step(1e-2);
    CHECK(w.data()[0] == doctest::Approx(0.5 - 1e-2).epsilon(1e-6));

    // zero gradients with wd = 0: parameters unchanged
    Params<double> ps2;
    auto w2 = ps2.add_full("w", {1}, 0.25);
    AdamW<double> opt2(ps2, 0.0, 0.9, 0.999);
    w2.grad_buffer()[0] = 0.0;
    opt2.step(1e-2);
    CHECK(w2.data()[0] == 0.25);

    // zero gradients with wd > 0: pure decoupled shrink by (1 - lr wd)
    Params<double> ps3;
    auto w3 = ps3.add_full("w", {1}, 2.0);
    AdamW<double> opt3(ps3, 0.1, 0.9, 0.999);
    w3.grad_buffer()[0] = 0.0;
    opt3.step(1e-2);
    CHECK(w3.data()[0] == doctest::Approx(2.0 * (1.0 - 1e-2 * 0.1)).epsilon(1e-12));
}

TEST_CASE("adamw rejects NaN gradients naming the parameter") {
    Params<double> ps;
    auto w = ps.add_full("blocks.0.attn.wq", {2}, 1.0);
    AdamW<double> opt(ps, 0.01, 0.9, 0.999);
    w.grad_buffer()[1] = std::nan("");
    try {
        opt.step(1e-3);
        FAIL("expected TrainingDivergenceError");
    } catch (const TrainingDivergenceError& e) {
        CHECK(std::string(e.what()).find("blocks.0.attn.wq") != std::string::npos);
    }
}

TEST_CASE("frozen parameters are never updated") {
    Params<double> ps;
    auto frozen = ps.add_full("frozen", {2}, 1.5, false);
    auto live = ps.add_full("live", {2}, 1.5, true);
    AdamW<double> opt(ps, 0.5, 0.9, 0.999);
    live.grad_buffer()[0] = 1.0;
    live.grad_buffer()[1] = 1.0;
    opt.step(1e-2);
    CHECK(frozen.data()[0] == 1.5);
    CHECK(frozen.data()[1] == 1.5);
    CHECK(live.data()[0] != 1.5);
}
