#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "gazemoe/config.hpp"
#include "gazemoe/moe.hpp"
#include "gazemoe/model.hpp"
#include "gazemoe/ops.hpp"

using namespace gazemoe;
namespace o = gazemoe::ops;

namespace {

Config moe_cfg(std::size_t experts = 4, std::size_t k = 2, std::size_t shared = 2) {
    Config cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.feat_dim = 8;
    cfg.cnn_channels = 4;
    cfg.cnn_pool = 2;
    cfg.proto_illum = cfg.proto_head = cfg.proto_bg = 2;
    cfg.proto_label = 2;
    cfg.d_model = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.routed_experts = experts;
    cfg.top_k = k;
    cfg.shared_experts = shared;
    cfg.expert_ffn_dim = 6;
    cfg.batch_size = 4;
    cfg.data_n = 20;
    cfg.validate();
    return cfg;
}

template <class S>
void set_param(Params<S>& ps, const std::string& name, S v) {
    Tensor<S> t = ps.find(name);
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = v;
}

} // namespace

TEST_CASE("with K = E and equalized router logits the MoE equals the dense expert mean") {
    Config cfg = moe_cfg(4, 4, 2);
    Params<double> ps;
    Rng rng(61);
    TransformerEncoder<double> enc(cfg, ps, rng);
    set_param(ps, "blocks.0.router.w", 0.0);
    set_param(ps, "blocks.0.router.b", 0.0);

    NoGradGuard ng;
    Rng xr(62);
    auto x = Tensor<double>::randn({1, 50, cfg.d_model}, xr, 1.0);

    RouterStats st;
    Tensor<double> lb;
    auto y = enc.moe_ffn(x, enc.blocks()[0], nullptr, st, lb);

    // brute force: residual + mean over routed experts + shared mean
    auto xn = o::reshape(
        o::layer_norm(x, ps.find("blocks.0.ln2.gain"), ps.find("blocks.0.ln2.bias"), 1e-5), {50, 8});
    Tensor<double> acc = Tensor<double>::zeros({50, 8});
    for (std::size_t e = 0; e < 4; ++e)
        acc = o::add(acc, enc.expert_forward(enc.blocks()[0].routed[e], xn));
    acc = o::scale(acc, 0.25);
    Tensor<double> sh = Tensor<double>::zeros({50, 8});
    for (std::size_t j = 0; j < 2; ++j)
        sh = o::add(sh, enc.expert_forward(enc.blocks()[0].shared[j], xn));
    acc = o::add(acc, o::scale(sh, 0.5));
    auto want = o::add(x, o::reshape(acc, {1, 50, 8}));

    REQUIRE(y.numel() == want.numel());
    for (std::size_t i = 0; i < y.numel(); ++i)
        CHECK(std::abs(y.data()[i] - want.data()[i]) < 1e-5);
}

TEST_CASE("each token is dispatched to at most K routed experts") {
    Config cfg = moe_cfg(6, 3, 1);
    Params<double> ps;
    Rng rng(63);
    TransformerEncoder<double> enc(cfg, ps, rng);
    NoGradGuard ng;
    for (int trial = 0; trial < 8; ++trial) {
        Rng xr(100 + trial);
        auto x = Tensor<double>::randn({2, 9, cfg.d_model}, xr, 2.0);
        auto res = enc.forward(x);
        REQUIRE(res.stats.size() == 1);
        CHECK(res.stats[0].max_active_per_token <= cfg.top_k);
        CHECK(res.stats[0].tokens == 18);
        const auto& cnt = res.stats[0].counts;
        CHECK(std::accumulate(cnt.begin(), cnt.end(), std::size_t{0}) == 18 * cfg.top_k);
        double load_sum = 0, imp_sum = 0;
        for (std::size_t e = 0; e < cfg.routed_experts; ++e) {
            load_sum += res.stats[0].load[e];
            imp_sum += res.stats[0].importance[e];
        }
        CHECK(load_sum == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(imp_sum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("selected gates renormalize and weight the experts as computed by hand") {
    Config cfg = moe_cfg(4, 2, 0);
    cfg.shared_experts = 0;
    cfg.validate();
    Params<double> ps;
    Rng rng(64);
    TransformerEncoder<double> enc(cfg, ps, rng);
    set_param(ps, "blocks.0.router.w", 0.0);
    Tensor<double> rb = ps.find("blocks.0.router.b");
    rb.data()[0] = 4.0;
    rb.data()[1] = 3.0;
    rb.data()[2] = -100.0;
    rb.data()[3] = -100.0;

    NoGradGuard ng;
    Rng xr(65);
    auto x = Tensor<double>::randn({1, 7, cfg.d_model}, xr, 1.0);
    RouterStats st;
    Tensor<double> lb;
    auto y = enc.moe_ffn(x, enc.blocks()[0], nullptr, st, lb);

    const double g0 = std::exp(4.0) / (std::exp(4.0) + std::exp(3.0));
    const double g1 = 1.0 - g0;
    auto xn = o::reshape(
        o::layer_norm(x, ps.find("blocks.0.ln2.gain"), ps.find("blocks.0.ln2.bias"), 1e-5), {7, 8});
    auto e0 = enc.expert_forward(enc.blocks()[0].routed[0], xn);
    auto e1 = enc.expert_forward(enc.blocks()[0].routed[1], xn);
    auto want = o::add(x, o::reshape(o::add(o::scale(e0, g0), o::scale(e1, g1)), {1, 7, 8}));
    for (std::size_t i = 0; i < y.numel(); ++i)
        CHECK(y.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-9));

    CHECK(st.counts[0] == 7);
    CHECK(st.counts[1] == 7);
    CHECK(st.counts[2] == 0);
    CHECK(st.counts[3] == 0);
}

TEST_CASE("load balance is exactly 1 under uniform router probabilities") {
    Config cfg = moe_cfg(8, 4, 1);
    Params<double> ps;
    Rng rng(66);
    TransformerEncoder<double> enc(cfg, ps, rng);
    set_param(ps, "blocks.0.router.w", 0.0);
    set_param(ps, "blocks.0.router.b", 0.0);
    NoGradGuard ng;
    Rng xr(67);
    auto x = Tensor<double>::randn({2, 11, cfg.d_model}, xr, 1.0);
    auto res = enc.forward(x);
    REQUIRE(res.load_balance.defined());
    CHECK(std::abs(res.load_balance.item() - 1.0) < 1e-6);
}

TEST_CASE("load balance reaches E when one expert takes everything") {
    Config cfg = moe_cfg(8, 1, 1);
    Params<double> ps;
    Rng rng(68);
    TransformerEncoder<double> enc(cfg, ps, rng);
    set_param(ps, "blocks.0.router.w", 0.0);
    Tensor<double> rb = ps.find("blocks.0.router.b");
    rb.data()[2] = 50.0;
    NoGradGuard ng;
    Rng xr(69);
    auto x = Tensor<double>::randn({2, 11, cfg.d_model}, xr, 1.0);
    auto res = enc.forward(x);
    CHECK(std::abs(res.load_balance.item() - 8.0) < 1e-6);
    CHECK(res.stats[0].counts[2] == 22);
}

TEST_CASE("shared experts act on every token independent of routing") {
    Config cfg = moe_cfg(4, 2, 3);
    Params<double> ps;
    Rng rng(70);
    TransformerEncoder<double> enc(cfg, ps, rng);
    for (std::size_t e = 0; e < 4; ++e) {
        set_param(ps, "blocks.0.expert." + std::to_string(e) + ".w2", 0.0);
        set_param(ps, "blocks.0.expert." + std::to_string(e) + ".b2", 0.0);
    }
    NoGradGuard ng;
    Rng xr(71);
    auto x = Tensor<double>::randn({1, 6, cfg.d_model}, xr, 1.0);
    RouterStats st1, st2;
    Tensor<double> lb;
    auto y1 = enc.moe_ffn(x, enc.blocks()[0], nullptr, st1, lb);

    // wildly different routing must not change the output when routed experts are muted
    Tensor<double> rb = ps.find("blocks.0.router.b");
    rb.data()[0] = 30.0;
    rb.data()[3] = -30.0;
    auto y2 = enc.moe_ffn(x, enc.blocks()[0], nullptr, st2, lb);

    auto xn = o::reshape(
        o::layer_norm(x, ps.find("blocks.0.ln2.gain"), ps.find("blocks.0.ln2.bias"), 1e-5), {6, 8});
    Tensor<double> sh = Tensor<double>::zeros({6, 8});
    for (std::size_t j = 0; j < 3; ++j)
        sh = o::add(sh, enc.expert_forward(enc.blocks()[0].shared[j], xn));
    auto want = o::add(x, o::reshape(o::scale(sh, 1.0 / 3.0), {1, 6, 8}));

    for (std::size_t i = 0; i < y1.numel(); ++i) {
        CHECK(y1.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-10));
        CHECK(y1.data()[i] == y2.data()[i]);
    }
}

TEST_CASE("encoder is permutation equivariant over tokens") {
    Config cfg = moe_cfg(4, 2, 2);
    cfg.layers = 2;
    cfg.validate();
    Params<double> ps;
    Rng rng(72);
    TransformerEncoder<double> enc(cfg, ps, rng);
    NoGradGuard ng;
    Rng xr(73);
    const std::size_t T = 7, d = cfg.d_model;
    auto x = Tensor<double>::randn({1, T, d}, xr, 1.0);
    const std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
    auto xp = Tensor<double>::zeros({1, T, d});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j)
            xp.data()[t * d + j] = x.data()[perm[t] * d + j];

    auto y = enc.forward(x).y;
    auto yp = enc.forward(xp).y;
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j)
            CHECK(yp.data()[t * d + j] ==
                  doctest::Approx(y.data()[perm[t] * d + j]).epsilon(1e-10));
}

TEST_CASE("disabling MoE swaps routed machinery for a single dense FFN") {
    Config cfg = moe_cfg(4, 2, 2);
    cfg.moe_enabled = false;
    Params<double> ps;
    Rng rng(74);
    TransformerEncoder<double> enc(cfg, ps, rng);
    CHECK_NOTHROW(ps.find("blocks.0.ffn.w1"));
    CHECK_THROWS_AS(ps.find("blocks.0.router.w"), ContractError);
    NoGradGuard ng;
    Rng xr(75);
    auto x = Tensor<double>::randn({1, 5, cfg.d_model}, xr, 1.0);
    auto res = enc.forward(x);
    CHECK(res.stats.empty());
    CHECK_FALSE(res.load_balance.defined());
}

TEST_CASE("moe_layer_indices narrows which blocks route") {
    Config cfg = moe_cfg(4, 2, 1);
    cfg.layers = 3;
    cfg.moe_layer_indices = "1";
    cfg.validate();
    Params<double> ps;
    Rng rng(76);
    TransformerEncoder<double> enc(cfg, ps, rng);
    CHECK_NOTHROW(ps.find("blocks.0.ffn.w1"));
    CHECK_NOTHROW(ps.find("blocks.1.router.w"));
    CHECK_NOTHROW(ps.find("blocks.2.ffn.w1"));
    NoGradGuard ng;
    Rng xr(77);
    auto x = Tensor<double>::randn({1, 5, cfg.d_model}, xr, 1.0);
    auto res = enc.forward(x);
    REQUIRE(res.stats.size() == 1);
    CHECK(res.stats[0].layer == 1);
}

TEST_CASE("routing pins replay the recorded branch even when logits shift") {
    Config cfg = moe_cfg(4, 2, 1);
    Params<double> ps;
    Rng rng(78);
    TransformerEncoder<double> enc(cfg, ps, rng);
    NoGradGuard ng;
    Rng xr(79);
    auto x = Tensor<double>::randn({1, 5, cfg.d_model}, xr, 1.0);

    RoutingPins pins;
    RouterStats st1;
    Tensor<double> lb;
    enc.moe_ffn(x, enc.blocks()[0], &pins, st1, lb);
    const auto recorded = pins.topk;

    // nudge the router so a fresh top-k would differ, then replay
    Tensor<double> rb = ps.find("blocks.0.router.b");
    rb.data()[0] += 5.0;
    pins.start_replay();
    RouterStats st2;
    enc.moe_ffn(x, enc.blocks()[0], &pins, st2, lb);
    CHECK(st2.counts == st1.counts);

    RouterStats st3;
    enc.moe_ffn(x, enc.blocks()[0], nullptr, st3, lb);
    CHECK(st3.counts != st1.counts);

    pins.start_replay();
    RouterStats st4;
    enc.moe_ffn(x, enc.blocks()[0], &pins, st4, lb);
    pins.replay_cursor = 99;
    RouterStats st5;
    CHECK_THROWS_AS(enc.moe_ffn(x, enc.blocks()[0], &pins, st5, lb), ContractError);
}

TEST_CASE("feature combo masking keeps excluded projections at exactly zero gradient") {
    Config cfg = moe_cfg(4, 2, 1);
    cfg.feature_combo = "f1";
    cfg.validate();
    GazeModel<double> model(cfg, 123);
    Dataset ds = make_dataset(12, 55, cfg.image_size);
    std::vector<double> img;
    for (int i = 0; i < 4; ++i)
        for (float v : ds.train[i].image) img.push_back(v);
    std::vector<double> tgt;
    for (int i = 0; i < 4; ++i)
        for (float v : ds.train[i].gaze) tgt.push_back(v);
    auto images = Tensor<double>::from_data({4, cfg.image_size, cfg.image_size, 3}, img);
    auto target = Tensor<double>::from_data({4, 3}, tgt);

    model.params().zero_grad();
    auto out = model.forward(images);
    auto lb = model.loss(out, target);
    backward(lb.total);

    CHECK_FALSE(model.params().find("fuse.patch.w").has_grad());
    CHECK_FALSE(model.params().find("fuse.cnn.w").has_grad());
    CHECK_FALSE(model.params().find("fuse.type.cnn").has_grad());
    CHECK_FALSE(model.params().find("proto.label").has_grad());
    CHECK(model.params().find("fuse.f1.w").has_grad());

    // token count shrinks to the single conditioned global token
    CHECK(out.pred.shape() == Shape{4, 3});
}

TEST_CASE("model forward reports selection and obeys token budget") {
    Config cfg = moe_cfg(4, 2, 2);
    GazeModel<double> model(cfg, 321);
    Dataset ds = make_dataset(12, 56, cfg.image_size);
    std::vector<double> img;
    for (int i = 0; i < 3; ++i)
        for (float v : ds.train[i].image) img.push_back(v);
    auto images = Tensor<double>::from_data({3, cfg.image_size, cfg.image_size, 3}, img);
    NoGradGuard ng;
    auto out = model.forward(images);
    CHECK(out.pred.shape() == Shape{3, 3});
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.selection.chosen[c].size() == 3);
    REQUIRE(out.stats.size() == cfg.layers);
    const std::size_t T = 2 + cfg.n_patches() + cfg.n_cnn_tokens();
    for (const auto& st : out.stats) CHECK(st.tokens == 3 * T);
}
