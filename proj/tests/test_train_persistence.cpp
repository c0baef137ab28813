#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "gazemoe/checkpoint.hpp"
#include "gazemoe/config.hpp"
#include "gazemoe/model.hpp"
#include "gazemoe/train.hpp"

using namespace gazemoe;

namespace {

Config micro_cfg() {
    Config cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.feat_dim = 10;
    cfg.cnn_channels = 4;
    cfg.cnn_pool = 2;
    cfg.proto_illum = cfg.proto_head = cfg.proto_bg = 2;
    cfg.proto_label = 3;
    cfg.d_model = 12;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.routed_experts = 4;
    cfg.top_k = 2;
    cfg.shared_experts = 2;
    cfg.expert_ffn_dim = 8;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.data_n = 40;
    cfg.data_seed = 900;
    cfg.seed = 4;
    cfg.validate();
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string csv_of(const TrainResult<float>& res) {
    std::ostringstream os;
    os << metrics_csv_header() << "\n";
    for (const auto& r : res.metrics) os << metrics_csv_row(r) << "\n";
    return os.str();
}

} // namespace

TEST_CASE("training is deterministic: identical seeds give identical metrics") {
    Config cfg = micro_cfg();
    Dataset ds = make_dataset(cfg.data_n, cfg.data_seed, cfg.image_size);

    GazeModel<float> m1(cfg, cfg.seed);
    AdamW<float> o1(m1.params(), cfg.weight_decay, cfg.beta1, cfg.beta2);
    auto r1 = train(m1, o1, ds);

    GazeModel<float> m2(cfg, cfg.seed);
    AdamW<float> o2(m2.params(), cfg.weight_decay, cfg.beta1, cfg.beta2);
    auto r2 = train(m2, o2, ds);

    // 32 train samples, batch 8, 3 epochs
    CHECK(r1.steps == 12);
    CHECK(csv_of(r1) == csv_of(r2));
    CHECK(r1.final_test_error == r2.final_test_error);
    CHECK(r1.final_val_error == r2.final_val_error);

    Config other = cfg;
    other.seed = 5;
    GazeModel<float> m3(other, other.seed);
    AdamW<float> o3(m3.params(), other.weight_decay, other.beta1, other.beta2);
    auto r3 = train(m3, o3, ds);
    CHECK(r3.final_test_error != r1.final_test_error);
}

TEST_CASE("metrics records carry schedule and loss fields") {
    Config cfg = micro_cfg();
    Dataset ds = make_dataset(cfg.data_n, cfg.data_seed, cfg.image_size);
    GazeModel<float> m(cfg, cfg.seed);
    AdamW<float> o(m.params(), cfg.weight_decay, cfg.beta1, cfg.beta2);
    auto res = train(m, o, ds);

    REQUIRE(res.metrics.size() == cfg.epochs);
    CHECK(metrics_csv_header() ==
          "step,epoch,lr,train_angular_loss,load_balance_loss,val_error_deg,test_error_deg,"
          "load_entropy");
    double prev_lr = cfg.lr_max + 1;
    for (const auto& r : res.metrics) {
        CHECK(r.lr <= cfg.lr_max);
        CHECK(r.lr >= cfg.lr_min);
        CHECK(r.lr < prev_lr);
        prev_lr = r.lr;
        CHECK(std::isfinite(r.train_angular));
        CHECK(std::isfinite(r.load_balance));
        CHECK(r.val_error_deg >= 0);
        CHECK(r.test_error_deg >= 0);
        CHECK(r.load_entropy >= 0);
        CHECK(r.load_entropy <= std::log(double(cfg.routed_experts)) + 1e-9);
    }
    CHECK(res.metrics.back().step == 12);
    CHECK(res.metrics.back().test_error_deg == res.final_test_error);
}

TEST_CASE("evaluation is independent of batch partitioning") {
    Config cfg = micro_cfg();
    Dataset ds = make_dataset(cfg.data_n, cfg.data_seed, cfg.image_size);
    GazeModel<float> m(cfg, cfg.seed);
    const double e1 = evaluate(m, ds.test, 1);
    const double e2 = evaluate(m, ds.test, 3);
    const double e3 = evaluate(m, ds.test, 100);
    CHECK(e1 == e2);
    CHECK(e2 == e3);
    CHECK_THROWS_AS(evaluate(m, std::vector<GazeSample>{}, 4), ContractError);
}

TEST_CASE("checkpoint save/load round-trip is byte-identical") {
    Config cfg = micro_cfg();
    Dataset ds = make_dataset(cfg.data_n, cfg.data_seed, cfg.image_size);
    GazeModel<float> m(cfg, cfg.seed);
    AdamW<float> o(m.params(), cfg.weight_decay, cfg.beta1, cfg.beta2);
    train(m, o, ds);

    const std::string p1 = "/tmp/gz_ck_a.bin", p2 = "/tmp/gz_ck_b.bin";
    save_checkpoint(p1, cfg, m.params(), &o);
    Checkpoint ck = load_checkpoint(p1);
    CHECK(ck.config.d_model == cfg.d_model);
    CHECK(ck.config.data_seed == cfg.data_seed);

    GazeModel<float> m2(ck.config, ck.config.seed);
    AdamW<float> o2(m2.params(), ck.config.weight_decay, ck.config.beta1, ck.config.beta2);
    restore_model(ck, m2, &o2);
    save_checkpoint(p2, ck.config, m2.params(), &o2);
    CHECK(slurp(p1) == slurp(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("restored model evaluates exactly like the one that trained") {
    Config cfg = micro_cfg();
    Dataset ds = make_dataset(cfg.data_n, cfg.data_seed, cfg.image_size);
    GazeModel<float> m(cfg, cfg.seed);
    AdamW<float> o(m.params(), cfg.weight_decay, cfg.beta1, cfg.beta2);
    auto res = train(m, o, ds);

    const std::string p = "/tmp/gz_ck_c.bin";
    save_checkpoint(p, cfg, m.params(), &o);
    Checkpoint ck = load_checkpoint(p);
    GazeModel<float> fresh(ck.config, ck.config.seed);
    restore_model(ck, fresh);
    Dataset ds2 = make_dataset(ck.config.data_n, ck.config.data_seed, ck.config.image_size);
    CHECK(evaluate(fresh, ds2.test, ck.config.batch_size) == res.final_test_error);
    std::remove(p.c_str());
}

TEST_CASE("restored optimizer state continues training identically to the live one") {
    Config cfg = micro_cfg();
    cfg.epochs = 1;
    Dataset ds = make_dataset(cfg.data_n, cfg.data_seed, cfg.image_size);

    GazeModel<float> live(cfg, cfg.seed);
    AdamW<float> live_opt(live.params(), cfg.weight_decay, cfg.beta1, cfg.beta2);
    train(live, live_opt, ds);

    const std::string p = "/tmp/gz_ck_d.bin";
    save_checkpoint(p, cfg, live.params(), &live_opt);
    Checkpoint ck = load_checkpoint(p);
    GazeModel<float> restored(ck.config, ck.config.seed);
    AdamW<float> restored_opt(restored.params(), ck.config.weight_decay, ck.config.beta1,
                              ck.config.beta2);
    restore_model(ck, restored, &restored_opt);
    CHECK(restored_opt.steps_taken() == live_opt.steps_taken());

    // one more identical Adam step on both; the updates only match if the
    // moment buffers were restored exactly
    BatchBuilder<float> bb(cfg, live.encoders());
    std::vector<std::size_t> idx = {0, 1, 2, 3};
    Tensor<float> targets = bb.targets_for(ds.train, idx);
    auto step_once = [&](GazeModel<float>& m, AdamW<float>& o) {
        Tensor<float> images = bb.images_for(ds.train, idx);
        FeatureBundle<float> fb = m.encoders().encode(images);
        m.params().zero_grad();
        ModelOutput<float> out = m.forward_cached(fb.f_global, fb.t_patch, images);
        LossBreakdown<float> lb = m.loss(out, targets);
        backward(lb.total);
        o.step(1e-3);
    };
    step_once(live, live_opt);
    step_once(restored, restored_opt);

    const std::string pa = "/tmp/gz_ck_e.bin", pb = "/tmp/gz_ck_f.bin";
    save_checkpoint(pa, cfg, live.params());
    save_checkpoint(pb, cfg, restored.params());
    CHECK(slurp(pa) == slurp(pb));
    std::remove(p.c_str());
    std::remove(pa.c_str());
    std::remove(pb.c_str());
}

TEST_CASE("checkpoint loader rejects corruption and shape drift") {
    Config cfg = micro_cfg();
    GazeModel<float> m(cfg, cfg.seed);
    const std::string p = "/tmp/gz_ck_g.bin";
    save_checkpoint(p, cfg, m.params());

    std::string bytes = slurp(p);
    CHECK_THROWS_AS(load_checkpoint("/tmp/gz_does_not_exist.bin"), IntegrityError);

    std::string wrong_magic = bytes;
    wrong_magic[0] = 'X';
    std::ofstream(p, std::ios::binary) << wrong_magic;
    CHECK_THROWS_AS(load_checkpoint(p), IntegrityError);

    std::string truncated = bytes.substr(0, bytes.size() / 2);
    std::ofstream(p, std::ios::binary) << truncated;
    CHECK_THROWS_AS(load_checkpoint(p), IntegrityError);

    std::ofstream(p, std::ios::binary) << bytes;
    Checkpoint ck = load_checkpoint(p);
    Config bigger = cfg;
    bigger.d_model = 16;
    bigger.validate();
    GazeModel<float> m2(bigger, 1);
    CHECK_THROWS_AS(restore_model(ck, m2), IntegrityError);
    std::remove(p.c_str());
}

TEST_CASE("ablation axes produce the documented rows") {
    Config cfg = micro_cfg();
    cfg.epochs = 1;
    cfg.data_n = 20;
    Dataset ds = make_dataset(cfg.data_n, cfg.data_seed, cfg.image_size);

    auto feat = run_ablation<float>("features", cfg, ds);
    REQUIRE(feat.size() == 4);
    CHECK(feat[0].label == "f1");
    CHECK(feat[1].label == "f1+f2");
    CHECK(feat[2].label == "f1+f2+cnn");
    CHECK(feat[3].label == "f1+f2+cnn+patch");

    auto moe = run_ablation<float>("moe", cfg, ds);
    REQUIRE(moe.size() == 2);
    CHECK(moe[0].label == "moe");
    CHECK(moe[1].label == "dense");
    for (const auto& r : moe) CHECK(std::isfinite(r.test_error_deg));

    auto lr = run_ablation<float>("lr", cfg, ds);
    REQUIRE(lr.size() == 5);
    CHECK(lr[0].label == "lr=0.001");
    CHECK(lr[4].label == "lr=1e-07");

    CHECK_THROWS_AS(run_ablation<float>("bogus", cfg, ds), ContractError);
}

TEST_CASE("step observer sees every training step with routing stats") {
    Config cfg = micro_cfg();
    cfg.epochs = 2;
    Dataset ds = make_dataset(cfg.data_n, cfg.data_seed, cfg.image_size);
    GazeModel<float> m(cfg, cfg.seed);
    AdamW<float> o(m.params(), cfg.weight_decay, cfg.beta1, cfg.beta2);

    struct Probe : StepObserver {
        std::size_t calls = 0;
        std::size_t top_k = 0;
        std::size_t layers = 0;
        bool in_order = true;
        bool sparse = true;
        void on_step(std::uint64_t step, const std::vector<RouterStats>& stats) override {
            ++calls;
            in_order = in_order && step == calls;
            sparse = sparse && stats.size() == layers;
            for (const auto& st : stats) sparse = sparse && st.max_active_per_token <= top_k;
        }
    };
    Probe probe;
    probe.top_k = cfg.top_k;
    probe.layers = cfg.layers;
    train(m, o, ds, &probe);
    CHECK(probe.calls == 8);
    CHECK(probe.in_order);
    CHECK(probe.sparse);
}
