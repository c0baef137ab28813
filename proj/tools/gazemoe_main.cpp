#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gazemoe/checkpoint.hpp"
#include "gazemoe/config.hpp"
#include "gazemoe/model.hpp"
#include "gazemoe/pipeline_check.hpp"
#include "gazemoe/synthetic.hpp"
#include "gazemoe/train.hpp"

namespace fs = std::filesystem;
using namespace gazemoe;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir = ".";
    std::string profile = "desk";
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
    bool seed_set() const { return seed_opt && seed_opt->count() > 0; }
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "config file (key = value lines)");
    cmd->add_option("--out", f.out_dir, "output directory");
    cmd->add_option("--profile", f.profile, "base profile: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    f.seed_opt = cmd->add_option("--seed", f.seed, "seed override");
}

Config resolve_config(const CommonFlags& f) {
    Config cfg = profile_by_name(f.profile);
    if (!f.config_path.empty()) cfg = load_config_file(f.config_path, cfg);
    if (f.seed_set()) cfg.seed = f.seed;
    cfg.validate();
    return cfg;
}

Dataset dataset_for(const Config& cfg) {
    if (!cfg.data_path.empty()) {
        Dataset ds = load_dataset(cfg.data_path);
        if (ds.image_size != cfg.image_size)
            throw ConfigError("dataset image size " + std::to_string(ds.image_size) +
                              " does not match model.image_size " +
                              std::to_string(cfg.image_size));
        return ds;
    }
    return make_dataset(cfg.data_n, cfg.data_seed, cfg.image_size);
}

const std::vector<GazeSample>& split_by_name(const Dataset& ds, const std::string& name) {
    if (name == "train") return ds.train;
    if (name == "val") return ds.val;
    if (name == "test") return ds.test;
    throw ContractError("unknown split '" + name + "'");
}

int cmd_train(const CommonFlags& flags) {
    Config cfg = resolve_config(flags);
    Dataset ds = dataset_for(cfg);
    GazeModel<float> model(cfg, cfg.seed);
    AdamW<float> opt(model.params(), cfg.weight_decay, cfg.beta1, cfg.beta2);
    TrainResult<float> res = train(model, opt, ds);

    fs::create_directories(flags.out_dir);
    const fs::path out(flags.out_dir);
    {
        std::ofstream csv(out / "metrics.csv");
        csv << metrics_csv_header() << "\n";
        for (const auto& r : res.metrics) csv << metrics_csv_row(r) << "\n";
    }
    {
        std::ofstream summary(out / "run_summary.txt");
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%.9g", res.final_test_error);
        summary << "final_test_error_deg = " << buf << "\n";
        std::snprintf(buf, sizeof(buf), "%.9g", res.final_val_error);
        summary << "final_val_error_deg = " << buf << "\n";
        summary << "steps = " << res.steps << "\n";
        summary << "train.seed = " << cfg.seed << "\n";
    }
    save_checkpoint((out / "checkpoint.bin").string(), cfg, model.params(), &opt);
    std::printf("final test error: %.2f deg (val %.2f deg), %llu steps\n", res.final_test_error,
                res.final_val_error, static_cast<unsigned long long>(res.steps));
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& split_name) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    GazeModel<float> model(ck.config, ck.config.seed);
    restore_model(ck, model);
    Dataset ds = dataset_for(ck.config);
    const double err =
        evaluate(model, split_by_name(ds, split_name), ck.config.batch_size);
    std::printf("%.2f\n", err);
    return 0;
}

int cmd_gradcheck(const CommonFlags& flags) {
    Config cfg = flags.config_path.empty() && flags.profile == "desk" ? tiny_profile()
                                                                      : resolve_config(flags);
    if (flags.seed_set()) cfg.seed = flags.seed;
    cfg.validate();
    GazeModel<double> probe(cfg, cfg.seed);
    const std::size_t n_train = probe.params().trainable_count();
    if (n_train > 1000) {
        std::fprintf(stderr,
                     "gradcheck: config has %zu trainable parameters, limit is 1000; "
                     "shrink d_model/layers/experts (see tiny profile defaults)\n",
                     n_train);
        return 2;
    }
    const auto reports = pipeline_gradcheck<double>(cfg, cfg.seed, 1e-4);
    bool ok = true;
    for (const auto& gr : reports) {
        const bool pass = gr.report.max_rel_err < 1e-3;
        ok = ok && pass;
        std::printf("%-16s max_rel_err %.3e over %5zu values  %s\n", gr.group.c_str(),
                    gr.report.max_rel_err, gr.report.checked, pass ? "PASS" : "FAIL");
        if (!pass)
            std::printf("  worst: %s[%zu] analytic %.6e numeric %.6e\n",
                        gr.report.worst_param.c_str(), gr.report.worst_index, gr.report.analytic,
                        gr.report.numeric);
    }
    std::printf("gradcheck: %s\n", ok ? "PASS" : "FAIL");
    return ok ? 0 : 1;
}

int cmd_route_stats(const std::string& ckpt_path, const std::string& split_name) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    if (!ck.config.moe_enabled || ck.config.moe_layers().empty()) {
        std::fprintf(stderr, "route-stats: checkpoint was trained with MoE disabled; "
                             "no routing statistics exist\n");
        return 1;
    }
    GazeModel<float> model(ck.config, ck.config.seed);
    restore_model(ck, model);
    Dataset ds = dataset_for(ck.config);
    const auto& split = split_by_name(ds, split_name);
    if (split.empty()) throw ContractError("route-stats: empty split");

    NoGradGuard ng;
    BatchBuilder<float> bb(ck.config, model.encoders());
    SplitCache<float> cache = bb.cache_split(split);
    const std::size_t E = ck.config.routed_experts;
    std::map<std::size_t, std::vector<double>> counts, importance;
    std::map<std::size_t, std::size_t> tokens;
    for (std::size_t base = 0; base < split.size(); base += ck.config.batch_size) {
        const std::size_t b = std::min(ck.config.batch_size, split.size() - base);
        std::vector<std::size_t> idx(b);
        for (std::size_t i = 0; i < b; ++i) idx[i] = base + i;
        Tensor<float> images = bb.images_for(split, idx);
        ModelOutput<float> out = model.forward_cached(bb.cached_global(cache, idx),
                                                      bb.cached_patch(cache, idx), images);
        for (const auto& st : out.stats) {
            auto& cnt = counts[st.layer];
            auto& imp = importance[st.layer];
            if (cnt.empty()) cnt.assign(E, 0.0);
            if (imp.empty()) imp.assign(E, 0.0);
            for (std::size_t e = 0; e < E; ++e) {
                cnt[e] += static_cast<double>(st.counts[e]);
                imp[e] += st.importance[e] * static_cast<double>(st.tokens);
            }
            tokens[st.layer] += st.tokens;
        }
    }
    std::printf("layer expert load_fraction mean_prob\n");
    for (const auto& [layer, cnt] : counts) {
        const double total = static_cast<double>(tokens[layer]) *
                             static_cast<double>(ck.config.top_k);
        double entropy = 0.0;
        for (std::size_t e = 0; e < E; ++e) {
            const double load = cnt[e] / total;
            const double prob = importance[layer][e] / static_cast<double>(tokens[layer]);
            if (load > 0) entropy -= load * std::log(load);
            std::printf("%5zu %6zu %13.6f %9.6f\n", layer, e, load, prob);
        }
        std::printf("layer %zu load entropy: %.6f (max %.6f)\n", layer, entropy,
                    std::log(static_cast<double>(E)));
    }
    return 0;
}

int cmd_ablate(const CommonFlags& flags, const std::string& axis) {
    Config cfg = resolve_config(flags);
    Dataset ds = dataset_for(cfg);
    const auto rows = run_ablation<float>(axis, cfg, ds);
    fs::create_directories(flags.out_dir);
    const fs::path table_path = fs::path(flags.out_dir) / ("ablate_" + axis + ".csv");
    std::ofstream table(table_path);
    table << "label,test_error_deg\n";
    for (const auto& row : rows) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.9g", row.test_error_deg);
        table << row.label << "," << buf << "\n";
        std::printf("%-18s %8.2f deg\n", row.label.c_str(), row.test_error_deg);
    }
    std::printf("wrote %s\n", table_path.string().c_str());
    return 0;
}

int cmd_make_data(const CommonFlags& flags) {
    Config cfg = resolve_config(flags);
    const std::uint64_t seed = flags.seed_set() ? flags.seed : cfg.data_seed;
    Dataset ds = make_dataset(cfg.data_n, seed, cfg.image_size);
    fs::create_directories(flags.out_dir);
    const fs::path path = fs::path(flags.out_dir) / "dataset.gzds";
    save_dataset(ds, path.string());
    std::printf("wrote %s (%zu train / %zu val / %zu test)\n", path.string().c_str(),
                ds.train.size(), ds.val.size(), ds.test.size());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"prototype-conditioned MoE transformer for synthetic gaze regression"};
    app.require_subcommand(1);

    CommonFlags train_flags, grad_flags, ablate_flags, data_flags;
    std::string ckpt_path, split_name = "test", ablate_axis;

    CLI::App* c_train = app.add_subcommand("train", "train a model and write artifacts");
    add_common(c_train, train_flags);

    CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    c_eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    c_eval->add_option("--split", split_name, "train | val | test");

    CLI::App* c_grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
    add_common(c_grad, grad_flags);

    CLI::App* c_route = app.add_subcommand("route-stats", "per-layer expert utilization");
    c_route->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    c_route->add_option("--split", split_name, "train | val | test");

    CLI::App* c_ablate = app.add_subcommand("ablate", "run an ablation axis");
    add_common(c_ablate, ablate_flags);
    c_ablate->add_option("--axis", ablate_axis, "features | moe | lr")->required();

    CLI::App* c_data = app.add_subcommand("make-data", "generate and save a dataset");
    add_common(c_data, data_flags);

    try {
        app.parse(argc, argv);
        if (c_train->parsed()) return cmd_train(train_flags);
        if (c_eval->parsed()) return cmd_eval(ckpt_path, split_name);
        if (c_grad->parsed()) return cmd_gradcheck(grad_flags);
        if (c_route->parsed()) return cmd_route_stats(ckpt_path, split_name);
        if (c_ablate->parsed()) return cmd_ablate(ablate_flags, ablate_axis);
        if (c_data->parsed()) return cmd_make_data(data_flags);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const IntegrityError& e) {
        std::fprintf(stderr, "integrity error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
