#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gazemoe/config.hpp"
#include "gazemoe/model.hpp"
#include "gazemoe/synthetic.hpp"

namespace gazemoe {

inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
    if (total_steps == 0) throw ContractError("cosine_lr: total_steps must be > 0");
    if (step > total_steps) throw ContractError("cosine_lr: step past total_steps");
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(kPi * t));
}

// Decoupled-weight-decay Adam over a parameter registry. Frozen parameters
// are never touched; a missing gradient buffer counts as an all-zero gradient
// (moments still decay, weight decay still applies).
template <class S>
class AdamW {
public:
    explicit AdamW(const Params<S>& params, double weight_decay, double beta1, double beta2,
                   double eps = 1e-8)
        : params_(&params), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        for (const auto& it : params.items())
            if (it.trainable) {
                m_.emplace_back(it.tensor.numel(), S(0));
                v_.emplace_back(it.tensor.numel(), S(0));
            } else {
                m_.emplace_back();
                v_.emplace_back();
            }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        const auto& items = params_->items();
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (!items[i].trainable) continue;
            Tensor<S> p = items[i].tensor;
            const std::size_t n = p.numel();
            const S* g = p.has_grad() ? p.node()->grad.data() : nullptr;
            S* w = p.data();
            S* m = m_[i].data();
            S* v = v_[i].data();
            for (std::size_t j = 0; j < n; ++j) {
                const double gj = g ? static_cast<double>(g[j]) : 0.0;
                if (std::isnan(gj))
                    throw TrainingDivergenceError("NaN gradient in parameter '" + items[i].name +
                                                  "'");
                const double mj = b1_ * m[j] + (1.0 - b1_) * gj;
                const double vj = b2_ * v[j] + (1.0 - b2_) * gj * gj;
                m[j] = static_cast<S>(mj);
                v[j] = static_cast<S>(vj);
                const double mh = mj / bc1;
                const double vh = vj / bc2;
                w[j] = static_cast<S>(w[j] - lr * mh / (std::sqrt(vh) + eps_) - lr * wd_ * w[j]);
            }
        }
    }

    std::uint64_t steps_taken() const { return t_; }
    void set_steps_taken(std::uint64_t t) { t_ = t; }

    // moment buffers exposed for checkpointing, indexed like params().items()
    std::vector<std::vector<S>>& m() { return m_; }
    std::vector<std::vector<S>>& v() { return v_; }
    const std::vector<std::vector<S>>& m() const { return m_; }
    const std::vector<std::vector<S>>& v() const { return v_; }

private:
    const Params<S>* params_;
    double wd_, b1_, b2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<S>> m_, v_;
};

// ---------------------------------------------------------------------------
// batch assembly with cached frozen features
// ---------------------------------------------------------------------------

template <class S>
struct SplitCache {
    // frozen encoder outputs, computed once per split
    std::vector<S> f_global; // [n, d]
    std::vector<S> t_patch;  // [n, N, d]
    const std::vector<GazeSample>* samples = nullptr;
};

template <class S>
class BatchBuilder {
public:
    BatchBuilder(const Config& cfg, const EncoderSuite<S>& enc) : cfg_(cfg), enc_(&enc) {}

    SplitCache<S> cache_split(const std::vector<GazeSample>& split) const {
        NoGradGuard ng;
        SplitCache<S> c;
        c.samples = &split;
        const std::size_t d = cfg_.feat_dim, N = cfg_.n_patches();
        c.f_global.resize(split.size() * d);
        c.t_patch.resize(split.size() * N * d);
        const std::size_t chunk = 64;
        for (std::size_t base = 0; base < split.size(); base += chunk) {
            const std::size_t b = std::min(chunk, split.size() - base);
            std::vector<std::size_t> idx(b);
            for (std::size_t i = 0; i < b; ++i) idx[i] = base + i;
            Tensor<S> images = images_for(split, idx);
            FeatureBundle<S> fb = enc_->encode(images);
            std::copy(fb.f_global.data(), fb.f_global.data() + b * d,
                      c.f_global.data() + base * d);
            std::copy(fb.t_patch.data(), fb.t_patch.data() + b * N * d,
                      c.t_patch.data() + base * N * d);
        }
        return c;
    }

    Tensor<S> images_for(const std::vector<GazeSample>& split,
                         const std::vector<std::size_t>& idx) const {
        const std::size_t hw = cfg_.image_size;
        Tensor<S> images = Tensor<S>::zeros({idx.size(), hw, hw, 3});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto& img = split[idx[i]].image;
            S* dst = images.data() + i * hw * hw * 3;
            for (std::size_t j = 0; j < img.size(); ++j) dst[j] = static_cast<S>(img[j]);
        }
        return images;
    }

    Tensor<S> targets_for(const std::vector<GazeSample>& split,
                          const std::vector<std::size_t>& idx) const {
        Tensor<S> t = Tensor<S>::zeros({idx.size(), 3});
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < 3; ++j)
                t.data()[i * 3 + j] = static_cast<S>(split[idx[i]].gaze[j]);
        return t;
    }

    Tensor<S> cached_global(const SplitCache<S>& c, const std::vector<std::size_t>& idx) const {
        const std::size_t d = cfg_.feat_dim;
        Tensor<S> t = Tensor<S>::zeros({idx.size(), d});
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy(c.f_global.data() + idx[i] * d, c.f_global.data() + (idx[i] + 1) * d,
                      t.data() + i * d);
        return t;
    }

    Tensor<S> cached_patch(const SplitCache<S>& c, const std::vector<std::size_t>& idx) const {
        const std::size_t nd = cfg_.n_patches() * cfg_.feat_dim;
        Tensor<S> t = Tensor<S>::zeros({idx.size(), cfg_.n_patches(), cfg_.feat_dim});
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy(c.t_patch.data() + idx[i] * nd, c.t_patch.data() + (idx[i] + 1) * nd,
                      t.data() + i * nd);
        return t;
    }

private:
    Config cfg_;
    const EncoderSuite<S>* enc_;
};

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

template <class S>
double evaluate_split(const GazeModel<S>& model, const BatchBuilder<S>& bb,
                      const SplitCache<S>& cache, std::size_t batch_size) {
    const auto& split = *cache.samples;
    if (split.empty()) throw ContractError("evaluate: empty split");
    NoGradGuard ng;
    double total = 0.0;
    for (std::size_t base = 0; base < split.size(); base += batch_size) {
        const std::size_t b = std::min(batch_size, split.size() - base);
        std::vector<std::size_t> idx(b);
        for (std::size_t i = 0; i < b; ++i) idx[i] = base + i;
        Tensor<S> images = bb.images_for(split, idx);
        ModelOutput<S> out = model.forward_cached(bb.cached_global(cache, idx),
                                                  bb.cached_patch(cache, idx), images);
        for (std::size_t i = 0; i < b; ++i) {
            const S* p = out.pred.data() + i * 3;
            total += angular_error_degrees(p, split[base + i].gaze.data());
        }
    }
    return total / static_cast<double>(split.size());
}

// convenience overload that encodes features on the fly
template <class S>
double evaluate(const GazeModel<S>& model, const std::vector<GazeSample>& split,
                std::size_t batch_size) {
    BatchBuilder<S> bb(model.config(), model.encoders());
    SplitCache<S> cache = bb.cache_split(split);
    return evaluate_split(model, bb, cache, batch_size);
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

struct MetricsRecord {
    std::uint64_t step = 0;
    std::size_t epoch = 0;
    double lr = 0;
    double train_angular = 0;
    double load_balance = 0;
    double val_error_deg = 0;
    double test_error_deg = 0;
    double load_entropy = 0;
};

inline std::string metrics_csv_header() {
    return "step,epoch,lr,train_angular_loss,load_balance_loss,val_error_deg,test_error_deg,"
           "load_entropy";
}

inline std::string metrics_csv_row(const MetricsRecord& r) {
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%llu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                  static_cast<unsigned long long>(r.step), r.epoch, r.lr, r.train_angular,
                  r.load_balance, r.val_error_deg, r.test_error_deg, r.load_entropy);
    return buf;
}

inline double load_entropy(const std::vector<RouterStats>& stats) {
    if (stats.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& st : stats) {
        double h = 0.0;
        for (double f : st.load)
            if (f > 0) h -= f * std::log(f);
        acc += h;
    }
    return acc / static_cast<double>(stats.size());
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

template <class S>
struct TrainResult {
    std::vector<MetricsRecord> metrics;
    double final_val_error = 0.0;
    double final_test_error = 0.0;
    std::uint64_t steps = 0;
};

struct StepObserver {
    // called after every optimizer step with that batch's routing stats
    virtual void on_step(std::uint64_t step, const std::vector<RouterStats>& stats) = 0;
    virtual ~StepObserver() = default;
};

template <class S>
TrainResult<S> train(GazeModel<S>& model, AdamW<S>& opt, const Dataset& ds,
                     StepObserver* observer = nullptr) {
    const Config& cfg = model.config();
    if (ds.train.empty()) throw ContractError("train: empty training split");
    BatchBuilder<S> bb(cfg, model.encoders());
    SplitCache<S> train_cache = bb.cache_split(ds.train);
    SplitCache<S> val_cache = bb.cache_split(ds.val);
    SplitCache<S> test_cache = bb.cache_split(ds.test);

    const std::size_t n_train = ds.train.size();
    const std::size_t batches_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * batches_per_epoch;
    Rng shuffle_rng(cfg.seed ^ 0x5348554646ULL);

    TrainResult<S> res;
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    std::uint64_t step = opt.steps_taken();

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_ang = 0.0, epoch_lb = 0.0;
        std::vector<RouterStats> last_stats;
        for (std::size_t base = 0; base < n_train; base += cfg.batch_size) {
            const std::size_t b = std::min(cfg.batch_size, n_train - base);
            std::vector<std::size_t> idx(order.begin() + base, order.begin() + base + b);
            Tensor<S> images = bb.images_for(ds.train, idx);
            Tensor<S> targets = bb.targets_for(ds.train, idx);
            model.params().zero_grad();
            ModelOutput<S> out = model.forward_cached(bb.cached_global(train_cache, idx),
                                                      bb.cached_patch(train_cache, idx), images);
            LossBreakdown<S> lb = model.loss(out, targets);
            const double loss_val = static_cast<double>(lb.total.data()[0]);
            if (std::isnan(loss_val))
                throw TrainingDivergenceError("training loss is NaN at step " +
                                              std::to_string(step));
            backward(lb.total);
            const double lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            opt.step(lr);
            ++step;
            epoch_ang += static_cast<double>(lb.angular.data()[0]) * static_cast<double>(b);
            epoch_lb += lb.load_balance * static_cast<double>(b);
            last_stats = out.stats;
            if (observer) observer->on_step(step, out.stats);
        }
        MetricsRecord r;
        r.step = step;
        r.epoch = epoch + 1;
        r.lr = cosine_lr(step - 1, total_steps, cfg.lr_max, cfg.lr_min);
        r.train_angular = epoch_ang / static_cast<double>(n_train);
        r.load_balance = epoch_lb / static_cast<double>(n_train);
        r.val_error_deg = ds.val.empty() ? 0.0 : evaluate_split(model, bb, val_cache, cfg.batch_size);
        r.test_error_deg =
            ds.test.empty() ? 0.0 : evaluate_split(model, bb, test_cache, cfg.batch_size);
        r.load_entropy = load_entropy(last_stats);
        res.metrics.push_back(r);
    }
    res.steps = step;
    res.final_val_error = res.metrics.empty() ? 0.0 : res.metrics.back().val_error_deg;
    res.final_test_error = res.metrics.empty() ? 0.0 : res.metrics.back().test_error_deg;
    return res;
}

// ---------------------------------------------------------------------------
// ablation protocols
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string label;
    double test_error_deg = 0.0;
};

template <class S>
AblationRow run_one(const Config& cfg, const Dataset& ds) {
    GazeModel<S> model(cfg, cfg.seed);
    AdamW<S> opt(model.params(), cfg.weight_decay, cfg.beta1, cfg.beta2);
    TrainResult<S> r = train(model, opt, ds);
    return {"", r.final_test_error};
}

template <class S>
std::vector<AblationRow> run_ablation(const std::string& axis, const Config& base,
                                      const Dataset& ds) {
    std::vector<AblationRow> rows;
    if (axis == "features") {
        const std::vector<std::pair<std::string, std::string>> combos = {
            {"f1", "f1"},
            {"f1+f2", "f1,f2"},
            {"f1+f2+cnn", "f1,f2,cnn"},
            {"f1+f2+cnn+patch", "f1,f2,patch,cnn"},
        };
        for (const auto& [label, combo] : combos) {
            Config c = base;
            c.feature_combo = combo;
            c.validate();
            AblationRow row = run_one<S>(c, ds);
            row.label = label;
            rows.push_back(row);
        }
    } else if (axis == "moe") {
        for (bool moe : {true, false}) {
            Config c = base;
            c.moe_enabled = moe;
            c.validate();
            AblationRow row = run_one<S>(c, ds);
            row.label = moe ? "moe" : "dense";
            rows.push_back(row);
        }
    } else if (axis == "lr") {
        for (double lr : {1e-3, 1e-4, 1e-5, 1e-6, 1e-7}) {
            Config c = base;
            c.lr_max = lr;
            c.lr_min = std::min(base.lr_min, lr);
            c.validate();
            AblationRow row = run_one<S>(c, ds);
            char label[32];
            std::snprintf(label, sizeof(label), "lr=%g", lr);
            row.label = label;
            rows.push_back(row);
        }
    } else {
        throw ContractError("run_ablation: unknown axis '" + axis + "'");
    }
    return rows;
}

} // namespace gazemoe
