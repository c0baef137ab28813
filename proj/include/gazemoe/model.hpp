#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gazemoe/config.hpp"
#include "gazemoe/moe.hpp"
#include "gazemoe/ops.hpp"
#include "gazemoe/params.hpp"
#include "gazemoe/prototypes.hpp"
#include "gazemoe/synthetic.hpp"

namespace gazemoe {

template <class S>
struct ModelOutput {
    Tensor<S> pred;            // [B, 3], unnormalized
    Tensor<S> load_balance;    // scalar [1]; empty when no MoE layer ran
    std::vector<RouterStats> stats;
    ContextSelection<S> selection;
};

template <class S>
struct LossBreakdown {
    Tensor<S> angular;      // scalar [1]
    Tensor<S> total;        // scalar [1]
    double load_balance = 0.0; // reporting copy (1.0 floor when MoE off is not implied)
};

template <class S>
class GazeModel {
public:
    GazeModel(const Config& cfg, std::uint64_t init_seed)
        : cfg_(cfg), rng_(init_seed), encoders_(cfg, params_, rng_),
          prototypes_(cfg, params_, rng_), fusion_(cfg, params_, rng_),
          encoder_(cfg, params_, rng_) {
        head_w_ = params_.add_randn("head.w", {cfg.d_model, 3}, rng_, 0.01);
        head_b_ = params_.add_full("head.b", {3}, S(0));
    }

    // images: [B, H, W, 3]
    ModelOutput<S> forward(const Tensor<S>& images, RoutingPins* pins = nullptr) const {
        FeatureBundle<S> fb = encoders_.encode(images);
        return forward_features(fb, pins);
    }

    // frozen features may come from a cache; the CNN branch stays live
    ModelOutput<S> forward_cached(const Tensor<S>& f_global, const Tensor<S>& t_patch,
                                  const Tensor<S>& images, RoutingPins* pins = nullptr) const {
        FeatureBundle<S> fb;
        fb.f_global = f_global;
        fb.t_patch = t_patch;
        if (cfg_.use_cnn()) fb.t_cnn = encoders_.cnn_forward(images);
        return forward_features(fb, pins);
    }

    ModelOutput<S> forward_features(const FeatureBundle<S>& fb, RoutingPins* pins = nullptr) const {
        ModelOutput<S> out;
        out.selection = prototypes_.context_scores(fb.f_global);
        if (pins) {
            if (pins->recording)
                pins->proto_chosen = out.selection.chosen;
            else
                out.selection.chosen = pins->proto_chosen;
        }
        Tensor<S> x = fusion_.fuse(fb, prototypes_, out.selection);
        EncoderResult<S> enc = encoder_.forward(x, pins);
        Tensor<S> pooled = ops::mean_axis(enc.y, 1);           // [B, d_model]
        out.pred = ops::linear(pooled, head_w_, &head_b_);
        out.load_balance = enc.load_balance;
        out.stats = std::move(enc.stats);
        return out;
    }

    LossBreakdown<S> loss(const ModelOutput<S>& out, const Tensor<S>& target) const {
        LossBreakdown<S> lb;
        lb.angular = ops::angular_loss(out.pred, target);
        if (out.load_balance.node() && cfg_.load_balance_coeff > 0) {
            lb.load_balance = static_cast<double>(out.load_balance.data()[0]);
            lb.total = ops::add(lb.angular, ops::scale(out.load_balance,
                                                       static_cast<S>(cfg_.load_balance_coeff)));
        } else {
            lb.total = lb.angular;
        }
        return lb;
    }

    const Config& config() const { return cfg_; }
    const Params<S>& params() const { return params_; }
    Params<S>& params() { return params_; }
    const EncoderSuite<S>& encoders() const { return encoders_; }
    const PrototypeBank<S>& prototypes() const { return prototypes_; }
    const TransformerEncoder<S>& encoder() const { return encoder_; }

private:
    // per-family trainable projections to d_model plus token-type embeddings
    class Fusion {
    public:
        Fusion(const Config& cfg, Params<S>& params, Rng& rng) : cfg_(cfg) {
            const double sd_f = 1.0 / std::sqrt(static_cast<double>(cfg.feat_dim));
            const double sd_c = 1.0 / std::sqrt(static_cast<double>(cfg.cnn_channels));
            w_f1_ = params.add_randn("fuse.f1.w", {cfg.feat_dim, cfg.d_model}, rng, sd_f);
            b_f1_ = params.add_full("fuse.f1.b", {cfg.d_model}, S(0));
            w_f2_ = params.add_randn("fuse.f2.w", {cfg.feat_dim, cfg.d_model}, rng, sd_f);
            b_f2_ = params.add_full("fuse.f2.b", {cfg.d_model}, S(0));
            w_patch_ = params.add_randn("fuse.patch.w", {cfg.feat_dim, cfg.d_model}, rng, sd_f);
            b_patch_ = params.add_full("fuse.patch.b", {cfg.d_model}, S(0));
            w_cnn_ = params.add_randn("fuse.cnn.w", {cfg.cnn_channels, cfg.d_model}, rng, sd_c);
            b_cnn_ = params.add_full("fuse.cnn.b", {cfg.d_model}, S(0));
            type_f1_ = params.add_randn("fuse.type.f1", {cfg.d_model}, rng, 0.02);
            type_f2_ = params.add_randn("fuse.type.f2", {cfg.d_model}, rng, 0.02);
            type_patch_ = params.add_randn("fuse.type.patch", {cfg.d_model}, rng, 0.02);
            type_cnn_ = params.add_randn("fuse.type.cnn", {cfg.d_model}, rng, 0.02);
        }

        Tensor<S> fuse(const FeatureBundle<S>& fb, const PrototypeBank<S>& protos,
                       const ContextSelection<S>& sel) const {
            const std::size_t B = fb.f_global.extent(0);
            std::vector<Tensor<S>> tokens;
            if (cfg_.use_f1() || cfg_.use_f2()) {
                auto [f1, f2] = protos.condition(fb.f_global, sel);
                if (cfg_.use_f1())
                    tokens.push_back(ops::reshape(
                        ops::add_bias(ops::linear(f1, w_f1_, &b_f1_), type_f1_),
                        {B, 1, cfg_.d_model}));
                if (cfg_.use_f2())
                    tokens.push_back(ops::reshape(
                        ops::add_bias(ops::linear(f2, w_f2_, &b_f2_), type_f2_),
                        {B, 1, cfg_.d_model}));
            }
            if (cfg_.use_patch())
                tokens.push_back(
                    ops::add_bias(ops::linear(fb.t_patch, w_patch_, &b_patch_), type_patch_));
            if (cfg_.use_cnn())
                tokens.push_back(
                    ops::add_bias(ops::linear(fb.t_cnn, w_cnn_, &b_cnn_), type_cnn_));
            if (tokens.empty()) throw ContractError("fuse: feature_combo selects no tokens");
            return tokens.size() == 1 ? tokens[0] : ops::concat(tokens, 1);
        }

    private:
        Config cfg_;
        Tensor<S> w_f1_, b_f1_, w_f2_, b_f2_, w_patch_, b_patch_, w_cnn_, b_cnn_;
        Tensor<S> type_f1_, type_f2_, type_patch_, type_cnn_;
    };

    Config cfg_;
    Params<S> params_;
    Rng rng_;
    EncoderSuite<S> encoders_;
    PrototypeBank<S> prototypes_;
    Fusion fusion_;
    TransformerEncoder<S> encoder_;
    Tensor<S> head_w_, head_b_;
};

// evaluation metric: arccos of clamped cosine similarity, in degrees
template <class S>
double angular_error_degrees(const S* pred, const S* target) {
    double np = 0, nt = 0, pt = 0;
    for (int j = 0; j < 3; ++j) {
        np += static_cast<double>(pred[j]) * pred[j];
        nt += static_cast<double>(target[j]) * target[j];
        pt += static_cast<double>(pred[j]) * target[j];
    }
    np = std::sqrt(np);
    nt = std::sqrt(nt);
    if (np <= 1e-8 || nt <= 1e-8)
        throw DegenerateInputError("angular_error_degrees: near-zero vector");
    const double c = std::clamp(pt / (np * nt), -1.0, 1.0);
    return std::acos(c) * 180.0 / kPi;
}

} // namespace gazemoe
