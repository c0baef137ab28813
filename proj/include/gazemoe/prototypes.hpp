#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "gazemoe/config.hpp"
#include "gazemoe/ops.hpp"
#include "gazemoe/params.hpp"
#include "gazemoe/rng.hpp"

namespace gazemoe {

inline constexpr std::array<const char*, 4> kContextNames = {"illum", "head", "bg", "label"};

template <class S>
struct ContextSelection {
    // per context: softmax scores [B, K_c] and chosen row per sample [B]
    std::array<Tensor<S>, 4> scores;
    std::array<std::vector<std::size_t>, 4> chosen;
};

// Learnable prototype banks (illum, head, bg, label) with one shared
// temperature. Hard mode treats the argmax index as a constant so gradients
// reach only the selected rows; soft mode mixes rows by score and trains tau.
template <class S>
class PrototypeBank {
public:
    PrototypeBank(const Config& cfg, Params<S>& params, Rng& rng) : cfg_(cfg) {
        const std::array<std::size_t, 4> ks = {cfg.proto_illum, cfg.proto_head, cfg.proto_bg,
                                               cfg.proto_label};
        for (std::size_t c = 0; c < 4; ++c)
            banks_[c] = params.add_randn(std::string("proto.") + kContextNames[c],
                                         {ks[c], cfg.feat_dim}, rng, 0.02, true);
        log_tau_ = params.add_full("proto.log_tau", {1}, static_cast<S>(std::log(cfg.tau_init)),
                                   true);
        ln_f1_g_ = params.add_full("proto.ln_f1.gain", {cfg.feat_dim}, S(1), true);
        ln_f1_b_ = params.add_full("proto.ln_f1.bias", {cfg.feat_dim}, S(0), true);
        ln_f2_g_ = params.add_full("proto.ln_f2.gain", {cfg.feat_dim}, S(1), true);
        ln_f2_b_ = params.add_full("proto.ln_f2.bias", {cfg.feat_dim}, S(0), true);
    }

    // scores = softmax(tau * normalize(f_global) . normalize(P_c)^T), argmax pick
    ContextSelection<S> context_scores(const Tensor<S>& f_global) const {
        if (f_global.rank() != 2 || f_global.extent(1) != cfg_.feat_dim)
            throw DimensionError("context_scores: expected [B," + std::to_string(cfg_.feat_dim) +
                                 "], got " + shape_str(f_global.shape()));
        ContextSelection<S> sel;
        const bool soft = cfg_.proto_selection == "soft";
        // hard mode: scores are reporting-only, keep them off the tape
        std::unique_ptr<NoGradGuard> guard;
        if (!soft) guard = std::make_unique<NoGradGuard>();
        Tensor<S> fhat = ops::l2_normalize(f_global, 1);
        Tensor<S> tau = ops::exp_elem(log_tau_);
        for (std::size_t c = 0; c < 4; ++c) {
            Tensor<S> phat = ops::l2_normalize(banks_[c], 1);
            Tensor<S> sims = ops::matmul(fhat, ops::transpose_last2(phat));
            sel.scores[c] = ops::softmax(ops::mul_scalar_tensor(sims, tau), 1);
            sel.chosen[c] = ops::argmax_last(sel.scores[c]);
        }
        return sel;
    }

    // f1 = LN(f_global + P_illum[p] + P_head[p] + P_bg[p]); f2 = LN(f_global + P_label[p])
    std::pair<Tensor<S>, Tensor<S>> condition_global(const Tensor<S>& f_global,
                                                     const ContextSelection<S>& sel) const {
        for (std::size_t c = 0; c < 4; ++c) {
            if (sel.chosen[c].size() != f_global.extent(0))
                throw ContractError("condition_global: selection batch mismatch");
            for (std::size_t i : sel.chosen[c])
                if (i >= banks_[c].extent(0))
                    throw ContractError("condition_global: selection index out of range");
        }
        Tensor<S> sum1 = ops::add(f_global, ops::gather_rows(banks_[0], sel.chosen[0]));
        sum1 = ops::add(sum1, ops::gather_rows(banks_[1], sel.chosen[1]));
        sum1 = ops::add(sum1, ops::gather_rows(banks_[2], sel.chosen[2]));
        Tensor<S> f1 = ops::layer_norm(sum1, ln_f1_g_, ln_f1_b_, static_cast<S>(cfg_.ln_eps));
        Tensor<S> sum2 = ops::add(f_global, ops::gather_rows(banks_[3], sel.chosen[3]));
        Tensor<S> f2 = ops::layer_norm(sum2, ln_f2_g_, ln_f2_b_, static_cast<S>(cfg_.ln_eps));
        return {f1, f2};
    }

    // soft mixture: selected row replaced by scores . P_c; tau receives gradient
    std::pair<Tensor<S>, Tensor<S>> soft_condition_global(const Tensor<S>& f_global,
                                                          const ContextSelection<S>& sel) const {
        Tensor<S> sum1 = ops::add(f_global, ops::matmul(sel.scores[0], banks_[0]));
        sum1 = ops::add(sum1, ops::matmul(sel.scores[1], banks_[1]));
        sum1 = ops::add(sum1, ops::matmul(sel.scores[2], banks_[2]));
        Tensor<S> f1 = ops::layer_norm(sum1, ln_f1_g_, ln_f1_b_, static_cast<S>(cfg_.ln_eps));
        Tensor<S> sum2 = ops::add(f_global, ops::matmul(sel.scores[3], banks_[3]));
        Tensor<S> f2 = ops::layer_norm(sum2, ln_f2_g_, ln_f2_b_, static_cast<S>(cfg_.ln_eps));
        return {f1, f2};
    }

    // dispatches on the configured selection mode
    std::pair<Tensor<S>, Tensor<S>> condition(const Tensor<S>& f_global,
                                              const ContextSelection<S>& sel) const {
        if (cfg_.proto_selection == "soft") return soft_condition_global(f_global, sel);
        return condition_global(f_global, sel);
    }

    const Tensor<S>& bank(std::size_t c) const { return banks_[c]; }
    const Tensor<S>& log_tau() const { return log_tau_; }
    S tau() const { return std::exp(log_tau_.data()[0]); }

private:
    Config cfg_;
    std::array<Tensor<S>, 4> banks_;
    Tensor<S> log_tau_, ln_f1_g_, ln_f1_b_, ln_f2_g_, ln_f2_b_;
};

} // namespace gazemoe
