#pragma once

#include <algorithm>
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

// Per-layer, per-batch routing statistics (plain numbers, off the tape).
struct RouterStats {
    std::size_t layer = 0;
    std::size_t tokens = 0;
    std::vector<std::size_t> counts;    // (token, slot) assignments per expert
    std::vector<double> load;           // counts / (tokens * K), sums to 1
    std::vector<double> importance;     // mean router probability per expert
    std::size_t max_active_per_token = 0;
};

// Discrete routing/selection choices recorded on one forward pass and
// replayed on later passes, so perturbed finite-difference evaluations stay
// on the branch the backward pass differentiated.
struct RoutingPins {
    bool recording = true;
    std::array<std::vector<std::size_t>, 4> proto_chosen;
    std::vector<std::vector<std::size_t>> topk; // one entry per MoE layer visit
    std::size_t replay_cursor = 0;

    void start_replay() {
        recording = false;
        replay_cursor = 0;
    }
};

template <class S>
struct EncoderResult {
    Tensor<S> y;                  // [B, T, d_model]
    Tensor<S> load_balance;       // scalar [1]; empty when no MoE layer ran
    std::vector<RouterStats> stats;
};

template <class S>
class TransformerEncoder {
public:
    struct Expert {
        Tensor<S> w1, b1, w2, b2;
    };

    struct Block {
        Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;
        Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
        bool is_moe = false;
        Tensor<S> router_w, router_b;
        std::vector<Expert> routed, shared;
        Expert dense;
    };

    TransformerEncoder(const Config& cfg, Params<S>& params, Rng& rng) : cfg_(cfg) {
        const std::size_t d = cfg.d_model;
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        const double sf = 1.0 / std::sqrt(static_cast<double>(cfg.expert_ffn_dim));
        const auto moe_layers = cfg.moe_layers();
        blocks_.resize(cfg.layers);
        for (std::size_t i = 0; i < cfg.layers; ++i) {
            Block& b = blocks_[i];
            const std::string p = "blocks." + std::to_string(i) + ".";
            b.ln1_g = params.add_full(p + "ln1.gain", {d}, S(1));
            b.ln1_b = params.add_full(p + "ln1.bias", {d}, S(0));
            b.wq = params.add_randn(p + "attn.wq", {d, d}, rng, sd);
            b.bq = params.add_full(p + "attn.bq", {d}, S(0));
            b.wk = params.add_randn(p + "attn.wk", {d, d}, rng, sd);
            b.bk = params.add_full(p + "attn.bk", {d}, S(0));
            b.wv = params.add_randn(p + "attn.wv", {d, d}, rng, sd);
            b.bv = params.add_full(p + "attn.bv", {d}, S(0));
            b.wo = params.add_randn(p + "attn.wo", {d, d}, rng, sd);
            b.bo = params.add_full(p + "attn.bo", {d}, S(0));
            b.ln2_g = params.add_full(p + "ln2.gain", {d}, S(1));
            b.ln2_b = params.add_full(p + "ln2.bias", {d}, S(0));
            b.is_moe = cfg.moe_enabled &&
                       std::find(moe_layers.begin(), moe_layers.end(), i) != moe_layers.end();
            if (b.is_moe) {
                b.router_w = params.add_randn(p + "router.w", {d, cfg.routed_experts}, rng, 0.02);
                b.router_b = params.add_full(p + "router.b", {cfg.routed_experts}, S(0));
                for (std::size_t e = 0; e < cfg.routed_experts; ++e)
                    b.routed.push_back(make_expert(params, rng, p + "expert." + std::to_string(e),
                                                   d, cfg.expert_ffn_dim, sd, sf));
                for (std::size_t j = 0; j < cfg.shared_experts; ++j)
                    b.shared.push_back(make_expert(params, rng, p + "shared." + std::to_string(j),
                                                   d, cfg.expert_ffn_dim, sd, sf));
            } else {
                b.dense = make_expert(params, rng, p + "ffn", d, cfg.expert_ffn_dim, sd, sf);
            }
        }
        final_g_ = params.add_full("final_ln.gain", {d}, S(1));
        final_b_ = params.add_full("final_ln.bias", {d}, S(0));
    }

    // x: [B, T, d_model]
    EncoderResult<S> forward(const Tensor<S>& x, RoutingPins* pins = nullptr) const {
        if (x.rank() != 3 || x.extent(2) != cfg_.d_model)
            throw DimensionError("encoder: expected [B,T," + std::to_string(cfg_.d_model) +
                                 "], got " + shape_str(x.shape()));
        EncoderResult<S> res;
        Tensor<S> h = x;
        std::vector<Tensor<S>> lb_terms;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            h = attention_block(h, blocks_[i]);
            if (blocks_[i].is_moe) {
                RouterStats st;
                st.layer = i;
                Tensor<S> lb;
                h = moe_ffn(h, blocks_[i], pins, st, lb);
                lb_terms.push_back(lb);
                res.stats.push_back(std::move(st));
            } else {
                h = dense_ffn(h, blocks_[i]);
            }
        }
        const S eps = static_cast<S>(cfg_.ln_eps);
        res.y = ops::layer_norm(h, final_g_, final_b_, eps);
        if (!lb_terms.empty()) {
            Tensor<S> acc = lb_terms[0];
            for (std::size_t i = 1; i < lb_terms.size(); ++i) acc = ops::add(acc, lb_terms[i]);
            res.load_balance = ops::scale(acc, S(1) / static_cast<S>(lb_terms.size()));
        }
        return res;
    }

    // pre-norm multi-head self-attention with residual, no mask
    Tensor<S> attention_block(const Tensor<S>& x, const Block& b) const {
        const std::size_t B = x.extent(0), T = x.extent(1), d = cfg_.d_model;
        const std::size_t H = cfg_.heads, hd = d / H;
        const S eps = static_cast<S>(cfg_.ln_eps);
        Tensor<S> xn = ops::layer_norm(x, b.ln1_g, b.ln1_b, eps);
        Tensor<S> q = split_heads(ops::linear(xn, b.wq, &b.bq), B, T, H, hd);
        Tensor<S> k = split_heads(ops::linear(xn, b.wk, &b.bk), B, T, H, hd);
        Tensor<S> v = split_heads(ops::linear(xn, b.wv, &b.bv), B, T, H, hd);
        Tensor<S> scores = ops::scale(ops::bmm(q, ops::transpose_last2(k)),
                                      S(1) / static_cast<S>(std::sqrt(static_cast<double>(hd))));
        Tensor<S> att = ops::softmax(scores, 3);
        Tensor<S> ctx = ops::bmm(att, v);                       // [B, H, T, hd]
        Tensor<S> merged = ops::reshape(ops::transpose_12(ctx), {B, T, d});
        Tensor<S> out = ops::linear(merged, b.wo, &b.bo);
        return ops::add(x, out);
    }

    const std::vector<Block>& blocks() const { return blocks_; }

    Tensor<S> expert_forward(const Expert& e, const Tensor<S>& x) const {
        return ops::linear(ops::gelu(ops::linear(x, e.w1, &e.b1)), e.w2, &e.b2);
    }

    // routed top-K dispatch plus unconditional shared experts, pre-norm residual
    Tensor<S> moe_ffn(const Tensor<S>& x, const Block& b, RoutingPins* pins, RouterStats& st,
                      Tensor<S>& lb_out) const {
        const std::size_t B = x.extent(0), T = x.extent(1), d = cfg_.d_model;
        const std::size_t E = cfg_.routed_experts, K = cfg_.top_k;
        const std::size_t n_tok = B * T;
        const S eps = static_cast<S>(cfg_.ln_eps);
        Tensor<S> xn = ops::reshape(ops::layer_norm(x, b.ln2_g, b.ln2_b, eps), {n_tok, d});
        Tensor<S> probs = ops::softmax(ops::linear(xn, b.router_w, &b.router_b), 1);

        std::vector<std::size_t> topk;
        if (pins && !pins->recording) {
            if (pins->replay_cursor >= pins->topk.size())
                throw ContractError("routing pins: replay past recorded layers");
            topk = pins->topk[pins->replay_cursor++];
            if (topk.size() != n_tok * K)
                throw ContractError("routing pins: recorded shape mismatch");
        } else {
            topk = ops::topk_last(probs, K);
            if (pins) pins->topk.push_back(topk);
        }

        Tensor<S> gate_raw = ops::gather_cols(probs, topk, K);
        Tensor<S> gates = ops::row_sum_normalize(gate_raw);
        Tensor<S> gates_flat = ops::reshape(gates, {n_tok * K});

        Tensor<S> out = Tensor<S>::zeros({n_tok, d});
        for (std::size_t e = 0; e < E; ++e) {
            std::vector<std::size_t> rows, slots;
            for (std::size_t t = 0; t < n_tok; ++t)
                for (std::size_t s = 0; s < K; ++s)
                    if (topk[t * K + s] == e) {
                        rows.push_back(t);
                        slots.push_back(t * K + s);
                    }
            if (rows.empty()) continue;
            Tensor<S> sub = ops::gather_rows(xn, rows);
            Tensor<S> y = expert_forward(b.routed[e], sub);
            Tensor<S> w = ops::gather_rows(gates_flat, slots);
            out = ops::add(out, ops::scatter_rows(ops::mul_colvec(y, w), rows, n_tok));
        }
        if (!b.shared.empty()) {
            Tensor<S> sh = expert_forward(b.shared[0], xn);
            for (std::size_t j = 1; j < b.shared.size(); ++j)
                sh = ops::add(sh, expert_forward(b.shared[j], xn));
            out = ops::add(out, ops::scale(sh, S(1) / static_cast<S>(b.shared.size())));
        }

        fill_stats(st, probs, topk, n_tok, E, K);
        lb_out = load_balance_term(probs, st, E);
        return ops::add(x, ops::reshape(out, {B, T, d}));
    }

    Tensor<S> dense_ffn(const Tensor<S>& x, const Block& b) const {
        const S eps = static_cast<S>(cfg_.ln_eps);
        Tensor<S> xn = ops::layer_norm(x, b.ln2_g, b.ln2_b, eps);
        return ops::add(x, expert_forward(b.dense, xn));
    }

    // E * sum_i f_i * mean_prob_i; f_i constant, gradient flows through probs
    Tensor<S> load_balance_term(const Tensor<S>& probs, const RouterStats& st,
                                std::size_t E) const {
        Tensor<S> f = Tensor<S>::zeros({1, E});
        for (std::size_t e = 0; e < E; ++e) f.data()[e] = static_cast<S>(st.load[e]);
        Tensor<S> pbar = ops::mean_axis(probs, 0);             // [E]
        Tensor<S> prod = ops::mul(ops::reshape(pbar, {1, E}), f);
        return ops::scale(ops::sum_all(prod), static_cast<S>(E));
    }

private:
    static Expert make_expert(Params<S>& params, Rng& rng, const std::string& prefix,
                              std::size_t d, std::size_t ffn, double sd, double sf) {
        Expert e;
        e.w1 = params.add_randn(prefix + ".w1", {d, ffn}, rng, sd);
        e.b1 = params.add_full(prefix + ".b1", {ffn}, S(0));
        e.w2 = params.add_randn(prefix + ".w2", {ffn, d}, rng, sf);
        e.b2 = params.add_full(prefix + ".b2", {d}, S(0));
        return e;
    }

    Tensor<S> split_heads(const Tensor<S>& x, std::size_t B, std::size_t T, std::size_t H,
                          std::size_t hd) const {
        return ops::transpose_12(ops::reshape(x, {B, T, H, hd}));
    }

    void fill_stats(RouterStats& st, const Tensor<S>& probs, const std::vector<std::size_t>& topk,
                    std::size_t n_tok, std::size_t E, std::size_t K) const {
        st.tokens = n_tok;
        st.counts.assign(E, 0);
        st.importance.assign(E, 0.0);
        st.max_active_per_token = 0;
        for (std::size_t t = 0; t < n_tok; ++t) {
            std::size_t active = 0;
            std::vector<bool> seen(E, false);
            for (std::size_t s = 0; s < K; ++s) {
                const std::size_t e = topk[t * K + s];
                ++st.counts[e];
                if (!seen[e]) {
                    seen[e] = true;
                    ++active;
                }
            }
            st.max_active_per_token = std::max(st.max_active_per_token, active);
        }
        st.load.assign(E, 0.0);
        for (std::size_t e = 0; e < E; ++e)
            st.load[e] = static_cast<double>(st.counts[e]) /
                         (static_cast<double>(n_tok) * static_cast<double>(K));
        for (std::size_t t = 0; t < n_tok; ++t)
            for (std::size_t e = 0; e < E; ++e)
                st.importance[e] += static_cast<double>(probs.data()[t * E + e]);
        for (std::size_t e = 0; e < E; ++e) st.importance[e] /= static_cast<double>(n_tok);
    }

    Config cfg_;
    std::vector<Block> blocks_;
    Tensor<S> final_g_, final_b_;
};

} // namespace gazemoe
