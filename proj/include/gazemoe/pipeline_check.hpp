#pragma once

#include <map>
#include <string>
#include <vector>

#include "gazemoe/gradcheck.hpp"
#include "gazemoe/model.hpp"
#include "gazemoe/train.hpp"

namespace gazemoe {

// Profile small enough that central differences over every trainable
// parameter finish in seconds.
inline Config tiny_profile() {
    Config c;
    c.image_size = 16;
    c.patch_size = 8;
    c.feat_dim = 6;
    c.cnn_channels = 4;
    c.cnn_pool = 4;
    c.proto_illum = 2;
    c.proto_head = 2;
    c.proto_bg = 2;
    c.proto_label = 2;
    c.d_model = 6;
    c.layers = 1;
    c.heads = 2;
    c.routed_experts = 2;
    c.top_k = 1;
    c.shared_experts = 1;
    c.expert_ffn_dim = 4;
    c.batch_size = 2;
    c.data_n = 10;
    return c;
}

inline std::string param_group(const std::string& name) {
    if (name.rfind("proto.", 0) == 0) return "prototypes";
    if (name.rfind("fuse.", 0) == 0) return "projections";
    if (name.rfind("enc.", 0) == 0) return "encoder";
    if (name.find(".router.") != std::string::npos) return "router";
    if (name.find(".expert.") != std::string::npos) return "routed_experts";
    if (name.find(".shared.") != std::string::npos) return "shared_experts";
    if (name.rfind("head.", 0) == 0) return "head";
    if (name.find(".ffn.") != std::string::npos) return "ffn";
    return "attention"; // block norms, attention projections, final norm
}

struct GroupReport {
    std::string group;
    GradCheckReport report;
};

// Finite-difference check of the whole pipeline (render -> encode ->
// condition -> transformer -> head -> angular + balance loss), grouped by
// parameter family. Discrete routing decisions are pinned to the branch the
// backward pass saw.
template <class S>
std::vector<GroupReport> pipeline_gradcheck(const Config& cfg, std::uint64_t seed, S h) {
    GazeModel<S> model(cfg, seed);
    Dataset ds = make_dataset(cfg.data_n, cfg.data_seed, cfg.image_size);
    BatchBuilder<S> bb(cfg, model.encoders());
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < cfg.batch_size && i < ds.train.size(); ++i) idx.push_back(i);
    Tensor<S> images = bb.images_for(ds.train, idx);
    Tensor<S> targets = bb.targets_for(ds.train, idx);

    RoutingPins pins;
    bool recorded = false;
    auto loss_fn = [&]() {
        if (recorded)
            pins.start_replay();
        else
            recorded = true;
        ModelOutput<S> out = model.forward(images, &pins);
        LossBreakdown<S> lb = model.loss(out, targets);
        return lb.total;
    };

    std::map<std::string, std::vector<NamedParam<S>>> groups;
    for (const auto& it : model.params().items())
        if (it.trainable) groups[param_group(it.name)].push_back({it.name, it.tensor});

    std::vector<GroupReport> out;
    for (auto& [group, params] : groups) {
        recorded = false;
        pins = RoutingPins{};
        out.push_back({group, finite_diff_check<S>(loss_fn, params, h)});
    }
    return out;
}

} // namespace gazemoe
