#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gazemoe/errors.hpp"

namespace gazemoe {

// Whole-run configuration. Field order here is the canonical serialization
// order; checkpoints embed the config as text and must round-trip exactly.
struct Config {
    // data and encoders
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t feat_dim = 64;       // f_global / patch token width
    std::size_t cnn_channels = 32;
    std::size_t cnn_pool = 8;        // pooling window after the strided conv

    // prototype banks
    std::size_t proto_illum = 4;
    std::size_t proto_head = 4;
    std::size_t proto_bg = 4;
    std::size_t proto_label = 8;
    double tau_init = 10.0;
    std::string proto_selection = "hard"; // hard | soft

    // transformer
    std::size_t d_model = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t routed_experts = 8;
    std::size_t top_k = 4;
    std::size_t shared_experts = 4;
    std::size_t expert_ffn_dim = 128;
    std::string moe_layer_indices = "all"; // "all" or comma-separated layer ids
    double load_balance_coeff = 0.01;
    double ln_eps = 1e-5;

    // training
    double lr_max = 1e-4;
    double lr_min = 1e-6;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::uint64_t seed = 1;
    std::string feature_combo = "f1,f2,patch,cnn";
    bool moe_enabled = true;

    // dataset source: generated in-process unless data_path points to a file
    std::size_t data_n = 2000;
    std::uint64_t data_seed = 12345;
    std::string data_path = "";

    std::size_t n_tokens() const {
        std::size_t n = 0;
        if (use_f1()) n += 1;
        if (use_f2()) n += 1;
        if (use_patch()) n += n_patches();
        if (use_cnn()) n += n_cnn_tokens();
        return n;
    }
    std::size_t n_patches() const {
        return (image_size / patch_size) * (image_size / patch_size);
    }
    std::size_t cnn_grid() const { return (image_size + 1) / 2 / cnn_pool; }
    std::size_t n_cnn_tokens() const { return cnn_grid() * cnn_grid(); }

    bool combo_has(const std::string& name) const {
        std::string item;
        std::stringstream ss(feature_combo);
        while (std::getline(ss, item, ','))
            if (item == name) return true;
        return false;
    }
    bool use_f1() const { return combo_has("f1"); }
    bool use_f2() const { return combo_has("f2"); }
    bool use_patch() const { return combo_has("patch"); }
    bool use_cnn() const { return combo_has("cnn"); }

    std::vector<std::size_t> moe_layers() const {
        std::vector<std::size_t> out;
        if (moe_layer_indices == "all") {
            for (std::size_t i = 0; i < layers; ++i) out.push_back(i);
            return out;
        }
        std::string item;
        std::stringstream ss(moe_layer_indices);
        while (std::getline(ss, item, ',')) {
            if (item.empty()) continue;
            const std::size_t v = static_cast<std::size_t>(std::stoull(item));
            if (v >= layers)
                throw ConfigError("moe_layer_indices: layer " + item + " out of range");
            out.push_back(v);
        }
        return out;
    }

    void validate() const {
        if (top_k < 1 || top_k > routed_experts)
            throw ConfigError("top_k must satisfy 1 <= top_k <= routed_experts");
        if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
        if (load_balance_coeff < 0) throw ConfigError("load_balance_coeff must be >= 0");
        if (lr_min > lr_max) throw ConfigError("lr_min must be <= lr_max");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (image_size % patch_size != 0)
            throw ConfigError("patch_size must divide image_size");
        if (((image_size + 1) / 2) % cnn_pool != 0)
            throw ConfigError("cnn_pool must tile the downsampled feature map");
        if (proto_selection != "hard" && proto_selection != "soft")
            throw ConfigError("proto_selection must be 'hard' or 'soft'");
        if (tau_init <= 0) throw ConfigError("tau_init must be positive");
        if (ln_eps <= 0) throw ConfigError("ln_eps must be positive");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (data_path.empty() && data_n < 10) throw ConfigError("data.n must be >= 10");
        if (n_tokens() == 0) throw ConfigError("feature_combo selects no tokens");
        std::string item;
        std::stringstream ss(feature_combo);
        while (std::getline(ss, item, ','))
            if (item != "f1" && item != "f2" && item != "patch" && item != "cnn")
                throw ConfigError("feature_combo: unknown family '" + item + "'");
        (void)moe_layers();
    }
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

template <class F>
void for_each_field(Config& c, F&& f) {
    f("model.image_size", c.image_size);
    f("model.patch_size", c.patch_size);
    f("model.feat_dim", c.feat_dim);
    f("model.cnn_channels", c.cnn_channels);
    f("model.cnn_pool", c.cnn_pool);
    f("model.proto_illum", c.proto_illum);
    f("model.proto_head", c.proto_head);
    f("model.proto_bg", c.proto_bg);
    f("model.proto_label", c.proto_label);
    f("model.tau_init", c.tau_init);
    f("model.proto_selection", c.proto_selection);
    f("model.d_model", c.d_model);
    f("model.layers", c.layers);
    f("model.heads", c.heads);
    f("model.routed_experts", c.routed_experts);
    f("model.top_k", c.top_k);
    f("model.shared_experts", c.shared_experts);
    f("model.expert_ffn_dim", c.expert_ffn_dim);
    f("model.moe_layer_indices", c.moe_layer_indices);
    f("model.load_balance_coeff", c.load_balance_coeff);
    f("model.ln_eps", c.ln_eps);
    f("train.lr_max", c.lr_max);
    f("train.lr_min", c.lr_min);
    f("train.epochs", c.epochs);
    f("train.batch_size", c.batch_size);
    f("train.weight_decay", c.weight_decay);
    f("train.beta1", c.beta1);
    f("train.beta2", c.beta2);
    f("train.seed", c.seed);
    f("train.feature_combo", c.feature_combo);
    f("train.moe_enabled", c.moe_enabled);
    f("data.n", c.data_n);
    f("data.seed", c.data_seed);
    f("data.path", c.data_path);
}

struct FieldWriter {
    std::ostringstream out;
    void operator()(const char* k, std::size_t v) { out << k << " = " << v << "\n"; }
    void operator()(const char* k, double v) { out << k << " = " << fmt_double(v) << "\n"; }
    void operator()(const char* k, bool v) { out << k << " = " << (v ? "true" : "false") << "\n"; }
    void operator()(const char* k, const std::string& v) { out << k << " = " << v << "\n"; }
};

struct FieldSetter {
    const std::string& key;
    const std::string& value;
    bool matched = false;

    void parse_into(std::size_t& v) {
        std::size_t pos = 0;
        unsigned long long r = 0;
        try {
            r = std::stoull(value, &pos);
        } catch (const std::exception&) {
            throw ConfigError("config: bad integer for '" + key + "': " + value);
        }
        if (pos != value.size()) throw ConfigError("config: bad integer for '" + key + "': " + value);
        v = static_cast<std::size_t>(r);
    }
    void parse_into(double& v) {
        std::size_t pos = 0;
        try {
            v = std::stod(value, &pos);
        } catch (const std::exception&) {
            throw ConfigError("config: bad number for '" + key + "': " + value);
        }
        if (pos != value.size()) throw ConfigError("config: bad number for '" + key + "': " + value);
    }
    void parse_into(bool& v) {
        if (value == "true")
            v = true;
        else if (value == "false")
            v = false;
        else
            throw ConfigError("config: bad boolean for '" + key + "': " + value);
    }
    void parse_into(std::string& v) { v = value; }

    template <class T>
    void operator()(const char* k, T& v) {
        if (!matched && key == k) {
            parse_into(v);
            matched = true;
        }
    }
};

} // namespace detail

inline std::string serialize_config(const Config& c) {
    detail::FieldWriter w;
    detail::for_each_field(const_cast<Config&>(c), w);
    return w.out.str();
}

inline void apply_config_line(Config& c, const std::string& line) {
    const std::string stripped = detail::trim(line);
    if (stripped.empty() || stripped[0] == '#') return;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config: expected 'key = value', got: " + stripped);
    const std::string key = detail::trim(stripped.substr(0, eq));
    const std::string value = detail::trim(stripped.substr(eq + 1));
    detail::FieldSetter setter{key, value};
    detail::for_each_field(c, setter);
    if (!setter.matched) throw ConfigError("config: unknown key '" + key + "'");
}

inline Config parse_config(const std::string& text, Config base = Config{}) {
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) apply_config_line(base, line);
    base.validate();
    return base;
}

inline Config load_config_file(const std::string& path, Config base = Config{}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), base);
}

// full-scale settings; complete for construction, not sized for the test suite
inline Config paper_profile() {
    Config c;
    c.d_model = 768;
    c.layers = 12;
    c.heads = 8;
    c.routed_experts = 8;
    c.top_k = 4;
    c.shared_experts = 4;
    c.expert_ffn_dim = 1024;
    c.batch_size = 128;
    c.epochs = 100;
    return c;
}

inline Config profile_by_name(const std::string& name) {
    if (name == "desk") return Config{};
    if (name == "paper") return paper_profile();
    throw ConfigError("unknown profile '" + name + "' (expected desk or paper)");
}

} // namespace gazemoe
