#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "gazemoe/config.hpp"
#include "gazemoe/synthetic.hpp"
#include "gazemoe/train.hpp"

namespace gazemoe {

inline constexpr std::uint32_t kCheckpointMagic = 0x584D5A47; // "GZMX" little-endian
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorBlob {
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    Config config;
    std::vector<std::pair<std::string, TensorBlob>> tensors; // file order preserved

    const TensorBlob* find(const std::string& name) const {
        for (const auto& [n, blob] : tensors)
            if (n == name) return &blob;
        return nullptr;
    }
};

namespace detail {

inline void write_tensor_entry(std::ostream& out, const std::string& name, const Shape& shape,
                               const float* data, std::size_t n) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) put_u64(out, d);
    for (std::size_t i = 0; i < n; ++i) put_f32(out, data[i]);
}

} // namespace detail

// Serializes every registered tensor (frozen ones included) plus optimizer
// moments and the step counter as extra named tensors.
template <class S>
void save_checkpoint(const std::string& path, const Config& cfg, const Params<S>& params,
                     const AdamW<S>* opt = nullptr) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IntegrityError("cannot open " + path + " for writing");
    detail::put_u32(out, kCheckpointMagic);
    detail::put_u32(out, kCheckpointVersion);
    const std::string blob = serialize_config(cfg);
    detail::put_u64(out, blob.size());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));

    std::uint32_t count = static_cast<std::uint32_t>(params.items().size());
    if (opt) {
        for (const auto& it : params.items())
            if (it.trainable) count += 2;
        count += 1; // opt.step
    }
    detail::put_u32(out, count);

    std::vector<float> tmp;
    auto write_values = [&](const std::string& name, const Shape& shape, const S* src,
                            std::size_t n) {
        tmp.resize(n);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = static_cast<float>(src[i]);
        detail::write_tensor_entry(out, name, shape, tmp.data(), n);
    };

    for (const auto& it : params.items())
        write_values(it.name, it.tensor.shape(), it.tensor.data(), it.tensor.numel());
    if (opt) {
        const auto& items = params.items();
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (!items[i].trainable) continue;
            write_values("opt.m." + items[i].name, items[i].tensor.shape(), opt->m()[i].data(),
                         opt->m()[i].size());
            write_values("opt.v." + items[i].name, items[i].tensor.shape(), opt->v()[i].data(),
                         opt->v()[i].size());
        }
        const float step = static_cast<float>(opt->steps_taken());
        detail::write_tensor_entry(out, "opt.step", {1}, &step, 1);
    }
    if (!out) throw IntegrityError("write failure on " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open " + path);
    if (detail::get_u32(in) != kCheckpointMagic)
        throw IntegrityError(path + ": bad checkpoint magic");
    const std::uint32_t version = detail::get_u32(in);
    if (version != kCheckpointVersion)
        throw IntegrityError(path + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    const std::uint64_t blob_len = detail::get_u64(in);
    std::string blob(blob_len, '\0');
    in.read(blob.data(), static_cast<std::streamsize>(blob_len));
    if (!in) throw IntegrityError(path + ": truncated config blob");
    ck.config = parse_config(blob);

    const std::uint32_t count = detail::get_u32(in);
    ck.tensors.reserve(count);
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = detail::get_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw IntegrityError(path + ": truncated tensor name");
        TensorBlob blob_t;
        const std::uint32_t rank = detail::get_u32(in);
        blob_t.shape.resize(rank);
        std::size_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            blob_t.shape[r] = detail::get_u64(in);
            n *= blob_t.shape[r];
        }
        blob_t.data.resize(n);
        for (std::size_t i = 0; i < n; ++i) blob_t.data[i] = detail::get_f32(in);
        ck.tensors.emplace_back(std::move(name), std::move(blob_t));
    }
    return ck;
}

// Copies checkpoint tensors into a freshly constructed model (and optimizer,
// when given). Every registered parameter must be present with its exact shape.
template <class S>
void restore_model(const Checkpoint& ck, GazeModel<S>& model, AdamW<S>* opt = nullptr) {
    for (const auto& it : model.params().items()) {
        const TensorBlob* blob = ck.find(it.name);
        if (!blob) throw IntegrityError("checkpoint missing tensor '" + it.name + "'");
        if (blob->shape != it.tensor.shape())
            throw IntegrityError("checkpoint tensor '" + it.name + "' has shape " +
                                 shape_str(blob->shape) + ", model expects " +
                                 shape_str(it.tensor.shape()));
        Tensor<S> dst = it.tensor;
        for (std::size_t i = 0; i < blob->data.size(); ++i)
            dst.data()[i] = static_cast<S>(blob->data[i]);
    }
    if (opt) {
        const auto& items = model.params().items();
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (!items[i].trainable) continue;
            const TensorBlob* m = ck.find("opt.m." + items[i].name);
            const TensorBlob* v = ck.find("opt.v." + items[i].name);
            if (!m || !v)
                throw IntegrityError("checkpoint missing optimizer state for '" + items[i].name +
                                     "'");
            for (std::size_t j = 0; j < m->data.size(); ++j) {
                opt->m()[i][j] = static_cast<S>(m->data[j]);
                opt->v()[i][j] = static_cast<S>(v->data[j]);
            }
        }
        const TensorBlob* step = ck.find("opt.step");
        if (!step) throw IntegrityError("checkpoint missing opt.step");
        opt->set_steps_taken(static_cast<std::uint64_t>(step->data[0]));
    }
}

} // namespace gazemoe
