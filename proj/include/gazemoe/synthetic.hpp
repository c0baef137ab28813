#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "gazemoe/config.hpp"
#include "gazemoe/errors.hpp"
#include "gazemoe/ops.hpp"
#include "gazemoe/params.hpp"
#include "gazemoe/rng.hpp"
#include "gazemoe/tensor.hpp"

namespace gazemoe {

inline constexpr double kPi = 3.14159265358979323846;

struct Latents {
    double yaw = 0.0;      // [-pi/2, pi/2]
    double pitch = 0.0;    // [-pi/3, pi/3]
    int illum_id = 0;      // {0..3}
    int bg_id = 0;         // {0..3}
    double brightness = 1; // [0.2, 1.0]
};

struct GazeSample {
    Latents latents;
    std::vector<float> image; // H*W*3 row-major, RGB innermost
    std::array<float, 3> gaze{};
};

inline std::array<double, 3> gaze_from_latents(double yaw, double pitch) {
    return {std::cos(pitch) * std::sin(yaw), std::sin(pitch), std::cos(pitch) * std::cos(yaw)};
}

inline void recover_latents(const std::array<double, 3>& g, double& yaw, double& pitch) {
    yaw = std::atan2(g[0], g[2]);
    pitch = std::asin(g[1]);
}

inline void validate_latents(const Latents& l) {
    if (!(l.yaw >= -kPi / 2 - 1e-12 && l.yaw <= kPi / 2 + 1e-12))
        throw ContractError("latents: yaw out of range [-pi/2, pi/2]");
    if (!(l.pitch >= -kPi / 3 - 1e-12 && l.pitch <= kPi / 3 + 1e-12))
        throw ContractError("latents: pitch out of range [-pi/3, pi/3]");
    if (l.illum_id < 0 || l.illum_id > 3) throw ContractError("latents: illum_id out of range");
    if (l.bg_id < 0 || l.bg_id > 3) throw ContractError("latents: bg_id out of range");
    if (!(l.brightness >= 0.2 && l.brightness <= 1.0))
        throw ContractError("latents: brightness out of range [0.2, 1.0]");
}

// Procedural face: tinted background pattern (bg_id), a skin disk that
// travels with gaze, a facial shading plane tilted by gaze, an eye pair whose
// pupils shift with (yaw, pitch), a directional shading gradient (illum_id),
// and a nonlinear exposure gain driven by the brightness latent.  jx/jy add a
// small pupil placement jitter on top of the deterministic offsets.
inline std::vector<float> render_face(const Latents& l, std::size_t H, std::size_t W,
                                      double jx = 0.0, double jy = 0.0) {
    validate_latents(l);
    static const double tints[4][3] = {
        {1.0, 0.9, 0.8}, {0.8, 1.0, 0.9}, {0.9, 0.8, 1.0}, {0.95, 0.95, 0.85}};
    static const double dirs[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0.70710678, 0.70710678}};
    static const double skin[3] = {0.856, 0.6634, 0.5564};
    static const double sclera[3] = {0.99, 0.99, 0.97};
    static const double pupil[3] = {0.01, 0.01, 0.01};

    // geometry rides on the gaze vector's (x, y) components so face position
    // and shading stay linear in the regression target
    const double gx = std::cos(l.pitch) * std::sin(l.yaw);
    const double gy = std::sin(l.pitch);
    const double fx = 0.5 + 0.22 * gx;
    const double fy = 0.5 - 0.16 * gy;
    const double pdx = 0.085 * gx + jx;
    const double pdy = -0.062 * gy + jy;
    const double du = dirs[l.illum_id][0], dv = dirs[l.illum_id][1];
    // exposure response: quadratic in the brightness latent, floored so dark
    // frames keep usable contrast
    const double bn = (l.brightness - 0.2) / 0.8;
    const double gain = 0.25 + 0.75 * bn * bn;

    std::vector<float> img(H * W * 3);
    for (std::size_t y = 0; y < H; ++y) {
        const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
        for (std::size_t x = 0; x < W; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
            double pat;
            switch (l.bg_id) {
                case 0: pat = std::sin(2 * kPi * 3 * u); break;
                case 1: pat = std::sin(2 * kPi * 3 * v); break;
                case 2: pat = std::sin(2 * kPi * 3 * u) * std::sin(2 * kPi * 3 * v); break;
                default: pat = std::sin(2 * kPi * 4 * std::hypot(u - 0.5, v - 0.5)); break;
            }
            const double bgv = 0.22 + 0.16 * pat;
            double col[3] = {bgv * tints[l.bg_id][0], bgv * tints[l.bg_id][1],
                             bgv * tints[l.bg_id][2]};

            const double dface = std::hypot(u - fx, v - fy);
            const double mface = std::clamp((0.38 - dface) / 0.04, 0.0, 1.0);
            for (int c = 0; c < 3; ++c) col[c] += (skin[c] - col[c]) * mface;

            // shading plane across the face disk, linear in (gx, gy)
            const double tl =
                std::max(0.0, 1.0 + 0.9 * mface * ((u - fx) * gx - (v - fy) * gy) / 0.38);
            for (int c = 0; c < 3; ++c) col[c] *= tl;

            for (double sx : {-1.0, 1.0}) {
                const double ex = fx + sx * 0.15, ey = fy - 0.02;
                const double de = std::hypot((u - ex) / 0.115, (v - ey) / 0.075);
                const double mscl = std::clamp((1.0 - de) / 0.18, 0.0, 1.0);
                for (int c = 0; c < 3; ++c) col[c] += (sclera[c] - col[c]) * mscl;
                const double dp = std::hypot(u - ex - pdx, v - ey - pdy) / 0.045;
                const double mpup = std::clamp((1.0 - dp) / 0.22, 0.0, 1.0) *
                                    std::clamp((0.95 - de) / 0.10, 0.0, 1.0);
                for (int c = 0; c < 3; ++c) col[c] += (pupil[c] - col[c]) * mpup;
            }

            const double s = std::clamp(0.5 + (u - 0.5) * du + (v - 0.5) * dv, 0.0, 1.0);
            const double shade = 1.0 - 0.5 * s;
            for (int c = 0; c < 3; ++c)
                img[(y * W + x) * 3 + static_cast<std::size_t>(c)] =
                    static_cast<float>(std::clamp(col[c] * shade * gain, 0.0, 1.0));
        }
    }
    return img;
}

inline GazeSample generate_sample(const Latents& l, std::size_t H, std::size_t W,
                                  double jx = 0.0, double jy = 0.0) {
    GazeSample s;
    s.latents = l;
    s.image = render_face(l, H, W, jx, jy);
    const auto g = gaze_from_latents(l.yaw, l.pitch);
    s.gaze = {static_cast<float>(g[0]), static_cast<float>(g[1]), static_cast<float>(g[2])};
    return s;
}

struct Dataset {
    std::vector<GazeSample> train, val, test;
    std::size_t image_size = 32;
};

inline Dataset make_dataset(std::size_t n, std::uint64_t seed, std::size_t image_size = 32) {
    if (n < 10) throw ContractError("make_dataset: n must be >= 10");
    Rng rng(seed);
    std::vector<GazeSample> all;
    all.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Latents l;
        l.yaw = rng.uniform(-kPi / 2, kPi / 2);
        l.pitch = rng.uniform(-kPi / 3, kPi / 3);
        l.illum_id = static_cast<int>(rng.uniform_index(4));
        l.bg_id = static_cast<int>(rng.uniform_index(4));
        l.brightness = rng.uniform(0.2, 1.0);
        const double jx = 0.005 * rng.normal();
        const double jy = 0.005 * rng.normal();
        GazeSample s = generate_sample(l, image_size, image_size, jx, jy);
        // per-pixel sensor noise; labels stay exact
        for (float& p : s.image)
            p = static_cast<float>(
                std::clamp(static_cast<double>(p) + 0.025 * rng.normal(), 0.0, 1.0));
        all.push_back(std::move(s));
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);

    Dataset ds;
    ds.image_size = image_size;
    const std::size_t n_train = n * 8 / 10;
    const std::size_t n_val = n / 10;
    for (std::size_t i = 0; i < n; ++i) {
        GazeSample& s = all[order[i]];
        if (i < n_train)
            ds.train.push_back(std::move(s));
        else if (i < n_train + n_val)
            ds.val.push_back(std::move(s));
        else
            ds.test.push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// dataset file format ("GZDS"): little-endian, f32 payloads
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}
inline std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IntegrityError("file truncated while reading u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw IntegrityError("file truncated while reading u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}
inline float get_f32(std::istream& in) {
    const std::uint32_t bits = get_u32(in);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

inline void write_split(std::ostream& out, const std::vector<GazeSample>& split) {
    for (const auto& s : split) {
        put_f32(out, static_cast<float>(s.latents.yaw));
        put_f32(out, static_cast<float>(s.latents.pitch));
        put_f32(out, static_cast<float>(s.latents.illum_id));
        put_f32(out, static_cast<float>(s.latents.bg_id));
        put_f32(out, static_cast<float>(s.latents.brightness));
        for (float v : s.image) put_f32(out, v);
        for (float v : s.gaze) put_f32(out, v);
    }
}

inline void read_split(std::istream& in, std::vector<GazeSample>& split, std::size_t count,
                       std::size_t image_size) {
    split.resize(count);
    for (auto& s : split) {
        s.latents.yaw = get_f32(in);
        s.latents.pitch = get_f32(in);
        s.latents.illum_id = static_cast<int>(get_f32(in));
        s.latents.bg_id = static_cast<int>(get_f32(in));
        s.latents.brightness = get_f32(in);
        s.image.resize(image_size * image_size * 3);
        for (float& v : s.image) v = get_f32(in);
        for (float& v : s.gaze) v = get_f32(in);
    }
}

} // namespace detail

inline constexpr std::uint32_t kDatasetMagic = 0x53445A47; // "GZDS" little-endian
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IntegrityError("cannot open " + path + " for writing");
    detail::put_u32(out, kDatasetMagic);
    detail::put_u32(out, kDatasetVersion);
    detail::put_u64(out, ds.train.size());
    detail::put_u64(out, ds.val.size());
    detail::put_u64(out, ds.test.size());
    detail::put_u64(out, ds.image_size);
    detail::write_split(out, ds.train);
    detail::write_split(out, ds.val);
    detail::write_split(out, ds.test);
    if (!out) throw IntegrityError("write failure on " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open " + path);
    if (detail::get_u32(in) != kDatasetMagic) throw IntegrityError(path + ": bad dataset magic");
    if (detail::get_u32(in) != kDatasetVersion)
        throw IntegrityError(path + ": unsupported dataset version");
    Dataset ds;
    const std::uint64_t n_train = detail::get_u64(in);
    const std::uint64_t n_val = detail::get_u64(in);
    const std::uint64_t n_test = detail::get_u64(in);
    ds.image_size = detail::get_u64(in);
    detail::read_split(in, ds.train, n_train, ds.image_size);
    detail::read_split(in, ds.val, n_val, ds.image_size);
    detail::read_split(in, ds.test, n_test, ds.image_size);
    return ds;
}

// ---------------------------------------------------------------------------
// encoders: frozen global + frozen per-position patch maps + trainable CNN
// ---------------------------------------------------------------------------

template <class S>
struct FeatureBundle {
    Tensor<S> f_global; // [B, d]
    Tensor<S> t_patch;  // [B, N, d]
    Tensor<S> t_cnn;    // [B, M, C]
};

template <class S>
class EncoderSuite {
public:
    EncoderSuite(const Config& cfg, Params<S>& params, Rng& rng) : cfg_(cfg) {
        const std::size_t pd = cfg.patch_size * cfg.patch_size * 3;
        const std::size_t n = cfg.n_patches();
        const double std_p = 1.0 / std::sqrt(static_cast<double>(pd));
        w_global_ = params.add_randn("enc.global.w", {n, pd, cfg.feat_dim}, rng, std_p, false);
        w_patch_ = params.add_randn("enc.patch.w", {n, pd, cfg.feat_dim}, rng, std_p, false);
        const double std_c = 1.0 / std::sqrt(9.0 * 3.0);
        conv_w_ = params.add_randn("enc.cnn.w", {3, 3, 3, cfg.cnn_channels}, rng, std_c, true);
        conv_b_ = params.add_full("enc.cnn.b", {cfg.cnn_channels}, S(0), true);
    }

    // images: [B, H, W, 3]
    FeatureBundle<S> encode(const Tensor<S>& images) const {
        check_images(images);
        FeatureBundle<S> fb;
        const Tensor<S> patches = patchify(images); // [B, N, pd], plain data
        fb.t_patch = apply_frozen(patches, w_patch_);
        fb.f_global = ops::mean_axis(apply_frozen(patches, w_global_), 1);
        fb.t_cnn = cnn_forward(images);
        return fb;
    }

    // trainable branch only; frozen features can be cached by callers
    Tensor<S> cnn_forward(const Tensor<S>& images) const {
        check_images(images);
        Tensor<S> h = ops::conv3x3(images, conv_w_, conv_b_, 2);
        h = ops::gelu(h);
        h = ops::avg_pool2d(h, cfg_.cnn_pool);
        const std::size_t B = images.extent(0);
        return ops::reshape(h, {B, cfg_.n_cnn_tokens(), cfg_.cnn_channels});
    }

    // [B, H, W, 3] -> [B, N, patch*patch*3], row-major within each patch
    Tensor<S> patchify(const Tensor<S>& images) const {
        check_images(images);
        const std::size_t B = images.extent(0);
        const std::size_t P = cfg_.patch_size;
        const std::size_t G = cfg_.image_size / P;
        const std::size_t pd = P * P * 3;
        Tensor<S> out = Tensor<S>::zeros({B, G * G, pd});
        const std::size_t Wd = cfg_.image_size;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t gy = 0; gy < G; ++gy)
                for (std::size_t gx = 0; gx < G; ++gx) {
                    S* dst = out.data() + (b * G * G + gy * G + gx) * pd;
                    for (std::size_t py = 0; py < P; ++py) {
                        const S* src =
                            images.data() + ((b * Wd + gy * P + py) * Wd + gx * P) * 3;
                        std::copy(src, src + P * 3, dst + py * P * 3);
                    }
                }
        return out;
    }

    const Tensor<S>& conv_w() const { return conv_w_; }
    const Tensor<S>& conv_b() const { return conv_b_; }

private:
    void check_images(const Tensor<S>& images) const {
        if (images.rank() != 4 || images.extent(1) != cfg_.image_size ||
            images.extent(2) != cfg_.image_size || images.extent(3) != 3)
            throw DimensionError("encoder: expected [B," + std::to_string(cfg_.image_size) + "," +
                                 std::to_string(cfg_.image_size) + ",3], got " +
                                 shape_str(images.shape()));
    }

    // per-position frozen maps: out[b, i, :] = patches[b, i, :] * w[i]
    Tensor<S> apply_frozen(const Tensor<S>& patches, const Tensor<S>& w) const {
        NoGradGuard ng;
        const std::size_t B = patches.extent(0), n = patches.extent(1), pd = patches.extent(2);
        const std::size_t d = cfg_.feat_dim;
        Tensor<S> out = Tensor<S>::zeros({B, n, d});
        std::vector<S> tile(B * pd);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t b = 0; b < B; ++b)
                std::copy(patches.data() + (b * n + i) * pd, patches.data() + (b * n + i + 1) * pd,
                          tile.data() + b * pd);
            std::vector<S> res(B * d, S(0));
            kern::gemm_nn(res.data(), tile.data(), w.data() + i * pd * d, B, pd, d);
            for (std::size_t b = 0; b < B; ++b)
                std::copy(res.data() + b * d, res.data() + (b + 1) * d,
                          out.data() + (b * n + i) * d);
        }
        return out;
    }

    Config cfg_;
    Tensor<S> w_global_, w_patch_, conv_w_, conv_b_;
};

} // namespace gazemoe
