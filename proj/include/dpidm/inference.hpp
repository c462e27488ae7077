#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "dpidm/pipeline.hpp"

namespace dpidm {

// mask * generated + (1-mask) * source, as exact per-pixel selection so that
// unmasked pixels stay bit-identical to the source.
template <typename T>
Tensor<T> composite(const Tensor<T>& source, const Tensor<T>& generated, const Tensor<T>& mask) {
    if (!source.same_shape(generated)) throw ShapeError("composite: source/generated shapes differ");
    const int64_t C = source.shape[0], H = source.shape[1], W = source.shape[2];
    if (mask.shape != Shape{1, H, W}) throw ShapeError("composite: mask must be [1,H,W]");
    for (const auto& v : mask.data)
        if (v != T(0) && v != T(1)) throw ValidationError("composite: mask must be binary");
    Tensor<T> out = source;
    const int64_t hw = H * W;
    for (int64_t p = 0; p < hw; ++p)
        if (mask[p] == T(1))
            for (int64_t c = 0; c < C; ++c) out[c * hw + p] = generated[c * hw + p];
    return out;
}

// Window starts 0, s, 2s, ...; the final window is aligned to the last frame.
inline std::vector<std::pair<int64_t, int64_t>> sliding_windows(int64_t length, int64_t window,
                                                                int64_t stride) {
    if (window < 1) throw ConfigError("window must be >= 1");
    if (stride < 1 || stride > window)
        throw ConfigError("stride must satisfy 1 <= stride <= window");
    const int64_t len = std::min(window, length);
    const int64_t last = length - len;
    std::vector<std::pair<int64_t, int64_t>> out;
    for (int64_t i = 0;; ++i) {
        const int64_t st = std::min(i * stride, last);
        out.emplace_back(st, len);
        if (st == last) break;
    }
    return out;
}

// Runs `window_fn` on each window and averages per-frame results over the
// windows covering that frame. frame_numel is the per-frame element count of
// the window_fn output.
template <typename T>
Tensor<T> sliding_window_average(
    int64_t length, const Shape& frame_shape,
    const std::vector<std::pair<int64_t, int64_t>>& windows,
    const std::function<Tensor<T>(int64_t start, int64_t len)>& window_fn) {
    Shape out_shape;
    out_shape.push_back(length);
    for (int64_t d : frame_shape) out_shape.push_back(d);
    Tensor<T> acc(out_shape);
    std::vector<int64_t> counts(static_cast<size_t>(length), 0);
    const int64_t fn = shape_numel(frame_shape);
    for (const auto& [st, len] : windows) {
        const Tensor<T> w = window_fn(st, len);
        if (w.shape[0] != len || w.numel() != len * fn)
            throw ShapeError("window_fn returned unexpected shape");
        for (int64_t f = 0; f < len; ++f) {
            T* dst = acc.ptr() + (st + f) * fn;
            const T* src = w.ptr() + f * fn;
            for (int64_t i = 0; i < fn; ++i) dst[i] += src[i];
            ++counts[static_cast<size_t>(st + f)];
        }
    }
    for (int64_t f = 0; f < length; ++f) {
        const T inv = T(1) / static_cast<T>(counts[static_cast<size_t>(f)]);
        if (counts[static_cast<size_t>(f)] == 1) continue;  // exact single-window path
        T* dst = acc.ptr() + f * fn;
        for (int64_t i = 0; i < fn; ++i) dst[i] *= inv;
    }
    return acc;
}

template <typename T>
struct TryOnInput {
    Tensor<T> source;  // [N,3,H,W]
    Tensor<T> mask;    // [N,1,H,W] binary
    std::vector<SkeletonPose> human_poses;
    Tensor<T> garment_image;  // [3,H,W]
    SkeletonPose garment_pose;
};

struct TryOnOptions {
    int64_t window = 8;
    int64_t stride = 4;
    int64_t steps = 20;
    double guidance = 1.5;
    uint64_t seed = 0;
};

// End-to-end try-on for arbitrarily long videos: overlapping windows are
// denoised independently (shared per-frame initial noise), averaged in latent
// space, decoded, and composited over the source outside the mask.
template <typename T>
Tensor<T> tryon_video(const Model<T>& model, const TryOnInput<T>& input, const TryOnOptions& opt,
                      const NoiseSchedule& sched) {
    const int64_t N = input.source.shape[0];
    if (N < 1) throw ConfigError("tryon: empty video");
    if (static_cast<int64_t>(input.human_poses.size()) != N)
        throw ShapeError("tryon: pose count != frame count");
    ensure_binary_mask(input.mask);

    const ModelConfig& cfg = model.cfg;
    const int64_t lh = cfg.latent_h(), lw = cfg.latent_w();

    const Tensor<T> agnostic = make_agnostic(input.source, input.mask);
    DenoiseBatch<T> cond = make_conditions(model, agnostic, input.mask, input.human_poses,
                                           input.garment_pose, input.garment_image);

    Tensor<T> noise(Shape{N, 4, lh, lw});
    const int64_t fn = 4 * lh * lw;
    for (int64_t f = 0; f < N; ++f) {
        const Tensor<T> z = frame_noise<T>(opt.seed, f, Shape{4, lh, lw});
        std::copy_n(z.ptr(), fn, noise.ptr() + f * fn);
    }

    auto window_fn = [&](int64_t st, int64_t len) {
        DenoiseBatch<T> b;
        b.agnostic_latent = clip_frames(cond.agnostic_latent, st, len);
        b.mask_latent = clip_frames(cond.mask_latent, st, len);
        b.human_maps = clip_frames(cond.human_maps, st, len);
        b.garment_map = cond.garment_map;
        b.garment_image = cond.garment_image;
        b.garment_latent = cond.garment_latent;
        EpsFn<T> eps_fn = [&](const Tensor<T>& z_t, int64_t t, bool uncond) {
            b.z_t = z_t;
            b.t = t;
            return denoise_step(model, b, ClipMode::video, uncond).eps;
        };
        return ddim_sample(clip_frames(noise, st, len), sched, opt.steps, opt.guidance, eps_fn);
    };
    const auto windows = sliding_windows(N, opt.window, opt.stride);
    Tensor<T> z0 = sliding_window_average<T>(N, Shape{4, lh, lw}, windows, window_fn);

    Tensor<T> decoded = decode_latent(model, z0);  // [N,3,H,W]
    Tensor<T> out(input.source.shape);
    const int64_t chw = 3 * cfg.canvas_h * cfg.canvas_w;
    const int64_t hw = cfg.canvas_h * cfg.canvas_w;
    for (int64_t f = 0; f < N; ++f) {
        Tensor<T> src(Shape{3, cfg.canvas_h, cfg.canvas_w});
        Tensor<T> gen(Shape{3, cfg.canvas_h, cfg.canvas_w});
        Tensor<T> m(Shape{1, cfg.canvas_h, cfg.canvas_w});
        std::copy_n(input.source.ptr() + f * chw, chw, src.ptr());
        std::copy_n(decoded.ptr() + f * chw, chw, gen.ptr());
        std::copy_n(input.mask.ptr() + f * hw, hw, m.ptr());
        const Tensor<T> comp = composite(src, gen, m);
        std::copy_n(comp.ptr(), chw, out.ptr() + f * chw);
    }
    return out;
}

}  // namespace dpidm
