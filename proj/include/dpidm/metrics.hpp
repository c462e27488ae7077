#pragma once

#include <array>
#include <vector>

#include "dpidm/pipeline.hpp"

namespace dpidm {
namespace metrics_detail {

// 7x7 Gaussian window, sigma 1.5, normalized.
inline const std::array<double, 49>& gaussian_window() {
    static const std::array<double, 49> w = [] {
        std::array<double, 49> out{};
        double sum = 0;
        for (int i = 0; i < 7; ++i)
            for (int j = 0; j < 7; ++j) {
                const double dy = i - 3, dx = j - 3;
                out[static_cast<size_t>(i * 7 + j)] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
                sum += out[static_cast<size_t>(i * 7 + j)];
            }
        for (auto& v : out) v /= sum;
        return out;
    }();
    return w;
}

inline int64_t reflect(int64_t i, int64_t n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
    return i;
}

// Per-pixel SSIM map of one channel pair.
template <typename T>
void ssim_map_channel(const T* a, const T* b, int64_t H, int64_t W, std::vector<double>& map) {
    const auto& win = gaussian_window();
    const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;  // dynamic range 1
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < 7; ++i)
                for (int j = 0; j < 7; ++j) {
                    const int64_t yy = reflect(y + i - 3, H);
                    const int64_t xx = reflect(x + j - 3, W);
                    const double w = win[static_cast<size_t>(i * 7 + j)];
                    const double va = static_cast<double>(a[yy * W + xx]);
                    const double vb = static_cast<double>(b[yy * W + xx]);
                    mx += w * va;
                    my += w * vb;
                    sxx += w * va * va;
                    syy += w * vb * vb;
                    sxy += w * va * vb;
                }
            const double vx = sxx - mx * mx, vy = syy - my * my, vxy = sxy - mx * my;
            map[static_cast<size_t>(y * W + x)] +=
                ((2 * mx * my + C1) * (2 * vxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
}

template <typename T>
std::vector<double> ssim_map(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("ssim: shape mismatch " + shape_str(a.shape) + " vs " +
                                           shape_str(b.shape));
    if (a.rank() != 3) throw ShapeError("ssim expects [C,H,W]");
    const int64_t C = a.shape[0], H = a.shape[1], W = a.shape[2];
    std::vector<double> map(static_cast<size_t>(H * W), 0.0);
    for (int64_t c = 0; c < C; ++c)
        ssim_map_channel(a.ptr() + c * H * W, b.ptr() + c * H * W, H, W, map);
    for (auto& v : map) v /= static_cast<double>(C);
    return map;
}

}  // namespace metrics_detail

// Mean local SSIM with a 7x7 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1. Channels are averaged. Symmetric in its arguments.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
    const std::vector<double> map = metrics_detail::ssim_map(a, b);
    double acc = 0;
    for (double v : map) acc += v;
    return acc / static_cast<double>(map.size());
}

// SSIM averaged over masked pixels only; 0 if the mask is empty.
template <typename T>
double ssim_masked(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& mask) {
    if (mask.shape != Shape{1, a.shape[1], a.shape[2]}) throw ShapeError("ssim_masked: mask shape");
    const std::vector<double> map = metrics_detail::ssim_map(a, b);
    double acc = 0;
    int64_t n = 0;
    for (size_t p = 0; p < map.size(); ++p)
        if (mask[static_cast<int64_t>(p)] != T(0)) {
            acc += map[p];
            ++n;
        }
    return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

// Mean over consecutive-frame pairs of the masked mean-absolute difference.
template <typename T>
double flicker_raw(const Tensor<T>& video, const Tensor<T>& mask) {
    if (video.rank() != 4 || video.shape[0] < 2)
        throw ValidationError("flicker: need at least 2 frames");
    const int64_t T_ = video.shape[0], C = video.shape[1];
    const int64_t hw = video.shape[2] * video.shape[3];
    if (mask.shape != Shape{T_, 1, video.shape[2], video.shape[3]})
        throw ShapeError("flicker: mask shape");
    double total = 0;
    for (int64_t t = 1; t < T_; ++t) {
        double num = 0, den = 0;
        for (int64_t p = 0; p < hw; ++p) {
            const double w = std::max(static_cast<double>(mask[(t - 1) * hw + p]),
                                      static_cast<double>(mask[t * hw + p]));
            if (w == 0) continue;
            den += w * static_cast<double>(C);
            for (int64_t c = 0; c < C; ++c)
                num += w * std::abs(static_cast<double>(video[(t * C + c) * hw + p]) -
                                    static_cast<double>(video[((t - 1) * C + c) * hw + p]));
        }
        total += den > 0 ? num / den : 0.0;
    }
    return total / static_cast<double>(T_ - 1);
}

struct FlickerResult {
    double raw = 0;     // masked frame-to-frame variation of the video
    double excess = 0;  // raw minus the same statistic on the ground truth
};

template <typename T>
FlickerResult flicker_index(const Tensor<T>& video, const Tensor<T>& truth, const Tensor<T>& mask) {
    FlickerResult r;
    r.raw = flicker_raw(video, mask);
    r.excess = r.raw - flicker_raw(truth, mask);
    return r;
}

// Eq.-style TRA statistic at inference: the TRA loss of the PASA maps from a
// single denoising pass at a fixed mid-trajectory timestep, no gradients,
// averaged over the batch.
template <typename T>
double tra_statistic(const Model<T>& model, const std::vector<TryOnSample>& batch,
                     const NoiseSchedule& sched, int64_t clip_length, uint64_t seed = 0x7125) {
    if (batch.empty()) throw ValidationError("tra_statistic: empty batch");
    LossConfig cfg;
    cfg.lambda = 1.0;
    double acc = 0;
    const int64_t t_mid = sched.num_steps() / 2;
    for (size_t i = 0; i < batch.size(); ++i) {
        const TryOnSample& s = batch[i];
        const int64_t len = std::min<int64_t>(clip_length, s.target_video.shape[0]);
        if (len < 2) throw ValidationError("tra_statistic: need clips of at least 2 frames");
        Tensor<T> target = clip_frames(s.target_video, 0, len).template cast<T>();
        Tensor<T> agnostic = clip_frames(s.agnostic_video, 0, len).template cast<T>();
        Tensor<T> mask = clip_frames(s.agnostic_mask, 0, len).template cast<T>();
        std::vector<SkeletonPose> poses(s.human_pose.begin(), s.human_pose.begin() + len);
        DenoiseBatch<T> b = make_conditions(model, agnostic, mask, poses, s.garment_pose,
                                            s.garment_image.template cast<T>());
        Tensor<T> z0 = encode_latent(model, target);
        Rng rng(mix_seed(seed, 0x5AD + i));
        Tensor<T> eps(z0.shape);
        for (auto& v : eps.data) v = static_cast<T>(rng.normal());
        b.z_t = add_noise(z0, eps, sched, t_mid);
        b.t = t_mid;
        const DenoiseResult<T> r = denoise_step(model, b, ClipMode::video, false);
        acc += static_cast<double>(tra_loss(r.records, cfg));
    }
    return acc / static_cast<double>(batch.size());
}

}  // namespace dpidm
