#pragma once

#include <vector>

#include "dpidm/diffusion.hpp"
#include "dpidm/network.hpp"
#include "dpidm/synthdata.hpp"

namespace dpidm {

// Binary mask [T,1,H,W] -> latent-resolution mask via 4x4 max pooling; any
// covered pixel marks the latent cell.
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask) {
    const int64_t N = mask.shape[0], H = mask.shape[2], W = mask.shape[3];
    if (H % 4 || W % 4) throw ShapeError("mask dims must be divisible by 4");
    Tensor<T> out(Shape{N, 1, H / 4, W / 4});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < H / 4; ++i)
            for (int64_t j = 0; j < W / 4; ++j) {
                T m = 0;
                for (int64_t di = 0; di < 4; ++di)
                    for (int64_t dj = 0; dj < 4; ++dj)
                        m = std::max(m, mask[(n * H + i * 4 + di) * W + j * 4 + dj]);
                out[(n * (H / 4) + i) * (W / 4) + j] = m;
            }
    return out;
}

template <typename T>
Tensor<T> rasterize_poses(const std::vector<SkeletonPose>& poses, int64_t H, int64_t W) {
    const int64_t T_ = static_cast<int64_t>(poses.size());
    Tensor<T> maps(Shape{T_, skeleton::kPoseMapChannels, H, W});
    const int64_t chw = skeleton::kPoseMapChannels * H * W;
    for (int64_t t = 0; t < T_; ++t) {
        const Tensor<T> m = rasterize<T>(poses[static_cast<size_t>(t)], H, W);
        std::copy_n(m.ptr(), chw, maps.ptr() + t * chw);
    }
    return maps;
}

// source * (1-mask) + mid-gray * mask, with the dataset's quantized fill.
template <typename T>
Tensor<T> make_agnostic(const Tensor<T>& source, const Tensor<T>& mask) {
    const int64_t N = source.shape[0], H = source.shape[2], W = source.shape[3];
    if (mask.shape != Shape{N, 1, H, W}) throw ShapeError("make_agnostic: mask shape");
    Tensor<T> out = source;
    const T fill = T(128) / T(255);
    const int64_t hw = H * W;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t p = 0; p < hw; ++p)
            if (mask[n * hw + p] != T(0))
                for (int c = 0; c < 3; ++c) out[(n * 3 + c) * hw + p] = fill;
    return out;
}

// Flip the last (width) axis.
template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& x) {
    Tensor<T> out(x.shape);
    const int64_t W = x.shape.back();
    const int64_t rows = x.numel() / W;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < W; ++j) out[r * W + j] = x[r * W + (W - 1 - j)];
    return out;
}

// Frames [t0, t0+len) of a [T,C,H,W] tensor.
template <typename T>
Tensor<T> clip_frames(const Tensor<T>& video, int64_t t0, int64_t len) {
    const int64_t chw = video.numel() / video.shape[0];
    if (t0 < 0 || t0 + len > video.shape[0]) throw ShapeError("clip_frames out of range");
    Shape s = video.shape;
    s[0] = len;
    Tensor<T> out(s);
    std::copy_n(video.ptr() + t0 * chw, len * chw, out.ptr());
    return out;
}

// Deterministic per-frame initial noise: frames shared between overlapping
// windows receive identical noise.
template <typename T>
Tensor<T> frame_noise(uint64_t seed, int64_t frame, const Shape& chw) {
    Rng rng(mix_seed(seed, 0xA015Eull + static_cast<uint64_t>(frame)));
    Tensor<T> out(chw);
    for (auto& v : out.data) v = static_cast<T>(rng.normal());
    return out;
}

// Assembles the conditioning part of a DenoiseBatch from pixel-space clip
// data (no z_t / timestep yet).
template <typename T>
DenoiseBatch<T> make_conditions(const Model<T>& model, const Tensor<T>& agnostic_frames,
                                const Tensor<T>& mask_frames,
                                const std::vector<SkeletonPose>& human_poses,
                                const SkeletonPose& garment_pose, const Tensor<T>& garment_image) {
    const ModelConfig& cfg = model.cfg;
    DenoiseBatch<T> b;
    b.agnostic_latent = encode_latent(model, agnostic_frames);
    b.mask_latent = downsample_mask(mask_frames);
    b.human_maps = rasterize_poses<T>(human_poses, cfg.canvas_h, cfg.canvas_w);
    Tensor<T> gmap = rasterize<T>(garment_pose, cfg.canvas_h, cfg.canvas_w);
    b.garment_map = gmap.reshaped(Shape{1, skeleton::kPoseMapChannels, cfg.canvas_h, cfg.canvas_w});
    b.garment_image = garment_image;
    b.garment_latent = encode_latent(
        model, garment_image.reshaped(Shape{1, 3, cfg.canvas_h, cfg.canvas_w}));
    return b;
}

}  // namespace dpidm
