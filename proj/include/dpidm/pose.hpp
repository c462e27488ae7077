#pragma once

#include <array>
#include <optional>
#include <utility>
#include <vector>

#include "dpidm/common.hpp"
#include "dpidm/tape.hpp"
#include "dpidm/tensor.hpp"

namespace dpidm {

// Canonical 13-joint body skeleton. Garment skeletons are subsets whose
// landmarks correspond to body joints, so all pose maps share one channel
// layout (13 joint channels + 12 limb channels).
namespace skeleton {

enum Joint : int {
    kNeck = 0,
    kLShoulder,
    kRShoulder,
    kLElbow,
    kRElbow,
    kLWrist,
    kRWrist,
    kLHip,
    kRHip,
    kLKnee,
    kRKnee,
    kLAnkle,
    kRAnkle,
    kJointCount  // 13
};

inline constexpr int kNumJoints = 13;
inline constexpr int kNumEdges = 12;
inline constexpr std::array<std::pair<int, int>, kNumEdges> kEdges{{
    {kNeck, kLShoulder}, {kNeck, kRShoulder},
    {kLShoulder, kLElbow}, {kLElbow, kLWrist},
    {kRShoulder, kRElbow}, {kRElbow, kRWrist},
    {kNeck, kLHip}, {kNeck, kRHip},
    {kLHip, kLKnee}, {kLKnee, kLAnkle},
    {kRHip, kRKnee}, {kRKnee, kRAnkle},
}};

// Left/right pairs, used by horizontal-flip augmentation.
inline constexpr std::array<std::pair<int, int>, 6> kMirrorPairs{{
    {kLShoulder, kRShoulder}, {kLElbow, kRElbow}, {kLWrist, kRWrist},
    {kLHip, kRHip}, {kLKnee, kRKnee}, {kLAnkle, kRAnkle},
}};

inline constexpr int kPoseMapChannels = kNumJoints + kNumEdges;  // 25

}  // namespace skeleton

enum class SkeletonKind { human, garment_upper, garment_lower, garment_dress };

// Canonical joint slots covered by each skeleton kind.
inline const std::vector<int>& skeleton_slots(SkeletonKind kind) {
    using namespace skeleton;
    static const std::vector<int> human{kNeck, kLShoulder, kRShoulder, kLElbow, kRElbow,
                                        kLWrist, kRWrist, kLHip, kRHip, kLKnee,
                                        kRKnee, kLAnkle, kRAnkle};
    static const std::vector<int> upper{kNeck, kLShoulder, kRShoulder, kLElbow, kRElbow,
                                        kLWrist, kRWrist, kLHip, kRHip};
    static const std::vector<int> lower{kLHip, kRHip, kLKnee, kRKnee, kLAnkle, kRAnkle};
    static const std::vector<int> dress{kNeck, kLShoulder, kRShoulder, kLElbow, kRElbow,
                                        kLWrist, kRWrist, kLHip, kRHip, kLKnee, kRKnee};
    switch (kind) {
        case SkeletonKind::human: return human;
        case SkeletonKind::garment_upper: return upper;
        case SkeletonKind::garment_lower: return lower;
        case SkeletonKind::garment_dress: return dress;
    }
    throw Error("bad skeleton kind");
}

struct PoseJoint {
    float x = 0.f;
    float y = 0.f;
    int present = 0;
};

// A set of 2D landmarks with presence flags. `joints[i]` corresponds to the
// canonical slot `skeleton_slots(kind)[i]`.
struct SkeletonPose {
    SkeletonKind kind = SkeletonKind::human;
    std::vector<PoseJoint> joints;

    static SkeletonPose empty(SkeletonKind kind) {
        SkeletonPose p;
        p.kind = kind;
        p.joints.resize(skeleton_slots(kind).size());
        return p;
    }

    int joint_count() const { return static_cast<int>(joints.size()); }

    void validate() const {
        if (joints.size() != skeleton_slots(kind).size())
            throw ValidationError("pose joint count " + std::to_string(joints.size()) +
                                  " does not match skeleton kind");
        for (const auto& j : joints) {
            if (!std::isfinite(j.x) || !std::isfinite(j.y))
                throw ValidationError("non-finite joint coordinate");
            if (j.present != 0 && j.present != 1) throw ValidationError("presence flag not in {0,1}");
        }
    }
};

// Mirrors a pose horizontally on a canvas of the given width, swapping
// left/right landmarks.
inline SkeletonPose mirror_pose(const SkeletonPose& pose, int64_t width) {
    const std::vector<int>& slots = skeleton_slots(pose.kind);
    std::array<int, skeleton::kNumJoints> slot_to_idx;
    slot_to_idx.fill(-1);
    for (size_t i = 0; i < slots.size(); ++i) slot_to_idx[static_cast<size_t>(slots[i])] = static_cast<int>(i);
    SkeletonPose out = pose;
    for (auto& j : out.joints) j.x = static_cast<float>(width - 1) - j.x;
    for (const auto& [l, r] : skeleton::kMirrorPairs) {
        const int li = slot_to_idx[static_cast<size_t>(l)];
        const int ri = slot_to_idx[static_cast<size_t>(r)];
        if (li >= 0 && ri >= 0) std::swap(out.joints[static_cast<size_t>(li)], out.joints[static_cast<size_t>(ri)]);
    }
    return out;
}

// Each present joint is independently dropped (present -> 0) with probability
// p_drop. Deterministic per seed.
inline SkeletonPose drop_keypoints(const SkeletonPose& pose, double p_drop, uint64_t rng_seed) {
    if (p_drop < 0.0 || p_drop > 1.0) throw ValidationError("p_drop must be in [0,1]");
    Rng rng(rng_seed);
    SkeletonPose out = pose;
    for (auto& j : out.joints) {
        if (p_drop >= 1.0) {
            j.present = 0;
        } else if (j.present == 1 && rng.bernoulli(p_drop)) {
            j.present = 0;
        }
    }
    return out;
}

// Rasterizes a pose into a [25,H,W] map: Gaussian disks (sigma = 2 px) on the
// joint channels, anti-aliased 1.5 px segments on the limb channels. A limb is
// drawn only when both endpoints are present. Out-of-canvas content clips.
template <typename T>
Tensor<T> rasterize(const SkeletonPose& pose, int64_t height, int64_t width) {
    if (height <= 0 || width <= 0) throw ValidationError("rasterize: size must be positive");
    pose.validate();
    Tensor<T> map(Shape{skeleton::kPoseMapChannels, height, width});
    const std::vector<int>& slots = skeleton_slots(pose.kind);
    std::array<const PoseJoint*, skeleton::kNumJoints> by_slot{};
    for (size_t i = 0; i < slots.size(); ++i) by_slot[static_cast<size_t>(slots[i])] = &pose.joints[i];

    const double sigma = 2.0;
    const double radius = 4.0 * sigma;
    for (int s = 0; s < skeleton::kNumJoints; ++s) {
        const PoseJoint* j = by_slot[static_cast<size_t>(s)];
        if (!j || !j->present) continue;
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(j->y - radius)));
        const int64_t y1 = std::min<int64_t>(height - 1, static_cast<int64_t>(std::ceil(j->y + radius)));
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(j->x - radius)));
        const int64_t x1 = std::min<int64_t>(width - 1, static_cast<int64_t>(std::ceil(j->x + radius)));
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x) {
                const double dx = static_cast<double>(x) - j->x;
                const double dy = static_cast<double>(y) - j->y;
                const double r2 = dx * dx + dy * dy;
                if (r2 > radius * radius) continue;
                map.at(s, y, x) = static_cast<T>(std::exp(-r2 / (2.0 * sigma * sigma)));
            }
    }

    const double half = 0.75;  // limb thickness 1.5 px
    for (int e = 0; e < skeleton::kNumEdges; ++e) {
        const auto [a, b] = skeleton::kEdges[static_cast<size_t>(e)];
        const PoseJoint* ja = by_slot[static_cast<size_t>(a)];
        const PoseJoint* jb = by_slot[static_cast<size_t>(b)];
        if (!ja || !jb || !ja->present || !jb->present) continue;
        const double pad = half + 1.0;
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(ja->y, jb->y) - pad)));
        const int64_t y1 = std::min<int64_t>(height - 1, static_cast<int64_t>(std::ceil(std::max(ja->y, jb->y) + pad)));
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(ja->x, jb->x) - pad)));
        const int64_t x1 = std::min<int64_t>(width - 1, static_cast<int64_t>(std::ceil(std::max(ja->x, jb->x) + pad)));
        const double vx = jb->x - ja->x, vy = jb->y - ja->y;
        const double len2 = vx * vx + vy * vy;
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x) {
                const double px = static_cast<double>(x) - ja->x;
                const double py = static_cast<double>(y) - ja->y;
                double t = len2 > 0 ? (px * vx + py * vy) / len2 : 0.0;
                t = std::min(1.0, std::max(0.0, t));
                const double dx = px - t * vx, dy = py - t * vy;
                const double d = std::sqrt(dx * dx + dy * dy);
                const double v = std::min(1.0, std::max(0.0, half + 0.5 - d));
                auto& cell = map.at(skeleton::kNumJoints + e, y, x);
                cell = std::max(cell, static_cast<T>(v));
            }
    }
    return map;
}

// ---- pose adapter (two FC layers, GELU between, zero-initialized up) ----

template <typename T>
struct PoseAdapterParams {
    Tensor<T> w_down;  // [d_in, d_hidden]
    Tensor<T> b_down;  // [d_hidden]
    Tensor<T> w_up;    // [d_hidden, d_out]; all-zero at initialization
    Tensor<T> b_up;    // [d_out]; zero at initialization

    static PoseAdapterParams init(int64_t d_in, int64_t d_out, int64_t ratio, Rng& rng) {
        PoseAdapterParams p;
        const int64_t hidden = std::max<int64_t>(1, d_out / ratio);
        p.w_down = Tensor<T>::randn(Shape{d_in, hidden}, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_in))), rng);
        p.b_down = Tensor<T>(Shape{hidden});
        p.w_up = Tensor<T>(Shape{hidden, d_out});
        p.b_up = Tensor<T>(Shape{d_out});
        return p;
    }
};

struct AdapterV {
    Value w_down, b_down, w_up, b_up;
};

template <typename T>
AdapterV adapter_leaves(Tape<T>& tape, const PoseAdapterParams<T>& p) {
    return AdapterV{tape.leaf(p.w_down), tape.leaf(p.b_down), tape.leaf(p.w_up), tape.leaf(p.b_up)};
}

// Adpt(p) = W_up(GELU(W_down(p))), tokens [S, d_in] -> [S, d_out].
template <typename T>
Value adapt_tape(Tape<T>& tape, Value tokens, const AdapterV& a) {
    Value h = tape.linear(tokens, a.w_down, a.b_down);
    h = tape.gelu(h);
    return tape.linear(h, a.w_up, a.b_up);
}

template <typename T>
Tensor<T> adapt(const Tensor<T>& tokens, const PoseAdapterParams<T>& params) {
    if (tokens.rank() != 2 || tokens.shape[1] != params.w_down.shape[0])
        throw ShapeError("adapt: token dim " + shape_str(tokens.shape) + " vs w_down " +
                         shape_str(params.w_down.shape));
    Tape<T> tape(false);
    Value t = tape.constant(tokens);
    Value out = adapt_tape(tape, t, adapter_leaves(tape, params));
    return tape.val(out);
}

// ---- pose encoder: four strided convolutions, total stride 4 ----

template <typename T>
struct PoseEncoderParams {
    // widths default [16, 32, 64, d_p]; strides 2,1,2,1; k=3, pad=1
    std::array<Tensor<T>, 4> w;
    std::array<Tensor<T>, 4> b;

    static PoseEncoderParams init(int64_t d_pose, Rng& rng, std::array<int64_t, 3> widths = {16, 32, 64}) {
        PoseEncoderParams p;
        const int64_t chans[5] = {skeleton::kPoseMapChannels, widths[0], widths[1], widths[2], d_pose};
        for (int i = 0; i < 4; ++i) {
            const int64_t fan_in = chans[i] * 9;
            p.w[static_cast<size_t>(i)] = Tensor<T>::randn(Shape{chans[i + 1], chans[i], 3, 3},
                                         static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in))), rng);
            p.b[static_cast<size_t>(i)] = Tensor<T>(Shape{chans[i + 1]});
        }
        return p;
    }
};

inline constexpr std::array<int, 4> kPoseEncoderStrides{2, 1, 2, 1};

struct PoseEncoderV {
    std::array<Value, 4> w;
    std::array<Value, 4> b;
};

template <typename T>
PoseEncoderV pose_encoder_leaves(Tape<T>& tape, const PoseEncoderParams<T>& p) {
    PoseEncoderV v;
    for (size_t i = 0; i < 4; ++i) {
        v.w[i] = tape.leaf(p.w[i]);
        v.b[i] = tape.leaf(p.b[i]);
    }
    return v;
}

// maps [N, 25, H, W] -> [N, d_p, H/4, W/4]
template <typename T>
Value encode_pose_tape(Tape<T>& tape, Value maps, const PoseEncoderV& enc) {
    const Shape& s = tape.shape(maps);
    if (s.size() != 4 || s[2] % 4 || s[3] % 4)
        throw ShapeError("encode_pose: spatial dims must be divisible by 4, got " + shape_str(s));
    Value x = maps;
    for (size_t i = 0; i < 4; ++i) {
        x = tape.conv2d(x, enc.w[i], enc.b[i], kPoseEncoderStrides[i], 1);
        if (i + 1 < 4) x = tape.silu(x);
    }
    return x;
}

template <typename T>
Tensor<T> encode_pose(const Tensor<T>& map, const PoseEncoderParams<T>& params) {
    Tape<T> tape(false);
    const bool batched = map.rank() == 4;
    Tensor<T> in = batched ? map : map.reshaped(Shape{1, map.shape[0], map.shape[1], map.shape[2]});
    Value x = tape.constant(in);
    Value out = encode_pose_tape(tape, x, pose_encoder_leaves(tape, params));
    Tensor<T> o = tape.val(out);
    if (!batched) o = o.reshaped(Shape{o.shape[1], o.shape[2], o.shape[3]});
    return o;
}

}  // namespace dpidm
