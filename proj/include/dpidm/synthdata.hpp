#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dpidm/common.hpp"
#include "dpidm/image_io.hpp"
#include "dpidm/pose.hpp"
#include "dpidm/tensor.hpp"

namespace dpidm {

enum class MotionProfile { sway, walk, raise_arms };
enum class GarmentKind { upper, lower, dress };
enum class TextureKind { solid, stripes, checker };

inline const char* to_string(MotionProfile m) {
    switch (m) {
        case MotionProfile::sway: return "sway";
        case MotionProfile::walk: return "walk";
        case MotionProfile::raise_arms: return "raise-arms";
    }
    return "?";
}
inline const char* to_string(GarmentKind g) {
    switch (g) {
        case GarmentKind::upper: return "upper";
        case GarmentKind::lower: return "lower";
        case GarmentKind::dress: return "dress";
    }
    return "?";
}
inline const char* to_string(TextureKind t) {
    switch (t) {
        case TextureKind::solid: return "solid";
        case TextureKind::stripes: return "stripes";
        case TextureKind::checker: return "checker";
    }
    return "?";
}

inline GarmentKind garment_kind_from_string(const std::string& s) {
    if (s == "upper") return GarmentKind::upper;
    if (s == "lower") return GarmentKind::lower;
    if (s == "dress") return GarmentKind::dress;
    throw ConfigError("unknown garment kind: " + s);
}
inline MotionProfile motion_from_string(const std::string& s) {
    if (s == "sway") return MotionProfile::sway;
    if (s == "walk") return MotionProfile::walk;
    if (s == "raise-arms") return MotionProfile::raise_arms;
    throw ConfigError("unknown motion profile: " + s);
}
inline TextureKind texture_from_string(const std::string& s) {
    if (s == "solid") return TextureKind::solid;
    if (s == "stripes") return TextureKind::stripes;
    if (s == "checker") return TextureKind::checker;
    throw ConfigError("unknown texture: " + s);
}

inline SkeletonKind garment_skeleton_kind(GarmentKind g) {
    switch (g) {
        case GarmentKind::upper: return SkeletonKind::garment_upper;
        case GarmentKind::lower: return SkeletonKind::garment_lower;
        case GarmentKind::dress: return SkeletonKind::garment_dress;
    }
    throw Error("bad garment kind");
}

struct Rgb {
    float r = 0.f, g = 0.f, b = 0.f;
};

inline constexpr int kLatentDownsample = 4;

struct SceneSpec {
    uint64_t seed = 0;
    int64_t num_frames = 1;
    int64_t canvas_h = 64;
    int64_t canvas_w = 48;
    MotionProfile motion = MotionProfile::sway;
    GarmentKind garment_kind = GarmentKind::upper;
    TextureKind texture = TextureKind::stripes;
    std::array<Rgb, 3> palette{{{0.85f, 0.25f, 0.25f}, {0.95f, 0.9f, 0.55f}, {0.25f, 0.4f, 0.8f}}};

    void validate() const {
        if (num_frames < 1) throw ConfigError("num_frames must be >= 1");
        if (canvas_h % kLatentDownsample || canvas_w % kLatentDownsample)
            throw ConfigError("canvas size " + std::to_string(canvas_h) + "x" +
                              std::to_string(canvas_w) + " must be divisible by " +
                              std::to_string(kLatentDownsample));
        if (canvas_h < 32 || canvas_w < 24)
            throw ConfigError("canvas too small; minimum is 32x24");
    }
};

struct TryOnSample {
    Tensor<float> source_video;   // [T,3,H,W], figure wearing the source garment
    Tensor<float> target_video;   // [T,3,H,W], figure wearing the query garment
    Tensor<float> agnostic_video; // [T,3,H,W], garment region filled with mid-gray
    Tensor<float> agnostic_mask;  // [T,1,H,W], binary
    Tensor<float> garment_image;  // [3,H,W], query garment product shot
    std::vector<SkeletonPose> human_pose;  // per frame
    SkeletonPose garment_pose;             // landmarks on garment_image
};

namespace synth_detail {

struct Vec2 {
    double x = 0, y = 0;
};
inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(Vec2 a, double s) { return {a.x * s, a.y * s}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::sqrt(dot(a, a)); }

struct Figure {
    std::array<Vec2, skeleton::kNumJoints> j;
    Vec2 head_center;
    double head_radius = 0;
};

// Per-scene body proportions, jittered deterministically from the seed.
struct BodyShape {
    double scale = 1;
    double cx = 0;
    double shoulder_half = 5.0;
    double hip_half = 3.6;
    double neck_y = 20.0, hip_y = 36.0, knee_y = 47.0, ankle_y = 58.0;
    double upper_arm = 6.2, forearm = 6.2;
    double sway_amp = 2.2;

    static BodyShape from_spec(const SceneSpec& spec) {
        Rng rng(mix_seed(spec.seed, 0xB0D7));
        BodyShape s;
        s.scale = static_cast<double>(spec.canvas_h) / 64.0;
        s.cx = static_cast<double>(spec.canvas_w) * 0.5 + rng.uniform(-1.5, 1.5) * s.scale;
        const double j = rng.uniform(0.95, 1.05);
        s.shoulder_half *= j;
        s.hip_half *= j;
        s.upper_arm *= rng.uniform(0.95, 1.05);
        s.forearm *= rng.uniform(0.95, 1.05);
        s.sway_amp *= rng.uniform(0.8, 1.1);
        return s;
    }
};

// Deterministic kinematics. Per-frame phase increments are fixed so that
// per-joint displacement stays well under the 6 px continuity budget at any
// clip length.
inline Figure figure_at(const BodyShape& b, MotionProfile motion, int64_t frame, bool neutral = false) {
    const double s = b.scale;
    const double phase = 0.045 * static_cast<double>(frame);
    const double w = 6.283185307179586 * phase;

    double cx = b.cx;
    double bob = 0.0;
    double arm_l = 0.25, arm_r = 0.25;  // angle from straight-down, outward positive
    double thigh_l = 0.0, thigh_r = 0.0;

    if (!neutral) {
        switch (motion) {
            case MotionProfile::sway:
                cx += b.sway_amp * s * std::sin(w);
                arm_l = 0.25 + 0.12 * std::sin(w);
                arm_r = 0.25 - 0.12 * std::sin(w);
                break;
            case MotionProfile::walk:
                thigh_l = 0.30 * std::sin(w);
                thigh_r = -0.30 * std::sin(w);
                arm_l = 0.25 - 0.20 * std::sin(w);
                arm_r = 0.25 + 0.20 * std::sin(w);
                bob = 0.7 * s * std::abs(std::sin(w));
                break;
            case MotionProfile::raise_arms: {
                const double t = std::min(1.0, 0.022 * static_cast<double>(frame));
                const double ang = 0.25 + (2.55 - 0.25) * (0.5 - 0.5 * std::cos(3.14159265358979 * t));
                arm_l = ang;
                arm_r = ang;
                break;
            }
        }
    }

    using namespace skeleton;
    Figure f;
    const double neck_y = b.neck_y * s + bob;
    const double hip_y = b.hip_y * s + bob;
    f.j[kNeck] = {cx, neck_y};
    f.j[kLShoulder] = {cx - b.shoulder_half * s, neck_y + 1.5 * s};
    f.j[kRShoulder] = {cx + b.shoulder_half * s, neck_y + 1.5 * s};
    // Arms hang from the shoulders; angle measured from straight-down,
    // rotating outward on each side.
    auto arm = [&](Vec2 sh, double ang, double side) {
        const Vec2 elbow = sh + Vec2{side * std::sin(ang) * b.upper_arm * s,
                                     std::cos(ang) * b.upper_arm * s};
        const double fang = ang * 0.92;
        const Vec2 wrist = elbow + Vec2{side * std::sin(fang) * b.forearm * s,
                                        std::cos(fang) * b.forearm * s};
        return std::pair<Vec2, Vec2>{elbow, wrist};
    };
    auto [lel, lwr] = arm(f.j[kLShoulder], arm_l, -1.0);
    auto [rel, rwr] = arm(f.j[kRShoulder], arm_r, 1.0);
    f.j[kLElbow] = lel;
    f.j[kLWrist] = lwr;
    f.j[kRElbow] = rel;
    f.j[kRWrist] = rwr;
    f.j[kLHip] = {cx - b.hip_half * s, hip_y};
    f.j[kRHip] = {cx + b.hip_half * s, hip_y};
    const double thigh_len = (b.knee_y - b.hip_y) * s;
    const double shin_len = (b.ankle_y - b.knee_y) * s;
    auto leg = [&](Vec2 hip, double ang) {
        const Vec2 knee = hip + Vec2{std::sin(ang) * thigh_len, std::cos(ang) * thigh_len};
        const double sang = ang * 0.7;
        const Vec2 ankle = knee + Vec2{std::sin(sang) * shin_len, std::cos(sang) * shin_len};
        return std::pair<Vec2, Vec2>{knee, ankle};
    };
    auto [lkn, lan] = leg(f.j[kLHip], thigh_l);
    auto [rkn, ran] = leg(f.j[kRHip], thigh_r);
    f.j[kLKnee] = lkn;
    f.j[kLAnkle] = lan;
    f.j[kRKnee] = rkn;
    f.j[kRAnkle] = ran;
    f.head_center = {cx, neck_y - 6.0 * s};
    f.head_radius = 4.0 * s;
    return f;
}

using TexFn = std::function<Rgb(double u, double v)>;

inline int band(double x, double w) { return static_cast<int>(std::floor(x / w)); }

inline TexFn make_texture(TextureKind tex, Rgb c0, Rgb c1, double band_px) {
    switch (tex) {
        case TextureKind::solid:
            return [c0](double, double) { return c0; };
        case TextureKind::stripes:
            return [c0, c1, band_px](double u, double) { return band(u, band_px) % 2 ? c1 : c0; };
        case TextureKind::checker:
            return [c0, c1, band_px](double u, double v) {
                return (band(u, band_px) + band(v, band_px)) % 2 ? c1 : c0;
            };
    }
    throw Error("bad texture");
}

// Blends color into a [3,H,W] frame with the given alpha; optionally also
// raises a coverage buffer (for mask construction) using a padded footprint.
struct Painter {
    Tensor<float>* img = nullptr;       // [3,H,W] or null
    std::vector<float>* cover = nullptr;  // H*W or null
    int64_t h = 0, w = 0;
    double cover_pad = 0;

    void blend(int64_t y, int64_t x, Rgb c, double alpha) const {
        if (!img || alpha <= 0) return;
        const int64_t hw = h * w;
        float* p = img->ptr() + y * w + x;
        p[0] = static_cast<float>(p[0] * (1 - alpha) + c.r * alpha);
        p[hw] = static_cast<float>(p[hw] * (1 - alpha) + c.g * alpha);
        p[2 * hw] = static_cast<float>(p[2 * hw] * (1 - alpha) + c.b * alpha);
    }

    void raise_cover(int64_t y, int64_t x, double padded_alpha) const {
        if (cover && padded_alpha > 0) (*cover)[static_cast<size_t>(y * w + x)] = 1.f;
    }

    // Capsule along segment a->b with half-thickness r. Texture coords:
    // u = arc length from a (+u_offset), v = signed perpendicular distance.
    void capsule(Vec2 a, Vec2 b, double r, const TexFn& tex, double u_offset = 0) const {
        const double pad = r + 1.0 + cover_pad;
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(a.y, b.y) - pad)));
        const int64_t y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(std::max(a.y, b.y) + pad)));
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(std::min(a.x, b.x) - pad)));
        const int64_t x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(std::max(a.x, b.x) + pad)));
        const Vec2 v = b - a;
        const double len = norm(v);
        const Vec2 unit = len > 0 ? v * (1.0 / len) : Vec2{1, 0};
        const Vec2 perp{-unit.y, unit.x};
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x) {
                const Vec2 p = Vec2{static_cast<double>(x), static_cast<double>(y)} - a;
                const double t = std::min(len, std::max(0.0, dot(p, unit)));
                const Vec2 q = p - unit * t;
                const double d = norm(q);
                const double alpha = std::min(1.0, std::max(0.0, r + 0.5 - d));
                blend(y, x, tex(t + u_offset, dot(p, perp)), alpha);
                raise_cover(y, x, std::min(1.0, std::max(0.0, r + cover_pad + 0.5 - d)));
            }
    }

    void disk(Vec2 c, double r, Rgb color) const {
        const double pad = r + 1.0 + cover_pad;
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(c.y - pad)));
        const int64_t y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(c.y + pad)));
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(c.x - pad)));
        const int64_t x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(c.x + pad)));
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x) {
                const double d = norm(Vec2{static_cast<double>(x), static_cast<double>(y)} - c);
                blend(y, x, color, std::min(1.0, std::max(0.0, r + 0.5 - d)));
                raise_cover(y, x, std::min(1.0, std::max(0.0, r + cover_pad + 0.5 - d)));
            }
    }

    // Convex quad, corners in CCW order. Texture coords come from the given
    // anchor and axis direction (u along axis, v across it).
    void quad(const std::array<Vec2, 4>& c, const TexFn& tex, Vec2 anchor, Vec2 axis_unit) const {
        double minx = c[0].x, maxx = c[0].x, miny = c[0].y, maxy = c[0].y;
        for (const auto& p : c) {
            minx = std::min(minx, p.x);
            maxx = std::max(maxx, p.x);
            miny = std::min(miny, p.y);
            maxy = std::max(maxy, p.y);
        }
        const double pad = 1.0 + cover_pad;
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(miny - pad)));
        const int64_t y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(maxy + pad)));
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(minx - pad)));
        const int64_t x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(maxx + pad)));
        const Vec2 perp{-axis_unit.y, axis_unit.x};
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x) {
                const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
                // signed distance to quad boundary: positive inside
                double sd = 1e30;
                for (int i = 0; i < 4; ++i) {
                    const Vec2 e = c[static_cast<size_t>((i + 1) % 4)] - c[static_cast<size_t>(i)];
                    const Vec2 n{e.y, -e.x};  // inward normal for CCW (y-down canvas)
                    const double nl = norm(n);
                    if (nl <= 0) continue;
                    sd = std::min(sd, dot(p - c[static_cast<size_t>(i)], n * (1.0 / nl)));
                }
                const double alpha = std::min(1.0, std::max(0.0, sd + 0.5));
                const Vec2 rel = p - anchor;
                blend(y, x, tex(dot(rel, axis_unit), dot(rel, perp)), alpha);
                raise_cover(y, x, std::min(1.0, std::max(0.0, sd + cover_pad + 0.5)));
            }
    }
};

inline void draw_body(Painter& pt, const Figure& f) {
    using namespace skeleton;
    const Rgb skin{0.72f, 0.58f, 0.48f};
    const Rgb core{0.42f, 0.40f, 0.44f};
    const TexFn skin_t = [skin](double, double) { return skin; };
    const TexFn core_t = [core](double, double) { return core; };
    const Vec2 hip_mid = (f.j[kLHip] + f.j[kRHip]) * 0.5;
    Vec2 axis = hip_mid - f.j[kNeck];
    const double al = norm(axis);
    axis = al > 0 ? axis * (1.0 / al) : Vec2{0, 1};
    pt.quad({f.j[kLShoulder], f.j[kLHip], f.j[kRHip], f.j[kRShoulder]}, core_t, f.j[kNeck], axis);
    pt.capsule(f.j[kLShoulder], f.j[kLElbow], 1.6, skin_t);
    pt.capsule(f.j[kLElbow], f.j[kLWrist], 1.5, skin_t);
    pt.capsule(f.j[kRShoulder], f.j[kRElbow], 1.6, skin_t);
    pt.capsule(f.j[kRElbow], f.j[kRWrist], 1.5, skin_t);
    pt.capsule(f.j[kLHip], f.j[kLKnee], 1.9, skin_t);
    pt.capsule(f.j[kLKnee], f.j[kLAnkle], 1.7, skin_t);
    pt.capsule(f.j[kRHip], f.j[kRKnee], 1.9, skin_t);
    pt.capsule(f.j[kRKnee], f.j[kRAnkle], 1.7, skin_t);
    pt.capsule(f.j[kNeck], f.head_center, 1.4, skin_t);
    pt.disk(f.head_center, f.head_radius, skin);
}

// Draws one garment (optionally into img and/or coverage) at the figure pose.
inline void draw_garment(Painter& pt, const Figure& f, GarmentKind kind, TextureKind tex,
                         Rgb c0, Rgb c1, double scale) {
    using namespace skeleton;
    const double band_px = 4.5 * scale;
    const TexFn t = make_texture(tex, c0, c1, band_px);
    const Vec2 hip_mid = (f.j[kLHip] + f.j[kRHip]) * 0.5;
    Vec2 axis = hip_mid - f.j[kNeck];
    const double al = norm(axis);
    axis = al > 0 ? axis * (1.0 / al) : Vec2{0, 1};
    const Vec2 side{-axis.y, axis.x};
    const double widen = 1.6 * scale;

    auto torso = [&](double hem_extend) {
        const Vec2 hem_l = f.j[kLHip] - side * widen + axis * hem_extend;
        const Vec2 hem_r = f.j[kRHip] + side * widen + axis * hem_extend;
        pt.quad({f.j[kLShoulder] - side * widen, hem_l, hem_r, f.j[kRShoulder] + side * widen},
                t, f.j[kNeck], axis);
    };
    const double sleeve_r = 2.2 * scale;

    switch (kind) {
        case GarmentKind::upper:
            torso(1.0 * scale);
            pt.capsule(f.j[kLShoulder], f.j[kLElbow], sleeve_r, t);
            pt.capsule(f.j[kLElbow], f.j[kLWrist], sleeve_r * 0.95, t,
                       norm(f.j[kLElbow] - f.j[kLShoulder]));
            pt.capsule(f.j[kRShoulder], f.j[kRElbow], sleeve_r, t);
            pt.capsule(f.j[kRElbow], f.j[kRWrist], sleeve_r * 0.95, t,
                       norm(f.j[kRElbow] - f.j[kRShoulder]));
            break;
        case GarmentKind::lower: {
            // waistband
            const Vec2 up = axis * (-1.8 * scale);
            pt.quad({f.j[kLHip] - side * widen + up, f.j[kLHip] - side * widen,
                     f.j[kRHip] + side * widen, f.j[kRHip] + side * widen + up},
                    t, hip_mid, axis);
            const double leg_r = 2.5 * scale;
            pt.capsule(f.j[kLHip], f.j[kLKnee], leg_r, t);
            pt.capsule(f.j[kLKnee], f.j[kLAnkle], leg_r * 0.9, t, norm(f.j[kLKnee] - f.j[kLHip]));
            pt.capsule(f.j[kRHip], f.j[kRKnee], leg_r, t);
            pt.capsule(f.j[kRKnee], f.j[kRAnkle], leg_r * 0.9, t, norm(f.j[kRKnee] - f.j[kRHip]));
            break;
        }
        case GarmentKind::dress: {
            torso(0.0);
            const double knee_y = 0.5 * (f.j[kLKnee].y + f.j[kRKnee].y);
            const double flare = 7.0 * scale;
            pt.quad({hip_mid - side * (4.2 * scale), Vec2{hip_mid.x - flare, knee_y},
                     Vec2{hip_mid.x + flare, knee_y}, hip_mid + side * (4.2 * scale)},
                    t, f.j[kNeck], axis);
            pt.capsule(f.j[kLShoulder], f.j[kLElbow], sleeve_r, t);
            pt.capsule(f.j[kRShoulder], f.j[kRElbow], sleeve_r, t);
            break;
        }
    }
}

inline SkeletonPose pose_from_figure(const Figure& f, SkeletonKind kind) {
    SkeletonPose p = SkeletonPose::empty(kind);
    const std::vector<int>& slots = skeleton_slots(kind);
    for (size_t i = 0; i < slots.size(); ++i) {
        p.joints[i].x = static_cast<float>(f.j[static_cast<size_t>(slots[i])].x);
        p.joints[i].y = static_cast<float>(f.j[static_cast<size_t>(slots[i])].y);
        p.joints[i].present = 1;
    }
    return p;
}

inline void quantize_u8_grid(Tensor<float>& t) {
    for (auto& v : t.data) {
        const float c = std::min(1.f, std::max(0.f, v));
        v = static_cast<float>(std::lround(c * 255.f)) / 255.f;
    }
}

}  // namespace synth_detail

// Pure function of the spec: same spec (including seed) gives bit-identical
// output. Source and target share the body frames; they differ only inside
// the garment mask, where the source wears a derived "original" garment and
// the target wears the query garment from the spec.
inline TryOnSample generate_sample(const SceneSpec& spec) {
    using namespace synth_detail;
    spec.validate();
    const int64_t T = spec.num_frames, H = spec.canvas_h, W = spec.canvas_w;
    const BodyShape body = BodyShape::from_spec(spec);
    const double s = body.scale;

    // Source garment: same kind, different texture and colors.
    Rng crng(mix_seed(spec.seed, 0xC01));
    const TextureKind src_tex = static_cast<TextureKind>((static_cast<int>(spec.texture) + 1) % 3);
    const Rgb src_c0{static_cast<float>(crng.uniform(0.15, 0.9)), static_cast<float>(crng.uniform(0.15, 0.9)),
                     static_cast<float>(crng.uniform(0.15, 0.9))};
    const Rgb src_c1{static_cast<float>(crng.uniform(0.15, 0.9)), static_cast<float>(crng.uniform(0.15, 0.9)),
                     static_cast<float>(crng.uniform(0.15, 0.9))};

    TryOnSample out;
    out.source_video = Tensor<float>(Shape{T, 3, H, W});
    out.target_video = Tensor<float>(Shape{T, 3, H, W});
    out.agnostic_video = Tensor<float>(Shape{T, 3, H, W});
    out.agnostic_mask = Tensor<float>(Shape{T, 1, H, W});
    out.human_pose.reserve(static_cast<size_t>(T));

    const Rgb bg{0.90f, 0.90f, 0.93f};
    for (int64_t t = 0; t < T; ++t) {
        const Figure fig = figure_at(body, spec.motion, t);

        Tensor<float> base(Shape{3, H, W});
        const int64_t hw = H * W;
        for (int64_t p = 0; p < hw; ++p) {
            base[p] = bg.r;
            base[hw + p] = bg.g;
            base[2 * hw + p] = bg.b;
        }
        Painter body_pt{&base, nullptr, H, W, 0.0};
        draw_body(body_pt, fig);

        // Coverage of both garments, padded by 1 px, defines the mask.
        std::vector<float> cover(static_cast<size_t>(hw), 0.f);
        Painter cover_pt{nullptr, &cover, H, W, 1.0};
        draw_garment(cover_pt, fig, spec.garment_kind, src_tex, src_c0, src_c1, s);
        draw_garment(cover_pt, fig, spec.garment_kind, spec.texture, spec.palette[0], spec.palette[1], s);

        Tensor<float> src = base;
        Painter src_pt{&src, nullptr, H, W, 0.0};
        draw_garment(src_pt, fig, spec.garment_kind, src_tex, src_c0, src_c1, s);

        Tensor<float> tgt = base;
        Painter tgt_pt{&tgt, nullptr, H, W, 0.0};
        draw_garment(tgt_pt, fig, spec.garment_kind, spec.texture, spec.palette[0], spec.palette[1], s);

        quantize_u8_grid(src);
        quantize_u8_grid(tgt);

        for (int64_t p = 0; p < hw; ++p) {
            const float m = cover[static_cast<size_t>(p)] > 0.f ? 1.f : 0.f;
            out.agnostic_mask[t * hw + p] = m;
            for (int c = 0; c < 3; ++c) {
                const float sv = src[c * hw + p];
                const float tv = tgt[c * hw + p];
                out.source_video[(t * 3 + c) * hw + p] = sv;
                out.target_video[(t * 3 + c) * hw + p] = m > 0.f ? tv : sv;
                out.agnostic_video[(t * 3 + c) * hw + p] =
                    m > 0.f ? 128.f / 255.f : sv;
            }
        }

        SkeletonPose hp = pose_from_figure(fig, SkeletonKind::human);
        for (const auto& jt : hp.joints)
            if (jt.x < 0 || jt.x > static_cast<float>(W - 1) || jt.y < 0 ||
                jt.y > static_cast<float>(H - 1))
                throw ConfigError("canvas too narrow for the articulated figure; use at least 48 px width per 64 px height");
        out.human_pose.push_back(std::move(hp));
    }

    // Product shot: neutral pose, garment only, light background.
    const Figure neutral = figure_at(body, spec.motion, 0, true);
    out.garment_image = Tensor<float>(Shape{3, H, W});
    const int64_t hw = H * W;
    for (int64_t p = 0; p < hw; ++p) {
        out.garment_image[p] = 0.96f;
        out.garment_image[hw + p] = 0.96f;
        out.garment_image[2 * hw + p] = 0.96f;
    }
    Painter shot_pt{&out.garment_image, nullptr, H, W, 0.0};
    draw_garment(shot_pt, neutral, spec.garment_kind, spec.texture, spec.palette[0], spec.palette[1], s);
    quantize_u8_grid(out.garment_image);
    out.garment_pose = pose_from_figure(neutral, garment_skeleton_kind(spec.garment_kind));
    return out;
}

// ---- dataset layout ----
//
//   <root>/<sample_id>/{source_%04d.png, target_%04d.png, agnostic_%04d.png,
//                       mask_%04d.png, garment.png, poses.txt}
//   poses.txt: one line per landmark: `frame_idx joint_idx x y present`;
//   garment landmarks use frame_idx = -1.
//   manifest.txt: `<sample_dir> <garment_kind>` per line.

struct ManifestEntry {
    std::string dir;
    GarmentKind kind = GarmentKind::upper;
};

namespace synth_detail {

inline std::string frame_name(const char* stem, int64_t idx) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%04lld.png", stem, static_cast<long long>(idx));
    return buf;
}

inline void write_pose_lines(std::ostream& os, int64_t frame_idx, const SkeletonPose& p) {
    for (size_t j = 0; j < p.joints.size(); ++j) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%lld %zu %.9g %.9g %d\n",
                      static_cast<long long>(frame_idx), j, static_cast<double>(p.joints[j].x),
                      static_cast<double>(p.joints[j].y), p.joints[j].present);
        os << buf;
    }
}

}  // namespace synth_detail

inline void write_sample(const TryOnSample& sample, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir.string());
    const int64_t T = sample.source_video.shape[0];
    const int64_t H = sample.source_video.shape[2], W = sample.source_video.shape[3];
    const int64_t chw = 3 * H * W;
    auto frame3 = [&](const Tensor<float>& v, int64_t t) {
        Tensor<float> f(Shape{3, H, W});
        std::copy_n(v.ptr() + t * chw, chw, f.ptr());
        return f;
    };
    for (int64_t t = 0; t < T; ++t) {
        write_png(dir / synth_detail::frame_name("source", t), to_image_u8(frame3(sample.source_video, t)));
        write_png(dir / synth_detail::frame_name("target", t), to_image_u8(frame3(sample.target_video, t)));
        write_png(dir / synth_detail::frame_name("agnostic", t), to_image_u8(frame3(sample.agnostic_video, t)));
        Tensor<float> m(Shape{1, H, W});
        std::copy_n(sample.agnostic_mask.ptr() + t * H * W, H * W, m.ptr());
        write_png(dir / synth_detail::frame_name("mask", t), to_image_u8(m));
    }
    write_png(dir / "garment.png", to_image_u8(sample.garment_image));
    std::ofstream poses(dir / "poses.txt");
    if (!poses) throw IoError("cannot write poses: " + (dir / "poses.txt").string());
    for (int64_t t = 0; t < T; ++t) synth_detail::write_pose_lines(poses, t, sample.human_pose[static_cast<size_t>(t)]);
    synth_detail::write_pose_lines(poses, -1, sample.garment_pose);
    if (!poses) throw IoError("write failed: " + (dir / "poses.txt").string());
}

// Writes one directory per spec plus a manifest; returns the manifest path.
inline std::filesystem::path write_dataset(const std::vector<SceneSpec>& specs,
                                           const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create dataset root: " + root.string());
    const fs::path manifest_path = root / "manifest.txt";
    std::ofstream manifest(manifest_path);
    if (!manifest) throw IoError("cannot write manifest: " + manifest_path.string());
    for (size_t i = 0; i < specs.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04zu", i);
        write_sample(generate_sample(specs[i]), root / name);
        manifest << name << " " << to_string(specs[i].garment_kind) << "\n";
    }
    manifest.close();
    if (manifest.fail()) throw IoError("write failed: " + manifest_path.string());
    return manifest_path;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw IoError("cannot read manifest: " + manifest_path.string());
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        ManifestEntry e;
        std::string kind;
        is >> e.dir >> kind;
        if (e.dir.empty() || kind.empty()) throw IoError("malformed manifest line: " + line);
        e.kind = garment_kind_from_string(kind);
        entries.push_back(std::move(e));
    }
    return entries;
}

inline std::pair<std::vector<SkeletonPose>, SkeletonPose> read_poses_txt(
    const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read poses: " + path.string());
    struct Row {
        int64_t frame;
        int64_t joint;
        float x, y;
        int present;
    };
    std::vector<Row> rows;
    int64_t max_frame = -1;
    int64_t garment_joints = 0;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        Row r;
        std::istringstream is(line);
        if (!(is >> r.frame >> r.joint >> r.x >> r.y >> r.present))
            throw IoError("malformed pose line: " + line);
        max_frame = std::max(max_frame, r.frame);
        if (r.frame == -1) garment_joints = std::max(garment_joints, r.joint + 1);
        rows.push_back(r);
    }
    SkeletonKind gkind;
    switch (garment_joints) {
        case 9: gkind = SkeletonKind::garment_upper; break;
        case 6: gkind = SkeletonKind::garment_lower; break;
        case 11: gkind = SkeletonKind::garment_dress; break;
        default:
            throw IoError("poses.txt: unexpected garment joint count " + std::to_string(garment_joints));
    }
    std::vector<SkeletonPose> human(static_cast<size_t>(max_frame + 1), SkeletonPose::empty(SkeletonKind::human));
    SkeletonPose garment = SkeletonPose::empty(gkind);
    for (const Row& r : rows) {
        SkeletonPose& p = r.frame == -1 ? garment : human[static_cast<size_t>(r.frame)];
        if (r.joint < 0 || r.joint >= static_cast<int64_t>(p.joints.size()))
            throw IoError("poses.txt: joint index out of range");
        p.joints[static_cast<size_t>(r.joint)] = PoseJoint{r.x, r.y, r.present};
    }
    return {std::move(human), garment};
}

inline TryOnSample read_sample(const std::filesystem::path& dir) {
    TryOnSample s;
    auto [human, garment] = read_poses_txt(dir / "poses.txt");
    s.human_pose = std::move(human);
    s.garment_pose = garment;
    const int64_t T = static_cast<int64_t>(s.human_pose.size());
    if (T == 0) throw IoError("sample has no frames: " + dir.string());
    const ImageU8 g = read_png(dir / "garment.png");
    s.garment_image = from_image_u8<float>(g);
    const int64_t H = g.height, W = g.width;
    s.source_video = Tensor<float>(Shape{T, 3, H, W});
    s.target_video = Tensor<float>(Shape{T, 3, H, W});
    s.agnostic_video = Tensor<float>(Shape{T, 3, H, W});
    s.agnostic_mask = Tensor<float>(Shape{T, 1, H, W});
    for (int64_t t = 0; t < T; ++t) {
        auto load3 = [&](const char* stem, Tensor<float>& dst) {
            const Tensor<float> f = from_image_u8<float>(read_png(dir / synth_detail::frame_name(stem, t)));
            if (f.shape[1] != H || f.shape[2] != W) throw IoError("frame size mismatch in " + dir.string());
            std::copy_n(f.ptr(), 3 * H * W, dst.ptr() + t * 3 * H * W);
        };
        load3("source", s.source_video);
        load3("target", s.target_video);
        load3("agnostic", s.agnostic_video);
        const Tensor<float> m = from_image_u8<float>(read_png(dir / synth_detail::frame_name("mask", t)));
        std::copy_n(m.ptr(), H * W, s.agnostic_mask.ptr() + t * H * W);
    }
    return s;
}

}  // namespace dpidm
