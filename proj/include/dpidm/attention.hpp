#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "dpidm/pose.hpp"
#include "dpidm/tape.hpp"
#include "dpidm/tensor.hpp"

namespace dpidm {

enum class ClipMode { image, video };

// Parameters of one attention sub-block (PASA, TSA, CA or PATA). Projections
// are [d_in, d]; for cross-attention the key/value input dim is d_cond.
template <typename T>
struct AttentionBlockParams {
    Tensor<T> q_w, q_b;
    Tensor<T> k_w, k_b;
    Tensor<T> v_w, v_b;
    Tensor<T> o_w, o_b;
    int head_count = 4;
    std::optional<PoseAdapterParams<T>> adapter;

    // zero_out zero-initializes the output projection so the sub-block starts
    // as an identity under its residual connection (used for TSA and PATA).
    static AttentionBlockParams init(int64_t d, int64_t d_kv, int heads, Rng& rng,
                                     bool zero_out = false,
                                     std::optional<int64_t> adapter_d_in = std::nullopt,
                                     int64_t adapter_ratio = 4) {
        if (d % heads) throw ConfigError("attention dim not divisible by head count");
        AttentionBlockParams p;
        const T s_q = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
        const T s_kv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_kv)));
        p.q_w = Tensor<T>::randn(Shape{d, d}, s_q, rng);
        p.q_b = Tensor<T>(Shape{d});
        p.k_w = Tensor<T>::randn(Shape{d_kv, d}, s_kv, rng);
        p.k_b = Tensor<T>(Shape{d});
        p.v_w = Tensor<T>::randn(Shape{d_kv, d}, s_kv, rng);
        p.v_b = Tensor<T>(Shape{d});
        p.o_w = zero_out ? Tensor<T>(Shape{d, d}) : Tensor<T>::randn(Shape{d, d}, s_q, rng);
        p.o_b = Tensor<T>(Shape{d});
        p.head_count = heads;
        if (adapter_d_in) p.adapter = PoseAdapterParams<T>::init(*adapter_d_in, d, adapter_ratio, rng);
        return p;
    }
};

// Post-softmax attention probabilities of a PASA block, averaged over heads
// and restricted to main-branch query rows: [T, S_h, S_h + S_g].
template <typename T>
struct AttentionRecord {
    int layer_id = 0;
    Tensor<T> probs;
};

struct AttnV {
    Value q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
    int heads = 4;
    std::optional<AdapterV> adapter;
};

template <typename T>
AttnV attn_leaves(Tape<T>& tape, const AttentionBlockParams<T>& p) {
    AttnV v;
    v.q_w = tape.leaf(p.q_w);
    v.q_b = tape.leaf(p.q_b);
    v.k_w = tape.leaf(p.k_w);
    v.k_b = tape.leaf(p.k_b);
    v.v_w = tape.leaf(p.v_w);
    v.v_b = tape.leaf(p.v_b);
    v.o_w = tape.leaf(p.o_w);
    v.o_b = tape.leaf(p.o_b);
    v.heads = p.head_count;
    if (p.adapter) v.adapter = adapter_leaves(tape, *p.adapter);
    return v;
}

namespace attn_detail {

// [B,S,d] -> [B*heads, S, d/heads]
template <typename T>
Value split_heads(Tape<T>& tape, Value x, int heads) {
    const Shape& s = tape.shape(x);
    const int64_t B = s[0], S = s[1], d = s[2];
    if (d % heads) throw ShapeError("token dim " + std::to_string(d) + " not divisible by heads");
    Value r = tape.reshape(x, Shape{B, S, heads, d / heads});
    r = tape.permute(r, {0, 2, 1, 3});
    return tape.reshape(r, Shape{B * heads, S, d / heads});
}

// [B*heads, S, dh] -> [B, S, d]
template <typename T>
Value merge_heads(Tape<T>& tape, Value x, int64_t B, int heads) {
    const Shape& s = tape.shape(x);
    const int64_t S = s[1], dh = s[2];
    Value r = tape.reshape(x, Shape{B, heads, S, dh});
    r = tape.permute(r, {0, 2, 1, 3});
    return tape.reshape(r, Shape{B, S, heads * dh});
}

template <typename T>
T head_scale(const Shape& qshape, int heads) {
    return static_cast<T>(1.0 / std::sqrt(static_cast<double>(qshape[2] / heads)));
}

}  // namespace attn_detail

struct PasaValues {
    Value out;     // [T, S_h, d]
    Value record;  // [T, S_h, S_h + S_g]
};

// Pose-aware spatial attention. Per frame j the token set is the spatial
// concatenation [f_h^(j), f_g]; q, k, v are all built from f + Adpt(p) and only
// the main-branch rows are returned.
template <typename T>
PasaValues pasa_tape(Tape<T>& tape, Value f_h, Value f_g, Value p_h, Value p_g, const AttnV& a) {
    const Shape& fs = tape.shape(f_h);   // [T, S_h, d]
    const Shape& gs = tape.shape(f_g);   // [S_g, d]
    if (fs.size() != 3 || gs.size() != 2 || gs[1] != fs[2])
        throw ShapeError("pasa: f_h " + shape_str(fs) + " vs f_g " + shape_str(gs));
    const int64_t T_ = fs[0], S_h = fs[1], d = fs[2], S_g = gs[0];
    const int64_t S = S_h + S_g;

    // interleave [f_h^(j), f_g] across frames
    std::vector<Value> items;
    items.reserve(static_cast<size_t>(2 * T_));
    for (int64_t j = 0; j < T_; ++j) {
        items.push_back(tape.reshape(tape.slice(f_h, 0, j, j + 1), Shape{S_h, d}));
        items.push_back(f_g);
    }
    Value f = tape.concat(0, items);  // [T*S, d]

    if (a.adapter) {
        const Shape& ph = tape.shape(p_h);  // [T, S_h, d_p]
        const Shape& pg = tape.shape(p_g);  // [S_g, d_p]
        if (ph.size() != 3 || ph[0] != T_ || ph[1] != S_h || pg.size() != 2 || pg[0] != S_g ||
            pg[1] != ph[2])
            throw ShapeError("pasa: pose token shapes " + shape_str(ph) + " / " + shape_str(pg) +
                             " do not match features");
        std::vector<Value> pitems;
        pitems.reserve(static_cast<size_t>(2 * T_));
        const int64_t d_p = ph[2];
        for (int64_t j = 0; j < T_; ++j) {
            pitems.push_back(tape.reshape(tape.slice(p_h, 0, j, j + 1), Shape{S_h, d_p}));
            pitems.push_back(p_g);
        }
        Value p = tape.concat(0, pitems);  // [T*S, d_p]
        f = tape.add(f, adapt_tape(tape, p, *a.adapter));
    }

    Value f3 = tape.reshape(f, Shape{T_, S, d});
    std::vector<Value> main_items;
    main_items.reserve(static_cast<size_t>(T_));
    for (int64_t j = 0; j < T_; ++j)
        main_items.push_back(tape.reshape(tape.slice(tape.reshape(tape.slice(f3, 0, j, j + 1), Shape{S, d}), 0, 0, S_h), Shape{1, S_h, d}));
    Value f_main = tape.concat(0, main_items);  // [T, S_h, d]

    Value q = tape.linear(tape.reshape(f_main, Shape{T_ * S_h, d}), a.q_w, a.q_b);
    Value k = tape.linear(f, a.k_w, a.k_b);
    Value v = tape.linear(f, a.v_w, a.v_b);

    Value qh = attn_detail::split_heads(tape, tape.reshape(q, Shape{T_, S_h, d}), a.heads);
    Value kh = attn_detail::split_heads(tape, tape.reshape(k, Shape{T_, S, d}), a.heads);
    Value vh = attn_detail::split_heads(tape, tape.reshape(v, Shape{T_, S, d}), a.heads);
    auto [oh, probs] = tape.attention(qh, kh, vh, attn_detail::head_scale<T>(Shape{T_, S_h, d}, a.heads));

    Value o = attn_detail::merge_heads(tape, oh, T_, a.heads);  // [T, S_h, d]
    o = tape.linear(tape.reshape(o, Shape{T_ * S_h, d}), a.o_w, a.o_b);

    Value rec = tape.reshape(probs, Shape{T_, a.heads, S_h, S});
    rec = tape.mean_axis(rec, 1);  // head-averaged map

    return PasaValues{tape.reshape(o, Shape{T_, S_h, d}), rec};
}

// Temporal-shift attention: keys/values of frame t are [h^(t), h^(t-1..t-L)]
// with frame 0 replicated for negative indices.
template <typename T>
Value tsa_tape(Tape<T>& tape, Value h, int window, const AttnV& a) {
    if (window < 0) throw ConfigError("tsa: window must be >= 0");
    const Shape& s = tape.shape(h);  // [T, S, d]
    if (s.size() != 3) throw ShapeError("tsa: expected [T,S,d], got " + shape_str(s));
    const int64_t T_ = s[0], S = s[1], d = s[2];

    Value h2 = tape.reshape(h, Shape{T_ * S, d});
    Value q = tape.linear(h2, a.q_w, a.q_b);
    Value k = tape.linear(h2, a.k_w, a.k_b);
    Value v = tape.linear(h2, a.v_w, a.v_b);
    Value k3 = tape.reshape(k, Shape{T_, S, d});
    Value v3 = tape.reshape(v, Shape{T_, S, d});

    auto gather = [&](Value x3) {
        std::vector<Value> items;
        items.reserve(static_cast<size_t>(T_ * (1 + window)));
        for (int64_t t = 0; t < T_; ++t) {
            items.push_back(tape.slice(x3, 0, t, t + 1));
            for (int l = 1; l <= window; ++l) {
                const int64_t src = std::max<int64_t>(0, t - l);
                items.push_back(tape.slice(x3, 0, src, src + 1));
            }
        }
        Value cat = tape.concat(0, items);  // [T*(1+L), S, d]
        return tape.reshape(cat, Shape{T_, (1 + window) * S, d});
    };
    Value kk = gather(k3);
    Value vv = gather(v3);

    Value qh = attn_detail::split_heads(tape, tape.reshape(q, Shape{T_, S, d}), a.heads);
    Value kh = attn_detail::split_heads(tape, kk, a.heads);
    Value vh = attn_detail::split_heads(tape, vv, a.heads);
    auto [oh, probs] = tape.attention(qh, kh, vh, attn_detail::head_scale<T>(s, a.heads));
    (void)probs;
    Value o = attn_detail::merge_heads(tape, oh, T_, a.heads);
    o = tape.linear(tape.reshape(o, Shape{T_ * S, d}), a.o_w, a.o_b);
    return tape.reshape(o, Shape{T_, S, d});
}

// Cross-attention onto garment embedding tokens, identical across frames.
template <typename T>
Value cross_attn_tape(Tape<T>& tape, Value h, Value c_g, const AttnV& a) {
    const Shape& s = tape.shape(h);   // [T, S, d]
    const Shape& cs = tape.shape(c_g);  // [S_c, d_c]
    if (s.size() != 3 || cs.size() != 2) throw ShapeError("cross_attn shapes");
    const int64_t T_ = s[0], S = s[1], d = s[2], S_c = cs[0];

    Value q = tape.linear(tape.reshape(h, Shape{T_ * S, d}), a.q_w, a.q_b);
    Value k = tape.linear(c_g, a.k_w, a.k_b);  // [S_c, d]
    Value v = tape.linear(c_g, a.v_w, a.v_b);

    Value qh = attn_detail::split_heads(tape, tape.reshape(q, Shape{T_, S, d}), a.heads);
    auto kv_heads = [&](Value x) {
        Value r = attn_detail::split_heads(tape, tape.reshape(x, Shape{1, S_c, d}), a.heads);
        // [heads, S_c, dh] -> tile over frames -> [T*heads, S_c, dh]
        r = tape.tile0(r, T_);
        return tape.reshape(r, Shape{T_ * a.heads, S_c, d / a.heads});
    };
    auto [oh, probs] = tape.attention(qh, kv_heads(k), kv_heads(v),
                                      attn_detail::head_scale<T>(s, a.heads));
    (void)probs;
    Value o = attn_detail::merge_heads(tape, oh, T_, a.heads);
    o = tape.linear(tape.reshape(o, Shape{T_ * S, d}), a.o_w, a.o_b);
    return tape.reshape(o, Shape{T_, S, d});
}

// Pose-aware temporal attention: h' = h + Adpt(p_h), then self-attention
// across frames at each spatial location.
template <typename T>
Value pata_tape(Tape<T>& tape, Value h, Value p_h, const AttnV& a) {
    const Shape& s = tape.shape(h);  // [T, S, d]
    if (s.size() != 3) throw ShapeError("pata: expected [T,S,d]");
    const int64_t T_ = s[0], S = s[1], d = s[2];

    Value x = h;
    if (a.adapter) {
        const Shape& ps = tape.shape(p_h);
        if (ps.size() != 3 || ps[0] != T_ || ps[1] != S)
            throw ShapeError("pata: pose tokens " + shape_str(ps) + " vs features " + shape_str(s));
        Value ad = adapt_tape(tape, tape.reshape(p_h, Shape{T_ * S, ps[2]}), *a.adapter);
        x = tape.add(h, tape.reshape(ad, Shape{T_, S, d}));
    }
    Value xt = tape.permute(x, {1, 0, 2});  // [S, T, d]
    Value q = tape.linear(tape.reshape(xt, Shape{S * T_, d}), a.q_w, a.q_b);
    Value k = tape.linear(tape.reshape(xt, Shape{S * T_, d}), a.k_w, a.k_b);
    Value v = tape.linear(tape.reshape(xt, Shape{S * T_, d}), a.v_w, a.v_b);
    Value qh = attn_detail::split_heads(tape, tape.reshape(q, Shape{S, T_, d}), a.heads);
    Value kh = attn_detail::split_heads(tape, tape.reshape(k, Shape{S, T_, d}), a.heads);
    Value vh = attn_detail::split_heads(tape, tape.reshape(v, Shape{S, T_, d}), a.heads);
    auto [oh, probs] = tape.attention(qh, kh, vh, attn_detail::head_scale<T>(s, a.heads));
    (void)probs;
    Value o = attn_detail::merge_heads(tape, oh, S, a.heads);  // [S, T, d]
    o = tape.linear(tape.reshape(o, Shape{S * T_, d}), a.o_w, a.o_b);
    return tape.permute(tape.reshape(o, Shape{S, T_, d}), {1, 0, 2});
}

template <typename T>
struct HierBlockParams {
    AttentionBlockParams<T> pasa, tsa, ca, pata;

    static HierBlockParams init(int64_t d, int64_t d_pose, int64_t d_cond, int heads,
                                int64_t adapter_ratio, Rng& rng) {
        HierBlockParams p;
        p.pasa = AttentionBlockParams<T>::init(d, d, heads, rng, false, d_pose, adapter_ratio);
        p.tsa = AttentionBlockParams<T>::init(d, d, heads, rng, true);
        p.ca = AttentionBlockParams<T>::init(d, d_cond, heads, rng, false);
        p.pata = AttentionBlockParams<T>::init(d, d, heads, rng, true, d_pose, adapter_ratio);
        return p;
    }
};

struct HierV {
    AttnV pasa, tsa, ca, pata;
    int tsa_window = 1;
};

template <typename T>
HierV hier_leaves(Tape<T>& tape, const HierBlockParams<T>& p, int tsa_window) {
    return HierV{attn_leaves(tape, p.pasa), attn_leaves(tape, p.tsa), attn_leaves(tape, p.ca),
                 attn_leaves(tape, p.pata), tsa_window};
}

// PASA -> TSA -> CA -> PATA with a residual connection around each sub-block.
// In image mode TSA and PATA are skipped entirely.
template <typename T>
PasaValues hier_block_tape(Tape<T>& tape, Value f_h, Value f_g, Value p_h, Value p_g, Value c_g,
                           ClipMode mode, const HierV& blk) {
    if (mode == ClipMode::image && tape.shape(f_h)[0] != 1)
        throw ShapeError("hier_block: image mode requires T == 1");
    PasaValues ps = pasa_tape(tape, f_h, f_g, p_h, p_g, blk.pasa);
    Value x = tape.add(f_h, ps.out);
    if (mode == ClipMode::video) x = tape.add(x, tsa_tape(tape, x, blk.tsa_window, blk.tsa));
    x = tape.add(x, cross_attn_tape(tape, x, c_g, blk.ca));
    if (mode == ClipMode::video) x = tape.add(x, pata_tape(tape, x, p_h, blk.pata));
    return PasaValues{x, ps.record};
}

// ---- tensor-level wrappers (tests and standalone use) ----

template <typename T>
struct PasaResult {
    Tensor<T> out;
    AttentionRecord<T> record;
};

template <typename T>
PasaResult<T> pasa(const Tensor<T>& f_h, const Tensor<T>& f_g, const Tensor<T>& p_h,
                   const Tensor<T>& p_g, const AttentionBlockParams<T>& params) {
    Tape<T> tape(false);
    PasaValues r = pasa_tape(tape, tape.constant(f_h), tape.constant(f_g), tape.constant(p_h),
                             tape.constant(p_g), attn_leaves(tape, params));
    return PasaResult<T>{tape.val(r.out), AttentionRecord<T>{0, tape.val(r.record)}};
}

template <typename T>
struct TsaResult {
    Tensor<T> out;
    int64_t keys_per_query = 0;
};

template <typename T>
TsaResult<T> tsa(const Tensor<T>& h, int window, const AttentionBlockParams<T>& params) {
    Tape<T> tape(false);
    Value out = tsa_tape(tape, tape.constant(h), window, attn_leaves(tape, params));
    return TsaResult<T>{tape.val(out), h.shape[1] * (1 + window)};
}

template <typename T>
Tensor<T> cross_attn(const Tensor<T>& h, const Tensor<T>& c_g, const AttentionBlockParams<T>& params) {
    Tape<T> tape(false);
    Value out = cross_attn_tape(tape, tape.constant(h), tape.constant(c_g), attn_leaves(tape, params));
    return tape.val(out);
}

template <typename T>
Tensor<T> pata(const Tensor<T>& h, const Tensor<T>& p_h, const AttentionBlockParams<T>& params) {
    Tape<T> tape(false);
    Value out = pata_tape(tape, tape.constant(h), tape.constant(p_h), attn_leaves(tape, params));
    return tape.val(out);
}

template <typename T>
PasaResult<T> hier_block(const Tensor<T>& f_h, const Tensor<T>& f_g, const Tensor<T>& p_h,
                         const Tensor<T>& p_g, const Tensor<T>& c_g, ClipMode mode,
                         const HierBlockParams<T>& params, int tsa_window) {
    Tape<T> tape(false);
    PasaValues r = hier_block_tape(tape, tape.constant(f_h), tape.constant(f_g), tape.constant(p_h),
                                   tape.constant(p_g), tape.constant(c_g), mode,
                                   hier_leaves(tape, params, tsa_window));
    return PasaResult<T>{tape.val(r.out), AttentionRecord<T>{0, tape.val(r.record)}};
}

}  // namespace dpidm
