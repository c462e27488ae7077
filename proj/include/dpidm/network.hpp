#pragma once

#include <array>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpidm/attention.hpp"
#include "dpidm/pose.hpp"
#include "dpidm/tape.hpp"
#include "dpidm/tensor.hpp"

namespace dpidm {

// Parameter groups used by the joint training phase gating. Classification is
// by name: attention sub-block names carry .pasa./.tsa./.ca./.pata. segments.
enum class ParamGroup { shared, pasa, ca, tsa, pata, codec };

inline ParamGroup param_group(const std::string& name) {
    if (name.rfind("codec.", 0) == 0) return ParamGroup::codec;
    if (name.find(".pasa.") != std::string::npos) return ParamGroup::pasa;
    if (name.find(".tsa.") != std::string::npos) return ParamGroup::tsa;
    if (name.find(".ca.") != std::string::npos) return ParamGroup::ca;
    if (name.find(".pata.") != std::string::npos) return ParamGroup::pata;
    return ParamGroup::shared;
}

template <typename T>
class ParamStore {
  public:
    Tensor<T>& add(const std::string& name, Tensor<T> v) {
        if (map_.count(name)) throw Error("duplicate parameter: " + name);
        order_.push_back(name);
        return map_.emplace(name, std::move(v)).first->second;
    }
    bool has(const std::string& name) const { return map_.count(name) > 0; }
    Tensor<T>& at(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end()) throw Error("unknown parameter: " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw Error("unknown parameter: " + name);
        return it->second;
    }
    const std::vector<std::string>& order() const { return order_; }
    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& name : order_) n += map_.at(name).numel();
        return n;
    }

  private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor<T>> map_;
};

struct ModelConfig {
    int64_t canvas_h = 64;
    int64_t canvas_w = 48;
    std::vector<int64_t> widths{32, 64, 128};
    int64_t d_pose = 32;
    int64_t d_cond = 32;
    int heads = 4;
    int tsa_window = 1;
    int64_t adapter_ratio = 4;
    int groups = 8;
    int64_t temb_dim = 64;

    static constexpr int64_t kTembBase = 32;
    static constexpr int64_t kLatentChannels = 4;
    static constexpr int64_t kMainInChannels = 4 + 4 + 1;  // noisy latent + agnostic latent + mask

    int64_t latent_h() const { return canvas_h / 4; }
    int64_t latent_w() const { return canvas_w / 4; }
    int64_t cond_tokens() const {
        auto up = [](int64_t v) { return (v + 15) / 16; };
        return up(canvas_h) * up(canvas_w);
    }

    void validate() const {
        if (widths.size() != 3) throw ConfigError("model.widths must have 3 entries");
        if (canvas_h % 16 || canvas_w % 16)
            throw ConfigError("canvas " + std::to_string(canvas_h) + "x" + std::to_string(canvas_w) +
                              " must be divisible by 16 (latent factor 4 times two U-Net downsamples)");
        for (int64_t w : widths) {
            if (w % groups) throw ConfigError("model width not divisible by norm groups");
            if (w % heads) throw ConfigError("model width not divisible by head count");
        }
        if (tsa_window < 0) throw ConfigError("tsa_window must be >= 0");
    }
};

namespace net_detail {

template <typename T>
Tensor<T> he_conv(int64_t co, int64_t ci, int64_t k, Rng& rng) {
    return Tensor<T>::randn(Shape{co, ci, k, k},
                            static_cast<T>(std::sqrt(2.0 / static_cast<double>(ci * k * k))), rng);
}

template <typename T>
void add_conv(ParamStore<T>& ps, const std::string& prefix, int64_t co, int64_t ci, int64_t k,
              Rng& rng, bool zero = false) {
    ps.add(prefix + ".w", zero ? Tensor<T>(Shape{co, ci, k, k}) : he_conv<T>(co, ci, k, rng));
    ps.add(prefix + ".b", Tensor<T>(Shape{co}));
}

template <typename T>
void add_linear(ParamStore<T>& ps, const std::string& prefix, int64_t din, int64_t dout, Rng& rng) {
    ps.add(prefix + "_w", Tensor<T>::randn(Shape{din, dout},
                                           static_cast<T>(1.0 / std::sqrt(static_cast<double>(din))), rng));
    ps.add(prefix + "_b", Tensor<T>(Shape{dout}));
}

template <typename T>
void add_resblock(ParamStore<T>& ps, const std::string& prefix, int64_t cin, int64_t cout,
                  int64_t temb_dim, Rng& rng) {
    ps.add(prefix + ".gn1_g", Tensor<T>::full(Shape{cin}, T(1)));
    ps.add(prefix + ".gn1_b", Tensor<T>(Shape{cin}));
    add_conv(ps, prefix + ".conv1", cout, cin, 3, rng);
    add_linear(ps, prefix + ".temb", temb_dim, cout, rng);
    ps.add(prefix + ".gn2_g", Tensor<T>::full(Shape{cout}, T(1)));
    ps.add(prefix + ".gn2_b", Tensor<T>(Shape{cout}));
    add_conv(ps, prefix + ".conv2", cout, cout, 3, rng);
    if (cin != cout) add_conv(ps, prefix + ".skip", cout, cin, 1, rng);
}

template <typename T>
void add_attn(ParamStore<T>& ps, const std::string& prefix, const AttentionBlockParams<T>& p) {
    ps.add(prefix + ".q_w", p.q_w);
    ps.add(prefix + ".q_b", p.q_b);
    ps.add(prefix + ".k_w", p.k_w);
    ps.add(prefix + ".k_b", p.k_b);
    ps.add(prefix + ".v_w", p.v_w);
    ps.add(prefix + ".v_b", p.v_b);
    ps.add(prefix + ".o_w", p.o_w);
    ps.add(prefix + ".o_b", p.o_b);
    if (p.adapter) {
        ps.add(prefix + ".adapt.down_w", p.adapter->w_down);
        ps.add(prefix + ".adapt.down_b", p.adapter->b_down);
        ps.add(prefix + ".adapt.up_w", p.adapter->w_up);
        ps.add(prefix + ".adapt.up_b", p.adapter->b_up);
    }
}

}  // namespace net_detail

// The full desk-scale model: main U-Net (9-channel input), garment U-Net
// (4-channel), pose encoder, garment embedding encoder, and latent codec.
template <typename T>
struct Model {
    ModelConfig cfg;
    ParamStore<T> params;

    static Model init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng(mix_seed(seed, 0x5EED));
        ParamStore<T>& ps = m.params;
        const int64_t w0 = cfg.widths[0], w1 = cfg.widths[1], w2 = cfg.widths[2];

        auto add_unet = [&](const std::string& u, int64_t in_ch, bool pose_aware) {
            net_detail::add_linear(ps, u + ".temb.l1", ModelConfig::kTembBase, cfg.temb_dim, rng);
            net_detail::add_linear(ps, u + ".temb.l2", cfg.temb_dim, cfg.temb_dim, rng);
            net_detail::add_conv(ps, u + ".in_conv", w0, in_ch, 3, rng);
            net_detail::add_resblock(ps, u + ".e0.rb", w0, w0, cfg.temb_dim, rng);
            net_detail::add_conv(ps, u + ".down0", w1, w0, 3, rng);
            net_detail::add_resblock(ps, u + ".e1.rb", w1, w1, cfg.temb_dim, rng);
            net_detail::add_conv(ps, u + ".down1", w2, w1, 3, rng);
            net_detail::add_resblock(ps, u + ".mid.rb1", w2, w2, cfg.temb_dim, rng);
            net_detail::add_resblock(ps, u + ".mid.rb2", w2, w2, cfg.temb_dim, rng);
            net_detail::add_resblock(ps, u + ".d2.rb", 2 * w2, w2, cfg.temb_dim, rng);
            net_detail::add_conv(ps, u + ".up1", w1, w2, 3, rng);
            net_detail::add_resblock(ps, u + ".d1.rb", 2 * w1, w1, cfg.temb_dim, rng);
            net_detail::add_conv(ps, u + ".up0", w0, w1, 3, rng);
            net_detail::add_resblock(ps, u + ".d0.rb", 2 * w0, w0, cfg.temb_dim, rng);
            ps.add(u + ".out.gn_g", Tensor<T>::full(Shape{w0}, T(1)));
            ps.add(u + ".out.gn_b", Tensor<T>(Shape{w0}));
            // damped output conv: near-zero initial prediction without blocking
            // upstream gradients
            net_detail::add_conv(ps, u + ".out.conv", ModelConfig::kLatentChannels, w0, 3, rng);
            for (auto& v : ps.at(u + ".out.conv.w").data) v *= T(0.1);

            for (const char* stage : {"e1", "mid", "d2", "d1"}) {
                const int64_t d = (std::string(stage) == "e1" || std::string(stage) == "d1") ? w1 : w2;
                const std::string p = u + "." + stage + ".attn";
                if (pose_aware) {
                    HierBlockParams<T> blk = HierBlockParams<T>::init(d, cfg.d_pose, cfg.d_cond,
                                                                      cfg.heads, cfg.adapter_ratio, rng);
                    net_detail::add_attn(ps, p + ".pasa", blk.pasa);
                    net_detail::add_attn(ps, p + ".tsa", blk.tsa);
                    net_detail::add_attn(ps, p + ".ca", blk.ca);
                    net_detail::add_attn(ps, p + ".pata", blk.pata);
                } else {
                    net_detail::add_attn(ps, p + ".sa",
                                         AttentionBlockParams<T>::init(d, d, cfg.heads, rng));
                    net_detail::add_attn(ps, p + ".ca",
                                         AttentionBlockParams<T>::init(d, cfg.d_cond, cfg.heads, rng));
                }
            }
        };
        add_unet("main", ModelConfig::kMainInChannels, true);
        add_unet("garment", ModelConfig::kLatentChannels, false);

        {  // pose encoder: four convolutions, total stride 4
            const int64_t chans[5] = {skeleton::kPoseMapChannels, 16, 32, 64, cfg.d_pose};
            for (int i = 0; i < 4; ++i)
                net_detail::add_conv(ps, "posenc.conv" + std::to_string(i), chans[i + 1], chans[i], 3, rng);
        }
        {  // garment embedding encoder (CLIP stand-in), four stride-2 convs
            const int64_t chans[5] = {3, 16, 32, cfg.d_cond, cfg.d_cond};
            for (int i = 0; i < 4; ++i)
                net_detail::add_conv(ps, "gembed.conv" + std::to_string(i), chans[i + 1], chans[i], 3, rng);
            ps.add("gembed.null", Tensor<T>::randn(Shape{cfg.cond_tokens(), cfg.d_cond}, T(0.02), rng));
        }
        {  // latent codec
            net_detail::add_conv(ps, "codec.enc.conv0", 16, 3, 3, rng);
            net_detail::add_conv(ps, "codec.enc.conv1", 32, 16, 3, rng);
            net_detail::add_conv(ps, "codec.enc.conv2", ModelConfig::kLatentChannels, 32, 3, rng);
            net_detail::add_conv(ps, "codec.dec.conv0", 32, ModelConfig::kLatentChannels, 3, rng);
            net_detail::add_conv(ps, "codec.dec.conv1", 16, 32, 3, rng);
            net_detail::add_conv(ps, "codec.dec.conv2", 16, 16, 3, rng);
            net_detail::add_conv(ps, "codec.dec.conv3", 3, 16, 3, rng);
            ps.add("codec.norm_mean", Tensor<T>(Shape{ModelConfig::kLatentChannels}));
            ps.add("codec.norm_std", Tensor<T>::full(Shape{ModelConfig::kLatentChannels}, T(1)));
        }
        return m;
    }
};

// Tape-side view of the parameter store. Parameters for which `trainable`
// returns true become leaves (gradients tracked); the rest are constants.
template <typename T>
struct TapeModel {
    Tape<T>* tape = nullptr;
    const ModelConfig* cfg = nullptr;
    std::unordered_map<std::string, Value> vals;

    TapeModel(Tape<T>& tp, const Model<T>& m,
              const std::function<bool(const std::string&)>& trainable = nullptr) {
        tape = &tp;
        cfg = &m.cfg;
        vals.reserve(m.params.order().size() * 2);
        for (const auto& name : m.params.order()) {
            const Tensor<T>& t = m.params.at(name);
            vals.emplace(name, trainable && trainable(name) ? tp.leaf(t) : tp.constant(t));
        }
    }

    Value at(const std::string& name) const {
        auto it = vals.find(name);
        if (it == vals.end()) throw Error("unknown parameter: " + name);
        return it->second;
    }
};

namespace net_detail {

template <typename T>
Value conv(Tape<T>& tape, const TapeModel<T>& tm, const std::string& prefix, Value x, int stride,
           int pad) {
    return tape.conv2d(x, tm.at(prefix + ".w"), tm.at(prefix + ".b"), stride, pad);
}

template <typename T>
Value resblock(Tape<T>& tape, const TapeModel<T>& tm, const std::string& prefix, Value x,
               Value temb, int groups) {
    Value h = tape.group_norm(x, groups, tm.at(prefix + ".gn1_g"), tm.at(prefix + ".gn1_b"));
    h = tape.silu(h);
    h = conv(tape, tm, prefix + ".conv1", h, 1, 1);
    Value tb = tape.linear(temb, tm.at(prefix + ".temb_w"), tm.at(prefix + ".temb_b"));
    h = tape.add_bias_chan(h, tape.reshape(tb, Shape{tape.shape(tb)[1]}));
    h = tape.group_norm(h, groups, tm.at(prefix + ".gn2_g"), tm.at(prefix + ".gn2_b"));
    h = tape.silu(h);
    h = conv(tape, tm, prefix + ".conv2", h, 1, 1);
    Value skip = tm.vals.count(prefix + ".skip.w") ? conv(tape, tm, prefix + ".skip", x, 1, 0) : x;
    return tape.add(h, skip);
}

template <typename T>
AttnV attn_values(const TapeModel<T>& tm, const std::string& prefix, int heads) {
    AttnV v;
    v.q_w = tm.at(prefix + ".q_w");
    v.q_b = tm.at(prefix + ".q_b");
    v.k_w = tm.at(prefix + ".k_w");
    v.k_b = tm.at(prefix + ".k_b");
    v.v_w = tm.at(prefix + ".v_w");
    v.v_b = tm.at(prefix + ".v_b");
    v.o_w = tm.at(prefix + ".o_w");
    v.o_b = tm.at(prefix + ".o_b");
    v.heads = heads;
    if (tm.vals.count(prefix + ".adapt.down_w"))
        v.adapter = AdapterV{tm.at(prefix + ".adapt.down_w"), tm.at(prefix + ".adapt.down_b"),
                             tm.at(prefix + ".adapt.up_w"), tm.at(prefix + ".adapt.up_b")};
    return v;
}

// [N,C,Hs,Ws] <-> [N, Hs*Ws, C]
template <typename T>
Value to_tokens(Tape<T>& tape, Value x) {
    const Shape& s = tape.shape(x);
    Value p = tape.permute(x, {0, 2, 3, 1});
    return tape.reshape(p, Shape{s[0], s[2] * s[3], s[1]});
}

template <typename T>
Value from_tokens(Tape<T>& tape, Value tok, int64_t hs, int64_t ws) {
    const Shape& s = tape.shape(tok);
    Value p = tape.reshape(tok, Shape{s[0], hs, ws, s[2]});
    return tape.permute(p, {0, 3, 1, 2});
}

template <typename T>
Value timestep_embedding(Tape<T>& tape, const TapeModel<T>& tm, const std::string& u, int64_t t) {
    const int64_t base = ModelConfig::kTembBase;
    Tensor<T> sin_emb(Shape{1, base});
    const int64_t half = base / 2;
    for (int64_t k = 0; k < half; ++k) {
        const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
        sin_emb[k] = static_cast<T>(std::sin(static_cast<double>(t) * f));
        sin_emb[half + k] = static_cast<T>(std::cos(static_cast<double>(t) * f));
    }
    Value e = tape.constant(std::move(sin_emb));
    e = tape.linear(e, tm.at(u + ".temb.l1_w"), tm.at(u + ".temb.l1_b"));
    e = tape.silu(e);
    return tape.linear(e, tm.at(u + ".temb.l2_w"), tm.at(u + ".temb.l2_b"));
}

}  // namespace net_detail

// ---- latent codec ----

template <typename T>
Value codec_encode_tape(Tape<T>& tape, const TapeModel<T>& tm, Value x, bool normalize = true) {
    const Shape& s = tape.shape(x);
    if (s.size() != 4 || s[1] != 3) throw ShapeError("codec encode expects [N,3,H,W]");
    if (s[2] % 4 || s[3] % 4) throw ShapeError("codec encode: dims must be divisible by 4");
    Value h = net_detail::conv(tape, tm, "codec.enc.conv0", x, 2, 1);
    h = tape.silu(h);
    h = net_detail::conv(tape, tm, "codec.enc.conv1", h, 2, 1);
    h = tape.silu(h);
    h = net_detail::conv(tape, tm, "codec.enc.conv2", h, 1, 1);
    if (normalize) {
        h = tape.add_bias_chan(h, tape.scale(tm.at("codec.norm_mean"), T(-1)));
        const Tensor<T>& stdv = tape.val(tm.at("codec.norm_std"));
        Tensor<T> recip(stdv.shape);
        for (int64_t i = 0; i < stdv.numel(); ++i) recip[i] = T(1) / stdv[i];
        h = tape.mul_chan(h, tape.constant(std::move(recip)));
    }
    return h;
}

template <typename T>
Value codec_decode_tape(Tape<T>& tape, const TapeModel<T>& tm, Value z, bool normalize = true) {
    const Shape& s = tape.shape(z);
    if (s.size() != 4 || s[1] != ModelConfig::kLatentChannels)
        throw ShapeError("codec decode expects [N,4,h,w]");
    Value h = z;
    if (normalize) {
        // invert the encode-side standardization
        h = tape.mul_chan(h, tm.at("codec.norm_std"));
        h = tape.add_bias_chan(h, tm.at("codec.norm_mean"));
    }
    h = net_detail::conv(tape, tm, "codec.dec.conv0", h, 1, 1);
    h = tape.silu(h);
    h = tape.nearest_up2(h);
    h = net_detail::conv(tape, tm, "codec.dec.conv1", h, 1, 1);
    h = tape.silu(h);
    h = tape.nearest_up2(h);
    h = net_detail::conv(tape, tm, "codec.dec.conv2", h, 1, 1);
    h = tape.silu(h);
    h = net_detail::conv(tape, tm, "codec.dec.conv3", h, 1, 1);
    return tape.sigmoid(h);
}

template <typename T>
Tensor<T> encode_latent(const Model<T>& m, const Tensor<T>& video) {
    Tape<T> tape(false);
    TapeModel<T> tm(tape, m);
    return tape.val(codec_encode_tape(tape, tm, tape.constant(video)));
}

template <typename T>
Tensor<T> decode_latent(const Model<T>& m, const Tensor<T>& latent) {
    Tape<T> tape(false);
    TapeModel<T> tm(tape, m);
    return tape.val(codec_decode_tape(tape, tm, tape.constant(latent)));
}

// ---- garment embedding (CLIP image encoder stand-in) ----

template <typename T>
Value embed_garment_tape(Tape<T>& tape, const TapeModel<T>& tm, Value image) {
    const Shape& s = tape.shape(image);
    if (s.size() != 3 || s[0] != 3) throw ShapeError("embed_garment expects [3,H,W]");
    Value h = tape.reshape(image, Shape{1, 3, s[1], s[2]});
    for (int i = 0; i < 4; ++i) {
        h = net_detail::conv(tape, tm, "gembed.conv" + std::to_string(i), h, 2, 1);
        if (i + 1 < 4) h = tape.silu(h);
    }
    return tape.reshape(net_detail::to_tokens(tape, h), Shape{tape.shape(h)[2] * tape.shape(h)[3],
                                                              tape.shape(h)[1]});
}

template <typename T>
Tensor<T> embed_garment(const Model<T>& m, const Tensor<T>& image) {
    Tape<T> tape(false);
    TapeModel<T> tm(tape, m);
    return tape.val(embed_garment_tape(tape, tm, tape.constant(image)));
}

// ---- dual-branch denoiser ----

struct DenoiseValues {
    Value eps;                   // [T,4,h,w]
    std::vector<Value> records;  // PASA maps of the last two decoder layers
};

namespace net_detail {

// Garment branch forward; returns pre-attention token maps for each
// attention-bearing stage (e1, mid, d2, d1 order) plus nothing else.
template <typename T>
std::array<Value, 4> garment_features(Tape<T>& tape, const TapeModel<T>& tm, Value garment_latent,
                                      Value temb, Value c_g, int groups, int heads) {
    std::array<Value, 4> feats;
    auto attn_plain = [&](Value x, const std::string& stage) {
        const Shape& s = tape.shape(x);
        Value tok = to_tokens(tape, x);
        AttnV sa = attn_values(tm, "garment." + stage + ".attn.sa", heads);
        // window 0 == per-frame self-attention
        Value y = tape.add(tok, tsa_tape(tape, tok, 0, sa));
        AttnV ca = attn_values(tm, "garment." + stage + ".attn.ca", heads);
        y = tape.add(y, cross_attn_tape(tape, y, c_g, ca));
        return from_tokens(tape, y, s[2], s[3]);
    };
    auto grab = [&](Value x) {
        const Shape& s = tape.shape(x);
        return tape.reshape(to_tokens(tape, x), Shape{s[2] * s[3], s[1]});
    };

    Value x = conv(tape, tm, "garment.in_conv", garment_latent, 1, 1);
    Value e0 = resblock(tape, tm, "garment.e0.rb", x, temb, groups);
    Value x1 = conv(tape, tm, "garment.down0", e0, 2, 1);
    Value e1 = resblock(tape, tm, "garment.e1.rb", x1, temb, groups);
    feats[0] = grab(e1);
    Value e1a = attn_plain(e1, "e1");
    Value x2 = conv(tape, tm, "garment.down1", e1a, 2, 1);
    Value m = resblock(tape, tm, "garment.mid.rb1", x2, temb, groups);
    feats[1] = grab(m);
    Value ma = attn_plain(m, "mid");
    Value m2 = resblock(tape, tm, "garment.mid.rb2", ma, temb, groups);
    Value d2 = resblock(tape, tm, "garment.d2.rb", tape.concat(1, {m2, x2}), temb, groups);
    feats[2] = grab(d2);
    Value d2a = attn_plain(d2, "d2");
    Value u1 = conv(tape, tm, "garment.up1", tape.nearest_up2(d2a), 1, 1);
    Value d1 = resblock(tape, tm, "garment.d1.rb", tape.concat(1, {u1, e1a}), temb, groups);
    feats[3] = grab(d1);
    // decoder tail is irrelevant to the main branch; stop here
    return feats;
}

}  // namespace net_detail

// Inputs to one denoising forward pass. Tensors live at latent resolution
// except pose maps (pixel resolution) and the garment image.
template <typename T>
struct DenoiseBatch {
    Tensor<T> z_t;             // [T,4,h,w]
    Tensor<T> agnostic_latent; // [T,4,h,w]
    Tensor<T> mask_latent;     // [T,1,h,w], binary
    Tensor<T> human_maps;      // [T,25,H,W]
    Tensor<T> garment_map;     // [1,25,H,W]
    Tensor<T> garment_image;   // [3,H,W]
    Tensor<T> garment_latent;  // [1,4,h,w]
    int64_t t = 0;
};

template <typename T>
void ensure_binary_mask(const Tensor<T>& mask) {
    for (const auto& v : mask.data)
        if (v != T(0) && v != T(1)) throw ValidationError("mask must be binary");
}

// One epsilon-prediction forward pass of the dual-branch network.
// `garment_dropped` implements the unconditional branch: the garment embedding
// is replaced by the learned null embedding and garment features are zeroed.
template <typename T>
DenoiseValues denoise_step_tape(Tape<T>& tape, const TapeModel<T>& tm, const DenoiseBatch<T>& in,
                                ClipMode mode, bool garment_dropped = false) {
    const ModelConfig& cfg = *tm.cfg;
    const int64_t T_ = in.z_t.shape[0];
    const int64_t lh = cfg.latent_h(), lw = cfg.latent_w();
    if (in.z_t.shape != Shape{T_, 4, lh, lw} || !in.agnostic_latent.same_shape(in.z_t) ||
        in.mask_latent.shape != Shape{T_, 1, lh, lw})
        throw ShapeError("denoise_step: latent shapes inconsistent with config");
    if (mode == ClipMode::image && T_ != 1) throw ShapeError("image mode requires T == 1");

    const int64_t w1 = cfg.widths[1], w2 = cfg.widths[2];
    const int groups = cfg.groups;
    const int heads = cfg.heads;

    Value z9 = tape.concat(1, {tape.constant(in.z_t), tape.constant(in.agnostic_latent),
                               tape.constant(in.mask_latent)});
    Value temb = net_detail::timestep_embedding(tape, tm, "main", in.t);
    Value gtemb = net_detail::timestep_embedding(tape, tm, "garment", in.t);

    // conditioning: garment embedding tokens + garment branch features
    Value c_g = garment_dropped ? tm.at("gembed.null")
                                : embed_garment_tape(tape, tm, tape.constant(in.garment_image));
    std::array<Value, 4> f_g;
    if (garment_dropped) {
        const int64_t s1 = (lh / 2) * (lw / 2), s2 = (lh / 4) * (lw / 4);
        f_g[0] = tape.constant(Tensor<T>(Shape{s1, w1}));
        f_g[1] = tape.constant(Tensor<T>(Shape{s2, w2}));
        f_g[2] = tape.constant(Tensor<T>(Shape{s2, w2}));
        f_g[3] = tape.constant(Tensor<T>(Shape{s1, w1}));
    } else {
        f_g = net_detail::garment_features(tape, tm, tape.constant(in.garment_latent), gtemb, c_g,
                                           groups, heads);
    }

    // pose embeddings at latent resolution, pooled to each attention stage
    PoseEncoderV penc;
    for (size_t i = 0; i < 4; ++i) {
        penc.w[i] = tm.at("posenc.conv" + std::to_string(i) + ".w");
        penc.b[i] = tm.at("posenc.conv" + std::to_string(i) + ".b");
    }
    Value ph_emb = encode_pose_tape(tape, tape.constant(in.human_maps), penc);   // [T,d_p,lh,lw]
    Value pg_emb = encode_pose_tape(tape, tape.constant(in.garment_map), penc);  // [1,d_p,lh,lw]
    auto stage_tokens = [&](Value emb, int pool, bool garment) {
        Value p = tape.avg_pool(emb, pool);
        Value tok = net_detail::to_tokens(tape, p);  // [N,S,d_p]
        if (garment) {
            const Shape& s = tape.shape(tok);
            return tape.reshape(tok, Shape{s[1], s[2]});
        }
        return tok;
    };
    Value ph_s1 = stage_tokens(ph_emb, 2, false), ph_s2 = stage_tokens(ph_emb, 4, false);
    Value pg_s1 = stage_tokens(pg_emb, 2, true), pg_s2 = stage_tokens(pg_emb, 4, true);

    std::vector<Value> records;
    auto attn_stage = [&](Value x, const std::string& stage, Value fg, Value ph, Value pg,
                          bool record) {
        const Shape& s = tape.shape(x);
        Value tok = net_detail::to_tokens(tape, x);
        HierV blk{net_detail::attn_values(tm, "main." + stage + ".attn.pasa", heads),
                  net_detail::attn_values(tm, "main." + stage + ".attn.tsa", heads),
                  net_detail::attn_values(tm, "main." + stage + ".attn.ca", heads),
                  net_detail::attn_values(tm, "main." + stage + ".attn.pata", heads),
                  cfg.tsa_window};
        PasaValues r = hier_block_tape(tape, tok, fg, ph, pg, c_g, mode, blk);
        if (record) records.push_back(r.record);
        return net_detail::from_tokens(tape, r.out, s[2], s[3]);
    };

    Value x = net_detail::conv(tape, tm, "main.in_conv", z9, 1, 1);
    Value e0 = net_detail::resblock(tape, tm, "main.e0.rb", x, temb, groups);
    Value x1 = net_detail::conv(tape, tm, "main.down0", e0, 2, 1);
    Value e1 = net_detail::resblock(tape, tm, "main.e1.rb", x1, temb, groups);
    Value e1a = attn_stage(e1, "e1", f_g[0], ph_s1, pg_s1, false);
    Value x2 = net_detail::conv(tape, tm, "main.down1", e1a, 2, 1);
    Value m = net_detail::resblock(tape, tm, "main.mid.rb1", x2, temb, groups);
    Value ma = attn_stage(m, "mid", f_g[1], ph_s2, pg_s2, false);
    Value m2 = net_detail::resblock(tape, tm, "main.mid.rb2", ma, temb, groups);
    Value d2 = net_detail::resblock(tape, tm, "main.d2.rb", tape.concat(1, {m2, x2}), temb, groups);
    Value d2a = attn_stage(d2, "d2", f_g[2], ph_s2, pg_s2, true);
    Value u1 = net_detail::conv(tape, tm, "main.up1", tape.nearest_up2(d2a), 1, 1);
    Value d1 = net_detail::resblock(tape, tm, "main.d1.rb", tape.concat(1, {u1, e1a}), temb, groups);
    Value d1a = attn_stage(d1, "d1", f_g[3], ph_s1, pg_s1, true);
    Value u0 = net_detail::conv(tape, tm, "main.up0", tape.nearest_up2(d1a), 1, 1);
    Value d0 = net_detail::resblock(tape, tm, "main.d0.rb", tape.concat(1, {u0, e0}), temb, groups);
    Value out = tape.group_norm(d0, groups, tm.at("main.out.gn_g"), tm.at("main.out.gn_b"));
    out = tape.silu(out);
    out = net_detail::conv(tape, tm, "main.out.conv", out, 1, 1);
    return DenoiseValues{out, std::move(records)};
}

template <typename T>
struct DenoiseResult {
    Tensor<T> eps;
    std::vector<AttentionRecord<T>> records;
};

// No-grad convenience forward.
template <typename T>
DenoiseResult<T> denoise_step(const Model<T>& m, const DenoiseBatch<T>& in, ClipMode mode,
                              bool garment_dropped = false) {
    ensure_binary_mask(in.mask_latent);
    Tape<T> tape(false);
    TapeModel<T> tm(tape, m);
    DenoiseValues dv = denoise_step_tape(tape, tm, in, mode, garment_dropped);
    DenoiseResult<T> out;
    out.eps = tape.val(dv.eps);
    for (size_t i = 0; i < dv.records.size(); ++i)
        out.records.push_back(AttentionRecord<T>{static_cast<int>(i), tape.val(dv.records[i])});
    return out;
}

}  // namespace dpidm
