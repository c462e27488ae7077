#include <gtest/gtest.h>

#include "dpidm/network.hpp"
#include "dpidm/pipeline.hpp"
#include "dpidm/synthdata.hpp"
#include "dpidm/training.hpp"
#include "test_util.hpp"

using namespace dpidm;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.canvas_h = 32;
    cfg.canvas_w = 32;
    cfg.widths = {8, 16, 32};
    cfg.d_pose = 8;
    cfg.d_cond = 8;
    cfg.heads = 2;
    cfg.groups = 4;
    cfg.temb_dim = 16;
    return cfg;
}

template <typename T>
DenoiseBatch<T> tiny_batch(const Model<T>& model, int64_t frames, uint64_t seed) {
    const ModelConfig& cfg = model.cfg;
    SceneSpec spec;
    spec.seed = seed;
    spec.num_frames = frames;
    spec.canvas_h = cfg.canvas_h;
    spec.canvas_w = cfg.canvas_w;
    const TryOnSample s = generate_sample(spec);
    DenoiseBatch<T> b = make_conditions(model, s.agnostic_video.template cast<T>(),
                                        s.agnostic_mask.template cast<T>(), s.human_pose,
                                        s.garment_pose, s.garment_image.template cast<T>());
    Rng rng(seed);
    b.z_t = Tensor<T>(Shape{frames, 4, cfg.latent_h(), cfg.latent_w()});
    for (auto& v : b.z_t.data) v = static_cast<T>(rng.normal());
    b.t = 17;
    return b;
}

}  // namespace

TEST(ModelConfig, NineChannelContractAndValidation) {
    EXPECT_EQ(ModelConfig::kMainInChannels, 9);
    Model<float> m = Model<float>::init(tiny_config(), 0);
    EXPECT_EQ(m.params.at("main.in_conv.w").shape, (Shape{8, 9, 3, 3}));
    EXPECT_EQ(m.params.at("garment.in_conv.w").shape, (Shape{8, 4, 3, 3}));
    ModelConfig bad = tiny_config();
    bad.canvas_h = 40;  // not divisible by 16
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.widths = {10, 16, 32};  // not divisible by groups/heads
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ModelInit, AdaptersAndTemporalProjectionsZero) {
    Model<float> m = Model<float>::init(tiny_config(), 1);
    for (const char* name : {"main.e1.attn.pasa.adapt.up_w", "main.d1.attn.pata.adapt.up_w",
                             "main.e1.attn.tsa.o_w", "main.mid.attn.pata.o_w"})
        for (const auto& v : m.params.at(name).data) ASSERT_EQ(v, 0.f);
    // PASA projections are not zero
    double n = 0;
    for (const auto& v : m.params.at("main.e1.attn.pasa.q_w").data) n += std::abs(v);
    EXPECT_GT(n, 0.0);
}

TEST(ParamGroups, Classification) {
    EXPECT_EQ(param_group("main.e1.attn.pasa.q_w"), ParamGroup::pasa);
    EXPECT_EQ(param_group("main.d2.attn.tsa.o_w"), ParamGroup::tsa);
    EXPECT_EQ(param_group("main.mid.attn.ca.k_w"), ParamGroup::ca);
    EXPECT_EQ(param_group("garment.e1.attn.ca.k_w"), ParamGroup::ca);
    EXPECT_EQ(param_group("main.d1.attn.pata.adapt.up_w"), ParamGroup::pata);
    EXPECT_EQ(param_group("main.in_conv.w"), ParamGroup::shared);
    EXPECT_EQ(param_group("posenc.conv0.w"), ParamGroup::shared);
    EXPECT_EQ(param_group("garment.e1.attn.sa.q_w"), ParamGroup::shared);
    EXPECT_EQ(param_group("codec.enc.conv0.w"), ParamGroup::codec);
    EXPECT_EQ(param_group("codec.norm_mean"), ParamGroup::codec);
}

TEST(Codec, ShapesAndDeterminism) {
    Model<float> m = Model<float>::init(tiny_config(), 2);
    Rng rng(3);
    Tensor<float> video(Shape{2, 3, 32, 32});
    for (auto& v : video.data) v = static_cast<float>(rng.uniform());
    const Tensor<float> z = encode_latent(m, video);
    EXPECT_EQ(z.shape, (Shape{2, 4, 8, 8}));
    const Tensor<float> back = decode_latent(m, z);
    EXPECT_EQ(back.shape, video.shape);
    // identical frames encode identically
    Tensor<float> dup(Shape{2, 3, 32, 32});
    std::copy_n(video.ptr(), 3 * 32 * 32, dup.ptr());
    std::copy_n(video.ptr(), 3 * 32 * 32, dup.ptr() + 3 * 32 * 32);
    const Tensor<float> zz = encode_latent(m, dup);
    for (int64_t i = 0; i < zz.numel() / 2; ++i) ASSERT_EQ(zz[i], zz[zz.numel() / 2 + i]);
    EXPECT_THROW(encode_latent(m, Tensor<float>(Shape{1, 3, 30, 32})), ShapeError);
}

TEST(EmbedGarment, DeterministicShape) {
    Model<float> m = Model<float>::init(tiny_config(), 4);
    Rng rng(5);
    Tensor<float> img(Shape{3, 32, 32});
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    const Tensor<float> a = embed_garment(m, img);
    const Tensor<float> b = embed_garment(m, img);
    EXPECT_EQ(a.shape, (Shape{m.cfg.cond_tokens(), m.cfg.d_cond}));
    EXPECT_EQ(a.data, b.data);
    EXPECT_EQ(m.params.at("gembed.null").shape, a.shape);
    EXPECT_THROW(embed_garment(m, Tensor<float>(Shape{1, 32, 32})), ShapeError);
}

TEST(DenoiseStep, ShapeContractAndRecordCount) {
    Model<float> m = Model<float>::init(tiny_config(), 6);
    DenoiseBatch<float> b = tiny_batch(m, 3, 7);
    const DenoiseResult<float> r = denoise_step(m, b, ClipMode::video);
    EXPECT_EQ(r.eps.shape, b.z_t.shape);
    ASSERT_EQ(r.records.size(), 2u);  // last two decoder attention layers
    const int64_t s2 = 2 * 2, s1 = 4 * 4;
    EXPECT_EQ(r.records[0].probs.shape, (Shape{3, s2, 2 * s2}));
    EXPECT_EQ(r.records[1].probs.shape, (Shape{3, s1, 2 * s1}));
    // records are row-stochastic
    for (const auto& rec : r.records)
        for (int64_t t = 0; t < rec.probs.shape[0]; ++t)
            for (int64_t i = 0; i < rec.probs.shape[1]; ++i) {
                double sum = 0;
                for (int64_t j = 0; j < rec.probs.shape[2]; ++j) sum += rec.probs.at(t, i, j);
                ASSERT_NEAR(sum, 1.0, 1e-5);
            }
}

TEST(DenoiseStep, NonBinaryMaskRejected) {
    Model<float> m = Model<float>::init(tiny_config(), 8);
    DenoiseBatch<float> b = tiny_batch(m, 1, 9);
    b.mask_latent[0] = 0.5f;
    EXPECT_THROW(denoise_step(m, b, ClipMode::image), ValidationError);
}

TEST(DenoiseStep, ImageAndVideoPathsAgreeAtZeroInit) {
    // all adapters and temporal output projections are zero at init, so a
    // single frame takes the same value through both code paths
    Model<double> m = Model<double>::init(tiny_config(), 10);
    DenoiseBatch<double> b = tiny_batch<double>(m, 1, 11);
    const DenoiseResult<double> img = denoise_step(m, b, ClipMode::image);
    const DenoiseResult<double> vid = denoise_step(m, b, ClipMode::video);
    EXPECT_LT(max_rel_diff(img.eps, vid.eps), 1e-6);
}

TEST(DenoiseStep, GarmentFeaturesFrameIndependent) {
    // identical frames in, identical per-frame eps out (garment branch and
    // conditions are shared across frames)
    Model<float> m = Model<float>::init(tiny_config(), 12);
    DenoiseBatch<float> b = tiny_batch(m, 2, 13);
    const int64_t fn = b.z_t.numel() / 2;
    std::copy_n(b.z_t.ptr(), fn, b.z_t.ptr() + fn);
    std::copy_n(b.agnostic_latent.ptr(), fn, b.agnostic_latent.ptr() + fn);
    const int64_t mn = b.mask_latent.numel() / 2;
    std::copy_n(b.mask_latent.ptr(), mn, b.mask_latent.ptr() + mn);
    const int64_t pn = b.human_maps.numel() / 2;
    std::copy_n(b.human_maps.ptr(), pn, b.human_maps.ptr() + pn);
    const DenoiseResult<float> r = denoise_step(m, b, ClipMode::video);
    for (int64_t i = 0; i < fn; ++i) ASSERT_NEAR(r.eps[i], r.eps[fn + i], 1e-5);
}

TEST(DenoiseStep, UnconditionalBranchDiffersAfterNudge) {
    Model<float> m = Model<float>::init(tiny_config(), 14);
    // make the CA value path see a difference between null and real tokens
    DenoiseBatch<float> b = tiny_batch(m, 1, 15);
    const DenoiseResult<float> cond = denoise_step(m, b, ClipMode::image, false);
    const DenoiseResult<float> unc = denoise_step(m, b, ClipMode::image, true);
    EXPECT_EQ(cond.eps.shape, unc.eps.shape);
    // zero-init output conv makes both zero at init; nudge it to expose the difference
    for (auto& v : m.params.at("main.out.conv.w").data) v = 0.01f;
    const DenoiseResult<float> cond2 = denoise_step(m, b, ClipMode::image, false);
    const DenoiseResult<float> unc2 = denoise_step(m, b, ClipMode::image, true);
    EXPECT_GT(max_abs_diff(cond2.eps, unc2.eps), 0.0);
}

TEST(Checkpoint, RoundTripAndCompatibility) {
    Model<float> m = Model<float>::init(tiny_config(), 16);
    AdamState<float> adam;
    Rng rng(17);
    adam.m["main.in_conv.w"] = Tensor<float>(m.params.at("main.in_conv.w").shape, 0.25f);
    adam.v["main.in_conv.w"] = Tensor<float>(m.params.at("main.in_conv.w").shape, 0.5f);
    adam.steps["main.in_conv.w"] = 7;
    const CheckpointContainer c = pack_checkpoint(m, adam, 123, "data.canvas_h = 32\n");

    const auto dir = std::filesystem::temp_directory_path() / "dpidm_test_ckpt";
    std::filesystem::create_directories(dir);
    const auto path = dir / "x.bin";
    save_checkpoint(path, c);
    const CheckpointContainer back = load_checkpoint(path);
    EXPECT_EQ(back.iteration, 123u);
    EXPECT_EQ(back.config_text, "data.canvas_h = 32\n");
    ASSERT_EQ(back.params.size(), c.params.size());
    for (size_t i = 0; i < c.params.size(); ++i) {
        EXPECT_EQ(back.params[i].first, c.params[i].first);
        ASSERT_EQ(back.params[i].second.data, c.params[i].second.data);  // bit-exact
    }
    Model<float> m2 = Model<float>::init(tiny_config(), 99);
    load_into_model(back, m2);
    for (const auto& name : m.params.order())
        ASSERT_EQ(m.params.at(name).data, m2.params.at(name).data);
    AdamState<float> adam2;
    unpack_optimizer(back, adam2);
    EXPECT_EQ(adam2.steps.at("main.in_conv.w"), 7);
    EXPECT_EQ(adam2.m.at("main.in_conv.w").data, adam.m.at("main.in_conv.w").data);

    // truncated file: format error, no partial state
    std::vector<char> bytes;
    {
        std::ifstream f(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    }
    const auto trunc = dir / "trunc.bin";
    std::ofstream tf(trunc, std::ios::binary);
    tf.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    tf.close();
    EXPECT_THROW(load_checkpoint(trunc), CheckpointError);

    // incompatible widths: error names the first mismatched entry
    ModelConfig other = tiny_config();
    other.widths = {16, 32, 64};
    Model<float> m3 = Model<float>::init(other, 0);
    try {
        load_into_model(back, m3);
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("main.in_conv.w"), std::string::npos);
    }
    (void)rng;
}

TEST(Checkpoint, BadMagicRejected) {
    const auto dir = std::filesystem::temp_directory_path() / "dpidm_test_ckpt";
    std::filesystem::create_directories(dir);
    const auto path = dir / "bad.bin";
    std::ofstream f(path, std::ios::binary);
    f << "NOTACKPTFILE";
    f.close();
    EXPECT_THROW(load_checkpoint(path), CheckpointError);
}
