#include <gtest/gtest.h>

#include "dpidm/pose.hpp"
#include "test_util.hpp"

using namespace dpidm;
using testutil::rand_tensor;

namespace {

SkeletonPose grid_pose() {
    SkeletonPose p = SkeletonPose::empty(SkeletonKind::human);
    for (size_t j = 0; j < p.joints.size(); ++j) {
        p.joints[j].x = 4.f + 3.f * static_cast<float>(j % 4);
        p.joints[j].y = 4.f + 5.f * static_cast<float>(j / 4);
        p.joints[j].present = 1;
    }
    return p;
}

}  // namespace

TEST(Rasterize, AllAbsentGivesZeros) {
    const SkeletonPose p = SkeletonPose::empty(SkeletonKind::human);
    const Tensor<float> map = rasterize<float>(p, 32, 24);
    EXPECT_EQ(map.shape, (Shape{25, 32, 24}));
    for (const auto& v : map.data) ASSERT_EQ(v, 0.f);
}

TEST(Rasterize, SingleJointPeaksAtCenter) {
    SkeletonPose p = SkeletonPose::empty(SkeletonKind::human);
    p.joints[skeleton::kNeck] = {12.f, 16.f, 1};
    const Tensor<float> map = rasterize<float>(p, 32, 24);
    int64_t best = 0;
    for (int64_t i = 0; i < 32 * 24; ++i)
        if (map[i] > map[best]) best = i;
    EXPECT_EQ(best / 24, 16);
    EXPECT_EQ(best % 24, 12);
    EXPECT_NEAR(map[best], 1.f, 1e-6);
}

TEST(Rasterize, LimbHasMassAlongSegment) {
    SkeletonPose p = SkeletonPose::empty(SkeletonKind::human);
    p.joints[skeleton::kNeck] = {6.f, 6.f, 1};
    p.joints[skeleton::kLShoulder] = {18.f, 14.f, 1};
    const Tensor<float> map = rasterize<float>(p, 32, 24);
    // edge 0 is neck->l_shoulder; sample the midpoint pixel
    EXPECT_GT(map.at(skeleton::kNumJoints + 0, 10, 12), 0.f);
}

TEST(Rasterize, AddingJointNeverDecreasesValues) {
    SkeletonPose base = grid_pose();
    base.joints[skeleton::kLWrist].present = 0;
    SkeletonPose more = grid_pose();
    const Tensor<float> a = rasterize<float>(base, 64, 48);
    const Tensor<float> b = rasterize<float>(more, 64, 48);
    for (int64_t i = 0; i < a.numel(); ++i) ASSERT_GE(b[i], a[i]);
}

TEST(Rasterize, ValuesInUnitRangeAndClipSilently) {
    SkeletonPose p = grid_pose();
    p.joints[0].x = -10.f;  // off canvas
    p.joints[1].y = 500.f;
    const Tensor<float> map = rasterize<float>(p, 32, 24);
    for (const auto& v : map.data) {
        ASSERT_GE(v, 0.f);
        ASSERT_LE(v, 1.f);
    }
}

TEST(PoseEncoder, ZeroMapZeroBiasGivesZeroEmbedding) {
    Rng rng(5);
    PoseEncoderParams<double> enc = PoseEncoderParams<double>::init(8, rng);
    const Tensor<double> zero(Shape{25, 32, 32});
    const Tensor<double> out = encode_pose(zero, enc);
    EXPECT_EQ(out.shape, (Shape{8, 8, 8}));
    for (const auto& v : out.data) ASSERT_EQ(v, 0.0);
}

TEST(PoseEncoder, StrideArithmetic) {
    Rng rng(6);
    PoseEncoderParams<float> enc = PoseEncoderParams<float>::init(32, rng);
    Tensor<float> map(Shape{25, 64, 48});
    map[100] = 0.7f;
    EXPECT_EQ(encode_pose(map, enc).shape, (Shape{32, 16, 12}));
    EXPECT_THROW(encode_pose(Tensor<float>(Shape{25, 63, 48}), enc), ShapeError);
}

TEST(PoseEncoder, AbsentJointChannelIrrelevantWhenZero) {
    Rng rng(7);
    PoseEncoderParams<float> enc = PoseEncoderParams<float>::init(16, rng);
    SkeletonPose a = grid_pose();
    a.joints[skeleton::kRAnkle].present = 0;
    SkeletonPose b = a;
    b.joints[skeleton::kRAnkle].x += 3.f;  // moved but absent: same zero channel
    const Tensor<float> ea = encode_pose(rasterize<float>(a, 64, 48), enc);
    const Tensor<float> eb = encode_pose(rasterize<float>(b, 64, 48), enc);
    EXPECT_EQ(ea.data, eb.data);
}

TEST(PoseEncoder, FinalStageHomogeneousWithZeroBias) {
    // the last convolution carries no activation; with zero biases it is
    // linear, so scaling its weights scales the embedding exactly
    Rng rng(71);
    PoseEncoderParams<double> enc = PoseEncoderParams<double>::init(8, rng);
    PoseEncoderParams<double> enc2 = enc;
    for (auto& v : enc2.w[3].data) v *= 3.0;
    SkeletonPose p = grid_pose();
    const Tensor<double> map = rasterize<double>(p, 32, 32);
    const Tensor<double> a = encode_pose(map, enc);
    const Tensor<double> b = encode_pose(map, enc2);
    for (int64_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(b[i], 3.0 * a[i], 1e-9);
}

TEST(Adapter, ZeroInitIsExactlyNeutral) {
    Rng rng(8);
    PoseAdapterParams<double> p = PoseAdapterParams<double>::init(6, 10, 4, rng);
    const Tensor<double> tokens = rand_tensor(Shape{7, 6}, rng);
    const Tensor<double> out = adapt(tokens, p);
    EXPECT_EQ(out.shape, (Shape{7, 10}));
    for (const auto& v : out.data) ASSERT_EQ(v, 0.0);
}

TEST(Adapter, ZeroInputZeroBiasGivesZero) {
    Rng rng(9);
    PoseAdapterParams<double> p = PoseAdapterParams<double>::init(4, 4, 2, rng);
    for (auto& v : p.w_up.data) v = rng.normal();  // arbitrary weights, zero biases
    const Tensor<double> out = adapt(Tensor<double>(Shape{3, 4}), p);
    for (const auto& v : out.data) ASSERT_EQ(v, 0.0);
}

TEST(Adapter, MatchesDenseOracle) {
    Rng rng(10);
    PoseAdapterParams<double> p = PoseAdapterParams<double>::init(4, 4, 2, rng);
    for (auto& v : p.w_up.data) v = rng.normal();
    for (auto& v : p.b_up.data) v = rng.normal();
    for (auto& v : p.b_down.data) v = rng.normal();
    const Tensor<double> x = rand_tensor(Shape{2, 4}, rng);
    const Tensor<double> out = adapt(x, p);
    const int64_t hidden = p.w_down.shape[1];
    for (int64_t r = 0; r < 2; ++r)
        for (int64_t c = 0; c < 4; ++c) {
            double acc = p.b_up[c];
            for (int64_t h = 0; h < hidden; ++h) {
                double pre = p.b_down[h];
                for (int64_t i = 0; i < 4; ++i) pre += x.at(r, i) * p.w_down.at(i, h);
                const double g = pre * 0.5 * (1.0 + std::erf(pre / std::sqrt(2.0)));
                acc += g * p.w_up.at(h, c);
            }
            ASSERT_NEAR(out.at(r, c), acc, 1e-6);
        }
    EXPECT_THROW(adapt(rand_tensor(Shape{2, 5}, rng), p), ShapeError);
}

TEST(DropKeypoints, EdgeProbabilities) {
    const SkeletonPose p = grid_pose();
    const SkeletonPose same = drop_keypoints(p, 0.0, 1);
    for (const auto& j : same.joints) ASSERT_EQ(j.present, 1);
    const SkeletonPose gone = drop_keypoints(p, 1.0, 2);
    for (const auto& j : gone.joints) ASSERT_EQ(j.present, 0);
    EXPECT_THROW(drop_keypoints(p, -0.1, 3), ValidationError);
}

TEST(DropKeypoints, EmpiricalRateNearPoint05) {
    const SkeletonPose p = grid_pose();
    int64_t total = 0, dropped = 0;
    for (uint64_t s = 0; total < 10000; ++s) {
        const SkeletonPose d = drop_keypoints(p, 0.05, mix_seed(123, s));
        for (const auto& j : d.joints) {
            ++total;
            dropped += 1 - j.present;
        }
    }
    const double rate = static_cast<double>(dropped) / static_cast<double>(total);
    EXPECT_GE(rate, 0.04);
    EXPECT_LE(rate, 0.06);
}

TEST(DropKeypoints, DeterministicPerSeed) {
    const SkeletonPose p = grid_pose();
    const SkeletonPose a = drop_keypoints(p, 0.3, 99);
    const SkeletonPose b = drop_keypoints(p, 0.3, 99);
    for (size_t j = 0; j < a.joints.size(); ++j) ASSERT_EQ(a.joints[j].present, b.joints[j].present);
}

TEST(MirrorPose, InvolutionAndSlotSwap) {
    const SkeletonPose p = grid_pose();
    const SkeletonPose m = mirror_pose(p, 48);
    const SkeletonPose mm = mirror_pose(m, 48);
    for (size_t j = 0; j < p.joints.size(); ++j) {
        ASSERT_FLOAT_EQ(p.joints[j].x, mm.joints[j].x);
        ASSERT_FLOAT_EQ(p.joints[j].y, mm.joints[j].y);
    }
    EXPECT_FLOAT_EQ(m.joints[skeleton::kLShoulder].x, 47.f - p.joints[skeleton::kRShoulder].x);
    EXPECT_FLOAT_EQ(m.joints[skeleton::kLShoulder].y, p.joints[skeleton::kRShoulder].y);
}
