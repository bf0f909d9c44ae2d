#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "gradient_check.hpp"
#include "legs/rasterizer.hpp"
#include "oracles.hpp"

namespace legs {
namespace {

PinholeCamera square_camera(int size, double f) {
  PinholeCamera cam;
  cam.fx = cam.fy = f;
  cam.cx = cam.cy = (size - 1) / 2.0;
  cam.width = cam.height = size;
  return cam;
}

Gaussian<double> isotropic(double sigma, const Vec3<double>& mean, double opacity = 0.5) {
  Gaussian<double> g;
  g.mean = mean;
  g.log_scale = Vec3<double>::Constant(std::log(sigma));
  g.opacity_logit = logit(opacity);
  return g;
}

TEST(ProjectGaussian, OnAxisIsotropicMatchesSymbolicJacobian) {
  const auto cam = square_camera(101, 80.0);
  const double sigma = 0.05, z = 2.0;
  const auto s = project_gaussian<double>(isotropic(sigma, {0, 0, z}), cam);
  ASSERT_TRUE(s);
  const double expected = std::pow(80.0 * sigma / z, 2) + 0.3;
  EXPECT_NEAR(s->cov2d(0, 0), expected, 1e-12);
  EXPECT_NEAR(s->cov2d(1, 1), expected, 1e-12);
  EXPECT_NEAR(s->cov2d(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(s->mean2d.x(), 50.0, 1e-12);
  EXPECT_NEAR(s->z_cam, z, 1e-12);
}

TEST(ProjectGaussian, DoublingDepthQuartersCovariance) {
  const auto cam = square_camera(101, 80.0);
  const auto near = project_gaussian<double>(isotropic(0.1, {0, 0, 1.5}), cam);
  const auto far = project_gaussian<double>(isotropic(0.1, {0, 0, 3.0}), cam);
  ASSERT_TRUE(near && far);
  EXPECT_NEAR((far->cov2d(0, 0) - 0.3) * 4.0, near->cov2d(0, 0) - 0.3, 1e-12);
}

TEST(ProjectGaussian, CulledBehindCameraOrOffscreen) {
  const auto cam = square_camera(32, 30.0);
  EXPECT_FALSE(project_gaussian<double>(isotropic(0.1, {0, 0, -1}), cam));
  EXPECT_FALSE(project_gaussian<double>(isotropic(0.1, {0, 0, 0.005}), cam));
  EXPECT_FALSE(project_gaussian<double>(isotropic(0.01, {50, 0, 1}), cam));
  // Opacity below 1/255 can never contribute.
  EXPECT_FALSE(project_gaussian<double>(isotropic(0.1, {0, 0, 1}, 0.003), cam));
}

TEST(Render, SingleTermBlend) {
  // A point-like Gaussian whose center lands exactly on pixel (8, 8).
  const auto cam = square_camera(17, 20.0);
  Gaussian<double> g = isotropic(1e-4, {0, 0, 2}, 0.6);
  g.color = Vec3<double>(0.2, 0.4, 0.8);
  GaussianCloud<double> cloud;
  cloud.push_back(g);
  const std::vector<double> bg = {1.0, 0.5, 0.0};
  const auto out = render<double>(cloud, cam, RenderMode::color, bg);
  for (int c = 0; c < 3; ++c)
    EXPECT_NEAR(out.image.at(8, 8, c), 0.6 * g.color[c] + 0.4 * bg[c], 1e-9);
}

TEST(Render, TwoTermCompositing) {
  const auto cam = square_camera(17, 20.0);
  Gaussian<double> front = isotropic(1e-4, {0, 0, 1}, 0.5);
  front.color = Vec3<double>(1, 0, 0);
  Gaussian<double> back = isotropic(1e-4, {0, 0, 2}, 0.5);
  back.color = Vec3<double>(0, 0, 1);
  GaussianCloud<double> cloud;
  cloud.push_back(back);  // input order must not matter
  cloud.push_back(front);
  const std::vector<double> bg = {0, 0, 0};
  const auto out = render<double>(cloud, cam, RenderMode::color, bg);
  EXPECT_NEAR(out.image.at(8, 8, 0), 0.5, 1e-9);
  EXPECT_NEAR(out.image.at(8, 8, 1), 0.0, 1e-9);
  EXPECT_NEAR(out.image.at(8, 8, 2), 0.25, 1e-9);
}

TEST(Render, MatchesBruteForceCompositor) {
  const auto cam = square_camera(64, 60.0);
  const std::vector<double> bg = {0.1, 0.2, 0.3};
  const std::vector<float> bgf = {0.1f, 0.2f, 0.3f};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const auto cloud = oracle::random_scene(rng, 100);
    const auto tiled = render<float>(cloud, cam, RenderMode::color, bgf);
    const Image brute = oracle::brute_force_render(cloud, cam, bg);
    double worst = 0;
    for (std::size_t i = 0; i < brute.data.size(); ++i)
      worst = std::max(worst, static_cast<double>(std::abs(brute.data[i] - tiled.image.data[i])));
    EXPECT_LE(worst, 1e-5) << "seed " << seed;
  }
}

TEST(Render, TransmittancePlusWeightsIsOne) {
  // Rendering a constant value 1 with zero background gives the total weight.
  const auto cam = square_camera(48, 40.0);
  std::mt19937_64 rng(11);
  auto cloud = oracle::random_scene(rng, 80);
  for (auto& c : cloud.colors) c = 1.0f;
  const std::vector<float> bg = {0, 0, 0};
  const auto out = render<float>(cloud, cam, RenderMode::color, bg);
  for (std::size_t p = 0; p < out.final_transmittance.size(); ++p) {
    EXPECT_GE(out.final_transmittance[p], 0.0f);
    EXPECT_LE(out.final_transmittance[p], 1.0f);
    EXPECT_NEAR(out.image.data[3 * p] + out.final_transmittance[p], 1.0, 1e-6);
  }
}

TEST(Render, InvariantToInputOrder) {
  const auto cam = square_camera(48, 40.0);
  std::mt19937_64 rng(12);
  const auto cloud = oracle::random_scene(rng, 60);
  std::vector<std::uint32_t> perm(cloud.size());
  std::iota(perm.begin(), perm.end(), 0u);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto shuffled = cloud.select(perm);
  const std::vector<float> bg = {0.3f, 0.3f, 0.3f};
  const auto a = render<float>(cloud, cam, RenderMode::color, bg);
  const auto b = render<float>(shuffled, cam, RenderMode::color, bg);
  EXPECT_EQ(a.image.data, b.image.data);
}

TEST(Render, UsedMaskGivesIdenticalSubsetRender) {
  const auto cam = square_camera(40, 35.0);
  std::mt19937_64 rng(13);
  const auto cloud = oracle::random_scene(rng, 150);
  std::vector<std::uint8_t> used;
  const std::vector<float> bg = {0, 0, 0};
  const auto full = render<float>(cloud, cam, RenderMode::color, bg, {}, &used);
  std::vector<std::uint32_t> keep;
  for (std::uint32_t i = 0; i < used.size(); ++i)
    if (used[i]) keep.push_back(i);
  EXPECT_LT(keep.size(), cloud.size());
  const auto sub = render<float>(cloud.select(keep), cam, RenderMode::color, bg);
  EXPECT_EQ(full.image.data, sub.image.data);
}

TEST(Render, DepthModeBlendsCameraDepth) {
  const auto cam = square_camera(17, 20.0);
  GaussianCloud<double> cloud;
  cloud.push_back(isotropic(1e-4, {0, 0, 2.5}, 0.8));
  const auto out = render<double>(cloud, cam, RenderMode::depth);
  EXPECT_NEAR(out.image.at(8, 8), 0.8 * 2.5, 1e-9);
}

TEST(RenderBackward, ZeroLossGradientGivesZeroGradients) {
  auto s = oracle::make_grad_check_scene();
  const auto fwd = render<double>(s.cloud, s.cam, RenderMode::color);
  const ImageT<double> zero(16, 16, 3);
  const auto g = render_backward<double>(s.cloud, fwd, zero);
  for (int gi = 0; gi < kParamGroupCount; ++gi)
    for (double v : g.params.group(static_cast<ParamGroup>(gi))) EXPECT_EQ(v, 0.0);
}

TEST(RenderBackward, MatchesFiniteDifferences) {
  const auto errors = oracle::rasterizer_gradient_errors();
  for (const char* name :
       {"mean", "log_scale", "rotation", "opacity_logit", "color", "feature"}) {
    ASSERT_TRUE(errors.count(name)) << name;
    EXPECT_LE(errors.at(name), 1e-3) << name;
  }
}

TEST(RenderBackward, MatchesFiniteDifferencesPastFrustumGuard) {
  const auto s = oracle::make_grad_check_scene(7, true);
  const auto p = project_gaussian<double>(s.cloud.get(2), s.cam);
  ASSERT_TRUE(p);
  ASSERT_GT(p->t_cam.x() / p->t_cam.z(), kFrustumGuard * 0.5 * s.cam.width / s.cam.fx);
  const auto errors = oracle::rasterizer_gradient_errors(1e-4, true);
  for (const auto& [name, err] : errors) EXPECT_LE(err, 1e-3) << name;
}

TEST(ProjectGaussian, GrazingSplatFootprintStaysBounded) {
  // Nearly in the image plane and far to the side: the unguarded Jacobian
  // would stretch this splat across the whole image.
  const auto cam = square_camera(64, 50.0);
  EXPECT_FALSE(project_gaussian<double>(isotropic(0.05, {2.0, 0, 0.1}), cam));
  EXPECT_FALSE(project_gaussian<double>(isotropic(0.05, {2.0, 0, 0.25}), cam));
}

TEST(RenderBackward, OccludedGaussianHasNoFeatureGradient) {
  const auto cam = square_camera(17, 20.0);
  GaussianCloud<double> cloud;
  // Three opaque walls (alpha clamped to 0.99) push transmittance below 1e-4.
  for (double z : {1.0, 1.1, 1.2}) cloud.push_back(isotropic(5.0, {0, 0, z}, 0.999));
  cloud.push_back(isotropic(0.5, {0, 0, 3.0}, 0.9));
  const int dim = 2;
  std::vector<double> features(cloud.size() * dim, 0.5);
  const auto fwd =
      render<double>(cloud, cam, RenderMode::feature, {}, FeatureRows<double>{features, dim});
  ImageT<double> upstream(17, 17, dim, 1.0);
  const auto g =
      render_backward<double>(cloud, fwd, upstream, FeatureRows<double>{features, dim});
  EXPECT_GT(std::abs(g.features[0]), 0.0);
  EXPECT_EQ(g.features[3 * dim], 0.0);
  EXPECT_EQ(g.features[3 * dim + 1], 0.0);
  EXPECT_EQ(g.params.opacity_logits[3], 0.0);
}

}  // namespace
}  // namespace legs
