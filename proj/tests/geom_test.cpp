#include <gtest/gtest.h>

#include <random>

#include <Eigen/Eigenvalues>

#include "legs/geom.hpp"

namespace legs {
namespace {

Se3Pose random_pose(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return {Eigen::Vector3d(n(rng), n(rng), n(rng)),
          Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng))};
}

PinholeCamera test_camera(const Se3Pose& pose = {}) {
  PinholeCamera cam;
  cam.fx = 100;
  cam.fy = 90;
  cam.cx = 50;
  cam.cy = 40;
  cam.width = 100;
  cam.height = 80;
  cam.pose = pose;
  return cam;
}

TEST(Se3, ComposeWithIdentity) {
  std::mt19937_64 rng(1);
  const Se3Pose t = random_pose(rng);
  const Se3Pose c = se3_compose(Se3Pose::identity(), t);
  EXPECT_TRUE(c.translation.isApprox(t.translation, 1e-12));
  EXPECT_LT(rotation_distance(c, t), 1e-12);
}

TEST(Se3, PureTranslationApply) {
  const Se3Pose t(Eigen::Vector3d(1, 0, 0), Eigen::Quaterniond::Identity());
  EXPECT_TRUE(se3_apply(t, Eigen::Vector3d::Zero()).isApprox(Eigen::Vector3d(1, 0, 0)));
}

TEST(Se3, InverseIsGroupInverse) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const Se3Pose t = random_pose(rng);
    for (const Se3Pose& c : {se3_compose(t, se3_inverse(t)), se3_compose(se3_inverse(t), t)}) {
      EXPECT_LT(c.translation.norm(), 1e-9);
      EXPECT_LT(rotation_distance(c, Se3Pose::identity()), 1e-9);
      EXPECT_NEAR(c.rotation.norm(), 1.0, 1e-9);
    }
  }
}

TEST(Se3, ConstructorNormalizes) {
  const Se3Pose t(Eigen::Vector3d::Zero(), Eigen::Quaterniond(2, 0, 0, 0));
  EXPECT_NEAR(t.rotation.norm(), 1.0, 1e-12);
}

TEST(Quaternion, MatrixRoundTripUpToSign) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    Vec4<double> q(n(rng), n(rng), n(rng), n(rng));
    q.normalize();
    const Vec4<double> back = matrix_to_quat<double>(quat_to_matrix<double>(q));
    const double err = std::min((back - q).norm(), (back + q).norm());
    EXPECT_LT(err, 1e-9);
  }
}

TEST(Camera, DeprojectPrincipalPoint) {
  const auto p = deproject_pixel(50, 40, 2.0, test_camera());
  ASSERT_TRUE(p);
  EXPECT_TRUE(p->isApprox(Eigen::Vector3d(0, 0, 2)));
}

TEST(Camera, DeprojectPinholeFormula) {
  const auto p = deproject_pixel(60, 40, 1.0, test_camera());
  ASSERT_TRUE(p);
  EXPECT_NEAR(p->x(), 0.1, 1e-12);
  EXPECT_NEAR(p->y(), 0.0, 1e-12);
  EXPECT_NEAR(p->z(), 1.0, 1e-12);
}

TEST(Camera, DeprojectRejectsInvalidDepth) {
  const auto cam = test_camera();
  EXPECT_FALSE(deproject_pixel(10, 10, 0.0, cam));
  EXPECT_FALSE(deproject_pixel(10, 10, -1.0, cam));
  EXPECT_FALSE(deproject_pixel(10, 10, std::numeric_limits<double>::quiet_NaN(), cam));
  EXPECT_FALSE(deproject_pixel(10, 10, std::numeric_limits<double>::infinity(), cam));
}

TEST(Camera, ProjectOnAxis) {
  const auto pr = project_point(Eigen::Vector3d(0, 0, 2), test_camera());
  EXPECT_TRUE(pr.in_front);
  EXPECT_DOUBLE_EQ(pr.u, 50);
  EXPECT_DOUBLE_EQ(pr.v, 40);
  EXPECT_DOUBLE_EQ(pr.z_cam, 2);
}

TEST(Camera, ProjectBehindCamera) {
  EXPECT_FALSE(project_point(Eigen::Vector3d(0, 0, -1), test_camera()).in_front);
  EXPECT_FALSE(project_point(Eigen::Vector3d(0, 0, 0.005), test_camera()).in_front);
}

// Property: deproject and project are mutually inverse under random poses.
TEST(Camera, ProjectDeprojectRoundTrip) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 100), v(0, 80), z(0.02, 20);
  for (int i = 0; i < 500; ++i) {
    const auto cam = test_camera(random_pose(rng));
    const double pu = u(rng), pv = v(rng), pz = z(rng);
    const auto p = deproject_pixel(pu, pv, pz, cam);
    ASSERT_TRUE(p);
    const auto pr = project_point(*p, cam);
    ASSERT_TRUE(pr.in_front);
    EXPECT_NEAR(pr.u, pu, 1e-6);
    EXPECT_NEAR(pr.v, pv, 1e-6);
    EXPECT_NEAR(pr.z_cam, pz, 1e-9);
  }
}

TEST(Camera, ResizeKeepsOpticalAxis) {
  const auto cam = test_camera();
  const auto small = cam.resized(25, 20);
  const auto pr_full = project_point(Eigen::Vector3d(0.3, -0.2, 2), cam);
  const auto pr_small = project_point(Eigen::Vector3d(0.3, -0.2, 2), small);
  EXPECT_NEAR((pr_full.u + 0.5) / 4.0 - 0.5, pr_small.u, 1e-12);
  EXPECT_NEAR((pr_full.v + 0.5) / 4.0 - 0.5, pr_small.v, 1e-12);
}

TEST(Covariance, IdentityScale) {
  Gaussian<double> g;
  EXPECT_TRUE(covariance_of(g).isApprox(Mat3<double>::Identity()));
}

TEST(Covariance, LogScaleLn2) {
  Gaussian<double> g;
  g.log_scale = Vec3<double>(std::log(2.0), 0, 0);
  const Mat3<double> expected = Vec3<double>(4, 1, 1).asDiagonal();
  EXPECT_TRUE(covariance_of(g).isApprox(expected, 1e-12));
}

// Eigendecomposition oracle: eigenvalues are exp(2 log_scale).
TEST(Covariance, EigenvaluesMatchScales) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    Gaussian<double> g;
    g.log_scale = Vec3<double>(0.5 * n(rng), 0.5 * n(rng), 0.5 * n(rng));
    g.rotation = Vec4<double>(n(rng), n(rng), n(rng), n(rng));
    const Mat3<double> cov = covariance_of(g);
    EXPECT_LT((cov - cov.transpose()).norm(), 1e-12);
    Eigen::SelfAdjointEigenSolver<Mat3<double>> es(cov);
    std::array<double, 3> got{es.eigenvalues()[0], es.eigenvalues()[1], es.eigenvalues()[2]};
    std::array<double, 3> want{std::exp(2 * g.log_scale[0]), std::exp(2 * g.log_scale[1]),
                               std::exp(2 * g.log_scale[2])};
    std::sort(want.begin(), want.end());
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(got[k], want[k], 1e-9);
    EXPECT_GT(got[0], 0.0);

    Gaussian<double> flipped = g;
    flipped.rotation = -g.rotation;
    EXPECT_LT((covariance_of(flipped) - cov).norm(), 1e-12);
  }
}

TEST(Psnr, ClosedForms) {
  Image a(4, 4, 3, 0.5f), b(4, 4, 3, 0.5f);
  EXPECT_DOUBLE_EQ(psnr(a, b), 100.0);
  for (auto& x : b.data) x = 0.6f;  // MSE 0.01
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-4);
  for (auto& x : b.data) x = 0.51f;  // MSE 0.0001
  EXPECT_NEAR(psnr(a, b), 40.0, 1e-3);
}

TEST(Psnr, DimensionMismatchThrows) {
  EXPECT_THROW(psnr(Image(2, 2, 3), Image(3, 2, 3)), DataError);
}

}  // namespace
}  // namespace legs
