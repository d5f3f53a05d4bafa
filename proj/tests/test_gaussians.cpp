#include <gtest/gtest.h>

#include <numbers>

#include "test_util.hpp"

using namespace splatpatch;
using splatpatch::testing::error_kind_of;
using splatpatch::testing::random_cloud;

namespace {

const double kSqrtPi = std::sqrt(std::numbers::pi);

// Real degree-2 SH written out from the closed-form normalizations.
std::array<double, 9> sh_table(const Vec3d& d) {
  const double x = d.x(), y = d.y(), z = d.z();
  return {1 / (2 * kSqrtPi),
          -std::sqrt(3.0) / (2 * kSqrtPi) * y,
          std::sqrt(3.0) / (2 * kSqrtPi) * z,
          -std::sqrt(3.0) / (2 * kSqrtPi) * x,
          std::sqrt(15.0) / (2 * kSqrtPi) * x * y,
          -std::sqrt(15.0) / (2 * kSqrtPi) * y * z,
          std::sqrt(5.0) / (4 * kSqrtPi) * (3 * z * z - 1),
          -std::sqrt(15.0) / (2 * kSqrtPi) * x * z,
          std::sqrt(15.0) / (4 * kSqrtPi) * (x * x - y * y)};
}

Vec3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  return Vec3d(g(rng), g(rng), g(rng)).normalized();
}

GaussianSet<double> random_set(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  GaussianSet<double> g;
  g.space = SpaceTag::World;
  for (std::size_t i = 0; i < n; ++i) {
    g.positions.emplace_back(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5);
    g.scales.emplace_back(0.1 * u(rng), 0.1 * u(rng));
    g.opacities.push_back(u(rng));
    g.sh.push_back(sh_from_rgb<double>(Vec3d(u(rng), u(rng), u(rng))));
    g.normals.push_back(random_unit(rng));
    g.angles.push_back(6 * u(rng));
  }
  return g;
}

}  // namespace

TEST(Sh, DcRoundTrip) {
  EXPECT_EQ(sh_from_rgb<double>(Vec3d(0.5, 0.5, 0.5)), ShCoeffs<double>::Zero());
  auto c = sh_from_rgb<double>(Vec3d(1, 0, 0.5));
  EXPECT_NEAR(c[0], 1.77245, 1e-5);
  EXPECT_NEAR(c[1], -1.77245, 1e-5);
  EXPECT_NEAR(c[2], 0.0, 1e-12);
  std::mt19937_64 rng(1);
  for (int t = 0; t < 10; ++t) EXPECT_LT((eval_sh(c, random_unit(rng)) - Vec3d(1, 0, 0.5)).norm(), 1e-6);
  EXPECT_EQ(eval_sh(ShCoeffs<double>::Zero().eval(), Vec3d(0, 0, 1)), Vec3d(0.5, 0.5, 0.5));
}

TEST(Sh, BasisMatchesClosedFormTable) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (int t = 0; t < 50; ++t) {
    const Vec3d d = t == 0 ? Vec3d(0, 0, 1) : random_unit(rng);
    const auto got = sh_basis(d);
    const auto want = sh_table(d);
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(got[k], want[k], 1e-14) << "basis " << k;
    ShCoeffs<double> c;
    for (int i = 0; i < 27; ++i) c[i] = u(rng);
    Vec3d expect = Vec3d::Constant(0.5);
    for (int k = 0; k < 9; ++k) expect += want[k] * c.segment<3>(3 * k);
    EXPECT_LT((eval_sh(c, d) - expect).norm(), 1e-12);
  }
}

TEST(Orientation, ReferenceCases) {
  auto q = normal_angle_to_quaternion(Vec3d(0, 0, 1), 0);
  EXPECT_NEAR(q.w, 1, 1e-15);
  EXPECT_NEAR(std::abs(q.x) + std::abs(q.y) + std::abs(q.z), 0, 1e-15);

  // Oracle: a 90 degree turn about +y built directly as a matrix.
  Eigen::Matrix3d m = Eigen::AngleAxisd(std::numbers::pi / 2, Vec3d::UnitY()).toRotationMatrix();
  Eigen::Quaterniond oracle(m);
  auto q1 = normal_angle_to_quaternion(Vec3d(1, 0, 0), 0);
  const double sign = q1.w * oracle.w() < 0 ? -1 : 1;
  EXPECT_NEAR(q1.w, sign * oracle.w(), 1e-12);
  EXPECT_NEAR(q1.y, sign * oracle.y(), 1e-12);
  EXPECT_NEAR(q1.w, std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(q1.y, std::sqrt(0.5), 1e-12);
  EXPECT_LT((quaternion_to_frame(q1).n - Vec3d(1, 0, 0)).norm(), 1e-12);

  auto f = quaternion_to_frame(Quaternion{});
  EXPECT_EQ(f.t_u, Vec3d::UnitX());
  EXPECT_EQ(f.t_v, Vec3d::UnitY());
  EXPECT_EQ(f.n, Vec3d::UnitZ());
}

TEST(Orientation, MatrixPathAgreesWithClosedForm) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ang(-10, 10);
  for (int t = 0; t < 200; ++t) {
    const Vec3d n = random_unit(rng);
    const double a = ang(rng);
    auto frame = quaternion_to_frame(normal_angle_to_quaternion(n, a));
    EXPECT_LT((frame.n - n).norm(), 1e-9);
    EXPECT_LT((frame.n - frame.t_u.cross(frame.t_v)).norm(), 1e-9);
    // Image of the x axis: take z onto n by the minimal rotation, then spin about n.
    const Vec3d axis = Vec3d::UnitZ().cross(n);
    const Eigen::Matrix3d m1 =
        Eigen::AngleAxisd(std::atan2(axis.norm(), n.z()), axis.normalized()).toRotationMatrix();
    const Vec3d tu = Eigen::AngleAxisd(a, n).toRotationMatrix() * (m1 * Vec3d::UnitX());
    EXPECT_LT((frame.t_u - tu).norm(), 1e-9);
    auto closed = frame_from_normal_angle<double>(n, a);
    EXPECT_LT((closed.t_u - frame.t_u).norm(), 1e-9);
    EXPECT_LT((closed.t_v - frame.t_v).norm(), 1e-9);
    EXPECT_LT((closed.n - frame.n).norm(), 1e-12);
  }
}

TEST(Orientation, AntiparallelNormal) {
  auto frame = quaternion_to_frame(normal_angle_to_quaternion(Vec3d(0, 0, -1), 0.3));
  EXPECT_LT((frame.n - Vec3d(0, 0, -1)).norm(), 1e-12);
  auto closed = frame_from_normal_angle<double>(Vec3d(0, 0, -1), 0.3);
  EXPECT_LT((closed.t_u - frame.t_u).norm(), 1e-9);
  EXPECT_EQ(error_kind_of([] { normal_angle_to_quaternion(Vec3d::Zero(), 0); }), ErrorKind::InvalidArgument);
}

TEST(Orientation, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  for (int t = 0; t < 50; ++t) {
    const Vec3d n = Vec3d(g(rng), g(rng), g(rng)) * 1.3;
    const double a = g(rng);
    const Vec3d wu(g(rng), g(rng), g(rng)), wv(g(rng), g(rng), g(rng)), wn(g(rng), g(rng), g(rng));
    auto loss = [&](const Vec3d& nn, double aa) {
      auto f = frame_from_normal_angle<double>(nn, aa);
      return wu.dot(f.t_u) + wv.dot(f.t_v) + wn.dot(f.n);
    };
    Vec3d gn;
    double ga;
    frame_backward<double>(n, a, frame_from_normal_angle<double>(n, a), wu, wv, wn, gn, ga);
    const double h = 1e-6;
    EXPECT_NEAR(ga, (loss(n, a + h) - loss(n, a - h)) / (2 * h), 1e-6);
    for (int i = 0; i < 3; ++i) {
      Vec3d e = Vec3d::Zero();
      e[i] = h;
      EXPECT_NEAR(gn[i], (loss(n + e, a) - loss(n - e, a)) / (2 * h), 1e-6);
    }
  }
}

TEST(Initialization, FollowsPointCloud) {
  auto cloud = random_cloud(300, 5);
  cloud.colors[0] = Vec3d(0.5, 0.5, 0.5);
  auto [norm, t] = normalize_cloud(cloud);
  NeighborIndex index(norm.positions);
  norm.normals = estimate_normals(norm, index, 16);
  const auto d = min_neighbor_distance(norm, index);
  auto g = initialize_gaussians<double>(norm, d);
  ASSERT_EQ(g.size(), cloud.size());
  g.validate();
  EXPECT_EQ(g.sh[0], ShCoeffs<double>::Zero());
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_EQ(g.opacities[i], 1.0);
    EXPECT_EQ(g.angles[i], 0.0);
    EXPECT_EQ(g.scales[i], Vec2<double>(d[i], d[i]));
    EXPECT_EQ(g.normals[i], (*norm.normals)[i]);
    EXPECT_EQ(g.positions[i], norm.positions[i]);
  }
  norm.normals.reset();
  EXPECT_EQ(error_kind_of([&] { initialize_gaussians<double>(norm, d); }), ErrorKind::MissingNormals);
}

TEST(Denormalize, DirectFormulaAndRoundTrip) {
  GaussianSet<double> g = random_set(1, 6);
  g.space = SpaceTag::Normalized;
  g.positions[0] = Vec3d(1, 0, 0);
  g.scales[0] = Vec2<double>(0.1, 0.2);
  NormalizationTransform t{Vec3d(5, 0, 0), 2.0};
  auto w = denormalize_gaussians(g, t);
  EXPECT_EQ(w.positions[0], Vec3d(7, 0, 0));
  EXPECT_LT((w.scales[0] - Vec2<double>(0.2, 0.4)).norm(), 1e-15);
  EXPECT_EQ(w.space, SpaceTag::World);
  EXPECT_EQ(w.sh, g.sh);
  EXPECT_EQ(w.normals, g.normals);
  EXPECT_EQ(error_kind_of([&] { denormalize_gaussians(w, t); }), ErrorKind::InvalidState);

  auto id = denormalize_gaussians(g, NormalizationTransform{});
  EXPECT_EQ(id.positions, g.positions);
  EXPECT_EQ(id.scales, g.scales);

  auto cloud = random_cloud(100, 7, 4.0);
  auto [norm, tr] = normalize_cloud(cloud);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    EXPECT_LT((tr.denormalize(norm.positions[i]) - cloud.positions[i]).norm(), 1e-9);
}

TEST(Merge, ConcatenatesInOrder) {
  auto a = random_set(3, 8), b = random_set(5, 9);
  GaussianSet<double> empty;
  empty.space = SpaceTag::World;
  EXPECT_EQ(merge_sets(a, empty), a);
  auto m = merge_sets(a, b);
  ASSERT_EQ(m.size(), 8u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(m.positions[i], a.positions[i]);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(m.sh[3 + i], b.sh[i]);

  GaussianSet<double> hand = a;
  for (std::size_t i = 0; i < b.size(); ++i) {
    hand.positions.push_back(b.positions[i]);
    hand.scales.push_back(b.scales[i]);
    hand.opacities.push_back(b.opacities[i]);
    hand.sh.push_back(b.sh[i]);
    hand.normals.push_back(b.normals[i]);
    hand.angles.push_back(b.angles[i]);
  }
  auto cam = look_at(Vec3d(0, 0, 3), Vec3d::Zero(), Vec3d::UnitY(), 32, 32, 40);
  EXPECT_EQ(render(m, cam), render(hand, cam));

  auto n = b;
  n.space = SpaceTag::Normalized;
  EXPECT_EQ(error_kind_of([&] { merge_sets(a, n); }), ErrorKind::InvalidState);
}

TEST(GaussianSet, ValidateChecksFields) {
  auto g = random_set(4, 10);
  g.validate();
  auto bad = g;
  bad.opacities[1] = 1.5;
  EXPECT_EQ(error_kind_of([&] { bad.validate(); }), ErrorKind::InvalidArgument);
  bad = g;
  bad.scales[2].x() = 0;
  EXPECT_EQ(error_kind_of([&] { bad.validate(); }), ErrorKind::InvalidArgument);
  bad = g;
  bad.angles.pop_back();
  EXPECT_EQ(error_kind_of([&] { bad.validate(); }), ErrorKind::ShapeError);
  EXPECT_EQ(g.cast<float>().cast<double>().size(), g.size());
}
