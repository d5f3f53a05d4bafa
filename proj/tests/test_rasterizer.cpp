#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace splatpatch;
using splatpatch::testing::error_kind_of;

namespace {

// Camera at the origin looking down +z.
Camera axis_camera(int size, double focal) {
  Camera cam;
  cam.intrinsics << focal, 0, size / 2.0, 0, focal, size / 2.0, 0, 0, 1;
  cam.width = cam.height = size;
  return cam;
}

GaussianSet<double> facing_splat(const Vec3d& pos, double scale, double opacity, const Vec3d& rgb) {
  GaussianSet<double> g;
  g.space = SpaceTag::World;
  g.positions = {pos};
  g.scales = {Vec2<double>(scale, scale)};
  g.opacities = {opacity};
  g.sh = {sh_from_rgb<double>(rgb)};
  g.normals = {Vec3d(0, 0, -1)};
  g.angles = {0.0};
  return g;
}

// Every scalar parameter of one splat, in a fixed order.
std::vector<double*> params_of(GaussianSet<double>& g, std::size_t i) {
  std::vector<double*> out;
  for (int c = 0; c < 3; ++c) out.push_back(&g.positions[i][c]);
  for (int c = 0; c < 2; ++c) out.push_back(&g.scales[i][c]);
  out.push_back(&g.opacities[i]);
  for (int c = 0; c < 27; ++c) out.push_back(&g.sh[i][c]);
  for (int c = 0; c < 3; ++c) out.push_back(&g.normals[i][c]);
  out.push_back(&g.angles[i]);
  return out;
}

std::vector<double> grads_of(const GaussianGradients<double>& g, std::size_t i) {
  std::vector<double> out;
  for (int c = 0; c < 3; ++c) out.push_back(g.positions[i][c]);
  for (int c = 0; c < 2; ++c) out.push_back(g.scales[i][c]);
  out.push_back(g.opacities[i]);
  for (int c = 0; c < 27; ++c) out.push_back(g.sh[i][c]);
  for (int c = 0; c < 3; ++c) out.push_back(g.normals[i][c]);
  out.push_back(g.angles[i]);
  return out;
}

double weighted(const ImageBuffer<double>& img, const ImageBuffer<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < img.rgb.size(); ++i) s += img.rgb[i] * w.rgb[i];
  return s;
}

struct FdStats {
  int checked = 0, skipped = 0, failed = 0;
};

// Central differences of sum(w * render) against render_backward. Partials
// whose stencil changes the discrete render decisions are skipped.
FdStats compare_fd(GaussianSet<double> g, const Camera& cam, const ImageBuffer<double>& w, double h, double rel,
                   double abs_tol, const RenderOptions& opts = {}) {
  FdStats st;
  const auto grads = render_backward(g, cam, opts, w);
  RenderDiagnostics<double> base;
  render(g, cam, opts, &base);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (base.min_abs_cos[i] < 1e-3) continue;
    auto ps = params_of(g, i);
    auto an = grads_of(grads, i);
    for (std::size_t p = 0; p < ps.size(); ++p) {
      const double keep = *ps[p];
      RenderDiagnostics<double> dp, dm;
      *ps[p] = keep + h;
      const double lp = weighted(render(g, cam, opts, &dp), w);
      *ps[p] = keep - h;
      const double lm = weighted(render(g, cam, opts, &dm), w);
      *ps[p] = keep;
      if (dp.signature != base.signature || dm.signature != base.signature) {
        ++st.skipped;
        continue;
      }
      const double fd = (lp - lm) / (2 * h);
      const double allowed = std::max(rel * std::max(std::abs(fd), std::abs(an[p])), abs_tol);
      ++st.checked;
      if (std::abs(fd - an[p]) > allowed) {
        ++st.failed;
        ADD_FAILURE() << "splat " << i << " param " << p << " analytic " << an[p] << " fd " << fd;
      }
    }
  }
  return st;
}

}  // namespace

TEST(Render, EmptySetIsBackground) {
  GaussianSet<double> g;
  g.space = SpaceTag::World;
  RenderOptions opts;
  opts.background = Vec3d(0.2, 0.4, 0.6);
  auto img = render(g, axis_camera(20, 20), opts);
  EXPECT_EQ(img, solid_image<double>(20, 20, Vec3d(0.2, 0.4, 0.6)));
}

TEST(Render, LargeFacingSplatFillsCenter) {
  RenderOptions opts;
  opts.background = Vec3d::Zero();
  auto img = render(facing_splat(Vec3d(0, 0, 2), 0.5, 1.0, Vec3d::Ones()), axis_camera(32, 32), opts);
  // Pixel (16, 16) is sampled half a pixel off axis: the ray meets the disk at (1/32, 1/32).
  const double r2 = 2 * (1.0 / 32) * (1.0 / 32) / 0.25;
  EXPECT_NEAR(img.pixel(16, 16).x(), std::exp(-0.5 * r2), 1e-12);
  EXPECT_LT(img.pixel(0, 0).maxCoeff(), 0.3);
  auto wide = render(facing_splat(Vec3d(0, 0, 2), 0.1, 1.0, Vec3d::Ones()), axis_camera(64, 64), opts);
  EXPECT_EQ(wide.pixel(0, 0), Vec3d::Zero());
}

TEST(Render, TwoSplatCompositingMatchesHandOracle) {
  // The front disk is wide enough for its alpha to hit the clamp.
  auto g = facing_splat(Vec3d(0, 0, 2), 4.0, 1.0, Vec3d(1, 0, 0));
  g = merge_sets(g, facing_splat(Vec3d(0, 0, 3), 0.8, 1.0, Vec3d(0, 0, 1)));
  RenderOptions opts;
  opts.background = Vec3d(0, 1, 0);
  const auto cam = axis_camera(16, 16);
  auto img = render(g, cam, opts);
  // Pixel (8, 8) is sampled at (8.5, 8.5); evaluate each disk on that ray.
  const Vec3d ray((8.5 - 8) / 16, (8.5 - 8) / 16, 1);
  auto alpha_at = [&](double z, double scale) {
    const Vec3d hit = ray * z;
    const double r2 = (hit.x() * hit.x() + hit.y() * hit.y()) / (scale * scale);
    return std::min(0.999, std::exp(-0.5 * r2));
  };
  const double a1 = alpha_at(2, 4.0), a2 = alpha_at(3, 0.8);
  ASSERT_LT(a2, 0.999);
  ASSERT_EQ(a1, 0.999);
  const Vec3d expect = Vec3d(1, 0, 0) * a1 + Vec3d(0, 0, 1) * a2 * (1 - a1) + Vec3d(0, 1, 0) * (1 - a1) * (1 - a2);
  EXPECT_LT((img.pixel(8, 8) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Render, RejectsBadInput) {
  auto g = facing_splat(Vec3d(0, 0, 2), 0.5, 1.0, Vec3d::Ones());
  g.space = SpaceTag::Normalized;
  EXPECT_EQ(error_kind_of([&] { render(g, axis_camera(8, 8)); }), ErrorKind::InvalidState);
  g.space = SpaceTag::World;
  g.positions[0].x() = std::numeric_limits<double>::infinity();
  EXPECT_EQ(error_kind_of([&] { render(g, axis_camera(8, 8)); }), ErrorKind::NonFiniteInput);
}

TEST(Render, PixelBoxesContainEveryCoveredPixel) {
  // Brute force over all pixels: any ray that meets a disk inside its
  // 3-sigma ellipse, or lands within 3 sigma of a low-pass center, must lie
  // inside that splat's pixel box.
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-1, 1), s(0.01, 0.6);
  const int size = 48;
  const Camera cam = axis_camera(size, 40);
  const detail::CameraT<double> camt(cam);
  const RenderOptions opts;
  int covered = 0;
  for (int trial = 0; trial < 300; ++trial) {
    GaussianSet<double> g;
    g.space = SpaceTag::World;
    g.positions = {Vec3d(u(rng), u(rng), 2.5 + u(rng))};
    g.scales = {Vec2<double>(s(rng), trial % 5 == 0 ? 0.005 : s(rng))};
    g.opacities = {1.0};
    g.sh = {ShCoeffs<double>::Zero()};
    g.normals = {Vec3d(u(rng), u(rng), u(rng)).normalized()};
    g.angles = {3 * u(rng)};
    const auto prep = detail::prepare(g, camt, opts);
    const auto& v = prep.views[0];
    const bool listed = !prep.order.empty();
    // Orientation through the quaternion path, independent of the renderer's closed form.
    const auto frame = quaternion_to_frame(normal_angle_to_quaternion(g.normals[0], g.angles[0]));
    for (int py = 0; py < size; ++py)
      for (int px = 0; px < size; ++px) {
        const Vec3d dir = camt.ray(px + 0.5, py + 0.5);
        const Vec3d r = g.positions[0] - camt.origin;
        const double dn = dir.dot(frame.n);
        bool hit = false;
        if (std::abs(dn) > 1e-9) {
          const double t = r.dot(frame.n) / dn;
          const Vec3d q = t * dir - r;
          const double a = q.dot(frame.t_u) / g.scales[0].x(), b = q.dot(frame.t_v) / g.scales[0].y();
          hit = t > 0 && a * a + b * b <= 9.0;
        }
        if (v.lowpass) hit = hit || (Vec2<double>(px + 0.5, py + 0.5) - v.uv).squaredNorm() <= 9 * 0.7 * 0.7;
        if (!hit) continue;
        ++covered;
        ASSERT_TRUE(listed) << "trial " << trial;
        ASSERT_TRUE(px >= v.x0 && px < v.x1 && py >= v.y0 && py < v.y1)
            << "trial " << trial << " pixel " << px << "," << py << " box " << v.x0 << ".." << v.x1 << " x "
            << v.y0 << ".." << v.y1;
      }
  }
  EXPECT_GT(covered, 10000);
}

TEST(Render, ThreadCountDoesNotChangePixels) {
  std::mt19937_64 rng(5);
  auto s = random_splat_scene(rng, 4, 40);
  const int before = thread_count();
  set_thread_count(1);
  auto a = render(s.gaussians, s.camera, s.options);
  auto ga = render_backward(s.gaussians, s.camera, s.options, s.weights);
  set_thread_count(4);
  auto b = render(s.gaussians, s.camera, s.options);
  auto gb = render_backward(s.gaussians, s.camera, s.options, s.weights);
  set_thread_count(before);
  EXPECT_EQ(a, b);
  EXPECT_EQ(ga.positions, gb.positions);
  EXPECT_EQ(ga.sh, gb.sh);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 rng(6);
  auto s = random_splat_scene(rng, 4, 24);
  ImageBuffer<double> zero(s.camera.width, s.camera.height);
  auto g = render_backward(s.gaussians, s.camera, s.options, zero);
  for (std::size_t i = 0; i < g.size(); ++i)
    for (double v : grads_of(g, i)) EXPECT_EQ(v, 0.0);
}

TEST(Backward, CenterPixelOpacity) {
  auto g = facing_splat(Vec3d(0.02, -0.01, 2), 0.3, 0.6, Vec3d(0.8, 0.3, 0.1));
  const auto cam = axis_camera(16, 16);
  ImageBuffer<double> w(16, 16);
  for (int c = 0; c < 3; ++c) w.at(8, 8, c) = 1;
  const auto an = render_backward(g, cam, {}, w).opacities[0];
  const double h = 1e-4;
  auto gp = g, gm = g;
  gp.opacities[0] += h;
  gm.opacities[0] -= h;
  const double fd = (weighted(render(gp, cam), w) - weighted(render(gm, cam), w)) / (2 * h);
  EXPECT_NEAR(an, fd, 1e-3 * std::abs(fd));
}

TEST(Backward, RandomSplatsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> gauss;
  GaussianSet<double> g;
  g.space = SpaceTag::World;
  for (int i = 0; i < 10; ++i) {
    g.positions.emplace_back(u(rng) - 0.5, u(rng) - 0.5, 0.6 * u(rng) - 0.3);
    g.scales.emplace_back(0.05 + 0.3 * u(rng), 0.05 + 0.3 * u(rng));
    g.opacities.push_back(0.1 + 0.8 * u(rng));
    ShCoeffs<double> sh;
    for (auto& c : sh) c = 0.3 * gauss(rng);
    g.sh.push_back(sh);
    Vec3d n(gauss(rng), gauss(rng), gauss(rng) - 3);
    g.normals.push_back(n.normalized());
    g.angles.push_back(6 * u(rng));
  }
  const auto cam = look_at(Vec3d(0.3, -0.2, -3), Vec3d::Zero(), Vec3d::UnitY(), 32, 32, 40);
  ImageBuffer<double> w(32, 32);
  for (auto& v : w.rgb) v = 2 * u(rng) - 1;
  RenderOptions opts;
  opts.background = Vec3d(0.3, 0.6, 0.9);
  auto st = compare_fd(g, cam, w, 1e-6, 1e-3, 1e-6, opts);
  EXPECT_EQ(st.failed, 0);
  EXPECT_GT(st.checked, 300);
}

TEST(Backward, LowpassRegimeMatchesFiniteDifferences) {
  // Splats far smaller than a pixel so the screen-space floor dominates.
  auto g = facing_splat(Vec3d(0.013, 0.021, 4), 0.004, 0.7, Vec3d(0.9, 0.2, 0.4));
  g = merge_sets(g, facing_splat(Vec3d(-0.02, 0.005, 5), 0.003, 0.5, Vec3d(0.1, 0.7, 0.3)));
  g.normals[1] = Vec3d(0.2, -0.1, -1).normalized();
  const auto cam = axis_camera(16, 20);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1, 1);
  ImageBuffer<double> w(16, 16);
  for (auto& v : w.rgb) v = u(rng);
  RenderDiagnostics<double> d;
  render(g, cam, {}, &d);
  auto st = compare_fd(g, cam, w, 1e-6, 1e-3, 1e-6);
  EXPECT_EQ(st.failed, 0);
  EXPECT_GT(st.checked, 40);
  // Positions and opacity must carry gradient through the floor.
  auto grads = render_backward(g, cam, {}, w);
  EXPECT_NE(grads.positions[0].x(), 0.0);
  EXPECT_NE(grads.opacities[0], 0.0);
}

TEST(Backward, LibraryGradcheckPasses) {
  auto report = rasterizer_gradcheck(25, 99);
  EXPECT_TRUE(report.passed()) << report.worst_where << " ratio " << report.worst_ratio;
  EXPECT_GT(report.checked, 1000u);
  EXPECT_LT(report.excluded_fraction(), 0.2);
}
