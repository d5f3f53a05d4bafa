#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "splatpatch/camera.hpp"
#include "splatpatch/error.hpp"
#include "splatpatch/geometry.hpp"
#include "splatpatch/image.hpp"
#include "splatpatch/io.hpp"

namespace splatpatch {

struct Triangle {
  Vec3d a, b, c;
  Vec3d color;

  Vec3d normal() const { return (b - a).cross(c - a).normalized(); }
  double area() const { return 0.5 * (b - a).cross(c - a).norm(); }
};

struct Mesh {
  std::vector<Triangle> triangles;

  double area() const {
    double s = 0;
    for (const auto& t : triangles) s += t.area();
    return s;
  }

  /// Radius of the smallest origin-centered ball holding every vertex.
  double radius() const {
    double r = 0;
    for (const auto& t : triangles) r = std::max({r, t.a.norm(), t.b.norm(), t.c.norm()});
    return r;
  }

  bool operator==(const Mesh& o) const {
    if (triangles.size() != o.triangles.size()) return false;
    for (std::size_t i = 0; i < triangles.size(); ++i) {
      const auto &x = triangles[i], &y = o.triangles[i];
      if (x.a != y.a || x.b != y.b || x.c != y.c || x.color != y.color) return false;
    }
    return true;
  }
};

enum class SceneKind { Cube, Sphere, CheckerPlane, TwoSpheres };

inline SceneKind parse_scene_kind(const std::string& name) {
  if (name == "cube") return SceneKind::Cube;
  if (name == "sphere") return SceneKind::Sphere;
  if (name == "checker_plane" || name == "plane") return SceneKind::CheckerPlane;
  if (name == "two_spheres") return SceneKind::TwoSpheres;
  fail(ErrorKind::InvalidArgument, "unknown scene kind '" + name + "'");
}

inline std::string to_string(SceneKind k) {
  switch (k) {
    case SceneKind::Cube: return "cube";
    case SceneKind::Sphere: return "sphere";
    case SceneKind::CheckerPlane: return "checker_plane";
    case SceneKind::TwoSpheres: return "two_spheres";
  }
  return "unknown";
}

struct SceneParams {
  double size = 1.0;       // cube edge, sphere diameter, plane edge
  int sphere_level = 3;    // icosphere subdivisions
  int checker_cells = 8;   // cells per plane edge
  int sphere_bands = 4;    // latitude color bands
};

namespace detail {

inline Vec3d random_color(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 0.9);
  const double r = u(rng), g = u(rng), b = u(rng);
  return {r, g, b};
}

/// Unit icosphere triangles (outward winding).
inline std::vector<std::array<Vec3d, 3>> icosphere(int level) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3d> v = {{-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0}, {0, -1, t},  {0, 1, t},
                          {0, -1, -t}, {0, 1, -t}, {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : v) p.normalize();
  const int f[20][3] = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
                        {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
                        {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  std::vector<std::array<Vec3d, 3>> tris;
  for (const auto& face : f) tris.push_back({v[face[0]], v[face[1]], v[face[2]]});
  for (int l = 0; l < level; ++l) {
    std::vector<std::array<Vec3d, 3>> next;
    next.reserve(tris.size() * 4);
    for (const auto& t : tris) {
      const Vec3d ab = (t[0] + t[1]).normalized(), bc = (t[1] + t[2]).normalized(), ca = (t[2] + t[0]).normalized();
      next.push_back({t[0], ab, ca});
      next.push_back({t[1], bc, ab});
      next.push_back({t[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    tris = std::move(next);
  }
  return tris;
}

inline void add_sphere(Mesh& m, const Vec3d& center, double radius, const SceneParams& p, std::mt19937_64& rng) {
  std::vector<Vec3d> bands;
  for (int b = 0; b < p.sphere_bands; ++b) bands.push_back(random_color(rng));
  for (const auto& t : icosphere(p.sphere_level)) {
    const double z = (t[0].z() + t[1].z() + t[2].z()) / 3.0;
    const int band = std::clamp(static_cast<int>((z + 1.0) / 2.0 * p.sphere_bands), 0, p.sphere_bands - 1);
    m.triangles.push_back({center + radius * t[0], center + radius * t[1], center + radius * t[2], bands[band]});
  }
}

}  // namespace detail

/// Colored mesh centered at the origin; colors are drawn from the seed.
inline Mesh make_scene(SceneKind kind, const SceneParams& params, std::uint64_t seed) {
  require(params.size > 0 && std::isfinite(params.size), ErrorKind::InvalidArgument, "scene size must be > 0");
  require(params.sphere_level >= 0 && params.sphere_level <= 7, ErrorKind::InvalidArgument,
          "sphere level must lie in [0,7]");
  require(params.checker_cells >= 1 && params.sphere_bands >= 1, ErrorKind::InvalidArgument,
          "checker cells and sphere bands must be >= 1");
  std::mt19937_64 rng(seed);
  Mesh m;
  const double h = params.size / 2;
  switch (kind) {
    case SceneKind::Cube: {
      // Each face: outward axis, then two in-plane axes with u x v = outward.
      const Vec3d axes[6][3] = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}},  {{-1, 0, 0}, {0, 0, 1}, {0, 1, 0}},
                                {{0, 1, 0}, {0, 0, 1}, {1, 0, 0}},  {{0, -1, 0}, {1, 0, 0}, {0, 0, 1}},
                                {{0, 0, 1}, {1, 0, 0}, {0, 1, 0}},  {{0, 0, -1}, {0, 1, 0}, {1, 0, 0}}};
      for (const auto& f : axes) {
        const Vec3d c = f[0] * h, u = f[1] * h, v = f[2] * h;
        const Vec3d color = detail::random_color(rng);
        m.triangles.push_back({c - u - v, c + u - v, c + u + v, color});
        m.triangles.push_back({c - u - v, c + u + v, c - u + v, color});
      }
      break;
    }
    case SceneKind::Sphere:
      detail::add_sphere(m, Vec3d::Zero(), h, params, rng);
      break;
    case SceneKind::CheckerPlane: {
      const Vec3d c0 = detail::random_color(rng), c1 = detail::random_color(rng);
      const int n = params.checker_cells;
      const double cell = params.size / n;
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
          const Vec3d p0(-h + i * cell, -h + j * cell, 0), p1 = p0 + Vec3d(cell, 0, 0), p2 = p0 + Vec3d(cell, cell, 0),
                                                       p3 = p0 + Vec3d(0, cell, 0);
          const Vec3d& color = (i + j) % 2 ? c1 : c0;
          m.triangles.push_back({p0, p1, p2, color});
          m.triangles.push_back({p0, p2, p3, color});
        }
      break;
    }
    case SceneKind::TwoSpheres:
      detail::add_sphere(m, Vec3d(-h / 2, 0, 0), h / 2, params, rng);
      detail::add_sphere(m, Vec3d(h / 2, 0, 0), h / 2, params, rng);
      break;
  }
  return m;
}

/// Exactly n area-weighted uniform surface samples colored by their face.
inline PointCloud sample_points(const Mesh& mesh, std::size_t n, std::uint64_t seed,
                                std::vector<std::uint32_t>* face_ids = nullptr) {
  require(n >= 1, ErrorKind::InvalidArgument, "sample count must be >= 1");
  require(!mesh.triangles.empty(), ErrorKind::InvalidArgument, "cannot sample an empty mesh");
  std::vector<double> cdf(mesh.triangles.size());
  double total = 0;
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) cdf[i] = total += mesh.triangles[i].area();
  require(total > 0 && std::isfinite(total), ErrorKind::InvalidArgument, "mesh has zero surface area");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  PointCloud cloud;
  cloud.positions.reserve(n);
  cloud.colors.reserve(n);
  if (face_ids) face_ids->clear();
  for (std::size_t s = 0; s < n; ++s) {
    const double pick = u01(rng) * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), pick);
    if (it == cdf.end()) --it;
    const auto f = static_cast<std::size_t>(it - cdf.begin());
    const Triangle& t = mesh.triangles[f];
    const double r1 = std::sqrt(u01(rng)), r2 = u01(rng);
    cloud.positions.push_back((1 - r1) * t.a + r1 * (1 - r2) * t.b + r1 * r2 * t.c);
    cloud.colors.push_back(t.color);
    if (face_ids) face_ids->push_back(static_cast<std::uint32_t>(f));
  }
  return cloud;
}

/// Z-buffered flat-shaded rasterization sampled at pixel centers with the
/// top-left fill rule. Triangles crossing the near plane are clipped.
inline ImageBuffer<float> render_gt(const Mesh& mesh, const Camera& cam, const Vec3d& background) {
  cam.validate();
  ImageBuffer<float> img = solid_image<float>(cam.width, cam.height, background.cast<float>());
  std::vector<double> zbuf(img.pixel_count(), std::numeric_limits<double>::infinity());
  const Eigen::Matrix3d R = cam.rotation();
  const Vec3d t = cam.translation();
  auto draw = [&](const std::array<Vec3d, 3>& cv, const Vec3d& color) {
    std::array<Eigen::Vector2d, 3> p;
    for (int i = 0; i < 3; ++i)
      p[i] = {cam.fx() * cv[i].x() / cv[i].z() + cam.cx(), cam.fy() * cv[i].y() / cv[i].z() + cam.cy()};
    auto edge = [](const Eigen::Vector2d& a, const Eigen::Vector2d& b, double x, double y) {
      return (b.x() - a.x()) * (y - a.y()) - (b.y() - a.y()) * (x - a.x());
    };
    double area = edge(p[0], p[1], p[2].x(), p[2].y());
    if (area == 0 || !std::isfinite(area)) return;
    std::array<int, 3> idx = {0, 1, 2};
    if (area < 0) {
      std::swap(idx[1], idx[2]);
      area = -area;
    }
    const Eigen::Vector2d q[3] = {p[idx[0]], p[idx[1]], p[idx[2]]};
    const double inv_z[3] = {1 / cv[idx[0]].z(), 1 / cv[idx[1]].z(), 1 / cv[idx[2]].z()};
    // With positive area in y-down pixel space the edges run clockwise on
    // screen; top edges are horizontal going right, left edges go up.
    bool top_left[3];
    for (int e = 0; e < 3; ++e) {
      const Eigen::Vector2d d = q[(e + 1) % 3] - q[e];
      top_left[e] = (d.y() == 0 && d.x() > 0) || d.y() < 0;
    }
    const double xmin = std::min({q[0].x(), q[1].x(), q[2].x()}), xmax = std::max({q[0].x(), q[1].x(), q[2].x()});
    const double ymin = std::min({q[0].y(), q[1].y(), q[2].y()}), ymax = std::max({q[0].y(), q[1].y(), q[2].y()});
    const int x0 = std::max(0, static_cast<int>(std::floor(xmin - 0.5)));
    const int x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(xmax - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
    const int y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(ymax - 0.5)));
    const Eigen::Vector3f c = color.cast<float>();
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double sx = x + 0.5, sy = y + 0.5;
        double w[3];
        bool inside = true;
        for (int e = 0; e < 3 && inside; ++e) {
          w[e] = edge(q[e], q[(e + 1) % 3], sx, sy);
          inside = w[e] > 0 || (w[e] == 0 && top_left[e]);
        }
        if (!inside) continue;
        // w[e] weights the vertex opposite edge e.
        const double l0 = w[1] / area, l1 = w[2] / area, l2 = w[0] / area;
        const double z = 1.0 / (l0 * inv_z[0] + l1 * inv_z[1] + l2 * inv_z[2]);
        const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
        if (z < zbuf[pix]) {
          zbuf[pix] = z;
          img.set_pixel(x, y, c);
        }
      }
  };
  const double near = cam.near;
  for (const auto& tri : mesh.triangles) {
    std::vector<Vec3d> poly = {R * tri.a + t, R * tri.b + t, R * tri.c + t};
    // Clip against z = near.
    std::vector<Vec3d> clipped;
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const Vec3d& a = poly[i];
      const Vec3d& b = poly[(i + 1) % poly.size()];
      const bool ina = a.z() > near, inb = b.z() > near;
      if (ina) clipped.push_back(a);
      if (ina != inb) clipped.push_back(a + (b - a) * ((near - a.z()) / (b.z() - a.z())));
    }
    for (std::size_t i = 1; i + 1 < clipped.size(); ++i) draw({clipped[0], clipped[i], clipped[i + 1]}, tri.color);
  }
  return img;
}

/// Evenly spread cameras on a sphere (Fibonacci spiral) looking at the
/// origin with +z as world up; focal length equals the image width.
inline std::vector<Camera> view_sphere_cameras(std::size_t n_views, double radius, int width, int height) {
  require(n_views >= 1, ErrorKind::InvalidArgument, "need at least one view");
  require(radius > 0, ErrorKind::InvalidArgument, "view radius must be positive");
  std::vector<Camera> cams;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n_views; ++i) {
    const double z = 1.0 - 2.0 * (double(i) + 0.5) / double(n_views);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * double(i);
    const Vec3d eye = radius * Vec3d(r * std::cos(phi), r * std::sin(phi), z);
    cams.push_back(look_at(eye, Vec3d::Zero(), Vec3d::UnitZ(), width, height, double(width)));
  }
  return cams;
}

inline constexpr double kViewRadiusFactor = 2.5;

struct DatasetSpec {
  std::vector<SceneKind> kinds = {SceneKind::Cube};
  std::size_t scenes = 1;
  std::size_t views = 16;
  int resolution = 64;
  std::size_t points = 2048;
  std::uint64_t seed = 0;
  Vec3d background = Vec3d::Ones();
  SceneParams params;
};

/// Writes out_dir/scene_XXX/{cloud.ply, views/NNN.png, manifest.txt} and
/// returns the manifest paths.
inline std::vector<fs::path> emit_dataset(const DatasetSpec& spec, const fs::path& out_dir) {
  require(!spec.kinds.empty() && spec.scenes >= 1, ErrorKind::InvalidArgument, "dataset needs scenes and kinds");
  require(spec.resolution >= 1, ErrorKind::InvalidArgument, "resolution must be >= 1");
  std::vector<fs::path> manifests;
  for (std::size_t s = 0; s < spec.scenes; ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%03zu", s);
    const fs::path dir = out_dir / name;
    fs::create_directories(dir / "views");
    const std::uint64_t scene_seed = spec.seed * 1000003ULL + s;
    const Mesh mesh = make_scene(spec.kinds[s % spec.kinds.size()], spec.params, scene_seed);
    write_ply(sample_points(mesh, spec.points, scene_seed ^ 0x51ULL), dir / "cloud.ply");
    SceneManifest m;
    m.cloud = dir / "cloud.ply";
    m.background = spec.background;
    m.width = m.height = spec.resolution;
    const auto cams = view_sphere_cameras(spec.views, kViewRadiusFactor * mesh.radius(), spec.resolution,
                                          spec.resolution);
    for (std::size_t v = 0; v < cams.size(); ++v) {
      char img_name[32];
      std::snprintf(img_name, sizeof(img_name), "views/%03zu.png", v);
      write_image(render_gt(mesh, cams[v], spec.background), dir / img_name);
      m.views.push_back({cams[v].intrinsics, cams[v].extrinsics, dir / img_name});
    }
    save_manifest(m, dir / "manifest.txt");
    manifests.push_back(dir / "manifest.txt");
  }
  return manifests;
}

}  // namespace splatpatch
