#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "splatpatch/error.hpp"
#include "splatpatch/geometry.hpp"

namespace splatpatch {

inline constexpr int kShBasisCount = 9;
inline constexpr int kShCoeffCount = 27;

/// Degree-2 SH coefficients, laid out [basis k][channel c] at index 3*k + c.
template <typename T>
using ShCoeffs = Eigen::Matrix<T, kShCoeffCount, 1>;

namespace sh {
inline constexpr double C0 = 0.28209479177387814;
inline constexpr double C1 = 0.4886025119029199;
inline constexpr double C2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                 -1.0925484305920792, 0.5462742152960396};
}  // namespace sh

/// Real SH basis values (with their normalization constants) for a unit direction.
template <typename T>
std::array<T, kShBasisCount> sh_basis(const Vec3<T>& d) {
  const T x = d.x(), y = d.y(), z = d.z();
  return {T(sh::C0),
          T(-sh::C1) * y,
          T(sh::C1) * z,
          T(-sh::C1) * x,
          T(sh::C2[0]) * x * y,
          T(sh::C2[1]) * y * z,
          T(sh::C2[2]) * (T(2) * z * z - x * x - y * y),
          T(sh::C2[3]) * x * z,
          T(sh::C2[4]) * (x * x - y * y)};
}

/// Unclamped SH color (before the +0.5 shift) from a precomputed basis.
template <typename T>
Vec3<T> sh_raw(const ShCoeffs<T>& coeffs, const std::array<T, kShBasisCount>& basis) {
  Vec3<T> out = Vec3<T>::Zero();
  for (int k = 0; k < kShBasisCount; ++k) out += basis[k] * coeffs.template segment<3>(3 * k);
  return out;
}

template <typename T>
Vec3<T> eval_sh(const ShCoeffs<T>& coeffs, const Vec3<T>& dir) {
  Vec3<T> c = sh_raw(coeffs, sh_basis(dir)).array() + T(0.5);
  return c.cwiseMax(T(0)).cwiseMin(T(1));
}

template <typename T>
ShCoeffs<T> sh_from_rgb(const Vec3<T>& rgb) {
  ShCoeffs<T> c = ShCoeffs<T>::Zero();
  c.template head<3>() = (rgb.array() - T(0.5)) / T(sh::C0);
  return c;
}

struct Quaternion {
  double w = 1, x = 0, y = 0, z = 0;
  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Eigen::Matrix3d to_matrix() const {
    Eigen::Matrix3d m;
    m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return m;
  }

  Vec3d rotate(const Vec3d& v) const { return to_matrix() * v; }
};

template <typename T>
struct SplatFrame {
  Vec3<T> t_u, t_v, n;
};

/// Rodrigues rotation matrix for a unit axis and an angle.
inline Eigen::Matrix3d rodrigues(const Vec3d& axis, double angle) {
  Eigen::Matrix3d k;
  k << 0, -axis.z(), axis.y(), axis.z(), 0, -axis.x(), -axis.y(), axis.x(), 0;
  return Eigen::Matrix3d::Identity() + std::sin(angle) * k + (1 - std::cos(angle)) * k * k;
}

/// Shepperd's method: branch on the largest of trace and diagonal entries.
inline Quaternion matrix_to_quaternion(const Eigen::Matrix3d& m) {
  const double tr = m.trace();
  Quaternion q;
  if (tr >= m(0, 0) && tr >= m(1, 1) && tr >= m(2, 2)) {
    const double r = std::sqrt(1 + tr);
    q = {0.5 * r, (m(2, 1) - m(1, 2)) / (2 * r), (m(0, 2) - m(2, 0)) / (2 * r),
         (m(1, 0) - m(0, 1)) / (2 * r)};
  } else if (m(0, 0) >= m(1, 1) && m(0, 0) >= m(2, 2)) {
    const double r = std::sqrt(1 + m(0, 0) - m(1, 1) - m(2, 2));
    q = {(m(2, 1) - m(1, 2)) / (2 * r), 0.5 * r, (m(0, 1) + m(1, 0)) / (2 * r),
         (m(0, 2) + m(2, 0)) / (2 * r)};
  } else if (m(1, 1) >= m(2, 2)) {
    const double r = std::sqrt(1 - m(0, 0) + m(1, 1) - m(2, 2));
    q = {(m(0, 2) - m(2, 0)) / (2 * r), (m(0, 1) + m(1, 0)) / (2 * r), 0.5 * r,
         (m(1, 2) + m(2, 1)) / (2 * r)};
  } else {
    const double r = std::sqrt(1 - m(0, 0) - m(1, 1) + m(2, 2));
    q = {(m(1, 0) - m(0, 1)) / (2 * r), (m(0, 2) + m(2, 0)) / (2 * r),
         (m(1, 2) + m(2, 1)) / (2 * r), 0.5 * r};
  }
  // Canonical sign: w >= 0.
  const double len = q.w < 0 ? -q.norm() : q.norm();
  return {q.w / len, q.x / len, q.y / len, q.z / len};
}

/// Threshold on 1 + n_z below which n is treated as antiparallel to +z.
template <typename T>
T antiparallel_eps() {
  return std::sqrt(std::numeric_limits<T>::epsilon());
}

inline double wrap_angle(double alpha) {
  constexpr double two_pi = 2 * std::numbers::pi;
  double a = std::fmod(alpha, two_pi);
  return a < 0 ? a + two_pi : a;
}

/// Orientation of a splat from its normal and the spin angle about it.
/// M1 takes the reference normal (0,0,1) onto n about (0,0,1) x n; the spin is
/// applied in the local frame, M = M1 * Rz(alpha), which equals Rn(alpha) * M1.
inline Quaternion normal_angle_to_quaternion(const Vec3d& normal, double alpha) {
  const double len = normal.norm();
  require(len > 1e-12 && std::isfinite(len), ErrorKind::InvalidArgument,
          "normal must be a nonzero finite vector");
  const Vec3d n = normal / len;
  const Vec3d axis = Vec3d::UnitZ().cross(n);
  const double sin_theta = axis.norm();
  const double cos_theta = n.z();
  Eigen::Matrix3d m1;
  if (1 + cos_theta < antiparallel_eps<double>()) {
    m1 = rodrigues(Vec3d::UnitX(), std::numbers::pi);
  } else if (sin_theta == 0.0) {
    m1 = Eigen::Matrix3d::Identity();
  } else {
    m1 = rodrigues(axis / sin_theta, std::atan2(sin_theta, cos_theta));
  }
  const Eigen::Matrix3d m2 = rodrigues(Vec3d::UnitZ(), wrap_angle(alpha));
  return matrix_to_quaternion(m1 * m2);
}

inline SplatFrame<double> quaternion_to_frame(const Quaternion& q) {
  require(std::abs(q.norm() - 1.0) <= 1e-9, ErrorKind::InvalidArgument, "quaternion is not unit");
  const Eigen::Matrix3d m = q.to_matrix();
  return {m.col(0), m.col(1), m.col(2)};
}

/// Closed form of the same M1 * Rz(alpha) rotation, differentiable in (n, alpha).
/// The normal is normalized internally so non-unit inputs are accepted.
template <typename T>
SplatFrame<T> frame_from_normal_angle(const Vec3<T>& normal, T alpha) {
  const Vec3<T> n = normal / normal.norm();
  Vec3<T> m1, m2;
  if (T(1) + n.z() < antiparallel_eps<T>()) {
    m1 = Vec3<T>(1, 0, 0);
    m2 = Vec3<T>(0, -1, 0);
  } else {
    const T s = T(1) / (T(1) + n.z());
    m1 = Vec3<T>(T(1) - n.x() * n.x() * s, -n.x() * n.y() * s, -n.x());
    m2 = Vec3<T>(-n.x() * n.y() * s, T(1) - n.y() * n.y() * s, -n.y());
  }
  const T ca = std::cos(alpha), sa = std::sin(alpha);
  return {ca * m1 + sa * m2, ca * m2 - sa * m1, n};
}

/// Reverse-mode partials of frame_from_normal_angle.
template <typename T>
void frame_backward(const Vec3<T>& normal, T alpha, const SplatFrame<T>& frame,
                    const Vec3<T>& d_tu, const Vec3<T>& d_tv, const Vec3<T>& d_n,
                    Vec3<T>& grad_normal, T& grad_alpha) {
  const T len = normal.norm();
  const Vec3<T> n = normal / len;
  grad_alpha = d_tu.dot(frame.t_v) - d_tv.dot(frame.t_u);
  const T ca = std::cos(alpha), sa = std::sin(alpha);
  const Vec3<T> d_m1 = ca * d_tu - sa * d_tv;
  const Vec3<T> d_m2 = sa * d_tu + ca * d_tv;
  Vec3<T> d_nhat = d_n;
  if (!(T(1) + n.z() < antiparallel_eps<T>())) {
    const T s = T(1) / (T(1) + n.z());
    const T nx = n.x(), ny = n.y();
    // Jacobians of m1 and m2 columns with respect to (nx, ny, nz).
    d_nhat.x() += d_m1.dot(Vec3<T>(-2 * nx * s, -ny * s, -1)) + d_m2.dot(Vec3<T>(-ny * s, 0, 0));
    d_nhat.y() += d_m1.dot(Vec3<T>(0, -nx * s, 0)) + d_m2.dot(Vec3<T>(-nx * s, -2 * ny * s, -1));
    d_nhat.z() += d_m1.dot(Vec3<T>(nx * nx * s * s, nx * ny * s * s, 0)) +
                  d_m2.dot(Vec3<T>(nx * ny * s * s, ny * ny * s * s, 0));
  }
  grad_normal = (d_nhat - d_nhat.dot(n) * n) / len;
}

enum class SpaceTag : std::uint8_t { Normalized = 0, World = 1 };

inline std::string to_string(SpaceTag tag) {
  return tag == SpaceTag::Normalized ? "normalized" : "world";
}

/// Parallel arrays describing M oriented 2D Gaussian disks.
template <typename T>
struct GaussianSet {
  std::vector<Vec3<T>> positions;
  std::vector<Vec2<T>> scales;
  std::vector<T> opacities;
  std::vector<ShCoeffs<T>> sh;
  std::vector<Vec3<T>> normals;
  std::vector<T> angles;
  SpaceTag space = SpaceTag::Normalized;

  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }

  void resize(std::size_t m) {
    positions.resize(m);
    scales.resize(m);
    opacities.resize(m);
    sh.resize(m);
    normals.resize(m);
    angles.resize(m);
  }

  void reserve(std::size_t m) {
    positions.reserve(m);
    scales.reserve(m);
    opacities.reserve(m);
    sh.reserve(m);
    normals.reserve(m);
    angles.reserve(m);
  }

  void push_back_from(const GaussianSet& other, std::size_t i) {
    positions.push_back(other.positions[i]);
    scales.push_back(other.scales[i]);
    opacities.push_back(other.opacities[i]);
    sh.push_back(other.sh[i]);
    normals.push_back(other.normals[i]);
    angles.push_back(other.angles[i]);
  }

  bool congruent() const {
    const auto m = positions.size();
    return scales.size() == m && opacities.size() == m && sh.size() == m && normals.size() == m &&
           angles.size() == m;
  }

  bool all_finite() const {
    for (std::size_t i = 0; i < size(); ++i) {
      if (!positions[i].allFinite() || !scales[i].allFinite() || !std::isfinite(opacities[i]) ||
          !sh[i].allFinite() || !normals[i].allFinite() || !std::isfinite(angles[i]))
        return false;
    }
    return true;
  }

  void validate() const {
    require(congruent(), ErrorKind::ShapeError, "gaussian arrays differ in length");
    for (std::size_t i = 0; i < size(); ++i) {
      require(scales[i].minCoeff() > T(0), ErrorKind::InvalidArgument,
              "scale of gaussian " + std::to_string(i) + " is not positive");
      require(opacities[i] >= T(0) && opacities[i] <= T(1), ErrorKind::InvalidArgument,
              "opacity of gaussian " + std::to_string(i) + " outside [0,1]");
      require(std::abs(normals[i].norm() - T(1)) <= T(1e-4), ErrorKind::InvalidArgument,
              "normal of gaussian " + std::to_string(i) + " is not unit length");
    }
  }

  template <typename U>
  GaussianSet<U> cast() const {
    GaussianSet<U> out;
    out.space = space;
    out.resize(size());
    for (std::size_t i = 0; i < size(); ++i) {
      out.positions[i] = positions[i].template cast<U>();
      out.scales[i] = scales[i].template cast<U>();
      out.opacities[i] = static_cast<U>(opacities[i]);
      out.sh[i] = sh[i].template cast<U>();
      out.normals[i] = normals[i].template cast<U>();
      out.angles[i] = static_cast<U>(angles[i]);
    }
    return out;
  }

  bool operator==(const GaussianSet&) const = default;
};

/// One disk per normalized point: opacity 1, spin 0, isotropic scale equal to
/// the nearest-neighbor distance, DC color from the point color.
template <typename T>
GaussianSet<T> initialize_gaussians(const PointCloud& normalized_cloud,
                                    const std::vector<double>& min_dists) {
  require(normalized_cloud.has_normals(), ErrorKind::MissingNormals,
          "initialization needs estimated normals");
  require(min_dists.size() == normalized_cloud.size(), ErrorKind::InvalidArgument,
          "min distance count does not match point count");
  GaussianSet<T> g;
  g.space = SpaceTag::Normalized;
  g.resize(normalized_cloud.size());
  for (std::size_t i = 0; i < normalized_cloud.size(); ++i) {
    require(min_dists[i] > 0.0, ErrorKind::InvalidArgument,
            "min distance of point " + std::to_string(i) + " is not positive");
    g.positions[i] = normalized_cloud.positions[i].cast<T>();
    g.scales[i] = Vec2<T>::Constant(static_cast<T>(min_dists[i]));
    g.opacities[i] = T(1);
    g.sh[i] = sh_from_rgb<T>(normalized_cloud.colors[i].cast<T>());
    g.normals[i] = (*normalized_cloud.normals)[i].cast<T>();
    g.angles[i] = T(0);
  }
  return g;
}

template <typename T>
GaussianSet<T> denormalize_gaussians(const GaussianSet<T>& g, const NormalizationTransform& t) {
  require(g.space == SpaceTag::Normalized, ErrorKind::InvalidState,
          "gaussian set is already in world space");
  GaussianSet<T> out = g;
  const T s = static_cast<T>(t.scale);
  const Vec3<T> c = t.center.cast<T>();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.positions[i] = out.positions[i] * s + c;
    out.scales[i] *= s;
  }
  out.space = SpaceTag::World;
  return out;
}

template <typename T>
GaussianSet<T> merge_sets(const GaussianSet<T>& a, const GaussianSet<T>& b) {
  require(a.space == b.space, ErrorKind::InvalidState,
          "cannot merge " + to_string(a.space) + " and " + to_string(b.space) + " sets");
  GaussianSet<T> out = a;
  out.reserve(a.size() + b.size());
  for (std::size_t i = 0; i < b.size(); ++i) out.push_back_from(b, i);
  return out;
}

}  // namespace splatpatch
