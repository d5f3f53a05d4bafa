#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <string>

#include "splatpatch/error.hpp"
#include "splatpatch/geometry.hpp"

namespace splatpatch {

/// Pinhole camera: intrinsics K, world-to-camera extrinsics [R|t]. Camera
/// axes follow the x-right, y-down, z-forward convention; pixel (i, j) covers
/// [i, i+1) x [j, j+1) and is sampled at its center.
struct Camera {
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Matrix4d extrinsics = Eigen::Matrix4d::Identity();
  int width = 0;
  int height = 0;
  double near = 0.01;

  double fx() const { return intrinsics(0, 0); }
  double fy() const { return intrinsics(1, 1); }
  double cx() const { return intrinsics(0, 2); }
  double cy() const { return intrinsics(1, 2); }
  Eigen::Matrix3d rotation() const { return extrinsics.topLeftCorner<3, 3>(); }
  Vec3d translation() const { return extrinsics.topRightCorner<3, 1>(); }
  Vec3d center() const { return -rotation().transpose() * translation(); }

  void validate() const {
    const Eigen::Matrix3d r = rotation();
    require(width > 0 && height > 0, ErrorKind::InvalidArgument, "camera image size must be positive");
    require(fx() > 0 && fy() > 0, ErrorKind::InvalidArgument, "focal lengths must be positive");
    require(near > 0, ErrorKind::InvalidArgument, "near plane must be positive");
    require((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-6,
            ErrorKind::InvalidArgument, "extrinsic rotation is not orthonormal");
    require(std::abs(r.determinant() - 1.0) <= 1e-6, ErrorKind::InvalidArgument,
            "extrinsic rotation has determinant != +1");
  }
};

struct Projection {
  Eigen::Vector2d uv;
  double depth;
};

inline Projection project_center(const Camera& cam, const Vec3d& x) {
  const Vec3d xc = cam.rotation() * x + cam.translation();
  return {{cam.fx() * xc.x() / xc.z() + cam.cx(), cam.fy() * xc.y() / xc.z() + cam.cy()}, xc.z()};
}

/// World point that projects to uv at camera-space depth.
inline Vec3d unproject(const Camera& cam, const Eigen::Vector2d& uv, double depth) {
  const Vec3d xc((uv.x() - cam.cx()) / cam.fx() * depth, (uv.y() - cam.cy()) / cam.fy() * depth, depth);
  return cam.rotation().transpose() * (xc - cam.translation());
}

/// Unit world-space direction of the ray through pixel coordinates (u, v).
inline Vec3d ray_direction(const Camera& cam, double u, double v) {
  const Vec3d dc((u - cam.cx()) / cam.fx(), (v - cam.cy()) / cam.fy(), 1.0);
  return (cam.rotation().transpose() * dc).normalized();
}

/// Camera at eye looking at target; focal length in pixels, principal point
/// at the image center.
inline Camera look_at(const Vec3d& eye, const Vec3d& target, const Vec3d& up, int width, int height,
                      double focal) {
  const Vec3d forward = (target - eye).normalized();
  Vec3d right = forward.cross(up);
  if (right.norm() < 1e-9) right = forward.cross(std::abs(forward.x()) < 0.9 ? Vec3d::UnitX() : Vec3d::UnitY());
  right.normalize();
  const Vec3d down = forward.cross(right);
  Camera cam;
  Eigen::Matrix3d r;
  r.row(0) = right.transpose();
  r.row(1) = down.transpose();
  r.row(2) = forward.transpose();
  cam.extrinsics.setIdentity();
  cam.extrinsics.topLeftCorner<3, 3>() = r;
  cam.extrinsics.topRightCorner<3, 1>() = -r * eye;
  cam.intrinsics << focal, 0, width / 2.0, 0, focal, height / 2.0, 0, 0, 1;
  cam.width = width;
  cam.height = height;
  return cam;
}

}  // namespace splatpatch
