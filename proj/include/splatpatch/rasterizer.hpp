#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "splatpatch/camera.hpp"
#include "splatpatch/error.hpp"
#include "splatpatch/gaussians.hpp"
#include "splatpatch/image.hpp"
#include "splatpatch/parallel.hpp"

namespace splatpatch {

struct RenderOptions {
  Vec3d background = Vec3d::Ones();
  double transmittance_floor = 1e-4;
  double alpha_clamp_max = 0.999;
  double lowpass_sigma = 0.7;
  int tile_size = 16;

  void validate() const {
    require(alpha_clamp_max > 0 && alpha_clamp_max < 1, ErrorKind::InvalidArgument,
            "alpha_clamp_max must lie in (0,1)");
    require(transmittance_floor > 0 && transmittance_floor < 0.1, ErrorKind::InvalidArgument,
            "transmittance_floor must lie in (0,0.1)");
    require(lowpass_sigma > 0, ErrorKind::InvalidArgument, "lowpass_sigma must be positive");
    require(tile_size > 0, ErrorKind::InvalidArgument, "tile_size must be positive");
    require(background.allFinite() && background.minCoeff() >= 0 && background.maxCoeff() <= 1,
            ErrorKind::InvalidArgument, "background must be rgb in [0,1]");
  }
};

/// Partials of a scalar loss with respect to every Gaussian field.
template <typename T>
struct GaussianGradients {
  std::vector<Vec3<T>> positions;
  std::vector<Vec2<T>> scales;
  std::vector<T> opacities;
  std::vector<ShCoeffs<T>> sh;
  std::vector<Vec3<T>> normals;
  std::vector<T> angles;

  GaussianGradients() = default;
  explicit GaussianGradients(std::size_t m)
      : positions(m, Vec3<T>::Zero()),
        scales(m, Vec2<T>::Zero()),
        opacities(m, T(0)),
        sh(m, ShCoeffs<T>::Zero()),
        normals(m, Vec3<T>::Zero()),
        angles(m, T(0)) {}

  std::size_t size() const { return positions.size(); }

  GaussianGradients& operator+=(const GaussianGradients& o) {
    for (std::size_t i = 0; i < size(); ++i) {
      positions[i] += o.positions[i];
      scales[i] += o.scales[i];
      opacities[i] += o.opacities[i];
      sh[i] += o.sh[i];
      normals[i] += o.normals[i];
      angles[i] += o.angles[i];
    }
    return *this;
  }

  bool all_finite() const {
    for (std::size_t i = 0; i < size(); ++i)
      if (!positions[i].allFinite() || !scales[i].allFinite() || !std::isfinite(opacities[i]) ||
          !sh[i].allFinite() || !normals[i].allFinite() || !std::isfinite(angles[i]))
        return false;
    return true;
  }
};

/// Discrete decisions taken while rendering. Two renders with equal
/// signatures lie on the same smooth piece of the image function.
template <typename T>
struct RenderDiagnostics {
  std::uint64_t signature = 0;
  /// Smallest |ray . normal| over pairs that received weight, per Gaussian.
  std::vector<T> min_abs_cos;
};

namespace detail {

inline constexpr double kGaussianCutoff2 = 9.0;  // (3 sigma)^2 in splat-local units
inline constexpr double kGrazingCos = 1e-8;

template <typename T>
struct CameraT {
  Mat3<T> R;
  Vec3<T> t, origin;
  T fx, fy, cx, cy, near;
  int width, height;

  explicit CameraT(const Camera& cam)
      : R(cam.rotation().cast<T>()),
        t(cam.translation().cast<T>()),
        origin(cam.center().cast<T>()),
        fx(T(cam.fx())),
        fy(T(cam.fy())),
        cx(T(cam.cx())),
        cy(T(cam.cy())),
        near(T(cam.near)),
        width(cam.width),
        height(cam.height) {}

  Vec3<T> ray(T u, T v) const {
    return (R.transpose() * Vec3<T>((u - cx) / fx, (v - cy) / fy, T(1))).normalized();
  }
};

template <typename T>
struct SplatView {
  SplatFrame<T> frame;
  Vec3<T> cam_pos;  // camera-space center
  Vec2<T> uv;
  T inv_su, inv_sv;
  int x0, x1, y0, y1;  // pixel bbox, half open
  bool lowpass;
};

/// Pixel bounding box of one tile entry, stored next to the tile list so the
/// per-pixel rejection test streams through memory.
struct PixelBox {
  std::int32_t x0, x1, y0, y1;
};

template <typename T>
struct Prepared {
  std::vector<SplatView<T>> views;  // indexed by Gaussian id
  std::vector<std::uint32_t> order;  // visible ids, front to back
  std::vector<std::vector<std::uint32_t>> tiles;
  std::vector<std::vector<PixelBox>> boxes;  // parallel to tiles
  int tiles_x = 0, tiles_y = 0, tile = 16;
};

template <typename T>
Prepared<T> prepare(const GaussianSet<T>& g, const CameraT<T>& cam, const RenderOptions& opts) {
  Prepared<T> p;
  const auto m = g.size();
  p.views.resize(m);
  std::vector<char> visible(m, 0);
  const T f = std::max(cam.fx, cam.fy);
  const T sigma = T(opts.lowpass_sigma);
  const T diag = std::hypot(T(cam.width), T(cam.height));
  const Vec2<T> image_center(T(cam.width) / 2, T(cam.height) / 2);
  parallel_for(static_cast<std::ptrdiff_t>(m), [&](std::ptrdiff_t i) {
    SplatView<T>& v = p.views[i];
    v.cam_pos = cam.R * g.positions[i] + cam.t;
    const T z = v.cam_pos.z();
    if (!(z > cam.near)) return;
    v.uv = Vec2<T>(cam.fx * v.cam_pos.x() / z + cam.cx, cam.fy * v.cam_pos.y() / z + cam.cy);
    if ((v.uv - image_center).norm() > T(1.5) * diag) return;
    v.frame = frame_from_normal_angle(g.normals[i], g.angles[i]);
    v.inv_su = T(1) / g.scales[i].x();
    v.inv_sv = T(1) / g.scales[i].y();
    const T smax = g.scales[i].maxCoeff();
    v.lowpass = f * smax / z < T(1);
    const T ext = T(3) * smax;
    if (z - ext <= cam.near) {
      v.x0 = 0;
      v.y0 = 0;
      v.x1 = cam.width;
      v.y1 = cam.height;
    } else {
      // Exact screen bounds of the projected 3-sigma ellipse. With
      // p = (u, v, 1) on the unit circle, a disk point maps to
      // x = (Tx . p) / (Tw . p); the extremes follow from the dual conic.
      const Vec3<T> A = cam.R * (T(3) * g.scales[i].x() * v.frame.t_u);
      const Vec3<T> B = cam.R * (T(3) * g.scales[i].y() * v.frame.t_v);
      const Vec3<T> C = v.cam_pos;
      const Vec3<T> tw(A.z(), B.z(), C.z());
      const Vec3<T> tx = cam.fx * Vec3<T>(A.x(), B.x(), C.x()) + cam.cx * tw;
      const Vec3<T> ty = cam.fy * Vec3<T>(A.y(), B.y(), C.y()) + cam.cy * tw;
      const Vec3<T> d(T(1), T(1), T(-1));
      const T denom = (d.array() * tw.array() * tw.array()).sum();
      const auto extent = [&](const Vec3<T>& row, T& lo, T& hi) {
        const T mid = (d.array() * row.array() * tw.array()).sum() / denom;
        const T q = (d.array() * row.array() * row.array()).sum() / denom;
        const T half = std::sqrt(std::max(mid * mid - q, T(0)));
        lo = mid - half;
        hi = mid + half;
      };
      T ulo, uhi, vlo, vhi;
      extent(tx, ulo, uhi);
      extent(ty, vlo, vhi);
      if (v.lowpass) {
        ulo = std::min(ulo, v.uv.x() - T(3) * sigma);
        uhi = std::max(uhi, v.uv.x() + T(3) * sigma);
        vlo = std::min(vlo, v.uv.y() - T(3) * sigma);
        vhi = std::max(vhi, v.uv.y() + T(3) * sigma);
      }
      const auto clampi = [](T value, int lo, int hi) {
        if (!(value > T(lo))) return lo;
        if (!(value < T(hi))) return hi;
        return static_cast<int>(value);
      };
      // Pixel px samples px + 0.5; one pixel of slack absorbs rounding.
      v.x0 = clampi(std::floor(ulo - T(1)), 0, cam.width);
      v.x1 = clampi(std::ceil(uhi + T(1)), 0, cam.width);
      v.y0 = clampi(std::floor(vlo - T(1)), 0, cam.height);
      v.y1 = clampi(std::ceil(vhi + T(1)), 0, cam.height);
      if (v.x0 >= v.x1 || v.y0 >= v.y1) return;
    }
    visible[i] = 1;
  });
  for (std::uint32_t i = 0; i < m; ++i)
    if (visible[i]) p.order.push_back(i);
  std::sort(p.order.begin(), p.order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const T za = p.views[a].cam_pos.z(), zb = p.views[b].cam_pos.z();
    return za < zb || (za == zb && a < b);
  });
  p.tile = opts.tile_size;
  p.tiles_x = (cam.width + p.tile - 1) / p.tile;
  p.tiles_y = (cam.height + p.tile - 1) / p.tile;
  p.tiles.assign(static_cast<std::size_t>(p.tiles_x) * p.tiles_y, {});
  p.boxes.assign(p.tiles.size(), {});
  for (auto id : p.order) {
    const auto& v = p.views[id];
    for (int ty = v.y0 / p.tile; ty <= (v.y1 - 1) / p.tile; ++ty)
      for (int tx = v.x0 / p.tile; tx <= (v.x1 - 1) / p.tile; ++tx) {
        const auto t = static_cast<std::size_t>(ty) * p.tiles_x + tx;
        p.tiles[t].push_back(id);
        p.boxes[t].push_back({v.x0, v.x1, v.y0, v.y1});
      }
  }
  return p;
}

/// Everything the backward pass needs about one ray/splat pair.
template <typename T>
struct PairRecord {
  std::uint32_t slot;  // position in the tile list
  T alpha, trans, weight, gauss, lowpass, a, b, depth_t;
  Vec3<T> q;
  Vec3<T> color;
  std::uint8_t flags;
};

enum PairFlags : std::uint8_t {
  kAlphaClamped = 1,
  kUsesLowpass = 2,
  kClampR = 4,
  kClampG = 8,
  kClampB = 16,
};

inline std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

struct PixelTrace {
  std::uint64_t hash = 0;
};

/// Front-to-back compositing of one pixel. Returns the final transmittance.
template <typename T, bool Record>
T shade_pixel(const GaussianSet<T>& g, const Prepared<T>& p, const std::vector<std::uint32_t>& list,
              const std::vector<PixelBox>& boxes,
              const CameraT<T>& cam, const RenderOptions& opts, int px, int py, Vec3<T>& out_color,
              std::vector<PairRecord<T>>* records, PixelTrace* trace, T* min_cos_slots) {
  const T u = T(px) + T(0.5), v = T(py) + T(0.5);
  const Vec3<T> dir = cam.ray(u, v);
  const auto basis = sh_basis(dir);
  const T amax = T(opts.alpha_clamp_max);
  const T floor_t = T(opts.transmittance_floor);
  const T inv_two_sigma2 = T(1) / (T(2) * T(opts.lowpass_sigma) * T(opts.lowpass_sigma));
  const T lp_cut2 = T(kGaussianCutoff2) * T(opts.lowpass_sigma) * T(opts.lowpass_sigma);
  T trans = T(1);
  Vec3<T> color = Vec3<T>::Zero();
  for (std::uint32_t slot = 0; slot < list.size(); ++slot) {
    const PixelBox& box = boxes[slot];
    if (px < box.x0 || px >= box.x1 || py < box.y0 || py >= box.y1) continue;
    const auto id = list[slot];
    const SplatView<T>& s = p.views[id];
    const Vec3<T> r = g.positions[id] - cam.origin;
    const T dn = dir.dot(s.frame.n);
    if (std::abs(dn) < T(kGrazingCos)) continue;
    const T depth_t = r.dot(s.frame.n) / dn;
    if (!(depth_t > T(0))) continue;
    const Vec3<T> q = depth_t * dir - r;
    const T a = q.dot(s.frame.t_u) * s.inv_su;
    const T b = q.dot(s.frame.t_v) * s.inv_sv;
    const T r2 = a * a + b * b;
    const T gauss = r2 <= T(kGaussianCutoff2) ? std::exp(T(-0.5) * r2) : T(0);
    T lowpass = T(0);
    std::uint8_t flags = 0;
    if (s.lowpass) {
      const T du = u - s.uv.x(), dv = v - s.uv.y();
      const T delta2 = du * du + dv * dv;
      if (delta2 <= lp_cut2) lowpass = std::exp(-delta2 * inv_two_sigma2);
    }
    T weight = gauss;
    if (lowpass > gauss) {
      weight = lowpass;
      flags |= kUsesLowpass;
    }
    if (weight <= T(0)) continue;
    T alpha = g.opacities[id] * weight;
    if (alpha > amax) {
      alpha = amax;
      flags |= kAlphaClamped;
    }
    Vec3<T> c = sh_raw(g.sh[id], basis).array() + T(0.5);
    for (int ch = 0; ch < 3; ++ch) {
      if (c[ch] < T(0) || c[ch] > T(1)) {
        c[ch] = std::clamp(c[ch], T(0), T(1));
        flags |= static_cast<std::uint8_t>(kClampR << ch);
      }
    }
    if constexpr (Record) {
      records->push_back({slot, alpha, trans, weight, gauss, lowpass, a, b, depth_t, q, c, flags});
    }
    if (trace) trace->hash = mix(mix(trace->hash, id), flags);
    if (min_cos_slots) min_cos_slots[slot] = std::min(min_cos_slots[slot], std::abs(dn));
    color += trans * alpha * c;
    trans *= T(1) - alpha;
    if (trans < floor_t) {
      if (trace) trace->hash = mix(trace->hash, 0xe5u);
      break;
    }
  }
  out_color = color + trans * opts.background.cast<T>();
  return trans;
}

template <typename T>
void check_inputs(const GaussianSet<T>& g, const Camera& cam, const RenderOptions& opts) {
  require(g.space == SpaceTag::World, ErrorKind::InvalidState, "render expects a world-space set");
  require(g.congruent(), ErrorKind::ShapeError, "gaussian arrays differ in length");
  require(g.all_finite(), ErrorKind::NonFiniteInput, "gaussian parameters contain non-finite values");
  cam.validate();
  opts.validate();
}

template <typename T>
struct TileGrad {
  Vec3<T> position = Vec3<T>::Zero();
  Vec2<T> scale = Vec2<T>::Zero();
  T opacity = T(0);
  ShCoeffs<T> sh = ShCoeffs<T>::Zero();
  Vec3<T> t_u = Vec3<T>::Zero(), t_v = Vec3<T>::Zero(), n = Vec3<T>::Zero();
  Vec2<T> uv = Vec2<T>::Zero();
};

}  // namespace detail

/// Forward splatting of a world-space set. diagnostics, when given, receives
/// the piecewise-smoothness signature used by gradient checks.
template <typename T>
ImageBuffer<T> render(const GaussianSet<T>& g, const Camera& cam, const RenderOptions& opts = {},
                      RenderDiagnostics<T>* diagnostics = nullptr) {
  detail::check_inputs(g, cam, opts);
  const detail::CameraT<T> camt(cam);
  const auto prep = detail::prepare(g, camt, opts);
  ImageBuffer<T> img(cam.width, cam.height);
  const auto tile_count = static_cast<std::ptrdiff_t>(prep.tiles.size());
  std::vector<std::uint64_t> tile_hash(diagnostics ? tile_count : 0, 0);
  std::vector<std::vector<T>> tile_cos(diagnostics ? tile_count : 0);
  parallel_for(tile_count, [&](std::ptrdiff_t t) {
    const auto& list = prep.tiles[t];
    const int tx = static_cast<int>(t % prep.tiles_x), ty = static_cast<int>(t / prep.tiles_x);
    detail::PixelTrace trace;
    T* cos_slots = nullptr;
    if (diagnostics) {
      tile_cos[t].assign(list.size(), std::numeric_limits<T>::infinity());
      cos_slots = tile_cos[t].data();
    }
    for (int py = ty * prep.tile; py < std::min(cam.height, (ty + 1) * prep.tile); ++py)
      for (int px = tx * prep.tile; px < std::min(cam.width, (tx + 1) * prep.tile); ++px) {
        Vec3<T> c;
        detail::shade_pixel<T, false>(g, prep, list, prep.boxes[t], camt, opts, px, py, c, nullptr,
                                      diagnostics ? &trace : nullptr, cos_slots);
        img.set_pixel(px, py, c);
      }
    if (diagnostics) tile_hash[t] = trace.hash;
  });
  if (diagnostics) {
    diagnostics->signature = 0;
    diagnostics->min_abs_cos.assign(g.size(), std::numeric_limits<T>::infinity());
    for (std::ptrdiff_t t = 0; t < tile_count; ++t) {
      diagnostics->signature = detail::mix(diagnostics->signature, tile_hash[t]);
      for (std::size_t s = 0; s < prep.tiles[t].size(); ++s) {
        auto& m = diagnostics->min_abs_cos[prep.tiles[t][s]];
        m = std::min(m, tile_cos[t][s]);
      }
    }
  }
  return img;
}

/// Reverse-mode partials of L = sum(dL_dimage * render(g, cam, opts)).
/// Stateless: the forward bookkeeping is recomputed per tile.
template <typename T>
GaussianGradients<T> render_backward(const GaussianSet<T>& g, const Camera& cam, const RenderOptions& opts,
                                     const ImageBuffer<T>& dL_dimage) {
  detail::check_inputs(g, cam, opts);
  require(dL_dimage.width == cam.width && dL_dimage.height == cam.height, ErrorKind::InvalidArgument,
          "image gradient is " + std::to_string(dL_dimage.width) + "x" + std::to_string(dL_dimage.height) +
              ", camera is " + std::to_string(cam.width) + "x" + std::to_string(cam.height));
  const detail::CameraT<T> camt(cam);
  const auto prep = detail::prepare(g, camt, opts);
  const auto tile_count = static_cast<std::ptrdiff_t>(prep.tiles.size());
  std::vector<std::vector<detail::TileGrad<T>>> tile_grads(tile_count);
  const Vec3<T> bg = opts.background.cast<T>();
  const T two_sigma2 = T(2) * T(opts.lowpass_sigma) * T(opts.lowpass_sigma);

  parallel_for(tile_count, [&](std::ptrdiff_t t) {
    const auto& list = prep.tiles[t];
    if (list.empty()) return;
    auto& grads = tile_grads[t];
    grads.assign(list.size(), {});
    std::vector<detail::PairRecord<T>> records;
    const int tx = static_cast<int>(t % prep.tiles_x), ty = static_cast<int>(t / prep.tiles_x);
    for (int py = ty * prep.tile; py < std::min(cam.height, (ty + 1) * prep.tile); ++py)
      for (int px = tx * prep.tile; px < std::min(cam.width, (tx + 1) * prep.tile); ++px) {
        const Vec3<T> dL_dC = dL_dimage.pixel(px, py);
        if (dL_dC.isZero(0)) continue;
        records.clear();
        Vec3<T> color;
        const T final_trans = detail::shade_pixel<T, true>(g, prep, list, prep.boxes[t], camt, opts, px, py, color,
                                                           &records, nullptr, nullptr);
        const T u = T(px) + T(0.5), v = T(py) + T(0.5);
        const Vec3<T> dir = camt.ray(u, v);
        const auto basis = sh_basis(dir);
        Vec3<T> behind = final_trans * bg;  // color composited after the current pair
        for (auto it = records.rbegin(); it != records.rend(); ++it) {
          const auto& rec = *it;
          const auto id = list[rec.slot];
          const auto& s = prep.views[id];
          auto& gr = grads[rec.slot];
          const T w = rec.alpha * rec.trans;
          for (int ch = 0; ch < 3; ++ch) {
            if (rec.flags & (detail::kClampR << ch)) continue;
            const T dc = dL_dC[ch] * w;
            for (int k = 0; k < kShBasisCount; ++k) gr.sh[3 * k + ch] += dc * basis[k];
          }
          const T dL_dalpha =
              (rec.trans * rec.color - behind / (T(1) - rec.alpha)).dot(dL_dC);
          behind += w * rec.color;
          if (rec.flags & detail::kAlphaClamped) continue;
          gr.opacity += dL_dalpha * rec.weight;
          const T dL_dw = dL_dalpha * g.opacities[id];
          if (rec.flags & detail::kUsesLowpass) {
            const T dL_ddelta2 = -dL_dw * rec.lowpass / two_sigma2;
            gr.uv += dL_ddelta2 * T(-2) * Vec2<T>(u - s.uv.x(), v - s.uv.y());
            continue;
          }
          const T dL_dr2 = T(-0.5) * dL_dw * rec.gauss;
          const T dL_da = dL_dr2 * T(2) * rec.a;
          const T dL_db = dL_dr2 * T(2) * rec.b;
          const T ga = dL_da * s.inv_su, gb = dL_db * s.inv_sv;
          const Vec3<T> dL_dq = ga * s.frame.t_u + gb * s.frame.t_v;
          gr.t_u += ga * rec.q;
          gr.t_v += gb * rec.q;
          gr.scale.x() -= dL_da * rec.a * s.inv_su;
          gr.scale.y() -= dL_db * rec.b * s.inv_sv;
          // q = t*d - r with t = (r.n)/(d.n) and r = x - origin.
          const T dn = dir.dot(s.frame.n);
          const T dL_dt = dL_dq.dot(dir);
          gr.position += -dL_dq + dL_dt / dn * s.frame.n;
          gr.n += -dL_dt / dn * rec.q;
        }
      }
  });

  GaussianGradients<T> out(g.size());
  std::vector<detail::TileGrad<T>> total(g.size());
  for (std::ptrdiff_t t = 0; t < tile_count; ++t) {
    const auto& list = prep.tiles[t];
    if (tile_grads[t].empty()) continue;
    for (std::size_t s = 0; s < list.size(); ++s) {
      auto& dst = total[list[s]];
      const auto& src = tile_grads[t][s];
      dst.position += src.position;
      dst.scale += src.scale;
      dst.opacity += src.opacity;
      dst.sh += src.sh;
      dst.t_u += src.t_u;
      dst.t_v += src.t_v;
      dst.n += src.n;
      dst.uv += src.uv;
    }
  }
  for (auto id : prep.order) {
    const auto& s = prep.views[id];
    const auto& tg = total[id];
    Vec3<T> dpos = tg.position;
    if (!tg.uv.isZero(0)) {
      const T z = s.cam_pos.z();
      const Vec3<T> dcam(camt.fx / z * tg.uv.x(), camt.fy / z * tg.uv.y(),
                         -(camt.fx * s.cam_pos.x() * tg.uv.x() + camt.fy * s.cam_pos.y() * tg.uv.y()) / (z * z));
      dpos += camt.R.transpose() * dcam;
    }
    out.positions[id] = dpos;
    out.scales[id] = tg.scale;
    out.opacities[id] = tg.opacity;
    out.sh[id] = tg.sh;
    frame_backward(g.normals[id], g.angles[id], s.frame, tg.t_u, tg.t_v, tg.n, out.normals[id], out.angles[id]);
  }
  return out;
}

}  // namespace splatpatch
