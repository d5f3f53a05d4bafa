#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "splatpatch/camera.hpp"
#include "splatpatch/gaussians.hpp"
#include "splatpatch/metrics.hpp"
#include "splatpatch/network.hpp"
#include "splatpatch/pipeline.hpp"
#include "splatpatch/rasterizer.hpp"

namespace splatpatch {

/// Central finite differences against analytic partials. Partials whose
/// +h or -h evaluation crosses a discrete decision (cutoff, clamp, argmax,
/// activation kink) are excluded and counted.
struct GradcheckReport {
  std::string module;
  std::size_t configs = 0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::size_t failed = 0;
  double worst_rel = 0;    // largest |a - f| / max(|a|, |f|) among entries above the absolute floor
  double worst_ratio = 0;  // largest |a - f| / tolerance; <= 1 passes
  std::string worst_where;

  bool passed() const { return checked > 0 && failed == 0; }
  double excluded_fraction() const {
    return checked + excluded ? double(excluded) / double(checked + excluded) : 0.0;
  }
};

struct Tolerance {
  double rel;
  double abs;
};

namespace detail {

inline void record(GradcheckReport& r, double analytic, double fd, const Tolerance& tol, const std::string& where) {
  ++r.checked;
  const double diff = std::abs(analytic - fd);
  const double scale = std::max(std::abs(analytic), std::abs(fd));
  const double allowed = std::max(tol.rel * scale, tol.abs);
  const double ratio = diff / allowed;
  if (scale > tol.abs) r.worst_rel = std::max(r.worst_rel, diff / scale);
  if (ratio > r.worst_ratio) {
    r.worst_ratio = ratio;
    r.worst_where = where + " analytic=" + detail::exact(analytic) + " fd=" + detail::exact(fd);
  }
  if (!(diff <= allowed)) ++r.failed;
}

inline double weighted_sum(const ImageBuffer<double>& img, const ImageBuffer<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < img.rgb.size(); ++i) s += img.rgb[i] * w.rgb[i];
  return s;
}

inline const char* gaussian_field_name(int p) {
  if (p < 3) return "position";
  if (p < 5) return "scale";
  if (p < 6) return "opacity";
  if (p < 33) return "sh";
  if (p < 36) return "normal";
  return "angle";
}

inline constexpr int kGaussianParamCount = 37;

inline double& gaussian_param(GaussianSet<double>& g, std::size_t i, int p) {
  if (p < 3) return g.positions[i][p];
  if (p < 5) return g.scales[i][p - 3];
  if (p < 6) return g.opacities[i];
  if (p < 33) return g.sh[i][p - 6];
  if (p < 36) return g.normals[i][p - 33];
  return g.angles[i];
}

inline double gaussian_grad(const GaussianGradients<double>& g, std::size_t i, int p) {
  if (p < 3) return g.positions[i][p];
  if (p < 5) return g.scales[i][p - 3];
  if (p < 6) return g.opacities[i];
  if (p < 33) return g.sh[i][p - 6];
  if (p < 36) return g.normals[i][p - 33];
  return g.angles[i];
}

inline Vec3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3d v;
  do {
    v = Vec3d(n(rng), n(rng), n(rng));
  } while (v.norm() < 1e-6);
  return v.normalized();
}

}  // namespace detail

/// A random world-space splat configuration seen by one small camera.
struct SplatScene {
  GaussianSet<double> gaussians;
  Camera camera;
  RenderOptions options;
  ImageBuffer<double> weights;  // loss = sum(weights * image)
};

inline SplatScene random_splat_scene(std::mt19937_64& rng, int max_splats = 4, int size = 24) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SplatScene s;
  const int n = 1 + static_cast<int>(u(rng) * max_splats) % max_splats;
  const Vec3d eye = detail::random_unit(rng) * (2.5 + u(rng));
  s.camera = look_at(eye, Vec3d::Zero(), Vec3d::UnitZ(), size, size, size * (1.0 + 0.7 * u(rng)));
  s.options.background = Vec3d(u(rng), u(rng), u(rng));
  auto& g = s.gaussians;
  g.space = SpaceTag::World;
  g.resize(n);
  for (int i = 0; i < n; ++i) {
    g.positions[i] = detail::random_unit(rng) * 0.4 * std::cbrt(u(rng));
    for (int k = 0; k < 2; ++k) g.scales[i][k] = 0.03 * std::pow(0.4 / 0.03, u(rng));
    g.opacities[i] = 0.1 + 0.85 * u(rng);
    g.sh[i].setZero();
    for (int c = 0; c < 3; ++c) g.sh[i][c] = 1.6 * u(rng) - 0.8;
    for (int k = 3; k < kShCoeffCount; ++k) g.sh[i][k] = 0.4 * u(rng) - 0.2;
    g.normals[i] = detail::random_unit(rng);
    g.angles[i] = (2 * u(rng) - 1) * std::numbers::pi;
  }
  s.weights = ImageBuffer<double>(size, size);
  for (auto& w : s.weights.rgb) w = 2 * u(rng) - 1;
  return s;
}

/// Every partial of every splat in `configs` random scenes.
inline GradcheckReport rasterizer_gradcheck(std::size_t configs, std::uint64_t seed,
                                            const Tolerance& tol = {1e-3, 1e-6}, double h = 1e-6,
                                            double grazing_cos = 1e-3) {
  GradcheckReport rep;
  rep.module = "rasterizer";
  for (std::size_t c = 0; c < configs; ++c) {
    std::mt19937_64 rng(seed * 7919ULL + c);
    SplatScene s = random_splat_scene(rng);
    ++rep.configs;
    RenderDiagnostics<double> base;
    render(s.gaussians, s.camera, s.options, &base);
    const auto grads = render_backward(s.gaussians, s.camera, s.options, s.weights);
    for (std::size_t i = 0; i < s.gaussians.size(); ++i) {
      const bool grazing = base.min_abs_cos[i] < grazing_cos;
      for (int p = 0; p < detail::kGaussianParamCount; ++p) {
        auto eval = [&](double delta, std::uint64_t& sig) {
          GaussianSet<double> g = s.gaussians;
          detail::gaussian_param(g, i, p) += delta;
          RenderDiagnostics<double> d;
          const auto img = render(g, s.camera, s.options, &d);
          sig = d.signature;
          return detail::weighted_sum(img, s.weights);
        };
        std::uint64_t sp = 0, sm = 0;
        const double lp = eval(h, sp), lm = eval(-h, sm);
        if (grazing || sp != base.signature || sm != base.signature) {
          ++rep.excluded;
          continue;
        }
        detail::record(rep, detail::gaussian_grad(grads, i, p), (lp - lm) / (2 * h), tol,
                       "config " + std::to_string(c) + " splat " + std::to_string(i) + " " +
                           detail::gaussian_field_name(p) + "[" + std::to_string(p) + "]");
      }
    }
  }
  return rep;
}

/// Hash of every discrete choice in a prediction: activation signs, max
/// aggregation winners, scale clamps and normal fallbacks.
template <typename T>
std::uint64_t prediction_signature(const Prediction<T>& pred) {
  std::uint64_t h = 0;
  auto signs = [&](const Matrix<T>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) h = detail::mix(h, m.data()[i] > T(0));
  };
  const auto& c = pred.cache;
  signs(c.encoder.embed_pre);
  for (std::size_t b = 0; b < c.encoder.local_pre.size(); ++b) {
    signs(c.encoder.local_pre[b]);
    signs(c.encoder.out_pre[b]);
    for (auto a : c.encoder.argmax[b]) h = detail::mix(h, a);
  }
  for (const auto& head : c.heads)
    for (const auto& pre : head.pre) signs(pre);
  const auto& ds = c.heads[kHeadScale].output;
  for (Eigen::Index i = 0; i < ds.size(); ++i) h = detail::mix(h, std::abs(ds.data()[i]) < T(kScaleShiftClamp));
  for (auto len : c.normal_len) h = detail::mix(h, len > T(0));
  return h;
}

/// End-to-end micro problem: points -> module -> denormalize -> render ->
/// combined loss against a fixed target image.
struct NetworkProblem {
  PointCloud cloud;
  PreparedCloud<double> prepared;
  ModuleParams<double> params;
  SceneData scene;
  std::vector<std::size_t> views = {0};
  double beta = 0.8;
  RenderOptions options;

  double loss(const ModuleParams<double>& p, std::uint64_t* signature = nullptr) const {
    const auto pred = predict_with_cache(p, prepared.init, prepared.neighbors);
    const auto world = denormalize_gaussians(pred.gaussians, prepared.transform);
    RenderDiagnostics<double> d;
    const auto img = render(world, scene.cameras[0], options, &d);
    if (signature) *signature = detail::mix(prediction_signature(pred), d.signature);
    return double(combined_loss<double>({img}, {scene.images[0].cast<double>()}, beta).total);
  }

  ModuleParams<double> gradient() const {
    const auto pred = predict_with_cache(params, prepared.init, prepared.neighbors);
    const auto world = denormalize_gaussians(pred.gaussians, prepared.transform);
    auto rl = render_loss(world, scene, views, beta, options, true);
    denormalize_backward(rl.grads, prepared.transform);
    return backward(params, prepared.init, pred, rl.grads).params;
  }
};

/// N points on a unit sphere patch, a small module with random final layers
/// (so every weight has a nonzero partial) and a random target image.
inline NetworkProblem make_network_problem(std::uint64_t seed, std::size_t n_points = 16, int k = 2,
                                           int width = 16, int image = 16) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  NetworkProblem prob;
  for (std::size_t i = 0; i < n_points; ++i) {
    Vec3d p = detail::random_unit(rng);
    p.z() = std::abs(p.z()) + 0.3;
    prob.cloud.positions.push_back(p.normalized() * 0.8);
    prob.cloud.colors.emplace_back(u(rng), u(rng), u(rng));
  }
  ArchConfig arch;
  arch.split_k = k;
  arch.encoder_embed = width;
  arch.encoder_blocks = {width, width};
  arch.encoder_neighbors = std::min<int>(4, static_cast<int>(n_points));
  arch.decoder_hidden = {width, width};
  prob.params = make_module<double>(arch, seed + 1);
  for (auto& head : prob.params.decoders.heads) {
    auto& last = head.layers.back();
    for (Eigen::Index i = 0; i < last.weight.size(); ++i) last.weight.data()[i] = 0.2 * (2 * u(rng) - 1);
    for (Eigen::Index i = 0; i < last.bias.size(); ++i) last.bias.data()[i] = 0.1 * (2 * u(rng) - 1);
  }
  prob.prepared = prepare_cloud<double>(prob.cloud, arch.encoder_neighbors, std::min<int>(8, int(n_points)));
  prob.scene.cameras = {look_at(Vec3d(0.3, -0.2, 3.2), Vec3d(0, 0, 0.5), Vec3d::UnitZ(), image, image, image * 1.2)};
  ImageBuffer<float> target(image, image);
  for (auto& v : target.rgb) v = static_cast<float>(u(rng));
  prob.scene.images = {target};
  prob.options.background = Vec3d(0.2, 0.4, 0.6);
  return prob;
}

/// Every weight and bias of a micro network against central differences of
/// the rendered combined loss.
inline GradcheckReport network_gradcheck(std::uint64_t seed, const Tolerance& tol = {1e-3, 1e-8}, double h = 1e-5) {
  GradcheckReport rep;
  rep.module = "network";
  rep.configs = 1;
  NetworkProblem prob = make_network_problem(seed);
  const auto grads = prob.gradient();
  std::uint64_t base_sig = 0;
  prob.loss(prob.params, &base_sig);
  ModuleParams<double> work = prob.params;
  auto wspans = tensor_spans(work);
  auto gspans = tensor_spans(const_cast<ModuleParams<double>&>(grads));
  for (std::size_t t = 0; t < wspans.size(); ++t) {
    for (std::size_t i = 0; i < wspans[t].size(); ++i) {
      const double orig = wspans[t][i];
      std::uint64_t sp = 0, sm = 0;
      wspans[t][i] = orig + h;
      const double lp = prob.loss(work, &sp);
      wspans[t][i] = orig - h;
      const double lm = prob.loss(work, &sm);
      wspans[t][i] = orig;
      if (sp != base_sig || sm != base_sig) {
        ++rep.excluded;
        continue;
      }
      detail::record(rep, gspans[t][i], (lp - lm) / (2 * h), tol,
                     "tensor " + std::to_string(t) + " entry " + std::to_string(i));
    }
  }
  return rep;
}

/// MSE, SSIM and combined-loss gradients with respect to every pixel of
/// random image pairs.
inline GradcheckReport metrics_gradcheck(std::size_t trials, std::uint64_t seed, const Tolerance& tol = {1e-5, 1e-10},
                                         double h = 1e-5) {
  GradcheckReport rep;
  rep.module = "metrics";
  for (std::size_t c = 0; c < trials; ++c) {
    std::mt19937_64 rng(seed * 104729ULL + c);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int w = 11 + static_cast<int>(u(rng) * 6), hgt = 11 + static_cast<int>(u(rng) * 6);
    ImageBuffer<double> a(w, hgt), b(w, hgt);
    for (auto& v : a.rgb) v = u(rng);
    for (auto& v : b.rgb) v = u(rng);
    ++rep.configs;
    const double beta = u(rng);
    const auto gm = mse(a, b).gradient;
    const auto gs = ssim(a, b).gradient;
    const auto gc = combined_loss<double>({a}, {b}, beta).views[0].dL_dimage;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
      auto fd = [&](auto&& f) {
        ImageBuffer<double> x = a;
        x.rgb[i] += h;
        const double fp = f(x);
        x.rgb[i] -= 2 * h;
        const double fm = f(x);
        return (fp - fm) / (2 * h);
      };
      const std::string where = "trial " + std::to_string(c) + " sample " + std::to_string(i);
      detail::record(rep, gm.rgb[i], fd([&](const ImageBuffer<double>& x) { return mse(x, b).value; }), tol,
                     where + " mse");
      detail::record(rep, gs.rgb[i], fd([&](const ImageBuffer<double>& x) { return ssim(x, b).value; }), tol,
                     where + " ssim");
      detail::record(rep, gc.rgb[i],
                     fd([&](const ImageBuffer<double>& x) { return combined_loss<double>({x}, {b}, beta).total; }),
                     tol, where + " combined");
    }
  }
  return rep;
}

}  // namespace splatpatch
