#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "splatpatch/error.hpp"
#include "splatpatch/image.hpp"

namespace splatpatch {

template <typename T>
struct MetricResult {
  T value;
  ImageBuffer<T> gradient;  // d value / d pred
};

namespace detail {
template <typename T>
void check_pair(const ImageBuffer<T>& pred, const ImageBuffer<T>& gt) {
  require(pred.same_shape(gt), ErrorKind::InvalidArgument,
          "image shapes differ: " + std::to_string(pred.width) + "x" + std::to_string(pred.height) + " vs " +
              std::to_string(gt.width) + "x" + std::to_string(gt.height));
  require(pred.pixel_count() > 0, ErrorKind::InvalidArgument, "images are empty");
}
}  // namespace detail

template <typename T>
MetricResult<T> mse(const ImageBuffer<T>& pred, const ImageBuffer<T>& gt) {
  detail::check_pair(pred, gt);
  const std::size_t n = pred.rgb.size();
  MetricResult<T> out{T(0), ImageBuffer<T>(pred.width, pred.height)};
  // Accumulate in double so long sums do not drift in single precision.
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = double(pred.rgb[i]) - double(gt.rgb[i]);
    sum += d * d;
    out.gradient.rgb[i] = static_cast<T>(2.0 * d / double(n));
  }
  out.value = static_cast<T>(sum / double(n));
  return out;
}

inline constexpr double kPsnrCap = 100.0;

inline double psnr_from_mse(double mse_value) {
  if (mse_value <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse_value));
}

/// PSNR in dB for [0,1] data; identical images report the 100 dB cap.
template <typename T>
double psnr(const ImageBuffer<T>& pred, const ImageBuffer<T>& gt) {
  return psnr_from_mse(double(mse(pred, gt).value));
}

struct SsimParams {
  static constexpr int window = 11;
  static constexpr double sigma = 1.5;
  static constexpr double k1 = 0.01;
  static constexpr double k2 = 0.03;
  static constexpr double c1 = k1 * k1;
  static constexpr double c2 = k2 * k2;
};

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
inline std::array<double, SsimParams::window> ssim_taps() {
  std::array<double, SsimParams::window> taps{};
  double sum = 0;
  constexpr int half = SsimParams::window / 2;
  for (int i = 0; i < SsimParams::window; ++i) {
    const double x = i - half;
    taps[i] = std::exp(-x * x / (2 * SsimParams::sigma * SsimParams::sigma));
    sum += taps[i];
  }
  for (auto& t : taps) t /= sum;
  return taps;
}

namespace detail {

/// Separable "valid" filtering of a single-channel plane (w x h) -> (w-10) x (h-10).
template <typename T>
std::vector<T> filter_valid(const std::vector<T>& src, int w, int h) {
  const auto taps = ssim_taps();
  constexpr int win = SsimParams::window;
  const int ow = w - win + 1, oh = h - win + 1;
  std::vector<T> rows(static_cast<std::size_t>(ow) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      T acc = 0;
      for (int k = 0; k < win; ++k) acc += T(taps[k]) * src[static_cast<std::size_t>(y) * w + x + k];
      rows[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<T> out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      T acc = 0;
      for (int k = 0; k < win; ++k) acc += T(taps[k]) * rows[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

/// Adjoint of filter_valid: spreads an (w-10) x (h-10) map back to w x h.
template <typename T>
std::vector<T> filter_valid_adjoint(const std::vector<T>& src, int w, int h) {
  const auto taps = ssim_taps();
  constexpr int win = SsimParams::window;
  const int ow = w - win + 1, oh = h - win + 1;
  std::vector<T> rows(static_cast<std::size_t>(ow) * h, T(0));
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const T v = src[static_cast<std::size_t>(y) * ow + x];
      for (int k = 0; k < win; ++k) rows[static_cast<std::size_t>(y + k) * ow + x] += T(taps[k]) * v;
    }
  std::vector<T> out(static_cast<std::size_t>(w) * h, T(0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      const T v = rows[static_cast<std::size_t>(y) * ow + x];
      for (int k = 0; k < win; ++k) out[static_cast<std::size_t>(y) * w + x + k] += T(taps[k]) * v;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM over all full 11x11 windows and the three channels, with its
/// gradient with respect to pred.
template <typename T>
MetricResult<T> ssim(const ImageBuffer<T>& pred, const ImageBuffer<T>& gt) {
  detail::check_pair(pred, gt);
  constexpr int win = SsimParams::window;
  require(pred.width >= win && pred.height >= win, ErrorKind::InvalidArgument,
          "SSIM needs images of at least 11x11 pixels");
  const int w = pred.width, h = pred.height;
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  const int ow = w - win + 1, oh = h - win + 1;
  const std::size_t valid = static_cast<std::size_t>(ow) * oh;
  const T c1 = T(SsimParams::c1), c2 = T(SsimParams::c2);
  const double norm = 1.0 / (3.0 * double(valid));

  MetricResult<T> out{T(0), ImageBuffer<T>(w, h)};
  double total = 0;
  std::vector<T> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
  for (int ch = 0; ch < 3; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = pred.rgb[3 * i + ch];
      y[i] = gt.rgb[3 * i + ch];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mu_x = detail::filter_valid(x, w, h);
    const auto mu_y = detail::filter_valid(y, w, h);
    const auto e_xx = detail::filter_valid(xx, w, h);
    const auto e_yy = detail::filter_valid(yy, w, h);
    const auto e_xy = detail::filter_valid(xy, w, h);
    std::vector<T> d_mu(valid), d_exx(valid), d_exy(valid);
    for (std::size_t i = 0; i < valid; ++i) {
      const T mx = mu_x[i], my = mu_y[i];
      const T a1 = T(2) * mx * my + c1;
      const T a2 = T(2) * (e_xy[i] - mx * my) + c2;
      const T b1 = mx * mx + my * my + c1;
      const T b2 = (e_xx[i] - mx * mx) + (e_yy[i] - my * my) + c2;
      const T num = a1 * a2, den = b1 * b2;
      const T s = num / den;
      total += double(s);
      // Partials of s with respect to (mu_x, E[x^2], E[xy]).
      const T dnum = T(2) * my * a2 - T(2) * my * a1;
      const T dden = T(2) * mx * b2 - T(2) * mx * b1;
      d_mu[i] = T(norm) * (dnum - s * dden) / den;
      d_exx[i] = T(norm) * (-s / b2);
      d_exy[i] = T(norm) * (T(2) * a1 / den);
    }
    const auto g_mu = detail::filter_valid_adjoint(d_mu, w, h);
    const auto g_xx = detail::filter_valid_adjoint(d_exx, w, h);
    const auto g_xy = detail::filter_valid_adjoint(d_exy, w, h);
    for (std::size_t i = 0; i < plane; ++i)
      out.gradient.rgb[3 * i + ch] = g_mu[i] + T(2) * x[i] * g_xx[i] + y[i] * g_xy[i];
  }
  out.value = static_cast<T>(total * norm);
  return out;
}

template <typename T>
struct LossValue {
  T total;
  T mse;
  T ssim;
  ImageBuffer<T> dL_dimage;
};

template <typename T>
struct CombinedLoss {
  std::vector<LossValue<T>> views;
  T total;  // mean over views
};

/// Mean over views of beta * MSE + (1 - beta) * (1 - SSIM). Per-view gradient
/// buffers already carry the 1/N_c factor of the mean.
template <typename T>
CombinedLoss<T> combined_loss(const std::vector<ImageBuffer<T>>& preds, const std::vector<ImageBuffer<T>>& gts,
                              double beta) {
  require(!preds.empty(), ErrorKind::InvalidArgument, "combined loss needs at least one view");
  require(preds.size() == gts.size(), ErrorKind::InvalidArgument, "prediction and ground-truth counts differ");
  require(beta >= 0 && beta <= 1, ErrorKind::InvalidArgument, "beta must lie in [0,1]");
  CombinedLoss<T> out;
  const T inv_n = T(1) / T(preds.size());
  const T b = T(beta);
  double sum = 0;
  for (std::size_t v = 0; v < preds.size(); ++v) {
    auto m = mse(preds[v], gts[v]);
    LossValue<T> lv{T(0), m.value, T(1), ImageBuffer<T>(preds[v].width, preds[v].height)};
    ImageBuffer<T> ssim_grad;
    const bool fits = preds[v].width >= SsimParams::window && preds[v].height >= SsimParams::window;
    if (beta < 1 || fits) {
      auto s = ssim(preds[v], gts[v]);
      lv.ssim = s.value;
      ssim_grad = std::move(s.gradient);
    }
    lv.total = b * lv.mse + (T(1) - b) * (T(1) - lv.ssim);
    for (std::size_t i = 0; i < lv.dL_dimage.rgb.size(); ++i) {
      T gi = b * m.gradient.rgb[i];
      if (beta < 1) gi -= (T(1) - b) * ssim_grad.rgb[i];
      lv.dL_dimage.rgb[i] = gi * inv_n;
    }
    sum += double(lv.total);
    out.views.push_back(std::move(lv));
  }
  out.total = static_cast<T>(sum / double(preds.size()));
  return out;
}

}  // namespace splatpatch
