// Independent reference implementations shared by the unit and acceptance suites.
#pragma once

#include <cmath>
#include <random>

#include "splatpatch/image.hpp"

namespace splatpatch::testing {

inline ImageBuffer<double> random_image(int w, int h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  ImageBuffer<double> img(w, h);
  for (auto& v : img.rgb) v = u(rng);
  return img;
}

// Direct evaluation: every 11x11 window that fits, full 2D weights, no
// separable filtering.
inline double brute_ssim(const ImageBuffer<double>& a, const ImageBuffer<double>& b) {
  const int win = 11;
  double taps[win], sum = 0;
  for (int i = 0; i < win; ++i) {
    taps[i] = std::exp(-(i - 5) * (i - 5) / (2 * 1.5 * 1.5));
    sum += taps[i];
  }
  for (double& t : taps) t /= sum;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  int count = 0;
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y + win <= a.height; ++y)
      for (int x = 0; x + win <= a.width; ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int j = 0; j < win; ++j)
          for (int i = 0; i < win; ++i) {
            const double w = taps[i] * taps[j];
            const double p = a.at(x + i, y + j, ch), q = b.at(x + i, y + j, ch);
            mx += w * p;
            my += w * q;
            sxx += w * p * p;
            syy += w * q * q;
            sxy += w * p * q;
          }
        sxx -= mx * mx;
        syy -= my * my;
        sxy -= mx * my;
        total += (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
        ++count;
      }
  return total / count;
}

}  // namespace splatpatch::testing
