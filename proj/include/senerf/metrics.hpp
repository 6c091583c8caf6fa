#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "senerf/image.hpp"

namespace senerf::metrics {

inline constexpr double kPsnrCap = 99.0;

inline double mse(const Image& a, const Image& b) {
  if (!a.same_dims(b) || a.empty()) throw std::invalid_argument("mse: image dimensions differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

inline double psnr_from_mse(double m) {
  if (m <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(m));
}

/// -10 log10(MSE) over all channels, capped at 99 dB.
inline double psnr(const Image& a, const Image& b) { return psnr_from_mse(mse(a, b)); }

inline Image luminance(const Image& img) {
  if (img.channels == 1) return img;
  Image y(img.width, img.height, 1);
  for (std::size_t i = 0; i < img.pixel_count(); ++i)
    y.data[i] = 0.299f * img.data[i * 3] + 0.587f * img.data[i * 3 + 1] + 0.114f * img.data[i * 3 + 2];
  return y;
}

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

/// Mean SSIM over every fully-contained window of the luminance images.
inline double ssim(const Image& a, const Image& b, const SsimParams& p = {}) {
  if (!a.same_dims(b)) throw std::invalid_argument("ssim: image dimensions differ");
  if (a.width < p.window || a.height < p.window)
    throw std::invalid_argument("ssim: image smaller than the " + std::to_string(p.window) + "px window");
  const Image ya = luminance(a), yb = luminance(b);
  const int half = p.window / 2;
  std::vector<double> g(static_cast<std::size_t>(p.window * p.window));
  double gsum = 0.0;
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx) {
      const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * p.sigma * p.sigma));
      g[static_cast<std::size_t>((dy + half) * p.window + dx + half)] = w;
      gsum += w;
    }
  for (auto& w : g) w /= gsum;
  const double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
  const double c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
  double total = 0.0;
  std::size_t count = 0;
  for (int y = half; y < a.height - half; ++y)
    for (int x = half; x < a.width - half; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx) {
          const double w = g[static_cast<std::size_t>((dy + half) * p.window + dx + half)];
          const double va = ya.at(x + dx, y + dy), vb = yb.at(x + dx, y + dy);
          ma += w * va;
          mb += w * vb;
          saa += w * va * va;
          sbb += w * vb * vb;
          sab += w * va * vb;
        }
      const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

}  // namespace senerf::metrics
