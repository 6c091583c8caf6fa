#pragma once

// Per-ray pseudo-label reliability from reprojected feature consistency.
//
// A pseudo-view pixel is lifted to 3D with its rendered depth, projected into
// every known view, and compared with the known view's feature at the landing
// point. A ray is reliable when at least one known view agrees above the
// threshold.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "senerf/camera.hpp"
#include "senerf/image.hpp"
#include "senerf/parallel.hpp"

namespace senerf::reliability {

/// H x W x F per-pixel features (an Image with F channels).
using FeatureMap = Image;

inline constexpr float kNoEvidence = -1.0f;
inline constexpr double kNoSurfaceOpacity = 0.05;

// -- feature extraction ----------------------------------------------------

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  [[nodiscard]] virtual FeatureMap extract(const Image& rgb) const = 0;
  [[nodiscard]] virtual int channels() const = 0;
};

namespace detail {

inline Image gaussian_blur(const Image& src, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
  float ksum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = static_cast<float>(std::exp(-(i * i) / (2 * sigma * sigma)));
    ksum += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= ksum;
  Image tmp(src.width, src.height, src.channels), out(src.width, src.height, src.channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[static_cast<std::size_t>(i + radius)] * src.at(std::clamp(x + i, 0, src.width - 1), y, c);
        tmp.at(x, y, c) = acc;
      }
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[static_cast<std::size_t>(i + radius)] * tmp.at(x, std::clamp(y + i, 0, src.height - 1), c);
        out.at(x, y, c) = acc;
      }
  return out;
}

inline Image downsample2(const Image& src) {
  Image out(std::max(1, src.width / 2), std::max(1, src.height / 2), src.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        const int x0 = std::min(2 * x, src.width - 1), x1 = std::min(2 * x + 1, src.width - 1);
        const int y0 = std::min(2 * y, src.height - 1), y1 = std::min(2 * y + 1, src.height - 1);
        out.at(x, y, c) = 0.25f * (src.at(x0, y0, c) + src.at(x1, y0, c) + src.at(x0, y1, c) + src.at(x1, y1, c));
      }
  return out;
}

}  // namespace detail

/// Four-scale pyramid (1, 1/2, 1/4, 1/8). At each scale: Gaussian-smoothed RGB
/// plus absolute x / y luminance gradients, bilinearly upsampled to full
/// resolution and concatenated (20 channels).
class PyramidExtractor final : public FeatureExtractor {
 public:
  static constexpr int kScales = 4;
  static constexpr int kPerScale = 5;

  [[nodiscard]] int channels() const override { return kScales * kPerScale; }

  [[nodiscard]] FeatureMap extract(const Image& rgb) const override {
    if (rgb.width < 16 || rgb.height < 16 || rgb.channels != 3)
      throw std::invalid_argument("extract_features: need an RGB image of at least 16x16");
    FeatureMap out(rgb.width, rgb.height, channels());
    Image level = rgb;
    for (int s = 0; s < kScales; ++s) {
      const Image smooth = detail::gaussian_blur(level, 1.0);
      Image feat(smooth.width, smooth.height, kPerScale);
      for (int y = 0; y < smooth.height; ++y)
        for (int x = 0; x < smooth.width; ++x) {
          auto lum = [&](int xx, int yy) {
            xx = std::clamp(xx, 0, smooth.width - 1);
            yy = std::clamp(yy, 0, smooth.height - 1);
            return 0.299f * smooth.at(xx, yy, 0) + 0.587f * smooth.at(xx, yy, 1) + 0.114f * smooth.at(xx, yy, 2);
          };
          for (int c = 0; c < 3; ++c) feat.at(x, y, c) = smooth.at(x, y, c);
          feat.at(x, y, 3) = 0.5f * std::abs(lum(x + 1, y) - lum(x - 1, y));
          feat.at(x, y, 4) = 0.5f * std::abs(lum(x, y + 1) - lum(x, y - 1));
        }
      const double scale = static_cast<double>(smooth.width) / rgb.width;
      float tmp[kPerScale];
      for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x) {
          sample_bilinear(feat, (x + 0.5) * scale - 0.5, (y + 0.5) * scale - 0.5, tmp);
          for (int c = 0; c < kPerScale; ++c) out.at(x, y, s * kPerScale + c) = tmp[c];
        }
      level = detail::downsample2(smooth);
    }
    return out;
  }
};

inline FeatureMap extract_features(const Image& rgb) { return PyramidExtractor{}.extract(rgb); }

/// Externally computed features stored as a PFM stack (<path> plus <path>.json).
inline FeatureMap load_feature_map(const std::filesystem::path& path, int expected_channels = 0) {
  FeatureMap f = io::read_pfm_stack(path);
  if (expected_channels > 0 && f.channels != expected_channels)
    throw IoError("load_feature_map: " + path.string() + " has " + std::to_string(f.channels) +
                  " channels, expected " + std::to_string(expected_channels));
  return f;
}

/// Cosine similarity; 0 when either vector has zero norm.
inline float cosine_similarity(std::span<const float> a, std::span<const float> b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) return 0.0f;
  return static_cast<float>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

// -- projection -------------------------------------------------------------

struct Projection {
  double u = 0;      // continuous pixel coordinates in view j
  double v = 0;
  double depth = 0;  // z-depth in view j
};

/// Lifts continuous pixel p_i with z-depth into camera i, moves it into camera j
/// and projects with j's intrinsics. Out-of-view (behind j or outside the
/// image) and non-positive depths yield nullopt.
inline std::optional<Projection> project_pixel(double u, double v, double depth, const Camera& cam_i,
                                               const Camera& cam_j) {
  if (!(depth > 0.0) || !std::isfinite(depth)) return std::nullopt;
  const Vec3 x_i = depth * cam_i.unproject(u, v);
  const Vec3 x_j = cam_j.world_to_camera(cam_i.camera_to_world(x_i));
  if (x_j.z() <= 1e-9) return std::nullopt;
  Projection p;
  p.u = cam_j.fx * x_j.x() / x_j.z() + cam_j.cx;
  p.v = cam_j.fy * x_j.y() / x_j.z() + cam_j.cy;
  p.depth = x_j.z();
  if (p.u < 0.0 || p.v < 0.0 || p.u >= cam_j.width || p.v >= cam_j.height) return std::nullopt;
  return p;
}

/// z-depth of the point at distance `t` along the unit ray through pixel center (px, py).
inline double ray_distance_to_z(const Camera& cam, int px, int py, double t) {
  return t / cam.unproject(px + 0.5, py + 0.5).norm();
}

// -- similarity ------------------------------------------------------------------

struct KnownView {
  FeatureMap features;
  Camera camera;
};

struct PseudoView {
  FeatureMap features;
  Image depth;    // expected distance along the unit ray
  Image opacity;  // rays below kNoSurfaceOpacity have no surface
  Camera camera;
};

struct SimilarityMap {
  Image similarity;         // max over valid projections, kNoEvidence when none
  std::vector<int> counts;  // valid projections per pixel
};

namespace detail {

inline std::optional<Projection> pixel_projection(const PseudoView& pv, int x, int y, const Camera& known) {
  if (pv.opacity.at(x, y) < kNoSurfaceOpacity) return std::nullopt;
  const double z = ray_distance_to_z(pv.camera, x, y, pv.depth.at(x, y));
  return project_pixel(x + 0.5, y + 0.5, z, pv.camera, known);
}

inline float pair_similarity(const PseudoView& pv, int x, int y, const KnownView& kv, const Projection& p,
                             std::vector<float>& scratch) {
  scratch.resize(static_cast<std::size_t>(kv.features.channels));
  sample_bilinear(kv.features, p.u - 0.5, p.v - 0.5, scratch.data());
  const float* f = pv.features.pixel(x, y);
  return cosine_similarity(std::span<const float>(f, static_cast<std::size_t>(pv.features.channels)), scratch);
}

}  // namespace detail

/// Similarity of every pseudo-view pixel against all known views. Each known
/// view is processed as a whole-image pass; the per-pixel result is the max
/// over views with a valid projection.
inline SimilarityMap similarity_map(const PseudoView& pv, std::span<const KnownView> known, int threads = 1) {
  const int W = pv.features.width, H = pv.features.height;
  if (pv.depth.width != W || pv.depth.height != H || pv.opacity.width != W || pv.opacity.height != H)
    throw std::invalid_argument("similarity_map: depth/opacity not aligned with features");
  const std::size_t n = static_cast<std::size_t>(W) * H;
  SimilarityMap out{Image(W, H, 1, kNoEvidence), std::vector<int>(n, 0)};
  std::vector<std::vector<float>> per_view(known.size(), std::vector<float>(n, 0.0f));
  std::vector<std::vector<char>> valid(known.size(), std::vector<char>(n, 0));
  parallel_for(known.size(), threads, [&](std::size_t j) {
    if (known[j].features.channels != pv.features.channels)
      throw std::invalid_argument("similarity_map: feature width differs between views");
    std::vector<float> scratch;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const auto p = detail::pixel_projection(pv, x, y, known[j].camera);
        if (!p) continue;
        const std::size_t i = static_cast<std::size_t>(y) * W + x;
        valid[j][i] = 1;
        per_view[j][i] = detail::pair_similarity(pv, x, y, known[j], *p, scratch);
      }
  });
  for (std::size_t j = 0; j < known.size(); ++j)
    for (std::size_t i = 0; i < n; ++i)
      if (valid[j][i]) {
        out.similarity.data[i] = out.counts[i] == 0 ? per_view[j][i] : std::max(out.similarity.data[i], per_view[j][i]);
        ++out.counts[i];
      }
  return out;
}

// -- thresholds ------------------------------------------------------------------

enum class ThresholdKind { kFixed, kAdaptive, kUnified };

struct ThresholdPolicy {
  ThresholdKind kind = ThresholdKind::kAdaptive;
  double tau0 = 0.6;
  double alpha = 0.15;
  double alpha_increment = 0.05;
  double beta = 0.0;  // unified only: 0 uses the raw clamped similarity, > 0 a sigmoid of it

  /// alpha for the 1-based iteration under the curriculum.
  [[nodiscard]] double alpha_at(int iteration) const {
    return std::clamp(alpha + alpha_increment * (iteration - 1), 0.0, 1.0);
  }

  void validate() const {
    if (tau0 < -1.0 || tau0 > 1.0) throw std::invalid_argument("threshold: tau0 outside [-1, 1]");
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("threshold: alpha outside [0, 1]");
    if (beta < 0.0) throw std::invalid_argument("threshold: beta must be positive");
  }
};

inline std::string kind_name(ThresholdKind k) {
  switch (k) {
    case ThresholdKind::kFixed: return "fixed";
    case ThresholdKind::kAdaptive: return "adaptive";
    case ThresholdKind::kUnified: return "unified";
  }
  return "?";
}

inline ThresholdKind parse_kind(const std::string& s) {
  if (s == "fixed") return ThresholdKind::kFixed;
  if (s == "adaptive") return ThresholdKind::kAdaptive;
  if (s == "unified") return ThresholdKind::kUnified;
  throw std::invalid_argument("unknown threshold policy '" + s + "'");
}

/// Nearest-rank percentile (percent in [0, 100]) of an unsorted multiset.
inline double nearest_rank_percentile(std::vector<float> values, double percent) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(percent / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

/// fixed -> tau0; adaptive -> nearest-rank (1 - alpha) percentile of the
/// similarities; unified -> no hard threshold (nullopt).
inline std::optional<double> compute_threshold(const std::vector<float>& similarities, const ThresholdPolicy& policy,
                                               double alpha, const std::string& set_name = "pseudo-label set") {
  switch (policy.kind) {
    case ThresholdKind::kFixed: return policy.tau0;
    case ThresholdKind::kUnified: return std::nullopt;
    case ThresholdKind::kAdaptive:
      if (similarities.empty())
        throw std::invalid_argument("compute_threshold: no valid similarities in " + set_name);
      return nearest_rank_percentile(similarities, 100.0 * (1.0 - alpha));
  }
  return std::nullopt;
}

/// Valid-projection similarities of a set of maps, pooled.
inline std::vector<float> pooled_similarities(std::span<const SimilarityMap> maps) {
  std::vector<float> out;
  for (const auto& m : maps)
    for (std::size_t i = 0; i < m.counts.size(); ++i)
      if (m.counts[i] > 0) out.push_back(m.similarity.data[i]);
  return out;
}

// -- masks -------------------------------------------------------------------------

struct ReliabilityMask {
  Image mask;        // {0, 1}
  Image similarity;  // max similarity, kNoEvidence where no projection
  std::vector<int> counts;

  [[nodiscard]] double reliable_fraction() const {
    double n = 0;
    for (float v : mask.data) n += v;
    return mask.data.empty() ? 0.0 : n / static_cast<double>(mask.data.size());
  }
};

/// M = 1 iff at least one valid projection and s > tau.
inline ReliabilityMask build_mask(const SimilarityMap& s, double tau) {
  ReliabilityMask m{Image(s.similarity.width, s.similarity.height, 1, 0.0f), s.similarity, s.counts};
  for (std::size_t i = 0; i < s.counts.size(); ++i)
    m.mask.data[i] = (s.counts[i] >= 1 && s.similarity.data[i] > static_cast<float>(tau)) ? 1.0f : 0.0f;
  return m;
}

/// Direct per-pixel transcription of the reliability-estimation loop: for every
/// pixel, warp into each labeled image with the rendered depth, compare
/// features by cosine similarity, and mark the pixel when any pair exceeds tau.
inline Image reference_mask(const PseudoView& pv, std::span<const KnownView> known, double tau) {
  Image m(pv.features.width, pv.features.height, 1, 0.0f);
  std::vector<float> scratch;
  for (int i = 0; i < pv.features.height; ++i)
    for (int j = 0; j < pv.features.width; ++j) {
      float hit = 0.0f;
      for (const auto& kv : known) {
        const auto warped = detail::pixel_projection(pv, j, i, kv.camera);
        if (!warped) continue;
        const float s = detail::pair_similarity(pv, j, i, kv, *warped, scratch);
        if (s > static_cast<float>(tau)) hit = 1.0f;
      }
      m.at(j, i) = hit;
    }
  return m;
}

struct MaskMetrics {
  double precision = 0;
  double recall = 0;
  double fpr = 0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

/// Binary-classification counts of pred against truth. An optional domain
/// mask restricts which pixels are counted. Empty denominators give
/// precision = recall = 1 and FPR = 0.
inline MaskMetrics mask_metrics(const Image& pred, const Image& truth, const Image* domain = nullptr) {
  if (pred.width != truth.width || pred.height != truth.height)
    throw std::invalid_argument("mask_metrics: mask dimensions differ");
  MaskMetrics m;
  for (std::size_t i = 0; i < pred.pixel_count(); ++i) {
    if (domain && domain->data[i] < 0.5f) continue;
    const bool p = pred.data[i * pred.channels] >= 0.5f, t = truth.data[i * truth.channels] >= 0.5f;
    if (p && t) ++m.tp;
    else if (p && !t) ++m.fp;
    else if (!p && t) ++m.fn;
    else ++m.tn;
  }
  m.precision = (m.tp + m.fp) ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 1.0;
  m.recall = (m.tp + m.fn) ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 1.0;
  m.fpr = (m.fp + m.tn) ? static_cast<double>(m.fp) / static_cast<double>(m.fp + m.tn) : 0.0;
  return m;
}

/// M = 1 iff ||rendered - ground truth||_2 < tolerance per pixel.
inline Image gt_mask(const Image& rendered, const Image& truth, double tolerance) {
  if (!rendered.same_dims(truth)) throw std::invalid_argument("gt_mask: image dimensions differ");
  Image m(rendered.width, rendered.height, 1, 0.0f);
  for (std::size_t i = 0; i < rendered.pixel_count(); ++i) {
    double d2 = 0;
    for (int c = 0; c < rendered.channels; ++c) {
      const double d = static_cast<double>(rendered.data[i * rendered.channels + c]) - truth.data[i * truth.channels + c];
      d2 += d * d;
    }
    m.data[i] = std::sqrt(d2) < tolerance ? 1.0f : 0.0f;
  }
  return m;
}

}  // namespace senerf::reliability
