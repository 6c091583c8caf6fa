#pragma once

// Training objectives: photometric supervision on known rays, reliable
// color/geometry distillation on pseudo rays, the Gaussian-neighbor prior for
// unreliable rays and the similarity-weighted unified variant.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "senerf/autodiff.hpp"
#include "senerf/camera.hpp"
#include "senerf/fields.hpp"
#include "senerf/image.hpp"
#include "senerf/renderer.hpp"

namespace senerf::distill {

using ad::Tape;
using ad::Var;

// -- kernel ------------------------------------------------------------------------

/// Discretized isotropic Gaussian (std 1) over a Q x Q window, center excluded.
/// Weights are normalized over the window.
class GaussianKernel {
 public:
  explicit GaussianKernel(int size = 3) : size_(size) {
    if (size < 3 || size % 2 == 0) throw std::invalid_argument("GaussianKernel: size must be odd and >= 3");
    const int r = radius();
    weights_.assign(static_cast<std::size_t>(size * size), 0.0);
    double sum = 0.0;
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) {
        if (dx == 0 && dy == 0) continue;
        const double g = std::exp(-0.5 * (dx * dx + dy * dy));
        weights_[index(dx, dy)] = g;
        sum += g;
      }
    for (auto& w : weights_) w /= sum;
  }

  [[nodiscard]] int size() const { return size_; }
  [[nodiscard]] int radius() const { return size_ / 2; }
  [[nodiscard]] double weight(int dx, int dy) const { return weights_[index(dx, dy)]; }

 private:
  [[nodiscard]] std::size_t index(int dx, int dy) const {
    return static_cast<std::size_t>((dy + radius()) * size_ + dx + radius());
  }
  int size_;
  std::vector<double> weights_;
};

struct DistillWeights {
  double color = 1.0;     // reliable color
  double geometry = 1.0;  // reliable geometry
  double prior = 0.005;   // prior-based geometry on unreliable rays

  void validate() const {
    if (color < 0 || geometry < 0 || prior < 0) throw std::invalid_argument("distill weights must be non-negative");
  }
};

enum class Mode { kBinary, kUnified };
enum class GeometrySource { kWeights, kSigma };

inline double sigmoid_weight(double s, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("sigmoid_weight: beta must be positive");
  return 1.0 / (1.0 + std::exp(-beta * (s - 0.7)));
}

/// Blend weight of a similarity in the unified variant: clamp to [0, 1], or a
/// sigmoid of it when beta > 0.
inline double unified_weight(double s, double beta) {
  return beta > 0.0 ? sigmoid_weight(s, beta) : std::clamp(s, 0.0, 1.0);
}

// -- per-view labels -----------------------------------------------------------------

/// Frozen teacher outputs for one pseudo view plus the derived distillation
/// targets. Per-bin arrays are [H*W*bins], row-major over pixels.
struct LabelView {
  std::string name;
  Camera camera;
  render::BinLayout layout;
  Image color;       // H x W x 3
  Image depth;       // H x W
  Image mask;        // H x W {0, 1}
  Image similarity;  // H x W, -1 where no projection
  std::vector<float> bins;  // teacher per-bin weights (or raw densities)
  std::uint64_t teacher_hash = 0;

  // Derived: prior targets for unreliable rays.
  std::vector<float> prior;
  std::vector<char> prior_valid;
  // Derived: unified-mode blend weight, neighbor target and constant.
  std::vector<float> direct_weight;
  std::vector<float> neighbor;
  std::vector<float> neighbor_const;
  std::vector<char> neighbor_valid;

  [[nodiscard]] int width() const { return color.width; }
  [[nodiscard]] int height() const { return color.height; }
  [[nodiscard]] std::size_t pixels() const { return color.pixel_count(); }
  [[nodiscard]] bool reliable(std::size_t p) const { return mask.data[p] >= 0.5f; }
};

/// Gaussian-weighted average of reliable neighbors' per-bin values around
/// pixel (x, y); nullopt when no neighbor in the window is reliable.
inline std::optional<std::vector<float>> gaussian_weighted_density(const Image& mask, std::span<const float> bins,
                                                                   int n_bins, int x, int y,
                                                                   const GaussianKernel& kernel) {
  const int r = kernel.radius();
  const auto S = static_cast<std::size_t>(n_bins);
  std::vector<double> acc(S, 0.0);
  double norm = 0.0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      if (dx == 0 && dy == 0) continue;
      const int xx = x + dx, yy = y + dy;
      if (xx < 0 || yy < 0 || xx >= mask.width || yy >= mask.height || mask.at(xx, yy) < 0.5f) continue;
      const double g = kernel.weight(dx, dy);
      const std::size_t off = (static_cast<std::size_t>(yy) * mask.width + xx) * S;
      for (std::size_t s = 0; s < S; ++s) acc[s] += g * bins[off + s];
      norm += g;
    }
  if (norm <= 0.0) return std::nullopt;
  std::vector<float> out(S);
  for (std::size_t s = 0; s < S; ++s) out[s] = static_cast<float>(acc[s] / norm);
  return out;
}

/// Fills the prior targets of every unreliable pixel.
inline void prepare_prior(LabelView& v, const GaussianKernel& kernel) {
  const auto S = static_cast<std::size_t>(v.layout.bins);
  v.prior.assign(v.pixels() * S, 0.0f);
  v.prior_valid.assign(v.pixels(), 0);
  for (int y = 0; y < v.height(); ++y)
    for (int x = 0; x < v.width(); ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * v.width() + x;
      if (v.reliable(p)) continue;
      const auto t = gaussian_weighted_density(v.mask, v.bins, v.layout.bins, x, y, kernel);
      if (!t) continue;
      std::copy(t->begin(), t->end(), v.prior.begin() + static_cast<std::ptrdiff_t>(p * S));
      v.prior_valid[p] = 1;
    }
}

/// Unified-mode targets. The neighbor term sum_xy a_xy ||T_xy - w||^2 with
/// normalized a is rewritten as ||Tbar - w||^2 + (sum a ||T_xy||^2 - ||Tbar||^2).
inline void prepare_unified(LabelView& v, const GaussianKernel& kernel, double beta) {
  const auto S = static_cast<std::size_t>(v.layout.bins);
  const int W = v.width(), H = v.height(), r = kernel.radius();
  const std::size_t n = v.pixels();
  v.direct_weight.assign(n, 0.0f);
  for (std::size_t p = 0; p < n; ++p) v.direct_weight[p] = static_cast<float>(unified_weight(v.similarity.data[p], beta));
  v.neighbor.assign(n * S, 0.0f);
  v.neighbor_const.assign(n, 0.0f);
  v.neighbor_valid.assign(n, 0);
  std::vector<double> acc(S);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      std::fill(acc.begin(), acc.end(), 0.0);
      double norm = 0.0, sq = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int xx = x + dx, yy = y + dy;
          if (xx < 0 || yy < 0 || xx >= W || yy >= H) continue;
          const std::size_t q = static_cast<std::size_t>(yy) * W + xx;
          const double ds = static_cast<double>(v.direct_weight[q]) - v.direct_weight[p];
          if (ds <= 0.0) continue;
          const double a = ds * kernel.weight(dx, dy);
          for (std::size_t s = 0; s < S; ++s) {
            const double b = v.bins[q * S + s];
            acc[s] += a * b;
            sq += a * b * b;
          }
          norm += a;
        }
      if (norm <= 0.0) continue;
      double mean_sq = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        const double m = acc[s] / norm;
        v.neighbor[p * S + s] = static_cast<float>(m);
        mean_sq += m * m;
      }
      v.neighbor_const[p] = static_cast<float>(std::max(0.0, sq / norm - mean_sq));
      v.neighbor_valid[p] = 1;
    }
}

// -- ray batches ----------------------------------------------------------------------

/// Known-view rays with ground-truth colors.
template <class T>
struct KnownBatch {
  render::SampledRays<T> rays;
  std::vector<T> target;  // [R x 3]
};

/// Pseudo rays with per-ray label data copied out of their LabelView.
template <class T>
struct PseudoBatch {
  render::SampledRays<T> rays;
  std::vector<render::BinLayout> layouts;
  std::vector<T> color;           // [R x 3] teacher color
  std::vector<T> bins;            // [R x S] teacher per-bin values
  std::vector<T> mask;            // [R]
  std::vector<T> prior;           // [R x S]
  std::vector<T> prior_valid;     // [R]
  std::vector<T> direct_weight;   // [R] unified
  std::vector<T> neighbor;        // [R x S] unified
  std::vector<T> neighbor_const;  // [R] unified
  std::vector<T> neighbor_valid;  // [R] unified

  [[nodiscard]] std::size_t size() const { return rays.size(); }

  /// Appends the ray through pixel p of `view`, sampled with the student's own jitter.
  void add(const LabelView& view, std::size_t p, std::uint64_t key, bool jitter) {
    const int x = static_cast<int>(p % static_cast<std::size_t>(view.width()));
    const int y = static_cast<int>(p / static_cast<std::size_t>(view.width()));
    const auto S = static_cast<std::size_t>(view.layout.bins);
    rays.add(render::pixel_ray(view.camera, x, y), view.layout, key, jitter);
    layouts.push_back(view.layout);
    for (int c = 0; c < 3; ++c) color.push_back(static_cast<T>(view.color.data[p * 3 + static_cast<std::size_t>(c)]));
    for (std::size_t s = 0; s < S; ++s) bins.push_back(static_cast<T>(view.bins[p * S + s]));
    mask.push_back(view.reliable(p) ? T(1) : T(0));
    const bool has_prior = !view.prior_valid.empty() && view.prior_valid[p];
    prior_valid.push_back(has_prior ? T(1) : T(0));
    for (std::size_t s = 0; s < S; ++s) prior.push_back(has_prior ? static_cast<T>(view.prior[p * S + s]) : T(0));
    const bool unified = !view.direct_weight.empty();
    direct_weight.push_back(unified ? static_cast<T>(view.direct_weight[p]) : T(0));
    const bool has_nb = unified && view.neighbor_valid[p];
    neighbor_valid.push_back(has_nb ? T(1) : T(0));
    neighbor_const.push_back(has_nb ? static_cast<T>(view.neighbor_const[p]) : T(0));
    for (std::size_t s = 0; s < S; ++s) neighbor.push_back(has_nb ? static_cast<T>(view.neighbor[p * S + s]) : T(0));
  }
};

// -- losses on a tape ------------------------------------------------------------------

/// sum_r w_r ||a_r - b_r||^2 for a [R x k] residual and per-row weights.
template <class T>
Var weighted_squared_rows(Tape<T>& tape, Var residual, std::span<const T> row_weights) {
  const auto shape = tape.shape(residual);
  if (row_weights.size() != shape.rows) {
    std::ostringstream os;
    os << "weighted_squared_rows: " << row_weights.size() << " weights for " << ad::to_string(shape);
    throw ad::ShapeError(os.str());
  }
  const Var per_row = tape.row_sum(tape.mul(residual, residual));
  return tape.sum(tape.mul(per_row, tape.constant({shape.rows, 1}, std::vector<T>(row_weights.begin(), row_weights.end()))));
}

/// sum_r ||C_gt(r) - C(r)||^2
template <class T>
Var photometric_loss(Tape<T>& tape, Var rendered, std::span<const T> target) {
  const auto shape = tape.shape(rendered);
  const Var gt = tape.constant(shape, std::vector<T>(target.begin(), target.end()));
  return tape.squared_norm(tape.sub(gt, rendered));
}

/// sum_r M(r) ||C_teacher(r) - C(r)||^2
template <class T>
Var reliable_color_loss(Tape<T>& tape, Var rendered, std::span<const T> teacher, std::span<const T> mask) {
  const Var t = tape.constant(tape.shape(rendered), std::vector<T>(teacher.begin(), teacher.end()));
  return weighted_squared_rows(tape, tape.sub(t, rendered), mask);
}

/// Rejects a student ray whose bin layout differs from its label.
inline void check_layouts(std::span<const render::BinLayout> teacher, std::span<const render::BinLayout> student) {
  if (teacher.size() != student.size()) throw std::invalid_argument("bin layout count mismatch");
  for (std::size_t r = 0; r < teacher.size(); ++r)
    if (!(teacher[r] == student[r])) {
      std::ostringstream os;
      os << "bin layout mismatch on ray " << r << ": teacher [" << teacher[r].near << ", " << teacher[r].far << "]x"
         << teacher[r].bins << " vs student [" << student[r].near << ", " << student[r].far << "]x" << student[r].bins;
      throw std::invalid_argument(os.str());
    }
}

/// sum_r M(r) sum_bins (w_T - w_S)^2
template <class T>
Var reliable_geometry_loss(Tape<T>& tape, Var student_bins, std::span<const T> teacher_bins, std::span<const T> mask) {
  const Var t = tape.constant(tape.shape(student_bins), std::vector<T>(teacher_bins.begin(), teacher_bins.end()));
  return weighted_squared_rows(tape, tape.sub(t, student_bins), mask);
}

/// sum_r (1 - M(r)) sum_bins (prior - w_S)^2 over rays with a prior target.
template <class T>
Var prior_geometry_loss(Tape<T>& tape, Var student_bins, std::span<const T> prior, std::span<const T> mask,
                        std::span<const T> prior_valid) {
  std::vector<T> w(mask.size());
  for (std::size_t r = 0; r < w.size(); ++r) w[r] = (T(1) - mask[r]) * prior_valid[r];
  const Var t = tape.constant(tape.shape(student_bins), std::vector<T>(prior.begin(), prior.end()));
  return weighted_squared_rows(tape, tape.sub(t, student_bins), std::span<const T>(w));
}

/// Similarity-blended geometry: s ||T - w||^2 + (1 - s) (||Tbar - w||^2 + c).
template <class T>
Var unified_geometry_loss(Tape<T>& tape, Var student_bins, const PseudoBatch<T>& b) {
  const auto shape = tape.shape(student_bins);
  const Var direct = weighted_squared_rows(
      tape, tape.sub(tape.constant(shape, std::vector<T>(b.bins)), student_bins), std::span<const T>(b.direct_weight));
  std::vector<T> nw(b.size());
  T constant = T(0);
  for (std::size_t r = 0; r < nw.size(); ++r) {
    nw[r] = (T(1) - b.direct_weight[r]) * b.neighbor_valid[r];
    constant += nw[r] * b.neighbor_const[r];
  }
  const Var nb = weighted_squared_rows(tape, tape.sub(tape.constant(shape, std::vector<T>(b.neighbor)), student_bins),
                                       std::span<const T>(nw));
  return tape.add_scalar(tape.add(direct, nb), constant);
}

/// Each objective term as a tape node (scalar), plus the weighted total.
struct LossTerms {
  Var photometric, color, geometry, prior, total;
  bool has_pseudo = false;
};

struct LossValues {
  double photometric = 0, color = 0, geometry = 0, prior = 0, total = 0;
};

template <class T>
LossValues values_of(const Tape<T>& tape, const LossTerms& t) {
  LossValues v;
  v.photometric = static_cast<double>(tape.scalar(t.photometric));
  v.total = static_cast<double>(tape.scalar(t.total));
  if (t.has_pseudo) {
    v.color = static_cast<double>(tape.scalar(t.color));
    v.geometry = static_cast<double>(tape.scalar(t.geometry));
    v.prior = static_cast<double>(tape.scalar(t.prior));
  }
  return v;
}

struct ObjectiveOptions {
  DistillWeights weights;
  Mode mode = Mode::kBinary;
  GeometrySource source = GeometrySource::kWeights;
  Vec3 background = Vec3::Ones();
  double step = 1e18;
};

/// L_photo + lc L_c + lg L_g + lp L_p over one known + pseudo batch. With an
/// empty pseudo batch this is the photometric objective alone.
template <class T>
LossTerms total_student_loss(Tape<T>& tape, std::span<const Var> bound, const field::RadianceField<T>& f,
                             const KnownBatch<T>& known, const PseudoBatch<T>* pseudo, const ObjectiveOptions& o) {
  LossTerms out;
  const auto kr = render::render_rays(tape, bound, f, known.rays, o.background, o.step);
  out.photometric = photometric_loss(tape, kr.rgb, std::span<const T>(known.target));
  out.total = out.photometric;
  if (!pseudo || pseudo->size() == 0) return out;
  out.has_pseudo = true;
  const PseudoBatch<T>& b = *pseudo;
  for (std::size_t r = 0; r < b.size(); ++r)
    if (b.layouts[r].bins != b.rays.bins) {
      std::ostringstream os;
      os << "bin layout mismatch on ray " << r << ": label has " << b.layouts[r].bins << " bins, student samples "
         << b.rays.bins;
      throw std::invalid_argument(os.str());
    }
  Var sigma;
  const auto pr = render::render_rays(tape, bound, f, b.rays, o.background, o.step, &sigma);
  const Var student_bins =
      o.source == GeometrySource::kWeights ? pr.weights : tape.reshape(sigma, {b.size(), static_cast<std::size_t>(b.rays.bins)});
  if (o.mode == Mode::kBinary) {
    out.color = reliable_color_loss(tape, pr.rgb, std::span<const T>(b.color), std::span<const T>(b.mask));
    out.geometry = reliable_geometry_loss(tape, student_bins, std::span<const T>(b.bins), std::span<const T>(b.mask));
    out.prior = prior_geometry_loss(tape, student_bins, std::span<const T>(b.prior), std::span<const T>(b.mask),
                                    std::span<const T>(b.prior_valid));
  } else {
    out.color = reliable_color_loss(tape, pr.rgb, std::span<const T>(b.color), std::span<const T>(b.direct_weight));
    out.geometry = unified_geometry_loss(tape, student_bins, b);
    out.prior = tape.constant({1, 1}, T(0));
  }
  const Var distilled =
      tape.add(tape.add(tape.scale(out.color, static_cast<T>(o.weights.color)),
                        tape.scale(out.geometry, static_cast<T>(o.weights.geometry))),
               tape.scale(out.prior, static_cast<T>(o.weights.prior)));
  out.total = tape.add(out.photometric, distilled);
  return out;
}

}  // namespace senerf::distill
