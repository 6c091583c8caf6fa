#pragma once

// Ray generation, stratified sampling and alpha-compositing quadrature of the
// volume-rendering integral, both as plain numerics and on an autodiff tape.

#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "senerf/autodiff.hpp"
#include "senerf/camera.hpp"
#include "senerf/fields.hpp"
#include "senerf/image.hpp"
#include "senerf/parallel.hpp"

namespace senerf::render {

using ad::Tape;
using ad::Var;

/// Rays whose expected opacity falls below this carry no surface.
inline constexpr double kNoSurfaceOpacity = 0.05;
inline constexpr double kDepthEpsilon = 1e-6;

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit
};

/// One ray per pixel in row-major order, through pixel centers.
inline std::vector<Ray> generate_rays(const Camera& cam) {
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(cam.width) * cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) rays.push_back({cam.center, cam.pixel_direction(x, y)});
  return rays;
}

inline Ray pixel_ray(const Camera& cam, int x, int y) { return {cam.center, cam.pixel_direction(x, y)}; }

/// Evenly spaced bins over [near, far].
struct BinLayout {
  double near = 0.0;
  double far = 1.0;
  int bins = 1;

  [[nodiscard]] double width() const { return (far - near) / bins; }
  [[nodiscard]] double lower(int i) const { return near + i * width(); }
  friend bool operator==(const BinLayout&, const BinLayout&) = default;
};

inline BinLayout layout_for(const Camera& cam, int bins) { return {cam.near, cam.far, bins}; }

/// One sample per bin: uniform inside the bin, or the midpoint when jitter is off.
inline std::vector<double> stratified_sample(const BinLayout& layout, std::uint64_t key, bool jitter = true) {
  if (layout.bins < 1) throw std::invalid_argument("stratified_sample: need at least one bin");
  std::vector<double> t(static_cast<std::size_t>(layout.bins));
  SplitMix64 rng(key);
  const double w = layout.width();
  for (int i = 0; i < layout.bins; ++i) {
    const double u = jitter ? rng.uniform() : 0.5;
    t[static_cast<std::size_t>(i)] = layout.lower(i) + u * w;
  }
  return t;
}

/// delta_i = t_{i+1} - t_i; the last interval runs to the far bound.
inline void sample_deltas(std::span<const double> t, double far, std::span<double> out) {
  const std::size_t n = t.size();
  for (std::size_t i = 0; i + 1 < n; ++i) out[i] = t[i + 1] - t[i];
  if (n) out[n - 1] = far - t[n - 1];
}

struct CompositeResult {
  double rgb[3] = {0, 0, 0};
  double depth = 0;
  double opacity = 0;
  std::vector<double> weights;
  std::vector<double> alphas;
  std::vector<double> transmittance;
};

/// Alpha compositing: alpha_i = 1 - exp(-sigma_i delta_i), T_i = prod_{j<i} (1 - alpha_j),
/// w_i = T_i alpha_i, C = sum w_i c_i + (1 - sum w_i) background, D = sum w_i t_i / max(sum w_i, eps).
inline CompositeResult composite(std::span<const double> sigma, std::span<const double> rgb,
                                 std::span<const double> t, std::span<const double> delta,
                                 const Vec3& background, std::size_t ray_id = 0) {
  const std::size_t n = sigma.size();
  CompositeResult r;
  r.weights.resize(n);
  r.alphas.resize(n);
  r.transmittance.resize(n);
  double trans = 1.0, wsum = 0.0, dsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(sigma[i])) {
      std::ostringstream os;
      os << "composite: non-finite density at sample " << i << " of ray " << ray_id;
      throw std::domain_error(os.str());
    }
    const double a = 1.0 - std::exp(-sigma[i] * delta[i]);
    const double w = trans * a;
    r.alphas[i] = a;
    r.transmittance[i] = trans;
    r.weights[i] = w;
    for (int c = 0; c < 3; ++c) r.rgb[c] += w * rgb[3 * i + c];
    wsum += w;
    dsum += w * t[i];
    trans *= 1.0 - a;
  }
  for (int c = 0; c < 3; ++c) r.rgb[c] += (1.0 - wsum) * background[c];
  r.opacity = wsum;
  r.depth = dsum / std::max(wsum, kDepthEpsilon);
  return r;
}

/// Rays with per-bin sample distances, ready for field evaluation.
template <class T>
struct SampledRays {
  int bins = 0;
  std::vector<Ray> rays;
  std::vector<double> t;      // [R x S]
  std::vector<double> delta;  // [R x S]

  [[nodiscard]] std::size_t size() const { return rays.size(); }

  void add(const Ray& ray, const BinLayout& layout, std::uint64_t key, bool jitter) {
    if (rays.empty()) bins = layout.bins;
    if (layout.bins != bins) throw std::invalid_argument("SampledRays: bin count mismatch");
    rays.push_back(ray);
    const auto ts = stratified_sample(layout, key, jitter);
    const std::size_t off = t.size();
    t.insert(t.end(), ts.begin(), ts.end());
    delta.resize(t.size());
    sample_deltas(std::span<const double>(t).subspan(off), layout.far, std::span<double>(delta).subspan(off));
  }

  [[nodiscard]] field::PointBatch<T> points() const {
    field::PointBatch<T> b;
    const std::size_t S = static_cast<std::size_t>(bins);
    b.positions.resize(rays.size() * S * 3);
    b.directions.resize(rays.size() * S * 3);
    for (std::size_t r = 0; r < rays.size(); ++r)
      for (std::size_t s = 0; s < S; ++s) {
        const Vec3 x = rays[r].origin + t[r * S + s] * rays[r].direction;
        for (int a = 0; a < 3; ++a) {
          b.positions[(r * S + s) * 3 + a] = static_cast<T>(x[a]);
          b.directions[(r * S + s) * 3 + a] = static_cast<T>(rays[r].direction[a]);
        }
      }
    return b;
  }
};

/// Differentiable compositing outputs for R rays of S samples.
struct TapeComposite {
  Var rgb;      // [R x 3]
  Var weights;  // [R x S]
  Var opacity;  // [R x 1]
};

/// sigma [R x S] (or [R*S x 1]), rgb [R*S x 3], deltas constant [R x S].
template <class T>
TapeComposite composite(Tape<T>& tape, Var sigma, Var rgb, std::size_t rays, std::size_t samples,
                        std::span<const double> delta, const Vec3& background) {
  const Var sig = tape.reshape(sigma, {rays, samples});
  {
    const auto v = tape.value(sig);
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!std::isfinite(v[i])) {
        std::ostringstream os;
        os << "composite: non-finite density at sample " << i % samples << " of ray " << i / samples;
        throw std::domain_error(os.str());
      }
  }
  std::vector<T> d(delta.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(delta[i]);
  const Var tau = tape.mul(sig, tape.constant({rays, samples}, std::move(d)));
  const Var trans = tape.exp(tape.scale(tape.exclusive_cumsum(tau), T(-1)));
  const Var alpha = tape.add_scalar(tape.scale(tape.exp(tape.scale(tau, T(-1))), T(-1)), T(1));
  const Var w = tape.mul(trans, alpha);
  const Var opacity = tape.row_sum(w);
  const Var color = tape.batched_matvec(w, rgb);
  std::vector<T> bg(rays * 3);
  for (std::size_t r = 0; r < rays; ++r)
    for (int c = 0; c < 3; ++c) bg[r * 3 + c] = static_cast<T>(background[c]);
  const Var empty = tape.broadcast_cols(tape.add_scalar(tape.scale(opacity, T(-1)), T(1)), 3);
  const Var out = tape.add(color, tape.mul(empty, tape.constant({rays, 3}, std::move(bg))));
  return {out, w, opacity};
}

/// Field evaluation + compositing of a ray bundle on a tape.
template <class T>
TapeComposite render_rays(Tape<T>& tape, std::span<const Var> bound, const field::RadianceField<T>& f,
                          const SampledRays<T>& rays, const Vec3& background, double step,
                          Var* sigma_out = nullptr) {
  const auto pts = rays.points();
  const auto out = f.eval(tape, bound, pts, step);
  if (sigma_out) *sigma_out = out.sigma;
  return composite(tape, out.sigma, out.rgb, rays.size(), static_cast<std::size_t>(rays.bins), rays.delta,
                   background);
}

struct RenderOptions {
  int bins = 64;
  bool jitter = false;
  bool retain_weights = false;
  bool retain_sigma = false;
  std::uint64_t seed = 0;
  std::uint64_t view_id = 0;
  Vec3 background = Vec3::Ones();
  std::size_t chunk = 512;
  int threads = 1;
  double step = 1e18;  // annealing step; large = all bands on
};

struct RenderedView {
  Image color;    // H x W x 3
  Image depth;    // H x W (expected sample distance along the unit ray)
  Image opacity;  // H x W
  int bins = 0;
  std::vector<float> weights;  // H*W*bins when retained
  std::vector<float> sigma;    // H*W*bins when retained
  std::vector<float> samples;  // H*W*bins sample distances when weights retained

  [[nodiscard]] bool has_surface(int x, int y) const { return opacity.at(x, y) >= kNoSurfaceOpacity; }
};

template <class T>
RenderedView render_view(const field::RadianceField<T>& f, const Camera& cam, const RenderOptions& opt) {
  cam.validate();
  const BinLayout layout = layout_for(cam, opt.bins);
  const std::size_t n_pix = static_cast<std::size_t>(cam.width) * cam.height;
  const std::size_t S = static_cast<std::size_t>(opt.bins);
  RenderedView view;
  view.bins = opt.bins;
  view.color = Image(cam.width, cam.height, 3);
  view.depth = Image(cam.width, cam.height, 1);
  view.opacity = Image(cam.width, cam.height, 1);
  if (opt.retain_weights) {
    view.weights.resize(n_pix * S);
    view.samples.resize(n_pix * S);
  }
  if (opt.retain_sigma) view.sigma.resize(n_pix * S);
  const std::size_t chunks = (n_pix + opt.chunk - 1) / opt.chunk;
  parallel_for(chunks, opt.threads, [&](std::size_t c) {
    const std::size_t begin = c * opt.chunk, end = std::min(n_pix, begin + opt.chunk);
    SampledRays<T> rays;
    for (std::size_t p = begin; p < end; ++p) {
      const int x = static_cast<int>(p % cam.width), y = static_cast<int>(p / cam.width);
      rays.add(pixel_ray(cam, x, y), layout, ray_key(opt.seed, opt.view_id, p), opt.jitter);
    }
    Tape<T> tape;
    const auto bound = f.bind(tape);
    Var sigma;
    const auto out = render_rays(tape, bound, f, rays, opt.background, opt.step, &sigma);
    const auto rgb = tape.value(out.rgb);
    const auto w = tape.value(out.weights);
    const auto sg = tape.value(sigma);
    for (std::size_t p = begin; p < end; ++p) {
      const std::size_t r = p - begin;
      double wsum = 0.0, dsum = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        wsum += static_cast<double>(w[r * S + s]);
        dsum += static_cast<double>(w[r * S + s]) * rays.t[r * S + s];
      }
      for (int k = 0; k < 3; ++k) view.color.data[p * 3 + k] = static_cast<float>(rgb[r * 3 + k]);
      view.opacity.data[p] = static_cast<float>(wsum);
      view.depth.data[p] = static_cast<float>(dsum / std::max(wsum, kDepthEpsilon));
      if (opt.retain_weights)
        for (std::size_t s = 0; s < S; ++s) {
          view.weights[p * S + s] = static_cast<float>(w[r * S + s]);
          view.samples[p * S + s] = static_cast<float>(rays.t[r * S + s]);
        }
      if (opt.retain_sigma)
        for (std::size_t s = 0; s < S; ++s) view.sigma[p * S + s] = static_cast<float>(sg[r * S + s]);
    }
  });
  return view;
}

}  // namespace senerf::render
