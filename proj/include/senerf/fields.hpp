#pragma once

// Radiance-field parameterizations evaluated on an autodiff tape:
//  * KPlanesField: three axis-aligned feature planes combined by Hadamard
//    product, decoded by a density MLP and a view-dependent color MLP.
//  * MlpField: coordinate MLP over a positional encoding whose frequency
//    bands are annealed coarse-to-fine.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "senerf/autodiff.hpp"
#include "senerf/camera.hpp"
#include "senerf/image.hpp"

namespace senerf::field {

using ad::Parameter;
using ad::Shape;
using ad::Tape;
using ad::Var;

enum ParamGroup : int { kGridGroup = 0, kDecoderGroup = 1 };

// -- frequency annealing --------------------------------------------------

/// Coarse-to-fine band gating: eta(t) = m t / N, w_j = (1 - cos(pi clamp(eta - j, 0, 1))) / 2.
struct AnnealSchedule {
  int bands = 1;
  double full_on_step = 0.0;  // N; <= 0 disables annealing (all bands on)

  [[nodiscard]] double eta(double step) const {
    if (full_on_step <= 0.0) return static_cast<double>(bands);
    return static_cast<double>(bands) * step / full_on_step;
  }
};

inline double band_weight(double eta, int band) {
  const double x = std::clamp(eta - band, 0.0, 1.0);
  return (1.0 - std::cos(std::numbers::pi * x)) / 2.0;
}

/// Encodes n k-dimensional inputs (row-major) into rows laid out as
/// [raw (optional) | sin band 0 (k) | cos band 0 (k) | sin band 1 | ...],
/// each band scaled by its annealing weight. Width = k * 2 * m (+ k).
template <class T>
std::vector<T> positional_encoding(std::span<const T> input, std::size_t k, const AnnealSchedule& sched,
                                   double step, bool include_raw) {
  const std::size_t n = input.size() / k;
  const std::size_t m = static_cast<std::size_t>(sched.bands);
  const std::size_t width = k * 2 * m + (include_raw ? k : 0);
  std::vector<T> out(n * width);
  const double eta = sched.eta(step);
  std::vector<T> weights(m);
  for (std::size_t j = 0; j < m; ++j) weights[j] = static_cast<T>(band_weight(eta, static_cast<int>(j)));
  for (std::size_t r = 0; r < n; ++r) {
    T* o = out.data() + r * width;
    const T* v = input.data() + r * k;
    std::size_t c = 0;
    if (include_raw)
      for (std::size_t d = 0; d < k; ++d) o[c++] = v[d];
    for (std::size_t j = 0; j < m; ++j) {
      const T freq = static_cast<T>(std::ldexp(std::numbers::pi, static_cast<int>(j)));
      for (std::size_t d = 0; d < k; ++d) o[c++] = weights[j] * std::sin(freq * v[d]);
      for (std::size_t d = 0; d < k; ++d) o[c++] = weights[j] * std::cos(freq * v[d]);
    }
  }
  return out;
}

inline std::size_t encoding_width(std::size_t k, int bands, bool include_raw) {
  return k * 2 * static_cast<std::size_t>(bands) + (include_raw ? k : 0);
}

/// Field outputs for a batch of n points.
struct FieldOutput {
  Var sigma;  // [n x 1], >= 0
  Var rgb;    // [n x 3], in (0, 1)
};

/// Batch of query points and unit view directions (row-major n x 3).
template <class T>
struct PointBatch {
  std::vector<T> positions;
  std::vector<T> directions;
  [[nodiscard]] std::size_t size() const { return positions.size() / 3; }
};

namespace detail {

template <class T>
void init_uniform(Parameter<T>& p, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : p.values()) v = static_cast<T>(dist(rng));
}

template <class T>
void init_linear(Parameter<T>& w, Parameter<T>& b, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.shape().rows));
  init_uniform(w, -bound, bound, rng);
  std::fill(b.values().begin(), b.values().end(), T(0));
}

template <class T>
Var linear(Tape<T>& tape, Var x, Var w, Var b) {
  return tape.add_row_bias(tape.matmul(x, w), b);
}

template <class T>
Var hidden_activation(Tape<T>& tape, Var x, const std::string& kind) {
  return kind == "softplus" ? tape.softplus(x) : tape.relu(x);
}

inline void check_activation(const std::string& kind) {
  if (kind != "relu" && kind != "softplus")
    throw std::invalid_argument("unknown hidden activation '" + kind + "' (relu or softplus)");
}

}  // namespace detail

// -- K-Planes ---------------------------------------------------------------

struct KPlanesConfig {
  int resolution = 32;     // N
  int features = 8;        // M
  int hidden = 32;         // decoder width
  int geo_features = 15;   // width of q-hat
  int dir_bands = 2;       // view-direction encoding bands
  double box_min = -1.0;   // cubic scene box
  double box_max = 1.0;
  std::string activation = "softplus";  // decoder hidden layers

  friend bool operator==(const KPlanesConfig&, const KPlanesConfig&) = default;
};

inline void to_json(nlohmann::json& j, const KPlanesConfig& c) {
  j = {{"resolution", c.resolution}, {"features", c.features}, {"hidden", c.hidden},
       {"geo_features", c.geo_features}, {"dir_bands", c.dir_bands},
       {"box_min", c.box_min}, {"box_max", c.box_max}, {"activation", c.activation}};
}
inline void from_json(const nlohmann::json& j, KPlanesConfig& c) {
  c.activation = j.value("activation", c.activation);
  detail::check_activation(c.activation);
  c.resolution = j.value("resolution", c.resolution);
  c.features = j.value("features", c.features);
  c.hidden = j.value("hidden", c.hidden);
  c.geo_features = j.value("geo_features", c.geo_features);
  c.dir_bands = j.value("dir_bands", c.dir_bands);
  c.box_min = j.value("box_min", c.box_min);
  c.box_max = j.value("box_max", c.box_max);
}

template <class T>
class KPlanesField {
 public:
  enum Index : std::size_t {
    kPlaneXY, kPlaneYZ, kPlaneXZ,
    kSigmaW1, kSigmaB1, kSigmaW2, kSigmaB2,
    kRgbW1, kRgbB1, kRgbW2, kRgbB2,
    kCount
  };

  explicit KPlanesField(KPlanesConfig cfg = {}) : cfg_(cfg) {
    const std::size_t N = static_cast<std::size_t>(cfg.resolution);
    const std::size_t M = static_cast<std::size_t>(cfg.features);
    const std::size_t H = static_cast<std::size_t>(cfg.hidden);
    const std::size_t G = static_cast<std::size_t>(cfg.geo_features);
    const std::size_t D = encoding_width(3, cfg.dir_bands, false);
    if (cfg.resolution < 2 || cfg.features < 1 || cfg.hidden < 1 || cfg.box_max <= cfg.box_min)
      throw std::invalid_argument("KPlanesField: invalid configuration");
    params_.reserve(kCount);
    params_.emplace_back("plane_xy", Shape{N * N, M}, kGridGroup);
    params_.emplace_back("plane_yz", Shape{N * N, M}, kGridGroup);
    params_.emplace_back("plane_xz", Shape{N * N, M}, kGridGroup);
    params_.emplace_back("sigma_w1", Shape{M, H}, kDecoderGroup);
    params_.emplace_back("sigma_b1", Shape{1, H}, kDecoderGroup);
    params_.emplace_back("sigma_w2", Shape{H, 1 + G}, kDecoderGroup);
    params_.emplace_back("sigma_b2", Shape{1, 1 + G}, kDecoderGroup);
    params_.emplace_back("rgb_w1", Shape{G + D, H}, kDecoderGroup);
    params_.emplace_back("rgb_b1", Shape{1, H}, kDecoderGroup);
    params_.emplace_back("rgb_w2", Shape{H, 3}, kDecoderGroup);
    params_.emplace_back("rgb_b2", Shape{1, 3}, kDecoderGroup);
  }

  KPlanesField(const KPlanesField& o) : cfg_(o.cfg_), params_(o.params_), clamped_(o.clamped_.load()) {}
  KPlanesField& operator=(const KPlanesField& o) {
    cfg_ = o.cfg_;
    params_ = o.params_;
    clamped_ = o.clamped_.load();
    return *this;
  }

  /// Planes uniform in [0.1, 0.5]; decoder weights uniform +-1/sqrt(fan_in); biases 0.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t k = kPlaneXY; k <= kPlaneXZ; ++k) detail::init_uniform(params_[k], 0.1, 0.5, rng);
    detail::init_linear(params_[kSigmaW1], params_[kSigmaB1], rng);
    detail::init_linear(params_[kSigmaW2], params_[kSigmaB2], rng);
    detail::init_linear(params_[kRgbW1], params_[kRgbB1], rng);
    detail::init_linear(params_[kRgbW2], params_[kRgbB2], rng);
  }

  [[nodiscard]] const KPlanesConfig& config() const noexcept { return cfg_; }
  std::vector<Parameter<T>>& params() noexcept { return params_; }
  [[nodiscard]] const std::vector<Parameter<T>>& params() const noexcept { return params_; }
  [[nodiscard]] std::uint64_t clamped_points() const noexcept { return clamped_.load(); }

  /// Node-space coordinates for the three planes: [n x 2] each, in (xy, yz, xz) order.
  std::array<std::vector<T>, 3> plane_coords(std::span<const T> positions) const {
    const std::size_t n = positions.size() / 3;
    const double scale = (cfg_.resolution - 1) / (cfg_.box_max - cfg_.box_min);
    std::array<std::vector<T>, 3> out;
    for (auto& o : out) o.resize(2 * n);
    std::uint64_t clamped = 0;
    for (std::size_t i = 0; i < n; ++i) {
      T g[3];
      bool outside = false;
      for (int a = 0; a < 3; ++a) {
        double x = static_cast<double>(positions[3 * i + a]);
        if (x < cfg_.box_min || x > cfg_.box_max) {
          outside = true;
          x = std::clamp(x, cfg_.box_min, cfg_.box_max);
        }
        g[a] = static_cast<T>((x - cfg_.box_min) * scale);
      }
      clamped += outside ? 1 : 0;
      out[0][2 * i] = g[0]; out[0][2 * i + 1] = g[1];
      out[1][2 * i] = g[1]; out[1][2 * i + 1] = g[2];
      out[2][2 * i] = g[0]; out[2][2 * i + 1] = g[2];
    }
    if (clamped) clamped_.fetch_add(clamped, std::memory_order_relaxed);
    return out;
  }

  /// q(x) = prod_k bilinear(P_k, pi_k(x)) -> [n x M]
  Var features(Tape<T>& tape, std::span<const Var> bound, std::span<const T> positions) const {
    const auto coords = plane_coords(positions);
    const auto N = static_cast<std::size_t>(cfg_.resolution);
    const Var fxy = tape.bilinear_gather(bound[kPlaneXY], N, N, coords[0]);
    const Var fyz = tape.bilinear_gather(bound[kPlaneYZ], N, N, coords[1]);
    const Var fxz = tape.bilinear_gather(bound[kPlaneXZ], N, N, coords[2]);
    return tape.mul(tape.mul(fxy, fyz), fxz);
  }

  /// (sigma_raw, q-hat) = f_sigma(q); sigma = softplus(sigma_raw); c = sigmoid(f_rgb(q-hat, gamma(d))).
  FieldOutput decode(Tape<T>& tape, std::span<const Var> bound, Var q, std::span<const T> directions) const {
    const std::size_t n = tape.shape(q).rows;
    const Var h = detail::hidden_activation(tape, detail::linear(tape, q, bound[kSigmaW1], bound[kSigmaB1]), cfg_.activation);
    const Var out = detail::linear(tape, h, bound[kSigmaW2], bound[kSigmaB2]);
    const Var sigma = tape.softplus(tape.slice_cols(out, 0, 1));
    const auto G = static_cast<std::size_t>(cfg_.geo_features);
    const AnnealSchedule dir_sched{cfg_.dir_bands, 0.0};
    const Var dir_enc = tape.constant({n, encoding_width(3, cfg_.dir_bands, false)},
                                      positional_encoding<T>(directions, 3, dir_sched, 0.0, false));
    const Var rgb_in = tape.concat_cols(tape.slice_cols(out, 1, G), dir_enc);
    const Var h2 = detail::hidden_activation(tape, detail::linear(tape, rgb_in, bound[kRgbW1], bound[kRgbB1]), cfg_.activation);
    const Var rgb = tape.sigmoid(detail::linear(tape, h2, bound[kRgbW2], bound[kRgbB2]));
    return {sigma, rgb};
  }

  FieldOutput eval(Tape<T>& tape, std::span<const Var> bound, const PointBatch<T>& batch, double /*step*/) const {
    const Var q = features(tape, bound, batch.positions);
    return decode(tape, bound, q, batch.directions);
  }

 private:
  KPlanesConfig cfg_;
  std::vector<Parameter<T>> params_;
  mutable std::atomic<std::uint64_t> clamped_{0};
};

// -- annealed MLP -------------------------------------------------------------

struct MlpConfig {
  int pos_bands = 6;
  int dir_bands = 2;
  int hidden = 64;
  int geo_features = 32;
  double anneal_steps = 0.0;  // N: step at which every position band is on
  double box_min = -1.0;
  double box_max = 1.0;

  friend bool operator==(const MlpConfig&, const MlpConfig&) = default;
};

inline void to_json(nlohmann::json& j, const MlpConfig& c) {
  j = {{"pos_bands", c.pos_bands}, {"dir_bands", c.dir_bands}, {"hidden", c.hidden},
       {"geo_features", c.geo_features}, {"anneal_steps", c.anneal_steps},
       {"box_min", c.box_min}, {"box_max", c.box_max}};
}
inline void from_json(const nlohmann::json& j, MlpConfig& c) {
  c.pos_bands = j.value("pos_bands", c.pos_bands);
  c.dir_bands = j.value("dir_bands", c.dir_bands);
  c.hidden = j.value("hidden", c.hidden);
  c.geo_features = j.value("geo_features", c.geo_features);
  c.anneal_steps = j.value("anneal_steps", c.anneal_steps);
  c.box_min = j.value("box_min", c.box_min);
  c.box_max = j.value("box_max", c.box_max);
}

template <class T>
class MlpField {
 public:
  enum Index : std::size_t { kW0, kB0, kW1, kB1, kW2, kB2, kRgbW1, kRgbB1, kRgbW2, kRgbB2, kCount };

  explicit MlpField(MlpConfig cfg = {}) : cfg_(cfg) {
    if (cfg.pos_bands < 1 || cfg.dir_bands < 1 || cfg.hidden < 1)
      throw std::invalid_argument("MlpField: invalid configuration");
    const std::size_t in = encoding_width(3, cfg.pos_bands, true);
    const std::size_t H = static_cast<std::size_t>(cfg.hidden);
    const std::size_t G = static_cast<std::size_t>(cfg.geo_features);
    const std::size_t D = encoding_width(3, cfg.dir_bands, false);
    params_.emplace_back("w0", Shape{in, H}, kDecoderGroup);
    params_.emplace_back("b0", Shape{1, H}, kDecoderGroup);
    params_.emplace_back("w1", Shape{H, H}, kDecoderGroup);
    params_.emplace_back("b1", Shape{1, H}, kDecoderGroup);
    params_.emplace_back("w2", Shape{H, 1 + G}, kDecoderGroup);
    params_.emplace_back("b2", Shape{1, 1 + G}, kDecoderGroup);
    params_.emplace_back("rgb_w1", Shape{G + D, H / 2 + 1}, kDecoderGroup);
    params_.emplace_back("rgb_b1", Shape{1, H / 2 + 1}, kDecoderGroup);
    params_.emplace_back("rgb_w2", Shape{H / 2 + 1, 3}, kDecoderGroup);
    params_.emplace_back("rgb_b2", Shape{1, 3}, kDecoderGroup);
  }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < kCount; k += 2) detail::init_linear(params_[k], params_[k + 1], rng);
  }

  [[nodiscard]] const MlpConfig& config() const noexcept { return cfg_; }
  MlpConfig& config() noexcept { return cfg_; }
  std::vector<Parameter<T>>& params() noexcept { return params_; }
  [[nodiscard]] const std::vector<Parameter<T>>& params() const noexcept { return params_; }
  [[nodiscard]] AnnealSchedule schedule() const { return {cfg_.pos_bands, cfg_.anneal_steps}; }

  FieldOutput eval(Tape<T>& tape, std::span<const Var> bound, const PointBatch<T>& batch, double step) const {
    const std::size_t n = batch.size();
    std::vector<T> unit(batch.positions.size());
    const double span = cfg_.box_max - cfg_.box_min;
    for (std::size_t i = 0; i < unit.size(); ++i) {
      const double x = std::clamp(static_cast<double>(batch.positions[i]), cfg_.box_min, cfg_.box_max);
      unit[i] = static_cast<T>(2.0 * (x - cfg_.box_min) / span - 1.0);
    }
    const Var enc = tape.constant({n, encoding_width(3, cfg_.pos_bands, true)},
                                  positional_encoding<T>(unit, 3, schedule(), step, true));
    const Var h0 = tape.relu(detail::linear(tape, enc, bound[kW0], bound[kB0]));
    const Var h1 = tape.relu(detail::linear(tape, h0, bound[kW1], bound[kB1]));
    const Var out = detail::linear(tape, h1, bound[kW2], bound[kB2]);
    const Var sigma = tape.softplus(tape.slice_cols(out, 0, 1));
    const AnnealSchedule dir_sched{cfg_.dir_bands, 0.0};
    const Var dir_enc = tape.constant({n, encoding_width(3, cfg_.dir_bands, false)},
                                      positional_encoding<T>(batch.directions, 3, dir_sched, 0.0, false));
    const Var rgb_in =
        tape.concat_cols(tape.slice_cols(out, 1, static_cast<std::size_t>(cfg_.geo_features)), dir_enc);
    const Var h2 = tape.relu(detail::linear(tape, rgb_in, bound[kRgbW1], bound[kRgbB1]));
    const Var rgb = tape.sigmoid(detail::linear(tape, h2, bound[kRgbW2], bound[kRgbB2]));
    return {sigma, rgb};
  }

 private:
  MlpConfig cfg_;
  std::vector<Parameter<T>> params_;
};

// -- dispatch -----------------------------------------------------------------

enum class Variant { kKPlanes, kMlp };

inline std::string variant_name(Variant v) { return v == Variant::kKPlanes ? "kplanes" : "mlp"; }
inline Variant parse_variant(const std::string& s) {
  if (s == "kplanes") return Variant::kKPlanes;
  if (s == "mlp") return Variant::kMlp;
  throw std::invalid_argument("unknown field variant '" + s + "' (expected kplanes or mlp)");
}

/// Either field variant behind one interface.
template <class T>
class RadianceField {
 public:
  RadianceField() : impl_(KPlanesField<T>{}) {}
  explicit RadianceField(KPlanesField<T> f) : impl_(std::move(f)) {}
  explicit RadianceField(MlpField<T> f) : impl_(std::move(f)) {}

  static RadianceField make(Variant v, const nlohmann::json& cfg, std::uint64_t seed) {
    RadianceField f = v == Variant::kKPlanes ? RadianceField(KPlanesField<T>(cfg.get<KPlanesConfig>()))
                                             : RadianceField(MlpField<T>(cfg.get<MlpConfig>()));
    f.initialize(seed);
    return f;
  }

  [[nodiscard]] Variant variant() const {
    return std::holds_alternative<KPlanesField<T>>(impl_) ? Variant::kKPlanes : Variant::kMlp;
  }

  void initialize(std::uint64_t seed) {
    std::visit([&](auto& f) { f.initialize(seed); }, impl_);
  }

  std::vector<Parameter<T>>& params() {
    return std::visit([](auto& f) -> std::vector<Parameter<T>>& { return f.params(); }, impl_);
  }
  [[nodiscard]] const std::vector<Parameter<T>>& params() const {
    return std::visit([](const auto& f) -> const std::vector<Parameter<T>>& { return f.params(); }, impl_);
  }

  std::vector<Parameter<T>*> param_ptrs() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params()) out.push_back(&p);
    return out;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params()) n += p.size();
    return n;
  }

  std::vector<Var> bind(Tape<T>& tape) const {
    std::vector<Var> out;
    const auto& ps = params();
    out.reserve(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) out.push_back(tape.parameter(ps[i], i));
    return out;
  }

  FieldOutput eval(Tape<T>& tape, std::span<const Var> bound, const PointBatch<T>& batch, double step) const {
    return std::visit([&](const auto& f) { return f.eval(tape, bound, batch, step); }, impl_);
  }

  [[nodiscard]] nlohmann::json config_json() const {
    return std::visit([](const auto& f) { return nlohmann::json(f.config()); }, impl_);
  }

  /// Sets the annealing horizon of the MLP variant; no-op for K-Planes.
  void set_anneal_steps(double steps) {
    if (auto* m = std::get_if<MlpField<T>>(&impl_)) m->config().anneal_steps = steps;
  }

  KPlanesField<T>* kplanes() { return std::get_if<KPlanesField<T>>(&impl_); }
  MlpField<T>* mlp() { return std::get_if<MlpField<T>>(&impl_); }

  /// FNV-1a over the raw parameter bytes.
  [[nodiscard]] std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.values().data());
      for (std::size_t i = 0; i < p.size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

 private:
  std::variant<KPlanesField<T>, MlpField<T>> impl_;
};

// -- checkpoints ----------------------------------------------------------------
//
// Layout: 8-byte magic "SENERFCK", uint64 LE header length, JSON header, then
// each parameter buffer as little-endian float32 in header order.

inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'N', 'E', 'R', 'F', 'C', 'K'};

namespace detail {
inline void put_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t get_u64_le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline void put_f32_le(std::ostream& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}
inline float get_f32_le(const unsigned char* b) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}
}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const RadianceField<T>& field, std::int64_t step,
                     const nlohmann::json& hyper = nlohmann::json::object()) {
  nlohmann::json header;
  header["variant"] = variant_name(field.variant());
  header["config"] = field.config_json();
  header["step"] = step;
  header["hyperparameters"] = hyper;
  auto& list = header["parameters"] = nlohmann::json::array();
  for (const auto& p : field.params())
    list.push_back({{"name", p.name()}, {"shape", {p.shape().rows, p.shape().cols}}});
  const std::string text = header.dump();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + tmp);
    out.write(kCheckpointMagic, 8);
    detail::put_u64_le(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : field.params())
      for (T v : p.values()) detail::put_f32_le(out, static_cast<float>(v));
    if (!out) throw IoError("save_checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
struct LoadedCheckpoint {
  RadianceField<T> field;
  std::int64_t step = 0;
  nlohmann::json header;
};

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("load_checkpoint: bad magic in " + path.string());
  const std::uint64_t len = detail::get_u64_le(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("load_checkpoint: truncated header in " + path.string());
  nlohmann::json header;
  std::optional<RadianceField<T>> loaded;
  std::int64_t step = 0;
  try {
    header = nlohmann::json::parse(text);
    const Variant v = parse_variant(header.at("variant").get<std::string>());
    if (v == Variant::kKPlanes)
      loaded.emplace(KPlanesField<T>(header.at("config").get<KPlanesConfig>()));
    else
      loaded.emplace(MlpField<T>(header.at("config").get<MlpConfig>()));
    step = header.value("step", std::int64_t{0});
    const nlohmann::json& list = header.at("parameters");
    auto& params = loaded->params();
    if (list.size() != params.size()) throw IoError("parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const nlohmann::json& shape = list[i].at("shape");
      if (list[i].at("name").get<std::string>() != params[i].name() ||
          shape.at(0).get<std::size_t>() != params[i].shape().rows ||
          shape.at(1).get<std::size_t>() != params[i].shape().cols)
        throw IoError("parameter '" + params[i].name() + "' does not match header entry " + std::to_string(i));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_checkpoint: malformed header in " + path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError("load_checkpoint: " + path.string() + ": " + e.what());
  }
  LoadedCheckpoint<T> ck{std::move(*loaded), step, std::move(header)};
  std::vector<unsigned char> buf;
  for (auto& p : ck.field.params()) {
    buf.resize(p.size() * 4);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw IoError("load_checkpoint: truncated parameter '" + p.name() + "' in " + path.string());
    for (std::size_t i = 0; i < p.size(); ++i) p.values()[i] = static_cast<T>(detail::get_f32_le(&buf[4 * i]));
  }
  return ck;
}

}  // namespace senerf::field
