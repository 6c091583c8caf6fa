#pragma once

// Teacher/student self-training loop: train a teacher on the known views,
// render pseudo labels around them, score their reliability, distill into a
// freshly initialized student and promote it to the next teacher.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "senerf/distill.hpp"
#include "senerf/fields.hpp"
#include "senerf/metrics.hpp"
#include "senerf/optim.hpp"
#include "senerf/reliability.hpp"
#include "senerf/renderer.hpp"
#include "senerf/scene.hpp"

namespace senerf::selftrain {

using Field = field::RadianceField<float>;

enum class LabelMode { kFeature, kGtMasked, kAll };

inline std::string label_mode_name(LabelMode m) {
  switch (m) {
    case LabelMode::kFeature: return "feature";
    case LabelMode::kGtMasked: return "gt";
    case LabelMode::kAll: return "all";
  }
  return "?";
}

inline LabelMode parse_label_mode(const std::string& s) {
  if (s == "feature") return LabelMode::kFeature;
  if (s == "gt") return LabelMode::kGtMasked;
  if (s == "all") return LabelMode::kAll;
  throw std::invalid_argument("unknown label mode '" + s + "'");
}

struct SelfTrainConfig {
  field::Variant variant = field::Variant::kKPlanes;
  nlohmann::json field_config = nlohmann::json::object();
  int iterations = 2;
  int steps = 600;          // per student
  int teacher_steps = 600;  // first teacher
  optim::AdamConfig optimizer;
  int batch_rays = 256;        // known rays per step
  double pseudo_ratio = 1.0;   // pseudo rays per known ray
  int bins = 48;
  int chunk_rays = 128;        // fixed gradient-reduction chunk
  distill::DistillWeights weights;
  reliability::ThresholdPolicy threshold;
  LabelMode label_mode = LabelMode::kFeature;
  double gt_tolerance = 0.1;
  distill::GeometrySource geometry_source = distill::GeometrySource::kWeights;
  int kernel = 3;
  double view_range_deg = 10.0;
  double view_range_increment_deg = 10.0;
  int pseudo_views = 8;
  std::uint64_t seed = 0;
  int threads = 1;
  int eval_views = 8;  // held-out views scored per report; 0 = all
  Vec3 background = Vec3::Ones();

  [[nodiscard]] double alpha_at(int iteration) const { return threshold.alpha_at(iteration); }
  [[nodiscard]] double range_at(int iteration) const {
    return view_range_deg + view_range_increment_deg * (iteration - 1);
  }

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("config: iterations must be >= 1");
    if (steps < 0 || teacher_steps < 0) throw std::invalid_argument("config: steps must be >= 0");
    if (batch_rays < 1 || bins < 1 || chunk_rays < 1) throw std::invalid_argument("config: batch, bins, chunk must be >= 1");
    if (pseudo_ratio < 0) throw std::invalid_argument("config: pseudo_ratio must be >= 0");
    if (pseudo_views < 0) throw std::invalid_argument("config: pseudo_views must be >= 0");
    if (kernel < 3 || kernel % 2 == 0) throw std::invalid_argument("config: kernel must be odd and >= 3");
    threshold.validate();
    weights.validate();
    if (threshold.kind == reliability::ThresholdKind::kAdaptive &&
        threshold.alpha + threshold.alpha_increment * (iterations - 1) > 1.0 + 1e-12)
      throw std::invalid_argument("config: alpha schedule exceeds 1 within the iteration budget");
  }
};

inline SelfTrainConfig config_from_json(const nlohmann::json& j, SelfTrainConfig c = {}) {
  try {
    if (j.contains("variant")) c.variant = field::parse_variant(j["variant"].get<std::string>());
    if (j.contains("field")) c.field_config = j["field"];
    c.iterations = j.value("iterations", c.iterations);
    c.steps = j.value("steps", c.steps);
    c.teacher_steps = j.value("teacher_steps", c.teacher_steps);
    c.optimizer.lr_grid = j.value("lr_grid", c.optimizer.lr_grid);
    c.optimizer.lr_decoder = j.value("lr_decoder", c.optimizer.lr_decoder);
    c.optimizer.final_fraction = j.value("lr_final_fraction", c.optimizer.final_fraction);
    c.batch_rays = j.value("batch_rays", c.batch_rays);
    c.pseudo_ratio = j.value("pseudo_ratio", c.pseudo_ratio);
    c.bins = j.value("bins", c.bins);
    c.chunk_rays = j.value("chunk_rays", c.chunk_rays);
    if (j.contains("weights")) {
      const auto& w = j["weights"];
      c.weights.color = w.value("color", c.weights.color);
      c.weights.geometry = w.value("geometry", c.weights.geometry);
      c.weights.prior = w.value("prior", c.weights.prior);
    }
    if (j.contains("threshold")) {
      const auto& t = j["threshold"];
      if (t.contains("kind")) c.threshold.kind = reliability::parse_kind(t["kind"].get<std::string>());
      c.threshold.tau0 = t.value("tau0", c.threshold.tau0);
      c.threshold.alpha = t.value("alpha", c.threshold.alpha);
      c.threshold.alpha_increment = t.value("alpha_increment", c.threshold.alpha_increment);
      c.threshold.beta = t.value("beta", c.threshold.beta);
    }
    if (j.contains("label_mode")) c.label_mode = parse_label_mode(j["label_mode"].get<std::string>());
    c.gt_tolerance = j.value("gt_tolerance", c.gt_tolerance);
    if (j.contains("geometry_source")) {
      const auto s = j["geometry_source"].get<std::string>();
      if (s != "weights" && s != "sigma") throw std::invalid_argument("unknown geometry_source '" + s + "'");
      c.geometry_source = s == "sigma" ? distill::GeometrySource::kSigma : distill::GeometrySource::kWeights;
    }
    c.kernel = j.value("kernel", c.kernel);
    c.view_range_deg = j.value("view_range_deg", c.view_range_deg);
    c.view_range_increment_deg = j.value("view_range_increment_deg", c.view_range_increment_deg);
    c.pseudo_views = j.value("pseudo_views", c.pseudo_views);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    c.eval_views = j.value("eval_views", c.eval_views);
    if (j.contains("background")) c.background = scene::json_vec(j["background"]);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const SelfTrainConfig& c) {
  return {{"variant", field::variant_name(c.variant)},
          {"field", c.field_config},
          {"iterations", c.iterations},
          {"steps", c.steps},
          {"teacher_steps", c.teacher_steps},
          {"lr_grid", c.optimizer.lr_grid},
          {"lr_decoder", c.optimizer.lr_decoder},
          {"lr_final_fraction", c.optimizer.final_fraction},
          {"batch_rays", c.batch_rays},
          {"pseudo_ratio", c.pseudo_ratio},
          {"bins", c.bins},
          {"chunk_rays", c.chunk_rays},
          {"weights", {{"color", c.weights.color}, {"geometry", c.weights.geometry}, {"prior", c.weights.prior}}},
          {"threshold",
           {{"kind", reliability::kind_name(c.threshold.kind)},
            {"tau0", c.threshold.tau0},
            {"alpha", c.threshold.alpha},
            {"alpha_increment", c.threshold.alpha_increment},
            {"beta", c.threshold.beta}}},
          {"label_mode", label_mode_name(c.label_mode)},
          {"gt_tolerance", c.gt_tolerance},
          {"geometry_source", c.geometry_source == distill::GeometrySource::kSigma ? "sigma" : "weights"},
          {"kernel", c.kernel},
          {"view_range_deg", c.view_range_deg},
          {"view_range_increment_deg", c.view_range_increment_deg},
          {"pseudo_views", c.pseudo_views},
          {"seed", c.seed},
          {"threads", c.threads},
          {"eval_views", c.eval_views},
          {"background", scene::vec_json(c.background)}};
}

/// Stored with checkpoints; the thread count does not affect results and is left out.
inline nlohmann::json checkpoint_header(const SelfTrainConfig& c) {
  auto j = config_to_json(c);
  j.erase("threads");
  return j;
}

inline Field make_field(const SelfTrainConfig& c, std::uint64_t seed) {
  return Field::make(c.variant, c.field_config.empty() ? nlohmann::json::object() : c.field_config, seed);
}

// -- training ---------------------------------------------------------------------------

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::int64_t step, std::int64_t last_good)
      : std::runtime_error(what), step(step), last_good_step(last_good) {}
  std::int64_t step;
  std::int64_t last_good_step;
};

struct LossCurve {
  std::vector<std::int64_t> step;
  std::vector<distill::LossValues> values;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j = {{"step", step}};
    std::vector<double> p, c, g, pr, t;
    for (const auto& v : values) {
      p.push_back(v.photometric);
      c.push_back(v.color);
      g.push_back(v.geometry);
      pr.push_back(v.prior);
      t.push_back(v.total);
    }
    j["photometric"] = p;
    j["color"] = c;
    j["geometry"] = g;
    j["prior"] = pr;
    j["total"] = t;
    return j;
  }
};

struct TrainOutcome {
  LossCurve curve;
  std::int64_t steps = 0;
};

namespace detail {

/// Pseudo pixels that carry any distillation signal under the labels.
inline std::vector<std::pair<std::size_t, std::size_t>> pseudo_candidates(const std::vector<distill::LabelView>& labels) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t v = 0; v < labels.size(); ++v) {
    const auto& l = labels[v];
    const bool unified = !l.direct_weight.empty();
    for (std::size_t p = 0; p < l.pixels(); ++p) {
      const bool useful = unified ? (l.direct_weight[p] > 0.0f || l.neighbor_valid[p])
                                  : (l.reliable(p) || (!l.prior_valid.empty() && l.prior_valid[p]));
      if (useful) out.emplace_back(v, p);
    }
  }
  return out;
}

inline std::uint64_t stage_key(std::uint64_t seed, std::uint64_t stage) { return mix_key(seed, 0x5157A6E0ULL + stage); }

}  // namespace detail

/// Optimizes `f` for `steps` steps on known-view photometric rays and, when
/// labels are given, the distillation objective on pseudo rays. The gradient
/// of each batch is reduced over fixed ray chunks in chunk order, so results
/// do not depend on the thread count.
inline TrainOutcome train_field(Field& f, const std::vector<const scene::Frame*>& known,
                                const std::vector<distill::LabelView>* labels, const SelfTrainConfig& c,
                                std::uint64_t seed, int steps, int log_every = 10) {
  if (known.empty()) throw std::invalid_argument("train: no known views");
  for (const auto* fr : known)
    if (fr->image.channels != 3 || fr->image.width != fr->camera.width || fr->image.height != fr->camera.height)
      throw std::invalid_argument("train: known view '" + fr->file_path + "' image does not match its camera");
  f.set_anneal_steps(std::max(1.0, steps / 4.0));
  auto params = f.param_ptrs();
  optim::Adam<float> adam(params, c.optimizer, steps);
  const auto candidates = labels ? detail::pseudo_candidates(*labels) : decltype(detail::pseudo_candidates({})){};
  const std::size_t n_pseudo =
      candidates.empty() ? 0 : static_cast<std::size_t>(std::llround(c.batch_rays * c.pseudo_ratio));
  distill::ObjectiveOptions obj;
  obj.weights = c.weights;
  obj.mode = c.threshold.kind == reliability::ThresholdKind::kUnified ? distill::Mode::kUnified : distill::Mode::kBinary;
  obj.source = c.geometry_source;
  obj.background = c.background;

  std::size_t known_pixels = 0;
  for (const auto* fr : known) known_pixels += fr->image.pixel_count();

  const std::size_t n_chunks = std::max<std::size_t>(1, (static_cast<std::size_t>(c.batch_rays) + c.chunk_rays - 1) /
                                                            static_cast<std::size_t>(c.chunk_rays));
  std::vector<float> last_good;
  auto snapshot = [&] {
    last_good.clear();
    for (auto* p : params) last_good.insert(last_good.end(), p->values().begin(), p->values().end());
  };
  auto restore = [&] {
    std::size_t off = 0;
    for (auto* p : params) {
      std::copy_n(last_good.begin() + static_cast<std::ptrdiff_t>(off), p->size(), p->values().begin());
      off += p->size();
    }
  };
  snapshot();
  std::int64_t last_good_step = 0;

  TrainOutcome out;
  for (int step = 0; step < steps; ++step) {
    SplitMix64 rng(mix_key(seed, static_cast<std::uint64_t>(step)));
    std::vector<distill::KnownBatch<float>> kb(n_chunks);
    std::vector<distill::PseudoBatch<float>> pb(n_chunks);
    for (int r = 0; r < c.batch_rays; ++r) {
      std::size_t idx = static_cast<std::size_t>(rng.uniform() * static_cast<double>(known_pixels));
      idx = std::min(idx, known_pixels - 1);
      std::size_t v = 0;
      while (idx >= known[v]->image.pixel_count()) idx -= known[v++]->image.pixel_count();
      const auto& fr = *known[v];
      auto& b = kb[static_cast<std::size_t>(r) % n_chunks];
      const int x = static_cast<int>(idx % static_cast<std::size_t>(fr.camera.width));
      const int y = static_cast<int>(idx / static_cast<std::size_t>(fr.camera.width));
      b.rays.add(render::pixel_ray(fr.camera, x, y), render::layout_for(fr.camera, c.bins), rng(), true);
      for (int ch = 0; ch < 3; ++ch) b.target.push_back(fr.image.at(x, y, ch));
    }
    for (std::size_t r = 0; r < n_pseudo; ++r) {
      std::size_t k = static_cast<std::size_t>(rng.uniform() * static_cast<double>(candidates.size()));
      k = std::min(k, candidates.size() - 1);
      const auto [v, p] = candidates[k];
      pb[r % n_chunks].add((*labels)[v], p, rng(), true);
    }
    std::vector<ad::GradientBuffer<float>> grads(n_chunks, ad::GradientBuffer<float>(params));
    std::vector<distill::LossValues> vals(n_chunks);
    parallel_for(n_chunks, c.threads, [&](std::size_t ch) {
      if (kb[ch].rays.size() == 0 && pb[ch].size() == 0) return;
      ad::Tape<float> tape;
      const auto bound = f.bind(tape);
      obj.step = static_cast<double>(step);
      auto o = obj;
      o.step = static_cast<double>(step);
      const auto terms = distill::total_student_loss<float>(tape, bound, f, kb[ch], pb[ch].size() ? &pb[ch] : nullptr, o);
      vals[ch] = distill::values_of(tape, terms);
      tape.backward(terms.total, grads[ch]);
    });
    distill::LossValues total;
    for (std::size_t ch = 0; ch < n_chunks; ++ch) {
      total.photometric += vals[ch].photometric;
      total.color += vals[ch].color;
      total.geometry += vals[ch].geometry;
      total.prior += vals[ch].prior;
      total.total += vals[ch].total;
    }
    bool finite = std::isfinite(total.total);
    for (auto* p : params) p->zero_grad();
    for (auto& g : grads) g.add_into(params);
    for (auto* p : params)
      for (float g : p->grad()) finite = finite && std::isfinite(g);
    if (!finite) {
      restore();
      throw DivergenceError("training diverged at step " + std::to_string(step) + " (non-finite loss or gradient)",
                            step, last_good_step);
    }
    adam.step();
    if (step % 50 == 49) {
      snapshot();
      last_good_step = step + 1;
    }
    if (log_every > 0 && (step % log_every == 0 || step == steps - 1)) {
      out.curve.step.push_back(step);
      out.curve.values.push_back(total);
    }
  }
  out.steps = steps;
  return out;
}

// -- pseudo views -----------------------------------------------------------------------

/// `count` poses drawn uniformly within +-range degrees in (phi, theta) of the
/// known views (cycled in order), at each known view's radius. Draws that
/// coincide with a known pose are redrawn unless the range is zero.
inline std::vector<Camera> select_pseudo_views(const std::vector<Camera>& known, int count, double range_deg,
                                               std::uint64_t seed) {
  std::vector<Camera> out;
  if (known.empty() || count <= 0) return out;
  SplitMix64 rng(seed);
  std::vector<scene::PoseSpec> known_poses;
  for (const auto& k : known) known_poses.push_back(scene::pose_of(k));
  for (int i = 0; i < count; ++i) {
    const auto& base = known[static_cast<std::size_t>(i) % known.size()];
    const auto bp = known_poses[static_cast<std::size_t>(i) % known.size()];
    scene::PoseSpec p = bp;
    for (int attempt = 0; attempt < 16; ++attempt) {
      p.phi_deg = bp.phi_deg + (2.0 * rng.uniform() - 1.0) * range_deg;
      p.theta_deg = std::clamp(bp.theta_deg + (2.0 * rng.uniform() - 1.0) * range_deg, -89.0, 89.0);
      if (range_deg <= 0.0) break;
      bool dup = false;
      for (const auto& kp : known_poses)
        dup = dup || (std::abs(kp.phi_deg - p.phi_deg) < 1e-6 && std::abs(kp.theta_deg - p.theta_deg) < 1e-6);
      if (!dup) break;
    }
    if (range_deg <= 0.0) {
      out.push_back(base);
      continue;
    }
    Camera cam = spherical_pose(p.phi_deg, p.theta_deg, p.radius, base.width, base.height, rad2deg(base.angle_x()),
                                base.near, base.far);
    out.push_back(cam);
  }
  return out;
}

// -- pseudo labels -----------------------------------------------------------------------

struct PseudoLabelSet {
  std::vector<distill::LabelView> views;
  std::optional<double> tau;
  double alpha = 0;
  std::uint64_t teacher_hash = 0;
  std::vector<reliability::SimilarityMap> similarity;

  [[nodiscard]] double reliable_fraction() const {
    double n = 0, d = 0;
    for (const auto& v : views)
      for (float m : v.mask.data) {
        n += m;
        d += 1;
      }
    return d > 0 ? n / d : 0.0;
  }
};

struct LabelOptions {
  LabelMode mode = LabelMode::kFeature;
  reliability::ThresholdPolicy policy;
  double alpha = 0.15;
  int bins = 48;
  int kernel = 3;
  distill::GeometrySource source = distill::GeometrySource::kWeights;
  double gt_tolerance = 0.1;
  const scene::SceneSpec* oracle = nullptr;  // required for the GT-masked mode
  std::uint64_t seed = 0;
  int threads = 1;
  Vec3 background = Vec3::Ones();
};

/// Renders every pseudo camera with retained per-bin outputs, scores the
/// renders against the known views and thresholds the pooled similarities.
inline PseudoLabelSet generate_pseudo_labels(const Field& teacher, const std::vector<Camera>& cams,
                                             const std::vector<const scene::Frame*>& known, const LabelOptions& o) {
  PseudoLabelSet set;
  set.alpha = o.alpha;
  set.teacher_hash = teacher.hash();
  const reliability::PyramidExtractor extractor;
  std::vector<reliability::KnownView> kv;
  for (const auto* fr : known) kv.push_back({extractor.extract(fr->image), fr->camera});
  std::vector<render::RenderedView> renders;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    render::RenderOptions ro;
    ro.bins = o.bins;
    ro.jitter = true;
    ro.retain_weights = true;
    ro.retain_sigma = o.source == distill::GeometrySource::kSigma;
    ro.seed = o.seed;
    ro.view_id = i;
    ro.threads = o.threads;
    ro.background = o.background;
    renders.push_back(render::render_view(teacher, cams[i], ro));
    set.similarity.push_back(reliability::similarity_map(
        {extractor.extract(renders.back().color), renders.back().depth, renders.back().opacity, cams[i]}, kv,
        o.threads));
  }
  if (o.mode == LabelMode::kFeature && !cams.empty())
    set.tau = reliability::compute_threshold(reliability::pooled_similarities(set.similarity), o.policy, o.alpha);
  const distill::GaussianKernel kernel(o.kernel);
  for (std::size_t i = 0; i < cams.size(); ++i) {
    auto& r = renders[i];
    distill::LabelView v;
    char name[32];
    std::snprintf(name, sizeof(name), "pseudo_%03zu", i);
    v.name = name;
    v.camera = cams[i];
    v.layout = render::layout_for(cams[i], o.bins);
    v.color = r.color;
    v.depth = r.depth;
    v.similarity = set.similarity[i].similarity;
    v.teacher_hash = set.teacher_hash;
    v.bins = o.source == distill::GeometrySource::kSigma ? r.sigma : r.weights;
    switch (o.mode) {
      case LabelMode::kFeature:
        v.mask = set.tau ? reliability::build_mask(set.similarity[i], *set.tau).mask
                         : Image(cams[i].width, cams[i].height, 1, 0.0f);
        break;
      case LabelMode::kGtMasked: {
        if (!o.oracle) throw std::invalid_argument("generate_pseudo_labels: GT-masked mode needs the scene oracle");
        v.mask = reliability::gt_mask(r.color, scene::oracle_render(*o.oracle, cams[i]).image, o.gt_tolerance);
        break;
      }
      case LabelMode::kAll: v.mask = Image(cams[i].width, cams[i].height, 1, 1.0f); break;
    }
    if (o.policy.kind == reliability::ThresholdKind::kUnified && o.mode == LabelMode::kFeature)
      distill::prepare_unified(v, kernel, o.policy.beta);
    else
      distill::prepare_prior(v, kernel);
    set.views.push_back(std::move(v));
  }
  return set;
}

// -- label store ---------------------------------------------------------------------------

namespace detail {
inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4] = {0, 0, 0, 0};
  in.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline nlohmann::json camera_json(const Camera& c) {
  nlohmann::json rot = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) rot.push_back({c.rotation(r, 0), c.rotation(r, 1), c.rotation(r, 2)});
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"rotation", rot}, {"center", scene::vec_json(c.center)},
          {"width", c.width}, {"height", c.height}, {"near", c.near}, {"far", c.far}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  c.fx = j.at("fx");
  c.fy = j.at("fy");
  c.cx = j.at("cx");
  c.cy = j.at("cy");
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) c.rotation(r, k) = j.at("rotation").at(r).at(k).get<double>();
  c.center = scene::json_vec(j.at("center"));
  c.width = j.at("width");
  c.height = j.at("height");
  c.near = j.at("near");
  c.far = j.at("far");
  return c;
}
}  // namespace detail

/// Per-bin values as little-endian float32 after a header of H, W, n_bins (uint32 LE).
inline void write_bins(const std::filesystem::path& path, int h, int w, int n_bins, std::span<const float> values) {
  if (values.size() != static_cast<std::size_t>(h) * w * n_bins) throw IoError("write_bins: size mismatch for " + path.string());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("write_bins: cannot open " + path.string());
  detail::put_u32(out, static_cast<std::uint32_t>(h));
  detail::put_u32(out, static_cast<std::uint32_t>(w));
  detail::put_u32(out, static_cast<std::uint32_t>(n_bins));
  for (float v : values) field::detail::put_f32_le(out, v);
  if (!out) throw IoError("write_bins: write failed for " + path.string());
}

struct BinsFile {
  int height = 0, width = 0, bins = 0;
  std::vector<float> values;
};

inline BinsFile read_bins(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_bins: cannot open " + path.string());
  BinsFile b;
  b.height = static_cast<int>(detail::get_u32(in));
  b.width = static_cast<int>(detail::get_u32(in));
  b.bins = static_cast<int>(detail::get_u32(in));
  if (!in) throw IoError("read_bins: truncated header in " + path.string());
  const std::size_t n = static_cast<std::size_t>(b.height) * b.width * b.bins;
  std::vector<unsigned char> raw(n * 4);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError("read_bins: truncated data in " + path.string());
  b.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) b.values[i] = field::detail::get_f32_le(&raw[4 * i]);
  return b;
}

inline void write_label_view(const std::filesystem::path& dir, const distill::LabelView& v) {
  std::filesystem::create_directories(dir);
  io::write_png(dir / "color.png", v.color);
  io::write_pfm(dir / "depth.pfm", v.depth);
  io::write_png(dir / "mask.png", v.mask);
  io::write_pfm(dir / "similarity.pfm", v.similarity);
  write_bins(dir / "bins.bin", v.height(), v.width(), v.layout.bins, v.bins);
  nlohmann::json meta = {{"name", v.name},
                         {"camera", detail::camera_json(v.camera)},
                         {"near", v.layout.near},
                         {"far", v.layout.far},
                         {"bins", v.layout.bins},
                         {"teacher_hash", v.teacher_hash}};
  io::write_text_atomic(dir / "label.json", meta.dump(2));
}

/// Reads a stored view; derived targets are rebuilt by the caller.
inline distill::LabelView read_label_view(const std::filesystem::path& dir) {
  distill::LabelView v;
  const auto meta = io::read_json(dir / "label.json");
  try {
    v.name = meta.at("name");
    v.camera = detail::camera_from_json(meta.at("camera"));
    v.layout = {meta.at("near").get<double>(), meta.at("far").get<double>(), meta.at("bins").get<int>()};
    v.teacher_hash = meta.at("teacher_hash").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("read_label_view: malformed " + (dir / "label.json").string() + ": " + e.what());
  }
  v.color = io::read_png(dir / "color.png");
  v.depth = io::read_pfm(dir / "depth.pfm");
  v.mask = io::read_png(dir / "mask.png");
  v.similarity = io::read_pfm(dir / "similarity.pfm");
  auto b = read_bins(dir / "bins.bin");
  if (b.height != v.height() || b.width != v.width() || b.bins != v.layout.bins)
    throw IoError("read_label_view: bins header disagrees with label.json in " + dir.string());
  v.bins = std::move(b.values);
  return v;
}

// -- evaluation -----------------------------------------------------------------------------

struct ViewScore {
  std::string name;
  double psnr = 0, ssim = 0;
};

struct EvalReport {
  std::vector<ViewScore> views;
  double mean_psnr = 0, mean_ssim = 0;

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json v = nlohmann::json::array();
    for (const auto& s : views) v.push_back({{"name", s.name}, {"psnr", s.psnr}, {"ssim", s.ssim}});
    return {{"views", v}, {"mean_psnr", mean_psnr}, {"mean_ssim", mean_ssim}};
  }
};

inline EvalReport evaluate(const Field& f, const std::vector<const scene::Frame*>& frames, int bins, int threads,
                           const Vec3& background = Vec3::Ones()) {
  EvalReport rep;
  for (const auto* fr : frames) {
    render::RenderOptions ro;
    ro.bins = bins;
    ro.threads = threads;
    ro.background = background;
    const auto view = render::render_view(f, fr->camera, ro);
    rep.views.push_back({std::filesystem::path(fr->file_path).filename().string(), metrics::psnr(view.color, fr->image),
                         metrics::ssim(view.color, fr->image)});
  }
  for (const auto& s : rep.views) {
    rep.mean_psnr += s.psnr / static_cast<double>(rep.views.size());
    rep.mean_ssim += s.ssim / static_cast<double>(rep.views.size());
  }
  return rep;
}

// -- the loop ---------------------------------------------------------------------------------

struct IterationReport {
  int iteration = 0;
  double alpha = 0;
  double view_range_deg = 0;
  std::optional<double> tau;
  double reliable_fraction = 0;
  std::uint64_t teacher_hash = 0;
  EvalReport teacher;
  EvalReport student;
  std::optional<reliability::MaskMetrics> mask;
  LossCurve teacher_curve;  // first iteration only
  LossCurve student_curve;
  double runtime_s = 0;

  /// report.json; runtime_s is the only field that varies between identical runs.
  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j = student.to_json();
    j["iteration"] = iteration;
    j["alpha"] = alpha;
    j["view_range_deg"] = view_range_deg;
    j["tau"] = tau ? nlohmann::json(*tau) : nlohmann::json(nullptr);
    j["reliable_fraction"] = reliable_fraction;
    j["teacher_hash"] = teacher_hash;
    j["teacher"] = teacher.to_json();
    j["mask"] = mask ? nlohmann::json{{"precision", mask->precision}, {"recall", mask->recall}, {"fpr", mask->fpr}}
                     : nlohmann::json(nullptr);
    j["lpips"] = nullptr;
    j["average"] = nullptr;
    j["loss_curves"] = {{"teacher", teacher_curve.to_json()}, {"student", student_curve.to_json()}};
    j["runtime_s"] = runtime_s;
    return j;
  }
};

struct SelfTrainInputs {
  std::vector<const scene::Frame*> known;
  std::vector<const scene::Frame*> held_out;
  const scene::SceneSpec* oracle = nullptr;  // enables GT-masked mode and mask metrics
  std::optional<std::filesystem::path> run_dir;
  const Field* initial_teacher = nullptr;    // skip teacher training when given
};

struct SelfTrainResult {
  Field teacher;  // first teacher
  Field final_student;
  std::vector<IterationReport> reports;
};

inline std::uint64_t student_seed(std::uint64_t seed, int iteration) {
  return detail::stage_key(seed, static_cast<std::uint64_t>(iteration));
}

/// Trains the first teacher with the photometric objective only.
inline Field train_teacher(const std::vector<const scene::Frame*>& known, const SelfTrainConfig& c,
                           LossCurve* curve = nullptr) {
  Field f = make_field(c, detail::stage_key(c.seed, 0));
  auto out = train_field(f, known, nullptr, c, detail::stage_key(c.seed, 100), c.teacher_steps);
  if (curve) *curve = std::move(out.curve);
  return f;
}

/// Trains a fresh student on the known views plus frozen labels.
inline Field train_student(const std::vector<const scene::Frame*>& known, const PseudoLabelSet& labels,
                           const SelfTrainConfig& c, int iteration, LossCurve* curve = nullptr) {
  Field f = make_field(c, student_seed(c.seed, iteration));
  auto out = train_field(f, known, &labels.views, c, detail::stage_key(c.seed, 100 + iteration), c.steps);
  if (curve) *curve = std::move(out.curve);
  return f;
}

inline reliability::MaskMetrics oracle_mask_metrics(const PseudoLabelSet& set, const scene::SceneSpec& oracle,
                                                    double tolerance) {
  reliability::MaskMetrics total;
  for (std::size_t i = 0; i < set.views.size(); ++i) {
    const auto& v = set.views[i];
    const Image truth = reliability::gt_mask(v.color, scene::oracle_render(oracle, v.camera).image, tolerance);
    Image domain(v.width(), v.height(), 1, 0.0f);
    for (std::size_t p = 0; p < v.pixels(); ++p) domain.data[p] = set.similarity.empty() || set.similarity[i].counts[p] > 0 ? 1.0f : 0.0f;
    const auto m = reliability::mask_metrics(v.mask, truth, &domain);
    total.tp += m.tp;
    total.fp += m.fp;
    total.tn += m.tn;
    total.fn += m.fn;
  }
  total.precision = (total.tp + total.fp) ? double(total.tp) / double(total.tp + total.fp) : 1.0;
  total.recall = (total.tp + total.fn) ? double(total.tp) / double(total.tp + total.fn) : 1.0;
  total.fpr = (total.fp + total.tn) ? double(total.fp) / double(total.fp + total.tn) : 0.0;
  return total;
}

inline LabelOptions label_options(const SelfTrainConfig& c, int iteration, const scene::SceneSpec* oracle) {
  LabelOptions o;
  o.mode = c.label_mode;
  o.policy = c.threshold;
  o.alpha = c.alpha_at(iteration);
  o.bins = c.bins;
  o.kernel = c.kernel;
  o.source = c.geometry_source;
  o.gt_tolerance = c.gt_tolerance;
  o.oracle = oracle;
  o.seed = detail::stage_key(c.seed, 200 + static_cast<std::uint64_t>(iteration));
  o.threads = c.threads;
  o.background = c.background;
  return o;
}

/// Runs the iterations; with a run directory, every stage is persisted under
/// iter<k>/ as soon as it completes, so a failure keeps earlier iterations.
inline SelfTrainResult self_train(const SelfTrainInputs& in, const SelfTrainConfig& c,
                                  const std::function<void(const std::string&)>& log = {}) {
  c.validate();
  if (in.known.empty()) throw std::invalid_argument("self_train: dataset has no training views");
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  std::vector<Camera> known_cams;
  for (const auto* f : in.known) known_cams.push_back(f->camera);
  std::vector<const scene::Frame*> eval_frames = in.held_out;
  if (c.eval_views > 0 && eval_frames.size() > static_cast<std::size_t>(c.eval_views)) {
    std::vector<const scene::Frame*> sub;
    const double stride = static_cast<double>(eval_frames.size()) / c.eval_views;
    for (int i = 0; i < c.eval_views; ++i) sub.push_back(eval_frames[static_cast<std::size_t>(i * stride)]);
    eval_frames = std::move(sub);
  }

  LossCurve teacher_curve;
  const auto t0 = std::chrono::steady_clock::now();
  Field teacher = in.initial_teacher ? *in.initial_teacher : make_field(c, detail::stage_key(c.seed, 0));
  if (!in.initial_teacher) {
    say("training teacher");
    try {
      teacher_curve = train_field(teacher, in.known, nullptr, c, detail::stage_key(c.seed, 100), c.teacher_steps).curve;
    } catch (const DivergenceError& e) {
      if (in.run_dir) {
        std::filesystem::create_directories(*in.run_dir / "iter1");
        field::save_checkpoint(*in.run_dir / "iter1" / "teacher.lastgood.ckpt", teacher, e.last_good_step,
                               checkpoint_header(c));
      }
      throw;
    }
  }
  SelfTrainResult result{teacher, teacher, {}};
  EvalReport teacher_eval = evaluate(teacher, eval_frames, c.bins, c.threads, c.background);
  for (int it = 1; it <= c.iterations; ++it) {
    IterationReport rep;
    rep.iteration = it;
    rep.alpha = c.alpha_at(it);
    rep.view_range_deg = c.range_at(it);
    rep.teacher = teacher_eval;
    rep.teacher_hash = teacher.hash();
    if (it == 1) rep.teacher_curve = teacher_curve;
    std::optional<std::filesystem::path> dir;
    if (in.run_dir) {
      dir = *in.run_dir / ("iter" + std::to_string(it));
      std::filesystem::create_directories(*dir);
      field::save_checkpoint(*dir / "teacher.ckpt", teacher, 0, checkpoint_header(c));
    }
    const auto cams = select_pseudo_views(known_cams, c.pseudo_views, rep.view_range_deg,
                                          detail::stage_key(c.seed, 300 + static_cast<std::uint64_t>(it)));
    say("iteration " + std::to_string(it) + ": labeling " + std::to_string(cams.size()) + " pseudo views");
    const auto labels = generate_pseudo_labels(teacher, cams, in.known, label_options(c, it, in.oracle));
    rep.tau = labels.tau;
    rep.reliable_fraction = labels.reliable_fraction();
    if (in.oracle && !labels.views.empty()) rep.mask = oracle_mask_metrics(labels, *in.oracle, c.gt_tolerance);
    if (dir)
      for (const auto& v : labels.views) write_label_view(*dir / "labels" / v.name, v);
    say("iteration " + std::to_string(it) + ": training student");
    Field student = make_field(c, student_seed(c.seed, it));
    try {
      rep.student_curve =
          train_field(student, in.known, &labels.views, c, detail::stage_key(c.seed, 100 + static_cast<std::uint64_t>(it)), c.steps)
              .curve;
    } catch (const DivergenceError& e) {
      if (dir) field::save_checkpoint(*dir / "student.lastgood.ckpt", student, e.last_good_step, checkpoint_header(c));
      throw;
    }
    if (teacher.hash() != labels.teacher_hash)
      throw std::logic_error("self_train: teacher changed while its labels were in use");
    rep.student = evaluate(student, eval_frames, c.bins, c.threads, c.background);
    rep.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (dir) {
      field::save_checkpoint(*dir / "student.ckpt", student, c.steps, checkpoint_header(c));
      io::write_text_atomic(*dir / "report.json", rep.to_json().dump(2));
    }
    say("iteration " + std::to_string(it) + ": teacher " + std::to_string(rep.teacher.mean_psnr) + " dB, student " +
        std::to_string(rep.student.mean_psnr) + " dB");
    result.reports.push_back(std::move(rep));
    teacher = student;
    teacher_eval = result.reports.back().student;
    result.final_student = std::move(student);
  }
  return result;
}

}  // namespace senerf::selftrain

namespace senerf::selftrain {

/// Finite-difference check of the full student objective (photometric +
/// reliable + prior terms) through K-Planes rendering. Half the rays are known
/// rays, half pseudo rays; of the pseudo rays, half are reliable.
template <class T>
ad::GradCheckReport student_grad_check(int rays, int bins, std::uint64_t seed,
                                       const nlohmann::json& field_config = nlohmann::json::object(),
                                       T epsilon = std::is_same_v<T, float> ? T(3e-3) : T(1e-6)) {
  if (rays < 2 || bins < 1) throw std::invalid_argument("grad-check: need at least 2 rays and 1 bin");
  auto f = field::RadianceField<T>::make(field::Variant::kKPlanes, field_config, seed);
  const Camera cam = spherical_pose(30.0, 20.0, 4.0, 16, 16, 40.0, 4.0 - std::sqrt(3.0), 4.0 + std::sqrt(3.0));
  const auto layout = render::layout_for(cam, bins);
  SplitMix64 rng(mix_key(seed, 77));
  distill::KnownBatch<T> known;
  distill::PseudoBatch<T> pseudo;
  const int n_known = rays / 2, n_pseudo = rays - n_known;
  for (int r = 0; r < n_known; ++r) {
    const int x = 4 + 2 * r % 8, y = 5 + r;
    known.rays.add(render::pixel_ray(cam, x, y), layout, rng(), true);
    for (int c = 0; c < 3; ++c) known.target.push_back(static_cast<T>(rng.uniform()));
  }
  for (int r = 0; r < n_pseudo; ++r) {
    const int x = 6 + r, y = 6 + 2 * r % 8;
    pseudo.rays.add(render::pixel_ray(cam, x, y), layout, rng(), true);
    pseudo.layouts.push_back(layout);
    const bool reliable = r < n_pseudo / 2 + n_pseudo % 2;
    for (int c = 0; c < 3; ++c) pseudo.color.push_back(static_cast<T>(rng.uniform()));
    for (int s = 0; s < bins; ++s) pseudo.bins.push_back(static_cast<T>(rng.uniform() / bins));
    pseudo.mask.push_back(reliable ? T(1) : T(0));
    pseudo.prior_valid.push_back(reliable ? T(0) : T(1));
    for (int s = 0; s < bins; ++s) pseudo.prior.push_back(reliable ? T(0) : static_cast<T>(rng.uniform() / bins));
    pseudo.direct_weight.push_back(T(0));
    pseudo.neighbor_valid.push_back(T(0));
    pseudo.neighbor_const.push_back(T(0));
    for (int s = 0; s < bins; ++s) pseudo.neighbor.push_back(T(0));
  }
  distill::ObjectiveOptions o;
  // A prior weight of order one keeps every term visible in the check.
  o.weights.prior = 0.5;
  const ad::TapeFunction<T> fn = [&](ad::Tape<T>& tape, std::span<const ad::Var> bound) {
    return distill::total_student_loss<T>(tape, bound, f, known, &pseudo, o).total;
  };
  auto params = f.param_ptrs();
  return ad::grad_check<T>(fn, params, epsilon);
}

}  // namespace senerf::selftrain
