#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "senerf/renderer.hpp"

using namespace senerf;
using namespace senerf::render;

namespace {

Camera test_camera() {
  Camera c;
  c.fx = c.fy = 100;
  c.cx = c.cy = 50;
  c.width = c.height = 100;
  c.near = 1;
  c.far = 5;
  return c;
}

/// Constant medium (sigma, color) on t in [0, 1] at jitter-free bin midpoints.
CompositeResult constant_medium(int bins, double sigma) {
  const BinLayout layout{0.0, 1.0, bins};
  const auto t = stratified_sample(layout, 0, false);
  std::vector<double> delta(t.size());
  sample_deltas(t, layout.far, delta);
  std::vector<double> s(t.size(), sigma), rgb;
  for (std::size_t i = 0; i < t.size(); ++i) rgb.insert(rgb.end(), {1.0, 0.0, 0.0});
  return composite(s, rgb, t, delta, Vec3::Zero());
}

field::KPlanesConfig small_config() {
  field::KPlanesConfig c;
  c.resolution = 4;
  c.hidden = 8;
  c.geo_features = 4;
  return c;
}

}  // namespace

TEST(Rays, PrincipalPointLooksForward) {
  Camera c = test_camera();
  c.cx = c.cy = 50.5;  // pixel (50, 50) center sits on the principal point
  c.rotation = Eigen::AngleAxisd(0.3, Vec3(1, 2, 3).normalized()).toRotationMatrix();
  const auto rays = generate_rays(c);
  const Vec3 d = rays[50 * 100 + 50].direction;
  EXPECT_NEAR((d - c.forward()).norm(), 0.0, 1e-12);
}

TEST(Rays, DirectionsAreUnitAndOriginIsCenter) {
  Camera c = test_camera();
  c.center = Vec3(1, -2, 3);
  for (const auto& r : generate_rays(c)) {
    EXPECT_NEAR(r.direction.norm(), 1.0, 1e-12);
    EXPECT_EQ(r.origin, c.center);
  }
}

TEST(Rays, PinholeHandEvaluation) {
  const Camera c = test_camera();
  const Vec3 d = generate_rays(c)[50 * 100 + 60].direction;
  const Vec3 expect = Vec3((60.5 - 50) / 100, (50.5 - 50) / 100, 1).normalized();
  EXPECT_NEAR((d - expect).norm(), 0.0, 1e-12);
}

TEST(Sampling, MidpointsWithoutJitter) {
  const BinLayout l{2.0, 6.0, 8};
  const auto t = stratified_sample(l, 99, false);
  for (int i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(t[i], 2.0 + (i + 0.5) * 0.5);
}

TEST(Sampling, JitteredSamplesStayInTheirBins) {
  const BinLayout l{0.5, 3.5, 37};
  for (std::uint64_t key = 0; key < 50; ++key) {
    const auto t = stratified_sample(l, key, true);
    for (int i = 0; i < l.bins; ++i) {
      EXPECT_GE(t[i], l.lower(i));
      EXPECT_LT(t[i], l.lower(i) + l.width());
      if (i) EXPECT_GT(t[i], t[i - 1]);
    }
  }
}

TEST(Sampling, SameKeySameSamples) {
  const BinLayout l{0.5, 3.5, 16};
  EXPECT_EQ(stratified_sample(l, 1234, true), stratified_sample(l, 1234, true));
  EXPECT_NE(stratified_sample(l, 1234, true), stratified_sample(l, 1235, true));
  EXPECT_THROW(stratified_sample(BinLayout{0, 1, 0}, 0), std::invalid_argument);
}

TEST(Composite, EmptySpaceShowsBackground) {
  const std::vector<double> s(16, 0.0), rgb(48, 0.3), t(16, 0.5), d(16, 0.1);
  const auto r = composite(s, rgb, t, d, Vec3(0.2, 0.4, 0.6));
  EXPECT_DOUBLE_EQ(r.rgb[0], 0.2);
  EXPECT_DOUBLE_EQ(r.rgb[1], 0.4);
  EXPECT_DOUBLE_EQ(r.rgb[2], 0.6);
  EXPECT_EQ(r.opacity, 0.0);
}

TEST(Composite, ConstantMediumMatchesClosedForm) {
  const double closed = 1.0 - std::exp(-2.0);
  const auto r = constant_medium(256, 2.0);
  EXPECT_NEAR(r.rgb[0], closed, 1e-3);
  EXPECT_EQ(r.rgb[1], 0.0);
  EXPECT_EQ(r.rgb[2], 0.0);
  EXPECT_NEAR(r.opacity, closed, 1e-3);
  // Expected depth: int_0^1 t 2 e^{-2t} dt / (1 - e^{-2}) = (1 - 3 e^{-2}) / 2 / (1 - e^{-2}).
  const double depth = (1.0 - 3.0 * std::exp(-2.0)) / 2.0 / closed;
  EXPECT_NEAR(r.depth, depth, 2e-3);
}

TEST(Composite, QuadratureErrorHalvesPerBinDoubling) {
  const double closed = 1.0 - std::exp(-2.0);
  double prev = std::abs(constant_medium(64, 2.0).rgb[0] - closed);
  for (int bins : {128, 256}) {
    const double err = std::abs(constant_medium(bins, 2.0).rgb[0] - closed);
    EXPECT_NEAR(prev / err, 2.0, 0.4) << bins;
    prev = err;
  }
}

TEST(Composite, WeightsFormSubProbability) {
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> u(0, 5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(24), rgb(72, 0.5);
    for (auto& v : s) v = u(rng);
    const auto t = stratified_sample(BinLayout{1, 3, 24}, static_cast<std::uint64_t>(trial));
    std::vector<double> d(24);
    sample_deltas(t, 3.0, d);
    const auto r = composite(s, rgb, t, d, Vec3::Ones());
    double sum = 0;
    for (double w : r.weights) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_LE(sum, 1.0 + 1e-12);
    EXPECT_NEAR(sum, r.opacity, 1e-12);
    EXPECT_EQ(r.transmittance[0], 1.0);
  }
}

TEST(Composite, OpaqueOccluderTakesAllWeight) {
  const BinLayout l{0, 1, 32};
  const auto t = stratified_sample(l, 0, false);
  std::vector<double> d(32), s(32, 0.0), rgb(96, 0.0);
  sample_deltas(t, 1.0, d);
  s[11] = 1e5;
  const auto r = composite(s, rgb, t, d, Vec3::Ones());
  EXPECT_NEAR(r.opacity, 1.0, 1e-12);
  EXPECT_NEAR(r.depth, t[11], 1e-12);
}

TEST(Composite, NonFiniteDensityNamesRay) {
  const std::vector<double> s = {0.1, NAN}, rgb(6, 0.5), t = {0.1, 0.2}, d = {0.1, 0.1};
  try {
    composite(s, rgb, t, d, Vec3::Ones(), 42);
    FAIL();
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("ray 42"), std::string::npos);
  }
}

TEST(Composite, TapeMatchesPlainCompositing) {
  const std::size_t R = 3, S = 10;
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> u(0, 3);
  std::vector<double> sig(R * S), rgb(R * S * 3), t, delta;
  for (auto& v : sig) v = u(rng);
  for (auto& v : rgb) v = u(rng) / 3;
  for (std::size_t r = 0; r < R; ++r) {
    const auto tr = stratified_sample(BinLayout{0, 2, static_cast<int>(S)}, r);
    std::vector<double> dr(S);
    sample_deltas(tr, 2.0, dr);
    t.insert(t.end(), tr.begin(), tr.end());
    delta.insert(delta.end(), dr.begin(), dr.end());
  }
  const Vec3 bg(0.9, 0.8, 0.7);
  ad::Tape<double> tape;
  const auto out = composite(tape, tape.constant({R * S, 1}, sig), tape.constant({R * S, 3}, rgb), R, S, delta, bg);
  for (std::size_t r = 0; r < R; ++r) {
    const auto ref = composite(std::span<const double>(sig).subspan(r * S, S), std::span<const double>(rgb).subspan(r * S * 3, S * 3),
                               std::span<const double>(t).subspan(r * S, S), std::span<const double>(delta).subspan(r * S, S), bg);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(tape.value(out.rgb)[r * 3 + c], ref.rgb[c], 1e-12);
    EXPECT_NEAR(tape.value(out.opacity)[r], ref.opacity, 1e-12);
    for (std::size_t s = 0; s < S; ++s) EXPECT_NEAR(tape.value(out.weights)[r * S + s], ref.weights[s], 1e-12);
  }
}

TEST(Composite, GradCheckSinglePrecision) {
  const std::size_t R = 4, S = 12;
  ad::Parameter<float> sig("sigma", {R * S, 1}), rgb("rgb", {R * S, 3});
  std::mt19937 rng(3);
  std::uniform_real_distribution<float> u(0.05f, 2.0f);
  for (auto& v : sig.values()) v = u(rng);
  for (auto& v : rgb.values()) v = u(rng) / 2;
  std::vector<double> delta;
  for (std::size_t r = 0; r < R; ++r) {
    const auto t = stratified_sample(BinLayout{0, 2, static_cast<int>(S)}, r + 10);
    std::vector<double> d(S);
    sample_deltas(t, 2.0, d);
    delta.insert(delta.end(), d.begin(), d.end());
  }
  const std::vector<float> target = {0.1f, 0.5f, 0.9f, 0.3f, 0.3f, 0.3f, 1, 0, 0, 0.5f, 0.2f, 0.7f};
  const ad::TapeFunction<float> fn = [&](ad::Tape<float>& tape, std::span<const ad::Var> p) {
    const auto out = composite(tape, p[0], p[1], R, S, delta, Vec3::Ones());
    const ad::Var res = tape.sub(out.rgb, tape.constant({R, 3}, target));
    return tape.add(tape.squared_norm(res), tape.squared_norm(out.weights));
  };
  ad::Parameter<float>* ps[] = {&sig, &rgb};
  EXPECT_LT(ad::grad_check<float>(fn, ps, 1e-3f).max_relative_error, 1e-3);
}

TEST(RenderView, ConstantEmissionFieldGivesConstantImage) {
  auto f = field::RadianceField<float>::make(field::Variant::kKPlanes, small_config(), 4);
  auto* kp = f.kplanes();
  using KP = field::KPlanesField<float>;
  std::fill(kp->params()[KP::kSigmaW2].values().begin(), kp->params()[KP::kSigmaW2].values().end(), 0.0f);
  std::fill(kp->params()[KP::kRgbW2].values().begin(), kp->params()[KP::kRgbW2].values().end(), 0.0f);
  kp->params()[KP::kRgbB2].values() = {1.0f, -1.0f, 0.2f};
  const Camera cam = spherical_pose(20, 10, 4, 16, 16, 40, 4 - std::sqrt(3.0), 4 + std::sqrt(3.0));
  RenderOptions o;
  o.bins = 32;
  const auto v = render_view(f, cam, o);
  for (std::size_t p = 1; p < v.color.pixel_count(); ++p)
    for (int c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(v.color.data[p * 3 + c], v.color.data[c]);
}

TEST(RenderView, SameSeedSameBuffersAcrossThreadCounts) {
  auto f = field::RadianceField<float>::make(field::Variant::kKPlanes, nlohmann::json::object(), 6);
  const Camera cam = spherical_pose(20, 10, 4, 24, 20, 40, 4 - std::sqrt(3.0), 4 + std::sqrt(3.0));
  RenderOptions o;
  o.bins = 16;
  o.jitter = true;
  o.retain_weights = true;
  o.seed = 77;
  o.chunk = 37;
  const auto a = render_view(f, cam, o);
  o.threads = 3;
  const auto b = render_view(f, cam, o);
  EXPECT_EQ(a.color, b.color);
  EXPECT_EQ(a.depth, b.depth);
  EXPECT_EQ(a.weights, b.weights);
  o.seed = 78;
  const auto c = render_view(f, cam, o);
  EXPECT_NE(a.color, c.color);
}

TEST(RenderView, RetainedWeightsMatchOpacityAndDepth) {
  auto f = field::RadianceField<float>::make(field::Variant::kKPlanes, nlohmann::json::object(), 3);
  const Camera cam = spherical_pose(0, 0, 4, 16, 16, 40, 4 - std::sqrt(3.0), 4 + std::sqrt(3.0));
  RenderOptions o;
  o.bins = 24;
  o.retain_weights = true;
  o.retain_sigma = true;
  const auto v = render_view(f, cam, o);
  ASSERT_EQ(v.weights.size(), 16u * 16 * 24);
  ASSERT_EQ(v.sigma.size(), v.weights.size());
  for (std::size_t p = 0; p < v.opacity.pixel_count(); ++p) {
    double sum = 0;
    for (int s = 0; s < 24; ++s) sum += v.weights[p * 24 + s];
    EXPECT_NEAR(sum, v.opacity.data[p], 1e-5);
    EXPECT_GE(v.opacity.data[p], 0.0f);
    EXPECT_LE(v.opacity.data[p], 1.0f + 1e-6f);
    if (v.opacity.data[p] > 0) EXPECT_TRUE(std::isfinite(v.depth.data[p]));
  }
}

TEST(RenderView, ShiftingCameraAndSceneTogetherKeepsImage) {
  auto cfg = small_config();
  cfg.resolution = 8;
  auto f = field::RadianceField<double>::make(field::Variant::kKPlanes, cfg, 12);
  auto cfg2 = cfg;
  cfg2.box_min += 0.75;
  cfg2.box_max += 0.75;
  field::RadianceField<double> g(field::KPlanesField<double>{cfg2});
  for (std::size_t k = 0; k < f.params().size(); ++k) g.params()[k].values() = f.params()[k].values();
  Camera cam = spherical_pose(40, 25, 4, 16, 16, 40, 4 - std::sqrt(3.0), 4 + std::sqrt(3.0));
  Camera moved = cam;
  moved.center += Vec3::Constant(0.75);
  RenderOptions o;
  o.bins = 16;
  const auto a = render_view(f, cam, o);
  const auto b = render_view(g, moved, o);
  for (std::size_t i = 0; i < a.color.data.size(); ++i) EXPECT_NEAR(a.color.data[i], b.color.data[i], 1e-6);
  for (std::size_t i = 0; i < a.depth.data.size(); ++i) EXPECT_NEAR(a.depth.data[i], b.depth.data[i], 1e-5);
}
