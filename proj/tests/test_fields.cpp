#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "senerf/fields.hpp"

using namespace senerf;
using namespace senerf::field;

namespace {

template <class T>
std::vector<Var> bind_all(Tape<T>& tape, const KPlanesField<T>& f) {
  std::vector<Var> out;
  for (std::size_t i = 0; i < f.params().size(); ++i) out.push_back(tape.parameter(f.params()[i], i));
  return out;
}

std::vector<double> q_at(const KPlanesField<double>& f, const std::vector<double>& pos) {
  Tape<double> tape;
  const auto bound = bind_all(tape, f);
  const auto v = tape.value(f.features(tape, bound, pos));
  return {v.begin(), v.end()};
}

KPlanesConfig small_config() {
  KPlanesConfig c;
  c.resolution = 4;
  c.features = 8;
  c.hidden = 8;
  c.geo_features = 4;
  return c;
}

void fill(Parameter<double>& p, double v) { std::fill(p.values().begin(), p.values().end(), v); }

}  // namespace

TEST(KPlanes, OnesPlanesGiveOnes) {
  KPlanesField<double> f(small_config());
  for (int k = 0; k < 3; ++k) fill(f.params()[k], 1.0);
  const auto q = q_at(f, {0.13, -0.71, 0.42});
  ASSERT_EQ(q.size(), 8u);
  for (double v : q) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(KPlanes, ConstantTwoPlanesGiveEight) {
  KPlanesField<double> f(small_config());
  for (int k = 0; k < 3; ++k) fill(f.params()[k], 2.0);
  for (double v : q_at(f, {-0.3, 0.9, 0.05})) EXPECT_DOUBLE_EQ(v, 8.0);
}

TEST(KPlanes, NodeValuesMultiply) {
  const auto cfg = small_config();
  KPlanesField<double> f(cfg);
  f.initialize(5);
  // Resolution 4 over [-1, 1]: node i sits at -1 + 2i/3. Pick node (1, 2, 3).
  const int ix = 1, iy = 2, iz = 3;
  const double x = -1 + 2.0 * ix / 3, y = -1 + 2.0 * iy / 3, z = -1 + 2.0 * iz / 3;
  const auto q = q_at(f, {x, y, z});
  const std::size_t N = 4, M = 8;
  for (std::size_t c = 0; c < M; ++c) {
    const double a = f.params()[0].values()[(iy * N + ix) * M + c];  // xy: u=x, v=y
    const double b = f.params()[1].values()[(iz * N + iy) * M + c];  // yz
    const double d = f.params()[2].values()[(iz * N + ix) * M + c];  // xz
    EXPECT_NEAR(q[c], a * b * d, 1e-14);
  }
}

TEST(KPlanes, ZeroPlaneAnnihilates) {
  KPlanesField<double> f(small_config());
  f.initialize(2);
  fill(f.params()[1], 0.0);
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 20; ++i)
    for (double v : q_at(f, {u(rng), u(rng), u(rng)})) EXPECT_EQ(v, 0.0);
}

TEST(KPlanes, ZeroDecoderGivesActivationsAtZero) {
  KPlanesField<double> f(small_config());
  f.initialize(1);
  for (std::size_t k = KPlanesField<double>::kSigmaW1; k < KPlanesField<double>::kCount; ++k) fill(f.params()[k], 0.0);
  Tape<double> tape;
  const auto bound = bind_all(tape, f);
  PointBatch<double> b;
  b.positions = {0.1, 0.2, 0.3, -0.5, 0.0, 0.9};
  b.directions = {1, 0, 0, 0, 0, 1};
  const auto out = f.eval(tape, bound, b, 0);
  for (double s : tape.value(out.sigma)) EXPECT_NEAR(s, std::log(2.0), 1e-12);
  for (double c : tape.value(out.rgb)) EXPECT_DOUBLE_EQ(c, 0.5);
}

TEST(KPlanes, RandomWeightsStayInRange) {
  for (const char* act : {"relu", "softplus"}) {
    auto cfg = small_config();
    cfg.activation = act;
    KPlanesField<double> f(cfg);
    f.initialize(9);
    std::mt19937 rng(4);
    std::normal_distribution<double> n(0, 3);
    for (auto& p : f.params())
      for (auto& v : p.values()) v = n(rng);
    Tape<double> tape;
    const auto bound = bind_all(tape, f);
    PointBatch<double> b;
    std::uniform_real_distribution<double> u(-1, 1);
    for (int i = 0; i < 64; ++i) {
      Vec3 d(u(rng), u(rng), u(rng));
      d.normalize();
      for (int a = 0; a < 3; ++a) {
        b.positions.push_back(u(rng));
        b.directions.push_back(d[a]);
      }
    }
    const auto out = f.eval(tape, bound, b, 0);
    for (double s : tape.value(out.sigma)) EXPECT_GE(s, 0.0);
    for (double c : tape.value(out.rgb)) {
      EXPECT_GE(c, 0.0);
      EXPECT_LE(c, 1.0);
    }
  }
}

TEST(KPlanes, ZeroFinalLayersGiveConstantOutput) {
  auto f = RadianceField<double>::make(Variant::kKPlanes, small_config(), 4);
  auto* kp = f.kplanes();
  fill(kp->params()[KPlanesField<double>::kSigmaW2], 0.0);
  fill(kp->params()[KPlanesField<double>::kRgbW2], 0.0);
  kp->params()[KPlanesField<double>::kSigmaB2].values()[0] = 0.7;
  kp->params()[KPlanesField<double>::kRgbB2].values() = {0.1, -0.4, 2.0};
  Tape<double> tape;
  const auto bound = f.bind(tape);
  PointBatch<double> b;
  b.positions = {0.1, 0.2, 0.3, -0.5, 0.0, 0.9, 0.99, -0.99, 0.0};
  b.directions = {1, 0, 0, 0, 0, 1, 0, 1, 0};
  const auto out = f.eval(tape, bound, b, 0);
  const auto s = tape.value(out.sigma);
  const auto c = tape.value(out.rgb);
  for (std::size_t i = 1; i < 3; ++i) {
    EXPECT_EQ(s[i], s[0]);
    for (int k = 0; k < 3; ++k) EXPECT_EQ(c[i * 3 + k], c[k]);
  }
}

TEST(KPlanes, EvalIsDeterministic) {
  auto f = RadianceField<float>::make(Variant::kKPlanes, nlohmann::json::object(), 11);
  PointBatch<float> b;
  b.positions = {0.1f, 0.2f, 0.3f, -0.5f, 0.0f, 0.9f};
  b.directions = {1, 0, 0, 0, 0, 1};
  std::vector<float> first;
  for (int rep = 0; rep < 2; ++rep) {
    Tape<float> tape;
    const auto bound = f.bind(tape);
    const auto out = f.eval(tape, bound, b, 0);
    std::vector<float> v(tape.value(out.rgb).begin(), tape.value(out.rgb).end());
    v.insert(v.end(), tape.value(out.sigma).begin(), tape.value(out.sigma).end());
    if (rep == 0) first = v;
    else EXPECT_EQ(v, first);
  }
}

TEST(KPlanes, OutsidePointsClampAndCount) {
  KPlanesField<double> f(small_config());
  f.initialize(1);
  const auto inside = q_at(f, {1.0, -1.0, 0.5});
  EXPECT_EQ(f.clamped_points(), 0u);
  const auto outside = q_at(f, {3.0, -7.0, 0.5});
  EXPECT_EQ(f.clamped_points(), 1u);
  EXPECT_EQ(inside, outside);
}

TEST(KPlanes, FeaturesAreLipschitzInsideCell) {
  KPlanesField<double> f(small_config());
  f.initialize(8);
  // Each bilinear factor moves at most 2 vmax per node unit along each of its
  // two axes; nodes are 2/3 apart. Product rule over the three factors.
  double vmax = 0;
  for (int k = 0; k < 3; ++k)
    for (double v : f.params()[k].values()) vmax = std::max(vmax, std::abs(v));
  const double lip = 3 * (2 * vmax * 1.5 * 2) * vmax * vmax;
  const std::vector<double> base = {0.1, 0.2, -0.2};
  const auto q0 = q_at(f, base);
  for (double h : {1e-2, 1e-3, 1e-4}) {
    const auto q1 = q_at(f, {base[0] + h, base[1] + h, base[2] + h});
    for (std::size_t c = 0; c < q0.size(); ++c) EXPECT_LE(std::abs(q1[c] - q0[c]), lip * h + 1e-15);
  }
}

TEST(KPlanes, DefaultParameterCountIsDeskScale) {
  auto f = RadianceField<float>::make(Variant::kKPlanes, nlohmann::json::object(), 0);
  EXPECT_LT(f.parameter_count(), 50000u);
  const auto& c = f.kplanes()->config();
  EXPECT_EQ(c.resolution, 32);
  EXPECT_EQ(c.features, 8);
  EXPECT_EQ(c.hidden, 32);
}

TEST(KPlanes, InitializationRanges) {
  KPlanesField<double> f;
  f.initialize(3);
  for (int k = 0; k < 3; ++k)
    for (double v : f.params()[k].values()) {
      EXPECT_GE(v, 0.1);
      EXPECT_LE(v, 0.5);
    }
  const auto& w = f.params()[KPlanesField<double>::kSigmaW1];
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.shape().rows));
  for (double v : w.values()) EXPECT_LE(std::abs(v), bound);
}

TEST(KPlanes, RejectsUnknownActivation) {
  EXPECT_THROW((void)nlohmann::json({{"activation", "tanh"}}).get<KPlanesConfig>(), std::invalid_argument);
}

TEST(KPlanes, FieldEvalGradCheckSinglePrecision) {
  auto f = RadianceField<float>::make(Variant::kKPlanes, small_config(), 21);
  PointBatch<float> b;
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> u(-0.9f, 0.9f);
  for (int i = 0; i < 6; ++i) {
    Vec3 d(u(rng), u(rng), u(rng));
    d.normalize();
    for (int a = 0; a < 3; ++a) {
      b.positions.push_back(u(rng));
      b.directions.push_back(static_cast<float>(d[a]));
    }
  }
  const ad::TapeFunction<float> fn = [&](Tape<float>& t, std::span<const Var> bound) {
    const auto out = f.eval(t, bound, b, 0);
    return t.add(t.squared_norm(out.sigma), t.squared_norm(out.rgb));
  };
  auto params = f.param_ptrs();
  const auto r = ad::grad_check<float>(fn, params, 3e-3f);
  EXPECT_LT(r.max_relative_error, 1e-3);
}

TEST(KPlanes, FieldEvalGradCheckDoublePrecision) {
  auto f = RadianceField<double>::make(Variant::kKPlanes, small_config(), 22);
  PointBatch<double> b;
  b.positions = {0.1, -0.3, 0.45, -0.7, 0.2, 0.05};
  b.directions = {0.6, 0.8, 0, 0, 0, 1};
  const ad::TapeFunction<double> fn = [&](Tape<double>& t, std::span<const Var> bound) {
    const auto out = f.eval(t, bound, b, 0);
    return t.add(t.squared_norm(out.sigma), t.squared_norm(out.rgb));
  };
  auto params = f.param_ptrs();
  EXPECT_LT(ad::grad_check<double>(fn, params, 1e-6).max_relative_error, 1e-6);
}

TEST(Annealing, EndpointsAndMidpoint) {
  const AnnealSchedule s{4, 100.0};
  EXPECT_DOUBLE_EQ(s.eta(0), 0.0);
  EXPECT_DOUBLE_EQ(s.eta(50), 2.0);
  for (int j = 0; j < 4; ++j) {
    EXPECT_DOUBLE_EQ(band_weight(s.eta(0), j), 0.0);
    EXPECT_DOUBLE_EQ(band_weight(4.0, j), 1.0);
    EXPECT_DOUBLE_EQ(band_weight(static_cast<double>(j), j), 0.0);
    EXPECT_DOUBLE_EQ(band_weight(j + 1.0, j), 1.0);
    EXPECT_NEAR(band_weight(j + 0.5, j), 0.5, 1e-15);
  }
}

TEST(Annealing, WeightsMonotoneInEta) {
  for (int j = 0; j < 3; ++j) {
    double prev = -1;
    for (int i = 0; i <= 400; ++i) {
      const double w = band_weight(i / 100.0, j);
      EXPECT_GE(w, prev);
      EXPECT_GE(w, 0.0);
      EXPECT_LE(w, 1.0);
      prev = w;
    }
  }
}

TEST(PositionalEncoding, WidthAndValues) {
  const AnnealSchedule off{3, 0.0};
  const std::vector<double> v = {0.25, -0.5};
  const auto e = positional_encoding<double>(v, 2, off, 0, true);
  ASSERT_EQ(e.size(), encoding_width(2, 3, true));
  EXPECT_EQ(encoding_width(2, 3, false), 2u * 2 * 3);
  EXPECT_DOUBLE_EQ(e[0], 0.25);
  EXPECT_DOUBLE_EQ(e[1], -0.5);
  for (int j = 0; j < 3; ++j) {
    const double f = std::ldexp(std::numbers::pi, j);
    EXPECT_NEAR(e[2 + 4 * j + 0], std::sin(f * 0.25), 1e-12);
    EXPECT_NEAR(e[2 + 4 * j + 1], std::sin(f * -0.5), 1e-12);
    EXPECT_NEAR(e[2 + 4 * j + 2], std::cos(f * 0.25), 1e-12);
    EXPECT_NEAR(e[2 + 4 * j + 3], std::cos(f * -0.5), 1e-12);
  }
}

TEST(PositionalEncoding, EtaZeroZeroesBands) {
  const AnnealSchedule s{3, 100.0};
  const auto e = positional_encoding<double>(std::vector<double>{0.3, 0.1, 0.7}, 3, s, 0.0, false);
  for (double x : e) EXPECT_EQ(x, 0.0);
}

TEST(MlpField, OutputsInRangeAndAnnealed) {
  MlpConfig c;
  c.anneal_steps = 100;
  auto f = RadianceField<double>::make(Variant::kMlp, c, 2);
  PointBatch<double> b;
  b.positions = {0.1, 0.2, 0.3, -0.5, 0.0, 0.9};
  b.directions = {1, 0, 0, 0, 0, 1};
  Tape<double> tape;
  const auto bound = f.bind(tape);
  const auto out = f.eval(tape, bound, b, 0);
  for (double s : tape.value(out.sigma)) EXPECT_GE(s, 0.0);
  for (double x : tape.value(out.rgb)) {
    EXPECT_GT(x, 0.0);
    EXPECT_LT(x, 1.0);
  }
  f.set_anneal_steps(400);
  EXPECT_EQ(f.mlp()->config().anneal_steps, 400);
}

TEST(Checkpoint, RoundTripPreservesParameters) {
  const auto dir = std::filesystem::temp_directory_path() / "senerf_test_ckpt";
  std::filesystem::create_directories(dir);
  for (auto v : {Variant::kKPlanes, Variant::kMlp}) {
    auto f = RadianceField<float>::make(v, nlohmann::json::object(), 17);
    const auto path = dir / (variant_name(v) + ".ckpt");
    save_checkpoint(path, f, 123, {{"note", "x"}});
    const auto ck = load_checkpoint<float>(path);
    EXPECT_EQ(ck.step, 123);
    EXPECT_EQ(ck.field.variant(), v);
    EXPECT_EQ(ck.field.hash(), f.hash());
    EXPECT_EQ(ck.header["hyperparameters"]["note"], "x");
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, BadFilesAreRejected) {
  const auto path = std::filesystem::temp_directory_path() / "senerf_bad.ckpt";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT";
  }
  EXPECT_THROW(load_checkpoint<float>(path), IoError);
  EXPECT_THROW(load_checkpoint<float>(path.string() + ".missing"), IoError);
  auto f = RadianceField<float>::make(Variant::kKPlanes, nlohmann::json::object(), 1);
  save_checkpoint(path, f, 0);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 10);
  try {
    load_checkpoint<float>(path);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  std::filesystem::remove(path);
}
