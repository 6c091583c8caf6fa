#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "senerf/autodiff.hpp"

using namespace senerf::ad;

namespace {

// Central differences of an arbitrary scalar function of a flat vector.
template <class F>
std::vector<double> numeric_gradient(F f, std::vector<double> x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = x[i];
    x[i] = s + h;
    const double p = f(x);
    x[i] = s - h;
    const double m = f(x);
    x[i] = s;
    g[i] = (p - m) / (2 * h);
  }
  return g;
}

std::vector<double> random_values(std::size_t n, unsigned seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST(Autodiff, AddIsElementwise) {
  Tape<double> t;
  const Var a = t.constant({1, 2}, {1, 2});
  const Var b = t.constant({1, 2}, {3, 4});
  const auto v = t.value(t.add(a, b));
  EXPECT_EQ(v[0], 4);
  EXPECT_EQ(v[1], 6);
}

TEST(Autodiff, MulByZeroHasZeroGradient) {
  Parameter<double> x("x", {1, 3});
  x.values() = {0.3, -2.0, 7.5};
  Tape<double> t;
  const Var px = t.parameter(x, 0);
  const Var out = t.sum(t.mul(px, t.constant({1, 3}, 0.0)));
  EXPECT_EQ(t.scalar(out), 0.0);
  Parameter<double>* ps[] = {&x};
  t.backward(out, ps);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Autodiff, SumOfSquaresGradient) {
  Parameter<double> x("x", {1, 3});
  x.values() = {1, 2, 3};
  Tape<double> t;
  const Var out = t.sum(t.mul(t.parameter(x, 0), t.parameter(x, 0)));
  Parameter<double>* ps[] = {&x};
  t.backward(out, ps);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4);
  EXPECT_DOUBLE_EQ(x.grad()[2], 6);
}

TEST(Autodiff, SigmoidAtZero) {
  Parameter<double> x("x", {1, 1});
  Tape<double> t;
  const Var out = t.sigmoid(t.parameter(x, 0));
  EXPECT_DOUBLE_EQ(t.scalar(out), 0.5);
  Parameter<double>* ps[] = {&x};
  t.backward(out, ps);
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Autodiff, BilinearGatherAtNodeReturnsNode) {
  Tape<double> t;
  // 3x3 grid, 2 channels; node (u=2, v=1) is row 1 col 2 -> index 5.
  std::vector<double> g(18);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 0.1 * static_cast<double>(i);
  const Var grid = t.constant({9, 2}, g);
  const std::vector<double> uv = {2.0, 1.0};
  const auto v = t.value(t.bilinear_gather(grid, 3, 3, uv));
  EXPECT_DOUBLE_EQ(v[0], g[10]);
  EXPECT_DOUBLE_EQ(v[1], g[11]);
}

TEST(Autodiff, BilinearGatherCellCenterSplitsGradientEqually) {
  Parameter<double> grid("grid", {4, 1});
  grid.values() = {1, 2, 3, 4};
  Tape<double> t;
  const std::vector<double> uv = {0.5, 0.5};
  const Var out = t.sum(t.bilinear_gather(t.parameter(grid, 0), 2, 2, uv));
  EXPECT_DOUBLE_EQ(t.scalar(out), 2.5);
  Parameter<double>* ps[] = {&grid};
  t.backward(out, ps);
  for (double g : grid.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Autodiff, ShapeMismatchNamesOpAndShapes) {
  Tape<double> t;
  const Var a = t.constant({2, 3}, 1.0);
  const Var b = t.constant({3, 2}, 1.0);
  try {
    t.add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(t.matmul(a, a), ShapeError);
}

TEST(Autodiff, BackwardRejectsNonScalarOutput) {
  Parameter<double> x("x", {1, 2});
  Tape<double> t;
  const Var v = t.parameter(x, 0);
  Parameter<double>* ps[] = {&x};
  EXPECT_THROW(t.backward(v, ps), ShapeError);
}

TEST(Autodiff, GuardedLogStaysFinite) {
  Tape<double> t;
  const Var l = t.log(t.constant({1, 1}, 0.0));
  EXPECT_NEAR(t.scalar(l), std::log(1e-12), 1e-9);
}

TEST(Autodiff, SoftplusStableForLargeInputs) {
  EXPECT_DOUBLE_EQ(softplus(800.0), 800.0);
  EXPECT_GT(softplus(-800.0), -1e-300);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  Parameter<double> x("x", {1, 2});
  x.values() = {800.0, -800.0};
  Tape<double> t;
  const Var out = t.sum(t.softplus(t.parameter(x, 0)));
  Parameter<double>* ps[] = {&x};
  t.backward(out, ps);
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_GE(x.grad()[1], 0.0);
  EXPECT_TRUE(std::isfinite(x.grad()[1]));
}

TEST(Autodiff, ExclusiveCumsumValues) {
  Tape<double> t;
  const auto v = t.value(t.exclusive_cumsum(t.constant({2, 3}, {1, 2, 3, 4, 5, 6})));
  const std::vector<double> expect = {0, 1, 3, 0, 4, 9};
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_DOUBLE_EQ(v[i], expect[i]);
}

TEST(Autodiff, EmptyTraceBackwardGivesZeroGradients) {
  Parameter<double> x("x", {2, 2});
  x.values() = {1, 2, 3, 4};
  x.grad() = {5, 5, 5, 5};
  x.zero_grad();
  Tape<double> t;
  t.reset();
  const Var out = t.constant({1, 1}, 3.0);
  Parameter<double>* ps[] = {&x};
  t.backward(out, ps);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Autodiff, NonFiniteRecordIsReported) {
  Tape<double> t;
  const Var big = t.exp(t.constant({1, 1}, 1e6));
  (void)big;
  try {
    t.check_finite();
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("exp"), std::string::npos);
  }
}

TEST(Autodiff, GradCheckQuadraticForm) {
  Parameter<double> x("x", {1, 4});
  x.values() = random_values(4, 11);
  const std::vector<double> a = random_values(16, 12);
  const TapeFunction<double> f = [&](Tape<double>& t, std::span<const Var> p) {
    const Var ax = t.matmul(p[0], t.constant({4, 4}, a));
    return t.sum(t.mul(ax, p[0]));
  };
  Parameter<double>* ps[] = {&x};
  const auto r = grad_check<double>(f, ps, 1e-6);
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(Autodiff, GradCheckConstantFunctionIsExactlyZero) {
  Parameter<double> x("x", {1, 3});
  x.values() = {1, 2, 3};
  const TapeFunction<double> f = [](Tape<double>& t, std::span<const Var>) { return t.constant({1, 1}, 4.0); };
  Parameter<double>* ps[] = {&x};
  const auto r = grad_check<double>(f, ps, 1e-4);
  EXPECT_EQ(r.max_relative_error, 0.0);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

// Every primitive against an independent finite-difference oracle on the
// plain double function it should compute.
TEST(Autodiff, PrimitiveJacobiansMatchFiniteDifferences) {
  const std::size_t R = 3, C = 4;
  const auto w = random_values(R * C, 5);
  const auto x0 = random_values(R * C, 6, 0.2, 1.5);
  const auto m = random_values(C * 2, 7);

  struct Case {
    const char* name;
    std::function<Var(Tape<double>&, Var)> taped;
    std::function<double(const std::vector<double>&)> plain;
  };
  auto weighted = [&](const std::vector<double>& y) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (0.3 + 0.1 * static_cast<double>(i % 7)) * y[i];
    return s;
  };
  auto tw = [&](Tape<double>& t, Var y) {
    const auto sh = t.shape(y);
    std::vector<double> k(sh.size());
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
    return t.sum(t.mul(y, t.constant(sh, k)));
  };
  auto map = [&](auto fn) {
    return [=](const std::vector<double>& x) {
      std::vector<double> y(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = fn(x[i]);
      return weighted(y);
    };
  };
  std::vector<Case> cases = {
      {"exp", [&](Tape<double>& t, Var v) { return tw(t, t.exp(v)); }, map([](double v) { return std::exp(v); })},
      {"log", [&](Tape<double>& t, Var v) { return tw(t, t.log(v)); }, map([](double v) { return std::log(v); })},
      {"relu", [&](Tape<double>& t, Var v) { return tw(t, t.relu(t.add_scalar(v, -0.8))); },
       map([](double v) { return std::max(0.0, v - 0.8); })},
      {"softplus", [&](Tape<double>& t, Var v) { return tw(t, t.softplus(v)); },
       map([](double v) { return std::log1p(std::exp(v)); })},
      {"sigmoid", [&](Tape<double>& t, Var v) { return tw(t, t.sigmoid(v)); },
       map([](double v) { return 1 / (1 + std::exp(-v)); })},
      {"cos", [&](Tape<double>& t, Var v) { return tw(t, t.cos(v)); }, map([](double v) { return std::cos(v); })},
      {"sin", [&](Tape<double>& t, Var v) { return tw(t, t.sin(v)); }, map([](double v) { return std::sin(v); })},
      {"scale", [&](Tape<double>& t, Var v) { return tw(t, t.scale(v, -2.5)); }, map([](double v) { return -2.5 * v; })},
      {"squared_norm", [&](Tape<double>& t, Var v) { return t.squared_norm(v); },
       [](const std::vector<double>& x) {
         double s = 0;
         for (double v : x) s += v * v;
         return s;
       }},
      {"mean", [&](Tape<double>& t, Var v) { return t.mean(t.mul(v, v)); },
       [](const std::vector<double>& x) {
         double s = 0;
         for (double v : x) s += v * v;
         return s / static_cast<double>(x.size());
       }},
      {"mul_sub", [&](Tape<double>& t, Var v) { return tw(t, t.mul(t.sub(v, t.constant({R, C}, w)), v)); },
       [&](const std::vector<double>& x) {
         std::vector<double> y(x.size());
         for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - w[i]) * x[i];
         return weighted(y);
       }},
      {"matmul", [&](Tape<double>& t, Var v) { return tw(t, t.matmul(v, t.constant({C, 2}, m))); },
       [&](const std::vector<double>& x) {
         std::vector<double> y(R * 2, 0.0);
         for (std::size_t r = 0; r < R; ++r)
           for (std::size_t k = 0; k < 2; ++k)
             for (std::size_t c = 0; c < C; ++c) y[r * 2 + k] += x[r * C + c] * m[c * 2 + k];
         return weighted(y);
       }},
      {"row_sum", [&](Tape<double>& t, Var v) { return tw(t, t.mul(t.row_sum(v), t.row_sum(v))); },
       [&](const std::vector<double>& x) {
         std::vector<double> y(R);
         for (std::size_t r = 0; r < R; ++r) {
           double s = 0;
           for (std::size_t c = 0; c < C; ++c) s += x[r * C + c];
           y[r] = s * s;
         }
         return weighted(y);
       }},
      {"exclusive_cumsum", [&](Tape<double>& t, Var v) { return tw(t, t.exp(t.scale(t.exclusive_cumsum(v), -1.0))); },
       [&](const std::vector<double>& x) {
         std::vector<double> y(x.size());
         for (std::size_t r = 0; r < R; ++r) {
           double s = 0;
           for (std::size_t c = 0; c < C; ++c) {
             y[r * C + c] = std::exp(-s);
             s += x[r * C + c];
           }
         }
         return weighted(y);
       }},
      {"batched_matvec",
       [&](Tape<double>& t, Var v) {
         return tw(t, t.batched_matvec(v, t.mul(t.reshape(v, {R * C, 1}), t.constant({R * C, 1}, 2.0))));
       },
       [&](const std::vector<double>& x) {
         // rows r: sum_c x[r,c] * (2 x[r,c]) as a one-column value per ray
         std::vector<double> y(R);
         for (std::size_t r = 0; r < R; ++r) {
           double s = 0;
           for (std::size_t c = 0; c < C; ++c) s += x[r * C + c] * 2 * x[r * C + c];
           y[r] = s;
         }
         return weighted(y);
       }},
      {"concat_slice_broadcast",
       [&](Tape<double>& t, Var v) {
         const Var cat = t.concat_cols(v, t.exp(v));
         const Var sl = t.slice_cols(cat, 2, 4);
         return tw(t, t.mul(sl, t.broadcast_cols(t.slice_cols(v, 0, 1), 4)));
       },
       [&](const std::vector<double>& x) {
         std::vector<double> y(R * 4);
         for (std::size_t r = 0; r < R; ++r) {
           double row[8];
           for (std::size_t c = 0; c < C; ++c) {
             row[c] = x[r * C + c];
             row[C + c] = std::exp(x[r * C + c]);
           }
           for (std::size_t k = 0; k < 4; ++k) y[r * 4 + k] = row[2 + k] * x[r * C];
         }
         return weighted(y);
       }},
      {"add_row_bias", [&](Tape<double>& t, Var v) { return tw(t, t.mul(t.add_row_bias(v, t.slice_cols(t.reshape(v, {1, R * C}), 0, C)), v)); },
       [&](const std::vector<double>& x) {
         std::vector<double> y(x.size());
         for (std::size_t r = 0; r < R; ++r)
           for (std::size_t c = 0; c < C; ++c) y[r * C + c] = (x[r * C + c] + x[c]) * x[r * C + c];
         return weighted(y);
       }},
  };
  for (const auto& cs : cases) {
    Parameter<double> p("x", {R, C});
    p.values() = x0;
    Tape<double> t;
    const Var out = cs.taped(t, t.parameter(p, 0));
    EXPECT_NEAR(t.scalar(out), cs.plain(x0), 1e-12) << cs.name;
    Parameter<double>* ps[] = {&p};
    t.backward(out, ps);
    const auto num = numeric_gradient(cs.plain, x0);
    for (std::size_t i = 0; i < num.size(); ++i)
      EXPECT_NEAR(p.grad()[i], num[i], 1e-6 * std::max(1.0, std::abs(num[i]))) << cs.name << " coord " << i;
  }
}

TEST(Autodiff, BilinearGatherGradientMatchesFiniteDifferences) {
  const std::size_t H = 3, W = 4, C = 2;
  const auto g0 = random_values(H * W * C, 21);
  const std::vector<double> uv = {0.3, 0.7, 2.6, 1.2, 1.5, 1.9, 3.0, 0.0};
  auto plain = [&](const std::vector<double>& g) {
    double s = 0;
    for (std::size_t p = 0; p < uv.size() / 2; ++p) {
      const double u = uv[2 * p], v = uv[2 * p + 1];
      const auto u0 = static_cast<std::size_t>(std::min(std::floor(u), double(W - 2)));
      const auto v0 = static_cast<std::size_t>(std::min(std::floor(v), double(H - 2)));
      const double fu = u - static_cast<double>(u0), fv = v - static_cast<double>(v0);
      for (std::size_t c = 0; c < C; ++c) {
        const double val = (1 - fu) * (1 - fv) * g[(v0 * W + u0) * C + c] + fu * (1 - fv) * g[(v0 * W + u0 + 1) * C + c] +
                           (1 - fu) * fv * g[((v0 + 1) * W + u0) * C + c] + fu * fv * g[((v0 + 1) * W + u0 + 1) * C + c];
        s += val * val * (1.0 + static_cast<double>(c));
      }
    }
    return s;
  };
  Parameter<double> p("grid", {H * W, C});
  p.values() = g0;
  Tape<double> t;
  const Var v = t.bilinear_gather(t.parameter(p, 0), H, W, uv);
  const Var out = t.sum(t.mul(t.mul(v, v), t.constant({uv.size() / 2, C}, {1, 2, 1, 2, 1, 2, 1, 2})));
  EXPECT_NEAR(t.scalar(out), plain(g0), 1e-12);
  Parameter<double>* ps[] = {&p};
  t.backward(out, ps);
  const auto num = numeric_gradient(plain, g0);
  for (std::size_t i = 0; i < num.size(); ++i) EXPECT_NEAR(p.grad()[i], num[i], 1e-6);
}

TEST(Autodiff, GradientBufferAccumulatesAdditively) {
  Parameter<float> x("x", {1, 2});
  x.values() = {1.0f, -1.0f};
  Parameter<float>* ps[] = {&x};
  GradientBuffer<float> a(ps), b(ps);
  for (auto* buf : {&a, &b}) {
    Tape<float> t;
    const Var out = t.sum(t.mul(t.parameter(x, 0), t.parameter(x, 0)));
    t.backward(out, *buf);
  }
  a.add_into(ps);
  b.add_into(ps);
  EXPECT_FLOAT_EQ(x.grad()[0], 4.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], -4.0f);
}
