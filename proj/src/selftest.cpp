#include "mmnet/selftest.hpp"

#include "mmnet/enhance.hpp"
#include "mmnet/metrics.hpp"
#include "mmnet/tps.hpp"
#include "mmnet/toy.hpp"

#include <iomanip>
#include <ostream>

namespace mmnet {

namespace {

struct Check {
  const char* name;
  std::function<double()> measure;  // returns the error that must stay within `limit`
  double limit;
};

double conv_grad() {
  std::mt19937_64 rng(11);
  return gradient_check(
             [](ad::Tape<double>&, const std::vector<ad::Var<double>>& v) {
               auto y = ad::conv2d(v[0], v[1], v[2], {.stride = 2, .padding = 1, .dilation = 1});
               return ad::sum(ad::mul(y, y));
             },
             {random_tensor({2, 5, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)})
      .max_relative_error;
}

double deconv_adjoint() {
  std::mt19937_64 rng(12);
  const auto x = random_tensor({2, 7, 10}, rng), w = random_tensor({2, 3, 4, 4}, rng);
  const auto y = random_tensor({3, 14, 20}, rng);
  ad::Tape<double> t;
  auto wv = t.constant(w);
  const auto cx = ad::conv2d(t.constant(y), wv, std::nullopt, {.stride = 2, .padding = 1}).value();
  const auto dy = ad::deconv2d(t.constant(x), wv, std::nullopt, {.stride = 2, .padding = 1}).value();
  const double lhs = (cx.array() * x.array()).sum();
  const double rhs = (dy.array() * y.array()).sum();
  return std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs));
}

double softmax_sum() {
  std::mt19937_64 rng(13);
  ad::Tape<double> t;
  const auto p = ad::softmax(t.constant(random_tensor({4, 6, 5}, rng, -30, 30)), {1, 2}).value();
  double worst = 0.0;
  for (Index c = 0; c < 4; ++c) {
    double s = 0.0;
    for (Index i = 0; i < 30; ++i) s += p[c * 30 + i];
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

double lsa_identity() {
  std::mt19937_64 rng(14);
  ad::Tape<double> t;
  const auto x = random_tensor({21, 4, 5}, rng);
  LsaWeights<double> w{t.constant(random_tensor({10, 21, 1, 1}, rng)), t.constant(random_tensor({10}, rng)),
                       t.constant(random_tensor({10, 21, 1, 1}, rng)), t.constant(random_tensor({10}, rng)),
                       t.constant(random_tensor({10, 21, 1, 1}, rng)), t.constant(random_tensor({10}, rng)),
                       t.constant(Tensor<double>(Shape{21, 10, 1, 1})), t.constant(Tensor<double>(Shape{21}))};
  return max_abs_diff(local_self_attention(t.constant(x), w, 5).value(), x);
}

double correlation_oracle() {
  std::mt19937_64 rng(15);
  const auto a = random_tensor({21, 6, 8}, rng), b = random_tensor({21, 6, 8}, rng);
  ad::Tape<double> t;
  const auto s = correlate(t.constant(a), t.constant(b)).value();
  double worst = 0.0;
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 8; ++j)
      for (Index m = 0; m < 6; ++m)
        for (Index n = 0; n < 8; ++n) {
          double d = 0.0;
          for (Index c = 0; c < 21; ++c) d += a(c, i, j) * b(c, m, n);
          worst = std::max(worst, std::abs(d - s(i, j, m, n)));
        }
  return worst;
}

double upscale_constant() {
  ad::Tape<double> t;
  const auto up = upscale4d(t.constant(Tensor<double>(Shape{3, 3, 3, 3}, 3.0))).value();
  return (up.array() - 3.0).abs().maxCoeff();
}

double toy_network_grad() {
  ToyProblem toy = make_toy_problem(21);
  return parameter_gradient_check(toy.model.params, [&](Binder<double>& bind) {
           return toy_objective(bind, toy, {4, 5});
         }).max_relative_error;
}

double pck_boundary() {
  PairPrediction p;
  p.category = "c";
  p.truth = {{50, 50}, {50, 50}};
  p.predicted = {{60, 50}, {50, 60.0001}};
  p.target_w = 100;
  p.target_h = 80;
  return std::abs(pck({p}, 0.1).value() - 0.5);
}

double tps_interpolation() {
  const std::vector<Point> src{{10, 10}, {200, 20}, {40, 150}, {250, 190}, {120, 90}};
  const std::vector<Point> dst{{14, 8}, {195, 30}, {45, 140}, {260, 200}, {118, 99}};
  const TpsWarp w = tps_fit(src, dst);
  double worst = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) worst = std::max(worst, distance(w.apply(src[i]), dst[i]));
  return worst;
}

}  // namespace

bool run_selftest(std::ostream& out) {
  const std::vector<Check> checks = {
      {"conv2d gradient", conv_grad, 1e-4},
      {"deconv2d adjoint identity", deconv_adjoint, 1e-10},
      {"softmax normalisation", softmax_sum, 1e-6},
      {"attention residual identity", lsa_identity, 0.0},
      {"correlation oracle", correlation_oracle, 1e-10},
      {"upscale4d constants", upscale_constant, 0.0},
      {"toy network gradient", toy_network_grad, 1e-4},
      {"pck inclusive boundary", pck_boundary, 0.0},
      {"tps interpolation", tps_interpolation, 1e-9},
  };
  bool ok = true;
  for (const auto& c : checks) {
    double err = 0.0;
    bool pass = false;
    try {
      err = c.measure();
      pass = err <= c.limit;
    } catch (const std::exception& e) {
      out << "FAIL " << c.name << ": " << e.what() << '\n';
      ok = false;
      continue;
    }
    out << (pass ? "PASS " : "FAIL ") << std::left << std::setw(30) << c.name << " error "
        << std::scientific << std::setprecision(2) << err << " (limit " << c.limit << ")"
        << std::defaultfloat << '\n';
    ok = ok && pass;
  }
  return ok;
}

}  // namespace mmnet
