#pragma once

// Central finite-difference verification of tape gradients in 64-bit.

#include "mmnet/params.hpp"

#include <functional>

namespace mmnet {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(shape);
  for (Index i = 0; i < t.size(); ++i) {
    t[i] = lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
  }
  return t;
}

/// Largest elementwise |a - n| / max(|a|, |n|, floor) over everything checked.
struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst;  // "input k[i]" of the largest error
  Index checked = 0;
  Index kinks = 0;  // entries whose stencil straddles a kink
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using ScalarFn = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

/// Compares d f / d inputs from backward() against (f(x + h) - f(x - h)) / 2h elementwise.
/// The error floor is max(floor, loss_floor * |f(x)|), the scale of round-off in the difference.
inline GradCheckReport gradient_check(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                                      double h = 1e-5, double floor = 1e-8, double loss_floor = 1e-6) {
  std::vector<Tensor<double>> analytic;
  {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x));
    tape.backward(f(tape, vars));
    for (const auto& v : vars) {
      analytic.push_back(tape.grad(v).has_data() ? tape.grad(v) : Tensor<double>(v.shape()));
    }
  }
  auto eval = [&]() {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.constant(x));
    return f(tape, vars).value()[0];
  };
  floor = std::max(floor, loss_floor * std::abs(eval()));
  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Index i = 0; i < inputs[k].size(); ++i) {
      const double keep = inputs[k][i];
      inputs[k][i] = keep + h;
      const double up = eval();
      inputs[k][i] = keep - h;
      const double down = eval();
      inputs[k][i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[k][i], numeric, floor);
      ++report.checked;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst = "input " + std::to_string(k) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

/// Options for whole-network checks, where ReLU kinks and round-off in f(x +- h) matter.
struct NetworkCheckOptions {
  double h = 1e-5;
  double floor = 1e-8;
  double loss_floor = 1e-6;  // floor also covers loss_floor * |f(x)|
  double kink_ratio = 1e-4;  // one-sided slopes differing by more than this fraction mark a kink
};

/// Same check for every scalar of a parameter set: `loss` builds the objective through a
/// trainable Binder. At a kink the analytic value is compared with the nearer one-sided slope.
inline GradCheckReport parameter_gradient_check(
    ParameterSet<double>& params, const std::function<ad::Var<double>(Binder<double>&)>& loss,
    const NetworkCheckOptions& opt = {}) {
  params.zero_grad();
  {
    ad::Tape<double> tape;
    Binder<double> bind(tape, params, true);
    tape.backward(loss(bind));
  }
  auto eval = [&]() {
    ad::Tape<double> tape;
    Binder<double> bind(tape, params, false);
    return loss(bind).value()[0];
  };
  const double f0 = eval();
  const double floor = std::max(opt.floor, opt.loss_floor * std::abs(f0));
  GradCheckReport report;
  for (auto& [name, p] : params) {
    for (Index i = 0; i < p.value.size(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + opt.h;
      const double up = eval();
      p.value[i] = keep - opt.h;
      const double down = eval();
      p.value[i] = keep;
      const double a = p.grad[i];
      const double fwd = (up - f0) / opt.h, bwd = (f0 - down) / opt.h;
      double err = relative_error(a, (up - down) / (2.0 * opt.h), floor);
      if (std::abs(fwd - bwd) > opt.kink_ratio * std::max({std::abs(fwd), std::abs(bwd), floor})) {
        ++report.kinks;
        err = std::min({err, relative_error(a, fwd, floor), relative_error(a, bwd, floor)});
      }
      ++report.checked;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace mmnet
