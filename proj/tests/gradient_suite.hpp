#pragma once

// Finite-difference cases for every differentiable op, plus the toy network objective.

#include "mmnet/toy.hpp"
#include "support.hpp"

namespace mmnet::testing {

struct GradCase {
  std::string name;
  ScalarFn fn;
  std::vector<Shape> inputs;
  double lo = -1.0;
  double hi = 1.0;
};

/// <y, R> for a fixed random R of y's shape, so that every output element gets a distinct weight.
inline ad::Var<double> probe(ad::Var<double> y) {
  std::mt19937_64 rng(977);
  return ad::sum(ad::mul(y, y.tape->constant(random_tensor(y.shape(), rng))));
}

inline std::vector<GradCase> gradient_cases() {
  using V = std::vector<ad::Var<double>>;
  using Tp = ad::Tape<double>;
  std::vector<GradCase> cases;
  auto add = [&](std::string name, ScalarFn fn, std::vector<Shape> in, double lo = -1, double hi = 1) {
    cases.push_back({std::move(name), std::move(fn), std::move(in), lo, hi});
  };
  add("add", [](Tp&, const V& v) { return probe(ad::add(v[0], v[1])); }, {{2, 3, 4}, {2, 3, 4}});
  add("add_n", [](Tp&, const V& v) { return probe(ad::add_n(v)); }, {{3, 5}, {3, 5}, {3, 5}});
  add("mul", [](Tp&, const V& v) { return probe(ad::mul(v[0], v[1])); }, {{4, 3}, {4, 3}});
  add("scalar_mul", [](Tp&, const V& v) { return probe(ad::scalar_mul(v[0], -1.7)); }, {{6}});
  add("relu", [](Tp&, const V& v) { return probe(ad::relu(v[0])); }, {{3, 4, 4}});
  add("sum", [](Tp&, const V& v) { return ad::sum(ad::mul(v[0], v[0])); }, {{7}});
  add("reshape", [](Tp&, const V& v) { return probe(ad::reshape(v[0], {6, 4})); }, {{2, 3, 4}});
  add("permute", [](Tp&, const V& v) { return probe(ad::permute(v[0], {2, 0, 1})); }, {{2, 3, 4}});
  add("concat_channels", [](Tp&, const V& v) { return probe(ad::concat_channels(v)); },
      {{3, 2, 2}, {5, 2, 2}});
  add("index_select", [](Tp&, const V& v) { return probe(ad::index_select(v[0], 1, {2, 0, 2})); },
      {{3, 4, 2}});
  add("matmul", [](Tp&, const V& v) { return probe(ad::matmul(v[0], v[1])); }, {{3, 4}, {4, 5}});
  add("matmul_tt", [](Tp&, const V& v) { return probe(ad::matmul(v[0], v[1], true, true)); },
      {{4, 3}, {5, 4}});
  add("matmul_batched", [](Tp&, const V& v) { return probe(ad::matmul(v[0], v[1], true, false)); },
      {{3, 4, 2}, {3, 4, 1}});
  add("softmax", [](Tp&, const V& v) { return probe(ad::softmax(v[0], {1, 2})); }, {{2, 3, 4}}, -3, 3);
  add("softmax_axis0", [](Tp&, const V& v) { return probe(ad::softmax(v[0], {0})); }, {{5, 3}}, -3, 3);
  add("conv2d", [](Tp&, const V& v) {
        return probe(ad::conv2d(v[0], v[1], v[2], {.stride = 2, .padding = 1, .dilation = 1}));
      },
      {{2, 5, 6}, {3, 2, 3, 3}, {3}});
  add("conv2d_dilated", [](Tp&, const V& v) {
        return probe(ad::conv2d(v[0], v[1], v[2], {.stride = 1, .padding = 2, .dilation = 2}));
      },
      {{2, 5, 5}, {2, 2, 3, 3}, {2}});
  add("conv2d_pointwise", [](Tp&, const V& v) { return probe(ad::conv2d(v[0], v[1], v[2], {})); },
      {{3, 4, 3}, {2, 3, 1, 1}, {2}});
  add("deconv2d", [](Tp&, const V& v) {
        return probe(ad::deconv2d(v[0], v[1], std::nullopt, {.stride = 2, .padding = 1}));
      },
      {{2, 3, 4}, {2, 3, 4, 4}});
  add("gather_neighborhood", [](Tp&, const V& v) { return probe(ad::gather_neighborhood(v[0], 3)); },
      {{2, 3, 4}});
  add("pad2d", [](Tp&, const V& v) { return probe(ad::pad2d(v[0], 2)); }, {{2, 3, 3}});
  add("unfold_windows", [](Tp&, const V& v) { return probe(ad::unfold_windows(v[0], 3)); },
      {{2, 5, 4}});
  add("upsample2", [](Tp&, const V& v) { return probe(ad::upsample2(v[0], 1)); }, {{2, 3, 2}});
  add("bce_sum", [](Tp& t, const V& v) {
        std::mt19937_64 rng(31);
        return ad::binary_cross_entropy_sum(v[0], random_tensor({3, 4}, rng, 0.0, 1.0));
      },
      {{3, 4}}, 0.05, 0.95);
  add("softmax_bce_sum", [](Tp&, const V& v) {
        std::mt19937_64 rng(33);
        auto target = random_tensor({3, 7}, rng, 0.0, 1.0);
        return ad::softmax_bce_sum(v[0], target);
      },
      {{3, 7}}, -8, 8);
  add("softmax_then_bce", [](Tp& t, const V& v) {
        std::mt19937_64 rng(32);
        auto target = random_tensor({2, 6}, rng, 0.0, 1.0);
        return ad::binary_cross_entropy_sum(ad::softmax(v[0], {1}), target);
      },
      {{2, 6}}, -2, 2);
  add("correlate", [](Tp&, const V& v) { return probe(correlate(v[0], v[1])); }, {{3, 2, 3}, {3, 3, 2}});
  add("upscale4d", [](Tp&, const V& v) { return probe(upscale4d(v[0])); }, {{2, 2, 3, 2}});
  add("local_self_attention", [](Tp&, const V& v) {
        LsaWeights<double> w{v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]};
        return probe(local_self_attention(v[0], w, 3));
      },
      {{3, 3, 4}, {2, 3, 1, 1}, {2}, {2, 3, 1, 1}, {2}, {2, 3, 1, 1}, {2}, {3, 2, 1, 1}, {3}});
  add("cross_scale_fuse", [](Tp&, const V& v) {
        return probe(cross_scale_fuse(v[0], v[1], v[2], v[3], v[4]));
      },
      {{2, 2, 3}, {2, 4, 6}, {2, 2, 4, 4}, {2, 4, 3, 3}, {2}});
  return cases;
}

inline GradCheckReport run_case(const GradCase& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor<double>> inputs;
  for (const auto& s : c.inputs) inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
  return gradient_check(c.fn, inputs, 1e-5);
}

/// Full objective of the two-scale toy network against finite differences of every parameter.
inline GradCheckReport run_toy_case(std::uint64_t seed) {
  ToyProblem toy = make_toy_problem(seed);
  return parameter_gradient_check(toy.model.params, [&](Binder<double>& bind) {
    return toy_objective(bind, toy, {4, 5});
  });
}

}  // namespace mmnet::testing
