#pragma once

#include <string>
#include <vector>

#include "shadowpool/gradcheck.hpp"
#include "shadowpool/pool.hpp"

namespace shadowpool {

// Gradient validation over random toy pools. Each pool is checked under
// four loss profiles: CE alone, CE with the similarity term, CE with the
// orthogonality term, and the full composite. The reference pathway's
// outputs are frozen, matching the stop-gradient the optimizer applies.
struct GradSuiteReport {
  size_t pools = 0;
  double max_ce = 0.0;
  double max_sr = 0.0;
  double max_or = 0.0;
  double max_composite = 0.0;
  double tolerance = 1e-4;

  double worst() const { return std::max({max_ce, max_sr, max_or, max_composite}); }
  bool passes() const { return worst() < tolerance; }
};

inline GradSuiteReport run_pool_grad_suite(size_t pool_count, double tolerance, uint64_t seed) {
  GradSuiteReport report;
  report.pools = pool_count;
  report.tolerance = tolerance;

  RandomSource root(seed);
  for (size_t trial = 0; trial < pool_count; ++trial) {
    RandomSource rng = root.stream("gradcheck-" + std::to_string(trial));
    PoolArchitecture arch;
    arch.input_dim = 2 + rng.below(3);
    arch.stem_widths = {3 + rng.below(3)};
    arch.expert_layers = 1 + rng.below(2);
    arch.experts_per_layer = 2;
    arch.expert_widths = {arch.stem_widths[0]};
    arch.head_widths = {};
    arch.classes = 2 + rng.below(2);
    Pool pool = build_pool(arch, rng.next_u64());

    const size_t batch = 2 + rng.below(3);
    Matrix x(batch, arch.input_dim);
    for (double& v : x.values) v = rng.uniform(-1.5, 1.5);
    std::vector<int> labels(batch);
    for (int& y : labels) y = static_cast<int>(rng.below(arch.classes));

    const auto all = enumerate_pathways(arch.experts_per_layer, arch.expert_layers);
    const Pathway p1 = all[rng.below(all.size())];
    Pathway p2 = p1;
    while (p2 == p1) p2 = all[rng.below(all.size())];

    const PathwayOutput ref = pathway_forward(pool, p2, x);

    struct Profile {
      double alpha;
      double beta;
      double* slot;
    };
    Profile profiles[4] = {{0.0, 0.0, &report.max_ce},
                           {1.0, 0.0, &report.max_sr},
                           {0.0, 1.0, &report.max_or},
                           {0.05, 0.01, &report.max_composite}};
    for (const Profile& profile : profiles) {
      const detail::PathwayStack stack = detail::assemble_pathway(pool, p1);
      GradientTape tape;
      PathwayOutput active = pathway_forward(pool, p1, x, &tape);
      detail::PoolLossBackward back = detail::pool_loss_backward(active, ref, stack, labels,
                                                                 profile.alpha, profile.beta);
      StackGradients grads =
          backward_stack(stack.layers, tape, back.logit_grad,
                         back.injections.empty() ? nullptr : &back.injections);

      std::vector<ParamRef> params = detail::pathway_params(pool, p1);
      std::vector<std::vector<double>> analytic;
      for (const auto& lg : grads.layers) {
        analytic.push_back(lg.weight.values);
        analytic.push_back(lg.bias);
      }
      auto loss_fn = [&]() {
        PathwayOutput out = pathway_forward(pool, p1, x);
        double loss = cross_entropy(out.probabilities, labels);
        if (profile.alpha != 0.0) {
          loss += profile.alpha *
                  similarity_regularizer(out.probabilities, ref.probabilities);
        }
        if (profile.beta != 0.0) {
          loss += profile.beta *
                  orthogonal_regularizer(out.expert_activations, ref.expert_activations);
        }
        return loss;
      };
      GradCheckReport check = grad_check(params, loss_fn, analytic);
      *profile.slot = std::max(*profile.slot, check.max_relative_error);
    }
  }
  return report;
}

}  // namespace shadowpool
