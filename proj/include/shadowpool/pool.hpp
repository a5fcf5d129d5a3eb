#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "shadowpool/cost.hpp"
#include "shadowpool/dataset.hpp"
#include "shadowpool/gradcheck.hpp"
#include "shadowpool/mapping.hpp"
#include "shadowpool/nn.hpp"
#include "shadowpool/optim.hpp"
#include "shadowpool/scores.hpp"

namespace shadowpool {

inline constexpr size_t kDefaultPathwayCap = 1u << 16;

// Shared architecture of the pool and of every standalone model derived
// from it: stem -> L expert blocks -> head. Hidden layers are ReLU; the
// final head layer (width = classes) is Identity and feeds softmax.
struct PoolArchitecture {
  size_t input_dim = 0;
  std::vector<size_t> stem_widths;    // hidden widths of the shared stem
  size_t expert_layers = 1;           // L
  size_t experts_per_layer = 2;       // M
  std::vector<size_t> expert_widths;  // widths inside one expert block
  std::vector<size_t> head_widths;    // hidden widths before the class layer
  size_t classes = 2;

  size_t stem_out() const { return stem_widths.empty() ? input_dim : stem_widths.back(); }

  void validate() const {
    if (input_dim < 1 || classes < 2) {
      throw InputError("PoolArchitecture: need input_dim >= 1 and classes >= 2");
    }
    // M = 1 is a degenerate single-pathway pool, allowed for equivalence
    // checks; real configurations require M >= 2 (enforced at config level).
    if (expert_layers < 1 || experts_per_layer < 1) {
      throw InputError("PoolArchitecture: need L >= 1 and M >= 1");
    }
    if (expert_widths.empty()) throw InputError("PoolArchitecture: expert block is empty");
    if (expert_widths.back() != stem_out()) {
      throw ShapeError("PoolArchitecture: expert output width must equal its input width");
    }
  }

  size_t pathway_count() const {
    size_t n = 1;
    for (size_t l = 0; l < expert_layers; ++l) n *= experts_per_layer;
    return n;
  }

  // LinearLayers in one end-to-end stack (stem + L expert blocks + head).
  size_t stack_depth() const {
    return stem_widths.size() + expert_layers * expert_widths.size() + head_widths.size() + 1;
  }
};

// Index sequence of activated experts, one per expert layer.
struct Pathway {
  std::vector<int> experts;

  bool operator==(const Pathway&) const = default;
};

inline std::vector<Pathway> enumerate_pathways(size_t experts_per_layer, size_t expert_layers,
                                               size_t cap = kDefaultPathwayCap) {
  size_t total = 1;
  for (size_t l = 0; l < expert_layers; ++l) {
    total *= experts_per_layer;
    if (total > cap) throw ResourceError("enumerate_pathways: M^L exceeds enumeration cap");
  }
  std::vector<Pathway> pathways(total);
  for (size_t w = 0; w < total; ++w) {
    Pathway p;
    p.experts.assign(expert_layers, 0);
    size_t rest = w;
    for (size_t l = expert_layers; l-- > 0;) {
      p.experts[l] = static_cast<int>(rest % experts_per_layer);
      rest /= experts_per_layer;
    }
    pathways[w] = std::move(p);
  }
  return pathways;
}

inline size_t pathway_index(const Pathway& p, size_t experts_per_layer) {
  size_t w = 0;
  for (int e : p.experts) {
    if (e < 0 || static_cast<size_t>(e) >= experts_per_layer) {
      throw InputError("pathway_index: expert index out of range");
    }
    w = w * experts_per_layer + static_cast<size_t>(e);
  }
  return w;
}

inline Pathway pathway_from_index(size_t w, size_t experts_per_layer, size_t expert_layers) {
  Pathway p;
  p.experts.assign(expert_layers, 0);
  for (size_t l = expert_layers; l-- > 0;) {
    p.experts[l] = static_cast<int>(w % experts_per_layer);
    w /= experts_per_layer;
  }
  return p;
}

struct EpochLog {
  size_t epoch = 0;
  double mean_loss = 0.0;
  double mean_ce = 0.0;
};

// The MoE shadow pool: shared stem and head, an L×M grid of experts, the
// data-to-pathway mapping, and (after alignment) the served pathway set.
struct Pool {
  PoolArchitecture arch;
  std::vector<LinearLayer> stem;
  std::vector<std::vector<std::vector<LinearLayer>>> experts;  // [L][M][block layer]
  std::vector<LinearLayer> head;
  MappingMatrix mapping;
  std::vector<size_t> aligned_set;  // pathway indices, selection order
  std::vector<int64_t> dq_ids;      // sorted
  std::vector<EpochLog> training_log;
  uint64_t init_seed = 0;

  bool is_aligned(size_t w) const {
    return std::find(aligned_set.begin(), aligned_set.end(), w) != aligned_set.end();
  }
};

namespace detail {

inline std::vector<LinearLayer> make_block(size_t in, std::span<const size_t> widths,
                                           std::optional<size_t> final_width,
                                           Activation final_act, RandomSource& rng) {
  std::vector<LinearLayer> block;
  size_t current = in;
  for (size_t w : widths) {
    block.push_back(make_layer(current, w, Activation::kReLU, rng));
    current = w;
  }
  if (final_width) {
    block.push_back(make_layer(current, *final_width, final_act, rng));
  }
  return block;
}

}  // namespace detail

inline Pool build_pool(const PoolArchitecture& arch, uint64_t seed) {
  arch.validate();
  Pool pool;
  pool.arch = arch;
  pool.init_seed = seed;
  RandomSource root(seed);
  {
    RandomSource rng = root.stream("init-stem");
    pool.stem = detail::make_block(arch.input_dim, arch.stem_widths, std::nullopt,
                                   Activation::kReLU, rng);
  }
  pool.experts.resize(arch.expert_layers);
  for (size_t l = 0; l < arch.expert_layers; ++l) {
    pool.experts[l].resize(arch.experts_per_layer);
    for (size_t m = 0; m < arch.experts_per_layer; ++m) {
      RandomSource rng =
          root.stream("init-expert-" + std::to_string(l) + "-" + std::to_string(m));
      pool.experts[l][m] = detail::make_block(arch.stem_out(), arch.expert_widths, std::nullopt,
                                              Activation::kReLU, rng);
    }
  }
  {
    RandomSource rng = root.stream("init-head");
    pool.head = detail::make_block(arch.stem_out(), arch.head_widths, arch.classes,
                                   Activation::kIdentity, rng);
  }
  return pool;
}

namespace detail {

// Flattened view of the layers a pathway activates, plus bookkeeping for
// hidden-activation losses and sparse optimizer updates.
struct PathwayStack {
  LayerStack layers;
  std::vector<size_t> expert_end;   // stack index of each expert block's last layer
  std::vector<size_t> param_slots;  // global slot index per (weight|bias) in stack order
};

inline size_t slots_per_block(const std::vector<LinearLayer>& block) { return block.size() * 2; }

// Global slot order: stem, experts row-major by (layer, index), head.
inline PathwayStack assemble_pathway(const Pool& pool, const Pathway& pathway) {
  const PoolArchitecture& arch = pool.arch;
  if (pathway.experts.size() != arch.expert_layers) {
    throw InputError("pathway: length differs from expert layer count");
  }
  PathwayStack stack;
  size_t slot = 0;
  for (size_t i = 0; i < pool.stem.size(); ++i) {
    stack.layers.push_back(&pool.stem[i]);
    stack.param_slots.push_back(slot + 2 * i);
    stack.param_slots.push_back(slot + 2 * i + 1);
  }
  slot += slots_per_block(pool.stem);
  const size_t per_expert = arch.expert_widths.size() * 2;
  for (size_t l = 0; l < arch.expert_layers; ++l) {
    const int m = pathway.experts[l];
    if (m < 0 || static_cast<size_t>(m) >= arch.experts_per_layer) {
      throw InputError("pathway: expert index out of range at layer " + std::to_string(l));
    }
    const size_t block_slot = slot + (l * arch.experts_per_layer + static_cast<size_t>(m)) * per_expert;
    const auto& block = pool.experts[l][static_cast<size_t>(m)];
    for (size_t i = 0; i < block.size(); ++i) {
      stack.layers.push_back(&block[i]);
      stack.param_slots.push_back(block_slot + 2 * i);
      stack.param_slots.push_back(block_slot + 2 * i + 1);
    }
    stack.expert_end.push_back(stack.layers.size() - 1);
  }
  slot += arch.expert_layers * arch.experts_per_layer * per_expert;
  for (size_t i = 0; i < pool.head.size(); ++i) {
    stack.layers.push_back(&pool.head[i]);
    stack.param_slots.push_back(slot + 2 * i);
    stack.param_slots.push_back(slot + 2 * i + 1);
  }
  return stack;
}

inline std::vector<ParamRef> pool_params(Pool& pool) {
  std::vector<ParamRef> refs;
  auto add_block = [&refs](std::vector<LinearLayer>& block) {
    for (LinearLayer& layer : block) {
      refs.push_back({&layer.weight.values, false});
      refs.push_back({&layer.bias, true});
    }
  };
  add_block(pool.stem);
  for (auto& layer_row : pool.experts) {
    for (auto& block : layer_row) add_block(block);
  }
  add_block(pool.head);
  return refs;
}

// Mutable references for the layers of one pathway, in stack order.
inline std::vector<ParamRef> pathway_params(Pool& pool, const Pathway& pathway) {
  std::vector<ParamRef> refs;
  auto add_block = [&refs](std::vector<LinearLayer>& block) {
    for (LinearLayer& layer : block) {
      refs.push_back({&layer.weight.values, false});
      refs.push_back({&layer.bias, true});
    }
  };
  add_block(pool.stem);
  for (size_t l = 0; l < pool.arch.expert_layers; ++l) {
    add_block(pool.experts[l][static_cast<size_t>(pathway.experts[l])]);
  }
  add_block(pool.head);
  return refs;
}

}  // namespace detail

// Forward through the stem, the one activated expert per layer, and the head.
// H holds each activated expert block's post-activation output.
struct PathwayOutput {
  Matrix probabilities;
  Matrix logits;
  std::vector<Matrix> expert_activations;  // length L
};

inline PathwayOutput pathway_forward(const Pool& pool, const Pathway& pathway, const Matrix& x,
                                     GradientTape* tape = nullptr,
                                     CostLedger* ledger = nullptr,
                                     const std::string& run_id = {}) {
  if (x.cols != pool.arch.input_dim) throw ShapeError("pathway_forward: input width mismatch");
  const detail::PathwayStack stack = detail::assemble_pathway(pool, pathway);
  GradientTape local;
  GradientTape& t = tape ? *tape : local;
  Matrix logits = forward_stack(stack.layers, x, &t);
  PathwayOutput out;
  out.logits = logits;
  out.probabilities = softmax(logits);
  out.expert_activations.reserve(stack.expert_end.size());
  for (size_t pos : stack.expert_end) out.expert_activations.push_back(t.outputs[pos]);
  if (ledger) ledger->add_forward(run_id, stack.layers.size(), x.rows);
  return out;
}

// Eq-style similarity penalty: the negative symmetric KL between the two
// pathways' prediction rows, averaged over the batch. Always <= 0.
inline double similarity_regularizer(const Matrix& p1, const Matrix& p2) {
  if (!p1.same_shape(p2)) throw ShapeError("similarity_regularizer: shape mismatch");
  double total = 0.0;
  for (size_t i = 0; i < p1.rows; ++i) {
    total += -0.5 * (kl_divergence(p1.row(i), p2.row(i)) + kl_divergence(p2.row(i), p1.row(i)));
  }
  return total / static_cast<double>(p1.rows);
}

// Magnitude of the per-layer inner products between the two pathways'
// expert outputs, summed over layers, averaged over the batch. >= 0.
inline double orthogonal_regularizer(const std::vector<Matrix>& h1,
                                     const std::vector<Matrix>& h2) {
  if (h1.size() != h2.size()) throw ShapeError("orthogonal_regularizer: layer count mismatch");
  if (h1.empty()) return 0.0;
  const size_t batch = h1[0].rows;
  double total = 0.0;
  for (size_t l = 0; l < h1.size(); ++l) {
    if (!h1[l].same_shape(h2[l])) {
      throw ShapeError("orthogonal_regularizer: width mismatch at layer " + std::to_string(l));
    }
    for (size_t i = 0; i < batch; ++i) {
      total += std::fabs(dot(h1[l].row(i), h2[l].row(i)));
    }
  }
  return total / static_cast<double>(batch);
}

struct PoolTrainConfig {
  double alpha = 0.05;
  double beta = 0.01;
  size_t epochs = 1;
  size_t batch_size = 32;
  SgdConfig sgd;  // total_steps is filled in by train_pool
  uint64_t seed = 0;

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) {
      throw InputError("PoolTrainConfig: alpha and beta must be finite and >= 0");
    }
    if (batch_size < 1) throw InputError("PoolTrainConfig: batch size must be >= 1");
  }
};

struct PoolBatchLoss {
  double total = 0.0;
  double ce = 0.0;
  double sr = 0.0;
  double orth = 0.0;
};

namespace detail {

// Gradient of the composite batch loss w.r.t. the activated pathway's
// logits, plus injected gradients at its expert outputs. The reference
// pathway's outputs are constants.
struct PoolLossBackward {
  PoolBatchLoss loss;
  Matrix logit_grad;
  std::map<size_t, Matrix> injections;  // stack position -> gradient
};

inline PoolLossBackward pool_loss_backward(const PathwayOutput& active,
                                           const PathwayOutput& reference,
                                           const PathwayStack& stack,
                                           std::span<const int> labels, double alpha,
                                           double beta) {
  PoolLossBackward out;
  const Matrix& p1 = active.probabilities;
  const Matrix& p2 = reference.probabilities;
  const double batch = static_cast<double>(p1.rows);

  out.loss.ce = cross_entropy(p1, labels);
  out.logit_grad = cross_entropy_logit_grad(p1, labels);

  if (alpha != 0.0) {
    out.loss.sr = similarity_regularizer(p1, p2);
    // d/dp1 of -(KL(p1||p2) + KL(p2||p1))/2, batch-averaged.
    Matrix prob_grad(p1.rows, p1.cols);
    for (size_t i = 0; i < p1.rows; ++i) {
      for (size_t j = 0; j < p1.cols; ++j) {
        const double pi = std::max(p1.at(i, j), kProbClamp);
        const double qi = std::max(p2.at(i, j), kProbClamp);
        const double d_kl_pq = std::log(pi) - std::log(qi) + 1.0;
        const double d_kl_qp = -qi / pi;
        prob_grad.at(i, j) = -0.5 * (d_kl_pq + d_kl_qp) * alpha / batch;
      }
    }
    Matrix sr_logit_grad = softmax_backward(p1, prob_grad);
    for (size_t k = 0; k < out.logit_grad.values.size(); ++k) {
      out.logit_grad.values[k] += sr_logit_grad.values[k];
    }
  }

  if (beta != 0.0) {
    out.loss.orth = orthogonal_regularizer(active.expert_activations,
                                           reference.expert_activations);
    for (size_t l = 0; l < active.expert_activations.size(); ++l) {
      const Matrix& h1 = active.expert_activations[l];
      const Matrix& h2 = reference.expert_activations[l];
      Matrix grad(h1.rows, h1.cols);
      for (size_t i = 0; i < h1.rows; ++i) {
        const double inner = dot(h1.row(i), h2.row(i));
        const double sign = inner > 0.0 ? 1.0 : (inner < 0.0 ? -1.0 : 0.0);
        const double scale = beta * sign / batch;
        for (size_t j = 0; j < h1.cols; ++j) grad.at(i, j) = scale * h2.at(i, j);
      }
      out.injections.emplace(stack.expert_end[l], std::move(grad));
    }
  }

  out.loss.total = out.loss.ce + alpha * out.loss.sr + beta * out.loss.orth;
  return out;
}

}  // namespace detail

// Composite batch loss for one (activated, reference) pathway pair.
// Evaluation only; used by tests and diagnostics.
inline PoolBatchLoss pool_batch_loss(const Pool& pool, const Pathway& active,
                                     const Pathway& reference, const Matrix& x,
                                     std::span<const int> labels, double alpha, double beta) {
  const PathwayOutput out1 = pathway_forward(pool, active, x);
  const PathwayOutput out2 = pathway_forward(pool, reference, x);
  PoolBatchLoss loss;
  loss.ce = cross_entropy(out1.probabilities, labels);
  loss.sr = similarity_regularizer(out1.probabilities, out2.probabilities);
  loss.orth = orthogonal_regularizer(out1.expert_activations, out2.expert_activations);
  loss.total = loss.ce + alpha * loss.sr + beta * loss.orth;
  return loss;
}

// Pathway-pair training: minibatches are grouped by the mapped pathway;
// a distinct reference pathway is redrawn every iteration and treated as
// a constant. Gradients reach only the activated pathway's experts, the
// stem, and the head.
inline void train_pool(Pool& pool, const Dataset& d_tr, const PoolTrainConfig& cfg,
                       CostLedger* ledger = nullptr, const std::string& run_id = "pool") {
  cfg.validate();
  if (pool.mapping.n_pathways != pool.arch.pathway_count()) {
    throw StateError("train_pool: mapping not built for this pool");
  }
  for (int64_t id : d_tr.ids) {
    if (!pool.mapping.contains(id)) {
      throw StateError("train_pool: unmapped example id " + std::to_string(id));
    }
  }

  RandomSource root(cfg.seed);
  RandomSource order_rng = root.stream("batch-order");
  RandomSource ref_rng = root.stream("reference-pathway");

  // Row lookup by id.
  std::unordered_map<int64_t, size_t> row_of;
  row_of.reserve(d_tr.size());
  for (size_t i = 0; i < d_tr.size(); ++i) row_of.emplace(d_tr.ids[i], i);

  const size_t n_pathways = pool.mapping.n_pathways;
  const std::vector<Pathway> pathways =
      enumerate_pathways(pool.arch.experts_per_layer, pool.arch.expert_layers);

  // One batch list per epoch: (pathway, rows), shuffled across pathways.
  struct BatchSpec {
    size_t pathway = 0;
    std::vector<size_t> rows;
  };
  std::vector<BatchSpec> epoch_batches;
  for (size_t w = 0; w < n_pathways; ++w) {
    const auto& ids = pool.mapping.pathway_ids[w];
    for (size_t start = 0; start < ids.size(); start += cfg.batch_size) {
      BatchSpec spec;
      spec.pathway = w;
      const size_t stop = std::min(ids.size(), start + cfg.batch_size);
      for (size_t k = start; k < stop; ++k) {
        auto it = row_of.find(ids[k]);
        if (it != row_of.end()) spec.rows.push_back(it->second);
      }
      if (!spec.rows.empty()) epoch_batches.push_back(std::move(spec));
    }
  }
  if (epoch_batches.empty()) throw StateError("train_pool: no mapped examples in dataset");

  SgdConfig sgd_cfg = cfg.sgd;
  sgd_cfg.total_steps = std::max<size_t>(1, cfg.epochs * epoch_batches.size());
  std::vector<ParamRef> all_params = detail::pool_params(pool);
  SgdState state = SgdState::make(sgd_cfg, all_params);

  size_t step = 0;
  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(epoch_batches);
    double loss_sum = 0.0;
    double ce_sum = 0.0;
    for (const BatchSpec& spec : epoch_batches) {
      // Gather the batch.
      Matrix x(spec.rows.size(), d_tr.dim());
      std::vector<int> labels(spec.rows.size());
      for (size_t i = 0; i < spec.rows.size(); ++i) {
        const size_t r = spec.rows[i];
        for (size_t j = 0; j < d_tr.dim(); ++j) x.at(i, j) = d_tr.features.at(r, j);
        labels[i] = d_tr.labels[r];
      }

      const Pathway& active = pathways[spec.pathway];
      size_t ref_index = ref_rng.below(n_pathways - 1);
      if (ref_index >= spec.pathway) ++ref_index;  // uniform over the other pathways
      const Pathway& reference = pathways[ref_index];

      const detail::PathwayStack stack = detail::assemble_pathway(pool, active);
      GradientTape tape;
      PathwayOutput out1 = pathway_forward(pool, active, x, &tape, ledger, run_id);
      PathwayOutput out2 = pathway_forward(pool, reference, x, nullptr, ledger, run_id);

      detail::PoolLossBackward back =
          detail::pool_loss_backward(out1, out2, stack, labels, cfg.alpha, cfg.beta);
      StackGradients grads = backward_stack(stack.layers, tape, back.logit_grad,
                                            back.injections.empty() ? nullptr : &back.injections);
      if (ledger) ledger->add_backward(run_id, stack.layers.size(), x.rows);

      std::vector<ParamRef> params = detail::pathway_params(pool, active);
      std::vector<const std::vector<double>*> grad_ptrs = grad_slots(grads);
      sgd_step(params, grad_ptrs, state, stack.param_slots, step);
      if (ledger) ledger->add_update(run_id);
      ++step;

      loss_sum += back.loss.total;
      ce_sum += back.loss.ce;
    }
    pool.training_log.push_back({epoch, loss_sum / static_cast<double>(epoch_batches.size()),
                                 ce_sum / static_cast<double>(epoch_batches.size())});
  }
}

// Selects n distinct pathways and fine-tunes each on D_q with plain CE,
// sequentially and in place. One optimizer state and one cosine schedule
// span all n passes; the schedule must not restart per pathway, or each
// pass re-centers the shared stem and head on itself alone.
inline void align_pathways(Pool& pool, const Dataset& d_q, size_t n, size_t ft_epochs,
                           const SgdConfig& sgd_cfg, size_t batch_size, RandomSource& rng,
                           CostLedger* ledger = nullptr, const std::string& run_id = "align") {
  const size_t n_pathways = pool.arch.pathway_count();
  if (n > n_pathways) throw InputError("align_pathways: n exceeds pathway count");
  if (batch_size < 1) throw InputError("align_pathways: batch size must be >= 1");

  const std::vector<size_t> selected = rng.sample_without_replacement(n_pathways, n);
  pool.aligned_set.assign(selected.begin(), selected.end());
  pool.dq_ids = d_q.ids;
  std::sort(pool.dq_ids.begin(), pool.dq_ids.end());
  if (ft_epochs == 0 || d_q.size() == 0) return;

  const size_t batches_per_epoch = (d_q.size() + batch_size - 1) / batch_size;
  SgdConfig ft_cfg = sgd_cfg;
  ft_cfg.total_steps = std::max<size_t>(1, n * ft_epochs * batches_per_epoch);
  std::vector<ParamRef> all_params = detail::pool_params(pool);
  SgdState state = SgdState::make(ft_cfg, all_params);

  std::vector<size_t> order(d_q.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  size_t step = 0;
  for (size_t w : selected) {
    const Pathway pathway =
        pathway_from_index(w, pool.arch.experts_per_layer, pool.arch.expert_layers);
    const detail::PathwayStack stack = detail::assemble_pathway(pool, pathway);
    std::vector<ParamRef> params = detail::pathway_params(pool, pathway);

    for (size_t epoch = 0; epoch < ft_epochs; ++epoch) {
      rng.shuffle(order);
      for (size_t start = 0; start < order.size(); start += batch_size) {
        const size_t stop = std::min(order.size(), start + batch_size);
        Matrix x(stop - start, d_q.dim());
        std::vector<int> labels(stop - start);
        for (size_t i = start; i < stop; ++i) {
          const size_t r = order[i];
          for (size_t j = 0; j < d_q.dim(); ++j) x.at(i - start, j) = d_q.features.at(r, j);
          labels[i - start] = d_q.labels[r];
        }
        GradientTape tape;
        Matrix logits = forward_stack(stack.layers, x, &tape);
        Matrix probs = softmax(logits);
        Matrix logit_grad = cross_entropy_logit_grad(probs, labels);
        StackGradients grads = backward_stack(stack.layers, tape, logit_grad);
        std::vector<const std::vector<double>*> grad_ptrs = grad_slots(grads);
        sgd_step(params, grad_ptrs, state, stack.param_slots, step);
        ++step;
        if (ledger) {
          ledger->add_forward(run_id, stack.layers.size(), x.rows);
          ledger->add_backward(run_id, stack.layers.size(), x.rows);
          ledger->add_update(run_id);
        }
      }
    }
  }
}

// Mean pairwise |cos| between same-layer expert activations on a probe
// batch. Experts at each layer share a common input: the ensemble mean of
// the previous layer's expert outputs, seeded by the stem.
inline double mean_expert_cos_similarity(const Pool& pool, const Matrix& probe) {
  if (probe.cols != pool.arch.input_dim) {
    throw ShapeError("mean_expert_cos_similarity: input width mismatch");
  }
  LayerStack stem_stack;
  for (const auto& l : pool.stem) stem_stack.push_back(&l);
  Matrix current = stem_stack.empty() ? probe : forward_stack(stem_stack, probe);

  const size_t M = pool.arch.experts_per_layer;
  double total = 0.0;
  size_t pairs = 0;
  for (size_t l = 0; l < pool.arch.expert_layers; ++l) {
    std::vector<Matrix> outputs(M);
    for (size_t m = 0; m < M; ++m) {
      LayerStack block;
      for (const auto& layer : pool.experts[l][m]) block.push_back(&layer);
      outputs[m] = forward_stack(block, current);
    }
    for (size_t a = 0; a < M; ++a) {
      for (size_t b = a + 1; b < M; ++b) {
        for (size_t r = 0; r < probe.rows; ++r) {
          const double na = norm2(outputs[a].row(r));
          const double nb = norm2(outputs[b].row(r));
          if (na > 0.0 && nb > 0.0) {
            total += std::fabs(dot(outputs[a].row(r), outputs[b].row(r))) / (na * nb);
            ++pairs;
          }
        }
      }
    }
    // ensemble-mean propagation to the next layer
    Matrix mean(outputs[0].rows, outputs[0].cols);
    for (const Matrix& o : outputs) {
      for (size_t k = 0; k < mean.values.size(); ++k) mean.values[k] += o.values[k];
    }
    for (double& v : mean.values) v /= static_cast<double>(M);
    current = std::move(mean);
  }
  return pairs > 0 ? total / static_cast<double>(pairs) : 0.0;
}

// Membership ground truth of an example w.r.t. one shared model: mapped to
// that pathway, or exposed to it through D_q fine-tuning.
inline bool member_of(const Pool& pool, int64_t id, size_t pathway_idx) {
  if (id < 0) throw InputError("member_of: invalid example id");
  if (pathway_idx >= pool.arch.pathway_count()) {
    throw InputError("member_of: pathway index out of range");
  }
  if (pool.mapping.contains(id) && pool.mapping.pathway_of(id) == pathway_idx) return true;
  if (pool.is_aligned(pathway_idx) &&
      std::binary_search(pool.dq_ids.begin(), pool.dq_ids.end(), id)) {
    return true;
  }
  return false;
}

// Read-only scoring of a query set by a list of shared models.
inline ScoreTable query_shared_models(const Pool& pool, std::span<const size_t> pathway_indices,
                                      const Dataset& queries, CostLedger* ledger = nullptr,
                                      const std::string& run_id = "query") {
  ScoreTable table = ScoreTable::make(pathway_indices.size(), queries.size(), pool.arch.classes);
  table.query_ids = queries.ids;
  table.labels = queries.labels;
  for (size_t m = 0; m < pathway_indices.size(); ++m) {
    const size_t w = pathway_indices[m];
    if (w >= pool.arch.pathway_count()) {
      throw InputError("query_shared_models: pathway index out of range");
    }
    table.model_ids[m] = "pathway:" + std::to_string(w);
    const Pathway pathway =
        pathway_from_index(w, pool.arch.experts_per_layer, pool.arch.expert_layers);
    const PathwayOutput out = pathway_forward(pool, pathway, queries.features, nullptr, ledger, run_id);
    for (size_t q = 0; q < queries.size(); ++q) {
      for (size_t c = 0; c < pool.arch.classes; ++c) {
        table.probs[table.cell(m, q, c)] = out.probabilities.at(q, c);
        table.logits[table.cell(m, q, c)] = out.logits.at(q, c);
      }
      table.member[table.cell(m, q)] = member_of(pool, queries.ids[q], w) ? 1 : 0;
    }
  }
  return table;
}

}  // namespace shadowpool
