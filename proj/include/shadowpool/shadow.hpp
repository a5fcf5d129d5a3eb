#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "shadowpool/cost.hpp"
#include "shadowpool/dataset.hpp"
#include "shadowpool/pool.hpp"

namespace shadowpool {

// A standalone model with the same end-to-end shape as one pool pathway:
// stem, L expert-shaped blocks, head. Used for the target model and for
// independently trained shadow models.
struct ShadowModel {
  PoolArchitecture arch;  // experts_per_layer only describes the pool this shape came from
  std::vector<LinearLayer> stem;
  std::vector<LinearLayer> middle;  // L expert-shaped blocks, flattened
  std::vector<LinearLayer> head;
  std::vector<int64_t> train_ids;
  uint64_t seed = 0;

  LayerStack layer_stack() const {
    LayerStack layers;
    for (const auto& l : stem) layers.push_back(&l);
    for (const auto& l : middle) layers.push_back(&l);
    for (const auto& l : head) layers.push_back(&l);
    return layers;
  }

  std::vector<ParamRef> params() {
    std::vector<ParamRef> refs;
    for (auto* block : {&stem, &middle, &head}) {
      for (LinearLayer& layer : *block) {
        refs.push_back({&layer.weight.values, false});
        refs.push_back({&layer.bias, true});
      }
    }
    return refs;
  }

  Matrix forward(const Matrix& x, GradientTape* tape = nullptr) const {
    return forward_stack(layer_stack(), x, tape);
  }

  Matrix predict_probs(const Matrix& x) const { return softmax(forward(x)); }
};

inline ShadowModel build_shadow_model(const PoolArchitecture& arch, uint64_t seed) {
  arch.validate();
  ShadowModel model;
  model.arch = arch;
  model.seed = seed;
  RandomSource root(seed);
  {
    RandomSource rng = root.stream("init-stem");
    model.stem = detail::make_block(arch.input_dim, arch.stem_widths, std::nullopt,
                                    Activation::kReLU, rng);
  }
  for (size_t l = 0; l < arch.expert_layers; ++l) {
    RandomSource rng = root.stream("init-middle-" + std::to_string(l));
    auto block = detail::make_block(arch.stem_out(), arch.expert_widths, std::nullopt,
                                    Activation::kReLU, rng);
    for (auto& layer : block) model.middle.push_back(std::move(layer));
  }
  {
    RandomSource rng = root.stream("init-head");
    model.head = detail::make_block(arch.stem_out(), arch.head_widths, arch.classes,
                                    Activation::kIdentity, rng);
  }
  return model;
}

// A pool pathway re-assembled as a standalone model (shared weights copied).
inline ShadowModel transplant_pathway(const Pool& pool, const Pathway& pathway) {
  ShadowModel model;
  model.arch = pool.arch;
  model.seed = pool.init_seed;
  model.stem = pool.stem;
  for (size_t l = 0; l < pool.arch.expert_layers; ++l) {
    const auto& block = pool.experts[l][static_cast<size_t>(pathway.experts[l])];
    for (const auto& layer : block) model.middle.push_back(layer);
  }
  model.head = pool.head;
  return model;
}

struct TrainConfig {
  size_t epochs = 1;
  size_t batch_size = 32;
  SgdConfig sgd;
  uint64_t seed = 0;
};

// Plain cross-entropy training with the shared optimizer and schedule.
inline void train_independent(ShadowModel& model, const Dataset& data, const TrainConfig& cfg,
                              CostLedger* ledger = nullptr, const std::string& run_id = "model") {
  if (cfg.batch_size < 1) throw InputError("train_independent: batch size must be >= 1");
  model.train_ids = data.ids;
  if (cfg.epochs == 0 || data.size() == 0) return;

  RandomSource rng = RandomSource(cfg.seed).stream("train-independent");
  const LayerStack layers = model.layer_stack();
  std::vector<ParamRef> params = model.params();

  const size_t batches_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  SgdConfig sgd_cfg = cfg.sgd;
  sgd_cfg.total_steps = std::max<size_t>(1, cfg.epochs * batches_per_epoch);
  SgdState state = SgdState::make(sgd_cfg, params);

  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  size_t step = 0;
  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t stop = std::min(order.size(), start + cfg.batch_size);
      Matrix x(stop - start, data.dim());
      std::vector<int> labels(stop - start);
      for (size_t i = start; i < stop; ++i) {
        const size_t r = order[i];
        for (size_t j = 0; j < data.dim(); ++j) x.at(i - start, j) = data.features.at(r, j);
        labels[i - start] = data.labels[r];
      }
      GradientTape tape;
      Matrix logits = forward_stack(layers, x, &tape);
      Matrix probs = softmax(logits);
      Matrix logit_grad = cross_entropy_logit_grad(probs, labels);
      StackGradients grads = backward_stack(layers, tape, logit_grad);
      std::vector<const std::vector<double>*> grad_ptrs = grad_slots(grads);
      sgd_step(params, grad_ptrs, state, step);
      ++step;
      if (ledger) {
        ledger->add_forward(run_id, layers.size(), x.rows);
        ledger->add_backward(run_id, layers.size(), x.rows);
        ledger->add_update(run_id);
      }
    }
  }
}

inline double accuracy(const ShadowModel& model, const Dataset& data) {
  if (data.size() == 0) throw InputError("accuracy: empty dataset");
  Matrix probs = model.predict_probs(data.features);
  size_t correct = 0;
  for (size_t i = 0; i < probs.rows; ++i) {
    size_t best = 0;
    for (size_t j = 1; j < probs.cols; ++j) {
      if (probs.at(i, j) > probs.at(i, best)) best = j;
    }
    if (static_cast<int>(best) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Neural-masking augmentation scope. FC targets the head layers; the
// conv-analog scope targets the middle expert-shaped blocks, which carry
// the bulk of the parameters here.
enum class MaskScope { kFullyConnected, kConvAnalog };

struct MaskSpec {
  MaskScope scope = MaskScope::kFullyConnected;
  double prune_probability = 0.1;
  uint64_t seed = 0;

  void validate() const {
    if (prune_probability < 0.0 || prune_probability > 1.0) {
      throw InputError("MaskSpec: prune probability must be in [0,1]");
    }
  }
};

inline std::string mask_scope_name(MaskScope scope) {
  return scope == MaskScope::kFullyConnected ? "fc" : "conv";
}

// W_aug = W ⊙ (1 - mask): each in-scope weight is zeroed independently
// with probability p. Biases and out-of-scope layers are untouched; the
// base model is left unmodified.
inline ShadowModel augment_model(const ShadowModel& base, const MaskSpec& spec) {
  spec.validate();
  ShadowModel augmented = base;
  RandomSource rng = RandomSource(spec.seed).stream("neural-mask");
  auto& scope_layers =
      spec.scope == MaskScope::kFullyConnected ? augmented.head : augmented.middle;
  for (LinearLayer& layer : scope_layers) {
    for (double& w : layer.weight.values) {
      if (rng.uniform() < spec.prune_probability) w = 0.0;
    }
  }
  return augmented;
}

// Guardrail on augmentation strength: the augmented model's test accuracy
// may not fall more than max_drop below the base model's.
inline bool augmentation_within_guardrail(const ShadowModel& base, const ShadowModel& augmented,
                                          const Dataset& test_data, double max_drop = 0.10) {
  return accuracy(base, test_data) - accuracy(augmented, test_data) <= max_drop;
}

// Scores a query set with a list of standalone models. Membership bits come
// from each model's training-id set.
inline ScoreTable query_models(std::span<const ShadowModel* const> models, const Dataset& queries,
                               CostLedger* ledger = nullptr, const std::string& run_id = "query") {
  if (models.empty()) throw InputError("query_models: no models");
  const size_t classes = models.front()->arch.classes;
  ScoreTable table = ScoreTable::make(models.size(), queries.size(), classes);
  table.query_ids = queries.ids;
  table.labels = queries.labels;
  for (size_t m = 0; m < models.size(); ++m) {
    const ShadowModel& model = *models[m];
    table.model_ids[m] = "model:" + std::to_string(m);
    Matrix logits = model.forward(queries.features);
    Matrix probs = softmax(logits);
    if (ledger) ledger->add_forward(run_id, model.layer_stack().size(), queries.size());
    std::vector<int64_t> sorted_ids = model.train_ids;
    std::sort(sorted_ids.begin(), sorted_ids.end());
    for (size_t q = 0; q < queries.size(); ++q) {
      for (size_t c = 0; c < classes; ++c) {
        table.probs[table.cell(m, q, c)] = probs.at(q, c);
        table.logits[table.cell(m, q, c)] = logits.at(q, c);
      }
      table.member[table.cell(m, q)] =
          std::binary_search(sorted_ids.begin(), sorted_ids.end(), queries.ids[q]) ? 1 : 0;
    }
  }
  return table;
}

}  // namespace shadowpool
