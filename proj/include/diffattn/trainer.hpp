#pragma once

// RMSProp training of the attention models and held-out evaluation.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffattn/dataset.hpp"
#include "diffattn/exemplar.hpp"
#include "diffattn/model.hpp"

namespace diffattn {

// How the metric-loss gradient reaches the parameters.
//   Joint: one step on grad(CE + nu * metric) with the classification optimizer.
//   Alternate: a classification step on grad(CE), then a step on grad(nu * metric) with the
//   triplet optimizer (its own learning rate, decay and state).
enum class NuMode { Joint, Alternate };

struct TrainConfig {
  double lr_cls = 4e-4;
  double lr_triplet = 1e-3;
  std::size_t batch = 200;
  double rms_alpha_cls = 0.99;
  double rms_alpha_triplet = 0.9;
  double rms_eps = 1e-8;
  double decay_a = 1500;
  double decay_b = 1250;
  double nu = 10.0;
  double alpha = 0.2;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  ModelKind model = ModelKind::Dan;
  std::size_t k_exemplars = 1;
  std::size_t hidden = 64;
  std::size_t opposing_offset = 20;
  double holdout = 0.2;
  bool random_exemplars = false;  // ablation: exemplars drawn uniformly from the training set
  NuMode nu_mode = NuMode::Joint;
  MetricLoss metric = MetricLoss::Triplet;
  QuintupletConfig quintuplet;
  std::size_t quintuplet_pool = 100;
  bool scale_cross_entropy = true;
  bool dcn_scaled_ce = false;
  DcnOptions dcn;
  DcnScaling learned_scaling = DcnScaling::Diagonal;

  void validate() const;
  LossSpec loss_spec() const;
};

// Running mean-square accumulators, one matrix per parameter block.
struct RmsState {
  std::vector<Matrix> mean_sq;

  static RmsState zeros_for(const ModelParams& p);
};

// state = alpha*state + (1-alpha)*grad^2;  param -= lr*grad/(sqrt(state)+eps)
void rmsprop_step(std::span<double> param, std::span<const double> grad, std::span<double> state,
                  double lr, double alpha, double eps);
// Applies the step to every trainable block.
void rmsprop_step(ModelParams& params, const ModelParams& grad, RmsState& state, double lr,
                  double alpha, double eps);

// exp(ln(0.1) / (a*b)), the per-epoch learning-rate multiplier.
double decay_factor(double a, double b);

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;     // top-1 against the training label
  double triplet_sat = 0.0;  // fraction of items whose metric margins all hold
  double rank_corr = 0.0;    // mean over items with a reference map
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochStats> history;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::size_t batch, const std::string& detail);
  std::size_t epoch;
  std::size_t batch;
};

// Position of every item id in the dataset.
std::vector<std::size_t> item_positions(const Dataset& ds);

// Trains on the non-held-out split; the index must cover every training item.
TrainResult train(const Dataset& ds, const ExemplarIndex& index, const TrainConfig& cfg);

std::string history_csv(const std::vector<EpochStats>& history);

struct EvalConfig {
  std::size_t k_exemplars = 1;
  std::size_t opposing_offset = 20;
  bool random_exemplars = false;
  std::uint64_t seed = 0;
  LossSpec loss;
  std::size_t threads = 0;  // 0: DIFFATTN_THREADS or 1
};

struct EvalItem {
  std::size_t position = 0;
  std::size_t predicted = 0;
  double accuracy = 0.0;
  double rank_corr = 0.0;  // NaN without a reference map
  AttentionMap target_map, support_map, oppose_map, final_map;
};

struct EvalResult {
  double accuracy = 0.0;   // mean VQA accuracy
  double rank_corr = 0.0;  // mean over items with a reference map
  std::size_t n_items = 0;
  std::size_t n_ranked = 0;
  std::vector<double> class_accuracy;  // by true answer class
  std::vector<EvalItem> items;
};

EvalConfig eval_config_from(const TrainConfig& cfg);

// Evaluates the given dataset positions. Items stored in the index use their stored
// neighbours (self excluded); others are matched by their joint embedding.
EvalResult evaluate(const Dataset& ds, const ExemplarIndex& index, const ModelParams& params,
                    std::span<const std::size_t> positions, const EvalConfig& cfg);

// Thread count from DIFFATTN_THREADS, clamped to at least 1.
std::size_t env_threads();

}  // namespace diffattn
