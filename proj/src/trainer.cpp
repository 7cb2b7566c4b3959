#include "diffattn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>
#include <unordered_map>

#include "diffattn/error.hpp"
#include "diffattn/metrics.hpp"

namespace diffattn {

namespace {

// Independent generator streams derived from one seed (splitmix64 finalizer).
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

enum Stream : std::uint64_t { kInit = 1, kShuffle = 2, kExemplars = 3, kEval = 4 };

std::vector<ItemId> random_ids(std::span<const ItemId> pool, ItemId target, std::size_t count,
                               Rng& rng) {
  if (pool.size() < count + 1) throw DomainError("too few items for random exemplars");
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<ItemId> out;
  while (out.size() < count) {
    const ItemId id = pool[pick(rng)];
    if (id != target && std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
  }
  return out;
}

struct Retrieval {
  std::size_t k = 1;
  std::size_t offset = 20;
  bool random = false;
  bool quintuplet = false;
  std::size_t quintuplet_pool = 100;
};

// Supports and opposes (dataset positions) for one item.
struct Exemplars {
  std::vector<std::size_t> supports;
  std::vector<std::size_t> opposes;
};

class ExemplarSource {
 public:
  ExemplarSource(const Dataset& ds, const ExemplarIndex& index, Retrieval r)
      : ds_(ds), index_(index), r_(r), pos_(item_positions(ds)) {
    for (ItemId id : index.kd.store().ids) {
      if (id >= pos_.size() || pos_[id] == kMissing) {
        throw DomainError("exemplar index refers to item " + std::to_string(id) +
                          " missing from the dataset");
      }
    }
  }

  Exemplars fetch(std::size_t position, Rng& rng) const {
    const DatasetItem& item = ds_.items[position];
    const bool stored = index_.kd.contains(item.id);
    std::vector<ItemId> sup;
    std::vector<ItemId> opp;
    if (r_.random) {
      const auto all = random_ids(index_.kd.store().ids, item.id, 2 * r_.k, rng);
      sup.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(r_.k));
      opp.assign(all.begin() + static_cast<std::ptrdiff_t>(r_.k), all.end());
    } else if (r_.quintuplet) {
      if (!stored) throw DomainError("quintuplet exemplars need a stored target");
      const Quintuplet q = pick_quintuplet(index_.kd, item.id, r_.quintuplet_pool, rng);
      sup = {q.p_plus, q.p_plusplus};
      opp = {q.n_minusminus, q.n_minus};
    } else {
      const ExemplarSet set =
          stored ? find_exemplars(index_, item.id, r_.k, r_.offset, rng)
                 : find_exemplars_for_point(index_, item.id, item.joint, r_.k, r_.offset, rng);
      sup = set.supports;
      opp = set.opposes;
    }
    Exemplars out;
    for (ItemId id : sup) out.supports.push_back(pos_[id]);
    for (ItemId id : opp) out.opposes.push_back(pos_[id]);
    return out;
  }

  static constexpr std::size_t kMissing = std::numeric_limits<std::size_t>::max();

 private:
  const Dataset& ds_;
  const ExemplarIndex& index_;
  Retrieval r_;
  std::vector<std::size_t> pos_;
};

Sample make_sample(const Dataset& ds, std::size_t position, const Exemplars* ex) {
  const DatasetItem& item = ds.items[position];
  Sample s;
  s.image = &item.image;
  s.question = item.question;
  s.label = item.answer;
  if (ex) {
    for (std::size_t p : ex->supports) s.supports.push_back(&ds.items[p].image);
    for (std::size_t p : ex->opposes) s.opposes.push_back(&ds.items[p].image);
  }
  return s;
}

void scale_grads(ModelParams& g, double k) {
  g.for_each_block([&](const char*, Matrix& m, bool) {
    for (double& x : m.flat()) x *= k;
  });
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_cls > 0.0) || !(lr_triplet > 0.0)) throw DomainError("learning rates must be positive");
  if (batch == 0) throw DomainError("batch must be at least 1");
  if (!(rms_alpha_cls >= 0.0 && rms_alpha_cls < 1.0) ||
      !(rms_alpha_triplet >= 0.0 && rms_alpha_triplet < 1.0)) {
    throw DomainError("RMSProp decay rates must be in [0,1)");
  }
  if (!(rms_eps > 0.0)) throw DomainError("RMSProp eps must be positive");
  if (!(decay_a > 0.0) || !(decay_b > 0.0)) throw DomainError("decay constants must be positive");
  if (!(nu >= 0.0) || !(alpha >= 0.0)) throw DomainError("nu and alpha must be non-negative");
  if (k_exemplars < 1 || k_exemplars > 5) throw DomainError("k_exemplars must be in 1..5");
  if (hidden == 0) throw DomainError("hidden width must be positive");
  if (!(holdout >= 0.0 && holdout < 1.0)) throw DomainError("holdout must be in [0,1)");
}

LossSpec TrainConfig::loss_spec() const {
  LossSpec s;
  s.nu = nu;
  s.alpha = alpha;
  s.metric = metric;
  s.quintuplet = quintuplet;
  s.scale_cross_entropy = scale_cross_entropy;
  s.dcn_scaled_ce = dcn_scaled_ce;
  s.dcn = dcn;
  return s;
}

RmsState RmsState::zeros_for(const ModelParams& p) {
  RmsState s;
  p.for_each_block(
      [&](const char*, const Matrix& m, bool) { s.mean_sq.emplace_back(m.rows(), m.cols()); });
  return s;
}

void rmsprop_step(std::span<double> param, std::span<const double> grad, std::span<double> state,
                  double lr, double alpha, double eps) {
  if (param.size() != grad.size() || param.size() != state.size()) {
    throw ShapeError("rmsprop_step: param, grad and state lengths differ (" +
                     std::to_string(param.size()) + ", " + std::to_string(grad.size()) + ", " +
                     std::to_string(state.size()) + ")");
  }
  for (double g : grad) {
    if (std::isnan(g)) throw NumericError("rmsprop_step: NaN gradient");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    state[i] = alpha * state[i] + (1.0 - alpha) * grad[i] * grad[i];
    param[i] -= lr * grad[i] / (std::sqrt(state[i]) + eps);
  }
}

void rmsprop_step(ModelParams& params, const ModelParams& grad, RmsState& state, double lr,
                  double alpha, double eps) {
  std::vector<const Matrix*> grads;
  grad.for_each_block([&](const char*, const Matrix& m, bool) { grads.push_back(&m); });
  if (grads.size() != state.mean_sq.size()) throw ShapeError("rmsprop_step: state does not match");
  std::size_t i = 0;
  params.for_each_block([&](const char* name, Matrix& m, bool trainable) {
    if (grads[i]->rows() != m.rows() || grads[i]->cols() != m.cols()) {
      throw ShapeError(std::string("rmsprop_step: gradient shape mismatch in ") + name);
    }
    if (trainable) rmsprop_step(m.flat(), grads[i]->flat(), state.mean_sq[i].flat(), lr, alpha, eps);
    ++i;
  });
}

double decay_factor(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw DomainError("decay_factor: a and b must be positive");
  // 0.1^(1/ab) == exp(ln 0.1 / ab); pow is exact at ab == 1
  return std::pow(0.1, 1.0 / (a * b));
}

TrainingDiverged::TrainingDiverged(std::size_t e, std::size_t b, const std::string& detail)
    : std::runtime_error("training diverged at epoch " + std::to_string(e) + ", batch " +
                         std::to_string(b) + ": " + detail),
      epoch(e),
      batch(b) {}

std::vector<std::size_t> item_positions(const Dataset& ds) {
  ItemId max_id = 0;
  for (const auto& it : ds.items) max_id = std::max(max_id, it.id);
  std::vector<std::size_t> pos(ds.items.empty() ? 0 : std::size_t{max_id} + 1,
                               ExemplarSource::kMissing);
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    if (pos[ds.items[i].id] != ExemplarSource::kMissing) {
      throw DomainError("duplicate item id " + std::to_string(ds.items[i].id));
    }
    pos[ds.items[i].id] = i;
  }
  return pos;
}

TrainResult train(const Dataset& ds, const ExemplarIndex& index, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.items.empty()) throw DomainError("train: empty dataset");
  const Split split = holdout_split(ds.size(), cfg.holdout);
  if (split.train.empty()) throw DomainError("train: no training items");
  const bool exemplars = uses_exemplars(cfg.model);
  if (exemplars) {
    for (std::size_t p : split.train) {
      if (!index.kd.contains(ds.items[p].id)) {
        throw DomainError("train: exemplar index does not cover training item " +
                          std::to_string(ds.items[p].id));
      }
    }
  }
  const bool quint = cfg.model == ModelKind::Dan && cfg.metric == MetricLoss::Quintuplet;
  const ExemplarSource source(ds, index,
                              {cfg.k_exemplars, cfg.opposing_offset, cfg.random_exemplars, quint,
                               cfg.quintuplet_pool});
  const LossSpec spec = cfg.loss_spec();

  Rng init_rng(stream_seed(cfg.seed, kInit));
  Rng shuffle_rng(stream_seed(cfg.seed, kShuffle));
  Rng exemplar_rng(stream_seed(cfg.seed, kExemplars));

  TrainResult out;
  const ModelShape shape{ds.header.regions, ds.header.dim, cfg.hidden, ds.header.classes,
                         cfg.learned_scaling};
  out.params = init_model(cfg.model, shape, init_rng);
  ModelParams& params = out.params;
  RmsState cls_state = RmsState::zeros_for(params);
  RmsState metric_state = RmsState::zeros_for(params);
  const bool alternate = cfg.nu_mode == NuMode::Alternate && cfg.model == ModelKind::Dan;
  double lr_cls = cfg.lr_cls;
  double lr_metric = cfg.lr_triplet;
  const double decay = decay_factor(cfg.decay_a, cfg.decay_b);

  std::vector<std::size_t> order = split.train;
  std::vector<Exemplars> ex(ds.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (exemplars) {
      for (std::size_t p : split.train) ex[p] = source.fetch(p, exemplar_rng);
    }
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochStats st;
    st.epoch = epoch;
    std::size_t n_ranked = 0;
    std::size_t batch_no = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch, ++batch_no) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch);
      ModelParams g_cls = zeros_like(params);
      ModelParams g_metric = alternate ? zeros_like(params) : ModelParams{};
      try {
        for (std::size_t i = b0; i < b1; ++i) {
          const std::size_t p = order[i];
          const Sample s = make_sample(ds, p, exemplars ? &ex[p] : nullptr);
          const ForwardResult r =
              forward_backward(s, params, spec, {&g_cls, alternate ? &g_metric : nullptr});
          st.loss += r.loss;
          if (r.predicted == s.label) st.accuracy += 1.0;
          if (r.metric_satisfied) st.triplet_sat += 1.0;
          if (const auto& ref = ds.items[p].reference) {
            st.rank_corr += rank_correlation(r.final_map, *ref);
            ++n_ranked;
          }
        }
        const double inv = 1.0 / static_cast<double>(b1 - b0);
        scale_grads(g_cls, inv);
        rmsprop_step(params, g_cls, cls_state, lr_cls, cfg.rms_alpha_cls, cfg.rms_eps);
        if (alternate) {
          scale_grads(g_metric, inv * cfg.nu);
          rmsprop_step(params, g_metric, metric_state, lr_metric, cfg.rms_alpha_triplet,
                       cfg.rms_eps);
        }
      } catch (const NumericError& e) {
        throw TrainingDiverged(epoch, batch_no, e.what());
      }
    }
    const double n = static_cast<double>(order.size());
    st.loss /= n;
    st.accuracy /= n;
    st.triplet_sat /= n;
    st.rank_corr = n_ranked ? st.rank_corr / static_cast<double>(n_ranked) : 0.0;
    if (!std::isfinite(st.loss)) throw TrainingDiverged(epoch, batch_no, "non-finite epoch loss");
    out.history.push_back(st);
    lr_cls *= decay;
    lr_metric *= decay;
  }
  return out;
}

std::string history_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,loss,acc,triplet_sat,rankcorr\n";
  char buf[160];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", h.epoch, h.loss, h.accuracy,
                  h.triplet_sat, h.rank_corr);
    out += buf;
  }
  return out;
}

EvalConfig eval_config_from(const TrainConfig& cfg) {
  EvalConfig e;
  e.k_exemplars = cfg.k_exemplars;
  e.opposing_offset = cfg.opposing_offset;
  e.random_exemplars = cfg.random_exemplars;
  e.seed = cfg.seed;
  e.loss = cfg.loss_spec();
  return e;
}

std::size_t env_threads() {
  const char* v = std::getenv("DIFFATTN_THREADS");
  if (v == nullptr) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || n < 1) return 1;
  return static_cast<std::size_t>(n);
}

EvalResult evaluate(const Dataset& ds, const ExemplarIndex& index, const ModelParams& params,
                    std::span<const std::size_t> positions, const EvalConfig& cfg) {
  const bool exemplars = uses_exemplars(params.kind);
  const bool quint = params.kind == ModelKind::Dan && cfg.loss.metric == MetricLoss::Quintuplet;
  // Quintuplet exemplars only shape training; DAN evaluation does not read them.
  const ExemplarSource source(ds, index,
                              {cfg.k_exemplars, cfg.opposing_offset, cfg.random_exemplars, false,
                               0});
  LossSpec spec = cfg.loss;
  if (quint) spec.metric = MetricLoss::Triplet;

  EvalResult res;
  res.items.resize(positions.size());
  auto run = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t p = positions[i];
      const DatasetItem& item = ds.items.at(p);
      Rng rng(stream_seed(cfg.seed ^ stream_seed(item.id, kEval), kEval));
      Exemplars ex;
      if (exemplars) ex = source.fetch(p, rng);
      const Sample s = make_sample(ds, p, exemplars ? &ex : nullptr);
      ForwardResult r = forward(s, params, spec);
      EvalItem& e = res.items[i];
      e.position = p;
      e.predicted = r.predicted;
      e.accuracy = vqa_accuracy<std::uint32_t>(static_cast<std::uint32_t>(r.predicted),
                                               item.annotations);
      e.rank_corr = item.reference ? rank_correlation(r.final_map, *item.reference)
                                   : std::numeric_limits<double>::quiet_NaN();
      e.target_map = std::move(r.target_map);
      e.support_map = std::move(r.support_map);
      e.oppose_map = std::move(r.oppose_map);
      e.final_map = std::move(r.final_map);
    }
  };

  const std::size_t threads =
      std::max<std::size_t>(1, std::min(cfg.threads ? cfg.threads : env_threads(),
                                        std::max<std::size_t>(1, positions.size())));
  if (threads == 1) {
    run(0, positions.size());
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t lo = t * positions.size() / threads;
      const std::size_t hi = (t + 1) * positions.size() / threads;
      pool.emplace_back([&, t, lo, hi] {
        try {
          run(lo, hi);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  res.n_items = positions.size();
  res.class_accuracy.assign(ds.header.classes, 0.0);
  std::vector<std::size_t> class_count(ds.header.classes, 0);
  for (const auto& e : res.items) {
    res.accuracy += e.accuracy;
    if (!std::isnan(e.rank_corr)) {
      res.rank_corr += e.rank_corr;
      ++res.n_ranked;
    }
    const auto y = ds.items[e.position].answer;
    res.class_accuracy[y] += e.accuracy;
    ++class_count[y];
  }
  if (res.n_items) res.accuracy /= static_cast<double>(res.n_items);
  if (res.n_ranked) res.rank_corr /= static_cast<double>(res.n_ranked);
  for (std::size_t c = 0; c < class_count.size(); ++c) {
    if (class_count[c]) res.class_accuracy[c] /= static_cast<double>(class_count[c]);
  }
  return res;
}

}  // namespace diffattn
