#include "diffattn/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>

#include "diffattn/container.hpp"
#include "diffattn/error.hpp"
#include "diffattn/export.hpp"
#include "diffattn/gradcheck.hpp"
#include "diffattn/metrics.hpp"
#include "diffattn/trainer.hpp"

namespace diffattn {

namespace {

using json = nlohmann::ordered_json;

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// Prints aligned rows; the first row is the header.
void print_table(std::ostream& out, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()), 0);
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      out << r[i] << std::string(width[i] - r[i].size() + (i + 1 < r.size() ? 2 : 0), ' ');
    }
    out << "\n";
  }
}

void emit(std::ostream& out, const json& j) { out << j.dump(2) << "\n"; }

std::vector<std::size_t> split_positions(const Dataset& ds, const std::string& which,
                                         double holdout) {
  const Split s = holdout_split(ds.size(), holdout);
  if (which == "test") return s.test;
  if (which == "train") return s.train;
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return all;
}

json epoch_json(const EpochStats& e) {
  return {{"epoch", e.epoch},
          {"loss", e.loss},
          {"acc", e.accuracy},
          {"triplet_sat", e.triplet_sat},
          {"rankcorr", e.rank_corr}};
}

const std::map<std::string, ModelKind>& model_names() {
  static const std::map<std::string, ModelKind> names = [] {
    std::map<std::string, ModelKind> m;
    for (ModelKind k : kAllModels) m.emplace(std::string(to_string(k)), k);
    return m;
  }();
  return names;
}

struct Options {
  bool json = false;

  // gen-data
  GenConfig gen;
  std::string out;

  // shared inputs
  std::string data;
  std::string index;
  std::string params;
  std::uint64_t seed = 0;
  double holdout = 0.2;

  // build-index
  std::size_t clusters = 0;

  // train
  TrainConfig train;
  std::string history;
  std::string nu_mode = "joint";
  std::string metric = "triplet";
  std::string scaling = "diagonal";
  std::string model = "dan";

  // eval
  std::string split = "test";
  std::string maps_out;

  // rank-corr
  std::string map_a;
  std::string map_b;

  // grad-check
  std::size_t samples = 5;
  double tol = 1e-4;

  // dump-attention / knn
  std::uint32_t item = 0;
  std::string prefix;
  std::size_t k = 5;
};


int cmd_gen_data(const Options& o, std::ostream& out) {
  const Dataset ds = generate(o.gen);
  save(ds, o.out);
  const auto& h = ds.header;
  if (o.json) {
    emit(out, {{"command", "gen-data"},
               {"out", o.out},
               {"items", ds.size()},
               {"regions", h.regions},
               {"dim", h.dim},
               {"embed_dim", h.embed_dim},
               {"classes", h.classes},
               {"concepts", h.concepts},
               {"clusters", h.n_clusters},
               {"decoy_rate", o.gen.decoy_rate},
               {"position_scale", o.gen.position_scale},
               {"seed", o.gen.seed}});
  } else {
    print_table(out, {{"items", "regions", "dim", "embed_dim", "classes", "clusters", "file"},
                      {std::to_string(ds.size()), std::to_string(h.regions), std::to_string(h.dim),
                       std::to_string(h.embed_dim), std::to_string(h.classes),
                       std::to_string(h.n_clusters), o.out}});
  }
  return kExitOk;
}

int cmd_build_index(const Options& o, std::ostream& out) {
  const Dataset ds = load_dataset(o.data);
  const Split split = holdout_split(ds.size(), o.holdout);
  const std::size_t clusters = o.clusters ? o.clusters : ds.header.n_clusters;
  const ExemplarIndex idx = build_exemplar_index(joint_store(ds, split.train), clusters, o.seed);
  save(idx, o.out);
  if (o.json) {
    emit(out, {{"command", "build-index"},
               {"out", o.out},
               {"items", idx.kd.size()},
               {"clusters", idx.clusters.n_clusters()},
               {"tree_nodes", idx.kd.nodes().size()},
               {"seed", o.seed}});
  } else {
    print_table(out, {{"indexed", "clusters", "tree nodes", "file"},
                      {std::to_string(idx.kd.size()), std::to_string(idx.clusters.n_clusters()),
                       std::to_string(idx.kd.nodes().size()), o.out}});
  }
  return kExitOk;
}

TrainConfig train_config(const Options& o) {
  TrainConfig cfg = o.train;
  cfg.model = model_names().at(o.model);
  cfg.seed = o.seed;
  cfg.holdout = o.holdout;
  cfg.nu_mode = o.nu_mode == "alternate" ? NuMode::Alternate : NuMode::Joint;
  cfg.metric = o.metric == "quintuplet" ? MetricLoss::Quintuplet : MetricLoss::Triplet;
  cfg.learned_scaling = o.scaling == "scalar" ? DcnScaling::Scalar
                        : o.scaling == "full" ? DcnScaling::Full
                                              : DcnScaling::Diagonal;
  return cfg;
}

int cmd_train(const Options& o, std::ostream& out) {
  const Dataset ds = load_dataset(o.data);
  const ExemplarIndex idx = load_index(o.index);
  const TrainConfig cfg = train_config(o);
  const TrainResult res = train(ds, idx, cfg);
  save(res.params, o.out);
  if (!o.history.empty()) write_text(o.history, history_csv(res.history));

  std::optional<EvalResult> held;
  const Split split = holdout_split(ds.size(), cfg.holdout);
  if (!split.test.empty()) held = evaluate(ds, idx, res.params, split.test, eval_config_from(cfg));

  if (o.json) {
    json j{{"command", "train"},
           {"model", std::string(to_string(cfg.model))},
           {"epochs", cfg.epochs},
           {"seed", cfg.seed},
           {"out", o.out}};
    j["history"] = json::array();
    for (const auto& e : res.history) j["history"].push_back(epoch_json(e));
    j["final"] = res.history.empty() ? json(nullptr) : epoch_json(res.history.back());
    j["heldout"] = held ? json{{"items", held->n_items},
                               {"accuracy", held->accuracy},
                               {"rank_corr", held->rank_corr}}
                        : json(nullptr);
    emit(out, j);
  } else {
    std::vector<std::vector<std::string>> rows{{"epoch", "loss", "acc", "triplet_sat", "rankcorr"}};
    for (const auto& e : res.history) {
      rows.push_back({std::to_string(e.epoch), fmt(e.loss), fmt(e.accuracy), fmt(e.triplet_sat),
                      fmt(e.rank_corr)});
    }
    print_table(out, rows);
    if (held) {
      out << "held-out: accuracy " << fmt(held->accuracy) << ", rank correlation "
          << fmt(held->rank_corr) << " over " << held->n_items << " items\n";
    }
  }
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const Dataset ds = load_dataset(o.data);
  const ExemplarIndex idx = load_index(o.index);
  const ModelParams params = load_params(o.params);
  TrainConfig cfg = train_config(o);
  cfg.model = params.kind;
  const auto positions = split_positions(ds, o.split, o.holdout);
  const EvalResult res = evaluate(ds, idx, params, positions, eval_config_from(cfg));
  if (!o.maps_out.empty()) {
    AttentionMaps maps{ds.header.grid_rows, ds.header.grid_cols,
                       Matrix(res.items.size(), ds.header.regions)};
    for (std::size_t i = 0; i < res.items.size(); ++i) {
      std::copy(res.items[i].final_map.begin(), res.items[i].final_map.end(),
                maps.maps.row(i).begin());
    }
    save(maps, o.maps_out);
  }
  if (o.json) {
    emit(out, {{"command", "eval"},
               {"model", std::string(to_string(params.kind))},
               {"split", o.split},
               {"items", res.n_items},
               {"accuracy", res.accuracy},
               {"rank_corr", res.rank_corr},
               {"ranked_items", res.n_ranked},
               {"class_accuracy", res.class_accuracy}});
  } else {
    print_table(out, {{"model", "split", "items", "accuracy", "rank corr"},
                      {std::string(to_string(params.kind)), o.split, std::to_string(res.n_items),
                       fmt(res.accuracy), fmt(res.rank_corr)}});
    std::vector<std::vector<std::string>> rows{{"class", "accuracy"}};
    for (std::size_t c = 0; c < res.class_accuracy.size(); ++c) {
      rows.push_back({std::to_string(c), fmt(res.class_accuracy[c])});
    }
    print_table(out, rows);
  }
  return kExitOk;
}

int cmd_rank_corr(const Options& o, std::ostream& out) {
  const AttentionMaps a = load_maps(o.map_a);
  const AttentionMaps b = load_maps(o.map_b);
  if (a.maps.rows() != b.maps.rows() || a.maps.cols() != b.maps.cols()) {
    throw ShapeError("map files differ in shape: " + a.maps.shape_str() + " vs " +
                     b.maps.shape_str());
  }
  std::vector<double> values;
  double mean = 0.0;
  for (std::size_t i = 0; i < a.maps.rows(); ++i) {
    values.push_back(rank_correlation(a.maps.row(i), b.maps.row(i)));
    mean += values.back();
  }
  if (!values.empty()) mean /= static_cast<double>(values.size());
  if (o.json) {
    emit(out, {{"command", "rank-corr"}, {"maps", values.size()}, {"mean", mean}, {"values", values}});
  } else {
    out << fmt(mean, "%.1f") << "\n";
  }
  return kExitOk;
}

int cmd_grad_check(const Options& o, std::ostream& out) {
  GradCheckOptions g;
  g.samples = o.samples;
  g.seed = o.seed;
  g.loss = train_config(o).loss_spec();
  const GradCheckReport r = grad_check(model_names().at(o.model), g);
  const bool ok = r.passed(o.tol);
  if (o.json) {
    json j{{"command", "grad-check"},
           {"model", std::string(to_string(r.kind))},
           {"samples", r.samples},
           {"tol", o.tol},
           {"passed", ok},
           {"max_rel_error", r.max_rel_error}};
    j["blocks"] = json::array();
    for (const auto& b : r.blocks) {
      j["blocks"].push_back(
          {{"name", b.name}, {"max_rel_error", b.max_rel_error}, {"entries", b.entries}});
    }
    emit(out, j);
  } else {
    std::vector<std::vector<std::string>> rows{{"block", "entries", "max rel error", "status"}};
    for (const auto& b : r.blocks) {
      rows.push_back({b.name, std::to_string(b.entries), fmt(b.max_rel_error, "%.3e"),
                      b.max_rel_error <= o.tol ? "ok" : "FAIL"});
    }
    print_table(out, rows);
  }
  return ok ? kExitOk : kExitValidation;
}

int cmd_dump_attention(const Options& o, std::ostream& out) {
  const Dataset ds = load_dataset(o.data);
  const ExemplarIndex idx = load_index(o.index);
  const ModelParams params = load_params(o.params);
  const auto pos = item_positions(ds);
  if (o.item >= pos.size() || pos[o.item] >= ds.size()) {
    throw DomainError("no item with id " + std::to_string(o.item));
  }
  TrainConfig cfg = train_config(o);
  cfg.model = params.kind;
  const std::size_t p = pos[o.item];
  const EvalResult res = evaluate(ds, idx, params, std::span(&p, 1), eval_config_from(cfg));
  const EvalItem& e = res.items.front();
  const std::size_t rows = ds.header.grid_rows;
  const std::size_t cols = ds.header.grid_cols;

  std::vector<Matrix> panels;
  Matrix table(ds.header.regions, 4);
  const std::vector<const AttentionMap*> maps{&e.target_map, &e.support_map, &e.oppose_map,
                                              &e.final_map};
  for (std::size_t m = 0; m < maps.size(); ++m) {
    const AttentionMap& map = *maps[m];
    const AttentionMap filled = map.empty() ? AttentionMap(ds.header.regions, 0.0) : map;
    panels.push_back(as_grid(filled, rows, cols));
    for (std::size_t r = 0; r < filled.size(); ++r) table(r, m) = filled[r];
  }
  const std::string pgm = o.prefix + ".pgm";
  const std::string csv = o.prefix + ".csv";
  write_pgm(pgm, tile_horizontal(panels));
  write_text(csv, to_csv({"target", "support", "oppose", "final"}, table));
  const auto& item = ds.items[p];
  if (o.json) {
    emit(out, {{"command", "dump-attention"},
               {"item", o.item},
               {"answer", item.answer},
               {"predicted", e.predicted},
               {"rank_corr", e.rank_corr},
               {"pgm", pgm},
               {"csv", csv}});
  } else {
    out << "item " << o.item << ": answer " << item.answer << ", predicted " << e.predicted
        << ", rank correlation " << fmt(e.rank_corr) << "\n"
        << "wrote " << pgm << " and " << csv << " (target | support | oppose | final)\n";
  }
  return kExitOk;
}

int cmd_knn(const Options& o, std::ostream& out) {
  const ExemplarIndex idx = load_index(o.index);
  if (!idx.kd.contains(o.item)) throw DomainError("item " + std::to_string(o.item) + " is not indexed");
  const auto nn = idx.kd.knn_point(idx.kd.embedding(o.item), o.k, o.item);
  if (o.json) {
    json j{{"command", "knn"}, {"id", o.item}, {"k", o.k}};
    j["neighbors"] = json::array();
    for (const auto& n : nn) j["neighbors"].push_back({{"id", n.id}, {"dist_sq", n.dist_sq}});
    emit(out, j);
  } else {
    std::vector<std::vector<std::string>> rows{{"rank", "id", "dist_sq"}};
    for (std::size_t i = 0; i < nn.size(); ++i) {
      rows.push_back({std::to_string(i + 1), std::to_string(nn[i].id), fmt(nn[i].dist_sq, "%.6g")});
    }
    print_table(out, rows);
  }
  return kExitOk;
}

void add_model_option(CLI::App* sub, Options& o, bool required) {
  std::vector<std::string> names;
  for (const auto& [name, kind] : model_names()) names.push_back(name);
  auto* opt = sub->add_option("--model", o.model, "Model variant")->check(CLI::IsMember(names));
  if (required) opt->required();
}

void add_loss_options(CLI::App* sub, Options& o) {
  sub->add_option("--nu", o.train.nu, "Metric-loss weight")->capture_default_str();
  sub->add_option("--alpha", o.train.alpha, "Triplet margin")->capture_default_str();
  sub->add_option("--metric", o.metric, "Metric loss for DAN")
      ->check(CLI::IsMember({"triplet", "quintuplet"}))
      ->capture_default_str();
  sub->add_flag("--product-only", o.train.dcn.product_only, "Mul DCN: s*t instead of s*(1+t)");
  sub->add_flag("--subtract-projections", o.train.dcn.subtract_projections,
                "Supporting context as the difference of projections");
  sub->add_flag("--plain-difference", o.train.dcn.plain_difference,
                "DCN context without scaling and tanh");
  sub->add_flag("--dcn-scaled-ce", o.train.dcn_scaled_ce, "Divide the DCN cross-entropy by C");
}

void add_retrieval_options(CLI::App* sub, Options& o) {
  sub->add_option("--k", o.train.k_exemplars, "Exemplars per branch")
      ->check(CLI::Range(1, 5))
      ->capture_default_str();
  sub->add_option("--offset", o.train.opposing_offset, "Cluster rank of opposing exemplars")
      ->capture_default_str();
  sub->add_flag("--random-exemplars", o.train.random_exemplars,
                "Draw exemplars uniformly at random");
  sub->add_option("--holdout", o.holdout, "Held-out fraction (last items)")->capture_default_str();
  sub->add_option("--seed", o.seed, "Random seed")->capture_default_str();
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Differential attention networks on planted synthetic VQA data", "diffattn"};
  app.require_subcommand(1);
  app.add_flag("--json", o.json, "Machine-readable JSON summary on stdout");
  app.fallthrough();

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--n", o.gen.n_items, "Number of items")->capture_default_str();
  gen->add_option("--regions", o.gen.regions, "Image regions")->capture_default_str();
  gen->add_option("--dim", o.gen.dim, "Feature dimension")->capture_default_str();
  gen->add_option("--embed-dim", o.gen.embed_dim, "Joint embedding dimension")->capture_default_str();
  gen->add_option("--classes", o.gen.classes, "Answer classes")->capture_default_str();
  gen->add_option("--concepts", o.gen.concepts, "Latent concepts (0: same as classes)")
      ->capture_default_str();
  gen->add_option("--clusters", o.gen.n_clusters, "Recommended cluster count (0: auto)")
      ->capture_default_str();
  gen->add_option("--noise", o.gen.noise_sigma, "Gaussian noise sigma")->capture_default_str();
  gen->add_option("--corruption", o.gen.corruption, "Annotator corruption rate")
      ->capture_default_str();
  gen->add_option("--decoy-rate", o.gen.decoy_rate, "Chance of a decoy region per item")
      ->capture_default_str();
  gen->add_option("--position-scale", o.gen.position_scale, "Scale of the per-region position code")
      ->capture_default_str();
  gen->add_option("--seed", o.gen.seed, "Random seed")->capture_default_str();
  gen->add_option("--out", o.out, "Output dataset file")->required();

  auto* bidx = app.add_subcommand("build-index", "Build the exemplar index over training items");
  bidx->add_option("--data", o.data, "Dataset file")->required();
  bidx->add_option("--clusters", o.clusters, "k-means clusters (0: dataset default)")
      ->capture_default_str();
  bidx->add_option("--holdout", o.holdout, "Held-out fraction excluded from the index")
      ->capture_default_str();
  bidx->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  bidx->add_option("--out", o.out, "Output index file")->required();

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--data", o.data, "Dataset file")->required();
  tr->add_option("--index", o.index, "Exemplar index file")->required();
  add_model_option(tr, o, true);
  tr->add_option("--epochs", o.train.epochs, "Epochs")->capture_default_str();
  tr->add_option("--batch", o.train.batch, "Batch size")->capture_default_str();
  tr->add_option("--lr", o.train.lr_cls, "Classification learning rate")->capture_default_str();
  tr->add_option("--lr-triplet", o.train.lr_triplet, "Triplet learning rate")->capture_default_str();
  tr->add_option("--hidden", o.train.hidden, "Attention hidden width")->capture_default_str();
  tr->add_option("--decay-a", o.train.decay_a, "Decay constant a")->capture_default_str();
  tr->add_option("--decay-b", o.train.decay_b, "Decay constant b")->capture_default_str();
  tr->add_option("--nu-mode", o.nu_mode, "How the metric loss is optimized")
      ->check(CLI::IsMember({"joint", "alternate"}))
      ->capture_default_str();
  tr->add_option("--scaling", o.scaling, "Learned DCN scaling")
      ->check(CLI::IsMember({"scalar", "diagonal", "full"}))
      ->capture_default_str();
  add_loss_options(tr, o);
  add_retrieval_options(tr, o);
  tr->add_option("--out", o.out, "Output parameter file")->required();
  tr->add_option("--history", o.history, "Per-epoch history CSV");

  auto* ev = app.add_subcommand("eval", "Evaluate trained parameters");
  ev->add_option("--data", o.data, "Dataset file")->required();
  ev->add_option("--index", o.index, "Exemplar index file")->required();
  ev->add_option("--params", o.params, "Parameter file")->required();
  ev->add_option("--split", o.split, "Items to evaluate")
      ->check(CLI::IsMember({"test", "train", "all"}))
      ->capture_default_str();
  ev->add_option("--maps-out", o.maps_out, "Write the final attention maps here");
  add_loss_options(ev, o);
  add_retrieval_options(ev, o);

  auto* rc = app.add_subcommand("rank-corr", "Mean rank correlation between two map files");
  rc->add_option("--a", o.map_a, "First attention-map file")->required();
  rc->add_option("--b", o.map_b, "Second attention-map file")->required();

  auto* gc = app.add_subcommand("grad-check", "Compare analytic and finite-difference gradients");
  add_model_option(gc, o, true);
  gc->add_option("--samples", o.samples, "Random instances")->capture_default_str();
  gc->add_option("--tol", o.tol, "Relative error tolerance")->capture_default_str();
  gc->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  add_loss_options(gc, o);

  auto* dump = app.add_subcommand("dump-attention", "Export one item's attention maps");
  dump->add_option("--data", o.data, "Dataset file")->required();
  dump->add_option("--index", o.index, "Exemplar index file")->required();
  dump->add_option("--params", o.params, "Parameter file")->required();
  dump->add_option("--item", o.item, "Item id")->required();
  dump->add_option("--out", o.prefix, "Output prefix (.pgm and .csv are appended)")->required();
  add_loss_options(dump, o);
  add_retrieval_options(dump, o);

  auto* kn = app.add_subcommand("knn", "Nearest neighbours of an indexed item");
  kn->add_option("--index", o.index, "Exemplar index file")->required();
  kn->add_option("--id", o.item, "Item id")->required();
  kn->add_option("--k", o.k, "Neighbours")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitValidation;
  }

  try {
    if (*gen) return cmd_gen_data(o, out);
    if (*bidx) return cmd_build_index(o, out);
    if (*tr) return cmd_train(o, out);
    if (*ev) return cmd_eval(o, out);
    if (*rc) return cmd_rank_corr(o, out);
    if (*gc) return cmd_grad_check(o, out);
    if (*dump) return cmd_dump_attention(o, out);
    if (*kn) return cmd_knn(o, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, out, err);
}

}  // namespace diffattn
