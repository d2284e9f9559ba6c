#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>

#include "sgg/eval.hpp"

namespace sgg {

// Ablation-table runner. Six rows, mirroring the module grid
// (OEM off/on) x (TDE, TDE+Logic, LBL), evaluated per task protocol and
// averaged over seeds. Each seed trains two checkpoints (with and without
// OEM); the three strategy rows per checkpoint share one scoring pass since
// they only re-rank the same counterfactual logits. Plain (no-intervention)
// results ride along for the bias-premise analysis.

struct AblationConfig {
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  TrainConfig train;
  double train_fraction = 0.8;
  size_t calib_max_images = 150;
  size_t lbl_k = 3;
  BaselineMode baseline_mode = BaselineMode::TrainingMean;
  EvalOptions eval_base;
  size_t gru_hidden = 128;
  size_t heads = 4;
  size_t union_channels = 2;
};

struct AblationCell {
  double mr20 = 0, mr50 = 0, mr100 = 0, wr50 = 0;
  std::vector<double> per_class_r100;
};

struct AblationOutput {
  std::vector<uint64_t> seeds;
  std::vector<std::string> predicate_names;
  // raw[seed][oem(0/1)][task(0..2)][strategy(0..3: plain,tde,tde-logic,lbl)]
  std::vector<std::array<std::array<std::array<AblationCell, 4>, 3>, 2>> raw;

  double mean(int oem, int task, int strategy, double AblationCell::* field) const {
    double s = 0;
    for (const auto& r : raw) s += r[size_t(oem)][size_t(task)][size_t(strategy)].*field;
    return raw.empty() ? 0.0 : s / double(raw.size());
  }
  double stderr_of(int oem, int task, int strategy, double AblationCell::* field) const {
    if (raw.size() < 2) return 0.0;
    const double m = mean(oem, task, strategy, field);
    double ss = 0;
    for (const auto& r : raw) {
      const double d = r[size_t(oem)][size_t(task)][size_t(strategy)].*field - m;
      ss += d * d;
    }
    return std::sqrt(ss / double(raw.size() - 1) / double(raw.size()));
  }
};

struct AblationRowSpec {
  bool oem;
  Strategy strategy;
};

// Table-2 row order.
inline const std::array<AblationRowSpec, 6>& ablation_rows() {
  static const std::array<AblationRowSpec, 6> rows = {{{false, Strategy::Tde},
                                                       {false, Strategy::TdeLogic},
                                                       {true, Strategy::Tde},
                                                       {true, Strategy::TdeLogic},
                                                       {false, Strategy::Lbl},
                                                       {true, Strategy::Lbl}}};
  return rows;
}

inline Dataset dataset_slice(const Dataset& ds, size_t begin, size_t end) {
  Dataset out;
  out.class_names = ds.class_names;
  out.predicate_names = ds.predicate_names;
  out.records.assign(ds.records.begin() + long(begin), ds.records.begin() + long(end));
  return out;
}

inline AblationOutput run_ablation(const Dataset& ds, const AblationConfig& cfg,
                                   std::ostream* progress = nullptr) {
  require<ValidationError>(!cfg.seeds.empty(), "ablation: no seeds");
  require<ValidationError>(ds.records.size() >= 10, "ablation: dataset too small");
  const size_t split = size_t(double(ds.records.size()) * cfg.train_fraction);
  require<ValidationError>(split >= 1 && split < ds.records.size(),
                           "ablation: train fraction leaves an empty split");
  Dataset train_ds = dataset_slice(ds, 0, split);
  std::vector<size_t> eval_idx;
  for (size_t i = split; i < ds.records.size(); ++i) eval_idx.push_back(i);

  AblationOutput out;
  out.seeds = cfg.seeds;
  out.predicate_names = ds.predicate_names;
  const std::vector<Strategy> strategies = {Strategy::Plain, Strategy::Tde,
                                            Strategy::TdeLogic, Strategy::Lbl};
  for (uint64_t seed : cfg.seeds) {
    std::array<std::array<std::array<AblationCell, 4>, 3>, 2> seed_cells;
    for (int use_oem = 0; use_oem < 2; ++use_oem) {
      ModelConfig mc;
      mc.num_classes = ds.num_classes();
      mc.num_predicates = ds.num_predicates();
      mc.use_oem = use_oem == 1;
      mc.heads = cfg.heads;
      mc.gru_hidden = cfg.gru_hidden;
      mc.union_channels = cfg.union_channels;
      mc.init_seed = seed;
      SggModel<float> model(mc, ClassEmbeddingTable::built_in(ds.class_names));
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      if (progress)
        (*progress) << "[ablate] seed " << seed << (mc.use_oem ? " +oem" : " -oem")
                    << ": training " << tc.steps << " steps\n";
      train_model(model, train_ds, tc, nullptr);
      auto baselines = compute_baselines(model, train_ds, cfg.baseline_mode);
      const double vthr =
          calibrate_threshold(model, train_ds, cfg.lbl_k, baselines, cfg.calib_max_images);
      LblConfig lbl;
      lbl.k = cfg.lbl_k;
      lbl.v_threshold = vthr;
      lbl.baselines = baselines;
      if (progress)
        (*progress) << "[ablate] seed " << seed << (mc.use_oem ? " +oem" : " -oem")
                    << ": threshold " << vthr << ", evaluating\n";
      for (int task = 0; task < 3; ++task) {
        EvalOptions opt = cfg.eval_base;
        opt.task = TaskProtocol(task);
        opt.seed = seed;
        auto reports = evaluate_strategies(model, ds, eval_idx, lbl, opt, strategies);
        for (size_t s = 0; s < strategies.size(); ++s) {
          AblationCell cell;
          cell.mr20 = reports[s].mean_recall(20);
          cell.mr50 = reports[s].mean_recall(50);
          cell.mr100 = reports[s].mean_recall(100);
          cell.wr50 = reports[s].weighted_recall(50);
          cell.per_class_r100.resize(ds.num_predicates(), 0.0);
          for (size_t p = 0; p < ds.num_predicates(); ++p)
            cell.per_class_r100[p] = reports[s].recall(100, p);
          seed_cells[size_t(use_oem)][size_t(task)][s] = std::move(cell);
        }
      }
    }
    out.raw.push_back(std::move(seed_cells));
  }
  return out;
}

namespace csv_detail {
inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}
}  // namespace csv_detail

inline int strategy_index(Strategy s) {
  switch (s) {
    case Strategy::Plain: return 0;
    case Strategy::Tde: return 1;
    case Strategy::TdeLogic: return 2;
    default: return 3;
  }
}

// ablation.csv: Table-2 layout, seed means.
inline void write_ablation_table(const AblationOutput& out, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require<IoError>(bool(f), "cannot open '", path, "' for writing");
  f << "oem,tde,logic,lbl,predcls_mr50,predcls_mr100,sgcls_mr50,sgcls_mr100,"
       "sgdet_mr50,sgdet_mr100\n";
  for (const auto& row : ablation_rows()) {
    const int si = strategy_index(row.strategy);
    f << (row.oem ? 1 : 0) << ",1," << (row.strategy != Strategy::Tde ? 1 : 0) << ","
      << (row.strategy == Strategy::Lbl ? 1 : 0);
    for (int task = 0; task < 3; ++task) {
      f << ',' << csv_detail::fmt(out.mean(row.oem, task, si, &AblationCell::mr50));
      f << ',' << csv_detail::fmt(out.mean(row.oem, task, si, &AblationCell::mr100));
    }
    f << '\n';
  }
}

// ablation_seeds.csv: raw per-seed numbers for every config, including the
// plain (no-intervention) rows used by the bias-premise analysis.
inline void write_ablation_seeds(const AblationOutput& out, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require<IoError>(bool(f), "cannot open '", path, "' for writing");
  f << "seed,oem,strategy,task,mr20,mr50,mr100,weighted_r50\n";
  static const char* strategy_names[] = {"plain", "tde", "tde-logic", "lbl"};
  for (size_t i = 0; i < out.raw.size(); ++i) {
    for (int oem = 0; oem < 2; ++oem)
      for (int task = 0; task < 3; ++task)
        for (int s = 0; s < 4; ++s) {
          const auto& c = out.raw[i][size_t(oem)][size_t(task)][size_t(s)];
          f << out.seeds[i] << ',' << oem << ',' << strategy_names[s] << ','
            << task_name(TaskProtocol(task)) << ',' << csv_detail::fmt(c.mr20) << ','
            << csv_detail::fmt(c.mr50) << ',' << csv_detail::fmt(c.mr100) << ','
            << csv_detail::fmt(c.wr50) << '\n';
        }
  }
}

// per_class.csv: Table-4 layout, per-predicate recall@100 seed means on
// PredCls for the six ablation configs.
inline void write_per_class_table(const AblationOutput& out, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require<IoError>(bool(f), "cannot open '", path, "' for writing");
  f << "predicate";
  for (const auto& row : ablation_rows())
    f << ',' << (row.oem ? "oem_" : "base_") << strategy_name(row.strategy) << "_r100";
  f << '\n';
  const size_t N = out.predicate_names.size();
  for (size_t p = 1; p < N; ++p) {  // background row omitted
    f << out.predicate_names[p];
    for (const auto& row : ablation_rows()) {
      const int si = strategy_index(row.strategy);
      double s = 0;
      for (const auto& r : out.raw)
        s += r[row.oem ? 1 : 0][0][size_t(si)].per_class_r100[p];
      f << ',' << csv_detail::fmt(out.raw.empty() ? 0.0 : s / double(out.raw.size()));
    }
    f << '\n';
  }
}

}  // namespace sgg
