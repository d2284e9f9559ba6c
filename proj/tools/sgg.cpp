// sgg: synthetic scene-graph relation prediction with counterfactual
// debiasing. Subcommands cover the whole workflow: gen-data, train,
// calibrate, eval, ablate, predict.
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "sgg/ablation.hpp"
#include "sgg/dataset_io.hpp"
#include "sgg/synth.hpp"

namespace fs = std::filesystem;
using namespace sgg;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_override;
  int64_t seed_override = -1;
  int jobs = 0;
  std::string task = "";
  std::string strategy = "";
};

std::string resolve_out_dir(const KvConfig& cfg, const CommonArgs& args) {
  // precedence: SGG_OUT_DIR env > --out > config [paths] out_dir
  if (const char* env = std::getenv("SGG_OUT_DIR"); env && *env) return env;
  if (!args.out_override.empty()) return args.out_override;
  return cfg.get_string("paths.out_dir", "out");
}

TaskProtocol parse_task(const std::string& s) {
  if (s == "predcls") return TaskProtocol::PredCls;
  if (s == "sgcls") return TaskProtocol::SGCls;
  if (s == "sgdet") return TaskProtocol::SGDet;
  throw ValidationError(cat("unknown task '", s, "' (predcls|sgcls|sgdet)"));
}

Strategy parse_strategy(const std::string& s) {
  if (s == "plain") return Strategy::Plain;
  if (s == "tde") return Strategy::Tde;
  if (s == "tde-logic") return Strategy::TdeLogic;
  if (s == "lbl") return Strategy::Lbl;
  throw ValidationError(cat("unknown strategy '", s, "' (plain|tde|tde-logic|lbl)"));
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path))
    throw IoError(cat(what, " missing: '", path, "'"));
}

KvConfig load_config(const CommonArgs& args) {
  require<ValidationError>(!args.config_path.empty(), "--config is required");
  require_file(args.config_path, "config file");
  return KvConfig::load(args.config_path);
}

uint64_t effective_seed(const KvConfig& cfg, const CommonArgs& args,
                        const std::string& key, uint64_t fallback) {
  if (args.seed_override >= 0) return uint64_t(args.seed_override);
  return uint64_t(cfg.get_int(key, int64_t(fallback)));
}

ModelConfig model_config(const KvConfig& cfg, const Dataset& ds, uint64_t seed) {
  ModelConfig mc;
  mc.num_classes = ds.num_classes();
  mc.num_predicates = ds.num_predicates();
  mc.use_oem = cfg.get_bool("model.oem", true);
  mc.heads = size_t(cfg.get_int("model.heads", 4));
  mc.gru_hidden = size_t(cfg.get_int("model.gru_hidden", 128));
  mc.union_channels = size_t(cfg.get_int("model.union_channels", 2));
  mc.init_seed = seed;
  return mc;
}

ClassEmbeddingTable embeddings_for(const KvConfig& cfg, const Dataset& ds) {
  const std::string file = cfg.get_string("paths.embedding_file", "");
  if (file.empty()) return ClassEmbeddingTable::built_in(ds.class_names);
  require_file(file, "embedding file");
  return ClassEmbeddingTable::from_file(file, ds.class_names);
}

TrainConfig train_config(const KvConfig& cfg, uint64_t seed) {
  TrainConfig tc;
  tc.lr = cfg.get_double("train.lr", 1e-3);
  tc.weight_decay = cfg.get_double("train.weight_decay", 1e-4);
  tc.batch = size_t(cfg.get_int("train.batch", 12));
  tc.steps = size_t(cfg.get_int("train.steps", 5000));
  tc.bg_ratio = cfg.get_double("train.bg_ratio", 3.0);
  tc.log_every = size_t(cfg.get_int("train.log_every", 50));
  tc.seed = seed;
  return tc;
}

EvalOptions eval_options(const KvConfig& cfg, uint64_t seed) {
  EvalOptions opt;
  opt.det_class_error = cfg.get_double("eval.det_class_error", 0.2);
  opt.det_box_sigma = cfg.get_double("eval.det_box_sigma", 0.05);
  opt.iou_threshold = cfg.get_double("eval.iou_threshold", 0.5);
  opt.seed = uint64_t(cfg.get_int("eval.seed", int64_t(seed)));
  return opt;
}

std::string fmt6(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

int cmd_gen_data(const CommonArgs& args, const std::string& spec_path,
                 const std::string& preset, const std::string& out_path) {
  WorldSpec world;
  if (!spec_path.empty()) {
    require_file(spec_path, "world spec");
    world = world_from_config(KvConfig::load(spec_path));
  } else if (preset == "tiny") {
    world = tiny_world();
  } else if (preset == "bench") {
    world = bench_world();
  } else {
    throw ValidationError("gen-data needs --spec FILE or --preset tiny|bench");
  }
  if (args.seed_override >= 0) world.seed = uint64_t(args.seed_override);
  Dataset ds = generate(world, world.num_images, world.objects_per_image);
  save_dataset(ds, out_path);
  auto hist = predicate_histogram(ds);
  std::cout << "wrote " << ds.records.size() << " records to " << out_path << "\n";
  std::cout << "predicate histogram:\n";
  for (size_t r = 1; r < hist.size(); ++r)
    std::cout << "  " << ds.predicate_names[r] << ": " << hist[r] << "\n";
  return 0;
}

int cmd_train(const CommonArgs& args) {
  KvConfig cfg = load_config(args);
  const std::string data_path = cfg.require_string("paths.dataset");
  require_file(data_path, "dataset");
  Dataset ds = load_dataset(data_path);
  const uint64_t seed = effective_seed(cfg, args, "train.seed", 1);
  SggModel<float> model(model_config(cfg, ds, seed), embeddings_for(cfg, ds));
  TrainConfig tc = train_config(cfg, seed);
  const std::string out_dir = resolve_out_dir(cfg, args);
  fs::create_directories(out_dir);
  auto result = train_model(model, ds, tc, &std::cout);
  model.store.save(out_dir + "/checkpoint.bin");
  std::ofstream loss(out_dir + "/loss.csv", std::ios::binary);
  loss << "step,loss\n";
  for (const auto& [step, value] : result.loss_curve)
    loss << step << ',' << fmt6(value) << '\n';
  std::cout << "wrote " << out_dir << "/checkpoint.bin and loss.csv\n";
  return 0;
}

int cmd_calibrate(const CommonArgs& args) {
  KvConfig cfg = load_config(args);
  const std::string data_path = cfg.require_string("paths.dataset");
  require_file(data_path, "dataset");
  Dataset ds = load_dataset(data_path);
  const uint64_t seed = effective_seed(cfg, args, "train.seed", 1);
  SggModel<float> model(model_config(cfg, ds, seed), embeddings_for(cfg, ds));
  const std::string ckpt = cfg.get_string("paths.checkpoint",
                                          resolve_out_dir(cfg, args) + "/checkpoint.bin");
  require_file(ckpt, "checkpoint");
  model.store.load(ckpt);

  const size_t k = size_t(cfg.get_int("lbl.k", 3));
  require<ValidationError>(k >= 2, "config key 'lbl.k' must be >= 2");
  const std::string mode_s = cfg.get_string("lbl.baseline_mode", "mean");
  BaselineMode mode;
  if (mode_s == "mean")
    mode = BaselineMode::TrainingMean;
  else if (mode_s == "zero")
    mode = BaselineMode::Zero;
  else
    throw ValidationError(cat("config key 'lbl.baseline_mode': '", mode_s,
                              "' is not mean|zero"));
  const size_t cap = size_t(cfg.get_int("lbl.calib_max_images", 0));
  auto baselines = compute_baselines(model, ds, mode);
  const double vthr = calibrate_threshold(model, ds, k, baselines, cap);
  LblConfig lbl;
  lbl.k = k;
  lbl.v_threshold = vthr;
  lbl.baselines = std::move(baselines);
  const std::string out_dir = resolve_out_dir(cfg, args);
  fs::create_directories(out_dir);
  save_calibration(lbl, out_dir + "/calibration.bin");
  std::cout << "calibrated V^K threshold " << vthr << " (K=" << k << ") over "
            << (cap == 0 ? ds.records.size() : std::min(cap, ds.records.size()))
            << " images; wrote " << out_dir << "/calibration.bin\n";
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  KvConfig cfg = load_config(args);
  const std::string data_path = cfg.require_string("paths.dataset");
  require_file(data_path, "dataset");
  Dataset ds = load_dataset(data_path);
  const uint64_t seed = effective_seed(cfg, args, "eval.seed", 1);
  SggModel<float> model(model_config(cfg, ds, seed), embeddings_for(cfg, ds));
  const std::string out_dir = resolve_out_dir(cfg, args);
  const std::string ckpt = cfg.get_string("paths.checkpoint", out_dir + "/checkpoint.bin");
  require_file(ckpt, "checkpoint");
  model.store.load(ckpt);
  const std::string calib = cfg.get_string("paths.calibration",
                                           out_dir + "/calibration.bin");
  if (!fs::exists(calib)) throw IoError(cat("calibration artifact missing: '", calib, "'"));
  LblConfig lbl = load_calibration(calib);

  EvalOptions opt = eval_options(cfg, seed);
  opt.task = parse_task(!args.task.empty() ? args.task
                                           : cfg.get_string("eval.task", "predcls"));
  Strategy strategy = parse_strategy(
      !args.strategy.empty() ? args.strategy : cfg.get_string("eval.strategy", "lbl"));

  std::vector<size_t> idx(ds.records.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  auto reports = evaluate_strategies(model, ds, idx, lbl, opt, {strategy});
  const EvalReport& rep = reports[0];

  fs::create_directories(out_dir);
  const std::string tag = cat(task_name(opt.task), "_", strategy_name(strategy));
  {
    std::ofstream f(out_dir + "/eval_" + tag + ".csv", std::ios::binary);
    f << "predicate,gt_count,recall20,recall50,recall100\n";
    for (size_t p = 1; p < ds.num_predicates(); ++p) {
      f << ds.predicate_names[p] << ',' << rep.gt_counts[p] << ','
        << fmt6(rep.recall(20, p)) << ',' << fmt6(rep.recall(50, p)) << ','
        << fmt6(rep.recall(100, p)) << '\n';
    }
  }
  {
    std::ofstream f(out_dir + "/eval_" + tag + "_summary.csv", std::ios::binary);
    f << "metric,value\n";
    for (size_t K : {20ul, 50ul, 100ul}) {
      f << "mr" << K << ',' << fmt6(rep.mean_recall(K)) << '\n';
      f << "weighted_r" << K << ',' << fmt6(rep.weighted_recall(K)) << '\n';
    }
  }
  const size_t dot_images = size_t(cfg.get_int("eval.dot_images", 0));
  if (dot_images > 0) {
    fs::create_directories(out_dir + "/dot");
    for (size_t i = 0; i < std::min(dot_images, ds.records.size()); ++i) {
      auto preds = predict_record(model, ds, i, lbl, strategy, opt);
      std::vector<CandidateTriplet> cands;
      for (const auto& pp : preds) {
        for (const auto& rp : pp.ranking) {
          if (rp.predicate_id == 0) continue;
          CandidateTriplet c;
          c.subject = pp.pair.subject;
          c.object = pp.pair.object;
          c.predicate = rp.predicate_id;
          c.confidence = pp.confidence;
          cands.push_back(c);
          break;
        }
      }
      auto ranked = rank_triplets(std::move(cands));
      std::vector<RelationTriplet> triplets;
      for (size_t c = 0; c < std::min<size_t>(ranked.size(), 20); ++c)
        triplets.push_back(RelationTriplet{ranked[c].subject, ranked[c].object,
                                           ranked[c].predicate});
      std::ofstream f(out_dir + "/dot/" + ds.records[i].image_id + ".dot",
                      std::ios::binary);
      f << export_dot(ds.records[i], triplets, ds.class_names, ds.predicate_names);
    }
  }
  std::cout << "task " << task_name(opt.task) << " strategy " << strategy_name(strategy)
            << ": mR@20 " << fmt6(rep.mean_recall(20)) << ", mR@50 "
            << fmt6(rep.mean_recall(50)) << ", mR@100 " << fmt6(rep.mean_recall(100))
            << "\n";
  std::cout << "wrote " << out_dir << "/eval_" << tag << ".csv\n";
  return 0;
}

int cmd_ablate(const CommonArgs& args) {
  KvConfig cfg = load_config(args);
  const std::string data_path = cfg.require_string("paths.dataset");
  require_file(data_path, "dataset");
  Dataset ds = load_dataset(data_path);

  AblationConfig ac;
  ac.seeds.clear();
  {
    std::istringstream ss(cfg.get_string("ablate.seeds", "1 2 3 4 5"));
    uint64_t s;
    while (ss >> s) ac.seeds.push_back(s);
    require<ValidationError>(!ac.seeds.empty(), "config key 'ablate.seeds' is empty");
  }
  ac.train = train_config(cfg, 0);
  ac.train.steps = size_t(cfg.get_int("ablate.steps", int64_t(ac.train.steps)));
  ac.train_fraction = cfg.get_double("ablate.train_fraction", 0.8);
  ac.calib_max_images = size_t(cfg.get_int("ablate.calib_max_images", 150));
  ac.lbl_k = size_t(cfg.get_int("lbl.k", 3));
  ac.eval_base = eval_options(cfg, 1);
  ac.gru_hidden = size_t(cfg.get_int("model.gru_hidden", 128));
  ac.heads = size_t(cfg.get_int("model.heads", 4));
  ac.union_channels = size_t(cfg.get_int("model.union_channels", 2));

  const std::string out_dir = resolve_out_dir(cfg, args);
  fs::create_directories(out_dir);
  auto out = run_ablation(ds, ac, &std::cout);
  write_ablation_table(out, out_dir + "/ablation.csv");
  write_ablation_seeds(out, out_dir + "/ablation_seeds.csv");
  write_per_class_table(out, out_dir + "/per_class.csv");
  std::cout << "wrote " << out_dir << "/ablation.csv, ablation_seeds.csv, per_class.csv\n";
  // console summary: Table-2 rows, mR@50 per task
  for (const auto& row : ablation_rows()) {
    const int si = strategy_index(row.strategy);
    std::cout << (row.oem ? "+oem " : "-oem ") << strategy_name(row.strategy) << ":";
    for (int task = 0; task < 3; ++task)
      std::cout << " " << task_name(TaskProtocol(task)) << " mR@50 "
                << fmt6(out.mean(row.oem, task, si, &AblationCell::mr50));
    std::cout << "\n";
  }
  return 0;
}

int cmd_predict(const CommonArgs& args, const std::string& image_id) {
  KvConfig cfg = load_config(args);
  const std::string data_path = cfg.require_string("paths.dataset");
  require_file(data_path, "dataset");
  Dataset ds = load_dataset(data_path);
  size_t index = ds.records.size();
  for (size_t i = 0; i < ds.records.size(); ++i)
    if (ds.records[i].image_id == image_id) index = i;
  require<ValidationError>(index < ds.records.size(), "image '", image_id,
                           "' not found in dataset");
  const uint64_t seed = effective_seed(cfg, args, "eval.seed", 1);
  SggModel<float> model(model_config(cfg, ds, seed), embeddings_for(cfg, ds));
  const std::string out_dir = resolve_out_dir(cfg, args);
  const std::string ckpt = cfg.get_string("paths.checkpoint", out_dir + "/checkpoint.bin");
  require_file(ckpt, "checkpoint");
  model.store.load(ckpt);
  const std::string calib = cfg.get_string("paths.calibration",
                                           out_dir + "/calibration.bin");
  if (!fs::exists(calib)) throw IoError(cat("calibration artifact missing: '", calib, "'"));
  LblConfig lbl = load_calibration(calib);
  EvalOptions opt = eval_options(cfg, seed);
  opt.task = parse_task(!args.task.empty() ? args.task
                                           : cfg.get_string("eval.task", "predcls"));
  Strategy strategy = parse_strategy(
      !args.strategy.empty() ? args.strategy : cfg.get_string("eval.strategy", "lbl"));

  auto preds = predict_record(model, ds, index, lbl, strategy, opt);
  nlohmann::json out;
  out["image_id"] = image_id;
  out["strategy"] = strategy_name(strategy);
  out["task"] = task_name(opt.task);
  nlohmann::json jpairs = nlohmann::json::array();
  std::vector<CandidateTriplet> cands;
  for (const auto& pp : preds) {
    nlohmann::json jp;
    jp["s"] = pp.pair.subject;
    jp["o"] = pp.pair.object;
    jp["confidence"] = pp.confidence;
    nlohmann::json jr = nlohmann::json::array();
    for (size_t i = 0; i < std::min<size_t>(pp.ranking.size(), 5); ++i)
      jr.push_back({{"p", pp.ranking[i].predicate_id},
                    {"rank_score", pp.ranking[i].rank_score}});
    jp["predicates"] = jr;
    jpairs.push_back(jp);
    for (const auto& rp : pp.ranking) {
      if (rp.predicate_id == 0) continue;
      CandidateTriplet c;
      c.subject = pp.pair.subject;
      c.object = pp.pair.object;
      c.predicate = rp.predicate_id;
      c.confidence = pp.confidence;
      cands.push_back(c);
      break;
    }
  }
  out["pairs"] = jpairs;
  nlohmann::json jtrip = nlohmann::json::array();
  for (const auto& c : rank_triplets(std::move(cands)))
    jtrip.push_back({{"s", c.subject}, {"o", c.object}, {"p", c.predicate},
                     {"score", c.confidence}});
  out["triplets"] = jtrip;
  fs::create_directories(out_dir);
  const std::string path = out_dir + "/predict_" + image_id + ".json";
  std::ofstream f(path, std::ios::binary);
  f << out.dump(2) << "\n";
  std::cout << "wrote " << path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic scene-graph relation prediction with LBL debiasing"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string spec_path, preset, gen_out, image_id;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config_path, "run config file");
    sub->add_option("--seed", args.seed_override, "seed override");
    sub->add_option("--out", args.out_override, "output directory override");
    sub->add_option("--jobs", args.jobs, "worker threads (0 = default)");
    sub->add_option("--task", args.task, "predcls|sgcls|sgdet");
    sub->add_option("--strategy", args.strategy, "plain|tde|tde-logic|lbl");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--spec", spec_path, "world spec config file");
  gen->add_option("--preset", preset, "tiny|bench");
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->add_option("--seed", args.seed_override, "seed override");
  gen->add_option("--jobs", args.jobs, "worker threads");

  CLI::App* train = app.add_subcommand("train", "train a checkpoint");
  add_common(train);
  CLI::App* calib = app.add_subcommand("calibrate", "compute baselines and V^K threshold");
  add_common(calib);
  CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(evalc);
  CLI::App* ablate = app.add_subcommand("ablate", "run the ablation table");
  add_common(ablate);
  CLI::App* predict = app.add_subcommand("predict", "rank triplets for one image");
  add_common(predict);
  predict->add_option("--image", image_id, "image id")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    int default_jobs = 1;
    if (evalc->parsed() || ablate->parsed() || predict->parsed() || calib->parsed())
      default_jobs = int(std::thread::hardware_concurrency());
    set_num_threads(args.jobs > 0 ? args.jobs : default_jobs);

    if (gen->parsed()) return cmd_gen_data(args, spec_path, preset, gen_out);
    if (train->parsed()) return cmd_train(args);
    if (calib->parsed()) return cmd_calibrate(args);
    if (evalc->parsed()) return cmd_eval(args);
    if (ablate->parsed()) return cmd_ablate(args);
    if (predict->parsed()) return cmd_predict(args, image_id);
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
}
