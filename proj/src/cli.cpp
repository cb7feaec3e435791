#include "rashnet/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "rashnet/checkpoint.hpp"

namespace rashnet {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw DataError(path.string() + ": write failed");
}

std::string num(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc{} ? std::string(buf, end) : std::string("nan");
}

fs::path ensure_out_dir(const RunConfig& cfg) {
  fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  return dir;
}

DatasetManifest require_manifest(const RunConfig& cfg) {
  if (cfg.manifest.empty()) throw std::invalid_argument("--manifest is required for this command");
  return load_manifest(cfg.manifest);
}

PreprocessOptions preprocess_for(const NetworkConfig& net) {
  PreprocessOptions p;
  p.size = net.input_size;
  p.dtype = net.dtype;
  return p;
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

// Network to start training from: a checkpoint if given, otherwise random.
Network initial_network(const RunConfig& cfg, int variant, std::string& init) {
  if (cfg.init_checkpoint.empty()) {
    init = "random";
    return Network(cfg.network_config(variant), cfg.seed);
  }
  Network net = load_checkpoint(fs::path(cfg.init_checkpoint));
  const auto& c = net.config();
  if (c.input_size != cfg.resolution || c.dtype != cfg.dtype()) {
    throw DataError("init checkpoint expects " + std::to_string(c.input_size) + "px " + dtype_name(c.dtype) +
                    " inputs; run asks for " + std::to_string(cfg.resolution) + "px " + dtype_name(cfg.dtype()));
  }
  if (c.num_classes != 2) net.replace_head(2, cfg.seed);
  init = "checkpoint:" + cfg.init_checkpoint;
  return net;
}

ProtocolResult run_protocol(const RunConfig& cfg, int variant, const ManifestSource& source,
                            const FoldPlan& plan, std::ostream& err, std::string& init) {
  Network initial = initial_network(cfg, variant, init);
  ProtocolOptions opt;
  opt.oversample = cfg.oversample;
  opt.lr_find.iterations = cfg.lr_iterations;
  opt.init = init;
  opt.on_fold = [&](int fold, const FoldMetrics& h, const FoldMetrics& f) {
    err << "fold " << fold + 1 << "/" << plan.k << ": head acc " << format_fixed(h.accuracy) << ", final acc "
        << format_fixed(f.accuracy) << "\n";
  };
  return fit_protocol(initial, source, plan, cfg.head_phase(), cfg.finetune_phase(), opt);
}

// ---------------------------------------------------------------------------

int cmd_ingest(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto m = require_manifest(cfg);
  std::size_t bad = 0;
  for (const auto& s : m.samples) {
    fs::path p = s.path;
    if (p.is_relative()) p = m.base_dir / p;
    try {
      decode_image(p);
    } catch (const DataError& e) {
      err << e.what() << "\n";
      ++bad;
    }
  }
  out << "samples " << m.size() << " (positive " << m.positives() << ", negative " << m.negatives() << ")\n";
  for (std::size_t c = 0; c < kFineLabelCount; ++c) {
    out << "  " << label_name(static_cast<FineLabel>(c)) << " " << m.counts[c] << "\n";
  }
  if (bad) {
    err << bad << " image(s) failed to decode\n";
    return kExitData;
  }
  return kExitOk;
}

int cmd_split(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const auto m = require_manifest(cfg);
  const auto plan = stratified_kfold(m, cfg.k, cfg.seed);
  const auto path = ensure_out_dir(cfg) / "folds.csv";
  std::ostringstream csv;
  write_fold_plan(csv, plan, m);
  write_file(path, csv.str());
  for (int f = 0; f < plan.k; ++f) {
    const auto& v = plan.validation[static_cast<std::size_t>(f)];
    std::size_t pos = 0;
    for (auto i : v) pos += m.samples[i].positive() ? 1 : 0;
    out << "fold " << f + 1 << ": " << v.size() << " samples, " << pos << " positive\n";
  }
  out << "wrote " << path.string() << "\n";
  return kExitOk;
}

int cmd_lr_find(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const auto m = require_manifest(cfg);
  const auto plan = stratified_kfold(m, cfg.k, cfg.seed);
  std::string init;
  Network net = initial_network(cfg, cfg.variant, init);
  net.set_trainable(TrainPolicy::head_only);
  ManifestSource source(m, preprocess_for(net.config()));
  LrFindOptions opt;
  opt.iterations = cfg.lr_iterations;
  OptimizerState state;
  const auto curve = lr_find(net, Split{&source, plan.training(0)}, cfg.batch_size, state, opt, cfg.seed);
  const auto path = ensure_out_dir(cfg) / "lr_curve.csv";
  write_file(path, curve.to_csv());
  out << "points " << curve.points.size() << "\n";
  out << "minimum smoothed loss at lr " << num(curve.points[curve.best_index].lr) << "\n";
  if (curve.divergence_index) out << "diverged at lr " << num(curve.divergence_lr()) << "\n";
  out << "suggested lr " << num(curve.suggested_lr) << "\n";
  out << "wrote " << path.string() << "\n";
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const auto m = require_manifest(cfg);
  const auto dir = ensure_out_dir(cfg);
  const auto plan = stratified_kfold(m, cfg.k, cfg.seed);
  ManifestSource source(m, preprocess_for(cfg.network_config()));
  std::string init;
  auto result = run_protocol(cfg, cfg.variant, source, plan, err, init);

  write_file(dir / "config.json", cfg.snapshot());
  std::ostringstream folds;
  write_fold_plan(folds, plan, m);
  write_file(dir / "folds.csv", folds.str());
  write_file(dir / "report_head.json", result.head.to_json());
  write_file(dir / "report_head.txt", result.head.to_text());
  write_file(dir / "report_finetune.json", result.finetune.to_json());
  write_file(dir / "report_finetune.txt", result.finetune.to_text());
  if (result.head_lr_curve) write_file(dir / "lr_curve.csv", result.head_lr_curve->to_csv());

  std::string traj = "step";
  for (int f = 0; f < plan.k; ++f) traj += ",fold" + std::to_string(f + 1);
  traj += ",mean\n";
  for (std::size_t s = 0; s < result.mean_auc_trajectory.size(); ++s) {
    traj += std::to_string(s);
    for (const auto& t : result.auc_trajectory) traj += "," + num(t[s]);
    traj += "," + num(result.mean_auc_trajectory[s]) + "\n";
  }
  write_file(dir / "auc_trajectory.csv", traj);

  for (std::size_t f = 0; f < result.folds.size(); ++f) {
    const auto& fo = result.folds[f];
    const std::string tag = "fold" + std::to_string(f + 1);
    std::string log = fo.head_log.to_csv();
    const auto ft = fo.finetune_log.to_csv();
    log += ft.substr(ft.find('\n') + 1);
    write_file(dir / ("log_" + tag + ".csv"), log);
    save_checkpoint(fo.network, dir / (tag + ".rnet"));
    for (const auto& w : fo.warnings) err << tag << ": " << w << "\n";
  }

  out << "head learning rate " << num(result.head_lr) << "\n\n";
  out << result.head.to_text() << "\n" << result.finetune.to_text();
  return kExitOk;
}

Network require_checkpoint(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw std::invalid_argument("--checkpoint is required for this command");
  return load_checkpoint(fs::path(cfg.checkpoint));
}

int cmd_evaluate(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  Network net = require_checkpoint(cfg);
  const auto m = require_manifest(cfg);
  ManifestSource source(m, preprocess_for(net.config()));
  const Split all{&source, all_rows(m.size())};
  const auto scores = predict_scores(net, all, cfg.batch_size);
  auto report = cross_validate_report({fold_metrics(0, scores, all.labels())}, "evaluate");
  report.init = "checkpoint:" + cfg.checkpoint;
  const auto dir = ensure_out_dir(cfg);
  write_file(dir / "evaluation.json", report.to_json());
  write_file(dir / "evaluation.txt", report.to_text());
  out << report.to_text();
  return kExitOk;
}

int cmd_predict(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  Network net = require_checkpoint(cfg);
  if (cfg.images.empty()) throw std::invalid_argument("predict needs at least one image path");
  DatasetManifest m;
  // Labels are placeholders; only the scores are reported.
  for (const auto& p : cfg.images) m.add(p, FineLabel::normal_skin);
  ManifestSource source(m, preprocess_for(net.config()));
  const auto scores = predict_scores(net, Split{&source, all_rows(m.size())}, cfg.batch_size);
  for (std::size_t i = 0; i < scores.size(); ++i) out << cfg.images[i] << "," << num(scores[i]) << "\n";
  return kExitOk;
}

int cmd_compare(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.variants.empty()) throw std::invalid_argument("--variants must name at least one variant");
  const auto m = require_manifest(cfg);
  const auto plan = stratified_kfold(m, cfg.k, cfg.seed);
  ManifestSource source(m, preprocess_for(cfg.network_config()));
  ojson j = ojson::array();
  std::ostringstream text;
  text << "Variant   Phase      Sensitivity   Specificity   Accuracy   AUC\n";
  for (int v : cfg.variants) {
    err << "variant " << v << "\n";
    std::string init;
    auto r = run_protocol(cfg, v, source, plan, err, init);
    ojson row;
    row["variant"] = v;
    row["init"] = init;
    for (const auto* rep : {&r.head, &r.finetune}) {
      const auto& a = rep->average;
      row[rep->phase] = {{"sensitivity", a.sensitivity},
                         {"specificity", a.specificity},
                         {"accuracy", a.accuracy},
                         {"auc", a.auc ? ojson(*a.auc) : ojson(nullptr)}};
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-9d %-10s %11s   %11s   %8s   %s\n", v, rep->phase.c_str(),
                    format_fixed(a.sensitivity).c_str(), format_fixed(a.specificity).c_str(),
                    format_fixed(a.accuracy).c_str(), a.auc ? format_fixed(*a.auc, 3).c_str() : "-");
      text << buf;
    }
    j.push_back(row);
  }
  const auto dir = ensure_out_dir(cfg);
  write_file(dir / "compare.json", j.dump(2) + "\n");
  write_file(dir / "compare.txt", text.str());
  out << text.str();
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
  };
  need(variant == 0 || variant == 34 || variant == 50 || variant == 101 || variant == 152,
       "variant must be 34, 50, 101, 152 or 0");
  for (int v : variants) need(v == 0 || v == 34 || v == 50 || v == 101 || v == 152, "unknown variant in --variants");
  need(k >= 2, "k must be at least 2");
  need(batch_size >= 1, "batch size must be positive");
  need(epochs_head >= 1, "head epochs must be at least 1");
  need(epochs_finetune >= 0, "finetune epochs must be nonnegative");
  need(lr_lo > 0 && lr_lo <= lr_hi, "need 0 < lr-lo <= lr-hi");
  need(precision == 32 || precision == 64, "precision must be 32 or 64");
  need(resolution >= 32, "resolution must be at least 32");
  need(lr_iterations >= 1, "lr iterations must be positive");
}

NetworkConfig RunConfig::network_config(int variant_override) const {
  const int v = variant_override >= 0 ? variant_override : variant;
  NetworkConfig c = v == 0 ? NetworkConfig::tiny(BlockKind::basic, resolution) : NetworkConfig::for_variant(v);
  c.input_size = resolution;
  c.dtype = dtype();
  return c;
}

PhaseConfig RunConfig::head_phase() const {
  auto p = PhaseConfig::head(seed);
  p.epochs = epochs_head;
  p.batch_size = batch_size;
  p.lr = lr_head;
  p.augment = augment;
  return p;
}

PhaseConfig RunConfig::finetune_phase() const {
  auto p = PhaseConfig::finetune(seed);
  p.epochs = epochs_finetune;
  p.batch_size = batch_size;
  p.range = {lr_lo, lr_hi};
  p.augment = augment;
  return p;
}

std::string RunConfig::snapshot() const {
  ojson j;
  j["manifest"] = manifest;
  j["variant"] = variant;
  j["k"] = k;
  j["seed"] = seed;
  j["batch_size"] = batch_size;
  j["epochs_head"] = epochs_head;
  j["epochs_finetune"] = epochs_finetune;
  j["lr_lo"] = lr_lo;
  j["lr_hi"] = lr_hi;
  j["oversample"] = oversample;
  j["augment"] = augment;
  j["precision"] = precision;
  j["init_checkpoint"] = init_checkpoint;
  j["resolution"] = resolution;
  j["lr_head"] = lr_head;
  j["lr_iterations"] = lr_iterations;
  j["out_dir"] = out_dir;
  j["checkpoint"] = checkpoint;
  j["images"] = images;
  j["variants"] = variants;
  return j.dump(2) + "\n";
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  CLI::App app{"Residual-network measles screening: data, training protocol, evaluation", "rashnet"};
  app.set_config("--config", "", "Read `key = value` lines; command-line flags win");
  app.require_subcommand(1, 1);
  // A repeated flag overrides the earlier one.
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  app.add_option("--manifest", cfg.manifest, "CSV manifest with header path,label");
  app.add_option("--variant", cfg.variant, "Network depth: 34, 50, 101, 152 (0: one block per stage)");
  app.add_option("--k", cfg.k, "Number of stratified folds");
  app.add_option("--seed", cfg.seed, "Seed for splits, initialization and shuffling");
  app.add_option("--batch-size", cfg.batch_size, "Mini-batch size");
  app.add_option("--epochs-head", cfg.epochs_head, "Epochs with the backbone frozen");
  app.add_option("--epochs-finetune", cfg.epochs_finetune, "Epochs with everything trainable (0 disables)");
  app.add_option("--lr-lo", cfg.lr_lo, "Refinement rate of the earliest layer group");
  app.add_option("--lr-hi", cfg.lr_hi, "Refinement rate of the head");
  app.add_flag("--oversample", cfg.oversample, "Duplicate minority-class training samples");
  app.add_flag("--augment", cfg.augment, "Random flips and rotations on training batches");
  app.add_option("--precision", cfg.precision, "Floating-point width: 32 or 64");
  app.add_option("--init-checkpoint", cfg.init_checkpoint, "Start training from this checkpoint");
  app.add_option("--resolution", cfg.resolution, "Square input size in pixels");
  app.add_option("--lr-head", cfg.lr_head, "Head-phase rate; omit to use the LR finder");
  app.add_option("--lr-iterations", cfg.lr_iterations, "LR finder sweep length");
  app.add_option("--out", cfg.out_dir, "Directory for artifacts");
  app.add_option("--checkpoint", cfg.checkpoint, "Checkpoint for evaluate and predict");
  app.add_option("--variants", cfg.variants, "Variants for compare-variants")->delimiter(',');

  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->fallthrough();
    return s;
  };
  auto* ingest = sub("ingest", "Validate a manifest and decode every image");
  auto* split = sub("split", "Write the stratified fold plan");
  auto* lrf = sub("lr-find", "Sweep learning rates on the first training fold");
  auto* train = sub("train", "Two-phase training over every fold");
  auto* evaluate = sub("evaluate", "Score a checkpoint on a manifest");
  auto* predict = sub("predict", "Print path,score for each image");
  predict->add_option("images", cfg.images, "Image files")->expected(0, -1);
  auto* compare = sub("compare-variants", "Run the protocol for several depths side by side");

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
    err << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    cfg.validate();
    if (ingest->parsed()) return cmd_ingest(cfg, out, err);
    if (split->parsed()) return cmd_split(cfg, out, err);
    if (lrf->parsed()) return cmd_lr_find(cfg, out, err);
    if (train->parsed()) return cmd_train(cfg, out, err);
    if (evaluate->parsed()) return cmd_evaluate(cfg, out, err);
    if (predict->parsed()) return cmd_predict(cfg, out, err);
    if (compare->parsed()) return cmd_compare(cfg, out, err);
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace rashnet
