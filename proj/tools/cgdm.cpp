// cgdm: data generation, training, the ablation bench, gradient checks and
// embedding export from the command line.
//
// Exit codes: 0 success, 1 configuration error, 2 run failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "cgdm/cgdm.hpp"

namespace fs = std::filesystem;
using namespace cgdm;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRunFailure = 2;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string variant;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_variant) {
  cmd->add_option("--config", args.config, "experiment config file (key = value lines)");
  cmd->add_option("--seed", args.seed, "seed; overrides the config's seed list");
  cmd->add_option("--out", args.out, "output directory; overrides output_dir");
  if (with_variant) cmd->add_option("--variant", args.variant, "source_only | mcd | cgdm_no_selfsup | cgdm_no_gdm | cgdm");
}

ExperimentConfig resolve(const CommonArgs& args) {
  ExperimentConfig cfg = args.config.empty() ? ExperimentConfig{} : load_experiment_config(args.config);
  if (args.seed) cfg.seeds = {*args.seed};
  if (!args.out.empty()) cfg.output_dir = args.out;
  if (!args.variant.empty()) cfg.variants = {parse_variant(args.variant)};
  cfg.validate();
  return cfg;
}

int gen_data(const CommonArgs& args) {
  const ExperimentConfig cfg = resolve(args);
  fs::create_directories(cfg.output_dir);
  for (std::uint64_t seed : cfg.seeds) {
    const DomainPair data = make_datasets(cfg.dataset, seed);
    const std::string suffix = cfg.seeds.size() > 1 ? "_seed" + std::to_string(seed) : "";
    const fs::path src = fs::path(cfg.output_dir) / ("source" + suffix + ".csv");
    const fs::path tgt = fs::path(cfg.output_dir) / ("target" + suffix + ".csv");
    save_dataset_csv(data.source, src.string());
    save_dataset_csv(data.target, tgt.string());
    std::cout << "wrote " << src.string() << " (" << data.source.size() << " rows), " << tgt.string() << " ("
              << data.target.size() << " rows)\n";
  }
  return kOk;
}

int train_cmd(const CommonArgs& args, bool save_pseudo) {
  const ExperimentConfig cfg = resolve(args);
  const Variant variant = cfg.variants.front();
  const std::uint64_t seed = cfg.seeds.front();
  fs::create_directories(cfg.output_dir);

  const DomainPair data = make_datasets(cfg.dataset, seed);
  TrainConfig tc = apply_variant(cfg.train, variant);
  tc.seed = seed;
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochMetrics& m) {
    std::printf("epoch %3zu  cls %.4f  dis %.4f  gd %.4f  cb %.4f  target_acc %.4f  pseudo_acc %.4f\n", m.epoch,
                m.loss_cls, m.loss_dis, m.loss_gd, m.loss_cb, m.target_acc, m.pseudo_acc);
    std::fflush(stdout);
  };
  const TrainResult result = train(data.source, data.target, tc, hooks);

  const fs::path metrics = fs::path(cfg.output_dir) / metrics_filename(variant, seed);
  write_metrics_csv(metrics.string(), result.metrics);
  const fs::path ckpt = fs::path(cfg.output_dir) / (to_string(variant) + "_seed" + std::to_string(seed) + ".ckpt");
  save_checkpoint(ckpt.string(), result.model);
  if (save_pseudo && !result.failed) {
    const fs::path pl = fs::path(cfg.output_dir) / "pseudo_labels.csv";
    write_pseudo_labels_csv(pl.string(), pseudo_label_epoch(result.model, data.target.unlabeled()));
  }
  std::cout << "metrics: " << metrics.string() << "\ncheckpoint: " << ckpt.string() << '\n';
  if (result.failed) {
    std::cerr << "run failed: " << result.failure << '\n';
    return kRunFailure;
  }
  return kOk;
}

int bench_cmd(const CommonArgs& args) {
  const ExperimentConfig cfg = resolve(args);
  const ExperimentReport report = run_experiment(cfg);
  std::cout << summary_table(report.summary);
  for (const RunRecord& r : report.runs) {
    if (r.failed) std::cerr << to_string(r.variant) << " seed " << r.seed << " failed: " << r.failure << '\n';
  }
  std::cout << "results in " << cfg.output_dir << '\n';
  return report.any_failed ? kRunFailure : kOk;
}

void print_report(const char* name, const GradCheckReport& r) {
  std::printf("%-14s %s  instances %zu  entries %zu  failures %zu  max_rel %.3g  max_abs %.3g  %.2fs\n", name,
              r.passed() ? "ok  " : "FAIL", r.instances, r.entries, r.failures, r.max_rel_error, r.max_abs_error,
              r.seconds);
}

int gradcheck_cmd(std::uint64_t seed, std::size_t instances) {
  GradCheckOptions first;
  first.seed = seed;
  first.instances = instances;
  GradCheckOptions second = first;
  second.rel_tol = 1e-3;
  second.instances = std::max<std::size_t>(1, instances / 2);
  const GradCheckReport a = check_first_order(first);
  const GradCheckReport b = check_second_order(second);
  const GradCheckReport c = check_linear_head_oracle(first);
  print_report("first-order", a);
  print_report("second-order", b);
  print_report("oracle", c);
  return a.passed() && b.passed() && c.passed() ? kOk : kRunFailure;
}

int export_cmd(const CommonArgs& args, const std::string& checkpoint) {
  const ExperimentConfig cfg = resolve(args);
  const std::uint64_t seed = cfg.seeds.front();
  const DomainPair data = make_datasets(cfg.dataset, seed);
  TrainConfig tc = apply_variant(cfg.train, cfg.variants.front());
  tc.seed = seed;
  Model model;
  if (!checkpoint.empty()) {
    model = init_state(tc, data.source.dim(), data.source.num_classes).model;
    load_checkpoint(checkpoint, model);
  } else {
    const TrainResult result = train(data.source, data.target, tc);
    if (result.failed) {
      std::cerr << "run failed: " << result.failure << '\n';
      return kRunFailure;
    }
    model = result.model;
  }
  fs::create_directories(cfg.output_dir);
  const fs::path path = fs::path(cfg.output_dir) / "embeddings.csv";
  export_embeddings(model.generator, data.source, path.string());
  export_embeddings(model.generator, data.target, path.string(), true);
  std::cout << "wrote " << path.string() << " (" << data.source.size() + data.target.size() << " rows)\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-domain gradient discrepancy minimization on synthetic domain shifts"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, bench_args, export_args;
  bool save_pseudo = false;
  std::uint64_t gc_seed = 1;
  std::size_t gc_instances = 20;
  std::string checkpoint;

  auto* gen = app.add_subcommand("gen-data", "write source/target dataset CSVs");
  add_common(gen, gen_args, false);
  auto* tr = app.add_subcommand("train", "train one variant on one seed");
  add_common(tr, train_args, true);
  tr->add_flag("--pseudo-labels", save_pseudo, "also write the final pseudo labels");
  auto* bench = app.add_subcommand("bench", "run every configured variant and seed");
  add_common(bench, bench_args, true);
  auto* gc = app.add_subcommand("gradcheck", "finite-difference and closed-form gradient checks");
  gc->add_option("--seed", gc_seed, "seed for the random instances");
  gc->add_option("--instances", gc_instances, "number of random instances")->check(CLI::PositiveNumber);
  auto* ex = app.add_subcommand("export-embeddings", "write generator features of both domains");
  add_common(ex, export_args, true);
  ex->add_option("--checkpoint", checkpoint, "checkpoint written by train with the same config; trains when omitted");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) return gen_data(gen_args);
    if (*tr) return train_cmd(train_args, save_pseudo);
    if (*bench) return bench_cmd(bench_args);
    if (*gc) return gradcheck_cmd(gc_seed, gc_instances);
    if (*ex) return export_cmd(export_args, checkpoint);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRunFailure;
  }
  return kOk;
}
