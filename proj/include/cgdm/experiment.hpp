#pragma once

// Experiment configuration, per-run metrics files, the variant/seed matrix
// and embedding export.
//
// Config files are flat "key = value" lines; '#' starts a comment; unknown
// keys are rejected. Lists are comma separated.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cgdm/datasets.hpp"
#include "cgdm/domain.hpp"
#include "cgdm/errors.hpp"
#include "cgdm/nn.hpp"
#include "cgdm/trainer.hpp"

namespace cgdm {

enum class Variant { source_only, mcd, cgdm_no_selfsup, cgdm_no_gdm, cgdm };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::source_only, Variant::mcd, Variant::cgdm_no_selfsup,
                                      Variant::cgdm_no_gdm, Variant::cgdm};
  return v;
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::source_only: return "source_only";
    case Variant::mcd: return "mcd";
    case Variant::cgdm_no_selfsup: return "cgdm_no_selfsup";
    case Variant::cgdm_no_gdm: return "cgdm_no_gdm";
    case Variant::cgdm: return "cgdm";
  }
  return "?";
}

inline Variant parse_variant(const std::string& name) {
  for (Variant v : all_variants()) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + name + "'");
}

// Switches the ablation flags of `base` to produce the named variant.
inline TrainConfig apply_variant(TrainConfig cfg, Variant v) {
  switch (v) {
    case Variant::source_only:
      cfg.adversarial = false;
      cfg.enable_selfsup = cfg.enable_gdm = cfg.enable_class_balance = false;
      break;
    case Variant::mcd:
      cfg.adversarial = true;
      cfg.enable_selfsup = cfg.enable_gdm = cfg.enable_class_balance = false;
      break;
    case Variant::cgdm_no_selfsup:
      cfg.adversarial = true;
      cfg.enable_selfsup = false;
      cfg.enable_gdm = true;
      break;
    case Variant::cgdm_no_gdm:
      cfg.adversarial = true;
      cfg.enable_selfsup = true;
      cfg.enable_gdm = false;
      break;
    case Variant::cgdm:
      cfg.adversarial = true;
      cfg.enable_selfsup = cfg.enable_gdm = true;
      break;
  }
  return cfg;
}

struct DatasetSpec {
  std::string generator = "two_moons";  // two_moons | blobs | csv
  std::size_t n = 500;                  // two_moons: samples per domain
  double noise = 0.1;
  double rotation_deg = 35.0;
  BlobSpec blobs;
  std::string source_csv;
  std::string target_csv;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  TrainConfig train;
  std::string output_dir = "out";
  std::vector<std::uint64_t> seeds{1};
  std::vector<Variant> variants{Variant::cgdm};
  std::size_t threads = 1;

  void validate() const {
    train.validate();
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (variants.empty()) throw ConfigError("variants must not be empty");
    if (threads == 0) throw ConfigError("threads must be >= 1");
    if (dataset.generator == "csv" && (dataset.source_csv.empty() || dataset.target_csv.empty())) {
      throw ConfigError("csv datasets need source_csv and target_csv");
    }
    if (dataset.generator != "two_moons" && dataset.generator != "blobs" && dataset.generator != "csv") {
      throw ConfigError("unknown dataset generator '" + dataset.generator + "'");
    }
  }
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& value, std::size_t line) {
  std::istringstream is(value);
  T out{};
  if (!(is >> out) || !(is >> std::ws).eof()) {
    throw ConfigError("line " + std::to_string(line) + ": bad value '" + value + "' for " + key);
  }
  if constexpr (std::is_unsigned_v<T>) {
    if (value.find('-') != std::string::npos) {
      throw ConfigError("line " + std::to_string(line) + ": " + key + " must be non-negative");
    }
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value, std::size_t line) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  throw ConfigError("line " + std::to_string(line) + ": " + key + " expects true/false, got '" + value + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value, std::size_t line) {
  std::vector<T> out;
  std::istringstream is(value);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_number<T>(key, item, line));
  }
  return out;
}

}  // namespace detail

inline void apply_config_entry(ExperimentConfig& cfg, const std::string& key, const std::string& value,
                               std::size_t line) {
  using detail::parse_bool;
  using detail::parse_list;
  using detail::parse_number;
  TrainConfig& t = cfg.train;
  DatasetSpec& d = cfg.dataset;
  if (key == "dataset") d.generator = value;
  else if (key == "n") d.n = parse_number<std::size_t>(key, value, line);
  else if (key == "noise") d.noise = parse_number<double>(key, value, line);
  else if (key == "rotation_deg") d.rotation_deg = parse_number<double>(key, value, line);
  else if (key == "classes") d.blobs.classes = parse_number<std::size_t>(key, value, line);
  else if (key == "dim") d.blobs.dim = parse_number<std::size_t>(key, value, line);
  else if (key == "per_class") d.blobs.per_class = parse_number<std::size_t>(key, value, line);
  else if (key == "separation") d.blobs.separation = parse_number<double>(key, value, line);
  else if (key == "shift") d.blobs.shift = parse_list<double>(key, value, line);
  else if (key == "cov_scale") d.blobs.cov_scale = parse_number<double>(key, value, line);
  else if (key == "source_csv") d.source_csv = value;
  else if (key == "target_csv") d.target_csv = value;
  else if (key == "alpha") t.alpha = parse_number<double>(key, value, line);
  else if (key == "beta") t.beta = parse_number<double>(key, value, line);
  else if (key == "class_balance_weight") t.class_balance_weight = parse_number<double>(key, value, line);
  else if (key == "lr") t.lr = parse_number<double>(key, value, line);
  else if (key == "generator_lr") t.generator_lr = parse_number<double>(key, value, line);
  else if (key == "momentum") t.momentum = parse_number<double>(key, value, line);
  else if (key == "weight_decay") t.weight_decay = parse_number<double>(key, value, line);
  else if (key == "batch_size") t.batch_size = parse_number<std::size_t>(key, value, line);
  else if (key == "epochs") t.epochs = parse_number<std::size_t>(key, value, line);
  else if (key == "step3_repeats") t.step3_repeats = parse_number<std::size_t>(key, value, line);
  else if (key == "warmup_epochs") t.warmup_epochs = parse_number<std::size_t>(key, value, line);
  else if (key == "enable_selfsup") t.enable_selfsup = parse_bool(key, value, line);
  else if (key == "enable_gdm") t.enable_gdm = parse_bool(key, value, line);
  else if (key == "enable_class_balance") t.enable_class_balance = parse_bool(key, value, line);
  else if (key == "conditional_gdm") t.conditional_gdm = parse_bool(key, value, line);
  else if (key == "record_wall_time") t.record_wall_time = parse_bool(key, value, line);
  else if (key == "generator_hidden") t.generator_hidden = parse_list<std::size_t>(key, value, line);
  else if (key == "classifier_hidden") t.classifier_hidden = parse_list<std::size_t>(key, value, line);
  else if (key == "seed") cfg.seeds = {parse_number<std::uint64_t>(key, value, line)};
  else if (key == "seeds") cfg.seeds = parse_list<std::uint64_t>(key, value, line);
  else if (key == "variants") {
    cfg.variants.clear();
    std::istringstream is(value);
    std::string item;
    while (std::getline(is, item, ',')) {
      item = detail::trim(item);
      if (!item.empty()) cfg.variants.push_back(parse_variant(item));
    }
  } else if (key == "output_dir") cfg.output_dir = value;
  else if (key == "threads") cfg.threads = parse_number<std::size_t>(key, value, line);
  else throw ConfigError("line " + std::to_string(line) + ": unknown key '" + key + "'");
}

inline ExperimentConfig parse_experiment_config(std::istream& is) {
  ExperimentConfig cfg;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(is, raw)) {
    ++line;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string text = detail::trim(raw);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line) + ": expected key = value");
    const std::string key = detail::trim(text.substr(0, eq));
    const std::string value = detail::trim(text.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line) + ": empty key");
    apply_config_entry(cfg, key, value, line);
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path);
  return parse_experiment_config(is);
}

// Source and target sets for one seed.
inline DomainPair make_datasets(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.generator == "two_moons") return make_two_moons_pair(spec.n, spec.noise, spec.rotation_deg, derive_seed(seed, 100));
  if (spec.generator == "blobs") return make_shifted_blobs(spec.blobs, derive_seed(seed, 100));
  if (spec.generator == "csv") {
    DomainPair pair{load_dataset_csv(spec.source_csv, DomainTag::source),
                    load_dataset_csv(spec.target_csv, DomainTag::target)};
    if (!pair.source.labeled()) throw ConfigError("source dataset must have a label column");
    if (pair.target.labeled()) {
      const std::size_t k = std::max(pair.source.num_classes, pair.target.num_classes);
      pair.source.num_classes = pair.target.num_classes = k;
    }
    return pair;
  }
  throw ConfigError("unknown dataset generator '" + spec.generator + "'");
}

inline const char* metrics_header() { return "epoch,loss_cls,loss_dis,loss_gd,loss_cb,target_acc,pseudo_acc,seconds"; }

inline void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& metrics) {
  os << metrics_header() << '\n';
  for (const EpochMetrics& m : metrics) {
    os << m.epoch << ',' << format_double(m.loss_cls) << ',' << format_double(m.loss_dis) << ','
       << format_double(m.loss_gd) << ',' << format_double(m.loss_cb) << ',' << format_double(m.target_acc) << ','
       << format_double(m.pseudo_acc) << ',' << format_double(m.seconds) << '\n';
  }
}

inline void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& metrics) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  write_metrics_csv(os, metrics);
  if (!os) throw IoError("write failed for " + path);
}

inline std::vector<EpochMetrics> read_metrics_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(is, line) || line != metrics_header()) throw ParseError(1, "unexpected metrics header");
  std::vector<EpochMetrics> out;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 8) throw ParseError(line_no, "expected 8 fields");
    EpochMetrics m;
    m.epoch = static_cast<std::size_t>(detail::parse_double(f[0], line_no));
    m.loss_cls = detail::parse_double(f[1], line_no);
    m.loss_dis = detail::parse_double(f[2], line_no);
    m.loss_gd = detail::parse_double(f[3], line_no);
    m.loss_cb = detail::parse_double(f[4], line_no);
    m.target_acc = detail::parse_double(f[5], line_no);
    m.pseudo_acc = detail::parse_double(f[6], line_no);
    m.seconds = detail::parse_double(f[7], line_no);
    out.push_back(m);
  }
  return out;
}

// CSV: sample_id,domain,label,f0..f{d_feat-1} of generator outputs.
inline void export_embeddings(const Mlp& generator, const DomainSet& set, const std::string& path,
                              bool append = false) {
  if (set.size() == 0) throw ContractError("export_embeddings of an empty set");
  const Tensor feats = forward(generator.detached(), set.features);
  const std::size_t d = feats.shape()[1];
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  if (!append) {
    os << "sample_id,domain,label";
    for (std::size_t j = 0; j < d; ++j) os << ",f" << j;
    os << '\n';
  }
  for (std::size_t i = 0; i < set.size(); ++i) {
    os << i << ',' << to_string(set.domain) << ',';
    if (set.labeled()) os << (*set.labels)[i];
    for (std::size_t j = 0; j < d; ++j) os << ',' << format_double(feats[i * d + j]);
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

struct RunRecord {
  Variant variant = Variant::cgdm;
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> metrics;
  double final_target_acc = std::numeric_limits<double>::quiet_NaN();
  bool failed = false;
  std::string failure;
  std::string metrics_path;
};

struct VariantSummary {
  Variant variant = Variant::cgdm;
  std::size_t runs = 0;
  std::size_t failed = 0;
  double mean_acc = std::numeric_limits<double>::quiet_NaN();
  double std_acc = std::numeric_limits<double>::quiet_NaN();
};

struct ExperimentReport {
  std::vector<RunRecord> runs;  // variant-major, then seed, in config order
  std::vector<VariantSummary> summary;
  bool any_failed = false;

  const VariantSummary& of(Variant v) const {
    for (const auto& s : summary) {
      if (s.variant == v) return s;
    }
    throw ContractError("variant " + to_string(v) + " not in report");
  }
  std::vector<const RunRecord*> runs_of(Variant v) const {
    std::vector<const RunRecord*> out;
    for (const auto& r : runs) {
      if (r.variant == v) out.push_back(&r);
    }
    return out;
  }
};

inline std::string metrics_filename(Variant v, std::uint64_t seed) {
  return to_string(v) + "_seed" + std::to_string(seed) + ".csv";
}

// Mean and sample standard deviation of the final target accuracies.
inline std::vector<VariantSummary> summarize(const std::vector<RunRecord>& runs, const std::vector<Variant>& variants) {
  std::vector<VariantSummary> out;
  for (Variant v : variants) {
    VariantSummary s;
    s.variant = v;
    std::vector<double> accs;
    for (const RunRecord& r : runs) {
      if (r.variant != v) continue;
      s.runs++;
      if (r.failed) s.failed++;
      else if (std::isfinite(r.final_target_acc)) accs.push_back(r.final_target_acc);
    }
    if (!accs.empty()) {
      double total = 0.0;
      for (double a : accs) total += a;
      s.mean_acc = total / static_cast<double>(accs.size());
      double ss = 0.0;
      for (double a : accs) ss += (a - s.mean_acc) * (a - s.mean_acc);
      s.std_acc = accs.size() > 1 ? std::sqrt(ss / static_cast<double>(accs.size() - 1)) : 0.0;
    }
    out.push_back(s);
  }
  return out;
}

inline void write_summary_csv(std::ostream& os, const std::vector<VariantSummary>& summary) {
  os << "variant,runs,failed,mean_target_acc,std_target_acc\n";
  for (const auto& s : summary) {
    os << to_string(s.variant) << ',' << s.runs << ',' << s.failed << ',' << format_double(s.mean_acc) << ','
       << format_double(s.std_acc) << '\n';
  }
}

inline std::string summary_table(const std::vector<VariantSummary>& summary) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-18s %5s %7s %14s\n", "variant", "runs", "failed", "target acc (%)");
  os << buf;
  for (const auto& s : summary) {
    std::snprintf(buf, sizeof buf, "%-18s %5zu %7zu %8.2f +- %.2f\n", to_string(s.variant).c_str(), s.runs, s.failed,
                  100.0 * s.mean_acc, 100.0 * s.std_acc);
    os << buf;
  }
  return os.str();
}

inline RunRecord run_single(const ExperimentConfig& cfg, Variant variant, std::uint64_t seed) {
  RunRecord rec;
  rec.variant = variant;
  rec.seed = seed;
  const DomainPair data = make_datasets(cfg.dataset, seed);
  TrainConfig tc = apply_variant(cfg.train, variant);
  tc.seed = seed;
  const TrainResult result = train(data.source, data.target, tc);
  rec.metrics = result.metrics;
  rec.failed = result.failed;
  rec.failure = result.failure;
  if (!rec.failed && !rec.metrics.empty()) rec.final_target_acc = rec.metrics.back().target_acc;
  return rec;
}

// Runs every (variant, seed) pair, writes one metrics CSV per run plus
// summary.csv into cfg.output_dir. Runs are independent and may execute on
// cfg.threads worker threads; output order does not depend on scheduling.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.output_dir);

  struct Job {
    Variant variant;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (Variant v : cfg.variants) {
    for (std::uint64_t s : cfg.seeds) jobs.push_back({v, s});
  }
  std::vector<RunRecord> records(jobs.size());
  std::vector<std::string> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        records[i] = run_single(cfg, jobs[i].variant, jobs[i].seed);
      } catch (const std::exception& e) {
        records[i].variant = jobs[i].variant;
        records[i].seed = jobs[i].seed;
        records[i].failed = true;
        records[i].failure = e.what();
      }
    }
  };
  const std::size_t n_threads = std::min(cfg.threads, jobs.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  ExperimentReport report;
  for (RunRecord& r : records) {
    r.metrics_path = (std::filesystem::path(cfg.output_dir) / metrics_filename(r.variant, r.seed)).string();
    write_metrics_csv(r.metrics_path, r.metrics);
    report.any_failed = report.any_failed || r.failed;
  }
  report.runs = std::move(records);
  report.summary = summarize(report.runs, cfg.variants);
  std::ofstream os(std::filesystem::path(cfg.output_dir) / "summary.csv");
  if (!os) throw IoError("cannot write summary in " + cfg.output_dir);
  write_summary_csv(os, report.summary);
  return report;
}

}  // namespace cgdm
