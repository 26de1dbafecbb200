#pragma once

#include <chrono>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "linbp/attacks.hpp"
#include "linbp/data.hpp"
#include "linbp/model_lab.hpp"

namespace linbp {

// ---------------------------------------------------------------------------
// Experiment configuration (flat key=value schema shared by the CLI)
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::vector<std::string> source_paths;  // more than one = ensemble attack
  std::vector<std::string> victim_paths;

  std::string attack = "ifgsm";  // fgsm|ifgsm|pgd|mifgsm|difgsm
  AttackSpec attack_spec;

  bool linbp = false;  // linear-backward plan on the source
  int split_k = 0;
  bool renormalize = true;
  float sgm_lambda = 1.0f;

  bool ila = false;  // two-phase: named attack first, projection phase second
  std::string ila_phase1 = "ifgsm";
  int ila_iterations = 100;

  int sample_count = 500;
  bool filter_correct = true;
  uint64_t rng_seed = 0;
  int repeats = 1;

  std::string data = "synthetic";  // synthetic|cifar
  uint64_t data_seed = 7;
  int classes = 10;
  int samples_per_class = 200;
  std::vector<int> img_shape = {3, 16, 16};
  std::vector<std::string> cifar_files;

  std::string report_path;
  std::string format = "jsonl";  // jsonl|csv
  bool include_timing = false;   // timing is excluded by default so that equal
                                 // seeds give byte-identical report files

  std::map<std::string, std::string> echo;  // raw key=value pairs for the report
};

inline const std::vector<std::string>& experiment_config_keys() {
  static const std::vector<std::string> keys = {
      "source",        "victims",        "attack",        "epsilon",        "step_size",
      "iterations",    "targeted",       "target_class",  "random_init",    "momentum_mu",
      "diversity_prob", "diversity_low", "diversity_high", "linbp",         "split_k",
      "renormalize",   "sgm_lambda",     "ila",           "ila_phase1",     "ila_iterations",
      "sample_count",  "filter_correct", "rng_seed",      "repeats",        "data",
      "data_seed",     "classes",        "samples_per_class", "img_c",      "img_h",
      "img_w",         "cifar_files",    "report",        "format",         "include_timing"};
  return keys;
}

namespace detail {

inline std::vector<std::string> split_csv_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("value for '" + key + "' must be a boolean (0/1/true/false), got '" + v + "'");
}

template <typename T>
T parse_num(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out;
  is >> out;
  if (is.fail() || !is.eof())
    throw ConfigError("value for '" + key + "' is not a valid number: '" + v + "'");
  return out;
}

}  // namespace detail

/// Reads a flat key=value text file: one pair per line, '#' comments and
/// blank lines skipped.
inline std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(start, eq - start);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
    std::string val = line.substr(eq + 1);
    size_t vs = val.find_first_not_of(" \t");
    val = vs == std::string::npos ? "" : val.substr(vs);
    kv[key] = val;
  }
  return kv;
}

/// Builds a validated config from flat key=value pairs; unknown keys are a
/// usage error that lists the accepted keys.
inline ExperimentConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  ExperimentConfig c;
  c.echo = kv;
  for (const auto& [key, v] : kv) {
    if (key == "source") c.source_paths = detail::split_csv_list(v);
    else if (key == "victims") c.victim_paths = detail::split_csv_list(v);
    else if (key == "attack") c.attack = v;
    else if (key == "epsilon") c.attack_spec.epsilon = detail::parse_num<float>(key, v);
    else if (key == "step_size") c.attack_spec.step_size = detail::parse_num<float>(key, v);
    else if (key == "iterations") c.attack_spec.iterations = detail::parse_num<int>(key, v);
    else if (key == "targeted") c.attack_spec.targeted = detail::parse_bool(key, v);
    else if (key == "target_class") c.attack_spec.target_class = detail::parse_num<int>(key, v);
    else if (key == "random_init") c.attack_spec.random_init = detail::parse_bool(key, v);
    else if (key == "momentum_mu") c.attack_spec.momentum_mu = detail::parse_num<float>(key, v);
    else if (key == "diversity_prob") c.attack_spec.diversity_prob = detail::parse_num<float>(key, v);
    else if (key == "diversity_low") c.attack_spec.diversity_low = detail::parse_num<int>(key, v);
    else if (key == "diversity_high") c.attack_spec.diversity_high = detail::parse_num<int>(key, v);
    else if (key == "linbp") c.linbp = detail::parse_bool(key, v);
    else if (key == "split_k") c.split_k = detail::parse_num<int>(key, v);
    else if (key == "renormalize") c.renormalize = detail::parse_bool(key, v);
    else if (key == "sgm_lambda") c.sgm_lambda = detail::parse_num<float>(key, v);
    else if (key == "ila") c.ila = detail::parse_bool(key, v);
    else if (key == "ila_phase1") c.ila_phase1 = v;
    else if (key == "ila_iterations") c.ila_iterations = detail::parse_num<int>(key, v);
    else if (key == "sample_count") c.sample_count = detail::parse_num<int>(key, v);
    else if (key == "filter_correct") c.filter_correct = detail::parse_bool(key, v);
    else if (key == "rng_seed") c.rng_seed = detail::parse_num<uint64_t>(key, v);
    else if (key == "repeats") c.repeats = detail::parse_num<int>(key, v);
    else if (key == "data") c.data = v;
    else if (key == "data_seed") c.data_seed = detail::parse_num<uint64_t>(key, v);
    else if (key == "classes") c.classes = detail::parse_num<int>(key, v);
    else if (key == "samples_per_class") c.samples_per_class = detail::parse_num<int>(key, v);
    else if (key == "img_c") c.img_shape[0] = detail::parse_num<int>(key, v);
    else if (key == "img_h") c.img_shape[1] = detail::parse_num<int>(key, v);
    else if (key == "img_w") c.img_shape[2] = detail::parse_num<int>(key, v);
    else if (key == "cifar_files") c.cifar_files = detail::split_csv_list(v);
    else if (key == "report") c.report_path = v;
    else if (key == "format") c.format = v;
    else if (key == "include_timing") c.include_timing = detail::parse_bool(key, v);
    else {
      std::string keys;
      for (const auto& k : experiment_config_keys()) keys += k + " ";
      throw ConfigError("unknown config key '" + key + "'; valid keys: " + keys);
    }
  }
  static const std::set<std::string> attacks = {"fgsm", "ifgsm", "pgd", "mifgsm", "difgsm"};
  if (!attacks.count(c.attack))
    throw ConfigError("unknown attack '" + c.attack + "'; expected fgsm|ifgsm|pgd|mifgsm|difgsm");
  if (!attacks.count(c.ila_phase1))
    throw ConfigError("unknown ila_phase1 attack '" + c.ila_phase1 + "'");
  if (c.format != "jsonl" && c.format != "csv")
    throw ConfigError("unknown report format '" + c.format + "'; expected jsonl|csv");
  if (c.data != "synthetic" && c.data != "cifar")
    throw ConfigError("unknown data source '" + c.data + "'; expected synthetic|cifar");
  if (c.sample_count <= 0) throw ConfigError("sample_count must be positive");
  if (c.repeats <= 0) throw ConfigError("repeats must be positive");
  return c;
}

/// Attack-name aliases expand to flag presets on a copy of the base spec.
inline AttackSpec resolve_attack_alias(const std::string& name, AttackSpec spec) {
  if (name == "fgsm") {
    spec.iterations = 1;
    spec.step_size = spec.epsilon;
  } else if (name == "pgd") {
    spec.random_init = true;
  } else if (name == "mifgsm") {
    if (spec.momentum_mu <= 0.0f) spec.momentum_mu = 1.0f;
  } else if (name == "difgsm") {
    if (spec.momentum_mu <= 0.0f) spec.momentum_mu = 1.0f;
    if (spec.diversity_prob <= 0.0f) spec.diversity_prob = 0.5f;
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct EvalReport {
  struct Row {
    std::string victim_id;
    bool is_source = false;
    int n = 0;
    double fooling_rate = 0.0;
    double mean_linf = 0.0;
  };
  std::vector<Row> rows;
  std::map<std::string, std::string> config_echo;
  double wall_clock_seconds = 0.0;
  int format_version = 1;
};

namespace detail {

inline std::string fmt_rate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

inline std::string fmt_linf(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

inline void emit_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << "victim_id,is_source,n,fooling_rate,mean_linf\n";
  for (const auto& r : report.rows)
    f << r.victim_id << "," << (r.is_source ? 1 : 0) << "," << r.n << ","
      << detail::fmt_rate(r.fooling_rate) << "," << detail::fmt_linf(r.mean_linf) << "\n";
  if (!f) throw IoError("write failed for " + path);
}

/// json-lines: a header object carrying the config echo, then one object per
/// victim row. Field order is fixed; rates carry 4 decimals, distances 6.
inline void emit_report_jsonl(const EvalReport& report, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << "{\"type\":\"header\",\"format_version\":" << report.format_version;
  if (report.wall_clock_seconds > 0.0)
    f << ",\"wall_clock_seconds\":" << detail::fmt_linf(report.wall_clock_seconds);
  f << ",\"config\":{";
  bool first = true;
  for (const auto& [k, v] : report.config_echo) {
    if (!first) f << ",";
    first = false;
    f << nlohmann::json(k).dump() << ":" << nlohmann::json(v).dump();
  }
  f << "}}\n";
  for (const auto& r : report.rows)
    f << "{\"type\":\"victim\",\"victim_id\":" << nlohmann::json(r.victim_id).dump()
      << ",\"is_source\":" << (r.is_source ? "true" : "false") << ",\"n\":" << r.n
      << ",\"fooling_rate\":" << detail::fmt_rate(r.fooling_rate)
      << ",\"mean_linf\":" << detail::fmt_linf(r.mean_linf) << "}\n";
  if (!f) throw IoError("write failed for " + path);
}

inline void emit_report(const EvalReport& report, const std::string& path, const std::string& format) {
  if (format == "csv")
    emit_report_csv(report, path);
  else if (format == "jsonl")
    emit_report_jsonl(report, path);
  else
    throw ConfigError("unknown report format '" + format + "'; expected jsonl|csv");
}

inline EvalReport parse_report_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  EvalReport report;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw FormatError(path + ": invalid json line: " + line);
    const std::string type = j.value("type", "");
    if (type == "header") {
      report.format_version = j.value("format_version", 1);
      report.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
      if (j.contains("config"))
        for (auto& [k, v] : j["config"].items()) report.config_echo[k] = v.get<std::string>();
    } else if (type == "victim") {
      EvalReport::Row r;
      r.victim_id = j.at("victim_id").get<std::string>();
      r.is_source = j.at("is_source").get<bool>();
      r.n = j.at("n").get<int>();
      r.fooling_rate = j.at("fooling_rate").get<double>();
      r.mean_linf = j.at("mean_linf").get<double>();
      report.rows.push_back(std::move(r));
    } else {
      throw FormatError(path + ": unknown record type '" + type + "'");
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Transfer evaluation harness
// ---------------------------------------------------------------------------

struct EvalModels {
  std::vector<Network> sources;  // first entry is the reporting source
  std::vector<std::string> source_ids;
  std::vector<Network> victims;
  std::vector<std::string> victim_ids;
};

namespace detail {

inline AdvResult craft_sample(const EvalModels& models, const ExperimentConfig& cfg,
                              const std::string& attack_name, const Tensor& x, int y,
                              uint64_t sample_seed) {
  AttackSpec spec = resolve_attack_alias(attack_name, cfg.attack_spec);
  spec.rng_seed = sample_seed;
  const Network& src = models.sources[0];
  BackpropPlan plan = cfg.linbp
                          ? BackpropPlan::linear_from(src, cfg.split_k, cfg.renormalize, cfg.sgm_lambda)
                          : BackpropPlan::standard(src);
  AdvResult base;
  if (models.sources.size() > 1) {
    std::vector<BackpropPlan> plans;
    plans.reserve(models.sources.size());
    for (const auto& s : models.sources)
      plans.push_back(cfg.linbp
                          ? BackpropPlan::linear_from(s, cfg.split_k, cfg.renormalize, cfg.sgm_lambda)
                          : BackpropPlan::standard(s));
    std::vector<std::pair<const Network*, const BackpropPlan*>> list;
    for (size_t i = 0; i < models.sources.size(); ++i)
      list.emplace_back(&models.sources[i], &plans[i]);
    base = ifgsm_ensemble(list, x, y, spec);
  } else {
    base = ifgsm(src, plan, x, y, spec);
  }
  if (!cfg.ila) return base;
  AttackSpec phase2 = cfg.attack_spec;
  phase2.iterations = cfg.ila_iterations;
  phase2.random_init = false;
  phase2.momentum_mu = 0.0f;
  phase2.diversity_prob = 0.0f;
  phase2.rng_seed = sample_seed;
  return ila(src, cfg.split_k, x, y, base, phase2);
}

}  // namespace detail

/// Runs the full protocol on in-memory models: pick filtered evaluation
/// samples, craft adversarial examples on the source, score every model.
/// The source appears as the first (white-box) row of the report.
inline EvalReport eval_transfer(const EvalModels& models, const Dataset& pool,
                                const ExperimentConfig& cfg) {
  if (models.sources.empty()) throw ConfigError("eval_transfer: no source model");
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<const Network*> all_models;
  std::vector<std::string> all_ids;
  std::vector<bool> is_source_row;
  all_models.push_back(&models.sources[0]);
  all_ids.push_back(models.source_ids.empty() ? "source" : models.source_ids[0]);
  is_source_row.push_back(true);
  for (size_t i = 0; i < models.victims.size(); ++i) {
    all_models.push_back(&models.victims[i]);
    all_ids.push_back(i < models.victim_ids.size() ? models.victim_ids[i]
                                                   : "victim" + std::to_string(i));
    is_source_row.push_back(false);
  }

  // Correctness filter over the pool, evaluated once per model.
  std::vector<std::vector<int>> preds;
  preds.reserve(all_models.size());
  for (const Network* m : all_models) preds.push_back(predict_batch(*m, pool.images));
  std::vector<char> eligible(pool.size(), 1);
  if (cfg.filter_correct) {
    for (int i = 0; i < pool.size(); ++i)
      for (size_t m = 0; m < preds.size() && eligible[i]; ++m)
        if (preds[m][i] != pool.labels[i]) eligible[i] = 0;
  }

  const int rows_n = static_cast<int>(all_models.size());
  std::vector<double> rate_sum(rows_n, 0.0);
  double linf_sum_over_repeats = 0.0;

  for (int rep = 0; rep < cfg.repeats; ++rep) {
    const uint64_t rep_seed = cfg.rng_seed + 7919ull * static_cast<uint64_t>(rep);
    std::vector<int> order(pool.size());
    for (int i = 0; i < pool.size(); ++i) order[i] = i;
    Rng sel_rng = Rng::for_stream(rep_seed, 2);
    sel_rng.shuffle(order);
    std::vector<int> chosen;
    for (int idx : order) {
      if (!eligible[idx]) continue;
      chosen.push_back(idx);
      if (static_cast<int>(chosen.size()) == cfg.sample_count) break;
    }
    if (static_cast<int>(chosen.size()) < cfg.sample_count)
      throw EvalError("sample shortfall: requested " + std::to_string(cfg.sample_count) +
                      " correctly-classified samples, only " + std::to_string(chosen.size()) +
                      " available");

    std::vector<int> fooled(rows_n, 0);
    double linf_sum = 0.0;
    for (size_t si = 0; si < chosen.size(); ++si) {
      const Tensor x = pool.image(chosen[si]);
      const int y = pool.labels[chosen[si]];
      const AdvResult adv =
          detail::craft_sample(models, cfg, cfg.attack, x, y, rep_seed + static_cast<uint64_t>(si));
      linf_sum += adv.achieved_linf;
      for (int m = 0; m < rows_n; ++m) {
        const int pred = predict(*all_models[m], adv.x_adv);
        const bool hit = cfg.attack_spec.targeted ? pred == cfg.attack_spec.target_class : pred != y;
        fooled[m] += hit;
      }
    }
    for (int m = 0; m < rows_n; ++m)
      rate_sum[m] += static_cast<double>(fooled[m]) / cfg.sample_count;
    linf_sum_over_repeats += linf_sum / cfg.sample_count;
  }

  EvalReport report;
  report.config_echo = cfg.echo;
  for (int m = 0; m < rows_n; ++m) {
    EvalReport::Row r;
    r.victim_id = all_ids[m];
    r.is_source = is_source_row[m];
    r.n = cfg.sample_count;
    r.fooling_rate = rate_sum[m] / cfg.repeats;
    r.mean_linf = linf_sum_over_repeats / cfg.repeats;
    report.rows.push_back(std::move(r));
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!cfg.include_timing) report.wall_clock_seconds = 0.0;
  return report;
}

/// Loads every checkpoint named by the config (fail-fast), builds the
/// evaluation pool, runs eval_transfer and writes the report.
inline EvalReport run_eval(const ExperimentConfig& cfg) {
  if (cfg.source_paths.empty()) throw ConfigError("eval: missing 'source' checkpoint path");
  if (cfg.victim_paths.empty()) throw ConfigError("eval: missing 'victims' checkpoint paths");
  EvalModels models;
  for (const auto& p : cfg.source_paths) {
    models.sources.push_back(load_checkpoint(p).net);
    models.source_ids.push_back(p);
  }
  for (const auto& p : cfg.victim_paths) {
    models.victims.push_back(load_checkpoint(p).net);
    models.victim_ids.push_back(p);
  }
  Dataset pool;
  if (cfg.data == "synthetic") {
    pool = make_synthetic(cfg.classes, cfg.samples_per_class, cfg.img_shape, cfg.data_seed);
  } else {
    if (cfg.cifar_files.empty()) throw ConfigError("eval: data=cifar needs cifar_files");
    pool = load_cifar10_bin(cfg.cifar_files, "test");
  }
  EvalReport report = eval_transfer(models, pool, cfg);
  if (!cfg.report_path.empty()) emit_report(report, cfg.report_path, cfg.format);
  return report;
}

}  // namespace linbp
