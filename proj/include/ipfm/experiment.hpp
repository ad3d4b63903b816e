#pragma once

// Experiment orchestration: flat key-value configs, artifact IO, the
// evaluation protocol and the (seed, D, alpha, nfe) study matrix.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ipfm/datasets.hpp"
#include "ipfm/distill.hpp"
#include "ipfm/metrics.hpp"
#include "ipfm/teacher.hpp"

namespace ipfm {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Flat key-value files: `key = value`, `#` comments, lists as `[a, b]` or `a, b`.

class KeyValues {
 public:
  static KeyValues parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty() || line.front() == '[') continue;  // blank or table header
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
  }
  static KeyValues load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& key, std::string value) { values_[key] = unquote(trim(value)); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string str(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double num(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : to_double(key, it->second);
  }
  std::size_t count(const std::string& key, std::size_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const double v = to_double(key, it->second);
    if (v < 0 || v != std::floor(v)) throw ConfigError("config key " + key + ": expected a nonnegative integer");
    return static_cast<std::size_t>(v);
  }
  std::vector<std::string> list(const std::string& key, const std::vector<std::string>& fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::string v = it->second;
    if (!v.empty() && v.front() == '[') v.erase(0, 1);
    if (!v.empty() && v.back() == ']') v.pop_back();
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = unquote(trim(item));
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  static double to_double(const std::string& key, const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') throw ConfigError("config key " + key + ": not a number: " + s);
    return v;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }
  static std::string unquote(const std::string& s) {
    if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front())
      return s.substr(1, s.size() - 2);
    return s;
  }
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Artifact IO

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot write " + tmp.string());
    f << text;
    if (!f) throw ConfigError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::string samples_to_csv(const Samples& s) {
  std::string out;
  for (Eigen::Index i = 0; i < s.rows(); ++i) out += (i ? ",x" : "x") + std::to_string(i);
  out += '\n';
  char buf[40];
  for (Eigen::Index j = 0; j < s.cols(); ++j) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", s(i, j));
      if (i) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline Samples samples_from_csv(const fs::path& path) {
  const ChargeSet cs = load_charge_set_csv(path.string());
  return charges_as_samples(cs);
}

inline std::string serialize_denoiser(const Denoiser& d) {
  std::string out = "IPFMDEN2";
  detail::put_le(out, d.sigma_data);
  detail::put_le(out, d.tail_margin);
  out += serialize_mlp(d.net);
  return out;
}

inline Denoiser deserialize_denoiser(const std::string& blob) {
  if (blob.size() < 24 || blob.compare(0, 8, "IPFMDEN2") != 0)
    throw ConfigError("denoiser checkpoint: bad magic");
  std::size_t pos = 8;
  const double sd = detail::get_le<double>(blob, pos);
  const double margin = detail::get_le<double>(blob, pos);
  return Denoiser{deserialize_mlp(blob.substr(pos)), sd, margin};
}

inline nlohmann::json to_json(const MetricReport& m) {
  return nlohmann::json{{"energy_distance", m.energy_distance}, {"sliced_w2", m.sliced_w2},
                        {"mean_gap", m.mean_gap},               {"cov_gap", m.cov_gap},
                        {"sample_count", m.sample_count}};
}

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  std::string dataset = "eight_gaussians";  // builtin name or CSV path
  std::size_t n_points = 4000;
  std::size_t data_dim = 0;  // CSV only; 0 infers from the file
  std::uint64_t data_seed = 1;
  std::vector<std::string> d_values{"inf"};
  std::vector<double> alphas{1.0};
  std::vector<std::size_t> nfes{1};
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs/default";
  std::string teacher_mode = "network";  // network | oracle
  TeacherConfig teacher{};
  std::uint64_t teacher_seed = 7;
  DistillConfig distill{};
  InitMode init = InitMode::CopyNetwork;
  std::size_t eval_count = 10000;
  std::size_t eval_repeats = 3;
  std::size_t ode_grid_points = 19;  // Heun NFE = 2K - 3 = 35
  std::size_t projections = 256;

  bool dataset_is_builtin() const {
    for (const auto& n : builtin_dataset_names())
      if (n == dataset) return true;
    return false;
  }

  void validate() const {
    if (seeds.empty()) throw ConfigError("experiment: seed list is empty");
    if (d_values.empty() || alphas.empty() || nfes.empty())
      throw ConfigError("experiment: D, alpha and nfe lists must be nonempty");
    if (!dataset_is_builtin() && !fs::exists(dataset))
      throw ConfigError("experiment: dataset is neither a builtin name nor an existing file: " + dataset);
    if (teacher_mode != "network" && teacher_mode != "oracle")
      throw ConfigError("experiment: teacher_mode must be network or oracle");
    if (eval_count == 0 || eval_repeats == 0) throw ConfigError("experiment: eval_count and eval_repeats must be >= 1");
    if (ode_grid_points < 2) throw ConfigError("experiment: ode_grid_points must be >= 2");
    distill.validate();
  }

  fs::path output_root() const {
    fs::path p(output_dir);
    if (const char* root = std::getenv("IPFM_OUTPUT_ROOT"); root && *root && p.is_relative()) p = fs::path(root) / p;
    return p;
  }
};

inline Activation parse_activation(const std::string& s) {
  if (s == "silu") return Activation::Silu;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation: " + s);
}

inline ExperimentConfig experiment_config_from(const KeyValues& kv) {
  ExperimentConfig c;
  c.dataset = kv.str("dataset", c.dataset);
  c.n_points = kv.count("n_points", c.n_points);
  c.data_dim = kv.count("data_dim", c.data_dim);
  c.data_seed = kv.count("data_seed", c.data_seed);
  c.d_values = kv.list("D", c.d_values);
  if (kv.has("alpha")) {
    c.alphas.clear();
    for (const auto& a : kv.list("alpha", {})) c.alphas.push_back(KeyValues::to_double("alpha", a));
  }
  if (kv.has("nfe")) {
    c.nfes.clear();
    for (const auto& a : kv.list("nfe", {})) c.nfes.push_back(static_cast<std::size_t>(KeyValues::to_double("nfe", a)));
  }
  if (kv.has("seeds")) {
    c.seeds.clear();
    for (const auto& a : kv.list("seeds", {}))
      c.seeds.push_back(static_cast<std::uint64_t>(KeyValues::to_double("seeds", a)));
  }
  c.output_dir = kv.str("output_dir", c.output_dir);
  c.teacher_mode = kv.str("teacher_mode", c.teacher_mode);
  c.teacher_seed = kv.count("teacher_seed", c.teacher_seed);

  TeacherConfig& t = c.teacher;
  t.p_mean = kv.num("p_mean", t.p_mean);
  t.p_std = kv.num("p_std", t.p_std);
  t.lr = kv.num("teacher_lr", t.lr);
  t.batch = kv.count("teacher_batch", t.batch);
  t.steps = kv.count("teacher_steps", t.steps);
  t.hidden = kv.count("hidden", t.hidden);
  t.tail_margin = kv.num("tail_margin", t.tail_margin);
  t.depth = kv.count("depth", t.depth);
  t.activation = parse_activation(kv.str("activation", "silu"));

  DistillConfig& d = c.distill;
  d.budget = kv.count("budget", d.budget);
  d.batch = kv.count("batch", d.batch);
  d.lr_student = kv.num("lr_student", d.lr_student);
  d.lr_generator = kv.num("lr_generator", d.lr_generator);
  d.lr_final_fraction = kv.num("lr_final_fraction", d.lr_final_fraction);
  d.generator_ema = kv.num("generator_ema", d.generator_ema);
  d.student_updates_per_generator_update = kv.count("student_ratio", d.student_updates_per_generator_update);
  d.eval_every = kv.count("eval_every", d.eval_every);
  d.eval_samples = kv.count("eval_samples", d.eval_samples);
  d.sigma_init = kv.num("sigma_init", d.sigma_init);
  d.multistep_sigma_min = kv.num("multistep_sigma_min", d.multistep_sigma_min);
  d.generator_schedule.t_max = kv.num("t_max", d.generator_schedule.t_max);
  d.generator_schedule.sigma_min = kv.num("sigma_min", d.generator_schedule.sigma_min);
  d.generator_schedule.sigma_max = kv.num("sigma_max", d.generator_schedule.sigma_max);
  d.generator_schedule.rho = kv.num("rho", d.generator_schedule.rho);
  const std::string w = kv.str("weighting", "adaptive");
  if (w == "adaptive") d.weighting = GeneratorWeighting::AdaptiveL1;
  else if (w == "constant") d.weighting = GeneratorWeighting::Constant;
  else throw ConfigError("weighting must be adaptive or constant");
  const std::string init = kv.str("init", "copy");
  if (init == "copy") c.init = InitMode::CopyNetwork;
  else if (init == "random") c.init = InitMode::Random;
  else throw ConfigError("init must be copy or random");

  c.eval_count = kv.count("eval_count", c.eval_count);
  c.eval_repeats = kv.count("eval_repeats", c.eval_repeats);
  c.ode_grid_points = kv.count("ode_grid_points", c.ode_grid_points);
  c.projections = kv.count("projections", c.projections);
  return c;
}

// ---------------------------------------------------------------------------
// Evaluation protocol: `repeats` independent (generated, data) draws of `count`
// samples each; the report with the smallest energy distance is returned.

using Generate = std::function<Samples(std::size_t, RngState)>;

inline MetricReport evaluate_protocol(const Generate& generate, const ChargeSet& data, std::size_t count,
                                      std::size_t repeats, std::size_t projections, RngState rng) {
  MetricReport best{};
  for (std::size_t r = 0; r < repeats; ++r) {
    const Samples g = generate(count, rng.split("generated", r));
    const Samples d = draw_from_charges(data, count, rng.split("data", r));
    const MetricReport m = compute_metrics(g, d, rng.split("metrics", r), projections);
    if (r == 0 || m.energy_distance < best.energy_distance) best = m;
  }
  return best;
}

inline ChargeSet load_dataset(const ExperimentConfig& c) {
  if (c.dataset_is_builtin()) return builtin_dataset(c.dataset, c.n_points, RngState{c.data_seed, 0, 0});
  return load_charge_set_csv(c.dataset, c.data_dim ? std::optional<std::size_t>(c.data_dim) : std::nullopt);
}

// Network teacher for one D, loaded from `cache` when present.
inline Denoiser train_or_load_teacher(const ChargeSet& data, const DimSpec& spec, const TeacherConfig& tcfg,
                                      std::uint64_t seed, const fs::path& cache) {
  if (!cache.empty() && fs::exists(cache)) {
    Denoiser d = deserialize_denoiser(read_text(cache));
    if (d.net.layer_widths == default_widths(spec.data_dim, tcfg.hidden, tcfg.depth)) return d;
  }
  TeacherConfig cfg = tcfg;
  cfg.sigma_data = empirical_sigma_data(data);
  Denoiser d = train_denoiser(charge_sampler(data), spec, cfg, RngState{seed, 0, 0}.split("teacher").split(spec.d_label()));
  if (!cache.empty()) write_text_atomic(cache, serialize_denoiser(d));
  return d;
}

struct SummaryRow {
  std::string kind;  // distill | teacher_ode
  std::string D;
  double alpha = 0.0;
  std::size_t nfe = 0;
  std::uint64_t seed = 0;
  std::string status = "ok";
  MetricReport metrics{};
  double initial_energy_distance = 0.0;
};

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "kind,D,alpha,nfe,seed,status,energy_distance,sliced_w2,initial_energy_distance\n";
  char buf[256];
  for (const auto& r : rows) {
    std::string status = r.status;
    for (auto& ch : status)
      if (ch == ',' || ch == '\n') ch = ';';
    std::snprintf(buf, sizeof buf, "%s,%s,%.6g,%zu,%llu,", r.kind.c_str(), r.D.c_str(), r.alpha, r.nfe,
                  static_cast<unsigned long long>(r.seed));
    out += buf;
    out += status;
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g\n", r.metrics.energy_distance, r.metrics.sliced_w2,
                  r.initial_energy_distance);
    out += buf;
  }
  return out;
}

inline std::string cell_name(const std::string& D, double alpha, std::size_t nfe, std::uint64_t seed) {
  std::ostringstream s;
  s << "D" << D << "_a" << alpha << "_nfe" << nfe << "_s" << seed;
  return s.str();
}

// Runs the full matrix. Per-cell failures are recorded in the summary and the
// remaining cells still run.
inline std::vector<SummaryRow> run_experiment(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
  cfg.validate();
  const fs::path root = cfg.output_root();
  fs::create_directories(root);
  const ChargeSet data = load_dataset(cfg);
  const std::size_t n = data.dim();
  std::vector<SummaryRow> rows;

  for (const auto& dlabel : cfg.d_values) {
    const DimSpec spec = parse_dim_spec(n, dlabel);
    const Denoiser net = train_or_load_teacher(data, spec, cfg.teacher, cfg.teacher_seed,
                                               root / ("teacher_D" + spec.d_label() + ".bin"));
    const TeacherModel teacher = cfg.teacher_mode == "oracle" ? TeacherModel(data, spec) : TeacherModel(net, spec);

    SummaryRow base{"teacher_ode", spec.d_label(), 0.0, 2 * cfg.ode_grid_points - 3, cfg.teacher_seed};
    try {
      NoiseSchedule sched;
      const auto grid = karras_grid(sched, cfg.ode_grid_points);
      const Generate gen = [&](std::size_t count, RngState r) {
        return ode_sample(teacher, grid, count, OdeMethod::Heun, r);
      };
      base.metrics = evaluate_protocol(gen, data, cfg.eval_count, cfg.eval_repeats, cfg.projections,
                                       RngState{cfg.teacher_seed, 0, 0}.split("baseline").split(spec.d_label()));
    } catch (const std::exception& e) {
      base.status = std::string("error: ") + e.what();
    }
    rows.push_back(base);
    if (progress) *progress << "teacher_ode D=" << spec.d_label() << " " << base.status << "\n";

    for (const auto seed : cfg.seeds) {
      for (const double alpha : cfg.alphas) {
        for (const auto nfe : cfg.nfes) {
          SummaryRow row{"distill", spec.d_label(), alpha, nfe, seed};
          const std::string name = cell_name(spec.d_label(), alpha, nfe, seed);
          try {
            DistillConfig dc = cfg.distill;
            dc.alpha = alpha;
            dc.nfe = nfe;
            dc.seed = seed;
            dc.sigma_data = net.sigma_data;
            dc.p_mean = cfg.teacher.p_mean;
            dc.p_std = cfg.teacher.p_std;
            const RngState rng = RngState{seed, 0, 0}.split("distill");
            const Samples reference = draw_from_charges(data, dc.eval_samples, rng.split("reference"));
            DistillOptions opt;
            opt.init = cfg.init;
            opt.reference = &reference;
            const DistillResult res = distill(teacher, spec, net, dc, rng.split(name), opt);
            const Samples out = multistep_sample_batch(res.generator, cfg.eval_count, nfe, rng.split("samples"),
                                                       dc.sigma_init, dc.multistep_sigma_min);
            const Generate gen = [&](std::size_t count, RngState r) {
              return multistep_sample_batch(res.generator, count, nfe, r, dc.sigma_init, dc.multistep_sigma_min);
            };
            row.metrics = evaluate_protocol(gen, data, cfg.eval_count, cfg.eval_repeats, cfg.projections,
                                            rng.split("evaluation"));
            row.initial_energy_distance = res.log.initial_energy_distance();
            write_text_atomic(root / (name + "_samples.csv"), samples_to_csv(out));
            write_text_atomic(root / (name + "_runlog.jsonl"), res.log.to_jsonl());
            write_text_atomic(root / (name + "_metrics.json"), to_json(row.metrics).dump(2) + "\n");
          } catch (const std::exception& e) {
            row.status = std::string("error: ") + e.what();
          }
          rows.push_back(row);
          if (progress) *progress << name << " " << row.status << " ed=" << row.metrics.energy_distance << "\n";
        }
      }
    }
  }
  write_text_atomic(root / "summary.csv", summary_csv(rows));
  return rows;
}

}  // namespace ipfm
