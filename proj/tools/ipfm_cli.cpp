#include <algorithm>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ipfm/experiment.hpp"

using namespace ipfm;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;  // key=value

  ExperimentConfig load() const {
    KeyValues kv = config.empty() ? KeyValues{} : KeyValues::load(config);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + o);
      kv.set(o.substr(0, eq), o.substr(eq + 1));
    }
    return experiment_config_from(kv);
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "flat key-value config file");
  app->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
}

// Identity and kernel property checks. Returns the number of failures.
int run_checks(std::size_t n_triples, std::uint64_t seed) {
  int failures = 0;
  auto report = [&](const std::string& name, bool ok, double value, double tol) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << " value=" << value << " tol=" << tol << "\n";
    if (!ok) ++failures;
  };
  RngState rng{seed, 0, 0};

  double sid_rel = 0.0;
  std::vector<Triple> triples;
  std::vector<double> lambdas;
  for (std::size_t i = 0; i < n_triples; ++i) {
    RngState s = rng.split("triple", i);
    const std::size_t n = 1 + i % 5;
    Triple t{Vec(n), Vec(n), Vec(n)};
    for (std::size_t k = 0; k < n; ++k) {
      t.teacher[k] = 3.0 * s.normal();
      t.student[k] = 3.0 * s.normal();
      t.y[k] = 3.0 * s.normal();
    }
    const auto r = check_sid_identity(t.teacher, t.student, t.y);
    sid_rel = std::max(sid_rel, r.residual / r.scale);
    lambdas.push_back(std::exp(s.normal()));
    triples.push_back(std::move(t));
  }
  report("sid_identity", sid_rel < 1e-10, sid_rel, 1e-10);
  const double half = check_alpha_half_equivalence(triples, lambdas);
  report("alpha_half_equivalence", half < 1e-10, half, 1e-10);

  // E R^2 = r^2 N / (D - 2) for the finite-D kernel; E R^2 = N sigma^2 in the Gaussian limit.
  const double sigma = 0.7;
  const std::size_t draws = 200000;
  for (const std::string d : {"8", "64", "inf"}) {
    for (std::size_t n : {1, 3}) {
      const DimSpec spec = parse_dim_spec(n, d);
      const double expected = spec.is_infinite()
                                  ? static_cast<double>(n) * sigma * sigma
                                  : std::pow(NoiseLevel{sigma}.r(spec), 2) * static_cast<double>(n) / (spec.D() - 2.0);
      double sum = 0.0;
      double sum2 = 0.0;
      const Vec y(n, 0.0);
      for (std::size_t i = 0; i < draws; ++i) {
        RngState s = rng.split("kernel" + d, i * 8 + n);
        const double r2 = squared_distance(perturb(y, spec, sigma, s), y);
        sum += r2;
        sum2 += r2 * r2;
      }
      const double mean = sum / draws;
      const double se = std::sqrt(std::max(sum2 / draws - mean * mean, 0.0) / draws);
      const double z = std::abs(mean - expected) / se;
      report("kernel_second_moment N=" + std::to_string(n) + " D=" + d, z < 5.0, z, 5.0);
    }
  }
  return failures;
}

void write_or_print(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") std::cout << text;
  else write_text_atomic(path, text);
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inverse Poisson flow matching on low-dimensional data"};
  app.require_subcommand(1);

  // check
  auto* check = app.add_subcommand("check", "identity and kernel property suites");
  std::size_t n_triples = 10000;
  std::uint64_t check_seed = 0;
  check->add_option("--triples", n_triples, "random triples per identity check");
  check->add_option("--seed", check_seed);

  // train-teacher
  Common tt;
  std::string tt_d = "inf";
  std::string tt_out = "teacher.bin";
  auto* train_teacher = app.add_subcommand("train-teacher", "fit the network denoiser to the data");
  add_common(train_teacher, tt);
  train_teacher->add_option("--D", tt_d, "auxiliary dimension or inf");
  train_teacher->add_option("-o,--out", tt_out, "checkpoint path");

  // sample-teacher
  Common st;
  std::string st_d = "inf";
  std::string st_ckpt;
  std::string st_out = "-";
  std::string st_method = "heun";
  std::size_t st_n = 1000;
  std::size_t st_grid = 19;
  std::uint64_t st_seed = 0;
  auto* sample_teacher = app.add_subcommand("sample-teacher", "integrate the teacher ODE from prior draws");
  add_common(sample_teacher, st);
  sample_teacher->add_option("--D", st_d);
  sample_teacher->add_option("--checkpoint", st_ckpt, "network teacher; the exact oracle is used when omitted");
  sample_teacher->add_option("-n,--samples", st_n);
  sample_teacher->add_option("--grid", st_grid, "number of noise levels");
  sample_teacher->add_option("--method", st_method)->check(CLI::IsMember({"euler", "heun"}));
  sample_teacher->add_option("--seed", st_seed);
  sample_teacher->add_option("-o,--out", st_out, "samples CSV (- for stdout)");

  // distill
  Common dd;
  std::string dd_d = "inf";
  std::string dd_teacher;
  std::string dd_out = "distill_out";
  double dd_alpha = 1.0;
  std::size_t dd_nfe = 1;
  std::uint64_t dd_seed = 0;
  auto* distill_cmd = app.add_subcommand("distill", "distill a generator from a teacher");
  add_common(distill_cmd, dd);
  distill_cmd->add_option("--D", dd_d);
  distill_cmd->add_option("--teacher", dd_teacher, "teacher checkpoint; trained when omitted");
  distill_cmd->add_option("--alpha", dd_alpha);
  distill_cmd->add_option("--nfe", dd_nfe);
  distill_cmd->add_option("--seed", dd_seed);
  distill_cmd->add_option("-o,--out-dir", dd_out);

  // sample-generator
  std::string sg_ckpt;
  std::string sg_d = "inf";
  std::string sg_out = "-";
  std::size_t sg_n = 1000;
  std::size_t sg_nfe = 1;
  std::uint64_t sg_seed = 0;
  auto* sample_gen = app.add_subcommand("sample-generator", "draw samples from a distilled generator");
  sample_gen->add_option("--checkpoint", sg_ckpt)->required();
  sample_gen->add_option("--D", sg_d);
  sample_gen->add_option("-n,--samples", sg_n);
  sample_gen->add_option("--nfe", sg_nfe);
  sample_gen->add_option("--seed", sg_seed);
  sample_gen->add_option("-o,--out", sg_out);

  // eval
  std::string ev_gen;
  std::string ev_data;
  std::string ev_out = "-";
  std::size_t ev_proj = 256;
  std::uint64_t ev_seed = 0;
  auto* eval = app.add_subcommand("eval", "compare two sample CSVs");
  eval->add_option("--generated", ev_gen)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", ev_data)->required()->check(CLI::ExistingFile);
  eval->add_option("--projections", ev_proj);
  eval->add_option("--seed", ev_seed);
  eval->add_option("-o,--out", ev_out, "metrics JSON (- for stdout)");

  // matrix
  Common mx;
  auto* matrix = app.add_subcommand("matrix", "run the full (seed, D, alpha, nfe) study grid");
  add_common(matrix, mx);

  // report
  std::string rp_summary;
  auto* report = app.add_subcommand("report", "aggregate a summary CSV by (kind, D, alpha, nfe)");
  report->add_option("summary", rp_summary)->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*check) return run_checks(n_triples, check_seed) == 0 ? 0 : 1;

    if (*train_teacher) {
      const ExperimentConfig cfg = tt.load();
      const ChargeSet data = load_dataset(cfg);
      const DimSpec spec = parse_dim_spec(data.dim(), tt_d);
      std::filesystem::remove(tt_out);
      train_or_load_teacher(data, spec, cfg.teacher, cfg.teacher_seed, tt_out);
      std::cout << "wrote " << tt_out << "\n";
      return 0;
    }

    if (*sample_teacher) {
      const ExperimentConfig cfg = st.load();
      const ChargeSet data = load_dataset(cfg);
      const DimSpec spec = parse_dim_spec(data.dim(), st_d);
      const TeacherModel teacher = st_ckpt.empty() ? TeacherModel(data, spec)
                                                   : TeacherModel(deserialize_denoiser(read_text(st_ckpt)), spec);
      const auto grid = karras_grid(cfg.distill.generator_schedule, st_grid);
      std::size_t nfe = 0;
      const Samples s = ode_sample(teacher, grid, st_n, st_method == "heun" ? OdeMethod::Heun : OdeMethod::Euler,
                                   RngState{st_seed, 0, 0}.split("sample-teacher"), &nfe);
      write_or_print(st_out, samples_to_csv(s));
      std::cerr << "nfe " << nfe << "\n";
      return 0;
    }

    if (*distill_cmd) {
      ExperimentConfig cfg = dd.load();
      cfg.d_values = {dd_d};
      cfg.alphas = {dd_alpha};
      cfg.nfes = {dd_nfe};
      cfg.seeds = {dd_seed};
      cfg.validate();
      const ChargeSet data = load_dataset(cfg);
      const DimSpec spec = parse_dim_spec(data.dim(), dd_d);
      const Denoiser net = dd_teacher.empty()
                               ? train_or_load_teacher(data, spec, cfg.teacher, cfg.teacher_seed, {})
                               : deserialize_denoiser(read_text(dd_teacher));
      const TeacherModel teacher = cfg.teacher_mode == "oracle" ? TeacherModel(data, spec) : TeacherModel(net, spec);
      DistillConfig dc = cfg.distill;
      dc.alpha = dd_alpha;
      dc.nfe = dd_nfe;
      dc.seed = dd_seed;
      dc.sigma_data = net.sigma_data;
      dc.p_mean = cfg.teacher.p_mean;
      dc.p_std = cfg.teacher.p_std;
      const RngState rng = RngState{dd_seed, 0, 0}.split("distill");
      const Samples reference = draw_from_charges(data, dc.eval_samples, rng.split("reference"));
      DistillOptions opt;
      opt.init = cfg.init;
      opt.reference = &reference;
      const DistillResult res = distill(teacher, spec, net, dc, rng.split("run"), opt);
      const std::filesystem::path out(dd_out);
      write_text_atomic(out / "generator.bin", serialize_denoiser(res.generator.net));
      write_text_atomic(out / "student.bin", serialize_denoiser(res.student));
      write_text_atomic(out / "runlog.jsonl", res.log.to_jsonl());
      for (const auto& e : res.log.events) std::cerr << e << "\n";
      std::cout << "energy distance " << res.log.initial_energy_distance() << " -> "
                << res.log.final_energy_distance() << "\n";
      return 0;
    }

    if (*sample_gen) {
      const Denoiser net = deserialize_denoiser(read_text(sg_ckpt));
      const GeneratorModel gen{net, parse_dim_spec(net.net.layer_widths.front(), sg_d), true};
      const Samples s = multistep_sample_batch(gen, sg_n, sg_nfe, RngState{sg_seed, 0, 0}.split("sample-generator"));
      write_or_print(sg_out, samples_to_csv(s));
      return 0;
    }

    if (*eval) {
      const Samples g = samples_from_csv(ev_gen);
      const Samples d = samples_from_csv(ev_data);
      const MetricReport m = compute_metrics(g, d, RngState{ev_seed, 0, 0}.split("eval"), ev_proj);
      write_or_print(ev_out, to_json(m).dump(2) + "\n");
      return 0;
    }

    if (*matrix) {
      const auto rows = run_experiment(mx.load(), &std::cerr);
      const bool any_failed =
          std::any_of(rows.begin(), rows.end(), [](const SummaryRow& r) { return r.status != "ok"; });
      return any_failed ? 1 : 0;
    }

    if (*report) {
      std::ifstream f(rp_summary);
      std::string line;
      std::getline(f, line);
      std::map<std::string, std::vector<double>> groups;
      while (std::getline(f, line)) {
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
        if (cols.size() < 9 || cols[5] != "ok") continue;
        groups[cols[0] + ",D=" + cols[1] + ",alpha=" + cols[2] + ",nfe=" + cols[3]].push_back(std::stod(cols[6]));
      }
      std::cout << "kind,D,alpha,nfe,n,median_energy_distance\n";
      for (const auto& [k, v] : groups) std::cout << k << "," << v.size() << "," << median(v) << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
