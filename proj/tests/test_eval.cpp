#include <gtest/gtest.h>

#include <boost/math/special_functions/bessel.hpp>

#include <chrono>
#include <cmath>
#include <numbers>

#include "ipfm/experiment.hpp"

using namespace ipfm;

namespace {

Matrix gaussian_set(std::size_t n, double mx, double my, RngState rng) {
  Matrix m(2, static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    m(0, j) = mx + rng.normal();
    m(1, j) = my + rng.normal();
  }
  return m;
}

// E|W| for W ~ N(mu, s^2 I_2): the Rice mean.
double rice_mean(double nu, double s) {
  const double x = -nu * nu / (2.0 * s * s);
  const double lag = std::exp(x / 2.0) * ((1.0 - x) * boost::math::cyl_bessel_i(0, -x / 2.0) -
                                          x * boost::math::cyl_bessel_i(1, -x / 2.0));
  return s * std::sqrt(std::numbers::pi / 2.0) * lag;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ipfm_test_eval_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny_experiment(const fs::path& out) {
  ExperimentConfig c;
  c.n_points = 400;
  c.output_dir = out.string();
  c.teacher.hidden = 16;
  c.teacher.depth = 2;
  c.teacher.steps = 60;
  c.teacher.batch = 64;
  c.distill.batch = 32;
  c.distill.budget = 2000;
  c.distill.eval_every = 20;
  c.distill.eval_samples = 200;
  c.eval_count = 300;
  c.eval_repeats = 2;
  c.ode_grid_points = 6;
  c.projections = 16;
  return c;
}

std::size_t count_kind(const std::vector<SummaryRow>& rows, const std::string& kind) {
  return static_cast<std::size_t>(
      std::count_if(rows.begin(), rows.end(), [&](const SummaryRow& r) { return r.kind == kind; }));
}

}  // namespace

// ---------------------------------------------------------------------------
// energy distance

TEST(EnergyDistance, IdenticalMultisetIsExactlyZero) {
  const Matrix a = gaussian_set(300, 0.0, 0.0, RngState{1});
  EXPECT_EQ(energy_distance(a, a), 0.0);
  Matrix shuffled = a;
  shuffled.col(0).swap(shuffled.col(299));
  EXPECT_EQ(energy_distance(a, shuffled), 0.0);
}

TEST(EnergyDistance, PointMassesGiveTwiceTheDistance) {
  for (const double d : {0.5, 1.0, 7.0}) {
    Matrix a = Matrix::Zero(3, 5);
    Matrix b = Matrix::Zero(3, 9);
    b.row(1).setConstant(d);
    EXPECT_NEAR(energy_distance(a, b), 2.0 * d, 1e-12 * d);
  }
}

TEST(EnergyDistance, GaussianShiftMatchesRiceOracle) {
  // ED = 2 E|N(mu, 2I)| - 2 E|N(0, 2I)|; the V-statistic adds 2 E|a - a'| / n on average.
  const double mu = 1.0;
  const std::size_t n = 2000;
  const double truth = 2.0 * rice_mean(mu, std::sqrt(2.0)) - 2.0 * rice_mean(0.0, std::sqrt(2.0));
  EXPECT_NEAR(rice_mean(0.0, std::sqrt(2.0)), std::sqrt(std::numbers::pi), 1e-12);
  const double expected = truth + 2.0 * std::sqrt(std::numbers::pi) / static_cast<double>(n);

  const int reps = 20;
  std::vector<double> est;
  for (int r = 0; r < reps; ++r) {
    const RngState rng = RngState{42}.split("rep", static_cast<std::uint64_t>(r));
    est.push_back(energy_distance(gaussian_set(n, 0, 0, rng.split("a")), gaussian_set(n, mu, 0, rng.split("b"))));
  }
  double mean = 0, var = 0;
  for (double e : est) mean += e / reps;
  for (double e : est) var += (e - mean) * (e - mean) / (reps - 1);
  const double se = std::sqrt(var / reps);
  EXPECT_LT(std::abs(mean - expected), 3.0 * se) << "mean " << mean << " expected " << expected << " se " << se;
}

TEST(EnergyDistance, DimensionMismatchIsContractViolation) {
  EXPECT_THROW(energy_distance(Matrix::Zero(2, 3), Matrix::Zero(3, 3)), ContractViolation);
  EXPECT_THROW(energy_distance(Matrix::Zero(2, 0), Matrix::Zero(2, 3)), ContractViolation);
}

// ---------------------------------------------------------------------------
// sliced W2

TEST(SlicedW2, IdenticalSetsGiveZero) {
  const Matrix a = gaussian_set(200, 1, 2, RngState{3});
  EXPECT_EQ(sliced_w2(a, a, 64, RngState{4}), 0.0);
}

TEST(SlicedW2, OneDimensionalPointMasses) {
  for (const double d : {0.3, 2.0}) {
    Matrix a = Matrix::Zero(1, 4);
    Matrix b = Matrix::Constant(1, 7, d);
    EXPECT_NEAR(sliced_w2(a, b, 10, RngState{5}), d * d, 1e-12);
  }
}

TEST(SlicedW2, QuantileCouplingUnequalSizes) {
  // {0, 1} vs {0, 0, 3}: mass 1/3 at cost 0, 1/6 at cost 0 (0 vs 0), 1/6 at 1 vs 0, 1/3 at 1 vs 3.
  EXPECT_NEAR(wasserstein2_sq_1d({0.0, 1.0}, {0.0, 0.0, 3.0}), 1.0 / 6.0 + 4.0 / 3.0, 1e-14);
}

TEST(SlicedW2, TranslationGivesNormSquaredOverDimension) {
  for (const std::size_t n : {2u, 3u, 5u}) {
    Matrix a(static_cast<Eigen::Index>(n), 300);
    RngState r{6};
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = r.normal();
    Eigen::VectorXd t(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = 0.7 * static_cast<double>(i + 1);
    const Matrix b = a.colwise() + t;
    const double want = t.squaredNorm() / static_cast<double>(n);
    EXPECT_NEAR(sliced_w2(a, b, 512, RngState{7}), want, 0.05 * want) << "N=" << n;
  }
}

TEST(SlicedW2, DisjointPointMassesArePositive) {
  Matrix a = Matrix::Zero(2, 3);
  Matrix b = Matrix::Constant(2, 3, 1.0);
  EXPECT_GT(sliced_w2(a, b, 8, RngState{8}), 0.0);
  EXPECT_GT(energy_distance(a, b), 0.0);
}

TEST(Metrics, ReportMomentGaps) {
  const Matrix a = gaussian_set(500, 0, 0, RngState{9});
  const Matrix b = (a.array() + 1.5).matrix();
  const MetricReport m = compute_metrics(a, b, RngState{10}, 32);
  ASSERT_EQ(m.mean_gap.size(), 2u);
  ASSERT_EQ(m.cov_gap.size(), 4u);
  EXPECT_NEAR(m.mean_gap[0], 1.5, 1e-12);
  EXPECT_NEAR(m.mean_gap[1], 1.5, 1e-12);
  for (double g : m.cov_gap) EXPECT_LT(g, 1e-12);
  EXPECT_EQ(m.sample_count, 500u);
  EXPECT_GT(m.energy_distance, 0.0);
  EXPECT_GT(m.sliced_w2, 0.0);
}

// ---------------------------------------------------------------------------
// datasets

TEST(Datasets, EightGaussiansModesRecoveredByKMeans) {
  const ChargeSet cs = builtin_dataset("eight_gaussians", 8000, RngState{11});
  const Matrix x = charges_as_samples(cs);

  // Farthest-point seeding, then Lloyd iterations.
  std::vector<Eigen::Vector2d> c{x.col(0)};
  while (c.size() < 8) {
    Eigen::Index far = 0;
    double best = -1;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      double d = 1e300;
      for (const auto& ck : c) d = std::min(d, (x.col(j) - ck).squaredNorm());
      if (d > best) best = d, far = j;
    }
    c.push_back(x.col(far));
  }
  for (int it = 0; it < 50; ++it) {
    std::vector<Eigen::Vector2d> sum(8, Eigen::Vector2d::Zero());
    std::vector<int> cnt(8, 0);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      std::size_t k = 0;
      for (std::size_t q = 1; q < 8; ++q)
        if ((x.col(j) - c[q]).squaredNorm() < (x.col(j) - c[k]).squaredNorm()) k = q;
      sum[k] += x.col(j);
      ++cnt[k];
    }
    for (std::size_t k = 0; k < 8; ++k)
      if (cnt[k]) c[k] = sum[k] / cnt[k];
  }
  // Centering shifts everything by the sample mean of the mode labels, O(4 / sqrt(n)).
  for (std::size_t k = 0; k < 8; ++k) {
    const auto t = eight_gaussians_center(k);
    double best = 1e300;
    for (const auto& ck : c) best = std::min(best, std::hypot(ck(0) - t[0], ck(1) - t[1]));
    EXPECT_LT(best, 0.15) << "mode " << k;
  }
  // Per-mode spread.
  for (const auto& ck : c) {
    double ss = 0;
    int m = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if ((x.col(j) - ck).norm() < 1.5) ss += (x.col(j) - ck).squaredNorm(), ++m;
    EXPECT_NEAR(std::sqrt(ss / (2.0 * m)), 0.2, 0.02);
  }
}

TEST(Datasets, AllBuiltinsAreZeroMeanAndDeterministic) {
  for (const auto& name : builtin_dataset_names()) {
    const ChargeSet a = builtin_dataset(name, 3000, RngState{12});
    const ChargeSet b = builtin_dataset(name, 3000, RngState{12});
    const Matrix xa = charges_as_samples(a);
    const Matrix xb = charges_as_samples(b);
    EXPECT_TRUE((xa.array() == xb.array()).all()) << name;
    const Eigen::VectorXd mean = xa.rowwise().mean();
    const Eigen::VectorXd sd =
        ((xa.colwise() - mean).array().square().rowwise().sum() / static_cast<double>(xa.cols())).sqrt();
    for (Eigen::Index i = 0; i < 2; ++i)
      EXPECT_LT(std::abs(mean(i)), 3.0 * sd(i) / std::sqrt(static_cast<double>(xa.cols()))) << name;
    const ChargeSet c = builtin_dataset(name, 3000, RngState{13});
    EXPECT_FALSE((charges_as_samples(c).array() == xa.array()).all()) << name;
  }
}

TEST(Datasets, UnknownNameIsConfigError) {
  EXPECT_THROW(builtin_dataset("nine_gaussians", 10, RngState{1}), ConfigError);
  EXPECT_THROW(builtin_dataset("spiral", 0, RngState{1}), ConfigError);
}

TEST(Datasets, DrawFromChargesRespectsWeights) {
  const ChargeSet cs({{0.0}, {1.0}}, {0.25, 0.75});
  const Matrix m = draw_from_charges(cs, 20000, RngState{14});
  EXPECT_NEAR(m.mean(), 0.75, 0.015);
}

// ---------------------------------------------------------------------------
// config and IO

TEST(KeyValues, ParsesScalarsListsAndComments) {
  const auto kv = KeyValues::parse(
      "# experiment\n[run]\ndataset = \"two_moons\"\nD = [2, 16, inf]  # grid\nalpha = 0, 1\nbudget = 3000\ngenerator_ema = 0.99\n");
  EXPECT_EQ(kv.str("dataset", ""), "two_moons");
  EXPECT_EQ(kv.list("D", {}), (std::vector<std::string>{"2", "16", "inf"}));
  EXPECT_EQ(kv.count("budget", 0), 3000u);
  EXPECT_EQ(kv.num("missing", 2.5), 2.5);

  const ExperimentConfig c = experiment_config_from(kv);
  EXPECT_EQ(c.dataset, "two_moons");
  EXPECT_EQ(c.alphas, (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(c.distill.budget, 3000u);
  EXPECT_EQ(c.distill.generator_ema, 0.99);
}

TEST(KeyValues, RejectsMalformedInput) {
  EXPECT_THROW(KeyValues::parse("no equals sign\n"), ConfigError);
  EXPECT_THROW(KeyValues::parse("budget = -3\n").count("budget", 0), ConfigError);
  EXPECT_THROW(KeyValues::parse("budget = 1.5\n").count("budget", 0), ConfigError);
  EXPECT_THROW(KeyValues::parse("lr = abc\n").num("lr", 0), ConfigError);
  EXPECT_THROW(experiment_config_from(KeyValues::parse("weighting = cubic\n")), ConfigError);
  EXPECT_THROW(experiment_config_from(KeyValues::parse("init = zeros\n")), ConfigError);
}

TEST(Io, SamplesCsvRoundTripsBitExactly) {
  const fs::path dir = scratch_dir("csv");
  Matrix s = gaussian_set(50, 0.1, -3, RngState{15});
  s(0, 0) = 1.0 / 3.0;
  s(1, 0) = -1e-300;
  const std::string text = samples_to_csv(s);
  EXPECT_EQ(text.substr(0, 6), "x0,x1\n");
  write_text_atomic(dir / "s.csv", text);
  const Samples back = samples_from_csv(dir / "s.csv");
  ASSERT_EQ(back.rows(), s.rows());
  ASSERT_EQ(back.cols(), s.cols());
  EXPECT_TRUE((back.array() == s.array()).all());
  EXPECT_FALSE(fs::exists(dir / "s.csv.tmp"));
  fs::remove_all(dir);
}

TEST(Io, DenoiserCheckpointRoundTrip) {
  Denoiser d{mlp_init({2, 8, 2}, kMaxConditioningDim, RngState{16}), 0.37, 1.5};
  const Denoiser back = deserialize_denoiser(serialize_denoiser(d));
  EXPECT_EQ(back.sigma_data, d.sigma_data);
  EXPECT_EQ(back.tail_margin, d.tail_margin);
  EXPECT_EQ(back.net.parameters, d.net.parameters);
  EXPECT_EQ(back.net.layer_widths, d.net.layer_widths);

  d.tail_margin = std::numeric_limits<double>::infinity();
  EXPECT_TRUE(std::isinf(deserialize_denoiser(serialize_denoiser(d)).tail_margin));
  EXPECT_THROW(deserialize_denoiser("IPFMDEN1xxxxxxxxxxxxxxxx"), ConfigError);
  EXPECT_THROW(deserialize_denoiser("IPFM"), ConfigError);
}

TEST(Io, AtomicWriteReplacesExistingFile) {
  const fs::path dir = scratch_dir("atomic");
  write_text_atomic(dir / "a" / "f.txt", "first");
  write_text_atomic(dir / "a" / "f.txt", "second");
  EXPECT_EQ(read_text(dir / "a" / "f.txt"), "second");
  EXPECT_EQ(std::distance(fs::directory_iterator(dir / "a"), fs::directory_iterator{}), 1);
  fs::remove_all(dir);
}

TEST(Config, OutputRootEnvironmentApplies) {
  ExperimentConfig c;
  c.output_dir = "runs/x";
  ::setenv("IPFM_OUTPUT_ROOT", "/tmp/root", 1);
  EXPECT_EQ(c.output_root(), fs::path("/tmp/root/runs/x"));
  c.output_dir = "/abs/x";
  EXPECT_EQ(c.output_root(), fs::path("/abs/x"));
  ::unsetenv("IPFM_OUTPUT_ROOT");
  c.output_dir = "runs/x";
  EXPECT_EQ(c.output_root(), fs::path("runs/x"));
}

TEST(Config, ValidationErrors) {
  ExperimentConfig c;
  c.seeds.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.dataset = "/nonexistent/data.csv";
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.teacher_mode = "ensemble";
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.ode_grid_points = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// run_experiment

TEST(RunExperiment, EmptySeedListFailsBeforeAnyWork) {
  const fs::path dir = scratch_dir("empty");
  ExperimentConfig c = tiny_experiment(dir);
  c.seeds.clear();
  EXPECT_THROW(run_experiment(c), ConfigError);
  EXPECT_FALSE(fs::exists(dir));
}

TEST(RunExperiment, SmokeCellEmitsAllArtifacts) {
  const fs::path dir = scratch_dir("smoke");
  ExperimentConfig c = tiny_experiment(dir);
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = run_experiment(c);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 300.0);

  ASSERT_EQ(count_kind(rows, "distill"), 1u);
  ASSERT_EQ(count_kind(rows, "teacher_ode"), 1u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.status, "ok");
    EXPECT_GE(r.metrics.energy_distance, 0.0);
    EXPECT_GE(r.metrics.sliced_w2, 0.0);
  }
  EXPECT_EQ(rows[0].nfe, 2 * c.ode_grid_points - 3);

  const std::string cell = cell_name("inf", 1.0, 1, 0);
  for (const std::string suffix : {"_samples.csv", "_runlog.jsonl", "_metrics.json"})
    EXPECT_TRUE(fs::exists(dir / (cell + suffix))) << suffix;
  ASSERT_TRUE(fs::exists(dir / "summary.csv"));

  const Samples s = samples_from_csv(dir / (cell + "_samples.csv"));
  EXPECT_EQ(s.cols(), static_cast<Eigen::Index>(c.eval_count));
  const auto metrics = nlohmann::json::parse(read_text(dir / (cell + "_metrics.json")));
  EXPECT_EQ(metrics["sample_count"].get<std::size_t>(), c.eval_count);
  std::istringstream log(read_text(dir / (cell + "_runlog.jsonl")));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto rec = nlohmann::json::parse(line);
    EXPECT_TRUE(rec.contains("energy_distance"));
    ++lines;
  }
  EXPECT_GT(lines, 1u);
  fs::remove_all(dir);
}

TEST(RunExperiment, SummaryRowsCoverCrossProductPlusBaselines) {
  const fs::path dir = scratch_dir("matrix");
  ExperimentConfig c = tiny_experiment(dir);
  c.d_values = {"2", "inf"};
  c.alphas = {0.0, 1.0};
  c.nfes = {1, 2};
  c.seeds = {0, 1};
  c.distill.budget = 320;
  c.distill.eval_every = 5;
  c.eval_count = 100;
  c.eval_repeats = 1;
  const auto rows = run_experiment(c);
  EXPECT_EQ(count_kind(rows, "distill"), 2u * 2u * 2u * 2u);
  EXPECT_EQ(count_kind(rows, "teacher_ode"), 2u);

  std::istringstream csv(read_text(dir / "summary.csv"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(csv, line)) ++n;
  EXPECT_EQ(n, 1u + rows.size());
  fs::remove_all(dir);
}

TEST(RunExperiment, FailingCellIsRecordedAndOthersContinue) {
  const fs::path dir = scratch_dir("failing");
  ExperimentConfig c = tiny_experiment(dir);
  c.nfes = {1, 0};  // nfe 0 is rejected by distill
  c.distill.budget = 320;
  c.eval_count = 100;
  c.eval_repeats = 1;
  const auto rows = run_experiment(c);
  ASSERT_EQ(count_kind(rows, "distill"), 2u);
  EXPECT_EQ(rows[1].status, "ok");
  EXPECT_NE(rows[2].status.find("error"), std::string::npos);
  EXPECT_NE(read_text(dir / "summary.csv").find("error"), std::string::npos);
  fs::remove_all(dir);
}

TEST(RunExperiment, DeterministicSampleFiles) {
  const fs::path d1 = scratch_dir("det1");
  const fs::path d2 = scratch_dir("det2");
  ExperimentConfig c = tiny_experiment(d1);
  c.distill.budget = 640;
  c.eval_count = 200;
  c.eval_repeats = 1;
  run_experiment(c);
  c.output_dir = d2.string();
  run_experiment(c);
  const std::string cell = cell_name("inf", 1.0, 1, 0);
  EXPECT_EQ(read_text(d1 / (cell + "_samples.csv")), read_text(d2 / (cell + "_samples.csv")));
  EXPECT_EQ(read_text(d1 / "summary.csv"), read_text(d2 / "summary.csv"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(RunExperiment, CachedTeacherIsReused) {
  const fs::path dir = scratch_dir("cache");
  ExperimentConfig c = tiny_experiment(dir);
  c.distill.budget = 320;
  c.eval_count = 100;
  c.eval_repeats = 1;
  run_experiment(c);
  const auto blob = read_text(dir / "teacher_Dinf.bin");
  const auto stamp = fs::last_write_time(dir / "teacher_Dinf.bin");
  run_experiment(c);
  EXPECT_EQ(fs::last_write_time(dir / "teacher_Dinf.bin"), stamp);
  EXPECT_EQ(read_text(dir / "teacher_Dinf.bin"), blob);
  fs::remove_all(dir);
}
