#pragma once

// Inverse Poisson flow matching: a generator G_theta is trained so that the
// field of its output law matches the teacher's. The inner maximization is a
// student denoiser fit on generator samples; the generator minimizes
//
//   lambda [ |yhat_phi - y|^2 - |yhat_psi - y|^2 - (2 alpha - 1) |yhat_phi - yhat_psi|^2 ]
//
// at x = y + R v, with gradients through y both explicitly and via x.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ipfm/adam.hpp"
#include "ipfm/datasets.hpp"
#include "ipfm/error.hpp"
#include "ipfm/field.hpp"
#include "ipfm/kernel.hpp"
#include "ipfm/metrics.hpp"
#include "ipfm/teacher.hpp"

namespace ipfm {

// ---------------------------------------------------------------------------
// Per-sample objectives

struct GeneratorWeight {
  double lambda;
  bool clamped;  // denominator hit the 1e-8 floor
};

// lambda = C / |yhat_phi - y|_1. The caller treats the result as a constant.
inline GeneratorWeight lambda_generator(std::span<const double> y_hat_teacher, std::span<const double> y,
                                        std::size_t data_dim) {
  IPFM_REQUIRE(y_hat_teacher.size() == y.size(), "lambda_generator: dimension mismatch");
  double l1 = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) l1 += std::abs(y_hat_teacher[i] - y[i]);
  const bool clamped = l1 < 1e-8;
  return {static_cast<double>(data_dim) / (clamped ? 1e-8 : l1), clamped};
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double generator_loss_per_sample(std::span<const double> y_hat_teacher, std::span<const double> y_hat_student,
                                        std::span<const double> y, double alpha, double lambda) {
  IPFM_REQUIRE(y_hat_teacher.size() == y.size() && y_hat_student.size() == y.size(),
               "generator_loss_per_sample: dimension mismatch");
  return lambda * (squared_distance(y_hat_teacher, y) - squared_distance(y_hat_student, y) -
                   (2.0 * alpha - 1.0) * squared_distance(y_hat_teacher, y_hat_student));
}

// lambda [ |phi - psi|^2 + <phi - psi, psi - y> ]
inline double sid_generator_loss_per_sample(std::span<const double> y_hat_teacher,
                                            std::span<const double> y_hat_student, std::span<const double> y,
                                            double lambda) {
  IPFM_REQUIRE(y_hat_teacher.size() == y.size() && y_hat_student.size() == y.size(),
               "sid_generator_loss_per_sample: dimension mismatch");
  double inner = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    inner += (y_hat_teacher[i] - y_hat_student[i]) * (y_hat_student[i] - y[i]);
  return lambda * (squared_distance(y_hat_teacher, y_hat_student) + inner);
}

// SiD with its alpha regularizer: sid - alpha lambda |phi - psi|^2.
inline double sid_regularized_loss_per_sample(std::span<const double> y_hat_teacher,
                                              std::span<const double> y_hat_student, std::span<const double> y,
                                              double alpha, double lambda) {
  return sid_generator_loss_per_sample(y_hat_teacher, y_hat_student, y, lambda) -
         alpha * lambda * squared_distance(y_hat_teacher, y_hat_student);
}

struct IdentityResidual {
  double lhs;
  double rhs;
  double residual;  // |lhs - rhs|
  double scale;     // 1 + |terms|, for relative tolerances
};

// |phi - y|^2 - |psi - y|^2  versus  2 sid - |phi - psi|^2 (lambda = 1 on both sides).
inline IdentityResidual check_sid_identity(std::span<const double> y_hat_teacher,
                                             std::span<const double> y_hat_student, std::span<const double> y) {
  const double a = squared_distance(y_hat_teacher, y);
  const double b = squared_distance(y_hat_student, y);
  const double c = squared_distance(y_hat_teacher, y_hat_student);
  const double sid = sid_generator_loss_per_sample(y_hat_teacher, y_hat_student, y, 1.0);
  const double lhs = a - b;
  const double rhs = 2.0 * sid - c;
  return {lhs, rhs, std::abs(lhs - rhs), 1.0 + a + b + c + std::abs(sid)};
}

struct Triple {
  Vec teacher;
  Vec student;
  Vec y;
};

// max_i |sid_reg(alpha = 1/2) - 1/2 ipfm_integrand| / (1 + magnitude).
inline double check_alpha_half_equivalence(std::span<const Triple> triples, std::span<const double> lambdas) {
  IPFM_REQUIRE(triples.size() == lambdas.size(), "check_alpha_half_equivalence: one lambda per triple");
  double worst = 0.0;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const auto& t = triples[i];
    const double lhs = sid_regularized_loss_per_sample(t.teacher, t.student, t.y, 0.5, lambdas[i]);
    const double rhs = 0.5 * generator_loss_per_sample(t.teacher, t.student, t.y, 0.5, lambdas[i]);
    const double scale = 1.0 + lambdas[i] * (squared_distance(t.teacher, t.y) + squared_distance(t.student, t.y) +
                                             squared_distance(t.teacher, t.student));
    worst = std::max(worst, std::abs(lhs - rhs) / scale);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Configuration and models

enum class GeneratorWeighting { AdaptiveL1, Constant };
enum class InitMode { CopyNetwork, Random };

struct DistillConfig {
  double alpha = 1.0;
  NoiseSchedule generator_schedule{};  // sigma(t) for the generator loss, t ~ U[0, t_max]
  double sigma_init = 2.5;
  double multistep_sigma_min = 0.02;
  double lr_student = 1e-4;
  double lr_generator = 1e-4;
  std::size_t batch = 32;
  std::size_t budget = 30000;  // generator samples consumed by generator updates
  std::size_t nfe = 1;
  std::size_t student_updates_per_generator_update = 1;
  // Student noise law, inherited from the teacher configuration.
  double p_mean = -1.2;
  double p_std = 1.2;
  double sigma_data = 0.5;
  GeneratorWeighting weighting = GeneratorWeighting::AdaptiveL1;
  double constant_lambda = 1.0;
  std::size_t eval_every = 25;
  std::size_t eval_samples = 2000;
  double generator_ema = 0.0;          // decay of the evaluated generator average; 0 evaluates the live weights
  double lr_final_fraction = 1.0;      // cosine decay of both learning rates to this fraction
  double divergence_threshold = 1e6;
  std::size_t max_divergence_restarts = 8;
  std::uint64_t seed = 0;

  void validate() const {
    generator_schedule.validate();
    if (!(sigma_init > 0.0)) throw ConfigError("DistillConfig: sigma_init must be positive");
    if (!(lr_student > 0.0 && lr_generator > 0.0)) throw ConfigError("DistillConfig: learning rates must be positive");
    if (batch == 0 || budget < batch) throw ConfigError("DistillConfig: need 0 < batch <= budget");
    if (nfe == 0) throw ConfigError("DistillConfig: nfe must be >= 1");
    if (student_updates_per_generator_update == 0)
      throw ConfigError("DistillConfig: student_updates_per_generator_update must be >= 1");
    if (eval_every == 0) throw ConfigError("DistillConfig: eval_every must be >= 1");
    if (!(generator_ema >= 0.0 && generator_ema < 1.0)) throw ConfigError("DistillConfig: generator_ema must lie in [0, 1)");
    if (!(lr_final_fraction > 0.0 && lr_final_fraction <= 1.0))
      throw ConfigError("DistillConfig: lr_final_fraction must lie in (0, 1]");
  }

  double lr_scale(std::size_t update, std::size_t total) const {
    const double f = total > 1 ? static_cast<double>(update) / static_cast<double>(total - 1) : 0.0;
    return lr_final_fraction + (1.0 - lr_final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * f));
  }
};

struct GeneratorModel {
  Denoiser net;
  DimSpec spec;
  bool sigma_conditioned = true;

  Samples apply(const Samples& x, std::span<const double> sigmas, Denoiser::Tape* tape = nullptr) const {
    return net.forward(x, sigmas, tape);
  }
};

// sigma_0 = sigma_init; sigma_n = sigma_init + (n - 1)/N (sigma_min - sigma_init) for n = 1..N-1.
inline std::vector<double> multistep_schedule(std::size_t n_steps, double sigma_init, double sigma_min) {
  if (n_steps == 0) throw ConfigError("multistep: number of steps must be >= 1");
  std::vector<double> s(n_steps);
  s[0] = sigma_init;
  for (std::size_t n = 1; n < n_steps; ++n)
    s[n] = sigma_init + static_cast<double>(n - 1) / static_cast<double>(n_steps) * (sigma_min - sigma_init);
  return s;
}

// Random draws for one batch of generator inputs. Each sample owns a stream and
// each purpose a child stream, so the step-index draw for nfe >= 2 does not
// shift any other draw.
struct ChainDraw {
  Samples z;                             // prior draws at sigma_init
  std::vector<std::size_t> step;         // which chain call is trained
  std::vector<std::vector<Vec>> chain;   // chain[j][k-1]: displacement added before call k
};

inline Vec displacement(const DimSpec& spec, double sigma, RngState rng) { return prior_sample(spec, sigma, rng); }

inline ChainDraw draw_chain(const DimSpec& spec, const DistillConfig& cfg, std::size_t batch, bool random_step,
                            const RngState& base) {
  const auto n = static_cast<Eigen::Index>(spec.data_dim);
  const auto sched = multistep_schedule(cfg.nfe, cfg.sigma_init, cfg.multistep_sigma_min);
  ChainDraw d;
  d.z.resize(n, static_cast<Eigen::Index>(batch));
  d.step.assign(batch, 0);
  d.chain.resize(batch);
  for (std::size_t j = 0; j < batch; ++j) {
    const RngState s = base.split(j);
    const Vec z = displacement(spec, cfg.sigma_init, s.split("prior"));
    d.z.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(z.data(), n);
    std::size_t last = cfg.nfe - 1;
    if (random_step && cfg.nfe >= 2) {
      RngState st = s.split("step");
      last = std::min<std::size_t>(static_cast<std::size_t>(st.uniform() * static_cast<double>(cfg.nfe)), cfg.nfe - 1);
    }
    d.step[j] = last;
    for (std::size_t k = 1; k <= last; ++k) d.chain[j].push_back(displacement(spec, sched[k], s.split("chain", k)));
  }
  return d;
}

// Runs the chain without gradients up to each sample's trained call and returns
// that call's input and noise level.
inline Samples chain_input(const GeneratorModel& gen, const ChainDraw& d, const DistillConfig& cfg, Vec& sigma_out) {
  const auto sched = multistep_schedule(cfg.nfe, cfg.sigma_init, cfg.multistep_sigma_min);
  const auto batch = static_cast<std::size_t>(d.z.cols());
  Samples input = d.z;
  sigma_out.assign(batch, sched[0]);
  std::size_t max_step = 0;
  for (auto s : d.step) max_step = std::max(max_step, s);
  for (std::size_t k = 1; k <= max_step; ++k) {
    std::vector<Eigen::Index> active;
    for (std::size_t j = 0; j < batch; ++j)
      if (d.step[j] >= k) active.push_back(static_cast<Eigen::Index>(j));
    Samples in(input.rows(), static_cast<Eigen::Index>(active.size()));
    Vec sig(active.size());
    for (std::size_t a = 0; a < active.size(); ++a) {
      in.col(static_cast<Eigen::Index>(a)) = input.col(active[a]);
      sig[a] = sched[k - 1];
    }
    const Samples out = gen.apply(in, sig);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const auto j = static_cast<std::size_t>(active[a]);
      const Vec& disp = d.chain[j][k - 1];
      input.col(active[a]) = out.col(static_cast<Eigen::Index>(a)) +
                             Eigen::Map<const Eigen::VectorXd>(disp.data(), input.rows());
      sigma_out[j] = sched[k];
    }
  }
  return input;
}

// Full multi-step generation: NFE = n_steps generator calls.
inline Samples multistep_sample_batch(const GeneratorModel& gen, std::size_t n_samples, std::size_t n_steps,
                                      RngState rng, double sigma_init = 2.5, double sigma_min = 0.02) {
  if (n_steps == 0) throw ConfigError("multistep_sample: number of steps must be >= 1");
  DistillConfig cfg;
  cfg.nfe = n_steps;
  cfg.sigma_init = sigma_init;
  cfg.multistep_sigma_min = sigma_min;
  const ChainDraw d = draw_chain(gen.spec, cfg, n_samples, false, rng);
  Vec sig;
  const Samples in = chain_input(gen, d, cfg, sig);
  return gen.apply(in, sig);
}

inline Vec multistep_sample(const GeneratorModel& gen, std::size_t n_steps, RngState rng, double sigma_init = 2.5,
                            double sigma_min = 0.02) {
  const Samples s = multistep_sample_batch(gen, 1, n_steps, rng, sigma_init, sigma_min);
  return column(s, 0);
}

// ---------------------------------------------------------------------------
// Denoiser evaluation with an input-side vector-Jacobian product, for any
// model kind used as teacher or student.

inline std::pair<Samples, Samples> denoise_with_input_vjp(const Denoiser& d, const Samples& x,
                                                          std::span<const double> sigmas,
                                                          const std::function<Samples(const Samples&)>& cot_of) {
  Denoiser::Tape tape;
  Samples y = d.forward(x, sigmas, &tape);
  const Samples cot = cot_of(y);
  auto [gp, gx] = d.backward(tape, cot, false);
  return {std::move(y), std::move(gx)};
}

inline std::pair<Samples, Samples> denoise_with_input_vjp(const TeacherModel& t, const Samples& x,
                                                          std::span<const double> sigmas,
                                                          const std::function<Samples(const Samples&)>& cot_of) {
  return t.denoise_with_input_vjp(x, sigmas, cot_of);
}

inline Samples denoise_batch(const Denoiser& d, const Samples& x, std::span<const double> s) { return d.forward(x, s); }
inline Samples denoise_batch(const TeacherModel& t, const Samples& x, std::span<const double> s) {
  return t.denoise(x, s);
}

// ---------------------------------------------------------------------------
// Generator objective

struct GeneratorDraw {
  ChainDraw chain;
  Vec sigma;    // loss noise level per sample
  Samples disp; // R v at that level
};

inline GeneratorDraw draw_generator_batch(const DimSpec& spec, const DistillConfig& cfg, const RngState& base) {
  GeneratorDraw g;
  g.chain = draw_chain(spec, cfg, cfg.batch, true, base);
  const auto n = static_cast<Eigen::Index>(spec.data_dim);
  g.sigma.resize(cfg.batch);
  g.disp.resize(n, static_cast<Eigen::Index>(cfg.batch));
  for (std::size_t j = 0; j < cfg.batch; ++j) {
    const RngState s = base.split(j);
    RngState ts = s.split("sigma");
    const double t = cfg.generator_schedule.t_max * ts.uniform();
    g.sigma[j] = sigma_of_t(t, cfg.generator_schedule);
    const Vec v = displacement(spec, g.sigma[j], s.split("noise"));
    g.disp.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(v.data(), n);
  }
  return g;
}

struct GeneratorEval {
  double loss = 0.0;         // batch mean
  double teacher_term = 0.0; // mean lambda |phi - y|^2
  double student_term = 0.0; // mean lambda |psi - y|^2
  double gap_term = 0.0;     // mean lambda |phi - psi|^2
  Vec gradient;              // w.r.t. generator parameters, batch mean
  Vec lambdas;
  std::size_t clamped = 0;
};

// Loss and gradient of the generator objective for a given input to the trained
// call. `frozen_lambda` replaces the adaptive weights (finite-difference checks
// freeze them so the stop-gradient convention is honored on both sides).
template <class TeacherT, class StudentT>
GeneratorEval generator_objective_from_input(const GeneratorModel& gen, const TeacherT& teacher,
                                             const StudentT& student, const Samples& gen_in, const Vec& in_sigma,
                                             const GeneratorDraw& draw, const DistillConfig& cfg,
                                             const Vec* frozen_lambda = nullptr, bool want_gradient = true) {
  const std::size_t batch = draw.sigma.size();
  const double c = 2.0 * cfg.alpha - 1.0;
  const std::size_t n = gen.spec.data_dim;
  Denoiser::Tape gtape;
  const Samples y = gen.apply(gen_in, in_sigma, &gtape);
  const Samples x = y + draw.disp;

  GeneratorEval ev;
  ev.lambdas.resize(batch);
  // Student first: its output enters the teacher-side cotangent.
  const Samples b = denoise_batch(student, x, draw.sigma);
  Samples dL_da;
  auto teacher_cot = [&](const Samples& a) {
    dL_da.resize(a.rows(), a.cols());
    for (std::size_t j = 0; j < batch; ++j) {
      const auto J = static_cast<Eigen::Index>(j);
      double lam;
      if (frozen_lambda) {
        lam = (*frozen_lambda)[j];
      } else if (cfg.weighting == GeneratorWeighting::Constant) {
        lam = cfg.constant_lambda;
      } else {
        const auto w = lambda_generator({a.col(J).data(), n}, {y.col(J).data(), n}, n);
        lam = w.lambda;
        ev.clamped += w.clamped ? 1 : 0;
      }
      ev.lambdas[j] = lam;
      dL_da.col(J) = lam * (2.0 * (a.col(J) - y.col(J)) - 2.0 * c * (a.col(J) - b.col(J)));
    }
    return dL_da;
  };
  auto [a, gx_teacher] = denoise_with_input_vjp(teacher, x, draw.sigma, teacher_cot);

  Samples dL_db(b.rows(), b.cols());
  Samples dL_dy_explicit(b.rows(), b.cols());
  for (std::size_t j = 0; j < batch; ++j) {
    const auto J = static_cast<Eigen::Index>(j);
    const double lam = ev.lambdas[j];
    const double ta = (a.col(J) - y.col(J)).squaredNorm();
    const double tb = (b.col(J) - y.col(J)).squaredNorm();
    const double tg = (a.col(J) - b.col(J)).squaredNorm();
    ev.teacher_term += lam * ta;
    ev.student_term += lam * tb;
    ev.gap_term += lam * tg;
    ev.loss += lam * (ta - tb - c * tg);
    dL_db.col(J) = lam * (-2.0 * (b.col(J) - y.col(J)) + 2.0 * c * (a.col(J) - b.col(J)));
    dL_dy_explicit.col(J) = lam * (-2.0 * (a.col(J) - y.col(J)) + 2.0 * (b.col(J) - y.col(J)));
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  ev.loss *= inv_b;
  ev.teacher_term *= inv_b;
  ev.student_term *= inv_b;
  ev.gap_term *= inv_b;
  if (!want_gradient) return ev;

  auto [b2, gx_student] = denoise_with_input_vjp(student, x, draw.sigma, [&](const Samples&) { return dL_db; });
  const Samples dL_dy = (dL_dy_explicit + gx_teacher + gx_student) * inv_b;
  auto [gp, gxin] = gen.net.backward(gtape, dL_dy, true);
  ev.gradient = std::move(gp);
  return ev;
}

// The same on a fixed draw; the chain before the trained call runs gradient-free.
template <class TeacherT, class StudentT>
GeneratorEval generator_objective(const GeneratorModel& gen, const TeacherT& teacher, const StudentT& student,
                                  const GeneratorDraw& draw, const DistillConfig& cfg,
                                  const Vec* frozen_lambda = nullptr, bool want_gradient = true) {
  Vec in_sigma;
  const Samples gen_in = chain_input(gen, draw.chain, cfg, in_sigma);
  return generator_objective_from_input(gen, teacher, student, gen_in, in_sigma, draw, cfg, frozen_lambda,
                                        want_gradient);
}

// ---------------------------------------------------------------------------
// Alternating updates

struct TrainableDenoiser {
  Denoiser net;
  AdamState adam;
  explicit TrainableDenoiser(Denoiser d) : net(std::move(d)), adam(net.net.parameters.size()) {}
};

struct TrainableGenerator {
  GeneratorModel model;
  AdamState adam;
  explicit TrainableGenerator(GeneratorModel g) : model(std::move(g)), adam(model.net.net.parameters.size()) {}
};

// One Adam step on lambda(sigma) |yhat_psi(x, sigma) - y|^2 with y from the frozen
// generator and ln sigma ~ N(P_mean, P_std^2).
inline double student_update(TrainableDenoiser& student, const GeneratorModel& gen, const DistillConfig& cfg,
                             const RngState& base, double lr) {
  const DimSpec& spec = gen.spec;
  const auto n = static_cast<Eigen::Index>(spec.data_dim);
  const ChainDraw d = draw_chain(spec, cfg, cfg.batch, true, base);
  Vec in_sigma;
  const Samples in = chain_input(gen, d, cfg, in_sigma);
  const Samples y = gen.apply(in, in_sigma);
  Vec sig(cfg.batch);
  Samples x(n, static_cast<Eigen::Index>(cfg.batch));
  for (std::size_t j = 0; j < cfg.batch; ++j) {
    const RngState s = base.split(j);
    RngState ss = s.split("student_sigma");
    sig[j] = std::exp(cfg.p_mean + cfg.p_std * ss.normal());
    const Vec v = displacement(spec, sig[j], s.split("student_noise"));
    x.col(static_cast<Eigen::Index>(j)) = y.col(static_cast<Eigen::Index>(j)) + Eigen::Map<const Eigen::VectorXd>(v.data(), n);
  }
  Denoiser::Tape tape;
  const Samples out = student.net.forward(x, sig, &tape);
  Samples cot = out - y;
  double loss = 0.0;
  const double inv_b = 1.0 / static_cast<double>(cfg.batch);
  for (std::size_t j = 0; j < cfg.batch; ++j) {
    const auto J = static_cast<Eigen::Index>(j);
    const double lam = student.net.loss_weight({x.col(J).data(), spec.data_dim}, sig[j]);
    loss += lam * cot.col(J).squaredNorm();
    cot.col(J) *= 2.0 * lam * inv_b;
  }
  loss *= inv_b;
  if (!std::isfinite(loss)) throw TrainingError("student_update: non-finite loss", "{\"loss\":null}");
  auto [gp, gx] = student.net.backward(tape, cot, true);
  adam_step(student.net.net.parameters, gp, student.adam, lr);
  return loss;
}

inline std::string generator_diagnostic(const GeneratorEval& ev, const GeneratorDraw& draw) {
  nlohmann::json j;
  j["loss"] = std::isfinite(ev.loss) ? nlohmann::json(ev.loss) : nlohmann::json(nullptr);
  j["teacher_term"] = ev.teacher_term;
  j["student_term"] = ev.student_term;
  j["gap_term"] = ev.gap_term;
  j["sigma"] = draw.sigma;
  return j.dump();
}

// One Adam step on the generator objective (teacher and student frozen). Also
// the multi-step training step: for nfe >= 2 each sample trains a uniformly
// chosen chain call, earlier calls being gradient-free.
template <class TeacherT>
double generator_update(TrainableGenerator& gen, const TeacherT& teacher, const Denoiser& student,
                        const DistillConfig& cfg, const RngState& base, double lr, GeneratorEval* out = nullptr) {
  const GeneratorDraw draw = draw_generator_batch(gen.model.spec, cfg, base);
  GeneratorEval ev = generator_objective(gen.model, teacher, student, draw, cfg);
  if (!std::isfinite(ev.loss) || std::abs(ev.loss) > cfg.divergence_threshold)
    throw TrainingError("generator_update: loss diverged", generator_diagnostic(ev, draw));
  adam_step(gen.model.net.net.parameters, ev.gradient, gen.adam, lr);
  const double loss = ev.loss;
  if (out) *out = std::move(ev);
  return loss;
}

template <class TeacherT>
double multistep_train_step(TrainableGenerator& gen, const TeacherT& teacher, const Denoiser& student,
                            const DistillConfig& cfg, const RngState& base, double lr) {
  return generator_update(gen, teacher, student, cfg, base, lr);
}

// ---------------------------------------------------------------------------
// Full loop

struct RunLogRecord {
  std::size_t update_index = 0;
  std::size_t samples_consumed = 0;
  std::string D;
  double alpha = 0.0;
  std::size_t nfe = 1;
  double loss_student = 0.0;
  double loss_generator = 0.0;
  double energy_distance = 0.0;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const RunLogRecord& r) {
  return nlohmann::json{{"update_index", r.update_index}, {"samples_consumed", r.samples_consumed},
                        {"D", r.D},                       {"alpha", r.alpha},
                        {"nfe", r.nfe},                   {"loss_student", r.loss_student},
                        {"loss_generator", r.loss_generator}, {"energy_distance", r.energy_distance},
                        {"seed", r.seed}};
}

struct RunLog {
  std::vector<RunLogRecord> records;
  std::vector<std::string> events;

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records) out += to_json(r).dump() + "\n";
    return out;
  }

  // First update index whose logged energy distance is <= threshold.
  std::optional<std::size_t> updates_to_threshold(double threshold) const {
    for (const auto& r : records)
      if (r.energy_distance <= threshold) return r.update_index;
    return std::nullopt;
  }
  double initial_energy_distance() const { return records.empty() ? 0.0 : records.front().energy_distance; }
  double final_energy_distance() const { return records.empty() ? 0.0 : records.back().energy_distance; }
};

struct DistillResult {
  GeneratorModel generator;
  Denoiser student;
  RunLog log;
};

struct DistillOptions {
  InitMode init = InitMode::CopyNetwork;
  const Samples* reference = nullptr;  // data draws for the logged energy distance
};

template <class TeacherT>
DistillResult distill(const TeacherT& teacher, const DimSpec& spec, const Denoiser& init, const DistillConfig& cfg,
                      RngState rng, const DistillOptions& opt = {}) {
  cfg.validate();
  Denoiser start = init;
  if (opt.init == InitMode::Random) {
    start.net = mlp_init(init.net.layer_widths, init.net.conditioning_dim, rng.split("random_init"),
                         init.net.activation);
  }
  TrainableGenerator gen(GeneratorModel{start, spec, true});
  TrainableDenoiser student(start);
  double lr_g = cfg.lr_generator;
  double lr_s = cfg.lr_student;

  Samples reference;
  if (opt.reference) {
    const auto m = std::min<Eigen::Index>(opt.reference->cols(), static_cast<Eigen::Index>(cfg.eval_samples));
    reference = opt.reference->leftCols(m);
  }
  const RngState eval_rng = rng.split("eval");
  GeneratorModel averaged = gen.model;
  auto evaluated = [&]() -> const GeneratorModel& { return cfg.generator_ema > 0.0 ? averaged : gen.model; };
  auto evaluate = [&]() -> double {
    if (reference.size() == 0) return std::nan("");
    const Samples g = multistep_sample_batch(evaluated(), static_cast<std::size_t>(reference.cols()), cfg.nfe, eval_rng,
                                             cfg.sigma_init, cfg.multistep_sigma_min);
    return energy_distance(g, reference);
  };

  DistillResult res{gen.model, student.net, {}};
  RunLog& log = res.log;
  auto record = [&](std::size_t u, std::size_t consumed, double ls, double lg) {
    log.records.push_back({u, consumed, spec.d_label(), cfg.alpha, cfg.nfe, ls, lg, evaluate(), cfg.seed});
  };
  record(0, 0, 0.0, 0.0);

  TrainableGenerator gen_snap = gen;
  TrainableDenoiser student_snap = student;
  GeneratorModel averaged_snap = averaged;
  std::size_t consumed = 0;
  std::size_t update = 0;
  std::size_t restarts = 0;
  double win_s = 0.0;
  double win_g = 0.0;
  std::size_t win_n = 0;
  const std::size_t total_updates = cfg.budget / cfg.batch;
  while (update < total_updates) {
    const RngState step_rng = rng.split("update", update);
    try {
      double ls = 0.0;
      for (std::size_t k = 0; k < cfg.student_updates_per_generator_update; ++k)
        ls += student_update(student, gen.model, cfg, step_rng.split("student", k), lr_s * cfg.lr_scale(update, total_updates));
      ls /= static_cast<double>(cfg.student_updates_per_generator_update);
      const double lg =
          generator_update(gen, teacher, student.net, cfg, step_rng.split("generator"), lr_g * cfg.lr_scale(update, total_updates));
      if (cfg.generator_ema > 0.0) {
        auto& avg = averaged.net.net.parameters;
        const auto& live = gen.model.net.net.parameters;
        for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = cfg.generator_ema * avg[i] + (1.0 - cfg.generator_ema) * live[i];
      }
      win_s += ls;
      win_g += lg;
      ++win_n;
    } catch (const TrainingError& e) {
      if (++restarts > cfg.max_divergence_restarts) throw;
      gen = gen_snap;
      student = student_snap;
      averaged = averaged_snap;
      lr_g *= 0.5;
      lr_s *= 0.5;
      log.events.push_back("update " + std::to_string(update) + ": " + e.what() + " " + e.detail +
                           "; restored last checkpoint, learning rates halved");
    }
    ++update;
    consumed += cfg.batch;
    if (update % cfg.eval_every == 0 || update == total_updates) {
      const double n = win_n ? static_cast<double>(win_n) : 1.0;
      record(update, consumed, win_s / n, win_g / n);
      win_s = win_g = 0.0;
      win_n = 0;
      gen_snap = gen;
      student_snap = student;
      averaged_snap = averaged;
    }
  }
  res.generator = evaluated();
  res.student = student.net;
  return res;
}

}  // namespace ipfm
