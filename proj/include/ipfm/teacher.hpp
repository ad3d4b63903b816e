#pragma once

// Denoiser networks, their training under the denoising loss, and probability-flow
// ODE sampling dx/dsigma = (x - yhat(x, sigma)) / sigma.

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <variant>
#include <vector>

#include "ipfm/adam.hpp"
#include "ipfm/error.hpp"
#include "ipfm/field.hpp"
#include "ipfm/kernel.hpp"
#include "ipfm/mlp.hpp"

namespace ipfm {

// Each column is one sample.
using Samples = Matrix;

inline Vec column(const Samples& s, Eigen::Index j) { return Vec(s.col(j).data(), s.col(j).data() + s.rows()); }

// yhat(x, sigma) = c_skip x + c_out F(c_in x, sigma) with the usual
// variance-preserving coefficients; F is the raw MLP.
//
// The coefficients use an effective variance s^2 rather than sigma^2:
//   s^2 = sigma^2 + sigma_data^2 softplus_k((|x|^2/N - m (sigma^2 + sigma_data^2)) / sigma_data^2)
// which equals sigma^2 for typical inputs and grows like |x|^2/N for inputs far
// outside the bulk. Finite-D kernels are heavy-tailed (infinite variance when
// D <= 2), and without this the skip term c_skip x and the network input c_in x
// are unbounded on tail draws. An infinite margin m turns the correction off,
// which is what Gaussian kernels use.
struct Denoiser {
  Mlp net;
  double sigma_data = 0.5;
  double tail_margin = std::numeric_limits<double>::infinity();

  static constexpr double kTailSharpness = 8.0;

  struct Coefs {
    double skip, out, in;
    double d_skip, d_out, d_in;  // derivatives w.r.t. s^2
  };

  Coefs coefs(double s2) const {
    const double sd2 = sigma_data * sigma_data;
    const double t = s2 + sd2;
    const double in = 1.0 / std::sqrt(t);
    const double out = sigma_data * std::sqrt(s2 / t);
    return {sd2 / t, out, in, -sd2 / (t * t), 0.5 * sigma_data * sd2 / (std::sqrt(s2 / t) * t * t),
            -0.5 * in / t};
  }

  // Effective variance and its derivative w.r.t. q = |x|^2 / N.
  std::pair<double, double> effective_variance(double sigma, double q) const {
    if (std::isinf(tail_margin)) return {sigma * sigma, 0.0};
    const double sd2 = sigma_data * sigma_data;
    const double z = kTailSharpness * (q - tail_margin * (sigma * sigma + sd2)) / sd2;
    const double softplus = z > 30.0 ? z : std::log1p(std::exp(z));
    const double logistic = 1.0 / (1.0 + std::exp(-z));
    return {sigma * sigma + sd2 * softplus / kTailSharpness, logistic};
  }

  // 1 / c_out^2: unit weight on the raw network residual. Equals the
  // configured lambda(sigma) wherever s = sigma.
  double loss_weight(std::span<const double> x, double sigma) const {
    double q = 0.0;
    for (double v : x) q += v * v;
    const double o = coefs(effective_variance(sigma, q / static_cast<double>(x.size())).first).out;
    return 1.0 / (o * o);
  }

  double c_skip(double s) const { return coefs(s * s).skip; }
  double c_out(double s) const { return coefs(s * s).out; }
  double c_in(double s) const { return coefs(s * s).in; }

  struct Tape {
    MlpTape mlp;
    Vec sigmas;
    Samples x;
    Samples f;  // raw network output
    Vec s2;
    Vec ds2_dq;
  };

  Samples forward(const Samples& x, std::span<const double> sigmas, Tape* tape = nullptr) const {
    IPFM_REQUIRE(static_cast<std::size_t>(x.cols()) == sigmas.size(), "Denoiser: one sigma per column");
    const double inv_n = 1.0 / static_cast<double>(x.rows());
    Samples scaled = x;
    Vec s2(sigmas.size()), ds2(sigmas.size());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const auto J = static_cast<std::size_t>(j);
      std::tie(s2[J], ds2[J]) = effective_variance(sigmas[J], x.col(j).squaredNorm() * inv_n);
      scaled.col(j) *= coefs(s2[J]).in;
    }
    Samples f = mlp_forward_batch(net, scaled, sigmas, tape ? &tape->mlp : nullptr);
    Samples y(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const Coefs c = coefs(s2[static_cast<std::size_t>(j)]);
      y.col(j) = c.skip * x.col(j) + c.out * f.col(j);
    }
    if (tape) {
      tape->sigmas.assign(sigmas.begin(), sigmas.end());
      tape->x = x;
      tape->f = std::move(f);
      tape->s2 = std::move(s2);
      tape->ds2_dq = std::move(ds2);
    }
    return y;
  }

  // Reverse pass of <yhat, cotangent>. Returns the parameter gradient (if
  // requested) and the gradient w.r.t. x.
  std::pair<Vec, Samples> backward(const Tape& tape, const Samples& cotangent, bool want_params = true) const {
    Samples cf = cotangent;
    for (Eigen::Index j = 0; j < cf.cols(); ++j) cf.col(j) *= coefs(tape.s2[static_cast<std::size_t>(j)]).out;
    MlpGradient g = mlp_backward_batch(net, tape.mlp, cf, want_params);
    const Samples& gu = g.input_gradient;
    Samples gx(cotangent.rows(), cotangent.cols());
    const double inv_n = 1.0 / static_cast<double>(cotangent.rows());
    for (Eigen::Index j = 0; j < gx.cols(); ++j) {
      const auto J = static_cast<std::size_t>(j);
      const Coefs c = coefs(tape.s2[J]);
      const auto xj = tape.x.col(j);
      const double via_s2 = c.d_skip * xj.dot(cotangent.col(j)) + c.d_out * tape.f.col(j).dot(cotangent.col(j)) +
                            c.d_in * xj.dot(gu.col(j));
      gx.col(j) = c.in * gu.col(j) + c.skip * cotangent.col(j) + (via_s2 * tape.ds2_dq[J] * 2.0 * inv_n) * xj;
    }
    return {std::move(g.param_gradient), std::move(gx)};
  }

  Vec operator()(std::span<const double> x, double sigma) const {
    const Samples xm = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    const double s[1] = {sigma};
    const Samples y = forward(xm, s);
    return Vec(y.data(), y.data() + y.size());
  }
};

inline std::vector<std::size_t> default_widths(std::size_t n, std::size_t hidden = 128, std::size_t depth = 3) {
  std::vector<std::size_t> w{n};
  for (std::size_t i = 0; i < depth; ++i) w.push_back(hidden);
  w.push_back(n);
  return w;
}

// Per-coordinate standard deviation of a charge set, averaged over coordinates.
inline double empirical_sigma_data(const ChargeSet& data) {
  const std::size_t n = data.dim();
  double var = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) mean += data.weight(i) * data.point(i)[j];
    double v = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) v += data.weight(i) * std::pow(data.point(i)[j] - mean, 2);
    var += v;
  }
  return std::sqrt(var / static_cast<double>(n));
}

struct TeacherConfig {
  double p_mean = -1.2;
  double p_std = 1.2;
  double sigma_data = 0.5;
  double lr = 1e-3;
  double lr_final_fraction = 0.02;  // cosine decay to lr * fraction
  double ema_decay = 0.999;          // returned weights are the EMA; 0 disables
  double tail_margin = 1.5;          // finite D only
  std::size_t batch = 256;
  std::size_t steps = 4000;
  std::size_t hidden = 128;
  std::size_t depth = 3;
  Activation activation = Activation::Silu;

  // lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma sigma_data)^2
  double loss_weight(double sigma) const {
    return (sigma * sigma + sigma_data * sigma_data) / std::pow(sigma * sigma_data, 2);
  }
  double sample_sigma(RngState& rng) const { return std::exp(p_mean + p_std * rng.normal()); }
  double lr_at(std::size_t step) const {
    const double frac = steps > 1 ? static_cast<double>(step) / static_cast<double>(steps - 1) : 0.0;
    return lr * (lr_final_fraction + (1.0 - lr_final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
  }
};

// Writes one data draw into `out`.
using SampleSource = std::function<void(RngState&, std::span<double>)>;

inline SampleSource charge_sampler(const ChargeSet& data) {
  return [&data](RngState& rng, std::span<double> out) {
    const auto p = data.point(data.sample_index(rng));
    std::copy(p.begin(), p.end(), out.begin());
  };
}

// Minimizes E lambda(sigma) |yhat(x, sigma) - y|^2 with y ~ data, ln sigma ~ N(P_mean, P_std^2),
// x ~ p_sigma(. | y). Every sample of every step owns an RNG stream.
inline Denoiser train_denoiser(const SampleSource& data, const DimSpec& spec, const TeacherConfig& cfg, RngState rng,
                               std::vector<double>* loss_trace = nullptr) {
  if (cfg.batch == 0 || cfg.steps == 0) throw ConfigError("train_denoiser: batch and steps must be positive");
  const std::size_t n = spec.data_dim;
  Denoiser den{mlp_init(default_widths(n, cfg.hidden, cfg.depth), kMaxConditioningDim, rng.split("init"),
                        cfg.activation),
               cfg.sigma_data,
               spec.is_infinite() ? std::numeric_limits<double>::infinity() : cfg.tail_margin};
  AdamState adam(den.net.parameters.size());
  Vec ema = den.net.parameters;
  const auto B = static_cast<Eigen::Index>(cfg.batch);
  Samples y(static_cast<Eigen::Index>(n), B), x(static_cast<Eigen::Index>(n), B);
  Vec sig(cfg.batch), lam(cfg.batch);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (Eigen::Index j = 0; j < B; ++j) {
      RngState srng = rng.split("train", step).split(static_cast<std::uint64_t>(j));
      data(srng, {y.col(j).data(), n});
      sig[static_cast<std::size_t>(j)] = cfg.sample_sigma(srng);
      perturb_into({y.col(j).data(), n}, spec, sig[static_cast<std::size_t>(j)], srng, {x.col(j).data(), n});
      lam[static_cast<std::size_t>(j)] = den.loss_weight({x.col(j).data(), n}, sig[static_cast<std::size_t>(j)]);
    }
    Denoiser::Tape tape;
    const Samples out = den.forward(x, sig, &tape);
    Samples cot = out - y;
    double loss = 0.0;
    for (Eigen::Index j = 0; j < B; ++j) {
      const double l = lam[static_cast<std::size_t>(j)];
      loss += l * cot.col(j).squaredNorm();
      cot.col(j) *= 2.0 * l / static_cast<double>(B);
    }
    loss /= static_cast<double>(B);
    if (!std::isfinite(loss))
      throw TrainingError("train_denoiser: loss diverged", "{\"step\":" + std::to_string(step) + "}");
    if (loss_trace) loss_trace->push_back(loss);
    auto [gp, gx] = den.backward(tape, cot, true);
    adam_step(den.net.parameters, gp, adam, cfg.lr_at(step));
    const double d = std::min(cfg.ema_decay, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
    for (std::size_t i = 0; i < ema.size(); ++i) ema[i] = d * ema[i] + (1.0 - d) * den.net.parameters[i];
  }
  if (cfg.ema_decay > 0.0) den.net.parameters = std::move(ema);
  return den;
}

// The teacher yhat*_phi: either the exact posterior mean of a charge set or a trained network.
class TeacherModel {
 public:
  TeacherModel(ChargeSet oracle, DimSpec spec) : kind_(std::move(oracle)), spec_(spec) {}
  TeacherModel(Denoiser net, DimSpec spec) : kind_(std::move(net)), spec_(spec) {}

  const DimSpec& spec() const { return spec_; }
  bool is_oracle() const { return std::holds_alternative<ChargeSet>(kind_); }
  const ChargeSet& oracle() const { return std::get<ChargeSet>(kind_); }
  const Denoiser& network() const { return std::get<Denoiser>(kind_); }

  Samples denoise(const Samples& x, std::span<const double> sigmas) const {
    if (const auto* net = std::get_if<Denoiser>(&kind_)) return net->forward(x, sigmas);
    const auto& cs = std::get<ChargeSet>(kind_);
    Samples out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const Vec y = posterior_denoise(cs, {x.col(j).data(), static_cast<std::size_t>(x.rows())},
                                      sigmas[static_cast<std::size_t>(j)], spec_);
      out.col(j) = Eigen::Map<const Eigen::VectorXd>(y.data(), x.rows());
    }
    return out;
  }

  // Denoised values and the gradient of <yhat, cotangent> w.r.t. x (parameters frozen).
  std::pair<Samples, Samples> denoise_with_input_vjp(const Samples& x, std::span<const double> sigmas,
                                                     const std::function<Samples(const Samples&)>& cotangent_of) const {
    if (const auto* net = std::get_if<Denoiser>(&kind_)) {
      Denoiser::Tape tape;
      Samples y = net->forward(x, sigmas, &tape);
      const Samples cot = cotangent_of(y);
      auto [gp, gx] = net->backward(tape, cot, false);
      return {std::move(y), std::move(gx)};
    }
    const auto& cs = std::get<ChargeSet>(kind_);
    Samples y = denoise(x, sigmas);
    const Samples cot = cotangent_of(y);
    Samples gx(x.rows(), x.cols());
    const auto n = static_cast<std::size_t>(x.rows());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const Vec g = posterior_denoise_backward(cs, {x.col(j).data(), n}, sigmas[static_cast<std::size_t>(j)], spec_,
                                               {cot.col(j).data(), n});
      gx.col(j) = Eigen::Map<const Eigen::VectorXd>(g.data(), x.rows());
    }
    return {std::move(y), std::move(gx)};
  }

  Vec operator()(std::span<const double> x, double sigma) const {
    const Samples xm = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    const double s[1] = {sigma};
    const Samples y = denoise(xm, s);
    return Vec(y.data(), y.data() + y.size());
  }

 private:
  std::variant<ChargeSet, Denoiser> kind_;
  DimSpec spec_;
};

// dx/dsigma = f = (x - yhat) / sigma. Follows from dx/dr = f / sqrt(D) and r = sigma sqrt(D).
inline Vec ode_rhs(const TeacherModel& teacher, std::span<const double> x, double sigma) {
  IPFM_REQUIRE(sigma > 0.0, "ode_rhs: sigma must be positive");
  return normalized_field(teacher(x, sigma), x, sigma);
}

enum class OdeMethod { Euler, Heun };

inline Samples ode_rhs_batch(const TeacherModel& teacher, const Samples& x, double sigma) {
  const std::vector<double> sig(static_cast<std::size_t>(x.cols()), sigma);
  return (x - teacher.denoise(x, sig)) / sigma;
}

// Integrates the flow from grid[0] down to grid.back() starting at `x0`.
// Heun applies the trapezoidal correction on every step but the last.
inline Samples ode_integrate(const TeacherModel& teacher, std::span<const double> grid, Samples x, OdeMethod method,
                             std::size_t* nfe = nullptr) {
  if (grid.size() < 2) throw ConfigError("ode_sample: grid needs at least two levels");
  for (std::size_t i = 0; i + 1 < grid.size(); ++i)
    if (!(grid[i + 1] < grid[i]) || !(grid[i + 1] > 0.0))
      throw ConfigError("ode_sample: grid must be strictly decreasing and positive");
  std::size_t calls = 0;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const double s0 = grid[i];
    const double s1 = grid[i + 1];
    const double h = s1 - s0;
    const Samples d0 = ode_rhs_batch(teacher, x, s0);
    ++calls;
    Samples xe = x + h * d0;
    if (method == OdeMethod::Heun && i + 2 < grid.size()) {
      const Samples d1 = ode_rhs_batch(teacher, xe, s1);
      ++calls;
      x += 0.5 * h * (d0 + d1);
    } else {
      x = std::move(xe);
    }
  }
  if (nfe) *nfe = calls;
  return x;
}

inline Samples ode_sample(const TeacherModel& teacher, std::span<const double> grid, std::size_t n_samples,
                          OdeMethod method, RngState rng, std::size_t* nfe = nullptr) {
  if (grid.empty()) throw ConfigError("ode_sample: empty grid");
  const DimSpec& spec = teacher.spec();
  Samples x(static_cast<Eigen::Index>(spec.data_dim), static_cast<Eigen::Index>(n_samples));
  for (std::size_t j = 0; j < n_samples; ++j) {
    RngState srng = rng.split("prior", j);
    const Vec p = prior_sample(spec, grid[0], srng);
    x.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(p.data(), x.rows());
  }
  return ode_integrate(teacher, grid, std::move(x), method, nfe);
}

}  // namespace ipfm
