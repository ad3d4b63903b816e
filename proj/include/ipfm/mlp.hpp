#pragma once

// Fully connected network with noise-level conditioning and hand-written
// reverse mode.
//
// layer_widths = [n_in, h_1, ..., n_out]. The first affine layer sees the data
// input concatenated with a conditioning embedding of ln(sigma), so its fan-in
// is n_in + conditioning_dim. Hidden layers apply the activation; the output
// layer is affine.
//
// Parameter layout, per layer: W (fan_out x fan_in, row-major) then b (fan_out).

#include <Eigen/Dense>

#include <algorithm>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ipfm/error.hpp"
#include "ipfm/rng.hpp"

namespace ipfm {

using Vec = std::vector<double>;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;  // column = one sample
using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMutMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

enum class Activation : std::uint8_t { Tanh = 0, Silu = 1 };

inline constexpr std::size_t kMaxConditioningDim = 4;

// [ln(sigma)/4, sin(ln sigma), cos(ln sigma), 1]; every component is O(1) for
// sigma in [0.002, 80]. A network with conditioning_dim k sees the first k.
inline std::array<double, kMaxConditioningDim> sigma_embedding(double sigma) {
  IPFM_REQUIRE(sigma > 0.0, "sigma_embedding: sigma must be positive");
  const double ls = std::log(sigma);
  return {ls / 4.0, std::sin(ls), std::cos(ls), 1.0};
}

struct Mlp {
  std::vector<std::size_t> layer_widths;
  std::size_t conditioning_dim = kMaxConditioningDim;
  Activation activation = Activation::Silu;
  Vec parameters;

  std::size_t input_dim() const { return layer_widths.front(); }
  std::size_t output_dim() const { return layer_widths.back(); }
  std::size_t num_layers() const { return layer_widths.size() - 1; }

  std::size_t fan_in(std::size_t layer) const {
    return layer_widths[layer] + (layer == 0 ? conditioning_dim : 0);
  }
  std::size_t fan_out(std::size_t layer) const { return layer_widths[layer + 1]; }

  std::size_t weight_offset(std::size_t layer) const {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l) off += (fan_in(l) + 1) * fan_out(l);
    return off;
  }
  std::size_t bias_offset(std::size_t layer) const {
    return weight_offset(layer) + fan_in(layer) * fan_out(layer);
  }
};

inline void validate_layout(const std::vector<std::size_t>& widths, std::size_t conditioning_dim) {
  if (widths.size() < 2) throw ConfigError("mlp: need at least an input and an output width");
  for (auto w : widths)
    if (w == 0) throw ConfigError("mlp: widths must be positive");
  if (conditioning_dim < 1 || conditioning_dim > kMaxConditioningDim)
    throw ConfigError("mlp: conditioning_dim must be in [1, 4]");
}

inline std::size_t parameter_count(const std::vector<std::size_t>& widths, std::size_t conditioning_dim) {
  validate_layout(widths, conditioning_dim);
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l] + (l == 0 ? conditioning_dim : 0);
    n += (in + 1) * widths[l + 1];
  }
  return n;
}

inline Mlp mlp_init(const std::vector<std::size_t>& widths, std::size_t conditioning_dim, RngState rng,
                    Activation act = Activation::Silu) {
  Mlp net;
  net.layer_widths = widths;
  net.conditioning_dim = conditioning_dim;
  net.activation = act;
  net.parameters.assign(parameter_count(widths, conditioning_dim), 0.0);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(net.fan_in(l)));
    const std::size_t w0 = net.weight_offset(l);
    const std::size_t n = net.fan_in(l) * net.fan_out(l);
    for (std::size_t i = 0; i < n; ++i) net.parameters[w0 + i] = scale * rng.normal();
  }
  return net;
}

namespace detail {

inline double act_value(Activation a, double z) {
  if (a == Activation::Tanh) return std::tanh(z);
  return z / (1.0 + std::exp(-z));
}

inline double act_deriv(Activation a, double z) {
  if (a == Activation::Tanh) {
    const double t = std::tanh(z);
    return 1.0 - t * t;
  }
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

}  // namespace detail

// Intermediate values of a batched forward pass, kept for the backward pass.
struct MlpTape {
  std::vector<Matrix> inputs;       // inputs[l]: input to layer l (with embedding rows for l = 0)
  std::vector<Matrix> preacts;      // preacts[l]: W x + b of layer l
  Matrix output;
};

// Batched forward. `x` is n_in x B, `sigmas` has B entries.
inline Matrix mlp_forward_batch(const Mlp& net, const Matrix& x, std::span<const double> sigmas,
                                MlpTape* tape = nullptr) {
  IPFM_REQUIRE(static_cast<std::size_t>(x.rows()) == net.input_dim(), "mlp_forward: input dimension mismatch");
  IPFM_REQUIRE(static_cast<std::size_t>(x.cols()) == sigmas.size(), "mlp_forward: one sigma per column required");
  const Eigen::Index batch = x.cols();
  const Eigen::Index in0 = static_cast<Eigen::Index>(net.input_dim());
  const Eigen::Index cd = static_cast<Eigen::Index>(net.conditioning_dim);

  Matrix h(in0 + cd, batch);
  h.topRows(in0) = x;
  for (Eigen::Index j = 0; j < batch; ++j) {
    const auto e = sigma_embedding(sigmas[static_cast<std::size_t>(j)]);
    for (Eigen::Index k = 0; k < cd; ++k) h(in0 + k, j) = e[static_cast<std::size_t>(k)];
  }
  if (tape) {
    tape->inputs.clear();
    tape->preacts.clear();
  }
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto fi = static_cast<Eigen::Index>(net.fan_in(l));
    const auto fo = static_cast<Eigen::Index>(net.fan_out(l));
    RowMajorMap W(net.parameters.data() + net.weight_offset(l), fo, fi);
    Eigen::Map<const Eigen::VectorXd> b(net.parameters.data() + net.bias_offset(l), fo);
    Matrix z = W * h;
    z.colwise() += b;
    if (tape) tape->inputs.push_back(h);
    const bool last = (l + 1 == net.num_layers());
    if (last) {
      h = z;
    } else {
      h = z.unaryExpr([a = net.activation](double v) { return detail::act_value(a, v); });
    }
    if (tape) tape->preacts.push_back(std::move(z));
  }
  if (tape) tape->output = h;
  return h;
}

struct MlpGradient {
  Vec param_gradient;  // summed over the batch
  Matrix input_gradient;  // n_in x B
};

// Reverse pass for <output, cotangent> summed over the batch.
inline MlpGradient mlp_backward_batch(const Mlp& net, const MlpTape& tape, const Matrix& cotangent,
                                      bool want_params = true) {
  IPFM_REQUIRE(tape.preacts.size() == net.num_layers(), "mlp_backward: tape does not match network");
  IPFM_REQUIRE(cotangent.rows() == tape.output.rows() && cotangent.cols() == tape.output.cols(),
               "mlp_backward: cotangent shape mismatch");
  MlpGradient g;
  if (want_params) g.param_gradient.assign(net.parameters.size(), 0.0);
  Matrix delta = cotangent;  // d/d(preact) of the current layer
  for (std::size_t li = net.num_layers(); li-- > 0;) {
    const auto fi = static_cast<Eigen::Index>(net.fan_in(li));
    const auto fo = static_cast<Eigen::Index>(net.fan_out(li));
    if (li + 1 != net.num_layers()) {
      delta = delta.cwiseProduct(
          tape.preacts[li].unaryExpr([a = net.activation](double v) { return detail::act_deriv(a, v); }));
    }
    if (want_params) {
      RowMajorMutMap gW(g.param_gradient.data() + net.weight_offset(li), fo, fi);
      Eigen::Map<Eigen::VectorXd> gb(g.param_gradient.data() + net.bias_offset(li), fo);
      gW.noalias() = delta * tape.inputs[li].transpose();
      gb = delta.rowwise().sum();
    }
    RowMajorMap W(net.parameters.data() + net.weight_offset(li), fo, fi);
    Matrix up = W.transpose() * delta;
    delta = std::move(up);
  }
  g.input_gradient = delta.topRows(static_cast<Eigen::Index>(net.input_dim()));
  return g;
}

// Single-sample convenience wrappers.
inline Vec mlp_forward(const Mlp& net, std::span<const double> input, double sigma) {
  IPFM_REQUIRE(input.size() == net.input_dim(), "mlp_forward: input dimension mismatch");
  IPFM_REQUIRE(sigma > 0.0, "mlp_forward: sigma must be positive");
  const Matrix x = Eigen::Map<const Eigen::VectorXd>(input.data(), static_cast<Eigen::Index>(input.size()));
  const double s[1] = {sigma};
  const Matrix y = mlp_forward_batch(net, x, s);
  return Vec(y.data(), y.data() + y.size());
}

struct MlpSampleGradient {
  Vec param_gradient;
  Vec input_gradient;
};

inline MlpSampleGradient mlp_backward(const Mlp& net, std::span<const double> input, double sigma,
                                      std::span<const double> output_cotangent) {
  IPFM_REQUIRE(input.size() == net.input_dim(), "mlp_backward: input dimension mismatch");
  IPFM_REQUIRE(output_cotangent.size() == net.output_dim(), "mlp_backward: cotangent dimension mismatch");
  const Matrix x = Eigen::Map<const Eigen::VectorXd>(input.data(), static_cast<Eigen::Index>(input.size()));
  const double s[1] = {sigma};
  MlpTape tape;
  mlp_forward_batch(net, x, s, &tape);
  const Matrix c = Eigen::Map<const Eigen::VectorXd>(output_cotangent.data(),
                                                     static_cast<Eigen::Index>(output_cotangent.size()));
  auto g = mlp_backward_batch(net, tape, c);
  return {std::move(g.param_gradient), Vec(g.input_gradient.data(), g.input_gradient.data() + g.input_gradient.size())};
}

// ---------------------------------------------------------------------------
// Checkpoint format (little-endian):
//   "IPFMMLP1" | u32 n_widths | u64 widths[n_widths] | u64 conditioning_dim |
//   u8 activation | u64 n_params | f64 params[n_params]

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), bytes.size());
}

template <class T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ConfigError("mlp checkpoint: truncated file");
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  pos += sizeof(T);
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

inline constexpr char kMlpMagic[8] = {'I', 'P', 'F', 'M', 'M', 'L', 'P', '1'};

}  // namespace detail

inline std::string serialize_mlp(const Mlp& net) {
  std::string out(detail::kMlpMagic, sizeof(detail::kMlpMagic));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(net.layer_widths.size()));
  for (auto w : net.layer_widths) detail::put_le<std::uint64_t>(out, w);
  detail::put_le<std::uint64_t>(out, net.conditioning_dim);
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(net.activation));
  detail::put_le<std::uint64_t>(out, net.parameters.size());
  for (double p : net.parameters) detail::put_le<double>(out, p);
  return out;
}

inline Mlp deserialize_mlp(const std::string& blob) {
  if (blob.size() < sizeof(detail::kMlpMagic) ||
      std::memcmp(blob.data(), detail::kMlpMagic, sizeof(detail::kMlpMagic)) != 0)
    throw ConfigError("mlp checkpoint: bad magic");
  std::size_t pos = sizeof(detail::kMlpMagic);
  Mlp net;
  const auto nw = detail::get_le<std::uint32_t>(blob, pos);
  for (std::uint32_t i = 0; i < nw; ++i) net.layer_widths.push_back(detail::get_le<std::uint64_t>(blob, pos));
  net.conditioning_dim = detail::get_le<std::uint64_t>(blob, pos);
  const auto act = detail::get_le<std::uint8_t>(blob, pos);
  if (act > 1) throw ConfigError("mlp checkpoint: unknown activation");
  net.activation = static_cast<Activation>(act);
  const auto np = detail::get_le<std::uint64_t>(blob, pos);
  if (np != parameter_count(net.layer_widths, net.conditioning_dim))
    throw ConfigError("mlp checkpoint: parameter count does not match widths");
  net.parameters.resize(np);
  for (auto& p : net.parameters) p = detail::get_le<double>(blob, pos);
  if (pos != blob.size()) throw ConfigError("mlp checkpoint: trailing bytes");
  return net;
}

}  // namespace ipfm
