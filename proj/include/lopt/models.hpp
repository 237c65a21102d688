#pragma once

// Mapping network theta : Z -> X and the differentiable forward models that
// inference inverts.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "lopt/archive.hpp"
#include "lopt/errors.hpp"
#include "lopt/optimizers.hpp"
#include "lopt/rng.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

// ---------------------------------------------------------------------------
// MLPs

struct DenseLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
};

enum class Activation { leaky_relu, tanh };

struct MlpParams {
  std::vector<DenseLayer> layers;
  double slope = 0.2;  // leaky_relu negative slope

  std::vector<std::size_t> dims() const {
    std::vector<std::size_t> d;
    if (layers.empty()) return d;
    d.push_back(layers.front().in_dim());
    for (const auto& l : layers) d.push_back(l.out_dim());
    return d;
  }
  std::size_t in_dim() const { return layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.back().out_dim(); }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    return out;
  }

  // Deep copy. A copy with requires_grad == false is safe to share read-only
  // across worker threads.
  MlpParams clone(bool requires_grad) const {
    MlpParams c;
    c.slope = slope;
    for (const auto& l : layers) {
      c.layers.push_back({Tensor(l.weight.shape(), l.weight.to_vector(), requires_grad),
                          Tensor(l.bias.shape(), l.bias.to_vector(), requires_grad)});
    }
    return c;
  }
  MlpParams frozen() const { return clone(false); }

  bool all_finite() const {
    for (const auto& p : parameters()) {
      for (double v : p.values()) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }

  // Bitwise equality of every weight and bias.
  bool identical_to(const MlpParams& other) const {
    if (layers.size() != other.layers.size() || slope != other.slope) return false;
    const auto a = parameters();
    const auto b = other.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].shape() != b[i].shape()) return false;
      const auto av = a[i].values();
      const auto bv = b[i].values();
      if (!std::equal(av.begin(), av.end(), bv.begin(), [](double x, double y) {
            return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
          })) {
        return false;
      }
    }
    return true;
  }
};

inline void check_mlp_chain(const MlpParams& p) {
  if (p.layers.empty()) throw DimensionError("MLP has no layers");
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.dim(0) != l.out_dim()) {
      throw DimensionError("MLP layer " + std::to_string(i) + " has weight " +
                           shape_str(l.weight.shape()) + " and bias " + shape_str(l.bias.shape()));
    }
    if (i > 0 && p.layers[i - 1].out_dim() != l.in_dim()) {
      throw DimensionError("MLP layer " + std::to_string(i) + " expects " +
                           std::to_string(l.in_dim()) + " inputs but layer " +
                           std::to_string(i - 1) + " produces " +
                           std::to_string(p.layers[i - 1].out_dim()));
    }
  }
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
inline MlpParams init_mlp(const std::vector<std::size_t>& dims, std::uint64_t seed,
                          double slope = 0.2, bool requires_grad = true) {
  if (dims.size() < 2) throw DimensionError("MLP needs at least two dims");
  Rng rng = make_rng(seed, {streams::theta_init});
  MlpParams p;
  p.slope = slope;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[i]));
    p.layers.push_back(
        {Tensor::matrix(dims[i], dims[i + 1], uniform_vector(rng, dims[i] * dims[i + 1], -bound, bound),
                        requires_grad),
         Tensor::vector(uniform_vector(rng, dims[i + 1], -bound, bound), requires_grad)});
  }
  return p;
}

// 3-layer mapping network dz -> hidden -> hidden -> dx.
inline MlpParams make_mapping_network(std::size_t dz, std::size_t hidden, std::size_t dx,
                                      std::uint64_t seed, double slope = 0.2) {
  return init_mlp({dz, hidden, hidden, dx}, seed, slope);
}

// Square identity layers with zero biases: theta(z) = z on the positive orthant.
inline MlpParams identity_mapping(std::size_t d, bool requires_grad = true) {
  MlpParams p;
  for (int l = 0; l < 3; ++l) {
    std::vector<double> eye(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
    p.layers.push_back({Tensor::matrix(d, d, std::move(eye), requires_grad),
                        Tensor::zeros({d}, requires_grad)});
  }
  return p;
}

// Activation after every layer but the last. Accepts [d] or a batch [n x d].
inline Tensor mlp_forward(const MlpParams& p, const Tensor& x, Activation act) {
  check_mlp_chain(p);
  if (x.shape().empty() || x.shape().back() != p.in_dim()) {
    throw DimensionError("MLP expects input width " + std::to_string(p.in_dim()) + ", got " +
                         shape_str(x.shape()));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    h = add(matmul(h, p.layers[i].weight), p.layers[i].bias);
    if (i + 1 < p.layers.size()) {
      h = act == Activation::leaky_relu ? leaky_relu(h, p.slope) : tanh(h);
    }
  }
  return h;
}

// linear -> leaky_relu -> linear -> leaky_relu -> linear
inline Tensor mapping_forward(const MlpParams& theta, const Tensor& z) {
  if (theta.layers.size() != 3) {
    throw DimensionError("mapping network must have exactly 3 layers, has " +
                         std::to_string(theta.layers.size()));
  }
  return mlp_forward(theta, z, Activation::leaky_relu);
}

inline void store_mlp(Archive& ar, const std::string& prefix, const MlpParams& p) {
  ar.set_attr(prefix + ".layers", std::to_string(p.layers.size()));
  ar.set_attr(prefix + ".slope", format_double(p.slope));
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    ar.put(prefix + "." + std::to_string(i) + ".weight", p.layers[i].weight);
    ar.put(prefix + "." + std::to_string(i) + ".bias", p.layers[i].bias);
  }
}

inline MlpParams load_mlp(const Archive& ar, const std::string& prefix, bool requires_grad = true) {
  MlpParams p;
  const auto n = std::stoul(ar.attr(prefix + ".layers"));
  p.slope = parse_double(ar.attr(prefix + ".slope"));
  for (std::size_t i = 0; i < n; ++i) {
    p.layers.push_back({ar.get(prefix + "." + std::to_string(i) + ".weight").to_tensor(requires_grad),
                        ar.get(prefix + "." + std::to_string(i) + ".bias").to_tensor(requires_grad)});
  }
  check_mlp_chain(p);
  return p;
}

// ---------------------------------------------------------------------------
// Forward models

enum class ForwardKind { rugged_decoder, mini_decoder, additive_correction };

inline std::string_view to_string(ForwardKind k) {
  switch (k) {
    case ForwardKind::rugged_decoder: return "rugged_decoder";
    case ForwardKind::mini_decoder: return "mini_decoder";
    case ForwardKind::additive_correction: return "additive_correction";
  }
  return "?";
}

// F(x) = amp^T sin(freq^T x + phase) + linear^T x, written in row form.
struct RuggedDecoder {
  Tensor freq;    // [dx x k]
  Tensor phase;   // [k]
  Tensor amp;     // [k x dy]
  Tensor linear;  // [dx x dy]
};

struct RuggedOptions {
  std::size_t dx = 2;
  std::size_t dy = 8;
  std::size_t features = 16;
  double frequency = 3.0;    // std of freq entries
  double amplitude = 1.0;    // scale of the oscillating part
  double linear_gain = 1.0;  // scale of the linear trend
  bool zero_phase = false;
  std::uint64_t seed = 0;
};

inline RuggedDecoder make_rugged_decoder(const RuggedOptions& o) {
  Rng rng = make_rng(o.seed, {streams::model_weights});
  const double k = static_cast<double>(o.features);
  RuggedDecoder r;
  r.freq = Tensor::matrix(o.dx, o.features, gaussian_vector(rng, o.dx * o.features, o.frequency));
  r.phase = Tensor::vector(o.zero_phase ? std::vector<double>(o.features, 0.0)
                                        : uniform_vector(rng, o.features, 0.0, 2.0 * std::numbers::pi));
  r.amp = Tensor::matrix(o.features, o.dy,
                         gaussian_vector(rng, o.features * o.dy, o.amplitude / std::sqrt(k)));
  r.linear = Tensor::matrix(o.dx, o.dy,
                            gaussian_vector(rng, o.dx * o.dy,
                                            o.linear_gain / std::sqrt(static_cast<double>(o.dx))));
  return r;
}

struct MiniDecoder {
  std::size_t dx = 8;
  std::size_t dy = 32;
  std::size_t hidden = 32;
  std::optional<MlpParams> net;  // 2 layers, tanh; empty until fitted or loaded
};

class ForwardModel;

// Wrapped model evaluated at anchor + correction.
struct AdditiveCorrection {
  std::shared_ptr<const ForwardModel> inner;
  Tensor anchor;
};

class ForwardModel {
 public:
  using Impl = std::variant<RuggedDecoder, MiniDecoder, AdditiveCorrection>;

  ForwardModel(RuggedDecoder r) : impl_(std::move(r)) {}    // NOLINT(google-explicit-constructor)
  ForwardModel(MiniDecoder m) : impl_(std::move(m)) {}      // NOLINT(google-explicit-constructor)
  ForwardModel(AdditiveCorrection a) : impl_(std::move(a)) {  // NOLINT(google-explicit-constructor)
    const auto& add = std::get<AdditiveCorrection>(impl_);
    if (!add.inner) throw ContractError("additive correction without a wrapped model");
    if (add.anchor.rank() != 1 || add.anchor.dim(0) != add.inner->input_dim()) {
      throw DimensionError("anchor " + shape_str(add.anchor.shape()) +
                           " does not match wrapped model input dim " +
                           std::to_string(add.inner->input_dim()));
    }
  }

  ForwardKind kind() const { return static_cast<ForwardKind>(impl_.index()); }
  const Impl& impl() const { return impl_; }

  std::size_t input_dim() const {
    return std::visit(
        [](const auto& m) -> std::size_t {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, RuggedDecoder>) return m.freq.dim(0);
          else if constexpr (std::is_same_v<M, MiniDecoder>) return m.dx;
          else return m.inner->input_dim();
        },
        impl_);
  }

  std::size_t output_dim() const {
    return std::visit(
        [](const auto& m) -> std::size_t {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, RuggedDecoder>) return m.amp.dim(1);
          else if constexpr (std::is_same_v<M, MiniDecoder>) return m.dy;
          else return m.inner->output_dim();
        },
        impl_);
  }

  Tensor forward(const Tensor& x) const;

  void store(Archive& ar, const std::string& prefix) const;
  static ForwardModel load(const Archive& ar, const std::string& prefix);

 private:
  Impl impl_;
};

inline void check_input(const ForwardModel& f, const Tensor& x) {
  if (x.shape().empty() || x.shape().back() != f.input_dim()) {
    throw DimensionError(std::string(to_string(f.kind())) + " expects input width " +
                         std::to_string(f.input_dim()) + ", got " + shape_str(x.shape()));
  }
}

inline Tensor rugged_forward(const ForwardModel& f, const Tensor& x) {
  const auto* r = std::get_if<RuggedDecoder>(&f.impl());
  if (!r) throw ContractError("rugged_forward on a " + std::string(to_string(f.kind())));
  check_input(f, x);
  return add(matmul(sin(add(matmul(x, r->freq), r->phase)), r->amp), matmul(x, r->linear));
}

inline Tensor mini_decoder_forward(const ForwardModel& f, const Tensor& x) {
  const auto* m = std::get_if<MiniDecoder>(&f.impl());
  if (!m) throw ContractError("mini_decoder_forward on a " + std::string(to_string(f.kind())));
  if (!m->net) throw UninitializedModelError("mini decoder used before its weights were set");
  check_input(f, x);
  return mlp_forward(*m->net, x, Activation::tanh);
}

inline Tensor additive_forward(const ForwardModel& f, const Tensor& correction) {
  const auto* a = std::get_if<AdditiveCorrection>(&f.impl());
  if (!a) throw ContractError("additive_forward on a " + std::string(to_string(f.kind())));
  if (correction.shape() != a->anchor.shape()) {
    throw DimensionError("correction " + shape_str(correction.shape()) + " does not match anchor " +
                         shape_str(a->anchor.shape()));
  }
  return a->inner->forward(add(a->anchor, correction));
}

inline Tensor ForwardModel::forward(const Tensor& x) const {
  switch (kind()) {
    case ForwardKind::rugged_decoder: return rugged_forward(*this, x);
    case ForwardKind::mini_decoder: return mini_decoder_forward(*this, x);
    case ForwardKind::additive_correction: return additive_forward(*this, x);
  }
  throw ContractError("unknown forward model kind");
}

inline void ForwardModel::store(Archive& ar, const std::string& prefix) const {
  ar.set_attr(prefix + ".kind", std::string(to_string(kind())));
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, RuggedDecoder>) {
          ar.put(prefix + ".freq", m.freq);
          ar.put(prefix + ".phase", m.phase);
          ar.put(prefix + ".amp", m.amp);
          ar.put(prefix + ".linear", m.linear);
        } else if constexpr (std::is_same_v<M, MiniDecoder>) {
          if (!m.net) throw UninitializedModelError("cannot store an unfitted mini decoder");
          store_mlp(ar, prefix + ".net", *m.net);
        } else {
          ar.put(prefix + ".anchor", m.anchor);
          m.inner->store(ar, prefix + ".inner");
        }
      },
      impl_);
}

inline ForwardModel ForwardModel::load(const Archive& ar, const std::string& prefix) {
  const auto& kind = ar.attr(prefix + ".kind");
  if (kind == "rugged_decoder") {
    RuggedDecoder r{ar.get(prefix + ".freq").to_tensor(), ar.get(prefix + ".phase").to_tensor(),
                    ar.get(prefix + ".amp").to_tensor(), ar.get(prefix + ".linear").to_tensor()};
    return ForwardModel(std::move(r));
  }
  if (kind == "mini_decoder") {
    MiniDecoder m;
    m.net = load_mlp(ar, prefix + ".net", false);
    m.dx = m.net->in_dim();
    m.dy = m.net->out_dim();
    m.hidden = m.net->layers.front().out_dim();
    return ForwardModel(std::move(m));
  }
  if (kind == "additive_correction") {
    auto inner = std::make_shared<const ForwardModel>(load(ar, prefix + ".inner"));
    return ForwardModel(AdditiveCorrection{inner, ar.get(prefix + ".anchor").to_tensor()});
  }
  throw IoError("unknown forward model kind '" + kind + "'");
}

inline void save_weights(const std::filesystem::path& path, const MlpParams& theta) {
  Archive ar{std::string(kWeightsVersion)};
  store_mlp(ar, "theta", theta);
  ar.save(path);
}

inline MlpParams load_weights(const std::filesystem::path& path) {
  return load_mlp(Archive::load(path, kWeightsVersion), "theta");
}

// ---------------------------------------------------------------------------
// Mini decoder fitting

struct DecoderDataset {
  Tensor inputs;   // [n x dx]
  Tensor targets;  // [n x dy]

  std::size_t size() const { return inputs.defined() ? inputs.dim(0) : 0; }
};

// Targets from a random tanh teacher network on standard-normal inputs.
inline DecoderDataset make_decoder_dataset(std::size_t n, std::size_t dx, std::size_t dy,
                                           std::uint64_t seed, std::size_t teacher_hidden = 16) {
  Rng rng = make_rng(seed, {streams::decoder_data});
  auto teacher = init_mlp({dx, teacher_hidden, dy}, mix64(seed), 0.2, false);
  // Sharpen the first layer so the teacher is clearly nonlinear.
  for (auto& w : teacher.layers[0].weight.values_mut()) w *= 2.5;
  Tensor x = Tensor::matrix(n, dx, gaussian_vector(rng, n * dx));
  NoGradGuard guard;
  Tensor y = mlp_forward(teacher, x, Activation::tanh);
  return {x, y.detach()};
}

struct DecoderFit {
  MlpParams params;                 // frozen (requires_grad == false)
  std::vector<double> epoch_loss;   // training mse before each epoch's update
  double final_loss = 0.0;          // training mse after the last update
};

// Full-batch Adam on mse, 2-layer tanh decoder.
inline DecoderFit fit_mini_decoder(const DecoderDataset& data, std::size_t hidden, std::size_t epochs,
                                   double lr, std::uint64_t seed) {
  if (data.size() == 0) throw InputError("fit_mini_decoder: empty dataset");
  if (data.targets.rank() != 2 || data.targets.dim(0) != data.size()) {
    throw DimensionError("fit_mini_decoder: inputs " + shape_str(data.inputs.shape()) +
                         " and targets " + shape_str(data.targets.shape()) + " disagree");
  }
  DecoderFit fit;
  MlpParams net = init_mlp({data.inputs.dim(1), hidden, data.targets.dim(1)}, seed);
  Optimizer opt({OptimizerKind::adam, lr}, net.parameters());
  fit.epoch_loss.reserve(epochs);
  for (std::size_t e = 0; e < epochs; ++e) {
    Tensor loss = mse(mlp_forward(net, data.inputs, Activation::tanh), data.targets);
    fit.epoch_loss.push_back(loss.item());
    backward(loss);
    opt.step();
    opt.zero_grad();
  }
  {
    NoGradGuard guard;
    fit.final_loss = mse(mlp_forward(net, data.inputs, Activation::tanh), data.targets).item();
  }
  fit.params = net.frozen();
  return fit;
}

}  // namespace lopt
