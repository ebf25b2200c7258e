// SPDX-License-Identifier: Apache-2.0
#pragma once

// Conditional vector field v(x, t, c): an MLP over [x, Fourier(t), embed(c)]
// trained by flow matching on the interpolant x_t = (1 - t) x_0 + t eps,
// t = 1 being pure noise and t = 0 data.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "flashgrpo/diffkit.hpp"
#include "flashgrpo/errors.hpp"
#include "flashgrpo/rng.hpp"
#include "flashgrpo/tensor.hpp"

namespace flashgrpo {

inline constexpr std::size_t kTimeFrequencies = 8;
inline constexpr std::size_t kTimeFeatures = 2 * kTimeFrequencies;

struct Architecture {
  std::size_t data_dim = 2;
  std::size_t hidden_width = 64;
  std::size_t depth = 3;  // hidden layers
  std::size_t num_classes = 2;
  std::size_t embed_dim = 8;

  void validate() const {
    if (data_dim == 0) throw ConfigError("model.data_dim: must be positive");
    if (hidden_width == 0) throw ConfigError("model.hidden_width: must be positive");
    if (depth == 0) throw ConfigError("model.depth: must be positive");
    if (num_classes == 0) throw ConfigError("model.num_classes: must be positive");
    if (embed_dim == 0) throw ConfigError("model.embed_dim: must be positive");
  }

  std::size_t input_dim() const { return data_dim + kTimeFeatures + embed_dim; }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Closed form: condition table + first layer + (depth-1) square layers + head.
inline std::size_t parameter_count(const Architecture& a) {
  const std::size_t w = a.hidden_width;
  return (a.num_classes + 1) * a.embed_dim + (a.input_dim() * w + w) +
         (a.depth - 1) * (w * w + w) + (w * a.data_dim + a.data_dim);
}

// Prompt class, or the unconditional slot used for classifier-free guidance.
class Condition {
 public:
  static constexpr Condition uncond() { return Condition(); }
  static constexpr Condition of(std::size_t class_id) {
    return Condition(class_id);
  }

  constexpr bool unconditional() const { return uncond_; }
  constexpr std::size_t class_id() const { return id_; }

  // Row of the condition table; the unconditional row is the last one.
  std::size_t table_row(std::size_t num_classes) const {
    if (uncond_) return num_classes;
    if (id_ >= num_classes) {
      throw LookupError("condition: unknown class " + std::to_string(id_) +
                        " (model has " + std::to_string(num_classes) + ")");
    }
    return id_;
  }

  std::string to_string() const {
    return uncond_ ? std::string("uncond") : std::to_string(id_);
  }

  friend constexpr bool operator==(const Condition&, const Condition&) = default;

 private:
  constexpr Condition() : uncond_(true), id_(0) {}
  constexpr explicit Condition(std::size_t id) : uncond_(false), id_(id) {}

  bool uncond_;
  std::size_t id_;
};

// Learnable weights. Layout of `tensors`: [0] condition table [(C+1), E],
// then (weight, bias) for each of the depth+1 affine layers.
struct VectorFieldParams {
  Architecture arch;
  std::uint64_t seed = 0;
  std::vector<Tensor> tensors;

  std::size_t layer_count() const { return arch.depth + 1; }
  const Tensor& condition_table() const { return tensors.at(0); }
  const Tensor& weight(std::size_t layer) const { return tensors.at(1 + 2 * layer); }
  const Tensor& bias(std::size_t layer) const { return tensors.at(2 + 2 * layer); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Tensor& t : tensors) n += t.size();
    return n;
  }

  bool all_finite() const {
    for (const Tensor& t : tensors) {
      if (!t.all_finite()) return false;
    }
    return true;
  }

  void set_zero() {
    for (Tensor& t : tensors) {
      for (double& v : t.values()) v = 0.0;
    }
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(scalar_count());
    for (const Tensor& t : tensors) {
      flat.insert(flat.end(), t.values().begin(), t.values().end());
    }
    return flat;
  }

  void assign_flat(std::span<const double> flat) {
    if (flat.size() != scalar_count()) {
      throw DimensionError("assign_flat: expected " +
                           std::to_string(scalar_count()) + " values");
    }
    std::size_t k = 0;
    for (Tensor& t : tensors) {
      for (double& v : t.values()) v = flat[k++];
    }
  }

  friend bool operator==(const VectorFieldParams&,
                         const VectorFieldParams&) = default;
};

inline VectorFieldParams init_params(std::uint64_t seed, const Architecture& arch) {
  arch.validate();
  VectorFieldParams p;
  p.arch = arch;
  p.seed = seed;
  Rng rng = make_stream(seed, {0x1417});
  auto uniform_fill = [&](Tensor& t, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : t.values()) v = dist(rng);
  };

  Tensor table(Tensor::Shape{arch.num_classes + 1, arch.embed_dim});
  uniform_fill(table, 1.0);
  p.tensors.push_back(std::move(table));

  std::size_t fan_in = arch.input_dim();
  for (std::size_t l = 0; l <= arch.depth; ++l) {
    const std::size_t fan_out = l == arch.depth ? arch.data_dim : arch.hidden_width;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w(Tensor::Shape{fan_out, fan_in});
    Tensor b(Tensor::Shape{fan_out});
    uniform_fill(w, bound);
    uniform_fill(b, bound);
    p.tensors.push_back(std::move(w));
    p.tensors.push_back(std::move(b));
    fan_in = fan_out;
  }
  return p;
}

// sin/cos of 2^k t for k = 0..7, interleaved.
inline void write_time_features(double t, double* out) {
  double freq = 1.0;
  for (std::size_t k = 0; k < kTimeFrequencies; ++k) {
    out[2 * k] = std::sin(freq * t);
    out[2 * k + 1] = std::cos(freq * t);
    freq *= 2.0;
  }
}

inline Tensor time_features(double t) {
  Tensor f(Tensor::Shape{kTimeFeatures});
  write_time_features(t, f.data());
  return f;
}

inline Tensor time_feature_rows(std::span<const double> ts) {
  Tensor f(Tensor::Shape{ts.size(), kTimeFeatures});
  for (std::size_t r = 0; r < ts.size(); ++r) {
    write_time_features(ts[r], f.data() + r * kTimeFeatures);
  }
  return f;
}

namespace detail {

inline void check_time(double t) {
  if (!(t > 0.0 && t <= 1.0)) {
    throw DomainError("velocity: t=" + std::to_string(t) + " outside (0, 1]");
  }
}

inline std::vector<std::size_t> table_rows(std::span<const Condition> conds,
                                           std::size_t num_classes) {
  std::vector<std::size_t> rows(conds.size());
  for (std::size_t i = 0; i < conds.size(); ++i) {
    rows[i] = conds[i].table_row(num_classes);
  }
  return rows;
}

inline Tensor mlp_forward(const VectorFieldParams& p, Tensor h) {
  for (std::size_t l = 0; l < p.layer_count(); ++l) {
    h = diffkit::kernels::affine(h, p.weight(l), p.bias(l));
    if (l + 1 < p.layer_count()) h = diffkit::kernels::tanh(h);
  }
  return h;
}

}  // namespace detail

// Single point: x [d] -> v [d].
inline Tensor velocity(const VectorFieldParams& p, const Tensor& x, double t,
                       Condition c) {
  detail::check_time(t);
  if (x.rank() != 1 || x.size() != p.arch.data_dim) {
    throw DimensionError("velocity: x shape " + shape_string(x.shape()));
  }
  using namespace diffkit::kernels;
  Tensor emb = gather_rows(p.condition_table(),
                           {c.table_row(p.arch.num_classes)}, true);
  Tensor h = concat(concat(x, time_features(t)), emb);
  return detail::mlp_forward(p, std::move(h));
}

// Batch: x [n, d] with per-row time and condition -> [n, d]. Row r is bitwise
// equal to velocity(p, x[r], ts[r], conds[r]).
inline Tensor velocity_rows(const VectorFieldParams& p, const Tensor& x,
                            std::span<const double> ts,
                            std::span<const Condition> conds) {
  if (x.rank() != 2 || x.cols() != p.arch.data_dim || ts.size() != x.rows() ||
      conds.size() != x.rows()) {
    throw DimensionError("velocity_rows: x shape " + shape_string(x.shape()));
  }
  for (double t : ts) detail::check_time(t);
  using namespace diffkit::kernels;
  Tensor emb = gather_rows(p.condition_table(),
                           detail::table_rows(conds, p.arch.num_classes), false);
  Tensor h = concat(concat(x, time_feature_rows(ts)), emb);
  return detail::mlp_forward(p, std::move(h));
}

inline Tensor velocity_rows(const VectorFieldParams& p, const Tensor& x,
                            double t, Condition c) {
  std::vector<double> ts(x.rows(), t);
  std::vector<Condition> conds(x.rows(), c);
  return velocity_rows(p, x, ts, conds);
}

// Tape-free evaluator for repeated batched calls with fixed parameters (rollouts
// and sampling). Weights are stored transposed so the inner loop runs over
// outputs; each output is still summed in input-index order from 0, so rows
// are bitwise equal to velocity().
class FieldEvaluator {
 public:
  explicit FieldEvaluator(const VectorFieldParams& p) : p_(&p) {
    for (std::size_t l = 0; l < p.layer_count(); ++l) {
      const Tensor& w = p.weight(l);
      const std::size_t out = w.dim(0);
      const std::size_t in = w.dim(1);
      std::vector<double> wt(in * out);
      for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t i = 0; i < in; ++i) wt[i * out + o] = w.at(o, i);
      }
      transposed_.push_back(std::move(wt));
    }
  }

  const VectorFieldParams& params() const { return *p_; }

  // x [n, d] at a shared time t with per-row conditions.
  Tensor velocity_rows(const Tensor& x, double t, std::span<const Condition> conds) const {
    const VectorFieldParams& p = *p_;
    const std::size_t d = p.arch.data_dim;
    if (x.rank() != 2 || x.cols() != d || conds.size() != x.rows()) {
      throw DimensionError("velocity_rows: x shape " + shape_string(x.shape()));
    }
    detail::check_time(t);
    const std::size_t n = x.rows();
    const std::size_t e = p.arch.embed_dim;
    const std::size_t in0 = p.arch.input_dim();
    double feat[kTimeFeatures];
    write_time_features(t, feat);
    const Tensor& table = p.condition_table();
    std::vector<double> h(n * in0);
    for (std::size_t r = 0; r < n; ++r) {
      double* hr = h.data() + r * in0;
      for (std::size_t j = 0; j < d; ++j) hr[j] = x.at(r, j);
      for (std::size_t j = 0; j < kTimeFeatures; ++j) hr[d + j] = feat[j];
      const std::size_t row = conds[r].table_row(p.arch.num_classes);
      for (std::size_t j = 0; j < e; ++j) hr[d + kTimeFeatures + j] = table.at(row, j);
    }
    std::size_t width = in0;
    std::vector<double> next;
    for (std::size_t l = 0; l < p.layer_count(); ++l) {
      const std::size_t out = p.weight(l).dim(0);
      const double* wt = transposed_[l].data();
      const double* b = p.bias(l).data();
      const bool hidden = l + 1 < p.layer_count();
      next.assign(n * out, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        const double* hr = h.data() + r * width;
        double* acc = next.data() + r * out;
        std::size_t o0 = 0;
        for (; o0 + kBlock <= out; o0 += kBlock) {
          double a[kBlock] = {};
          for (std::size_t i = 0; i < width; ++i) {
            const double hi = hr[i];
            const double* wi = wt + i * out + o0;
            for (std::size_t k = 0; k < kBlock; ++k) a[k] += wi[k] * hi;
          }
          for (std::size_t k = 0; k < kBlock; ++k) acc[o0 + k] = a[k];
        }
        for (std::size_t i = 0; i < width; ++i) {
          const double hi = hr[i];
          const double* wi = wt + i * out;
          for (std::size_t o = o0; o < out; ++o) acc[o] += wi[o] * hi;
        }
        for (std::size_t o = 0; o < out; ++o) {
          acc[o] = acc[o] + b[o];
          if (hidden) acc[o] = diffkit::kernels::tanh_scalar(acc[o]);
        }
      }
      h.swap(next);
      width = out;
    }
    return Tensor::matrix(n, width, std::move(h));
  }

 private:
  static constexpr std::size_t kBlock = 8;
  const VectorFieldParams* p_;
  std::vector<std::vector<double>> transposed_;
};

// Parameter leaves of one graph, indexed like VectorFieldParams::tensors.
struct ParamNodes {
  std::vector<diffkit::NodeId> ids;
};

inline ParamNodes register_params(diffkit::Graph& g, const VectorFieldParams& p) {
  ParamNodes nodes;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    nodes.ids.push_back(g.parameter(i, p.tensors[i]));
  }
  return nodes;
}

namespace detail {

inline diffkit::NodeId mlp_graph(diffkit::Graph& g, const ParamNodes& pn,
                                 const VectorFieldParams& p, diffkit::NodeId h) {
  for (std::size_t l = 0; l < p.layer_count(); ++l) {
    h = g.affine(h, pn.ids.at(1 + 2 * l), pn.ids.at(2 + 2 * l));
    if (l + 1 < p.layer_count()) h = g.tanh(h);
  }
  return h;
}

}  // namespace detail

// Differentiable counterpart of velocity(); x is a node holding [d].
inline diffkit::NodeId velocity(diffkit::Graph& g, const ParamNodes& pn,
                                const VectorFieldParams& p, diffkit::NodeId x,
                                double t, Condition c) {
  detail::check_time(t);
  if (g.value(x).rank() != 1 || g.value(x).size() != p.arch.data_dim) {
    throw DimensionError("velocity: x shape " + shape_string(g.value(x).shape()));
  }
  auto emb = g.gather_rows(pn.ids.at(0), {c.table_row(p.arch.num_classes)}, true);
  auto h = g.concat(g.concat(x, g.constant(time_features(t))), emb);
  return detail::mlp_graph(g, pn, p, h);
}

inline diffkit::NodeId velocity_rows(diffkit::Graph& g, const ParamNodes& pn,
                                     const VectorFieldParams& p,
                                     diffkit::NodeId x,
                                     std::span<const double> ts,
                                     std::span<const Condition> conds) {
  const Tensor& xv = g.value(x);
  if (xv.rank() != 2 || xv.cols() != p.arch.data_dim || ts.size() != xv.rows() ||
      conds.size() != xv.rows()) {
    throw DimensionError("velocity_rows: x shape " + shape_string(xv.shape()));
  }
  for (double t : ts) detail::check_time(t);
  auto emb = g.gather_rows(pn.ids.at(0),
                           detail::table_rows(conds, p.arch.num_classes), false);
  auto h = g.concat(g.concat(x, g.constant(time_feature_rows(ts))), emb);
  return detail::mlp_graph(g, pn, p, h);
}

// ---------------------------------------------------------------------------
// Target data

struct MixtureClass {
  std::vector<std::vector<double>> means;
  std::size_t preferred = 0;
};

// Per-class isotropic Gaussian mixtures with equal component weights.
struct DataSpec {
  std::vector<MixtureClass> classes;
  double component_std = 0.3;

  std::size_t num_classes() const { return classes.size(); }
  std::size_t dim() const {
    return classes.empty() || classes[0].means.empty() ? 0
                                                       : classes[0].means[0].size();
  }

  const std::vector<double>& preferred_mean(std::size_t c) const {
    if (c >= classes.size()) throw LookupError("data: unknown class " + std::to_string(c));
    return classes[c].means[classes[c].preferred];
  }

  void validate() const {
    if (classes.empty()) throw ConfigError("data: at least one class required");
    if (!(component_std > 0.0)) throw ConfigError("data.component_std: must be > 0");
    const std::size_t d = dim();
    if (d == 0) throw ConfigError("data: empty component means");
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const auto& cls = classes[c];
      const std::string where = "data.class" + std::to_string(c);
      if (cls.means.size() < 2) throw ConfigError(where + ".means: need >= 2 components");
      if (cls.preferred >= cls.means.size()) {
        throw ConfigError(where + ".preferred: index out of range");
      }
      for (const auto& m : cls.means) {
        if (m.size() != d) throw ConfigError(where + ".means: inconsistent dimension");
        for (double v : m) {
          if (!std::isfinite(v)) throw ConfigError(where + ".means: non-finite");
        }
      }
    }
  }
};

// Two classes, each a pair of modes on one axis; the positive mode is preferred.
inline DataSpec default_data_spec() {
  DataSpec spec;
  spec.classes = {
      MixtureClass{{{-2.0, 0.0}, {2.0, 0.0}}, 1},
      MixtureClass{{{0.0, -2.0}, {0.0, 2.0}}, 1},
  };
  spec.component_std = 0.3;
  return spec;
}

inline Tensor sample_data(const DataSpec& spec, std::size_t c, Rng& rng) {
  if (c >= spec.num_classes()) throw LookupError("data: unknown class " + std::to_string(c));
  const auto& cls = spec.classes[c];
  const std::size_t comp = uniform_index(rng, 0, cls.means.size() - 1);
  Tensor x(Tensor::Shape{spec.dim()});
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = cls.means[comp][i] + spec.component_std * standard_normal(rng);
  }
  return x;
}

// n ground-truth draws of class c as rows of an [n, d] tensor.
inline Tensor sample_data_rows(const DataSpec& spec, std::size_t c, std::size_t n, Rng& rng) {
  Tensor out(Tensor::Shape{n, spec.dim()});
  for (std::size_t r = 0; r < n; ++r) {
    const Tensor x = sample_data(spec, c, rng);
    for (std::size_t j = 0; j < x.size(); ++j) out.at(r, j) = x[j];
  }
  return out;
}

// x_t = (1 - t) x0 + t eps.
inline Tensor interpolate(const Tensor& x0, const Tensor& eps, double t) {
  diffkit::kernels::require_same_shape(x0, eps, "interpolate");
  Tensor x = x0;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (1.0 - t) * x0[i] + t * eps[i];
  return x;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(AdamConfig cfg, const std::vector<Tensor>& like) : cfg_(cfg) {
    for (const Tensor& t : like) {
      m_.push_back(Tensor::zeros_like(t));
      v_.push_back(Tensor::zeros_like(t));
    }
  }

  void step(std::vector<Tensor>& params, const diffkit::GradientSet& grads) {
    if (params.size() != m_.size()) throw ContractError("adam: parameter count changed");
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (!grads.contains(k)) continue;
      const Tensor& g = grads.at(k);
      Tensor& p = params[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g[i];
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m_[k][i] / c1;
        const double vhat = v_[k][i] / c2;
        p[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
  }

  std::uint64_t steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Flow-matching pretraining

struct PretrainConfig {
  std::size_t iterations = 5000;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  // Cosine decay from learning_rate down to this at the last iteration.
  double final_learning_rate = 1e-5;
  double uncond_prob = 0.1;
  // Warn when the mean of the last 100 losses stays above this.
  double loss_threshold = 3.2;
};

struct PretrainResult {
  VectorFieldParams params;
  std::vector<double> losses;
  std::vector<std::string> warnings;
};

// One minibatch flow-matching loss graph; exposed for gradient checks.
struct FlowMatchingBatch {
  Tensor x_t;
  Tensor target;
  std::vector<double> ts;
  std::vector<Condition> conds;
};

inline FlowMatchingBatch draw_fm_batch(const DataSpec& spec, std::size_t batch,
                                       double uncond_prob, Rng& rng) {
  const std::size_t d = spec.dim();
  FlowMatchingBatch b{Tensor(Tensor::Shape{batch, d}),
                      Tensor(Tensor::Shape{batch, d}), {}, {}};
  for (std::size_t r = 0; r < batch; ++r) {
    const std::size_t c = uniform_index(rng, 0, spec.num_classes() - 1);
    const Tensor x0 = sample_data(spec, c, rng);
    const Tensor eps = normal_tensor(rng, {d});
    const double t = 1.0 - uniform01(rng);  // (0, 1]
    const Tensor xt = interpolate(x0, eps, t);
    for (std::size_t i = 0; i < d; ++i) {
      b.x_t.at(r, i) = xt[i];
      b.target.at(r, i) = eps[i] - x0[i];
    }
    b.ts.push_back(t);
    b.conds.push_back(uniform01(rng) < uncond_prob ? Condition::uncond()
                                                   : Condition::of(c));
  }
  return b;
}

inline diffkit::NodeId fm_loss(diffkit::Graph& g, const ParamNodes& pn,
                               const VectorFieldParams& p,
                               const FlowMatchingBatch& b) {
  auto x = g.constant(b.x_t);
  auto v = velocity_rows(g, pn, p, x, b.ts, b.conds);
  auto diff = g.sub(v, g.constant(b.target));
  return g.scale(g.squared_norm(diff), 1.0 / static_cast<double>(b.ts.size()));
}

inline PretrainResult fm_pretrain(VectorFieldParams params, const DataSpec& spec,
                                  const PretrainConfig& cfg, Rng& rng) {
  spec.validate();
  if (spec.dim() != params.arch.data_dim || spec.num_classes() != params.arch.num_classes) {
    throw ConfigError("pretrain: data spec does not match the architecture");
  }
  if (cfg.batch_size == 0) throw ConfigError("pretrain.batch_size: must be positive");
  if (!(cfg.learning_rate >= 0.0)) throw ConfigError("pretrain.learning_rate: must be >= 0");
  if (!(cfg.final_learning_rate >= 0.0)) {
    throw ConfigError("pretrain.final_learning_rate: must be >= 0");
  }
  if (!(cfg.uncond_prob >= 0.0 && cfg.uncond_prob <= 1.0)) {
    throw ConfigError("pretrain.uncond_prob: must be in [0, 1]");
  }
  PretrainResult result;
  Adam adam(AdamConfig{cfg.learning_rate}, params.tensors);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const double frac = cfg.iterations > 1 ? static_cast<double>(it) / static_cast<double>(cfg.iterations - 1) : 0.0;
    adam.set_learning_rate(cfg.final_learning_rate + 0.5 * (cfg.learning_rate - cfg.final_learning_rate) *
                                                         (1.0 + std::cos(std::numbers::pi * frac)));
    const FlowMatchingBatch batch = draw_fm_batch(spec, cfg.batch_size, cfg.uncond_prob, rng);
    diffkit::Graph g;
    const ParamNodes pn = register_params(g, params);
    const auto loss = fm_loss(g, pn, params, batch);
    const double value = g.value(loss).item();
    if (!std::isfinite(value)) {
      throw NumericError("pretrain: non-finite loss at iteration " + std::to_string(it));
    }
    const auto grads = diffkit::backward(g, loss);
    if (!grads.all_finite()) {
      throw NumericError("pretrain: non-finite gradient at iteration " + std::to_string(it));
    }
    adam.step(params.tensors, grads);
    result.losses.push_back(value);
  }
  if (!result.losses.empty()) {
    const std::size_t n = std::min<std::size_t>(100, result.losses.size());
    const double tail = std::accumulate(result.losses.end() - static_cast<std::ptrdiff_t>(n),
                                        result.losses.end(), 0.0) / static_cast<double>(n);
    if (tail > cfg.loss_threshold) {
      result.warnings.push_back("pretrain: final loss " + std::to_string(tail) +
                                " above threshold " + std::to_string(cfg.loss_threshold));
    }
  }
  result.params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint: "FGRPOCKP", u32 version, u64 seed, five u64 architecture fields,
// u64 tensor count, then per tensor u64 rank, u64 dims, raw doubles.

inline constexpr char kCheckpointMagic[8] = {'F', 'G', 'R', 'P', 'O', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put(std::string& out, const T& v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(std::string_view in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ConfigError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const VectorFieldParams& p) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, p.seed);
  for (std::size_t v : {p.arch.data_dim, p.arch.hidden_width, p.arch.depth,
                        p.arch.num_classes, p.arch.embed_dim}) {
    detail::put<std::uint64_t>(out, v);
  }
  detail::put<std::uint64_t>(out, p.tensors.size());
  for (const Tensor& t : p.tensors) {
    detail::put<std::uint64_t>(out, t.rank());
    for (std::size_t d : t.shape()) detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
  return out;
}

inline VectorFieldParams deserialize_checkpoint(std::string_view in) {
  if (in.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(in.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw ConfigError("checkpoint: bad magic");
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  const auto version = detail::take<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion) {
    throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
  }
  VectorFieldParams p;
  p.seed = detail::take<std::uint64_t>(in, pos);
  p.arch.data_dim = detail::take<std::uint64_t>(in, pos);
  p.arch.hidden_width = detail::take<std::uint64_t>(in, pos);
  p.arch.depth = detail::take<std::uint64_t>(in, pos);
  p.arch.num_classes = detail::take<std::uint64_t>(in, pos);
  p.arch.embed_dim = detail::take<std::uint64_t>(in, pos);
  p.arch.validate();
  const auto count = detail::take<std::uint64_t>(in, pos);
  if (count != 2 * (p.arch.depth + 1) + 1) throw ConfigError("checkpoint: tensor count mismatch");
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto rank = detail::take<std::uint64_t>(in, pos);
    if (rank > 4) throw ConfigError("checkpoint: implausible rank");
    Tensor::Shape shape;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(detail::take<std::uint64_t>(in, pos));
    Tensor t(shape);
    const std::size_t bytes = t.size() * sizeof(double);
    if (pos + bytes > in.size()) throw ConfigError("checkpoint: truncated tensor data");
    std::memcpy(t.data(), in.data() + pos, bytes);
    pos += bytes;
    p.tensors.push_back(std::move(t));
  }
  if (pos != in.size()) throw ConfigError("checkpoint: trailing bytes");
  if (p.scalar_count() != parameter_count(p.arch)) {
    throw ConfigError("checkpoint: tensor shapes do not match the architecture");
  }
  return p;
}

inline void write_checkpoint(const std::string& path, const VectorFieldParams& p) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("checkpoint: cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(p);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("checkpoint: write failed for " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline VectorFieldParams read_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

// FNV-1a, used to fingerprint checkpoints in run outputs.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace flashgrpo
