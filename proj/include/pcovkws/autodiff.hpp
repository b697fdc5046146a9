#pragma once

// Tape-based reverse-mode differentiation over NDArray, with exactly the
// operators the temporal encoder and its losses need.
//
// Layout conventions: the last axis is always channels. Temporal operators
// accept [T, C] or [N, T, C] inputs; the optional leading axis is the batch.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pcovkws/errors.hpp"
#include "pcovkws/ndarray.hpp"

namespace pcovkws {

template <typename Scalar>
struct Parameter {
  std::string name;  // stable identifier, unique within a model
  NDArray<Scalar> value;
  NDArray<Scalar> grad;

  Parameter() = default;
  Parameter(std::string id, NDArray<Scalar> init)
      : name(std::move(id)), value(std::move(init)), grad(value.shape()) {}

  std::size_t size() const noexcept { return value.size(); }
  void zero_grad() { grad = NDArray<Scalar>(value.shape()); }
};

template <typename Scalar>
class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
template <typename Scalar>
class Var {
 public:
  Var(Tape<Scalar>* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t index() const noexcept { return index_; }
  const NDArray<Scalar>& value() const { return tape_->value(index_); }
  const Shape& shape() const { return value().shape(); }
  Scalar item() const {
    if (value().size() != 1) throw DimensionError("item: not a scalar " + shape_str(shape()));
    return value()[0];
  }

 private:
  Tape<Scalar>* tape_;
  std::size_t index_;
};

template <typename Scalar>
class Tape {
 public:
  using Array = NDArray<Scalar>;
  // Receives the tape and the node's own index; reads that node's grad and
  // accumulates into its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Array value) { return push(std::move(value), nullptr, nullptr); }

  // A leaf bound to a Parameter. Binding the same Parameter twice yields the same node.
  Var<Scalar> param(Parameter<Scalar>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<Scalar>(this, it->second);
    Var<Scalar> v = push(p.value, nullptr, &p);
    param_nodes_.emplace(&p, v.index());
    return v;
  }

  Var<Scalar> record(Array value, BackwardFn backward) {
    return push(std::move(value), std::move(backward), nullptr);
  }

  const Array& value(std::size_t i) const { return nodes_[i].value; }

  // Gradient slot of node i, allocated as zeros on first touch.
  Array& grad(std::size_t i) {
    Node& n = nodes_[i];
    if (!n.reached) {
      n.grad = Array(n.value.shape());
      n.reached = true;
    }
    return n.grad;
  }

  bool reached(std::size_t i) const { return nodes_[i].reached; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  // Reverse sweep from a scalar loss; accumulates into Parameter::grad.
  // Parameters the loss does not depend on keep their grad untouched.
  void backward(Var<Scalar> loss) {
    begin_backward({&loss, 1});
    sweep(loss.index());
    for (auto& [param, index] : param_nodes_) {
      if (nodes_[index].reached) param->grad += nodes_[index].grad;
    }
  }

  // One independent reverse sweep per loss. Returns, for each loss, the
  // gradient w.r.t. each entry of `params` (zeros where unreachable).
  // Parameter::grad is not modified.
  std::vector<std::vector<Array>> backward_each(std::span<const Var<Scalar>> losses,
                                                std::span<Parameter<Scalar>* const> params) {
    begin_backward(losses);
    std::vector<std::vector<Array>> out;
    out.reserve(losses.size());
    for (const auto& loss : losses) {
      sweep(loss.index());
      std::vector<Array> grads;
      grads.reserve(params.size());
      for (Parameter<Scalar>* p : params) {
        auto it = param_nodes_.find(p);
        if (it != param_nodes_.end() && nodes_[it->second].reached) {
          grads.push_back(nodes_[it->second].grad);
        } else {
          grads.emplace_back(p->value.shape());
        }
      }
      out.push_back(std::move(grads));
      for (auto& n : nodes_) {
        n.reached = false;
        n.grad = Array();
      }
    }
    return out;
  }

 private:
  struct Node {
    Array value;
    Array grad;
    BackwardFn backward;
    Parameter<Scalar>* param = nullptr;
    bool reached = false;
  };

  Var<Scalar> push(Array value, BackwardFn backward, Parameter<Scalar>* p) {
    if (consumed_) throw GraphError("tape already differentiated; start a new forward pass");
    nodes_.push_back(Node{std::move(value), Array(), std::move(backward), p, false});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  void begin_backward(std::span<const Var<Scalar>> losses) {
    if (consumed_) throw GraphError("backward called twice on the same tape");
    for (const auto& loss : losses) {
      if (&loss.tape() != this) throw GraphError("loss belongs to a different tape");
      if (loss.value().size() != 1) {
        throw GraphError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
      }
    }
    consumed_ = true;
  }

  void sweep(std::size_t root) {
    grad(root).fill(Scalar{1});
    for (std::size_t i = root + 1; i-- > 0;) {
      if (nodes_[i].reached && nodes_[i].backward) nodes_[i].backward(*this, i);
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<Parameter<Scalar>*, std::size_t> param_nodes_;
  bool consumed_ = false;
};

namespace detail {

struct TemporalDims {
  std::size_t batch;
  std::size_t time;
  std::size_t channels;
};

inline TemporalDims temporal_dims(const Shape& s, const char* op) {
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw DimensionError(std::string(op) + ": expected [T,C] or [N,T,C], got " + shape_str(s));
}

inline Shape temporal_shape(const Shape& in, std::size_t time, std::size_t channels) {
  if (in.size() == 2) return {time, channels};
  return {in[0], time, channels};
}

// "same" zero padding: output length ceil(T/stride), padding split with the
// extra element on the right.
struct SamePadding {
  std::size_t out_time;
  std::size_t left;
};

inline SamePadding same_padding(std::size_t time, std::size_t kernel, std::size_t stride) {
  const std::size_t out = (time + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > time ? needed - time : 0;
  return {out, total / 2};
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> conv_temporal(Var<Scalar> x, Var<Scalar> w, std::size_t stride,
                          std::optional<Var<Scalar>> bias = std::nullopt) {
  const auto d = detail::temporal_dims(x.shape(), "conv_temporal");
  const Shape& ws = w.shape();
  if (ws.size() != 3 || ws[1] != d.channels) {
    throw DimensionError("conv_temporal: weight " + shape_str(ws) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  if (stride < 1) throw std::invalid_argument("conv_temporal: stride must be >= 1");
  if (d.time < 1) throw DimensionError("conv_temporal: empty time axis");
  const std::size_t k = ws[0], cin = ws[1], cout = ws[2];
  if (bias && bias->shape() != Shape{cout}) throw DimensionError("conv_temporal: bias shape");
  const auto pad = detail::same_padding(d.time, k, stride);
  const std::size_t tout = pad.out_time;

  NDArray<Scalar> out(detail::temporal_shape(x.shape(), tout, cout));
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t t = 0; t < tout; ++t) {
      Scalar* o = &out[(n * tout + t) * cout];
      if (bias) std::copy_n(bias->value().data().data(), cout, o);
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) -
                                   static_cast<std::ptrdiff_t>(pad.left);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(d.time)) continue;
        const Scalar* xr = &xv[(n * d.time + static_cast<std::size_t>(src)) * cin];
        for (std::size_t c = 0; c < cin; ++c) {
          const Scalar xc = xr[c];
          const Scalar* wr = &wv[(j * cin + c) * cout];
          for (std::size_t oc = 0; oc < cout; ++oc) o[oc] += xc * wr[oc];
        }
      }
    }
  }

  const std::size_t xi = x.index(), wi = w.index();
  const std::optional<std::size_t> bi = bias ? std::optional(bias->index()) : std::nullopt;
  return x.tape().record(std::move(out), [=](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(xi);
    const auto& wv = tp.value(wi);
    auto& gx = tp.grad(xi);
    auto& gw = tp.grad(wi);
    for (std::size_t n = 0; n < d.batch; ++n) {
      for (std::size_t t = 0; t < tout; ++t) {
        const Scalar* go = &g[(n * tout + t) * cout];
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) -
                                     static_cast<std::ptrdiff_t>(pad.left);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(d.time)) continue;
          const std::size_t row = (n * d.time + static_cast<std::size_t>(src)) * cin;
          for (std::size_t c = 0; c < cin; ++c) {
            const Scalar* wr = &wv[(j * cin + c) * cout];
            Scalar* gwr = &gw[(j * cin + c) * cout];
            const Scalar xc = xv[row + c];
            Scalar acc{0};
            for (std::size_t oc = 0; oc < cout; ++oc) {
              acc += go[oc] * wr[oc];
              gwr[oc] += xc * go[oc];
            }
            gx[row + c] += acc;
          }
        }
      }
    }
    if (bi) {
      auto& gb = tp.grad(*bi);
      for (std::size_t r = 0; r < d.batch * tout; ++r)
        for (std::size_t oc = 0; oc < cout; ++oc) gb[oc] += g[r * cout + oc];
    }
  });
}

// Per-channel temporal convolution; w is [k, C].
template <typename Scalar>
Var<Scalar> depthwise_conv_temporal(Var<Scalar> x, Var<Scalar> w, std::size_t stride,
                                    std::optional<Var<Scalar>> bias = std::nullopt) {
  const auto d = detail::temporal_dims(x.shape(), "depthwise_conv_temporal");
  const Shape& ws = w.shape();
  if (ws.size() != 2 || ws[1] != d.channels) {
    throw DimensionError("depthwise_conv_temporal: weight " + shape_str(ws) +
                         " incompatible with input " + shape_str(x.shape()));
  }
  if (stride < 1) throw std::invalid_argument("depthwise_conv_temporal: stride must be >= 1");
  if (d.time < 1) throw DimensionError("depthwise_conv_temporal: empty time axis");
  const std::size_t k = ws[0], ch = d.channels;
  if (bias && bias->shape() != Shape{ch}) throw DimensionError("depthwise_conv_temporal: bias shape");
  const auto pad = detail::same_padding(d.time, k, stride);
  const std::size_t tout = pad.out_time;

  NDArray<Scalar> out(detail::temporal_shape(x.shape(), tout, ch));
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t t = 0; t < tout; ++t) {
      Scalar* o = &out[(n * tout + t) * ch];
      if (bias) std::copy_n(bias->value().data().data(), ch, o);
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) -
                                   static_cast<std::ptrdiff_t>(pad.left);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(d.time)) continue;
        const Scalar* xr = &xv[(n * d.time + static_cast<std::size_t>(src)) * ch];
        const Scalar* wr = &wv[j * ch];
        for (std::size_t c = 0; c < ch; ++c) o[c] += xr[c] * wr[c];
      }
    }
  }

  const std::size_t xi = x.index(), wi = w.index();
  const std::optional<std::size_t> bi = bias ? std::optional(bias->index()) : std::nullopt;
  return x.tape().record(std::move(out), [=](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(xi);
    const auto& wv = tp.value(wi);
    auto& gx = tp.grad(xi);
    auto& gw = tp.grad(wi);
    for (std::size_t n = 0; n < d.batch; ++n) {
      for (std::size_t t = 0; t < tout; ++t) {
        const Scalar* go = &g[(n * tout + t) * ch];
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * stride + j) -
                                     static_cast<std::ptrdiff_t>(pad.left);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(d.time)) continue;
          const std::size_t row = (n * d.time + static_cast<std::size_t>(src)) * ch;
          for (std::size_t c = 0; c < ch; ++c) {
            gx[row + c] += go[c] * wv[j * ch + c];
            gw[j * ch + c] += go[c] * xv[row + c];
          }
        }
      }
    }
    if (bi) {
      auto& gb = tp.grad(*bi);
      for (std::size_t r = 0; r < d.batch * tout; ++r)
        for (std::size_t c = 0; c < ch; ++c) gb[c] += g[r * ch + c];
    }
  });
}

// Affine map along the last axis: x[..., Cin] * w[Cin, Cout] + bias[Cout].
template <typename Scalar>
Var<Scalar> pointwise_linear(Var<Scalar> x, Var<Scalar> w, std::optional<Var<Scalar>> bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.empty() || ws.size() != 2 || ws[0] != xs.back()) {
    throw DimensionError("pointwise_linear: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  }
  const std::size_t cin = ws[0], cout = ws[1];
  if (bias && bias->shape() != Shape{cout}) throw DimensionError("pointwise_linear: bias shape");
  const std::size_t rows = x.value().size() / cin;
  Shape os = xs;
  os.back() = cout;
  NDArray<Scalar> out(os);
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar* o = &out[r * cout];
    if (bias) std::copy_n(bias->value().data().data(), cout, o);
    const Scalar* xr = &xv[r * cin];
    for (std::size_t c = 0; c < cin; ++c) {
      const Scalar xc = xr[c];
      const Scalar* wr = &wv[c * cout];
      for (std::size_t oc = 0; oc < cout; ++oc) o[oc] += xc * wr[oc];
    }
  }

  const std::size_t xi = x.index(), wi = w.index();
  const std::optional<std::size_t> bi = bias ? std::optional(bias->index()) : std::nullopt;
  return x.tape().record(std::move(out), [=](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(xi);
    const auto& wv = tp.value(wi);
    auto& gx = tp.grad(xi);
    auto& gw = tp.grad(wi);
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar* go = &g[r * cout];
      for (std::size_t c = 0; c < cin; ++c) {
        const Scalar* wr = &wv[c * cout];
        Scalar* gwr = &gw[c * cout];
        const Scalar xc = xv[r * cin + c];
        Scalar acc{0};
        for (std::size_t oc = 0; oc < cout; ++oc) {
          acc += go[oc] * wr[oc];
          gwr[oc] += xc * go[oc];
        }
        gx[r * cin + c] += acc;
      }
    }
    if (bi) {
      auto& gb = tp.grad(*bi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t oc = 0; oc < cout; ++oc) gb[oc] += g[r * cout + oc];
    }
  });
}

// Normalizes each position over the channel axis (biased variance), then
// applies gamma/beta.
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps) {
  const std::size_t ch = x.value().channels();
  if (ch < 1) throw DimensionError("layer_norm: empty channel axis");
  if (gamma.shape() != Shape{ch} || beta.shape() != Shape{ch}) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(ch) + "]");
  }
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t rows = x.value().size() / ch;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  NDArray<Scalar> out(x.shape());
  std::vector<Scalar> xhat(xv.size());
  std::vector<Scalar> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* xr = &xv[r * ch];
    Scalar mean{0};
    for (std::size_t c = 0; c < ch; ++c) mean += xr[c];
    mean /= static_cast<Scalar>(ch);
    Scalar var{0};
    for (std::size_t c = 0; c < ch; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<Scalar>(ch);
    inv_std[r] = Scalar{1} / std::sqrt(var + eps);
    for (std::size_t c = 0; c < ch; ++c) {
      xhat[r * ch + c] = (xr[c] - mean) * inv_std[r];
      out[r * ch + c] = gv[c] * xhat[r * ch + c] + bv[c];
    }
  }

  const std::size_t xi = x.index(), gi = gamma.index(), bi = beta.index();
  return x.tape().record(
      std::move(out), [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<Scalar>& tp,
                                                                                std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& gv = tp.value(gi);
        auto& gx = tp.grad(xi);
        auto& ggamma = tp.grad(gi);
        auto& gbeta = tp.grad(bi);
        std::vector<Scalar> gxhat(ch);
        for (std::size_t r = 0; r < rows; ++r) {
          Scalar mean_g{0}, mean_gx{0};
          for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t i = r * ch + c;
            gxhat[c] = g[i] * gv[c];
            mean_g += gxhat[c];
            mean_gx += gxhat[c] * xhat[i];
            ggamma[c] += g[i] * xhat[i];
            gbeta[c] += g[i];
          }
          mean_g /= static_cast<Scalar>(ch);
          mean_gx /= static_cast<Scalar>(ch);
          for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t i = r * ch + c;
            gx[i] += inv_std[r] * (gxhat[c] - mean_g - xhat[i] * mean_gx);
          }
        }
      });
}

// GELU, tanh approximation:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename Scalar>
Scalar gelu_scalar(Scalar x) {
  const Scalar c = static_cast<Scalar>(std::sqrt(2.0 / std::numbers::pi));
  const Scalar inner = c * (x + Scalar(0.044715) * x * x * x);
  return Scalar(0.5) * x * (Scalar{1} + std::tanh(inner));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar c = static_cast<Scalar>(std::sqrt(2.0 / std::numbers::pi));
  const Scalar inner = c * (x + Scalar(0.044715) * x * x * x);
  const Scalar th = std::tanh(inner);
  const Scalar dinner = c * (Scalar{1} + Scalar(3 * 0.044715) * x * x);
  return Scalar(0.5) * (Scalar{1} + th) + Scalar(0.5) * x * (Scalar{1} - th * th) * dinner;
}

template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> x) {
  NDArray<Scalar> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = gelu_scalar(xv[i]);
  const std::size_t xi = x.index();
  return x.tape().record(std::move(out), [xi](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& xv = tp.value(xi);
    auto& gx = tp.grad(xi);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[i] * gelu_derivative(xv[i]);
  });
}

inline constexpr double kGrnEps = 1e-6;

// Global response normalization (ConvNeXt V2 style) over the time axis:
//   G_c = ||x[:, c]||_2, N_c = G_c / (mean_c G + eps)
//   y = gamma_c * (x * N_c) + beta_c + x
// With gamma = beta = 0 the map is exactly the identity.
template <typename Scalar>
Var<Scalar> grn(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta) {
  const auto d = detail::temporal_dims(x.shape(), "grn");
  const std::size_t ch = d.channels, tt = d.time;
  if (tt < 1) throw DimensionError("grn: empty time axis");
  if (gamma.shape() != Shape{ch} || beta.shape() != Shape{ch}) {
    throw DimensionError("grn: gamma/beta must be [" + std::to_string(ch) + "]");
  }
  const Scalar eps = static_cast<Scalar>(kGrnEps);
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  std::vector<Scalar> agg(d.batch * ch, Scalar{0});
  std::vector<Scalar> denom(d.batch);
  std::vector<Scalar> nx(d.batch * ch);
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t t = 0; t < tt; ++t)
      for (std::size_t c = 0; c < ch; ++c) {
        const Scalar v = xv[(n * tt + t) * ch + c];
        agg[n * ch + c] += v * v;
      }
    Scalar mean{0};
    for (std::size_t c = 0; c < ch; ++c) {
      agg[n * ch + c] = std::sqrt(agg[n * ch + c]);
      mean += agg[n * ch + c];
    }
    mean /= static_cast<Scalar>(ch);
    denom[n] = mean + eps;
    for (std::size_t c = 0; c < ch; ++c) nx[n * ch + c] = agg[n * ch + c] / denom[n];
  }
  NDArray<Scalar> out(x.shape());
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t t = 0; t < tt; ++t)
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t i = (n * tt + t) * ch + c;
        out[i] = gv[c] * (xv[i] * nx[n * ch + c]) + bv[c] + xv[i];
      }

  const std::size_t xi = x.index(), gi = gamma.index(), bi = beta.index();
  return x.tape().record(
      std::move(out),
      [=, agg = std::move(agg), denom = std::move(denom), nx = std::move(nx)](Tape<Scalar>& tp,
                                                                              std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& xv = tp.value(xi);
        const auto& gv = tp.value(gi);
        auto& gx = tp.grad(xi);
        auto& ggamma = tp.grad(gi);
        auto& gbeta = tp.grad(bi);
        std::vector<Scalar> gnx(ch), gagg(ch);
        for (std::size_t n = 0; n < d.batch; ++n) {
          std::fill(gnx.begin(), gnx.end(), Scalar{0});
          for (std::size_t t = 0; t < tt; ++t)
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t i = (n * tt + t) * ch + c;
              const Scalar nxc = nx[n * ch + c];
              gx[i] += g[i] * (gv[c] * nxc + Scalar{1});
              ggamma[c] += g[i] * xv[i] * nxc;
              gbeta[c] += g[i];
              gnx[c] += g[i] * gv[c] * xv[i];
            }
          Scalar cross{0};
          for (std::size_t c = 0; c < ch; ++c) cross += gnx[c] * agg[n * ch + c];
          const Scalar dn = denom[n];
          const Scalar shared = cross / (dn * dn * static_cast<Scalar>(ch));
          for (std::size_t c = 0; c < ch; ++c) gagg[c] = gnx[c] / dn - shared;
          for (std::size_t t = 0; t < tt; ++t)
            for (std::size_t c = 0; c < ch; ++c) {
              const Scalar a = agg[n * ch + c];
              if (a > Scalar{0}) {
                const std::size_t i = (n * tt + t) * ch + c;
                gx[i] += gagg[c] * xv[i] / a;
              }
            }
        }
      });
}

// Unit-normalizes each row along the last axis. Zero rows are rejected.
template <typename Scalar>
Var<Scalar> l2_normalize(Var<Scalar> x) {
  const std::size_t ch = x.value().channels();
  const std::size_t rows = x.value().size() / ch;
  const auto& xv = x.value();
  NDArray<Scalar> out(x.shape());
  std::vector<Scalar> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar ss{0};
    for (std::size_t c = 0; c < ch; ++c) ss += xv[r * ch + c] * xv[r * ch + c];
    const Scalar nrm = std::sqrt(ss);
    if (!(nrm > Scalar{0})) throw DegenerateInputError("l2_normalize: zero-norm vector");
    norms[r] = nrm;
    for (std::size_t c = 0; c < ch; ++c) out[r * ch + c] = xv[r * ch + c] / nrm;
  }
  const std::size_t xi = x.index();
  return x.tape().record(std::move(out), [=, norms = std::move(norms)](Tape<Scalar>& tp,
                                                                         std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& y = tp.value(self);
    auto& gx = tp.grad(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      Scalar proj{0};
      for (std::size_t c = 0; c < ch; ++c) proj += y[r * ch + c] * g[r * ch + c];
      for (std::size_t c = 0; c < ch; ++c)
        gx[r * ch + c] += (g[r * ch + c] - y[r * ch + c] * proj) / norms[r];
    }
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  a.value().require_same_shape(b.value(), "add");
  NDArray<Scalar> out = a.value();
  out += b.value();
  const std::size_t ai = a.index(), bi = b.index();
  return a.tape().record(std::move(out), [ai, bi](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    tp.grad(ai) += g;
    tp.grad(bi) += g;
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor) {
  NDArray<Scalar> out = a.value();
  out *= factor;
  const std::size_t ai = a.index();
  return a.tape().record(std::move(out), [ai, factor](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& ga = tp.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Scalar acc{0};
  for (Scalar v : a.value().data()) acc += v;
  const std::size_t ai = a.index();
  return a.tape().record(NDArray<Scalar>(Shape{}, acc), [ai](Tape<Scalar>& tp, std::size_t self) {
    const Scalar g = tp.grad(self)[0];
    auto& ga = tp.grad(ai);
    for (auto& v : ga.data()) v += g;
  });
}

// Mean over the time axis: [T, C] -> [C], [N, T, C] -> [N, C].
template <typename Scalar>
Var<Scalar> mean_time(Var<Scalar> x) {
  const auto d = detail::temporal_dims(x.shape(), "mean_time");
  const Shape os = x.shape().size() == 2 ? Shape{d.channels} : Shape{d.batch, d.channels};
  NDArray<Scalar> out(os);
  const auto& xv = x.value();
  const Scalar inv = Scalar{1} / static_cast<Scalar>(d.time);
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t t = 0; t < d.time; ++t)
      for (std::size_t c = 0; c < d.channels; ++c)
        out[n * d.channels + c] += xv[(n * d.time + t) * d.channels + c];
    for (std::size_t c = 0; c < d.channels; ++c) out[n * d.channels + c] *= inv;
  }
  const std::size_t xi = x.index();
  return x.tape().record(std::move(out), [=](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(xi);
    for (std::size_t n = 0; n < d.batch; ++n)
      for (std::size_t t = 0; t < d.time; ++t)
        for (std::size_t c = 0; c < d.channels; ++c)
          gx[(n * d.time + t) * d.channels + c] += g[n * d.channels + c] * inv;
  });
}

// a[N, D] times b[K, D]^T -> [N, K]. With unit rows this is the cosine matrix.
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[1]) {
    throw DimensionError("matmul_nt: " + shape_str(as) + " vs " + shape_str(bs));
  }
  const std::size_t n = as[0], k = bs[0], dim = as[1];
  NDArray<Scalar> out(Shape{n, k});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      Scalar acc{0};
      for (std::size_t c = 0; c < dim; ++c) acc += av[i * dim + c] * bv[j * dim + c];
      out[i * k + j] = acc;
    }
  const std::size_t ai = a.index(), bi = b.index();
  return a.tape().record(std::move(out), [=](Tape<Scalar>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& av = tp.value(ai);
    const auto& bv = tp.value(bi);
    auto& ga = tp.grad(ai);
    auto& gb = tp.grad(bi);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const Scalar gij = g[i * k + j];
        if (gij == Scalar{0}) continue;
        for (std::size_t c = 0; c < dim; ++c) {
          ga[i * dim + c] += gij * bv[j * dim + c];
          gb[j * dim + c] += gij * av[i * dim + c];
        }
      }
  });
}

// sum_i weights[i] * terms[i] over scalar nodes.
template <typename Scalar>
Var<Scalar> weighted_sum(std::span<const Var<Scalar>> terms, std::span<const Scalar> weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw DimensionError("weighted_sum: need matching, non-empty terms and weights");
  }
  Scalar acc{0};
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    acc += weights[i] * terms[i].item();
    idx.push_back(terms[i].index());
  }
  std::vector<Scalar> w(weights.begin(), weights.end());
  return terms[0].tape().record(NDArray<Scalar>(Shape{}, acc),
                                [idx = std::move(idx), w = std::move(w)](Tape<Scalar>& tp,
                                                                         std::size_t self) {
                                  const Scalar g = tp.grad(self)[0];
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    tp.grad(idx[i])[0] += w[i] * g;
                                });
}

// Compares the tape gradient of `f` w.r.t. `p` against central differences.
// Returns max_i |analytic_i - cd_i| / max(|analytic_i|, |cd_i|, 1e-12).
// p.value and p.grad are restored on return.
template <typename Scalar>
Scalar finite_diff_check(const std::function<Var<Scalar>(Tape<Scalar>&)>& f, Parameter<Scalar>& p,
                         Scalar step) {
  if (!(step > 0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  const NDArray<Scalar> saved_grad = p.grad;
  p.zero_grad();
  {
    Tape<Scalar> tape;
    tape.backward(f(tape));
  }
  const NDArray<Scalar> analytic = p.grad;
  p.grad = saved_grad;

  auto eval = [&] {
    Tape<Scalar> tape;
    return f(tape).item();
  };
  Scalar worst{0};
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const Scalar orig = p.value[i];
    p.value[i] = orig + step;
    const Scalar up = eval();
    p.value[i] = orig - step;
    const Scalar down = eval();
    p.value[i] = orig;
    const Scalar cd = (up - down) / (Scalar{2} * step);
    const Scalar a = analytic[i];
    const Scalar denom = std::max({std::abs(a), std::abs(cd), Scalar(1e-12)});
    worst = std::max(worst, std::abs(a - cd) / denom);
  }
  return worst;
}

}  // namespace pcovkws
