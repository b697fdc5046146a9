#pragma once

// Multi-task loss weighting (gradient projection with loss-weight correction,
// or plain equal weighting) and the first-order parameter update.

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcovkws/autodiff.hpp"
#include "pcovkws/heads.hpp"

namespace pcovkws {

// Per-task gradients over the shared trunk, flattened in parameter order.
template <typename S>
struct GradState {
  std::vector<S> g_k;
  std::vector<S> g_v;
  std::array<S, 2> omega{S{1}, S{1}};
  S eps = S(1e-8);

  void validate() const {
    if (g_k.size() != g_v.size()) throw DimensionError("GradState: g_k and g_v lengths differ");
    if (!(eps > S{0})) throw std::invalid_argument("GradState: eps must be positive");
  }
};

template <typename S>
S inner_product(const GradState<S>& gs) {
  gs.validate();
  return dot<S>(gs.g_k, gs.g_v);
}

// When the task gradients conflict (g_k . g_v < 0) each one is projected onto
// the normal plane of the other task's original gradient, and the loss
// weights move by the same coefficients:
//   g_k <- g_k - c_k g_v,  c_k = g_kv / (|g_v|^2 + eps),  w_k <- w_k - c_k
//   g_v <- g_v - c_v g_k,  c_v = g_kv / (|g_k|^2 + eps),  w_v <- w_v - c_v
// Without conflict the state is returned unchanged.
template <typename S>
GradState<S> project_if_conflict(const GradState<S>& gs) {
  const S gkv = inner_product(gs);
  if (!(gkv < S{0})) return gs;
  GradState<S> out = gs;
  const S ck = gkv / (squared_norm<S>(gs.g_v) + gs.eps);
  const S cv = gkv / (squared_norm<S>(gs.g_k) + gs.eps);
  for (std::size_t i = 0; i < gs.g_k.size(); ++i) {
    out.g_k[i] = gs.g_k[i] - ck * gs.g_v[i];
    out.g_v[i] = gs.g_v[i] - cv * gs.g_k[i];
  }
  out.omega[0] = gs.omega[0] - ck;
  out.omega[1] = gs.omega[1] - cv;
  return out;
}

template <typename S>
S combined_loss(S loss_k, S loss_v, const std::array<S, 2>& omega) {
  if (!std::isfinite(omega[0]) || !std::isfinite(omega[1])) {
    throw std::invalid_argument("combined_loss: non-finite loss weight");
  }
  return omega[0] * loss_k + omega[1] * loss_v;
}

enum class Weighting { pcgrad, ew };

// What a conflicting batch changes under pcgrad weighting:
//   both        shared update = g_k' + g_v', head/bank grads scaled by omega
//   projection  shared update = g_k' + g_v', head/bank grads unscaled
//   reweight    shared update = w_k g_k + w_v g_v, head/bank grads scaled by omega
enum class PcgradMode { both, projection, reweight };

enum class OptimMethod { sgd, adam };

struct OptimConfig {
  OptimMethod method = OptimMethod::adam;
  double lr = 1e-3;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  Weighting weighting = Weighting::pcgrad;
  PcgradMode pcgrad_mode = PcgradMode::both;
  double pcgrad_eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t epochs = 10;

  void validate() const {
    if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("OptimConfig: lr must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("OptimConfig: batch_size must be positive");
    if (!(pcgrad_eps > 0)) throw std::invalid_argument("OptimConfig: pcgrad_eps must be positive");
  }

  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

// Applies Parameter::grad as the update direction, then zeroes the grads.
// Parameters listed in `unit_rows` get every row they touched renormalized.
template <typename S>
class Optimizer {
 public:
  explicit Optimizer(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const OptimConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

  void step(std::span<Parameter<S>* const> params, std::span<Parameter<S>* const> unit_rows = {}) {
    for (const auto* p : params) {
      if (!p->grad.all_finite()) throw NonFiniteError("non-finite gradient in " + p->name);
    }
    ++t_;
    const S lr = static_cast<S>(cfg_.lr);
    for (auto* p : params) {
      auto& g = p->grad;
      auto& v = p->value;
      auto& st = state_[p->name];
      if (cfg_.method == OptimMethod::sgd) {
        if (cfg_.momentum != 0.0) {
          if (st.m.empty()) st.m.assign(v.size(), S{0});
          const S mu = static_cast<S>(cfg_.momentum);
          for (std::size_t i = 0; i < v.size(); ++i) {
            st.m[i] = mu * st.m[i] + g[i];
            v[i] -= lr * st.m[i];
          }
        } else {
          for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
        }
      } else {
        if (st.m.empty()) {
          st.m.assign(v.size(), S{0});
          st.v.assign(v.size(), S{0});
        }
        const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
        const S c1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
        const S c2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
        const S eps = static_cast<S>(cfg_.adam_eps);
        for (std::size_t i = 0; i < v.size(); ++i) {
          st.m[i] = b1 * st.m[i] + (S{1} - b1) * g[i];
          st.v[i] = b2 * st.v[i] + (S{1} - b2) * g[i] * g[i];
          if (st.m[i] == S{0}) continue;
          v[i] -= lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps);
        }
      }
    }
    for (auto* p : unit_rows) {
      const std::size_t k = p->value.extent(0), d = p->value.extent(1);
      std::vector<std::size_t> touched;
      for (std::size_t r = 0; r < k; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          if (p->grad.at(r, c) != S{0} || (state_[p->name].m.size() && state_[p->name].m[r * d + c] != S{0})) {
            touched.push_back(r);
            break;
          }
        }
      }
      if (!touched.empty()) renormalize_rows<S>(p->value, touched);
    }
    for (auto* p : params) p->zero_grad();
  }

 private:
  struct State {
    std::vector<S> m;
    std::vector<S> v;
  };
  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::unordered_map<std::string, State> state_;
};

}  // namespace pcovkws
