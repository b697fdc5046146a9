#pragma once

// Cosine classifier banks and the binary one-vs-all training criterion.
//
// For a batch of N embeddings with cosine scores z[i, j] against K unit class
// vectors and targets y_i:
//
//   g(z)   = 2 ((z + 1) / 2)^t - 1
//   L      = 1/N sum_i [ lambda       * log(1 + exp(-s g(z[i, y_i]) + b))
//                      + (1 - lambda) * sum_{j != y_i} log(1 + exp(s g(z[i, j]) + b)) ]
//
// s is a fixed scale, b a trainable scalar shared by the bank's classes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcovkws/autodiff.hpp"
#include "pcovkws/random.hpp"

namespace pcovkws {

enum class TaskTag { keyword, speaker };

inline const char* to_string(TaskTag t) { return t == TaskTag::keyword ? "keyword" : "speaker"; }

struct LossConfig {
  double t = 5.0;       // distribution-adjustment exponent
  double lambda = 0.7;  // positive/negative balance
  double s = 32.0;      // scale

  void validate() const {
    if (!(t > 0)) throw std::invalid_argument("LossConfig: t must be positive");
    if (!(lambda >= 0 && lambda <= 1)) throw std::invalid_argument("LossConfig: lambda must lie in [0, 1]");
    if (!(s > 0)) throw std::invalid_argument("LossConfig: s must be positive");
  }

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

// K x D unit rows plus the bank's bias b. Rows are renormalized after each
// optimizer step rather than inside the forward pass.
template <typename S>
struct ClassifierBank {
  TaskTag tag = TaskTag::keyword;
  Parameter<S> weights;  // [K, D]
  Parameter<S> bias;     // [1]

  std::size_t classes() const { return weights.value.extent(0); }
  std::size_t dim() const { return weights.value.extent(1); }
};

// b starts at log(K - 1) so the positive and negative terms start balanced
// (0 when K = 1).
inline double initial_bias(std::size_t classes) {
  return classes > 1 ? std::log(static_cast<double>(classes - 1)) : 0.0;
}

// Renormalizes the listed rows (all rows when `rows` is empty) to unit length.
template <typename S>
void renormalize_rows(NDArray<S>& w, std::span<const std::size_t> rows = {}) {
  const std::size_t k = w.extent(0), d = w.extent(1);
  auto fix = [&](std::size_t r) {
    S ss{0};
    for (std::size_t c = 0; c < d; ++c) ss += w.at(r, c) * w.at(r, c);
    const S n = std::sqrt(ss);
    if (!(n > S{0})) throw DegenerateInputError("classifier bank row " + std::to_string(r) + " collapsed to zero");
    for (std::size_t c = 0; c < d; ++c) w.at(r, c) /= n;
  };
  if (rows.empty()) {
    for (std::size_t r = 0; r < k; ++r) fix(r);
  } else {
    for (std::size_t r : rows) fix(r);
  }
}

template <typename S>
ClassifierBank<S> make_bank(TaskTag tag, std::size_t classes, std::size_t dim, std::uint64_t seed) {
  if (classes < 1) throw std::invalid_argument("ClassifierBank: need at least one class");
  if (dim < 1) throw std::invalid_argument("ClassifierBank: need a positive dimension");
  Rng rng(seed);
  NDArray<S> w(Shape{classes, dim});
  for (auto& v : w.data()) v = static_cast<S>(rng.normal());
  renormalize_rows(w);
  const std::string prefix = std::string(to_string(tag)) + "_bank";
  ClassifierBank<S> bank;
  bank.tag = tag;
  bank.weights = Parameter<S>(prefix + ".weight", std::move(w));
  bank.bias = Parameter<S>(prefix + ".bias", NDArray<S>(Shape{1}, static_cast<S>(initial_bias(classes))));
  return bank;
}

// Dot products of a unit embedding with each unit class vector.
template <typename S>
std::vector<double> cosine_scores(std::span<const double> e, const ClassifierBank<S>& bank) {
  if (e.size() != bank.dim()) {
    throw DimensionError("cosine_scores: embedding dim " + std::to_string(e.size()) + " vs bank dim " +
                         std::to_string(bank.dim()));
  }
  std::vector<double> out(bank.classes());
  for (std::size_t j = 0; j < out.size(); ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < e.size(); ++c) acc += e[c] * static_cast<double>(bank.weights.value.at(j, c));
    out[j] = acc;
  }
  return out;
}

// Scores drift marginally outside [-1, 1] in floating point; they are clamped
// so the fractional power stays real.
template <typename T>
T g_transform(T z, T t) {
  const T zc = std::clamp(z, T{-1}, T{1});
  return T{2} * std::pow((zc + T{1}) / T{2}, t) - T{1};
}

template <typename T>
T g_transform_derivative(T z, T t) {
  const T zc = std::clamp(z, T{-1}, T{1});
  return t * std::pow((zc + T{1}) / T{2}, t - T{1});
}

namespace detail {

// log(1 + exp(x)) without overflow.
template <typename T>
T softplus(T x) {
  return std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

inline void check_labels(std::span<const std::size_t> labels, std::size_t n, std::size_t k) {
  if (labels.size() != n) throw DimensionError("loss: label count does not match batch size");
  for (std::size_t y : labels)
    if (y >= k) throw std::out_of_range("loss: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
}

// scores: [N, K] cosine matrix; bias: scalar [1] node. Returns a scalar node.
template <typename S>
Var<S> sphereface2_loss(Var<S> scores, std::span<const std::size_t> labels, const LossConfig& cfg, Var<S> bias) {
  cfg.validate();
  const Shape& sh = scores.shape();
  if (sh.size() != 2) throw DimensionError("sphereface2_loss: scores must be [N, K]");
  if (bias.value().size() != 1) throw DimensionError("sphereface2_loss: bias must be a scalar");
  const std::size_t n = sh[0], k = sh[1];
  if (n == 0) throw DimensionError("sphereface2_loss: empty batch");
  check_labels(labels, n, k);
  const S t = static_cast<S>(cfg.t), lam = static_cast<S>(cfg.lambda), s = static_cast<S>(cfg.s);
  const S b = bias.value()[0];
  const auto& z = scores.value();
  S total{0};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const S gz = g_transform(z[i * k + j], t);
      total += j == labels[i] ? lam * detail::softplus(-s * gz + b) : (S{1} - lam) * detail::softplus(s * gz + b);
    }
  }
  total /= static_cast<S>(n);

  std::vector<std::size_t> y(labels.begin(), labels.end());
  const std::size_t zi = scores.index(), bi = bias.index();
  return scores.tape().record(NDArray<S>(Shape{}, total), [=, y = std::move(y)](Tape<S>& tp, std::size_t self) {
    const S g = tp.grad(self)[0] / static_cast<S>(n);
    const auto& z = tp.value(zi);
    const S b = tp.value(bi)[0];
    auto& gz = tp.grad(zi);
    S gb{0};
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const S zz = z[i * k + j];
        const S gv = g_transform(zz, t);
        const S dg = g_transform_derivative(zz, t);
        if (j == y[i]) {
          const S p = detail::sigmoid(-s * gv + b);
          gz[i * k + j] += g * lam * p * (-s) * dg;
          gb += g * lam * p;
        } else {
          const S p = detail::sigmoid(s * gv + b);
          gz[i * k + j] += g * (S{1} - lam) * p * s * dg;
          gb += g * (S{1} - lam) * p;
        }
      }
    }
    tp.grad(bi)[0] += gb;
  });
}

}  // namespace pcovkws
