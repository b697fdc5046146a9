#pragma once

// Enrollment anchors, per-task confidences and their convex fusion.

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcovkws/encoder.hpp"
#include "pcovkws/errors.hpp"
#include "pcovkws/heads.hpp"
#include "pcovkws/metrics.hpp"

namespace pcovkws {

struct EnrollmentProfile {
  std::vector<double> keyword_anchor;
  std::vector<double> speaker_anchor;
  std::size_t n_enroll = 0;

  friend bool operator==(const EnrollmentProfile&, const EnrollmentProfile&) = default;
};

inline std::vector<double> unit_mean(std::span<const std::vector<double>* const> vs) {
  if (vs.empty()) throw DegenerateInputError("unit_mean: no vectors");
  std::vector<double> m(vs[0]->size(), 0.0);
  for (const auto* v : vs) {
    if (v->size() != m.size()) throw DimensionError("unit_mean: ragged vectors");
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += (*v)[i];
  }
  double ss = 0.0;
  for (double x : m) ss += x * x;
  const double n = std::sqrt(ss);
  if (!(n > 0)) throw DegenerateInputError("unit_mean: enrollment embeddings cancel out");
  for (double& x : m) x /= n;
  return m;
}

// Anchors are the renormalized means of the enrollment embeddings.
inline EnrollmentProfile enroll_embeddings(std::span<const EmbeddingPair> utts) {
  if (utts.empty()) throw std::invalid_argument("enroll: need at least one utterance");
  std::vector<const std::vector<double>*> kw, sp;
  for (const auto& u : utts) {
    kw.push_back(&u.keyword);
    sp.push_back(&u.voiceprint);
  }
  return {unit_mean(kw), unit_mean(sp), utts.size()};
}

template <typename S>
EnrollmentProfile enroll(std::span<const FeatureMatrix> utterances, const EncoderParams<S>& params) {
  if (utterances.empty()) throw std::invalid_argument("enroll: need at least one utterance");
  std::vector<const FeatureMatrix*> ptrs;
  for (const auto& u : utterances) ptrs.push_back(&u);
  const auto embs = embed_batch<S>(params, ptrs);
  return enroll_embeddings(embs);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Scale and bias of one task's scoring, as trained.
struct TaskScorer {
  LossConfig loss;
  double bias = 0.0;

  // sigmoid(s * g(cos, t) - b): the positive-class probability of the
  // binary classifier, applied to an enrollment anchor.
  double operator()(double cos) const {
    const double z = loss.s * g_transform(cos, loss.t) - bias;
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
};

struct Confidence {
  double keyword = 0.0;  // Phi^k
  double speaker = 0.0;  // Phi^v
};

inline Confidence confidence(const EmbeddingPair& test, const EnrollmentProfile& profile, const TaskScorer& kw,
                             const TaskScorer& sv) {
  return {kw(cosine(test.keyword, profile.keyword_anchor)), sv(cosine(test.voiceprint, profile.speaker_anchor))};
}

enum class TaskPreset { pcov, ovkws, sv };

inline double preset_alpha(TaskPreset p) {
  switch (p) {
    case TaskPreset::pcov:
      return 0.5;
    case TaskPreset::ovkws:
      return 1.0;
    case TaskPreset::sv:
      return 0.0;
  }
  return 0.5;
}

struct FusionConfig {
  double alpha = 0.5;
  TaskPreset task_preset = TaskPreset::pcov;

  static FusionConfig from_preset(TaskPreset p) { return {preset_alpha(p), p}; }

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("FusionConfig: alpha must lie in [0, 1]");
  }
};

// Phi = alpha Phi^k + (1 - alpha) Phi^v. The endpoints return the single-task
// confidence untouched.
inline double fuse_cib(double phi_k, double phi_v, const FusionConfig& f) {
  f.validate();
  if (f.alpha == 1.0) return phi_k;
  if (f.alpha == 0.0) return phi_v;
  return f.alpha * phi_k + (1.0 - f.alpha) * phi_v;
}

struct FusionTrial {
  double phi_k = 0.0;
  double phi_v = 0.0;
  bool positive = false;
};

struct AlphaSearchResult {
  double alpha = 0.5;
  double eer = 1.0;
  std::vector<std::pair<double, double>> curve;  // (alpha, EER) over the grid
};

// Exhaustive search over {0, step, ..., 1} for the alpha minimizing EER of the
// fused scores. Ties go to the grid point closest to 0.5.
inline AlphaSearchResult grid_search_alpha(std::span<const FusionTrial> trials, double step = 0.01) {
  if (!(step > 0.0 && step <= 1.0)) throw std::invalid_argument("grid_search_alpha: step must lie in (0, 1]");
  std::vector<Trial> fused(trials.size());
  AlphaSearchResult best;
  best.eer = 2.0;
  const auto n_steps = static_cast<std::size_t>(std::floor(1.0 / step + 1e-9));
  std::vector<double> grid;
  for (std::size_t i = 0; i <= n_steps; ++i) grid.push_back(std::min(1.0, static_cast<double>(i) * step));
  if (grid.back() < 1.0) grid.push_back(1.0);
  for (double a : grid) {
    const FusionConfig f{a, TaskPreset::pcov};
    for (std::size_t i = 0; i < trials.size(); ++i) {
      fused[i] = Trial{fuse_cib(trials[i].phi_k, trials[i].phi_v, f), trials[i].positive};
    }
    const double eer = compute_eer(fused).eer;
    best.curve.emplace_back(a, eer);
    if (eer < best.eer || (eer == best.eer && std::abs(a - 0.5) < std::abs(best.alpha - 0.5))) {
      best.eer = eer;
      best.alpha = a;
    }
  }
  return best;
}

}  // namespace pcovkws
