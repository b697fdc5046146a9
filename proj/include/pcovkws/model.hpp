#pragma once

// The full trainable system (encoder + two classifier banks) and one
// multi-task optimization step.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pcovkws/encoder.hpp"
#include "pcovkws/heads.hpp"
#include "pcovkws/inference.hpp"
#include "pcovkws/mtoptim.hpp"
#include "pcovkws/random.hpp"

namespace pcovkws {

template <typename S>
struct PcovModel {
  EncoderParams<S> encoder;
  ClassifierBank<S> keyword_bank;
  ClassifierBank<S> speaker_bank;
  LossConfig keyword_loss;
  LossConfig speaker_loss;

  std::vector<Parameter<S>*> shared_params() { return encoder.trunk_params(); }

  // Keyword sub-encoder plus keyword bank and bias.
  std::vector<Parameter<S>*> keyword_task_params() {
    auto out = encoder.keyword_params();
    out.push_back(&keyword_bank.weights);
    out.push_back(&keyword_bank.bias);
    return out;
  }

  std::vector<Parameter<S>*> speaker_task_params() {
    auto out = encoder.voiceprint_params();
    out.push_back(&speaker_bank.weights);
    out.push_back(&speaker_bank.bias);
    return out;
  }

  // Order: trunk, keyword task, speaker task. Checkpoints use this order.
  std::vector<Parameter<S>*> all_params() {
    auto out = shared_params();
    for (auto* p : keyword_task_params()) out.push_back(p);
    for (auto* p : speaker_task_params()) out.push_back(p);
    return out;
  }

  TaskScorer keyword_scorer() const { return {keyword_loss, static_cast<double>(keyword_bank.bias.value[0])}; }
  TaskScorer speaker_scorer() const { return {speaker_loss, static_cast<double>(speaker_bank.bias.value[0])}; }
};

template <typename S>
PcovModel<S> build_model(const EncoderConfig& enc, std::size_t n_keywords, std::size_t n_speakers,
                         const LossConfig& keyword_loss, const LossConfig& speaker_loss, std::uint64_t seed) {
  PcovModel<S> m;
  m.encoder = build_encoder<S>(enc, mix_seed(seed, 1));
  m.keyword_bank = make_bank<S>(TaskTag::keyword, n_keywords, enc.embed_dim, mix_seed(seed, 2));
  m.speaker_bank = make_bank<S>(TaskTag::speaker, n_speakers, enc.embed_dim, mix_seed(seed, 3));
  keyword_loss.validate();
  speaker_loss.validate();
  m.keyword_loss = keyword_loss;
  m.speaker_loss = speaker_loss;
  return m;
}

struct StepStats {
  double loss_k = 0.0;
  double loss_v = 0.0;
  double g_kv = 0.0;
  double omega_k = 1.0;
  double omega_v = 1.0;
  bool conflict = false;
};

template <typename S>
struct TaskLosses {
  Var<S> keyword;
  Var<S> speaker;
};

template <typename S>
TaskLosses<S> forward_losses(Tape<S>& tape, PcovModel<S>& model, Var<S> x, std::span<const std::size_t> keyword_ids,
                             std::span<const std::size_t> speaker_ids) {
  const auto emb = encoder_forward(tape, model.encoder, x);
  Var<S> sk = matmul_nt(emb.keyword, tape.param(model.keyword_bank.weights));
  Var<S> sv = matmul_nt(emb.voiceprint, tape.param(model.speaker_bank.weights));
  return {sphereface2_loss(sk, keyword_ids, model.keyword_loss, tape.param(model.keyword_bank.bias)),
          sphereface2_loss(sv, speaker_ids, model.speaker_loss, tape.param(model.speaker_bank.bias))};
}

// Per-task gradients for every parameter, in PcovModel::all_params() order.
template <typename S>
struct TaskGradients {
  S loss_k;
  S loss_v;
  std::vector<NDArray<S>> g_k;
  std::vector<NDArray<S>> g_v;
};

template <typename S>
TaskGradients<S> loss_and_grads(PcovModel<S>& model, const NDArray<S>& batch, std::span<const std::size_t> keyword_ids,
                                std::span<const std::size_t> speaker_ids) {
  Tape<S> tape;
  const auto losses = forward_losses(tape, model, tape.constant(batch), keyword_ids, speaker_ids);
  const S lk = losses.keyword.item(), lv = losses.speaker.item();
  if (!std::isfinite(lk) || !std::isfinite(lv)) {
    throw NonFiniteError("non-finite loss (L_k=" + std::to_string(lk) + ", L_v=" + std::to_string(lv) + ")");
  }
  const auto params = model.all_params();
  const std::array<Var<S>, 2> roots{losses.keyword, losses.speaker};
  auto grads = tape.backward_each(std::span<const Var<S>>(roots), std::span<Parameter<S>* const>(params));
  return {lk, lv, std::move(grads[0]), std::move(grads[1])};
}

// One optimization step. Gradient surgery acts on the shared trunk only;
// head and bank gradients pass through (scaled by the loss weights when the
// mode uses them). The combined update is written to Parameter::grad and
// handed to the optimizer.
template <typename S>
StepStats train_step(PcovModel<S>& model, Optimizer<S>& opt, const NDArray<S>& batch,
                     std::span<const std::size_t> keyword_ids, std::span<const std::size_t> speaker_ids) {
  const auto& cfg = opt.config();
  auto tg = loss_and_grads(model, batch, keyword_ids, speaker_ids);
  auto params = model.all_params();
  const std::size_t n_shared = model.shared_params().size();

  GradState<S> gs;
  gs.eps = static_cast<S>(cfg.pcgrad_eps);
  for (std::size_t i = 0; i < n_shared; ++i) {
    gs.g_k.insert(gs.g_k.end(), tg.g_k[i].data().begin(), tg.g_k[i].data().end());
    gs.g_v.insert(gs.g_v.end(), tg.g_v[i].data().begin(), tg.g_v[i].data().end());
  }
  StepStats st;
  st.loss_k = tg.loss_k;
  st.loss_v = tg.loss_v;
  const S gkv = inner_product(gs);
  st.g_kv = gkv;
  st.conflict = gkv < S{0};

  GradState<S> out = gs;
  std::vector<S> shared(gs.g_k.size());
  S head_wk{1}, head_wv{1};
  if (cfg.weighting == Weighting::pcgrad) {
    out = project_if_conflict(gs);
    st.omega_k = out.omega[0];
    st.omega_v = out.omega[1];
    const bool scale_heads = cfg.pcgrad_mode != PcgradMode::projection;
    if (scale_heads) {
      head_wk = out.omega[0];
      head_wv = out.omega[1];
    }
    for (std::size_t i = 0; i < shared.size(); ++i) {
      shared[i] = cfg.pcgrad_mode == PcgradMode::reweight ? out.omega[0] * gs.g_k[i] + out.omega[1] * gs.g_v[i]
                                                          : out.g_k[i] + out.g_v[i];
    }
  } else {
    for (std::size_t i = 0; i < shared.size(); ++i) shared[i] = gs.g_k[i] + gs.g_v[i];
  }

  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& g = params[i]->grad;
    if (i < n_shared) {
      for (std::size_t j = 0; j < g.size(); ++j) g[j] = shared[offset + j];
      offset += g.size();
    } else {
      for (std::size_t j = 0; j < g.size(); ++j) g[j] = head_wk * tg.g_k[i][j] + head_wv * tg.g_v[i][j];
    }
  }
  std::array<Parameter<S>*, 2> unit_rows{&model.keyword_bank.weights, &model.speaker_bank.weights};
  opt.step(std::span<Parameter<S>* const>(params), std::span<Parameter<S>* const>(unit_rows));
  return st;
}

}  // namespace pcovkws
