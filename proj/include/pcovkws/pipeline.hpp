#pragma once

// Glue between manifests and the model: feature extraction, the training
// loop with its CSV log, batch embedding and the evaluation protocols.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "pcovkws/checkpoint.hpp"
#include "pcovkws/config.hpp"
#include "pcovkws/corpus.hpp"
#include "pcovkws/frontend.hpp"
#include "pcovkws/inference.hpp"
#include "pcovkws/metrics.hpp"
#include "pcovkws/model.hpp"

namespace pcovkws {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
// handled exactly once, so results do not depend on the thread count.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Maps string labels to dense ids. Labels missing from the initial
// vocabulary get fresh ids past its end.
class LabelIndex {
 public:
  LabelIndex() = default;
  explicit LabelIndex(const std::vector<std::string>& vocab) {
    for (const auto& s : vocab) id(s);
  }

  std::size_t id(const std::string& s) {
    const auto [it, fresh] = ids_.emplace(s, names_.size());
    if (fresh) names_.push_back(s);
    return it->second;
  }
  std::optional<std::size_t> find(const std::string& s) const {
    const auto it = ids_.find(s);
    return it == ids_.end() ? std::nullopt : std::optional<std::size_t>(it->second);
  }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::map<std::string, std::size_t> ids_;
  std::vector<std::string> names_;
};

struct FeatureSet {
  std::vector<FeatureMatrix> features;
  std::vector<LabeledItem> labels;
  std::vector<std::string> paths;

  std::size_t size() const { return features.size(); }
};

// Utterances are centered-padded or trimmed to one second before framing.
inline FeatureMatrix extract_features(const Waveform& w, const LogMelExtractor& ex, FeatureNorm norm) {
  return normalize(ex(pad_or_trim(w, 1.0)), norm);
}

inline FeatureSet load_features(const Manifest& m, Split split, const TrainConfig& cfg, LabelIndex& keywords,
                                LabelIndex& speakers, unsigned threads = 1) {
  FeatureSet fs;
  for (const auto* r : m.split(split)) {
    fs.labels.push_back({keywords.id(r->keyword), speakers.id(r->speaker)});
    fs.paths.push_back(m.resolve(*r).string());
  }
  fs.features.resize(fs.paths.size());
  const LogMelExtractor ex(cfg.framing);
  parallel_for(fs.paths.size(), threads,
               [&](std::size_t i) { fs.features[i] = extract_features(read_wav(fs.paths[i]), ex, cfg.feature_norm); });
  return fs;
}

// ---- training -------------------------------------------------------------------

inline void write_train_log_header(std::ostream& os) { os << "step,L_k,L_v,g_kv,omega_k,omega_v,conflict\n"; }

inline void write_train_log_row(std::ostream& os, std::size_t step, const StepStats& st) {
  os << step << ',' << format_g9(st.loss_k) << ',' << format_g9(st.loss_v) << ',' << format_g9(st.g_kv) << ','
     << format_g9(st.omega_k) << ',' << format_g9(st.omega_v) << ',' << (st.conflict ? 1 : 0) << '\n';
}

struct TrainSummary {
  std::size_t steps = 0;
  double first_joint_loss = 0.0;
  double last_joint_loss = 0.0;
  std::size_t conflicts = 0;
};

// Epoch e visits the training set in an order drawn from mix_seed(seed, e);
// the last batch of an epoch may be short. `max_steps` = 0 means no cap.
// `on_epoch` runs after every completed epoch.
template <typename S>
TrainSummary train_model(PcovModel<S>& model, const TrainConfig& cfg, const FeatureSet& train, std::ostream* log,
                         std::size_t max_steps = 0, const std::function<void(std::size_t)>& on_epoch = {}) {
  if (train.size() == 0) throw DegenerateInputError("train: empty training split");
  Optimizer<S> opt(cfg.optim);
  TrainSummary sum;
  if (log) write_train_log_header(*log);
  std::vector<std::size_t> order(train.size());
  std::vector<const FeatureMatrix*> batch;
  std::vector<std::size_t> kid, sid;
  for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(cfg.seed, 0xE0000 + epoch));
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += cfg.optim.batch_size) {
      if (max_steps && sum.steps >= max_steps) return sum;
      const std::size_t end = std::min(order.size(), start + cfg.optim.batch_size);
      batch.clear();
      kid.clear();
      sid.clear();
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&train.features[order[i]]);
        kid.push_back(train.labels[order[i]].keyword);
        sid.push_back(train.labels[order[i]].speaker);
      }
      const auto x = stack_features<S>(batch);
      const StepStats st = train_step(model, opt, x, kid, sid);
      const double joint = st.loss_k + st.loss_v;
      if (sum.steps == 0) sum.first_joint_loss = joint;
      sum.last_joint_loss = joint;
      sum.conflicts += st.conflict ? 1 : 0;
      if (log) write_train_log_row(*log, sum.steps, st);
      ++sum.steps;
    }
    if (on_epoch) on_epoch(epoch);
  }
  return sum;
}

// Mean joint loss (L_k + L_v) over a whole set, without updating anything.
template <typename S>
double evaluate_joint_loss(PcovModel<S>& model, const FeatureSet& set, std::size_t batch_size = 64) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    const std::size_t end = std::min(set.size(), start + batch_size);
    std::vector<const FeatureMatrix*> batch;
    std::vector<std::size_t> kid, sid;
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(&set.features[i]);
      kid.push_back(set.labels[i].keyword);
      sid.push_back(set.labels[i].speaker);
    }
    Tape<S> tape;
    const auto l = forward_losses(tape, model, tape.constant(stack_features<S>(batch)), kid, sid);
    total += (static_cast<double>(l.keyword.item()) + static_cast<double>(l.speaker.item())) *
             static_cast<double>(end - start);
    n += end - start;
  }
  return total / static_cast<double>(n);
}

// ---- embedding and evaluation -------------------------------------------------

template <typename S>
std::vector<EmbeddingPair> embed_all(const EncoderParams<S>& params, const std::vector<FeatureMatrix>& feats,
                                     unsigned threads = 1, std::size_t chunk = 32) {
  std::vector<EmbeddingPair> out(feats.size());
  const std::size_t n_chunks = (feats.size() + chunk - 1) / chunk;
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(feats.size(), lo + chunk);
    std::vector<const FeatureMatrix*> ptrs;
    for (std::size_t i = lo; i < hi; ++i) ptrs.push_back(&feats[i]);
    auto e = embed_batch<S>(params, ptrs);
    for (std::size_t i = lo; i < hi; ++i) out[i] = std::move(e[i - lo]);
  });
  return out;
}

enum class EvalTask { ovkws, sv, pcov, ckws };

inline const char* to_string(EvalTask t) {
  switch (t) {
    case EvalTask::ovkws:
      return "ovkws";
    case EvalTask::sv:
      return "sv";
    case EvalTask::pcov:
      return "pcov";
    case EvalTask::ckws:
      return "ckws";
  }
  return "?";
}

inline EvalTask parse_eval_task(const std::string& s) {
  if (s == "ovkws") return EvalTask::ovkws;
  if (s == "sv") return EvalTask::sv;
  if (s == "pcov") return EvalTask::pcov;
  if (s == "ckws") return EvalTask::ckws;
  throw std::invalid_argument("task must be ovkws, sv, pcov or ckws, got '" + s + "'");
}

// Pair tasks score with the preset of the same name. A fusion override must
// agree with it: ovkws needs alpha = 1, sv needs alpha = 0.
inline void check_task_fusion(EvalTask task, const FusionConfig& f) {
  f.validate();
  if (task == EvalTask::ovkws && f.alpha != 1.0) {
    throw std::invalid_argument("task ovkws scores keywords only and requires alpha = 1 (got " + format_g9(f.alpha) +
                                ")");
  }
  if (task == EvalTask::sv && f.alpha != 0.0) {
    throw std::invalid_argument("task sv scores speakers only and requires alpha = 0 (got " + format_g9(f.alpha) + ")");
  }
}

struct EvalOptions {
  EvalTask task = EvalTask::pcov;
  std::size_t n_pairs = 2000;
  std::size_t n_enroll = 3;
  std::uint64_t seed = 0;
  std::optional<double> alpha;  // override; for pcov it replaces the validation grid search
  double alpha_step = 0.01;
  std::size_t det_points = 200;
  unsigned threads = 1;
};

struct EvalReport {
  EvalTask task = EvalTask::pcov;
  std::size_t n_trials = 0;
  std::size_t n_positive = 0;
  double eer = 0.0;
  double threshold = 0.0;
  double auc = 0.0;
  double alpha = 0.0;
  std::optional<double> valid_eer;  // pcov grid search objective at alpha
  std::optional<double> accuracy;   // ckws
  DetCurve det;

  std::string text() const {
    std::string s;
    s += "task " + std::string(to_string(task)) + "\n";
    s += "trials " + std::to_string(n_trials) + " (" + std::to_string(n_positive) + " positive)\n";
    s += "alpha " + format_g9(alpha) + "\n";
    if (valid_eer) s += "valid_eer " + format_g9(*valid_eer) + "\n";
    s += "eer " + format_g9(eer) + "\n";
    s += "eer_threshold " + format_g9(threshold) + "\n";
    s += "auc " + format_g9(auc) + "\n";
    if (accuracy) s += "accuracy " + format_g9(*accuracy) + "\n";
    return s;
  }
};

inline PairTask pair_task_of(EvalTask t) {
  switch (t) {
    case EvalTask::ovkws:
      return PairTask::ovkws;
    case EvalTask::sv:
      return PairTask::sv;
    default:
      return PairTask::pcov;
  }
}

// Scores each pair: enrollment anchors from the pair's enroll set, test
// embedding against them.
inline std::vector<FusionTrial> score_pairs(std::span<const TrialPair> pairs, std::span<const EmbeddingPair> emb,
                                            const TaskScorer& kw, const TaskScorer& sv) {
  std::vector<FusionTrial> out;
  out.reserve(pairs.size());
  std::vector<EmbeddingPair> enroll;
  for (const auto& p : pairs) {
    enroll.clear();
    for (std::size_t i : p.enroll) enroll.push_back(emb[i]);
    const auto profile = enroll_embeddings(enroll);
    const auto c = confidence(emb[p.test], profile, kw, sv);
    out.push_back({c.keyword, c.speaker, p.positive});
  }
  return out;
}

inline std::vector<Trial> fuse_trials(std::span<const FusionTrial> ft, double alpha) {
  const FusionConfig f{alpha, TaskPreset::pcov};
  std::vector<Trial> out;
  out.reserve(ft.size());
  for (const auto& t : ft) out.push_back({fuse_cib(t.phi_k, t.phi_v, f), t.positive});
  return out;
}

template <typename S>
EvalReport evaluate(const PcovModel<S>& model, const FeatureSet& test, const FeatureSet* valid,
                    const EvalOptions& opt) {
  EvalReport rep;
  rep.task = opt.task;
  const auto kw = model.keyword_scorer();
  const auto sv = model.speaker_scorer();
  const auto emb = embed_all(model.encoder, test.features, opt.threads);
  std::vector<Trial> trials;

  if (opt.task == EvalTask::ckws) {
    // Closed set over the trained keyword bank: one trial per (utterance, class).
    const std::size_t k = model.keyword_bank.classes();
    std::size_t correct = 0, scored = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const std::size_t y = test.labels[i].keyword;
      if (y >= k) throw std::invalid_argument("ckws: test keyword '" + std::to_string(y) + "' is not in the trained bank");
      const auto cos = cosine_scores(emb[i].keyword, model.keyword_bank);
      const auto best = static_cast<std::size_t>(std::max_element(cos.begin(), cos.end()) - cos.begin());
      correct += best == y ? 1 : 0;
      ++scored;
      for (std::size_t j = 0; j < k; ++j) trials.push_back({kw(cos[j]), j == y, j, test.labels[i].speaker});
    }
    rep.accuracy = static_cast<double>(correct) / static_cast<double>(scored);
    rep.alpha = 1.0;
  } else {
    const PairTask pt = pair_task_of(opt.task);
    std::vector<LabeledItem> items(test.labels.begin(), test.labels.end());
    const auto pairs = build_pairs(items, pt, opt.seed, opt.n_pairs, opt.n_enroll);
    const auto ft = score_pairs(pairs, emb, kw, sv);
    if (opt.alpha) {
      check_task_fusion(opt.task, FusionConfig{*opt.alpha, TaskPreset::pcov});
      rep.alpha = *opt.alpha;
    } else if (opt.task == EvalTask::ovkws) {
      rep.alpha = preset_alpha(TaskPreset::ovkws);
    } else if (opt.task == EvalTask::sv) {
      rep.alpha = preset_alpha(TaskPreset::sv);
    } else {
      if (!valid || valid->size() == 0) throw std::invalid_argument("pcov: alpha search needs a validation split");
      const auto vemb = embed_all(model.encoder, valid->features, opt.threads);
      std::vector<LabeledItem> vitems(valid->labels.begin(), valid->labels.end());
      const auto vpairs = build_pairs(vitems, PairTask::pcov, mix_seed(opt.seed, 0xA1FA), opt.n_pairs, opt.n_enroll);
      const auto search = grid_search_alpha(score_pairs(vpairs, vemb, kw, sv), opt.alpha_step);
      rep.alpha = search.alpha;
      rep.valid_eer = search.eer;
    }
    trials = fuse_trials(ft, rep.alpha);
  }

  rep.n_trials = trials.size();
  rep.n_positive = static_cast<std::size_t>(std::count_if(trials.begin(), trials.end(), [](const Trial& t) { return t.positive; }));
  const auto e = compute_eer(trials);
  rep.eer = e.eer;
  rep.threshold = e.threshold;
  rep.auc = compute_auc(trials);
  rep.det = det_curve(trials, opt.det_points);
  return rep;
}

}  // namespace pcovkws
