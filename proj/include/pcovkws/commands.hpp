#pragma once

// The command-line verbs as library calls. Each takes parsed options, writes
// human-readable output to `out` and returns a process exit code.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "pcovkws/checkpoint.hpp"
#include "pcovkws/config.hpp"
#include "pcovkws/corpus.hpp"
#include "pcovkws/pipeline.hpp"

namespace pcovkws {

enum ExitCode : int { kOk = 0, kUsage = 2, kNonFinite = 3 };

struct GlobalOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> config;
  unsigned threads = 1;
  std::optional<Precision> precision;
};

inline TrainConfig resolve_config(const GlobalOptions& g) {
  TrainConfig cfg = g.config ? load_train_config(*g.config) : TrainConfig{};
  if (g.seed) cfg.seed = *g.seed;
  if (g.precision) cfg.precision = *g.precision;
  cfg.validate();
  return cfg;
}

// ---- gen-toy-corpus -------------------------------------------------------------

struct GenToyArgs {
  std::filesystem::path out_dir;
  std::size_t n_keywords = 8;
  std::size_t n_speakers = 8;
  std::size_t n_utts = 20;
};

inline int cmd_gen_toy_corpus(const GlobalOptions& g, const GenToyArgs& a, std::ostream& out) {
  ToyCorpusConfig c;
  c.n_keywords = a.n_keywords;
  c.n_speakers = a.n_speakers;
  c.n_utts_per_cell = a.n_utts;
  c.seed = g.seed.value_or(0);
  const auto m = generate_toy_corpus(a.out_dir, c);
  out << "wrote " << m.records.size() << " utterances and " << (a.out_dir / "manifest.jsonl").string() << '\n';
  return kOk;
}

// ---- train ----------------------------------------------------------------------

struct TrainArgs {
  std::filesystem::path manifest;
  std::filesystem::path out;
  std::optional<std::filesystem::path> log;  // default: <out>.log.csv
  std::optional<std::string> weighting;
  std::size_t max_steps = 0;
};

template <typename S>
int run_train(const TrainConfig& cfg, const TrainArgs& a, unsigned threads, std::ostream& out) {
  const Manifest m = load_manifest(a.manifest);
  ModelMeta meta{cfg, {}, {}};
  {
    std::set<std::string> kw, sp;
    for (const auto* r : m.split(Split::train)) {
      kw.insert(r->keyword);
      sp.insert(r->speaker);
    }
    meta.keywords.assign(kw.begin(), kw.end());
    meta.speakers.assign(sp.begin(), sp.end());
  }
  if (meta.keywords.size() < 2 || meta.speakers.size() < 2) {
    throw DegenerateInputError("train: the train split needs >= 2 keywords and >= 2 speakers");
  }
  LabelIndex ki(meta.keywords), si(meta.speakers);
  const FeatureSet train = load_features(m, Split::train, cfg, ki, si, threads);
  auto model = build_model<S>(cfg.encoder, meta.keywords.size(), meta.speakers.size(), cfg.keyword_loss,
                              cfg.speaker_loss, cfg.seed);

  const auto log_path = a.log.value_or(std::filesystem::path(a.out.string() + ".log.csv"));
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  TrainSummary sum;
  try {
    sum = train_model(model, cfg, train, &log, a.max_steps);
  } catch (const NonFiniteError& e) {
    // train_step checks before touching any parameter, so the model is still
    // the last good state
    save_checkpoint(a.out, make_checkpoint(model, meta));
    out << "aborted: " << e.what() << "\nlast good checkpoint written to " << a.out.string() << '\n';
    return kNonFinite;
  }
  save_checkpoint(a.out, make_checkpoint(model, meta));
  out << "steps " << sum.steps << '\n'
      << "conflicting_steps " << sum.conflicts << '\n'
      << "first_joint_loss " << format_g9(sum.first_joint_loss) << '\n'
      << "last_joint_loss " << format_g9(sum.last_joint_loss) << '\n'
      << "checkpoint " << a.out.string() << '\n'
      << "log " << log_path.string() << '\n';
  return kOk;
}

inline int cmd_train(const GlobalOptions& g, const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = resolve_config(g);
  if (a.weighting) cfg.optim.weighting = parse_weighting(*a.weighting);
  return cfg.precision == Precision::f32 ? run_train<float>(cfg, a, g.threads, out)
                                         : run_train<double>(cfg, a, g.threads, out);
}

// ---- eval -----------------------------------------------------------------------

struct EvalArgs {
  std::filesystem::path manifest;
  std::filesystem::path checkpoint;
  std::string task = "pcov";
  std::size_t n_pairs = 2000;
  std::size_t n_enroll = 3;
  std::optional<double> alpha;
  std::optional<std::string> preset;
  std::optional<std::filesystem::path> det_csv;
  std::string split = "test";
};

inline std::optional<double> alpha_override(const std::optional<double>& alpha, const std::optional<std::string>& preset) {
  if (alpha && preset) throw std::invalid_argument("give either --alpha or --preset, not both");
  if (alpha) return alpha;
  if (preset) {
    if (*preset == "pcov") return preset_alpha(TaskPreset::pcov);
    if (*preset == "ovkws") return preset_alpha(TaskPreset::ovkws);
    if (*preset == "sv") return preset_alpha(TaskPreset::sv);
    throw std::invalid_argument("preset must be pcov, ovkws or sv, got '" + *preset + "'");
  }
  return std::nullopt;
}

inline Precision effective_precision(const GlobalOptions& g, const Checkpoint& ck) {
  return g.precision.value_or(ck.meta.config.precision);
}

template <typename S>
EvalReport run_eval(const Checkpoint& ck, const EvalArgs& a, std::uint64_t seed, unsigned threads) {
  const auto model = model_from_checkpoint<S>(ck);
  const Manifest m = load_manifest(a.manifest);
  LabelIndex ki(ck.meta.keywords), si(ck.meta.speakers);
  const auto& cfg = ck.meta.config;
  EvalOptions opt;
  opt.task = parse_eval_task(a.task);
  opt.n_pairs = a.n_pairs;
  opt.n_enroll = a.n_enroll;
  opt.seed = seed;
  opt.alpha = alpha_override(a.alpha, a.preset);
  opt.threads = threads;
  if (opt.alpha) check_task_fusion(opt.task, FusionConfig{*opt.alpha, TaskPreset::pcov});
  const FeatureSet test = load_features(m, parse_split(a.split), cfg, ki, si, threads);
  std::optional<FeatureSet> valid;
  if (opt.task == EvalTask::pcov && !opt.alpha) valid = load_features(m, Split::valid, cfg, ki, si, threads);
  return evaluate(model, test, valid ? &*valid : nullptr, opt);
}

inline int cmd_eval(const GlobalOptions& g, const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const std::uint64_t seed = g.seed.value_or(0);
  const EvalReport rep = effective_precision(g, ck) == Precision::f32 ? run_eval<float>(ck, a, seed, g.threads)
                                                                      : run_eval<double>(ck, a, seed, g.threads);
  out << rep.text();
  const auto det = a.det_csv.value_or(std::filesystem::path(a.checkpoint.string() + "." + a.task + ".det.csv"));
  std::ofstream os(det, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + det.string());
  write_det_csv(os, rep.det);
  out << "det " << det.string() << '\n';
  return kOk;
}

// ---- enroll / detect -------------------------------------------------------------

template <typename S>
std::vector<EmbeddingPair> embed_wavs(const Checkpoint& ck, const std::vector<std::filesystem::path>& wavs) {
  const auto model = model_from_checkpoint<S>(ck);
  const LogMelExtractor ex(ck.meta.config.framing);
  std::vector<FeatureMatrix> feats;
  for (const auto& w : wavs) feats.push_back(extract_features(read_wav(w), ex, ck.meta.config.feature_norm));
  return embed_all(model.encoder, feats);
}

struct EnrollArgs {
  std::filesystem::path checkpoint;
  std::string profile;
  std::vector<std::filesystem::path> wavs;
  std::optional<std::filesystem::path> out;  // default: update the checkpoint in place
};

inline int cmd_enroll(const GlobalOptions& g, const EnrollArgs& a, std::ostream& out) {
  if (a.wavs.empty()) throw std::invalid_argument("enroll: need at least one WAV");
  if (a.profile.empty()) throw std::invalid_argument("enroll: profile name must be non-empty");
  Checkpoint ck = load_checkpoint(a.checkpoint);
  const auto emb = effective_precision(g, ck) == Precision::f32 ? embed_wavs<float>(ck, a.wavs)
                                                                 : embed_wavs<double>(ck, a.wavs);
  ck.profiles[a.profile] = enroll_embeddings(emb);
  const auto dst = a.out.value_or(a.checkpoint);
  save_checkpoint(dst, ck);
  out << "enrolled '" << a.profile << "' from " << a.wavs.size() << " utterance(s) into " << dst.string() << '\n';
  return kOk;
}

struct DetectArgs {
  std::filesystem::path checkpoint;
  std::string profile;
  std::filesystem::path wav;
  std::string task = "pcov";
  std::optional<double> alpha;
  double threshold = 0.5;
};

struct Detection {
  Confidence phi;
  double fused = 0.0;
  double alpha = 0.5;
  bool accept = false;
};

template <typename S>
Detection run_detect(const Checkpoint& ck, const DetectArgs& a) {
  const auto it = ck.profiles.find(a.profile);
  if (it == ck.profiles.end()) {
    std::string known;
    for (const auto& [name, p] : ck.profiles) known += (known.empty() ? "" : ", ") + name;
    throw std::invalid_argument("detect: no profile '" + a.profile + "' in " + a.checkpoint.string() +
                                (known.empty() ? " (none enrolled)" : " (known: " + known + ")"));
  }
  TaskPreset preset;
  if (a.task == "pcov") {
    preset = TaskPreset::pcov;
  } else if (a.task == "ovkws") {
    preset = TaskPreset::ovkws;
  } else if (a.task == "sv") {
    preset = TaskPreset::sv;
  } else {
    throw std::invalid_argument("detect: task must be pcov, ovkws or sv, got '" + a.task + "'");
  }
  FusionConfig fusion = FusionConfig::from_preset(preset);
  if (a.alpha) {
    fusion.alpha = *a.alpha;
    check_task_fusion(parse_eval_task(a.task), fusion);
  }
  if (!std::isfinite(a.threshold)) throw std::invalid_argument("detect: threshold must be finite");
  const auto model = model_from_checkpoint<S>(ck);
  const auto emb = embed_wavs<S>(ck, {a.wav});
  Detection d;
  d.phi = confidence(emb[0], it->second, model.keyword_scorer(), model.speaker_scorer());
  d.alpha = fusion.alpha;
  d.fused = fuse_cib(d.phi.keyword, d.phi.speaker, fusion);
  d.accept = d.fused >= a.threshold;
  return d;
}

inline int cmd_detect(const GlobalOptions& g, const DetectArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Detection d = effective_precision(g, ck) == Precision::f32 ? run_detect<float>(ck, a) : run_detect<double>(ck, a);
  out << "phi_k " << format_g9(d.phi.keyword) << '\n'
      << "phi_v " << format_g9(d.phi.speaker) << '\n'
      << "alpha " << format_g9(d.alpha) << '\n'
      << "phi " << format_g9(d.fused) << '\n'
      << "threshold " << format_g9(a.threshold) << '\n'
      << "decision " << (d.accept ? "accept" : "reject") << '\n';
  return kOk;
}

// ---- profile --------------------------------------------------------------------

inline int cmd_profile(const GlobalOptions& g, std::ostream& out) {
  const TrainConfig cfg = resolve_config(g);
  const auto rep = profile_encoder(cfg.encoder);
  std::size_t width = 5;
  for (const auto& l : rep.layers) width = std::max(width, l.name.size());
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s %12s %14s\n", static_cast<int>(width), "layer", "params", "flops");
  out << buf;
  for (const auto& l : rep.layers) {
    std::snprintf(buf, sizeof buf, "%-*s %12zu %14zu\n", static_cast<int>(width), l.name.c_str(), l.params, l.flops);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%-*s %12zu %14zu\n", static_cast<int>(width), "total", rep.total_params(),
                rep.total_flops());
  out << buf;
  out << "flops count one multiply-accumulate of a convolution or linear layer as one FLOP\n";
  return kOk;
}

// ---- import-speech-commands ------------------------------------------------------

inline int cmd_import_speech_commands(const std::filesystem::path& root, const std::filesystem::path& dst,
                                      std::ostream& out) {
  Manifest m = import_speech_commands(root);
  // records are relative to root; rebase them onto the manifest's directory
  const auto base = std::filesystem::absolute(dst).parent_path();
  for (auto& r : m.records) {
    r.path = std::filesystem::relative(std::filesystem::absolute(root) / r.path, base).generic_string();
  }
  m.root = base;
  m.validate(false);
  write_manifest(dst, m);
  out << "wrote " << m.records.size() << " records to " << dst.string() << '\n';
  return kOk;
}

}  // namespace pcovkws
