#pragma once

// Training configuration and its JSON form. Missing keys keep their defaults,
// unknown keys are an error. `dump_canonical` (sorted keys, no whitespace) is
// the text stored in checkpoints.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcovkws/encoder.hpp"
#include "pcovkws/frontend.hpp"
#include "pcovkws/heads.hpp"
#include "pcovkws/mtoptim.hpp"

namespace pcovkws {

using Json = nlohmann::json;

enum class Precision { f32, f64 };

inline const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw std::invalid_argument("precision must be f32 or f64, got '" + s + "'");
}

struct TrainConfig {
  EncoderConfig encoder;
  LossConfig keyword_loss;
  LossConfig speaker_loss;
  OptimConfig optim;
  FramingConfig framing;
  FeatureNorm feature_norm = FeatureNorm::cmn;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;

  void validate() const {
    encoder.validate();
    keyword_loss.validate();
    speaker_loss.validate();
    optim.validate();
    if (framing.n_mels != encoder.n_mels) {
      throw std::invalid_argument("config: framing.n_mels (" + std::to_string(framing.n_mels) +
                                  ") must equal encoder.n_mels (" + std::to_string(encoder.n_mels) + ")");
    }
  }

  friend bool operator==(const TrainConfig& a, const TrainConfig& b) {
    return a.encoder == b.encoder && a.keyword_loss == b.keyword_loss && a.speaker_loss == b.speaker_loss &&
           a.optim == b.optim && a.framing.sample_rate == b.framing.sample_rate &&
           a.framing.frame_len_ms == b.framing.frame_len_ms && a.framing.frame_shift_ms == b.framing.frame_shift_ms &&
           a.framing.n_mels == b.framing.n_mels && a.framing.log_floor == b.framing.log_floor && a.feature_norm == b.feature_norm &&
           a.seed == b.seed && a.precision == b.precision;
  }
};

namespace detail {

inline void reject_unknown(const Json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  std::set<std::string> ok(known.begin(), known.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) throw std::invalid_argument("config: unknown key '" + where + "." + k + "'");
  }
}

template <typename T>
void read_opt(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline const char* to_string(OptimMethod m) { return m == OptimMethod::adam ? "adam" : "sgd"; }
inline const char* to_string(Weighting w) { return w == Weighting::pcgrad ? "pcgrad" : "ew"; }
inline const char* to_string(PcgradMode m) {
  switch (m) {
    case PcgradMode::both:
      return "both";
    case PcgradMode::projection:
      return "projection";
    case PcgradMode::reweight:
      return "reweight";
  }
  return "?";
}

}  // namespace detail

inline Weighting parse_weighting(const std::string& s) {
  if (s == "pcgrad") return Weighting::pcgrad;
  if (s == "ew") return Weighting::ew;
  throw std::invalid_argument("weighting must be pcgrad or ew, got '" + s + "'");
}

inline PcgradMode parse_pcgrad_mode(const std::string& s) {
  if (s == "both") return PcgradMode::both;
  if (s == "projection") return PcgradMode::projection;
  if (s == "reweight") return PcgradMode::reweight;
  throw std::invalid_argument("pcgrad_mode must be both, projection or reweight, got '" + s + "'");
}

inline OptimMethod parse_optim_method(const std::string& s) {
  if (s == "adam") return OptimMethod::adam;
  if (s == "sgd") return OptimMethod::sgd;
  throw std::invalid_argument("optimizer must be adam or sgd, got '" + s + "'");
}

inline Json to_json(const EncoderConfig& c) {
  return {{"n_mels", c.n_mels},
          {"input_frames", c.input_frames},
          {"stem_patch", c.stem_patch},
          {"stage_ratio", c.stage_ratio},
          {"stage_widths", c.stage_widths},
          {"kernel_size", c.kernel_size},
          {"expansion_factor", c.expansion_factor},
          {"embed_dim", c.embed_dim},
          {"sub_encoder_depth", c.sub_encoder_depth},
          {"norm_eps", c.norm_eps},
          {"init_std", c.init_std}};
}

inline EncoderConfig encoder_config_from_json(const Json& j) {
  detail::reject_unknown(j,
                         {"n_mels", "input_frames", "stem_patch", "stage_ratio", "stage_widths", "kernel_size",
                          "expansion_factor", "embed_dim", "sub_encoder_depth", "norm_eps", "init_std"},
                         "encoder");
  EncoderConfig c;
  detail::read_opt(j, "n_mels", c.n_mels);
  detail::read_opt(j, "input_frames", c.input_frames);
  detail::read_opt(j, "stem_patch", c.stem_patch);
  detail::read_opt(j, "stage_ratio", c.stage_ratio);
  detail::read_opt(j, "stage_widths", c.stage_widths);
  detail::read_opt(j, "kernel_size", c.kernel_size);
  detail::read_opt(j, "expansion_factor", c.expansion_factor);
  detail::read_opt(j, "embed_dim", c.embed_dim);
  detail::read_opt(j, "sub_encoder_depth", c.sub_encoder_depth);
  detail::read_opt(j, "norm_eps", c.norm_eps);
  detail::read_opt(j, "init_std", c.init_std);
  return c;
}

inline Json to_json(const LossConfig& c) { return {{"t", c.t}, {"lambda", c.lambda}, {"s", c.s}}; }

inline LossConfig loss_config_from_json(const Json& j, const std::string& where) {
  detail::reject_unknown(j, {"t", "lambda", "s"}, where);
  LossConfig c;
  detail::read_opt(j, "t", c.t);
  detail::read_opt(j, "lambda", c.lambda);
  detail::read_opt(j, "s", c.s);
  return c;
}

inline Json to_json(const OptimConfig& c) {
  return {{"method", detail::to_string(c.method)},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"weighting", detail::to_string(c.weighting)},
          {"pcgrad_mode", detail::to_string(c.pcgrad_mode)},
          {"pcgrad_eps", c.pcgrad_eps},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs}};
}

inline OptimConfig optim_config_from_json(const Json& j) {
  detail::reject_unknown(j,
                         {"method", "lr", "momentum", "beta1", "beta2", "adam_eps", "weighting", "pcgrad_mode",
                          "pcgrad_eps", "batch_size", "epochs"},
                         "optim");
  OptimConfig c;
  if (j.contains("method")) c.method = parse_optim_method(j.at("method").get<std::string>());
  detail::read_opt(j, "lr", c.lr);
  detail::read_opt(j, "momentum", c.momentum);
  detail::read_opt(j, "beta1", c.beta1);
  detail::read_opt(j, "beta2", c.beta2);
  detail::read_opt(j, "adam_eps", c.adam_eps);
  if (j.contains("weighting")) c.weighting = parse_weighting(j.at("weighting").get<std::string>());
  if (j.contains("pcgrad_mode")) c.pcgrad_mode = parse_pcgrad_mode(j.at("pcgrad_mode").get<std::string>());
  detail::read_opt(j, "pcgrad_eps", c.pcgrad_eps);
  detail::read_opt(j, "batch_size", c.batch_size);
  detail::read_opt(j, "epochs", c.epochs);
  return c;
}

inline Json to_json(const FramingConfig& c) {
  return {{"sample_rate", c.sample_rate},
          {"frame_len_ms", c.frame_len_ms},
          {"frame_shift_ms", c.frame_shift_ms},
          {"n_mels", c.n_mels},
          {"log_floor", c.log_floor}};
}

inline FramingConfig framing_config_from_json(const Json& j) {
  detail::reject_unknown(j, {"sample_rate", "frame_len_ms", "frame_shift_ms", "n_mels", "log_floor"}, "framing");
  FramingConfig c;
  detail::read_opt(j, "sample_rate", c.sample_rate);
  detail::read_opt(j, "frame_len_ms", c.frame_len_ms);
  detail::read_opt(j, "frame_shift_ms", c.frame_shift_ms);
  detail::read_opt(j, "n_mels", c.n_mels);
  detail::read_opt(j, "log_floor", c.log_floor);
  return c;
}

inline Json to_json(const TrainConfig& c) {
  return {{"encoder", to_json(c.encoder)},
          {"keyword_loss", to_json(c.keyword_loss)},
          {"speaker_loss", to_json(c.speaker_loss)},
          {"optim", to_json(c.optim)},
          {"framing", to_json(c.framing)},
          {"feature_norm", to_string(c.feature_norm)},
          {"seed", c.seed},
          {"precision", to_string(c.precision)}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  detail::reject_unknown(j, {"encoder", "keyword_loss", "speaker_loss", "optim", "framing", "feature_norm", "seed", "precision"},
                         "<root>");
  TrainConfig c;
  if (j.contains("encoder")) c.encoder = encoder_config_from_json(j.at("encoder"));
  if (j.contains("keyword_loss")) c.keyword_loss = loss_config_from_json(j.at("keyword_loss"), "keyword_loss");
  if (j.contains("speaker_loss")) c.speaker_loss = loss_config_from_json(j.at("speaker_loss"), "speaker_loss");
  if (j.contains("optim")) c.optim = optim_config_from_json(j.at("optim"));
  if (j.contains("framing")) c.framing = framing_config_from_json(j.at("framing"));
  if (j.contains("feature_norm")) c.feature_norm = parse_feature_norm(j.at("feature_norm").get<std::string>());
  detail::read_opt(j, "seed", c.seed);
  if (j.contains("precision")) c.precision = parse_precision(j.at("precision").get<std::string>());
  c.validate();
  return c;
}

inline std::string dump_canonical(const Json& j) { return j.dump(); }

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

}  // namespace pcovkws
