#pragma once

// TDResNeXt audio encoder: a shared temporal-convolution trunk followed by two
// structurally identical linear sub-encoders (keyword, voiceprint).
//
//   stem     patchify conv (kernel = stride = stem_patch) -> LayerNorm
//   stage s  [LayerNorm -> conv k=2 stride 2]  (downsample, stages 1..3)
//            stage_ratio[s] x block:
//              x + project(GRN(GELU(expand(LN(dw2(dw1(x)))))))
//   pool     mean over time -> LayerNorm
//   heads    Linear(C -> E) [-> LN -> GELU -> Linear(E -> E)] x (depth - 1)
//            -> l2 normalize
//
// A stage with zero blocks is skipped together with its downsample layer.

#include <array>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcovkws/autodiff.hpp"
#include "pcovkws/frontend.hpp"
#include "pcovkws/random.hpp"

namespace pcovkws {

struct EncoderConfig {
  std::size_t n_mels = 40;
  std::size_t input_frames = 98;  // 1 s under the default framing; used for FLOP counting
  std::size_t stem_patch = 4;
  std::array<std::size_t, 4> stage_ratio{1, 1, 3, 1};
  std::array<std::size_t, 4> stage_widths{28, 32, 48, 76};
  std::size_t kernel_size = 11;
  std::size_t expansion_factor = 4;
  std::size_t embed_dim = 128;
  std::size_t sub_encoder_depth = 2;
  double norm_eps = 1e-6;
  double init_std = 0.02;

  void validate() const {
    auto bad = [](const std::string& why) { throw std::invalid_argument("EncoderConfig: " + why); };
    if (n_mels == 0) bad("n_mels must be positive");
    if (input_frames == 0) bad("input_frames must be positive");
    if (stem_patch == 0) bad("stem_patch must be positive");
    if (kernel_size == 0 || kernel_size % 2 == 0) bad("kernel_size must be odd");
    if (expansion_factor == 0) bad("expansion_factor must be positive");
    if (embed_dim == 0) bad("embed_dim must be positive");
    if (sub_encoder_depth == 0) bad("sub_encoder_depth must be >= 1");
    for (std::size_t w : stage_widths)
      if (w == 0) bad("stage widths must be positive");
    if (!(norm_eps > 0)) bad("norm_eps must be positive");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <typename S>
struct Block {
  Parameter<S> dw1_w, dw1_b, dw2_w, dw2_b;
  Parameter<S> norm_g, norm_b;
  Parameter<S> expand_w, expand_b;
  Parameter<S> grn_g, grn_b;
  Parameter<S> project_w, project_b;

  template <typename F>
  void visit(F&& f) {
    for (auto* p : {&dw1_w, &dw1_b, &dw2_w, &dw2_b, &norm_g, &norm_b, &expand_w, &expand_b, &grn_g,
                    &grn_b, &project_w, &project_b})
      f(*p);
  }
};

template <typename S>
struct Downsample {
  Parameter<S> norm_g, norm_b, conv_w, conv_b;

  template <typename F>
  void visit(F&& f) {
    for (auto* p : {&norm_g, &norm_b, &conv_w, &conv_b}) f(*p);
  }
};

template <typename S>
struct Stage {
  bool has_downsample = false;
  Downsample<S> down;
  std::vector<Block<S>> blocks;
};

template <typename S>
struct Trunk {
  Parameter<S> stem_w, stem_b, stem_norm_g, stem_norm_b;
  std::vector<Stage<S>> stages;
  Parameter<S> out_norm_g, out_norm_b;

  template <typename F>
  void visit(F&& f) {
    for (auto* p : {&stem_w, &stem_b, &stem_norm_g, &stem_norm_b}) f(*p);
    for (auto& st : stages) {
      if (st.has_downsample) st.down.visit(f);
      for (auto& b : st.blocks) b.visit(f);
    }
    f(out_norm_g);
    f(out_norm_b);
  }
};

template <typename S>
struct SubEncoder {
  std::vector<Parameter<S>> weights, biases;         // depth entries
  std::vector<Parameter<S>> norm_gammas, norm_betas;  // depth - 1 entries

  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (i > 0) {
        f(norm_gammas[i - 1]);
        f(norm_betas[i - 1]);
      }
      f(weights[i]);
      f(biases[i]);
    }
  }
};

template <typename S>
struct EncoderParams {
  EncoderConfig config;
  Trunk<S> trunk;
  SubEncoder<S> keyword;
  SubEncoder<S> voiceprint;

  std::vector<Parameter<S>*> trunk_params() { return collect(trunk); }
  std::vector<Parameter<S>*> keyword_params() { return collect(keyword); }
  std::vector<Parameter<S>*> voiceprint_params() { return collect(voiceprint); }
  std::vector<Parameter<S>*> all_params() {
    auto out = trunk_params();
    for (auto* p : keyword_params()) out.push_back(p);
    for (auto* p : voiceprint_params()) out.push_back(p);
    return out;
  }

 private:
  template <typename Part>
  static std::vector<Parameter<S>*> collect(Part& part) {
    std::vector<Parameter<S>*> out;
    part.visit([&](Parameter<S>& p) { out.push_back(&p); });
    return out;
  }
};

namespace detail {

template <typename S>
class Initializer {
 public:
  Initializer(std::uint64_t seed, double std) : rng_(seed), std_(std) {}

  Parameter<S> weight(std::string name, Shape shape) {
    NDArray<S> v(std::move(shape));
    for (auto& x : v.data()) x = static_cast<S>(rng_.truncated_normal(std_));
    return Parameter<S>(std::move(name), std::move(v));
  }
  static Parameter<S> zeros(std::string name, std::size_t n) {
    return Parameter<S>(std::move(name), NDArray<S>(Shape{n}));
  }
  static Parameter<S> ones(std::string name, std::size_t n) {
    return Parameter<S>(std::move(name), NDArray<S>(Shape{n}, S{1}));
  }

 private:
  Rng rng_;
  double std_;
};

template <typename S>
SubEncoder<S> build_sub_encoder(Initializer<S>& init, const std::string& prefix, std::size_t in_dim,
                                const EncoderConfig& cfg) {
  SubEncoder<S> head;
  for (std::size_t i = 0; i < cfg.sub_encoder_depth; ++i) {
    const std::string tag = prefix + ".fc" + std::to_string(i);
    if (i > 0) {
      head.norm_gammas.push_back(Initializer<S>::ones(prefix + ".norm" + std::to_string(i) + ".gamma", cfg.embed_dim));
      head.norm_betas.push_back(Initializer<S>::zeros(prefix + ".norm" + std::to_string(i) + ".beta", cfg.embed_dim));
    }
    head.weights.push_back(init.weight(tag + ".weight", {i == 0 ? in_dim : cfg.embed_dim, cfg.embed_dim}));
    head.biases.push_back(Initializer<S>::zeros(tag + ".bias", cfg.embed_dim));
  }
  return head;
}

}  // namespace detail

// Channel width of the stem: the width of the first stage that has blocks.
inline std::size_t stem_width(const EncoderConfig& cfg) {
  for (std::size_t s = 0; s < 4; ++s)
    if (cfg.stage_ratio[s] > 0) return cfg.stage_widths[s];
  return cfg.stage_widths[0];
}

// Temporal extent after the stem and after each stage.
inline std::vector<std::size_t> stage_time_extents(const EncoderConfig& cfg) {
  std::vector<std::size_t> out;
  std::size_t t = (cfg.input_frames + cfg.stem_patch - 1) / cfg.stem_patch;
  out.push_back(t);
  bool first = true;
  for (std::size_t s = 0; s < 4; ++s) {
    if (cfg.stage_ratio[s] == 0) {
      out.push_back(t);
      continue;
    }
    if (!first) t = (t + 1) / 2;
    first = false;
    out.push_back(t);
  }
  return out;
}

// Deterministic under seed: weights truncated-normal(init_std), biases zero,
// LayerNorm gamma one, GRN gamma = beta = 0.
template <typename S>
EncoderParams<S> build_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  for (std::size_t t : stage_time_extents(cfg))
    if (t == 0) throw std::invalid_argument("EncoderConfig: non-positive temporal extent");

  detail::Initializer<S> init(seed, cfg.init_std);
  using I = detail::Initializer<S>;
  EncoderParams<S> p;
  p.config = cfg;
  auto& tr = p.trunk;
  const std::size_t w0 = stem_width(cfg);
  tr.stem_w = init.weight("trunk.stem.weight", {cfg.stem_patch, cfg.n_mels, w0});
  tr.stem_b = I::zeros("trunk.stem.bias", w0);
  tr.stem_norm_g = I::ones("trunk.stem_norm.gamma", w0);
  tr.stem_norm_b = I::zeros("trunk.stem_norm.beta", w0);

  std::size_t width = w0;
  bool first = true;
  for (std::size_t s = 0; s < 4; ++s) {
    Stage<S> st;
    const std::string sp = "trunk.stage" + std::to_string(s);
    if (cfg.stage_ratio[s] > 0) {
      const std::size_t out_w = cfg.stage_widths[s];
      if (!first) {
        st.has_downsample = true;
        st.down.norm_g = I::ones(sp + ".down.norm.gamma", width);
        st.down.norm_b = I::zeros(sp + ".down.norm.beta", width);
        st.down.conv_w = init.weight(sp + ".down.conv.weight", {2, width, out_w});
        st.down.conv_b = I::zeros(sp + ".down.conv.bias", out_w);
        width = out_w;
      }
      first = false;
      const std::size_t hidden = cfg.expansion_factor * width;
      for (std::size_t b = 0; b < cfg.stage_ratio[s]; ++b) {
        const std::string bp = sp + ".block" + std::to_string(b);
        Block<S> blk;
        blk.dw1_w = init.weight(bp + ".dw1.weight", {cfg.kernel_size, width});
        blk.dw1_b = I::zeros(bp + ".dw1.bias", width);
        blk.dw2_w = init.weight(bp + ".dw2.weight", {cfg.kernel_size, width});
        blk.dw2_b = I::zeros(bp + ".dw2.bias", width);
        blk.norm_g = I::ones(bp + ".norm.gamma", width);
        blk.norm_b = I::zeros(bp + ".norm.beta", width);
        blk.expand_w = init.weight(bp + ".expand.weight", {width, hidden});
        blk.expand_b = I::zeros(bp + ".expand.bias", hidden);
        blk.grn_g = I::zeros(bp + ".grn.gamma", hidden);
        blk.grn_b = I::zeros(bp + ".grn.beta", hidden);
        blk.project_w = init.weight(bp + ".project.weight", {hidden, width});
        blk.project_b = I::zeros(bp + ".project.bias", width);
        st.blocks.push_back(std::move(blk));
      }
    }
    tr.stages.push_back(std::move(st));
  }
  tr.out_norm_g = I::ones("trunk.out_norm.gamma", width);
  tr.out_norm_b = I::zeros("trunk.out_norm.beta", width);

  p.keyword = detail::build_sub_encoder(init, "keyword", width, cfg);
  p.voiceprint = detail::build_sub_encoder(init, "voiceprint", width, cfg);
  return p;
}

template <typename S>
struct EmbeddingVars {
  Var<S> keyword;     // [N, E], unit rows
  Var<S> voiceprint;  // [N, E], unit rows
};

namespace detail {

// Mutable parameters become differentiable leaves, const ones plain constants.
template <typename S>
Var<S> bind(Tape<S>& tape, Parameter<S>& p) {
  return tape.param(p);
}
template <typename S>
Var<S> bind(Tape<S>& tape, const Parameter<S>& p) {
  return tape.constant(p.value);
}

template <typename S, typename Head>
Var<S> run_sub_encoder(Tape<S>& tape, Head& head, Var<S> x, S eps) {
  for (std::size_t i = 0; i < head.weights.size(); ++i) {
    if (i > 0) {
      x = layer_norm(x, bind(tape, head.norm_gammas[i - 1]), bind(tape, head.norm_betas[i - 1]), eps);
      x = gelu(x);
    }
    x = pointwise_linear(x, bind(tape, head.weights[i]), std::optional(bind(tape, head.biases[i])));
  }
  return l2_normalize(x);
}

}  // namespace detail

// x: [N, T, n_mels] (or [T, n_mels]) bound on `tape`. Params may be const
// (inference) or mutable (training, gradients recorded).
template <typename S, typename Params>
  requires std::same_as<std::remove_const_t<Params>, EncoderParams<S>>
EmbeddingVars<S> encoder_forward(Tape<S>& tape, Params& params, Var<S> x) {
  const auto& cfg = params.config;
  if (x.value().channels() != cfg.n_mels) {
    throw DimensionError("encoder: feature dimension " + std::to_string(x.value().channels()) +
                         " != configured " + std::to_string(cfg.n_mels));
  }
  if (x.shape().size() == 2) x = tape.constant(x.value().reshaped({1, x.shape()[0], x.shape()[1]}));
  const S eps = static_cast<S>(cfg.norm_eps);
  using detail::bind;
  auto& tr = params.trunk;
  Var<S> h = conv_temporal(x, bind(tape, tr.stem_w), cfg.stem_patch, std::optional(bind(tape, tr.stem_b)));
  h = layer_norm(h, bind(tape, tr.stem_norm_g), bind(tape, tr.stem_norm_b), eps);
  for (auto& st : tr.stages) {
    if (st.has_downsample) {
      h = layer_norm(h, bind(tape, st.down.norm_g), bind(tape, st.down.norm_b), eps);
      h = conv_temporal(h, bind(tape, st.down.conv_w), 2, std::optional(bind(tape, st.down.conv_b)));
    }
    for (auto& b : st.blocks) {
      Var<S> y = depthwise_conv_temporal(h, bind(tape, b.dw1_w), 1, std::optional(bind(tape, b.dw1_b)));
      y = depthwise_conv_temporal(y, bind(tape, b.dw2_w), 1, std::optional(bind(tape, b.dw2_b)));
      y = layer_norm(y, bind(tape, b.norm_g), bind(tape, b.norm_b), eps);
      y = pointwise_linear(y, bind(tape, b.expand_w), std::optional(bind(tape, b.expand_b)));
      y = gelu(y);
      y = grn(y, bind(tape, b.grn_g), bind(tape, b.grn_b));
      y = pointwise_linear(y, bind(tape, b.project_w), std::optional(bind(tape, b.project_b)));
      h = add(h, y);
    }
  }
  Var<S> pooled = mean_time(h);
  pooled = layer_norm(pooled, bind(tape, tr.out_norm_g), bind(tape, tr.out_norm_b), eps);
  return {detail::run_sub_encoder(tape, params.keyword, pooled, eps),
          detail::run_sub_encoder(tape, params.voiceprint, pooled, eps)};
}

// Stacks feature matrices into one [N, T, F] batch (all must share T and F).
template <typename S>
NDArray<S> stack_features(std::span<const FeatureMatrix* const> items) {
  if (items.empty()) throw DimensionError("stack_features: empty batch");
  const std::size_t t = items[0]->frames.extent(0), f = items[0]->frames.extent(1);
  NDArray<S> out(Shape{items.size(), t, f});
  for (std::size_t n = 0; n < items.size(); ++n) {
    const auto& fr = items[n]->frames;
    if (fr.shape() != Shape{t, f}) throw DimensionError("stack_features: ragged batch");
    for (std::size_t i = 0; i < fr.size(); ++i) out[n * t * f + i] = static_cast<S>(fr[i]);
  }
  return out;
}

struct EmbeddingPair {
  std::vector<double> keyword;
  std::vector<double> voiceprint;
};

// Inference-only embedding of a batch of utterances.
template <typename S>
std::vector<EmbeddingPair> embed_batch(const EncoderParams<S>& params, std::span<const FeatureMatrix* const> items) {
  Tape<S> tape;
  Var<S> x = tape.constant(stack_features<S>(items));
  const auto out = encoder_forward(tape, params, x);
  const std::size_t e = params.config.embed_dim;
  std::vector<EmbeddingPair> res(items.size());
  for (std::size_t n = 0; n < items.size(); ++n) {
    res[n].keyword.assign(out.keyword.value().data().begin() + static_cast<std::ptrdiff_t>(n * e),
                          out.keyword.value().data().begin() + static_cast<std::ptrdiff_t>((n + 1) * e));
    res[n].voiceprint.assign(out.voiceprint.value().data().begin() + static_cast<std::ptrdiff_t>(n * e),
                             out.voiceprint.value().data().begin() + static_cast<std::ptrdiff_t>((n + 1) * e));
  }
  return res;
}

template <typename S>
EmbeddingPair embed(const EncoderParams<S>& params, const FeatureMatrix& x) {
  const FeatureMatrix* one[] = {&x};
  return embed_batch(params, std::span<const FeatureMatrix* const>(one))[0];
}

template <typename S>
std::size_t count_params(std::span<Parameter<S>* const> params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->size();
  return n;
}

template <typename S>
std::size_t count_params(EncoderParams<S>& params) {
  const auto all = params.all_params();
  return count_params<S>(all);
}

// ---- static profile ----------------------------------------------------------
//
// FLOP convention: one multiply-accumulate of a convolution or linear layer
// counts as one FLOP. Normalization, activation, GRN, pooling and residual
// additions are not counted.

struct LayerCost {
  std::string name;
  std::size_t params = 0;
  std::size_t flops = 0;
};

struct ProfileReport {
  std::vector<LayerCost> layers;

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.params;
    return n;
  }
  std::size_t total_flops() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.flops;
    return n;
  }
};

inline ProfileReport profile_encoder(const EncoderConfig& cfg) {
  cfg.validate();
  ProfileReport r;
  const std::size_t k = cfg.kernel_size, e = cfg.embed_dim;
  std::size_t t = (cfg.input_frames + cfg.stem_patch - 1) / cfg.stem_patch;
  std::size_t width = stem_width(cfg);
  r.layers.push_back({"stem.conv", cfg.stem_patch * cfg.n_mels * width + width,
                      t * cfg.stem_patch * cfg.n_mels * width});
  r.layers.push_back({"stem.norm", 2 * width, 0});
  bool first = true;
  for (std::size_t s = 0; s < 4; ++s) {
    if (cfg.stage_ratio[s] == 0) continue;
    const std::string sp = "stage" + std::to_string(s);
    if (!first) {
      const std::size_t out_w = cfg.stage_widths[s];
      t = (t + 1) / 2;
      r.layers.push_back({sp + ".down.norm", 2 * width, 0});
      r.layers.push_back({sp + ".down.conv", 2 * width * out_w + out_w, t * 2 * width * out_w});
      width = out_w;
    }
    first = false;
    const std::size_t hidden = cfg.expansion_factor * width;
    for (std::size_t b = 0; b < cfg.stage_ratio[s]; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      r.layers.push_back({bp + ".dw1", k * width + width, t * k * width});
      r.layers.push_back({bp + ".dw2", k * width + width, t * k * width});
      r.layers.push_back({bp + ".norm", 2 * width, 0});
      r.layers.push_back({bp + ".expand", width * hidden + hidden, t * width * hidden});
      r.layers.push_back({bp + ".grn", 2 * hidden, 0});
      r.layers.push_back({bp + ".project", hidden * width + width, t * hidden * width});
    }
  }
  r.layers.push_back({"pool.norm", 2 * width, 0});
  for (const char* head : {"keyword", "voiceprint"}) {
    for (std::size_t i = 0; i < cfg.sub_encoder_depth; ++i) {
      const std::string hp = std::string(head) + ".fc" + std::to_string(i);
      const std::size_t in = i == 0 ? width : e;
      if (i > 0) r.layers.push_back({std::string(head) + ".norm" + std::to_string(i), 2 * e, 0});
      r.layers.push_back({hp, in * e + e, in * e});
    }
  }
  return r;
}

inline std::size_t count_flops(const EncoderConfig& cfg) { return profile_encoder(cfg).total_flops(); }

}  // namespace pcovkws
