#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "pcovkws/encoder.hpp"
#include "pcovkws/heads.hpp"
#include "testing.hpp"

using namespace pcovkws;
using pcovkws::testing::random_array;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.n_mels = 8;
  c.input_frames = 16;
  c.stem_patch = 2;
  c.stage_ratio = {1, 1, 2, 1};
  c.stage_widths = {4, 4, 6, 8};
  c.kernel_size = 3;
  c.expansion_factor = 2;
  c.embed_dim = 6;
  c.init_std = 0.3;
  return c;
}

// GRN gamma/beta start at zero, which hides the GRN path from gradients and
// perturbation tests; give them values.
template <typename S>
void wake_grn(EncoderParams<S>& p, Rng& rng) {
  for (auto& st : p.trunk.stages)
    for (auto& b : st.blocks) {
      for (auto& v : b.grn_g.value.data()) v = static_cast<S>(rng.uniform(-0.5, 0.5));
      for (auto& v : b.grn_b.value.data()) v = static_cast<S>(rng.uniform(-0.1, 0.1));
    }
}

std::vector<double> keyword_of(EmbeddingVars<double> e) {
  auto d = e.keyword.value().data();
  return {d.begin(), d.end()};
}
std::vector<double> voice_of(EmbeddingVars<double> e) {
  auto d = e.voiceprint.value().data();
  return {d.begin(), d.end()};
}

struct Pair {
  std::vector<double> k, v;
};

Pair run(EncoderParams<double>& p, const NDArray<double>& x) {
  Tape<double> tape;
  auto e = encoder_forward(tape, std::as_const(p), tape.constant(x));
  return {keyword_of(e), voice_of(e)};
}

std::vector<Shape> shapes(const std::vector<Parameter<double>*>& ps) {
  std::vector<Shape> out;
  for (auto* p : ps) out.push_back(p->value.shape());
  return out;
}

}  // namespace

TEST(EncoderBuild, SameSeedIsBitIdentical) {
  auto a = build_encoder<double>(EncoderConfig{}, 42);
  auto b = build_encoder<double>(EncoderConfig{}, 42);
  auto c = build_encoder<double>(EncoderConfig{}, 43);
  auto pa = a.all_params(), pb = b.all_params(), pc = c.all_params();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    for (std::size_t j = 0; j < pa[i]->size(); ++j) {
      ASSERT_EQ(pa[i]->value[j], pb[i]->value[j]);
      any_diff |= pa[i]->value[j] != pc[i]->value[j];
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST(EncoderBuild, UniqueNamesAndInitialization) {
  auto p = build_encoder<double>(EncoderConfig{}, 1);
  std::set<std::string> names;
  for (auto* q : p.all_params()) EXPECT_TRUE(names.insert(q->name).second) << q->name;
  for (auto& st : p.trunk.stages)
    for (auto& b : st.blocks) {
      for (double v : b.grn_g.value.data()) EXPECT_EQ(v, 0.0);
      for (double v : b.grn_b.value.data()) EXPECT_EQ(v, 0.0);
      for (double v : b.expand_b.value.data()) EXPECT_EQ(v, 0.0);
      for (double v : b.expand_w.value.data()) EXPECT_LE(std::abs(v), 0.04);
    }
}

TEST(EncoderBuild, HeadsHaveIdenticalShapesAndShareNothing) {
  auto p = build_encoder<double>(EncoderConfig{}, 2);
  EXPECT_EQ(shapes(p.keyword_params()), shapes(p.voiceprint_params()));
  auto k = p.keyword_params(), v = p.voiceprint_params();
  for (auto* a : k)
    for (auto* b : v) EXPECT_NE(a, b);
  for (auto* a : k) EXPECT_EQ(a->name.rfind("keyword.", 0), 0u);
  for (auto* a : v) EXPECT_EQ(a->name.rfind("voiceprint.", 0), 0u);
}

TEST(EncoderBuild, RejectsBadConfigs) {
  auto c = small_config();
  c.kernel_size = 4;
  EXPECT_THROW(build_encoder<double>(c, 0), std::invalid_argument);
  c = small_config();
  c.embed_dim = 0;
  EXPECT_THROW(build_encoder<double>(c, 0), std::invalid_argument);
  c = small_config();
  c.input_frames = 0;
  EXPECT_THROW(build_encoder<double>(c, 0), std::invalid_argument);
}

TEST(EncoderCounts, DefaultParamsAndFlopsNearTargets) {
  auto p = build_encoder<float>(EncoderConfig{}, 0);
  const double params = static_cast<double>(count_params(p));
  EXPECT_NEAR(params / 198000.0, 1.0, 0.02);
  EXPECT_EQ(count_params(p), profile_encoder(EncoderConfig{}).total_params());
  const double flops = static_cast<double>(count_flops(EncoderConfig{}));
  EXPECT_NEAR(flops / 1.13e6, 1.0, 0.05);
}

TEST(EncoderCounts, SingleLinearLayer) {
  Parameter<double> w("w", NDArray<double>(Shape{3, 2}));
  Parameter<double> b("b", NDArray<double>(Shape{2}));
  std::vector<Parameter<double>*> ps{&w, &b};
  EXPECT_EQ(count_params<double>(ps), 8u);
}

TEST(EncoderCounts, ZeroDepthIsStemOnly) {
  EncoderConfig c;
  c.stage_ratio = {0, 0, 0, 0};
  const auto r = profile_encoder(c);
  // stem: ceil(98 / 4) outputs, each a 4 x 40 -> 28 patch projection
  const std::size_t stem = 25 * 4 * 40 * 28;
  const std::size_t heads = 2 * (28 * 128 + 128 * 128);
  EXPECT_EQ(r.total_flops(), stem + heads);
  std::size_t trunk = 0;
  for (const auto& l : r.layers)
    if (l.name.rfind("keyword", 0) != 0 && l.name.rfind("voiceprint", 0) != 0) trunk += l.flops;
  EXPECT_EQ(trunk, stem);
  auto p = build_encoder<double>(c, 0);
  EXPECT_EQ(count_params(p), r.total_params());
}

TEST(EncoderCounts, EmbedDimDoublingParamDelta) {
  EncoderConfig a, b;
  b.embed_dim = 2 * a.embed_dim;
  auto head = [](std::size_t c, std::size_t e) { return (c * e + e) + 2 * e + (e * e + e); };
  const std::size_t delta = 2 * (head(76, 256) - head(76, 128));
  auto pa = build_encoder<double>(a, 0);
  auto pb = build_encoder<double>(b, 0);
  EXPECT_EQ(count_params(pb) - count_params(pa), delta);
}

TEST(EncoderCounts, DoublingWidthsQuadruplesPointwiseFlops) {
  EncoderConfig a, b;
  for (std::size_t s = 0; s < 4; ++s) b.stage_widths[s] = 2 * a.stage_widths[s];
  auto pointwise = [](const ProfileReport& r) {
    std::size_t n = 0;
    for (const auto& l : r.layers)
      if (l.name.ends_with(".expand") || l.name.ends_with(".project")) n += l.flops;
    return n;
  };
  const double ratio = static_cast<double>(pointwise(profile_encoder(b))) / static_cast<double>(pointwise(profile_encoder(a)));
  EXPECT_NEAR(ratio, 4.0, 1e-12);
}

TEST(EncoderForward, UnitNormDeterministicFinite) {
  Rng rng(3);
  auto p = build_encoder<double>(small_config(), 5);
  wake_grn(p, rng);
  auto x = random_array(Shape{3, 16, 8}, rng, 2.0);
  auto a = run(p, x), b = run(p, x);
  EXPECT_EQ(a.k, b.k);
  EXPECT_EQ(a.v, b.v);
  for (std::size_t n = 0; n < 3; ++n) {
    double sk = 0, sv = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      sk += a.k[n * 6 + i] * a.k[n * 6 + i];
      sv += a.v[n * 6 + i] * a.v[n * 6 + i];
    }
    EXPECT_NEAR(std::sqrt(sk), 1.0, 1e-6);
    EXPECT_NEAR(std::sqrt(sv), 1.0, 1e-6);
  }
  auto z = run(p, NDArray<double>(Shape{1, 16, 8}));
  for (double v : z.k) EXPECT_TRUE(std::isfinite(v));
  for (double v : z.v) EXPECT_TRUE(std::isfinite(v));

  auto full = build_encoder<float>(EncoderConfig{}, 9);
  FeatureMatrix fm;
  fm.frames = random_array(Shape{98, 40}, rng);
  auto e = embed(full, fm);
  EXPECT_EQ(e.keyword.size(), 128u);
  auto e2 = embed(full, fm);
  EXPECT_EQ(e.keyword, e2.keyword);
  EXPECT_EQ(e.voiceprint, e2.voiceprint);
}

TEST(EncoderForward, FeatureDimensionMismatch) {
  auto p = build_encoder<double>(small_config(), 0);
  Tape<double> tape;
  EXPECT_THROW(encoder_forward(tape, std::as_const(p), tape.constant(NDArray<double>(Shape{1, 16, 9}))), DimensionError);
}

TEST(EncoderForward, HeadIsolationAndSharedTrunk) {
  Rng rng(4);
  auto p = build_encoder<double>(small_config(), 6);
  wake_grn(p, rng);
  auto x = random_array(Shape{2, 16, 8}, rng);
  const auto base = run(p, x);

  p.keyword.weights[0].value[0] += 0.1;
  auto kw = run(p, x);
  EXPECT_NE(kw.k, base.k);
  EXPECT_EQ(kw.v, base.v);
  p.keyword.weights[0].value[0] -= 0.1;

  p.voiceprint.biases[1].value[2] += 0.1;
  auto vp = run(p, x);
  EXPECT_EQ(vp.k, base.k);
  EXPECT_NE(vp.v, base.v);
  p.voiceprint.biases[1].value[2] -= 0.1;

  p.trunk.stem_w.value[3] += 0.1;
  auto tr = run(p, x);
  EXPECT_NE(tr.k, base.k);
  EXPECT_NE(tr.v, base.v);
}

TEST(EncoderGradients, HeadIsolationAndTrunkCoupling) {
  Rng rng(5);
  auto p = build_encoder<double>(small_config(), 7);
  wake_grn(p, rng);
  auto x = random_array(Shape{2, 16, 8}, rng);
  auto wk = random_array(Shape{2, 6}, rng), wv = random_array(Shape{2, 6}, rng);
  Tape<double> tape;
  auto e = encoder_forward(tape, p, tape.constant(x));
  std::array<Var<double>, 2> losses{pcovkws::testing::probe(e.keyword, wk), pcovkws::testing::probe(e.voiceprint, wv)};
  auto params = p.all_params();
  auto g = tape.backward_each(std::span<const Var<double>>(losses), std::span<Parameter<double>* const>(params));
  const std::size_t nt = p.trunk_params().size(), nk = p.keyword_params().size();
  auto norm = [](const NDArray<double>& a) {
    double s = 0;
    for (double v : a.data()) s += v * v;
    return s;
  };
  for (std::size_t i = nt + nk; i < params.size(); ++i) EXPECT_EQ(norm(g[0][i]), 0.0) << params[i]->name;
  for (std::size_t i = nt; i < nt + nk; ++i) EXPECT_EQ(norm(g[1][i]), 0.0) << params[i]->name;
  std::size_t nonzero_k = 0, nonzero_v = 0;
  for (std::size_t i = 0; i < nt; ++i) {
    nonzero_k += norm(g[0][i]) > 0;
    nonzero_v += norm(g[1][i]) > 0;
  }
  EXPECT_GT(nonzero_k, nt / 2);
  EXPECT_GT(nonzero_v, nt / 2);
  EXPECT_GT(norm(g[0][0]), 0.0);
  EXPECT_GT(norm(g[1][0]), 0.0);
}

TEST(EncoderGradients, FiniteDifferencesOnSmallEncoder) {
  Rng rng(6);
  auto p = build_encoder<double>(small_config(), 8);
  wake_grn(p, rng);
  auto x = random_array(Shape{2, 16, 8}, rng);
  auto wk = random_array(Shape{2, 6}, rng), wv = random_array(Shape{2, 6}, rng);
  auto f = std::function<Var<double>(Tape<double>&)>([&](Tape<double>& t) {
    auto e = encoder_forward(t, p, t.constant(x));
    std::array<Var<double>, 2> parts{pcovkws::testing::probe(e.keyword, wk), pcovkws::testing::probe(e.voiceprint, wv)};
    std::array<double, 2> w{1.0, 0.5};
    return weighted_sum<double>(parts, w);
  });
  for (auto* q : {&p.trunk.stem_w, &p.trunk.stages[1].down.conv_w, &p.trunk.stages[2].blocks[1].dw1_w,
                  &p.trunk.stages[2].blocks[1].grn_g, &p.trunk.stages[3].blocks[0].project_w, &p.trunk.out_norm_g,
                  &p.keyword.weights[1], &p.voiceprint.norm_gammas[0]}) {
    EXPECT_LT(finite_diff_check<double>(f, *q, 1e-6), 1e-4) << q->name;
  }
}
