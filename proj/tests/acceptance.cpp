// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Tolerances and time budgets are fixed below.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pcovkws/commands.hpp"
#include "testing.hpp"

using namespace pcovkws;
namespace fs = std::filesystem;

namespace {

// criterion 1
constexpr double kTargetParams = 198000.0, kParamTol = 0.02;
constexpr double kTargetFlops = 1.13e6, kFlopTol = 0.05;
// criterion 2
constexpr double kGradRelTol = 1e-4, kFdStep = 1e-6;
// criterion 3
constexpr double kOrthoTol = 1e-6;
constexpr int kPcgradPairs = 1000;
// criterion 4
constexpr int kMetricSets = 100;
constexpr std::size_t kMaxTrials = 1000;
constexpr double kAucTol = 1e-9;
// criterion 5
constexpr double kOvMax = 0.10, kSvMax = 0.15, kChanceEer = 0.5, kPcovGain = 0.20;
// time budgets, seconds
constexpr double kBudget[9] = {0, 1, 60, 5, 30, 600, 60, 10, 120};

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += "FAILED " + what;
    }
  }
  void note(const std::string& s) {
    if (!detail.empty()) detail += "; ";
    detail += s;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

unsigned worker_threads() { return std::max(1u, std::min(8u, std::thread::hardware_concurrency())); }

// ---- 1 -------------------------------------------------------------------------

Outcome model_shape() {
  Outcome o;
  const auto rep = profile_encoder(EncoderConfig{});
  const double p = static_cast<double>(rep.total_params()), f = static_cast<double>(rep.total_flops());
  auto built = build_encoder<double>(EncoderConfig{}, 0);
  o.require(count_params(built) == rep.total_params(), "profile params equal built params");
  o.require(std::abs(p / kTargetParams - 1) <= kParamTol, "params within 2% of 198k");
  o.require(std::abs(f / kTargetFlops - 1) <= kFlopTol, "FLOPs within 5% of 1.13M");
  o.note("params " + fmt("%.0f", p) + " (" + fmt("%+.2f%%", 100 * (p / kTargetParams - 1)) + "), flops " +
         fmt("%.0f", f) + " (" + fmt("%+.2f%%", 100 * (f / kTargetFlops - 1)) + ")");
  return o;
}

// ---- 2 -------------------------------------------------------------------------

using Fn = std::function<Var<double>(Tape<double>&)>;

// Worst ratio |analytic - cd| / (rtol max(|analytic|, |cd|) + atol) over the
// entries of p; below 1 passes. atol = 10 eps |L| / h is the rounding noise of
// the central difference itself.
double loss_fd_ratio(const Fn& f, Parameter<double>& p) {
  p.zero_grad();
  double loss = 0;
  {
    Tape<double> t;
    auto l = f(t);
    loss = l.item();
    t.backward(l);
  }
  const NDArray<double> analytic = p.grad;
  p.zero_grad();
  auto eval = [&] {
    Tape<double> t;
    return f(t).item();
  };
  const double atol = 10 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(loss)) / kFdStep;
  double worst = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p.value[i];
    p.value[i] = orig + kFdStep;
    const double up = eval();
    p.value[i] = orig - kFdStep;
    const double down = eval();
    p.value[i] = orig;
    const double cd = (up - down) / (2 * kFdStep);
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - cd) / (kGradRelTol * std::max(std::abs(a), std::abs(cd)) + atol));
  }
  return worst;
}

Outcome gradient_fidelity() {
  Outcome o;
  Rng rng(2024);
  using pcovkws::testing::random_param;
  double worst = 0;
  std::size_t checks = 0;
  auto check = [&](const std::string& op, const std::function<Var<double>(Tape<double>&)>& f, Shape out,
                   std::initializer_list<Parameter<double>*> params) {
    const auto w = pcovkws::testing::random_array(std::move(out), rng);
    const Fn loss = [&, w](Tape<double>& t) { return pcovkws::testing::probe(f(t), w); };
    for (auto* p : params) {
      const double e = finite_diff_check<double>(loss, *p, kFdStep);
      worst = std::max(worst, e);
      ++checks;
      o.require(e < kGradRelTol, op + " d/d" + p->name + " rel err " + fmt("%.2e", e));
    }
  };

  auto x3 = random_param("x", Shape{2, 9, 3}, rng), cw = random_param("w", Shape{4, 3, 2}, rng),
       cb = random_param("b", Shape{2}, rng);
  check("conv_temporal", [&](Tape<double>& t) { return conv_temporal(t.param(x3), t.param(cw), 2, std::optional(t.param(cb))); },
        Shape{2, 5, 2}, {&x3, &cw, &cb});
  auto dw = random_param("w", Shape{5, 3}, rng), db = random_param("b", Shape{3}, rng);
  check("depthwise_conv_temporal",
        [&](Tape<double>& t) { return depthwise_conv_temporal(t.param(x3), t.param(dw), 1, std::optional(t.param(db))); },
        Shape{2, 9, 3}, {&x3, &dw, &db});
  auto pw = random_param("w", Shape{3, 5}, rng), pb = random_param("b", Shape{5}, rng);
  check("pointwise_linear",
        [&](Tape<double>& t) { return pointwise_linear(t.param(x3), t.param(pw), std::optional(t.param(pb))); },
        Shape{2, 9, 5}, {&x3, &pw, &pb});
  auto x2 = random_param("x", Shape{3, 6}, rng), lg = random_param("g", Shape{6}, rng),
       lb = random_param("b", Shape{6}, rng);
  check("layer_norm", [&](Tape<double>& t) { return layer_norm(t.param(x2), t.param(lg), t.param(lb), 1e-6); },
        Shape{3, 6}, {&x2, &lg, &lb});
  auto xg = random_param("x", Shape{4, 5}, rng, 3.0);
  check("gelu", [&](Tape<double>& t) { return gelu(t.param(xg)); }, Shape{4, 5}, {&xg});
  auto gg = random_param("g", Shape{3}, rng), gb = random_param("b", Shape{3}, rng);
  check("grn", [&](Tape<double>& t) { return grn(t.param(x3), t.param(gg), t.param(gb)); }, Shape{2, 9, 3},
        {&x3, &gg, &gb});
  check("l2_normalize", [&](Tape<double>& t) { return l2_normalize(t.param(x2)); }, Shape{3, 6}, {&x2});
  auto y3 = random_param("y", Shape{2, 9, 3}, rng);
  check("add", [&](Tape<double>& t) { return add(t.param(x3), t.param(y3)); }, Shape{2, 9, 3}, {&x3, &y3});
  check("scale", [&](Tape<double>& t) { return scale(t.param(x3), -0.7); }, Shape{2, 9, 3}, {&x3});
  check("mean_time", [&](Tape<double>& t) { return mean_time(t.param(x3)); }, Shape{2, 3}, {&x3});
  check("sum", [&](Tape<double>& t) { return sum(gelu(t.param(x3))); }, Shape{}, {&x3});
  auto mb = random_param("b", Shape{5, 6}, rng);
  check("matmul_nt", [&](Tape<double>& t) { return matmul_nt(t.param(x2), t.param(mb)); }, Shape{3, 5}, {&x2, &mb});
  check("weighted_sum",
        [&](Tape<double>& t) {
          auto v = t.param(xg);
          std::vector<Var<double>> terms{sum(gelu(v)), sum(scale(v, 2.0))};
          std::vector<double> w{0.3, -1.1};
          return weighted_sum<double>(terms, w);
        },
        Shape{}, {&xg});

  // The full loss on cosine scores of normalized embeddings against a bank.
  // At s = 32 saturated negative terms have gradients near 1e-11, below what
  // a central difference of an O(10) loss resolves, hence the atol term.
  double worst_ratio = 0;
  for (double s : {4.0, 32.0})
    for (double tt : {1.0, 3.0, 5.0})
      for (double lam : {0.5, 0.7}) {
        auto e = random_param("embedding", Shape{4, 8}, rng);
        auto bank = random_param("bank", Shape{5, 8}, rng);
        Parameter<double> bias("bias", NDArray<double>(Shape{1}, std::log(4.0)));
        const std::vector<std::size_t> y{0, 3, 4, 1};
        const LossConfig cfg{tt, lam, s};
        const Fn f = [&](Tape<double>& t) {
          auto z = matmul_nt(l2_normalize(t.param(e)), l2_normalize(t.param(bank)));
          return sphereface2_loss(z, y, cfg, t.param(bias));
        };
        for (auto* p : {&e, &bank, &bias}) {
          const double r = loss_fd_ratio(f, *p);
          worst_ratio = std::max(worst_ratio, r);
          ++checks;
          o.require(r < 1.0, "loss s=" + fmt("%g", s) + " t=" + fmt("%g", tt) + " lambda=" + fmt("%g", lam) +
                                           " d/d" + p->name + " error/tolerance " + fmt("%.2f", r));
        }
      }
  o.note(std::to_string(checks) + " checks; operators worst rel err " + fmt("%.2e", worst) +
         ", loss grid worst error/tolerance " + fmt("%.3f", worst_ratio));
  return o;
}

// ---- 3 -------------------------------------------------------------------------

Outcome pcgrad_correctness() {
  Outcome o;
  Rng rng(3);
  auto draw = [&](std::size_t n, double scale) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
  };
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  double worst = 0;
  std::size_t bad_omega = 0, not_identity = 0;
  for (int i = 0; i < kPcgradPairs; ++i) {
    const std::size_t n = 8 + rng.below(57);
    GradState<double> gs;
    gs.g_k = draw(n, std::pow(10.0, rng.uniform(0, 2)));
    gs.g_v = draw(n, std::pow(10.0, rng.uniform(0, 2)));
    if (dot(gs.g_k, gs.g_v) >= 0)
      for (auto& x : gs.g_v) x = -x;
    const auto out = project_if_conflict(gs);
    const double scale = std::sqrt(dot(gs.g_k, gs.g_k) * dot(gs.g_v, gs.g_v));
    worst = std::max({worst, std::abs(dot(out.g_k, gs.g_v)) / scale, std::abs(dot(out.g_v, gs.g_k)) / scale});
    bad_omega += !(out.omega[0] > 1.0 && out.omega[1] > 1.0);

    GradState<double> agree = gs;
    for (auto& x : agree.g_v) x = -x;
    const auto same = project_if_conflict(agree);
    not_identity += !(same.g_k == agree.g_k && same.g_v == agree.g_v && same.omega == agree.omega);
  }
  o.require(worst <= kOrthoTol, "orthogonality " + fmt("%.2e", worst));
  o.require(bad_omega == 0, std::to_string(bad_omega) + " pairs with omega <= 1");
  o.require(not_identity == 0, std::to_string(not_identity) + " no-conflict pairs altered");

  GradState<double> ex;
  ex.g_k = {1, 0};
  ex.g_v = {-1, 1};
  ex.eps = 1e-300;
  const auto w = project_if_conflict(ex);
  o.require(w.g_k == std::vector<double>{0.5, 0.5} && w.omega[0] == 1.5, "worked example g_k'=(0.5,0.5), omega_k=1.5");
  o.note(std::to_string(kPcgradPairs) + " conflicting + " + std::to_string(kPcgradPairs) +
         " agreeing pairs, worst |g_k'.g_v|/(|g_k||g_v|) " + fmt("%.1e", worst) + ", worked example g_k'=(" +
         fmt("%g", w.g_k[0]) + "," + fmt("%g", w.g_k[1]) + ") omega_k=" + fmt("%g", w.omega[0]));
  return o;
}

// ---- 4 -------------------------------------------------------------------------

struct Rates {
  double far, frr;
};

Rates rates_at(const std::vector<Trial>& trials, double th) {
  double np = 0, nn = 0, fa = 0, fr = 0;
  for (const auto& t : trials) {
    if (t.positive) {
      ++np;
      fr += t.score < th;
    } else {
      ++nn;
      fa += t.score >= th;
    }
  }
  return {fa / nn, fr / np};
}

// Brute force: every distinct score and +inf as a threshold, each counted
// over the whole trial list.
std::pair<double, double> oracle_eer_auc(const std::vector<Trial>& trials) {
  std::set<double> s;
  for (const auto& t : trials) s.insert(t.score);
  std::vector<double> th(s.begin(), s.end());
  th.push_back(std::numeric_limits<double>::infinity());
  std::vector<Rates> r;
  for (double t : th) r.push_back(rates_at(trials, t));
  double eer = 1.0;
  for (std::size_t i = 1; i < r.size(); ++i) {
    const double d = r[i].frr - r[i].far, dp = r[i - 1].frr - r[i - 1].far;
    if (d >= 0) {
      eer = r[i - 1].far + (-dp / (d - dp)) * (r[i].far - r[i - 1].far);
      break;
    }
  }
  double auc = 0;
  for (std::size_t i = 1; i < r.size(); ++i) auc += (r[i - 1].far - r[i].far) * ((1 - r[i - 1].frr) + (1 - r[i].frr)) / 2;
  return {eer, auc};
}

Outcome metric_oracles() {
  Outcome o;
  Rng rng(4);
  std::size_t eer_mismatch = 0, not_invariant = 0;
  double worst_auc = 0;
  for (int i = 0; i < kMetricSets; ++i) {
    const std::size_t np = 1 + rng.below(kMaxTrials / 2), nn = 1 + rng.below(kMaxTrials / 2);
    const double shift = rng.uniform(-1, 2);
    const bool ties = i % 2 == 0;
    std::vector<Trial> t;
    for (std::size_t j = 0; j < np + nn; ++j) {
      const bool pos = j < np;
      double v = (pos ? shift : 0.0) + rng.normal();
      if (ties) v = std::round(v * 8) / 8;
      t.push_back({v, pos});
    }
    const auto [eer, auc] = oracle_eer_auc(t);
    eer_mismatch += compute_eer(t).eer != eer;
    worst_auc = std::max(worst_auc, std::abs(compute_auc(t) - auc));
    auto u = t;
    for (auto& x : u) x.score = std::exp(0.5 * x.score) - 3.0;
    not_invariant += compute_eer(u).eer != compute_eer(t).eer || compute_auc(u) != compute_auc(t);
  }
  o.require(eer_mismatch == 0, std::to_string(eer_mismatch) + " EER mismatches");
  o.require(worst_auc <= kAucTol, "AUC deviation " + fmt("%.1e", worst_auc));
  o.require(not_invariant == 0, std::to_string(not_invariant) + " sets changed under a monotone transform");
  o.note(std::to_string(kMetricSets) + " sets, EER exact, worst AUC deviation " + fmt("%.1e", worst_auc));
  return o;
}

// ---- 5 -------------------------------------------------------------------------

struct TaskEers {
  double ov = 1, sv = 1, pcov = 1, alpha = 0;
};

template <typename S>
TaskEers evaluate_tasks(const PcovModel<S>& model, const FeatureSet& test, const FeatureSet& valid, unsigned threads) {
  TaskEers r;
  EvalOptions opt;
  opt.threads = threads;
  opt.seed = 0;
  opt.task = EvalTask::ovkws;
  r.ov = evaluate(model, test, nullptr, opt).eer;
  opt.task = EvalTask::sv;
  r.sv = evaluate(model, test, nullptr, opt).eer;
  opt.task = EvalTask::pcov;
  const auto p = evaluate(model, test, &valid, opt);
  r.pcov = p.eer;
  r.alpha = p.alpha;
  return r;
}

Outcome toy_training() {
  Outcome o;
  const auto dir = pcovkws::testing::scratch_dir("accept_toy");
  ToyCorpusConfig cc;
  cc.n_keywords = 8;
  cc.n_speakers = 8;
  cc.n_utts_per_cell = 20;
  cc.seed = 0;
  const Manifest m = generate_toy_corpus(dir, cc);

  TrainConfig cfg;
  cfg.optim.epochs = 10;
  const unsigned threads = worker_threads();
  LabelIndex ki(m.keywords()), si(m.speakers());
  const auto train = load_features(m, Split::train, cfg, ki, si, threads);
  const auto valid = load_features(m, Split::valid, cfg, ki, si, threads);
  const auto test = load_features(m, Split::test, cfg, ki, si, threads);
  auto model = build_model<float>(cfg.encoder, 8, 8, cfg.keyword_loss, cfg.speaker_loss, cfg.seed);

  const TaskEers before = evaluate_tasks(model, test, valid, threads);
  const auto sum = train_model(model, cfg, train, nullptr);
  const TaskEers after = evaluate_tasks(model, test, valid, threads);
  fs::remove_all(dir);

  o.require(after.ov < kOvMax, "OV-KWS EER < 10%");
  o.require(after.sv < kSvMax, "SV EER < 15%");
  o.require(after.pcov < kChanceEer, "PCOV EER below chance");
  o.require(before.pcov - after.pcov >= kPcovGain, "PCOV EER >= 20 points below untrained");
  o.note(std::to_string(sum.steps) + " steps; trained EER OV " + fmt("%.2f%%", 100 * after.ov) + ", SV " +
         fmt("%.2f%%", 100 * after.sv) + ", PCOV " + fmt("%.2f%%", 100 * after.pcov) + " (alpha " +
         fmt("%.2f", after.alpha) + "); untrained PCOV " + fmt("%.2f%%", 100 * before.pcov));
  return o;
}

// ---- 6 -------------------------------------------------------------------------

Outcome pcgrad_vs_ew() {
  Outcome o;
  std::size_t worse = 0, conflicts = 0;
  double pc0 = 0, ew0 = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto pc = pcovkws::testing::run_conflicting_tasks(Weighting::pcgrad, seed);
    const auto ew = pcovkws::testing::run_conflicting_tasks(Weighting::ew, seed);
    worse += pc.joint_loss > ew.joint_loss;
    conflicts += pc.conflicts;
    if (seed == 0) {
      pc0 = pc.joint_loss;
      ew0 = ew.joint_loss;
    }
  }
  o.require(conflicts > 0, "objective produced conflicting gradients");
  o.require(worse == 0, std::to_string(worse) + " of 50 seeds with pcgrad loss > ew loss");
  o.note("50 seeds, " + std::to_string(conflicts) + " conflicting steps; seed 0 joint loss pcgrad " +
         fmt("%.3e", pc0) + " vs ew " + fmt("%.3e", ew0));
  return o;
}

// ---- 7 -------------------------------------------------------------------------

Outcome cib_behavior() {
  Outcome o;
  Rng rng(7);
  std::size_t inexact = 0, above_endpoint = 0;
  for (int i = 0; i < 10000; ++i) {
    const double k = rng.uniform(0, 1), v = rng.uniform(0, 1);
    inexact += fuse_cib(k, v, FusionConfig::from_preset(TaskPreset::ovkws)) != k;
    inexact += fuse_cib(k, v, FusionConfig::from_preset(TaskPreset::sv)) != v;
  }
  for (int set = 0; set < 100; ++set) {
    std::vector<FusionTrial> trials;
    const double dk = rng.uniform(0, 0.5), dv = rng.uniform(0, 0.5);
    const std::size_t n = 20 + rng.below(300);
    for (std::size_t i = 0; i < n; ++i) {
      const bool pos = i % 2 == 0;
      trials.push_back({std::clamp(rng.uniform(0, 0.8) + (pos ? dk : 0.0), 0.0, 1.0),
                        std::clamp(rng.uniform(0, 0.8) + (pos ? dv : 0.0), 0.0, 1.0), pos});
    }
    const auto r = grid_search_alpha(trials);
    above_endpoint += !(r.eer <= r.curve.front().second && r.eer <= r.curve.back().second);
  }
  const bool presets = preset_alpha(TaskPreset::pcov) == 0.5 && preset_alpha(TaskPreset::ovkws) == 1.0 &&
                       preset_alpha(TaskPreset::sv) == 0.0;
  o.require(inexact == 0, std::to_string(inexact) + " endpoint fusions not exact");
  o.require(above_endpoint == 0, std::to_string(above_endpoint) + " validation sets where search lost to an endpoint");
  o.require(presets, "presets pcov/ovkws/sv = 0.5/1/0");
  o.note("20000 endpoint fusions exact, 100 validation sets, presets 0.5/1/0");
  return o;
}

// ---- 8 -------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  Outcome o;
  const auto dir = pcovkws::testing::scratch_dir("accept_det");
  ToyCorpusConfig cc;
  cc.n_keywords = 3;
  cc.n_speakers = 3;
  cc.n_utts_per_cell = 10;
  cc.seed = 8;
  generate_toy_corpus(dir / "corpus", cc);

  TrainConfig cfg;
  cfg.encoder.stage_widths = {8, 8, 12, 16};
  cfg.encoder.stage_ratio = {1, 1, 1, 1};
  cfg.encoder.kernel_size = 5;
  cfg.encoder.expansion_factor = 2;
  cfg.encoder.embed_dim = 16;
  cfg.optim.batch_size = 16;
  cfg.optim.epochs = 2;
  std::ofstream(dir / "config.json") << to_json(cfg).dump(2);

  std::ostringstream sink;
  std::string logs[2][2], reports[2][2], ckpts[2][2];
  for (int prec = 0; prec < 2; ++prec)
    for (int run = 0; run < 2; ++run) {
      GlobalOptions g;
      g.config = dir / "config.json";
      g.seed = 11;
      g.precision = prec == 0 ? Precision::f32 : Precision::f64;
      const auto out = dir / ("m" + std::to_string(prec) + std::to_string(run) + ".pcov");
      TrainArgs ta;
      ta.manifest = dir / "corpus" / "manifest.jsonl";
      ta.out = out;
      o.require(cmd_train(g, ta, sink) == kOk, "train exit code");
      logs[prec][run] = slurp(out.string() + ".log.csv");
      ckpts[prec][run] = slurp(out);
      EvalArgs ea;
      ea.manifest = ta.manifest;
      ea.checkpoint = out;
      ea.n_pairs = 400;
      ea.n_enroll = 1;
      ea.det_csv = dir / "det.csv";
      std::ostringstream rep;
      o.require(cmd_eval(g, ea, rep) == kOk, "eval exit code");
      reports[prec][run] = rep.str() + slurp(dir / "det.csv");
    }
  for (int prec = 0; prec < 2; ++prec) {
    const std::string p = prec == 0 ? "f32" : "f64";
    o.require(logs[prec][0] == logs[prec][1], p + " training logs identical");
    o.require(ckpts[prec][0] == ckpts[prec][1], p + " checkpoints identical");
    o.require(reports[prec][0] == reports[prec][1], p + " eval reports identical");
    const Checkpoint ck = deserialize(ckpts[prec][0]);
    o.require(serialize(ck) == ckpts[prec][0], p + " checkpoint round trip");
  }
  o.note("f32 and f64: train logs, checkpoints, eval reports and DET CSVs identical across runs; round trip bit-exact");
  fs::remove_all(dir);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"model shape", model_shape},
      {"gradient fidelity", gradient_fidelity},
      {"pcgrad correctness", pcgrad_correctness},
      {"metric oracle equivalence", metric_oracles},
      {"end-to-end toy training", toy_training},
      {"pcgrad vs ew", pcgrad_vs_ew},
      {"CIB behavior", cib_behavior},
      {"determinism and persistence", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > kBudget[i + 1]) o.require(false, "runtime " + fmt("%.1f", secs) + " s over " + fmt("%.0f", kBudget[i + 1]) + " s budget");
    failed += !o.pass;
    std::printf("criterion %zu: %s  %s: %s [%.2f s]\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
