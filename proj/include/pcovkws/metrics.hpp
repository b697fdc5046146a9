#pragma once

// Verification metrics and trial construction.
//
// Decision rule everywhere: accept iff score >= threshold. At threshold th,
//   FAR(th) = #{negatives >= th} / n_neg     (false positive rate)
//   FRR(th) = #{positives <  th} / n_pos     (false negative rate)
// The sweep visits every distinct score in ascending order followed by +inf
// (accept nothing). EER is read off the first sweep point where FRR >= FAR,
// interpolating linearly along the segment from the previous point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iterator>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pcovkws/errors.hpp"
#include "pcovkws/random.hpp"

namespace pcovkws {

struct Trial {
  double score = 0.0;
  bool positive = false;
  std::size_t keyword = 0;  // audit metadata
  std::size_t speaker = 0;
};

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

struct DetPoint {
  double threshold;
  double fpr;
  double fnr;
};

using DetCurve = std::vector<DetPoint>;

namespace detail {

struct SplitScores {
  std::vector<double> pos, neg;
};

inline SplitScores split_sorted(std::span<const Trial> trials, const char* who) {
  SplitScores s;
  for (const auto& t : trials) {
    if (!std::isfinite(t.score)) throw std::invalid_argument(std::string(who) + ": non-finite score");
    (t.positive ? s.pos : s.neg).push_back(t.score);
  }
  if (s.pos.empty() || s.neg.empty()) {
    throw DegenerateInputError(std::string(who) + ": need at least one positive and one negative trial");
  }
  std::sort(s.pos.begin(), s.pos.end());
  std::sort(s.neg.begin(), s.neg.end());
  return s;
}

// Full sweep: one point per distinct score (ascending) plus the +inf point.
inline DetCurve sweep(const SplitScores& s) {
  std::vector<double> th;
  th.reserve(s.pos.size() + s.neg.size());
  std::merge(s.pos.begin(), s.pos.end(), s.neg.begin(), s.neg.end(), std::back_inserter(th));
  th.erase(std::unique(th.begin(), th.end()), th.end());
  const double npos = static_cast<double>(s.pos.size());
  const double nneg = static_cast<double>(s.neg.size());
  DetCurve out;
  out.reserve(th.size() + 1);
  std::size_t pos_lt = 0, neg_lt = 0;
  for (double t : th) {
    while (pos_lt < s.pos.size() && s.pos[pos_lt] < t) ++pos_lt;
    while (neg_lt < s.neg.size() && s.neg[neg_lt] < t) ++neg_lt;
    out.push_back({t, static_cast<double>(s.neg.size() - neg_lt) / nneg, static_cast<double>(pos_lt) / npos});
  }
  out.push_back({std::numeric_limits<double>::infinity(), 0.0, 1.0});
  return out;
}

}  // namespace detail

// Locates the FAR/FRR crossing on a full sweep (see header comment).
inline EerResult eer_from_sweep(const DetCurve& pts) {
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double d = pts[i].fnr - pts[i].fpr;
    if (d >= 0.0) {
      const double dp = pts[i - 1].fnr - pts[i - 1].fpr;
      const double f = -dp / (d - dp);
      const double eer = pts[i - 1].fpr + f * (pts[i].fpr - pts[i - 1].fpr);
      const double th = std::isfinite(pts[i].threshold)
                            ? pts[i - 1].threshold + f * (pts[i].threshold - pts[i - 1].threshold)
                            : pts[i - 1].threshold;
      return {eer, th};
    }
  }
  return {1.0, pts.back().threshold};
}

inline EerResult compute_eer(std::span<const Trial> trials) {
  return eer_from_sweep(detail::sweep(detail::split_sorted(trials, "compute_eer")));
}

// Mann-Whitney statistic from midranks: P(pos > neg) + 0.5 P(pos == neg).
inline double compute_auc(std::span<const Trial> trials) {
  const auto s = detail::split_sorted(trials, "compute_auc");
  std::vector<std::pair<double, bool>> all;
  all.reserve(trials.size());
  for (double v : s.pos) all.emplace_back(v, true);
  for (double v : s.neg) all.emplace_back(v, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < all.size() && all[j].first == all[i].first) {
      pos_in_group += all[j].second ? 1 : 0;
      ++j;
    }
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    rank_sum += midrank * static_cast<double>(pos_in_group);
    i = j;
  }
  const double np = static_cast<double>(s.pos.size()), nn = static_cast<double>(s.neg.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// Subsamples the full sweep to at most n_points, always keeping both
// endpoints (accept-all and accept-nothing).
inline DetCurve det_curve(std::span<const Trial> trials, std::size_t n_points) {
  if (n_points < 2) throw std::invalid_argument("det_curve: need at least two points");
  DetCurve full = detail::sweep(detail::split_sorted(trials, "det_curve"));
  if (full.size() <= n_points) return full;
  DetCurve out;
  out.reserve(n_points);
  const double span = static_cast<double>(full.size() - 1);
  std::size_t last = std::numeric_limits<std::size_t>::max();
  for (std::size_t i = 0; i < n_points; ++i) {
    const auto idx = static_cast<std::size_t>(std::llround(span * static_cast<double>(i) / static_cast<double>(n_points - 1)));
    if (idx != last) out.push_back(full[idx]);
    last = idx;
  }
  return out;
}

inline std::string format_g9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// CSV: header `threshold,fpr,fnr`, 9 significant digits.
inline void write_det_csv(std::ostream& os, const DetCurve& curve) {
  os << "threshold,fpr,fnr\n";
  for (const auto& p : curve) {
    os << format_g9(p.threshold) << ',' << format_g9(p.fpr) << ',' << format_g9(p.fnr) << '\n';
  }
}

// ---- trial pairs --------------------------------------------------------------

enum class PairTask { ovkws, sv, pcov };

inline const char* to_string(PairTask t) {
  switch (t) {
    case PairTask::ovkws:
      return "ovkws";
    case PairTask::sv:
      return "sv";
    case PairTask::pcov:
      return "pcov";
  }
  return "?";
}

struct LabeledItem {
  std::size_t keyword;
  std::size_t speaker;
};

struct TrialPair {
  std::vector<std::size_t> enroll;  // indices into the item list
  std::size_t test;
  bool positive;
  std::size_t target_keyword;
  std::size_t target_speaker;
};

// Target cells are (keyword, speaker) combinations with at least
// n_enroll + 1 utterances. Pairs alternate positive/negative. Positives:
//   ovkws  same keyword, any speaker
//   sv     same speaker, any keyword
//   pcov   same keyword and same speaker
// pcov negatives cycle through the three other quadrants (keyword only,
// speaker only, neither) so each appears in equal proportion.
inline std::vector<TrialPair> build_pairs(std::span<const LabeledItem> items, PairTask task, std::uint64_t seed,
                                          std::size_t n_pairs, std::size_t n_enroll = 1) {
  if (n_enroll == 0) throw std::invalid_argument("build_pairs: n_enroll must be >= 1");
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> cells;
  std::map<std::size_t, int> keywords, speakers;
  for (std::size_t i = 0; i < items.size(); ++i) {
    cells[{items[i].keyword, items[i].speaker}].push_back(i);
    keywords[items[i].keyword] = 1;
    speakers[items[i].speaker] = 1;
  }
  auto insufficient = [&](const std::string& why) {
    throw DegenerateInputError(std::string("build_pairs(") + to_string(task) + "): insufficient corpus diversity, " + why);
  };
  if (task != PairTask::sv && keywords.size() < 2) insufficient("need >= 2 keywords");
  if (task != PairTask::ovkws && speakers.size() < 2) insufficient("need >= 2 speakers");
  std::vector<const std::vector<std::size_t>*> targets;
  for (const auto& [key, idx] : cells)
    if (idx.size() >= n_enroll + 1) targets.push_back(&idx);
  if (targets.empty()) insufficient("no (keyword, speaker) cell holds n_enroll + 1 utterances");

  Rng rng(seed);
  std::vector<TrialPair> out;
  out.reserve(n_pairs);
  std::vector<std::size_t> candidates;
  std::size_t negatives = 0;
  for (std::size_t p = 0; p < n_pairs; ++p) {
    const bool positive = p % 2 == 0;
    std::vector<std::size_t> cell = *targets[rng.below(targets.size())];
    // partial Fisher-Yates: first n_enroll entries become the enrollment set
    for (std::size_t i = 0; i < n_enroll; ++i) std::swap(cell[i], cell[i + rng.below(cell.size() - i)]);
    std::vector<std::size_t> enroll(cell.begin(), cell.begin() + static_cast<std::ptrdiff_t>(n_enroll));
    std::sort(enroll.begin(), enroll.end());
    const std::size_t tk = items[enroll[0]].keyword, ts = items[enroll[0]].speaker;

    int quadrant = 0;  // pcov negatives: 0 keyword-only, 1 speaker-only, 2 neither
    if (!positive && task == PairTask::pcov) quadrant = static_cast<int>(negatives % 3);
    candidates.clear();
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (std::binary_search(enroll.begin(), enroll.end(), i)) continue;
      const bool same_k = items[i].keyword == tk, same_s = items[i].speaker == ts;
      bool keep = false;
      switch (task) {
        case PairTask::ovkws:
          keep = positive ? same_k : !same_k;
          break;
        case PairTask::sv:
          keep = positive ? same_s : !same_s;
          break;
        case PairTask::pcov:
          if (positive) {
            keep = same_k && same_s;
          } else {
            keep = quadrant == 0 ? (same_k && !same_s) : quadrant == 1 ? (!same_k && same_s) : (!same_k && !same_s);
          }
          break;
      }
      if (keep) candidates.push_back(i);
    }
    if (candidates.empty()) insufficient("no test utterance for the sampled target");
    if (!positive) ++negatives;
    out.push_back({std::move(enroll), candidates[rng.below(candidates.size())], positive, tk, ts});
  }
  return out;
}

}  // namespace pcovkws
