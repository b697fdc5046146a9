#pragma once

// Dataset manifests (JSON lines: path, keyword, speaker, split), the
// synthetic toy corpus and a Speech Commands directory adapter.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcovkws/frontend.hpp"
#include "pcovkws/random.hpp"

namespace pcovkws {

namespace fs = std::filesystem;

enum class Split { train, valid, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::valid:
      return "valid";
    case Split::test:
      return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw std::invalid_argument("split must be train, valid or test, got '" + s + "'");
}

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory
  std::string keyword;
  std::string speaker;
  Split split = Split::train;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

class ManifestError : public std::runtime_error {
 public:
  explicit ManifestError(const std::string& what) : std::runtime_error("manifest: " + what) {}
};

struct Manifest {
  fs::path root;  // directory the record paths are relative to
  std::vector<ManifestRecord> records;

  fs::path resolve(const ManifestRecord& r) const { return root / r.path; }

  std::vector<const ManifestRecord*> split(Split s) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }

  // Sorted unique labels over every split.
  std::vector<std::string> keywords() const { return labels(&ManifestRecord::keyword); }
  std::vector<std::string> speakers() const { return labels(&ManifestRecord::speaker); }

  // Rejects duplicate paths (an utterance in two splits, or twice in one)
  // and, when check_files is set, records whose file does not exist.
  void validate(bool check_files = true) const {
    std::map<std::string, std::size_t> seen;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (r.path.empty() || r.keyword.empty() || r.speaker.empty()) {
        throw ManifestError("line " + std::to_string(i + 1) + ": path, keyword and speaker must be non-empty");
      }
      const std::string key = fs::path(r.path).lexically_normal().generic_string();
      const auto [it, fresh] = seen.emplace(key, i);
      if (!fresh) {
        const auto& other = records[it->second];
        throw ManifestError("'" + r.path + "' appears on lines " + std::to_string(it->second + 1) + " (" +
                            to_string(other.split) + ") and " + std::to_string(i + 1) + " (" + to_string(r.split) +
                            "); every utterance must belong to exactly one split");
      }
      if (check_files && !fs::is_regular_file(resolve(r))) {
        throw ManifestError("line " + std::to_string(i + 1) + ": '" + resolve(r).string() +
                            "' does not exist; paths are resolved relative to " + root.string());
      }
    }
  }

 private:
  std::vector<std::string> labels(std::string ManifestRecord::*field) const {
    std::set<std::string> s;
    for (const auto& r : records) s.insert(r.*field);
    return {s.begin(), s.end()};
  }
};

inline std::string to_jsonl(const ManifestRecord& r) {
  return nlohmann::json{{"path", r.path}, {"keyword", r.keyword}, {"speaker", r.speaker}, {"split", to_string(r.split)}}
      .dump();
}

inline Manifest parse_manifest(std::istream& in, const fs::path& root) {
  Manifest m;
  m.root = root;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      for (const auto& [k, v] : j.items()) {
        if (k != "path" && k != "keyword" && k != "speaker" && k != "split") {
          throw std::invalid_argument("unknown field '" + k + "'");
        }
      }
      m.records.push_back({j.at("path").get<std::string>(), j.at("keyword").get<std::string>(),
                           j.at("speaker").get<std::string>(), parse_split(j.at("split").get<std::string>())});
    } catch (const std::exception& e) {
      throw ManifestError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

inline Manifest load_manifest(const fs::path& path, bool check_files = true) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open " + path.string());
  Manifest m = parse_manifest(in, path.parent_path());
  m.validate(check_files);
  return m;
}

inline void write_manifest(const fs::path& path, const Manifest& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : m.records) out << to_jsonl(r) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// ---- toy corpus ---------------------------------------------------------------

struct ToyCorpusConfig {
  std::size_t n_keywords = 8;
  std::size_t n_speakers = 8;
  std::size_t n_utts_per_cell = 20;
  std::uint64_t seed = 0;
  double valid_fraction = 0.2;
  double test_fraction = 0.2;
  std::size_t segments_per_keyword = 4;
};

// A keyword is a sequence of vowel-like segments, each a set of three
// formant resonances. A speaker is a fundamental frequency and a spectral
// tilt (dB per octave).
struct KeywordVoice {
  std::vector<std::array<double, 3>> formants;
};

struct SpeakerVoice {
  double f0 = 150.0;
  double tilt_db_per_octave = -6.0;
};

inline KeywordVoice toy_keyword(std::uint64_t seed, std::size_t index, std::size_t segments) {
  Rng rng(mix_seed(seed, 0x6b000000 + index));
  KeywordVoice k;
  for (std::size_t s = 0; s < segments; ++s) {
    k.formants.push_back({rng.uniform(300.0, 900.0), rng.uniform(1000.0, 2500.0), rng.uniform(2600.0, 4000.0)});
  }
  return k;
}

// f0 and tilt are laid out on two interleaved grids so that no two speakers
// share both cues.
inline SpeakerVoice toy_speaker(std::uint64_t seed, std::size_t index, std::size_t n_speakers) {
  Rng rng(mix_seed(seed, 0x73000000 + index));
  const double u = n_speakers > 1 ? static_cast<double>(index) / static_cast<double>(n_speakers - 1) : 0.5;
  const std::size_t half = (n_speakers + 1) / 2;
  const double v = static_cast<double>((index * half + index / 2) % n_speakers) /
                   static_cast<double>(std::max<std::size_t>(1, n_speakers - 1));
  SpeakerVoice s;
  s.f0 = 95.0 * std::pow(260.0 / 95.0, u) * (1.0 + 0.01 * rng.normal());
  s.tilt_db_per_octave = -14.0 + 12.0 * v;
  return s;
}

// Renders one second of audio for a (keyword, speaker) pair; `rng` supplies
// the per-utterance jitter.
inline Waveform synthesize_toy_utterance(const KeywordVoice& kw, const SpeakerVoice& sp, Rng& rng) {
  constexpr double fs = kSampleRate;
  const std::size_t n = kSampleRate;
  Waveform w;
  w.samples.assign(n, 0.0);

  const std::size_t nseg = kw.formants.size();
  const double seg_dur = 0.15 * (1.0 + 0.08 * rng.normal());
  const double onset = 0.5 - 0.5 * seg_dur * static_cast<double>(nseg) + 0.04 * rng.normal();
  const double f0 = sp.f0 * (1.0 + 0.03 * rng.normal());
  const double tilt = sp.tilt_db_per_octave + 0.7 * rng.normal();
  const double vib_rate = rng.uniform(4.0, 6.0), vib_depth = 0.015 * rng.uniform();
  std::vector<std::array<double, 3>> formants = kw.formants;
  for (auto& seg : formants)
    for (double& f : seg) f *= 1.0 + 0.03 * rng.normal();

  const std::size_t max_h = static_cast<std::size_t>(7600.0 / (f0 * 0.9));
  // harmonic amplitudes per segment, evaluated at the mean f0
  std::vector<std::vector<double>> amp(nseg, std::vector<double>(max_h + 1, 0.0));
  for (std::size_t s = 0; s < nseg; ++s) {
    for (std::size_t h = 1; h <= max_h; ++h) {
      const double f = f0 * static_cast<double>(h);
      if (f > 7600.0) break;
      double env = 0.02;
      for (std::size_t q = 0; q < 3; ++q) {
        const double bw = 60.0 + 0.06 * formants[s][q];
        const double d = (f - formants[s][q]) / bw;
        env += (q == 0 ? 1.0 : q == 1 ? 0.7 : 0.4) / (1.0 + d * d);
      }
      amp[s][h] = env * std::pow(f / 100.0, tilt / 6.0206);
    }
  }

  const double ramp = 0.02;  // crossfade seconds between segments
  double phase = 0.0;
  std::vector<double> a(max_h + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / fs;
    const double rel = (t - onset) / seg_dur;
    if (rel < -ramp / seg_dur || rel > static_cast<double>(nseg) + ramp / seg_dur) continue;
    const double inst_f0 = f0 * (1.0 + vib_depth * std::sin(2.0 * std::numbers::pi * vib_rate * t));
    phase += 2.0 * std::numbers::pi * inst_f0 / fs;
    // segment weights with raised-cosine crossfades
    std::fill(a.begin(), a.end(), 0.0);
    double total = 0.0;
    for (std::size_t s = 0; s < nseg; ++s) {
      const double lo = onset + seg_dur * static_cast<double>(s), hi = lo + seg_dur;
      double g = 0.0;
      if (t >= lo + ramp / 2 && t <= hi - ramp / 2) {
        g = 1.0;
      } else if (t > lo - ramp / 2 && t < lo + ramp / 2) {
        g = 0.5 - 0.5 * std::cos(std::numbers::pi * (t - lo + ramp / 2) / ramp);
      } else if (t > hi - ramp / 2 && t < hi + ramp / 2) {
        g = 0.5 + 0.5 * std::cos(std::numbers::pi * (t - hi + ramp / 2) / ramp);
      }
      if (g == 0.0) continue;
      total += g;
      for (std::size_t h = 1; h <= max_h; ++h) a[h] += g * amp[s][h];
    }
    if (total == 0.0) continue;
    const std::complex<double> step(std::cos(phase), std::sin(phase));
    std::complex<double> rot = step;
    double v = 0.0;
    for (std::size_t h = 1; h <= max_h; ++h) {
      v += a[h] * rot.imag();
      rot *= step;
    }
    w.samples[i] = v;
  }

  double peak = 0.0;
  for (double v : w.samples) peak = std::max(peak, std::abs(v));
  const double gain = peak > 0 ? rng.uniform(0.3, 0.7) / peak : 0.0;
  const double noise = 0.003 * rng.uniform(0.5, 1.5);
  for (double& v : w.samples) v = std::clamp(v * gain + noise * rng.normal(), -1.0, 32767.0 / 32768.0);
  return w;
}

inline std::string toy_keyword_id(std::size_t k) { return "kw" + std::to_string(k); }
inline std::string toy_speaker_id(std::size_t s) { return "spk" + std::to_string(s); }

// Writes <out_dir>/<keyword>/<speaker>_<n>.wav and <out_dir>/manifest.jsonl.
// Within each cell utterances are assigned to splits by a seeded shuffle.
inline Manifest generate_toy_corpus(const fs::path& out_dir, const ToyCorpusConfig& cfg) {
  if (cfg.n_keywords < 2 || cfg.n_speakers < 2) throw std::invalid_argument("toy corpus: need >= 2 keywords and speakers");
  if (cfg.n_utts_per_cell == 0) throw std::invalid_argument("toy corpus: need >= 1 utterance per cell");
  if (!(cfg.valid_fraction >= 0 && cfg.test_fraction >= 0 && cfg.valid_fraction + cfg.test_fraction < 1)) {
    throw std::invalid_argument("toy corpus: split fractions must be >= 0 and sum below 1");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw std::runtime_error("cannot create " + out_dir.string());

  Manifest m;
  m.root = out_dir;
  const auto n_valid = static_cast<std::size_t>(std::lround(cfg.valid_fraction * static_cast<double>(cfg.n_utts_per_cell)));
  const auto n_test = static_cast<std::size_t>(std::lround(cfg.test_fraction * static_cast<double>(cfg.n_utts_per_cell)));
  for (std::size_t k = 0; k < cfg.n_keywords; ++k) {
    const auto kw = toy_keyword(cfg.seed, k, cfg.segments_per_keyword);
    fs::create_directories(out_dir / toy_keyword_id(k), ec);
    if (ec) throw std::runtime_error("cannot create " + (out_dir / toy_keyword_id(k)).string());
    for (std::size_t s = 0; s < cfg.n_speakers; ++s) {
      const auto sp = toy_speaker(cfg.seed, s, cfg.n_speakers);
      Rng cell_rng(mix_seed(cfg.seed, (k << 20) ^ (s << 4) ^ 0x5));
      std::vector<std::size_t> order(cfg.n_utts_per_cell);
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      cell_rng.shuffle(order.begin(), order.end());
      std::vector<Split> split_of(cfg.n_utts_per_cell, Split::train);
      for (std::size_t i = 0; i < n_valid && i < order.size(); ++i) split_of[order[i]] = Split::valid;
      for (std::size_t i = n_valid; i < n_valid + n_test && i < order.size(); ++i) split_of[order[i]] = Split::test;
      for (std::size_t u = 0; u < cfg.n_utts_per_cell; ++u) {
        Rng rng(mix_seed(cfg.seed, (k << 40) ^ (s << 20) ^ u));
        const auto wav = synthesize_toy_utterance(kw, sp, rng);
        const std::string rel = toy_keyword_id(k) + "/" + toy_speaker_id(s) + "_" + std::to_string(u) + ".wav";
        write_wav(out_dir / rel, wav);
        m.records.push_back({rel, toy_keyword_id(k), toy_speaker_id(s), split_of[u]});
      }
    }
  }
  write_manifest(out_dir / "manifest.jsonl", m);
  return m;
}

// ---- Speech Commands ----------------------------------------------------------

// Reads the standard layout <root>/<word>/<speaker>_nohash_<n>.wav with
// validation_list.txt and testing_list.txt at the root. Files are not opened.
inline Manifest import_speech_commands(const fs::path& root) {
  if (!fs::is_directory(root)) throw ManifestError(root.string() + " is not a directory");
  auto read_list = [&](const char* name) {
    std::set<std::string> out;
    std::ifstream in(root / name);
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      if (!line.empty()) out.insert(line);
    }
    return out;
  };
  const auto valid = read_list("validation_list.txt");
  const auto test = read_list("testing_list.txt");
  Manifest m;
  m.root = root;
  std::vector<fs::path> words;
  for (const auto& e : fs::directory_iterator(root)) {
    const std::string name = e.path().filename().string();
    if (e.is_directory() && !name.empty() && name[0] != '_' && name[0] != '.') words.push_back(e.path());
  }
  std::sort(words.begin(), words.end());
  for (const auto& dir : words) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path().filename().string());
    }
    std::sort(files.begin(), files.end());
    const std::string word = dir.filename().string();
    for (const auto& f : files) {
      const auto cut = f.find("_nohash_");
      if (cut == std::string::npos) continue;
      const std::string rel = word + "/" + f;
      const Split sp = test.count(rel) ? Split::test : valid.count(rel) ? Split::valid : Split::train;
      m.records.push_back({rel, word, f.substr(0, cut), sp});
    }
  }
  if (m.records.empty()) throw ManifestError("no <word>/<speaker>_nohash_<n>.wav files under " + root.string());
  return m;
}

}  // namespace pcovkws
