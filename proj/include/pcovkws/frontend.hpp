#pragma once

// Waveform I/O and the log-mel front end.
//
// Defaults: 16 kHz, 30 ms Hann window, 10 ms hop, 512-point FFT, 40
// triangular mel filters on the HTK warp mel(f) = 2595 log10(1 + f / 700),
// spanning 0 Hz to Nyquist. Filter edges are placed in continuous frequency,
// so every filter covers at least one FFT bin at these settings.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "pcovkws/errors.hpp"
#include "pcovkws/ndarray.hpp"

namespace pcovkws {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<double> samples;
  int sample_rate = kSampleRate;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

struct FramingConfig {
  int sample_rate = kSampleRate;
  double frame_len_ms = 30.0;
  double frame_shift_ms = 10.0;
  std::size_t n_mels = 40;
  double log_floor = 1e-10;

  std::size_t frame_len() const {
    return static_cast<std::size_t>(std::lround(frame_len_ms * sample_rate / 1000.0));
  }
  std::size_t hop() const {
    return static_cast<std::size_t>(std::lround(frame_shift_ms * sample_rate / 1000.0));
  }
  std::size_t n_fft() const {
    std::size_t n = 1;
    while (n < frame_len()) n <<= 1;
    return n;
  }
  std::size_t frames_for(std::size_t n_samples) const {
    if (n_samples < frame_len()) return 0;
    return 1 + (n_samples - frame_len()) / hop();
  }
};

struct FeatureMatrix {
  NDArray<double> frames;  // [T, n_mels]
  double frame_shift_ms = 10.0;
  double frame_len_ms = 30.0;
  std::size_t n_mels = 40;

  std::size_t time() const { return frames.extent(0); }
};

// ---- WAV (16-bit PCM, mono, little-endian) ---------------------------------

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

}  // namespace detail

inline Waveform parse_wav(std::span<const unsigned char> bytes, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& why) { throw std::runtime_error("malformed WAV " + origin + ": " + why); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    fail("missing RIFF/WAVE header");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = detail::read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) fail("truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16) fail("short fmt chunk");
      format = detail::read_u16(bytes.data() + body);
      channels = detail::read_u16(bytes.data() + body + 2);
      rate = detail::read_u32(bytes.data() + body + 4);
      bits = detail::read_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      if (!have_fmt) fail("data chunk before fmt chunk");
      if (format != 1 || bits != 16) fail("only 16-bit PCM is supported");
      if (channels != 1) fail("only mono is supported");
      if (rate != kSampleRate) {
        fail("sample rate " + std::to_string(rate) + " Hz, expected " + std::to_string(kSampleRate));
      }
      Waveform w;
      w.sample_rate = static_cast<int>(rate);
      w.samples.resize(len / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto raw = static_cast<std::int16_t>(detail::read_u16(bytes.data() + body + 2 * i));
        w.samples[i] = raw / 32768.0;
      }
      return w;
    }
    pos = body + len + (len & 1);
  }
  fail("no data chunk");
  return {};
}

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open WAV " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_wav(bytes, path.string());
}

// Samples are clipped to [-1, 1] and quantized with round-to-nearest.
inline std::string encode_wav(const Waveform& w) {
  std::string out;
  const auto data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
  out += "RIFF";
  detail::put_u32(out, 36 + data_len);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, data_len);
  for (double s : w.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const long q = std::clamp(std::lround(c * 32768.0), -32768L, 32767L);
    detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write WAV " + path.string());
  const std::string bytes = encode_wav(w);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write on " + path.string());
}

// ---- signal ops -------------------------------------------------------------

// Centers the signal in a window of target_s seconds: zero-pads both sides
// (extra sample on the right) or trims both sides symmetrically.
inline Waveform pad_or_trim(const Waveform& w, double target_s) {
  if (!(target_s > 0)) throw std::invalid_argument("pad_or_trim: target duration must be positive");
  if (w.samples.empty()) throw DegenerateInputError("pad_or_trim: empty waveform");
  const auto target = static_cast<std::size_t>(std::llround(target_s * w.sample_rate));
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.assign(target, 0.0);
  const std::size_t n = w.samples.size();
  if (n <= target) {
    const std::size_t offset = (target - n) / 2;
    std::copy(w.samples.begin(), w.samples.end(), out.samples.begin() + static_cast<std::ptrdiff_t>(offset));
  } else {
    const std::size_t offset = (n - target) / 2;
    std::copy_n(w.samples.begin() + static_cast<std::ptrdiff_t>(offset), target, out.samples.begin());
  }
  return out;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filter weights, [n_mels, n_fft/2 + 1].
inline NDArray<double> mel_filterbank(const FramingConfig& cfg) {
  const std::size_t bins = cfg.n_fft() / 2 + 1;
  const double nyquist = cfg.sample_rate / 2.0;
  const double mel_max = hz_to_mel(nyquist);
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  }
  NDArray<double> fb(Shape{cfg.n_mels, bins});
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (std::size_t b = 0; b < bins; ++b) {
      const double f = static_cast<double>(b) * cfg.sample_rate / static_cast<double>(cfg.n_fft());
      const double up = (f - lo) / (mid - lo);
      const double down = (hi - f) / (hi - mid);
      fb.at(m, b) = std::max(0.0, std::min(up, down));
    }
  }
  return fb;
}

// Reusable extractor: owns the FFTW plan, window and filterbank. execute()
// uses FFTW's new-array interface, so one extractor may serve many threads.
class LogMelExtractor {
 public:
  explicit LogMelExtractor(FramingConfig cfg = {})
      : cfg_(cfg), filterbank_(mel_filterbank(cfg_)), window_(cfg_.frame_len()) {
    if (cfg_.sample_rate != kSampleRate) throw std::invalid_argument("log_mel: only 16 kHz input is supported");
    if (cfg_.hop() == 0 || cfg_.frame_len() == 0 || cfg_.n_mels == 0) {
      throw std::invalid_argument("log_mel: degenerate framing config");
    }
    const std::size_t n = cfg_.frame_len();
    for (std::size_t i = 0; i < n; ++i) {
      window_[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
    }
    const int nfft = static_cast<int>(cfg_.n_fft());
    Buffers scratch(cfg_.n_fft());
    std::lock_guard<std::mutex> lock(planner_mutex());
    plan_.reset(fftw_plan_dft_r2c_1d(nfft, scratch.in, scratch.out, FFTW_ESTIMATE));
    if (!plan_) throw std::runtime_error("log_mel: FFTW planning failed");
  }

  const FramingConfig& config() const { return cfg_; }
  const NDArray<double>& filterbank() const { return filterbank_; }

  FeatureMatrix operator()(const Waveform& w) const {
    if (w.sample_rate != cfg_.sample_rate) {
      throw std::invalid_argument("log_mel: sample rate " + std::to_string(w.sample_rate) + " Hz");
    }
    const std::size_t frames = cfg_.frames_for(w.samples.size());
    if (frames == 0) throw DimensionError("log_mel: waveform shorter than one frame");
    const std::size_t n = cfg_.frame_len(), hop = cfg_.hop(), nfft = cfg_.n_fft();
    const std::size_t bins = nfft / 2 + 1;
    Buffers buf(nfft);
    std::vector<double> power(bins);
    FeatureMatrix fm;
    fm.frames = NDArray<double>(Shape{frames, cfg_.n_mels});
    fm.frame_len_ms = cfg_.frame_len_ms;
    fm.frame_shift_ms = cfg_.frame_shift_ms;
    fm.n_mels = cfg_.n_mels;
    for (std::size_t t = 0; t < frames; ++t) {
      std::fill(buf.in, buf.in + nfft, 0.0);
      for (std::size_t i = 0; i < n; ++i) buf.in[i] = w.samples[t * hop + i] * window_[i];
      fftw_execute_dft_r2c(plan_.get(), buf.in, buf.out);
      for (std::size_t b = 0; b < bins; ++b) power[b] = buf.out[b][0] * buf.out[b][0] + buf.out[b][1] * buf.out[b][1];
      for (std::size_t m = 0; m < cfg_.n_mels; ++m) {
        double e = 0.0;
        for (std::size_t b = 0; b < bins; ++b) e += filterbank_.at(m, b) * power[b];
        fm.frames.at(t, m) = std::log(e + cfg_.log_floor);
      }
    }
    return fm;
  }

 private:
  struct Buffers {
    explicit Buffers(std::size_t nfft)
        : in(static_cast<double*>(fftw_malloc(sizeof(double) * nfft))),
          out(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (nfft / 2 + 1)))) {
      if (!in || !out) throw std::bad_alloc();
    }
    ~Buffers() {
      fftw_free(in);
      fftw_free(out);
    }
    Buffers(const Buffers&) = delete;
    Buffers& operator=(const Buffers&) = delete;
    double* in;
    fftw_complex* out;
  };

  struct PlanDeleter {
    void operator()(fftw_plan p) const {
      std::lock_guard<std::mutex> lock(planner_mutex());
      fftw_destroy_plan(p);
    }
  };

  static std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
  }

  FramingConfig cfg_;
  NDArray<double> filterbank_;
  std::vector<double> window_;
  std::unique_ptr<std::remove_pointer_t<fftw_plan>, PlanDeleter> plan_;
};

inline FeatureMatrix log_mel(const Waveform& w, const FramingConfig& cfg = {}) {
  return LogMelExtractor(cfg)(w);
}

// Per-utterance mean/variance normalization of each mel band over time.
// With `variance` false only the mean is removed.
inline FeatureMatrix cmvn(const FeatureMatrix& f, double var_floor = 1e-8, bool variance = true) {
  const std::size_t tt = f.frames.extent(0), ff = f.frames.extent(1);
  if (tt < 2) throw DimensionError("cmvn: need at least two frames");
  FeatureMatrix out = f;
  for (std::size_t c = 0; c < ff; ++c) {
    double mean = 0.0;
    for (std::size_t t = 0; t < tt; ++t) mean += f.frames.at(t, c);
    mean /= static_cast<double>(tt);
    double var = 0.0;
    for (std::size_t t = 0; t < tt; ++t) var += (f.frames.at(t, c) - mean) * (f.frames.at(t, c) - mean);
    var /= static_cast<double>(tt);
    const double inv = variance ? 1.0 / std::sqrt(std::max(var, var_floor)) : 1.0;
    for (std::size_t t = 0; t < tt; ++t) out.frames.at(t, c) = (f.frames.at(t, c) - mean) * inv;
  }
  return out;
}

enum class FeatureNorm { none, cmn, cmvn };

inline const char* to_string(FeatureNorm n) {
  switch (n) {
    case FeatureNorm::none:
      return "none";
    case FeatureNorm::cmn:
      return "cmn";
    case FeatureNorm::cmvn:
      return "cmvn";
  }
  return "?";
}

inline FeatureNorm parse_feature_norm(const std::string& s) {
  if (s == "none") return FeatureNorm::none;
  if (s == "cmn") return FeatureNorm::cmn;
  if (s == "cmvn") return FeatureNorm::cmvn;
  throw std::invalid_argument("feature_norm must be none, cmn or cmvn, got '" + s + "'");
}

inline FeatureMatrix normalize(const FeatureMatrix& f, FeatureNorm n) {
  switch (n) {
    case FeatureNorm::cmn:
      return cmvn(f, 1e-8, false);
    case FeatureNorm::cmvn:
      return cmvn(f);
    default:
      return f;
  }
}

}  // namespace pcovkws
