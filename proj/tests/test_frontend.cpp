#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "pcovkws/frontend.hpp"
#include "pcovkws/random.hpp"
#include "testing.hpp"

using namespace pcovkws;

namespace {

Waveform ramp(std::size_t n) {
  Waveform w;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) w.samples[i] = static_cast<double>(i + 1) / static_cast<double>(n + 1);
  return w;
}

Waveform tone(double hz, double amp, std::size_t n) {
  Waveform w;
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) w.samples[i] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / 16000.0);
  return w;
}

// Direct DFT power spectrum and HTK triangular filterbank, written from the
// textbook definitions: 480-sample symmetric Hann window zero-padded to 512,
// 40 filters with edges equally spaced in mel between 0 Hz and 8 kHz.
std::vector<std::vector<double>> mel_oracle(const Waveform& w) {
  const std::size_t len = 480, hop = 160, nfft = 512, bins = nfft / 2 + 1, mels = 40;
  auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto inv = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  std::vector<double> edge(mels + 2);
  for (std::size_t i = 0; i < edge.size(); ++i) edge[i] = inv(mel(8000.0) * static_cast<double>(i) / (mels + 1));
  const std::size_t frames = 1 + (w.samples.size() - len) / hop;
  std::vector<std::vector<double>> out(frames, std::vector<double>(mels));
  for (std::size_t t = 0; t < frames; ++t) {
    std::vector<double> power(bins);
    for (std::size_t b = 0; b < bins; ++b) {
      std::complex<double> acc = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double win = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / (len - 1)));
        acc += w.samples[t * hop + i] * win *
               std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(b * i) / static_cast<double>(nfft));
      }
      power[b] = std::norm(acc);
    }
    for (std::size_t m = 0; m < mels; ++m) {
      double e = 0.0;
      for (std::size_t b = 0; b < bins; ++b) {
        const double f = 16000.0 * static_cast<double>(b) / nfft;
        double h = 0.0;
        if (f > edge[m] && f <= edge[m + 1]) h = (f - edge[m]) / (edge[m + 1] - edge[m]);
        else if (f > edge[m + 1] && f < edge[m + 2]) h = (edge[m + 2] - f) / (edge[m + 2] - edge[m + 1]);
        e += h * power[b];
      }
      out[t][m] = std::log(e + 1e-10);
    }
  }
  return out;
}

}  // namespace

TEST(PadOrTrim, LengthCases) {
  auto same = pad_or_trim(ramp(16000), 1.0);
  ASSERT_EQ(same.samples.size(), 16000u);
  EXPECT_EQ(same.samples, ramp(16000).samples);

  auto half = ramp(8000);
  auto padded = pad_or_trim(half, 1.0);
  ASSERT_EQ(padded.samples.size(), 16000u);
  for (std::size_t i = 0; i < 4000; ++i) {
    EXPECT_EQ(padded.samples[i], 0.0);
    EXPECT_EQ(padded.samples[12000 + i], 0.0);
  }
  for (std::size_t i = 0; i < 8000; ++i) EXPECT_EQ(padded.samples[4000 + i], half.samples[i]);

  auto longer = ramp(32000);
  auto trimmed = pad_or_trim(longer, 1.0);
  ASSERT_EQ(trimmed.samples.size(), 16000u);
  for (std::size_t i = 0; i < 16000; ++i) EXPECT_EQ(trimmed.samples[i], longer.samples[8000 + i]);
}

TEST(PadOrTrim, IdempotentAndErrors) {
  for (std::size_t n : {1u, 777u, 15999u, 16001u, 40000u}) {
    auto once = pad_or_trim(ramp(n), 1.0);
    EXPECT_EQ(pad_or_trim(once, 1.0).samples, once.samples);
    EXPECT_EQ(pad_or_trim(ramp(n), 0.25).samples.size(), 4000u);
  }
  EXPECT_THROW(pad_or_trim(Waveform{}, 1.0), DegenerateInputError);
  EXPECT_THROW(pad_or_trim(ramp(10), 0.0), std::invalid_argument);
}

TEST(LogMel, FrameCountForOneSecond) {
  FramingConfig cfg;
  EXPECT_EQ(cfg.frame_len(), 480u);
  EXPECT_EQ(cfg.hop(), 160u);
  auto f = log_mel(ramp(16000), cfg);
  EXPECT_EQ(f.time(), 98u);
  EXPECT_EQ(f.frames.extent(1), 40u);
}

TEST(LogMel, SilenceIsLogFloor) {
  Waveform w;
  w.samples.assign(16000, 0.0);
  auto f = log_mel(w);
  for (double v : f.frames.data()) EXPECT_EQ(v, std::log(1e-10));
}

TEST(LogMel, ToneMatchesDirectDftOracle) {
  auto w = tone(1000.0, 0.5, 16000);
  auto f = log_mel(w);
  auto ref = mel_oracle(w);
  ASSERT_EQ(f.time(), ref.size());
  std::size_t band = 0;
  for (std::size_t t = 0; t < f.time(); ++t) {
    std::size_t best = 0;
    for (std::size_t m = 0; m < 40; ++m) {
      EXPECT_NEAR(f.frames.at(t, m), ref[t][m], 1e-6 * std::max(1.0, std::abs(ref[t][m]))) << t << "," << m;
      if (f.frames.at(t, m) > f.frames.at(t, best)) best = m;
    }
    if (t == 0) band = best;
    EXPECT_EQ(best, band) << "frame " << t;
  }
  // the winning band's triangle must cover 1 kHz
  const double lo = mel_to_hz(hz_to_mel(8000.0) * static_cast<double>(band) / 41.0);
  const double hi = mel_to_hz(hz_to_mel(8000.0) * static_cast<double>(band + 2) / 41.0);
  EXPECT_LT(lo, 1000.0);
  EXPECT_GT(hi, 1000.0);
}

TEST(LogMel, DeterministicAndFinite) {
  Rng rng(2);
  Waveform w;
  for (int i = 0; i < 16000; ++i) w.samples.push_back(rng.uniform(-1, 1));
  auto a = log_mel(w), b = log_mel(w);
  for (std::size_t i = 0; i < a.frames.size(); ++i) ASSERT_EQ(a.frames[i], b.frames[i]);
  EXPECT_TRUE(a.frames.all_finite());
  Waveform wrong = w;
  wrong.sample_rate = 8000;
  EXPECT_THROW(log_mel(wrong), std::invalid_argument);
  EXPECT_THROW(log_mel(ramp(100)), DimensionError);
}

TEST(Cmvn, Cases) {
  Rng rng(3);
  FeatureMatrix f;
  f.frames = pcovkws::testing::random_array(Shape{50, 6}, rng, 4.0);
  for (std::size_t t = 0; t < 50; ++t) f.frames.at(t, 2) = 3.5;
  auto g = cmvn(f);
  for (std::size_t c = 0; c < 6; ++c) {
    double m = 0, v = 0;
    for (std::size_t t = 0; t < 50; ++t) m += g.frames.at(t, c);
    m /= 50;
    for (std::size_t t = 0; t < 50; ++t) v += (g.frames.at(t, c) - m) * (g.frames.at(t, c) - m);
    v /= 50;
    EXPECT_LT(std::abs(m), 1e-6);
    if (c == 2) {
      for (std::size_t t = 0; t < 50; ++t) EXPECT_EQ(g.frames.at(t, c), 0.0);
    } else {
      EXPECT_NEAR(v, 1.0, 1e-9);
    }
  }
  auto h = cmvn(g);
  for (std::size_t i = 0; i < g.frames.size(); ++i) EXPECT_NEAR(h.frames[i], g.frames[i], 1e-6);

  FeatureMatrix one;
  one.frames = NDArray<double>(Shape{1, 6});
  EXPECT_THROW(cmvn(one), DimensionError);
}

TEST(Cmvn, MeanOnlyNormalization) {
  Rng rng(4);
  FeatureMatrix f;
  f.frames = pcovkws::testing::random_array(Shape{20, 3}, rng, 2.0);
  auto g = normalize(f, FeatureNorm::cmn);
  auto n = normalize(f, FeatureNorm::none);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0;
    for (std::size_t t = 0; t < 20; ++t) m += f.frames.at(t, c);
    m /= 20;
    for (std::size_t t = 0; t < 20; ++t) EXPECT_NEAR(g.frames.at(t, c), f.frames.at(t, c) - m, 1e-12);
  }
  for (std::size_t i = 0; i < f.frames.size(); ++i) EXPECT_EQ(n.frames[i], f.frames[i]);
  EXPECT_EQ(parse_feature_norm("cmvn"), FeatureNorm::cmvn);
  EXPECT_THROW(parse_feature_norm("pcen"), std::invalid_argument);
}

TEST(Wav, RoundTripAndErrors) {
  Rng rng(5);
  Waveform w;
  for (int i = 0; i < 1000; ++i) w.samples.push_back(std::round(rng.uniform(-1, 1) * 32767.0) / 32768.0);
  const std::string bytes = encode_wav(w);
  std::vector<unsigned char> raw(bytes.begin(), bytes.end());
  auto back = parse_wav(raw);
  EXPECT_EQ(back.sample_rate, 16000);
  EXPECT_EQ(back.samples, w.samples);

  auto path = pcovkws::testing::scratch_dir("wav") / "x.wav";
  write_wav(path, w);
  EXPECT_EQ(read_wav(path).samples, w.samples);

  auto bad_rate = raw;
  bad_rate[24] = 0x40;  // 8000 Hz
  bad_rate[25] = 0x1F;
  EXPECT_THROW(parse_wav(bad_rate), std::runtime_error);
  std::vector<unsigned char> junk(raw.begin(), raw.begin() + 10);
  EXPECT_THROW(parse_wav(junk), std::runtime_error);
  EXPECT_THROW(read_wav(path.parent_path() / "missing.wav"), std::runtime_error);
}
