#include "multitalk/error.hpp"
#include "multitalk/metrics.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>
#include <cmath>
#include <random>

using namespace multitalk;

namespace {

// Independent Levenshtein distance, two-row DP.
std::size_t edit_distance(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

Tokens random_tokens(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> sym(0, 3);
  Tokens t(len(rng));
  for (auto& s : t) s = std::string(1, static_cast<char>('a' + sym(rng)));
  return t;
}

Tokens split(const std::string& s) {
  Tokens t;
  std::istringstream in(s);
  for (std::string w; in >> w;) t.push_back(w);
  return t;
}

// Two-frame motion whose lip vertices sit at given distances from the origin.
MotionSequence lip_motion(const std::vector<std::vector<double>>& offsets_x) {
  const int t = static_cast<int>(offsets_x.size());
  MotionSequence m(t, 4, 25.0);
  for (int f = 0; f < t; ++f) {
    for (std::size_t k = 0; k < offsets_x[f].size(); ++k) {
      m.at(f, static_cast<int>(k) + 2, 0) = static_cast<float>(offsets_x[f][k]);
    }
  }
  return m;
}

SpeechTrack sine(double seconds, double amp = 0.3) {
  SpeechTrack s;
  s.samples.resize(static_cast<std::size_t>(seconds * s.sample_rate));
  for (std::size_t i = 0; i < s.samples.size(); ++i) {
    s.samples[i] = static_cast<float>(amp * std::sin(2 * M_PI * 440.0 * i / s.sample_rate));
  }
  return s;
}

double power(const std::vector<float>& x) {
  double p = 0;
  for (float v : x) p += static_cast<double>(v) * v;
  return p / static_cast<double>(x.size());
}

}  // namespace

TEST(Lve, IdentityIsZero) {
  const MotionSequence m = lip_motion({{0.1, 0.3}, {0.2, 0.2}});
  EXPECT_EQ(lve(m, m, {2, 3}), 0.0);
}

TEST(Lve, WorkedExample) {
  const MotionSequence gt = lip_motion({{0, 0}, {0, 0}});
  const MotionSequence pred = lip_motion({{0.1, 0.3}, {0.2, 0.2}});
  EXPECT_NEAR(lve(pred, gt, {2, 3}), 0.25, 1e-6);
}

TEST(Lve, SymmetricAndNonNegative) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> nd;
  for (int trial = 0; trial < 50; ++trial) {
    MotionSequence a(5, 6, 25.0), b(5, 6, 25.0);
    for (auto& v : a.vertices) v = nd(rng);
    for (auto& v : b.vertices) v = nd(rng);
    const std::vector<int> lips{1, 4, 5};
    EXPECT_GE(lve(a, b, lips), 0.0);
    EXPECT_DOUBLE_EQ(lve(a, b, lips), lve(b, a, lips));
    // Zero iff lips coincide: perturbing a non-lip vertex keeps it zero.
    MotionSequence c = a;
    c.at(2, 0, 1) += 5.0f;
    EXPECT_EQ(lve(a, c, lips), 0.0);
    c.at(2, 4, 1) += 1e-3f;
    EXPECT_GT(lve(a, c, lips), 0.0);
  }
}

TEST(Lve, Errors) {
  const MotionSequence a = lip_motion({{0, 0}});
  const MotionSequence b = lip_motion({{0, 0}, {0, 0}});
  EXPECT_THROW(lve(a, b, {2}), ShapeError);
  MotionSequence c = a;
  c.fps = 30.0;
  EXPECT_THROW(lve(a, c, {2}), ShapeError);
  EXPECT_THROW(lve(a, a, {}), PreconditionError);
}

TEST(Wer, WorkedExamples) {
  EXPECT_NEAR(wer(split("a b c"), split("a b c")), 0.0, 1e-12);
  EXPECT_NEAR(wer(split("a b c"), split("a x c")), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(wer(split("a b"), split("a b c d")), 1.0, 1e-12);
  const EditCounts c = align_tokens(split("a b"), split("a b c d"));
  EXPECT_EQ(c.insertions, 2u);
  EXPECT_EQ(c.substitutions + c.deletions, 0u);
}

TEST(Wer, CanExceedOne) {
  EXPECT_NEAR(wer(split("a"), split("x y z")), 3.0, 1e-12);
}

TEST(Wer, EmptyReferenceIsError) { EXPECT_THROW(wer({}, split("a")), PreconditionError); }

TEST(Wer, AgreesWithDynamicProgrammingOracle) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 10000; ++i) {
    const Tokens ref = random_tokens(rng, 1, 12);
    const Tokens hyp = random_tokens(rng, 0, 12);
    const double expected = static_cast<double>(edit_distance(ref, hyp)) / ref.size();
    ASSERT_NEAR(wer(ref, hyp), expected, 1e-12) << i;
    const EditCounts c = align_tokens(ref, hyp);
    // The alignment is consistent with the lengths.
    ASSERT_EQ(ref.size() - c.deletions + c.insertions, hyp.size());
  }
}

TEST(Wer, TriangleInequality) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 2000; ++i) {
    const Tokens a = random_tokens(rng, 1, 12);
    const Tokens b = random_tokens(rng, 1, 12);
    const Tokens c = random_tokens(rng, 0, 12);
    const double n = static_cast<double>(a.size());
    EXPECT_LE(wer(a, c), wer(a, b) + wer(b, c) * b.size() / n + 1e-12);
  }
}

TEST(MixNoise, ZeroDbWithEqualPowerNoiseHasUnitScale) {
  const SpeechTrack s = sine(0.5);
  SpeechTrack n = s;
  std::reverse(n.samples.begin(), n.samples.end());
  const MixResult r = mix_noise(s, n, 0.0, 1);
  EXPECT_NEAR(r.noise_scale, 1.0, 1e-9);
}

TEST(MixNoise, MinusTenDbGivesTenTimesNoisePower) {
  const SpeechTrack s = sine(1.0, 0.05);
  const MixResult r = mix_noise(s, white_gaussian_noise(), -10.0, 7);
  EXPECT_NEAR(r.noise_power / r.signal_power, 10.0, 1e-6);
  ASSERT_EQ(r.clipped_samples, 0u);
  // Measured on the output: recover the noise by subtraction.
  std::vector<float> noise(s.samples.size());
  for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = r.track.samples[i] - s.samples[i];
  const double snr = 10 * std::log10(power(s.samples) / power(noise));
  EXPECT_NEAR(snr, -10.0, 0.01);
}

TEST(MixNoise, SnrPropertyAcrossSettings) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> snr_dist(-15.0, 20.0);
  for (int i = 0; i < 30; ++i) {
    const double snr = snr_dist(rng);
    const SpeechTrack s = sine(0.25, 0.02);
    const MixResult r = mix_noise(s, white_gaussian_noise(), snr, static_cast<std::uint64_t>(i));
    if (r.clipped_samples != 0) continue;
    EXPECT_NEAR(10 * std::log10(r.signal_power / r.noise_power), snr, 0.01);
  }
}

TEST(MixNoise, DeterministicForSeed) {
  const SpeechTrack s = sine(0.2);
  const MixResult a = mix_noise(s, white_gaussian_noise(), -7.5, 3);
  const MixResult b = mix_noise(s, white_gaussian_noise(), -7.5, 3);
  const MixResult c = mix_noise(s, white_gaussian_noise(), -7.5, 4);
  EXPECT_EQ(a.track.samples, b.track.samples);
  EXPECT_NE(a.track.samples, c.track.samples);
}

TEST(MixNoise, ClippingIsReported) {
  const SpeechTrack s = sine(0.2, 0.9);
  const MixResult r = mix_noise(s, white_gaussian_noise(), -10.0, 1);
  EXPECT_GT(r.clipped_samples, 0u);
  EXPECT_GT(r.clipping_rate, 0.0);
  for (float v : r.track.samples) {
    EXPECT_LE(v, 1.0f);
    EXPECT_GE(v, -1.0f);
  }
}

TEST(MixNoise, SilentSignalIsError) {
  SpeechTrack s;
  s.samples.assign(1600, 0.0f);
  EXPECT_THROW(mix_noise(s, white_gaussian_noise(), 0.0, 1), PreconditionError);
}

TEST(Spearman, WorkedExamples) {
  EXPECT_NEAR(*spearman_rho({1, 2, 3, 4}, {1, 2, 3, 4}), 1.0, 1e-12);
  EXPECT_NEAR(*spearman_rho({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-12);
  EXPECT_NEAR(*spearman_rho({1, 2, 3, 4}, {1, 3, 2, 4}), 0.8, 1e-6);
}

TEST(Spearman, AverageRanksForTies) {
  const auto r = average_ranks({10, 20, 20, 5});
  EXPECT_EQ(r, (std::vector<double>{2, 3.5, 3.5, 1}));
}

TEST(Spearman, ConstantInputIsUndefined) {
  EXPECT_FALSE(spearman_rho({1, 1, 1}, {1, 2, 3}).has_value());
}

TEST(Spearman, LengthMismatchIsError) {
  EXPECT_THROW(spearman_rho({1, 2}, {1, 2, 3}), PreconditionError);
  EXPECT_THROW(spearman_rho({1}, {1}), PreconditionError);
}

TEST(Spearman, InvariantUnderMonotoneTransforms) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(8), b(8);
    for (auto& v : a) v = std::round(nd(rng) * 3);  // some ties
    for (auto& v : b) v = nd(rng);
    const auto base = spearman_rho(a, b);
    std::vector<double> ta(a), tb(b);
    for (auto& v : ta) v = std::exp(v) + 2.0;
    for (auto& v : tb) v = v * v * v - 1.0;
    const auto moved = spearman_rho(ta, tb);
    ASSERT_EQ(base.has_value(), moved.has_value());
    if (base) {
      EXPECT_NEAR(*base, *moved, 1e-12);
      EXPECT_LE(std::abs(*base), 1.0 + 1e-12);
    }
  }
}

namespace {

class FixedRecognizer : public Recognizer {
 public:
  explicit FixedRecognizer(Tokens out, Modality m = Modality::AudioVisual)
      : out_(std::move(out)), m_(m) {}
  std::string name() const override { return "fixed"; }
  Modality modality() const override { return m_; }
  Tokens transcribe(const RecognitionRequest& req) override {
    last_snr = req.snr_db;
    saw_audio = req.audio != nullptr;
    return out_;
  }
  double last_snr = 0;
  bool saw_audio = false;

 private:
  Tokens out_;
  Modality m_;
};

class ThrowingRecognizer : public Recognizer {
 public:
  std::string name() const override { return "broken"; }
  Modality modality() const override { return Modality::AudioVisual; }
  Tokens transcribe(const RecognitionRequest&) override { throw AdapterError("boom"); }
};

}  // namespace

TEST(Avlr, ScoresRecognizerOutput) {
  MotionSequence m(25, 4, 25.0);
  const SpeechTrack a = sine(1.0);
  FixedRecognizer rec(split("a x c"));
  AvlrOptions opt;
  opt.snr_db = -10.0;
  const AvlrResult r = avlr("clip", "en", m, a, split("a b c"), rec, opt);
  EXPECT_NEAR(r.wer, 1.0 / 3.0, 1e-12);
  EXPECT_EQ(rec.last_snr, -10.0);
  EXPECT_TRUE(rec.saw_audio);
}

TEST(Avlr, RejectsDurationMismatchAndVisualOnly) {
  MotionSequence m(20, 4, 25.0);
  const SpeechTrack a = sine(1.0);
  FixedRecognizer rec(split("a"));
  EXPECT_THROW(avlr("clip", "en", m, a, split("a"), rec, {}), PreconditionError);
  MotionSequence ok(25, 4, 25.0);
  FixedRecognizer vsr(split("a"), Modality::VisualOnly);
  EXPECT_THROW(avlr("clip", "en", ok, a, split("a"), vsr, {}), PreconditionError);
}

TEST(Avlr, RecognizerFailureNamesClip) {
  MotionSequence m(25, 4, 25.0);
  ThrowingRecognizer rec;
  try {
    avlr("clip_0042", "en", m, sine(1.0), split("a"), rec, {});
    FAIL();
  } catch (const AdapterError& e) {
    EXPECT_NE(std::string(e.what()).find("clip_0042"), std::string::npos);
  }
}

TEST(EvalReport, AggregatesMatchRows) {
  EvalReport r;
  r.rows = {{"a", "en", 1.0, 0.5}, {"b", "en", 3.0, 0.0}, {"c", "fr", 2.0, std::nullopt}};
  r.aggregate();
  EXPECT_NEAR(*r.per_language.at("en").mean_lve, 2.0, 1e-12);
  EXPECT_NEAR(*r.per_language.at("en").mean_avlr_wer, 0.25, 1e-12);
  EXPECT_FALSE(r.per_language.at("fr").mean_avlr_wer.has_value());
  EXPECT_NO_THROW(r.check_consistent());
  r.per_language.at("en").mean_lve = 2.5;
  EXPECT_THROW(r.check_consistent(), ContractError);

  const std::string csv = r.to_csv();
  EXPECT_NE(csv.find("clip_id"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}
