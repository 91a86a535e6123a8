#include "multitalk/error.hpp"
#include "multitalk/fileutil.hpp"
#include "multitalk/synthkit.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

using namespace multitalk;

namespace {

SynthKitSpec default_spec(bool conflicting = false) {
  SynthCorpusConfig c;
  c.conflicting = conflicting;
  return make_synthkit_spec(c);
}

ad::Matrix frame_delta(const MotionSequence& m, int t, const VisemeRig& rig) {
  ad::Matrix d(rig.vertex_count(), 3);
  for (int v = 0; v < rig.vertex_count(); ++v)
    for (int c = 0; c < 3; ++c) d(v, c) = m.at(t, v, c) - rig.base_mesh(v, c);
  return d;
}

Tokens chars(const std::string& s) {
  Tokens t;
  for (char c : s) t.emplace_back(1, c);
  return t;
}

}  // namespace

TEST(Rig, DefaultsAndInvariants) {
  const VisemeRig rig = VisemeRig::make(1234);
  EXPECT_EQ(rig.vertex_count(), 60);
  EXPECT_EQ(rig.viseme_count(), 8);
  ASSERT_EQ(rig.lip_vertex_indices.size(), 20u);
  EXPECT_EQ(rig.lip_vertex_indices.front(), 40);
  EXPECT_EQ(rig.lip_vertex_indices.back(), 59);
  EXPECT_NO_THROW(rig.validate(0.5));
  for (const auto& d : rig.viseme_deltas) {
    EXPECT_EQ(d.topRows(40).cwiseAbs().maxCoeff(), 0.0);
  }
  const VisemeRig back = VisemeRig::from_json(rig.to_json());
  EXPECT_EQ(back.base_mesh, rig.base_mesh);
  EXPECT_EQ(back.viseme_deltas, rig.viseme_deltas);
}

TEST(Rig, OffLipDeltaFailsValidation) {
  VisemeRig rig = VisemeRig::make(1);
  rig.viseme_deltas[2](3, 1) = 0.1;
  EXPECT_THROW(rig.validate(), ValidationError);
}

TEST(SynthClip, SingleSymbolMidFrameIsFullDelta) {
  const SynthKitSpec spec = default_spec();
  const SyntheticLanguage& en = spec.language("en");
  const SynthClip clip = synth_clip("c", en, spec.rig, spec.bank, spec.clip_options, 1);
  const ad::Matrix& full = spec.rig.viseme_deltas[static_cast<std::size_t>(en.viseme_of.at("c"))];
  const ad::Matrix d = frame_delta(clip.motion, clip.motion.frames / 2, spec.rig);
  EXPECT_LT((d - full).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(SynthClip, BoundaryFrameIsHalfwayBlend) {
  const SynthKitSpec spec = default_spec();
  const SyntheticLanguage& en = spec.language("en");
  const SynthClip clip = synth_clip("ab", en, spec.rig, spec.bank, spec.clip_options, 1);
  // 0.24 s at 25 fps: the boundary sits exactly on frame 6.
  const ad::Matrix& da = spec.rig.viseme_deltas[static_cast<std::size_t>(en.viseme_of.at("a"))];
  const ad::Matrix& db = spec.rig.viseme_deltas[static_cast<std::size_t>(en.viseme_of.at("b"))];
  const ad::Matrix d = frame_delta(clip.motion, 6, spec.rig);
  EXPECT_LT((d - (0.5 * da + 0.5 * db)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(SynthClip, DurationArithmetic) {
  const SynthKitSpec spec = default_spec();
  const SynthClip clip =
      synth_clip("abcde", spec.language("en"), spec.rig, spec.bank, spec.clip_options, 1);
  EXPECT_EQ(clip.motion.frames, 30);
  EXPECT_NEAR(clip.audio.duration_seconds(), 1.2, 1e-9);
  EXPECT_EQ(clip.transcript, chars("abcde"));
}

TEST(SynthClip, UnknownSymbolIsError) {
  const SynthKitSpec spec = default_spec();
  EXPECT_THROW(synth_clip("az", spec.language("en"), spec.rig, spec.bank, spec.clip_options, 1),
               PreconditionError);
}

TEST(SynthClip, MotionRespectsRig) {
  const SynthKitSpec spec = default_spec();
  const SynthClip clip =
      synth_clip("fabdce", spec.language("fr"), spec.rig, spec.bank, spec.clip_options, 3);
  clip.motion.validate();
  for (int t = 0; t < clip.motion.frames; ++t) {
    const ad::Matrix d = frame_delta(clip.motion, t, spec.rig);
    EXPECT_LT(d.topRows(40).cwiseAbs().maxCoeff(), 1e-5);
  }
  for (float s : clip.audio.samples) {
    EXPECT_LE(std::abs(s), 1.0f);
  }
}

TEST(SynthClip, AudioIsSeedDeterministic) {
  const SynthKitSpec spec = default_spec();
  const auto& en = spec.language("en");
  const SynthClip a = synth_clip("abc", en, spec.rig, spec.bank, spec.clip_options, 5);
  const SynthClip b = synth_clip("abc", en, spec.rig, spec.bank, spec.clip_options, 5);
  const SynthClip c = synth_clip("abc", en, spec.rig, spec.bank, spec.clip_options, 6);
  EXPECT_EQ(a.audio.samples, b.audio.samples);
  EXPECT_NE(a.audio.samples, c.audio.samples);
  EXPECT_EQ(a.motion.vertices, c.motion.vertices);
}

TEST(Signatures, PairwiseDistinct) {
  const SynthKitSpec spec = default_spec();
  std::set<std::array<double, 3>> seen;
  for (int i = 0; i < spec.bank.count; ++i) {
    EXPECT_TRUE(seen.insert(spec.bank.partials(i)).second);
  }
  for (const auto& lang : spec.languages) {
    std::set<int> sigs;
    for (const auto& [sym, sig] : lang.signature_of) sigs.insert(sig);
    EXPECT_EQ(sigs.size(), lang.symbols.size());
  }
}

TEST(Oracle, InvertsGeneratorOnAbc) {
  const SynthKitSpec spec = default_spec();
  const auto& en = spec.language("en");
  const SynthClip clip = synth_clip("abc", en, spec.rig, spec.bank, spec.clip_options, 1);
  EXPECT_EQ(oracle_recognize(clip.motion, spec.rig, en), chars("abc"));
}

TEST(Oracle, NeutralFaceDecodesToNothing) {
  const SynthKitSpec spec = default_spec();
  MotionSequence m(30, 60, 25.0);
  for (int t = 0; t < 30; ++t)
    for (int v = 0; v < 60; ++v)
      for (int c = 0; c < 3; ++c) m.at(t, v, c) = static_cast<float>(spec.rig.base_mesh(v, c));
  EXPECT_TRUE(oracle_recognize(m, spec.rig, spec.language("en")).empty());
}

namespace {

MotionSequence shuffle_frames(const MotionSequence& m, std::mt19937_64& rng) {
  std::vector<int> order(static_cast<std::size_t>(m.frames));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  MotionSequence s = m;
  const std::size_t stride = static_cast<std::size_t>(m.vertex_count) * 3;
  for (std::size_t t = 0; t < order.size(); ++t) {
    std::copy_n(m.vertices.begin() + order[t] * stride, stride, s.vertices.begin() + t * stride);
  }
  return s;
}

}  // namespace

TEST(Oracle, ShuffledAbabIsWrong) {
  const SynthKitSpec spec = default_spec();
  const auto& en = spec.language("en");
  const SynthClip clip = synth_clip("abab", en, spec.rig, spec.bank, spec.clip_options, 1);
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Tokens hyp = oracle_recognize(shuffle_frames(clip.motion, rng), spec.rig, en);
    EXPECT_NE(hyp, clip.transcript);
    EXPECT_GE(wer(clip.transcript, hyp), 0.5) << "trial " << trial;
  }
}

TEST(Oracle, ShuffledFramesScoreBadly) {
  const SynthKitSpec spec = default_spec();
  const auto& en = spec.language("en");
  const SynthClip clip = synth_clip("fcadbeacfd", en, spec.rig, spec.bank, spec.clip_options, 1);
  std::mt19937_64 rng(17);
  double total = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Tokens hyp = oracle_recognize(shuffle_frames(clip.motion, rng), spec.rig, en);
    EXPECT_NE(hyp, clip.transcript);
    total += wer(clip.transcript, hyp);
  }
  EXPECT_GT(total / 20.0, 0.8);
}

TEST(Oracle, RigMismatchIsError) {
  const SynthKitSpec spec = default_spec();
  MotionSequence m(5, 12, 25.0);
  EXPECT_THROW(oracle_recognize(m, spec.rig, spec.language("en")), ValidationError);
}

TEST(Oracle, RoundTripOnRandomStrings) {
  const SynthKitSpec spec = default_spec();
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> len(1, 12);
  for (int trial = 0; trial < 500; ++trial) {
    const auto& lang = spec.languages[static_cast<std::size_t>(trial % 2)];
    std::uniform_int_distribution<std::size_t> sym(0, lang.symbols.size() - 1);
    Tokens s(static_cast<std::size_t>(len(rng)));
    for (auto& t : s) t = lang.symbols[sym(rng)];
    const SynthClip clip = synth_clip(s, lang, spec.rig, spec.bank, spec.clip_options,
                                      static_cast<std::uint64_t>(trial));
    ASSERT_EQ(oracle_recognize(clip.motion, spec.rig, lang), s) << trial;
  }
}

TEST(Oracle, RecognizerAdapterIgnoresAudio) {
  const SynthKitSpec spec = default_spec();
  const auto& fr = spec.language("fr");
  const SynthClip clip = synth_clip("dab", fr, spec.rig, spec.bank, spec.clip_options, 2);
  OracleRecognizer rec(spec);
  EXPECT_EQ(rec.modality(), Modality::AudioVisual);
  RecognitionRequest req{"x", "fr", &clip.motion, nullptr, -7.5};
  EXPECT_EQ(rec.transcribe(req), chars("dab"));
  EXPECT_EQ(wer(clip.transcript, rec.transcribe(req)), 0.0);
}

TEST(Spec, ConflictingLanguagesShareSignaturesNotVisemes) {
  const SynthKitSpec spec = default_spec(true);
  ASSERT_EQ(spec.languages.size(), 2u);
  const auto& a = spec.languages[0];
  const auto& b = spec.languages[1];
  int differing = 0;
  for (std::size_t i = 0; i < a.symbols.size(); ++i) {
    EXPECT_EQ(a.signature_of.at(a.symbols[i]), b.signature_of.at(b.symbols[i]));
    if (a.viseme_of.at(a.symbols[i]) != b.viseme_of.at(b.symbols[i])) ++differing;
  }
  EXPECT_EQ(differing, static_cast<int>(a.symbols.size()));

  const SynthKitSpec plain = default_spec(false);
  std::set<int> sigs;
  for (const auto& l : plain.languages)
    for (const auto& [s, g] : l.signature_of) sigs.insert(g);
  EXPECT_EQ(sigs.size(), 12u);
}

TEST(Spec, JsonRoundTrip) {
  const SynthKitSpec spec = default_spec(true);
  const SynthKitSpec back = SynthKitSpec::from_json(spec.to_json());
  EXPECT_EQ(back.to_json(), spec.to_json());
  EXPECT_THROW(back.language("xx"), UnknownLanguageError);
}

TEST(DeriveSeed, StableAndKeyed) {
  EXPECT_EQ(derive_seed(11, "en_0001"), derive_seed(11, "en_0001"));
  EXPECT_NE(derive_seed(11, "en_0001"), derive_seed(11, "en_0002"));
  EXPECT_NE(derive_seed(11, "en_0001"), derive_seed(12, "en_0001"));
}

TEST(Corpus, SmallCorpusIsReproducible) {
  mt_test::TempDir a("synth_a"), b("synth_b");
  SynthCorpusConfig c;
  c.clips_per_language = 10;
  const CorpusManifest ma = build_synthetic_corpus(c, a.path());
  const CorpusManifest mb = build_synthetic_corpus(c, b.path());
  EXPECT_EQ(ma.clips.size(), 20u);
  EXPECT_EQ(ma.split("train").size(), 16u);
  EXPECT_EQ(ma.split("test").size(), 4u);
  EXPECT_EQ(sha256_file(a / "corpus.json"), sha256_file(b / "corpus.json"));
  for (const auto& clip : ma.clips) {
    EXPECT_EQ(read_file(a / clip.motion_path), read_file(b / clip.motion_path));
    EXPECT_EQ(read_file(a / clip.audio_path), read_file(b / clip.audio_path));
  }
  EXPECT_TRUE(std::filesystem::exists(a / "synthkit.json"));
  EXPECT_TRUE(std::filesystem::exists(a / "mel_profile.json"));
  // Each language is split 8/2.
  for (const std::string lang : {"en", "fr"}) {
    int train = 0;
    for (const auto* clip : ma.split("train")) train += clip->language == lang;
    EXPECT_EQ(train, 8);
  }
  // Transcripts decode back from the written motion.
  const SynthKitSpec spec = SynthKitSpec::load(a / "synthkit.json");
  for (const auto& clip : ma.clips) {
    EXPECT_EQ(oracle_recognize(load_clip_motion(ma, clip), spec.rig, spec.language(clip.language)),
              clip.transcript);
  }
}

TEST(Corpus, DefaultScaleCounts) {
  mt_test::TempDir dir("synth_full");
  SynthCorpusConfig c;
  c.seed = 11;
  const CorpusManifest m = build_synthetic_corpus(c, dir.path());
  EXPECT_EQ(m.clips.size(), 300u);
  EXPECT_EQ(m.split("train").size(), 240u);
  EXPECT_EQ(m.split("test").size(), 60u);
  const std::string first = sha256_file(dir / "corpus.json");
  mt_test::TempDir again("synth_full2");
  build_synthetic_corpus(c, again.path());
  EXPECT_EQ(sha256_file(again / "corpus.json"), first);
}
