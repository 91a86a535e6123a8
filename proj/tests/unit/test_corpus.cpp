#include "multitalk/corpus.hpp"
#include "multitalk/error.hpp"
#include "multitalk/fileutil.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

using namespace multitalk;

namespace {

MotionSequence random_motion(int t, int n, std::mt19937_64& rng, double fps = 25.0) {
  MotionSequence m(t, n, fps);
  std::normal_distribution<float> nd(0.0f, 3.0f);
  for (auto& v : m.vertices) v = nd(rng);
  return m;
}

SpeechTrack tone(double seconds, int rate = 16000) {
  SpeechTrack s;
  s.sample_rate = rate;
  s.samples.resize(static_cast<std::size_t>(std::lround(seconds * rate)));
  for (std::size_t i = 0; i < s.samples.size(); ++i) {
    s.samples[i] = static_cast<float>(0.25 * std::sin(0.01 * static_cast<double>(i)));
  }
  return s;
}

CorpusManifest two_clip_manifest() {
  CorpusManifest m;
  m.rig_id = "test-rig";
  m.vertex_count = 4;
  m.lip_vertex_indices = {1, 3};
  m.languages = {"en", "fr"};
  m.clips = {{"c1", "en", "motion/c1.mtlk", "audio/c1.wav", {"a", "b"}, 25.0},
             {"c2", "fr", "motion/c2.mtlk", "audio/c2.wav", {"c"}, 25.0}};
  m.splits = {{"train", {"c1"}}, {"test", {"c2"}}};
  return m;
}

template <typename F>
std::string validation_field(F&& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.field();
  }
  return "<no error>";
}

}  // namespace

TEST(Motion, RoundTripIsBitExact) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const MotionSequence m = random_motion(1 + trial % 5, 4 + trial, rng, 20.0 + trial);
    const MotionSequence back = decode_motion(encode_motion(m));
    EXPECT_EQ(back.frames, m.frames);
    EXPECT_EQ(back.vertex_count, m.vertex_count);
    EXPECT_EQ(back.fps, static_cast<double>(static_cast<float>(m.fps)));
    EXPECT_EQ(back.vertices, m.vertices);
  }
}

TEST(Motion, FileRoundTrip) {
  mt_test::TempDir dir("motion");
  std::mt19937_64 rng(4);
  const MotionSequence m = random_motion(3, 4, rng);
  write_motion(m, dir / "x.mtlk");
  const MotionSequence back = read_motion(dir / "x.mtlk");
  EXPECT_EQ(back.vertices, m.vertices);
  // magic, version, T, N, fps, payload
  EXPECT_EQ(read_file(dir / "x.mtlk").size(), 4u + 4 + 4 + 4 + 4 + 3 * 4 * 3 * 4);
}

TEST(Motion, HeaderLayout) {
  MotionSequence m(2, 4, 25.0);
  const std::string bytes = encode_motion(m);
  EXPECT_EQ(bytes.substr(0, 4), "MTLK");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 4u);
}

TEST(Motion, TruncatedPayloadIsRejected) {
  std::mt19937_64 rng(5);
  MotionSequence m = random_motion(5, 4, rng);
  std::string bytes = encode_motion(m);
  bytes.resize(bytes.size() - 4 * 3 * 4);  // one frame short
  EXPECT_THROW(decode_motion(bytes), FormatError);
}

TEST(Motion, BadMagicIsRejected) {
  MotionSequence m(2, 4, 25.0);
  std::string bytes = encode_motion(m);
  bytes[0] = 'X';
  EXPECT_THROW(decode_motion(bytes), FormatError);
}

TEST(Motion, NonFiniteValueNamesFrameAndVertex) {
  std::mt19937_64 rng(6);
  MotionSequence m = random_motion(3, 5, rng);
  std::string bytes = encode_motion(m);
  // Frame 2, vertex 3, component 1.
  const std::size_t idx = (2 * 5 + 3) * 3 + 1;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(&bytes[20 + idx * 4], &nan, 4);
  try {
    decode_motion(bytes);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("frame 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("vertex 3"), std::string::npos) << msg;
  }
}

TEST(Motion, ValidateRejectsTooFewVertices) {
  MotionSequence m(2, 3, 25.0);
  EXPECT_THROW(m.validate(), ValidationError);
  MotionSequence empty(0, 4, 25.0);
  EXPECT_THROW(empty.validate(), ValidationError);
}

TEST(Motion, MatrixConversion) {
  std::mt19937_64 rng(7);
  const MotionSequence m = random_motion(4, 6, rng);
  const ad::Matrix mat = m.to_matrix();
  ASSERT_EQ(mat.rows(), 4);
  ASSERT_EQ(mat.cols(), 18);
  EXPECT_EQ(mat(2, 3 * 5 + 1), m.at(2, 5, 1));
  EXPECT_EQ(MotionSequence::from_matrix(mat, 25.0).vertices, m.vertices);
}

TEST(Wav, RoundTripWithinQuantization) {
  mt_test::TempDir dir("wav");
  const SpeechTrack t = tone(0.5);
  write_wav(t, dir / "a.wav");
  const SpeechTrack back = read_wav(dir / "a.wav");
  ASSERT_EQ(back.samples.size(), t.samples.size());
  EXPECT_EQ(back.sample_rate, 16000);
  for (std::size_t i = 0; i < t.samples.size(); ++i) {
    EXPECT_NEAR(back.samples[i], t.samples[i], 1.0 / 32767.0);
  }
  EXPECT_NEAR(wav_duration_seconds(dir / "a.wav"), 0.5, 1e-9);
  // Re-encoding decoded PCM16 is lossless.
  EXPECT_EQ(encode_wav(back), encode_wav(decode_wav(encode_wav(back))));
}

TEST(Manifest, JsonRoundTrip) {
  const CorpusManifest m = two_clip_manifest();
  m.validate();
  const CorpusManifest back = manifest_from_json(manifest_to_json(m));
  EXPECT_EQ(back.clips.size(), 2u);
  EXPECT_EQ(back.rig_id, "test-rig");
  EXPECT_EQ(back.lip_vertex_indices, m.lip_vertex_indices);
  EXPECT_EQ(back.clips[0].transcript, m.clips[0].transcript);
  EXPECT_EQ(back.splits, m.splits);
  EXPECT_EQ(manifest_to_json(back), manifest_to_json(m));
}

TEST(Manifest, LoadWrittenFile) {
  mt_test::TempDir dir("manifest");
  save_manifest(two_clip_manifest(), dir / "corpus.json");
  const CorpusManifest m = load_manifest(dir / "corpus.json");
  EXPECT_EQ(m.clips.size(), 2u);
  EXPECT_EQ(m.base_dir, dir.path());
  EXPECT_EQ(m.split("test").front()->id, "c2");
}

TEST(Manifest, ValidationNamesOffendingField) {
  {
    CorpusManifest m = two_clip_manifest();
    m.lip_vertex_indices = {1, 4};  // == N
    EXPECT_EQ(validation_field([&] { m.validate(); }), "lip_vertex_indices");
  }
  {
    CorpusManifest m = two_clip_manifest();
    m.lip_vertex_indices = {3, 1};
    EXPECT_EQ(validation_field([&] { m.validate(); }), "lip_vertex_indices");
  }
  {
    CorpusManifest m = two_clip_manifest();
    m.lip_vertex_indices.clear();
    EXPECT_EQ(validation_field([&] { m.validate(); }), "lip_vertex_indices");
  }
  {
    CorpusManifest m = two_clip_manifest();
    m.splits["test"] = {"x9"};
    EXPECT_EQ(validation_field([&] { m.validate(); }), "splits.test");
  }
  {
    CorpusManifest m = two_clip_manifest();
    m.clips[1].id = "c1";
    m.splits = {};
    EXPECT_EQ(validation_field([&] { m.validate(); }), "clips[1].id");
  }
  {
    CorpusManifest m = two_clip_manifest();
    m.clips[1].language = "de";
    EXPECT_EQ(validation_field([&] { m.validate(); }), "clips[1].language");
  }
  {
    CorpusManifest m = two_clip_manifest();
    m.splits["test"] = {"c1"};
    EXPECT_EQ(validation_field([&] { m.validate(); }), "splits");
  }
}

TEST(Manifest, MalformedJsonIsParseError) {
  mt_test::TempDir dir("badjson");
  write_file(dir / "corpus.json", "{\"rig_id\": ");
  EXPECT_THROW(load_manifest(dir / "corpus.json"), ParseError);
}

// Random corruptions of a valid manifest either load into something that
// validates or throw one of the library's errors.
TEST(Manifest, FuzzedManifestsNeverLoadInvalid) {
  const std::string good = manifest_to_json(two_clip_manifest()).dump();
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<std::size_t> pos(0, good.size() - 1);
  std::uniform_int_distribution<int> ch(32, 126);
  int loaded = 0;
  for (int i = 0; i < 2000; ++i) {
    std::string doc = good;
    const int edits = 1 + i % 3;
    for (int e = 0; e < edits; ++e) doc[pos(rng)] = static_cast<char>(ch(rng));
    try {
      const CorpusManifest m = manifest_from_json(nlohmann::json::parse(doc));
      EXPECT_NO_THROW(m.validate());
      ++loaded;
    } catch (const nlohmann::json::exception&) {
    } catch (const Error&) {
    }
  }
  EXPECT_GT(loaded, 0);
}

TEST(Stats, TwoClipArithmetic) {
  mt_test::TempDir dir("stats");
  CorpusManifest m = two_clip_manifest();
  m.base_dir = dir.path();
  write_wav(tone(4.0), dir / "audio/c1.wav");
  write_wav(tone(6.0), dir / "audio/c2.wav");
  const CorpusStats s = corpus_stats(m);
  EXPECT_EQ(s.clip_count, 2u);
  EXPECT_NEAR(s.total_seconds, 10.0, 1e-9);
  EXPECT_NEAR(s.avg_duration_s, 5.0, 1e-9);
  EXPECT_NEAR(s.total_hours, 10.0 / 3600.0, 1e-12);
  EXPECT_FALSE(s.empty);
  double sum = 0;
  for (const auto& [lang, share] : s.per_language_share) {
    EXPECT_GE(share, 0.0);
    sum += share;
  }
  EXPECT_NEAR(sum, 1.0, 1e-9);
  EXPECT_NEAR(s.per_language_share.at("en"), 0.4, 1e-9);
}

TEST(Stats, EmptyManifest) {
  CorpusManifest m = two_clip_manifest();
  m.clips.clear();
  m.splits.clear();
  const CorpusStats s = corpus_stats(m);
  EXPECT_EQ(s.clip_count, 0u);
  EXPECT_EQ(s.total_seconds, 0.0);
  EXPECT_EQ(s.avg_duration_s, 0.0);
  EXPECT_TRUE(s.empty);
  EXPECT_TRUE(s.to_json().at("empty").get<bool>());
}

TEST(Stats, MissingClipFileIsIoError) {
  mt_test::TempDir dir("stats_missing");
  CorpusManifest m = two_clip_manifest();
  m.base_dir = dir.path();
  write_wav(tone(1.0), dir / "audio/c1.wav");
  EXPECT_THROW(corpus_stats(m), IoError);
}

TEST(Stats, LargeCorpusAverageIsConsistent) {
  // 423.2 h over 294k clips is 5.18 s per clip.
  EXPECT_NEAR(423.2 * 3600.0 / 294000.0, 5.2, 0.05);
}
