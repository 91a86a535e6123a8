#pragma once

// Clip data model and on-disk formats: `.mtlk` motion files, PCM16 WAV audio
// and the `corpus.json` manifest.

#include "multitalk/autograd.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace multitalk {

inline constexpr double kDefaultFps = 25.0;
inline constexpr int kDefaultSampleRate = 16000;
inline constexpr std::uint32_t kMotionFormatVersion = 1;
inline constexpr int kFlameVertexCount = 5023;

// T x N x 3 vertex animation, stored frame-major.
struct MotionSequence {
  int frames = 0;
  int vertex_count = 0;
  double fps = kDefaultFps;
  std::vector<float> vertices;

  MotionSequence() = default;
  MotionSequence(int t, int n, double frame_rate)
      : frames(t), vertex_count(n), fps(frame_rate),
        vertices(static_cast<std::size_t>(t) * n * 3, 0.0f) {}

  float& at(int t, int v, int c) {
    return vertices[(static_cast<std::size_t>(t) * vertex_count + v) * 3 + c];
  }
  float at(int t, int v, int c) const {
    return vertices[(static_cast<std::size_t>(t) * vertex_count + v) * 3 + c];
  }
  double duration_seconds() const { return frames / fps; }

  // T x 3N matrix, one flattened frame per row.
  ad::Matrix to_matrix() const;
  static MotionSequence from_matrix(const ad::Matrix& m, double fps);

  // Throws ValidationError / NonFiniteError on invariant violations.
  void validate() const;
};

struct SpeechTrack {
  std::vector<float> samples;
  int sample_rate = kDefaultSampleRate;

  double duration_seconds() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

struct ClipRecord {
  std::string id;
  std::string language;
  std::string motion_path;  // relative to the manifest directory
  std::string audio_path;   // relative to the manifest directory
  std::vector<std::string> transcript;
  double fps = kDefaultFps;
};

struct CorpusManifest {
  std::string rig_id;
  int vertex_count = 0;
  std::vector<int> lip_vertex_indices;
  std::vector<std::string> languages;
  std::vector<ClipRecord> clips;
  std::map<std::string, std::vector<std::string>> splits;
  double fps = kDefaultFps;
  int sample_rate = kDefaultSampleRate;
  // Directory relative paths resolve against. Not serialized.
  std::filesystem::path base_dir;

  const ClipRecord& clip(const std::string& id) const;
  std::vector<const ClipRecord*> split(const std::string& name) const;
  std::filesystem::path resolve(const std::string& relative) const {
    return base_dir / relative;
  }

  void validate() const;
};

nlohmann::json manifest_to_json(const CorpusManifest& manifest);
CorpusManifest manifest_from_json(const nlohmann::json& doc);

CorpusManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);

std::string encode_motion(const MotionSequence& seq);
MotionSequence decode_motion(const std::string& bytes);
MotionSequence read_motion(const std::filesystem::path& path);
void write_motion(const MotionSequence& seq, const std::filesystem::path& path);

std::string encode_wav(const SpeechTrack& track);
SpeechTrack decode_wav(const std::string& bytes);
SpeechTrack read_wav(const std::filesystem::path& path);
void write_wav(const SpeechTrack& track, const std::filesystem::path& path);
// Duration from the header alone.
double wav_duration_seconds(const std::filesystem::path& path);

// Loads a clip's motion and checks it against the manifest rig.
MotionSequence load_clip_motion(const CorpusManifest& manifest, const ClipRecord& clip);
SpeechTrack load_clip_audio(const CorpusManifest& manifest, const ClipRecord& clip);

struct CorpusStats {
  std::size_t clip_count = 0;
  double total_seconds = 0.0;
  double total_hours = 0.0;
  double avg_duration_s = 0.0;
  // Share of total duration per language.
  std::map<std::string, double> per_language_share;
  bool empty = true;

  nlohmann::json to_json() const;
};

CorpusStats corpus_stats(const CorpusManifest& manifest);

}  // namespace multitalk
