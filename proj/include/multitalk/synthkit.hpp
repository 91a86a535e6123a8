#pragma once

// Hermetic synthetic corpus: a low-poly viseme rig, symbolic languages that
// map symbols to visemes and tone-complex audio signatures, and an oracle
// recognizer that reads visemes back off the lips.

#include "multitalk/autograd.hpp"
#include "multitalk/corpus.hpp"
#include "multitalk/metrics.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace multitalk {

struct VisemeRig {
  std::string rig_id = "synthkit-viseme-60";
  ad::Matrix base_mesh;  // N x 3
  std::vector<int> lip_vertex_indices;
  std::vector<ad::Matrix> viseme_deltas;  // V entries of N x 3, zero off the lips

  int vertex_count() const { return static_cast<int>(base_mesh.rows()); }
  int viseme_count() const { return static_cast<int>(viseme_deltas.size()); }

  // Default: N = 60, lips = vertices 40..59, V = 8. Visemes are redrawn until
  // every pair differs on the lips by more than `min_separation`.
  static VisemeRig make(std::uint64_t seed, int vertex_count = 60, int lip_start = 40,
                        int visemes = 8, double min_separation = 0.5);

  // Euclidean distance between two poses restricted to the lip vertices.
  double lip_distance(const ad::Matrix& a, const ad::Matrix& b) const;
  void validate(double min_separation = 0.0) const;

  nlohmann::json to_json() const;
  static VisemeRig from_json(const nlohmann::json& j);
};

struct SyntheticLanguage {
  std::string tag;
  std::vector<std::string> symbols;
  std::map<std::string, int> viseme_of;
  std::map<std::string, int> signature_of;
  double symbol_duration = 0.24;

  nlohmann::json to_json() const;
  static SyntheticLanguage from_json(const nlohmann::json& j);
};

// Audio signature synthesis parameters shared by a whole corpus.
struct SignatureBank {
  int count = 0;
  double amplitude = 0.3;
  double ramp_seconds = 0.01;

  // Three partial frequencies (Hz) for signature `id`.
  std::array<double, 3> partials(int id) const;
};

struct SynthClip {
  MotionSequence motion;
  SpeechTrack audio;
  Tokens transcript;
};

struct SynthClipOptions {
  double fps = kDefaultFps;
  int sample_rate = kDefaultSampleRate;
  double crossfade_seconds = 0.08;
  double noise_level = 0.005;
};

// Motion: base + viseme delta per frame with a raised-cosine cross-fade centred
// on each symbol boundary. Audio: concatenated signatures plus seeded noise.
SynthClip synth_clip(const Tokens& symbols, const SyntheticLanguage& language,
                     const VisemeRig& rig, const SignatureBank& bank,
                     const SynthClipOptions& options, std::uint64_t seed);
// Single-character symbols, e.g. "abc".
SynthClip synth_clip(const std::string& symbols, const SyntheticLanguage& language,
                     const VisemeRig& rig, const SignatureBank& bank,
                     const SynthClipOptions& options, std::uint64_t seed);

inline constexpr int kNeutralViseme = -1;

// Nearest viseme (or neutral) per frame by lip-region distance.
std::vector<int> classify_frames(const MotionSequence& motion, const VisemeRig& rig);

// Decodes lip motion back to symbols. Runs of one viseme count
// max(1, round(run / frames_per_symbol)) symbols; neutral runs emit nothing. Visemes outside the
// language's map decode to "<unk>".
Tokens oracle_recognize(const MotionSequence& motion, const VisemeRig& rig,
                        const SyntheticLanguage& language);

struct SynthKitSpec {
  VisemeRig rig;
  std::vector<SyntheticLanguage> languages;
  SignatureBank bank;
  SynthClipOptions clip_options;
  bool conflicting = false;

  const SyntheticLanguage& language(const std::string& tag) const;

  nlohmann::json to_json() const;
  static SynthKitSpec from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static SynthKitSpec load(const std::filesystem::path& path);
};

inline constexpr const char* kSynthKitFile = "synthkit.json";
inline constexpr const char* kManifestFile = "corpus.json";

// Recognizer adapter over oracle_recognize. Audio is accepted and ignored.
class OracleRecognizer : public Recognizer {
 public:
  explicit OracleRecognizer(SynthKitSpec spec) : spec_(std::move(spec)) {}
  std::string name() const override { return "synthkit-oracle"; }
  Modality modality() const override { return Modality::AudioVisual; }
  Tokens transcribe(const RecognitionRequest& request) override;

 private:
  SynthKitSpec spec_;
};

struct SynthCorpusConfig {
  int languages = 2;
  int clips_per_language = 150;
  int min_symbols = 3;
  int max_symbols = 8;
  int symbols_per_language = 6;
  int visemes = 8;
  bool conflicting = false;
  std::uint64_t seed = 11;
  std::uint64_t rig_seed = 1234;
  double symbol_duration = 0.24;
  double train_fraction = 0.8;
  SynthClipOptions clip_options;

  void validate() const;
  nlohmann::json to_json() const;
};

// Builds the language table for a config (tags, viseme maps, signatures).
SynthKitSpec make_synthkit_spec(const SynthCorpusConfig& config);

// Writes corpus.json, synthkit.json, mel_profile.json, motion/*.mtlk and
// audio/*.wav under out_dir and returns the manifest.
CorpusManifest build_synthetic_corpus(const SynthCorpusConfig& config,
                                      const std::filesystem::path& out_dir);

// Deterministic 64-bit seed from a master seed and a string key.
std::uint64_t derive_seed(std::uint64_t master, const std::string& key);

}  // namespace multitalk
