#pragma once

// Lip-sync evaluation: LVE, WER, SNR-controlled noise mixing, the AVLR harness
// over a pluggable recognizer, and Spearman rank correlation.

#include "multitalk/corpus.hpp"
#include "multitalk/process.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace multitalk {

using Tokens = std::vector<std::string>;

// Mean over frames of the maximum Euclidean distance across lip vertices.
double lve(const MotionSequence& pred, const MotionSequence& gt,
           const std::vector<int>& lip_indices);

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t total() const { return substitutions + deletions + insertions; }
};

// Minimum-edit alignment counts (Levenshtein, unit costs).
EditCounts align_tokens(const Tokens& ref, const Tokens& hyp);
// (S + D + I) / |ref|. May exceed 1.
double wer(const Tokens& ref, const Tokens& hyp);

// Produces n noise samples for a given seed.
using NoiseGenerator = std::function<std::vector<float>(std::size_t n, std::uint64_t seed)>;
NoiseGenerator white_gaussian_noise();

struct MixResult {
  SpeechTrack track;
  double noise_scale = 0.0;
  double signal_power = 0.0;
  double noise_power = 0.0;  // of the scaled noise
  std::size_t clipped_samples = 0;
  double clipping_rate = 0.0;
};

// Scales noise so 10 log10(P_signal / P_noise) = snr_db (P = mean square), adds
// it and clips to [-1, 1]. A noise track longer than the signal is read from a
// seed-chosen offset.
MixResult mix_noise(const SpeechTrack& track, const SpeechTrack& noise, double snr_db,
                    std::uint64_t seed);
MixResult mix_noise(const SpeechTrack& track, const NoiseGenerator& noise, double snr_db,
                    std::uint64_t seed);

enum class Modality { AudioVisual, VisualOnly };

struct RecognitionRequest {
  std::string clip_id;
  std::string language;
  const MotionSequence* motion = nullptr;
  const SpeechTrack* audio = nullptr;  // null for visual-only recognizers
  double snr_db = 0.0;
};

class Recognizer {
 public:
  virtual ~Recognizer() = default;
  virtual std::string name() const = 0;
  virtual Modality modality() const = 0;
  virtual Tokens transcribe(const RecognitionRequest& request) = 0;
};

// Talks to an external recognizer over stdin/stdout, one JSON request line
// per clip:
//   {"clip_id": ..., "language": ..., "motion_path": ..., "audio_path": ...,
//    "snr_db": ...}
// and one response line of space-separated tokens. Motion and the noise-mixed
// WAV are staged under `work_dir`.
class ExternalRecognizer : public Recognizer {
 public:
  ExternalRecognizer(std::string command, std::filesystem::path work_dir,
                     Modality modality = Modality::AudioVisual);

  std::string name() const override { return "external:" + command_; }
  Modality modality() const override { return modality_; }
  Tokens transcribe(const RecognitionRequest& request) override;

 private:
  std::string command_;
  std::filesystem::path work_dir_;
  Modality modality_;
  std::mutex mutex_;
  LineProcess process_;
};

struct AvlrResult {
  double wer = 0.0;
  Tokens hypothesis;
  double clipping_rate = 0.0;
};

struct AvlrOptions {
  double snr_db = -7.5;
  std::uint64_t seed = 0;
  NoiseGenerator noise = white_gaussian_noise();
};

AvlrResult avlr(const std::string& clip_id, const std::string& language,
                const MotionSequence& motion, const SpeechTrack& clean_audio,
                const Tokens& reference, Recognizer& recognizer, const AvlrOptions& options);

// Rank correlation with average ranks for ties; nullopt when either list is
// constant.
std::optional<double> spearman_rho(const std::vector<double>& a, const std::vector<double>& b);
std::vector<double> average_ranks(const std::vector<double>& values);

struct EvalRow {
  std::string clip_id;
  std::string language;
  std::optional<double> lve;
  std::optional<double> avlr_wer;
};

struct LanguageAggregate {
  std::size_t clips = 0;
  std::optional<double> mean_lve;
  std::optional<double> mean_avlr_wer;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::map<std::string, LanguageAggregate> per_language;
  nlohmann::json config = nlohmann::json::object();

  // Recomputes per_language from rows.
  void aggregate();
  // Throws when per_language disagrees with a recomputation from rows.
  void check_consistent(double tolerance = 1e-12) const;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

}  // namespace multitalk
