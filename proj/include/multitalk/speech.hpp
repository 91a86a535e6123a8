#pragma once

// Acoustic frontend: log-mel featurizer, per-corpus normalization and the
// adapter slot for external speech encoders.

#include "multitalk/autograd.hpp"
#include "multitalk/corpus.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <memory>
#include <mutex>
#include <string>

namespace multitalk {

struct SpeechFeatures {
  ad::Matrix features;  // T_a x d_s
  double feature_rate = 0.0;

  Eigen::Index frames() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
};

struct MelConfig {
  int sample_rate = kDefaultSampleRate;
  double window_ms = 25.0;
  double hop_ms = 10.0;
  int mel_bands = 80;
  int fft_size = 512;
  double f_min = 0.0;
  double f_max = 8000.0;
  double log_floor = 1e-10;

  int window_samples() const;
  int hop_samples() const;
  double feature_rate() const { return 1000.0 / hop_ms; }

  nlohmann::json to_json() const;
  static MelConfig from_json(const nlohmann::json& j);
};

// Per-band mean/stddev over a corpus.
struct NormalizationProfile {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd stddev;

  static NormalizationProfile fit(const std::vector<ad::Matrix>& feature_sets);
  void apply(ad::Matrix& features) const;

  nlohmann::json to_json() const;
  static NormalizationProfile from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static NormalizationProfile load(const std::filesystem::path& path);
};

inline constexpr const char* kNormalizationProfileFile = "mel_profile.json";

// T_a = 1 + floor((len - window) / hop) log-mel frames.
SpeechFeatures mel_features(const SpeechTrack& track, const MelConfig& config,
                            const NormalizationProfile* profile = nullptr);

// Resamples features onto a T-frame motion grid by linear interpolation with
// both grids spanning the same interval end to end; T = 1 samples the
// temporal midpoint.
ad::Matrix align_to_motion(const SpeechFeatures& features, int target_frames,
                           double target_fps);

class SpeechEncoderAdapter {
 public:
  virtual ~SpeechEncoderAdapter() = default;
  virtual std::string name() const = 0;
  virtual int dim() const = 0;
  virtual double feature_rate() const = 0;
  virtual bool reentrant() const = 0;
  virtual SpeechFeatures extract(const SpeechTrack& track) const = 0;
};

class MelSpeechEncoder : public SpeechEncoderAdapter {
 public:
  explicit MelSpeechEncoder(MelConfig config = {},
                            std::shared_ptr<const NormalizationProfile> profile = nullptr)
      : config_(config), profile_(std::move(profile)) {}

  std::string name() const override { return "log-mel"; }
  int dim() const override { return config_.mel_bands; }
  double feature_rate() const override { return config_.feature_rate(); }
  bool reentrant() const override { return true; }
  SpeechFeatures extract(const SpeechTrack& track) const override;

  const MelConfig& config() const { return config_; }

 private:
  MelConfig config_;
  std::shared_ptr<const NormalizationProfile> profile_;
};

// Calls the adapter and rejects any output that disagrees with its declared
// dimension or rate. Calls into non-reentrant adapters are serialized.
SpeechFeatures extract_checked(const SpeechEncoderAdapter& adapter,
                               const SpeechTrack& track);

}  // namespace multitalk
