#pragma once

// Stage 2: autoregressive transformer decoder that predicts one latent motion
// step at a time from speech and a per-language style vector. Predictions are
// snapped to the frozen stage-1 codebook and decoded to vertices.

#include "multitalk/autograd.hpp"
#include "multitalk/checkpoint.hpp"
#include "multitalk/corpus.hpp"
#include "multitalk/nn.hpp"
#include "multitalk/optim.hpp"
#include "multitalk/speech.hpp"
#include "multitalk/vqvae.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace multitalk {

// What the latent term of the loss pulls predictions toward.
//   Self:        Zq = Q(Z^), the code each prediction currently snaps to.
//   GroundTruth: Zq = Q(E_v(V)), the codes of the ground-truth motion.
enum class LatentTarget { Self, GroundTruth };

std::string to_string(LatentTarget target);
LatentTarget latent_target_from_string(const std::string& s);

struct SynthConfig {
  int speech_dim = 80;
  int width = 128;
  int layers = 2;
  int heads = 4;
  int ffn_hidden = 256;
  int style_dim = 32;  // d_l
  bool use_style = true;
  LatentTarget latent_target = LatentTarget::Self;
  // Copied from the paired stage-1 model.
  int latent_dim = 0;
  int downsample = 0;
  std::vector<std::string> languages;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

// Learnable per-language vectors, stored as parameters "style.<tag>".
class LanguageStyleTable {
 public:
  static std::string param_name(const std::string& language) { return "style." + language; }
};

class SynthModel {
 public:
  SynthModel(const SynthConfig& config, std::uint64_t seed);

  const SynthConfig& config() const { return config_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }

  bool has_language(const std::string& language) const;
  const ad::Matrix& style_vector(const std::string& language) const;
  // Mean over every registered language.
  ad::RowVector mean_style_vector() const;

  // Style input for the graph. Unknown languages throw unless allow_unseen,
  // which substitutes the mean style vector.
  ad::Var style_graph(nn::Scope& s, const std::string& language, bool allow_unseen) const;

  // speech:  T' x (q * d_s) stacked aligned speech features.
  // context: rows 0..steps-2 are the motion latents fed back for steps 1..;
  //          extra rows are ignored.
  // Returns Z^ for steps 0..steps-1 (steps x d_z).
  ad::Var forward_graph(nn::Scope& s, const ad::Matrix& speech, const ad::Var* style,
                        const ad::Matrix& context, int steps) const;

 private:
  SynthConfig config_;
  ad::ParameterStore params_;
};

// Speech features aligned to the T-frame motion grid and stacked q per step.
ad::Matrix stacked_speech(const SpeechFeatures& features, int frames, double fps,
                          int downsample);

// Single prediction z^_t given speech, language and the previous t latents
// (t = past.rows()).
ad::RowVector predict_step(const SynthModel& model, const ad::Matrix& speech,
                           const std::string& language, const ad::Matrix& past,
                           bool allow_unseen = false);

struct GenLossBreakdown {
  double latent = 0.0;  // mean (Z^ - sg(Zq))^2
  double motion = 0.0;  // mean (V^ - V)^2
  double total = 0.0;
};

GenLossBreakdown gen_loss(const ad::Matrix& pred_latents, const ad::Matrix& quantized,
                          const ad::Matrix& pred_motion, const ad::Matrix& gt_motion);

struct Stage2Checkpoint;

struct GenerateOptions {
  bool allow_unseen = false;
  double fps = kDefaultFps;
};

struct Generation {
  MotionSequence motion;
  std::vector<int> code_indices;
  ad::Matrix latents;  // quantized, one codebook row per step
};

// Greedy autoregressive synthesis of round(duration * fps) frames.
Generation generate(const Stage2Checkpoint& synth, const VqvaeModel& vqvae,
                    const SpeechTrack& track, const std::string& language,
                    const GenerateOptions& options = {});

struct Stage2TrainConfig {
  int epochs = 100;
  int batch_size = 1;
  AdamConfig optimizer{1e-4, 0.9, 0.999, 1e-8, 0.0};
  std::uint64_t seed = 0;
  std::function<void(int epoch, double loss)> on_epoch;

  nlohmann::json to_json() const;
};

struct Stage2Checkpoint {
  SynthModel model;
  std::string stage1_sha256;
  MelConfig mel;
  std::optional<NormalizationProfile> profile;
  std::uint64_t seed = 0;
  std::vector<double> loss_history;
  nlohmann::json train_config = nlohmann::json::object();

  MelSpeechEncoder speech_encoder() const;

  CheckpointFile to_file() const;
  static Stage2Checkpoint from_file(const CheckpointFile& file);
  void save(const std::filesystem::path& path) const;
  static Stage2Checkpoint load(const std::filesystem::path& path);

  // Throws ContractError unless `stage1` is the checkpoint this model was
  // trained against.
  void check_stage1(const Stage1Checkpoint& stage1) const;
};

// Fingerprint of a stage-1 checkpoint as stored by Stage2Checkpoint.
std::string stage1_fingerprint(const Stage1Checkpoint& stage1);

struct Stage2Data {
  std::string clip_id;
  std::string language;
  ad::Matrix speech;       // T' x (q * d_s)
  ad::Matrix offsets;      // T x 3N, template-relative ground truth
  ad::Matrix gt_quantized; // T' x d_z, Q(E_v(V))
};

Stage2Data prepare_stage2_clip(const VqvaeModel& vqvae, const SpeechEncoderAdapter& encoder,
                               const std::string& clip_id, const std::string& language,
                               const MotionSequence& motion, const SpeechTrack& audio);

struct Stage2Forward {
  ad::Var latents;
  ad::Var motion;
  ad::Var latent_loss;
  ad::Var motion_loss;
  ad::Var total;
};

// Teacher-forced L_GEN graph for one clip.
Stage2Forward stage2_forward(nn::Scope& synth_scope, nn::Scope& vq_scope,
                             const SynthModel& model, const VqvaeModel& vqvae,
                             const Stage2Data& clip);

// Trains on the "train" split. The mel normalization profile is read from the
// corpus directory when present.
Stage2Checkpoint train_stage2(const CorpusManifest& corpus, const Stage1Checkpoint& stage1,
                              const SynthConfig& model_config,
                              const Stage2TrainConfig& train_config);

Stage2Checkpoint train_stage2(const std::vector<Stage2Data>& clips,
                              const Stage1Checkpoint& stage1, const SynthConfig& model_config,
                              const MelConfig& mel,
                              const std::optional<NormalizationProfile>& profile,
                              const Stage2TrainConfig& train_config);

}  // namespace multitalk
