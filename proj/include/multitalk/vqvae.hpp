#pragma once

// Stage 1: quantized motion autoencoder. A causal transformer encoder maps
// template-relative motion to T' = ceil(T/q) latent vectors, each latent is
// snapped to its nearest codebook row, and a symmetric decoder maps codes back
// to motion.

#include "multitalk/autograd.hpp"
#include "multitalk/checkpoint.hpp"
#include "multitalk/corpus.hpp"
#include "multitalk/nn.hpp"
#include "multitalk/optim.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace multitalk {

struct Codebook {
  ad::Matrix entries;  // K x d_z

  int size() const { return static_cast<int>(entries.rows()); }
  int dim() const { return static_cast<int>(entries.cols()); }
};

struct LatentSequence {
  ad::Matrix features;  // T' x d_z
  int stride = 1;
};

struct CodeIndexSequence {
  std::vector<int> indices;
};

struct QuantizeResult {
  LatentSequence quantized;
  CodeIndexSequence indices;
};

// Nearest codebook row per latent row under squared Euclidean distance. Ties
// go to the lowest index.
std::vector<int> nearest_codes(const ad::Matrix& latents, const ad::Matrix& entries);
QuantizeResult quantize(const LatentSequence& latent, const Codebook& codebook);

struct VqLossBreakdown {
  double reconstruction = 0.0;  // mean |V - V^|
  double codebook = 0.0;        // mean (sg(Z^) - Zq)^2
  double commitment = 0.0;      // lambda * mean (Z^ - sg(Zq))^2
  double total = 0.0;
};

VqLossBreakdown vq_loss(const MotionSequence& gt, const MotionSequence& recon,
                        const LatentSequence& latent, const LatentSequence& quantized,
                        double lambda);

struct VqvaeConfig {
  int vertex_count = 0;
  int width = 128;
  int layers = 4;
  int heads = 4;
  int ffn_hidden = 256;
  int downsample = 2;       // q
  int codebook_size = 256;  // K
  int latent_dim = 64;      // d_z
  double commitment = 0.25; // lambda

  void validate() const;
  nlohmann::json to_json() const;
  static VqvaeConfig from_json(const nlohmann::json& j);
};

class VqvaeModel {
 public:
  VqvaeModel(const VqvaeConfig& config, std::uint64_t seed);

  const VqvaeConfig& config() const { return config_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }
  Codebook codebook() const { return {params_.at("codebook").value}; }

  // Neutral face (1 x 3N) subtracted before encoding and added after decoding.
  const ad::RowVector& template_face() const { return template_; }
  void set_template_face(const ad::RowVector& face);

  // Template-relative motion (T x 3N) -> latent (T' x d_z).
  ad::Var encode_graph(nn::Scope& s, const ad::Matrix& offsets, bool check_finite) const;
  // Quantized latent (T' x d_z) -> template-relative motion (frames x 3N),
  // frames <= T' * q.
  ad::Var decode_graph(nn::Scope& s, const ad::Var& quantized, int frames,
                       bool check_finite) const;

  LatentSequence encode(const MotionSequence& motion) const;
  // Decodes T' * q frames, or `frames` when given (truncation of the tail).
  MotionSequence decode(const LatentSequence& quantized, int frames = -1,
                        double fps = kDefaultFps) const;
  MotionSequence reconstruct(const MotionSequence& motion) const;

  ad::Matrix offsets_of(const MotionSequence& motion) const;
  int latent_frames(int frames) const {
    return (frames + config_.downsample - 1) / config_.downsample;
  }

 private:
  void check_rig(const MotionSequence& motion) const;

  VqvaeConfig config_;
  ad::ParameterStore params_;
  ad::RowVector template_;
};

// One stage-1 training forward pass.
struct Stage1Forward {
  ad::Var latent;
  ad::Var reconstruction;
  ad::Var reconstruction_loss;
  ad::Var codebook_loss;
  ad::Var commitment_loss;
  ad::Var total;
  std::vector<int> indices;
};

// Builds the L_VQ graph; quantization is straight-through between encoder and
// decoder.
Stage1Forward stage1_forward(nn::Scope& s, const VqvaeModel& model,
                             const ad::Matrix& offsets);

struct Stage1TrainConfig {
  int epochs = 150;
  int batch_size = 1;
  AdamConfig optimizer{1e-4, 0.9, 0.999, 1e-8, 0.01};
  std::uint64_t seed = 0;
  // Called once per finished epoch with the mean L_VQ.
  std::function<void(int epoch, double loss)> on_epoch;

  nlohmann::json to_json() const;
};

struct Stage1Checkpoint {
  VqvaeModel model;
  std::uint64_t seed = 0;
  std::vector<double> loss_history;
  nlohmann::json train_config = nlohmann::json::object();

  CheckpointFile to_file() const;
  static Stage1Checkpoint from_file(const CheckpointFile& file);
  void save(const std::filesystem::path& path) const;
  static Stage1Checkpoint load(const std::filesystem::path& path);
};

// Mean over the first frame of every clip.
ad::RowVector neutral_template(const std::vector<ad::Matrix>& motions);

Stage1Checkpoint train_stage1(const CorpusManifest& corpus, const VqvaeConfig& model_config,
                              const Stage1TrainConfig& train_config);
// Same, over in-memory motions (all treated as training data).
Stage1Checkpoint train_stage1(const std::vector<MotionSequence>& motions,
                              const VqvaeConfig& model_config,
                              const Stage1TrainConfig& train_config);

struct CodebookReport {
  std::vector<std::size_t> histogram;
  double perplexity = 0.0;
  int dead_codes = 0;

  nlohmann::json to_json() const;
};

CodebookReport codebook_report(const std::vector<CodeIndexSequence>& sequences,
                               int codebook_size);

}  // namespace multitalk
