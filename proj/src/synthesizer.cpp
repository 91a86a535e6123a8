#include "multitalk/synthesizer.hpp"

#include "multitalk/error.hpp"
#include "multitalk/fileutil.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace multitalk {

std::string to_string(LatentTarget target) {
  return target == LatentTarget::Self ? "self" : "ground_truth";
}

LatentTarget latent_target_from_string(const std::string& s) {
  if (s == "self") return LatentTarget::Self;
  if (s == "ground_truth") return LatentTarget::GroundTruth;
  throw ValidationError("latent_target", "expected 'self' or 'ground_truth', got '" + s + "'");
}

// ------------------------------------------------------------------ config --

void SynthConfig::validate() const {
  if (speech_dim < 1) throw ValidationError("synth.speech_dim", "must be >= 1");
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw ValidationError("synth.heads", "width must be divisible by heads");
  }
  if (layers < 0) throw ValidationError("synth.layers", "must be >= 0");
  if (ffn_hidden < 1) throw ValidationError("synth.ffn_hidden", "must be >= 1");
  if (style_dim < 1) throw ValidationError("synth.style_dim", "must be >= 1");
  if (latent_dim < 1) throw ValidationError("synth.latent_dim", "must match the stage-1 d_z");
  if (downsample < 1) throw ValidationError("synth.downsample", "must match the stage-1 q");
  if (languages.empty()) throw ValidationError("synth.languages", "no languages registered");
  for (std::size_t i = 0; i < languages.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (languages[i] == languages[j]) {
        throw ValidationError("synth.languages", "duplicate language '" + languages[i] + "'");
      }
    }
  }
}

nlohmann::json SynthConfig::to_json() const {
  return {{"speech_dim", speech_dim},   {"width", width},
          {"layers", layers},           {"heads", heads},
          {"ffn_hidden", ffn_hidden},   {"style_dim", style_dim},
          {"use_style", use_style},     {"latent_target", to_string(latent_target)},
          {"latent_dim", latent_dim},   {"downsample", downsample},
          {"languages", languages}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.speech_dim = j.value("speech_dim", c.speech_dim);
  c.width = j.value("width", c.width);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
  c.style_dim = j.value("style_dim", c.style_dim);
  c.use_style = j.value("use_style", c.use_style);
  c.latent_target = latent_target_from_string(j.value("latent_target", std::string("self")));
  c.latent_dim = j.at("latent_dim").get<int>();
  c.downsample = j.at("downsample").get<int>();
  c.languages = j.at("languages").get<std::vector<std::string>>();
  c.validate();
  return c;
}

// ------------------------------------------------------------------- model --

SynthModel::SynthModel(const SynthConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int w = config_.width;
  nn::init_linear(params_, "speech.proj", config_.downsample * config_.speech_dim, w, rng);
  params_.add("start", nn::gaussian_matrix(1, w, 0.02, rng));
  nn::init_linear(params_, "motion.in", config_.latent_dim, w, rng);
  for (int l = 0; l < config_.layers; ++l) {
    nn::init_decoder_block(params_, "dec.block" + std::to_string(l), w, config_.ffn_hidden, rng);
  }
  nn::init_layer_norm(params_, "dec.ln_out", w);
  nn::init_linear(params_, "dec.out", w, config_.latent_dim, rng);
  if (config_.use_style) {
    nn::init_linear(params_, "style.proj", config_.style_dim, w, rng);
    for (const auto& lang : config_.languages) {
      params_.add(LanguageStyleTable::param_name(lang),
                  nn::gaussian_matrix(1, config_.style_dim, 1.0, rng));
    }
  }
}

bool SynthModel::has_language(const std::string& language) const {
  return std::find(config_.languages.begin(), config_.languages.end(), language) !=
         config_.languages.end();
}

const ad::Matrix& SynthModel::style_vector(const std::string& language) const {
  if (!has_language(language)) throw UnknownLanguageError(language);
  if (!config_.use_style) throw PreconditionError("model was trained without style vectors");
  return params_.at(LanguageStyleTable::param_name(language)).value;
}

ad::RowVector SynthModel::mean_style_vector() const {
  ad::RowVector acc = ad::RowVector::Zero(config_.style_dim);
  for (const auto& lang : config_.languages) acc += style_vector(lang).row(0);
  return acc / static_cast<double>(config_.languages.size());
}

ad::Var SynthModel::style_graph(nn::Scope& s, const std::string& language,
                                bool allow_unseen) const {
  if (!has_language(language)) {
    if (!allow_unseen) throw UnknownLanguageError(language);
    return s.graph().constant(ad::Matrix(mean_style_vector()));
  }
  return s.param(LanguageStyleTable::param_name(language));
}

ad::Var SynthModel::forward_graph(nn::Scope& s, const ad::Matrix& speech, const ad::Var* style,
                                  const ad::Matrix& context, int steps) const {
  const int tq = static_cast<int>(speech.rows());
  if (speech.cols() != config_.downsample * config_.speech_dim) {
    throw ShapeError("synth: speech width " + std::to_string(speech.cols()) + " expected " +
                     std::to_string(config_.downsample * config_.speech_dim));
  }
  if (steps < 1 || steps > tq) {
    throw ShapeError("synth: " + std::to_string(steps) + " steps over " + std::to_string(tq) +
                     " speech rows");
  }
  if (steps > 1 && (context.rows() < steps - 1 || context.cols() != config_.latent_dim)) {
    throw ShapeError("synth: motion context too short or wrong width");
  }
  if (config_.use_style && style == nullptr) {
    throw PreconditionError("synth: model expects a style vector");
  }
  ad::Graph& g = s.graph();
  const int w = config_.width;

  ad::Var speech_rows = nn::linear(s, "speech.proj", g.constant(speech));
  const ad::Matrix positions = nn::sinusoidal_positions(tq, w);
  ad::Var memory = ad::add(speech_rows, g.constant(positions));
  if (config_.use_style) {
    ad::Var token = nn::linear(s, "style.proj", *style);
    memory = ad::concat_rows({token, memory});
  }

  ad::Var x = s.param("start");
  if (steps > 1) {
    ad::Var past = nn::linear(s, "motion.in", g.constant(context.topRows(steps - 1)));
    x = ad::concat_rows({x, past});
  }
  x = ad::add(x, g.constant(positions.topRows(steps)));
  x = ad::add(x, ad::slice_rows(speech_rows, 0, steps));
  const ad::Matrix mask = nn::causal_mask(steps);
  for (int l = 0; l < config_.layers; ++l) {
    x = nn::decoder_block(s, "dec.block" + std::to_string(l), x, memory, config_.heads, &mask);
  }
  return nn::linear(s, "dec.out", nn::layer_norm(s, "dec.ln_out", x));
}

ad::Matrix stacked_speech(const SpeechFeatures& features, int frames, double fps,
                          int downsample) {
  ad::Graph g;
  const ad::Matrix aligned = align_to_motion(features, frames, fps);
  return ad::stack_rows(g.constant(aligned), downsample).value();
}

ad::RowVector predict_step(const SynthModel& model, const ad::Matrix& speech,
                           const std::string& language, const ad::Matrix& past,
                           bool allow_unseen) {
  ad::Graph g;
  nn::Scope s(g, model.params());
  ad::Var style;
  if (model.config().use_style) {
    style = model.style_graph(s, language, allow_unseen);
  } else if (!model.has_language(language) && !allow_unseen) {
    throw UnknownLanguageError(language);
  }
  const int steps = static_cast<int>(past.rows()) + 1;
  ad::Var z = model.forward_graph(s, speech, model.config().use_style ? &style : nullptr, past,
                                  steps);
  return z.value().row(steps - 1);
}

GenLossBreakdown gen_loss(const ad::Matrix& pred_latents, const ad::Matrix& quantized,
                          const ad::Matrix& pred_motion, const ad::Matrix& gt_motion) {
  if (pred_latents.rows() != quantized.rows() || pred_latents.cols() != quantized.cols()) {
    throw ShapeError("gen_loss: latent shapes differ");
  }
  if (pred_motion.rows() != gt_motion.rows() || pred_motion.cols() != gt_motion.cols()) {
    throw ShapeError("gen_loss: motion shapes differ");
  }
  if (pred_latents.size() == 0 || pred_motion.size() == 0) {
    throw ShapeError("gen_loss: empty input");
  }
  GenLossBreakdown b;
  b.latent = (pred_latents - quantized).squaredNorm() / static_cast<double>(pred_latents.size());
  b.motion = (pred_motion - gt_motion).squaredNorm() / static_cast<double>(pred_motion.size());
  b.total = b.latent + b.motion;
  return b;
}

// -------------------------------------------------------------- generation --

Generation generate(const Stage2Checkpoint& synth, const VqvaeModel& vqvae,
                    const SpeechTrack& track, const std::string& language,
                    const GenerateOptions& options) {
  const SynthModel& model = synth.model;
  if (track.samples.empty()) throw PreconditionError("generate: zero-length speech track");
  if (!model.has_language(language) && !options.allow_unseen) {
    throw UnknownLanguageError(language);
  }
  if (model.config().latent_dim != vqvae.config().latent_dim ||
      model.config().downsample != vqvae.config().downsample) {
    throw ContractError("generate: synthesizer and stage-1 model disagree on d_z or q");
  }
  const int frames = static_cast<int>(std::lround(track.duration_seconds() * options.fps));
  if (frames < 1) throw PreconditionError("generate: track shorter than one motion frame");
  const int q = vqvae.config().downsample;
  const int tq = vqvae.latent_frames(frames);

  const MelSpeechEncoder encoder = synth.speech_encoder();
  const ad::Matrix speech =
      stacked_speech(extract_checked(encoder, track), frames, options.fps, q);
  const ad::Matrix& codebook = vqvae.params().at("codebook").value;

  Generation out;
  out.latents.resize(tq, vqvae.config().latent_dim);
  ad::Matrix context(tq, vqvae.config().latent_dim);
  for (int t = 0; t < tq; ++t) {
    const ad::RowVector z =
        predict_step(model, speech, language, context.topRows(t), options.allow_unseen);
    const int code = nearest_codes(ad::Matrix(z), codebook).front();
    out.code_indices.push_back(code);
    out.latents.row(t) = codebook.row(code);
    if (t + 1 == tq) break;
    // Feed back the decoded motion, re-encoded by the frozen encoder.
    ad::Graph g;
    nn::Scope s(g, vqvae.params());
    const int prefix_frames = std::min((t + 1) * q, frames);
    ad::Var motion = vqvae.decode_graph(s, g.constant(out.latents.topRows(t + 1)),
                                        prefix_frames, false);
    const ad::Matrix encoded = vqvae.encode_graph(s, motion.value(), false).value();
    const int fed = nearest_codes(encoded.row(t), codebook).front();
    context.row(t) = codebook.row(fed);
  }
  LatentSequence latents{out.latents, q};
  out.motion = vqvae.decode(latents, frames, options.fps);
  return out;
}

// -------------------------------------------------------------- checkpoint --

nlohmann::json Stage2TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"optimizer", optimizer.weight_decay == 0.0 ? "adam" : "adamw"},
          {"lr", optimizer.lr},
          {"beta1", optimizer.beta1},
          {"beta2", optimizer.beta2},
          {"eps", optimizer.eps},
          {"weight_decay", optimizer.weight_decay},
          {"seed", seed}};
}

std::string stage1_fingerprint(const Stage1Checkpoint& stage1) {
  CheckpointFile f;
  f.kind = "vqvae-weights";
  f.meta["config"] = stage1.model.config().to_json();
  append_parameters(f, stage1.model.params());
  f.tensors.emplace_back("template", ad::Matrix(stage1.model.template_face()));
  return sha256_hex(encode_checkpoint(f));
}

MelSpeechEncoder Stage2Checkpoint::speech_encoder() const {
  std::shared_ptr<const NormalizationProfile> p;
  if (profile) p = std::make_shared<const NormalizationProfile>(*profile);
  return MelSpeechEncoder(mel, p);
}

CheckpointFile Stage2Checkpoint::to_file() const {
  CheckpointFile f;
  f.kind = "synth";
  f.meta["config"] = model.config().to_json();
  f.meta["stage1_sha256"] = stage1_sha256;
  f.meta["mel"] = mel.to_json();
  f.meta["profile"] = profile ? profile->to_json() : nlohmann::json(nullptr);
  f.meta["seed"] = seed;
  f.meta["loss_history"] = loss_history;
  f.meta["train_config"] = train_config;
  append_parameters(f, model.params());
  return f;
}

Stage2Checkpoint Stage2Checkpoint::from_file(const CheckpointFile& f) {
  if (f.kind != "synth") {
    throw FormatError("expected a synth checkpoint, found kind '" + f.kind + "'");
  }
  Stage2Checkpoint c{SynthModel(SynthConfig::from_json(f.meta.at("config")), 0), {}, {}, std::nullopt, 0, {}, nlohmann::json::object()};
  restore_parameters(f, c.model.params());
  c.stage1_sha256 = f.meta.at("stage1_sha256").get<std::string>();
  c.mel = MelConfig::from_json(f.meta.at("mel"));
  if (!f.meta.at("profile").is_null()) {
    c.profile = NormalizationProfile::from_json(f.meta.at("profile"));
  }
  c.seed = f.meta.value("seed", std::uint64_t{0});
  c.loss_history = f.meta.value("loss_history", std::vector<double>{});
  c.train_config = f.meta.value("train_config", nlohmann::json::object());
  return c;
}

void Stage2Checkpoint::save(const std::filesystem::path& path) const {
  write_checkpoint(to_file(), path);
}

Stage2Checkpoint Stage2Checkpoint::load(const std::filesystem::path& path) {
  return from_file(read_checkpoint(path));
}

void Stage2Checkpoint::check_stage1(const Stage1Checkpoint& stage1) const {
  const std::string actual = stage1_fingerprint(stage1);
  if (actual != stage1_sha256) {
    throw ContractError("stage-1 checkpoint " + actual.substr(0, 12) +
                        " is not the one this synthesizer was trained with (" +
                        stage1_sha256.substr(0, 12) + ")");
  }
}

// ---------------------------------------------------------------- training --

Stage2Data prepare_stage2_clip(const VqvaeModel& vqvae, const SpeechEncoderAdapter& encoder,
                               const std::string& clip_id, const std::string& language,
                               const MotionSequence& motion, const SpeechTrack& audio) {
  Stage2Data d;
  d.clip_id = clip_id;
  d.language = language;
  d.offsets = vqvae.offsets_of(motion);
  d.speech = stacked_speech(extract_checked(encoder, audio), motion.frames, motion.fps,
                            vqvae.config().downsample);
  d.gt_quantized = quantize(vqvae.encode(motion), vqvae.codebook()).quantized.features;
  return d;
}

Stage2Forward stage2_forward(nn::Scope& synth_scope, nn::Scope& vq_scope,
                             const SynthModel& model, const VqvaeModel& vqvae,
                             const Stage2Data& clip) {
  ad::Graph& g = synth_scope.graph();
  const int steps = static_cast<int>(clip.speech.rows());
  if (clip.gt_quantized.rows() != steps) {
    throw ShapeError("stage2: clip '" + clip.clip_id + "' speech and motion grids disagree");
  }
  ad::Var style;
  if (model.config().use_style) style = model.style_graph(synth_scope, clip.language, false);
  else if (!model.has_language(clip.language)) throw UnknownLanguageError(clip.language);

  Stage2Forward f;
  // Teacher forcing: the context is the quantized ground-truth encoding.
  f.latents = model.forward_graph(synth_scope, clip.speech,
                                  model.config().use_style ? &style : nullptr,
                                  clip.gt_quantized, steps);
  const ad::Matrix& codebook = vqvae.params().at("codebook").value;
  const std::vector<int> idx = nearest_codes(f.latents.value(), codebook);
  ad::Matrix snapped_value(steps, codebook.cols());
  for (int t = 0; t < steps; ++t) {
    snapped_value.row(t) = codebook.row(idx[static_cast<std::size_t>(t)]);
  }
  const ad::Matrix& target =
      model.config().latent_target == LatentTarget::Self ? snapped_value : clip.gt_quantized;
  ad::Var snapped = ad::straight_through(f.latents, snapped_value);
  f.motion = vqvae.decode_graph(vq_scope, snapped, static_cast<int>(clip.offsets.rows()), false);
  f.latent_loss = ad::mean_square(ad::sub(f.latents, g.constant(target)));
  f.motion_loss = ad::mean_square(ad::sub(f.motion, g.constant(clip.offsets)));
  f.total = ad::add(f.latent_loss, f.motion_loss);
  return f;
}

Stage2Checkpoint train_stage2(const std::vector<Stage2Data>& clips,
                              const Stage1Checkpoint& stage1, const SynthConfig& model_config,
                              const MelConfig& mel,
                              const std::optional<NormalizationProfile>& profile,
                              const Stage2TrainConfig& tc) {
  if (clips.empty()) throw PreconditionError("train_stage2: no training clips");
  if (tc.epochs < 1) throw PreconditionError("train_stage2: epochs must be >= 1");
  if (tc.batch_size < 1) throw PreconditionError("train_stage2: batch_size must be >= 1");
  SynthConfig cfg = model_config;
  cfg.latent_dim = stage1.model.config().latent_dim;
  cfg.downsample = stage1.model.config().downsample;
  cfg.speech_dim = mel.mel_bands;
  for (const auto& c : clips) {
    if (c.speech.cols() != cfg.downsample * cfg.speech_dim) {
      throw ShapeError("train_stage2: clip '" + c.clip_id + "' has speech width " +
                       std::to_string(c.speech.cols()));
    }
    if (c.offsets.cols() != stage1.model.config().vertex_count * 3) {
      throw ValidationError("motion.vertex_count",
                            "clip '" + c.clip_id + "' does not match the stage-1 rig");
    }
  }

  Stage2Checkpoint ckpt{SynthModel(cfg, tc.seed), {}, {}, std::nullopt, 0, {}, nlohmann::json::object()};
  ckpt.stage1_sha256 = stage1_fingerprint(stage1);
  ckpt.mel = mel;
  ckpt.profile = profile;
  ckpt.seed = tc.seed;
  ckpt.train_config = tc.to_json();

  Adam optimizer(tc.optimizer);
  std::mt19937_64 order_rng(tc.seed ^ 0x5eed2ULL);
  std::vector<std::size_t> order(clips.size());
  std::iota(order.begin(), order.end(), 0);
  std::string last_good = encode_checkpoint(ckpt.to_file());
  const double inv_batch = 1.0 / static_cast<double>(tc.batch_size);

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    ckpt.model.params().zero_grad();
    int in_batch = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      ad::Graph g;
      nn::Scope synth_scope(g, ckpt.model.params());
      nn::Scope vq_scope(g, stage1.model.params());
      Stage2Forward f = stage2_forward(synth_scope, vq_scope, ckpt.model, stage1.model,
                                       clips[order[i]]);
      const double loss = f.total.value()(0, 0);
      if (!std::isfinite(loss)) {
        throw DivergenceError("stage-2 loss became non-finite at epoch " +
                                  std::to_string(epoch),
                              last_good, epoch);
      }
      epoch_loss += loss;
      g.backward(tc.batch_size == 1 ? f.total : ad::scale(f.total, inv_batch));
      if (++in_batch == tc.batch_size || i + 1 == order.size()) {
        optimizer.step(ckpt.model.params());
        ckpt.model.params().zero_grad();
        in_batch = 0;
      }
    }
    epoch_loss /= static_cast<double>(order.size());
    ckpt.loss_history.push_back(epoch_loss);
    last_good = encode_checkpoint(ckpt.to_file());
    if (tc.on_epoch) tc.on_epoch(epoch, epoch_loss);
  }
  return ckpt;
}

Stage2Checkpoint train_stage2(const CorpusManifest& corpus, const Stage1Checkpoint& stage1,
                              const SynthConfig& model_config,
                              const Stage2TrainConfig& train_config) {
  if (corpus.vertex_count != stage1.model.config().vertex_count) {
    throw ContractError("stage-1 checkpoint has " +
                        std::to_string(stage1.model.config().vertex_count) +
                        " vertices, corpus rig has " + std::to_string(corpus.vertex_count));
  }
  MelConfig mel;
  mel.sample_rate = corpus.sample_rate;
  std::optional<NormalizationProfile> profile;
  const auto profile_path = corpus.resolve(kNormalizationProfileFile);
  if (std::filesystem::exists(profile_path)) profile = NormalizationProfile::load(profile_path);
  MelSpeechEncoder encoder(mel, profile ? std::make_shared<const NormalizationProfile>(*profile)
                                        : nullptr);
  SynthConfig cfg = model_config;
  if (cfg.languages.empty()) cfg.languages = corpus.languages;
  std::vector<Stage2Data> clips;
  for (const ClipRecord* clip : corpus.split("train")) {
    clips.push_back(prepare_stage2_clip(stage1.model, encoder, clip->id, clip->language,
                                        load_clip_motion(corpus, *clip),
                                        load_clip_audio(corpus, *clip)));
  }
  if (clips.empty()) throw PreconditionError("train_stage2: corpus split 'train' has no clips");
  return train_stage2(clips, stage1, cfg, mel, profile, train_config);
}

}  // namespace multitalk
