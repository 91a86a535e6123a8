#include "multitalk/vqvae.hpp"

#include "multitalk/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace multitalk {

std::vector<int> nearest_codes(const ad::Matrix& latents, const ad::Matrix& entries) {
  if (entries.rows() == 0) throw PreconditionError("quantize: empty codebook");
  if (latents.cols() != entries.cols()) {
    throw ShapeError("quantize: latent width " + std::to_string(latents.cols()) +
                     " differs from codebook width " + std::to_string(entries.cols()));
  }
  std::vector<int> out(static_cast<std::size_t>(latents.rows()));
  for (Eigen::Index t = 0; t < latents.rows(); ++t) {
    int best = 0;
    double best_d = (latents.row(t) - entries.row(0)).squaredNorm();
    for (Eigen::Index k = 1; k < entries.rows(); ++k) {
      const double d = (latents.row(t) - entries.row(k)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    out[static_cast<std::size_t>(t)] = best;
  }
  return out;
}

QuantizeResult quantize(const LatentSequence& latent, const Codebook& codebook) {
  QuantizeResult r;
  r.indices.indices = nearest_codes(latent.features, codebook.entries);
  r.quantized.stride = latent.stride;
  r.quantized.features.resize(latent.features.rows(), codebook.entries.cols());
  for (std::size_t t = 0; t < r.indices.indices.size(); ++t) {
    r.quantized.features.row(static_cast<Eigen::Index>(t)) =
        codebook.entries.row(r.indices.indices[t]);
  }
  return r;
}

VqLossBreakdown vq_loss(const MotionSequence& gt, const MotionSequence& recon,
                        const LatentSequence& latent, const LatentSequence& quantized,
                        double lambda) {
  if (gt.frames != recon.frames || gt.vertex_count != recon.vertex_count) {
    throw ShapeError("vq_loss: motion shapes differ");
  }
  if (latent.features.rows() != quantized.features.rows() ||
      latent.features.cols() != quantized.features.cols()) {
    throw ShapeError("vq_loss: latent shapes differ");
  }
  if (!(lambda >= 0.0)) throw PreconditionError("vq_loss: lambda must be >= 0");
  if (!latent.features.allFinite() || !quantized.features.allFinite()) {
    throw NonFiniteError("vq_loss: non-finite latent input");
  }
  VqLossBreakdown b;
  double abs_sum = 0.0;
  for (std::size_t i = 0; i < gt.vertices.size(); ++i) {
    const double d = static_cast<double>(gt.vertices[i]) - recon.vertices[i];
    if (!std::isfinite(d)) throw NonFiniteError("vq_loss: non-finite motion input");
    abs_sum += std::abs(d);
  }
  b.reconstruction = abs_sum / static_cast<double>(gt.vertices.size());
  const double residual =
      (latent.features - quantized.features).squaredNorm() /
      static_cast<double>(latent.features.size());
  b.codebook = residual;
  b.commitment = lambda * residual;
  b.total = b.reconstruction + b.codebook + b.commitment;
  return b;
}

// ------------------------------------------------------------------ config --

void VqvaeConfig::validate() const {
  if (vertex_count < 4) throw ValidationError("vqvae.vertex_count", "must be >= 4");
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw ValidationError("vqvae.heads", "width must be divisible by heads");
  }
  if (layers < 0) throw ValidationError("vqvae.layers", "must be >= 0");
  if (ffn_hidden < 1) throw ValidationError("vqvae.ffn_hidden", "must be >= 1");
  if (downsample < 1) throw ValidationError("vqvae.downsample", "must be >= 1");
  if (codebook_size < 1) throw ValidationError("vqvae.codebook_size", "must be >= 1");
  if (latent_dim < 1) throw ValidationError("vqvae.latent_dim", "must be >= 1");
  if (!(commitment >= 0.0)) throw ValidationError("vqvae.commitment", "must be >= 0");
}

nlohmann::json VqvaeConfig::to_json() const {
  return {{"vertex_count", vertex_count}, {"width", width},
          {"layers", layers},             {"heads", heads},
          {"ffn_hidden", ffn_hidden},     {"downsample", downsample},
          {"codebook_size", codebook_size}, {"latent_dim", latent_dim},
          {"commitment", commitment}};
}

VqvaeConfig VqvaeConfig::from_json(const nlohmann::json& j) {
  VqvaeConfig c;
  c.vertex_count = j.at("vertex_count").get<int>();
  c.width = j.value("width", c.width);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
  c.downsample = j.value("downsample", c.downsample);
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.commitment = j.value("commitment", c.commitment);
  c.validate();
  return c;
}

// ------------------------------------------------------------------- model --

VqvaeModel::VqvaeModel(const VqvaeConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int in = config_.vertex_count * 3;
  const int w = config_.width;
  const int q = config_.downsample;

  nn::init_linear(params_, "enc.in", in, w, rng);
  nn::init_linear(params_, "enc.down", q * w, w, rng);
  for (int l = 0; l < config_.layers; ++l) {
    nn::init_encoder_block(params_, "enc.block" + std::to_string(l), w, config_.ffn_hidden, rng);
  }
  nn::init_layer_norm(params_, "enc.ln_out", w);
  nn::init_linear(params_, "enc.out", w, config_.latent_dim, rng);
  // Start latents at the codebook's scale (per-dim variance 1/d_z) so the
  // initial nearest-code assignment spreads over the codebook.
  params_.at("enc.out.w").value =
      nn::gaussian_matrix(w, config_.latent_dim,
                          1.0 / std::sqrt(static_cast<double>(w) * config_.latent_dim), rng);

  nn::init_linear(params_, "dec.in", config_.latent_dim, w, rng);
  for (int l = 0; l < config_.layers; ++l) {
    nn::init_encoder_block(params_, "dec.block" + std::to_string(l), w, config_.ffn_hidden, rng);
  }
  nn::init_layer_norm(params_, "dec.ln_out", w);
  nn::init_linear(params_, "dec.up", w, q * w, rng);
  nn::init_linear(params_, "dec.out", w, in, rng);
  // Decoder starts at the template face; a random output layer pushes every
  // latent the same way through the straight-through path.
  params_.at("dec.out.w").value.setZero();

  params_.add("codebook",
              nn::gaussian_matrix(config_.codebook_size, config_.latent_dim,
                                  1.0 / std::sqrt(static_cast<double>(config_.latent_dim)), rng));
  template_ = ad::RowVector::Zero(in);
}

void VqvaeModel::set_template_face(const ad::RowVector& face) {
  if (face.size() != config_.vertex_count * 3) {
    throw ShapeError("template face width " + std::to_string(face.size()) +
                     " does not match rig (" + std::to_string(config_.vertex_count * 3) + ")");
  }
  template_ = face;
}

namespace {

void check_activation(const ad::Var& v, const std::string& where) {
  if (!v.value().allFinite()) {
    throw NonFiniteError("non-finite activation in " + where);
  }
}

}  // namespace

ad::Var VqvaeModel::encode_graph(nn::Scope& s, const ad::Matrix& offsets,
                                 bool check_finite) const {
  ad::Graph& g = s.graph();
  ad::Var x = g.constant(offsets);
  ad::Var h = ad::gelu(nn::linear(s, "enc.in", x));
  h = nn::linear(s, "enc.down", ad::stack_rows(h, config_.downsample));
  // No positional encoding: causal attention already orders the sequence, and
  // sinusoids give every latent a shared offset that collapses the codebook.
  const ad::Matrix mask = nn::causal_mask(h.rows());
  for (int l = 0; l < config_.layers; ++l) {
    h = nn::encoder_block(s, "enc.block" + std::to_string(l), h, config_.heads, &mask);
    if (check_finite) check_activation(h, "encoder layer " + std::to_string(l));
  }
  ad::Var z = nn::linear(s, "enc.out", nn::layer_norm(s, "enc.ln_out", h));
  if (check_finite) check_activation(z, "encoder output");
  return z;
}

ad::Var VqvaeModel::decode_graph(nn::Scope& s, const ad::Var& quantized, int frames,
                                 bool check_finite) const {
  if (quantized.cols() != config_.latent_dim) {
    throw ShapeError("decode: latent width " + std::to_string(quantized.cols()) +
                     " differs from d_z " + std::to_string(config_.latent_dim));
  }
  const Eigen::Index tq = quantized.rows();
  if (frames < 1 || frames > tq * config_.downsample) {
    throw ShapeError("decode: cannot produce " + std::to_string(frames) + " frames from " +
                     std::to_string(tq) + " latents");
  }
  ad::Var h = nn::linear(s, "dec.in", quantized);
  const ad::Matrix mask = nn::causal_mask(tq);
  for (int l = 0; l < config_.layers; ++l) {
    h = nn::encoder_block(s, "dec.block" + std::to_string(l), h, config_.heads, &mask);
    if (check_finite) check_activation(h, "decoder layer " + std::to_string(l));
  }
  h = nn::linear(s, "dec.up", nn::layer_norm(s, "dec.ln_out", h));
  h = ad::gelu(ad::unstack_rows(h, config_.downsample));
  ad::Var out = nn::linear(s, "dec.out", h);
  if (out.rows() != frames) out = ad::slice_rows(out, 0, frames);
  if (check_finite) check_activation(out, "decoder output");
  return out;
}

void VqvaeModel::check_rig(const MotionSequence& motion) const {
  if (motion.vertex_count != config_.vertex_count) {
    throw ValidationError("motion.vertex_count",
                          "rig mismatch: motion has " + std::to_string(motion.vertex_count) +
                              " vertices, model expects " +
                              std::to_string(config_.vertex_count));
  }
}

ad::Matrix VqvaeModel::offsets_of(const MotionSequence& motion) const {
  check_rig(motion);
  ad::Matrix m = motion.to_matrix();
  m.rowwise() -= template_;
  return m;
}

LatentSequence VqvaeModel::encode(const MotionSequence& motion) const {
  motion.validate();
  ad::Graph g;
  nn::Scope s(g, params_);
  LatentSequence out;
  out.features = encode_graph(s, offsets_of(motion), true).value();
  out.stride = config_.downsample;
  return out;
}

MotionSequence VqvaeModel::decode(const LatentSequence& quantized, int frames,
                                  double fps) const {
  const int tq = static_cast<int>(quantized.features.rows());
  if (tq < 1) throw ShapeError("decode: empty latent sequence");
  const int n = frames < 0 ? tq * config_.downsample : frames;
  ad::Graph g;
  nn::Scope s(g, params_);
  ad::Matrix m = decode_graph(s, g.constant(quantized.features), n, true).value();
  m.rowwise() += template_;
  return MotionSequence::from_matrix(m, fps);
}

MotionSequence VqvaeModel::reconstruct(const MotionSequence& motion) const {
  const LatentSequence z = encode(motion);
  const QuantizeResult q = quantize(z, codebook());
  return decode(q.quantized, motion.frames, motion.fps);
}

Stage1Forward stage1_forward(nn::Scope& s, const VqvaeModel& model,
                             const ad::Matrix& offsets) {
  ad::Graph& g = s.graph();
  Stage1Forward f;
  f.latent = model.encode_graph(s, offsets, false);
  ad::Var codebook = s.param("codebook");
  f.indices = nearest_codes(f.latent.value(), codebook.value());
  ad::Var zq = ad::gather_rows(codebook, f.indices);
  ad::Var decoder_input = ad::straight_through(f.latent, zq.value());
  f.reconstruction =
      model.decode_graph(s, decoder_input, static_cast<int>(offsets.rows()), false);
  f.reconstruction_loss = ad::mean_abs(ad::sub(f.reconstruction, g.constant(offsets)));
  f.codebook_loss = ad::mean_square(ad::sub(ad::detach(f.latent), zq));
  f.commitment_loss = ad::scale(
      ad::mean_square(ad::sub(f.latent, g.constant(zq.value()))), model.config().commitment);
  f.total = ad::add(ad::add(f.reconstruction_loss, f.codebook_loss), f.commitment_loss);
  return f;
}

// -------------------------------------------------------------- checkpoint --

nlohmann::json Stage1TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"optimizer", "adamw"},
          {"lr", optimizer.lr},
          {"beta1", optimizer.beta1},
          {"beta2", optimizer.beta2},
          {"eps", optimizer.eps},
          {"weight_decay", optimizer.weight_decay},
          {"seed", seed}};
}

CheckpointFile Stage1Checkpoint::to_file() const {
  CheckpointFile f;
  f.kind = "vqvae";
  f.meta["config"] = model.config().to_json();
  f.meta["seed"] = seed;
  f.meta["loss_history"] = loss_history;
  f.meta["train_config"] = train_config;
  f.meta["motion_format_version"] = kMotionFormatVersion;
  append_parameters(f, model.params());
  f.tensors.emplace_back("template", ad::Matrix(model.template_face()));
  return f;
}

Stage1Checkpoint Stage1Checkpoint::from_file(const CheckpointFile& f) {
  if (f.kind != "vqvae") {
    throw FormatError("expected a vqvae checkpoint, found kind '" + f.kind + "'");
  }
  Stage1Checkpoint c{VqvaeModel(VqvaeConfig::from_json(f.meta.at("config")), 0), 0, {}, nlohmann::json::object()};
  restore_parameters(f, c.model.params());
  c.model.set_template_face(f.tensor("template").row(0));
  c.seed = f.meta.value("seed", std::uint64_t{0});
  c.loss_history = f.meta.value("loss_history", std::vector<double>{});
  c.train_config = f.meta.value("train_config", nlohmann::json::object());
  return c;
}

void Stage1Checkpoint::save(const std::filesystem::path& path) const {
  write_checkpoint(to_file(), path);
}

Stage1Checkpoint Stage1Checkpoint::load(const std::filesystem::path& path) {
  return from_file(read_checkpoint(path));
}

// ---------------------------------------------------------------- training --

ad::RowVector neutral_template(const std::vector<ad::Matrix>& motions) {
  if (motions.empty()) throw PreconditionError("neutral_template: no motions");
  ad::RowVector acc = ad::RowVector::Zero(motions.front().cols());
  for (const auto& m : motions) acc += m.row(0);
  return acc / static_cast<double>(motions.size());
}

Stage1Checkpoint train_stage1(const std::vector<MotionSequence>& motions,
                              const VqvaeConfig& model_config,
                              const Stage1TrainConfig& tc) {
  if (motions.empty()) throw PreconditionError("train_stage1: corpus has no training clips");
  if (tc.epochs < 1) throw PreconditionError("train_stage1: epochs must be >= 1");
  if (tc.batch_size < 1) throw PreconditionError("train_stage1: batch_size must be >= 1");

  Stage1Checkpoint ckpt{VqvaeModel(model_config, tc.seed), 0, {}, nlohmann::json::object()};
  ckpt.seed = tc.seed;
  ckpt.train_config = tc.to_json();

  std::vector<ad::Matrix> raw;
  raw.reserve(motions.size());
  for (const auto& m : motions) {
    if (m.vertex_count != model_config.vertex_count) {
      throw ValidationError("motion.vertex_count", "rig mismatch in training corpus");
    }
    m.validate();
    raw.push_back(m.to_matrix());
  }
  ckpt.model.set_template_face(neutral_template(raw));
  std::vector<ad::Matrix> offsets;
  offsets.reserve(raw.size());
  for (auto& m : raw) {
    m.rowwise() -= ckpt.model.template_face();
    offsets.push_back(std::move(m));
  }

  Adam optimizer(tc.optimizer);
  std::mt19937_64 order_rng(tc.seed ^ 0x5eedULL);
  std::vector<std::size_t> order(offsets.size());
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
      nn::Scope s(g, ckpt.model.params());
      Stage1Forward f = stage1_forward(s, ckpt.model, offsets[order[i]]);
      const double loss = f.total.value()(0, 0);
      if (!std::isfinite(loss)) {
        throw DivergenceError("stage-1 loss became non-finite at epoch " +
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

Stage1Checkpoint train_stage1(const CorpusManifest& corpus, const VqvaeConfig& model_config,
                              const Stage1TrainConfig& train_config) {
  VqvaeConfig cfg = model_config;
  cfg.vertex_count = corpus.vertex_count;
  std::vector<MotionSequence> motions;
  for (const ClipRecord* clip : corpus.split("train")) {
    motions.push_back(load_clip_motion(corpus, *clip));
  }
  if (motions.empty()) {
    throw PreconditionError("train_stage1: corpus split 'train' has no clips");
  }
  return train_stage1(motions, cfg, train_config);
}

// ------------------------------------------------------------------ report --

nlohmann::json CodebookReport::to_json() const {
  return {{"histogram", histogram}, {"perplexity", perplexity}, {"dead_codes", dead_codes}};
}

CodebookReport codebook_report(const std::vector<CodeIndexSequence>& sequences,
                               int codebook_size) {
  if (codebook_size < 1) throw PreconditionError("codebook_report: codebook_size must be >= 1");
  CodebookReport r;
  r.histogram.assign(static_cast<std::size_t>(codebook_size), 0);
  std::size_t total = 0;
  for (const auto& seq : sequences) {
    for (int idx : seq.indices) {
      if (idx < 0 || idx >= codebook_size) {
        throw ValidationError("indices", "code index " + std::to_string(idx) + " out of range");
      }
      ++r.histogram[static_cast<std::size_t>(idx)];
      ++total;
    }
  }
  if (total == 0) throw PreconditionError("codebook_report: no indices");
  double entropy = 0.0;
  for (std::size_t count : r.histogram) {
    if (count == 0) {
      ++r.dead_codes;
      continue;
    }
    const double p = static_cast<double>(count) / static_cast<double>(total);
    entropy -= p * std::log(p);
  }
  r.perplexity = std::exp(entropy);
  return r;
}

}  // namespace multitalk
