#include "multitalk/synthkit.hpp"

#include "multitalk/error.hpp"
#include "multitalk/fileutil.hpp"
#include "multitalk/speech.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace multitalk {

namespace {

const std::vector<std::string>& language_tags() {
  static const std::vector<std::string> tags = {
      "en", "fr", "it", "el", "de", "es", "pt", "ru", "ja", "ko",
      "zh", "ar", "hi", "tr", "pl", "nl", "sv", "vi", "th", "id"};
  return tags;
}

ad::Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  ad::Matrix m(static_cast<Eigen::Index>(rows.size()),
               rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<Eigen::Index>(rows[r].size()) != m.cols()) {
      throw ParseError("synthkit: ragged matrix");
    }
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  return m;
}

nlohmann::json matrix_to_json(const ad::Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, const std::string& key) {
  const std::string hex = sha256_hex(std::to_string(master) + ":" + key);
  return std::stoull(hex.substr(0, 16), nullptr, 16);
}

// -------------------------------------------------------------------- rig --

VisemeRig VisemeRig::make(std::uint64_t seed, int vertex_count, int lip_start, int visemes,
                          double min_separation) {
  if (vertex_count < 4 || lip_start < 0 || lip_start >= vertex_count || visemes < 1) {
    throw PreconditionError("VisemeRig::make: invalid rig dimensions");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  VisemeRig rig;
  rig.base_mesh.resize(vertex_count, 3);
  // Vertices on an ellipsoidal head shell.
  for (int v = 0; v < vertex_count; ++v) {
    const double theta = std::acos(unit(rng));
    const double phi = std::numbers::pi * unit(rng);
    rig.base_mesh(v, 0) = 8.0 * std::sin(theta) * std::cos(phi);
    rig.base_mesh(v, 1) = 10.0 * std::cos(theta);
    rig.base_mesh(v, 2) = 9.0 * std::sin(theta) * std::sin(phi);
  }
  for (int v = lip_start; v < vertex_count; ++v) rig.lip_vertex_indices.push_back(v);

  for (int k = 0; k < visemes; ++k) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw PreconditionError("VisemeRig::make: cannot separate visemes");
      ad::Matrix delta = ad::Matrix::Zero(vertex_count, 3);
      for (int v : rig.lip_vertex_indices) {
        for (int c = 0; c < 3; ++c) delta(v, c) = 0.6 * unit(rng);
      }
      bool separated = rig.lip_distance(delta, ad::Matrix::Zero(vertex_count, 3)) > min_separation;
      for (const auto& other : rig.viseme_deltas) {
        separated = separated && rig.lip_distance(delta, other) > min_separation;
      }
      if (separated) {
        rig.viseme_deltas.push_back(std::move(delta));
        break;
      }
    }
  }
  return rig;
}

double VisemeRig::lip_distance(const ad::Matrix& a, const ad::Matrix& b) const {
  double sq = 0.0;
  for (int v : lip_vertex_indices) sq += (a.row(v) - b.row(v)).squaredNorm();
  return std::sqrt(sq);
}

void VisemeRig::validate(double min_separation) const {
  if (base_mesh.cols() != 3 || vertex_count() < 4) {
    throw ValidationError("rig.base_mesh", "must be N x 3 with N >= 4");
  }
  if (lip_vertex_indices.empty()) throw ValidationError("rig.lip_vertex_indices", "empty");
  std::vector<bool> is_lip(static_cast<std::size_t>(vertex_count()), false);
  for (std::size_t i = 0; i < lip_vertex_indices.size(); ++i) {
    const int v = lip_vertex_indices[i];
    if (v < 0 || v >= vertex_count() || (i > 0 && v <= lip_vertex_indices[i - 1])) {
      throw ValidationError("rig.lip_vertex_indices", "must be increasing and in range");
    }
    is_lip[static_cast<std::size_t>(v)] = true;
  }
  for (std::size_t k = 0; k < viseme_deltas.size(); ++k) {
    const auto& d = viseme_deltas[k];
    if (d.rows() != vertex_count() || d.cols() != 3 || !d.allFinite()) {
      throw ValidationError("rig.viseme_deltas", "viseme " + std::to_string(k) + " malformed");
    }
    for (int v = 0; v < vertex_count(); ++v) {
      if (!is_lip[static_cast<std::size_t>(v)] && d.row(v).squaredNorm() != 0.0) {
        throw ValidationError("rig.viseme_deltas",
                              "viseme " + std::to_string(k) + " moves non-lip vertex " +
                                  std::to_string(v));
      }
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (lip_distance(d, viseme_deltas[j]) <= min_separation) {
        throw ValidationError("rig.viseme_deltas", "visemes " + std::to_string(j) + " and " +
                                                       std::to_string(k) + " too close");
      }
    }
  }
}

nlohmann::json VisemeRig::to_json() const {
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& d : viseme_deltas) deltas.push_back(matrix_to_json(d));
  return {{"rig_id", rig_id},
          {"base_mesh", matrix_to_json(base_mesh)},
          {"lip_vertex_indices", lip_vertex_indices},
          {"viseme_deltas", deltas}};
}

VisemeRig VisemeRig::from_json(const nlohmann::json& j) {
  VisemeRig rig;
  rig.rig_id = j.at("rig_id").get<std::string>();
  rig.base_mesh = matrix_from_json(j.at("base_mesh"));
  rig.lip_vertex_indices = j.at("lip_vertex_indices").get<std::vector<int>>();
  for (const auto& d : j.at("viseme_deltas")) rig.viseme_deltas.push_back(matrix_from_json(d));
  rig.validate();
  return rig;
}

// --------------------------------------------------------------- language --

nlohmann::json SyntheticLanguage::to_json() const {
  return {{"tag", tag},
          {"symbols", symbols},
          {"viseme_of", viseme_of},
          {"signature_of", signature_of},
          {"symbol_duration", symbol_duration}};
}

SyntheticLanguage SyntheticLanguage::from_json(const nlohmann::json& j) {
  SyntheticLanguage l;
  l.tag = j.at("tag").get<std::string>();
  l.symbols = j.at("symbols").get<std::vector<std::string>>();
  l.viseme_of = j.at("viseme_of").get<std::map<std::string, int>>();
  l.signature_of = j.at("signature_of").get<std::map<std::string, int>>();
  l.symbol_duration = j.value("symbol_duration", l.symbol_duration);
  return l;
}

std::array<double, 3> SignatureBank::partials(int id) const {
  if (id < 0 || id >= count) {
    throw PreconditionError("signature id " + std::to_string(id) + " outside bank");
  }
  const double step = 1.0 / static_cast<double>(count);
  return {200.0 + 1600.0 * step * id, 1900.0 + 2200.0 * step * id, 4300.0 + 3000.0 * step * id};
}

// ------------------------------------------------------------------- clips --

SynthClip synth_clip(const Tokens& symbols, const SyntheticLanguage& language,
                     const VisemeRig& rig, const SignatureBank& bank,
                     const SynthClipOptions& options, std::uint64_t seed) {
  if (symbols.empty()) throw PreconditionError("synth_clip: empty symbol string");
  std::vector<int> visemes;
  std::vector<int> signatures;
  for (const auto& s : symbols) {
    auto v = language.viseme_of.find(s);
    auto g = language.signature_of.find(s);
    if (v == language.viseme_of.end() || g == language.signature_of.end()) {
      throw PreconditionError("synth_clip: unknown symbol '" + s + "' for language '" +
                              language.tag + "'");
    }
    if (v->second < 0 || v->second >= rig.viseme_count()) {
      throw PreconditionError("synth_clip: viseme " + std::to_string(v->second) +
                              " not in rig");
    }
    visemes.push_back(v->second);
    signatures.push_back(g->second);
  }
  const double dur = language.symbol_duration;
  const auto count = static_cast<int>(symbols.size());
  SynthClip clip;
  clip.transcript = symbols;

  // Motion.
  const int frames = static_cast<int>(std::lround(count * dur * options.fps));
  const int n = rig.vertex_count();
  clip.motion = MotionSequence(std::max(frames, 1), n, options.fps);
  const double half = 0.5 * options.crossfade_seconds;
  // Frame and boundary times are compared in units of frames to keep boundary
  // frames exactly on the fade midpoint.
  const double frames_per_symbol = dur * options.fps;
  const double half_frames = half * options.fps;
  for (int t = 0; t < clip.motion.frames; ++t) {
    const double pos = static_cast<double>(t) / frames_per_symbol;
    const int k = std::clamp(static_cast<int>(std::floor(pos)), 0, count - 1);
    // Nearest interior boundary.
    const int b = std::clamp(static_cast<int>(std::lround(pos)), 1, std::max(count - 1, 1));
    const double offset = static_cast<double>(t) - b * frames_per_symbol;
    ad::Matrix delta;
    if (count > 1 && std::abs(offset) < half_frames) {
      const double alpha =
          0.5 - 0.5 * std::cos(std::numbers::pi * (offset + half_frames) / (2.0 * half_frames));
      delta = (1.0 - alpha) * rig.viseme_deltas[static_cast<std::size_t>(visemes[b - 1])] +
              alpha * rig.viseme_deltas[static_cast<std::size_t>(visemes[b])];
    } else {
      delta = rig.viseme_deltas[static_cast<std::size_t>(visemes[k])];
    }
    for (int v = 0; v < n; ++v) {
      for (int c = 0; c < 3; ++c) {
        clip.motion.at(t, v, c) = static_cast<float>(rig.base_mesh(v, c) + delta(v, c));
      }
    }
  }

  // Audio.
  const int sr = options.sample_rate;
  const auto per_symbol = static_cast<std::size_t>(std::lround(dur * sr));
  clip.audio.sample_rate = sr;
  clip.audio.samples.assign(per_symbol * symbols.size(), 0.0f);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, options.noise_level);
  const auto ramp = static_cast<std::size_t>(std::lround(bank.ramp_seconds * sr));
  for (std::size_t k = 0; k < symbols.size(); ++k) {
    const auto freqs = bank.partials(signatures[k]);
    for (std::size_t i = 0; i < per_symbol; ++i) {
      const double time = static_cast<double>(i) / sr;
      double env = 1.0;
      if (ramp > 0 && i < ramp) {
        env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / ramp);
      } else if (ramp > 0 && per_symbol - 1 - i < ramp) {
        env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(per_symbol - 1 - i) / ramp);
      }
      double s = 0.0;
      for (double f : freqs) s += std::sin(2.0 * std::numbers::pi * f * time);
      clip.audio.samples[k * per_symbol + i] = static_cast<float>(bank.amplitude * env * s / 3.0);
    }
  }
  for (auto& s : clip.audio.samples) {
    s = static_cast<float>(std::clamp(static_cast<double>(s) + noise(rng), -1.0, 1.0));
  }
  return clip;
}

SynthClip synth_clip(const std::string& symbols, const SyntheticLanguage& language,
                     const VisemeRig& rig, const SignatureBank& bank,
                     const SynthClipOptions& options, std::uint64_t seed) {
  Tokens tokens;
  for (char c : symbols) tokens.emplace_back(1, c);
  return synth_clip(tokens, language, rig, bank, options, seed);
}

// ------------------------------------------------------------------ oracle --

std::vector<int> classify_frames(const MotionSequence& motion, const VisemeRig& rig) {
  if (motion.vertex_count != rig.vertex_count()) {
    throw ValidationError("motion.vertex_count",
                          "rig mismatch: motion has " + std::to_string(motion.vertex_count) +
                              " vertices, rig has " + std::to_string(rig.vertex_count()));
  }
  std::vector<int> labels(static_cast<std::size_t>(motion.frames));
  ad::Matrix delta = ad::Matrix::Zero(rig.vertex_count(), 3);
  const ad::Matrix neutral = ad::Matrix::Zero(rig.vertex_count(), 3);
  for (int t = 0; t < motion.frames; ++t) {
    for (int v : rig.lip_vertex_indices) {
      for (int c = 0; c < 3; ++c) delta(v, c) = motion.at(t, v, c) - rig.base_mesh(v, c);
    }
    int best = kNeutralViseme;
    double best_d = rig.lip_distance(delta, neutral);
    for (int k = 0; k < rig.viseme_count(); ++k) {
      const double d = rig.lip_distance(delta, rig.viseme_deltas[static_cast<std::size_t>(k)]);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    labels[static_cast<std::size_t>(t)] = best;
  }
  return labels;
}

Tokens oracle_recognize(const MotionSequence& motion, const VisemeRig& rig,
                        const SyntheticLanguage& language) {
  const std::vector<int> labels = classify_frames(motion, rig);
  const double frames_per_symbol = language.symbol_duration * motion.fps;

  struct Run {
    int label;
    int length;
  };
  std::vector<Run> runs;
  for (int label : labels) {
    if (!runs.empty() && runs.back().label == label) {
      ++runs.back().length;
    } else {
      runs.push_back({label, 1});
    }
  }
  // Every run is at least one symbol; longer runs are repeated symbols.
  auto symbol_count = [&](int length) {
    return std::max(1, static_cast<int>(std::lround(length / frames_per_symbol)));
  };

  std::map<int, std::string> symbol_of;
  for (const auto& s : language.symbols) {
    auto it = language.viseme_of.find(s);
    if (it != language.viseme_of.end()) symbol_of.emplace(it->second, s);
  }
  Tokens out;
  for (const Run& r : runs) {
    if (r.label == kNeutralViseme) continue;
    auto it = symbol_of.find(r.label);
    const std::string token = it == symbol_of.end() ? "<unk>" : it->second;
    for (int i = 0; i < symbol_count(r.length); ++i) out.push_back(token);
  }
  return out;
}

Tokens OracleRecognizer::transcribe(const RecognitionRequest& request) {
  if (request.motion == nullptr) throw PreconditionError("oracle recognizer needs motion");
  return oracle_recognize(*request.motion, spec_.rig, spec_.language(request.language));
}

// -------------------------------------------------------------------- spec --

const SyntheticLanguage& SynthKitSpec::language(const std::string& tag) const {
  for (const auto& l : languages) {
    if (l.tag == tag) return l;
  }
  throw UnknownLanguageError(tag);
}

nlohmann::json SynthKitSpec::to_json() const {
  nlohmann::json langs = nlohmann::json::array();
  for (const auto& l : languages) langs.push_back(l.to_json());
  return {{"format", "multitalk-synthkit"},
          {"version", 1},
          {"rig", rig.to_json()},
          {"languages", langs},
          {"conflicting", conflicting},
          {"signatures",
           {{"count", bank.count}, {"amplitude", bank.amplitude}, {"ramp_seconds", bank.ramp_seconds}}},
          {"clip_options",
           {{"fps", clip_options.fps},
            {"sample_rate", clip_options.sample_rate},
            {"crossfade_seconds", clip_options.crossfade_seconds},
            {"noise_level", clip_options.noise_level}}}};
}

SynthKitSpec SynthKitSpec::from_json(const nlohmann::json& j) {
  try {
    SynthKitSpec s;
    s.rig = VisemeRig::from_json(j.at("rig"));
    for (const auto& l : j.at("languages")) s.languages.push_back(SyntheticLanguage::from_json(l));
    s.conflicting = j.value("conflicting", false);
    const auto& sig = j.at("signatures");
    s.bank.count = sig.at("count").get<int>();
    s.bank.amplitude = sig.value("amplitude", s.bank.amplitude);
    s.bank.ramp_seconds = sig.value("ramp_seconds", s.bank.ramp_seconds);
    const auto& co = j.at("clip_options");
    s.clip_options.fps = co.value("fps", s.clip_options.fps);
    s.clip_options.sample_rate = co.value("sample_rate", s.clip_options.sample_rate);
    s.clip_options.crossfade_seconds = co.value("crossfade_seconds", s.clip_options.crossfade_seconds);
    s.clip_options.noise_level = co.value("noise_level", s.clip_options.noise_level);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("synthkit spec: ") + e.what());
  }
}

void SynthKitSpec::save(const std::filesystem::path& path) const {
  write_file(path, to_json().dump(2) + "\n");
}

SynthKitSpec SynthKitSpec::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("synthkit spec '" + path.string() + "': " + e.what());
  }
}

// ------------------------------------------------------------------ corpus --

void SynthCorpusConfig::validate() const {
  if (languages < 1 || languages > static_cast<int>(language_tags().size())) {
    throw ValidationError("languages", "must be in [1, 20]");
  }
  if (clips_per_language < 1) throw ValidationError("clips_per_language", "must be >= 1");
  if (min_symbols < 1 || max_symbols < min_symbols) {
    throw ValidationError("min_symbols", "need 1 <= min_symbols <= max_symbols");
  }
  if (symbols_per_language < 1 || symbols_per_language > 26) {
    throw ValidationError("symbols_per_language", "must be in [1, 26]");
  }
  if (symbols_per_language > visemes) {
    throw ValidationError("symbols_per_language", "cannot exceed viseme count");
  }
  if (!(symbol_duration > 0.0)) throw ValidationError("symbol_duration", "must be > 0");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ValidationError("train_fraction", "must be in (0, 1)");
  }
}

nlohmann::json SynthCorpusConfig::to_json() const {
  return {{"languages", languages},
          {"clips_per_language", clips_per_language},
          {"min_symbols", min_symbols},
          {"max_symbols", max_symbols},
          {"symbols_per_language", symbols_per_language},
          {"visemes", visemes},
          {"conflicting", conflicting},
          {"seed", seed},
          {"rig_seed", rig_seed},
          {"symbol_duration", symbol_duration},
          {"train_fraction", train_fraction},
          {"fps", clip_options.fps},
          {"sample_rate", clip_options.sample_rate}};
}

SynthKitSpec make_synthkit_spec(const SynthCorpusConfig& config) {
  config.validate();
  SynthKitSpec spec;
  spec.rig = VisemeRig::make(config.rig_seed, 60, 40, config.visemes);
  spec.conflicting = config.conflicting;
  spec.clip_options = config.clip_options;
  const int s = config.symbols_per_language;
  spec.bank.count = config.conflicting ? s : s * config.languages;
  for (int i = 0; i < config.languages; ++i) {
    SyntheticLanguage lang;
    lang.tag = language_tags()[static_cast<std::size_t>(i)];
    lang.symbol_duration = config.symbol_duration;
    for (int j = 0; j < s; ++j) {
      const std::string sym(1, static_cast<char>('a' + j));
      lang.symbols.push_back(sym);
      if (config.conflicting) {
        // Same audio for symbol j in every language, a different viseme.
        lang.signature_of[sym] = j;
        lang.viseme_of[sym] = (j + i) % s;
      } else {
        lang.signature_of[sym] = i * s + j;
        lang.viseme_of[sym] = (j + 2 * i) % config.visemes;
      }
    }
    spec.languages.push_back(std::move(lang));
  }
  return spec;
}

CorpusManifest build_synthetic_corpus(const SynthCorpusConfig& config,
                                      const std::filesystem::path& out_dir) {
  const SynthKitSpec spec = make_synthkit_spec(config);
  CorpusManifest manifest;
  manifest.rig_id = spec.rig.rig_id;
  manifest.vertex_count = spec.rig.vertex_count();
  manifest.lip_vertex_indices = spec.rig.lip_vertex_indices;
  manifest.fps = config.clip_options.fps;
  manifest.sample_rate = config.clip_options.sample_rate;
  manifest.base_dir = out_dir;

  std::vector<std::string> train, test;
  std::vector<ad::Matrix> train_mels;
  const MelConfig mel_config{config.clip_options.sample_rate};

  for (const auto& lang : spec.languages) {
    manifest.languages.push_back(lang.tag);
    std::vector<std::string> ids;
    for (int c = 0; c < config.clips_per_language; ++c) {
      char id_buf[64];
      std::snprintf(id_buf, sizeof(id_buf), "%s_%04d", lang.tag.c_str(), c);
      const std::string id = id_buf;
      const std::uint64_t clip_seed = derive_seed(config.seed, id);
      std::mt19937_64 rng(clip_seed);
      std::uniform_int_distribution<int> len_dist(config.min_symbols, config.max_symbols);
      std::uniform_int_distribution<std::size_t> sym_dist(0, lang.symbols.size() - 1);
      Tokens symbols(static_cast<std::size_t>(len_dist(rng)));
      for (auto& s : symbols) s = lang.symbols[sym_dist(rng)];

      SynthClip clip = synth_clip(symbols, lang, spec.rig, spec.bank, config.clip_options,
                                  derive_seed(clip_seed, "audio"));
      ClipRecord rec;
      rec.id = id;
      rec.language = lang.tag;
      rec.motion_path = "motion/" + id + ".mtlk";
      rec.audio_path = "audio/" + id + ".wav";
      rec.transcript = clip.transcript;
      rec.fps = config.clip_options.fps;
      write_motion(clip.motion, out_dir / rec.motion_path);
      write_wav(clip.audio, out_dir / rec.audio_path);
      manifest.clips.push_back(std::move(rec));
      ids.push_back(id);
    }
    // Stratified split: order by a seeded hash of the id.
    std::vector<std::pair<std::uint64_t, std::string>> keyed;
    for (const auto& id : ids) keyed.emplace_back(derive_seed(config.seed, "split:" + id), id);
    std::sort(keyed.begin(), keyed.end());
    const auto n_train = static_cast<std::size_t>(
        std::floor(config.train_fraction * static_cast<double>(ids.size()) + 1e-9));
    for (std::size_t i = 0; i < keyed.size(); ++i) {
      (i < n_train ? train : test).push_back(keyed[i].second);
    }
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  manifest.splits["train"] = train;
  manifest.splits["test"] = test;

  // Normalization profile over training audio, re-read from disk so the
  // profile matches what consumers of the corpus will see.
  for (const auto& id : train) {
    const SpeechTrack audio = read_wav(out_dir / ("audio/" + id + ".wav"));
    train_mels.push_back(mel_features(audio, mel_config).features);
  }
  if (!train_mels.empty()) {
    NormalizationProfile::fit(train_mels).save(out_dir / kNormalizationProfileFile);
  }
  spec.save(out_dir / kSynthKitFile);
  save_manifest(manifest, out_dir / kManifestFile);
  return manifest;
}

}  // namespace multitalk
