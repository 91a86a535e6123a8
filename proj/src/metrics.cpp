#include "multitalk/metrics.hpp"

#include "multitalk/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace multitalk {

double lve(const MotionSequence& pred, const MotionSequence& gt,
           const std::vector<int>& lip_indices) {
  if (pred.frames != gt.frames || pred.vertex_count != gt.vertex_count) {
    throw ShapeError("lve: shape mismatch (" + std::to_string(pred.frames) + "x" +
                     std::to_string(pred.vertex_count) + " vs " + std::to_string(gt.frames) +
                     "x" + std::to_string(gt.vertex_count) + ")");
  }
  if (std::abs(pred.fps - gt.fps) > 1e-6) throw ShapeError("lve: fps mismatch");
  if (lip_indices.empty()) throw PreconditionError("lve: empty lip vertex set");
  for (int v : lip_indices) {
    if (v < 0 || v >= gt.vertex_count) throw ValidationError("lip_vertex_indices", "out of range");
  }
  double sum = 0.0;
  for (int t = 0; t < gt.frames; ++t) {
    double worst = 0.0;
    for (int v : lip_indices) {
      double sq = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double d = static_cast<double>(pred.at(t, v, c)) - gt.at(t, v, c);
        sq += d * d;
      }
      worst = std::max(worst, std::sqrt(sq));
    }
    sum += worst;
  }
  return sum / gt.frames;
}

EditCounts align_tokens(const Tokens& ref, const Tokens& hyp) {
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  // cost[i][j] with backtracking counts carried along.
  struct Cell {
    std::size_t cost = 0;
    EditCounts counts;
  };
  std::vector<Cell> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) {
    prev[j].cost = j;
    prev[j].counts.insertions = j;
  }
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0].cost = i;
    cur[0].counts = EditCounts{0, i, 0};
    for (std::size_t j = 1; j <= m; ++j) {
      const bool same = ref[i - 1] == hyp[j - 1];
      Cell diag = prev[j - 1];
      diag.cost += same ? 0 : 1;
      if (!same) ++diag.counts.substitutions;
      Cell del = prev[j];
      ++del.cost;
      ++del.counts.deletions;
      Cell ins = cur[j - 1];
      ++ins.cost;
      ++ins.counts.insertions;
      Cell best = diag;
      if (del.cost < best.cost) best = del;
      if (ins.cost < best.cost) best = ins;
      cur[j] = best;
    }
    std::swap(prev, cur);
  }
  return prev[m].counts;
}

double wer(const Tokens& ref, const Tokens& hyp) {
  if (ref.empty()) throw PreconditionError("wer: empty reference");
  return static_cast<double>(align_tokens(ref, hyp).total()) /
         static_cast<double>(ref.size());
}

NoiseGenerator white_gaussian_noise() {
  return [](std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<float> out(n);
    for (auto& v : out) v = static_cast<float>(dist(rng));
    return out;
  };
}

namespace {

double mean_square(const std::vector<float>& x) {
  double s = 0.0;
  for (float v : x) s += static_cast<double>(v) * v;
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

MixResult mix_with(const SpeechTrack& track, const std::vector<float>& noise, double snr_db) {
  if (track.samples.empty()) throw PreconditionError("mix_noise: empty track");
  if (!std::isfinite(snr_db)) throw PreconditionError("mix_noise: snr_db must be finite");
  MixResult r;
  r.signal_power = mean_square(track.samples);
  if (r.signal_power <= 0.0) throw PreconditionError("mix_noise: silent signal (P_signal = 0)");
  const double raw_noise_power = mean_square(noise);
  if (raw_noise_power <= 0.0) throw PreconditionError("mix_noise: silent noise");
  const double target = r.signal_power / std::pow(10.0, snr_db / 10.0);
  r.noise_scale = std::sqrt(target / raw_noise_power);
  r.track.sample_rate = track.sample_rate;
  r.track.samples.resize(track.samples.size());
  double scaled_power = 0.0;
  for (std::size_t i = 0; i < track.samples.size(); ++i) {
    const double n = r.noise_scale * noise[i];
    scaled_power += n * n;
    double v = track.samples[i] + n;
    if (v > 1.0 || v < -1.0) {
      ++r.clipped_samples;
      v = std::clamp(v, -1.0, 1.0);
    }
    r.track.samples[i] = static_cast<float>(v);
  }
  r.noise_power = scaled_power / static_cast<double>(track.samples.size());
  r.clipping_rate =
      static_cast<double>(r.clipped_samples) / static_cast<double>(track.samples.size());
  return r;
}

}  // namespace

MixResult mix_noise(const SpeechTrack& track, const SpeechTrack& noise, double snr_db,
                    std::uint64_t seed) {
  if (noise.samples.size() < track.samples.size()) {
    throw PreconditionError("mix_noise: noise shorter than track");
  }
  if (noise.sample_rate != track.sample_rate) {
    throw PreconditionError("mix_noise: noise sample rate differs from track");
  }
  const std::size_t slack = noise.samples.size() - track.samples.size();
  std::mt19937_64 rng(seed);
  const std::size_t offset =
      slack == 0 ? 0 : std::uniform_int_distribution<std::size_t>(0, slack)(rng);
  std::vector<float> window(noise.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                            noise.samples.begin() +
                                static_cast<std::ptrdiff_t>(offset + track.samples.size()));
  return mix_with(track, window, snr_db);
}

MixResult mix_noise(const SpeechTrack& track, const NoiseGenerator& noise, double snr_db,
                    std::uint64_t seed) {
  return mix_with(track, noise(track.samples.size(), seed), snr_db);
}

// ---------------------------------------------------------------- external --

ExternalRecognizer::ExternalRecognizer(std::string command, std::filesystem::path work_dir,
                                       Modality modality)
    : command_(command), work_dir_(std::move(work_dir)), modality_(modality),
      process_(std::move(command)) {}

Tokens ExternalRecognizer::transcribe(const RecognitionRequest& request) {
  std::lock_guard<std::mutex> lock(mutex_);
  std::filesystem::create_directories(work_dir_);
  const auto motion_path = work_dir_ / (request.clip_id + ".mtlk");
  write_motion(*request.motion, motion_path);
  nlohmann::json msg{{"clip_id", request.clip_id},
                     {"language", request.language},
                     {"motion_path", motion_path.string()},
                     {"snr_db", request.snr_db}};
  if (request.audio != nullptr) {
    const auto audio_path = work_dir_ / (request.clip_id + ".noisy.wav");
    write_wav(*request.audio, audio_path);
    msg["audio_path"] = audio_path.string();
  } else {
    msg["audio_path"] = nullptr;
  }
  const std::string reply = process_.request(msg.dump());
  Tokens tokens;
  std::istringstream in(reply);
  for (std::string tok; in >> tok;) tokens.push_back(tok);
  return tokens;
}

// -------------------------------------------------------------------- avlr --

AvlrResult avlr(const std::string& clip_id, const std::string& language,
                const MotionSequence& motion, const SpeechTrack& clean_audio,
                const Tokens& reference, Recognizer& recognizer, const AvlrOptions& options) {
  if (recognizer.modality() != Modality::AudioVisual) {
    throw PreconditionError("avlr: recognizer '" + recognizer.name() +
                            "' is not audio-visual");
  }
  const double mismatch = std::abs(motion.duration_seconds() - clean_audio.duration_seconds());
  if (mismatch >= 1.0 / motion.fps) {
    throw PreconditionError("avlr: clip '" + clip_id + "' motion/audio durations differ by " +
                            std::to_string(mismatch) + " s (>= one frame)");
  }
  const MixResult mixed = mix_noise(clean_audio, options.noise, options.snr_db, options.seed);
  RecognitionRequest req{clip_id, language, &motion, &mixed.track, options.snr_db};
  AvlrResult r;
  try {
    r.hypothesis = recognizer.transcribe(req);
  } catch (const Error& e) {
    throw AdapterError("recognizer '" + recognizer.name() + "' failed on clip '" + clip_id +
                       "': " + e.what());
  }
  r.wer = wer(reference, r.hypothesis);
  r.clipping_rate = mixed.clipping_rate;
  return r;
}

// ---------------------------------------------------------------- spearman --

std::vector<double> average_ranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw PreconditionError("spearman_rho: length mismatch");
  if (a.size() < 2) throw PreconditionError("spearman_rho: need at least two scores");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) {
      throw NonFiniteError("spearman_rho: non-finite score");
    }
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return std::nullopt;
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

// ------------------------------------------------------------------ report --

void EvalReport::aggregate() {
  per_language.clear();
  std::map<std::string, std::pair<double, std::size_t>> lve_acc, wer_acc;
  for (const auto& row : rows) {
    auto& agg = per_language[row.language];
    ++agg.clips;
    if (row.lve) {
      lve_acc[row.language].first += *row.lve;
      ++lve_acc[row.language].second;
    }
    if (row.avlr_wer) {
      wer_acc[row.language].first += *row.avlr_wer;
      ++wer_acc[row.language].second;
    }
  }
  for (auto& [lang, agg] : per_language) {
    if (auto it = lve_acc.find(lang); it != lve_acc.end()) {
      agg.mean_lve = it->second.first / static_cast<double>(it->second.second);
    }
    if (auto it = wer_acc.find(lang); it != wer_acc.end()) {
      agg.mean_avlr_wer = it->second.first / static_cast<double>(it->second.second);
    }
  }
}

void EvalReport::check_consistent(double tolerance) const {
  EvalReport copy;
  copy.rows = rows;
  copy.aggregate();
  auto close = [&](const std::optional<double>& a, const std::optional<double>& b) {
    if (a.has_value() != b.has_value()) return false;
    return !a || std::abs(*a - *b) <= tolerance;
  };
  if (copy.per_language.size() != per_language.size()) {
    throw ContractError("eval report: language set differs from rows");
  }
  for (const auto& [lang, agg] : copy.per_language) {
    auto it = per_language.find(lang);
    if (it == per_language.end() || it->second.clips != agg.clips ||
        !close(it->second.mean_lve, agg.mean_lve) ||
        !close(it->second.mean_avlr_wer, agg.mean_avlr_wer)) {
      throw ContractError("eval report: aggregate for '" + lang + "' disagrees with rows");
    }
  }
}

namespace {
nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
std::string opt_csv(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}
}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"clip_id", r.clip_id},
                         {"language", r.language},
                         {"lve", opt_json(r.lve)},
                         {"avlr_wer", opt_json(r.avlr_wer)}});
  }
  nlohmann::json langs = nlohmann::json::object();
  for (const auto& [lang, agg] : per_language) {
    langs[lang] = {{"clips", agg.clips},
                   {"mean_lve", opt_json(agg.mean_lve)},
                   {"mean_avlr_wer", opt_json(agg.mean_avlr_wer)}};
  }
  return {{"rows", rows_json}, {"per_language", langs}, {"config", config}};
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "clip_id,language,lve,avlr_wer\n";
  for (const auto& r : rows) {
    os << r.clip_id << ',' << r.language << ',' << opt_csv(r.lve) << ','
       << opt_csv(r.avlr_wer) << '\n';
  }
  return os.str();
}

}  // namespace multitalk
