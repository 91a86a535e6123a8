#include "multitalk/speech.hpp"

#include "multitalk/error.hpp"
#include "multitalk/fileutil.hpp"

#include <fftw3.h>

#include <cmath>
#include <numbers>

namespace multitalk {

namespace {

// FFTW's planner is not thread-safe; execution on distinct buffers is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// bands x (fft_size/2 + 1) triangular filters on the HTK mel scale.
ad::Matrix mel_filterbank(const MelConfig& c) {
  const int bins = c.fft_size / 2 + 1;
  ad::Matrix fb = ad::Matrix::Zero(c.mel_bands, bins);
  const double mel_lo = hz_to_mel(c.f_min);
  const double mel_hi = hz_to_mel(c.f_max);
  std::vector<double> edges(static_cast<std::size_t>(c.mel_bands) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                      static_cast<double>(c.mel_bands + 1));
  }
  for (int b = 0; b < c.mel_bands; ++b) {
    const double lo = edges[b], mid = edges[b + 1], hi = edges[b + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * c.sample_rate / c.fft_size;
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      fb(b, k) = w;
    }
  }
  return fb;
}

}  // namespace

int MelConfig::window_samples() const {
  return static_cast<int>(std::lround(window_ms * sample_rate / 1000.0));
}

int MelConfig::hop_samples() const {
  return static_cast<int>(std::lround(hop_ms * sample_rate / 1000.0));
}

nlohmann::json MelConfig::to_json() const {
  return {{"sample_rate", sample_rate}, {"window_ms", window_ms}, {"hop_ms", hop_ms},
          {"mel_bands", mel_bands},     {"fft_size", fft_size},   {"f_min", f_min},
          {"f_max", f_max},             {"log_floor", log_floor}};
}

MelConfig MelConfig::from_json(const nlohmann::json& j) {
  MelConfig c;
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.window_ms = j.value("window_ms", c.window_ms);
  c.hop_ms = j.value("hop_ms", c.hop_ms);
  c.mel_bands = j.value("mel_bands", c.mel_bands);
  c.fft_size = j.value("fft_size", c.fft_size);
  c.f_min = j.value("f_min", c.f_min);
  c.f_max = j.value("f_max", c.f_max);
  c.log_floor = j.value("log_floor", c.log_floor);
  return c;
}

NormalizationProfile NormalizationProfile::fit(const std::vector<ad::Matrix>& sets) {
  if (sets.empty()) throw PreconditionError("normalization profile needs at least one clip");
  const Eigen::Index d = sets.front().cols();
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(d);
  Eigen::RowVectorXd sq = Eigen::RowVectorXd::Zero(d);
  double n = 0.0;
  for (const auto& m : sets) {
    if (m.cols() != d) throw ShapeError("normalization profile: inconsistent widths");
    sum += m.colwise().sum();
    sq += m.cwiseAbs2().colwise().sum();
    n += static_cast<double>(m.rows());
  }
  NormalizationProfile p;
  p.mean = sum / n;
  p.stddev = (sq / n - p.mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-6);
  return p;
}

void NormalizationProfile::apply(ad::Matrix& features) const {
  if (features.cols() != mean.size()) {
    throw ShapeError("normalization profile width " + std::to_string(mean.size()) +
                     " does not match features width " + std::to_string(features.cols()));
  }
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    features.row(r) = (features.row(r) - mean).cwiseQuotient(stddev);
  }
}

nlohmann::json NormalizationProfile::to_json() const {
  std::vector<double> m(mean.data(), mean.data() + mean.size());
  std::vector<double> s(stddev.data(), stddev.data() + stddev.size());
  return {{"bands", mean.size()}, {"mean", m}, {"stddev", s}};
}

NormalizationProfile NormalizationProfile::from_json(const nlohmann::json& j) {
  try {
    const auto m = j.at("mean").get<std::vector<double>>();
    const auto s = j.at("stddev").get<std::vector<double>>();
    if (m.size() != s.size() || m.empty()) {
      throw ParseError("normalization profile: mean/stddev length mismatch");
    }
    NormalizationProfile p;
    p.mean = Eigen::Map<const Eigen::RowVectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
    p.stddev = Eigen::Map<const Eigen::RowVectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("normalization profile: ") + e.what());
  }
}

void NormalizationProfile::save(const std::filesystem::path& path) const {
  write_file(path, to_json().dump(2) + "\n");
}

NormalizationProfile NormalizationProfile::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("normalization profile '" + path.string() + "': " + e.what());
  }
}

SpeechFeatures mel_features(const SpeechTrack& track, const MelConfig& config,
                            const NormalizationProfile* profile) {
  if (track.sample_rate != config.sample_rate) {
    throw PreconditionError("track sample rate " + std::to_string(track.sample_rate) +
                            " differs from featurizer rate " +
                            std::to_string(config.sample_rate));
  }
  const int window = config.window_samples();
  const int hop = config.hop_samples();
  if (window > config.fft_size) throw PreconditionError("window longer than FFT size");
  const auto len = static_cast<long>(track.samples.size());
  if (len < window) {
    throw PreconditionError("track of " + std::to_string(len) +
                            " samples is shorter than one analysis window (" +
                            std::to_string(window) + ")");
  }
  const long frames = 1 + (len - window) / hop;
  const int bins = config.fft_size / 2 + 1;

  static thread_local ad::Matrix cached_fb;
  static thread_local std::string cached_key;
  const std::string key = config.to_json().dump();
  if (key != cached_key) {
    cached_fb = mel_filterbank(config);
    cached_key = key;
  }
  const ad::Matrix& fb = cached_fb;

  std::vector<double> hann(static_cast<std::size_t>(window));
  for (int i = 0; i < window; ++i) {
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / window);
  }

  double* in = fftw_alloc_real(static_cast<std::size_t>(config.fft_size));
  fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(bins));
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(config.fft_size, in, out, FFTW_ESTIMATE);
  }

  SpeechFeatures result;
  result.feature_rate = config.feature_rate();
  result.features.resize(frames, config.mel_bands);
  Eigen::VectorXd power(bins);
  for (long f = 0; f < frames; ++f) {
    const long start = f * hop;
    for (int i = 0; i < config.fft_size; ++i) {
      in[i] = i < window ? track.samples[static_cast<std::size_t>(start + i)] * hann[i] : 0.0;
    }
    fftw_execute(plan);
    for (int k = 0; k < bins; ++k) power(k) = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    Eigen::VectorXd mel = fb * power;
    for (int b = 0; b < config.mel_bands; ++b) {
      result.features(f, b) = std::log(std::max(mel(b), config.log_floor));
    }
  }

  {
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);

  if (profile != nullptr) profile->apply(result.features);
  return result;
}

ad::Matrix align_to_motion(const SpeechFeatures& features, int target_frames,
                           double target_fps) {
  if (target_frames < 1) throw PreconditionError("align_to_motion: target_frames must be >= 1");
  if (!(target_fps > 0.0)) throw PreconditionError("align_to_motion: target_fps must be > 0");
  const Eigen::Index src = features.frames();
  if (src < 1) throw PreconditionError("align_to_motion: no feature frames");
  ad::Matrix out(target_frames, features.dim());
  for (int j = 0; j < target_frames; ++j) {
    const double pos = target_frames == 1
                           ? 0.5 * static_cast<double>(src - 1)
                           : static_cast<double>(j) * static_cast<double>(src - 1) /
                                 static_cast<double>(target_frames - 1);
    const auto lo = static_cast<Eigen::Index>(std::floor(pos));
    const Eigen::Index hi = std::min(lo + 1, src - 1);
    const double w = pos - static_cast<double>(lo);
    if (w == 0.0) {
      out.row(j) = features.features.row(lo);
    } else {
      out.row(j) = (1.0 - w) * features.features.row(lo) + w * features.features.row(hi);
    }
  }
  return out;
}

SpeechFeatures MelSpeechEncoder::extract(const SpeechTrack& track) const {
  return mel_features(track, config_, profile_.get());
}

SpeechFeatures extract_checked(const SpeechEncoderAdapter& adapter,
                               const SpeechTrack& track) {
  static std::mutex serial;
  SpeechFeatures f;
  if (adapter.reentrant()) {
    f = adapter.extract(track);
  } else {
    std::lock_guard<std::mutex> lock(serial);
    f = adapter.extract(track);
  }
  if (f.dim() != adapter.dim()) {
    throw ContractError("speech adapter '" + adapter.name() + "' declared d_s=" +
                        std::to_string(adapter.dim()) + " but produced " +
                        std::to_string(f.dim()));
  }
  if (std::abs(f.feature_rate - adapter.feature_rate()) > 1e-9) {
    throw ContractError("speech adapter '" + adapter.name() + "' declared rate " +
                        std::to_string(adapter.feature_rate()) + " but produced " +
                        std::to_string(f.feature_rate));
  }
  if (f.frames() < 1) throw ContractError("speech adapter '" + adapter.name() + "' produced no frames");
  if (!f.features.allFinite()) {
    throw ContractError("speech adapter '" + adapter.name() + "' produced non-finite values");
  }
  return f;
}

}  // namespace multitalk
