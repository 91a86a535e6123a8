#include "multitalk/corpus.hpp"

#include "multitalk/binary_io.hpp"
#include "multitalk/error.hpp"
#include "multitalk/fileutil.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace multitalk {

namespace {

constexpr char kMotionMagic[4] = {'M', 'T', 'L', 'K'};

}  // namespace

ad::Matrix MotionSequence::to_matrix() const {
  ad::Matrix m(frames, vertex_count * 3);
  for (int t = 0; t < frames; ++t) {
    for (int j = 0; j < vertex_count * 3; ++j) {
      m(t, j) = vertices[static_cast<std::size_t>(t) * vertex_count * 3 + j];
    }
  }
  return m;
}

MotionSequence MotionSequence::from_matrix(const ad::Matrix& m, double fps) {
  if (m.cols() % 3 != 0) throw ShapeError("motion matrix width must be a multiple of 3");
  MotionSequence seq(static_cast<int>(m.rows()), static_cast<int>(m.cols() / 3), fps);
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      seq.vertices[static_cast<std::size_t>(t * m.cols() + j)] = static_cast<float>(m(t, j));
    }
  }
  return seq;
}

void MotionSequence::validate() const {
  if (frames < 1) throw ValidationError("frames", "must be >= 1");
  if (vertex_count < 4) throw ValidationError("vertex_count", "must be >= 4");
  if (!(fps > 0.0) || !std::isfinite(fps)) throw ValidationError("fps", "must be > 0");
  if (vertices.size() != static_cast<std::size_t>(frames) * vertex_count * 3) {
    throw ValidationError("vertices", "size does not equal T*N*3");
  }
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    if (!std::isfinite(vertices[i])) {
      const std::size_t frame = i / (static_cast<std::size_t>(vertex_count) * 3);
      const std::size_t vertex = (i / 3) % static_cast<std::size_t>(vertex_count);
      throw NonFiniteError("non-finite vertex value at frame " + std::to_string(frame) +
                           ", vertex " + std::to_string(vertex));
    }
  }
}

// ---------------------------------------------------------------- manifest --

const ClipRecord& CorpusManifest::clip(const std::string& id) const {
  for (const auto& c : clips) {
    if (c.id == id) return c;
  }
  throw ValidationError("clips", "unknown clip id '" + id + "'");
}

std::vector<const ClipRecord*> CorpusManifest::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) return {};
  std::vector<const ClipRecord*> out;
  out.reserve(it->second.size());
  for (const auto& id : it->second) out.push_back(&clip(id));
  return out;
}

void CorpusManifest::validate() const {
  if (rig_id.empty()) throw ValidationError("rig_id", "must be nonempty");
  if (vertex_count < 4) throw ValidationError("vertex_count", "must be >= 4");
  if (!(fps > 0.0)) throw ValidationError("fps", "must be > 0");
  if (sample_rate <= 0) throw ValidationError("sample_rate", "must be > 0");
  if (lip_vertex_indices.empty()) {
    throw ValidationError("lip_vertex_indices", "must be nonempty");
  }
  for (std::size_t i = 0; i < lip_vertex_indices.size(); ++i) {
    const int idx = lip_vertex_indices[i];
    if (idx < 0 || idx >= vertex_count) {
      throw ValidationError("lip_vertex_indices",
                            "index " + std::to_string(idx) + " outside [0, " +
                                std::to_string(vertex_count) + ")");
    }
    if (i > 0 && idx <= lip_vertex_indices[i - 1]) {
      throw ValidationError("lip_vertex_indices", "must be strictly increasing");
    }
  }
  std::set<std::string> langs;
  for (const auto& l : languages) {
    if (l.empty()) throw ValidationError("languages", "empty language tag");
    if (!langs.insert(l).second) {
      throw ValidationError("languages", "duplicate language '" + l + "'");
    }
  }
  std::set<std::string> ids;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& c = clips[i];
    const std::string where = "clips[" + std::to_string(i) + "]";
    if (c.id.empty()) throw ValidationError(where + ".id", "must be nonempty");
    if (!ids.insert(c.id).second) {
      throw ValidationError(where + ".id", "duplicate clip id '" + c.id + "'");
    }
    if (c.language.empty() || langs.count(c.language) == 0) {
      throw ValidationError(where + ".language",
                            "language '" + c.language + "' not in registry");
    }
    if (c.motion_path.empty()) throw ValidationError(where + ".motion", "must be nonempty");
    if (c.audio_path.empty()) throw ValidationError(where + ".audio", "must be nonempty");
    if (!(c.fps > 0.0)) throw ValidationError(where + ".fps", "must be > 0");
  }
  for (const auto& [name, members] : splits) {
    std::set<std::string> seen;
    for (const auto& id : members) {
      if (ids.count(id) == 0) {
        throw ValidationError("splits." + name, "unknown clip id '" + id + "'");
      }
      if (!seen.insert(id).second) {
        throw ValidationError("splits." + name, "duplicate clip id '" + id + "'");
      }
    }
  }
  auto train = splits.find("train");
  auto test = splits.find("test");
  if (train != splits.end() && test != splits.end()) {
    std::set<std::string> a(train->second.begin(), train->second.end());
    for (const auto& id : test->second) {
      if (a.count(id) != 0) {
        throw ValidationError("splits", "clip '" + id + "' is in both train and test");
      }
    }
  }
}

nlohmann::json manifest_to_json(const CorpusManifest& m) {
  nlohmann::json doc;
  doc["format"] = "multitalk-corpus";
  doc["version"] = 1;
  doc["rig_id"] = m.rig_id;
  doc["vertex_count"] = m.vertex_count;
  doc["fps"] = m.fps;
  doc["sample_rate"] = m.sample_rate;
  doc["lip_vertex_indices"] = m.lip_vertex_indices;
  doc["languages"] = m.languages;
  nlohmann::json clips = nlohmann::json::array();
  for (const auto& c : m.clips) {
    clips.push_back({{"id", c.id},
                     {"language", c.language},
                     {"motion", c.motion_path},
                     {"audio", c.audio_path},
                     {"transcript", c.transcript},
                     {"fps", c.fps}});
  }
  doc["clips"] = clips;
  doc["splits"] = m.splits;
  return doc;
}

CorpusManifest manifest_from_json(const nlohmann::json& doc) {
  CorpusManifest m;
  try {
    if (doc.value("format", std::string()) != "multitalk-corpus") {
      throw ParseError("manifest: 'format' must be \"multitalk-corpus\"");
    }
    m.rig_id = doc.at("rig_id").get<std::string>();
    m.vertex_count = doc.at("vertex_count").get<int>();
    m.fps = doc.value("fps", kDefaultFps);
    m.sample_rate = doc.value("sample_rate", kDefaultSampleRate);
    m.lip_vertex_indices = doc.at("lip_vertex_indices").get<std::vector<int>>();
    m.languages = doc.at("languages").get<std::vector<std::string>>();
    for (const auto& c : doc.at("clips")) {
      ClipRecord r;
      r.id = c.at("id").get<std::string>();
      r.language = c.at("language").get<std::string>();
      r.motion_path = c.at("motion").get<std::string>();
      r.audio_path = c.at("audio").get<std::string>();
      r.transcript = c.value("transcript", std::vector<std::string>{});
      r.fps = c.value("fps", m.fps);
      m.clips.push_back(std::move(r));
    }
    if (doc.contains("splits")) {
      m.splits = doc.at("splits").get<std::map<std::string, std::vector<std::string>>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest '" + path.string() + "': " + e.what());
  }
  CorpusManifest m = manifest_from_json(doc);
  m.base_dir = path.parent_path();
  return m;
}

void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path) {
  manifest.validate();
  write_file(path, manifest_to_json(manifest).dump(2) + "\n");
}

// ------------------------------------------------------------------ motion --

std::string encode_motion(const MotionSequence& seq) {
  seq.validate();
  std::string out;
  out.reserve(20 + seq.vertices.size() * 4);
  out.append(kMotionMagic, 4);
  binary::put<std::uint32_t>(out, kMotionFormatVersion);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(seq.frames));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(seq.vertex_count));
  binary::put<float>(out, static_cast<float>(seq.fps));
  for (float v : seq.vertices) binary::put<float>(out, v);
  return out;
}

MotionSequence decode_motion(const std::string& bytes) {
  binary::Reader in(bytes);
  if (in.bytes(4, "magic") != std::string_view(kMotionMagic, 4)) {
    throw FormatError("motion header mismatch: bad magic");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kMotionFormatVersion) {
    throw FormatError("motion header mismatch: unsupported version " +
                      std::to_string(version));
  }
  const auto t = in.get<std::uint32_t>("frame count");
  const auto n = in.get<std::uint32_t>("vertex count");
  const auto fps = in.get<float>("fps");
  const std::uint64_t expected = static_cast<std::uint64_t>(t) * n * 3 * 4;
  if (in.remaining() != expected) {
    throw FormatError("truncated motion payload: header declares T=" + std::to_string(t) +
                      ", N=" + std::to_string(n) + " (" + std::to_string(expected) +
                      " bytes) but payload has " + std::to_string(in.remaining()) +
                      " bytes");
  }
  MotionSequence seq(static_cast<int>(t), static_cast<int>(n), fps);
  for (auto& v : seq.vertices) v = in.get<float>("vertex");
  seq.validate();
  return seq;
}

MotionSequence read_motion(const std::filesystem::path& path) {
  return decode_motion(read_file(path));
}

void write_motion(const MotionSequence& seq, const std::filesystem::path& path) {
  write_file(path, encode_motion(seq));
}

// --------------------------------------------------------------------- wav --

std::string encode_wav(const SpeechTrack& track) {
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(track.samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  binary::put<std::uint32_t>(out, 36 + data_bytes);
  out += "WAVE";
  out += "fmt ";
  binary::put<std::uint32_t>(out, 16);
  binary::put<std::uint16_t>(out, 1);  // PCM
  binary::put<std::uint16_t>(out, 1);  // mono
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(track.sample_rate));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(track.sample_rate) * 2);
  binary::put<std::uint16_t>(out, 2);
  binary::put<std::uint16_t>(out, 16);
  out += "data";
  binary::put<std::uint32_t>(out, data_bytes);
  for (float s : track.samples) {
    const float c = std::clamp(s, -1.0f, 1.0f);
    binary::put<std::int16_t>(out, static_cast<std::int16_t>(std::lround(c * 32767.0f)));
  }
  return out;
}

namespace {

struct WavLayout {
  int sample_rate = 0;
  std::size_t data_offset = 0;
  std::size_t data_bytes = 0;
};

WavLayout parse_wav_layout(std::string_view bytes) {
  binary::Reader in(bytes);
  if (in.bytes(4, "RIFF tag") != "RIFF") throw FormatError("wav: missing RIFF tag");
  in.get<std::uint32_t>("RIFF size");
  if (in.bytes(4, "WAVE tag") != "WAVE") throw FormatError("wav: missing WAVE tag");
  WavLayout layout;
  bool have_fmt = false;
  while (in.remaining() >= 8) {
    const auto id = in.bytes(4, "chunk id");
    const auto size = in.get<std::uint32_t>("chunk size");
    if (id == "fmt ") {
      binary::Reader fmt(in.bytes(size, "fmt chunk"));
      const auto format = fmt.get<std::uint16_t>("format");
      const auto channels = fmt.get<std::uint16_t>("channels");
      layout.sample_rate = static_cast<int>(fmt.get<std::uint32_t>("sample rate"));
      fmt.get<std::uint32_t>("byte rate");
      fmt.get<std::uint16_t>("block align");
      const auto bits = fmt.get<std::uint16_t>("bits per sample");
      if (format != 1 || channels != 1 || bits != 16) {
        throw FormatError("wav: only PCM16 mono is supported");
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError("wav: data chunk before fmt chunk");
      layout.data_offset = in.position();
      layout.data_bytes = std::min<std::size_t>(size, in.remaining());
      if (layout.data_bytes != size) throw FormatError("wav: truncated data chunk");
      return layout;
    } else {
      in.bytes(std::min<std::size_t>(size + (size & 1u), in.remaining()), "chunk");
    }
  }
  throw FormatError("wav: no data chunk");
}

}  // namespace

SpeechTrack decode_wav(const std::string& bytes) {
  const WavLayout layout = parse_wav_layout(bytes);
  SpeechTrack track;
  track.sample_rate = layout.sample_rate;
  binary::Reader in(std::string_view(bytes).substr(layout.data_offset, layout.data_bytes));
  track.samples.resize(layout.data_bytes / 2);
  for (auto& s : track.samples) s = static_cast<float>(in.get<std::int16_t>("sample")) / 32767.0f;
  return track;
}

SpeechTrack read_wav(const std::filesystem::path& path) { return decode_wav(read_file(path)); }

void write_wav(const SpeechTrack& track, const std::filesystem::path& path) {
  write_file(path, encode_wav(track));
}

double wav_duration_seconds(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const WavLayout layout = parse_wav_layout(bytes);
  return static_cast<double>(layout.data_bytes / 2) / layout.sample_rate;
}

MotionSequence load_clip_motion(const CorpusManifest& manifest, const ClipRecord& clip) {
  MotionSequence seq = read_motion(manifest.resolve(clip.motion_path));
  if (seq.vertex_count != manifest.vertex_count) {
    throw ValidationError("clips." + clip.id + ".motion",
                          "vertex count " + std::to_string(seq.vertex_count) +
                              " differs from rig vertex_count " +
                              std::to_string(manifest.vertex_count));
  }
  return seq;
}

SpeechTrack load_clip_audio(const CorpusManifest& manifest, const ClipRecord& clip) {
  return read_wav(manifest.resolve(clip.audio_path));
}

// ------------------------------------------------------------------- stats --

nlohmann::json CorpusStats::to_json() const {
  return {{"clip_count", clip_count},         {"total_seconds", total_seconds},
          {"total_hours", total_hours},       {"avg_duration_s", avg_duration_s},
          {"per_language_share", per_language_share}, {"empty", empty}};
}

CorpusStats corpus_stats(const CorpusManifest& manifest) {
  CorpusStats stats;
  stats.clip_count = manifest.clips.size();
  if (manifest.clips.empty()) return stats;
  std::map<std::string, double> per_language_seconds;
  std::map<std::string, double> per_language_count;
  for (const auto& clip : manifest.clips) {
    per_language_count[clip.language] += 1.0;
    const auto path = manifest.resolve(clip.audio_path);
    if (!std::filesystem::exists(path)) {
      throw IoError("missing clip file '" + path.string() + "' for clip '" + clip.id + "'");
    }
    const double seconds = wav_duration_seconds(path);
    stats.total_seconds += seconds;
    per_language_seconds[clip.language] += seconds;
  }
  stats.empty = false;
  stats.total_hours = stats.total_seconds / 3600.0;
  stats.avg_duration_s = stats.total_seconds / static_cast<double>(stats.clip_count);
  // Zero-length audio everywhere falls back to clip-count shares.
  const bool by_duration = stats.total_seconds > 0.0;
  for (const auto& lang : manifest.languages) {
    stats.per_language_share[lang] =
        by_duration ? per_language_seconds[lang] / stats.total_seconds
                    : per_language_count[lang] / static_cast<double>(stats.clip_count);
  }
  return stats;
}

}  // namespace multitalk
