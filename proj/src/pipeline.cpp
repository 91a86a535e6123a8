#include "multitalk/pipeline.hpp"

#include "multitalk/error.hpp"
#include "multitalk/fileutil.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

namespace multitalk {

namespace {

constexpr double kTimeEps = 1e-9;

nlohmann::json item_json(const PipelineItem& item) {
  return {{"id", item.id},
          {"language", item.language},
          {"video_path", item.video_path},
          {"audio_path", item.audio_path}};
}

}  // namespace

// ------------------------------------------------------------------ tracks --

double FrameTrack::frame_period() const {
  if (frames.size() < 2) return 0.0;
  std::vector<double> d;
  d.reserve(frames.size() - 1);
  for (std::size_t i = 1; i < frames.size(); ++i) d.push_back(frames[i].t - frames[i - 1].t);
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  return d[d.size() / 2];
}

FrameTrack FrameTrack::slice(std::size_t first, std::size_t last) const {
  if (first > last || last > frames.size()) throw PreconditionError("FrameTrack::slice: bad range");
  FrameTrack out;
  out.frames.assign(frames.begin() + static_cast<std::ptrdiff_t>(first),
                    frames.begin() + static_cast<std::ptrdiff_t>(last));
  return out;
}

std::vector<double> FrameTrack::scores() const {
  std::vector<double> s;
  s.reserve(frames.size());
  for (const auto& f : frames) s.push_back(f.speaking_score);
  return s;
}

void FrameTrack::validate() const {
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    if (!std::isfinite(f.t) || !std::isfinite(f.speaking_score) || !std::isfinite(f.yaw) ||
        !std::isfinite(f.pitch)) {
      throw ValidationError("frames[" + std::to_string(i) + "]", "non-finite value");
    }
    if (i > 0 && !(f.t > frames[i - 1].t)) {
      throw ValidationError("frames[" + std::to_string(i) + "].t",
                            "timestamps must be strictly increasing");
    }
  }
}

// ----------------------------------------------------------------- filters --

std::vector<Segment> segment_utterances(const FrameTrack& track, double score_threshold,
                                        double min_gap_s, double min_len_s) {
  if (track.empty()) throw PreconditionError("segment_utterances: empty track");
  track.validate();
  const double period = track.frame_period();
  std::vector<Segment> runs;
  const std::size_t n = track.size();
  for (std::size_t i = 0; i < n;) {
    if (track.frames[i].speaking_score < score_threshold) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && track.frames[j].speaking_score >= score_threshold) ++j;
    runs.push_back({track.frames[i].t, track.frames[j - 1].t + period, i, j});
    i = j;
  }
  std::vector<Segment> merged;
  for (const Segment& r : runs) {
    if (!merged.empty() && r.start - merged.back().end < min_gap_s - kTimeEps) {
      merged.back().end = r.end;
      merged.back().last = r.last;
    } else {
      merged.push_back(r);
    }
  }
  std::vector<Segment> out;
  for (const Segment& s : merged) {
    if (s.duration() >= min_len_s - kTimeEps) out.push_back(s);
  }
  return out;
}

Verdict verify_active_speaker(const std::vector<double>& scores, double threshold,
                              double min_fraction) {
  if (scores.empty()) throw PreconditionError("verify_active_speaker: empty segment");
  std::size_t active = 0;
  for (double s : scores) {
    if (s >= threshold) ++active;
  }
  const double fraction = static_cast<double>(active) / static_cast<double>(scores.size());
  if (fraction >= min_fraction) return Verdict::accept();
  return Verdict::reject(kReasonInactiveSpeaker);
}

Verdict filter_frontal(const FrameTrack& track, double yaw_limit_deg, double pitch_limit_deg,
                       double max_delta_deg_per_frame) {
  if (track.empty()) throw PreconditionError("filter_frontal: empty track");
  for (const auto& f : track.frames) {
    if (std::abs(f.yaw) > yaw_limit_deg || std::abs(f.pitch) > pitch_limit_deg) {
      return Verdict::reject(kReasonSideFace);
    }
  }
  for (std::size_t i = 1; i < track.size(); ++i) {
    const auto& a = track.frames[i - 1];
    const auto& b = track.frames[i];
    if (std::abs(b.yaw - a.yaw) > max_delta_deg_per_frame ||
        std::abs(b.pitch - a.pitch) > max_delta_deg_per_frame) {
      return Verdict::reject(kReasonAbruptMotion);
    }
  }
  return Verdict::accept();
}

// ------------------------------------------------------------------ config --

void PipelineConfig::validate() const {
  if (!(min_gap_s >= 0.0)) throw ValidationError("min_gap_s", "must be >= 0");
  if (!(min_len_s >= 0.0)) throw ValidationError("min_len_s", "must be >= 0");
  if (!(active_min_fraction >= 0.0 && active_min_fraction <= 1.0)) {
    throw ValidationError("active_min_fraction", "must be in [0, 1]");
  }
  if (!(yaw_limit_deg > 0.0)) throw ValidationError("yaw_limit_deg", "must be > 0");
  if (!(pitch_limit_deg > 0.0)) throw ValidationError("pitch_limit_deg", "must be > 0");
  if (!(max_delta_deg > 0.0)) throw ValidationError("max_delta_deg", "must be > 0");
  if (!(fps > 0.0)) throw ValidationError("fps", "must be > 0");
  if (sample_rate <= 0) throw ValidationError("sample_rate", "must be > 0");
}

nlohmann::json PipelineConfig::to_json() const {
  return {{"score_threshold", score_threshold},
          {"min_gap_s", min_gap_s},
          {"min_len_s", min_len_s},
          {"active_min_fraction", active_min_fraction},
          {"yaw_limit_deg", yaw_limit_deg},
          {"pitch_limit_deg", pitch_limit_deg},
          {"max_delta_deg", max_delta_deg},
          {"fps", fps},
          {"sample_rate", sample_rate}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  PipelineConfig c;
  c.score_threshold = j.value("score_threshold", c.score_threshold);
  c.min_gap_s = j.value("min_gap_s", c.min_gap_s);
  c.min_len_s = j.value("min_len_s", c.min_len_s);
  c.active_min_fraction = j.value("active_min_fraction", c.active_min_fraction);
  c.yaw_limit_deg = j.value("yaw_limit_deg", c.yaw_limit_deg);
  c.pitch_limit_deg = j.value("pitch_limit_deg", c.pitch_limit_deg);
  c.max_delta_deg = j.value("max_delta_deg", c.max_delta_deg);
  c.fps = j.value("fps", c.fps);
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.validate();
  return c;
}

// ----------------------------------------------------------------- reports --

nlohmann::json StageReport::to_json() const {
  nlohmann::json rej = nlohmann::json::array();
  for (const auto& r : rejected) {
    nlohmann::json e = {{"id", r.unit_id}, {"item_id", r.item_id}, {"reason", r.reason}};
    if (!r.detail.empty()) e["detail"] = r.detail;
    rej.push_back(std::move(e));
  }
  return {{"stage", stage},
          {"input", input},
          {"accepted", accepted},
          {"emitted", emitted},
          {"rejected_count", rejected.size()},
          {"rejected", rej}};
}

void PipelineResult::check_conservation(std::size_t inputs) const {
  std::size_t expected_input = inputs;
  std::size_t total_rejected = 0;
  std::size_t fan_out = 0;
  for (const auto& r : reports) {
    if (!r.conserved()) {
      throw ContractError("stage '" + r.stage + "': accepted + rejected != input");
    }
    if (r.input != expected_input) {
      throw ContractError("stage '" + r.stage + "' consumed " + std::to_string(r.input) +
                          " units, previous stage emitted " + std::to_string(expected_input));
    }
    total_rejected += r.rejected.size();
    fan_out += r.emitted - r.accepted;
    expected_input = r.emitted;
  }
  if (manifest.clips.size() != expected_input) {
    throw ContractError("manifest holds " + std::to_string(manifest.clips.size()) +
                        " clips, final stage emitted " + std::to_string(expected_input));
  }
  if (total_rejected + manifest.clips.size() != inputs + fan_out) {
    throw ContractError("rejections plus accepted clips do not account for every input");
  }
}

nlohmann::json PipelineResult::reports_json() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : reports) out.push_back(r.to_json());
  return out;
}

// ---------------------------------------------------------------- pipeline --

namespace {

struct Unit {
  std::string id;
  const PipelineItem* item = nullptr;
  Segment segment;
  FrameTrack track;  // speaking scores, later merged with angles
  Tokens transcript;
};

template <typename Fn>
std::vector<Unit> run_stage(StageReport& report, std::vector<Unit> units, Fn&& fn) {
  report.input = units.size();
  std::vector<Unit> kept;
  for (auto& u : units) {
    Verdict v;
    std::string detail;
    try {
      v = fn(u);
    } catch (const std::exception& e) {
      v = Verdict::reject(kReasonAdapterError);
      detail = e.what();
    }
    if (v.accepted) {
      kept.push_back(std::move(u));
    } else {
      report.rejected.push_back({u.id, u.item->id, v.reason, detail});
    }
  }
  report.accepted = kept.size();
  report.emitted = kept.size();
  std::sort(report.rejected.begin(), report.rejected.end(),
            [](const StageRejection& a, const StageRejection& b) { return a.unit_id < b.unit_id; });
  return kept;
}

}  // namespace

PipelineResult run_pipeline(const std::vector<PipelineItem>& inputs,
                            const PipelineAdapters& adapters, const PipelineConfig& config,
                            const std::filesystem::path& out_dir) {
  config.validate();
  if (!adapters.speaker_scorer || !adapters.angle_estimator || !adapters.transcriber ||
      !adapters.mesh_lifter) {
    throw PreconditionError("run_pipeline: all four adapters are required");
  }
  std::set<std::string> seen;
  for (const auto& item : inputs) {
    if (item.id.empty()) throw ValidationError("inputs.id", "must be nonempty");
    if (!seen.insert(item.id).second) {
      throw ValidationError("inputs.id", "duplicate item id '" + item.id + "'");
    }
  }

  PipelineResult result;
  result.reports.resize(5);
  const char* names[] = {"segment", "active-speaker", "frontal", "transcribe", "lift"};
  for (std::size_t i = 0; i < 5; ++i) result.reports[i].stage = names[i];

  // Segmentation fans each item out into zero or more segments.
  std::vector<Unit> units;
  {
    StageReport& report = result.reports[0];
    report.input = inputs.size();
    for (const auto& item : inputs) {
      try {
        FrameTrack track = adapters.speaker_scorer->score(item);
        if (track.empty()) throw AdapterError("speaker scorer returned no frames");
        track.validate();
        const auto segments =
            segment_utterances(track, config.score_threshold, config.min_gap_s, config.min_len_s);
        if (segments.empty()) {
          report.rejected.push_back({item.id, item.id, kReasonNoSpeech, ""});
          continue;
        }
        ++report.accepted;
        for (std::size_t k = 0; k < segments.size(); ++k) {
          char suffix[16];
          std::snprintf(suffix, sizeof(suffix), "_%02zu", k);
          Unit u;
          u.id = item.id + suffix;
          u.item = &item;
          u.segment = segments[k];
          u.track = track.slice(segments[k].first, segments[k].last);
          units.push_back(std::move(u));
        }
      } catch (const std::exception& e) {
        report.rejected.push_back({item.id, item.id, kReasonAdapterError, e.what()});
      }
    }
    report.emitted = units.size();
    std::sort(report.rejected.begin(), report.rejected.end(),
              [](const StageRejection& a, const StageRejection& b) { return a.unit_id < b.unit_id; });
  }

  units = run_stage(result.reports[1], std::move(units), [&](Unit& u) {
    return verify_active_speaker(u.track.scores(), config.score_threshold,
                                 config.active_min_fraction);
  });

  units = run_stage(result.reports[2], std::move(units), [&](Unit& u) {
    FrameTrack angles = adapters.angle_estimator->estimate(*u.item, u.track);
    if (angles.size() != u.track.size()) {
      throw AdapterError("angle estimator returned " + std::to_string(angles.size()) +
                         " frames for a " + std::to_string(u.track.size()) + "-frame segment");
    }
    angles.validate();
    for (std::size_t i = 0; i < angles.size(); ++i) {
      u.track.frames[i].yaw = angles.frames[i].yaw;
      u.track.frames[i].pitch = angles.frames[i].pitch;
    }
    return filter_frontal(u.track, config.yaw_limit_deg, config.pitch_limit_deg,
                          config.max_delta_deg);
  });

  units = run_stage(result.reports[3], std::move(units), [&](Unit& u) {
    u.transcript = adapters.transcriber->transcribe(*u.item, u.segment);
    if (u.transcript.empty()) return Verdict::reject(kReasonEmptyTranscript);
    return Verdict::accept();
  });

  CorpusManifest& manifest = result.manifest;
  manifest.rig_id = adapters.mesh_lifter->rig_id();
  manifest.vertex_count = adapters.mesh_lifter->vertex_count();
  manifest.lip_vertex_indices = adapters.mesh_lifter->lip_vertex_indices();
  manifest.fps = config.fps;
  manifest.sample_rate = config.sample_rate;
  manifest.base_dir = out_dir;
  std::map<std::string, SpeechTrack> audio_cache;

  units = run_stage(result.reports[4], std::move(units), [&](Unit& u) {
    MotionSequence motion = adapters.mesh_lifter->lift(*u.item, u.segment, config.fps);
    motion.validate();
    if (motion.vertex_count != manifest.vertex_count) {
      throw AdapterError("lifted mesh has " + std::to_string(motion.vertex_count) +
                         " vertices, rig declares " + std::to_string(manifest.vertex_count));
    }
    SpeechTrack audio;
    audio.sample_rate = config.sample_rate;
    const auto first = static_cast<std::size_t>(std::lround(u.segment.start * config.sample_rate));
    const auto count =
        static_cast<std::size_t>(std::lround(motion.duration_seconds() * config.sample_rate));
    if (!u.item->audio_path.empty()) {
      auto it = audio_cache.find(u.item->id);
      if (it == audio_cache.end()) {
        it = audio_cache.emplace(u.item->id, read_wav(u.item->audio_path)).first;
      }
      const SpeechTrack& full = it->second;
      if (full.sample_rate != config.sample_rate) {
        throw FormatError("item audio is " + std::to_string(full.sample_rate) + " Hz, expected " +
                          std::to_string(config.sample_rate));
      }
      if (first + count > full.samples.size()) {
        throw FormatError("item audio ends before segment end");
      }
      audio.samples.assign(full.samples.begin() + static_cast<std::ptrdiff_t>(first),
                           full.samples.begin() + static_cast<std::ptrdiff_t>(first + count));
    } else {
      // No source audio: the clip carries silence of the right length.
      audio.samples.assign(count, 0.0f);
    }
    ClipRecord rec;
    rec.id = u.id;
    rec.language = u.item->language;
    rec.motion_path = "motion/" + u.id + ".mtlk";
    rec.audio_path = "audio/" + u.id + ".wav";
    rec.transcript = u.transcript;
    rec.fps = config.fps;
    write_motion(motion, out_dir / rec.motion_path);
    write_wav(audio, out_dir / rec.audio_path);
    manifest.clips.push_back(std::move(rec));
    return Verdict::accept();
  });

  std::set<std::string> langs;
  std::vector<std::string> ids;
  for (const auto& c : manifest.clips) {
    langs.insert(c.language);
    ids.push_back(c.id);
  }
  manifest.languages.assign(langs.begin(), langs.end());
  manifest.splits["all"] = ids;
  manifest.validate();
  save_manifest(manifest, out_dir / "corpus.json");
  write_file(out_dir / "stage_reports.json", result.reports_json().dump(2) + "\n");
  result.check_conservation(inputs.size());
  return result;
}

// ---------------------------------------------------------------- fixtures --

FrameTrack MockItemSpec::frames() const {
  const int n = static_cast<int>(std::lround(duration * fps));
  FrameTrack track;
  track.frames.resize(static_cast<std::size_t>(std::max(n, 0)));
  auto inside = [](double t, const std::vector<std::pair<double, double>>& spans) {
    for (const auto& [a, b] : spans) {
      if (t >= a - kTimeEps && t < b - kTimeEps) return true;
    }
    return false;
  };
  for (int i = 0; i < n; ++i) {
    FrameRecord& f = track.frames[static_cast<std::size_t>(i)];
    f.t = i / fps;
    f.speaking_score = inside(f.t, silences) ? 0.05 : inside(f.t, inactive) ? 0.3 : 0.9;
    f.yaw = yaw;
    f.pitch = pitch;
    if (side_face_at && f.t >= *side_face_at - kTimeEps) {
      f.yaw = yaw + std::min(1.0, f.t - *side_face_at) * (40.0 - yaw);
    }
    if (abrupt_at && f.t >= *abrupt_at - kTimeEps) f.yaw += 20.0;
  }
  return track;
}

std::vector<PipelineItem> MockFixture::inputs() const {
  std::vector<PipelineItem> out;
  for (const auto& s : items) out.push_back(s.item);
  return out;
}

const MockItemSpec& MockFixture::item(const std::string& id) const {
  for (const auto& s : items) {
    if (s.item.id == id) return s;
  }
  throw PreconditionError("fixture has no item '" + id + "'");
}

MockFixture MockFixture::from_json(const nlohmann::json& j) {
  try {
    MockFixture f;
    for (const auto& e : j.at("items")) {
      MockItemSpec s;
      s.item.id = e.at("id").get<std::string>();
      s.item.language = e.value("language", std::string("en"));
      s.item.video_path = e.value("video_path", std::string());
      s.item.audio_path = e.value("audio_path", std::string());
      s.duration = e.value("duration", s.duration);
      s.fps = e.value("fps", s.fps);
      s.transcript = e.value("transcript", Tokens{});
      s.yaw = e.value("yaw", 0.0);
      s.pitch = e.value("pitch", 0.0);
      s.silences = e.value("silences", std::vector<std::pair<double, double>>{});
      s.inactive = e.value("inactive", std::vector<std::pair<double, double>>{});
      if (e.contains("side_face")) s.side_face_at = e.at("side_face").get<double>();
      if (e.contains("abrupt")) s.abrupt_at = e.at("abrupt").get<double>();
      s.fail = e.value("fail", std::string());
      s.expect = e.value("expect", std::string("accept"));
      if (!(s.fps > 0.0) || !(s.duration > 0.0)) {
        throw ValidationError("items." + s.item.id, "duration and fps must be > 0");
      }
      f.items.push_back(std::move(s));
    }
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("mock fixture: ") + e.what());
  }
}

MockFixture MockFixture::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("mock fixture '" + path.string() + "': " + e.what());
  }
}

MockAdapters::MockAdapters(MockFixture fixture) : fixture_(std::move(fixture)) {}

FrameTrack MockAdapters::score(const PipelineItem& item) {
  const MockItemSpec& s = fixture_.item(item.id);
  if (s.fail == "score") throw AdapterError("mock speaker scorer failure for " + item.id);
  FrameTrack t = s.frames();
  for (auto& f : t.frames) f.yaw = f.pitch = 0.0;
  return t;
}

FrameTrack MockAdapters::estimate(const PipelineItem& item, const FrameTrack& segment) {
  const MockItemSpec& s = fixture_.item(item.id);
  if (s.fail == "angles") throw AdapterError("mock angle estimator failure for " + item.id);
  const FrameTrack full = s.frames();
  FrameTrack out = segment;
  for (auto& f : out.frames) {
    const auto i = static_cast<std::size_t>(std::lround(f.t * s.fps));
    if (i >= full.size()) throw AdapterError("timestamp outside item");
    f.yaw = full.frames[i].yaw;
    f.pitch = full.frames[i].pitch;
  }
  return out;
}

Tokens MockAdapters::transcribe(const PipelineItem& item, const Segment&) {
  const MockItemSpec& s = fixture_.item(item.id);
  if (s.fail == "transcribe") throw AdapterError("mock transcriber failure for " + item.id);
  return s.transcript;
}

std::vector<int> MockAdapters::lip_vertex_indices() const {
  std::vector<int> lips;
  for (int v = 16; v < 24; ++v) lips.push_back(v);
  return lips;
}

MotionSequence MockAdapters::lift(const PipelineItem& item, const Segment& segment, double fps) {
  const MockItemSpec& s = fixture_.item(item.id);
  if (s.fail == "lift") throw AdapterError("mock mesh lifter failure for " + item.id);
  const int frames = std::max(1, static_cast<int>(std::lround(segment.duration() * fps)));
  MotionSequence m(frames, vertex_count(), fps);
  for (int t = 0; t < frames; ++t) {
    const double time = segment.start + t / fps;
    for (int v = 0; v < m.vertex_count; ++v) {
      const double open = v >= 16 ? 0.3 * std::sin(2.0 * std::numbers::pi * 3.0 * time + v) : 0.0;
      m.at(t, v, 0) = static_cast<float>(std::cos(0.7 * v));
      m.at(t, v, 1) = static_cast<float>(std::sin(0.7 * v) + open);
      m.at(t, v, 2) = static_cast<float>(0.1 * v);
    }
  }
  return m;
}

// ---------------------------------------------------------------- external --

ExternalAdapters::ExternalAdapters(Commands commands)
    : commands_(std::move(commands)),
      scorer_(commands_.speaker_scorer),
      angles_(commands_.angle_estimator),
      transcriber_(commands_.transcriber),
      lifter_(commands_.mesh_lifter) {}

nlohmann::json ExternalAdapters::call(LineProcess& process, const nlohmann::json& request) {
  const std::string line = process.request(request.dump());
  nlohmann::json reply;
  try {
    reply = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw AdapterError("adapter '" + process.command() + "' sent invalid JSON: " + e.what());
  }
  if (reply.contains("error")) {
    throw AdapterError("adapter '" + process.command() + "': " + reply["error"].dump());
  }
  return reply;
}

FrameTrack ExternalAdapters::score(const PipelineItem& item) {
  const auto reply = call(scorer_, {{"op", "score"}, {"item", item_json(item)}});
  FrameTrack t;
  for (const auto& f : reply.at("frames")) {
    t.frames.push_back({f.at(0).get<double>(), f.at(1).get<double>(), 0.0, 0.0});
  }
  return t;
}

FrameTrack ExternalAdapters::estimate(const PipelineItem& item, const FrameTrack& segment) {
  std::vector<double> times;
  for (const auto& f : segment.frames) times.push_back(f.t);
  const auto reply =
      call(angles_, {{"op", "angles"}, {"item", item_json(item)}, {"times", times}});
  const auto& angles = reply.at("angles");
  if (angles.size() != segment.size()) throw AdapterError("angle count mismatch");
  FrameTrack out = segment;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.frames[i].yaw = angles.at(i).at(0).get<double>();
    out.frames[i].pitch = angles.at(i).at(1).get<double>();
  }
  return out;
}

Tokens ExternalAdapters::transcribe(const PipelineItem& item, const Segment& segment) {
  const auto reply = call(transcriber_, {{"op", "transcribe"},
                                         {"item", item_json(item)},
                                         {"segment", {segment.start, segment.end}}});
  return reply.at("tokens").get<Tokens>();
}

MotionSequence ExternalAdapters::lift(const PipelineItem& item, const Segment& segment,
                                      double fps) {
  const auto reply = call(lifter_, {{"op", "lift"},
                                    {"item", item_json(item)},
                                    {"segment", {segment.start, segment.end}},
                                    {"fps", fps}});
  return read_motion(reply.at("motion_path").get<std::string>());
}

}  // namespace multitalk
