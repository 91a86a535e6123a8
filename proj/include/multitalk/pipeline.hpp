#pragma once

// Dataset construction from talking-face video: segment speech, verify the
// active speaker, keep frontal and steady heads, transcribe, lift to 3D. The
// four detectors are adapter interfaces; in-repo implementations are a
// fixture-driven mock set and a line-JSON bridge to external processes.

#include "multitalk/corpus.hpp"
#include "multitalk/metrics.hpp"
#include "multitalk/process.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace multitalk {

struct FrameRecord {
  double t = 0.0;
  double speaking_score = 0.0;
  double yaw = 0.0;    // degrees
  double pitch = 0.0;  // degrees
};

struct FrameTrack {
  std::vector<FrameRecord> frames;

  bool empty() const { return frames.empty(); }
  std::size_t size() const { return frames.size(); }
  // Median spacing of timestamps; 0 for fewer than two frames.
  double frame_period() const;
  // Frames [first, last).
  FrameTrack slice(std::size_t first, std::size_t last) const;
  std::vector<double> scores() const;

  // Timestamps strictly increasing, every field finite.
  void validate() const;
};

// Half-open time interval [start, end) over frames [first, last).
struct Segment {
  double start = 0.0;
  double end = 0.0;
  std::size_t first = 0;
  std::size_t last = 0;

  double duration() const { return end - start; }
};

struct Verdict {
  bool accepted = true;
  std::string reason;  // empty when accepted

  static Verdict accept() { return {}; }
  static Verdict reject(std::string why) { return {false, std::move(why)}; }
};

inline constexpr const char* kReasonNoSpeech = "no-speech";
inline constexpr const char* kReasonInactiveSpeaker = "inactive-speaker-frames";
inline constexpr const char* kReasonSideFace = "side-face";
inline constexpr const char* kReasonAbruptMotion = "abrupt-motion";
inline constexpr const char* kReasonEmptyTranscript = "empty-transcript";
inline constexpr const char* kReasonAdapterError = "adapter-error";

// Runs of frames with speaking_score >= threshold. Silent gaps shorter than
// min_gap_s are bridged; runs shorter than min_len_s are dropped. A run ends
// one frame period after its last frame.
std::vector<Segment> segment_utterances(const FrameTrack& track, double score_threshold,
                                        double min_gap_s, double min_len_s);

Verdict verify_active_speaker(const std::vector<double>& scores, double threshold,
                              double min_fraction = 0.95);

// Side faces are reported ahead of abrupt motion when both occur.
Verdict filter_frontal(const FrameTrack& track, double yaw_limit_deg = 30.0,
                       double pitch_limit_deg = 20.0, double max_delta_deg_per_frame = 15.0);

struct PipelineItem {
  std::string id;
  std::string language;
  std::string video_path;  // opaque to the pipeline, passed to adapters
  std::string audio_path;  // optional 16-bit WAV; the clip audio is cut from it
};

class SpeakerScorer {
 public:
  virtual ~SpeakerScorer() = default;
  // Per-frame timestamps and speaking scores for the whole item.
  virtual FrameTrack score(const PipelineItem& item) = 0;
};

class AngleEstimator {
 public:
  virtual ~AngleEstimator() = default;
  // Head yaw/pitch for every frame of the segment (same timestamps).
  virtual FrameTrack estimate(const PipelineItem& item, const FrameTrack& segment) = 0;
};

class Transcriber {
 public:
  virtual ~Transcriber() = default;
  virtual Tokens transcribe(const PipelineItem& item, const Segment& segment) = 0;
};

class MeshLifter {
 public:
  virtual ~MeshLifter() = default;
  virtual std::string rig_id() const = 0;
  virtual int vertex_count() const = 0;
  virtual std::vector<int> lip_vertex_indices() const = 0;
  virtual MotionSequence lift(const PipelineItem& item, const Segment& segment,
                              double fps) = 0;
};

struct PipelineAdapters {
  SpeakerScorer* speaker_scorer = nullptr;
  AngleEstimator* angle_estimator = nullptr;
  Transcriber* transcriber = nullptr;
  MeshLifter* mesh_lifter = nullptr;
};

struct PipelineConfig {
  double score_threshold = 0.5;
  double min_gap_s = 0.5;
  double min_len_s = 1.0;
  double active_min_fraction = 0.95;
  double yaw_limit_deg = 30.0;
  double pitch_limit_deg = 20.0;
  double max_delta_deg = 15.0;
  double fps = kDefaultFps;
  int sample_rate = kDefaultSampleRate;

  void validate() const;
  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
};

struct StageRejection {
  std::string unit_id;  // item id, or segment id after segmentation
  std::string item_id;
  std::string reason;
  std::string detail;
};

struct StageReport {
  std::string stage;
  std::size_t input = 0;
  std::size_t accepted = 0;
  // Units handed to the next stage. Equals `accepted` except for the
  // segmentation stage, which fans items out into segments.
  std::size_t emitted = 0;
  std::vector<StageRejection> rejected;

  // accepted + rejected == input
  bool conserved() const { return accepted + rejected.size() == input; }
  nlohmann::json to_json() const;
};

struct PipelineResult {
  CorpusManifest manifest;
  std::vector<StageReport> reports;

  // Checks per-stage conservation and that each stage consumes what the
  // previous one emitted. Throws ContractError on violation.
  void check_conservation(std::size_t inputs) const;
  nlohmann::json reports_json() const;
};

// Writes motion/<clip>.mtlk, audio/<clip>.wav and corpus.json under out_dir.
// Segment clip ids are "<item>_<k>" with k counting the item's segments.
PipelineResult run_pipeline(const std::vector<PipelineItem>& inputs,
                            const PipelineAdapters& adapters, const PipelineConfig& config,
                            const std::filesystem::path& out_dir);

// ---------------------------------------------------------------- fixtures --

// Procedural description of one mock item:
//   {"id", "language", "duration", "fps", "transcript": [...],
//    "yaw": deg, "pitch": deg,
//    "silences": [[from, to], ...],          score 0.05 inside
//    "inactive": [[from, to], ...],          score 0.3 inside
//    "side_face": t,                         yaw ramps to 40 deg over 1 s
//    "abrupt": t,                            yaw steps by 20 deg
//    "fail": "score" | "angles" | "transcribe" | "lift",
//    "expect": "accept" | reason}
struct MockItemSpec {
  PipelineItem item;
  double duration = 3.0;
  double fps = kDefaultFps;
  Tokens transcript;
  double yaw = 0.0;
  double pitch = 0.0;
  std::vector<std::pair<double, double>> silences;
  std::vector<std::pair<double, double>> inactive;
  std::optional<double> side_face_at;
  std::optional<double> abrupt_at;
  std::string fail;
  std::string expect = "accept";

  FrameTrack frames() const;
};

struct MockFixture {
  std::vector<MockItemSpec> items;

  std::vector<PipelineItem> inputs() const;
  const MockItemSpec& item(const std::string& id) const;
  static MockFixture from_json(const nlohmann::json& j);
  static MockFixture load(const std::filesystem::path& path);
};

// All four adapters backed by a fixture. The transcriber echoes the fixture
// transcript; the lifter animates a small synthetic rig.
class MockAdapters : public SpeakerScorer,
                     public AngleEstimator,
                     public Transcriber,
                     public MeshLifter {
 public:
  explicit MockAdapters(MockFixture fixture);

  FrameTrack score(const PipelineItem& item) override;
  FrameTrack estimate(const PipelineItem& item, const FrameTrack& segment) override;
  Tokens transcribe(const PipelineItem& item, const Segment& segment) override;
  std::string rig_id() const override { return "mock-lifter-24"; }
  int vertex_count() const override { return 24; }
  std::vector<int> lip_vertex_indices() const override;
  MotionSequence lift(const PipelineItem& item, const Segment& segment, double fps) override;

  PipelineAdapters adapters() { return {this, this, this, this}; }
  const MockFixture& fixture() const { return fixture_; }

 private:
  MockFixture fixture_;
};

// One external process per adapter, spoken to in line-delimited JSON:
//   {"op": "score", "item": {...}}                 -> {"frames": [[t, score], ...]}
//   {"op": "angles", "item": {...}, "times": [...]} -> {"angles": [[yaw, pitch], ...]}
//   {"op": "transcribe", "item": {...}, "segment": [start, end]} -> {"tokens": [...]}
//   {"op": "lift", "item": {...}, "segment": [start, end], "fps": f}
//                                                   -> {"motion_path": "..."}
// A reply {"error": "..."} raises AdapterError.
class ExternalAdapters : public SpeakerScorer,
                         public AngleEstimator,
                         public Transcriber,
                         public MeshLifter {
 public:
  struct Commands {
    std::string speaker_scorer;
    std::string angle_estimator;
    std::string transcriber;
    std::string mesh_lifter;
    std::string rig_id = "external";
    int vertex_count = kFlameVertexCount;
    std::vector<int> lip_vertex_indices;
  };
  explicit ExternalAdapters(Commands commands);

  FrameTrack score(const PipelineItem& item) override;
  FrameTrack estimate(const PipelineItem& item, const FrameTrack& segment) override;
  Tokens transcribe(const PipelineItem& item, const Segment& segment) override;
  std::string rig_id() const override { return commands_.rig_id; }
  int vertex_count() const override { return commands_.vertex_count; }
  std::vector<int> lip_vertex_indices() const override { return commands_.lip_vertex_indices; }
  MotionSequence lift(const PipelineItem& item, const Segment& segment, double fps) override;

  PipelineAdapters adapters() { return {this, this, this, this}; }

 private:
  nlohmann::json call(LineProcess& process, const nlohmann::json& request);

  Commands commands_;
  LineProcess scorer_;
  LineProcess angles_;
  LineProcess transcriber_;
  LineProcess lifter_;
};

}  // namespace multitalk
