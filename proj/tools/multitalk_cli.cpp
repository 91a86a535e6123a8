// multitalk: command-line driver for the corpus, training, synthesis and
// evaluation tools.

#include "multitalk/corpus.hpp"
#include "multitalk/error.hpp"
#include "multitalk/fileutil.hpp"
#include "multitalk/metrics.hpp"
#include "multitalk/pipeline.hpp"
#include "multitalk/synthesizer.hpp"
#include "multitalk/synthkit.hpp"
#include "multitalk/vqvae.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace multitalk;

namespace {

constexpr const char* kOutDirEnv = "MULTITALK_OUT_DIR";

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };
Level g_level = Level::Info;

void log(Level level, const std::string& msg) {
  if (level > g_level) return;
  static const char* names[] = {"error", "warn", "info", "debug"};
  std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

struct Globals {
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string log_level = "info";
};

// Echo of every resolved option, written into each run's output directory.
void write_run_config(const CLI::App& app, const CLI::App& sub, const Globals& g) {
  json options = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_name() == "--help" || opt->get_name().empty()) continue;
    const auto results = opt->results();
    std::string name = opt->get_name();
    while (!name.empty() && name.front() == '-') name.erase(name.begin());
    if (opt->get_expected_max() == 0) {
      options[name] = opt->count() > 0;
    } else if (results.empty()) {
      options[name] = opt->get_default_str();
    } else if (results.size() == 1) {
      options[name] = results.front();
    } else {
      options[name] = results;
    }
  }
  json doc = {{"tool", app.get_name()},
              {"version", MULTITALK_VERSION},
              {"subcommand", sub.get_name()},
              {"seed", g.seed},
              {"out_dir", g.out_dir},
              {"log_level", g.log_level},
              {"options", options}};
  write_file(fs::path(g.out_dir) / "run_config.json", doc.dump(2) + "\n");
}

void write_json(const fs::path& path, const json& doc) { write_file(path, doc.dump(2) + "\n"); }

std::string loss_csv(const std::vector<double>& history) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,loss\n";
  for (std::size_t i = 0; i < history.size(); ++i) os << i + 1 << ',' << history[i] << '\n';
  return os.str();
}

std::vector<double> read_scores(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    const json doc = json::parse(text);
    if (doc.is_array()) return doc.get<std::vector<double>>();
    if (doc.contains("scores")) return doc.at("scores").get<std::vector<double>>();
  } catch (const json::exception&) {
  }
  // Plain text: one number per line; a non-numeric first line is a header.
  std::vector<double> out;
  std::istringstream is(text);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      std::size_t used = 0;
      const double v = std::stod(line, &used);
      out.push_back(v);
    } catch (const std::exception&) {
      if (!first) throw ParseError("scores file '" + path.string() + "': bad line '" + line + "'");
    }
    first = false;
  }
  return out;
}

json error_record(const std::string& kind, const std::string& message,
                  const std::string& field = "") {
  json e = {{"kind", kind}, {"message", message}};
  if (!field.empty()) e["field"] = field;
  return {{"error", e}};
}

// ------------------------------------------------------------ subcommands --

struct SynthDataArgs {
  int languages = 2;
  int clips = 300;
  bool conflicting = false;
  int symbols_per_language = 6;
  int min_symbols = 3;
  int max_symbols = 8;
  double symbol_duration = 0.24;
  double train_fraction = 0.8;
  std::uint64_t rig_seed = 1234;
};

int run_synth_data(const SynthDataArgs& a, const Globals& g) {
  if (a.languages < 1 || a.clips < a.languages || a.clips % a.languages != 0) {
    throw ValidationError("clips", "must be a positive multiple of --languages");
  }
  SynthCorpusConfig c;
  c.languages = a.languages;
  c.clips_per_language = a.clips / a.languages;
  c.conflicting = a.conflicting;
  c.symbols_per_language = a.symbols_per_language;
  c.min_symbols = a.min_symbols;
  c.max_symbols = a.max_symbols;
  c.symbol_duration = a.symbol_duration;
  c.train_fraction = a.train_fraction;
  c.seed = g.seed;
  c.rig_seed = a.rig_seed;
  const CorpusManifest m = build_synthetic_corpus(c, g.out_dir);
  log(Level::Info, "wrote " + std::to_string(m.clips.size()) + " clips to " + g.out_dir);
  std::cout << corpus_stats(m).to_json().dump(2) << "\n";
  return 0;
}

struct BuildCorpusArgs {
  std::string fixture;
  std::string inputs;
  std::string adapters;
  std::string config;
};

int run_build_corpus(const BuildCorpusArgs& a, const Globals& g) {
  PipelineConfig cfg;
  if (!a.config.empty()) cfg = PipelineConfig::from_json(json::parse(read_file(a.config)));
  PipelineResult result;
  std::size_t input_count = 0;
  if (!a.fixture.empty()) {
    MockAdapters mocks(MockFixture::load(a.fixture));
    const auto inputs = mocks.fixture().inputs();
    input_count = inputs.size();
    result = run_pipeline(inputs, mocks.adapters(), cfg, g.out_dir);
  } else {
    if (a.inputs.empty() || a.adapters.empty()) {
      throw ValidationError("adapters", "either --fixture or both --inputs and --adapters");
    }
    const json spec = json::parse(read_file(a.adapters));
    ExternalAdapters::Commands cmd;
    cmd.speaker_scorer = spec.at("speaker_scorer").get<std::string>();
    cmd.angle_estimator = spec.at("angle_estimator").get<std::string>();
    cmd.transcriber = spec.at("transcriber").get<std::string>();
    cmd.mesh_lifter = spec.at("mesh_lifter").get<std::string>();
    cmd.rig_id = spec.value("rig_id", cmd.rig_id);
    cmd.vertex_count = spec.value("vertex_count", cmd.vertex_count);
    cmd.lip_vertex_indices = spec.at("lip_vertex_indices").get<std::vector<int>>();
    ExternalAdapters ext(cmd);
    std::vector<PipelineItem> inputs;
    for (const auto& e : json::parse(read_file(a.inputs)).at("items")) {
      inputs.push_back({e.at("id").get<std::string>(), e.at("language").get<std::string>(),
                        e.value("video_path", std::string()), e.value("audio_path", std::string())});
    }
    input_count = inputs.size();
    result = run_pipeline(inputs, ext.adapters(), cfg, g.out_dir);
  }
  for (const auto& r : result.reports) {
    log(Level::Info, r.stage + ": " + std::to_string(r.input) + " in, " +
                         std::to_string(r.accepted) + " accepted, " +
                         std::to_string(r.rejected.size()) + " rejected");
  }
  std::cout << json({{"inputs", input_count}, {"clips", result.manifest.clips.size()}}).dump()
            << "\n";
  return 0;
}

struct TrainVqvaeArgs {
  std::string corpus;
  VqvaeConfig model;
  Stage1TrainConfig train;
};

int run_train_vqvae(TrainVqvaeArgs a, const Globals& g) {
  const CorpusManifest m = load_manifest(a.corpus);
  a.train.seed = g.seed;
  a.train.on_epoch = [](int epoch, double loss) {
    log(Level::Debug, "epoch " + std::to_string(epoch) + " L_VQ " + std::to_string(loss));
  };
  const auto start = std::chrono::steady_clock::now();
  std::optional<Stage1Checkpoint> trained;
  try {
    trained.emplace(train_stage1(m, a.model, a.train));
  } catch (const DivergenceError& e) {
    write_file(fs::path(g.out_dir) / "vqvae.last_good.ckpt", e.last_good_checkpoint());
    throw;
  }
  const Stage1Checkpoint& ckpt = *trained;
  ckpt.save(fs::path(g.out_dir) / "vqvae.ckpt");
  write_file(fs::path(g.out_dir) / "loss_history.csv", loss_csv(ckpt.loss_history));
  std::vector<CodeIndexSequence> codes;
  for (const ClipRecord* c : m.split("train")) {
    codes.push_back(quantize(ckpt.model.encode(load_clip_motion(m, *c)), ckpt.model.codebook()).indices);
  }
  write_json(fs::path(g.out_dir) / "codebook_report.json",
             codebook_report(codes, ckpt.model.config().codebook_size).to_json());
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log(Level::Info, "trained " + std::to_string(a.train.epochs) + " epochs in " +
                       std::to_string(secs) + " s, final L_VQ " +
                       std::to_string(ckpt.loss_history.back()));
  return 0;
}

struct TrainSynthArgs {
  std::string corpus;
  std::string vqvae;
  SynthConfig model;
  Stage2TrainConfig train;
  bool no_style = false;
  std::string latent_target = "self";
};

int run_train_synth(TrainSynthArgs a, const Globals& g) {
  const CorpusManifest m = load_manifest(a.corpus);
  const Stage1Checkpoint stage1 = Stage1Checkpoint::load(a.vqvae);
  a.model.use_style = !a.no_style;
  a.model.latent_target = latent_target_from_string(a.latent_target);
  a.train.seed = g.seed;
  a.train.on_epoch = [](int epoch, double loss) {
    log(Level::Debug, "epoch " + std::to_string(epoch) + " L_GEN " + std::to_string(loss));
  };
  std::optional<Stage2Checkpoint> trained;
  try {
    trained.emplace(train_stage2(m, stage1, a.model, a.train));
  } catch (const DivergenceError& e) {
    write_file(fs::path(g.out_dir) / "synth.last_good.ckpt", e.last_good_checkpoint());
    throw;
  }
  const Stage2Checkpoint& ckpt = *trained;
  ckpt.save(fs::path(g.out_dir) / "synth.ckpt");
  write_file(fs::path(g.out_dir) / "loss_history.csv", loss_csv(ckpt.loss_history));
  log(Level::Info, "final L_GEN " + std::to_string(ckpt.loss_history.back()));
  return 0;
}

struct GenerateArgs {
  std::string synth;
  std::string vqvae;
  std::string audio;
  std::string language;
  std::string corpus;
  std::string split = "test";
  std::string output;
  bool allow_unseen = false;
};

int run_generate(const GenerateArgs& a, const Globals& g) {
  const Stage2Checkpoint synth = Stage2Checkpoint::load(a.synth);
  const Stage1Checkpoint stage1 = Stage1Checkpoint::load(a.vqvae);
  synth.check_stage1(stage1);
  GenerateOptions opt;
  opt.allow_unseen = a.allow_unseen;
  json index = json::array();
  if (!a.audio.empty()) {
    if (a.language.empty()) throw ValidationError("language", "required with --audio");
    const Generation gen = generate(synth, stage1.model, read_wav(a.audio), a.language, opt);
    const std::string name =
        a.output.empty() ? fs::path(a.audio).stem().string() + ".mtlk" : a.output;
    write_motion(gen.motion, fs::path(g.out_dir) / name);
    index.push_back({{"file", name}, {"language", a.language}, {"frames", gen.motion.frames},
                     {"codes", gen.code_indices}});
  } else {
    if (a.corpus.empty()) throw ValidationError("audio", "give --audio or --corpus");
    const CorpusManifest m = load_manifest(a.corpus);
    opt.fps = m.fps;
    if (m.vertex_count != stage1.model.config().vertex_count) {
      throw ContractError("corpus rig does not match the stage-1 checkpoint");
    }
    for (const ClipRecord* c : m.split(a.split)) {
      const Generation gen =
          generate(synth, stage1.model, load_clip_audio(m, *c), c->language, opt);
      write_motion(gen.motion, fs::path(g.out_dir) / (c->id + ".mtlk"));
      index.push_back({{"clip_id", c->id}, {"language", c->language},
                       {"frames", gen.motion.frames}, {"codes", gen.code_indices}});
    }
  }
  write_json(fs::path(g.out_dir) / "generated.json", index);
  log(Level::Info, "generated " + std::to_string(index.size()) + " motion files");
  return 0;
}

struct EvalArgs {
  std::string pred;
  std::string corpus;
  std::string metric = "all";
  std::string split = "test";
  double snr = -7.5;
  std::string recognizer = "oracle";
  std::string recognizer_cmd;
  std::string modality = "av";
  std::string synthkit;
  std::string scores_a;
  std::string scores_b;
};

int run_eval(const EvalArgs& a, const Globals& g) {
  if (a.metric == "spearman") {
    if (a.scores_a.empty() || a.scores_b.empty()) {
      throw ValidationError("scores-a", "spearman needs --scores-a and --scores-b");
    }
    const auto x = read_scores(a.scores_a);
    const auto y = read_scores(a.scores_b);
    const auto rho = spearman_rho(x, y);
    const json doc = {{"metric", "spearman"},
                      {"n", x.size()},
                      {"rho", rho ? json(*rho) : json(nullptr)},
                      {"ranks_a", average_ranks(x)},
                      {"ranks_b", average_ranks(y)}};
    write_json(fs::path(g.out_dir) / "spearman.json", doc);
    std::cout << doc.dump() << "\n";
    return 0;
  }
  const bool want_lve = a.metric == "lve" || a.metric == "all";
  const bool want_avlr = a.metric == "avlr" || a.metric == "all";
  if (!want_lve && !want_avlr) {
    throw ValidationError("metric", "expected lve, avlr, spearman or all");
  }
  if (a.pred.empty() || a.corpus.empty()) {
    throw ValidationError("pred", "--pred and --corpus are required");
  }
  const CorpusManifest m = load_manifest(a.corpus);
  std::unique_ptr<Recognizer> recognizer;
  if (want_avlr) {
    if (a.recognizer == "oracle") {
      const fs::path spec_path =
          a.synthkit.empty() ? m.resolve(kSynthKitFile) : fs::path(a.synthkit);
      recognizer = std::make_unique<OracleRecognizer>(SynthKitSpec::load(spec_path));
    } else if (a.recognizer == "external") {
      if (a.recognizer_cmd.empty()) {
        throw ValidationError("recognizer-cmd", "required with --recognizer external");
      }
      recognizer = std::make_unique<ExternalRecognizer>(
          a.recognizer_cmd, fs::path(g.out_dir) / "recognizer_work",
          a.modality == "visual" ? Modality::VisualOnly : Modality::AudioVisual);
    } else {
      throw ValidationError("recognizer", "expected oracle or external");
    }
  }
  EvalReport report;
  report.config = {{"metric", a.metric}, {"split", a.split}, {"snr_db", a.snr},
                   {"seed", g.seed}, {"recognizer", recognizer ? recognizer->name() : ""}};
  for (const ClipRecord* c : m.split(a.split)) {
    const fs::path pred_path = fs::path(a.pred) / (c->id + ".mtlk");
    if (!fs::exists(pred_path)) {
      throw IoError("no prediction for clip '" + c->id + "' at " + pred_path.string());
    }
    const MotionSequence pred = read_motion(pred_path);
    EvalRow row{c->id, c->language, std::nullopt, std::nullopt};
    if (want_lve) row.lve = lve(pred, load_clip_motion(m, *c), m.lip_vertex_indices);
    if (want_avlr) {
      AvlrOptions opt;
      opt.snr_db = a.snr;
      opt.seed = derive_seed(g.seed, "noise:" + c->id);
      row.avlr_wer =
          avlr(c->id, c->language, pred, load_clip_audio(m, *c), c->transcript, *recognizer, opt)
              .wer;
    }
    report.rows.push_back(std::move(row));
  }
  report.aggregate();
  report.check_consistent();
  write_json(fs::path(g.out_dir) / "eval_report.json", report.to_json());
  write_file(fs::path(g.out_dir) / "eval_report.csv", report.to_csv());
  std::cout << report.to_json().at("per_language").dump(2) << "\n";
  return 0;
}

int run_stats(const std::string& corpus, const Globals& g) {
  const CorpusStats s = corpus_stats(load_manifest(corpus));
  write_json(fs::path(g.out_dir) / "stats.json", s.to_json());
  std::cout << s.to_json().dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multilingual speech-driven 3D talking heads", "multitalk"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(MULTITALK_VERSION));

  Globals g;
  const char* env_out = std::getenv(kOutDirEnv);
  g.out_dir = env_out ? env_out : "runs/latest";
  app.add_option("--seed", g.seed, "Master seed")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Artifact directory (env MULTITALK_OUT_DIR)")
      ->capture_default_str();
  app.add_option("--log-level", g.log_level, "error|warn|info|debug")
      ->check(CLI::IsMember({"error", "warn", "info", "debug"}))
      ->capture_default_str();

  SynthDataArgs sd;
  auto* synth_data = app.add_subcommand("synth-data", "Build a synthetic viseme corpus");
  synth_data->add_option("--languages", sd.languages)->capture_default_str();
  synth_data->add_option("--clips", sd.clips, "Total clips over all languages")
      ->capture_default_str();
  synth_data->add_flag("--conflicting", sd.conflicting,
                       "Share audio signatures across languages, vary visemes");
  synth_data->add_option("--symbols-per-language", sd.symbols_per_language)->capture_default_str();
  synth_data->add_option("--min-symbols", sd.min_symbols)->capture_default_str();
  synth_data->add_option("--max-symbols", sd.max_symbols)->capture_default_str();
  synth_data->add_option("--symbol-duration", sd.symbol_duration)->capture_default_str();
  synth_data->add_option("--train-fraction", sd.train_fraction)->capture_default_str();
  synth_data->add_option("--rig-seed", sd.rig_seed)->capture_default_str();

  BuildCorpusArgs bc;
  auto* build = app.add_subcommand("build-corpus", "Run the filtering pipeline");
  build->add_option("--fixture", bc.fixture, "Mock fixture JSON (uses the mock adapters)");
  build->add_option("--inputs", bc.inputs, "Items JSON for external adapters");
  build->add_option("--adapters", bc.adapters, "External adapter commands JSON");
  build->add_option("--config", bc.config, "Pipeline thresholds JSON");

  TrainVqvaeArgs tv;
  auto* train_vq = app.add_subcommand("train-vqvae", "Stage 1: train the motion codebook");
  train_vq->add_option("--corpus", tv.corpus)->required();
  train_vq->add_option("--epochs", tv.train.epochs)->capture_default_str();
  train_vq->add_option("--lr", tv.train.optimizer.lr)->capture_default_str();
  train_vq->add_option("--weight-decay", tv.train.optimizer.weight_decay)->capture_default_str();
  train_vq->add_option("--batch", tv.train.batch_size)->capture_default_str();
  train_vq->add_option("--width", tv.model.width)->capture_default_str();
  train_vq->add_option("--layers", tv.model.layers)->capture_default_str();
  train_vq->add_option("--heads", tv.model.heads)->capture_default_str();
  train_vq->add_option("--ffn", tv.model.ffn_hidden)->capture_default_str();
  train_vq->add_option("--downsample", tv.model.downsample)->capture_default_str();
  train_vq->add_option("--codebook-size", tv.model.codebook_size)->capture_default_str();
  train_vq->add_option("--latent-dim", tv.model.latent_dim)->capture_default_str();
  train_vq->add_option("--commitment", tv.model.commitment)->capture_default_str();

  TrainSynthArgs ts;
  auto* train_syn = app.add_subcommand("train-synth", "Stage 2: train the speech-to-motion decoder");
  train_syn->add_option("--corpus", ts.corpus)->required();
  train_syn->add_option("--vqvae", ts.vqvae)->required();
  train_syn->add_option("--epochs", ts.train.epochs)->capture_default_str();
  train_syn->add_option("--lr", ts.train.optimizer.lr)->capture_default_str();
  train_syn->add_option("--batch", ts.train.batch_size)->capture_default_str();
  train_syn->add_option("--width", ts.model.width)->capture_default_str();
  train_syn->add_option("--layers", ts.model.layers)->capture_default_str();
  train_syn->add_option("--heads", ts.model.heads)->capture_default_str();
  train_syn->add_option("--ffn", ts.model.ffn_hidden)->capture_default_str();
  train_syn->add_option("--style-dim", ts.model.style_dim)->capture_default_str();
  train_syn->add_flag("--no-style", ts.no_style, "Ablation: drop the language style token");
  train_syn->add_option("--latent-target", ts.latent_target, "self|ground_truth")
      ->check(CLI::IsMember({"self", "ground_truth"}))
      ->capture_default_str();

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Synthesize motion from speech");
  gen->add_option("--synth", ga.synth)->required();
  gen->add_option("--vqvae", ga.vqvae)->required();
  gen->add_option("--audio", ga.audio, "One WAV file");
  gen->add_option("--language", ga.language);
  gen->add_option("--output", ga.output, "File name for --audio output");
  gen->add_option("--corpus", ga.corpus, "Generate every clip of a split");
  gen->add_option("--split", ga.split)->capture_default_str();
  gen->add_flag("--allow-unseen", ga.allow_unseen, "Use the mean style for unknown languages");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "LVE / AVLR / Spearman reports");
  eval->add_option("--pred", ea.pred, "Directory of <clip_id>.mtlk predictions");
  eval->add_option("--corpus", ea.corpus);
  eval->add_option("--metric", ea.metric)
      ->check(CLI::IsMember({"lve", "avlr", "spearman", "all"}))
      ->capture_default_str();
  eval->add_option("--split", ea.split)->capture_default_str();
  eval->add_option("--snr", ea.snr)->capture_default_str();
  eval->add_option("--recognizer", ea.recognizer, "oracle|external")->capture_default_str();
  eval->add_option("--recognizer-cmd", ea.recognizer_cmd);
  eval->add_option("--modality", ea.modality)
      ->check(CLI::IsMember({"av", "visual"}))
      ->capture_default_str();
  eval->add_option("--synthkit", ea.synthkit, "Oracle spec (default: next to the manifest)");
  eval->add_option("--scores-a", ea.scores_a);
  eval->add_option("--scores-b", ea.scores_b);

  std::string stats_corpus;
  auto* stats = app.add_subcommand("stats", "Corpus statistics");
  stats->add_option("--corpus", stats_corpus)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_record("usage", e.what()).dump() << "\n";
    return 2;
  }

  g_level = g.log_level == "error"  ? Level::Error
            : g.log_level == "warn" ? Level::Warn
            : g.log_level == "info" ? Level::Info
                                    : Level::Debug;
  try {
    CLI::App* sub = app.get_subcommands().front();
    fs::create_directories(g.out_dir);
    write_run_config(app, *sub, g);
    if (sub == synth_data) return run_synth_data(sd, g);
    if (sub == build) return run_build_corpus(bc, g);
    if (sub == train_vq) return run_train_vqvae(tv, g);
    if (sub == train_syn) return run_train_synth(ts, g);
    if (sub == gen) return run_generate(ga, g);
    if (sub == eval) return run_eval(ea, g);
    if (sub == stats) return run_stats(stats_corpus, g);
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << error_record(e.kind(), e.what(), e.field()).dump() << "\n";
  } catch (const Error& e) {
    std::cerr << error_record(e.kind(), e.what()).dump() << "\n";
  } catch (const std::exception& e) {
    std::cerr << error_record("internal", e.what()).dump() << "\n";
  }
  return 1;
}
