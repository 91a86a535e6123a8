#include "multitalk/fileutil.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdlib>
#include <sys/wait.h>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun cli(const std::string& args, const mt_test::TempDir& dir) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string("\"") + MULTITALK_CLI_PATH + "\" " + args + " >\"" +
                          out.string() + "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = multitalk::read_file(out);
  r.err = multitalk::read_file(err);
  return r;
}

json last_json_line(const std::string& text) {
  std::string last;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string line = text.substr(pos, nl - pos);
    if (!line.empty() && line.front() == '{') last = line;
    if (nl == std::string::npos) break;
    pos = nl + 1;
  }
  return json::parse(last);
}

const std::string kFixture = std::string(MULTITALK_FIXTURE_DIR) + "/pipeline_planted.json";

}  // namespace

TEST(Cli, SynthDataIsByteIdenticalUnderOneSeed) {
  mt_test::TempDir dir("cli_synth");
  const std::string base = "synth-data --clips 8 --seed 5 --log-level error --out-dir ";
  ASSERT_EQ(cli(base + "\"" + (dir / "a").string() + "\"", dir).code, 0);
  ASSERT_EQ(cli(base + "\"" + (dir / "b").string() + "\"", dir).code, 0);
  EXPECT_EQ(multitalk::read_file(dir / "a" / "corpus.json"),
            multitalk::read_file(dir / "b" / "corpus.json"));
  for (const auto& e : fs::directory_iterator(dir / "a" / "motion")) {
    EXPECT_EQ(multitalk::read_file(e.path()),
              multitalk::read_file(dir / "b" / "motion" / e.path().filename()));
  }
}

TEST(Cli, RunConfigEchoesOptions) {
  mt_test::TempDir dir("cli_cfg");
  ASSERT_EQ(cli("--seed 7 --log-level error --out-dir \"" + dir.path().string() +
                    "\" synth-data --clips 4",
                dir)
                .code,
            0);
  const json cfg = json::parse(multitalk::read_file(dir / "run_config.json"));
  EXPECT_EQ(cfg.at("subcommand"), "synth-data");
  EXPECT_EQ(cfg.at("seed"), 7);
  EXPECT_EQ(cfg.at("options").at("clips"), "4");
  EXPECT_EQ(cfg.at("options").at("conflicting"), false);
}

TEST(Cli, BuildCorpusFromFixture) {
  mt_test::TempDir dir("cli_build");
  const CliRun r = cli("build-corpus --log-level error --fixture \"" + kFixture +
                        "\" --out-dir \"" + dir.path().string() + "\"",
                    dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const json summary = last_json_line(r.out);
  EXPECT_EQ(summary.at("inputs"), 20);
  EXPECT_EQ(summary.at("clips"), 15);
  const json reports = json::parse(multitalk::read_file(dir / "stage_reports.json"));
  ASSERT_EQ(reports.size(), 5u);
  std::size_t rejected = 0;
  for (const auto& s : reports) rejected += s.at("rejected_count").get<std::size_t>();
  EXPECT_EQ(rejected, 5u);
}

TEST(Cli, FailuresPrintStructuredErrors) {
  mt_test::TempDir dir("cli_err");
  const CliRun missing = cli("stats --corpus \"" + (dir / "nope.json").string() + "\" --out-dir \"" +
                              dir.path().string() + "\"",
                          dir);
  EXPECT_EQ(missing.code, 1);
  const json e = last_json_line(missing.err);
  EXPECT_EQ(e.at("error").at("kind"), "io");
  EXPECT_FALSE(e.at("error").at("message").get<std::string>().empty());

  const CliRun usage = cli("train-vqvae --out-dir \"" + dir.path().string() + "\"", dir);
  EXPECT_EQ(usage.code, 2);
  EXPECT_EQ(last_json_line(usage.err).at("error").at("kind"), "usage");

  const CliRun bad = cli("synth-data --clips 5 --languages 2 --out-dir \"" + dir.path().string() +
                          "\"",
                      dir);
  EXPECT_EQ(bad.code, 1);
  EXPECT_EQ(last_json_line(bad.err).at("error").at("field"), "clips");
}

TEST(Cli, SpearmanFromScoreFiles) {
  mt_test::TempDir dir("cli_rho");
  multitalk::write_file(dir / "a.txt", "score\n1\n2\n3\n4\n5\n");
  multitalk::write_file(dir / "b.json", "[5, 6, 7, 8, 7]");
  const CliRun r = cli("eval --metric spearman --scores-a \"" + (dir / "a.txt").string() +
                        "\" --scores-b \"" + (dir / "b.json").string() + "\" --out-dir \"" +
                        dir.path().string() + "\"",
                    dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const json doc = json::parse(multitalk::read_file(dir / "spearman.json"));
  EXPECT_EQ(doc.at("n"), 5);
  // Ranks of b are 1, 2, 3.5, 5, 3.5: Pearson on ranks gives 8 / sqrt(10 * 9.5).
  EXPECT_NEAR(doc.at("rho").get<double>(), 8.0 / std::sqrt(95.0), 1e-12);
}
