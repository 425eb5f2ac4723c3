#include <gtest/gtest.h>

#include <sys/wait.h>

#include <limits>
#include <regex>

#include "arob/io/config.hpp"
#include "arob/io/container.hpp"
#include "arob/io/pgm.hpp"
#include "support.hpp"

using namespace arob;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out, err;
};

Outcome run_cli(const std::string& args, const fixtures::TempDir& scratch) {
  const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = std::string("AROB_THREADS=1 '") + AROB_EXE + "' " + args + " >'" + out.string() + "' 2>'" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = io::read_text(out);
  o.err = io::read_text(err);
  return o;
}

// The failure line is the last stderr line: `arob: error kind=<k> exit=<c>: <message>`.
void expect_error_line(const Outcome& o, const std::string& kind, int code) {
  EXPECT_EQ(o.code, code) << o.err;
  std::string last = o.err;
  while (!last.empty() && last.back() == '\n') last.pop_back();
  last = last.substr(last.find_last_of('\n') + 1);
  const std::regex line("arob: error kind=([a-z]+) exit=([0-9]): .+");
  std::smatch m;
  ASSERT_TRUE(std::regex_match(last, m, line)) << last;
  EXPECT_EQ(m[1], kind);
  EXPECT_EQ(std::stoi(m[2]), code);
}

// A 36^3 cohort with a two-filter network: seconds per stage on one core.
nlohmann::json small_config(const fs::path& out) {
  nlohmann::json j = io::config_to_json(io::ExperimentConfig{});
  j["output_dir"] = out.string();
  j["phantom"]["subjects_per_class"] = 12;
  j["split"]["test_per_class"] = 3;
  j["split"]["val_per_class"] = 2;
  j["network"]["filters"] = {2, 2, 2, 2};
  j["network"]["dense_hidden"] = 8;
  j["train"]["max_epochs"] = 2;
  j["train"]["repetitions"] = 2;
  j["train"]["lr"] = 1e-3;
  j["occlusion"]["patch"] = 12;
  j["occlusion"]["stride"] = 12;
  return j;
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  if (fs::exists(dir))
    for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST(Cli, MissingSubcommandIsAUsageError) {
  fixtures::TempDir dir;
  expect_error_line(run_cli("", dir), "usage", 1);
  expect_error_line(run_cli("train --bogus-flag", dir), "usage", 1);
  expect_error_line(run_cli("attribute --method saliency", dir), "usage", 1);
  expect_error_line(run_cli("train --config '" + (dir / "absent.json").string() + "'", dir), "usage", 1);
}

TEST(Cli, BadInputsAreDataErrors) {
  fixtures::TempDir dir;
  io::write_text_atomic(dir / "cfg.json", R"({"train": {"learning_rate": 1}})");
  const auto o = run_cli("gen-data --config '" + (dir / "cfg.json").string() + "'", dir);
  expect_error_line(o, "data", 2);
  EXPECT_NE(o.err.find("train.learning_rate"), std::string::npos);

  io::write_text_atomic(dir / "junk.arob", "not a container");
  expect_error_line(run_cli("slice '" + (dir / "junk.arob").string() + "'", dir), "data", 2);
  // later stages without earlier outputs
  expect_error_line(run_cli("train --out '" + (dir / "empty").string() + "'", dir), "data", 2);
}

TEST(Cli, SliceWritesThreePlanes) {
  fixtures::TempDir dir;
  io::write_container(dir / "v.arob", fixtures::random_tensor<float>({1, 6, 7, 8}, 3));
  const auto o = run_cli("slice '" + (dir / "v.arob").string() + "' --out '" + (dir / "img").string() + "'", dir);
  ASSERT_EQ(o.code, 0) << o.err;
  for (const char* plane : {"axial", "coronal", "sagittal"}) {
    const fs::path p = dir / (std::string("img_") + plane + ".pgm");
    ASSERT_TRUE(fs::exists(p)) << p;
    EXPECT_NE(o.out.find(p.string()), std::string::npos);
  }
  const auto h = io::read_pgm_header(io::read_file(dir / "img_axial.pgm"));
  EXPECT_EQ(h.width, 8u);
  EXPECT_EQ(h.height, 7u);
}

TEST(Cli, ConvertRoundTripsThroughNifti) {
  fixtures::TempDir dir;
  const auto v = fixtures::random_tensor<float>({1, 4, 5, 6}, 8);
  io::write_container(dir / "v.arob", v);
  ASSERT_EQ(run_cli("convert '" + (dir / "v.arob").string() + "' '" + (dir / "v.nii").string() + "'", dir).code, 0);
  ASSERT_EQ(run_cli("convert '" + (dir / "v.nii").string() + "' '" + (dir / "w.arob").string() + "'", dir).code, 0);
  const auto w = io::read_container_as<float>(dir / "w.arob");
  ASSERT_EQ(w.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(w[i], v[i]);
}

TEST(Cli, SmallPipelineWritesEveryArtifact) {
  fixtures::TempDir dir;
  const fs::path out = dir / "exp";
  io::write_text_atomic(dir / "cfg.json", small_config(out).dump());
  const std::string cfg = "--config '" + (dir / "cfg.json").string() + "'";

  for (const char* stage : {"gen-data", "train", "attribute", "evaluate", "report"}) {
    const auto o = run_cli(std::string(stage) + " " + cfg, dir);
    ASSERT_EQ(o.code, 0) << stage << ": " << o.err;
  }
  EXPECT_TRUE(fs::exists(out / "config.json"));
  EXPECT_EQ(count_files(out / "data" / "volumes", ".arob"), count_files(out / "data" / "volumes", ".json"));

  // one heatmap per correctly classified test sample, per run, method and group
  for (std::size_t run = 0; run < 2; ++run) {
    const fs::path rd = out / "runs" / ("run_" + std::to_string(run));
    for (const char* f : {"checkpoint.ckpt", "metrics.csv", "predictions.csv", "result.json"})
      EXPECT_TRUE(fs::exists(rd / f)) << rd / f;
    std::size_t tp = 0, tn = 0;
    std::istringstream preds(io::read_text(rd / "predictions.csv"));
    std::string line;
    std::getline(preds, line);
    while (std::getline(preds, line)) {
      tp += line.ends_with(",patient,patient");
      tn += line.ends_with(",control,control");
    }
    for (const char* m : {"gxi", "gbp", "lrp", "occ"}) {
      const fs::path hd = out / "heatmaps" / ("run_" + std::to_string(run)) / m;
      EXPECT_EQ(count_files(hd / "tp", ".arob"), tp) << hd;
      EXPECT_EQ(count_files(hd / "tn", ".arob"), tn) << hd;
    }
  }

  const auto report = nlohmann::json::parse(io::read_text(out / "report.json"));
  ASSERT_EQ(report.at("methods").size(), 4u);
  for (const auto& [name, stats] : report.at("methods").items())
    for (const char* k : {"l2_tp", "l2_tn", "coherence_sum_pct", "coherence_density_pct", "coherence_gain_pct"})
      EXPECT_TRUE(stats.contains(k)) << name << " " << k;
  EXPECT_EQ(report.at("accuracy").at("runs"), 2);
  const std::string csv = io::read_text(out / "report.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,l2_tp,l2_tn,coherence_sum_pct,coherence_density_pct,coherence_gain_pct");
}

TEST(Cli, DivergedTrainingIsARunError) {
  fixtures::TempDir dir;
  const fs::path out = dir / "exp";
  auto j = small_config(out);
  j["train"]["max_epochs"] = 1;
  j["train"]["repetitions"] = 1;
  io::write_text_atomic(dir / "cfg.json", j.dump());
  const std::string cfg = "--config '" + (dir / "cfg.json").string() + "'";
  ASSERT_EQ(run_cli("gen-data " + cfg, dir).code, 0);

  // poison every volume so no run can produce a finite loss
  for (const auto& e : fs::directory_iterator(out / "data" / "volumes")) {
    if (e.path().extension() != ".arob") continue;
    auto v = io::read_container_as<float>(e.path());
    v[0] = std::numeric_limits<float>::quiet_NaN();
    io::write_container(e.path(), v);
  }
  expect_error_line(run_cli("train " + cfg, dir), "run", 3);
}
