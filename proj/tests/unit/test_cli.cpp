#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anatgraph/cli.hpp"
#include "anatgraph/trainer.hpp"
#include "anatgraph/volume.hpp"
#include "fixtures.hpp"

using namespace anatgraph;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 32^3 volumes, patch 8, F = 8: each command finishes in seconds.
fs::path small_config(const fs::path& dir) {
  const nlohmann::json j = {
      {"data",
       {{"dims", 32},
        {"subjects", 6},
        {"lesion_box", {{"lo", {8, 8, 8}}, {"hi", {24, 24, 32}}}},
        {"displacement_mm", 1.0},
        {"displacement_spacing_mm", 8.0}}},
      {"grid", {{"patch_size", 8}, {"step", 8}}},
      {"model", {{"patch_size", 8}, {"stages", {{4, 1}, {8, 1}}}, {"feature_dim", 8}}},
      {"train", {{"lr", 3e-3}, {"patch_queue", 16}, {"graph_queue", 32}}}};
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Workspace {
  fs::path dir;
  std::string cfg;
  std::string cohort;
};

Workspace make_workspace(const std::string& name, std::size_t subjects = 6) {
  Workspace w;
  w.dir = testing::scratch_dir(name);
  w.cfg = "--config " + small_config(w.dir).string();
  w.cohort = (w.dir / "cohort").string();
  REQUIRE(testing::run_cli_binary("synth " + w.cfg + " --out " + w.cohort + " --subjects " +
                                  std::to_string(subjects) + " --seed 3") == kExitOk);
  return w;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<double> csv_row(const std::string& line) {
  std::vector<double> out;
  std::istringstream in(line);
  std::string cell;
  std::getline(in, cell, ',');
  while (std::getline(in, cell, ',')) out.push_back(std::stod(cell));
  return out;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("synth writes the requested number of subjects") {
    const Workspace w = make_workspace("cli_synth", 4);
    const auto m = nlohmann::json::parse(slurp(fs::path(w.cohort) / "manifest.json"));
    CHECK(m["subjects"].size() == 4);
    CHECK(fs::exists(fs::path(w.cohort) / "labels.csv"));
    const fs::path dflt = testing::scratch_dir("cli_synth_default");
    CHECK(testing::run_cli_binary("synth --out " + (dflt / "c").string()) == kExitOk);
    CHECK(nlohmann::json::parse(slurp(dflt / "c" / "manifest.json"))["subjects"].size() == 40);
  }

  TEST_CASE("config and usage errors exit 2 with the field path") {
    const fs::path dir = testing::scratch_dir("cli_config_err");
    std::ofstream(dir / "bad.json") << R"({"data": {"lesion_box": {"lo": [16, 16, 16], "hi": [80, 48, 64]}}})";
    const fs::path log = dir / "log.txt";
    CHECK(testing::run_cli_binary("synth --config " + (dir / "bad.json").string() + " --out " +
                                  (dir / "c").string(), log) == kExitConfig);
    CHECK(slurp(log).find("data.lesion_box") != std::string::npos);
    std::ofstream(dir / "unknown.json") << R"({"model": {"bogus": 1}})";
    CHECK(testing::run_cli_binary("synth --config " + (dir / "unknown.json").string() + " --out " +
                                  (dir / "c").string(), log) == kExitConfig);
    CHECK(slurp(log).find("model.bogus") != std::string::npos);
    CHECK(testing::run_cli_binary("frobnicate") == kExitConfig);
    CHECK(testing::run_cli_binary("train --steps notanumber") == kExitConfig);
  }

  TEST_CASE("missing inputs exit 3") {
    const fs::path dir = testing::scratch_dir("cli_io_err");
    CHECK(testing::run_cli_binary("train --cohort " + (dir / "nope").string() + " --out " +
                                  (dir / "t").string()) == kExitIo);
    CHECK(testing::run_cli_binary("synth --config " + (dir / "missing.json").string() + " --out " +
                                  (dir / "c").string()) == kExitIo);
    std::ofstream(dir / "garbage.ckpt") << "not a checkpoint";
    CHECK(testing::run_cli_binary("extract --checkpoint " + (dir / "garbage.ckpt").string() +
                                  " --cohort " + (dir / "nope").string() + " --out " +
                                  (dir / "f.csv").string()) == kExitIo);
  }

  TEST_CASE("graph export carries provenance") {
    const Workspace w = make_workspace("cli_graph", 3);
    const fs::path out = w.dir / "graphs";
    REQUIRE(testing::run_cli_binary("graph " + w.cfg + " --cohort " + w.cohort + " --out " +
                                    out.string()) == kExitOk);
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(out)) {
      const auto j = nlohmann::json::parse(slurp(e.path()));
      CHECK(j.contains("subject_id"));
      CHECK(j["edges"].is_array());
      CHECK(j["provenance"]["tool"] == "anatgraph");
      CHECK(j["provenance"].contains("config_hash"));
      ++n;
    }
    CHECK(n == 3);
  }

  TEST_CASE("training is deterministic, resumable and zero-rate equals init") {
    const Workspace w = make_workspace("cli_train", 4);
    auto train = [&](const std::string& out, const std::string& extra) {
      return testing::run_cli_binary("train " + w.cfg + " --cohort " + w.cohort + " --out " +
                                     (w.dir / out).string() + " --seed 3 " + extra);
    };
    REQUIRE(train("a", "--steps 2") == kExitOk);
    REQUIRE(train("b", "--steps 2") == kExitOk);
    const std::string ma = slurp(w.dir / "a" / "metrics.jsonl");
    CHECK(!ma.empty());
    CHECK(ma == slurp(w.dir / "b" / "metrics.jsonl"));
    CHECK(slurp(w.dir / "a" / "model.ckpt") == slurp(w.dir / "b" / "model.ckpt"));

    REQUIRE(train("r", "--steps 2 --stop-after 1") == kExitOk);
    REQUIRE(train("r", "--steps 2 --resume " + (w.dir / "r" / "model.ckpt").string()) == kExitOk);
    CHECK(slurp(w.dir / "r" / "model.ckpt") == slurp(w.dir / "a" / "model.ckpt"));
    CHECK(slurp(w.dir / "r" / "metrics.jsonl") == ma);

    const auto first = nlohmann::json::parse(lines(ma).at(0));
    CHECK(first["version"] == kToolVersion);
    const auto step = nlohmann::json::parse(lines(ma).at(1));
    for (const char* k : {"step", "phase", "loss", "lr"}) CHECK(step.contains(k));

    REQUIRE(train("z", "--steps 1 --lr 0") == kExitOk);
    REQUIRE(train("i", "--steps 1 --init-only") == kExitOk);
    // Weights match; counters, queues and BN running statistics may differ.
    const TrainerState z = read_checkpoint(w.dir / "z" / "model.ckpt");
    const TrainerState i = read_checkpoint(w.dir / "i" / "model.ckpt");
    CHECK(z.model.params == i.model.params);
    CHECK(z.steps() > i.steps());

    std::ofstream(w.dir / "other.json") << R"({"train": {"lr": 0.5}})";
    CHECK(testing::run_cli_binary("train --config " + (w.dir / "other.json").string() +
                                  " --cohort " + w.cohort + " --out " + (w.dir / "r").string() +
                                  " --resume " + (w.dir / "r" / "model.ckpt").string()) ==
          kExitConfig);
  }

  TEST_CASE("extract, probe and explain end to end") {
    const Workspace w = make_workspace("cli_pipeline", 10);
    const std::string ckpt = (w.dir / "t" / "model.ckpt").string();
    REQUIRE(testing::run_cli_binary("train " + w.cfg + " --cohort " + w.cohort + " --out " +
                                    (w.dir / "t").string() + " --steps 1 --seed 3") == kExitOk);
    const std::string extract = "extract " + w.cfg + " --checkpoint " + ckpt + " --cohort " +
                                w.cohort + " --seed 3 ";
    REQUIRE(testing::run_cli_binary(extract + "--out " + (w.dir / "f1.csv").string() +
                                    " --per-node " + (w.dir / "nodes.csv").string()) == kExitOk);
    REQUIRE(testing::run_cli_binary(extract + "--out " + (w.dir / "f2.csv").string()) == kExitOk);
    const std::string f1 = slurp(w.dir / "f1.csv");
    CHECK(f1 == slurp(w.dir / "f2.csv"));
    const auto rows = lines(f1);
    CHECK(rows.at(0).rfind("# anatgraph", 0) == 0);
    REQUIRE(rows.size() == 2 + 10);
    CHECK(rows.at(1).rfind("subject_id,f0", 0) == 0);
    CHECK(csv_row(rows[2]).size() == 8);

    // Pooled features are the mean of the per-node rows of each subject.
    const auto node_rows = lines(slurp(w.dir / "nodes.csv"));
    const std::string first_id = rows[2].substr(0, rows[2].find(','));
    std::vector<double> mean(8, 0.0);
    std::size_t count = 0;
    for (const auto& l : node_rows) {
      if (l.rfind(first_id + ",", 0) != 0) continue;
      std::vector<double> v = csv_row(l);
      // subject_id,node,f0..f7
      for (std::size_t f = 0; f < 8; ++f) mean[f] += v[f + 1];
      ++count;
    }
    REQUIRE(count > 0);
    const auto pooled = csv_row(rows[2]);
    for (std::size_t f = 0; f < 8; ++f) CHECK(std::abs(mean[f] / count - pooled[f]) < 1e-5);

    const std::string labels = (fs::path(w.cohort) / "labels.csv").string();
    const std::string weights = (w.dir / "w.json").string();
    const std::string probe = "probe " + w.cfg + " --features " + (w.dir / "f1.csv").string() +
                              " --labels " + labels + " --seed 3 ";
    CHECK(testing::run_cli_binary(probe + "--k 11") == kExitConfig);
    REQUIRE(testing::run_cli_binary(probe + "--k 5 --out " + (w.dir / "p.json").string() +
                                    " --weights-out " + weights) == kExitOk);
    const auto pj = nlohmann::json::parse(slurp(w.dir / "p.json"));
    CHECK(pj["fold_scores"].size() == 5);

    const std::string explain = "explain " + w.cfg + " --checkpoint " + ckpt + " --cohort " +
                                w.cohort + " --subject " + first_id + " --seed 3 ";
    REQUIRE(testing::run_cli_binary(explain + "--probe-weights " + weights + " --out " +
                                    (w.dir / "e.json").string() + " --render " +
                                    (w.dir / "map.rvol").string()) == kExitOk);
    const auto ej = nlohmann::json::parse(slurp(w.dir / "e.json"));
    CHECK(ej["logit_check"].get<double>() < 1e-5);
    for (const char* k : {"subject_id", "beta", "scores_raw", "scores_norm"}) CHECK(ej.contains(k));
    const Volume map = read_rvol(w.dir / "map.rvol");
    for (float v : map.voxels) CHECK((v >= 0.0f && v <= 1.0f));

    // A zero-weight probe renders a flat 0.5 map.
    auto zero = nlohmann::json::parse(slurp(weights));
    for (auto& row : zero["w"]) for (auto& v : row) v = 0.0;
    for (auto& v : zero["b"]) v = 0.0;
    std::ofstream(w.dir / "zero.json") << zero.dump();
    REQUIRE(testing::run_cli_binary(explain + "--probe-weights " + (w.dir / "zero.json").string() +
                                    " --out " + (w.dir / "z.json").string()) == kExitOk);
    for (const auto& v : nlohmann::json::parse(slurp(w.dir / "z.json"))["scores_norm"]) {
      CHECK(v.get<double>() == 0.5);
    }

    // Mismatched probe width.
    auto wide = nlohmann::json::parse(slurp(weights));
    for (auto& row : wide["w"]) row.push_back(0.0);
    std::ofstream(w.dir / "wide.json") << wide.dump();
    CHECK(testing::run_cli_binary(explain + "--probe-weights " + (w.dir / "wide.json").string() +
                                  " --out " + (w.dir / "x.json").string()) == kExitConfig);

    // Encoder config that disagrees with the checkpoint.
    std::ofstream(w.dir / "f16.json") << R"({"data": {"dims": 32}, "grid": {"patch_size": 8, "step": 8},
      "model": {"patch_size": 8, "stages": [[4, 1], [8, 1]], "feature_dim": 16}})";
    CHECK(testing::run_cli_binary("extract --config " + (w.dir / "f16.json").string() +
                                  " --checkpoint " + ckpt + " --cohort " + w.cohort + " --out " +
                                  (w.dir / "f3.csv").string()) == kExitConfig);
  }

  TEST_CASE("raw HU ingestion windows volumes") {
    const fs::path dir = testing::scratch_dir("cli_hu");
    Volume v(1, 1, 4, 1.0f);
    v.voxels = {-1024.0f, -392.0f, 240.0f, 500.0f};
    write_rvol(v, dir / "raw.rvol");
    const Volume w = ingest_volume(dir / "raw.rvol", true);
    CHECK(w.voxels[0] == doctest::Approx(-1.0));
    CHECK(std::abs(w.voxels[1]) < 1e-6);
    CHECK(w.voxels[2] == doctest::Approx(1.0));
    CHECK(w.voxels[3] == 1.0f);
    CHECK(ingest_volume(dir / "raw.rvol", false) == v);
  }
}
