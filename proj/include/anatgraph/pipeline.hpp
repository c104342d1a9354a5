#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anatgraph/augment.hpp"
#include "anatgraph/encoders.hpp"
#include "anatgraph/probe.hpp"
#include "anatgraph/synthgen.hpp"
#include "anatgraph/trainer.hpp"

namespace anatgraph {

inline constexpr const char* kToolVersion = "0.1.0";

struct ProbeConfig {
  std::size_t k = 5;
  double lambda = 1e-3;
  int max_iterations = 2000;
  double tolerance = 1e-6;
};

struct PathsConfig {
  std::string cohort;
  std::string out;
};

// Every section of the JSON run configuration. Missing keys keep their
// defaults; unknown keys are rejected with their full path.
struct RunConfig {
  std::uint64_t seed = 0;
  SynthConfig data;
  GridConfig grid;
  ModelConfig model;
  AugmentConfig augment;
  TrainConfig train;
  ProbeConfig probe;
  PathsConfig paths;
  unsigned workers = 0;  // 0: hardware concurrency
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
std::uint64_t config_hash(const RunConfig& c);
// Re-derives the fields tied to other sections (seed, patch size) and
// validates cross-section consistency.
void finalize(RunConfig& c);

struct CohortSubject {
  std::string id;
  std::filesystem::path volume;
  std::filesystem::path transform;
  int label = 0;
  double severity = 0.0;
  std::vector<std::size_t> lesion_nodes;
};

struct CohortIndex {
  std::filesystem::path dir;
  nlohmann::json manifest;
  std::filesystem::path atlas;
  std::filesystem::path mask;
  std::vector<CohortSubject> subjects;
};

// Reads and checks manifest.json. Throws IoError if it is missing or malformed.
CohortIndex load_cohort(const std::filesystem::path& dir);

// RVOL reader for subject volumes; with raw_hu the voxels are HU and are
// windowed onto [-1, 1].
Volume ingest_volume(const std::filesystem::path& path, bool raw_hu);

// Atlas grid plus one patient graph per subject.
TrainingSet build_training_set(const CohortIndex& cohort, const GridConfig& grid, bool raw_hu,
                               unsigned workers = 1);
// Same, from a cohort held in memory.
TrainingSet build_training_set(const Cohort& cohort, const GridConfig& grid, unsigned workers = 1);

// H' for one subject graph in eval mode.
Tensor node_features(ModelState& model, const TrainingSet& data, std::size_t subject);

// Pooled, head-discarded features for every subject; per-node H' is kept
// when `per_node` is given.
FrozenFeatureTable extract_features(ModelState& model, const TrainingSet& data,
                                    std::vector<Tensor>* per_node = nullptr, unsigned workers = 1);

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must not
// depend on scheduling.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn);

unsigned resolve_workers(unsigned requested);

}  // namespace anatgraph
