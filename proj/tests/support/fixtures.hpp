#pragma once

#include <filesystem>
#include <string>

#include "anatgraph/pipeline.hpp"

namespace anatgraph::testing {

// Empty directory under the system temp dir, recreated on every call.
std::filesystem::path scratch_dir(const std::string& name);

// 32^3 cohort with the lesion box scaled to match.
SynthConfig small_synth(std::size_t subjects, std::uint64_t seed);
// Patch 8, step 8.
GridConfig small_grid();
// Patch 8, ladder 4 -> 8, F = 8.
ModelConfig small_model();
// Few queue slots and steps; fast enough for unit tests.
TrainConfig small_train(std::size_t outer_steps);

struct SmallWorld {
  SynthConfig synth;
  GridConfig grid;
  Cohort cohort;
  TrainingSet data;
};
SmallWorld small_world(std::size_t subjects, std::uint64_t seed);

// Runs the CLI binary with `args` and returns its exit status.
int run_cli_binary(const std::string& args, const std::filesystem::path& log = {});

}  // namespace anatgraph::testing
