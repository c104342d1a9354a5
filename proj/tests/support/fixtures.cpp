#include "fixtures.hpp"

#include <cstdlib>
#include <sys/wait.h>

namespace anatgraph::testing {

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "anatgraph_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

SynthConfig small_synth(std::size_t subjects, std::uint64_t seed) {
  SynthConfig c;
  c.seed = seed;
  c.dims = 32;
  c.subjects = subjects;
  c.lesion_lo = {8, 8, 8};
  c.lesion_hi = {24, 24, 32};
  c.displacement_spacing_mm = 8.0;
  c.displacement_mm = 1.0;
  return c;
}

GridConfig small_grid() {
  GridConfig g;
  g.patch_size = 8;
  g.step = 8;
  return g;
}

ModelConfig small_model() {
  ModelConfig m;
  m.encoder.patch_size = 8;
  m.encoder.stages = {{4, 1}, {8, 1}};
  m.encoder.feature_dim = 8;
  return m;
}

TrainConfig small_train(std::size_t outer_steps) {
  TrainConfig t;
  t.outer_steps = outer_steps;
  t.lr = 3e-3;
  t.patch_queue = 16;
  t.graph_queue = 32;
  return t;
}

SmallWorld small_world(std::size_t subjects, std::uint64_t seed) {
  SynthConfig s = small_synth(subjects, seed);
  GridConfig g = small_grid();
  Cohort c = generate_cohort(s);
  TrainingSet d = build_training_set(c, g);
  return {s, g, std::move(c), std::move(d)};
}

int run_cli_binary(const std::string& args, const std::filesystem::path& log) {
#ifdef ANATGRAPH_CLI_PATH
  std::string cmd = std::string(ANATGRAPH_CLI_PATH) + " " + args;
#else
  std::string cmd = "anatgraph " + args;
#endif
  cmd += log.empty() ? " >/dev/null 2>&1" : " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace anatgraph::testing
