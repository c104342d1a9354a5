#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "anatgraph/augment.hpp"
#include "anatgraph/contrastive.hpp"
#include "anatgraph/encoders.hpp"
#include "anatgraph/patch_graph.hpp"

namespace anatgraph {

struct TrainConfig {
  std::size_t outer_steps = 0;  // T_max; 0 derives it from `epochs`
  std::size_t patch_steps = 1;  // T_l
  std::size_t graph_steps = 1;  // T_g
  std::size_t patch_batch = 128;
  std::size_t graph_batch = 16;
  std::size_t epochs = 30;
  double lr = 3e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  double temperature = kDefaultTemperature;
  std::size_t patch_queue = 128;  // per region
  std::size_t graph_queue = 512;
  bool ordered_regions = false;
  bool cosine_schedule = true;
};

void validate(const TrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "train");

// lr0 * 0.5 * (1 + cos(pi * step / total)).
double cosine_lr(std::size_t step, std::size_t total, double lr0);

// Subjects prepared for training: one graph per subject over a shared atlas
// grid, plus the normalized atlas centres that condition the patch encoder.
struct TrainingSet {
  std::shared_ptr<const AtlasGrid> grid;
  std::vector<PatientGraph> graphs;
  std::vector<std::array<float, 3>> centers;

  explicit TrainingSet(std::shared_ptr<const AtlasGrid> g, std::vector<PatientGraph> graphs);
  std::size_t subjects() const noexcept { return graphs.size(); }
  std::size_t regions() const noexcept { return centers.size(); }
  GraphSample sample(std::size_t i) const;
};

struct AdamMoments {
  Tensor m, v;
};

// Everything needed to continue training bit-exactly.
struct TrainerState {
  ModelState model;
  std::map<std::string, AdamMoments> moments;
  std::vector<NegativeQueue> patch_queues;
  NegativeQueue graph_queue;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t outer = 0;      // completed outer iterations
  std::uint64_t enc_steps = 0;  // optimizer steps on E
  std::uint64_t gcn_steps = 0;  // optimizer steps on G

  std::uint64_t steps() const noexcept { return enc_steps + gcn_steps; }
};

TrainerState init_trainer(const ModelConfig& model, const TrainConfig& cfg, std::size_t regions,
                          std::uint64_t seed);

TensorMap save_state(const TrainerState& s);
TrainerState load_state(const TensorMap& tensors);
void write_checkpoint(const TrainerState& s, const std::filesystem::path& path);
TrainerState read_checkpoint(const std::filesystem::path& path);

enum class Phase { Patch, Graph };
const char* phase_name(Phase p);

struct StepRecord {
  std::uint64_t step = 0;  // global optimizer step, 1-based
  std::uint64_t outer = 0;
  Phase phase = Phase::Patch;
  std::optional<std::size_t> region;
  double loss = 0.0;
  double lr = 0.0;
};

nlohmann::json to_json(const StepRecord& r);

class TrainObserver {
 public:
  virtual ~TrainObserver() = default;
  virtual void on_phase_begin(Phase, const TrainerState&) {}
  virtual void on_step(const StepRecord&, const TrainerState&) {}
  virtual void on_phase_end(Phase, const TrainerState&) {}
};

struct TrainOptions {
  std::ostream* metrics = nullptr;           // one JSON line per optimizer step
  std::optional<std::filesystem::path> checkpoint;  // rewritten after every outer step
  TrainObserver* observer = nullptr;
  std::size_t stop_after = 0;                // stop once this many outer steps are done
};

std::size_t total_outer_steps(const TrainConfig& cfg, std::size_t subjects);

// One patch phase: T_l rounds, each taking one Adam step on E's query
// parameters per atlas region. G is never touched.
std::vector<StepRecord> patch_phase_step(TrainerState& s, const TrainConfig& cfg,
                                         const AugmentConfig& aug, const TrainingSet& data,
                                         TrainObserver* observer = nullptr);

// One graph phase: T_g Adam steps on G's query parameters with E frozen.
std::vector<StepRecord> graph_phase_step(TrainerState& s, const TrainConfig& cfg,
                                         const AugmentConfig& aug, const TrainingSet& data,
                                         TrainObserver* observer = nullptr);

// Runs outer iterations from s.outer until T_max (or stop_after).
void train(TrainerState& s, const TrainConfig& cfg, const AugmentConfig& aug,
           const TrainingSet& data, const TrainOptions& opts = {});

}  // namespace anatgraph
