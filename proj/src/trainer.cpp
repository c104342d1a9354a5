#include "anatgraph/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

#include "anatgraph/checkpoint.hpp"
#include "anatgraph/error.hpp"

namespace anatgraph {

void validate(const TrainConfig& c) {
  auto fail = [](const std::string& field, const char* why) {
    throw ConfigError("train." + field + ": " + why);
  };
  if (c.patch_steps < 1) fail("patch_steps", "must be >= 1");
  if (c.graph_steps < 1) fail("graph_steps", "must be >= 1");
  if (c.patch_batch < 2) fail("patch_batch", "must be >= 2");
  if (c.graph_batch < 2) fail("graph_batch", "must be >= 2");
  if (c.outer_steps == 0 && c.epochs < 1) fail("epochs", "must be >= 1");
  if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) fail("lr", "must be finite and >= 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) fail("beta1", "must lie in [0, 1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) fail("beta2", "must lie in [0, 1)");
  if (!(c.adam_eps > 0.0)) fail("adam_eps", "must be > 0");
  if (!(c.weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (!(c.temperature > 0.0)) fail("temperature", "must be > 0");
  if (c.patch_queue < 1) fail("patch_queue", "must be >= 1");
  if (c.graph_queue < 1) fail("graph_queue", "must be >= 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"outer_steps", c.outer_steps},   {"patch_steps", c.patch_steps},
          {"graph_steps", c.graph_steps},   {"patch_batch", c.patch_batch},
          {"graph_batch", c.graph_batch},   {"epochs", c.epochs},
          {"lr", c.lr},                     {"beta1", c.beta1},
          {"beta2", c.beta2},               {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay}, {"temperature", c.temperature},
          {"patch_queue", c.patch_queue},   {"graph_queue", c.graph_queue},
          {"ordered_regions", c.ordered_regions},
          {"schedule", c.cosine_schedule ? "cosine" : "constant"}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    const std::string where = path + "." + key;
    auto count = [&](std::size_t& field) {
      if (!value.is_number_integer() || value.get<long long>() < 0) {
        throw ConfigError(where + ": expected a non-negative integer");
      }
      field = value.get<std::size_t>();
    };
    auto real = [&](double& field) {
      if (!value.is_number()) throw ConfigError(where + ": expected a number");
      field = value.get<double>();
    };
    if (key == "outer_steps") count(c.outer_steps);
    else if (key == "patch_steps") count(c.patch_steps);
    else if (key == "graph_steps") count(c.graph_steps);
    else if (key == "patch_batch") count(c.patch_batch);
    else if (key == "graph_batch") count(c.graph_batch);
    else if (key == "epochs") count(c.epochs);
    else if (key == "patch_queue") count(c.patch_queue);
    else if (key == "graph_queue") count(c.graph_queue);
    else if (key == "lr") real(c.lr);
    else if (key == "beta1") real(c.beta1);
    else if (key == "beta2") real(c.beta2);
    else if (key == "adam_eps") real(c.adam_eps);
    else if (key == "weight_decay") real(c.weight_decay);
    else if (key == "temperature") real(c.temperature);
    else if (key == "ordered_regions") {
      if (!value.is_boolean()) throw ConfigError(where + ": expected a boolean");
      c.ordered_regions = value.get<bool>();
    } else if (key == "schedule") {
      if (!value.is_string() || (value != "cosine" && value != "constant")) {
        throw ConfigError(where + ": expected \"cosine\" or \"constant\"");
      }
      c.cosine_schedule = value == "cosine";
    } else {
      throw ConfigError(where + ": unknown key");
    }
  }
  validate(c);
  return c;
}

double cosine_lr(std::size_t step, std::size_t total, double lr0) {
  if (total == 0) return lr0;
  if (step > total) throw ConfigError("cosine_lr: step beyond schedule end");
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

TrainingSet::TrainingSet(std::shared_ptr<const AtlasGrid> g, std::vector<PatientGraph> gs)
    : grid(std::move(g)), graphs(std::move(gs)) {
  for (std::size_t j = 0; j < grid->size(); ++j) centers.push_back(grid->normalized_center(j));
  for (const auto& pg : graphs) {
    if (pg.size() != grid->size()) {
      throw ShapeError("graph " + pg.subject_id + " has " + std::to_string(pg.size()) +
                       " nodes, atlas grid has " + std::to_string(grid->size()));
    }
  }
}

GraphSample TrainingSet::sample(std::size_t i) const {
  const PatientGraph& g = graphs.at(i);
  return {&g.patches, &centers, &g.adjacency_norm, static_cast<std::uint32_t>(i)};
}

TrainerState init_trainer(const ModelConfig& model, const TrainConfig& cfg, std::size_t regions,
                          std::uint64_t seed) {
  validate(cfg);
  if (regions == 0) throw ConfigError("atlas grid has no regions");
  TrainerState s;
  s.model = init_model(model, seed);
  s.seed = seed;
  const std::size_t f = model.encoder.feature_dim;
  for (const char* prefix : {"enc.q.", "gcn.q."}) {
    for (const std::string& name : s.model.param_names(prefix)) {
      const Shape& d = s.model.params.at(name).dims();
      s.moments[name] = {Tensor(d, 0.0f), Tensor(d, 0.0f)};
    }
  }
  for (std::size_t j = 0; j < regions; ++j) {
    s.patch_queues.emplace_back("patch." + std::to_string(j), cfg.patch_queue, f);
  }
  s.graph_queue = NegativeQueue("graph", cfg.graph_queue, f);
  return s;
}

TensorMap save_state(const TrainerState& s) {
  TensorMap out;
  export_model(s.model, out);
  for (const auto& [name, mv] : s.moments) {
    out["opt." + name + ".m"] = mv.m;
    out["opt." + name + ".v"] = mv.v;
  }
  for (const auto& q : s.patch_queues) q.save(out);
  s.graph_queue.save(out);
  out["state.seed"] = encode_u64(s.seed);
  out["state.outer"] = encode_u64(s.outer);
  out["state.enc_steps"] = encode_u64(s.enc_steps);
  out["state.gcn_steps"] = encode_u64(s.gcn_steps);
  out["state.patch_regions"] = encode_u64(s.patch_queues.size());
  out["meta.config_hash"] = encode_u64(s.config_hash);
  return out;
}

namespace {

std::uint64_t get_u64(const TensorMap& in, const std::string& name) {
  auto it = in.find(name);
  if (it == in.end()) throw IoError("checkpoint lacks " + name);
  return decode_u64(it->second);
}

}  // namespace

TrainerState load_state(const TensorMap& in) {
  TrainerState s;
  s.model = import_model(in);
  for (const char* prefix : {"enc.q.", "gcn.q."}) {
    for (const std::string& name : s.model.param_names(prefix)) {
      auto m = in.find("opt." + name + ".m");
      auto v = in.find("opt." + name + ".v");
      if (m == in.end() || v == in.end()) throw IoError("checkpoint lacks optimizer state for " + name);
      if (!m->second.same_shape(s.model.params.at(name)) || !v->second.same_shape(m->second)) {
        throw IoError("optimizer state for " + name + " has the wrong shape");
      }
      s.moments[name] = {m->second, v->second};
    }
  }
  const std::uint64_t regions = get_u64(in, "state.patch_regions");
  for (std::uint64_t j = 0; j < regions; ++j) {
    s.patch_queues.push_back(NegativeQueue::load(in, "patch." + std::to_string(j)));
  }
  s.graph_queue = NegativeQueue::load(in, "graph");
  s.seed = get_u64(in, "state.seed");
  s.outer = get_u64(in, "state.outer");
  s.enc_steps = get_u64(in, "state.enc_steps");
  s.gcn_steps = get_u64(in, "state.gcn_steps");
  s.config_hash = get_u64(in, "meta.config_hash");
  return s;
}

void write_checkpoint(const TrainerState& s, const std::filesystem::path& path) {
  write_tensors(save_state(s), path);
}

TrainerState read_checkpoint(const std::filesystem::path& path) {
  return load_state(read_tensors(path));
}

const char* phase_name(Phase p) { return p == Phase::Patch ? "patch" : "graph"; }

nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j{{"step", r.step},
                   {"outer", r.outer},
                   {"phase", phase_name(r.phase)},
                   {"region", nullptr},
                   {"loss", r.loss},
                   {"lr", r.lr}};
  if (r.region) j["region"] = *r.region;
  return j;
}

std::size_t total_outer_steps(const TrainConfig& cfg, std::size_t subjects) {
  if (cfg.outer_steps > 0) return cfg.outer_steps;
  const std::size_t per_step = std::min(cfg.patch_batch, subjects) * cfg.patch_steps;
  return std::max<std::size_t>(1, (cfg.epochs * subjects + per_step - 1) / per_step);
}

namespace {

void require_dataset(const TrainingSet& data, const TrainerState& s) {
  if (data.subjects() < 2) {
    throw ConfigError("training needs at least 2 subjects, dataset has " +
                      std::to_string(data.subjects()));
  }
  if (s.patch_queues.size() != data.regions()) {
    throw ConfigError("trainer state has " + std::to_string(s.patch_queues.size()) +
                      " region queues, dataset grid has " + std::to_string(data.regions()));
  }
}

std::vector<std::size_t> permutation(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng.engine());
  return p;
}

double scheduled_lr(const TrainConfig& cfg, std::uint64_t step, std::size_t total) {
  return cfg.cosine_schedule ? cosine_lr(std::min<std::size_t>(step, total), total, cfg.lr) : cfg.lr;
}

// L2 weight decay is folded into the gradient before the moment updates.
void adam_step(TrainerState& s, const TrainConfig& cfg, const std::vector<ParamGrad>& grads,
               double lr, std::uint64_t t) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (const ParamGrad& g : grads) {
    Tensor& theta = s.model.params.at(g.name);
    AdamMoments& mv = s.moments.at(g.name);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double th = theta[i];
      const double gi = static_cast<double>(g.value[i]) + cfg.weight_decay * th;
      const double m = cfg.beta1 * mv.m[i] + (1.0 - cfg.beta1) * gi;
      const double v = cfg.beta2 * mv.v[i] + (1.0 - cfg.beta2) * gi * gi;
      mv.m[i] = static_cast<float>(m);
      mv.v[i] = static_cast<float>(v);
      const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
      theta[i] = static_cast<float>(th - update);
    }
    require_finite(theta, g.name);
  }
}

std::vector<ParamGrad> gradients(Tape& tape, Var loss, const ModelState& model,
                                 const std::string& prefix) {
  const std::vector<std::string> names = model.param_names(prefix);
  std::vector<Shape> shapes;
  for (const auto& n : names) shapes.push_back(model.params.at(n).dims());
  return grad(tape, loss, names, shapes);
}

NumericError step_failure(const char* phase, std::uint64_t step, std::optional<std::size_t> region,
                          const std::string& what) {
  std::string msg = std::string(phase) + " step " + std::to_string(step);
  if (region) msg += " region " + std::to_string(*region);
  return NumericError(msg + ": " + what);
}

}  // namespace

std::vector<StepRecord> patch_phase_step(TrainerState& s, const TrainConfig& cfg,
                                         const AugmentConfig& aug, const TrainingSet& data,
                                         TrainObserver* observer) {
  require_dataset(data, s);
  const std::size_t total = total_outer_steps(cfg, data.subjects()) * cfg.patch_steps * data.regions();
  std::vector<StepRecord> records;
  for (std::size_t inner = 0; inner < cfg.patch_steps; ++inner) {
    RngStream order(s.seed, "train.patch/" + std::to_string(s.outer) + "/" + std::to_string(inner));
    std::vector<std::size_t> subjects = permutation(data.subjects(), order);
    subjects.resize(std::min(cfg.patch_batch, data.subjects()));
    std::sort(subjects.begin(), subjects.end());
    std::vector<std::size_t> regions(data.regions());
    std::iota(regions.begin(), regions.end(), std::size_t{0});
    if (!cfg.ordered_regions) regions = permutation(data.regions(), order);

    for (std::size_t j : regions) {
      RegionBatch batch;
      batch.region = j;
      batch.center = data.centers[j];
      for (std::size_t i : subjects) {
        batch.patches.push_back(data.graphs[i].patches.patch(j));
        batch.subjects.push_back(static_cast<std::uint32_t>(i));
      }
      const double lr = scheduled_lr(cfg, s.enc_steps, total);
      StepRecord rec;
      rec.phase = Phase::Patch;
      rec.outer = s.outer;
      rec.region = j;
      rec.lr = lr;
      Tensor keys;
      try {
        Tape tape(true);
        ParamBinder bind(tape, s.model.params, true);
        RngStream views(s.seed, "augment.patch/" + std::to_string(s.enc_steps));
        PairBatch pairs = patch_pairs(tape, bind, s.model, batch, aug, views, s.patch_queues[j]);
        Var loss = ad::info_nce(tape, pairs.query, tape.constant(pairs.keys), pairs.negatives,
                                static_cast<float>(cfg.temperature));
        rec.loss = tape.value(loss).item();
        auto grads = gradients(tape, loss, s.model, "enc.q.");
        adam_step(s, cfg, grads, lr, s.enc_steps + 1);
        keys = std::move(pairs.keys);
      } catch (const NumericError& e) {
        throw step_failure("patch", s.steps() + 1, j, e.what());
      }
      momentum_update(s.model.params, "enc.q", "enc.k", s.model.config.momentum);
      s.patch_queues[j].push_rows(keys, batch.subjects);
      ++s.enc_steps;
      rec.step = s.steps();
      records.push_back(rec);
      if (observer) observer->on_step(rec, s);
    }
  }
  return records;
}

std::vector<StepRecord> graph_phase_step(TrainerState& s, const TrainConfig& cfg,
                                         const AugmentConfig& aug, const TrainingSet& data,
                                         TrainObserver* observer) {
  require_dataset(data, s);
  const std::size_t total = total_outer_steps(cfg, data.subjects()) * cfg.graph_steps;
  std::vector<StepRecord> records;
  for (std::size_t inner = 0; inner < cfg.graph_steps; ++inner) {
    RngStream order(s.seed, "train.graph/" + std::to_string(s.outer) + "/" + std::to_string(inner));
    std::vector<std::size_t> subjects = permutation(data.subjects(), order);
    subjects.resize(std::min(cfg.graph_batch, data.subjects()));
    std::sort(subjects.begin(), subjects.end());
    std::vector<GraphSample> graphs;
    std::vector<std::uint32_t> ids;
    for (std::size_t i : subjects) {
      graphs.push_back(data.sample(i));
      ids.push_back(static_cast<std::uint32_t>(i));
    }
    const double lr = scheduled_lr(cfg, s.gcn_steps, total);
    StepRecord rec;
    rec.phase = Phase::Graph;
    rec.outer = s.outer;
    rec.lr = lr;
    Tensor keys;
    try {
      Tape tape(true);
      ParamBinder bind(tape, s.model.params, true);
      RngStream views(s.seed, "augment.graph/" + std::to_string(s.gcn_steps));
      PairBatch pairs = graph_pairs(tape, bind, s.model, graphs, aug, views, s.graph_queue);
      Var loss = ad::info_nce(tape, pairs.query, tape.constant(pairs.keys), pairs.negatives,
                              static_cast<float>(cfg.temperature));
      rec.loss = tape.value(loss).item();
      auto grads = gradients(tape, loss, s.model, "gcn.q.");
      adam_step(s, cfg, grads, lr, s.gcn_steps + 1);
      keys = std::move(pairs.keys);
    } catch (const NumericError& e) {
      throw step_failure("graph", s.steps() + 1, std::nullopt, e.what());
    }
    momentum_update(s.model.params, "gcn.q", "gcn.k", s.model.config.momentum);
    s.graph_queue.push_rows(keys, ids);
    ++s.gcn_steps;
    rec.step = s.steps();
    records.push_back(rec);
    if (observer) observer->on_step(rec, s);
  }
  return records;
}

void train(TrainerState& s, const TrainConfig& cfg, const AugmentConfig& aug,
           const TrainingSet& data, const TrainOptions& opts) {
  validate(cfg);
  validate(aug);
  require_dataset(data, s);
  const std::size_t t_max = total_outer_steps(cfg, data.subjects());
  const std::size_t end = opts.stop_after > 0 ? std::min(t_max, opts.stop_after) : t_max;
  auto log = [&](const std::vector<StepRecord>& records) {
    if (!opts.metrics) return;
    for (const auto& r : records) *opts.metrics << to_json(r).dump() << '\n';
    opts.metrics->flush();
    if (!*opts.metrics) throw IoError("failed writing metrics log");
  };
  while (s.outer < end) {
    if (opts.observer) opts.observer->on_phase_begin(Phase::Patch, s);
    log(patch_phase_step(s, cfg, aug, data, opts.observer));
    if (opts.observer) opts.observer->on_phase_end(Phase::Patch, s);

    if (opts.observer) opts.observer->on_phase_begin(Phase::Graph, s);
    log(graph_phase_step(s, cfg, aug, data, opts.observer));
    if (opts.observer) opts.observer->on_phase_end(Phase::Graph, s);

    ++s.outer;
    if (opts.checkpoint) write_checkpoint(s, *opts.checkpoint);
  }
}

}  // namespace anatgraph
