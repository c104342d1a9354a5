#include "anatgraph/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "anatgraph/error.hpp"
#include "anatgraph/rng.hpp"

namespace anatgraph {

namespace {

ProbeConfig probe_config_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  ProbeConfig p;
  for (const auto& [key, value] : j.items()) {
    const std::string where = path + "." + key;
    if (key == "k") {
      if (!value.is_number_integer() || value.get<long long>() < 2) {
        throw ConfigError(where + ": expected an integer >= 2");
      }
      p.k = value.get<std::size_t>();
    } else if (key == "lambda" || key == "tolerance") {
      if (!value.is_number() || value.get<double>() < 0.0) {
        throw ConfigError(where + ": expected a non-negative number");
      }
      (key == "lambda" ? p.lambda : p.tolerance) = value.get<double>();
    } else if (key == "max_iterations") {
      if (!value.is_number_integer() || value.get<long long>() < 1) {
        throw ConfigError(where + ": expected a positive integer");
      }
      p.max_iterations = value.get<int>();
    } else {
      throw ConfigError(where + ": unknown key");
    }
  }
  return p;
}

PathsConfig paths_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  PathsConfig p;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_string()) throw ConfigError(path + "." + key + ": expected a string");
    if (key == "cohort") p.cohort = value.get<std::string>();
    else if (key == "out") p.out = value.get<std::string>();
    else throw ConfigError(path + "." + key + ": unknown key");
  }
  return p;
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") {
      if (!value.is_number_unsigned()) throw ConfigError("seed: expected a non-negative integer");
      c.seed = value.get<std::uint64_t>();
    } else if (key == "data") {
      if (value.is_object() && value.contains("seed")) {
        throw ConfigError("data.seed: unknown key (the top-level seed drives generation)");
      }
      c.data = synth_config_from_json(value, "data");
    } else if (key == "grid") {
      c.grid = grid_config_from_json(value, "grid");
    } else if (key == "model") {
      c.model = model_config_from_json(value, "model");
      if (!value.contains("patch_size") && !value.contains("scale")) c.model.encoder.patch_size = 0;
    } else if (key == "augment") {
      c.augment = augment_config_from_json(value, "augment");
    } else if (key == "train") {
      c.train = train_config_from_json(value, "train");
    } else if (key == "probe") {
      c.probe = probe_config_from_json(value, "probe");
    } else if (key == "paths") {
      c.paths = paths_from_json(value, "paths");
    } else if (key == "workers") {
      if (!value.is_number_unsigned()) throw ConfigError("workers: expected a non-negative integer");
      c.workers = value.get<unsigned>();
    } else {
      throw ConfigError(key + ": unknown key");
    }
  }
  if (!j.contains("model")) c.model.encoder.patch_size = 0;
  return c;
}

void finalize(RunConfig& c) {
  c.data.seed = c.seed;
  // The model patch size follows the grid unless it was set explicitly.
  if (c.model.encoder.patch_size == 0) c.model.encoder.patch_size = c.grid.patch_size;
  if (c.model.encoder.patch_size != c.grid.patch_size) {
    throw ConfigError("model.patch_size: " + std::to_string(c.model.encoder.patch_size) +
                      " differs from grid.patch_size " + std::to_string(c.grid.patch_size));
  }
  validate(c.data);
  validate(c.grid);
  validate(c.model.encoder);
  validate(c.augment);
  validate(c.train);
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"data", to_json(c.data)},
          {"grid", to_json(c.grid)},
          {"model", to_json(c.model)},
          {"augment", to_json(c.augment)},
          {"train", to_json(c.train)},
          {"probe",
           {{"k", c.probe.k},
            {"lambda", c.probe.lambda},
            {"max_iterations", c.probe.max_iterations},
            {"tolerance", c.probe.tolerance}}},
          {"paths", {{"cohort", c.paths.cohort}, {"out", c.paths.out}}}};
}

std::uint64_t config_hash(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  // Output locations do not change results.
  j.erase("paths");
  return config_hash(j);
}

CohortIndex load_cohort(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw IoError("cohort manifest not found: " + path.string());
  CohortIndex c;
  c.dir = dir;
  try {
    c.manifest = nlohmann::json::parse(is);
    if (c.manifest.at("version") != 1) throw IoError(path.string() + ": unsupported manifest version");
    c.atlas = dir / c.manifest.at("atlas").get<std::string>();
    c.mask = dir / c.manifest.at("mask").get<std::string>();
    for (const auto& s : c.manifest.at("subjects")) {
      CohortSubject cs;
      cs.id = s.at("id").get<std::string>();
      cs.volume = dir / s.at("volume").get<std::string>();
      cs.transform = dir / s.at("transform").get<std::string>();
      cs.label = s.at("label").get<int>();
      cs.severity = s.at("severity").get<double>();
      cs.lesion_nodes = s.at("lesion_nodes").get<std::vector<std::size_t>>();
      c.subjects.push_back(std::move(cs));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed manifest: " + e.what());
  }
  if (c.subjects.empty()) throw IoError(path.string() + ": manifest lists no subjects");
  return c;
}

Volume ingest_volume(const std::filesystem::path& path, bool raw_hu) {
  Volume v = read_rvol(path);
  if (raw_hu) apply_hu_window(v);
  return v;
}

unsigned resolve_workers(unsigned requested) {
  if (requested > 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn) {
  const unsigned threads = static_cast<unsigned>(std::min<std::size_t>(resolve_workers(workers), n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

PatientGraph graph_for(const std::string& id, const Volume& v, const SpatialTransform& t,
                       const std::shared_ptr<const AtlasGrid>& grid, double rho) {
  InvertOptions opts;
  opts.voxel_mm = v.spacing_mm;
  const SpatialTransform atlas_to_subject =
      t.direction == Direction::AtlasToSubject ? t : invert(t, opts);
  return build_patient_graph(id, v, grid, atlas_to_subject, rho);
}

}  // namespace

TrainingSet build_training_set(const CohortIndex& cohort, const GridConfig& grid_cfg, bool raw_hu,
                               unsigned workers) {
  validate(grid_cfg);
  const Volume atlas = read_rvol(cohort.atlas);
  const Volume mask = read_rvol(cohort.mask);
  auto grid = std::make_shared<const AtlasGrid>(
      build_atlas_grid(atlas, mask, grid_cfg.patch_size, grid_cfg.step));
  const double rho = grid_cfg.rho_mm > 0.0 ? grid_cfg.rho_mm : grid->default_rho_mm();
  std::vector<PatientGraph> graphs(cohort.subjects.size());
  parallel_for(cohort.subjects.size(), workers, [&](std::size_t i) {
    const CohortSubject& s = cohort.subjects[i];
    graphs[i] = graph_for(s.id, ingest_volume(s.volume, raw_hu), read_rtfm(s.transform), grid, rho);
  });
  return TrainingSet(std::move(grid), std::move(graphs));
}

TrainingSet build_training_set(const Cohort& cohort, const GridConfig& grid_cfg, unsigned workers) {
  validate(grid_cfg);
  auto grid = std::make_shared<const AtlasGrid>(
      build_atlas_grid(cohort.atlas, cohort.mask, grid_cfg.patch_size, grid_cfg.step));
  const double rho = grid_cfg.rho_mm > 0.0 ? grid_cfg.rho_mm : grid->default_rho_mm();
  std::vector<PatientGraph> graphs(cohort.subjects.size());
  parallel_for(cohort.subjects.size(), workers, [&](std::size_t i) {
    const SubjectRecord& s = cohort.subjects[i];
    graphs[i] = graph_for(s.id, s.volume, s.subject_to_atlas, grid, rho);
  });
  return TrainingSet(std::move(grid), std::move(graphs));
}

Tensor node_features(ModelState& model, const TrainingSet& data, std::size_t subject) {
  const PatientGraph& g = data.graphs.at(subject);
  std::vector<std::vector<float>> patches;
  patches.reserve(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) {
    const auto p = g.patches.patch(j);
    patches.emplace_back(p.begin(), p.end());
  }
  const Tensor h = encode_patches(model, "enc.q", patches, data.centers);
  return gcn_node_features(model, "gcn.q", h, g.adjacency_norm);
}

FrozenFeatureTable extract_features(ModelState& model, const TrainingSet& data,
                                    std::vector<Tensor>* per_node, unsigned workers) {
  std::vector<Tensor> h(data.subjects());
  parallel_for(data.subjects(), workers, [&](std::size_t i) { h[i] = node_features(model, data, i); });
  std::vector<std::string> ids;
  for (const auto& g : data.graphs) ids.push_back(g.subject_id);
  FrozenFeatureTable t = FrozenFeatureTable::pool(model, std::move(ids), h);
  if (per_node) *per_node = std::move(h);
  return t;
}

}  // namespace anatgraph
