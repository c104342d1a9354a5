#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "anatgraph/checkpoint.hpp"
#include "anatgraph/cli.hpp"
#include "anatgraph/error.hpp"
#include "anatgraph/explain.hpp"
#include "anatgraph/kernels.hpp"
#include "anatgraph/pipeline.hpp"

namespace anatgraph {

namespace {

namespace fs = std::filesystem;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> workers;
};

RunConfig load_config(const CommonArgs& args) {
  nlohmann::json j = nlohmann::json::object();
  if (!args.config.empty()) {
    std::ifstream is(args.config);
    if (!is) throw IoError("cannot open config " + args.config);
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(args.config + ": " + e.what());
    }
  }
  RunConfig c = run_config_from_json(j);
  if (const char* env = std::getenv("ANATGRAPH_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      c.seed = std::stoull(env, &used);
      if (env[used] != '\0') throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("ANATGRAPH_SEED: not an unsigned integer: ") + env);
    }
  }
  if (args.seed) c.seed = *args.seed;
  if (args.workers) c.workers = *args.workers;
  return c;
}

std::string require_path(const std::string& flag_value, const std::string& config_value,
                         const char* what) {
  const std::string& v = flag_value.empty() ? config_value : flag_value;
  if (v.empty()) throw ConfigError(std::string(what) + ": no path given");
  return v;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

nlohmann::json provenance(std::uint64_t hash) {
  return {{"tool", "anatgraph"}, {"version", kToolVersion}, {"config_hash", hash_hex(hash)}};
}

// ---- synth -------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::optional<std::size_t> subjects;
};

void cmd_synth(const CommonArgs& common, const SynthArgs& a) {
  RunConfig c = load_config(common);
  if (a.subjects) c.data.subjects = *a.subjects;
  finalize(c);
  const fs::path out = require_path(a.out, c.paths.out, "synth --out");
  const Cohort cohort = generate_cohort(c.data);
  write_cohort(cohort, c.data, c.grid, out);
  std::ofstream labels(out / "labels.csv"), severity(out / "severity.csv");
  if (!labels || !severity) throw IoError("cannot write label files in " + out.string());
  labels << "subject_id,label\n";
  severity << "subject_id,severity\n";
  severity.precision(17);
  for (const auto& s : cohort.subjects) {
    labels << s.id << ',' << s.label << '\n';
    severity << s.id << ',' << s.severity << '\n';
  }
  std::cout << "wrote " << cohort.subjects.size() << " subjects to " << out.string() << '\n';
}

// ---- graph -------------------------------------------------------------------

struct DataArgs {
  std::string cohort;
  std::string out;
  bool raw_hu = false;
};

void cmd_graph(const CommonArgs& common, const DataArgs& a) {
  RunConfig c = load_config(common);
  finalize(c);
  const CohortIndex cohort = load_cohort(require_path(a.cohort, c.paths.cohort, "graph --cohort"));
  const fs::path out = require_path(a.out, c.paths.out, "graph --out");
  ensure_dir(out);
  const TrainingSet data = build_training_set(cohort, c.grid, a.raw_hu, c.workers);
  const std::uint64_t hash = config_hash(c);
  for (const auto& g : data.graphs) {
    nlohmann::json j = graph_to_json(g);
    j["provenance"] = provenance(hash);
    write_json(out / (g.subject_id + ".graph.json"), j);
  }
  std::cout << "wrote " << data.graphs.size() << " graphs with " << data.regions()
            << " nodes each to " << out.string() << '\n';
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  DataArgs data;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  bool init_only = false;
  std::string resume;
  std::size_t stop_after = 0;
};

void cmd_train(const CommonArgs& common, const TrainArgs& a) {
  RunConfig c = load_config(common);
  if (a.steps) c.train.outer_steps = *a.steps;
  if (a.lr) c.train.lr = *a.lr;
  finalize(c);
  const std::uint64_t hash = config_hash(c);
  const CohortIndex cohort =
      load_cohort(require_path(a.data.cohort, c.paths.cohort, "train --cohort"));
  const fs::path out = require_path(a.data.out, c.paths.out, "train --out");
  ensure_dir(out);
  const TrainingSet data = build_training_set(cohort, c.grid, a.data.raw_hu, c.workers);
  if (data.subjects() < 2) throw ConfigError("train: cohort needs at least 2 subjects");

  TrainerState state;
  if (!a.resume.empty()) {
    state = read_checkpoint(a.resume);
    if (state.config_hash != hash) {
      throw ConfigError("train --resume: checkpoint config hash " + hash_hex(state.config_hash) +
                        " differs from current config " + hash_hex(hash));
    }
    if (state.patch_queues.size() != data.regions()) {
      throw ConfigError("train --resume: checkpoint grid differs from cohort grid");
    }
  } else {
    state = init_trainer(c.model, c.train, data.regions(), c.seed);
    state.config_hash = hash;
  }
  const fs::path ckpt = out / "model.ckpt";
  if (a.init_only) {
    write_checkpoint(state, ckpt);
    std::cout << "wrote initial checkpoint " << ckpt.string() << '\n';
    return;
  }
  const fs::path metrics_path = out / "metrics.jsonl";
  std::ofstream metrics(metrics_path, a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());
  if (a.resume.empty()) metrics << provenance(hash).dump() << '\n';
  TrainOptions opts;
  opts.metrics = &metrics;
  opts.checkpoint = ckpt;
  opts.stop_after = a.stop_after;
  train(state, c.train, c.augment, data, opts);
  write_checkpoint(state, ckpt);
  std::cout << "trained " << state.outer << " outer steps (" << state.steps()
            << " optimizer steps); checkpoint " << ckpt.string() << '\n';
}

// ---- extract -----------------------------------------------------------------

struct ExtractArgs {
  DataArgs data;
  std::string checkpoint;
  std::string per_node;
};

void write_features(const FrozenFeatureTable& t, const fs::path& path, std::uint64_t hash) {
  t.write_csv(path);
  // Prepend the provenance comment; readers skip '#' lines.
  std::ifstream is(path);
  std::stringstream body;
  body << is.rdbuf();
  is.close();
  std::ofstream os(path, std::ios::trunc);
  os << "# anatgraph " << kToolVersion << " config_hash=" << hash_hex(hash) << '\n' << body.str();
  if (!os) throw IoError("failed writing " + path.string());
}

void check_model_matches(const RunConfig& c, const ModelState& m) {
  if (!(c.model.encoder == m.config.encoder)) {
    throw ConfigError("model config differs from checkpoint: config " + to_json(c.model).dump() +
                      ", checkpoint " + to_json(m.config).dump());
  }
}

void cmd_extract(const CommonArgs& common, const ExtractArgs& a) {
  RunConfig c = load_config(common);
  finalize(c);
  TrainerState state = read_checkpoint(a.checkpoint);
  check_model_matches(c, state.model);
  const CohortIndex cohort =
      load_cohort(require_path(a.data.cohort, c.paths.cohort, "extract --cohort"));
  const fs::path out = require_path(a.data.out, c.paths.out, "extract --out");
  const TrainingSet data = build_training_set(cohort, c.grid, a.data.raw_hu, c.workers);
  std::vector<Tensor> per_node;
  const FrozenFeatureTable t = extract_features(state.model, data, &per_node, c.workers);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_features(t, out, state.config_hash);
  if (!a.per_node.empty()) {
    std::ofstream os(a.per_node);
    if (!os) throw IoError("cannot open " + a.per_node + " for writing");
    os << "# anatgraph " << kToolVersion << " config_hash=" << hash_hex(state.config_hash) << '\n';
    os << "subject_id,node";
    for (std::size_t f = 0; f < t.width(); ++f) os << ",f" << f;
    os << '\n';
    os.precision(9);
    for (std::size_t i = 0; i < per_node.size(); ++i) {
      for (std::size_t j = 0; j < per_node[i].dim(0); ++j) {
        os << t.ids()[i] << ',' << j;
        for (std::size_t f = 0; f < t.width(); ++f) os << ',' << per_node[i].at(j, f);
        os << '\n';
      }
    }
    if (!os) throw IoError("failed writing " + a.per_node);
  }
  std::cout << "extracted " << t.rows() << " x " << t.width() << " features to " << out.string()
            << '\n';
}

// ---- probe -------------------------------------------------------------------

struct ProbeArgs {
  std::string features;
  std::string labels;
  std::string task = "classification";
  std::optional<std::size_t> k;
  std::string out;
  std::string weights_out;
};

void cmd_probe(const CommonArgs& common, const ProbeArgs& a) {
  RunConfig c = load_config(common);
  if (a.k) c.probe.k = *a.k;
  finalize(c);
  const FrozenFeatureTable t = FrozenFeatureTable::read_csv(a.features);
  const std::vector<double> targets = read_targets_csv(a.labels, t.ids());
  if (c.probe.k > t.rows()) {
    throw ConfigError("probe.k: " + std::to_string(c.probe.k) + " folds exceed " +
                      std::to_string(t.rows()) + " subjects");
  }
  ProbeResult r;
  nlohmann::json full;
  if (a.task == "regression") {
    r = probe_regression(t, targets, c.probe.k, c.seed, c.probe.lambda);
    Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(targets.data(), static_cast<Eigen::Index>(targets.size()));
    full = to_json(fit_linear(t.matrix(), y, c.probe.lambda));
  } else if (a.task == "classification") {
    std::vector<int> labels;
    for (double v : targets) {
      if (v < 0 || v != static_cast<double>(static_cast<int>(v))) {
        throw ConfigError("classification labels must be non-negative integers");
      }
      labels.push_back(static_cast<int>(v));
    }
    LogisticOptions opts{c.probe.lambda, c.probe.max_iterations, c.probe.tolerance};
    r = probe_classification(t, labels, c.probe.k, c.seed, opts);
    const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
    full = to_json(fit_logistic(t.matrix(), labels, classes, opts));
  } else {
    throw ConfigError("probe --task: expected regression or classification");
  }
  nlohmann::json j = to_json(r);
  j["provenance"] = provenance(config_hash(c));
  if (!a.out.empty()) write_json(a.out, j);
  if (!a.weights_out.empty()) write_json(a.weights_out, full);
  std::cout << j["metric"].get<std::string>() << " mean " << r.mean << " std " << r.stddev << '\n';
}

// ---- explain -----------------------------------------------------------------

struct ExplainArgs {
  DataArgs data;
  std::string checkpoint;
  std::string weights;
  std::string subject;
  int positive = 1;
  int negative = 0;
  std::string render;
};

void cmd_explain(const CommonArgs& common, const ExplainArgs& a) {
  RunConfig c = load_config(common);
  finalize(c);
  TrainerState state = read_checkpoint(a.checkpoint);
  check_model_matches(c, state.model);
  const LogisticModel probe = logistic_from_json(read_json(a.weights));
  if (static_cast<std::size_t>(probe.w.cols()) != state.model.config.encoder.feature_dim) {
    throw ConfigError("probe weights have " + std::to_string(probe.w.cols()) +
                      " features, checkpoint has F = " +
                      std::to_string(state.model.config.encoder.feature_dim));
  }
  const LinearReadout readout = probe.contrast(a.positive, a.negative);
  const CohortIndex cohort =
      load_cohort(require_path(a.data.cohort, c.paths.cohort, "explain --cohort"));
  const TrainingSet data = build_training_set(cohort, c.grid, a.data.raw_hu, c.workers);
  std::size_t index = data.subjects();
  for (std::size_t i = 0; i < data.subjects(); ++i) {
    if (data.graphs[i].subject_id == a.subject) index = i;
  }
  if (index == data.subjects()) throw ConfigError("explain --subject: no subject " + a.subject);

  const Tensor h = node_features(state.model, data, index);
  // Mean-pooled S' in double, so the check measures the decomposition only.
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(1, static_cast<Eigen::Index>(h.dim(1)));
  for (std::size_t j = 0; j < h.dim(0); ++j) {
    for (std::size_t f = 0; f < h.dim(1); ++f) s(0, static_cast<Eigen::Index>(f)) += h.at(j, f);
  }
  s /= static_cast<double>(h.dim(0));
  const Eigen::MatrixXd logits = probe.logits(s);
  const double reference = logits(0, a.positive) - logits(0, a.negative);

  const ActivationGraph g = activation_graph(readout, h, a.subject);
  nlohmann::json j = to_json(g, reference);
  j["provenance"] = provenance(state.config_hash);
  const fs::path out = require_path(a.data.out, c.paths.out, "explain --out");
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_json(out, j);
  if (!a.render.empty()) {
    const Volume v = read_rvol(cohort.subjects[index].volume);
    const Volume map = render_map(g, data.graphs[index].centers, data.grid->patch_size, v.depth,
                                  v.height, v.width, v.spacing_mm);
    write_rvol(map, fs::path(a.render));
  }
  std::cout << "logit " << g.logit() << " logit_check " << j["logit_check"].get<double>() << '\n';
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return 1;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"anatgraph: anatomy-anchored patch graph representation learning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  CommonArgs common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run configuration");
    sub->add_option("--seed", common.seed, "Root seed (overrides ANATGRAPH_SEED and the config)");
    sub->add_option("--workers", common.workers, "Worker threads for data loading (0: all cores)");
  };
  auto add_data = [&](CLI::App* sub, DataArgs& d) {
    sub->add_option("--cohort", d.cohort, "Cohort directory with manifest.json");
    sub->add_option("--out", d.out, "Output path");
    sub->add_flag("--raw-hu", d.raw_hu, "Volumes hold raw HU; window them onto [-1, 1]");
  };

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic cohort");
  add_common(s);
  s->add_option("--out", synth.out, "Output directory");
  s->add_option("--subjects", synth.subjects, "Number of subjects");

  DataArgs graph;
  auto* g = app.add_subcommand("graph", "Build and export patient graphs");
  add_common(g);
  add_data(g, graph);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the patch and graph encoders");
  add_common(t);
  add_data(t, tr.data);
  t->add_option("--steps", tr.steps, "Outer steps (T_max)");
  t->add_option("--lr", tr.lr, "Initial learning rate");
  t->add_flag("--init-only", tr.init_only, "Write the initial checkpoint and stop");
  t->add_option("--resume", tr.resume, "Continue from a checkpoint");
  t->add_option("--stop-after", tr.stop_after, "Stop once this many outer steps are complete");

  ExtractArgs ex;
  auto* e = app.add_subcommand("extract", "Export pooled frozen features");
  add_common(e);
  add_data(e, ex.data);
  e->add_option("--checkpoint", ex.checkpoint, "Model checkpoint")->required();
  e->add_option("--per-node", ex.per_node, "Also write per-node features to this CSV");

  ProbeArgs pr;
  auto* p = app.add_subcommand("probe", "Cross-validated linear or logistic probe");
  add_common(p);
  p->add_option("--features", pr.features, "Features CSV")->required();
  p->add_option("--labels", pr.labels, "Labels CSV (subject_id,target)")->required();
  p->add_option("--task", pr.task, "regression or classification");
  p->add_option("--k", pr.k, "Folds");
  p->add_option("--out", pr.out, "Result JSON");
  p->add_option("--weights-out", pr.weights_out, "Weights fitted on all subjects (JSON)");

  ExplainArgs xa;
  auto* x = app.add_subcommand("explain", "Class activation graph for one subject");
  add_common(x);
  add_data(x, xa.data);
  x->add_option("--checkpoint", xa.checkpoint, "Model checkpoint")->required();
  x->add_option("--probe-weights", xa.weights, "Logistic weights JSON from probe")->required();
  x->add_option("--subject", xa.subject, "Subject id")->required();
  x->add_option("--class", xa.positive, "Class explained");
  x->add_option("--against", xa.negative, "Reference class");
  x->add_option("--render", xa.render, "Write the heat map as RVOL");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*s) cmd_synth(common, synth);
    else if (*g) cmd_graph(common, graph);
    else if (*t) cmd_train(common, tr);
    else if (*e) cmd_extract(common, ex);
    else if (*p) cmd_probe(common, pr);
    else if (*x) cmd_explain(common, xa);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code_for(err);
  }
  return kExitOk;
}

}  // namespace anatgraph
