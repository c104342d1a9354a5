#include "anatgraph/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "anatgraph/error.hpp"
#include "anatgraph/rng.hpp"

namespace anatgraph {

FrozenFeatureTable FrozenFeatureTable::pool(const ModelState& model, std::vector<std::string> ids,
                                            std::span<const Tensor> node_features) {
  if (ids.size() != node_features.size()) throw ShapeError("pool: one id per graph required");
  FrozenFeatureTable t;
  t.ids_ = std::move(ids);
  const std::size_t f = model.config.encoder.feature_dim;
  t.x_.resize(static_cast<Eigen::Index>(node_features.size()), static_cast<Eigen::Index>(f));
  for (std::size_t i = 0; i < node_features.size(); ++i) {
    Tensor s = subject_embedding(model, "gcn.q", node_features[i], false);
    for (std::size_t c = 0; c < f; ++c) t.x_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = s[c];
  }
  return t;
}

FrozenFeatureTable FrozenFeatureTable::from_pooled(std::vector<std::string> ids,
                                                   Eigen::MatrixXd pooled) {
  if (static_cast<Eigen::Index>(ids.size()) != pooled.rows()) {
    throw ShapeError("feature table: one id per row required");
  }
  FrozenFeatureTable t;
  t.ids_ = std::move(ids);
  t.x_ = std::move(pooled);
  return t;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v)) {
    throw IoError(where + ": not a finite number: '" + s + "'");
  }
  return v;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

FrozenFeatureTable FrozenFeatureTable::read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  do {
    if (!std::getline(is, line)) throw IoError(path.string() + ": empty features file");
  } while (line.starts_with("#"));
  const auto header = split_csv(strip_cr(line));
  if (header.size() < 2 || header[0] != "subject_id") {
    throw IoError(path.string() + ": header must start with subject_id");
  }
  const std::size_t f = header.size() - 1;
  std::vector<std::string> ids;
  std::vector<double> values;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty() || line.starts_with("#")) continue;
    const auto cells = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (cells.size() != f + 1) throw IoError(where + ": expected " + std::to_string(f + 1) + " columns");
    ids.push_back(cells[0]);
    for (std::size_t c = 1; c <= f; ++c) values.push_back(parse_double(cells[c], where));
  }
  if (ids.empty()) throw IoError(path.string() + ": no feature rows");
  Eigen::MatrixXd x(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(f));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t c = 0; c < f; ++c) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = values[i * f + c];
    }
  }
  return from_pooled(std::move(ids), std::move(x));
}

void FrozenFeatureTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "subject_id";
  for (Eigen::Index c = 0; c < x_.cols(); ++c) os << ",f" << c;
  os << '\n';
  os.precision(9);
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    os << ids_[i];
    for (Eigen::Index c = 0; c < x_.cols(); ++c) os << ',' << x_(static_cast<Eigen::Index>(i), c);
    os << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<double> read_targets_csv(const std::filesystem::path& path,
                                     std::span<const std::string> ids) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw IoError(path.string() + ": empty labels file");
  const auto header = split_csv(strip_cr(line));
  if (header.size() != 2 || header[0] != "subject_id") {
    throw IoError(path.string() + ": header must be subject_id,<target>");
  }
  std::map<std::string, double> by_id;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (cells.size() != 2) throw IoError(where + ": expected 2 columns");
    by_id[cells[0]] = parse_double(cells[1], where);
  }
  std::vector<double> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ConfigError("no label for subject " + id + " in " + path.string());
    out.push_back(it->second);
  }
  return out;
}

namespace {

struct Standardizer {
  Eigen::RowVectorXd mean, scale;

  static Standardizer fit(const Eigen::MatrixXd& x) {
    Standardizer s;
    s.mean = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - s.mean;
    s.scale = (c.array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt();
    for (Eigen::Index j = 0; j < s.scale.size(); ++j) {
      if (!(s.scale(j) > 1e-12)) s.scale(j) = 1.0;
    }
    return s;
  }
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mean).array().rowwise() / scale.array();
  }
};

void require_rows(const Eigen::MatrixXd& x, std::size_t n, const char* what) {
  if (x.rows() == 0 || static_cast<std::size_t>(x.rows()) != n) {
    throw ShapeError(std::string(what) + ": features and targets disagree in length");
  }
}

}  // namespace

Eigen::VectorXd LinearModel::predict(const Eigen::MatrixXd& x) const {
  return (x * w).array() + b;
}

LinearModel fit_linear(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
  require_rows(x, static_cast<std::size_t>(y.size()), "fit_linear");
  if (!(lambda >= 0.0)) throw ConfigError("probe.lambda: must be >= 0");
  const Standardizer st = Standardizer::fit(x);
  const Eigen::MatrixXd z = st.apply(x);
  const double n = static_cast<double>(x.rows());
  const double ymean = y.mean();
  const Eigen::VectorXd yc = y.array() - ymean;
  Eigen::MatrixXd gram = z.transpose() * z / n;
  gram.diagonal().array() += lambda;
  const Eigen::VectorXd wz = gram.ldlt().solve(z.transpose() * yc / n);
  LinearModel m;
  m.w = wz.array() / st.scale.transpose().array();
  m.b = ymean - st.mean.dot(m.w);
  return m;
}

double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& pred) {
  if (y.size() != pred.size() || y.size() == 0) throw ShapeError("r_squared: length mismatch");
  const double mean = y.mean();
  const double ss_tot = (y.array() - mean).square().sum();
  if (!(ss_tot > 0.0)) throw DegenerateInputError("R^2 undefined: targets are constant");
  const double ss_res = (y - pred).squaredNorm();
  return 1.0 - ss_res / ss_tot;
}

Eigen::MatrixXd LogisticModel::logits(const Eigen::MatrixXd& x) const {
  return (x * w.transpose()).rowwise() + b.transpose();
}

std::vector<int> LogisticModel::predict(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd l = logits(x);
  std::vector<int> out(static_cast<std::size_t>(l.rows()));
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    Eigen::Index best = 0;
    l.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

LinearReadout LogisticModel::contrast(int positive, int negative) const {
  if (positive < 0 || negative < 0 || positive >= w.rows() || negative >= w.rows()) {
    throw ConfigError("probe has no class " + std::to_string(std::max(positive, negative)));
  }
  LinearReadout r;
  const Eigen::VectorXd d = w.row(positive) - w.row(negative);
  r.w.assign(d.data(), d.data() + d.size());
  r.beta = b(positive) - b(negative);
  r.target = "class " + std::to_string(positive) + " vs " + std::to_string(negative);
  return r;
}

namespace {

// Mean cross-entropy plus the L2 term, with its gradient.
double logistic_objective(const Eigen::MatrixXd& z, const Eigen::MatrixXd& onehot,
                          const Eigen::MatrixXd& w, const Eigen::VectorXd& b, double lambda,
                          Eigen::MatrixXd* gw, Eigen::VectorXd* gb) {
  const double n = static_cast<double>(z.rows());
  Eigen::MatrixXd l = (z * w.transpose()).rowwise() + b.transpose();
  const Eigen::VectorXd mx = l.rowwise().maxCoeff();
  l.colwise() -= mx;
  Eigen::MatrixXd p = l.array().exp();
  const Eigen::VectorXd zsum = p.rowwise().sum();
  const Eigen::VectorXd lse = zsum.array().log();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) loss -= onehot.row(i).dot(l.row(i)) - lse(i);
  loss = loss / n + 0.5 * lambda * w.squaredNorm();
  if (gw) {
    p.array().colwise() /= zsum.array();
    const Eigen::MatrixXd d = (p - onehot) / n;
    *gw = d.transpose() * z + lambda * w;
    *gb = d.colwise().sum().transpose();
  }
  return loss;
}

}  // namespace

LogisticModel fit_logistic(const Eigen::MatrixXd& x, std::span<const int> labels, int classes,
                           const LogisticOptions& opts) {
  require_rows(x, labels.size(), "fit_logistic");
  if (classes < 2) throw ConfigError("logistic probe needs at least 2 classes");
  std::vector<std::size_t> counts(static_cast<std::size_t>(classes), 0);
  for (int c : labels) {
    if (c < 0 || c >= classes) throw ConfigError("label " + std::to_string(c) + " out of range");
    ++counts[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw DegenerateInputError("class " + std::to_string(c) + " absent from training data");
    }
  }
  const Standardizer st = Standardizer::fit(x);
  const Eigen::MatrixXd z = st.apply(x);
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(x.rows(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) onehot(static_cast<Eigen::Index>(i), labels[i]) = 1.0;

  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(classes, x.cols());
  Eigen::VectorXd b = Eigen::VectorXd::Zero(classes);
  LogisticModel m;
  Eigen::MatrixXd gw;
  Eigen::VectorXd gb;
  double loss = logistic_objective(z, onehot, w, b, opts.lambda, &gw, &gb);
  m.loss_history.push_back(loss);
  double step = 1.0;
  for (int it = 0; it < opts.max_iterations; ++it) {
    const double gnorm2 = gw.squaredNorm() + gb.squaredNorm();
    if (gnorm2 == 0.0) break;
    double next = loss;
    Eigen::MatrixXd w2;
    Eigen::VectorXd b2;
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt) {
      w2 = w - step * gw;
      b2 = b - step * gb;
      next = logistic_objective(z, onehot, w2, b2, opts.lambda, nullptr, nullptr);
      if (next <= loss - 0.5 * step * gnorm2) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    w = std::move(w2);
    b = std::move(b2);
    const double delta = loss - next;
    loss = logistic_objective(z, onehot, w, b, opts.lambda, &gw, &gb);
    m.loss_history.push_back(loss);
    if (delta < opts.tolerance) break;
    step *= 2.0;
  }
  m.w = w.array().rowwise() / st.scale.array();
  m.b = b - m.w * st.mean.transpose();
  return m;
}

double accuracy(std::span<const int> labels, std::span<const int> pred) {
  if (labels.size() != pred.size() || labels.empty()) throw ShapeError("accuracy: length mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += labels[i] == pred[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

std::vector<std::vector<std::size_t>> kfold_indices(std::size_t n, std::size_t k,
                                                    std::uint64_t seed) {
  if (k < 2) throw ConfigError("probe.k: must be >= 2");
  if (k > n) {
    throw ConfigError("probe.k: " + std::to_string(k) + " folds exceed " + std::to_string(n) +
                      " subjects");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream rng(seed, "probe.folds");
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::vector<std::size_t>> folds(k);
  for (std::size_t i = 0; i < n; ++i) folds[i % k].push_back(order[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

ProbeResult kfold(std::size_t n, std::size_t k, std::uint64_t seed, ProbeTask task,
                  const FoldFn& fit_fn) {
  const auto folds = kfold_indices(n, k, seed);
  ProbeResult r;
  r.task = task;
  r.k = k;
  r.seed = seed;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> train;
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) train.insert(train.end(), folds[g].begin(), folds[g].end());
    }
    std::sort(train.begin(), train.end());
    try {
      auto [score, weights] = fit_fn(train, folds[f]);
      r.fold_scores.push_back(score);
      r.fold_weights.push_back(std::move(weights));
    } catch (const DegenerateInputError& e) {
      throw DegenerateInputError("fold " + std::to_string(f) + ": " + e.what());
    }
  }
  r.mean = std::accumulate(r.fold_scores.begin(), r.fold_scores.end(), 0.0) / static_cast<double>(k);
  double ss = 0.0;
  for (double s : r.fold_scores) ss += (s - r.mean) * (s - r.mean);
  r.stddev = std::sqrt(ss / static_cast<double>(k));
  return r;
}

namespace {

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, std::span<const std::size_t> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

}  // namespace

ProbeResult probe_regression(const FrozenFeatureTable& t, std::span<const double> y, std::size_t k,
                             std::uint64_t seed, double lambda) {
  require_rows(t.matrix(), y.size(), "probe_regression");
  return kfold(t.rows(), k, seed, ProbeTask::Regression,
               [&](std::span<const std::size_t> train, std::span<const std::size_t> test) {
                 Eigen::VectorXd ytr(static_cast<Eigen::Index>(train.size()));
                 Eigen::VectorXd yte(static_cast<Eigen::Index>(test.size()));
                 for (std::size_t i = 0; i < train.size(); ++i) ytr(static_cast<Eigen::Index>(i)) = y[train[i]];
                 for (std::size_t i = 0; i < test.size(); ++i) yte(static_cast<Eigen::Index>(i)) = y[test[i]];
                 LinearModel m = fit_linear(take_rows(t.matrix(), train), ytr, lambda);
                 const double score = r_squared(yte, m.predict(take_rows(t.matrix(), test)));
                 return std::pair{score, to_json(m)};
               });
}

ProbeResult probe_classification(const FrozenFeatureTable& t, std::span<const int> labels,
                                 std::size_t k, std::uint64_t seed, const LogisticOptions& opts) {
  require_rows(t.matrix(), labels.size(), "probe_classification");
  const int classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  return kfold(t.rows(), k, seed, ProbeTask::Classification,
               [&](std::span<const std::size_t> train, std::span<const std::size_t> test) {
                 std::vector<int> ltr, lte;
                 for (std::size_t i : train) ltr.push_back(labels[i]);
                 for (std::size_t i : test) lte.push_back(labels[i]);
                 LogisticModel m = fit_logistic(take_rows(t.matrix(), train), ltr, classes, opts);
                 const double score = accuracy(lte, m.predict(take_rows(t.matrix(), test)));
                 return std::pair{score, to_json(m)};
               });
}

namespace {

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

nlohmann::json to_json(const ProbeResult& r) {
  return {{"metric", r.task == ProbeTask::Regression ? "r2" : "accuracy"},
          {"task", r.task == ProbeTask::Regression ? "regression" : "classification"},
          {"k", r.k},
          {"seed", r.seed},
          {"fold_scores", r.fold_scores},
          {"mean", r.mean},
          {"std", r.stddev},
          {"fold_weights", r.fold_weights}};
}

nlohmann::json to_json(const LinearModel& m) {
  return {{"kind", "linear"}, {"w", to_vec(m.w)}, {"b", m.b}};
}

nlohmann::json to_json(const LogisticModel& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index c = 0; c < m.w.rows(); ++c) rows.push_back(to_vec(m.w.row(c).transpose()));
  return {{"kind", "logistic"}, {"w", rows}, {"b", to_vec(m.b)}};
}

LogisticModel logistic_from_json(const nlohmann::json& j) {
  try {
    if (j.at("kind") != "logistic") throw ConfigError("probe weights: kind must be \"logistic\"");
    const auto& rows = j.at("w");
    const auto b = j.at("b").get<std::vector<double>>();
    if (!rows.is_array() || rows.size() != b.size() || rows.empty()) {
      throw ConfigError("probe weights: w rows and b disagree");
    }
    LogisticModel m;
    const std::size_t f = rows[0].size();
    m.w.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(f));
    m.b.resize(static_cast<Eigen::Index>(b.size()));
    for (std::size_t c = 0; c < rows.size(); ++c) {
      const auto r = rows[c].get<std::vector<double>>();
      if (r.size() != f) throw ConfigError("probe weights: ragged w");
      for (std::size_t i = 0; i < f; ++i) m.w(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i)) = r[i];
      m.b(static_cast<Eigen::Index>(c)) = b[c];
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("probe weights: ") + e.what());
  }
}

}  // namespace anatgraph
