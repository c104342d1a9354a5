#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "anatgraph/encoders.hpp"
#include "anatgraph/explain.hpp"

namespace anatgraph {

// Subject features for probing: pooled node features with the graph head
// discarded. Built from H' through pooling, or loaded from an extract CSV,
// which holds exactly that.
class FrozenFeatureTable {
 public:
  static FrozenFeatureTable pool(const ModelState& model, std::vector<std::string> ids,
                                 std::span<const Tensor> node_features);
  static FrozenFeatureTable read_csv(const std::filesystem::path& path);
  // For callers that already hold pooled, head-free features.
  static FrozenFeatureTable from_pooled(std::vector<std::string> ids, Eigen::MatrixXd pooled);

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const Eigen::MatrixXd& matrix() const noexcept { return x_; }
  std::size_t rows() const noexcept { return ids_.size(); }
  std::size_t width() const noexcept { return static_cast<std::size_t>(x_.cols()); }

  void write_csv(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> ids_;
  Eigen::MatrixXd x_;
};

// subject_id,target rows matched to the table's subject order.
std::vector<double> read_targets_csv(const std::filesystem::path& path,
                                     std::span<const std::string> ids);

struct LinearModel {
  Eigen::VectorXd w;  // in raw feature units; standardization folded in
  double b = 0.0;
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

// Ridge on train-standardized features minimizing
// mean (y - b - x.w)^2 + lambda |w|^2 with an unpenalized intercept.
LinearModel fit_linear(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda = 1e-3);

// Throws DegenerateInputError when y is constant.
double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& pred);

struct LogisticOptions {
  double lambda = 1e-3;
  int max_iterations = 2000;
  double tolerance = 1e-6;
};

struct LogisticModel {
  Eigen::MatrixXd w;  // [C x F], raw feature units
  Eigen::VectorXd b;  // [C]
  std::vector<double> loss_history;
  Eigen::MatrixXd logits(const Eigen::MatrixXd& x) const;
  std::vector<int> predict(const Eigen::MatrixXd& x) const;
  // Binary read-out of class `positive` against class `negative`.
  LinearReadout contrast(int positive, int negative) const;
};

// Multinomial logistic regression, mean cross-entropy + lambda/2 |W|^2,
// by gradient descent with backtracking. Labels in [0, classes).
LogisticModel fit_logistic(const Eigen::MatrixXd& x, std::span<const int> labels, int classes,
                           const LogisticOptions& opts = {});

double accuracy(std::span<const int> labels, std::span<const int> pred);

// Test-fold index sets of a seeded shuffled split; sizes differ by <= 1.
std::vector<std::vector<std::size_t>> kfold_indices(std::size_t n, std::size_t k,
                                                    std::uint64_t seed);

enum class ProbeTask { Regression, Classification };

struct ProbeResult {
  ProbeTask task = ProbeTask::Classification;
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::vector<double> fold_scores;
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation of fold_scores
  std::vector<nlohmann::json> fold_weights;
};

// fit_fn trains on the train indices and returns (score on test, weights).
using FoldFn = std::function<std::pair<double, nlohmann::json>(
    std::span<const std::size_t> train, std::span<const std::size_t> test)>;
ProbeResult kfold(std::size_t n, std::size_t k, std::uint64_t seed, ProbeTask task,
                  const FoldFn& fit_fn);

ProbeResult probe_regression(const FrozenFeatureTable& t, std::span<const double> y, std::size_t k,
                             std::uint64_t seed, double lambda = 1e-3);
ProbeResult probe_classification(const FrozenFeatureTable& t, std::span<const int> labels,
                                 std::size_t k, std::uint64_t seed,
                                 const LogisticOptions& opts = {});

nlohmann::json to_json(const ProbeResult& r);
nlohmann::json to_json(const LinearModel& m);
nlohmann::json to_json(const LogisticModel& m);
LogisticModel logistic_from_json(const nlohmann::json& j);

}  // namespace anatgraph
