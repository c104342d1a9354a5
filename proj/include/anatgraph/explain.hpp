#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anatgraph/geometry.hpp"
#include "anatgraph/tensor.hpp"
#include "anatgraph/volume.hpp"

namespace anatgraph {

// Linear read-out over pooled node features: logit = beta + w . s.
struct LinearReadout {
  std::vector<double> w;
  double beta = 0.0;
  std::string target;  // e.g. "class 1 vs 0"
};

struct ActivationGraph {
  std::string subject_id;
  std::string target;
  double beta = 0.0;
  std::vector<double> scores;      // M^j = w . h'^j
  std::vector<double> normalized;  // sigmoid(M^j)

  // beta + mean_j M^j.
  double logit() const;
};

// Throws ShapeError if w's width differs from the node feature width.
ActivationGraph activation_graph(const LinearReadout& readout, const Tensor& node_features,
                                 std::string subject_id = {});

std::vector<double> normalize_scores(std::span<const double> raw);

// Each voxel holds the mean normalized score of the patches covering it;
// voxels no patch covers are 0. Centres are in mm in the volume frame.
Volume render_map(const ActivationGraph& g, std::span<const Vec3> centers, std::size_t patch_size,
                  std::size_t depth, std::size_t height, std::size_t width, float spacing_mm);

// {subject_id, target, beta, scores_raw, scores_norm, logit, logit_check}
// where logit_check = |reference_logit - (beta + mean M)|.
nlohmann::json to_json(const ActivationGraph& g, double reference_logit);

}  // namespace anatgraph
