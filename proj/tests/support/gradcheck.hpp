#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace anatgraph::testing {

// Analytic (float32 tape) gradients against float64 central differences.
struct GradcheckReport {
  std::string op;
  std::uint64_t seed = 0;
  double worst = 0.0;      // largest per-element relative error
  std::string where;       // element that produced it
  std::size_t checked = 0; // elements compared
  std::size_t rejected = 0;  // resampled draws that sat on a ReLU kink
};

inline constexpr double kGradcheckEps = 1e-3;
inline constexpr double kGradcheckTolerance = 1e-3;

// matmul, add_bias, conv3d, batch_norm_train, batch_norm_eval, elu, relu,
// sigmoid, l2_normalize, concat_cols, segment_mean, graph_propagate,
// info_nce, patch_loss, graph_loss.
const std::vector<std::string>& gradcheck_ops();

GradcheckReport gradcheck(const std::string& op, std::uint64_t seed, double eps = kGradcheckEps);

}  // namespace anatgraph::testing
