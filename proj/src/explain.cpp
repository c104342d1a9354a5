#include "anatgraph/explain.hpp"

#include <cmath>

#include "anatgraph/error.hpp"

namespace anatgraph {

double ActivationGraph::logit() const {
  double sum = 0.0;
  for (double m : scores) sum += m;
  return beta + (scores.empty() ? 0.0 : sum / static_cast<double>(scores.size()));
}

ActivationGraph activation_graph(const LinearReadout& readout, const Tensor& h,
                                 std::string subject_id) {
  if (h.rank() != 2 || h.dim(0) == 0) throw ShapeError("activation_graph: H' must be [N x F]");
  const std::size_t n = h.dim(0), f = h.dim(1);
  if (readout.w.size() != f) {
    throw ShapeError("activation_graph: readout has " + std::to_string(readout.w.size()) +
                     " weights, node features have " + std::to_string(f));
  }
  ActivationGraph g;
  g.subject_id = std::move(subject_id);
  g.target = readout.target;
  g.beta = readout.beta;
  g.scores.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    double m = 0.0;
    for (std::size_t c = 0; c < f; ++c) m += readout.w[c] * static_cast<double>(h.at(j, c));
    g.scores[j] = m;
  }
  g.normalized = normalize_scores(g.scores);
  return g;
}

std::vector<double> normalize_scores(std::span<const double> raw) {
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double x = raw[i];
    // Split by sign so exp never overflows.
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return out;
}

Volume render_map(const ActivationGraph& g, std::span<const Vec3> centers, std::size_t patch_size,
                  std::size_t depth, std::size_t height, std::size_t width, float spacing_mm) {
  if (centers.size() != g.normalized.size()) {
    throw ShapeError("render_map: " + std::to_string(centers.size()) + " centres for " +
                     std::to_string(g.normalized.size()) + " scores");
  }
  Volume out(depth, height, width, spacing_mm, 0.0f);
  validate(out);
  std::vector<double> sum(out.size(), 0.0);
  std::vector<std::uint32_t> hits(out.size(), 0);
  const long p = static_cast<long>(patch_size);
  const long dims[3] = {static_cast<long>(width), static_cast<long>(height),
                        static_cast<long>(depth)};
  for (std::size_t j = 0; j < centers.size(); ++j) {
    // Same rounding rule as patch extraction.
    const long x0 = std::lround(centers[j].x / spacing_mm) - p / 2;
    const long y0 = std::lround(centers[j].y / spacing_mm) - p / 2;
    const long z0 = std::lround(centers[j].z / spacing_mm) - p / 2;
    for (long z = std::max(z0, 0L); z < std::min(z0 + p, dims[2]); ++z) {
      for (long y = std::max(y0, 0L); y < std::min(y0 + p, dims[1]); ++y) {
        for (long x = std::max(x0, 0L); x < std::min(x0 + p, dims[0]); ++x) {
          const std::size_t i = out.index(static_cast<std::size_t>(z), static_cast<std::size_t>(y),
                                          static_cast<std::size_t>(x));
          sum[i] += g.normalized[j];
          ++hits[i];
        }
      }
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (hits[i] > 0) out.voxels[i] = static_cast<float>(sum[i] / hits[i]);
  }
  return out;
}

nlohmann::json to_json(const ActivationGraph& g, double reference_logit) {
  const double logit = g.logit();
  return {{"subject_id", g.subject_id},
          {"target", g.target},
          {"beta", g.beta},
          {"scores_raw", g.scores},
          {"scores_norm", g.normalized},
          {"logit", logit},
          {"logit_check", std::abs(reference_logit - logit)}};
}

}  // namespace anatgraph
