#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anatgraph/autodiff.hpp"
#include "anatgraph/rng.hpp"
#include "anatgraph/tensor.hpp"

namespace anatgraph {

using TensorMap = std::map<std::string, Tensor>;

// One resolution level of the patch CNN: `stride1_convs` same-size
// convolutions followed by one stride-2 convolution, each with BatchNorm+ELU.
struct ConvStage {
  std::size_t channels = 0;
  std::size_t stride1_convs = 1;
  friend bool operator==(const ConvStage&, const ConvStage&) = default;
};

struct EncoderConfig {
  std::size_t patch_size = 16;
  std::vector<ConvStage> stages{{4, 1}, {8, 1}, {16, 1}, {32, 1}};
  std::size_t feature_dim = 32;

  // 32^3 patches, 8-16-32-64-128 ladder, F = 128.
  static EncoderConfig full_scale();

  std::size_t cnn_output_width() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ConvSpec {
  std::size_t in = 0, out = 0;
  int stride = 1;
};

// Throws ConfigError if the stage ladder does not fit the patch size.
void validate(const EncoderConfig& cfg);
std::vector<ConvSpec> conv_layers(const EncoderConfig& cfg);

struct ModelConfig {
  EncoderConfig encoder;
  double momentum = 0.999;
  bool normalize_embeddings = true;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");

// All learnable tensors and BatchNorm running statistics for the query and
// key copies of E (prefix enc.q / enc.k) and G (gcn.q / gcn.k).
struct ModelState {
  ModelConfig config;
  TensorMap params;
  std::map<std::string, BatchNormStats> bn;  // keyed by layer prefix, e.g. "enc.q.c.0"

  std::vector<std::string> param_names(std::string_view prefix) const;
};

// Kaiming-uniform fan-in weights, zero biases except f_g (0.01), BN gamma 1 /
// beta 0, unit running stats. Key copies start equal to the queries.
ModelState init_model(const ModelConfig& cfg, std::uint64_t seed);

// Re-checks every tensor shape against the config. Throws ConfigError.
void validate_model(const ModelState& m);

// Binds named parameters onto a tape, either as tracked parameters (so
// gradients flow to them) or as constants.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const TensorMap& params, bool track) noexcept
      : tape_(tape), params_(params), track_(track) {}
  Var operator()(const std::string& name);

 private:
  Tape& tape_;
  const TensorMap& params_;
  bool track_;
  std::map<std::string, Var> bound_;
};

// E(x, p) = f_l(C(x) || p). patches: [B, 1, P, P, P]; coords: [B, 3].
Var encoder_forward(Tape& tape, ParamBinder& bind, ModelState& model, const std::string& prefix,
                    Var patches, Var coords, BnMode mode);

// ELU(BN(A_norm H W)) over a stack of graphs; H rows are node features.
Var gcn_forward(Tape& tape, ParamBinder& bind, ModelState& model, const std::string& prefix,
                Var node_features, std::span<const Tensor> adjacency_norm, BnMode mode);

// Column mean per graph: [sum N_b x F] -> [B x F].
Var pool_nodes(Tape& tape, Var h_prime, std::span<const std::size_t> graph_sizes);

// f_g: Dense-ReLU-Dense-ReLU-Dense.
Var graph_head(Tape& tape, ParamBinder& bind, const std::string& prefix, Var pooled);

// ---- Eager helpers (no tape bookkeeping) ------------------------------------

// h for one patch in eval mode.
Tensor encode_patch(ModelState& model, const std::string& prefix, std::span<const float> patch,
                    const std::array<float, 3>& atlas_center_norm);

// Rows of h for many patches, processed in chunks, eval mode.
Tensor encode_patches(ModelState& model, const std::string& prefix,
                      std::span<const std::vector<float>> patches,
                      std::span<const std::array<float, 3>> centers, std::size_t chunk = 64);

// H' for one graph in eval mode.
Tensor gcn_node_features(ModelState& model, const std::string& prefix, const Tensor& h,
                         const Tensor& adjacency_norm);

// Pooled H' (head discarded) or f_g(pooled).
Tensor subject_embedding(const ModelState& model, const std::string& prefix, const Tensor& h_prime,
                         bool with_head);

// theta_k <- m theta_k + (1 - m) theta_q for every tensor under the prefixes.
void momentum_update(TensorMap& params, const std::string& query_prefix,
                     const std::string& key_prefix, double m);

}  // namespace anatgraph
