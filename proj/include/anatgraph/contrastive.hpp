#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "anatgraph/augment.hpp"
#include "anatgraph/encoders.hpp"
#include "anatgraph/patch_graph.hpp"

namespace anatgraph {

inline constexpr float kDefaultTemperature = 0.2f;

// Fixed-capacity FIFO of key embeddings. Each entry remembers which subject
// produced it so an anchor never meets its own subject as a negative.
class NegativeQueue {
 public:
  NegativeQueue() = default;
  NegativeQueue(std::string scope, std::size_t capacity, std::size_t dim);

  const std::string& scope() const noexcept { return scope_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t fill() const noexcept { return fill_; }
  std::size_t cursor() const noexcept { return cursor_; }

  void push(std::span<const float> key, std::uint32_t subject);
  // Rows of `keys` ([B x F]) with matching subject ids.
  void push_rows(const Tensor& keys, std::span<const std::uint32_t> subjects);

  std::span<const float> entry(std::size_t i) const;
  std::uint32_t subject(std::size_t i) const { return ids_.at(i); }

  // [M x F] entries whose subject differs from `exclude`, oldest first.
  // M may be zero, in which case the returned tensor is empty.
  Tensor negatives_for(std::uint32_t exclude) const;

  // queue.<scope>.data / .ids / .meta
  void save(TensorMap& out) const;
  static NegativeQueue load(const TensorMap& in, const std::string& scope);

  friend bool operator==(const NegativeQueue&, const NegativeQueue&) = default;

 private:
  std::string scope_;
  std::size_t capacity_ = 0, dim_ = 0, fill_ = 0, cursor_ = 0;
  std::vector<float> data_;
  std::vector<std::uint32_t> ids_;
};

// Negatives for every anchor row: the queue minus the anchor's own subject,
// or, if that leaves nothing, the in-batch keys of the other subjects.
// Throws DegenerateInputError when no negative can be found.
std::vector<Tensor> assemble_negatives(const NegativeQueue& queue, const Tensor& keys,
                                       std::span<const std::uint32_t> subjects);

// Contrastive inputs for one anchor batch. `query` lives on the caller's
// tape; `keys` are detached.
struct PairBatch {
  Var query;
  Tensor keys;
  std::vector<Tensor> negatives;
};

// Subjects contributing one patch each at a single atlas region.
struct RegionBatch {
  std::size_t region = 0;
  std::array<float, 3> center{};
  std::vector<std::span<const float>> patches;
  std::vector<std::uint32_t> subjects;
};

// Two augmented views per patch; the query view goes through the query
// encoder on `tape` (train-mode BN), the key view through the key encoder
// without gradients. `rng` seeds one child stream per subject and view.
PairBatch patch_pairs(Tape& tape, ParamBinder& bind, ModelState& model, const RegionBatch& batch,
                      const AugmentConfig& aug, const RngStream& rng, const NegativeQueue& queue);

// A graph as the trainer sees it: patches, normalized atlas centres and the
// normalized adjacency of one subject.
struct GraphSample {
  const PatchSet* patches = nullptr;
  const std::vector<std::array<float, 3>>* centers = nullptr;
  const Tensor* adjacency_norm = nullptr;
  std::uint32_t subject = 0;
};

// Node features h for one augmented view of a whole graph, from the query
// patch encoder in eval mode without gradients.
Tensor augmented_node_features(ModelState& model, const GraphSample& g, const AugmentConfig& aug,
                               const RngStream& rng);

// Graph-level pairs: r from the query GCN (on `tape`) and t+ from the key
// GCN, each fed an independently augmented view of every subject.
PairBatch graph_pairs(Tape& tape, ParamBinder& bind, ModelState& model,
                      std::span<const GraphSample> graphs, const AugmentConfig& aug,
                      const RngStream& rng, const NegativeQueue& queue);

}  // namespace anatgraph
