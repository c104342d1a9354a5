#include "anatgraph/contrastive.hpp"

#include <algorithm>

#include "anatgraph/error.hpp"

namespace anatgraph {

NegativeQueue::NegativeQueue(std::string scope, std::size_t capacity, std::size_t dim)
    : scope_(std::move(scope)), capacity_(capacity), dim_(dim), data_(capacity * dim, 0.0f),
      ids_(capacity, 0) {
  if (capacity == 0 || dim == 0) throw ConfigError("queue " + scope_ + ": capacity and dim must be >= 1");
}

void NegativeQueue::push(std::span<const float> key, std::uint32_t subject) {
  if (key.size() != dim_) throw ShapeError("queue " + scope_ + ": key width mismatch");
  std::copy(key.begin(), key.end(), data_.begin() + static_cast<std::ptrdiff_t>(cursor_ * dim_));
  ids_[cursor_] = subject;
  cursor_ = (cursor_ + 1) % capacity_;
  fill_ = std::min(fill_ + 1, capacity_);
}

void NegativeQueue::push_rows(const Tensor& keys, std::span<const std::uint32_t> subjects) {
  if (keys.rank() != 2 || keys.dim(0) != subjects.size()) {
    throw ShapeError("queue " + scope_ + ": one subject id per key row required");
  }
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    push({keys.ptr() + i * dim_, dim_}, subjects[i]);
  }
}

std::span<const float> NegativeQueue::entry(std::size_t i) const {
  if (i >= fill_) throw ShapeError("queue " + scope_ + ": entry out of range");
  return {data_.data() + i * dim_, dim_};
}

Tensor NegativeQueue::negatives_for(std::uint32_t exclude) const {
  // Oldest entry sits at the cursor once the ring is full.
  const std::size_t start = fill_ == capacity_ ? cursor_ : 0;
  std::vector<float> rows;
  std::size_t count = 0;
  for (std::size_t n = 0; n < fill_; ++n) {
    const std::size_t i = (start + n) % capacity_;
    if (ids_[i] == exclude) continue;
    rows.insert(rows.end(), data_.begin() + static_cast<std::ptrdiff_t>(i * dim_),
                data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim_));
    ++count;
  }
  if (count == 0) return {};
  return Tensor({count, dim_}, std::move(rows));
}

void NegativeQueue::save(TensorMap& out) const {
  const std::string base = "queue." + scope_;
  out[base + ".data"] = Tensor({capacity_, dim_}, data_);
  Tensor ids({capacity_});
  for (std::size_t i = 0; i < capacity_; ++i) ids[i] = static_cast<float>(ids_[i]);
  out[base + ".ids"] = std::move(ids);
  out[base + ".meta"] = Tensor({2}, {static_cast<float>(cursor_), static_cast<float>(fill_)});
}

NegativeQueue NegativeQueue::load(const TensorMap& in, const std::string& scope) {
  const std::string base = "queue." + scope;
  auto data = in.find(base + ".data");
  auto ids = in.find(base + ".ids");
  auto meta = in.find(base + ".meta");
  if (data == in.end() || ids == in.end() || meta == in.end()) {
    throw IoError("checkpoint lacks queue " + scope);
  }
  const Tensor& d = data->second;
  if (d.rank() != 2 || ids->second.size() != d.dim(0) || meta->second.size() != 2) {
    throw IoError("queue " + scope + " tensors are inconsistent");
  }
  NegativeQueue q(scope, d.dim(0), d.dim(1));
  q.data_.assign(d.data().begin(), d.data().end());
  for (std::size_t i = 0; i < q.capacity_; ++i) {
    q.ids_[i] = static_cast<std::uint32_t>(ids->second[i]);
  }
  q.cursor_ = static_cast<std::size_t>(meta->second[0]);
  q.fill_ = static_cast<std::size_t>(meta->second[1]);
  if (q.cursor_ >= q.capacity_ || q.fill_ > q.capacity_) {
    throw IoError("queue " + scope + " cursor out of range");
  }
  return q;
}

std::vector<Tensor> assemble_negatives(const NegativeQueue& queue, const Tensor& keys,
                                       std::span<const std::uint32_t> subjects) {
  const std::size_t rows = subjects.size();
  const std::size_t f = keys.dim(1);
  std::vector<Tensor> out;
  out.reserve(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    Tensor n = queue.negatives_for(subjects[i]);
    if (n.empty()) {
      std::vector<float> data;
      std::size_t count = 0;
      for (std::size_t r = 0; r < rows; ++r) {
        if (subjects[r] == subjects[i]) continue;
        data.insert(data.end(), keys.ptr() + r * f, keys.ptr() + (r + 1) * f);
        ++count;
      }
      if (count == 0) {
        throw DegenerateInputError("no negatives for queue " + queue.scope() +
                                   ": batch holds a single subject");
      }
      n = Tensor({count, f}, std::move(data));
    }
    out.push_back(std::move(n));
  }
  return out;
}

namespace {

Tensor stack_views(std::span<const std::vector<float>> views, std::size_t p) {
  const std::size_t vox = p * p * p;
  Tensor x({views.size(), 1, p, p, p});
  for (std::size_t i = 0; i < views.size(); ++i) {
    std::copy(views[i].begin(), views[i].end(), x.ptr() + i * vox);
  }
  return x;
}

Tensor repeat_center(const std::array<float, 3>& c, std::size_t rows) {
  Tensor t({rows, 3});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t a = 0; a < 3; ++a) t[i * 3 + a] = c[a];
  }
  return t;
}

Tensor normalized(const Tensor& t, bool on) { return on ? l2_normalize(t) : t; }

}  // namespace

PairBatch patch_pairs(Tape& tape, ParamBinder& bind, ModelState& model, const RegionBatch& batch,
                      const AugmentConfig& aug, const RngStream& rng, const NegativeQueue& queue) {
  const std::size_t b = batch.patches.size();
  if (b != batch.subjects.size()) throw ShapeError("patch_pairs: one subject id per patch required");
  if (b < 2) throw DegenerateInputError("patch_pairs: batch must hold at least two subjects");
  const std::size_t p = model.config.encoder.patch_size;
  std::vector<std::vector<float>> qviews, kviews;
  qviews.reserve(b);
  kviews.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    const std::string id = std::to_string(batch.subjects[i]);
    RngStream qs = rng.child("q/" + id), ks = rng.child("k/" + id);
    qviews.push_back(augment(batch.patches[i], p, aug, qs));
    kviews.push_back(augment(batch.patches[i], p, aug, ks));
  }
  const bool norm = model.config.normalize_embeddings;

  Var q = encoder_forward(tape, bind, model, "enc.q", tape.constant(stack_views(qviews, p)),
                          tape.constant(repeat_center(batch.center, b)), BnMode::Train);
  if (norm) q = ad::l2_normalize(tape, q);

  Tape key_tape(false);
  ParamBinder key_bind(key_tape, model.params, false);
  Var k = encoder_forward(key_tape, key_bind, model, "enc.k",
                          key_tape.constant(stack_views(kviews, p)),
                          key_tape.constant(repeat_center(batch.center, b)), BnMode::Train);
  PairBatch out;
  out.query = q;
  out.keys = normalized(key_tape.value(k), norm);
  out.negatives = assemble_negatives(queue, out.keys, batch.subjects);
  return out;
}

Tensor augmented_node_features(ModelState& model, const GraphSample& g, const AugmentConfig& aug,
                               const RngStream& rng) {
  const std::size_t n = g.patches->count;
  const std::size_t p = g.patches->patch_size;
  std::vector<std::vector<float>> views;
  views.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    RngStream s = rng.child(std::to_string(j));
    views.push_back(augment(g.patches->patch(j), p, aug, s));
  }
  return encode_patches(model, "enc.q", views, *g.centers);
}

namespace {

struct StackedGraphs {
  Tensor h;
  std::vector<Tensor> blocks;
  std::vector<std::size_t> sizes;
};

StackedGraphs stack_graphs(ModelState& model, std::span<const GraphSample> graphs,
                           const AugmentConfig& aug, const RngStream& rng, const char* view) {
  StackedGraphs s;
  std::vector<float> rows;
  std::size_t total = 0;
  const std::size_t f = model.config.encoder.feature_dim;
  for (const GraphSample& g : graphs) {
    Tensor h = augmented_node_features(
        model, g, aug, rng.child(std::string(view) + "/" + std::to_string(g.subject)));
    rows.insert(rows.end(), h.data().begin(), h.data().end());
    total += h.dim(0);
    s.sizes.push_back(h.dim(0));
    s.blocks.push_back(*g.adjacency_norm);
  }
  s.h = Tensor({total, f}, std::move(rows));
  return s;
}

}  // namespace

PairBatch graph_pairs(Tape& tape, ParamBinder& bind, ModelState& model,
                      std::span<const GraphSample> graphs, const AugmentConfig& aug,
                      const RngStream& rng, const NegativeQueue& queue) {
  if (graphs.size() < 2) throw DegenerateInputError("graph_pairs: batch must hold at least two subjects");
  std::vector<std::uint32_t> subjects;
  for (const GraphSample& g : graphs) subjects.push_back(g.subject);
  const bool norm = model.config.normalize_embeddings;

  StackedGraphs rv = stack_graphs(model, graphs, aug, rng, "r");
  StackedGraphs tv = stack_graphs(model, graphs, aug, rng, "t");

  Var hq = gcn_forward(tape, bind, model, "gcn.q", tape.constant(std::move(rv.h)), rv.blocks,
                       BnMode::Train);
  Var r = graph_head(tape, bind, "gcn.q", pool_nodes(tape, hq, rv.sizes));
  if (norm) r = ad::l2_normalize(tape, r);

  Tape key_tape(false);
  ParamBinder key_bind(key_tape, model.params, false);
  Var hk = gcn_forward(key_tape, key_bind, model, "gcn.k", key_tape.constant(std::move(tv.h)),
                       tv.blocks, BnMode::Train);
  Var t = graph_head(key_tape, key_bind, "gcn.k", pool_nodes(key_tape, hk, tv.sizes));

  PairBatch out;
  out.query = r;
  out.keys = normalized(key_tape.value(t), norm);
  out.negatives = assemble_negatives(queue, out.keys, subjects);
  return out;
}

}  // namespace anatgraph
