#include "gradcheck.hpp"

#include <functional>
#include <map>
#include <memory>

#include "anatgraph/autodiff.hpp"
#include "anatgraph/contrastive.hpp"
#include "anatgraph/patch_graph.hpp"
#include "anatgraph/encoders.hpp"
#include "anatgraph/error.hpp"
#include "anatgraph/rng.hpp"
#include "ref64.hpp"

namespace anatgraph::testing {

namespace {

using Inputs = std::map<std::string, Tensor>;

Tensor random_tensor(Shape dims, RngStream& rng, double lo = -1.0, double hi = 1.0,
                     double min_abs = 0.0) {
  Tensor t(std::move(dims));
  for (float& v : t.data()) {
    double x;
    do {
      x = rng.uniform(lo, hi);
    } while (std::abs(x) < min_abs);
    v = static_cast<float>(x);
  }
  return t;
}

Var P(Tape& t, const Inputs& in, const std::string& name) {
  return t.parameter(name, in.at(name));
}

std::size_t between(RngStream& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.index(hi - lo + 1);
}

// A differentiable function of named inputs, given twice: on the float tape
// and as a float64 reference.
struct Case {
  Inputs inputs;
  std::function<Var(Tape&, const Inputs&)> forward;  // binds inputs by name
  std::function<ref64::T(const ref64::Map&, ref64::KinkTracker*)> reference;
  bool scalar = false;  // forward already yields the loss
  bool has_kinks = false;
};

// Non-scalar outputs are reduced by a fixed random linear functional,
// loss = sum(flatten(y) R), so every output element carries weight.
struct Reducer {
  Tensor r;
  Var apply(Tape& t, Var y) const {
    return ad::sum(t, ad::matmul(t, ad::flatten(t, y), t.constant(r)));
  }
  double apply(const ref64::T& y) const {
    const std::size_t rows = y.dims[0], cols = y.size() / rows;
    double acc = 0.0;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t c = 0; c < cols; ++c) acc += y.v[i * cols + c] * r[c];
    return acc;
  }
};

std::size_t columns_after_flatten(const Shape& dims) {
  std::size_t n = 1;
  for (std::size_t i = 1; i < dims.size(); ++i) n *= dims[i];
  return dims.size() == 1 ? 1 : n;
}

GradcheckReport run(const std::string& op, std::uint64_t seed, const Case& c, RngStream& rng,
                    const Shape& out_dims, double eps) {
  Reducer red;
  if (!c.scalar) red.r = random_tensor({columns_after_flatten(out_dims), 1}, rng);

  Tape tape(true);
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  for (const auto& [name, t] : c.inputs) {
    names.push_back(name);
    shapes.push_back(t.dims());
  }
  Var y = c.forward(tape, c.inputs);
  Var loss = c.scalar ? y : red.apply(tape, y);
  std::map<std::string, Tensor> analytic;
  for (auto& g : grad(tape, loss, names, shapes)) analytic[g.name] = std::move(g.value);

  ref64::KinkTracker kinks;
  auto f = [&](const ref64::Map& m) {
    ref64::T out = c.reference(m, c.has_kinks ? &kinks : nullptr);
    kinks.compare_from_start();
    return c.scalar ? out.v.at(0) : red.apply(out);
  };
  ref64::Map base;
  for (const auto& [name, t] : c.inputs) base[name] = ref64::from(t);
  f(base);
  const ref64::CheckResult r = ref64::check_gradients(f, base, analytic, eps);
  GradcheckReport rep{op, seed, r.worst, r.where, r.checked, 0};
  if (kinks.flipped) rep.rejected = 1;
  return rep;
}

Case case_matmul(RngStream& rng, Shape& out) {
  const std::size_t m = between(rng, 1, 6), k = between(rng, 1, 6), n = between(rng, 1, 6);
  Case c;
  c.inputs["a"] = random_tensor({m, k}, rng);
  c.inputs["b"] = random_tensor({k, n}, rng);
  c.forward = [](Tape& t, const Inputs& v) { return ad::matmul(t, P(t, v, "a"), P(t, v, "b")); };
  c.reference = [](const ref64::Map& p, ref64::KinkTracker*) {
    return ref64::matmul(p.at("a"), p.at("b"));
  };
  out = {m, n};
  return c;
}

Case case_add_bias(RngStream& rng, Shape& out) {
  const std::size_t r = between(rng, 1, 6), n = between(rng, 1, 6);
  Case c;
  c.inputs["x"] = random_tensor({r, n}, rng);
  c.inputs["b"] = random_tensor({n}, rng);
  c.forward = [](Tape& t, const Inputs& v) { return ad::add_bias(t, P(t, v, "x"), P(t, v, "b")); };
  c.reference = [](const ref64::Map& p, ref64::KinkTracker*) {
    return ref64::add_bias(p.at("x"), p.at("b"));
  };
  out = {r, n};
  return c;
}

Case case_conv3d(RngStream& rng, Shape& out) {
  const std::size_t b = between(rng, 1, 2), ci = between(rng, 1, 3), co = between(rng, 1, 3);
  const std::size_t d = between(rng, 1, 6), h = between(rng, 1, 6), w = between(rng, 1, 6);
  const int stride = rng.index(2) == 0 ? 1 : 2;
  Case c;
  c.inputs["x"] = random_tensor({b, ci, d, h, w}, rng);
  c.inputs["k"] = random_tensor({co, ci, 3, 3, 3}, rng, -0.5, 0.5);
  c.forward = [stride](Tape& t, const Inputs& v) { return ad::conv3d(t, P(t, v, "x"), P(t, v, "k"), stride); };
  c.reference = [stride](const ref64::Map& p, ref64::KinkTracker*) {
    return ref64::conv3d(p.at("x"), p.at("k"), stride);
  };
  out = {b, co, conv3d_out_dim(d, stride), conv3d_out_dim(h, stride), conv3d_out_dim(w, stride)};
  return c;
}

Shape bn_shape(RngStream& rng) {
  if (rng.index(2) == 0) return {between(rng, 2, 6), between(rng, 1, 4)};
  return {between(rng, 2, 3), between(rng, 1, 3), between(rng, 1, 3), between(rng, 1, 3),
          between(rng, 1, 3)};
}

Case case_batch_norm_train(RngStream& rng, Shape& out) {
  out = bn_shape(rng);
  const std::size_t ch = out[1];
  Case c;
  c.inputs["x"] = random_tensor(out, rng, -2.0, 2.0);
  c.inputs["gamma"] = random_tensor({ch}, rng, 0.5, 1.5);
  c.inputs["beta"] = random_tensor({ch}, rng);
  c.forward = [](Tape& t, const Inputs& v) {
    return ad::batch_norm(t, P(t, v, "x"), P(t, v, "gamma"), P(t, v, "beta"), BnMode::Train, nullptr);
  };
  c.reference = [](const ref64::Map& p, ref64::KinkTracker*) {
    return ref64::batch_norm_train(p.at("x"), p.at("gamma"), p.at("beta"));
  };
  return c;
}

Case case_batch_norm_eval(RngStream& rng, Shape& out) {
  out = bn_shape(rng);
  const std::size_t ch = out[1];
  auto stats = std::make_shared<BatchNormStats>(BatchNormStats{
      random_tensor({ch}, rng, -0.5, 0.5), random_tensor({ch}, rng, 0.5, 2.0)});
  Case c;
  c.inputs["x"] = random_tensor(out, rng, -2.0, 2.0);
  c.inputs["gamma"] = random_tensor({ch}, rng, 0.5, 1.5);
  c.inputs["beta"] = random_tensor({ch}, rng);
  c.forward = [stats](Tape& t, const Inputs& v) {
    return ad::batch_norm(t, P(t, v, "x"), P(t, v, "gamma"), P(t, v, "beta"), BnMode::Eval, stats.get());
  };
  c.reference = [stats](const ref64::Map& p, ref64::KinkTracker*) {
    return ref64::batch_norm_eval(p.at("x"), p.at("gamma"), p.at("beta"),
                                  ref64::from(stats->running_mean), ref64::from(stats->running_var));
  };
  return c;
}

Case case_activation(RngStream& rng, Shape& out, Activation kind) {
  out = {between(rng, 1, 6), between(rng, 1, 6)};
  Case c;
  // Inputs stay clear of the origin, where ReLU has no derivative.
  c.inputs["x"] = random_tensor(out, rng, -3.0, 3.0, 0.05);
  c.forward = [kind](Tape& t, const Inputs& v) { return ad::activation(t, P(t, v, "x"), kind); };
  c.reference = [kind](const ref64::Map& p, ref64::KinkTracker*) {
    double (*f)(double) = kind == Activation::ELU    ? ref64::elu
                          : kind == Activation::ReLU ? ref64::relu
                                                     : ref64::sigmoid;
    return ref64::apply(p.at("x"), f);
  };
  return c;
}

Case case_l2_normalize(RngStream& rng, Shape& out) {
  out = {between(rng, 1, 5), between(rng, 2, 6)};
  Case c;
  c.inputs["x"] = random_tensor(out, rng, -1.0, 1.0, 0.1);
  c.forward = [](Tape& t, const Inputs& v) { return ad::l2_normalize(t, P(t, v, "x")); };
  c.reference = [](const ref64::Map& p, ref64::KinkTracker*) {
    return ref64::l2_normalize_rows(p.at("x"));
  };
  return c;
}

Case case_concat(RngStream& rng, Shape& out) {
  const std::size_t r = between(rng, 1, 5), a = between(rng, 1, 4), b = between(rng, 1, 4);
  Case c;
  c.inputs["a"] = random_tensor({r, a}, rng);
  c.inputs["b"] = random_tensor({r, b}, rng);
  c.forward = [](Tape& t, const Inputs& v) { return ad::concat_cols(t, P(t, v, "a"), P(t, v, "b")); };
  c.reference = [](const ref64::Map& p, ref64::KinkTracker*) {
    return ref64::concat_cols(p.at("a"), p.at("b"));
  };
  out = {r, a + b};
  return c;
}

Case case_segment_mean(RngStream& rng, Shape& out) {
  std::vector<std::size_t> sizes(between(rng, 1, 3));
  std::size_t total = 0;
  for (auto& s : sizes) total += (s = between(rng, 1, 4));
  const std::size_t f = between(rng, 1, 5);
  Case c;
  c.inputs["x"] = random_tensor({total, f}, rng);
  c.forward = [sizes](Tape& t, const Inputs& v) { return ad::segment_mean(t, P(t, v, "x"), sizes); };
  c.reference = [sizes](const ref64::Map& p, ref64::KinkTracker*) {
    return ref64::segment_mean(p.at("x"), sizes);
  };
  out = {sizes.size(), f};
  return c;
}

Case case_graph_propagate(RngStream& rng, Shape& out) {
  auto blocks = std::make_shared<std::vector<Tensor>>();
  std::size_t total = 0;
  for (std::size_t b = between(rng, 1, 3); b > 0; --b) {
    const std::size_t n = between(rng, 1, 5);
    blocks->push_back(random_tensor({n, n}, rng));
    total += n;
  }
  const std::size_t f = between(rng, 1, 5);
  Case c;
  c.inputs["x"] = random_tensor({total, f}, rng);
  c.forward = [blocks](Tape& t, const Inputs& v) { return ad::graph_propagate(t, *blocks, P(t, v, "x")); };
  c.reference = [blocks](const ref64::Map& p, ref64::KinkTracker*) {
    std::vector<ref64::T> b;
    for (const auto& t : *blocks) b.push_back(ref64::from(t));
    return ref64::propagate(b, p.at("x"));
  };
  out = {total, f};
  return c;
}

Case case_info_nce(RngStream& rng, Shape& out) {
  const std::size_t rows = between(rng, 1, 4), f = between(rng, 2, 6);
  auto negatives = std::make_shared<std::vector<Tensor>>();
  for (std::size_t r = 0; r < rows; ++r) negatives->push_back(random_tensor({between(rng, 1, 5), f}, rng));
  const float tau = static_cast<float>(rng.uniform(0.2, 1.0));
  Case c;
  c.scalar = true;
  c.inputs["q"] = random_tensor({rows, f}, rng);
  c.inputs["k"] = random_tensor({rows, f}, rng);
  c.forward = [negatives, tau](Tape& t, const Inputs& v) {
    return ad::info_nce(t, P(t, v, "q"), P(t, v, "k"), *negatives, tau);
  };
  c.reference = [negatives, tau](const ref64::Map& p, ref64::KinkTracker*) {
    std::vector<ref64::T> n;
    for (const auto& t : *negatives) n.push_back(ref64::from(t));
    ref64::T out({1});
    out.v[0] = ref64::info_nce(p.at("q"), p.at("k"), n, tau);
    return out;
  };
  out = {1};
  return c;
}

ModelConfig toy_model() {
  ModelConfig m;
  m.encoder.patch_size = 4;
  m.encoder.stages = {{3, 1}};
  m.encoder.feature_dim = 4;
  return m;
}

Tensor unit_rows(const Tensor& t) { return l2_normalize(t); }

// For two or more rows: every row's negatives are all the other rows.
std::vector<Tensor> other_rows(const Tensor& keys) {
  const std::size_t b = keys.dim(0), f = keys.dim(1);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < b; ++i) {
    Tensor n({b - 1, f});
    std::size_t r = 0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      for (std::size_t c = 0; c < f; ++c) n.at(r, c) = keys.at(j, c);
      ++r;
    }
    out.push_back(std::move(n));
  }
  return out;
}

// Patch-level loss on two subjects: q = normalize(E_q(view, p)), keys fixed,
// each anchor's negative is the other subject's key.
Case case_patch_loss(RngStream& rng, Shape& out) {
  const ModelConfig cfg = toy_model();
  auto model = std::make_shared<ModelState>(init_model(cfg, rng.engine()()));
  const std::size_t b = 2, p = cfg.encoder.patch_size, f = cfg.encoder.feature_dim;
  auto patches = std::make_shared<Tensor>(random_tensor({b, 1, p, p, p}, rng));
  auto coords = std::make_shared<Tensor>(random_tensor({b, 3}, rng));
  auto keys = std::make_shared<Tensor>(unit_rows(random_tensor({b, f}, rng)));
  auto negatives = std::make_shared<std::vector<Tensor>>(other_rows(*keys));
  Case c;
  c.scalar = true;
  c.has_kinks = true;
  for (const auto& name : model->param_names("enc.q.")) c.inputs[name] = model->params.at(name);
  c.forward = [=](Tape& t, const Inputs&) {
    ParamBinder bind(t, model->params, true);
    Var h = encoder_forward(t, bind, *model, "enc.q", t.constant(*patches), t.constant(*coords),
                            BnMode::Train);
    return ad::info_nce(t, ad::l2_normalize(t, h), t.constant(*keys), *negatives,
                        kDefaultTemperature);
  };
  c.reference = [=](const ref64::Map& m, ref64::KinkTracker* kinks) {
    ref64::T h = ref64::encoder(m, cfg.encoder, "enc.q", ref64::from(*patches),
                                ref64::from(*coords), kinks);
    std::vector<ref64::T> n;
    for (const auto& t : *negatives) n.push_back(ref64::from(t));
    ref64::T out({1});
    out.v[0] = ref64::info_nce(ref64::l2_normalize_rows(h), ref64::from(*keys), n,
                               kDefaultTemperature);
    return out;
  };
  out = {1};
  return c;
}

// Graph-level loss on three toy graphs: r = normalize(f_g(Pool(G_q(H, A)))).
Case case_graph_loss(RngStream& rng, Shape& out) {
  const ModelConfig cfg = toy_model();
  auto model = std::make_shared<ModelState>(init_model(cfg, rng.engine()()));
  const std::size_t graphs = 3, f = cfg.encoder.feature_dim;
  auto blocks = std::make_shared<std::vector<Tensor>>();
  std::vector<std::size_t> sizes;
  std::size_t total = 0;
  for (std::size_t g = 0; g < graphs; ++g) {
    const std::size_t n = between(rng, 3, 6);
    Tensor a({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (rng.index(2) == 0) a.at(i, j) = a.at(j, i) = 1.0f;
    blocks->push_back(normalize_adjacency(a));
    sizes.push_back(n);
    total += n;
  }
  // Positive head biases keep the ReLUs alive so the embedding is not
  // identically zero, where the normalization has no derivative.
  for (const auto& name : model->param_names("gcn.q.fg.")) {
    if (name.ends_with(".b")) model->params[name] = random_tensor({f}, rng, 0.1, 0.5);
  }
  auto h = std::make_shared<Tensor>(random_tensor({total, f}, rng));
  auto keys = std::make_shared<Tensor>(unit_rows(random_tensor({graphs, f}, rng)));
  auto negatives = std::make_shared<std::vector<Tensor>>(other_rows(*keys));
  Case c;
  c.scalar = true;
  c.has_kinks = true;
  for (const auto& name : model->param_names("gcn.q.")) c.inputs[name] = model->params.at(name);
  c.forward = [=](Tape& t, const Inputs&) {
    ParamBinder bind(t, model->params, true);
    Var hp = gcn_forward(t, bind, *model, "gcn.q", t.constant(*h), *blocks, BnMode::Train);
    Var s = graph_head(t, bind, "gcn.q", pool_nodes(t, hp, sizes));
    return ad::info_nce(t, ad::l2_normalize(t, s), t.constant(*keys), *negatives,
                        kDefaultTemperature);
  };
  c.reference = [=](const ref64::Map& m, ref64::KinkTracker* kinks) {
    std::vector<ref64::T> a, n;
    for (const auto& t : *blocks) a.push_back(ref64::from(t));
    for (const auto& t : *negatives) n.push_back(ref64::from(t));
    ref64::T hp = ref64::gcn(m, "gcn.q", a, ref64::from(*h));
    ref64::T s = ref64::head(m, "gcn.q", ref64::segment_mean(hp, sizes), kinks);
    ref64::T out({1});
    out.v[0] = ref64::info_nce(ref64::l2_normalize_rows(s), ref64::from(*keys), n,
                               kDefaultTemperature);
    return out;
  };
  out = {1};
  return c;
}

Case make_case(const std::string& op, RngStream& rng, Shape& out) {
  if (op == "matmul") return case_matmul(rng, out);
  if (op == "add_bias") return case_add_bias(rng, out);
  if (op == "conv3d") return case_conv3d(rng, out);
  if (op == "batch_norm_train") return case_batch_norm_train(rng, out);
  if (op == "batch_norm_eval") return case_batch_norm_eval(rng, out);
  if (op == "elu") return case_activation(rng, out, Activation::ELU);
  if (op == "relu") return case_activation(rng, out, Activation::ReLU);
  if (op == "sigmoid") return case_activation(rng, out, Activation::Sigmoid);
  if (op == "l2_normalize") return case_l2_normalize(rng, out);
  if (op == "concat_cols") return case_concat(rng, out);
  if (op == "segment_mean") return case_segment_mean(rng, out);
  if (op == "graph_propagate") return case_graph_propagate(rng, out);
  if (op == "info_nce") return case_info_nce(rng, out);
  if (op == "patch_loss") return case_patch_loss(rng, out);
  if (op == "graph_loss") return case_graph_loss(rng, out);
  throw ConfigError("gradcheck: unknown op " + op);
}

}  // namespace

const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> ops{
      "matmul",  "add_bias",     "conv3d",      "batch_norm_train", "batch_norm_eval",
      "elu",     "relu",         "sigmoid",     "l2_normalize",     "concat_cols",
      "segment_mean", "graph_propagate", "info_nce", "patch_loss",     "graph_loss"};
  return ops;
}

GradcheckReport gradcheck(const std::string& op, std::uint64_t seed, double eps) {
  // Draws whose ReLU pattern changes under the perturbation are redrawn from
  // the next child stream; the count is reported.
  std::size_t rejected = 0;
  for (std::size_t attempt = 0;; ++attempt) {
    RngStream rng = RngStream(seed, "gradcheck/" + op).child(std::to_string(attempt));
    Shape out;
    const Case c = make_case(op, rng, out);
    GradcheckReport r = run(op, seed, c, rng, out, eps);
    if (r.rejected == 0 || attempt == 20) {
      r.rejected = rejected;
      return r;
    }
    ++rejected;
  }
}

}  // namespace anatgraph::testing
