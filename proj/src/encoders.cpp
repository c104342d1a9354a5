#include "anatgraph/encoders.hpp"

#include <cmath>

#include "anatgraph/error.hpp"

namespace anatgraph {

EncoderConfig EncoderConfig::full_scale() {
  EncoderConfig c;
  c.patch_size = 32;
  c.stages = {{8, 1}, {16, 2}, {32, 2}, {64, 2}, {128, 1}};
  c.feature_dim = 128;
  return c;
}

std::size_t EncoderConfig::cnn_output_width() const {
  std::size_t s = patch_size;
  for (std::size_t i = 0; i < stages.size(); ++i) s = conv3d_out_dim(s, 2);
  return stages.back().channels * s * s * s;
}

void validate(const EncoderConfig& c) {
  if (c.patch_size < 1) throw ConfigError("model.patch_size: must be >= 1");
  if (c.stages.empty()) throw ConfigError("model.stages: at least one stage required");
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    if (c.stages[i].channels == 0) {
      throw ConfigError("model.stages[" + std::to_string(i) + "]: channels must be >= 1");
    }
  }
  if (c.feature_dim == 0) throw ConfigError("model.feature_dim: must be >= 1");
}

std::vector<ConvSpec> conv_layers(const EncoderConfig& c) {
  std::vector<ConvSpec> out;
  std::size_t in = 1;
  for (const ConvStage& s : c.stages) {
    for (std::size_t i = 0; i < s.stride1_convs; ++i) {
      out.push_back({in, s.channels, 1});
      in = s.channels;
    }
    out.push_back({in, s.channels, 2});
    in = s.channels;
  }
  return out;
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.encoder.stages) stages.push_back({s.channels, s.stride1_convs});
  return {{"patch_size", c.encoder.patch_size},
          {"stages", stages},
          {"feature_dim", c.encoder.feature_dim},
          {"momentum", c.momentum},
          {"normalize_embeddings", c.normalize_embeddings}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  ModelConfig c;
  auto uint_field = [&](const std::string& key, const nlohmann::json& v) {
    if (!v.is_number_integer() || v.get<long long>() < 1) {
      throw ConfigError(path + "." + key + ": expected a positive integer");
    }
    return v.get<std::size_t>();
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "patch_size") {
      c.encoder.patch_size = uint_field(key, value);
    } else if (key == "feature_dim") {
      c.encoder.feature_dim = uint_field(key, value);
    } else if (key == "stages") {
      if (!value.is_array() || value.empty()) throw ConfigError(path + ".stages: expected a non-empty array");
      c.encoder.stages.clear();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const auto& s = value[i];
        const std::string where = "stages[" + std::to_string(i) + "]";
        if (!s.is_array() || s.size() != 2) {
          throw ConfigError(path + "." + where + ": expected [channels, stride1_convs]");
        }
        ConvStage st;
        st.channels = uint_field(where + "[0]", s[0]);
        if (!s[1].is_number_integer() || s[1].get<long long>() < 0) {
          throw ConfigError(path + "." + where + "[1]: expected a non-negative integer");
        }
        st.stride1_convs = s[1].get<std::size_t>();
        c.encoder.stages.push_back(st);
      }
    } else if (key == "scale") {
      if (!value.is_string()) throw ConfigError(path + ".scale: expected \"desk\" or \"full\"");
      const auto s = value.get<std::string>();
      if (s == "full") c.encoder = EncoderConfig::full_scale();
      else if (s != "desk") throw ConfigError(path + ".scale: expected \"desk\" or \"full\"");
    } else if (key == "momentum") {
      if (!value.is_number()) throw ConfigError(path + ".momentum: expected a number");
      c.momentum = value.get<double>();
      if (!(c.momentum >= 0.0 && c.momentum < 1.0)) {
        throw ConfigError(path + ".momentum: must lie in [0, 1)");
      }
    } else if (key == "normalize_embeddings") {
      if (!value.is_boolean()) throw ConfigError(path + ".normalize_embeddings: expected a boolean");
      c.normalize_embeddings = value.get<bool>();
    } else {
      throw ConfigError(path + "." + key + ": unknown key");
    }
  }
  validate(c.encoder);
  return c;
}

std::vector<std::string> ModelState::param_names(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, t] : params) {
    if (name.compare(0, prefix.size(), prefix) == 0) out.push_back(name);
  }
  return out;
}

namespace {

// f_g biases start slightly positive so a subject whose pooled features
// switch off every hidden unit still yields a nonzero, normalizable output.
constexpr float kHeadBiasInit = 0.01f;

struct ParamSpec {
  std::string name;
  Shape dims;
  enum Kind { Weight, Zero, One, HeadBias } kind;
  std::size_t fan_in = 0;
};

std::vector<ParamSpec> encoder_specs(const EncoderConfig& c, const std::string& prefix) {
  std::vector<ParamSpec> out;
  const auto layers = conv_layers(c);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + ".c." + std::to_string(i);
    out.push_back({base + ".w", {layers[i].out, layers[i].in, 3, 3, 3}, ParamSpec::Weight,
                   layers[i].in * 27});
    out.push_back({base + ".gamma", {layers[i].out}, ParamSpec::One});
    out.push_back({base + ".beta", {layers[i].out}, ParamSpec::Zero});
  }
  const std::size_t w = c.cnn_output_width() + 3;
  const std::size_t dims[4] = {w, w, w, c.feature_dim};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string base = prefix + ".fl." + std::to_string(i);
    out.push_back({base + ".w", {dims[i], dims[i + 1]}, ParamSpec::Weight, dims[i]});
    out.push_back({base + ".b", {dims[i + 1]}, ParamSpec::Zero});
  }
  return out;
}

std::vector<ParamSpec> graph_specs(std::size_t f, const std::string& prefix) {
  std::vector<ParamSpec> out;
  out.push_back({prefix + ".w", {f, f}, ParamSpec::Weight, f});
  out.push_back({prefix + ".bn.gamma", {f}, ParamSpec::One});
  out.push_back({prefix + ".bn.beta", {f}, ParamSpec::Zero});
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string base = prefix + ".fg." + std::to_string(i);
    out.push_back({base + ".w", {f, f}, ParamSpec::Weight, f});
    out.push_back({base + ".b", {f}, ParamSpec::HeadBias});
  }
  return out;
}

std::vector<std::pair<std::string, std::size_t>> bn_layers(const EncoderConfig& c,
                                                           const std::string& enc_prefix,
                                                           const std::string& gcn_prefix) {
  std::vector<std::pair<std::string, std::size_t>> out;
  const auto layers = conv_layers(c);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out.emplace_back(enc_prefix + ".c." + std::to_string(i), layers[i].out);
  }
  out.emplace_back(gcn_prefix + ".bn", c.feature_dim);
  return out;
}

}  // namespace

ModelState init_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg.encoder);
  ModelState m;
  m.config = cfg;
  auto specs = encoder_specs(cfg.encoder, "enc.q");
  auto g = graph_specs(cfg.encoder.feature_dim, "gcn.q");
  specs.insert(specs.end(), g.begin(), g.end());
  for (const auto& s : specs) {
    Tensor t(s.dims, s.kind == ParamSpec::One ? 1.0f
                     : s.kind == ParamSpec::HeadBias ? kHeadBiasInit
                                                      : 0.0f);
    if (s.kind == ParamSpec::Weight) {
      RngStream rng(seed, "init/" + s.name);
      const double bound = std::sqrt(6.0 / static_cast<double>(s.fan_in));
      for (float& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
    }
    const std::string key_name = s.name.substr(0, s.name.find(".q.")) + ".k." +
                                 s.name.substr(s.name.find(".q.") + 3);
    m.params[key_name] = t;
    m.params[s.name] = std::move(t);
  }
  for (const char* side : {"q", "k"}) {
    for (const auto& [name, ch] :
         bn_layers(cfg.encoder, std::string("enc.") + side, std::string("gcn.") + side)) {
      m.bn[name] = BatchNormStats::identity(ch);
    }
  }
  return m;
}

void validate_model(const ModelState& m) {
  validate(m.config.encoder);
  for (const char* side : {"q", "k"}) {
    auto specs = encoder_specs(m.config.encoder, std::string("enc.") + side);
    auto g = graph_specs(m.config.encoder.feature_dim, std::string("gcn.") + side);
    specs.insert(specs.end(), g.begin(), g.end());
    for (const auto& s : specs) {
      auto it = m.params.find(s.name);
      if (it == m.params.end()) throw ConfigError("model is missing tensor " + s.name);
      if (it->second.dims() != s.dims) {
        throw ConfigError("tensor " + s.name + " has shape " + shape_string(it->second.dims()) +
                          ", config expects " + shape_string(s.dims));
      }
    }
    for (const auto& [name, ch] : bn_layers(m.config.encoder, std::string("enc.") + side,
                                            std::string("gcn.") + side)) {
      auto it = m.bn.find(name);
      if (it == m.bn.end() || it->second.running_mean.size() != ch ||
          it->second.running_var.size() != ch) {
        throw ConfigError("model running statistics for " + name + " missing or mis-sized");
      }
    }
  }
}

Var ParamBinder::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter " + name);
  Var v = track_ ? tape_.parameter(name, it->second) : tape_.constant(it->second);
  bound_.emplace(name, v);
  return v;
}

namespace {

Var dense(Tape& t, ParamBinder& bind, const std::string& base, Var x) {
  return ad::add_bias(t, ad::matmul(t, x, bind(base + ".w")), bind(base + ".b"));
}

BatchNormStats* stats_for(ModelState& m, const std::string& key) {
  auto it = m.bn.find(key);
  if (it == m.bn.end()) throw ConfigError("missing running statistics for " + key);
  return &it->second;
}

}  // namespace

Var encoder_forward(Tape& t, ParamBinder& bind, ModelState& model, const std::string& prefix,
                    Var patches, Var coords, BnMode mode) {
  const auto layers = conv_layers(model.config.encoder);
  Var x = patches;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + ".c." + std::to_string(i);
    x = ad::conv3d(t, x, bind(base + ".w"), layers[i].stride);
    x = ad::batch_norm(t, x, bind(base + ".gamma"), bind(base + ".beta"), mode,
                       stats_for(model, base));
    x = ad::activation(t, x, Activation::ELU);
  }
  x = ad::flatten(t, x);
  x = ad::concat_cols(t, x, coords);
  x = ad::activation(t, dense(t, bind, prefix + ".fl.0", x), Activation::ReLU);
  x = ad::activation(t, dense(t, bind, prefix + ".fl.1", x), Activation::ReLU);
  return dense(t, bind, prefix + ".fl.2", x);
}

Var gcn_forward(Tape& t, ParamBinder& bind, ModelState& model, const std::string& prefix,
                Var node_features, std::span<const Tensor> adjacency_norm, BnMode mode) {
  Var x = ad::graph_propagate(t, adjacency_norm, node_features);
  x = ad::matmul(t, x, bind(prefix + ".w"));
  x = ad::batch_norm(t, x, bind(prefix + ".bn.gamma"), bind(prefix + ".bn.beta"), mode,
                     stats_for(model, prefix + ".bn"));
  return ad::activation(t, x, Activation::ELU);
}

Var pool_nodes(Tape& t, Var h_prime, std::span<const std::size_t> graph_sizes) {
  return ad::segment_mean(t, h_prime, graph_sizes);
}

Var graph_head(Tape& t, ParamBinder& bind, const std::string& prefix, Var pooled) {
  Var x = ad::activation(t, dense(t, bind, prefix + ".fg.0", pooled), Activation::ReLU);
  x = ad::activation(t, dense(t, bind, prefix + ".fg.1", x), Activation::ReLU);
  return dense(t, bind, prefix + ".fg.2", x);
}

Tensor encode_patch(ModelState& model, const std::string& prefix, std::span<const float> patch,
                    const std::array<float, 3>& atlas_center_norm) {
  std::vector<std::vector<float>> one{std::vector<float>(patch.begin(), patch.end())};
  const std::array<float, 3> c[1] = {atlas_center_norm};
  Tensor h = encode_patches(model, prefix, one, c);
  h.reshape({h.dim(1)});
  return h;
}

Tensor encode_patches(ModelState& model, const std::string& prefix,
                      std::span<const std::vector<float>> patches,
                      std::span<const std::array<float, 3>> centers, std::size_t chunk) {
  if (patches.size() != centers.size()) throw ShapeError("encode_patches: patches/centers mismatch");
  const std::size_t p = model.config.encoder.patch_size;
  const std::size_t vox = p * p * p;
  const std::size_t f = model.config.encoder.feature_dim;
  const std::size_t n = patches.size();
  Tensor out({std::max<std::size_t>(n, 1), f});
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t b = std::min(chunk, n - start);
    Tensor x({b, 1, p, p, p});
    Tensor c({b, 3});
    for (std::size_t i = 0; i < b; ++i) {
      const auto& patch = patches[start + i];
      if (patch.size() != vox) throw ShapeError("encode_patches: patch size does not match model");
      std::copy(patch.begin(), patch.end(), x.ptr() + i * vox);
      for (int a = 0; a < 3; ++a) c[i * 3 + a] = centers[start + i][static_cast<std::size_t>(a)];
    }
    Tape tape(false);
    ParamBinder bind(tape, model.params, false);
    Var h = encoder_forward(tape, bind, model, prefix, tape.constant(std::move(x)),
                            tape.constant(std::move(c)), BnMode::Eval);
    const Tensor& hv = tape.value(h);
    std::copy(hv.data().begin(), hv.data().end(), out.ptr() + start * f);
  }
  return out;
}

Tensor gcn_node_features(ModelState& model, const std::string& prefix, const Tensor& h,
                         const Tensor& adjacency_norm) {
  Tape tape(false);
  ParamBinder bind(tape, model.params, false);
  const Tensor blocks[1] = {adjacency_norm};
  Var out = gcn_forward(tape, bind, model, prefix, tape.constant(h), blocks, BnMode::Eval);
  return tape.value(out);
}

Tensor subject_embedding(const ModelState& model, const std::string& prefix, const Tensor& h_prime,
                         bool with_head) {
  if (h_prime.rank() != 2) throw ShapeError("subject_embedding: H' must be [N x F]");
  Tape tape(false);
  ParamBinder bind(tape, model.params, false);
  const std::size_t sizes[1] = {h_prime.dim(0)};
  Var pooled = pool_nodes(tape, tape.constant(h_prime), sizes);
  Var out = with_head ? graph_head(tape, bind, prefix, pooled) : pooled;
  Tensor s = tape.value(out);
  s.reshape({s.size()});
  return s;
}

void momentum_update(TensorMap& params, const std::string& query_prefix,
                     const std::string& key_prefix, double m) {
  if (!(m >= 0.0 && m < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  const std::string qp = query_prefix + ".";
  for (auto& [name, q] : params) {
    if (name.compare(0, qp.size(), qp) != 0) continue;
    const std::string key_name = key_prefix + "." + name.substr(qp.size());
    auto it = params.find(key_name);
    if (it == params.end()) throw ShapeError("momentum_update: no key tensor " + key_name);
    Tensor& k = it->second;
    if (!k.same_shape(q)) throw ShapeError("momentum_update: shape mismatch for " + key_name);
    if (m == 0.0) {
      k = q;
      continue;
    }
    const double w = 1.0 - m;
    for (std::size_t i = 0; i < k.size(); ++i) {
      const double kv = k[i];
      k[i] = static_cast<float>(kv + w * (static_cast<double>(q[i]) - kv));
    }
  }
}

}  // namespace anatgraph
