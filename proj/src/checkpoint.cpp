#include "anatgraph/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include <openssl/sha.h>

#include "anatgraph/error.hpp"
#include "binio.hpp"

namespace anatgraph {

namespace {
constexpr char kMagic[5] = "CAGC";
constexpr std::uint32_t kVersion = 1;
}  // namespace

void write_tensors(const TensorMap& tensors, std::ostream& os) {
  os.write(kMagic, 4);
  binio::put<std::uint32_t>(os, kVersion);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw ConfigError("tensor name too long: " + name.substr(0, 64));
    binio::put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    binio::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.dims()) binio::put<std::uint64_t>(os, d);
    binio::put_floats(os, t.ptr(), t.size());
  }
  if (!os) throw IoError("failed writing checkpoint stream");
}

TensorMap read_tensors(std::istream& is) {
  binio::expect_magic(is, kMagic, "CAGC checkpoint");
  const auto version = binio::get<std::uint32_t>(is, "checkpoint version");
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = binio::get<std::uint32_t>(is, "tensor count");
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = binio::get<std::uint16_t>(is, "tensor name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("unexpected end of file in tensor name");
    const auto rank = binio::get<std::uint8_t>(is, "tensor rank");
    if (rank == 0 || rank > kMaxRank) {
      throw IoError("tensor " + name + " has invalid rank " + std::to_string(rank));
    }
    Shape dims(rank);
    for (auto& d : dims) {
      d = static_cast<std::size_t>(binio::get<std::uint64_t>(is, "tensor dims"));
      if (d == 0 || d > (std::size_t{1} << 32)) throw IoError("tensor " + name + " has invalid dims");
    }
    std::vector<float> data(shape_size(dims));
    binio::get_floats(is, data.data(), data.size(), "tensor data");
    if (!out.emplace(name, Tensor(std::move(dims), std::move(data))).second) {
      throw IoError("duplicate tensor " + name);
    }
  }
  return out;
}

void write_tensors(const TensorMap& tensors, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensors(tensors, os);
  os.flush();
  if (!os) throw IoError("failed writing " + path.string());
}

TensorMap read_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_tensors(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

TensorMap select(const TensorMap& tensors, std::initializer_list<std::string_view> prefixes) {
  TensorMap out;
  for (const auto& [name, t] : tensors) {
    for (std::string_view p : prefixes) {
      if (name.compare(0, p.size(), p) == 0) {
        out.emplace(name, t);
        break;
      }
    }
  }
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), md);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * SHA256_DIGEST_LENGTH);
  for (unsigned char c : md) {
    out.push_back(hex[c >> 4]);
    out.push_back(hex[c & 15]);
  }
  return out;
}

std::string digest(const TensorMap& tensors) {
  std::ostringstream os(std::ios::binary);
  write_tensors(tensors, os);
  return sha256_hex(os.str());
}

Tensor encode_u64(std::uint64_t v) {
  Tensor t({4});
  for (std::size_t i = 0; i < 4; ++i) t[i] = static_cast<float>((v >> (16 * i)) & 0xffff);
  return t;
}

std::uint64_t decode_u64(const Tensor& t, std::size_t offset) {
  if (t.size() < offset + 4) throw IoError("truncated integer field");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const float f = t[offset + i];
    if (!(f >= 0.0f && f <= 65535.0f) || f != static_cast<float>(static_cast<std::uint32_t>(f))) {
      throw IoError("corrupt integer field");
    }
    v |= static_cast<std::uint64_t>(f) << (16 * i);
  }
  return v;
}

namespace {

// [patch_size, feature_dim, normalize, momentum, stage count, (channels, convs)...]
Tensor encode_model_config(const ModelConfig& c) {
  std::vector<float> v{static_cast<float>(c.encoder.patch_size),
                       static_cast<float>(c.encoder.feature_dim),
                       c.normalize_embeddings ? 1.0f : 0.0f, static_cast<float>(c.momentum),
                       static_cast<float>(c.encoder.stages.size())};
  for (const auto& s : c.encoder.stages) {
    v.push_back(static_cast<float>(s.channels));
    v.push_back(static_cast<float>(s.stride1_convs));
  }
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

ModelConfig decode_model_config(const Tensor& t) {
  if (t.rank() != 1 || t.size() < 5) throw IoError("corrupt meta.model tensor");
  ModelConfig c;
  c.encoder.patch_size = static_cast<std::size_t>(t[0]);
  c.encoder.feature_dim = static_cast<std::size_t>(t[1]);
  c.normalize_embeddings = t[2] != 0.0f;
  c.momentum = t[3];
  const auto n = static_cast<std::size_t>(t[4]);
  if (t.size() != 5 + 2 * n) throw IoError("corrupt meta.model tensor");
  c.encoder.stages.clear();
  for (std::size_t i = 0; i < n; ++i) {
    c.encoder.stages.push_back({static_cast<std::size_t>(t[5 + 2 * i]),
                                static_cast<std::size_t>(t[6 + 2 * i])});
  }
  return c;
}

}  // namespace

void export_model(const ModelState& m, TensorMap& out) {
  for (const auto& [name, t] : m.params) out[name] = t;
  for (const auto& [layer, s] : m.bn) {
    out["bn." + layer + ".running_mean"] = s.running_mean;
    out["bn." + layer + ".running_var"] = s.running_var;
  }
  out["meta.model"] = encode_model_config(m.config);
  // Exact momentum bits; the float copy in meta.model is rounded.
  out["meta.momentum"] = encode_u64(std::bit_cast<std::uint64_t>(m.config.momentum));
}

ModelState import_model(const TensorMap& in) {
  auto meta = in.find("meta.model");
  if (meta == in.end()) throw IoError("checkpoint has no meta.model tensor");
  ModelState m;
  m.config = decode_model_config(meta->second);
  if (auto mom = in.find("meta.momentum"); mom != in.end()) {
    m.config.momentum = std::bit_cast<double>(decode_u64(mom->second));
  }
  try {
    validate(m.config.encoder);
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint model config invalid: ") + e.what());
  }
  static constexpr std::string_view kMean = ".running_mean", kVar = ".running_var";
  for (const auto& [name, t] : in) {
    if (name.starts_with("enc.") || name.starts_with("gcn.")) {
      m.params[name] = t;
    } else if (name.starts_with("bn.") && name.ends_with(kMean)) {
      m.bn[name.substr(3, name.size() - 3 - kMean.size())].running_mean = t;
    } else if (name.starts_with("bn.") && name.ends_with(kVar)) {
      m.bn[name.substr(3, name.size() - 3 - kVar.size())].running_var = t;
    }
  }
  validate_model(m);
  return m;
}

}  // namespace anatgraph
