#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include "anatgraph/encoders.hpp"

namespace anatgraph {

// CAGC: "CAGC", u32 version = 1, u32 tensor count, then per tensor u16 name
// length, UTF-8 name, u8 rank, rank x u64 dims, f32 data. Tensors are
// written in name order so equal maps serialize to equal bytes.
void write_tensors(const TensorMap& tensors, std::ostream& os);
TensorMap read_tensors(std::istream& is);
void write_tensors(const TensorMap& tensors, const std::filesystem::path& path);
TensorMap read_tensors(const std::filesystem::path& path);

// Every tensor whose name starts with one of `prefixes`.
TensorMap select(const TensorMap& tensors, std::initializer_list<std::string_view> prefixes);

std::string sha256_hex(std::string_view bytes);
// SHA-256 of the CAGC serialization of the selected tensors.
std::string digest(const TensorMap& tensors);

// 64-bit integers stored as four exact 16-bit chunks in a float tensor.
Tensor encode_u64(std::uint64_t v);
std::uint64_t decode_u64(const Tensor& t, std::size_t offset = 0);

// Model parameters plus BatchNorm running statistics (bn.<layer>.running_*)
// and the model configuration (meta.model).
void export_model(const ModelState& m, TensorMap& out);
ModelState import_model(const TensorMap& in);

}  // namespace anatgraph
