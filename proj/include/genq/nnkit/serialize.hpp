// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>

#include "genq/common/binary_io.hpp"
#include "genq/nnkit/model.hpp"

namespace genq::nn {

inline constexpr std::string_view kModelMagic = "GQM1";
inline constexpr std::string_view kTensorMagic = "GQT1";
inline constexpr std::uint16_t kModelVersion = 1;

// Model file: "GQM1", u16 version, u8 architecture, u32 record count, then per
// record: u16 name length, name, u8 rank, u32 dims[rank], f32 payload. All
// integers and floats are little-endian. Parameters come first, followed by
// "bnK.running_mean" / "bnK.running_var" for every BatchNorm layer.

void encode_model(const Model& model, io::ByteWriter& out);
Model decode_model(io::ByteReader& in);

std::string encode_model(const Model& model);
Model decode_model(std::string_view bytes);

void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

/// Tensor file: "GQT1", u8 rank, u32 dims[rank], f32 payload.
std::string encode_tensor(const TensorF& tensor);
TensorF decode_tensor(std::string_view bytes);
void save_tensor(const TensorF& tensor, const std::string& path);
TensorF load_tensor(const std::string& path);

/// FNV-1a fingerprint of the serialized model.
std::uint64_t model_hash(const Model& model);

}  // namespace genq::nn
