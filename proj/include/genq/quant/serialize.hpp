// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>

#include "genq/quant/quantized_model.hpp"

namespace genq::quant {

inline constexpr std::string_view kQuantMagic = "GQQ1";

// Quantized model file: a complete GQM1 model followed by one GQQ1 section per
// quantizer (weight sites first, then activation sites):
//   "GQQ1", u8 role, u8 bits, f32 step, i32 zero-point, i32 n, i32 p,
//   u8 stage, u8 flags (bit 0: v follows, bit 1: u follows),
//   [u32 count, f32 v[count]], [u32 count, f32 u[count]].

std::string encode_quantized(const QuantizedModel& qm);
QuantizedModel decode_quantized(std::string_view bytes);
void save_quantized(const QuantizedModel& qm, const std::string& path);
QuantizedModel load_quantized(const std::string& path);

}  // namespace genq::quant
