// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "genq/nnkit/tensor.hpp"

namespace genq::data {

enum class Provenance : std::uint8_t { synthetic, external, real_scarce };

/// Labeled images [N x 3 x 32 x 32] with values in [0, 1].
struct Dataset {
  nn::TensorF images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  Provenance provenance = Provenance::synthetic;

  [[nodiscard]] nn::Index size() const noexcept { return static_cast<nn::Index>(labels.size()); }
  [[nodiscard]] Dataset subset(std::span<const nn::Index> rows) const;
  [[nodiscard]] Dataset head(nn::Index count) const;
  /// Throws ContractError when empty, mis-sized or labels exceed the class count.
  void validate() const;
};

Dataset concat(std::span<const Dataset> parts);

inline constexpr std::string_view kDatasetMagic = "GQD1";

// Dataset file: "GQD1", u32 N, u8 channels, u16 height, u16 width,
// u16 labels[N], little-endian f32 images (N x C x H x W).
std::string encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::string_view bytes);
void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace genq::data
