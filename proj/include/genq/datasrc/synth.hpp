// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genq/datasrc/dataset.hpp"

namespace genq::data {

inline constexpr int kNumClasses = 10;
inline constexpr nn::Index kImageSide = 32;

/// Names of the ten procedural classes; class k draws shape k mod 5 in hue band k/10.
std::vector<std::string> default_class_names();

/// `count` images of one class. Image j is a pure function of
/// (class_id, first_index + j, seed).
Dataset synth_images(int class_id, nn::Index count, std::uint64_t seed, nn::Index first_index = 0);

/// `count` images cycling through the classes (0, 1, ..., 9, 0, ...).
Dataset synth_balanced(nn::Index count, std::uint64_t seed);

/// Hue rotation, box blur and contrast collapse, each scaled by severity 1..5.
Dataset corrupt(const Dataset& dataset, int severity, std::uint64_t seed);

}  // namespace genq::data
