// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace genq::data {

/// The 27 label-prompt templates; `{C}` marks the class name.
inline constexpr std::array<std::string_view, 27> kPromptTemplates{
    "photo of a {C}.",          "rendering of a {C}.",      "cropped photo of the {C}.",
    "the photo of a {C}.",      "photo of a clean {C}.",    "photo of a dirty {C}.",
    "dark photo of the {C}.",   "photo of my {C}.",         "photo of the cool {C}.",
    "close-up photo of a {C}.", "bright photo of the {C}.", "cropped photo of a {C}.",
    "photo of the {C}.",        "good photo of the {C}.",   "photo of one {C}.",
    "close-up photo of the {C}.", "rendition of the {C}.",  "photo of the clean {C}.",
    "rendition of a {C}.",      "photo of a nice {C}.",     "good photo of a {C}.",
    "photo of the nice {C}.",   "photo of the small {C}.",  "photo of the weird {C}.",
    "photo of the large {C}.",  "photo of a cool {C}.",     "photo of a small {C}.",
};

inline constexpr std::string_view kStyleClause = " in the style of ";

struct PromptSpec {
  std::string class_name;
  std::size_t template_index = 0;
  std::optional<std::string> style_token;
  std::uint64_t seed = 0;
};

/// Renders the template with the class name substituted; a style token, when
/// present, is appended as " in the style of <token>".
std::string build_prompt(const PromptSpec& spec);

/// Draws a template uniformly from the seeded stream.
PromptSpec sample_prompt(std::string_view class_name, std::uint64_t seed);

struct ParsedPrompt {
  std::size_t template_index;
  std::string class_name;
  std::optional<std::string> style_token;
};

/// Every (template, class) pair among `class_names` that renders to `prompt`.
std::vector<ParsedPrompt> parse_prompt(std::string_view prompt, std::span<const std::string> class_names);

}  // namespace genq::data
