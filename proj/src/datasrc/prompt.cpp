// SPDX-License-Identifier: Apache-2.0
#include "genq/datasrc/prompt.hpp"

#include "genq/common/error.hpp"
#include "genq/common/rng.hpp"

namespace genq::data {

std::string build_prompt(const PromptSpec& spec) {
  if (spec.class_name.empty()) {
    throw ContractError("build_prompt: empty class name");
  }
  if (spec.template_index >= kPromptTemplates.size()) {
    throw ContractError("build_prompt: template index " + std::to_string(spec.template_index) + " out of range");
  }
  const std::string_view tpl = kPromptTemplates[spec.template_index];
  const std::size_t hole = tpl.find("{C}");
  std::string out;
  out.reserve(tpl.size() + spec.class_name.size() + 32);
  out.append(tpl.substr(0, hole));
  out.append(spec.class_name);
  out.append(tpl.substr(hole + 3));
  if (spec.style_token) {
    out.append(kStyleClause);
    out.append(*spec.style_token);
  }
  return out;
}

PromptSpec sample_prompt(std::string_view class_name, std::uint64_t seed) {
  Rng rng = Rng(seed).split("prompt");
  return PromptSpec{std::string(class_name), static_cast<std::size_t>(rng.uniform_int(kPromptTemplates.size())),
                    std::nullopt, seed};
}

std::vector<ParsedPrompt> parse_prompt(std::string_view prompt, std::span<const std::string> class_names) {
  std::vector<ParsedPrompt> matches;
  std::optional<std::string> style;
  std::string_view body = prompt;
  if (const auto pos = prompt.find(kStyleClause); pos != std::string_view::npos) {
    style = std::string(prompt.substr(pos + kStyleClause.size()));
    body = prompt.substr(0, pos);
  }
  for (std::size_t t = 0; t < kPromptTemplates.size(); ++t) {
    for (const auto& name : class_names) {
      if (build_prompt(PromptSpec{name, t, std::nullopt, 0}) == body) {
        matches.push_back(ParsedPrompt{t, name, style});
      }
    }
  }
  return matches;
}

}  // namespace genq::data
