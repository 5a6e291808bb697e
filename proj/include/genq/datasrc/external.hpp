// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "genq/datasrc/dataset.hpp"

namespace genq::data {

inline constexpr double kDefaultGuidanceScale = 3.5;

struct GenRequest {
  std::string prompt;
  std::uint64_t seed = 0;
  double guidance_scale = kDefaultGuidanceScale;
  int steps = 50;
};

struct ExternalOptions {
  std::string endpoint;  // e.g. "http://127.0.0.1:8080"
  int parallel = 4;
  double timeout_seconds = 60.0;
};

/// GENQ_ENDPOINT, when set and non-empty, wins over the configured value.
std::string resolve_endpoint(std::string_view configured);

/// Stable identifier for a request, quoted in every transport error.
std::string request_id(const GenRequest& req);

/// JSON body sent to `<endpoint>/generate`.
std::string request_body(const GenRequest& req);

/// Parses a `{width, height, pixels}` response (base64 little-endian f32,
/// interleaved RGB rows) into a [3 x height x width] tensor.
nn::TensorF decode_image_response(std::string_view body, std::string_view id);

/// Area-averaging resample of a [C x H x W] image.
nn::TensorF resize_area(const nn::TensorF& image, nn::Index out_h, nn::Index out_w);

/// One request; returns a [3 x 32 x 32] image. Failures raise TransportError.
nn::TensorF generate_external(const GenRequest& req, const ExternalOptions& options);

/// Issues the requests with at most `options.parallel` in flight; image i
/// answers request i.
Dataset generate_many(std::span<const GenRequest> requests, std::span<const int> labels,
                      const ExternalOptions& options);

}  // namespace genq::data
