// SPDX-License-Identifier: Apache-2.0
#include "genq/datasrc/external.hpp"

#include <sodium.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <iomanip>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "genq/common/binary_io.hpp"
#include "genq/datasrc/synth.hpp"

namespace genq::data {
namespace {

using nlohmann::json;

std::vector<unsigned char> base64_decode(std::string_view text, std::string_view id) {
  std::vector<unsigned char> out(text.size() / 4 * 3 + 3);
  std::size_t len = 0;
  const char* end = nullptr;
  if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), nullptr, &len, &end,
                        sodium_base64_VARIANT_ORIGINAL) != 0 ||
      end != text.data() + text.size()) {
    throw TransportError("request " + std::string(id) + ": pixels field is not valid base64");
  }
  out.resize(len);
  return out;
}

}  // namespace

std::string resolve_endpoint(std::string_view configured) {
  if (const char* env = std::getenv("GENQ_ENDPOINT"); env != nullptr && *env != '\0') {
    return env;
  }
  return std::string(configured);
}

std::string request_id(const GenRequest& req) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0')
     << io::fnv1a(req.prompt + '\x1f' + std::to_string(req.seed));
  return os.str();
}

std::string request_body(const GenRequest& req) {
  if (!(req.guidance_scale > 0)) {
    throw ContractError("generation request: guidance_scale must be positive");
  }
  if (req.steps <= 0) {
    throw ContractError("generation request: steps must be positive");
  }
  return json{{"prompt", req.prompt}, {"seed", req.seed}, {"guidance_scale", req.guidance_scale}, {"steps", req.steps}}
      .dump();
}

nn::TensorF decode_image_response(std::string_view body, std::string_view id) {
  const std::string who = "request " + std::string(id);
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::exception& e) {
    throw TransportError(who + ": malformed JSON response: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("width") || !doc.contains("height") || !doc.contains("pixels") ||
      !doc["width"].is_number_integer() || !doc["height"].is_number_integer() || !doc["pixels"].is_string()) {
    throw TransportError(who + ": response lacks integer width/height or string pixels");
  }
  const auto w = doc["width"].get<std::int64_t>();
  const auto h = doc["height"].get<std::int64_t>();
  if (w <= 0 || h <= 0 || w > 8192 || h > 8192) {
    throw TransportError(who + ": implausible image size " + std::to_string(w) + "x" + std::to_string(h));
  }
  const auto bytes = base64_decode(doc["pixels"].get_ref<const std::string&>(), id);
  if (bytes.size() != static_cast<std::size_t>(w * h * 3 * 4)) {
    throw TransportError(who + ": pixel payload has " + std::to_string(bytes.size()) + " bytes, expected " +
                         std::to_string(w * h * 12));
  }
  io::ByteReader in(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), "pixels");
  nn::TensorF out({3, h, w});
  for (nn::Index y = 0; y < h; ++y) {
    for (nn::Index x = 0; x < w; ++x) {
      for (nn::Index c = 0; c < 3; ++c) {
        const float v = in.get<float>();
        if (!std::isfinite(v)) {
          throw TransportError(who + ": non-finite pixel value");
        }
        out.at(c, y, x) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

nn::TensorF resize_area(const nn::TensorF& image, nn::Index out_h, nn::Index out_w) {
  if (image.rank() != 3 || out_h <= 0 || out_w <= 0) {
    throw DimensionError("resize_area expects a [C x H x W] image, got " + nn::to_string(image.shape()));
  }
  const nn::Index channels = image.dim(0);
  const nn::Index in_h = image.dim(1);
  const nn::Index in_w = image.dim(2);
  // Overlap weights of each output cell with the input pixels along one axis.
  const auto weights = [](nn::Index in, nn::Index out) {
    std::vector<std::vector<std::pair<nn::Index, double>>> table(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (nn::Index o = 0; o < out; ++o) {
      const double lo = static_cast<double>(o) * ratio;
      const double hi = lo + ratio;
      for (auto i = static_cast<nn::Index>(std::floor(lo)); i < in && static_cast<double>(i) < hi; ++i) {
        const double overlap = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
        if (overlap > 0) table[static_cast<std::size_t>(o)].emplace_back(i, overlap / ratio);
      }
    }
    return table;
  };
  const auto wy = weights(in_h, out_h);
  const auto wx = weights(in_w, out_w);
  nn::TensorF out({channels, out_h, out_w});
  for (nn::Index c = 0; c < channels; ++c) {
    for (nn::Index oy = 0; oy < out_h; ++oy) {
      for (nn::Index ox = 0; ox < out_w; ++ox) {
        double acc = 0;
        for (const auto& [iy, ay] : wy[static_cast<std::size_t>(oy)]) {
          for (const auto& [ix, ax] : wx[static_cast<std::size_t>(ox)]) {
            acc += ay * ax * image.at(c, iy, ix);
          }
        }
        out.at(c, oy, ox) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

nn::TensorF generate_external(const GenRequest& req, const ExternalOptions& options) {
  const std::string id = request_id(req);
  if (options.endpoint.empty()) {
    throw TransportError("request " + id + ": no generation endpoint configured");
  }
  const std::string body = request_body(req);
  std::unique_ptr<httplib::Client> client;
  try {
    client = std::make_unique<httplib::Client>(options.endpoint);
  } catch (const std::exception& e) {
    throw TransportError("request " + id + ": bad endpoint '" + options.endpoint + "': " + e.what());
  }
  if (!client->is_valid()) {
    throw TransportError("request " + id + ": bad endpoint '" + options.endpoint + "'");
  }
  const auto secs = static_cast<time_t>(options.timeout_seconds);
  client->set_connection_timeout(secs, 0);
  client->set_read_timeout(secs, 0);
  const httplib::Headers headers{{"X-Request-Id", id}};
  auto res = client->Post("/generate", headers, body, "application/json");
  if (!res) {
    throw TransportError("request " + id + ": POST " + options.endpoint + "/generate failed: " +
                         httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw TransportError("request " + id + ": server answered HTTP " + std::to_string(res->status));
  }
  nn::TensorF image = decode_image_response(res->body, id);
  if (image.dim(1) == kImageSide && image.dim(2) == kImageSide) {
    return image;
  }
  return resize_area(image, kImageSide, kImageSide);
}

Dataset generate_many(std::span<const GenRequest> requests, std::span<const int> labels,
                      const ExternalOptions& options) {
  if (requests.size() != labels.size() || requests.empty()) {
    throw ContractError("generate_many: need one label per request and at least one request");
  }
  const std::size_t n = requests.size();
  std::vector<nn::TensorF> images(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        images[i] = generate_external(requests[i], options).reshaped({1, 3, kImageSide, kImageSide});
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::clamp(options.parallel, 1, 64));
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  Dataset out;
  out.images = nn::concat_rows<float>(images);
  out.labels.assign(labels.begin(), labels.end());
  out.class_names = default_class_names();
  out.provenance = Provenance::external;
  return out;
}

}  // namespace genq::data
