// SPDX-License-Identifier: Apache-2.0
#include "genq/datasrc/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "genq/common/rng.hpp"

namespace genq::data {
namespace {

using Rgb = std::array<float, 3>;

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double k = h * 6.0;
  const int sector = static_cast<int>(k) % 6;
  const double f = k - std::floor(k);
  const auto p = static_cast<float>(v * (1 - s));
  const auto q = static_cast<float>(v * (1 - s * f));
  const auto t = static_cast<float>(v * (1 - s * (1 - f)));
  const auto vv = static_cast<float>(v);
  switch (sector) {
    case 0: return {vv, t, p};
    case 1: return {q, vv, p};
    case 2: return {p, vv, t};
    case 3: return {p, q, vv};
    case 4: return {t, p, vv};
    default: return {vv, p, q};
  }
}

void rgb_to_hsv(const Rgb& c, double& h, double& s, double& v) {
  const double mx = std::max({c[0], c[1], c[2]});
  const double mn = std::min({c[0], c[1], c[2]});
  const double d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == c[0]) {
    h = (c[1] - c[2]) / d;
  } else if (mx == c[1]) {
    h = 2.0 + (c[2] - c[0]) / d;
  } else {
    h = 4.0 + (c[0] - c[1]) / d;
  }
  h /= 6.0;
  h -= std::floor(h);
}

// Signed distance (pixels, negative inside) to a shape of radius r centred at
// the origin, evaluated in the shape's rotated frame.
double shape_distance(int shape, double x, double y, double r) {
  switch (shape) {
    case 0:  // disc
      return std::hypot(x, y) - r;
    case 1: {  // square
      const double qx = std::abs(x) - 0.8 * r;
      const double qy = std::abs(y) - 0.8 * r;
      return std::hypot(std::max(qx, 0.0), std::max(qy, 0.0)) + std::min(std::max(qx, qy), 0.0);
    }
    case 2: {  // equilateral triangle
      const double k = std::sqrt(3.0);
      double px = std::abs(x) - r;
      double py = y + r / k;
      if (px + k * py > 0) {
        const double nx = (px - k * py) / 2.0;
        const double ny = (-k * px - py) / 2.0;
        px = nx;
        py = ny;
      }
      px -= std::clamp(px, -2.0 * r, 0.0);
      return -std::hypot(px, py) * (py < 0 ? -1.0 : 1.0);
    }
    case 3: {  // plus sign
      const double w = 0.3 * r;
      const double ax = std::abs(x);
      const double ay = std::abs(y);
      const double bar1 = std::max(ax - r, ay - w);
      const double bar2 = std::max(ax - w, ay - r);
      return std::min(bar1, bar2);
    }
    default:  // annulus
      return std::abs(std::hypot(x, y) - 0.7 * r) - 0.3 * r;
  }
}

void render(int class_id, Rng rng, float* out) {
  constexpr nn::Index side = kImageSide;
  constexpr nn::Index plane = side * side;
  const int shape = class_id % 5;
  const double hue = (class_id + 0.5 + rng.uniform(-0.3, 0.3)) / kNumClasses;
  const Rgb fg = hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0));
  // Dark, nearly neutral background.
  const double grey = rng.uniform(0.0, 0.3);
  Rgb bg;
  for (auto& c : bg) c = static_cast<float>(grey + rng.uniform(-0.05, 0.05));
  const double cx = 15.5 + rng.uniform(-5.0, 5.0);
  const double cy = 15.5 + rng.uniform(-5.0, 5.0);
  const double radius = rng.uniform(6.0, 11.0);
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  // A small class-independent distractor drawn underneath the main shape.
  const int d_shape = static_cast<int>(rng.uniform_int(5));
  const Rgb d_fg = hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 1.0), rng.uniform(0.4, 1.0));
  const double dcx = rng.uniform(2.0, 29.0);
  const double dcy = rng.uniform(2.0, 29.0);
  const double d_radius = rng.uniform(3.0, 5.0);
  const double ca = std::cos(angle);
  const double sa = std::sin(angle);
  for (nn::Index y = 0; y < side; ++y) {
    for (nn::Index x = 0; x < side; ++x) {
      const double px = static_cast<double>(x);
      const double py = static_cast<double>(y);
      const double dd = shape_distance(d_shape, px - dcx, py - dcy, d_radius);
      const double d = shape_distance(shape, ca * (px - cx) + sa * (py - cy), -sa * (px - cx) + ca * (py - cy), radius);
      // One-pixel antialiased edges.
      const auto d_cover = static_cast<float>(std::clamp(0.5 - dd, 0.0, 1.0));
      const auto cover = static_cast<float>(std::clamp(0.5 - d, 0.0, 1.0));
      for (nn::Index c = 0; c < 3; ++c) {
        const float under = bg[c] + d_cover * (d_fg[c] - bg[c]);
        const float base = under + cover * (fg[c] - under);
        const auto noisy = static_cast<float>(base + 0.05 * rng.normal());
        out[c * plane + y * side + x] = std::clamp(noisy, 0.0f, 1.0f);
      }
    }
  }
}

void box_blur(float* img, int radius) {
  constexpr nn::Index side = kImageSide;
  std::array<float, side * side> tmp{};
  for (nn::Index c = 0; c < 3; ++c) {
    float* p = img + c * side * side;
    for (nn::Index y = 0; y < side; ++y) {
      for (nn::Index x = 0; x < side; ++x) {
        double acc = 0;
        for (int k = -radius; k <= radius; ++k) {
          acc += p[y * side + std::clamp<nn::Index>(x + k, 0, side - 1)];
        }
        tmp[y * side + x] = static_cast<float>(acc / (2 * radius + 1));
      }
    }
    for (nn::Index y = 0; y < side; ++y) {
      for (nn::Index x = 0; x < side; ++x) {
        double acc = 0;
        for (int k = -radius; k <= radius; ++k) {
          acc += tmp[std::clamp<nn::Index>(y + k, 0, side - 1) * side + x];
        }
        p[y * side + x] = static_cast<float>(acc / (2 * radius + 1));
      }
    }
  }
}

}  // namespace

std::vector<std::string> default_class_names() {
  return {"red circle",   "orange square", "lime triangle",   "green cross",  "jade ring",
          "cyan circle",  "azure square",  "indigo triangle", "purple cross", "rose ring"};
}

Dataset synth_images(int class_id, nn::Index count, std::uint64_t seed, nn::Index first_index) {
  if (class_id < 0 || class_id >= kNumClasses) {
    throw ContractError("synth_images: class id " + std::to_string(class_id) + " outside 0..9");
  }
  if (count <= 0) {
    throw ContractError("synth_images: count must be positive");
  }
  Dataset out;
  out.images = nn::TensorF({count, 3, kImageSide, kImageSide});
  out.labels.assign(static_cast<std::size_t>(count), class_id);
  out.class_names = default_class_names();
  const Rng cls = Rng(seed).split("synth").split(static_cast<std::uint64_t>(class_id));
  const nn::Index stride = 3 * kImageSide * kImageSide;
  for (nn::Index j = 0; j < count; ++j) {
    render(class_id, cls.split(static_cast<std::uint64_t>(first_index + j)), out.images.data().data() + j * stride);
  }
  return out;
}

Dataset synth_balanced(nn::Index count, std::uint64_t seed) {
  if (count <= 0) {
    throw ContractError("synth_balanced: count must be positive");
  }
  Dataset out;
  out.images = nn::TensorF({count, 3, kImageSide, kImageSide});
  out.class_names = default_class_names();
  const nn::Index stride = 3 * kImageSide * kImageSide;
  const Rng root = Rng(seed).split("synth");
  for (nn::Index i = 0; i < count; ++i) {
    const int k = static_cast<int>(i % kNumClasses);
    render(k, root.split(static_cast<std::uint64_t>(k)).split(static_cast<std::uint64_t>(i / kNumClasses)),
           out.images.data().data() + i * stride);
    out.labels.push_back(k);
  }
  return out;
}

Dataset corrupt(const Dataset& dataset, int severity, std::uint64_t seed) {
  if (severity < 1 || severity > 5) {
    throw ContractError("corrupt: severity " + std::to_string(severity) + " outside 1..5");
  }
  dataset.validate();
  Dataset out = dataset;
  const nn::Index side = dataset.images.dim(2);
  const nn::Index plane = side * dataset.images.dim(3);
  if (dataset.images.dim(1) != 3 || side != kImageSide || dataset.images.dim(3) != kImageSide) {
    throw ContractError("corrupt: expects [N x 3 x 32 x 32] images");
  }
  const Rng root = Rng(seed).split("corrupt");
  const double contrast = 1.0 - 0.18 * severity;
  for (nn::Index i = 0; i < out.size(); ++i) {
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    float* img = out.images.data().data() + i * 3 * plane;
    const double shift = 0.1 * severity + rng.uniform(-0.02, 0.02);
    for (nn::Index px = 0; px < plane; ++px) {
      double h = 0, s = 0, v = 0;
      rgb_to_hsv({img[px], img[plane + px], img[2 * plane + px]}, h, s, v);
      const Rgb c = hsv_to_rgb(h + shift, s, v);
      for (int ch = 0; ch < 3; ++ch) img[ch * plane + px] = c[ch];
    }
    box_blur(img, severity);
    double mean = 0;
    for (nn::Index k = 0; k < 3 * plane; ++k) mean += img[k];
    mean /= static_cast<double>(3 * plane);
    for (nn::Index k = 0; k < 3 * plane; ++k) {
      img[k] = std::clamp(static_cast<float>(mean + contrast * (img[k] - mean)), 0.0f, 1.0f);
    }
  }
  return out;
}

}  // namespace genq::data
