// SPDX-License-Identifier: Apache-2.0
#include "genq/nnkit/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "genq/common/rng.hpp"

namespace genq::nn {
namespace {

constexpr std::array<Index, 4> kCnnChannels{16, 32, 64, 64};
constexpr std::array<Index, 4> kCnnStrides{2, 2, 2, 1};
constexpr Index kCnnKernel = 3;

constexpr Index kVitPatch = 4;
constexpr Index kVitDim = 64;
constexpr Index kVitHeads = 4;
constexpr Index kVitMlp = 128;
constexpr std::size_t kVitDepth = 4;
constexpr Index kVitPatches = (Model::kImageSize / kVitPatch) * (Model::kImageSize / kVitPatch);

TensorF he_uniform(Shape shape, Index fan_in, Rng rng) {
  TensorF t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) {
    v = static_cast<float>(rng.uniform(-bound, bound));
  }
  return t;
}

TensorF normal(Shape shape, double stddev, Rng rng) {
  TensorF t(std::move(shape));
  for (auto& v : t.data()) {
    v = static_cast<float>(rng.normal(0.0, stddev));
  }
  return t;
}

}  // namespace

std::string_view to_string(Architecture arch) {
  return arch == Architecture::tiny_cnn ? "tiny-cnn" : "tiny-vit";
}

Architecture parse_architecture(std::string_view name) {
  if (name == "tiny-cnn") return Architecture::tiny_cnn;
  if (name == "tiny-vit") return Architecture::tiny_vit;
  throw ContractError("unknown architecture '" + std::string(name) + "'");
}

std::size_t Model::add_param(std::string name, TensorF value) {
  const std::size_t idx = params_.size();
  index_.emplace(name, idx);
  params_.emplace_back(std::move(name), std::move(value));
  return idx;
}

Parameter<float>& Model::parameter(std::string_view name) {
  const auto it = index_.find(name);
  if (it == index_.end()) {
    throw ContractError("model has no parameter '" + std::string(name) + "'");
  }
  return params_[it->second];
}

const Parameter<float>& Model::parameter(std::string_view name) const {
  return const_cast<Model*>(this)->parameter(name);
}

Model Model::tiny_cnn(std::uint64_t seed) {
  const Rng root = Rng(seed).split("init");
  Model m;
  m.arch_ = Architecture::tiny_cnn;
  Index in = kChannels;
  for (std::size_t i = 0; i < kCnnChannels.size(); ++i) {
    const Index out = kCnnChannels[i];
    const std::string p = "conv" + std::to_string(i);
    const std::size_t w = m.add_param(p + ".weight", he_uniform({out, in, kCnnKernel, kCnnKernel},
                                                                in * kCnnKernel * kCnnKernel, root.split(p)));
    m.weight_sites_.push_back({w, i});
    m.add_param("bn" + std::to_string(i) + ".gamma", TensorF::full({out}, 1.0F));
    m.add_param("bn" + std::to_string(i) + ".beta", TensorF::zeros({out}));
    m.bn_.emplace_back(out);
    m.act_sites_.push_back({"relu" + std::to_string(i), i, true});
    in = out;
  }
  const std::size_t w = m.add_param("head.weight", he_uniform({kClasses, in}, in, root.split("head")));
  m.add_param("head.bias", TensorF::zeros({kClasses}));
  m.weight_sites_.push_back({w, kCnnChannels.size()});
  m.act_sites_.push_back({"head.input", kCnnChannels.size(), true});
  for (std::size_t s = 0; s < m.weight_sites_.size(); ++s) {
    m.site_of_param_[m.weight_sites_[s].parameter] = s;
  }
  return m;
}

Model Model::tiny_vit(std::uint64_t seed) {
  const Rng root = Rng(seed).split("init");
  Model m;
  m.arch_ = Architecture::tiny_vit;
  const Index patch_dim = kChannels * kVitPatch * kVitPatch;
  auto linear_params = [&](const std::string& p, Index out, Index in, std::size_t block) {
    const std::size_t w = m.add_param(p + ".weight", he_uniform({out, in}, in, root.split(p)));
    m.add_param(p + ".bias", TensorF::zeros({out}));
    m.weight_sites_.push_back({w, block});
  };
  linear_params("patch", kVitDim, patch_dim, 0);
  m.add_param("cls", normal({kVitDim}, 0.02, root.split("cls")));
  m.add_param("pos", normal({kVitPatches + 1, kVitDim}, 0.02, root.split("pos")));
  for (std::size_t b = 0; b < kVitDepth; ++b) {
    const std::string p = "blk" + std::to_string(b);
    const std::size_t block = b + 1;
    m.add_param(p + ".ln1.gamma", TensorF::full({kVitDim}, 1.0F));
    m.add_param(p + ".ln1.beta", TensorF::zeros({kVitDim}));
    linear_params(p + ".q", kVitDim, kVitDim, block);
    linear_params(p + ".k", kVitDim, kVitDim, block);
    linear_params(p + ".v", kVitDim, kVitDim, block);
    linear_params(p + ".proj", kVitDim, kVitDim, block);
    m.add_param(p + ".ln2.gamma", TensorF::full({kVitDim}, 1.0F));
    m.add_param(p + ".ln2.beta", TensorF::zeros({kVitDim}));
    linear_params(p + ".fc1", kVitMlp, kVitDim, block);
    linear_params(p + ".fc2", kVitDim, kVitMlp, block);
    m.act_sites_.push_back({p + ".attn_out", block, false});
    m.act_sites_.push_back({p + ".gelu", block, false});
  }
  m.add_param("norm.gamma", TensorF::full({kVitDim}, 1.0F));
  m.add_param("norm.beta", TensorF::zeros({kVitDim}));
  linear_params("head", kClasses, kVitDim, kVitDepth + 1);
  m.act_sites_.push_back({"head.input", kVitDepth + 1, false});
  for (std::size_t s = 0; s < m.weight_sites_.size(); ++s) {
    m.site_of_param_[m.weight_sites_[s].parameter] = s;
  }
  return m;
}

Model Model::create(Architecture arch, std::uint64_t seed) {
  return arch == Architecture::tiny_cnn ? tiny_cnn(seed) : tiny_vit(seed);
}

std::size_t Model::num_blocks() const noexcept {
  return arch_ == Architecture::tiny_cnn ? kCnnChannels.size() + 1 : kVitDepth + 2;
}

void Model::set_trainable(bool trainable) {
  for (auto& p : params_) {
    p.trainable = trainable;
  }
}

Var<float> Model::param(Tape<float>& tape, std::string_view name) { return tape.parameter(parameter(name)); }

Var<float> Model::weight(Tape<float>& tape, std::string_view name, const ForwardContext& ctx) {
  const auto it = index_.find(name);
  Var<float> w = tape.parameter(params_[it->second]);
  if (ctx.hooks) {
    w = ctx.hooks->weight(tape, site_of_param_.at(it->second), w);
  }
  return w;
}

Var<float> Model::act(Tape<float>& tape, std::size_t site, const Var<float>& x, const ForwardContext& ctx) {
  return ctx.hooks ? ctx.hooks->activation(tape, site, x) : x;
}

Var<float> Model::forward(Tape<float>& tape, const TensorF& images, const ForwardContext& ctx) {
  if (images.rank() != 4 || images.dim(1) != kChannels || images.dim(2) != kImageSize || images.dim(3) != kImageSize) {
    throw DimensionError("model input must be [B x 3 x 32 x 32], got " + nn::to_string(images.shape()));
  }
  if (ctx.bn_observed) ctx.bn_observed->clear();
  if (ctx.bn_inputs) ctx.bn_inputs->clear();
  if (ctx.attention) ctx.attention->clear();
  Var<float> x = tape.constant(images);
  for (std::size_t b = 0; b < num_blocks(); ++b) {
    x = forward_block(tape, b, x, ctx);
  }
  return x;
}

Var<float> Model::forward_block(Tape<float>& tape, std::size_t block, const Var<float>& input,
                                const ForwardContext& ctx) {
  if (block >= num_blocks()) {
    throw ContractError("block index " + std::to_string(block) + " out of range");
  }
  return arch_ == Architecture::tiny_cnn ? cnn_block(tape, block, input, ctx) : vit_block(tape, block, input, ctx);
}

Var<float> Model::cnn_block(Tape<float>& tape, std::size_t block, const Var<float>& input, const ForwardContext& ctx) {
  if (block < kCnnChannels.size()) {
    const std::string i = std::to_string(block);
    Var<float> y = conv2d(input, weight(tape, "conv" + i + ".weight", ctx), std::optional<Var<float>>{},
                          Conv2dOptions{kCnnStrides[block], kCnnKernel / 2});
    if (ctx.bn_inputs) ctx.bn_inputs->push_back(y.value());
    BatchStats observed;
    y = batch_norm(y, param(tape, "bn" + i + ".gamma"), param(tape, "bn" + i + ".beta"), bn_[block], ctx.mode,
                   ctx.update_running, ctx.bn_observed ? &observed : nullptr);
    if (ctx.bn_observed) ctx.bn_observed->push_back(std::move(observed));
    return act(tape, block, relu(y), ctx);
  }
  Var<float> pooled = act(tape, kCnnChannels.size(), global_avg_pool(input), ctx);
  return linear(pooled, weight(tape, "head.weight", ctx), std::optional<Var<float>>(param(tape, "head.bias")));
}

Var<float> Model::vit_block(Tape<float>& tape, std::size_t block, const Var<float>& input, const ForwardContext& ctx) {
  if (block == 0) {
    const Var<float> patches = tape.constant(patchify(input.value(), kVitPatch));
    Var<float> x = linear(patches, weight(tape, "patch.weight", ctx), std::optional<Var<float>>(param(tape, "patch.bias")));
    x = prepend_token(x, param(tape, "cls"));
    return add_broadcast(x, param(tape, "pos"));
  }
  if (block <= kVitDepth) {
    const std::size_t b = block - 1;
    const std::string p = "blk" + std::to_string(b);
    auto lin = [&](const Var<float>& x, const std::string& name) {
      return linear(x, weight(tape, p + "." + name + ".weight", ctx),
                    std::optional<Var<float>>(param(tape, p + "." + name + ".bias")));
    };
    const Index batch = input.value().dim(0);
    const Index tokens = input.value().dim(1);
    Var<float> h = layer_norm(input, param(tape, p + ".ln1.gamma"), param(tape, p + ".ln1.beta"));
    const Var<float> q = split_heads(lin(h, "q"), kVitHeads);
    const Var<float> k = split_heads(lin(h, "k"), kVitHeads);
    const Var<float> v = split_heads(lin(h, "v"), kVitHeads);
    const float scale_factor = 1.0F / std::sqrt(static_cast<float>(kVitDim / kVitHeads));
    const Var<float> attn = softmax(scale(bmm(q, k, true), scale_factor));
    if (ctx.attention) ctx.attention->push_back(attn.value());
    Var<float> context = act(tape, 2 * b, bmm(attn, v), ctx);
    Var<float> x = add(input, lin(merge_heads(context, kVitHeads), "proj"));
    h = layer_norm(x, param(tape, p + ".ln2.gamma"), param(tape, p + ".ln2.beta"));
    const Var<float> mid = act(tape, 2 * b + 1, gelu(lin(h, "fc1")), ctx);
    x = add(x, lin(mid, "fc2"));
    if (b + 1 == kVitDepth && ctx.patch_features) {
      const TensorF& xv = x.value();
      TensorF feats(Shape{batch, tokens - 1, kVitDim});
      for (Index i = 0; i < batch; ++i) {
        std::copy_n(xv.data().data() + (i * tokens + 1) * kVitDim, (tokens - 1) * kVitDim,
                    feats.data().data() + i * (tokens - 1) * kVitDim);
      }
      *ctx.patch_features = std::move(feats);
    }
    return x;
  }
  Var<float> x = layer_norm(input, param(tape, "norm.gamma"), param(tape, "norm.beta"));
  x = act(tape, 2 * kVitDepth, take_token(x, 0), ctx);
  return linear(x, weight(tape, "head.weight", ctx), std::optional<Var<float>>(param(tape, "head.bias")));
}

TensorF Model::logits(const TensorF& images, Index batch_size) const {
  Model& self = const_cast<Model&>(*this);
  const Index n = images.dim(0);
  std::vector<TensorF> parts;
  for (Index first = 0; first < n; first += batch_size) {
    const Index count = std::min(batch_size, n - first);
    Tape<float> tape;
    tape.set_grad_enabled(false);
    parts.push_back(self.forward(tape, images.slice(first, count)).value());
  }
  return concat_rows<float>(parts);
}

TensorF patchify(const TensorF& images, Index patch) {
  const Index batch = images.dim(0);
  const Index channels = images.dim(1);
  const Index height = images.dim(2);
  const Index width = images.dim(3);
  if (height % patch != 0 || width % patch != 0) {
    throw DimensionError("patchify: image " + to_string(images.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const Index gy = height / patch;
  const Index gx = width / patch;
  const Index dim = channels * patch * patch;
  TensorF out(Shape{batch, gy * gx, dim});
  for (Index b = 0; b < batch; ++b)
    for (Index py = 0; py < gy; ++py)
      for (Index px = 0; px < gx; ++px) {
        float* dst = out.data().data() + (b * gy * gx + py * gx + px) * dim;
        for (Index c = 0; c < channels; ++c)
          for (Index y = 0; y < patch; ++y)
            for (Index x = 0; x < patch; ++x)
              *dst++ = images.at(b, c, py * patch + y, px * patch + x);
      }
  return out;
}

}  // namespace genq::nn
