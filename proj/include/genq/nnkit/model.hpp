// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "genq/nnkit/ops.hpp"

namespace genq::nn {

enum class Architecture : std::uint8_t { tiny_cnn = 0, tiny_vit = 1 };

std::string_view to_string(Architecture arch);
Architecture parse_architecture(std::string_view name);

/// Interception points used by the quantizer: every conv/linear weight and
/// every activation site passes through these before use.
class ForwardHooks {
 public:
  virtual ~ForwardHooks() = default;
  virtual Var<float> weight(Tape<float>& tape, std::size_t site, const Var<float>& w) = 0;
  virtual Var<float> activation(Tape<float>& tape, std::size_t site, const Var<float>& x) = 0;
};

struct ForwardContext {
  BatchNormMode mode = BatchNormMode::eval;
  bool update_running = false;
  ForwardHooks* hooks = nullptr;
  /// Batch statistics of every BN input, in layer order.
  std::vector<BatchStats>* bn_observed = nullptr;
  /// Raw BN inputs, in layer order.
  std::vector<TensorF>* bn_inputs = nullptr;
  /// Output of the final transformer block without the class token [B x P x D].
  TensorF* patch_features = nullptr;
  /// Attention probabilities of every transformer block [(B*H) x T x T].
  std::vector<TensorF>* attention = nullptr;
};

struct WeightSite {
  std::size_t parameter;  // index into Model::parameters()
  std::size_t block;
};

struct ActivationSite {
  std::string name;
  std::size_t block;
  bool non_negative;
};

/// The two desk-scale classifiers: a BatchNorm CNN and a LayerNorm ViT.
///
/// Parameters live in a flat, ordered list; forward passes are composed of
/// blocks so that the quantizer can reconstruct one block at a time.
class Model {
 public:
  static constexpr Index kImageSize = 32;
  static constexpr Index kChannels = 3;
  static constexpr Index kClasses = 10;

  static Model tiny_cnn(std::uint64_t seed);
  static Model tiny_vit(std::uint64_t seed);
  static Model create(Architecture arch, std::uint64_t seed);

  [[nodiscard]] Architecture architecture() const noexcept { return arch_; }
  [[nodiscard]] Index num_classes() const noexcept { return kClasses; }

  [[nodiscard]] std::vector<Parameter<float>>& parameters() noexcept { return params_; }
  [[nodiscard]] const std::vector<Parameter<float>>& parameters() const noexcept { return params_; }
  [[nodiscard]] Parameter<float>& parameter(std::string_view name);
  [[nodiscard]] const Parameter<float>& parameter(std::string_view name) const;

  [[nodiscard]] std::vector<BatchNormState<float>>& bn_layers() noexcept { return bn_; }
  [[nodiscard]] const std::vector<BatchNormState<float>>& bn_layers() const noexcept { return bn_; }
  [[nodiscard]] bool has_batch_norm() const noexcept { return !bn_.empty(); }

  [[nodiscard]] std::size_t num_blocks() const noexcept;
  [[nodiscard]] const std::vector<WeightSite>& weight_sites() const noexcept { return weight_sites_; }
  [[nodiscard]] const std::vector<ActivationSite>& activation_sites() const noexcept { return act_sites_; }

  /// images [B x 3 x 32 x 32] -> logits [B x 10].
  Var<float> forward(Tape<float>& tape, const TensorF& images, const ForwardContext& ctx = {});

  /// Runs one block. Block 0 consumes the images; the last block emits logits.
  Var<float> forward_block(Tape<float>& tape, std::size_t block, const Var<float>& input, const ForwardContext& ctx);

  /// Eval-mode logits computed in chunks without recording gradients.
  [[nodiscard]] TensorF logits(const TensorF& images, Index batch_size = 128) const;

  void set_trainable(bool trainable);

 private:
  Model() = default;

  std::size_t add_param(std::string name, TensorF value);
  Var<float> param(Tape<float>& tape, std::string_view name);
  Var<float> weight(Tape<float>& tape, std::string_view name, const ForwardContext& ctx);
  Var<float> act(Tape<float>& tape, std::size_t site, const Var<float>& x, const ForwardContext& ctx);

  Var<float> cnn_block(Tape<float>& tape, std::size_t block, const Var<float>& input, const ForwardContext& ctx);
  Var<float> vit_block(Tape<float>& tape, std::size_t block, const Var<float>& input, const ForwardContext& ctx);

  Architecture arch_ = Architecture::tiny_cnn;
  std::vector<Parameter<float>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::vector<BatchNormState<float>> bn_;
  std::vector<WeightSite> weight_sites_;
  std::map<std::size_t, std::size_t> site_of_param_;
  std::vector<ActivationSite> act_sites_;
};

/// [B x 3 x 32 x 32] -> [B x 64 x 48] non-overlapping 4x4 patches (c, y, x order).
TensorF patchify(const TensorF& images, Index patch);

}  // namespace genq::nn
