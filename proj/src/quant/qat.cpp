// SPDX-License-Identifier: Apache-2.0
#include "genq/quant/qat.hpp"

#include <cmath>
#include <numeric>

#include "genq/common/rng.hpp"
#include "genq/nnkit/ops.hpp"
#include "genq/nnkit/train.hpp"

namespace genq::quant {

QatResult qat_finetune(QuantizedModel qm, const data::Dataset& data, const QatOptions& options) {
  for (const auto& q : qm.weights) {
    if (q.stage != Stage::reconstructed) {
      throw StageError(std::string("QAT requires every weight to be reconstructed, found stage ") +
                       to_string(q.stage));
    }
  }
  data.validate();
  const auto& sites = qm.base.weight_sites();
  for (std::size_t s = 0; s < sites.size(); ++s) {
    qm.weights[s].u = TensorF::zeros(qm.base.parameters()[sites[s].parameter].value.shape());
    qm.weights[s].stage = Stage::qat_finetuned;
  }
  QatResult result{qm, {}};
  if (options.epochs <= 0) {
    return result;
  }

  nn::Model model = qm.base;
  model.set_trainable(false);
  const nn::Index n = data.size();
  const nn::Index batch = std::min<nn::Index>(std::max(2, options.batch_size), n);
  const std::size_t steps_per_epoch = static_cast<std::size_t>(n / batch);
  const std::size_t total = steps_per_epoch * static_cast<std::size_t>(options.epochs);
  std::vector<TensorF> u_vel(sites.size());
  std::vector<float> s_vel(qm.activations.size(), 0.0F);
  QuantizedModel& cur = result.model;
  const Rng shuffle = Rng(options.seed).split("qat");
  std::size_t step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<nn::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng = shuffle.split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::span<const nn::Index> rows(order.data() + b * static_cast<std::size_t>(batch),
                                            static_cast<std::size_t>(batch));
      std::vector<int> labels;
      for (const auto r : rows) labels.push_back(data.labels[static_cast<std::size_t>(r)]);

      nn::Tape<float> tape;
      QuantHooks hooks(cur, false, true);
      std::vector<Var<float>> u_vars;
      for (std::size_t s = 0; s < sites.size(); ++s) {
        u_vars.push_back(tape.variable(*cur.weights[s].u));
        const Var<float> w = tape.constant(model.parameters()[sites[s].parameter].value);
        hooks.weight_override.emplace(s, qat_weight(w, u_vars.back(), cur.weights[s], false));
      }
      std::vector<Var<float>> s_vars;
      for (std::size_t a = 0; a < cur.activations.size(); ++a) {
        s_vars.push_back(tape.variable(TensorF::scalar(cur.activations[a].step)));
        hooks.act_steps.emplace(a, s_vars.back());
      }
      nn::ForwardContext ctx;
      ctx.hooks = &hooks;
      const Var<float> logits = model.forward(tape, data.images.gather(rows), ctx);
      const Var<float> loss = nn::cross_entropy(logits, labels);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw NumericError("QAT loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(b));
      }
      loss_sum += lv;
      tape.backward(loss);

      const double lr = nn::cosine_lr(options.lr, step, total);
      for (std::size_t s = 0; s < sites.size(); ++s) {
        const TensorF g = tape.grad(u_vars[s]);
        if (u_vel[s].empty()) u_vel[s] = TensorF::zeros(g.shape());
        u_vel[s].vector() = static_cast<float>(options.momentum) * u_vel[s].vector() + g.vector();
        cur.weights[s].u->vector() -= static_cast<float>(lr) * u_vel[s].vector();
      }
      for (std::size_t a = 0; a < cur.activations.size(); ++a) {
        const float g = tape.grad(s_vars[a])[0];
        s_vel[a] = static_cast<float>(options.momentum) * s_vel[a] + g;
        const float next = cur.activations[a].step - static_cast<float>(lr) * s_vel[a];
        cur.activations[a].step = std::max(next, 1e-6F);
      }
    }
    result.epoch_loss.push_back(steps_per_epoch ? loss_sum / static_cast<double>(steps_per_epoch) : 0.0);
  }
  return result;
}

}  // namespace genq::quant
