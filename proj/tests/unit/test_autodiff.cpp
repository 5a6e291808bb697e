// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "op_catalog.hpp"

using namespace genq;
using nn::Shape;
using nn::TensorD;
using nn::TensorF;

TEST_CASE("matmul examples") {
  nn::Tape<float> tape;
  const auto id = tape.constant(TensorF(Shape{2, 2}, {1, 0, 0, 1}));
  const auto b = tape.constant(TensorF(Shape{2, 2}, {5, 6, 7, 8}));
  CHECK(nn::matmul(id, b).value().values() == std::vector<float>{5, 6, 7, 8});

  const auto zeros = tape.constant(TensorF::zeros({2, 3}));
  const auto any = tape.constant(TensorF(Shape{3, 4}, std::vector<float>(12, 3.5F)));
  const auto z = nn::matmul(zeros, any);
  CHECK(z.shape() == Shape{2, 4});
  CHECK(z.value().vector().cwiseAbs().maxCoeff() == 0.0F);

  // Triple-loop oracle.
  const std::vector<float> lhs{1, 2, 3, 4};
  const std::vector<float> rhs{5, 6, 7, 8};
  std::vector<float> expected(4, 0.0F);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 2; ++k) expected[i * 2 + j] += lhs[i * 2 + k] * rhs[k * 2 + j];
  const auto c = nn::matmul(tape.constant(TensorF(Shape{2, 2}, lhs)), tape.constant(TensorF(Shape{2, 2}, rhs)));
  CHECK(c.value().values() == expected);
  CHECK(expected == std::vector<float>{19, 22, 43, 50});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  nn::Tape<float> tape;
  const auto a = tape.constant(TensorF::zeros({2, 3}));
  const auto b = tape.constant(TensorF::zeros({4, 2}));
  try {
    (void)nn::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("backward examples") {
  nn::Tape<double> tape;
  nn::Parameter<double> w("w", TensorD(Shape{3}, {0.3, -2.0, 7.0}));
  nn::Parameter<double> unused("unused", TensorD(Shape{2}, {1.0, 1.0}));
  const auto wv = tape.parameter(w);
  tape.backward(nn::sum(wv));
  CHECK(w.grad.values() == std::vector<double>{1.0, 1.0, 1.0});
  CHECK(unused.grad.values() == std::vector<double>{0.0, 0.0});

  nn::Tape<double> t2;
  const auto x = t2.variable(TensorD(Shape{2}, {1.0, -2.0}));
  t2.backward(nn::sum(nn::mul(x, x)));
  const TensorD g = t2.grad(x);
  // Finite-difference oracle with h = 1e-3.
  const double h = 1e-3;
  for (int i = 0; i < 2; ++i) {
    std::vector<double> p{1.0, -2.0};
    std::vector<double> m{1.0, -2.0};
    p[i] += h;
    m[i] -= h;
    const double fd = ((p[0] * p[0] + p[1] * p[1]) - (m[0] * m[0] + m[1] * m[1])) / (2 * h);
    CHECK(g[i] == doctest::Approx(fd).epsilon(1e-9));
  }
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(-4.0));
}

TEST_CASE("backward rejects a non-scalar loss") {
  nn::Tape<double> tape;
  const auto x = tape.variable(TensorD(Shape{2}, {1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("backward visits nodes in exact reverse execution order") {
  nn::Tape<double> tape;
  const auto x = tape.variable(TensorD(Shape{2}, {1.0, 2.0}));
  const auto a = nn::scale(x, 2.0);
  const auto b = nn::mul(a, x);
  const auto c = nn::add(b, a);
  const auto loss = nn::sum(c);
  tape.backward(loss);
  const std::vector<std::size_t> expected{loss.id(), c.id(), b.id(), a.id(), x.id()};
  CHECK(tape.last_visit_order() == expected);
}

TEST_CASE("every op matches central finite differences") {
  Rng rng(1234);
  for (const auto& op : testing::op_catalog()) {
    CAPTURE(op.name);
    std::size_t failures = 0;
    for (int probe = 0; probe < 20; ++probe) {
      const auto inputs = op.inputs(rng);
      failures += testing::gradcheck(op.build, inputs, rng).failures;
    }
    CHECK(failures == 0);
  }
}

TEST_CASE("softmax rows sum to one and cross-entropy is non-negative") {
  Rng rng(5);
  nn::Tape<float> tape;
  TensorF logits(Shape{8, 10});
  for (auto& v : logits.data()) v = static_cast<float>(rng.uniform(-20, 20));
  const auto p = nn::softmax(tape.constant(logits));
  for (int r = 0; r < 8; ++r) {
    CHECK(std::abs(p.value().matrix(8, 10).row(r).sum() - 1.0F) <= 1e-6F);
  }
  const std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7};
  CHECK(nn::cross_entropy(tape.constant(logits), std::span<const int>(labels)).value()[0] >= 0.0F);
  const std::vector<int> bad{0, 1, 2, 3, 4, 5, 6, 10};
  CHECK_THROWS_AS(nn::cross_entropy(tape.constant(logits), std::span<const int>(bad)), ContractError);
}

TEST_CASE("batch_norm examples") {
  nn::Tape<double> tape;
  const auto ones = tape.constant(TensorD::full({1}, 1.0));
  const auto zero = tape.constant(TensorD::zeros({1}));

  SUBCASE("eval mode centers a constant channel") {
    nn::BatchNormState<double> state(1);
    state.running_mean[0] = 4.0;
    state.running_var[0] = 1.0;
    const auto x = tape.constant(TensorD::full({2, 1, 3, 3}, 4.0));
    const auto y = nn::batch_norm(x, ones, zero, state, nn::BatchNormMode::eval, false);
    CHECK(y.value().vector().cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("train mode uses batch statistics") {
    nn::BatchNormState<double> state(1);
    const auto x = tape.constant(TensorD(Shape{2, 1, 1, 1}, {1.0, 3.0}));
    nn::BatchStats observed;
    const auto y = nn::batch_norm(x, ones, zero, state, nn::BatchNormMode::train, false, &observed);
    CHECK(observed.mean[0] == doctest::Approx(2.0));
    CHECK(observed.stddev[0] == doctest::Approx(1.0));
    CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(state.running_mean[0] == 0.0);
    CHECK(state.running_var[0] == 1.0);
  }
  SUBCASE("train mode is pure when updates are disabled") {
    nn::BatchNormState<double> state(1);
    const auto x = tape.constant(TensorD(Shape{2, 1, 2, 1}, {1.0, 3.0, -2.0, 0.5}));
    const auto y1 = nn::batch_norm(x, ones, zero, state, nn::BatchNormMode::train, false);
    const auto y2 = nn::batch_norm(x, ones, zero, state, nn::BatchNormMode::train, false);
    CHECK(y1.value() == y2.value());
  }
  SUBCASE("running statistics follow momentum with unbiased variance") {
    nn::BatchNormState<double> state(1);
    const auto x = tape.constant(TensorD(Shape{2, 1, 1, 1}, {1.0, 3.0}));
    (void)nn::batch_norm(x, ones, zero, state, nn::BatchNormMode::train, true);
    CHECK(state.running_mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.0));
    CHECK(state.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0));
  }
  SUBCASE("zero variance is guarded and one value per channel is rejected in train mode") {
    nn::BatchNormState<double> state(1);
    const auto flat = tape.constant(TensorD::full({2, 1, 2, 2}, 3.0));
    const auto y = nn::batch_norm(flat, ones, zero, state, nn::BatchNormMode::train, false);
    CHECK(y.value().vector().allFinite());
    const auto single = tape.constant(TensorD::full({1, 1, 1, 1}, 3.0));
    CHECK_THROWS_AS(nn::batch_norm(single, ones, zero, state, nn::BatchNormMode::train, false), ContractError);
  }
}

TEST_CASE("batch_norm train output is standardized per channel") {
  Rng rng(99);
  nn::Tape<float> tape;
  TensorF x(Shape{8, 3, 4, 4});
  for (auto& v : x.data()) v = static_cast<float>(rng.normal(2.0, 3.0));
  nn::BatchNormState<float> state(3);
  const auto y = nn::batch_norm(tape.constant(x), tape.constant(TensorF::full({3}, 1.0F)),
                                tape.constant(TensorF::zeros({3})), state, nn::BatchNormMode::train, false);
  const nn::BatchStats s = nn::channel_stats(y.value());
  for (int c = 0; c < 3; ++c) {
    CHECK(std::abs(s.mean[c]) <= 1e-5);
    CHECK(std::abs(s.stddev[c] * s.stddev[c] - 1.0) <= 1e-4);
  }
}

TEST_CASE("parameters accumulate across repeated use") {
  nn::Parameter<double> w("w", TensorD(Shape{2}, {1.0, 2.0}));
  nn::Tape<double> tape;
  const auto a = tape.parameter(w);
  const auto b = tape.parameter(w);
  tape.backward(nn::sum(nn::add(a, b)));
  CHECK(w.grad.values() == std::vector<double>{2.0, 2.0});
  w.trainable = false;
  w.zero_grad();
  nn::Tape<double> t2;
  const auto c = t2.parameter(w);
  CHECK_FALSE(c.requires_grad());
}
