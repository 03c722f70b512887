// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>

#include "gradcheck.hpp"
#include "primitive_checks.hpp"
#include "vaguide/crc32c.hpp"
#include "vaguide/error.hpp"
#include "vaguide/kernels.hpp"

using namespace vaguide;
using namespace vaguide::diff;
using gradcheck::Fn;
using gradcheck::random_tensor;
using gradcheck::weighted_sum;

namespace {

constexpr int kSeeds = 20;

}  // namespace

TEST_CASE("primitive examples") {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>({3}, {-1, 0, 2}));
  CHECK(relu(x).value() == std::vector<double>{0, 0, 2});

  auto c = tape.constant(Tensor<double>({5}, 3.25));
  for (double v : softmax(c).value()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

  auto m = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto n = tape.constant(Tensor<double>({2, 1}, {5, 6}));
  CHECK(matmul(m, n).value() == std::vector<double>{17, 39});
  CHECK(transpose(m).value() == std::vector<double>{1, 3, 2, 4});
  CHECK(sum(m, 0).value() == std::vector<double>{4, 6});
  CHECK(mean(m, 1).value() == std::vector<double>{1.5, 3.5});
  auto bias = tape.constant(Tensor<double>({2}, {10, 20}));
  CHECK(add(m, bias).value() == std::vector<double>{11, 22, 13, 24});
  auto parts = split(m, 1, {1, 1});
  CHECK(parts[1].value() == std::vector<double>{2, 4});
  std::array<DiffArray<double>, 2> both{parts[1], parts[0]};
  CHECK(concat<double>(both, 1).value() == std::vector<double>{2, 1, 4, 3});
  CHECK(embedding_lookup(m, {1, 1, 0}).value() == std::vector<double>{3, 4, 3, 4, 1, 2});

  auto p = tape.constant(Tensor<double>({3}, {0.0, 0.5, 2.0}));
  auto q = tape.constant(Tensor<double>({3}, {0.0, 0.0, 0.0}));
  CHECK(smooth_l1(p, q).value() == std::vector<double>{0.0, 0.125, 1.5});
  CHECK(gelu(tape.constant(Tensor<double>({1}, {1.0}))).value()[0] == doctest::Approx(0.8413447460685429));
}

TEST_CASE("shape errors name the op and both shapes") {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({4, 5}));
  try {
    (void)matmul(a, b);
    FAIL("expected error");
  } catch (const Error &e) {
    CHECK(e.code() == ErrorCode::shape);
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 5]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)add(a, b), Error);
  CHECK_THROWS_AS((void)reshape(a, {5}), Error);
  CHECK_THROWS_AS((void)split(a, 1, {1, 1}), Error);
  CHECK_THROWS_AS((void)layer_norm(a, a, a, 1e-5), Error);
  auto g = tape.constant(Tensor<double>({3}, 1.0));
  CHECK_THROWS_AS((void)layer_norm(a, g, g, 0.0), Error);
}

TEST_CASE("backward examples and scalar requirement") {
  Tape<double> tape;
  auto x = tape.leaf(random_tensor({4, 3}, 1), true);
  tape.backward(sum_all(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  Tape<double> tape2;
  auto y = tape2.leaf(random_tensor({7}, 2), true);
  tape2.backward(scale(sum_all(mul(y, y)), 0.5));
  CHECK(y.grad() == y.value());

  CHECK_THROWS_AS(tape2.backward(y), Error);
}

TEST_CASE("parameter gradients accumulate only for trainable leaves") {
  Parameter<double> w{"w", random_tensor({3, 2}, 3), Tensor<double>({3, 2}), true};
  Parameter<double> frozen{"f", random_tensor({2}, 4), Tensor<double>({2}), false};
  for (int pass = 0; pass < 2; ++pass) {
    Tape<double> tape;
    auto x = tape.constant(random_tensor({5, 3}, 5));
    auto y = add(matmul(x, tape.param(w)), tape.param(frozen));
    tape.backward(sum_all(y));
  }
  Tape<double> once;
  auto x = once.constant(random_tensor({5, 3}, 5));
  auto wl = once.leaf(w.value, true);
  once.backward(sum_all(matmul(x, wl)));
  for (std::size_t i = 0; i < w.grad.size(); ++i) CHECK(w.grad.data[i] == doctest::Approx(2 * wl.grad()[i]));
  for (double g : frozen.grad.data) CHECK(g == 0.0);
}

TEST_CASE("matmul gradient meets 1e-6 on 3x4 by 4x2") {
  for (int s = 0; s < kSeeds; ++s) {
    Fn f = [s](Tape<double> &t, const std::vector<DiffArray<double>> &x) { return weighted_sum(t, matmul(x[0], x[1]), s); };
    CHECK(gradcheck::max_rel_error(f, {random_tensor({3, 4}, 10 + s), random_tensor({4, 2}, 50 + s)}) < 1e-6);
  }
}

TEST_CASE("finite-difference checks for every primitive") {
  for (int s = 0; s < kSeeds; ++s)
    for (const auto &e : gradcheck::primitive_errors(s)) CHECK_MESSAGE(e.error < 1e-4, e.name << " seed " << s);
}

TEST_CASE("tape replay yields identical gradients") {
  auto run = [] {
    Tape<double> tape;
    auto x = tape.leaf(random_tensor({4, 6}, 9), true);
    auto w = tape.leaf(random_tensor({6, 6}, 10), true);
    auto g = tape.constant(Tensor<double>({6}, 1.0));
    auto y = softmax(layer_norm(gelu(matmul(x, w)), g, g, 1e-5));
    tape.backward(weighted_sum(tape, y, 3));
    return std::pair{x.grad(), w.grad()};
  };
  CHECK(run() == run());
}

TEST_CASE("grad-disabled tape records no gradients") {
  Tape<double> tape(false);
  auto x = tape.leaf(random_tensor({3}, 1), true);
  auto y = sum_all(mul(x, x));
  CHECK_FALSE(y.requires_grad());
  tape.backward(y);
  CHECK(x.grad().empty());
}

TEST_CASE("init_trunc_normal") {
  const double sd = 0.02;
  auto t = init_trunc_normal<double>({100000}, sd, 42);
  double sum = 0;
  for (double v : t.data) {
    CHECK(std::abs(v) <= 2 * sd);
    sum += v;
  }
  CHECK(std::abs(sum / t.size()) < 0.01 * sd);
  CHECK(init_trunc_normal<double>({100000}, sd, 42) == t);
  CHECK_FALSE(init_trunc_normal<double>({100}, sd, 43) == init_trunc_normal<double>({100}, sd, 42));
  CHECK_THROWS_AS(init_trunc_normal<float>({3}, 0.0, 1), Error);
}

TEST_CASE("array serialization round trip") {
  auto t = init_trunc_normal<float>({3, 5, 2}, 1.0, 7);
  io::ByteWriter w;
  write_array(w, t);
  CHECK(w.size() == 4 + 3 * 4 + 30 * 4);
  io::ByteReader r(w.data(), "array");
  CHECK(read_array<float>(r) == t);
}

TEST_CASE("parallel gemm is bit-identical to the serial reference") {
  for (auto [m, n, k] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 5, 3}, {64, 96, 80}, {130, 33, 257}, {333, 64, 64}}) {
    auto a = random_tensor({m, k}, m * 3 + k).cast<float>();
    auto b = random_tensor({k, n}, n * 5 + k).cast<float>();
    std::vector<float> c1(m * n, 0.5f), c2(m * n, 0.5f);
    kernels::gemm(m, n, k, a.data.data(), b.data.data(), c1.data(), true);
    kernels::serial::gemm(m, n, k, a.data.data(), b.data.data(), c2.data(), true);
    CHECK(c1 == c2);
    // And against a naive triple loop in double.
    double worst = 0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.5;
        for (std::size_t p = 0; p < k; ++p) acc += double(a.data[i * k + p]) * b.data[p * n + j];
        worst = std::max(worst, std::abs(acc - c1[i * n + j]));
      }
    CHECK(worst < 1e-4 * std::max<std::size_t>(1, k));
  }
}

TEST_CASE("crc32c check value") {
  const std::string s = "123456789";
  CHECK(crc32c(std::as_bytes(std::span(s.data(), s.size()))) == 0xE3069283u);
}

TEST_CASE("gradient checker rejects a wrong backward") {
  // y = x^2 recorded with a deliberately wrong derivative of x.
  Fn f = [](Tape<double> &t, const std::vector<DiffArray<double>> &x) {
    std::vector<double> v = x[0].value();
    for (auto &e : v) e *= e;
    const int ix = x[0].id(), self = static_cast<int>(t.size());
    auto y = t.push(x[0].shape(), v, {x[0]}, [ix, self](Tape<double> &tp) {
      auto &dx = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += tp.node(self).grad[i] * tp.node(ix).value[i];
    });
    return sum_all(y);
  };
  CHECK(gradcheck::max_rel_error(f, {random_tensor({4}, 1)}) > 0.4);
}
