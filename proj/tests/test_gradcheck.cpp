#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "swm/gradcheck.hpp"

using namespace swm;
using Var = Tape64::Var;

namespace {

constexpr int kSeeds = 20;
constexpr double kTol = 1e-4;

Tensor64 randn(Rng& r, std::vector<int64_t> dims, double sd = 1.0) {
  Tensor64 t(std::move(dims));
  r.fill_normal(t, sd);
  return t;
}

// Reduce any output to a scalar through fixed random weights so every output
// element influences the loss.
Var pool(Tape64& t, Var y, uint64_t seed) {
  Rng r(seed ^ 0xABCDEF);
  Tensor64 w(t.value(y).shape);
  r.fill_normal(w);
  return t.sum_all(t.mul(y, t.constant(w)));
}

}  // namespace

TEST_CASE("gradcheck: elementwise ops") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng r(s);
    auto a = randn(r, {3, 4});
    auto b = randn(r, {3, 4});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            auto x = t.add(v[0], v[1]);
            auto y = t.mul(t.sub(x, v[1]), v[0]);
            auto z = t.add_scalar(t.scale(y, 0.7), 0.3);
            return pool(t, z, s);
          }, {a, b}) < kTol);
  }
}

TEST_CASE("gradcheck: silu and tanh") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng r(40 + s);
    auto a = randn(r, {2, 5});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.silu(v[0]), s);
          }, {a}) < kTol);
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.tanh_act(v[0]), s);
          }, {a}) < kTol);
  }
}

TEST_CASE("gradcheck: matmul, bmm, linear") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng r(80 + s);
    auto a = randn(r, {3, 4});
    auto b = randn(r, {4, 2});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.matmul(v[0], v[1]), s);
          }, {a, b}) < kTol);
    auto ba = randn(r, {2, 3, 4});
    auto bb = randn(r, {2, 4, 2});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.bmm(v[0], v[1]), s);
          }, {ba, bb}) < kTol);
    auto x = randn(r, {3, 4});
    auto w = randn(r, {4, 5});
    auto bias = randn(r, {5});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.linear(v[0], v[1], v[2]), s);
          }, {x, w, bias}) < kTol);
  }
}

TEST_CASE("gradcheck: conv2d with stride and padding") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng r(120 + s);
    auto x = randn(r, {2, 3, 5, 5});
    auto w = randn(r, {4, 3, 3, 3});
    auto b = randn(r, {4});
    int sh = 1 + static_cast<int>(s % 2);
    int ph = static_cast<int>((s / 2) % 2);
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.conv2d(v[0], v[1], v[2], sh, 1, ph, 1), s);
          }, {x, w, b}) < kTol);
  }
}

TEST_CASE("gradcheck: softmax along each axis") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng r(160 + s);
    auto x = randn(r, {2, 3, 4}, 2.0);
    int axis = static_cast<int>(s % 3);
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.softmax(v[0], axis), s);
          }, {x}) < kTol);
  }
}

TEST_CASE("gradcheck: group_norm") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng r(200 + s);
    auto x = randn(r, {2, 6, 3, 3}, 2.0);
    auto gamma = randn(r, {6});
    auto beta = randn(r, {6});
    int groups = (s % 2) ? 3 : 2;
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.group_norm(v[0], v[1], v[2], groups), s);
          }, {x, gamma, beta}) < kTol);
  }
}

TEST_CASE("gradcheck: attention composite") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng r(240 + s);
    auto q = randn(r, {2, 3, 4});
    auto k = randn(r, {2, 5, 4});
    auto v = randn(r, {2, 5, 3});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& vars) {
            return pool(t, attention(t, vars[0], vars[1], vars[2]), s);
          }, {q, k, v}) < kTol);
  }
}

TEST_CASE("gradcheck: reductions and mse") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng r(280 + s);
    auto a = randn(r, {3, 3});
    auto b = randn(r, {3, 3});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return t.mse(v[0], v[1]);
          }, {a, b}) < kTol);
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return t.scale(t.mean_all(t.mul(v[0], v[0])), 3.0);
          }, {a}) < kTol);
  }
}

TEST_CASE("gradcheck: shape and broadcast ops") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng r(320 + s);
    auto x = randn(r, {2, 3, 4});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            auto p = t.permute(v[0], {2, 0, 1});
            auto rs = t.reshape(p, {4, 6});
            auto sl = t.slice(rs, 0, 1, 2);
            return pool(t, sl, s);
          }, {x}) < kTol);

    auto img = randn(r, {1, 2, 2, 2});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.avgpool(t.upsample_nn(v[0], 2), 2), s);
          }, {img}) < kTol);

    auto xa = randn(r, {2, 3, 4});
    auto xb = randn(r, {2, 1, 4});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.concat({v[0], v[1]}, 1), s);
          }, {xa, xb}) < kTol);

    auto h = randn(r, {2, 3, 4});
    auto pos = randn(r, {3, 4});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.bias_rows(v[0], v[1]), s);
          }, {h, pos}) < kTol);

    auto feat = randn(r, {2, 3, 2, 2});
    auto emb = randn(r, {2, 3});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.add_nc(v[0], v[1]), s);
          }, {feat, emb}) < kTol);

    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.mul_nc(v[0], v[1]), s);
          }, {feat, emb}) < kTol);

    auto mask = randn(r, {2, 1, 2, 2});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.mul_chan_bcast(v[0], v[1]), s);
          }, {feat, mask}) < kTol);

    auto table = randn(r, {5, 3});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.rows_lookup(v[0], {1, 4, 1}), s);
          }, {table}) < kTol);

    auto rows = randn(r, {2, 3});
    CHECK(gradcheck([&](Tape64& t, const std::vector<Var>& v) {
            return pool(t, t.repeat_leading(v[0], 3), s);
          }, {rows}) < kTol);
  }
}
