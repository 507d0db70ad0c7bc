#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "swm/autograd.hpp"

using namespace swm;

// Naive quadruple-loop convolution, written independently of the im2col path.
static Tensor64 conv_reference(const Tensor64& x, const Tensor64& w, int sh, int sw, int ph,
                               int pw) {
  int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t ho = (h + 2 * ph - kh) / sh + 1, wo = (wd + 2 * pw - kw) / sw + 1;
  Tensor64 out({n, cout, ho, wo});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t co = 0; co < cout; ++co)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          double acc = 0;
          for (int64_t ci = 0; ci < cin; ++ci)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t iy = oy * sh + ky - ph, ix = ox * sw + kx - pw;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += x.at({i, ci, iy, ix}) * w.at({co, ci, ky, kx});
              }
          out.at({i, co, oy, ox}) = acc;
        }
  return out;
}

TEST_CASE("conv2d: ones kernel over ones input sums the window") {
  Tape64 tape;
  auto x = tape.constant(Tensor64({1, 1, 3, 3}, 1.0));
  auto w = tape.constant(Tensor64({1, 1, 3, 3}, 1.0));
  auto y = tape.conv2d(x, w, {});
  CHECK(tape.value(y).numel() == 1);
  CHECK(tape.value(y).data[0] == doctest::Approx(9.0));
}

TEST_CASE("conv2d: zero kernel annihilates") {
  Tape64 tape;
  Rng r(3);
  Tensor64 xv({2, 3, 6, 5});
  r.fill_normal(xv);
  auto x = tape.constant(xv);
  auto w = tape.constant(Tensor64({4, 3, 3, 3}, 0.0));
  auto y = tape.conv2d(x, w, {}, 1, 1, 1, 1);
  for (double v : tape.value(y).data) CHECK(v == 0.0);
}

TEST_CASE("conv2d matches the quadruple-loop reference") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng r(seed);
    Tensor64 xv({1, 2, 5, 5}), wv({3, 2, 3, 3}), bv({3});
    r.fill_normal(xv);
    r.fill_normal(wv);
    r.fill_normal(bv);
    for (auto [sh, sw, ph, pw] : {std::array<int, 4>{1, 1, 0, 0}, std::array<int, 4>{1, 1, 1, 1},
                                  std::array<int, 4>{2, 2, 1, 1}, std::array<int, 4>{2, 1, 0, 1}}) {
      Tape64 tape;
      auto x = tape.constant(xv);
      auto w = tape.constant(wv);
      auto b = tape.constant(bv);
      auto y = tape.conv2d(x, w, b, sh, sw, ph, pw);
      Tensor64 ref = conv_reference(xv, wv, sh, sw, ph, pw);
      REQUIRE(tape.value(y).shape == ref.shape);
      for (size_t i = 0; i < ref.data.size(); ++i) {
        double bias = bv.data[static_cast<size_t>(
            (i / static_cast<size_t>(ref.dim(2) * ref.dim(3))) % 3)];
        CHECK(tape.value(y).data[i] == doctest::Approx(ref.data[i] + bias).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("conv2d shape errors name the offending axis") {
  Tape64 tape;
  auto x = tape.constant(Tensor64({1, 5, 4, 4}, 1.0));
  auto w = tape.constant(Tensor64({2, 3, 3, 3}, 1.0));
  CHECK_THROWS_WITH_AS(tape.conv2d(x, w, {}),
                       doctest::Contains("channel axis 1"), ShapeError);
}

TEST_CASE("softmax: spec values and stability") {
  Tape64 tape;
  auto z = tape.softmax(tape.constant(Tensor64({4}, 0.0)), 0);
  for (double v : tape.value(z).data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  auto big = tape.softmax(tape.constant(Tensor64::from({2}, {1000.0, 0.0})), 0);
  CHECK(tape.value(big).data[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(tape.value(big).data[1] == doctest::Approx(0.0).epsilon(1e-9));

  auto s = tape.softmax(tape.constant(Tensor64::from({3}, {1.0, 2.0, 3.0})), 0);
  CHECK(std::abs(tape.value(s).data[0] - 0.09003) < 1e-5);
  CHECK(std::abs(tape.value(s).data[1] - 0.24473) < 1e-5);
  CHECK(std::abs(tape.value(s).data[2] - 0.66524) < 1e-5);
}

TEST_CASE("softmax: rows sum to 1 and shift invariance, any axis") {
  Rng r(17);
  Tensor64 xv({2, 3, 4});
  r.fill_normal(xv, 4.0);
  for (int axis = 0; axis < 3; ++axis) {
    Tape64 tape;
    auto y = tape.softmax(tape.constant(xv), axis);
    const auto& yv = tape.value(y);
    // sums along axis
    int64_t len = xv.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
    for (int i = axis + 1; i < 3; ++i) inner *= xv.dim(i);
    for (int64_t ot = 0; ot < outer; ++ot)
      for (int64_t in = 0; in < inner; ++in) {
        double sum = 0;
        for (int64_t l = 0; l < len; ++l) sum += yv.data[static_cast<size_t>((ot * len + l) * inner + in)];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
    Tensor64 shifted = xv;
    for (auto& v : shifted.data) v += 7.5;
    auto y2 = tape.softmax(tape.constant(shifted), axis);
    for (size_t i = 0; i < yv.data.size(); ++i)
      CHECK(tape.value(y2).data[i] == doctest::Approx(yv.data[i]).epsilon(1e-9));
  }
}

TEST_CASE("matmul matches the worked 2x2 example") {
  Tape64 tape;
  auto a = tape.constant(Tensor64::from({2, 2}, {1, 2, 3, 4}));
  auto b = tape.constant(Tensor64::from({2, 2}, {5, 6, 7, 8}));
  auto c = tape.matmul(a, b);
  const auto& cv = tape.value(c);
  CHECK(cv.data[0] == 19.0);
  CHECK(cv.data[1] == 22.0);
  CHECK(cv.data[2] == 43.0);
  CHECK(cv.data[3] == 50.0);
  CHECK_THROWS_WITH_AS(tape.matmul(a, tape.constant(Tensor64({3, 2}, 1.0))),
                       doctest::Contains("inner axis"), ShapeError);
}

// Direct two-step oracle: explicit softmax over QK^T/sqrt(d), then weighted sum.
static Tensor64 attention_reference(const Tensor64& q, const Tensor64& k, const Tensor64& v) {
  int64_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1), dv = v.dim(1);
  Tensor64 out({nq, dv});
  for (int64_t i = 0; i < nq; ++i) {
    std::vector<double> logits(static_cast<size_t>(nk));
    double mx = -1e300;
    for (int64_t j = 0; j < nk; ++j) {
      double dot = 0;
      for (int64_t e = 0; e < d; ++e) dot += q.at({i, e}) * k.at({j, e});
      logits[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, logits[static_cast<size_t>(j)]);
    }
    double z = 0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      z += l;
    }
    for (int64_t j = 0; j < nk; ++j)
      for (int64_t e = 0; e < dv; ++e) out.at({i, e}) += logits[static_cast<size_t>(j)] / z * v.at({j, e});
  }
  return out;
}

TEST_CASE("attention: single key returns the value row; identical keys average") {
  Tape64 tape;
  Rng r(5);
  Tensor64 qv({1, 2, 3}), kv({1, 1, 3}), vv({1, 1, 4});
  r.fill_normal(qv);
  r.fill_normal(kv);
  r.fill_normal(vv);
  auto out = attention(tape, tape.constant(qv), tape.constant(kv), tape.constant(vv));
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t e = 0; e < 4; ++e)
      CHECK(tape.value(out).at({0, i, e}) == doctest::Approx(vv.at({0, 0, e})).epsilon(1e-12));

  // 3 identical keys, distinct values -> mean of values
  Tensor64 k3({1, 3, 3}), v3({1, 3, 2});
  for (int64_t j = 0; j < 3; ++j)
    for (int64_t e = 0; e < 3; ++e) k3.at({0, j, e}) = kv.at({0, 0, e});
  r.fill_normal(v3);
  auto out2 = attention(tape, tape.constant(qv), tape.constant(k3), tape.constant(v3));
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t e = 0; e < 2; ++e) {
      double mean = (v3.at({0, 0, e}) + v3.at({0, 1, e}) + v3.at({0, 2, e})) / 3.0;
      CHECK(tape.value(out2).at({0, i, e}) == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("attention matches the two-step oracle") {
  for (uint64_t seed = 0; seed < 8; ++seed) {
    Rng r(100 + seed);
    Tensor64 qv({1, 2, 3}), kv({1, 4, 3}), vv({1, 4, 2});
    r.fill_normal(qv);
    r.fill_normal(kv);
    r.fill_normal(vv);
    Tape64 tape;
    auto out = attention(tape, tape.constant(qv), tape.constant(kv), tape.constant(vv));
    Tensor64 q2 = qv, k2 = kv, v2 = vv;
    q2.shape = {2, 3};
    k2.shape = {4, 3};
    v2.shape = {4, 2};
    Tensor64 ref = attention_reference(q2, k2, v2);
    for (size_t i = 0; i < ref.data.size(); ++i)
      CHECK(tape.value(out).data[i] == doctest::Approx(ref.data[i]).epsilon(1e-12));
  }
  Tape64 tape;
  CHECK_THROWS_AS(attention(tape, tape.constant(Tensor64({1, 2, 3}, 1.0)),
                            tape.constant(Tensor64({1, 2, 4}, 1.0)),
                            tape.constant(Tensor64({1, 2, 2}, 1.0))),
                  ShapeError);
}

TEST_CASE("group_norm normalizes per group before affine") {
  Rng r(9);
  Tensor64 xv({2, 8, 3, 3});
  r.fill_normal(xv, 3.0, 1.0);
  Tape64 tape;
  auto y = tape.group_norm(tape.constant(xv), tape.constant(Tensor64({8}, 1.0)),
                           tape.constant(Tensor64({8}, 0.0)), 4);
  const auto& yv = tape.value(y);
  int64_t cg = 2, sp = 9;
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t g = 0; g < 4; ++g) {
      double mean = 0, var = 0;
      for (int64_t c = 0; c < cg; ++c)
        for (int64_t e = 0; e < sp; ++e) mean += yv.at({n, g * cg + c, e / 3, e % 3});
      mean /= static_cast<double>(cg * sp);
      for (int64_t c = 0; c < cg; ++c)
        for (int64_t e = 0; e < sp; ++e) {
          double d = yv.at({n, g * cg + c, e / 3, e % 3}) - mean;
          var += d * d;
        }
      var /= static_cast<double>(cg * sp);
      CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
      CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
  CHECK_THROWS_WITH_AS(tape.group_norm(tape.constant(Tensor64({1, 6, 2, 2}, 1.0)),
                                       tape.constant(Tensor64({6}, 1.0)),
                                       tape.constant(Tensor64({6}, 0.0)), 4),
                       doctest::Contains("divisible"), ShapeError);
}

TEST_CASE("backward: worked examples") {
  {
    Tape64 tape;
    auto p = tape.leaf(Tensor64({3, 2}, 2.5));
    tape.backward(tape.sum_all(p));
    for (double g : tape.grad(p).data) CHECK(g == 1.0);
  }
  {
    Tape64 tape;
    auto p = tape.leaf(Tensor64::from({2}, {1.0, 2.0}));
    tape.backward(tape.sum_all(tape.mul(p, p)));
    CHECK(tape.grad(p).data[0] == doctest::Approx(2.0));
    CHECK(tape.grad(p).data[1] == doctest::Approx(4.0));
  }
  {
    // grad through a no-grad constant stays empty, result zeros
    Tape64 tape;
    auto c = tape.constant(Tensor64({2}, 3.0));
    auto p = tape.leaf(Tensor64({2}, 1.0));
    tape.backward(tape.sum_all(tape.mul(c, p)));
    CHECK(tape.grad(c).data[0] == 0.0);
    CHECK(tape.grad(p).data[0] == doctest::Approx(3.0));
  }
  {
    Tape64 tape;
    auto p = tape.leaf(Tensor64({2, 2}, 1.0));
    CHECK_THROWS_AS(tape.backward(p), ShapeError);  // non-scalar target
  }
}

TEST_CASE("finite checks abort on NaN") {
  Tape64 tape;
  Tensor64 bad({2}, 0.0);
  bad.data[1] = std::nan("");
  CHECK_THROWS_AS(tape.constant(bad), NumericError);
}

TEST_CASE("kernel determinism: same inputs give bit-identical outputs") {
  Rng r(21);
  Tensor64 xv({1, 3, 6, 6}), wv({4, 3, 3, 3});
  r.fill_normal(xv);
  r.fill_normal(wv);
  auto run = [&]() {
    Tape64 tape;
    auto y = tape.conv2d(tape.constant(xv), tape.constant(wv), {}, 1, 1, 1, 1);
    auto s = tape.softmax(tape.reshape(y, {4, 36}), 1);
    return tape.value(s).data;
  };
  auto a = run(), b = run();
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("shape ops: reshape, permute, concat, slice round-trips") {
  Rng r(31);
  Tensor64 xv({2, 3, 4});
  r.fill_normal(xv);
  Tape64 tape;
  auto x = tape.constant(xv);
  auto p = tape.permute(x, {2, 0, 1});
  CHECK(tape.value(p).shape == std::vector<int64_t>{4, 2, 3});
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 3; ++j)
      for (int64_t k = 0; k < 4; ++k)
        CHECK(tape.value(p).at({k, i, j}) == xv.at({i, j, k}));
  auto back = tape.permute(p, {1, 2, 0});
  for (size_t i = 0; i < xv.data.size(); ++i) CHECK(tape.value(back).data[i] == xv.data[i]);

  auto a = tape.slice(x, 1, 0, 2), b = tape.slice(x, 1, 2, 1);
  auto cat = tape.concat({a, b}, 1);
  for (size_t i = 0; i < xv.data.size(); ++i) CHECK(tape.value(cat).data[i] == xv.data[i]);
  CHECK_THROWS_WITH_AS(tape.slice(x, 1, 2, 5), doctest::Contains("axis 1"), ShapeError);
  CHECK_THROWS_AS(tape.reshape(x, {5, 5}), ShapeError);
}

TEST_CASE("upsample/avgpool/repeat/bias broadcast semantics") {
  Tape64 tape;
  auto x = tape.constant(Tensor64::from({1, 1, 2, 2}, {1, 2, 3, 4}));
  auto up = tape.upsample_nn(x, 2);
  CHECK(tape.value(up).at({0, 0, 1, 1}) == 1.0);
  CHECK(tape.value(up).at({0, 0, 2, 3}) == 4.0);
  auto down = tape.avgpool(up, 2);
  for (size_t i = 0; i < 4; ++i) CHECK(tape.value(down).data[i] == tape.value(x).data[i]);

  auto rep = tape.repeat_leading(tape.constant(Tensor64::from({2, 2}, {1, 2, 3, 4})), 3);
  CHECK(tape.value(rep).shape == std::vector<int64_t>{6, 2});
  CHECK(tape.value(rep).at({2, 0}) == 1.0);
  CHECK(tape.value(rep).at({3, 1}) == 4.0);

  auto t = tape.constant(Tensor64::from({3, 2}, {0, 1, 10, 11, 20, 21}));
  auto rows = tape.rows_lookup(t, {2, 0});
  CHECK(tape.value(rows).at({0, 1}) == 21.0);
  CHECK(tape.value(rows).at({1, 0}) == 0.0);
  CHECK_THROWS_AS(tape.rows_lookup(t, {3}), ShapeError);
}
