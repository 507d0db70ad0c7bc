#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "swm/guidance.hpp"

using namespace swm;

namespace {

void randomize(ParamStore& store, const std::string& name, uint64_t seed, double scale) {
  auto& t = store.at(name);
  Rng rng(seed);
  for (auto& v : t.data) v = static_cast<float>(rng.normal() * scale);
}

SceneObservation random_obs(uint64_t seed, int64_t hw = 32) {
  Rng rng(seed);
  SceneObservation obs;
  obs.depth = Tensor::zeros({1, hw, hw});
  obs.semantic = Tensor::zeros({8, hw, hw});
  obs.rgb = Tensor::zeros({3, hw, hw});
  obs.dyn_mask = Tensor::zeros({1, hw, hw});
  for (auto* t : {&obs.depth, &obs.semantic, &obs.rgb, &obs.dyn_mask})
    for (auto& v : t->data) v = static_cast<float>(rng.uniform());
  return obs;
}

// Touch every guidance parameter once, then redraw the learned ones.
void seed_nontrivial_stack(ParamStore& store, const GuidanceConfig& cfg, uint64_t seed) {
  route_scores(store, cfg, random_obs(1));
  uint64_t k = seed;
  for (auto& [name, entry] : store.params) {
    Rng rng(name_seed(k, name));
    for (auto& v : entry.value.data) v = static_cast<float>(rng.normal() * 0.3);
  }
}

}  // namespace

TEST_CASE("param store create-or-get and deterministic init") {
  ParamStore a, b;
  a.seed = b.seed = 42;
  Tensor& w1 = a.get_or_create("m.w", {3, 4}, Init::Scaled, 0.1);
  Tensor& w2 = b.get_or_create("m.w", {3, 4}, Init::Scaled, 0.1);
  REQUIRE(w1.shape == w2.shape);
  for (int64_t i = 0; i < w1.numel(); ++i) CHECK(w1.data[i] == w2.data[i]);

  // Same name returns the existing tensor; wrong shape is rejected.
  Tensor& again = a.get_or_create("m.w", {3, 4}, Init::Zero);
  CHECK(&again == &w1);
  CHECK_THROWS_AS(a.get_or_create("m.w", {4, 3}, Init::Zero), ShapeError);

  // Different names and different store seeds give different values.
  Tensor& other = a.get_or_create("m2.w", {3, 4}, Init::Scaled, 0.1);
  bool differ = false;
  for (int64_t i = 0; i < w1.numel(); ++i)
    if (other.data[i] != w1.data[i]) differ = true;
  CHECK(differ);
  ParamStore c;
  c.seed = 43;
  Tensor& wc = c.get_or_create("m.w", {3, 4}, Init::Scaled, 0.1);
  differ = false;
  for (int64_t i = 0; i < w1.numel(); ++i)
    if (wc.data[i] != w1.data[i]) differ = true;
  CHECK(differ);

  Tensor& ones = a.get_or_create("g", {5}, Init::Ones);
  for (float v : ones.data) CHECK(v == 1.0f);
  CHECK_THROWS_AS(a.at("missing"), ValueError);
}

TEST_CASE("adam matches a hand-stepped oracle") {
  ParamStore store;
  store.seed = 7;
  store.get_or_create("w", {2}, Init::Zero);
  store.at("w").data = {1.0f, -2.0f};
  Tensor target = Tensor::zeros({2});
  target.data = {0.5f, 0.25f};

  Adam adam;
  adam.lr = 0.1;

  // Oracle state in double.
  double w[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};

  for (int step = 1; step <= 4; ++step) {
    Tape tape;
    Ctx ctx(tape, store);
    auto wv = ctx.param("w", {2}, Init::Zero);
    auto loss = tape.mse(wv, tape.constant(target));
    tape.backward(loss);
    adam.step(store, tape, ctx);

    for (int i = 0; i < 2; ++i) {
      double g = 2.0 * (w[i] - target.data[static_cast<size_t>(i)]) / 2.0;
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      double mh = m[i] / (1.0 - std::pow(0.9, step));
      double vh = v[i] / (1.0 - std::pow(0.999, step));
      w[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(std::abs(store.at("w").data[static_cast<size_t>(i)] - w[i]) < 1e-5);
    }
  }

  // Non-trainable params stay put.
  ParamStore s2;
  s2.get_or_create("frozen", {2}, Init::Ones, 0.0, false);
  Tape tape;
  Ctx ctx(tape, s2);
  auto f = ctx.param("frozen", {2}, Init::Ones);
  auto loss = tape.mse(f, tape.constant(Tensor::zeros({2})));
  tape.backward(loss);
  Adam a2;
  a2.step(s2, tape, ctx);
  for (float x : s2.at("frozen").data) CHECK(x == 1.0f);
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  ParamStore store;
  store.seed = 99;
  store.get_or_create("enc.w", {4, 3, 3, 3}, Init::Scaled, 0.2);
  store.get_or_create("enc.b", {4}, Init::Zero);
  store.get_or_create("table", {6, 8}, Init::Scaled, 0.5, false);

  const std::string dir = "ckpt_test_dir";
  save_checkpoint(store, dir);
  CHECK(fs::exists(fs::path(dir) / "manifest.json"));
  CHECK(fs::exists(fs::path(dir) / "enc.w.mdtn"));

  ParamStore back = load_checkpoint(dir);
  CHECK(back.seed == 99);
  REQUIRE(back.params.size() == 3);
  for (const auto& [name, entry] : store.params) {
    REQUIRE(back.has(name));
    const auto& b = back.params.at(name);
    CHECK(b.trainable == entry.trainable);
    REQUIRE(b.value.shape == entry.value.shape);
    for (int64_t i = 0; i < entry.value.numel(); ++i)
      CHECK(b.value.data[i] == entry.value.data[i]);
  }
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_checkpoint(dir), IoError);
}

TEST_CASE("timestep embedding") {
  Tensor e0 = timestep_embedding(0, 8);
  for (int i = 0; i < 4; ++i) {
    CHECK(e0.data[static_cast<size_t>(i)] == doctest::Approx(0.0));
    CHECK(e0.data[static_cast<size_t>(4 + i)] == doctest::Approx(1.0));
  }
  Tensor e1 = timestep_embedding(1, 8);
  Tensor e1b = timestep_embedding(1, 8);
  Tensor e2 = timestep_embedding(2, 8);
  bool differ = false;
  for (int64_t i = 0; i < 8; ++i) {
    CHECK(e1.data[i] == e1b.data[i]);
    if (e1.data[i] != e2.data[i]) differ = true;
  }
  CHECK(differ);
  CHECK(e1.data[0] == doctest::Approx(std::sin(1.0)));
  CHECK_THROWS_AS(timestep_embedding(1, 7), ValueError);
}

TEST_CASE("fresh branches emit zero pyramids with stride-arithmetic dims") {
  ParamStore store;
  store.seed = 3;
  GuidanceConfig cfg;
  SceneObservation obs = random_obs(12);
  auto conds = condition_stack(obs);

  for (int m = 0; m < 4; ++m) {
    auto pyr = branch_pyramid(store, cfg, m, conds[static_cast<size_t>(m)]);
    REQUIRE(pyr.size() == 4);
    CHECK(pyr[0].shape == std::vector<int64_t>({8, 32, 32}));
    CHECK(pyr[1].shape == std::vector<int64_t>({16, 16, 16}));
    CHECK(pyr[2].shape == std::vector<int64_t>({24, 8, 8}));
    CHECK(pyr[3].shape == std::vector<int64_t>({32, 4, 4}));
    for (const auto& lvl : pyr)
      for (float v : lvl.data) CHECK(v == 0.0f);
  }

  // Three-level config mirrors the documented stride arithmetic.
  GuidanceConfig c3;
  c3.levels = 3;
  c3.channels = {4, 8, 12};
  ParamStore s3;
  auto pyr3 = branch_pyramid(s3, c3, 0, obs.depth);
  REQUIRE(pyr3.size() == 3);
  CHECK(pyr3[0].shape == std::vector<int64_t>({4, 32, 32}));
  CHECK(pyr3[1].shape == std::vector<int64_t>({8, 16, 16}));
  CHECK(pyr3[2].shape == std::vector<int64_t>({12, 8, 8}));

  // Condition channel mismatch names the branch.
  bool threw = false;
  try {
    branch_pyramid(store, cfg, 0, obs.rgb);
  } catch (const ShapeError& e) {
    threw = true;
    CHECK(std::string(e.what()).find("depth") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("seeded taps react to the condition") {
  ParamStore store;
  store.seed = 5;
  GuidanceConfig cfg;
  SceneObservation obs = random_obs(31);
  branch_pyramid(store, cfg, 0, obs.depth);  // create params
  randomize(store, "guid.depth.s0.out.w", 77, 0.2);

  auto pa = branch_pyramid(store, cfg, 0, obs.depth);
  SceneObservation obs2 = random_obs(32);
  auto pb = branch_pyramid(store, cfg, 0, obs2.depth);
  bool differ = false;
  for (int64_t i = 0; i < pa[0].numel(); ++i)
    if (pa[0].data[i] != pb[0].data[i]) differ = true;
  CHECK(differ);
  // Level 0 now nonzero, untouched levels still zero.
  bool nonzero = false;
  for (float v : pa[0].data)
    if (v != 0.0f) nonzero = true;
  CHECK(nonzero);
  for (float v : pa[1].data) CHECK(v == 0.0f);
}

TEST_CASE("router is uniform at init and normalized always") {
  ParamStore store;
  store.seed = 11;
  GuidanceConfig cfg;
  auto scores = route_scores(store, cfg, random_obs(40));
  REQUIRE(scores.size() == 4);
  CHECK(scores[0].shape == std::vector<int64_t>({4, 32, 32}));
  CHECK(scores[3].shape == std::vector<int64_t>({4, 4, 4}));
  for (const auto& s : scores)
    for (float v : s.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));

  // Random weights: still a distribution per patch, over several inputs.
  seed_nontrivial_stack(store, cfg, 123);
  for (uint64_t k = 0; k < 5; ++k) {
    auto sc = route_scores(store, cfg, random_obs(100 + k));
    for (const auto& s : sc) {
      int64_t hw = s.shape[1] * s.shape[2];
      for (int64_t i = 0; i < hw; ++i) {
        float sum = 0;
        for (int m = 0; m < 4; ++m) {
          float v = s.data[static_cast<size_t>(m * hw + i)];
          CHECK(v >= 0.0f);
          CHECK(v <= 1.0f);
          sum += v;
        }
        CHECK(std::abs(sum - 1.0f) < 1e-6f);
      }
    }
  }
}

TEST_CASE("router softmax matches the closed form") {
  ParamStoreT<double> store;
  GuidanceConfig cfg;
  cfg.levels = 1;
  cfg.channels = {4};
  cfg.gn_groups = 1;

  store.get_or_create("guid.router.l0.enc.w", {4, 16}, Init::Zero);
  store.get_or_create("guid.router.l0.enc.b", {16}, Init::Zero);
  for (int m = 0; m < 4; ++m) {
    store.get_or_create("guid.router.l0.q" + std::to_string(m) + ".w", {16, 1}, Init::Zero);
    auto& b = store.get_or_create("guid.router.l0.q" + std::to_string(m) + ".b", {1},
                                  Init::Zero);
    b.data[0] = static_cast<double>(m + 1);
  }

  TapeT<double> tape;
  CtxT<double> ctx(tape, store);
  Rng rng(2);
  std::array<TapeT<double>::Var, 4> feats;
  for (int m = 0; m < 4; ++m) {
    auto f = TensorT<double>::zeros({1, 4, 1, 1});
    for (auto& v : f.data) v = rng.normal();
    feats[static_cast<size_t>(m)] = tape.constant(f);
  }
  auto sc = tape.value(route_level_t(ctx, cfg, 0, feats));
  REQUIRE(sc.shape == std::vector<int64_t>({1, 4, 1, 1}));
  const double want[4] = {0.0321, 0.0871, 0.2369, 0.6439};
  for (int m = 0; m < 4; ++m)
    CHECK(std::abs(sc.data[static_cast<size_t>(m)] - want[m]) < 1e-4);
}

TEST_CASE("fuse matches the per-patch loop oracle") {
  TapeT<double> tape;
  ParamStoreT<double> store;
  CtxT<double> ctx(tape, store);
  Rng rng(8);
  const int64_t N = 2, C = 5, H = 3, W = 4;
  std::array<TapeT<double>::Var, 4> feats;
  std::array<TensorT<double>, 4> fval;
  for (int m = 0; m < 4; ++m) {
    fval[static_cast<size_t>(m)] = TensorT<double>::zeros({N, C, H, W});
    for (auto& v : fval[static_cast<size_t>(m)].data) v = rng.normal();
    feats[static_cast<size_t>(m)] = tape.constant(fval[static_cast<size_t>(m)]);
  }

  // Random simplex scores.
  TensorT<double> sv = TensorT<double>::zeros({N, 4, H, W});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < H; ++i)
      for (int64_t j = 0; j < W; ++j) {
        double e[4], z = 0;
        for (int m = 0; m < 4; ++m) {
          e[m] = std::exp(rng.normal());
          z += e[m];
        }
        for (int m = 0; m < 4; ++m) sv.at({n, m, i, j}) = e[m] / z;
      }
  auto fused = tape.value(fuse_level_t(ctx, feats, tape.constant(sv)));

  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
          double want = 0, lo = 1e300, hi = -1e300;
          for (int m = 0; m < 4; ++m) {
            double p = fval[static_cast<size_t>(m)].at({n, c, i, j});
            want += sv.at({n, m, i, j}) * p;
            lo = std::min(lo, p);
            hi = std::max(hi, p);
          }
          double got = fused.at({n, c, i, j});
          CHECK(std::abs(got - want) < 1e-12);
          CHECK(got >= lo - 1e-12);
          CHECK(got <= hi + 1e-12);
        }

  // One-hot scores pick a single modality per patch.
  TensorT<double> oh = TensorT<double>::zeros({N, 4, H, W});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t i = 0; i < H; ++i)
      for (int64_t j = 0; j < W; ++j) oh.at({n, (i + j + n) % 4, i, j}) = 1.0;
  auto fo = tape.value(fuse_level_t(ctx, feats, tape.constant(oh)));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j)
          CHECK(fo.at({n, c, i, j}) ==
                fval[static_cast<size_t>((i + j + n) % 4)].at({n, c, i, j}));

  // Uniform scores give the modality mean.
  TensorT<double> uni = TensorT<double>::full({N, 4, H, W}, 0.25);
  auto fu = tape.value(fuse_level_t(ctx, feats, tape.constant(uni)));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
          double want = 0;
          for (int m = 0; m < 4; ++m)
            want += 0.25 * fval[static_cast<size_t>(m)].at({n, c, i, j});
          CHECK(std::abs(fu.at({n, c, i, j}) - want) < 1e-12);
        }

  // Misaligned scores rejected.
  CHECK_THROWS_AS(
      fuse_level_t(ctx, feats, tape.constant(TensorT<double>::zeros({N, 4, H, W - 1}))),
      ShapeError);
}

TEST_CASE("router permutation equivariance") {
  GuidanceConfig cfg;
  cfg.levels = 1;
  cfg.channels = {6};
  const int64_t N = 1, C = 6, H = 4, W = 4;

  auto make_store = [&](const std::array<int, 4>& qperm) {
    ParamStoreT<double> store;
    store.seed = 0;
    Rng rng(55);
    auto& ew = store.get_or_create("guid.router.l0.enc.w", {C, 16}, Init::Zero);
    for (auto& v : ew.data) v = rng.normal() * 0.4;
    auto& eb = store.get_or_create("guid.router.l0.enc.b", {16}, Init::Zero);
    for (auto& v : eb.data) v = rng.normal() * 0.2;
    // Draw one (w,b) pair per logical modality, then place by the permutation.
    std::array<std::vector<double>, 4> qw, qb;
    for (int m = 0; m < 4; ++m) {
      qw[static_cast<size_t>(m)].resize(16);
      for (auto& v : qw[static_cast<size_t>(m)]) v = rng.normal() * 0.4;
      qb[static_cast<size_t>(m)] = {rng.normal() * 0.2};
    }
    for (int slot = 0; slot < 4; ++slot) {
      int logical = qperm[static_cast<size_t>(slot)];
      auto& w = store.get_or_create("guid.router.l0.q" + std::to_string(slot) + ".w",
                                    {16, 1}, Init::Zero);
      for (int i = 0; i < 16; ++i) w.data[static_cast<size_t>(i)] = qw[static_cast<size_t>(logical)][static_cast<size_t>(i)];
      auto& b = store.get_or_create("guid.router.l0.q" + std::to_string(slot) + ".b", {1},
                                    Init::Zero);
      b.data[0] = qb[static_cast<size_t>(logical)][0];
    }
    return store;
  };

  std::array<TensorT<double>, 4> fv;
  Rng rng(66);
  for (auto& f : fv) {
    f = TensorT<double>::zeros({N, C, H, W});
    for (auto& v : f.data) v = rng.normal();
  }

  auto run = [&](ParamStoreT<double>& store, const std::array<int, 4>& order) {
    TapeT<double> tape;
    CtxT<double> ctx(tape, store);
    std::array<TapeT<double>::Var, 4> feats;
    for (int slot = 0; slot < 4; ++slot)
      feats[static_cast<size_t>(slot)] =
          tape.constant(fv[static_cast<size_t>(order[static_cast<size_t>(slot)])]);
    return tape.value(route_level_t(ctx, cfg, 0, feats));
  };

  std::array<int, 4> ident = {0, 1, 2, 3};
  std::array<int, 4> perm = {2, 0, 3, 1};
  ParamStoreT<double> s1 = make_store(ident);
  ParamStoreT<double> s2 = make_store(perm);
  auto base = run(s1, ident);
  auto permuted = run(s2, perm);
  // Slot m of the permuted run carries logical modality perm[m].
  for (int slot = 0; slot < 4; ++slot)
    for (int64_t i = 0; i < H * W; ++i) {
      double a = permuted.data[static_cast<size_t>(slot * H * W + i)];
      double b = base.data[static_cast<size_t>(perm[static_cast<size_t>(slot)] * H * W + i)];
      CHECK(std::abs(a - b) < 1e-12);
    }
}

TEST_CASE("weight report") {
  ParamStore store;
  store.seed = 21;
  GuidanceConfig cfg;

  // Fresh model: all means 0.25.
  auto rep0 = weight_report(store, cfg, {random_obs(1)});
  REQUIRE(rep0.level_means.size() == 4);
  for (const auto& lv : rep0.level_means)
    for (double v : lv) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));

  seed_nontrivial_stack(store, cfg, 9);

  // N=1 equals the patch-mean of a single route call.
  SceneObservation one = random_obs(200);
  auto rep1 = weight_report(store, cfg, {one});
  auto sc = route_scores(store, cfg, one);
  for (int l = 0; l < 4; ++l) {
    int64_t hw = sc[static_cast<size_t>(l)].shape[1] * sc[static_cast<size_t>(l)].shape[2];
    for (int m = 0; m < 4; ++m) {
      double mean = 0;
      for (int64_t i = 0; i < hw; ++i)
        mean += sc[static_cast<size_t>(l)].data[static_cast<size_t>(m * hw + i)];
      mean /= static_cast<double>(hw);
      CHECK(std::abs(rep1.level_means[static_cast<size_t>(l)][static_cast<size_t>(m)] -
                     mean) < 1e-9);
    }
  }

  // Report over N observations equals the hand-computed mean of logged scores.
  std::vector<SceneObservation> many;
  for (uint64_t k = 0; k < 20; ++k) many.push_back(random_obs(300 + k));
  auto rep = weight_report(store, cfg, many);
  std::vector<std::array<double, 4>> logged(4, {0, 0, 0, 0});
  for (const auto& obs : many) {
    auto s = route_scores(store, cfg, obs);
    for (int l = 0; l < 4; ++l) {
      int64_t hw = s[static_cast<size_t>(l)].shape[1] * s[static_cast<size_t>(l)].shape[2];
      for (int m = 0; m < 4; ++m) {
        double mean = 0;
        for (int64_t i = 0; i < hw; ++i)
          mean += s[static_cast<size_t>(l)].data[static_cast<size_t>(m * hw + i)];
        logged[static_cast<size_t>(l)][static_cast<size_t>(m)] +=
            mean / static_cast<double>(hw);
      }
    }
  }
  for (int l = 0; l < 4; ++l)
    for (int m = 0; m < 4; ++m) {
      double want = logged[static_cast<size_t>(l)][static_cast<size_t>(m)] / 20.0;
      CHECK(std::abs(rep.level_means[static_cast<size_t>(l)][static_cast<size_t>(m)] -
                     want) < 1e-9);
      // Means over a simplex stay in it.
      CHECK(want >= 0.0);
      CHECK(want <= 1.0);
    }
  for (int l = 0; l < 4; ++l) {
    double sum = 0;
    for (int m = 0; m < 4; ++m)
      sum += rep.level_means[static_cast<size_t>(l)][static_cast<size_t>(m)];
    CHECK(std::abs(sum - 1.0) < 1e-5);
  }

  CHECK_THROWS_AS(weight_report(store, cfg, {}), ValueError);
}

TEST_CASE("patch size and shared queries") {
  ParamStore store;
  store.seed = 31;
  GuidanceConfig cfg;
  cfg.patch = 2;
  seed_nontrivial_stack(store, cfg, 77);
  auto sc = route_scores(store, cfg, random_obs(400));
  // Scores constant within each 2x2 block.
  const Tensor& s0 = sc[0];  // [4,32,32]
  for (int m = 0; m < 4; ++m)
    for (int64_t i = 0; i < 32; i += 2)
      for (int64_t j = 0; j < 32; j += 2) {
        float v = s0.at({m, i, j});
        CHECK(s0.at({m, i, j + 1}) == v);
        CHECK(s0.at({m, i + 1, j}) == v);
        CHECK(s0.at({m, i + 1, j + 1}) == v);
      }

  // Indivisible patch rejected (level 3 is 4x4, patch 3 fails).
  GuidanceConfig bad = cfg;
  bad.patch = 3;
  CHECK_THROWS_AS(route_scores(store, bad, random_obs(401)), ShapeError);

  // Shared query mode still yields uniform scores at init.
  ParamStore shared_store;
  GuidanceConfig scfg;
  scfg.share_router_queries = true;
  auto ss = route_scores(shared_store, scfg, random_obs(402));
  for (const auto& s : ss)
    for (float v : s.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(shared_store.has("guid.router.shared.q0.w"));
  CHECK(!shared_store.has("guid.router.l0.q0.w"));
}
