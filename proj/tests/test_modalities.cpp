#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "swm/modalities.hpp"

using namespace swm;

namespace {

Tensor feat1x1(std::vector<float> chans) {
  Tensor t = Tensor::zeros({static_cast<int64_t>(chans.size()), 1, 1});
  t.data = chans;
  return t;
}

// Naive double-precision reimplementation of the mask rule.
Tensor mask_oracle(const std::vector<Tensor>& feats) {
  int64_t C = feats[0].shape[0], H = feats[0].shape[1], W = feats[0].shape[2];
  Tensor m = Tensor::zeros({1, H, W});
  int64_t T = static_cast<int64_t>(feats.size()) - 1;
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      double acc = 0.0;
      for (int64_t t = 1; t <= T; ++t) {
        double dot = 0, n0 = 0, nt = 0;
        for (int64_t c = 0; c < C; ++c) {
          double a = feats[0].at({c, i, j});
          double b = feats[static_cast<size_t>(t)].at({c, i, j});
          dot += a * b;
          n0 += a * a;
          nt += b * b;
        }
        double s = (n0 == 0.0 || nt == 0.0) ? 1.0 : dot / std::sqrt(n0 * nt);
        s = std::min(1.0, std::max(0.0, s));
        acc += 1.0 - s;
      }
      m.at({0, i, j}) = static_cast<float>(acc / static_cast<double>(T));
    }
  return m;
}

Tensor random_frame(Rng& rng, int64_t h, int64_t w) {
  Tensor f = Tensor::zeros({3, h, w});
  for (auto& v : f.data) v = static_cast<float>(rng.uniform());
  return f;
}

}  // namespace

TEST_CASE("normalize_depth affine rule") {
  Tensor raw = Tensor::zeros({1, 1, 3});
  raw.data = {2.0f, 4.0f, 6.0f};
  Tensor out = normalize_depth(raw);
  CHECK(out.data[0] == doctest::Approx(0.0));
  CHECK(out.data[1] == doctest::Approx(0.5));
  CHECK(out.data[2] == doctest::Approx(1.0));

  Tensor flat = Tensor::full({1, 4, 4}, 3.25f);
  Tensor mid = normalize_depth(flat);
  for (float v : mid.data) CHECK(v == 0.5f);

  // min/max scan oracle on random input.
  Rng rng(11);
  Tensor r = Tensor::zeros({1, 9, 7});
  for (auto& v : r.data) v = static_cast<float>(rng.uniform() * 10 - 5);
  Tensor n = normalize_depth(r);
  float lo = *std::min_element(n.data.begin(), n.data.end());
  float hi = *std::max_element(n.data.begin(), n.data.end());
  CHECK(std::abs(lo - 0.0f) < 1e-7f);
  CHECK(std::abs(hi - 1.0f) < 1e-7f);
  for (float v : n.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  Tensor bad = Tensor::full({1, 2, 2}, 1.0f);
  bad.data[2] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(normalize_depth(bad), ValueError);
}

TEST_CASE("dynamic mask pinned feature cases") {
  // Orthogonal features: cosine 0, mask 1.
  Tensor m1 = dynamic_mask_from_features({feat1x1({1, 0}), feat1x1({0, 1})});
  REQUIRE(m1.shape == std::vector<int64_t>({1, 1, 1}));
  CHECK(m1.data[0] == doctest::Approx(1.0));

  // 45 degrees: mask = 1 - 1/sqrt(2).
  float r2 = 1.0f / std::sqrt(2.0f);
  Tensor m2 = dynamic_mask_from_features({feat1x1({1, 0}), feat1x1({r2, r2})});
  CHECK(std::abs(m2.data[0] - (1.0 - 1.0 / std::sqrt(2.0))) < 1e-5);

  // Opposite vectors clamp to similarity 0.
  Tensor m3 = dynamic_mask_from_features({feat1x1({1, 0}), feat1x1({-1, 0})});
  CHECK(m3.data[0] == doctest::Approx(1.0));

  // Zero-norm pixel counts as unchanged.
  Tensor m4 = dynamic_mask_from_features({feat1x1({0, 0}), feat1x1({1, 0})});
  CHECK(m4.data[0] == 0.0f);
  Tensor m5 = dynamic_mask_from_features({feat1x1({1, 0}), feat1x1({0, 0})});
  CHECK(m5.data[0] == 0.0f);

  // Identical features everywhere: zero mask.
  Rng rng(3);
  Tensor f = Tensor::zeros({4, 3, 5});
  for (auto& v : f.data) v = static_cast<float>(rng.normal());
  Tensor mz = dynamic_mask_from_features({f, f, f});
  for (float v : mz.data) CHECK(std::abs(v) < 1e-6f);

  // T = 0 rejected.
  CHECK_THROWS_AS(dynamic_mask_from_features({f}), ValueError);
  CHECK_THROWS_AS(dynamic_mask_from_features({}), ValueError);
}

TEST_CASE("dynamic mask properties and oracle") {
  Rng rng(21);
  auto rand_feats = [&](int n, int64_t c, int64_t h, int64_t w) {
    std::vector<Tensor> fs;
    for (int i = 0; i < n; ++i) {
      Tensor f = Tensor::zeros({c, h, w});
      for (auto& v : f.data) v = static_cast<float>(rng.normal());
      fs.push_back(f);
    }
    return fs;
  };

  auto feats = rand_feats(5, 6, 4, 7);
  Tensor m = dynamic_mask_from_features(feats);
  Tensor want = mask_oracle(feats);
  REQUIRE(m.shape == want.shape);
  for (int64_t i = 0; i < m.numel(); ++i) {
    CHECK(std::abs(m.data[i] - want.data[i]) < 1e-6f);
    CHECK(m.data[i] >= 0.0f);
    CHECK(m.data[i] <= 1.0f);
  }

  // Scale invariance of cosine.
  std::vector<Tensor> scaled = feats;
  for (auto& f : scaled)
    for (auto& v : f.data) v *= 3.7f;
  Tensor ms = dynamic_mask_from_features(scaled);
  for (int64_t i = 0; i < m.numel(); ++i) CHECK(std::abs(m.data[i] - ms.data[i]) < 1e-6f);

  // Permuting frames 1..T leaves the mask unchanged.
  std::vector<Tensor> perm = {feats[0], feats[3], feats[1], feats[4], feats[2]};
  Tensor mp = dynamic_mask_from_features(perm);
  for (int64_t i = 0; i < m.numel(); ++i) CHECK(m.data[i] == mp.data[i]);

  // Frame 0 is distinguished: swapping it in changes the mask.
  std::vector<Tensor> swapped = {feats[1], feats[0], feats[2], feats[3], feats[4]};
  Tensor mw = dynamic_mask_from_features(swapped);
  bool any_diff = false;
  for (int64_t i = 0; i < m.numel(); ++i)
    if (std::abs(m.data[i] - mw.data[i]) > 1e-6f) any_diff = true;
  CHECK(any_diff);

  // Shape mismatch across frames.
  auto bad = rand_feats(2, 6, 4, 7);
  bad.push_back(Tensor::zeros({6, 4, 6}));
  CHECK_THROWS_AS(dynamic_mask_from_features(bad), ShapeError);
}

TEST_CASE("synthetic extractor") {
  SyntheticExtractor ex;
  CHECK(ex.channels() == 8);

  Rng rng(5);
  Tensor frame = random_frame(rng, 8, 9);
  Tensor a = ex.extract(frame);
  Tensor b = ex.extract(frame);
  REQUIRE(a.shape == std::vector<int64_t>({8, 8, 9}));
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data[i] == b.data[i]);

  // Count-normalized blur of a one-hot field keeps per-pixel channel sums at 1.
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t j = 0; j < 9; ++j) {
      float s = 0;
      for (int64_t c = 0; c < 8; ++c) s += a.at({c, i, j});
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }

  // A frame painted in exactly one prototype color activates that channel only.
  auto pal = SyntheticExtractor::default_palette();
  for (size_t p = 0; p < pal.size(); ++p) {
    Tensor uni = Tensor::zeros({3, 4, 4});
    for (int64_t i = 0; i < 4; ++i)
      for (int64_t j = 0; j < 4; ++j)
        for (int64_t c = 0; c < 3; ++c) uni.at({c, i, j}) = pal[p][static_cast<size_t>(c)];
    Tensor f = ex.extract(uni);
    for (int64_t c = 0; c < 8; ++c)
      for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 4; ++j)
          CHECK(f.at({c, i, j}) == (static_cast<size_t>(c) == p ? 1.0f : 0.0f));
  }

  // Palette prototypes are pairwise distinct.
  for (size_t i = 0; i < pal.size(); ++i)
    for (size_t j = i + 1; j < pal.size(); ++j)
      CHECK((pal[i][0] != pal[j][0] || pal[i][1] != pal[j][1] || pal[i][2] != pal[j][2]));

  CHECK_THROWS_AS(ex.extract(Tensor::zeros({1, 4, 4})), ShapeError);
}

TEST_CASE("box blur oracle") {
  // Interior pixel of a delta image spreads to 1/9; corner tap of the same
  // kernel sees count 4.
  Tensor d = Tensor::zeros({1, 5, 5});
  d.at({0, 2, 2}) = 1.0f;
  Tensor b = box_blur3(d);
  for (int64_t i = 1; i <= 3; ++i)
    for (int64_t j = 1; j <= 3; ++j) CHECK(b.at({0, i, j}) == doctest::Approx(1.0 / 9));
  CHECK(b.at({0, 0, 0}) == 0.0f);

  Tensor corner = Tensor::zeros({1, 3, 3});
  corner.at({0, 0, 0}) = 1.0f;
  Tensor bc = box_blur3(corner);
  CHECK(bc.at({0, 0, 0}) == doctest::Approx(0.25));

  // Constant field is a fixed point.
  Tensor c = Tensor::full({2, 4, 6}, 0.3f);
  Tensor bcst = box_blur3(c);
  for (float v : bcst.data) CHECK(v == doctest::Approx(0.3).epsilon(1e-6));
}

TEST_CASE("file extractor") {
  Rng rng(9);
  Tensor f0 = random_frame(rng, 6, 6), f1 = random_frame(rng, 6, 6);
  Tensor feat0 = Tensor::full({5, 6, 6}, 1.0f), feat1 = Tensor::full({5, 6, 6}, 2.0f);
  FileExtractor fx({f0, f1}, {feat0, feat1});
  CHECK(fx.channels() == 5);
  Tensor got = fx.extract(f0);
  for (int64_t i = 0; i < got.numel(); ++i) CHECK(got.data[i] == feat0.data[i]);
  Tensor got1 = fx.extract(f1);
  CHECK(got1.data[0] == 2.0f);

  // Unknown frame content.
  CHECK_THROWS_AS(fx.extract(random_frame(rng, 6, 6)), ValueError);

  // Duplicate frames must carry identical features.
  CHECK_THROWS_AS(FileExtractor({f0, f0}, {feat0, feat1}), ValueError);
  FileExtractor ok({f0, f0}, {feat0, feat0});
  CHECK(ok.extract(f0).data[0] == 1.0f);

  // Count mismatch.
  CHECK_THROWS_AS(FileExtractor({f0, f1}, {feat0}), ValueError);

  // Directory round trip.
  namespace fs = std::filesystem;
  fs::create_directories("fx_frames");
  fs::create_directories("fx_feats");
  save_mdtn("fx_frames/frame_0000.mdtn", f0);
  save_mdtn("fx_frames/frame_0001.mdtn", f1);
  save_mdtn("fx_feats/frame_0000.mdtn", feat0);
  save_mdtn("fx_feats/frame_0001.mdtn", feat1);
  FileExtractor fd = FileExtractor::from_dirs("fx_frames", "fx_feats");
  CHECK(fd.extract(f1).data[0] == 2.0f);
  auto frames = load_frame_dir("fx_frames");
  REQUIRE(frames.size() == 2);
  for (int64_t i = 0; i < f0.numel(); ++i) CHECK(frames[0].data[i] == f0.data[i]);
  fs::remove_all("fx_frames");
  fs::remove_all("fx_feats");
  CHECK_THROWS_AS(load_frame_dir("fx_frames"), IoError);
}

TEST_CASE("observe bundles the four conditions") {
  SyntheticExtractor ex;
  Rng rng(17);
  Tensor frame0 = random_frame(rng, 8, 8);
  Tensor frame1 = frame0;
  // Change a patch so the mask fires there.
  auto pal = SyntheticExtractor::default_palette();
  for (int64_t i = 2; i <= 4; ++i)
    for (int64_t j = 2; j <= 4; ++j)
      for (int64_t c = 0; c < 3; ++c) {
        frame0.at({c, i, j}) = pal[1][static_cast<size_t>(c)];
        frame1.at({c, i, j}) = pal[3][static_cast<size_t>(c)];
      }
  Tensor raw_depth = Tensor::zeros({1, 8, 8});
  for (auto& v : raw_depth.data) v = static_cast<float>(rng.uniform() * 4 + 1);

  SceneObservation obs = observe({frame0, frame1}, raw_depth, ex);
  REQUIRE(obs.rgb.shape == frame0.shape);
  for (int64_t i = 0; i < frame0.numel(); ++i) CHECK(obs.rgb.data[i] == frame0.data[i]);
  Tensor nd = normalize_depth(raw_depth);
  for (int64_t i = 0; i < nd.numel(); ++i) CHECK(obs.depth.data[i] == nd.data[i]);
  Tensor sem = ex.extract(frame0);
  for (int64_t i = 0; i < sem.numel(); ++i) CHECK(obs.semantic.data[i] == sem.data[i]);
  Tensor dm = dynamic_mask({frame0, frame1}, ex);
  for (int64_t i = 0; i < dm.numel(); ++i) CHECK(obs.dyn_mask.data[i] == dm.data[i]);
  // The changed patch fires, far corners stay quiet.
  CHECK(obs.dyn_mask.at({0, 3, 3}) > 0.5f);
  CHECK(obs.dyn_mask.at({0, 7, 7}) < 1e-6f);

  // Static episode: mask everywhere ~0.
  SceneObservation still = observe({frame0, frame0, frame0}, raw_depth, ex);
  float mx = 0;
  for (float v : still.dyn_mask.data) mx = std::max(mx, v);
  CHECK(mx <= 1e-6f);

  // Depth condition ignores color channels.
  Tensor shuffled = frame0;
  for (int64_t i = 0; i < 8; ++i)
    for (int64_t j = 0; j < 8; ++j) {
      std::swap(shuffled.at({0, i, j}), shuffled.at({2, i, j}));
    }
  SceneObservation obs2 = observe({shuffled, shuffled}, raw_depth, ex);
  for (int64_t i = 0; i < nd.numel(); ++i) CHECK(obs2.depth.data[i] == obs.depth.data[i]);

  // Dimensional mismatch propagates.
  CHECK_THROWS_AS(observe({frame0, Tensor::zeros({3, 4, 4})}, raw_depth, ex), ShapeError);
}
