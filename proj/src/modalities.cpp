#include "swm/modalities.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

namespace swm {

namespace {

void require_chw(const Tensor& t, const char* what) {
  if (t.shape.size() != 3)
    throw ShapeError(std::string(what) + " must be rank 3, got " + t.shape_str());
}

}  // namespace

Tensor box_blur3(const Tensor& x) {
  require_chw(x, "box_blur3 input");
  int64_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
  Tensor out = Tensor::zeros(x.shape);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < H; ++i)
      for (int64_t j = 0; j < W; ++j) {
        double acc = 0.0;
        int count = 0;
        for (int64_t di = -1; di <= 1; ++di)
          for (int64_t dj = -1; dj <= 1; ++dj) {
            int64_t ii = i + di, jj = j + dj;
            if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
            acc += x.at({c, ii, jj});
            ++count;
          }
        out.at({c, i, j}) = static_cast<float>(acc / count);
      }
  return out;
}

std::vector<std::array<float, 3>> SyntheticExtractor::default_palette() {
  return {{
      {0.50f, 0.50f, 0.50f},  // background gray
      {0.90f, 0.20f, 0.20f},  // red
      {0.20f, 0.80f, 0.25f},  // green
      {0.20f, 0.30f, 0.90f},  // blue
      {0.90f, 0.85f, 0.20f},  // yellow
      {0.60f, 0.30f, 0.70f},  // purple place
      {0.25f, 0.75f, 0.80f},  // cyan place
      {0.95f, 0.55f, 0.15f},  // orange place
  }};
}

Tensor SyntheticExtractor::extract(const Tensor& frame) const {
  require_chw(frame, "extract input");
  if (frame.shape[0] != 3)
    throw ShapeError("extract expects 3 color channels, got " + frame.shape_str());
  int64_t H = frame.shape[1], W = frame.shape[2];
  int64_t C = static_cast<int64_t>(palette.size());
  Tensor onehot = Tensor::zeros({C, H, W});
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int64_t p = 0; p < C; ++p) {
        double d = 0;
        for (int64_t c = 0; c < 3; ++c) {
          double diff = frame.at({c, i, j}) - palette[static_cast<size_t>(p)][static_cast<size_t>(c)];
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(p);
        }
      }
      onehot.at({best, i, j}) = 1.0f;
    }
  return box_blur3(onehot);
}

uint64_t tensor_content_hash(const Tensor& t) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const unsigned char* p, size_t n) {
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (int64_t d : t.shape) mix(reinterpret_cast<const unsigned char*>(&d), sizeof(d));
  mix(reinterpret_cast<const unsigned char*>(t.data.data()), t.data.size() * sizeof(float));
  return h;
}

FileExtractor::FileExtractor(const std::vector<Tensor>& frames,
                             const std::vector<Tensor>& features) {
  if (frames.size() != features.size())
    throw ValueError("frame/feature count mismatch: " + std::to_string(frames.size()) +
                     " vs " + std::to_string(features.size()));
  if (frames.empty()) throw ValueError("file extractor needs at least one frame");
  feat_channels = static_cast<int>(features[0].shape.at(0));
  for (size_t i = 0; i < frames.size(); ++i) {
    require_chw(features[i], "feature");
    if (features[i].shape[0] != feat_channels)
      throw ValueError("inconsistent feature channel counts");
    uint64_t key = tensor_content_hash(frames[i]);
    auto it = by_frame_hash.find(key);
    if (it != by_frame_hash.end()) {
      const Tensor& prev = it->second;
      bool same = prev.shape == features[i].shape && prev.data == features[i].data;
      if (!same)
        throw ValueError("conflicting features for identical frame content at index " +
                         std::to_string(i));
      continue;
    }
    by_frame_hash.emplace(key, features[i]);
  }
}

FileExtractor FileExtractor::from_dirs(const std::string& frames_dir,
                                       const std::string& features_dir) {
  std::vector<Tensor> frames = load_frame_dir(frames_dir);
  std::vector<Tensor> feats = load_frame_dir(features_dir);
  return FileExtractor(frames, feats);
}

Tensor FileExtractor::extract(const Tensor& frame) const {
  auto it = by_frame_hash.find(tensor_content_hash(frame));
  if (it == by_frame_hash.end())
    throw ValueError("no precomputed features for this frame content");
  return it->second;
}

Tensor normalize_depth(const Tensor& raw) {
  require_chw(raw, "normalize_depth input");
  if (!raw.all_finite()) throw ValueError("normalize_depth: non-finite input");
  float lo = raw.data[0], hi = raw.data[0];
  for (float v : raw.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Tensor out = Tensor::zeros(raw.shape);
  if (hi == lo) {
    std::fill(out.data.begin(), out.data.end(), 0.5f);
    return out;
  }
  float inv = 1.0f / (hi - lo);
  for (int64_t i = 0; i < raw.numel(); ++i) out.data[i] = (raw.data[i] - lo) * inv;
  return out;
}

Tensor dynamic_mask_from_features(const std::vector<Tensor>& features) {
  if (features.size() < 2)
    throw ValueError("dynamic mask needs the reference frame plus at least one more");
  const Tensor& f0 = features[0];
  require_chw(f0, "features");
  for (const auto& f : features)
    if (f.shape != f0.shape)
      throw ShapeError("feature dims differ across frames: " + f0.shape_str() + " vs " +
                       f.shape_str());
  int64_t C = f0.shape[0], H = f0.shape[1], W = f0.shape[2];
  int64_t T = static_cast<int64_t>(features.size()) - 1;
  Tensor mask = Tensor::zeros({1, H, W});
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      double acc = 0.0;
      for (int64_t t = 1; t <= T; ++t) {
        const Tensor& ft = features[static_cast<size_t>(t)];
        double dot = 0, n0 = 0, nt = 0;
        for (int64_t c = 0; c < C; ++c) {
          double a = f0.at({c, i, j});
          double b = ft.at({c, i, j});
          dot += a * b;
          n0 += a * a;
          nt += b * b;
        }
        double s = (n0 == 0.0 || nt == 0.0) ? 1.0 : dot / std::sqrt(n0 * nt);
        s = std::clamp(s, 0.0, 1.0);
        acc += 1.0 - s;
      }
      mask.at({0, i, j}) = static_cast<float>(acc / static_cast<double>(T));
    }
  return mask;
}

Tensor dynamic_mask(const std::vector<Tensor>& frames, const FeatureExtractor& extractor) {
  if (frames.size() < 2)
    throw ValueError("dynamic mask needs the reference frame plus at least one more");
  std::vector<Tensor> feats;
  feats.reserve(frames.size());
  for (const auto& f : frames) feats.push_back(extractor.extract(f));
  return dynamic_mask_from_features(feats);
}

SceneObservation observe(const std::vector<Tensor>& frames, const Tensor& raw_depth,
                         const FeatureExtractor& extractor) {
  if (frames.empty()) throw ValueError("observe: no frames");
  require_chw(frames[0], "frame");
  require_chw(raw_depth, "depth");
  if (raw_depth.shape[1] != frames[0].shape[1] || raw_depth.shape[2] != frames[0].shape[2])
    throw ShapeError("depth dims " + raw_depth.shape_str() + " do not match frame " +
                     frames[0].shape_str());
  SceneObservation obs;
  obs.rgb = frames[0];
  obs.depth = normalize_depth(raw_depth);
  obs.semantic = extractor.extract(frames[0]);
  obs.dyn_mask = dynamic_mask(frames, extractor);
  return obs;
}

std::string frame_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04d.mdtn", index);
  return buf;
}

std::vector<Tensor> load_frame_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<Tensor> frames;
  for (int i = 0;; ++i) {
    fs::path p = fs::path(dir) / frame_filename(i);
    if (!fs::exists(p)) break;
    frames.push_back(load_mdtn<float>(p.string()));
  }
  if (frames.empty()) throw IoError("no frame_0000.mdtn found in " + dir);
  return frames;
}

}  // namespace swm
