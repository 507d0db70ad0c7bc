#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

#include "swm/tensor.hpp"

namespace swm {

/// First-frame visual conditions for one episode.
struct SceneObservation {
  Tensor rgb;       // [3,H,W] in [0,1]
  Tensor depth;     // [1,H,W] normalized to [0,1]
  Tensor semantic;  // [C_sam,H,W]
  Tensor dyn_mask;  // [1,H,W] in [0,1]
};

/// Maps an RGB frame [3,H,W] to a feature map [C,H,W]; deterministic per frame.
struct FeatureExtractor {
  virtual ~FeatureExtractor() = default;
  virtual int channels() const = 0;
  virtual Tensor extract(const Tensor& frame) const = 0;
};

/// 3x3 box blur normalized by the in-bounds tap count; preserves per-pixel
/// channel sums.
Tensor box_blur3(const Tensor& x);  // [C,H,W]

/// Nearest-prototype one-hot over a fixed color palette, box-blurred so
/// similarity is informative at object boundaries.
struct SyntheticExtractor : FeatureExtractor {
  std::vector<std::array<float, 3>> palette;

  SyntheticExtractor() : palette(default_palette()) {}
  explicit SyntheticExtractor(std::vector<std::array<float, 3>> pal)
      : palette(std::move(pal)) {}

  static std::vector<std::array<float, 3>> default_palette();

  int channels() const override { return static_cast<int>(palette.size()); }
  Tensor extract(const Tensor& frame) const override;
};

/// Serves precomputed features keyed by frame content.
struct FileExtractor : FeatureExtractor {
  int feat_channels = 0;
  std::unordered_map<uint64_t, Tensor> by_frame_hash;

  FileExtractor(const std::vector<Tensor>& frames, const std::vector<Tensor>& features);
  /// Pairs frame_XXXX.mdtn files of the two directories by index.
  static FileExtractor from_dirs(const std::string& frames_dir,
                                 const std::string& features_dir);

  int channels() const override { return feat_channels; }
  Tensor extract(const Tensor& frame) const override;
};

uint64_t tensor_content_hash(const Tensor& t);

/// (raw - min)/(max - min); constant input maps to all 0.5.
Tensor normalize_depth(const Tensor& raw);  // [1,H,W]

/// Core of the mask rule: features[0] is the reference; per pixel,
/// S_t = clamped cosine(F_0, F_t), mask = mean_t(1 - S_t).
Tensor dynamic_mask_from_features(const std::vector<Tensor>& features);  // each [C,H,W]

Tensor dynamic_mask(const std::vector<Tensor>& frames, const FeatureExtractor& extractor);

SceneObservation observe(const std::vector<Tensor>& frames, const Tensor& raw_depth,
                         const FeatureExtractor& extractor);

/// Zero-padded frame_XXXX.mdtn helpers shared by dataset and CLI code.
std::string frame_filename(int index);
std::vector<Tensor> load_frame_dir(const std::string& dir);

}  // namespace swm
