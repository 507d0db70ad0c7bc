#pragma once

#include <string>
#include <vector>

#include "swm/tensor.hpp"

namespace swm {

/// Per-frame (or per-frame-pair) values plus their mean.
struct MetricSeries {
  std::vector<double> values;
  double mean = 0.0;
};

/// Stacks frames[from .. from+count) ([C,H,W] each) into a [count,C,H,W] video.
Tensor stack_frames(const std::vector<Tensor>& frames, size_t from = 0, int64_t count = -1);

/// Elementwise clamp to [0,1].
Tensor clamp01(const Tensor& video);

/// Peak signal-to-noise ratio per frame, 10*log10(1/MSE), capped at 99 dB.
/// Videos are [F,C,H,W] with values in [0,1].
MetricSeries psnr(const Tensor& generated, const Tensor& reference);

/// Mean structural similarity per frame on the luma channel
/// (weights 0.299/0.587/0.114), 11x11 Gaussian window sigma 1.5,
/// K1=0.01, K2=0.03, dynamic range 1.
MetricSeries ssim(const Tensor& generated, const Tensor& reference);

/// Exhaustive block-matching flow between two frames [C,H,W]: one (dy,dx)
/// per non-overlapping block, minimizing SSD over displacements within
/// the search radius; ties prefer the smallest displacement, then
/// lexicographic (dy,dx). Returns [2,H/block,W/block], channel 0 = dy.
Tensor block_flow(const Tensor& prev, const Tensor& next, int block = 4, int radius = 4);

/// Mean endpoint error between block-matching flow fields of the two videos,
/// one value per adjacent frame pair.
MetricSeries flow_error(const Tensor& generated, const Tensor& reference, int block = 4,
                        int radius = 4);

struct MetricsReport {
  std::string variant;
  std::string split;
  std::string config_fingerprint;
  std::vector<double> psnr_per_episode, ssim_per_episode, flow_per_episode;
  double psnr_mean = 0.0, ssim_mean = 0.0, flow_mean = 0.0;

  /// Recomputes the aggregate means from the per-episode vectors.
  void finalize();
  /// Deterministic JSON; fid and lpips are emitted as null placeholders.
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

}  // namespace swm
