#include "swm/adapter.hpp"

#include <algorithm>

namespace swm {

Tensor replicate_temporal(const Tensor& fused, int T) {
  if (T < 1) throw ValueError("replicate_temporal: T must be >= 1");
  if (fused.shape.size() != 3) throw ShapeError("replicate_temporal expects [C,h,w]");
  Tensor out = Tensor::zeros({T, fused.shape[0], fused.shape[1], fused.shape[2]});
  for (int t = 0; t < T; ++t)
    std::copy(fused.data.begin(), fused.data.end(),
              out.data.begin() + static_cast<int64_t>(t) * fused.numel());
  return out;
}

std::vector<int> schedule_layers(const InjectionSchedule& s) {
  if (s.decoder_layers < 1) throw ValueError("schedule: decoder_layers must be >= 1");
  if (!s.layer_override.empty()) {
    std::vector<int> out = s.layer_override;
    for (int k : out)
      if (k < 0 || k >= s.decoder_layers)
        throw ValueError("schedule override layer " + std::to_string(k) +
                         " out of range [0," + std::to_string(s.decoder_layers) + ")");
    std::sort(out.begin(), out.end());
    for (size_t i = 1; i < out.size(); ++i)
      if (out[i] == out[i - 1])
        throw ValueError("schedule override repeats layer " + std::to_string(out[i]));
    return out;
  }
  if (s.inject_every < 1) throw ValueError("schedule: inject_every must be >= 1");
  std::vector<int> out;
  for (int k = 0; k < s.decoder_layers; ++k)
    if ((k + 1) % s.inject_every == 0) out.push_back(k);
  return out;
}

}  // namespace swm
