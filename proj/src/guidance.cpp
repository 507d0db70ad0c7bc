#include "swm/guidance.hpp"

namespace swm {

namespace {

Tensor with_batch(const Tensor& t) {
  if (t.shape.size() != 3) throw ShapeError("condition must be [C,H,W]");
  Tensor out = t;
  out.shape.insert(out.shape.begin(), 1);
  return out;
}

Tensor squeeze_batch(const Tensor& t) {
  if (t.shape.empty() || t.shape[0] != 1) throw ShapeError("expected leading batch of 1");
  Tensor out = t;
  out.shape.erase(out.shape.begin());
  return out;
}

}  // namespace

std::array<Tensor, 4> condition_stack(const SceneObservation& obs) {
  return {obs.depth, obs.semantic, obs.rgb, obs.dyn_mask};
}

std::vector<Tensor> branch_pyramid(ParamStore& store, const GuidanceConfig& cfg,
                                   int modality, const Tensor& cond) {
  Tape tape;
  Ctx ctx(tape, store);
  auto v = tape.constant(with_batch(cond));
  auto levels = branch_forward_t(ctx, cfg, modality, v);
  std::vector<Tensor> out;
  for (auto lvl : levels) out.push_back(squeeze_batch(tape.value(lvl)));
  return out;
}

std::vector<Tensor> route_scores(ParamStore& store, const GuidanceConfig& cfg,
                                 const SceneObservation& obs) {
  std::vector<Tensor> scores;
  fused_guidance(store, cfg, obs, &scores);
  return scores;
}

std::vector<Tensor> fused_guidance(ParamStore& store, const GuidanceConfig& cfg,
                                   const SceneObservation& obs,
                                   std::vector<Tensor>* scores_out) {
  Tape tape;
  Ctx ctx(tape, store);
  auto conds = condition_stack(obs);
  std::array<std::vector<Tape::Var>, 4> pyramids;
  for (int m = 0; m < 4; ++m) {
    auto v = tape.constant(with_batch(conds[static_cast<size_t>(m)]));
    pyramids[static_cast<size_t>(m)] = branch_forward_t(ctx, cfg, m, v);
  }
  std::vector<Tensor> fused;
  if (scores_out) scores_out->clear();
  for (int l = 0; l < cfg.levels; ++l) {
    std::array<Tape::Var, 4> feats = {
        pyramids[0][static_cast<size_t>(l)], pyramids[1][static_cast<size_t>(l)],
        pyramids[2][static_cast<size_t>(l)], pyramids[3][static_cast<size_t>(l)]};
    auto sc = route_level_t(ctx, cfg, l, feats);
    auto fu = fuse_level_t(ctx, feats, sc);
    if (scores_out) scores_out->push_back(squeeze_batch(tape.value(sc)));
    fused.push_back(squeeze_batch(tape.value(fu)));
  }
  return fused;
}

WeightReport weight_report(ParamStore& store, const GuidanceConfig& cfg,
                           const std::vector<SceneObservation>& observations) {
  if (observations.empty()) throw ValueError("weight report needs at least one observation");
  WeightReport rep;
  rep.level_means.assign(static_cast<size_t>(cfg.levels), {0.0, 0.0, 0.0, 0.0});
  for (const auto& obs : observations) {
    auto scores = route_scores(store, cfg, obs);
    for (int l = 0; l < cfg.levels; ++l) {
      const Tensor& s = scores[static_cast<size_t>(l)];  // [4,h,w]
      int64_t hw = s.shape[1] * s.shape[2];
      for (int m = 0; m < 4; ++m) {
        double acc = 0;
        for (int64_t i = 0; i < hw; ++i)
          acc += s.data[static_cast<size_t>(m * hw + i)];
        rep.level_means[static_cast<size_t>(l)][static_cast<size_t>(m)] +=
            acc / static_cast<double>(hw);
      }
    }
  }
  for (auto& lv : rep.level_means)
    for (auto& v : lv) v /= static_cast<double>(observations.size());
  return rep;
}

}  // namespace swm
