#pragma once

#include <array>
#include <string>
#include <vector>

#include "swm/modalities.hpp"
#include "swm/nn.hpp"

namespace swm {

/// Fixed modality order used everywhere: index into condition stacks, router
/// score channels, and parameter names.
inline constexpr std::array<const char*, 4> kModalityNames = {"depth", "semantic", "rgb",
                                                              "mask"};

struct GuidanceConfig {
  int levels = 4;
  std::vector<int> channels = {8, 16, 24, 32};
  int gn_groups = 4;
  std::array<int, 4> cond_channels = {1, 8, 3, 1};  // depth, semantic, rgb, mask
  int router_hidden = 16;
  int patch = 1;
  bool share_router_queries = false;
};

/// The four condition tensors of an observation in modality order.
std::array<Tensor, 4> condition_stack(const SceneObservation& obs);

/// Control branch: per stage a stride-2 (stride-1 at stage 0) 3x3 conv trunk
/// with a zero-initialized 1x1 input shortcut, emitting a zero-initialized 1x1
/// tap per stage. Fresh branches therefore produce all-zero pyramids.
template <typename S>
std::vector<typename TapeT<S>::Var> branch_forward_t(CtxT<S>& ctx, const GuidanceConfig& cfg,
                                                     int modality,
                                                     typename TapeT<S>::Var cond) {
  auto& tp = ctx.tape;
  if (modality < 0 || modality >= 4) throw ValueError("modality index out of range");
  if (static_cast<int>(cfg.channels.size()) != cfg.levels)
    throw ValueError("guidance config: channels size must equal levels");
  const auto& in_shape = tp.value(cond).shape;
  if (in_shape.size() != 4)
    throw ShapeError("branch condition must be [N,C,H,W], got rank " +
                     std::to_string(in_shape.size()));
  if (in_shape[1] != cfg.cond_channels[static_cast<size_t>(modality)])
    throw ShapeError(std::string("branch '") + kModalityNames[static_cast<size_t>(modality)] +
                     "' expects " +
                     std::to_string(cfg.cond_channels[static_cast<size_t>(modality)]) +
                     " condition channels, got " + std::to_string(in_shape[1]));

  std::vector<typename TapeT<S>::Var> taps;
  auto x = cond;
  int cin = cfg.cond_channels[static_cast<size_t>(modality)];
  for (int l = 0; l < cfg.levels; ++l) {
    int cout = cfg.channels[static_cast<size_t>(l)];
    if (cout % cfg.gn_groups != 0)
      throw ValueError("level channels must be divisible by gn_groups");
    int stride = (l == 0) ? 1 : 2;
    std::string name =
        std::string("guid.") + kModalityNames[static_cast<size_t>(modality)] + ".s" +
        std::to_string(l);
    auto conv = conv_layer(ctx, name + ".conv", x, cin, cout, 3, stride, 1);
    auto act = tp.silu(group_norm_layer(ctx, name + ".gn", conv, cout, cfg.gn_groups));
    auto shortcut = conv_layer(ctx, name + ".in", x, cin, cout, 1, stride, 0, true);
    auto trunk = tp.add(act, shortcut);
    taps.push_back(conv_layer(ctx, name + ".out", trunk, cout, cout, 1, 1, 0, true));
    x = trunk;
    cin = cout;
  }
  return taps;
}

/// Patch-level router over an enabled-modality subset: a shared per-modality
/// encoder followed by one zero-initialized query head per modality (heads
/// keyed by the logical modality index), softmax over the modality axis.
/// Returns [N,k,h,w] for k enabled modalities.
template <typename S>
typename TapeT<S>::Var route_subset_t(CtxT<S>& ctx, const GuidanceConfig& cfg, int level,
                                      const std::vector<typename TapeT<S>::Var>& feats,
                                      const std::vector<int>& modality_ids) {
  auto& tp = ctx.tape;
  if (level < 0 || level >= cfg.levels) throw ValueError("router level out of range");
  if (feats.empty() || feats.size() != modality_ids.size())
    throw ValueError("router: features and modality ids must pair up");
  const auto shape0 = tp.value(feats[0]).shape;
  for (const auto& f : feats)
    if (tp.value(f).shape != shape0)
      throw ShapeError("router: modality pyramids misaligned at level " +
                       std::to_string(level));
  if (shape0.size() != 4) throw ShapeError("router features must be [N,C,h,w]");
  int64_t N = shape0[0], C = shape0[1], h = shape0[2], w = shape0[3];
  if (C != cfg.channels[static_cast<size_t>(level)])
    throw ShapeError("router level " + std::to_string(level) + " expects " +
                     std::to_string(cfg.channels[static_cast<size_t>(level)]) +
                     " channels, got " + std::to_string(C));
  int P = cfg.patch;
  if (P < 1) throw ValueError("patch size must be >= 1");
  if (h % P != 0 || w % P != 0)
    throw ShapeError("level dims " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by patch " + std::to_string(P));
  int64_t hp = h / P, wp = w / P;
  int64_t k = static_cast<int64_t>(feats.size());

  std::string enc_name = "guid.router.l" + std::to_string(level) + ".enc";
  std::string qbase = cfg.share_router_queries ? std::string("guid.router.shared")
                                               : "guid.router.l" + std::to_string(level);
  std::vector<typename TapeT<S>::Var> logit_cols;
  for (size_t i = 0; i < feats.size(); ++i) {
    int m = modality_ids[i];
    if (m < 0 || m >= 4) throw ValueError("modality id out of range");
    auto x = feats[i];
    if (P > 1) x = tp.avgpool(x, P);
    auto tokens = tp.reshape(tp.permute(x, {0, 2, 3, 1}), {N * hp * wp, C});
    auto hid = tp.tanh_act(
        linear_layer(ctx, enc_name, tokens, static_cast<int>(C), cfg.router_hidden));
    logit_cols.push_back(linear_layer(ctx, qbase + ".q" + std::to_string(m), hid,
                                      cfg.router_hidden, 1, true));
  }
  auto logits = tp.concat(logit_cols, 1);           // [N*hp*wp, k]
  auto probs = tp.softmax(logits, 1);
  auto scores = tp.permute(tp.reshape(probs, {N, hp, wp, k}), {0, 3, 1, 2});
  if (P > 1) scores = tp.upsample_nn(scores, P);
  return scores;
}

template <typename S>
typename TapeT<S>::Var route_level_t(CtxT<S>& ctx, const GuidanceConfig& cfg, int level,
                                     const std::array<typename TapeT<S>::Var, 4>& feats) {
  return route_subset_t(ctx, cfg, level, {feats[0], feats[1], feats[2], feats[3]},
                        {0, 1, 2, 3});
}

/// Convex per-patch combination over k modalities: fused = sum_i scores[:,i] * feats[i].
template <typename S>
typename TapeT<S>::Var fuse_subset_t(CtxT<S>& ctx,
                                     const std::vector<typename TapeT<S>::Var>& feats,
                                     typename TapeT<S>::Var scores) {
  auto& tp = ctx.tape;
  if (feats.empty()) throw ValueError("fuse: no features");
  const auto fsh = tp.value(feats[0]).shape;
  const auto ssh = tp.value(scores).shape;
  if (ssh.size() != 4 || ssh[1] != static_cast<int64_t>(feats.size()))
    throw ShapeError("fuse: scores must be [N,k,h,w] with one channel per modality");
  if (fsh[0] != ssh[0] || fsh[2] != ssh[2] || fsh[3] != ssh[3])
    throw ShapeError("fuse: scores dims do not match features");
  typename TapeT<S>::Var fused{};
  for (size_t i = 0; i < feats.size(); ++i) {
    auto sm = tp.slice(scores, 1, static_cast<int64_t>(i), 1);  // [N,1,h,w]
    auto term = tp.mul_chan_bcast(feats[i], sm);
    fused = (i == 0) ? term : tp.add(fused, term);
  }
  return fused;
}

template <typename S>
typename TapeT<S>::Var fuse_level_t(CtxT<S>& ctx, const std::array<typename TapeT<S>::Var, 4>& feats,
                                    typename TapeT<S>::Var scores) {
  return fuse_subset_t(ctx, {feats[0], feats[1], feats[2], feats[3]}, scores);
}

std::vector<Tensor> branch_pyramid(ParamStore& store, const GuidanceConfig& cfg,
                                   int modality, const Tensor& cond);
std::vector<Tensor> route_scores(ParamStore& store, const GuidanceConfig& cfg,
                                 const SceneObservation& obs);
std::vector<Tensor> fused_guidance(ParamStore& store, const GuidanceConfig& cfg,
                                   const SceneObservation& obs,
                                   std::vector<Tensor>* scores_out = nullptr);

struct WeightReport {
  std::vector<std::array<double, 4>> level_means;
};

/// Mean router scores per level over a set of observations.
WeightReport weight_report(ParamStore& store, const GuidanceConfig& cfg,
                           const std::vector<SceneObservation>& observations);

}  // namespace swm
