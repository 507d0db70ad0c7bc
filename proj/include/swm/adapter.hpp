#pragma once

#include <string>
#include <vector>

#include "swm/nn.hpp"

namespace swm {

struct AdapterConfig {
  int in_channels = 24;
  int mid_channels = 32;
  int attn_dim = 32;
  bool temporal_pos_emb = true;
};

/// fused [C,h,w] -> [T,C,h,w] with every frame slice equal to the input.
template <typename S>
typename TapeT<S>::Var replicate_temporal_t(TapeT<S>& tape, typename TapeT<S>::Var fused,
                                            int T) {
  if (T < 1) throw ValueError("replicate_temporal: T must be >= 1");
  const auto& sh = tape.value(fused).shape;
  if (sh.size() != 3) throw ShapeError("replicate_temporal expects [C,h,w]");
  auto one = tape.reshape(fused, {1, sh[0], sh[1], sh[2]});
  return tape.repeat_leading(one, T);
}

Tensor replicate_temporal(const Tensor& fused, int T);

template <typename S>
typename TapeT<S>::Var adapter_spatial_conv(CtxT<S>& ctx, const std::string& prefix,
                                            const AdapterConfig& cfg,
                                            typename TapeT<S>::Var x) {
  auto y = conv_layer(ctx, prefix + ".sconv", x, cfg.in_channels, cfg.mid_channels, 3, 1, 1);
  return ctx.tape.silu(y);
}

/// Per-pixel temporal convolution (kernel 3, replicate padded along time).
template <typename S>
typename TapeT<S>::Var adapter_temporal_conv(CtxT<S>& ctx, const std::string& prefix,
                                             const AdapterConfig& cfg,
                                             typename TapeT<S>::Var x) {
  auto& tp = ctx.tape;
  const auto sh = tp.value(x).shape;
  if (sh.size() != 4) throw ShapeError("temporal conv expects [T,C,h,w]");
  int64_t T = sh[0], C = sh[1], h = sh[2], w = sh[3];
  if (C != cfg.mid_channels)
    throw ShapeError("temporal conv expects " + std::to_string(cfg.mid_channels) +
                     " channels, got " + std::to_string(C));
  auto seq = tp.permute(tp.reshape(x, {T, C, h * w}), {1, 0, 2});  // [C,T,hw]
  auto first = tp.slice(seq, 1, 0, 1);
  auto last = tp.slice(seq, 1, T - 1, 1);
  auto padded = tp.concat({first, seq, last}, 1);                  // [C,T+2,hw]
  auto img = tp.reshape(padded, {1, C, T + 2, h * w});
  double scale = 1.0 / std::sqrt(3.0 * static_cast<double>(C));
  auto wv = ctx.param(prefix + ".tconv.w", {C, C, 3, 1}, Init::Scaled, scale);
  auto bv = ctx.param(prefix + ".tconv.b", {C}, Init::Zero);
  auto conv = tp.conv2d(img, wv, bv, 1, 1, 0, 0);                  // [1,C,T,hw]
  auto back = tp.reshape(tp.permute(tp.reshape(conv, {C, T, h * w}), {1, 0, 2}),
                         {T, C, h, w});
  return tp.silu(back);
}

/// Per-frame residual self-attention over spatial tokens.
template <typename S>
typename TapeT<S>::Var adapter_spatial_attn(CtxT<S>& ctx, const std::string& prefix,
                                            const AdapterConfig& cfg,
                                            typename TapeT<S>::Var x) {
  auto& tp = ctx.tape;
  const auto sh = tp.value(x).shape;
  int64_t T = sh[0], C = sh[1], h = sh[2], w = sh[3];
  auto tokens = tp.permute(tp.reshape(x, {T, C, h * w}), {0, 2, 1});  // [T,hw,C]
  auto y = self_attention_layer(ctx, prefix + ".sattn", tokens, static_cast<int>(C),
                                cfg.attn_dim, false);
  return tp.reshape(tp.permute(y, {0, 2, 1}), {T, C, h, w});
}

/// Per-pixel residual self-attention over time; attention inputs carry learned
/// additive temporal positional embeddings when enabled.
template <typename S>
typename TapeT<S>::Var adapter_temporal_attn(CtxT<S>& ctx, const std::string& prefix,
                                             const AdapterConfig& cfg,
                                             typename TapeT<S>::Var x) {
  auto& tp = ctx.tape;
  const auto sh = tp.value(x).shape;
  int64_t T = sh[0], C = sh[1], h = sh[2], w = sh[3];
  auto tokens = tp.permute(tp.reshape(x, {T, C, h * w}), {2, 0, 1});  // [hw,T,C]
  if (cfg.temporal_pos_emb) {
    auto pos = ctx.param(prefix + ".pos", {T, C}, Init::Scaled, 0.1);
    tokens = tp.bias_rows(tokens, pos);
  }
  auto y = self_attention_layer(ctx, prefix + ".tattn", tokens, static_cast<int>(C),
                                cfg.attn_dim, false);
  return tp.reshape(tp.permute(y, {1, 2, 0}), {T, C, h, w});
}

/// Four-stage spatial-temporal adapter over replicated guidance features.
template <typename S>
typename TapeT<S>::Var adapt_t(CtxT<S>& ctx, const std::string& prefix,
                               const AdapterConfig& cfg, typename TapeT<S>::Var replicated) {
  auto f1 = adapter_spatial_conv(ctx, prefix, cfg, replicated);
  auto f2 = adapter_temporal_conv(ctx, prefix, cfg, f1);
  auto f3 = adapter_spatial_attn(ctx, prefix, cfg, f2);
  return adapter_temporal_attn(ctx, prefix, cfg, f3);
}

/// decoder_hidden + residual + zero-initialized 1x1 projection of g.
template <typename S>
typename TapeT<S>::Var inject_additive_t(CtxT<S>& ctx, const std::string& name,
                                         typename TapeT<S>::Var decoder_hidden,
                                         typename TapeT<S>::Var residual,
                                         typename TapeT<S>::Var g, int g_channels,
                                         int dec_channels) {
  auto& tp = ctx.tape;
  auto proj = conv_layer(ctx, name + ".proj", g, g_channels, dec_channels, 1, 1, 0, true);
  return tp.add(tp.add(decoder_hidden, residual), proj);
}

/// decoder_hidden + CrossAttn(Q=decoder tokens, K=V=guidance tokens), with a
/// zero-initialized output projection. Tokens are all T*h*w positions.
template <typename S>
typename TapeT<S>::Var inject_cross_attention_t(CtxT<S>& ctx, const std::string& name,
                                                typename TapeT<S>::Var decoder_hidden,
                                                typename TapeT<S>::Var g, int dec_channels,
                                                int g_channels, int attn_dim) {
  auto& tp = ctx.tape;
  const auto hs = tp.value(decoder_hidden).shape;
  const auto gs = tp.value(g).shape;
  if (hs.size() != 4 || gs.size() != 4)
    throw ShapeError("cross-attention injection expects [T,C,h,w] inputs");
  if (hs[0] != gs[0] || hs[2] != gs[2] || hs[3] != gs[3])
    throw ShapeError("guidance dims " + tp.value(g).shape_str() +
                     " do not align with decoder hidden " +
                     tp.value(decoder_hidden).shape_str());
  int64_t T = hs[0], C = hs[1], h = hs[2], w = hs[3];
  auto htok = tp.reshape(tp.permute(tp.reshape(decoder_hidden, {T, C, h * w}), {0, 2, 1}),
                         {1, T * h * w, C});
  auto gtok = tp.reshape(tp.permute(tp.reshape(g, {T, gs[1], h * w}), {0, 2, 1}),
                         {1, T * h * w, gs[1]});
  auto y = cross_attention_layer(ctx, name + ".xattn", htok, gtok, dec_channels,
                                 g_channels, attn_dim, true);
  return tp.reshape(tp.permute(tp.reshape(y, {T, h * w, C}), {0, 2, 1}), {T, C, h, w});
}

enum class FusionMode { Additive, CrossAttention };

struct InjectionSchedule {
  int decoder_layers = 12;
  int inject_every = 3;
  FusionMode mode = FusionMode::Additive;
  std::vector<int> layer_override;  // empty = arithmetic rule
};

/// Default rule: inject after every `inject_every` layers, i.e. indices k with
/// (k+1) % inject_every == 0. Overrides are validated against the layer count.
std::vector<int> schedule_layers(const InjectionSchedule& s);

}  // namespace swm
