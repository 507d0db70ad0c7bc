#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "swm/autograd.hpp"

namespace swm {

enum class Init { Zero, Ones, Scaled };

template <typename S>
struct ParamEntryT {
  TensorT<S> value;
  TensorT<S> m, v;  // Adam moments, sized on first update
  bool trainable = true;
};

/// Named parameters with per-name deterministic initialization. Ordered map so
/// iteration, checkpointing, and updates are reproducible.
template <typename S>
struct ParamStoreT {
  uint64_t seed = 0;
  std::map<std::string, ParamEntryT<S>> params;

  bool has(const std::string& name) const { return params.count(name) != 0; }

  TensorT<S>& get_or_create(const std::string& name, const std::vector<int64_t>& shape,
                            Init init, double scale = 0.0, bool trainable = true) {
    auto it = params.find(name);
    if (it != params.end()) {
      if (it->second.value.shape != shape)
        throw ShapeError("param '" + name + "' exists with shape " +
                         it->second.value.shape_str());
      return it->second.value;
    }
    ParamEntryT<S> e;
    e.value = TensorT<S>::zeros(shape);
    e.trainable = trainable;
    if (init == Init::Ones) {
      std::fill(e.value.data.begin(), e.value.data.end(), S(1));
    } else if (init == Init::Scaled) {
      Rng rng(name_seed(seed, name));
      for (auto& v : e.value.data) v = static_cast<S>(rng.normal() * scale);
    }
    auto res = params.emplace(name, std::move(e));
    return res.first->second.value;
  }

  TensorT<S>& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ValueError("no such param: " + name);
    return it->second.value;
  }
  const TensorT<S>& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ValueError("no such param: " + name);
    return it->second.value;
  }
};

/// One graph build: tape + store + the leaf created for each touched param.
template <typename S>
struct CtxT {
  TapeT<S>& tape;
  ParamStoreT<S>& store;
  std::map<std::string, typename TapeT<S>::Var> leaves;

  CtxT(TapeT<S>& t, ParamStoreT<S>& s) : tape(t), store(s) {}

  typename TapeT<S>::Var param(const std::string& name, const std::vector<int64_t>& shape,
                               Init init, double scale = 0.0) {
    auto it = leaves.find(name);
    if (it != leaves.end()) return it->second;
    TensorT<S>& value = store.get_or_create(name, shape, init, scale);
    auto var = tape.leaf(value);
    leaves.emplace(name, var);
    return var;
  }

  typename TapeT<S>::Var constant(const TensorT<S>& t) { return tape.constant(t); }
};

template <typename S>
typename TapeT<S>::Var conv_layer(CtxT<S>& ctx, const std::string& name,
                                  typename TapeT<S>::Var x, int cin, int cout, int k,
                                  int stride, int pad, bool zero_init = false) {
  double scale = 1.0 / std::sqrt(static_cast<double>(cin) * k * k);
  auto w = ctx.param(name + ".w", {cout, cin, k, k},
                     zero_init ? Init::Zero : Init::Scaled, scale);
  auto b = ctx.param(name + ".b", {cout}, Init::Zero);
  return ctx.tape.conv2d(x, w, b, stride, stride, pad, pad);
}

/// x [N,K] -> [N,M]; weight stored [K,M].
template <typename S>
typename TapeT<S>::Var linear_layer(CtxT<S>& ctx, const std::string& name,
                                    typename TapeT<S>::Var x, int in, int out,
                                    bool zero_init = false) {
  double scale = 1.0 / std::sqrt(static_cast<double>(in));
  auto w = ctx.param(name + ".w", {in, out}, zero_init ? Init::Zero : Init::Scaled, scale);
  auto b = ctx.param(name + ".b", {out}, Init::Zero);
  return ctx.tape.linear(x, w, b);
}

/// x [B,N,C] -> [B,N,M] via a shared linear over the token axis.
template <typename S>
typename TapeT<S>::Var token_linear(CtxT<S>& ctx, const std::string& name,
                                    typename TapeT<S>::Var x, int in, int out,
                                    bool zero_init = false) {
  auto& tp = ctx.tape;
  const auto sh = tp.value(x).shape;
  if (sh.size() != 3) throw ShapeError("token_linear expects [B,N,C]");
  int64_t B = sh[0], N = sh[1];
  auto flat = tp.reshape(x, {B * N, sh[2]});
  auto y = linear_layer(ctx, name, flat, in, out, zero_init);
  return tp.reshape(y, {B, N, out});
}

template <typename S>
typename TapeT<S>::Var group_norm_layer(CtxT<S>& ctx, const std::string& name,
                                        typename TapeT<S>::Var x, int channels,
                                        int groups) {
  auto gamma = ctx.param(name + ".g", {channels}, Init::Ones);
  auto beta = ctx.param(name + ".b", {channels}, Init::Zero);
  return ctx.tape.group_norm(x, gamma, beta, groups);
}

/// Residual self-attention over tokens x [B,N,C].
template <typename S>
typename TapeT<S>::Var self_attention_layer(CtxT<S>& ctx, const std::string& name,
                                            typename TapeT<S>::Var x, int channels,
                                            int dim, bool zero_out = true) {
  auto q = token_linear(ctx, name + ".q", x, channels, dim);
  auto k = token_linear(ctx, name + ".k", x, channels, dim);
  auto v = token_linear(ctx, name + ".v", x, channels, dim);
  auto att = attention(ctx.tape, q, k, v);
  auto out = token_linear(ctx, name + ".o", att, dim, channels, zero_out);
  return ctx.tape.add(x, out);
}

/// Residual cross-attention: queries from x [B,Nq,C], keys/values from
/// kv [B,Nk,Ck].
template <typename S>
typename TapeT<S>::Var cross_attention_layer(CtxT<S>& ctx, const std::string& name,
                                             typename TapeT<S>::Var x,
                                             typename TapeT<S>::Var kv, int channels,
                                             int kv_channels, int dim,
                                             bool zero_out = true) {
  auto q = token_linear(ctx, name + ".q", x, channels, dim);
  auto k = token_linear(ctx, name + ".k", kv, kv_channels, dim);
  auto v = token_linear(ctx, name + ".v", kv, kv_channels, dim);
  auto att = attention(ctx.tape, q, k, v);
  auto out = token_linear(ctx, name + ".o", att, dim, channels, zero_out);
  return ctx.tape.add(x, out);
}

template <typename S>
struct AdamT {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;

  /// Applies one update to every trainable param whose leaf received gradient.
  void step(ParamStoreT<S>& store, TapeT<S>& tape, const CtxT<S>& ctx) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (const auto& [name, var] : ctx.leaves) {
      auto& entry = store.params.at(name);
      if (!entry.trainable) continue;
      const TensorT<S>& g = tape.grad(var);
      if (g.data.empty()) continue;
      if (entry.m.data.empty()) {
        entry.m = TensorT<S>::zeros(entry.value.shape);
        entry.v = TensorT<S>::zeros(entry.value.shape);
      }
      for (int64_t i = 0; i < entry.value.numel(); ++i) {
        double gi = g.data[static_cast<size_t>(i)];
        double m = beta1 * entry.m.data[static_cast<size_t>(i)] + (1 - beta1) * gi;
        double v = beta2 * entry.v.data[static_cast<size_t>(i)] + (1 - beta2) * gi * gi;
        entry.m.data[static_cast<size_t>(i)] = static_cast<S>(m);
        entry.v.data[static_cast<size_t>(i)] = static_cast<S>(v);
        entry.value.data[static_cast<size_t>(i)] -=
            static_cast<S>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
      }
    }
  }
};

using ParamStore = ParamStoreT<float>;
using Ctx = CtxT<float>;
using Adam = AdamT<float>;

/// Standard sinusoidal embedding of an integer timestep.
Tensor timestep_embedding(int t, int dim);

/// Directory of <name>.mdtn files plus manifest.json.
void save_checkpoint(const ParamStore& store, const std::string& dir);
ParamStore load_checkpoint(const std::string& dir);

}  // namespace swm
