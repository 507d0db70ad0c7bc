#include "swm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace swm {

namespace {

using Var = Tape::Var;
using nlohmann::json;

Var to_spatial_tokens(Tape& tp, Var x) {
  const auto sh = tp.value(x).shape;
  return tp.permute(tp.reshape(x, {sh[0], sh[1], sh[2] * sh[3]}), {0, 2, 1});
}

Var from_spatial_tokens(Tape& tp, Var tok, const std::vector<int64_t>& sh) {
  return tp.reshape(tp.permute(tok, {0, 2, 1}), sh);
}

Var sattn_block(Ctx& ctx, const std::string& name, Var x, int attn_dim) {
  auto& tp = ctx.tape;
  const auto sh = tp.value(x).shape;
  auto y = self_attention_layer(ctx, name, to_spatial_tokens(tp, x),
                                static_cast<int>(sh[1]), attn_dim, true);
  return from_spatial_tokens(tp, y, sh);
}

Var tattn_block(Ctx& ctx, const std::string& name, Var x, int attn_dim) {
  auto& tp = ctx.tape;
  const auto sh = tp.value(x).shape;
  int64_t T = sh[0], C = sh[1], hw = sh[2] * sh[3];
  auto tok = tp.permute(tp.reshape(x, {T, C, hw}), {2, 0, 1});  // [hw,T,C]
  auto y = self_attention_layer(ctx, name, tok, static_cast<int>(C), attn_dim, true);
  return tp.reshape(tp.permute(y, {1, 2, 0}), sh);
}

Var txt_block(Ctx& ctx, const std::string& name, Var x, Var text_kv, int text_dim,
              int attn_dim) {
  auto& tp = ctx.tape;
  const auto sh = tp.value(x).shape;
  auto y = cross_attention_layer(ctx, name, to_spatial_tokens(tp, x), text_kv,
                                 static_cast<int>(sh[1]), text_dim, attn_dim, false);
  return from_spatial_tokens(tp, y, sh);
}

Var res_block(Ctx& ctx, const std::string& name, Var x, Var temb, int C, int temb_dim,
              int groups) {
  auto& tp = ctx.tape;
  int64_t T = tp.value(x).shape[0];
  auto h1 = conv_layer(ctx, name + ".c1",
                       tp.silu(group_norm_layer(ctx, name + ".gn1", x, C, groups)), C, C, 3,
                       1, 1);
  auto e = linear_layer(ctx, name + ".emb", temb, temb_dim, 2 * C);  // [1,2C] scale|shift
  Tensor one = Tensor::zeros({1, C});
  for (auto& v : one.data) v = 1.0f;
  auto es = tp.add(tp.slice(e, 1, 0, C), ctx.constant(one));
  auto eb = tp.slice(e, 1, C, C);
  auto h2 = tp.add_nc(tp.mul_nc(group_norm_layer(ctx, name + ".gn2", h1, C, groups),
                                tp.repeat_leading(es, T)),
                      tp.repeat_leading(eb, T));
  auto h3 = conv_layer(ctx, name + ".c2", tp.silu(h2), C, C, 3, 1, 1, true);
  return tp.add(x, h3);
}

void clamp01(Tensor& t) {
  for (auto& v : t.data) v = std::min(1.0f, std::max(0.0f, v));
}

Tensor with_batch(const Tensor& t) {
  std::vector<int64_t> dims = {1};
  dims.insert(dims.end(), t.shape.begin(), t.shape.end());
  return Tensor::from(dims, t.data);
}

ActionSequence words_to_sequence(const std::vector<std::string>& words, const Lexicon& lex,
                                 const std::string& origin) {
  ActionSequence seq;
  bool open = false;
  ActionPair cur;
  for (const auto& w : words) {
    if (lex.is_verb(w)) {
      if (open) seq.pairs.push_back(cur);
      cur = ActionPair{w, ""};
      open = true;
    } else {
      if (!open) throw ParseError("preposition before any verb in '" + origin + "'");
      if (!cur.prep.empty())
        throw ParseError("two prepositions for one verb in '" + origin + "'");
      cur.prep = w;
    }
  }
  if (open) seq.pairs.push_back(cur);
  if (seq.pairs.empty()) throw ParseError("no action words in '" + origin + "'");
  return seq;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << text;
}

}  // namespace

// --- noise schedule -----------------------------------------------------------

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ValueError("schedule: steps must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start)
    throw ValueError("schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  double ab = 1.0;
  for (int i = 0; i < steps; ++i) {
    double beta = steps == 1 ? beta_start
                             : beta_start + (beta_end - beta_start) * i / (steps - 1.0);
    s.betas.push_back(beta);
    ab *= 1.0 - beta;
    s.abars.push_back(ab);
  }
  return s;
}

void NoiseSchedule::check_t(int t) const {
  if (t < 1 || t > steps)
    throw ValueError("timestep " + std::to_string(t) + " outside schedule [1, " +
                     std::to_string(steps) + "]");
}

double NoiseSchedule::beta(int t) const {
  check_t(t);
  return betas[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::abar(int t) const {
  if (t == 0) return 1.0;
  check_t(t);
  return abars[static_cast<size_t>(t - 1)];
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& sched) {
  sched.check_t(t);
  if (z0.shape != noise.shape) throw ShapeError("q_sample: noise shape mismatch");
  double ab = sched.abar(t);
  float a = static_cast<float>(std::sqrt(ab));
  float b = static_cast<float>(std::sqrt(1.0 - ab));
  Tensor out = z0;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * z0.data[i] + b * noise.data[i];
  return out;
}

Tensor predict_x0(const Tensor& z_t, int t, const Tensor& eps, const NoiseSchedule& sched) {
  sched.check_t(t);
  if (z_t.shape != eps.shape) throw ShapeError("predict_x0: eps shape mismatch");
  double ab = sched.abar(t);
  double a = 1.0 / std::sqrt(ab);
  double b = std::sqrt(1.0 - ab);
  Tensor out = z_t;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<float>(a * (z_t.data[i] - b * eps.data[i]));
  return out;
}

// --- patchify -------------------------------------------------------------------

Tensor patchify(const Tensor& frame, int p) {
  if (p < 1) throw ValueError("patchify: patch must be >= 1");
  if (frame.ndim() != 3 || frame.dim(0) != 3)
    throw ShapeError("patchify expects [3,H,W], got " + frame.shape_str());
  int64_t H = frame.dim(1), W = frame.dim(2);
  if (H % p != 0 || W % p != 0)
    throw ShapeError("patchify: dims not divisible by patch " + std::to_string(p));
  int64_t h = H / p, w = W / p;
  Tensor out({3LL * p * p, h, w});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t di = 0; di < p; ++di)
      for (int64_t dj = 0; dj < p; ++dj)
        for (int64_t i = 0; i < h; ++i)
          for (int64_t j = 0; j < w; ++j)
            out.data[static_cast<size_t>((((c * p + di) * p + dj) * h + i) * w + j)] =
                frame.data[static_cast<size_t>((c * H + i * p + di) * W + j * p + dj)];
  return out;
}

Tensor unpatchify(const Tensor& latent, int p) {
  if (p < 1) throw ValueError("unpatchify: patch must be >= 1");
  if (latent.ndim() != 3 || latent.dim(0) != 3LL * p * p)
    throw ShapeError("unpatchify expects [3p*p,h,w], got " + latent.shape_str());
  int64_t h = latent.dim(1), w = latent.dim(2);
  int64_t H = h * p, W = w * p;
  Tensor out({3, H, W});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t di = 0; di < p; ++di)
      for (int64_t dj = 0; dj < p; ++dj)
        for (int64_t i = 0; i < h; ++i)
          for (int64_t j = 0; j < w; ++j)
            out.data[static_cast<size_t>((c * H + i * p + di) * W + j * p + dj)] =
                latent.data[static_cast<size_t>((((c * p + di) * p + dj) * h + i) * w + j)];
  return out;
}

Tensor patchify_video(const Tensor& video, int p) {
  if (video.ndim() != 4 || video.dim(1) != 3)
    throw ShapeError("patchify_video expects [F,3,H,W], got " + video.shape_str());
  int64_t F = video.dim(0), H = video.dim(2), W = video.dim(3);
  Tensor frame({3, H, W});
  size_t n = frame.data.size();
  Tensor out;
  for (int64_t f = 0; f < F; ++f) {
    std::copy_n(video.data.begin() + static_cast<int64_t>(n) * f, n, frame.data.begin());
    Tensor lat = patchify(frame, p);
    if (f == 0) out = Tensor({F, lat.dim(0), lat.dim(1), lat.dim(2)});
    std::copy(lat.data.begin(), lat.data.end(),
              out.data.begin() + static_cast<int64_t>(lat.data.size()) * f);
  }
  return out;
}

Tensor unpatchify_video(const Tensor& latent, int p) {
  if (latent.ndim() != 4)
    throw ShapeError("unpatchify_video expects [F,C,h,w], got " + latent.shape_str());
  int64_t F = latent.dim(0);
  Tensor lat({latent.dim(1), latent.dim(2), latent.dim(3)});
  size_t n = lat.data.size();
  Tensor out;
  for (int64_t f = 0; f < F; ++f) {
    std::copy_n(latent.data.begin() + static_cast<int64_t>(n) * f, n, lat.data.begin());
    Tensor frame = unpatchify(lat, p);
    if (f == 0) out = Tensor({F, 3, frame.dim(1), frame.dim(2)});
    std::copy(frame.data.begin(), frame.data.end(),
              out.data.begin() + static_cast<int64_t>(frame.data.size()) * f);
  }
  return out;
}

// --- config ---------------------------------------------------------------------

std::vector<int> ModelConfig::injection_layers() const {
  InjectionSchedule s;
  s.decoder_layers = dec_layers;
  s.inject_every = inject_every;
  s.mode = fusion;
  s.layer_override = layer_override;
  return schedule_layers(s);
}

bool ModelConfig::any_modality() const {
  return modalities[0] || modalities[1] || modalities[2] || modalities[3];
}

void ModelConfig::validate() const {
  if (patch < 1 || image_size < patch || image_size % patch != 0)
    throw ValueError("config: image_size must be a positive multiple of patch");
  int s = latent_size();
  if (s < 2 || s % 2 != 0) throw ValueError("config: latent grid must be even and >= 2");
  if (frames < 1) throw ValueError("config: frames must be >= 1");
  if (dec_layers < 2 || dec_layers % 2 != 0)
    throw ValueError("config: dec_layers must be even and >= 2");
  if (base_channels % gn_groups != 0 || mid_channels % gn_groups != 0)
    throw ValueError("config: channel widths must be divisible by gn_groups");
  if (temb_dim < 2 || temb_dim % 2 != 0)
    throw ValueError("config: temb_dim must be even and >= 2");
  if (train_steps < 1 || sample_steps < 1)
    throw ValueError("config: step counts must be >= 1");
  if (n_max < 1) throw ValueError("config: n_max must be >= 1");
  if (use_tree && (vocab_size < 1 || text_dim < 1))
    throw ValueError("config: text table needs positive vocab_size and text_dim");
  if (any_modality()) {
    if ((patch & (patch - 1)) != 0)
      throw ValueError("config: guidance injection needs a power-of-two patch");
    if (guidance.levels < 4 || static_cast<int>(guidance.channels.size()) != guidance.levels)
      throw ValueError("config: guidance needs at least 4 levels");
    int lo = 0;
    while ((1 << lo) < patch) ++lo;
    if (lo + 1 > guidance.levels - 1)
      throw ValueError("config: patch too coarse for the guidance pyramid");
    if (image_size % (1 << (guidance.levels - 1)) != 0)
      throw ValueError("config: image_size must be divisible by 2^(levels-1)");
  }
  injection_layers();  // validates overrides against dec_layers
}

std::string ModelConfig::to_json() const {
  json j;
  j["image_size"] = image_size;
  j["frames"] = frames;
  j["patch"] = patch;
  j["base_channels"] = base_channels;
  j["mid_channels"] = mid_channels;
  j["attn_dim"] = attn_dim;
  j["temb_dim"] = temb_dim;
  j["gn_groups"] = gn_groups;
  j["dec_layers"] = dec_layers;
  j["train_steps"] = train_steps;
  j["sample_steps"] = sample_steps;
  j["schedule"] = {{"inject_every", inject_every},
                   {"fusion", fusion == FusionMode::Additive ? "additive" : "xattn"},
                   {"layer_override", layer_override}};
  j["use_tree"] = use_tree;
  json mods = json::array();
  for (int m = 0; m < 4; ++m)
    if (modalities[static_cast<size_t>(m)]) mods.push_back(kModalityNames[static_cast<size_t>(m)]);
  j["modalities"] = mods;
  j["n_max"] = n_max;
  j["text_dim"] = text_dim;
  j["vocab_size"] = vocab_size;
  j["lr"] = lr;
  j["seed"] = seed;
  j["guidance"] = {{"levels", guidance.levels},
                   {"channels", guidance.channels},
                   {"gn_groups", guidance.gn_groups},
                   {"router_hidden", guidance.router_hidden},
                   {"patch", guidance.patch},
                   {"share_router_queries", guidance.share_router_queries}};
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: invalid JSON: ") + e.what());
  }
  ModelConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.frames = j.value("frames", c.frames);
  c.patch = j.value("patch", c.patch);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.mid_channels = j.value("mid_channels", c.mid_channels);
  c.attn_dim = j.value("attn_dim", c.attn_dim);
  c.temb_dim = j.value("temb_dim", c.temb_dim);
  c.gn_groups = j.value("gn_groups", c.gn_groups);
  c.dec_layers = j.value("dec_layers", c.dec_layers);
  c.train_steps = j.value("train_steps", c.train_steps);
  c.sample_steps = j.value("sample_steps", c.sample_steps);
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    c.inject_every = s.value("inject_every", c.inject_every);
    std::string fu = s.value("fusion", "additive");
    if (fu == "additive") c.fusion = FusionMode::Additive;
    else if (fu == "xattn") c.fusion = FusionMode::CrossAttention;
    else throw ValueError("config: fusion must be 'additive' or 'xattn', got '" + fu + "'");
    if (s.contains("layer_override"))
      c.layer_override = s.at("layer_override").get<std::vector<int>>();
  }
  c.use_tree = j.value("use_tree", c.use_tree);
  if (j.contains("modalities")) {
    c.modalities = {false, false, false, false};
    for (const auto& name : j.at("modalities")) {
      std::string n = name.get<std::string>();
      bool found = false;
      for (size_t m = 0; m < 4; ++m)
        if (n == kModalityNames[m]) {
          c.modalities[m] = true;
          found = true;
        }
      if (!found) throw ValueError("config: unknown modality '" + n + "'");
    }
  }
  c.n_max = j.value("n_max", c.n_max);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  if (j.contains("guidance")) {
    const auto& g = j.at("guidance");
    c.guidance.levels = g.value("levels", c.guidance.levels);
    if (g.contains("channels")) c.guidance.channels = g.at("channels").get<std::vector<int>>();
    c.guidance.gn_groups = g.value("gn_groups", c.guidance.gn_groups);
    c.guidance.router_hidden = g.value("router_hidden", c.guidance.router_hidden);
    c.guidance.patch = g.value("patch", c.guidance.patch);
    c.guidance.share_router_queries =
        g.value("share_router_queries", c.guidance.share_router_queries);
  }
  c.validate();
  return c;
}

void ModelConfig::save(const std::string& path) const { write_text_file(path, to_json() + "\n"); }

ModelConfig ModelConfig::load(const std::string& path) { return from_json(read_text_file(path)); }

// --- model ------------------------------------------------------------------------

WorldModel::WorldModel(ModelConfig config) : cfg(std::move(config)) {
  cfg.validate();
  store.seed = cfg.seed;
  sched = NoiseSchedule::linear(cfg.train_steps);
  opt.lr = cfg.lr;
  if (cfg.use_tree)
    store.get_or_create("text.table", {cfg.vocab_size, cfg.text_dim}, Init::Scaled,
                        1.0 / std::sqrt(static_cast<double>(cfg.text_dim)));
  auto& prior = store.get_or_create("prior.mask", {1, cfg.image_size, cfg.image_size},
                                    Init::Zero, 0.0, false);
  for (auto& v : prior.data) v = 0.5f;
}

void WorldModel::init_text_table(const Lexicon& lex) {
  if (!cfg.use_tree) throw ValueError("model has no text table (use_tree is off)");
  if (lex.vocab_size() != cfg.vocab_size)
    throw ValueError("lexicon vocab " + std::to_string(lex.vocab_size()) +
                     " does not match config vocab_size " + std::to_string(cfg.vocab_size));
  store.params.at("text.table").value = EmbeddingTable::init_rows(lex, cfg.text_dim, cfg.seed);
}

std::vector<Var> WorldModel::guidance_vars(Ctx& ctx, const SceneObservation& obs) const {
  auto layers = cfg.injection_layers();
  std::vector<int> mods;
  for (int m = 0; m < 4; ++m)
    if (cfg.modalities[static_cast<size_t>(m)]) mods.push_back(m);
  if (layers.empty() || mods.empty()) return {};
  auto& tp = ctx.tape;
  auto conds = condition_stack(obs);
  std::vector<std::vector<Var>> pyr;
  for (int m : mods)
    pyr.push_back(branch_forward_t(ctx, cfg.guidance, m,
                                   ctx.constant(with_batch(conds[static_cast<size_t>(m)]))));
  const int half = cfg.dec_layers / 2;
  int base_lv = 0;
  while ((1 << base_lv) < cfg.patch) ++base_lv;
  std::map<int, Var> fused;
  for (int l : layers) {
    int lv = l < half ? base_lv + 1 : base_lv;
    if (fused.count(lv)) continue;
    std::vector<Var> feats;
    for (auto& p : pyr) feats.push_back(p[static_cast<size_t>(lv)]);
    auto scores = route_subset_t(ctx, cfg.guidance, lv, feats, mods);
    fused.emplace(lv, fuse_subset_t(ctx, feats, scores));
  }
  std::vector<Var> out;
  for (int l : layers) {
    int lv = l < half ? base_lv + 1 : base_lv;
    AdapterConfig acfg;
    acfg.in_channels = cfg.guidance.channels[static_cast<size_t>(lv)];
    acfg.attn_dim = cfg.attn_dim;
    const auto fsh = tp.value(fused.at(lv)).shape;  // [1,C,h,w]
    auto rep = replicate_temporal_t(
        tp, tp.reshape(fused.at(lv), {fsh[1], fsh[2], fsh[3]}), cfg.frames);
    out.push_back(adapt_t(ctx, "adapt.p" + std::to_string(l), acfg, rep));
  }
  return out;
}

std::vector<Tensor> WorldModel::guidance_values(const SceneObservation& obs) {
  Tape tape;
  Ctx ctx(tape, store);
  auto vars = guidance_vars(ctx, obs);
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (auto v : vars) out.push_back(tape.value(v));
  return out;
}

Var WorldModel::forward_eps(Ctx& ctx, Var z_t, int t, Var f0,
                            const std::vector<int64_t>& text_ids,
                            const std::vector<Var>& g) const {
  auto& tp = ctx.tape;
  sched.check_t(t);
  const int64_t F = cfg.frames, Cz = cfg.latent_channels(), s = cfg.latent_size();
  if (tp.value(z_t).shape != std::vector<int64_t>{F, Cz, s, s})
    throw ShapeError("forward: z_t must be [" + std::to_string(F) + "," + std::to_string(Cz) +
                     "," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                     tp.value(z_t).shape_str());
  if (tp.value(f0).shape != std::vector<int64_t>{Cz, s, s})
    throw ShapeError("forward: first-frame latent must be [" + std::to_string(Cz) + "," +
                     std::to_string(s) + "," + std::to_string(s) + "], got " +
                     tp.value(f0).shape_str());
  auto layers = cfg.injection_layers();
  if (!g.empty() && g.size() != layers.size())
    throw ValueError("forward: got " + std::to_string(g.size()) +
                     " guidance tensors for " + std::to_string(layers.size()) +
                     " injection layers");
  ++forward_count_;

  Tensor te = timestep_embedding(t, cfg.temb_dim);
  auto temb0 = ctx.constant(Tensor::from({1, cfg.temb_dim}, te.data));
  auto temb = linear_layer(
      ctx, "unet.temb.l2",
      tp.silu(linear_layer(ctx, "unet.temb.l1", temb0, cfg.temb_dim, cfg.temb_dim)),
      cfg.temb_dim, cfg.temb_dim);

  Var text_kv{};
  if (cfg.use_tree) {
    if (static_cast<int>(text_ids.size()) != 2 * cfg.n_max)
      throw ValueError("forward: expected " + std::to_string(2 * cfg.n_max) +
                       " slot ids, got " + std::to_string(text_ids.size()));
    auto table = ctx.param("text.table", {cfg.vocab_size, cfg.text_dim}, Init::Scaled,
                           1.0 / std::sqrt(static_cast<double>(cfg.text_dim)));
    std::vector<Var> rows;
    for (int64_t id : text_ids) {
      if (id >= cfg.vocab_size)
        throw ValueError("forward: slot id " + std::to_string(id) + " outside vocab");
      rows.push_back(id >= 0 ? tp.rows_lookup(table, {id})
                             : ctx.constant(Tensor::zeros({1, cfg.text_dim})));
    }
    auto slots = tp.reshape(tp.concat(rows, 0), {1, 2 * cfg.n_max, cfg.text_dim});
    text_kv = tp.repeat_leading(slots, F);  // [F, 2*n_max, D]
  }

  const int C1 = cfg.base_channels, C2 = cfg.mid_channels;
  auto f0r = tp.repeat_leading(tp.reshape(f0, {1, Cz, s, s}), F);
  auto x = conv_layer(ctx, "unet.in", tp.concat({z_t, f0r}, 1), static_cast<int>(2 * Cz),
                      C1, 3, 1, 1);

  x = res_block(ctx, "unet.enc0.res", x, temb, C1, cfg.temb_dim, cfg.gn_groups);
  x = tattn_block(ctx, "unet.enc0.tattn", x, cfg.attn_dim);
  auto skip_hi = x;

  x = tp.silu(conv_layer(ctx, "unet.down", x, C1, C2, 3, 2, 1));
  x = res_block(ctx, "unet.enc1.res", x, temb, C2, cfg.temb_dim, cfg.gn_groups);
  x = sattn_block(ctx, "unet.enc1.sattn", x, cfg.attn_dim);
  x = tattn_block(ctx, "unet.enc1.tattn", x, cfg.attn_dim);
  auto skip_lo = x;

  x = res_block(ctx, "unet.mid.res", x, temb, C2, cfg.temb_dim, cfg.gn_groups);
  x = sattn_block(ctx, "unet.mid.sattn", x, cfg.attn_dim);
  x = tattn_block(ctx, "unet.mid.tattn", x, cfg.attn_dim);
  x = tp.add(x, skip_lo);

  const int half = cfg.dec_layers / 2;
  size_t gi = 0;
  for (int l = 0; l < cfg.dec_layers; ++l) {
    if (l == half) {
      x = tp.silu(conv_layer(ctx, "unet.up", tp.upsample_nn(x, 2), C2, C1, 3, 1, 1));
      x = tp.add(x, skip_hi);
    }
    bool low = l < half;
    int C = low ? C2 : C1;
    std::string name = "unet.dec" + std::to_string(l);
    x = res_block(ctx, name + ".res", x, temb, C, cfg.temb_dim, cfg.gn_groups);
    if (low) x = sattn_block(ctx, name + ".sattn", x, cfg.attn_dim);
    x = tattn_block(ctx, name + ".tattn", x, cfg.attn_dim);
    if (cfg.use_tree) x = txt_block(ctx, name + ".txt", x, text_kv, cfg.text_dim, cfg.attn_dim);
    if (gi < layers.size() && layers[gi] == l) {
      auto skip = low ? skip_lo : skip_hi;
      std::string iname = "unet.inj" + std::to_string(l);
      AdapterConfig acfg;  // mid_channels is the adapted guidance width
      if (cfg.fusion == FusionMode::Additive) {
        if (g.empty()) x = tp.add(x, skip);
        else x = inject_additive_t(ctx, iname, x, skip, g[gi], acfg.mid_channels, C);
      } else if (!g.empty()) {
        x = inject_cross_attention_t(ctx, iname, x, g[gi], C, acfg.mid_channels,
                                     cfg.attn_dim);
      }
      ++gi;
    }
  }

  x = tp.silu(group_norm_layer(ctx, "unet.out.gn", x, C1, cfg.gn_groups));
  return conv_layer(ctx, "unet.out.conv", x, C1, static_cast<int>(Cz), 3, 1, 1, true);
}

Tensor WorldModel::eps_value(const Tensor& z_t, int t, const Tensor& f0,
                             const std::vector<int64_t>& text_ids,
                             const std::vector<Tensor>* g_pre) {
  Tape tape;
  Ctx ctx(tape, store);
  std::vector<Var> g;
  if (g_pre)
    for (const auto& gt : *g_pre) g.push_back(ctx.constant(gt));
  auto e = forward_eps(ctx, ctx.constant(z_t), t, ctx.constant(f0), text_ids, g);
  return tape.value(e);
}

double WorldModel::train_step(const std::vector<TrainItem>& batch, Rng& rng) {
  if (batch.empty()) throw ValueError("train: empty batch");
  Tape tape;
  Ctx ctx(tape, store);
  double lv = 0.0;
  std::vector<int> drawn;
  try {
    // One timestep per stratum of [1, train_steps], shuffled across the batch.
    const int64_t B = static_cast<int64_t>(batch.size());
    const int64_t N = cfg.train_steps;
    std::vector<int> ts;
    for (int64_t i = 0; i < B; ++i) {
      int64_t lo = 1 + i * N / B;
      int64_t hi = std::max(lo, (i + 1) * N / B);
      ts.push_back(static_cast<int>(rng.uniform_int(lo, hi)));
    }
    for (int64_t i = B - 1; i > 0; --i)
      std::swap(ts[static_cast<size_t>(i)],
                ts[static_cast<size_t>(rng.uniform_int(0, i))]);
    Var total{};
    for (size_t i = 0; i < batch.size(); ++i) {
      const auto& item = batch[i];
      int t = ts[i];
      drawn.push_back(t);
      Tensor eps = Tensor::zeros(item.z0.shape);
      rng.fill_normal(eps);
      Tensor zt = q_sample(item.z0, t, eps, sched);
      auto g = guidance_vars(ctx, item.obs);
      auto eh = forward_eps(ctx, ctx.constant(zt), t, ctx.constant(item.f0_latent),
                            item.text_ids, g);
      auto li = tape.mse(eh, ctx.constant(eps));
      total = i == 0 ? li : tape.add(total, li);
    }
    auto loss = tape.scale(total, 1.0 / static_cast<double>(batch.size()));
    lv = static_cast<double>(tape.value(loss).data[0]);
    if (!std::isfinite(lv)) throw NumericError("non-finite loss");
    tape.backward(loss);
  } catch (const NumericError& e) {
    std::string diag = "training step " + std::to_string(train_steps_done_) + ": " +
                       e.what() + " (batch " + std::to_string(batch.size()) + ", timesteps";
    for (int t : drawn) diag += " " + std::to_string(t);
    throw NumericError(diag + ")");
  }
  opt.lr = cfg.lr;
  opt.step(store, tape, ctx);

  auto& prior = store.params.at("prior.mask").value;
  bool shapes_ok = true;
  for (const auto& item : batch) shapes_ok = shapes_ok && item.obs.dyn_mask.shape == prior.shape;
  if (shapes_ok) {
    const float ema = 0.05f;
    for (size_t k = 0; k < prior.data.size(); ++k) {
      float m = 0.0f;
      for (const auto& item : batch) m += item.obs.dyn_mask.data[k];
      m /= static_cast<float>(batch.size());
      prior.data[k] = (1.0f - ema) * prior.data[k] + ema * m;
    }
  }
  ++train_steps_done_;
  return lv;
}

Tensor WorldModel::denoise_to(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat,
                              bool deterministic, Rng& rng) const {
  sched.check_t(t);
  if (t_prev < 0 || t_prev >= t)
    throw ValueError("denoise: t_prev must lie in [0, t)");
  if (z_t.shape != eps_hat.shape) throw ShapeError("denoise: eps shape mismatch");
  double ab_t = sched.abar(t);
  double ab_p = sched.abar(t_prev);
  double s1m_t = std::sqrt(1.0 - ab_t);
  double isab_t = 1.0 / std::sqrt(ab_t);
  Tensor out = z_t;
  if (t_prev == 0) {
    for (size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = static_cast<float>(isab_t * (z_t.data[i] - s1m_t * eps_hat.data[i]));
    return out;
  }
  double sigma2 =
      deterministic ? 0.0 : (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p);
  double sig = std::sqrt(std::max(sigma2, 0.0));
  double dir = std::sqrt(std::max(1.0 - ab_p - sigma2, 0.0));
  double sab_p = std::sqrt(ab_p);
  for (size_t i = 0; i < out.data.size(); ++i) {
    double x0 = isab_t * (z_t.data[i] - s1m_t * eps_hat.data[i]);
    double v = sab_p * x0 + dir * eps_hat.data[i];
    if (!deterministic) v += sig * rng.normal();
    out.data[i] = static_cast<float>(v);
  }
  return out;
}

Tensor WorldModel::denoise_step(const Tensor& z_t, int t, const Tensor& eps_hat,
                                bool deterministic, Rng& rng) const {
  return denoise_to(z_t, t, t - 1, eps_hat, deterministic, rng);
}

std::vector<int> WorldModel::sample_timesteps() const {
  int N = cfg.train_steps;
  int S = std::min(cfg.sample_steps, N);
  std::vector<int> ts;
  for (int i = 0; i < S; ++i) {
    int t = static_cast<int>(std::llround(static_cast<double>(S - i) * N / S));
    if (!ts.empty() && t >= ts.back()) t = ts.back() - 1;
    if (t < 1) break;
    ts.push_back(t);
  }
  return ts;
}

Tensor WorldModel::sample_video(const SceneObservation& obs,
                                const std::vector<int64_t>& text_ids, uint64_t seed,
                                bool deterministic) {
  return sample_decomposed(obs, {text_ids}, seed, deterministic);
}

Tensor WorldModel::sample_decomposed(const SceneObservation& obs,
                                     const std::vector<std::vector<int64_t>>& primitive_ids,
                                     uint64_t seed, bool deterministic) {
  if (primitive_ids.empty())
    throw ValueError("sampling needs at least one conditioning");
  const int64_t F = cfg.frames, Cz = cfg.latent_channels(), s = cfg.latent_size();
  if (obs.rgb.shape != std::vector<int64_t>{3, cfg.image_size, cfg.image_size})
    throw ShapeError("sample: observation rgb must be [3," + std::to_string(cfg.image_size) +
                     "," + std::to_string(cfg.image_size) + "], got " + obs.rgb.shape_str());
  Tensor f0 = patchify(obs.rgb, cfg.patch);
  std::vector<Tensor> gv;
  bool has_g = cfg.any_modality() && !cfg.injection_layers().empty();
  if (has_g) gv = guidance_values(obs);
  Rng rng(name_seed(seed, "sample"));
  Tensor z = Tensor::zeros({F, Cz, s, s});
  rng.fill_normal(z);
  auto ts = sample_timesteps();
  double inv_n = 1.0 / static_cast<double>(primitive_ids.size());
  for (size_t i = 0; i < ts.size(); ++i) {
    int t = ts[i];
    int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Tensor acc;
    for (size_t k = 0; k < primitive_ids.size(); ++k) {
      Tensor eh = eps_value(z, t, f0, primitive_ids[k], has_g ? &gv : nullptr);
      if (k == 0) {
        acc = std::move(eh);
      } else {
        for (size_t e = 0; e < acc.data.size(); ++e) acc.data[e] += eh.data[e];
      }
    }
    if (primitive_ids.size() > 1)
      for (auto& v : acc.data) v = static_cast<float>(v * inv_n);
    z = denoise_to(z, t, t_prev, acc, deterministic, rng);
  }
  Tensor video = unpatchify_video(z, cfg.patch);
  clamp01(video);
  return video;
}

Tensor WorldModel::mask_prior() const { return store.params.at("prior.mask").value; }

void WorldModel::save(const std::string& dir) const {
  save_checkpoint(store, dir);
  json j = json::parse(cfg.to_json());
  j["train_steps_done"] = train_steps_done_;
  write_text_file(dir + "/config.json", j.dump(2) + "\n");
}

WorldModel WorldModel::load(const std::string& dir) {
  std::string text = read_text_file(dir + "/config.json");
  WorldModel m(ModelConfig::from_json(text));
  m.store = load_checkpoint(dir);
  json j = json::parse(text);
  m.train_steps_done_ = j.value("train_steps_done", static_cast<int64_t>(0));
  return m;
}

// --- instruction-level wrappers ------------------------------------------------------

std::vector<int64_t> instruction_slot_ids(const std::string& instruction,
                                          const ActionTree& tree, const Lexicon& lex,
                                          int n_max) {
  return slot_token_ids(parse_instruction(instruction, tree, lex), lex, n_max);
}

std::vector<std::vector<int64_t>> primitive_slot_ids(const std::string& instruction,
                                                     const Lexicon& lex, int n_max) {
  auto prims = decompose_primitives(instruction, lex);
  std::vector<std::vector<int64_t>> out;
  out.reserve(prims.size());
  for (const auto& p : prims) {
    auto seq = words_to_sequence(extract_action_words(p, lex), lex, p);
    out.push_back(slot_token_ids(seq, lex, n_max));
  }
  return out;
}

Tensor sample_video(WorldModel& model, const SceneObservation& obs,
                    const std::string& instruction, const ActionTree& tree,
                    const Lexicon& lex, uint64_t seed, bool deterministic) {
  return model.sample_video(obs, instruction_slot_ids(instruction, tree, lex, model.cfg.n_max),
                            seed, deterministic);
}

Tensor sample_decomposed(WorldModel& model, const SceneObservation& obs,
                         const std::string& instruction, const ActionTree& tree,
                         const Lexicon& lex, uint64_t seed, bool deterministic) {
  parse_instruction(instruction, tree, lex);  // surface composition errors identically
  return model.sample_decomposed(obs, primitive_slot_ids(instruction, lex, model.cfg.n_max),
                                 seed, deterministic);
}

}  // namespace swm
