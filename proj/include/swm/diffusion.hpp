#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "swm/action_tree.hpp"
#include "swm/adapter.hpp"
#include "swm/guidance.hpp"
#include "swm/modalities.hpp"
#include "swm/nn.hpp"

namespace swm {

/// Linear-beta noise schedule. Timesteps run 1..steps; abar(t) is the
/// cumulative alpha product through t and is strictly decreasing, abar(0) = 1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;   // betas[t-1] for t in 1..steps
  std::vector<double> abars;   // abars[t-1]

  static NoiseSchedule linear(int steps = 100, double beta_start = 1e-4,
                              double beta_end = 0.02);
  double beta(int t) const;
  double alpha(int t) const { return 1.0 - beta(t); }
  double abar(int t) const;
  void check_t(int t) const;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise.
Tensor q_sample(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& sched);

/// Single-shot inversion: z0 = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
Tensor predict_x0(const Tensor& z_t, int t, const Tensor& eps, const NoiseSchedule& sched);

/// Space-to-depth latents: [3,H,W] <-> [3*p*p, H/p, W/p]; exact inverses.
Tensor patchify(const Tensor& frame, int p);
Tensor unpatchify(const Tensor& latent, int p);
Tensor patchify_video(const Tensor& video, int p);    // [F,3,H,W] -> [F,3p*p,H/p,W/p]
Tensor unpatchify_video(const Tensor& latent, int p);

struct ModelConfig {
  int image_size = 32;
  int frames = 8;          // predicted future frames
  int patch = 2;
  int base_channels = 32;  // width at full latent resolution
  int mid_channels = 48;   // width at half latent resolution
  int attn_dim = 32;
  int temb_dim = 32;
  int gn_groups = 8;
  int dec_layers = 6;      // even; first half at half res, second at full res
  int train_steps = 100;
  int sample_steps = 50;
  int inject_every = 3;
  std::vector<int> layer_override;  // optional explicit injection layers
  FusionMode fusion = FusionMode::Additive;
  bool use_tree = true;
  std::array<bool, 4> modalities{true, true, true, true};  // depth, semantic, rgb, mask
  int n_max = 2;
  int text_dim = 32;
  int vocab_size = 16;
  double lr = 2e-3;
  uint64_t seed = 0;
  GuidanceConfig guidance;

  int latent_channels() const { return 3 * patch * patch; }
  int latent_size() const { return image_size / patch; }
  std::vector<int> injection_layers() const;
  bool any_modality() const;
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  void save(const std::string& path) const;
  static ModelConfig load(const std::string& path);
};

struct TrainItem {
  Tensor z0;                      // [F, 3p*p, s, s] latent future frames
  Tensor f0_latent;               // [3p*p, s, s] latent of the observed frame
  SceneObservation obs;
  std::vector<int64_t> text_ids;  // 2*n_max slot ids, -1 for empty slots
};

/// Conditional eps-prediction video model: latent UNet over patchified frames
/// with first-frame concatenation, optional action-slot cross-attention and
/// scheduled multi-modal guidance injection.
class WorldModel {
 public:
  ModelConfig cfg;
  ParamStore store;
  NoiseSchedule sched;
  Adam opt;

  explicit WorldModel(ModelConfig config);

  /// Copies the deterministic per-token embedding rows into the trainable
  /// text table; lexicon vocab must match cfg.vocab_size.
  void init_text_table(const Lexicon& lex);

  /// Builds the eps-prediction graph; increments the forward counter.
  /// `g` holds one adapted guidance tensor per injection layer (empty = none).
  Tape::Var forward_eps(Ctx& ctx, Tape::Var z_t, int t, Tape::Var f0,
                        const std::vector<int64_t>& text_ids,
                        const std::vector<Tape::Var>& g) const;

  /// Branch/route/fuse/adapt the enabled modalities; one output per
  /// injection layer. Empty when no modality is enabled or nothing is
  /// scheduled.
  std::vector<Tape::Var> guidance_vars(Ctx& ctx, const SceneObservation& obs) const;
  std::vector<Tensor> guidance_values(const SceneObservation& obs);

  /// One optimizer step on a batch; returns the scalar loss. Non-finite
  /// losses raise NumericError with step diagnostics.
  double train_step(const std::vector<TrainItem>& batch, Rng& rng);

  /// eps-hat on plain tensors (fresh tape per call). `g_pre` carries
  /// precomputed guidance values, null for none.
  Tensor eps_value(const Tensor& z_t, int t, const Tensor& f0,
                   const std::vector<int64_t>& text_ids,
                   const std::vector<Tensor>* g_pre);

  /// Ancestral/deterministic update from t to t_prev (abar(0) = 1; t_prev = 0
  /// returns the predicted z0).
  Tensor denoise_to(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat,
                    bool deterministic, Rng& rng) const;
  Tensor denoise_step(const Tensor& z_t, int t, const Tensor& eps_hat,
                      bool deterministic, Rng& rng) const;

  /// Strictly decreasing sampling timesteps ending at the first step.
  std::vector<int> sample_timesteps() const;

  /// Full reverse process -> [F,3,H,W] in [0,1].
  Tensor sample_video(const SceneObservation& obs, const std::vector<int64_t>& text_ids,
                      uint64_t seed, bool deterministic = true);

  /// Decomposition baseline: per step, average eps-hat over the primitive
  /// conditionings (n forwards per step).
  Tensor sample_decomposed(const SceneObservation& obs,
                           const std::vector<std::vector<int64_t>>& primitive_ids,
                           uint64_t seed, bool deterministic = true);

  int64_t forward_count() const { return forward_count_; }
  void reset_forward_count() { forward_count_ = 0; }
  int64_t train_steps_done() const { return train_steps_done_; }

  /// EMA over training-batch dynamic masks; observation fallback when only a
  /// single frame is available at inference time.
  Tensor mask_prior() const;

  void save(const std::string& dir) const;
  static WorldModel load(const std::string& dir);

 private:
  mutable int64_t forward_count_ = 0;
  int64_t train_steps_done_ = 0;
};

/// Slot ids for a full instruction (tree parse; parse errors propagate).
std::vector<int64_t> instruction_slot_ids(const std::string& instruction,
                                          const ActionTree& tree, const Lexicon& lex,
                                          int n_max);

/// Slot ids for each primitive clause of the instruction.
std::vector<std::vector<int64_t>> primitive_slot_ids(const std::string& instruction,
                                                     const Lexicon& lex, int n_max);

Tensor sample_video(WorldModel& model, const SceneObservation& obs,
                    const std::string& instruction, const ActionTree& tree,
                    const Lexicon& lex, uint64_t seed, bool deterministic = true);
Tensor sample_decomposed(WorldModel& model, const SceneObservation& obs,
                         const std::string& instruction, const ActionTree& tree,
                         const Lexicon& lex, uint64_t seed, bool deterministic = true);

}  // namespace swm
