#pragma once

#include <array>
#include <string>
#include <vector>

#include "swm/diffusion.hpp"
#include "swm/metrics.hpp"
#include "swm/spriteworld.hpp"

namespace swm {

/// One evaluated row: a trained checkpoint plus its sampling-time
/// conditioning mode ("tree" or "decomposed").
struct VariantSpec {
  std::string name;
  std::string ckpt;
  std::string conditioning = "tree";
};

struct ExperimentConfig {
  std::string data_root;
  std::vector<std::string> splits = {"eval_seen", "eval_unseen"};
  std::vector<VariantSpec> variants;
  int max_episodes = 8;  // per split; 0 keeps all
  int sample_steps = 0;  // 0 keeps each checkpoint's default
  uint64_t seed = 0;
  bool parallel = false;  // parallel per-episode metric computation

  std::string to_json() const;
  static ExperimentConfig from_json(const std::string& text);
};

/// Lexicon over the stock grammar corpus.
Lexicon stock_lexicon();
ActionTree stock_tree(const Lexicon& lex);

/// Packs one episode into model inputs: latent future frames, latent first
/// frame, scene observation, and instruction slot ids.
TrainItem episode_to_item(const Episode& ep, const ModelConfig& cfg, const ActionTree& tree,
                          const Lexicon& lex);

/// Evaluates every variant on every split; one report per (variant, split).
std::vector<MetricsReport> run_experiment(const ExperimentConfig& cfg);

/// Tab-separated comparison: rows = variants, columns = metrics x split.
std::string comparison_table(const std::vector<MetricsReport>& reports);

/// Writes one <variant>_<split>.json per report plus comparison.tsv.
void write_reports(const std::vector<MetricsReport>& reports, const std::string& out_dir);

/// Router-weight analysis of a model over observations, serialized for the
/// weights-report command: per-level mean scores in modality order
/// depth/semantic/rgb/mask.
std::string weight_report_json(WorldModel& model,
                               const std::vector<SceneObservation>& observations);

}  // namespace swm
