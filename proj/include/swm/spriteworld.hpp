#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "swm/tensor.hpp"

namespace swm {

/// One templated task: an action-word sequence plus scene descriptors.
/// An empty verb list renders a static scene (no motion, empty instruction).
struct TaskTemplate {
  std::vector<std::string> verbs;
  std::vector<std::string> preps;   // parallel to verbs; "" means none
  std::string color, shape;         // moving sprite; empty for lid-only tasks
  std::vector<std::string> places;  // referenced places, in mention order

  std::string task_id() const;
  std::string instruction() const;

  static TaskTemplate static_scene(const std::string& color, const std::string& shape,
                                   const std::string& place);
};

/// The stock 20-template grammar: pick+place, push, close over
/// 4 colors x 3 shapes x 3 places.
std::vector<TaskTemplate> make_templates();

/// Sentence per stock template, for lexicon construction.
std::vector<std::string> corpus();

std::vector<std::string> grammar_verbs();
std::vector<std::string> grammar_preps();

/// Compositional split: unseen tasks reuse only atoms that stay in seen, and
/// collectively hold out at least one verb-object and one verb-prep combination.
std::pair<std::vector<TaskTemplate>, std::vector<TaskTemplate>> split_tasks(
    const std::vector<TaskTemplate>& templates, double ratio, uint64_t seed);

struct Episode {
  std::string instruction;
  std::vector<Tensor> frames;  // each [3,H,W] in [0,1]
  Tensor depth_gt;             // [1,H,W] frame-0 layer depth
  Tensor semantic_gt;          // [8,H,W] one-hot palette channels, frame 0
  Tensor mask_gt;              // [1,H,W] union of moved-object footprints
  Tensor flow_gt;              // [F-1,2,H,W] (dy,dx) forward flow
  std::string task_id;
  uint64_t seed = 0;

  // layout introspection for oracles
  std::vector<std::array<int, 2>> path;         // mover (y,x) per frame
  std::vector<std::array<int, 2>> footprint;    // mover pixel offsets (dy,dx)
  std::vector<std::array<int, 4>> place_rects;  // (y,x,h,w) outer rects, mention order
};

/// Pixel offsets of a shape within its 4x4 anchor box.
std::vector<std::array<int, 2>> shape_offsets(const std::string& shape);

/// Palette color for a grammar color or place word.
std::array<float, 3> color_value(const std::string& name);

/// Palette channel index for a grammar color or place word.
int palette_index(const std::string& name);

Episode generate_episode(const TaskTemplate& tpl, int image_size, int frames, uint64_t seed);

struct DatasetConfig {
  int image_size = 32;
  int frames = 9;
  int train_episodes = 2000;
  int eval_episodes = 200;  // per eval split
  double split_ratio = 0.9;
  uint64_t seed = 0;

  std::string to_json() const;
  static DatasetConfig from_json(const std::string& text);
};

/// Writes frame_XXXX.mdtn, depth/sem/mask/flow.mdtn and meta.json into dir.
void write_episode(const std::string& dir, const Episode& ep, const std::string& split);
Episode load_episode(const std::string& dir);

/// meta.json split tag of one episode directory.
std::string episode_split(const std::string& dir);

/// Renders the full dataset under root/episodes/<task_id>/<seed>/.
/// Splits: train (seen tasks), eval_seen, eval_unseen.
void write_dataset(const std::string& root, const DatasetConfig& cfg);

/// Episode directories under root, filtered by split ("" keeps all), sorted.
std::vector<std::string> list_episode_dirs(const std::string& root, const std::string& split);

}  // namespace swm
