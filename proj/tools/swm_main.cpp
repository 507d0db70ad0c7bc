#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "swm/experiment.hpp"

namespace fs = std::filesystem;
using namespace swm;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

FusionMode parse_fusion(const std::string& name) {
  if (name == "additive") return FusionMode::Additive;
  if (name == "xattn") return FusionMode::CrossAttention;
  throw ValueError("unknown fusion mode '" + name + "' (additive|xattn)");
}

int cmd_lexicon_build(const std::string& corpus_path, const std::string& verbs_path,
                      const std::string& preps_path, const std::string& out) {
  auto lex = build_lexicon(read_lines(corpus_path), read_lines(verbs_path),
                           read_lines(preps_path));
  lex.save(out);
  std::cout << "lexicon: " << lex.verbs.size() << " verbs, " << lex.prepositions.size()
            << " prepositions -> " << out << "\n";
  return 0;
}

int cmd_encode(const std::string& lexicon_path, const std::string& instruction,
               const std::string& out) {
  auto lex = Lexicon::load(lexicon_path);
  auto tree = build_tree({instruction}, lex);
  auto seq = parse_instruction(instruction, tree, lex);
  auto table = EmbeddingTable::create(lex, lex.embed_dim, lex.seed);
  Tensor emb = embed_instruction(seq, table, lex.n_max);
  save_mdtn(out, emb);
  std::cout << "encoded " << seq.n() << " action pair(s) -> " << out << " ["
            << emb.shape_str() << "]\n";
  return 0;
}

int cmd_mask(const std::string& frames_dir, const std::string& extractor,
             const std::string& features_dir, const std::string& out) {
  auto frames = load_frame_dir(frames_dir);
  Tensor mask;
  if (extractor == "synthetic") {
    SyntheticExtractor ex;
    mask = dynamic_mask(frames, ex);
  } else if (extractor == "file") {
    if (features_dir.empty()) throw ValueError("--extractor file needs --features");
    auto ex = FileExtractor::from_dirs(frames_dir, features_dir);
    mask = dynamic_mask(frames, ex);
  } else {
    throw ValueError("unknown extractor '" + extractor + "' (synthetic|file)");
  }
  save_mdtn(out, mask);
  std::cout << "mask over " << frames.size() << " frames -> " << out << "\n";
  return 0;
}

int cmd_datagen(const std::string& config_path, const std::string& out, int episodes,
                int64_t seed) {
  DatasetConfig cfg;
  if (!config_path.empty()) cfg = DatasetConfig::from_json(read_file(config_path));
  if (episodes > 0) cfg.train_episodes = episodes;
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  write_dataset(out, cfg);
  auto train = list_episode_dirs(out, "train");
  auto es = list_episode_dirs(out, "eval_seen");
  auto eu = list_episode_dirs(out, "eval_unseen");
  std::cout << "dataset -> " << out << " (train " << train.size() << ", eval_seen "
            << es.size() << ", eval_unseen " << eu.size() << ")\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out,
              int steps, int batch, int64_t seed, int log_every) {
  ModelConfig cfg;
  if (!config_path.empty()) cfg = ModelConfig::from_json(read_file(config_path));
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  auto lex = stock_lexicon();
  if (cfg.use_tree) cfg.vocab_size = static_cast<int>(lex.vocab_size());
  WorldModel model(cfg);
  if (cfg.use_tree) model.init_text_table(lex);
  auto tree = stock_tree(lex);

  auto dirs = list_episode_dirs(data, "train");
  if (dirs.empty()) throw ValueError("no training episodes under " + data);
  std::vector<TrainItem> items;
  items.reserve(dirs.size());
  for (const auto& d : dirs) items.push_back(episode_to_item(load_episode(d), cfg, tree, lex));
  std::cout << "loaded " << items.size() << " episodes from " << data << "\n";

  Rng rng(name_seed(cfg.seed, "cli-train"));
  std::vector<size_t> order(items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();
  double first = 0.0;
  for (int step = 1; step <= steps; ++step) {
    std::vector<TrainItem> batch_items;
    for (int b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        for (size_t i = order.size() - 1; i > 0; --i)
          std::swap(order[i], order[static_cast<size_t>(
                                  rng.uniform_int(0, static_cast<int64_t>(i)))]);
        cursor = 0;
      }
      batch_items.push_back(items[order[cursor++]]);
    }
    double loss = model.train_step(batch_items, rng);
    if (step == 1) first = loss;
    if (step == 1 || step % log_every == 0 || step == steps)
      std::cout << "step " << step << " loss " << loss << "\n";
  }
  model.save(out);
  std::cout << "trained " << steps << " steps (first loss " << first << ") -> " << out << "\n";
  return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& obs_dir,
               const std::string& instruction_flag, const std::string& mode,
               const std::string& fusion, int64_t seed, const std::string& out) {
  WorldModel model = WorldModel::load(ckpt);
  if (!fusion.empty()) model.cfg.fusion = parse_fusion(fusion);
  Episode ep = load_episode(obs_dir);
  std::string instruction = instruction_flag.empty() ? ep.instruction : instruction_flag;
  SyntheticExtractor ex;
  SceneObservation obs = observe(ep.frames, ep.depth_gt, ex);
  auto lex = stock_lexicon();
  auto tree = stock_tree(lex);
  Tensor video;
  if (mode == "tree")
    video = sample_video(model, obs, instruction, tree, lex, static_cast<uint64_t>(seed));
  else if (mode == "decomposed")
    video = sample_decomposed(model, obs, instruction, tree, lex, static_cast<uint64_t>(seed));
  else
    throw ValueError("unknown mode '" + mode + "' (tree|decomposed)");

  fs::create_directories(out);
  const int64_t F = video.shape[0];
  for (int64_t f = 0; f < F; ++f) {
    Tensor frame = Tensor::zeros({video.shape[1], video.shape[2], video.shape[3]});
    std::copy_n(video.data.begin() + f * static_cast<int64_t>(frame.data.size()),
                frame.data.size(), frame.data.begin());
    save_mdtn(out + "/" + frame_filename(static_cast<int>(f)), frame);
  }
  nlohmann::json meta;
  meta["instruction"] = instruction;
  meta["mode"] = mode;
  meta["seed"] = seed;
  meta["ckpt"] = ckpt;
  meta["frames"] = F;
  write_file(out + "/sample.json", meta.dump(2) + "\n");
  std::cout << "sampled " << F << " frames (" << mode << ") -> " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& variants_path, const std::string& ckpt,
             const std::string& data, const std::string& out) {
  ExperimentConfig cfg;
  if (!variants_path.empty()) cfg = ExperimentConfig::from_json(read_file(variants_path));
  if (!data.empty()) cfg.data_root = data;
  if (cfg.variants.empty()) {
    if (ckpt.empty()) throw ValueError("eval needs --variants or --ckpt");
    cfg.variants.push_back({"default", ckpt, "tree"});
  }
  for (auto& v : cfg.variants)
    if (v.ckpt.empty()) v.ckpt = ckpt;
  auto reports = run_experiment(cfg);
  write_reports(reports, out);
  std::cout << comparison_table(reports);
  std::cout << "reports -> " << out << "\n";
  return 0;
}

int cmd_weights_report(const std::string& ckpt, const std::string& data, int n, int64_t seed,
                       const std::string& out) {
  WorldModel model = WorldModel::load(ckpt);
  SyntheticExtractor ex;
  std::vector<SceneObservation> observations;
  if (!data.empty()) {
    auto dirs = list_episode_dirs(data, "");
    if (dirs.empty()) throw ValueError("no episodes under " + data);
    if (static_cast<int>(dirs.size()) > n) dirs.resize(static_cast<size_t>(n));
    for (const auto& d : dirs) {
      Episode ep = load_episode(d);
      observations.push_back(observe(ep.frames, ep.depth_gt, ex));
    }
  } else {
    auto templates = make_templates();
    for (int i = 0; i < n; ++i) {
      const auto& tpl = templates[static_cast<size_t>(i) % templates.size()];
      Episode ep = generate_episode(tpl, model.cfg.image_size, model.cfg.frames + 1,
                                    static_cast<uint64_t>(seed + i));
      observations.push_back(observe(ep.frames, ep.depth_gt, ex));
    }
  }
  write_file(out, weight_report_json(model, observations) + "\n");
  std::cout << "router weights over " << observations.size() << " observations -> " << out
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sprite-world conditional video world model"};
  app.require_subcommand(1);

  auto* lexicon = app.add_subcommand("lexicon", "lexicon tools");
  lexicon->require_subcommand(1);
  auto* lex_build = lexicon->add_subcommand("build", "build a lexicon from word lists");
  std::string corpus_path, verbs_path, preps_path, lex_out;
  lex_build->add_option("--corpus", corpus_path, "instruction corpus, one per line")
      ->required();
  lex_build->add_option("--verbs", verbs_path, "verb list file")->required();
  lex_build->add_option("--preps", preps_path, "preposition list file")->required();
  lex_build->add_option("-o,--out", lex_out, "output lexicon json")->required();

  auto* encode = app.add_subcommand("encode", "embed one instruction");
  std::string enc_lexicon, enc_instruction, enc_out;
  encode->add_option("--lexicon", enc_lexicon, "lexicon json")->required();
  encode->add_option("--instruction", enc_instruction, "instruction text")->required();
  encode->add_option("-o,--out", enc_out, "output embedding mdtn")->required();

  auto* mask = app.add_subcommand("mask", "dynamic mask from a frame directory");
  std::string mask_frames, mask_extractor = "synthetic", mask_features, mask_out;
  mask->add_option("--frames", mask_frames, "directory of frame_XXXX.mdtn")->required();
  mask->add_option("--extractor", mask_extractor, "synthetic|file");
  mask->add_option("--features", mask_features, "feature directory for file extractor");
  mask->add_option("-o,--out", mask_out, "output mask mdtn")->required();

  auto* datagen = app.add_subcommand("datagen", "render the synthetic dataset");
  std::string dg_config, dg_out;
  int dg_episodes = 0;
  int64_t dg_seed = -1;
  datagen->add_option("--config", dg_config, "dataset config json");
  datagen->add_option("--out", dg_out, "dataset root")->required();
  datagen->add_option("--episodes", dg_episodes, "training episode count override");
  datagen->add_option("--seed", dg_seed, "dataset seed override");

  auto* train = app.add_subcommand("train", "train a world model");
  std::string tr_config, tr_data, tr_out;
  int tr_steps = 500, tr_batch = 4, tr_log = 25;
  int64_t tr_seed = -1;
  train->add_option("--config", tr_config, "model config json");
  train->add_option("--data", tr_data, "dataset root")->required();
  train->add_option("--out", tr_out, "checkpoint directory")->required();
  train->add_option("--steps", tr_steps, "optimizer steps");
  train->add_option("--batch", tr_batch, "batch size");
  train->add_option("--seed", tr_seed, "model seed override");
  train->add_option("--log-every", tr_log, "loss print period");

  auto* sample = app.add_subcommand("sample", "sample a video from a checkpoint");
  std::string sm_ckpt, sm_obs, sm_instruction, sm_mode = "tree", sm_fusion, sm_out;
  int64_t sm_seed = 0;
  sample->add_option("--ckpt", sm_ckpt, "checkpoint directory")->required();
  sample->add_option("--obs", sm_obs, "episode directory with the observed scene")->required();
  sample->add_option("--instruction", sm_instruction, "instruction (default: episode meta)");
  sample->add_option("--mode", sm_mode, "tree|decomposed");
  sample->add_option("--fusion", sm_fusion, "override fusion: additive|xattn");
  sample->add_option("--seed", sm_seed, "sampling seed");
  sample->add_option("-o,--out", sm_out, "output frame directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate variants over splits");
  std::string ev_variants, ev_ckpt, ev_data, ev_out;
  eval->add_option("--variants", ev_variants, "experiment config json");
  eval->add_option("--ckpt", ev_ckpt, "default checkpoint for variants without one");
  eval->add_option("--data", ev_data, "dataset root override");
  eval->add_option("-o,--out", ev_out, "report directory")->required();

  auto* weights = app.add_subcommand("weights-report", "mean router scores per level");
  std::string wr_ckpt, wr_data, wr_out;
  int wr_n = 100;
  int64_t wr_seed = 0;
  weights->add_option("--ckpt", wr_ckpt, "checkpoint directory")->required();
  weights->add_option("--data", wr_data, "dataset root (default: synthesized scenes)");
  weights->add_option("--n", wr_n, "observation count");
  weights->add_option("--seed", wr_seed, "scene seed base");
  weights->add_option("-o,--out", wr_out, "output json")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (lex_build->parsed())
      return cmd_lexicon_build(corpus_path, verbs_path, preps_path, lex_out);
    if (encode->parsed()) return cmd_encode(enc_lexicon, enc_instruction, enc_out);
    if (mask->parsed()) return cmd_mask(mask_frames, mask_extractor, mask_features, mask_out);
    if (datagen->parsed()) return cmd_datagen(dg_config, dg_out, dg_episodes, dg_seed);
    if (train->parsed())
      return cmd_train(tr_config, tr_data, tr_out, tr_steps, tr_batch, tr_seed, tr_log);
    if (sample->parsed())
      return cmd_sample(sm_ckpt, sm_obs, sm_instruction, sm_mode, sm_fusion, sm_seed, sm_out);
    if (eval->parsed()) return cmd_eval(ev_variants, ev_ckpt, ev_data, ev_out);
    if (weights->parsed())
      return cmd_weights_report(wr_ckpt, wr_data, wr_n, wr_seed, wr_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}
