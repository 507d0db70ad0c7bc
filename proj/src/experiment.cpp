#include "swm/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "swm/guidance.hpp"
#include "swm/modalities.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace swm {
namespace {

std::string fnv_hex(const std::string& text) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

std::string sanitize(const std::string& name) {
  std::string out;
  for (char c : name) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return out;
}

std::string fmt4(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4) << v;
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

}  // namespace

std::string ExperimentConfig::to_json() const {
  json j;
  j["data_root"] = data_root;
  j["splits"] = splits;
  j["max_episodes"] = max_episodes;
  j["sample_steps"] = sample_steps;
  j["seed"] = seed;
  j["parallel"] = parallel;
  j["variants"] = json::array();
  for (const auto& v : variants)
    j["variants"].push_back(
        {{"name", v.name}, {"ckpt", v.ckpt}, {"conditioning", v.conditioning}});
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("experiment config: ") + e.what());
  }
  ExperimentConfig c;
  c.data_root = j.value("data_root", "");
  c.splits = j.value("splits", c.splits);
  c.max_episodes = j.value("max_episodes", c.max_episodes);
  c.sample_steps = j.value("sample_steps", c.sample_steps);
  c.seed = j.value("seed", c.seed);
  c.parallel = j.value("parallel", c.parallel);
  for (const auto& v : j.value("variants", json::array())) {
    VariantSpec s;
    s.name = v.at("name").get<std::string>();
    s.ckpt = v.at("ckpt").get<std::string>();
    s.conditioning = v.value("conditioning", s.conditioning);
    if (s.conditioning != "tree" && s.conditioning != "decomposed")
      throw ValueError("variant '" + s.name + "': unknown conditioning '" + s.conditioning +
                       "'");
    c.variants.push_back(std::move(s));
  }
  return c;
}

Lexicon stock_lexicon() { return build_lexicon(corpus(), grammar_verbs(), grammar_preps()); }

ActionTree stock_tree(const Lexicon& lex) { return build_tree(corpus(), lex); }

TrainItem episode_to_item(const Episode& ep, const ModelConfig& cfg, const ActionTree& tree,
                          const Lexicon& lex) {
  if (static_cast<int>(ep.frames.size()) != cfg.frames + 1)
    throw ShapeError("episode has " + std::to_string(ep.frames.size()) +
                     " frames, model wants " + std::to_string(cfg.frames + 1));
  if (ep.frames[0].shape !=
      std::vector<int64_t>{3, cfg.image_size, cfg.image_size})
    throw ShapeError("episode frame size does not match the model config");
  TrainItem item;
  item.z0 = patchify_video(stack_frames(ep.frames, 1, cfg.frames), cfg.patch);
  item.f0_latent = patchify(ep.frames[0], cfg.patch);
  SyntheticExtractor extractor;
  item.obs = observe(ep.frames, ep.depth_gt, extractor);
  item.text_ids = instruction_slot_ids(ep.instruction, tree, lex, cfg.n_max);
  return item;
}

std::vector<MetricsReport> run_experiment(const ExperimentConfig& cfg) {
  auto lex = stock_lexicon();
  auto tree = stock_tree(lex);
  std::vector<MetricsReport> reports;
  for (const auto& variant : cfg.variants) {
    if (!fs::exists(fs::path(variant.ckpt) / "config.json"))
      throw IoError("variant '" + variant.name + "': checkpoint not found at " + variant.ckpt);
    WorldModel model = WorldModel::load(variant.ckpt);
    if (cfg.sample_steps > 0) model.cfg.sample_steps = cfg.sample_steps;
    const std::string fingerprint =
        fnv_hex(model.cfg.to_json() + "|" + variant.conditioning + "|" +
                std::to_string(cfg.sample_steps) + "|" + std::to_string(cfg.seed));
    for (const auto& split : cfg.splits) {
      auto dirs = list_episode_dirs(cfg.data_root, split);
      if (cfg.max_episodes > 0 && static_cast<int>(dirs.size()) > cfg.max_episodes)
        dirs.resize(static_cast<size_t>(cfg.max_episodes));
      if (dirs.empty())
        throw ValueError("split '" + split + "' has no episodes under " + cfg.data_root);

      std::vector<Tensor> videos(dirs.size()), refs(dirs.size());
      for (size_t i = 0; i < dirs.size(); ++i) {
        Episode ep = load_episode(dirs[i]);
        if (static_cast<int>(ep.frames.size()) != model.cfg.frames + 1)
          throw ShapeError("episode " + dirs[i] + " does not match the checkpoint frames");
        SyntheticExtractor extractor;
        SceneObservation obs = observe(ep.frames, ep.depth_gt, extractor);
        uint64_t ep_seed =
            name_seed(cfg.seed, ep.task_id + ":" + std::to_string(ep.seed));
        videos[i] = variant.conditioning == "decomposed"
                        ? sample_decomposed(model, obs, ep.instruction, tree, lex, ep_seed)
                        : sample_video(model, obs, ep.instruction, tree, lex, ep_seed);
        refs[i] = stack_frames(ep.frames, 1, model.cfg.frames);
      }

      MetricsReport rep;
      rep.variant = variant.name;
      rep.split = split;
      rep.config_fingerprint = fingerprint;
      rep.psnr_per_episode.resize(dirs.size());
      rep.ssim_per_episode.resize(dirs.size());
      rep.flow_per_episode.resize(dirs.size());
      auto compute = [&](size_t i) {
        rep.psnr_per_episode[i] = psnr(videos[i], refs[i]).mean;
        rep.ssim_per_episode[i] = ssim(videos[i], refs[i]).mean;
        rep.flow_per_episode[i] = flow_error(videos[i], refs[i]).mean;
      };
      if (cfg.parallel && dirs.size() > 1) {
        unsigned n_threads = std::max(1u, std::min<unsigned>(
                                              std::thread::hardware_concurrency(),
                                              static_cast<unsigned>(dirs.size())));
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < n_threads; ++w)
          pool.emplace_back([&, w] {
            for (size_t i = w; i < dirs.size(); i += n_threads) compute(i);
          });
        for (auto& t : pool) t.join();
      } else {
        for (size_t i = 0; i < dirs.size(); ++i) compute(i);
      }
      rep.finalize();
      reports.push_back(std::move(rep));
    }
  }
  return reports;
}

std::string comparison_table(const std::vector<MetricsReport>& reports) {
  std::vector<std::string> variants, splits;
  for (const auto& r : reports) {
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end())
      variants.push_back(r.variant);
    if (std::find(splits.begin(), splits.end(), r.split) == splits.end())
      splits.push_back(r.split);
  }
  std::ostringstream out;
  out << "variant";
  for (const auto& s : splits)
    out << "\tpsnr:" << s << "\tssim:" << s << "\tflow:" << s;
  out << "\n";
  for (const auto& v : variants) {
    out << v;
    for (const auto& s : splits) {
      const MetricsReport* found = nullptr;
      for (const auto& r : reports)
        if (r.variant == v && r.split == s) found = &r;
      if (found)
        out << "\t" << fmt4(found->psnr_mean) << "\t" << fmt4(found->ssim_mean) << "\t"
            << fmt4(found->flow_mean);
      else
        out << "\t-\t-\t-";
    }
    out << "\n";
  }
  return out.str();
}

void write_reports(const std::vector<MetricsReport>& reports, const std::string& out_dir) {
  fs::create_directories(out_dir);
  for (const auto& r : reports)
    write_text(out_dir + "/" + sanitize(r.variant) + "_" + sanitize(r.split) + ".json",
               r.to_json() + "\n");
  write_text(out_dir + "/comparison.tsv", comparison_table(reports));
}

std::string weight_report_json(WorldModel& model,
                               const std::vector<SceneObservation>& observations) {
  auto rep = weight_report(model.store, model.cfg.guidance, observations);
  json j;
  j["n"] = observations.size();
  j["modalities"] = {"depth", "semantic", "rgb", "mask"};
  j["levels"] = json::array();
  for (size_t l = 0; l < rep.level_means.size(); ++l)
    j["levels"].push_back({{"level", l},
                           {"mean_scores", std::vector<double>(rep.level_means[l].begin(),
                                                               rep.level_means[l].end())}});
  return j.dump(2);
}

}  // namespace swm
