#include "swm/nn.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace swm {

Tensor timestep_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ValueError("timestep embedding dim must be even >= 2");
  Tensor e = Tensor::zeros({dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
    e.data[static_cast<size_t>(i)] = static_cast<float>(std::sin(t * freq));
    e.data[static_cast<size_t>(half + i)] = static_cast<float>(std::cos(t * freq));
  }
  return e;
}

void save_checkpoint(const ParamStore& store, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create checkpoint dir: " + dir);
  nlohmann::json manifest;
  manifest["seed"] = store.seed;
  manifest["params"] = nlohmann::json::array();
  for (const auto& [name, entry] : store.params) {
    save_mdtn((fs::path(dir) / (name + ".mdtn")).string(), entry.value);
    nlohmann::json p;
    p["name"] = name;
    p["dims"] = entry.value.shape;
    p["trainable"] = entry.trainable;
    manifest["params"].push_back(p);
  }
  std::ofstream f(fs::path(dir) / "manifest.json");
  if (!f) throw IoError("cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

ParamStore load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  fs::path mp = fs::path(dir) / "manifest.json";
  std::ifstream f(mp);
  if (!f) throw IoError("cannot read checkpoint manifest: " + mp.string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ValueError("bad checkpoint manifest: " + std::string(e.what()));
  }
  ParamStore store;
  try {
    store.seed = manifest.at("seed").get<uint64_t>();
    for (const auto& p : manifest.at("params")) {
      std::string name = p.at("name").get<std::string>();
      std::vector<int64_t> dims = p.at("dims").get<std::vector<int64_t>>();
      ParamEntryT<float> e;
      e.value = load_mdtn<float>((fs::path(dir) / (name + ".mdtn")).string());
      if (e.value.shape != dims)
        throw ValueError("checkpoint dims mismatch for '" + name + "'");
      e.trainable = p.at("trainable").get<bool>();
      store.params.emplace(name, std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValueError("bad checkpoint manifest: " + std::string(e.what()));
  }
  return store;
}

}  // namespace swm
