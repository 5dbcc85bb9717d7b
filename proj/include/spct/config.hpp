#pragma once

// Experiment configuration: presets and a strict JSON loader.

#include "spct/classical.hpp"
#include "spct/learned_pd.hpp"
#include "spct/phantoms.hpp"

#include <set>

namespace spct {

struct SpectralConfig {
  std::vector<std::string> materials{"bone", "tissue", "calcium", "adipose", "air"};
  std::size_t nBins = 8;
  double eMin = 30.0;
  double eMax = 140.0;
  std::size_t nQuad = 16;
  double y0 = 1e12;
  std::string spectrum = "kramers"; // or a two-column table path
  std::string materialTable;        // empty: bundled table

  SpectralSystem build() const {
    const MaterialTable table = materialTable.empty() ? default_material_table() : MaterialTable::load(materialTable);
    SourceModel src = KramersSpectrum{};
    if (spectrum != "kramers") src = TabulatedSpectrum::load(spectrum);
    return build_system(table, materials, src, nBins, eMin, eMax, nQuad, y0);
  }
};

struct DataSplit {
  std::size_t train = 200;
  std::size_t val = 10;
  std::size_t test = 100;
};

struct ExperimentConfig {
  std::string name;
  ScanGeometry geometry;
  SpectralConfig spectral;
  PhantomConfig phantom;
  SolverConfig unmixSolver;
  SolverConfig imagingSolver;
  LearnedConfig network;
  TrainConfig training;
  DataSplit data;
  std::uint64_t seed = 0;

  void validate() const {
    geometry.validate();
    phantom.validate();
    if (phantom.materials != spectral.materials)
      throw ConfigError("phantom materials must equal the spectral material basis");
    unmixSolver.validate();
    imagingSolver.validate();
    network.validate();
    training.validate();
  }
};

// ---------------------------------------------------------------------------
// JSON with unknown-key rejection

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

} // namespace detail

inline json to_json(const SolverConfig& c) {
  return {{"lambda", c.lambda},       {"tau", c.tau},
          {"rho", c.rho},             {"maxIters", c.maxIters},
          {"tolerance", c.tolerance}, {"innerIters", c.innerIters},
          {"divergencePatience", c.divergencePatience}};
}

inline SolverConfig solver_config_from_json(const json& j, SolverConfig c, const std::string& where) {
  detail::check_keys(j, {"lambda", "tau", "rho", "maxIters", "tolerance", "innerIters", "divergencePatience"}, where);
  c.lambda = j.value("lambda", c.lambda);
  c.tau = j.value("tau", c.tau);
  c.rho = j.value("rho", c.rho);
  c.maxIters = j.value("maxIters", c.maxIters);
  c.tolerance = j.value("tolerance", c.tolerance);
  c.innerIters = j.value("innerIters", c.innerIters);
  c.divergencePatience = j.value("divergencePatience", c.divergencePatience);
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  const auto& g = c.geometry;
  const auto& t = c.training;
  json geo = {{"nPixX", g.nPixX}, {"nPixY", g.nPixY}, {"pixelSize", g.pixelSize},
              {"nAngles", g.n_angles()}, {"nDet", g.nDet}, {"detElemSize", g.detElemSize}};
  json spec = {{"materials", c.spectral.materials}, {"nBins", c.spectral.nBins}, {"eMin", c.spectral.eMin},
               {"eMax", c.spectral.eMax},           {"nQuad", c.spectral.nQuad}, {"y0", c.spectral.y0},
               {"spectrum", c.spectral.spectrum},   {"materialTable", c.spectral.materialTable}};
  json ph = {{"kind", c.phantom.kind}, {"meanEllipses", c.phantom.meanEllipses}, {"minAxis", c.phantom.minAxis},
             {"maxAxis", c.phantom.maxAxis}, {"allowOverlapMix", c.phantom.allowOverlapMix}};
  json tr = {{"method", t.method == TrainMethod::IL ? "il" : "sl"},
             {"steps", t.steps},
             {"batch", t.batch},
             {"lr0", t.lr0},
             {"clipNorm", t.clipNorm},
             {"valEvery", t.valEvery},
             {"slSimulatedBeta", t.slSimulatedBeta},
             {"logEvery", t.logEvery}};
  return {{"name", c.name},
          {"seed", c.seed},
          {"geometry", geo},
          {"spectral", spec},
          {"phantom", ph},
          {"classical", {{"unmixing", to_json(c.unmixSolver)}, {"imaging", to_json(c.imagingSolver)}}},
          {"network", to_json(c.network)},
          {"training", tr},
          {"data", {{"train", c.data.train}, {"val", c.data.val}, {"test", c.data.test}}}};
}

/// Overlays j on base; every key must be known.
inline ExperimentConfig experiment_config_from_json(const json& j, ExperimentConfig c) {
  try {
    detail::check_keys(j, {"name", "preset", "seed", "geometry", "spectral", "phantom", "classical", "network",
                           "training", "data"},
                       "config");
    c.name = j.value("name", c.name);
    c.seed = j.value("seed", c.seed);
    if (j.contains("geometry")) {
      const auto& g = j["geometry"];
      detail::check_keys(g, {"nPixX", "nPixY", "pixelSize", "nAngles", "nDet", "detElemSize"}, "geometry");
      c.geometry = ScanGeometry::parallel(g.value("nPixX", c.geometry.nPixX), g.value("nPixY", c.geometry.nPixY),
                                          g.value("pixelSize", c.geometry.pixelSize),
                                          g.value("nAngles", c.geometry.n_angles()), g.value("nDet", c.geometry.nDet),
                                          g.value("detElemSize", c.geometry.detElemSize));
    }
    if (j.contains("spectral")) {
      const auto& s = j["spectral"];
      detail::check_keys(s, {"materials", "nBins", "eMin", "eMax", "nQuad", "y0", "spectrum", "materialTable"},
                         "spectral");
      auto& sc = c.spectral;
      sc.materials = s.value("materials", sc.materials);
      sc.nBins = s.value("nBins", sc.nBins);
      sc.eMin = s.value("eMin", sc.eMin);
      sc.eMax = s.value("eMax", sc.eMax);
      sc.nQuad = s.value("nQuad", sc.nQuad);
      sc.y0 = s.value("y0", sc.y0);
      sc.spectrum = s.value("spectrum", sc.spectrum);
      sc.materialTable = s.value("materialTable", sc.materialTable);
      if (sc.spectrum != "kramers" && !std::filesystem::exists(sc.spectrum))
        throw ConfigError("spectral.spectrum: no such file " + sc.spectrum);
      if (!sc.materialTable.empty() && !std::filesystem::exists(sc.materialTable))
        throw ConfigError("spectral.materialTable: no such file " + sc.materialTable);
      c.phantom.materials = sc.materials;
    }
    if (j.contains("phantom")) {
      const auto& p = j["phantom"];
      detail::check_keys(p, {"kind", "meanEllipses", "minAxis", "maxAxis", "allowOverlapMix"}, "phantom");
      c.phantom.kind = p.value("kind", c.phantom.kind);
      c.phantom.meanEllipses = p.value("meanEllipses", c.phantom.meanEllipses);
      c.phantom.minAxis = p.value("minAxis", c.phantom.minAxis);
      c.phantom.maxAxis = p.value("maxAxis", c.phantom.maxAxis);
      c.phantom.allowOverlapMix = p.value("allowOverlapMix", c.phantom.allowOverlapMix);
    }
    if (j.contains("classical")) {
      detail::check_keys(j["classical"], {"unmixing", "imaging"}, "classical");
      if (j["classical"].contains("unmixing"))
        c.unmixSolver = solver_config_from_json(j["classical"]["unmixing"], c.unmixSolver, "classical.unmixing");
      if (j["classical"].contains("imaging"))
        c.imagingSolver = solver_config_from_json(j["classical"]["imaging"], c.imagingSolver, "classical.imaging");
    }
    if (j.contains("network")) {
      const auto& n = j["network"];
      detail::check_keys(n, {"unmix", "reco", "materialsAsChannels", "memoryBudgetBytes", "betaScale"}, "network");
      for (const char* k : {"unmix", "reco"})
        if (n.contains(k))
          detail::check_keys(n[k], {"nIter", "nPrimal", "nDual", "convDims", "filters"}, std::string("network.") + k);
      c.network = learned_config_from_json(n, c.network);
    }
    if (j.contains("training")) {
      const auto& t = j["training"];
      detail::check_keys(t, {"method", "steps", "batch", "lr0", "clipNorm", "valEvery", "slSimulatedBeta", "logEvery"},
                         "training");
      auto& tc = c.training;
      if (t.contains("method")) tc.method = parse_method(t["method"].get<std::string>());
      tc.steps = t.value("steps", tc.steps);
      tc.batch = t.value("batch", tc.batch);
      tc.lr0 = t.value("lr0", tc.lr0);
      tc.clipNorm = t.value("clipNorm", tc.clipNorm);
      tc.valEvery = t.value("valEvery", tc.valEvery);
      tc.slSimulatedBeta = t.value("slSimulatedBeta", tc.slSimulatedBeta);
      tc.logEvery = t.value("logEvery", tc.logEvery);
    }
    if (j.contains("data")) {
      detail::check_keys(j["data"], {"train", "val", "test"}, "data");
      c.data.train = j["data"].value("train", c.data.train);
      c.data.val = j["data"].value("val", c.data.val);
      c.data.test = j["data"].value("test", c.data.test);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Presets

/// 128x128 random ellipses, 5 materials, y0 = 1e12.
inline ExperimentConfig preset_e_5() {
  ExperimentConfig c;
  c.name = "e_5";
  c.geometry = ScanGeometry::parallel(128, 128, 1.0, 180, 183, 1.0);
  c.spectral.materials = {"bone", "tissue", "calcium", "adipose", "air"};
  c.spectral.y0 = 1e12;
  c.phantom.materials = c.spectral.materials;
  c.training.steps = 30000;
  c.training.batch = 10;
  c.training.valEvery = 500;
  c.data = {2000, 20, 100};
  c.unmixSolver.maxIters = 200;
  c.imagingSolver.lambda = 0.2;
  c.imagingSolver.maxIters = 300;
  return c;
}

/// Desk-scale acceptance configuration: 32x32, 3 materials, 60 angles, y0 = 1e8.
inline ExperimentConfig preset_e_5_small() {
  ExperimentConfig c;
  c.name = "e_5_small";
  c.geometry = ScanGeometry::parallel(32, 32, 0.5, 60, 47, 0.5);
  c.spectral.materials = {"bone", "tissue", "air"};
  c.spectral.y0 = 1e8;
  c.phantom.materials = c.spectral.materials;
  c.training.steps = 1500;
  c.training.batch = 1;
  c.training.valEvery = 250;
  c.data = {200, 10, 100};
  // tuned on held-out validation phantoms
  c.unmixSolver.maxIters = 200;
  c.imagingSolver.lambda = 0.2;
  c.imagingSolver.maxIters = 300;
  return c;
}

/// Structured organ-like phantom standing in for the medical datasets.
inline ExperimentConfig preset_structured() {
  ExperimentConfig c;
  c.name = "structured";
  c.geometry = ScanGeometry::parallel(64, 64, 0.5, 90, 91, 0.5);
  c.spectral.materials = {"bone", "tissue", "calcium", "blood", "air"};
  c.spectral.y0 = 1e9;
  c.phantom.kind = "structured";
  c.phantom.materials = c.spectral.materials;
  c.training.steps = 3000;
  c.training.batch = 1;
  c.training.valEvery = 500;
  c.data = {400, 10, 100};
  c.unmixSolver.maxIters = 200;
  c.imagingSolver.lambda = 0.2;
  c.imagingSolver.maxIters = 300;
  return c;
}

inline std::vector<std::string> preset_names() { return {"e_5", "e_5_small", "structured"}; }

inline ExperimentConfig preset(const std::string& name) {
  if (name == "e_5") return preset_e_5();
  if (name == "e_5_small") return preset_e_5_small();
  if (name == "structured") return preset_structured();
  throw ConfigError("unknown preset '" + name + "' (available: e_5, e_5_small, structured)");
}

/// Reads a config file; its "preset" key (or fallbackPreset) selects the base.
inline ExperimentConfig load_experiment_config(const std::filesystem::path& path, const std::string& fallbackPreset) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  const json j = read_json(path);
  const std::string base = j.value("preset", fallbackPreset);
  return experiment_config_from_json(j, preset(base));
}

} // namespace spct
