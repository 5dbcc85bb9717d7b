// spct: data generation, training, reconstruction and evaluation.

#include "spct/config.hpp"
#include "spct/metrics.hpp"

#include <CLI11.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>

using namespace spct;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUnexpected = 1, kConfig = 2, kIo = 3, kNumerical = 4 };

// Held for the lifetime of a command writing into dir.
class OutputLock {
public:
  explicit OutputLock(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    path_ = dir / ".spct.lock";
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw IoError(dir.string() + " is locked by another spct process (delete " + path_.string() +
                    " if that process is gone)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) { /* the pid is informational */ }
  }
  ~OutputLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

private:
  fs::path path_;
  int fd_ = -1;
};

struct Common {
  std::string config;
  std::string preset = "e_5_small";
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON experiment config (its 'preset' key selects the base)");
  cmd->add_option("--preset", c.preset, "Base preset: e_5, e_5_small, structured")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Master seed (overrides the config)");
  cmd->add_option("--out", c.out, "Output directory")->required();
}

ExperimentConfig resolve(const Common& c, const std::string& fallbackConfig = {}) {
  ExperimentConfig cfg;
  if (!c.config.empty())
    cfg = load_experiment_config(c.config, c.preset);
  else if (!fallbackConfig.empty() && fs::exists(fallbackConfig))
    cfg = load_experiment_config(fallbackConfig, c.preset);
  else
    cfg = preset(c.preset);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<Sample> load_samples(const Dataset& d, std::size_t n) {
  std::vector<Sample> out;
  n = std::min(n, d.count);
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(d.load(i));
  return out;
}

void check_dataset(const Dataset& d, const ExperimentConfig& c) {
  if (d.system.materials != c.spectral.materials)
    throw ConfigError(d.dir.string() + ": dataset materials differ from the configuration");
}

const char* kSplits[] = {"train", "val", "test"};

// --- gen-data --------------------------------------------------------------

struct GenArgs {
  Common common;
  std::string split = "all";
  std::optional<std::size_t> count;
  bool overwrite = false;
};

int cmd_gen_data(const GenArgs& a) {
  auto c = resolve(a.common);
  const fs::path out = a.common.out;
  OutputLock lock(out);
  const auto sys = c.spectral.build();
  for (std::size_t k = 0; k < 3; ++k) {
    if (a.split != "all" && a.split != kSplits[k]) continue;
    const std::size_t n = a.count ? *a.count : (k == 0 ? c.data.train : k == 1 ? c.data.val : c.data.test);
    const auto t0 = std::chrono::steady_clock::now();
    generate_dataset(c.phantom, c.geometry, sys, n, derive_seed(c.seed, k, 41), out / kSplits[k], a.overwrite,
                     {{"experiment", c.name}, {"split", kSplits[k]}});
    std::cout << "wrote " << n << " " << kSplits[k] << " samples to " << (out / kSplits[k]).string() << " ("
              << seconds_since(t0) << " s)\n";
  }
  write_json(out / "config.json", to_json(c));
  return kOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string method;
  std::string data;
  std::optional<std::size_t> steps, batch, logEvery;
  bool conv3d = false;
  bool simulatedBeta = false;
};

int cmd_train(const TrainArgs& a) {
  auto c = resolve(a.common);
  if (!a.method.empty()) c.training.method = parse_method(a.method);
  if (a.steps) c.training.steps = *a.steps;
  if (a.batch) c.training.batch = *a.batch;
  if (a.conv3d) c.network.unmix.convDims = 3;
  if (a.simulatedBeta) c.training.slSimulatedBeta = true;
  c.training.seed = c.seed;
  c.validate();

  const fs::path data = a.data;
  auto trainData = Dataset::open(data / "train");
  auto valData = Dataset::open(data / "val");
  check_dataset(trainData, c);
  check_dataset(valData, c);
  if (trainData.count < c.data.train)
    std::cerr << "warning: " << trainData.count << " training samples available (config asks for " << c.data.train
              << ")\n";

  const fs::path out = a.common.out;
  OutputLock lock(out);
  const auto trainSet = load_samples(trainData, c.data.train);
  const auto valSet = load_samples(valData, c.data.val);
  Projector P(trainData.geometry);
  PdProblem prob(trainData.system, P, c.network.betaScale);

  TrainConfig tc = c.training;
  tc.logEvery = a.logEvery ? *a.logEvery : std::max<std::size_t>(1, tc.steps / 20);
  tc.log = &std::cout;
  const auto t0 = std::chrono::steady_clock::now();
  auto res = train<float>(trainSet, valSet, prob, c.network, tc);
  const double secs = seconds_since(t0);

  const bool sl = c.training.method == TrainMethod::SL;
  json meta = {{"experiment", c.name}, {"method", sl ? "sl" : "il"}, {"seed", c.seed}};
  auto save = [&](const fs::path& dir, const LearnedModel<float>& m) {
    if (sl) {
      save_model(dir / "unmix", m, prob, meta, true, false);
      save_model(dir / "reco", m, prob, meta, false, true);
    } else {
      save_model(dir, m, prob, meta);
    }
  };
  save(out / "checkpoint", res.best);
  save(out / "final", res.final);
  res.history.write_csv(out / "history.csv");
  write_json(out / "config.json", to_json(c));
  write_json(out / "summary.json", {{"bestValSsim", res.bestValSsim}, {"betaScale", prob.betaScale}});
  std::cout << "best validation SSIM " << res.bestValSsim << "\n";
  std::cout << "timing: training " << secs << " s\n";
  return kOk;
}

// --- reconstruct -----------------------------------------------------------

struct ReconArgs {
  Common common;
  std::string checkpoint;
  bool classical = false;
  std::string input;
  std::string data;
  std::size_t index = 0;
};

void write_images(const fs::path& out, const MaterialImage& q, const SpectralSystem& sys) {
  const std::size_t ny = q.shape[1], nx = q.shape[2];
  double hi = 0.0;
  for (double r : sys.densities) hi = std::max(hi, r);
  for (std::size_t k = 0; k < q.shape[0]; ++k) {
    auto plane = q.slice(k);
    write_f32(out / ("q_" + sys.materials[k] + ".f32"), plane);
    std::vector<double> dens(plane.begin(), plane.end());
    const double rho = sys.densities.empty() ? 1.0 : sys.densities[k];
    for (auto& v : dens) v *= rho;
    write_pgm(out / ("q_" + sys.materials[k] + ".pgm"), dens, ny, nx, 0.0, hi > 0.0 ? hi : 1.0);
  }
}

fs::path checkpoint_config(const std::string& checkpoint) {
  if (checkpoint.empty()) return {};
  return fs::path(checkpoint).parent_path() / "config.json";
}

int cmd_reconstruct(const ReconArgs& a) {
  if (a.classical == !a.checkpoint.empty()) throw ConfigError("reconstruct: give exactly one of --checkpoint, --classical");
  if (a.input.empty() == a.data.empty()) throw ConfigError("reconstruct: give exactly one of --input, --data");
  auto c = resolve(a.common, checkpoint_config(a.checkpoint));
  c.validate();

  const auto tIo = std::chrono::steady_clock::now();
  ScanGeometry geo = c.geometry;
  SpectralSystem sys;
  BinnedCounts y;
  if (!a.data.empty()) {
    auto d = Dataset::open(a.data);
    check_dataset(d, c);
    geo = d.geometry;
    sys = d.system;
    y = d.load(a.index).y;
  } else {
    sys = c.spectral.build();
    y = BinnedCounts(sys.n_bins(), geo.n_angles(), geo.nDet);
    y.data = read_f32(a.input, y.size());
  }
  double io = seconds_since(tIo);

  const fs::path out = a.common.out;
  OutputLock lock(out);
  Projector P(geo);
  MaterialImage q;
  double inference = 0.0;
  if (a.classical) {
    const auto t0 = std::chrono::steady_clock::now();
    q = classical_reconstruct(sys, geo, y, c.unmixSolver, c.imagingSolver, &P);
    inference = seconds_since(t0);
  } else {
    const auto t1 = std::chrono::steady_clock::now();
    const json meta = read_model_meta(a.checkpoint);
    PdProblem prob(sys, P, meta.value("betaScale", 0.0));
    auto model = load_model<float>(a.checkpoint, prob);
    io += seconds_since(t1);
    const auto t0 = std::chrono::steady_clock::now();
    q = learned_reconstruct(model, prob, y);
    inference = seconds_since(t0);
  }
  const auto t2 = std::chrono::steady_clock::now();
  write_images(out, q, sys);
  write_json(out / "config.json", to_json(c));
  io += seconds_since(t2);
  write_json(out / "timing.json", {{"method", a.classical ? "classical" : "learned"},
                                   {"inferenceSeconds", inference},
                                   {"ioSeconds", io}});
  std::cout << "timing: " << (a.classical ? "classical" : "learned") << " inference " << inference << " s, io " << io
            << " s\n";
  return kOk;
}

// --- evaluate --------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string checkpoint;
  bool classical = false;
  bool oracle = false;
  std::string data;
  std::size_t n = kReferenceTestSamples;
};

int cmd_evaluate(const EvalArgs& a) {
  if (int(a.classical) + int(a.oracle) + int(!a.checkpoint.empty()) != 1)
    throw ConfigError("evaluate: give exactly one of --checkpoint, --classical, --oracle");
  auto c = resolve(a.common, checkpoint_config(a.checkpoint));
  c.validate();
  auto d = Dataset::open(a.data);
  check_dataset(d, c);
  const auto samples = load_samples(d, a.n);

  const fs::path out = a.common.out;
  OutputLock lock(out);
  Projector P(d.geometry);
  std::optional<PdProblem> prob;
  std::optional<LearnedModel<float>> model;
  std::string method = a.oracle ? "oracle" : a.classical ? "classical" : "learned";
  if (!a.checkpoint.empty()) {
    prob.emplace(d.system, P, read_model_meta(a.checkpoint).value("betaScale", 0.0));
    model.emplace(load_model<float>(a.checkpoint, *prob));
  }
  auto recon = [&](std::size_t i) -> MaterialImage {
    if (a.oracle) return samples[i].q;
    if (a.classical) return classical_reconstruct(d.system, d.geometry, samples[i].y, c.unmixSolver, c.imagingSolver, &P);
    return learned_reconstruct(*model, *prob, samples[i].y);
  };
  EvalOptions opt;
  opt.nSamples = a.n;
  auto rep = evaluate(recon, [&](std::size_t i) { return samples[i].q; }, samples.size(), d.system.materials, opt);
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";

  json j = rep.to_json();
  j.erase("secondsPerImage");
  j["method"] = method;
  write_json(out / "eval.json", j);
  {
    std::ofstream t(out / "eval.txt", std::ios::trunc);
    if (!t) throw IoError("cannot write " + (out / "eval.txt").string());
    t << rep.table();
  }
  write_json(out / "timing.json", {{"method", method}, {"secondsPerImage", rep.secondsPerImage}});
  write_json(out / "config.json", to_json(c));
  std::cout << rep.table();
  std::cout << "timing: " << method << " " << rep.secondsPerImage << " s per image\n";
  return kOk;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned spectral CT: two-step material unmixing and imaging"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate train/val/test datasets");
  add_common(g, gen.common);
  g->add_option("--split", gen.split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  g->add_option("--count", gen.count, "Samples per generated split (default from the config)");
  g->add_flag("--overwrite", gen.overwrite, "Replace existing dataset files");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the learned pipeline (sl or il)");
  add_common(t, tr.common);
  t->add_option("--method", tr.method, "sl or il")->check(CLI::IsMember({"sl", "il", "SL", "IL"}));
  t->add_option("--data", tr.data, "Directory with train/ and val/ datasets")->required();
  t->add_option("--steps", tr.steps, "Training steps (per stage for sl)");
  t->add_option("--batch", tr.batch, "Batch size");
  t->add_option("--log-every", tr.logEvery, "Log interval in steps");
  t->add_flag("--conv3d-unmix", tr.conv3d, "3D convolutions in the unmixing network");
  t->add_flag("--sl-simulated-beta", tr.simulatedBeta, "Train the sl imaging stage on true material sinograms");

  ReconArgs rc;
  auto* r = app.add_subcommand("reconstruct", "Reconstruct material images from binned counts");
  add_common(r, rc.common);
  r->add_option("--checkpoint", rc.checkpoint, "Learned model checkpoint");
  r->add_flag("--classical", rc.classical, "ADMM unmixing followed by TV imaging");
  r->add_option("--input", rc.input, "Binned counts (f32, bins x angles x detectors)");
  r->add_option("--data", rc.data, "Dataset directory (with --index)");
  r->add_option("--index", rc.index, "Sample index in --data");

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score reconstructions of a test set");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "Learned model checkpoint");
  e->add_flag("--classical", ev.classical, "Evaluate the classical pipeline");
  e->add_flag("--oracle", ev.oracle, "Return the ground truth (harness self-test)");
  e->add_option("--data", ev.data, "Test dataset directory")->required();
  e->add_option("--n", ev.n, "Number of test samples")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc0 = app.exit(err);
    return rc0 == 0 ? kOk : kConfig;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen);
    if (t->parsed()) return cmd_train(tr);
    if (r->parsed()) return cmd_reconstruct(rc);
    if (e->parsed()) return cmd_evaluate(ev);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kConfig;
  } catch (const IoError& err) {
    std::cerr << "i/o error: " << err.what() << "\n";
    return kIo;
  } catch (const NumericalError& err) {
    std::cerr << "numerical error: " << err.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kConfig;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUnexpected;
  }
  return kUnexpected;
}
