#pragma once

// Ground-truth volume-fraction images and synthetic (q, beta, y) samples.

#include "spct/io.hpp"
#include "spct/spectral.hpp"
#include "spct/tomo.hpp"

#include <optional>
#include <random>
#include <regex>

namespace spct {

struct PhantomConfig {
  std::string kind = "ellipses"; // ellipses | shepp_logan | structured
  double meanEllipses = 25.0;
  std::vector<std::string> materials{"bone", "tissue", "calcium", "adipose", "air"};
  double minAxis = 0.05; // semi-axis range as a fraction of the domain side
  double maxAxis = 0.35;
  bool allowOverlapMix = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (kind != "ellipses" && kind != "shepp_logan" && kind != "structured")
      throw ConfigError("phantom kind must be ellipses, shepp_logan or structured (got '" + kind + "')");
    if (!(meanEllipses > 0.0)) throw ConfigError("meanEllipses must be > 0");
    if (materials.empty() || materials.back() != "air")
      throw ConfigError("phantom materials must be nonempty with air last");
    for (std::size_t k = 0; k + 1 < materials.size(); ++k)
      if (materials[k] == "air") throw ConfigError("air may only appear once, as the last material");
    if (materials.size() < 2) throw ConfigError("phantom needs at least one non-air material");
    if (!(minAxis > 0.0 && minAxis <= maxAxis)) throw ConfigError("need 0 < minAxis <= maxAxis");
  }

  std::size_t air() const { return materials.size() - 1; }
};

inline json to_json(const PhantomConfig& c) {
  return {{"kind", c.kind},       {"meanEllipses", c.meanEllipses}, {"materials", c.materials},
          {"minAxis", c.minAxis}, {"maxAxis", c.maxAxis}, {"allowOverlapMix", c.allowOverlapMix},
          {"seed", c.seed}};
}

inline PhantomConfig phantom_config_from_json(const json& j) {
  PhantomConfig c;
  c.kind = j.value("kind", c.kind);
  c.meanEllipses = j.value("meanEllipses", c.meanEllipses);
  c.materials = j.value("materials", c.materials);
  c.minAxis = j.value("minAxis", c.minAxis);
  c.maxAxis = j.value("maxAxis", c.maxAxis);
  c.allowOverlapMix = j.value("allowOverlapMix", c.allowOverlapMix);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

/// Centre (cx, cy), semi-axes (a, b) along the rotated x/y axes, rotation phi.
struct Ellipse {
  double cx, cy, a, b, phi;
  std::size_t material;

  bool contains(double x, double y) const {
    const double c = std::cos(phi), s = std::sin(phi);
    const double u = (x - cx) * c + (y - cy) * s;
    const double v = -(x - cx) * s + (y - cy) * c;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

namespace detail {

inline double pixel_centre_x(const ScanGeometry& g, std::size_t ix) {
  return (static_cast<double>(ix) + 0.5 - 0.5 * static_cast<double>(g.nPixX)) * g.pixelSize;
}
inline double pixel_centre_y(const ScanGeometry& g, std::size_t iy) {
  return (static_cast<double>(iy) + 0.5 - 0.5 * static_cast<double>(g.nPixY)) * g.pixelSize;
}
inline double domain_side(const ScanGeometry& g) {
  return static_cast<double>(std::min(g.nPixX, g.nPixY)) * g.pixelSize;
}

// Paints ellipses in order; later ellipses win. With mix, a pixel covered by
// two or more gets half of each of the last two covering materials.
inline MaterialImage paint(const ScanGeometry& g, std::size_t nMaterials, std::size_t background,
                           const std::vector<Ellipse>& ellipses, bool mix) {
  MaterialImage q(nMaterials, g.nPixY, g.nPixX, 0.0);
  for (std::size_t iy = 0; iy < g.nPixY; ++iy)
    for (std::size_t ix = 0; ix < g.nPixX; ++ix) {
      const double x = pixel_centre_x(g, ix), y = pixel_centre_y(g, iy);
      std::optional<std::size_t> last, prev;
      for (const auto& e : ellipses)
        if (e.contains(x, y)) {
          prev = last;
          last = e.material;
        }
      if (!last) {
        q(background, iy, ix) = 1.0;
      } else if (mix && prev) {
        q(*last, iy, ix) += 0.5;
        q(*prev, iy, ix) += 0.5;
      } else {
        q(*last, iy, ix) = 1.0;
      }
    }
  return q;
}

} // namespace detail

/// Draws the ellipse list for one random phantom. Count ~ Poisson(mean),
/// semi-axes uniform in [minAxis, maxAxis] * side, orientation uniform in
/// [0, pi), centres uniform in the inscribed disc, material uniform over the
/// non-air materials.
inline std::vector<Ellipse> random_ellipses(const PhantomConfig& cfg, const ScanGeometry& g,
                                            std::uint64_t seed) {
  cfg.validate();
  g.validate();
  std::mt19937_64 rng(seed);
  std::poisson_distribution<int> count(cfg.meanEllipses);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> mat(0, cfg.materials.size() - 2);
  const double side = detail::domain_side(g), R = 0.5 * side;
  const int n = count(rng);
  std::vector<Ellipse> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Ellipse e{};
    const double r = R * std::sqrt(unit(rng)), t = 2.0 * std::numbers::pi * unit(rng);
    e.cx = r * std::cos(t);
    e.cy = r * std::sin(t);
    e.a = side * (cfg.minAxis + (cfg.maxAxis - cfg.minAxis) * unit(rng));
    e.b = side * (cfg.minAxis + (cfg.maxAxis - cfg.minAxis) * unit(rng));
    e.phi = std::numbers::pi * unit(rng);
    e.material = mat(rng);
    out.push_back(e);
  }
  return out;
}

inline MaterialImage random_ellipse_phantom(const PhantomConfig& cfg, const ScanGeometry& g,
                                            std::uint64_t seed) {
  auto ellipses = random_ellipses(cfg, g, seed);
  return detail::paint(g, cfg.materials.size(), cfg.air(), ellipses, cfg.allowOverlapMix);
}

inline MaterialImage random_ellipse_phantom(const PhantomConfig& cfg, const ScanGeometry& g) {
  return random_ellipse_phantom(cfg, g, cfg.seed);
}

/// Modified Shepp-Logan ellipses in the unit square: x, y, a, b, angle (deg), intensity.
inline constexpr std::array<std::array<double, 6>, 10> kSheppLogan{{
    {0.0, 0.0, 0.69, 0.92, 0.0, 1.0},
    {0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8},
    {0.22, 0.0, 0.11, 0.31, -18.0, -0.2},
    {-0.22, 0.0, 0.16, 0.41, 18.0, -0.2},
    {0.0, 0.35, 0.21, 0.25, 0.0, 0.1},
    {0.0, 0.1, 0.046, 0.046, 0.0, 0.1},
    {0.0, -0.1, 0.046, 0.046, 0.0, 0.1},
    {-0.08, -0.605, 0.046, 0.023, 0.0, 0.1},
    {0.0, -0.606, 0.023, 0.023, 0.0, 0.1},
    {0.06, -0.605, 0.023, 0.046, 0.0, 0.1},
}};

namespace detail {
inline Ellipse shepp_logan_ellipse(std::size_t i, double R, std::size_t material) {
  const auto& e = kSheppLogan[i];
  return {e[0] * R, e[1] * R, e[2] * R, e[3] * R, e[4] * std::numbers::pi / 180.0, material};
}
} // namespace detail

/// Material Shepp-Logan. Materials are taken by position: [0] skull shell,
/// [1] brain interior, [2] the six small inclusions, [3] the two lateral
/// voids, last = air outside.
inline MaterialImage shepp_logan_material(const ScanGeometry& g,
                                          const std::vector<std::string>& materials) {
  g.validate();
  if (materials.size() < 5 || materials.back() != "air")
    throw ConfigError("shepp_logan_material needs >= 4 non-air materials followed by air");
  const double R = 0.5 * detail::domain_side(g);
  std::vector<Ellipse> es;
  es.push_back(detail::shepp_logan_ellipse(0, R, 0));
  es.push_back(detail::shepp_logan_ellipse(1, R, 1));
  es.push_back(detail::shepp_logan_ellipse(2, R, 3));
  es.push_back(detail::shepp_logan_ellipse(3, R, 3));
  for (std::size_t i = 4; i < 10; ++i) es.push_back(detail::shepp_logan_ellipse(i, R, 2));
  return detail::paint(g, materials.size(), materials.size() - 1, es, false);
}

/// Single-channel modified Shepp-Logan intensity (additive ellipses).
inline MaterialImage shepp_logan_intensity(const ScanGeometry& g) {
  g.validate();
  const double R = 0.5 * detail::domain_side(g);
  MaterialImage q(1, g.nPixY, g.nPixX, 0.0);
  for (std::size_t i = 0; i < kSheppLogan.size(); ++i) {
    auto e = detail::shepp_logan_ellipse(i, R, 0);
    for (std::size_t iy = 0; iy < g.nPixY; ++iy)
      for (std::size_t ix = 0; ix < g.nPixX; ++ix)
        if (e.contains(detail::pixel_centre_x(g, ix), detail::pixel_centre_y(g, iy)))
          q(0, iy, ix) += kSheppLogan[i][5];
  }
  for (auto& v : q.data) v = std::max(0.0, v); // rounding at 1 - 0.8 - 0.2
  return q;
}

/// Torso-like phantom: adipose layer around a tissue body, two organs, a
/// spine and small calcified inclusions, with seeded size/position jitter.
/// Roles fall back to tissue when their material is not in the list.
inline MaterialImage structured_phantom(const ScanGeometry& g, const std::vector<std::string>& materials,
                                        std::uint64_t seed) {
  g.validate();
  if (materials.empty() || materials.back() != "air")
    throw ConfigError("structured phantom: materials must end with air");
  auto find = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t k = 0; k + 1 < materials.size(); ++k)
      if (materials[k] == name) return k;
    return std::nullopt;
  };
  const auto tissue = find("tissue");
  if (!tissue) throw ConfigError("structured phantom needs a 'tissue' material");
  auto role = [&](const std::string& name) { return find(name).value_or(*tissue); };

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jit(-1.0, 1.0);
  const double R = 0.5 * detail::domain_side(g);
  auto j = [&](double v, double rel) { return v * (1.0 + rel * jit(rng)); };

  std::vector<Ellipse> es;
  const double bodyA = j(0.9, 0.05) * R, bodyB = j(0.65, 0.08) * R;
  es.push_back({0.0, 0.0, bodyA, bodyB, 0.0, role("adipose")});
  const double fat = j(0.1, 0.3) * R;
  es.push_back({0.0, 0.0, bodyA - fat, bodyB - fat, 0.0, *tissue});
  es.push_back({j(-0.35, 0.15) * R, j(0.1, 0.5) * R, j(0.25, 0.2) * R, j(0.2, 0.2) * R, j(0.3, 0.5), role("blood")});
  es.push_back({j(0.35, 0.15) * R, j(0.05, 0.5) * R, j(0.2, 0.2) * R, j(0.28, 0.2) * R, j(-0.4, 0.5), role("blood")});
  es.push_back({0.0, j(-0.4, 0.1) * R, j(0.11, 0.15) * R, j(0.1, 0.15) * R, 0.0, role("bone")});
  std::uniform_int_distribution<int> nInc(2, 5);
  const int n = nInc(rng);
  for (int i = 0; i < n; ++i) {
    const double r = 0.5 * R * std::sqrt(0.5 * (jit(rng) + 1.0)), t = std::numbers::pi * (jit(rng) + 1.0);
    const double a = j(0.04, 0.4) * R;
    es.push_back({r * std::cos(t), r * std::sin(t), a, a, 0.0, role("calcium")});
  }
  return detail::paint(g, materials.size(), materials.size() - 1, es, false);
}

/// Dispatch on cfg.kind with an explicit seed.
inline MaterialImage make_phantom(const PhantomConfig& cfg, const ScanGeometry& g, std::uint64_t seed) {
  cfg.validate();
  if (cfg.kind == "shepp_logan") return shepp_logan_material(g, cfg.materials);
  if (cfg.kind == "structured") return structured_phantom(g, cfg.materials, seed);
  return random_ellipse_phantom(cfg, g, seed);
}

struct Sample {
  MaterialImage q;
  SinogramStack beta;
  BinnedCounts y;
};

inline Sample synthesize_sample(const MaterialImage& q, const Projector& P, const SpectralSystem& sys,
                                std::uint64_t seed) {
  if (q.shape[0] != sys.n_materials())
    throw std::invalid_argument("synthesize_sample: image has " + std::to_string(q.shape[0]) +
                                " materials, system has " + std::to_string(sys.n_materials()));
  Sample s{q, P.project(q), {}};
  s.y = sample_counts(forward_counts(sys, s.beta), seed);
  return s;
}

inline Sample synthesize_sample(const MaterialImage& q, const ScanGeometry& g, const SpectralSystem& sys,
                                std::uint64_t seed) {
  return synthesize_sample(q, Projector(g), sys, seed);
}

// Seeds of sample i: stream 0 draws the phantom, stream 1 the counts.
inline std::uint64_t phantom_seed(std::uint64_t seed, std::size_t i) { return derive_seed(seed, i, 0); }
inline std::uint64_t noise_seed(std::uint64_t seed, std::size_t i) { return derive_seed(seed, i, 1); }

namespace detail {
inline bool is_dataset_file(const std::filesystem::path& p) {
  static const std::regex re(R"((q|beta|y)_\d+\.f32|manifest\.json)");
  return std::regex_match(p.filename().string(), re);
}
} // namespace detail

/// Writes `count` samples and manifest.json to outDir. Output is a pure
/// function of the arguments. An existing non-empty directory is refused
/// unless overwrite is set, in which case only dataset files are replaced and
/// anything else present is an error.
inline void generate_dataset(const PhantomConfig& cfg, const ScanGeometry& g, const SpectralSystem& sys,
                             std::size_t count, std::uint64_t seed, const std::filesystem::path& outDir,
                             bool overwrite = false, const json& extra = json::object()) {
  namespace fs = std::filesystem;
  cfg.validate();
  g.validate();
  if (cfg.materials != sys.materials)
    throw ConfigError("phantom materials and spectral system materials differ");
  std::error_code ec;
  if (fs::exists(outDir, ec)) {
    if (!fs::is_directory(outDir)) throw IoError(outDir.string() + " exists and is not a directory");
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(outDir)) entries.push_back(e.path());
    if (!entries.empty()) {
      if (!overwrite)
        throw IoError(outDir.string() + " is not empty (pass the overwrite flag to replace it)");
      for (const auto& p : entries)
        if (!detail::is_dataset_file(p))
          throw IoError("refusing to overwrite " + outDir.string() + ": foreign entry " + p.filename().string());
      for (const auto& p : entries) fs::remove(p);
    }
  } else {
    fs::create_directories(outDir, ec);
    if (ec) throw IoError("cannot create " + outDir.string() + ": " + ec.message());
  }

  Projector P(g);
  const std::size_t N = sys.n_materials();
  json samples = json::array();
  for (std::size_t i = 0; i < count; ++i) {
    auto q = make_phantom(cfg, g, phantom_seed(seed, i));
    auto s = synthesize_sample(q, P, sys, noise_seed(seed, i));
    const auto id = std::to_string(i);
    write_f32(outDir / ("q_" + id + ".f32"), s.q.data);
    write_f32(outDir / ("beta_" + id + ".f32"), s.beta.data);
    write_f32(outDir / ("y_" + id + ".f32"), s.y.data);
    samples.push_back({{"index", i},
                       {"phantomSeed", phantom_seed(seed, i)},
                       {"noiseSeed", noise_seed(seed, i)}});
  }
  json m = {{"format", "spct-dataset-1"},
            {"count", count},
            {"seed", seed},
            {"phantom", to_json(cfg)},
            {"geometry", to_json(g)},
            {"system", to_json(sys)},
            {"shapes",
             {{"q", g.image_shape(N)}, {"beta", g.sinogram_shape(N)}, {"y", g.sinogram_shape(sys.n_bins())}}},
            {"dtype", "float32-le"},
            {"samples", samples},
            {"config", extra}};
  write_json(outDir / "manifest.json", m);
}

struct Dataset {
  std::filesystem::path dir;
  json manifest;
  ScanGeometry geometry;
  SpectralSystem system;
  std::size_t count = 0;

  static Dataset open(const std::filesystem::path& dir) {
    Dataset d;
    d.dir = dir;
    d.manifest = read_json(dir / "manifest.json");
    try {
      if (d.manifest.at("format") != "spct-dataset-1") throw ConfigError("unknown dataset format");
      d.geometry = geometry_from_json(d.manifest.at("geometry"));
      d.system = system_from_json(d.manifest.at("system"));
      d.count = d.manifest.at("count").get<std::size_t>();
    } catch (const json::exception& e) {
      throw ConfigError((dir / "manifest.json").string() + ": " + e.what());
    }
    return d;
  }

  Sample load(std::size_t i) const {
    if (i >= count) throw std::out_of_range("dataset sample " + std::to_string(i));
    const std::size_t N = system.n_materials();
    Sample s{MaterialImage(N, geometry.nPixY, geometry.nPixX),
             SinogramStack(N, geometry.n_angles(), geometry.nDet),
             BinnedCounts(system.n_bins(), geometry.n_angles(), geometry.nDet)};
    const auto id = std::to_string(i);
    s.q.data = read_f32(dir / ("q_" + id + ".f32"), s.q.size());
    s.beta.data = read_f32(dir / ("beta_" + id + ".f32"), s.beta.size());
    s.y.data = read_f32(dir / ("y_" + id + ".f32"), s.y.size());
    return s;
  }
};

inline Dataset load_dataset(const std::filesystem::path& dir) { return Dataset::open(dir); }

} // namespace spct
