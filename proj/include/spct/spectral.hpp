#pragma once

// Discretised spectral physics: material tables, quadrature, the binned
// photon-count forward model and its derivative adjoint, KL misfit and
// Poisson sampling. Count evaluations run in the log domain.

#include "spct/common.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string_view>
#include <variant>

namespace spct {

struct MaterialEntry {
  std::string name;
  double density = 0.0;         // g/cm^3
  std::vector<double> energies; // keV, non-decreasing; a repeated energy marks an absorption edge
  std::vector<double> macs;     // cm^2/g
};

class MaterialTable {
public:
  void add(MaterialEntry m) {
    if (m.name.empty()) throw ConfigError("material with empty name");
    if (contains(m.name)) throw ConfigError("duplicate material '" + m.name + "'");
    if (!(m.density > 0.0)) throw ConfigError("material '" + m.name + "': density must be > 0");
    if (m.energies.size() != m.macs.size() || m.energies.size() < 2)
      throw ConfigError("material '" + m.name + "': need >= 2 (energy, mac) rows");
    for (std::size_t i = 0; i < m.macs.size(); ++i) {
      if (!(m.macs[i] > 0.0) || !(m.energies[i] > 0.0))
        throw ConfigError("material '" + m.name + "': energies and macs must be > 0");
      if (i > 0) {
        if (m.energies[i] < m.energies[i - 1])
          throw ConfigError("material '" + m.name + "': energies must be increasing");
        if (m.energies[i] == m.energies[i - 1] &&
            (i + 1 == m.energies.size() || (i >= 2 && m.energies[i - 2] == m.energies[i]) ||
             i == 1))
          throw ConfigError("material '" + m.name + "': malformed edge rows");
      }
    }
    entries_.push_back(std::move(m));
  }

  bool contains(std::string_view name) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const MaterialEntry& e) { return e.name == name; });
  }

  const MaterialEntry& at(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e;
    throw ConfigError("unknown material '" + std::string(name) + "'");
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
  }

  /// Log-log interpolated MAC. At a duplicated (edge) energy the value above
  /// the edge is returned.
  double mac(std::string_view name, double energy) const {
    const auto& e = at(name);
    if (energy < e.energies.front() || energy > e.energies.back())
      throw ConfigError("energy " + std::to_string(energy) + " keV outside table range of '" +
                        e.name + "'");
    auto it = std::upper_bound(e.energies.begin(), e.energies.end(), energy);
    if (it == e.energies.end()) return e.macs.back();
    const std::size_t i = static_cast<std::size_t>(it - e.energies.begin()) - 1;
    const double t = (std::log(energy) - std::log(e.energies[i])) /
                     (std::log(e.energies[i + 1]) - std::log(e.energies[i]));
    return std::exp(std::log(e.macs[i]) + t * (std::log(e.macs[i + 1]) - std::log(e.macs[i])));
  }

  std::pair<double, double> energy_range(std::string_view name) const {
    const auto& e = at(name);
    return {e.energies.front(), e.energies.back()};
  }

  /// Format: "# material <name> density <rho>" starts a block, followed by
  /// "E_keV mac" rows. Other '#' lines and blank lines are comments.
  static MaterialTable parse(std::istream& in) {
    MaterialTable table;
    std::optional<MaterialEntry> cur;
    std::string line;
    int lineNo = 0;
    auto flush = [&] {
      if (cur) table.add(std::move(*cur));
      cur.reset();
    };
    while (std::getline(in, line)) {
      ++lineNo;
      std::istringstream ss(line);
      std::string tok;
      if (!(ss >> tok)) continue;
      if (tok[0] == '#') {
        std::string kw;
        if (tok == "#" && (ss >> kw) && kw == "material") {
          flush();
          MaterialEntry m;
          std::string dkw;
          if (!(ss >> m.name >> dkw >> m.density) || dkw != "density")
            throw ConfigError("material table line " + std::to_string(lineNo) +
                              ": expected '# material <name> density <rho>'");
          cur = std::move(m);
        }
        continue;
      }
      if (!cur)
        throw ConfigError("material table line " + std::to_string(lineNo) +
                          ": data row before any '# material' header");
      double e = 0, m = 0;
      std::istringstream row(line);
      if (!(row >> e >> m))
        throw ConfigError("material table line " + std::to_string(lineNo) + ": bad row");
      cur->energies.push_back(e);
      cur->macs.push_back(m);
    }
    flush();
    return table;
  }

  static MaterialTable load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open material table " + path.string());
    return parse(in);
  }

private:
  std::vector<MaterialEntry> entries_;
};

inline std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("SPCT_DATA_DIR")) return env;
#ifdef SPCT_DATA_DIR
  return SPCT_DATA_DIR;
#else
  return "data";
#endif
}

inline MaterialTable default_material_table() {
  return MaterialTable::load(default_data_dir() / "materials" / "basis_v1.txt");
}

// Source spectrum models. Kramers: S(E) proportional to (E_max - E)/E.
struct KramersSpectrum {};

struct TabulatedSpectrum {
  std::vector<double> energies;
  std::vector<double> values;

  double operator()(double e) const {
    if (e <= energies.front()) return e == energies.front() ? values.front() : 0.0;
    if (e >= energies.back()) return e == energies.back() ? values.back() : 0.0;
    auto it = std::upper_bound(energies.begin(), energies.end(), e);
    const std::size_t i = static_cast<std::size_t>(it - energies.begin()) - 1;
    const double t = (e - energies[i]) / (energies[i + 1] - energies[i]);
    return values[i] + t * (values[i + 1] - values[i]);
  }

  static TabulatedSpectrum load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open spectrum file " + path.string());
    TabulatedSpectrum s;
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ss(line);
      std::string first;
      if (!(ss >> first) || first[0] == '#') continue;
      std::istringstream row(line);
      double e = 0, v = 0;
      if (!(row >> e >> v)) throw ConfigError("bad spectrum row: " + line);
      if (v < 0) throw ConfigError("negative spectrum value at " + std::to_string(e) + " keV");
      if (!s.energies.empty() && e <= s.energies.back())
        throw ConfigError("spectrum energies must be strictly increasing");
      s.energies.push_back(e);
      s.values.push_back(v);
    }
    if (s.energies.size() < 2) throw ConfigError("spectrum needs >= 2 rows");
    return s;
  }
};

using SourceModel = std::variant<KramersSpectrum, TabulatedSpectrum>;

struct QuadratureRule {
  std::vector<double> nodes;   // ascending
  std::vector<double> weights;
};

/// Fejér's first rule (open, Chebyshev nodes) on [a, b].
inline QuadratureRule fejer_first(std::size_t n, double a, double b) {
  if (n < 1) throw std::invalid_argument("fejer_first: n >= 1 required");
  if (!(a < b)) throw std::invalid_argument("fejer_first: need a < b");
  QuadratureRule q;
  q.nodes.resize(n);
  q.weights.resize(n);
  const double pi = std::numbers::pi;
  for (std::size_t k = 0; k < n; ++k) {
    const double theta = (2.0 * static_cast<double>(k) + 1.0) * pi / (2.0 * static_cast<double>(n));
    double s = 0.0;
    for (std::size_t j = 1; j <= n / 2; ++j) {
      const double jj = static_cast<double>(j);
      s += std::cos(2.0 * jj * theta) / (4.0 * jj * jj - 1.0);
    }
    const double w = (2.0 / static_cast<double>(n)) * (1.0 - 2.0 * s);
    // k = 0 is the node nearest +1; store ascending
    q.nodes[n - 1 - k] = 0.5 * (a + b) + 0.5 * (b - a) * std::cos(theta);
    q.weights[n - 1 - k] = 0.5 * (b - a) * w;
  }
  return q;
}

/// Geometric bin edges eMin*(eMax/eMin)^(i/nBins).
inline std::vector<double> log_bin_edges(std::size_t nBins, double eMin, double eMax) {
  std::vector<double> e(nBins + 1);
  for (std::size_t i = 0; i <= nBins; ++i)
    e[i] = eMin * std::pow(eMax / eMin, static_cast<double>(i) / static_cast<double>(nBins));
  e.front() = eMin;
  e.back() = eMax;
  return e;
}

/// Discretised acquisition physics. Matrices are row-major:
/// binSensitivity is nBins x nNodes, lacs is nNodes x nMaterials.
struct SpectralSystem {
  std::vector<std::string> materials;
  std::vector<double> densities;
  std::vector<double> nodes;
  std::vector<double> weights;
  std::vector<double> source;
  std::vector<double> binEdges;
  std::vector<double> binSensitivity;
  std::vector<double> lacs;
  double y0 = 1.0;

  // derived
  std::vector<double> logWeightedSource; // log(w_j s_j), -inf where zero
  std::vector<double> logSensitivity;    // log(D_bj), -inf where zero

  std::size_t n_materials() const { return materials.size(); }
  std::size_t n_bins() const { return binEdges.size() - 1; }
  std::size_t n_nodes() const { return nodes.size(); }
  double lac(std::size_t j, std::size_t k) const { return lacs[j * n_materials() + k]; }
  double sensitivity(std::size_t b, std::size_t j) const { return binSensitivity[b * n_nodes() + j]; }

  /// Expected counts per bin with no attenuation.
  std::vector<double> unattenuated_bin_counts() const {
    std::vector<double> out(n_bins(), 0.0);
    for (std::size_t b = 0; b < n_bins(); ++b)
      for (std::size_t j = 0; j < n_nodes(); ++j)
        out[b] += y0 * sensitivity(b, j) * weights[j] * source[j];
    return out;
  }

  /// Checks invariants and fills the log tables.
  void finalize() {
    const std::size_t Ne = nodes.size(), N = materials.size();
    if (Ne == 0 || N == 0) throw ConfigError("spectral system needs nodes and materials");
    if (binEdges.size() < 2) throw ConfigError("spectral system needs >= 1 bin");
    const std::size_t Nb = binEdges.size() - 1;
    if (weights.size() != Ne || source.size() != Ne || binSensitivity.size() != Nb * Ne ||
        lacs.size() != Ne * N || (!densities.empty() && densities.size() != N))
      throw ConfigError("spectral system: inconsistent array sizes");
    for (std::size_t i = 1; i < binEdges.size(); ++i)
      if (!(binEdges[i] > binEdges[i - 1])) throw ConfigError("bin edges must increase strictly");
    double wsum = 0.0, flux = 0.0;
    for (std::size_t j = 0; j < Ne; ++j) {
      if (weights[j] < 0 || source[j] < 0) throw ConfigError("negative quadrature weight or source");
      wsum += weights[j];
      flux += weights[j] * source[j];
    }
    const double span = binEdges.back() - binEdges.front();
    if (std::abs(wsum - span) > 1e-9 * span)
      throw ConfigError("quadrature weights must sum to the energy range");
    if (std::abs(flux - 1.0) > 1e-9) throw ConfigError("source must satisfy sum(w s) = 1");
    for (double d : binSensitivity)
      if (d < 0.0 || d > 1.0) throw ConfigError("bin sensitivity entries must lie in [0, 1]");
    for (double m : lacs)
      if (!(m > 0.0)) throw ConfigError("linear attenuation coefficients must be > 0");
    if (!(y0 > 0.0)) throw ConfigError("y0 must be > 0");

    constexpr double ninf = -std::numeric_limits<double>::infinity();
    logWeightedSource.resize(Ne);
    for (std::size_t j = 0; j < Ne; ++j) {
      const double ws = weights[j] * source[j];
      logWeightedSource[j] = ws > 0.0 ? std::log(ws) : ninf;
    }
    logSensitivity.resize(Nb * Ne);
    for (std::size_t i = 0; i < Nb * Ne; ++i)
      logSensitivity[i] = binSensitivity[i] > 0.0 ? std::log(binSensitivity[i]) : ninf;
  }
};

/// Builds the system from a material table: Fejér-I nodes on [eMin, eMax],
/// log-spaced ideal bins, LACs m_k(E_j) * rho_k, source normalised to
/// sum_j w_j s_j = 1.
inline SpectralSystem build_system(const MaterialTable& table,
                                   const std::vector<std::string>& selection,
                                   const SourceModel& sourceModel, std::size_t nBins, double eMin,
                                   double eMax, std::size_t nQuad, double y0) {
  if (selection.empty()) throw ConfigError("empty material selection");
  if (nBins < 1) throw ConfigError("nBins must be >= 1");
  if (nQuad < 2) throw ConfigError("nQuad must be >= 2");
  if (!(eMin > 0.0 && eMin < eMax)) throw ConfigError("need 0 < eMin < eMax");
  for (const auto& name : selection) {
    auto [lo, hi] = table.energy_range(name); // throws on unknown name
    if (eMin < lo || eMax > hi)
      throw ConfigError("energy range [" + std::to_string(eMin) + ", " + std::to_string(eMax) +
                        "] keV outside the table grid of '" + name + "'");
  }

  SpectralSystem sys;
  sys.materials = selection;
  sys.y0 = y0;
  auto rule = fejer_first(nQuad, eMin, eMax);
  sys.nodes = rule.nodes;
  sys.weights = rule.weights;
  sys.binEdges = log_bin_edges(nBins, eMin, eMax);

  const std::size_t Ne = nQuad, N = selection.size();
  sys.source.resize(Ne);
  for (std::size_t j = 0; j < Ne; ++j) {
    const double e = sys.nodes[j];
    sys.source[j] = std::visit(
        [&](const auto& m) -> double {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, KramersSpectrum>)
            return (eMax - e) / e;
          else
            return m(e);
        },
        sourceModel);
  }
  double flux = 0.0;
  for (std::size_t j = 0; j < Ne; ++j) flux += sys.weights[j] * sys.source[j];
  if (!(flux > 0.0)) throw ConfigError("source spectrum is zero on [eMin, eMax]");
  for (auto& s : sys.source) s /= flux;

  sys.binSensitivity.assign(nBins * Ne, 0.0);
  for (std::size_t b = 0; b < nBins; ++b) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < Ne; ++j) {
      const double e = sys.nodes[j];
      const bool last = b + 1 == nBins;
      if (e >= sys.binEdges[b] && (e < sys.binEdges[b + 1] || (last && e <= sys.binEdges[b + 1]))) {
        sys.binSensitivity[b * Ne + j] = 1.0;
        ++count;
      }
    }
    if (count == 0)
      throw ConfigError("energy bin " + std::to_string(b) + " [" +
                        std::to_string(sys.binEdges[b]) + ", " +
                        std::to_string(sys.binEdges[b + 1]) +
                        "] keV contains no quadrature node; increase nQuad");
  }

  sys.lacs.resize(Ne * N);
  sys.densities.resize(N);
  for (std::size_t k = 0; k < N; ++k) {
    const auto& m = table.at(selection[k]);
    sys.densities[k] = m.density;
    for (std::size_t j = 0; j < Ne; ++j)
      sys.lacs[j * N + k] = table.mac(selection[k], sys.nodes[j]) * m.density;
  }
  sys.finalize();
  return sys;
}

namespace detail {

inline void ray_attenuation(const SpectralSystem& sys, std::span<double> att, const auto* beta,
                            std::size_t r, std::size_t nRays) {
  const std::size_t N = sys.n_materials();
  for (std::size_t j = 0; j < att.size(); ++j) {
    double a = 0.0;
    for (std::size_t k = 0; k < N; ++k)
      a += sys.lacs[j * N + k] * static_cast<double>(beta[k * nRays + r]);
    att[j] = a;
  }
}

} // namespace detail

/// Expected counts ybar_b = y0 sum_j D_bj exp(log(w_j s_j) - (M beta)_j),
/// each bin sum evaluated as a LogSumExp. Arrays are material/bin-major with
/// nRays contiguous entries per plane. binScale (optional) multiplies bin b.
template <class T>
void forward_counts_kernel(const SpectralSystem& sys, const T* beta, T* out, std::size_t nRays,
                           const double* binScale = nullptr) {
  const std::size_t Ne = sys.n_nodes(), Nb = sys.n_bins();
  std::vector<double> att(Ne), terms(Ne);
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < nRays; ++r) {
    detail::ray_attenuation(sys, att, beta, r, nRays);
    for (std::size_t b = 0; b < Nb; ++b) {
      double m = ninf;
      for (std::size_t j = 0; j < Ne; ++j) {
        terms[j] = sys.logSensitivity[b * Ne + j] + sys.logWeightedSource[j] - att[j];
        m = std::max(m, terms[j]);
      }
      double value = 0.0;
      if (m > ninf) {
        double s = 0.0;
        for (std::size_t j = 0; j < Ne; ++j)
          if (terms[j] > ninf) s += std::exp(terms[j] - m);
        value = sys.y0 * std::exp(m + std::log(s));
      }
      if (binScale) value *= binScale[b];
      out[b * nRays + r] = static_cast<T>(value);
    }
  }
}

/// out = d ybar(beta)^* z = -y0 M^T diag(w s exp(-M beta)) D^T (scale .* z), per ray.
template <class T>
void adjoint_derivative_kernel(const SpectralSystem& sys, const T* beta, const T* z, T* out,
                               std::size_t nRays, const double* binScale = nullptr) {
  const std::size_t Ne = sys.n_nodes(), Nb = sys.n_bins(), N = sys.n_materials();
  std::vector<double> att(Ne), ct(Ne);
  for (std::size_t r = 0; r < nRays; ++r) {
    detail::ray_attenuation(sys, att, beta, r, nRays);
    for (std::size_t j = 0; j < Ne; ++j) {
      double t = 0.0;
      for (std::size_t b = 0; b < Nb; ++b) {
        const double zb = static_cast<double>(z[b * nRays + r]) * (binScale ? binScale[b] : 1.0);
        t += sys.binSensitivity[b * Ne + j] * zb;
      }
      ct[j] = std::exp(sys.logWeightedSource[j] - att[j]) * t;
    }
    for (std::size_t k = 0; k < N; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < Ne; ++j) s += sys.lacs[j * N + k] * ct[j];
      out[k * nRays + r] = static_cast<T>(-sys.y0 * s);
    }
  }
}

/// Reverse-mode partials of (beta, z) -> adjoint_derivative(beta) z, given the
/// upstream gradient g (material-shaped). Accumulates into gradBeta / gradZ.
template <class T>
void adjoint_derivative_backward_kernel(const SpectralSystem& sys, const T* beta, const T* z,
                                        const T* g, T* gradBeta, T* gradZ, std::size_t nRays,
                                        const double* binScale = nullptr) {
  const std::size_t Ne = sys.n_nodes(), Nb = sys.n_bins(), N = sys.n_materials();
  std::vector<double> att(Ne), c(Ne), t(Ne), mg(Ne);
  for (std::size_t r = 0; r < nRays; ++r) {
    detail::ray_attenuation(sys, att, beta, r, nRays);
    for (std::size_t j = 0; j < Ne; ++j) {
      c[j] = std::exp(sys.logWeightedSource[j] - att[j]);
      double tj = 0.0;
      for (std::size_t b = 0; b < Nb; ++b)
        tj += sys.binSensitivity[b * Ne + j] * static_cast<double>(z[b * nRays + r]) *
              (binScale ? binScale[b] : 1.0);
      t[j] = tj;
      double m = 0.0;
      for (std::size_t k = 0; k < N; ++k) m += sys.lacs[j * N + k] * static_cast<double>(g[k * nRays + r]);
      mg[j] = m;
    }
    if (gradBeta) {
      for (std::size_t k = 0; k < N; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < Ne; ++j) s += sys.lacs[j * N + k] * c[j] * t[j] * mg[j];
        gradBeta[k * nRays + r] += static_cast<T>(sys.y0 * s);
      }
    }
    if (gradZ) {
      for (std::size_t b = 0; b < Nb; ++b) {
        double s = 0.0;
        for (std::size_t j = 0; j < Ne; ++j) s += sys.binSensitivity[b * Ne + j] * c[j] * mg[j];
        gradZ[b * nRays + r] += static_cast<T>(-sys.y0 * s * (binScale ? binScale[b] : 1.0));
      }
    }
  }
}

inline std::array<std::size_t, 3> counts_shape(const SpectralSystem& sys, const SinogramStack& beta) {
  return {sys.n_bins(), beta.shape[1], beta.shape[2]};
}

inline BinnedCounts forward_counts(const SpectralSystem& sys, const SinogramStack& beta) {
  if (beta.shape[0] != sys.n_materials() || beta.size() != beta.shape[0] * beta.plane())
    throw std::invalid_argument("forward_counts: beta has " + std::to_string(beta.shape[0]) +
                                " materials, system has " + std::to_string(sys.n_materials()));
  for (double v : beta.data)
    if (std::isnan(v)) throw std::invalid_argument("forward_counts: NaN in beta");
  BinnedCounts out(sys.n_bins(), beta.shape[1], beta.shape[2]);
  forward_counts_kernel(sys, beta.data.data(), out.data.data(), beta.plane());
  return out;
}

inline SinogramStack adjoint_derivative_apply(const SpectralSystem& sys, const SinogramStack& beta,
                                              const BinnedCounts& z) {
  if (beta.shape[0] != sys.n_materials())
    throw std::invalid_argument("adjoint_derivative_apply: beta material count mismatch");
  require_shape(z, counts_shape(sys, beta), "adjoint_derivative_apply: z");
  SinogramStack out(beta.shape[0], beta.shape[1], beta.shape[2]);
  adjoint_derivative_kernel(sys, beta.data.data(), z.data.data(), out.data.data(), beta.plane());
  return out;
}

/// Generalised KL distance sum[y log(y/ybar) + ybar - y], with 0 log 0 = 0.
inline double kl_divergence(std::span<const double> y, std::span<const double> ybar) {
  if (y.size() != ybar.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(ybar[i] > 0.0)) throw std::invalid_argument("kl_divergence: ybar must be > 0");
    if (y[i] < 0.0) throw std::invalid_argument("kl_divergence: negative counts");
    s += ybar[i] - y[i];
    if (y[i] > 0.0) s += y[i] * std::log(y[i] / ybar[i]);
  }
  return s;
}

inline double kl_divergence(const BinnedCounts& y, const BinnedCounts& ybar) {
  if (!y.same_shape(ybar)) throw std::invalid_argument("kl_divergence: shape mismatch");
  return kl_divergence(std::span<const double>(y.data), std::span<const double>(ybar.data));
}

/// Means above this use round(N(mean, mean)) clamped at zero.
inline constexpr double kGaussianCountThreshold = 1e6;

inline BinnedCounts sample_counts(const BinnedCounts& mean, std::uint64_t seed) {
  BinnedCounts out(mean.shape[0], mean.shape[1], mean.shape[2]);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double m = mean.data[i];
    if (!(m >= 0.0)) throw std::invalid_argument("sample_counts: negative or NaN mean");
    if (m == 0.0) {
      out.data[i] = 0.0;
    } else if (m > kGaussianCountThreshold) {
      std::normal_distribution<double> d(m, std::sqrt(m));
      out.data[i] = std::max(0.0, std::round(d(rng)));
    } else {
      std::poisson_distribution<long long> d(m);
      out.data[i] = static_cast<double>(d(rng));
    }
  }
  return out;
}

} // namespace spct
