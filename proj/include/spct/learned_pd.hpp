#pragma once

// Unrolled learned primal-dual networks for the unmixing and imaging steps,
// the connector between them, and the separate (SL) and integrated (IL)
// training procedures.

#include "spct/metrics.hpp"
#include "spct/nn.hpp"
#include "spct/phantoms.hpp"
#include "spct/spectral.hpp"
#include "spct/tomo.hpp"

#include <chrono>
#include <iostream>

namespace spct {

using ad::Graph;
using ad::ParamSet;
using ad::Shape;
using ad::Tensor;

struct UnrollConfig {
  std::size_t nIter = 10;
  std::size_t nPrimal = 5;
  std::size_t nDual = 5;
  std::size_t convDims = 2;
  std::size_t filters = 32;

  void validate(const std::string& what) const {
    if (nIter < 1) throw ConfigError(what + ": nIter must be >= 1");
    if (nPrimal < 2) throw ConfigError(what + ": nPrimal must be >= 2");
    if (nDual < 1) throw ConfigError(what + ": nDual must be >= 1");
    if (convDims != 2 && convDims != 3) throw ConfigError(what + ": convDims must be 2 or 3");
    if (filters < 1) throw ConfigError(what + ": filters must be >= 1");
  }
};

inline json to_json(const UnrollConfig& c) {
  return {{"nIter", c.nIter}, {"nPrimal", c.nPrimal}, {"nDual", c.nDual}, {"convDims", c.convDims}, {"filters", c.filters}};
}

inline UnrollConfig unroll_config_from_json(const json& j, UnrollConfig c = {}) {
  c.nIter = j.value("nIter", c.nIter);
  c.nPrimal = j.value("nPrimal", c.nPrimal);
  c.nDual = j.value("nDual", c.nDual);
  c.convDims = j.value("convDims", c.convDims);
  c.filters = j.value("filters", c.filters);
  return c;
}

// ---------------------------------------------------------------------------
// Embedded physics ops. Network variables are scaled: the unmixing primal is
// beta / betaScale and data are counts / binRef, so
//   A(u) = ybar(s u) / binRef,   dA(u)^* z = s dybar(s u)^*(z / binRef),
// and the imaging operator is R / s. The spectral pair is evaluated at
// max(u, 0).

namespace ops {

template <class T>
std::vector<T> scaled(const std::vector<T>& v, double s) {
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(s * static_cast<double>(v[i]));
  return out;
}

// s max(u, 0): the count model is evaluated on the physical half-space only,
// negative line integrals would make the counts grow like exp(|mu beta|).
template <class T>
std::vector<T> physical(const std::vector<T>& v, double s) {
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > T(0) ? static_cast<T>(s * static_cast<double>(v[i])) : T(0);
  return out;
}

// chain rule through max(u, 0) with a unit subgradient at 0
template <class T>
void add_masked(std::vector<T>& dst, const std::vector<T>& src, const std::vector<T>& u, double s) {
  for (std::size_t i = 0; i < src.size(); ++i)
    if (u[i] >= T(0)) dst[i] += static_cast<T>(s * static_cast<double>(src[i]));
}

/// u [.., N, H, W] -> [.., Nb, H, W].
template <class T>
int spectral_forward(Graph<T>& g, int u, const SpectralSystem& sys, const std::vector<double>& binScale, double s) {
  Shape sh = g.shape(u);
  if (sh.size() != 5 || sh[0] * sh[1] != 1 || sh[2] != sys.n_materials())
    throw std::invalid_argument("spectral_forward: expected [1, 1, " + std::to_string(sys.n_materials()) +
                                ", H, W], got " + ad::to_string(sh));
  const std::size_t R = sh[3] * sh[4];
  const auto beta = physical(g.value(u).data, s);
  sh[2] = sys.n_bins();
  Tensor<T> out(sh);
  forward_counts_kernel(sys, beta.data(), out.data.data(), R, binScale.data());
  return g.add(std::move(out), {u}, [u, &sys, &binScale, s, R](Graph<T>& G, int self) {
    if (!G.needs_grad(u)) return;
    const auto beta = physical(G.value(u).data, s);
    std::vector<T> tmp(beta.size());
    adjoint_derivative_kernel(sys, beta.data(), G.grad(self).data(), tmp.data(), R, binScale.data());
    add_masked(G.grad(u), tmp, G.value(u).data, s);
  });
}

/// (u [1,1,N,H,W], z [1,1,Nb,H,W]) -> [1,1,N,H,W].
template <class T>
int spectral_adjoint(Graph<T>& g, int u, int z, const SpectralSystem& sys, const std::vector<double>& binScale,
                     double s) {
  const Shape& su = g.shape(u);
  const Shape& sz = g.shape(z);
  if (su.size() != 5 || sz.size() != 5 || su[2] != sys.n_materials() || sz[2] != sys.n_bins() || su[3] != sz[3] ||
      su[4] != sz[4] || su[0] * su[1] != 1 || sz[0] * sz[1] != 1)
    throw std::invalid_argument("spectral_adjoint: shapes " + ad::to_string(su) + " and " + ad::to_string(sz));
  const std::size_t R = su[3] * su[4];
  const auto beta = physical(g.value(u).data, s);
  Tensor<T> out(su);
  adjoint_derivative_kernel(sys, beta.data(), g.value(z).data.data(), out.data.data(), R, binScale.data());
  for (auto& v : out.data) v = static_cast<T>(s * static_cast<double>(v));
  return g.add(std::move(out), {u, z}, [u, z, &sys, &binScale, s, R](Graph<T>& G, int self) {
    const bool wantU = G.needs_grad(u), wantZ = G.needs_grad(z);
    if (!wantU && !wantZ) return;
    const auto beta = physical(G.value(u).data, s);
    const auto up = scaled(G.grad(self), s);
    std::vector<T> gb(wantU ? beta.size() : 0, T(0));
    std::vector<T> gz(wantZ ? G.value(z).numel() : 0, T(0));
    adjoint_derivative_backward_kernel(sys, beta.data(), G.value(z).data.data(), up.data(),
                                       wantU ? gb.data() : nullptr, wantZ ? gz.data() : nullptr, R,
                                       binScale.data());
    if (wantU) add_masked(G.grad(u), gb, G.value(u).data, s);
    if (wantZ) {
      auto& gzz = G.grad(z);
      for (std::size_t i = 0; i < gz.size(); ++i) gzz[i] += gz[i];
    }
  });
}

/// kappa R applied to every [ny, nx] plane of x.
template <class T>
int project(Graph<T>& g, int x, const Projector& P, double kappa) {
  Shape sh = g.shape(x);
  const auto& geo = P.geometry();
  if (sh.size() < 2 || sh[sh.size() - 2] != geo.nPixY || sh.back() != geo.nPixX)
    throw std::invalid_argument("project op: input " + ad::to_string(sh) + " does not end in the image shape");
  const std::size_t n = g.value(x).numel() / geo.n_pixels();
  sh[sh.size() - 2] = geo.n_angles();
  sh.back() = geo.nDet;
  Tensor<T> out(sh);
  P.project(g.value(x).data.data(), out.data.data(), n);
  for (auto& v : out.data) v = static_cast<T>(kappa * static_cast<double>(v));
  return g.add(std::move(out), {x}, [x, &P, kappa, n](Graph<T>& G, int self) {
    if (!G.needs_grad(x)) return;
    std::vector<T> tmp(G.value(x).numel());
    P.backproject(G.grad(self).data(), tmp.data(), n);
    auto& gx = G.grad(x);
    for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += static_cast<T>(kappa * static_cast<double>(tmp[i]));
  });
}

/// kappa R^T applied to every [nTheta, nDet] plane of z.
template <class T>
int backproject(Graph<T>& g, int z, const Projector& P, double kappa) {
  Shape sh = g.shape(z);
  const auto& geo = P.geometry();
  if (sh.size() < 2 || sh[sh.size() - 2] != geo.n_angles() || sh.back() != geo.nDet)
    throw std::invalid_argument("backproject op: input " + ad::to_string(sh) + " does not end in the sinogram shape");
  const std::size_t n = g.value(z).numel() / geo.n_rays();
  sh[sh.size() - 2] = geo.nPixY;
  sh.back() = geo.nPixX;
  Tensor<T> out(sh);
  P.backproject(g.value(z).data.data(), out.data.data(), n);
  for (auto& v : out.data) v = static_cast<T>(kappa * static_cast<double>(v));
  return g.add(std::move(out), {z}, [z, &P, kappa, n](Graph<T>& G, int self) {
    if (!G.needs_grad(z)) return;
    std::vector<T> tmp(G.value(z).numel());
    P.project(G.grad(self).data(), tmp.data(), n);
    auto& gz = G.grad(z);
    for (std::size_t i = 0; i < tmp.size(); ++i) gz[i] += static_cast<T>(kappa * static_cast<double>(tmp[i]));
  });
}

} // namespace ops

// ---------------------------------------------------------------------------
// Residual blocks and the unrolled scheme

/// Adds the parameters of one block under prefix: three 3x3 (or 3x3x3)
/// convolutions with two PReLUs. Slots are memory channels; in 2-D mode the
/// depth axis D is folded into the convolution channels.
template <class T>
void add_block_params(ParamSet<T>& ps, const std::string& prefix, std::size_t inSlots, std::size_t outSlots,
                      std::size_t depth, std::size_t dims, std::size_t filters, std::mt19937_64& rng) {
  const std::size_t fold = dims == 2 ? depth : 1, kd = dims == 2 ? 1 : 3;
  nn::add_conv(ps, prefix + ".conv1", filters, inSlots * fold, kd, 3, 3, rng);
  nn::add_prelu(ps, prefix + ".prelu1", filters);
  nn::add_conv(ps, prefix + ".conv2", filters, filters, kd, 3, 3, rng);
  nn::add_prelu(ps, prefix + ".prelu2", filters);
  nn::add_conv(ps, prefix + ".conv3", outSlots * fold, filters, kd, 3, 3, rng);
}

/// out = x[:, :outSlots] + C3(s2(C2(s1(C1(x))))).
template <class T>
int residual_block(Graph<T>& g, int x, ParamSet<T>& ps, const std::string& prefix, std::size_t outSlots,
                   std::size_t dims) {
  const Shape sh = g.shape(x);
  if (sh.size() != 5) throw std::invalid_argument("residual_block: expected 5-D input, got " + ad::to_string(sh));
  if (outSlots > sh[1])
    throw std::invalid_argument("residual_block: " + std::to_string(outSlots) + " output slots from " +
                                std::to_string(sh[1]) + " input channels");
  const std::size_t B = sh[0], C = sh[1], D = sh[2], H = sh[3], W = sh[4];
  int in = dims == 2 ? ad::reshape(g, x, {B, C * D, 1, H, W}) : x;
  auto P = [&](const std::string& n) { return g.param(ps.at(prefix + n)); };
  if (ps.at(prefix + ".conv1.w").value.shape[1] != g.shape(in)[1])
    throw std::invalid_argument("residual_block " + prefix + ": kernel expects " +
                                std::to_string(ps.at(prefix + ".conv1.w").value.shape[1]) + " channels, input has " +
                                std::to_string(g.shape(in)[1]));
  int h = ad::conv(g, in, P(".conv1.w"), P(".conv1.b"));
  h = ad::prelu(g, h, P(".prelu1"));
  h = ad::conv(g, h, P(".conv2.w"), P(".conv2.b"));
  h = ad::prelu(g, h, P(".prelu2"));
  h = ad::conv(g, h, P(".conv3.w"), P(".conv3.b"));
  h = ad::reshape(g, h, {B, outSlots, D, H, W});
  int skip = ad::slice_channels(g, x, 0, outSlots);
  return ad::add(g, skip, h);
}

/// Operator pair embedded in one unrolled scheme.
template <class T>
struct PdOperator {
  Shape primal; // [B, 1, Dp, Hp, Wp]
  Shape dual;   // [B, 1, Dd, Hd, Wd]
  std::function<int(Graph<T>&, int)> forward;       // A(u)
  std::function<int(Graph<T>&, int, int)> adjoint;  // dA(u)^* z
};

/// Adds the per-iteration primal/dual block parameters of one network.
template <class T>
void add_pd_params(ParamSet<T>& ps, const std::string& prefix, const UnrollConfig& c, std::size_t primalDepth,
                   std::size_t dualDepth, std::mt19937_64& rng) {
  c.validate(prefix);
  for (std::size_t k = 0; k < c.nIter; ++k) {
    const std::string base = prefix + "." + std::to_string(k);
    add_block_params(ps, base + ".dual", c.nDual + 2, c.nDual, dualDepth, c.convDims, c.filters, rng);
    add_block_params(ps, base + ".primal", c.nPrimal + 1, c.nPrimal, primalDepth, c.convDims, c.filters, rng);
  }
}

/// Alg. 2 with zero initial primal/dual memories:
///   z <- Gamma_d([z, A(u_2), d]),  u <- Gamma_p([u, dA(u_1)^*(z_1)]),
/// returning u_1 after nIter iterations. iterates (optional) receives u_1
/// after every iteration.
template <class T>
int learned_pd_forward(Graph<T>& g, const PdOperator<T>& op, int d, const UnrollConfig& c, ParamSet<T>& ps,
                       const std::string& prefix, std::vector<int>* iterates = nullptr) {
  c.validate(prefix);
  Shape pd = op.primal, dd = op.dual;
  if (g.shape(d) != dd)
    throw std::invalid_argument(prefix + ": data shape " + ad::to_string(g.shape(d)) + ", operator range " +
                                ad::to_string(dd));
  pd[1] = c.nPrimal;
  dd[1] = c.nDual;
  int u = g.input(Tensor<T>(pd));
  int z = g.input(Tensor<T>(dd));
  for (std::size_t k = 0; k < c.nIter; ++k) {
    const std::string base = prefix + "." + std::to_string(k);
    int Au = op.forward(g, ad::slice_channels(g, u, 1, 2));
    z = residual_block(g, ad::concat_channels(g, {z, Au, d}), ps, base + ".dual", c.nDual, c.convDims);
    int adj = op.adjoint(g, ad::slice_channels(g, u, 0, 1), ad::slice_channels(g, z, 0, 1));
    u = residual_block(g, ad::concat_channels(g, {u, adj}), ps, base + ".primal", c.nPrimal, c.convDims);
    if (iterates) iterates->push_back(ad::slice_channels(g, u, 0, 1));
  }
  return ad::slice_channels(g, u, 0, 1);
}

// ---------------------------------------------------------------------------
// The two-step pipeline

struct LearnedConfig {
  UnrollConfig unmix;
  UnrollConfig reco;
  bool materialsAsChannels = false; // experimental imaging layout
  double memoryBudgetBytes = 4e9;
  double betaScale = 0.0; // cm; 0 picks the PdProblem default

  void validate() const {
    unmix.validate("unmix");
    reco.validate("reco");
    if (reco.convDims != 2) throw ConfigError("reco: only 2-D convolutions are supported for the imaging step");
    if (!(betaScale >= 0.0)) throw ConfigError("betaScale must be >= 0");
  }
};

inline json to_json(const LearnedConfig& c) {
  return {{"unmix", to_json(c.unmix)}, {"reco", to_json(c.reco)}, {"materialsAsChannels", c.materialsAsChannels},
          {"memoryBudgetBytes", c.memoryBudgetBytes}, {"betaScale", c.betaScale}};
}

inline LearnedConfig learned_config_from_json(const json& j, LearnedConfig c = {}) {
  if (j.contains("unmix")) c.unmix = unroll_config_from_json(j["unmix"], c.unmix);
  if (j.contains("reco")) c.reco = unroll_config_from_json(j["reco"], c.reco);
  c.materialsAsChannels = j.value("materialsAsChannels", c.materialsAsChannels);
  c.memoryBudgetBytes = j.value("memoryBudgetBytes", c.memoryBudgetBytes);
  c.betaScale = j.value("betaScale", c.betaScale);
  c.validate();
  return c;
}

/// Fixed physics shared by all networks of one experiment.
struct PdProblem {
  const SpectralSystem* sys = nullptr;
  const Projector* projector = nullptr;
  std::vector<double> binRef;   // y0 sum_{j in b} w_j s_j
  std::vector<double> binScale; // 1 / binRef
  double betaScale = 1.0;       // cm; network sinograms are beta / betaScale

  /// betaScale <= 0 selects the default kDefaultScaleFraction of the image side.
  PdProblem(const SpectralSystem& s, const Projector& P, double scale = 0.0) : sys(&s), projector(&P) {
    binRef = s.unattenuated_bin_counts();
    for (double r : binRef) {
      if (!(r > 0.0)) throw ConfigError("every energy bin needs a positive unattenuated count");
      binScale.push_back(1.0 / r);
    }
    const auto& g = P.geometry();
    betaScale = scale > 0.0 ? scale : kDefaultScaleFraction * static_cast<double>(std::max(g.nPixX, g.nPixY)) * g.pixelSize;
  }

  static constexpr double kDefaultScaleFraction = 0.25;

  const ScanGeometry& geometry() const { return projector->geometry(); }
  std::size_t n_materials() const { return sys->n_materials(); }
  std::size_t n_bins() const { return sys->n_bins(); }
};

/// Bytes of activations kept for backpropagation through the unmixing network.
inline double unmix_memory_estimate(const LearnedConfig& c, const PdProblem& p, std::size_t scalarBytes = 4) {
  const auto& g = p.geometry();
  const double R = static_cast<double>(g.n_rays());
  const double N = static_cast<double>(p.n_materials()), Nb = static_cast<double>(p.n_bins());
  const double F = static_cast<double>(c.unmix.filters);
  // per block: two conv + two prelu activations of F channels, plus the output and concatenation
  double perIter;
  if (c.unmix.convDims == 3)
    perIter = (4.0 * F) * (N + Nb) * R + 2.0 * (c.unmix.nPrimal + 1.0) * N * R + 2.0 * (c.unmix.nDual + 2.0) * Nb * R;
  else
    perIter = (4.0 * F) * 2.0 * R + 2.0 * (c.unmix.nPrimal + 1.0) * N * R + 2.0 * (c.unmix.nDual + 2.0) * Nb * R;
  const double kvol = c.unmix.convDims == 3 ? 27.0 : 9.0;
  const double depth = c.unmix.convDims == 3 ? std::max(N, Nb) : 1.0;
  const double col = kvol * F * depth * R; // largest im2col buffer
  return (perIter * static_cast<double>(c.unmix.nIter) + col) * static_cast<double>(scalarBytes);
}

template <class T>
struct LearnedModel {
  LearnedConfig config;
  ParamSet<T> unmix;
  ParamSet<T> reco;

  template <class U>
  LearnedModel<U> cast() const {
    return {config, unmix.template cast<U>(), reco.template cast<U>()};
  }
};

/// Xavier-initialised networks; the two parameter sets use independent streams.
template <class T>
LearnedModel<T> init_model(const LearnedConfig& c, const PdProblem& p, std::uint64_t seed) {
  c.validate();
  if (c.unmix.convDims == 3) {
    const double need = unmix_memory_estimate(c, p);
    if (need > c.memoryBudgetBytes)
      throw ConfigError("3-D unmixing convolutions need about " + std::to_string(need / 1e9) +
                        " GB of activations, over the configured budget of " +
                        std::to_string(c.memoryBudgetBytes / 1e9) + " GB");
  }
  LearnedModel<T> m{c, {}, {}};
  std::mt19937_64 r1(derive_seed(seed, 0, 11)), r2(derive_seed(seed, 1, 11));
  add_pd_params(m.unmix, "unmix", c.unmix, p.n_materials(), p.n_bins(), r1);
  const std::size_t depth = c.materialsAsChannels ? p.n_materials() : 1;
  add_pd_params(m.reco, "reco", c.reco, depth, depth, r2);
  return m;
}

template <class T>
PdOperator<T> unmix_operator(const PdProblem& p) {
  const auto& g = p.geometry();
  PdOperator<T> op;
  op.primal = {1, 1, p.n_materials(), g.n_angles(), g.nDet};
  op.dual = {1, 1, p.n_bins(), g.n_angles(), g.nDet};
  op.forward = [&p](Graph<T>& G, int u) { return ops::spectral_forward(G, u, *p.sys, p.binScale, p.betaScale); };
  op.adjoint = [&p](Graph<T>& G, int u, int z) {
    return ops::spectral_adjoint(G, u, z, *p.sys, p.binScale, p.betaScale);
  };
  return op;
}

template <class T>
PdOperator<T> reco_operator(const PdProblem& p, bool materialsAsChannels) {
  const auto& g = p.geometry();
  const std::size_t N = p.n_materials();
  PdOperator<T> op;
  op.primal = materialsAsChannels ? Shape{1, 1, N, g.nPixY, g.nPixX} : Shape{N, 1, 1, g.nPixY, g.nPixX};
  op.dual = materialsAsChannels ? Shape{1, 1, N, g.n_angles(), g.nDet} : Shape{N, 1, 1, g.n_angles(), g.nDet};
  const double kappa = 1.0 / p.betaScale;
  op.forward = [&p, kappa](Graph<T>& G, int u) { return ops::project(G, u, *p.projector, kappa); };
  op.adjoint = [&p, kappa](Graph<T>& G, int, int z) { return ops::backproject(G, z, *p.projector, kappa); };
  return op;
}

/// Counts y -> network data y / binRef as [1, 1, Nb, nTheta, nDet].
template <class T>
Tensor<T> unmix_data(const PdProblem& p, const BinnedCounts& y) {
  const auto& g = p.geometry();
  require_shape(y, g.sinogram_shape(p.n_bins()), "unmixing data");
  Tensor<T> t({1, 1, p.n_bins(), g.n_angles(), g.nDet});
  const std::size_t R = g.n_rays();
  for (std::size_t b = 0; b < p.n_bins(); ++b)
    for (std::size_t r = 0; r < R; ++r) t.data[b * R + r] = static_cast<T>(y.data[b * R + r] * p.binScale[b]);
  return t;
}

/// Sinogram stack beta -> scaled network layout [1, 1, N, nTheta, nDet].
template <class T>
Tensor<T> scaled_sinogram(const PdProblem& p, const SinogramStack& beta) {
  const auto& g = p.geometry();
  require_shape(beta, g.sinogram_shape(p.n_materials()), "sinogram");
  Tensor<T> t({1, 1, p.n_materials(), g.n_angles(), g.nDet});
  for (std::size_t i = 0; i < beta.size(); ++i) t.data[i] = static_cast<T>(beta.data[i] / p.betaScale);
  return t;
}

/// Material image in the imaging network's output layout.
template <class T>
Tensor<T> image_target(const PdProblem& p, const MaterialImage& q, bool materialsAsChannels) {
  const auto& g = p.geometry();
  require_shape(q, g.image_shape(p.n_materials()), "image");
  const std::size_t N = p.n_materials();
  Shape s = materialsAsChannels ? Shape{1, 1, N, g.nPixY, g.nPixX} : Shape{N, 1, 1, g.nPixY, g.nPixX};
  return Tensor<T>(s, std::vector<T>(q.data.begin(), q.data.end()));
}

/// Unmixing output [1, 1, N, nTheta, nDet] -> imaging data: one batch entry per
/// material (shared weights), or unchanged in the material-as-channels layout.
template <class T>
int connect_unmix_to_reco(Graph<T>& g, int beta, bool materialsAsChannels) {
  const Shape& s = g.shape(beta);
  if (s.size() != 5 || s[0] != 1 || s[1] != 1)
    throw std::invalid_argument("connector: expected [1, 1, N, H, W], got " + ad::to_string(s));
  if (materialsAsChannels) return beta;
  return ad::reshape(g, beta, {s[2], 1, 1, s[3], s[4]});
}

template <class T>
int unmix_forward(Graph<T>& g, LearnedModel<T>& m, const PdProblem& p, int d, std::vector<int>* iterates = nullptr) {
  const auto op = unmix_operator<T>(p);
  return learned_pd_forward(g, op, d, m.config.unmix, m.unmix, "unmix", iterates);
}

template <class T>
int reco_forward(Graph<T>& g, LearnedModel<T>& m, const PdProblem& p, int d, std::vector<int>* iterates = nullptr) {
  const auto op = reco_operator<T>(p, m.config.materialsAsChannels);
  return learned_pd_forward(g, op, d, m.config.reco, m.reco, "reco", iterates);
}

/// q-hat = T_reco(connector(T_unmix(y))) recorded on g; returns the image node.
template <class T>
int pipeline_forward(Graph<T>& g, LearnedModel<T>& m, const PdProblem& p, const BinnedCounts& y) {
  int d = g.input(unmix_data<T>(p, y));
  int beta = unmix_forward(g, m, p, d);
  return reco_forward(g, m, p, connect_unmix_to_reco(g, beta, m.config.materialsAsChannels));
}

/// Learned unmixing: counts -> beta-hat in cm.
template <class T>
SinogramStack t_unmix(LearnedModel<T>& m, const PdProblem& p, const BinnedCounts& y) {
  Graph<T> g;
  int d = g.input(unmix_data<T>(p, y));
  int u = unmix_forward(g, m, p, d);
  const auto& geo = p.geometry();
  SinogramStack out(p.n_materials(), geo.n_angles(), geo.nDet);
  const auto& v = g.value(u).data;
  for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = static_cast<double>(v[i]) * p.betaScale;
  return out;
}

/// Learned imaging: beta (cm) -> volume fractions, materials sharing weights.
template <class T>
MaterialImage t_reco(LearnedModel<T>& m, const PdProblem& p, const SinogramStack& beta) {
  Graph<T> g;
  int d = g.input(scaled_sinogram<T>(p, beta));
  int q = reco_forward(g, m, p, connect_unmix_to_reco(g, d, m.config.materialsAsChannels));
  const auto& geo = p.geometry();
  MaterialImage out(p.n_materials(), geo.nPixY, geo.nPixX);
  const auto& v = g.value(q).data;
  for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = static_cast<double>(v[i]);
  return out;
}

/// Full two-step inference y -> q-hat.
template <class T>
MaterialImage learned_reconstruct(LearnedModel<T>& m, const PdProblem& p, const BinnedCounts& y) {
  Graph<T> g;
  int q = pipeline_forward(g, m, p, y);
  const auto& geo = p.geometry();
  MaterialImage out(p.n_materials(), geo.nPixY, geo.nPixX);
  const auto& v = g.value(q).data;
  for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = static_cast<double>(v[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Model checkpoints

template <class T>
void save_model(const std::filesystem::path& dir, const LearnedModel<T>& m, const PdProblem& p, json meta = json::object(),
                bool withUnmix = true, bool withReco = true) {
  ParamSet<T> all;
  auto copy = [&](const ParamSet<T>& src) {
    for (const auto& q : src.items) all.add(q.name, q.value.shape).value = q.value;
  };
  if (withUnmix) copy(m.unmix);
  if (withReco) copy(m.reco);
  meta["learned"] = to_json(m.config);
  meta["betaScale"] = p.betaScale;
  meta["materials"] = p.sys->materials;
  meta["bins"] = p.n_bins();
  nn::save_checkpoint(dir, all, meta);
}

/// Metadata of a model checkpoint (either layout) without reading the weights.
inline json read_model_meta(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::path manifest = dir / "manifest.json";
  if (!fs::exists(manifest)) manifest = dir / "unmix" / "manifest.json";
  if (!fs::exists(manifest)) throw IoError("no checkpoint found in " + dir.string());
  return read_json(manifest).value("meta", json::object());
}

/// Loads a model from a checkpoint directory holding both networks, or from a
/// directory with unmix/ and reco/ sub-checkpoints (separate training).
template <class T>
LearnedModel<T> load_model(const std::filesystem::path& dir, const PdProblem& p, json* metaOut = nullptr) {
  namespace fs = std::filesystem;
  std::vector<fs::path> parts;
  if (fs::exists(dir / "manifest.json"))
    parts.push_back(dir);
  else if (fs::exists(dir / "unmix" / "manifest.json") && fs::exists(dir / "reco" / "manifest.json"))
    parts = {dir / "unmix", dir / "reco"};
  else
    throw IoError("no checkpoint found in " + dir.string());
  ParamSet<T> all;
  json meta;
  for (const auto& part : parts) {
    json m;
    auto ps = nn::load_checkpoint<T>(part, &m);
    if (meta.is_null()) meta = m;
    for (const auto& q : ps.items) all.add(q.name, q.value.shape).value = q.value;
  }
  if (!meta.contains("learned")) throw ConfigError(dir.string() + ": checkpoint lacks network configuration");
  if (meta.value("materials", std::vector<std::string>{}) != p.sys->materials || meta.value("bins", 0ul) != p.n_bins())
    throw ConfigError(dir.string() + ": checkpoint was trained for a different spectral configuration");
  if (std::abs(meta.value("betaScale", 0.0) - p.betaScale) > 1e-12 * p.betaScale)
    throw ConfigError(dir.string() + ": checkpoint was trained for a different geometry");
  auto model = init_model<T>(learned_config_from_json(meta["learned"]), p, 0);
  nn::assign_parameters(model.unmix, all);
  nn::assign_parameters(model.reco, all);
  if (metaOut) *metaOut = meta;
  return model;
}

// ---------------------------------------------------------------------------
// Training

enum class TrainMethod { SL, IL };

inline TrainMethod parse_method(const std::string& s) {
  if (s == "sl" || s == "SL") return TrainMethod::SL;
  if (s == "il" || s == "IL") return TrainMethod::IL;
  throw ConfigError("training method must be sl or il (got '" + s + "')");
}

struct TrainConfig {
  TrainMethod method = TrainMethod::IL;
  std::size_t steps = 1500; // per stage for SL
  std::size_t batch = 1;
  double lr0 = 1e-3;
  double clipNorm = 1.0;
  std::uint64_t seed = 0;
  std::size_t valEvery = 500;
  bool slSimulatedBeta = false; // SL stage 2 on true beta instead of recovered beta-hat
  std::size_t logEvery = 0;     // 0: silent
  std::ostream* log = nullptr;

  void validate() const {
    if (steps < 1) throw ConfigError("training: steps must be >= 1");
    if (batch < 1) throw ConfigError("training: batch must be >= 1");
    if (!(lr0 > 0.0)) throw ConfigError("training: lr0 must be > 0");
    if (!(clipNorm > 0.0)) throw ConfigError("training: clipNorm must be > 0");
  }
};

struct HistoryRow {
  std::string stage;
  std::size_t step;
  double lr;
  double loss;
  double valLoss = std::numeric_limits<double>::quiet_NaN();
  double valSsim = std::numeric_limits<double>::quiet_NaN();
};

struct TrainHistory {
  std::vector<HistoryRow> rows;

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(9);
    out << "stage,step,lr,loss,val_loss,val_ssim\n";
    for (const auto& r : rows) {
      out << r.stage << ',' << r.step << ',' << r.lr << ',' << r.loss << ',';
      if (!std::isnan(r.valLoss)) out << r.valLoss;
      out << ',';
      if (!std::isnan(r.valSsim)) out << r.valSsim;
      out << '\n';
    }
  }

  /// Mean training loss of a stage over steps in [from, to).
  double mean_loss(const std::string& stage, std::size_t from, std::size_t to) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (r.stage == stage && r.step >= from && r.step < to) s += r.loss, ++n;
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  }
};

template <class T>
struct TrainResult {
  LearnedModel<T> final;
  LearnedModel<T> best;
  TrainHistory history;
  double bestValSsim = -2.0;
};

namespace detail {

// Deterministic batch sampler: a fresh permutation per epoch.
class BatchSampler {
public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {}
  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

private:
  std::size_t n_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

template <class T>
void scale_grads(ParamSet<T>& ps, double k) {
  for (auto& p : ps.items)
    for (auto& g : p.grad) g = static_cast<T>(static_cast<double>(g) * k);
}

inline void check_loss(double loss, const std::string& stage, std::size_t step, std::size_t sample) {
  if (!std::isfinite(loss))
    throw NumericalError("non-finite training loss in stage " + stage + " at step " + std::to_string(step) +
                         " (sample " + std::to_string(sample) + ")");
}

template <class T>
MaterialImage image_from(const Graph<T>& g, int node, const PdProblem& p) {
  const auto& geo = p.geometry();
  MaterialImage out(p.n_materials(), geo.nPixY, geo.nPixX);
  const auto& v = g.value(node).data;
  for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = static_cast<double>(v[i]);
  return out;
}

} // namespace detail

/// Mean SSIM of the full learned pipeline on a validation set.
template <class T>
double validation_ssim(LearnedModel<T>& m, const PdProblem& p, const std::vector<Sample>& val) {
  double s = 0.0;
  for (const auto& smp : val) s += mean_ssim(learned_reconstruct(m, p, smp.y), smp.q);
  return val.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(val.size());
}

/// Generic optimisation loop. lossFn records one sample's loss on a graph and
/// returns the loss node; sets are the parameter sets being trained.
template <class T, class LossFn, class ValFn>
void optimise(const std::string& stage, std::size_t nTrain, const TrainConfig& cfg, std::vector<ParamSet<T>*> sets,
              LossFn&& lossFn, ValFn&& valFn, TrainHistory& hist, std::uint64_t samplerSeed) {
  detail::BatchSampler sampler(nTrain, samplerSeed);
  std::vector<nn::AdamState<T>> states(sets.size());
  for (auto* s : sets) s->zero_grad();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double lr = nn::cosine_lr(step, cfg.steps, cfg.lr0);
    double loss = 0.0;
    for (std::size_t i : sampler.next(cfg.batch)) {
      Graph<T> g;
      int l = lossFn(g, i);
      const double li = static_cast<double>(g.value(l).data[0]);
      detail::check_loss(li, stage, step, i);
      g.backward(l);
      loss += li;
    }
    loss /= static_cast<double>(cfg.batch);
    for (auto* s : sets) detail::scale_grads(*s, 1.0 / static_cast<double>(cfg.batch));
    double norm2 = 0.0;
    for (auto* s : sets)
      for (const auto& p : s->items)
        for (T gv : p.grad) norm2 += static_cast<double>(gv) * static_cast<double>(gv);
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericalError("non-finite gradient in stage " + stage + " at step " + std::to_string(step));
    if (norm > cfg.clipNorm)
      for (auto* s : sets) detail::scale_grads(*s, cfg.clipNorm / norm);
    for (std::size_t k = 0; k < sets.size(); ++k) {
      nn::adam_step(*sets[k], states[k], lr);
      sets[k]->zero_grad();
    }
    HistoryRow row{stage, step, lr, loss};
    const bool last = step + 1 == cfg.steps;
    if ((cfg.valEvery > 0 && (step + 1) % cfg.valEvery == 0) || last) valFn(row);
    if (cfg.log && cfg.logEvery > 0 && ((step + 1) % cfg.logEvery == 0 || last)) {
      *cfg.log << stage << " step " << step + 1 << "/" << cfg.steps << " lr " << lr << " loss " << loss;
      if (!std::isnan(row.valLoss)) *cfg.log << " val_loss " << row.valLoss;
      if (!std::isnan(row.valSsim)) *cfg.log << " val_ssim " << row.valSsim;
      *cfg.log << std::endl;
    }
    hist.rows.push_back(row);
  }
}

/// Integrated training: MSE(q, T_reco(T_unmix(y))) through both networks.
template <class T>
TrainResult<T> train_il(const std::vector<Sample>& train, const std::vector<Sample>& val, const PdProblem& p,
                        const LearnedConfig& lc, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ConfigError("train_il: empty training set");
  TrainResult<T> res{init_model<T>(lc, p, cfg.seed), {}, {}};
  auto& m = res.final;
  res.best = m;
  std::vector<Tensor<T>> targets;
  for (const auto& s : train) targets.push_back(image_target<T>(p, s.q, lc.materialsAsChannels));
  auto lossFn = [&](Graph<T>& g, std::size_t i) {
    return ad::mse(g, pipeline_forward(g, m, p, train[i].y), targets[i]);
  };
  auto valFn = [&](HistoryRow& row) {
    if (val.empty()) return;
    row.valSsim = validation_ssim(m, p, val);
    if (row.valSsim > res.bestValSsim) {
      res.bestValSsim = row.valSsim;
      res.best = m;
    }
  };
  optimise<T>("il", train.size(), cfg, {&m.unmix, &m.reco}, lossFn, valFn, res.history, derive_seed(cfg.seed, 0, 21));
  if (val.empty()) res.best = m;
  return res;
}

/// Separate training: stage 1 fits T_unmix to beta, stage 2 fits T_reco on
/// beta-hat from the frozen stage-1 network (or on true beta if requested).
template <class T>
TrainResult<T> train_sl(const std::vector<Sample>& train, const std::vector<Sample>& val, const PdProblem& p,
                        const LearnedConfig& lc, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ConfigError("train_sl: empty training set");
  TrainResult<T> res{init_model<T>(lc, p, cfg.seed), {}, {}};
  auto& m = res.final;

  std::vector<Tensor<T>> betaTargets;
  for (const auto& s : train) betaTargets.push_back(scaled_sinogram<T>(p, s.beta));
  auto unmixLoss = [&](Graph<T>& g, std::size_t i) {
    int d = g.input(unmix_data<T>(p, train[i].y));
    return ad::mse(g, unmix_forward(g, m, p, d), betaTargets[i]);
  };
  ParamSet<T> bestUnmix = m.unmix;
  double bestValLoss = std::numeric_limits<double>::infinity();
  auto unmixVal = [&](HistoryRow& row) {
    if (val.empty()) return;
    double s = 0.0;
    for (const auto& smp : val) {
      Graph<T> g;
      int d = g.input(unmix_data<T>(p, smp.y));
      s += static_cast<double>(g.value(ad::mse(g, unmix_forward(g, m, p, d), scaled_sinogram<T>(p, smp.beta))).data[0]);
    }
    row.valLoss = s / static_cast<double>(val.size());
    if (row.valLoss < bestValLoss) {
      bestValLoss = row.valLoss;
      bestUnmix = m.unmix;
    }
  };
  optimise<T>("sl-unmix", train.size(), cfg, {&m.unmix}, unmixLoss, unmixVal, res.history, derive_seed(cfg.seed, 1, 21));

  // Stage 2 inputs: beta-hat / s under the frozen unmixing network (best on validation).
  if (!val.empty()) m.unmix = bestUnmix;
  std::vector<Tensor<T>> recoData, imageTargets;
  for (const auto& s : train) {
    if (cfg.slSimulatedBeta) {
      recoData.push_back(scaled_sinogram<T>(p, s.beta));
    } else {
      Graph<T> g;
      int d = g.input(unmix_data<T>(p, s.y));
      recoData.push_back(g.value(unmix_forward(g, m, p, d)));
    }
    imageTargets.push_back(image_target<T>(p, s.q, lc.materialsAsChannels));
  }
  auto recoLoss = [&](Graph<T>& g, std::size_t i) {
    int d = g.input(recoData[i]);
    int q = reco_forward(g, m, p, connect_unmix_to_reco(g, d, lc.materialsAsChannels));
    return ad::mse(g, q, imageTargets[i]);
  };
  res.best = m;
  auto recoVal = [&](HistoryRow& row) {
    if (val.empty()) return;
    row.valSsim = validation_ssim(m, p, val);
    if (row.valSsim > res.bestValSsim) {
      res.bestValSsim = row.valSsim;
      res.best = m;
    }
  };
  optimise<T>("sl-reco", train.size(), cfg, {&m.reco}, recoLoss, recoVal, res.history, derive_seed(cfg.seed, 2, 21));
  if (val.empty()) res.best = m;
  return res;
}

template <class T>
TrainResult<T> train(const std::vector<Sample>& trainSet, const std::vector<Sample>& val, const PdProblem& p,
                     const LearnedConfig& lc, const TrainConfig& cfg) {
  return cfg.method == TrainMethod::IL ? train_il<T>(trainSet, val, p, lc, cfg) : train_sl<T>(trainSet, val, p, lc, cfg);
}

} // namespace spct
