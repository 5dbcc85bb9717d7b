#pragma once

// Reference model-based solvers: linearised ADMM for TV imaging and an ADMM
// with nonlinear constraint z = A(beta) for KL-misfit material unmixing.

#include "spct/spectral.hpp"
#include "spct/tomo.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>

namespace spct {

struct SolverConfig {
  double lambda = 0.0;
  double tau = 0.0; // 0 selects 0.95 / (rho ||R||^2) in admm_imaging
  double rho = 1.0; // ADMM penalty
  std::size_t maxIters = 200;
  double tolerance = 1e-6;
  std::size_t innerIters = 20;
  std::size_t divergencePatience = 20;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("solver: lambda must be >= 0");
    if (!(tau >= 0.0)) throw ConfigError("solver: tau must be > 0 (or 0 for automatic)");
    if (!(rho > 0.0)) throw ConfigError("solver: rho must be > 0");
    if (maxIters < 1) throw ConfigError("solver: maxIters must be >= 1");
    if (!(tolerance >= 0.0)) throw ConfigError("solver: tolerance must be >= 0");
  }
};

struct SolverTrace {
  std::vector<double> objective;
  std::vector<double> change;
  std::size_t iterations = 0;
  bool converged = false;
  bool diverged = false;
  double tau = 0.0;
  double operatorNorm = 0.0;

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write trace " + path.string());
    out.precision(17);
    out << "iteration,objective,relative_change\n";
    for (std::size_t i = 0; i < objective.size(); ++i)
      out << i + 1 << ',' << objective[i] << ',' << change[i] << '\n';
  }
};

/// Per ray, Euclidean projection of the material vector onto
/// {v >= 0, sum v = |L|}. Rays with |L| = 0 map to 0.
inline SinogramStack project_simplex_scaled(const SinogramStack& beta, std::span<const double> lengths) {
  const std::size_t N = beta.shape[0], R = beta.plane();
  if (lengths.size() != R)
    throw std::invalid_argument("project_simplex_scaled: " + std::to_string(lengths.size()) +
                                " lengths for " + std::to_string(R) + " rays");
  for (double l : lengths)
    if (!(l >= 0.0)) throw std::invalid_argument("project_simplex_scaled: negative ray length");
  SinogramStack out(beta.shape[0], beta.shape[1], beta.shape[2]);
  std::vector<double> v(N), s(N);
  for (std::size_t r = 0; r < R; ++r) {
    if (lengths[r] == 0.0) continue;
    for (std::size_t k = 0; k < N; ++k) v[k] = beta.data[k * R + r];
    s = v;
    std::sort(s.begin(), s.end(), std::greater<>());
    double cum = 0.0, theta = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      cum += s[i];
      const double t = (cum - lengths[r]) / static_cast<double>(i + 1);
      if (s[i] - t > 0.0) theta = t;
    }
    for (std::size_t k = 0; k < N; ++k) out.data[k * R + r] = std::max(v[k] - theta, 0.0);
  }
  return out;
}

namespace detail {

// Forward differences with zero flux at the far edge.
inline void gradient(std::span<const double> x, std::size_t ny, std::size_t nx, double* gx, double* gy) {
  for (std::size_t i = 0; i < ny; ++i)
    for (std::size_t j = 0; j < nx; ++j) {
      const std::size_t p = i * nx + j;
      gx[p] = j + 1 < nx ? x[p + 1] - x[p] : 0.0;
      gy[p] = i + 1 < ny ? x[p + nx] - x[p] : 0.0;
    }
}

// Negative adjoint of gradient.
inline void divergence(const double* px, const double* py, std::size_t ny, std::size_t nx, double* d) {
  for (std::size_t i = 0; i < ny; ++i)
    for (std::size_t j = 0; j < nx; ++j) {
      const std::size_t p = i * nx + j;
      double v = 0.0;
      if (j + 1 < nx) v += px[p];
      if (j > 0) v -= px[p - 1];
      if (i + 1 < ny) v += py[p];
      if (i > 0) v -= py[p - nx];
      d[p] = v;
    }
}

} // namespace detail

/// Isotropic total variation with forward differences.
inline double total_variation(std::span<const double> x, std::size_t ny, std::size_t nx) {
  std::vector<double> gx(x.size()), gy(x.size());
  detail::gradient(x, ny, nx, gx.data(), gy.data());
  double s = 0.0;
  for (std::size_t p = 0; p < x.size(); ++p) s += std::hypot(gx[p], gy[p]);
  return s;
}

/// Dual field of the TV prox, kept between calls for warm starts.
struct TvDual {
  std::vector<double> px, py;
};

/// argmin_x 0.5||x - u||^2 + weight TV(x) (+ indicator of x >= 0 when
/// nonneg) by fast projected gradient on the dual. Returns the iterate of
/// lowest primal energy, so the energy never increases with innerIters.
inline std::vector<double> tv_prox(std::span<const double> u, std::size_t ny, std::size_t nx, double weight,
                                   std::size_t innerIters, bool nonneg = false, TvDual* warm = nullptr) {
  if (!(weight >= 0.0)) throw std::invalid_argument("tv_prox: weight must be >= 0");
  if (u.size() != ny * nx) throw std::invalid_argument("tv_prox: size mismatch");
  const std::size_t n = u.size();
  std::vector<double> x(u.begin(), u.end());
  if (nonneg)
    for (auto& v : x) v = std::max(v, 0.0);
  if (weight == 0.0 || n == 0) return x;

  TvDual local;
  TvDual& d = warm ? *warm : local;
  if (d.px.size() != n) {
    d.px.assign(n, 0.0);
    d.py.assign(n, 0.0);
  }
  std::vector<double> rx = d.px, ry = d.py, prevx = d.px, prevy = d.py, div(n), gx(n), gy(n), cand(n);
  auto primal = [&](const std::vector<double>& px, const std::vector<double>& py, std::vector<double>& out) {
    detail::divergence(px.data(), py.data(), ny, nx, div.data());
    for (std::size_t p = 0; p < n; ++p) {
      out[p] = u[p] + weight * div[p];
      if (nonneg) out[p] = std::max(out[p], 0.0);
    }
  };
  auto energy = [&](const std::vector<double>& v) {
    double e = 0.0;
    for (std::size_t p = 0; p < n; ++p) e += 0.5 * (v[p] - u[p]) * (v[p] - u[p]);
    return e + weight * total_variation(v, ny, nx);
  };

  primal(d.px, d.py, x);
  double best = energy(x);
  double t = 1.0;
  const double step = 1.0 / (8.0 * weight);
  for (std::size_t it = 0; it < innerIters; ++it) {
    primal(rx, ry, cand);
    detail::gradient(cand, ny, nx, gx.data(), gy.data());
    prevx.swap(d.px);
    prevy.swap(d.py);
    for (std::size_t p = 0; p < n; ++p) {
      const double a = rx[p] + step * gx[p], b = ry[p] + step * gy[p];
      const double m = std::max(1.0, std::hypot(a, b));
      d.px[p] = a / m;
      d.py[p] = b / m;
    }
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double mom = (t - 1.0) / tn;
    for (std::size_t p = 0; p < n; ++p) {
      rx[p] = d.px[p] + mom * (d.px[p] - prevx[p]);
      ry[p] = d.py[p] + mom * (d.py[p] - prevy[p]);
    }
    t = tn;
    primal(d.px, d.py, cand);
    const double e = energy(cand);
    if (e < best) {
      best = e;
      x = cand;
    }
  }
  return x;
}

/// Material-wise TV prox of a stack.
inline MaterialImage tv_prox(const MaterialImage& image, double weight, std::size_t innerIters) {
  MaterialImage out = image;
  for (std::size_t k = 0; k < image.shape[0]; ++k) {
    auto x = tv_prox(image.slice(k), image.shape[1], image.shape[2], weight, innerIters);
    std::copy(x.begin(), x.end(), out.slice(k).begin());
  }
  return out;
}

/// ||R||^2 estimated by power iteration on R^T R from a fixed start.
inline double operator_norm_sq(const Projector& P, const ScanGeometry& g, std::size_t iters = 100) {
  std::vector<double> x(g.n_pixels()), y(g.n_rays());
  std::mt19937_64 rng(12345);
  std::uniform_real_distribution<double> d(0.5, 1.5);
  for (auto& v : x) v = d(rng);
  double lam = 0.0;
  for (std::size_t i = 0; i < iters; ++i) {
    double nx = 0.0;
    for (double v : x) nx += v * v;
    nx = std::sqrt(nx);
    for (auto& v : x) v /= nx;
    P.project(x.data(), y.data(), 1);
    P.backproject(y.data(), x.data(), 1);
    double s = 0.0;
    for (double v : x) s += v * v;
    lam = std::sqrt(s);
  }
  return lam;
}

namespace detail {
inline double relative_change(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return std::sqrt(num / den);
}
} // namespace detail

/// Linearised ADMM for min_q 0.5||Rq - beta||^2 + lambda TV(q) + i(q >= 0),
/// every material independently, split z = Rq:
///   q <- prox_{tau (lambda TV + i)}(q - tau rho R^T(Rq - z + u))
///   z <- (beta + rho (Rq + u)) / (1 + rho)
///   u <- u + Rq - z
inline MaterialImage admm_imaging(const ScanGeometry& g, const SinogramStack& beta, const SolverConfig& cfg,
                                  SolverTrace* trace = nullptr, const Projector* projector = nullptr) {
  cfg.validate();
  g.validate();
  const std::size_t N = beta.shape[0];
  require_shape(beta, g.sinogram_shape(N), "admm_imaging: beta");
  std::optional<Projector> own;
  if (!projector) projector = &own.emplace(g);
  const Projector& P = *projector;

  const double normSq = operator_norm_sq(P, g);
  const double tau = cfg.tau > 0.0 ? cfg.tau : 0.95 / (cfg.rho * normSq);
  if (tau * cfg.rho * normSq > 1.0)
    throw ConfigError("admm_imaging: tau * rho * ||R||^2 = " + std::to_string(tau * cfg.rho * normSq) +
                      " > 1 (estimated ||R|| = " + std::to_string(std::sqrt(normSq)) + ")");

  const std::size_t nPix = g.n_pixels(), nRay = g.n_rays();
  MaterialImage q(N, g.nPixY, g.nPixX, 0.0), qPrev = q;
  std::vector<double> z = beta.data, u(N * nRay, 0.0), Rq(N * nRay, 0.0), r(N * nRay), grad(N * nPix);
  std::vector<TvDual> duals(N);
  SolverTrace local;
  SolverTrace& tr = trace ? *trace : local;
  tr = SolverTrace{};
  tr.tau = tau;
  tr.operatorNorm = std::sqrt(normSq);

  for (std::size_t it = 0; it < cfg.maxIters; ++it) {
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = Rq[i] - z[i] + u[i];
    P.backproject(r.data(), grad.data(), N);
    qPrev = q;
    for (std::size_t k = 0; k < N; ++k) {
      std::vector<double> v(nPix);
      for (std::size_t p = 0; p < nPix; ++p) v[p] = q.data[k * nPix + p] - tau * cfg.rho * grad[k * nPix + p];
      auto x = tv_prox(v, g.nPixY, g.nPixX, tau * cfg.lambda, cfg.innerIters, true, &duals[k]);
      std::copy(x.begin(), x.end(), q.data.begin() + static_cast<std::ptrdiff_t>(k * nPix));
    }
    P.project(q.data.data(), Rq.data(), N);
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = (beta.data[i] + cfg.rho * (Rq[i] + u[i])) / (1.0 + cfg.rho);
      u[i] += Rq[i] - z[i];
    }

    double obj = 0.0;
    for (std::size_t i = 0; i < Rq.size(); ++i) obj += 0.5 * (Rq[i] - beta.data[i]) * (Rq[i] - beta.data[i]);
    if (cfg.lambda > 0.0)
      for (std::size_t k = 0; k < N; ++k) obj += cfg.lambda * total_variation(q.slice(k), g.nPixY, g.nPixX);
    if (!std::isfinite(obj)) throw NumericalError("admm_imaging: non-finite objective at iteration " + std::to_string(it + 1));
    const double change = detail::relative_change(q.data, qPrev.data);
    tr.objective.push_back(obj);
    tr.change.push_back(change);
    tr.iterations = it + 1;
    if (change < cfg.tolerance) {
      tr.converged = true;
      break;
    }
  }
  return q;
}

namespace detail {

// Jacobian of the count model of one ray, J_bm = d ybar_b / d beta_m, divided by y0.
inline void ray_jacobian(const SpectralSystem& sys, const double* beta, std::size_t r, std::size_t nRays,
                         Eigen::MatrixXd& J, Eigen::VectorXd& ybar) {
  const std::size_t Ne = sys.n_nodes(), Nb = sys.n_bins(), N = sys.n_materials();
  std::vector<double> att(Ne);
  ray_attenuation(sys, att, beta, r, nRays);
  J.setZero(static_cast<Eigen::Index>(Nb), static_cast<Eigen::Index>(N));
  ybar.setZero(static_cast<Eigen::Index>(Nb));
  for (std::size_t j = 0; j < Ne; ++j) {
    const double c = std::exp(sys.logWeightedSource[j] - att[j]);
    if (c == 0.0) continue;
    for (std::size_t b = 0; b < Nb; ++b) {
      const double dc = sys.binSensitivity[b * Ne + j] * c;
      if (dc == 0.0) continue;
      ybar(static_cast<Eigen::Index>(b)) += dc;
      for (std::size_t m = 0; m < N; ++m)
        J(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(m)) -= dc * sys.lacs[j * N + m];
    }
  }
}

// min 0.5 x^T H x + c^T x over {x >= 0, sum x = L} by enumerating supports;
// each support's equality-constrained minimiser comes from the KKT system.
inline Eigen::VectorXd simplex_qp(const Eigen::MatrixXd& H, const Eigen::VectorXd& c, double L) {
  const Eigen::Index N = H.rows();
  Eigen::VectorXd best = Eigen::VectorXd::Constant(N, L / static_cast<double>(N));
  double bestVal = 0.5 * best.dot(H * best) + c.dot(best);
  const double ridge = 1e-13 * std::max(H.trace(), 1e-300);
  for (unsigned mask = 1; mask < (1u << N); ++mask) {
    std::vector<Eigen::Index> S;
    for (Eigen::Index k = 0; k < N; ++k)
      if (mask & (1u << k)) S.push_back(k);
    const auto n = static_cast<Eigen::Index>(S.size());
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + 1, n + 1);
    Eigen::VectorXd rhs(n + 1);
    for (Eigen::Index a = 0; a < n; ++a) {
      for (Eigen::Index b = 0; b < n; ++b) K(a, b) = H(S[a], S[b]);
      K(a, a) += ridge;
      K(a, n) = K(n, a) = 1.0;
      rhs(a) = -c(S[a]);
    }
    rhs(n) = L;
    Eigen::VectorXd sol = K.fullPivLu().solve(rhs);
    if (!sol.allFinite()) continue;
    bool feasible = true;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(N);
    for (Eigen::Index a = 0; a < n; ++a) {
      if (sol(a) < -1e-14 * std::max(L, 1.0)) feasible = false;
      x(S[a]) = std::max(sol(a), 0.0);
    }
    if (!feasible) continue;
    const double val = 0.5 * x.dot(H * x) + c.dot(x);
    if (val < bestVal) {
      bestVal = val;
      best = x;
    }
  }
  return best;
}

} // namespace detail

/// ADMM with nonlinear constraint z = A(beta) for
///   min_{beta in Delta} KL(y, A(beta)) + lambda TV_(theta,l)(beta),
/// counts normalised by y0 and a per-measurement penalty rho / max(y/y0, 1/y0).
///   beta <- Gauss-Newton step of the augmented term, exact QP over Delta
///   z    <- closed-form KL prox
///   u    <- u + A(beta) - z
/// With lambda > 0, an extra split w = beta carries the TV prox.
/// The objective increasing for divergencePatience consecutive iterations
/// stops the run with trace.diverged set.
inline SinogramStack admm_unmixing(const SpectralSystem& sys, const ScanGeometry& g, const BinnedCounts& y,
                                   const SolverConfig& cfg, SolverTrace* trace = nullptr,
                                   const SinogramStack* init = nullptr) {
  cfg.validate();
  g.validate();
  const std::size_t N = sys.n_materials(), Nb = sys.n_bins(), R = g.n_rays();
  require_shape(y, g.sinogram_shape(Nb), "admm_unmixing: y");
  for (double v : y.data)
    if (!(v >= 0.0)) throw std::invalid_argument("admm_unmixing: counts must be >= 0");
  if (N > 12) throw ConfigError("admm_unmixing: at most 12 materials supported");
  const auto L = ray_lengths(g);

  SinogramStack beta(N, g.n_angles(), g.nDet, 0.0);
  if (init) {
    require_shape(*init, beta.shape, "admm_unmixing: init");
    beta = project_simplex_scaled(*init, L);
  } else {
    for (std::size_t k = 0; k < N; ++k)
      for (std::size_t r = 0; r < R; ++r) beta.data[k * R + r] = L[r] / static_cast<double>(N);
  }

  const double inv = 1.0 / sys.y0;
  std::vector<double> yt(y.size()), rho(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    yt[i] = y.data[i] * inv;
    rho[i] = cfg.rho / std::max(yt[i], inv);
  }
  BinnedCounts a(Nb, g.n_angles(), g.nDet);
  forward_counts_kernel(sys, beta.data.data(), a.data.data(), R);
  std::vector<double> z = yt, u(y.size(), 0.0);

  const bool tv = cfg.lambda > 0.0;
  const double rhoTv = cfg.rho;
  std::vector<double> w = beta.data, v(beta.size(), 0.0);
  std::vector<TvDual> duals(N);

  SolverTrace local;
  SolverTrace& tr = trace ? *trace : local;
  tr = SolverTrace{};
  auto objective = [&](const SinogramStack& b) {
    forward_counts_kernel(sys, b.data.data(), a.data.data(), R);
    double kl = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double ab = a.data[i] * inv;
      kl += ab - yt[i];
      if (yt[i] > 0.0) kl += yt[i] * std::log(yt[i] / ab);
    }
    if (tv)
      for (std::size_t k = 0; k < N; ++k) kl += cfg.lambda * total_variation(b.slice(k), g.n_angles(), g.nDet);
    return kl;
  };

  Eigen::MatrixXd J, H;
  Eigen::VectorXd ybar, e, cvec, bk(static_cast<Eigen::Index>(N));
  SinogramStack prev = beta;
  std::size_t increases = 0;
  double lastObj = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < cfg.maxIters; ++it) {
    prev = beta;
    for (std::size_t r = 0; r < R; ++r) {
      if (L[r] == 0.0) continue;
      detail::ray_jacobian(sys, prev.data.data(), r, R, J, ybar);
      Eigen::VectorXd sw(static_cast<Eigen::Index>(Nb));
      e.resize(static_cast<Eigen::Index>(Nb));
      for (std::size_t b = 0; b < Nb; ++b) {
        const std::size_t i = b * R + r;
        e(static_cast<Eigen::Index>(b)) = ybar(static_cast<Eigen::Index>(b)) - z[i] + u[i];
        sw(static_cast<Eigen::Index>(b)) = rho[i];
      }
      for (std::size_t k = 0; k < N; ++k) bk(static_cast<Eigen::Index>(k)) = prev.data[k * R + r];
      H = J.transpose() * sw.asDiagonal() * J;
      cvec = J.transpose() * (sw.asDiagonal() * e) - H * bk;
      if (tv) {
        H.diagonal().array() += rhoTv;
        for (std::size_t k = 0; k < N; ++k)
          cvec(static_cast<Eigen::Index>(k)) += rhoTv * (v[k * R + r] - w[k * R + r]);
      }
      auto x = detail::simplex_qp(H, cvec, L[r]);
      for (std::size_t k = 0; k < N; ++k) beta.data[k * R + r] = x(static_cast<Eigen::Index>(k));
    }
    forward_counts_kernel(sys, beta.data.data(), a.data.data(), R);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double ai = a.data[i] * inv;
      const double t = ai + u[i] - 1.0 / rho[i];
      z[i] = 0.5 * (t + std::sqrt(t * t + 4.0 * yt[i] / rho[i]));
      u[i] += ai - z[i];
    }
    if (tv) {
      for (std::size_t k = 0; k < N; ++k) {
        std::vector<double> s(R);
        for (std::size_t r = 0; r < R; ++r) s[r] = beta.data[k * R + r] + v[k * R + r];
        auto x = tv_prox(s, g.n_angles(), g.nDet, cfg.lambda / rhoTv, cfg.innerIters, false, &duals[k]);
        for (std::size_t r = 0; r < R; ++r) w[k * R + r] = x[r];
      }
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += beta.data[i] - w[i];
    }

    const double obj = objective(beta);
    if (!std::isfinite(obj)) throw NumericalError("admm_unmixing: non-finite objective at iteration " + std::to_string(it + 1));
    // a is A(beta) from the objective evaluation
    double res = 0.0, zn = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      res += std::pow(a.data[i] * inv - z[i], 2);
      zn += z[i] * z[i];
    }
    const double change =
        std::max(detail::relative_change(beta.data, prev.data), std::sqrt(res / std::max(zn, 1e-300)));
    tr.objective.push_back(obj);
    tr.change.push_back(change);
    tr.iterations = it + 1;
    increases = obj > lastObj ? increases + 1 : 0;
    lastObj = obj;
    if (increases >= cfg.divergencePatience) {
      tr.diverged = true;
      break;
    }
    if (change < cfg.tolerance) {
      tr.converged = true;
      break;
    }
  }
  return project_simplex_scaled(beta, L);
}

/// Reference two-step pipeline: ADMM unmixing, then TV imaging per material.
inline MaterialImage classical_reconstruct(const SpectralSystem& sys, const ScanGeometry& g, const BinnedCounts& y,
                                           const SolverConfig& unmixCfg, const SolverConfig& imagingCfg,
                                           const Projector* projector = nullptr) {
  const auto beta = admm_unmixing(sys, g, y, unmixCfg);
  return admm_imaging(g, beta, imagingCfg, nullptr, projector);
}

} // namespace spct
