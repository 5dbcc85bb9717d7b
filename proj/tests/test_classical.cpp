#include "spct/classical.hpp"
#include "spct/phantoms.hpp"
#include "test_support.hpp"

#include <catch_amalgamated.hpp>

using namespace spct;
using Catch::Approx;

namespace {

// Condat's direct algorithm for exact 1D TV denoising,
// argmin_x 0.5||x - y||^2 + lambda sum |x_{i+1} - x_i|.
std::vector<double> tv1d_exact(const std::vector<double>& input, double lambda) {
  const int width = static_cast<int>(input.size());
  std::vector<double> output(input.size());
  if (width == 0) return output;
  int k = 0, k0 = 0, kplus = 0, kminus = 0;
  double umin = lambda, umax = -lambda;
  double vmin = input[0] - lambda, vmax = input[0] + lambda;
  const double twolambda = 2.0 * lambda, minlambda = -lambda;
  for (;;) {
    while (k == width - 1) {
      if (umin < 0.0) {
        do output[k0++] = vmin; while (k0 <= kminus);
        umax = (vmin = input[kminus = k = k0]) + (umin = lambda) - vmax;
      } else if (umax > 0.0) {
        do output[k0++] = vmax; while (k0 <= kplus);
        umin = (vmax = input[kplus = k = k0]) + (umax = minlambda) - vmin;
      } else {
        vmin += umin / (k - k0 + 1);
        do output[k0++] = vmin; while (k0 <= k);
        return output;
      }
    }
    if ((umin += input[k + 1] - vmin) < minlambda) {
      do output[k0++] = vmin; while (k0 <= kminus);
      vmax = (vmin = input[kplus = kminus = k = k0]) + twolambda;
      umin = lambda;
      umax = minlambda;
    } else if ((umax += input[k + 1] - vmax) > lambda) {
      do output[k0++] = vmax; while (k0 <= kplus);
      vmin = (vmax = input[kplus = kminus = k = k0]) - twolambda;
      umin = lambda;
      umax = minlambda;
    } else {
      k++;
      if (umin >= lambda) {
        vmin += (umin - lambda) / ((kminus = k) - k0 + 1);
        umin = lambda;
      }
      if (umax <= minlambda) {
        vmax += (umax + lambda) / ((kplus = k) - k0 + 1);
        umax = minlambda;
      }
    }
  }
}

double tv1d_energy(const std::vector<double>& x, const std::vector<double>& y, double lambda) {
  double e = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) e += 0.5 * (x[i] - y[i]) * (x[i] - y[i]);
  for (std::size_t i = 0; i + 1 < x.size(); ++i) e += lambda * std::abs(x[i + 1] - x[i]);
  return e;
}

double nrmse(std::span<const double> a, std::span<const double> ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ref[i]) * (a[i] - ref[i]);
    den += ref[i] * ref[i];
  }
  return std::sqrt(num / den);
}

} // namespace

TEST_CASE("project_simplex_scaled", "[classical][simplex]")
{
  SECTION("spec examples")
  {
    SinogramStack b(2, 1, 1);
    b.data = {2.0, 0.0};
    std::vector<double> L{1.0};
    auto p = project_simplex_scaled(b, L);
    CHECK(p.data[0] == Approx(1.0));
    CHECK(p.data[1] == 0.0);

    SinogramStack c(3, 1, 1, 1.0);
    std::vector<double> L3{3.0};
    auto q = project_simplex_scaled(c, L3);
    for (double v : q.data) CHECK(v == Approx(1.0));

    std::vector<double> zero{0.0};
    for (double v : project_simplex_scaled(c, zero).data) CHECK(v == 0.0);
    std::vector<double> neg{-1.0};
    CHECK_THROWS_AS(project_simplex_scaled(c, neg), std::invalid_argument);
  }

  SECTION("matches a grid-search nearest point for N = 2 and 3")
  {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(-1.5, 2.5), dl(0.2, 2.0);
    for (int trial = 0; trial < 10; ++trial) {
      const double Lr = dl(rng);
      std::vector<double> L{Lr};
      SinogramStack b2(2, 1, 1);
      b2.data = {d(rng), d(rng)};
      auto p2 = project_simplex_scaled(b2, L);
      double best = 1e300, bx = 0.0;
      for (double x = 0.0; x <= Lr; x += 1e-4 * Lr) {
        const double e = std::pow(x - b2.data[0], 2) + std::pow(Lr - x - b2.data[1], 2);
        if (e < best) best = e, bx = x;
      }
      CHECK(std::abs(p2.data[0] - bx) <= 1e-3);
      CHECK(std::abs(p2.data[1] - (Lr - bx)) <= 1e-3);

      SinogramStack b3(3, 1, 1);
      b3.data = {d(rng), d(rng), d(rng)};
      auto p3 = project_simplex_scaled(b3, L);
      best = 1e300;
      double b0 = 0, b1 = 0;
      const double h = 2e-3 * Lr;
      for (double x = 0.0; x <= Lr; x += h)
        for (double y = 0.0; x + y <= Lr; y += h) {
          const double e = std::pow(x - b3.data[0], 2) + std::pow(y - b3.data[1], 2) +
                           std::pow(Lr - x - y - b3.data[2], 2);
          if (e < best) best = e, b0 = x, b1 = y;
        }
      CHECK(std::abs(p3.data[0] - b0) <= 1e-3 * std::max(1.0, Lr) + h);
      CHECK(std::abs(p3.data[1] - b1) <= 1e-3 * std::max(1.0, Lr) + h);
    }
  }

  SECTION("feasible, idempotent and nonexpansive")
  {
    std::mt19937_64 rng(5);
    const std::size_t N = 5, R = 40;
    auto L = test::uniform_vector(rng, R, 0.0, 3.0);
    L[0] = 0.0;
    for (int trial = 0; trial < 30; ++trial) {
      auto a = test::random_field<SinogramStack>(rng, {N, 4, 10}, -2.0, 3.0);
      auto b = test::random_field<SinogramStack>(rng, {N, 4, 10}, -2.0, 3.0);
      auto pa = project_simplex_scaled(a, L), pb = project_simplex_scaled(b, L);
      for (std::size_t r = 0; r < R; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < N; ++k) {
          CHECK(pa.data[k * R + r] >= 0.0);
          s += pa.data[k * R + r];
        }
        CHECK(s == Approx(L[r]).margin(1e-12));
      }
      auto ppa = project_simplex_scaled(pa, L);
      for (std::size_t i = 0; i < pa.size(); ++i) CHECK(ppa.data[i] == Approx(pa.data[i]).margin(1e-14));
      double dp = 0.0, dd = 0.0;
      for (std::size_t i = 0; i < pa.size(); ++i) {
        dp += std::pow(pa.data[i] - pb.data[i], 2);
        dd += std::pow(a.data[i] - b.data[i], 2);
      }
      CHECK(dp <= dd * (1.0 + 1e-12));
    }
  }
}

TEST_CASE("tv_prox", "[classical][tv]")
{
  std::mt19937_64 rng(11);

  SECTION("weight 0 is the identity and constants are fixed")
  {
    auto u = test::uniform_vector(rng, 64, -1.0, 1.0);
    CHECK(tv_prox(u, 8, 8, 0.0, 50) == u);
    std::vector<double> c(64, 0.7);
    for (double v : tv_prox(c, 8, 8, 3.0, 50)) CHECK(v == Approx(0.7).epsilon(1e-14));
  }

  SECTION("1D signals match the exact direct algorithm")
  {
    for (int trial = 0; trial < 8; ++trial) {
      const std::size_t n = 60;
      auto y = test::uniform_vector(rng, n, 0.0, 1.0);
      for (std::size_t i = n / 3; i < 2 * n / 3; ++i) y[i] += 2.0;
      const double lam = 0.05 + 0.1 * trial;
      auto exact = tv1d_exact(y, lam);
      auto x = tv_prox(y, 1, n, lam, 5000);
      const double e0 = tv1d_energy(exact, y, lam), e1 = tv1d_energy(x, y, lam);
      CHECK(e1 >= e0 - 1e-10);
      CHECK(e1 - e0 <= 1e-7 * std::max(1.0, e0));
      for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(x[i] - exact[i]) <= 1e-3);
    }
  }

  SECTION("two-level step: plateaus move together by w/L1 + w/L2")
  {
    const std::size_t L1 = 12, L2 = 20;
    const double h = 1.0, w = 0.3;
    std::vector<double> y(L1 + L2, 0.0);
    for (std::size_t i = L1; i < y.size(); ++i) y[i] = h;
    auto exact = tv1d_exact(y, w);
    CHECK(exact.front() == Approx(w / L1).epsilon(1e-12));
    CHECK(exact.back() == Approx(h - w / L2).epsilon(1e-12));
    auto x = tv_prox(y, 1, y.size(), w, 3000);
    CHECK(x.back() - x.front() == Approx(h - w / L1 - w / L2).epsilon(1e-6));
    // symmetric case: the gap shrinks by 2w / plateau length
    std::vector<double> s(2 * L1, 0.0);
    for (std::size_t i = L1; i < s.size(); ++i) s[i] = h;
    auto xs = tv_prox(s, 1, s.size(), w, 3000);
    CHECK(xs.back() - xs.front() == Approx(h - 2.0 * w / L1).epsilon(1e-6));
  }

  SECTION("energy is non-increasing in the inner iteration count")
  {
    const std::size_t ny = 12, nx = 14;
    auto u = test::uniform_vector(rng, ny * nx, -1.0, 1.0);
    for (bool nonneg : {false, true}) {
      double prev = 1e300;
      for (std::size_t it : {0, 1, 2, 5, 10, 20, 50, 100}) {
        auto x = tv_prox(u, ny, nx, 0.4, it, nonneg);
        double e = total_variation(x, ny, nx) * 0.4;
        for (std::size_t p = 0; p < u.size(); ++p) e += 0.5 * (x[p] - u[p]) * (x[p] - u[p]);
        CHECK(e <= prev);
        prev = e;
        if (nonneg)
          for (double v : x) CHECK(v >= 0.0);
      }
    }
  }

  SECTION("negative weight")
  {
    std::vector<double> u(4, 0.0);
    CHECK_THROWS_AS(tv_prox(u, 2, 2, -1.0, 10), std::invalid_argument);
  }
}

TEST_CASE("admm_imaging", "[classical][imaging]")
{
  auto g = ScanGeometry::parallel(32, 32, 0.5, 60, 47, 0.5);
  Projector P(g);

  SECTION("noiseless single-material Shepp-Logan: NRMSE drops 5x in 200 iterations")
  {
    auto q = shepp_logan_intensity(g);
    auto beta = P.project(q);
    SolverConfig cfg;
    cfg.lambda = 1e-4;
    cfg.maxIters = 200;
    cfg.tolerance = 0.0;
    SolverTrace tr;
    auto qh = admm_imaging(g, beta, cfg, &tr, &P);
    const double e = nrmse(qh.data, q.data);
    INFO("NRMSE " << e << ", ||R|| " << tr.operatorNorm);
    CHECK(e <= 0.2);
    CHECK(tr.iterations == 200);
    for (std::size_t i = 5; i < tr.objective.size(); ++i)
      CHECK(tr.objective[i] <= tr.objective[i - 1] * (1.0 + 1e-9));
    for (double v : qh.data) CHECK(v >= 0.0);
  }

  SECTION("zero data is a fixed point")
  {
    SolverConfig cfg;
    cfg.lambda = 1e-2;
    cfg.maxIters = 20;
    SolverTrace tr;
    auto qh = admm_imaging(g, SinogramStack(2, 60, 47, 0.0), cfg, &tr, &P);
    for (double v : qh.data) CHECK(v == 0.0);
    CHECK(tr.converged);
  }

  SECTION("huge lambda drives every material to a constant")
  {
    MaterialImage q(1, 32, 32, 0.0);
    std::mt19937_64 rng(2);
    q = test::random_field<MaterialImage>(rng, {1, 32, 32}, 0.0, 1.0);
    SolverConfig cfg;
    cfg.lambda = 1e6;
    cfg.maxIters = 400;
    cfg.innerIters = 50;
    auto qh = admm_imaging(g, P.project(q), cfg, nullptr, &P);
    const auto [lo, hi] = std::minmax_element(qh.data.begin(), qh.data.end());
    const double mean = std::accumulate(qh.data.begin(), qh.data.end(), 0.0) / qh.size();
    CHECK(*hi - *lo <= 1e-3 * std::max(mean, 1e-3));
  }

  SECTION("step bound is enforced")
  {
    SolverConfig cfg;
    SolverTrace tr;
    admm_imaging(g, SinogramStack(1, 60, 47, 0.0), cfg, &tr, &P);
    cfg.tau = 1.5 / (tr.operatorNorm * tr.operatorNorm);
    CHECK_THROWS_AS(admm_imaging(g, SinogramStack(1, 60, 47, 0.0), cfg, nullptr, &P), ConfigError);
  }

  SECTION("trace CSV")
  {
    SolverConfig cfg;
    cfg.maxIters = 3;
    cfg.tolerance = 0.0;
    SolverTrace tr;
    admm_imaging(g, P.project(shepp_logan_intensity(g)), cfg, &tr, &P);
    auto path = std::filesystem::temp_directory_path() / "spct_trace_test.csv";
    tr.write_csv(path);
    std::ifstream in(path);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) ++n;
    CHECK(n == 4);
    std::filesystem::remove(path);
  }
}

TEST_CASE("unmixing building blocks", "[classical][unmixing]")
{
  auto sys = test::small_system({"bone", "tissue", "air"}, 4, 16, 1e6);
  std::mt19937_64 rng(8);

  SECTION("ray Jacobian transpose equals the adjoint derivative")
  {
    const std::size_t R = 6;
    auto beta = test::random_field<SinogramStack>(rng, {3, 1, R}, 0.0, 3.0);
    auto z = test::random_field<BinnedCounts>(rng, {4, 1, R}, -1.0, 1.0);
    auto ref = adjoint_derivative_apply(sys, beta, z);
    Eigen::MatrixXd J;
    Eigen::VectorXd yb;
    for (std::size_t r = 0; r < R; ++r) {
      detail::ray_jacobian(sys, beta.data.data(), r, R, J, yb);
      for (std::size_t k = 0; k < 3; ++k) {
        double s = 0.0;
        for (std::size_t b = 0; b < 4; ++b) s += J(b, k) * z.data[b * R + r];
        CHECK(test::rel_err(sys.y0 * s, ref.data[k * R + r]) <= 1e-12);
      }
    }
  }

  SECTION("simplex QP matches a grid search")
  {
    for (int trial = 0; trial < 10; ++trial) {
      Eigen::MatrixXd A = Eigen::MatrixXd::Random(4, 3);
      Eigen::MatrixXd H = A.transpose() * A;
      Eigen::VectorXd c = Eigen::VectorXd::Random(3) * 2.0;
      const double L = 1.3;
      auto x = detail::simplex_qp(H, c, L);
      double best = 1e300;
      Eigen::Vector3d bx;
      const double h = 1e-3;
      for (double a = 0.0; a <= L; a += h)
        for (double b = 0.0; a + b <= L; b += h) {
          Eigen::Vector3d v(a, b, L - a - b);
          const double f = 0.5 * v.dot(H * v) + c.dot(v);
          if (f < best) best = f, bx = v;
        }
      const double fx = 0.5 * x.dot(H * x) + c.dot(x);
      CHECK(fx <= best + 1e-12);
      CHECK(x.minCoeff() >= 0.0);
      CHECK(x.sum() == Approx(L).epsilon(1e-12));
    }
  }
}

TEST_CASE("admm_unmixing", "[classical][unmixing]")
{
  SECTION("noiseless data at the truth is a fixed point")
  {
    auto sys = test::small_system({"bone", "tissue", "air"}, 4, 16, 1e6);
    auto g = ScanGeometry::parallel(8, 8, 0.5, 6, 13, 0.5);
    PhantomConfig pc;
    pc.materials = sys.materials;
    auto q = random_ellipse_phantom(pc, g, 4);
    auto beta = project(g, q);
    auto y = forward_counts(sys, beta);
    SolverConfig cfg;
    cfg.maxIters = 20;
    SolverTrace tr;
    auto bh = admm_unmixing(sys, g, y, cfg, &tr, &beta);
    for (std::size_t i = 0; i < beta.size(); ++i) CHECK(std::abs(bh.data[i] - beta.data[i]) <= 1e-8);
    CHECK(tr.converged);
  }

  SECTION("two materials, two bins, one ray: the 1-DOF brute-force KL minimiser")
  {
    auto sys = test::small_system({"bone", "tissue"}, 2, 16, 1e7);
    ScanGeometry g;
    g.nPixX = g.nPixY = 1;
    g.pixelSize = 2.0;
    g.nDet = 1;
    g.detElemSize = 2.0;
    g.angles = {0.0};
    const double L = 2.0;
    std::mt19937_64 rng(21);
    for (double frac : {0.1, 0.35, 0.6, 0.9}) {
      SinogramStack bt(2, 1, 1);
      bt.data = {frac * L, (1.0 - frac) * L};
      auto y = sample_counts(forward_counts(sys, bt), rng());
      SolverConfig cfg;
      cfg.maxIters = 500;
      cfg.tolerance = 1e-12;
      auto bh = admm_unmixing(sys, g, y, cfg);
      double best = 1e300, bx = 0.0;
      for (double x = 0.0; x <= L; x += 1e-5) {
        SinogramStack b(2, 1, 1);
        b.data = {x, L - x};
        const double kl = kl_divergence(y, forward_counts(sys, b));
        if (kl < best) best = kl, bx = x;
      }
      CHECK(std::abs(bh.data[0] - bx) <= 1e-3);
      CHECK(bh.data[0] + bh.data[1] == Approx(L).epsilon(1e-12));
    }
  }

  SECTION("noisy data: output is feasible and the objective falls")
  {
    auto sys = test::small_system({"bone", "tissue", "air"}, 4, 16, 1e5);
    auto g = ScanGeometry::parallel(12, 12, 0.5, 10, 17, 0.5);
    PhantomConfig pc;
    pc.materials = sys.materials;
    auto s = synthesize_sample(random_ellipse_phantom(pc, g, 9), g, sys, 3);
    const auto L = ray_lengths(g);
    for (double lam : {0.0, 1e-3}) {
      SolverConfig cfg;
      cfg.lambda = lam;
      cfg.maxIters = 60;
      SolverTrace tr;
      auto bh = admm_unmixing(sys, g, s.y, cfg, &tr);
      for (std::size_t r = 0; r < g.n_rays(); ++r) {
        double sum = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
          CHECK(bh.data[k * g.n_rays() + r] >= 0.0);
          sum += bh.data[k * g.n_rays() + r];
        }
        CHECK(sum == Approx(L[r]).margin(1e-12));
      }
      CHECK(tr.objective.back() < tr.objective.front());
      CHECK_FALSE(tr.diverged);
    }
  }

  SECTION("negative counts are rejected")
  {
    auto sys = test::small_system({"bone", "tissue"}, 2, 8, 1e4);
    auto g = ScanGeometry::parallel(2, 2, 1.0, 2, 3, 1.0);
    BinnedCounts y(2, 2, 3, 1.0);
    y.data[0] = -1.0;
    CHECK_THROWS_AS(admm_unmixing(sys, g, y, SolverConfig{}), std::invalid_argument);
  }
}
