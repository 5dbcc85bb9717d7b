#include "spct/metrics.hpp"

#include <catch_amalgamated.hpp>

#include <random>

using namespace spct;
using Catch::Approx;

namespace {

std::vector<double> random_image(std::mt19937_64& rng, std::size_t n, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

std::vector<double> rotate90(const std::vector<double>& x, std::size_t n) {
  std::vector<double> y(n * n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) y[c * n + (n - 1 - r)] = x[r * n + c];
  return y;
}

} // namespace

TEST_CASE("ssim of an image with itself is one", "[ssim]") {
  std::mt19937_64 rng(1);
  auto x = random_image(rng, 20 * 24);
  CHECK(ssim(x, x, 20, 24, 1.0) == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim of a checkerboard against its complement is low", "[ssim]") {
  const std::size_t n = 16;
  std::vector<double> x(n * n), y(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    x[i] = ((i / n + i % n) % 2) ? 1.0 : 0.0;
    y[i] = 1.0 - x[i];
  }
  CHECK(ssim(y, x, n, n, 1.0) < 0.1);
}

TEST_CASE("ssim of two constant images has the closed form", "[ssim]") {
  const std::size_t n = 12;
  const double a = 0.3, b = 0.7, L = 1.0, C1 = 1e-4 * L * L;
  std::vector<double> x(n * n, b), y(n * n, a);
  // variances and covariance vanish, leaving the luminance term
  const double expect = (2 * a * b + C1) / (a * a + b * b + C1);
  CHECK(ssim(y, x, n, n, L) == Approx(expect).epsilon(1e-9));
}

TEST_CASE("ssim is invariant under a joint 90 degree rotation", "[ssim]") {
  std::mt19937_64 rng(2);
  const std::size_t n = 18;
  auto x = random_image(rng, n * n), y = random_image(rng, n * n);
  CHECK(ssim(rotate90(y, n), rotate90(x, n), n, n, 1.0) == Approx(ssim(y, x, n, n, 1.0)).epsilon(1e-12));
}

TEST_CASE("ssim rejects images smaller than the window", "[ssim]") {
  std::vector<double> x(10 * 10, 1.0);
  CHECK_THROWS_AS(ssim(x, x, 10, 10, 1.0), std::invalid_argument);
}

TEST_CASE("nrmse identities", "[nrmse]") {
  std::mt19937_64 rng(3);
  auto x = random_image(rng, 100, 0.1, 1.0);
  CHECK(nrmse(x, x) == 0.0);
  std::vector<double> zero(100, 0.0);
  CHECK(nrmse(zero, x) == Approx(1.0));
  for (double c : {0.5, 2.0, 3.0}) {
    std::vector<double> cx(x);
    for (auto& v : cx) v *= c;
    CHECK(nrmse(cx, x) == Approx(std::abs(c - 1.0)));
  }
  bool zr = false;
  nrmse(x, x, &zr);
  CHECK_FALSE(zr);
  CHECK(nrmse(x, zero, &zr) > 0.0);
  CHECK(zr);
}

TEST_CASE("psnr values", "[psnr]") {
  std::vector<double> x(64, 0.0), y(64, 1.0), z(64, 0.1);
  CHECK(psnr(y, x, 1.0) == Approx(0.0).margin(1e-12));
  CHECK(psnr(z, x, 1.0) == Approx(20.0));
  CHECK(std::isinf(psnr(x, x, 1.0)));
  CHECK(format_metric(psnr(x, x, 1.0), 2) == "inf");
}

TEST_CASE("evaluation report table and averages", "[report]") {
  std::mt19937_64 rng(4);
  const std::vector<std::string> mats{"bone", "tissue", "air"};
  std::vector<MaterialImage> truth, recon;
  for (int s = 0; s < 3; ++s) {
    MaterialImage t(3, 16, 16), r(3, 16, 16);
    t.data = random_image(rng, t.size());
    r.data = random_image(rng, r.size());
    truth.push_back(t);
    recon.push_back(r);
  }
  auto rep = evaluate([&](std::size_t i) { return recon[i]; }, [&](std::size_t i) { return truth[i]; }, 3, mats);
  CHECK(rep.samples == 3);
  CHECK(rep.columns() == std::vector<std::string>{"Bone", "Tissue", "Air", "avg."});
  CHECK(rep.avg_ssim() == Approx((rep.ssim[0] + rep.ssim[1] + rep.ssim[2]) / 3).epsilon(1e-12));
  CHECK(rep.avg_nrmse() == Approx((rep.nrmse[0] + rep.nrmse[1] + rep.nrmse[2]) / 3).epsilon(1e-12));
  // per-material SSIM equals the mean of per-sample scores
  double s0 = 0;
  for (int s = 0; s < 3; ++s) {
    auto b = truth[s].slice(0);
    s0 += ssim(recon[s].slice(0), b, 16, 16, *std::max_element(b.begin(), b.end()));
  }
  CHECK(rep.ssim[0] == Approx(s0 / 3).epsilon(1e-12));
  const auto table = rep.table();
  CHECK(table.find("avg.") != std::string::npos);
  CHECK(table.find("SSIM") != std::string::npos);
  CHECK(table.find("PSNR") != std::string::npos);
  CHECK_FALSE(rep.warnings.empty());
  CHECK(rep.to_json()["avg"]["ssim"].get<double>() == Approx(rep.avg_ssim()));
}

TEST_CASE("oracle reconstructions score perfectly", "[report]") {
  std::mt19937_64 rng(5);
  MaterialImage t(2, 12, 12);
  t.data = random_image(rng, t.size());
  for (std::size_t i = 0; i < 144; ++i) t.data[144 + i] = 0.0; // an all-zero reference material
  auto rep = evaluate([&](std::size_t) { return t; }, [&](std::size_t) { return t; }, 1, {"tissue", "air"});
  CHECK(rep.ssim[0] == Approx(1.0));
  CHECK(rep.ssim[1] == Approx(1.0));
  CHECK(rep.nrmse[0] == 0.0);
  CHECK(rep.nrmse[1] == 0.0);
  CHECK(std::isinf(rep.psnr[0]));
  CHECK(rep.zeroReference == 1);
  CHECK(rep.to_json()["perMaterial"]["tissue"]["psnr"] == "inf");
}

TEST_CASE("evaluate warns when fewer samples than requested are available", "[report]") {
  MaterialImage t(1, 12, 12, 0.5);
  EvalOptions opt;
  opt.nSamples = 5;
  auto rep = evaluate([&](std::size_t) { return t; }, [&](std::size_t) { return t; }, 2, {"tissue"}, opt);
  CHECK(rep.samples == 2);
  CHECK(rep.warnings.size() == 2);
  CHECK_THROWS_AS(evaluate([&](std::size_t) { return t; }, [&](std::size_t) { return t; }, 0, {"tissue"}), ConfigError);
}
