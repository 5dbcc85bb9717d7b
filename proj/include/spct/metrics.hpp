#pragma once

// SSIM, NRMSE and PSNR per material, averaged over a test set.

#include "spct/io.hpp"

#include <chrono>
#include <functional>
#include <iomanip>
#include <sstream>

namespace spct {

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean SSIM over all fully contained Gaussian windows.
inline double ssim(std::span<const double> xh, std::span<const double> x, std::size_t rows, std::size_t cols,
                   double dynamicRange, const SsimParams& prm = {}) {
  if (xh.size() != x.size() || x.size() != rows * cols)
    throw std::invalid_argument("ssim: shape mismatch");
  if (!(dynamicRange > 0.0)) throw std::invalid_argument("ssim: dynamic range must be > 0");
  const std::size_t n = prm.window;
  if (rows < n || cols < n)
    throw std::invalid_argument("ssim: image " + std::to_string(rows) + "x" + std::to_string(cols) +
                                " smaller than the " + std::to_string(n) + "x" + std::to_string(n) + " window");
  std::vector<double> w(n);
  double ws = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) - 0.5 * static_cast<double>(n - 1);
    w[i] = std::exp(-t * t / (2.0 * prm.sigma * prm.sigma));
    ws += w[i];
  }
  for (auto& v : w) v /= ws;

  const std::size_t orows = rows - n + 1, ocols = cols - n + 1;
  // separable valid filtering of the five moment images
  auto filter = [&](auto f) {
    std::vector<double> tmp(rows * ocols, 0.0), out(orows * ocols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < ocols; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += w[k] * f(r * cols + c + k);
        tmp[r * ocols + c] = s;
      }
    for (std::size_t r = 0; r < orows; ++r)
      for (std::size_t c = 0; c < ocols; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += w[k] * tmp[(r + k) * ocols + c];
        out[r * ocols + c] = s;
      }
    return out;
  };
  const auto mu1 = filter([&](std::size_t i) { return xh[i]; });
  const auto mu2 = filter([&](std::size_t i) { return x[i]; });
  const auto s11 = filter([&](std::size_t i) { return xh[i] * xh[i]; });
  const auto s22 = filter([&](std::size_t i) { return x[i] * x[i]; });
  const auto s12 = filter([&](std::size_t i) { return xh[i] * x[i]; });
  const double C1 = std::pow(prm.k1 * dynamicRange, 2), C2 = std::pow(prm.k2 * dynamicRange, 2);
  double total = 0.0;
  for (std::size_t i = 0; i < mu1.size(); ++i) {
    const double m1 = mu1[i], m2 = mu2[i];
    const double v1 = s11[i] - m1 * m1, v2 = s22[i] - m2 * m2, cov = s12[i] - m1 * m2;
    total += ((2.0 * m1 * m2 + C1) * (2.0 * cov + C2)) / ((m1 * m1 + m2 * m2 + C1) * (v1 + v2 + C2));
  }
  return total / static_cast<double>(mu1.size());
}

/// ||xh - x|| / ||x||; a zero reference gives ||xh|| / sqrt(n) and sets *zeroReference.
inline double nrmse(std::span<const double> xh, std::span<const double> x, bool* zeroReference = nullptr) {
  if (xh.size() != x.size()) throw std::invalid_argument("nrmse: shape mismatch");
  double num = 0.0, den = 0.0, nh = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (xh[i] - x[i]) * (xh[i] - x[i]);
    den += x[i] * x[i];
    nh += xh[i] * xh[i];
  }
  if (zeroReference) *zeroReference = den == 0.0;
  if (den == 0.0) return x.empty() ? 0.0 : std::sqrt(nh / static_cast<double>(x.size()));
  return std::sqrt(num / den);
}

/// 20 log10(peak / RMSE); +infinity for identical images.
inline double psnr(std::span<const double> xh, std::span<const double> x, double peak) {
  if (xh.size() != x.size() || x.empty()) throw std::invalid_argument("psnr: shape mismatch");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (xh[i] - x[i]) * (xh[i] - x[i]);
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(peak / std::sqrt(se / static_cast<double>(x.size())));
}

inline std::string format_metric(double v, int precision) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

/// Table header label of a material.
inline std::string material_label(const std::string& name) {
  if (name == "bone") return "Bone";
  if (name == "tissue") return "Tissue";
  if (name == "calcium") return "Calc.";
  if (name == "adipose") return "Adip.";
  if (name == "air") return "Air";
  if (name == "blood") return "Blood";
  if (name.empty()) return name;
  std::string s = name;
  s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

struct EvalReport {
  std::vector<std::string> materials;
  std::vector<double> ssim, nrmse, psnr; // per material, averaged over samples
  std::size_t samples = 0;
  std::size_t zeroReference = 0; // (sample, material) pairs with an all-zero reference
  double secondsPerImage = 0.0;
  std::vector<std::string> warnings;

  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
  double avg_ssim() const { return mean(ssim); }
  double avg_nrmse() const { return mean(nrmse); }
  double avg_psnr() const { return mean(psnr); }

  json to_json() const {
    auto num = [](double v) -> json { return std::isfinite(v) ? json(v) : json(format_metric(v, 0)); };
    json per = json::object();
    for (std::size_t k = 0; k < materials.size(); ++k)
      per[materials[k]] = {{"ssim", num(ssim[k])}, {"nrmse", num(nrmse[k])}, {"psnr", num(psnr[k])}};
    return {{"materials", materials},
            {"columns", columns()},
            {"perMaterial", per},
            {"avg", {{"ssim", num(avg_ssim())}, {"nrmse", num(avg_nrmse())}, {"psnr", num(avg_psnr())}}},
            {"samples", samples},
            {"zeroReference", zeroReference},
            {"secondsPerImage", secondsPerImage},
            {"warnings", warnings}};
  }

  std::vector<std::string> columns() const {
    std::vector<std::string> c;
    for (const auto& m : materials) c.push_back(material_label(m));
    c.push_back("avg.");
    return c;
  }

  /// Rows SSIM / NRMSE / PSNR, one column per material and "avg.".
  std::string table() const {
    const auto cols = columns();
    std::ostringstream out;
    const int w0 = 6, w = 9;
    out << std::left << std::setw(w0) << "" << std::right;
    for (const auto& c : cols) out << std::setw(w) << c;
    out << '\n';
    auto row = [&](const char* name, const std::vector<double>& v, double avg, int prec) {
      out << std::left << std::setw(w0) << name << std::right;
      for (double x : v) out << std::setw(w) << format_metric(x, prec);
      out << std::setw(w) << format_metric(avg, prec) << '\n';
    };
    row("SSIM", ssim, avg_ssim(), 3);
    row("NRMSE", nrmse, avg_nrmse(), 3);
    row("PSNR", psnr, avg_psnr(), 2);
    return out.str();
  }
};

struct EvalOptions {
  std::size_t nSamples = 100;
  bool densityMode = false; // score rho_k q_k instead of q_k
  std::vector<double> densities;
};

inline constexpr std::size_t kReferenceTestSamples = 100;

/// Scores reconstructions of the first nSamples test samples. recon receives
/// the sample index and returns the material image; time spent in recon is
/// averaged into secondsPerImage.
inline EvalReport evaluate(const std::function<MaterialImage(std::size_t)>& recon,
                           const std::function<MaterialImage(std::size_t)>& truth, std::size_t available,
                           const std::vector<std::string>& materials, const EvalOptions& opt = {}) {
  EvalReport rep;
  rep.materials = materials;
  const std::size_t N = materials.size();
  rep.ssim.assign(N, 0.0);
  rep.nrmse.assign(N, 0.0);
  rep.psnr.assign(N, 0.0);
  const std::size_t n = std::min(opt.nSamples, available);
  if (n == 0) throw ConfigError("evaluate: no test samples");
  if (n < opt.nSamples)
    rep.warnings.push_back("only " + std::to_string(n) + " test samples available (requested " +
                           std::to_string(opt.nSamples) + ")");
  if (n < kReferenceTestSamples)
    rep.warnings.push_back("evaluating " + std::to_string(n) + " samples; the reference protocol uses " +
                           std::to_string(kReferenceTestSamples));
  if (opt.densityMode && opt.densities.size() != N) throw ConfigError("evaluate: density mode needs one density per material");
  double seconds = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    MaterialImage xh = recon(s);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    MaterialImage x = truth(s);
    if (!xh.same_shape(x) || x.shape[0] != N)
      throw std::invalid_argument("evaluate: reconstruction shape " + shape_string(xh.shape) + " vs truth " +
                                  shape_string(x.shape));
    if (opt.densityMode)
      for (std::size_t k = 0; k < N; ++k) {
        for (auto& v : xh.slice(k)) v *= opt.densities[k];
        for (auto& v : x.slice(k)) v *= opt.densities[k];
      }
    for (std::size_t k = 0; k < N; ++k) {
      auto a = xh.slice(k), b = x.slice(k);
      const double peak = *std::max_element(b.begin(), b.end());
      const double range = peak > 0.0 ? peak : 1.0;
      bool zero = false;
      rep.ssim[k] += ssim(a, b, x.shape[1], x.shape[2], range);
      rep.nrmse[k] += nrmse(a, b, &zero);
      rep.psnr[k] += psnr(a, b, range);
      rep.zeroReference += zero ? 1 : 0;
    }
  }
  for (std::size_t k = 0; k < N; ++k) {
    rep.ssim[k] /= static_cast<double>(n);
    rep.nrmse[k] /= static_cast<double>(n);
    rep.psnr[k] /= static_cast<double>(n);
  }
  rep.samples = n;
  rep.secondsPerImage = seconds / static_cast<double>(n);
  return rep;
}

/// Material-averaged SSIM of one reconstruction.
inline double mean_ssim(const MaterialImage& xh, const MaterialImage& x) {
  double s = 0.0;
  for (std::size_t k = 0; k < x.shape[0]; ++k) {
    auto b = x.slice(k);
    const double peak = *std::max_element(b.begin(), b.end());
    s += ssim(xh.slice(k), b, x.shape[1], x.shape[2], peak > 0.0 ? peak : 1.0);
  }
  return s / static_cast<double>(x.shape[0]);
}

} // namespace spct
