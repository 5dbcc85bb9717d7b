#pragma once

// 2D parallel-beam tomography. Pixel weights w_{i,theta,l} are exact
// intersection lengths (Siddon traversal), stored once as a sparse matrix and
// its transpose so projection and backprojection are exact adjoints with a
// fixed accumulation order.

#include "spct/common.hpp"

#include <algorithm>
#include <numbers>

namespace spct {

/// Image centred on the origin, pixel (row iy, column ix) covering
/// x in x0 + [ix, ix+1) * pixelSize, y in y0 + [iy, iy+1) * pixelSize.
/// Ray (theta, l) is the line { s_l (cos t, sin t) + u (-sin t, cos t) } with
/// s_l = (l - (nDet - 1) / 2) * detElemSize.
struct ScanGeometry {
  std::size_t nPixX = 0;
  std::size_t nPixY = 0;
  double pixelSize = 1.0;
  std::vector<double> angles;
  std::size_t nDet = 0;
  double detElemSize = 1.0;

  std::size_t n_angles() const { return angles.size(); }
  std::size_t n_rays() const { return angles.size() * nDet; }
  std::size_t n_pixels() const { return nPixX * nPixY; }

  double detector_offset(std::size_t l) const {
    return (static_cast<double>(l) - 0.5 * (static_cast<double>(nDet) - 1.0)) * detElemSize;
  }

  void validate() const {
    if (nPixX < 1 || nPixY < 1 || nDet < 1 || angles.empty())
      throw ConfigError("geometry: all counts must be >= 1");
    if (!(pixelSize > 0.0) || !(detElemSize > 0.0))
      throw ConfigError("geometry: pixel and detector sizes must be > 0");
    for (std::size_t i = 1; i < angles.size(); ++i)
      if (!(angles[i] > angles[i - 1])) throw ConfigError("geometry: angles must increase strictly");
  }

  /// nAngles angles uniformly in [0, pi).
  static ScanGeometry parallel(std::size_t nx, std::size_t ny, double pixel, std::size_t nAngles,
                               std::size_t nDet, double det) {
    ScanGeometry g;
    g.nPixX = nx;
    g.nPixY = ny;
    g.pixelSize = pixel;
    g.nDet = nDet;
    g.detElemSize = det;
    for (std::size_t a = 0; a < nAngles; ++a)
      g.angles.push_back(std::numbers::pi * static_cast<double>(a) / static_cast<double>(nAngles));
    g.validate();
    return g;
  }

  std::array<std::size_t, 3> image_shape(std::size_t nMaterials) const {
    return {nMaterials, nPixY, nPixX};
  }
  std::array<std::size_t, 3> sinogram_shape(std::size_t nMaterials) const {
    return {nMaterials, angles.size(), nDet};
  }
};

struct SparseMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::size_t> rowPtr;
  std::vector<std::uint32_t> colIdx;
  std::vector<double> values;

  std::size_t nnz() const { return values.size(); }

  SparseMatrix transposed() const {
    SparseMatrix t;
    t.rows = cols;
    t.cols = rows;
    t.rowPtr.assign(cols + 1, 0);
    for (auto c : colIdx) ++t.rowPtr[c + 1];
    for (std::size_t i = 0; i < cols; ++i) t.rowPtr[i + 1] += t.rowPtr[i];
    t.colIdx.resize(nnz());
    t.values.resize(nnz());
    std::vector<std::size_t> fill(t.rowPtr.begin(), t.rowPtr.end() - 1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t p = rowPtr[r]; p < rowPtr[r + 1]; ++p) {
        const std::size_t dst = fill[colIdx[p]]++;
        t.colIdx[dst] = static_cast<std::uint32_t>(r);
        t.values[dst] = values[p];
      }
    return t;
  }

  // out[row] = sum_p values[p] * x[colIdx[p]] for each of nBatch stacked vectors
  template <class T>
  void apply(const T* x, T* out, std::size_t nBatch) const {
    for (std::size_t b = 0; b < nBatch; ++b) {
      const T* xb = x + b * cols;
      T* ob = out + b * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t p = rowPtr[r]; p < rowPtr[r + 1]; ++p)
          s += values[p] * static_cast<double>(xb[colIdx[p]]);
        ob[r] = static_cast<T>(s);
      }
    }
  }
};

namespace detail {

// Intersection lengths of one ray with the pixel grid, as (pixel, length).
inline void siddon_ray(const ScanGeometry& g, double theta, double s,
                       std::vector<std::pair<std::uint32_t, double>>& out) {
  out.clear();
  const double p = g.pixelSize;
  const double x0 = -0.5 * static_cast<double>(g.nPixX) * p;
  const double y0 = -0.5 * static_cast<double>(g.nPixY) * p;
  const double x1 = -x0, y1 = -y0;
  const double c = std::cos(theta), sn = std::sin(theta);
  const double px = s * c, py = s * sn; // foot point
  const double dx = -sn, dy = c;       // unit direction
  constexpr double kParallel = 1e-12;
  const double edgeTol = 1e-9 * p;

  auto add = [&](std::size_t ix, std::size_t iy, double len) {
    if (len > 0.0) out.emplace_back(static_cast<std::uint32_t>(iy * g.nPixX + ix), len);
  };

  // Axis-parallel rays: a ray lying exactly on a grid line is split half/half
  // between the two adjacent pixel columns (rows).
  if (std::abs(dx) < kParallel || std::abs(dy) < kParallel) {
    const bool vertical = std::abs(dx) < kParallel; // x = const
    const double coord = vertical ? px : py;
    const double lo = vertical ? x0 : y0;
    const std::size_t nAcross = vertical ? g.nPixX : g.nPixY;
    const std::size_t nAlong = vertical ? g.nPixY : g.nPixX;
    const double rel = (coord - lo) / p;
    if (rel < -edgeTol / p || rel > static_cast<double>(nAcross) + edgeTol / p) return;
    const double nearest = std::round(rel);
    std::vector<std::pair<std::size_t, double>> cols;
    if (std::abs(rel - nearest) * p <= edgeTol) {
      const auto k = static_cast<long>(nearest);
      if (k - 1 >= 0) cols.emplace_back(static_cast<std::size_t>(k - 1), 0.5);
      if (k < static_cast<long>(nAcross)) cols.emplace_back(static_cast<std::size_t>(k), 0.5);
    } else {
      cols.emplace_back(static_cast<std::size_t>(std::floor(rel)), 1.0);
    }
    for (std::size_t a = 0; a < nAlong; ++a)
      for (auto [k, f] : cols) {
        if (vertical)
          add(k, a, f * p);
        else
          add(a, k, f * p);
      }
    if (!vertical) // keep entries sorted by pixel index
      std::sort(out.begin(), out.end());
    return;
  }

  const double txa = (x0 - px) / dx, txb = (x1 - px) / dx;
  const double tya = (y0 - py) / dy, tyb = (y1 - py) / dy;
  const double tmin = std::max(std::min(txa, txb), std::min(tya, tyb));
  const double tmax = std::min(std::max(txa, txb), std::max(tya, tyb));
  if (!(tmax > tmin)) return;

  std::vector<double> ts;
  ts.reserve(g.nPixX + g.nPixY + 4);
  ts.push_back(tmin);
  for (std::size_t i = 0; i <= g.nPixX; ++i) {
    const double t = (x0 + static_cast<double>(i) * p - px) / dx;
    if (t > tmin && t < tmax) ts.push_back(t);
  }
  for (std::size_t i = 0; i <= g.nPixY; ++i) {
    const double t = (y0 + static_cast<double>(i) * p - py) / dy;
    if (t > tmin && t < tmax) ts.push_back(t);
  }
  ts.push_back(tmax);
  std::sort(ts.begin(), ts.end());

  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    const double len = ts[i + 1] - ts[i];
    if (len <= 0.0) continue;
    const double tm = 0.5 * (ts[i] + ts[i + 1]);
    const double xm = px + tm * dx, ym = py + tm * dy;
    auto ix = static_cast<long>(std::floor((xm - x0) / p));
    auto iy = static_cast<long>(std::floor((ym - y0) / p));
    ix = std::clamp(ix, 0L, static_cast<long>(g.nPixX) - 1);
    iy = std::clamp(iy, 0L, static_cast<long>(g.nPixY) - 1);
    const auto pix = static_cast<std::uint32_t>(static_cast<std::size_t>(iy) * g.nPixX +
                                                static_cast<std::size_t>(ix));
    if (!out.empty() && out.back().first == pix)
      out.back().second += len;
    else
      out.emplace_back(pix, len);
  }
  std::sort(out.begin(), out.end());
  // merge duplicates produced by corner crossings
  std::size_t w = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (w > 0 && out[w - 1].first == out[i].first)
      out[w - 1].second += out[i].second;
    else
      out[w++] = out[i];
  }
  out.resize(w);
}

} // namespace detail

/// Radon operator R for one geometry. Rays are ordered angle-major
/// (ray = angle * nDet + detector).
class Projector {
public:
  explicit Projector(ScanGeometry geom) : geom_(std::move(geom)) {
    geom_.validate();
    forward_.rows = geom_.n_rays();
    forward_.cols = geom_.n_pixels();
    forward_.rowPtr.assign(1, 0);
    std::vector<std::pair<std::uint32_t, double>> ray;
    for (std::size_t a = 0; a < geom_.n_angles(); ++a)
      for (std::size_t l = 0; l < geom_.nDet; ++l) {
        detail::siddon_ray(geom_, geom_.angles[a], geom_.detector_offset(l), ray);
        for (auto [pix, len] : ray) {
          forward_.colIdx.push_back(pix);
          forward_.values.push_back(len);
        }
        forward_.rowPtr.push_back(forward_.values.size());
      }
    adjoint_ = forward_.transposed();
    lengths_.resize(forward_.rows);
    for (std::size_t r = 0; r < forward_.rows; ++r) {
      double s = 0.0;
      for (std::size_t p = forward_.rowPtr[r]; p < forward_.rowPtr[r + 1]; ++p)
        s += forward_.values[p] * 1.0;
      lengths_[r] = s;
    }
  }

  const ScanGeometry& geometry() const { return geom_; }
  const SparseMatrix& matrix() const { return forward_; }
  const std::vector<double>& ray_lengths() const { return lengths_; }

  /// nImages stacked images (nPixels each) -> nImages stacked sinograms.
  template <class T>
  void project(const T* images, T* sinograms, std::size_t nImages) const {
    forward_.apply(images, sinograms, nImages);
  }

  template <class T>
  void backproject(const T* sinograms, T* images, std::size_t nImages) const {
    adjoint_.apply(sinograms, images, nImages);
  }

  SinogramStack project(const MaterialImage& q) const {
    if (q.shape[1] != geom_.nPixY || q.shape[2] != geom_.nPixX)
      throw std::invalid_argument("project: image shape " + shape_string(q.shape) +
                                  " does not match geometry");
    SinogramStack out(q.shape[0], geom_.n_angles(), geom_.nDet);
    project(q.data.data(), out.data.data(), q.shape[0]);
    return out;
  }

  MaterialImage backproject(const SinogramStack& beta) const {
    if (beta.shape[1] != geom_.n_angles() || beta.shape[2] != geom_.nDet)
      throw std::invalid_argument("backproject: sinogram shape " + shape_string(beta.shape) +
                                  " does not match geometry");
    MaterialImage out(beta.shape[0], geom_.nPixY, geom_.nPixX);
    backproject(beta.data.data(), out.data.data(), beta.shape[0]);
    return out;
  }

private:
  ScanGeometry geom_;
  SparseMatrix forward_;
  SparseMatrix adjoint_;
  std::vector<double> lengths_;
};

inline SinogramStack project(const ScanGeometry& geom, const MaterialImage& q) {
  return Projector(geom).project(q);
}

inline MaterialImage backproject(const ScanGeometry& geom, const SinogramStack& beta) {
  return Projector(geom).backproject(beta);
}

/// |L(theta, l)|: length of each ray inside the image rectangle.
inline std::vector<double> ray_lengths(const ScanGeometry& geom) {
  return Projector(geom).ray_lengths();
}

} // namespace spct
