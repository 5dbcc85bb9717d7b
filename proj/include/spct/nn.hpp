#pragma once

// Layer parameters, initialisation, optimiser, schedule and checkpoints.

#include "spct/autodiff.hpp"
#include "spct/io.hpp"

#include <random>

namespace spct::nn {

using ad::ParamSet;
using ad::Shape;
using ad::Tensor;

/// Uniform on +-sqrt(6 / (fanIn + fanOut)).
template <class T>
void xavier_uniform(Tensor<T>& w, std::size_t fanIn, std::size_t fanOut, std::mt19937_64& rng) {
  if (fanIn + fanOut == 0) throw std::invalid_argument("xavier_uniform: zero fan");
  const double a = std::sqrt(6.0 / static_cast<double>(fanIn + fanOut));
  std::uniform_real_distribution<double> d(-a, a);
  for (auto& v : w.data) v = static_cast<T>(d(rng));
}

/// Fans of a conv kernel [F, Cin, kd, kh, kw].
inline std::pair<std::size_t, std::size_t> conv_fans(const Shape& s) {
  if (s.size() != 5) throw std::invalid_argument("conv_fans: kernel must be 5-D");
  const std::size_t k = s[2] * s[3] * s[4];
  return {s[1] * k, s[0] * k};
}

inline constexpr double kPreluInit = 0.25;

/// Adds conv weights/bias (Xavier, zero bias) under prefix.
template <class T>
void add_conv(ParamSet<T>& ps, const std::string& prefix, std::size_t filters, std::size_t inChannels,
              std::size_t kd, std::size_t kh, std::size_t kw, std::mt19937_64& rng) {
  auto& w = ps.add(prefix + ".w", {filters, inChannels, kd, kh, kw});
  auto [fi, fo] = conv_fans(w.value.shape);
  xavier_uniform(w.value, fi, fo, rng);
  ps.add(prefix + ".b", {filters});
}

template <class T>
void add_prelu(ParamSet<T>& ps, const std::string& name, std::size_t channels) {
  auto& c = ps.add(name, {channels});
  std::fill(c.value.data.begin(), c.value.data.end(), static_cast<T>(kPreluInit));
}

inline double cosine_lr(std::size_t step, std::size_t totalSteps, double lr0) {
  if (totalSteps == 0 || step > totalSteps) throw std::invalid_argument("cosine_lr: need 0 <= step <= totalSteps");
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(totalSteps)));
}

/// Scales all gradients by maxNorm / norm when the global L2 norm exceeds
/// maxNorm. Returns the norm before clipping.
template <class T>
double clip_global_norm(std::initializer_list<ParamSet<T>*> sets, double maxNorm = 1.0) {
  double s = 0.0;
  for (auto* ps : sets)
    for (const auto& p : ps->items)
      for (T g : p.grad) s += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(s);
  if (norm > maxNorm) {
    const T k = static_cast<T>(maxNorm / norm);
    for (auto* ps : sets)
      for (auto& p : ps->items)
        for (auto& g : p.grad) g *= k;
  }
  return norm;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;
};

/// One bias-corrected ADAM update of every parameter in ps from its grad.
template <class T>
void adam_step(ParamSet<T>& ps, AdamState<T>& st, double lr, const AdamConfig& cfg = {}) {
  if (st.m.empty()) {
    for (const auto& p : ps.items) {
      st.m.emplace_back(p.value.numel(), 0.0);
      st.v.emplace_back(p.value.numel(), 0.0);
    }
  }
  if (st.m.size() != ps.items.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  std::size_t k = 0;
  for (auto& p : ps.items) {
    auto& m = st.m[k];
    auto& v = st.v[k];
    if (m.size() != p.value.numel()) throw std::invalid_argument("adam_step: state shape mismatch for " + p.name);
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double step = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
      p.value.data[i] = static_cast<T>(static_cast<double>(p.value.data[i]) - step);
    }
    ++k;
  }
}

/// Checkpoint directory: manifest.json (names, shapes, offsets, metadata)
/// and params.f32 holding every tensor back to back.
template <class T>
void save_checkpoint(const std::filesystem::path& dir, const ParamSet<T>& ps, const json& meta = json::object()) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<double> blob;
  json entries = json::array();
  for (const auto& p : ps.items) {
    entries.push_back({{"name", p.name}, {"shape", p.value.shape}, {"offset", blob.size()}, {"count", p.value.numel()}});
    blob.insert(blob.end(), p.value.data.begin(), p.value.data.end());
  }
  write_f32(dir / "params.f32", blob);
  write_json(dir / "manifest.json", {{"format", "spct-checkpoint-1"}, {"dtype", "float32-le"},
                                     {"total", blob.size()}, {"params", entries}, {"meta", meta}});
}

/// Reads a checkpoint into a fresh parameter set (metadata into *meta).
template <class T>
ParamSet<T> load_checkpoint(const std::filesystem::path& dir, json* meta = nullptr) {
  const json m = read_json(dir / "manifest.json");
  ParamSet<T> ps;
  try {
    if (m.at("format") != "spct-checkpoint-1") throw ConfigError("unknown checkpoint format in " + dir.string());
    const auto blob = read_f32(dir / "params.f32", m.at("total").get<std::size_t>());
    for (const auto& e : m.at("params")) {
      auto& p = ps.add(e.at("name").get<std::string>(), e.at("shape").get<Shape>());
      const auto off = e.at("offset").get<std::size_t>(), n = e.at("count").get<std::size_t>();
      if (n != p.value.numel() || off + n > blob.size()) throw ConfigError("checkpoint entry " + p.name + " is inconsistent");
      for (std::size_t i = 0; i < n; ++i) p.value.data[i] = static_cast<T>(blob[off + i]);
    }
    if (meta) *meta = m.value("meta", json::object());
  } catch (const json::exception& e) {
    throw ConfigError(dir.string() + ": " + e.what());
  }
  return ps;
}

/// Copies values by name; every parameter of dst must be present with the same shape.
template <class T>
void assign_parameters(ParamSet<T>& dst, const ParamSet<T>& src) {
  for (auto& p : dst.items) {
    const auto& q = src.at(p.name);
    if (q.value.shape != p.value.shape)
      throw ConfigError("parameter " + p.name + ": shape " + ad::to_string(q.value.shape) + " != " +
                        ad::to_string(p.value.shape));
    p.value.data = q.value.data;
  }
}

} // namespace spct::nn
