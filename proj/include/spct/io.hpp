#pragma once

// Raw little-endian float32 arrays and JSON round trips for the setup types.

#include "spct/spectral.hpp"
#include "spct/tomo.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace spct {

using json = nlohmann::json;

inline void write_f32(const std::filesystem::path& path, std::span<const double> values) {
  std::vector<char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto u = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    std::memcpy(buf.data() + 4 * i, &u, 4);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<double> read_f32(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> buf(expected * 4);
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size()) || in.peek() != EOF)
    throw IoError(path.string() + ": expected " + std::to_string(expected) + " float32 values");
  std::vector<double> v(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t u;
    std::memcpy(&u, buf.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline json to_json(const ScanGeometry& g) {
  return {{"nPixX", g.nPixX},   {"nPixY", g.nPixY},           {"pixelSize", g.pixelSize},
          {"angles", g.angles}, {"nDet", g.nDet}, {"detElemSize", g.detElemSize}};
}

inline ScanGeometry geometry_from_json(const json& j) {
  ScanGeometry g;
  g.nPixX = j.at("nPixX").get<std::size_t>();
  g.nPixY = j.at("nPixY").get<std::size_t>();
  g.pixelSize = j.at("pixelSize").get<double>();
  g.angles = j.at("angles").get<std::vector<double>>();
  g.nDet = j.at("nDet").get<std::size_t>();
  g.detElemSize = j.at("detElemSize").get<double>();
  g.validate();
  return g;
}

// The full discretisation is stored so a dataset can be reloaded without the
// material table that produced it.
inline json to_json(const SpectralSystem& s) {
  return {{"materials", s.materials}, {"densities", s.densities}, {"nodes", s.nodes},
          {"weights", s.weights},     {"source", s.source},       {"binEdges", s.binEdges},
          {"binSensitivity", s.binSensitivity}, {"lacs", s.lacs}, {"y0", s.y0}};
}

inline SpectralSystem system_from_json(const json& j) {
  SpectralSystem s;
  s.materials = j.at("materials").get<std::vector<std::string>>();
  s.densities = j.at("densities").get<std::vector<double>>();
  s.nodes = j.at("nodes").get<std::vector<double>>();
  s.weights = j.at("weights").get<std::vector<double>>();
  s.source = j.at("source").get<std::vector<double>>();
  s.binEdges = j.at("binEdges").get<std::vector<double>>();
  s.binSensitivity = j.at("binSensitivity").get<std::vector<double>>();
  s.lacs = j.at("lacs").get<std::vector<double>>();
  s.y0 = j.at("y0").get<double>();
  s.finalize();
  return s;
}

/// 8-bit binary PGM of one plane, linearly mapped from [lo, hi]. Row 0 of the
/// array is the bottom of the image (y increases with the row index).
inline void write_pgm(const std::filesystem::path& path, std::span<const double> plane,
                      std::size_t rows, std::size_t cols, double lo, double hi) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t r = rows; r-- > 0;)
    for (std::size_t c = 0; c < cols; ++c) {
      double v = (plane[r * cols + c] - lo) / span;
      v = std::clamp(v, 0.0, 1.0);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  if (!out) throw IoError("write failed: " + path.string());
}

} // namespace spct
