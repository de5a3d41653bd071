#pragma once

// Synthetic domain-shift generators and the dataset CSV format.
//
// Dataset CSV: header "f0,...,f{d-1}" optionally followed by ",label"; one
// row per sample; features written with 17 significant digits so that a
// save/load round trip is exact.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cgdm/domain.hpp"
#include "cgdm/errors.hpp"
#include "cgdm/random.hpp"
#include "cgdm/tensor.hpp"

namespace cgdm {

struct DomainPair {
  DomainSet source;
  DomainSet target;
};

// Rotates 2-D points about the origin.
inline Tensor rotate_points(const Tensor& points, double degrees) {
  if (points.rank() != 2 || points.shape()[1] != 2) throw DimensionError("rotate_points expects n x 2 points");
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  std::vector<double> out(points.numel());
  for (std::size_t i = 0; i < points.shape()[0]; ++i) {
    const double x = points[2 * i], y = points[2 * i + 1];
    out[2 * i] = c * x - s * y;
    out[2 * i + 1] = s * x + c * y;
  }
  return Tensor(points.shape(), std::move(out));
}

namespace detail {

inline DomainSet two_moons(std::size_t n, double noise, Rng& rng, DomainTag tag) {
  const std::size_t n_outer = n / 2, n_inner = n - n_outer;
  std::vector<double> xs;
  std::vector<int> ys;
  xs.reserve(2 * n);
  ys.reserve(n);
  auto angle = [](std::size_t i, std::size_t count) {
    return count > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(count - 1) : 0.0;
  };
  for (std::size_t i = 0; i < n_outer; ++i) {
    const double t = angle(i, n_outer);
    xs.push_back(std::cos(t) - 0.5 + noise * rng.normal());
    xs.push_back(std::sin(t) - 0.25 + noise * rng.normal());
    ys.push_back(0);
  }
  for (std::size_t i = 0; i < n_inner; ++i) {
    const double t = angle(i, n_inner);
    xs.push_back(0.5 - std::cos(t) + noise * rng.normal());
    xs.push_back(0.25 - std::sin(t) + noise * rng.normal());
    ys.push_back(1);
  }
  DomainSet set;
  set.features = Tensor(Shape{n, 2}, std::move(xs));
  set.labels = std::move(ys);
  set.domain = tag;
  set.num_classes = 2;
  return set;
}

}  // namespace detail

// Interleaved half circles centered on the origin (the usual moons shifted by
// (-0.5, -0.25)); the target is an independent draw rotated by
// `rotation_deg` about the origin. Target labels are kept for evaluation.
inline DomainPair make_two_moons_pair(std::size_t n, double noise, double rotation_deg, std::uint64_t seed) {
  if (n < 2) throw ContractError("two moons needs n >= 2");
  if (!(noise >= 0.0)) throw ContractError("two moons noise must be >= 0");
  Rng src_rng(derive_seed(seed, 1));
  Rng tgt_rng(derive_seed(seed, 2));
  DomainPair pair{detail::two_moons(n, noise, src_rng, DomainTag::source),
                  detail::two_moons(n, noise, tgt_rng, DomainTag::target)};
  pair.target.features = rotate_points(pair.target.features, rotation_deg);
  return pair;
}

struct BlobSpec {
  std::size_t classes = 4;
  std::size_t dim = 8;
  std::size_t per_class = 100;
  double separation = 4.0;
  std::vector<double> shift;  // empty = no shift
  double cov_scale = 1.0;
};

// K isotropic Gaussian clusters with centers at distance `separation` from
// the origin in random directions. Target = source clusters translated by
// `shift` with standard deviation multiplied by `cov_scale`.
inline DomainPair make_shifted_blobs(const BlobSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2) throw ContractError("shifted blobs needs at least two classes");
  if (spec.dim == 0 || spec.per_class == 0) throw ContractError("shifted blobs needs positive dim and per_class");
  if (!spec.shift.empty() && spec.shift.size() != spec.dim) throw ContractError("shift vector length must equal dim");
  Rng center_rng(derive_seed(seed, 3));
  std::vector<double> centers(spec.classes * spec.dim);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    double norm = 0.0;
    for (std::size_t j = 0; j < spec.dim; ++j) {
      centers[k * spec.dim + j] = center_rng.normal();
      norm += centers[k * spec.dim + j] * centers[k * spec.dim + j];
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < spec.dim; ++j) centers[k * spec.dim + j] *= spec.separation / norm;
  }
  auto draw = [&](Rng& rng, bool shifted, DomainTag tag) {
    const std::size_t n = spec.classes * spec.per_class;
    std::vector<double> xs;
    std::vector<int> ys;
    xs.reserve(n * spec.dim);
    for (std::size_t k = 0; k < spec.classes; ++k) {
      for (std::size_t i = 0; i < spec.per_class; ++i) {
        for (std::size_t j = 0; j < spec.dim; ++j) {
          const double offset = shifted && !spec.shift.empty() ? spec.shift[j] : 0.0;
          const double sd = shifted ? spec.cov_scale : 1.0;
          xs.push_back(centers[k * spec.dim + j] + offset + sd * rng.normal());
        }
        ys.push_back(static_cast<int>(k));
      }
    }
    DomainSet set;
    set.features = Tensor(Shape{n, spec.dim}, std::move(xs));
    set.labels = std::move(ys);
    set.domain = tag;
    set.num_classes = spec.classes;
    return set;
  };
  Rng src_rng(derive_seed(seed, 4));
  Rng tgt_rng(derive_seed(seed, 5));
  return DomainPair{draw(src_rng, false, DomainTag::source), draw(tgt_rng, true, DomainTag::target)};
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void save_dataset_csv(const DomainSet& set, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  const std::size_t d = set.dim();
  for (std::size_t j = 0; j < d; ++j) os << (j ? "," : "") << 'f' << j;
  if (set.labeled()) os << ",label";
  os << '\n';
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) os << (j ? "," : "") << format_double(set.features[i * d + j]);
    if (set.labeled()) os << ',' << (*set.labels)[i];
    os << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& text, std::size_t line) {
  const std::string t = trim(text);
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size()) throw ParseError(line, "non-numeric field '" + t + "'");
    return v;
  } catch (const std::logic_error&) {
    throw ParseError(line, "non-numeric field '" + t + "'");
  }
}

}  // namespace detail

inline DomainSet load_dataset_csv(const std::string& path, DomainTag tag = DomainTag::source) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(is, line)) throw ParseError(1, "missing header");
  std::vector<std::string> header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  const bool labeled = !header.empty() && header.back() == "label";
  const std::size_t d = header.size() - (labeled ? 1 : 0);
  if (d == 0) throw ParseError(1, "header names no feature columns");

  std::vector<double> xs;
  std::vector<int> ys;
  std::size_t line_no = 1, rows = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const std::vector<std::string> fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      throw ParseError(line_no, "expected " + std::to_string(header.size()) + " fields, found " +
                                    std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j < d; ++j) xs.push_back(detail::parse_double(fields[j], line_no));
    if (labeled) {
      const std::string t = detail::trim(fields.back());
      std::size_t used = 0;
      int y = -1;
      try {
        y = std::stoi(t, &used);
      } catch (const std::logic_error&) {
        used = 0;
      }
      if (used != t.size() || t.empty() || y < 0) throw ParseError(line_no, "label must be a non-negative integer");
      ys.push_back(y);
    }
    ++rows;
  }
  if (rows == 0) throw ParseError(line_no, "dataset has no data rows");

  DomainSet set;
  set.features = Tensor(Shape{rows, d}, std::move(xs));
  set.domain = tag;
  if (labeled) {
    set.num_classes = static_cast<std::size_t>(*std::max_element(ys.begin(), ys.end())) + 1;
    set.labels = std::move(ys);
  }
  return set;
}

}  // namespace cgdm
