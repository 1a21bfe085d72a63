#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "vitbind/errors.hpp"
#include "vitbind/rng.hpp"

namespace vitbind {

namespace detail {

// Returns (x - mean) / sqrt(sum of squares), so that corr = <za, zb>.
inline std::vector<double> standardize(std::span<const double> x, const char* which) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  std::vector<double> z(x.size());
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    z[i] = x[i] - mean;
    ss += z[i] * z[i];
  }
  if (!(ss > 0.0)) throw NumericError(std::string("correlation undefined: zero variance in ") + which);
  const double inv = 1.0 / std::sqrt(ss);
  for (double& v : z) v *= inv;
  return z;
}

inline void check_corr_inputs(std::size_t na, std::size_t nb) {
  if (na != nb) throw DataError("correlation inputs differ in length: " + std::to_string(na) + " vs " + std::to_string(nb));
  if (na < 3) throw DataError("correlation needs at least 3 samples");
}

}  // namespace detail

inline double pearson_corr(std::span<const double> a, std::span<const double> b) {
  detail::check_corr_inputs(a.size(), b.size());
  const auto za = detail::standardize(a, "first input");
  const auto zb = detail::standardize(b, "second input");
  double r = 0.0;
  for (std::size_t i = 0; i < za.size(); ++i) r += za[i] * zb[i];
  return std::clamp(r, -1.0, 1.0);
}

struct PermutationResult {
  double r = 0.0;
  double p_value = 1.0;
  std::size_t permutations = 0;
};

// Two-sided permutation test on |r|, shuffling b. p = (1 + #{|r*| >= |r|}) / (1 + n_perm).
inline PermutationResult permutation_test(std::span<const double> a, std::span<const double> b, std::size_t n_perm,
                                          std::uint64_t seed) {
  if (n_perm < 100) throw ConfigError("permutation_test needs at least 100 permutations");
  detail::check_corr_inputs(a.size(), b.size());
  const auto za = detail::standardize(a, "first input");
  auto zb = detail::standardize(b, "second input");
  double observed = 0.0;
  for (std::size_t i = 0; i < za.size(); ++i) observed += za[i] * zb[i];
  const double threshold = std::abs(observed) * (1.0 - 1e-12);

  Rng rng(seed);
  std::size_t extreme = 0;
  for (std::size_t p = 0; p < n_perm; ++p) {
    rng.shuffle(zb);
    double r = 0.0;
    for (std::size_t i = 0; i < za.size(); ++i) r += za[i] * zb[i];
    if (std::abs(r) >= threshold) ++extreme;
  }
  return {std::clamp(observed, -1.0, 1.0), static_cast<double>(extreme + 1) / static_cast<double>(n_perm + 1), n_perm};
}

struct KdeResult {
  std::vector<double> density;
  double bandwidth = 0.0;
  // Set when the samples had zero spread and a point-mass fallback was used.
  bool degenerate = false;
};

inline double sample_stddev(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

inline double scott_bandwidth(std::span<const double> samples) {
  return std::pow(static_cast<double>(samples.size()), -0.2) * sample_stddev(samples);
}

namespace detail {

// Zero-spread fallback: all mass on the evaluation point nearest the sample
// value, scaled so that a trapezoid integral over the grid gives one.
inline KdeResult point_mass(double location, std::span<const double> eval_points) {
  KdeResult out;
  out.degenerate = true;
  out.density.assign(eval_points.size(), 0.0);
  if (eval_points.empty()) return out;
  std::size_t nearest = 0;
  for (std::size_t i = 1; i < eval_points.size(); ++i)
    if (std::abs(eval_points[i] - location) < std::abs(eval_points[nearest] - location)) nearest = i;
  double width = 1.0;
  if (eval_points.size() > 1) {
    const std::size_t lo = nearest > 0 ? nearest - 1 : nearest;
    const std::size_t hi = nearest + 1 < eval_points.size() ? nearest + 1 : nearest;
    width = (eval_points[hi] - eval_points[lo]) / 2.0;
  }
  out.density[nearest] = 1.0 / width;
  return out;
}

}  // namespace detail

// Gaussian KDE with Scott's-rule bandwidth n^(-1/5) * std.
inline KdeResult gaussian_kde(std::span<const double> samples, std::span<const double> eval_points) {
  if (samples.size() < 2) throw DataError("gaussian_kde needs at least 2 samples");
  const double h = scott_bandwidth(samples);
  if (!(h > 0.0)) return detail::point_mass(samples[0], eval_points);
  KdeResult out;
  out.bandwidth = h;
  out.density.resize(eval_points.size());
  const double norm = 1.0 / (static_cast<double>(samples.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t e = 0; e < eval_points.size(); ++e) {
    double acc = 0.0;
    for (double s : samples) {
      const double z = (eval_points[e] - s) / h;
      acc += std::exp(-0.5 * z * z);
    }
    out.density[e] = acc * norm;
  }
  return out;
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = lo;
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return out;
}

inline double trapezoid(std::span<const double> x, std::span<const double> y) {
  double acc = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) acc += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return acc;
}

}  // namespace vitbind
