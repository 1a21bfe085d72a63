#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "vitbind/errors.hpp"

namespace vitbind {

// Cost matrix in row-major order.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> cost;

  CostMatrix() = default;
  CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), cost(r * c, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return cost[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return cost[i * cols + j]; }
};

struct Assignment {
  // row -> column, or -1 when the row landed on a padding column (rows > cols).
  std::vector<int> row_to_col;
  double total = 0.0;
};

// Columns added when rows > cols carry this cost; real costs must stay far below it.
inline constexpr double kAssignmentPadCost = 1e6;

namespace detail {

struct DualSolution {
  std::vector<int> row_to_col;
  std::vector<double> u, v;  // row and column potentials
  double total = 0.0;
};

// Shortest augmenting path with potentials, O(n^2 m), requires n <= m.
inline DualSolution solve_rectangular(const CostMatrix& c) {
  const std::size_t n = c.rows, m = c.cols;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  DualSolution out;
  out.row_to_col.assign(n, -1);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j]) out.row_to_col[p[j] - 1] = static_cast<int>(j - 1);
  out.u.assign(u.begin() + 1, u.end());
  out.v.assign(v.begin() + 1, v.end());
  for (std::size_t i = 0; i < n; ++i) out.total += c(i, static_cast<std::size_t>(out.row_to_col[i]));
  return out;
}

// Optimal cost with some rows pinned to columns; pinned rows and columns are
// removed from the subproblem.
inline double pinned_optimum(const CostMatrix& c, const std::vector<int>& pinned) {
  std::vector<std::size_t> free_rows;
  std::vector<char> col_taken(c.cols, 0);
  double fixed = 0.0;
  for (std::size_t i = 0; i < c.rows; ++i) {
    if (pinned[i] >= 0) {
      fixed += c(i, static_cast<std::size_t>(pinned[i]));
      col_taken[static_cast<std::size_t>(pinned[i])] = 1;
    } else {
      free_rows.push_back(i);
    }
  }
  std::vector<std::size_t> free_cols;
  for (std::size_t j = 0; j < c.cols; ++j)
    if (!col_taken[j]) free_cols.push_back(j);
  if (free_rows.empty()) return fixed;
  CostMatrix sub(free_rows.size(), free_cols.size());
  for (std::size_t a = 0; a < free_rows.size(); ++a)
    for (std::size_t b = 0; b < free_cols.size(); ++b) sub(a, b) = c(free_rows[a], free_cols[b]);
  return fixed + solve_rectangular(sub).total;
}

}  // namespace detail

// Minimum-cost one-to-one assignment of rows to columns. Among optimal
// assignments the lexicographically smallest column sequence is returned.
inline Assignment hungarian_assign(const CostMatrix& input) {
  Assignment result;
  if (input.rows == 0 || input.cols == 0) {
    result.row_to_col.assign(input.rows, -1);
    return result;
  }
  for (double x : input.cost)
    if (!std::isfinite(x)) throw DataError("hungarian_assign: non-finite cost");

  CostMatrix c = input;
  if (c.rows > c.cols) {
    CostMatrix padded(c.rows, c.rows, kAssignmentPadCost);
    for (std::size_t i = 0; i < c.rows; ++i)
      for (std::size_t j = 0; j < c.cols; ++j) padded(i, j) = input(i, j);
    c = std::move(padded);
  }

  detail::DualSolution sol = detail::solve_rectangular(c);
  double scale = 1.0;
  for (double x : c.cost) scale = std::max(scale, std::abs(x));
  const double tol = 1e-9 * scale * static_cast<double>(c.rows);

  // Tie-break: walk rows in order and move each to the lowest column that still
  // admits an optimal completion. Only edges tight under the optimal duals can
  // appear in an optimal assignment.
  std::vector<int> pinned(c.rows, -1);
  for (std::size_t i = 0; i < c.rows; ++i) {
    const int current = sol.row_to_col[i];
    for (int cand = 0; cand < current; ++cand) {
      const auto j = static_cast<std::size_t>(cand);
      if (std::find(pinned.begin(), pinned.begin() + static_cast<std::ptrdiff_t>(i), cand) !=
          pinned.begin() + static_cast<std::ptrdiff_t>(i))
        continue;
      if (std::abs(c(i, j) - sol.u[i] - sol.v[j]) > tol) continue;
      pinned[i] = cand;
      if (std::abs(detail::pinned_optimum(c, pinned) - sol.total) <= tol) break;
      pinned[i] = -1;
    }
    if (pinned[i] < 0) pinned[i] = current;
    if (pinned[i] != current) {
      // Re-solve the remaining rows under the new pins.
      std::vector<std::size_t> rest_rows;
      std::vector<char> taken(c.cols, 0);
      for (std::size_t r = 0; r <= i; ++r) taken[static_cast<std::size_t>(pinned[r])] = 1;
      for (std::size_t r = i + 1; r < c.rows; ++r) rest_rows.push_back(r);
      std::vector<std::size_t> rest_cols;
      for (std::size_t j = 0; j < c.cols; ++j)
        if (!taken[j]) rest_cols.push_back(j);
      if (!rest_rows.empty()) {
        CostMatrix sub(rest_rows.size(), rest_cols.size());
        for (std::size_t a = 0; a < rest_rows.size(); ++a)
          for (std::size_t b = 0; b < rest_cols.size(); ++b) sub(a, b) = c(rest_rows[a], rest_cols[b]);
        const detail::DualSolution rest = detail::solve_rectangular(sub);
        for (std::size_t a = 0; a < rest_rows.size(); ++a) {
          const auto r = rest_rows[a];
          sol.row_to_col[r] = static_cast<int>(rest_cols[static_cast<std::size_t>(rest.row_to_col[a])]);
          sol.u[r] = rest.u[a];
        }
        for (std::size_t b = 0; b < rest_cols.size(); ++b) sol.v[rest_cols[b]] = rest.v[b];
      }
      sol.row_to_col[i] = pinned[i];
    }
  }

  result.row_to_col.assign(input.rows, -1);
  for (std::size_t i = 0; i < input.rows; ++i) {
    const int col = pinned[i];
    if (col >= 0 && static_cast<std::size_t>(col) < input.cols) {
      result.row_to_col[i] = col;
      result.total += input(i, static_cast<std::size_t>(col));
    }
  }
  return result;
}

}  // namespace vitbind
