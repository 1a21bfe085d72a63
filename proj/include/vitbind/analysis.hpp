#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vitbind/labels.hpp"
#include "vitbind/linalg.hpp"
#include "vitbind/log.hpp"
#include "vitbind/parallel.hpp"
#include "vitbind/probes.hpp"
#include "vitbind/stats.hpp"
#include "vitbind/supervision.hpp"
#include "vitbind/vit.hpp"

namespace vitbind {

// Projection matrix of a probe at `layer`: W for the probe's own layer, W2 for
// the second layer of a cross-layer probe.
inline const Tensor& binding_matrix(const ProbeWeights& pw, std::size_t layer) {
  if (pw.family != ProbeFamily::quad && pw.family != ProbeFamily::cross_layer)
    throw ConfigError(family_name(pw.family) + " probes have no binding subspace");
  if (pw.layer == layer) return pw.w;
  if (pw.family == ProbeFamily::cross_layer && pw.layer2 == layer) return pw.w2;
  throw ConfigError("probe was trained on layer " + std::to_string(pw.layer) + ", not layer " + std::to_string(layer));
}

struct BindingDecomposition {
  std::size_t layer = 0;
  Tensor binding;  // [N, k], b = W h
  Tensor feature;  // [N, d], f = h - pinv_lift(W, b)
};

inline BindingDecomposition project_binding(const Tensor& patches, const Tensor& w, std::size_t layer) {
  if (patches.cols() != w.cols())
    throw DataError("project_binding: embeddings have width " + std::to_string(patches.cols()) + ", probe expects " +
                    std::to_string(w.cols()));
  const PseudoInverseLift lift(w);
  BindingDecomposition out;
  out.layer = layer;
  out.binding = Tensor::matrix(patches.rows(), w.rows());
  out.feature = patches;
  parallel_for(patches.rows(), [&](std::size_t i) {
    const auto b = matvec(w, patches.row(i));
    std::copy(b.begin(), b.end(), out.binding.row(i).begin());
    const auto back = lift.lift(b);
    auto f = out.feature.row(i);
    for (std::size_t c = 0; c < f.size(); ++c) f[c] -= back[c];
  });
  return out;
}

inline BindingDecomposition project_binding(const LayerTrace& trace, const ProbeWeights& pw, std::size_t layer) {
  const Tensor& w = binding_matrix(pw, layer);
  if (layer >= trace.layers.size()) throw DataError("trace has no layer " + std::to_string(layer));
  return project_binding(trace.patch_embeddings(layer), w, layer);
}

struct DeltaPcaResult {
  EigenResult pca;
  Tensor coords;                  // [n, k] PC coordinates per delta
  std::vector<std::size_t> tags;  // copy index (1..copies-1) per delta row
  std::vector<bool> separable;    // one-vs-rest result per cluster
  double separability = 0.0;      // fraction of deltas classified correctly
  double mean_delta_norm = 0.0;
};

namespace detail {

// Perceptron with bias on a one-vs-rest split. Returns (w, b) after at most
// `epochs` passes; stops early once every sample is on its side.
inline std::pair<std::vector<double>, double> perceptron(const Tensor& x, const std::vector<int>& y, std::size_t epochs) {
  const std::size_t n = x.rows(), d = x.cols();
  double scale = 0.0;
  for (float v : x.data()) scale = std::max(scale, static_cast<double>(std::abs(v)));
  if (scale == 0.0) scale = 1.0;
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::size_t mistakes = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = b;
      for (std::size_t j = 0; j < d; ++j) s += w[j] * x(i, j) / scale;
      if (y[i] * s <= 0.0) {
        for (std::size_t j = 0; j < d; ++j) w[j] += y[i] * x(i, j) / scale;
        b += y[i];
        ++mistakes;
      }
    }
    if (mistakes == 0) break;
  }
  for (double& v : w) v /= scale;
  return {w, b};
}

}  // namespace detail

// PCA over pooled residual deltas h(X_i) - h(A_i) between aligned copies.
// copies[0] is the anchor A; every copy is an [m, d] block of aligned patch
// rows. Cluster separability uses a one-vs-rest perceptron on the PC
// coordinates.
inline DeltaPcaResult residual_delta_pca(std::span<const Tensor> copies, std::size_t k = 3, std::size_t perceptron_epochs = 1000) {
  if (copies.size() < 2) throw DataError("residual_delta_pca needs at least 2 object copies");
  const std::size_t m = copies[0].rows(), d = copies[0].cols();
  for (std::size_t c = 1; c < copies.size(); ++c)
    if (copies[c].rows() != m || copies[c].cols() != d)
      throw DataError("residual_delta_pca: copy " + std::to_string(c) + " is misaligned with the anchor (" +
                      shape_string(copies[c].shape()) + " vs " + shape_string(copies[0].shape()) + ")");
  const std::size_t n = m * (copies.size() - 1);
  if (n < 2) throw DataError("residual_delta_pca needs at least 2 deltas");
  DeltaPcaResult out;
  Tensor deltas = Tensor::matrix(n, d);
  double norm_sum = 0.0;
  for (std::size_t c = 1; c < copies.size(); ++c)
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t r = (c - 1) * m + i;
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double v = static_cast<double>(copies[c](i, j)) - copies[0](i, j);
        deltas(r, j) = static_cast<float>(v);
        sq += v * v;
      }
      norm_sum += std::sqrt(sq);
      out.tags.push_back(c);
    }
  out.mean_delta_norm = norm_sum / static_cast<double>(n);
  out.pca = pca_topk(deltas, std::min({k, n, d}));
  out.coords = out.pca.project(deltas);

  const std::size_t clusters = copies.size() - 1;
  if (clusters == 1) {
    out.separable = {true};
    out.separability = 1.0;
    return out;
  }
  std::vector<std::vector<double>> margin(clusters, std::vector<double>(n));
  out.separable.assign(clusters, true);
  for (std::size_t c = 0; c < clusters; ++c) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = out.tags[i] == c + 1 ? 1 : -1;
    const auto [w, b] = detail::perceptron(out.coords, y, perceptron_epochs);
    for (std::size_t i = 0; i < n; ++i) {
      double s = b;
      for (std::size_t j = 0; j < w.size(); ++j) s += w[j] * out.coords(i, j);
      margin[c][i] = s;
      if (y[i] * s <= 0.0) out.separable[c] = false;
    }
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool ok = true;
    for (std::size_t c = 0; c < clusters; ++c) ok = ok && ((out.tags[i] == c + 1) == (margin[c][i] > 0.0));
    correct += ok;
  }
  out.separability = static_cast<double>(correct) / static_cast<double>(n);
  return out;
}

// Aligned copies of `instances` taken from one image's patch embeddings.
inline std::vector<Tensor> aligned_copies(const Tensor& patches, const LabelRaster& raster, std::span<const int> instances) {
  if (patches.rows() != raster.patches())
    throw DataError("aligned_copies: " + std::to_string(patches.rows()) + " embeddings for a " + std::to_string(raster.side) +
                    "x" + std::to_string(raster.side) + " raster");
  std::vector<Tensor> out;
  for (const auto& idx : aligned_instance_patches(raster, instances)) out.push_back(gather_rows(patches, idx));
  return out;
}

// Mean norm of the part of each delta outside span(W^T).
inline double feature_residual_norm(std::span<const Tensor> copies, const Tensor& w) {
  if (copies.size() < 2) throw DataError("feature_residual_norm needs at least 2 copies");
  const PseudoInverseLift lift(w);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 1; c < copies.size(); ++c)
    for (std::size_t i = 0; i < copies[0].rows(); ++i) {
      std::vector<float> delta(copies[0].cols());
      for (std::size_t j = 0; j < delta.size(); ++j) delta[j] = copies[c](i, j) - copies[0](i, j);
      const auto inside = lift.project(delta);
      double sq = 0.0;
      for (std::size_t j = 0; j < delta.size(); ++j) sq += (delta[j] - inside[j]) * (delta[j] - inside[j]);
      sum += std::sqrt(sq);
      ++n;
    }
  return sum / static_cast<double>(n);
}

struct ScoreMap {
  std::size_t side = 0;
  std::size_t reference = 0;
  std::size_t layer = 0;
  std::vector<double> scores;  // row-major side x side

  double at(std::size_t row, std::size_t col) const { return scores[row * side + col]; }
};

inline ScoreMap score_map(const Tensor& patches, std::size_t side, const ProbeWeights& pw, std::size_t layer, std::size_t reference) {
  if (patches.rows() != side * side)
    throw DataError("score_map: " + std::to_string(patches.rows()) + " patches for grid side " + std::to_string(side));
  if (reference >= patches.rows())
    throw ConfigError("reference patch " + std::to_string(reference) + " is outside the " + std::to_string(side) + "x" +
                      std::to_string(side) + " grid");
  const Tensor ref = gather_rows(patches, std::vector<std::size_t>{reference});
  ScoreMap out;
  out.side = side;
  out.reference = reference;
  out.layer = layer;
  out.scores = score_matrix(pw, ref, patches);
  return out;
}

inline ScoreMap score_map(const LayerTrace& trace, const ProbeWeights& pw, std::size_t layer, std::size_t reference) {
  if (pw.layer != layer) throw ConfigError("probe was trained on layer " + std::to_string(pw.layer) + ", not layer " + std::to_string(layer));
  return score_map(trace.patch_embeddings(layer), trace.grid_side, pw, layer, reference);
}

// Mean score over all patch pairs (i in a, j in b), a != b allowed to overlap
// only on distinct patches.
inline double instance_pair_mean_score(const Tensor& patches, const LabelRaster& raster, const ProbeWeights& pw, int a, int b) {
  std::vector<std::size_t> pa, pb;
  for (std::size_t p = 0; p < raster.patches(); ++p) {
    if (raster.instance[p] == a) pa.push_back(p);
    if (raster.instance[p] == b) pb.push_back(p);
  }
  if (pa.empty() || pb.empty()) throw DataError("instance_pair_mean_score: instance missing from raster");
  const auto s = score_matrix(pw, gather_rows(patches, pa), gather_rows(patches, pb));
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pb.size(); ++j) {
      if (pa[i] == pb[j]) continue;
      sum += s[i * pb.size() + j];
      ++n;
    }
  if (n == 0) throw DataError("instance_pair_mean_score: no distinct pairs");
  return sum / static_cast<double>(n);
}

struct ScoreGroup {
  std::string name;
  std::vector<double> scores;
};

struct KdeCurve {
  std::string group;
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;
  std::size_t samples = 0;
  bool flagged = false;  // fewer than 2 scores, no density

  // Probability mass of the curve above `t` (trapezoid).
  double mass_above(double t) const {
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] >= t) {
        xs.push_back(x[i]);
        ys.push_back(density[i]);
      }
    return trapezoid(xs, ys);
  }
};

inline constexpr std::size_t kKdeGridPoints = 256;

// Gaussian KDE on a [0, 1] grid with reflection at both ends, so the density
// integrates to one on the unit interval. The Scott bandwidth is floored at
// one grid step to keep the trapezoid integral meaningful.
inline KdeCurve unit_interval_kde(const ScoreGroup& group, std::size_t grid = kKdeGridPoints) {
  KdeCurve c;
  c.group = group.name;
  c.samples = group.scores.size();
  c.x = linspace(0.0, 1.0, grid);
  if (group.scores.size() < 2) {
    c.flagged = true;
    warn("kde group '" + group.name + "' has " + std::to_string(group.scores.size()) + " score(s); no density");
    return c;
  }
  const double step = 1.0 / static_cast<double>(grid - 1);
  c.bandwidth = std::max(scott_bandwidth(group.scores), step);
  const double h = c.bandwidth;
  const double norm = 1.0 / (static_cast<double>(group.scores.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  c.density.assign(grid, 0.0);
  parallel_for(grid, [&](std::size_t e) {
    double acc = 0.0;
    for (double s : group.scores) {
      for (double mirror : {s, -s, 2.0 - s}) {
        const double z = (c.x[e] - mirror) / h;
        acc += std::exp(-0.5 * z * z);
      }
    }
    c.density[e] = acc * norm;
  });
  return c;
}

inline std::vector<KdeCurve> same_diff_kde(std::span<const ScoreGroup> groups, std::size_t grid = kKdeGridPoints) {
  std::vector<KdeCurve> out;
  for (const auto& g : groups) out.push_back(unit_interval_kde(g, grid));
  return out;
}

// Score groups for one image: pooled "same" and "different" pairs, "same:<i>"
// within each instance, and "cross:<a>-<b>" for instance pairs of one class.
inline std::vector<ScoreGroup> pair_score_groups(const Tensor& patches, const LabelRaster& raster, const ProbeWeights& pw) {
  const auto labeled = raster.labeled_patches();
  const Tensor x = gather_rows(patches, labeled);
  const auto s = score_matrix(pw, x, x);
  const std::size_t n = labeled.size();
  ScoreGroup same{"same", {}}, diff{"different", {}};
  std::map<int, ScoreGroup> per_instance;
  std::map<std::pair<int, int>, ScoreGroup> cross;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const int a = raster.instance[labeled[i]], b = raster.instance[labeled[j]];
      const double v = s[i * n + j];
      if (a == b) {
        same.scores.push_back(v);
        auto& g = per_instance[a];
        g.name = "same:" + std::to_string(a);
        g.scores.push_back(v);
        continue;
      }
      diff.scores.push_back(v);
      if (raster.cls[labeled[i]] == raster.cls[labeled[j]]) {
        const auto key = std::minmax(a, b);
        auto& g = cross[key];
        g.name = "cross:" + std::to_string(key.first) + "-" + std::to_string(key.second);
        g.scores.push_back(v);
      }
    }
  std::vector<ScoreGroup> out = {same, diff};
  for (auto& [_, g] : per_instance) out.push_back(std::move(g));
  for (auto& [_, g] : cross) out.push_back(std::move(g));
  return out;
}

struct CorrelationResult {
  std::size_t layer = 0;
  std::size_t next_layer = 0;
  double r = 0.0;
  double p_value = 1.0;
  std::size_t n_pairs = 0;
  std::vector<double> distance;  // grid distance per pair, row-major over i != j
};

// Pearson r over ordered off-diagonal patch pairs between attention [N, N]
// and scores [N * N], with a seeded permutation p-value.
inline CorrelationResult attention_score_correlation(const Tensor& attention, std::span<const double> scores, std::size_t side,
                                                     std::size_t n_perm, std::uint64_t seed) {
  const std::size_t n = side * side;
  if (attention.rows() != n || attention.cols() != n || scores.size() != n * n)
    throw DataError("attention_score_correlation: expected " + std::to_string(n) + "x" + std::to_string(n) + " inputs");
  std::vector<double> a, s;
  CorrelationResult out;
  a.reserve(n * (n - 1));
  s.reserve(n * (n - 1));
  out.distance.reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      a.push_back(attention(i, j));
      s.push_back(scores[i * n + j]);
      const double dr = static_cast<double>(i / side) - static_cast<double>(j / side);
      const double dc = static_cast<double>(i % side) - static_cast<double>(j % side);
      out.distance.push_back(std::sqrt(dr * dr + dc * dc));
    }
  out.n_pairs = a.size();
  if (n_perm == 0) {
    out.r = pearson_corr(a, s);
    return out;
  }
  const PermutationResult pr = permutation_test(a, s, n_perm, seed);
  out.r = pr.r;
  out.p_value = pr.p_value;
  return out;
}

// Pairs pooled over images: attention[i] [N, N] against scores[i] [N * N].
inline CorrelationResult pooled_attention_correlation(std::span<const Tensor> attention, std::span<const std::vector<double>> scores,
                                                      std::size_t side, std::size_t n_perm, std::uint64_t seed) {
  if (attention.size() != scores.size() || attention.empty()) throw DataError("pooled_attention_correlation: inputs must pair up");
  const std::size_t n = side * side;
  std::vector<double> a, s;
  for (std::size_t img = 0; img < attention.size(); ++img) {
    if (attention[img].rows() != n || attention[img].cols() != n || scores[img].size() != n * n)
      throw DataError("pooled_attention_correlation: image " + std::to_string(img) + " is not " + std::to_string(n) + "x" + std::to_string(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) {
          a.push_back(attention[img](i, j));
          s.push_back(scores[img][i * n + j]);
        }
  }
  CorrelationResult out;
  out.n_pairs = a.size();
  if (n_perm == 0) {
    out.r = pearson_corr(a, s);
    return out;
  }
  const PermutationResult pr = permutation_test(a, s, n_perm, seed);
  out.r = pr.r;
  out.p_value = pr.p_value;
  return out;
}

// Head-mean attention of block layer+1 against probe scores at `layer`.
inline CorrelationResult attention_binding_correlation(const LayerTrace& trace, const ProbeWeights& pw, std::size_t layer,
                                                       std::size_t n_perm = 999, std::uint64_t seed = 0) {
  if (pw.layer != layer) throw ConfigError("probe was trained on layer " + std::to_string(pw.layer) + ", not layer " + std::to_string(layer));
  if (layer + 1 >= trace.layers.size() || trace.layers[layer + 1].attention_mean.empty())
    throw DataError("trace lacks attention for layer " + std::to_string(layer + 1));
  const Tensor x = trace.patch_embeddings(layer);
  const auto scores = score_matrix(pw, x, x);
  const Tensor& full = trace.layers[layer + 1].attention_mean;
  const std::size_t n = trace.patches(), off = trace.patch_offset();
  Tensor attn = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) attn(i, j) = full(i + off, j + off);
  CorrelationResult out = attention_score_correlation(attn, scores, trace.grid_side, n_perm, derive_seed(seed, "attn-corr"));
  out.layer = layer;
  out.next_layer = layer + 1;
  return out;
}

namespace detail {

inline std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

inline std::string fmt(const char* pattern, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

}  // namespace detail

inline void write_score_map_csv(const std::string& path, const ScoreMap& map) {
  auto out = detail::open_csv(path);
  out << "row,col,score\n";
  for (std::size_t p = 0; p < map.scores.size(); ++p) out << detail::fmt("%zu,%zu,%.6f\n", p / map.side, p % map.side, map.scores[p]);
}

inline void write_kde_csv(const std::string& path, std::span<const KdeCurve> curves) {
  auto out = detail::open_csv(path);
  out << "x,density,group\n";
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.density.size(); ++i) out << detail::fmt("%.6f,%.6f,", c.x[i], c.density[i]) << c.group << '\n';
}

inline void write_pca_csv(const std::string& path, const DeltaPcaResult& r) {
  auto out = detail::open_csv(path);
  out << "sample,tag";
  for (std::size_t c = 0; c < r.coords.cols(); ++c) out << ",pc" << c + 1;
  out << '\n';
  for (std::size_t i = 0; i < r.coords.rows(); ++i) {
    out << i << ',' << r.tags[i];
    for (std::size_t c = 0; c < r.coords.cols(); ++c) out << detail::fmt(",%.6f", r.coords(i, c));
    out << '\n';
  }
}

inline void write_pca_variance_csv(const std::string& path, const DeltaPcaResult& r) {
  auto out = detail::open_csv(path);
  out << "component,variance,ratio\n";
  for (std::size_t c = 0; c < r.pca.explained_variance.size(); ++c)
    out << detail::fmt("%zu,%.6g,%.6f\n", c + 1, r.pca.explained_variance[c], r.pca.explained_ratio[c]);
}

inline void write_correlation_csv(const std::string& path, std::span<const CorrelationResult> rows) {
  auto out = detail::open_csv(path);
  out << "layer,r,p,n_pairs\n";
  for (const auto& c : rows) out << detail::fmt("%zu,%.6f,%.6f,%zu\n", c.layer, c.r, c.p_value, c.n_pairs);
}

}  // namespace vitbind
