#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vitbind/archive.hpp"
#include "vitbind/errors.hpp"
#include "vitbind/linalg.hpp"
#include "vitbind/log.hpp"
#include "vitbind/optim.hpp"
#include "vitbind/parallel.hpp"
#include "vitbind/rng.hpp"
#include "vitbind/supervision.hpp"
#include "vitbind/tensor.hpp"

namespace vitbind {

enum class ProbeFamily { linear, diag, quad, class_pointwise, class_pairwise, cross_layer, position };

inline std::string family_name(ProbeFamily f) {
  switch (f) {
    case ProbeFamily::linear: return "linear";
    case ProbeFamily::diag: return "diag";
    case ProbeFamily::quad: return "quad";
    case ProbeFamily::class_pointwise: return "class_pointwise";
    case ProbeFamily::class_pairwise: return "class_pairwise";
    case ProbeFamily::cross_layer: return "cross_layer";
    case ProbeFamily::position: return "position";
  }
  return "?";
}

inline ProbeFamily parse_family(const std::string& s) {
  for (auto f : {ProbeFamily::linear, ProbeFamily::diag, ProbeFamily::quad, ProbeFamily::class_pointwise,
                 ProbeFamily::class_pairwise, ProbeFamily::cross_layer, ProbeFamily::position})
    if (family_name(f) == s) return f;
  throw ConfigError("unknown probe family '" + s + "'");
}

inline bool is_class_family(ProbeFamily f) { return f == ProbeFamily::class_pointwise || f == ProbeFamily::class_pairwise; }

// Parameters of one probe. Shapes by family:
//   linear [1,d] + bias [1]; diag [d] + bias [1]; quad [k,d] + bias [1];
//   class_* [N,d] + bias [N]; cross_layer W [k,d], w2 [k,d] + bias [1];
//   position [2,d] + bias [2].
struct ProbeWeights {
  ProbeFamily family = ProbeFamily::quad;
  Tensor w;
  Tensor w2;
  Tensor bias;
  std::size_t layer = 0;
  std::size_t layer2 = 0;
  std::vector<int> labels;  // class id per output row of class_pointwise probes

  std::size_t dim() const { return family == ProbeFamily::diag ? w.size() : w.cols(); }

  std::vector<Tensor*> params() {
    if (family == ProbeFamily::cross_layer) return {&w, &w2, &bias};
    return {&w, &bias};
  }
  std::vector<const Tensor*> params() const {
    if (family == ProbeFamily::cross_layer) return {&w, &w2, &bias};
    return {&w, &bias};
  }
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

namespace detail {
inline void require_dim(std::size_t got, std::size_t want, const char* what) {
  if (got != want) throw DataError(std::string(what) + ": dimension " + std::to_string(got) + " does not match " + std::to_string(want));
}
inline double row_dot(const Tensor& w, std::size_t r, std::span<const float> x) {
  double s = 0.0;
  for (std::size_t c = 0; c < x.size(); ++c) s += static_cast<double>(w(r, c)) * x[c];
  return s;
}
inline std::vector<double> project(const Tensor& w, std::span<const float> x) {
  require_dim(x.size(), w.cols(), "probe projection");
  std::vector<double> z(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) z[r] = row_dot(w, r, x);
  return z;
}
inline std::vector<double> class_probs(const Tensor& w, std::span<const float> bias, std::span<const float> x) {
  std::vector<double> l = project(w, x);
  if (!bias.empty())
    for (std::size_t i = 0; i < l.size(); ++i) l[i] += bias[i];
  return softmax(l);
}
}  // namespace detail

inline double score_linear(std::span<const float> x, std::span<const float> y, const Tensor& w, double bias) {
  detail::require_dim(y.size(), x.size(), "score_linear");
  return sigmoid(detail::row_dot(w, 0, x) + detail::row_dot(w, 0, y) + bias);
}

inline double score_diag(std::span<const float> x, std::span<const float> y, const Tensor& w, double bias) {
  detail::require_dim(x.size(), w.size(), "score_diag");
  detail::require_dim(y.size(), w.size(), "score_diag");
  double s = bias;
  for (std::size_t c = 0; c < w.size(); ++c) s += static_cast<double>(w[c]) * x[c] * y[c];
  return sigmoid(s);
}

inline double score_quad(std::span<const float> x, std::span<const float> y, const Tensor& w, double bias) {
  const auto zx = detail::project(w, x), zy = detail::project(w, y);
  double s = bias;
  for (std::size_t r = 0; r < zx.size(); ++r) s += zx[r] * zy[r];
  return sigmoid(s);
}

inline double score_class(std::span<const float> x, std::span<const float> y, const Tensor& w,
                          std::span<const float> class_bias = {}) {
  const auto p = detail::class_probs(w, class_bias, x), q = detail::class_probs(w, class_bias, y);
  double s = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) s += p[c] * q[c];
  return s;
}

inline double score_cross_layer(std::span<const float> x, std::span<const float> y, const Tensor& w1, const Tensor& w2,
                                double bias) {
  const auto zx = detail::project(w1, x), zy = detail::project(w2, y);
  double s = bias;
  for (std::size_t r = 0; r < zx.size(); ++r) s += zx[r] * zy[r];
  return sigmoid(s);
}

inline double pair_score(const ProbeWeights& pw, std::span<const float> x, std::span<const float> y) {
  switch (pw.family) {
    case ProbeFamily::linear: return score_linear(x, y, pw.w, pw.bias[0]);
    case ProbeFamily::diag: return score_diag(x, y, pw.w, pw.bias[0]);
    case ProbeFamily::quad: return score_quad(x, y, pw.w, pw.bias[0]);
    case ProbeFamily::class_pointwise:
    case ProbeFamily::class_pairwise: return score_class(x, y, pw.w, pw.bias.data());
    case ProbeFamily::cross_layer: return score_cross_layer(x, y, pw.w, pw.w2, pw.bias[0]);
    case ProbeFamily::position: break;
  }
  throw ConfigError("position probes do not score pairs");
}

// Scores for every (i, j) over rows of xs (left) and ys (right), [n, m].
// Equal to pair_score element-wise, computed through projections.
inline std::vector<double> score_matrix(const ProbeWeights& pw, const Tensor& xs, const Tensor& ys) {
  const std::size_t n = xs.rows(), m = ys.rows();
  std::vector<double> out(n * m);
  auto projections = [&](const Tensor& w, const Tensor& rows, bool probs) {
    std::vector<std::vector<double>> z(rows.rows());
    parallel_for(rows.rows(), [&](std::size_t i) {
      z[i] = probs ? detail::class_probs(w, pw.bias.data(), rows.row(i)) : detail::project(w, rows.row(i));
    });
    return z;
  };
  if (pw.family == ProbeFamily::diag) {
    parallel_for(n, [&](std::size_t i) {
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] = score_diag(xs.row(i), ys.row(j), pw.w, pw.bias[0]);
    });
    return out;
  }
  if (pw.family == ProbeFamily::position) throw ConfigError("position probes do not score pairs");
  const bool cls = is_class_family(pw.family);
  const Tensor& wy = pw.family == ProbeFamily::cross_layer ? pw.w2 : pw.w;
  const auto zx = projections(pw.w, xs, cls);
  const auto zy = &xs == &ys && pw.family != ProbeFamily::cross_layer ? zx : projections(wy, ys, cls);
  parallel_for(n, [&](std::size_t i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (pw.family == ProbeFamily::linear) {
        out[i * m + j] = sigmoid(zx[i][0] + zy[j][0] + pw.bias[0]);
        continue;
      }
      double s = 0.0;
      for (std::size_t r = 0; r < zx[i].size(); ++r) s += zx[i][r] * zy[j][r];
      out[i * m + j] = cls ? s : sigmoid(s + pw.bias[0]);
    }
  });
  return out;
}

// Activations of one layer, one [patches, d] tensor per image.
struct ActivationSet {
  std::size_t layer = 0;
  std::vector<Tensor> images;

  std::size_t dim() const { return images.empty() ? 0 : images.front().cols(); }
};

struct TrainRecipe {
  double lr = 1e-3;
  std::size_t epochs = 16;
  std::size_t batch_images = 256;
  StepSchedule schedule{8, 0.2};
  std::uint64_t seed = 0;
  std::size_t k = 64;
  std::size_t class_slots = 0;  // 0: number of classes seen in training data
  double init_scale = 0.1;
  double holdout_fraction = 0.1;

  void validate() const {
    if (!(lr > 0) || epochs == 0 || batch_images == 0 || k == 0) throw ConfigError("train recipe values must be positive");
    if (!(schedule.gamma >= 0 && schedule.gamma <= 1)) throw ConfigError("train recipe gamma must lie in [0, 1]");
    if (!(holdout_fraction >= 0 && holdout_fraction < 1)) throw ConfigError("holdout_fraction must lie in [0, 1)");
  }
};

// Recipe for the planted synthetic suite: rank k_true, small init, and a
// longer schedule than the default recipe.
inline TrainRecipe planted_recipe(std::size_t k = 8, std::uint64_t seed = 3) {
  TrainRecipe r;
  r.lr = 0.02;
  r.epochs = 48;
  r.batch_images = 8;
  r.schedule = {24, 0.2};
  r.seed = seed;
  r.k = k;
  r.init_scale = 0.01;
  return r;
}

// Seeded by-image split; `held_out` is never empty when there are two or more
// images and the fraction is positive.
struct Split {
  std::vector<std::size_t> train, held_out;
};

inline Split split_by_image(std::size_t n, double holdout_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);
  std::size_t h = static_cast<std::size_t>(std::ceil(holdout_fraction * static_cast<double>(n)));
  if (n < 2) h = 0;
  h = std::min(h, n > 0 ? n - 1 : 0);
  Split s;
  s.held_out.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(h));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(h), order.end());
  std::sort(s.held_out.begin(), s.held_out.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

// Loss sums and gradients (double) for the parameter list of a probe.
struct ProbeGrads {
  std::vector<std::vector<double>> g;
  double loss = 0.0;
  std::size_t count = 0;

  explicit ProbeGrads(const ProbeWeights& pw) {
    for (const Tensor* t : pw.params()) g.emplace_back(t->size(), 0.0);
  }
  void add(const ProbeGrads& o) {
    for (std::size_t p = 0; p < g.size(); ++p)
      for (std::size_t i = 0; i < g[p].size(); ++i) g[p][i] += o.g[p][i];
    loss += o.loss;
    count += o.count;
  }
};

namespace detail {

inline std::vector<std::vector<double>> gather(const Tensor& acts, std::span<const std::size_t> patches) {
  std::vector<std::vector<double>> x(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i] >= acts.rows()) throw DataError("activation set lacks patch " + std::to_string(patches[i]));
    auto r = acts.row(patches[i]);
    x[i].assign(r.begin(), r.end());
  }
  return x;
}

inline std::vector<std::vector<double>> project_rows(const Tensor& w, const std::vector<std::vector<double>>& x) {
  std::vector<std::vector<double>> z(x.size(), std::vector<double>(w.rows()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    require_dim(x[i].size(), w.cols(), "probe input");
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < w.cols(); ++c) s += static_cast<double>(w(r, c)) * x[i][c];
      z[i][r] = s;
    }
  }
  return z;
}

inline void outer_accumulate(std::vector<double>& grad, std::size_t cols, std::span<const double> u, std::span<const double> x) {
  for (std::size_t r = 0; r < u.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) grad[r * cols + c] += u[r] * x[c];
}

}  // namespace detail

// Pair indices supervised in one batch: the strict upper triangle, or every
// ordered off-diagonal pair for the asymmetric cross-layer probe.
inline bool supervised(ProbeFamily f, std::size_t i, std::size_t j) {
  return f == ProbeFamily::cross_layer ? i != j : i < j;
}

// Sum of pairwise binary cross-entropy over one batch, with gradients when
// `grads` is non-null.
inline void pair_batch_loss(const ProbeWeights& pw, const PairBatch& b, const Tensor& acts, const Tensor* acts2,
                            ProbeGrads* grads, double* loss_sum, std::size_t* pair_count) {
  const std::size_t n = b.size();
  const auto x = detail::gather(acts, b.patches);
  const auto y = pw.family == ProbeFamily::cross_layer ? detail::gather(acts2 ? *acts2 : acts, b.patches) : x;
  const std::size_t d = x.empty() ? 0 : x[0].size();
  std::vector<double> G(n * n, 0.0);  // dL/dlogit (or dL/ds for class families)
  double loss = 0.0;
  std::size_t count = 0;

  auto bce_logit = [&](double logit, bool t, std::size_t i, std::size_t j) {
    loss += softplus(logit) - (t ? logit : 0.0);
    G[i * n + j] = sigmoid(logit) - (t ? 1.0 : 0.0);
    ++count;
  };

  switch (pw.family) {
    case ProbeFamily::linear: {
      const auto a = detail::project_rows(pw.w, x);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) bce_logit(a[i][0] + a[j][0] + pw.bias[0], b.same_object(i, j), i, j);
      if (grads) {
        for (std::size_t i = 0; i < n; ++i) {
          double gi = 0.0;
          for (std::size_t j = 0; j < n; ++j) gi += i < j ? G[i * n + j] : G[j * n + i];
          for (std::size_t c = 0; c < d; ++c) grads->g[0][c] += gi * x[i][c];
        }
      }
      break;
    }
    case ProbeFamily::diag: {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
          double s = pw.bias[0];
          for (std::size_t c = 0; c < d; ++c) s += static_cast<double>(pw.w[c]) * x[i][c] * x[j][c];
          bce_logit(s, b.same_object(i, j), i, j);
        }
      if (grads)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = i + 1; j < n; ++j)
            for (std::size_t c = 0; c < d; ++c) grads->g[0][c] += G[i * n + j] * x[i][c] * x[j][c];
      break;
    }
    case ProbeFamily::quad:
    case ProbeFamily::cross_layer: {
      const bool cross = pw.family == ProbeFamily::cross_layer;
      const auto z = detail::project_rows(pw.w, x);
      const auto v = cross ? detail::project_rows(pw.w2, y) : z;
      const std::size_t k = pw.w.rows();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (!supervised(pw.family, i, j)) continue;
          double s = pw.bias[0];
          for (std::size_t r = 0; r < k; ++r) s += z[i][r] * v[j][r];
          bce_logit(s, b.same_object(i, j), i, j);
        }
      if (grads) {
        if (!cross)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) G[j * n + i] = G[i * n + j];
        // dW1 = sum_i (G v)_i x_i^T ; dW2 = sum_j (G^T z)_j y_j^T ; quad sums both onto W.
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<double> u(k, 0.0);
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t r = 0; r < k; ++r) u[r] += G[i * n + j] * v[j][r];
          detail::outer_accumulate(grads->g[0], d, u, x[i]);
          if (cross) {
            std::vector<double> u2(k, 0.0);
            for (std::size_t j = 0; j < n; ++j)
              for (std::size_t r = 0; r < k; ++r) u2[r] += G[j * n + i] * z[j][r];
            detail::outer_accumulate(grads->g[1], d, u2, y[i]);
          }
        }
      }
      break;
    }
    case ProbeFamily::class_pointwise:
    case ProbeFamily::class_pairwise: {
      std::vector<std::vector<double>> p(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<float> xi(x[i].begin(), x[i].end());
        p[i] = detail::class_probs(pw.w, pw.bias.data(), xi);
      }
      const std::size_t nc = pw.w.rows();
      std::vector<double> S(n * n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < nc; ++c) s += p[i][c] * p[j][c];
          s = std::clamp(s, 1e-15, 1.0 - 1e-15);
          const bool t = b.same_object(i, j);
          loss += t ? -std::log(s) : -std::log1p(-s);
          G[i * n + j] = G[j * n + i] = t ? -1.0 / s : 1.0 / (1.0 - s);
          S[i * n + j] = S[j * n + i] = s;
          ++count;
        }
      if (grads) {
        // ds_ij/dl_i = p_i * (p_j - s_ij)
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<double> dl(nc, 0.0);
          for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double gij = G[i * n + j];
            for (std::size_t c = 0; c < nc; ++c) dl[c] += gij * p[i][c] * (p[j][c] - S[i * n + j]);
          }
          detail::outer_accumulate(grads->g[0], d, dl, x[i]);
          for (std::size_t c = 0; c < nc; ++c) grads->g[1][c] += dl[c];
        }
      }
      break;
    }
    case ProbeFamily::position: throw ConfigError("position probes have no pair loss");
  }
  if (grads && !is_class_family(pw.family)) {
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (supervised(pw.family, i, j)) gb += G[i * n + j];
    grads->g.back()[0] += gb;
  }
  if (grads) {
    grads->loss += loss;
    grads->count += count;
  }
  if (loss_sum) *loss_sum += loss;
  if (pair_count) *pair_count += count;
}

// Mean pair loss over `batches` and its gradient.
inline ProbeGrads pair_loss_and_grad(const ProbeWeights& pw, std::span<const PairBatch> batches, const ActivationSet& acts,
                                     const ActivationSet* acts2 = nullptr) {
  std::vector<ProbeGrads> per(batches.size(), ProbeGrads(pw));
  parallel_for(batches.size(), [&](std::size_t i) {
    const auto& b = batches[i];
    pair_batch_loss(pw, b, acts.images.at(b.image_index), acts2 ? &acts2->images.at(b.image_index) : nullptr, &per[i],
                    nullptr, nullptr);
  });
  ProbeGrads total(pw);
  for (const auto& g : per) total.add(g);
  if (total.count > 0) {
    const double inv = 1.0 / static_cast<double>(total.count);
    for (auto& g : total.g)
      for (auto& v : g) v *= inv;
    total.loss *= inv;
  }
  return total;
}

inline ProbeWeights init_probe(ProbeFamily family, std::size_t d, const TrainRecipe& recipe, std::size_t slots, Rng& rng) {
  ProbeWeights pw;
  pw.family = family;
  const double s = recipe.init_scale / std::sqrt(static_cast<double>(d));
  auto randn = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<float>(rng.normal() * s);
    return t;
  };
  switch (family) {
    case ProbeFamily::linear: pw.w = randn({1, d}); break;
    case ProbeFamily::diag: pw.w = randn({d}); break;
    case ProbeFamily::quad: pw.w = randn({recipe.k, d}); break;
    case ProbeFamily::cross_layer:
      pw.w = randn({recipe.k, d});
      pw.w2 = randn({recipe.k, d});
      break;
    case ProbeFamily::class_pointwise:
    case ProbeFamily::class_pairwise:
      pw.w = randn({slots, d});
      pw.bias = Tensor(Shape{slots}, 0.0f);
      return pw;
    case ProbeFamily::position:
      pw.w = Tensor::matrix(2, d);
      pw.bias = Tensor(Shape{2}, 0.0f);
      return pw;
  }
  pw.bias = Tensor(Shape{1}, 0.0f);
  return pw;
}

struct ProbeEvaluation {
  double accuracy = 0.0;
  double baseline = 0.0;
  double delta_pp = 0.0;
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t pairs() const { return tp + tn + fp + fn; }
};

inline ProbeEvaluation evaluate_probe(const ProbeWeights& pw, std::span<const PairBatch> batches, const ActivationSet& acts,
                                      const ActivationSet* acts2 = nullptr, double threshold = 0.5) {
  std::vector<ProbeEvaluation> per(batches.size());
  parallel_for(batches.size(), [&](std::size_t bi) {
    const PairBatch& b = batches[bi];
    const Tensor& xa = acts.images.at(b.image_index);
    const Tensor xs = gather_rows(xa, b.patches);
    const Tensor ys = pw.family == ProbeFamily::cross_layer ? gather_rows((acts2 ? *acts2 : acts).images.at(b.image_index), b.patches) : xs;
    const auto scores = score_matrix(pw, xs, pw.family == ProbeFamily::cross_layer ? ys : xs);
    ProbeEvaluation& e = per[bi];
    const std::size_t n = b.size();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (!supervised(pw.family, i, j)) continue;
        const bool pred = scores[i * n + j] > threshold, t = b.same_object(i, j);
        (pred ? (t ? e.tp : e.fp) : (t ? e.fn : e.tn))++;
      }
  });
  ProbeEvaluation out;
  for (const auto& e : per) {
    out.tp += e.tp;
    out.tn += e.tn;
    out.fp += e.fp;
    out.fn += e.fn;
  }
  if (out.pairs() == 0) throw DataError("evaluate_probe: no supervised pairs");
  out.accuracy = static_cast<double>(out.tp + out.tn) / static_cast<double>(out.pairs());
  out.baseline = static_cast<double>(out.tn + out.fp) / static_cast<double>(out.pairs());
  out.delta_pp = 100.0 * (out.accuracy - out.baseline);
  return out;
}

struct ProbeTrainResult {
  ProbeWeights weights;
  ProbeEvaluation held_out;
  ProbeEvaluation train;
  std::vector<double> epoch_loss;
};

namespace detail {

inline std::vector<PairBatch> pick(std::span<const PairBatch> batches, std::span<const std::size_t> idx) {
  std::vector<PairBatch> out;
  for (std::size_t i : idx) out.push_back(batches[i]);
  return out;
}

inline std::size_t count_classes(std::span<const PairBatch> batches) {
  std::vector<int> seen;
  for (const auto& b : batches)
    for (int c : b.cls)
      if (std::find(seen.begin(), seen.end(), c) == seen.end()) seen.push_back(c);
  return seen.size();
}

// Adam over the probe's parameter list. Batches are visited in a seeded order
// per epoch and gradients are reduced in batch order, so results do not depend
// on the thread count.
template <class GradFn>
std::vector<double> run_adam(ProbeWeights& pw, std::span<const std::size_t> train_idx, const TrainRecipe& recipe,
                             const GradFn& grad_fn) {
  std::vector<AdamState> states;
  for (Tensor* t : pw.params()) states.emplace_back(t->shape(), recipe.lr, recipe.schedule);
  Rng rng(derive_seed(recipe.seed, "minibatch"));
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += recipe.batch_images) {
      const std::size_t end = std::min(order.size(), start + recipe.batch_images);
      const ProbeGrads g = grad_fn(std::span<const std::size_t>(order.data() + start, end - start));
      if (!std::isfinite(g.loss)) {
        throw NumericError(family_name(pw.family) + " probe: non-finite loss at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(steps) + " (lr " + std::to_string(states[0].lr) + ")");
      }
      epoch_loss += g.loss;
      ++steps;
      auto params = pw.params();
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor grad(params[p]->shape());
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = static_cast<float>(g.g[p][i]);
        const StepOutcome o = adam_step(*params[p], grad, states[p]);
        if (!o.applied) warn(family_name(pw.family) + " probe: " + o.diagnostic);
      }
    }
    for (auto& s : states) s.end_epoch(epoch + 1);
    history.push_back(steps ? epoch_loss / static_cast<double>(steps) : 0.0);
  }
  return history;
}

}  // namespace detail

// Trains a pairwise probe (linear, diag, quad, class_pairwise, cross_layer)
// with binary cross-entropy on supervised pairs. `acts2` supplies the second
// layer for cross_layer probes.
inline ProbeTrainResult train_pair_probe(ProbeFamily family, std::span<const PairBatch> batches, const ActivationSet& acts,
                                         const TrainRecipe& recipe, const ActivationSet* acts2 = nullptr) {
  recipe.validate();
  if (family == ProbeFamily::class_pointwise || family == ProbeFamily::position)
    throw ConfigError(family_name(family) + " is not a pairwise-trained family");
  if (family == ProbeFamily::cross_layer && !acts2) throw ConfigError("cross_layer probes need a second activation set");
  if (batches.empty()) throw DataError("train_pair_probe: no pair batches");
  const std::size_t d = acts.dim();
  if (acts2) detail::require_dim(acts2->dim(), d, "second activation set");

  const Split split = split_by_image(batches.size(), recipe.holdout_fraction, recipe.seed);
  const auto train = detail::pick(batches, split.train);
  const auto held = split.held_out.empty() ? train : detail::pick(batches, split.held_out);
  std::size_t positives = 0;
  for (const auto& b : train) positives += b.positive_pairs();
  if (positives == 0) warn(family_name(family) + " probe: training pairs contain no positives");

  const std::size_t slots = recipe.class_slots ? recipe.class_slots : std::max<std::size_t>(2, detail::count_classes(train));
  Rng rng(derive_seed(recipe.seed, "init/" + family_name(family)));
  ProbeTrainResult res;
  res.weights = init_probe(family, d, recipe, slots, rng);
  res.weights.layer = acts.layer;
  res.weights.layer2 = acts2 ? acts2->layer : acts.layer;
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);
  res.epoch_loss = detail::run_adam(res.weights, all, recipe, [&](std::span<const std::size_t> idx) {
    return pair_loss_and_grad(res.weights, detail::pick(train, idx), acts, acts2);
  });
  res.train = evaluate_probe(res.weights, train, acts, acts2);
  res.held_out = evaluate_probe(res.weights, held, acts, acts2);
  return res;
}

enum class LabelKind { cls, identity };

// Per-patch labels of a batch in probe row space. Class labels map through
// `labels` (class id per row); identity labels are per-image instance ranks.
inline std::vector<std::size_t> patch_targets(const PairBatch& b, LabelKind kind, const std::vector<int>& labels) {
  std::vector<std::size_t> t(b.size());
  if (kind == LabelKind::identity) {
    std::vector<int> ids = b.instance;
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (std::size_t i = 0; i < b.size(); ++i)
      t[i] = static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), b.instance[i]) - ids.begin());
    return t;
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    auto it = std::find(labels.begin(), labels.end(), b.cls[i]);
    t[i] = it == labels.end() ? labels.size() : static_cast<std::size_t>(it - labels.begin());
  }
  return t;
}

// Softmax cross-entropy summed over samples, with gradient.
inline double softmax_ce(const Tensor& w, const Tensor& bias, std::span<const std::vector<double>> x,
                         std::span<const std::size_t> targets, std::vector<double>* gw, std::vector<double>* gb) {
  const std::size_t nc = w.rows(), d = w.cols();
  double loss = 0.0;
  std::vector<double> l(nc);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (targets[i] >= nc) continue;
    for (std::size_t c = 0; c < nc; ++c) {
      double s = bias[c];
      for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(w(c, j)) * x[i][j];
      l[c] = s;
    }
    const auto p = softmax(l);
    loss -= std::log(std::max(p[targets[i]], 1e-300));
    if (gw) {
      for (std::size_t c = 0; c < nc; ++c) {
        const double g = p[c] - (c == targets[i] ? 1.0 : 0.0);
        for (std::size_t j = 0; j < d; ++j) (*gw)[c * d + j] += g * x[i][j];
        (*gb)[c] += g;
      }
    }
  }
  return loss;
}

struct PointwiseResult {
  ProbeWeights weights;
  double patch_accuracy = 0.0;  // held-out
  ProbeEvaluation pairwise;     // held-out pairs scored with p.q
};

inline PointwiseResult train_pointwise_class_probe(std::span<const PairBatch> batches, const ActivationSet& acts,
                                                   const TrainRecipe& recipe, LabelKind kind = LabelKind::cls) {
  recipe.validate();
  if (batches.empty()) throw DataError("train_pointwise_class_probe: no batches");
  const Split split = split_by_image(batches.size(), recipe.holdout_fraction, recipe.seed);
  const auto train = detail::pick(batches, split.train);
  const auto held = split.held_out.empty() ? train : detail::pick(batches, split.held_out);

  std::vector<int> labels;
  std::size_t slots = 0;
  if (kind == LabelKind::cls) {
    for (const auto& b : train)
      for (int c : b.cls)
        if (std::find(labels.begin(), labels.end(), c) == labels.end()) labels.push_back(c);
    std::sort(labels.begin(), labels.end());
    slots = labels.size();
  } else {
    for (const auto& b : train) slots = std::max(slots, b.instance_ids_count());
  }
  if (slots < 2) warn("pointwise class probe: training data has a single class");
  slots = std::max<std::size_t>(slots, 2);

  Rng rng(derive_seed(recipe.seed, "init/class_pointwise"));
  PointwiseResult res;
  res.weights = init_probe(ProbeFamily::class_pointwise, acts.dim(), recipe, slots, rng);
  res.weights.layer = res.weights.layer2 = acts.layer;
  res.weights.labels = labels;
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);
  ProbeWeights& pw = res.weights;
  detail::run_adam(pw, all, recipe, [&](std::span<const std::size_t> idx) {
    std::vector<ProbeGrads> per(idx.size(), ProbeGrads(pw));
    parallel_for(idx.size(), [&](std::size_t q) {
      const PairBatch& b = train[idx[q]];
      const auto x = detail::gather(acts.images.at(b.image_index), b.patches);
      const auto t = patch_targets(b, kind, labels);
      per[q].loss = softmax_ce(pw.w, pw.bias, x, t, &per[q].g[0], &per[q].g[1]);
      per[q].count = b.size();
    });
    ProbeGrads total(pw);
    for (const auto& g : per) total.add(g);
    const double inv = total.count ? 1.0 / static_cast<double>(total.count) : 0.0;
    for (auto& g : total.g)
      for (auto& v : g) v *= inv;
    total.loss *= inv;
    return total;
  });

  std::size_t correct = 0, total = 0;
  for (const auto& b : held) {
    const auto t = patch_targets(b, kind, labels);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto p = detail::class_probs(pw.w, pw.bias.data(), acts.images.at(b.image_index).row(b.patches[i]));
      const auto arg = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
      correct += arg == t[i];
      ++total;
    }
  }
  res.patch_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  res.pairwise = evaluate_probe(pw, held, acts);
  return res;
}

struct PositionResult {
  ProbeWeights weights;
  double rmse = 0.0;  // both axes pooled
  double rmse_x = 0.0;
  double rmse_y = 0.0;
};

// Normalized patch-centre coordinates ((col + 0.5) / side, (row + 0.5) / side).
inline std::pair<double, double> patch_coords(std::size_t p, std::size_t side) {
  return {(static_cast<double>(p % side) + 0.5) / static_cast<double>(side),
          (static_cast<double>(p / side) + 0.5) / static_cast<double>(side)};
}

// Ridge regression (lambda 1e-6, bias unpenalised) from patch embeddings to
// grid coordinates. With `permute_pairing`, coordinates are shuffled across
// patches within each image as a control.
inline PositionResult train_position_probe(const ActivationSet& acts, std::size_t side, const TrainRecipe& recipe,
                                           bool permute_pairing = false, double ridge = 1e-6) {
  if (acts.images.empty()) throw DataError("train_position_probe: no images");
  const std::size_t d = acts.dim(), n_img = acts.images.size();
  const Split split = split_by_image(n_img, recipe.holdout_fraction, recipe.seed);
  const auto& eval_idx = split.held_out.empty() ? split.train : split.held_out;
  Rng rng(derive_seed(recipe.seed, "position/permute"));
  std::vector<std::vector<std::size_t>> target_of(n_img);
  for (std::size_t i = 0; i < n_img; ++i) {
    if (acts.images[i].rows() != side * side)
      throw DataError("image " + std::to_string(i) + " has " + std::to_string(acts.images[i].rows()) +
                      " patch rows, expected " + std::to_string(side * side));
    target_of[i].resize(side * side);
    std::iota(target_of[i].begin(), target_of[i].end(), 0);
    if (permute_pairing) rng.shuffle(target_of[i]);
  }

  const std::size_t m = d + 1;
  SquareMatrix xtx(m);
  std::vector<double> xty(2 * m, 0.0);
  for (std::size_t i : split.train) {
    const Tensor& a = acts.images[i];
    for (std::size_t p = 0; p < a.rows(); ++p) {
      auto row = a.row(p);
      const auto [cx, cy] = patch_coords(target_of[i][p], side);
      for (std::size_t r = 0; r < m; ++r) {
        const double xr = r < d ? row[r] : 1.0;
        xty[r] += xr * cx;
        xty[m + r] += xr * cy;
        for (std::size_t c = r; c < m; ++c) xtx(r, c) += xr * (c < d ? row[c] : 1.0);
      }
    }
  }
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < r; ++c) xtx(r, c) = xtx(c, r);
    if (r < d) xtx(r, r) += ridge;
  }
  const SquareMatrix l = cholesky(xtx);
  const auto bx = cholesky_solve(l, std::span<const double>(xty.data(), m));
  const auto by = cholesky_solve(l, std::span<const double>(xty.data() + m, m));

  PositionResult res;
  res.weights.family = ProbeFamily::position;
  res.weights.layer = res.weights.layer2 = acts.layer;
  res.weights.w = Tensor::matrix(2, d);
  res.weights.bias = Tensor(Shape{2}, {static_cast<float>(bx[d]), static_cast<float>(by[d])});
  for (std::size_t c = 0; c < d; ++c) {
    res.weights.w(0, c) = static_cast<float>(bx[c]);
    res.weights.w(1, c) = static_cast<float>(by[c]);
  }
  double sx = 0.0, sy = 0.0;
  std::size_t count = 0;
  for (std::size_t i : eval_idx) {
    const Tensor& a = acts.images[i];
    for (std::size_t p = 0; p < a.rows(); ++p) {
      auto row = a.row(p);
      double px = bx[d], py = by[d];
      for (std::size_t c = 0; c < d; ++c) {
        px += bx[c] * row[c];
        py += by[c] * row[c];
      }
      const auto [cx, cy] = patch_coords(target_of[i][p], side);
      sx += (px - cx) * (px - cx);
      sy += (py - cy) * (py - cy);
      ++count;
    }
  }
  res.rmse_x = std::sqrt(sx / static_cast<double>(count));
  res.rmse_y = std::sqrt(sy / static_cast<double>(count));
  res.rmse = std::sqrt((sx + sy) / (2.0 * static_cast<double>(count)));
  return res;
}

struct LayerPoint {
  std::size_t layer = 0;
  double accuracy = 0.0;
  double baseline = 0.0;
};

struct LayerAccuracyCurve {
  std::vector<LayerPoint> points;
  std::size_t peak_layer = 0;
  double peak_normalized = 0.0;  // peak_layer / (depth - 1)
};

inline LayerAccuracyCurve make_curve(std::vector<LayerPoint> points, std::size_t depth) {
  if (points.empty()) throw DataError("layer sweep produced no points");
  for (const auto& p : points)
    if (p.layer >= depth) throw ConfigError("layer " + std::to_string(p.layer) + " is outside depth " + std::to_string(depth));
  LayerAccuracyCurve c;
  c.points = std::move(points);
  const auto best = std::max_element(c.points.begin(), c.points.end(),
                                     [](const LayerPoint& a, const LayerPoint& b) { return a.accuracy < b.accuracy; });
  c.peak_layer = best->layer;
  c.peak_normalized = depth > 1 ? static_cast<double>(c.peak_layer) / static_cast<double>(depth - 1) : 0.0;
  return c;
}

inline LayerAccuracyCurve probe_sweep(ProbeFamily family, std::span<const PairBatch> batches,
                                      std::span<const ActivationSet> layers, std::size_t depth, const TrainRecipe& recipe,
                                      std::vector<ProbeWeights>* trained = nullptr) {
  std::vector<LayerPoint> points;
  for (const auto& acts : layers) {
    ProbeTrainResult r = train_pair_probe(family, batches, acts, recipe);
    points.push_back({acts.layer, r.held_out.accuracy, r.held_out.baseline});
    if (trained) trained->push_back(std::move(r.weights));
  }
  return make_curve(std::move(points), depth);
}

inline void write_curve_csv(const std::string& path, const LayerAccuracyCurve& curve) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "layer,accuracy,baseline,delta_pp\n";
  char buf[160];
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.4f\n", p.layer, p.accuracy, p.baseline, 100.0 * (p.accuracy - p.baseline));
    out << buf;
  }
}

inline ArchiveWriter probe_to_archive(const ProbeWeights& pw) {
  ArchiveWriter w;
  w.metadata() = {{"kind", "probe"}, {"family", family_name(pw.family)}, {"layer", pw.layer}, {"layer2", pw.layer2},
                  {"labels", pw.labels}};
  w.add("W", pw.w);
  if (pw.family == ProbeFamily::cross_layer) w.add("W2", pw.w2);
  w.add("bias", pw.bias);
  return w;
}

inline ProbeWeights probe_from_archive(const TensorArchive& ar) {
  const auto& m = ar.metadata();
  if (m.value("kind", std::string()) != "probe") throw DataError(ar.path() + " is not a probe archive");
  ProbeWeights pw;
  pw.family = parse_family(m.at("family").get<std::string>());
  pw.layer = m.at("layer").get<std::size_t>();
  pw.layer2 = m.value("layer2", pw.layer);
  pw.labels = m.value("labels", std::vector<int>{});
  pw.w = ar.tensor("W");
  if (pw.family == ProbeFamily::cross_layer) pw.w2 = ar.tensor("W2");
  pw.bias = ar.tensor("bias");
  return pw;
}

inline ProbeWeights load_probe(const std::string& path) { return probe_from_archive(TensorArchive::read(path)); }

}  // namespace vitbind
