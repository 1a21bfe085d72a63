#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "vitbind/analysis.hpp"
#include "vitbind/hungarian.hpp"
#include "vitbind/labels.hpp"
#include "vitbind/linalg.hpp"
#include "vitbind/log.hpp"
#include "vitbind/optim.hpp"
#include "vitbind/probes.hpp"
#include "vitbind/vit.hpp"

namespace vitbind {

enum class AblationMode { none, uninformed, informed };

inline std::string mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::none: return "none";
    case AblationMode::uninformed: return "uninformed";
    case AblationMode::informed: return "informed";
  }
  return "?";
}

inline AblationMode parse_mode(const std::string& s) {
  if (s == "none") return AblationMode::none;
  if (s == "uninformed") return AblationMode::uninformed;
  if (s == "informed") return AblationMode::informed;
  throw ConfigError("unknown ablation mode '" + s + "' (expected none, uninformed, or informed)");
}

struct AblationConfig {
  std::size_t layer = 18;
  AblationMode mode = AblationMode::uninformed;
  double ratio = 0.0;  // uninformed
  double alpha = 1.0;  // informed
  std::uint64_t seed = 0;

  void validate() const {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("shuffle ratio " + std::to_string(ratio) + " is outside [0, 1]");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("injection alpha " + std::to_string(alpha) + " is outside [0, 1]");
  }

  // The meaningful parameter for the mode: ratio, alpha, or 0.
  double parameter() const {
    if (mode == AblationMode::uninformed) return ratio;
    if (mode == AblationMode::informed) return alpha;
    return 0.0;
  }
};

// Binding-space edit for the patch rows of one image: delta [N, d] to add to
// h, or an empty tensor when the edit is the identity.
struct BindingEdit {
  Tensor delta;
  std::vector<std::size_t> chosen;       // uninformed: selected patches
  std::vector<std::size_t> permutation;  // uninformed: chosen[i] takes b of chosen[permutation[i]]
};

// Sattolo's algorithm: a uniformly random cyclic permutation, hence a
// derangement for n >= 2.
inline std::vector<std::size_t> random_derangement(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t i = n; i-- > 1;) std::swap(p[i], p[rng.index(i)]);
  return p;
}

inline BindingEdit shuffle_edit(const Tensor& patches, const Tensor& w, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("shuffle ratio " + std::to_string(ratio) + " is outside [0, 1]");
  const std::size_t n = patches.rows();
  const auto m = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
  BindingEdit edit;
  if (m < 2) return edit;
  Rng rng(seed);
  edit.chosen = rng.sample_without_replacement(n, m);
  edit.permutation = random_derangement(m, rng);
  const PseudoInverseLift lift(w);
  std::vector<std::vector<float>> b(m);
  for (std::size_t i = 0; i < m; ++i) b[i] = matvec(w, patches.row(edit.chosen[i]));
  edit.delta = Tensor::matrix(n, patches.cols());
  parallel_for(m, [&](std::size_t i) {
    std::vector<float> diff(w.rows());
    for (std::size_t r = 0; r < diff.size(); ++r) diff[r] = b[edit.permutation[i]][r] - b[i][r];
    const auto up = lift.lift(diff);
    std::copy(up.begin(), up.end(), edit.delta.row(edit.chosen[i]).begin());
  });
  return edit;
}

inline BindingEdit inject_edit(const Tensor& patches, const Tensor& w, const LabelRaster& raster, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("injection alpha " + std::to_string(alpha) + " is outside [0, 1]");
  if (raster.patches() != patches.rows())
    throw DataError("informed injection: raster '" + raster.image_id + "' has " + std::to_string(raster.patches()) +
                    " patches, embeddings have " + std::to_string(patches.rows()));
  BindingEdit edit;
  if (alpha == 1.0) return edit;
  const std::size_t k = w.rows();
  std::map<int, std::pair<std::vector<double>, std::size_t>> mean;
  std::vector<std::vector<float>> b(patches.rows());
  for (std::size_t p = 0; p < patches.rows(); ++p) {
    if (!raster.labeled(p)) continue;
    b[p] = matvec(w, patches.row(p));
    auto& [sum, count] = mean[raster.instance[p]];
    sum.resize(k, 0.0);
    for (std::size_t r = 0; r < k; ++r) sum[r] += b[p][r];
    ++count;
  }
  for (auto& [_, e] : mean)
    for (double& v : e.first) v /= static_cast<double>(e.second);
  const PseudoInverseLift lift(w);
  edit.delta = Tensor::matrix(patches.rows(), patches.cols());
  parallel_for(patches.rows(), [&](std::size_t p) {
    if (!raster.labeled(p)) return;
    const auto& mu = mean.at(raster.instance[p]).first;
    std::vector<float> diff(k);
    for (std::size_t r = 0; r < k; ++r) diff[r] = static_cast<float>((1.0 - alpha) * (mu[r] - b[p][r]));
    const auto up = lift.lift(diff);
    std::copy(up.begin(), up.end(), edit.delta.row(p).begin());
  });
  return edit;
}

// Wraps a patch-row edit into an additive hook over all tokens.
inline HookPlan edit_to_hook(const BindingEdit& edit, std::size_t layer, std::size_t tokens, std::size_t patch_offset) {
  HookPlan hook;
  hook.layer = layer;
  hook.mode = HookMode::add;
  if (edit.delta.empty()) return hook;
  hook.values = Tensor::matrix(tokens, edit.delta.cols());
  std::copy(edit.delta.data().begin(), edit.delta.data().end(),
            hook.values.data().begin() + static_cast<std::ptrdiff_t>(patch_offset * edit.delta.cols()));
  return hook;
}

inline HookPlan uninformed_shuffle(const LayerTrace& trace, const ProbeWeights& pw, const AblationConfig& cfg,
                                   const std::string& image_key = "") {
  cfg.validate();
  const Tensor& w = binding_matrix(pw, cfg.layer);
  if (cfg.layer >= trace.layers.size()) throw DataError("trace has no layer " + std::to_string(cfg.layer));
  const BindingEdit e = shuffle_edit(trace.patch_embeddings(cfg.layer), w, cfg.ratio, derive_seed(cfg.seed, "shuffle/" + image_key));
  return edit_to_hook(e, cfg.layer, trace.layers[cfg.layer].h.rows(), trace.patch_offset());
}

inline HookPlan informed_inject(const LayerTrace& trace, const ProbeWeights& pw, const LabelRaster* raster, const AblationConfig& cfg) {
  cfg.validate();
  if (!raster) throw ConfigError("informed injection needs a ground-truth instance raster");
  const Tensor& w = binding_matrix(pw, cfg.layer);
  if (cfg.layer >= trace.layers.size()) throw DataError("trace has no layer " + std::to_string(cfg.layer));
  const BindingEdit e = inject_edit(trace.patch_embeddings(cfg.layer), w, *raster, cfg.alpha);
  return edit_to_hook(e, cfg.layer, trace.layers[cfg.layer].h.rows(), trace.patch_offset());
}

inline HookPlan build_hook(const LayerTrace& trace, const ProbeWeights& pw, const AblationConfig& cfg, const LabelRaster* raster,
                           const std::string& image_key) {
  switch (cfg.mode) {
    case AblationMode::none: return HookPlan{cfg.layer, HookMode::add, {}};
    case AblationMode::uninformed: return uninformed_shuffle(trace, pw, cfg, image_key);
    case AblationMode::informed: return informed_inject(trace, pw, raster, cfg);
  }
  return {};
}

// Final-layer patch embeddings (after the final norm) with the ablation hook
// applied at cfg.layer. The identity hook reuses the plain forward.
inline Tensor ablated_final_patches(const PatchSequence& seq, const ModelBundle& bundle, const ProbeWeights& pw,
                                    const AblationConfig& cfg, const LabelRaster* raster, const std::string& image_key,
                                    HookPlan* hook_out = nullptr) {
  const Architecture& a = bundle.arch;
  Tensor final_tokens;
  if (cfg.mode == AblationMode::none) {
    final_tokens = forward(seq, bundle);
  } else {
    if (cfg.layer >= a.depth) throw ConfigError("ablation layer " + std::to_string(cfg.layer) + " is outside depth " + std::to_string(a.depth));
    LayerTrace trace = forward_with_trace(seq, bundle, cfg.layer + 1, {}, TraceOptions{false, false});
    HookPlan hook = build_hook(trace, pw, cfg, raster, image_key);
    Tensor h = std::move(trace.layers[cfg.layer].h);
    apply_hook(h, hook);
    if (hook_out) *hook_out = std::move(hook);
    final_tokens = continue_forward(std::move(h), bundle, cfg.layer + 1);
  }
  const Tensor normed = apply_final_norm(final_tokens, bundle);
  Tensor out = Tensor::matrix(a.patches(), a.width);
  std::copy(normed.data().begin() + static_cast<std::ptrdiff_t>(a.patch_offset() * a.width), normed.data().end(), out.data().begin());
  return out;
}

// ---- semantic head ----

struct SemanticHeadResult {
  ProbeWeights head;  // class_pointwise layout: w [classes, d], bias [classes], labels
  double accuracy = 0.0;
  std::size_t eval_patches = 0;
  std::vector<int> excluded_classes;
};

// Linear softmax head on per-patch features; patch accuracy on the labeled
// patches of the held-out images.
inline SemanticHeadResult retrain_semantic_head(std::span<const Tensor> features, std::span<const LabelRaster> rasters,
                                                const TrainRecipe& recipe) {
  recipe.validate();
  if (features.size() != rasters.size() || features.empty()) throw DataError("semantic head: features and rasters must pair up");
  const Split split = split_by_image(features.size(), recipe.holdout_fraction, recipe.seed);
  const auto& eval_idx = split.held_out.empty() ? split.train : split.held_out;

  std::vector<int> labels;
  for (std::size_t i : split.train)
    for (std::size_t p = 0; p < rasters[i].patches(); ++p)
      if (rasters[i].labeled(p) && std::find(labels.begin(), labels.end(), rasters[i].cls[p]) == labels.end())
        labels.push_back(rasters[i].cls[p]);
  std::sort(labels.begin(), labels.end());
  if (labels.empty()) throw DataError("semantic head: training images have no labeled patches");

  auto targets = [&](std::size_t img, std::vector<std::vector<double>>& x, std::vector<std::size_t>& t) {
    const auto lp = rasters[img].labeled_patches();
    x = detail::gather(features[img], lp);
    t.resize(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) {
      const auto it = std::find(labels.begin(), labels.end(), rasters[img].cls[lp[i]]);
      t[i] = it == labels.end() ? labels.size() : static_cast<std::size_t>(it - labels.begin());
    }
  };

  SemanticHeadResult res;
  Rng rng(derive_seed(recipe.seed, "init/semantic"));
  res.head = init_probe(ProbeFamily::class_pointwise, features[0].cols(), recipe, std::max<std::size_t>(labels.size(), 2), rng);
  res.head.labels = labels;
  ProbeWeights& pw = res.head;
  detail::run_adam(pw, split.train, recipe, [&](std::span<const std::size_t> idx) {
    std::vector<ProbeGrads> per(idx.size(), ProbeGrads(pw));
    parallel_for(idx.size(), [&](std::size_t q) {
      std::vector<std::vector<double>> x;
      std::vector<std::size_t> t;
      targets(idx[q], x, t);
      per[q].loss = softmax_ce(pw.w, pw.bias, x, t, &per[q].g[0], &per[q].g[1]);
      per[q].count = t.size();
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
  std::vector<int> excluded;
  for (std::size_t img : eval_idx) {
    const LabelRaster& r = rasters[img];
    for (std::size_t p = 0; p < r.patches(); ++p) {
      if (!r.labeled(p)) continue;
      const auto it = std::find(labels.begin(), labels.end(), r.cls[p]);
      if (it == labels.end()) {
        if (std::find(excluded.begin(), excluded.end(), r.cls[p]) == excluded.end()) excluded.push_back(r.cls[p]);
        continue;
      }
      const auto probs = detail::class_probs(pw.w, pw.bias.data(), features[img].row(p));
      const auto arg = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      correct += arg == static_cast<std::size_t>(it - labels.begin());
      ++total;
    }
  }
  std::sort(excluded.begin(), excluded.end());
  for (int c : excluded) warn("semantic head: class " + std::to_string(c) + " is absent from the training split; excluded from accuracy");
  res.excluded_classes = excluded;
  res.eval_patches = total;
  res.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return res;
}

// ---- instance head ----

struct InstanceHeadConfig {
  std::size_t num_queries = 100;
  double no_object_weight = 0.1;
  double mask_weight = 5.0;
  double dice_weight = 5.0;

  void validate() const {
    if (num_queries == 0) throw ConfigError("instance head needs at least one query");
    if (!(no_object_weight > 0 && mask_weight > 0 && dice_weight > 0)) throw ConfigError("instance head weights must be positive");
  }
};

// Per query q: mask logits m_qp = q . x_p + c_q over patches, objectness
// logit o_q = v_q . mean_p(x_p) + e_q.
struct InstanceHead {
  Tensor queries;    // [Q, d]
  Tensor mask_bias;  // [Q]
  Tensor obj_w;      // [Q, d]
  Tensor obj_b;      // [Q]

  std::vector<Tensor*> params() { return {&queries, &mask_bias, &obj_w, &obj_b}; }
  std::size_t num_queries() const { return queries.rows(); }
};

inline InstanceHead init_instance_head(std::size_t d, const InstanceHeadConfig& cfg, double scale, Rng& rng) {
  InstanceHead h;
  const double s = scale / std::sqrt(static_cast<double>(d));
  h.queries = Tensor::matrix(cfg.num_queries, d);
  h.obj_w = Tensor::matrix(cfg.num_queries, d);
  for (auto& v : h.queries.data()) v = static_cast<float>(s * rng.normal());
  for (auto& v : h.obj_w.data()) v = static_cast<float>(s * rng.normal());
  h.mask_bias = Tensor(Shape{cfg.num_queries});
  h.obj_b = Tensor(Shape{cfg.num_queries});
  return h;
}

// One image as seen by the instance head: labeled patch rows and one binary
// mask per ground-truth instance over those rows.
struct InstanceTarget {
  std::vector<std::vector<double>> x;   // [n, d]
  std::vector<std::vector<uint8_t>> masks;  // [G][n]
};

inline InstanceTarget instance_target(const Tensor& features, const LabelRaster& r) {
  InstanceTarget t;
  const auto lp = r.labeled_patches();
  t.x = detail::gather(features, lp);
  for (int id : r.instance_ids()) {
    std::vector<uint8_t> m(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) m[i] = r.instance[lp[i]] == id;
    t.masks.push_back(std::move(m));
  }
  return t;
}

struct InstanceOutputs {
  std::vector<std::vector<double>> mask_logits;  // [Q][n]
  std::vector<double> obj_logits;                // [Q]
  std::vector<double> mean_x;                    // [d]
};

inline InstanceOutputs instance_forward(const InstanceHead& h, const InstanceTarget& t) {
  const std::size_t q = h.num_queries(), n = t.x.size(), d = h.queries.cols();
  InstanceOutputs o;
  o.mean_x.assign(d, 0.0);
  for (const auto& row : t.x)
    for (std::size_t j = 0; j < d; ++j) o.mean_x[j] += row[j];
  if (n)
    for (double& v : o.mean_x) v /= static_cast<double>(n);
  o.mask_logits.assign(q, std::vector<double>(n));
  o.obj_logits.resize(q);
  for (std::size_t a = 0; a < q; ++a) {
    const auto qa = h.queries.row(a);
    for (std::size_t i = 0; i < n; ++i) {
      double s = h.mask_bias[a];
      for (std::size_t j = 0; j < d; ++j) s += qa[j] * t.x[i][j];
      o.mask_logits[a][i] = s;
    }
    double s = h.obj_b[a];
    for (std::size_t j = 0; j < d; ++j) s += h.obj_w(a, j) * o.mean_x[j];
    o.obj_logits[a] = s;
  }
  return o;
}

namespace detail {

inline double mask_bce(std::span<const double> logits, std::span<const uint8_t> g) {
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) acc += softplus(logits[i]) - (g[i] ? logits[i] : 0.0);
  return logits.empty() ? 0.0 : acc / static_cast<double>(logits.size());
}

inline double soft_dice(std::span<const double> logits, std::span<const uint8_t> g) {
  double inter = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = sigmoid(logits[i]);
    inter += p * g[i];
    sum += p + g[i];
  }
  return sum > 0 ? 1.0 - 2.0 * inter / sum : 0.0;
}

}  // namespace detail

// Matching cost [Q, G]: -p_obj + mask_weight * BCE + dice_weight * dice.
inline CostMatrix instance_cost(const InstanceOutputs& o, const InstanceTarget& t, const InstanceHeadConfig& cfg) {
  CostMatrix c(o.obj_logits.size(), t.masks.size());
  for (std::size_t a = 0; a < c.rows; ++a)
    for (std::size_t g = 0; g < c.cols; ++g)
      c(a, g) = -sigmoid(o.obj_logits[a]) + cfg.mask_weight * detail::mask_bce(o.mask_logits[a], t.masks[g]) +
                cfg.dice_weight * detail::soft_dice(o.mask_logits[a], t.masks[g]);
  return c;
}

// query -> ground-truth index or -1.
inline std::vector<int> match_queries(const InstanceOutputs& o, const InstanceTarget& t, const InstanceHeadConfig& cfg) {
  if (t.masks.empty()) return std::vector<int>(o.obj_logits.size(), -1);
  return hungarian_assign(instance_cost(o, t, cfg)).row_to_col;
}

struct InstanceGrads {
  std::vector<std::vector<double>> g;  // per parameter, matching InstanceHead::params()
  double loss = 0.0;
};

// L = L_cls + mask_weight * L_mask + dice_weight * L_dice for a fixed matching.
// L_cls is the weighted mean over queries (weight 1 matched, no_object_weight
// otherwise); L_mask and L_dice are summed over matched pairs and divided by
// max(G, 1).
inline double instance_loss(const InstanceHead& h, const InstanceTarget& t, const InstanceHeadConfig& cfg, std::span<const int> match,
                            InstanceGrads* grads) {
  const InstanceOutputs o = instance_forward(h, t);
  const std::size_t q = h.num_queries(), n = t.x.size(), d = h.queries.cols();
  const double gnorm = 1.0 / static_cast<double>(std::max<std::size_t>(t.masks.size(), 1));
  double z = 0.0;
  for (std::size_t a = 0; a < q; ++a) z += match[a] >= 0 ? 1.0 : cfg.no_object_weight;
  double l_cls = 0.0, l_mask = 0.0, l_dice = 0.0;
  for (std::size_t a = 0; a < q; ++a) {
    const double oa = o.obj_logits[a];
    const bool matched = match[a] >= 0;
    // -log sigmoid(o) = softplus(-o); -log(1 - sigmoid(o)) = softplus(o)
    l_cls += matched ? softplus(-oa) : cfg.no_object_weight * softplus(oa);
    if (grads) {
      const double p = sigmoid(oa);
      const double go = (matched ? p - 1.0 : cfg.no_object_weight * p) / z;
      for (std::size_t j = 0; j < d; ++j) grads->g[2][a * d + j] += go * o.mean_x[j];
      grads->g[3][a] += go;
    }
    if (!matched) continue;
    const auto& gm = t.masks[static_cast<std::size_t>(match[a])];
    const auto& ml = o.mask_logits[a];
    l_mask += detail::mask_bce(ml, gm);
    double inter = 0.0, sum = 0.0;
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = sigmoid(ml[i]);
      inter += p[i] * gm[i];
      sum += p[i] + gm[i];
    }
    l_dice += sum > 0 ? 1.0 - 2.0 * inter / sum : 0.0;
    if (grads && n > 0) {
      for (std::size_t i = 0; i < n; ++i) {
        double gl = cfg.mask_weight * gnorm * (p[i] - gm[i]) / static_cast<double>(n);
        if (sum > 0) gl += cfg.dice_weight * gnorm * (-2.0 * (gm[i] * sum - inter) / (sum * sum)) * p[i] * (1.0 - p[i]);
        for (std::size_t j = 0; j < d; ++j) grads->g[0][a * d + j] += gl * t.x[i][j];
        grads->g[1][a] += gl;
      }
    }
  }
  const double loss = l_cls / z + gnorm * (cfg.mask_weight * l_mask + cfg.dice_weight * l_dice);
  if (grads) grads->loss += loss;
  return loss;
}

inline InstanceGrads zero_instance_grads(InstanceHead& h) {
  InstanceGrads g;
  for (Tensor* t : h.params()) g.g.emplace_back(t->size(), 0.0);
  return g;
}

// Fraction of ground-truth instances whose matched query's hard mask
// (sigmoid > 0.5) has IoU >= 0.5 with the instance.
struct InstanceScore {
  std::size_t hits = 0, instances = 0;
  double accuracy() const { return instances ? static_cast<double>(hits) / static_cast<double>(instances) : 0.0; }
};

inline InstanceScore score_instances(const InstanceHead& h, const InstanceTarget& t, const InstanceHeadConfig& cfg) {
  InstanceScore s;
  s.instances = t.masks.size();
  if (t.masks.empty()) return s;
  const InstanceOutputs o = instance_forward(h, t);
  const auto match = match_queries(o, t, cfg);
  for (std::size_t a = 0; a < match.size(); ++a) {
    if (match[a] < 0) continue;
    const auto& gm = t.masks[static_cast<std::size_t>(match[a])];
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < gm.size(); ++i) {
      const bool pred = o.mask_logits[a][i] > 0.0;
      inter += pred && gm[i];
      uni += pred || gm[i];
    }
    if (uni > 0 && static_cast<double>(inter) >= 0.5 * static_cast<double>(uni)) ++s.hits;
  }
  return s;
}

struct InstanceHeadResult {
  InstanceHead head;
  double accuracy = 0.0;
  std::size_t instances = 0;
  std::vector<double> epoch_loss;
};

inline InstanceHeadResult retrain_instance_head(std::span<const Tensor> features, std::span<const LabelRaster> rasters,
                                                const InstanceHeadConfig& cfg, const TrainRecipe& recipe) {
  cfg.validate();
  recipe.validate();
  if (features.size() != rasters.size() || features.empty()) throw DataError("instance head: features and rasters must pair up");
  std::vector<InstanceTarget> targets(features.size());
  parallel_for(features.size(), [&](std::size_t i) { targets[i] = instance_target(features[i], rasters[i]); });
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (targets[i].masks.size() > cfg.num_queries)
      warn("instance head: image '" + rasters[i].image_id + "' has more instances than queries; extra instances stay unmatched");

  const Split split = split_by_image(features.size(), recipe.holdout_fraction, recipe.seed);
  const auto& eval_idx = split.held_out.empty() ? split.train : split.held_out;
  Rng rng(derive_seed(recipe.seed, "init/instance"));
  InstanceHeadResult res;
  res.head = init_instance_head(features[0].cols(), cfg, recipe.init_scale, rng);
  InstanceHead& head = res.head;
  std::vector<AdamState> states;
  for (Tensor* t : head.params()) states.emplace_back(t->shape(), recipe.lr, recipe.schedule);
  Rng order_rng(derive_seed(recipe.seed, "minibatch"));
  std::vector<std::size_t> order = split.train;
  for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += recipe.batch_images) {
      const std::size_t end = std::min(order.size(), start + recipe.batch_images);
      std::vector<InstanceGrads> per(end - start);
      parallel_for(end - start, [&](std::size_t k) {
        const InstanceTarget& t = targets[order[start + k]];
        const auto match = match_queries(instance_forward(head, t), t, cfg);
        InstanceHead& hh = head;
        per[k] = zero_instance_grads(hh);
        instance_loss(head, t, cfg, match, &per[k]);
      });
      InstanceGrads total = zero_instance_grads(head);
      for (const auto& g : per) {
        total.loss += g.loss;
        for (std::size_t p = 0; p < g.g.size(); ++p)
          for (std::size_t i = 0; i < g.g[p].size(); ++i) total.g[p][i] += g.g[p][i];
      }
      const double inv = 1.0 / static_cast<double>(per.size());
      if (!std::isfinite(total.loss)) throw NumericError("instance head: non-finite loss at epoch " + std::to_string(epoch));
      auto params = head.params();
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor grad(params[p]->shape());
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = static_cast<float>(total.g[p][i] * inv);
        const StepOutcome o = adam_step(*params[p], grad, states[p]);
        if (!o.applied) warn("instance head: " + o.diagnostic);
      }
      epoch_loss += total.loss * inv;
      ++steps;
    }
    for (auto& s : states) s.end_epoch(epoch + 1);
    res.epoch_loss.push_back(steps ? epoch_loss / static_cast<double>(steps) : 0.0);
  }
  InstanceScore total;
  for (std::size_t i : eval_idx) {
    const InstanceScore s = score_instances(head, targets[i], cfg);
    total.hits += s.hits;
    total.instances += s.instances;
  }
  res.accuracy = total.accuracy();
  res.instances = total.instances;
  return res;
}

// ---- DINO loss ----

enum class CropKind { identity, hflip };

struct DinoEvalConfig {
  std::optional<double> student_temp;  // default: bundle head value
  std::optional<double> teacher_temp;
  std::optional<std::vector<double>> center;  // default: bundle center, else batch mean of teacher logits
  std::vector<CropKind> crops = {CropKind::identity, CropKind::hflip};

  void validate() const {
    if ((student_temp && !(*student_temp > 0)) || (teacher_temp && !(*teacher_temp > 0)))
      throw ConfigError("DINO temperatures must be positive");
    if (crops.empty()) throw ConfigError("DINO evaluation needs at least one crop");
  }
};

inline Tensor crop_image(const Tensor& image, CropKind kind) {
  if (kind == CropKind::identity) return image;
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

// -sum_k softmax((t - c) / tau_t)_k * log softmax(s / tau_s)_k
inline double dino_cross_entropy(std::span<const double> teacher, std::span<const double> student, std::span<const double> center,
                                 double tau_t, double tau_s) {
  if (teacher.size() != student.size() || center.size() != teacher.size()) throw DataError("DINO logits and center sizes differ");
  std::vector<double> t(teacher.size()), s(student.size());
  for (std::size_t k = 0; k < t.size(); ++k) {
    t[k] = (teacher[k] - center[k]) / tau_t;
    s[k] = student[k] / tau_s;
  }
  const auto pt = softmax(t);
  const double smax = *std::max_element(s.begin(), s.end());
  double lse = 0.0;
  for (double v : s) lse += std::exp(v - smax);
  lse = smax + std::log(lse);
  double loss = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) loss -= pt[k] * (s[k] - lse);
  return loss;
}

// Teacher: plain forward. Student: forward with the ablation hook built from
// the student's own trace of each crop. Pairs are (teacher crop a, student
// crop b) for a != b, or the single crop with itself.
inline double eval_dino_loss(const ModelBundle& bundle, std::span<const Tensor> images, std::span<const std::string> image_ids,
                             const ProbeWeights* pw, const AblationConfig& ablation, const DinoEvalConfig& cfg = {}) {
  cfg.validate();
  if (!bundle.dino) throw UnsupportedError("bundle has no DINO head tensors; DINO loss is unsupported for this model");
  if (ablation.mode == AblationMode::informed) throw ConfigError("informed ablation cannot be evaluated under DINO loss");
  if (ablation.mode != AblationMode::none && !pw) throw ConfigError("uninformed ablation needs a probe");
  if (images.empty()) throw DataError("eval_dino_loss: no images");
  const DinoHead& head = *bundle.dino;
  const double tau_s = cfg.student_temp.value_or(head.student_temp), tau_t = cfg.teacher_temp.value_or(head.teacher_temp);
  const std::size_t nc = cfg.crops.size();

  std::vector<std::vector<std::vector<double>>> teacher(images.size()), student(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    teacher[i].resize(nc);
    student[i].resize(nc);
    for (std::size_t c = 0; c < nc; ++c) {
      const PatchSequence seq = patch_embed(crop_image(images[i], cfg.crops[c]), bundle);
      const Tensor plain = forward(seq, bundle);
      teacher[i][c] = dino_head_logits(plain, bundle);
      const bool identity = ablation.mode == AblationMode::none || ablation.ratio == 0.0;
      if (identity) {
        student[i][c] = teacher[i][c];
        continue;
      }
      LayerTrace trace = forward_with_trace(seq, bundle, ablation.layer + 1, {}, TraceOptions{false, false});
      const std::string key = image_ids[i] + "/crop" + std::to_string(c);
      const HookPlan hook = uninformed_shuffle(trace, *pw, ablation, key);
      Tensor h = std::move(trace.layers[ablation.layer].h);
      apply_hook(h, hook);
      student[i][c] = dino_head_logits(continue_forward(std::move(h), bundle, ablation.layer + 1), bundle);
    }
  });

  const std::size_t k = teacher[0][0].size();
  std::vector<double> center(k, 0.0);
  if (cfg.center) {
    center = *cfg.center;
  } else if (!head.center.empty()) {
    center.assign(head.center.data().begin(), head.center.data().end());
  } else {
    for (const auto& img : teacher)
      for (const auto& t : img)
        for (std::size_t j = 0; j < k; ++j) center[j] += t[j];
    for (double& v : center) v /= static_cast<double>(images.size() * nc);
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t a = 0; a < nc; ++a)
      for (std::size_t b = 0; b < nc; ++b) {
        if (nc > 1 && a == b) continue;
        total += dino_cross_entropy(teacher[i][a], student[i][b], center, tau_t, tau_s);
        ++pairs;
      }
  return total / static_cast<double>(pairs);
}

// ---- experiment rows and persistence ----

struct AblationRow {
  AblationMode mode = AblationMode::none;
  double parameter = 0.0;
  std::optional<double> seg_acc, inst_acc, dino_loss;
};

inline void write_ablation_csv(const std::string& path, std::span<const AblationRow> rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "mode,parameter,seg_acc,inst_acc,dino_loss\n";
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  char param[32];
  for (const auto& r : rows) {
    std::snprintf(param, sizeof param, "%.4f", r.parameter);
    out << mode_name(r.mode) << ',' << param << ',' << opt(r.seg_acc) << ',' << opt(r.inst_acc) << ',' << opt(r.dino_loss) << '\n';
  }
}

// Hook plans keyed by image id, with the ablation settings in the metadata.
inline ArchiveWriter hooks_to_archive(std::span<const HookPlan> hooks, std::span<const std::string> image_ids, const AblationConfig& cfg) {
  if (hooks.size() != image_ids.size()) throw DataError("hooks_to_archive: one image id per hook required");
  ArchiveWriter w;
  std::vector<std::string> identity;
  for (std::size_t i = 0; i < hooks.size(); ++i) {
    if (hooks[i].is_identity()) {
      identity.push_back(image_ids[i]);
      continue;
    }
    w.add("hook/" + image_ids[i], hooks[i].values);
  }
  w.metadata() = {{"kind", "hook_plans"},        {"layer", cfg.layer},          {"mode", mode_name(cfg.mode)},
                  {"ratio", cfg.ratio},          {"alpha", cfg.alpha},          {"seed", cfg.seed},
                  {"permutation", "derangement"}, {"lift", "pseudo-inverse"},    {"images", image_ids},
                  {"identity", identity}};
  return w;
}

inline std::vector<HookPlan> hooks_from_archive(const TensorArchive& ar) {
  const auto& m = ar.metadata();
  if (m.value("kind", std::string()) != "hook_plans") throw DataError(ar.path() + " is not a hook_plans archive");
  const auto layer = m.at("layer").get<std::size_t>();
  std::vector<HookPlan> out;
  for (const auto& id : m.at("images").get<std::vector<std::string>>()) {
    HookPlan h{layer, HookMode::add, {}};
    if (ar.contains("hook/" + id)) h.values = ar.tensor("hook/" + id);
    out.push_back(std::move(h));
  }
  return out;
}

// ---- planted stand-in model ----

// Two-block pre-norm bundle over planted embeddings. Block 0 is the identity
// (zero layer scale); block 1 is one attention head whose queries and keys
// read only the binding subspace (rows of `w_true`, scaled by `sharpness`) and
// whose values carry only the feature complement, added back with gain
// `pool_gain`. Patches with similar binding vectors pool their features.
inline ModelBundle binding_pool_bundle(const Tensor& w_true, std::size_t grid_side, double sharpness = 4.0, double pool_gain = 4.0) {
  const std::size_t d = w_true.cols();
  Architecture a;
  a.depth = 2;
  a.width = d;
  a.heads = 1;
  a.patch_size = 1;
  a.grid_side = grid_side;
  a.channels = d;
  a.mlp_hidden = 1;
  a.class_token = false;
  a.layer_scale = true;
  a.final_norm = false;
  ModelBundle b;
  b.arch = a;
  b.patch_w = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < d; ++i) b.patch_w(i, i) = 1.0f;
  b.patch_b = Tensor(Shape{d});
  b.pos_embed = Tensor::matrix(a.tokens(), d);
  // P = W^T W for orthonormal rows
  Tensor proj = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < w_true.rows(); ++r) s += static_cast<double>(w_true(r, i)) * w_true(r, j);
      proj(i, j) = static_cast<float>(s);
    }
  for (std::size_t l = 0; l < 2; ++l) {
    LayerWeights w;
    w.norm1 = w.norm2 = {Tensor(Shape{d}, 1.0f), Tensor(Shape{d})};
    w.qkv_w = Tensor::matrix(d, 3 * d);
    w.qkv_b = Tensor(Shape{3 * d});
    w.proj_w = Tensor::matrix(d, d);
    w.proj_b = Tensor(Shape{d});
    w.fc1_w = Tensor::matrix(d, 1);
    w.fc1_b = Tensor(Shape{1});
    w.fc2_w = Tensor::matrix(1, d);
    w.fc2_b = Tensor(Shape{d});
    w.ls1 = Tensor(Shape{d}, l == 1 ? static_cast<float>(pool_gain) : 0.0f);
    w.ls2 = Tensor(Shape{d});
    if (l == 1) {
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          w.qkv_w(i, j) = static_cast<float>(sharpness * proj(i, j));
          w.qkv_w(i, d + j) = static_cast<float>(sharpness * proj(i, j));
          w.qkv_w(i, 2 * d + j) = (i == j ? 1.0f : 0.0f) - proj(i, j);
        }
        w.proj_w(i, i) = 1.0f;
      }
    }
    b.layers.push_back(std::move(w));
  }
  validate_bundle(b);
  return b;
}

inline PatchSequence tokens_as_sequence(const Tensor& tokens, std::size_t grid_side) { return PatchSequence{tokens, grid_side, false}; }

}  // namespace vitbind
