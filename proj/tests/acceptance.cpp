// Acceptance suite: one PASS/FAIL/SKIP line per criterion, exit status 1 when
// any criterion fails.
//
// The data-dependent criterion runs only when VITBIND_DINOV2_BUNDLE,
// VITBIND_ADE20K_IMAGES and VITBIND_ADE20K_LABELS name a DINOv2-L bundle, an
// image_set archive and a label_set archive.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "vitbind/ablation.hpp"
#include "vitbind/dataset.hpp"
#include "vitbind/gradcheck.hpp"
#include "vitbind/linalg.hpp"

using namespace vitbind;

namespace {

enum class Verdict { pass, fail, skip };

struct Outcome {
  Verdict verdict = Verdict::fail;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

Tensor randn(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.data()) v = static_cast<float>(scale * rng.normal());
  return t;
}

// ---- gradients ------------------------------------------------------------

struct PairProblem {
  ActivationSet acts, acts2;
  std::vector<PairBatch> batches;
};

PairProblem random_pair_problem(std::uint64_t seed, std::size_t d, std::size_t n) {
  Rng rng(seed);
  PairProblem p;
  p.acts.layer = 3;
  p.acts2.layer = 5;
  for (std::size_t i = 0; i < 2; ++i) {
    p.acts.images.push_back(randn(n, d, rng));
    p.acts2.images.push_back(randn(n, d, rng));
    LabelRaster r{"img" + std::to_string(i), 3, std::vector<int>(9, kIgnoreId), std::vector<int>(9, kIgnoreId)};
    std::vector<std::size_t> patches;
    for (std::size_t j = 0; j < n; ++j) {
      r.instance[j] = static_cast<int>(rng.index(3));
      r.cls[j] = r.instance[j] % 2;
      patches.push_back(j);
    }
    p.batches.push_back(make_pair_batch(r, i, patches));
  }
  return p;
}

double worst_param_error(std::vector<Tensor*> params, const std::vector<std::vector<double>>& grads, const std::function<double()>& loss) {
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) worst = std::max(worst, finite_difference_check(params[k]->data(), grads[k], loss).relative_error);
  return worst;
}

double pair_probe_error(ProbeFamily f, std::uint64_t seed) {
  const PairProblem p = random_pair_problem(1000 + seed, 5, 6);
  Rng rng(seed);
  TrainRecipe r;
  r.k = 3;
  r.init_scale = 1.5;
  ProbeWeights pw = init_probe(f, 5, r, 3, rng);
  pw.bias[0] = static_cast<float>(0.3 * rng.normal());
  const ActivationSet* second = f == ProbeFamily::cross_layer ? &p.acts2 : nullptr;
  const ProbeGrads g = pair_loss_and_grad(pw, p.batches, p.acts, second);
  return worst_param_error(pw.params(), g.g, [&] { return pair_loss_and_grad(pw, p.batches, p.acts, second).loss; });
}

// Softmax cross-entropy over `classes` x `d` weights, the loss of the pointwise
// class probe and of the semantic head.
double softmax_head_error(std::size_t classes, std::size_t d, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = randn(classes, d, rng), b(Shape{classes});
  for (auto& v : b.data()) v = static_cast<float>(rng.normal());
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  std::vector<std::size_t> t(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : x[i]) v = rng.normal();
    t[i] = rng.index(classes);
  }
  std::vector<std::vector<double>> g = {std::vector<double>(w.size()), std::vector<double>(b.size())};
  softmax_ce(w, b, x, t, &g[0], &g[1]);
  return worst_param_error({&w, &b}, g, [&] { return softmax_ce(w, b, x, t, nullptr, nullptr); });
}

// 4x4 raster with four 2x2 instances and one unlabeled corner.
LabelRaster quad_raster() {
  LabelRaster r;
  r.image_id = "q";
  r.side = 4;
  for (std::size_t p = 0; p < 16; ++p) {
    r.instance.push_back(static_cast<int>((p / 8) * 2 + (p % 4) / 2));
    r.cls.push_back(static_cast<int>((p % 4) / 2));
  }
  r.instance[15] = r.cls[15] = kIgnoreId;
  return r;
}

double instance_head_error(std::uint64_t seed) {
  InstanceHeadConfig cfg;
  cfg.num_queries = 6;
  const std::size_t d = 6;
  Rng rng(seed);
  InstanceHead h = init_instance_head(d, cfg, 1.0, rng);
  for (auto& v : h.mask_bias.data()) v = static_cast<float>(rng.normal());
  for (auto& v : h.obj_b.data()) v = static_cast<float>(rng.normal());
  const LabelRaster r = quad_raster();
  Tensor x = randn(16, d, rng, 0.5);
  for (std::size_t p = 0; p < 16; ++p) x(p, r.labeled(p) ? static_cast<std::size_t>(r.instance[p]) : d - 1) += 1.0f;
  const InstanceTarget t = instance_target(x, r);
  const auto match = match_queries(instance_forward(h, t), t, cfg);
  InstanceGrads g = zero_instance_grads(h);
  instance_loss(h, t, cfg, match, &g);
  return worst_param_error(h.params(), g.g, [&] { return instance_loss(h, t, cfg, match, nullptr); });
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  constexpr int kInstances = 50;
  std::vector<std::pair<std::string, std::function<double(std::uint64_t)>>> checks;
  for (auto f : {ProbeFamily::linear, ProbeFamily::diag, ProbeFamily::quad, ProbeFamily::cross_layer, ProbeFamily::class_pairwise})
    checks.emplace_back(family_name(f), [f](std::uint64_t s) { return pair_probe_error(f, s); });
  checks.emplace_back("class_pointwise", [](std::uint64_t s) { return softmax_head_error(3, 5, 9, 2000 + s); });
  checks.emplace_back("semantic_head", [](std::uint64_t s) { return softmax_head_error(6, 8, 20, 3000 + s); });
  checks.emplace_back("instance_head", [](std::uint64_t s) { return instance_head_error(4000 + s); });
  bool ok = true;
  std::string detail;
  for (const auto& [name, fn] : checks) {
    double worst = 0.0;
    for (int s = 0; s < kInstances; ++s) worst = std::max(worst, fn(static_cast<std::uint64_t>(s)));
    ok = ok && worst < 1e-4;
    detail += fmt("%s %.1e; ", name.c_str(), worst);
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 60.0;
  return {ok ? Verdict::pass : Verdict::fail, fmt("max rel err over %d instances: ", kInstances) + detail + fmt("%.1fs", secs)};
}

// ---- oracle equivalence ---------------------------------------------------

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  Rng rng(20240);
  std::size_t hungarian_bad = 0;
  for (std::size_t n = 2; n <= 6; ++n)
    for (int trial = 0; trial < 1000; ++trial) {
      CostMatrix c(n, n);
      for (auto& v : c.cost) v = rng.uniform(-5.0, 5.0);
      if (std::abs(hungarian_assign(c).total - oracle::brute_force_assignment(c)) > 1e-9) ++hungarian_bad;
    }
  double pca_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x = oracle::random_matrix(10, 6, rng);
    const EigenResult r = pca_topk(x, 3);
    const oracle::Eigen ref = oracle::classical_jacobi(oracle::covariance(x));
    for (std::size_t c = 0; c < 3; ++c) {
      pca_err = std::max(pca_err, std::abs(r.explained_variance[c] - static_cast<double>(ref.values[c])));
      double align = 0.0;
      for (std::size_t j = 0; j < 6; ++j) align += r.components(c, j) * static_cast<double>(ref.vectors[c][j]);
      pca_err = std::max(pca_err, std::abs(std::abs(align) - 1.0));
    }
  }
  double lift_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.index(6), d = k + 4 + rng.index(28);
    const Tensor w = oracle::random_matrix(k, d, rng);
    std::vector<float> delta(k);
    for (auto& v : delta) v = static_cast<float>(rng.normal());
    const auto back = matvec(w, pinv_lift(w, delta));
    for (std::size_t i = 0; i < k; ++i) lift_err = std::max(lift_err, static_cast<double>(std::abs(back[i] - delta[i])));
  }
  const double secs = seconds_since(t0);
  const bool ok = hungarian_bad == 0 && pca_err < 1e-5 && lift_err < 1e-4 && secs < 60.0;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("hungarian mismatches %zu/5000; pca max err %.1e; pinv round trip max err %.1e; %.1fs", hungarian_bad, pca_err, lift_err, secs)};
}

// ---- identical tokens -----------------------------------------------------

Outcome identical_token_theorem() {
  std::vector<ModelBundle> bundles;
  std::uint64_t seed = 0;
  for (auto norm : {NormPlacement::pre, NormPlacement::post})
    for (bool cls : {true, false})
      for (bool ls : {true, false})
        for (auto act : {Activation::gelu, Activation::relu}) {
          Architecture a;
          a.depth = 3;
          a.width = 16;
          a.heads = 4;
          a.patch_size = 2;
          a.grid_side = 4;
          a.channels = 3;
          a.mlp_hidden = 32;
          a.norm = norm;
          a.class_token = cls;
          a.layer_scale = ls;
          a.activation = act;
          bundles.push_back(make_random_bundle(a, 500 + seed++, 1.5));
        }
  for (const char* name : {"prenorm", "postnorm"}) bundles.push_back(load_bundle(std::string(VITBIND_FIXTURES) + "/" + name + "_bundle.vbt"));
  {
    Rng rng(77);
    const Tensor w = randn(8, 32, rng);
    bundles.push_back(binding_pool_bundle(w, 5));
  }
  double worst = 0.0;
  std::size_t cases = 0;
  for (std::size_t bi = 0; bi < bundles.size(); ++bi) {
    ModelBundle b = bundles[bi];
    const Architecture& a = b.arch;
    Rng rng(900 + bi);
    for (int rep = 0; rep < 3; ++rep) {
      Tensor patches = randn(a.patches(), a.patch_dim(), rng);
      const std::size_t i = rng.index(a.patches());
      std::size_t j = rng.index(a.patches());
      if (j == i) j = (i + 1) % a.patches();
      const std::size_t off = a.patch_offset();
      std::copy(patches.row(i).begin(), patches.row(i).end(), patches.row(j).begin());
      std::copy(b.pos_embed.row(i + off).begin(), b.pos_embed.row(i + off).end(), b.pos_embed.row(j + off).begin());
      const LayerTrace t = forward_with_trace(embed_patches(patches, b), b, a.depth, {}, TraceOptions{false, false});
      for (const auto& layer : t.layers)
        for (std::size_t c = 0; c < a.width; ++c)
          worst = std::max(worst, static_cast<double>(std::abs(layer.h(i + off, c) - layer.h(j + off, c))));
      const Tensor out = apply_final_norm(t.layers.back().h, b);
      for (std::size_t c = 0; c < a.width; ++c) worst = std::max(worst, static_cast<double>(std::abs(out(i + off, c) - out(j + off, c))));
      ++cases;
    }
  }
  return {worst < 1e-5 ? Verdict::pass : Verdict::fail, fmt("%zu bundles, %zu duplicated-token cases, max |h_i - h_j| %.1e over all layers", bundles.size(), cases, worst)};
}

// ---- planted recovery -----------------------------------------------------

Outcome planted_recovery() {
  const auto t0 = Clock::now();
  SyntheticSpec s;
  s.seed = 1;
  const auto data = gen_synthetic_embeddings(s);
  const ActivationSet acts{0, data.embeddings};
  const auto recipe = planted_recipe(s.k_true);
  const double quad = train_pair_probe(ProbeFamily::quad, data.batches, acts, recipe).held_out.accuracy;
  const double diag = train_pair_probe(ProbeFamily::diag, data.batches, acts, recipe).held_out.accuracy;
  const double lin = train_pair_probe(ProbeFamily::linear, data.batches, acts, recipe).held_out.accuracy;

  SyntheticSpec shared;
  shared.seed = 5;
  shared.images = 128;
  shared.class_sharing = true;
  const auto sdata = gen_synthetic_embeddings(shared);
  const ActivationSet sacts{0, sdata.embeddings};
  const double point = train_pointwise_class_probe(sdata.batches, sacts, recipe).pairwise.accuracy;
  const double pair = train_pair_probe(ProbeFamily::class_pairwise, sdata.batches, sacts, recipe).held_out.accuracy;
  const double secs = seconds_since(t0);
  const bool ok = quad >= 0.95 && lin <= 0.80 && lin <= diag && diag <= quad && point < pair && secs < 300.0;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("held-out pair acc quad %.3f, diag %.3f, linear %.3f; class sharing pointwise %.3f < pairwise %.3f; %.1fs", quad, diag, lin,
              point, pair, secs)};
}

// ---- subspace confinement -------------------------------------------------

Outcome subspace_confinement() {
  Architecture a;
  a.depth = 3;
  a.width = 24;
  a.heads = 3;
  a.patch_size = 2;
  a.grid_side = 4;
  a.channels = 3;
  a.mlp_hidden = 48;
  const ModelBundle b = make_random_bundle(a, 61);
  const LabelRaster raster = quad_raster();
  double worst = 0.0;
  std::size_t hooks = 0;
  bool noop_identical = true;
  for (std::uint64_t img = 0; img < 8; ++img) {
    Rng rng(700 + img);
    Tensor image(Shape{a.channels, a.image_side(), a.image_side()});
    for (auto& v : image.data()) v = static_cast<float>(rng.normal());
    const PatchSequence seq = patch_embed(image, b);
    ProbeWeights pw;
    pw.family = ProbeFamily::quad;
    pw.w = randn(5, a.width, rng);
    pw.bias = Tensor(Shape{1});
    for (std::size_t layer = 0; layer + 1 < a.depth; ++layer) {
      pw.layer = pw.layer2 = layer;
      const PseudoInverseLift lift(pw.w);
      const LayerTrace pre = forward_with_trace(seq, b, layer + 1, {}, TraceOptions{false, false});
      std::vector<AblationConfig> cfgs;
      for (double ratio : {0.25, 0.5, 1.0}) cfgs.push_back({layer, AblationMode::uninformed, ratio, 1.0, img});
      for (double alpha : {0.0, 0.5}) cfgs.push_back({layer, AblationMode::informed, 0.0, alpha, img});
      for (const auto& cfg : cfgs) {
        const HookPlan hook = build_hook(pre, pw, cfg, &raster, "img" + std::to_string(img));
        const LayerTrace edited = forward_with_trace(seq, b, layer + 1, std::vector<HookPlan>{hook}, TraceOptions{false, false});
        const Tensor& h0 = pre.layers[layer].h;
        const Tensor& h1 = edited.layers[layer].h;
        for (std::size_t r = 0; r < h0.rows(); ++r) {
          std::vector<float> delta(h0.cols());
          for (std::size_t c = 0; c < h0.cols(); ++c) delta[c] = h1(r, c) - h0(r, c);
          const auto proj = lift.project(delta);
          double out = 0.0;
          for (std::size_t c = 0; c < delta.size(); ++c) out += (delta[c] - proj[c]) * (delta[c] - proj[c]);
          worst = std::max(worst, std::sqrt(out));
        }
        ++hooks;
      }
      const Tensor plain = ablated_final_patches(seq, b, pw, {layer, AblationMode::none}, nullptr, "img");
      const Tensor ratio0 = ablated_final_patches(seq, b, pw, {layer, AblationMode::uninformed, 0.0}, nullptr, "img");
      const Tensor alpha1 = ablated_final_patches(seq, b, pw, {layer, AblationMode::informed, 0.0, 1.0}, &raster, "img");
      for (std::size_t i = 0; i < plain.size(); ++i) noop_identical = noop_identical && plain[i] == ratio0[i] && plain[i] == alpha1[i];
    }
  }
  const bool ok = worst < 1e-4 && noop_identical;
  return {ok ? Verdict::pass : Verdict::fail, fmt("%zu hooks, max ||(h~ - h) outside span(W^T)|| %.1e; ratio-0 / alpha-1 bit-identical: %s", hooks,
                                                  worst, noop_identical ? "yes" : "no")};
}

// ---- monotonicity ---------------------------------------------------------

Outcome monotonicity() {
  SyntheticSpec s;
  s.seed = 7;
  s.images = 48;
  s.noise = 0.3;
  s.binding_scale = 6.0;
  s.feature_scale = 0.3;
  const auto data = gen_synthetic_embeddings(s);
  const auto probe = train_pair_probe(ProbeFamily::quad, data.batches, ActivationSet{0, data.embeddings}, planted_recipe(s.k_true));
  const ModelBundle bundle = binding_pool_bundle(data.w_true, data.side);
  TrainRecipe head;
  head.lr = 0.01;
  head.epochs = 20;
  head.batch_images = 8;
  head.schedule = {10, 0.2};
  head.seed = 1;
  head.init_scale = 0.1;
  auto seg = [&](AblationConfig cfg) {
    cfg.layer = 0;
    cfg.seed = 5;
    std::vector<Tensor> feats(data.embeddings.size());
    parallel_for(feats.size(), [&](std::size_t i) {
      feats[i] = ablated_final_patches(tokens_as_sequence(data.embeddings[i], data.side), bundle, probe.weights, cfg, &data.rasters[i],
                                       data.rasters[i].image_id);
    });
    return retrain_semantic_head(feats, data.rasters, head).accuracy;
  };
  const double r0 = seg({0, AblationMode::uninformed, 0.0});
  const double r5 = seg({0, AblationMode::uninformed, 0.5});
  const double r10 = seg({0, AblationMode::uninformed, 1.0});
  const double inj = seg({0, AblationMode::informed, 0.0, 0.5});
  const bool ok = r0 >= r5 && r5 >= r10 && inj >= r0;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("patch seg acc: shuffle 0 %.3f >= 0.5 %.3f >= 1 %.3f; inject alpha 0.5 %.3f >= unablated", r0, r5, r10, inj)};
}

// ---- optional: DINOv2-L on ADE20K ----------------------------------------

// Sampled patch rows per layer, with batches re-indexed onto the compact rows.
struct CompactLayers {
  std::map<std::size_t, ActivationSet> layers;
  std::vector<PairBatch> batches;
};

Outcome data_dependent() {
  const char* bundle_path = std::getenv("VITBIND_DINOV2_BUNDLE");
  const char* images_path = std::getenv("VITBIND_ADE20K_IMAGES");
  const char* labels_path = std::getenv("VITBIND_ADE20K_LABELS");
  if (!bundle_path || !images_path || !labels_path)
    return {Verdict::skip, "set VITBIND_DINOV2_BUNDLE, VITBIND_ADE20K_IMAGES and VITBIND_ADE20K_LABELS to run"};
  const auto t0 = Clock::now();
  const ModelBundle bundle = load_bundle(bundle_path);
  const ImageSet images = load_images(images_path);
  const Architecture& a = bundle.arch;
  std::map<std::string, LabelRaster> by_id;
  for (auto& r : load_labels(labels_path, a.grid_side)) by_id[r.image_id] = std::move(r);
  std::vector<LabelRaster> rasters;
  for (const auto& id : images.ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("labels have no raster for image '" + id + "'");
    rasters.push_back(it->second);
  }
  if (images.size() < 500) return {Verdict::fail, fmt("need at least 500 images, got %zu", images.size())};
  if (a.depth != 24) return {Verdict::fail, fmt("expected a 24-block DINOv2-L bundle, got depth %zu", a.depth)};

  constexpr std::size_t kCross1 = 15, kCross2 = 18, kAblate = 18, kMidPos = 12, kDeepPos = 21;
  const std::vector<std::size_t> attn_layers = {12, 15};
  const std::vector<double> attn_targets = {0.163, 0.201};
  constexpr std::size_t kFullImages = 32, kAttnImages = 4, kDinoImages = 32;

  const auto sampled = sample_pair_batches(rasters, kPatchesPerImage, 1);
  std::map<std::size_t, std::size_t> batch_of;
  for (std::size_t q = 0; q < sampled.size(); ++q) batch_of[sampled[q].image_index] = q;
  CompactLayers compact;
  for (std::size_t l = 0; l < a.depth; ++l) compact.layers[l] = ActivationSet{l, std::vector<Tensor>(sampled.size())};
  for (std::size_t q = 0; q < sampled.size(); ++q) {
    PairBatch b = sampled[q];
    b.image_index = q;
    std::iota(b.patches.begin(), b.patches.end(), std::size_t{0});
    compact.batches.push_back(std::move(b));
  }
  std::map<std::size_t, ActivationSet> full;
  for (std::size_t l : {kMidPos, kDeepPos}) full[l] = ActivationSet{l, {}};
  std::vector<std::vector<Tensor>> attn_patches(attn_layers.size()), attn_next(attn_layers.size());

  for (std::size_t i = 0; i < images.size(); ++i) {
    const bool want_attn = i < kAttnImages;
    const LayerTrace t = forward_with_trace(patch_embed(images.images[i], bundle), bundle, a.depth, {}, TraceOptions{want_attn, false});
    if (const auto it = batch_of.find(i); it != batch_of.end()) {
      const PairBatch& b = sampled[it->second];
      for (std::size_t l = 0; l < a.depth; ++l) {
        Tensor rows = Tensor::matrix(b.size(), a.width);
        const Tensor& h = t.layers[l].h;
        for (std::size_t r = 0; r < b.size(); ++r)
          std::copy(h.row(b.patches[r] + a.patch_offset()).begin(), h.row(b.patches[r] + a.patch_offset()).end(), rows.row(r).begin());
        compact.layers[l].images[it->second] = std::move(rows);
      }
    }
    if (i < kFullImages)
      for (auto& [l, set] : full) set.images.push_back(t.patch_embeddings(l));
    if (want_attn)
      for (std::size_t k = 0; k < attn_layers.size(); ++k) {
        attn_patches[k].push_back(t.patch_embeddings(attn_layers[k]));
        const Tensor& m = t.layers[attn_layers[k] + 1].attention_mean;
        Tensor block = Tensor::matrix(a.patches(), a.patches());
        for (std::size_t r = 0; r < a.patches(); ++r)
          for (std::size_t c = 0; c < a.patches(); ++c) block(r, c) = m(r + a.patch_offset(), c + a.patch_offset());
        attn_next[k].push_back(std::move(block));
      }
  }

  TrainRecipe recipe;  // default natural-image recipe
  std::vector<ActivationSet> sets;
  for (const auto& [l, s] : compact.layers) sets.push_back(s);
  std::vector<ProbeWeights> trained;
  const LayerAccuracyCurve curve = probe_sweep(ProbeFamily::quad, compact.batches, sets, a.depth, recipe, &trained);
  const double best = std::max_element(curve.points.begin(), curve.points.end(), [](auto& x, auto& y) { return x.accuracy < y.accuracy; })->accuracy;
  const bool sweep_ok = std::abs(best - 0.902) <= 0.02 && std::abs(curve.peak_normalized - 0.78) <= 0.1;

  const double cross = train_pair_probe(ProbeFamily::cross_layer, compact.batches, compact.layers.at(kCross1), recipe, &compact.layers.at(kCross2))
                           .held_out.accuracy;
  const bool cross_ok = std::abs(cross - 0.833) <= 0.03;

  bool attn_ok = true;
  std::string attn_detail;
  for (std::size_t k = 0; k < attn_layers.size(); ++k) {
    const ProbeWeights& pw = trained.at(attn_layers[k]);
    std::vector<std::vector<double>> scores;
    for (const auto& x : attn_patches[k]) scores.push_back(score_matrix(pw, x, x));
    const CorrelationResult c = pooled_attention_correlation(attn_next[k], scores, a.grid_side, 999, 11);
    attn_ok = attn_ok && std::abs(c.r - attn_targets[k]) <= 0.08 && c.p_value < 0.001;
    attn_detail += fmt("L%zu r %.3f p %.4f; ", attn_layers[k], c.r, c.p_value);
  }

  std::vector<Tensor> dino_images(images.images.begin(), images.images.begin() + static_cast<std::ptrdiff_t>(std::min(kDinoImages, images.size())));
  std::vector<std::string> dino_ids(images.ids.begin(), images.ids.begin() + static_cast<std::ptrdiff_t>(dino_images.size()));
  std::vector<double> dino;
  for (double ratio : {0.0, 0.5, 1.0}) {
    const AblationConfig cfg{kAblate, ratio == 0.0 ? AblationMode::none : AblationMode::uninformed, ratio, 1.0, 3};
    dino.push_back(eval_dino_loss(bundle, dino_images, dino_ids, &trained.at(kAblate), cfg));
  }
  const bool dino_ok = dino[0] < dino[1] && dino[1] < dino[2];

  TrainRecipe pos_recipe;
  const double mid_rmse = train_position_probe(full.at(kMidPos), a.grid_side, pos_recipe).rmse;
  const double deep_rmse = train_position_probe(full.at(kDeepPos), a.grid_side, pos_recipe).rmse;
  const bool pos_ok = deep_rmse > mid_rmse;

  const double secs = seconds_since(t0);
  const bool ok = sweep_ok && cross_ok && attn_ok && dino_ok && pos_ok && secs < 7200.0;
  return {ok ? Verdict::pass : Verdict::fail,
          fmt("best quad %.3f at normalized layer %.2f; cross 15-18 %.3f; ", best, curve.peak_normalized, cross) + attn_detail +
              fmt("dino %.4f/%.4f/%.4f; pos rmse L12 %.4f L21 %.4f; %.0fs", dino[0], dino[1], dino[2], mid_rmse, deep_rmse, secs)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient-correctness", gradient_correctness},
      {"oracle-equivalence", oracle_equivalence},
      {"identical-token-theorem", identical_token_theorem},
      {"planted-recovery", planted_recovery},
      {"subspace-confinement", subspace_confinement},
      {"monotonicity", monotonicity},
      {"dinov2-ade20k (optional)", data_dependent},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {Verdict::fail, std::string("error: ") + e.what()};
    }
    const char* tag = o.verdict == Verdict::pass ? "PASS" : o.verdict == Verdict::skip ? "SKIP" : "FAIL";
    failed += o.verdict == Verdict::fail;
    std::printf("%s  %-26s %s\n", tag, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
