#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "vitbind/errors.hpp"
#include "vitbind/model.hpp"
#include "vitbind/parallel.hpp"
#include "vitbind/tensor.hpp"

namespace vitbind {

// Token embeddings after patch embedding and positional add. Row 0 is the
// class token when `class_token` is set; patch p is row p + patch_offset().
struct PatchSequence {
  Tensor tokens;  // [T, d]
  std::size_t grid_side = 0;
  bool class_token = false;

  std::size_t patch_offset() const { return class_token ? 1 : 0; }
  std::size_t patches() const { return grid_side * grid_side; }
};

// One block's outputs. `h` is the residual stream leaving the block (after any
// hook edit), `s` the post-attention state inside it.
struct LayerRecord {
  Tensor h;               // [T, d]
  Tensor s;               // [T, d]
  Tensor attention;       // [heads, T, T] post-softmax, empty if not captured
  Tensor attention_mean;  // [T, T] head mean, empty if not captured
};

struct LayerTrace {
  Tensor embeddings;  // block-0 input
  std::vector<LayerRecord> layers;
  std::size_t grid_side = 0;
  bool class_token = false;

  std::size_t patch_offset() const { return class_token ? 1 : 0; }
  std::size_t patches() const { return grid_side * grid_side; }

  // Patch rows (class token dropped) of h at `layer`.
  Tensor patch_embeddings(std::size_t layer) const {
    const Tensor& h = layers.at(layer).h;
    const std::size_t off = patch_offset();
    Tensor out = Tensor::matrix(patches(), h.cols());
    std::copy(h.data().begin() + static_cast<std::ptrdiff_t>(off * h.cols()), h.data().end(), out.data().begin());
    return out;
  }
};

enum class HookMode { replace, add };

// Edit applied to h at `layer` (the output of block `layer`) before block
// layer+1 consumes it. An empty `values` tensor is the identity hook.
struct HookPlan {
  std::size_t layer = 0;
  HookMode mode = HookMode::add;
  Tensor values;  // [T, d]

  bool is_identity() const { return values.empty(); }
};

struct TraceOptions {
  bool capture_attention = true;
  bool keep_per_head = true;
};

namespace detail {

inline void check_finite(const Tensor& t, std::size_t layer, const char* sublayer) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t[i]))
      throw NumericError("non-finite value in layer " + std::to_string(layer) + " " + sublayer + " at element " +
                         std::to_string(i));
}

inline void add_bias(Tensor& x, const Tensor& bias) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

}  // namespace detail

inline Tensor layer_norm(const Tensor& x, const LayerNormWeights& w, double eps) {
  Tensor out(x.shape());
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) o[c] = static_cast<float>((in[c] - mean) * inv * w.gamma[c] + w.beta[c]);
  }
  return out;
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  detail::add_bias(y, b);
  return y;
}

// Multi-head self-attention. Returns the projected output and the per-head
// post-softmax weights [heads, T, T].
inline std::pair<Tensor, Tensor> multi_head_attention(const Tensor& x, const LayerWeights& w, const Architecture& arch) {
  const std::size_t t = x.rows(), d = arch.width, heads = arch.heads, dh = arch.head_dim();
  const Tensor qkv = linear(x, w.qkv_w, w.qkv_b);  // [T, 3d]
  Tensor weights(Shape{heads, t, t});
  Tensor concat = Tensor::matrix(t, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  parallel_for(heads, [&](std::size_t h) {
    const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
    std::vector<double> logits(t), acc(dh);
    for (std::size_t i = 0; i < t; ++i) {
      const float* qi = qkv.data().data() + i * 3 * d + qo;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < t; ++j) {
        const float* kj = qkv.data().data() + j * 3 * d + ko;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += static_cast<double>(qi[c]) * kj[c];
        logits[j] = s * scale;
        mx = std::max(mx, logits[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        logits[j] = std::exp(logits[j] - mx);
        z += logits[j];
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      float* wrow = weights.data().data() + (h * t + i) * t;
      for (std::size_t j = 0; j < t; ++j) {
        const double a = logits[j] / z;
        wrow[j] = static_cast<float>(a);
        const float* vj = qkv.data().data() + j * 3 * d + vo;
        for (std::size_t c = 0; c < dh; ++c) acc[c] += a * vj[c];
      }
      for (std::size_t c = 0; c < dh; ++c) concat(i, qo + c) = static_cast<float>(acc[c]);
    }
  });
  return {linear(concat, w.proj_w, w.proj_b), std::move(weights)};
}

inline Tensor feed_forward(const Tensor& x, const LayerWeights& w, Activation act) {
  Tensor hidden = linear(x, w.fc1_w, w.fc1_b);
  for (auto& v : hidden.data()) v = static_cast<float>(act == Activation::gelu ? detail::gelu(v) : std::max(0.0f, v));
  return linear(hidden, w.fc2_w, w.fc2_b);
}

struct EncoderLayerOutput {
  Tensor out;        // h^(l+1)
  Tensor s;          // post-attention state
  Tensor attention;  // [heads, T, T]
};

// One encoder block. Post-norm follows s = LN(h + MHA(h)), h' = LN(s + FFN(s));
// pre-norm follows s = h + MHA(LN(h)), h' = s + FFN(LN(s)). Layer scale, when
// present, multiplies the MHA and FFN outputs.
inline EncoderLayerOutput encoder_layer_forward(const Tensor& tokens, const LayerWeights& w, const Architecture& arch,
                                                std::size_t layer_index = 0) {
  auto scaled_residual = [&](const Tensor& base, const Tensor& update, const Tensor& ls) {
    Tensor out = base;
    const std::size_t d = base.cols();
    for (std::size_t r = 0; r < base.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) out(r, c) += ls.empty() ? update(r, c) : update(r, c) * ls[c];
    return out;
  };
  EncoderLayerOutput res;
  if (arch.norm == NormPlacement::pre) {
    auto [attn, weights] = multi_head_attention(layer_norm(tokens, w.norm1, arch.layer_norm_eps), w, arch);
    detail::check_finite(attn, layer_index, "attention");
    res.s = scaled_residual(tokens, attn, w.ls1);
    const Tensor ffn = feed_forward(layer_norm(res.s, w.norm2, arch.layer_norm_eps), w, arch.activation);
    detail::check_finite(ffn, layer_index, "feed-forward");
    res.out = scaled_residual(res.s, ffn, w.ls2);
    res.attention = std::move(weights);
  } else {
    auto [attn, weights] = multi_head_attention(tokens, w, arch);
    detail::check_finite(attn, layer_index, "attention");
    res.s = layer_norm(scaled_residual(tokens, attn, w.ls1), w.norm1, arch.layer_norm_eps);
    const Tensor ffn = feed_forward(res.s, w, arch.activation);
    detail::check_finite(ffn, layer_index, "feed-forward");
    res.out = layer_norm(scaled_residual(res.s, ffn, w.ls2), w.norm2, arch.layer_norm_eps);
    res.attention = std::move(weights);
  }
  detail::check_finite(res.out, layer_index, "output");
  return res;
}

// Embeds raw flattened patches [N, C*P*P] (channel-major within a patch) and
// adds positional embeddings.
inline PatchSequence embed_patches(const Tensor& patches, const ModelBundle& bundle) {
  const Architecture& a = bundle.arch;
  if (patches.rows() != a.patches() || patches.cols() != a.patch_dim()) {
    throw DataError("patch tensor " + shape_string(patches.shape()) + " does not match " + std::to_string(a.patches()) +
                    " patches of " + std::to_string(a.patch_dim()) + " values");
  }
  const Tensor e = linear(patches, bundle.patch_w, bundle.patch_b);
  PatchSequence seq;
  seq.grid_side = a.grid_side;
  seq.class_token = a.class_token;
  seq.tokens = Tensor::matrix(a.tokens(), a.width);
  const std::size_t off = a.patch_offset();
  if (a.class_token)
    for (std::size_t c = 0; c < a.width; ++c) seq.tokens(0, c) = bundle.cls_token[c] + bundle.pos_embed(0, c);
  for (std::size_t p = 0; p < a.patches(); ++p)
    for (std::size_t c = 0; c < a.width; ++c) seq.tokens(p + off, c) = e(p, c) + bundle.pos_embed(p + off, c);
  return seq;
}

// Splits a [C, H, W] image into row-major patches.
inline Tensor image_to_patches(const Tensor& image, const Architecture& a) {
  if (image.rank() != 3 || image.dim(0) != a.channels) throw DataError("image must be [C, H, W] with C = " + std::to_string(a.channels));
  const std::size_t hgt = image.dim(1), wid = image.dim(2), p = a.patch_size;
  if (hgt % p != 0 || wid % p != 0) {
    throw DataError("image side " + std::to_string(hgt) + "x" + std::to_string(wid) + " is not divisible by patch size " +
                    std::to_string(p));
  }
  if (hgt != a.image_side() || wid != a.image_side()) {
    throw DataError("image side " + std::to_string(hgt) + "x" + std::to_string(wid) + " does not match the model input " +
                    std::to_string(a.image_side()));
  }
  const std::size_t side = hgt / p;
  Tensor out = Tensor::matrix(side * side, a.patch_dim());
  for (std::size_t gy = 0; gy < side; ++gy)
    for (std::size_t gx = 0; gx < side; ++gx) {
      auto row = out.row(gy * side + gx);
      std::size_t k = 0;
      for (std::size_t c = 0; c < a.channels; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) row[k++] = image[(c * hgt + gy * p + y) * wid + gx * p + x];
    }
  return out;
}

inline PatchSequence patch_embed(const Tensor& image, const ModelBundle& bundle) {
  return embed_patches(image_to_patches(image, bundle.arch), bundle);
}

inline void validate_hooks(std::span<const HookPlan> hooks, std::size_t upto_layer, const Architecture& a, std::size_t tokens) {
  for (std::size_t i = 0; i < hooks.size(); ++i) {
    const HookPlan& h = hooks[i];
    if (h.layer >= a.depth || h.layer >= upto_layer)
      throw ConfigError("hook at layer " + std::to_string(h.layer) + " is outside the traced range");
    if (i > 0 && hooks[i - 1].layer > h.layer) throw ConfigError("hooks must be sorted by layer");
    if (i > 0 && hooks[i - 1].layer == h.layer) throw ConfigError("conflicting hooks on layer " + std::to_string(h.layer));
    if (!h.is_identity() && h.values.shape() != Shape{tokens, a.width})
      throw ConfigError("hook at layer " + std::to_string(h.layer) + " has shape " + shape_string(h.values.shape()) +
                        ", expected " + shape_string({tokens, a.width}));
  }
}

inline void apply_hook(Tensor& h, const HookPlan& hook) {
  if (hook.is_identity()) return;
  if (hook.mode == HookMode::replace) {
    h = hook.values;
    return;
  }
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += hook.values[i];
}

// Runs blocks [0, upto_layer) and records every block's h, s and attention.
inline LayerTrace forward_with_trace(const PatchSequence& seq, const ModelBundle& bundle, std::size_t upto_layer,
                                     std::span<const HookPlan> hooks = {}, TraceOptions options = {}) {
  const Architecture& a = bundle.arch;
  if (upto_layer > a.depth) throw ConfigError("upto_layer " + std::to_string(upto_layer) + " exceeds depth " + std::to_string(a.depth));
  if (seq.tokens.rows() != a.tokens() || seq.tokens.cols() != a.width)
    throw DataError("sequence shape " + shape_string(seq.tokens.shape()) + " does not match the bundle");
  validate_hooks(hooks, upto_layer, a, a.tokens());

  LayerTrace trace;
  trace.embeddings = seq.tokens;
  trace.grid_side = seq.grid_side;
  trace.class_token = seq.class_token;
  std::size_t next_hook = 0;
  const Tensor* current = &trace.embeddings;
  for (std::size_t l = 0; l < upto_layer; ++l) {
    EncoderLayerOutput o = encoder_layer_forward(*current, bundle.layers[l], a, l);
    LayerRecord rec;
    rec.h = std::move(o.out);
    rec.s = std::move(o.s);
    if (next_hook < hooks.size() && hooks[next_hook].layer == l) apply_hook(rec.h, hooks[next_hook++]);
    if (options.capture_attention) {
      const std::size_t t = a.tokens();
      rec.attention_mean = Tensor::matrix(t, t);
      for (std::size_t i = 0; i < t * t; ++i) {
        double acc = 0.0;
        for (std::size_t h = 0; h < a.heads; ++h) acc += o.attention[h * t * t + i];
        rec.attention_mean[i] = static_cast<float>(acc / static_cast<double>(a.heads));
      }
      if (options.keep_per_head) rec.attention = std::move(o.attention);
    }
    trace.layers.push_back(std::move(rec));
    current = &trace.layers.back().h;
  }
  return trace;
}

// Plain forward through every block, no hooks, no attention capture.
inline Tensor forward(const PatchSequence& seq, const ModelBundle& bundle) {
  LayerTrace t = forward_with_trace(seq, bundle, bundle.arch.depth, {}, TraceOptions{false, false});
  return std::move(t.layers.back().h);
}

// Runs blocks [from_layer, depth) starting from residual stream `h`.
inline Tensor continue_forward(Tensor h, const ModelBundle& bundle, std::size_t from_layer) {
  if (from_layer > bundle.arch.depth) throw ConfigError("continue_forward: layer " + std::to_string(from_layer) + " exceeds depth");
  for (std::size_t l = from_layer; l < bundle.arch.depth; ++l) h = encoder_layer_forward(h, bundle.layers[l], bundle.arch, l).out;
  return h;
}

inline Tensor apply_final_norm(const Tensor& tokens, const ModelBundle& bundle) {
  if (!bundle.final_norm) return tokens;
  return layer_norm(tokens, *bundle.final_norm, bundle.arch.layer_norm_eps);
}

// DINO head logits for the image summary token (class token, or the patch
// mean when the model has none) taken after the final norm.
inline std::vector<double> dino_head_logits(const Tensor& final_tokens, const ModelBundle& bundle) {
  if (!bundle.dino) throw UnsupportedError("bundle has no DINO head tensors; DINO loss is unsupported for this model");
  const Tensor normed = apply_final_norm(final_tokens, bundle);
  Tensor x = Tensor::matrix(1, bundle.arch.width);
  if (bundle.arch.class_token) {
    std::copy(normed.row(0).begin(), normed.row(0).end(), x.row(0).begin());
  } else {
    for (std::size_t c = 0; c < bundle.arch.width; ++c) {
      double acc = 0.0;
      for (std::size_t r = 0; r < normed.rows(); ++r) acc += normed(r, c);
      x(0, c) = static_cast<float>(acc / static_cast<double>(normed.rows()));
    }
  }
  const DinoHead& head = *bundle.dino;
  for (std::size_t j = 0; j < head.mlp.size(); ++j) {
    x = linear(x, head.mlp[j].first, head.mlp[j].second);
    if (j + 1 < head.mlp.size())
      for (auto& v : x.data()) v = static_cast<float>(detail::gelu(v));
  }
  const double norm = std::sqrt(squared_norm(x.row(0)));
  if (norm > 0)
    for (auto& v : x.data()) v = static_cast<float>(v / std::max(norm, 1e-12));
  const Tensor logits = matmul(x, head.last_w);
  return {logits.data().begin(), logits.data().end()};
}

}  // namespace vitbind
