#pragma once

// ModelBundle: a ViT encoder stored as a TensorArchive.
//
// All linear weights are stored input-major, [in, out], so y = x W + b.
// Tensor names:
//   patch_embed.weight [C*P*P, d], patch_embed.bias [d], pos_embed [T, d],
//   cls_token [d] (when class_token),
//   blocks.{i}.norm1.{weight,bias} [d], blocks.{i}.attn.qkv.{weight [d,3d], bias [3d]},
//   blocks.{i}.attn.proj.{weight [d,d], bias [d]}, blocks.{i}.ls1 [d] (layer_scale),
//   blocks.{i}.norm2.{weight,bias}, blocks.{i}.mlp.fc1.{weight [d,m], bias [m]},
//   blocks.{i}.mlp.fc2.{weight [m,d], bias [d]}, blocks.{i}.ls2 [d] (layer_scale),
//   norm.{weight,bias} (final_norm),
//   dino_head.mlp.{j}.{weight,bias}, dino_head.last.weight [b, K], dino_head.center [K].
// The qkv output columns are [q | k | v], each split contiguously across heads.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vitbind/archive.hpp"
#include "vitbind/errors.hpp"
#include "vitbind/rng.hpp"
#include "vitbind/tensor.hpp"

namespace vitbind {

enum class NormPlacement { pre, post };
enum class Activation { gelu, relu };

struct Architecture {
  std::size_t depth = 0;
  std::size_t width = 0;
  std::size_t heads = 1;
  std::size_t patch_size = 14;
  std::size_t grid_side = 37;
  std::size_t channels = 3;
  std::size_t mlp_hidden = 0;
  NormPlacement norm = NormPlacement::pre;
  Activation activation = Activation::gelu;
  bool class_token = true;
  bool layer_scale = false;
  bool final_norm = true;
  double layer_norm_eps = 1e-6;

  std::size_t patches() const { return grid_side * grid_side; }
  std::size_t tokens() const { return patches() + (class_token ? 1 : 0); }
  std::size_t patch_offset() const { return class_token ? 1 : 0; }
  std::size_t image_side() const { return grid_side * patch_size; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t head_dim() const { return width / heads; }
};

inline nlohmann::json to_json(const Architecture& a) {
  return {{"depth", a.depth},
          {"width", a.width},
          {"heads", a.heads},
          {"patch_size", a.patch_size},
          {"grid_side", a.grid_side},
          {"channels", a.channels},
          {"mlp_hidden", a.mlp_hidden},
          {"norm_placement", a.norm == NormPlacement::pre ? "pre" : "post"},
          {"activation", a.activation == Activation::gelu ? "gelu" : "relu"},
          {"class_token", a.class_token},
          {"layer_scale", a.layer_scale},
          {"final_norm", a.final_norm},
          {"layer_norm_eps", a.layer_norm_eps}};
}

inline Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture a;
  try {
    a.depth = j.at("depth").get<std::size_t>();
    a.width = j.at("width").get<std::size_t>();
    a.heads = j.at("heads").get<std::size_t>();
    a.patch_size = j.at("patch_size").get<std::size_t>();
    a.grid_side = j.at("grid_side").get<std::size_t>();
    a.channels = j.value("channels", std::size_t{3});
    a.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    const auto norm = j.at("norm_placement").get<std::string>();
    if (norm != "pre" && norm != "post") throw DataError("norm_placement must be 'pre' or 'post', got '" + norm + "'");
    a.norm = norm == "pre" ? NormPlacement::pre : NormPlacement::post;
    const auto act = j.value("activation", std::string("gelu"));
    if (act != "gelu" && act != "relu") throw DataError("activation must be 'gelu' or 'relu', got '" + act + "'");
    a.activation = act == "gelu" ? Activation::gelu : Activation::relu;
    a.class_token = j.value("class_token", true);
    a.layer_scale = j.value("layer_scale", false);
    a.final_norm = j.value("final_norm", true);
    a.layer_norm_eps = j.value("layer_norm_eps", 1e-6);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad architecture descriptor: ") + e.what());
  }
  if (a.depth == 0 || a.width == 0 || a.heads == 0 || a.width % a.heads != 0 || a.mlp_hidden == 0 ||
      a.patch_size == 0 || a.grid_side == 0)
    throw DataError("inconsistent architecture descriptor " + to_json(a).dump());
  return a;
}

struct LayerNormWeights {
  Tensor gamma;
  Tensor beta;
};

struct LayerWeights {
  LayerNormWeights norm1, norm2;
  Tensor qkv_w, qkv_b;
  Tensor proj_w, proj_b;
  Tensor fc1_w, fc1_b;
  Tensor fc2_w, fc2_b;
  Tensor ls1, ls2;  // empty unless layer_scale
};

struct DinoHead {
  std::vector<std::pair<Tensor, Tensor>> mlp;  // GELU between layers, none after the last
  Tensor last_w;                               // [bottleneck, K], applied after L2 normalisation
  Tensor center;                               // [K]
  double student_temp = 0.1;
  double teacher_temp = 0.04;
};

struct ModelBundle {
  Architecture arch;
  Tensor patch_w, patch_b;
  Tensor pos_embed;
  Tensor cls_token;
  std::vector<LayerWeights> layers;
  std::optional<LayerNormWeights> final_norm;
  std::optional<DinoHead> dino;
};

namespace detail {

inline void expect_shape(const Tensor& t, const Shape& want, const std::string& name) {
  if (t.shape() != want)
    throw DataError("bundle tensor '" + name + "' has shape " + shape_string(t.shape()) + ", expected " + shape_string(want));
  if (!t.all_finite()) throw DataError("bundle tensor '" + name + "' contains non-finite values");
}

inline std::string block_name(std::size_t i, const char* suffix) { return "blocks." + std::to_string(i) + "." + suffix; }

}  // namespace detail

// Every shape the forward pass relies on is checked here, so a bundle that
// validates never fails a shape check downstream.
inline void validate_bundle(const ModelBundle& b) {
  const Architecture& a = b.arch;
  const std::size_t d = a.width, m = a.mlp_hidden;
  using detail::expect_shape;
  if (a.width % a.heads != 0) throw DataError("width is not divisible by heads");
  expect_shape(b.patch_w, {a.patch_dim(), d}, "patch_embed.weight");
  expect_shape(b.patch_b, {d}, "patch_embed.bias");
  expect_shape(b.pos_embed, {a.tokens(), d}, "pos_embed");
  if (a.class_token) expect_shape(b.cls_token, {d}, "cls_token");
  if (b.layers.size() != a.depth)
    throw DataError("bundle has " + std::to_string(b.layers.size()) + " layers, architecture says " + std::to_string(a.depth));
  for (std::size_t i = 0; i < b.layers.size(); ++i) {
    const LayerWeights& l = b.layers[i];
    using detail::block_name;
    expect_shape(l.norm1.gamma, {d}, block_name(i, "norm1.weight"));
    expect_shape(l.norm1.beta, {d}, block_name(i, "norm1.bias"));
    expect_shape(l.norm2.gamma, {d}, block_name(i, "norm2.weight"));
    expect_shape(l.norm2.beta, {d}, block_name(i, "norm2.bias"));
    expect_shape(l.qkv_w, {d, 3 * d}, block_name(i, "attn.qkv.weight"));
    expect_shape(l.qkv_b, {3 * d}, block_name(i, "attn.qkv.bias"));
    expect_shape(l.proj_w, {d, d}, block_name(i, "attn.proj.weight"));
    expect_shape(l.proj_b, {d}, block_name(i, "attn.proj.bias"));
    expect_shape(l.fc1_w, {d, m}, block_name(i, "mlp.fc1.weight"));
    expect_shape(l.fc1_b, {m}, block_name(i, "mlp.fc1.bias"));
    expect_shape(l.fc2_w, {m, d}, block_name(i, "mlp.fc2.weight"));
    expect_shape(l.fc2_b, {d}, block_name(i, "mlp.fc2.bias"));
    if (a.layer_scale) {
      expect_shape(l.ls1, {d}, block_name(i, "ls1"));
      expect_shape(l.ls2, {d}, block_name(i, "ls2"));
    }
  }
  if (a.final_norm) {
    if (!b.final_norm) throw DataError("architecture requests a final norm but the bundle has none");
    expect_shape(b.final_norm->gamma, {d}, "norm.weight");
    expect_shape(b.final_norm->beta, {d}, "norm.bias");
  }
  if (b.dino) {
    std::size_t in = d;
    for (std::size_t j = 0; j < b.dino->mlp.size(); ++j) {
      const auto& [w, bias] = b.dino->mlp[j];
      const std::string n = "dino_head.mlp." + std::to_string(j);
      if (w.rank() != 2 || w.dim(0) != in) throw DataError("bundle tensor '" + n + ".weight' has shape " + shape_string(w.shape()));
      expect_shape(bias, {w.dim(1)}, n + ".bias");
      in = w.dim(1);
    }
    if (b.dino->last_w.rank() != 2 || b.dino->last_w.dim(0) != in)
      throw DataError("bundle tensor 'dino_head.last.weight' has shape " + shape_string(b.dino->last_w.shape()));
    expect_shape(b.dino->center, {b.dino->last_w.dim(1)}, "dino_head.center");
    if (!(b.dino->student_temp > 0 && b.dino->teacher_temp > 0)) throw DataError("DINO temperatures must be positive");
  }
}

inline ArchiveWriter bundle_to_archive(const ModelBundle& b) {
  validate_bundle(b);
  ArchiveWriter w;
  nlohmann::json meta = {{"kind", "model_bundle"}, {"architecture", to_json(b.arch)}};
  w.add("patch_embed.weight", b.patch_w);
  w.add("patch_embed.bias", b.patch_b);
  w.add("pos_embed", b.pos_embed);
  if (b.arch.class_token) w.add("cls_token", b.cls_token);
  for (std::size_t i = 0; i < b.layers.size(); ++i) {
    const LayerWeights& l = b.layers[i];
    using detail::block_name;
    w.add(block_name(i, "norm1.weight"), l.norm1.gamma);
    w.add(block_name(i, "norm1.bias"), l.norm1.beta);
    w.add(block_name(i, "attn.qkv.weight"), l.qkv_w);
    w.add(block_name(i, "attn.qkv.bias"), l.qkv_b);
    w.add(block_name(i, "attn.proj.weight"), l.proj_w);
    w.add(block_name(i, "attn.proj.bias"), l.proj_b);
    w.add(block_name(i, "norm2.weight"), l.norm2.gamma);
    w.add(block_name(i, "norm2.bias"), l.norm2.beta);
    w.add(block_name(i, "mlp.fc1.weight"), l.fc1_w);
    w.add(block_name(i, "mlp.fc1.bias"), l.fc1_b);
    w.add(block_name(i, "mlp.fc2.weight"), l.fc2_w);
    w.add(block_name(i, "mlp.fc2.bias"), l.fc2_b);
    if (b.arch.layer_scale) {
      w.add(block_name(i, "ls1"), l.ls1);
      w.add(block_name(i, "ls2"), l.ls2);
    }
  }
  if (b.final_norm) {
    w.add("norm.weight", b.final_norm->gamma);
    w.add("norm.bias", b.final_norm->beta);
  }
  if (b.dino) {
    for (std::size_t j = 0; j < b.dino->mlp.size(); ++j) {
      w.add("dino_head.mlp." + std::to_string(j) + ".weight", b.dino->mlp[j].first);
      w.add("dino_head.mlp." + std::to_string(j) + ".bias", b.dino->mlp[j].second);
    }
    w.add("dino_head.last.weight", b.dino->last_w);
    w.add("dino_head.center", b.dino->center);
    meta["dino"] = {{"head_layers", b.dino->mlp.size()},
                    {"student_temp", b.dino->student_temp},
                    {"teacher_temp", b.dino->teacher_temp}};
  }
  w.metadata() = meta;
  return w;
}

inline ModelBundle bundle_from_archive(const TensorArchive& ar) {
  const auto& meta = ar.metadata();
  if (meta.value("kind", std::string()) != "model_bundle") throw DataError(ar.path() + " is not a model_bundle archive");
  if (!meta.contains("architecture")) throw DataError(ar.path() + " lacks an architecture descriptor");
  ModelBundle b;
  b.arch = architecture_from_json(meta["architecture"]);
  b.patch_w = ar.tensor("patch_embed.weight");
  b.patch_b = ar.tensor("patch_embed.bias");
  b.pos_embed = ar.tensor("pos_embed");
  if (b.arch.class_token) b.cls_token = ar.tensor("cls_token");
  for (std::size_t i = 0; i < b.arch.depth; ++i) {
    using detail::block_name;
    LayerWeights l;
    l.norm1 = {ar.tensor(block_name(i, "norm1.weight")), ar.tensor(block_name(i, "norm1.bias"))};
    l.norm2 = {ar.tensor(block_name(i, "norm2.weight")), ar.tensor(block_name(i, "norm2.bias"))};
    l.qkv_w = ar.tensor(block_name(i, "attn.qkv.weight"));
    l.qkv_b = ar.tensor(block_name(i, "attn.qkv.bias"));
    l.proj_w = ar.tensor(block_name(i, "attn.proj.weight"));
    l.proj_b = ar.tensor(block_name(i, "attn.proj.bias"));
    l.fc1_w = ar.tensor(block_name(i, "mlp.fc1.weight"));
    l.fc1_b = ar.tensor(block_name(i, "mlp.fc1.bias"));
    l.fc2_w = ar.tensor(block_name(i, "mlp.fc2.weight"));
    l.fc2_b = ar.tensor(block_name(i, "mlp.fc2.bias"));
    if (b.arch.layer_scale) {
      l.ls1 = ar.tensor(block_name(i, "ls1"));
      l.ls2 = ar.tensor(block_name(i, "ls2"));
    }
    b.layers.push_back(std::move(l));
  }
  if (b.arch.final_norm) b.final_norm = LayerNormWeights{ar.tensor("norm.weight"), ar.tensor("norm.bias")};
  if (meta.contains("dino")) {
    DinoHead h;
    const auto& dj = meta["dino"];
    const auto n = dj.value("head_layers", std::size_t{0});
    for (std::size_t j = 0; j < n; ++j)
      h.mlp.emplace_back(ar.tensor("dino_head.mlp." + std::to_string(j) + ".weight"),
                         ar.tensor("dino_head.mlp." + std::to_string(j) + ".bias"));
    h.last_w = ar.tensor("dino_head.last.weight");
    h.center = ar.tensor("dino_head.center");
    h.student_temp = dj.value("student_temp", 0.1);
    h.teacher_temp = dj.value("teacher_temp", 0.04);
    b.dino = std::move(h);
  }
  validate_bundle(b);
  return b;
}

inline ModelBundle load_bundle(const std::string& path) { return bundle_from_archive(TensorArchive::read(path)); }

// Random weights for tests, demos, and synthetic pipelines. `scale` sets the
// standard deviation of weight entries relative to 1/sqrt(fan_in).
inline ModelBundle make_random_bundle(const Architecture& arch, std::uint64_t seed, double scale = 1.0,
                                      std::size_t dino_out = 0) {
  Rng rng(seed);
  auto randn = [&](Shape s, double stddev) {
    Tensor t(std::move(s));
    for (auto& v : t.data()) v = static_cast<float>(rng.normal() * stddev);
    return t;
  };
  auto affine = [&](std::size_t n, double spread) {
    Tensor g(Shape{n}), b(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = static_cast<float>(1.0 + spread * rng.normal());
      b[i] = static_cast<float>(spread * rng.normal());
    }
    return LayerNormWeights{g, b};
  };
  const std::size_t d = arch.width, m = arch.mlp_hidden;
  ModelBundle b;
  b.arch = arch;
  b.patch_w = randn({arch.patch_dim(), d}, scale / std::sqrt(static_cast<double>(arch.patch_dim())));
  b.patch_b = randn({d}, 0.02);
  b.pos_embed = randn({arch.tokens(), d}, 0.5);
  if (arch.class_token) b.cls_token = randn({d}, 0.5);
  for (std::size_t i = 0; i < arch.depth; ++i) {
    LayerWeights l;
    l.norm1 = affine(d, 0.1);
    l.norm2 = affine(d, 0.1);
    l.qkv_w = randn({d, 3 * d}, scale / std::sqrt(static_cast<double>(d)));
    l.qkv_b = randn({3 * d}, 0.02);
    l.proj_w = randn({d, d}, scale / std::sqrt(static_cast<double>(d)));
    l.proj_b = randn({d}, 0.02);
    l.fc1_w = randn({d, m}, scale / std::sqrt(static_cast<double>(d)));
    l.fc1_b = randn({m}, 0.02);
    l.fc2_w = randn({m, d}, scale / std::sqrt(static_cast<double>(m)));
    l.fc2_b = randn({d}, 0.02);
    if (arch.layer_scale) {
      l.ls1 = randn({d}, 0.1);
      l.ls2 = randn({d}, 0.1);
    }
    b.layers.push_back(std::move(l));
  }
  if (arch.final_norm) b.final_norm = affine(d, 0.1);
  if (dino_out > 0) {
    DinoHead h;
    const std::size_t hidden = 2 * d, bottleneck = std::max<std::size_t>(4, d / 2);
    h.mlp.emplace_back(randn({d, hidden}, 1.0 / std::sqrt(static_cast<double>(d))), randn({hidden}, 0.02));
    h.mlp.emplace_back(randn({hidden, bottleneck}, 1.0 / std::sqrt(static_cast<double>(hidden))), randn({bottleneck}, 0.02));
    h.last_w = randn({bottleneck, dino_out}, 1.0);
    h.center = randn({dino_out}, 0.1);
    b.dino = std::move(h);
  }
  validate_bundle(b);
  return b;
}

}  // namespace vitbind
