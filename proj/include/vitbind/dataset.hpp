#pragma once

// On-disk image sets and activation stores.
//
// Image set archive: kind "image_set", metadata "images" (ids in order),
// tensors images/<id> [C, H, W].
// Activation archive: kind "activations", metadata "images", "layers",
// "attention_layers", "grid_side"; tensors act/<layer>/<id> [N, d] (patch rows,
// class token dropped) and attn/<layer>/<id> [N, N] (head-mean attention of
// that block restricted to patch tokens).

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "vitbind/archive.hpp"
#include "vitbind/parallel.hpp"
#include "vitbind/probes.hpp"
#include "vitbind/vit.hpp"

namespace vitbind {

struct ImageSet {
  std::vector<std::string> ids;
  std::vector<Tensor> images;  // [C, H, W]

  std::size_t size() const { return images.size(); }
};

inline ArchiveWriter images_to_archive(const ImageSet& s) {
  if (s.ids.size() != s.images.size()) throw DataError("image set: one id per image required");
  ArchiveWriter w;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.images[i].rank() != 3) throw DataError("image '" + s.ids[i] + "' must be [C, H, W], got " + shape_string(s.images[i].shape()));
    w.add("images/" + s.ids[i], s.images[i]);
  }
  w.metadata() = {{"kind", "image_set"}, {"images", s.ids}};
  return w;
}

inline ImageSet images_from_archive(const TensorArchive& ar) {
  if (ar.metadata().value("kind", std::string()) != "image_set") throw DataError(ar.path() + " is not an image_set archive");
  ImageSet s;
  s.ids = ar.metadata().at("images").get<std::vector<std::string>>();
  for (const auto& id : s.ids) s.images.push_back(ar.tensor("images/" + id));
  return s;
}

inline ImageSet load_images(const std::string& path) { return images_from_archive(TensorArchive::read(path)); }

// [N, d] embeddings on a side x side grid as a d-channel image with one pixel
// per patch, for bundles with patch size 1 and an identity patch embedding.
inline Tensor embeddings_to_image(const Tensor& e, std::size_t side) {
  if (e.rows() != side * side) throw DataError("embeddings_to_image: row count is not side^2");
  const std::size_t d = e.cols();
  Tensor img(Shape{d, side, side});
  for (std::size_t p = 0; p < e.rows(); ++p)
    for (std::size_t c = 0; c < d; ++c) img[c * side * side + p] = e(p, c);
  return img;
}

struct ActivationStore {
  std::vector<std::string> ids;
  std::size_t grid_side = 0;
  std::map<std::size_t, std::vector<Tensor>> patches;    // layer -> per image [N, d]
  std::map<std::size_t, std::vector<Tensor>> attention;  // layer -> per image [N, N]

  bool has_layer(std::size_t l) const { return patches.count(l) != 0; }
  bool has_attention(std::size_t l) const { return attention.count(l) != 0; }

  ActivationSet layer_set(std::size_t l) const {
    const auto it = patches.find(l);
    if (it == patches.end()) throw DataError("activations have no layer " + std::to_string(l));
    return ActivationSet{l, it->second};
  }
};

inline ArchiveWriter activations_to_archive(const ActivationStore& s) {
  ArchiveWriter w;
  std::vector<std::size_t> layers, attn_layers;
  for (const auto& [l, imgs] : s.patches) {
    layers.push_back(l);
    for (std::size_t i = 0; i < imgs.size(); ++i) w.add("act/" + std::to_string(l) + "/" + s.ids.at(i), imgs[i]);
  }
  for (const auto& [l, imgs] : s.attention) {
    attn_layers.push_back(l);
    for (std::size_t i = 0; i < imgs.size(); ++i) w.add("attn/" + std::to_string(l) + "/" + s.ids.at(i), imgs[i]);
  }
  w.metadata() = {{"kind", "activations"}, {"images", s.ids}, {"layers", layers}, {"attention_layers", attn_layers}, {"grid_side", s.grid_side}};
  return w;
}

// Loads the requested layers (all when `layers` is empty) and attention layers.
inline ActivationStore activations_from_archive(const TensorArchive& ar, const std::vector<std::size_t>& layers = {},
                                                const std::vector<std::size_t>& attn_layers = {}) {
  const auto& m = ar.metadata();
  if (m.value("kind", std::string()) != "activations") throw DataError(ar.path() + " is not an activations archive");
  ActivationStore s;
  s.ids = m.at("images").get<std::vector<std::string>>();
  s.grid_side = m.at("grid_side").get<std::size_t>();
  const auto have = m.at("layers").get<std::vector<std::size_t>>();
  const auto have_attn = m.value("attention_layers", std::vector<std::size_t>{});
  auto load = [&](const std::vector<std::size_t>& want, const std::vector<std::size_t>& avail, const char* prefix, auto& dst, bool all) {
    for (std::size_t l : all ? avail : want) {
      if (std::find(avail.begin(), avail.end(), l) == avail.end())
        throw DataError(ar.path() + " has no " + std::string(prefix) + " tensors for layer " + std::to_string(l));
      auto& v = dst[l];
      for (const auto& id : s.ids) v.push_back(ar.tensor(std::string(prefix) + "/" + std::to_string(l) + "/" + id));
    }
  };
  load(layers, have, "act", s.patches, layers.empty());
  load(attn_layers, have_attn, "attn", s.attention, false);
  return s;
}

inline ActivationStore load_activations(const std::string& path, const std::vector<std::size_t>& layers = {},
                                        const std::vector<std::size_t>& attn_layers = {}) {
  return activations_from_archive(TensorArchive::read(path), layers, attn_layers);
}

// Traces every image and keeps the patch rows of `layers` and the head-mean
// patch attention of `attn_layers`.
inline ActivationStore trace_images(const ModelBundle& bundle, const ImageSet& images, const std::vector<std::size_t>& layers,
                                    const std::vector<std::size_t>& attn_layers = {}) {
  const Architecture& a = bundle.arch;
  std::set<std::size_t> want(layers.begin(), layers.end());
  want.insert(attn_layers.begin(), attn_layers.end());
  if (want.empty()) throw ConfigError("trace: no layers requested");
  if (*want.rbegin() >= a.depth) throw ConfigError("trace: layer " + std::to_string(*want.rbegin()) + " is outside depth " + std::to_string(a.depth));
  const std::size_t upto = *want.rbegin() + 1;
  ActivationStore s;
  s.ids = images.ids;
  s.grid_side = a.grid_side;
  for (std::size_t l : layers) s.patches[l].resize(images.size());
  for (std::size_t l : attn_layers) s.attention[l].resize(images.size());
  const std::size_t n = a.patches(), off = a.patch_offset();
  // Images run one at a time so the per-layer work inside the forward pass can
  // use the worker threads; attention is only captured when requested.
  for (std::size_t i = 0; i < images.size(); ++i) {
    const LayerTrace t = forward_with_trace(patch_embed(images.images[i], bundle), bundle, upto, {}, TraceOptions{!attn_layers.empty(), false});
    for (std::size_t l : layers) s.patches[l][i] = t.patch_embeddings(l);
    for (std::size_t l : attn_layers) {
      const Tensor& full = t.layers[l].attention_mean;
      Tensor block = Tensor::matrix(n, n);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) block(r, c) = full(r + off, c + off);
      s.attention[l][i] = std::move(block);
    }
  }
  return s;
}

}  // namespace vitbind
