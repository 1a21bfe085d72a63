#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vitbind/archive.hpp"
#include "vitbind/errors.hpp"
#include "vitbind/labels.hpp"
#include "vitbind/log.hpp"
#include "vitbind/rng.hpp"
#include "vitbind/tensor.hpp"

namespace vitbind {

inline constexpr std::size_t kPatchesPerImage = 64;

// Sampled patches of one image and their same-object matrix. Only the strict
// upper triangle is supervised.
struct PairBatch {
  std::string image_id;
  std::size_t image_index = 0;  // row block in the matching activation set
  std::vector<std::size_t> patches;
  std::vector<std::uint8_t> same;  // n x n, row-major
  std::vector<int> instance;
  std::vector<int> cls;

  std::size_t size() const { return patches.size(); }
  bool same_object(std::size_t i, std::size_t j) const { return same[i * size() + j] != 0; }
  std::size_t supervised_pairs() const { return size() * (size() - 1) / 2; }
  std::size_t instance_ids_count() const {
    std::vector<int> ids = instance;
    std::sort(ids.begin(), ids.end());
    return static_cast<std::size_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
  }
  std::size_t positive_pairs() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < size(); ++i)
      for (std::size_t j = i + 1; j < size(); ++j) n += same_object(i, j);
    return n;
  }
};

inline void validate_batch(const PairBatch& b) {
  const std::size_t n = b.size();
  if (b.same.size() != n * n || b.instance.size() != n || b.cls.size() != n)
    throw DataError("pair batch '" + b.image_id + "' has inconsistent sizes");
  for (std::size_t i = 0; i < n; ++i) {
    if (b.instance[i] == kIgnoreId) throw DataError("pair batch '" + b.image_id + "' samples an unlabeled patch");
    if (!b.same_object(i, i)) throw DataError("pair batch '" + b.image_id + "' is not reflexive");
    for (std::size_t j = 0; j < n; ++j) {
      if (b.same_object(i, j) != b.same_object(j, i)) throw DataError("pair batch '" + b.image_id + "' is not symmetric");
      if (b.same_object(i, j) != (b.instance[i] == b.instance[j]))
        throw DataError("pair batch '" + b.image_id + "' disagrees with its instance ids");
      if (b.same_object(i, j) && b.cls[i] != b.cls[j])
        throw DataError("pair batch '" + b.image_id + "' pairs one object across two classes");
    }
  }
}

inline PairBatch make_pair_batch(const LabelRaster& r, std::size_t image_index, std::vector<std::size_t> patches) {
  PairBatch b;
  b.image_id = r.image_id;
  b.image_index = image_index;
  b.patches = std::move(patches);
  const std::size_t n = b.patches.size();
  b.same.assign(n * n, 0);
  for (std::size_t p : b.patches) {
    b.instance.push_back(r.instance[p]);
    b.cls.push_back(r.cls[p]);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) b.same[i * n + j] = b.instance[i] == b.instance[j];
  validate_batch(b);
  return b;
}

// Uniform draw without replacement over labeled patches. Returns nothing and
// warns when the image has fewer than `per_image` labeled patches.
inline std::optional<PairBatch> sample_pair_batch(const LabelRaster& r, std::size_t image_index,
                                                  std::size_t per_image, std::uint64_t seed) {
  const auto labeled = r.labeled_patches();
  if (labeled.size() < per_image) {
    warn("skipping image '" + r.image_id + "': " + std::to_string(labeled.size()) + " labeled patches, need " +
         std::to_string(per_image));
    return std::nullopt;
  }
  Rng rng(derive_seed(seed, "pairs/" + r.image_id));
  std::vector<std::size_t> chosen;
  for (std::size_t k : rng.sample_without_replacement(labeled.size(), per_image)) chosen.push_back(labeled[k]);
  return make_pair_batch(r, image_index, std::move(chosen));
}

inline std::vector<PairBatch> sample_pair_batches(std::span<const LabelRaster> rasters, std::size_t per_image,
                                                  std::uint64_t seed) {
  std::vector<PairBatch> out;
  for (std::size_t i = 0; i < rasters.size(); ++i)
    if (auto b = sample_pair_batch(rasters[i], i, per_image, seed)) out.push_back(std::move(*b));
  return out;
}

// Accuracy of always answering "different" over supervised pairs.
inline double majority_baseline(std::span<const PairBatch> batches) {
  std::size_t total = 0, negatives = 0;
  for (const auto& b : batches) {
    total += b.supervised_pairs();
    negatives += b.supervised_pairs() - b.positive_pairs();
  }
  if (total == 0) throw DataError("majority baseline needs at least one supervised pair");
  return static_cast<double>(negatives) / static_cast<double>(total);
}

// Toy scenes: rectangular object placements on a patch grid.
struct Placement {
  std::size_t row = 0, col = 0, height = 1, width = 1;
  int class_id = 0;
};

struct SceneLayout {
  std::string image_id = "scene";
  std::size_t side = 37;
  std::vector<Placement> objects;
  std::optional<int> background_class;  // label the rest as one extra instance
};

inline LabelRaster gen_toy_scene_labels(const SceneLayout& layout) {
  LabelRaster r;
  r.image_id = layout.image_id;
  r.side = layout.side;
  r.instance.assign(r.patches(), kIgnoreId);
  r.cls.assign(r.patches(), kIgnoreId);
  for (std::size_t o = 0; o < layout.objects.size(); ++o) {
    const Placement& p = layout.objects[o];
    if (p.height == 0 || p.width == 0 || p.row + p.height > layout.side || p.col + p.width > layout.side)
      throw DataError("placement " + std::to_string(o) + " does not fit the " + std::to_string(layout.side) + "x" +
                      std::to_string(layout.side) + " grid");
    if (p.class_id < 0) throw DataError("placement " + std::to_string(o) + " has a negative class id");
    for (std::size_t y = p.row; y < p.row + p.height; ++y)
      for (std::size_t x = p.col; x < p.col + p.width; ++x) {
        const std::size_t idx = y * layout.side + x;
        if (r.instance[idx] != kIgnoreId)
          throw DataError("placements " + std::to_string(r.instance[idx]) + " and " + std::to_string(o) + " overlap at (" +
                          std::to_string(y) + ", " + std::to_string(x) + ")");
        r.instance[idx] = static_cast<int>(o);
        r.cls[idx] = p.class_id;
      }
  }
  if (layout.background_class) {
    const int bg = static_cast<int>(layout.objects.size());
    for (std::size_t i = 0; i < r.patches(); ++i)
      if (r.instance[i] == kIgnoreId) {
        r.instance[i] = bg;
        r.cls[i] = *layout.background_class;
      }
  }
  validate_raster(r);
  return r;
}

// Patches of each listed instance, ordered by offset inside its bounding box.
// All instances must be filled rectangles of one size, so row k of every list
// refers to the same relative position.
inline std::vector<std::vector<std::size_t>> aligned_instance_patches(const LabelRaster& r, std::span<const int> instances) {
  std::vector<std::vector<std::size_t>> out;
  std::size_t h0 = 0, w0 = 0;
  for (int id : instances) {
    std::size_t top = r.side, left = r.side, bottom = 0, right = 0, count = 0;
    for (std::size_t p = 0; p < r.patches(); ++p)
      if (r.instance[p] == id) {
        top = std::min(top, p / r.side);
        bottom = std::max(bottom, p / r.side);
        left = std::min(left, p % r.side);
        right = std::max(right, p % r.side);
        ++count;
      }
    if (count == 0) throw DataError("instance " + std::to_string(id) + " is absent from '" + r.image_id + "'");
    const std::size_t h = bottom - top + 1, w = right - left + 1;
    if (h * w != count) throw DataError("instance " + std::to_string(id) + " is not a filled rectangle; copies are misaligned");
    if (out.empty()) {
      h0 = h;
      w0 = w;
    } else if (h != h0 || w != w0) {
      throw DataError("instance " + std::to_string(id) + " spans " + std::to_string(h) + "x" + std::to_string(w) +
                      " patches but the first copy spans " + std::to_string(h0) + "x" + std::to_string(w0) +
                      "; copies are misaligned");
    }
    std::vector<std::size_t> patches;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) patches.push_back((top + y) * r.side + left + x);
    out.push_back(std::move(patches));
  }
  return out;
}

// Planted embeddings h = f + b. Binding vectors live in a k_true-dimensional
// subspace with basis rows W_true; features live in its orthogonal complement.
struct SyntheticSpec {
  std::size_t d = 64;
  std::size_t k_true = 8;
  std::size_t objects = 8;             // per image
  std::size_t patches_per_object = 40;
  double noise = 0.1;
  bool class_sharing = false;          // objects come in same-class pairs
  std::uint64_t seed = 0;
  std::size_t images = 256;
  std::size_t classes = 6;             // ignored when class_sharing is set
  double binding_scale = 3.0;
  double feature_scale = 1.0;          // class-mean magnitude per coordinate
  double feature_spread = 1.0;         // per-patch feature variation per coordinate
  bool identical_features = false;     // aligned copies share features patch by patch
  std::size_t sampled_per_object = 32; // two objects per pair batch

  void validate() const {
    if (d == 0 || k_true == 0 || k_true > d) throw ConfigError("synthetic spec needs 0 < k_true <= d");
    if (noise < 0) throw ConfigError("synthetic spec noise must be non-negative");
    if (objects == 0 || patches_per_object == 0 || images == 0) throw ConfigError("synthetic spec sizes must be positive");
    if (class_sharing && objects % 2 != 0) throw ConfigError("class sharing needs an even object count");
    if (sampled_per_object > patches_per_object) throw ConfigError("sampled_per_object exceeds patches_per_object");
  }
};

struct SyntheticData {
  std::vector<Tensor> embeddings;  // per image [side*side, d]
  std::vector<Tensor> binding;     // per image [side*side, d], binding part only
  std::vector<LabelRaster> rasters;
  std::vector<PairBatch> batches;
  Tensor w_true;                   // [k_true, d], orthonormal rows
  std::size_t side = 0;
};

namespace detail {

// Rows of a random k x d matrix with orthonormal rows (Gram-Schmidt on
// Gaussian draws).
inline std::vector<std::vector<double>> random_orthonormal(std::size_t k, std::size_t d, Rng& rng) {
  std::vector<std::vector<double>> rows;
  while (rows.size() < k) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : rows) {
        double c = 0.0;
        for (std::size_t i = 0; i < d; ++i) c += q[i] * v[i];
        for (std::size_t i = 0; i < d; ++i) v[i] -= c * q[i];
      }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-8) continue;
    for (auto& x : v) x /= n;
    rows.push_back(std::move(v));
  }
  return rows;
}

inline void project_out(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (const auto& q : basis) {
    double c = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) c += q[i] * v[i];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * q[i];
  }
}

// Near-square h x w with h * w == n.
inline std::pair<std::size_t, std::size_t> rect_for(std::size_t n) {
  std::size_t h = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (h > 1 && n % h != 0) --h;
  return {h, n / h};
}

}  // namespace detail

// Layout used by the generator: objects as equal rectangles in reading order.
inline SceneLayout synthetic_layout(const SyntheticSpec& spec, const std::vector<int>& classes, const std::string& id) {
  const auto [h, w] = detail::rect_for(spec.patches_per_object);
  const std::size_t per_row = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(spec.objects))));
  const std::size_t rows = (spec.objects + per_row - 1) / per_row;
  SceneLayout layout;
  layout.image_id = id;
  layout.side = std::max(per_row * w, rows * h);
  for (std::size_t o = 0; o < spec.objects; ++o)
    layout.objects.push_back({(o / per_row) * h, (o % per_row) * w, h, w, classes[o]});
  return layout;
}

inline SyntheticData gen_synthetic_embeddings(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, "synthetic"));
  const std::size_t d = spec.d, k = spec.k_true;
  const auto binding_basis = detail::random_orthonormal(k, d, rng);

  const std::size_t n_classes = spec.class_sharing ? spec.objects / 2 : spec.classes;
  std::vector<std::vector<double>> class_means(n_classes, std::vector<double>(d));
  for (auto& mu : class_means) {
    for (auto& x : mu) x = spec.feature_scale * rng.normal();
    detail::project_out(mu, binding_basis);
  }

  SyntheticData out;
  out.w_true = Tensor::matrix(k, d);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < d; ++c) out.w_true(r, c) = static_cast<float>(binding_basis[r][c]);

  for (std::size_t img = 0; img < spec.images; ++img) {
    const std::string id = "synth" + std::to_string(img);
    std::vector<int> classes(spec.objects);
    for (std::size_t o = 0; o < spec.objects; ++o)
      classes[o] = spec.class_sharing ? static_cast<int>(o / 2) : static_cast<int>(rng.index(n_classes));
    LabelRaster raster = gen_toy_scene_labels(synthetic_layout(spec, classes, id));
    out.side = raster.side;

    // Object binding coefficients in the planted basis: orthogonal within the
    // image while objects <= k_true, Gaussian directions otherwise.
    std::vector<std::vector<double>> coeff;
    if (spec.objects <= k) {
      coeff = detail::random_orthonormal(spec.objects, k, rng);
    } else {
      for (std::size_t o = 0; o < spec.objects; ++o) coeff.push_back(detail::random_orthonormal(1, k, rng)[0]);
    }
    std::vector<std::vector<double>> shared_features;
    if (spec.identical_features) {
      for (std::size_t j = 0; j < spec.patches_per_object; ++j) {
        std::vector<double> f(d);
        for (auto& x : f) x = spec.feature_spread * rng.normal();
        detail::project_out(f, binding_basis);
        shared_features.push_back(std::move(f));
      }
    }

    Tensor h = Tensor::matrix(raster.patches(), d);
    Tensor b = Tensor::matrix(raster.patches(), d);
    std::vector<std::size_t> seen(spec.objects, 0);
    for (std::size_t p = 0; p < raster.patches(); ++p) {
      std::vector<double> f(d, 0.0), bind(d, 0.0);
      const int inst = raster.instance[p];
      if (inst == kIgnoreId) {
        for (auto& x : f) x = spec.feature_spread * rng.normal();
      } else {
        const auto o = static_cast<std::size_t>(inst);
        const std::size_t j = seen[o]++;
        if (spec.identical_features) {
          f = shared_features[j];
        } else {
          for (auto& x : f) x = spec.feature_spread * rng.normal();
          detail::project_out(f, binding_basis);
          for (std::size_t c = 0; c < d; ++c) f[c] += class_means[static_cast<std::size_t>(classes[o])][c];
        }
        for (std::size_t r = 0; r < k; ++r) {
          const double a = spec.binding_scale * coeff[o][r] + spec.noise * rng.normal();
          for (std::size_t c = 0; c < d; ++c) bind[c] += a * binding_basis[r][c];
        }
      }
      for (std::size_t c = 0; c < d; ++c) {
        b(p, c) = static_cast<float>(bind[c]);
        h(p, c) = static_cast<float>(f[c] + bind[c] + spec.noise * rng.normal());
      }
    }

    // Two objects per batch; with class sharing, a class-mate pair.
    std::size_t oa, ob;
    if (spec.class_sharing) {
      oa = 2 * rng.index(spec.objects / 2);
      ob = oa + 1;
    } else {
      const auto pick = rng.sample_without_replacement(spec.objects, std::min<std::size_t>(2, spec.objects));
      oa = pick[0];
      ob = pick.size() > 1 ? pick[1] : pick[0];
    }
    std::vector<std::size_t> chosen;
    for (std::size_t o : {oa, ob}) {
      std::vector<std::size_t> members;
      for (std::size_t p = 0; p < raster.patches(); ++p)
        if (raster.instance[p] == static_cast<int>(o)) members.push_back(p);
      for (std::size_t idx : rng.sample_without_replacement(members.size(), spec.sampled_per_object))
        chosen.push_back(members[idx]);
      if (oa == ob) break;
    }
    rng.shuffle(chosen);
    out.batches.push_back(make_pair_batch(raster, img, std::move(chosen)));
    out.embeddings.push_back(std::move(h));
    out.binding.push_back(std::move(b));
    out.rasters.push_back(std::move(raster));
  }
  return out;
}

// Pair batches as an archive: per batch, patch indices and instance/class ids
// as [n] tensors. The same-object matrix is implied by the instance ids.
inline ArchiveWriter pair_batches_to_archive(std::span<const PairBatch> batches) {
  ArchiveWriter w;
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const PairBatch& b = batches[i];
    auto as_tensor = [](const auto& v) {
      Tensor t(Shape{v.size()});
      for (std::size_t j = 0; j < v.size(); ++j) t[j] = static_cast<float>(v[j]);
      return t;
    };
    const std::string base = "pairs/" + std::to_string(i) + "/";
    w.add(base + "patches", as_tensor(b.patches));
    w.add(base + "instance", as_tensor(b.instance));
    w.add(base + "class", as_tensor(b.cls));
    list.push_back({{"image_id", b.image_id}, {"image_index", b.image_index}});
  }
  w.metadata() = {{"kind", "pair_batches"}, {"batches", list}};
  return w;
}

inline std::vector<PairBatch> pair_batches_from_archive(const TensorArchive& ar) {
  if (ar.metadata().value("kind", std::string()) != "pair_batches") throw DataError(ar.path() + " is not a pair_batches archive");
  std::vector<PairBatch> out;
  const auto& list = ar.metadata().at("batches");
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string base = "pairs/" + std::to_string(i) + "/";
    const Tensor p = ar.tensor(base + "patches"), inst = ar.tensor(base + "instance"), cls = ar.tensor(base + "class");
    PairBatch b;
    b.image_id = list[i].at("image_id").get<std::string>();
    b.image_index = list[i].at("image_index").get<std::size_t>();
    const std::size_t n = p.size();
    for (std::size_t j = 0; j < n; ++j) {
      b.patches.push_back(static_cast<std::size_t>(p[j]));
      b.instance.push_back(static_cast<int>(inst[j]));
      b.cls.push_back(static_cast<int>(cls[j]));
    }
    b.same.assign(n * n, 0);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t c = 0; c < n; ++c) b.same[a * n + c] = b.instance[a] == b.instance[c];
    validate_batch(b);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace vitbind
