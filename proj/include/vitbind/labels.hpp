#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vitbind/archive.hpp"
#include "vitbind/errors.hpp"

namespace vitbind {

inline constexpr int kIgnoreId = -1;

// Patch-resolution instance and class grids for one image. Patch p sits at
// row p / side, column p % side.
struct LabelRaster {
  std::string image_id;
  std::size_t side = 0;
  std::vector<int> instance;
  std::vector<int> cls;

  std::size_t patches() const noexcept { return side * side; }
  bool labeled(std::size_t p) const { return instance[p] != kIgnoreId; }

  std::vector<std::size_t> labeled_patches() const {
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p < patches(); ++p)
      if (labeled(p)) out.push_back(p);
    return out;
  }

  std::vector<int> instance_ids() const {
    std::vector<int> ids;
    for (int v : instance)
      if (v != kIgnoreId && std::find(ids.begin(), ids.end(), v) == ids.end()) ids.push_back(v);
    std::sort(ids.begin(), ids.end());
    return ids;
  }
};

// Grid sizes, id ranges, and the many-to-one instance -> class mapping.
inline void validate_raster(const LabelRaster& r) {
  if (r.side == 0) throw DataError("label raster '" + r.image_id + "' has zero side");
  if (r.instance.size() != r.patches() || r.cls.size() != r.patches())
    throw DataError("label raster '" + r.image_id + "' grids do not match side " + std::to_string(r.side));
  std::map<int, int> instance_class;
  for (std::size_t p = 0; p < r.patches(); ++p) {
    const int inst = r.instance[p], c = r.cls[p];
    if (inst < kIgnoreId || c < kIgnoreId)
      throw DataError("label raster '" + r.image_id + "' has negative id at patch " + std::to_string(p));
    if (inst == kIgnoreId) continue;
    if (c == kIgnoreId)
      throw DataError("label raster '" + r.image_id + "': instance " + std::to_string(inst) + " has no class at patch " +
                      std::to_string(p));
    auto [it, inserted] = instance_class.emplace(inst, c);
    if (!inserted && it->second != c)
      throw DataError("label raster '" + r.image_id + "': instance " + std::to_string(inst) + " has two class ids (" +
                      std::to_string(it->second) + " and " + std::to_string(c) + ")");
  }
}

inline ArchiveWriter labels_to_archive(std::span<const LabelRaster> rasters) {
  ArchiveWriter w;
  std::vector<std::string> ids;
  std::size_t side = rasters.empty() ? 0 : rasters.front().side;
  for (const auto& r : rasters) {
    validate_raster(r);
    if (r.side != side) throw DataError("label set mixes grid sides");
    Tensor inst(Shape{r.side, r.side}), cls(Shape{r.side, r.side});
    for (std::size_t p = 0; p < r.patches(); ++p) {
      inst[p] = static_cast<float>(r.instance[p]);
      cls[p] = static_cast<float>(r.cls[p]);
    }
    w.add("labels/" + r.image_id + "/instance", std::move(inst));
    w.add("labels/" + r.image_id + "/class", std::move(cls));
    ids.push_back(r.image_id);
  }
  w.metadata() = {{"kind", "label_set"}, {"grid_side", side}, {"ignore_id", kIgnoreId}, {"images", ids}};
  return w;
}

namespace detail {
inline std::vector<int> grid_ids(const Tensor& t, const std::string& what) {
  std::vector<int> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = t[i];
    if (v != std::floor(v)) throw DataError(what + " holds non-integer id " + std::to_string(v));
    out[i] = static_cast<int>(v);
  }
  return out;
}
}  // namespace detail

inline std::vector<LabelRaster> labels_from_archive(const TensorArchive& ar, std::optional<std::size_t> expected_side = {}) {
  const auto& meta = ar.metadata();
  if (meta.value("kind", std::string()) != "label_set") throw DataError(ar.path() + " is not a label_set archive");
  const auto side = meta.at("grid_side").get<std::size_t>();
  if (expected_side && side != *expected_side) {
    throw DataError("label grid side " + std::to_string(side) + " does not match model grid side " +
                    std::to_string(*expected_side));
  }
  std::vector<LabelRaster> out;
  for (const auto& id : meta.at("images").get<std::vector<std::string>>()) {
    LabelRaster r;
    r.image_id = id;
    r.side = side;
    const Tensor inst = ar.tensor("labels/" + id + "/instance");
    const Tensor cls = ar.tensor("labels/" + id + "/class");
    if (inst.shape() != Shape{side, side} || cls.shape() != Shape{side, side})
      throw DataError("label grids for '" + id + "' are not " + std::to_string(side) + "x" + std::to_string(side));
    r.instance = detail::grid_ids(inst, "instance grid '" + id + "'");
    r.cls = detail::grid_ids(cls, "class grid '" + id + "'");
    validate_raster(r);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<LabelRaster> load_labels(const std::string& path, std::optional<std::size_t> expected_side = {}) {
  return labels_from_archive(TensorArchive::read(path), expected_side);
}

}  // namespace vitbind
