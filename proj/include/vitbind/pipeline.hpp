#pragma once

// Experiment configuration and the staged pipeline behind the CLI.
//
// Stages run in dependency order and exchange data through files in the
// output directory, so each stage can also run on its own:
//   synth       synth/{images,labels,pairs,model,planted}.vbt
//   trace       activations.vbt
//   probe-train probes/<family>_L<layer>.vbt, probes/summary.csv
//   probe-sweep probes/<family>_L<layer>.vbt, sweep/<family>.{csv,svg}
//   pos-probe   position.csv
//   pca         pca/{coords,variance,summary}.csv, pca/pca.svg
//   kde         kde/L<layer>.{csv,svg}, score_map/L<layer>.{csv,svg}
//   attn-corr   attn_corr.csv
//   ablate      ablation.csv, hooks/<mode>_<parameter>.vbt
//   dino-loss   dino.csv
//   report      report.md
// manifest.json lists every emitted file with its SHA-256 and is rewritten
// after each stage, so a failed run leaves a partial manifest.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vitbind/ablation.hpp"
#include "vitbind/analysis.hpp"
#include "vitbind/dataset.hpp"
#include "vitbind/hash.hpp"
#include "vitbind/labels.hpp"
#include "vitbind/model.hpp"
#include "vitbind/probes.hpp"
#include "vitbind/supervision.hpp"
#include "vitbind/svg.hpp"

namespace vitbind {

inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> order = {"synth", "trace", "probe-train", "probe-sweep", "pos-probe", "pca",
                                                 "kde",   "attn-corr", "ablate", "dino-loss", "report"};
  return order;
}

inline constexpr const char* kOutputDirEnv = "VITBIND_OUTPUT_DIR";

inline std::string default_output_dir() {
  const char* env = std::getenv(kOutputDirEnv);
  return env && *env ? env : "vitbind_out";
}

struct SynthConfig {
  SyntheticSpec spec;
  double pool_sharpness = 4.0;
  double pool_gain = 4.0;
};

struct InstanceEvalConfig {
  bool enabled = false;
  InstanceHeadConfig head;
  TrainRecipe recipe;
};

struct DinoStageConfig {
  bool enabled = false;  // inside the ablate stage
  DinoEvalConfig eval;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  std::string output_dir;
  std::string bundle, images, labels, activations, pairs, probe;
  std::vector<std::string> stages;
  std::vector<std::size_t> layers;
  std::size_t probe_layer = 0;
  std::optional<std::size_t> probe_layer2;
  std::vector<std::string> families = {"quad"};
  TrainRecipe recipe;
  std::size_t pairs_per_image = kPatchesPerImage;
  SynthConfig synth;
  std::size_t pca_image = 0;
  std::vector<int> pca_instances = {0, 1, 2, 3};
  std::size_t pca_k = 3;
  std::size_t score_image = 0;
  std::size_t score_reference = 0;
  std::size_t kde_images = 8;
  std::vector<std::size_t> attn_layers;
  std::size_t attn_images = 4;
  std::size_t n_perm = 999;
  std::vector<AblationConfig> ablations;
  TrainRecipe semantic_recipe;
  InstanceEvalConfig instance;
  DinoStageConfig dino;

  // Stage seed derived from the global seed by stable hashing of the name.
  std::uint64_t stage_seed(const std::string& stage) const { return derive_seed(seed, stage); }

  std::filesystem::path out(const std::string& rel) const { return std::filesystem::path(output_dir) / rel; }

  void validate() const {
    for (const auto& s : stages)
      if (std::find(stage_order().begin(), stage_order().end(), s) == stage_order().end()) throw ConfigError("unknown stage '" + s + "'");
    for (const auto& f : families) parse_family(f);
    recipe.validate();
    semantic_recipe.validate();
    for (const auto& a : ablations) a.validate();
    if (instance.enabled) {
      instance.head.validate();
      instance.recipe.validate();
    }
    dino.eval.validate();
    if (pca_k == 0) throw ConfigError("pca k must be positive");
    if (pairs_per_image < 2) throw ConfigError("pairs_per_image must be at least 2");
    if (n_perm != 0 && n_perm < 100) throw ConfigError("n_perm must be 0 or at least 100");
    for (const std::string* p : {&bundle, &images, &labels, &activations, &pairs, &probe})
      if (!p->empty() && !std::filesystem::exists(*p)) throw ConfigError("input file '" + *p + "' does not exist");
  }

  // Layer indices must be < depth once the bundle is known.
  void validate_layers(std::size_t depth) const {
    auto check = [&](std::size_t l, const char* what) {
      if (l >= depth) throw ConfigError(std::string(what) + " " + std::to_string(l) + " is outside depth " + std::to_string(depth));
    };
    for (std::size_t l : layers) check(l, "layer");
    check(probe_layer, "probe_layer");
    if (probe_layer2) check(*probe_layer2, "probe_layer2");
    for (std::size_t l : attn_layers) check(l + 1, "attention layer + 1");
    for (const auto& a : ablations) check(a.layer, "ablation layer");
  }
};

namespace detail {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key) && !j.at(key).is_null()) dst = j.at(key).get<T>();
}

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

inline TrainRecipe recipe_from_json(const nlohmann::json& j, TrainRecipe r, const std::string& where) {
  check_keys(j, {"lr", "epochs", "batch_images", "step_size_epochs", "gamma", "k", "class_slots", "init_scale", "holdout_fraction", "seed"}, where);
  read_opt(j, "lr", r.lr);
  read_opt(j, "epochs", r.epochs);
  read_opt(j, "batch_images", r.batch_images);
  read_opt(j, "step_size_epochs", r.schedule.step_size_epochs);
  read_opt(j, "gamma", r.schedule.gamma);
  read_opt(j, "k", r.k);
  read_opt(j, "class_slots", r.class_slots);
  read_opt(j, "init_scale", r.init_scale);
  read_opt(j, "holdout_fraction", r.holdout_fraction);
  read_opt(j, "seed", r.seed);
  return r;
}

inline nlohmann::json recipe_to_json(const TrainRecipe& r) {
  return {{"lr", r.lr}, {"epochs", r.epochs}, {"batch_images", r.batch_images}, {"step_size_epochs", r.schedule.step_size_epochs},
          {"gamma", r.schedule.gamma}, {"k", r.k}, {"class_slots", r.class_slots}, {"init_scale", r.init_scale},
          {"holdout_fraction", r.holdout_fraction}, {"seed", r.seed}};
}

inline CropKind parse_crop(const std::string& s) {
  if (s == "identity") return CropKind::identity;
  if (s == "hflip") return CropKind::hflip;
  throw ConfigError("unknown crop '" + s + "' (expected identity or hflip)");
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  detail::check_keys(j, {"seed", "threads", "output_dir", "bundle", "images", "labels", "activations", "pairs", "probe", "stages",
                         "layers", "probe_layer", "probe_layer2", "families", "recipe", "pairs_per_image", "synthetic", "pca",
                         "score_map", "kde", "attention", "ablations", "semantic_head", "instance_head", "dino"},
                     "config");
  ExperimentConfig c;
  try {
    read_opt(j, "seed", c.seed);
    read_opt(j, "threads", c.threads);
    read_opt(j, "output_dir", c.output_dir);
    for (auto [key, dst] : {std::pair{"bundle", &c.bundle}, {"images", &c.images}, {"labels", &c.labels}, {"activations", &c.activations},
                            {"pairs", &c.pairs}, {"probe", &c.probe}})
      read_opt(j, key, *dst);
    read_opt(j, "stages", c.stages);
    read_opt(j, "layers", c.layers);
    read_opt(j, "probe_layer", c.probe_layer);
    if (j.contains("probe_layer2") && !j.at("probe_layer2").is_null()) c.probe_layer2 = j.at("probe_layer2").get<std::size_t>();
    read_opt(j, "families", c.families);
    if (j.contains("recipe")) c.recipe = detail::recipe_from_json(j.at("recipe"), c.recipe, "recipe");
    read_opt(j, "pairs_per_image", c.pairs_per_image);
    if (j.contains("synthetic")) {
      const auto& s = j.at("synthetic");
      detail::check_keys(s, {"d", "k_true", "objects", "patches_per_object", "noise", "class_sharing", "images", "classes", "binding_scale",
                             "feature_scale", "feature_spread", "identical_features", "sampled_per_object", "pool_sharpness", "pool_gain"},
                         "synthetic");
      SyntheticSpec& sp = c.synth.spec;
      read_opt(s, "d", sp.d);
      read_opt(s, "k_true", sp.k_true);
      read_opt(s, "objects", sp.objects);
      read_opt(s, "patches_per_object", sp.patches_per_object);
      read_opt(s, "noise", sp.noise);
      read_opt(s, "class_sharing", sp.class_sharing);
      read_opt(s, "images", sp.images);
      read_opt(s, "classes", sp.classes);
      read_opt(s, "binding_scale", sp.binding_scale);
      read_opt(s, "feature_scale", sp.feature_scale);
      read_opt(s, "feature_spread", sp.feature_spread);
      read_opt(s, "identical_features", sp.identical_features);
      read_opt(s, "sampled_per_object", sp.sampled_per_object);
      read_opt(s, "pool_sharpness", c.synth.pool_sharpness);
      read_opt(s, "pool_gain", c.synth.pool_gain);
    }
    if (j.contains("pca")) {
      const auto& p = j.at("pca");
      detail::check_keys(p, {"image", "instances", "k"}, "pca");
      read_opt(p, "image", c.pca_image);
      read_opt(p, "instances", c.pca_instances);
      read_opt(p, "k", c.pca_k);
    }
    if (j.contains("score_map")) {
      const auto& p = j.at("score_map");
      detail::check_keys(p, {"image", "reference"}, "score_map");
      read_opt(p, "image", c.score_image);
      read_opt(p, "reference", c.score_reference);
    }
    if (j.contains("kde")) {
      detail::check_keys(j.at("kde"), {"images"}, "kde");
      read_opt(j.at("kde"), "images", c.kde_images);
    }
    if (j.contains("attention")) {
      const auto& a = j.at("attention");
      detail::check_keys(a, {"layers", "images", "n_perm"}, "attention");
      read_opt(a, "layers", c.attn_layers);
      read_opt(a, "images", c.attn_images);
      read_opt(a, "n_perm", c.n_perm);
    }
    if (j.contains("ablations")) {
      for (const auto& a : j.at("ablations")) {
        detail::check_keys(a, {"layer", "mode", "ratio", "alpha", "ratios", "alphas"}, "ablations entry");
        AblationConfig base;
        read_opt(a, "layer", base.layer);
        base.mode = parse_mode(a.value("mode", std::string("uninformed")));
        std::vector<double> values;
        if (a.contains("ratios")) values = a.at("ratios").get<std::vector<double>>();
        if (a.contains("alphas")) values = a.at("alphas").get<std::vector<double>>();
        if (values.empty()) values = {base.mode == AblationMode::informed ? a.value("alpha", 1.0) : a.value("ratio", 0.0)};
        for (double v : values) {
          AblationConfig cfg = base;
          (cfg.mode == AblationMode::informed ? cfg.alpha : cfg.ratio) = v;
          c.ablations.push_back(cfg);
        }
      }
    }
    if (j.contains("semantic_head")) c.semantic_recipe = detail::recipe_from_json(j.at("semantic_head"), c.semantic_recipe, "semantic_head");
    if (j.contains("instance_head")) {
      const auto& ih = j.at("instance_head");
      detail::check_keys(ih, {"enabled", "num_queries", "no_object_weight", "mask_weight", "dice_weight", "recipe"}, "instance_head");
      read_opt(ih, "enabled", c.instance.enabled);
      read_opt(ih, "num_queries", c.instance.head.num_queries);
      read_opt(ih, "no_object_weight", c.instance.head.no_object_weight);
      read_opt(ih, "mask_weight", c.instance.head.mask_weight);
      read_opt(ih, "dice_weight", c.instance.head.dice_weight);
      if (ih.contains("recipe")) c.instance.recipe = detail::recipe_from_json(ih.at("recipe"), c.instance.recipe, "instance_head.recipe");
    }
    if (j.contains("dino")) {
      const auto& d = j.at("dino");
      detail::check_keys(d, {"enabled", "student_temp", "teacher_temp", "crops"}, "dino");
      read_opt(d, "enabled", c.dino.enabled);
      if (d.contains("student_temp")) c.dino.eval.student_temp = d.at("student_temp").get<double>();
      if (d.contains("teacher_temp")) c.dino.eval.teacher_temp = d.at("teacher_temp").get<double>();
      if (d.contains("crops")) {
        c.dino.eval.crops.clear();
        for (const auto& s : d.at("crops").get<std::vector<std::string>>()) c.dino.eval.crops.push_back(detail::parse_crop(s));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

struct ManifestEntry {
  std::string path;  // relative to the output directory
  std::string sha256;
  std::uintmax_t bytes = 0;
};

struct Manifest {
  std::vector<std::string> stages_done;
  std::vector<ManifestEntry> files;
  std::string status = "ok";
  std::string error;

  nlohmann::json to_json(std::uint64_t seed) const {
    nlohmann::json f = nlohmann::json::array();
    for (const auto& e : files) f.push_back({{"path", e.path}, {"sha256", e.sha256}, {"bytes", e.bytes}});
    nlohmann::json j = {{"seed", seed}, {"status", status}, {"stages", stages_done}, {"files", f}};
    if (!error.empty()) j["error"] = error;
    return j;
  }
};

// Runs the configured stages and records emitted files.
class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.output_dir.empty()) cfg_.output_dir = default_output_dir();
    cfg_.validate();
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Manifest& manifest() const { return manifest_; }

  // Runs cfg.stages in dependency order; rethrows after writing a partial
  // manifest.
  void run() {
    std::filesystem::create_directories(cfg_.output_dir);
    set_max_threads(cfg_.threads);
    for (const auto& stage : stage_order()) {
      if (std::find(cfg_.stages.begin(), cfg_.stages.end(), stage) == cfg_.stages.end()) continue;
      try {
        run_stage(stage);
        manifest_.stages_done.push_back(stage);
      } catch (const std::exception& e) {
        manifest_.status = "failed";
        manifest_.error = stage + ": " + e.what();
        write_manifest();
        throw;
      }
      write_manifest();
    }
    write_manifest();
  }

  void run_stage(const std::string& stage) {
    if (stage == "synth") return synth();
    if (stage == "trace") return trace();
    if (stage == "probe-train") return probe_train();
    if (stage == "probe-sweep") return probe_sweep_stage();
    if (stage == "pos-probe") return pos_probe();
    if (stage == "pca") return pca();
    if (stage == "kde") return kde();
    if (stage == "attn-corr") return attn_corr();
    if (stage == "ablate") return ablate();
    if (stage == "dino-loss") return dino_loss();
    if (stage == "report") return report();
    throw ConfigError("unknown stage '" + stage + "'");
  }

 private:
  ExperimentConfig cfg_;
  Manifest manifest_;

  // ---- file plumbing ----

  std::string emit_path(const std::string& rel) {
    const auto p = cfg_.out(rel);
    std::filesystem::create_directories(p.parent_path());
    return p.string();
  }

  void record(const std::string& rel) {
    const std::string full = cfg_.out(rel).string();
    ManifestEntry e{rel, sha256_file(full), std::filesystem::file_size(full)};
    for (auto& f : manifest_.files)
      if (f.path == rel) {
        f = e;
        return;
      }
    manifest_.files.push_back(e);
  }

  void write_archive_rel(const std::string& rel, const ArchiveWriter& w) {
    w.write(emit_path(rel));
    record(rel);
  }

  void write_text(const std::string& rel, const std::string& body) {
    std::ofstream out(emit_path(rel));
    if (!out) throw DataError("cannot write " + rel);
    out << body;
    out.close();
    record(rel);
  }

  void write_manifest() const {
    std::ofstream out(cfg_.out("manifest.json"));
    out << manifest_.to_json(cfg_.seed).dump(2) << '\n';
  }

  // Explicit path, else the synth output when present.
  std::string input(const std::string& explicit_path, const std::string& synth_rel, const char* what) const {
    if (!explicit_path.empty()) return explicit_path;
    const auto p = cfg_.out(synth_rel);
    if (std::filesystem::exists(p)) return p.string();
    throw ConfigError(std::string("no ") + what + " given (set it in the config or run the synth stage first)");
  }

  std::string bundle_path() const { return input(cfg_.bundle, "synth/model.vbt", "bundle"); }
  std::string images_path() const { return input(cfg_.images, "synth/images.vbt", "images"); }
  std::string labels_path() const { return input(cfg_.labels, "synth/labels.vbt", "labels"); }
  std::string activations_path() const { return input(cfg_.activations, "activations.vbt", "activations (run the trace stage)"); }

  static std::string probe_rel(const std::string& family, std::size_t layer) { return "probes/" + family + "_L" + std::to_string(layer) + ".vbt"; }

  ProbeWeights probe_for(std::size_t layer) const {
    if (!cfg_.probe.empty()) {
      ProbeWeights pw = load_probe(cfg_.probe);
      if (pw.layer != layer)
        throw ConfigError("probe " + cfg_.probe + " was trained on layer " + std::to_string(pw.layer) + ", stage needs layer " + std::to_string(layer));
      return pw;
    }
    for (const auto& f : cfg_.families) {
      const auto p = cfg_.out(probe_rel(f, layer));
      if (std::filesystem::exists(p)) return load_probe(p.string());
    }
    throw DataError("no probe for layer " + std::to_string(layer) + " (run probe-train or probe-sweep first, or pass --probe)");
  }

  // Rasters reordered to match the activation image ids.
  std::vector<LabelRaster> rasters_for(const std::vector<std::string>& ids, std::size_t side) const {
    const auto all = load_labels(labels_path(), side);
    std::map<std::string, const LabelRaster*> by_id;
    for (const auto& r : all) by_id[r.image_id] = &r;
    std::vector<LabelRaster> out;
    for (const auto& id : ids) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw DataError("labels have no raster for image '" + id + "'");
      out.push_back(*it->second);
    }
    return out;
  }

  std::vector<PairBatch> pair_batches(const std::vector<LabelRaster>& rasters) const {
    if (!cfg_.pairs.empty() || std::filesystem::exists(cfg_.out("synth/pairs.vbt"))) {
      auto batches = pair_batches_from_archive(TensorArchive::read(input(cfg_.pairs, "synth/pairs.vbt", "pairs")));
      for (const auto& b : batches)
        if (b.image_index >= rasters.size() || rasters[b.image_index].image_id != b.image_id)
          throw DataError("pair batch for '" + b.image_id + "' does not line up with the activation image order");
      return batches;
    }
    return sample_pair_batches(rasters, cfg_.pairs_per_image, cfg_.stage_seed("pairs"));
  }

  std::vector<std::size_t> sweep_layers(std::size_t depth) const {
    if (!cfg_.layers.empty()) return cfg_.layers;
    std::vector<std::size_t> all(depth);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }

  TrainRecipe recipe(const std::string& stage) const {
    TrainRecipe r = cfg_.recipe;
    r.seed = cfg_.stage_seed(stage);
    return r;
  }

  // ---- stages ----

  void synth() {
    SyntheticSpec spec = cfg_.synth.spec;
    spec.seed = cfg_.stage_seed("synth");
    const SyntheticData data = gen_synthetic_embeddings(spec);
    ImageSet images;
    for (std::size_t i = 0; i < data.embeddings.size(); ++i) {
      images.ids.push_back(data.rasters[i].image_id);
      images.images.push_back(embeddings_to_image(data.embeddings[i], data.side));
    }
    write_archive_rel("synth/images.vbt", images_to_archive(images));
    write_archive_rel("synth/labels.vbt", labels_to_archive(data.rasters));
    write_archive_rel("synth/pairs.vbt", pair_batches_to_archive(data.batches));
    write_archive_rel("synth/model.vbt",
                      bundle_to_archive(binding_pool_bundle(data.w_true, data.side, cfg_.synth.pool_sharpness, cfg_.synth.pool_gain)));
    ArchiveWriter planted;
    planted.add("W_true", data.w_true);
    planted.metadata() = {{"kind", "planted_subspace"}, {"k_true", spec.k_true}, {"d", spec.d}};
    write_archive_rel("synth/planted.vbt", planted);
  }

  void trace() {
    const ModelBundle bundle = load_bundle(bundle_path());
    cfg_.validate_layers(bundle.arch.depth);
    std::set<std::size_t> layers(cfg_.layers.begin(), cfg_.layers.end());
    layers.insert(cfg_.probe_layer);
    if (cfg_.probe_layer2) layers.insert(*cfg_.probe_layer2);
    for (std::size_t l : cfg_.attn_layers) layers.insert(l);
    for (const auto& a : cfg_.ablations) layers.insert(a.layer);
    std::vector<std::size_t> attn;
    for (std::size_t l : cfg_.attn_layers) attn.push_back(l + 1);
    const ImageSet images = load_images(images_path());
    const ActivationStore store = trace_images(bundle, images, {layers.begin(), layers.end()}, attn);
    write_archive_rel("activations.vbt", activations_to_archive(store));
  }

  void probe_train() {
    std::vector<std::size_t> want = {cfg_.probe_layer};
    if (cfg_.probe_layer2) want.push_back(*cfg_.probe_layer2);
    const ActivationStore store = load_activations(activations_path(), want);
    const auto rasters = rasters_for(store.ids, store.grid_side);
    const auto batches = pair_batches(rasters);
    const ActivationSet acts = store.layer_set(cfg_.probe_layer);
    std::string csv = "family,layer,layer2,train_acc,held_acc,baseline,delta_pp\n";
    for (const auto& name : cfg_.families) {
      const ProbeFamily f = parse_family(name);
      const TrainRecipe r = recipe("probe-train/" + name);
      ProbeWeights w;
      double train_acc = 0.0, held_acc = 0.0, baseline = 0.0;
      if (f == ProbeFamily::position) {
        warn("probe-train: position probes run in the pos-probe stage; skipped");
        continue;
      } else if (f == ProbeFamily::class_pointwise) {
        const PointwiseResult res = train_pointwise_class_probe(batches, acts, r);
        w = res.weights;
        held_acc = res.pairwise.accuracy;
        baseline = res.pairwise.baseline;
        train_acc = res.patch_accuracy;
      } else {
        std::optional<ActivationSet> second;
        if (f == ProbeFamily::cross_layer) {
          if (!cfg_.probe_layer2) throw ConfigError("cross_layer probes need probe_layer2");
          second = store.layer_set(*cfg_.probe_layer2);
        }
        const ProbeTrainResult res = train_pair_probe(f, batches, acts, r, second ? &*second : nullptr);
        w = res.weights;
        train_acc = res.train.accuracy;
        held_acc = res.held_out.accuracy;
        baseline = res.held_out.baseline;
      }
      write_archive_rel(probe_rel(name, cfg_.probe_layer), probe_to_archive(w));
      csv += detail::fmt("%s,%zu,%zu,%.6f,%.6f,%.6f,%.4f\n", name.c_str(), w.layer, w.layer2, train_acc, held_acc, baseline,
                         100.0 * (held_acc - baseline));
    }
    write_text("probes/summary.csv", csv);
  }

  void probe_sweep_stage() {
    const std::size_t depth = load_bundle(bundle_path()).arch.depth;
    cfg_.validate_layers(depth);
    const auto layers = sweep_layers(depth);
    const ActivationStore store = load_activations(activations_path(), layers);
    const auto rasters = rasters_for(store.ids, store.grid_side);
    const auto batches = pair_batches(rasters);
    std::vector<ActivationSet> sets;
    for (std::size_t l : layers) sets.push_back(store.layer_set(l));
    for (const auto& name : cfg_.families) {
      const ProbeFamily f = parse_family(name);
      if (f == ProbeFamily::cross_layer || f == ProbeFamily::position || f == ProbeFamily::class_pointwise) {
        warn("probe-sweep: family " + name + " is not swept; skipped");
        continue;
      }
      std::vector<ProbeWeights> trained;
      const LayerAccuracyCurve curve = probe_sweep(f, batches, sets, depth, recipe("probe-sweep/" + name), &trained);
      for (const auto& w : trained) write_archive_rel(probe_rel(name, w.layer), probe_to_archive(w));
      write_curve_csv(emit_path("sweep/" + name + ".csv"), curve);
      record("sweep/" + name + ".csv");
      svg::curve_plot(emit_path("sweep/" + name + ".svg"), name + " probe accuracy by layer", curve);
      record("sweep/" + name + ".svg");
    }
  }

  void pos_probe() {
    const std::size_t depth = load_bundle(bundle_path()).arch.depth;
    cfg_.validate_layers(depth);
    const auto layers = sweep_layers(depth);
    const ActivationStore store = load_activations(activations_path(), layers);
    std::string csv = "layer,rmse,rmse_x,rmse_y,control_rmse\n";
    for (std::size_t l : layers) {
      const ActivationSet acts = store.layer_set(l);
      const TrainRecipe r = recipe("pos-probe");
      const PositionResult res = train_position_probe(acts, store.grid_side, r);
      const PositionResult control = train_position_probe(acts, store.grid_side, r, true);
      csv += detail::fmt("%zu,%.6f,%.6f,%.6f,%.6f\n", l, res.rmse, res.rmse_x, res.rmse_y, control.rmse);
    }
    write_text("position.csv", csv);
  }

  void pca() {
    const ActivationStore store = load_activations(activations_path(), {cfg_.probe_layer});
    const auto rasters = rasters_for(store.ids, store.grid_side);
    if (cfg_.pca_image >= rasters.size()) throw ConfigError("pca image index " + std::to_string(cfg_.pca_image) + " is out of range");
    const ProbeWeights pw = probe_for(cfg_.probe_layer);
    const Tensor& x = store.patches.at(cfg_.probe_layer)[cfg_.pca_image];
    const auto copies = aligned_copies(x, rasters[cfg_.pca_image], cfg_.pca_instances);
    const DeltaPcaResult res = residual_delta_pca(copies, cfg_.pca_k);
    write_pca_csv(emit_path("pca/coords.csv"), res);
    record("pca/coords.csv");
    write_pca_variance_csv(emit_path("pca/variance.csv"), res);
    record("pca/variance.csv");
    std::string summary = "cluster,separable\n";
    for (std::size_t c = 0; c < res.separable.size(); ++c) summary += detail::fmt("%zu,%d\n", c + 1, res.separable[c] ? 1 : 0);
    if (pw.family == ProbeFamily::quad || pw.family == ProbeFamily::cross_layer)
      summary += detail::fmt("feature_residual_norm,%.6f\nmean_delta_norm,%.6f\n", feature_residual_norm(copies, binding_matrix(pw, cfg_.probe_layer)),
                             res.mean_delta_norm);
    write_text("pca/summary.csv", summary);
    svg::pca_plot(emit_path("pca/pca.svg"), "residual deltas, first two components", res);
    record("pca/pca.svg");
  }

  void kde() {
    const std::size_t depth = load_bundle(bundle_path()).arch.depth;
    cfg_.validate_layers(depth);
    const auto layers = cfg_.layers.empty() ? std::vector<std::size_t>{cfg_.probe_layer} : cfg_.layers;
    const ActivationStore store = load_activations(activations_path(), layers);
    const auto rasters = rasters_for(store.ids, store.grid_side);
    if (cfg_.score_image >= rasters.size()) throw ConfigError("score_map image index is out of range");
    for (std::size_t l : layers) {
      const ProbeWeights pw = probe_for(l);
      const auto& imgs = store.patches.at(l);
      std::vector<ScoreGroup> pooled;
      const std::size_t n_img = std::min(cfg_.kde_images, imgs.size());
      for (std::size_t i = 0; i < n_img; ++i) {
        auto groups = pair_score_groups(imgs[i], rasters[i], pw);
        // same and different are pooled across images; per-instance groups come from the first image
        for (std::size_t g = 0; g < groups.size(); ++g) {
          if (g < 2) {
            if (pooled.size() < 2) pooled.push_back({groups[g].name, {}});
            auto& dst = pooled[g].scores;
            dst.insert(dst.end(), groups[g].scores.begin(), groups[g].scores.end());
          } else if (i == 0) {
            pooled.push_back(std::move(groups[g]));
          }
        }
      }
      const auto curves = same_diff_kde(pooled);
      const std::string tag = "L" + std::to_string(l);
      write_kde_csv(emit_path("kde/" + tag + ".csv"), curves);
      record("kde/" + tag + ".csv");
      svg::kde_plot(emit_path("kde/" + tag + ".svg"), "score density, layer " + std::to_string(l), curves);
      record("kde/" + tag + ".svg");
      const ScoreMap map = score_map(imgs[cfg_.score_image], store.grid_side, pw, l, cfg_.score_reference);
      write_score_map_csv(emit_path("score_map/" + tag + ".csv"), map);
      record("score_map/" + tag + ".csv");
      svg::heatmap(emit_path("score_map/" + tag + ".svg"), "scores against patch " + std::to_string(cfg_.score_reference) + ", layer " + std::to_string(l), map);
      record("score_map/" + tag + ".svg");
    }
  }

  void attn_corr() {
    if (cfg_.attn_layers.empty()) throw ConfigError("attn-corr needs attention layers (attention.layers or --attn-layers)");
    std::vector<std::size_t> next;
    for (std::size_t l : cfg_.attn_layers) next.push_back(l + 1);
    const ActivationStore store = load_activations(activations_path(), cfg_.attn_layers, next);
    std::vector<CorrelationResult> rows;
    for (std::size_t l : cfg_.attn_layers) {
      const ProbeWeights pw = probe_for(l);
      const std::size_t n_img = std::min(cfg_.attn_images, store.ids.size());
      std::vector<Tensor> attn;
      std::vector<std::vector<double>> scores;
      for (std::size_t i = 0; i < n_img; ++i) {
        const Tensor& x = store.patches.at(l)[i];
        scores.push_back(score_matrix(pw, x, x));
        attn.push_back(store.attention.at(l + 1)[i]);
      }
      CorrelationResult r = pooled_attention_correlation(attn, scores, store.grid_side, cfg_.n_perm,
                                                         derive_seed(cfg_.stage_seed("attn-corr"), std::to_string(l)));
      r.layer = l;
      r.next_layer = l + 1;
      rows.push_back(std::move(r));
    }
    write_correlation_csv(emit_path("attn_corr.csv"), rows);
    record("attn_corr.csv");
  }

  static std::string param_tag(const AblationConfig& a) {
    return mode_name(a.mode) + "_L" + std::to_string(a.layer) + "_" + detail::fmt("%.4f", a.parameter());
  }

  void ablate() {
    if (cfg_.ablations.empty()) throw ConfigError("ablate needs at least one ablation entry");
    const ModelBundle bundle = load_bundle(bundle_path());
    cfg_.validate_layers(bundle.arch.depth);
    const ImageSet images = load_images(images_path());
    const auto rasters = rasters_for(images.ids, bundle.arch.grid_side);
    std::vector<PatchSequence> seqs;
    for (const auto& img : images.images) seqs.push_back(patch_embed(img, bundle));

    std::vector<AblationConfig> runs = {AblationConfig{cfg_.ablations.front().layer, AblationMode::none}};
    for (const auto& a : cfg_.ablations) runs.push_back(a);
    std::vector<AblationRow> rows;
    std::map<std::size_t, ProbeWeights> probes;
    for (AblationConfig a : runs) {
      a.seed = cfg_.stage_seed("ablate");
      if (!probes.count(a.layer)) probes.emplace(a.layer, probe_for(a.layer));
      const ProbeWeights& pw = probes.at(a.layer);
      std::vector<Tensor> feats(seqs.size());
      std::vector<HookPlan> hooks(seqs.size());
      parallel_for(seqs.size(), [&](std::size_t i) { feats[i] = ablated_final_patches(seqs[i], bundle, pw, a, &rasters[i], images.ids[i], &hooks[i]); });
      if (a.mode != AblationMode::none) write_archive_rel("hooks/" + param_tag(a) + ".vbt", hooks_to_archive(hooks, images.ids, a));
      AblationRow row{a.mode, a.parameter(), std::nullopt, std::nullopt, std::nullopt};
      TrainRecipe sr = cfg_.semantic_recipe;
      sr.seed = cfg_.stage_seed("semantic-head");
      row.seg_acc = retrain_semantic_head(feats, rasters, sr).accuracy;
      if (cfg_.instance.enabled) {
        TrainRecipe ir = cfg_.instance.recipe;
        ir.seed = cfg_.stage_seed("instance-head");
        row.inst_acc = retrain_instance_head(feats, rasters, cfg_.instance.head, ir).accuracy;
      }
      if (cfg_.dino.enabled && a.mode != AblationMode::informed) row.dino_loss = eval_dino_loss(bundle, images.images, images.ids, &pw, a, cfg_.dino.eval);
      rows.push_back(row);
    }
    write_ablation_csv(emit_path("ablation.csv"), rows);
    record("ablation.csv");
  }

  void dino_loss() {
    const ModelBundle bundle = load_bundle(bundle_path());
    cfg_.validate_layers(bundle.arch.depth);
    const ImageSet images = load_images(images_path());
    std::string csv = "mode,parameter,dino_loss\n";
    const std::size_t layer = cfg_.ablations.empty() ? cfg_.probe_layer : cfg_.ablations.front().layer;
    std::vector<AblationConfig> runs = {AblationConfig{layer, AblationMode::none}};
    for (const auto& a : cfg_.ablations) {
      if (a.mode == AblationMode::informed) throw ConfigError("informed ablation cannot be evaluated under DINO loss");
      runs.push_back(a);
    }
    std::optional<ProbeWeights> pw;
    for (AblationConfig a : runs) {
      a.seed = cfg_.stage_seed("ablate");
      if (a.mode != AblationMode::none && (!pw || pw->layer != a.layer)) pw = probe_for(a.layer);
      const double loss = eval_dino_loss(bundle, images.images, images.ids, pw ? &*pw : nullptr, a, cfg_.dino.eval);
      csv += detail::fmt("%s,%.4f,%.6f\n", mode_name(a.mode).c_str(), a.parameter(), loss);
    }
    write_text("dino.csv", csv);
  }

  // Every CSV under the output directory, in path order, as markdown tables.
  void report() {
    std::vector<std::string> csvs;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(cfg_.output_dir))
      if (entry.is_regular_file() && entry.path().extension() == ".csv")
        csvs.push_back(std::filesystem::relative(entry.path(), cfg_.output_dir).generic_string());
    std::sort(csvs.begin(), csvs.end());
    std::ostringstream md;
    md << "# vitbind report\n\nseed: " << cfg_.seed << "\n";
    for (const auto& path : csvs) {
      std::ifstream in(cfg_.out(path));
      std::vector<std::string> lines;
      for (std::string line; std::getline(in, line);) lines.push_back(line);
      if (lines.empty()) continue;
      md << "\n## " << path << "\n\n";
      const std::size_t shown = std::min<std::size_t>(lines.size(), 41);
      for (std::size_t i = 0; i < shown; ++i) {
        std::string row = lines[i];
        std::replace(row.begin(), row.end(), ',', '|');
        md << '|' << row << "|\n";
        if (i == 0) {
          const auto cols = static_cast<std::size_t>(std::count(lines[0].begin(), lines[0].end(), ',')) + 1;
          md << '|';
          for (std::size_t c = 0; c < cols; ++c) md << "---|";
          md << '\n';
        }
      }
      if (lines.size() > shown) md << "\n(" << lines.size() - shown << " more rows in " << path << ")\n";
    }
    write_text("report.md", md.str());
  }
};

}  // namespace vitbind
