// vitbind command-line interface.
//
//   vitbind --config run.json                 run every stage listed in the config
//   vitbind <stage> [--config run.json] ...   run one stage; flags override the config
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vitbind/pipeline.hpp"

using namespace vitbind;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> out, bundle, images, labels, activations, pairs, probe;
  std::vector<std::size_t> layers;
  std::optional<std::size_t> layer, layer2;
  std::vector<std::string> families;
  std::optional<std::size_t> epochs, batch_images, k, pairs_per_image;
  std::optional<double> lr;
  std::vector<std::size_t> attn_layers;
  std::optional<std::size_t> n_perm, attn_images;
  std::vector<int> instances;
  std::optional<std::size_t> pca_image, reference;
  std::optional<std::string> mode;
  std::optional<std::size_t> ablation_layer;
  std::vector<double> ratios, alphas;
  bool instance_head = false;
  bool dino = false;
  std::optional<double> student_temp, teacher_temp;
  std::optional<std::size_t> synth_images;
  std::optional<double> noise, binding_scale, feature_scale;
};

void add_options(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "global seed; stage seeds derive from it");
  app.add_option("--threads", o.threads, "worker thread cap (default: available cores)");
  app.add_option("--out", o.out, "output directory (default: $VITBIND_OUTPUT_DIR or ./vitbind_out)");
  app.add_option("--bundle", o.bundle, "model bundle archive");
  app.add_option("--images", o.images, "image_set archive");
  app.add_option("--labels", o.labels, "label_set archive");
  app.add_option("--activations", o.activations, "activations archive");
  app.add_option("--pairs", o.pairs, "pair_batches archive");
  app.add_option("--probe", o.probe, "probe archive for analyses and ablations");
  app.add_option("--layers", o.layers, "layers to trace, sweep, or analyse")->delimiter(',');
  app.add_option("--layer", o.layer, "probe layer");
  app.add_option("--layer2", o.layer2, "second layer for cross_layer probes");
  app.add_option("--family", o.families, "probe families (linear, diag, quad, class_pointwise, class_pairwise, cross_layer)")->delimiter(',');
  app.add_option("--epochs", o.epochs, "training epochs");
  app.add_option("--lr", o.lr, "learning rate");
  app.add_option("--batch-images", o.batch_images, "images per optimisation step");
  app.add_option("--k", o.k, "probe rank");
  app.add_option("--pairs-per-image", o.pairs_per_image, "patches sampled per image for pair supervision");
  app.add_option("--attn-layers", o.attn_layers, "layers whose probe scores are correlated with the next block's attention")->delimiter(',');
  app.add_option("--attn-images", o.attn_images, "images pooled for attention correlation");
  app.add_option("--n-perm", o.n_perm, "permutations for the correlation p-value (0: none)");
  app.add_option("--instances", o.instances, "instance ids of the aligned copies for residual-delta PCA")->delimiter(',');
  app.add_option("--pca-image", o.pca_image, "image index for residual-delta PCA");
  app.add_option("--reference", o.reference, "reference patch for score maps");
  app.add_option("--mode", o.mode, "ablation mode: uninformed or informed");
  app.add_option("--ablation-layer", o.ablation_layer, "layer whose output is edited");
  app.add_option("--ratio", o.ratios, "shuffle ratios")->delimiter(',');
  app.add_option("--alpha", o.alphas, "injection alphas")->delimiter(',');
  app.add_flag("--instance-head", o.instance_head, "also retrain the instance head in ablate");
  app.add_flag("--dino", o.dino, "also evaluate DINO loss in ablate");
  app.add_option("--student-temp", o.student_temp, "DINO student temperature");
  app.add_option("--teacher-temp", o.teacher_temp, "DINO teacher temperature");
  app.add_option("--synth-images", o.synth_images, "synthetic images to generate");
  app.add_option("--noise", o.noise, "synthetic noise level");
  app.add_option("--binding-scale", o.binding_scale, "synthetic binding coefficient scale");
  app.add_option("--feature-scale", o.feature_scale, "synthetic class-mean scale");
}

ExperimentConfig build_config(const Overrides& o, const std::optional<std::string>& stage) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (stage) c.stages = {*stage};
  if (o.seed) c.seed = *o.seed;
  if (o.threads) c.threads = *o.threads;
  if (o.out) c.output_dir = *o.out;
  if (o.bundle) c.bundle = *o.bundle;
  if (o.images) c.images = *o.images;
  if (o.labels) c.labels = *o.labels;
  if (o.activations) c.activations = *o.activations;
  if (o.pairs) c.pairs = *o.pairs;
  if (o.probe) c.probe = *o.probe;
  if (!o.layers.empty()) c.layers = o.layers;
  if (o.layer) c.probe_layer = *o.layer;
  if (o.layer2) c.probe_layer2 = *o.layer2;
  if (!o.families.empty()) c.families = o.families;
  if (o.epochs) c.recipe.epochs = *o.epochs;
  if (o.lr) c.recipe.lr = *o.lr;
  if (o.batch_images) c.recipe.batch_images = *o.batch_images;
  if (o.k) c.recipe.k = *o.k;
  if (o.pairs_per_image) c.pairs_per_image = *o.pairs_per_image;
  if (!o.attn_layers.empty()) c.attn_layers = o.attn_layers;
  if (o.attn_images) c.attn_images = *o.attn_images;
  if (o.n_perm) c.n_perm = *o.n_perm;
  if (!o.instances.empty()) c.pca_instances = o.instances;
  if (o.pca_image) c.pca_image = *o.pca_image;
  if (o.reference) c.score_reference = *o.reference;
  if (o.mode || !o.ratios.empty() || !o.alphas.empty() || o.ablation_layer) {
    const AblationMode mode = o.mode ? parse_mode(*o.mode) : (!o.alphas.empty() ? AblationMode::informed : AblationMode::uninformed);
    const std::size_t layer = o.ablation_layer ? *o.ablation_layer : (c.ablations.empty() ? c.probe_layer : c.ablations.front().layer);
    const auto& values = mode == AblationMode::informed ? o.alphas : o.ratios;
    if (values.empty()) throw ConfigError("--mode " + mode_name(mode) + " needs " + (mode == AblationMode::informed ? "--alpha" : "--ratio"));
    c.ablations.clear();
    for (double v : values) {
      AblationConfig a;
      a.layer = layer;
      a.mode = mode;
      (mode == AblationMode::informed ? a.alpha : a.ratio) = v;
      c.ablations.push_back(a);
    }
  }
  if (o.instance_head) c.instance.enabled = true;
  if (o.dino) c.dino.enabled = true;
  if (o.student_temp) c.dino.eval.student_temp = *o.student_temp;
  if (o.teacher_temp) c.dino.eval.teacher_temp = *o.teacher_temp;
  if (o.synth_images) c.synth.spec.images = *o.synth_images;
  if (o.noise) c.synth.spec.noise = *o.noise;
  if (o.binding_scale) c.synth.spec.binding_scale = *o.binding_scale;
  if (o.feature_scale) c.synth.spec.feature_scale = *o.feature_scale;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vitbind: object-binding probes, analyses, and ablations for ViT activations"};
  app.fallthrough();
  Overrides o;
  add_options(app, o);
  std::vector<std::pair<std::string, CLI::App*>> subs;
  const std::map<std::string, std::string> help = {
      {"synth", "generate planted synthetic images, labels, pairs, and a two-block model"},
      {"trace", "run the encoder and store per-layer patch activations"},
      {"probe-train", "train probes at one layer"},
      {"probe-sweep", "train one probe per layer and plot accuracy by layer"},
      {"pos-probe", "decode patch grid coordinates per layer"},
      {"pca", "PCA of residual deltas between aligned object copies"},
      {"kde", "same/different score densities and score maps per layer"},
      {"attn-corr", "correlate probe scores with next-block attention"},
      {"ablate", "shuffle or inject binding vectors and retrain the heads"},
      {"dino-loss", "DINO self-distillation loss under shuffle ablations"},
      {"report", "collect every CSV into report.md"}};
  for (const auto& stage : stage_order()) subs.emplace_back(stage, app.add_subcommand(stage, help.at(stage)));
  app.require_subcommand(0, 1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    std::optional<std::string> stage;
    for (const auto& [name, sub] : subs)
      if (sub->parsed()) stage = name;
    if (!stage && o.config.empty()) {
      std::cerr << app.help();
      return 2;
    }
    Pipeline pipeline(build_config(o, stage));
    pipeline.run();
    const auto& m = pipeline.manifest();
    std::cout << "wrote " << m.files.size() << " files to " << pipeline.config().output_dir << " (manifest.json)\n";
    return 0;
  } catch (const vitbind::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
