#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vitbind/pipeline.hpp"

using namespace vitbind;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vitbind_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json small_run(const std::string& out) {
  return {
      {"seed", 5},
      {"output_dir", out},
      {"stages", {"synth", "trace", "probe-train", "pca", "kde", "attn-corr", "ablate", "report"}},
      {"layers", {0}},
      {"probe_layer", 0},
      {"families", {"quad"}},
      {"recipe", {{"lr", 0.02}, {"epochs", 12}, {"batch_images", 8}, {"step_size_epochs", 8}, {"gamma", 0.2}, {"k", 8}, {"init_scale", 0.01}}},
      {"synthetic", {{"images", 16}, {"noise", 0.3}, {"binding_scale", 6.0}, {"feature_scale", 0.3}}},
      {"kde", {{"images", 2}}},
      {"attention", {{"layers", {0}}, {"images", 2}, {"n_perm", 0}}},
      {"ablations", {{{"layer", 0}, {"mode", "uninformed"}, {"ratios", {1.0}}}, {{"layer", 0}, {"mode", "informed"}, {"alpha", 0.5}}}},
      {"semantic_head", {{"lr", 0.01}, {"epochs", 4}, {"batch_images", 8}, {"step_size_epochs", 2}, {"gamma", 0.2}, {"init_scale", 0.1}}},
  };
}

}  // namespace

TEST(Config, UnknownTopLevelKeyRejected) {
  EXPECT_THROW(config_from_json({{"seed", 1}, {"sed", 2}}), ConfigError);
}

TEST(Config, UnknownNestedKeyRejected) {
  EXPECT_THROW(config_from_json({{"recipe", {{"learning_rate", 0.1}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"synthetic", {{"imgs", 4}}}}), ConfigError);
  EXPECT_THROW(config_from_json({{"ablations", {{{"layer", 0}, {"ratoi", 0.5}}}}}), ConfigError);
}

TEST(Config, WrongTypeIsConfigError) {
  EXPECT_THROW(config_from_json({{"seed", "seven"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"layers", 3}}), ConfigError);
}

TEST(Config, AblationListsExpand) {
  const auto c = config_from_json({{"ablations", {{{"layer", 3}, {"mode", "uninformed"}, {"ratios", {0.25, 0.5}}},
                                                  {{"layer", 3}, {"mode", "informed"}, {"alphas", {0.0}}}}}});
  ASSERT_EQ(c.ablations.size(), 3u);
  EXPECT_EQ(c.ablations[1].ratio, 0.5);
  EXPECT_EQ(c.ablations[2].mode, AblationMode::informed);
  EXPECT_EQ(c.ablations[2].alpha, 0.0);
  EXPECT_EQ(c.ablations[2].layer, 3u);
}

TEST(Config, InvalidValuesRejectedAtConstruction) {
  ExperimentConfig c;
  c.output_dir = scratch_dir("invalid").string();
  c.stages = {"fit"};
  EXPECT_THROW(Pipeline{c}, ConfigError);
  c.stages = {"trace"};
  c.families = {"cubic"};
  EXPECT_THROW(Pipeline{c}, ConfigError);
  c.families = {"quad"};
  c.bundle = "/nonexistent/model.vbt";
  EXPECT_THROW(Pipeline{c}, ConfigError);
}

TEST(Config, OutputDirFallsBackToEnvironment) {
  ::setenv(kOutputDirEnv, "/tmp/vitbind_env_out", 1);
  EXPECT_EQ(default_output_dir(), "/tmp/vitbind_env_out");
  ::unsetenv(kOutputDirEnv);
  EXPECT_EQ(default_output_dir(), "vitbind_out");
}

TEST(Pipeline, EmptyStageListWritesEmptyManifest) {
  const fs::path dir = scratch_dir("empty");
  ExperimentConfig c;
  c.output_dir = dir.string();
  Pipeline p(c);
  p.run();
  const auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(m.at("status"), "ok");
  EXPECT_TRUE(m.at("files").empty());
  EXPECT_TRUE(m.at("stages").empty());
}

TEST(Pipeline, MissingInputWritesFailedManifest) {
  const fs::path dir = scratch_dir("missing");
  ExperimentConfig c;
  c.output_dir = dir.string();
  c.stages = {"trace"};
  Pipeline p(c);
  EXPECT_THROW(p.run(), ConfigError);
  const auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(m.at("status"), "failed");
  EXPECT_NE(m.at("error").get<std::string>().find("trace"), std::string::npos);
}

TEST(Pipeline, LayerOutsideDepthRejected) {
  const fs::path dir = scratch_dir("depth");
  auto j = small_run(dir.string());
  j["stages"] = {"synth", "trace"};
  j["layers"] = {0, 2};
  Pipeline p(config_from_json(j));
  EXPECT_THROW(p.run(), ConfigError);
}

TEST(Pipeline, SyntheticEndToEndIsDeterministic) {
  const fs::path a = scratch_dir("e2e_a"), b = scratch_dir("e2e_b");
  Pipeline pa(config_from_json(small_run(a.string())));
  pa.run();
  Pipeline pb(config_from_json(small_run(b.string())));
  pb.run();

  for (const char* rel : {"synth/images.vbt", "synth/labels.vbt", "synth/pairs.vbt", "synth/model.vbt", "activations.vbt",
                          "probes/quad_L0.vbt", "probes/summary.csv", "pca/coords.csv", "pca/summary.csv", "kde/L0.csv",
                          "score_map/L0.csv", "attn_corr.csv", "ablation.csv", "hooks/uninformed_L0_1.0000.vbt", "report.md"})
    EXPECT_TRUE(fs::exists(a / rel)) << rel;

  const auto ma = nlohmann::json::parse(slurp(a / "manifest.json"));
  const auto mb = nlohmann::json::parse(slurp(b / "manifest.json"));
  EXPECT_EQ(ma.at("status"), "ok");
  EXPECT_EQ(ma.at("files"), mb.at("files"));
  EXPECT_EQ(ma.at("stages").size(), 8u);

  const std::string abl = slurp(a / "ablation.csv");
  EXPECT_EQ(abl.rfind("mode,parameter,seg_acc,inst_acc,dino_loss\nnone,0.0000,", 0), 0u);
  EXPECT_NE(abl.find("\nuninformed,1.0000,"), std::string::npos);
  EXPECT_NE(abl.find("\ninformed,0.5000,"), std::string::npos);
  EXPECT_NE(slurp(a / "report.md").find("## ablation.csv"), std::string::npos);
}

TEST(Pipeline, StagesResumeFromEarlierOutputs) {
  const fs::path dir = scratch_dir("resume");
  auto j = small_run(dir.string());
  j["stages"] = {"synth", "trace"};
  Pipeline(config_from_json(j)).run();
  j["stages"] = {"probe-train"};
  Pipeline p(config_from_json(j));
  p.run();
  ASSERT_EQ(p.manifest().files.size(), 2u);
  EXPECT_EQ(p.manifest().files[0].path, "probes/quad_L0.vbt");
  const TensorArchive ar = TensorArchive::read((dir / "probes/quad_L0.vbt").string());
  EXPECT_EQ(ar.metadata().at("family"), "quad");
}

TEST(Config, TooFewPermutationsRejected) {
  ExperimentConfig c;
  c.output_dir = scratch_dir("perm").string();
  c.n_perm = 19;
  EXPECT_THROW(Pipeline{c}, ConfigError);
  c.n_perm = 0;
  EXPECT_NO_THROW(Pipeline{c});
}
