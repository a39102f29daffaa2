#include <gtest/gtest.h>

#include <filesystem>

#include "agglom3d/agglom3d.hpp"

using namespace agglom3d;

namespace {

const std::filesystem::path kConfigs = AGGLOM3D_CONFIG_DIR;

nlohmann::json minimal() {
  return nlohmann::json::parse(R"({"teachers": [{"name": "lseg-like", "dim": 8, "text_aligned": true}]})");
}

std::string config_error(const nlohmann::json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"default.json", "pipeline.json", "complementary.json"}) {
    const auto c = load_config(kConfigs / name);
    EXPECT_FALSE(c.teachers.empty()) << name;
  }
  EXPECT_EQ(load_config(kConfigs / "pipeline.json").pipeline.cells.size(), 3u);
}

TEST(Config, SerializeRoundTrips) {
  for (const char* name : {"default.json", "pipeline.json", "complementary.json"}) {
    const auto c = load_config(kConfigs / name);
    const auto j = serialize_config(c);
    EXPECT_EQ(serialize_config(parse_config(j)), j) << name;
  }
}

TEST(Config, MinimalGetsDefaults) {
  const auto c = parse_config(minimal());
  EXPECT_EQ(c.teachers.size(), 1u);
  EXPECT_EQ(c.objective, ObjectiveMode::kStabilized);
  EXPECT_EQ(c.trainer.epochs, TrainConfig{}.epochs);
  EXPECT_EQ(c.scene.num_classes, SceneSection{}.num_classes);
}

TEST(Config, MissingTeachersIsError) {
  EXPECT_NE(config_error(nlohmann::json::parse(R"({"seed": 1})")).find("teachers"), std::string::npos);
  EXPECT_NE(config_error(nlohmann::json::parse(R"({"teachers": []})")).find("teachers"), std::string::npos);
}

TEST(Config, UnknownKeyNamesItsPath) {
  auto j = minimal();
  j["trainer"] = {{"lr", 0.1}};
  EXPECT_NE(config_error(j).find("trainer.lr"), std::string::npos);
  j = minimal();
  j["teachers"][0]["colour"] = "red";
  EXPECT_NE(config_error(j).find("teachers[0].colour"), std::string::npos);
  j = minimal();
  j["extra"] = 1;
  EXPECT_NE(config_error(j).find("extra"), std::string::npos);
}

TEST(Config, BadValuesAreErrors) {
  auto j = minimal();
  j["objective"] = {{"mode", "sometimes"}};
  EXPECT_FALSE(config_error(j).empty());
  j = minimal();
  j["scene"] = {{"num_classes", 1}};
  EXPECT_FALSE(config_error(j).empty());
  j = minimal();
  j["teachers"][0]["loss"] = "huber";
  EXPECT_FALSE(config_error(j).empty());
  j = minimal();
  j["trainer"] = {{"epochs", "many"}};
  EXPECT_NE(config_error(j).find("trainer.epochs"), std::string::npos);
  j = minimal();
  j["pipeline"] = {{"cells", {{{"name", "x"}, {"teachers", {"nobody"}}}}}};
  EXPECT_NE(config_error(j).find("nobody"), std::string::npos);
  j = minimal();
  j["eval"] = {{"probe_solver", "sgd"}};
  EXPECT_NE(config_error(j).find("probe_solver"), std::string::npos);
  EXPECT_THROW(parse_config_text("{not json"), ConfigError);
}

TEST(Config, ProbeSolverSelectable) {
  auto j = minimal();
  j["eval"] = {{"probe_solver", "gradient"}, {"probe_steps", 20}};
  const auto c = parse_config(j);
  const auto p = c.eval.probe_config(ProbeMode::kSingle, 0);
  EXPECT_EQ(p.solver, ProbeSolver::kGradient);
  EXPECT_EQ(p.steps, 20);
}

TEST(Config, MissingFileIsIoError) { EXPECT_THROW(load_config(kConfigs / "does_not_exist.json"), IoError); }

TEST(Config, DerivedSeedsDifferPerStage) {
  auto c = parse_config(minimal());
  c.seed = 5;
  EXPECT_NE(c.student_seed(), c.train_config().seed);
  EXPECT_NE(c.layout_spec().seed, c.student_seed());
  auto d = c;
  d.seed = 6;
  EXPECT_NE(c.student_seed(), d.student_seed());
}
