#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mmgen/commands.hpp"
#include "mmgen/errors.hpp"

namespace mmgen {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct RunOutput {
  int code = 0;
  std::string out;
  std::string err;
};

RunOutput run_cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(MMGEN_CLI_PATH) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), slurp(out), slurp(err)};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mmgen_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    // Small enough for seconds-scale runs of every command.
    const json cfg = {
        {"data", {{"n_docs", 300}}},
        {"model", {{"n_layers", 1}, {"d_model", 16}, {"d_intermediate", 32}, {"n_heads_q", 4}, {"n_heads_kv", 2}}},
        {"train", {{"steps", 6}, {"rows_per_batch", 2}}},
        {"adapt", {{"steps", 3}, {"docs", 6}, {"docs_per_batch", 2}}},
        {"generate", {{"n_prompts", 2}, {"max_tokens", 120}}},
        {"eval", {{"n_prompts", 3}, {"text_docs", 3}}},
        {"bench", {{"n_prompts", 2}, {"checkpoint", "init"}}},
    };
    std::ofstream(dir_ / "cfg.json") << cfg.dump(2);
  }
  void TearDown() override { fs::remove_all(dir_); }

  RunOutput run(const std::string& cmd, const std::string& extra = "", const std::string& sub = "run") {
    return run_cli(cmd + " --config " + (dir_ / "cfg.json").string() + " --out-dir " + (dir_ / sub).string() +
                       " " + extra,
                   dir_);
  }

  fs::path dir_;
};

// Checks the subset of JSON Schema used by the shipped schemas.
void check_schema(const json& schema, const json& value, const std::string& at) {
  if (schema.contains("type")) {
    const std::string t = schema["type"];
    const bool ok = (t == "object" && value.is_object()) || (t == "array" && value.is_array()) ||
                    (t == "string" && value.is_string()) || (t == "boolean" && value.is_boolean()) ||
                    (t == "integer" && value.is_number_integer()) || (t == "number" && value.is_number());
    ASSERT_TRUE(ok) << at << " should be " << t << ", got " << value.dump();
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema["enum"]) found = found || e == value;
    EXPECT_TRUE(found) << at;
  }
  if (schema.contains("pattern")) EXPECT_TRUE(std::regex_match(value.get<std::string>(), std::regex(schema["pattern"].get<std::string>()))) << at;
  if (schema.contains("minimum")) EXPECT_GE(value.get<double>(), schema["minimum"].get<double>()) << at;
  if (schema.contains("maximum")) EXPECT_LE(value.get<double>(), schema["maximum"].get<double>()) << at;
  if (schema.contains("minItems")) EXPECT_GE(value.size(), schema["minItems"].get<std::size_t>()) << at;
  if (schema.contains("maxItems")) EXPECT_LE(value.size(), schema["maxItems"].get<std::size_t>()) << at;
  if (schema.contains("items"))
    for (std::size_t i = 0; i < value.size(); ++i) check_schema(schema["items"], value[i], at + "[" + std::to_string(i) + "]");
  if (schema.contains("required"))
    for (const auto& k : schema["required"]) EXPECT_TRUE(value.contains(k.get<std::string>())) << at << " lacks " << k;
  if (value.is_object())
    for (const auto& [k, v] : value.items()) {
      if (schema.contains("properties") && schema["properties"].contains(k))
        check_schema(schema["properties"][k], v, at + "." + k);
      else if (schema.contains("additionalProperties") && schema["additionalProperties"].is_object())
        check_schema(schema["additionalProperties"], v, at + "." + k);
    }
}

TEST(Config, DefaultsRoundTripAndHashIsStable) {
  const cli::RunConfig c;
  const auto d = cli::RunConfig::from_json(c.to_json());
  EXPECT_EQ(d.to_json(), c.to_json());
  EXPECT_EQ(d.hash(), c.hash());
  EXPECT_EQ(c.data.n_docs, 20000u);
  EXPECT_EQ(c.adapt.opt.lr, 2e-3);
  EXPECT_EQ(c.adapt.steps, 5000u);
  EXPECT_EQ(c.adapt.distill_fraction, 0.5);
}

TEST(Config, OverridesAndUnknownKeys) {
  const auto c = cli::load_config({}, {"train.steps=12", "generate.mode=ar", "generate.rule=topk:5"});
  EXPECT_EQ(c.train.steps, 12u);
  EXPECT_EQ(c.generate.mode, GenMode::kAr);
  EXPECT_NE(c.hash(), cli::RunConfig().hash());
  EXPECT_THROW(cli::load_config({}, {"train.stepz=3"}), ConfigError);
  EXPECT_THROW(cli::load_config({}, {"generate.rule=beam"}), ConfigError);
  EXPECT_THROW(cli::load_config({}, {"train.steps"}), ConfigError);
}

TEST_F(Cli, GenDataIsReproducibleAndVerified) {
  ASSERT_EQ(run("gen-data").code, 0);
  const std::string manifest = slurp(dir_ / "run" / "data" / "manifest.json");
  EXPECT_EQ(json::parse(manifest)["n_docs"], 300);
  ASSERT_EQ(run("gen-data").code, 0);
  EXPECT_EQ(slurp(dir_ / "run" / "data" / "manifest.json"), manifest);
  EXPECT_EQ(run("gen-data", "--verify").code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "run" / "configs" / "gen-data.json"));
  ASSERT_EQ(run("gen-data", "--seed 5").code, 0);
  EXPECT_NE(slurp(dir_ / "run" / "data" / "manifest.json"), manifest);
}

TEST_F(Cli, DefaultManifestListsAllDocuments) {
  ASSERT_EQ(run_cli("gen-data --out-dir " + (dir_ / "run").string(), dir_).code, 0);
  EXPECT_EQ(json::parse(slurp(dir_ / "run" / "data" / "manifest.json"))["n_docs"], 20000);
}

TEST_F(Cli, VerifyDetectsCorruption) {
  ASSERT_EQ(run("gen-data").code, 0);
  const fs::path train = dir_ / "run" / "data" / "train.txt";
  std::string text = slurp(train);
  // Turn the first BOS into a vision id.
  text.replace(0, text.find(' '), "100");
  std::ofstream(train, std::ios::binary) << text;
  const auto r = run("gen-data", "--verify");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("train.txt"), std::string::npos);
}

TEST_F(Cli, MissingArtifactNamesProducer) {
  auto r = run("train");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("mmgen gen-data"), std::string::npos) << r.err;
  ASSERT_EQ(run("gen-data").code, 0);
  r = run("adapt");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("mmgen train"), std::string::npos) << r.err;
}

TEST_F(Cli, BenchCountsForwardsWithoutTraining) {
  const auto r = run("bench");
  ASSERT_EQ(r.code, 0) << r.err;
  const json rep = json::parse(r.out);
  EXPECT_EQ(rep["checkpoint"], "init");
  EXPECT_EQ(rep["results"][0]["method"], "AR");
  EXPECT_EQ(rep["results"][0]["forward_passes"], 64.0);
  EXPECT_EQ(rep["results"][1]["method"], "DiDA");
  EXPECT_EQ(rep["results"][1]["forward_passes"], 9.0);
  EXPECT_EQ(rep["projection"]["dida_forward_passes"], 9);
  EXPECT_NEAR(rep["projection"]["forward_ratio"].get<double>(), 4096.0 / 9.0, 1e-9);
  EXPECT_EQ(rep["reference_timings_s"].size(), 2u);
}

TEST_F(Cli, PipelineReportsValidateAndCarryHash) {
  for (const std::string cmd : {"gen-data", "train", "adapt", "generate", "eval"}) {
    const auto r = run(cmd);
    ASSERT_EQ(r.code, 0) << cmd << ": " << r.err;
    const json rep = json::parse(r.out);
    EXPECT_EQ(rep["config_hash"].get<std::string>().size(), 16u);
    EXPECT_EQ(json::parse(slurp(dir_ / "run" / "reports" / (cmd + ".json"))), rep);
    EXPECT_TRUE(fs::exists(dir_ / "run" / "configs" / (cmd + ".json")));
  }
  const json schema = json::parse(slurp(fs::path(MMGEN_SCHEMA_DIR) / "eval_report.schema.json"));
  check_schema(schema, json::parse(slurp(dir_ / "run" / "reports" / "eval.json")), "$");
  EXPECT_TRUE(fs::exists(dir_ / "run" / "logs" / "train.jsonl"));
  const json samples = json::parse(slurp(dir_ / "run" / "generate" / "samples.json"));
  EXPECT_EQ(samples.size(), 2u);
}

TEST_F(Cli, DeterministicRunsAreByteIdentical) {
  auto once = [&](const std::string& sub) {
    EXPECT_EQ(run("gen-data", "--deterministic", sub).code, 0);
    EXPECT_EQ(run("train", "--deterministic", sub).code, 0);
    EXPECT_EQ(run("generate", "--deterministic --checkpoint base --rule temp:1.0", sub).code, 0);
    return std::pair{slurp(dir_ / sub / "checkpoints" / "base.ckpt"),
                     slurp(dir_ / sub / "generate" / "samples.json")};
  };
  const auto a = once("a"), b = once("b");
  EXPECT_FALSE(a.first.empty());
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

}  // namespace
}  // namespace mmgen
