#pragma once

// End-to-end workflow behind the command-line tool. Every command reads a
// RunConfig, writes its artifacts under out_dir, archives the config it ran
// with and returns a JSON report that is also written to out_dir/reports.
//
// Layout of out_dir:
//   configs/<command>.json       config of the last run of each command
//   data/train.txt, heldout.txt  serialized documents, manifest.json
//   checkpoints/base.ckpt, adapted.ckpt
//   logs/train.jsonl, adapt.jsonl  one metrics object per step
//   reports/<command>.json
//   images/*.ppm, *.pgm

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmgen/adapt.hpp"
#include "mmgen/infer.hpp"
#include "mmgen/model.hpp"
#include "mmgen/train.hpp"
#include "mmgen/worldsim.hpp"

namespace mmgen::cli {

struct GenerateOptions {
  GenMode mode = GenMode::kHybrid;
  std::string rule = "greedy";
  std::size_t denoise_steps = 16;
  Budgets budgets;
  std::size_t n_prompts = 4;     // held-out prompts used when `prompt` is empty
  std::vector<TokenId> prompt;   // explicit prompt ids
  std::string checkpoint = "adapted";
  bool dump_images = true;
};

struct EvalOptions {
  std::size_t n_prompts = 200;
  int rows = 8;
  int cols = 8;
  std::size_t denoise_steps = 16;
  std::size_t text_docs = 200;
};

struct BenchOptions {
  int rows = 8;
  int cols = 8;
  std::size_t denoise_steps = 8;
  std::size_t n_prompts = 10;
  // "auto" picks adapted, then base, then a freshly initialized model.
  std::string checkpoint = "auto";
  std::size_t project_n = 4096;
};

struct RunConfig {
  std::uint64_t seed = 0;
  bool deterministic = false;
  std::filesystem::path out_dir = "mmgen_run";
  world::CorpusSpec data;
  ModelConfig model;
  TrainConfig train;
  AdaptConfig adapt;
  std::size_t adapt_docs = 2000;  // training documents drawn for the adaptation corpus
  GenerateOptions generate;
  EvalOptions eval;
  BenchOptions bench;

  RunConfig();
  nlohmann::json to_json() const;
  // Keys missing from j keep their defaults; unknown keys throw ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  // FNV-1a of the canonical JSON form.
  std::string hash() const;
};

// Loads an optional JSON file, then applies "a.b.c=value" overrides where
// value is parsed as JSON when possible and kept as a string otherwise.
RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

// Checkpoints and datasets of a run directory.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path train_data() const { return root / "data" / "train.txt"; }
  std::filesystem::path heldout_data() const { return root / "data" / "heldout.txt"; }
  std::filesystem::path manifest() const { return root / "data" / "manifest.json"; }
  std::filesystem::path base_ckpt() const { return root / "checkpoints" / "base.ckpt"; }
  std::filesystem::path adapted_ckpt() const { return root / "checkpoints" / "adapted.ckpt"; }
  std::filesystem::path report(const std::string& cmd) const { return root / "reports" / (cmd + ".json"); }
};

// Returns the first prompts of held-out documents: the prefix up to the first
// image's size tokens and that image's cells, restricted to rows x cols.
struct HeldoutPrompt {
  std::vector<TokenId> prompt;
  std::vector<TokenId> target;
};
std::vector<HeldoutPrompt> heldout_prompts(const UnifiedVocab& v,
                                           const std::vector<std::vector<TokenId>>& docs,
                                           int rows, int cols, std::size_t limit);

// Fraction of prompts whose first generated image equals its target.
struct ExactMatch {
  double rate = 0;
  std::size_t matched = 0;
  std::size_t total = 0;
  double mean_block_forwards = 0;
  double mean_image_ms = 0;
};
ExactMatch exact_match(const ModelParams<float>& params, const std::vector<HeldoutPrompt>& prompts,
                       GenMode mode, std::size_t denoise_steps);

nlohmann::json cmd_gen_data(const RunConfig& cfg);
// Re-parses the dataset files and checks them against the manifest. Throws
// Error naming the first problem.
nlohmann::json cmd_verify_data(const RunConfig& cfg);
nlohmann::json cmd_train(const RunConfig& cfg);
nlohmann::json cmd_adapt(const RunConfig& cfg);
nlohmann::json cmd_generate(const RunConfig& cfg);
nlohmann::json cmd_bench(const RunConfig& cfg);
nlohmann::json cmd_eval(const RunConfig& cfg);

}  // namespace mmgen::cli
