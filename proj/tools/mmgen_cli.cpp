#include <malloc.h>

#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mmgen/commands.hpp"
#include "mmgen/errors.hpp"

using namespace mmgen;

int main(int argc, char** argv) {
  // Large activation buffers are reused across steps; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Interleaved text/image generation on a synthetic world: data, training, "
               "adaptation, generation, benchmarking and evaluation."};
  app.require_subcommand(1);
  app.set_version_flag("--version", "mmgen 0.1");

  std::string config_file, out_dir;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool deterministic = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--out-dir", out_dir, "run directory for artifacts and reports");
    sub->add_flag("--deterministic", deterministic, "pin the scalar kernels");
    sub->add_option("--set", overrides, "config override key.path=value (repeatable)");
  };

  auto* gen_data = app.add_subcommand("gen-data", "generate the world corpus and its manifest");
  bool verify = false;
  gen_data->add_flag("--verify", verify, "re-parse existing dataset files against the manifest");

  auto* train = app.add_subcommand("train", "train the base model with next-token prediction");
  std::size_t train_steps = 0;
  train->add_option("--steps", train_steps, "optimizer steps");

  auto* adapt = app.add_subcommand("adapt", "adapt the base model to parallel image denoising");
  std::size_t adapt_steps = 0;
  adapt->add_option("--steps", adapt_steps, "optimizer steps");

  auto* gen = app.add_subcommand("generate", "generate interleaved sequences");
  std::string mode, rule, prompt, checkpoint;
  std::size_t gen_denoise = 0;
  gen->add_option("--mode", mode, "ar or dida")->check(CLI::IsMember({"ar", "dida"}));
  gen->add_option("--rule", rule, "greedy, temp:T or topk:K");
  gen->add_option("--denoise-steps", gen_denoise, "denoising steps per image");
  gen->add_option("--prompt", prompt, "space-separated prompt token ids");
  gen->add_option("--checkpoint", checkpoint, "base or adapted")->check(CLI::IsMember({"base", "adapted"}));

  auto* bench = app.add_subcommand("bench", "per-image forward passes and wall time, AR vs DiDA");
  std::size_t bench_denoise = 0;
  bench->add_option("--denoise-steps", bench_denoise, "denoising steps per image");

  auto* eval = app.add_subcommand("eval", "held-out exact match for AR and DiDA, text loss");

  for (auto* sub : {gen_data, train, adapt, gen, bench, eval}) add_common(sub);

  CLI11_PARSE(app, argc, argv);

  if (app.got_subcommand(train) && train_steps) overrides.push_back("train.steps=" + std::to_string(train_steps));
  if (app.got_subcommand(adapt) && adapt_steps) overrides.push_back("adapt.steps=" + std::to_string(adapt_steps));
  if (!mode.empty()) overrides.push_back("generate.mode=\"" + mode + "\"");
  if (!rule.empty()) overrides.push_back("generate.rule=\"" + rule + "\"");
  if (!checkpoint.empty()) overrides.push_back("generate.checkpoint=\"" + checkpoint + "\"");
  if (gen_denoise) overrides.push_back("generate.denoise_steps=" + std::to_string(gen_denoise));
  if (bench_denoise) overrides.push_back("bench.denoise_steps=" + std::to_string(bench_denoise));
  if (!prompt.empty()) {
    std::istringstream in(prompt);
    std::string ids, tok;
    while (in >> tok) ids += (ids.empty() ? "" : ",") + tok;
    overrides.push_back("generate.prompt=[" + ids + "]");
  }

  try {
    cli::RunConfig cfg = cli::load_config(config_file, overrides);
    if (app.get_subcommands().front()->count("--seed")) cfg.seed = seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (deterministic) cfg.deterministic = true;

    nlohmann::json report;
    if (app.got_subcommand(gen_data))
      report = verify ? cli::cmd_verify_data(cfg) : cli::cmd_gen_data(cfg);
    else if (app.got_subcommand(train))
      report = cli::cmd_train(cfg);
    else if (app.got_subcommand(adapt))
      report = cli::cmd_adapt(cfg);
    else if (app.got_subcommand(gen))
      report = cli::cmd_generate(cfg);
    else if (app.got_subcommand(bench))
      report = cli::cmd_bench(cfg);
    else
      report = cli::cmd_eval(cfg);
    std::cout << report.dump(2) << "\n";
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
