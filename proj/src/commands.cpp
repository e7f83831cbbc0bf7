#include "mmgen/commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mmgen/errors.hpp"
#include "mmgen/simd.hpp"

namespace mmgen::cli {
namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const std::filesystem::path& p, const json& j) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

void require(const std::filesystem::path& p, const std::string& producer) {
  if (!std::filesystem::exists(p))
    throw ConfigError("missing " + p.string() + "; run `mmgen " + producer + "` first");
}

std::string pack_mode_name(world::PackMode m) {
  return m == world::PackMode::kOnlinePack ? "online_pack" : "offline_pad";
}

world::PackMode parse_pack_mode(const std::string& s) {
  if (s == "online_pack") return world::PackMode::kOnlinePack;
  if (s == "offline_pad") return world::PackMode::kOfflinePad;
  throw ConfigError("unknown packing mode: " + s);
}

// Recursively overlays `in` onto `base`, rejecting keys `base` does not have.
void overlay(json& base, const json& in, const std::string& path) {
  if (!in.is_object()) throw ConfigError("config section " + path + " must be an object");
  for (const auto& [k, val] : in.items()) {
    const std::string key = path.empty() ? k : path + "." + k;
    if (!base.contains(k)) throw ConfigError("unknown config key " + key);
    if (base[k].is_object() && key != "model.vocab")
      overlay(base[k], val, key);
    else
      base[k] = val;
  }
}

// Commands share these: archive the config, pin the kernel set.
void start(const RunConfig& cfg, const std::string& cmd) {
  if (cfg.deterministic) simd::set_isa(simd::Isa::kScalar);
  write_json(cfg.out_dir / "configs" / (cmd + ".json"), cfg.to_json());
}

json finish(const RunConfig& cfg, const std::string& cmd, json report) {
  report["command"] = cmd;
  report["config_hash"] = cfg.hash();
  report["deterministic"] = cfg.deterministic;
  report["isa"] = std::string(simd::isa_name(simd::active_isa()));
  write_json(RunPaths{cfg.out_dir}.report(cmd), report);
  return report;
}

std::vector<std::vector<TokenId>> load_docs(const std::filesystem::path& p, const UnifiedVocab& v) {
  require(p, "gen-data");
  Dataset ds = read_dataset(p);
  if (!(ds.vocab == v)) throw ConfigError(p.string() + " was written with a different vocabulary");
  return std::move(ds.sequences);
}

ModelParams<float> load_model(const std::filesystem::path& p, const std::string& producer) {
  require(p, producer);
  return load_checkpoint<float>(p);
}

LossWeights text_only() {
  LossWeights w;
  w.w_visual = 0;
  w.w_special = 0;
  w.w_text = 1;
  return w;
}

std::vector<std::vector<TokenId>> first_n(const std::vector<std::vector<TokenId>>& docs, std::size_t n) {
  return {docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(std::min(n, docs.size()))};
}

}  // namespace

RunConfig::RunConfig() {
  train.steps = 2400;
  train.rows_per_batch = 8;
  train.max_len = 256;
  train.opt.lr = 2e-3;
  train.opt.warmup_steps = 100;
  train.opt.total_steps = 0;
  adapt.steps = 5000;
  adapt.opt.lr = 2e-3;
  adapt.opt.total_steps = 0;
}

json RunConfig::to_json() const {
  json gen_prompt = json::array();
  for (TokenId t : generate.prompt) gen_prompt.push_back(t);
  return {
      {"seed", seed},
      {"deterministic", deterministic},
      {"out_dir", out_dir.string()},
      {"data",
       {{"n_docs", data.n_docs},
        {"min_frames", data.min_frames},
        {"max_frames", data.max_frames},
        {"grid_sizes", data.grid_sizes},
        {"heldout_fraction", data.heldout_fraction}}},
      {"model", model.to_json()},
      {"train",
       {{"steps", train.steps},
        {"rows_per_batch", train.rows_per_batch},
        {"max_len", train.max_len},
        {"packing", pack_mode_name(train.packing)},
        {"opt", train.opt.to_json()},
        {"weights", train.weights.to_json()}}},
      {"adapt", [&] {
         json a = adapt.to_json();
         a.erase("seed");
         a["docs"] = adapt_docs;
         return a;
       }()},
      {"generate",
       {{"mode", std::string(gen_mode_name(generate.mode))},
        {"rule", generate.rule},
        {"denoise_steps", generate.denoise_steps},
        {"max_tokens", generate.budgets.max_tokens},
        {"max_images", generate.budgets.max_images},
        {"n_prompts", generate.n_prompts},
        {"prompt", gen_prompt},
        {"checkpoint", generate.checkpoint},
        {"dump_images", generate.dump_images}}},
      {"eval",
       {{"n_prompts", eval.n_prompts},
        {"rows", eval.rows},
        {"cols", eval.cols},
        {"denoise_steps", eval.denoise_steps},
        {"text_docs", eval.text_docs}}},
      {"bench",
       {{"rows", bench.rows},
        {"cols", bench.cols},
        {"denoise_steps", bench.denoise_steps},
        {"n_prompts", bench.n_prompts},
        {"checkpoint", bench.checkpoint},
        {"project_n", bench.project_n}}},
  };
}

RunConfig RunConfig::from_json(const json& j) {
  json full = RunConfig().to_json();
  overlay(full, j, "");
  try {
    RunConfig c;
    c.seed = full.at("seed").get<std::uint64_t>();
    c.deterministic = full.at("deterministic").get<bool>();
    c.out_dir = full.at("out_dir").get<std::string>();
    const json& d = full.at("data");
    c.data.n_docs = d.at("n_docs").get<std::size_t>();
    c.data.min_frames = d.at("min_frames").get<int>();
    c.data.max_frames = d.at("max_frames").get<int>();
    c.data.grid_sizes = d.at("grid_sizes").get<std::vector<int>>();
    c.data.heldout_fraction = d.at("heldout_fraction").get<double>();
    c.model = ModelConfig::from_json(full.at("model"));
    c.model.validate();
    const json& t = full.at("train");
    c.train.steps = t.at("steps").get<std::size_t>();
    c.train.rows_per_batch = t.at("rows_per_batch").get<std::size_t>();
    c.train.max_len = t.at("max_len").get<std::size_t>();
    c.train.packing = parse_pack_mode(t.at("packing").get<std::string>());
    c.train.opt = OptimizerConfig::from_json(t.at("opt"));
    c.train.weights = LossWeights::from_json(t.at("weights"));
    json a = full.at("adapt");
    c.adapt_docs = a.at("docs").get<std::size_t>();
    a.erase("docs");
    c.adapt = AdaptConfig::from_json(a);
    const json& g = full.at("generate");
    c.generate.mode = parse_gen_mode(g.at("mode").get<std::string>());
    c.generate.rule = g.at("rule").get<std::string>();
    DecodeRule::parse(c.generate.rule);
    c.generate.denoise_steps = g.at("denoise_steps").get<std::size_t>();
    c.generate.budgets.max_tokens = g.at("max_tokens").get<std::size_t>();
    c.generate.budgets.max_images = g.at("max_images").get<std::size_t>();
    c.generate.n_prompts = g.at("n_prompts").get<std::size_t>();
    c.generate.prompt = g.at("prompt").get<std::vector<TokenId>>();
    c.generate.checkpoint = g.at("checkpoint").get<std::string>();
    c.generate.dump_images = g.at("dump_images").get<bool>();
    const json& e = full.at("eval");
    c.eval.n_prompts = e.at("n_prompts").get<std::size_t>();
    c.eval.rows = e.at("rows").get<int>();
    c.eval.cols = e.at("cols").get<int>();
    c.eval.denoise_steps = e.at("denoise_steps").get<std::size_t>();
    c.eval.text_docs = e.at("text_docs").get<std::size_t>();
    const json& b = full.at("bench");
    c.bench.rows = b.at("rows").get<int>();
    c.bench.cols = b.at("cols").get<int>();
    c.bench.denoise_steps = b.at("denoise_steps").get<std::size_t>();
    c.bench.n_prompts = b.at("n_prompts").get<std::size_t>();
    c.bench.checkpoint = b.at("checkpoint").get<std::string>();
    c.bench.project_n = b.at("project_n").get<std::size_t>();
    if (c.generate.checkpoint != "base" && c.generate.checkpoint != "adapted")
      throw ConfigError("generate.checkpoint must be base or adapted");
    if (c.bench.checkpoint != "auto" && c.bench.checkpoint != "base" &&
        c.bench.checkpoint != "adapted" && c.bench.checkpoint != "init")
      throw ConfigError("bench.checkpoint must be auto, base, adapted or init");
    return c;
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("bad config value: ") + ex.what());
  }
}

std::string RunConfig::hash() const { return hex64(fnv1a(to_json().dump())); }

RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!file.empty()) {
    try {
      j = json::parse(read_file(file));
    } catch (const json::parse_error& e) {
      throw ConfigError(file.string() + ": " + e.what());
    }
  }
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + o);
    json value;
    try {
      value = json::parse(o.substr(eq + 1));
    } catch (const json::parse_error&) {
      value = o.substr(eq + 1);
    }
    json* node = &j;
    std::stringstream keys(o.substr(0, eq));
    std::string k;
    std::vector<std::string> parts;
    while (std::getline(keys, k, '.')) parts.push_back(k);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
      node = &(*node)[parts[i]];
    }
    (*node)[parts.back()] = value;
  }
  return RunConfig::from_json(j);
}

std::vector<HeldoutPrompt> heldout_prompts(const UnifiedVocab& v,
                                           const std::vector<std::vector<TokenId>>& docs,
                                           int rows, int cols, std::size_t limit) {
  std::vector<HeldoutPrompt> out;
  for (const auto& d : docs) {
    if (out.size() >= limit) break;
    const auto boi = std::find(d.begin(), d.end(), v.boi());
    if (boi == d.end() || d.end() - boi < 3) continue;
    if (*(boi + 1) != v.size_row(rows) || *(boi + 2) != v.size_col(cols)) continue;
    HeldoutPrompt p;
    p.prompt.assign(d.begin(), boi + 3);
    p.target.assign(boi + 3, boi + 3 + rows * cols);
    out.push_back(std::move(p));
  }
  return out;
}

ExactMatch exact_match(const ModelParams<float>& params, const std::vector<HeldoutPrompt>& prompts,
                       GenMode mode, std::size_t denoise_steps) {
  ExactMatch m;
  for (const HeldoutPrompt& p : prompts) {
    GenConfig cfg;
    cfg.mode = mode;
    cfg.denoise_steps = denoise_steps;
    cfg.budgets = {p.target.size() + 2, 0};
    const GenResult r = generate(params, p.prompt, cfg);
    ++m.total;
    if (r.images.empty()) continue;
    m.matched += r.images[0].tokens == p.target;
    m.mean_block_forwards += static_cast<double>(r.images[0].block_forwards);
    m.mean_image_ms += r.images[0].wall_time_ms;
  }
  if (m.total) {
    m.rate = static_cast<double>(m.matched) / static_cast<double>(m.total);
    m.mean_block_forwards /= static_cast<double>(m.total);
    m.mean_image_ms /= static_cast<double>(m.total);
  }
  return m;
}

json cmd_gen_data(const RunConfig& cfg) {
  start(cfg, "gen-data");
  const RunPaths paths{cfg.out_dir};
  const auto t0 = Clock::now();
  world::CorpusSpec spec = cfg.data;
  spec.seed = cfg.seed;
  const UnifiedVocab& v = cfg.model.vocab;
  std::vector<std::vector<TokenId>> train, heldout;
  for (const auto& d : world::gen_corpus(spec))
    (d.heldout ? heldout : train).push_back(serialize_document(v, d.to_document()).tokens);
  std::filesystem::create_directories(paths.train_data().parent_path());
  write_dataset(paths.train_data(), v, train);
  write_dataset(paths.heldout_data(), v, heldout);
  json files = json::object();
  for (const auto& [name, path, n] : {std::tuple{"train.txt", paths.train_data(), train.size()},
                                      std::tuple{"heldout.txt", paths.heldout_data(), heldout.size()}}) {
    const std::string bytes = read_file(path);
    files[name] = {{"sequences", n}, {"bytes", bytes.size()}, {"fnv1a", hex64(fnv1a(bytes))}};
  }
  const json manifest = {{"seed", cfg.seed},          {"n_docs", train.size() + heldout.size()},
                         {"n_train", train.size()},   {"n_heldout", heldout.size()},
                         {"vocab", v.to_json()},      {"files", files},
                         {"config_hash", cfg.hash()}};
  write_json(paths.manifest(), manifest);
  return finish(cfg, "gen-data",
                {{"n_docs", manifest["n_docs"]},
                 {"n_train", train.size()},
                 {"n_heldout", heldout.size()},
                 {"files", files},
                 {"wall_time_ms", ms_since(t0)}});
}

json cmd_verify_data(const RunConfig& cfg) {
  const RunPaths paths{cfg.out_dir};
  require(paths.manifest(), "gen-data");
  const json manifest = json::parse(read_file(paths.manifest()));
  std::size_t checked = 0;
  for (const auto& [name, entry] : manifest.at("files").items()) {
    const auto path = paths.manifest().parent_path() / name;
    require(path, "gen-data");
    const std::string bytes = read_file(path);
    if (hex64(fnv1a(bytes)) != entry.at("fnv1a").get<std::string>() ||
        bytes.size() != entry.at("bytes").get<std::size_t>())
      throw MalformedDocument(name + ": contents differ from the manifest");
    const Dataset ds = read_dataset(path);
    if (ds.sequences.size() != entry.at("sequences").get<std::size_t>())
      throw MalformedDocument(name + ": sequence count differs from the manifest");
    for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
      try {
        parse_sequence(ds.vocab, ds.sequences[i]);
      } catch (const ParseError& e) {
        throw MalformedDocument(name + " line " + std::to_string(i + 1) + ": " + e.what());
      }
    }
    checked += ds.sequences.size();
  }
  return {{"command", "gen-data --verify"}, {"ok", true}, {"sequences", checked}};
}

json cmd_train(const RunConfig& cfg) {
  start(cfg, "train");
  const RunPaths paths{cfg.out_dir};
  const UnifiedVocab& v = cfg.model.vocab;
  auto docs = load_docs(paths.train_data(), v);
  const auto heldout = load_docs(paths.heldout_data(), v);
  TrainConfig tc = cfg.train;
  tc.seed = Rng::derive(cfg.seed, 2);
  if (tc.opt.total_steps == 0) tc.opt.total_steps = tc.steps;
  auto params = ModelParams<float>::init(cfg.model, Rng::derive(cfg.seed, 1));
  BatchStream stream(v, std::move(docs), tc.packing, tc.max_len, tc.rows_per_batch, tc.seed);
  std::filesystem::create_directories(cfg.out_dir / "logs");
  std::ofstream log(cfg.out_dir / "logs" / "train.jsonl");
  const auto t0 = Clock::now();
  double tail = 0;
  std::size_t tail_n = 0;
  const auto metrics = train_loop<float>(params, stream, tc, [&](const StepMetrics& m) {
    log << m.to_json().dump() << "\n";
    if (m.step + 100 > tc.steps) {
      tail += m.loss;
      ++tail_n;
    }
    if (m.step % 100 == 0)
      std::fprintf(stderr, "train step %zu loss %.4f lr %.2e (%.0f s)\n", m.step, m.loss, m.lr,
                   ms_since(t0) / 1000);
  });
  const double train_ms = ms_since(t0);
  std::filesystem::create_directories(paths.base_ckpt().parent_path());
  save_checkpoint(paths.base_ckpt(), params);
  const LossBreakdown val = evaluate_ntp<float>(params, first_n(heldout, cfg.eval.text_docs), text_only());
  json report = {{"steps", tc.steps},
                 {"checkpoint", paths.base_ckpt().string()},
                 {"epochs", stream.epoch()},
                 {"skipped_docs", stream.skipped()},
                 {"text_val_loss", val.loss},
                 {"wall_time_ms", train_ms}};
  if (!metrics.empty()) {
    report["final_loss"] = metrics.back().loss;
    report["mean_loss_last_100"] = tail / static_cast<double>(tail_n);
  }
  return finish(cfg, "train", report);
}

json cmd_adapt(const RunConfig& cfg) {
  start(cfg, "adapt");
  const RunPaths paths{cfg.out_dir};
  auto params = load_model(paths.base_ckpt(), "train");
  const UnifiedVocab& v = params.config.vocab;
  auto docs = load_docs(paths.train_data(), v);
  Rng pick(Rng::derive(cfg.seed, 3));
  pick.shuffle(docs.begin(), docs.end());
  docs.resize(std::min(docs.size(), cfg.adapt_docs));
  const auto t0 = Clock::now();
  const auto corpus = build_adapt_corpus(params, docs, cfg.adapt.distill_fraction, Rng::derive(cfg.seed, 4));
  const double distill_ms = ms_since(t0);
  std::size_t distilled = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) distilled += corpus[i] != docs[i];

  AdaptConfig ac = cfg.adapt;
  ac.seed = Rng::derive(cfg.seed, 5);
  if (ac.opt.total_steps == 0) ac.opt.total_steps = ac.steps;
  std::filesystem::create_directories(cfg.out_dir / "logs");
  std::ofstream log(cfg.out_dir / "logs" / "adapt.jsonl");
  const auto t1 = Clock::now();
  const auto metrics = adapt_loop<float>(params, corpus, ac, [&](const AdaptMetrics& m) {
    log << m.to_json().dump() << "\n";
    if (m.step % 100 == 0)
      std::fprintf(stderr, "adapt step %zu loss %.4f diff %.4f ntp %.4f (%.0f s)\n", m.step, m.loss,
                   m.diff_loss, m.ntp_loss, ms_since(t1) / 1000);
  });
  const double adapt_ms = ms_since(t1);
  save_checkpoint(paths.adapted_ckpt(), params);
  json report = {{"steps", ac.steps},
                 {"checkpoint", paths.adapted_ckpt().string()},
                 {"corpus_docs", corpus.size()},
                 {"distilled_docs_changed", distilled},
                 {"distill_time_ms", distill_ms},
                 {"wall_time_ms", adapt_ms}};
  if (!metrics.empty()) {
    report["final_loss"] = metrics.back().loss;
    report["final_diff_loss"] = metrics.back().diff_loss;
    report["final_ntp_loss"] = metrics.back().ntp_loss;
  }
  return finish(cfg, "adapt", report);
}

json cmd_generate(const RunConfig& cfg) {
  start(cfg, "generate");
  const RunPaths paths{cfg.out_dir};
  const bool adapted = cfg.generate.checkpoint == "adapted";
  const auto params = adapted ? load_model(paths.adapted_ckpt(), "adapt")
                              : load_model(paths.base_ckpt(), "train");
  const UnifiedVocab& v = params.config.vocab;
  std::vector<std::vector<TokenId>> prompts;
  if (!cfg.generate.prompt.empty()) {
    prompts.push_back(cfg.generate.prompt);
  } else {
    for (const auto& d : load_docs(paths.heldout_data(), v)) {
      if (prompts.size() >= cfg.generate.n_prompts) break;
      const auto boi = std::find(d.begin(), d.end(), v.boi());
      prompts.emplace_back(d.begin(), boi);
    }
  }
  GenConfig gc;
  gc.mode = cfg.generate.mode;
  gc.rule = DecodeRule::parse(cfg.generate.rule);
  gc.denoise_steps = cfg.generate.denoise_steps;
  gc.budgets = cfg.generate.budgets;
  gc.seed = Rng::derive(cfg.seed, 6);
  const auto t0 = Clock::now();
  const auto results = run_requests(params, prompts, gc);
  const double wall = ms_since(t0);

  const auto dir = cfg.out_dir / "generate";
  std::filesystem::create_directories(dir);
  json samples = json::array(), stats = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const GenResult& r = results[i];
    json images = json::array();
    for (std::size_t k = 0; k < r.images.size(); ++k) {
      const GeneratedImage& img = r.images[k];
      json e = {{"offset", img.offset}, {"rows", img.rows}, {"cols", img.cols}};
      const bool full = img.tokens.size() == static_cast<std::size_t>(img.rows * img.cols);
      if (cfg.generate.dump_images && full) {
        const std::string stem = "sample" + std::to_string(i) + "_image" + std::to_string(k);
        world::write_ppm(dir / (stem + ".ppm"), v, img.tokens, img.rows, img.cols);
        world::write_pgm(dir / (stem + ".pgm"), v, img.tokens, img.rows, img.cols);
        e["ppm"] = stem + ".ppm";
        e["pgm"] = stem + ".pgm";
      }
      images.push_back(e);
    }
    std::vector<std::string> names;
    for (TokenId t : r.tokens) names.push_back(v.token_name(t));
    samples.push_back({{"prompt_length", r.prompt_length},
                       {"tokens", r.tokens},
                       {"token_names", names},
                       {"truncated", r.truncated},
                       {"images", images}});
    stats.push_back(r.stats.to_json());
  }
  // Timing stays out of the samples file so it is reproducible byte for byte.
  write_json(dir / "samples.json", samples);
  return finish(cfg, "generate",
                {{"mode", std::string(gen_mode_name(gc.mode))},
                 {"rule", gc.rule.name()},
                 {"samples", results.size()},
                 {"output", (dir / "samples.json").string()},
                 {"stats", stats},
                 {"wall_time_ms", wall}});
}

json cmd_bench(const RunConfig& cfg) {
  start(cfg, "bench");
  const RunPaths paths{cfg.out_dir};
  std::string which = cfg.bench.checkpoint;
  if (which == "auto")
    which = std::filesystem::exists(paths.adapted_ckpt()) ? "adapted"
            : std::filesystem::exists(paths.base_ckpt())  ? "base"
                                                          : "init";
  const ModelParams<float> params = which == "adapted" ? load_model(paths.adapted_ckpt(), "adapt")
                                    : which == "base"  ? load_model(paths.base_ckpt(), "train")
                                                       : ModelParams<float>::init(cfg.model, Rng::derive(cfg.seed, 1));
  const UnifiedVocab& v = params.config.vocab;
  const int rows = cfg.bench.rows, cols = cfg.bench.cols;
  const std::size_t n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  const std::size_t s = std::min(cfg.bench.denoise_steps, n);

  // Prompts for random scenes; the grammar's rendering is the reference grid.
  Rng rng(Rng::derive(cfg.seed, 7));
  std::vector<HeldoutPrompt> prompts;
  while (prompts.size() < cfg.bench.n_prompts) {
    world::Scene sc{static_cast<int>(rng.uniform_index(world::kShapes)),
                    static_cast<int>(rng.uniform_index(world::kColors)),
                    static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(rows))),
                    static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cols))),
                    static_cast<int>(rng.uniform_index(world::kColors))};
    if (sc.background == sc.color || !world::scene_valid(sc, rows, cols)) continue;
    const auto dyn = static_cast<world::Dynamics>(rng.uniform_index(world::kDynamics));
    prompts.push_back({world::image_prompt(v, sc, dyn, rows, cols), world::render(v, sc, rows, cols)});
  }
  // One untimed run per method warms caches and the allocator.
  exact_match(params, {prompts.front()}, GenMode::kAr, s);
  exact_match(params, {prompts.front()}, GenMode::kHybrid, s);
  const ExactMatch ar = exact_match(params, prompts, GenMode::kAr, s);
  const ExactMatch dida = exact_match(params, prompts, GenMode::kHybrid, s);

  const json results = json::array({
      {{"method", "AR"}, {"N", n}, {"S", nullptr}, {"forward_passes", ar.mean_block_forwards},
       {"wall_time_ms", ar.mean_image_ms}, {"exact_match", ar.rate}},
      {{"method", "DiDA"}, {"N", n}, {"S", s}, {"forward_passes", dida.mean_block_forwards},
       {"wall_time_ms", dida.mean_image_ms}, {"exact_match", dida.rate}},
  });
  const std::size_t pn = cfg.bench.project_n;
  return finish(cfg, "bench",
                {{"checkpoint", which},
                 {"precision", "f32"},
                 {"images_per_method", prompts.size()},
                 {"results", results},
                 {"forward_ratio", ar.mean_block_forwards / dida.mean_block_forwards},
                 {"wall_time_ratio", ar.mean_image_ms / dida.mean_image_ms},
                 {"projection",
                  {{"N", pn},
                   {"S", s},
                   {"ar_forward_passes", pn},
                   {"dida_forward_passes", s + 1},
                   {"forward_ratio", static_cast<double>(pn) / static_cast<double>(s + 1)}}},
                 {"reference_timings_s",
                  json::array({{{"method", "AR"}, {"gen_tokens", 4096}, {"naive", 512}, {"flagscale", 120}},
                               {{"method", "DiDA"}, {"gen_tokens", 4096}, {"naive", 22}, {"flagscale", 10}}})}});
}

json cmd_eval(const RunConfig& cfg) {
  start(cfg, "eval");
  const RunPaths paths{cfg.out_dir};
  const auto base = load_model(paths.base_ckpt(), "train");
  const auto adapted = load_model(paths.adapted_ckpt(), "adapt");
  const UnifiedVocab& v = base.config.vocab;
  const auto heldout = load_docs(paths.heldout_data(), v);
  const auto prompts = heldout_prompts(v, heldout, cfg.eval.rows, cfg.eval.cols, cfg.eval.n_prompts);
  if (prompts.empty()) throw ConfigError("no held-out documents with a matching first image size");
  const std::size_t s = cfg.eval.denoise_steps;
  const auto t0 = Clock::now();
  const ExactMatch ar = exact_match(base, prompts, GenMode::kAr, s);
  const ExactMatch ar_adapted = exact_match(adapted, prompts, GenMode::kAr, s);
  const ExactMatch dida = exact_match(adapted, prompts, GenMode::kHybrid, s);
  const auto text_docs = first_n(heldout, cfg.eval.text_docs);
  const double base_loss = evaluate_ntp<float>(base, text_docs, text_only()).loss;
  const double adapted_loss = evaluate_ntp<float>(adapted, text_docs, text_only()).loss;
  auto method = [](const ExactMatch& m) {
    return json{{"exact_match", m.rate},
                {"matched", m.matched},
                {"forward_passes", m.mean_block_forwards},
                {"wall_time_ms", m.mean_image_ms}};
  };
  return finish(cfg, "eval",
                {{"n_prompts", prompts.size()},
                 {"grid", {cfg.eval.rows, cfg.eval.cols}},
                 {"denoise_steps", s},
                 {"ar_exact_match", ar.rate},
                 {"dida_exact_match", dida.rate},
                 {"parity_gap_points", 100.0 * std::abs(dida.rate - ar.rate)},
                 {"methods", {{"ar_base", method(ar)}, {"ar_adapted", method(ar_adapted)}, {"dida_adapted", method(dida)}}},
                 {"text_val_loss_base", base_loss},
                 {"text_val_loss_adapted", adapted_loss},
                 {"text_val_loss_delta", adapted_loss - base_loss},
                 {"wall_time_ms", ms_since(t0)}});
}

}  // namespace mmgen::cli
