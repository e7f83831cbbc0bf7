#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mmgen/diffusion.hpp"
#include "mmgen/errors.hpp"
#include "mmgen/worldsim.hpp"

namespace mmgen {
namespace {

const UnifiedVocab kVocab;

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.d_intermediate = 40;
  c.n_heads_q = 4;
  c.n_heads_kv = 2;
  c.max_seq_len = 256;
  return c;
}

std::vector<TokenId> image_of(std::size_t n, TokenId base = 64) {
  std::vector<TokenId> img(n);
  for (std::size_t i = 0; i < n; ++i) img[i] = base + static_cast<TokenId>(i % 200);
  return img;
}

TEST(Corrupt, FullRatioMasksEverything) {
  const auto c = corrupt(kVocab, image_of(64), {kVocab.mask(), 1.0, 3});
  EXPECT_EQ(c.masked.size(), 64u);
  for (TokenId t : c.tokens) EXPECT_EQ(t, kVocab.mask());
}

TEST(Corrupt, SmallestRatioMasksOne) {
  const auto img = image_of(64);
  const auto c = corrupt(kVocab, img, {kVocab.mask(), 1.0 / 64.0, 3});
  ASSERT_EQ(c.masked.size(), 1u);
  for (std::size_t i = 0; i < 64; ++i)
    EXPECT_EQ(c.tokens[i], i == c.masked[0] ? kVocab.mask() : img[i]);
}

TEST(Corrupt, CountIsCeilingOfRatio) {
  for (double r : {0.01, 0.1, 0.3, 0.5, 0.77, 0.999})
    EXPECT_EQ(corrupt(kVocab, image_of(37), {kVocab.mask(), r, 1}).masked.size(),
              static_cast<std::size_t>(std::ceil(r * 37)));
}

TEST(Corrupt, MatchesFrozenTranscript) {
  std::ifstream in(std::string(MMGEN_FIXTURE_DIR) + "/corrupt_n8_seed7.json");
  ASSERT_TRUE(in.good());
  const auto golden = nlohmann::json::parse(in);
  const auto c = corrupt(kVocab, image_of(golden["n"].get<std::size_t>()),
                         {kVocab.mask(), golden["ratio"].get<double>(), golden["seed"].get<std::uint64_t>()});
  EXPECT_EQ(c.masked, golden["masked"].get<std::vector<std::size_t>>());
}

TEST(Corrupt, DeterministicPerSeed) {
  const auto img = image_of(64);
  EXPECT_EQ(corrupt(kVocab, img, {kVocab.mask(), 0.4, 11}).masked,
            corrupt(kVocab, img, {kVocab.mask(), 0.4, 11}).masked);
  EXPECT_NE(corrupt(kVocab, img, {kVocab.mask(), 0.4, 11}).masked,
            corrupt(kVocab, img, {kVocab.mask(), 0.4, 12}).masked);
}

TEST(Corrupt, RejectsBadInput) {
  auto img = image_of(8);
  EXPECT_THROW(corrupt(kVocab, img, {kVocab.mask(), 0.0, 1}), CorruptionError);
  EXPECT_THROW(corrupt(kVocab, img, {kVocab.mask(), 1.5, 1}), CorruptionError);
  img[3] = kVocab.mask();
  EXPECT_THROW(corrupt(kVocab, img, {kVocab.mask(), 0.5, 1}), CorruptionError);
  img[3] = 5;
  EXPECT_THROW(corrupt(kVocab, img, {kVocab.mask(), 0.5, 1}), CorruptionError);
}

TEST(Schedule, StrictlyIncreasingToN) {
  for (std::size_t n : {1u, 4u, 16u, 64u, 256u})
    for (std::size_t s = 1; s <= n; s = s < 8 ? s + 1 : s * 2) {
      const auto sch = DenoiseSchedule::cosine(n, s);
      ASSERT_EQ(sch.keep.size(), s + 1);
      EXPECT_EQ(sch.keep.front(), 0u);
      EXPECT_EQ(sch.keep.back(), n);
      for (std::size_t i = 1; i <= s; ++i) EXPECT_GT(sch.keep[i], sch.keep[i - 1]);
    }
  EXPECT_EQ(DenoiseSchedule::cosine(64, 1).keep[1], 64u);
  const auto lin = DenoiseSchedule::cosine(64, 64);
  for (std::size_t i = 0; i <= 64; ++i) EXPECT_EQ(lin.keep[i], i);
  EXPECT_THROW(DenoiseSchedule::cosine(8, 9), ConfigError);
  EXPECT_THROW(DenoiseSchedule::cosine(8, 0), ConfigError);
}

TEST(Schedule, CosineValues) {
  const auto s = DenoiseSchedule::cosine(64, 8);
  for (std::size_t i = 1; i < 8; ++i) {
    const double ref = std::ceil(64 * (1 - std::cos(3.141592653589793 * i / 16.0)));
    EXPECT_GE(static_cast<double>(s.keep[i]), ref - 1e-9);
  }
  EXPECT_EQ(s.keep[1], 2u);  // ceil(64 * 0.0192) = 2
}

// Sets up a cache holding BOS caption BOI SR SC for an 8x8 image.
struct DenoiseFixture {
  ModelParams<double> params = ModelParams<double>::init(tiny_config(), 17);
  KVCache<double> cache = KVCache<double>::empty(tiny_config());
  std::vector<TokenId> prefix;

  DenoiseFixture() {
    prefix = world::image_prompt(kVocab, world::Scene{1, 2, 3, 4, 5}, world::Dynamics::kStatic, 8, 8);
    std::vector<std::int32_t> pos(prefix.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i);
    forward_with_cache<double>(params, cache, prefix, pos, causal_mask(prefix.size()), prefix.size());
  }
  std::int32_t first() const { return static_cast<std::int32_t>(prefix.size()); }
};

TEST(Denoise, MonotoneCommitmentAndCompletion) {
  for (std::size_t S : {1u, 8u, 16u, 64u}) {
    DenoiseFixture f;
    const auto sched = DenoiseSchedule::cosine(64, S);
    auto state = DenoiseState::init(64, kVocab.mask());
    Rng rng(1);
    for (std::size_t s = 1; s <= S; ++s) {
      const auto before = state;
      const auto cache_before = f.cache;
      denoise_step<double>(f.params, f.cache, state, sched, f.first(), DecodeRule{}, rng);
      EXPECT_EQ(f.cache, cache_before);
      EXPECT_EQ(state.committed_count(), sched.keep[s]);
      for (std::size_t i = 0; i < 64; ++i) {
        if (before.committed[i]) {
          ASSERT_TRUE(state.committed[i]);
          ASSERT_EQ(state.tokens[i], before.tokens[i]);
        }
        if (state.committed[i]) ASSERT_TRUE(kVocab.is_vision(state.tokens[i]));
        else ASSERT_EQ(state.tokens[i], kVocab.mask());
      }
    }
    for (TokenId t : state.tokens) EXPECT_NE(t, kVocab.mask());
    EXPECT_THROW(denoise_step<double>(f.params, f.cache, state, sched, f.first(), DecodeRule{}, rng),
                 ConfigError);
  }
}

TEST(Denoise, SingleStepCommitsAll) {
  DenoiseFixture f;
  auto state = DenoiseState::init(64, kVocab.mask());
  Rng rng(2);
  denoise_step<double>(f.params, f.cache, state, DenoiseSchedule::cosine(64, 1), f.first(),
                       DecodeRule{}, rng);
  EXPECT_EQ(state.committed_count(), 64u);
}

TEST(Dida, ForwardAccountingAndCacheGrowth) {
  DenoiseFixture f;
  // Leave SC out of the cache so the first denoise pass commits it.
  auto cache = KVCache<double>::empty(tiny_config());
  std::vector<std::int32_t> pos(f.prefix.size() - 1);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i);
  forward_with_cache<double>(f.params, cache, std::span(f.prefix).first(pos.size()), pos,
                             causal_mask(pos.size()), pos.size());
  const std::vector<TokenId> lead{f.prefix.back()};
  const auto res = generate_image_dida<double>(f.params, cache, lead, 8, 8,
                                               DenoiseSchedule::cosine(64, 8), DecodeRule{}, 5,
                                               f.first());
  EXPECT_EQ(res.stats.forward_passes, 9u);
  EXPECT_EQ(res.stats.denoise_forwards, 8u);
  EXPECT_EQ(res.stats.commit_forwards, 1u);
  EXPECT_EQ(cache.length(), f.prefix.size() + 64);

  // Cached image keys match a from-scratch causal pass over prefix + grid.
  std::vector<TokenId> all = f.prefix;
  all.insert(all.end(), res.grid.begin(), res.grid.end());
  std::vector<std::int32_t> all_pos(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) all_pos[i] = static_cast<std::int32_t>(i);
  auto fresh = KVCache<double>::empty(tiny_config());
  forward_with_cache<double>(f.params, fresh, all, all_pos, causal_mask(all.size()), all.size());
  for (int l = 0; l < fresh.n_layers; ++l)
    for (std::size_t i = 0; i < fresh.k[l].size(); ++i) {
      ASSERT_NEAR(cache.k[l][i], fresh.k[l][i], 1e-6 * (1 + std::abs(fresh.k[l][i])));
      ASSERT_NEAR(cache.v[l][i], fresh.v[l][i], 1e-6 * (1 + std::abs(fresh.v[l][i])));
    }
}

TEST(Dida, SameSeedSameGrid) {
  auto run = [](const std::string& rule) {
    DenoiseFixture f;
    return generate_image_dida<double>(f.params, f.cache, {}, 8, 8, DenoiseSchedule::cosine(64, 16),
                                       DecodeRule::parse(rule), 9, f.first())
        .grid;
  };
  EXPECT_EQ(run("greedy"), run("greedy"));
  EXPECT_EQ(run("temp:1.5"), run("temp:1.5"));
}

TEST(Dida, DegenerateScheduleHasNoSpeedup) {
  DenoiseFixture f;
  const auto res = generate_image_dida<double>(f.params, f.cache, {}, 4, 4,
                                               DenoiseSchedule::cosine(16, 16), DecodeRule{}, 1,
                                               f.first());
  EXPECT_EQ(res.stats.forward_passes, 17u);
  EXPECT_LT(16.0 / static_cast<double>(res.stats.forward_passes), 1.0);
}

std::vector<TokenId> world_doc(std::uint64_t seed, int frames) {
  world::CorpusSpec spec;
  spec.seed = seed;
  spec.n_docs = 1;
  spec.min_frames = spec.max_frames = frames;
  spec.grid_sizes = {4};
  return serialize_document(kVocab, world::gen_document(spec, 0).to_document()).tokens;
}

TEST(AdaptExample, LayoutAndPositions) {
  const auto doc = world_doc(3, 2);
  Rng rng(4);
  const auto ex = build_adapt_example(kVocab, doc, rng);
  EXPECT_EQ(ex.tokens.size(), doc.size() + 32);
  EXPECT_NO_THROW(validate_layout(ex.layout));
  std::vector<TokenId> clean;
  for (const auto& sp : ex.layout) {
    for (std::size_t i = sp.start; i < sp.end(); ++i) {
      if (sp.is_noisy()) {
        const auto& partner = ex.layout[static_cast<std::size_t>(sp.partner_clean)];
        EXPECT_EQ(ex.positions[i], ex.positions[partner.start + (i - sp.start)]);
        EXPECT_EQ(ex.ntp_targets[i], -1);
      } else {
        EXPECT_EQ(ex.positions[i], static_cast<std::int32_t>(clean.size()));
        clean.push_back(ex.tokens[i]);
        EXPECT_EQ(ex.diff_targets[i], -1);
      }
    }
  }
  EXPECT_EQ(clean, doc);
  std::size_t masked = 0;
  for (TokenId t : ex.diff_targets) masked += t >= 0;
  EXPECT_EQ(masked, ex.n_masked);
}

TEST(AdaptationLoss, FullMaskOnUniformModelGivesLogV) {
  const auto params = ModelParams<double>::zeros(tiny_config());
  Rng rng(1);
  const auto ex = build_adapt_example(kVocab, world_doc(2, 1), rng, 1.0);
  EXPECT_EQ(ex.n_masked, 16u);
  const auto loss = adaptation_loss<double>(params, {ex}, AdaptWeights{});
  EXPECT_NEAR(loss.diff_loss, std::log(static_cast<double>(kVocab.total_size())), 1e-12);
}

TEST(AdaptationLoss, CleanTermMatchesPlainNextTokenLoss) {
  const auto params = ModelParams<double>::init(tiny_config(), 8);
  const auto d1 = world_doc(5, 3), d2 = world_doc(6, 1);
  Rng rng(2);
  const std::vector<AdaptExample> batch{build_adapt_example(kVocab, d1, rng),
                                        build_adapt_example(kVocab, d2, rng)};
  const auto adapt = adaptation_loss<double>(params, batch, AdaptWeights{});
  const auto plain = evaluate_ntp<double>(params, {d1, d2}, LossWeights{});
  EXPECT_NEAR(adapt.ntp_loss, plain.loss, 1e-9);
}

TEST(AdaptationLoss, GradientMatchesLossAndAblation) {
  const auto params = ModelParams<double>::init(tiny_config(), 9);
  Rng rng(3);
  const std::vector<AdaptExample> batch{build_adapt_example(kVocab, world_doc(7, 2), rng)};

  AdaptWeights both, diff_only, none;
  diff_only.w_ntp = 0;
  none.w_ntp = 0;
  none.w_diff = 0;
  auto g_both = ModelParams<double>::zeros(params.config);
  auto g_diff = ModelParams<double>::zeros(params.config);
  auto g_none = ModelParams<double>::zeros(params.config);
  const auto l_both = adaptation_loss<double>(params, batch, both, &g_both);
  const auto l_diff = adaptation_loss<double>(params, batch, diff_only, &g_diff);
  adaptation_loss<double>(params, batch, none, &g_none);
  EXPECT_NEAR(l_both.loss, l_both.diff_loss + l_both.ntp_loss, 1e-12);
  EXPECT_NEAR(l_diff.loss, l_both.diff_loss, 1e-12);
  for (double g : g_none.values) ASSERT_EQ(g, 0.0);

  // With the clean term off, only masked noisy positions drive the gradient.
  AdaptExample only_diff = batch[0];
  std::fill(only_diff.ntp_targets.begin(), only_diff.ntp_targets.end(), -1);
  auto g_ref = ModelParams<double>::zeros(params.config);
  adaptation_loss<double>(params, {only_diff}, both, &g_ref);
  for (std::size_t i = 0; i < g_ref.values.size(); ++i) ASSERT_NEAR(g_diff.values[i], g_ref.values[i], 1e-15);

  // Noisy rows are invisible to clean rows, so the clean-only gradient of a
  // layout without noisy copies is identical.
  AdaptWeights ntp_only;
  ntp_only.w_diff = 0;
  auto g_ntp = ModelParams<double>::zeros(params.config);
  const auto l_ntp = adaptation_loss<double>(params, batch, ntp_only, &g_ntp);
  EXPECT_NEAR(l_ntp.loss, l_both.ntp_loss, 1e-12);
}

}  // namespace
}  // namespace mmgen
