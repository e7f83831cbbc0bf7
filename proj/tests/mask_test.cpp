#include <gtest/gtest.h>

#include "mmgen/errors.hpp"
#include "mmgen/mask.hpp"
#include "support.hpp"

namespace mmgen {
namespace {

std::vector<LayoutSpan> text3_noisy4_clean4() {
  return {{0, 3, SpanKind::kCleanText, -1, -1},
          {3, 4, SpanKind::kNoisyImage, 0, 2},
          {7, 4, SpanKind::kCleanImage, 0, -1}};
}

TEST(CausalMask, SingleToken) {
  const BlockMask m = causal_mask(1);
  EXPECT_TRUE(m.reachable(0, 0));
  EXPECT_EQ(m.reachable_count(0), 1u);
}

TEST(CausalMask, PairCountIsTriangular) {
  const BlockMask m = causal_mask(4);
  std::size_t n = 0;
  for (std::size_t q = 0; q < 4; ++q)
    for (std::size_t k = 0; k < 4; ++k) n += m.reachable(q, k);
  EXPECT_EQ(n, 10u);
  EXPECT_EQ(m.num_ranges(), 1u);
}

TEST(CausalMask, MatchesPredicateExhaustively) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(128);
    const BlockMask m = causal_mask(n);
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t k = 0; k < n; ++k) ASSERT_EQ(m.reachable(q, k), k <= q);
  }
}

TEST(Reachable, LookupsAndRangeErrors) {
  const BlockMask m = causal_mask(8);
  EXPECT_TRUE(m.reachable(7, 0));
  EXPECT_FALSE(m.reachable(0, 7));
  EXPECT_THROW(m.reachable(8, 0), IndexError);
  EXPECT_THROW(m.reachable(0, 8), IndexError);
}

TEST(DidaTrainMask, ThreeTextOneImageLayout) {
  const BlockMask m = dida_train_mask(text3_noisy4_clean4());
  std::vector<std::size_t> from5, from8;
  for (std::size_t k = 0; k < 11; ++k) {
    if (m.reachable(5, k)) from5.push_back(k);
    if (m.reachable(8, k)) from8.push_back(k);
  }
  EXPECT_EQ(from5, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(from8, (std::vector<std::size_t>{0, 1, 2, 7, 8}));
  EXPECT_FALSE(m.reachable(8, 5));
}

TEST(DidaTrainMask, CleanNeverSeesNoisy) {
  const auto layout = text3_noisy4_clean4();
  const BlockMask m = dida_train_mask(layout);
  int violations = 0;
  for (std::size_t q = 0; q < 11; ++q)
    for (std::size_t k = 3; k < 7; ++k)
      if ((q < 3 || q >= 7) && m.reachable(q, k)) ++violations;
  EXPECT_EQ(violations, 0);
}

TEST(DidaTrainMask, TwoImageLayoutsMatchPredicate) {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const auto layout = testing::random_layout(rng, 2, 96);
    const BlockMask m = dida_train_mask(layout);
    const std::size_t n = m.seq_len();
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t k = 0; k < n; ++k)
        ASSERT_EQ(m.reachable(q, k), testing::dida_predicate(layout, q, k)) << q << "," << k;
  }
}

TEST(DidaTrainMask, StorageStaysPerSpan) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const auto layout = testing::random_layout(rng, 2, 256);
    const BlockMask m = dida_train_mask(layout);
    for (const auto& b : m.blocks())
      EXPECT_LE(b.ranges.size() + (b.tail_begin ? 1 : 0), 3 * layout.size());
    EXPECT_LE(m.blocks().size(), layout.size());
  }
}

TEST(DidaTrainMask, RejectsBadLayouts) {
  auto gap = text3_noisy4_clean4();
  gap[1].start = 4;
  EXPECT_THROW(dida_train_mask(gap), LayoutError);
  auto bad_partner = text3_noisy4_clean4();
  bad_partner[2].len = 5;
  EXPECT_THROW(dida_train_mask(bad_partner), LayoutError);
  auto orphan = text3_noisy4_clean4();
  orphan[1].partner_clean = -1;
  EXPECT_THROW(dida_train_mask(orphan), LayoutError);
}

TEST(DidaInferMask, FullyBidirectionalWithoutPrefix) {
  const BlockMask m = dida_infer_mask(0, 4);
  for (std::size_t q = 0; q < 4; ++q)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_TRUE(m.reachable(q, k));
}

TEST(DidaInferMask, ImageRowsSeePrefixAndBlock) {
  const BlockMask m = dida_infer_mask(3, 2);
  EXPECT_EQ(m.reachable_count(3), 5u);
  EXPECT_EQ(m.reachable_count(4), 5u);
  EXPECT_EQ(m.reachable_count(1), 2u);
}

TEST(DidaInferMask, EqualsRestrictedTrainMask) {
  for (std::size_t prefix : {1u, 3u, 10u})
    for (std::size_t img : {1u, 4u, 16u}) {
      const std::vector<LayoutSpan> layout{{0, prefix, SpanKind::kCleanText, -1, -1},
                                           {prefix, img, SpanKind::kNoisyImage, 0, 2},
                                           {prefix + img, img, SpanKind::kCleanImage, 0, -1}};
      const BlockMask train = dida_train_mask(layout);
      const BlockMask infer = dida_infer_mask(prefix, img);
      for (std::size_t q = 0; q < prefix + img; ++q)
        for (std::size_t k = 0; k < prefix + img; ++k)
          ASSERT_EQ(infer.reachable(q, k), train.reachable(q, k));
    }
}

TEST(DocumentCausalMask, NoCrossDocumentAttention) {
  const BlockMask m = document_causal_mask({0, 3, 7}, 10);
  EXPECT_TRUE(m.reachable(2, 0));
  EXPECT_FALSE(m.reachable(3, 2));
  EXPECT_TRUE(m.reachable(6, 3));
  EXPECT_FALSE(m.reachable(7, 6));
  EXPECT_TRUE(m.reachable(9, 7));
}

TEST(DenseDump, GoldenCausalThree) {
  EXPECT_EQ(causal_mask(3).dense_dump(), "100\n110\n111\n");
  EXPECT_EQ(dida_train_mask(text3_noisy4_clean4()).dense_dump(),
            "10000000000\n"
            "11000000000\n"
            "11100000000\n"
            "11111110000\n"
            "11111110000\n"
            "11111110000\n"
            "11111110000\n"
            "11100001000\n"
            "11100001100\n"
            "11100001110\n"
            "11100001111\n");
  EXPECT_THROW(causal_mask(257).dense_dump(), IndexError);
}

}  // namespace
}  // namespace mmgen
