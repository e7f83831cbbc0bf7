#pragma once

// Test-only oracles and generators. Nothing here calls into the code paths
// these helpers are used to check.

#include <cstddef>
#include <vector>

#include "mmgen/mask.hpp"
#include "mmgen/rng.hpp"

namespace mmgen::testing {

// Three-clause reachability rule for layouts with noisy image copies,
// evaluated directly on a (query, key) pair.
inline bool dida_predicate(const std::vector<LayoutSpan>& layout, std::size_t q, std::size_t k) {
  const LayoutSpan* sq = nullptr;
  const LayoutSpan* sk = nullptr;
  for (const auto& s : layout) {
    if (q >= s.start && q < s.start + s.len) sq = &s;
    if (k >= s.start && k < s.start + s.len) sk = &s;
  }
  const bool q_noisy = sq->kind == SpanKind::kNoisyImage;
  const bool k_noisy = sk->kind == SpanKind::kNoisyImage;
  if (!q_noisy && !k_noisy) return k <= q;                                        // (a)
  if (q_noisy && !k_noisy) return k < layout[sq->partner_clean].start;           // (b)
  if (q_noisy && k_noisy) return sq == sk;                                        // (c)
  return false;
}

// Text / image layout with at most `max_images` images, each with a noisy
// copy placed directly before its clean partner. Total length <= max_len.
inline std::vector<LayoutSpan> random_layout(Rng& rng, int max_images, std::size_t max_len) {
  std::vector<LayoutSpan> out;
  std::size_t pos = 0;
  auto add = [&](std::size_t len, SpanKind kind, int image, int partner) {
    out.push_back({pos, len, kind, image, partner});
    pos += len;
  };
  add(1, SpanKind::kSpecial, -1, -1);
  const int n_images = static_cast<int>(rng.uniform_index(max_images + 1));
  for (int i = 0; i < n_images; ++i) {
    const std::size_t text = rng.uniform_index(8);
    const std::size_t img = 1 + rng.uniform_index(40);
    if (pos + text + 3 + 2 * img + 2 > max_len) break;
    if (text) add(text, SpanKind::kCleanText, -1, -1);
    add(3, SpanKind::kSpecial, -1, -1);
    const int noisy = static_cast<int>(out.size());
    add(img, SpanKind::kNoisyImage, i, noisy + 1);
    add(img, SpanKind::kCleanImage, i, -1);
    add(1, SpanKind::kSpecial, -1, -1);
  }
  const std::size_t tail = rng.uniform_index(6);
  if (tail && pos + tail + 1 <= max_len) add(tail, SpanKind::kCleanText, -1, -1);
  if (pos + 1 <= max_len) add(1, SpanKind::kSpecial, -1, -1);
  return out;
}

}  // namespace mmgen::testing
