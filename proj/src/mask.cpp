#include "mmgen/mask.hpp"

#include <algorithm>

#include "mmgen/errors.hpp"

namespace mmgen {

namespace {

std::vector<KeyRange> normalize(std::vector<KeyRange> ranges) {
  std::vector<KeyRange> out;
  for (const KeyRange& r : ranges) {
    if (r.begin >= r.end) continue;
    if (!out.empty() && out.back().end >= r.begin)
      out.back().end = std::max(out.back().end, r.end);
    else
      out.push_back(r);
  }
  return out;
}

bool is_clean(const LayoutSpan& s) { return !s.is_noisy(); }

}  // namespace

void validate_layout(const std::vector<LayoutSpan>& layout) {
  std::size_t pos = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const LayoutSpan& s = layout[i];
    if (s.start != pos)
      throw LayoutError("span " + std::to_string(i) + " starts at " + std::to_string(s.start) +
                        ", expected " + std::to_string(pos) + " (gap or overlap)");
    if (s.len == 0) throw LayoutError("span " + std::to_string(i) + " is empty");
    pos = s.end();
    if (s.is_noisy()) {
      if (s.partner_clean < 0 || s.partner_clean >= static_cast<int>(layout.size()))
        throw LayoutError("noisy span " + std::to_string(i) + " has no partner");
      const LayoutSpan& p = layout[s.partner_clean];
      if (p.kind != SpanKind::kCleanImage || p.len != s.len)
        throw LayoutError("noisy span " + std::to_string(i) +
                          " partner is not a clean image of equal length");
    }
  }
}

BlockMask::BlockMask(std::size_t seq_len, std::vector<QueryBlock> blocks)
    : seq_len_(seq_len), blocks_(std::move(blocks)) {
  std::size_t pos = 0;
  for (QueryBlock& b : blocks_) {
    if (b.q_begin != pos || b.q_end <= b.q_begin)
      throw LayoutError("query blocks must tile the sequence");
    pos = b.q_end;
    b.ranges = normalize(std::move(b.ranges));
    if (!b.ranges.empty() && b.ranges.back().end > seq_len)
      throw LayoutError("key range exceeds sequence length");
    if (b.tail_begin) {
      if (*b.tail_begin > b.q_begin) throw LayoutError("causal tail starts after its queries");
      // Fold a range that abuts the tail into it.
      while (!b.ranges.empty() && b.ranges.back().end >= *b.tail_begin) {
        b.tail_begin = std::min(*b.tail_begin, b.ranges.back().begin);
        b.ranges.pop_back();
      }
    }
  }
  if (pos != seq_len) throw LayoutError("query blocks must tile the sequence");
}

std::size_t BlockMask::num_ranges() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.ranges.size() + (b.tail_begin ? 1 : 0);
  return n;
}

const QueryBlock& BlockMask::block_of(std::size_t q) const {
  if (q >= seq_len_) throw IndexError("query " + std::to_string(q) + " out of range");
  const auto it = std::upper_bound(blocks_.begin(), blocks_.end(), q,
                                   [](std::size_t v, const QueryBlock& b) { return v < b.q_begin; });
  return *(it - 1);
}

bool BlockMask::reachable(std::size_t q, std::size_t k) const {
  if (k >= seq_len_) throw IndexError("key " + std::to_string(k) + " out of range");
  const QueryBlock& b = block_of(q);
  if (b.tail_begin && k >= *b.tail_begin) return k <= q;
  const auto it = std::upper_bound(b.ranges.begin(), b.ranges.end(), k,
                                   [](std::size_t v, const KeyRange& r) { return v < r.begin; });
  if (it == b.ranges.begin()) return false;
  return k < (it - 1)->end;
}

std::size_t BlockMask::reachable_count(std::size_t q) const {
  const QueryBlock& b = block_of(q);
  std::size_t n = 0;
  for (const auto& r : b.ranges) n += r.end - r.begin;
  if (b.tail_begin) n += q + 1 - *b.tail_begin;
  return n;
}

std::string BlockMask::dense_dump() const {
  if (seq_len_ > 256) throw IndexError("dense dump limited to 256 positions");
  std::string out;
  out.reserve(seq_len_ * (seq_len_ + 1));
  for (std::size_t q = 0; q < seq_len_; ++q) {
    for (std::size_t k = 0; k < seq_len_; ++k) out.push_back(reachable(q, k) ? '1' : '0');
    out.push_back('\n');
  }
  return out;
}

BlockMask causal_mask(std::size_t seq_len) {
  if (seq_len == 0) throw LayoutError("causal mask needs seq_len >= 1");
  return BlockMask(seq_len, {QueryBlock{0, seq_len, {}, 0}});
}

BlockMask document_causal_mask(const std::vector<std::size_t>& doc_starts, std::size_t seq_len) {
  if (doc_starts.empty() || doc_starts.front() != 0)
    throw LayoutError("document starts must begin at 0");
  std::vector<QueryBlock> blocks;
  for (std::size_t i = 0; i < doc_starts.size(); ++i) {
    const std::size_t end = i + 1 < doc_starts.size() ? doc_starts[i + 1] : seq_len;
    blocks.push_back(QueryBlock{doc_starts[i], end, {}, doc_starts[i]});
  }
  return BlockMask(seq_len, std::move(blocks));
}

BlockMask dida_train_mask(const std::vector<LayoutSpan>& layout) {
  validate_layout(layout);
  if (layout.empty()) throw LayoutError("empty layout");
  const std::size_t seq_len = layout.back().end();
  std::vector<QueryBlock> blocks;
  // Clean spans visited so far, kept as ranges for the clean stream.
  std::vector<KeyRange> clean_before;
  for (const LayoutSpan& s : layout) {
    QueryBlock b{s.start, s.end(), {}, std::nullopt};
    if (is_clean(s)) {
      b.ranges = clean_before;
      b.tail_begin = s.start;
      clean_before.push_back({s.start, s.end()});
    } else {
      const std::size_t limit = layout[s.partner_clean].start;
      for (const LayoutSpan& c : layout) {
        if (!is_clean(c) || c.start >= limit) continue;
        b.ranges.push_back({c.start, std::min(c.end(), limit)});
      }
      b.ranges.push_back({s.start, s.end()});
      std::sort(b.ranges.begin(), b.ranges.end(),
                [](const KeyRange& x, const KeyRange& y) { return x.begin < y.begin; });
    }
    blocks.push_back(std::move(b));
  }
  return BlockMask(seq_len, std::move(blocks));
}

BlockMask dida_infer_mask(std::size_t prefix_len, std::size_t image_len) {
  if (image_len == 0) throw LayoutError("image block must be non-empty");
  std::vector<QueryBlock> blocks;
  if (prefix_len > 0) blocks.push_back(QueryBlock{0, prefix_len, {}, 0});
  blocks.push_back(QueryBlock{prefix_len, prefix_len + image_len, {{0, prefix_len + image_len}},
                              std::nullopt});
  return BlockMask(prefix_len + image_len, std::move(blocks));
}

}  // namespace mmgen
