#pragma once

// Per-row block attention masks.
//
// A mask is a list of query blocks tiling [0, seq_len). Every query in a block
// reaches the same fixed key ranges plus, optionally, a causal tail
// [tail_begin, q]. Causal attention is one block with a tail from 0; the
// diffusion-adaptation layouts need one block per span. Storage never grows
// with seq_len squared.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mmgen {

enum class SpanKind : std::uint8_t { kCleanText, kCleanImage, kNoisyImage, kSpecial };

struct LayoutSpan {
  std::size_t start = 0;
  std::size_t len = 0;
  SpanKind kind = SpanKind::kCleanText;
  int image_index = -1;    // for kCleanImage / kNoisyImage
  int partner_clean = -1;  // for kNoisyImage: index of the partner span in the layout

  std::size_t end() const { return start + len; }
  bool is_noisy() const { return kind == SpanKind::kNoisyImage; }
};

// Throws LayoutError on gaps, overlaps or a missing / mismatched partner.
void validate_layout(const std::vector<LayoutSpan>& layout);

struct KeyRange {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  bool operator==(const KeyRange&) const = default;
};

struct QueryBlock {
  std::size_t q_begin = 0;
  std::size_t q_end = 0;
  std::vector<KeyRange> ranges;          // sorted, disjoint, all before tail_begin
  std::optional<std::size_t> tail_begin;  // query q also reaches [tail_begin, q]
  bool operator==(const QueryBlock&) const = default;
};

class BlockMask {
 public:
  BlockMask() = default;
  // Blocks must tile [0, seq_len); ranges are normalized (merged) on entry.
  BlockMask(std::size_t seq_len, std::vector<QueryBlock> blocks);

  std::size_t seq_len() const { return seq_len_; }
  const std::vector<QueryBlock>& blocks() const { return blocks_; }
  std::size_t num_ranges() const;

  // Throws IndexError when q or k is out of range.
  bool reachable(std::size_t q, std::size_t k) const;
  std::size_t reachable_count(std::size_t q) const;
  const QueryBlock& block_of(std::size_t q) const;

  // Rows = queries, '1' where reachable. Only for seq_len <= 256.
  std::string dense_dump() const;

  bool operator==(const BlockMask&) const = default;

 private:
  std::size_t seq_len_ = 0;
  std::vector<QueryBlock> blocks_;
};

BlockMask causal_mask(std::size_t seq_len);
// Causal within each document, no attention across documents. doc_starts must
// begin with 0 and be strictly increasing.
BlockMask document_causal_mask(const std::vector<std::size_t>& doc_starts, std::size_t seq_len);
BlockMask dida_train_mask(const std::vector<LayoutSpan>& layout);
BlockMask dida_infer_mask(std::size_t prefix_len, std::size_t image_len);

}  // namespace mmgen
