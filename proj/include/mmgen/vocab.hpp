#pragma once

// Unified token space and the interleaved document format.
//
// Id layout: [0, n_text) text, [n_text, n_text + n_vision) vision, then the
// special tokens in the order BOS, EOS, BOI, EOI, MASK, PAD,
// SIZE_ROW(s) for each supported size, SIZE_COL(s) for each supported size.
//
// An image serializes as BOI SIZE_ROW(r) SIZE_COL(c) <r*c raster tokens> EOI
// and a document as BOS <segments> EOS. The special-token inventory is a
// stand-in; it is not a copy of any production tokenizer.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace mmgen {

using TokenId = std::int32_t;

enum class Special : std::uint8_t { kBos, kEos, kBoi, kEoi, kMask, kPad, kSizeRow, kSizeCol };

enum class RoleKind : std::uint8_t { kText, kVision, kSpecial };

struct TokenRole {
  RoleKind kind = RoleKind::kText;
  Special special = Special::kBos;  // meaningful when kind == kSpecial
  int size = 0;                     // grid extent for SIZE_ROW / SIZE_COL

  bool operator==(const TokenRole&) const = default;
};

class UnifiedVocab {
 public:
  static constexpr int kToyText = 64;
  static constexpr int kToyVision = 256;
  static constexpr int kFullText = 151854;
  static constexpr int kFullVision = 131072;
  static constexpr int kFullTotal = 282926;

  UnifiedVocab(int n_text = kToyText, int n_vision = kToyVision,
               std::vector<int> grid_sizes = {4, 8, 16});

  static UnifiedVocab full_sized() { return UnifiedVocab(kFullText, kFullVision); }

  int n_text() const { return n_text_; }
  int n_vision() const { return n_vision_; }
  int n_specials() const { return static_cast<int>(special_names_.size()); }
  int total_size() const { return n_text_ + n_vision_ + n_specials(); }
  const std::vector<int>& grid_sizes() const { return grid_sizes_; }
  const std::vector<std::string>& special_names() const { return special_names_; }

  TokenId text_begin() const { return 0; }
  TokenId text_end() const { return n_text_; }
  TokenId vision_begin() const { return n_text_; }
  TokenId vision_end() const { return n_text_ + n_vision_; }

  TokenId bos() const { return special_base() + 0; }
  TokenId eos() const { return special_base() + 1; }
  TokenId boi() const { return special_base() + 2; }
  TokenId eoi() const { return special_base() + 3; }
  TokenId mask() const { return special_base() + 4; }
  TokenId pad() const { return special_base() + 5; }
  // Throws OutOfVocab for an unsupported size.
  TokenId size_row(int size) const;
  TokenId size_col(int size) const;

  bool is_text(TokenId id) const { return id >= 0 && id < n_text_; }
  bool is_vision(TokenId id) const { return id >= n_text_ && id < vision_end(); }
  bool is_special(TokenId id) const { return id >= vision_end() && id < total_size(); }
  bool in_range(TokenId id) const { return id >= 0 && id < total_size(); }
  bool supports_size(int size) const;

  // Throws OutOfVocab when id is outside [0, total_size).
  TokenRole classify(TokenId id) const;
  std::string token_name(TokenId id) const;

  nlohmann::json to_json() const;
  static UnifiedVocab from_json(const nlohmann::json& j);

  bool operator==(const UnifiedVocab&) const = default;

 private:
  TokenId special_base() const { return n_text_ + n_vision_; }
  int size_index(int size) const;

  int n_text_;
  int n_vision_;
  std::vector<int> grid_sizes_;
  std::vector<std::string> special_names_;
};

struct TextSegment {
  std::vector<TokenId> tokens;
  bool operator==(const TextSegment&) const = default;
};

struct ImageSegment {
  int rows = 0;
  int cols = 0;
  std::vector<TokenId> tokens;  // raster order, rows * cols entries
  bool operator==(const ImageSegment&) const = default;
};

using Segment = std::variant<TextSegment, ImageSegment>;

// Canonical form: text segments are non-empty and never adjacent, so the
// serialization is a bijection.
struct Document {
  std::string doc_id;
  std::vector<Segment> segments;
  bool operator==(const Document&) const = default;
};

struct PositionInfo {
  int segment = -1;  // -1 for the document-level BOS / EOS
  RoleKind role = RoleKind::kSpecial;
  bool operator==(const PositionInfo&) const = default;
};

struct FlatSequence {
  std::vector<TokenId> tokens;
  std::vector<PositionInfo> segment_map;
  std::size_t length() const { return tokens.size(); }
};

// Number of tokens an r x c image occupies once bracketed.
constexpr std::size_t image_serialized_length(int rows, int cols) {
  return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) + 4;
}

// Throws MalformedDocument when a segment violates the partition or shape rules.
void validate_document(const UnifiedVocab& v, const Document& d);
FlatSequence serialize_document(const UnifiedVocab& v, const Document& d);
// Throws ParseError carrying the offending position.
Document parse_sequence(const UnifiedVocab& v, const std::vector<TokenId>& tokens,
                        std::string doc_id = {});

// Plain-text dataset: one sequence per line, decimal ids separated by single
// spaces. The sidecar "<path>.json" records the vocab layout.
void write_dataset(const std::filesystem::path& path, const UnifiedVocab& v,
                   const std::vector<std::vector<TokenId>>& sequences);
struct Dataset {
  UnifiedVocab vocab;
  std::vector<std::vector<TokenId>> sequences;
};
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace mmgen
