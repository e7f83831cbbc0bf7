#include "mmgen/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mmgen/errors.hpp"

namespace mmgen {

namespace {

constexpr int kFixedSpecials = 6;
const char* const kFixedNames[kFixedSpecials] = {"BOS", "EOS", "BOI", "EOI", "MASK", "PAD"};

}  // namespace

UnifiedVocab::UnifiedVocab(int n_text, int n_vision, std::vector<int> grid_sizes)
    : n_text_(n_text), n_vision_(n_vision), grid_sizes_(std::move(grid_sizes)) {
  if (n_text <= 0 || n_vision <= 0) throw ConfigError("vocab partitions must be non-empty");
  if (grid_sizes_.empty()) throw ConfigError("vocab needs at least one grid size");
  for (std::size_t i = 1; i < grid_sizes_.size(); ++i)
    if (grid_sizes_[i] <= grid_sizes_[i - 1])
      throw ConfigError("grid sizes must be strictly increasing");
  for (const char* n : kFixedNames) special_names_.emplace_back(n);
  for (int s : grid_sizes_) special_names_.push_back("SIZE_ROW(" + std::to_string(s) + ")");
  for (int s : grid_sizes_) special_names_.push_back("SIZE_COL(" + std::to_string(s) + ")");
}

int UnifiedVocab::size_index(int size) const {
  const auto it = std::find(grid_sizes_.begin(), grid_sizes_.end(), size);
  if (it == grid_sizes_.end()) return -1;
  return static_cast<int>(it - grid_sizes_.begin());
}

bool UnifiedVocab::supports_size(int size) const { return size_index(size) >= 0; }

TokenId UnifiedVocab::size_row(int size) const {
  const int i = size_index(size);
  if (i < 0) throw OutOfVocab("no SIZE_ROW token for size " + std::to_string(size));
  return special_base() + kFixedSpecials + i;
}

TokenId UnifiedVocab::size_col(int size) const {
  const int i = size_index(size);
  if (i < 0) throw OutOfVocab("no SIZE_COL token for size " + std::to_string(size));
  return special_base() + kFixedSpecials + static_cast<int>(grid_sizes_.size()) + i;
}

TokenRole UnifiedVocab::classify(TokenId id) const {
  if (!in_range(id))
    throw OutOfVocab("token id " + std::to_string(id) + " outside [0, " +
                     std::to_string(total_size()) + ")");
  if (id < n_text_) return {RoleKind::kText, Special::kBos, 0};
  if (id < vision_end()) return {RoleKind::kVision, Special::kBos, 0};
  const int k = id - special_base();
  if (k < kFixedSpecials) return {RoleKind::kSpecial, static_cast<Special>(k), 0};
  const int n_sizes = static_cast<int>(grid_sizes_.size());
  const int s = k - kFixedSpecials;
  if (s < n_sizes) return {RoleKind::kSpecial, Special::kSizeRow, grid_sizes_[s]};
  return {RoleKind::kSpecial, Special::kSizeCol, grid_sizes_[s - n_sizes]};
}

std::string UnifiedVocab::token_name(TokenId id) const {
  const TokenRole r = classify(id);
  switch (r.kind) {
    case RoleKind::kText:
      return "T" + std::to_string(id);
    case RoleKind::kVision:
      return "V" + std::to_string(id - n_text_);
    case RoleKind::kSpecial:
      return special_names_[id - special_base()];
  }
  return {};
}

nlohmann::json UnifiedVocab::to_json() const {
  return {{"n_text", n_text_},
          {"n_vision", n_vision_},
          {"grid_sizes", grid_sizes_},
          {"specials", special_names_},
          {"total_size", total_size()}};
}

UnifiedVocab UnifiedVocab::from_json(const nlohmann::json& j) {
  UnifiedVocab v(j.at("n_text").get<int>(), j.at("n_vision").get<int>(),
                 j.at("grid_sizes").get<std::vector<int>>());
  if (j.contains("specials") && j.at("specials").get<std::vector<std::string>>() != v.special_names_)
    throw ConfigError("vocab header lists an unexpected special-token inventory");
  return v;
}

void validate_document(const UnifiedVocab& v, const Document& d) {
  bool prev_text = false;
  for (std::size_t s = 0; s < d.segments.size(); ++s) {
    const std::string where = "segment " + std::to_string(s);
    if (const auto* t = std::get_if<TextSegment>(&d.segments[s])) {
      if (t->tokens.empty()) throw MalformedDocument(where + ": empty text segment");
      if (prev_text) throw MalformedDocument(where + ": adjacent text segments");
      for (TokenId id : t->tokens)
        if (!v.is_text(id))
          throw MalformedDocument(where + ": non-text id " + std::to_string(id) +
                                  " in text segment");
      prev_text = true;
    } else {
      const auto& img = std::get<ImageSegment>(d.segments[s]);
      if (!v.supports_size(img.rows) || !v.supports_size(img.cols))
        throw MalformedDocument(where + ": unsupported image size " + std::to_string(img.rows) +
                                "x" + std::to_string(img.cols));
      if (img.tokens.size() != static_cast<std::size_t>(img.rows) * img.cols)
        throw MalformedDocument(where + ": image holds " + std::to_string(img.tokens.size()) +
                                " tokens, expected rows*cols");
      for (TokenId id : img.tokens)
        if (!v.is_vision(id))
          throw MalformedDocument(where + ": non-vision id " + std::to_string(id) +
                                  " in image segment");
      prev_text = false;
    }
  }
}

FlatSequence serialize_document(const UnifiedVocab& v, const Document& d) {
  validate_document(v, d);
  FlatSequence out;
  auto push = [&](TokenId id, int seg, RoleKind role) {
    out.tokens.push_back(id);
    out.segment_map.push_back({seg, role});
  };
  push(v.bos(), -1, RoleKind::kSpecial);
  for (std::size_t s = 0; s < d.segments.size(); ++s) {
    const int seg = static_cast<int>(s);
    if (const auto* t = std::get_if<TextSegment>(&d.segments[s])) {
      for (TokenId id : t->tokens) push(id, seg, RoleKind::kText);
    } else {
      const auto& img = std::get<ImageSegment>(d.segments[s]);
      push(v.boi(), seg, RoleKind::kSpecial);
      push(v.size_row(img.rows), seg, RoleKind::kSpecial);
      push(v.size_col(img.cols), seg, RoleKind::kSpecial);
      for (TokenId id : img.tokens) push(id, seg, RoleKind::kVision);
      push(v.eoi(), seg, RoleKind::kSpecial);
    }
  }
  push(v.eos(), -1, RoleKind::kSpecial);
  return out;
}

Document parse_sequence(const UnifiedVocab& v, const std::vector<TokenId>& s,
                        std::string doc_id) {
  Document doc{std::move(doc_id), {}};
  std::size_t i = 0;
  auto expect_special = [&](Special want, const char* name) -> TokenRole {
    if (i >= s.size()) throw ParseError(i, std::string("sequence ends before ") + name);
    if (!v.in_range(s[i])) throw ParseError(i, "id " + std::to_string(s[i]) + " out of vocab");
    const TokenRole r = v.classify(s[i]);
    if (r.kind != RoleKind::kSpecial || r.special != want)
      throw ParseError(i, std::string("expected ") + name);
    return r;
  };

  expect_special(Special::kBos, "BOS");
  ++i;
  while (true) {
    if (i >= s.size()) throw ParseError(i, "missing EOS");
    if (!v.in_range(s[i])) throw ParseError(i, "id " + std::to_string(s[i]) + " out of vocab");
    const TokenRole r = v.classify(s[i]);
    if (r.kind == RoleKind::kText) {
      TextSegment t;
      while (i < s.size() && v.is_text(s[i])) t.tokens.push_back(s[i++]);
      doc.segments.emplace_back(std::move(t));
      continue;
    }
    if (r.kind == RoleKind::kVision) throw ParseError(i, "vision token outside an image");
    if (r.special == Special::kEos) {
      ++i;
      break;
    }
    if (r.special != Special::kBoi) throw ParseError(i, "stray " + v.token_name(s[i]));
    ++i;
    ImageSegment img;
    img.rows = expect_special(Special::kSizeRow, "SIZE_ROW").size;
    ++i;
    img.cols = expect_special(Special::kSizeCol, "SIZE_COL").size;
    ++i;
    const std::size_t n = static_cast<std::size_t>(img.rows) * img.cols;
    while (i < s.size() && v.is_vision(s[i])) img.tokens.push_back(s[i++]);
    if (img.tokens.size() != n)
      throw ParseError(i, "image has " + std::to_string(img.tokens.size()) + " tokens, expected " +
                              std::to_string(n));
    expect_special(Special::kEoi, "EOI");
    ++i;
    doc.segments.emplace_back(std::move(img));
  }
  if (i != s.size()) throw ParseError(i, "trailing tokens after EOS");
  return doc;
}

void write_dataset(const std::filesystem::path& path, const UnifiedVocab& v,
                   const std::vector<std::vector<TokenId>>& sequences) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& seq : sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out.put(' ');
      out << seq[i];
    }
    out.put('\n');
  }
  std::ofstream header(path.string() + ".json", std::ios::binary);
  if (!header) throw Error("cannot write dataset header for " + path.string());
  header << nlohmann::json{{"vocab", v.to_json()}, {"sequences", sequences.size()}}.dump(2) << "\n";
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream header(path.string() + ".json");
  if (!header) throw Error("missing dataset header " + path.string() + ".json");
  const auto j = nlohmann::json::parse(header);
  Dataset ds{UnifiedVocab::from_json(j.at("vocab")), {}};
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::vector<TokenId> seq;
    std::istringstream ls(line);
    long long id;
    while (ls >> id) {
      if (id < 0 || id >= ds.vocab.total_size())
        throw OutOfVocab(path.string() + ":" + std::to_string(line_no) + ": id " +
                         std::to_string(id) + " out of vocab");
      seq.push_back(static_cast<TokenId>(id));
    }
    if (!ls.eof()) throw ParseError(line_no, "non-numeric field in " + path.string());
    ds.sequences.push_back(std::move(seq));
  }
  if (j.contains("sequences") && j.at("sequences").get<std::size_t>() != ds.sequences.size())
    throw Error(path.string() + ": header lists " + j.at("sequences").dump() +
                " sequences, file holds " + std::to_string(ds.sequences.size()));
  return ds;
}

}  // namespace mmgen
