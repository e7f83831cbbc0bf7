#include "mmgen/worldsim.hpp"

#include <algorithm>
#include <fstream>
#include <string>

#include "mmgen/errors.hpp"
#include "mmgen/rng.hpp"

namespace mmgen::world {

const std::vector<std::pair<int, int>>& stencil(int shape) {
  static const std::vector<std::vector<std::pair<int, int>>> kStencils = {
      {{0, 0}, {0, 1}, {1, 0}, {1, 1}},                                                  // square2
      {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}, {1, 2}, {2, 0}, {2, 1}, {2, 2}},          // square3
      {{0, 0}, {1, -1}, {1, 0}, {1, 1}, {2, 0}},                                         // plus
      {{0, 0}, {0, 1}, {0, 2}},                                                          // hline
      {{0, 0}, {1, 0}, {2, 0}},                                                          // vline
      {{0, 0}, {1, 1}, {2, 2}},                                                          // diagonal
      {{0, 0}, {1, 0}, {2, 0}, {2, 1}},                                                  // L
      {{0, 0}, {0, 2}, {1, 1}, {2, 0}, {2, 2}},                                          // X
  };
  if (shape < 0 || shape >= kShapes) throw IndexError("shape id out of range");
  return kStencils[static_cast<std::size_t>(shape)];
}

bool scene_valid(const Scene& s, int rows, int cols) {
  return s.shape >= kNoShape && s.shape < kShapes && s.color >= 0 && s.color < kColors &&
         s.background >= 0 && s.background < kColors && s.row >= 0 && s.row < rows &&
         s.col >= 0 && s.col < cols && rows <= 16 && cols <= 16;
}

TokenId foreground_token(const UnifiedVocab& v, int shape, int color) {
  return v.vision_begin() + shape * kColors + color;
}

TokenId background_token(const UnifiedVocab& v, int background) {
  return v.vision_begin() + kShapes * kColors + background;
}

std::vector<TokenId> render(const UnifiedVocab& v, const Scene& s, int rows, int cols) {
  if (!scene_valid(s, rows, cols)) throw IndexError("invalid scene");
  std::vector<TokenId> grid(static_cast<std::size_t>(rows * cols), background_token(v, s.background));
  if (s.shape == kNoShape) return grid;
  const TokenId fg = foreground_token(v, s.shape, s.color);
  for (auto [dr, dc] : stencil(s.shape)) {
    const int r = s.row + dr, c = s.col + dc;
    if (r >= 0 && r < rows && c >= 0 && c < cols) grid[static_cast<std::size_t>(r * cols + c)] = fg;
  }
  return grid;
}

Scene step_dynamics(const Scene& s, Dynamics d, int rows, int cols) {
  Scene out = s;
  if (d == Dynamics::kRight || d == Dynamics::kDiagonal) out.col = (s.col + 1) % cols;
  if (d == Dynamics::kDown || d == Dynamics::kDiagonal) out.row = (s.row + 1) % rows;
  return out;
}

std::vector<TokenId> caption(const Scene& s, Dynamics d, bool continuation) {
  if (s.shape == kNoShape) throw IndexError("an empty scene has no caption");
  std::vector<TokenId> out;
  if (continuation) out.push_back(kThenWord);
  out.insert(out.end(), {kShapeWord + s.shape, kColorWord + s.color, kOnWord,
                         kColorWord + s.background, kAtWord, kDigitWord + s.row,
                         kDigitWord + s.col, kMotionWord + static_cast<int>(d)});
  return out;
}

std::optional<std::pair<Scene, Dynamics>> parse_caption(const std::vector<TokenId>& t) {
  if (t.size() != kCaptionLength) return std::nullopt;
  auto in = [](TokenId x, TokenId base, int n) { return x >= base && x < base + n; };
  if (!in(t[0], kShapeWord, kShapes) || !in(t[1], kColorWord, kColors) || t[2] != kOnWord ||
      !in(t[3], kColorWord, kColors) || t[4] != kAtWord || !in(t[5], kDigitWord, 16) ||
      !in(t[6], kDigitWord, 16) || !in(t[7], kMotionWord, kDynamics))
    return std::nullopt;
  Scene s{t[0] - kShapeWord, t[1] - kColorWord, t[5] - kDigitWord, t[6] - kDigitWord,
          t[3] - kColorWord};
  return std::make_pair(s, static_cast<Dynamics>(t[7] - kMotionWord));
}

Document WorldDoc::to_document() const {
  Document d;
  d.doc_id = doc_id;
  for (const auto& f : frames) {
    d.segments.emplace_back(TextSegment{f.caption});
    d.segments.emplace_back(f.image);
  }
  return d;
}

bool heldout_key(std::uint64_t seed, const Scene& s, Dynamics d, int grid, double fraction) {
  std::uint64_t key = 0;
  for (int x : {s.shape, s.color, s.row, s.col, s.background, static_cast<int>(d), grid})
    key = key * 31 + static_cast<std::uint64_t>(x);
  const std::uint64_t h = Rng::derive(seed ^ 0x5EEDF00DULL, key);
  return static_cast<double>(h % 1000000) < fraction * 1000000.0;
}

WorldDoc gen_document(const CorpusSpec& spec, std::size_t index) {
  if (spec.grid_sizes.empty() || spec.min_frames < 1 || spec.max_frames < spec.min_frames)
    throw ConfigError("invalid corpus spec");
  Rng rng(Rng::derive(spec.seed, index));
  const int grid = spec.grid_sizes[rng.uniform_index(spec.grid_sizes.size())];
  Scene s;
  s.shape = static_cast<int>(rng.uniform_index(kShapes));
  s.color = static_cast<int>(rng.uniform_index(kColors));
  s.row = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(grid)));
  s.col = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(grid)));
  s.background = static_cast<int>(rng.uniform_index(kColors));
  const auto dyn = static_cast<Dynamics>(rng.uniform_index(kDynamics));
  const int n_frames =
      spec.min_frames +
      static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(spec.max_frames - spec.min_frames + 1)));

  const UnifiedVocab v;
  WorldDoc doc;
  doc.doc_id = "world-" + std::to_string(index);
  doc.dynamics = dyn;
  doc.heldout = heldout_key(spec.seed, s, dyn, grid, spec.heldout_fraction);
  for (int f = 0; f < n_frames; ++f) {
    if (f > 0) s = step_dynamics(s, dyn, grid, grid);
    doc.frames.push_back(Frame{caption(s, dyn, f > 0), s, ImageSegment{grid, grid, render(v, s, grid, grid)}});
  }
  return doc;
}

std::vector<WorldDoc> gen_corpus(const CorpusSpec& spec) {
  if (spec.n_docs < 1) throw ConfigError("n_docs must be at least 1");
  std::vector<WorldDoc> out;
  out.reserve(spec.n_docs);
  for (std::size_t i = 0; i < spec.n_docs; ++i) out.push_back(gen_document(spec, i));
  return out;
}

std::vector<TokenId> image_prompt(const UnifiedVocab& v, const Scene& s, Dynamics d, int rows,
                                  int cols) {
  std::vector<TokenId> out{v.bos()};
  const auto cap = caption(s, d, false);
  out.insert(out.end(), cap.begin(), cap.end());
  out.insert(out.end(), {v.boi(), v.size_row(rows), v.size_col(cols)});
  return out;
}

PackResult pack(const UnifiedVocab& v, const std::vector<std::vector<TokenId>>& docs, PackMode mode,
                std::size_t max_len) {
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  PackResult res;
  auto open_row = [&] {
    PackedRow r;
    r.tokens.reserve(max_len);
    r.positions.reserve(max_len);
    res.rows.push_back(std::move(r));
  };
  auto room = [&] { return res.rows.empty() ? 0 : max_len - res.rows.back().used; };
  for (const auto& doc : docs) {
    if (doc.empty()) continue;
    if (doc.size() > max_len) {
      ++res.skipped;
      continue;
    }
    if (mode == PackMode::kOfflinePad) {
      if (room() < doc.size()) open_row();
      auto& r = res.rows.back();
      r.doc_starts.push_back(r.used);
      r.continues.push_back(false);
      r.tokens.insert(r.tokens.end(), doc.begin(), doc.end());
      for (std::size_t i = 0; i < doc.size(); ++i) r.positions.push_back(static_cast<std::int32_t>(i));
      r.used += doc.size();
      continue;
    }
    std::size_t offset = 0;
    while (offset < doc.size()) {
      if (room() == 0) open_row();
      auto& r = res.rows.back();
      const std::size_t take = std::min(room(), doc.size() - offset);
      r.doc_starts.push_back(r.used);
      r.continues.push_back(offset + take < doc.size());
      r.tokens.insert(r.tokens.end(), doc.begin() + static_cast<std::ptrdiff_t>(offset),
                      doc.begin() + static_cast<std::ptrdiff_t>(offset + take));
      for (std::size_t i = 0; i < take; ++i)
        r.positions.push_back(static_cast<std::int32_t>(offset + i));
      r.used += take;
      offset += take;
    }
  }
  for (auto& r : res.rows) {
    r.tokens.resize(max_len, v.pad());
    std::int32_t p = 0;
    while (r.positions.size() < max_len) r.positions.push_back(p++);
  }
  return res;
}

std::array<std::uint8_t, 3> token_rgb(const UnifiedVocab& v, TokenId t) {
  static constexpr std::array<std::array<std::uint8_t, 3>, kColors> kPalette{{
      {230, 25, 75}, {60, 180, 75}, {255, 225, 25}, {0, 130, 200},
      {245, 130, 48}, {145, 30, 180}, {70, 240, 240}, {250, 250, 250},
  }};
  if (!v.is_vision(t)) throw OutOfVocab("not a vision token: " + std::to_string(t));
  const int idx = t - v.vision_begin();
  if (idx < kShapes * kColors) return kPalette[static_cast<std::size_t>(idx % kColors)];
  if (idx < kShapes * kColors + kColors) {
    auto c = kPalette[static_cast<std::size_t>(idx - kShapes * kColors)];
    for (auto& x : c) x = static_cast<std::uint8_t>(x / 4);
    return c;
  }
  return {128, 128, 128};
}

namespace {

void write_netpbm(const std::filesystem::path& path, const UnifiedVocab& v,
                  const std::vector<TokenId>& grid, int rows, int cols, int scale, bool color) {
  if (rows <= 0 || cols <= 0 || scale <= 0 || grid.size() != static_cast<std::size_t>(rows * cols))
    throw ShapeError("grid does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << (color ? "P6" : "P5") << "\n" << cols * scale << " " << rows * scale << "\n255\n";
  for (int r = 0; r < rows * scale; ++r)
    for (int c = 0; c < cols * scale; ++c) {
      const TokenId t = grid[static_cast<std::size_t>((r / scale) * cols + c / scale)];
      if (color) {
        const auto rgb = token_rgb(v, t);
        out.write(reinterpret_cast<const char*>(rgb.data()), 3);
      } else {
        if (!v.is_vision(t)) throw OutOfVocab("not a vision token: " + std::to_string(t));
        out.put(static_cast<char>(t - v.vision_begin()));
      }
    }
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const UnifiedVocab& v,
               const std::vector<TokenId>& grid, int rows, int cols, int scale) {
  write_netpbm(path, v, grid, rows, cols, scale, true);
}

void write_pgm(const std::filesystem::path& path, const UnifiedVocab& v,
               const std::vector<TokenId>& grid, int rows, int cols, int scale) {
  write_netpbm(path, v, grid, rows, cols, scale, false);
}

}  // namespace mmgen::world
