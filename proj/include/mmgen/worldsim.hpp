#pragma once

// Synthetic world grammar: a scene is one shape of one color on a background,
// captions are fixed token templates, and documents chain up to a few frames
// under a simple motion rule. Also packs serialized documents into rows.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "mmgen/vocab.hpp"

namespace mmgen::world {

constexpr int kShapes = 8;
constexpr int kColors = 8;
constexpr int kDynamics = 4;
// Shape id of a scene with nothing drawn on the background.
constexpr int kNoShape = -1;

enum class Dynamics : std::uint8_t { kStatic, kRight, kDown, kDiagonal };

// Caption vocabulary inside the text range.
constexpr TokenId kShapeWord = 0;    // + shape
constexpr TokenId kColorWord = 8;    // + color
constexpr TokenId kDigitWord = 16;   // + value, 0..15
constexpr TokenId kMotionWord = 32;  // + dynamics
constexpr TokenId kOnWord = 36;
constexpr TokenId kAtWord = 37;
constexpr TokenId kThenWord = 38;
constexpr std::size_t kCaptionLength = 8;

struct Scene {
  int shape = 0;
  int color = 0;
  int row = 0;  // anchor cell: the first stencil cell in raster order
  int col = 0;
  int background = 0;
  bool operator==(const Scene&) const = default;
};

// Cell offsets relative to the anchor; every stencil fits in 3x3.
const std::vector<std::pair<int, int>>& stencil(int shape);

bool scene_valid(const Scene& s, int rows, int cols);
TokenId foreground_token(const UnifiedVocab& v, int shape, int color);
TokenId background_token(const UnifiedVocab& v, int background);

// Raster grid of vision ids. Stencil cells falling off the grid are clipped.
std::vector<TokenId> render(const UnifiedVocab& v, const Scene& s, int rows, int cols);
Scene step_dynamics(const Scene& s, Dynamics d, int rows, int cols);

// [SHAPE COLOR ON BG AT ROW COL MOTION], prefixed by THEN for later frames.
std::vector<TokenId> caption(const Scene& s, Dynamics d, bool continuation);
// Inverse of caption for a first-frame caption; nullopt when malformed.
std::optional<std::pair<Scene, Dynamics>> parse_caption(const std::vector<TokenId>& tokens);

struct Frame {
  std::vector<TokenId> caption;
  Scene scene;
  ImageSegment image;
};

struct WorldDoc {
  std::string doc_id;
  Dynamics dynamics = Dynamics::kStatic;
  std::vector<Frame> frames;
  bool heldout = false;

  Document to_document() const;
};

struct CorpusSpec {
  std::uint64_t seed = 0;
  std::size_t n_docs = 20000;
  int min_frames = 1;
  int max_frames = 3;
  std::vector<int> grid_sizes{8};
  // Fraction of (scene, dynamics) keys reserved for evaluation.
  double heldout_fraction = 0.05;
};

// The held-out split partitions the key space (first scene, dynamics, grid),
// so no evaluation caption ever appears in training documents.
bool heldout_key(std::uint64_t seed, const Scene& s, Dynamics d, int grid, double fraction);

// Document i is drawn from its own stream derived from (seed, i).
WorldDoc gen_document(const CorpusSpec& spec, std::size_t index);
std::vector<WorldDoc> gen_corpus(const CorpusSpec& spec);

// Evaluation prompt: BOS caption BOI SIZE_ROW SIZE_COL.
std::vector<TokenId> image_prompt(const UnifiedVocab& v, const Scene& s, Dynamics d, int rows,
                                  int cols);

enum class PackMode : std::uint8_t { kOnlinePack, kOfflinePad };

struct PackedRow {
  std::vector<TokenId> tokens;          // max_len entries, PAD after `used`
  std::vector<std::int32_t> positions;  // offset inside the owning document
  std::vector<std::size_t> doc_starts;  // row offsets where a document piece starts
  std::vector<bool> continues;          // piece i carries on into the next row
  std::size_t used = 0;
};

struct PackResult {
  std::vector<PackedRow> rows;
  std::size_t skipped = 0;  // documents longer than max_len
};

// online_pack streams documents back to back and splits them at row ends;
// offline_pad keeps documents whole and fills the remainder with PAD.
PackResult pack(const UnifiedVocab& v, const std::vector<std::vector<TokenId>>& docs,
                PackMode mode, std::size_t max_len);

// Display color of a vision token: foreground cells in their color, the
// background a darker shade of its color, unused ids in gray.
std::array<std::uint8_t, 3> token_rgb(const UnifiedVocab& v, TokenId t);
// Binary PPM / PGM of a grid with every cell drawn as a scale x scale block.
// PGM stores the vision index of each cell. Throws ShapeError on a size mismatch.
void write_ppm(const std::filesystem::path& path, const UnifiedVocab& v,
               const std::vector<TokenId>& grid, int rows, int cols, int scale = 8);
void write_pgm(const std::filesystem::path& path, const UnifiedVocab& v,
               const std::vector<TokenId>& grid, int rows, int cols, int scale = 8);

}  // namespace mmgen::world
