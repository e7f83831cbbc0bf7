#pragma once

// Grammar-constrained generation. AR mode decodes every token with one
// forward; hybrid mode decodes text the same way and fills each image block
// with parallel denoising followed by one causal committing forward. Both run
// as step-wise sessions so a driver can interleave many requests.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmgen/decode.hpp"
#include "mmgen/diffusion.hpp"
#include "mmgen/model.hpp"
#include "mmgen/vocab.hpp"

namespace mmgen {

// Position of a prefix inside the sequence grammar.
enum class StreamState : std::uint8_t {
  kStart,        // expects BOS
  kText,         // after BOS, a text token or EOI
  kAfterBoi,     // expects SIZE_ROW
  kAfterSizeRow, // expects SIZE_COL
  kCells,        // inside an image, fewer than rows * cols cells so far
  kAwaitEoi,     // image full, expects EOI
  kDone,         // EOS accepted
  kInvalid,
};

struct StreamViolation {
  std::size_t position = 0;
  std::string rule;
};

// Incremental checker; a complete sequence is accepted exactly when
// parse_sequence accepts it.
class StreamValidator {
 public:
  explicit StreamValidator(UnifiedVocab vocab);

  // Returns false and records the violation if t cannot extend the prefix.
  bool push(TokenId t);
  StreamState state() const { return state_; }
  bool complete() const { return state_ == StreamState::kDone; }
  const std::optional<StreamViolation>& violation() const { return violation_; }
  std::size_t length() const { return length_; }
  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t cells() const { return cells_; }
  std::size_t images() const { return images_; }

 private:
  UnifiedVocab vocab_;
  StreamState state_ = StreamState::kStart;
  std::optional<StreamViolation> violation_;
  std::size_t length_ = 0;
  int rows_ = 0;
  int cols_ = 0;
  std::size_t cells_ = 0;
  std::size_t images_ = 0;
};

// The first violation of the prefix, or nullopt when it is a legal
// (possibly incomplete) prefix.
std::optional<StreamViolation> validate_stream(const UnifiedVocab& v, std::span<const TokenId> prefix);

struct Budgets {
  std::size_t max_tokens = 512;  // generated tokens, also capped by the model context
  std::size_t max_images = 4;    // images opened by the generator
};

// Ids a decoder may emit next: the range [lo, hi) plus `extra`.
struct LegalSet {
  TokenId lo = 0;
  TokenId hi = 0;
  std::vector<TokenId> extra;
  bool empty() const { return lo >= hi && extra.empty(); }
  bool contains(TokenId t) const;
};

// Legal continuations of the validator's prefix when `remaining` more tokens
// may be emitted and `images_left` more images may be opened. Image sizes
// are offered only if the block, its EOI and a final EOS still fit.
LegalSet legal_next(const UnifiedVocab& v, const StreamValidator& s, std::size_t remaining,
                    std::size_t images_left, std::optional<std::pair<int, int>> force_size = {});

enum class GenMode : std::uint8_t { kAr, kHybrid };
GenMode parse_gen_mode(std::string_view text);
std::string_view gen_mode_name(GenMode m);

struct GenConfig {
  GenMode mode = GenMode::kAr;
  DecodeRule rule;
  std::size_t denoise_steps = 16;
  Budgets budgets;
  std::optional<std::pair<int, int>> force_size;
  std::uint64_t seed = 0;
};

enum class Phase : std::uint8_t { kTextDecode, kImageSizePending, kImageDenoise, kImageCommit, kDone };
std::string_view phase_name(Phase p);
// Whether the scheduler may move from `from` to `to` in one event.
bool transition_allowed(Phase from, Phase to);

struct FsmEvent {
  Phase phase = Phase::kTextDecode;
  std::size_t step = 0;     // denoise step for kImageDenoise, else 0
  std::size_t emitted = 0;  // sequence length when the phase was entered
};

struct GenStats {
  std::size_t text_forwards = 0;         // forwards that choose one token sequentially
  std::size_t denoise_forwards = 0;
  std::size_t commit_forwards = 0;
  std::size_t image_block_forwards = 0;  // forwards whose logits choose image cells
  std::size_t generated_tokens = 0;
  std::size_t images = 0;
  double wall_time_ms = 0;
  std::size_t total_forwards() const { return text_forwards + denoise_forwards + commit_forwards; }
  nlohmann::json to_json() const;
};

struct GeneratedImage {
  std::size_t offset = 0;  // index of the first cell in the sequence
  int rows = 0;
  int cols = 0;
  std::vector<TokenId> tokens;
  std::size_t block_forwards = 0;
  double wall_time_ms = 0;  // time spent in the block forwards and choices
};

struct GenResult {
  std::vector<TokenId> tokens;  // prompt followed by the generation
  std::size_t prompt_length = 0;
  bool truncated = false;       // stopped before EOS
  GenStats stats;
  std::vector<GeneratedImage> images;
  std::vector<FsmEvent> trace;  // phase entries in order
};

// One request. Throws ParseError if the prompt is not a legal prefix and
// ConfigError if a hybrid prompt ends inside image cells.
template <class T>
class GenSession {
 public:
  GenSession(const ModelParams<T>& params, std::vector<TokenId> prompt, GenConfig cfg);

  bool done() const { return phase_ == Phase::kDone; }
  Phase phase() const { return phase_; }
  // Advances by at most one forward pass.
  void step();
  const GenResult& result() const { return result_; }
  const KVCache<T>& cache() const { return cache_; }

 private:
  void enter(Phase p, std::size_t step = 0);
  void emit(TokenId t);
  void sequential_step();
  void denoise();
  void commit();
  std::size_t remaining() const;
  std::int32_t next_position() const;

  const ModelParams<T>& params_;
  GenConfig cfg_;
  StreamValidator validator_;
  KVCache<T> cache_;
  Rng rng_;
  Phase phase_ = Phase::kTextDecode;
  GenResult result_;
  std::size_t max_new_ = 0;
  std::vector<TokenId> unfed_;  // emitted tokens whose keys are not cached yet
  std::optional<DenoiseState> image_;
  std::optional<DenoiseSchedule> schedule_;
  std::optional<Rng> image_rng_;
};

template <class T>
GenResult generate_ar(const ModelParams<T>& params, const std::vector<TokenId>& prompt,
                      const DecodeRule& rule, const Budgets& budgets, std::uint64_t seed = 0,
                      std::optional<std::pair<int, int>> force_size = {});

template <class T>
GenResult generate_hybrid(const ModelParams<T>& params, const std::vector<TokenId>& prompt,
                          const DecodeRule& rule, std::size_t denoise_steps,
                          const Budgets& budgets, std::uint64_t seed = 0,
                          std::optional<std::pair<int, int>> force_size = {});

template <class T>
GenResult generate(const ModelParams<T>& params, const std::vector<TokenId>& prompt,
                   const GenConfig& cfg);

// Runs independent requests round-robin, one forward per request per turn.
template <class T>
std::vector<GenResult> run_requests(const ModelParams<T>& params,
                                    const std::vector<std::vector<TokenId>>& prompts,
                                    const GenConfig& cfg);

}  // namespace mmgen
