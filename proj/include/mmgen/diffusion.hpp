#pragma once

// Absorbing-state corruption of image blocks, the commit schedule, parallel
// denoising against a clean KV cache, and the adaptation objective over
// documents that carry a noisy copy in front of every image.

#include <cstdint>
#include <span>
#include <vector>

#include "mmgen/decode.hpp"
#include "mmgen/mask.hpp"
#include "mmgen/model.hpp"
#include "mmgen/train.hpp"

namespace mmgen {

struct CorruptionSpec {
  TokenId mask_token = -1;
  double ratio = 1.0;  // in (0, 1]
  std::uint64_t seed = 0;
};

struct Corrupted {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> masked;  // ascending
};

// Masks exactly ceil(ratio * N) positions drawn uniformly without
// replacement. Throws CorruptionError if the input holds the mask token, a
// non-vision id, or the ratio is outside (0, 1].
Corrupted corrupt(const UnifiedVocab& v, std::span<const TokenId> image, const CorruptionSpec& spec);
std::size_t masked_count(std::size_t n, double ratio);

struct DenoiseSchedule {
  std::size_t n = 0;
  std::size_t steps = 0;
  std::vector<std::size_t> keep;  // keep[0] = 0 ... keep[steps] = n, strictly increasing

  // keep(s) = ceil(n * (1 - cos(pi s / 2S))) forced strictly increasing.
  // Throws ConfigError unless 1 <= steps <= n.
  static DenoiseSchedule cosine(std::size_t n, std::size_t steps);
  std::size_t commits_at(std::size_t s) const { return keep[s] - keep[s - 1]; }
};

struct DenoiseState {
  std::vector<TokenId> tokens;
  std::vector<bool> committed;
  std::vector<std::size_t> commit_step;  // step at which each position was fixed
  std::size_t step = 0;

  static DenoiseState init(std::size_t n, TokenId mask_token);
  std::size_t committed_count() const;
};

// One read-only forward over the block under dida_infer_mask, then commits
// the most confident uncommitted positions (ties to the lower index). `lead`
// tokens, when present, sit between the cache and the block and are committed
// to the cache by this same forward. Logits are restricted to vision ids.
template <class T>
void denoise_step(const ModelParams<T>& params, KVCache<T>& cache, DenoiseState& state,
                  const DenoiseSchedule& schedule, std::int32_t first_position,
                  const DecodeRule& rule, Rng& rng, std::span<const TokenId> lead = {},
                  ForwardCounter* counter = nullptr);

struct DidaStats {
  std::size_t forward_passes = 0;  // forwards touching the image block
  std::size_t denoise_forwards = 0;
  std::size_t commit_forwards = 0;
  double wall_time_ms = 0;
};

template <class T>
struct DidaResult {
  std::vector<TokenId> grid;
  DenoiseState state;
  DidaStats stats;
  Matrix<T> next_logits;  // logits after the last image cell, from the commit pass
};

// Runs the schedule's S denoise steps and one committing causal forward over
// the finished block, leaving the cache extended by lead + rows * cols.
template <class T>
DidaResult<T> generate_image_dida(const ModelParams<T>& params, KVCache<T>& cache,
                                  std::span<const TokenId> lead, int rows, int cols,
                                  const DenoiseSchedule& schedule, const DecodeRule& rule,
                                  std::uint64_t seed, std::int32_t first_position);

// A document with a noisy copy of each image placed right before the clean
// cells: BOI SIZE_ROW SIZE_COL <noisy> <clean> EOI. Noisy cells share their
// partner's position, so the clean stream keeps its original positions.
struct AdaptExample {
  std::vector<TokenId> tokens;
  std::vector<std::int32_t> positions;
  std::vector<LayoutSpan> layout;
  std::vector<TokenId> ntp_targets;   // clean-stream next token, -1 if none
  std::vector<TokenId> diff_targets;  // clean partner token at masked noisy cells
  std::size_t n_masked = 0;

  BlockMask mask() const { return dida_train_mask(layout); }
};

// Each image gets its own ratio r ~ U(0, 1] from rng unless fixed_ratio > 0.
AdaptExample build_adapt_example(const UnifiedVocab& v, const std::vector<TokenId>& clean_doc,
                                 Rng& rng, double fixed_ratio = 0.0);

struct AdaptWeights {
  double w_diff = 1.0;
  double w_ntp = 1.0;
  LossWeights ntp;
};

struct AdaptLoss {
  double loss = 0;
  double diff_loss = 0;  // mean CE over masked noisy cells
  double ntp_loss = 0;   // weighted clean-stream next-token loss
  std::size_t n_masked = 0;
};

// loss = w_diff * diff_loss + w_ntp * ntp_loss over the whole batch. When
// grad is given the gradient of that loss is accumulated into it.
template <class T>
AdaptLoss adaptation_loss(const ModelParams<T>& params, const std::vector<AdaptExample>& batch,
                          const AdaptWeights& w, ModelParams<T>* grad = nullptr);

}  // namespace mmgen
