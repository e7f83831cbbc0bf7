#pragma once

// Next-token objective with per-modality loss weights, AdamW with a cosine
// schedule and global-norm clipping, and the packed batch stream.

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmgen/mask.hpp"
#include "mmgen/model.hpp"
#include "mmgen/vocab.hpp"
#include "mmgen/worldsim.hpp"

namespace mmgen {

struct LossWeights {
  double w_visual = 0.5;
  double w_text = 1.0;
  double w_special = 1.0;

  // Throws ConfigError on negative or all-zero weights.
  void validate() const;
  double for_target(const UnifiedVocab& v, TokenId target) const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

// One packed sequence with trailing padding removed. Targets never cross a
// document start, and PAD positions never carry a target.
struct TrainRow {
  std::vector<TokenId> tokens;
  std::vector<std::int32_t> positions;
  std::vector<std::size_t> doc_starts;
  std::vector<TokenId> targets;  // -1 where there is no target
  std::size_t padded_len = 0;

  BlockMask mask() const;
};

struct TrainBatch {
  std::vector<TrainRow> rows;
};

TrainRow make_row(const UnifiedVocab& v, const world::PackedRow& packed);
// Per-position weight: 0 where there is no target, otherwise by target role.
std::vector<double> row_weights(const UnifiedVocab& v, const TrainRow& row, const LossWeights& w);

struct LossBreakdown {
  double loss = 0;          // sum w * CE / sum w
  double loss_text = 0;     // unweighted mean CE over text targets
  double loss_vis = 0;      // unweighted mean CE over vision targets
  double weight_sum = 0;
  std::size_t n_text = 0;
  std::size_t n_vis = 0;
};

// logits[r] holds one row of logits per token of batch.rows[r]. Throws
// EmptyBatch when every weight is zero.
template <class T>
LossBreakdown ntp_loss(const UnifiedVocab& v, const std::vector<Matrix<T>>& logits,
                       const TrainBatch& batch, const LossWeights& w);

struct OptimizerConfig {
  double lr = 1e-3;
  double min_lr_ratio = 0.1;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 5.0;

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

// Linear warmup to lr over warmup_steps, then cosine decay to
// lr * min_lr_ratio at total_steps. `step` counts from 1.
double lr_at(const OptimizerConfig& c, std::size_t step);

template <class T>
struct OptimizerState {
  std::vector<T> m, v;
  std::size_t step = 0;

  static OptimizerState init(const ModelParams<T>& params);
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0;
  double loss_text = 0;
  double loss_vis = 0;
  double grad_norm = 0;
  double lr = 0;
  bool clipped = false;

  nlohmann::json to_json() const;
};

// Clips grad to the configured global norm and applies one AdamW update.
// Weight decay touches only slots flagged for decay. Returns the pre-clip norm.
template <class T>
double adamw_update(ModelParams<T>& params, OptimizerState<T>& opt, ModelParams<T>& grad,
                    const OptimizerConfig& c, double* lr_used = nullptr);

// One optimizer step on the weighted next-token loss of the batch. Throws
// NumericsError (leaving params untouched) on a non-finite loss.
template <class T>
StepMetrics train_step(ModelParams<T>& params, OptimizerState<T>& opt, const TrainBatch& batch,
                       const LossWeights& w, const OptimizerConfig& c);

// Endless stream of batches: every epoch reshuffles the documents with a
// seed derived from (seed, epoch) and packs them again.
class BatchStream {
 public:
  BatchStream(UnifiedVocab vocab, std::vector<std::vector<TokenId>> docs, world::PackMode mode,
              std::size_t max_len, std::size_t rows_per_batch, std::uint64_t seed);
  TrainBatch next();
  std::size_t epoch() const { return epoch_; }
  std::size_t skipped() const { return skipped_; }

 private:
  void refill();

  UnifiedVocab vocab_;
  std::vector<std::vector<TokenId>> docs_;
  world::PackMode mode_;
  std::size_t max_len_;
  std::size_t rows_per_batch_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t skipped_ = 0;
  std::vector<TrainRow> pending_;
  std::size_t cursor_ = 0;
};

struct TrainConfig {
  OptimizerConfig opt;
  LossWeights weights;
  std::size_t steps = 1000;
  std::size_t rows_per_batch = 32;
  std::size_t max_len = 512;
  world::PackMode packing = world::PackMode::kOfflinePad;
  std::uint64_t seed = 0;
};

template <class T>
std::vector<StepMetrics> train_loop(ModelParams<T>& params, BatchStream& stream,
                                    const TrainConfig& cfg,
                                    const std::function<void(const StepMetrics&)>& on_step = {});

// Weighted next-token loss of whole documents, one row each (no update).
template <class T>
LossBreakdown evaluate_ntp(const ModelParams<T>& params, const std::vector<std::vector<TokenId>>& docs,
                           const LossWeights& w);

}  // namespace mmgen
