#pragma once

// Adaptation of a trained next-token model to parallel image denoising:
// a self-distillation corpus whose images are the base model's own greedy AR
// outputs, and a loop optimizing the joint diffusion + clean next-token loss.

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmgen/diffusion.hpp"
#include "mmgen/model.hpp"
#include "mmgen/train.hpp"

namespace mmgen {

// Replaces every image of a complete sequence with the base model's greedy AR
// continuation of the prefix before it (earlier images already replaced).
// Text and image sizes are kept.
template <class T>
std::vector<TokenId> self_distill_document(const ModelParams<T>& params,
                                           const std::vector<TokenId>& doc);

// Original documents with a `fraction` of them, chosen by seed, regenerated.
template <class T>
std::vector<std::vector<TokenId>> build_adapt_corpus(const ModelParams<T>& params,
                                                     const std::vector<std::vector<TokenId>>& docs,
                                                     double fraction, std::uint64_t seed);

struct AdaptConfig {
  OptimizerConfig opt{.lr = 1e-4, .total_steps = 500};
  AdaptWeights weights;
  std::size_t steps = 500;
  std::size_t docs_per_batch = 8;
  double distill_fraction = 0.5;
  // Abort when the loss stays above factor * initial for `window` steps in a row.
  double divergence_factor = 2.0;
  std::size_t divergence_window = 100;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static AdaptConfig from_json(const nlohmann::json& j);
};

struct AdaptMetrics {
  std::size_t step = 0;
  double loss = 0;
  double diff_loss = 0;
  double ntp_loss = 0;
  double grad_norm = 0;
  double lr = 0;

  nlohmann::json to_json() const;
};

// Runs cfg.steps optimizer steps over `corpus`, reshuffled every epoch. Each
// step corrupts a fresh noisy copy of every image. Throws TrainingDiverged on
// divergence and NumericsError on a non-finite loss.
template <class T>
std::vector<AdaptMetrics> adapt_loop(ModelParams<T>& params,
                                     const std::vector<std::vector<TokenId>>& corpus,
                                     const AdaptConfig& cfg,
                                     const std::function<void(const AdaptMetrics&)>& on_step = {});

}  // namespace mmgen
