#include "mmgen/adapt.hpp"

#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "mmgen/errors.hpp"
#include "mmgen/infer.hpp"

namespace mmgen {

template <class T>
std::vector<TokenId> self_distill_document(const ModelParams<T>& params,
                                           const std::vector<TokenId>& doc) {
  const UnifiedVocab& v = params.config.vocab;
  parse_sequence(v, doc);
  std::vector<TokenId> out;
  out.reserve(doc.size());
  std::size_t i = 0;
  while (i < doc.size()) {
    out.push_back(doc[i]);
    if (doc[i] != v.boi()) {
      ++i;
      continue;
    }
    const int rows = v.classify(doc[i + 1]).size;
    const int cols = v.classify(doc[i + 2]).size;
    out.push_back(doc[i + 1]);
    out.push_back(doc[i + 2]);
    const auto n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    const GenResult r = generate_ar(params, out, DecodeRule{}, Budgets{n, 0});
    out.insert(out.end(), r.tokens.begin() + static_cast<std::ptrdiff_t>(out.size()), r.tokens.end());
    i += 3 + n;
  }
  return out;
}

template <class T>
std::vector<std::vector<TokenId>> build_adapt_corpus(const ModelParams<T>& params,
                                                     const std::vector<std::vector<TokenId>>& docs,
                                                     double fraction, std::uint64_t seed) {
  if (fraction < 0 || fraction > 1) throw ConfigError("distill fraction must lie in [0, 1]");
  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const auto n_distill = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(docs.size())));
  std::vector<std::vector<TokenId>> out = docs;
  for (std::size_t k = 0; k < n_distill; ++k) out[order[k]] = self_distill_document(params, docs[order[k]]);
  return out;
}

nlohmann::json AdaptConfig::to_json() const {
  return {{"opt", opt.to_json()},
          {"w_diff", weights.w_diff},
          {"w_ntp", weights.w_ntp},
          {"loss_weights", weights.ntp.to_json()},
          {"steps", steps},
          {"docs_per_batch", docs_per_batch},
          {"distill_fraction", distill_fraction},
          {"divergence_factor", divergence_factor},
          {"divergence_window", divergence_window},
          {"seed", seed}};
}

AdaptConfig AdaptConfig::from_json(const nlohmann::json& j) {
  AdaptConfig c;
  if (j.contains("opt")) c.opt = OptimizerConfig::from_json(j.at("opt"));
  c.weights.w_diff = j.value("w_diff", c.weights.w_diff);
  c.weights.w_ntp = j.value("w_ntp", c.weights.w_ntp);
  if (j.contains("loss_weights")) c.weights.ntp = LossWeights::from_json(j.at("loss_weights"));
  c.steps = j.value("steps", c.steps);
  c.docs_per_batch = j.value("docs_per_batch", c.docs_per_batch);
  c.distill_fraction = j.value("distill_fraction", c.distill_fraction);
  c.divergence_factor = j.value("divergence_factor", c.divergence_factor);
  c.divergence_window = j.value("divergence_window", c.divergence_window);
  c.seed = j.value("seed", c.seed);
  if (c.weights.w_diff < 0 || c.weights.w_ntp < 0 || c.weights.w_diff + c.weights.w_ntp <= 0)
    throw ConfigError("adaptation weights must be non-negative and not both zero");
  if (c.docs_per_batch == 0) throw ConfigError("docs_per_batch must be positive");
  return c;
}

nlohmann::json AdaptMetrics::to_json() const {
  return {{"step", step},           {"loss", loss}, {"diff_loss", diff_loss},
          {"ntp_loss", ntp_loss},   {"grad_norm", grad_norm}, {"lr", lr}};
}

template <class T>
std::vector<AdaptMetrics> adapt_loop(ModelParams<T>& params,
                                     const std::vector<std::vector<TokenId>>& corpus,
                                     const AdaptConfig& cfg,
                                     const std::function<void(const AdaptMetrics&)>& on_step) {
  if (cfg.steps == 0) return {};
  if (corpus.empty()) throw EmptyBatch("no documents to adapt on");
  const UnifiedVocab& v = params.config.vocab;
  OptimizerState<T> opt = OptimizerState<T>::init(params);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size(), epoch = 0, above = 0;
  double initial = 0;
  std::vector<AdaptMetrics> out;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    Rng noise(Rng::derive(cfg.seed, 2 * s + 1));
    std::vector<AdaptExample> batch;
    for (std::size_t b = 0; b < cfg.docs_per_batch; ++b) {
      if (cursor == order.size()) {
        Rng shuffle(Rng::derive(cfg.seed, 2 * epoch++));
        shuffle.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      batch.push_back(build_adapt_example(v, corpus[order[cursor++]], noise));
    }
    ModelParams<T> grad = ModelParams<T>::zeros(params.config);
    const AdaptLoss l = adaptation_loss<T>(params, batch, cfg.weights, &grad);
    if (!std::isfinite(l.loss)) throw NumericsError("non-finite adaptation loss");
    AdaptMetrics m;
    m.loss = l.loss;
    m.diff_loss = l.diff_loss;
    m.ntp_loss = l.ntp_loss;
    m.grad_norm = adamw_update(params, opt, grad, cfg.opt, &m.lr);
    m.step = opt.step;
    out.push_back(m);
    if (on_step) on_step(m);
    if (s == 0) initial = l.loss;
    above = l.loss > cfg.divergence_factor * initial ? above + 1 : 0;
    if (above >= cfg.divergence_window)
      throw TrainingDiverged("adaptation loss above " + std::to_string(cfg.divergence_factor) +
                             "x its initial value for " + std::to_string(above) + " steps");
  }
  return out;
}

#define MMGEN_INSTANTIATE(T)                                                                    \
  template std::vector<TokenId> self_distill_document<T>(const ModelParams<T>&,                 \
                                                         const std::vector<TokenId>&);          \
  template std::vector<std::vector<TokenId>> build_adapt_corpus<T>(                             \
      const ModelParams<T>&, const std::vector<std::vector<TokenId>>&, double, std::uint64_t);  \
  template std::vector<AdaptMetrics> adapt_loop<T>(ModelParams<T>&,                             \
                                                   const std::vector<std::vector<TokenId>>&,    \
                                                   const AdaptConfig&,                          \
                                                   const std::function<void(const AdaptMetrics&)>&);

MMGEN_INSTANTIATE(float)
MMGEN_INSTANTIATE(double)
#undef MMGEN_INSTANTIATE

}  // namespace mmgen
