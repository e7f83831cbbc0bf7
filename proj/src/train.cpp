#include "mmgen/train.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "mmgen/errors.hpp"
#include "mmgen/rng.hpp"

namespace mmgen {

void LossWeights::validate() const {
  if (w_visual < 0 || w_text < 0 || w_special < 0) throw ConfigError("loss weights must be >= 0");
  if (w_visual == 0 && w_text == 0 && w_special == 0)
    throw ConfigError("at least one loss weight must be positive");
}

double LossWeights::for_target(const UnifiedVocab& v, TokenId target) const {
  if (v.is_text(target)) return w_text;
  if (v.is_vision(target)) return w_visual;
  return w_special;
}

nlohmann::json LossWeights::to_json() const {
  return {{"w_visual", w_visual}, {"w_text", w_text}, {"w_special", w_special}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.w_visual = j.value("w_visual", w.w_visual);
  w.w_text = j.value("w_text", w.w_text);
  w.w_special = j.value("w_special", w.w_special);
  w.validate();
  return w;
}

BlockMask TrainRow::mask() const { return document_causal_mask(doc_starts, tokens.size()); }

TrainRow make_row(const UnifiedVocab& v, const world::PackedRow& packed) {
  TrainRow r;
  r.padded_len = packed.tokens.size();
  r.tokens.assign(packed.tokens.begin(), packed.tokens.begin() + static_cast<std::ptrdiff_t>(packed.used));
  r.positions.assign(packed.positions.begin(),
                     packed.positions.begin() + static_cast<std::ptrdiff_t>(packed.used));
  r.doc_starts = packed.doc_starts;
  r.targets.assign(r.tokens.size(), -1);
  std::size_t next_start = 1;
  for (std::size_t i = 0; i + 1 < r.tokens.size(); ++i) {
    while (next_start < r.doc_starts.size() && r.doc_starts[next_start] <= i) ++next_start;
    const bool boundary = next_start < r.doc_starts.size() && r.doc_starts[next_start] == i + 1;
    if (boundary || r.tokens[i] == v.pad() || r.tokens[i + 1] == v.pad() || r.tokens[i] == v.eos())
      continue;
    r.targets[i] = r.tokens[i + 1];
  }
  return r;
}

std::vector<double> row_weights(const UnifiedVocab& v, const TrainRow& row, const LossWeights& w) {
  std::vector<double> out(row.tokens.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (row.targets[i] >= 0) out[i] = w.for_target(v, row.targets[i]);
  return out;
}

template <class T>
LossBreakdown ntp_loss(const UnifiedVocab& v, const std::vector<Matrix<T>>& logits,
                       const TrainBatch& batch, const LossWeights& w) {
  if (logits.size() != batch.rows.size()) throw ShapeError("one logits matrix per row expected");
  LossBreakdown out;
  double weighted = 0, text = 0, vis = 0;
  for (std::size_t r = 0; r < batch.rows.size(); ++r) {
    const TrainRow& row = batch.rows[r];
    const Matrix<T>& lg = logits[r];
    if (lg.rows != row.tokens.size()) throw ShapeError("logits rows differ from row length");
    const auto weights = row_weights(v, row, w);
    for (std::size_t i = 0; i < lg.rows; ++i) {
      const TokenId t = row.targets[i];
      if (t < 0) continue;
      const T* x = lg.row(i);
      double m = x[0];
      for (std::size_t j = 1; j < lg.cols; ++j) m = std::max(m, static_cast<double>(x[j]));
      double s = 0;
      for (std::size_t j = 0; j < lg.cols; ++j) s += std::exp(static_cast<double>(x[j]) - m);
      const double ce = m + std::log(s) - static_cast<double>(x[t]);
      weighted += weights[i] * ce;
      out.weight_sum += weights[i];
      if (v.is_text(t)) {
        text += ce;
        ++out.n_text;
      } else if (v.is_vision(t)) {
        vis += ce;
        ++out.n_vis;
      }
    }
  }
  if (out.weight_sum <= 0) throw EmptyBatch("batch has no weighted targets");
  out.loss = weighted / out.weight_sum;
  out.loss_text = out.n_text ? text / static_cast<double>(out.n_text) : 0.0;
  out.loss_vis = out.n_vis ? vis / static_cast<double>(out.n_vis) : 0.0;
  return out;
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"lr", lr},       {"min_lr_ratio", min_lr_ratio}, {"warmup_steps", warmup_steps},
          {"total_steps", total_steps}, {"beta1", beta1}, {"beta2", beta2},
          {"eps", eps},     {"weight_decay", weight_decay}, {"clip_norm", clip_norm}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  c.lr = j.value("lr", c.lr);
  c.min_lr_ratio = j.value("min_lr_ratio", c.min_lr_ratio);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  return c;
}

double lr_at(const OptimizerConfig& c, std::size_t step) {
  if (step == 0) step = 1;
  if (c.warmup_steps > 0 && step <= c.warmup_steps)
    return c.lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  if (c.total_steps <= c.warmup_steps) return c.lr;
  const double progress = std::min(
      1.0, static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps));
  const double floor = c.lr * c.min_lr_ratio;
  return floor + (c.lr - floor) * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

template <class T>
OptimizerState<T> OptimizerState<T>::init(const ModelParams<T>& params) {
  OptimizerState<T> s;
  s.m.assign(params.values.size(), T(0));
  s.v.assign(params.values.size(), T(0));
  return s;
}

nlohmann::json StepMetrics::to_json() const {
  return {{"step", step},           {"loss", loss}, {"loss_text", loss_text},
          {"loss_vis", loss_vis},   {"grad_norm", grad_norm}, {"lr", lr}};
}

template <class T>
double adamw_update(ModelParams<T>& params, OptimizerState<T>& opt, ModelParams<T>& grad,
                    const OptimizerConfig& c, double* lr_used) {
  if (opt.m.size() != params.values.size()) throw ShapeError("optimizer state does not match params");
  double sq = 0;
  for (const T g : grad.values) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericsError("non-finite gradient norm");
  if (c.clip_norm > 0 && norm > c.clip_norm) {
    const T scale = static_cast<T>(c.clip_norm / norm);
    for (T& g : grad.values) g *= scale;
  }
  ++opt.step;
  const double lr = lr_at(c, opt.step);
  if (lr_used) *lr_used = lr;
  if (lr == 0.0) return norm;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(c.eps);
  for (const TensorSlot& s : params.layout.slots) {
    const T decay = s.decay ? static_cast<T>(lr * c.weight_decay) : T(0);
    for (std::size_t i = s.offset; i < s.offset + s.size(); ++i) {
      const T g = grad.values[i];
      opt.m[i] = b1 * opt.m[i] + (T(1) - b1) * g;
      opt.v[i] = b2 * opt.v[i] + (T(1) - b2) * g * g;
      const T denom = std::sqrt(opt.v[i] * inv_bc2) + eps;
      params.values[i] -= step_size * opt.m[i] / denom + decay * params.values[i];
    }
  }
  return norm;
}

template <class T>
StepMetrics train_step(ModelParams<T>& params, OptimizerState<T>& opt, const TrainBatch& batch,
                       const LossWeights& w, const OptimizerConfig& c) {
  const UnifiedVocab& v = params.config.vocab;
  std::vector<std::vector<double>> weights;
  double total_w = 0;
  for (const TrainRow& row : batch.rows) {
    weights.push_back(row_weights(v, row, w));
    for (double x : weights.back()) total_w += x;
  }
  if (total_w <= 0) throw EmptyBatch("batch has no weighted targets");

  ModelParams<T> grad = ModelParams<T>::zeros(params.config);
  StepMetrics m;
  double text = 0, vis = 0;
  std::size_t n_text = 0, n_vis = 0;
  for (std::size_t r = 0; r < batch.rows.size(); ++r) {
    const TrainRow& row = batch.rows[r];
    if (row.tokens.empty()) continue;
    LossSpec<T> spec;
    spec.targets = row.targets;
    spec.weights.resize(row.tokens.size());
    for (std::size_t i = 0; i < row.tokens.size(); ++i)
      spec.weights[i] = static_cast<T>(weights[r][i] / total_w);
    std::vector<T> ce;
    m.loss += static_cast<double>(
        backward<T>(params, row.tokens, row.positions, row.mask(), spec, grad, &ce));
    for (std::size_t i = 0; i < row.tokens.size(); ++i) {
      const TokenId t = row.targets[i];
      if (t < 0) continue;
      if (v.is_text(t)) {
        text += ce[i];
        ++n_text;
      } else if (v.is_vision(t)) {
        vis += ce[i];
        ++n_vis;
      }
    }
  }
  if (!std::isfinite(m.loss)) throw NumericsError("non-finite loss");
  m.loss_text = n_text ? text / static_cast<double>(n_text) : 0.0;
  m.loss_vis = n_vis ? vis / static_cast<double>(n_vis) : 0.0;
  m.grad_norm = adamw_update(params, opt, grad, c, &m.lr);
  m.clipped = c.clip_norm > 0 && m.grad_norm > c.clip_norm;
  m.step = opt.step;
  return m;
}

BatchStream::BatchStream(UnifiedVocab vocab, std::vector<std::vector<TokenId>> docs,
                         world::PackMode mode, std::size_t max_len, std::size_t rows_per_batch,
                         std::uint64_t seed)
    : vocab_(std::move(vocab)),
      docs_(std::move(docs)),
      mode_(mode),
      max_len_(max_len),
      rows_per_batch_(rows_per_batch),
      seed_(seed) {
  if (docs_.empty()) throw EmptyBatch("no documents to train on");
  if (rows_per_batch_ == 0) throw ConfigError("rows_per_batch must be positive");
}

void BatchStream::refill() {
  std::vector<std::size_t> order(docs_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(Rng::derive(seed_, epoch_));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<TokenId>> shuffled;
  shuffled.reserve(order.size());
  for (std::size_t i : order) shuffled.push_back(docs_[i]);
  const auto packed = world::pack(vocab_, shuffled, mode_, max_len_);
  if (epoch_ == 0) skipped_ = packed.skipped;
  if (packed.rows.empty()) throw EmptyBatch("every document exceeds max_len");
  pending_.clear();
  for (const auto& r : packed.rows) pending_.push_back(make_row(vocab_, r));
  cursor_ = 0;
  ++epoch_;
}

TrainBatch BatchStream::next() {
  TrainBatch b;
  while (b.rows.size() < rows_per_batch_) {
    if (cursor_ >= pending_.size()) refill();
    b.rows.push_back(pending_[cursor_++]);
  }
  return b;
}

template <class T>
std::vector<StepMetrics> train_loop(ModelParams<T>& params, BatchStream& stream,
                                    const TrainConfig& cfg,
                                    const std::function<void(const StepMetrics&)>& on_step) {
  cfg.weights.validate();
  OptimizerState<T> opt = OptimizerState<T>::init(params);
  std::vector<StepMetrics> out;
  out.reserve(cfg.steps);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const TrainBatch batch = stream.next();
    out.push_back(train_step(params, opt, batch, cfg.weights, cfg.opt));
    if (on_step) on_step(out.back());
  }
  return out;
}

template <class T>
LossBreakdown evaluate_ntp(const ModelParams<T>& params, const std::vector<std::vector<TokenId>>& docs,
                           const LossWeights& w) {
  const UnifiedVocab& v = params.config.vocab;
  TrainBatch batch;
  std::vector<Matrix<T>> logits;
  for (const auto& d : docs) {
    world::PackedRow pr;
    pr.tokens = d;
    pr.used = d.size();
    pr.doc_starts = {0};
    pr.continues = {false};
    for (std::size_t i = 0; i < d.size(); ++i) pr.positions.push_back(static_cast<std::int32_t>(i));
    batch.rows.push_back(make_row(v, pr));
    const TrainRow& row = batch.rows.back();
    logits.push_back(forward<T>(params, row.tokens, row.positions, row.mask()));
  }
  return ntp_loss<T>(v, logits, batch, w);
}

#define MMGEN_INSTANTIATE(T)                                                                   \
  template LossBreakdown ntp_loss<T>(const UnifiedVocab&, const std::vector<Matrix<T>>&,       \
                                     const TrainBatch&, const LossWeights&);                   \
  template struct OptimizerState<T>;                                                           \
  template double adamw_update<T>(ModelParams<T>&, OptimizerState<T>&, ModelParams<T>&,        \
                                  const OptimizerConfig&, double*);                            \
  template StepMetrics train_step<T>(ModelParams<T>&, OptimizerState<T>&, const TrainBatch&,   \
                                     const LossWeights&, const OptimizerConfig&);              \
  template std::vector<StepMetrics> train_loop<T>(ModelParams<T>&, BatchStream&,               \
                                                  const TrainConfig&,                          \
                                                  const std::function<void(const StepMetrics&)>&); \
  template LossBreakdown evaluate_ntp<T>(const ModelParams<T>&,                                \
                                         const std::vector<std::vector<TokenId>>&,             \
                                         const LossWeights&);

MMGEN_INSTANTIATE(float)
MMGEN_INSTANTIATE(double)
#undef MMGEN_INSTANTIATE

}  // namespace mmgen
