#include "mmgen/diffusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "mmgen/errors.hpp"

namespace mmgen {

std::size_t masked_count(std::size_t n, double ratio) {
  if (!(ratio > 0.0) || ratio > 1.0) throw CorruptionError("mask ratio must lie in (0, 1]");
  // The small slack keeps ratios such as 1/N from rounding up past the
  // intended count.
  const double x = ratio * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
  return std::clamp<std::size_t>(k, n ? 1 : 0, n);
}

Corrupted corrupt(const UnifiedVocab& v, std::span<const TokenId> image, const CorruptionSpec& spec) {
  const TokenId mask = spec.mask_token >= 0 ? spec.mask_token : v.mask();
  for (TokenId t : image) {
    if (t == mask) throw CorruptionError("image already contains the mask token");
    if (!v.is_vision(t)) throw CorruptionError("image holds a non-vision id " + std::to_string(t));
  }
  const std::size_t n = image.size();
  const std::size_t k = masked_count(n, spec.ratio);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(spec.seed);
  // Partial Fisher-Yates: the first k slots become the masked set.
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(n - i));
    std::swap(idx[i], idx[j]);
  }
  Corrupted out{std::vector<TokenId>(image.begin(), image.end()), {idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k)}};
  std::sort(out.masked.begin(), out.masked.end());
  for (std::size_t i : out.masked) out.tokens[i] = mask;
  return out;
}

DenoiseSchedule DenoiseSchedule::cosine(std::size_t n, std::size_t steps) {
  if (steps < 1 || steps > n) throw ConfigError("denoise steps must lie in [1, N]");
  DenoiseSchedule s;
  s.n = n;
  s.steps = steps;
  s.keep.assign(steps + 1, 0);
  const double pi = 3.141592653589793;
  for (std::size_t i = 1; i <= steps; ++i) {
    const double frac = 1.0 - std::cos(pi * static_cast<double>(i) / (2.0 * static_cast<double>(steps)));
    auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * frac - 1e-9));
    k = std::max(k, s.keep[i - 1] + 1);
    k = std::min(k, n - (steps - i));
    s.keep[i] = k;
  }
  s.keep[steps] = n;
  return s;
}

DenoiseState DenoiseState::init(std::size_t n, TokenId mask_token) {
  DenoiseState st;
  st.tokens.assign(n, mask_token);
  st.committed.assign(n, false);
  st.commit_step.assign(n, 0);
  return st;
}

std::size_t DenoiseState::committed_count() const {
  return static_cast<std::size_t>(std::count(committed.begin(), committed.end(), true));
}

template <class T>
void denoise_step(const ModelParams<T>& params, KVCache<T>& cache, DenoiseState& state,
                  const DenoiseSchedule& schedule, std::int32_t first_position,
                  const DecodeRule& rule, Rng& rng, std::span<const TokenId> lead,
                  ForwardCounter* counter) {
  const UnifiedVocab& v = params.config.vocab;
  const std::size_t n = state.tokens.size();
  if (schedule.n != n) throw ShapeError("schedule size differs from the block");
  if (state.step >= schedule.steps) throw ConfigError("denoising already finished");
  const std::size_t s = state.step + 1;

  std::vector<TokenId> tokens(lead.begin(), lead.end());
  tokens.insert(tokens.end(), state.tokens.begin(), state.tokens.end());
  std::vector<std::int32_t> positions(tokens.size());
  const auto start = first_position - static_cast<std::int32_t>(lead.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = start + static_cast<std::int32_t>(i);
  const std::size_t before = cache.length();
  const BlockMask mask = dida_infer_mask(before + lead.size(), n);
  const Matrix<T> logits =
      forward_with_cache<T>(params, cache, tokens, positions, mask, lead.size(), counter);
  if (cache.length() != before + lead.size())
    throw CacheError("denoising pass changed the clean cache");

  struct Candidate {
    std::size_t index;
    Choice choice;
  };
  std::vector<Candidate> cand;
  for (std::size_t i = 0; i < n; ++i) {
    if (state.committed[i]) continue;
    cand.push_back({i, choose<T>(logits.row(lead.size() + i), v.vision_begin(), v.vision_end(), rule, rng)});
  }
  std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
    return a.choice.prob > b.choice.prob;
  });
  const std::size_t k = schedule.commits_at(s);
  for (std::size_t j = 0; j < k && j < cand.size(); ++j) {
    const std::size_t i = cand[j].index;
    state.tokens[i] = cand[j].choice.token;
    state.committed[i] = true;
    state.commit_step[i] = s;
  }
  state.step = s;
}

template <class T>
DidaResult<T> generate_image_dida(const ModelParams<T>& params, KVCache<T>& cache,
                                  std::span<const TokenId> lead, int rows, int cols,
                                  const DenoiseSchedule& schedule, const DecodeRule& rule,
                                  std::uint64_t seed, std::int32_t first_position) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  if (rows < 1 || cols < 1 || schedule.n != n) throw ShapeError("schedule does not match the grid");
  DidaResult<T> res;
  res.state = DenoiseState::init(n, params.config.vocab.mask());
  Rng rng(seed);
  ForwardCounter fc;
  for (std::size_t s = 1; s <= schedule.steps; ++s)
    denoise_step<T>(params, cache, res.state, schedule, first_position, rule, rng,
                    s == 1 ? lead : std::span<const TokenId>{}, &fc);
  res.stats.denoise_forwards = fc.calls;

  res.grid = res.state.tokens;
  std::vector<std::int32_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = first_position + static_cast<std::int32_t>(i);
  const Matrix<T> logits = forward_with_cache<T>(params, cache, res.grid, positions,
                                                 causal_mask(cache.length() + n), n, &fc);
  res.stats.commit_forwards = fc.calls - res.stats.denoise_forwards;
  res.stats.forward_passes = fc.calls;
  res.next_logits = Matrix<T>(1, logits.cols);
  std::copy(logits.row(n - 1), logits.row(n - 1) + logits.cols, res.next_logits.row(0));
  res.stats.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

AdaptExample build_adapt_example(const UnifiedVocab& v, const std::vector<TokenId>& clean_doc,
                                 Rng& rng, double fixed_ratio) {
  const Document doc = parse_sequence(v, clean_doc);
  AdaptExample ex;
  std::vector<std::size_t> clean_index;
  std::int32_t pos = 0;

  auto open_span = [&](SpanKind kind, std::size_t len, int image, int partner) {
    LayoutSpan sp{ex.tokens.size(), len, kind, image, partner};
    const bool mergeable = kind == SpanKind::kSpecial || kind == SpanKind::kCleanText;
    if (mergeable && !ex.layout.empty() && ex.layout.back().kind == kind &&
        ex.layout.back().end() == sp.start) {
      ex.layout.back().len += len;
      return;
    }
    ex.layout.push_back(sp);
  };
  auto clean = [&](TokenId t, SpanKind kind) {
    open_span(kind, 1, -1, -1);
    clean_index.push_back(ex.tokens.size());
    ex.tokens.push_back(t);
    ex.positions.push_back(pos++);
    ex.diff_targets.push_back(-1);
  };

  clean(v.bos(), SpanKind::kSpecial);
  int image = 0;
  for (const Segment& seg : doc.segments) {
    if (const auto* text = std::get_if<TextSegment>(&seg)) {
      for (TokenId t : text->tokens) clean(t, SpanKind::kCleanText);
      continue;
    }
    const auto& img = std::get<ImageSegment>(seg);
    clean(v.boi(), SpanKind::kSpecial);
    clean(v.size_row(img.rows), SpanKind::kSpecial);
    clean(v.size_col(img.cols), SpanKind::kSpecial);
    const std::size_t n = img.tokens.size();
    const double drawn = 1.0 - rng.uniform01();  // (0, 1]
    const double ratio = fixed_ratio > 0 ? fixed_ratio : drawn;
    const Corrupted noisy = corrupt(v, img.tokens, {v.mask(), ratio, rng.next_u64()});
    const int partner = static_cast<int>(ex.layout.size()) + 1;
    open_span(SpanKind::kNoisyImage, n, image, partner);
    std::vector<bool> is_masked(n, false);
    for (std::size_t i : noisy.masked) is_masked[i] = true;
    for (std::size_t i = 0; i < n; ++i) {
      ex.tokens.push_back(noisy.tokens[i]);
      ex.positions.push_back(pos + static_cast<std::int32_t>(i));
      ex.diff_targets.push_back(is_masked[i] ? img.tokens[i] : -1);
    }
    ex.n_masked += noisy.masked.size();
    open_span(SpanKind::kCleanImage, n, image, -1);
    for (std::size_t i = 0; i < n; ++i) {
      clean_index.push_back(ex.tokens.size());
      ex.tokens.push_back(img.tokens[i]);
      ex.positions.push_back(pos++);
      ex.diff_targets.push_back(-1);
    }
    clean(v.eoi(), SpanKind::kSpecial);
    ++image;
  }
  clean(v.eos(), SpanKind::kSpecial);

  ex.ntp_targets.assign(ex.tokens.size(), -1);
  for (std::size_t j = 0; j + 1 < clean_index.size(); ++j)
    ex.ntp_targets[clean_index[j]] = ex.tokens[clean_index[j + 1]];
  validate_layout(ex.layout);
  return ex;
}

template <class T>
AdaptLoss adaptation_loss(const ModelParams<T>& params, const std::vector<AdaptExample>& batch,
                          const AdaptWeights& w, ModelParams<T>* grad) {
  const UnifiedVocab& v = params.config.vocab;
  double ntp_wsum = 0;
  std::size_t n_masked = 0;
  for (const AdaptExample& ex : batch) {
    n_masked += ex.n_masked;
    for (TokenId t : ex.ntp_targets)
      if (t >= 0) ntp_wsum += w.ntp.for_target(v, t);
  }
  if (n_masked == 0 && ntp_wsum == 0) throw EmptyBatch("adaptation batch has no targets");

  AdaptLoss out;
  out.n_masked = n_masked;
  double diff_sum = 0, ntp_sum = 0;
  for (const AdaptExample& ex : batch) {
    const std::size_t L = ex.tokens.size();
    LossSpec<T> spec;
    spec.targets.assign(L, -1);
    spec.weights.assign(L, T(0));
    std::vector<double> ntp_w(L, 0.0);
    for (std::size_t i = 0; i < L; ++i) {
      if (ex.diff_targets[i] >= 0) {
        spec.targets[i] = ex.diff_targets[i];
        spec.weights[i] = static_cast<T>(w.w_diff / static_cast<double>(n_masked));
      } else if (ex.ntp_targets[i] >= 0) {
        spec.targets[i] = ex.ntp_targets[i];
        ntp_w[i] = w.ntp.for_target(v, ex.ntp_targets[i]);
        spec.weights[i] = static_cast<T>(w.w_ntp * ntp_w[i] / ntp_wsum);
      }
    }
    std::vector<T> ce(L, T(0));
    const BlockMask mask = ex.mask();
    if (grad) {
      backward<T>(params, ex.tokens, ex.positions, mask, spec, *grad, &ce);
    } else {
      const Matrix<T> logits = forward<T>(params, ex.tokens, ex.positions, mask);
      for (std::size_t i = 0; i < L; ++i) {
        if (spec.targets[i] < 0) continue;
        const T* row = logits.row(i);
        double m = row[0];
        for (std::size_t j = 1; j < logits.cols; ++j) m = std::max(m, static_cast<double>(row[j]));
        double s = 0;
        for (std::size_t j = 0; j < logits.cols; ++j) s += std::exp(static_cast<double>(row[j]) - m);
        ce[i] = static_cast<T>(m + std::log(s) - static_cast<double>(row[spec.targets[i]]));
      }
    }
    for (std::size_t i = 0; i < L; ++i) {
      if (ex.diff_targets[i] >= 0) diff_sum += static_cast<double>(ce[i]);
      else if (ex.ntp_targets[i] >= 0) ntp_sum += ntp_w[i] * static_cast<double>(ce[i]);
    }
  }
  out.diff_loss = n_masked ? diff_sum / static_cast<double>(n_masked) : 0.0;
  out.ntp_loss = ntp_wsum > 0 ? ntp_sum / ntp_wsum : 0.0;
  out.loss = w.w_diff * out.diff_loss + w.w_ntp * out.ntp_loss;
  return out;
}

#define MMGEN_INSTANTIATE(T)                                                                       \
  template void denoise_step<T>(const ModelParams<T>&, KVCache<T>&, DenoiseState&,                 \
                                const DenoiseSchedule&, std::int32_t, const DecodeRule&, Rng&,     \
                                std::span<const TokenId>, ForwardCounter*);                        \
  template DidaResult<T> generate_image_dida<T>(const ModelParams<T>&, KVCache<T>&,                \
                                                std::span<const TokenId>, int, int,                \
                                                const DenoiseSchedule&, const DecodeRule&,         \
                                                std::uint64_t, std::int32_t);                      \
  template AdaptLoss adaptation_loss<T>(const ModelParams<T>&, const std::vector<AdaptExample>&,   \
                                        const AdaptWeights&, ModelParams<T>*);

MMGEN_INSTANTIATE(float)
MMGEN_INSTANTIATE(double)
#undef MMGEN_INSTANTIATE

}  // namespace mmgen
