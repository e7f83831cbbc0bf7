#include "mmgen/infer.hpp"

#include <algorithm>
#include <chrono>

#include <nlohmann/json.hpp>

#include "mmgen/errors.hpp"

namespace mmgen {

StreamValidator::StreamValidator(UnifiedVocab vocab) : vocab_(std::move(vocab)) {}

bool StreamValidator::push(TokenId t) {
  if (state_ == StreamState::kInvalid) return false;
  auto fail = [&](std::string rule) {
    violation_ = StreamViolation{length_, std::move(rule)};
    state_ = StreamState::kInvalid;
    return false;
  };
  if (!vocab_.in_range(t)) return fail("id " + std::to_string(t) + " out of vocab");
  const TokenRole r = vocab_.classify(t);
  const bool special = r.kind == RoleKind::kSpecial;
  switch (state_) {
    case StreamState::kStart:
      if (!special || r.special != Special::kBos) return fail("expected BOS");
      state_ = StreamState::kText;
      break;
    case StreamState::kText:
      if (r.kind == RoleKind::kText) break;
      if (r.kind == RoleKind::kVision) return fail("vision token outside an image");
      if (r.special == Special::kEos) {
        state_ = StreamState::kDone;
        break;
      }
      if (r.special != Special::kBoi) return fail("stray " + vocab_.token_name(t));
      state_ = StreamState::kAfterBoi;
      break;
    case StreamState::kAfterBoi:
      if (!special || r.special != Special::kSizeRow) return fail("expected SIZE_ROW");
      rows_ = r.size;
      state_ = StreamState::kAfterSizeRow;
      break;
    case StreamState::kAfterSizeRow:
      if (!special || r.special != Special::kSizeCol) return fail("expected SIZE_COL");
      cols_ = r.size;
      cells_ = 0;
      state_ = StreamState::kCells;
      break;
    case StreamState::kCells:
      if (r.kind != RoleKind::kVision)
        return fail("image has " + std::to_string(cells_) + " tokens, expected " +
                    std::to_string(rows_ * cols_));
      if (++cells_ == static_cast<std::size_t>(rows_) * static_cast<std::size_t>(cols_))
        state_ = StreamState::kAwaitEoi;
      break;
    case StreamState::kAwaitEoi:
      if (r.kind == RoleKind::kVision) return fail("image exceeds its declared size");
      if (!special || r.special != Special::kEoi) return fail("expected EOI");
      ++images_;
      state_ = StreamState::kText;
      break;
    case StreamState::kDone:
      return fail("trailing tokens after EOS");
    case StreamState::kInvalid:
      return false;
  }
  ++length_;
  return true;
}

std::optional<StreamViolation> validate_stream(const UnifiedVocab& v, std::span<const TokenId> prefix) {
  StreamValidator s(v);
  for (TokenId t : prefix)
    if (!s.push(t)) break;
  return s.violation();
}

bool LegalSet::contains(TokenId t) const {
  return (t >= lo && t < hi) || std::find(extra.begin(), extra.end(), t) != extra.end();
}

LegalSet legal_next(const UnifiedVocab& v, const StreamValidator& s, std::size_t remaining,
                    std::size_t images_left, std::optional<std::pair<int, int>> force_size) {
  LegalSet out;
  if (remaining == 0) return out;
  std::vector<int> row_sizes = v.grid_sizes(), col_sizes = v.grid_sizes();
  if (force_size) {
    row_sizes = {force_size->first};
    col_sizes = {force_size->second};
  }
  // Tokens still needed after the size tokens: cells, EOI and the final EOS.
  auto fits = [&](int r, int c, std::size_t before_cells) {
    return before_cells + static_cast<std::size_t>(r) * static_cast<std::size_t>(c) + 2 <= remaining;
  };
  auto any_col_fits = [&](int r, std::size_t before_cells) {
    return std::any_of(col_sizes.begin(), col_sizes.end(),
                       [&](int c) { return v.supports_size(c) && fits(r, c, before_cells); });
  };
  switch (s.state()) {
    case StreamState::kStart:
      if (remaining >= 2) out.extra = {v.bos()};
      break;
    case StreamState::kText:
      out.extra = {v.eos()};
      if (remaining < 2) break;
      out.lo = v.text_begin();
      out.hi = v.text_end();
      if (images_left > 0 &&
          std::any_of(row_sizes.begin(), row_sizes.end(),
                      [&](int r) { return v.supports_size(r) && any_col_fits(r, 3); }))
        out.extra.push_back(v.boi());
      break;
    case StreamState::kAfterBoi:
      for (int r : row_sizes)
        if (v.supports_size(r) && any_col_fits(r, 2)) out.extra.push_back(v.size_row(r));
      break;
    case StreamState::kAfterSizeRow:
      for (int c : col_sizes)
        if (v.supports_size(c) && fits(s.rows(), c, 1)) out.extra.push_back(v.size_col(c));
      break;
    case StreamState::kCells:
      out.lo = v.vision_begin();
      out.hi = v.vision_end();
      break;
    case StreamState::kAwaitEoi:
      out.extra = {v.eoi()};
      break;
    case StreamState::kDone:
    case StreamState::kInvalid:
      break;
  }
  std::sort(out.extra.begin(), out.extra.end());
  return out;
}

GenMode parse_gen_mode(std::string_view text) {
  if (text == "ar") return GenMode::kAr;
  if (text == "dida" || text == "hybrid") return GenMode::kHybrid;
  throw ConfigError("unknown generation mode: " + std::string(text));
}

std::string_view gen_mode_name(GenMode m) { return m == GenMode::kAr ? "ar" : "dida"; }

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::kTextDecode: return "TextDecode";
    case Phase::kImageSizePending: return "ImageSizePending";
    case Phase::kImageDenoise: return "ImageDenoise";
    case Phase::kImageCommit: return "ImageCommit";
    case Phase::kDone: return "Done";
  }
  return "?";
}

bool transition_allowed(Phase from, Phase to) {
  switch (from) {
    case Phase::kTextDecode: return to == Phase::kImageSizePending || to == Phase::kDone;
    case Phase::kImageSizePending: return to == Phase::kImageDenoise || to == Phase::kDone;
    case Phase::kImageDenoise: return to == Phase::kImageDenoise || to == Phase::kImageCommit;
    case Phase::kImageCommit: return to == Phase::kTextDecode;
    case Phase::kDone: return false;
  }
  return false;
}

nlohmann::json GenStats::to_json() const {
  return {{"text_forwards", text_forwards},
          {"denoise_forwards", denoise_forwards},
          {"commit_forwards", commit_forwards},
          {"image_block_forwards", image_block_forwards},
          {"total_forwards", total_forwards()},
          {"generated_tokens", generated_tokens},
          {"images", images},
          {"wall_time_ms", wall_time_ms}};
}

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

template <class T>
GenSession<T>::GenSession(const ModelParams<T>& params, std::vector<TokenId> prompt, GenConfig cfg)
    : params_(params),
      cfg_(std::move(cfg)),
      validator_(params.config.vocab),
      cache_(KVCache<T>::empty(params.config)),
      rng_(cfg_.seed) {
  if (prompt.empty()) throw ParseError(0, "prompt must start with BOS");
  for (TokenId t : prompt)
    if (!validator_.push(t))
      throw ParseError(validator_.violation()->position, validator_.violation()->rule);
  const std::size_t ctx = static_cast<std::size_t>(params.config.max_seq_len);
  max_new_ = std::min(cfg_.budgets.max_tokens, prompt.size() < ctx ? ctx - prompt.size() : 0);
  result_.prompt_length = prompt.size();
  result_.tokens = prompt;
  unfed_ = std::move(prompt);

  if (validator_.complete()) {
    enter(Phase::kDone);
    return;
  }
  const StreamState st = validator_.state();
  if (cfg_.mode == GenMode::kHybrid && st == StreamState::kCells) {
    if (validator_.cells() != 0) throw ConfigError("hybrid prompts must not end inside image cells");
    enter(Phase::kImageSizePending);
    const auto n = static_cast<std::size_t>(validator_.rows()) * validator_.cols();
    if (n + 2 > remaining()) {
      result_.truncated = true;
      enter(Phase::kDone);
      return;
    }
    result_.images.push_back({result_.tokens.size(), validator_.rows(), validator_.cols(), {}, 0, 0});
    schedule_ = DenoiseSchedule::cosine(n, std::min(cfg_.denoise_steps, n));
    image_ = DenoiseState::init(n, params_.config.vocab.mask());
    image_rng_.emplace(Rng::derive(cfg_.seed, 1 + result_.images.size()));
    enter(Phase::kImageDenoise, 1);
    return;
  }
  const bool pending = st == StreamState::kAfterBoi || st == StreamState::kAfterSizeRow;
  enter(cfg_.mode == GenMode::kHybrid && pending ? Phase::kImageSizePending : Phase::kTextDecode);
}

template <class T>
void GenSession<T>::enter(Phase p, std::size_t step) {
  phase_ = p;
  result_.trace.push_back({p, step, result_.tokens.size()});
}

template <class T>
std::size_t GenSession<T>::remaining() const {
  return max_new_ - result_.stats.generated_tokens;
}

template <class T>
std::int32_t GenSession<T>::next_position() const {
  return static_cast<std::int32_t>(cache_.length() + unfed_.size());
}

template <class T>
void GenSession<T>::emit(TokenId t) {
  if (!validator_.push(t)) throw ParseError(validator_.violation()->position, validator_.violation()->rule);
  result_.tokens.push_back(t);
  ++result_.stats.generated_tokens;
}

template <class T>
void GenSession<T>::step() {
  const auto t0 = Clock::now();
  switch (phase_) {
    case Phase::kTextDecode:
    case Phase::kImageSizePending: sequential_step(); break;
    case Phase::kImageDenoise: denoise(); break;
    case Phase::kImageCommit: commit(); break;
    case Phase::kDone: return;
  }
  result_.stats.wall_time_ms += ms_since(t0);
}

template <class T>
void GenSession<T>::sequential_step() {
  const UnifiedVocab& v = params_.config.vocab;
  const std::size_t images_left =
      cfg_.budgets.max_images > result_.stats.images ? cfg_.budgets.max_images - result_.stats.images : 0;
  const LegalSet legal = legal_next(v, validator_, remaining(), images_left, cfg_.force_size);
  if (legal.empty()) {
    result_.truncated = true;
    enter(Phase::kDone);
    return;
  }
  const auto t0 = Clock::now();
  const bool cell = validator_.state() == StreamState::kCells;
  const std::size_t image_start = result_.tokens.size() - validator_.cells();
  if (cell && (result_.images.empty() || result_.images.back().offset != image_start)) {
    result_.images.push_back({image_start, validator_.rows(), validator_.cols(), {}, 0, 0});
    auto& prefilled = result_.images.back().tokens;
    prefilled.assign(result_.tokens.begin() + static_cast<std::ptrdiff_t>(image_start), result_.tokens.end());
  }

  std::vector<std::int32_t> positions(unfed_.size());
  for (std::size_t i = 0; i < unfed_.size(); ++i)
    positions[i] = static_cast<std::int32_t>(cache_.length() + i);
  const Matrix<T> logits =
      forward_with_cache<T>(params_, cache_, unfed_, positions,
                            causal_mask(cache_.length() + unfed_.size()), unfed_.size());
  ++result_.stats.text_forwards;
  const Choice c = choose<T>(logits.row(logits.rows - 1), legal.lo, legal.hi, cfg_.rule, rng_, legal.extra);
  unfed_.assign(1, c.token);
  emit(c.token);

  if (cell) {
    GeneratedImage& img = result_.images.back();
    img.tokens.push_back(c.token);
    ++img.block_forwards;
    ++result_.stats.image_block_forwards;
    img.wall_time_ms += ms_since(t0);
    if (validator_.state() == StreamState::kAwaitEoi) ++result_.stats.images;
  }
  if (validator_.complete()) {
    enter(Phase::kDone);
    return;
  }
  if (cfg_.mode != GenMode::kHybrid) return;
  if (c.token == v.boi()) {
    enter(Phase::kImageSizePending);
  } else if (validator_.state() == StreamState::kCells) {
    const auto n = static_cast<std::size_t>(validator_.rows()) * validator_.cols();
    result_.images.push_back({result_.tokens.size(), validator_.rows(), validator_.cols(), {}, 0, 0});
    schedule_ = DenoiseSchedule::cosine(n, std::min(cfg_.denoise_steps, n));
    image_ = DenoiseState::init(n, v.mask());
    image_rng_.emplace(Rng::derive(cfg_.seed, 1 + result_.images.size()));
    enter(Phase::kImageDenoise, 1);
  }
}

template <class T>
void GenSession<T>::denoise() {
  const auto t0 = Clock::now();
  const std::int32_t first = next_position();
  ForwardCounter fc;
  denoise_step<T>(params_, cache_, *image_, *schedule_, first, cfg_.rule, *image_rng_, unfed_, &fc);
  unfed_.clear();
  result_.stats.denoise_forwards += fc.calls;
  result_.stats.image_block_forwards += fc.calls;
  GeneratedImage& img = result_.images.back();
  img.block_forwards += fc.calls;
  img.wall_time_ms += ms_since(t0);
  if (image_->step == schedule_->steps)
    enter(Phase::kImageCommit);
  else
    enter(Phase::kImageDenoise, image_->step + 1);
}

template <class T>
void GenSession<T>::commit() {
  const auto t0 = Clock::now();
  const std::vector<TokenId>& grid = image_->tokens;
  const std::size_t n = grid.size();
  std::vector<std::int32_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<std::int32_t>(cache_.length() + i);
  const Matrix<T> logits =
      forward_with_cache<T>(params_, cache_, grid, positions, causal_mask(cache_.length() + n), n);
  ++result_.stats.commit_forwards;
  ++result_.stats.image_block_forwards;
  for (TokenId t : grid) emit(t);
  ++result_.stats.images;
  GeneratedImage& img = result_.images.back();
  img.tokens = grid;
  ++img.block_forwards;

  const LegalSet legal = legal_next(params_.config.vocab, validator_, remaining(), 0, cfg_.force_size);
  const Choice c = choose<T>(logits.row(n - 1), legal.lo, legal.hi, cfg_.rule, rng_, legal.extra);
  emit(c.token);
  unfed_.assign(1, c.token);
  img.wall_time_ms += ms_since(t0);
  image_.reset();
  schedule_.reset();
  enter(Phase::kTextDecode);
}

template <class T>
GenResult generate(const ModelParams<T>& params, const std::vector<TokenId>& prompt,
                   const GenConfig& cfg) {
  GenSession<T> s(params, prompt, cfg);
  while (!s.done()) s.step();
  return s.result();
}

template <class T>
GenResult generate_ar(const ModelParams<T>& params, const std::vector<TokenId>& prompt,
                      const DecodeRule& rule, const Budgets& budgets, std::uint64_t seed,
                      std::optional<std::pair<int, int>> force_size) {
  GenConfig cfg;
  cfg.mode = GenMode::kAr;
  cfg.rule = rule;
  cfg.budgets = budgets;
  cfg.seed = seed;
  cfg.force_size = force_size;
  return generate(params, prompt, cfg);
}

template <class T>
GenResult generate_hybrid(const ModelParams<T>& params, const std::vector<TokenId>& prompt,
                          const DecodeRule& rule, std::size_t denoise_steps,
                          const Budgets& budgets, std::uint64_t seed,
                          std::optional<std::pair<int, int>> force_size) {
  GenConfig cfg;
  cfg.mode = GenMode::kHybrid;
  cfg.rule = rule;
  cfg.denoise_steps = denoise_steps;
  cfg.budgets = budgets;
  cfg.seed = seed;
  cfg.force_size = force_size;
  return generate(params, prompt, cfg);
}

template <class T>
std::vector<GenResult> run_requests(const ModelParams<T>& params,
                                    const std::vector<std::vector<TokenId>>& prompts,
                                    const GenConfig& cfg) {
  std::vector<GenSession<T>> sessions;
  sessions.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    GenConfig c = cfg;
    c.seed = Rng::derive(cfg.seed, i);
    sessions.emplace_back(params, prompts[i], c);
  }
  for (bool active = true; active;) {
    active = false;
    for (auto& s : sessions)
      if (!s.done()) {
        s.step();
        active = true;
      }
  }
  std::vector<GenResult> out;
  for (const auto& s : sessions) out.push_back(s.result());
  return out;
}

#define MMGEN_INSTANTIATE(T)                                                                      \
  template class GenSession<T>;                                                                   \
  template GenResult generate<T>(const ModelParams<T>&, const std::vector<TokenId>&,              \
                                 const GenConfig&);                                               \
  template GenResult generate_ar<T>(const ModelParams<T>&, const std::vector<TokenId>&,           \
                                    const DecodeRule&, const Budgets&, std::uint64_t,             \
                                    std::optional<std::pair<int, int>>);                          \
  template GenResult generate_hybrid<T>(const ModelParams<T>&, const std::vector<TokenId>&,       \
                                        const DecodeRule&, std::size_t, const Budgets&,           \
                                        std::uint64_t, std::optional<std::pair<int, int>>);       \
  template std::vector<GenResult> run_requests<T>(const ModelParams<T>&,                          \
                                                  const std::vector<std::vector<TokenId>>&,       \
                                                  const GenConfig&);

MMGEN_INSTANTIATE(float)
MMGEN_INSTANTIATE(double)
#undef MMGEN_INSTANTIATE

}  // namespace mmgen
