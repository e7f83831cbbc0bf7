#pragma once

// Token choice from a logits row restricted to an id range.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mmgen/rng.hpp"
#include "mmgen/vocab.hpp"

namespace mmgen {

struct DecodeRule {
  enum class Mode : std::uint8_t { kGreedy, kTemperature, kTopK };
  Mode mode = Mode::kGreedy;
  double temperature = 1.0;
  int top_k = 0;

  // "greedy", "temp:T" or "topk:K". Throws ConfigError otherwise.
  static DecodeRule parse(std::string_view text);
  std::string name() const;
};

struct Choice {
  TokenId token = -1;
  double prob = 0;  // probability of the chosen token under the rule
};

// Picks among ids [lo, hi) plus, when `extra` >= 0, the single id `extra`.
// Greedy breaks ties toward the lower id and never touches the generator.
template <class T>
Choice choose(const T* logits, TokenId lo, TokenId hi, const DecodeRule& rule, Rng& rng,
              const std::vector<TokenId>& extra = {});

}  // namespace mmgen
