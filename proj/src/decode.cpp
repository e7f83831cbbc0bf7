#include "mmgen/decode.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "mmgen/errors.hpp"

namespace mmgen {

DecodeRule DecodeRule::parse(std::string_view text) {
  DecodeRule r;
  auto number = [&](std::string_view s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(std::string(s), &used);
      if (used != s.size()) throw ConfigError("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("bad decode rule: " + std::string(text));
    }
  };
  if (text == "greedy") return r;
  if (text.rfind("temp:", 0) == 0) {
    r.mode = Mode::kTemperature;
    r.temperature = number(text.substr(5));
    if (!(r.temperature > 0)) throw ConfigError("temperature must be positive");
    return r;
  }
  if (text.rfind("topk:", 0) == 0) {
    r.mode = Mode::kTopK;
    const double k = number(text.substr(5));
    if (k < 1 || k != std::floor(k)) throw ConfigError("top-k needs a positive integer");
    r.top_k = static_cast<int>(k);
    return r;
  }
  throw ConfigError("unknown decode rule: " + std::string(text));
}

std::string DecodeRule::name() const {
  switch (mode) {
    case Mode::kGreedy: return "greedy";
    case Mode::kTemperature: return "temp:" + std::to_string(temperature);
    case Mode::kTopK: return "topk:" + std::to_string(top_k);
  }
  return "greedy";
}

template <class T>
Choice choose(const T* logits, TokenId lo, TokenId hi, const DecodeRule& rule, Rng& rng,
              const std::vector<TokenId>& extra) {
  std::vector<TokenId> ids;
  for (TokenId t = lo; t < hi; ++t) ids.push_back(t);
  for (TokenId t : extra) ids.push_back(t);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.empty()) throw ConfigError("no legal token to choose from");

  const double temp = rule.mode == DecodeRule::Mode::kTemperature ? rule.temperature : 1.0;
  std::vector<double> z(ids.size());
  double m = -INFINITY;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    z[i] = static_cast<double>(logits[ids[i]]) / temp;
    m = std::max(m, z[i]);
  }
  double sum = 0;
  for (double& x : z) {
    x = std::exp(x - m);
    sum += x;
  }
  for (double& x : z) x /= sum;

  if (rule.mode == DecodeRule::Mode::kGreedy) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < z.size(); ++i)
      if (z[i] > z[best]) best = i;
    return {ids[best], z[best]};
  }
  std::vector<std::size_t> order(z.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (rule.mode == DecodeRule::Mode::kTopK) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(rule.top_k)));
    std::sort(order.begin(), order.end());
  }
  double mass = 0;
  for (std::size_t i : order) mass += z[i];
  double u = rng.uniform01() * mass;
  for (std::size_t i : order) {
    u -= z[i];
    if (u < 0) return {ids[i], z[i] / mass};
  }
  const std::size_t last = order.back();
  return {ids[last], z[last] / mass};
}

template Choice choose<float>(const float*, TokenId, TokenId, const DecodeRule&, Rng&,
                              const std::vector<TokenId>&);
template Choice choose<double>(const double*, TokenId, TokenId, const DecodeRule&, Rng&,
                               const std::vector<TokenId>&);

}  // namespace mmgen
