#pragma once

// Decoder-only transformer: grouped-query attention with QK-Norm and rotary
// embeddings, SwiGLU MLP, RMSNorm pre-normalization, output head tied to the
// token embedding. Templated on the scalar type so gradients can be checked
// in double while benchmarks run in float.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmgen/mask.hpp"
#include "mmgen/tensor.hpp"
#include "mmgen/vocab.hpp"

namespace mmgen {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int d_intermediate = 320;
  int n_heads_q = 8;
  int n_heads_kv = 2;
  double rope_base = 10000.0;
  int max_seq_len = 512;
  double rmsnorm_eps = 1e-6;
  // Present for completeness; the forward pass is deterministic and ignores it.
  double dropout = 0.0;
  UnifiedVocab vocab;

  int head_dim() const { return d_model / n_heads_q; }
  int q_dim() const { return d_model; }
  int kv_dim() const { return n_heads_kv * head_dim(); }
  int vocab_size() const { return vocab.total_size(); }
  // Throws ShapeError when the head split or dimensions are inconsistent.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool decay = false;  // receives weight decay
  std::size_t size() const { return rows * cols; }
};

struct LayerOffsets {
  std::size_t attn_norm, wq, wk, wv, q_norm, k_norm, wo, mlp_norm, w_gate, w_up, w_down;
};

// Fixed parameter order: embedding, then per layer attn_norm, wq, wk, wv,
// q_norm, k_norm, wo, mlp_norm, w_gate, w_up, w_down, then final_norm.
// Projection matrices are [in_features x out_features], row-major, so a
// layer computes Y = X W. The embedding is [vocab x d_model].
struct ParamLayout {
  std::size_t embedding = 0;
  std::size_t final_norm = 0;
  std::vector<LayerOffsets> layers;
  std::vector<TensorSlot> slots;
  std::size_t total = 0;

  static ParamLayout build(const ModelConfig& cfg);
};

template <class T>
struct ModelParams {
  ModelConfig config;
  ParamLayout layout;
  std::vector<T> values;

  static ModelParams zeros(const ModelConfig& cfg);
  // Embedding ~ N(0, 0.02); projections ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norms = 1.
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  T* at(std::size_t offset) { return values.data() + offset; }
  const T* at(std::size_t offset) const { return values.data() + offset; }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out{config, layout, std::vector<U>(values.begin(), values.end())};
    return out;
  }
  void fill(T v) { std::fill(values.begin(), values.end(), v); }
};

// Keys and values of a committed prefix, per layer. Keys are stored after
// QK-Norm and rotation, so the cache is only valid for the positions recorded.
template <class T>
struct KVCache {
  int n_layers = 0;
  int kv_dim = 0;
  std::vector<std::vector<T>> k;
  std::vector<std::vector<T>> v;
  std::vector<std::int32_t> positions;

  static KVCache empty(const ModelConfig& cfg);
  std::size_t length() const { return positions.size(); }
  void truncate(std::size_t n);
  bool operator==(const KVCache&) const = default;
};

// Counts forward invocations and the query rows they processed.
struct ForwardCounter {
  std::size_t calls = 0;
  std::size_t rows = 0;
};

template <class T>
struct LossSpec {
  std::vector<TokenId> targets;  // -1 marks a position without a target
  std::vector<T> weights;
};

// Logits [len x vocab] for all positions. Throws ShapeError on mismatched
// inputs and NumericsError on non-finite activations.
template <class T>
Matrix<T> forward(const ModelParams<T>& params, std::span<const TokenId> tokens,
                  std::span<const std::int32_t> positions, const BlockMask& mask);

// Runs the new rows against the cached prefix. The mask covers
// cache.length() + tokens.size() positions; only new query rows are evaluated.
// The first `commit_rows` new rows are appended to the cache, the remainder
// are read-only (denoising). Throws CacheError if a committed position is
// already cached.
template <class T>
Matrix<T> forward_with_cache(const ModelParams<T>& params, KVCache<T>& cache,
                             std::span<const TokenId> tokens,
                             std::span<const std::int32_t> positions, const BlockMask& mask,
                             std::size_t commit_rows, ForwardCounter* counter = nullptr);

// Accumulates d(loss)/d(params) into grad and returns
// loss = sum_i weights[i] * CE(logits[i], targets[i]). When `ce` is given it
// receives the unweighted cross-entropy of every position with a target.
template <class T>
T backward(const ModelParams<T>& params, std::span<const TokenId> tokens,
           std::span<const std::int32_t> positions, const BlockMask& mask,
           const LossSpec<T>& loss, ModelParams<T>& grad, std::vector<T>* ce = nullptr);

// Rotates consecutive (even, odd) pairs of every head_dim-wide head in each
// row by position * base^(-2i/head_dim). Throws ShapeError on an odd head_dim.
template <class T>
Matrix<T> apply_rope(const Matrix<T>& x, std::span<const std::int32_t> positions, double base,
                     std::size_t head_dim);

// Checkpoint: 8-byte little-endian header length, JSON header (config and
// tensor table with byte offsets), then float32 little-endian values in
// ParamLayout order.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params);
template <class T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace mmgen
