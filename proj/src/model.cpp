#include "mmgen/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>

#include <nlohmann/json.hpp>

#include "mmgen/errors.hpp"
#include "mmgen/rng.hpp"
#include "mmgen/simd.hpp"

namespace mmgen {

// ---------------------------------------------------------------------------
// Configuration and parameter layout

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || d_intermediate < 1 || n_heads_q < 1 || n_heads_kv < 1)
    throw ShapeError("model dimensions must be positive");
  if (n_heads_q % n_heads_kv != 0) throw ShapeError("n_heads_q must be divisible by n_heads_kv");
  if (d_model % n_heads_q != 0) throw ShapeError("d_model must equal n_heads_q * head_dim");
  if (head_dim() % 2 != 0) throw ShapeError("head_dim must be even for rotary embeddings");
  if (max_seq_len < 1) throw ShapeError("max_seq_len must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},       {"d_model", d_model},
          {"d_intermediate", d_intermediate}, {"n_heads_q", n_heads_q},
          {"n_heads_kv", n_heads_kv},   {"rope_base", rope_base},
          {"max_seq_len", max_seq_len}, {"rmsnorm_eps", rmsnorm_eps},
          {"dropout", dropout},         {"vocab", vocab.to_json()}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.d_intermediate = j.value("d_intermediate", c.d_intermediate);
  c.n_heads_q = j.value("n_heads_q", c.n_heads_q);
  c.n_heads_kv = j.value("n_heads_kv", c.n_heads_kv);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.rmsnorm_eps = j.value("rmsnorm_eps", c.rmsnorm_eps);
  c.dropout = j.value("dropout", c.dropout);
  if (j.contains("vocab")) c.vocab = UnifiedVocab::from_json(j.at("vocab"));
  c.validate();
  return c;
}

ParamLayout ParamLayout::build(const ModelConfig& cfg) {
  cfg.validate();
  ParamLayout p;
  const std::size_t d = cfg.d_model, di = cfg.d_intermediate, hd = cfg.head_dim();
  const std::size_t kvd = cfg.kv_dim(), V = cfg.vocab_size();
  auto add = [&](const std::string& name, std::size_t rows, std::size_t cols, bool decay) {
    p.slots.push_back({name, p.total, rows, cols, decay});
    const std::size_t off = p.total;
    p.total += rows * cols;
    return off;
  };
  p.embedding = add("embedding", V, d, true);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    LayerOffsets o{};
    o.attn_norm = add(pre + "attn_norm", 1, d, false);
    o.wq = add(pre + "wq", d, d, true);
    o.wk = add(pre + "wk", d, kvd, true);
    o.wv = add(pre + "wv", d, kvd, true);
    o.q_norm = add(pre + "q_norm", 1, hd, false);
    o.k_norm = add(pre + "k_norm", 1, hd, false);
    o.wo = add(pre + "wo", d, d, true);
    o.mlp_norm = add(pre + "mlp_norm", 1, d, false);
    o.w_gate = add(pre + "w_gate", d, di, true);
    o.w_up = add(pre + "w_up", d, di, true);
    o.w_down = add(pre + "w_down", di, d, true);
    p.layers.push_back(o);
  }
  p.final_norm = add("final_norm", 1, d, false);
  return p;
}

template <class T>
ModelParams<T> ModelParams<T>::zeros(const ModelConfig& cfg) {
  ModelParams<T> p{cfg, ParamLayout::build(cfg), {}};
  p.values.assign(p.layout.total, T(0));
  return p;
}

template <class T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<T> p = zeros(cfg);
  Rng rng(seed);
  for (const TensorSlot& s : p.layout.slots) {
    T* w = p.at(s.offset);
    if (s.rows == 1) {
      std::fill(w, w + s.size(), T(1));
    } else if (s.name == "embedding") {
      for (std::size_t i = 0; i < s.size(); ++i) w[i] = static_cast<T>(0.02 * rng.normal());
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(s.rows));
      for (std::size_t i = 0; i < s.size(); ++i)
        w[i] = static_cast<T>((2.0 * rng.uniform01() - 1.0) * bound);
    }
  }
  return p;
}

template <class T>
KVCache<T> KVCache<T>::empty(const ModelConfig& cfg) {
  KVCache<T> c;
  c.n_layers = cfg.n_layers;
  c.kv_dim = cfg.kv_dim();
  c.k.resize(cfg.n_layers);
  c.v.resize(cfg.n_layers);
  return c;
}

template <class T>
void KVCache<T>::truncate(std::size_t n) {
  if (n > length()) throw CacheError("cannot truncate cache beyond its length");
  positions.resize(n);
  for (int l = 0; l < n_layers; ++l) {
    k[l].resize(n * kv_dim);
    v[l].resize(n * kv_dim);
  }
}

// ---------------------------------------------------------------------------
// Building blocks

namespace {

template <class T>
struct RopeTable {
  std::size_t half = 0;
  std::vector<T> cos, sin;  // [rows x half]
};

template <class T>
RopeTable<T> rope_table(std::span<const std::int32_t> positions, double base, std::size_t hd) {
  RopeTable<T> t;
  t.half = hd / 2;
  t.cos.resize(positions.size() * t.half);
  t.sin.resize(positions.size() * t.half);
  std::vector<double> freq(t.half);
  for (std::size_t i = 0; i < t.half; ++i)
    freq[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
  for (std::size_t r = 0; r < positions.size(); ++r)
    for (std::size_t i = 0; i < t.half; ++i) {
      const double a = static_cast<double>(positions[r]) * freq[i];
      t.cos[r * t.half + i] = static_cast<T>(std::cos(a));
      t.sin[r * t.half + i] = static_cast<T>(std::sin(a));
    }
  return t;
}

// In-place rotation of every head in `rows` rows of width n_heads * hd.
// inverse = true applies the transpose rotation (used for gradients).
template <class T>
void rotate(T* x, std::size_t rows, std::size_t n_heads, std::size_t hd, const RopeTable<T>& t,
            bool inverse) {
  const std::size_t width = n_heads * hd;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* c = t.cos.data() + r * t.half;
    const T* s = t.sin.data() + r * t.half;
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* v = x + r * width + h * hd;
      for (std::size_t i = 0; i < t.half; ++i) {
        const T a = v[2 * i], b = v[2 * i + 1];
        const T sn = inverse ? -s[i] : s[i];
        v[2 * i] = a * c[i] - b * sn;
        v[2 * i + 1] = a * sn + b * c[i];
      }
    }
  }
}

// y = x * inv_rms(x) * g over segments of width `width`; stores inv per segment.
template <class T>
void rmsnorm(const T* x, std::size_t segments, std::size_t width, const T* g, T eps, T* y,
             T* inv_out) {
  const auto& kern = simd::active_kernels<T>();
  for (std::size_t s = 0; s < segments; ++s) {
    const T* xs = x + s * width;
    T* ys = y + s * width;
    const T ms = kern.dot(xs, xs, width) / static_cast<T>(width);
    const T inv = T(1) / std::sqrt(ms + eps);
    if (inv_out) inv_out[s] = inv;
    for (std::size_t i = 0; i < width; ++i) ys[i] = xs[i] * inv * g[i];
  }
}

// Given dy for y = x * inv * g, accumulate dg and write dx (overwrite).
template <class T>
void rmsnorm_backward(const T* x, const T* inv, std::size_t segments, std::size_t width,
                      const T* g, const T* dy, T* dx, T* dg) {
  std::vector<T> u(width);
  for (std::size_t s = 0; s < segments; ++s) {
    const T* xs = x + s * width;
    const T* dys = dy + s * width;
    T* dxs = dx + s * width;
    const T r = inv[s];
    T xu = 0;
    for (std::size_t i = 0; i < width; ++i) {
      dg[i] += dys[i] * xs[i] * r;
      u[i] = g[i] * dys[i];
      xu += xs[i] * u[i];
    }
    const T coef = r * r * r * xu / static_cast<T>(width);
    for (std::size_t i = 0; i < width; ++i) dxs[i] = r * u[i] - xs[i] * coef;
  }
}

template <class T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

template <class T>
void check_finite(const Matrix<T>& m, const char* what) {
  for (const T v : m.data)
    if (!std::isfinite(v)) throw NumericsError(std::string("non-finite value in ") + what);
}

// Key/value rows come from the cache (indices < cache_len) or from the rows
// computed in this call.
template <class T>
struct KeySource {
  const T* cache_k = nullptr;
  const T* cache_v = nullptr;
  std::size_t cache_len = 0;
  const T* new_k = nullptr;
  const T* new_v = nullptr;
  std::size_t kvd = 0;

  const T* k(std::size_t j) const {
    return j < cache_len ? cache_k + j * kvd : new_k + (j - cache_len) * kvd;
  }
  const T* v(std::size_t j) const {
    return j < cache_len ? cache_v + j * kvd : new_v + (j - cache_len) * kvd;
  }
};

template <class T>
struct AttnBlockTrace {
  std::size_t r0 = 0, r1 = 0;  // evaluated query rows (global indices)
  std::size_t n_fixed = 0;
  std::optional<std::size_t> tail_begin;
  std::vector<std::size_t> keys;
  std::vector<Matrix<T>> probs;  // per kv group, [(r1 - r0) * heads_per_group x keys]

  std::size_t keys_for(std::size_t q) const {
    return n_fixed + (tail_begin ? q - *tail_begin + 1 : 0);
  }
};

template <class T>
AttnBlockTrace<T> block_keys(const QueryBlock& b, std::size_t r0, std::size_t r1) {
  AttnBlockTrace<T> t;
  t.r0 = r0;
  t.r1 = r1;
  for (const KeyRange& kr : b.ranges)
    for (std::size_t j = kr.begin; j < kr.end; ++j) t.keys.push_back(j);
  t.n_fixed = t.keys.size();
  t.tail_begin = b.tail_begin;
  if (b.tail_begin)
    for (std::size_t j = *b.tail_begin; j < r1; ++j) t.keys.push_back(j);
  return t;
}

// Scaled dot-product attention for query rows [q_off, q_off + n_q). Keys of a
// query block are gathered into contiguous buffers and queries are processed
// in chunks. Scores past a query's last reachable key are never read and its
// probabilities there are exactly zero, so each output depends only on the
// keys the query reaches, in ascending order.
constexpr std::size_t kQueryChunk = 64;

template <class T>
void attend(const ModelConfig& cfg, const BlockMask& mask, std::size_t q_off, std::size_t n_q,
            const T* q, const KeySource<T>& src, T* out,
            std::vector<AttnBlockTrace<T>>* trace) {
  const std::size_t hd = cfg.head_dim(), G = cfg.n_heads_kv;
  const std::size_t hpg = cfg.n_heads_q / G, qd = cfg.q_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto& kern = simd::active_kernels<T>();
  std::vector<T> kct, vc, s, qb, ob;
  for (const QueryBlock& b : mask.blocks()) {
    const std::size_t r0 = std::max(b.q_begin, q_off);
    const std::size_t r1 = std::min(b.q_end, q_off + n_q);
    if (r0 >= r1) continue;
    AttnBlockTrace<T> rec = block_keys<T>(b, r0, r1);
    const std::size_t n = rec.keys.size();
    kct.resize(hd * n);
    vc.resize(n * hd);
    if (trace) rec.probs.assign(G, Matrix<T>((r1 - r0) * hpg, n));
    for (std::size_t g = 0; g < G; ++g) {
      for (std::size_t j = 0; j < n; ++j) {
        const T* kr = src.k(rec.keys[j]) + g * hd;
        const T* vr = src.v(rec.keys[j]) + g * hd;
        std::copy(vr, vr + hd, vc.data() + j * hd);
        for (std::size_t e = 0; e < hd; ++e) kct[e * n + j] = kr[e];
      }
      for (std::size_t c0 = r0; c0 < r1; c0 += kQueryChunk) {
        const std::size_t c1 = std::min(c0 + kQueryChunk, r1);
        const std::size_t nc = rec.keys_for(c1 - 1), R = (c1 - c0) * hpg;
        qb.resize(R * hd);
        s.resize(R * nc);
        ob.resize(R * hd);
        for (std::size_t qi = c0; qi < c1; ++qi) {
          const T* qg = q + (qi - q_off) * qd + g * hpg * hd;
          std::copy(qg, qg + hpg * hd, qb.data() + (qi - c0) * hpg * hd);
        }
        matmul_nn(qb.data(), hd, kct.data(), n, s.data(), nc, R, nc, hd, false);
        for (std::size_t qi = c0; qi < c1; ++qi) {
          const std::size_t nq = rec.keys_for(qi);
          if (nq == 0) throw NumericsError("query row reaches no keys");
          for (std::size_t h = 0; h < hpg; ++h) {
            T* row = s.data() + ((qi - c0) * hpg + h) * nc;
            kern.softmax(row, nq, scale);
            std::fill(row + nq, row + nc, T(0));
            if (trace) std::copy(row, row + nq, rec.probs[g].row((qi - r0) * hpg + h));
          }
        }
        matmul_nn(s.data(), nc, vc.data(), hd, ob.data(), hd, R, hd, nc, false);
        for (std::size_t qi = c0; qi < c1; ++qi) {
          const T* src_row = ob.data() + (qi - c0) * hpg * hd;
          std::copy(src_row, src_row + hpg * hd, out + (qi - q_off) * qd + g * hpg * hd);
        }
      }
    }
    if (trace) trace->push_back(std::move(rec));
  }
}

template <class T>
struct LayerTrace {
  Matrix<T> x_in, h1, q_pre, k_pre, q, k, v, attn, x_mid, h2, gate, up, act;
  std::vector<T> inv1, inv2, q_inv, k_inv;
  std::vector<AttnBlockTrace<T>> blocks;
};

template <class T>
struct ForwardTrace {
  std::vector<LayerTrace<T>> layers;
  Matrix<T> x_final, h_final;
  std::vector<T> inv_final;
  RopeTable<T> rope;
};


// Shared forward pass. With a cache, rows are queries at global index
// cache_len + i; keys/values of the new rows are returned via new_k/new_v.
template <class T>
Matrix<T> run_forward(const ModelParams<T>& p, const KVCache<T>* cache,
                      std::span<const TokenId> tokens, std::span<const std::int32_t> positions,
                      const BlockMask& mask, ForwardTrace<T>* trace,
                      std::vector<Matrix<T>>* new_k, std::vector<Matrix<T>>* new_v) {
  const ModelConfig& cfg = p.config;
  const std::size_t L = tokens.size(), d = cfg.d_model, di = cfg.d_intermediate;
  const std::size_t hd = cfg.head_dim(), Hq = cfg.n_heads_q, Hkv = cfg.n_heads_kv;
  const std::size_t qd = cfg.q_dim(), kvd = cfg.kv_dim(), V = cfg.vocab_size();
  const std::size_t cache_len = cache ? cache->length() : 0;
  const T eps = static_cast<T>(cfg.rmsnorm_eps);

  if (L == 0) throw ShapeError("forward needs at least one token");
  if (positions.size() != L) throw ShapeError("tokens and positions differ in length");
  if (mask.seq_len() != cache_len + L)
    throw ShapeError("mask covers " + std::to_string(mask.seq_len()) + " positions, expected " +
                     std::to_string(cache_len + L));
  for (TokenId t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= V)
      throw OutOfVocab("token id " + std::to_string(t) + " outside model vocab");

  const RopeTable<T> rope = rope_table<T>(positions, cfg.rope_base, hd);

  Matrix<T> x(L, d);
  for (std::size_t i = 0; i < L; ++i) {
    const T* e = p.at(p.layout.embedding) + static_cast<std::size_t>(tokens[i]) * d;
    std::copy(e, e + d, x.row(i));
  }
  if (trace) trace->layers.resize(cfg.n_layers);
  if (new_k) {
    new_k->resize(cfg.n_layers);
    new_v->resize(cfg.n_layers);
  }

  Matrix<T> h(L, d), q(L, qd), k(L, kvd), v(L, kvd), attn(L, qd), o(L, d);
  Matrix<T> gate(L, di), up(L, di), act(L, di);
  std::vector<T> inv1(L), inv2(L), q_inv(L * Hq), k_inv(L * Hkv);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerOffsets& w = p.layout.layers[l];
    LayerTrace<T>* lt = trace ? &trace->layers[l] : nullptr;
    if (lt) lt->x_in = x;

    rmsnorm(x.row(0), L, d, p.at(w.attn_norm), eps, h.row(0), inv1.data());
    matmul_nn(h.row(0), d, p.at(w.wq), qd, q.row(0), qd, L, qd, d, false);
    matmul_nn(h.row(0), d, p.at(w.wk), kvd, k.row(0), kvd, L, kvd, d, false);
    matmul_nn(h.row(0), d, p.at(w.wv), kvd, v.row(0), kvd, L, kvd, d, false);
    if (lt) {
      lt->h1 = h;
      lt->inv1 = inv1;
      lt->q_pre = q;
      lt->k_pre = k;
    }
    rmsnorm(q.row(0), L * Hq, hd, p.at(w.q_norm), eps, q.row(0), q_inv.data());
    rmsnorm(k.row(0), L * Hkv, hd, p.at(w.k_norm), eps, k.row(0), k_inv.data());
    rotate(q.row(0), L, Hq, hd, rope, false);
    rotate(k.row(0), L, Hkv, hd, rope, false);

    KeySource<T> src;
    src.kvd = kvd;
    src.cache_len = cache_len;
    if (cache) {
      src.cache_k = cache->k[l].data();
      src.cache_v = cache->v[l].data();
    }
    src.new_k = k.row(0);
    src.new_v = v.row(0);
    attend(cfg, mask, cache_len, L, q.row(0), src, attn.row(0), lt ? &lt->blocks : nullptr);
    if (lt) {
      lt->q_inv = q_inv;
      lt->k_inv = k_inv;
      lt->q = q;
      lt->k = k;
      lt->v = v;
      lt->attn = attn;
    }
    if (new_k) {
      (*new_k)[l] = k;
      (*new_v)[l] = v;
    }

    matmul_nn(attn.row(0), qd, p.at(w.wo), d, o.row(0), d, L, d, qd, false);
    for (std::size_t i = 0; i < L * d; ++i) x.data[i] += o.data[i];
    if (lt) lt->x_mid = x;

    rmsnorm(x.row(0), L, d, p.at(w.mlp_norm), eps, h.row(0), inv2.data());
    matmul_nn(h.row(0), d, p.at(w.w_gate), di, gate.row(0), di, L, di, d, false);
    matmul_nn(h.row(0), d, p.at(w.w_up), di, up.row(0), di, L, di, d, false);
    for (std::size_t i = 0; i < L * di; ++i) {
      const T z = gate.data[i];
      act.data[i] = z * sigmoid(z) * up.data[i];
    }
    matmul_nn(act.row(0), di, p.at(w.w_down), d, o.row(0), d, L, d, di, false);
    for (std::size_t i = 0; i < L * d; ++i) x.data[i] += o.data[i];
    if (lt) {
      lt->h2 = h;
      lt->inv2 = inv2;
      lt->gate = gate;
      lt->up = up;
      lt->act = act;
    }
  }

  std::vector<T> inv_f(L);
  rmsnorm(x.row(0), L, d, p.at(p.layout.final_norm), eps, h.row(0), inv_f.data());
  Matrix<T> logits(L, V);
  std::vector<T> emb_t(d * V);
  transpose(p.at(p.layout.embedding), d, V, d, emb_t.data(), V);
  matmul_nn(h.row(0), d, emb_t.data(), V, logits.row(0), V, L, V, d, false);
  check_finite(logits, "logits");
  if (trace) {
    trace->x_final = std::move(x);
    trace->h_final = std::move(h);
    trace->inv_final = std::move(inv_f);
    trace->rope = rope;
  }
  return logits;
}

// For Y = X W with W [in x out]: dW += X^T dY and dX (+)= dY W^T.
template <class T>
void linear_backward(const Matrix<T>& x, const Matrix<T>& dy, const T* w, std::size_t out_f,
                     T* dw, Matrix<T>* dx, bool accumulate_dx) {
  const std::size_t L = x.rows, in_f = x.cols;
  std::vector<T> xt(in_f * L);
  transpose(x.row(0), in_f, L, in_f, xt.data(), L);
  matmul_nn(xt.data(), L, dy.row(0), out_f, dw, out_f, in_f, out_f, L, true);
  if (dx) {
    std::vector<T> wt(out_f * in_f);
    transpose(w, out_f, in_f, out_f, wt.data(), in_f);
    matmul_nn(dy.row(0), out_f, wt.data(), in_f, dx->row(0), in_f, L, in_f, out_f, accumulate_dx);
  }
}

template <class T>
void attend_backward(const ModelConfig& cfg, const LayerTrace<T>& lt, const Matrix<T>& dattn,
                     Matrix<T>& dq, Matrix<T>& dk, Matrix<T>& dv) {
  const std::size_t hd = cfg.head_dim(), G = cfg.n_heads_kv;
  const std::size_t hpg = cfg.n_heads_q / G;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<T> kc, vct, dp, dqb, qbt, dobt, dkt, dvt;
  for (const AttnBlockTrace<T>& rec : lt.blocks) {
    const std::size_t n = rec.keys.size();
    const std::size_t R = (rec.r1 - rec.r0) * hpg;
    kc.resize(n * hd);
    vct.resize(hd * n);
    for (std::size_t g = 0; g < G; ++g) {
      for (std::size_t j = 0; j < n; ++j) {
        const T* kr = lt.k.row(rec.keys[j]) + g * hd;
        const T* vr = lt.v.row(rec.keys[j]) + g * hd;
        std::copy(kr, kr + hd, kc.data() + j * hd);
        for (std::size_t e = 0; e < hd; ++e) vct[e * n + j] = vr[e];
      }
      const Matrix<T>& P = rec.probs[g];
      Matrix<T> DS(R, n), Qb(R, hd), dOb(R, hd);
      for (std::size_t qi = rec.r0; qi < rec.r1; ++qi) {
        const std::size_t base = (qi - rec.r0) * hpg;
        std::copy(lt.q.row(qi) + g * hpg * hd, lt.q.row(qi) + (g + 1) * hpg * hd, Qb.row(base));
        const T* dog = dattn.row(qi) + g * hpg * hd;
        std::copy(dog, dog + hpg * hd, dOb.row(base));
      }
      for (std::size_t c0 = rec.r0; c0 < rec.r1; c0 += kQueryChunk) {
        const std::size_t c1 = std::min(c0 + kQueryChunk, rec.r1);
        const std::size_t nc = rec.keys_for(c1 - 1), Rc = (c1 - c0) * hpg;
        const std::size_t base0 = (c0 - rec.r0) * hpg;
        dp.resize(Rc * nc);
        dqb.resize(Rc * hd);
        matmul_nn(dOb.row(base0), hd, vct.data(), n, dp.data(), nc, Rc, nc, hd, false);
        for (std::size_t qi = c0; qi < c1; ++qi) {
          const std::size_t nq = rec.keys_for(qi);
          for (std::size_t h = 0; h < hpg; ++h) {
            const std::size_t r = (qi - rec.r0) * hpg + h;
            const T* pr = P.row(r);
            const T* dpr = dp.data() + (r - base0) * nc;
            T dotp = 0;
            for (std::size_t j = 0; j < nq; ++j) dotp += pr[j] * dpr[j];
            T* ds = DS.row(r);
            for (std::size_t j = 0; j < nq; ++j) ds[j] = pr[j] * (dpr[j] - dotp) * scale;
          }
        }
        matmul_nn(DS.row(base0), n, kc.data(), hd, dqb.data(), hd, Rc, hd, nc, false);
        for (std::size_t qi = c0; qi < c1; ++qi) {
          const T* src_row = dqb.data() + (qi - c0) * hpg * hd;
          std::copy(src_row, src_row + hpg * hd, dq.row(qi) + g * hpg * hd);
        }
      }
      // dK^T = Qb^T DS and dV^T = dOb^T P, reading DS and P row by row.
      qbt.resize(hd * R);
      dobt.resize(hd * R);
      transpose(Qb.row(0), hd, R, hd, qbt.data(), R);
      transpose(dOb.row(0), hd, R, hd, dobt.data(), R);
      dkt.resize(hd * n);
      dvt.resize(hd * n);
      matmul_nn(qbt.data(), R, DS.row(0), n, dkt.data(), n, hd, n, R, false);
      matmul_nn(dobt.data(), R, P.row(0), n, dvt.data(), n, hd, n, R, false);
      for (std::size_t j = 0; j < n; ++j) {
        T* dkr = dk.row(rec.keys[j]) + g * hd;
        T* dvr = dv.row(rec.keys[j]) + g * hd;
        for (std::size_t e = 0; e < hd; ++e) {
          dkr[e] += dkt[e * n + j];
          dvr[e] += dvt[e * n + j];
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Public entry points

template <class T>
Matrix<T> forward(const ModelParams<T>& params, std::span<const TokenId> tokens,
                  std::span<const std::int32_t> positions, const BlockMask& mask) {
  return run_forward<T>(params, nullptr, tokens, positions, mask, nullptr, nullptr, nullptr);
}

template <class T>
Matrix<T> forward_with_cache(const ModelParams<T>& params, KVCache<T>& cache,
                             std::span<const TokenId> tokens,
                             std::span<const std::int32_t> positions, const BlockMask& mask,
                             std::size_t commit_rows, ForwardCounter* counter) {
  if (commit_rows > tokens.size()) throw CacheError("commit_rows exceeds the new rows");
  if (cache.n_layers != params.config.n_layers || cache.kv_dim != params.config.kv_dim())
    throw CacheError("cache shape does not match the model");
  if (positions.size() != tokens.size()) throw ShapeError("tokens and positions differ in length");
  for (std::size_t i = 0; i < commit_rows; ++i) {
    const std::int32_t pos = positions[i];
    if (std::find(cache.positions.begin(), cache.positions.end(), pos) != cache.positions.end() ||
        std::find(positions.begin(), positions.begin() + i, pos) != positions.begin() + i)
      throw CacheError("position " + std::to_string(pos) + " is already committed");
  }
  std::vector<Matrix<T>> nk, nv;
  Matrix<T> logits = run_forward<T>(params, &cache, tokens, positions, mask, nullptr,
                                    commit_rows ? &nk : nullptr, commit_rows ? &nv : nullptr);
  if (commit_rows) {
    const std::size_t kvd = cache.kv_dim;
    for (int l = 0; l < cache.n_layers; ++l) {
      cache.k[l].insert(cache.k[l].end(), nk[l].data.begin(), nk[l].data.begin() + commit_rows * kvd);
      cache.v[l].insert(cache.v[l].end(), nv[l].data.begin(), nv[l].data.begin() + commit_rows * kvd);
    }
    cache.positions.insert(cache.positions.end(), positions.begin(),
                           positions.begin() + commit_rows);
  }
  if (counter) {
    ++counter->calls;
    counter->rows += tokens.size();
  }
  return logits;
}

template <class T>
T backward(const ModelParams<T>& p, std::span<const TokenId> tokens,
           std::span<const std::int32_t> positions, const BlockMask& mask,
           const LossSpec<T>& loss, ModelParams<T>& grad, std::vector<T>* ce) {
  const ModelConfig& cfg = p.config;
  const std::size_t L = tokens.size(), d = cfg.d_model, di = cfg.d_intermediate;
  const std::size_t hd = cfg.head_dim(), Hq = cfg.n_heads_q, Hkv = cfg.n_heads_kv;
  const std::size_t qd = cfg.q_dim(), kvd = cfg.kv_dim(), V = cfg.vocab_size();
  if (loss.targets.size() != L || loss.weights.size() != L)
    throw ShapeError("loss spec length differs from the sequence");
  if (grad.values.size() != p.values.size()) throw ShapeError("gradient buffer has wrong size");

  ForwardTrace<T> tr;
  Matrix<T> logits = run_forward<T>(p, nullptr, tokens, positions, mask, &tr, nullptr, nullptr);

  // Cross-entropy; logits become d(loss)/d(logits) in place.
  T total = 0;
  if (ce) ce->assign(L, T(0));
  for (std::size_t i = 0; i < L; ++i) {
    T* row = logits.row(i);
    const T w = loss.weights[i];
    const TokenId t = loss.targets[i];
    if (ce && t >= 0 && static_cast<std::size_t>(t) < V) {
      const T m = *std::max_element(row, row + V);
      T sum = 0;
      for (std::size_t j = 0; j < V; ++j) sum += std::exp(row[j] - m);
      (*ce)[i] = m + std::log(sum) - row[t];
    }
    if (t < 0 || w == T(0)) {
      std::fill(row, row + V, T(0));
      continue;
    }
    if (static_cast<std::size_t>(t) >= V) throw OutOfVocab("target outside model vocab");
    const T m = *std::max_element(row, row + V);
    T sum = 0;
    for (std::size_t j = 0; j < V; ++j) sum += std::exp(row[j] - m);
    const T lse = m + std::log(sum);
    total += w * (lse - row[t]);
    for (std::size_t j = 0; j < V; ++j) row[j] = w * std::exp(row[j] - lse);
    row[t] -= w;
  }
  if (!std::isfinite(total)) throw NumericsError("non-finite loss");

  // Output head (tied embedding) and final norm.
  Matrix<T> dh(L, d), dx(L, d);
  {
    std::vector<T> dlt(V * L);
    transpose(logits.row(0), V, L, V, dlt.data(), L);
    matmul_nn(dlt.data(), L, tr.h_final.row(0), d, grad.at(p.layout.embedding), d, V, d, L, true);
    matmul_nn(logits.row(0), V, p.at(p.layout.embedding), d, dh.row(0), d, L, d, V, false);
  }
  rmsnorm_backward(tr.x_final.row(0), tr.inv_final.data(), L, d, p.at(p.layout.final_norm),
                   dh.row(0), dx.row(0), grad.at(p.layout.final_norm));

  Matrix<T> dact(L, di), dgate(L, di), dup(L, di), dh2(L, d), dattn(L, qd);
  Matrix<T> dq(L, qd), dk(L, kvd), dv(L, kvd), dh1(L, d), dnorm(L, d);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerOffsets& w = p.layout.layers[l];
    const LayerTrace<T>& lt = tr.layers[l];

    // MLP
    linear_backward(lt.act, dx, p.at(w.w_down), d, grad.at(w.w_down), &dact, false);
    for (std::size_t i = 0; i < L * di; ++i) {
      const T z = lt.gate.data[i];
      const T sg = sigmoid(z);
      const T silu = z * sg;
      dup.data[i] = dact.data[i] * silu;
      dgate.data[i] = dact.data[i] * lt.up.data[i] * sg * (T(1) + z * (T(1) - sg));
    }
    linear_backward(lt.h2, dgate, p.at(w.w_gate), di, grad.at(w.w_gate), &dh2, false);
    linear_backward(lt.h2, dup, p.at(w.w_up), di, grad.at(w.w_up), &dh2, true);
    rmsnorm_backward(lt.x_mid.row(0), lt.inv2.data(), L, d, p.at(w.mlp_norm), dh2.row(0),
                     dnorm.row(0), grad.at(w.mlp_norm));
    for (std::size_t i = 0; i < L * d; ++i) dx.data[i] += dnorm.data[i];

    // Attention
    linear_backward(lt.attn, dx, p.at(w.wo), d, grad.at(w.wo), &dattn, false);
    std::fill(dk.data.begin(), dk.data.end(), T(0));
    std::fill(dv.data.begin(), dv.data.end(), T(0));
    attend_backward(cfg, lt, dattn, dq, dk, dv);
    rotate(dq.row(0), L, Hq, hd, tr.rope, true);
    rotate(dk.row(0), L, Hkv, hd, tr.rope, true);
    rmsnorm_backward(lt.q_pre.row(0), lt.q_inv.data(), L * Hq, hd, p.at(w.q_norm), dq.row(0),
                     dq.row(0), grad.at(w.q_norm));
    rmsnorm_backward(lt.k_pre.row(0), lt.k_inv.data(), L * Hkv, hd, p.at(w.k_norm), dk.row(0),
                     dk.row(0), grad.at(w.k_norm));
    linear_backward(lt.h1, dq, p.at(w.wq), qd, grad.at(w.wq), &dh1, false);
    linear_backward(lt.h1, dk, p.at(w.wk), kvd, grad.at(w.wk), &dh1, true);
    linear_backward(lt.h1, dv, p.at(w.wv), kvd, grad.at(w.wv), &dh1, true);
    rmsnorm_backward(lt.x_in.row(0), lt.inv1.data(), L, d, p.at(w.attn_norm), dh1.row(0),
                     dnorm.row(0), grad.at(w.attn_norm));
    for (std::size_t i = 0; i < L * d; ++i) dx.data[i] += dnorm.data[i];
  }

  T* demb = grad.at(p.layout.embedding);
  for (std::size_t i = 0; i < L; ++i) {
    T* r = demb + static_cast<std::size_t>(tokens[i]) * d;
    const T* g = dx.row(i);
    for (std::size_t e = 0; e < d; ++e) r[e] += g[e];
  }
  return total;
}

template <class T>
Matrix<T> apply_rope(const Matrix<T>& x, std::span<const std::int32_t> positions, double base,
                     std::size_t head_dim) {
  if (head_dim == 0 || head_dim % 2 != 0) throw ShapeError("rotary embedding needs an even head_dim");
  if (x.cols % head_dim != 0) throw ShapeError("row width is not a multiple of head_dim");
  if (positions.size() != x.rows) throw ShapeError("one position per row required");
  Matrix<T> out = x;
  const RopeTable<T> t = rope_table<T>(positions, base, head_dim);
  rotate(out.row(0), out.rows, x.cols / head_dim, head_dim, t, false);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_le32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

std::uint32_t get_le32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const TensorSlot& s : params.layout.slots)
    tensors.push_back({{"name", s.name},
                       {"shape", {s.rows, s.cols}},
                       {"byte_offset", s.offset * 4},
                       {"byte_size", s.size() * 4}});
  const nlohmann::json header{{"format", "mmgen-checkpoint"},
                              {"version", 1},
                              {"dtype", "float32-le"},
                              {"config", params.config.to_json()},
                              {"num_values", params.values.size()},
                              {"tensors", tensors}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  const std::uint64_t n = text.size();
  put_le32(os, static_cast<std::uint32_t>(n & 0xFFFFFFFFu));
  put_le32(os, static_cast<std::uint32_t>(n >> 32));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const T v : params.values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_le32(os, bits);
  }
  if (!os) throw Error("failed writing checkpoint " + path.string());
}

template <class T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  unsigned char lenbuf[8];
  if (!is.read(reinterpret_cast<char*>(lenbuf), 8)) throw Error("truncated checkpoint header");
  const std::uint64_t n =
      static_cast<std::uint64_t>(get_le32(lenbuf)) | (static_cast<std::uint64_t>(get_le32(lenbuf + 4)) << 32);
  if (n > (1u << 26)) throw Error("implausible checkpoint header length");
  std::string text(n, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(n))) throw Error("truncated checkpoint header");
  const auto header = nlohmann::json::parse(text);
  ModelParams<T> p = ModelParams<T>::zeros(ModelConfig::from_json(header.at("config")));
  if (header.at("num_values").get<std::size_t>() != p.values.size())
    throw Error("checkpoint value count does not match its config");
  std::vector<unsigned char> raw(p.values.size() * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw Error("truncated checkpoint data");
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const std::uint32_t bits = get_le32(raw.data() + 4 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    p.values[i] = static_cast<T>(f);
  }
  return p;
}

#define MMGEN_INSTANTIATE(T)                                                                      \
  template struct ModelParams<T>;                                                                 \
  template struct KVCache<T>;                                                                     \
  template Matrix<T> forward<T>(const ModelParams<T>&, std::span<const TokenId>,                  \
                                std::span<const std::int32_t>, const BlockMask&);                 \
  template Matrix<T> forward_with_cache<T>(const ModelParams<T>&, KVCache<T>&,                    \
                                           std::span<const TokenId>,                              \
                                           std::span<const std::int32_t>, const BlockMask&,       \
                                           std::size_t, ForwardCounter*);                         \
  template T backward<T>(const ModelParams<T>&, std::span<const TokenId>,                         \
                         std::span<const std::int32_t>, const BlockMask&, const LossSpec<T>&,     \
                         ModelParams<T>&, std::vector<T>*);                                \
  template Matrix<T> apply_rope<T>(const Matrix<T>&, std::span<const std::int32_t>, double,       \
                                   std::size_t);                                                  \
  template void save_checkpoint<T>(const std::filesystem::path&, const ModelParams<T>&);          \
  template ModelParams<T> load_checkpoint<T>(const std::filesystem::path&);

MMGEN_INSTANTIATE(float)
MMGEN_INSTANTIATE(double)
#undef MMGEN_INSTANTIATE

}  // namespace mmgen
