#pragma once

#include "editkit/common.hpp"
#include "editkit/text.hpp"
#include "editkit/world.hpp"

#include <optional>
#include <string>
#include <vector>

namespace editkit::model {

struct ModelConfig {
  int k = 8;
  int d = 32;
  int h = 128;
  int n_blocks = 4;
  int n_heads = 4;
  int d_txt = 64;
  int id_dim = 64;
  int cond_dim = 0;  // 0 means h
  int freq_dim = 128;
  int text_len = text::kSeqLen;
  int T = 1000;
  /// Pad the k row tokens with zero tokens up to the next perfect square and
  /// use a 2D sin-cos position grid.
  bool square_pad = false;
  /// When false the identity MLP is never fed; id embeddings are treated as null.
  bool identity_conditioning = true;

  int cond() const { return cond_dim > 0 ? cond_dim : h; }
  int tokens() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// c_I = (w_o, id) and c_T = text. Null parts are absent; forward feeds zeros.
struct ConditioningBundle {
  std::optional<LatentCode> w_o;
  std::optional<world::IdentityEmbedding> id_emb;
  std::optional<text::TextEmbeddingSeq> text;
  bool image_null = true;
  bool text_null = true;

  /// Throws std::invalid_argument when the flags disagree with the payload.
  void check() const;
};

ConditioningBundle null_conditioning();
ConditioningBundle make_conditioning(std::optional<LatentCode> w_o,
                                     std::optional<world::IdentityEmbedding> id,
                                     std::optional<text::TextEmbeddingSeq> text);

template <class T>
struct Param {
  std::string name;
  Matrix<T> value;
};

template <class T>
struct ParameterStore {
  std::vector<Param<T>> params;
  uint64_t seed = 0;

  size_t size() const { return params.size(); }
  Eigen::Index scalar_count() const;
  int find(const std::string& name) const;  // -1 when absent
  std::vector<Matrix<T>> zeros_like() const;
};

/// Forward-ready batch. Row e*tokens + i holds token i of example e.
template <class T>
struct DenoiserInput {
  int batch = 0;
  Matrix<T> w_t;  // batch*k x d
  Matrix<T> w_o;  // batch*k x d, zero where the image condition is null
  std::vector<int> t;
  Matrix<T> id;  // batch x id_dim, zero where null
  /// Non-zero text rows packed back to back; example e owns rows
  /// [text_offset[e], text_offset[e+1]). Zero rows act as pad keys.
  Matrix<T> text;
  std::vector<int> text_offset;
};

template <class T>
DenoiserInput<T> pack_inputs(const ModelConfig& cfg, const std::vector<const LatentCode*>& w_t,
                             const std::vector<int>& t,
                             const std::vector<const ConditioningBundle*>& cond);

template <class T>
struct BlockCache {
  Matrix<T> mod;  // batch x 9h: shift, scale, gate for each of the three sub-layers
  Matrix<T> n1, m1, qkv, a1, o1;
  std::vector<T> rstd1, p1;
  Matrix<T> n2, m2, q2, k2, v2, a2, o2;
  std::vector<T> rstd2, p2;
  Matrix<T> n3, m3, h1, g, o3;
  std::vector<T> rstd3;
};

template <class T>
struct ForwardCache {
  int batch = 0;
  std::vector<int> text_offset;
  Matrix<T> text;
  Matrix<T> x_in;
  Matrix<T> freq, t_pre, t_hid, id_in, id_pre, id_hid, cvec, sc;
  std::vector<BlockCache<T>> blocks;
  Matrix<T> nf, mf, modf;
  std::vector<T> rstdf;
};

template <class T>
class Transformer {
 public:
  Transformer() = default;
  explicit Transformer(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }

  /// eps-hat for a packed batch, batch*k x d. Fills `cache` for backward.
  Matrix<T> forward(const DenoiserInput<T>& in, ForwardCache<T>* cache = nullptr) const;
  /// Accumulates parameter gradients of <d_out, eps-hat> into `grads`.
  void backward(const ForwardCache<T>& cache, const Matrix<T>& d_out,
                std::vector<Matrix<T>>& grads) const;

  /// Single-example convenience wrapper.
  LatentCode forward(const LatentCode& w_t, int t, const ConditioningBundle& cond) const;

  VectorD time_embed(int t) const;
  VectorD identity_embed(const std::optional<world::IdentityEmbedding>& id) const;

  /// Output head applied to the embedded input tokens, skipping every block
  /// and the final modulation.
  LatentCode head_on_input(const LatentCode& w_t, const ConditioningBundle& cond) const;

  template <class U>
  Transformer<U> cast() const;

 private:
  struct BlockIndex {
    int mod_w, mod_b;
    int qkv_w, qkv_b, attn_out_w, attn_out_b;
    int xq_w, xq_b, xk_w, xv_w, xout_w;
    int ffn1_w, ffn1_b, ffn2_w, ffn2_b;
  };
  struct Layout {
    int in_w, in_b;
    int t1_w, t1_b, t2_w, t2_b;
    int id1_w, id2_w;
    int final_mod_w, final_mod_b, out_w, out_b;
    std::vector<BlockIndex> blocks;
  };

  template <class U>
  friend class Transformer;

  void build_layout();
  const Matrix<T>& P(int i) const { return store_.params[static_cast<size_t>(i)].value; }

  ModelConfig config_;
  ParameterStore<T> store_;
  Layout layout_{};
  Matrix<T> pos_;  // tokens x h, fixed
};

/// Deterministic initialisation: xavier-uniform linears, zero biases, zero
/// adaLN projections so every block is the identity map.
template <class T>
Transformer<T> init_model(const ModelConfig& config, uint64_t seed);

/// [cos(t f_j), sin(t f_j)] with f_j = 10000^(-j/half).
VectorD sinusoidal_features(double t, int dim);

/// Rows padded for GEMM so results for a row do not depend on batch size.
Eigen::Index gemm_rows(Eigen::Index m);
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);

}  // namespace editkit::model
