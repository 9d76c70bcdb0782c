#include "editkit/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace editkit::model {

using Eigen::Index;

namespace {

constexpr double kLnEps = 1e-6;

template <class T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <class T>
T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

// Rational tanh for float with only +, *, / so scalar and vectorised loops
// round identically. Double keeps std::tanh.
inline float tanh_approx(float x) {
  constexpr float lim = 7.90531110763549805f;
  x = x < -lim ? -lim : x;
  x = x > lim ? lim : x;
  const float x2 = x * x;
  float p = x2 * -2.76076847742355e-16f + 2.00018790482477e-13f;
  p = x2 * p + -8.60467152213735e-11f;
  p = x2 * p + 5.12229709037114e-08f;
  p = x2 * p + 1.48572235717979e-05f;
  p = x2 * p + 6.37261928875436e-04f;
  p = x2 * p + 4.89352455891786e-03f;
  p = x * p;
  float q = x2 * 1.19825839466702e-06f + 1.18534705686654e-04f;
  q = x2 * q + 2.26843463243900e-03f;
  q = x2 * q + 4.89352518554385e-03f;
  return p / q;
}
inline double tanh_approx(double x) { return std::tanh(x); }

template <class T>
T gelu(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  return T(0.5) * x * (T(1) + tanh_approx(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T th = tanh_approx(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3 * 0.044715) * x * x);
}

template <class T>
Matrix<T> gelu_map(const Matrix<T>& x) {
  Matrix<T> y(x.rows(), x.cols());
  const T* in = x.data();
  T* out = y.data();
  for (Index i = 0; i < x.size(); ++i) out[i] = gelu(in[i]);
  return y;
}

template <class T>
Matrix<T> map(const Matrix<T>& x, T (*f)(T)) {
  Matrix<T> y(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) y.data()[i] = f(x.data()[i]);
  return y;
}

template <class T>
void add_row(Matrix<T>& y, const Matrix<T>& bias) {
  for (Index r = 0; r < y.rows(); ++r)
    for (Index j = 0; j < y.cols(); ++j) y(r, j) += bias(0, j);
}

template <class T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>* bias) {
  Matrix<T> y = matmul(x, w);
  if (bias) add_row(y, *bias);
  return y;
}

template <class T>
void linear_backward(const Matrix<T>& x, const Matrix<T>& dy, const Matrix<T>& w, Matrix<T>& dw,
                     Matrix<T>* db, Matrix<T>* dx) {
  dw.noalias() += x.transpose() * dy;
  if (db) {
    T* out = db->data();
    for (Index r = 0; r < dy.rows(); ++r) {
      const T* row = dy.data() + r * dy.cols();
      for (Index j = 0; j < dy.cols(); ++j) out[j] += row[j];
    }
  }
  if (dx) dx->noalias() = dy * w.transpose();
}

template <class T>
void layer_norm(const Matrix<T>& x, Matrix<T>& n, std::vector<T>& rstd) {
  const Index cols = x.cols();
  n.resize(x.rows(), cols);
  rstd.resize(static_cast<size_t>(x.rows()));
  for (Index r = 0; r < x.rows(); ++r) {
    T mean = 0;
    for (Index j = 0; j < cols; ++j) mean += x(r, j);
    mean /= static_cast<T>(cols);
    T var = 0;
    for (Index j = 0; j < cols; ++j) var += (x(r, j) - mean) * (x(r, j) - mean);
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    rstd[static_cast<size_t>(r)] = rs;
    for (Index j = 0; j < cols; ++j) n(r, j) = (x(r, j) - mean) * rs;
  }
}

template <class T>
void layer_norm_backward(const Matrix<T>& dn, const Matrix<T>& n, const std::vector<T>& rstd,
                         Matrix<T>& dx) {
  const Index cols = n.cols();
  for (Index r = 0; r < n.rows(); ++r) {
    T mean_dn = 0, mean_dnn = 0;
    for (Index j = 0; j < cols; ++j) {
      mean_dn += dn(r, j);
      mean_dnn += dn(r, j) * n(r, j);
    }
    mean_dn /= static_cast<T>(cols);
    mean_dnn /= static_cast<T>(cols);
    const T rs = rstd[static_cast<size_t>(r)];
    for (Index j = 0; j < cols; ++j) dx(r, j) += rs * (dn(r, j) - mean_dn - n(r, j) * mean_dnn);
  }
}

// m = n * (1 + scale) + shift, with per-example rows of `mod`.
template <class T>
Matrix<T> modulate(const Matrix<T>& n, const Matrix<T>& mod, Index shift, Index scale, int tokens) {
  Matrix<T> m(n.rows(), n.cols());
  for (Index r = 0; r < n.rows(); ++r) {
    const Index e = r / tokens;
    for (Index j = 0; j < n.cols(); ++j) m(r, j) = n(r, j) * (T(1) + mod(e, scale + j)) + mod(e, shift + j);
  }
  return m;
}

template <class T>
Matrix<T> modulate_backward(const Matrix<T>& dm, const Matrix<T>& n, const Matrix<T>& mod,
                            Matrix<T>& dmod, Index shift, Index scale, int tokens) {
  Matrix<T> dn(n.rows(), n.cols());
  for (Index r = 0; r < n.rows(); ++r) {
    const Index e = r / tokens;
    for (Index j = 0; j < n.cols(); ++j) {
      dn(r, j) = dm(r, j) * (T(1) + mod(e, scale + j));
      dmod(e, scale + j) += dm(r, j) * n(r, j);
      dmod(e, shift + j) += dm(r, j);
    }
  }
  return dn;
}

template <class T>
void gated_add(Matrix<T>& x, const Matrix<T>& o, const Matrix<T>& mod, Index gate, int tokens) {
  for (Index r = 0; r < x.rows(); ++r) {
    const Index e = r / tokens;
    for (Index j = 0; j < x.cols(); ++j) x(r, j) += mod(e, gate + j) * o(r, j);
  }
}

template <class T>
Matrix<T> gated_backward(const Matrix<T>& dx, const Matrix<T>& o, const Matrix<T>& mod,
                         Matrix<T>& dmod, Index gate, int tokens) {
  Matrix<T> d_o(o.rows(), o.cols());
  for (Index r = 0; r < o.rows(); ++r) {
    const Index e = r / tokens;
    for (Index j = 0; j < o.cols(); ++j) {
      d_o(r, j) = dx(r, j) * mod(e, gate + j);
      dmod(e, gate + j) += dx(r, j) * o(r, j);
    }
  }
  return d_o;
}

// One head of one example: softmax(q k^T * scale) v. Rows are addressed by
// (pointer, stride). `pad` extra keys have score 0 and value 0 and only enter
// the softmax denominator. Inner loops run over independent outputs so they
// vectorise without reordering any sum.
template <class T>
void attend_head(const T* q, Index qs, const T* k, Index ks, const T* v, Index vs, int nq, int nk, int pad,
                 int dh, T scale, T* a, Index as, T* probs, std::vector<T>& kt) {
  kt.resize(static_cast<size_t>(dh) * nk);
  for (int j = 0; j < nk; ++j)
    for (int c = 0; c < dh; ++c) kt[static_cast<size_t>(c) * nk + j] = k[j * ks + c];
  for (int i = 0; i < nq; ++i) {
    T* s = probs + static_cast<Index>(i) * nk;
    for (int j = 0; j < nk; ++j) s[j] = 0;
    for (int c = 0; c < dh; ++c) {
      const T qc = q[i * qs + c];
      const T* kc = &kt[static_cast<size_t>(c) * nk];
      for (int j = 0; j < nk; ++j) s[j] += qc * kc[j];
    }
    T mx = pad > 0 ? T(0) : -std::numeric_limits<T>::infinity();
    for (int j = 0; j < nk; ++j) {
      s[j] *= scale;
      mx = std::max(mx, s[j]);
    }
    T denom = pad > 0 ? static_cast<T>(pad) * std::exp(-mx) : T(0);
    for (int j = 0; j < nk; ++j) {
      s[j] = std::exp(s[j] - mx);
      denom += s[j];
    }
    for (int j = 0; j < nk; ++j) s[j] /= denom;
    T* ai = a + i * as;
    for (int j = 0; j < nk; ++j) {
      const T pj = s[j];
      const T* vj = v + j * vs;
      for (int c = 0; c < dh; ++c) ai[c] += pj * vj[c];
    }
  }
}

template <class T>
void attend_head_backward(const T* q, Index qs, const T* k, Index ks, const T* v, Index vs, int nq, int nk,
                          int dh, T scale, const T* probs, const T* da, Index das, T* dq, Index dqs, T* dk,
                          Index dks, T* dv, Index dvs, std::vector<T>& vt, std::vector<T>& dp) {
  vt.resize(static_cast<size_t>(dh) * nk);
  dp.resize(static_cast<size_t>(nk));
  for (int j = 0; j < nk; ++j)
    for (int c = 0; c < dh; ++c) vt[static_cast<size_t>(c) * nk + j] = v[j * vs + c];
  for (int i = 0; i < nq; ++i) {
    const T* p = probs + static_cast<Index>(i) * nk;
    const T* dai = da + i * das;
    for (int j = 0; j < nk; ++j) dp[j] = 0;
    for (int c = 0; c < dh; ++c) {
      const T dc = dai[c];
      const T* vc = &vt[static_cast<size_t>(c) * nk];
      for (int j = 0; j < nk; ++j) dp[j] += dc * vc[j];
    }
    T rowdot = 0;
    for (int j = 0; j < nk; ++j) rowdot += p[j] * dp[j];
    T* dqi = dq + i * dqs;
    const T* qi = q + i * qs;
    for (int j = 0; j < nk; ++j) {
      const T pj = p[j];
      const T g = pj * (dp[j] - rowdot) * scale;
      T* dvj = dv + j * dvs;
      T* dkj = dk + j * dks;
      const T* kj = k + j * ks;
      for (int c = 0; c < dh; ++c) {
        dvj[c] += pj * dai[c];
        dqi[c] += g * kj[c];
        dkj[c] += g * qi[c];
      }
    }
  }
}

template <class T>
void self_attention(const Matrix<T>& qkv, int batch, int tokens, int heads, Matrix<T>& a,
                    std::vector<T>& probs) {
  const Index H = qkv.cols() / 3, S = qkv.cols();
  const int dh = static_cast<int>(H) / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  a.setZero(qkv.rows(), H);
  probs.assign(static_cast<size_t>(batch) * heads * tokens * tokens, T(0));
  std::vector<T> kt;
  for (int e = 0; e < batch; ++e)
    for (int hh = 0; hh < heads; ++hh) {
      const T* base = qkv.data() + static_cast<Index>(e) * tokens * S + hh * dh;
      attend_head(base, S, base + H, S, base + 2 * H, S, tokens, tokens, 0, dh, scale,
                  a.data() + static_cast<Index>(e) * tokens * H + hh * dh, H,
                  &probs[(static_cast<size_t>(e) * heads + hh) * tokens * tokens], kt);
    }
}

template <class T>
Matrix<T> self_attention_backward(const Matrix<T>& qkv, const std::vector<T>& probs, const Matrix<T>& da,
                                  int batch, int tokens, int heads) {
  const Index H = qkv.cols() / 3, S = qkv.cols();
  const int dh = static_cast<int>(H) / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> dqkv = Matrix<T>::Zero(qkv.rows(), S);
  std::vector<T> vt, dp;
  for (int e = 0; e < batch; ++e)
    for (int hh = 0; hh < heads; ++hh) {
      const Index off = static_cast<Index>(e) * tokens * S + hh * dh;
      const T* base = qkv.data() + off;
      T* dbase = dqkv.data() + off;
      attend_head_backward(base, S, base + H, S, base + 2 * H, S, tokens, tokens, dh, scale,
                           &probs[(static_cast<size_t>(e) * heads + hh) * tokens * tokens],
                           da.data() + static_cast<Index>(e) * tokens * H + hh * dh, H, dbase, S, dbase + H, S,
                           dbase + 2 * H, S, vt, dp);
    }
  return dqkv;
}

// Cross-attention over text_len keys of which only the packed rows are
// non-zero. Zero rows have k = v = 0 (no bias), so they contribute score 0
// and value 0; they are folded into the softmax denominator exactly.
template <class T>
void cross_attention(const Matrix<T>& q, const Matrix<T>& kt, const Matrix<T>& vt,
                     const std::vector<int>& offset, int text_len, int tokens, int heads, Matrix<T>& a,
                     std::vector<T>& probs) {
  const Index H = q.cols();
  const int dh = static_cast<int>(H) / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const int batch = static_cast<int>(offset.size()) - 1;
  a.setZero(q.rows(), H);
  probs.assign(static_cast<size_t>(offset.back()) * heads * tokens, T(0));
  std::vector<T> buf;
  for (int e = 0; e < batch; ++e) {
    const int n = offset[e + 1] - offset[e];
    if (n == 0) continue;
    for (int hh = 0; hh < heads; ++hh)
      attend_head(q.data() + static_cast<Index>(e) * tokens * H + hh * dh, H,
                  kt.data() + static_cast<Index>(offset[e]) * H + hh * dh, H,
                  vt.data() + static_cast<Index>(offset[e]) * H + hh * dh, H, tokens, n, text_len - n, dh, scale,
                  a.data() + static_cast<Index>(e) * tokens * H + hh * dh, H,
                  &probs[static_cast<size_t>(offset[e]) * heads * tokens + static_cast<size_t>(hh) * tokens * n],
                  buf);
  }
}

template <class T>
void cross_attention_backward(const Matrix<T>& q, const Matrix<T>& kt, const Matrix<T>& vt,
                              const std::vector<int>& offset, int tokens, int heads,
                              const std::vector<T>& probs, const Matrix<T>& da, Matrix<T>& dq,
                              Matrix<T>& dk, Matrix<T>& dv) {
  const Index H = q.cols();
  const int dh = static_cast<int>(H) / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const int batch = static_cast<int>(offset.size()) - 1;
  dq.setZero(q.rows(), H);
  dk.setZero(kt.rows(), H);
  dv.setZero(vt.rows(), H);
  std::vector<T> vbuf, dp;
  for (int e = 0; e < batch; ++e) {
    const int n = offset[e + 1] - offset[e];
    if (n == 0) continue;
    for (int hh = 0; hh < heads; ++hh) {
      const Index qo = static_cast<Index>(e) * tokens * H + hh * dh;
      const Index ko = static_cast<Index>(offset[e]) * H + hh * dh;
      attend_head_backward(q.data() + qo, H, kt.data() + ko, H, vt.data() + ko, H, tokens, n, dh, scale,
                           &probs[static_cast<size_t>(offset[e]) * heads * tokens +
                                  static_cast<size_t>(hh) * tokens * n],
                           da.data() + qo, H, dq.data() + qo, H, dk.data() + ko, H, dv.data() + ko, H, vbuf, dp);
    }
  }
}

double positional_1d(int pos, int dim, int width) {
  const int pair = dim / 2;
  const double freq = std::pow(10000.0, -2.0 * pair / width);
  return dim % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
}

bool row_is_zero(const MatrixD& m, Index r) {
  for (Index j = 0; j < m.cols(); ++j)
    if (m(r, j) != 0.0) return false;
  return true;
}

}  // namespace

int ModelConfig::tokens() const {
  if (!square_pad) return k;
  int side = 1;
  while (side * side < k) ++side;
  return side * side;
}

void ModelConfig::validate() const {
  if (k <= 0 || d <= 0 || h <= 0 || n_blocks < 0 || n_heads <= 0 || d_txt <= 0 || id_dim <= 0 ||
      freq_dim <= 0 || text_len <= 0 || T < 1 || cond_dim < 0)
    throw std::invalid_argument("model dimensions must be positive");
  if (h % n_heads != 0) throw std::invalid_argument("hidden dim must be divisible by n_heads");
  if (h % 2 != 0 || freq_dim % 2 != 0) throw std::invalid_argument("hidden and frequency dims must be even");
  if (square_pad && h % 4 != 0) throw std::invalid_argument("square_pad needs hidden dim divisible by 4");
}

void ConditioningBundle::check() const {
  if (image_null != (!w_o.has_value() && !id_emb.has_value()))
    throw std::invalid_argument("image_null flag disagrees with the image payload");
  if (text_null != !text.has_value()) throw std::invalid_argument("text_null flag disagrees with the text payload");
}

ConditioningBundle null_conditioning() { return ConditioningBundle{}; }

ConditioningBundle make_conditioning(std::optional<LatentCode> w_o, std::optional<world::IdentityEmbedding> id,
                                     std::optional<text::TextEmbeddingSeq> text) {
  ConditioningBundle b;
  b.image_null = !w_o.has_value() && !id.has_value();
  b.text_null = !text.has_value();
  b.w_o = std::move(w_o);
  b.id_emb = std::move(id);
  b.text = std::move(text);
  return b;
}

template <class T>
Index ParameterStore<T>::scalar_count() const {
  Index n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

template <class T>
int ParameterStore<T>::find(const std::string& name) const {
  for (size_t i = 0; i < params.size(); ++i)
    if (params[i].name == name) return static_cast<int>(i);
  return -1;
}

template <class T>
std::vector<Matrix<T>> ParameterStore<T>::zeros_like() const {
  std::vector<Matrix<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
  return out;
}

VectorD sinusoidal_features(double t, int dim) {
  const int half = dim / 2;
  VectorD f(dim);
  for (int j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * j / half);
    f(j) = std::cos(t * freq);
    f(half + j) = std::sin(t * freq);
  }
  return f;
}

Index gemm_rows(Index m) { return std::max<Index>(16, (m + 7) / 8 * 8); }

template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  const Index m = a.rows();
  const Index mp = gemm_rows(m);
  Matrix<T> c(mp, b.cols());
  if (mp == m) {
    c.noalias() = a * b;
    return c;
  }
  Matrix<T> ap = Matrix<T>::Zero(mp, a.cols());
  ap.topRows(m) = a;
  c.noalias() = ap * b;
  return c.topRows(m);
}

template <class T>
DenoiserInput<T> pack_inputs(const ModelConfig& cfg, const std::vector<const LatentCode*>& w_t,
                             const std::vector<int>& t, const std::vector<const ConditioningBundle*>& cond) {
  const int B = static_cast<int>(w_t.size());
  if (t.size() != w_t.size() || cond.size() != w_t.size())
    throw std::invalid_argument("pack_inputs: batch components differ in length");
  DenoiserInput<T> in;
  in.batch = B;
  in.t = t;
  in.w_t.resize(static_cast<Index>(B) * cfg.k, cfg.d);
  in.w_o = Matrix<T>::Zero(static_cast<Index>(B) * cfg.k, cfg.d);
  in.id = Matrix<T>::Zero(B, cfg.id_dim);
  in.text_offset.assign(1, 0);
  std::vector<std::pair<int, Index>> rows;  // (example, row)
  for (int e = 0; e < B; ++e) {
    const LatentCode& w = *w_t[static_cast<size_t>(e)];
    const ConditioningBundle& c = *cond[static_cast<size_t>(e)];
    c.check();
    if (w.rows() != cfg.k || w.cols() != cfg.d) throw std::invalid_argument("noisy latent has wrong shape");
    if (t[static_cast<size_t>(e)] < 0 || t[static_cast<size_t>(e)] > cfg.T)
      throw std::out_of_range("timestep outside [0, T]");
    in.w_t.middleRows(static_cast<Index>(e) * cfg.k, cfg.k) = w.cast<T>();
    if (c.w_o) {
      if (c.w_o->rows() != cfg.k || c.w_o->cols() != cfg.d)
        throw std::invalid_argument("conditioning latent has wrong shape");
      in.w_o.middleRows(static_cast<Index>(e) * cfg.k, cfg.k) = c.w_o->cast<T>();
    }
    if (c.id_emb && cfg.identity_conditioning) {
      if (c.id_emb->values.size() != cfg.id_dim) throw std::invalid_argument("identity embedding has wrong dim");
      in.id.row(e) = c.id_emb->values.transpose().template cast<T>();
    }
    if (c.text) {
      if (c.text->rows() != cfg.text_len || c.text->cols() != cfg.d_txt)
        throw std::invalid_argument("text embedding has wrong shape");
      for (Index r = 0; r < c.text->rows(); ++r)
        if (!row_is_zero(*c.text, r)) rows.emplace_back(e, r);
    }
    in.text_offset.push_back(static_cast<int>(rows.size()));
  }
  in.text.resize(static_cast<Index>(rows.size()), cfg.d_txt);
  for (size_t i = 0; i < rows.size(); ++i)
    in.text.row(static_cast<Index>(i)) = cond[static_cast<size_t>(rows[i].first)]->text->row(rows[i].second).cast<T>();
  return in;
}

template <class T>
Transformer<T>::Transformer(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int H = config_.h, C = config_.cond(), d = config_.d;
  auto add = [&](const std::string& name, Index rows, Index cols) {
    store_.params.push_back({name, Matrix<T>::Zero(rows, cols)});
  };
  add("input.weight", 2 * d, H);
  add("input.bias", 1, H);
  add("time.fc1.weight", config_.freq_dim, C);
  add("time.fc1.bias", 1, C);
  add("time.fc2.weight", C, C);
  add("time.fc2.bias", 1, C);
  add("identity.fc1.weight", config_.id_dim, C);
  add("identity.fc2.weight", C, C);
  for (int b = 0; b < config_.n_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    add(p + "adaln.weight", C, 9 * H);
    add(p + "adaln.bias", 1, 9 * H);
    add(p + "attn.qkv.weight", H, 3 * H);
    add(p + "attn.qkv.bias", 1, 3 * H);
    add(p + "attn.out.weight", H, H);
    add(p + "attn.out.bias", 1, H);
    add(p + "cross.q.weight", H, H);
    add(p + "cross.q.bias", 1, H);
    add(p + "cross.k.weight", config_.d_txt, H);
    add(p + "cross.v.weight", config_.d_txt, H);
    add(p + "cross.out.weight", H, H);
    add(p + "ffn.fc1.weight", H, 4 * H);
    add(p + "ffn.fc1.bias", 1, 4 * H);
    add(p + "ffn.fc2.weight", 4 * H, H);
    add(p + "ffn.fc2.bias", 1, H);
  }
  add("final.adaln.weight", C, 2 * H);
  add("final.adaln.bias", 1, 2 * H);
  add("output.weight", H, d);
  add("output.bias", 1, d);
  build_layout();
}

template <class T>
void Transformer<T>::build_layout() {
  auto at = [&](const std::string& name) {
    const int i = store_.find(name);
    if (i < 0) throw std::logic_error("missing parameter " + name);
    return i;
  };
  layout_.in_w = at("input.weight");
  layout_.in_b = at("input.bias");
  layout_.t1_w = at("time.fc1.weight");
  layout_.t1_b = at("time.fc1.bias");
  layout_.t2_w = at("time.fc2.weight");
  layout_.t2_b = at("time.fc2.bias");
  layout_.id1_w = at("identity.fc1.weight");
  layout_.id2_w = at("identity.fc2.weight");
  layout_.blocks.clear();
  for (int b = 0; b < config_.n_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    layout_.blocks.push_back({at(p + "adaln.weight"), at(p + "adaln.bias"), at(p + "attn.qkv.weight"),
                              at(p + "attn.qkv.bias"), at(p + "attn.out.weight"), at(p + "attn.out.bias"),
                              at(p + "cross.q.weight"), at(p + "cross.q.bias"), at(p + "cross.k.weight"),
                              at(p + "cross.v.weight"), at(p + "cross.out.weight"), at(p + "ffn.fc1.weight"),
                              at(p + "ffn.fc1.bias"), at(p + "ffn.fc2.weight"), at(p + "ffn.fc2.bias")});
  }
  layout_.final_mod_w = at("final.adaln.weight");
  layout_.final_mod_b = at("final.adaln.bias");
  layout_.out_w = at("output.weight");
  layout_.out_b = at("output.bias");

  const int nt = config_.tokens(), H = config_.h;
  pos_.resize(nt, H);
  if (!config_.square_pad) {
    for (int i = 0; i < nt; ++i)
      for (int j = 0; j < H; ++j) pos_(i, j) = static_cast<T>(positional_1d(i, j, H));
  } else {
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(nt))));
    const int half = H / 2;
    for (int i = 0; i < nt; ++i)
      for (int j = 0; j < half; ++j) {
        pos_(i, j) = static_cast<T>(positional_1d(i / side, j, half));
        pos_(i, half + j) = static_cast<T>(positional_1d(i % side, j, half));
      }
  }
}

template <class T>
Matrix<T> Transformer<T>::forward(const DenoiserInput<T>& in, ForwardCache<T>* cache) const {
  const ModelConfig& cfg = config_;
  const int B = in.batch, nt = cfg.tokens(), H = cfg.h, k = cfg.k, d = cfg.d, heads = cfg.n_heads;
  const Index N = static_cast<Index>(B) * nt;
  if (in.w_t.rows() != static_cast<Index>(B) * k || in.w_t.cols() != d || in.w_o.rows() != in.w_t.rows() ||
      in.w_o.cols() != d || in.id.rows() != B || in.id.cols() != cfg.id_dim ||
      static_cast<int>(in.t.size()) != B || static_cast<int>(in.text_offset.size()) != B + 1 ||
      in.text.cols() != cfg.d_txt || in.text.rows() != in.text_offset.back())
    throw std::invalid_argument("denoiser input does not match the model config");

  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c.batch = B;
  c.text_offset = in.text_offset;
  c.text = in.text;
  c.blocks.assign(static_cast<size_t>(cfg.n_blocks), BlockCache<T>{});

  c.x_in = Matrix<T>::Zero(N, 2 * d);
  for (int e = 0; e < B; ++e)
    for (int i = 0; i < k; ++i) {
      const Index r = static_cast<Index>(e) * nt + i, s = static_cast<Index>(e) * k + i;
      c.x_in.row(r).head(d) = in.w_t.row(s);
      c.x_in.row(r).tail(d) = in.w_o.row(s);
    }
  Matrix<T> x = linear(c.x_in, P(layout_.in_w), &P(layout_.in_b));
  for (Index r = 0; r < N; ++r)
    for (int j = 0; j < H; ++j) x(r, j) += pos_(r % nt, j);

  c.freq.resize(B, cfg.freq_dim);
  for (int e = 0; e < B; ++e) c.freq.row(e) = sinusoidal_features(in.t[e], cfg.freq_dim).transpose().template cast<T>();
  c.t_pre = linear(c.freq, P(layout_.t1_w), &P(layout_.t1_b));
  c.t_hid = map<T>(c.t_pre, silu<T>);
  c.cvec = linear(c.t_hid, P(layout_.t2_w), &P(layout_.t2_b));
  c.id_in = in.id;
  c.id_pre = linear<T>(c.id_in, P(layout_.id1_w), nullptr);
  c.id_hid = map<T>(c.id_pre, silu<T>);
  c.cvec += linear<T>(c.id_hid, P(layout_.id2_w), nullptr);
  c.sc = map<T>(c.cvec, silu<T>);

  for (int b = 0; b < cfg.n_blocks; ++b) {
    const BlockIndex& L = layout_.blocks[static_cast<size_t>(b)];
    BlockCache<T>& bc = c.blocks[static_cast<size_t>(b)];
    bc.mod = linear(c.sc, P(L.mod_w), &P(L.mod_b));

    layer_norm(x, bc.n1, bc.rstd1);
    bc.m1 = modulate(bc.n1, bc.mod, 0, H, nt);
    bc.qkv = linear(bc.m1, P(L.qkv_w), &P(L.qkv_b));
    self_attention(bc.qkv, B, nt, heads, bc.a1, bc.p1);
    bc.o1 = linear(bc.a1, P(L.attn_out_w), &P(L.attn_out_b));
    gated_add(x, bc.o1, bc.mod, 2 * H, nt);

    layer_norm(x, bc.n2, bc.rstd2);
    bc.m2 = modulate(bc.n2, bc.mod, 3 * H, 4 * H, nt);
    bc.q2 = linear(bc.m2, P(L.xq_w), &P(L.xq_b));
    bc.k2 = linear<T>(in.text, P(L.xk_w), nullptr);
    bc.v2 = linear<T>(in.text, P(L.xv_w), nullptr);
    cross_attention(bc.q2, bc.k2, bc.v2, in.text_offset, cfg.text_len, nt, heads, bc.a2, bc.p2);
    bc.o2 = linear<T>(bc.a2, P(L.xout_w), nullptr);
    gated_add(x, bc.o2, bc.mod, 5 * H, nt);

    layer_norm(x, bc.n3, bc.rstd3);
    bc.m3 = modulate(bc.n3, bc.mod, 6 * H, 7 * H, nt);
    bc.h1 = linear(bc.m3, P(L.ffn1_w), &P(L.ffn1_b));
    bc.g = gelu_map(bc.h1);
    bc.o3 = linear(bc.g, P(L.ffn2_w), &P(L.ffn2_b));
    gated_add(x, bc.o3, bc.mod, 8 * H, nt);
  }

  c.modf = linear(c.sc, P(layout_.final_mod_w), &P(layout_.final_mod_b));
  layer_norm(x, c.nf, c.rstdf);
  c.mf = modulate(c.nf, c.modf, 0, H, nt);
  const Matrix<T> out = linear(c.mf, P(layout_.out_w), &P(layout_.out_b));

  Matrix<T> eps(static_cast<Index>(B) * k, d);
  for (int e = 0; e < B; ++e)
    eps.middleRows(static_cast<Index>(e) * k, k) = out.middleRows(static_cast<Index>(e) * nt, k);
  return eps;
}

template <class T>
void Transformer<T>::backward(const ForwardCache<T>& c, const Matrix<T>& d_out,
                              std::vector<Matrix<T>>& g) const {
  const ModelConfig& cfg = config_;
  const int B = c.batch, nt = cfg.tokens(), H = cfg.h, k = cfg.k, d = cfg.d, heads = cfg.n_heads;
  const Index N = static_cast<Index>(B) * nt;
  if (d_out.rows() != static_cast<Index>(B) * k || d_out.cols() != d)
    throw std::invalid_argument("output gradient has wrong shape");
  if (g.size() != store_.size()) throw std::invalid_argument("gradient buffer does not match parameters");

  Matrix<T> dy = Matrix<T>::Zero(N, d);
  for (int e = 0; e < B; ++e)
    dy.middleRows(static_cast<Index>(e) * nt, k) = d_out.middleRows(static_cast<Index>(e) * k, k);

  Matrix<T> dsc = Matrix<T>::Zero(B, cfg.cond());
  Matrix<T> dmf;
  linear_backward(c.mf, dy, P(layout_.out_w), g[layout_.out_w], &g[layout_.out_b], &dmf);
  Matrix<T> dmodf = Matrix<T>::Zero(B, 2 * H);
  const Matrix<T> dnf = modulate_backward(dmf, c.nf, c.modf, dmodf, 0, H, nt);
  Matrix<T> dx = Matrix<T>::Zero(N, H);
  layer_norm_backward(dnf, c.nf, c.rstdf, dx);
  {
    Matrix<T> tmp;
    linear_backward(c.sc, dmodf, P(layout_.final_mod_w), g[layout_.final_mod_w], &g[layout_.final_mod_b], &tmp);
    dsc += tmp;
  }

  for (int b = cfg.n_blocks - 1; b >= 0; --b) {
    const BlockIndex& L = layout_.blocks[static_cast<size_t>(b)];
    const BlockCache<T>& bc = c.blocks[static_cast<size_t>(b)];
    Matrix<T> dmod = Matrix<T>::Zero(B, 9 * H);

    {
      const Matrix<T> d_o = gated_backward(dx, bc.o3, bc.mod, dmod, 8 * H, nt);
      Matrix<T> dgel;
      linear_backward(bc.g, d_o, P(L.ffn2_w), g[L.ffn2_w], &g[L.ffn2_b], &dgel);
      {
        T* dp = dgel.data();
        const T* hp = bc.h1.data();
        for (Index i = 0; i < dgel.size(); ++i) dp[i] *= gelu_grad(hp[i]);
      }
      Matrix<T> dm;
      linear_backward(bc.m3, dgel, P(L.ffn1_w), g[L.ffn1_w], &g[L.ffn1_b], &dm);
      const Matrix<T> dn = modulate_backward(dm, bc.n3, bc.mod, dmod, 6 * H, 7 * H, nt);
      layer_norm_backward(dn, bc.n3, bc.rstd3, dx);
    }
    {
      const Matrix<T> d_o = gated_backward(dx, bc.o2, bc.mod, dmod, 5 * H, nt);
      Matrix<T> da;
      linear_backward<T>(bc.a2, d_o, P(L.xout_w), g[L.xout_w], nullptr, &da);
      Matrix<T> dq, dk, dv;
      cross_attention_backward(bc.q2, bc.k2, bc.v2, c.text_offset, nt, heads, bc.p2, da, dq, dk, dv);
      linear_backward<T>(c.text, dk, P(L.xk_w), g[L.xk_w], nullptr, nullptr);
      linear_backward<T>(c.text, dv, P(L.xv_w), g[L.xv_w], nullptr, nullptr);
      Matrix<T> dm;
      linear_backward(bc.m2, dq, P(L.xq_w), g[L.xq_w], &g[L.xq_b], &dm);
      const Matrix<T> dn = modulate_backward(dm, bc.n2, bc.mod, dmod, 3 * H, 4 * H, nt);
      layer_norm_backward(dn, bc.n2, bc.rstd2, dx);
    }
    {
      const Matrix<T> d_o = gated_backward(dx, bc.o1, bc.mod, dmod, 2 * H, nt);
      Matrix<T> da;
      linear_backward(bc.a1, d_o, P(L.attn_out_w), g[L.attn_out_w], &g[L.attn_out_b], &da);
      const Matrix<T> dqkv = self_attention_backward(bc.qkv, bc.p1, da, B, nt, heads);
      Matrix<T> dm;
      linear_backward(bc.m1, dqkv, P(L.qkv_w), g[L.qkv_w], &g[L.qkv_b], &dm);
      const Matrix<T> dn = modulate_backward(dm, bc.n1, bc.mod, dmod, 0, H, nt);
      layer_norm_backward(dn, bc.n1, bc.rstd1, dx);
    }
    Matrix<T> tmp;
    linear_backward(c.sc, dmod, P(L.mod_w), g[L.mod_w], &g[L.mod_b], &tmp);
    dsc += tmp;
  }

  linear_backward<T>(c.x_in, dx, P(layout_.in_w), g[layout_.in_w], &g[layout_.in_b], nullptr);

  Matrix<T> dc(B, cfg.cond());
  for (Index i = 0; i < dc.size(); ++i) dc.data()[i] = dsc.data()[i] * silu_grad(c.cvec.data()[i]);
  Matrix<T> dh;
  linear_backward(c.t_hid, dc, P(layout_.t2_w), g[layout_.t2_w], &g[layout_.t2_b], &dh);
  for (Index i = 0; i < dh.size(); ++i) dh.data()[i] *= silu_grad(c.t_pre.data()[i]);
  linear_backward<T>(c.freq, dh, P(layout_.t1_w), g[layout_.t1_w], &g[layout_.t1_b], nullptr);
  linear_backward<T>(c.id_hid, dc, P(layout_.id2_w), g[layout_.id2_w], nullptr, &dh);
  for (Index i = 0; i < dh.size(); ++i) dh.data()[i] *= silu_grad(c.id_pre.data()[i]);
  linear_backward<T>(c.id_in, dh, P(layout_.id1_w), g[layout_.id1_w], nullptr, nullptr);
}

template <class T>
LatentCode Transformer<T>::forward(const LatentCode& w_t, int t, const ConditioningBundle& cond) const {
  const DenoiserInput<T> in = pack_inputs<T>(config_, {&w_t}, {t}, {&cond});
  return forward(in).template cast<double>();
}

template <class T>
VectorD Transformer<T>::time_embed(int t) const {
  if (t < 0 || t > config_.T) throw std::out_of_range("timestep outside [0, T]");
  Matrix<T> f = sinusoidal_features(t, config_.freq_dim).transpose().template cast<T>();
  Matrix<T> h = map<T>(linear(f, P(layout_.t1_w), &P(layout_.t1_b)), silu<T>);
  return linear(h, P(layout_.t2_w), &P(layout_.t2_b)).row(0).transpose().template cast<double>();
}

template <class T>
VectorD Transformer<T>::identity_embed(const std::optional<world::IdentityEmbedding>& id) const {
  Matrix<T> x = Matrix<T>::Zero(1, config_.id_dim);
  if (id && config_.identity_conditioning) {
    if (id->values.size() != config_.id_dim) throw std::invalid_argument("identity embedding has wrong dim");
    x.row(0) = id->values.transpose().template cast<T>();
  }
  Matrix<T> h = map<T>(linear<T>(x, P(layout_.id1_w), nullptr), silu<T>);
  return linear<T>(h, P(layout_.id2_w), nullptr).row(0).transpose().template cast<double>();
}

template <class T>
LatentCode Transformer<T>::head_on_input(const LatentCode& w_t, const ConditioningBundle& cond) const {
  const DenoiserInput<T> in = pack_inputs<T>(config_, {&w_t}, {0}, {&cond});
  const int nt = config_.tokens(), k = config_.k, d = config_.d;
  Matrix<T> xin = Matrix<T>::Zero(nt, 2 * d);
  xin.topLeftCorner(k, d) = in.w_t;
  xin.topRightCorner(k, d) = in.w_o;
  Matrix<T> x = linear(xin, P(layout_.in_w), &P(layout_.in_b)) + pos_;
  Matrix<T> n;
  std::vector<T> rstd;
  layer_norm(x, n, rstd);
  return linear(n, P(layout_.out_w), &P(layout_.out_b)).topRows(k).template cast<double>();
}

template <class T>
template <class U>
Transformer<U> Transformer<T>::cast() const {
  Transformer<U> out(config_);
  out.store_.seed = store_.seed;
  for (size_t i = 0; i < store_.size(); ++i)
    out.store_.params[i].value = store_.params[i].value.template cast<U>();
  return out;
}

template <class T>
Transformer<T> init_model(const ModelConfig& config, uint64_t seed) {
  Transformer<T> m(config);
  m.store().seed = seed;
  Rng rng(seed);
  for (auto& p : m.store().params) {
    const bool bias = p.name.ends_with(".bias");
    const bool adaln = p.name.find("adaln") != std::string::npos;
    if (bias || adaln) continue;
    const double a = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
    for (Index i = 0; i < p.value.size(); ++i)
      p.value.data()[i] = static_cast<T>(static_cast<float>(a * (2.0 * rng.uniform() - 1.0)));
  }
  return m;
}

template struct ParameterStore<float>;
template struct ParameterStore<double>;
template class Transformer<float>;
template class Transformer<double>;
template Transformer<double> Transformer<float>::cast<double>() const;
template Transformer<float> Transformer<double>::cast<float>() const;
template Transformer<float> Transformer<float>::cast<float>() const;
template Transformer<double> Transformer<double>::cast<double>() const;
template Transformer<float> init_model<float>(const ModelConfig&, uint64_t);
template Transformer<double> init_model<double>(const ModelConfig&, uint64_t);
template DenoiserInput<float> pack_inputs<float>(const ModelConfig&, const std::vector<const LatentCode*>&,
                                                 const std::vector<int>&,
                                                 const std::vector<const ConditioningBundle*>&);
template DenoiserInput<double> pack_inputs<double>(const ModelConfig&, const std::vector<const LatentCode*>&,
                                                   const std::vector<int>&,
                                                   const std::vector<const ConditioningBundle*>&);
template Matrix<float> matmul<float>(const Matrix<float>&, const Matrix<float>&);
template Matrix<double> matmul<double>(const Matrix<double>&, const Matrix<double>&);

}  // namespace editkit::model
