#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "editkit/model.hpp"

#include <cmath>
#include <set>

using namespace editkit;
using namespace editkit::model;

namespace {

ModelConfig probe_config() {
  ModelConfig c;
  c.k = 4;
  c.d = 6;
  c.h = 32;
  c.n_blocks = 2;
  c.n_heads = 4;
  c.d_txt = 8;
  c.id_dim = 5;
  c.freq_dim = 16;
  c.text_len = 12;
  return c;
}

world::IdentityEmbedding random_id(Rng& rng, int dim) {
  VectorD v(dim);
  for (int i = 0; i < dim; ++i) v(i) = rng.normal();
  return {v / v.norm()};
}

text::TextEmbeddingSeq random_text(Rng& rng, const ModelConfig& c, int used) {
  MatrixD t = MatrixD::Zero(c.text_len, c.d_txt);
  const int start = rng.uniform_int(0, c.text_len - used);
  for (int i = 0; i < used; ++i)
    for (int j = 0; j < c.d_txt; ++j) t(start + i, j) = rng.normal();
  return t;
}

ConditioningBundle full_bundle(Rng& rng, const ModelConfig& c) {
  return make_conditioning(rng.normal_matrix(c.k, c.d), random_id(rng, c.id_dim),
                           random_text(rng, c, rng.uniform_int(1, 5)));
}

// Every parameter gets a non-trivial value so gates and modulations are live.
template <class T>
void randomize(Transformer<T>& m, uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& p : m.store().params)
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(scale * rng.normal());
}

Eigen::Index closed_form_count(const ModelConfig& c) {
  const Eigen::Index H = c.h, C = c.cond(), d = c.d;
  const Eigen::Index input = 2 * d * H + H;
  const Eigen::Index time = c.freq_dim * C + C + C * C + C;
  const Eigen::Index ident = c.id_dim * C + C * C;
  const Eigen::Index block = (C * 9 * H + 9 * H) + (H * 3 * H + 3 * H) + (H * H + H) + (H * H + H) +
                             2 * c.d_txt * H + H * H + (H * 4 * H + 4 * H) + (4 * H * H + H);
  const Eigen::Index final_layer = C * 2 * H + 2 * H + H * d + d;
  return input + time + ident + c.n_blocks * block + final_layer;
}

}  // namespace

TEST_CASE("init is deterministic and parameter count matches closed form") {
  for (const ModelConfig& c : {ModelConfig{}, probe_config()}) {
    auto a = init_model<float>(c, 7);
    auto b = init_model<float>(c, 7);
    REQUIRE(a.store().size() == b.store().size());
    for (size_t i = 0; i < a.store().size(); ++i) CHECK(a.store().params[i].value == b.store().params[i].value);
    CHECK(a.store().scalar_count() == closed_form_count(c));
  }
  auto c = init_model<float>(ModelConfig{}, 8);
  CHECK(c.store().params[0].value != init_model<float>(ModelConfig{}, 7).store().params[0].value);
}

TEST_CASE("adaLN projections start at zero") {
  auto m = init_model<double>(probe_config(), 3);
  for (const auto& p : m.store().params)
    if (p.name.find("adaln") != std::string::npos) CHECK(p.value.isZero(0.0));
}

TEST_CASE("at init the blocks are identity maps") {
  const ModelConfig c = probe_config();
  auto m = init_model<double>(c, 11);
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const ConditioningBundle cond = full_bundle(rng, c);
    const LatentCode w = rng.normal_matrix(c.k, c.d);
    const int t = rng.uniform_int(0, c.T);
    CHECK(m.forward(w, t, cond) == m.head_on_input(w, cond));
  }
}

TEST_CASE("time embedding uses the sinusoidal closed form") {
  const int dim = 128;
  for (double t : {0.0, 1.0, 17.0, 600.0, 1000.0}) {
    const VectorD f = sinusoidal_features(t, dim);
    for (int j = 0; j < dim / 2; ++j) {
      const double freq = std::pow(10000.0, -static_cast<double>(j) / (dim / 2));
      CHECK(std::abs(f(j) - std::cos(t * freq)) < 1e-12);
      CHECK(std::abs(f(dim / 2 + j) - std::sin(t * freq)) < 1e-12);
    }
  }
  auto m = init_model<double>(ModelConfig{}, 1);
  CHECK(m.time_embed(5) == m.time_embed(5));
  CHECK((m.time_embed(0) - m.time_embed(1000)).norm() > 0.0);
  CHECK(m.time_embed(0).size() == m.identity_embed(std::nullopt).size());
  CHECK_THROWS_AS(m.time_embed(1001), std::out_of_range);
  CHECK_THROWS_AS(m.time_embed(-1), std::out_of_range);
}

TEST_CASE("identity embedding: null maps to zero, distinct ids stay distinct") {
  auto m = init_model<float>(ModelConfig{}, 2);
  randomize(m, 9, 0.1);
  CHECK(m.identity_embed(std::nullopt).isZero(0.0));
  Rng rng(4);
  std::set<std::vector<double>> seen;
  for (int i = 0; i < 100; ++i) {
    const VectorD e = m.identity_embed(random_id(rng, 64));
    seen.insert(std::vector<double>(e.data(), e.data() + e.size()));
  }
  CHECK(seen.size() == 100);
  CHECK_THROWS_AS(m.identity_embed(world::IdentityEmbedding{VectorD::Ones(3)}), std::invalid_argument);
}

TEST_CASE("output shape and input validation") {
  ModelConfig c = probe_config();
  auto m = init_model<double>(c, 1);
  Rng rng(1);
  const LatentCode w = rng.normal_matrix(c.k, c.d);
  const LatentCode out = m.forward(w, 10, null_conditioning());
  CHECK(out.rows() == c.k);
  CHECK(out.cols() == c.d);
  CHECK_THROWS_AS(m.forward(rng.normal_matrix(c.k + 1, c.d), 10, null_conditioning()), std::invalid_argument);
  ConditioningBundle bad = null_conditioning();
  bad.image_null = false;
  CHECK_THROWS_AS(m.forward(w, 10, bad), std::invalid_argument);
  ModelConfig wrong = c;
  wrong.n_heads = 5;
  CHECK_THROWS_AS(wrong.validate(), std::invalid_argument);
}

TEST_CASE("null conditioning equals explicit zero conditioning bit-exactly") {
  const ModelConfig c = probe_config();
  auto m = init_model<float>(c, 3);
  randomize(m, 12);
  Rng rng(8);
  const ConditioningBundle null = null_conditioning();
  CHECK(null.image_null);
  CHECK(null.text_null);
  const ConditioningBundle zeros = make_conditioning(LatentCode::Zero(c.k, c.d),
                                                     world::IdentityEmbedding{VectorD::Zero(c.id_dim)},
                                                     MatrixD::Zero(c.text_len, c.d_txt));
  for (int i = 0; i < 20; ++i) {
    const LatentCode w = rng.normal_matrix(c.k, c.d);
    const int t = rng.uniform_int(0, c.T);
    CHECK(m.forward(w, t, null) == m.forward(w, t, zeros));
  }
}

TEST_CASE("text-null drops the cross-attention contribution") {
  const ModelConfig c = probe_config();
  auto m = init_model<double>(c, 3);
  randomize(m, 13);
  Rng rng(9);
  const LatentCode w = rng.normal_matrix(c.k, c.d);
  const LatentCode w_o = rng.normal_matrix(c.k, c.d);
  const auto id = random_id(rng, c.id_dim);
  const auto no_text = make_conditioning(w_o, id, std::nullopt);
  const auto zero_text = make_conditioning(w_o, id, MatrixD::Zero(c.text_len, c.d_txt));
  const auto with_text = make_conditioning(w_o, id, random_text(rng, c, 3));
  CHECK(m.forward(w, 100, no_text) == m.forward(w, 100, zero_text));
  CHECK((m.forward(w, 100, no_text) - m.forward(w, 100, with_text)).norm() > 0.0);
}

TEST_CASE("GEMM rows do not depend on batch size") {
  Rng rng(21);
  for (int inner : {12, 64, 128, 512}) {
    const MatrixF w = rng.normal_matrix(inner, 96).cast<float>();
    const MatrixF big = rng.normal_matrix(1000, inner).cast<float>();
    const MatrixF full = matmul(big, w);
    for (int m : {1, 2, 3, 5, 8, 13, 16, 24, 64, 300}) {
      const MatrixF part = matmul(MatrixF(big.topRows(m)), w);
      CHECK(part == full.topRows(m));
    }
  }
}

TEST_CASE("batched forward matches single-example forward bit-exactly") {
  ModelConfig c = probe_config();
  auto m = init_model<float>(c, 4);
  randomize(m, 14);
  Rng rng(10);
  std::vector<LatentCode> ws;
  std::vector<ConditioningBundle> conds;
  std::vector<int> ts;
  for (int i = 0; i < 7; ++i) {
    ws.push_back(rng.normal_matrix(c.k, c.d));
    conds.push_back(i % 3 == 0 ? null_conditioning() : full_bundle(rng, c));
    ts.push_back(rng.uniform_int(1, c.T));
  }
  std::vector<const LatentCode*> wp;
  std::vector<const ConditioningBundle*> cp;
  for (int i = 0; i < 7; ++i) {
    wp.push_back(&ws[i]);
    cp.push_back(&conds[i]);
  }
  const MatrixF batched = m.forward(pack_inputs<float>(c, wp, ts, cp));
  for (int i = 0; i < 7; ++i) {
    const LatentCode single = m.forward(ws[i], ts[i], conds[i]);
    CHECK(single == batched.middleRows(i * c.k, c.k).cast<double>());
  }
}

TEST_CASE("square padding mode keeps the output shape") {
  ModelConfig c = probe_config();
  c.k = 7;
  c.square_pad = true;
  CHECK(c.tokens() == 9);
  auto m = init_model<double>(c, 1);
  randomize(m, 2);
  Rng rng(3);
  const LatentCode out = m.forward(rng.normal_matrix(c.k, c.d), 50, full_bundle(rng, c));
  CHECK(out.rows() == 7);
  CHECK(out.allFinite());
}

TEST_CASE("analytic gradients match central differences") {
  for (bool square : {false, true}) {
    ModelConfig c = probe_config();
    c.square_pad = square;
    if (square) c.k = 3;
    auto m = init_model<double>(c, 6);
    randomize(m, 15);
    Rng rng(11);
    std::vector<LatentCode> ws;
    std::vector<ConditioningBundle> conds;
    std::vector<int> ts;
    for (int i = 0; i < 3; ++i) {
      ws.push_back(rng.normal_matrix(c.k, c.d));
      conds.push_back(i == 2 ? null_conditioning() : full_bundle(rng, c));
      ts.push_back(rng.uniform_int(1, c.T));
    }
    std::vector<const LatentCode*> wp;
    std::vector<const ConditioningBundle*> cp;
    for (int i = 0; i < 3; ++i) {
      wp.push_back(&ws[i]);
      cp.push_back(&conds[i]);
    }
    const auto in = pack_inputs<double>(c, wp, ts, cp);
    // loss = 0.5 * mean(out^2)
    auto loss = [&](const Transformer<double>& model) {
      const MatrixD out = model.forward(in);
      return 0.5 * out.squaredNorm() / static_cast<double>(out.size());
    };
    ForwardCache<double> cache;
    const MatrixD out = m.forward(in, &cache);
    auto grads = m.store().zeros_like();
    m.backward(cache, out / static_cast<double>(out.size()), grads);

    Rng pick(12);
    int checked = 0;
    while (checked < 25) {
      const int pi = pick.uniform_int(0, static_cast<int>(m.store().size()) - 1);
      auto& value = m.store().params[static_cast<size_t>(pi)].value;
      const auto idx = static_cast<Eigen::Index>(pick.uniform_int(0, static_cast<int>(value.size()) - 1));
      const double orig = value.data()[idx];
      const double h = 1e-5;
      value.data()[idx] = orig + h;
      const double up = loss(m);
      value.data()[idx] = orig - h;
      const double down = loss(m);
      value.data()[idx] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads[static_cast<size_t>(pi)].data()[idx];
      const double scale = std::max(std::abs(numeric), std::abs(analytic));
      INFO(m.store().params[static_cast<size_t>(pi)].name, " analytic ", analytic, " numeric ", numeric);
      CHECK(std::abs(numeric - analytic) <= 1e-3 * scale + 1e-9);
      ++checked;
    }
  }
}

TEST_CASE("cast between precisions round-trips float parameters") {
  auto f = init_model<float>(probe_config(), 5);
  auto d = f.cast<double>();
  auto back = d.cast<float>();
  for (size_t i = 0; i < f.store().size(); ++i) CHECK(back.store().params[i].value == f.store().params[i].value);
}
