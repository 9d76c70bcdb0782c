#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "editkit/sampler.hpp"

#include <cmath>

using namespace editkit;
using namespace editkit::diffusion;

namespace {

const NoiseSchedule& sched() {
  static const NoiseSchedule s = make_schedule();
  return s;
}

MatrixD fill(double v) { return MatrixD::Constant(2, 3, v); }

}  // namespace

TEST_CASE("schedule") {
  const NoiseSchedule& s = sched();
  CHECK(s.T() == 1000);
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1) == 1.0 - s.beta(1));
  CHECK(s.beta(1) == doctest::Approx(1e-4));
  CHECK(s.beta(1000) == doctest::Approx(0.02));
  CHECK(s.beta(500) - s.beta(499) == doctest::Approx(s.beta(2) - s.beta(1)));
  CHECK(s.alpha_bar(1000) < 0.01);
  for (int t = 1; t <= 1000; ++t) {
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    CHECK(s.alpha_bar(t) > 0.0);
    CHECK(s.alpha(t) == 1.0 - s.beta(t));
  }
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const int t = rng.uniform_int(1, 1000);
    double prod = 1.0;
    for (int u = 1; u <= t; ++u) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (u - 1) / 999.0);
    CHECK(std::abs(prod - s.alpha_bar(t)) < 1e-12);
  }
  CHECK_THROWS_AS(make_schedule(1), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(100, 0.02, 0.01), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(100, 0.0, 0.01), std::invalid_argument);
  CHECK_THROWS_AS(s.alpha_bar(1001), std::out_of_range);
}

TEST_CASE("forward process") {
  const NoiseSchedule& s = sched();
  Rng rng(2);
  const MatrixD w0 = rng.normal_matrix(8, 32), eps = rng.normal_matrix(8, 32);
  CHECK((q_sample(s, w0, 1, eps) - w0).norm() / w0.norm() < 0.02);
  CHECK(q_sample(s, w0, 300, MatrixD::Zero(8, 32)) == std::sqrt(s.alpha_bar(300)) * w0);
  CHECK_THROWS_AS(q_sample(s, w0, 0, eps), std::out_of_range);
  CHECK_THROWS_AS(q_sample(s, w0, 5, MatrixD::Zero(3, 3)), std::invalid_argument);

  for (int t : {10, 400, 900}) {
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < 10000; ++i) {
      const double v = q_sample(s, MatrixD::Zero(1, 1), t, rng.normal_matrix(1, 1))(0, 0);
      sum += v, sq += v * v;
    }
    const double var = sq / 10000 - (sum / 10000) * (sum / 10000);
    CHECK(std::abs(var / (1.0 - s.alpha_bar(t)) - 1.0) < 0.05);
  }
}

TEST_CASE("x0 prediction") {
  const NoiseSchedule& s = sched();
  Rng rng(3);
  const MatrixD w0 = rng.normal_matrix(8, 32), eps = rng.normal_matrix(8, 32);
  for (int t = 1; t <= 1000; t += 37) CHECK((predict_x0(s, q_sample(s, w0, t, eps), t, eps) - w0).cwiseAbs().maxCoeff() < 1e-9);
  const MatrixD wt = rng.normal_matrix(8, 32);
  CHECK(predict_x0(s, wt, 700, MatrixD::Zero(8, 32)) == wt / std::sqrt(s.alpha_bar(700)));
  const double r = predict_x0(s, wt, 950, MatrixD::Zero(8, 32)).norm() / predict_x0(s, wt, 500, MatrixD::Zero(8, 32)).norm();
  CHECK(r == doctest::Approx(std::sqrt(s.alpha_bar(500) / s.alpha_bar(950))));
  CHECK_THROWS_AS(predict_x0(s, wt, 1001, wt), std::out_of_range);
}

TEST_CASE("ddim steps") {
  const NoiseSchedule& s = sched();
  Rng rng(4);
  const MatrixD w0 = rng.normal_matrix(8, 32), eps = rng.normal_matrix(8, 32);
  const MatrixD wt = q_sample(s, w0, 600, eps);
  CHECK_THROWS_AS(ddim_step(s, wt, 600, 600, eps), std::invalid_argument);
  CHECK(ddim_step(s, wt, 600, 0, eps) == predict_x0(s, wt, 600, eps));

  const MatrixD x0 = predict_x0(s, wt, 600, eps);
  const MatrixD manual = std::sqrt(s.alpha_bar(200)) * x0 + std::sqrt(1.0 - s.alpha_bar(200)) * eps;
  CHECK((ddim_step(s, wt, 600, 200, eps) - manual).cwiseAbs().maxCoeff() < 1e-12);

  const DDIMPlan plan = make_plan(s, 600, 15);
  MatrixD w = wt;
  for (size_t i = 0; i < plan.timesteps.size(); ++i) w = ddim_step(s, w, plan.timesteps[i], plan.prev(i), eps);
  CHECK((w - w0).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("plan") {
  const DDIMPlan p = make_plan(sched(), 600, 15);
  REQUIRE(p.timesteps.size() == 15);
  CHECK(p.start() == 600);
  CHECK(p.timesteps.back() == 40);
  CHECK(p.prev(14) == 0);
  for (size_t i = 1; i < p.timesteps.size(); ++i) CHECK(p.timesteps[i] < p.timesteps[i - 1]);
  CHECK(make_plan(sched(), 5, 5).timesteps == std::vector<int>{5, 4, 3, 2, 1});
  CHECK_THROWS_AS(make_plan(sched(), 5, 6), std::invalid_argument);
  CHECK_THROWS_AS(make_plan(sched(), 0, 1), std::out_of_range);
}

TEST_CASE("guidance composition") {
  Rng rng(5);
  const MatrixD u = rng.normal_matrix(2, 3), i = rng.normal_matrix(2, 3), f = rng.normal_matrix(2, 3);
  CHECK(cfg_compose(u, i, f, {1.0, 1.0}) == f);
  CHECK(cfg_compose(u, i, f, {0.0, 0.0}) == u);
  CHECK(cfg_compose(u, i, f, {1.0, 0.0}) == i);
  CHECK(cfg_compose(fill(0.0), fill(1.0), fill(2.0), {1.5, 2.0}) == fill(3.5));
  CHECK_THROWS_AS(cfg_compose(u, i, MatrixD::Zero(3, 3), {1.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(cfg_compose(u, i, f, {NAN, 1.0}), std::invalid_argument);
}

namespace {

struct SamplerFixture {
  world::World w;
  text::TextEncoder encoder;
  model::Transformer<double> model;

  static world::WorldConfig world_config() {
    world::WorldConfig c;
    c.k = 4;
    c.d = 8;
    c.img_dim = 32;
    c.id_dim = 8;
    return c;
  }
  static text::TextEncoder make_encoder() {
    const auto t = text::builtin_templates();
    return {text::Vocabulary::from_templates({&t}), text::TextEmbedder(256, 8, 3)};
  }
  static model::ModelConfig model_config() {
    model::ModelConfig c;
    c.k = 4;
    c.d = 8;
    c.h = 16;
    c.n_blocks = 1;
    c.n_heads = 2;
    c.d_txt = 8;
    c.id_dim = 8;
    c.freq_dim = 8;
    return c;
  }

  SamplerFixture()
      : w(world::build_world(world_config())),
        encoder(make_encoder()),
        model(model::init_model<double>(model_config(), 9)) {
    // Live weights so every condition changes the output.
    Rng rng(10);
    for (auto& p : model.store().params)
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = 0.2 * rng.normal();
  }
};

const SamplerFixture& sfx() {
  static const SamplerFixture f;
  return f;
}

// One condition at a time, single-example forwards, guidance and DDIM written out.
LatentCode reference_edit(const SamplerFixture& f, const LatentCode& w_o, const std::string& instruction,
                          GuidanceScales g, const DDIMPlan& plan, uint64_t seed) {
  const NoiseSchedule& s = sched();
  Rng rng(seed);
  const MatrixD noise = rng.normal_matrix(4, 8);
  LatentCode w = std::sqrt(s.alpha_bar(plan.start())) * w_o + std::sqrt(1.0 - s.alpha_bar(plan.start())) * noise;
  const auto id = f.w.extract_identity(f.w.generate(w_o, {}));
  const auto c_img = model::make_conditioning(w_o, id, std::nullopt);
  const auto c_full = model::make_conditioning(w_o, id, f.encoder.encode(instruction));
  for (size_t i = 0; i < plan.timesteps.size(); ++i) {
    const int t = plan.timesteps[i], tp = plan.prev(i);
    const MatrixD eu = f.model.forward(w, t, model::null_conditioning());
    const MatrixD ei = f.model.forward(w, t, c_img);
    const MatrixD ef = f.model.forward(w, t, c_full);
    const MatrixD eps = eu + g.image * (ei - eu) + g.text * (ef - ei);
    const MatrixD x0 = (w - std::sqrt(1.0 - s.alpha_bar(t)) * eps) / std::sqrt(s.alpha_bar(t));
    w = std::sqrt(s.alpha_bar(tp)) * x0 + std::sqrt(1.0 - s.alpha_bar(tp)) * eps;
  }
  return w;
}

}  // namespace

TEST_CASE("sampler matches a hand-written reference") {
  const SamplerFixture& f = sfx();
  const DDIMPlan plan = make_plan(sched(), 300, 5);
  Rng rng(11);
  const LatentCode w_o = f.w.sample_prior(rng);
  for (GuidanceScales g : {GuidanceScales{1.0, 2.0}, GuidanceScales{0.0, 0.0}, GuidanceScales{1.5, 7.5}}) {
    Rng a(77);
    const LatentCode out = sample_edit(f.model, f.w, sched(), f.encoder, w_o, "add bangs", g, plan, 300, a);
    Rng b(77);
    const LatentCode ref = reference_edit(f, w_o, "add bangs", g, plan, b.next_u64());
    CHECK((out - ref).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("zero scales ignore the instruction") {
  const SamplerFixture& f = sfx();
  const DDIMPlan plan = make_plan(sched(), 300, 5);
  Rng rng(12);
  const LatentCode w_o = f.w.sample_prior(rng);
  Rng a(5), b(5);
  CHECK(sample_edit(f.model, f.w, sched(), f.encoder, w_o, "add bangs", {0.0, 0.0}, plan, 300, a) ==
        sample_edit(f.model, f.w, sched(), f.encoder, w_o, "make the person smile", {0.0, 0.0}, plan, 300, b));
  Rng c(5), d(5);
  CHECK(sample_edit(f.model, f.w, sched(), f.encoder, w_o, "add bangs", {1.0, 2.0}, plan, 300, c) !=
        sample_edit(f.model, f.w, sched(), f.encoder, w_o, "make the person smile", {1.0, 2.0}, plan, 300, d));
}

TEST_CASE("batching is bit-exact") {
  const SamplerFixture& f = sfx();
  const DDIMPlan plan = make_plan(sched(), 300, 4);
  Rng rng(13);
  std::vector<LatentCode> w_o;
  std::vector<std::string> instr{"add bangs", "make the person smile", "remove the bangs"};
  std::vector<uint64_t> seeds{1, 2, 3};
  for (int i = 0; i < 3; ++i) w_o.push_back(f.w.sample_prior(rng));
  const auto batched = sample_edits(f.model, f.w, sched(), f.encoder, w_o, instr, {1.0, 2.0}, plan, 300, seeds);
  for (int i = 0; i < 3; ++i) {
    const auto one = sample_edits(f.model, f.w, sched(), f.encoder, {w_o[i]}, {instr[i]}, {1.0, 2.0}, plan, 300,
                                  {seeds[i]});
    CHECK(one.front() == batched[i]);
  }
  CHECK(sample_edits(f.model, f.w, sched(), f.encoder, w_o, instr, {1.0, 2.0}, plan, 300, seeds) == batched);

  std::vector<LatentCode> start;
  std::vector<model::ConditioningBundle> img, full;
  for (int i = 0; i < 3; ++i) {
    start.push_back(rng.normal_matrix(4, 8));
    img.push_back(image_condition(f.model.config(), f.w, w_o[i]));
    full.push_back(image_condition(f.model.config(), f.w, w_o[i], f.encoder.encode(instr[i])));
  }
  CHECK(guided_denoise(f.model, sched(), start, img, full, {1.2, 3.0}, plan, true) ==
        guided_denoise(f.model, sched(), start, img, full, {1.2, 3.0}, plan, false));
}

TEST_CASE("sampler input errors") {
  const SamplerFixture& f = sfx();
  const DDIMPlan plan = make_plan(sched(), 300, 4);
  Rng rng(14);
  const LatentCode w_o = f.w.sample_prior(rng);
  std::string longest;
  for (int i = 0; i < 40; ++i) longest += "add bangs ";
  CHECK_THROWS_AS(sample_edit(f.model, f.w, sched(), f.encoder, w_o, longest, {1.0, 2.0}, plan, 300, rng),
                  std::length_error);
  CHECK_THROWS_AS(sample_edit(f.model, f.w, sched(), f.encoder, LatentCode::Zero(3, 8), "add bangs", {1.0, 2.0},
                              plan, 300, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(sample_edit(f.model, f.w, sched(), f.encoder, w_o, "add bangs", {1.0, 2.0}, plan, 200, rng),
                  std::invalid_argument);
}
