#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "editkit/world.hpp"

#include <cmath>

using namespace editkit;
using namespace editkit::world;

namespace {

const World& desk() {
  static const World w = build_world(WorldConfig{});
  return w;
}

double frob(const LatentCode& a, const LatentCode& b) { return (a.array() * b.array()).sum(); }

}  // namespace

TEST_CASE("config validation") {
  WorldConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_attr = 65;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("capacity"), std::invalid_argument);
  c = {};
  c.k = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.edit_magnitude = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.n_attr = 65;
  CHECK_THROWS_AS(build_world(c), std::invalid_argument);
}

TEST_CASE("deterministic build") {
  WorldConfig c;
  c.seed = 12;
  const World a = build_world(c), b = build_world(c);
  CHECK(a.fingerprint() == b.fingerprint());
  CHECK(a.effective_seed() == b.effective_seed());
  Rng r1(3), r2(3);
  const LatentCode w = a.sample_prior(r1);
  CHECK(w == b.sample_prior(r2));
  CHECK(a.generate(w, {0.2, -0.1}).values == b.generate(w, {0.2, -0.1}).values);
  c.seed = 13;
  CHECK(build_world(c).fingerprint() != a.fingerprint());
}

TEST_CASE("directions are orthonormal") {
  WorldConfig c;
  c.n_attr = 4;
  const World w4 = build_world(c);
  CHECK(std::abs(frob(w4.direction(0), w4.direction(1))) < 1e-6);
  const World& w = desk();
  for (int a = 0; a < w.config().n_attr; ++a)
    for (int b = 0; b < w.config().n_attr; ++b)
      CHECK(std::abs(frob(w.direction(a), w.direction(b)) - (a == b ? 1.0 : 0.0)) < 1e-6);
  CHECK_THROWS_AS(w.direction(6), std::out_of_range);
}

TEST_CASE("probe std near one") {
  const World& w = desk();
  for (int a = 0; a < w.config().n_attr; ++a) CHECK(std::abs(w.probe_std(a) - 1.0) < 0.05);
}

TEST_CASE("generate") {
  const World& w = desk();
  Rng rng(4);
  int differ = 0;
  for (int i = 0; i < 100; ++i) {
    const LatentCode z = w.sample_prior(rng);
    const auto a = w.generate(z, CameraPose::frontal());
    CHECK(a.values == w.generate(z, CameraPose::frontal()).values);
    differ += (a.values - w.generate(z, {0.5, 0.0}).values).norm() > 0.0;
  }
  CHECK(differ == 100);
  for (int i = 0; i < 1000; ++i) CHECK(std::isfinite(w.generate(w.sample_prior(rng), {0.1, 0.1}).values.norm()));
  CHECK_THROWS_AS(w.generate(LatentCode::Zero(7, 32), {}), std::invalid_argument);

  // small pose changes give small image changes
  const LatentCode z = w.sample_prior(rng);
  const auto base = w.generate(z, {0.1, 0.0});
  const double near = (w.generate(z, {0.1 + 1e-6, 0.0}).values - base.values).norm();
  const double far = (w.generate(z, {0.1 + 1e-2, 0.0}).values - base.values).norm();
  CHECK(near < 1e-3 * far);
}

TEST_CASE("invert is the oracle") {
  const World& w = desk();
  Rng rng(5);
  const LatentCode z = w.sample_prior(rng);
  CHECK(w.invert(LatentRecord{z}) == z);
  CHECK(w.generate(w.invert(LatentRecord{z}), {0.3, 0.1}).values == w.generate(z, {0.3, 0.1}).values);
  CHECK_THROWS(w.invert(LatentRecord{}));
}

TEST_CASE("identity extraction") {
  const World& w = desk();
  Rng rng(6);
  const auto x = w.generate(w.sample_prior(rng), {});
  const auto f = w.extract_identity(x);
  CHECK(std::abs(f.values.norm() - 1.0) < 1e-6);
  CHECK(f.values.dot(f.values) == doctest::Approx(1.0));
  CHECK_THROWS_AS(w.extract_identity(ImageVec{VectorD::Zero(w.config().img_dim)}), std::domain_error);
  CHECK_THROWS_AS(w.extract_identity(ImageVec{VectorD::Ones(3)}), std::invalid_argument);

  double same = 0.0, cross = 0.0;
  for (int i = 0; i < 200; ++i) {
    const LatentCode a = w.sample_prior(rng), b = w.sample_prior(rng);
    const CameraPose c1{rng.uniform() - 0.5, rng.uniform() - 0.5}, c2{rng.uniform() - 0.5, rng.uniform() - 0.5};
    const auto fa = w.extract_identity(w.generate(a, c1)).values;
    same += cosine(fa, w.extract_identity(w.generate(a, c2)).values);
    cross += cosine(fa, w.extract_identity(w.generate(b, c1)).values);
  }
  CHECK(same / 200 - cross / 200 >= 0.2);
  CHECK(w.identity_separation(99) >= 0.2);
}

TEST_CASE("edits and logits") {
  const World& w = desk();
  Rng rng(7);
  CHECK(w.attribute_logits(w.prior_mean()).cwiseAbs().maxCoeff() < 1e-12);
  for (int i = 0; i < 100; ++i) {
    const LatentCode z = w.sample_prior(rng);
    const VectorD l = w.attribute_logits(z);
    for (int a = 0; a < w.config().n_attr; ++a) CHECK(std::abs(l(a) - frob(z - w.prior_mean(), w.direction(a))) < 1e-9);
    const int a = i % w.config().n_attr;
    const int s = i % 2 ? 1 : -1;
    const double m = 0.5 + rng.uniform();
    const VectorD dl = w.attribute_logits(w.apply_edit(z, a, s, m)) - l;
    for (int b = 0; b < w.config().n_attr; ++b) CHECK(std::abs(dl(b) - (a == b ? s * m : 0.0)) < 1e-6);
    CHECK(w.apply_edit(z, a, s, 0.0) == z);
  }
  const LatentCode z = w.sample_prior(rng);
  CHECK(w.apply_edit(z, 2, 1, 1.0) == z + w.direction(2));
  CHECK_THROWS_AS(w.apply_edit(z, 6, 1, 1.0), std::out_of_range);
  CHECK_THROWS_AS(w.apply_edit(z, -1, 1, 1.0), std::out_of_range);
}

TEST_CASE("identity cosine batch matches per-example path and its gradient") {
  WorldConfig c;
  c.k = 4;
  c.d = 8;
  c.img_dim = 32;
  c.id_dim = 8;
  const World w = build_world(c);
  Rng rng(8);
  MatrixD flat(3, 32), targets(3, 8);
  for (int i = 0; i < 3; ++i) {
    const LatentCode z = w.sample_prior(rng);
    flat.row(i) = Eigen::Map<const VectorD>(z.data(), z.size()).transpose();
    targets.row(i) = w.extract_identity(w.generate(w.sample_prior(rng), {})).values.transpose();
  }
  MatrixD grad;
  const VectorD cos = w.identity_cosine_batch(flat, {}, targets, &grad);
  for (int i = 0; i < 3; ++i) {
    const LatentCode z = Eigen::Map<const MatrixD>(flat.row(i).data(), 4, 8);
    CHECK(cos(i) == doctest::Approx(w.extract_identity(w.generate(z, {})).values.dot(targets.row(i).transpose())));
  }
  const MatrixD ids = w.identity_batch(flat, {});
  for (int i = 0; i < 3; ++i) CHECK(std::abs(ids.row(i).norm() - 1.0) < 1e-9);
  const double h = 1e-6;
  for (int j = 0; j < 32; j += 5) {
    MatrixD up = flat, down = flat;
    up(1, j) += h;
    down(1, j) -= h;
    const double fd = (w.identity_cosine_batch(up, {}, targets, nullptr)(1) -
                       w.identity_cosine_batch(down, {}, targets, nullptr)(1)) / (2 * h);
    CHECK(fd == doctest::Approx(grad(1, j)).epsilon(1e-5));
  }
}

TEST_CASE("save and load are bit-exact") {
  const World& w = desk();
  const auto dir = std::filesystem::temp_directory_path() / "editkit_world_test";
  std::filesystem::remove_all(dir);
  save_world(w, dir);
  const World l = load_world(dir);
  CHECK(l.fingerprint() == w.fingerprint());
  Rng rng(9);
  const LatentCode z = w.sample_prior(rng);
  CHECK(l.generate(z, {0.2, 0.3}).values == w.generate(z, {0.2, 0.3}).values);
  CHECK(l.probe_stds() == w.probe_stds());
  CHECK(l.joint_image(w.generate(z, {})) == w.joint_image(w.generate(z, {})));

  std::filesystem::path blob;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.path().extension() == ".bin") blob = e.path();
  REQUIRE(!blob.empty());
  std::string bytes = read_text_file(blob);
  bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 4);
  write_text_file(blob, bytes);
  CHECK_THROWS_AS(load_world(dir), ArtifactError);
  CHECK_THROWS_AS(load_world(dir / "nothing"), ArtifactError);
  std::filesystem::remove_all(dir);
}
