#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "editkit/triplets.hpp"

using namespace editkit;
using namespace editkit::triplets;

namespace {

// 0.99 quantile of chi-square with 5 degrees of freedom
constexpr double kChi2Df5 = 15.086;

struct Fixture {
  world::World w = world::build_world(world::WorldConfig{});
  text::InstructionTemplateSet templates = text::builtin_templates();
  text::Vocabulary vocab = text::Vocabulary::from_templates({&templates});
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

const std::filesystem::path kRoot = std::filesystem::temp_directory_path() / "editkit_triplets_test";

}  // namespace

TEST_CASE("sample triplet") {
  const Fixture& f = fx();
  Rng rng(1);
  std::vector<int> counts(f.w.config().n_attr, 0);
  for (int i = 0; i < 10000; ++i) {
    const TripletExample ex = sample_triplet(f.w, f.templates, rng);
    ++counts[ex.attr];
    CHECK(ex.magnitude == f.w.config().edit_magnitude);
    if (i % 50 == 0) {
      CHECK((ex.w_e - (ex.w_o + ex.sign * ex.magnitude * f.w.direction(ex.attr))).cwiseAbs().maxCoeff() <= 1e-6);
      const VectorD dl = f.w.attribute_logits(ex.w_e) - f.w.attribute_logits(ex.w_o);
      CHECK(dl(ex.attr) == doctest::Approx(ex.sign * ex.magnitude).epsilon(1e-6));
      CHECK(f.templates.mentioned_attributes(ex.instruction) == std::vector<int>{ex.attr});
      const auto& list = f.templates.templates(ex.attr, ex.sign);
      CHECK(std::find(list.begin(), list.end(), ex.instruction) != list.end());
    }
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - 10000.0 / 6) * (c - 10000.0 / 6) / (10000.0 / 6);
  CHECK(chi2 < kChi2Df5);

  Rng jr(2);
  for (int i = 0; i < 200; ++i) {
    const TripletExample ex = sample_triplet(f.w, f.templates, jr, true);
    CHECK(ex.magnitude >= 0.8);
    CHECK(ex.magnitude <= 1.2);
  }
}

TEST_CASE("dataset generation is deterministic and split is disjoint") {
  const Fixture& f = fx();
  DatasetOptions o;
  o.n = 200;
  o.seed = 5;
  const Dataset a = generate_dataset(f.w, f.templates, f.vocab, o);
  const Dataset b = generate_dataset(f.w, f.templates, f.vocab, o);
  REQUIRE(a.examples.size() == 200);
  for (size_t i = 0; i < 200; ++i) {
    CHECK(a.examples[i].w_o == b.examples[i].w_o);
    CHECK(a.examples[i].instruction == b.examples[i].instruction);
  }
  const auto train = a.indices(Split::kTrain), val = a.indices(Split::kVal);
  CHECK(train.size() == 180);
  CHECK(val.size() == 20);
  for (int i : train) CHECK(std::find(val.begin(), val.end(), i) == val.end());
  CHECK(max_triplet_residual(f.w, a) <= 1e-6);

  int total = 0;
  for (int c : a.manifest.per_attribute_counts) total += c;
  CHECK(total == 200);

  o.train_fraction = 0.0;
  CHECK_THROWS_AS(generate_dataset(f.w, f.templates, f.vocab, o), std::invalid_argument);
  o.train_fraction = 0.9;
  o.n = -1;
  CHECK_THROWS_AS(generate_dataset(f.w, f.templates, f.vocab, o), std::invalid_argument);
}

TEST_CASE("persistence") {
  const Fixture& f = fx();
  std::filesystem::remove_all(kRoot);
  DatasetOptions o;
  o.n = 120;
  o.seed = 8;
  const auto m1 = build_dataset(f.w, f.templates, f.vocab, o, kRoot / "a");
  const auto m2 = build_dataset(f.w, f.templates, f.vocab, o, kRoot / "b");
  CHECK(m1.checksums == m2.checksums);
  CHECK(m1.world_fingerprint == f.w.fingerprint());

  const Dataset loaded = load_dataset(kRoot / "a");
  const Dataset fresh = generate_dataset(f.w, f.templates, f.vocab, o);
  REQUIRE(loaded.examples.size() == fresh.examples.size());
  for (size_t i = 0; i < fresh.examples.size(); ++i) {
    CHECK(loaded.examples[i].w_o == fresh.examples[i].w_o);
    CHECK(loaded.examples[i].w_e == fresh.examples[i].w_e);
    CHECK(f.w.invert(world::LatentRecord{loaded.examples[i].w_o}) == fresh.examples[i].w_o);
    CHECK(loaded.splits[i] == fresh.splits[i]);
  }
  CHECK(max_triplet_residual(f.w, loaded) <= 1e-6);

  save_dataset(loaded, kRoot / "c");
  for (const char* name : {"manifest.json", "w_o.bin", "w_e.bin", "instructions.jsonl"})
    CHECK(read_text_file(kRoot / "a" / name) == read_text_file(kRoot / "c" / name));

  std::string bytes = read_text_file(kRoot / "c" / "w_e.bin");
  bytes[17] = static_cast<char>(bytes[17] ^ 1);
  write_text_file(kRoot / "c" / "w_e.bin", bytes);
  CHECK_THROWS_WITH_AS(load_dataset(kRoot / "c"), doctest::Contains("checksum"), ArtifactError);
  CHECK_THROWS_AS(load_dataset(kRoot / "missing"), ArtifactError);

  o.n = 0;
  build_dataset(f.w, f.templates, f.vocab, o, kRoot / "empty");
  const Dataset empty = load_dataset(kRoot / "empty");
  CHECK(empty.examples.empty());
  CHECK(empty.indices(Split::kTrain).empty());
  std::filesystem::remove_all(kRoot);
}
