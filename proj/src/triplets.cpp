#include "editkit/triplets.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <numeric>
#include <sstream>

namespace editkit::triplets {

using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

std::string latents_bytes(const std::vector<TripletExample>& examples, bool edited) {
  std::string bytes;
  for (const auto& ex : examples) {
    const LatentCode& w = edited ? ex.w_e : ex.w_o;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const float f = static_cast<float>(w.data()[i]);
      bytes.append(reinterpret_cast<const char*>(&f), sizeof(float));
    }
  }
  return bytes;
}

std::string instructions_jsonl(const Dataset& ds) {
  std::string out;
  for (size_t i = 0; i < ds.examples.size(); ++i) {
    const auto& ex = ds.examples[i];
    json rec{{"text", ex.instruction},
             {"attr", ex.attr},
             {"sign", ex.sign},
             {"magnitude", ex.magnitude},
             {"split", ds.splits[i] == Split::kTrain ? "train" : "val"}};
    out += rec.dump() + "\n";
  }
  return out;
}

json manifest_to_json(const DatasetManifest& m) {
  return json{{"schema_version", m.schema_version},
              {"world_seed", m.world_seed},
              {"world_fingerprint", m.world_fingerprint},
              {"dataset_seed", m.dataset_seed},
              {"n", m.n},
              {"k", m.k},
              {"d", m.d},
              {"split", {{"train", m.train_fraction}, {"val", 1.0 - m.train_fraction}}},
              {"magnitude_jitter", m.magnitude_jitter},
              {"per_attribute_counts", m.per_attribute_counts},
              {"vocabulary", m.vocabulary},
              {"checksums", m.checksums}};
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.schema_version = j.at("schema_version");
  m.world_seed = j.at("world_seed");
  m.world_fingerprint = j.at("world_fingerprint");
  m.dataset_seed = j.at("dataset_seed");
  m.n = j.at("n");
  m.k = j.at("k");
  m.d = j.at("d");
  m.train_fraction = j.at("split").at("train");
  m.magnitude_jitter = j.at("magnitude_jitter");
  m.per_attribute_counts = j.at("per_attribute_counts").get<std::vector<int>>();
  m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  m.checksums = j.at("checksums").get<std::map<std::string, std::string>>();
  return m;
}

}  // namespace

std::vector<int> Dataset::indices(Split split) const {
  std::vector<int> out;
  for (size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == split) out.push_back(static_cast<int>(i));
  return out;
}

TripletExample sample_triplet(const world::World& world, const text::InstructionTemplateSet& templates,
                              Rng& rng, bool magnitude_jitter) {
  const int n_attr = world.config().n_attr;
  if (templates.n_attributes() < n_attr)
    throw std::invalid_argument("template set covers fewer attributes than the world");
  TripletExample ex;
  ex.w_o = world.sample_prior(rng);
  round_to_float(ex.w_o);
  ex.attr = rng.uniform_int(0, n_attr - 1);
  ex.sign = rng.uniform() < 0.5 ? -1 : 1;
  ex.magnitude = world.config().edit_magnitude;
  if (magnitude_jitter) {
    ex.magnitude *= 1.0 + 0.2 * (2.0 * rng.uniform() - 1.0);
    ex.magnitude = static_cast<float>(ex.magnitude);
  }
  ex.w_e = world.apply_edit(ex.w_o, ex.attr, ex.sign, ex.magnitude);
  round_to_float(ex.w_e);
  ex.instruction = text::render_instruction(templates, ex.attr, ex.sign, rng);
  return ex;
}

Dataset generate_dataset(const world::World& world, const text::InstructionTemplateSet& templates,
                         const text::Vocabulary& vocab, const DatasetOptions& options) {
  if (options.n < 0) throw std::invalid_argument("dataset size must be non-negative");
  if (!(options.train_fraction > 0.0 && options.train_fraction <= 1.0))
    throw std::invalid_argument("train fraction must lie in (0, 1]");

  Dataset ds;
  ds.examples.reserve(static_cast<size_t>(options.n));
  const uint64_t example_root = derive_seed(options.seed, "example");
  for (int i = 0; i < options.n; ++i) {
    Rng rng(splitmix64(example_root + static_cast<uint64_t>(i)));
    ds.examples.push_back(sample_triplet(world, templates, rng, options.magnitude_jitter));
  }

  std::vector<int> order(static_cast<size_t>(options.n));
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(options.seed, "split"));
  for (int i = options.n - 1; i > 0; --i) std::swap(order[i], order[split_rng.uniform_int(0, i)]);
  const int n_train = static_cast<int>(std::llround(options.n * options.train_fraction));
  ds.splits.assign(static_cast<size_t>(options.n), Split::kVal);
  for (int i = 0; i < n_train; ++i) ds.splits[order[i]] = Split::kTrain;

  auto& m = ds.manifest;
  m.schema_version = kSchemaVersion;
  m.world_seed = world.effective_seed();
  m.world_fingerprint = world.fingerprint();
  m.dataset_seed = options.seed;
  m.n = options.n;
  m.k = world.config().k;
  m.d = world.config().d;
  m.train_fraction = options.train_fraction;
  m.magnitude_jitter = options.magnitude_jitter;
  m.per_attribute_counts.assign(static_cast<size_t>(world.config().n_attr), 0);
  for (const auto& ex : ds.examples) ++m.per_attribute_counts[ex.attr];
  m.vocabulary = vocab.words();
  for (const auto& ex : ds.examples) tokenize(vocab, ex.instruction);  // closed-vocabulary check
  return ds;
}

DatasetManifest save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string wo = latents_bytes(ds.examples, false);
  const std::string we = latents_bytes(ds.examples, true);
  const std::string jl = instructions_jsonl(ds);
  write_text_file(dir / "w_o.bin", wo);
  write_text_file(dir / "w_e.bin", we);
  write_text_file(dir / "instructions.jsonl", jl);
  DatasetManifest m = ds.manifest;
  m.checksums = {{"w_o.bin", sha256_hex(wo)},
                 {"w_e.bin", sha256_hex(we)},
                 {"instructions.jsonl", sha256_hex(jl)}};
  write_text_file(dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");
  return m;
}

DatasetManifest build_dataset(const world::World& world, const text::InstructionTemplateSet& templates,
                              const text::Vocabulary& vocab, const DatasetOptions& options,
                              const std::filesystem::path& dir) {
  return save_dataset(generate_dataset(world, templates, vocab, options), dir);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw ArtifactError("dataset not found: " + dir.string());
  Dataset ds;
  ds.manifest = manifest_from_json(json::parse(read_text_file(dir / "manifest.json")));
  const auto& m = ds.manifest;
  if (m.schema_version != kSchemaVersion) throw ArtifactError("dataset schema version mismatch");

  auto checked = [&](const std::string& name) {
    std::string bytes = read_text_file(dir / name);
    const auto it = m.checksums.find(name);
    if (it == m.checksums.end() || sha256_hex(bytes) != it->second)
      throw ArtifactError("checksum mismatch for " + name);
    return bytes;
  };
  const std::string wo = checked("w_o.bin");
  const std::string we = checked("w_e.bin");
  const std::string jl = checked("instructions.jsonl");

  const size_t per = static_cast<size_t>(m.k) * m.d;
  if (wo.size() != per * m.n * sizeof(float) || we.size() != wo.size())
    throw ArtifactError("latent blob size does not match manifest");

  std::istringstream lines(jl);
  std::string line;
  for (int i = 0; i < m.n; ++i) {
    if (!std::getline(lines, line)) throw ArtifactError("instructions.jsonl is truncated");
    const json rec = json::parse(line);
    TripletExample ex;
    ex.instruction = rec.at("text");
    ex.attr = rec.at("attr");
    ex.sign = rec.at("sign");
    ex.magnitude = rec.at("magnitude");
    ex.w_o.resize(m.k, m.d);
    ex.w_e.resize(m.k, m.d);
    for (size_t j = 0; j < per; ++j) {
      float a, b;
      std::memcpy(&a, wo.data() + (i * per + j) * sizeof(float), sizeof(float));
      std::memcpy(&b, we.data() + (i * per + j) * sizeof(float), sizeof(float));
      ex.w_o.data()[j] = a;
      ex.w_e.data()[j] = b;
    }
    ds.splits.push_back(rec.at("split").get<std::string>() == "train" ? Split::kTrain : Split::kVal);
    ds.examples.push_back(std::move(ex));
  }
  std::vector<int> counts(m.per_attribute_counts.size(), 0);
  for (const auto& ex : ds.examples) {
    if (ex.attr < 0 || ex.attr >= static_cast<int>(counts.size()))
      throw ArtifactError("attribute index out of range in dataset");
    ++counts[ex.attr];
  }
  if (counts != m.per_attribute_counts) throw ArtifactError("per-attribute counts do not match records");
  return ds;
}

double max_triplet_residual(const world::World& world, const Dataset& ds) {
  double worst = 0.0;
  for (const auto& ex : ds.examples) {
    const LatentCode expected = world.apply_edit(ex.w_o, ex.attr, ex.sign, ex.magnitude);
    worst = std::max(worst, (ex.w_e - expected).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace editkit::triplets
