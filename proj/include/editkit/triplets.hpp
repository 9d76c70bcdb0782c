#pragma once

#include "editkit/text.hpp"
#include "editkit/world.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace editkit::triplets {

struct TripletExample {
  LatentCode w_o;
  LatentCode w_e;
  std::string instruction;
  int attr = 0;
  int sign = 1;
  double magnitude = 0.0;
};

enum class Split { kTrain, kVal };

struct DatasetOptions {
  int n = 20000;
  double train_fraction = 0.9;
  uint64_t seed = 0;
  /// Per-example magnitude jitter of +-20% around beta.
  bool magnitude_jitter = false;
};

struct DatasetManifest {
  int schema_version = 1;
  uint64_t world_seed = 0;
  std::string world_fingerprint;
  uint64_t dataset_seed = 0;
  int n = 0;
  int k = 0;
  int d = 0;
  double train_fraction = 0.0;
  bool magnitude_jitter = false;
  std::vector<int> per_attribute_counts;
  std::vector<std::string> vocabulary;
  std::map<std::string, std::string> checksums;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<TripletExample> examples;
  std::vector<Split> splits;

  std::vector<int> indices(Split split) const;
};

TripletExample sample_triplet(const world::World& world, const text::InstructionTemplateSet& templates,
                              Rng& rng, bool magnitude_jitter = false);

/// Pure function of (world, templates, options): example i uses its own seed.
Dataset generate_dataset(const world::World& world, const text::InstructionTemplateSet& templates,
                         const text::Vocabulary& vocab, const DatasetOptions& options);

DatasetManifest save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

DatasetManifest build_dataset(const world::World& world, const text::InstructionTemplateSet& templates,
                              const text::Vocabulary& vocab, const DatasetOptions& options,
                              const std::filesystem::path& dir);

/// Max |w_e - (w_o + sign*magnitude*D_attr)| over all examples.
double max_triplet_residual(const world::World& world, const Dataset& dataset);

}  // namespace editkit::triplets
