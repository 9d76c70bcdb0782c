#pragma once

#include "editkit/diffusion.hpp"
#include "editkit/evalkit.hpp"
#include "editkit/model.hpp"
#include "editkit/trainer.hpp"
#include "editkit/triplets.hpp"
#include "editkit/world.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace editkit {

struct SampleConfig {
  diffusion::GuidanceScales scales;
  int steps = 15;
  int t_start = 600;
  bool operator==(const SampleConfig&) const = default;
};

/// Every section of a run. Section seeds not given explicitly are derived
/// from the root seed as derive_seed(seed, section).
struct RunConfig {
  uint64_t seed = 0;
  world::WorldConfig world;
  triplets::DatasetOptions data;
  model::ModelConfig model;
  trainer::TrainConfig train;
  SampleConfig sample;
  evalkit::EvalConfig eval;
  uint64_t text_seed = 0;

  /// Cross-section checks; throws std::invalid_argument.
  void validate() const;
  nlohmann::json to_json() const;
  std::string fingerprint() const;
};

/// Defaults overlaid with `j`, then `root_seed` (when given) replacing the
/// file's root seed before the fan-out.
RunConfig make_run_config(const nlohmann::json& j, std::optional<uint64_t> root_seed = std::nullopt);
RunConfig load_run_config(const std::filesystem::path& path, std::optional<uint64_t> root_seed = std::nullopt);

}  // namespace editkit
