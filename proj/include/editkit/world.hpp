#pragma once

#include "editkit/common.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace editkit::world {

struct WorldConfig {
  int k = 8;
  int d = 32;
  int n_attr = 6;
  int img_dim = 256;
  int id_dim = 64;
  double edit_magnitude = 1.0;  // beta
  uint64_t seed = 0;

  /// Throws std::invalid_argument on any violated invariant.
  void validate() const;
};

struct CameraPose {
  double yaw = 0.0;
  double pitch = 0.0;

  static CameraPose frontal() { return {}; }
};

struct ImageVec {
  VectorD values;
};

struct IdentityEmbedding {
  VectorD values;  // unit L2 norm
};

/// Dataset/test record from which the oracle encoder recovers a latent.
struct LatentRecord {
  std::optional<LatentCode> source_latent;
};

/// The frozen synthetic stand-in for generator, encoder, identity network and
/// attribute classifier. Immutable after build_world()/load_world().
class World {
 public:
  const WorldConfig& config() const { return config_; }
  /// Seed actually used after identity-separation retries.
  uint64_t effective_seed() const { return effective_seed_; }
  int latent_size() const { return config_.k * config_.d; }

  ImageVec generate(const LatentCode& w, CameraPose c) const;
  LatentCode invert(const LatentRecord& record) const;
  IdentityEmbedding extract_identity(const ImageVec& x) const;
  LatentCode apply_edit(const LatentCode& w, int attr, int sign, double magnitude) const;
  VectorD attribute_logits(const LatentCode& w) const;

  LatentCode sample_prior(Rng& rng) const;

  const LatentCode& direction(int attr) const;
  const LatentCode& prior_mean() const { return prior_mean_; }
  double prior_scale() const { return prior_scale_; }
  double probe_std(int attr) const;
  const std::vector<double>& probe_stds() const { return probe_std_; }

  /// F(G(w, c)) for a batch of flattened latents (n x k*d); rows are unit norm.
  MatrixD identity_batch(const MatrixD& flat_latents, CameraPose c) const;

  /// Cosine between F(G(w_i, c)) and unit target rows, with the gradient of
  /// each cosine w.r.t. its flattened latent written to `grad` when non-null.
  VectorD identity_cosine_batch(const MatrixD& flat_latents, CameraPose c,
                                const MatrixD& target_ids, MatrixD* grad) const;

  // Toy joint image/text space used by the directional score.
  int joint_dim() const { return static_cast<int>(joint_img_.rows()); }
  VectorD joint_image(const ImageVec& x) const;
  VectorD joint_text(int attr, int sign) const;

  /// Mean same-latent cross-pose cosine minus mean cross-latent cosine.
  double identity_separation(uint64_t seed, int trials = 200) const;

  /// SHA-256 over the canonical manifest (which embeds blob checksums).
  std::string fingerprint() const;

  friend World build_world(const WorldConfig& config);
  friend World build_attempt(const WorldConfig& config, uint64_t seed);
  friend void save_world(const World& world, const std::filesystem::path& dir);
  friend World load_world(const std::filesystem::path& dir);

 private:
  struct NamedTensor {
    std::string name;
    MatrixD value;
  };

  World() = default;
  std::vector<NamedTensor> named_tensors() const;
  void check_shape(const LatentCode& w) const;
  void finalize();
  VectorD generator_input(const LatentCode& w, CameraPose c) const;

  WorldConfig config_;
  uint64_t effective_seed_ = 0;
  MatrixD gen_w1_;  // hidden x (k*d + 2)
  VectorD gen_b1_;
  MatrixD gen_w2_;  // img x hidden
  VectorD gen_b2_;
  MatrixD id_proj_;  // id_dim x img
  std::vector<LatentCode> directions_;
  LatentCode prior_mean_;
  double prior_scale_ = 1.0;
  std::vector<double> probe_std_;
  MatrixD joint_img_;  // joint x img
  MatrixD joint_txt_;  // n_attr x joint, unit rows for sign +1

  // Derived at finalize(): identity head fused with the generator output layer.
  MatrixD fused_id_w_;  // id_dim x hidden
  VectorD fused_id_b_;
};

inline constexpr int kProbeSamples = 10000;
inline constexpr int kSeparationRetries = 8;
inline constexpr double kSeparationThreshold = 0.2;

World build_world(const WorldConfig& config);
void save_world(const World& world, const std::filesystem::path& dir);
World load_world(const std::filesystem::path& dir);

double cosine(const VectorD& a, const VectorD& b);

}  // namespace editkit::world
