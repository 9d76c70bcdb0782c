#pragma once

#include "editkit/diffusion.hpp"
#include "editkit/model.hpp"
#include "editkit/text.hpp"
#include "editkit/triplets.hpp"
#include "editkit/world.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace editkit::trainer {

struct TrainConfig {
  int steps = 20000;
  int batch_size = 64;
  double lr = 1e-3;
  double p1 = 0.05;  // both conditions dropped
  double p2 = 0.05;  // text dropped
  double lambda_id = 0.1;
  int t_threshold = 600;
  double grad_clip = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int log_interval = 500;
  int checkpoint_interval = 0;  // 0: final checkpoint only
  uint64_t seed = 0;
  bool tpr_enabled = true;
  int tpr_max_start = 30;
  /// Identity modulation of the denoiser. L_ID is governed by lambda_id alone.
  bool id_module_enabled = true;
  double weight_ema = 0.0;  // decay of an averaged weight copy; 0 disables
  int warmup_steps = 500;     // linear ramp from lr/warmup_steps up to lr
  bool cosine_decay = true;   // half-cosine from lr down to 0 at `steps`

  void validate(int T) const;
  bool operator==(const TrainConfig&) const = default;
};

/// Step size for 1-based `step` under the warmup/decay settings.
double learning_rate(const TrainConfig& cfg, int step);

enum class DropoutBranch { kBothNull, kTextNull, kUnchanged };

DropoutBranch draw_dropout(Rng& rng, double p1, double p2);
model::ConditioningBundle apply_conditioning_dropout(const model::ConditioningBundle& cond, Rng& rng, double p1,
                                                     double p2);

/// One sampled optimisation batch, fully materialised so the loss can be
/// re-evaluated at perturbed parameters.
struct TrainingBatch {
  std::vector<LatentCode> w_e;
  std::vector<LatentCode> eps;
  std::vector<LatentCode> w_t;
  std::vector<int> t;
  std::vector<model::ConditioningBundle> cond;
  MatrixD target_ids;  // F(G(w_e, c0)), one row per example
  size_t size() const { return w_e.size(); }
};

struct LossBreakdown {
  double total = 0.0;
  double diffusion = 0.0;
  double identity = 0.0;
  int identity_count = 0;  // examples with t < t_th
};

/// Per-example inputs that do not depend on the step: token sequences and
/// identity embeddings of the original and edited frontal renders.
class TrainingContext {
 public:
  TrainingContext(const world::World& world, const triplets::Dataset& dataset, const text::TextEncoder& encoder,
                  const diffusion::NoiseSchedule& sched, const TrainConfig& config);

  TrainingBatch sample_batch(const std::vector<int>& indices, Rng& rng) const;
  const std::vector<int>& train_indices() const { return train_; }
  const world::World& world() const { return world_; }
  const diffusion::NoiseSchedule& schedule() const { return sched_; }
  const TrainConfig& config() const { return config_; }

 private:
  const world::World& world_;
  const triplets::Dataset& dataset_;
  const text::TextEncoder& encoder_;
  const diffusion::NoiseSchedule& sched_;
  TrainConfig config_;
  std::vector<text::TokenSequence> tokens_;
  MatrixD source_ids_;
  MatrixD target_ids_;
  std::vector<int> train_;
};

/// Mean squared error between eps-hat and eps over all entries.
double diffusion_loss(const MatrixD& eps_hat, const MatrixD& eps);

/// Mean of 1 - cos(F(G(x0_hat, c0)), target) over examples with t < t_th;
/// 0 when none qualify. Optionally writes d loss / d eps_hat.
double identity_loss(const world::World& world, const diffusion::NoiseSchedule& sched,
                     const std::vector<LatentCode>& w_t, const std::vector<LatentCode>& eps_hat,
                     const std::vector<int>& t, const MatrixD& target_ids, int t_threshold,
                     std::vector<LatentCode>* grad = nullptr, int* count = nullptr);

/// L = L_diff + lambda_id * L_ID for a batch; accumulates parameter gradients
/// when `grads` is non-null.
template <class T>
LossBreakdown batch_loss(const model::Transformer<T>& model, const TrainingContext& ctx, const TrainingBatch& batch,
                         std::vector<Matrix<T>>* grads);

struct LossLogEntry {
  int step = 0;
  double total = 0.0;
  double diffusion = 0.0;
  double identity = 0.0;
};

struct AdamState {
  std::vector<MatrixF> m;
  std::vector<MatrixF> v;
};

struct CheckpointRecord {
  int schema_version = 1;
  model::Transformer<float> model;
  AdamState adam;
  std::vector<MatrixF> ema;  // empty unless weight_ema > 0
  int step = 0;
  TrainConfig config;
  uint64_t world_seed = 0;
  std::string world_fingerprint;
  std::string dataset_fingerprint;
  uint64_t text_seed = 0;
  std::vector<std::string> vocabulary;
  std::vector<LossLogEntry> history;
  double ema_total = 0.0;
  double ema_diffusion = 0.0;
  double ema_identity = 0.0;
  double wall_seconds = 0.0;
};

using ProgressFn = std::function<void(const LossLogEntry&)>;

/// Fresh run from init_model(model_config, derive_seed(config.seed, "init")).
CheckpointRecord train(const world::World& world, const triplets::Dataset& dataset,
                       const text::TextEncoder& encoder, const model::ModelConfig& model_config,
                       const TrainConfig& config, const std::filesystem::path& checkpoint_dir = {},
                       const ProgressFn& progress = {});

/// Continues `record` for `extra_steps` more updates.
CheckpointRecord resume(const world::World& world, const triplets::Dataset& dataset,
                        const text::TextEncoder& encoder, CheckpointRecord record, int extra_steps,
                        const std::filesystem::path& checkpoint_dir = {}, const ProgressFn& progress = {});

/// The weights to sample with: the averaged copy when one is kept.
model::Transformer<float> inference_model(const CheckpointRecord& record);

/// Mean diffusion loss over the last logged interval.
double final_diffusion_loss(const CheckpointRecord& record);

void save_checkpoint(const CheckpointRecord& record, const std::filesystem::path& dir);
/// Refuses checkpoints built against a different world when `world` is given.
CheckpointRecord load_checkpoint(const std::filesystem::path& dir, const world::World* world = nullptr);

text::TextEncoder make_text_encoder(const std::vector<std::string>& vocabulary, int d_txt, uint64_t seed);
std::string dataset_fingerprint(const triplets::Dataset& dataset);

}  // namespace editkit::trainer
