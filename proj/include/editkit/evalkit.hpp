#pragma once

#include "editkit/diffusion.hpp"
#include "editkit/model.hpp"
#include "editkit/text.hpp"
#include "editkit/trainer.hpp"
#include "editkit/world.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace editkit::evalkit {

struct EvalConfig {
  int n_views = 4;
  double yaw_range_deg = 30.0;    // views span [-yaw, +yaw]
  double pitch_range_deg = 20.0;  // and [-pitch, +pitch]
  std::vector<int> attributes;    // single-instruction suite; empty means all
  diffusion::GuidanceScales scales;
  int steps = 15;
  int t_start = 600;
  int n_test = 300;
  uint64_t seed = 0;
  int batch = 64;  // edits per sampler call

  void validate() const;
  bool operator==(const EvalConfig&) const = default;
};

/// Evenly spaced along the diagonal of the yaw/pitch box; one view sits at
/// the centre.
std::vector<world::CameraPose> view_poses(const EvalConfig& cfg);
std::vector<world::ImageVec> render_views(const world::World& world, const LatentCode& w, const EvalConfig& cfg);

double id_score(const world::World& world, const LatentCode& w_edit, const world::ImageVec& x_input,
                const EvalConfig& cfg);
/// sign * (l_attr(w_edit) - l_attr(w_o)) / sigma_attr.
double attribute_altering(const world::World& world, const LatentCode& w_o, const LatentCode& w_edit, int attr,
                          int sign = 1);
/// Mean over non-target attributes of |delta l_b| / sigma_b.
double attribute_dependency(const world::World& world, const LatentCode& w_o, const LatentCode& w_edit,
                            const std::vector<int>& targets);
double attribute_dependency(const world::World& world, const LatentCode& w_o, const LatentCode& w_edit, int attr);
/// Cosine of the joint-space image delta with the text direction; 0 when the
/// image does not move.
double directional_score(const world::World& world, const world::ImageVec& x_o, const world::ImageVec& x_e,
                         int attr, int sign);
/// Composite form: the text direction is the normalised sum over targets.
double directional_score(const world::World& world, const world::ImageVec& x_o, const world::ImageVec& x_e,
                         const std::vector<int>& attrs, const std::vector<int>& signs);

struct EditTask {
  int latent = 0;
  std::vector<int> attrs;
  std::vector<int> signs;
  std::string instruction;
};

/// Maps each task to an edited latent. Gets the source latents and the tasks.
using Editor = std::function<std::vector<LatentCode>(const std::vector<LatentCode>&, const std::vector<EditTask>&)>;

Editor model_editor(const model::Transformer<float>& model, const world::World& world,
                    const diffusion::NoiseSchedule& sched, const text::TextEncoder& encoder, const EvalConfig& cfg);
/// Ground truth: apply_edit for every target with the world's beta.
Editor oracle_editor(const world::World& world);

struct MetricsReport {
  double id = 0.0;
  double aa = 0.0;      // mean over samples of the mean over targets
  double aa_min = 0.0;  // mean over samples of the min over targets
  double ad = 0.0;
  double directional = 0.0;
  std::map<int, double> aa_per_attribute;
  int n_samples = 0;
  std::string ad_aggregation = "mean_abs";
  std::string fingerprint;
};

std::vector<LatentCode> test_latents(const world::World& world, const EvalConfig& cfg);

/// Latent i edits attribute attributes[i % n] with a positive held-out paraphrase.
std::vector<EditTask> single_suite(const world::World& world, const text::InstructionTemplateSet& templates,
                                   const EvalConfig& cfg, int n_latents);
/// Attributes 0, 1, 2 concatenated in all six orders, cycled over latents.
std::vector<EditTask> composite_suite(const world::World& world, const text::InstructionTemplateSet& templates,
                                      const EvalConfig& cfg, int n_latents);
/// m instructions per latent over attributes (i + j) % 4, j < m.
std::vector<EditTask> series_suite(const world::World& world, const text::InstructionTemplateSet& templates,
                                   const EvalConfig& cfg, int n_latents, int m);

MetricsReport evaluate(const Editor& editor, const world::World& world, const EvalConfig& cfg,
                       const std::vector<LatentCode>& latents, const std::vector<EditTask>& tasks);
/// Single-instruction suite over the given latents with the model sampler.
MetricsReport evaluate(const model::Transformer<float>& model, const world::World& world,
                       const diffusion::NoiseSchedule& sched, const text::TextEncoder& encoder, const EvalConfig& cfg,
                       const std::vector<LatentCode>& latents);

std::string to_json(const MetricsReport& report);
std::string eval_fingerprint(const EvalConfig& cfg);

struct Variant {
  std::string name;
  bool tpr_enabled = true;
  bool id_module_enabled = true;
  double lambda_id = 0.1;
};

/// base / tpr_on, tpr_off, no_lid, no_idcond.
Variant parse_variant(const std::string& name);
std::vector<Variant> default_variants();

struct VariantResult {
  Variant variant;
  double final_diffusion_loss = 0.0;
  bool reused = false;
  MetricsReport single;
  MetricsReport composite;
  std::vector<MetricsReport> series;  // 1..4 instructions
};

struct AblationResult {
  std::vector<VariantResult> rows;
  std::string comparison_csv;
  std::string improvement_csv;  // empty unless a tpr-on/tpr-off pair exists
};

struct AblationOptions {
  std::filesystem::path out_dir;  // checkpoints and CSVs; empty keeps everything in memory
  bool reuse_checkpoints = false;  // skip training when a matching final checkpoint exists
  trainer::ProgressFn progress;
  std::function<void(const std::string&)> log;
};

/// (tpr - no_tpr) / |no_tpr|.
double improvement_rate(double with_tpr, double without_tpr);

AblationResult ablation_run(const world::World& world, const triplets::Dataset& dataset,
                            const text::TextEncoder& encoder, const model::ModelConfig& model_config,
                            const trainer::TrainConfig& base, const std::vector<Variant>& variants,
                            const EvalConfig& eval_cfg, const AblationOptions& options = {});

/// Evaluates one checkpoint on the single, composite and 1-4 series suites.
VariantResult evaluate_suites(const model::Transformer<float>& model, const world::World& world,
                              const text::TextEncoder& encoder, const EvalConfig& cfg);

}  // namespace editkit::evalkit
