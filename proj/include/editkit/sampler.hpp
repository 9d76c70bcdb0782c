#pragma once

#include "editkit/diffusion.hpp"
#include "editkit/model.hpp"
#include "editkit/text.hpp"
#include "editkit/world.hpp"

#include <string>
#include <vector>

namespace editkit::diffusion {

/// Image condition for an input latent: w_o plus, when the model uses it,
/// the identity of its frontal render.
model::ConditioningBundle image_condition(const model::ModelConfig& cfg, const world::World& world,
                                          const LatentCode& w_o,
                                          std::optional<text::TextEmbeddingSeq> text = std::nullopt);

/// Partial-noising edit: q_sample to t_start, then guided DDIM down the plan.
/// The three guidance passes of a step run as one batch.
template <class T>
LatentCode sample_edit(const model::Transformer<T>& model, const world::World& world, const NoiseSchedule& sched,
                       const text::TextEncoder& encoder, const LatentCode& w_o, const std::string& instruction,
                       GuidanceScales scales, const DDIMPlan& plan, int t_start, Rng& rng);

/// Many edits at once. Example i draws its starting noise from Rng(seeds[i]),
/// so results match sample_edit with that generator bit-for-bit.
template <class T>
std::vector<LatentCode> sample_edits(const model::Transformer<T>& model, const world::World& world,
                                     const NoiseSchedule& sched, const text::TextEncoder& encoder,
                                     const std::vector<LatentCode>& w_o, const std::vector<std::string>& instructions,
                                     GuidanceScales scales, const DDIMPlan& plan, int t_start,
                                     const std::vector<uint64_t>& seeds);

/// Same loop with precomputed noise and conditions. Exposed for tests that
/// need separate, unbatched passes as a reference.
template <class T>
std::vector<LatentCode> guided_denoise(const model::Transformer<T>& model, const NoiseSchedule& sched,
                                       const std::vector<LatentCode>& w_start,
                                       const std::vector<model::ConditioningBundle>& image_only,
                                       const std::vector<model::ConditioningBundle>& full, GuidanceScales scales,
                                       const DDIMPlan& plan, bool batch_conditions = true);

}  // namespace editkit::diffusion
