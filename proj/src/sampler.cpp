#include "editkit/sampler.hpp"

namespace editkit::diffusion {

model::ConditioningBundle image_condition(const model::ModelConfig& cfg, const world::World& world,
                                          const LatentCode& w_o, std::optional<text::TextEmbeddingSeq> text) {
  std::optional<world::IdentityEmbedding> id;
  if (cfg.identity_conditioning) id = world.extract_identity(world.generate(w_o, world::CameraPose::frontal()));
  return model::make_conditioning(w_o, std::move(id), std::move(text));
}

template <class T>
std::vector<LatentCode> guided_denoise(const model::Transformer<T>& model, const NoiseSchedule& sched,
                                       const std::vector<LatentCode>& w_start,
                                       const std::vector<model::ConditioningBundle>& image_only,
                                       const std::vector<model::ConditioningBundle>& full, GuidanceScales scales,
                                       const DDIMPlan& plan, bool batch_conditions) {
  const size_t n = w_start.size();
  if (image_only.size() != n || full.size() != n) throw std::invalid_argument("condition lists differ in length");
  if (plan.timesteps.empty()) throw std::invalid_argument("empty DDIM plan");
  const model::ModelConfig& cfg = model.config();
  const model::ConditioningBundle null = model::null_conditioning();
  std::vector<LatentCode> w = w_start;
  for (size_t step = 0; step < plan.timesteps.size(); ++step) {
    const int t = plan.timesteps[step];
    const int t_prev = plan.prev(step);
    auto run = [&](const std::vector<const LatentCode*>& ws, const std::vector<const model::ConditioningBundle*>& cs) {
      const std::vector<int> ts(ws.size(), t);
      return model.forward(model::pack_inputs<T>(cfg, ws, ts, cs)).template cast<double>().eval();
    };
    std::vector<const LatentCode*> ws;
    std::vector<const model::ConditioningBundle*> cs;
    MatrixD eps_u, eps_i, eps_f;
    if (batch_conditions) {
      for (size_t i = 0; i < n; ++i) {
        ws.insert(ws.end(), 3, &w[i]);
        cs.push_back(&null);
        cs.push_back(&image_only[i]);
        cs.push_back(&full[i]);
      }
      const MatrixD all = run(ws, cs);
      eps_u.resize(static_cast<Eigen::Index>(n) * cfg.k, cfg.d);
      eps_i.resizeLike(eps_u);
      eps_f.resizeLike(eps_u);
      for (size_t i = 0; i < n; ++i) {
        const Eigen::Index r = static_cast<Eigen::Index>(i) * cfg.k;
        eps_u.middleRows(r, cfg.k) = all.middleRows(3 * r, cfg.k);
        eps_i.middleRows(r, cfg.k) = all.middleRows(3 * r + cfg.k, cfg.k);
        eps_f.middleRows(r, cfg.k) = all.middleRows(3 * r + 2 * cfg.k, cfg.k);
      }
    } else {
      for (size_t i = 0; i < n; ++i) ws.push_back(&w[i]);
      auto pass = [&](auto pick) {
        std::vector<const model::ConditioningBundle*> c;
        for (size_t i = 0; i < n; ++i) c.push_back(pick(i));
        return run(ws, c);
      };
      eps_u = pass([&](size_t) { return &null; });
      eps_i = pass([&](size_t i) { return &image_only[i]; });
      eps_f = pass([&](size_t i) { return &full[i]; });
    }
    for (size_t i = 0; i < n; ++i) {
      const Eigen::Index r = static_cast<Eigen::Index>(i) * cfg.k;
      const MatrixD eps = cfg_compose(eps_u.middleRows(r, cfg.k), eps_i.middleRows(r, cfg.k),
                                      eps_f.middleRows(r, cfg.k), scales);
      w[i] = ddim_step(sched, w[i], t, t_prev, eps);
    }
  }
  return w;
}

template <class T>
std::vector<LatentCode> sample_edits(const model::Transformer<T>& model, const world::World& world,
                                     const NoiseSchedule& sched, const text::TextEncoder& encoder,
                                     const std::vector<LatentCode>& w_o, const std::vector<std::string>& instructions,
                                     GuidanceScales scales, const DDIMPlan& plan, int t_start,
                                     const std::vector<uint64_t>& seeds) {
  const size_t n = w_o.size();
  if (instructions.size() != n || seeds.size() != n) throw std::invalid_argument("edit lists differ in length");
  if (t_start < 1 || t_start > sched.T()) throw std::out_of_range("t_start outside [1, T]");
  if (plan.timesteps.empty() || plan.start() != t_start) throw std::invalid_argument("plan must start at t_start");
  const model::ModelConfig& cfg = model.config();
  std::vector<LatentCode> start;
  std::vector<model::ConditioningBundle> image_only, full;
  for (size_t i = 0; i < n; ++i) {
    if (w_o[i].rows() != cfg.k || w_o[i].cols() != cfg.d) throw std::invalid_argument("latent does not match model dims");
    const text::TextEmbeddingSeq txt = encoder.encode(instructions[i]);
    Rng rng(seeds[i]);
    start.push_back(q_sample(sched, w_o[i], t_start, rng.normal_matrix(cfg.k, cfg.d)));
    image_only.push_back(image_condition(cfg, world, w_o[i]));
    full.push_back(image_condition(cfg, world, w_o[i], txt));
  }
  return guided_denoise(model, sched, start, image_only, full, scales, plan, true);
}

template <class T>
LatentCode sample_edit(const model::Transformer<T>& model, const world::World& world, const NoiseSchedule& sched,
                       const text::TextEncoder& encoder, const LatentCode& w_o, const std::string& instruction,
                       GuidanceScales scales, const DDIMPlan& plan, int t_start, Rng& rng) {
  return sample_edits(model, world, sched, encoder, {w_o}, {instruction}, scales, plan, t_start, {rng.next_u64()})
      .front();
}

template std::vector<LatentCode> guided_denoise<float>(const model::Transformer<float>&, const NoiseSchedule&,
                                                       const std::vector<LatentCode>&,
                                                       const std::vector<model::ConditioningBundle>&,
                                                       const std::vector<model::ConditioningBundle>&, GuidanceScales,
                                                       const DDIMPlan&, bool);
template std::vector<LatentCode> guided_denoise<double>(const model::Transformer<double>&, const NoiseSchedule&,
                                                        const std::vector<LatentCode>&,
                                                        const std::vector<model::ConditioningBundle>&,
                                                        const std::vector<model::ConditioningBundle>&, GuidanceScales,
                                                        const DDIMPlan&, bool);
template std::vector<LatentCode> sample_edits<float>(const model::Transformer<float>&, const world::World&,
                                                     const NoiseSchedule&, const text::TextEncoder&,
                                                     const std::vector<LatentCode>&, const std::vector<std::string>&,
                                                     GuidanceScales, const DDIMPlan&, int,
                                                     const std::vector<uint64_t>&);
template std::vector<LatentCode> sample_edits<double>(const model::Transformer<double>&, const world::World&,
                                                      const NoiseSchedule&, const text::TextEncoder&,
                                                      const std::vector<LatentCode>&, const std::vector<std::string>&,
                                                      GuidanceScales, const DDIMPlan&, int,
                                                      const std::vector<uint64_t>&);
template LatentCode sample_edit<float>(const model::Transformer<float>&, const world::World&, const NoiseSchedule&,
                                       const text::TextEncoder&, const LatentCode&, const std::string&,
                                       GuidanceScales, const DDIMPlan&, int, Rng&);
template LatentCode sample_edit<double>(const model::Transformer<double>&, const world::World&, const NoiseSchedule&,
                                        const text::TextEncoder&, const LatentCode&, const std::string&,
                                        GuidanceScales, const DDIMPlan&, int, Rng&);

}  // namespace editkit::diffusion
