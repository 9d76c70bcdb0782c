#include "editkit/evalkit.hpp"

#include "editkit/config_json.hpp"
#include "editkit/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace editkit::evalkit {

using nlohmann::json;

namespace {

double cosine(const VectorD& a, const VectorD& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

double sigma(const world::World& world, int attr) {
  const double s = world.probe_std(attr);
  if (!(s > 0.0)) throw std::domain_error("attribute logit std is zero");
  return s;
}

void check_attr(const world::World& world, int attr) {
  if (attr < 0 || attr >= world.config().n_attr) throw std::out_of_range("attribute index out of range");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

EditTask make_task(const text::InstructionTemplateSet& templates, int latent, std::vector<int> attrs, Rng& rng) {
  EditTask t;
  t.latent = latent;
  std::vector<std::string> parts;
  for (int a : attrs) parts.push_back(text::render_instruction(templates, a, 1, rng));
  t.signs.assign(attrs.size(), 1);
  t.attrs = std::move(attrs);
  t.instruction = text::concat_instructions(parts);
  return t;
}

bool same_training(const trainer::CheckpointRecord& rec, const model::ModelConfig& mc, const trainer::TrainConfig& tc,
                   const std::string& dataset_fp) {
  return rec.model.config() == mc && rec.config == tc && rec.dataset_fingerprint == dataset_fp && rec.step == tc.steps;
}

}  // namespace

void EvalConfig::validate() const {
  if (n_views < 1) throw std::invalid_argument("n_views must be >= 1");
  if (yaw_range_deg < 0.0 || pitch_range_deg < 0.0) throw std::invalid_argument("view ranges must be non-negative");
  if (steps < 1) throw std::invalid_argument("sampler steps must be >= 1");
  if (t_start < 1) throw std::invalid_argument("t_start must be >= 1");
  if (n_test < 0) throw std::invalid_argument("n_test must be non-negative");
  if (batch < 1) throw std::invalid_argument("eval batch must be >= 1");
  if (!std::isfinite(scales.image) || !std::isfinite(scales.text)) throw std::invalid_argument("non-finite scales");
}

std::vector<world::CameraPose> view_poses(const EvalConfig& cfg) {
  cfg.validate();
  const double deg = std::numbers::pi / 180.0;
  std::vector<world::CameraPose> poses;
  for (int i = 0; i < cfg.n_views; ++i) {
    const double u = cfg.n_views == 1 ? 0.0 : -1.0 + 2.0 * i / (cfg.n_views - 1);
    poses.push_back({u * cfg.yaw_range_deg * deg, u * cfg.pitch_range_deg * deg});
  }
  return poses;
}

std::vector<world::ImageVec> render_views(const world::World& world, const LatentCode& w, const EvalConfig& cfg) {
  std::vector<world::ImageVec> out;
  for (const auto& p : view_poses(cfg)) out.push_back(world.generate(w, p));
  return out;
}

double id_score(const world::World& world, const LatentCode& w_edit, const world::ImageVec& x_input,
                const EvalConfig& cfg) {
  const VectorD ref = world.extract_identity(x_input).values;
  double sum = 0.0;
  const auto views = render_views(world, w_edit, cfg);
  for (const auto& v : views) sum += world.extract_identity(v).values.dot(ref);
  return sum / static_cast<double>(views.size());
}

double attribute_altering(const world::World& world, const LatentCode& w_o, const LatentCode& w_edit, int attr,
                          int sign) {
  check_attr(world, attr);
  if (sign != 1 && sign != -1) throw std::invalid_argument("sign must be +1 or -1");
  const double dl = world.attribute_logits(w_edit)(attr) - world.attribute_logits(w_o)(attr);
  return sign * dl / sigma(world, attr);
}

double attribute_dependency(const world::World& world, const LatentCode& w_o, const LatentCode& w_edit,
                            const std::vector<int>& targets) {
  for (int a : targets) check_attr(world, a);
  const VectorD dl = world.attribute_logits(w_edit) - world.attribute_logits(w_o);
  double sum = 0.0;
  int n = 0;
  for (int b = 0; b < world.config().n_attr; ++b) {
    if (std::find(targets.begin(), targets.end(), b) != targets.end()) continue;
    sum += std::abs(dl(b)) / sigma(world, b);
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

double attribute_dependency(const world::World& world, const LatentCode& w_o, const LatentCode& w_edit, int attr) {
  return attribute_dependency(world, w_o, w_edit, std::vector<int>{attr});
}

double directional_score(const world::World& world, const world::ImageVec& x_o, const world::ImageVec& x_e,
                         const std::vector<int>& attrs, const std::vector<int>& signs) {
  if (attrs.empty() || attrs.size() != signs.size()) throw std::invalid_argument("attrs and signs must match");
  VectorD txt = VectorD::Zero(world.joint_dim());
  for (size_t i = 0; i < attrs.size(); ++i) txt += world.joint_text(attrs[i], signs[i]);
  const VectorD delta = world.joint_image(x_e) - world.joint_image(x_o);
  return cosine(delta, txt);
}

double directional_score(const world::World& world, const world::ImageVec& x_o, const world::ImageVec& x_e,
                         int attr, int sign) {
  return directional_score(world, x_o, x_e, std::vector<int>{attr}, std::vector<int>{sign});
}

Editor model_editor(const model::Transformer<float>& model, const world::World& world,
                    const diffusion::NoiseSchedule& sched, const text::TextEncoder& encoder, const EvalConfig& cfg) {
  return [&model, &world, &sched, &encoder, cfg](const std::vector<LatentCode>& latents,
                                                 const std::vector<EditTask>& tasks) {
    const auto plan = diffusion::make_plan(sched, cfg.t_start, cfg.steps);
    const uint64_t root = derive_seed(cfg.seed, "edit");
    std::vector<LatentCode> out;
    for (size_t lo = 0; lo < tasks.size(); lo += static_cast<size_t>(cfg.batch)) {
      const size_t hi = std::min(tasks.size(), lo + static_cast<size_t>(cfg.batch));
      std::vector<LatentCode> w_o;
      std::vector<std::string> instr;
      std::vector<uint64_t> seeds;
      for (size_t i = lo; i < hi; ++i) {
        w_o.push_back(latents.at(static_cast<size_t>(tasks[i].latent)));
        instr.push_back(tasks[i].instruction);
        seeds.push_back(splitmix64(root + i));
      }
      auto edited = diffusion::sample_edits(model, world, sched, encoder, w_o, instr, cfg.scales, plan, cfg.t_start, seeds);
      for (auto& e : edited) out.push_back(std::move(e));
    }
    return out;
  };
}

Editor oracle_editor(const world::World& world) {
  return [&world](const std::vector<LatentCode>& latents, const std::vector<EditTask>& tasks) {
    std::vector<LatentCode> out;
    for (const auto& t : tasks) {
      LatentCode w = latents.at(static_cast<size_t>(t.latent));
      for (size_t j = 0; j < t.attrs.size(); ++j)
        w = world.apply_edit(w, t.attrs[j], t.signs[j], world.config().edit_magnitude);
      out.push_back(std::move(w));
    }
    return out;
  };
}

std::vector<LatentCode> test_latents(const world::World& world, const EvalConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "test_latents"));
  std::vector<LatentCode> out;
  for (int i = 0; i < cfg.n_test; ++i) out.push_back(world.sample_prior(rng));
  return out;
}

std::vector<EditTask> single_suite(const world::World& world, const text::InstructionTemplateSet& templates,
                                   const EvalConfig& cfg, int n_latents) {
  std::vector<int> attrs = cfg.attributes;
  if (attrs.empty())
    for (int a = 0; a < world.config().n_attr; ++a) attrs.push_back(a);
  for (int a : attrs) check_attr(world, a);
  Rng rng(derive_seed(cfg.seed, "suite_single"));
  std::vector<EditTask> tasks;
  for (int i = 0; i < n_latents; ++i) tasks.push_back(make_task(templates, i, {attrs[i % attrs.size()]}, rng));
  return tasks;
}

std::vector<EditTask> composite_suite(const world::World& world, const text::InstructionTemplateSet& templates,
                                      const EvalConfig& cfg, int n_latents) {
  check_attr(world, 2);
  std::vector<std::vector<int>> orders;
  std::vector<int> p{0, 1, 2};
  do orders.push_back(p);
  while (std::next_permutation(p.begin(), p.end()));
  Rng rng(derive_seed(cfg.seed, "suite_composite"));
  std::vector<EditTask> tasks;
  for (int i = 0; i < n_latents; ++i) tasks.push_back(make_task(templates, i, orders[i % orders.size()], rng));
  return tasks;
}

std::vector<EditTask> series_suite(const world::World& world, const text::InstructionTemplateSet& templates,
                                   const EvalConfig& cfg, int n_latents, int m) {
  if (m < 1 || m > 4) throw std::invalid_argument("series length must be 1..4");
  check_attr(world, 3);
  Rng rng(derive_seed(cfg.seed, "suite_series_" + std::to_string(m)));
  std::vector<EditTask> tasks;
  for (int i = 0; i < n_latents; ++i) {
    std::vector<int> attrs;
    for (int j = 0; j < m; ++j) attrs.push_back((i + j) % 4);
    tasks.push_back(make_task(templates, i, attrs, rng));
  }
  return tasks;
}

MetricsReport evaluate(const Editor& editor, const world::World& world, const EvalConfig& cfg,
                       const std::vector<LatentCode>& latents, const std::vector<EditTask>& tasks) {
  cfg.validate();
  MetricsReport r;
  r.fingerprint = eval_fingerprint(cfg);
  if (tasks.empty()) return r;
  const std::vector<LatentCode> edited = editor(latents, tasks);
  if (edited.size() != tasks.size()) throw std::logic_error("editor returned the wrong number of latents");
  std::map<int, std::pair<double, int>> per_attr;
  for (size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    const LatentCode& w_o = latents.at(static_cast<size_t>(t.latent));
    const LatentCode& w_e = edited[i];
    r.id += id_score(world, w_e, world.generate(w_o, world::CameraPose::frontal()), cfg);
    double sum = 0.0, mn = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < t.attrs.size(); ++j) {
      const double aa = attribute_altering(world, w_o, w_e, t.attrs[j], t.signs[j]);
      sum += aa;
      mn = std::min(mn, aa);
      auto& pa = per_attr[t.attrs[j]];
      pa.first += aa;
      ++pa.second;
    }
    r.aa += sum / static_cast<double>(t.attrs.size());
    r.aa_min += mn;
    r.ad += attribute_dependency(world, w_o, w_e, t.attrs);
    const auto vo = render_views(world, w_o, cfg), ve = render_views(world, w_e, cfg);
    double dir = 0.0;
    for (size_t v = 0; v < vo.size(); ++v) dir += directional_score(world, vo[v], ve[v], t.attrs, t.signs);
    r.directional += dir / static_cast<double>(vo.size());
  }
  const double n = static_cast<double>(tasks.size());
  r.id /= n;
  r.aa /= n;
  r.aa_min /= n;
  r.ad /= n;
  r.directional /= n;
  for (const auto& [a, s] : per_attr) r.aa_per_attribute[a] = s.first / s.second;
  r.n_samples = static_cast<int>(tasks.size());
  return r;
}

MetricsReport evaluate(const model::Transformer<float>& model, const world::World& world,
                       const diffusion::NoiseSchedule& sched, const text::TextEncoder& encoder, const EvalConfig& cfg,
                       const std::vector<LatentCode>& latents) {
  const auto tasks = single_suite(world, text::builtin_test_templates(), cfg, static_cast<int>(latents.size()));
  return evaluate(model_editor(model, world, sched, encoder, cfg), world, cfg, latents, tasks);
}

std::string to_json(const MetricsReport& r) {
  json per = json::object();
  for (const auto& [a, v] : r.aa_per_attribute) per[std::to_string(a)] = v;
  const json j{{"id", r.id},
               {"aa", r.aa},
               {"aa_min", r.aa_min},
               {"ad", r.ad},
               {"directional", r.directional},
               {"aa_per_attribute", per},
               {"n_samples", r.n_samples},
               {"ad_aggregation", r.ad_aggregation},
               {"config_fingerprint", r.fingerprint}};
  return j.dump(2) + "\n";
}

std::string eval_fingerprint(const EvalConfig& cfg) { return sha256_hex(json(cfg).dump()); }

Variant parse_variant(const std::string& name) {
  if (name == "base" || name == "tpr_on") return {name, true, true, 0.1};
  if (name == "tpr_off") return {name, false, true, 0.1};
  if (name == "no_lid") return {name, true, true, 0.0};
  if (name == "no_idcond") return {name, true, false, 0.1};
  throw std::invalid_argument("unknown ablation variant '" + name + "' (base, tpr_on, tpr_off, no_lid, no_idcond)");
}

std::vector<Variant> default_variants() {
  return {parse_variant("base"), parse_variant("tpr_off"), parse_variant("no_lid"), parse_variant("no_idcond")};
}

double improvement_rate(double with_tpr, double without_tpr) {
  if (without_tpr == 0.0) throw std::domain_error("improvement rate undefined for a zero baseline");
  return (with_tpr - without_tpr) / std::abs(without_tpr);
}

VariantResult evaluate_suites(const model::Transformer<float>& model, const world::World& world,
                              const text::TextEncoder& encoder, const EvalConfig& cfg) {
  const auto sched = diffusion::make_schedule(model.config().T);
  const auto latents = test_latents(world, cfg);
  const auto templates = text::builtin_test_templates();
  const Editor editor = model_editor(model, world, sched, encoder, cfg);
  const int n = static_cast<int>(latents.size());
  VariantResult r;
  r.single = evaluate(editor, world, cfg, latents, single_suite(world, templates, cfg, n));
  r.composite = evaluate(editor, world, cfg, latents, composite_suite(world, templates, cfg, n));
  for (int m = 1; m <= 4; ++m) r.series.push_back(evaluate(editor, world, cfg, latents, series_suite(world, templates, cfg, n, m)));
  return r;
}

AblationResult ablation_run(const world::World& world, const triplets::Dataset& dataset,
                            const text::TextEncoder& encoder, const model::ModelConfig& model_config,
                            const trainer::TrainConfig& base, const std::vector<Variant>& variants,
                            const EvalConfig& eval_cfg, const AblationOptions& options) {
  eval_cfg.validate();
  if (variants.empty()) throw std::invalid_argument("no ablation variants");
  const std::string dataset_fp = trainer::dataset_fingerprint(dataset);
  auto log = [&](const std::string& s) {
    if (options.log) options.log(s);
  };
  AblationResult out;
  for (const auto& v : variants) {
    trainer::TrainConfig tc = base;
    tc.tpr_enabled = v.tpr_enabled;
    tc.id_module_enabled = v.id_module_enabled;
    tc.lambda_id = v.lambda_id;
    model::ModelConfig mc = model_config;
    mc.identity_conditioning = v.id_module_enabled;
    const auto dir = options.out_dir.empty() ? std::filesystem::path{} : options.out_dir / "checkpoints" / v.name;

    std::optional<trainer::CheckpointRecord> rec;
    bool reused = false;
    if (options.reuse_checkpoints && !dir.empty() && std::filesystem::exists(dir / "manifest.json")) {
      try {
        auto loaded = trainer::load_checkpoint(dir, &world);
        if (same_training(loaded, mc, tc, dataset_fp)) {
          rec = std::move(loaded);
          reused = true;
        }
      } catch (const ArtifactError& e) {
        log("ignoring cached checkpoint for " + v.name + ": " + e.what());
      }
    }
    if (!rec) {
      log("training variant " + v.name);
      rec = trainer::train(world, dataset, encoder, mc, tc, dir, options.progress);
    } else {
      log("reusing checkpoint for " + v.name);
    }
    log("evaluating variant " + v.name);
    VariantResult row = evaluate_suites(trainer::inference_model(*rec), world, encoder, eval_cfg);
    row.variant = v;
    row.reused = reused;
    row.final_diffusion_loss = trainer::final_diffusion_loss(*rec);
    out.rows.push_back(std::move(row));
  }

  std::ostringstream csv;
  csv << "variant,tpr_enabled,id_module_enabled,lambda_id,final_diffusion_loss,"
         "single_id,single_aa,single_ad,single_directional,"
         "composite_id,composite_aa,composite_aa_min,composite_ad,composite_directional";
  for (int m = 1; m <= 4; ++m) csv << ",series" << m << "_id,series" << m << "_aa,series" << m << "_directional";
  csv << "\n";
  for (const auto& r : out.rows) {
    csv << r.variant.name << "," << r.variant.tpr_enabled << "," << r.variant.id_module_enabled << ","
        << fmt(r.variant.lambda_id) << "," << fmt(r.final_diffusion_loss) << "," << fmt(r.single.id) << ","
        << fmt(r.single.aa) << "," << fmt(r.single.ad) << "," << fmt(r.single.directional) << ","
        << fmt(r.composite.id) << "," << fmt(r.composite.aa) << "," << fmt(r.composite.aa_min) << ","
        << fmt(r.composite.ad) << "," << fmt(r.composite.directional);
    for (const auto& s : r.series) csv << "," << fmt(s.id) << "," << fmt(s.aa) << "," << fmt(s.directional);
    csv << "\n";
  }
  out.comparison_csv = csv.str();

  const VariantResult* on = nullptr;
  const VariantResult* off = nullptr;
  for (const auto& r : out.rows)
    if (r.variant.tpr_enabled && !on) on = &r;
  if (on)
    for (const auto& r : out.rows)
      if (!r.variant.tpr_enabled && r.variant.id_module_enabled == on->variant.id_module_enabled &&
          r.variant.lambda_id == on->variant.lambda_id && !off)
        off = &r;
  if (on && off) {
    std::ostringstream ir;
    ir << "instruction_count,AA_improvement_rate,directional_improvement_rate\n";
    for (size_t m = 0; m < 4; ++m)
      ir << m + 1 << "," << fmt(improvement_rate(on->series[m].aa, off->series[m].aa)) << ","
         << fmt(improvement_rate(on->series[m].directional, off->series[m].directional)) << "\n";
    out.improvement_csv = ir.str();
  }
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    write_text_file(options.out_dir / "comparison.csv", out.comparison_csv);
    if (!out.improvement_csv.empty()) write_text_file(options.out_dir / "improvement_rate.csv", out.improvement_csv);
    for (const auto& r : out.rows) {
      const auto d = options.out_dir / "reports" / r.variant.name;
      std::filesystem::create_directories(d);
      write_text_file(d / "single.json", to_json(r.single));
      write_text_file(d / "composite.json", to_json(r.composite));
      for (size_t m = 0; m < r.series.size(); ++m)
        write_text_file(d / ("series_" + std::to_string(m + 1) + ".json"), to_json(r.series[m]));
    }
  }
  return out;
}

}  // namespace editkit::evalkit
