#include "editkit/trainer.hpp"

#include "editkit/config_json.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

namespace editkit::trainer {

using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;
constexpr double kEmaDecay = 0.99;

MatrixD flatten(const std::vector<LatentCode>& ws) {
  if (ws.empty()) return {};
  MatrixD flat(static_cast<Eigen::Index>(ws.size()), ws.front().size());
  for (size_t i = 0; i < ws.size(); ++i)
    flat.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const VectorD>(ws[i].data(), ws[i].size()).transpose();
  return flat;
}

std::string step_dir(int step) {
  std::string s = std::to_string(step);
  return "step_" + std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

uint64_t step_seed(uint64_t seed, int step) { return splitmix64(derive_seed(seed, "step") + static_cast<uint64_t>(step)); }

void run_steps(const TrainingContext& ctx, CheckpointRecord& rec, int extra_steps,
               const std::filesystem::path& checkpoint_dir, const ProgressFn& progress) {
  const TrainConfig& cfg = rec.config;
  auto& model = rec.model;
  if (rec.adam.m.empty()) {
    rec.adam.m = model.store().zeros_like();
    rec.adam.v = model.store().zeros_like();
  }
  if (cfg.weight_ema > 0.0 && rec.ema.empty())
    for (const auto& p : model.store().params) rec.ema.push_back(p.value);
  const auto start = std::chrono::steady_clock::now();
  const double wall_before = rec.wall_seconds;
  const auto& pool = ctx.train_indices();
  if (pool.empty() && extra_steps > 0) throw std::invalid_argument("training split is empty");
  auto grads = model.store().zeros_like();
  LossLogEntry window;
  int window_count = 0;

  for (int s = 0; s < extra_steps; ++s) {
    const int step = rec.step + 1;
    Rng rng(step_seed(cfg.seed, step));
    std::vector<int> idx(static_cast<size_t>(cfg.batch_size));
    for (int& i : idx) i = pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
    const TrainingBatch batch = ctx.sample_batch(idx, rng);

    for (auto& g : grads) g.setZero();
    const LossBreakdown loss = batch_loss(model, ctx, batch, &grads);
    if (!std::isfinite(loss.total)) throw std::runtime_error("training diverged at step " + std::to_string(step));

    double sq = 0.0;
    for (const auto& g : grads) sq += g.template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw std::runtime_error("non-finite gradient at step " + std::to_string(step));
    const float clip = norm > cfg.grad_clip ? static_cast<float>(cfg.grad_clip / norm) : 1.0f;

    const float b1 = static_cast<float>(cfg.adam_beta1), b2 = static_cast<float>(cfg.adam_beta2);
    const float c1 = static_cast<float>(1.0 - std::pow(cfg.adam_beta1, step));
    const float c2 = static_cast<float>(1.0 - std::pow(cfg.adam_beta2, step));
    const float lr = static_cast<float>(learning_rate(cfg, step)), eps = static_cast<float>(cfg.adam_eps);
    for (size_t p = 0; p < grads.size(); ++p) {
      float* w = model.store().params[p].value.data();
      float* m = rec.adam.m[p].data();
      float* v = rec.adam.v[p].data();
      const float* g = grads[p].data();
      for (Eigen::Index i = 0; i < grads[p].size(); ++i) {
        const float gi = g[i] * clip;
        m[i] = b1 * m[i] + (1.0f - b1) * gi;
        v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
      if (!rec.ema.empty()) {
        const float d = static_cast<float>(cfg.weight_ema);
        rec.ema[p] = d * rec.ema[p] + (1.0f - d) * model.store().params[p].value;
      }
    }

    rec.step = step;
    if (step == 1) {
      rec.ema_total = loss.total;
      rec.ema_diffusion = loss.diffusion;
      rec.ema_identity = loss.identity;
    } else {
      rec.ema_total = kEmaDecay * rec.ema_total + (1 - kEmaDecay) * loss.total;
      rec.ema_diffusion = kEmaDecay * rec.ema_diffusion + (1 - kEmaDecay) * loss.diffusion;
      rec.ema_identity = kEmaDecay * rec.ema_identity + (1 - kEmaDecay) * loss.identity;
    }
    window.total += loss.total;
    window.diffusion += loss.diffusion;
    window.identity += loss.identity;
    ++window_count;
    const bool last = s + 1 == extra_steps;
    if (step % cfg.log_interval == 0 || last) {
      LossLogEntry e{step, window.total / window_count, window.diffusion / window_count,
                     window.identity / window_count};
      rec.history.push_back(e);
      if (progress) progress(e);
      window = {};
      window_count = 0;
    }
    if (!checkpoint_dir.empty() && cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && !last) {
      rec.wall_seconds = wall_before + std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      save_checkpoint(rec, checkpoint_dir / step_dir(step));
    }
  }
  rec.wall_seconds = wall_before + std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!checkpoint_dir.empty()) save_checkpoint(rec, checkpoint_dir);
}

}  // namespace

void TrainConfig::validate(int T) const {
  if (steps < 0) throw std::invalid_argument("steps must be non-negative");
  if (batch_size <= 0) throw std::invalid_argument("batch size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (p1 < 0.0 || p2 < 0.0 || p1 + p2 > 1.0) throw std::invalid_argument("dropout probabilities need 0 <= p1, p2 and p1 + p2 <= 1");
  if (t_threshold <= 0 || t_threshold > T) throw std::invalid_argument("t_threshold must lie in (0, T]");
  if (lambda_id < 0.0) throw std::invalid_argument("lambda_id must be non-negative");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("grad clip must be positive");
  if (log_interval <= 0 || checkpoint_interval < 0) throw std::invalid_argument("intervals must be positive");
  if (tpr_max_start < 0) throw std::invalid_argument("tpr_max_start must be non-negative");
  if (weight_ema < 0.0 || weight_ema >= 1.0) throw std::invalid_argument("weight_ema must lie in [0, 1)");
  if (warmup_steps < 0) throw std::invalid_argument("warmup_steps must be non-negative");
}

double learning_rate(const TrainConfig& cfg, int step) {
  double lr = cfg.lr;
  if (step < cfg.warmup_steps) lr *= static_cast<double>(step) / cfg.warmup_steps;
  if (cfg.cosine_decay && cfg.steps > 0) {
    const double x = std::min(1.0, static_cast<double>(step - 1) / cfg.steps);
    lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * x));
  }
  return lr;
}

DropoutBranch draw_dropout(Rng& rng, double p1, double p2) {
  if (p1 < 0.0 || p2 < 0.0 || p1 + p2 > 1.0) throw std::invalid_argument("invalid dropout probabilities");
  const double u = rng.uniform();
  if (u < p1) return DropoutBranch::kBothNull;
  if (u < p1 + p2) return DropoutBranch::kTextNull;
  return DropoutBranch::kUnchanged;
}

model::ConditioningBundle apply_conditioning_dropout(const model::ConditioningBundle& cond, Rng& rng, double p1,
                                                     double p2) {
  switch (draw_dropout(rng, p1, p2)) {
    case DropoutBranch::kBothNull:
      return model::null_conditioning();
    case DropoutBranch::kTextNull:
      return model::make_conditioning(cond.w_o, cond.id_emb, std::nullopt);
    case DropoutBranch::kUnchanged:
      break;
  }
  return cond;
}

TrainingContext::TrainingContext(const world::World& world, const triplets::Dataset& dataset,
                                 const text::TextEncoder& encoder, const diffusion::NoiseSchedule& sched,
                                 const TrainConfig& config)
    : world_(world), dataset_(dataset), encoder_(encoder), sched_(sched), config_(config) {
  config_.validate(sched.T());
  if (dataset.manifest.k != world.config().k || dataset.manifest.d != world.config().d)
    throw std::invalid_argument("dataset latent shape does not match the world");
  std::vector<LatentCode> w_o, w_e;
  for (const auto& ex : dataset.examples) {
    tokens_.push_back(text::tokenize(encoder.vocab, ex.instruction));
    w_o.push_back(ex.w_o);
    w_e.push_back(ex.w_e);
  }
  if (!dataset.examples.empty()) {
    if (config_.id_module_enabled) source_ids_ = world.identity_batch(flatten(w_o), world::CameraPose::frontal());
    target_ids_ = world.identity_batch(flatten(w_e), world::CameraPose::frontal());
  }
  train_ = dataset.indices(triplets::Split::kTrain);
}

TrainingBatch TrainingContext::sample_batch(const std::vector<int>& indices, Rng& rng) const {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const auto& wc = world_.config();
  TrainingBatch b;
  b.target_ids.resize(static_cast<Eigen::Index>(indices.size()), wc.id_dim);
  for (size_t n = 0; n < indices.size(); ++n) {
    const int i = indices[n];
    const auto& ex = dataset_.examples.at(static_cast<size_t>(i));
    const int t = rng.uniform_int(1, sched_.T());
    LatentCode eps = rng.normal_matrix(wc.k, wc.d);
    const text::TokenSequence seq = config_.tpr_enabled
                                        ? text::place_with_tpr(tokens_[static_cast<size_t>(i)], rng, config_.tpr_max_start)
                                        : tokens_[static_cast<size_t>(i)];
    std::optional<world::IdentityEmbedding> id;
    if (config_.id_module_enabled) id = world::IdentityEmbedding{source_ids_.row(i).transpose()};
    const auto cond = model::make_conditioning(ex.w_o, std::move(id), encoder_.embedder.embed(seq));
    b.cond.push_back(apply_conditioning_dropout(cond, rng, config_.p1, config_.p2));
    b.w_t.push_back(diffusion::q_sample(sched_, ex.w_e, t, eps));
    b.w_e.push_back(ex.w_e);
    b.eps.push_back(std::move(eps));
    b.t.push_back(t);
    b.target_ids.row(static_cast<Eigen::Index>(n)) = target_ids_.row(i);
  }
  return b;
}

double diffusion_loss(const MatrixD& eps_hat, const MatrixD& eps) {
  if (eps_hat.rows() != eps.rows() || eps_hat.cols() != eps.cols()) throw std::invalid_argument("shape mismatch");
  if (eps.size() == 0) throw std::invalid_argument("empty batch");
  return (eps_hat - eps).squaredNorm() / static_cast<double>(eps.size());
}

double identity_loss(const world::World& world, const diffusion::NoiseSchedule& sched,
                     const std::vector<LatentCode>& w_t, const std::vector<LatentCode>& eps_hat,
                     const std::vector<int>& t, const MatrixD& target_ids, int t_threshold,
                     std::vector<LatentCode>* grad, int* count) {
  const size_t n = w_t.size();
  if (eps_hat.size() != n || t.size() != n || static_cast<size_t>(target_ids.rows()) != n)
    throw std::invalid_argument("identity loss inputs differ in length");
  if (grad) {
    grad->clear();
    for (size_t i = 0; i < n; ++i) grad->push_back(LatentCode::Zero(w_t[i].rows(), w_t[i].cols()));
  }
  std::vector<size_t> q;
  for (size_t i = 0; i < n; ++i)
    if (t[i] < t_threshold) q.push_back(i);
  if (count) *count = static_cast<int>(q.size());
  if (q.empty()) return 0.0;

  std::vector<LatentCode> x0;
  MatrixD targets(static_cast<Eigen::Index>(q.size()), target_ids.cols());
  for (size_t j = 0; j < q.size(); ++j) {
    x0.push_back(diffusion::predict_x0(sched, w_t[q[j]], t[q[j]], eps_hat[q[j]]));
    targets.row(static_cast<Eigen::Index>(j)) = target_ids.row(static_cast<Eigen::Index>(q[j]));
  }
  MatrixD dcos;
  const VectorD cos = world.identity_cosine_batch(flatten(x0), world::CameraPose::frontal(), targets,
                                                  grad ? &dcos : nullptr);
  const double m = static_cast<double>(q.size());
  if (grad) {
    for (size_t j = 0; j < q.size(); ++j) {
      const double ab = sched.alpha_bar(t[q[j]]);
      // d(1 - cos)/d eps_hat = -dcos/dx0 * dx0/d eps_hat, dx0/d eps_hat = -sqrt((1 - ab) / ab)
      const double f = std::sqrt((1.0 - ab) / ab) / m;
      LatentCode& g = (*grad)[q[j]];
      g = Eigen::Map<const MatrixD>(dcos.row(static_cast<Eigen::Index>(j)).data(), g.rows(), g.cols()) * f;
    }
  }
  return (1.0 - cos.array()).sum() / m;
}

template <class T>
LossBreakdown batch_loss(const model::Transformer<T>& model, const TrainingContext& ctx, const TrainingBatch& batch,
                         std::vector<Matrix<T>>* grads) {
  const size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("empty batch");
  const auto& mc = model.config();
  std::vector<const LatentCode*> wp;
  std::vector<const model::ConditioningBundle*> cp;
  for (size_t i = 0; i < n; ++i) {
    wp.push_back(&batch.w_t[i]);
    cp.push_back(&batch.cond[i]);
  }
  model::ForwardCache<T> cache;
  const Matrix<T> out = model.forward(model::pack_inputs<T>(mc, wp, batch.t, cp), grads ? &cache : nullptr);
  const MatrixD eps_hat_all = out.template cast<double>();
  MatrixD eps_all(eps_hat_all.rows(), eps_hat_all.cols());
  std::vector<LatentCode> eps_hat;
  for (size_t i = 0; i < n; ++i) {
    const Eigen::Index r = static_cast<Eigen::Index>(i) * mc.k;
    eps_all.middleRows(r, mc.k) = batch.eps[i];
    eps_hat.push_back(eps_hat_all.middleRows(r, mc.k));
  }

  LossBreakdown loss;
  loss.diffusion = diffusion_loss(eps_hat_all, eps_all);
  MatrixD d_out = 2.0 * (eps_hat_all - eps_all) / static_cast<double>(eps_all.size());
  const double lambda = ctx.config().lambda_id;
  if (lambda > 0.0) {
    std::vector<LatentCode> g;
    loss.identity = identity_loss(ctx.world(), ctx.schedule(), batch.w_t, eps_hat, batch.t, batch.target_ids,
                                  ctx.config().t_threshold, grads ? &g : nullptr, &loss.identity_count);
    if (grads)
      for (size_t i = 0; i < n; ++i) d_out.middleRows(static_cast<Eigen::Index>(i) * mc.k, mc.k) += lambda * g[i];
  }
  loss.total = loss.diffusion + lambda * loss.identity;
  if (grads) model.backward(cache, d_out.cast<T>(), *grads);
  return loss;
}

CheckpointRecord train(const world::World& world, const triplets::Dataset& dataset, const text::TextEncoder& encoder,
                       const model::ModelConfig& model_config, const TrainConfig& config,
                       const std::filesystem::path& checkpoint_dir, const ProgressFn& progress) {
  keep_heap_allocations();
  model_config.validate();
  const auto& wc = world.config();
  if (model_config.k != wc.k || model_config.d != wc.d || model_config.id_dim != wc.id_dim)
    throw std::invalid_argument("model dims do not match the world");
  if (model_config.d_txt != encoder.embedder.d_txt()) throw std::invalid_argument("model d_txt does not match the text encoder");
  if (model_config.identity_conditioning != config.id_module_enabled)
    throw std::invalid_argument("model identity_conditioning must equal train id_module_enabled");
  const auto sched = diffusion::make_schedule(model_config.T);
  config.validate(sched.T());

  CheckpointRecord rec;
  rec.model = model::init_model<float>(model_config, derive_seed(config.seed, "init"));
  rec.config = config;
  rec.world_seed = world.effective_seed();
  rec.world_fingerprint = world.fingerprint();
  rec.dataset_fingerprint = dataset_fingerprint(dataset);
  rec.text_seed = encoder.embedder.seed();
  rec.vocabulary = encoder.vocab.words();
  const TrainingContext ctx(world, dataset, encoder, sched, config);
  run_steps(ctx, rec, config.steps, checkpoint_dir, progress);
  return rec;
}

CheckpointRecord resume(const world::World& world, const triplets::Dataset& dataset, const text::TextEncoder& encoder,
                        CheckpointRecord record, int extra_steps, const std::filesystem::path& checkpoint_dir,
                        const ProgressFn& progress) {
  keep_heap_allocations();
  if (record.world_fingerprint != world.fingerprint()) throw ArtifactError("checkpoint was trained on a different world");
  if (extra_steps < 0) throw std::invalid_argument("extra_steps must be non-negative");
  const auto sched = diffusion::make_schedule(record.model.config().T);
  const TrainingContext ctx(world, dataset, encoder, sched, record.config);
  run_steps(ctx, record, extra_steps, checkpoint_dir, progress);
  return record;
}

model::Transformer<float> inference_model(const CheckpointRecord& record) {
  model::Transformer<float> m = record.model;
  if (!record.ema.empty())
    for (size_t p = 0; p < record.ema.size(); ++p) m.store().params[p].value = record.ema[p];
  return m;
}

double final_diffusion_loss(const CheckpointRecord& record) {
  if (record.history.empty()) throw std::logic_error("no logged training steps");
  return record.history.back().diffusion;
}

void save_checkpoint(const CheckpointRecord& rec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json checksums = json::object();
  auto dump = [&](const std::string& group, const std::string& name, const MatrixF& m) {
    const std::string rel = group + "/" + name + ".bin";
    std::filesystem::create_directories(dir / group);
    write_blob(dir / rel, std::span<const float>(m.data(), static_cast<size_t>(m.size())));
    checksums[rel] = sha256_file(dir / rel);
  };
  const auto& params = rec.model.store().params;
  for (size_t i = 0; i < params.size(); ++i) {
    dump("params", params[i].name, params[i].value);
    if (!rec.adam.m.empty()) {
      dump("adam_m", params[i].name, rec.adam.m[i]);
      dump("adam_v", params[i].name, rec.adam.v[i]);
    }
    if (!rec.ema.empty()) dump("ema", params[i].name, rec.ema[i]);
  }
  json history = json::array();
  for (const auto& e : rec.history)
    history.push_back({{"step", e.step}, {"total", e.total}, {"diffusion", e.diffusion}, {"identity", e.identity}});
  const json manifest{{"schema_version", kSchemaVersion},
                      {"step", rec.step},
                      {"model_config", rec.model.config()},
                      {"init_seed", rec.model.store().seed},
                      {"train_config", rec.config},
                      {"world_seed", rec.world_seed},
                      {"world_fingerprint", rec.world_fingerprint},
                      {"dataset_fingerprint", rec.dataset_fingerprint},
                      {"text_seed", rec.text_seed},
                      {"vocabulary", rec.vocabulary},
                      {"has_optimizer_state", !rec.adam.m.empty()},
                      {"has_weight_ema", !rec.ema.empty()},
                      {"history", history},
                      {"ema", {{"total", rec.ema_total}, {"diffusion", rec.ema_diffusion}, {"identity", rec.ema_identity}}},
                      {"wall_seconds", rec.wall_seconds},
                      {"checksums", checksums}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

CheckpointRecord load_checkpoint(const std::filesystem::path& dir, const world::World* world) {
  if (!std::filesystem::exists(dir / "manifest.json")) throw ArtifactError("checkpoint not found: " + dir.string());
  const json j = json::parse(read_text_file(dir / "manifest.json"));
  if (j.at("schema_version").get<int>() != kSchemaVersion) throw ArtifactError("checkpoint schema version mismatch");
  CheckpointRecord rec;
  rec.step = j.at("step");
  model::ModelConfig mc;
  j.at("model_config").get_to(mc);
  rec.model = model::Transformer<float>(mc);
  rec.model.store().seed = j.at("init_seed");
  j.at("train_config").get_to(rec.config);
  rec.world_seed = j.at("world_seed");
  rec.world_fingerprint = j.at("world_fingerprint");
  rec.dataset_fingerprint = j.at("dataset_fingerprint");
  rec.text_seed = j.at("text_seed");
  rec.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
  for (const auto& e : j.at("history"))
    rec.history.push_back({e.at("step"), e.at("total"), e.at("diffusion"), e.at("identity")});
  rec.ema_total = j.at("ema").at("total");
  rec.ema_diffusion = j.at("ema").at("diffusion");
  rec.ema_identity = j.at("ema").at("identity");
  rec.wall_seconds = j.at("wall_seconds");
  if (world && (rec.world_seed != world->effective_seed() || rec.world_fingerprint != world->fingerprint()))
    throw ArtifactError("checkpoint world seed " + std::to_string(rec.world_seed) +
                        " does not match the loaded world (seed " + std::to_string(world->effective_seed()) + ")");

  const json& checksums = j.at("checksums");
  auto load = [&](const std::string& group, const std::string& name, MatrixF& m) {
    const std::string rel = group + "/" + name + ".bin";
    if (!checksums.contains(rel) || sha256_file(dir / rel) != checksums.at(rel).get<std::string>())
      throw ArtifactError("checksum mismatch for " + rel);
    const std::vector<float> v = read_blob(dir / rel, static_cast<size_t>(m.size()));
    std::copy(v.begin(), v.end(), m.data());
  };
  auto& params = rec.model.store().params;
  const bool has_opt = j.at("has_optimizer_state");
  const bool has_ema = j.value("has_weight_ema", false);
  if (has_ema) rec.ema = rec.model.store().zeros_like();
  if (has_opt) {
    rec.adam.m = rec.model.store().zeros_like();
    rec.adam.v = rec.model.store().zeros_like();
  }
  for (size_t i = 0; i < params.size(); ++i) {
    load("params", params[i].name, params[i].value);
    if (has_opt) {
      load("adam_m", params[i].name, rec.adam.m[i]);
      load("adam_v", params[i].name, rec.adam.v[i]);
    }
    if (has_ema) load("ema", params[i].name, rec.ema[i]);
  }
  return rec;
}

text::TextEncoder make_text_encoder(const std::vector<std::string>& vocabulary, int d_txt, uint64_t seed) {
  text::Vocabulary vocab(vocabulary);
  text::TextEmbedder embedder(vocab.size(), d_txt, seed);
  return {std::move(vocab), std::move(embedder)};
}

std::string dataset_fingerprint(const triplets::Dataset& dataset) {
  std::string bytes;
  for (size_t i = 0; i < dataset.examples.size(); ++i) {
    const auto& ex = dataset.examples[i];
    for (const LatentCode* w : {&ex.w_o, &ex.w_e})
      for (Eigen::Index j = 0; j < w->size(); ++j) {
        const float f = static_cast<float>(w->data()[j]);
        bytes.append(reinterpret_cast<const char*>(&f), sizeof f);
      }
    bytes += ex.instruction;
    bytes += i < dataset.splits.size() && dataset.splits[i] == triplets::Split::kTrain ? "\nT\n" : "\nV\n";
  }
  return sha256_hex(bytes);
}

template LossBreakdown batch_loss<float>(const model::Transformer<float>&, const TrainingContext&,
                                         const TrainingBatch&, std::vector<Matrix<float>>*);
template LossBreakdown batch_loss<double>(const model::Transformer<double>&, const TrainingContext&,
                                          const TrainingBatch&, std::vector<Matrix<double>>*);

}  // namespace editkit::trainer
