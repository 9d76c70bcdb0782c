#include "editkit/world.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>

namespace editkit::world {

using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;
constexpr int kFitSamples = 2000;

// Gram-Schmidt over the rows of `m`, twice for numerical safety.
void orthonormalize_rows(MatrixD& m) {
  for (int pass = 0; pass < 2; ++pass) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < i; ++j) m.row(i) -= m.row(i).dot(m.row(j)) * m.row(j);
      const double n = m.row(i).norm();
      if (n < 1e-12) throw std::runtime_error("degenerate direction during orthonormalization");
      m.row(i) /= n;
    }
  }
}

MatrixD flatten(const LatentCode& w) {
  return Eigen::Map<const MatrixD>(w.data(), 1, w.size());
}

std::string blob_bytes(const MatrixD& m) {
  std::string bytes(static_cast<size_t>(m.size()) * sizeof(float), '\0');
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const float f = static_cast<float>(m.data()[i]);
    std::memcpy(bytes.data() + i * sizeof(float), &f, sizeof(float));
  }
  return bytes;
}

MatrixD as_row(const VectorD& v) { return v.transpose(); }

MatrixD stack_directions(const std::vector<LatentCode>& dirs, int k, int d) {
  MatrixD out(static_cast<Eigen::Index>(dirs.size()), static_cast<Eigen::Index>(k) * d);
  for (size_t a = 0; a < dirs.size(); ++a) out.row(static_cast<Eigen::Index>(a)) = flatten(dirs[a]);
  return out;
}

json config_to_json(const WorldConfig& c) {
  return json{{"k", c.k},           {"d", c.d},           {"n_attr", c.n_attr},
              {"img_dim", c.img_dim}, {"id_dim", c.id_dim}, {"edit_magnitude", c.edit_magnitude},
              {"seed", c.seed}};
}

WorldConfig config_from_json(const json& j) {
  WorldConfig c;
  c.k = j.at("k");
  c.d = j.at("d");
  c.n_attr = j.at("n_attr");
  c.img_dim = j.at("img_dim");
  c.id_dim = j.at("id_dim");
  c.edit_magnitude = j.at("edit_magnitude");
  c.seed = j.at("seed");
  return c;
}

}  // namespace

void WorldConfig::validate() const {
  if (k < 2) throw std::invalid_argument("world.k must be >= 2");
  if (d < 4) throw std::invalid_argument("world.d must be >= 4");
  if (n_attr < 3) throw std::invalid_argument("world.n_attr must be >= 3");
  if (img_dim <= 0 || id_dim <= 0) throw std::invalid_argument("world dims must be positive");
  if (!(edit_magnitude > 0.0) || !std::isfinite(edit_magnitude))
    throw std::invalid_argument("world.edit_magnitude must be positive");
  if (n_attr > (k * d) / 4)
    throw std::invalid_argument("n_attr " + std::to_string(n_attr) +
                                " exceeds orthonormalization capacity k*d/4 = " +
                                std::to_string((k * d) / 4));
}

double cosine(const VectorD& a, const VectorD& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

void World::check_shape(const LatentCode& w) const {
  if (w.rows() != config_.k || w.cols() != config_.d)
    throw std::invalid_argument("latent shape mismatch: expected " + std::to_string(config_.k) +
                                "x" + std::to_string(config_.d));
}

VectorD World::generator_input(const LatentCode& w, CameraPose c) const {
  VectorD x(latent_size() + 2);
  x.head(latent_size()) = Eigen::Map<const VectorD>(w.data(), latent_size());
  x[latent_size()] = c.yaw;
  x[latent_size() + 1] = c.pitch;
  return x;
}

ImageVec World::generate(const LatentCode& w, CameraPose c) const {
  check_shape(w);
  const VectorD h = (gen_w1_ * generator_input(w, c) + gen_b1_).array().tanh();
  return {gen_w2_ * h + gen_b2_};
}

LatentCode World::invert(const LatentRecord& record) const {
  if (!record.source_latent) throw std::invalid_argument("record carries no stored latent");
  check_shape(*record.source_latent);
  return *record.source_latent;
}

IdentityEmbedding World::extract_identity(const ImageVec& x) const {
  if (x.values.size() != config_.img_dim) throw std::invalid_argument("image dim mismatch");
  VectorD p = id_proj_ * x.values;
  const double n = p.norm();
  if (!(n > 1e-12) || !std::isfinite(n))
    throw std::domain_error("degenerate image: identity projection has zero norm");
  return {p / n};
}

LatentCode World::apply_edit(const LatentCode& w, int attr, int sign, double magnitude) const {
  check_shape(w);
  if (sign != 1 && sign != -1) throw std::invalid_argument("sign must be +1 or -1");
  return w + (sign * magnitude) * direction(attr);
}

VectorD World::attribute_logits(const LatentCode& w) const {
  check_shape(w);
  VectorD l(config_.n_attr);
  for (int a = 0; a < config_.n_attr; ++a)
    l[a] = (w - prior_mean_).cwiseProduct(directions_[a]).sum();
  return l;
}

LatentCode World::sample_prior(Rng& rng) const {
  return prior_mean_ + prior_scale_ * rng.normal_matrix(config_.k, config_.d);
}

const LatentCode& World::direction(int attr) const {
  if (attr < 0 || attr >= config_.n_attr)
    throw std::out_of_range("attribute index out of range: " + std::to_string(attr));
  return directions_[attr];
}

double World::probe_std(int attr) const {
  if (attr < 0 || attr >= config_.n_attr) throw std::out_of_range("attribute index out of range");
  return probe_std_[attr];
}

MatrixD World::identity_batch(const MatrixD& flat, CameraPose c) const {
  if (flat.cols() != latent_size()) throw std::invalid_argument("flattened latent width mismatch");
  const int ls = latent_size();
  MatrixD a = flat * gen_w1_.leftCols(ls).transpose();
  const VectorD pose_bias = gen_w1_.col(ls) * c.yaw + gen_w1_.col(ls + 1) * c.pitch + gen_b1_;
  a.rowwise() += pose_bias.transpose();
  const MatrixD h = a.array().tanh().matrix();
  MatrixD p = h * fused_id_w_.transpose();
  p.rowwise() += fused_id_b_.transpose();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double n = p.row(i).norm();
    if (!(n > 1e-12)) throw std::domain_error("degenerate image: identity projection has zero norm");
    p.row(i) /= n;
  }
  return p;
}

VectorD World::identity_cosine_batch(const MatrixD& flat, CameraPose c, const MatrixD& targets,
                                     MatrixD* grad) const {
  if (flat.cols() != latent_size()) throw std::invalid_argument("flattened latent width mismatch");
  if (targets.rows() != flat.rows() || targets.cols() != config_.id_dim)
    throw std::invalid_argument("identity target shape mismatch");
  const int ls = latent_size();
  MatrixD a = flat * gen_w1_.leftCols(ls).transpose();
  const VectorD pose_bias = gen_w1_.col(ls) * c.yaw + gen_w1_.col(ls + 1) * c.pitch + gen_b1_;
  a.rowwise() += pose_bias.transpose();
  const MatrixD h = a.array().tanh().matrix();
  MatrixD p = h * fused_id_w_.transpose();
  p.rowwise() += fused_id_b_.transpose();

  VectorD cosines(flat.rows());
  MatrixD dp(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double n = p.row(i).norm();
    if (!(n > 1e-12)) throw std::domain_error("degenerate image: identity projection has zero norm");
    const auto f = p.row(i) / n;
    cosines[i] = f.dot(targets.row(i));
    // d cos / d p = (t - f (f . t)) / |p|
    dp.row(i) = (targets.row(i) - f * cosines[i]) / n;
  }
  if (grad) {
    MatrixD dh = dp * fused_id_w_;
    dh.array() *= (1.0 - h.array().square());
    *grad = dh * gen_w1_.leftCols(ls);
  }
  return cosines;
}

VectorD World::joint_image(const ImageVec& x) const { return joint_img_ * x.values; }

VectorD World::joint_text(int attr, int sign) const {
  if (attr < 0 || attr >= config_.n_attr) throw std::out_of_range("attribute index out of range");
  return joint_txt_.row(attr).transpose() * static_cast<double>(sign);
}

double World::identity_separation(uint64_t seed, int trials) const {
  Rng rng(seed);
  double same = 0.0, cross = 0.0;
  for (int i = 0; i < trials; ++i) {
    const LatentCode w = sample_prior(rng);
    const LatentCode w2 = sample_prior(rng);
    const CameraPose c1{(rng.uniform() - 0.5) * M_PI / 2, (rng.uniform() - 0.5) * M_PI / 3};
    const CameraPose c2{(rng.uniform() - 0.5) * M_PI / 2, (rng.uniform() - 0.5) * M_PI / 3};
    const VectorD f1 = extract_identity(generate(w, c1)).values;
    same += f1.dot(extract_identity(generate(w, c2)).values);
    cross += f1.dot(extract_identity(generate(w2, c1)).values);
  }
  return (same - cross) / trials;
}

void World::finalize() {
  fused_id_w_ = id_proj_ * gen_w2_;
  fused_id_b_ = id_proj_ * gen_b2_;
}

std::vector<World::NamedTensor> World::named_tensors() const {
  return {{"gen_w1", gen_w1_},
          {"gen_b1", as_row(gen_b1_)},
          {"gen_w2", gen_w2_},
          {"gen_b2", as_row(gen_b2_)},
          {"id_proj", id_proj_},
          {"directions", stack_directions(directions_, config_.k, config_.d)},
          {"prior_mean", prior_mean_},
          {"joint_img", joint_img_},
          {"joint_txt", joint_txt_}};
}

std::string World::fingerprint() const {
  const auto tensors = named_tensors();
  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["config"] = config_to_json(config_);
  manifest["effective_seed"] = effective_seed_;
  manifest["probe_std"] = probe_std_;
  for (const auto& t : tensors) manifest["checksums"][t.name] = sha256_hex(blob_bytes(t.value));
  return sha256_hex(manifest.dump());
}

World build_attempt(const WorldConfig& config, uint64_t seed);

World build_world(const WorldConfig& config) {
  config.validate();
  for (int attempt = 0; attempt <= kSeparationRetries; ++attempt) {
    World w = build_attempt(config, config.seed + static_cast<uint64_t>(attempt));
    if (w.identity_separation(derive_seed(w.effective_seed_, "separation")) >= kSeparationThreshold)
      return w;
  }
  throw std::runtime_error("identity separation gate failed after " +
                           std::to_string(kSeparationRetries) + " retries");
}

World build_attempt(const WorldConfig& config, uint64_t seed) {
  World w;
  w.config_ = config;
  w.effective_seed_ = seed;
  Rng rng(derive_seed(seed, "world"));
  const int ls = config.k * config.d;
  const int in_dim = ls + 2;
  const int hidden = 4 * config.img_dim;

  w.gen_w1_ = rng.normal_matrix(hidden, in_dim) * std::sqrt(2.0 / in_dim);
  w.gen_b1_ = rng.normal_matrix(hidden, 1) * 0.1;
  w.gen_w2_ = rng.normal_matrix(config.img_dim, hidden) * std::sqrt(2.0 / hidden);
  w.gen_b2_ = VectorD::Zero(config.img_dim);
  w.id_proj_ = rng.normal_matrix(config.id_dim, config.img_dim) * std::sqrt(1.0 / config.img_dim);
  w.prior_mean_ = rng.normal_matrix(config.k, config.d) * 0.5;
  w.prior_scale_ = 1.0;

  MatrixD dirs = rng.normal_matrix(config.n_attr, ls);
  orthonormalize_rows(dirs);
  round_to_float(w.gen_w1_);
  round_to_float(w.gen_b1_);
  round_to_float(w.gen_w2_);
  round_to_float(w.id_proj_);
  round_to_float(w.prior_mean_);
  round_to_float(dirs);
  w.directions_.clear();
  for (int a = 0; a < config.n_attr; ++a)
    w.directions_.push_back(Eigen::Map<const MatrixD>(dirs.row(a).data(), config.k, config.d));
  w.finalize();

  // Probe normalizers from a fixed reference sample.
  Rng probe_rng(derive_seed(seed, "probe"));
  std::vector<double> sum(config.n_attr, 0.0), sum_sq(config.n_attr, 0.0);
  for (int i = 0; i < kProbeSamples; ++i) {
    const VectorD l = w.attribute_logits(w.sample_prior(probe_rng));
    for (int a = 0; a < config.n_attr; ++a) {
      sum[a] += l[a];
      sum_sq[a] += l[a] * l[a];
    }
  }
  w.probe_std_.resize(config.n_attr);
  for (int a = 0; a < config.n_attr; ++a) {
    const double mean = sum[a] / kProbeSamples;
    w.probe_std_[a] = std::sqrt(std::max(sum_sq[a] / kProbeSamples - mean * mean, 0.0));
  }

  // Joint embedding: unit text directions, image map fitted by ridge regression
  // so each oracle edit's image delta lands on its text direction.
  const int joint = std::max(32, config.n_attr);
  Rng joint_rng(derive_seed(seed, "joint"));
  MatrixD txt = joint_rng.normal_matrix(config.n_attr, joint);
  orthonormalize_rows(txt);
  round_to_float(txt);
  w.joint_txt_ = txt;

  MatrixD deltas(kFitSamples, config.img_dim);
  MatrixD targets(kFitSamples, joint);
  for (int i = 0; i < kFitSamples; ++i) {
    const LatentCode base = w.sample_prior(joint_rng);
    const int a = joint_rng.uniform_int(0, config.n_attr - 1);
    const int s = joint_rng.uniform() < 0.5 ? -1 : 1;
    const CameraPose c{(joint_rng.uniform() - 0.5) * M_PI / 3, (joint_rng.uniform() - 0.5) * M_PI / 4.5};
    const LatentCode edited = w.apply_edit(base, a, s, config.edit_magnitude);
    deltas.row(i) = (w.generate(edited, c).values - w.generate(base, c).values).transpose();
    targets.row(i) = txt.row(a) * s;
  }
  MatrixD gram = deltas.transpose() * deltas;
  const double ridge = 1e-3 * gram.trace() / config.img_dim;
  gram.diagonal().array() += ridge;
  w.joint_img_ = gram.ldlt().solve(deltas.transpose() * targets).transpose();
  round_to_float(w.joint_img_);
  return w;
}

void save_world(const World& w, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto tensors = w.named_tensors();
  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["config"] = config_to_json(w.config_);
  manifest["effective_seed"] = w.effective_seed_;
  manifest["probe_std"] = w.probe_std_;
  for (const auto& t : tensors) {
    const std::string bytes = blob_bytes(t.value);
    write_text_file(dir / (t.name + ".bin"), bytes);
    manifest["checksums"][t.name] = sha256_hex(bytes);
  }
  json full = manifest;
  full["fingerprint"] = sha256_hex(manifest.dump());
  full["prior_scale"] = w.prior_scale_;
  for (const auto& t : tensors) full["shapes"][t.name] = {t.value.rows(), t.value.cols()};
  write_text_file(dir / "manifest.json", full.dump(2) + "\n");
}

World load_world(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw ArtifactError("world not found: " + dir.string());
  const json full = json::parse(read_text_file(dir / "manifest.json"));
  if (full.at("schema_version").get<int>() != kSchemaVersion)
    throw ArtifactError("world schema version mismatch");
  World w;
  w.config_ = config_from_json(full.at("config"));
  w.config_.validate();
  w.effective_seed_ = full.at("effective_seed");
  w.probe_std_ = full.at("probe_std").get<std::vector<double>>();
  w.prior_scale_ = full.at("prior_scale");

  auto load = [&](const std::string& name) {
    const auto shape = full.at("shapes").at(name);
    const std::string bytes = read_text_file(dir / (name + ".bin"));
    if (sha256_hex(bytes) != full.at("checksums").at(name).get<std::string>())
      throw ArtifactError("checksum mismatch for world tensor " + name);
    return read_matrix_blob(dir / (name + ".bin"), shape[0], shape[1]);
  };
  const WorldConfig& c = w.config_;
  w.gen_w1_ = load("gen_w1");
  w.gen_b1_ = load("gen_b1").transpose();
  w.gen_w2_ = load("gen_w2");
  w.gen_b2_ = load("gen_b2").transpose();
  w.id_proj_ = load("id_proj");
  const MatrixD dirs = load("directions");
  w.prior_mean_ = load("prior_mean");
  w.joint_img_ = load("joint_img");
  w.joint_txt_ = load("joint_txt");
  if (w.gen_w1_.cols() != c.k * c.d + 2 || w.prior_mean_.rows() != c.k ||
      w.prior_mean_.cols() != c.d || dirs.rows() != c.n_attr || w.id_proj_.rows() != c.id_dim)
    throw ArtifactError("world tensor shapes inconsistent with config");
  for (int a = 0; a < c.n_attr; ++a)
    w.directions_.push_back(Eigen::Map<const MatrixD>(dirs.row(a).data(), c.k, c.d));
  w.finalize();
  if (w.fingerprint() != full.at("fingerprint").get<std::string>())
    throw ArtifactError("world fingerprint mismatch");
  return w;
}

}  // namespace editkit::world
