#include "editkit/run_config.hpp"

#include "editkit/config_json.hpp"

namespace editkit {

using nlohmann::json;

void to_json(json& j, const SampleConfig& c) { j = {{"scales", c.scales}, {"steps", c.steps}, {"t_start", c.t_start}}; }

void from_json(const json& j, SampleConfig& c) {
  require_known_keys(j, {"scales", "steps", "t_start"}, "sample");
  if (j.contains("scales")) j.at("scales").get_to(c.scales);
  overlay(j, "steps", c.steps);
  overlay(j, "t_start", c.t_start);
}

namespace {

bool has(const json& j, const char* section, const char* key) {
  return j.contains(section) && j.at(section).is_object() && j.at(section).contains(key);
}

}  // namespace

void RunConfig::validate() const {
  world.validate();
  model.validate();
  train.validate(model.T);
  eval.validate();
  if (model.k != world.k || model.d != world.d) throw std::invalid_argument("model.k/d must match world.k/d");
  if (model.id_dim != world.id_dim) throw std::invalid_argument("model.id_dim must match world.id_dim");
  if (model.identity_conditioning != train.id_module_enabled)
    throw std::invalid_argument("model.identity_conditioning must equal train.id_module_enabled");
  if (data.n < 1) throw std::invalid_argument("data.n must be positive");
  if (!(data.train_fraction > 0.0 && data.train_fraction <= 1.0))
    throw std::invalid_argument("data.train_fraction must lie in (0, 1]");
  for (const auto* s : {&sample.steps, &eval.steps})
    if (*s < 1) throw std::invalid_argument("sampler steps must be >= 1");
  for (int t : {sample.t_start, eval.t_start})
    if (t < 1 || t > model.T) throw std::invalid_argument("t_start must lie in [1, T]");
  if (sample.steps > sample.t_start || eval.steps > eval.t_start)
    throw std::invalid_argument("sampler steps cannot exceed t_start");
  for (int a : eval.attributes)
    if (a < 0 || a >= world.n_attr) throw std::invalid_argument("eval.attributes entry out of range");
  if (world.n_attr > text::builtin_templates().n_attributes())
    throw std::invalid_argument("world.n_attr exceeds the " + std::to_string(text::builtin_templates().n_attributes()) +
                                " attributes with instruction templates");
}

json RunConfig::to_json() const {
  return {{"seed", seed}, {"world", world}, {"data", data},   {"model", model},
          {"train", train}, {"sample", sample}, {"eval", eval}, {"text_seed", text_seed}};
}

std::string RunConfig::fingerprint() const { return sha256_hex(to_json().dump()); }

RunConfig make_run_config(const json& j, std::optional<uint64_t> root_seed) {
  require_known_keys(j, {"seed", "world", "data", "model", "train", "sample", "eval", "text_seed"}, "root");
  RunConfig c;
  overlay(j, "seed", c.seed);
  if (root_seed) c.seed = *root_seed;
  if (j.contains("world")) j.at("world").get_to(c.world);
  if (j.contains("data")) j.at("data").get_to(c.data);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("sample")) j.at("sample").get_to(c.sample);
  if (j.contains("eval")) j.at("eval").get_to(c.eval);
  overlay(j, "text_seed", c.text_seed);

  if (!has(j, "world", "seed")) c.world.seed = derive_seed(c.seed, "world");
  if (!has(j, "data", "seed")) c.data.seed = derive_seed(c.seed, "data");
  if (!has(j, "train", "seed")) c.train.seed = derive_seed(c.seed, "train");
  if (!has(j, "eval", "seed")) c.eval.seed = derive_seed(c.seed, "eval");
  if (!j.contains("text_seed")) c.text_seed = derive_seed(c.seed, "text");

  // Shared dimensions follow the world unless set explicitly.
  if (!has(j, "model", "k")) c.model.k = c.world.k;
  if (!has(j, "model", "d")) c.model.d = c.world.d;
  if (!has(j, "model", "id_dim")) c.model.id_dim = c.world.id_dim;
  if (!has(j, "model", "identity_conditioning")) c.model.identity_conditioning = c.train.id_module_enabled;
  if (!has(j, "eval", "scales")) c.eval.scales = c.sample.scales;
  if (!has(j, "eval", "steps")) c.eval.steps = c.sample.steps;
  if (!has(j, "eval", "t_start")) c.eval.t_start = c.sample.t_start;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, std::optional<uint64_t> root_seed) {
  if (!std::filesystem::exists(path)) throw std::invalid_argument("config not found: " + path.string());
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config is not valid JSON: " + std::string(e.what()));
  }
  return make_run_config(j, root_seed);
}

}  // namespace editkit
