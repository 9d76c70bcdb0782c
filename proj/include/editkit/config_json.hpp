#pragma once

// JSON mapping for the per-module config structs. Reading overlays onto the
// current values, so absent keys keep their defaults; unknown keys throw.

#include "editkit/diffusion.hpp"
#include "editkit/evalkit.hpp"
#include "editkit/model.hpp"
#include "editkit/trainer.hpp"
#include "editkit/triplets.hpp"
#include "editkit/world.hpp"

#include <json.hpp>

#include <initializer_list>
#include <stdexcept>
#include <string>

namespace editkit {

inline void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> keys,
                               const std::string& section) {
  if (!j.is_object()) throw std::invalid_argument("config section '" + section + "' must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || item.key() == k;
    if (!known) throw std::invalid_argument("unknown key '" + item.key() + "' in config section '" + section + "'");
  }
}

template <class V>
void overlay(const nlohmann::json& j, const char* key, V& value) {
  if (j.contains(key)) value = j.at(key).get<V>();
}

}  // namespace editkit

namespace editkit::world {

inline void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"k", c.k},           {"d", c.d},           {"n_attr", c.n_attr},
       {"img_dim", c.img_dim}, {"id_dim", c.id_dim}, {"edit_magnitude", c.edit_magnitude},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, WorldConfig& c) {
  require_known_keys(j, {"k", "d", "n_attr", "img_dim", "id_dim", "edit_magnitude", "seed"}, "world");
  overlay(j, "k", c.k);
  overlay(j, "d", c.d);
  overlay(j, "n_attr", c.n_attr);
  overlay(j, "img_dim", c.img_dim);
  overlay(j, "id_dim", c.id_dim);
  overlay(j, "edit_magnitude", c.edit_magnitude);
  overlay(j, "seed", c.seed);
}

}  // namespace editkit::world

namespace editkit::triplets {

inline void to_json(nlohmann::json& j, const DatasetOptions& c) {
  j = {{"n", c.n}, {"train_fraction", c.train_fraction}, {"seed", c.seed}, {"magnitude_jitter", c.magnitude_jitter}};
}

inline void from_json(const nlohmann::json& j, DatasetOptions& c) {
  require_known_keys(j, {"n", "train_fraction", "seed", "magnitude_jitter"}, "data");
  overlay(j, "n", c.n);
  overlay(j, "train_fraction", c.train_fraction);
  overlay(j, "seed", c.seed);
  overlay(j, "magnitude_jitter", c.magnitude_jitter);
}

}  // namespace editkit::triplets

namespace editkit::model {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"k", c.k},
       {"d", c.d},
       {"h", c.h},
       {"n_blocks", c.n_blocks},
       {"n_heads", c.n_heads},
       {"d_txt", c.d_txt},
       {"id_dim", c.id_dim},
       {"cond_dim", c.cond_dim},
       {"freq_dim", c.freq_dim},
       {"text_len", c.text_len},
       {"T", c.T},
       {"square_pad", c.square_pad},
       {"identity_conditioning", c.identity_conditioning}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  require_known_keys(j,
                     {"k", "d", "h", "n_blocks", "n_heads", "d_txt", "id_dim", "cond_dim", "freq_dim", "text_len",
                      "T", "square_pad", "identity_conditioning"},
                     "model");
  overlay(j, "k", c.k);
  overlay(j, "d", c.d);
  overlay(j, "h", c.h);
  overlay(j, "n_blocks", c.n_blocks);
  overlay(j, "n_heads", c.n_heads);
  overlay(j, "d_txt", c.d_txt);
  overlay(j, "id_dim", c.id_dim);
  overlay(j, "cond_dim", c.cond_dim);
  overlay(j, "freq_dim", c.freq_dim);
  overlay(j, "text_len", c.text_len);
  overlay(j, "T", c.T);
  overlay(j, "square_pad", c.square_pad);
  overlay(j, "identity_conditioning", c.identity_conditioning);
}

}  // namespace editkit::model

namespace editkit::trainer {

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"p1", c.p1},
       {"p2", c.p2},
       {"lambda_id", c.lambda_id},
       {"t_threshold", c.t_threshold},
       {"grad_clip", c.grad_clip},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps},
       {"log_interval", c.log_interval},
       {"checkpoint_interval", c.checkpoint_interval},
       {"seed", c.seed},
       {"tpr_enabled", c.tpr_enabled},
       {"tpr_max_start", c.tpr_max_start},
       {"id_module_enabled", c.id_module_enabled},
       {"weight_ema", c.weight_ema},
       {"warmup_steps", c.warmup_steps},
       {"cosine_decay", c.cosine_decay}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  require_known_keys(j,
                     {"steps", "batch_size", "lr", "p1", "p2", "lambda_id", "t_threshold", "grad_clip", "adam_beta1",
                      "adam_beta2", "adam_eps", "log_interval", "checkpoint_interval", "seed", "tpr_enabled",
                      "tpr_max_start", "id_module_enabled", "weight_ema", "warmup_steps", "cosine_decay"},
                     "train");
  overlay(j, "steps", c.steps);
  overlay(j, "batch_size", c.batch_size);
  overlay(j, "lr", c.lr);
  overlay(j, "p1", c.p1);
  overlay(j, "p2", c.p2);
  overlay(j, "lambda_id", c.lambda_id);
  overlay(j, "t_threshold", c.t_threshold);
  overlay(j, "grad_clip", c.grad_clip);
  overlay(j, "adam_beta1", c.adam_beta1);
  overlay(j, "adam_beta2", c.adam_beta2);
  overlay(j, "adam_eps", c.adam_eps);
  overlay(j, "log_interval", c.log_interval);
  overlay(j, "checkpoint_interval", c.checkpoint_interval);
  overlay(j, "seed", c.seed);
  overlay(j, "tpr_enabled", c.tpr_enabled);
  overlay(j, "tpr_max_start", c.tpr_max_start);
  overlay(j, "id_module_enabled", c.id_module_enabled);
  overlay(j, "weight_ema", c.weight_ema);
  overlay(j, "warmup_steps", c.warmup_steps);
  overlay(j, "cosine_decay", c.cosine_decay);
}

}  // namespace editkit::trainer

namespace editkit::diffusion {

inline void to_json(nlohmann::json& j, const GuidanceScales& s) { j = {{"image", s.image}, {"text", s.text}}; }

inline void from_json(const nlohmann::json& j, GuidanceScales& s) {
  require_known_keys(j, {"image", "text"}, "scales");
  overlay(j, "image", s.image);
  overlay(j, "text", s.text);
}

}  // namespace editkit::diffusion

namespace editkit::evalkit {

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"n_views", c.n_views}, {"yaw_range_deg", c.yaw_range_deg}, {"pitch_range_deg", c.pitch_range_deg},
       {"attributes", c.attributes}, {"scales", c.scales},         {"steps", c.steps},
       {"t_start", c.t_start},     {"n_test", c.n_test},           {"seed", c.seed},
       {"batch", c.batch}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  require_known_keys(j,
                     {"n_views", "yaw_range_deg", "pitch_range_deg", "attributes", "scales", "steps", "t_start",
                      "n_test", "seed", "batch"},
                     "eval");
  overlay(j, "n_views", c.n_views);
  overlay(j, "yaw_range_deg", c.yaw_range_deg);
  overlay(j, "pitch_range_deg", c.pitch_range_deg);
  overlay(j, "attributes", c.attributes);
  if (j.contains("scales")) j.at("scales").get_to(c.scales);
  overlay(j, "steps", c.steps);
  overlay(j, "t_start", c.t_start);
  overlay(j, "n_test", c.n_test);
  overlay(j, "seed", c.seed);
  overlay(j, "batch", c.batch);
}

}  // namespace editkit::evalkit
