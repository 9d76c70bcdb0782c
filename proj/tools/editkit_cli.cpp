#include "editkit/config_json.hpp"
#include "editkit/evalkit.hpp"
#include "editkit/run_config.hpp"
#include "editkit/sampler.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>

using namespace editkit;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  std::string world;
  std::string data;
  std::string checkpoint;
  std::vector<std::string> instructions;
  std::optional<double> scale_image;
  std::optional<double> scale_text;
  std::optional<int> steps;
  std::optional<int> t_start;
  std::optional<int> latent_index;
  std::string latent_file;
  std::string variants = "base,tpr_off,no_lid,no_idcond";
  bool reuse = false;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig run_config(const Options& o) {
  if (o.config.empty()) return make_run_config(json::object(), o.seed);
  return load_run_config(o.config, o.seed);
}

std::filesystem::path require_out(const Options& o) {
  if (o.out.empty()) throw UsageError("--out is required");
  return o.out;
}

// Content hash of an artifact directory: every regular file, in path order.
std::string tree_hash(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir)) return {};
  if (std::filesystem::is_regular_file(dir)) return sha256_file(dir);
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "run_log.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += std::filesystem::relative(f, dir).generic_string() + " " + sha256_file(f) + "\n";
  return sha256_hex(all);
}

void write_run_log(const std::filesystem::path& out, const std::string& command, const RunConfig& cfg,
                   const std::map<std::string, std::string>& inputs, double seconds) {
  json in = json::object();
  for (const auto& [k, v] : inputs) in[k] = {{"path", v}, {"content_hash", tree_hash(v)}};
  const json log{{"command", command},
                 {"config_fingerprint", cfg.fingerprint()},
                 {"config", cfg.to_json()},
                 {"inputs", in},
                 {"output_hash", tree_hash(out)},
                 {"wall_seconds", seconds}};
  std::filesystem::create_directories(out);
  write_text_file(out / "run_log.json", log.dump(2) + "\n");
}

world::World load_world_checked(const Options& o, const RunConfig& cfg) {
  if (o.world.empty()) throw UsageError("--world is required");
  if (!std::filesystem::exists(std::filesystem::path(o.world) / "manifest.json"))
    throw ArtifactError("world not found: " + o.world);
  world::World w = world::load_world(o.world);
  if (json(w.config()) != json(cfg.world))
    throw ArtifactError("world at " + o.world + " was built with a different config (seed " +
                        std::to_string(w.config().seed) + ", expected " + std::to_string(cfg.world.seed) + ")");
  return w;
}

triplets::Dataset load_data_checked(const Options& o, const world::World& w) {
  if (o.data.empty()) throw UsageError("--data is required");
  if (!std::filesystem::exists(std::filesystem::path(o.data) / "manifest.json"))
    throw ArtifactError("dataset not found: " + o.data);
  triplets::Dataset d = triplets::load_dataset(o.data);
  if (d.manifest.world_fingerprint != w.fingerprint())
    throw ArtifactError("dataset was generated from a different world (seed " +
                        std::to_string(d.manifest.world_seed) + ")");
  return d;
}

trainer::CheckpointRecord load_checkpoint_checked(const Options& o, const world::World& w) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  return trainer::load_checkpoint(o.checkpoint, &w);
}

text::TextEncoder encoder_for(const trainer::CheckpointRecord& rec) {
  return trainer::make_text_encoder(rec.vocabulary, rec.model.config().d_txt, rec.text_seed);
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

int cmd_gen_world(const Options& o, const RunConfig& cfg) {
  const auto out = require_out(o);
  const world::World w = world::build_world(cfg.world);
  world::save_world(w, out);
  json stds = json::array();
  for (double s : w.probe_stds()) stds.push_back(s);
  print_json({{"effective_seed", w.effective_seed()},
              {"fingerprint", w.fingerprint()},
              {"probe_std", stds},
              {"identity_separation", w.identity_separation(derive_seed(cfg.seed, "separation"))}});
  return 0;
}

int cmd_gen_data(const Options& o, const RunConfig& cfg) {
  const auto out = require_out(o);
  const world::World w = load_world_checked(o, cfg);
  const auto train_tpl = text::builtin_templates();
  const auto test_tpl = text::builtin_test_templates();
  const auto vocab = text::Vocabulary::from_templates({&train_tpl, &test_tpl});
  const auto m = triplets::build_dataset(w, train_tpl, vocab, cfg.data, out);
  print_json({{"n", m.n}, {"per_attribute_counts", m.per_attribute_counts}});
  return 0;
}

int cmd_train(const Options& o, const RunConfig& cfg) {
  const auto out = require_out(o);
  const world::World w = load_world_checked(o, cfg);
  const triplets::Dataset d = load_data_checked(o, w);
  const auto encoder = trainer::make_text_encoder(d.manifest.vocabulary, cfg.model.d_txt, cfg.text_seed);
  const auto rec = trainer::train(w, d, encoder, cfg.model, cfg.train, out, [](const trainer::LossLogEntry& e) {
    std::fprintf(stderr, "step %d  loss %.5f  diffusion %.5f  identity %.5f\n", e.step, e.total, e.diffusion,
                 e.identity);
  });
  print_json({{"steps", rec.step},
              {"final_diffusion_loss", trainer::final_diffusion_loss(rec)},
              {"wall_seconds", rec.wall_seconds}});
  return 0;
}

// +1 unless the sentence is one of the negative templates for `attr`.
int instruction_sign(const std::string& sentence, int attr) {
  const auto norm = [](const std::string& s) {
    std::string out;
    for (const auto& w : text::split_words(s))
      if (w != text::kSeparator) out += w + " ";
    return out;
  };
  const std::string key = norm(sentence);
  for (const auto& set : {text::builtin_templates(), text::builtin_test_templates()})
    if (attr < set.n_attributes())
      for (const auto& t : set.templates(attr, -1))
        if (norm(t) == key) return -1;
  return 1;
}

int cmd_edit(const Options& o, const RunConfig& cfg) {
  if (o.instructions.empty()) throw UsageError("at least one --instruction is required");
  if (o.latent_index && !o.latent_file.empty()) throw UsageError("give either --latent-index or --latent-file");
  const auto out = require_out(o);
  const world::World w = load_world_checked(o, cfg);
  const auto rec = load_checkpoint_checked(o, w);
  const auto encoder = encoder_for(rec);
  const std::string instruction = text::concat_instructions(o.instructions);
  text::tokenize(encoder.vocab, instruction);

  const auto templates = text::builtin_templates();
  evalkit::EditTask task;
  for (const auto& s : o.instructions) {
    const auto attrs = templates.mentioned_attributes(s);
    if (attrs.size() != 1)
      throw UsageError("instruction '" + s + "' must name exactly one known attribute");
    if (attrs[0] >= w.config().n_attr) throw UsageError("instruction '" + s + "' names an attribute outside the world");
    task.attrs.push_back(attrs[0]);
    task.signs.push_back(instruction_sign(s, attrs[0]));
  }
  task.instruction = instruction;

  LatentCode w_o;
  if (!o.latent_file.empty()) {
    w_o = read_matrix_blob(o.latent_file, w.config().k, w.config().d);
  } else {
    const int idx = o.latent_index.value_or(0);
    evalkit::EvalConfig ec = cfg.eval;
    ec.n_test = std::max(ec.n_test, idx + 1);
    if (idx < 0) throw UsageError("--latent-index must be non-negative");
    w_o = evalkit::test_latents(w, ec)[static_cast<size_t>(idx)];
  }

  evalkit::EvalConfig ec = cfg.eval;
  ec.scales = cfg.sample.scales;
  ec.steps = cfg.sample.steps;
  ec.t_start = cfg.sample.t_start;
  const auto model = trainer::inference_model(rec);
  const auto sched = diffusion::make_schedule(model.config().T);
  const LatentCode w_e = evalkit::model_editor(model, w, sched, encoder, ec)({w_o}, {task}).front();
  const evalkit::Editor done = [&](const std::vector<LatentCode>&, const std::vector<evalkit::EditTask>&) {
    return std::vector<LatentCode>{w_e};
  };
  const auto report = evalkit::evaluate(done, w, ec, {w_o}, {task});

  std::filesystem::create_directories(out / "views");
  write_matrix_blob(out / "input_latent.bin", w_o);
  write_matrix_blob(out / "edited_latent.bin", w_e);
  const auto views = evalkit::render_views(w, w_e, ec);
  for (size_t i = 0; i < views.size(); ++i)
    write_matrix_blob(out / "views" / ("view_" + std::to_string(i) + ".bin"), MatrixD(views[i].values.transpose()));
  write_text_file(out / "report.json", evalkit::to_json(report));
  write_text_file(out / "instruction.txt", instruction + "\n");
  std::cout << evalkit::to_json(report);
  return 0;
}

int cmd_eval(const Options& o, const RunConfig& cfg) {
  const auto out = require_out(o);
  const world::World w = load_world_checked(o, cfg);
  const auto rec = load_checkpoint_checked(o, w);
  const auto encoder = encoder_for(rec);
  const auto r = evalkit::evaluate_suites(trainer::inference_model(rec), w, encoder, cfg.eval);
  const auto latents = evalkit::test_latents(w, cfg.eval);
  const auto tpl = text::builtin_test_templates();
  const auto oracle = evalkit::evaluate(evalkit::oracle_editor(w), w, cfg.eval, latents,
                                        evalkit::single_suite(w, tpl, cfg.eval, static_cast<int>(latents.size())));
  std::filesystem::create_directories(out);
  write_text_file(out / "single.json", evalkit::to_json(r.single));
  write_text_file(out / "composite.json", evalkit::to_json(r.composite));
  for (size_t m = 0; m < r.series.size(); ++m)
    write_text_file(out / ("series_" + std::to_string(m + 1) + ".json"), evalkit::to_json(r.series[m]));
  write_text_file(out / "oracle_single.json", evalkit::to_json(oracle));
  std::cout << evalkit::to_json(r.single);
  return 0;
}

int cmd_ablate(const Options& o, const RunConfig& cfg) {
  const auto out = require_out(o);
  std::vector<evalkit::Variant> variants;
  std::stringstream ss(o.variants);
  for (std::string name; std::getline(ss, name, ',');)
    if (!name.empty()) variants.push_back(evalkit::parse_variant(name));
  if (variants.empty()) throw UsageError("--variants is empty");
  const world::World w = load_world_checked(o, cfg);
  const triplets::Dataset d = load_data_checked(o, w);
  const auto encoder = trainer::make_text_encoder(d.manifest.vocabulary, cfg.model.d_txt, cfg.text_seed);
  evalkit::AblationOptions opt;
  opt.out_dir = out;
  opt.reuse_checkpoints = o.reuse;
  opt.log = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
  opt.progress = [](const trainer::LossLogEntry& e) {
    std::fprintf(stderr, "  step %d  loss %.5f  diffusion %.5f\n", e.step, e.total, e.diffusion);
  };
  const auto r = evalkit::ablation_run(w, d, encoder, cfg.model, cfg.train, variants, cfg.eval, opt);
  std::cout << r.comparison_csv;
  if (!r.improvement_csv.empty()) std::cout << "\n" << r.improvement_csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  keep_heap_allocations();
  CLI::App app{"editkit: instruction-conditioned latent editing in a synthetic face world"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "JSON run config (overlays the defaults)");
    c->add_option("--seed", o.seed, "root seed; replaces the config's");
    c->add_option("--out", o.out, "output directory");
  };
  auto* gen_world = app.add_subcommand("gen-world", "build and save a toy world");
  auto* gen_data = app.add_subcommand("gen-data", "generate the triplet dataset");
  auto* train = app.add_subcommand("train", "train the denoiser");
  auto* edit = app.add_subcommand("edit", "edit one latent with one or more instructions");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* ablate = app.add_subcommand("ablate", "train and compare ablation variants");
  for (auto* c : {gen_world, gen_data, train, edit, eval, ablate}) common(c);
  for (auto* c : {gen_data, train, edit, eval, ablate}) c->add_option("--world", o.world, "world directory");
  for (auto* c : {train, ablate}) c->add_option("--data", o.data, "dataset directory");
  for (auto* c : {edit, eval}) c->add_option("--checkpoint", o.checkpoint, "checkpoint directory");
  edit->add_option("--instruction", o.instructions, "instruction text (repeatable)");
  edit->add_option("--scale-image", o.scale_image, "image guidance scale");
  edit->add_option("--scale-text", o.scale_text, "text guidance scale");
  edit->add_option("--steps", o.steps, "DDIM steps (default 15)");
  edit->add_option("--t-start", o.t_start, "partial-noising start (default 600)");
  edit->add_option("--latent-index", o.latent_index, "index into the held-out test latents");
  edit->add_option("--latent-file", o.latent_file, "k x d float32 latent blob");
  ablate->add_option("--variants", o.variants, "comma list of base, tpr_on, tpr_off, no_lid, no_idcond");
  ablate->add_flag("--reuse", o.reuse, "reuse matching checkpoints under --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* cmd = app.get_subcommands().front();
  const auto start = std::chrono::steady_clock::now();
  try {
    RunConfig cfg = run_config(o);
    if (o.scale_image) cfg.sample.scales.image = *o.scale_image;
    if (o.scale_text) cfg.sample.scales.text = *o.scale_text;
    if (o.steps) cfg.sample.steps = *o.steps;
    if (o.t_start) cfg.sample.t_start = *o.t_start;
    cfg.validate();

    std::map<std::string, std::string> inputs;
    if (!o.world.empty()) inputs["world"] = o.world;
    if (!o.data.empty()) inputs["data"] = o.data;
    if (!o.checkpoint.empty()) inputs["checkpoint"] = o.checkpoint;
    if (!o.latent_file.empty()) inputs["latent"] = o.latent_file;

    const std::string name = cmd->get_name();
    int status = 1;
    if (name == "gen-world") status = cmd_gen_world(o, cfg);
    else if (name == "gen-data") status = cmd_gen_data(o, cfg);
    else if (name == "train") status = cmd_train(o, cfg);
    else if (name == "edit") status = cmd_edit(o, cfg);
    else if (name == "eval") status = cmd_eval(o, cfg);
    else if (name == "ablate") status = cmd_ablate(o, cfg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (status == 0) write_run_log(o.out, name, cfg, inputs, secs);
    return status;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << cmd->help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
