// est: synthesize data, train, evaluate, gradient-check, profile and inspect
// the snippet transformer.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "est/container.hpp"
#include "est/errors.hpp"
#include "est/gradcheck.hpp"
#include "est/model.hpp"
#include "est/parameters.hpp"
#include "est/run_config.hpp"
#include "est/synth.hpp"
#include "est/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kMismatch = 3, kNumeric = 4 };

est::RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  est::RunConfig config = path.empty() ? est::RunConfig{} : est::load_run_config(path);
  for (const auto& o : overrides) est::apply_override(config, o);
  config.finalize();
  return config;
}

est::FrameGeometry parse_geometry(const std::string& text) {
  est::FrameGeometry g;
  char x1 = 0, x2 = 0;
  std::istringstream in(text);
  if (!(in >> g.height >> x1 >> g.width >> x2 >> g.channels) || x1 != 'x' || x2 != 'x' || !in.eof() ||
      g.frame_size() == 0) {
    throw est::ConfigError("--geometry expects HxWxC, got '" + text + "'");
  }
  return g;
}

est::Dataset load_dataset(const std::string& path, const est::ModelConfig& model, const char* what) {
  if (path.empty()) throw est::ConfigError(std::string(what) + " is not set");
  if (!fs::exists(path)) throw est::ConfigError(std::string(what) + " '" + path + "' does not exist");
  est::Dataset ds = est::read_container(path);
  if (ds.num_classes != model.num_classes) {
    throw est::ArtifactMismatch("dataset '" + path + "' has " + std::to_string(ds.num_classes) +
                                " classes, config has " + std::to_string(model.num_classes));
  }
  for (const auto& v : ds.videos) {
    if (v.frames.geometry != model.geometry) {
      throw est::ArtifactMismatch("dataset '" + path + "' video " + std::to_string(v.id) +
                                  " frame geometry does not match the config");
    }
  }
  return ds;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw est::ValidationError("cannot write '" + path.string() + "'");
  out << text;
}

int cmd_synth(const std::string& out, std::uint32_t classes, std::size_t per_class, std::uint64_t seed,
              const std::string& geometry) {
  est::SynthConfig cfg;
  cfg.num_classes = classes;
  cfg.per_class = per_class;
  cfg.seed = seed;
  cfg.geometry = parse_geometry(geometry);
  if (classes < 2) throw est::ConfigError("--classes must be at least 2");
  if (per_class == 0) throw est::ConfigError("--per-class must be positive");
  const est::Dataset ds = est::synth_dataset(cfg);
  est::write_container(ds, out);
  std::cerr << "wrote " << ds.videos.size() << " videos to " << out << "\n";
  return kOk;
}

int cmd_train(const est::RunConfig& config) {
  const est::Dataset train = load_dataset(config.train_data, config.model, "train_data");
  std::optional<est::Dataset> test;
  if (!config.test_data.empty()) test = load_dataset(config.test_data, config.model, "test_data");

  const fs::path dir = config.out_dir;
  fs::create_directories(dir);
  write_text(dir / "config.cfg", est::render_run_config(config));

  est::EstModel model(config.model, config.seed);
  est::Trainer trainer(
      model, config.train, config.pipeline,
      est::generate_permutation_table(config.model.snippets, config.model.num_shuffle_types, config.permutation_seed),
      train.videos.size());

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  std::vector<double> trace;
  std::optional<double> order_acc;
  for (std::size_t e = 0; e < config.train.epochs; ++e) {
    const est::EpochStats stats = trainer.train_epoch(train);
    metrics << est::metrics_line(stats) << "\n" << std::flush;
    std::cerr << est::metrics_line(stats) << "\n";
    trace.push_back(stats.loss_cls + config.train.lambda_ssop * stats.loss_ssop);
    order_acc = stats.order_accuracy;
  }
  est::save_checkpoint(model.parameters(), dir / "checkpoint.estw");

  est::EvalReport report = est::evaluate(model, test ? *test : train, config.pipeline, config.eval_seed);
  report.order_accuracy = order_acc;
  report.loss_trace = trace;
  write_text(dir / "eval.json", est::to_json(report) + "\n");
  std::cout << est::to_json(report) << "\n";
  return kOk;
}

std::unique_ptr<est::EstModel> load_model(const est::RunConfig& config, const std::string& checkpoint) {
  if (checkpoint.empty()) throw est::ConfigError("--checkpoint is required");
  if (!fs::exists(checkpoint)) throw est::ConfigError("checkpoint '" + checkpoint + "' does not exist");
  auto model = std::make_unique<est::EstModel>(config.model, config.seed);
  est::load_model_checkpoint(*model, est::read_checkpoint(checkpoint));
  return model;
}

int cmd_eval(const est::RunConfig& config, const std::string& checkpoint, const std::string& data) {
  auto model = load_model(config, checkpoint);
  const est::Dataset ds = load_dataset(data.empty() ? config.test_data : data, config.model, "--data");
  std::cout << est::to_json(est::evaluate(*model, ds, config.pipeline, config.eval_seed)) << "\n";
  return kOk;
}

int cmd_gradcheck(const est::RunConfig& config) {
  est::EstModel model(config.model, config.seed);
  est::SynthConfig sc;
  sc.num_classes = static_cast<std::uint32_t>(config.model.num_classes);
  sc.per_class = 1;
  sc.geometry = config.model.geometry;
  sc.frames = config.pipeline.target_frames;
  sc.seed = config.seed;
  const est::Dataset ds = est::synth_dataset(sc);
  const est::Video& video = ds.videos.at(config.seed % ds.videos.size());

  est::Rng rng = est::Rng::derive(config.seed, est::Stream::kGradcheck);
  est::SnippetSet set = est::build_snippet_set(video, rng, config.pipeline);
  const bool ssop = config.train.lambda_ssop > 0.0;
  if (ssop) {
    const auto table =
        est::generate_permutation_table(config.model.snippets, config.model.num_shuffle_types, config.permutation_seed);
    set = est::shuffle_snippets(set, rng.uniform_index(table.size()), table);
  }
  auto loss = [&] {
    const est::ForwardResult out = model.forward(set, ssop);
    est::Tensor l_s;
    if (ssop) l_s = est::loss_ssop(out.ssop_probs, set.order_label);
    return est::total_loss(est::loss_cls(out.fer_probs, set.label), l_s, config.train.lambda_ssop);
  };
  const est::GradCheckReport report =
      est::gradcheck(loss, model.parameters(), config.gradcheck_step, config.gradcheck_tolerance);
  json j = {{"pass", report.pass},
            {"max_relative_error", report.max_relative_error},
            {"worst_parameter", report.worst_parameter},
            {"step", report.step},
            {"tolerance", report.tolerance},
            {"elements_checked", report.elements_checked},
            {"per_parameter", report.per_parameter}};
  std::cout << j.dump(2) << "\n";
  return report.pass ? kOk : kNumeric;
}

int cmd_profile(const est::RunConfig& config) {
  const est::Profile p = est::profile(config.model);
  std::cout << json{{"params", p.parameters}, {"macs", p.macs}}.dump() << "\n";
  return kOk;
}

int cmd_inspect(const est::RunConfig& config, const std::string& checkpoint, const std::string& data) {
  auto model = load_model(config, checkpoint);
  const est::Dataset ds = load_dataset(data.empty() ? config.test_data : data, config.model, "--data");
  const est::AttentionReport report = est::inspect_attention(*model, ds, config.pipeline, config.eval_seed);
  for (const auto& r : report.records) std::cout << est::to_json(r) << "\n";
  std::cout << json{{"histogram", report.histogram}, {"entropy", report.entropy()}, {"max_share", report.max_share()}}
                   .dump()
            << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expression snippet transformer toolkit"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, data, out = "synth.estv", geometry = "32x32x1";
  std::vector<std::string> overrides;
  std::uint32_t classes = 7;
  std::size_t per_class = 100;
  std::uint64_t seed = 0;

  auto* synth = app.add_subcommand("synth", "write a synthetic ESTV dataset");
  synth->add_option("--out", out, "output path")->capture_default_str();
  synth->add_option("--classes", classes, "number of classes")->capture_default_str();
  synth->add_option("--per-class", per_class, "videos per class")->capture_default_str();
  synth->add_option("--seed", seed, "generator seed")->capture_default_str();
  synth->add_option("--geometry", geometry, "frame geometry HxWxC")->capture_default_str();

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config file");
    cmd->add_option("--set", overrides, "key=value override, repeatable");
  };
  auto* train = app.add_subcommand("train", "train and write a run directory");
  add_config(train);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint, report JSON on stdout");
  add_config(eval);
  eval->add_option("--checkpoint", checkpoint, "ESTW checkpoint")->required();
  eval->add_option("--data", data, "ESTV dataset (defaults to test_data)");
  auto* gradcheck = app.add_subcommand("gradcheck", "compare backward against finite differences");
  add_config(gradcheck);
  auto* profile = app.add_subcommand("profile", "analytic parameter and MAC counts");
  add_config(profile);
  auto* inspect = app.add_subcommand("inspect", "per-video decoder attention and argmax histogram");
  add_config(inspect);
  inspect->add_option("--checkpoint", checkpoint, "ESTW checkpoint")->required();
  inspect->add_option("--data", data, "ESTV dataset (defaults to test_data)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (synth->parsed()) return cmd_synth(out, classes, per_class, seed, geometry);
    const est::RunConfig config = resolve_config(config_path, overrides);
    if (train->parsed()) return cmd_train(config);
    if (eval->parsed()) return cmd_eval(config, checkpoint, data);
    if (gradcheck->parsed()) return cmd_gradcheck(config);
    if (profile->parsed()) return cmd_profile(config);
    if (inspect->parsed()) return cmd_inspect(config, checkpoint, data);
  } catch (const est::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const est::ArtifactMismatch& e) {
    std::cerr << "artifact mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const est::FormatError& e) {
    std::cerr << "artifact mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const est::DimensionError& e) {
    std::cerr << "artifact mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const est::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const est::DeterminismError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
