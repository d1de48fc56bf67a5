// Command-line workflows: synthetic data generation, training, embedding
// extraction, retrieval evaluation, attention-map export, and gradient
// checking. Exit codes: 0 success, 1 usage error, 2 data error, 3 check
// failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "saane/saane.hpp"

namespace fs = std::filesystem;
using namespace saane;

namespace {

RunConfig config_from_flag(const std::string& path) {
  if (path.empty()) return RunConfig{};
  return load_run_config(path);
}

// Training runs leave a manifest next to the checkpoint; later commands
// rebuild the architecture from it (or from an explicit --config, checked
// against the checkpoint digest).
RunConfig config_for_checkpoint(const std::string& ckpt, const std::string& config_flag) {
  if (!config_flag.empty()) return load_run_config(config_flag);
  const fs::path manifest = ckpt + ".manifest.json";
  if (!fs::exists(manifest)) {
    throw DataError(manifest.string() +
                    ": not found; pass --config to describe the checkpoint architecture");
  }
  std::ifstream in(manifest);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest.string() + ": invalid JSON: " + e.what());
  }
  if (!j.contains("config")) throw DataError(manifest.string() + ": missing config section");
  return run_config_from_json(j["config"]);
}

struct LoadedModel {
  RunConfig cfg;
  EmbeddingModel<float> model;
  std::uint64_t steps;
};

LoadedModel load_model(const std::string& ckpt, const std::string& config_flag) {
  RunConfig cfg = config_for_checkpoint(ckpt, config_flag);
  Rng rng(cfg.seed);
  EmbeddingModel<float> model(cfg, rng);
  const std::uint64_t steps = load_checkpoint(ckpt, arch_digest(cfg), model.parameters());
  return LoadedModel{cfg, std::move(model), steps};
}

int cmd_synth(const std::string& out_dir, int places, int conditions, std::uint64_t seed,
              const std::string& config_flag) {
  RunConfig cfg = config_from_flag(config_flag);
  cfg.seed = seed;
  Dataset data = generate_synthetic(cfg, places, conditions, seed);
  const fs::path dir(out_dir);
  write_features(data, dir / "train.safm");
  write_features(condition_slice(data, 0), dir / "db.safm");
  write_features(condition_slice(data, conditions - 1), dir / "query.safm");
  write_manifest(dir / "manifest.json", "synth", cfg,
                 {{"places", places}, {"conditions", conditions}});
  std::printf("wrote %zu records to %s (db: condition 0, query: condition %d)\n", data.size(),
              out_dir.c_str(), conditions - 1);
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_ckpt) {
  RunConfig cfg = load_run_config(config_path);
  Dataset data = read_features(fs::path(data_dir) / "train.safm");
  Rng rng(cfg.seed);
  EmbeddingModel<float> model(cfg, rng);
  auto result = train_run(data, model, cfg, rng, [](int epoch, const EpochStats& s) {
    std::printf("epoch %d  loss %.6f  active %.3f  (%.2fs)\n", epoch, s.mean_loss,
                s.active_fraction, s.wall_seconds);
  });
  save_checkpoint(out_ckpt, arch_digest(cfg), result.steps, model.parameters());
  write_epoch_csv(out_ckpt + ".csv", result.epochs);
  write_manifest(out_ckpt + ".manifest.json", "train", cfg,
                 {{"data", data_dir}, {"checkpoint", out_ckpt}, {"steps", result.steps}});
  std::printf("saved checkpoint %s after %llu steps\n", out_ckpt.c_str(),
              static_cast<unsigned long long>(result.steps));
  return 0;
}

int cmd_embed(const std::string& ckpt, const std::string& features, const std::string& out,
              const std::string& config_flag) {
  LoadedModel loaded = load_model(ckpt, config_flag);
  Dataset data = read_features(features);
  write_embeddings(embed_dataset(loaded.model, data), out);
  write_manifest(out + ".manifest.json", "embed", loaded.cfg,
                 {{"checkpoint", ckpt}, {"features", features}, {"out", out}});
  std::printf("embedded %zu frames -> %s (dim %d)\n", data.size(), out.c_str(),
              loaded.model.embedding_dim());
  return 0;
}

int cmd_eval(const std::string& db_path, const std::string& query_path, int tolerance,
             const std::string& out_dir, int n_thresholds, const std::string& direction) {
  auto db = read_embeddings(db_path);
  auto queries = read_embeddings(query_path);
  const RatioDirection dir =
      direction == "geq" ? RatioDirection::AcceptGeq : RatioDirection::AcceptLeq;
  Evaluation eval = evaluate(db, queries, tolerance, n_thresholds, dir);
  const fs::path dir_path(out_dir);
  write_pr_csv(dir_path / "pr_curve.csv", eval.curve);
  write_query_csv(dir_path / "queries.csv", eval.results, eval.correct);
  RunConfig cfg;  // formats only; the evaluation itself has no model config
  write_manifest(dir_path / "manifest.json", "eval", cfg,
                 {{"db", db_path},
                  {"query", query_path},
                  {"tolerance", tolerance},
                  {"thresholds", n_thresholds},
                  {"ratio_direction", direction},
                  {"auc", eval.curve.auc}});
  std::printf("AUC %.3f\n", eval.curve.auc);
  return 0;
}

int cmd_attn(const std::string& ckpt, const std::string& features, const std::string& out_dir,
             const std::string& config_flag) {
  LoadedModel loaded = load_model(ckpt, config_flag);
  if (!loaded.cfg.use_attention) {
    throw DataError("checkpoint was trained without the attention stage; nothing to export");
  }
  Dataset data = read_features(features);

  Dataset channel_gates, spatial_factors, spatial_gates;
  for (const FeatureRecord& r : data) {
    Tape<float> tape;
    auto fwd = loaded.model.embed_on_tape(tape, r.appearance, r.semantic);
    const auto& gates = *fwd.gates;

    auto as_map = [&](Var v, bool as_column) {
      Tensor<float> t = tape.value(v);
      if (as_column) t.shape = Shape{static_cast<int>(t.size()), 1, 1};
      return t;
    };
    FeatureRecord gate;
    gate.frame_id = r.frame_id;
    gate.class_id = r.class_id;
    gate.condition_id = r.condition_id;

    FeatureRecord factor = gate;
    FeatureRecord volume = gate;
    gate.appearance = as_map(gates.channel_gate_appearance, true);
    gate.semantic = as_map(gates.channel_gate_semantic ? *gates.channel_gate_semantic
                                                       : gates.channel_gate_appearance,
                           true);
    channel_gates.push_back(std::move(gate));

    factor.appearance = as_map(gates.spatial_factor_appearance, false);
    factor.semantic = as_map(gates.spatial_factor_semantic ? *gates.spatial_factor_semantic
                                                           : gates.spatial_factor_appearance,
                             false);
    spatial_factors.push_back(std::move(factor));

    volume.appearance = as_map(gates.spatial_gate_appearance, false);
    volume.semantic = as_map(gates.spatial_gate_semantic ? *gates.spatial_gate_semantic
                                                         : gates.spatial_gate_appearance,
                             false);
    spatial_gates.push_back(std::move(volume));
  }
  const fs::path dir(out_dir);
  write_features(channel_gates, dir / "channel_gates.safm");
  write_features(spatial_factors, dir / "spatial_factors.safm");
  write_features(spatial_gates, dir / "spatial_gates.safm");
  write_manifest(dir / "manifest.json", "attn", loaded.cfg,
                 {{"checkpoint", ckpt}, {"features", features}});
  std::printf("exported attention maps for %zu frames to %s\n", data.size(), out_dir.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& config_path, std::uint64_t seed) {
  RunConfig cfg = config_from_flag(config_path);
  GradCheckReport report = model_grad_check(cfg, seed, 1e-4);
  std::printf("max relative gradient error: %.3e (parameter %s[%zu], analytic %.6e, numeric %.6e)\n",
              report.max_rel_error, report.worst_parameter.c_str(), report.worst_index,
              report.analytic, report.numeric);
  if (report.max_rel_error >= 1e-4) {
    std::fprintf(stderr, "gradient check FAILED: %.3e >= 1e-4\n", report.max_rel_error);
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"saane: multimodal attentive embeddings for retrieval-based localization"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic feature dataset");
  std::string synth_out, synth_config;
  int synth_places = 64, synth_conditions = 3;
  std::uint64_t synth_seed = 1;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--places", synth_places, "number of places (classes)");
  synth->add_option("--conditions", synth_conditions, "viewing conditions per place");
  synth->add_option("--seed", synth_seed, "generator seed")->required();
  synth->add_option("--config", synth_config, "config JSON for dimensions and synth knobs");

  auto* train = app.add_subcommand("train", "train fusion and attention parameters");
  std::string train_config, train_data, train_out;
  train->add_option("--config", train_config, "config JSON")->required();
  train->add_option("--data", train_data, "dataset directory containing train.safm")->required();
  train->add_option("--out", train_out, "checkpoint output path")->required();

  auto* embed = app.add_subcommand("embed", "embed feature records with a trained model");
  std::string embed_ckpt, embed_features, embed_out, embed_config;
  embed->add_option("--ckpt", embed_ckpt, "checkpoint path")->required();
  embed->add_option("--features", embed_features, "input feature file")->required();
  embed->add_option("--out", embed_out, "output embedding file")->required();
  embed->add_option("--config", embed_config, "config JSON (defaults to the checkpoint manifest)");

  auto* eval = app.add_subcommand("eval", "ratio-test precision-recall evaluation");
  std::string eval_db, eval_query, eval_out, eval_direction = "leq";
  int eval_tolerance = 5, eval_thresholds = 100;
  eval->add_option("--db", eval_db, "database embedding file")->required();
  eval->add_option("--query", eval_query, "query embedding file")->required();
  eval->add_option("--tolerance", eval_tolerance, "frame tolerance for a true positive");
  eval->add_option("--out", eval_out, "output directory")->required();
  eval->add_option("--thresholds", eval_thresholds, "number of swept ratio thresholds");
  eval->add_option("--direction", eval_direction, "accept ratios leq or geq the threshold")
      ->check(CLI::IsMember({"leq", "geq"}));

  auto* attn = app.add_subcommand("attn", "export attention maps per frame");
  std::string attn_ckpt, attn_features, attn_out, attn_config;
  attn->add_option("--ckpt", attn_ckpt, "checkpoint path")->required();
  attn->add_option("--features", attn_features, "input feature file")->required();
  attn->add_option("--out", attn_out, "output directory")->required();
  attn->add_option("--config", attn_config, "config JSON (defaults to the checkpoint manifest)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  std::string gc_config;
  std::uint64_t gc_seed = 1;
  gradcheck->add_option("--config", gc_config, "config JSON")->required();
  gradcheck->add_option("--seed", gc_seed, "seed for the probe batch");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) {
      return cmd_synth(synth_out, synth_places, synth_conditions, synth_seed, synth_config);
    }
    if (train->parsed()) return cmd_train(train_config, train_data, train_out);
    if (embed->parsed()) return cmd_embed(embed_ckpt, embed_features, embed_out, embed_config);
    if (eval->parsed()) {
      return cmd_eval(eval_db, eval_query, eval_tolerance, eval_out, eval_thresholds,
                      eval_direction);
    }
    if (attn->parsed()) return cmd_attn(attn_ckpt, attn_features, attn_out, attn_config);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_config, gc_seed);
  } catch (const CheckError& e) {
    std::fprintf(stderr, "check failure: %s\n", e.what());
    return 3;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
