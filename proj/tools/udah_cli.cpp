// Command-line entry point: data generation, training, evaluation, ablation
// and the verification commands.

#include <CLI11.hpp>
#include <spdlog/fmt/fmt.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include "udah/ablation.hpp"
#include "udah/errors.hpp"
#include "udah/eval.hpp"
#include "udah/grad_suite.hpp"
#include "udah/graph.hpp"
#include "udah/model.hpp"
#include "udah/sampling.hpp"
#include "udah/theory.hpp"
#include "udah/trainer.hpp"

namespace fs = std::filesystem;
using namespace udah;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Machine output goes to --out when given, stdout otherwise.
void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text << std::flush;
    return;
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw DataError("cannot write " + out_path);
  out << text;
}

void echo(const std::string& command, const std::string& resolved) {
  std::cerr << "# " << command << " resolved configuration\n";
  std::size_t start = 0;
  while (start < resolved.size()) {
    const std::size_t end = resolved.find('\n', start);
    std::cerr << "#   " << resolved.substr(start, end - start) << '\n';
    if (end == std::string::npos) break;
    start = end + 1;
  }
}

// Every subcommand that trains or evaluates sees the target through the same
// holdout, so eval can rebuild exactly what train hid.
constexpr TaskSet kAllTasks{true, true, true};

struct TrainFlags {
  std::string source, target, config, out = "model.ckpt", report, checkpoint_dir, ablation;
  std::optional<std::size_t> epochs, batch_size, code_length;
  std::optional<double> lr, momentum;
  std::optional<std::uint64_t> seed;
  std::uint64_t holdout_seed = 42;
  bool no_holdout = false;
};

void add_config_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--config", f.config, "key=value config file; flags override it")->check(CLI::ExistingFile);
  cmd->add_option("--epochs", f.epochs, "Training epochs");
  cmd->add_option("--lr", f.lr, "SGD learning rate");
  cmd->add_option("--momentum", f.momentum, "Heavy-ball momentum (0 is plain SGD)");
  cmd->add_option("--batch-size", f.batch_size, "Minibatch size per domain");
  cmd->add_option("--code-length", f.code_length, "Hash code length");
  cmd->add_option("--seed", f.seed, "Training seed (default 42)");
}

TrainConfig resolve_config(const TrainFlags& f) {
  TrainConfig cfg = f.config.empty() ? TrainConfig{} : load_config(f.config);
  if (f.epochs) cfg.epochs = *f.epochs;
  if (f.lr) cfg.lr = *f.lr;
  if (f.momentum) cfg.momentum = *f.momentum;
  if (f.batch_size) cfg.batch_size = *f.batch_size;
  if (f.code_length) cfg.code_length = *f.code_length;
  if (f.seed) cfg.seed = *f.seed;
  if (!f.ablation.empty()) cfg.ablation = parse_ablation(f.ablation);
  if (!f.checkpoint_dir.empty()) cfg.checkpoint_dir = f.checkpoint_dir;
  return cfg;
}

// Source with labels; target without, so training cannot reach them.
DomainPair load_training_pair(const TrainFlags& f) {
  Graph source = load_graph_prefix(f.source);
  if (!source.has_labels()) throw DataError(f.source + ": training needs source labels");
  Graph target = load_graph_prefix(f.target).unlabeled();
  if (!f.no_holdout) target = make_target_holdout(target, kAllTasks, f.holdout_seed).train;
  return {std::move(source), std::move(target)};
}

int run_gen_data(const SyntheticSpec& spec, const std::string& out) {
  echo("gen-data", "classes=" + std::to_string(spec.num_classes) + "\nper_class=" + std::to_string(spec.nodes_per_class) +
                       "\ndim=" + std::to_string(spec.attr_dim) + "\nshift=" + fmt::format("{}", spec.attr_shift) +
                       "\np_in=" + fmt::format("{}", spec.edge_prob_in) + "\np_out=" + fmt::format("{}", spec.edge_prob_out) +
                       "\nnoise=" + fmt::format("{}", spec.attr_noise) + "\nseed=" + std::to_string(spec.seed) + "\n");
  const DomainPair pair = gen_synthetic_pair(spec);
  fs::create_directories(out);
  write_graph_prefix(pair.source, fs::path(out) / "source");
  write_graph_prefix(pair.target, fs::path(out) / "target");
  std::cout << "wrote " << (fs::path(out) / "source") << ".{edges,attrs,labels} and " << (fs::path(out) / "target")
            << ".{edges,attrs,labels}\n";
  return kOk;
}

int run_train(const TrainFlags& f) {
  const TrainConfig cfg = resolve_config(f);
  echo("train", cfg.to_string() + "holdout=" + (f.no_holdout ? "off" : "link,rec") +
                    "\nholdout_seed=" + std::to_string(f.holdout_seed) + "\n");
  const DomainPair pair = load_training_pair(f);
  const TrainResult result = train(pair, cfg);
  save_checkpoint(result.params, f.out);
  if (!f.report.empty()) result.report.write_csv(f.report);
  std::cout << "checkpoint " << f.out << '\n';
  return kOk;
}

struct EvalFlags {
  std::string checkpoint, target, tasks = "cls,link,rec", out;
  std::uint64_t holdout_seed = 42, split_seed = 42;
  bool table = false, timing = false;
};

int run_eval(const EvalFlags& f) {
  echo("eval", "checkpoint=" + f.checkpoint + "\ntarget=" + f.target + "\ntasks=" + f.tasks + "\nholdout_seed=" +
                   std::to_string(f.holdout_seed) + "\nsplit_seed=" + std::to_string(f.split_seed) + "\n");
  const TaskSet tasks = parse_tasks(f.tasks);
  const ModelParams params = load_checkpoint(f.checkpoint);
  const Graph target = load_graph_prefix(f.target);
  const TargetHoldout holdout = make_target_holdout(target, kAllTasks, f.holdout_seed);
  const EvalReport report = evaluate_codes(emit_codes(params, target), target, holdout, tasks, f.split_seed);
  std::cerr << report.to_table();
  emit(f.table ? report.to_table() : report.to_json(f.timing), f.out);
  return kOk;
}

int run_ablate(TrainFlags& f, const std::string& tasks, std::uint64_t split_seed, const std::string& out, bool table) {
  const TrainConfig cfg = resolve_config(f);
  echo("ablate", cfg.to_string() + "tasks=" + tasks + "\nholdout_seed=" + std::to_string(f.holdout_seed) +
                     "\nsplit_seed=" + std::to_string(split_seed) + "\n");
  const Graph source = load_graph_prefix(f.source);
  const Graph target = load_graph_prefix(f.target);
  AblationOptions opts;
  opts.tasks = parse_tasks(tasks);
  opts.holdout_seed = f.holdout_seed;
  opts.split_seed = split_seed;
  const AblationTable result = run_ablation_suite({source, target}, cfg, opts);
  emit(table ? result.to_table() : result.to_json(), out);
  return kOk;
}

int run_grad_check(double tol, std::uint64_t seed) {
  echo("grad-check", "tol=" + fmt::format("{}", tol) + "\nseed=" + std::to_string(seed) + "\n");
  ad::GradCheckOptions opts;
  opts.tol = tol;
  bool all = true;
  for (const GradSuiteEntry& e : run_grad_suite(seed, opts)) {
    std::printf("%-20s max_rel_error %.3e  %s\n", e.term.c_str(), e.report.max_rel_error,
                e.report.passed ? "PASS" : "FAIL");
    all = all && e.report.passed;
  }
  std::printf("%s\n", all ? "PASS" : "FAIL");
  return all ? kOk : kNumerical;
}

struct BoundFlags {
  std::string checkpoint, source, target, out, mode = "down";
  std::uint64_t seed = 42;
};

int run_check_bound(const BoundFlags& f) {
  echo("check-bound", "checkpoint=" + f.checkpoint + "\nsource=" + f.source + "\ntarget=" + f.target +
                          "\nmode=" + f.mode + "\nseed=" + std::to_string(f.seed) + "\n");
  if (f.mode != "down" && f.mode != "up") throw ConfigError("--mode must be down or up");
  const ModelParams params = load_checkpoint(f.checkpoint);
  const DomainPair pair{load_graph_prefix(f.source), load_graph_prefix(f.target)};
  const CodeFn codes = [&](const Graph& g) { return emit_codes(params, g); };
  const AlignedInstance inst =
      make_aligned(pair, codes, f.seed, f.mode == "down" ? ResampleMode::Down : ResampleMode::Up);
  const BoundReport report = check_bound(inst, pair, codes);
  emit(report.to_json(), f.out);
  return report.holds ? kOk : kNumerical;
}

int run_export(const std::string& checkpoint, const std::string& graph, const std::string& out) {
  echo("export-embeddings", "checkpoint=" + checkpoint + "\ngraph=" + graph + "\nout=" + out + "\n");
  const ModelParams params = load_checkpoint(checkpoint);
  export_embeddings(params, load_graph_prefix(graph), out);
  std::cout << "wrote " << out << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_st("udah"));
  CLI::App app{"Domain-adaptive hashing for attributed networks"};
  app.require_subcommand(1, 1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  SyntheticSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic source/target pair");
  gen->add_option("--classes", spec.num_classes, "Number of classes");
  gen->add_option("--per-class", spec.nodes_per_class, "Nodes per class in each domain");
  gen->add_option("--dim", spec.attr_dim, "Attribute dimension");
  gen->add_option("--shift", spec.attr_shift, "Norm of the per-class target mean shift");
  gen->add_option("--p-in", spec.edge_prob_in, "Edge probability within a class");
  gen->add_option("--p-out", spec.edge_prob_out, "Edge probability across classes");
  gen->add_option("--noise", spec.attr_noise, "Per-node attribute noise std");
  gen->add_option("--mean-scale", spec.mean_scale, "Std of class-mean coordinates");
  gen->add_option("--seed", spec.seed, "Generator seed (default 42)");
  gen->add_option("--out", gen_out, "Output directory")->required();

  TrainFlags tf;
  auto* tr = app.add_subcommand("train", "Train on a labeled source and an unlabeled target");
  tr->add_option("--source", tf.source, "Source graph prefix")->required();
  tr->add_option("--target", tf.target, "Target graph prefix")->required();
  add_config_flags(tr, tf);
  tr->add_option("--ablation", tf.ablation, "Comma-separated switches: no_L1_group,no_L2_gumbel,no_L3,no_L4,no_Lkl,NoDAH");
  tr->add_option("--out", tf.out, "Checkpoint path");
  tr->add_option("--report", tf.report, "Per-epoch CSV report path");
  tr->add_option("--checkpoint-dir", tf.checkpoint_dir, "Directory for periodic checkpoints");
  tr->add_option("--holdout-seed", tf.holdout_seed, "Seed of the target edges hidden for link/rec evaluation");
  tr->add_flag("--no-holdout", tf.no_holdout, "Train on every target edge");

  EvalFlags ef;
  auto* ev = app.add_subcommand("eval", "Evaluate target codes of a checkpoint");
  ev->add_option("--checkpoint", ef.checkpoint, "Checkpoint path")->required()->check(CLI::ExistingFile);
  ev->add_option("--target", ef.target, "Labeled target graph prefix")->required();
  ev->add_option("--tasks", ef.tasks, "Subset of cls,link,rec");
  ev->add_option("--holdout-seed", ef.holdout_seed, "Must match the train run");
  ev->add_option("--split-seed", ef.split_seed, "Classification train/test split seed");
  ev->add_option("--out", ef.out, "Write the report here instead of stdout");
  ev->add_flag("--table", ef.table, "Aligned text table instead of JSON");
  ev->add_flag("--timing", ef.timing, "Include wall-clock seconds in the JSON");

  TrainFlags af;
  std::string ablate_tasks = "cls,link,rec", ablate_out;
  std::uint64_t ablate_split = 42;
  bool ablate_table = false;
  auto* ab = app.add_subcommand("ablate", "Train and evaluate every ablation variant");
  ab->add_option("--source", af.source, "Source graph prefix")->required();
  ab->add_option("--target", af.target, "Labeled target graph prefix")->required();
  add_config_flags(ab, af);
  ab->add_option("--tasks", ablate_tasks, "Subset of cls,link,rec");
  ab->add_option("--holdout-seed", af.holdout_seed, "Seed of the hidden target edges");
  ab->add_option("--split-seed", ablate_split, "Classification train/test split seed");
  ab->add_option("--out", ablate_out, "Write the table here instead of stdout");
  ab->add_flag("--table", ablate_table, "Aligned text table instead of JSON");

  double gc_tol = 1e-4;
  std::uint64_t gc_seed = 42;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every objective term");
  gc->add_option("--tol", gc_tol, "Relative error tolerance");
  gc->add_option("--seed", gc_seed, "Toy instance seed (default 42)");

  BoundFlags bf;
  auto* cb = app.add_subcommand("check-bound", "Check the Hamming transfer bound on a labeled pair");
  cb->add_option("--checkpoint", bf.checkpoint, "Checkpoint path")->required()->check(CLI::ExistingFile);
  cb->add_option("--source", bf.source, "Labeled source graph prefix")->required();
  cb->add_option("--target", bf.target, "Labeled target graph prefix")->required();
  cb->add_option("--mode", bf.mode, "Class balancing: down or up");
  cb->add_option("--seed", bf.seed, "Pairing seed (default 42)");
  cb->add_option("--out", bf.out, "Write the JSON here instead of stdout");

  std::string ex_ckpt, ex_graph, ex_out;
  auto* ex = app.add_subcommand("export-embeddings", "Write node embeddings as TSV");
  ex->add_option("--checkpoint", ex_ckpt, "Checkpoint path")->required()->check(CLI::ExistingFile);
  ex->add_option("--graph", ex_graph, "Graph prefix")->required();
  ex->add_option("--out", ex_out, "TSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    spdlog::set_level(spdlog::level::from_str(log_level));
    if (*gen) return run_gen_data(spec, gen_out);
    if (*tr) return run_train(tf);
    if (*ev) return run_eval(ef);
    if (*ab) return run_ablate(af, ablate_tasks, ablate_split, ablate_out, ablate_table);
    if (*gc) return run_grad_check(gc_tol, gc_seed);
    if (*cb) return run_check_bound(bf);
    if (*ex) return run_export(ex_ckpt, ex_graph, ex_out);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const NumericalError& e) {
    spdlog::error("numerical abort: {}", e.what());
    return kNumerical;
  } catch (const DataError& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const ShapeError& e) {
    spdlog::error("{}", e.what());
    return kData;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kData;
  }
  return kUsage;
}
