// Command-line front end for the steering workflow. Every subcommand reads
// an optional JSON config, writes its artifact atomically, and drops a
// manifest next to it.

#include <cstdio>
#include <filesystem>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "masc/adam.hpp"
#include "masc/analysis.hpp"
#include "masc/container.hpp"
#include "masc/moe.hpp"
#include "masc/pipeline.hpp"
#include "masc/steering.hpp"
#include "masc/surrogate.hpp"
#include "masc/tape.hpp"
#include "masc/traces.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitFormat = 3;
constexpr int kExitNumeric = 4;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Options {
  std::string config_path;
  std::string model_path;
  std::string traces_path;
  std::string surrogate_path;
  std::string mask_path;
  std::string out_path;
  std::string report_path;
  double alpha = 1.0;
  double lambda = -1.0;  // negative means "use the config value"
  double tau = -1.0;
  long long seed = -1;
  std::size_t jobs = 1;
};

masc::PipelineConfig resolve_config(const Options& opt) {
  masc::PipelineConfig cfg;
  if (!opt.config_path.empty()) {
    cfg = masc::load_pipeline_config(opt.config_path);
  } else {
    cfg.reseed(cfg.seed);
  }
  if (opt.seed >= 0) cfg.reseed(std::uint64_t(opt.seed));
  if (opt.lambda >= 0.0) {
    cfg.optimize.lambda = opt.lambda;
    cfg.sweep.optimize.lambda = opt.lambda;
  }
  if (opt.tau >= 0.0) cfg.tau = opt.tau;
  cfg.sweep.jobs = opt.jobs;
  cfg.validate();
  return cfg;
}

int cmd_fixture(const Options& opt) {
  masc::PipelineConfig cfg = resolve_config(opt);
  masc::PlantedFixture fixture = masc::make_fixture(cfg);
  masc::save_fixture(fixture, opt.out_path);
  masc::write_manifest(opt.out_path, "fixture",
                       {{"layers", std::to_string(cfg.layers)},
                        {"experts", std::to_string(cfg.experts)},
                        {"top_k", std::to_string(cfg.top_k)},
                        {"seed", std::to_string(cfg.seed)}});
  std::printf("fixture: %zu layers, %zu experts, vocab %zu -> %s\n",
              cfg.layers, cfg.experts, fixture.model.config.vocab_size,
              opt.out_path.c_str());
  return 0;
}

int cmd_collect(const Options& opt) {
  masc::PipelineConfig cfg = resolve_config(opt);
  masc::PlantedFixture fixture = masc::load_fixture(opt.model_path);
  auto prompts = masc::behavior_prompts(fixture, cfg.prompts_per_class,
                                        cfg.prompt_length, cfg.seed);
  masc::CollectResult result = masc::collect_traces(
      fixture.model, prompts, masc::behavior_labeler(fixture));
  masc::save_traces(result.dataset, opt.out_path);
  masc::write_manifest(opt.out_path, "traces",
                       {{"model", opt.model_path},
                        {"prompts_per_class", std::to_string(cfg.prompts_per_class)},
                        {"seed", std::to_string(cfg.seed)},
                        {"skipped", std::to_string(result.skipped)}});
  std::printf("collect: %zu traces (%zu skipped) -> %s\n",
              result.dataset.traces.size(), result.skipped,
              opt.out_path.c_str());
  return 0;
}

int cmd_train_surrogate(const Options& opt) {
  masc::PipelineConfig cfg = resolve_config(opt);
  masc::TraceDataset data = masc::load_traces(opt.traces_path);
  masc::SurrogateTrainResult result = masc::train_surrogate(data, cfg.surrogate);
  result.params.save(opt.out_path);
  masc::write_manifest(opt.out_path, "surrogate",
                       {{"traces", opt.traces_path},
                        {"epochs", std::to_string(cfg.surrogate.epochs)},
                        {"seed", std::to_string(cfg.surrogate.seed)},
                        {"val_accuracy", fmt(result.val_accuracy.back())}});
  std::printf("train-surrogate: val accuracy %.4f -> %s\n",
              result.val_accuracy.back(), opt.out_path.c_str());
  return 0;
}

int cmd_optimize(const Options& opt) {
  masc::PipelineConfig cfg = resolve_config(opt);
  masc::SurrogateParams surrogate =
      masc::SurrogateParams::load(opt.surrogate_path);
  masc::TraceDataset data = masc::load_traces(opt.traces_path);
  masc::TraceDataset flip = masc::flip_subset(data, 0, cfg.flip_set_size);
  masc::SteeringMatrix matrix =
      masc::optimize_mask(surrogate, flip, 1, cfg.optimize);
  masc::LayerStats stats = masc::compute_layer_sigma(flip);
  masc::SteeringMask mask =
      masc::prune_mask(matrix, cfg.tau, cfg.optimize.lambda, stats);
  mask.alpha_recommended = opt.alpha;
  masc::save_mask(mask, opt.out_path);
  masc::write_manifest(opt.out_path, "mask",
                       {{"surrogate", opt.surrogate_path},
                        {"traces", opt.traces_path},
                        {"lambda", fmt(cfg.optimize.lambda)},
                        {"tau", fmt(cfg.tau)},
                        {"seed", std::to_string(cfg.optimize.seed)},
                        {"final_loss", fmt(matrix.loss_history.back())},
                        {"nnz", std::to_string(mask.nnz())}});
  std::printf("optimize: loss %.4f -> %.4f, %zu entries kept -> %s\n",
              matrix.loss_history.front(), matrix.loss_history.back(),
              mask.nnz(), opt.out_path.c_str());
  return 0;
}

int cmd_apply(const Options& opt) {
  masc::PipelineConfig cfg = resolve_config(opt);
  masc::PlantedFixture fixture = masc::load_fixture(opt.model_path);
  masc::SteeringMask mask = masc::load_mask(opt.mask_path);
  masc::InjectionPayload payload =
      masc::build_injection_payload(mask, opt.alpha);
  masc::EvalResult result =
      masc::evaluate_payload(fixture, &payload, false, cfg.eval);

  nlohmann::json report;
  report["alpha"] = opt.alpha;
  report["nnz"] = mask.nnz();
  report["success"] = result.success;
  report["utility"] = result.utility;
  report["degenerate"] = result.degenerate;
  masc::atomic_write_file(opt.report_path, report.dump(2) + "\n");
  masc::write_manifest(opt.report_path, "report",
                       {{"model", opt.model_path},
                        {"mask", opt.mask_path},
                        {"alpha", fmt(opt.alpha)},
                        {"seed", std::to_string(cfg.eval.seed)}});
  std::printf("apply: alpha %.3g success %.3f utility %.3f degenerate %.3f\n",
              opt.alpha, result.success, result.utility, result.degenerate);
  return 0;
}

int cmd_sweep(const Options& opt) {
  masc::PipelineConfig cfg = resolve_config(opt);
  masc::PlantedFixture fixture = masc::load_fixture(opt.model_path);
  masc::SurrogateParams surrogate =
      masc::SurrogateParams::load(opt.surrogate_path);
  masc::TraceDataset data = masc::load_traces(opt.traces_path);
  masc::TraceDataset flip = masc::flip_subset(data, 0, cfg.flip_set_size);
  std::vector<masc::SweepCell> cells =
      masc::run_sweep(fixture, surrogate, flip, 1, false, cfg.sweep);
  masc::write_sweep_csv(cells, opt.out_path);
  masc::write_manifest(opt.out_path, "sweep",
                       {{"model", opt.model_path},
                        {"surrogate", opt.surrogate_path},
                        {"traces", opt.traces_path},
                        {"cells", std::to_string(cells.size())},
                        {"seed", std::to_string(cfg.seed)}});
  double alpha = masc::choose_alpha(cells, cfg.optimize.lambda, cfg.tau);
  std::printf("sweep: %zu cells, tuned alpha %.3g at lambda %.3g tau %.3g -> %s\n",
              cells.size(), alpha, cfg.optimize.lambda, cfg.tau,
              opt.out_path.c_str());
  return 0;
}

int cmd_analyze(const Options& opt) {
  masc::PipelineConfig cfg = resolve_config(opt);
  masc::PlantedFixture fixture = masc::load_fixture(opt.model_path);
  masc::SteeringMask mask = masc::load_mask(opt.mask_path);
  masc::InjectionPayload payload =
      masc::build_injection_payload(mask, opt.alpha);
  auto prompts = masc::behavior_prompts(fixture, cfg.eval.prompts,
                                        cfg.eval.prompt_length, cfg.eval.seed);
  masc::TraceDataset before =
      masc::capture_routing(fixture.model, prompts, nullptr);
  masc::TraceDataset after =
      masc::capture_routing(fixture.model, prompts, &payload);
  masc::SelectionFrequency fb =
      masc::selection_frequency(before, fixture.model.config.top_k);
  masc::SelectionFrequency fa =
      masc::selection_frequency(after, fixture.model.config.top_k);
  masc::write_delta_csv(masc::frequency_delta(fb, fa), opt.out_path);
  masc::write_manifest(opt.out_path, "frequency_delta",
                       {{"model", opt.model_path},
                        {"mask", opt.mask_path},
                        {"alpha", fmt(opt.alpha)},
                        {"seed", std::to_string(cfg.eval.seed)}});
  std::printf("analyze: selection deltas over %zu prompts -> %s\n",
              prompts.size(), opt.out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"surrogate-guided routing analysis and steering"};
  app.require_subcommand(1);
  app.fallthrough();  // --config/--seed may follow the subcommand
  Options opt;
  app.add_option("--config", opt.config_path, "JSON config file");
  app.add_option("--seed", opt.seed, "master seed override");

  auto* fixture = app.add_subcommand("fixture", "build a planted toy model");
  fixture->add_option("--out", opt.out_path)->required();

  auto* collect = app.add_subcommand("collect", "record routing traces");
  collect->add_option("--model", opt.model_path)->required();
  collect->add_option("--out", opt.out_path)->required();

  auto* train = app.add_subcommand("train-surrogate",
                                   "fit the routing classifier");
  train->add_option("--traces", opt.traces_path)->required();
  train->add_option("--out", opt.out_path)->required();

  auto* optimize = app.add_subcommand("optimize", "learn and prune a mask");
  optimize->add_option("--surrogate", opt.surrogate_path)->required();
  optimize->add_option("--traces", opt.traces_path)->required();
  optimize->add_option("--out", opt.out_path)->required();
  optimize->add_option("--lambda", opt.lambda, "l1 weight");
  optimize->add_option("--tau", opt.tau, "prune threshold");
  optimize->add_option("--alpha", opt.alpha, "recommended scale to record");

  auto* apply = app.add_subcommand("apply", "evaluate a mask on the model");
  apply->add_option("--model", opt.model_path)->required();
  apply->add_option("--mask", opt.mask_path)->required();
  apply->add_option("--report", opt.report_path)->required();
  apply->add_option("--alpha", opt.alpha, "injection scale");

  auto* sweep = app.add_subcommand("sweep", "grid over lambda, alpha, tau");
  sweep->add_option("--model", opt.model_path)->required();
  sweep->add_option("--surrogate", opt.surrogate_path)->required();
  sweep->add_option("--traces", opt.traces_path)->required();
  sweep->add_option("--out", opt.out_path)->required();
  sweep->add_option("--jobs", opt.jobs, "worker threads");

  auto* analyze = app.add_subcommand("analyze",
                                     "selection frequency shift under a mask");
  analyze->add_option("--model", opt.model_path)->required();
  analyze->add_option("--mask", opt.mask_path)->required();
  analyze->add_option("--out", opt.out_path)->required();
  analyze->add_option("--alpha", opt.alpha, "injection scale");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fixture->parsed()) return cmd_fixture(opt);
    if (collect->parsed()) return cmd_collect(opt);
    if (train->parsed()) return cmd_train_surrogate(opt);
    if (optimize->parsed()) return cmd_optimize(opt);
    if (apply->parsed()) return cmd_apply(opt);
    if (sweep->parsed()) return cmd_sweep(opt);
    if (analyze->parsed()) return cmd_analyze(opt);
  } catch (const masc::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const masc::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitFormat;
  } catch (const masc::TrainingError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const masc::OptimizerError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
