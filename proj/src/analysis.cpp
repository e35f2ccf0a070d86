#include "masc/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <set>
#include <sstream>
#include <thread>
#include <utility>

#include "masc/container.hpp"
#include "masc/tape.hpp"

namespace masc {

double degeneracy_metric(std::span<const std::size_t> tokens) {
  if (tokens.size() < 2) return 0.0;
  std::set<std::pair<std::size_t, std::size_t>> grams;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    grams.insert({tokens[i], tokens[i + 1]});
  }
  const double total = double(tokens.size() - 1);
  return 1.0 - double(grams.size()) / total;
}

SelectionFrequency selection_frequency(const TraceDataset& dataset,
                                       std::size_t top_k) {
  dataset.validate();
  if (top_k == 0 || top_k > dataset.experts) {
    throw ContractError("selection_frequency: top_k out of range");
  }
  SelectionFrequency out;
  out.layers = dataset.layers;
  out.experts = dataset.experts;
  out.top_k = top_k;
  out.freq = Array::zeros({dataset.layers, dataset.experts});

  for (const RoutingTrace& trace : dataset.traces) {
    const std::size_t t_len = trace.length();
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t l = 0; l < dataset.layers; ++l) {
        Array row(Shape{dataset.experts});
        for (std::size_t e = 0; e < dataset.experts; ++e) {
          row[e] = trace.logits[(t * dataset.layers + l) * dataset.experts + e];
        }
        TopKResult sel =
            top_k_select(row, top_k, SoftmaxMode::kSoftmaxThenTopK);
        for (std::size_t idx : sel.indices) out.freq.at(l, idx) += 1.0;
      }
    }
    out.tokens += t_len;
  }
  if (out.tokens == 0) {
    throw ContractError("selection_frequency: dataset holds no tokens");
  }
  for (std::size_t i = 0; i < out.freq.size(); ++i) {
    out.freq[i] /= double(out.tokens);
  }
  return out;
}

Array frequency_delta(const SelectionFrequency& before,
                      const SelectionFrequency& after) {
  if (before.layers != after.layers || before.experts != after.experts) {
    throw ContractError("frequency_delta: mismatched grids");
  }
  Array delta(Shape{before.layers, before.experts});
  for (std::size_t i = 0; i < delta.size(); ++i) {
    delta[i] = after.freq[i] - before.freq[i];
  }
  return delta;
}

TraceDataset capture_routing(
    const ToyMoEModel& model,
    const std::vector<std::vector<std::size_t>>& prompts,
    const InjectionPayload* payload) {
  TraceDataset out;
  out.layers = model.config.num_layers;
  out.experts = model.config.experts_per_layer;
  for (const auto& prompt : prompts) {
    GateHook hook;
    hook.mode = payload ? GateHook::Mode::kBoth : GateHook::Mode::kCapture;
    if (payload) hook.payload = *payload;
    model.forward(prompt, &hook);
    const auto& rows = payload ? hook.captured_post : hook.captured;
    RoutingTrace trace;
    trace.logits = Array(Shape{rows.size(), out.layers, out.experts});
    for (std::size_t t = 0; t < rows.size(); ++t) {
      for (std::size_t l = 0; l < out.layers; ++l) {
        for (std::size_t e = 0; e < out.experts; ++e) {
          trace.logits[(t * out.layers + l) * out.experts + e] = rows[t][l][e];
        }
      }
    }
    out.traces.push_back(std::move(trace));
  }
  return out;
}

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void write_delta_csv(const Array& delta, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "layer,expert,delta\n";
  for (std::size_t l = 0; l < delta.rows(); ++l) {
    for (std::size_t e = 0; e < delta.cols(); ++e) {
      os << l << ',' << e << ',' << format_double(delta.at(l, e)) << '\n';
    }
  }
  atomic_write_file(path, os.str());
}

EvalResult evaluate_payload(const PlantedFixture& fixture,
                            const InjectionPayload* payload, bool source_flag_b,
                            const EvalConfig& config) {
  if (config.prompts == 0) {
    throw ContractError("evaluate_payload: need at least one prompt");
  }
  const std::size_t target =
      source_flag_b ? fixture.tokens.out_a : fixture.tokens.out_b;
  EvalResult out;
  for (std::size_t i = 0; i < config.prompts; ++i) {
    auto prompt = fixture.behavior_prompt(source_flag_b, config.prompt_length,
                                          config.seed * 100003 + i);
    GateHook hook;
    hook.mode = GateHook::Mode::kInject;
    if (payload) hook.payload = *payload;
    auto tokens =
        fixture.model.forward(prompt, payload ? &hook : nullptr).tokens();
    if (degeneracy_metric(tokens) >= kDegenerateThreshold) {
      out.degenerate += 1.0;
    } else if (tokens.back() == target) {
      out.success += 1.0;
    }

    const bool uflag = (i % 2) == 1;
    auto uprompt = fixture.utility_prompt(uflag, config.prompt_length,
                                          config.seed * 100019 + i);
    GateHook uhook;
    uhook.mode = GateHook::Mode::kInject;
    if (payload) uhook.payload = *payload;
    auto utokens =
        fixture.model.forward(uprompt, payload ? &uhook : nullptr).tokens();
    const std::size_t want = uflag ? fixture.tokens.out_u1 : fixture.tokens.out_u0;
    if (degeneracy_metric(utokens) < kDegenerateThreshold &&
        utokens.back() == want) {
      out.utility += 1.0;
    }
  }
  out.success /= double(config.prompts);
  out.utility /= double(config.prompts);
  out.degenerate /= double(config.prompts);
  return out;
}

std::vector<SweepCell> run_sweep(const PlantedFixture& fixture,
                                 const SurrogateParams& surrogate,
                                 const TraceDataset& flip_set, int y_target,
                                 bool source_flag_b, const SweepConfig& config) {
  if (config.lambdas.empty() || config.alphas.empty() || config.taus.empty()) {
    throw ContractError("run_sweep: empty grid axis");
  }
  const double utility_before =
      evaluate_payload(fixture, nullptr, source_flag_b, config.eval).utility;

  // one optimization per lambda; tau and alpha reuse the same matrix
  std::vector<SteeringMatrix> matrices;
  LayerStats stats = compute_layer_sigma(flip_set);
  for (double lambda : config.lambdas) {
    OptimizeConfig ocfg = config.optimize;
    ocfg.lambda = lambda;
    matrices.push_back(optimize_mask(surrogate, flip_set, y_target, ocfg));
  }

  std::vector<SweepCell> cells(config.lambdas.size() * config.taus.size() *
                               config.alphas.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const std::size_t li = i / (config.taus.size() * config.alphas.size());
      const std::size_t ti = (i / config.alphas.size()) % config.taus.size();
      const std::size_t ai = i % config.alphas.size();
      SweepCell cell;
      cell.lambda = config.lambdas[li];
      cell.tau = config.taus[ti];
      cell.alpha = config.alphas[ai];
      SteeringMask mask =
          prune_mask(matrices[li], cell.tau, cell.lambda, stats);
      cell.nnz = mask.nnz();
      InjectionPayload payload = build_injection_payload(mask, cell.alpha);
      EvalResult eval =
          evaluate_payload(fixture, &payload, source_flag_b, config.eval);
      cell.success = eval.success;
      cell.utility_before = utility_before;
      cell.utility_after = eval.utility;
      cell.degenerate = eval.degenerate;
      cells[i] = cell;
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, config.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return cells;
}

void write_sweep_csv(const std::vector<SweepCell>& cells,
                     const std::filesystem::path& path) {
  std::ostringstream os;
  os << "lambda,alpha,tau,success,utility_before,utility_after,nnz,"
        "degenerate\n";
  for (const SweepCell& c : cells) {
    os << format_double(c.lambda) << ',' << format_double(c.alpha) << ','
       << format_double(c.tau) << ',' << format_double(c.success) << ','
       << format_double(c.utility_before) << ','
       << format_double(c.utility_after) << ',' << c.nnz << ','
       << format_double(c.degenerate) << '\n';
  }
  atomic_write_file(path, os.str());
}

double choose_alpha(const std::vector<SweepCell>& cells, double lambda,
                    double tau) {
  bool found = false;
  double best_alpha = 0.0;
  double best_success = -1.0;
  for (const SweepCell& c : cells) {
    if (c.lambda != lambda || c.tau != tau) continue;
    found = true;
    if (c.success > best_success ||
        (c.success == best_success && c.alpha < best_alpha)) {
      best_success = c.success;
      best_alpha = c.alpha;
    }
  }
  if (!found) throw ContractError("choose_alpha: no cells at that slice");
  return best_alpha;
}

}  // namespace masc
