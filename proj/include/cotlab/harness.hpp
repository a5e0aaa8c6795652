#pragma once

// Experiment runners: configuration loading, seeded per-trial streams,
// deterministic parallel execution, and CSV/JSON emission for the decay,
// voting, search, selection-inference, attention, and keep-set studies.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "cotlab/attention_bma.hpp"
#include "cotlab/common.hpp"
#include "cotlab/divergences.hpp"
#include "cotlab/inference.hpp"
#include "cotlab/latent_model.hpp"
#include "cotlab/oracle.hpp"
#include "cotlab/rng.hpp"
#include "cotlab/strategies.hpp"

namespace cotlab {

struct AttnParams {
  int alphabet_size = 4;
  int horizon = 2;
  int d_k = 4;
  int d_v = 4;
  double sigma2 = 0.25;
  double key_scale = 2.0;
  int relu_dim = 0;                      // 0 = identity features
  std::string theta_structure = "dense";  // dense | last_block
};

struct KeepPair {
  std::vector<int> keep_coarse;
  std::vector<int> keep_fine;
};

struct ExperimentConfig {
  std::string kind;  // decay | sc | tot | si | attn | dominance
  std::string family_path;
  TaskId theta_star = 0;
  std::vector<int> n_grid;
  std::vector<int> k_grid;
  int trials = 1;
  std::uint64_t seed = 0;
  std::string output_path;
  AttnParams attn;
  std::vector<KeepPair> pairs;  // dominance only
};

namespace detail {

inline void require_known_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                               const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ValidationError("config: unknown key \"" + where + it.key() + "\"");
    }
  }
}

inline std::vector<int> int_grid(const nlohmann::json& j, const std::string& field, int min_value) {
  if (!j.is_array() || j.empty()) throw ValidationError("config: " + field + " must be a nonempty array");
  std::vector<int> grid;
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw ValidationError("config: " + field + " entries must be integers");
    int x = v.get<int>();
    if (x < min_value) throw ValidationError("config: " + field + " entries must be >= " + std::to_string(min_value));
    if (!grid.empty() && x <= grid.back()) throw ValidationError("config: " + field + " must be strictly increasing");
    grid.push_back(x);
  }
  return grid;
}

inline std::vector<int> keep_set(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array()) throw ValidationError("config: " + field + " must be an array");
  std::vector<int> keep;
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw ValidationError("config: " + field + " entries must be integers");
    keep.push_back(v.get<int>());
  }
  std::sort(keep.begin(), keep.end());
  if (std::adjacent_find(keep.begin(), keep.end()) != keep.end()) {
    throw ValidationError("config: " + field + " has duplicate entries");
  }
  return keep;
}

}  // namespace detail

inline const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> kinds = {"decay", "sc", "tot", "si", "attn", "dominance"};
  return kinds;
}

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config: top level must be an object");
  detail::require_known_keys(j,
                             {"kind", "family_path", "theta_star", "n_grid", "K_grid", "trials",
                              "seed", "output_path", "attn", "pairs"},
                             "");
  ExperimentConfig cfg;
  if (!j.contains("kind")) throw ValidationError("config: missing key \"kind\"");
  if (!j.at("kind").is_string()) throw ValidationError("config: kind must be a string");
  cfg.kind = j.at("kind").get<std::string>();
  const auto& kinds = experiment_kinds();
  if (std::find(kinds.begin(), kinds.end(), cfg.kind) == kinds.end()) {
    throw ValidationError("config: kind \"" + cfg.kind + "\" is not a known experiment");
  }
  if (j.contains("family_path")) {
    if (!j.at("family_path").is_string()) throw ValidationError("config: family_path must be a string");
    cfg.family_path = j.at("family_path").get<std::string>();
  }
  if (j.contains("theta_star")) {
    if (!j.at("theta_star").is_number_integer()) throw ValidationError("config: theta_star must be an integer");
    cfg.theta_star = j.at("theta_star").get<TaskId>();
    if (cfg.theta_star < 0) throw ValidationError("config: theta_star must be >= 0");
  }
  if (j.contains("n_grid")) cfg.n_grid = detail::int_grid(j.at("n_grid"), "n_grid", 0);
  if (j.contains("K_grid")) cfg.k_grid = detail::int_grid(j.at("K_grid"), "K_grid", 1);
  if (j.contains("trials")) {
    if (!j.at("trials").is_number_integer()) throw ValidationError("config: trials must be an integer");
    cfg.trials = j.at("trials").get<int>();
    if (cfg.trials < 1) throw ValidationError("config: trials must be >= 1");
  }
  if (j.contains("seed")) {
    if (!j.at("seed").is_number()) throw ValidationError("config: seed must be a number");
    cfg.seed = j.at("seed").get<std::uint64_t>();
  }
  if (j.contains("output_path")) {
    if (!j.at("output_path").is_string()) throw ValidationError("config: output_path must be a string");
    cfg.output_path = j.at("output_path").get<std::string>();
  }
  if (cfg.output_path.empty()) cfg.output_path = cfg.kind + ".csv";
  if (j.contains("attn")) {
    const auto& a = j.at("attn");
    if (!a.is_object()) throw ValidationError("config: attn must be an object");
    detail::require_known_keys(
        a, {"alphabet_size", "horizon", "d_k", "d_v", "sigma2", "key_scale", "relu_dim",
            "theta_structure"},
        "attn.");
    auto get_int = [&](const char* key, int fallback, int min_value) {
      if (!a.contains(key)) return fallback;
      if (!a.at(key).is_number_integer()) throw ValidationError(std::string("config: attn.") + key + " must be an integer");
      int x = a.at(key).get<int>();
      if (x < min_value) throw ValidationError(std::string("config: attn.") + key + " out of range");
      return x;
    };
    cfg.attn.alphabet_size = get_int("alphabet_size", cfg.attn.alphabet_size, 2);
    cfg.attn.horizon = get_int("horizon", cfg.attn.horizon, 1);
    cfg.attn.d_k = get_int("d_k", cfg.attn.d_k, 1);
    cfg.attn.d_v = get_int("d_v", cfg.attn.d_v, 1);
    cfg.attn.relu_dim = get_int("relu_dim", cfg.attn.relu_dim, 0);
    if (a.contains("sigma2")) {
      if (!a.at("sigma2").is_number()) throw ValidationError("config: attn.sigma2 must be a number");
      cfg.attn.sigma2 = a.at("sigma2").get<double>();
      if (cfg.attn.sigma2 < 0.0) throw ValidationError("config: attn.sigma2 must be >= 0");
    }
    if (a.contains("key_scale")) {
      if (!a.at("key_scale").is_number()) throw ValidationError("config: attn.key_scale must be a number");
      cfg.attn.key_scale = a.at("key_scale").get<double>();
      if (cfg.attn.key_scale <= 0.0) throw ValidationError("config: attn.key_scale must be > 0");
    }
    if (a.contains("theta_structure")) {
      if (!a.at("theta_structure").is_string()) {
        throw ValidationError("config: attn.theta_structure must be a string");
      }
      cfg.attn.theta_structure = a.at("theta_structure").get<std::string>();
      if (cfg.attn.theta_structure != "dense" && cfg.attn.theta_structure != "last_block") {
        throw ValidationError("config: attn.theta_structure must be \"dense\" or \"last_block\"");
      }
    }
  }
  if (j.contains("pairs")) {
    const auto& p = j.at("pairs");
    if (!p.is_array() || p.empty()) throw ValidationError("config: pairs must be a nonempty array");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto& entry = p[i];
      std::string where = "pairs[" + std::to_string(i) + "].";
      if (!entry.is_object()) throw ValidationError("config: " + where + " must be an object");
      detail::require_known_keys(entry, {"J", "Jprime"}, where);
      if (!entry.contains("J") || !entry.contains("Jprime")) {
        throw ValidationError("config: " + where + " needs J and Jprime");
      }
      KeepPair pair;
      pair.keep_coarse = detail::keep_set(entry.at("J"), where + "J");
      pair.keep_fine = detail::keep_set(entry.at("Jprime"), where + "Jprime");
      cfg.pairs.push_back(std::move(pair));
    }
  }
  // Per-kind requirements.
  bool needs_family = cfg.kind != "attn";
  if (needs_family && cfg.family_path.empty()) {
    throw ValidationError("config: family_path required for kind \"" + cfg.kind + "\"");
  }
  if (cfg.kind == "decay" || cfg.kind == "si" || cfg.kind == "attn") {
    if (cfg.n_grid.empty()) throw ValidationError("config: n_grid required for kind \"" + cfg.kind + "\"");
    if (cfg.n_grid.front() < 1) throw ValidationError("config: n_grid entries must be >= 1 for kind \"" + cfg.kind + "\"");
  }
  if (cfg.kind == "sc" || cfg.kind == "tot") {
    if (cfg.k_grid.empty()) throw ValidationError("config: K_grid required for kind \"" + cfg.kind + "\"");
    if (cfg.n_grid.size() != 1) {
      throw ValidationError("config: kind \"" + cfg.kind + "\" needs n_grid with exactly one entry (demo count)");
    }
  }
  if (cfg.kind == "dominance") {
    if (cfg.pairs.empty()) throw ValidationError("config: pairs required for kind \"dominance\"");
    if (cfg.n_grid.empty()) throw ValidationError("config: n_grid required for kind \"dominance\"");
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config: malformed JSON in " + path + ": " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// CSV emission (RFC 4180: CRLF line breaks, quoting only where needed)
// ---------------------------------------------------------------------------

inline std::string csv_escape(const std::string& field) {
  bool needs_quote = field.find_first_of(",\"\r\n") != std::string::npos;
  if (!needs_quote) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

inline std::string csv_text(const std::vector<std::string>& header,
                            const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out += ',';
    out += csv_escape(header[i]);
  }
  out += "\r\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += csv_escape(row[i]);
    }
    out += "\r\n";
  }
  return out;
}

inline void write_csv(const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot open output file: " + path);
  out << csv_text(header, rows);
  if (!out) throw UsageError("failed writing output file: " + path);
}

// ---------------------------------------------------------------------------
// Deterministic parallel map: slot i is written only by the worker that
// drew index i, so the merged result is independent of thread count.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  int workers = std::min(threads, count);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline std::string format_keep_set(const std::vector<int>& keep) {
  std::string out = "{";
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (i) out += ';';
    out += std::to_string(keep[i]);
  }
  out += "}";
  return out;
}

}  // namespace detail

struct ExperimentResult {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> summary_header;               // decay/si only
  std::vector<std::vector<std::string>> summary_rows;    // decay/si only
  nlohmann::json metadata;
};

namespace detail {

struct KlSummary {
  std::vector<double> medians;
  std::vector<double> p90s;
};

inline KlSummary summarize_kl(const std::vector<int>& n_grid,
                              const std::vector<std::vector<double>>& kls, ExperimentResult& result) {
  KlSummary sum;
  result.summary_header = {"n", "median_kl", "p90_kl"};
  for (std::size_t gi = 0; gi < n_grid.size(); ++gi) {
    std::vector<double> sorted = kls[gi];
    std::sort(sorted.begin(), sorted.end());
    double med = median_of_sorted(sorted);
    double p90 = quantile_of_sorted(sorted, 0.9);
    sum.medians.push_back(med);
    sum.p90s.push_back(p90);
    result.summary_rows.push_back(
        {std::to_string(n_grid[gi]), format_double(med), format_double(p90)});
  }
  return sum;
}

// Least-squares slope of log(median) against n; null when a median is not
// strictly positive (log undefined -- e.g. an exactly solvable family).
inline nlohmann::json log_slope_vs(const std::vector<int>& xs, const std::vector<double>& medians,
                                   bool log_x) {
  if (xs.size() < 2) return nullptr;
  std::vector<double> x, y;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(medians[i] > 0.0)) return nullptr;
    x.push_back(log_x ? std::log(static_cast<double>(xs[i])) : static_cast<double>(xs[i]));
    y.push_back(std::log(medians[i]));
  }
  return ls_slope(x, y);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-kind runners
// ---------------------------------------------------------------------------

inline void run_decay(const ExperimentConfig& cfg, const TaskFamily& family, int threads,
                      ExperimentResult& result) {
  if (cfg.theta_star >= family.num_tasks()) throw ValidationError("config: theta_star out of range for family");
  result.header = {"n", "trial", "kl"};
  auto keep = full_keep_indices(family.horizon);
  std::uint64_t kind_hash = hash_label("decay");
  std::vector<std::vector<double>> kls(cfg.n_grid.size());
  for (std::size_t gi = 0; gi < cfg.n_grid.size(); ++gi) {
    int n = cfg.n_grid[gi];
    kls[gi].assign(static_cast<std::size_t>(cfg.trials), 0.0);
    detail::parallel_for(cfg.trials, threads, [&, gi, n](int trial) {
      RngStream rng(cfg.seed, derive_stream_id(kind_hash, static_cast<std::uint64_t>(n),
                                               static_cast<std::uint64_t>(trial)));
      Prompt prompt = sample_prompt(family, cfg.theta_star, n, keep, rng);
      kls[gi][static_cast<std::size_t>(trial)] = prompting_error(family, cfg.theta_star, prompt);
    });
    for (int trial = 0; trial < cfg.trials; ++trial) {
      result.rows.push_back({std::to_string(n), std::to_string(trial),
                             format_double(kls[gi][static_cast<std::size_t>(trial)])});
    }
  }
  auto sum = detail::summarize_kl(cfg.n_grid, kls, result);
  SeparationReport rep = separation_report(family, cfg.theta_star);
  result.metadata["kind"] = "decay";
  result.metadata["seed"] = cfg.seed;
  result.metadata["trials"] = cfg.trials;
  result.metadata["median_kl"] = sum.medians;
  result.metadata["p90_kl"] = sum.p90s;
  result.metadata["slope_log_median_vs_n"] = detail::log_slope_vs(cfg.n_grid, sum.medians, false);
  result.metadata["minus_two_lambda"] =
      rep.lambda == kPosInf ? nlohmann::json("inf") : nlohmann::json(-2.0 * rep.lambda);
}

inline void run_sc(const ExperimentConfig& cfg, const TaskFamily& family, int threads,
                   ExperimentResult& result) {
  if (cfg.theta_star >= family.num_tasks()) throw ValidationError("config: theta_star out of range for family");
  result.header = {"K", "trials", "fail_rate", "bound"};
  int n = cfg.n_grid.front();
  auto keep = full_keep_indices(family.horizon);
  SeparationReport rep = separation_report(family, cfg.theta_star);
  double eps = rep.mode_gap;
  const TaskModel& star = family.tasks[static_cast<std::size_t>(cfg.theta_star)];
  std::uint64_t kind_hash = hash_label("sc");
  std::vector<double> fail_rates;
  for (int K : cfg.k_grid) {
    std::vector<char> fails(static_cast<std::size_t>(cfg.trials), 0);
    detail::parallel_for(cfg.trials, threads, [&](int trial) {
      RngStream rng(cfg.seed, derive_stream_id(kind_hash, static_cast<std::uint64_t>(K),
                                               static_cast<std::uint64_t>(trial)));
      Prompt prompt = sample_prompt(family, cfg.theta_star, n, keep, rng);
      ScResult sc = sc_cot(family, prompt, K, rng);
      StepSymbol truth_mode = mode_gap(answer_marginal(star, prompt.query)).first;
      fails[static_cast<std::size_t>(trial)] = sc.winner != truth_mode ? 1 : 0;
    });
    int fail_count = 0;
    for (char f : fails) fail_count += f;
    double rate = static_cast<double>(fail_count) / cfg.trials;
    fail_rates.push_back(rate);
    result.rows.push_back({std::to_string(K), std::to_string(cfg.trials), format_double(rate),
                           format_double(sc_bound(family.alphabet_size, K, eps))});
  }
  result.metadata["kind"] = "sc";
  result.metadata["seed"] = cfg.seed;
  result.metadata["n_demos"] = n;
  result.metadata["eps_mode_gap"] = eps;
  result.metadata["fail_rates"] = fail_rates;
  if (eps > 0.0 && eps < 1.0) {
    double nstar = sc_n_star(family, cfg.theta_star, eps);
    result.metadata["n_star"] = nstar == kPosInf ? nlohmann::json("inf") : nlohmann::json(nstar);
  } else {
    result.metadata["n_star"] = nullptr;
  }
}

inline void run_tot(const ExperimentConfig& cfg, const TaskFamily& family, int threads,
                    ExperimentResult& result) {
  if (cfg.theta_star >= family.num_tasks()) throw ValidationError("config: theta_star out of range for family");
  result.header = {"K", "trials", "fail_rate", "bound"};
  int n = cfg.n_grid.front();
  const int beam_width = 1;
  auto keep = full_keep_indices(family.horizon);
  SeparationReport rep = separation_report(family, cfg.theta_star);
  const auto& eq = class_of(rep.classes, cfg.theta_star);
  const TaskModel& star = family.tasks[static_cast<std::size_t>(cfg.theta_star)];

  // Greedy-path step probabilities per query with positive initial mass.
  const auto& init = initial_distribution(star);
  std::vector<std::vector<double>> probs_by_query(static_cast<std::size_t>(family.alphabet_size));
  std::vector<ValueFunction> value_by_query;
  value_by_query.reserve(static_cast<std::size_t>(family.alphabet_size));
  for (StepSymbol q = 0; q < family.alphabet_size; ++q) {
    value_by_query.push_back(oracle_value_fn(family, cfg.theta_star, q));
    if (init[static_cast<std::size_t>(q)] > 0.0) {
      probs_by_query[static_cast<std::size_t>(q)] =
          optimal_step_probs(star, value_by_query.back().optimal_path);
    }
  }

  std::uint64_t kind_hash = hash_label("tot");
  std::vector<double> fail_rates;
  double eps_measured = 0.0;
  for (int K : cfg.k_grid) {
    std::vector<char> fails(static_cast<std::size_t>(cfg.trials), 0);
    std::vector<double> offclass(static_cast<std::size_t>(cfg.trials), 0.0);
    detail::parallel_for(cfg.trials, threads, [&](int trial) {
      RngStream rng(cfg.seed, derive_stream_id(kind_hash, static_cast<std::uint64_t>(K),
                                               static_cast<std::uint64_t>(trial)));
      Prompt prompt = sample_prompt(family, cfg.theta_star, n, keep, rng);
      const ValueFunction& value = value_by_query[static_cast<std::size_t>(prompt.query)];
      TotStats stats;
      Trajectory found = tot_bfs(family, prompt, value, K, beam_width, rng, &eq, &stats);
      fails[static_cast<std::size_t>(trial)] = found.steps != value.optimal_path.steps ? 1 : 0;
      offclass[static_cast<std::size_t>(trial)] = stats.max_offclass_mass;
    });
    int fail_count = 0;
    for (char f : fails) fail_count += f;
    for (double m : offclass) eps_measured = std::max(eps_measured, m);
    fail_rates.push_back(static_cast<double>(fail_count) / cfg.trials);
  }
  // Bound evaluated with the measured posterior leakage; reported per K as
  // the worst case over queries the task can actually pose.
  for (std::size_t ki = 0; ki < cfg.k_grid.size(); ++ki) {
    int K = cfg.k_grid[ki];
    double bound = 0.0;
    for (StepSymbol q = 0; q < family.alphabet_size; ++q) {
      if (init[static_cast<std::size_t>(q)] <= 0.0) continue;
      bound = std::max(bound, tot_bound(probs_by_query[static_cast<std::size_t>(q)],
                                        std::min(eps_measured, 1.0), K));
    }
    result.rows.push_back({std::to_string(K), std::to_string(cfg.trials),
                           format_double(fail_rates[ki]), format_double(bound)});
  }
  result.metadata["kind"] = "tot";
  result.metadata["seed"] = cfg.seed;
  result.metadata["n_demos"] = n;
  result.metadata["beam_width"] = beam_width;
  result.metadata["eps_measured"] = eps_measured;
  result.metadata["fail_rates"] = fail_rates;
}

inline void run_si(const ExperimentConfig& cfg, const SIFamily& family, int threads,
                   ExperimentResult& result) {
  if (cfg.theta_star >= family.num_tasks()) throw ValidationError("config: theta_star out of range for family");
  result.header = {"n", "trial", "kl"};
  std::uint64_t kind_hash = hash_label("si");
  const SITask& star = family.tasks[static_cast<std::size_t>(cfg.theta_star)];
  std::vector<std::vector<double>> kls(cfg.n_grid.size());
  for (std::size_t gi = 0; gi < cfg.n_grid.size(); ++gi) {
    int n = cfg.n_grid[gi];
    kls[gi].assign(static_cast<std::size_t>(cfg.trials), 0.0);
    detail::parallel_for(cfg.trials, threads, [&, gi, n](int trial) {
      RngStream rng(cfg.seed, derive_stream_id(kind_hash, static_cast<std::uint64_t>(n),
                                               static_cast<std::uint64_t>(trial)));
      std::vector<SIDemo> demos;
      demos.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) demos.push_back(si_sample_demo(family, cfg.theta_star, rng));
      auto s_se = selection_examples(demos);
      auto s_in = inference_examples(family, demos);
      StepSymbol query = rng.sample_discrete(star.initial);
      auto truth = si_answer_marginal(family, cfg.theta_star, query);
      auto pred = si_predictive(family, s_se, s_in, query);
      kls[gi][static_cast<std::size_t>(trial)] = divergence(Divergence::KL, truth, pred);
    });
    for (int trial = 0; trial < cfg.trials; ++trial) {
      result.rows.push_back({std::to_string(n), std::to_string(trial),
                             format_double(kls[gi][static_cast<std::size_t>(trial)])});
    }
  }
  auto sum = detail::summarize_kl(cfg.n_grid, kls, result);
  SiSeparations sep = si_separations(family, cfg.theta_star);
  result.metadata["kind"] = "si";
  result.metadata["seed"] = cfg.seed;
  result.metadata["trials"] = cfg.trials;
  result.metadata["median_kl"] = sum.medians;
  result.metadata["p90_kl"] = sum.p90s;
  result.metadata["slope_log_median_vs_n"] = detail::log_slope_vs(cfg.n_grid, sum.medians, false);
  auto inf_or = [](double x) {
    return x == kPosInf ? nlohmann::json("inf") : nlohmann::json(x);
  };
  result.metadata["lambda_s"] = inf_or(sep.lambda_s);
  result.metadata["lambda_i"] = inf_or(sep.lambda_i);
  result.metadata["lambda_q"] = inf_or(sep.lambda_q);
}

inline void run_attn(const ExperimentConfig& cfg, int threads, ExperimentResult& result) {
  result.header = {"n", "seed", "C", "max_err", "renorm_dev"};
  const AttnParams& p = cfg.attn;
  struct SeedRun {
    std::uint64_t seed = 0;
    std::vector<ConvergenceRow> rows;
  };
  std::vector<SeedRun> runs(static_cast<std::size_t>(cfg.trials));
  ThetaStructure structure =
      p.theta_structure == "last_block" ? ThetaStructure::kLastBlock : ThetaStructure::kDense;
  detail::parallel_for(cfg.trials, threads, [&](int i) {
    std::uint64_t seed_i = cfg.seed + static_cast<std::uint64_t>(i);
    FeatureMaps maps = make_feature_maps(p.alphabet_size, p.horizon, p.d_k, p.d_v, seed_i,
                                         p.key_scale, p.relu_dim);
    RngStream theta_rng(seed_i, derive_stream_id(hash_label("theta_star")));
    auto theta = make_theta_star(maps, theta_rng, structure);
    runs[static_cast<std::size_t>(i)] = {
        seed_i, convergence_experiment(maps, theta, p.sigma2, cfg.n_grid, seed_i)};
  });
  std::vector<double> slopes;
  std::vector<double> ratios;
  double max_residual = 0.0;
  for (const auto& run : runs) {
    std::vector<double> log_n, log_err;
    for (const auto& row : run.rows) {
      result.rows.push_back({std::to_string(row.n), std::to_string(run.seed),
                             format_double(row.c_fit), format_double(row.max_err),
                             format_double(row.renorm_dev)});
      if (row.max_err > 0.0) {
        log_n.push_back(std::log(static_cast<double>(row.n)));
        log_err.push_back(std::log(row.max_err));
      }
      max_residual = std::max(max_residual, row.max_ridge_residual);
    }
    slopes.push_back(log_n.size() == run.rows.size() && log_n.size() >= 2
                         ? ls_slope(log_n, log_err)
                         : 0.0);
    double first = run.rows.front().max_err;
    double last = run.rows.back().max_err;
    ratios.push_back(first > 0.0 ? last / first : 0.0);
  }
  result.metadata["kind"] = "attn";
  result.metadata["seed"] = cfg.seed;
  result.metadata["trials"] = cfg.trials;
  result.metadata["sigma2"] = p.sigma2;
  result.metadata["key_scale"] = p.key_scale;
  result.metadata["theta_structure"] = p.theta_structure;
  result.metadata["loglog_slopes"] = slopes;
  result.metadata["err_last_over_first"] = ratios;
  result.metadata["max_ridge_residual"] = max_residual;
}

inline void run_dominance(const ExperimentConfig& cfg, const TaskFamily& family, int threads,
                          ExperimentResult& result) {
  result.header = {"pair_id", "J", "Jprime", "n", "delta_kl", "identity_residual"};
  struct Job {
    int pair_id;
    int n;
  };
  std::vector<Job> jobs;
  for (std::size_t pi = 0; pi < cfg.pairs.size(); ++pi) {
    for (int n : cfg.n_grid) jobs.push_back({static_cast<int>(pi), n});
  }
  std::vector<DominanceResult> outs(jobs.size());
  detail::parallel_for(static_cast<int>(jobs.size()), threads, [&](int i) {
    const Job& job = jobs[static_cast<std::size_t>(i)];
    const KeepPair& pair = cfg.pairs[static_cast<std::size_t>(job.pair_id)];
    outs[static_cast<std::size_t>(i)] =
        dominance_check(family, pair.keep_coarse, pair.keep_fine, job.n);
  });
  bool all_monotone = true;
  bool all_identity = true;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const Job& job = jobs[i];
    const KeepPair& pair = cfg.pairs[static_cast<std::size_t>(job.pair_id)];
    const DominanceResult& r = outs[i];
    all_monotone = all_monotone && r.monotone;
    all_identity = all_identity && r.identity_ok;
    result.rows.push_back({std::to_string(job.pair_id), detail::format_keep_set(pair.keep_coarse),
                           detail::format_keep_set(pair.keep_fine), std::to_string(job.n),
                           format_double(r.delta_kl), format_double(r.identity_residual)});
  }
  result.metadata["kind"] = "dominance";
  result.metadata["all_monotone"] = all_monotone;
  result.metadata["all_identity_ok"] = all_identity;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline std::string resolve_family_path(const ExperimentConfig& cfg) { return cfg.family_path; }

// Runs the configured experiment. When flush_path is nonempty, whatever rows
// accumulated before a failure are written there before rethrowing.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, int threads = 1,
                                       const std::string& flush_path = "") {
  if (threads < 1) throw UsageError("run_experiment: threads must be >= 1");
  ExperimentResult result;
  try {
    if (cfg.kind == "decay" || cfg.kind == "sc" || cfg.kind == "tot" || cfg.kind == "dominance") {
      TaskFamily family = load_task_family(resolve_family_path(cfg));
      if (cfg.kind == "decay") run_decay(cfg, family, threads, result);
      else if (cfg.kind == "sc") run_sc(cfg, family, threads, result);
      else if (cfg.kind == "tot") run_tot(cfg, family, threads, result);
      else run_dominance(cfg, family, threads, result);
    } else if (cfg.kind == "si") {
      SIFamily family = load_si_family(resolve_family_path(cfg));
      run_si(cfg, family, threads, result);
    } else if (cfg.kind == "attn") {
      run_attn(cfg, threads, result);
    } else {
      throw ValidationError("run_experiment: unknown kind \"" + cfg.kind + "\"");
    }
  } catch (...) {
    if (!flush_path.empty() && !result.rows.empty()) {
      try {
        write_csv(result.header, result.rows, flush_path);
      } catch (...) {
        // Preserve the original failure.
      }
    }
    throw;
  }
  return result;
}

}  // namespace cotlab
