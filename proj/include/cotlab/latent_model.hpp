#pragma once

// Finite-alphabet multi-step latent-variable data model: task families over a
// shared alphabet L and horizon H, exact (possibly truncated) likelihoods,
// and seeded sampling. A "task" is either a per-step Markov chain or a fully
// tabular conditional keyed by the whole history prefix; both are special
// cases of the same stochastic-dynamical-system contract.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "cotlab/common.hpp"
#include "cotlab/rng.hpp"

namespace cotlab {

using StepSymbol = int;
using TaskId = int;

// A full reasoning trajectory z_0 .. z_H (length H+1). z_0 is the input,
// z_H the answer.
struct Trajectory {
  std::vector<StepSymbol> steps;

  bool operator==(const Trajectory&) const = default;
};

// Markov task: initial distribution of z_0 plus one row-stochastic LxL
// transition matrix per step h in [1..H].
struct MarkovTask {
  std::vector<double> initial;
  std::vector<std::vector<std::vector<double>>> transitions;  // [h-1][from][to]
};

// Tabular task: the conditional of z_h may depend on the entire prefix
// z_0..z_{h-1}. tables[h-1] holds |L|^h rows; the prefix is encoded base-|L|
// with the earliest step most significant.
struct TabularTask {
  std::vector<double> initial;
  std::vector<std::vector<std::vector<double>>> tables;  // [h-1][prefix_code][to]
};

using TaskModel = std::variant<MarkovTask, TabularTask>;

struct TaskFamily {
  int alphabet_size = 0;
  int horizon = 0;
  std::vector<double> prior;
  std::vector<TaskModel> tasks;

  int num_tasks() const { return static_cast<int>(tasks.size()); }
};

// A prompt: n demonstration trajectories, the set J of intermediate step
// indices (subset of {1..H-1}) that are visible to the reader, and the test
// query z_0. Demos are stored in full; every likelihood computation honors J
// and never reads the hidden coordinates. J = {1..H-1} is full CoT, J = {}
// is vanilla ICL.
struct Prompt {
  std::vector<Trajectory> demos;
  std::vector<int> keep_indices;  // sorted, subset of {1..H-1}
  StepSymbol query = 0;
};

inline std::vector<int> full_keep_indices(int horizon) {
  std::vector<int> j;
  for (int h = 1; h < horizon; ++h) j.push_back(h);
  return j;
}

// Sorted visible positions {0} | J | {H}.
inline std::vector<int> visible_indices(const std::vector<int>& keep, int horizon) {
  std::vector<int> v;
  v.push_back(0);
  for (int j : keep) {
    if (j < 1 || j >= horizon) throw UsageError("keep index " + std::to_string(j) + " outside {1..H-1}");
    v.push_back(j);
  }
  v.push_back(horizon);
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

inline std::vector<StepSymbol> symbols_at(const Trajectory& traj, const std::vector<int>& indices) {
  std::vector<StepSymbol> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(traj.steps.at(static_cast<std::size_t>(i)));
  return out;
}

namespace detail {

inline int prefix_code(std::span<const StepSymbol> prefix, int alphabet) {
  int code = 0;
  for (StepSymbol s : prefix) code = code * alphabet + s;
  return code;
}

}  // namespace detail

inline int task_horizon(const TaskModel& task) {
  if (const auto* m = std::get_if<MarkovTask>(&task)) return static_cast<int>(m->transitions.size());
  return static_cast<int>(std::get<TabularTask>(task).tables.size());
}

inline int task_alphabet(const TaskModel& task) {
  if (const auto* m = std::get_if<MarkovTask>(&task)) return static_cast<int>(m->initial.size());
  return static_cast<int>(std::get<TabularTask>(task).initial.size());
}

inline const std::vector<double>& initial_distribution(const TaskModel& task) {
  if (const auto* m = std::get_if<MarkovTask>(&task)) return m->initial;
  return std::get<TabularTask>(task).initial;
}

// Exact conditional P(z_h = . | z_{0:h-1}, theta). h = 0 returns the initial
// distribution (history must be empty).
inline const std::vector<double>& step_distribution(const TaskModel& task, int h,
                                                    std::span<const StepSymbol> history) {
  if (static_cast<int>(history.size()) != h) {
    throw UsageError("step_distribution: history length " + std::to_string(history.size()) +
                     " != step index " + std::to_string(h));
  }
  if (h == 0) return initial_distribution(task);
  if (h > task_horizon(task)) throw UsageError("step_distribution: step index exceeds horizon");
  if (const auto* m = std::get_if<MarkovTask>(&task)) {
    return m->transitions[static_cast<std::size_t>(h - 1)][static_cast<std::size_t>(history.back())];
  }
  const auto& t = std::get<TabularTask>(task);
  int code = detail::prefix_code(history, task_alphabet(task));
  return t.tables[static_cast<std::size_t>(h - 1)][static_cast<std::size_t>(code)];
}

inline const std::vector<double>& step_distribution(const TaskModel& task, int h,
                                                    const std::vector<StepSymbol>& history) {
  return step_distribution(task, h, std::span<const StepSymbol>(history));
}

// log P(z_{0:H} | theta); -inf when any factor vanishes.
inline double trajectory_log_prob(const TaskModel& task, const Trajectory& traj) {
  int horizon = task_horizon(task);
  if (static_cast<int>(traj.steps.size()) != horizon + 1) {
    throw UsageError("trajectory_log_prob: trajectory length != H+1");
  }
  double lp = 0.0;
  for (int h = 0; h <= horizon; ++h) {
    std::span<const StepSymbol> hist(traj.steps.data(), static_cast<std::size_t>(h));
    double p = step_distribution(task, h, hist)[static_cast<std::size_t>(traj.steps[h])];
    if (p <= 0.0) return kNegInf;
    lp += std::log(p);
  }
  return lp;
}

// log P(z_i = s_i for all visible i | theta), for an arbitrary sorted set of
// visible positions. Markov tasks marginalize hidden runs with chained
// matrix-vector products (one log factor per visible segment); tabular tasks
// enumerate the hidden prefix coordinates and combine in log space.
inline double visible_log_prob(const TaskModel& task, std::span<const int> positions,
                               std::span<const StepSymbol> symbols) {
  if (positions.size() != symbols.size()) throw UsageError("visible_log_prob: size mismatch");
  int horizon = task_horizon(task);
  int alphabet = task_alphabet(task);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] < 0 || positions[i] > horizon) throw UsageError("visible position out of range");
    if (i > 0 && positions[i] <= positions[i - 1]) throw UsageError("visible positions not sorted");
    if (symbols[i] < 0 || symbols[i] >= alphabet) throw UsageError("visible symbol out of alphabet");
  }
  if (positions.empty()) return 0.0;

  if (const auto* m = std::get_if<MarkovTask>(&task)) {
    double lp = 0.0;
    // Conditional distribution of the chain at the last pinned position.
    std::vector<double> v = m->initial;
    std::size_t vi = 0;
    if (positions[0] == 0) {
      double p = v[static_cast<std::size_t>(symbols[0])];
      if (p <= 0.0) return kNegInf;
      lp += std::log(p);
      std::fill(v.begin(), v.end(), 0.0);
      v[static_cast<std::size_t>(symbols[0])] = 1.0;
      vi = 1;
    }
    std::vector<double> next(static_cast<std::size_t>(alphabet));
    for (int h = 1; h <= horizon && vi < positions.size(); ++h) {
      const auto& T = m->transitions[static_cast<std::size_t>(h - 1)];
      std::fill(next.begin(), next.end(), 0.0);
      for (int a = 0; a < alphabet; ++a) {
        if (v[static_cast<std::size_t>(a)] == 0.0) continue;
        for (int b = 0; b < alphabet; ++b) {
          next[static_cast<std::size_t>(b)] +=
              v[static_cast<std::size_t>(a)] * T[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
        }
      }
      v = next;
      if (positions[vi] == h) {
        double p = v[static_cast<std::size_t>(symbols[vi])];
        if (p <= 0.0) return kNegInf;
        lp += std::log(p);
        std::fill(v.begin(), v.end(), 0.0);
        v[static_cast<std::size_t>(symbols[vi])] = 1.0;
        ++vi;
      }
    }
    return lp;
  }

  // Tabular: enumerate every hidden coordinate up to the last visible one.
  int last = positions.back();
  std::vector<int> hidden;
  {
    std::size_t vi = 0;
    for (int h = 0; h <= last; ++h) {
      if (vi < positions.size() && positions[vi] == h) {
        ++vi;
      } else {
        hidden.push_back(h);
      }
    }
  }
  std::int64_t combos = checked_ipow(alphabet, static_cast<int>(hidden.size()));
  std::vector<StepSymbol> filled(static_cast<std::size_t>(last + 1), 0);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    filled[static_cast<std::size_t>(positions[i])] = symbols[i];
  }
  std::vector<double> log_terms;
  log_terms.reserve(static_cast<std::size_t>(combos));
  for (std::int64_t c = 0; c < combos; ++c) {
    std::int64_t rem = c;
    for (std::size_t k = 0; k < hidden.size(); ++k) {
      filled[static_cast<std::size_t>(hidden[k])] = static_cast<StepSymbol>(rem % alphabet);
      rem /= alphabet;
    }
    double lp = 0.0;
    for (int h = 0; h <= last; ++h) {
      std::span<const StepSymbol> hist(filled.data(), static_cast<std::size_t>(h));
      double p = step_distribution(task, h, hist)[static_cast<std::size_t>(filled[static_cast<std::size_t>(h)])];
      if (p <= 0.0) {
        lp = kNegInf;
        break;
      }
      lp += std::log(p);
    }
    if (lp != kNegInf) log_terms.push_back(lp);
  }
  return log_sum_exp(log_terms);
}

// log probability of a demo that shows only the steps {0} | J | {H}.
inline double truncated_log_prob(const TaskModel& task, std::span<const StepSymbol> visible_symbols,
                                 const std::vector<int>& keep_indices) {
  auto pos = visible_indices(keep_indices, task_horizon(task));
  if (visible_symbols.size() != pos.size()) {
    throw UsageError("truncated_log_prob: expected " + std::to_string(pos.size()) +
                     " visible symbols, got " + std::to_string(visible_symbols.size()));
  }
  return visible_log_prob(task, pos, visible_symbols);
}

inline double truncated_log_prob(const TaskModel& task, const std::vector<StepSymbol>& visible_symbols,
                                 const std::vector<int>& keep_indices) {
  return truncated_log_prob(task, std::span<const StepSymbol>(visible_symbols), keep_indices);
}

// Convenience: the J-visible log-likelihood of a fully stored demo.
inline double demo_log_prob(const TaskModel& task, const Trajectory& demo,
                            const std::vector<int>& keep_indices) {
  auto pos = visible_indices(keep_indices, task_horizon(task));
  auto syms = symbols_at(demo, pos);
  return visible_log_prob(task, pos, syms);
}

// Marginal of the answer z_H given z_0 under one task. Linear-space chained
// products (Markov) or middle-step enumeration (tabular); this is a short
// per-task computation, not a cross-demo accumulation.
inline std::vector<double> answer_marginal(const TaskModel& task, StepSymbol z0) {
  int horizon = task_horizon(task);
  int alphabet = task_alphabet(task);
  if (z0 < 0 || z0 >= alphabet) throw UsageError("answer_marginal: query symbol out of alphabet");
  if (const auto* m = std::get_if<MarkovTask>(&task)) {
    std::vector<double> v(static_cast<std::size_t>(alphabet), 0.0);
    v[static_cast<std::size_t>(z0)] = 1.0;
    std::vector<double> next(static_cast<std::size_t>(alphabet));
    for (int h = 1; h <= horizon; ++h) {
      const auto& T = m->transitions[static_cast<std::size_t>(h - 1)];
      std::fill(next.begin(), next.end(), 0.0);
      for (int a = 0; a < alphabet; ++a) {
        if (v[static_cast<std::size_t>(a)] == 0.0) continue;
        for (int b = 0; b < alphabet; ++b) {
          next[static_cast<std::size_t>(b)] +=
              v[static_cast<std::size_t>(a)] * T[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
        }
      }
      std::swap(v, next);
    }
    return v;
  }
  // Tabular: sum over middle steps z_1..z_{H-1}.
  std::int64_t combos = checked_ipow(alphabet, horizon - 1);
  std::vector<double> out(static_cast<std::size_t>(alphabet), 0.0);
  std::vector<StepSymbol> filled(static_cast<std::size_t>(horizon + 1), 0);
  filled[0] = z0;
  for (std::int64_t c = 0; c < combos; ++c) {
    std::int64_t rem = c;
    for (int h = 1; h < horizon; ++h) {
      filled[static_cast<std::size_t>(h)] = static_cast<StepSymbol>(rem % alphabet);
      rem /= alphabet;
    }
    double p_mid = 1.0;
    for (int h = 1; h < horizon && p_mid > 0.0; ++h) {
      std::span<const StepSymbol> hist(filled.data(), static_cast<std::size_t>(h));
      p_mid *= step_distribution(task, h, hist)[static_cast<std::size_t>(filled[static_cast<std::size_t>(h)])];
    }
    if (p_mid <= 0.0) continue;
    std::span<const StepSymbol> hist(filled.data(), static_cast<std::size_t>(horizon));
    const auto& last = step_distribution(task, horizon, hist);
    for (int y = 0; y < alphabet; ++y) out[static_cast<std::size_t>(y)] += p_mid * last[static_cast<std::size_t>(y)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

inline Trajectory sample_trajectory(const TaskModel& task, RngStream& rng) {
  int horizon = task_horizon(task);
  Trajectory traj;
  traj.steps.reserve(static_cast<std::size_t>(horizon + 1));
  for (int h = 0; h <= horizon; ++h) {
    const auto& dist = step_distribution(task, h, std::span<const StepSymbol>(traj.steps.data(), traj.steps.size()));
    traj.steps.push_back(rng.sample_discrete(dist));
  }
  return traj;
}

// n i.i.d. demos from the given task plus a query sampled from the same
// task's initial distribution. Demos are stored in full; J only marks what
// downstream consumers may read.
inline Prompt sample_prompt(const TaskFamily& family, TaskId theta, int n,
                            const std::vector<int>& keep_indices, RngStream& rng) {
  if (theta < 0 || theta >= family.num_tasks()) throw UsageError("sample_prompt: bad task id");
  if (n < 0) throw UsageError("sample_prompt: negative demo count");
  const TaskModel& task = family.tasks[static_cast<std::size_t>(theta)];
  Prompt prompt;
  prompt.keep_indices = keep_indices;
  std::sort(prompt.keep_indices.begin(), prompt.keep_indices.end());
  prompt.demos.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) prompt.demos.push_back(sample_trajectory(task, rng));
  prompt.query = rng.sample_discrete(initial_distribution(task));
  return prompt;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct FamilyDiagnostics {
  double max_row_residual = 0.0;  // worst |row sum - 1|
  double min_entry = 1.0;         // smallest probability entry anywhere
  std::vector<std::string> violations;
};

namespace detail {

inline void check_row(const std::vector<double>& row, int alphabet, const std::string& where,
                      FamilyDiagnostics& diag) {
  if (static_cast<int>(row.size()) != alphabet) {
    diag.violations.push_back(where + ": row length " + std::to_string(row.size()) +
                              " != alphabet size " + std::to_string(alphabet));
    return;
  }
  double sum = 0.0;
  for (double p : row) {
    if (p < 0.0) diag.violations.push_back(where + ": negative entry " + format_double(p));
    diag.min_entry = std::min(diag.min_entry, p);
    sum += p;
  }
  double resid = std::abs(sum - 1.0);
  diag.max_row_residual = std::max(diag.max_row_residual, resid);
  if (resid > kRowSumTol) {
    diag.violations.push_back(where + ": row sums to " + format_double(sum));
  }
}

}  // namespace detail

// Structural check of a family: row sums within 1e-12, nonnegative entries,
// shared dimensions, optional probability floor c0. Throws ValidationError
// listing every offending row; returns the diagnostics record when clean.
inline FamilyDiagnostics validate_family(const TaskFamily& family,
                                         std::optional<double> floor_c0 = std::nullopt) {
  FamilyDiagnostics diag;
  int L = family.alphabet_size;
  int H = family.horizon;
  if (L < 1) diag.violations.push_back("alphabet_size must be >= 1");
  if (H < 1) diag.violations.push_back("horizon must be >= 1");
  if (family.tasks.empty()) diag.violations.push_back("family has no tasks");
  detail::check_row(family.prior, family.num_tasks(), "prior", diag);
  for (int t = 0; t < family.num_tasks(); ++t) {
    const std::string tag = "task " + std::to_string(t);
    const TaskModel& task = family.tasks[static_cast<std::size_t>(t)];
    if (task_alphabet(task) != L) diag.violations.push_back(tag + ": alphabet size mismatch");
    if (task_horizon(task) != H) diag.violations.push_back(tag + ": horizon mismatch");
    detail::check_row(initial_distribution(task), L, tag + " initial", diag);
    if (const auto* m = std::get_if<MarkovTask>(&task)) {
      for (std::size_t h = 0; h < m->transitions.size(); ++h) {
        if (static_cast<int>(m->transitions[h].size()) != L) {
          diag.violations.push_back(tag + " step " + std::to_string(h + 1) + ": matrix row count != alphabet");
          continue;
        }
        for (int a = 0; a < L; ++a) {
          detail::check_row(m->transitions[h][static_cast<std::size_t>(a)], L,
                            tag + " step " + std::to_string(h + 1) + " row " + std::to_string(a), diag);
        }
      }
    } else {
      const auto& tab = std::get<TabularTask>(task);
      for (std::size_t h = 0; h < tab.tables.size(); ++h) {
        std::int64_t rows = checked_ipow(L, static_cast<int>(h) + 1);
        if (static_cast<std::int64_t>(tab.tables[h].size()) != rows) {
          diag.violations.push_back(tag + " step " + std::to_string(h + 1) + ": expected " +
                                    std::to_string(rows) + " prefix rows");
          continue;
        }
        for (std::int64_t r = 0; r < rows; ++r) {
          detail::check_row(tab.tables[h][static_cast<std::size_t>(r)], L,
                            tag + " step " + std::to_string(h + 1) + " prefix " + std::to_string(r), diag);
        }
      }
    }
  }
  if (floor_c0 && diag.violations.empty() && diag.min_entry < *floor_c0) {
    diag.violations.push_back("probability floor violated: min entry " + format_double(diag.min_entry) +
                              " < c0 = " + format_double(*floor_c0));
  }
  if (!diag.violations.empty()) {
    std::string msg = "family validation failed:";
    for (const auto& v : diag.violations) msg += "\n  - " + v;
    throw ValidationError(msg);
  }
  return diag;
}

// ---------------------------------------------------------------------------
// JSON (de)serialization. Key names are part of the external contract.
// ---------------------------------------------------------------------------

inline TaskModel task_model_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "markov") {
    MarkovTask m;
    m.initial = j.at("initial").get<std::vector<double>>();
    m.transitions = j.at("transitions").get<std::vector<std::vector<std::vector<double>>>>();
    return m;
  }
  if (kind == "tabular") {
    TabularTask t;
    t.initial = j.at("initial").get<std::vector<double>>();
    t.tables = j.at("tables").get<std::vector<std::vector<std::vector<double>>>>();
    return t;
  }
  throw ValidationError("unknown task kind \"" + kind + "\"");
}

inline nlohmann::json task_model_to_json(const TaskModel& task) {
  nlohmann::json j;
  if (const auto* m = std::get_if<MarkovTask>(&task)) {
    j["kind"] = "markov";
    j["initial"] = m->initial;
    j["transitions"] = m->transitions;
  } else {
    const auto& t = std::get<TabularTask>(task);
    j["kind"] = "tabular";
    j["initial"] = t.initial;
    j["tables"] = t.tables;
  }
  return j;
}

inline TaskFamily task_family_from_json(const nlohmann::json& j) {
  TaskFamily family;
  try {
    family.alphabet_size = j.at("alphabet_size").get<int>();
    family.horizon = j.at("horizon").get<int>();
    family.prior = j.at("prior").get<std::vector<double>>();
    for (const auto& tj : j.at("tasks")) family.tasks.push_back(task_model_from_json(tj));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("task family JSON malformed: ") + e.what());
  }
  validate_family(family);
  return family;
}

inline nlohmann::json task_family_to_json(const TaskFamily& family) {
  nlohmann::json j;
  j["alphabet_size"] = family.alphabet_size;
  j["horizon"] = family.horizon;
  j["prior"] = family.prior;
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : family.tasks) j["tasks"].push_back(task_model_to_json(t));
  return j;
}

inline TaskFamily load_task_family(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open task family file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("task family JSON parse error in " + path + ": " + e.what());
  }
  return task_family_from_json(j);
}

}  // namespace cotlab
