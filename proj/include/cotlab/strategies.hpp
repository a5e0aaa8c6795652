#pragma once

// Multi-path prompting strategies on top of the posterior-mixture sampler:
// majority voting over independently sampled reasoning paths, breadth-first
// tree search with per-step-truncated demonstrations and an oracle value
// function, and the two-module selection-inference generator with its exact
// marginal.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cotlab/common.hpp"
#include "cotlab/divergences.hpp"
#include "cotlab/inference.hpp"
#include "cotlab/latent_model.hpp"
#include "cotlab/rng.hpp"

namespace cotlab {

// ---------------------------------------------------------------------------
// Majority vote over sampled reasoning paths
// ---------------------------------------------------------------------------

struct ScResult {
  StepSymbol winner = 0;
  std::vector<int> votes;  // histogram over answer symbols
};

// Draw K full reasoning paths i.i.d. and return the modal final answer.
// Exact vote ties go to the smallest symbol id.
inline ScResult sc_cot(const TaskFamily& family, const Prompt& prompt, int K, RngStream& rng) {
  if (K < 1) throw UsageError("sc_cot: need at least one path");
  ScResult res;
  res.votes.assign(static_cast<std::size_t>(family.alphabet_size), 0);
  for (int k = 0; k < K; ++k) {
    Trajectory suffix = sample_cot_path(family, prompt, rng);
    res.votes[static_cast<std::size_t>(suffix.steps.back())]++;
  }
  for (int y = 1; y < family.alphabet_size; ++y) {
    if (res.votes[static_cast<std::size_t>(y)] > res.votes[static_cast<std::size_t>(res.winner)]) {
      res.winner = y;
    }
  }
  return res;
}

// Closed-form tail bound on the probability that the vote misses the
// predictive's mode, given the mode gap eps of the answer predictive.
inline double sc_bound(int alphabet_size, int K, double eps) {
  if (alphabet_size < 2 || K < 1) throw UsageError("sc_bound: bad arguments");
  if (eps <= 0.0) return 1.0;
  return 2.0 * alphabet_size * std::exp(-3.0 * K * eps * eps / (24.0 + 8.0 * eps));
}

// Demonstration count past which the vote bound applies: enough data for the
// posterior to have concentrated on the answer-equivalence class of the
// generating task to within eps, with high probability.
inline double sc_n_star(const TaskFamily& family, TaskId theta_star, double eps) {
  if (eps <= 0.0 || eps >= 1.0) throw UsageError("sc_n_star: eps must lie in (0,1)");
  SeparationReport rep = separation_lambda(family, theta_star, /*per_step=*/false);
  const auto& eq = class_of(rep.classes, theta_star);
  int complement = family.num_tasks() - static_cast<int>(eq.size());
  if (complement == 0) return 0.0;
  double prior_star = family.prior[static_cast<std::size_t>(theta_star)];
  if (prior_star <= 0.0) throw UsageError("sc_n_star: generating task has zero prior");
  if (rep.lambda <= 0.0) return kPosInf;
  return (std::log(static_cast<double>(complement) / prior_star) + std::log(1.0 / eps)) / rep.lambda;
}

// ---------------------------------------------------------------------------
// Breadth-first tree search
// ---------------------------------------------------------------------------

// Value of a partial test history (z_0..z_h), in [0,1]. The search only
// compares values between histories of equal length.
struct ValueFunction {
  std::function<double(const std::vector<StepSymbol>&)> score;
  Trajectory optimal_path;  // greedy stepwise-argmax path of the generating task

  double operator()(const std::vector<StepSymbol>& hist) const { return score(hist); }
};

// Value oracle for a generating task: 1 on every prefix of the greedy
// stepwise-argmax path from the query (ties toward the smallest symbol),
// otherwise the task's conditional probability of the history's last step,
// halved so off-path values stay strictly below 1.
inline ValueFunction oracle_value_fn(const TaskFamily& family, TaskId theta_star, StepSymbol query) {
  if (theta_star < 0 || theta_star >= family.num_tasks()) throw UsageError("oracle_value_fn: bad task id");
  if (query < 0 || query >= family.alphabet_size) throw UsageError("oracle_value_fn: query out of alphabet");
  const TaskModel task = family.tasks[static_cast<std::size_t>(theta_star)];
  Trajectory optimal;
  optimal.steps.push_back(query);
  for (int h = 1; h <= family.horizon; ++h) {
    const auto& dist = step_distribution(task, h, optimal.steps);
    int best = 0;
    for (int z = 1; z < family.alphabet_size; ++z) {
      if (dist[static_cast<std::size_t>(z)] > dist[static_cast<std::size_t>(best)]) best = z;
    }
    optimal.steps.push_back(static_cast<StepSymbol>(best));
  }
  ValueFunction vf;
  vf.optimal_path = optimal;
  const int horizon = family.horizon;
  vf.score = [task, optimal, horizon](const std::vector<StepSymbol>& hist) -> double {
    if (hist.empty() || static_cast<int>(hist.size()) > horizon + 1) {
      throw UsageError("value function: history length out of range");
    }
    bool prefix = true;
    for (std::size_t i = 0; i < hist.size(); ++i) {
      if (hist[i] != optimal.steps[i]) {
        prefix = false;
        break;
      }
    }
    if (prefix) return 1.0;
    int m = static_cast<int>(hist.size()) - 1;
    double p;
    if (m == 0) {
      p = initial_distribution(task)[static_cast<std::size_t>(hist[0])];
    } else {
      const auto& dist =
          step_distribution(task, m, std::span<const StepSymbol>(hist.data(), static_cast<std::size_t>(m)));
      p = dist[static_cast<std::size_t>(hist[static_cast<std::size_t>(m)])];
    }
    return 0.5 * p;
  };
  return vf;
}

// Conditional probabilities of the greedy path's steps under the task:
// entry h-1 is P(path_h | path_{0:h-1}).
inline std::vector<double> optimal_step_probs(const TaskModel& task, const Trajectory& path) {
  std::vector<double> probs;
  for (int h = 1; h < static_cast<int>(path.steps.size()); ++h) {
    const auto& dist =
        step_distribution(task, h, std::span<const StepSymbol>(path.steps.data(), static_cast<std::size_t>(h)));
    probs.push_back(dist[static_cast<std::size_t>(path.steps[static_cast<std::size_t>(h)])]);
  }
  return probs;
}

// Failure bound for the beam-1 search: one term per step, each the chance
// that K samples all miss the greedy step when at most an eps posterior
// mass sits off the generating task's equivalence class.
inline double tot_bound(const std::vector<double>& step_probs, double eps, int K) {
  if (K < 1) throw UsageError("tot_bound: K must be >= 1");
  double sum = 0.0;
  for (double p : step_probs) {
    if (p < 0.0 || p > 1.0) throw UsageError("tot_bound: step probability outside [0,1]");
    sum += std::pow(1.0 - p + eps * p, K);
  }
  return sum;
}

// Demonstration count past which every per-step sampling posterior has
// concentrated to within eps, uniformly over steps, with high probability.
inline double tot_n_star(const TaskFamily& family, TaskId theta_star, double eps) {
  if (eps <= 0.0 || eps >= 1.0) throw UsageError("tot_n_star: eps must lie in (0,1)");
  SeparationReport rep = separation_lambda(family, theta_star, /*per_step=*/true);
  double lambda_min = kPosInf;
  for (double l : rep.lambda_per_step) lambda_min = std::min(lambda_min, l);
  double prior_star = family.prior[static_cast<std::size_t>(theta_star)];
  if (prior_star <= 0.0) throw UsageError("tot_n_star: generating task has zero prior");
  if (lambda_min <= 0.0) return kPosInf;
  double odds = prior_star >= 1.0 ? 0.0 : (1.0 - prior_star) / prior_star;
  double numer = 2.0 * std::log(static_cast<double>(family.horizon) * family.num_tasks()) +
                 (odds > 0.0 ? std::log(odds) : 0.0) + std::log(1.0 / eps);
  return std::max(0.0, numer / lambda_min);
}

struct TotStats {
  double max_offclass_mass = 0.0;  // worst posterior mass off the given class, any node/level
};

// Breadth-first search over test histories. At level h the K continuations
// of each kept history are sampled from the posterior mixture whose evidence
// is the demonstrations truncated to their first h+1 steps plus that history
// itself; the pooled children are ranked by the value function (ties toward
// the lexicographically smaller history) and the best B survive. Returns the
// top-ranked full history (z_0..z_H). The prompt supplies full demos and the
// query; its keep set is not consulted -- truncation here is per level.
inline Trajectory tot_bfs(const TaskFamily& family, const Prompt& prompt, const ValueFunction& value,
                          int K, int B, RngStream& rng,
                          const std::vector<TaskId>* eq_class = nullptr, TotStats* stats = nullptr) {
  if (K < 1 || B < 1) throw UsageError("tot_bfs: K and B must be >= 1");
  const int horizon = family.horizon;
  const int L = family.alphabet_size;
  const int num = family.num_tasks();
  if (prompt.query < 0 || prompt.query >= L) throw UsageError("tot_bfs: query out of alphabet");
  for (const Trajectory& d : prompt.demos) {
    if (static_cast<int>(d.steps.size()) != horizon + 1) throw UsageError("tot_bfs: demo length != H+1");
  }

  std::vector<double> log_prior(static_cast<std::size_t>(num), kNegInf);
  for (int t = 0; t < num; ++t) {
    double p = family.prior[static_cast<std::size_t>(t)];
    if (p > 0.0) log_prior[static_cast<std::size_t>(t)] = std::log(p);
  }

  struct Node {
    std::vector<StepSymbol> hist;
    std::vector<double> hist_ll;  // log P(hist | task) per task
  };

  // Demo evidence at the current truncation depth, one entry per task.
  std::vector<double> demo_ll(static_cast<std::size_t>(num), 0.0);
  for (int t = 0; t < num; ++t) {
    const TaskModel& task = family.tasks[static_cast<std::size_t>(t)];
    const auto& init = initial_distribution(task);
    double acc = 0.0;
    for (const Trajectory& d : prompt.demos) {
      double p = init[static_cast<std::size_t>(d.steps[0])];
      if (p <= 0.0) {
        acc = kNegInf;
        break;
      }
      acc += std::log(p);
    }
    demo_ll[static_cast<std::size_t>(t)] = acc;
  }

  std::vector<Node> beam(1);
  beam[0].hist.push_back(prompt.query);
  beam[0].hist_ll.assign(static_cast<std::size_t>(num), kNegInf);
  for (int t = 0; t < num; ++t) {
    double p = initial_distribution(family.tasks[static_cast<std::size_t>(t)])[static_cast<std::size_t>(prompt.query)];
    if (p > 0.0) beam[0].hist_ll[static_cast<std::size_t>(t)] = std::log(p);
  }

  std::vector<double> logw(static_cast<std::size_t>(num));
  for (int h = 0; h < horizon; ++h) {
    // Truncate demos one step deeper: they now show their first h+1 steps.
    for (int t = 0; t < num; ++t) {
      if (demo_ll[static_cast<std::size_t>(t)] == kNegInf) continue;
      const TaskModel& task = family.tasks[static_cast<std::size_t>(t)];
      for (const Trajectory& d : prompt.demos) {
        const auto& dist = step_distribution(
            task, h + 1, std::span<const StepSymbol>(d.steps.data(), static_cast<std::size_t>(h + 1)));
        double p = dist[static_cast<std::size_t>(d.steps[static_cast<std::size_t>(h + 1)])];
        if (p <= 0.0) {
          demo_ll[static_cast<std::size_t>(t)] = kNegInf;
          break;
        }
        demo_ll[static_cast<std::size_t>(t)] += std::log(p);
      }
    }

    std::vector<Node> children;
    for (const Node& node : beam) {
      for (int t = 0; t < num; ++t) {
        double lw = log_prior[static_cast<std::size_t>(t)];
        if (lw != kNegInf) lw += demo_ll[static_cast<std::size_t>(t)];
        if (lw != kNegInf) {
          lw = node.hist_ll[static_cast<std::size_t>(t)] == kNegInf
                   ? kNegInf
                   : lw + node.hist_ll[static_cast<std::size_t>(t)];
        }
        logw[static_cast<std::size_t>(t)] = lw;
      }
      auto post = detail::normalize_log_weights(logw);
      if (eq_class != nullptr && stats != nullptr) {
        double in_class = 0.0;
        for (TaskId t : *eq_class) in_class += post[static_cast<std::size_t>(t)];
        stats->max_offclass_mass = std::max(stats->max_offclass_mass, 1.0 - in_class);
      }
      std::vector<std::vector<double>> comps(static_cast<std::size_t>(num));
      for (int t = 0; t < num; ++t) {
        if (post[static_cast<std::size_t>(t)] > 0.0) {
          comps[static_cast<std::size_t>(t)] =
              step_distribution(family.tasks[static_cast<std::size_t>(t)], h + 1, node.hist);
        }
      }
      auto mix = detail::mix_distributions(comps, post);
      std::set<int> drawn;
      for (int k = 0; k < K; ++k) drawn.insert(rng.sample_discrete(mix));
      for (int z : drawn) {
        Node child;
        child.hist = node.hist;
        child.hist.push_back(static_cast<StepSymbol>(z));
        child.hist_ll.assign(static_cast<std::size_t>(num), kNegInf);
        for (int t = 0; t < num; ++t) {
          if (node.hist_ll[static_cast<std::size_t>(t)] == kNegInf) continue;
          const auto& dist = step_distribution(family.tasks[static_cast<std::size_t>(t)], h + 1, node.hist);
          double p = dist[static_cast<std::size_t>(z)];
          if (p > 0.0) {
            child.hist_ll[static_cast<std::size_t>(t)] =
                node.hist_ll[static_cast<std::size_t>(t)] + std::log(p);
          }
        }
        children.push_back(std::move(child));
      }
    }
    std::sort(children.begin(), children.end(), [&value](const Node& a, const Node& b) {
      double va = value(a.hist), vb = value(b.hist);
      if (va != vb) return va > vb;
      return a.hist < b.hist;
    });
    if (static_cast<int>(children.size()) > B) children.resize(static_cast<std::size_t>(B));
    beam = std::move(children);
  }
  return Trajectory{beam.front().hist};
}

// ---------------------------------------------------------------------------
// Selection-inference model
// ---------------------------------------------------------------------------

// A selection mask picks a subset of the history positions 0..h-1 (sorted).
using SelectionMask = std::vector<int>;

struct SITask {
  std::vector<double> initial;
  // Categorical over the step's allowed masks: [h-1][mask_idx].
  std::vector<std::vector<double>> selection;
  // Conditional of the next symbol given the selected sub-history:
  // [h-1][mask_idx][subhistory_code][next]. Codes are base-|L| with the
  // earliest selected position most significant.
  std::vector<std::vector<std::vector<std::vector<double>>>> inference;
};

struct SIFamily {
  int alphabet_size = 0;
  int horizon = 0;
  std::vector<double> prior;
  std::vector<std::vector<SelectionMask>> allowed_masks;  // [h-1][mask_idx]
  std::vector<SITask> tasks;

  int num_tasks() const { return static_cast<int>(tasks.size()); }
};

// One demonstrated selection choice: at step `step` the mask with index
// `mask_idx` was used.
struct SelectionExample {
  int step = 0;  // 1-based
  int mask_idx = 0;
};

// One demonstrated inference outcome: at step `step`, under mask `mask_idx`,
// the selected sub-history encoded as `code` produced symbol `next`.
struct InferenceExample {
  int step = 0;
  int mask_idx = 0;
  int code = 0;
  StepSymbol next = 0;
};

struct SIDemo {
  Trajectory traj;         // z_0..z_H
  std::vector<int> masks;  // mask index used at each step h = 1..H
};

namespace detail {

inline int mask_code(std::span<const StepSymbol> hist, const SelectionMask& mask, int alphabet) {
  int code = 0;
  for (int idx : mask) code = code * alphabet + hist[static_cast<std::size_t>(idx)];
  return code;
}

}  // namespace detail

inline void validate_si_family(const SIFamily& family) {
  std::vector<std::string> problems;
  const int L = family.alphabet_size;
  const int H = family.horizon;
  if (L < 1) problems.push_back("alphabet_size must be >= 1");
  if (H < 1) problems.push_back("horizon must be >= 1");
  if (static_cast<int>(family.allowed_masks.size()) != H) {
    problems.push_back("allowed_masks must have one entry per step");
  }
  auto check_row = [&problems](const std::vector<double>& row, std::size_t want, const std::string& where) {
    if (row.size() != want) {
      problems.push_back(where + ": row length " + std::to_string(row.size()) + " != " + std::to_string(want));
      return;
    }
    double sum = 0.0;
    for (double p : row) {
      if (p < 0.0) problems.push_back(where + ": negative entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kRowSumTol) {
      problems.push_back(where + ": row sum deviates by " + format_double(std::abs(sum - 1.0)));
    }
  };
  check_row(family.prior, static_cast<std::size_t>(family.num_tasks()), "prior");
  for (int h = 1; h <= H && static_cast<int>(family.allowed_masks.size()) == H; ++h) {
    const auto& masks = family.allowed_masks[static_cast<std::size_t>(h - 1)];
    if (masks.empty()) problems.push_back("step " + std::to_string(h) + ": no allowed masks");
    for (const auto& mask : masks) {
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] < 0 || mask[i] >= h) {
          problems.push_back("step " + std::to_string(h) + ": mask index out of range");
        }
        if (i > 0 && mask[i] <= mask[i - 1]) {
          problems.push_back("step " + std::to_string(h) + ": mask not sorted/unique");
        }
      }
    }
  }
  for (std::size_t t = 0; t < family.tasks.size(); ++t) {
    const SITask& task = family.tasks[t];
    const std::string base = "task " + std::to_string(t);
    check_row(task.initial, static_cast<std::size_t>(L), base + " initial");
    if (static_cast<int>(task.selection.size()) != H || static_cast<int>(task.inference.size()) != H) {
      problems.push_back(base + ": selection/inference must have one block per step");
      continue;
    }
    for (int h = 1; h <= H && static_cast<int>(family.allowed_masks.size()) == H; ++h) {
      const auto& masks = family.allowed_masks[static_cast<std::size_t>(h - 1)];
      check_row(task.selection[static_cast<std::size_t>(h - 1)], masks.size(),
                base + " selection step " + std::to_string(h));
      const auto& inf = task.inference[static_cast<std::size_t>(h - 1)];
      if (inf.size() != masks.size()) {
        problems.push_back(base + " inference step " + std::to_string(h) + ": one table per mask required");
        continue;
      }
      for (std::size_t m = 0; m < masks.size(); ++m) {
        std::size_t codes = static_cast<std::size_t>(checked_ipow(L, static_cast<int>(masks[m].size())));
        if (inf[m].size() != codes) {
          problems.push_back(base + " inference step " + std::to_string(h) + " mask " + std::to_string(m) +
                             ": table must have one row per sub-history");
          continue;
        }
        for (std::size_t c = 0; c < codes; ++c) {
          check_row(inf[m][c], static_cast<std::size_t>(L),
                    base + " inference step " + std::to_string(h) + " mask " + std::to_string(m) + " row " +
                        std::to_string(c));
        }
      }
    }
  }
  if (!problems.empty()) {
    std::string msg = "selection-inference family validation failed:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ValidationError(msg);
  }
}

inline SIDemo si_sample_demo(const SIFamily& family, TaskId theta, RngStream& rng) {
  if (theta < 0 || theta >= family.num_tasks()) throw UsageError("si_sample_demo: bad task id");
  const SITask& task = family.tasks[static_cast<std::size_t>(theta)];
  SIDemo demo;
  demo.traj.steps.push_back(static_cast<StepSymbol>(rng.sample_discrete(task.initial)));
  for (int h = 1; h <= family.horizon; ++h) {
    int m = rng.sample_discrete(task.selection[static_cast<std::size_t>(h - 1)]);
    const auto& mask = family.allowed_masks[static_cast<std::size_t>(h - 1)][static_cast<std::size_t>(m)];
    int code = detail::mask_code(demo.traj.steps, mask, family.alphabet_size);
    const auto& row = task.inference[static_cast<std::size_t>(h - 1)][static_cast<std::size_t>(m)]
                                    [static_cast<std::size_t>(code)];
    demo.masks.push_back(m);
    demo.traj.steps.push_back(static_cast<StepSymbol>(rng.sample_discrete(row)));
  }
  return demo;
}

inline std::vector<SelectionExample> selection_examples(const std::vector<SIDemo>& demos) {
  std::vector<SelectionExample> out;
  for (const SIDemo& d : demos) {
    for (int h = 1; h <= static_cast<int>(d.masks.size()); ++h) {
      out.push_back({h, d.masks[static_cast<std::size_t>(h - 1)]});
    }
  }
  return out;
}

inline std::vector<InferenceExample> inference_examples(const SIFamily& family,
                                                        const std::vector<SIDemo>& demos) {
  std::vector<InferenceExample> out;
  for (const SIDemo& d : demos) {
    for (int h = 1; h <= static_cast<int>(d.masks.size()); ++h) {
      int m = d.masks[static_cast<std::size_t>(h - 1)];
      const auto& mask = family.allowed_masks[static_cast<std::size_t>(h - 1)][static_cast<std::size_t>(m)];
      int code = detail::mask_code(
          std::span<const StepSymbol>(d.traj.steps.data(), static_cast<std::size_t>(h)), mask,
          family.alphabet_size);
      out.push_back({h, m, code, d.traj.steps[static_cast<std::size_t>(h)]});
    }
  }
  return out;
}

// Posterior over tasks from the demonstrated selection choices plus the
// query's probability under each task's initial distribution.
inline std::vector<double> si_selection_posterior(const SIFamily& family,
                                                  const std::vector<SelectionExample>& s_se,
                                                  StepSymbol query) {
  if (query < 0 || query >= family.alphabet_size) throw UsageError("si_selection_posterior: bad query");
  std::vector<double> logw(static_cast<std::size_t>(family.num_tasks()), kNegInf);
  for (int t = 0; t < family.num_tasks(); ++t) {
    double prior = family.prior[static_cast<std::size_t>(t)];
    if (prior <= 0.0) continue;
    const SITask& task = family.tasks[static_cast<std::size_t>(t)];
    double lw = std::log(prior);
    for (const SelectionExample& ex : s_se) {
      double p = task.selection[static_cast<std::size_t>(ex.step - 1)][static_cast<std::size_t>(ex.mask_idx)];
      if (p <= 0.0) {
        lw = kNegInf;
        break;
      }
      lw += std::log(p);
    }
    if (lw != kNegInf) {
      double p0 = task.initial[static_cast<std::size_t>(query)];
      lw = p0 > 0.0 ? lw + std::log(p0) : kNegInf;
    }
    logw[static_cast<std::size_t>(t)] = lw;
  }
  return detail::normalize_log_weights(logw);
}

// Posterior over tasks from the demonstrated inference outcomes alone.
inline std::vector<double> si_inference_posterior(const SIFamily& family,
                                                  const std::vector<InferenceExample>& s_in) {
  std::vector<double> logw(static_cast<std::size_t>(family.num_tasks()), kNegInf);
  for (int t = 0; t < family.num_tasks(); ++t) {
    double prior = family.prior[static_cast<std::size_t>(t)];
    if (prior <= 0.0) continue;
    const SITask& task = family.tasks[static_cast<std::size_t>(t)];
    double lw = std::log(prior);
    for (const InferenceExample& ex : s_in) {
      double p = task.inference[static_cast<std::size_t>(ex.step - 1)][static_cast<std::size_t>(ex.mask_idx)]
                               [static_cast<std::size_t>(ex.code)][static_cast<std::size_t>(ex.next)];
      if (p <= 0.0) {
        lw = kNegInf;
        break;
      }
      lw += std::log(p);
    }
    logw[static_cast<std::size_t>(t)] = lw;
  }
  return detail::normalize_log_weights(logw);
}

namespace detail {

// Posterior-mixed selection categorical per step and the mixed inference row
// for one (step, mask, code) triple.
inline std::vector<std::vector<double>> si_mixed_selection(const SIFamily& family,
                                                           const std::vector<double>& post_se) {
  std::vector<std::vector<double>> mix(static_cast<std::size_t>(family.horizon));
  for (int h = 1; h <= family.horizon; ++h) {
    const auto& masks = family.allowed_masks[static_cast<std::size_t>(h - 1)];
    std::vector<std::vector<double>> comps(static_cast<std::size_t>(family.num_tasks()));
    for (int t = 0; t < family.num_tasks(); ++t) {
      if (post_se[static_cast<std::size_t>(t)] > 0.0) {
        comps[static_cast<std::size_t>(t)] = family.tasks[static_cast<std::size_t>(t)]
                                                 .selection[static_cast<std::size_t>(h - 1)];
      }
    }
    mix[static_cast<std::size_t>(h - 1)] = mix_distributions(comps, post_se);
    if (mix[static_cast<std::size_t>(h - 1)].size() != masks.size()) {
      throw UsageError("si: selection row width mismatch");
    }
  }
  return mix;
}

inline std::vector<double> si_mixed_inference_row(const SIFamily& family,
                                                  const std::vector<double>& post_in, int h, int m,
                                                  int code) {
  std::vector<std::vector<double>> comps(static_cast<std::size_t>(family.num_tasks()));
  for (int t = 0; t < family.num_tasks(); ++t) {
    if (post_in[static_cast<std::size_t>(t)] > 0.0) {
      comps[static_cast<std::size_t>(t)] =
          family.tasks[static_cast<std::size_t>(t)].inference[static_cast<std::size_t>(h - 1)]
                                                  [static_cast<std::size_t>(m)][static_cast<std::size_t>(code)];
    }
  }
  return mix_distributions(comps, post_in);
}

}  // namespace detail

struct SiGenerated {
  Trajectory suffix;       // z_1..z_H
  std::vector<int> masks;  // mask index per step
};

// Walk the two-posterior chain once: each step samples a mask from the
// selection-posterior mixture, then the next symbol from the
// inference-posterior mixture at the selected sub-history.
inline SiGenerated si_generate(const SIFamily& family, const std::vector<SelectionExample>& s_se,
                               const std::vector<InferenceExample>& s_in, StepSymbol query,
                               RngStream& rng) {
  auto post_se = si_selection_posterior(family, s_se, query);
  auto post_in = si_inference_posterior(family, s_in);
  auto mix_sel = detail::si_mixed_selection(family, post_se);
  SiGenerated out;
  std::vector<StepSymbol> hist{query};
  for (int h = 1; h <= family.horizon; ++h) {
    int m = rng.sample_discrete(mix_sel[static_cast<std::size_t>(h - 1)]);
    const auto& mask = family.allowed_masks[static_cast<std::size_t>(h - 1)][static_cast<std::size_t>(m)];
    int code = detail::mask_code(hist, mask, family.alphabet_size);
    auto row = detail::si_mixed_inference_row(family, post_in, h, m, code);
    StepSymbol z = static_cast<StepSymbol>(rng.sample_discrete(row));
    out.masks.push_back(m);
    out.suffix.steps.push_back(z);
    hist.push_back(z);
  }
  return out;
}

// Exact law of the final symbol under the same chain, by forward enumeration
// over full histories (capacity-guarded).
inline std::vector<double> si_predictive(const SIFamily& family, const std::vector<SelectionExample>& s_se,
                                         const std::vector<InferenceExample>& s_in, StepSymbol query) {
  auto post_se = si_selection_posterior(family, s_se, query);
  auto post_in = si_inference_posterior(family, s_in);
  auto mix_sel = detail::si_mixed_selection(family, post_se);
  const int L = family.alphabet_size;
  checked_ipow(L, family.horizon + 1);  // total history-state budget

  // dist over histories of length h+1; index encodes z_1..z_h base L.
  std::vector<double> dist{1.0};
  std::vector<StepSymbol> hist(static_cast<std::size_t>(family.horizon + 1), 0);
  hist[0] = query;
  for (int h = 1; h <= family.horizon; ++h) {
    std::int64_t states = static_cast<std::int64_t>(dist.size());
    std::vector<double> next(static_cast<std::size_t>(states * L), 0.0);
    for (std::int64_t s = 0; s < states; ++s) {
      double ph = dist[static_cast<std::size_t>(s)];
      if (ph <= 0.0) continue;
      std::int64_t rem = s;
      for (int j = h - 1; j >= 1; --j) {
        hist[static_cast<std::size_t>(j)] = static_cast<StepSymbol>(rem % L);
        rem /= L;
      }
      const auto& sel = mix_sel[static_cast<std::size_t>(h - 1)];
      for (std::size_t m = 0; m < sel.size(); ++m) {
        double pm = sel[m];
        if (pm <= 0.0) continue;
        const auto& mask = family.allowed_masks[static_cast<std::size_t>(h - 1)][m];
        int code = detail::mask_code(std::span<const StepSymbol>(hist.data(), static_cast<std::size_t>(h)),
                                     mask, L);
        auto row = detail::si_mixed_inference_row(family, post_in, h, static_cast<int>(m), code);
        for (int z = 0; z < L; ++z) {
          next[static_cast<std::size_t>(s * L + z)] += ph * pm * row[static_cast<std::size_t>(z)];
        }
      }
    }
    dist = std::move(next);
  }
  std::vector<double> out(static_cast<std::size_t>(L), 0.0);
  for (std::size_t s = 0; s < dist.size(); ++s) {
    out[s % static_cast<std::size_t>(L)] += dist[s];
  }
  return out;
}

// Marginal of z_H given z_0 under a single selection-inference task.
inline std::vector<double> si_answer_marginal(const SIFamily& family, TaskId theta, StepSymbol query) {
  if (theta < 0 || theta >= family.num_tasks()) throw UsageError("si_answer_marginal: bad task id");
  SIFamily single;
  single.alphabet_size = family.alphabet_size;
  single.horizon = family.horizon;
  single.prior = {1.0};
  single.allowed_masks = family.allowed_masks;
  single.tasks = {family.tasks[static_cast<std::size_t>(theta)]};
  return si_predictive(single, {}, {}, query);
}

// Separation diagnostics for a selection-inference family, one value per
// evidence channel: selection (mask-sequence laws), inference (full demo
// laws with selection and initial pinned to the reference task), and the
// query (initial distributions). Each is the smallest squared Hellinger
// distance to any other task.
struct SiSeparations {
  double lambda_s = kPosInf;
  double lambda_i = kPosInf;
  double lambda_q = kPosInf;
};

inline SiSeparations si_separations(const SIFamily& family, TaskId theta_star) {
  if (theta_star < 0 || theta_star >= family.num_tasks()) throw UsageError("si_separations: bad task id");
  const int L = family.alphabet_size;
  const int H = family.horizon;
  const SITask& star = family.tasks[static_cast<std::size_t>(theta_star)];

  // Law of the mask sequence (independent across steps).
  auto mask_law = [&](const SITask& task) {
    std::vector<double> law{1.0};
    for (int h = 1; h <= H; ++h) {
      const auto& sel = task.selection[static_cast<std::size_t>(h - 1)];
      std::vector<double> next;
      next.reserve(law.size() * sel.size());
      for (double p : law) {
        for (double q : sel) next.push_back(p * q);
      }
      law = std::move(next);
    }
    return law;
  };

  // Joint law of (trajectory, mask sequence) under mixed components:
  // selection and initial from `sel_src`, inference from `inf_src`.
  auto demo_law = [&](const SITask& sel_src, const SITask& inf_src) {
    std::int64_t mask_combos = 1;
    for (int h = 1; h <= H; ++h) {
      mask_combos *= static_cast<std::int64_t>(family.allowed_masks[static_cast<std::size_t>(h - 1)].size());
    }
    std::int64_t traj_combos = checked_ipow(L, H + 1);
    if (mask_combos * traj_combos > kEnumerationCap) {
      throw CapacityError("si_separations: state space too large");
    }
    std::vector<double> law;
    law.reserve(static_cast<std::size_t>(mask_combos * traj_combos));
    std::vector<StepSymbol> steps(static_cast<std::size_t>(H + 1), 0);
    std::vector<int> masks(static_cast<std::size_t>(H), 0);
    for (std::int64_t mi = 0; mi < mask_combos; ++mi) {
      std::int64_t rem = mi;
      for (int h = H; h >= 1; --h) {
        std::int64_t width =
            static_cast<std::int64_t>(family.allowed_masks[static_cast<std::size_t>(h - 1)].size());
        masks[static_cast<std::size_t>(h - 1)] = static_cast<int>(rem % width);
        rem /= width;
      }
      for (std::int64_t ti = 0; ti < traj_combos; ++ti) {
        std::int64_t trem = ti;
        for (int h = H; h >= 0; --h) {
          steps[static_cast<std::size_t>(h)] = static_cast<StepSymbol>(trem % L);
          trem /= L;
        }
        double p = sel_src.initial[static_cast<std::size_t>(steps[0])];
        for (int h = 1; h <= H && p > 0.0; ++h) {
          int m = masks[static_cast<std::size_t>(h - 1)];
          p *= sel_src.selection[static_cast<std::size_t>(h - 1)][static_cast<std::size_t>(m)];
          if (p <= 0.0) break;
          const auto& mask = family.allowed_masks[static_cast<std::size_t>(h - 1)][static_cast<std::size_t>(m)];
          int code =
              detail::mask_code(std::span<const StepSymbol>(steps.data(), static_cast<std::size_t>(h)), mask, L);
          p *= inf_src.inference[static_cast<std::size_t>(h - 1)][static_cast<std::size_t>(m)]
                                [static_cast<std::size_t>(code)][static_cast<std::size_t>(steps[static_cast<std::size_t>(h)])];
        }
        law.push_back(p < 0.0 ? 0.0 : p);
      }
    }
    return law;
  };

  SiSeparations out;
  auto star_mask_law = mask_law(star);
  auto star_demo_law = demo_law(star, star);
  for (int t = 0; t < family.num_tasks(); ++t) {
    if (t == theta_star) continue;
    const SITask& other = family.tasks[static_cast<std::size_t>(t)];
    out.lambda_s = std::min(out.lambda_s, divergence(Divergence::HellingerSq, star_mask_law, mask_law(other)));
    out.lambda_i =
        std::min(out.lambda_i, divergence(Divergence::HellingerSq, star_demo_law, demo_law(star, other)));
    out.lambda_q = std::min(out.lambda_q, divergence(Divergence::HellingerSq,
                                                     std::span<const double>(star.initial),
                                                     std::span<const double>(other.initial)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Selection-inference family JSON
// ---------------------------------------------------------------------------

inline SIFamily si_family_from_json(const nlohmann::json& j) {
  SIFamily family;
  try {
    family.alphabet_size = j.at("alphabet_size").get<int>();
    family.horizon = j.at("horizon").get<int>();
    family.prior = j.at("prior").get<std::vector<double>>();
    family.allowed_masks = j.at("allowed_masks").get<std::vector<std::vector<SelectionMask>>>();
    for (const auto& jt : j.at("tasks")) {
      SITask task;
      task.initial = jt.at("initial").get<std::vector<double>>();
      task.selection = jt.at("selection").get<std::vector<std::vector<double>>>();
      task.inference =
          jt.at("inference").get<std::vector<std::vector<std::vector<std::vector<double>>>>>();
      family.tasks.push_back(std::move(task));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("selection-inference family JSON malformed: ") + e.what());
  }
  validate_si_family(family);
  return family;
}

inline nlohmann::json si_family_to_json(const SIFamily& family) {
  nlohmann::json j;
  j["alphabet_size"] = family.alphabet_size;
  j["horizon"] = family.horizon;
  j["prior"] = family.prior;
  j["allowed_masks"] = family.allowed_masks;
  j["tasks"] = nlohmann::json::array();
  for (const SITask& task : family.tasks) {
    nlohmann::json jt;
    jt["initial"] = task.initial;
    jt["selection"] = task.selection;
    jt["inference"] = task.inference;
    j["tasks"].push_back(std::move(jt));
  }
  return j;
}

inline SIFamily load_si_family(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open selection-inference family file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("selection-inference family JSON parse error: ") + e.what());
  }
  return si_family_from_json(j);
}

}  // namespace cotlab
