#pragma once

// Brute-force reference for the posterior-mixture predictive. Instead of
// factorized marginalization it enumerates every completion of the hidden
// coordinates jointly -- all unobserved demo steps plus the test path's
// intermediate steps -- and accumulates raw probability products in linear
// space with compensated summation. Deliberately shares nothing with the
// log-space inference path beyond the model's defining conditionals; it is
// only usable at small sizes and guards its own enumeration budget.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "cotlab/common.hpp"
#include "cotlab/divergences.hpp"
#include "cotlab/inference.hpp"
#include "cotlab/latent_model.hpp"

namespace cotlab {

inline constexpr std::int64_t kOracleCellCap = std::int64_t{1} << 23;

struct OracleResult {
  std::vector<double> predictive;  // P(y | prompt), length |L|
  std::vector<double> posterior;   // P(task | prompt)
};

inline OracleResult brute_force_posterior_predictive(const TaskFamily& family, const Prompt& prompt) {
  const int L = family.alphabet_size;
  const int H = family.horizon;
  const int n = static_cast<int>(prompt.demos.size());
  if (prompt.query < 0 || prompt.query >= L) throw UsageError("oracle_bma: query out of alphabet");
  for (const Trajectory& d : prompt.demos) {
    if (static_cast<int>(d.steps.size()) != H + 1) {
      throw UsageError("oracle_bma: demo length != H+1");
    }
  }

  auto vis = visible_indices(prompt.keep_indices, H);
  std::vector<int> hid;
  for (int p = 0; p <= H; ++p) {
    bool seen = false;
    for (int v : vis) {
      if (v == p) {
        seen = true;
        break;
      }
    }
    if (!seen) hid.push_back(p);
  }
  const int demo_hid = static_cast<int>(hid.size());
  const int test_hid = H - 1;  // test positions 1..H-1; z_0 is the query, z_H is enumerated as y
  const int total_hid = n * demo_hid + test_hid;
  std::int64_t cells = checked_ipow(L, total_hid, kOracleCellCap);

  std::vector<Trajectory> demos = prompt.demos;
  Trajectory test;
  test.steps.assign(static_cast<std::size_t>(H + 1), 0);
  test.steps[0] = prompt.query;

  std::vector<CompensatedSum> joint_y(static_cast<std::size_t>(L));
  std::vector<CompensatedSum> joint_theta(static_cast<std::size_t>(family.num_tasks()));
  std::vector<int> digits(static_cast<std::size_t>(total_hid), 0);

  for (std::int64_t cell = 0; cell < cells; ++cell) {
    std::int64_t rem = cell;
    for (int d = total_hid - 1; d >= 0; --d) {
      digits[static_cast<std::size_t>(d)] = static_cast<int>(rem % L);
      rem /= L;
    }
    int d = 0;
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < demo_hid; ++k) {
        demos[static_cast<std::size_t>(i)].steps[static_cast<std::size_t>(hid[static_cast<std::size_t>(k)])] =
            static_cast<StepSymbol>(digits[static_cast<std::size_t>(d++)]);
      }
    }
    for (int h = 1; h <= H - 1; ++h) {
      test.steps[static_cast<std::size_t>(h)] = static_cast<StepSymbol>(digits[static_cast<std::size_t>(d++)]);
    }

    for (int t = 0; t < family.num_tasks(); ++t) {
      double p = family.prior[static_cast<std::size_t>(t)];
      if (p <= 0.0) continue;
      const TaskModel& task = family.tasks[static_cast<std::size_t>(t)];
      const auto& init = initial_distribution(task);
      for (int i = 0; i < n && p > 0.0; ++i) {
        const auto& steps = demos[static_cast<std::size_t>(i)].steps;
        p *= init[static_cast<std::size_t>(steps[0])];
        for (int h = 1; h <= H && p > 0.0; ++h) {
          const auto& dist = step_distribution(task, h, std::span<const StepSymbol>(steps.data(), static_cast<std::size_t>(h)));
          p *= dist[static_cast<std::size_t>(steps[static_cast<std::size_t>(h)])];
        }
      }
      if (p <= 0.0) continue;
      p *= init[static_cast<std::size_t>(prompt.query)];
      for (int h = 1; h <= H - 1 && p > 0.0; ++h) {
        const auto& dist = step_distribution(task, h, std::span<const StepSymbol>(test.steps.data(), static_cast<std::size_t>(h)));
        p *= dist[static_cast<std::size_t>(test.steps[static_cast<std::size_t>(h)])];
      }
      if (p <= 0.0) continue;
      joint_theta[static_cast<std::size_t>(t)].add(p);
      const auto& final_dist =
          step_distribution(task, H, std::span<const StepSymbol>(test.steps.data(), static_cast<std::size_t>(H)));
      for (int y = 0; y < L; ++y) {
        double py = final_dist[static_cast<std::size_t>(y)];
        if (py > 0.0) joint_y[static_cast<std::size_t>(y)].add(p * py);
      }
    }
  }

  double total = 0.0;
  for (const auto& acc : joint_y) total += acc.value();
  if (total <= 0.0) {
    throw ImpossiblePromptError("oracle_bma: prompt has probability zero under every task");
  }
  OracleResult res;
  res.predictive.resize(static_cast<std::size_t>(L));
  for (int y = 0; y < L; ++y) {
    res.predictive[static_cast<std::size_t>(y)] = joint_y[static_cast<std::size_t>(y)].value() / total;
  }
  double theta_total = 0.0;
  for (const auto& acc : joint_theta) theta_total += acc.value();
  res.posterior.resize(joint_theta.size());
  for (std::size_t t = 0; t < joint_theta.size(); ++t) {
    res.posterior[t] = joint_theta[t].value() / theta_total;
  }
  return res;
}

inline std::vector<double> oracle_predictive(const TaskFamily& family, const Prompt& prompt) {
  return brute_force_posterior_predictive(family, prompt).predictive;
}

// ---------------------------------------------------------------------------
// Exact prompt-averaged error and the coarse-versus-fine comparison
// ---------------------------------------------------------------------------

namespace detail {

// Per-demo visible tuples at the positions {0} | keep | {H}, with the
// log-likelihood of each tuple under every task. Tuples impossible under all
// tasks are dropped.
struct VisibleTuples {
  std::vector<int> positions;
  std::vector<std::vector<double>> loglik;  // [tuple][task]
  std::vector<std::vector<StepSymbol>> symbols;
};

inline VisibleTuples enumerate_visible_tuples(const TaskFamily& family, const std::vector<int>& keep) {
  VisibleTuples out;
  out.positions = visible_indices(keep, family.horizon);
  const int L = family.alphabet_size;
  const int V = static_cast<int>(out.positions.size());
  std::int64_t count = checked_ipow(L, V);
  std::vector<StepSymbol> syms(static_cast<std::size_t>(V), 0);
  for (std::int64_t idx = 0; idx < count; ++idx) {
    std::int64_t rem = idx;
    for (int k = V - 1; k >= 0; --k) {
      syms[static_cast<std::size_t>(k)] = static_cast<StepSymbol>(rem % L);
      rem /= L;
    }
    std::vector<double> lls(static_cast<std::size_t>(family.num_tasks()), kNegInf);
    bool any = false;
    for (int t = 0; t < family.num_tasks(); ++t) {
      double ll = visible_log_prob(family.tasks[static_cast<std::size_t>(t)], out.positions, syms);
      lls[static_cast<std::size_t>(t)] = ll;
      if (ll != kNegInf) any = true;
    }
    if (any) {
      out.loglik.push_back(std::move(lls));
      out.symbols.push_back(syms);
    }
  }
  return out;
}

}  // namespace detail

// Exact expectation of the prediction error at one keep set, over prompts
// with n demos whose visible coordinates and query are enumerated with their
// probabilities. With `theta` set the prompt law and the reference answer
// law are that task's; without it the expectation also averages the
// generating task under the prior.
inline double expected_kl_exact(const TaskFamily& family, const std::vector<int>& keep, int n,
                                std::optional<TaskId> theta = std::nullopt) {
  if (n < 0) throw UsageError("expected_kl_exact: negative demo count");
  if (theta && (*theta < 0 || *theta >= family.num_tasks())) {
    throw UsageError("expected_kl_exact: bad task id");
  }
  const int L = family.alphabet_size;
  const int num = family.num_tasks();
  auto tuples = detail::enumerate_visible_tuples(family, keep);
  std::int64_t combos = checked_ipow(static_cast<std::int64_t>(tuples.loglik.size()), n);

  std::vector<double> log_prior(static_cast<std::size_t>(num), kNegInf);
  for (int t = 0; t < num; ++t) {
    if (family.prior[static_cast<std::size_t>(t)] > 0.0) {
      log_prior[static_cast<std::size_t>(t)] = std::log(family.prior[static_cast<std::size_t>(t)]);
    }
  }
  std::vector<std::vector<std::vector<double>>> marg(static_cast<std::size_t>(num));
  for (int t = 0; t < num; ++t) {
    for (int q = 0; q < L; ++q) {
      marg[static_cast<std::size_t>(t)].push_back(answer_marginal(family.tasks[static_cast<std::size_t>(t)], q));
    }
  }

  CompensatedSum total;
  std::vector<int> pick(static_cast<std::size_t>(n), 0);
  std::vector<double> demo_ll(static_cast<std::size_t>(num));
  std::vector<double> logw(static_cast<std::size_t>(num));
  std::vector<std::vector<double>> comps(static_cast<std::size_t>(num));
  for (std::int64_t c = 0; c < combos; ++c) {
    std::int64_t rem = c;
    for (int i = n - 1; i >= 0; --i) {
      pick[static_cast<std::size_t>(i)] = static_cast<int>(rem % static_cast<std::int64_t>(tuples.loglik.size()));
      rem /= static_cast<std::int64_t>(tuples.loglik.size());
    }
    std::fill(demo_ll.begin(), demo_ll.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const auto& lls = tuples.loglik[static_cast<std::size_t>(pick[static_cast<std::size_t>(i)])];
      for (int t = 0; t < num; ++t) demo_ll[static_cast<std::size_t>(t)] += lls[static_cast<std::size_t>(t)];
    }
    for (int q = 0; q < L; ++q) {
      for (int t = 0; t < num; ++t) {
        double li = initial_distribution(family.tasks[static_cast<std::size_t>(t)])[static_cast<std::size_t>(q)];
        logw[static_cast<std::size_t>(t)] =
            (log_prior[static_cast<std::size_t>(t)] == kNegInf || li <= 0.0 ||
             demo_ll[static_cast<std::size_t>(t)] == kNegInf)
                ? kNegInf
                : log_prior[static_cast<std::size_t>(t)] + demo_ll[static_cast<std::size_t>(t)] + std::log(li);
      }
      double lse = log_sum_exp(logw);
      if (lse == kNegInf) continue;
      std::vector<double> post(static_cast<std::size_t>(num), 0.0);
      for (int t = 0; t < num; ++t) {
        if (logw[static_cast<std::size_t>(t)] != kNegInf) {
          post[static_cast<std::size_t>(t)] = std::exp(logw[static_cast<std::size_t>(t)] - lse);
        }
      }
      for (int t = 0; t < num; ++t) {
        comps[static_cast<std::size_t>(t)] = post[static_cast<std::size_t>(t)] > 0.0
                                                 ? marg[static_cast<std::size_t>(t)][static_cast<std::size_t>(q)]
                                                 : std::vector<double>{};
      }
      auto pred = detail::mix_distributions(comps, post);
      if (theta) {
        // Weight conditioned on the generating task: P(demos, q | theta),
        // independent of that task's prior mass.
        std::size_t ts = static_cast<std::size_t>(*theta);
        double li = initial_distribution(family.tasks[ts])[static_cast<std::size_t>(q)];
        if (li <= 0.0 || demo_ll[ts] == kNegInf) continue;
        double weight = std::exp(demo_ll[ts] + std::log(li));
        total.add(weight * divergence(Divergence::KL, marg[ts][static_cast<std::size_t>(q)], pred));
      } else {
        for (int t = 0; t < num; ++t) {
          if (logw[static_cast<std::size_t>(t)] == kNegInf) continue;
          double weight = std::exp(logw[static_cast<std::size_t>(t)]);
          total.add(weight * divergence(Divergence::KL,
                                        marg[static_cast<std::size_t>(t)][static_cast<std::size_t>(q)], pred));
        }
      }
    }
  }
  return total.value();
}

inline constexpr double kMonotoneTol = 1e-10;
inline constexpr double kIdentityTol = 1e-9;

struct DominanceResult {
  double ekl_coarse = 0.0;         // prior- and prompt-averaged KL with the smaller keep set
  double ekl_fine = 0.0;           // same with the larger keep set
  double delta_kl = 0.0;           // coarse minus fine
  double identity_residual = 0.0;  // |delta_kl - E KL(fine predictive || coarse predictive)|
  bool monotone = false;           // delta_kl >= -kMonotoneTol
  bool identity_ok = false;        // identity_residual <= kIdentityTol
};

// Exact comparison of two nested keep sets under the full generative law
// (task from the prior, demos and query from the task). The decomposition
// E KL(coarse) - E KL(fine) = E KL(fine predictive || coarse predictive)
// holds in exact arithmetic because the fine predictive is the posterior
// mean of the per-task answer law given everything the coarse predictive
// sees and more; its residual here is a float-roundoff check.
inline DominanceResult dominance_check(const TaskFamily& family, std::vector<int> keep_coarse,
                                       std::vector<int> keep_fine, int n) {
  if (n < 0) throw UsageError("dominance_check: negative demo count");
  std::sort(keep_coarse.begin(), keep_coarse.end());
  std::sort(keep_fine.begin(), keep_fine.end());
  if (!std::includes(keep_fine.begin(), keep_fine.end(), keep_coarse.begin(), keep_coarse.end())) {
    throw UsageError("dominance_check: coarse keep set must be contained in the fine one");
  }
  const int L = family.alphabet_size;
  const int num = family.num_tasks();
  auto tuples = detail::enumerate_visible_tuples(family, keep_fine);
  std::int64_t combos = checked_ipow(static_cast<std::int64_t>(tuples.loglik.size()), n);

  // Coarse positions as slots into the fine tuple.
  auto vis_coarse = visible_indices(keep_coarse, family.horizon);
  std::vector<int> slot;
  slot.reserve(vis_coarse.size());
  for (int p : vis_coarse) {
    auto it = std::find(tuples.positions.begin(), tuples.positions.end(), p);
    slot.push_back(static_cast<int>(it - tuples.positions.begin()));
  }
  // Coarse log-likelihood of each fine tuple under each task.
  std::vector<std::vector<double>> coarse_ll(tuples.loglik.size());
  std::vector<StepSymbol> coarse_syms(vis_coarse.size(), 0);
  for (std::size_t i = 0; i < tuples.loglik.size(); ++i) {
    for (std::size_t k = 0; k < slot.size(); ++k) {
      coarse_syms[k] = tuples.symbols[i][static_cast<std::size_t>(slot[k])];
    }
    coarse_ll[i].reserve(static_cast<std::size_t>(num));
    for (int t = 0; t < num; ++t) {
      coarse_ll[i].push_back(visible_log_prob(family.tasks[static_cast<std::size_t>(t)], vis_coarse, coarse_syms));
    }
  }

  std::vector<double> log_prior(static_cast<std::size_t>(num), kNegInf);
  for (int t = 0; t < num; ++t) {
    if (family.prior[static_cast<std::size_t>(t)] > 0.0) {
      log_prior[static_cast<std::size_t>(t)] = std::log(family.prior[static_cast<std::size_t>(t)]);
    }
  }
  std::vector<std::vector<std::vector<double>>> marg(static_cast<std::size_t>(num));
  for (int t = 0; t < num; ++t) {
    for (int q = 0; q < L; ++q) {
      marg[static_cast<std::size_t>(t)].push_back(answer_marginal(family.tasks[static_cast<std::size_t>(t)], q));
    }
  }

  CompensatedSum ekl_coarse, ekl_fine, cross;
  std::vector<int> pick(static_cast<std::size_t>(n), 0);
  std::vector<double> demo_f(static_cast<std::size_t>(num));
  std::vector<double> demo_c(static_cast<std::size_t>(num));
  std::vector<double> logw_f(static_cast<std::size_t>(num));
  std::vector<double> logw_c(static_cast<std::size_t>(num));
  std::vector<std::vector<double>> comps(static_cast<std::size_t>(num));
  for (std::int64_t c = 0; c < combos; ++c) {
    std::int64_t rem = c;
    for (int i = n - 1; i >= 0; --i) {
      pick[static_cast<std::size_t>(i)] = static_cast<int>(rem % static_cast<std::int64_t>(tuples.loglik.size()));
      rem /= static_cast<std::int64_t>(tuples.loglik.size());
    }
    std::fill(demo_f.begin(), demo_f.end(), 0.0);
    std::fill(demo_c.begin(), demo_c.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      std::size_t idx = static_cast<std::size_t>(pick[static_cast<std::size_t>(i)]);
      for (int t = 0; t < num; ++t) {
        demo_f[static_cast<std::size_t>(t)] += tuples.loglik[idx][static_cast<std::size_t>(t)];
        demo_c[static_cast<std::size_t>(t)] += coarse_ll[idx][static_cast<std::size_t>(t)];
      }
    }
    for (int q = 0; q < L; ++q) {
      for (int t = 0; t < num; ++t) {
        double li = initial_distribution(family.tasks[static_cast<std::size_t>(t)])[static_cast<std::size_t>(q)];
        bool dead = log_prior[static_cast<std::size_t>(t)] == kNegInf || li <= 0.0;
        logw_f[static_cast<std::size_t>(t)] =
            (dead || demo_f[static_cast<std::size_t>(t)] == kNegInf)
                ? kNegInf
                : log_prior[static_cast<std::size_t>(t)] + demo_f[static_cast<std::size_t>(t)] + std::log(li);
        logw_c[static_cast<std::size_t>(t)] =
            (dead || demo_c[static_cast<std::size_t>(t)] == kNegInf)
                ? kNegInf
                : log_prior[static_cast<std::size_t>(t)] + demo_c[static_cast<std::size_t>(t)] + std::log(li);
      }
      double lse_f = log_sum_exp(logw_f);
      if (lse_f == kNegInf) continue;
      std::vector<double> post_f(static_cast<std::size_t>(num), 0.0);
      std::vector<double> post_c(static_cast<std::size_t>(num), 0.0);
      double lse_c = log_sum_exp(logw_c);
      for (int t = 0; t < num; ++t) {
        if (logw_f[static_cast<std::size_t>(t)] != kNegInf) {
          post_f[static_cast<std::size_t>(t)] = std::exp(logw_f[static_cast<std::size_t>(t)] - lse_f);
        }
        if (logw_c[static_cast<std::size_t>(t)] != kNegInf) {
          post_c[static_cast<std::size_t>(t)] = std::exp(logw_c[static_cast<std::size_t>(t)] - lse_c);
        }
      }
      for (int t = 0; t < num; ++t) {
        comps[static_cast<std::size_t>(t)] =
            (post_f[static_cast<std::size_t>(t)] > 0.0 || post_c[static_cast<std::size_t>(t)] > 0.0)
                ? marg[static_cast<std::size_t>(t)][static_cast<std::size_t>(q)]
                : std::vector<double>{};
      }
      auto pred_f = detail::mix_distributions(comps, post_f);
      auto pred_c = detail::mix_distributions(comps, post_c);
      for (int t = 0; t < num; ++t) {
        if (logw_f[static_cast<std::size_t>(t)] == kNegInf) continue;
        double weight = std::exp(logw_f[static_cast<std::size_t>(t)]);
        const auto& truth = marg[static_cast<std::size_t>(t)][static_cast<std::size_t>(q)];
        ekl_fine.add(weight * divergence(Divergence::KL, truth, pred_f));
        ekl_coarse.add(weight * divergence(Divergence::KL, truth, pred_c));
      }
      cross.add(std::exp(lse_f) * divergence(Divergence::KL, pred_f, pred_c));
    }
  }

  DominanceResult res;
  res.ekl_coarse = ekl_coarse.value();
  res.ekl_fine = ekl_fine.value();
  res.delta_kl = res.ekl_coarse - res.ekl_fine;
  res.identity_residual = std::abs(res.delta_kl - cross.value());
  res.monotone = res.delta_kl >= -kMonotoneTol;
  res.identity_ok = res.identity_residual <= kIdentityTol;
  return res;
}

}  // namespace cotlab
