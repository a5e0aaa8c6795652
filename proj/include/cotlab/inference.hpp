#pragma once

// Exact posterior-weighted prediction over a task family. A prompt pins a
// posterior over tasks (prior x visible demo likelihoods x query initial
// probability); the answer predictive is the posterior mixture of per-task
// answer marginals. Includes the divergence of that mixture from the data
// generator's own predictive and autoregressive path sampling.

#include <cmath>
#include <vector>

#include "cotlab/common.hpp"
#include "cotlab/divergences.hpp"
#include "cotlab/latent_model.hpp"
#include "cotlab/rng.hpp"

namespace cotlab {

// Unnormalized log posterior over tasks given a prompt:
// log prior + sum over demos of the visible-coordinate log-likelihood
// + log P(z_0 = query | task). Entries are -inf for excluded tasks.
inline std::vector<double> log_posterior_weights(const TaskFamily& family, const Prompt& prompt) {
  if (prompt.query < 0 || prompt.query >= family.alphabet_size) {
    throw UsageError("log_posterior_weights: query symbol out of alphabet");
  }
  std::vector<double> logw(static_cast<std::size_t>(family.num_tasks()), kNegInf);
  for (int t = 0; t < family.num_tasks(); ++t) {
    double prior = family.prior[static_cast<std::size_t>(t)];
    if (prior <= 0.0) continue;
    const TaskModel& task = family.tasks[static_cast<std::size_t>(t)];
    double lw = std::log(prior);
    for (const Trajectory& demo : prompt.demos) {
      lw += demo_log_prob(task, demo, prompt.keep_indices);
      if (lw == kNegInf) break;
    }
    if (lw != kNegInf) {
      double p0 = initial_distribution(task)[static_cast<std::size_t>(prompt.query)];
      lw = p0 > 0.0 ? lw + std::log(p0) : kNegInf;
    }
    logw[static_cast<std::size_t>(t)] = lw;
  }
  return logw;
}

namespace detail {

// Normalize unnormalized log weights to probabilities; a prompt impossible
// under every task has no posterior and is reported as such.
inline std::vector<double> normalize_log_weights(const std::vector<double>& logw) {
  double lse = log_sum_exp(logw);
  if (lse == kNegInf) {
    throw ImpossiblePromptError("prompt has probability zero under every task in the family");
  }
  std::vector<double> post(logw.size(), 0.0);
  for (std::size_t i = 0; i < logw.size(); ++i) {
    if (logw[i] != kNegInf) post[i] = std::exp(logw[i] - lse);
  }
  return post;
}

// Posterior mixture of per-task distributions. When every supported
// component is elementwise identical the shared vector is returned verbatim:
// a mixture of equal distributions is that distribution, and returning it
// unchanged keeps downstream divergences exactly zero instead of
// rounding-noise small. Rows for zero-weight tasks may be empty.
inline std::vector<double> mix_distributions(const std::vector<std::vector<double>>& dists,
                                             const std::vector<double>& post) {
  if (dists.size() != post.size()) throw UsageError("mix_distributions: size mismatch");
  int first = -1;
  bool all_same = true;
  for (std::size_t t = 0; t < post.size(); ++t) {
    if (post[t] <= 0.0) continue;
    if (first < 0) {
      first = static_cast<int>(t);
      continue;
    }
    const auto& a = dists[static_cast<std::size_t>(first)];
    const auto& b = dists[t];
    if (a.size() != b.size()) throw UsageError("mix_distributions: component size mismatch");
    for (std::size_t y = 0; y < a.size(); ++y) {
      if (a[y] != b[y]) {
        all_same = false;
        break;
      }
    }
    if (!all_same) break;
  }
  if (first < 0) throw UsageError("mix_distributions: no supported component");
  if (all_same) return dists[static_cast<std::size_t>(first)];
  std::vector<CompensatedSum> acc(dists[static_cast<std::size_t>(first)].size());
  for (std::size_t t = 0; t < post.size(); ++t) {
    if (post[t] <= 0.0) continue;
    const auto& d = dists[t];
    for (std::size_t y = 0; y < acc.size(); ++y) acc[y].add(post[t] * d[y]);
  }
  std::vector<double> out(acc.size());
  for (std::size_t y = 0; y < acc.size(); ++y) out[y] = acc[y].value();
  return out;
}

}  // namespace detail

// Normalized posterior over tasks given a prompt.
inline std::vector<double> posterior(const TaskFamily& family, const Prompt& prompt) {
  return detail::normalize_log_weights(log_posterior_weights(family, prompt));
}

// Answer predictive given a prompt: posterior mixture of answer marginals.
inline std::vector<double> bma_predictive(const TaskFamily& family, const Prompt& prompt) {
  auto post = posterior(family, prompt);
  std::vector<std::vector<double>> dists(post.size());
  for (std::size_t t = 0; t < post.size(); ++t) {
    if (post[t] > 0.0) {
      dists[t] = answer_marginal(family.tasks[t], prompt.query);
    }
  }
  return detail::mix_distributions(dists, post);
}

// Same mixture under whatever keep set the prompt carries; the empty keep
// set is the plain demonstrations-without-reasoning estimator.
inline std::vector<double> truncated_predictive(const TaskFamily& family, const Prompt& prompt) {
  return bma_predictive(family, prompt);
}

// Predictive for the next test step z_h given the prompt and the test steps
// generated so far (partial_test = z_1..z_{h-1}). The posterior treats the
// partial test path as additional evidence on top of the demos and query.
inline std::vector<double> step_predictive(const TaskFamily& family, const Prompt& prompt,
                                           const std::vector<StepSymbol>& partial_test) {
  const int horizon = family.horizon;
  const int h = static_cast<int>(partial_test.size()) + 1;
  if (h > horizon) throw UsageError("step_predictive: partial test path already complete");
  auto logw = log_posterior_weights(family, prompt);
  std::vector<StepSymbol> hist;
  hist.reserve(static_cast<std::size_t>(h));
  hist.push_back(prompt.query);
  hist.insert(hist.end(), partial_test.begin(), partial_test.end());
  for (std::size_t t = 0; t < logw.size(); ++t) {
    if (logw[t] == kNegInf) continue;
    const TaskModel& task = family.tasks[t];
    for (int j = 1; j < h; ++j) {
      const auto& dist = step_distribution(task, j, std::span<const StepSymbol>(hist.data(), static_cast<std::size_t>(j)));
      double p = dist[static_cast<std::size_t>(hist[static_cast<std::size_t>(j)])];
      if (p <= 0.0) {
        logw[t] = kNegInf;
        break;
      }
      logw[t] += std::log(p);
    }
  }
  auto post = detail::normalize_log_weights(logw);
  std::vector<std::vector<double>> dists(post.size());
  for (std::size_t t = 0; t < post.size(); ++t) {
    if (post[t] > 0.0) {
      dists[t] = step_distribution(family.tasks[t], h, hist);
    }
  }
  return detail::mix_distributions(dists, post);
}

// KL from the generating task's answer law to the posterior-mixture
// predictive at the prompt's query symbol.
inline double prompting_error(const TaskFamily& family, TaskId theta_star, const Prompt& prompt) {
  if (theta_star < 0 || theta_star >= family.num_tasks()) {
    throw UsageError("prompting_error: bad task id");
  }
  auto truth = answer_marginal(family.tasks[static_cast<std::size_t>(theta_star)], prompt.query);
  auto pred = bma_predictive(family, prompt);
  return divergence(Divergence::KL, truth, pred);
}

// Ancestral sampling of the test path suffix (z_1..z_H): each step is drawn
// from step_predictive with everything generated so far folded back into the
// posterior. Returned trajectory holds H symbols; the query is not repeated.
inline Trajectory sample_cot_path(const TaskFamily& family, const Prompt& prompt, RngStream& rng) {
  Trajectory suffix;
  suffix.steps.reserve(static_cast<std::size_t>(family.horizon));
  for (int h = 1; h <= family.horizon; ++h) {
    auto pred = step_predictive(family, prompt, suffix.steps);
    suffix.steps.push_back(static_cast<StepSymbol>(rng.sample_discrete(pred)));
  }
  return suffix;
}
}  // namespace cotlab
