#pragma once

// Exact divergences between finite distributions and the structural
// diagnostics built on them: answer-marginal equivalence classes, the
// trajectory-law separation constant lambda (squared Hellinger), per-step
// separations, the answer mode gap, and within-class closeness constants.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "cotlab/common.hpp"
#include "cotlab/latent_model.hpp"

namespace cotlab {

enum class Divergence { KL, TV, HellingerSq, ChiSq };

// Pointwise-exact divergence between two same-support vectors. Conventions:
// 0*log 0 = 0; KL and chi-square return +inf where q = 0 < p.
inline double divergence(Divergence kind, std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw UsageError("divergence: support size mismatch");
  switch (kind) {
    case Divergence::KL: {
      double s = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        if (q[i] <= 0.0) return kPosInf;
        s += p[i] * std::log(p[i] / q[i]);
      }
      return s;
    }
    case Divergence::TV: {
      double s = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
      return 0.5 * s;
    }
    case Divergence::HellingerSq: {
      double bc = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) bc += std::sqrt(p[i] * q[i]);
      return 1.0 - bc;
    }
    case Divergence::ChiSq: {
      double s = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        double d = p[i] - q[i];
        if (q[i] <= 0.0) {
          if (d == 0.0) continue;
          return kPosInf;
        }
        s += d * d / q[i];
      }
      return s;
    }
  }
  throw UsageError("divergence: unknown kind");
}

inline double divergence(Divergence kind, const std::vector<double>& p, const std::vector<double>& q) {
  return divergence(kind, std::span<const double>(p), std::span<const double>(q));
}

// ---------------------------------------------------------------------------
// Trajectory laws
// ---------------------------------------------------------------------------

// Index of a full trajectory in the enumeration order used by
// trajectory_distribution: z_0 most significant, base |L|.
inline std::int64_t trajectory_index(const Trajectory& traj, int alphabet) {
  std::int64_t idx = 0;
  for (StepSymbol s : traj.steps) idx = idx * alphabet + s;
  return idx;
}

// Exact joint law of z_{0:H} as a vector of length |L|^{H+1}.
inline std::vector<double> trajectory_distribution(const TaskModel& task) {
  int horizon = task_horizon(task);
  int alphabet = task_alphabet(task);
  std::int64_t count = checked_ipow(alphabet, horizon + 1);
  std::vector<double> out(static_cast<std::size_t>(count));
  Trajectory traj;
  traj.steps.assign(static_cast<std::size_t>(horizon + 1), 0);
  for (std::int64_t idx = 0; idx < count; ++idx) {
    std::int64_t rem = idx;
    for (int h = horizon; h >= 0; --h) {
      traj.steps[static_cast<std::size_t>(h)] = static_cast<StepSymbol>(rem % alphabet);
      rem /= alphabet;
    }
    double lp = trajectory_log_prob(task, traj);
    out[static_cast<std::size_t>(idx)] = lp == kNegInf ? 0.0 : std::exp(lp);
  }
  return out;
}

// Joint law of the prefix z_{0:h} (length |L|^{h+1}).
inline std::vector<double> prefix_distribution(const TaskModel& task, int h) {
  int alphabet = task_alphabet(task);
  std::int64_t count = checked_ipow(alphabet, h + 1);
  std::vector<double> out(static_cast<std::size_t>(count));
  std::vector<StepSymbol> steps(static_cast<std::size_t>(h + 1), 0);
  std::vector<int> positions(static_cast<std::size_t>(h + 1));
  std::iota(positions.begin(), positions.end(), 0);
  for (std::int64_t idx = 0; idx < count; ++idx) {
    std::int64_t rem = idx;
    for (int k = h; k >= 0; --k) {
      steps[static_cast<std::size_t>(k)] = static_cast<StepSymbol>(rem % alphabet);
      rem /= alphabet;
    }
    double lp = visible_log_prob(task, positions, steps);
    out[static_cast<std::size_t>(idx)] = lp == kNegInf ? 0.0 : std::exp(lp);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Equivalence classes: theta ~ theta' iff their answer marginals agree for
// every (z0, y) within tol (sup norm), closed transitively.
// ---------------------------------------------------------------------------

inline constexpr double kEquivalenceTol = 1e-9;

inline std::vector<std::vector<TaskId>> equivalence_classes(const TaskFamily& family,
                                                            double tol = kEquivalenceTol) {
  int n = family.num_tasks();
  int L = family.alphabet_size;
  std::vector<std::vector<std::vector<double>>> marg(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) {
    marg[static_cast<std::size_t>(t)].reserve(static_cast<std::size_t>(L));
    for (int z0 = 0; z0 < L; ++z0) {
      marg[static_cast<std::size_t>(t)].push_back(answer_marginal(family.tasks[static_cast<std::size_t>(t)], z0));
    }
  }
  auto close = [&](int a, int b) {
    for (int z0 = 0; z0 < L; ++z0) {
      for (int y = 0; y < L; ++y) {
        double d = std::abs(marg[static_cast<std::size_t>(a)][static_cast<std::size_t>(z0)][static_cast<std::size_t>(y)] -
                            marg[static_cast<std::size_t>(b)][static_cast<std::size_t>(z0)][static_cast<std::size_t>(y)]);
        if (d > tol) return false;
      }
    }
    return true;
  };
  // Union-find over the "close" relation gives the transitive closure.
  std::vector<int> parent(static_cast<std::size_t>(n));
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  };
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      if (close(a, b)) {
        int ra = find(a), rb = find(b);
        if (ra != rb) parent[static_cast<std::size_t>(std::max(ra, rb))] = std::min(ra, rb);
      }
    }
  }
  std::vector<std::vector<TaskId>> classes;
  std::vector<int> root_to_class(static_cast<std::size_t>(n), -1);
  for (int t = 0; t < n; ++t) {
    int r = find(t);
    if (root_to_class[static_cast<std::size_t>(r)] < 0) {
      root_to_class[static_cast<std::size_t>(r)] = static_cast<int>(classes.size());
      classes.emplace_back();
    }
    classes[static_cast<std::size_t>(root_to_class[static_cast<std::size_t>(r)])].push_back(t);
  }
  return classes;
}

inline const std::vector<TaskId>& class_of(const std::vector<std::vector<TaskId>>& classes, TaskId theta) {
  for (const auto& c : classes) {
    if (std::find(c.begin(), c.end(), theta) != c.end()) return c;
  }
  throw UsageError("class_of: task id not present in partition");
}

// ---------------------------------------------------------------------------
// Separation report
// ---------------------------------------------------------------------------

struct SeparationReport {
  std::vector<std::vector<TaskId>> classes;
  double lambda = kPosInf;               // min over Theta-complement of H^2(trajectory laws)
  std::vector<double> lambda_per_step;   // min over theta != theta* of H^2(prefix laws), h in [1..H]
  double alpha = 0.0;                    // within-class sup |log-likelihood ratio| over trajectories
  double alpha0 = 0.0;                   // same over z0 marginals
  StepSymbol mode = 0;                   // answer mode y* at the worst-case query
  double mode_gap = 0.0;                 // gap there (Assumption-sc epsilon)
};

// Mode and mode gap of a finite distribution: eps = p[y*] - max_{y != y*} p[y],
// with exact ties reported as gap 0 on the smallest-id mode.
inline std::pair<StepSymbol, double> mode_gap(std::span<const double> p) {
  if (p.size() < 2) throw UsageError("mode_gap: support must have >= 2 points");
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  double second = kNegInf;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i != best) second = std::max(second, p[i]);
  }
  return {static_cast<StepSymbol>(best), p[best] - second};
}

inline std::pair<StepSymbol, double> mode_gap(const std::vector<double>& p) {
  return mode_gap(std::span<const double>(p));
}

// lambda = min over tasks outside Theta_eq(theta*) of the squared Hellinger
// distance between full trajectory laws; +inf when the complement is empty
// (prompting error is exactly zero then). Per-step lambda_h ranges over all
// theta != theta* by definition.
inline SeparationReport separation_lambda(const TaskFamily& family, TaskId theta_star,
                                          bool per_step = false, double tol = kEquivalenceTol) {
  if (theta_star < 0 || theta_star >= family.num_tasks()) throw UsageError("separation_lambda: bad task id");
  SeparationReport rep;
  rep.classes = equivalence_classes(family, tol);
  const auto& eq = class_of(rep.classes, theta_star);

  std::vector<std::vector<double>> laws(static_cast<std::size_t>(family.num_tasks()));
  for (int t = 0; t < family.num_tasks(); ++t) {
    laws[static_cast<std::size_t>(t)] = trajectory_distribution(family.tasks[static_cast<std::size_t>(t)]);
  }
  rep.lambda = kPosInf;
  for (int t = 0; t < family.num_tasks(); ++t) {
    if (std::find(eq.begin(), eq.end(), t) != eq.end()) continue;
    double h2 = divergence(Divergence::HellingerSq, laws[static_cast<std::size_t>(theta_star)],
                           laws[static_cast<std::size_t>(t)]);
    rep.lambda = std::min(rep.lambda, h2);
  }

  if (per_step) {
    rep.lambda_per_step.assign(static_cast<std::size_t>(family.horizon), kPosInf);
    for (int h = 1; h <= family.horizon; ++h) {
      auto p_star = prefix_distribution(family.tasks[static_cast<std::size_t>(theta_star)], h);
      double lam = kPosInf;
      for (int t = 0; t < family.num_tasks(); ++t) {
        if (t == theta_star) continue;
        auto p_t = prefix_distribution(family.tasks[static_cast<std::size_t>(t)], h);
        lam = std::min(lam, divergence(Divergence::HellingerSq, p_star, p_t));
      }
      rep.lambda_per_step[static_cast<std::size_t>(h - 1)] = lam;
    }
  }
  return rep;
}

// Closeness constants: alpha is the largest absolute log-likelihood-ratio of
// full trajectories between any two tasks sharing a class, restricted to
// trajectories with positive probability under both (mixed support gives
// +inf); alpha0 is the analogous constant for the z0 marginals.
inline std::pair<double, double> closeness_constants(const TaskFamily& family,
                                                     const std::vector<std::vector<TaskId>>& classes) {
  double alpha = 0.0;
  double alpha0 = 0.0;
  for (const auto& cls : classes) {
    for (std::size_t i = 0; i < cls.size(); ++i) {
      for (std::size_t j = i + 1; j < cls.size(); ++j) {
        const TaskModel& a = family.tasks[static_cast<std::size_t>(cls[i])];
        const TaskModel& b = family.tasks[static_cast<std::size_t>(cls[j])];
        auto law_a = trajectory_distribution(a);
        auto law_b = trajectory_distribution(b);
        for (std::size_t k = 0; k < law_a.size(); ++k) {
          bool za = law_a[k] <= 0.0, zb = law_b[k] <= 0.0;
          if (za && zb) continue;
          if (za != zb) {
            alpha = kPosInf;
            continue;
          }
          alpha = std::max(alpha, std::abs(std::log(law_a[k]) - std::log(law_b[k])));
        }
        const auto& ia = initial_distribution(a);
        const auto& ib = initial_distribution(b);
        for (std::size_t k = 0; k < ia.size(); ++k) {
          bool za = ia[k] <= 0.0, zb = ib[k] <= 0.0;
          if (za && zb) continue;
          if (za != zb) {
            alpha0 = kPosInf;
            continue;
          }
          alpha0 = std::max(alpha0, std::abs(std::log(ia[k]) - std::log(ib[k])));
        }
      }
    }
  }
  return {alpha, alpha0};
}

// Full report: separation, closeness, and the answer mode gap of theta* at
// the worst-case query (minimum gap over z0 with positive initial mass;
// ties resolved toward the smallest z0).
inline SeparationReport separation_report(const TaskFamily& family, TaskId theta_star,
                                          double tol = kEquivalenceTol) {
  SeparationReport rep = separation_lambda(family, theta_star, /*per_step=*/true, tol);
  auto cc = closeness_constants(family, rep.classes);
  rep.alpha = cc.first;
  rep.alpha0 = cc.second;
  const TaskModel& task = family.tasks[static_cast<std::size_t>(theta_star)];
  const auto& init = initial_distribution(task);
  bool seen = false;
  for (int z0 = 0; z0 < family.alphabet_size; ++z0) {
    if (init[static_cast<std::size_t>(z0)] <= 0.0) continue;
    auto [m, g] = mode_gap(answer_marginal(task, z0));
    if (!seen || g < rep.mode_gap) {
      rep.mode = m;
      rep.mode_gap = g;
      seen = true;
    }
  }
  return rep;
}

inline nlohmann::json separation_report_to_json(const SeparationReport& rep) {
  nlohmann::json j;
  j["classes"] = rep.classes;
  j["lambda"] = rep.lambda == kPosInf ? nlohmann::json("inf") : nlohmann::json(rep.lambda);
  j["lambda_per_step"] = nlohmann::json::array();
  for (double l : rep.lambda_per_step) {
    j["lambda_per_step"].push_back(l == kPosInf ? nlohmann::json("inf") : nlohmann::json(l));
  }
  j["alpha"] = rep.alpha == kPosInf ? nlohmann::json("inf") : nlohmann::json(rep.alpha);
  j["alpha0"] = rep.alpha0 == kPosInf ? nlohmann::json("inf") : nlohmann::json(rep.alpha0);
  j["mode"] = rep.mode;
  j["mode_gap"] = rep.mode_gap;
  return j;
}

}  // namespace cotlab
