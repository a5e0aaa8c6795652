#pragma once

// Hand-built families shared by the unit tests. Values are chosen so that
// closed-form quantities (answer marginals, divergences, posteriors) can be
// recomputed by hand in the assertions.

#include <string>
#include <utility>
#include <vector>

#include "cotlab/latent_model.hpp"

namespace testutil {

inline std::string data_path(const std::string& rel) {
  return std::string(COTLAB_SOURCE_DIR) + "/" + rel;
}

// Binary Markov task whose every step keeps the current symbol with
// probability `stay`.
inline cotlab::MarkovTask stay_markov(double stay, std::vector<double> init, int horizon) {
  cotlab::MarkovTask m;
  m.initial = std::move(init);
  for (int h = 0; h < horizon; ++h) {
    m.transitions.push_back({{stay, 1.0 - stay}, {1.0 - stay, stay}});
  }
  return m;
}

// Two-task family {A, B}: both uniform over z0, A keeps its symbol with 0.9,
// B with 0.1. Their answer marginals coincide (0.82 on the diagonal), so the
// family has a single answer-equivalence class.
//
// The rows are spelled out as literals rather than built via stay_markov's
// `1.0 - stay`: fl(1.0 - 0.9) != fl(0.1), and that one-ulp input asymmetry
// would leave the two tasks' answer marginals unequal at the bit level,
// defeating the exact-zero mixture fast path this family exists to exercise.
// With literal rows, B's parameters are A's with the symbols relabeled, so
// both marginals come out of the same floating-point products and sums.
inline cotlab::TaskFamily e1_family() {
  cotlab::TaskFamily f;
  f.alphabet_size = 2;
  f.horizon = 2;
  f.prior = {0.5, 0.5};
  cotlab::MarkovTask a;
  a.initial = {0.5, 0.5};
  a.transitions = {{{0.9, 0.1}, {0.1, 0.9}}, {{0.9, 0.1}, {0.1, 0.9}}};
  cotlab::MarkovTask b;
  b.initial = {0.5, 0.5};
  b.transitions = {{{0.1, 0.9}, {0.9, 0.1}}, {{0.1, 0.9}, {0.9, 0.1}}};
  f.tasks.push_back(std::move(a));
  f.tasks.push_back(std::move(b));
  return f;
}

// Binary Markov task with the same asymmetric transition matrix at every
// step: row 0 = (0.7, 0.3), row 1 = (0.6, 0.4).
inline cotlab::MarkovTask drift_markov(std::vector<double> init, int horizon) {
  cotlab::MarkovTask m;
  m.initial = std::move(init);
  for (int h = 0; h < horizon; ++h) {
    m.transitions.push_back({{0.7, 0.3}, {0.6, 0.4}});
  }
  return m;
}

// Two well-separated tasks: A' (sticky, biased start) and C (drifting,
// uniform start). Used for error-decay and dominance checks.
inline cotlab::TaskFamily aprime_c_family() {
  cotlab::TaskFamily f;
  f.alphabet_size = 2;
  f.horizon = 2;
  f.prior = {0.5, 0.5};
  f.tasks.push_back(stay_markov(0.9, {0.8, 0.2}, 2));
  f.tasks.push_back(drift_markov({0.5, 0.5}, 2));
  return f;
}

// Tabular re-encoding of a binary Markov task (same conditionals, prefix
// indexed): an independent route to every likelihood the Markov code path
// computes.
inline cotlab::TabularTask tabular_of_markov(const cotlab::MarkovTask& m) {
  cotlab::TabularTask t;
  t.initial = m.initial;
  const int L = static_cast<int>(m.initial.size());
  int rows = 1;
  for (std::size_t h = 0; h < m.transitions.size(); ++h) {
    rows *= L;
    std::vector<std::vector<double>> table;
    table.reserve(static_cast<std::size_t>(rows));
    for (int code = 0; code < rows; ++code) {
      int last = code % L;  // least-significant digit is the latest symbol
      table.push_back(m.transitions[h][static_cast<std::size_t>(last)]);
    }
    t.tables.push_back(std::move(table));
  }
  return t;
}

}  // namespace testutil
