#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "doctest.h"

#include "cotlab/inference.hpp"
#include "cotlab/strategies.hpp"
#include "test_util.hpp"

using namespace cotlab;

TEST_CASE("sc_bound frozen value and edge cases") {
  double eps = 0.64;
  double expected = 2.0 * 2 * std::exp(-3.0 * 200 * eps * eps / (24.0 + 8.0 * eps));
  CHECK(sc_bound(2, 200, eps) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(expected < 1e-3);
  CHECK(sc_bound(2, 10, 0.0) == 1.0);
  CHECK(sc_bound(2, 10, -0.5) == 1.0);
  CHECK_THROWS_AS(sc_bound(1, 10, 0.5), UsageError);
  CHECK_THROWS_AS(sc_bound(2, 0, 0.5), UsageError);
}

TEST_CASE("sc_cot with one sample returns that sample's answer") {
  TaskFamily fam = testutil::aprime_c_family();
  Prompt p;
  p.demos = {Trajectory{{0, 0, 0}}};
  p.keep_indices = {1};
  p.query = 0;
  RngStream vote_rng(10, 20);
  RngStream path_rng(10, 20);  // identical stream: replays the same path
  ScResult res = sc_cot(fam, p, 1, vote_rng);
  Trajectory suffix = sample_cot_path(fam, p, path_rng);
  CHECK(res.winner == suffix.steps.back());
  CHECK(std::accumulate(res.votes.begin(), res.votes.end(), 0) == 1);
}

TEST_CASE("sc_cot vote histogram sums to K and the winner is its argmax") {
  TaskFamily fam = testutil::aprime_c_family();
  Prompt p;
  p.query = 0;
  RngStream rng(11, 21);
  const int K = 101;
  ScResult res = sc_cot(fam, p, K, rng);
  CHECK(std::accumulate(res.votes.begin(), res.votes.end(), 0) == K);
  int best = 0;
  for (int y = 1; y < static_cast<int>(res.votes.size()); ++y) {
    if (res.votes[static_cast<std::size_t>(y)] > res.votes[static_cast<std::size_t>(best)]) best = y;
  }
  CHECK(res.winner == best);
  CHECK_THROWS_AS(sc_cot(fam, p, 0, rng), UsageError);
}

TEST_CASE("sc_cot recovers the predictive mode with many samples") {
  TaskFamily fam = testutil::aprime_c_family();
  Prompt p;
  p.demos = {Trajectory{{0, 0, 0}}, Trajectory{{0, 0, 0}}};
  p.keep_indices = {1};
  p.query = 0;
  auto [want, gap] = mode_gap(bma_predictive(fam, p));
  CHECK(gap > 0.2);
  int hits = 0;
  for (int i = 0; i < 50; ++i) {
    RngStream rng(12, derive_stream_id(hash_label("sc_mode"), static_cast<std::uint64_t>(i)));
    if (sc_cot(fam, p, 301, rng).winner == want) ++hits;
  }
  CHECK(hits == 50);  // the vote bound at K=301 is astronomically small
}

TEST_CASE("sc_n_star is zero without competing classes and finite with them") {
  TaskFamily e1 = testutil::e1_family();
  CHECK(sc_n_star(e1, 0, 0.25) == 0.0);
  TaskFamily ac = testutil::aprime_c_family();
  SeparationReport rep = separation_lambda(ac, 0);
  double expected = (std::log(1.0 / 0.5) + std::log(1.0 / 0.25)) / rep.lambda;
  CHECK(sc_n_star(ac, 0, 0.25) == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(sc_n_star(ac, 0, 0.0), UsageError);
  CHECK_THROWS_AS(sc_n_star(ac, 0, 1.0), UsageError);
}

TEST_CASE("oracle_value_fn scores the greedy path 1 and off-path halved") {
  TaskFamily fam = testutil::e1_family();
  ValueFunction vf = oracle_value_fn(fam, 0, 0);
  CHECK(vf.optimal_path.steps == std::vector<StepSymbol>{0, 0, 0});
  CHECK(vf({0}) == 1.0);
  CHECK(vf({0, 0}) == 1.0);
  CHECK(vf({0, 0, 0}) == 1.0);
  CHECK(vf({1}) == doctest::Approx(0.5 * 0.5));       // half the initial prob
  CHECK(vf({0, 1}) == doctest::Approx(0.5 * 0.1));    // half the transition prob
  CHECK(vf({0, 1, 1}) == doctest::Approx(0.5 * 0.9));
  CHECK_THROWS_AS(vf({}), UsageError);
  CHECK_THROWS_AS(vf({0, 0, 0, 0}), UsageError);
  CHECK_THROWS_AS(oracle_value_fn(fam, 5, 0), UsageError);
  CHECK_THROWS_AS(oracle_value_fn(fam, 0, 9), UsageError);
}

TEST_CASE("optimal_step_probs reads the conditionals along the path") {
  TaskFamily fam = testutil::e1_family();
  ValueFunction vf = oracle_value_fn(fam, 0, 0);
  auto probs = optimal_step_probs(fam.tasks[0], vf.optimal_path);
  REQUIRE(probs.size() == 2);
  CHECK(probs[0] == doctest::Approx(0.9));
  CHECK(probs[1] == doctest::Approx(0.9));
}

TEST_CASE("tot_bound hand values") {
  std::vector<double> probs{0.6, 0.7};
  CHECK(tot_bound(probs, 0.0, 1) == doctest::Approx(0.4 + 0.3).epsilon(1e-14));
  CHECK(tot_bound(probs, 0.0, 2) == doctest::Approx(0.16 + 0.09).epsilon(1e-14));
  CHECK(tot_bound(probs, 1.0, 5) == doctest::Approx(2.0).epsilon(1e-14));
  CHECK_THROWS_AS(tot_bound(probs, 0.0, 0), UsageError);
  std::vector<double> bad{1.2};
  CHECK_THROWS_AS(tot_bound(bad, 0.0, 1), UsageError);
}

TEST_CASE("tot_n_star sanity") {
  TaskFamily ac = testutil::aprime_c_family();
  double n = tot_n_star(ac, 0, 0.25);
  CHECK(n >= 0.0);
  CHECK(std::isfinite(n));
  CHECK_THROWS_AS(tot_n_star(ac, 0, 0.0), UsageError);
}

TEST_CASE("beam-1 single-sample search succeeds at the task's greedy rate") {
  TaskFamily fam = load_task_family(testutil::data_path("data/families/tot_family.json"));
  ValueFunction vf = oracle_value_fn(fam, 0, 0);
  CHECK(vf.optimal_path.steps == std::vector<StepSymbol>{0, 0, 0});
  Prompt p;
  p.query = 0;
  const int runs = 10000;
  int hits = 0;
  std::vector<TaskId> eq{0};
  double worst_offclass = 0.0;
  for (int i = 0; i < runs; ++i) {
    RngStream rng(13, derive_stream_id(hash_label("tot_mc"), static_cast<std::uint64_t>(i)));
    TotStats stats;
    Trajectory out = tot_bfs(fam, p, vf, 1, 1, rng, &eq, &stats);
    REQUIRE(out.steps.size() == 3);
    CHECK(out.steps[0] == 0);
    worst_offclass = std::max(worst_offclass, stats.max_offclass_mass);
    if (out.steps == vf.optimal_path.steps) ++hits;
  }
  CHECK(worst_offclass == 0.0);  // single task: nothing off-class
  // One sample per level: success iff both greedy steps are drawn, 0.6 * 0.7.
  double pstar = 0.42;
  double sd = std::sqrt(pstar * (1 - pstar) / runs);
  CHECK(std::abs(static_cast<double>(hits) / runs - pstar) < 4 * sd);
}

TEST_CASE("wider sampling pushes the search failure under its bound") {
  TaskFamily fam = load_task_family(testutil::data_path("data/families/tot_family.json"));
  ValueFunction vf = oracle_value_fn(fam, 0, 0);
  Prompt p;
  p.query = 0;
  auto probs = optimal_step_probs(fam.tasks[0], vf.optimal_path);
  const int runs = 4000;
  for (int K : {2, 5}) {
    int fails = 0;
    for (int i = 0; i < runs; ++i) {
      RngStream rng(14, derive_stream_id(hash_label("tot_k"), static_cast<std::uint64_t>(K),
                                         static_cast<std::uint64_t>(i)));
      if (tot_bfs(fam, p, vf, K, 1, rng).steps != vf.optimal_path.steps) ++fails;
    }
    double bound = tot_bound(probs, 0.0, K);
    double rate = static_cast<double>(fails) / runs;
    CHECK(rate <= bound + 3 * std::sqrt(bound * (1 - bound) / runs) + 1e-9);
  }
}

TEST_CASE("tot_bfs argument validation") {
  TaskFamily fam = testutil::e1_family();
  ValueFunction vf = oracle_value_fn(fam, 0, 0);
  Prompt p;
  p.query = 0;
  RngStream rng(1, 1);
  CHECK_THROWS_AS(tot_bfs(fam, p, vf, 0, 1, rng), UsageError);
  CHECK_THROWS_AS(tot_bfs(fam, p, vf, 1, 0, rng), UsageError);
  Prompt bad_query;
  bad_query.query = 5;
  CHECK_THROWS_AS(tot_bfs(fam, bad_query, vf, 1, 1, rng), UsageError);
  Prompt bad_demo;
  bad_demo.query = 0;
  bad_demo.demos = {Trajectory{{0, 0}}};
  CHECK_THROWS_AS(tot_bfs(fam, bad_demo, vf, 1, 1, rng), UsageError);
}

// ---------------------------------------------------------------------------
// Selection-inference
// ---------------------------------------------------------------------------

namespace {

// Single deterministic task: z0 = 0, one mask per step, inference flips the
// observed symbol.
SIFamily tiny_si() {
  SIFamily fam;
  fam.alphabet_size = 2;
  fam.horizon = 1;
  fam.prior = {1.0};
  fam.allowed_masks = {{{0}}};
  SITask task;
  task.initial = {1.0, 0.0};
  task.selection = {{1.0}};
  task.inference = {{{{0.0, 1.0}, {1.0, 0.0}}}};
  fam.tasks = {task};
  return fam;
}

// Independent route to the final-symbol law of the two-posterior chain:
// direct summation over every (mask, symbol) path using the raw tables.
std::vector<double> si_chain_law(const SIFamily& fam, const std::vector<SelectionExample>& s_se,
                                 const std::vector<InferenceExample>& s_in, StepSymbol query) {
  auto post_se = si_selection_posterior(fam, s_se, query);
  auto post_in = si_inference_posterior(fam, s_in);
  const int L = fam.alphabet_size;
  std::vector<double> law(static_cast<std::size_t>(L), 0.0);
  std::vector<StepSymbol> hist{query};
  std::function<void(int, double)> walk = [&](int h, double weight) {
    if (h > fam.horizon) {
      law[static_cast<std::size_t>(hist.back())] += weight;
      return;
    }
    const auto& masks = fam.allowed_masks[static_cast<std::size_t>(h - 1)];
    for (std::size_t m = 0; m < masks.size(); ++m) {
      double pm = 0.0;
      for (int t = 0; t < fam.num_tasks(); ++t) {
        pm += post_se[static_cast<std::size_t>(t)] *
              fam.tasks[static_cast<std::size_t>(t)].selection[static_cast<std::size_t>(h - 1)][m];
      }
      if (pm <= 0.0) continue;
      int code = 0;
      for (int idx : masks[m]) code = code * L + hist[static_cast<std::size_t>(idx)];
      for (int z = 0; z < L; ++z) {
        double pz = 0.0;
        for (int t = 0; t < fam.num_tasks(); ++t) {
          pz += post_in[static_cast<std::size_t>(t)] *
                fam.tasks[static_cast<std::size_t>(t)]
                    .inference[static_cast<std::size_t>(h - 1)][m][static_cast<std::size_t>(code)]
                              [static_cast<std::size_t>(z)];
        }
        if (pz <= 0.0) continue;
        hist.push_back(z);
        walk(h + 1, weight * pm * pz);
        hist.pop_back();
      }
    }
  };
  walk(1, 1.0);
  return law;
}

}  // namespace

TEST_CASE("si demo sampling follows a deterministic task exactly") {
  SIFamily fam = tiny_si();
  RngStream rng(2, 3);
  SIDemo demo = si_sample_demo(fam, 0, rng);
  CHECK(demo.traj.steps == std::vector<StepSymbol>{0, 1});
  CHECK(demo.masks == std::vector<int>{0});
  CHECK_THROWS_AS(si_sample_demo(fam, 3, rng), UsageError);
}

TEST_CASE("selection and inference examples transcribe the demo") {
  SIFamily fam = load_si_family(testutil::data_path("data/families/si_two_task.json"));
  RngStream rng(4, 5);
  SIDemo demo = si_sample_demo(fam, 0, rng);
  auto sel = selection_examples({demo});
  auto inf = inference_examples(fam, {demo});
  REQUIRE(sel.size() == 2);
  REQUIRE(inf.size() == 2);
  for (int h = 1; h <= 2; ++h) {
    CHECK(sel[static_cast<std::size_t>(h - 1)].step == h);
    CHECK(sel[static_cast<std::size_t>(h - 1)].mask_idx == demo.masks[static_cast<std::size_t>(h - 1)]);
    CHECK(inf[static_cast<std::size_t>(h - 1)].next == demo.traj.steps[static_cast<std::size_t>(h)]);
  }
}

TEST_CASE("selection posterior applies Bayes rule to mask choices") {
  SIFamily fam = load_si_family(testutil::data_path("data/families/si_two_task.json"));
  // One observed selection: step 2 used mask 0. Query z0 = 0.
  std::vector<SelectionExample> s_se{{2, 0}};
  auto post = si_selection_posterior(fam, s_se, 0);
  double w0 = 0.5 * 0.9 * 0.7;  // prior * P(mask 0 at step 2) * P(z0=0)
  double w1 = 0.5 * 0.3 * 0.4;
  CHECK(post[0] == doctest::Approx(w0 / (w0 + w1)).epsilon(1e-12));
  CHECK_THROWS_AS(si_selection_posterior(fam, s_se, 9), UsageError);
}

TEST_CASE("inference posterior applies Bayes rule to step outcomes") {
  SIFamily fam = load_si_family(testutil::data_path("data/families/si_two_task.json"));
  // Observed: step 1 under mask 0, sub-history code 0, produced symbol 0.
  std::vector<InferenceExample> s_in{{1, 0, 0, 0}};
  auto post = si_inference_posterior(fam, s_in);
  double w0 = 0.5 * 0.85;
  double w1 = 0.5 * 0.6;
  CHECK(post[0] == doctest::Approx(w0 / (w0 + w1)).epsilon(1e-12));
}

TEST_CASE("si_predictive equals the direct chain law") {
  SIFamily fam = load_si_family(testutil::data_path("data/families/si_two_task.json"));
  for (int n : {0, 1, 3}) {
    RngStream rng(6, derive_stream_id(hash_label("si_demos"), static_cast<std::uint64_t>(n)));
    std::vector<SIDemo> demos;
    for (int i = 0; i < n; ++i) demos.push_back(si_sample_demo(fam, 0, rng));
    auto s_se = selection_examples(demos);
    auto s_in = inference_examples(fam, demos);
    for (StepSymbol q = 0; q < 2; ++q) {
      auto fast = si_predictive(fam, s_se, s_in, q);
      auto slow = si_chain_law(fam, s_se, s_in, q);
      REQUIRE(fast.size() == slow.size());
      double sum = 0.0;
      for (std::size_t y = 0; y < fast.size(); ++y) {
        CHECK(fast[y] == doctest::Approx(slow[y]).epsilon(1e-12));
        sum += fast[y];
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("si_generate sampling frequencies match si_predictive") {
  SIFamily fam = load_si_family(testutil::data_path("data/families/si_two_task.json"));
  RngStream demo_rng(7, 8);
  std::vector<SIDemo> demos{si_sample_demo(fam, 0, demo_rng)};
  auto s_se = selection_examples(demos);
  auto s_in = inference_examples(fam, demos);
  auto law = si_predictive(fam, s_se, s_in, 0);
  const int n = 20000;
  std::vector<int> counts(2, 0);
  for (int i = 0; i < n; ++i) {
    RngStream rng(8, derive_stream_id(hash_label("si_mc"), static_cast<std::uint64_t>(i)));
    SiGenerated g = si_generate(fam, s_se, s_in, 0, rng);
    REQUIRE(g.suffix.steps.size() == 2);
    counts[static_cast<std::size_t>(g.suffix.steps.back())]++;
  }
  for (int y = 0; y < 2; ++y) {
    double freq = static_cast<double>(counts[static_cast<std::size_t>(y)]) / n;
    double sd = std::sqrt(law[static_cast<std::size_t>(y)] * (1 - law[static_cast<std::size_t>(y)]) / n);
    CHECK(std::abs(freq - law[static_cast<std::size_t>(y)]) < 4 * sd);
  }
}

TEST_CASE("si_answer_marginal singles out one task") {
  SIFamily fam = load_si_family(testutil::data_path("data/families/si_two_task.json"));
  // Hand value for task 1 from z0=0: step-1 symbol z1 ~ (0.6, 0.4) under mask
  // 0; step 2 mixes masks (0.3, 0.7) and flips accordingly.
  auto law = si_answer_marginal(fam, 1, 0);
  double by_hand0 = 0.0;
  const auto& t1 = fam.tasks[1];
  for (int z1 = 0; z1 < 2; ++z1) {
    double p1 = t1.inference[0][0][0][static_cast<std::size_t>(z1)];
    // step 2, mask 0 looks at z0=0; mask 1 looks at z1.
    double p_y0 = t1.selection[1][0] * t1.inference[1][0][0][0] +
                  t1.selection[1][1] * t1.inference[1][1][static_cast<std::size_t>(z1)][0];
    by_hand0 += p1 * p_y0;
  }
  CHECK(law[0] == doctest::Approx(by_hand0).epsilon(1e-12));
  CHECK(law[0] + law[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(si_answer_marginal(fam, 5, 0), UsageError);
}

TEST_CASE("si separations are positive for the shipped two-task family") {
  SIFamily fam = load_si_family(testutil::data_path("data/families/si_two_task.json"));
  SiSeparations sep = si_separations(fam, 0);
  CHECK(sep.lambda_s > 0.0);
  CHECK(sep.lambda_i > 0.0);
  CHECK(sep.lambda_q > 0.0);
  double hq = divergence(Divergence::HellingerSq, std::vector<double>{0.7, 0.3},
                         std::vector<double>{0.4, 0.6});
  CHECK(sep.lambda_q == doctest::Approx(hq).epsilon(1e-12));
}

TEST_CASE("si family validation rejects malformed tables") {
  SIFamily fam = tiny_si();
  fam.tasks[0].selection[0] = {0.5, 0.5};  // width must match the mask count
  CHECK_THROWS_AS(validate_si_family(fam), ValidationError);
  SIFamily fam2 = tiny_si();
  fam2.allowed_masks[0][0] = {0, 0};  // not strictly increasing
  CHECK_THROWS_AS(validate_si_family(fam2), ValidationError);
}
