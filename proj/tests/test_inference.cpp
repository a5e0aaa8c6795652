#include <cmath>
#include <vector>

#include "doctest.h"

#include "cotlab/inference.hpp"
#include "cotlab/rng.hpp"
#include "test_util.hpp"

using namespace cotlab;

namespace {

Prompt make_prompt(std::vector<Trajectory> demos, std::vector<int> keep, StepSymbol query) {
  Prompt p;
  p.demos = std::move(demos);
  p.keep_indices = std::move(keep);
  p.query = query;
  return p;
}

}  // namespace

TEST_CASE("posterior matches hand-applied Bayes rule") {
  TaskFamily fam = testutil::aprime_c_family();
  Prompt p = make_prompt({Trajectory{{0, 0, 0}}}, {1}, 0);
  // weight(task) = prior * P(demo fully visible) * P(z0 = 0):
  double wa = 0.5 * (0.8 * 0.9 * 0.9) * 0.8;
  double wc = 0.5 * (0.5 * 0.7 * 0.7) * 0.5;
  auto post = posterior(fam, p);
  REQUIRE(post.size() == 2);
  CHECK(post[0] == doctest::Approx(wa / (wa + wc)).epsilon(1e-12));
  CHECK(post[1] == doctest::Approx(wc / (wa + wc)).epsilon(1e-12));
}

TEST_CASE("hidden steps are marginalized out of the posterior") {
  TaskFamily fam = testutil::aprime_c_family();
  // Same demo, but the intermediate step is hidden: the likelihood becomes
  // P(z0=0, z2=0) = sum over z1.
  Prompt p = make_prompt({Trajectory{{0, 0, 0}}}, {}, 0);
  double like_a = 0.8 * (0.9 * 0.9 + 0.1 * 0.1);
  double like_c = 0.5 * (0.7 * 0.7 + 0.3 * 0.6);
  double wa = 0.5 * like_a * 0.8;
  double wc = 0.5 * like_c * 0.5;
  auto post = posterior(fam, p);
  CHECK(post[0] == doctest::Approx(wa / (wa + wc)).epsilon(1e-12));
  // Changing the hidden coordinate must not change anything.
  Prompt p2 = make_prompt({Trajectory{{0, 1, 0}}}, {}, 0);
  auto post2 = posterior(fam, p2);
  CHECK(post2[0] == doctest::Approx(post[0]).epsilon(1e-14));
}

TEST_CASE("bma_predictive is the posterior mixture of answer marginals") {
  TaskFamily fam = testutil::aprime_c_family();
  Prompt p = make_prompt({Trajectory{{0, 0, 0}}}, {1}, 0);
  double wa = 0.5 * (0.8 * 0.9 * 0.9) * 0.8;
  double wc = 0.5 * (0.5 * 0.7 * 0.7) * 0.5;
  double pa = wa / (wa + wc);
  // answer marginals from z0=0: sticky (0.82, 0.18); drifting (0.67, 0.33).
  double drift0 = 0.7 * 0.7 + 0.3 * 0.6;
  auto pred = bma_predictive(fam, p);
  CHECK(pred[0] == doctest::Approx(pa * 0.82 + (1 - pa) * drift0).epsilon(1e-12));
  CHECK(pred[0] + pred[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(truncated_predictive(fam, p) == pred);
}

TEST_CASE("posterior is invariant to demo order") {
  TaskFamily fam = testutil::aprime_c_family();
  Trajectory d1{{0, 0, 0}}, d2{{1, 1, 0}}, d3{{0, 1, 1}};
  Prompt p = make_prompt({d1, d2, d3}, {1}, 0);
  Prompt q = make_prompt({d3, d1, d2}, {1}, 0);
  auto post_p = posterior(fam, p);
  auto post_q = posterior(fam, q);
  for (std::size_t t = 0; t < post_p.size(); ++t) {
    CHECK(post_p[t] == doctest::Approx(post_q[t]).epsilon(1e-12));
  }
}

TEST_CASE("step_predictive with no evidence is the prior mixture of steps") {
  TaskFamily fam = testutil::e1_family();
  Prompt p = make_prompt({}, {}, 0);
  auto s1 = step_predictive(fam, p, {});
  CHECK(s1[0] == doctest::Approx(0.5).epsilon(1e-12));  // 0.5*0.9 + 0.5*0.1
  CHECK(s1[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_THROWS_AS(step_predictive(fam, p, {0, 0}), UsageError);
}

TEST_CASE("chained step predictives reproduce the answer predictive") {
  TaskFamily fam = testutil::aprime_c_family();
  RngStream rng(21, 77);
  Prompt p = sample_prompt(fam, 0, 2, {1}, rng);
  auto pred = bma_predictive(fam, p);
  auto s1 = step_predictive(fam, p, {});
  std::vector<double> total(2, 0.0);
  for (StepSymbol z1 = 0; z1 < 2; ++z1) {
    auto s2 = step_predictive(fam, p, {z1});
    for (int y = 0; y < 2; ++y) {
      total[static_cast<std::size_t>(y)] += s1[static_cast<std::size_t>(z1)] * s2[static_cast<std::size_t>(y)];
    }
  }
  CHECK(total[0] == doctest::Approx(pred[0]).epsilon(1e-10));
  CHECK(total[1] == doctest::Approx(pred[1]).epsilon(1e-10));
}

TEST_CASE("prompting_error vanishes exactly inside one equivalence class") {
  TaskFamily fam = testutil::e1_family();
  RngStream rng(5, 6);
  for (int i = 0; i < 20; ++i) {
    Prompt p = sample_prompt(fam, static_cast<TaskId>(i % 2), i % 4, i % 2 ? std::vector<int>{1} : std::vector<int>{}, rng);
    CHECK(prompting_error(fam, i % 2, p) == 0.0);  // exact zero, not approximate
  }
  CHECK_THROWS_AS(prompting_error(fam, 5, Prompt{}), UsageError);
}

TEST_CASE("prompting_error is positive across separated tasks") {
  TaskFamily fam = testutil::aprime_c_family();
  Prompt p = make_prompt({Trajectory{{0, 0, 0}}}, {1}, 0);
  double err = prompting_error(fam, 0, p);
  CHECK(err > 0.0);
  CHECK(std::isfinite(err));
}

TEST_CASE("impossible prompts raise ImpossiblePromptError") {
  TaskFamily fam;
  fam.alphabet_size = 2;
  fam.horizon = 1;
  fam.prior = {1.0};
  MarkovTask m;
  m.initial = {1.0, 0.0};
  m.transitions = {{{0.5, 0.5}, {0.5, 0.5}}};
  fam.tasks = {m};
  Prompt p = make_prompt({}, {}, 1);  // z0=1 has zero mass
  CHECK_THROWS_AS(posterior(fam, p), ImpossiblePromptError);
}

TEST_CASE("zero-prior tasks never enter the posterior") {
  TaskFamily fam = testutil::aprime_c_family();
  fam.prior = {1.0, 0.0};
  // A demo that favors task C overwhelmingly still cannot resurrect it.
  Prompt p = make_prompt({Trajectory{{1, 0, 1}}}, {1}, 1);
  auto post = posterior(fam, p);
  CHECK(post[0] == doctest::Approx(1.0));
  CHECK(post[1] == 0.0);
}

TEST_CASE("posterior concentrates on the generating task as demos accumulate") {
  TaskFamily fam = testutil::aprime_c_family();
  const std::vector<int> grid{1, 2, 4, 8, 16, 32};
  std::vector<double> avg;
  for (int n : grid) {
    double sum = 0.0;
    const int trials = 200;
    for (int trial = 0; trial < trials; ++trial) {
      RngStream rng(99, derive_stream_id(static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(trial)));
      Prompt p = sample_prompt(fam, 0, n, {1}, rng);
      sum += posterior(fam, p)[0];
    }
    avg.push_back(sum / trials);
  }
  for (std::size_t i = 1; i < avg.size(); ++i) {
    CHECK(avg[i] >= avg[i - 1] - 0.01);  // sampling noise allowance
  }
  CHECK(avg.back() > 0.99);
}

TEST_CASE("mix_distributions returns the shared component verbatim") {
  std::vector<double> shared{0.82, 0.18};
  std::vector<std::vector<double>> dists{shared, shared};
  std::vector<double> post{0.3, 0.7};
  auto mixed = detail::mix_distributions(dists, post);
  CHECK(mixed == shared);
  CHECK(divergence(Divergence::KL, shared, mixed) == 0.0);
}

TEST_CASE("mix_distributions blends distinct components and validates input") {
  std::vector<std::vector<double>> dists{{1.0, 0.0}, {0.0, 1.0}};
  std::vector<double> post{0.25, 0.75};
  auto mixed = detail::mix_distributions(dists, post);
  CHECK(mixed[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(mixed[1] == doctest::Approx(0.75).epsilon(1e-15));
  // Zero-weight rows may be empty and are never read.
  std::vector<std::vector<double>> sparse{{}, {0.4, 0.6}};
  std::vector<double> post2{0.0, 1.0};
  CHECK(detail::mix_distributions(sparse, post2) == std::vector<double>{0.4, 0.6});
  std::vector<double> none{0.0, 0.0};
  CHECK_THROWS_AS(detail::mix_distributions(dists, none), UsageError);
  std::vector<double> short_post{1.0};
  CHECK_THROWS_AS(detail::mix_distributions(dists, short_post), UsageError);
}

TEST_CASE("sampled reasoning paths follow the answer predictive") {
  TaskFamily fam = testutil::aprime_c_family();
  Prompt p = make_prompt({Trajectory{{0, 0, 0}}}, {1}, 0);
  auto pred = bma_predictive(fam, p);
  RngStream rng(31, 41);
  const int n = 50000;
  std::vector<int> counts(2, 0);
  for (int i = 0; i < n; ++i) {
    Trajectory suffix = sample_cot_path(fam, p, rng);
    REQUIRE(suffix.steps.size() == 2);
    counts[static_cast<std::size_t>(suffix.steps.back())]++;
  }
  for (int y = 0; y < 2; ++y) {
    double freq = static_cast<double>(counts[static_cast<std::size_t>(y)]) / n;
    double sd = std::sqrt(pred[static_cast<std::size_t>(y)] * (1 - pred[static_cast<std::size_t>(y)]) / n);
    CHECK(std::abs(freq - pred[static_cast<std::size_t>(y)]) < 4 * sd);
  }
}

TEST_CASE("log_posterior_weights validates the query") {
  TaskFamily fam = testutil::e1_family();
  Prompt p = make_prompt({}, {}, 7);
  CHECK_THROWS_AS(log_posterior_weights(fam, p), UsageError);
}
