#pragma once

// City-longitude arithmetic probe: renders the six prompt styles, parses
// integer answers from completions, and scores accuracy against either an
// OpenAI-compatible chat endpoint or a built-in oracle mock.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "cotlab/common.hpp"
#include "cotlab/rng.hpp"

namespace cotlab {

enum class PromptStyle { kIcl, kInformativeCot, kPiA, kPiB, kPiC, kPiD };

inline const std::vector<std::pair<PromptStyle, std::string>>& prompt_style_names() {
  static const std::vector<std::pair<PromptStyle, std::string>> names = {
      {PromptStyle::kIcl, "ICL"},       {PromptStyle::kInformativeCot, "InformativeCoT"},
      {PromptStyle::kPiA, "PI_a"},      {PromptStyle::kPiB, "PI_b"},
      {PromptStyle::kPiC, "PI_c"},      {PromptStyle::kPiD, "PI_d"},
  };
  return names;
}

inline std::string prompt_style_name(PromptStyle style) {
  for (const auto& [s, name] : prompt_style_names()) {
    if (s == style) return name;
  }
  throw UsageError("prompt_style_name: unknown style");
}

inline PromptStyle parse_prompt_style(const std::string& name) {
  for (const auto& [s, n] : prompt_style_names()) {
    if (n == name) return s;
  }
  throw ValidationError("unknown prompt style \"" + name + "\"");
}

// Reference accuracies from the source study's accuracy table; recorded for
// context in reports, never asserted by any test.
inline constexpr double kReferenceAccuracyIcl = 0.595;
inline constexpr double kReferenceAccuracyInformativeCot = 0.815;

struct CityInfo {
  std::string name;
  int longitude = 0;  // degrees east, rounded; western hemisphere negative
  std::string blurb;  // short demographics text
};

struct CityTable {
  std::string note;
  std::vector<CityInfo> cities;

  const CityInfo& find(const std::string& name) const {
    for (const auto& c : cities) {
      if (c.name == name) return c;
    }
    throw UsageError("city table: unknown city \"" + name + "\"");
  }
};

inline CityTable city_table_from_json(const nlohmann::json& j) {
  CityTable table;
  try {
    if (j.contains("note")) table.note = j.at("note").get<std::string>();
    for (const auto& entry : j.at("cities")) {
      CityInfo info;
      info.name = entry.at("name").get<std::string>();
      info.longitude = entry.at("longitude").get<int>();
      info.blurb = entry.at("blurb").get<std::string>();
      table.cities.push_back(std::move(info));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("city table: malformed JSON: ") + e.what());
  }
  if (table.cities.size() != 20) {
    throw ValidationError("city table: expected exactly 20 cities, got " +
                          std::to_string(table.cities.size()));
  }
  for (std::size_t i = 0; i < table.cities.size(); ++i) {
    const CityInfo& c = table.cities[i];
    if (c.longitude < -180 || c.longitude > 180) {
      throw ValidationError("city table: longitude out of range for \"" + c.name + "\"");
    }
    for (std::size_t k = i + 1; k < table.cities.size(); ++k) {
      if (table.cities[k].name == c.name) {
        throw ValidationError("city table: duplicate city \"" + c.name + "\"");
      }
    }
  }
  return table;
}

inline CityTable load_city_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open city table file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("city table: malformed JSON in " + path + ": " + e.what());
  }
  return city_table_from_json(j);
}

struct CityEquation {
  std::string lhs;
  char op = '+';  // '+' or '-'
  std::string rhs;
  int truth = 0;

  std::string text() const { return lhs + " " + op + " " + rhs; }
};

inline CityEquation make_equation(const CityTable& table, const std::string& lhs, char op,
                                  const std::string& rhs) {
  if (op != '+' && op != '-') throw UsageError("make_equation: operator must be + or -");
  CityEquation eq;
  eq.lhs = lhs;
  eq.op = op;
  eq.rhs = rhs;
  int a = table.find(lhs).longitude;
  int b = table.find(rhs).longitude;
  eq.truth = op == '+' ? a + b : a - b;
  return eq;
}

// Deterministically draws disjoint demo and test equation sets from the
// pool of ordered city pairs under both operators.
inline std::pair<std::vector<CityEquation>, std::vector<CityEquation>> build_city_task(
    const CityTable& table, int n_demos, int n_tests, RngStream& rng) {
  if (n_demos < 0 || n_tests < 1) throw UsageError("build_city_task: bad demo/test counts");
  std::vector<CityEquation> pool;
  for (const auto& a : table.cities) {
    for (const auto& b : table.cities) {
      if (a.name == b.name) continue;
      pool.push_back(make_equation(table, a.name, '+', b.name));
      pool.push_back(make_equation(table, a.name, '-', b.name));
    }
  }
  if (static_cast<std::size_t>(n_demos + n_tests) > pool.size()) {
    throw UsageError("build_city_task: not enough distinct equations");
  }
  // Fisher-Yates with the provided stream.
  for (std::size_t i = pool.size(); i > 1; --i) {
    std::size_t k = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(pool[i - 1], pool[k]);
  }
  std::vector<CityEquation> demos(pool.begin(), pool.begin() + n_demos);
  std::vector<CityEquation> tests(pool.begin() + n_demos, pool.begin() + n_demos + n_tests);
  return {std::move(demos), std::move(tests)};
}

// ---------------------------------------------------------------------------
// Prompt rendering
// ---------------------------------------------------------------------------

inline const std::string& answer_instruction() {
  static const std::string text =
      "Concisely explain your steps and write your answer as an integer in the last sentence "
      "starting with \"The answer is\".";
  return text;
}

namespace detail {

inline std::string longitude_fact(const CityTable& table, const std::string& city) {
  return city + " has longitude: " + std::to_string(table.find(city).longitude) + ".";
}

inline std::string demo_answer_body(const CityTable& table, PromptStyle style,
                                    const CityEquation& eq) {
  std::string answer_sentence = "The answer is " + std::to_string(eq.truth) + ".";
  switch (style) {
    case PromptStyle::kIcl:
      return answer_sentence;
    case PromptStyle::kInformativeCot: {
      std::string body = "Using the longitudes of cities, the equation \"" + eq.text() +
                         "\" translates as \"" + eq.lhs + "\" = " +
                         std::to_string(table.find(eq.lhs).longitude) + ", \"" + eq.rhs +
                         "\" = " + std::to_string(table.find(eq.rhs).longitude) +
                         ". Here the longitudes of the western hemisphere are negative numbers. "
                         "And we round the coordinates to the nearest integer. This gives the "
                         "result. ";
      return body + answer_sentence;
    }
    case PromptStyle::kPiA:
      return longitude_fact(table, eq.lhs) + " " + answer_sentence;
    case PromptStyle::kPiB:
      return table.find(eq.lhs).blurb + " " + table.find(eq.rhs).blurb + " " + answer_sentence;
    case PromptStyle::kPiC:
      return table.find(eq.lhs).blurb + " " + table.find(eq.rhs).blurb + " " +
             longitude_fact(table, eq.lhs) + " " + answer_sentence;
    case PromptStyle::kPiD:
      return table.find(eq.lhs).blurb + " " + table.find(eq.rhs).blurb + " " +
             longitude_fact(table, eq.lhs) + " " + longitude_fact(table, eq.rhs) + " " +
             answer_sentence;
  }
  throw UsageError("demo_answer_body: unknown style");
}

}  // namespace detail

inline std::string render_prompt(const CityTable& table, PromptStyle style,
                                 const std::vector<CityEquation>& demos, const CityEquation& test) {
  std::string out;
  for (const auto& demo : demos) {
    out += "Q: \"" + demo.text() + "\"\n";
    out += "A: " + detail::demo_answer_body(table, style, demo) + "\n\n";
  }
  out += "Q: \"" + test.text() + "\"\n";
  out += "A: " + answer_instruction();
  return out;
}

// Extracts the integer following the last "The answer is" marker; trailing
// punctuation tolerated. Absence of a parsable integer is a value, not an
// error.
inline std::optional<long long> parse_answer(const std::string& completion) {
  static const std::string marker = "The answer is";
  std::size_t pos = completion.rfind(marker);
  if (pos == std::string::npos) return std::nullopt;
  std::size_t i = pos + marker.size();
  while (i < completion.size() && (completion[i] == ' ' || completion[i] == '\t' ||
                                   completion[i] == '\n' || completion[i] == '\r')) {
    ++i;
  }
  std::size_t start = i;
  if (i < completion.size() && (completion[i] == '+' || completion[i] == '-')) ++i;
  std::size_t digits_begin = i;
  while (i < completion.size() && completion[i] >= '0' && completion[i] <= '9') ++i;
  if (i == digits_begin) return std::nullopt;
  try {
    return std::stoll(completion.substr(start, i - start));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Evaluation against an endpoint or the built-in mock
// ---------------------------------------------------------------------------

enum class MockMode {
  kOff,       // talk to the configured HTTP endpoint
  kTruth,     // oracle responder: answers every item correctly
  kNoMarker,  // responder that never emits the marker phrase
};

struct EndpointConfig {
  std::string base_url;   // e.g. http://localhost:8080
  std::string model;
  std::string api_token;
  MockMode mock = MockMode::kOff;
  int max_retries = 3;
  int parallelism = 4;
};

inline EndpointConfig endpoint_from_env() {
  EndpointConfig cfg;
  if (const char* v = std::getenv("COTLAB_LLM_BASE_URL")) cfg.base_url = v;
  if (const char* v = std::getenv("COTLAB_LLM_MODEL")) cfg.model = v;
  if (const char* v = std::getenv("COTLAB_LLM_TOKEN")) cfg.api_token = v;
  return cfg;
}

struct EvalItem {
  int item = 0;
  CityEquation eq;
  std::optional<long long> parsed;
  bool correct = false;
  std::string error;  // transport failure detail, empty otherwise
};

struct EvalReport {
  PromptStyle style = PromptStyle::kIcl;
  int n_demos = 0;
  std::vector<EvalItem> items;
  double accuracy = 0.0;
  int parse_failures = 0;
};

// Single chat-completions request with temperature 0 and one user message.
// Transport failures are retried up to max_retries; authentication failures
// abort immediately.
inline std::string chat_completion(const EndpointConfig& endpoint, const std::string& prompt) {
  if (endpoint.base_url.empty()) {
    throw UsageError("chat_completion: no endpoint base URL configured");
  }
  nlohmann::json request;
  request["model"] = endpoint.model;
  request["temperature"] = 0;
  request["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", prompt}}});
  std::string body = request.dump();
  std::string last_error;
  for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
    httplib::Client client(endpoint.base_url);
    client.set_connection_timeout(10, 0);
    client.set_read_timeout(120, 0);
    httplib::Headers headers;
    if (!endpoint.api_token.empty()) {
      headers.emplace("Authorization", "Bearer " + endpoint.api_token);
    }
    auto res = client.Post("/v1/chat/completions", headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 401 || res->status == 403) {
      throw UsageError("chat_completion: authentication rejected (HTTP " +
                       std::to_string(res->status) + ")");
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    try {
      nlohmann::json reply = nlohmann::json::parse(res->body);
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      last_error = std::string("malformed response: ") + e.what();
      continue;
    }
  }
  throw std::runtime_error("chat_completion: " + last_error);
}

inline EvalReport evaluate(const CityTable& table, PromptStyle style,
                           const EndpointConfig& endpoint,
                           const std::vector<CityEquation>& demos,
                           const std::vector<CityEquation>& tests) {
  EvalReport report;
  report.style = style;
  report.n_demos = static_cast<int>(demos.size());
  report.items.resize(tests.size());
  auto run_item = [&](int idx) {
    EvalItem& item = report.items[static_cast<std::size_t>(idx)];
    item.item = idx;
    item.eq = tests[static_cast<std::size_t>(idx)];
    std::string completion;
    if (endpoint.mock == MockMode::kTruth) {
      completion = "The answer is " + std::to_string(item.eq.truth) + ".";
    } else if (endpoint.mock == MockMode::kNoMarker) {
      completion = "I could not determine an answer for this question.";
    } else {
      std::string prompt = render_prompt(table, style, demos, item.eq);
      try {
        completion = chat_completion(endpoint, prompt);
      } catch (const UsageError&) {
        throw;  // auth problems abort the run
      } catch (const std::exception& e) {
        item.error = e.what();
        return;
      }
    }
    item.parsed = parse_answer(completion);
    item.correct = item.parsed.has_value() && *item.parsed == item.eq.truth;
  };
  int count = static_cast<int>(tests.size());
  int workers = endpoint.mock == MockMode::kOff ? std::min(endpoint.parallelism, count) : 1;
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) run_item(i);
  } else {
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&]() {
        for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
          try {
            run_item(i);
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
  int correct = 0;
  for (const auto& item : report.items) {
    if (item.correct) ++correct;
    if (!item.parsed.has_value()) ++report.parse_failures;
  }
  report.accuracy = tests.empty() ? 0.0 : static_cast<double>(correct) / tests.size();
  return report;
}

inline nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["style"] = prompt_style_name(report.style);
  j["n_demos"] = report.n_demos;
  j["accuracy"] = report.accuracy;
  j["parse_failures"] = report.parse_failures;
  j["reference_accuracy"] = {{"ICL", kReferenceAccuracyIcl},
                             {"InformativeCoT", kReferenceAccuracyInformativeCot}};
  j["reference_accuracy_note"] =
      "Reported accuracies from the source study's large-model runs; context only, not a target.";
  nlohmann::json items = nlohmann::json::array();
  for (const auto& item : report.items) {
    nlohmann::json row;
    row["item"] = item.item;
    row["lhs"] = item.eq.lhs;
    row["op"] = std::string(1, item.eq.op);
    row["rhs"] = item.eq.rhs;
    row["truth"] = item.eq.truth;
    row["parsed"] = item.parsed.has_value() ? nlohmann::json(*item.parsed) : nlohmann::json(nullptr);
    row["correct"] = item.correct;
    if (!item.error.empty()) row["error"] = item.error;
    items.push_back(std::move(row));
  }
  j["items"] = std::move(items);
  return j;
}

inline std::vector<std::string> report_csv_header() {
  return {"item", "lhs", "op", "rhs", "truth", "parsed", "correct"};
}

inline std::vector<std::vector<std::string>> report_csv_rows(const EvalReport& report) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& item : report.items) {
    rows.push_back({std::to_string(item.item), item.eq.lhs, std::string(1, item.eq.op),
                    item.eq.rhs, std::to_string(item.eq.truth),
                    item.parsed.has_value() ? std::to_string(*item.parsed) : "",
                    item.correct ? "1" : "0"});
  }
  return rows;
}

}  // namespace cotlab
