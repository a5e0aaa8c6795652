// Command-line front end for the chain-of-thought simulation laboratory.
//
// Subcommands:
//   decay | sc | tot | si | attn | dominance   -- run a configured experiment
//   city-eval                                  -- probe a chat endpoint (or mock)
//
// Exit codes: 0 success, 1 unexpected error, 2 bad input or configuration,
// 3 capacity or numerical failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cotlab/attention_bma.hpp"
#include "cotlab/harness.hpp"
#include "cotlab/llm_probe.hpp"

namespace fs = std::filesystem;

namespace {

struct RunOptions {
  std::string config_path;
  std::string out_dir = ".";
  int threads = 1;
  bool verbose = false;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

// Resolve a family path against, in order: the working directory, the
// directory holding the config file, and the repository source tree.
std::string resolve_family(const std::string& family_path, const std::string& config_path) {
  if (family_path.empty()) return family_path;
  fs::path p(family_path);
  std::error_code ec;
  if (fs::exists(p, ec)) return p.string();
  fs::path beside_config = fs::path(config_path).parent_path() / p;
  if (fs::exists(beside_config, ec)) return beside_config.string();
  fs::path in_source = fs::path(COTLAB_SOURCE_DIR) / p;
  if (fs::exists(in_source, ec)) return in_source.string();
  return family_path;  // let the loader report the failure
}

void write_json_file(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw cotlab::UsageError("cannot open output file: " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw cotlab::UsageError("failed writing output file: " + path.string());
}

void run_kind(const std::string& kind, const RunOptions& opt) {
  cotlab::ExperimentConfig cfg = cotlab::load_config(opt.config_path);
  if (cfg.kind != kind) {
    throw cotlab::UsageError("config kind \"" + cfg.kind + "\" does not match subcommand \"" +
                             kind + "\"");
  }
  if (opt.seed_set) cfg.seed = opt.seed;
  cfg.family_path = resolve_family(cfg.family_path, opt.config_path);

  fs::create_directories(opt.out_dir);
  fs::path csv_path = fs::path(opt.out_dir) / cfg.output_path;
  if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
  fs::path summary_path = csv_path;
  summary_path.replace_extension(".summary.csv");
  fs::path meta_path = csv_path;
  meta_path.replace_extension(".meta.json");

  cotlab::ExperimentResult result = cotlab::run_experiment(cfg, opt.threads, csv_path.string());

  cotlab::write_csv(result.header, result.rows, csv_path.string());
  std::cout << "wrote " << csv_path.string() << " (" << result.rows.size() << " rows)\n";
  if (!result.summary_header.empty()) {
    cotlab::write_csv(result.summary_header, result.summary_rows, summary_path.string());
    std::cout << "wrote " << summary_path.string() << " (" << result.summary_rows.size()
              << " rows)\n";
  }
  nlohmann::json meta = result.metadata;
  if (!meta.is_object()) meta = nlohmann::json::object();
  meta["kind"] = cfg.kind;
  meta["seed"] = cfg.seed;
  write_json_file(meta, meta_path);
  std::cout << "wrote " << meta_path.string() << "\n";
  if (opt.verbose) std::cout << meta.dump(2) << "\n";
}

struct CityOptions {
  std::string style_name;
  int n_demos = 2;
  int n_tests = 200;
  bool mock = false;
  std::string cities_path = std::string(COTLAB_SOURCE_DIR) + "/data/cities.json";
  std::uint64_t seed = 20240817;
  std::string out_dir = ".";
  bool verbose = false;
};

void run_city_eval(const CityOptions& opt) {
  cotlab::PromptStyle style = cotlab::parse_prompt_style(opt.style_name);
  cotlab::CityTable table = cotlab::load_city_table(opt.cities_path);
  cotlab::RngStream rng(opt.seed, cotlab::derive_stream_id(cotlab::hash_label("city_task")));
  auto [demos, tests] = cotlab::build_city_task(table, opt.n_demos, opt.n_tests, rng);

  cotlab::EndpointConfig endpoint = cotlab::endpoint_from_env();
  if (opt.mock) {
    endpoint.mock = cotlab::MockMode::kTruth;
  } else if (endpoint.base_url.empty()) {
    throw cotlab::UsageError(
        "no endpoint configured: set COTLAB_LLM_BASE_URL (and COTLAB_LLM_MODEL, "
        "COTLAB_LLM_TOKEN as needed) or pass --mock");
  }

  cotlab::EvalReport report = cotlab::evaluate(table, style, endpoint, demos, tests);

  fs::create_directories(opt.out_dir);
  const std::string base = "city_eval_" + cotlab::prompt_style_name(style);
  fs::path json_path = fs::path(opt.out_dir) / (base + ".json");
  fs::path csv_path = fs::path(opt.out_dir) / (base + ".csv");
  write_json_file(cotlab::report_to_json(report), json_path);
  cotlab::write_csv(cotlab::report_csv_header(), cotlab::report_csv_rows(report),
                    csv_path.string());
  std::cout << "wrote " << json_path.string() << "\n";
  std::cout << "wrote " << csv_path.string() << "\n";
  std::cout << "style=" << cotlab::prompt_style_name(style) << " n_demos=" << report.n_demos
            << " items=" << report.items.size() << " accuracy=" << report.accuracy
            << " parse_failures=" << report.parse_failures << "\n";
  if (opt.verbose && !report.items.empty()) {
    std::cout << "first prompt:\n"
              << cotlab::render_prompt(table, style, demos, report.items.front().eq) << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulation laboratory: in-context learning as Bayesian model averaging"};
  app.require_subcommand(1);

  RunOptions run_opt;
  for (const std::string& kind : cotlab::experiment_kinds()) {
    CLI::App* sub = app.add_subcommand(kind, "Run the \"" + kind + "\" experiment");
    sub->add_option("--config", run_opt.config_path, "Path to a JSON experiment config")
        ->required();
    sub->add_option("--out", run_opt.out_dir, "Output directory (created if missing)");
    sub->add_option("--threads", run_opt.threads, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--seed", run_opt.seed, "Override the config seed")
        ->each([&](const std::string&) { run_opt.seed_set = true; });
    sub->add_flag("--verbose", run_opt.verbose, "Print run metadata");
    sub->callback([&run_opt, kind] { run_kind(kind, run_opt); });
  }

  CityOptions city_opt;
  CLI::App* city = app.add_subcommand("city-eval", "Evaluate prompt styles on city equations");
  city->add_option("--style", city_opt.style_name,
                   "Prompt style: ICL, InformativeCoT, PI_a, PI_b, PI_c, PI_d")
      ->required();
  city->add_option("--n-demos", city_opt.n_demos, "Demonstrations per prompt")
      ->check(CLI::NonNegativeNumber);
  city->add_option("--n-tests", city_opt.n_tests, "Number of test equations")
      ->check(CLI::PositiveNumber);
  city->add_flag("--mock", city_opt.mock, "Use the built-in oracle responder instead of HTTP");
  city->add_option("--cities", city_opt.cities_path, "Path to the city table JSON");
  city->add_option("--seed", city_opt.seed, "Seed for the demo/test split");
  city->add_option("--out", city_opt.out_dir, "Output directory (created if missing)");
  city->add_flag("--verbose", city_opt.verbose, "Print the first rendered prompt");
  city->callback([&city_opt] { run_city_eval(city_opt); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const cotlab::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const cotlab::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const cotlab::ImpossiblePromptError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const cotlab::CapacityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const cotlab::NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
