// hyperfair command-line driver.
//
// Exit codes: 0 success, 1 internal error, 2 configuration error, 3 data
// error, 4 solver did not converge on some fold (reports are still written).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hyperfair/experiment.hpp"

namespace fs = std::filesystem;
using namespace hyperfair;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNotConverged = 4;

/// Flags shared by every subcommand that reads an experiment config.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::string variant, data, data_format, predictions, cache_dir, sweep;
  std::optional<double> w_f;
  std::optional<std::uint64_t> seed;
  std::optional<int> folds;
  std::optional<unsigned> jobs;

  void attach(CLI::App* app)
  {
    app->add_option("-c,--config", config_path, "JSON config file");
    app->add_option("--set", sets, "Override a config key, e.g. --set solver.max_iter=500")->take_all();
    app->add_option("--variant", variant, "base, np, val, np_val, retrofit_np or retrofit_val");
    app->add_option("--w-f", w_f, "Fairness weight");
    app->add_option("--sweep", sweep, "Comma-separated w_f values");
    app->add_option("--data", data, "Dataset directory");
    app->add_option("--data-format", data_format, "movielens, csv or synthetic");
    app->add_option("--predictions", predictions, "Prediction CSV for retrofit runs");
    app->add_option("--cache-dir", cache_dir, "Similarity cache directory");
    app->add_option("--seed", seed, "Fold split and training seed");
    app->add_option("--folds", folds, "Number of folds");
    app->add_option("-j,--jobs", jobs, "Folds run concurrently");
  }

  ExperimentConfig resolve() const
  {
    json j = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot open config " + config_path);
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError(config_path + ": " + e.what());
      }
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
      std::string pointer = "/" + s.substr(0, eq);
      for (auto& c : pointer)
        if (c == '.') c = '/';
      json value;
      try {
        value = json::parse(s.substr(eq + 1));
      } catch (const json::parse_error&) {
        value = s.substr(eq + 1);
      }
      j[json::json_pointer(pointer)] = value;
    }
    if (!variant.empty()) j["variant"] = variant;
    if (w_f) j["w_f"] = *w_f;
    if (!sweep.empty()) {
      std::vector<double> values;
      for (auto f : split_fields(sweep)) {
        double v = 0.0;
        if (!parse_number(f, v)) throw ConfigError("bad --sweep value '" + std::string(f) + "'");
        values.push_back(v);
      }
      j["sweep"] = values;
    }
    if (!data.empty()) j["data"]["path"] = data;
    if (!data_format.empty()) j["data"]["format"] = data_format;
    if (!predictions.empty()) j["predictions_path"] = predictions;
    if (!cache_dir.empty()) j["cache_dir"] = cache_dir;
    if (seed) j["seed"] = *seed;
    if (folds) j["folds"] = *folds;
    if (jobs) j["jobs"] = *jobs;
    return config_from_json(j);
  }
};

ReportFormat format_for(const std::string& flag, const fs::path& out)
{
  if (flag == "csv") return ReportFormat::Csv;
  if (flag == "json") return ReportFormat::Json;
  if (!flag.empty()) throw ConfigError("--format must be csv or json");
  return out.extension() == ".json" ? ReportFormat::Json : ReportFormat::Csv;
}

void print_summary(const std::vector<MetricsReport>& reports)
{
  for (const auto& r : reports) {
    std::cout << r.variant << " w_f=" << format_double(r.w_f) << "  rmse=" << format_double(r.mean.rmse)
              << "  u_par=" << format_double(r.mean.u_par) << "  u_val=" << format_double(r.mean.u_val);
    if (!r.converged()) std::cout << "  (not converged)";
    std::cout << '\n';
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
    std::cerr << "runtime " << r.runtime_seconds << " s\n";
  }
}

int finish(const std::vector<MetricsReport>& reports, const ExperimentConfig& cfg, const std::string& out,
           const std::string& format)
{
  print_summary(reports);
  if (!out.empty()) emit_report(reports, cfg, out, format_for(format, out));
  for (const auto& r : reports)
    if (!r.converged()) return kExitNotConverged;
  return 0;
}

PredictorOutput retrofit_input(const ExperimentConfig& cfg)
{
  if (cfg.predictions_path.empty()) throw ConfigError("retrofit variants need --predictions or predictions_path");
  PredictionScale scale;
  auto p = load_predictions(cfg.predictions_path, "external", &scale);
  std::cerr << "loaded " << p.values.size() << " predictions from " << cfg.predictions_path << " ("
            << (scale == PredictionScale::Stars ? "1-5 scale, normalized" : "[0,1] scale") << ")\n";
  return p;
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Fairness-aware hybrid recommendation with hinge-loss MRFs"};
  app.require_subcommand(1);

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "Parse MovieLens files, filter, and write the CSV cache and fold manifest");
  std::string pre_in, pre_out;
  std::size_t pre_min = 50;
  int pre_folds = 5;
  std::uint64_t pre_seed = 0;
  bool pre_raw = false;
  pre->add_option("--data", pre_in, "MovieLens directory (ratings.dat, users.dat, movies.dat)")->required();
  pre->add_option("--out", pre_out, "Output directory")->required();
  pre->add_option("--min-user-ratings", pre_min, "Drop users with fewer ratings after the genre filter");
  pre->add_option("--folds", pre_folds, "Folds in the manifest");
  pre->add_option("--seed", pre_seed, "Fold split seed");
  pre->add_flag("--no-filter", pre_raw, "Skip the genre and activity filter");

  // similarities
  auto* sim = app.add_subcommand("similarities", "Compute per-fold similarity graphs");
  ConfigFlags sim_flags;
  std::string sim_out;
  sim_flags.attach(sim);
  sim->add_option("--out", sim_out, "Output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a local predictor per fold and write out-of-fold predictions");
  ConfigFlags train_flags;
  std::string train_model = "nmf", train_out, train_models;
  train_flags.attach(train);
  train->add_option("--model", train_model, "nmf, svd or nb");
  train->add_option("--out", train_out, "Prediction CSV")->required();
  train->add_option("--models-dir", train_models, "Also dump factor models per fold here");

  // experiment / retrofit / sweep
  ConfigFlags run_flags;
  std::string run_out, run_format;
  auto* exp = app.add_subcommand("experiment", "Run the k-fold experiment for one variant and w_f");
  auto* ret = app.add_subcommand("retrofit", "Retrofit external predictions with a fairness regularizer");
  auto* sweep = app.add_subcommand("sweep", "Run one report per w_f in the sweep list");
  for (auto* sc : {exp, ret, sweep}) {
    run_flags.attach(sc);
    sc->add_option("-o,--out", run_out, "Report path (.csv or .json)");
    sc->add_option("--format", run_format, "csv or json (default: from extension)");
  }

  // report
  auto* rep = app.add_subcommand("report", "Render a JSON report as CSV");
  std::string rep_in, rep_out;
  rep->add_option("--in", rep_in, "JSON report")->required();
  rep->add_option("-o,--out", rep_out, "CSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*pre) {
      ParseReport pr;
      Dataset ds = parse_movielens(pre_in, &pr);
      if (pr.orphan_ratings > 0) std::cerr << "dropped " << pr.orphan_ratings << " ratings with unknown user or movie\n";
      const auto before = counts(ds);
      if (!pre_raw) ds = preprocess(ds, {.min_user_ratings = pre_min});
      const auto after = counts(ds);
      std::cout << "parsed   " << before.ratings << " ratings, " << before.users << " users, " << before.movies
                << " movies\nretained " << after.ratings << " ratings, " << after.users << " users, " << after.movies
                << " movies\n";
      write_dataset_csv(ds, pre_out);
      std::ofstream manifest(fs::path(pre_out) / "folds.csv", std::ios::binary);
      if (!manifest) throw DataError("cannot write " + (fs::path(pre_out) / "folds.csv").string());
      write_fold_manifest(manifest, make_folds(ds, pre_folds, pre_seed));
      return 0;
    }
    if (*sim) {
      auto cfg = sim_flags.resolve();
      auto ds = load_dataset(cfg.data);
      auto st = static_similarities(ds, cfg.similarity, cfg.solver.threads);
      fs::create_directories(sim_out);
      for (const auto& split : load_folds(cfg, ds)) {
        auto f = fold_data(ds, split);
        auto g = fold_similarities(f, st, cfg.similarity, cfg.solver.threads);
        const auto path = fs::path(sim_out) / ("similarity_fold" + std::to_string(f.fold_id) + ".csv");
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write " + path.string());
        write_similarity_csv(out, {&g.user_rating, &g.item_rating, &g.user_demo, &g.item_content});
        std::cout << path.string() << '\n';
      }
      return 0;
    }
    if (*train) {
      auto cfg = train_flags.resolve();
      auto ds = load_dataset(cfg.data);
      std::vector<std::pair<int, FactorModel>> models;
      auto preds = out_of_fold_predictions(cfg, ds, train_model, train_models.empty() ? nullptr : &models);
      if (fs::path(train_out).has_parent_path()) fs::create_directories(fs::path(train_out).parent_path());
      std::ofstream out(train_out, std::ios::binary);
      if (!out) throw DataError("cannot write " + train_out);
      write_predictions(out, preds);
      if (!train_models.empty()) {
        fs::create_directories(train_models);
        for (const auto& [fold, m] : models) {
          std::ofstream mf(fs::path(train_models) / (train_model + "_fold" + std::to_string(fold) + ".csv"),
                           std::ios::binary);
          write_factor_model(mf, m);
        }
      }
      std::cout << "wrote " << preds.values.size() << " predictions to " << train_out << '\n';
      return 0;
    }
    if (*exp || *ret || *sweep) {
      auto cfg = run_flags.resolve();
      if (*ret && !is_retrofit(cfg.variant)) cfg.variant = Variant::RetrofitNP;
      if (*exp && is_retrofit(cfg.variant)) throw ConfigError("use the retrofit subcommand for retrofit variants");
      auto ds = load_dataset(cfg.data);
      std::vector<MetricsReport> reports;
      if (is_retrofit(cfg.variant)) {
        auto input = retrofit_input(cfg);
        if (*sweep) reports = run_retrofit_sweep(cfg, ds, input);
        else reports.push_back(run_retrofit(cfg, ds, input, cfg.w_f));
      } else if (*sweep) {
        reports = run_sweep(cfg, ds);
      } else {
        reports.push_back(run_experiment(cfg, ds));
      }
      return finish(reports, cfg, run_out, run_format);
    }
    if (*rep) {
      std::ifstream in(rep_in);
      if (!in) throw DataError("cannot open " + rep_in);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw DataError(rep_in + ": " + e.what());
      }
      auto reports = reports_from_json(j);
      if (rep_out.empty()) {
        write_report_csv(std::cout, reports);
      } else {
        std::ofstream out(rep_out, std::ios::binary);
        if (!out) throw DataError("cannot write " + rep_out);
        write_report_csv(out, reports);
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const MetricError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
