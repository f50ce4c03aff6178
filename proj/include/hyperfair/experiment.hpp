#pragma once

// End-to-end runs: k-fold experiments over the hybrid model and its fair
// variants, retrofitting of external predictions, w_f sweeps, and the CSV and
// JSON report formats.

#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hyperfair/dataio.hpp"
#include "hyperfair/fairness.hpp"
#include "hyperfair/grounder.hpp"
#include "hyperfair/predictors.hpp"
#include "hyperfair/similarity.hpp"
#include "hyperfair/solver.hpp"
#include "hyperfair/synthetic.hpp"
#include "json.hpp"

namespace hyperfair {

using json = nlohmann::json;

enum class Variant { Base, NP, Val, NPVal, RetrofitNP, RetrofitVal };

inline std::string_view to_string(Variant v)
{
  switch (v) {
    case Variant::Base: return "base";
    case Variant::NP: return "np";
    case Variant::Val: return "val";
    case Variant::NPVal: return "np_val";
    case Variant::RetrofitNP: return "retrofit_np";
    case Variant::RetrofitVal: return "retrofit_val";
  }
  return "?";
}

inline Variant variant_from_string(std::string_view s)
{
  for (auto v : {Variant::Base, Variant::NP, Variant::Val, Variant::NPVal, Variant::RetrofitNP, Variant::RetrofitVal})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

inline bool is_retrofit(Variant v) { return v == Variant::RetrofitNP || v == Variant::RetrofitVal; }
inline bool uses_nonparity(Variant v) { return v == Variant::NP || v == Variant::NPVal || v == Variant::RetrofitNP; }
inline bool uses_value(Variant v) { return v == Variant::Val || v == Variant::NPVal || v == Variant::RetrofitVal; }

enum class MetricScale { Stars, Unit };

struct DataConfig {
  std::string format = "movielens";  // movielens | csv | synthetic
  std::string path;                  // directory for movielens/csv
  bool preprocess = true;            // movielens only
  PreprocessOptions filter;
  SyntheticOptions synthetic;
  std::string folds_manifest;  // optional; overrides the seeded split
};

struct SimilarityConfig {
  std::size_t k = 25;
  std::size_t min_overlap_ratings = 5;
  std::size_t min_overlap_features = 1;
};

struct PredictorConfig {
  bool nmf = true;
  bool svd = true;
  bool naive_bayes = true;
  std::size_t nmf_rank = 8;
  std::size_t nmf_iters = 500;
  std::size_t svd_rank = 8;
  std::size_t svd_iters = 500;
};

inline const std::vector<double>& default_sweep()
{
  static const std::vector<double> s{0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0};
  return s;
}

struct ExperimentConfig {
  Variant variant = Variant::Base;
  double w_f = 1.0;
  std::vector<double> sweep = default_sweep();
  RuleWeights weights;
  SolverConfig solver;
  DataConfig data;
  SimilarityConfig similarity;
  PredictorConfig predictors;
  std::string predictions_path;  // retrofit input
  std::string cache_dir;         // similarity cache; empty disables
  bool observed_in_group_averages = false;
  MetricScale metric_scale = MetricScale::Stars;
  std::uint64_t seed = 0;
  int folds = 5;
  unsigned jobs = 1;

  void validate() const
  {
    if (!(w_f >= 0.0) || !std::isfinite(w_f)) throw ConfigError("w_f must be finite and >= 0");
    for (double w : sweep)
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("sweep values must be finite and >= 0");
    if (folds < 2) throw ConfigError("folds must be >= 2");
    if (jobs < 1) throw ConfigError("jobs must be >= 1");
    if (similarity.k < 1 || similarity.min_overlap_ratings < 1 || similarity.min_overlap_features < 1)
      throw ConfigError("similarity k and min_overlap values must be >= 1");
    if (data.format != "movielens" && data.format != "csv" && data.format != "synthetic")
      throw ConfigError("data.format must be movielens, csv or synthetic");
    weights.validate();
    solver.validate();
  }
};

// ---------------------------------------------------------------------------
// Config JSON

namespace detail {

/// Reads key into out if present; unknown keys are reported by the caller.
template <typename T>
void take(const json& j, const char* key, T& out)
{
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where)
{
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw ConfigError("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c)
{
  json w = {{"sim_user_rating", c.weights.sim_user_rating}, {"sim_item_rating", c.weights.sim_item_rating},
            {"sim_user_demo", c.weights.sim_user_demo},     {"sim_item_content", c.weights.sim_item_content},
            {"prior", c.weights.prior},                     {"mean_user", c.weights.mean_user},
            {"mean_item", c.weights.mean_item}};
  json s = {{"tol_obj", c.solver.tol_obj},
            {"tol_feas", c.solver.tol_feas},
            {"max_iter", c.solver.max_iter},
            {"window", c.solver.window},
            {"algorithm", c.solver.algorithm == Algorithm::Admm ? "admm" : "projected_subgradient"},
            {"step_rule", c.solver.step_rule == StepRule::Backtracking ? "backtracking" : "diminishing"},
            {"init_value", c.solver.init_value},
            {"eliminate_aux", c.solver.eliminate_aux},
            {"threads", c.solver.threads}};
  json d = {{"format", c.data.format},
            {"path", c.data.path},
            {"preprocess", c.data.preprocess},
            {"genres", c.data.filter.genres},
            {"min_user_ratings", c.data.filter.min_user_ratings},
            {"folds_manifest", c.data.folds_manifest},
            {"synthetic",
             {{"users", c.data.synthetic.users},
              {"items", c.data.synthetic.items},
              {"density", c.data.synthetic.density},
              {"gap", c.data.synthetic.gap},
              {"item_spread", c.data.synthetic.item_spread},
              {"noise", c.data.synthetic.noise},
              {"seed", c.data.synthetic.seed}}}};
  json sim = {{"k", c.similarity.k},
              {"min_overlap_ratings", c.similarity.min_overlap_ratings},
              {"min_overlap_features", c.similarity.min_overlap_features}};
  json p = {{"nmf", c.predictors.nmf},           {"svd", c.predictors.svd},
            {"naive_bayes", c.predictors.naive_bayes}, {"nmf_rank", c.predictors.nmf_rank},
            {"nmf_iters", c.predictors.nmf_iters},     {"svd_rank", c.predictors.svd_rank},
            {"svd_iters", c.predictors.svd_iters}};
  return {{"variant", to_string(c.variant)},
          {"w_f", c.w_f},
          {"sweep", c.sweep},
          {"weights", w},
          {"solver", s},
          {"data", d},
          {"similarity", sim},
          {"predictors", p},
          {"predictions_path", c.predictions_path},
          {"cache_dir", c.cache_dir},
          {"observed_in_group_averages", c.observed_in_group_averages},
          {"metric_scale", c.metric_scale == MetricScale::Stars ? "stars" : "unit"},
          {"seed", c.seed},
          {"folds", c.folds},
          {"jobs", c.jobs}};
}

/// Missing keys keep their defaults; unknown keys are an error.
inline ExperimentConfig config_from_json(const json& j)
{
  using detail::take;
  ExperimentConfig c;
  detail::reject_unknown(j,
                         {"variant", "w_f", "sweep", "weights", "solver", "data", "similarity", "predictors",
                          "predictions_path", "cache_dir", "observed_in_group_averages", "metric_scale", "seed",
                          "folds", "jobs"},
                         "");
  std::string s;
  if (j.contains("variant")) {
    take(j, "variant", s);
    c.variant = variant_from_string(s);
  }
  take(j, "w_f", c.w_f);
  take(j, "sweep", c.sweep);
  take(j, "predictions_path", c.predictions_path);
  take(j, "cache_dir", c.cache_dir);
  take(j, "observed_in_group_averages", c.observed_in_group_averages);
  take(j, "seed", c.seed);
  take(j, "folds", c.folds);
  take(j, "jobs", c.jobs);
  if (j.contains("metric_scale")) {
    take(j, "metric_scale", s);
    if (s == "stars") c.metric_scale = MetricScale::Stars;
    else if (s == "unit") c.metric_scale = MetricScale::Unit;
    else throw ConfigError("metric_scale must be stars or unit");
  }
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    detail::reject_unknown(w, {"sim_user_rating", "sim_item_rating", "sim_user_demo", "sim_item_content", "prior",
                               "mean_user", "mean_item"},
                           "weights");
    take(w, "sim_user_rating", c.weights.sim_user_rating);
    take(w, "sim_item_rating", c.weights.sim_item_rating);
    take(w, "sim_user_demo", c.weights.sim_user_demo);
    take(w, "sim_item_content", c.weights.sim_item_content);
    take(w, "prior", c.weights.prior);
    take(w, "mean_user", c.weights.mean_user);
    take(w, "mean_item", c.weights.mean_item);
  }
  if (j.contains("solver")) {
    const auto& sj = j.at("solver");
    detail::reject_unknown(sj, {"tol_obj", "tol_feas", "max_iter", "window", "algorithm", "step_rule", "init_value",
                                "eliminate_aux", "threads"},
                           "solver");
    take(sj, "tol_obj", c.solver.tol_obj);
    take(sj, "tol_feas", c.solver.tol_feas);
    take(sj, "max_iter", c.solver.max_iter);
    take(sj, "window", c.solver.window);
    take(sj, "init_value", c.solver.init_value);
    take(sj, "eliminate_aux", c.solver.eliminate_aux);
    take(sj, "threads", c.solver.threads);
    if (sj.contains("algorithm")) {
      take(sj, "algorithm", s);
      if (s == "admm") c.solver.algorithm = Algorithm::Admm;
      else if (s == "projected_subgradient") c.solver.algorithm = Algorithm::ProjectedSubgradient;
      else throw ConfigError("solver.algorithm must be admm or projected_subgradient");
    }
    if (sj.contains("step_rule")) {
      take(sj, "step_rule", s);
      if (s == "backtracking") c.solver.step_rule = StepRule::Backtracking;
      else if (s == "diminishing") c.solver.step_rule = StepRule::Diminishing;
      else throw ConfigError("solver.step_rule must be backtracking or diminishing");
    }
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, {"format", "path", "preprocess", "genres", "min_user_ratings", "folds_manifest", "synthetic"},
                           "data");
    take(d, "format", c.data.format);
    take(d, "path", c.data.path);
    take(d, "preprocess", c.data.preprocess);
    take(d, "genres", c.data.filter.genres);
    take(d, "min_user_ratings", c.data.filter.min_user_ratings);
    take(d, "folds_manifest", c.data.folds_manifest);
    if (d.contains("synthetic")) {
      const auto& y = d.at("synthetic");
      detail::reject_unknown(y, {"users", "items", "density", "gap", "item_spread", "noise", "seed"}, "data.synthetic");
      take(y, "users", c.data.synthetic.users);
      take(y, "items", c.data.synthetic.items);
      take(y, "density", c.data.synthetic.density);
      take(y, "gap", c.data.synthetic.gap);
      take(y, "item_spread", c.data.synthetic.item_spread);
      take(y, "noise", c.data.synthetic.noise);
      take(y, "seed", c.data.synthetic.seed);
    }
  }
  if (j.contains("similarity")) {
    const auto& sj = j.at("similarity");
    detail::reject_unknown(sj, {"k", "min_overlap_ratings", "min_overlap_features"}, "similarity");
    take(sj, "k", c.similarity.k);
    take(sj, "min_overlap_ratings", c.similarity.min_overlap_ratings);
    take(sj, "min_overlap_features", c.similarity.min_overlap_features);
  }
  if (j.contains("predictors")) {
    const auto& p = j.at("predictors");
    detail::reject_unknown(p, {"nmf", "svd", "naive_bayes", "nmf_rank", "nmf_iters", "svd_rank", "svd_iters"}, "predictors");
    take(p, "nmf", c.predictors.nmf);
    take(p, "svd", c.predictors.svd);
    take(p, "naive_bayes", c.predictors.naive_bayes);
    take(p, "nmf_rank", c.predictors.nmf_rank);
    take(p, "nmf_iters", c.predictors.nmf_iters);
    take(p, "svd_rank", c.predictors.svd_rank);
    take(p, "svd_iters", c.predictors.svd_iters);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path)
{
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return config_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes)
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

/// Hash of the effective config, ignoring settings that cannot change results.
inline std::string config_hash(const ExperimentConfig& c)
{
  json j = to_json(c);
  j.erase("jobs");
  j["solver"].erase("threads");
  j.erase("cache_dir");
  return fnv1a_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Metrics and reports

inline double rmse(const PredictorOutput& pred, const std::map<PairKey, double>& truth)
{
  if (pred.values.empty()) throw MetricError("rmse of an empty prediction set");
  double s = 0.0;
  for (const auto& [k, v] : pred.values) {
    auto t = truth.find(k);
    if (t == truth.end()) throw MetricError("no true rating for a prediction");
    s += (v - t->second) * (v - t->second);
  }
  return std::sqrt(s / static_cast<double>(pred.values.size()));
}

struct MetricTriple {
  double rmse = 0.0;
  double u_par = 0.0;
  double u_val = 0.0;
  bool operator==(const MetricTriple&) const = default;
};

struct FoldMetrics {
  int fold = 0;
  MetricTriple metrics;
  bool converged = true;
  int iterations = 0;
  bool operator==(const FoldMetrics&) const = default;
};

struct MetricsReport {
  std::string variant;
  double w_f = 0.0;
  std::vector<FoldMetrics> folds;
  MetricTriple mean;
  std::optional<MetricTriple> sd;  // sample SD, present for two or more folds
  std::vector<std::string> warnings;
  double runtime_seconds = 0.0;  // informational; not serialized

  bool converged() const
  {
    return std::all_of(folds.begin(), folds.end(), [](const FoldMetrics& f) { return f.converged; });
  }
  bool operator==(const MetricsReport& o) const
  {
    return variant == o.variant && w_f == o.w_f && folds == o.folds && mean == o.mean && sd == o.sd &&
           warnings == o.warnings;
  }
};

/// Fills mean and, for two or more folds, the sample standard deviation.
inline void aggregate(MetricsReport& r)
{
  const double n = static_cast<double>(r.folds.size());
  if (r.folds.empty()) throw MetricError("report has no folds");
  MetricTriple m;
  for (const auto& f : r.folds) {
    m.rmse += f.metrics.rmse;
    m.u_par += f.metrics.u_par;
    m.u_val += f.metrics.u_val;
  }
  m = {m.rmse / n, m.u_par / n, m.u_val / n};
  r.mean = m;
  r.sd.reset();
  if (r.folds.size() < 2) return;
  MetricTriple s;
  for (const auto& f : r.folds) {
    s.rmse += std::pow(f.metrics.rmse - m.rmse, 2);
    s.u_par += std::pow(f.metrics.u_par - m.u_par, 2);
    s.u_val += std::pow(f.metrics.u_val - m.u_val, 2);
  }
  r.sd = MetricTriple{std::sqrt(s.rmse / (n - 1)), std::sqrt(s.u_par / (n - 1)), std::sqrt(s.u_val / (n - 1))};
}

inline void write_report_csv(std::ostream& os, const std::vector<MetricsReport>& reports)
{
  if (reports.empty()) throw MetricError("no reports to write");
  os << "variant,w_f,fold,rmse,u_par,u_val\n";
  auto row = [&](const MetricsReport& r, const std::string& fold, const MetricTriple& m) {
    os << r.variant << ',' << format_double(r.w_f) << ',' << fold << ',' << format_double(m.rmse) << ','
       << format_double(m.u_par) << ',' << format_double(m.u_val) << '\n';
  };
  for (const auto& r : reports) {
    for (const auto& f : r.folds) row(r, std::to_string(f.fold), f.metrics);
    row(r, "mean", r.mean);
    if (r.sd) row(r, "sd", *r.sd);
  }
}

inline json triple_json(const MetricTriple& m) { return {{"rmse", m.rmse}, {"u_par", m.u_par}, {"u_val", m.u_val}}; }

inline MetricTriple triple_from(const json& j)
{
  return {j.at("rmse").get<double>(), j.at("u_par").get<double>(), j.at("u_val").get<double>()};
}

inline json report_json(const std::vector<MetricsReport>& reports, const ExperimentConfig& cfg)
{
  json arr = json::array();
  for (const auto& r : reports) {
    json folds = json::array();
    for (const auto& f : r.folds)
      folds.push_back({{"fold", f.fold},
                       {"rmse", f.metrics.rmse},
                       {"u_par", f.metrics.u_par},
                       {"u_val", f.metrics.u_val},
                       {"converged", f.converged},
                       {"iterations", f.iterations}});
    json jr = {{"variant", r.variant}, {"w_f", r.w_f}, {"folds", folds}, {"mean", triple_json(r.mean)},
               {"warnings", r.warnings}};
    if (r.sd) jr["sd"] = triple_json(*r.sd);
    arr.push_back(std::move(jr));
  }
  return {{"config", to_json(cfg)}, {"config_hash", config_hash(cfg)}, {"reports", arr}};
}

inline std::vector<MetricsReport> reports_from_json(const json& j)
{
  std::vector<MetricsReport> out;
  try {
    for (const auto& jr : j.at("reports")) {
      MetricsReport r;
      r.variant = jr.at("variant").get<std::string>();
      r.w_f = jr.at("w_f").get<double>();
      for (const auto& f : jr.at("folds"))
        r.folds.push_back({f.at("fold").get<int>(), triple_from(f), f.at("converged").get<bool>(),
                           f.at("iterations").get<int>()});
      r.mean = triple_from(jr.at("mean"));
      if (jr.contains("sd")) r.sd = triple_from(jr.at("sd"));
      r.warnings = jr.at("warnings").get<std::vector<std::string>>();
      out.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report JSON: ") + e.what());
  }
  return out;
}

enum class ReportFormat { Csv, Json };

inline void emit_report(const std::vector<MetricsReport>& reports, const ExperimentConfig& cfg,
                        const std::filesystem::path& path, ReportFormat format)
{
  if (reports.empty()) throw MetricError("no reports to write");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  if (format == ReportFormat::Csv) write_report_csv(out, reports);
  else out << report_json(reports, cfg).dump(2) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Data and folds

inline Dataset load_dataset(const DataConfig& d)
{
  if (d.format == "synthetic") return make_synthetic(d.synthetic);
  if (d.path.empty()) throw ConfigError("data.path is required for format " + d.format);
  if (d.format == "csv") return read_dataset_csv(d.path);
  ParseReport rep;
  Dataset ds = parse_movielens(d.path, &rep);
  return d.preprocess ? preprocess(ds, d.filter) : ds;
}

inline std::vector<FoldSplit> load_folds(const ExperimentConfig& cfg, const Dataset& ds)
{
  if (cfg.data.folds_manifest.empty()) return make_folds(ds, cfg.folds, cfg.seed);
  std::ifstream in(cfg.data.folds_manifest);
  if (!in) throw DataError("cannot open fold manifest " + cfg.data.folds_manifest);
  auto folds = read_fold_manifest(in, cfg.data.folds_manifest);
  if (auto err = check_fold_partition(folds, ds.ratings.size()); !err.empty())
    throw DataError(cfg.data.folds_manifest + ": " + err);
  return folds;
}

/// Train observations, test targets and their true values for one fold.
struct FoldData {
  int fold_id = 0;
  std::vector<Observation> train;
  std::vector<PairKey> targets;
  std::map<PairKey, double> truth;
};

inline FoldData fold_data(const Dataset& ds, const FoldSplit& split)
{
  FoldData f;
  f.fold_id = split.fold_id;
  f.train = observations(ds, split.train);
  for (const auto& o : observations(ds, split.test)) {
    f.targets.push_back({o.user, o.item});
    f.truth[{o.user, o.item}] = o.value;
  }
  return f;
}

/// Feature-based graphs depend only on the dataset, not on the fold.
struct StaticSimilarities {
  SimilarityGraph user_demo{SimilarityKind::UserDemographic, {}};
  SimilarityGraph item_content{SimilarityKind::ItemContent, {}};
};

inline StaticSimilarities static_similarities(const Dataset& ds, const SimilarityConfig& sc, unsigned threads = 1)
{
  return {cosine_similarity(demographic_features(ds), SimilarityKind::UserDemographic, sc.k, sc.min_overlap_features,
                            threads),
          cosine_similarity(genre_features(ds), SimilarityKind::ItemContent, sc.k, sc.min_overlap_features, threads)};
}

inline SimilarityGraphs fold_similarities(const FoldData& f, const StaticSimilarities& st, const SimilarityConfig& sc,
                                          unsigned threads = 1)
{
  SimilarityGraphs g;
  g.user_rating = cosine_similarity(rating_vectors(f.train, true), SimilarityKind::UserRating, sc.k,
                                    sc.min_overlap_ratings, threads);
  g.item_rating = cosine_similarity(rating_vectors(f.train, false), SimilarityKind::ItemRating, sc.k,
                                    sc.min_overlap_ratings, threads);
  g.user_demo = st.user_demo;
  g.item_content = st.item_content;
  return g;
}

namespace detail {

inline std::string dataset_fingerprint(const Dataset& ds)
{
  std::string bytes;
  bytes.reserve(ds.ratings.size() * 12);
  for (const auto& r : ds.ratings)
    bytes += std::to_string(raw(r.user)) + ':' + std::to_string(raw(r.item)) + ':' + std::to_string(r.value) + ';';
  return fnv1a_hex(bytes);
}

}  // namespace detail

/// Similarity graphs for a fold, read from or written to cache_dir when set.
/// The cache key covers the fold, the split seed, the similarity settings and
/// the rating data.
inline SimilarityGraphs cached_fold_similarities(const ExperimentConfig& cfg, const FoldData& f,
                                                 const StaticSimilarities& st, const std::string& data_key)
{
  if (cfg.cache_dir.empty()) return fold_similarities(f, st, cfg.similarity, cfg.solver.threads);
  json key = to_json(cfg)["similarity"];
  key["fold"] = f.fold_id;
  key["seed"] = cfg.seed;
  key["folds"] = cfg.folds;
  key["folds_manifest"] = cfg.data.folds_manifest;
  key["data"] = data_key;
  const auto path = std::filesystem::path(cfg.cache_dir) /
                    ("similarity_fold" + std::to_string(f.fold_id) + "_" + fnv1a_hex(key.dump()) + ".csv");
  if (std::filesystem::exists(path)) {
    std::ifstream in(path);
    auto m = read_similarity_csv(in, path.string());
    SimilarityGraphs g;
    for (auto* graph : {&g.user_rating, &g.item_rating, &g.user_demo, &g.item_content})
      if (auto it = m.find(graph->kind); it != m.end()) *graph = std::move(it->second);
    return g;
  }
  auto g = fold_similarities(f, st, cfg.similarity, cfg.solver.threads);
  std::filesystem::create_directories(cfg.cache_dir);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write similarity cache " + path.string());
  write_similarity_csv(out, {&g.user_rating, &g.item_rating, &g.user_demo, &g.item_content});
  return g;
}

/// Local predictor outputs on the fold's targets: nmf, svd, nb in that order.
/// Distinct predictors train concurrently when threads > 1.
inline std::vector<PredictorOutput> fold_predictors(const FoldData& f, const Dataset& ds, const PredictorConfig& pc,
                                                    std::uint64_t seed, unsigned threads = 1)
{
  const auto policy = threads > 1 ? std::launch::async : std::launch::deferred;
  std::vector<std::future<PredictorOutput>> jobs;
  if (pc.nmf)
    jobs.push_back(std::async(policy, [&] {
      return predict(train_nmf(f.train, {.rank = pc.nmf_rank, .iters = pc.nmf_iters, .seed = seed}), f.targets, "nmf");
    }));
  if (pc.svd)
    jobs.push_back(std::async(policy, [&] {
      return predict(train_biased_svd(f.train, {.rank = pc.svd_rank, .iters = pc.svd_iters, .seed = seed}), f.targets,
                     "svd");
    }));
  if (pc.naive_bayes)
    jobs.push_back(std::async(policy, [&] {
      return predict(train_naive_bayes(f.train, demographic_features(ds), genre_features(ds)), f.targets, "nb");
    }));
  std::vector<PredictorOutput> out;
  for (auto& j : jobs) out.push_back(j.get());
  return out;
}

// ---------------------------------------------------------------------------
// Fold execution

struct FoldResult {
  FoldMetrics metrics;
  PredictorOutput predictions;
  std::vector<std::string> warnings;
};

inline double metric_factor(MetricScale s) { return s == MetricScale::Stars ? 4.0 : 1.0; }

/// Adds the fairness regularizers the variant calls for.
inline GroundModel with_fairness(const GroundModel& base, const AtomTable& atoms, const GroupAssignment& groups,
                                 const ExperimentConfig& cfg, double w_f, std::vector<std::string>& warnings)
{
  GroundModel m = base;
  if (uses_nonparity(cfg.variant))
    m = build_nonparity_regularizer(m, atoms, groups, w_f, {.include_observed_in_averages = cfg.observed_in_group_averages});
  if (uses_value(cfg.variant)) {
    std::vector<std::string> skipped;
    m = build_value_regularizer(m, atoms, groups, ObservedItemEstimates::from(atoms.observed(), groups), w_f, &skipped);
    if (!skipped.empty())
      warnings.push_back("value regularizer skipped " + std::to_string(skipped.size()) + " items");
  }
  return m;
}

inline FoldResult solve_and_score(const GroundModel& model, const AtomTable& atoms, const FoldData& f,
                                  const GroupAssignment& groups, const ExperimentConfig& cfg)
{
  FoldResult r;
  auto sol = solve(model, cfg.solver);
  r.predictions = predictions_from(atoms, sol.y);
  const double k = metric_factor(cfg.metric_scale);
  r.metrics.fold = f.fold_id;
  r.metrics.metrics = {k * rmse(r.predictions, f.truth), k * u_par(r.predictions, groups),
                       k * u_val(r.predictions, f.truth, groups)};
  r.metrics.converged = sol.converged;
  r.metrics.iterations = sol.iterations;
  for (auto& w : sol.warnings) r.warnings.push_back("fold " + std::to_string(f.fold_id) + ": " + w);
  return r;
}

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; results are indexed by
/// i. The first failure in index order is rethrown with its fold id and the
/// original error category.
template <typename R, typename F>
std::vector<R> run_folds(std::size_t n, unsigned jobs, const std::vector<int>& ids, F&& fn)
{
  std::vector<std::optional<R>> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        results[i] = fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const unsigned t = std::min<unsigned>(jobs, static_cast<unsigned>(n));
    for (unsigned k = 1; k < t; ++k) pool.emplace_back(worker);
    worker();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    const std::string prefix = "fold " + std::to_string(ids[i]) + ": ";
    try {
      std::rethrow_exception(errors[i]);
    } catch (const ConfigError& e) {
      throw ConfigError(prefix + e.what());
    } catch (const CoverageError& e) {
      throw CoverageError(prefix + e.what());
    } catch (const DataError& e) {
      throw DataError(prefix + e.what());
    } catch (const StructureError& e) {
      throw StructureError(prefix + e.what());
    } catch (const MetricError& e) {
      throw MetricError(prefix + e.what());
    } catch (const std::exception& e) {
      throw Error(prefix + e.what());
    }
  }
  std::vector<R> out;
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

inline void prepend_warnings(FoldResult& r, int fold, const std::vector<std::string>& warnings)
{
  std::vector<std::string> w;
  for (const auto& x : warnings) w.push_back("fold " + std::to_string(fold) + ": " + x);
  r.warnings.insert(r.warnings.begin(), w.begin(), w.end());
}

inline MetricsReport assemble_report(const ExperimentConfig& cfg, double w_f, std::vector<FoldResult>& results,
                                     std::chrono::steady_clock::time_point start)
{
  MetricsReport rep;
  rep.variant = std::string(to_string(cfg.variant));
  rep.w_f = w_f;
  for (auto& r : results) {
    rep.folds.push_back(r.metrics);
    for (auto& w : r.warnings) rep.warnings.push_back(std::move(w));
  }
  aggregate(rep);
  rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace detail

/// Everything the in-process variants need per fold, prepared once and reused
/// across a sweep.
struct PreparedFold {
  FoldData data;
  BaseModel base;
};

inline std::vector<PreparedFold> prepare_folds(const ExperimentConfig& cfg, const Dataset& ds)
{
  cfg.validate();
  if (is_retrofit(cfg.variant)) throw ConfigError("retrofit variants run through run_retrofit");
  const auto splits = load_folds(cfg, ds);
  const auto st = static_similarities(ds, cfg.similarity, cfg.solver.threads);
  const std::string data_key = cfg.cache_dir.empty() ? std::string() : detail::dataset_fingerprint(ds);
  std::vector<int> ids;
  for (const auto& s : splits) ids.push_back(s.fold_id);
  return detail::run_folds<PreparedFold>(splits.size(), cfg.jobs, ids, [&](std::size_t i) {
    PreparedFold p;
    p.data = fold_data(ds, splits[i]);
    auto sims = cached_fold_similarities(cfg, p.data, st, data_key);
    auto preds = fold_predictors(p.data, ds, cfg.predictors, cfg.seed, cfg.solver.threads);
    p.base = build_base_model(p.data.train, p.data.targets, sims, preds, cfg.weights, cfg.solver.threads);
    return p;
  });
}

inline MetricsReport run_prepared(const ExperimentConfig& cfg, const std::vector<PreparedFold>& folds,
                                  const GroupAssignment& groups, double w_f,
                                  std::vector<PredictorOutput>* predictions = nullptr)
{
  const auto start = std::chrono::steady_clock::now();
  std::vector<int> ids;
  for (const auto& f : folds) ids.push_back(f.data.fold_id);
  auto results = detail::run_folds<FoldResult>(folds.size(), cfg.jobs, ids, [&](std::size_t i) {
    const auto& f = folds[i];
    std::vector<std::string> warnings;
    auto model = with_fairness(f.base.model, f.base.atoms, groups, cfg, w_f, warnings);
    auto r = solve_and_score(model, f.base.atoms, f.data, groups, cfg);
    detail::prepend_warnings(r, f.data.fold_id, warnings);
    return r;
  });
  if (predictions) {
    predictions->clear();
    for (const auto& r : results) predictions->push_back(r.predictions);
  }
  return detail::assemble_report(cfg, w_f, results, start);
}

inline MetricsReport run_experiment(const ExperimentConfig& cfg, const Dataset& ds,
                                    std::vector<PredictorOutput>* predictions = nullptr)
{
  const auto start = std::chrono::steady_clock::now();
  auto folds = prepare_folds(cfg, ds);
  auto rep = run_prepared(cfg, folds, derive_groups(ds), cfg.w_f, predictions);
  rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

/// One report per sweep value; folds and base models are shared across the sweep.
inline std::vector<MetricsReport> run_sweep(const ExperimentConfig& cfg, const Dataset& ds)
{
  if (cfg.sweep.empty()) throw ConfigError("sweep list is empty");
  if (is_retrofit(cfg.variant)) throw ConfigError("retrofit sweeps run through run_retrofit_sweep");
  std::vector<MetricsReport> out;
  auto folds = prepare_folds(cfg, ds);
  const auto groups = derive_groups(ds);
  for (double w : cfg.sweep) out.push_back(run_prepared(cfg, folds, groups, w));
  return out;
}

// ---------------------------------------------------------------------------
// Retrofit

/// Per fold: the prior pull toward the external predictions on the fold's test
/// pairs plus the variant's fairness regularizer; no other rules.
inline MetricsReport run_retrofit(const ExperimentConfig& cfg, const Dataset& ds, const PredictorOutput& input, double w_f,
                                  std::vector<PredictorOutput>* predictions = nullptr)
{
  cfg.validate();
  if (!is_retrofit(cfg.variant)) throw ConfigError("run_retrofit needs a retrofit variant");
  const auto start = std::chrono::steady_clock::now();
  const auto splits = load_folds(cfg, ds);
  const auto groups = derive_groups(ds);
  std::vector<int> ids;
  for (const auto& s : splits) ids.push_back(s.fold_id);
  auto results = detail::run_folds<FoldResult>(splits.size(), cfg.jobs, ids, [&](std::size_t i) {
    auto f = fold_data(ds, splits[i]);
    BaseModel b;
    b.atoms = AtomTable(f.train, f.targets, b.model);
    for (auto& p : ground_prior_rules(input, b.atoms, cfg.weights.prior_weight(input.name)))
      b.model.add_potential(std::move(p));
    std::vector<std::string> warnings;
    auto model = with_fairness(b.model, b.atoms, groups, cfg, w_f, warnings);
    auto r = solve_and_score(model, b.atoms, f, groups, cfg);
    detail::prepend_warnings(r, f.fold_id, warnings);
    return r;
  });
  if (predictions) {
    predictions->clear();
    for (const auto& r : results) predictions->push_back(r.predictions);
  }
  return detail::assemble_report(cfg, w_f, results, start);
}

inline std::vector<MetricsReport> run_retrofit_sweep(const ExperimentConfig& cfg, const Dataset& ds,
                                                     const PredictorOutput& input)
{
  if (cfg.sweep.empty()) throw ConfigError("sweep list is empty");
  std::vector<MetricsReport> out;
  for (double w : cfg.sweep) out.push_back(run_retrofit(cfg, ds, input, w));
  return out;
}

/// Metrics of the external predictions themselves, scored per fold like a run.
inline MetricsReport score_predictions(const ExperimentConfig& cfg, const Dataset& ds, const PredictorOutput& input)
{
  const auto splits = load_folds(cfg, ds);
  const auto groups = derive_groups(ds);
  const double k = metric_factor(cfg.metric_scale);
  MetricsReport rep;
  rep.variant = input.name;
  for (const auto& s : splits) {
    auto f = fold_data(ds, s);
    PredictorOutput p{input.name, {}};
    for (const auto& key : f.targets) {
      auto it = input.values.find(key);
      if (it == input.values.end()) throw CoverageError("fold " + std::to_string(f.fold_id) + ": predictions miss a test pair");
      p.values.emplace(key, it->second);
    }
    rep.folds.push_back({f.fold_id, {k * rmse(p, f.truth), k * u_par(p, groups), k * u_val(p, f.truth, groups)}, true, 0});
  }
  aggregate(rep);
  return rep;
}

/// Trains one local predictor per fold and returns its test-set predictions
/// over all folds. Test sets partition the ratings, so every rating gets
/// exactly one out-of-fold prediction.
inline PredictorOutput out_of_fold_predictions(const ExperimentConfig& cfg, const Dataset& ds, const std::string& model,
                                               std::vector<std::pair<int, FactorModel>>* factor_models = nullptr)
{
  cfg.validate();
  const auto splits = load_folds(cfg, ds);
  PredictorOutput all{model, {}};
  for (const auto& s : splits) {
    auto f = fold_data(ds, s);
    PredictorOutput p;
    if (model == "nmf" || model == "svd") {
      FactorModel fm = model == "nmf"
                           ? train_nmf(f.train, {.rank = cfg.predictors.nmf_rank, .iters = cfg.predictors.nmf_iters, .seed = cfg.seed})
                           : train_biased_svd(f.train, {.rank = cfg.predictors.svd_rank, .iters = cfg.predictors.svd_iters, .seed = cfg.seed});
      p = predict(fm, f.targets, model);
      if (factor_models) factor_models->emplace_back(f.fold_id, std::move(fm));
    } else if (model == "nb") {
      p = predict(train_naive_bayes(f.train, demographic_features(ds), genre_features(ds)), f.targets, model);
    } else {
      throw ConfigError("unknown predictor '" + model + "' (nmf, svd, nb)");
    }
    for (auto& [k, v] : p.values) all.values[k] = v;
  }
  return all;
}

}  // namespace hyperfair
