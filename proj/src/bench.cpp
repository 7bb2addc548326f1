#include "evfuse/bench.hpp"

#include "evfuse/bag.hpp"
#include "evfuse/checkpoint.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace evfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string bag_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "bag_%02d", i);
  return buf;
}

std::string fixed(double x, int digits) {
  if (!std::isfinite(x)) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return json::parse(in);
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

json nullable(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }
double from_nullable(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

std::string perturbation_key(double deg, double m) {
  std::ostringstream s;
  s << deg << "deg_" << m << "m";
  return s.str();
}

}  // namespace

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- datasets ----------------------------------------------------------------

void generate_dataset(const RunConfig& cfg, const fs::path& dir, const Logger& log) {
  const json expected = dataset_json(cfg);
  const std::string hash = hash_json(expected);
  const fs::path marker = dir / "dataset.json";
  if (fs::exists(marker)) {
    const json have = read_json(marker);
    if (have.value("config_hash", std::string{}) != hash) {
      throw ResumeMismatchError(dir.string() + " holds a dataset with config hash " +
                                have.value("config_hash", std::string{"?"}) + " but the current configuration hashes to " +
                                hash + "; choose another output directory or restore the original configuration");
    }
    return;
  }
  const auto t0 = Clock::now();
  for (int split = 0; split < 2; ++split) {
    const bool train = split == 0;
    const int count = train ? cfg.data.train_bags : cfg.data.test_bags;
    for (int i = 0; i < count; ++i) {
      const fs::path bag_dir = dir / (train ? "train" : "test") / bag_name(i);
      const sim::SimConfig sc = bag_config(cfg, train, i);
      if (log) log("generating " + bag_dir.string() + " (seed " + std::to_string(sc.seed) + ")");
      sim::generate_bag(sc, bag_dir, hash);
    }
  }
  write_json(marker, {{"schema_version", kSchemaVersion},
                      {"config_hash", hash},
                      {"config", expected},
                      {"generation_seconds", seconds_since(t0)}});
}

std::vector<fs::path> list_bags(const fs::path& split_dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(split_dir)) return out;
  for (const auto& e : fs::directory_iterator(split_dir)) {
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<SampleTriplet> load_triplets(const std::vector<fs::path>& bags, bool with_events) {
  std::vector<SampleTriplet> out;
  for (const auto& b : bags) {
    const Bag bag = load_bag(b, {.load_events = with_events});
    auto t = build_triplets(bag);
    out.insert(out.end(), std::make_move_iterator(t.begin()), std::make_move_iterator(t.end()));
  }
  return out;
}

Dataset load_dataset(const RunConfig& cfg, const fs::path& dir, const Logger& log) {
  generate_dataset(cfg, dir, log);
  Dataset d;
  const json marker = read_json(dir / "dataset.json");
  d.hash = marker.at("config_hash").get<std::string>();
  d.generation_seconds = marker.value("generation_seconds", 0.0);
  const auto train = load_triplets(list_bags(dir / "train"), true);
  const auto test = load_triplets(list_bags(dir / "test"), true);
  d.norm = fit_normalizer(train, cfg.sim.range_max);
  d.train = prepare_samples(train, d.norm, true);
  d.test = prepare_samples(test, d.norm, true);
  if (log) {
    log("dataset " + d.hash + ": " + std::to_string(d.train.size()) + " train / " + std::to_string(d.test.size()) +
        " test samples");
  }
  return d;
}

// ---- table layouts -----------------------------------------------------------

std::vector<std::pair<std::string, CellSpec>> table1_configs() {
  return {
      {"Event only", {FusionVariant::event_only, 16, 0.0, 0}},
      {"LiDAR only", {FusionVariant::lidar_only, 16, 0.0, 0}},
      {"Output fusion (mean)", {FusionVariant::output_mean, 16, 0.0, 0}},
      {"Concat conv fusion", {FusionVariant::concat_conv, 16, 0.0, 0}},
      {"Low-rank gated + KL (ours)", {FusionVariant::low_rank_gated, 16, 0.25, 0}},
  };
}

std::vector<std::pair<std::string, CellSpec>> table2_configs(const std::vector<int>& latent_values) {
  std::vector<std::pair<std::string, CellSpec>> out;
  for (int r : latent_values) out.push_back({"r = " + std::to_string(r), {FusionVariant::low_rank_gated, r, 0.25, 0}});
  return out;
}

std::vector<std::pair<std::string, CellSpec>> table3_configs() {
  return {
      {"Concat fusion, no KL", {FusionVariant::concat_conv, 16, 0.0, 0}},
      {"Concat fusion + KL", {FusionVariant::concat_conv, 16, 0.25, 0}},
      {"Low-rank gated, no KL", {FusionVariant::low_rank_gated, 16, 0.0, 0}},
      {"Low-rank gated + KL (full)", {FusionVariant::low_rank_gated, 16, 0.25, 0}},
  };
}

// ---- bench -------------------------------------------------------------------

Bench::Bench(RunConfig cfg, fs::path out, Logger log, int workers)
    : cfg_(std::move(cfg)), out_(std::move(out)), workers_(std::max(1, workers)) {
  auto mutex = std::make_shared<std::mutex>();
  log_ = [mutex, log = std::move(log)](const std::string& msg) {
    if (!log) return;
    std::lock_guard lock(*mutex);
    log(msg);
  };
}

const Dataset& Bench::dataset() {
  if (!data_) data_ = load_dataset(cfg_, out_ / "data", log_);
  return *data_;
}

ModelConfig Bench::model_config(const CellSpec& spec) const {
  ModelConfig m = cfg_.model;
  m.fusion.variant = spec.variant;
  m.fusion.latent = spec.latent;
  m.init_seed = spec.seed;
  return m;
}

TrainConfig Bench::train_config(const CellSpec& spec) const {
  TrainConfig t;
  t.loss = cfg_.loss;
  t.loss.lambda = spec.lambda;
  t.optim = cfg_.optim;
  t.optim.seed = spec.seed;
  return t;
}

json Bench::cell_json(const CellSpec& spec) const {
  const TrainConfig t = train_config(spec);
  const OptimConfig& o = t.optim;
  return {
      {"schema_version", kSchemaVersion},
      {"dataset", hash_json(dataset_json(cfg_))},
      {"model", to_json(model_config(spec))},
      {"loss", {{"lambda", t.loss.lambda}, {"kl_epsilon", t.loss.kl_epsilon}}},
      {"optim",
       {{"lr", o.lr},
        {"weight_decay", o.weight_decay},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"adam_epsilon", o.adam_epsilon},
        {"restart_epochs", o.restart_epochs},
        {"epochs", o.epochs},
        {"batch_size", o.batch_size},
        {"seed", o.seed},
        {"flip_probability", o.flip_probability},
        {"clip_norm", o.clip_norm}}},
  };
}

fs::path Bench::cell_dir(const CellSpec& spec) const { return out_ / "cells" / hash_json(cell_json(spec)); }

CellResult read_cell_result(const fs::path& result_json) {
  const json j = read_json(result_json);
  CellResult r;
  r.spec.variant = parse_variant(j.at("variant").get<std::string>());
  r.spec.latent = j.at("latent").get<int>();
  r.spec.lambda = j.at("lambda").get<double>();
  r.spec.seed = j.at("seed").get<std::uint64_t>();
  r.hash = j.at("config_hash").get<std::string>();
  r.params = j.at("params").get<std::int64_t>();
  r.flops = j.at("flops").get<std::int64_t>();
  r.fusion_params = j.at("fusion_params").get<std::int64_t>();
  r.rmse = j.at("rmse").get<double>();
  r.mae = j.at("mae").get<double>();
  r.eva = from_nullable(j.at("eva"));
  r.train_seconds = j.at("train_seconds").get<double>();
  r.eval_seconds = j.at("eval_seconds").get<double>();
  return r;
}

CellResult Bench::run_cell(const CellSpec& spec) {
  const json cj = cell_json(spec);
  const std::string hash = hash_json(cj);
  const fs::path dir = out_ / "cells" / hash;
  const std::string name = std::string(to_string(spec.variant)) + " r=" + std::to_string(spec.latent) +
                           " lambda=" + fixed(spec.lambda, 2) + " seed=" + std::to_string(spec.seed);
  if (fs::exists(dir / "result.json")) {
    CellResult r = read_cell_result(dir / "result.json");
    if (r.hash != hash) throw ResumeMismatchError(dir.string() + "/result.json has a different config hash");
    log_("cell " + hash + " (" + name + ") already complete");
    return r;
  }
  fs::create_directories(dir);
  write_json(dir / "config.json", cj);
  const Dataset& data = dataset();
  log_("cell " + hash + " (" + name + ") training");

  SteeringModel model(model_config(spec));
  TrainConfig tc = train_config(spec);
  tc.on_epoch = [&](const EpochRecord& e) {
    if ((e.epoch + 1) % 10 == 0 || e.epoch == 0) {
      log_("  " + hash + " epoch " + std::to_string(e.epoch + 1) + " loss " + fixed(e.loss, 5));
    }
  };
  const auto t0 = Clock::now();
  const auto history = fit(model, data.train, tc);
  const double train_seconds = seconds_since(t0);
  const auto t1 = Clock::now();
  const EvalReport report = evaluate(model, data.test);
  const double eval_seconds = seconds_since(t1);
  const CostReport cost = count_params_flops(model);

  save_checkpoint(dir / "checkpoint", model, {{"normalizer", data.norm.to_json()}, {"dataset_hash", data.hash}},
                  hash);
  write_history_csv(dir / "history.csv", history);
  write_predictions_csv(dir / "predictions.csv", report);

  CellResult r{spec, hash, cost.params, cost.flops, cost.fusion_params, report.rmse, report.mae, report.eva,
               train_seconds, eval_seconds};
  write_json(dir / "result.json", {{"schema_version", kSchemaVersion},
                                   {"config_hash", hash},
                                   {"variant", std::string(to_string(spec.variant))},
                                   {"latent", spec.latent},
                                   {"lambda", spec.lambda},
                                   {"seed", spec.seed},
                                   {"params", cost.params},
                                   {"flops", cost.flops},
                                   {"fusion_params", cost.fusion_params},
                                   {"rmse", report.rmse},
                                   {"mae", report.mae},
                                   {"eva", nullable(report.eva)},
                                   {"train_seconds", train_seconds},
                                   {"eval_seconds", eval_seconds}});
  log_("cell " + hash + " (" + name + ") rmse " + fixed(report.rmse, 4) + " in " + fixed(train_seconds, 1) + " s");
  return r;
}

std::vector<CellResult> Bench::run_cells(const std::vector<CellSpec>& specs) {
  dataset();  // load once before the workers start
  std::vector<CellResult> results(specs.size());
  std::vector<std::exception_ptr> errors(specs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) {
      try {
        results[i] = run_cell(specs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers_; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

std::vector<TableRow> Bench::rows(const std::vector<std::pair<std::string, CellSpec>>& configs,
                                  const std::map<std::string, CellResult>& results) const {
  std::vector<TableRow> out;
  for (const auto& [label, base] : configs) {
    TableRow row;
    row.label = label;
    row.spec = base;
    std::vector<double> rmse, mae, eva;
    for (auto seed : cfg_.bench.seeds) {
      CellSpec s = base;
      s.seed = seed;
      const CellResult& r = results.at(hash_json(cell_json(s)));
      row.runs.push_back(r);
      rmse.push_back(r.rmse);
      mae.push_back(r.mae);
      eva.push_back(r.eva);
    }
    row.median_rmse = median(rmse);
    row.median_mae = median(mae);
    row.median_eva = median(eva);
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<MisalignmentPoint> Bench::misalignment(const std::map<std::string, CellResult>& results) {
  const Dataset& data = dataset();
  std::vector<MisalignmentPoint> points;
  for (const auto& [deg, m] : cfg_.bench.perturbations) {
    const std::string key = perturbation_key(deg, m);
    std::optional<std::vector<Sample>> samples;  // simulated lazily
    MisalignmentPoint p;
    p.deg = deg;
    p.meters = m;
    for (double lambda : {0.0, 0.25}) {
      for (auto seed : cfg_.bench.seeds) {
        const CellSpec spec{FusionVariant::low_rank_gated, 16, lambda, seed};
        const std::string hash = hash_json(cell_json(spec));
        if (!results.contains(hash)) throw std::logic_error("misalignment study needs cell " + hash);
        const fs::path cache = out_ / "cells" / hash / "misalignment.json";
        json cached = fs::exists(cache) ? read_json(cache) : json::object();
        double rmse_value;
        if (cached.contains(key)) {
          rmse_value = cached[key].at("rmse").get<double>();
        } else {
          if (!samples) {
            std::vector<SampleTriplet> triplets;
            for (int j = 0; j < cfg_.data.test_bags; ++j) {
              sim::SimConfig sc = bag_config(cfg_, false, j);
              sc.extrinsic_error_deg = deg;
              sc.extrinsic_error_m = m;
              auto t = build_triplets(sim::simulate(sc).bag);
              triplets.insert(triplets.end(), t.begin(), t.end());
            }
            samples = prepare_samples(triplets, data.norm, true);
            log_("misalignment " + key + ": simulated " + std::to_string(samples->size()) + " test samples");
          }
          const Checkpoint ck = load_checkpoint(out_ / "cells" / hash / "checkpoint");
          const EvalReport r = evaluate(ck.model, *samples);
          rmse_value = r.rmse;
          cached[key] = {{"deg", deg}, {"meters", m}, {"rmse", r.rmse}, {"mae", r.mae}, {"eva", nullable(r.eva)}};
          write_json(cache, cached);
        }
        (lambda > 0 ? p.per_seed_kl : p.per_seed_no_kl).push_back(rmse_value);
      }
    }
    p.rmse_no_kl = median(p.per_seed_no_kl);
    p.rmse_kl = median(p.per_seed_kl);
    points.push_back(std::move(p));
  }
  for (auto& p : points) {
    p.degradation_no_kl = p.rmse_no_kl - points.front().rmse_no_kl;
    p.degradation_kl = p.rmse_kl - points.front().rmse_kl;
  }
  return points;
}

BenchReport Bench::run(const std::string& only) {
  static const std::set<std::string> kParts{"", "table1", "table2", "table3", "misalignment"};
  if (!kParts.contains(only)) {
    throw std::invalid_argument("--only expects table1, table2, table3 or misalignment; got '" + only + "'");
  }
  auto wants = [&](const std::string& part) { return only.empty() || only == part; };

  std::vector<std::pair<std::string, CellSpec>> configs;
  if (wants("table1")) for (auto& c : table1_configs()) configs.push_back(c);
  if (wants("table2")) for (auto& c : table2_configs(cfg_.bench.latent_values)) configs.push_back(c);
  if (wants("table3") || wants("misalignment")) for (auto& c : table3_configs()) configs.push_back(c);

  std::vector<CellSpec> specs;
  std::set<std::string> seen;
  for (const auto& [label, base] : configs) {
    for (auto seed : cfg_.bench.seeds) {
      CellSpec s = base;
      s.seed = seed;
      if (seen.insert(hash_json(cell_json(s))).second) specs.push_back(s);
    }
  }
  log_("bench: " + std::to_string(specs.size()) + " cells under " + out_.string());
  std::map<std::string, CellResult> results;
  for (auto& r : run_cells(specs)) results[r.hash] = r;

  BenchReport report;
  if (wants("table1")) {
    report.table1 = rows(table1_configs(), results);
    report.table1_seconds = dataset().generation_seconds;
    for (const auto& row : report.table1) {
      for (const auto& r : row.runs) report.table1_seconds += r.train_seconds + r.eval_seconds;
    }
  }
  if (wants("table2")) report.table2 = rows(table2_configs(cfg_.bench.latent_values), results);
  if (wants("table3")) report.table3 = rows(table3_configs(), results);
  if (wants("misalignment")) report.misalignment = misalignment(results);
  write_reports(out_, report);
  write_plots(out_);
  return report;
}

// ---- reports -----------------------------------------------------------------

namespace {

std::string per_seed(const TableRow& row) {
  std::string s;
  for (const auto& r : row.runs) s += (s.empty() ? "" : ", ") + fixed(r.rmse, 4);
  return s;
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

std::string table1_md(const BenchReport& rep) {
  std::ostringstream s;
  s << "# Table I: variant comparison\n\n"
    << "Median over seeds. Steering errors in degrees; FLOPs per single-sample forward pass.\n\n"
    << "| Variant | Params | FLOPs | RMSE | MAE | EVA | RMSE per seed |\n"
    << "|---|---:|---:|---:|---:|---:|---|\n";
  for (const auto& row : rep.table1) {
    s << "| " << row.label << " | " << row.runs.front().params << " | " << row.runs.front().flops << " | "
      << fixed(row.median_rmse, 4) << " | " << fixed(row.median_mae, 4) << " | " << fixed(row.median_eva, 4) << " | "
      << per_seed(row) << " |\n";
  }
  return s.str();
}

std::string table2_md(const BenchReport& rep) {
  std::ostringstream s;
  s << "# Table II: latent size r of the low-rank gated fusion\n\n"
    << "| r | Fusion params | Params | FLOPs | RMSE | MAE | EVA | RMSE per seed |\n"
    << "|---:|---:|---:|---:|---:|---:|---:|---|\n";
  for (const auto& row : rep.table2) {
    const auto& r0 = row.runs.front();
    s << "| " << row.spec.latent << " | " << r0.fusion_params << " | " << r0.params << " | " << r0.flops << " | "
      << fixed(row.median_rmse, 4) << " | " << fixed(row.median_mae, 4) << " | " << fixed(row.median_eva, 4) << " | "
      << per_seed(row) << " |\n";
  }
  return s.str();
}

std::string table3_md(const BenchReport& rep) {
  std::ostringstream s;
  s << "# Table III: component ablation\n\n"
    << "| # | Configuration | KL loss | Fusion params | RMSE | MAE | EVA | RMSE per seed |\n"
    << "|---:|---|:---:|---:|---:|---:|---:|---|\n";
  int i = 1;
  for (const auto& row : rep.table3) {
    s << "| " << i++ << " | " << row.label << " | " << (row.spec.lambda > 0 ? "yes" : "no") << " | "
      << row.runs.front().fusion_params << " | " << fixed(row.median_rmse, 4) << " | " << fixed(row.median_mae, 4)
      << " | " << fixed(row.median_eva, 4) << " | " << per_seed(row) << " |\n";
  }
  return s.str();
}

std::string misalignment_md(const BenchReport& rep) {
  std::ostringstream s;
  s << "# Extrinsic misalignment at test time\n\n"
    << "Models trained on calibrated data, evaluated on test bags whose stored extrinsics are perturbed.\n"
    << "Degradation is the median RMSE increase over the unperturbed test set.\n\n"
    << "| Rotation (deg) | Translation (m) | RMSE no KL | Degradation no KL | RMSE with KL | Degradation with KL |\n"
    << "|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& p : rep.misalignment) {
    s << "| " << fixed(p.deg, 1) << " | " << fixed(p.meters, 3) << " | " << fixed(p.rmse_no_kl, 4) << " | "
      << fixed(p.degradation_no_kl, 4) << " | " << fixed(p.rmse_kl, 4) << " | " << fixed(p.degradation_kl, 4)
      << " |\n";
  }
  const auto& pts = rep.misalignment;
  bool monotone = true;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    monotone = monotone && pts[i].degradation_no_kl >= pts[i - 1].degradation_no_kl;
  }
  s << "\nDegradation without KL is " << (monotone ? "" : "not ") << "monotone in the perturbation size.\n";
  if (pts.size() > 1) {
    const bool kl_holds = pts.back().degradation_kl <= pts.back().degradation_no_kl;
    s << "At the largest perturbation the KL model degrades " << (kl_holds ? "no more than" : "more than")
      << " the model without KL" << (kl_holds ? ".\n" : " (flag: robustness claim not reproduced).\n");
  }
  return s.str();
}

}  // namespace

void write_reports(const fs::path& out, const BenchReport& report) {
  if (!report.table1.empty()) write_text(out / "tables" / "table1.md", table1_md(report));
  if (!report.table2.empty()) write_text(out / "tables" / "table2.md", table2_md(report));
  if (!report.table3.empty()) write_text(out / "tables" / "table3.md", table3_md(report));
  if (!report.misalignment.empty()) write_text(out / "tables" / "misalignment.md", misalignment_md(report));

  std::ostringstream csv;
  csv << "table,label,variant,latent,lambda,seed,params,flops,fusion_params,rmse,mae,eva,train_seconds,eval_seconds,"
         "hash\n";
  auto emit = [&](const char* table, const std::vector<TableRow>& rows) {
    for (const auto& row : rows) {
      for (const auto& r : row.runs) {
        csv << table << ",\"" << row.label << "\"," << to_string(r.spec.variant) << ',' << r.spec.latent << ','
            << r.spec.lambda << ',' << r.spec.seed << ',' << r.params << ',' << r.flops << ',' << r.fusion_params
            << ',' << fixed(r.rmse, 6) << ',' << fixed(r.mae, 6) << ',' << fixed(r.eva, 6) << ','
            << fixed(r.train_seconds, 2) << ',' << fixed(r.eval_seconds, 2) << ',' << r.hash << '\n';
      }
    }
  };
  emit("table1", report.table1);
  emit("table2", report.table2);
  emit("table3", report.table3);
  write_text(out / "results.csv", csv.str());

  if (!report.misalignment.empty()) {
    std::ostringstream mcsv;
    mcsv << "deg,meters,rmse_no_kl,rmse_kl,degradation_no_kl,degradation_kl\n";
    for (const auto& p : report.misalignment) {
      mcsv << p.deg << ',' << p.meters << ',' << fixed(p.rmse_no_kl, 6) << ',' << fixed(p.rmse_kl, 6) << ','
           << fixed(p.degradation_no_kl, 6) << ',' << fixed(p.degradation_kl, 6) << '\n';
    }
    write_text(out / "misalignment.csv", mcsv.str());
  }
}

// ---- plots -------------------------------------------------------------------

namespace {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

std::string svg_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                       const std::vector<Series>& series, bool log2_x) {
  constexpr double W = 640, H = 420, L = 70, R = 170, T = 40, B = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  auto tx = [&](double x) { return log2_x ? std::log2(x) : x; };
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1;
  if (y0 > y1) y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x1 = x0 + 1;
  const double pad = std::max(1e-9, 0.08 * (y1 - y0));
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << svg_escape(title)
    << "</text>\n"
    << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double yv = y0 + (y1 - y0) * k / 4.0;
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fixed(yv, 3)
      << "</text>\n<line x1=\"" << L << "\" y1=\"" << py(yv) << "\" x2=\"" << W - R << "\" y2=\"" << py(yv)
      << "\" stroke=\"#ddd\"/>\n";
  }
  std::set<double> xticks;
  for (const auto& se : series) xticks.insert(se.x.begin(), se.x.end());
  if (xticks.size() > 12) {
    std::set<double> thin;
    int i = 0;
    const int step = static_cast<int>(xticks.size() / 8 + 1);
    for (double x : xticks) if (i++ % step == 0) thin.insert(x);
    xticks = thin;
  }
  for (double xv : xticks) {
    std::ostringstream label;
    label << xv;
    s << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << label.str()
      << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << svg_escape(xlabel)
    << "</text>\n"
    << "<text transform=\"translate(18," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << svg_escape(ylabel) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& se = series[k];
    const char* c = colors[k % 6];
    s << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < se.x.size(); ++i) s << px(se.x[i]) << ',' << py(se.y[i]) << ' ';
    s << "\"/>\n";
    if (se.x.size() <= 12) {
      for (std::size_t i = 0; i < se.x.size(); ++i) {
        s << "<circle cx=\"" << px(se.x[i]) << "\" cy=\"" << py(se.y[i]) << "\" r=\"3\" fill=\"" << c << "\"/>\n";
      }
    }
    s << "<rect x=\"" << W - R + 12 << "\" y=\"" << T + 18 * k << "\" width=\"12\" height=\"4\" fill=\"" << c
      << "\"/>\n<text x=\"" << W - R + 30 << "\" y=\"" << T + 18 * k + 6 << "\">" << svg_escape(se.name)
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) return {};
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::string cur;
    bool quoted = false;
    for (char c : line) {
      if (c == '"') quoted = !quoted;
      else if (c == ',' && !quoted) f.push_back(std::exchange(cur, {}));
      else cur += c;
    }
    f.push_back(cur);
    rows.push_back(std::move(f));
  }
  return rows;
}

}  // namespace

void write_plots(const fs::path& out) {
  const auto results = read_csv(out / "results.csv");

  // RMSE against r, median over seeds.
  std::map<int, std::vector<double>> by_r;
  for (const auto& f : results) {
    if (f.size() >= 15 && f[0] == "table2") by_r[std::stoi(f[3])].push_back(std::stod(f[9]));
  }
  if (!by_r.empty()) {
    Series s{"low-rank gated + KL", {}, {}};
    for (const auto& [r, v] : by_r) {
      s.x.push_back(r);
      s.y.push_back(median(v));
    }
    write_text(out / "plots" / "rmse_vs_r.svg",
               line_chart("Test RMSE against latent size r", "r (log scale)", "median RMSE (deg)", {s}, true));
  }

  // Misalignment degradation curves, x = rotation error.
  const auto mis = read_csv(out / "misalignment.csv");
  if (!mis.empty()) {
    Series no_kl{"no KL", {}, {}}, kl{"with KL", {}, {}};
    for (const auto& f : mis) {
      no_kl.x.push_back(std::stod(f[0]));
      no_kl.y.push_back(std::stod(f[4]));
      kl.x.push_back(std::stod(f[0]));
      kl.y.push_back(std::stod(f[5]));
    }
    write_text(out / "plots" / "misalignment.svg",
               line_chart("RMSE degradation under extrinsic error", "rotation error (deg)",
                          "median RMSE increase (deg)", {no_kl, kl}, false));
  }

  // Training loss of each Table I variant, first seed.
  std::vector<Series> curves;
  std::set<std::string> labels;
  for (const auto& f : results) {
    if (f.size() < 15 || f[0] != "table1" || !labels.insert(f[1]).second) continue;
    const fs::path hist = out / "cells" / f[14] / "history.csv";
    if (!fs::exists(hist)) continue;
    Series s{f[1], {}, {}};
    for (const auto& e : read_history_csv(hist)) {
      s.x.push_back(e.epoch + 1);
      s.y.push_back(e.loss);
    }
    curves.push_back(std::move(s));
  }
  if (!curves.empty()) {
    write_text(out / "plots" / "loss_curves.svg",
               line_chart("Training loss (first seed)", "epoch", "mean training loss", curves, false));
  }
}

}  // namespace evfuse
