// evfuse: dataset generation, training, evaluation and benchmarks.
//
// Exit status: 0 ok, 1 usage or configuration error, 2 data validation
// failure, 3 numerical failure.

#include "evfuse/bag.hpp"
#include "evfuse/bench.hpp"
#include "evfuse/checkpoint.hpp"
#include "evfuse/config.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace evfuse;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 1;
};

void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

RunConfig base_config(const Globals& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  finalize_config(cfg, g.config.empty() ? "defaults" : g.config);
  return cfg;
}

fs::path out_dir(const Globals& g, const char* fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

// A dataset directory (train/ and test/ splits) or a directory holding bags.
std::vector<fs::path> bags_under(const fs::path& dir, const char* split) {
  if (fs::exists(dir / "meta.json")) return {dir};
  auto bags = list_bags(dir / split);
  if (bags.empty()) bags = list_bags(dir);
  if (bags.empty()) throw DataError("no bags found under " + dir.string());
  return bags;
}

// ---- generate ----------------------------------------------------------------

struct GenerateArgs {
  std::optional<double> duration, speed, error_deg, error_m;
  std::optional<int> train_bags, test_bags;
};

int cmd_generate(const Globals& g, const GenerateArgs& a) {
  RunConfig cfg = base_config(g);
  if (a.duration) cfg.sim.duration_s = *a.duration;
  if (a.speed) cfg.sim.speed = *a.speed;
  if (a.error_deg) cfg.sim.extrinsic_error_deg = *a.error_deg;
  if (a.error_m) cfg.sim.extrinsic_error_m = *a.error_m;
  if (a.train_bags) cfg.data.train_bags = *a.train_bags;
  if (a.test_bags) cfg.data.test_bags = *a.test_bags;
  finalize_config(cfg, "command line");
  const fs::path out = out_dir(g, "data");
  generate_dataset(cfg, out, log_line);
  std::cout << "dataset " << dataset_hash(cfg) << " in " << out.string() << '\n';
  return kOk;
}

// ---- validate ----------------------------------------------------------------

int cmd_validate(const std::vector<std::string>& dirs, bool trim) {
  bool clean = true;
  for (const auto& d : dirs) {
    if (trim) {
      Bag bag = load_bag(d);
      const std::size_t removed = trim_bag(bag);
      if (removed > 0) write_bag(d, bag);
      std::cout << d << ": trimmed " << removed << " records\n";
    }
    const ValidationReport r = validate_bag(d);
    for (const auto& f : r.findings) {
      std::cout << d << '/' << f.file << ':' << f.line << ": " << f.kind << ": " << f.message << '\n';
    }
    std::cout << d << ": " << r.scan_count << " scans, " << r.event_count << " events, " << r.steering_count
              << " steering records, " << r.findings.size() << " findings\n";
    clean = clean && r.ok();
  }
  return clean ? kOk : kData;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::optional<std::string> variant;
  std::optional<int> latent, epochs, batch_size;
  std::optional<double> lambda, lr;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  RunConfig cfg = base_config(g);
  if (a.variant) cfg.model.fusion.variant = parse_variant(*a.variant);
  if (a.latent) cfg.model.fusion.latent = *a.latent;
  if (a.epochs) cfg.optim.epochs = *a.epochs;
  if (a.batch_size) cfg.optim.batch_size = *a.batch_size;
  if (a.lambda) cfg.loss.lambda = *a.lambda;
  if (a.lr) cfg.optim.lr = *a.lr;
  finalize_config(cfg, "command line");
  const fs::path out = out_dir(g, "run");

  SteeringModel model(cfg.model);
  const bool with_events = model.uses_events();
  const auto triplets = load_triplets(bags_under(a.data, "train"), with_events);
  const Normalizer norm = fit_normalizer(triplets, cfg.sim.range_max);
  const auto samples = prepare_samples(triplets, norm, with_events);

  json config = to_json(cfg);
  const std::string hash = hash_json(config);
  log_line("training " + std::string(to_string(model.variant())) + " on " + std::to_string(samples.size()) +
           " samples, config " + hash);

  TrainConfig tc{cfg.loss, cfg.optim, [](const EpochRecord& e) {
                   log_line("epoch " + std::to_string(e.epoch + 1) + " loss " + std::to_string(e.loss) + " lr " +
                            std::to_string(e.lr));
                 }};
  const auto t0 = std::chrono::steady_clock::now();
  const auto history = fit(model, samples, tc);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  save_checkpoint(out / "checkpoint", model, {{"normalizer", norm.to_json()}}, hash);
  write_history_csv(out / "history.csv", history);
  write_json(out / "config.json", {{"schema_version", kSchemaVersion}, {"config_hash", hash}, {"config", config}});
  const CostReport cost = count_params_flops(model);
  const json summary = {{"schema_version", kSchemaVersion}, {"config_hash", hash},
                        {"variant", to_string(model.variant())}, {"samples", samples.size()},
                        {"epochs", history.size()}, {"final_loss", history.back().loss},
                        {"params", cost.params}, {"flops", cost.flops},
                        {"train_seconds", seconds}};
  write_json(out / "summary.json", summary);
  std::cout << summary.dump(2) << '\n';
  return kOk;
}

// ---- eval --------------------------------------------------------------------

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& data) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  if (!ck.extra.contains("normalizer")) throw CheckpointError(checkpoint + ": manifest lacks the input normalizer");
  const Normalizer norm = Normalizer::from_json(ck.extra.at("normalizer"));
  const bool with_events = ck.model.uses_events();
  const auto triplets = load_triplets(bags_under(data, "test"), with_events);
  const auto samples = prepare_samples(triplets, norm, with_events);
  const EvalReport report = evaluate(ck.model, samples);
  const CostReport cost = count_params_flops(ck.model);

  const fs::path out = out_dir(g, "eval");
  fs::create_directories(out);
  write_predictions_csv(out / "predictions.csv", report);
  json summary = report.summary();
  summary["schema_version"] = kSchemaVersion;
  summary["config_hash"] = ck.config_hash;
  summary["variant"] = to_string(ck.model.variant());
  summary["params"] = cost.params;
  summary["flops"] = cost.flops;
  write_json(out / "summary.json", summary);
  std::cout << summary.dump(2) << '\n';
  return kOk;
}

// ---- bench / plot ------------------------------------------------------------

int cmd_bench(const Globals& g, const std::string& only) {
  const RunConfig cfg = base_config(g);
  const fs::path out = out_dir(g, "bench");
  Bench bench(cfg, out, log_line, g.threads);
  const BenchReport report = bench.run(only);
  for (const char* name : {"table1.md", "table2.md", "table3.md", "misalignment.md"}) {
    const fs::path p = out / "tables" / name;
    if (fs::exists(p)) std::cout << std::ifstream(p).rdbuf() << '\n';
  }
  if (!report.table1.empty()) std::cout << "Table I compute time: " << report.table1_seconds << " s\n";
  return kOk;
}

int cmd_plot(const Globals& g) {
  const fs::path out = out_dir(g, "bench");
  if (!fs::exists(out / "results.csv")) throw std::invalid_argument(out.string() + "/results.csv not found; run bench first");
  write_plots(out);
  for (const auto& e : fs::directory_iterator(out / "plots")) std::cout << e.path().string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LiDAR and event camera fusion for steering regression"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "TOML configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "dataset and training seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--threads", g.threads, "concurrent bench cells")->check(CLI::PositiveNumber);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "simulate train and test bags");
  generate->add_option("--duration", gen.duration, "seconds per bag");
  generate->add_option("--speed", gen.speed, "vehicle speed, m/s");
  generate->add_option("--extrinsic-error-deg", gen.error_deg, "rotation error stored in the bag extrinsics");
  generate->add_option("--extrinsic-error-m", gen.error_m, "translation error stored in the bag extrinsics");
  generate->add_option("--train-bags", gen.train_bags);
  generate->add_option("--test-bags", gen.test_bags);

  std::vector<std::string> validate_dirs;
  bool trim = false;
  auto* validate = app.add_subcommand("validate", "check bag files; --trim drops lead-in and lead-out records");
  validate->add_option("bags", validate_dirs, "bag directories")->required()->check(CLI::ExistingDirectory);
  validate->add_flag("--trim", trim);

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train one model");
  train->add_option("--data", tr.data, "dataset or bag directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--variant", tr.variant, "low_rank_gated, concat_conv, output_mean, lidar_only, event_only");
  train->add_option("--latent", tr.latent, "fusion latent size r");
  train->add_option("--lambda", tr.lambda, "KL loss weight");
  train->add_option("--epochs", tr.epochs);
  train->add_option("--batch-size", tr.batch_size);
  train->add_option("--lr", tr.lr);

  std::string checkpoint, eval_data;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--data", eval_data, "dataset or bag directory")->required()->check(CLI::ExistingDirectory);

  std::string only;
  auto* bench = app.add_subcommand("bench", "run the experiment grid and write tables");
  bench->add_option("--only", only, "table1, table2, table3 or misalignment");

  auto* plot = app.add_subcommand("plot", "rebuild SVG plots from bench results");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (generate->parsed()) return cmd_generate(g, gen);
    if (validate->parsed()) return cmd_validate(validate_dirs, trim);
    if (train->parsed()) return cmd_train(g, tr);
    if (eval->parsed()) return cmd_eval(g, checkpoint, eval_data);
    if (bench->parsed()) return cmd_bench(g, only);
    if (plot->parsed()) return cmd_plot(g);
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const BagFormatError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
