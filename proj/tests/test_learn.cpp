#include <doctest.h>

#include "evfuse/bag.hpp"
#include "evfuse/checkpoint.hpp"
#include "evfuse/learn.hpp"
#include "evfuse/simworld.hpp"
#include "gradcheck.hpp"

#include <filesystem>
#include <fstream>
#include <numbers>

using namespace evfuse;
using evfuse::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

Tensor two_point(double a, double b) { return Tensor::from({1, 1, 1, 2}, Eigen::Vector2d(a, b)); }

std::vector<Sample> overfit_samples() {
  sim::SimConfig cfg;
  cfg.seed = 7;
  cfg.duration_s = 3.0;
  const auto all = build_triplets(sim::simulate(cfg).bag);
  std::vector<SampleTriplet> few;
  for (int i = 0; i < 8; ++i) few.push_back(all[static_cast<std::size_t>(i) * 12]);
  return prepare_samples(few, fit_normalizer(few, cfg.range_max), true);
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.encoder.widths = {4, 8, 8, 8};
  cfg.fusion.latent = 4;
  cfg.decoder_hidden = 8;
  return cfg;
}

}  // namespace

TEST_CASE("symmetrized KL closed forms") {
  const Tensor p = two_point(0.75, 0.25);
  const Tensor q = two_point(0.25, 0.75);
  CHECK(std::abs(symmetric_kl(p, q).item() - std::log(3.0)) < 1e-9);
  CHECK(symmetric_kl(p, q).item() == symmetric_kl(q, p).item());
  CHECK(symmetric_kl(p, p).item() == 0.0);

  // Same case reached through spatial softmax of logits (ln 3, 0); the
  // epsilon floor moves the value by O(epsilon).
  const Tensor a = two_point(std::log(3.0), 0.0);
  const Tensor b = two_point(0.0, std::log(3.0));
  const double via_logits = symmetric_kl(feature_distribution(a, 1e-8), feature_distribution(b, 1e-8)).item();
  CHECK(std::abs(via_logits - std::log(3.0)) < 1e-7);
}

TEST_CASE("divergence loss identities") {
  std::mt19937_64 rng(1);
  const Tensor f = random_tensor({2, 3, 4, 5}, rng, false);
  CHECK(std::abs(kl_divergence_loss(f, f, f).item()) < 1e-10);

  for (int trial = 0; trial < 20; ++trial) {
    const Tensor A = random_tensor({2, 3, 4, 5}, rng, false, -3.0, 3.0);
    const Tensor B = random_tensor({2, 3, 4, 5}, rng, false, -3.0, 3.0);
    const Tensor C = random_tensor({2, 3, 4, 5}, rng, false, -3.0, 3.0);
    const Tensor pa = feature_distribution(A, 1e-8), pb = feature_distribution(B, 1e-8);
    CHECK(symmetric_kl(pa, pb).item() == symmetric_kl(pb, pa).item());
    CHECK(kl_divergence_loss(A, B, C).item() > 0.0);
  }
  // Batch averaging: duplicating the batch leaves the loss unchanged.
  const Tensor one = random_tensor({1, 2, 3, 3}, rng, false);
  const Tensor other = random_tensor({1, 2, 3, 3}, rng, false);
  Eigen::VectorXd twice(2 * one.numel()), twice_other(2 * one.numel());
  twice << one.values(), one.values();
  twice_other << other.values(), other.values();
  const Tensor one2 = Tensor::from({2, 2, 3, 3}, twice), other2 = Tensor::from({2, 2, 3, 3}, twice_other);
  CHECK(kl_divergence_loss(one2, other2, other2).item() ==
        doctest::Approx(kl_divergence_loss(one, other, other).item()).epsilon(1e-12));

  CHECK_THROWS_AS(kl_divergence_loss(f, random_tensor({2, 3, 4, 4}, rng, false), f), DimensionError);
}

TEST_CASE("divergence loss gradient") {
  std::mt19937_64 rng(2);
  const auto r = testing::gradcheck(
      [](const std::vector<Tensor>& x) { return kl_divergence_loss(x[0], x[1], x[2]); },
      {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng)});
  CHECK(r.max_rel_error < testing::kRelTol);
}

TEST_CASE("total loss composition") {
  std::mt19937_64 rng(3);
  Prediction p;
  p.angle = Tensor::from({3}, Eigen::Vector3d(1.0, 2.0, -1.0));
  p.f_S = random_tensor({3, 2, 2, 2}, rng, false);
  p.f_D = random_tensor({3, 2, 2, 2}, rng, false);
  p.f_E = random_tensor({3, 2, 2, 2}, rng, false);
  const Tensor y = Tensor::from({3}, Eigen::Vector3d(0.0, 2.0, 1.0));
  const double mse = (1.0 + 0.0 + 4.0) / 3.0;

  CHECK(total_loss(p, y, {.lambda = 0.0}).item() == doctest::Approx(mse).epsilon(1e-15));
  const double div = kl_divergence_loss(p.f_S, p.f_D, p.f_E).item();
  CHECK(total_loss(p, y, {.lambda = 0.25}).item() == doctest::Approx(0.25 * div + mse).epsilon(1e-14));

  Prediction unimodal;
  unimodal.angle = p.angle;
  CHECK(total_loss(unimodal, y, {.lambda = 0.25}).item() == mse_loss(p.angle, y).item());

  Prediction perfect;
  perfect.angle = y;
  perfect.f_S = perfect.f_D = perfect.f_E = p.f_S;
  CHECK(std::abs(total_loss(perfect, y, {}).item()) < 1e-10);
}

TEST_CASE("regression metrics") {
  const std::vector<double> y{1.0, -2.0, 3.5, 0.0};
  CHECK(rmse(y, y) == 0.0);
  CHECK(mae(y, y) == 0.0);
  CHECK(eva(y, y) == 1.0);

  const std::vector<double> zeros{0.0, 0.0}, pred{3.0, 4.0};
  CHECK(std::abs(rmse(zeros, pred) - 3.5355339059327378) < 1e-12);
  CHECK(mae(zeros, pred) == 3.5);

  const double m = (1.0 - 2.0 + 3.5 + 0.0) / 4.0;
  CHECK(eva(y, std::vector<double>(4, m)) == doctest::Approx(0.0).epsilon(1e-15));

  CHECK_THROWS_AS(eva(std::vector<double>{2.0, 2.0}, std::vector<double>{1.0, 3.0}), std::domain_error);
  CHECK_THROWS_AS(rmse(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(mae(y, zeros), std::invalid_argument);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(1 + trial % 17), b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = u(rng);
      b[i] = u(rng);
    }
    CHECK(rmse(a, b) >= mae(a, b));
    CHECK(mae(a, b) >= 0.0);
    if (a.size() > 1) {
      const double shift = u(rng);
      auto as = a, bs = b;
      for (auto& x : as) x += shift;
      for (auto& x : bs) x += shift;
      CHECK(eva(as, bs) == doctest::Approx(eva(a, b)).epsilon(1e-9));
      CHECK(eva(a, b) <= 1.0);
    }
  }
}

TEST_CASE("AdamW single-step hand trace") {
  OptimConfig cfg;
  cfg.weight_decay = 0.01;
  const double lr = 1e-3, theta0 = 0.7;
  Tensor theta = Tensor::scalar(theta0, true);
  backward(theta);  // d theta / d theta = 1
  AdamState state;
  adamw_step({{"theta", theta}}, state, cfg, lr);
  // Bias-corrected moments of a single g = 1 are exactly 1.
  const double expected = theta0 - lr * 1.0 / (1.0 + cfg.adam_epsilon) - lr * cfg.weight_decay * theta0;
  CHECK(theta.item() == doctest::Approx(expected).epsilon(1e-15));

  OptimConfig still;
  still.weight_decay = 0.0;
  Tensor x = Tensor::from({3}, Eigen::Vector3d(1.0, -2.0, 3.0), true);
  x.zero_grad();
  AdamState s2;
  for (int i = 0; i < 5; ++i) adamw_step({{"x", x}}, s2, still, 1e-2);
  CHECK(x.values() == Eigen::Vector3d(1.0, -2.0, 3.0));
}

TEST_CASE("AdamW is deterministic") {
  auto run = [] {
    std::mt19937_64 rng(5);
    Tensor w = random_tensor({4, 3}, rng);
    const Tensor x = random_tensor({6, 3}, rng, false);
    AdamState state;
    for (int step = 0; step < 25; ++step) {
      w.zero_grad();
      backward(sum(square(linear(x, w, Tensor::zeros({4})))));
      adamw_step({{"w", w}}, state, OptimConfig{}, 1e-2);
    }
    return Eigen::VectorXd(w.values());
  };
  CHECK(run() == run());
}

TEST_CASE("cosine annealing with warm restarts") {
  CHECK(cosine_warm_restarts(0, 1e-3, 30) == 1e-3);
  CHECK(cosine_warm_restarts(15, 1e-3, 30) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(cosine_warm_restarts(30, 1e-3, 30) == 1e-3);
  CHECK(cosine_warm_restarts(45, 1e-3, 30) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(cosine_warm_restarts(29.999, 1e-3, 30) < 1e-9);
  CHECK_THROWS_AS(cosine_warm_restarts(1, 1e-3, 0.5), std::invalid_argument);
}

TEST_CASE("sample preparation and flipped batches") {
  sim::SimConfig cfg;
  cfg.seed = 2;
  cfg.duration_s = 0.5;
  const auto triplets = build_triplets(sim::simulate(cfg).bag);
  const Normalizer norm = fit_normalizer(triplets, cfg.range_max);
  int max_count = 0;
  for (const auto& t : triplets) {
    max_count = std::max({max_count, t.event_frame->on_counts.maxCoeff(), t.event_frame->off_counts.maxCoeff()});
  }
  CHECK(norm.event_log_max == std::log1p(max_count));
  const auto samples = prepare_samples(triplets, norm, true);
  REQUIRE(samples.size() == triplets.size());
  const Index plane = 65 * 86;
  CHECK(samples[0].depth.size() == 2 * plane);
  CHECK(samples[0].depth.maxCoeff() <= 1.0f);
  CHECK(samples[0].events.maxCoeff() <= 1.0f);
  const auto& d2 = triplets[0].depth_t2->pixels;
  CHECK(samples[0].depth[plane + 3 * 86 + 40] == static_cast<float>(d2(3, 40) / 10.0));

  const std::vector<std::size_t> idx{0, 1};
  const Batch plain = make_batch(samples, idx, {}, 65, 86);
  const Batch flipped = make_batch(samples, idx, {true, false}, 65, 86);
  CHECK(flipped.target.values()[0] == -plain.target.values()[0]);
  CHECK(flipped.target.values()[1] == plain.target.values()[1]);
  for (Index c = 0; c < 2; ++c) {
    for (Index v = 0; v < 65; v += 7) {
      for (Index u = 0; u < 86; u += 5) {
        CHECK(flipped.depth.at({0, c, v, u}) == plain.depth.at({0, c, v, 85 - u}));
        CHECK(flipped.events.at({0, c, v, u}) == plain.events.at({0, c, v, 85 - u}));
        CHECK(flipped.depth.at({1, c, v, u}) == plain.depth.at({1, c, v, u}));
      }
    }
  }

  const auto lidar_only = prepare_samples(triplets, norm, false);
  CHECK(lidar_only[0].events.size() == 0);
  CHECK_FALSE(make_batch(lidar_only, idx, {}, 65, 86).events.defined());
}

TEST_CASE("eight samples are memorised within 200 steps") {
  const auto samples = overfit_samples();
  SteeringModel model(ModelConfig{});
  TrainConfig cfg;
  cfg.optim.epochs = 200;
  cfg.optim.batch_size = 8;
  cfg.optim.flip_probability = 0.0;
  const auto history = fit(model, samples, cfg);
  REQUIRE(history.size() == 200);
  for (const auto& e : history) CHECK(std::isfinite(e.loss));
  CHECK(history.back().loss < history.front().loss);
  const EvalReport r = evaluate(model, samples);
  CHECK(r.rmse < 0.1);
  CHECK(r.targets.size() == 8);
}

TEST_CASE("training is deterministic and the checkpoint reloads exactly") {
  const auto samples = overfit_samples();
  TrainConfig cfg;
  cfg.optim.epochs = 6;
  cfg.optim.batch_size = 3;
  auto train = [&] {
    SteeringModel m(small_model());
    auto h = fit(m, samples, cfg);
    return std::pair{std::move(m), std::move(h)};
  };
  auto [a, ha] = train();
  auto [b, hb] = train();
  REQUIRE(ha.size() == hb.size());
  for (std::size_t i = 0; i < ha.size(); ++i) CHECK(ha[i].loss == hb[i].loss);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].tensor.values() == b.parameters()[i].tensor.values());
  }

  const fs::path dir = fs::temp_directory_path() / "evfuse_test_ckpt";
  fs::remove_all(dir);
  const nlohmann::json extra = {{"normalizer", Normalizer{}.to_json()}};
  save_checkpoint(dir, a, extra, "cafe");
  const Checkpoint ck = load_checkpoint(dir);
  CHECK(ck.config_hash == "cafe");
  CHECK(ck.extra == extra);
  CHECK(to_string(ck.model.variant()) == "low_rank_gated");
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(ck.model.parameters()[i].name == a.parameters()[i].name);
    CHECK(ck.model.parameters()[i].tensor.values() == a.parameters()[i].tensor.values());
  }
  const EvalReport ra = evaluate(a, samples), rb = evaluate(ck.model, samples);
  CHECK(ra.rmse == rb.rmse);
  CHECK(ra.predictions == rb.predictions);

  const fs::path dir2 = fs::temp_directory_path() / "evfuse_test_ckpt2";
  save_checkpoint(dir2, b, extra, "cafe");
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir / "params.bin") == slurp(dir2 / "params.bin"));
  CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));

  auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest["schema_version"] == kCheckpointSchemaVersion);
  CHECK(manifest["parameters"][1]["dtype"] == "f32");
  manifest["schema_version"] = 99;
  std::ofstream(dir / "manifest.json") << manifest.dump();
  CHECK_THROWS_AS(load_checkpoint(dir), CheckpointError);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  auto samples = overfit_samples();
  samples[3].target = std::numeric_limits<double>::quiet_NaN();
  SteeringModel m(small_model());
  TrainConfig cfg;
  cfg.optim.batch_size = 8;
  cfg.optim.epochs = 1;
  try {
    fit(m, samples, cfg);
    FAIL("expected divergence");
  } catch (const TrainingDivergedError& e) {
    CHECK(e.epoch == 0);
    CHECK(e.batch == 0);
    CHECK(e.op == "loss");
  }
  CHECK_THROWS_AS(fit(m, {}, cfg), std::invalid_argument);
}

TEST_CASE("evaluation reports") {
  const auto samples = overfit_samples();
  SteeringModel m(small_model());
  CHECK_THROWS_AS(evaluate(m, {}), std::invalid_argument);
  const EvalReport r = evaluate(m, samples);
  CHECK(r.predictions.size() == samples.size());
  CHECK(r.rmse == rmse(r.targets, r.predictions));
  CHECK(r.summary().contains("eva"));

  const fs::path p = fs::temp_directory_path() / "evfuse_test_predictions.csv";
  write_predictions_csv(p, r);
  const EvalReport back = read_predictions_csv(p);
  CHECK(back.targets == r.targets);
  CHECK(back.predictions == r.predictions);
  CHECK(back.rmse == r.rmse);
  CHECK(back.eva == r.eva);

  const std::vector<EpochRecord> h{{0, 1.25, 1e-3}, {1, 0.5, 9.97e-4}};
  const fs::path hp = fs::temp_directory_path() / "evfuse_test_history.csv";
  write_history_csv(hp, h);
  const auto hb = read_history_csv(hp);
  REQUIRE(hb.size() == 2);
  CHECK(hb[1].loss == 0.5);
  CHECK(hb[1].lr == 9.97e-4);
  fs::remove(p);
  fs::remove(hp);
}
