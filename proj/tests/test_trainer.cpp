#include "doctest.h"

#include <chrono>
#include <cmath>

#include "fixtures.hpp"
#include "rashnet/trainer.hpp"

using namespace rashnet;
namespace fx = rashnet::testing;

namespace {

// ½·L·w² on a scalar parameter, plain gradient descent.
struct Quadratic {
  double curvature;
  Variable w{Tensor::from({1}, {1.0}, DType::f64), true};
  OptimizerState state{0.0, 0.0, {}};

  double loss_at_step(double lr) {
    Variable c(Tensor::from({1}, {0.5 * curvature}, DType::f64));
    Variable loss = sum(mul(mul(w, w), c));
    const double value = loss.value().get(0);
    if (!std::isfinite(value)) return value;
    std::vector<ParamRef> params{{"w", w, 0}};
    zero_grads(params);
    backward(loss);
    const double rates[] = {lr};
    sgd_momentum_step(params, state, rates);
    return value;
  }
};

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

double accuracy_of(Network& net, const Split& split) {
  const auto scores = predict_scores(net, split);
  const auto labels = split.labels();
  std::size_t right = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) right += (scores[i] >= 0.5) == (labels[i] == 1);
  return 100.0 * static_cast<double>(right) / static_cast<double>(scores.size());
}

}  // namespace

TEST_CASE("discriminative rates") {
  auto r = discriminative_lrs(1e-6, 1e-4, 3);
  REQUIRE(r.size() == 3);
  CHECK(r[0] == 1e-6);
  CHECK(r[1] == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(r[2] == 1e-4);
  for (double v : discriminative_lrs(3e-3, 3e-3, 4)) CHECK(v == doctest::Approx(3e-3).epsilon(1e-15));
  CHECK(discriminative_lrs(1e-6, 1e-4, 1) == std::vector<double>{1e-4});
  auto many = discriminative_lrs(1e-7, 1.0, 9);
  CHECK(std::is_sorted(many.begin(), many.end()));
  CHECK_THROWS_AS(discriminative_lrs(0.0, 1e-4, 3), std::invalid_argument);
  CHECK_THROWS_AS(discriminative_lrs(-1.0, 1e-4, 3), std::invalid_argument);
  CHECK_THROWS_AS(discriminative_lrs(1e-3, 1e-4, 3), std::invalid_argument);
}

TEST_CASE("phase defaults") {
  auto h = PhaseConfig::head();
  CHECK(h.epochs == 8);
  CHECK(h.batch_size == 64);
  CHECK(h.policy == TrainPolicy::head_only);
  auto f = PhaseConfig::finetune();
  CHECK(f.epochs == 3);
  CHECK(f.policy == TrainPolicy::all);
  CHECK(f.range == LrRange{1e-6, 1e-4});
  CHECK(f.group_rates(3) == discriminative_lrs(1e-6, 1e-4, 3));
  CHECK_THROWS_AS(h.group_rates(3), std::invalid_argument);  // rate not chosen yet
  h.epochs = 0;
  CHECK_THROWS_AS(h.validate(), std::invalid_argument);
  CHECK_NOTHROW(h.validate(true));
  f.range = {1e-3, 1e-4};
  CHECK_THROWS_AS(f.validate(), std::invalid_argument);
}

TEST_CASE("lr sweep on a quadratic") {
  Quadratic q{100.0};
  auto curve = lr_sweep([&](double lr, int) { return q.loss_at_step(lr); });
  REQUIRE(curve.divergence_index);
  const double bound = 2.0 / q.curvature;
  MESSAGE("divergence rate " << curve.divergence_lr() << " vs bound " << bound);
  CHECK(curve.divergence_lr() > bound / 10);
  CHECK(curve.divergence_lr() < bound * 10);
  CHECK(*curve.divergence_index > curve.best_index);
  for (std::size_t i = 1; i < curve.points.size(); ++i) CHECK(curve.points[i].lr > curve.points[i - 1].lr);
  CHECK(curve.points.front().lr == 1e-7);
  CHECK(curve.suggested_lr == curve.points[curve.best_index].lr / 10);

  const auto csv = curve.to_csv();
  CHECK(csv.rfind("lr,loss_smoothed\n", 0) == 0);
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == curve.points.size() + 1);
}

TEST_CASE("lr sweep shapes") {
  SUBCASE("flat zero loss") {
    auto c = lr_sweep([](double, int) { return 0.0; });
    CHECK_FALSE(c.divergence_index);
    CHECK(c.points.size() == 100);
    CHECK(c.points.back().lr == doctest::Approx(10.0));
    CHECK(c.suggested_lr == doctest::Approx(1.0));
  }
  SUBCASE("dip then blow-up") {
    auto c = lr_sweep([](double lr, int) {
      return lr < 1e-3 ? 2.0 - std::log10(lr / 1e-7) / 4.0 : 1.0 * std::pow(lr / 1e-3, 3.0);
    });
    REQUIRE(c.divergence_index);
    CHECK(c.best_index < *c.divergence_index);
    CHECK(c.points[c.best_index].lr < 2e-3);
  }
  SUBCASE("first step non-finite") {
    CHECK_THROWS_AS(lr_sweep([](double, int) { return std::nan(""); }), NumericError);
  }
  SUBCASE("later non-finite is a divergence") {
    auto c = lr_sweep([](double, int i) { return i < 10 ? 1.0 : INFINITY; });
    REQUIRE(c.divergence_index);
    CHECK(*c.divergence_index == 10);
  }
}

TEST_CASE("gradient descent below the stability bound descends every step") {
  for (double lr : {1e-4, 1e-3, 5e-3, 1.5e-2, 1.99e-2}) {
    Quadratic q{100.0};
    double prev = q.loss_at_step(lr);
    for (int i = 0; i < 30; ++i) {
      const double next = q.loss_at_step(lr);
      if (prev == 0.0) break;
      CHECK(next < prev);
      prev = next;
    }
  }
}

TEST_CASE("lr_find restores network and optimizer state") {
  auto src = fx::separable_source(24, 32, 5);
  Split all{&src, iota_n(24)};
  for (TrainPolicy policy : {TrainPolicy::head_only, TrainPolicy::all}) {
    Network net(NetworkConfig::tiny(), 3);
    net.set_trainable(policy);
    OptimizerState state;
    // Non-empty velocity so the restore is observable.
    train_phase(net, all, [&] {
      auto c = PhaseConfig::head();
      c.policy = policy;
      c.lr = 1e-3;
      c.epochs = 1;
      c.batch_size = 8;
      return c;
    }(), state);
    const auto before = net.state_bytes();
    const auto velocity = state.velocity;
    const auto trainable = net.trainable_count();
    LrFindOptions opt;
    opt.iterations = 30;
    auto curve = lr_find(net, all, 8, state, opt, 1);
    CHECK(curve.points.size() >= 2);
    CHECK(net.state_bytes() == before);
    CHECK(net.trainable_count() == trainable);
    REQUIRE(state.velocity.size() == velocity.size());
    for (const auto& [name, v] : velocity) CHECK(state.velocity.at(name).bit_equal(v));
    for (const auto& p : net.parameters()) CHECK_FALSE(p.var.has_grad());
  }
  Network net(NetworkConfig::tiny(), 3);
  CHECK_THROWS_AS(lr_find(net, Split{&src, {}}, 8, OptimizerState{}), DataError);
}

TEST_CASE("train_phase accounting and freezing") {
  auto src = fx::separable_source(21, 32, 9);
  Split train{&src, iota_n(21)};
  Network net(NetworkConfig::tiny(), 4);
  const auto backbone = net.backbone_bytes();
  auto cfg = PhaseConfig::head(2);
  cfg.lr = 1e-2;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  OptimizerState state;
  auto log = train_phase(net, train, cfg, state, &train);
  CHECK(log.steps == 3 * 3);  // ceil(21/8) batches per epoch
  CHECK(net.backbone_bytes() == backbone);
  REQUIRE(log.epochs.size() == 3);
  CHECK(log.epochs[0].validation.has_value());
  CHECK(log.epochs[2].epoch == 3);
  CHECK(log.epochs[2].phase == "head");

  const auto csv = log.to_csv();
  CHECK(csv.rfind("epoch,phase,mean_loss,sensitivity,specificity,accuracy,auc\n", 0) == 0);

  SUBCASE("determinism") {
    auto run = [&] {
      Network n(NetworkConfig::tiny(), 4);
      OptimizerState s;
      auto c = cfg;
      c.policy = TrainPolicy::all;
      c.augment = true;
      auto l = train_phase(n, train, c, s, &train);
      return std::make_pair(l.to_csv(), n.state_bytes());
    };
    CHECK(run() == run());
  }
  SUBCASE("errors") {
    OptimizerState s;
    CHECK_THROWS_AS(train_phase(net, Split{&src, {}}, cfg, s), DataError);
    std::vector<Tensor> images;
    std::vector<int> labels;
    for (std::size_t i = 0; i < 12; ++i) {
      images.push_back(src.image(i));
      labels.push_back(src.label(i));
    }
    images[10].set(5, std::nan(""));
    TensorSource poisoned(std::move(images), std::move(labels));
    auto bad = cfg;
    bad.batch_size = 4;
    try {
      train_phase(net, Split{&poisoned, iota_n(12)}, bad, s);
      FAIL("expected a numeric failure");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("batch") != std::string::npos);
    }
  }
}

TEST_CASE("tiny network overfits a separable set") {
  const auto t0 = std::chrono::steady_clock::now();
  auto src = fx::separable_source(64, 32, 21);
  Split train{&src, iota_n(64)};
  Network net(NetworkConfig::tiny(), 8);
  auto cfg = PhaseConfig::head();
  cfg.policy = TrainPolicy::all;
  cfg.lr = 1e-2;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  OptimizerState state;
  int reached = -1;
  for (int epoch = 0; epoch < 200 && reached < 0; ++epoch) {
    cfg.seed = static_cast<std::uint64_t>(epoch);
    train_phase(net, train, cfg, state);
    if (accuracy_of(net, train) == 100.0) reached = epoch + 1;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("100% training accuracy after " << reached << " epochs, " << secs << " s");
  CHECK(reached > 0);
  CHECK(secs < 300);
}

TEST_CASE("fit_protocol") {
  auto src = fx::separable_source(40, 32, 31);
  const auto plan = stratified_kfold(Split{&src, iota_n(src.size())}.labels(), 3, 5);
  Network initial(NetworkConfig::tiny(), 1);
  const auto initial_bytes = initial.state_bytes();

  auto head = PhaseConfig::head(1);
  head.epochs = 2;
  head.batch_size = 8;
  auto ft = PhaseConfig::finetune(1);
  ft.batch_size = 8;
  ProtocolOptions opt;
  opt.lr_find.iterations = 20;
  auto result = fit_protocol(initial, src, plan, head, ft, opt);

  CHECK(initial.state_bytes() == initial_bytes);
  CHECK(result.head.folds.size() == 3);
  CHECK(result.finetune.folds.size() == 3);
  CHECK(result.head.phase == "head");
  CHECK(result.finetune.phase == "finetune");
  CHECK(result.head_lr_curve.has_value());
  CHECK(result.head_lr == result.head_lr_curve->suggested_lr);
  REQUIRE(result.auc_trajectory.size() == 3);
  for (const auto& t : result.auc_trajectory) CHECK(t.size() == 4);  // after head + 3 epochs
  CHECK(result.mean_auc_trajectory.size() == 4);
  CHECK(result.finetune.init == "random");
  for (const auto& f : result.folds) {
    CHECK(f.head_log.epochs.size() == 2);
    CHECK(f.finetune_log.epochs.size() == 3);
  }

  SUBCASE("null refinement") {
    ft.epochs = 0;
    head.lr = result.head_lr;
    auto r0 = fit_protocol(initial, src, plan, head, ft, opt);
    CHECK_FALSE(r0.head_lr_curve.has_value());
    REQUIRE(r0.head.folds.size() == r0.finetune.folds.size());
    auto strip = [](MetricsReport r) {
      r.phase.clear();
      return r.to_json();
    };
    CHECK(strip(r0.head) == strip(r0.finetune));
    CHECK(r0.auc_trajectory[0].size() == 1);
  }
  SUBCASE("repeatable") {
    auto again = fit_protocol(initial, src, plan, head, ft, opt);
    CHECK(again.head.to_json() == result.head.to_json());
    CHECK(again.finetune.to_json() == result.finetune.to_json());
  }
}
