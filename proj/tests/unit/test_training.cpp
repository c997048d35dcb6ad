#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "lbc/bytes.hpp"
#include "lbc/codec.hpp"
#include "lbc/image_io.hpp"
#include "lbc/metrics.hpp"
#include "lbc/training.hpp"
#include "test_util.hpp"

namespace lbc {
namespace {

namespace fs = std::filesystem;
using test::tiny_hps;

// Small weight perturbation so nothing sits exactly at its initial value.
template <typename T>
void jitter(BasicModel<T>& model, std::uint64_t seed, double amount) {
  Rng rng(seed);
  for (auto& [name, p] : model.params()) {
    for (auto& v : p.mutable_value().data()) v = static_cast<T>(v + rng.uniform(-amount, amount));
  }
}

TEST(OpenLoop, MatchesClosedLoopCodec) {
  auto model = Model::initialize(tiny_hps(8, 16, 4, 3), 3);
  jitter(model, 4, 0.05);
  const auto img = synthetic_image(24, 16, 8);  // 3 x 2 blocks
  const auto enc = encode_image(img, model, {.keep_trace = true});

  ad::NoGradGuard no_grad;
  const auto x = ad::constant(b2c(img, 8).data);
  const auto ctx = ad::constant(enc.recon.data);
  const auto out = open_loop_forward(x, ctx, model, static_cast<const Tensor<float>*>(nullptr));
  double worst = 0.0;
  for (std::int64_t j = 0; j < 6; ++j) {
    const auto r = j / 2, c = j % 2;
    const auto& tr = enc.trace[static_cast<std::size_t>(j)];
    for (int i = 0; i < 4; ++i) {
      worst = std::max<double>(worst, std::abs(out.y.value().at(i, r, c) - tr.y[static_cast<std::size_t>(i)]));
      worst = std::max<double>(worst, std::abs(out.gp.mu.value().at(i, r, c) - tr.mu[static_cast<std::size_t>(i)]));
      worst = std::max<double>(worst, std::abs(out.gp.sigma.value().at(i, r, c) - tr.sigma[static_cast<std::size_t>(i)]));
      EXPECT_EQ(out.y_tilde.value().at(i, r, c), static_cast<float>(tr.symbols[static_cast<std::size_t>(i)]));
    }
    for (std::int64_t ch = 0; ch < 3 * 64; ++ch) {
      const float v = std::clamp(out.x_tilde.value().at(ch, r, c), 0.0f, 1.0f);
      worst = std::max<double>(worst, std::abs(v - enc.recon.data.at(ch, r, c)));
    }
  }
  EXPECT_LT(worst, 1e-5);
  EXPECT_NEAR(open_loop_cost(model, img, enc.recon_image, 0.01), closed_loop_cost(model, img, 0.01), 1e-4);
}

struct GradFixture {
  BasicModel<double> model;
  Tensor<double> x, ctx, n0, n1;
};

GradFixture grad_fixture() {
  GradFixture f;
  f.model = BasicModel<double>::initialize(tiny_hps(4, 8, 2, 1), 17);
  jitter(f.model, 18, 0.05);
  Rng rng(19);
  f.x = test::random_tensor(Shape{48, 2, 2}, rng, 0.0, 1.0);
  f.ctx = test::random_tensor(Shape{48, 2, 2}, rng, 0.0, 1.0);
  f.n0 = test::random_tensor(Shape{2, 2, 2}, rng, -0.5, 0.5);
  f.n1 = test::random_tensor(Shape{2, 2, 2}, rng, -0.5, 0.5);
  return f;
}

TEST(Gradients, RdCostMatchesFiniteDifferences) {
  auto f = grad_fixture();
  auto params = f.model.parameter_list();
  const double err = ad::grad_check(
      [&] {
        const auto x = ad::constant(f.x);
        return rd_cost(x, open_loop_forward(x, ad::constant(f.ctx), f.model, &f.n0), 0.01, 64.0);
      },
      params);
  EXPECT_LT(err, 1e-4);
}

TEST(Gradients, FinetuneCostMatchesFiniteDifferences) {
  auto f = grad_fixture();
  auto params = f.model.parameter_list();
  const double err = ad::grad_check(
      [&] {
        return finetune_cost(ad::constant(f.x), ad::constant(f.ctx), f.model, f.n0, f.n1, 0.01, 64.0);
      },
      params);
  EXPECT_LT(err, 1e-4);
}

TEST(RdCost, HandBuiltTwoLatents) {
  OpenLoopOutput<double> out;
  out.y_tilde = ad::constant(Tensor<double>(Shape{2, 1, 1}, std::vector<double>{0.3, -1.2}));
  out.gp.mu = ad::constant(Tensor<double>(Shape{2, 1, 1}, std::vector<double>{0.0, -1.0}));
  out.gp.sigma = ad::constant(Tensor<double>(Shape{2, 1, 1}, std::vector<double>{1.0, 0.5}));
  out.x_tilde = ad::constant(Tensor<double>(Shape{2, 1, 1}, std::vector<double>{0.5, 0.25}));
  const auto x = ad::constant(Tensor<double>(Shape{2, 1, 1}, std::vector<double>{0.4, 0.5}));

  auto bin = [](double v, double mu, double s) {
    const auto cdf = [&](double t) { return 0.5 * std::erfc(-(t - mu) / (s * std::sqrt(2.0))); };
    return cdf(v + 0.5) - cdf(v - 0.5);
  };
  const double bits = -std::log2(bin(0.3, 0.0, 1.0)) - std::log2(bin(-1.2, -1.0, 0.5));
  const double mse = (0.01 + 0.0625) / 2.0;
  const double lambda = 0.02, pixels = 4.0;
  EXPECT_NEAR(rd_cost(x, out, lambda, pixels).value().item(), bits / pixels + lambda * 65025.0 * mse, 1e-9);
  EXPECT_NEAR(rd_cost(x, out, 0.0, pixels).value().item(), bits / pixels, 1e-12);

  out.x_tilde = x;
  EXPECT_NEAR(rd_cost(x, out, lambda, pixels).value().item(), bits / pixels, 1e-12);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  std::map<std::string, ad::Var<float>> params;
  params.emplace("w", ad::parameter(Tensor<float>(Shape{3}, std::vector<float>{1, -2, 3})));
  const auto before = params.at("w").value();
  Adam adam(1e-2);
  for (int i = 0; i < 10; ++i) adam.step(params);
  EXPECT_EQ(test::vec(params.at("w").value()), test::vec(before));
}

TEST(Adam, ConstantGradientStepsByLr) {
  std::map<std::string, ad::Var<float>> params;
  params.emplace("w", ad::parameter(Tensor<float>(Shape{2}, std::vector<float>{0, 0})));
  Adam adam(1e-3);
  float prev0 = 0, prev1 = 0;
  for (int i = 0; i < 200; ++i) {
    auto& p = params.at("w");
    p.node()->grad_buffer()[0] = 3.0f;
    p.node()->grad_buffer()[1] = -0.01f;
    prev0 = p.value()[0];
    prev1 = p.value()[1];
    adam.step(params);
  }
  EXPECT_NEAR(params.at("w").value()[0] - prev0, -1e-3, 1e-6);
  EXPECT_NEAR(params.at("w").value()[1] - prev1, 1e-3, 1e-6);
}

TEST(Adam, QuadraticConverges) {
  std::map<std::string, ad::Var<float>> params;
  params.emplace("w", ad::parameter(Tensor<float>(Shape{1}, std::vector<float>{5.0f})));
  Adam adam(0.1);
  for (int i = 0; i < 500; ++i) {
    auto& p = params.at("w");
    p.zero_grad();
    auto loss = ad::square(ad::add_scalar(p, -1.5f));
    ad::backward(ad::sum(loss));
    adam.step(params);
  }
  EXPECT_NEAR(params.at("w").value()[0], 1.5, 1e-2);
}

TEST(Adam, NonFiniteGradientRejected) {
  std::map<std::string, ad::Var<float>> params;
  params.emplace("w", ad::parameter(Tensor<float>(Shape{1}, std::vector<float>{0.0f})));
  params.at("w").node()->grad_buffer()[0] = std::numeric_limits<float>::infinity();
  Adam adam;
  EXPECT_THROW(adam.step(params), NumericError);
}

TEST(Adam, StateRoundTrip) {
  std::map<std::string, ad::Var<float>> params;
  params.emplace("w", ad::parameter(Tensor<float>(Shape{2, 2}, 0.5f)));
  Adam adam(3e-4);
  params.at("w").node()->grad_buffer()[1] = 1.0f;
  adam.step(params);
  const auto bytes = adam.serialize();
  const auto back = Adam::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.steps(), 1);
  EXPECT_DOUBLE_EQ(back.lr(), 3e-4);
}

TEST(Scheduler, ReducesOnPlateauDownToFloor) {
  PlateauScheduler s(0.8, 2e-5, 5, 1e-3);
  double lr = 1e-4;
  EXPECT_EQ(s.observe(1.0, lr), PlateauScheduler::Event::kImproved);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(s.observe(1.0, lr), PlateauScheduler::Event::kNone);
  EXPECT_EQ(s.observe(1.0, lr), PlateauScheduler::Event::kReduced);
  EXPECT_DOUBLE_EQ(lr, 8e-5);

  // Small improvements below the threshold count as plateau.
  double prev = lr;
  for (int i = 0; i < 200; ++i) {
    s.observe(0.99999, lr);
    EXPECT_LE(lr, prev);
    EXPECT_GE(lr, 2e-5);
    prev = lr;
  }
  EXPECT_DOUBLE_EQ(lr, 2e-5);
  PlateauScheduler::Event last = PlateauScheduler::Event::kNone;
  for (int i = 0; i < 5; ++i) last = s.observe(1.0, lr);
  EXPECT_EQ(last, PlateauScheduler::Event::kExhausted);
  EXPECT_DOUBLE_EQ(lr, 2e-5);

  EXPECT_EQ(s.observe(0.5, lr), PlateauScheduler::Event::kImproved);
}

TEST(Data, CropsAreBlockAligned) {
  std::vector<ImageRGB> xs = {synthetic_image(96, 96, 1), synthetic_image(80, 120, 2)};
  Rng rng(5);
  const auto b = crop_batch(xs, xs, 64, 16, 8, rng);
  ASSERT_EQ(b.x.size(), 16u);
  for (std::size_t i = 0; i < b.x.size(); ++i) {
    EXPECT_EQ(b.origin[i].first % 8, 0);
    EXPECT_EQ(b.origin[i].second % 8, 0);
    EXPECT_EQ(b.x[i].height(), 64);
    const auto grid = b2c(b.x[i], 8);
    EXPECT_EQ(grid.rows(), 8);
    EXPECT_EQ(grid.cols(), 8);
    EXPECT_EQ(test::vec(b.x[i].data), test::vec(b.x_hat[i].data));
    const auto& src = xs[b.index[i]];
    EXPECT_EQ(b.x[i].at(1, 5, 7), src.at(1, b.origin[i].first + 5, b.origin[i].second + 7));
  }
  Rng again(5);
  const auto b2 = crop_batch(xs, xs, 64, 16, 8, again);
  EXPECT_EQ(b2.origin, b.origin);
  EXPECT_EQ(b2.index, b.index);

  Rng r3(1);
  EXPECT_THROW(crop_batch(xs, xs, 60, 1, 8, r3), Error);
}

TEST(Data, SmallImagesAreReflectPadded) {
  Rng rng(6);
  const auto img = test::random_image(5, 6, rng);
  const auto p = reflect_pad(img, 8, 9);
  EXPECT_EQ(p.height(), 8);
  EXPECT_EQ(p.width(), 9);
  EXPECT_EQ(p.at(0, 5, 2), img.at(0, 3, 2));
  EXPECT_EQ(p.at(2, 1, 6), img.at(2, 1, 4));
  EXPECT_EQ(p.at(1, 4, 5), img.at(1, 4, 5));
  const auto b = crop_batch({img}, {img}, 16, 2, 8, rng);
  EXPECT_EQ(b.x[0].height(), 16);
}

TEST(Regenerate, DeterministicAndInRange) {
  auto model = Model::initialize(tiny_hps(8, 16, 4, 1), 9);
  jitter(model, 10, 0.3);
  const auto x = synthetic_image(40, 40, 3);
  const auto a = regenerate(model, x, x);
  const auto b = regenerate(model, x, x);
  EXPECT_EQ(test::vec(a.data), test::vec(b.data));
  EXPECT_EQ(a.height(), 40);
  for (float v : a.data.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Config, JsonRoundTripAndErrors) {
  const auto cfg = TrainConfig::from_json_text(
      R"({"hps":"hps1","lambda_index":3,"synthetic_train":4,"synthetic_val":2,"patch":32})");
  EXPECT_EQ(cfg.hps, HyperParams::hps1(3));
  EXPECT_EQ(cfg.patch, 32);
  const auto back = TrainConfig::from_json_text(cfg.to_json_text());
  EXPECT_EQ(back.to_json_text(), cfg.to_json_text());

  EXPECT_THROW(TrainConfig::from_json_text("{not json"), Error);
  EXPECT_THROW(TrainConfig::from_json_text(R"({"synthetic_train":1,"synthetic_val":1,"bogus":1})"), Error);
  EXPECT_THROW(TrainConfig::from_json_text(R"({"synthetic_train":1,"synthetic_val":1,"patch":60})"), Error);
  EXPECT_THROW(TrainConfig::from_json_text(R"({"synthetic_train":1,"synthetic_val":1,"block":5})"), Error);
  EXPECT_THROW(TrainConfig::from_json_text(R"({"synthetic_train":1,"synthetic_val":1,"lr_init":-1})"), Error);
}

TEST(Config, MissingDatasetDirectoryIsDataError) {
  TrainConfig cfg;
  cfg.train_dir = "/nonexistent/train";
  cfg.val_dir = "/nonexistent/val";
  EXPECT_THROW(load_datasets(cfg), DataError);
}

TrainConfig tiny_run_config(const std::string& dir) {
  TrainConfig cfg;
  cfg.hps = tiny_hps(4, 8, 2, 1);
  cfg.seed = 3;
  cfg.synthetic_train = 2;
  cfg.synthetic_val = 1;
  cfg.synthetic_height = 16;
  cfg.synthetic_width = 20;
  cfg.patch = 16;
  cfg.batch = 2;
  cfg.lr_init = 1e-3;
  cfg.steps_per_epoch = 4;
  cfg.sgd_steps_per_acl = 8;
  cfg.acl_min_iters = 2;
  cfg.acl_max_iters = 2;
  cfg.finetune_iters = 1;
  cfg.run_dir = dir;
  return cfg;
}

TEST(Acl, WritesRunDirectoryAndHistory) {
  const auto dir = (fs::temp_directory_path() / "lbc_acl_run").string();
  fs::remove_all(dir);
  const auto cfg = tiny_run_config(dir);
  const auto [train, val] = load_datasets(cfg);
  int calls = 0;
  AclHooks hooks;
  hooks.on_iteration = [&](const AclRecord&, const Model&) { ++calls; };
  const auto res = acl_train(train, val, cfg, hooks);
  EXPECT_EQ(calls, 3);
  ASSERT_EQ(res.state.history.size(), 3u);
  EXPECT_EQ(res.state.history[0].phase, AclPhase::kMain);
  EXPECT_EQ(res.state.history[2].phase, AclPhase::kFinetune);
  for (const char* f : {"config.json", "epochs.csv", "acl.csv", "ckpt_k0.lbcm", "ckpt_k2.lbcm", "model.lbcm", "state.bin"}) {
    EXPECT_TRUE(fs::exists(fs::path(dir) / f)) << f;
  }
  for (const auto& r : res.state.recon_train) {
    for (float v : r.data.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
  EXPECT_EQ(save_checkpoint(load_checkpoint_file(dir + "/model.lbcm")), save_checkpoint(res.model));
  EXPECT_EQ(save_checkpoint(load_checkpoint_file(dir + "/ckpt_k1.lbcm")), save_checkpoint(res.main_model));
  fs::remove_all(dir);
}

TEST(Acl, ResumeIsBitwiseIdentical) {
  const auto dir_a = (fs::temp_directory_path() / "lbc_acl_a").string();
  const auto dir_b = (fs::temp_directory_path() / "lbc_acl_b").string();
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  const auto cfg_a = tiny_run_config(dir_a);
  const auto cfg_b = tiny_run_config(dir_b);
  const auto [train, val] = load_datasets(cfg_a);

  const auto full = acl_train(train, val, cfg_a);
  AclHooks stop;
  stop.stop_after = 1;
  acl_train(train, val, cfg_b, stop);
  const auto resumed = acl_train(train, val, cfg_b);

  EXPECT_EQ(save_checkpoint(full.model), save_checkpoint(resumed.model));
  ASSERT_EQ(full.state.history.size(), resumed.state.history.size());
  for (std::size_t i = 0; i < full.state.history.size(); ++i) {
    EXPECT_EQ(full.state.history[i].closed_cost, resumed.state.history[i].closed_cost);
    EXPECT_EQ(full.state.history[i].open_cost, resumed.state.history[i].open_cost);
  }
  EXPECT_EQ(read_file(dir_a + "/acl.csv"), read_file(dir_b + "/acl.csv"));
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

}  // namespace
}  // namespace lbc
