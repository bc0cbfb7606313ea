#include <gtest/gtest.h>

#include <cmath>

#include "heatsmooth/data.hpp"
#include "heatsmooth/nn.hpp"

using namespace heatsmooth;

namespace {

Mlp zero_mlp(OutputMode mode) {
  Mlp m = init_mlp({3, 5, 4}, Activation::Relu, 1, mode);
  for (auto& w : m.weights) w = Tensor(w.shape(), 0.0);
  return m;
}

double full_batch_loss(const Mlp& m, const Dataset& ds) {
  ad::Graph g;
  const MlpVars p = bind(g, m, false);
  return cross_entropy(logits(m, p, g.constant(ds.inputs)), ds.labels).value().item();
}

}  // namespace

TEST(Nn, InitIsDeterministicAndBounded) {
  const Mlp a = init_mlp({2, 8, 2}, Activation::Relu, 42);
  const Mlp b = init_mlp({2, 8, 2}, Activation::Relu, 42);
  for (std::size_t l = 0; l < a.num_layers(); ++l) {
    EXPECT_EQ(a.weights[l], b.weights[l]);
    for (double v : a.biases[l].data()) EXPECT_EQ(v, 0.0);
    const double bound = std::sqrt(6.0 / static_cast<double>(a.layer_sizes[l] + a.layer_sizes[l + 1]));
    for (double v : a.weights[l].data()) EXPECT_LE(std::abs(v), bound);
  }
  EXPECT_FALSE(init_mlp({2, 8, 2}, Activation::Relu, 43).weights[0] == a.weights[0]);
  EXPECT_THROW(init_mlp({}, Activation::Relu, 1), InputError);
  EXPECT_THROW(init_mlp({2, 2}, Activation::Relu, 1), InputError);
}

TEST(Nn, ZeroNetworkOutputs) {
  const Tensor x = Tensor::vector({0.3, -1.0, 2.0});
  const Tensor z = forward(zero_mlp(OutputMode::Logits), x);
  const Tensor p = forward(zero_mlp(OutputMode::Probabilities), x);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  for (double v : p.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Nn, ProbabilitiesSumToOne) {
  const Mlp m = init_mlp({3, 16, 5}, Activation::Tanh, 3, OutputMode::Probabilities);
  Rng rng = make_rng(8);
  for (int t = 0; t < 20; ++t) {
    const Tensor x = normal_tensor({3}, 4.0, rng);
    const Tensor p = forward(m, x);
    double s = 0.0;
    for (double v : p.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Nn, DimensionMismatch) {
  const Mlp m = init_mlp({3, 4, 2}, Activation::Relu, 1);
  EXPECT_THROW(forward(m, Tensor::vector({1.0, 2.0})), InputError);
}

TEST(Nn, FastPathMatchesGraphPath) {
  const Mlp m = init_mlp({3, 7, 6, 4}, Activation::Tanh, 5);
  Rng rng = make_rng(2);
  const Tensor x = normal_tensor({5, 3}, 1.0, rng);
  ad::Graph g;
  const MlpVars p = bind(g, m, false);
  const Tensor slow = logits(m, p, g.constant(x)).value();
  const Tensor fast = logits(m, x);
  for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_NEAR(fast[i], slow[i], 1e-13);
}

TEST(Nn, PassCounterCountsRows) {
  const Mlp m = init_mlp({2, 3, 2}, Activation::Relu, 1);
  m.passes.reset();
  logits(m, Tensor({7, 2}));
  predict_class(m, Tensor::vector({0.0, 1.0}));
  EXPECT_EQ(m.passes.get(), 8u);
}

TEST(Nn, PlainSgdStepIsMinusLrTimesGradient) {
  Mlp m = init_mlp({2, 4, 3}, Activation::Relu, 7);
  const Dataset ds = make_blobs(5, 3, 2, 0.3, 1);
  ad::Graph g;
  const MlpVars p = bind(g, m, true);
  const ad::Var loss = cross_entropy(logits(m, p, g.constant(ds.inputs)), ds.labels);
  const ad::Gradients grads = g.backward(loss);
  const Mlp before = m;
  SgdMomentum opt(m, 0.0);
  opt.step(m, p, grads, 0.01);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const Tensor& gw = grads.at(p.weights[l]);
    for (std::size_t i = 0; i < gw.size(); ++i) EXPECT_DOUBLE_EQ(m.weights[l][i], before.weights[l][i] - 0.01 * gw[i]);
    const Tensor& gb = grads.at(p.biases[l]);
    for (std::size_t i = 0; i < gb.size(); ++i) EXPECT_DOUBLE_EQ(m.biases[l][i], before.biases[l][i] - 0.01 * gb[i]);
  }
}

TEST(Nn, SmallLrFullBatchLossDecreases) {
  const Dataset ds = make_blobs(20, 3, 2, 0.4, 3);
  OptimConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.momentum = 0.0;
  cfg.batch_size = ds.size();
  cfg.schedule = {{0, 1.0}};
  double prev = full_batch_loss(init_mlp({2, 16, 3}, Activation::Relu, cfg.seed), ds);
  for (std::size_t e = 1; e <= 10; ++e) {
    cfg.epochs = e;
    const double cur = full_batch_loss(train_base(ds, {2, 16, 3}, cfg).model, ds);
    EXPECT_LE(cur, prev + 1e-15) << "step " << e;
    prev = cur;
  }
}

TEST(Nn, SeparableBlobsAreLearned) {
  const Dataset ds = make_blobs(100, 2, 2, 0.2, 11);
  OptimConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 32;
  const auto rep = train_base(ds, {2, 32, 2}, cfg);
  EXPECT_GE(rep.train_accuracy, 0.99);
}

TEST(Nn, SinglePointIsMemorised) {
  Dataset ds;
  ds.inputs = Tensor::matrix(1, 2, {0.3, -0.7});
  ds.labels = {2};
  ds.num_classes = 3;
  OptimConfig cfg;
  cfg.epochs = 200;
  const auto rep = train_base(ds, {2, 8, 3}, cfg);
  EXPECT_LT(rep.final_loss, 1e-2);
  EXPECT_EQ(predict_class(rep.model, ds.input(0)), 2u);
}

TEST(Nn, TrainingIsDeterministic) {
  const Dataset ds = make_blobs(30, 3, 2, 0.3, 2);
  OptimConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 17;
  const auto a = train_base(ds, {2, 8, 3}, cfg), b = train_base(ds, {2, 8, 3}, cfg);
  for (std::size_t l = 0; l < a.model.num_layers(); ++l) EXPECT_EQ(a.model.weights[l], b.model.weights[l]);
}

TEST(Nn, DivergenceIsReported) {
  const Dataset ds = make_blobs(30, 3, 2, 0.3, 2);
  OptimConfig cfg;
  cfg.learning_rate = 1e300;
  cfg.epochs = 5;
  EXPECT_THROW(train_base(ds, {2, 8, 3}, cfg), NumericalError);
}

TEST(Nn, LearningRateSchedule) {
  OptimConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.epochs = 100;
  EXPECT_DOUBLE_EQ(cfg.lr_at(0), 1.0);
  EXPECT_DOUBLE_EQ(cfg.lr_at(49), 1.0);
  EXPECT_DOUBLE_EQ(cfg.lr_at(50), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(75), 0.01);
  cfg.schedule = {{10, 0.5}, {5, 0.2}};
  EXPECT_THROW(cfg.validate(), InputError);
  cfg.schedule = {{10, 0.5}};
  EXPECT_DOUBLE_EQ(cfg.lr_at(10), 0.5);
}

TEST(Nn, JsonRoundTripIsBitExact) {
  Mlp m = init_mlp({2, 5, 3}, Activation::Tanh, 99, OutputMode::Probabilities);
  m.weights[0][0] = 0.1 + 0.2;  // not exactly representable in short decimal
  m.provenance = "unit";
  const Mlp back = mlp_from_json(nlohmann::json::parse(to_json(m).dump()));
  EXPECT_EQ(back.layer_sizes, m.layer_sizes);
  EXPECT_EQ(back.activation, m.activation);
  EXPECT_EQ(back.output_mode, m.output_mode);
  EXPECT_EQ(back.seed, m.seed);
  EXPECT_EQ(back.provenance, "unit");
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    EXPECT_EQ(back.weights[l], m.weights[l]);
    EXPECT_EQ(back.biases[l], m.biases[l]);
  }
  EXPECT_EQ(model_hash(back), model_hash(m));
}

TEST(Nn, JsonRejectsInconsistentShapes) {
  auto j = to_json(init_mlp({2, 5, 3}, Activation::Relu, 1));
  j["layer_sizes"] = {2, 4, 3};
  EXPECT_THROW(mlp_from_json(j), InputError);
}
