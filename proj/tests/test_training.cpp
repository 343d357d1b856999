#include <gtest/gtest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>

#include "est/errors.hpp"
#include "est/gradcheck.hpp"
#include "est/training.hpp"
#include "test_util.hpp"

namespace est {
namespace {

using nlohmann::json;
using testing::mini_config;
using testing::pipeline_for;

double uniform_bce(std::size_t classes) {
  const double p = 1.0 / static_cast<double>(classes);
  return -(std::log(p) + static_cast<double>(classes - 1) * std::log(1.0 - p));
}

TEST(Losses, ClassificationLoss) {
  EXPECT_NEAR(loss_cls(Tensor::vector({0, 0, 1}), 2).item(), 0.0, 1e-9);
  const double uniform = loss_cls(Tensor::full({7}, 1.0 / 7), 4).item();
  EXPECT_NEAR(uniform, uniform_bce(7), 1e-12);
  EXPECT_NEAR(uniform, 2.87081, 5e-6);
  double previous = INFINITY;
  for (double p = 0.05; p < 1.0; p += 0.05) {
    const double l = loss_cls(Tensor::vector({1 - p, p}), 1).item();
    EXPECT_LT(l, previous);
    previous = l;
  }
  EXPECT_THROW(loss_cls(Tensor::full({3}, 1.0 / 3), 3), ValidationError);
}

TEST(Losses, OrderLoss) {
  EXPECT_NEAR(loss_ssop(Tensor::vector({0, 1, 0}), 1).item(), 0.0, 1e-9);
  const double uniform = loss_ssop(Tensor::full({10}, 0.1), 7).item();
  EXPECT_NEAR(uniform, uniform_bce(10), 1e-12);
  EXPECT_NEAR(uniform, 3.25083, 5e-6);
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    Tensor p = ops::reshape(ops::softmax(testing::random_tensor(rng, {1, 10}, false, -5, 5), 1), {10});
    EXPECT_GE(loss_ssop(p, rng.uniform_index(10)).item(), 0.0);
  }
  EXPECT_THROW(loss_ssop(Tensor::full({10}, 0.1), std::nullopt), StateError);
  EXPECT_THROW(loss_ssop(Tensor::full({10}, 0.1), 10), ValidationError);
}

TEST(Losses, TotalLoss) {
  const Tensor l_cls = Tensor::scalar(2.0), l_s = Tensor::scalar(3.0);
  EXPECT_EQ(total_loss(l_cls, l_s, 0.0).item(), 2.0);
  EXPECT_EQ(total_loss(l_cls, Tensor(), 1.0).item(), 2.0);
  EXPECT_EQ(total_loss(l_cls, l_s, 1.0).item(), 5.0);
  EXPECT_EQ(total_loss(l_cls, l_s, 0.5).item(), 3.5);
}

void expect_same_gradients(const GradientMap& a, const GradientMap& b) {
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [key, grad] : a.entries()) {
    ASSERT_TRUE(b.contains(key)) << key;
    const auto& expect = b.at(key);
    for (std::size_t i = 0; i < grad.size(); ++i) ASSERT_NEAR(grad[i], expect[i], 1e-12 * (1 + std::fabs(expect[i])));
  }
}

TEST(Losses, TotalGradientIsWeightedSum) {
  const ModelConfig c = mini_config();
  EstModel model(c, 3);
  const auto table = generate_permutation_table(c.snippets, c.num_shuffle_types, 0);
  const SnippetSet set = shuffle_snippets(testing::snippet_set_for(c, 3, 2), 1, table);
  const double lambda = 0.7;
  auto combined_loss = [&] {
    const ForwardResult out = model.forward(set, true);
    return total_loss(loss_cls(out.fer_probs, set.label), loss_ssop(out.ssop_probs, set.order_label), lambda);
  };
  const GradientMap combined = backward(combined_loss());
  GradientMap parts = backward(loss_cls(model.forward(set, true).fer_probs, set.label));
  parts.accumulate(backward(ops::scale(loss_ssop(model.forward(set, true).ssop_probs, set.order_label), lambda)));
  expect_same_gradients(combined, parts);

  const GradCheckReport r = gradcheck(combined_loss, model.parameters(), 1e-4, 1e-3);
  EXPECT_TRUE(r.pass) << r.worst_parameter << " " << r.max_relative_error;
}

TEST(Losses, BatchGradientIsSumOfItemGradients) {
  const ModelConfig c = mini_config();
  EstModel model(c, 4);
  const SnippetSet s1 = testing::snippet_set_for(c, 5, 0), s2 = testing::snippet_set_for(c, 6, 2);
  auto item = [&](const SnippetSet& s) { return loss_cls(model.forward(s, false).fer_probs, s.label); };
  const double joint_value = item(s1).item() + item(s2).item();
  Tensor joint = ops::add(item(s1), item(s2));
  EXPECT_NEAR(joint.item(), joint_value, 1e-12);
  GradientMap together = backward(joint);
  GradientMap apart = backward(item(s1));
  apart.accumulate(backward(item(s2)));
  expect_same_gradients(together, apart);
}

TEST(Schedule, WarmupThenCosine) {
  const LrSchedule s(1e-4, 1000, 50);
  EXPECT_LT(s.at(0), 1e-4);
  EXPECT_GT(s.at(0), 0.0);
  for (std::size_t i = 1; i < 50; ++i) EXPECT_GT(s.at(i), s.at(i - 1));
  EXPECT_DOUBLE_EQ(s.at(49), 1e-4);
  EXPECT_DOUBLE_EQ(s.at(50), 1e-4);
  for (std::size_t i = 51; i < 1000; ++i) EXPECT_LE(s.at(i), s.at(i - 1));
  EXPECT_LT(s.at(999), 1e-9);
  EXPECT_NEAR(s.at(525), 0.5e-4, 1e-6);
}

TEST(Schedule, TrainerWarmsUpOverFivePercentOfEpochs) {
  TrainConfig t;
  t.epochs = 40;
  EXPECT_DOUBLE_EQ(t.resolved_warmup_epochs(), 2.0);
  const ModelConfig c = mini_config();
  EstModel model(c, 0);
  t.batch_size = 4;
  Trainer trainer(model, t, pipeline_for(c), generate_permutation_table(3, 5, 0), 12);
  EXPECT_EQ(trainer.schedule().total_steps(), 120u);
  EXPECT_EQ(trainer.schedule().warmup_steps(), 6u);
  EXPECT_LT(trainer.schedule().at(0), t.learning_rate);
  EXPECT_DOUBLE_EQ(trainer.schedule().at(5), t.learning_rate);
}

TEST(Optimizers, ZeroLearningRateLeavesParametersBitwise) {
  const ModelConfig c = mini_config();
  for (OptimizerKind kind : {OptimizerKind::kSgd, OptimizerKind::kAdam}) {
    EstModel model(c, 5);
    const auto before = encode_checkpoint(model.parameters());
    const SnippetSet set = testing::snippet_set_for(c, 5);
    TrainConfig t;
    t.optimizer = kind;
    t.momentum = 0.9;
    auto opt = make_optimizer(t);
    for (int i = 0; i < 3; ++i) {
      opt->step(model.parameters(), backward(loss_cls(model.forward(set, false).fer_probs, set.label)), 0.0);
    }
    EXPECT_EQ(encode_checkpoint(model.parameters()), before);
  }
}

TEST(Optimizers, SgdAndAdamUpdateRules) {
  ParameterStore s;
  Tensor w = s.add("w", {2}, {1.0, -1.0});
  GradientMap g;
  g.set("w", {0.5, -2.0});
  Sgd sgd(0.5);
  sgd.step(s, g, 0.1);
  EXPECT_DOUBLE_EQ(w.at(0), 1.0 - 0.1 * 0.5);
  sgd.step(s, g, 0.1);
  EXPECT_DOUBLE_EQ(w.at(0), 0.95 - 0.1 * (0.5 * 0.5 + 0.5));

  ParameterStore s2;
  Tensor v = s2.add("v", {2}, {1.0, -1.0});
  GradientMap gv;
  gv.set("v", {0.5, -2.0});
  Adam adam(0.9, 0.999, 1e-8);
  adam.step(s2, gv, 0.01);
  // First bias-corrected step moves each coordinate by lr against its sign.
  EXPECT_NEAR(v.at(0), 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(v.at(1), -1.0 + 0.01, 1e-9);
}

Dataset mini_dataset(std::size_t per_class = 4, std::uint64_t seed = 0) {
  return testing::synth_for(mini_config(), per_class, seed);
}

std::vector<std::string> run_epochs(const TrainConfig& t, std::size_t epochs, std::vector<unsigned char>* checkpoint) {
  const ModelConfig c = mini_config();
  EstModel model(c, t.seed);
  const Dataset ds = mini_dataset();
  Trainer trainer(model, t, pipeline_for(c), generate_permutation_table(3, 5, 0), ds.videos.size());
  std::vector<std::string> lines;
  for (std::size_t e = 0; e < epochs; ++e) lines.push_back(metrics_line(trainer.train_epoch(ds)));
  if (checkpoint) *checkpoint = encode_checkpoint(model.parameters());
  return lines;
}

TEST(Trainer, IdenticalSeedsGiveIdenticalTraces) {
  TrainConfig t;
  t.epochs = 3;
  t.batch_size = 4;
  t.learning_rate = 1e-3;
  t.optimizer = OptimizerKind::kAdam;
  t.seed = 9;
  std::vector<unsigned char> a_ckpt, b_ckpt, c_ckpt;
  const auto a = run_epochs(t, 3, &a_ckpt);
  const auto b = run_epochs(t, 3, &b_ckpt);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a_ckpt, b_ckpt);
  t.seed = 10;
  run_epochs(t, 3, &c_ckpt);
  EXPECT_NE(a_ckpt, c_ckpt);
  for (const auto& line : a) {
    const json j = json::parse(line);
    for (const char* key : {"epoch", "lr", "loss_cls", "loss_ssop", "train_acc", "order_acc"}) {
      EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_TRUE(j["order_acc"].is_number());
  }
}

TEST(Trainer, StepsPerEpochAndLearningProgress) {
  const ModelConfig c = mini_config();
  EstModel model(c, 1);
  const Dataset ds = mini_dataset(4, 2);
  TrainConfig t;
  t.epochs = 20;
  t.batch_size = 4;
  t.learning_rate = 3e-3;
  t.optimizer = OptimizerKind::kAdam;
  Trainer trainer(model, t, pipeline_for(c), generate_permutation_table(3, 5, 0), ds.videos.size());
  double first = 0, last = 0;
  for (std::size_t e = 0; e < t.epochs; ++e) {
    const EpochStats s = trainer.train_epoch(ds);
    EXPECT_EQ(s.epoch, e);
    if (e == 0) first = s.loss_cls + s.loss_ssop;
    last = s.loss_cls + s.loss_ssop;
  }
  EXPECT_EQ(trainer.step(), 60u);
  EXPECT_LT(last, first);
}

TEST(Trainer, LambdaZeroFreezesOrderHead) {
  const ModelConfig c = mini_config();
  EstModel model(c, 2);
  const Dataset ds = mini_dataset();
  TrainConfig t;
  t.lambda_ssop = 0.0;
  t.epochs = 2;
  t.learning_rate = 1e-2;
  t.optimizer = OptimizerKind::kAdam;
  std::vector<std::vector<double>> head_before, rest_before;
  for (const auto& p : model.parameters().all()) {
    (p.name().rfind("ssop_head.", 0) == 0 ? head_before : rest_before).push_back(p.to_vector());
  }
  Trainer trainer(model, t, pipeline_for(c), generate_permutation_table(3, 5, 0), ds.videos.size());
  const EpochStats s = trainer.train_epoch(ds);
  EXPECT_FALSE(s.order_accuracy.has_value());
  EXPECT_EQ(s.loss_ssop, 0.0);
  EXPECT_TRUE(json::parse(metrics_line(s))["order_acc"].is_null());
  std::size_t h = 0, r = 0, changed = 0;
  for (const auto& p : model.parameters().all()) {
    if (p.name().rfind("ssop_head.", 0) == 0) {
      EXPECT_FALSE(p.requires_grad());
      EXPECT_EQ(p.to_vector(), head_before[h++]) << p.name();
    } else if (p.to_vector() != rest_before[r++]) {
      ++changed;
    }
  }
  EXPECT_GT(changed, 0u);
}

TEST(Trainer, OrderOnlyTrainingLeavesClassifierOutputsUnchanged) {
  const ModelConfig c = mini_config();
  EstModel model(c, 3);
  const auto table = generate_permutation_table(3, 5, 0);
  const Dataset ds = mini_dataset();
  std::vector<SnippetSet> probes;
  for (std::uint64_t i = 0; i < 4; ++i) probes.push_back(testing::snippet_set_for(c, 50 + i, i % 3));
  std::vector<std::vector<double>> before;
  for (const auto& s : probes) before.push_back(model.forward(s, false).fer_probs.to_vector());

  model.parameters().set_all_trainable(false);
  model.parameters().set_trainable("ssop_head.", true);
  Sgd sgd;
  for (const auto& v : ds.videos) {
    Rng rng(v.id);
    const SnippetSet set = shuffle_snippets(build_snippet_set(v, rng, pipeline_for(c)), v.id % 5, table);
    const GradientMap g = backward(loss_ssop(model.forward(set, true).ssop_probs, set.order_label));
    for (const auto& [key, grad] : g.entries()) EXPECT_EQ(key.rfind("ssop_head.", 0), 0u) << key;
    sgd.step(model.parameters(), g, 0.5);
  }
  for (std::size_t i = 0; i < probes.size(); ++i) {
    EXPECT_EQ(model.forward(probes[i], false).fer_probs.to_vector(), before[i]);
  }
}

TEST(Trainer, Errors) {
  const ModelConfig c = mini_config();
  EstModel model(c, 0);
  TrainConfig t;
  EXPECT_THROW((void)Trainer(model, t, pipeline_for(c), generate_permutation_table(3, 5, 0), 0), ValidationError);
  Trainer trainer(model, t, pipeline_for(c), generate_permutation_table(3, 5, 0), 4);
  EXPECT_THROW(trainer.train_epoch(Dataset{3, {}}), ValidationError);
  EXPECT_THROW(trainer.train_epoch(mini_dataset(1)), ValidationError);
  EXPECT_THROW((void)Trainer(model, t, pipeline_for(c), generate_permutation_table(3, 4, 0), 4), ConfigError);
  EXPECT_THROW((void)Trainer(model, t, PipelineConfig{}, generate_permutation_table(3, 5, 0), 4), ConfigError);
  t.learning_rate = 0.0;
  EXPECT_THROW((void)Trainer(model, t, pipeline_for(c), generate_permutation_table(3, 5, 0), 4), ConfigError);
}

class Evaluation : public ::testing::Test {
 protected:
  static ModelConfig config() {
    ModelConfig c = mini_config();
    c.num_classes = 7;
    c.d = 16;
    c.num_heads = 4;
    return c;
  }
  ModelConfig c = config();
  Dataset ds = testing::synth_for(c, 20, 3);
};

TEST_F(Evaluation, ReportIsConsistentAndDeterministic) {
  EstModel model(c, 4);
  const EvalReport a = evaluate(model, ds, pipeline_for(c), 0);
  const EvalReport b = evaluate(model, ds, pipeline_for(c), 0);
  EXPECT_EQ(to_json(a), to_json(b));
  ASSERT_EQ(a.total, 140u);
  std::size_t trace = 0;
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(std::accumulate(a.confusion[i].begin(), a.confusion[i].end(), std::size_t{0}), 20u);
    trace += a.confusion[i][i];
  }
  EXPECT_DOUBLE_EQ(a.accuracy, static_cast<double>(trace) / 140.0);
  const json j = json::parse(to_json(a));
  EXPECT_GE(j["accuracy"].get<double>(), 0.0);
  EXPECT_LE(j["accuracy"].get<double>(), 1.0);
  EXPECT_EQ(j["confusion_matrix"].size(), 7u);
}

TEST_F(Evaluation, RandomWeightsScoreNearChance) {
  const double sigma = std::sqrt(140.0 * (1.0 / 7) * (6.0 / 7)) / 140.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    EstModel model(c, 100 + seed);
    const double acc = evaluate(model, ds, pipeline_for(c), seed).accuracy;
    EXPECT_NEAR(acc, 1.0 / 7, 3 * sigma) << seed;
  }
}

TEST_F(Evaluation, InspectAttention) {
  EstModel model(c, 5);
  const AttentionReport r = inspect_attention(model, ds, pipeline_for(c), 0);
  ASSERT_EQ(r.records.size(), 140u);
  ASSERT_EQ(r.histogram.size(), 3u);
  EXPECT_EQ(std::accumulate(r.histogram.begin(), r.histogram.end(), std::size_t{0}), 140u);
  for (const auto& rec : r.records) {
    ASSERT_EQ(rec.snippet_attention.size(), 3u);
    EXPECT_NEAR(std::accumulate(rec.snippet_attention.begin(), rec.snippet_attention.end(), 0.0), 1.0, 1e-5);
    const auto top = std::max_element(rec.snippet_attention.begin(), rec.snippet_attention.end());
    EXPECT_EQ(rec.argmax, static_cast<std::size_t>(top - rec.snippet_attention.begin()));
    const json j = json::parse(to_json(rec));
    for (const char* key : {"video_id", "snippet_attention", "argmax_snippet", "predicted_class", "probabilities"}) {
      EXPECT_TRUE(j.contains(key)) << key;
    }
  }
  EXPECT_GE(r.entropy(), 0.0);
  EXPECT_LE(r.entropy(), std::log(3.0) + 1e-12);
  EXPECT_GE(r.max_share(), 1.0 / 3);
  EXPECT_LE(r.max_share(), 1.0);
}

TEST(AttentionReport, EntropyOfHistogram) {
  AttentionReport r;
  r.histogram = {5, 5, 0, 0};
  EXPECT_NEAR(r.entropy(), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(r.max_share(), 0.5);
  r.histogram = {0, 7, 0};
  EXPECT_EQ(r.entropy(), 0.0);
  EXPECT_DOUBLE_EQ(r.max_share(), 1.0);
}

}  // namespace
}  // namespace est
