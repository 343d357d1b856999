#include "est/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "est/errors.hpp"
#include "est/ops.hpp"
#include "est/rng.hpp"

namespace est {

namespace {

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(lambda_ssop >= 0.0)) throw ConfigError("lambda_ssop must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (resolved_warmup_epochs() > static_cast<double>(epochs)) throw ConfigError("warmup_epochs exceeds epochs");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
}

// ---------------------------------------------------------------------------
// Losses

Tensor loss_cls(const Tensor& probs, std::size_t label) {
  if (label >= probs.numel()) {
    throw ValidationError("label " + std::to_string(label) + " out of range for " + std::to_string(probs.numel()) +
                          " classes");
  }
  return ops::bce_sum_loss(probs, ops::one_hot(label, probs.numel()));
}

Tensor loss_ssop(const Tensor& probs, std::optional<std::size_t> order_label) {
  if (!order_label) throw StateError("order loss requested for a snippet set in natural order");
  if (*order_label >= probs.numel()) {
    throw ValidationError("order label " + std::to_string(*order_label) + " out of range for " +
                          std::to_string(probs.numel()) + " shuffle types");
  }
  return ops::bce_sum_loss(probs, ops::one_hot(*order_label, probs.numel()));
}

Tensor total_loss(const Tensor& l_cls, const Tensor& l_s, double lambda_ssop) {
  if (lambda_ssop == 0.0 || !l_s.defined()) return l_cls;
  return ops::add(l_cls, ops::scale(l_s, lambda_ssop));
}

// ---------------------------------------------------------------------------
// Schedule and optimizers

LrSchedule::LrSchedule(double base_lr, std::size_t total_steps, std::size_t warmup_steps)
    : base_(base_lr), total_(total_steps), warmup_(std::min(warmup_steps, total_steps)) {
  if (total_steps == 0) throw ConfigError("schedule needs at least one step");
}

double LrSchedule::at(std::size_t step) const {
  if (step < warmup_) return base_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
  const std::size_t decay = total_ - warmup_;
  if (decay == 0) return base_;
  const double p = std::min(1.0, static_cast<double>(step - warmup_) / static_cast<double>(decay));
  return 0.5 * base_ * (1.0 + std::cos(M_PI * p));
}

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& config) {
  if (config.optimizer == OptimizerKind::kAdam) {
    return std::make_unique<Adam>(config.adam_beta1, config.adam_beta2, config.adam_eps);
  }
  return std::make_unique<Sgd>(config.momentum);
}

void Sgd::step(ParameterStore& params, const GradientMap& grads, double lr) {
  for (Tensor p : params.all()) {
    if (!p.requires_grad() || !grads.contains(p.key())) continue;
    const auto& g = grads.of(p);
    auto w = p.mutable_data();
    if (momentum_ == 0.0) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
      continue;
    }
    auto& vel = velocity_[p.key()];
    vel.resize(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      vel[i] = momentum_ * vel[i] + g[i];
      w[i] -= lr * vel[i];
    }
  }
}

void Adam::step(ParameterStore& params, const GradientMap& grads, double lr) {
  for (Tensor p : params.all()) {
    if (!p.requires_grad() || !grads.contains(p.key())) continue;
    const auto& g = grads.of(p);
    auto w = p.mutable_data();
    auto& m = m_[p.key()];
    auto& v = v_[p.key()];
    m.resize(w.size(), 0.0);
    v.resize(w.size(), 0.0);
    const auto t = ++steps_[p.key()];
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

std::string metrics_line(const EpochStats& s) {
  nlohmann::json j = {{"epoch", s.epoch},
                      {"lr", s.lr},
                      {"loss_cls", s.loss_cls},
                      {"loss_ssop", s.loss_ssop},
                      {"train_acc", s.train_accuracy},
                      {"order_acc", optional_number(s.order_accuracy)}};
  return j.dump();
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

LrSchedule make_schedule(const TrainConfig& config, std::size_t dataset_size) {
  const std::size_t batch = std::max<std::size_t>(config.batch_size, 1);
  const std::size_t per_epoch = (std::max<std::size_t>(dataset_size, 1) + batch - 1) / batch;
  const auto warmup =
      static_cast<std::size_t>(std::llround(config.resolved_warmup_epochs() * static_cast<double>(per_epoch)));
  return LrSchedule(config.learning_rate, std::max<std::size_t>(config.epochs, 1) * per_epoch, warmup);
}

}  // namespace

Trainer::Trainer(EstModel& model, const TrainConfig& config, const PipelineConfig& pipeline, PermutationTable table,
                 std::size_t dataset_size)
    : model_(model),
      config_(config),
      pipeline_(pipeline),
      table_(std::move(table)),
      dataset_size_(dataset_size),
      schedule_(make_schedule(config, dataset_size)),
      optimizer_(make_optimizer(config)) {
  config_.validate();
  pipeline_.validate();
  if (dataset_size == 0) throw ValidationError("cannot train on an empty dataset");
  const auto& mc = model_.config();
  if (pipeline_.snippets_per_video != mc.snippets || pipeline_.frames_per_snippet != mc.frames_per_snippet) {
    throw ConfigError("pipeline yields " + std::to_string(pipeline_.snippets_per_video) + "x" +
                      std::to_string(pipeline_.frames_per_snippet) + " snippets but the model expects " +
                      std::to_string(mc.snippets) + "x" + std::to_string(mc.frames_per_snippet));
  }
  if (table_.size() != mc.num_shuffle_types) {
    throw ConfigError("permutation table has " + std::to_string(table_.size()) + " entries, model expects " +
                      std::to_string(mc.num_shuffle_types));
  }
  for (const auto& perm : table_.permutations) {
    if (perm.size() != mc.snippets) throw ConfigError("permutation table length does not match snippet count");
  }
  // The order head receives no gradient when the order loss is off; freezing
  // it keeps optimizer state from touching it either.
  if (config_.lambda_ssop == 0.0) model_.parameters().set_trainable("ssop_head.", false);
}

EpochStats Trainer::train_epoch(const Dataset& dataset) {
  if (dataset.videos.empty()) throw ValidationError("cannot train on an empty dataset");
  if (dataset.videos.size() != dataset_size_) {
    throw ValidationError("dataset has " + std::to_string(dataset.videos.size()) + " videos, schedule was built for " +
                          std::to_string(dataset_size_));
  }
  const bool ssop = config_.lambda_ssop > 0.0;
  const std::uint64_t seed = config_.seed;

  std::vector<std::size_t> order(dataset.videos.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng order_rng = Rng::derive(seed, Stream::kEpochOrder, {epoch_});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.uniform_index(i)]);

  EpochStats stats;
  stats.epoch = epoch_;
  double sum_cls = 0.0, sum_ssop = 0.0;
  std::size_t fer_hits = 0, order_hits = 0;

  for (std::size_t begin = 0; begin < order.size(); begin += config_.batch_size) {
    const std::size_t end = std::min(order.size(), begin + config_.batch_size);
    GradientMap batch_grads;
    for (std::size_t b = begin; b < end; ++b) {
      const Video& video = dataset.videos[order[b]];
      if (video.label >= model_.config().num_classes) {
        throw ValidationError("video " + std::to_string(video.id) + " label " + std::to_string(video.label) +
                              " out of range");
      }
      Rng snippet_rng = Rng::derive(seed, Stream::kSnippets, {video.id, epoch_});
      SnippetSet set = build_snippet_set(video, snippet_rng, pipeline_);
      // Drawn even when the order loss is off so the other streams line up.
      Rng shuffle_rng = Rng::derive(seed, Stream::kShuffle, {video.id, epoch_});
      const std::size_t perm_index = shuffle_rng.uniform_index(table_.size());
      if (ssop) set = shuffle_snippets(set, perm_index, table_);

      ForwardResult out = model_.forward(set, ssop);
      Tensor l_cls = loss_cls(out.fer_probs, video.label);
      Tensor l_s;
      if (ssop) l_s = loss_ssop(out.ssop_probs, set.order_label);
      Tensor loss = total_loss(l_cls, l_s, config_.lambda_ssop);
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite loss on video " + std::to_string(video.id) + " in epoch " +
                           std::to_string(epoch_));
      }
      sum_cls += l_cls.item();
      if (ssop) {
        sum_ssop += l_s.item();
        if (argmax(out.ssop_probs.data()) == perm_index) ++order_hits;
      }
      if (argmax(out.fer_probs.data()) == video.label) ++fer_hits;
      batch_grads.accumulate(backward(loss));
    }
    stats.lr = schedule_.at(step_);
    optimizer_->step(model_.parameters(), batch_grads, stats.lr);
    ++step_;
  }

  const double count = static_cast<double>(order.size());
  stats.loss_cls = sum_cls / count;
  stats.loss_ssop = ssop ? sum_ssop / count : 0.0;
  stats.train_accuracy = static_cast<double>(fer_hits) / count;
  if (ssop) stats.order_accuracy = static_cast<double>(order_hits) / count;
  ++epoch_;
  return stats;
}

// ---------------------------------------------------------------------------
// Evaluation and inspection

EvalReport evaluate(const EstModel& model, const Dataset& dataset, const PipelineConfig& pipeline,
                    std::uint64_t seed) {
  NoGradGuard no_grad;
  const std::size_t classes = model.config().num_classes;
  EvalReport report;
  report.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  double loss_sum = 0.0;
  std::size_t hits = 0;
  for (const auto& video : dataset.videos) {
    if (video.label >= classes) {
      throw ValidationError("video " + std::to_string(video.id) + " label " + std::to_string(video.label) +
                            " out of range for " + std::to_string(classes) + " classes");
    }
    Rng rng = Rng::derive(seed, Stream::kEval, {video.id});
    const SnippetSet set = build_snippet_set(video, rng, pipeline);
    const ForwardResult out = model.forward(set, false);
    const std::size_t predicted = argmax(out.fer_probs.data());
    ++report.confusion[video.label][predicted];
    if (predicted == video.label) ++hits;
    loss_sum += loss_cls(out.fer_probs, video.label).item();
  }
  report.total = dataset.videos.size();
  if (report.total > 0) {
    report.accuracy = static_cast<double>(hits) / static_cast<double>(report.total);
    report.mean_loss_cls = loss_sum / static_cast<double>(report.total);
  }
  return report;
}

std::string to_json(const EvalReport& r) {
  nlohmann::json j = {{"accuracy", r.accuracy},
                      {"total", r.total},
                      {"mean_loss_cls", r.mean_loss_cls},
                      {"confusion_matrix", r.confusion},
                      {"order_accuracy", optional_number(r.order_accuracy)},
                      {"loss_trace", r.loss_trace}};
  return j.dump(2);
}

double AttentionReport::entropy() const {
  const double total = static_cast<double>(std::accumulate(histogram.begin(), histogram.end(), std::size_t{0}));
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (auto c : histogram) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

double AttentionReport::max_share() const {
  const double total = static_cast<double>(std::accumulate(histogram.begin(), histogram.end(), std::size_t{0}));
  if (total == 0.0) return 0.0;
  return static_cast<double>(*std::max_element(histogram.begin(), histogram.end())) / total;
}

AttentionReport inspect_attention(const EstModel& model, const Dataset& dataset, const PipelineConfig& pipeline,
                                  std::uint64_t seed) {
  NoGradGuard no_grad;
  AttentionReport report;
  report.histogram.assign(model.config().snippets, 0);
  for (const auto& video : dataset.videos) {
    Rng rng = Rng::derive(seed, Stream::kEval, {video.id});
    const SnippetSet set = build_snippet_set(video, rng, pipeline);
    const ForwardResult out = model.forward(set, false);
    AttentionRecord rec;
    rec.video_id = video.id;
    rec.label = video.label;
    rec.snippet_attention = out.decoded.cross_attention.to_vector();
    rec.argmax = argmax(rec.snippet_attention);
    rec.probabilities = out.fer_probs.to_vector();
    rec.predicted_class = argmax(rec.probabilities);
    ++report.histogram[rec.argmax];
    report.records.push_back(std::move(rec));
  }
  return report;
}

std::string to_json(const AttentionRecord& r) {
  nlohmann::json j = {{"video_id", r.video_id},
                      {"snippet_attention", r.snippet_attention},
                      {"argmax_snippet", r.argmax},
                      {"predicted_class", r.predicted_class},
                      {"probabilities", r.probabilities}};
  return j.dump();
}

}  // namespace est
