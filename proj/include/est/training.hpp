#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "est/model.hpp"
#include "est/permutation.hpp"
#include "est/pipeline.hpp"
#include "est/tensor.hpp"
#include "est/video.hpp"

namespace est {

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  double learning_rate = 1e-4;
  // Linear warmup length in epochs; negative means 5% of `epochs`.
  double warmup_epochs = -1.0;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  double lambda_ssop = 1.0;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double momentum = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  double resolved_warmup_epochs() const noexcept { return warmup_epochs < 0.0 ? 0.05 * epochs : warmup_epochs; }
  // Throws ConfigError.
  void validate() const;
};

// Summed binary cross-entropy of the class probabilities against one-hot(label).
// Throws ValidationError when label is out of range.
Tensor loss_cls(const Tensor& probs, std::size_t label);
// Same form over permutation classes. Throws StateError for a natural-order
// set (no order label).
Tensor loss_ssop(const Tensor& probs, std::optional<std::size_t> order_label);
// l_cls + lambda * l_s. lambda == 0 returns l_cls and ignores l_s.
Tensor total_loss(const Tensor& l_cls, const Tensor& l_s, double lambda_ssop);

// Linear warmup to the base rate, then cosine decay towards zero over the
// remaining steps.
class LrSchedule {
 public:
  LrSchedule(double base_lr, std::size_t total_steps, std::size_t warmup_steps);
  double at(std::size_t step) const;
  std::size_t total_steps() const noexcept { return total_; }
  std::size_t warmup_steps() const noexcept { return warmup_; }

 private:
  double base_;
  std::size_t total_, warmup_;
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  // Updates every trainable parameter that has an entry in `grads`.
  virtual void step(ParameterStore& params, const GradientMap& grads, double lr) = 0;
};

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& config);

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double momentum = 0.0) : momentum_(momentum) {}
  void step(ParameterStore& params, const GradientMap& grads, double lr) override;

 private:
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

class Adam final : public Optimizer {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParameterStore& params, const GradientMap& grads, double lr) override;

 private:
  double beta1_, beta2_, eps_;
  std::map<std::string, std::uint64_t> steps_;
  std::map<std::string, std::vector<double>> m_, v_;
};

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;              // rate used by the last step of the epoch
  double loss_cls = 0.0;        // mean per video
  double loss_ssop = 0.0;       // mean per video, 0 when SSOP is off
  double train_accuracy = 0.0;  // FER accuracy on the (shuffled) training inputs
  std::optional<double> order_accuracy;  // absent when SSOP is off
};

std::string metrics_line(const EpochStats& stats);

// Runs the joint FER + SSOP loop: per video, sample a snippet set, draw one
// permutation from the table, shuffle, forward both heads, sum the losses
// over a mini-batch, and take one optimizer step per batch.
class Trainer {
 public:
  Trainer(EstModel& model, const TrainConfig& config, const PipelineConfig& pipeline, PermutationTable table,
          std::size_t dataset_size);

  // Throws ValidationError for an empty dataset or a size other than the
  // one the schedule was built for.
  EpochStats train_epoch(const Dataset& dataset);

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t step() const noexcept { return step_; }
  const LrSchedule& schedule() const noexcept { return schedule_; }
  const PermutationTable& table() const noexcept { return table_; }

 private:
  EstModel& model_;
  TrainConfig config_;
  PipelineConfig pipeline_;
  PermutationTable table_;
  std::size_t dataset_size_;
  LrSchedule schedule_;
  std::unique_ptr<Optimizer> optimizer_;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
};

struct EvalReport {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  double mean_loss_cls = 0.0;
  std::size_t total = 0;
  std::optional<double> order_accuracy;  // filled from training stats
  std::vector<double> loss_trace;        // per-epoch training loss, if known
};

// Natural snippet order, FER head only, snippets sampled with a generator
// seeded per video id.
EvalReport evaluate(const EstModel& model, const Dataset& dataset, const PipelineConfig& pipeline,
                    std::uint64_t seed);

std::string to_json(const EvalReport& report);

struct AttentionRecord {
  std::uint32_t video_id = 0;
  std::uint32_t label = 0;
  std::vector<double> snippet_attention;
  std::size_t argmax = 0;
  std::size_t predicted_class = 0;
  std::vector<double> probabilities;
};

struct AttentionReport {
  std::vector<AttentionRecord> records;
  std::vector<std::size_t> histogram;  // argmax snippet index counts

  // Shannon entropy (nats) of the normalized histogram.
  double entropy() const;
  // Largest bin share.
  double max_share() const;
};

AttentionReport inspect_attention(const EstModel& model, const Dataset& dataset, const PipelineConfig& pipeline,
                                  std::uint64_t seed);

std::string to_json(const AttentionRecord& record);

}  // namespace est
