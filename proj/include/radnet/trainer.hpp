#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "radnet/checkpoint.hpp"
#include "radnet/dataset.hpp"
#include "radnet/errors.hpp"
#include "radnet/loss.hpp"
#include "radnet/metrics.hpp"
#include "radnet/model.hpp"
#include "radnet/optimizer.hpp"

namespace radnet {

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_loss = 0;
  double val_acc = 0;
  double lr = 0;  // rate used during the epoch, before any plateau reduction
  bool saved = false;
};

struct TrainConfig {
  int epochs = 20;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double lr = 5e-5;
  PlateauState plateau{};
  double threshold = 0.5;
  // Best-validation-accuracy checkpoint target; nothing is written when unset.
  std::optional<std::filesystem::path> checkpoint_path;
  std::function<void(const EpochRecord&)> on_epoch;
  // Stored in saved checkpoints for display.
  std::vector<std::string> class_names;
};


inline std::string to_line(const EpochRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "{\"epoch\":%d,\"train_loss\":%.9g,\"train_acc\":%.9g,\"val_loss\":%.9g,"
                "\"val_acc\":%.9g,\"lr\":%.9g,\"saved\":%s}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr,
                r.saved ? "true" : "false");
  return buf;
}

struct TrainingLog {
  std::vector<EpochRecord> epochs;

  /// One JSON object per line, one line per epoch.
  std::string to_text() const {
    std::string s;
    for (auto& r : epochs) s += to_line(r) + "\n";
    return s;
  }
};

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  std::vector<int> labels;
  std::vector<int> predictions;
  std::vector<std::vector<double>> probabilities;
};

/// Infer-mode pass over a source in index order.
template <typename T>
EvalResult evaluate(Model<T>& model, const SampleSource<T>& data, std::size_t batch_size = 8,
                    double threshold = 0.5) {
  if (data.size() == 0) throw ArgumentError("cannot evaluate an empty dataset");
  if (batch_size == 0) throw ArgumentError("batch size must be positive");
  EvalResult r;
  double total_loss = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(data.label(i));
    Tensor<T> probs = model.forward(stack_images(data, idx), Mode::infer);
    Tensor<T> targets = make_targets<T>(model.spec().task, labels);
    total_loss += static_cast<double>(loss_value(probs, targets, model.loss_kind())) * idx.size();
    auto pred = decide(probs, threshold);
    std::size_t k = probs.dim(1);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      correct += pred[n] == labels[n];
      std::vector<double> row;
      if (k == 1) {
        row = {1.0 - probs(n, 0), static_cast<double>(probs(n, 0))};
      } else {
        for (std::size_t j = 0; j < k; ++j) row.push_back(probs(n, j));
      }
      r.probabilities.push_back(std::move(row));
    }
    r.labels.insert(r.labels.end(), labels.begin(), labels.end());
    r.predictions.insert(r.predictions.end(), pred.begin(), pred.end());
  }
  r.loss = total_loss / static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  if (!std::isfinite(r.loss)) throw NumericError("non-finite evaluation loss");
  return r;
}

/// Mini-batch Adam training with reduce-on-plateau on validation loss and
/// best-validation-accuracy checkpointing.
template <typename T>
class Trainer {
 public:
  struct StepResult {
    double loss = 0;
    std::size_t correct = 0;
  };

  Trainer(Model<T>& model, TrainConfig config, std::optional<TrainingState<T>> resume = {})
      : model_(model), config_(std::move(config)) {
    if (config_.batch_size == 0) throw ArgumentError("batch size must be positive");
    if (resume) {
      state_ = std::move(*resume);
    } else {
      state_.adam.lr = config_.lr;
      state_.plateau = config_.plateau;
    }
  }

  TrainingState<T>& state() { return state_; }
  const TrainingState<T>& state() const { return state_; }

  /// One optimizer step on a batch. Dropout masks are keyed by the global step count.
  StepResult step(const Tensor<T>& images, const Tensor<T>& targets) {
    model_.set_noise_key(state_.adam.step);
    Tensor<T> probs = model_.forward(images, Mode::train);
    double loss = loss_value(probs, targets, model_.loss_kind());
    if (!std::isfinite(loss))
      throw NumericError("non-finite training loss at step " + std::to_string(state_.adam.step + 1));
    model_.backward_logits(loss_grad_logits(probs, targets, model_.loss_kind()));
    auto params = model_.parameters();
    adam_step<T>(params, state_.adam);

    StepResult r{loss, 0};
    auto pred = decide(probs, config_.threshold);
    std::size_t k = targets.dim(1);
    for (std::size_t n = 0; n < pred.size(); ++n) {
      int truth = k == 1 ? static_cast<int>(targets(n, 0))
                         : argmax<T>(targets.data().subspan(n * k, k));
      r.correct += pred[n] == truth;
    }
    return r;
  }

  EpochRecord run_epoch(const SampleSource<T>& train, const SampleSource<T>& val) {
    if (train.size() == 0 || val.size() == 0)
      throw ArgumentError("training and validation sets must be non-empty");
    int epoch = state_.epoch + 1;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = state_.adam.lr;
    double loss_sum = 0;
    std::size_t correct = 0;
    for (auto& idx : batch_order(train.size(), config_.batch_size, config_.seed,
                                 static_cast<std::uint64_t>(epoch))) {
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train.label(i));
      auto r = step(stack_images(train, idx), make_targets<T>(model_.spec().task, labels));
      loss_sum += r.loss * static_cast<double>(idx.size());
      correct += r.correct;
    }
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());

    EvalResult v = evaluate(model_, val, config_.batch_size, config_.threshold);
    rec.val_loss = v.loss;
    rec.val_acc = v.accuracy;

    state_.epoch = epoch;
    plateau_update(state_.plateau, v.loss, state_.adam.lr);
    auto decision = best_tracker_update(state_.best, epoch, v.accuracy, [&] {
      if (!config_.checkpoint_path) return;
      TrainingState<T> snapshot = state_;
      snapshot.best = {v.accuracy, epoch, true};
      save_checkpoint(*config_.checkpoint_path, model_, &snapshot, config_.class_names);
    });
    rec.saved = decision == SaveDecision::saved;
    if (config_.on_epoch) config_.on_epoch(rec);
    return rec;
  }

  TrainingLog fit(const SampleSource<T>& train, const SampleSource<T>& val) {
    TrainingLog log;
    while (state_.epoch < config_.epochs) log.epochs.push_back(run_epoch(train, val));
    return log;
  }

 private:
  Model<T>& model_;
  TrainConfig config_;
  TrainingState<T> state_;
};

/// Trains for config.epochs epochs and returns the per-epoch log.
template <typename T>
TrainingLog train_loop(Model<T>& model, const SampleSource<T>& train, const SampleSource<T>& val,
                       TrainConfig config) {
  if (train.size() == 0 || val.size() == 0)
    throw ArgumentError("training and validation sets must be non-empty");
  Trainer<T> trainer(model, std::move(config));
  return trainer.fit(train, val);
}

}  // namespace radnet
