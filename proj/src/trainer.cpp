#include "stemnet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <utility>

#include "stemnet/dataset.hpp"
#include "stemnet/metrics.hpp"
#include "stemnet/optimizer.hpp"
#include "stemnet/rng.hpp"

namespace stemnet {

void TrainConfig::validate() const {
  if (pretrain_epochs < 0 || final_epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
  if (dice_eps < 0.0) throw ConfigError("train: dice_eps must be >= 0");
  if (augmentation) throw ConfigError("train: data augmentation is not supported");
}

std::string TrainLog::to_text() const {
  std::ostringstream os;
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%s %d %.6g %.6g %.6g %.6g %.6g %.6g %.6g\n", r.stage.c_str(),
                  r.epoch, r.loss, r.val_dsc[0], r.val_dsc[1], r.val_dsc[2], r.val_dsc[3],
                  r.val_dsc[4], r.seconds);
    os << buf;
  }
  return os.str();
}

TrainLog TrainLog::from_text(const std::string& text) {
  TrainLog log;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    EpochRecord r;
    if (!(ls >> r.stage >> r.epoch >> r.loss >> r.val_dsc[0] >> r.val_dsc[1] >> r.val_dsc[2] >>
          r.val_dsc[3] >> r.val_dsc[4] >> r.seconds))
      throw FormatError("train log: malformed line '" + line + "'");
    log.records.push_back(std::move(r));
  }
  return log;
}

namespace {

std::array<double, kNumClasses> validation_dsc(UNetParams<float>& params,
                                               const std::vector<TrainSample>& val) {
  std::array<double, kNumClasses> mean{};
  if (val.empty()) return mean;
  for (const auto& sample : val) {
    Tensor<float> logits = unet_forward(params, sample.image, false);
    LabelVolume pred = argmax_decode(softmax_channels(logits), sample.labels.spacing);
    const DscResult r = per_class_dsc(pred, sample.labels);
    for (int c = 0; c < kNumClasses; ++c) mean[c] += r.dsc[c];
  }
  for (int c = 0; c < kNumClasses; ++c) mean[c] /= static_cast<double>(val.size());
  return mean;
}

ClassWeights weights_from_samples(const std::vector<TrainSample>& train, int num_classes) {
  std::vector<const LabelVolume*> labels;
  labels.reserve(train.size());
  for (const auto& s : train) labels.push_back(&s.labels);
  return class_weights_from_frequencies(class_frequencies(labels, num_classes));
}

void accumulate(UNetParams<float>& acc, const UNetParams<float>& grads) {
  auto a = acc.tensor_table();
  auto g = std::as_const(grads).tensor_table();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].learnable) continue;
    float* dst = a[i].tensor->data();
    const float* src = g[i].tensor->data();
    for (std::int64_t k = 0; k < a[i].tensor->numel(); ++k) dst[k] += src[k];
  }
}

void scale(UNetParams<float>& acc, float factor) {
  for (auto& ref : acc.tensor_table()) {
    if (!ref.learnable) continue;
    for (std::int64_t k = 0; k < ref.tensor->numel(); ++k) (*ref.tensor)[k] *= factor;
  }
}

}  // namespace

TrainResult train_two_stage(UNetParams<float> params, const std::vector<TrainSample>& train,
                            const std::vector<TrainSample>& val, const TrainConfig& config,
                            const EpochCallback& on_epoch) {
  config.validate();
  params.config.validate();
  if (train.empty()) throw ConfigError("train: empty training set");
  for (const auto& s : train)
    if (s.labels.extents[0] != params.config.input_extent)
      throw ShapeError("train: sample '" + s.id + "' extent does not match the network input");

  TrainResult result;
  result.class_weights = weights_from_samples(train, params.config.num_classes);
  result.log.records.reserve(static_cast<std::size_t>(config.pretrain_epochs + config.final_epochs));

  std::vector<Tensor<float>> onehots;
  onehots.reserve(train.size());
  for (const auto& s : train) onehots.push_back(one_hot_encode(s.labels, params.config.num_classes));

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const auto run_stage = [&](const std::string& stage, int epochs, int stage_index) {
    UNetParams<float> velocity = UNetParams<float>::zeros_like(params);
    for (int epoch = 1; epoch <= epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      Rng shuffle_rng = Rng::substream(config.seed,
                                       hash_seed(static_cast<std::uint64_t>(stage_index),
                                                 static_cast<std::uint64_t>(epoch)));
      shuffle_rng.shuffle(order);

      double loss_sum = 0.0;
      std::size_t b = 0;
      while (b < order.size()) {
        const std::size_t batch_end = std::min(order.size(), b + static_cast<std::size_t>(config.batch_size));
        UNetParams<float> grad_acc = UNetParams<float>::zeros_like(params);
        for (std::size_t k = b; k < batch_end; ++k) {
          const TrainSample& sample = train[order[k]];
          UNetCache<float> cache;
          Tensor<float> logits = unet_forward(params, sample.image, true, &cache);
          LossResult<float> loss =
              stage_index == 0
                  ? weighted_cross_entropy(logits, onehots[order[k]], result.class_weights)
                  : dice_loss_from_logits(logits, onehots[order[k]], config.dice_eps);
          if (!std::isfinite(loss.loss))
            throw Error("train: non-finite loss at stage '" + stage + "' epoch " +
                        std::to_string(epoch) + " (subject '" + sample.id + "')");
          loss_sum += loss.loss;
          UNetParams<float> grads = unet_backward(params, cache, loss.grad);
          if (batch_end - b == 1)
            grad_acc = std::move(grads);
          else
            accumulate(grad_acc, grads);
        }
        if (batch_end - b > 1) scale(grad_acc, 1.0f / static_cast<float>(batch_end - b));
        sgd_momentum_step(params, grad_acc, velocity, config.learning_rate, config.momentum);
        b = batch_end;
      }

      EpochRecord rec;
      rec.stage = stage;
      rec.epoch = epoch;
      rec.loss = loss_sum / static_cast<double>(order.size());
      rec.val_dsc = validation_dsc(params, val);
      const auto t1 = std::chrono::steady_clock::now();
      rec.seconds = config.deterministic ? 0.0 : std::chrono::duration<double>(t1 - t0).count();
      result.log.records.push_back(rec);
      if (on_epoch) on_epoch(rec);
    }
  };

  run_stage("pretrain", config.pretrain_epochs, 0);
  result.pretrain =
      Checkpoint{params.config, "pretrain", config.pretrain_epochs, config.seed, params, {}};

  // Stage B continues from the pretrained weights with a fresh velocity.
  run_stage("final", config.final_epochs, 1);
  result.final_ckpt =
      Checkpoint{params.config, "final", config.final_epochs, config.seed, std::move(params), {}};
  return result;
}

}  // namespace stemnet
