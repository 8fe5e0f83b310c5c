#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stemnet/checkpoint.hpp"
#include "stemnet/losses.hpp"
#include "stemnet/tensor.hpp"
#include "stemnet/unet.hpp"
#include "stemnet/volume.hpp"

namespace stemnet {

struct TrainConfig {
  int pretrain_epochs = 20;  // stage A, weighted cross-entropy
  int final_epochs = 200;    // stage B, Dice loss from the pretrained weights
  int batch_size = 1;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  double dice_eps = 1e-5;
  bool augmentation = false;  // no augmentation is supported; must stay false
  bool deterministic = false; // zeroes the wall-clock column of the log

  void validate() const;
};

struct EpochRecord {
  std::string stage;  // pretrain | final
  int epoch = 0;      // 1-based within the stage
  double loss = 0.0;
  std::array<double, kNumClasses> val_dsc{};
  double seconds = 0.0;
};

// Line format: stage epoch loss dsc_bg dsc_pons dsc_midbrain dsc_medulla
// dsc_scp seconds (space separated, 6 significant digits).
struct TrainLog {
  std::vector<EpochRecord> records;

  std::string to_text() const;
  static TrainLog from_text(const std::string& text);
};

struct TrainSample {
  std::string id;
  Tensor<float> image;  // [1,1,S,S,S], normalized and cropped
  LabelVolume labels;   // same extent
};

struct TrainResult {
  Checkpoint pretrain;  // state after stage A (present even when 0 epochs)
  Checkpoint final_ckpt;
  TrainLog log;
  ClassWeights class_weights;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Stage A: pretrain_epochs of weighted cross-entropy over a seeded shuffle of
// the training set (batch accumulation when batch_size > 1). Stage B: fresh
// optimizer velocity, Dice loss for final_epochs. Per-epoch validation DSC is
// computed in infer mode. Throws if the loss turns non-finite, naming stage
// and epoch.
TrainResult train_two_stage(UNetParams<float> params, const std::vector<TrainSample>& train,
                            const std::vector<TrainSample>& val, const TrainConfig& config,
                            const EpochCallback& on_epoch = nullptr);

}  // namespace stemnet
