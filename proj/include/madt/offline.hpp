#pragma once

#include <functional>
#include <string>
#include <vector>

#include "madt/dataset.hpp"
#include "madt/model.hpp"
#include "madt/optim.hpp"

namespace madt {

struct OfflineConfig {
  double learning_rate = 1e-4;
  int mini_batch_size = 128;
  int epochs = 20;
  int context_length = 32;
  uint64_t seed = 0;
  bool offline_train_critic = true;
  double value_coef = 0.5;
};

struct EpochStats {
  int epoch = 0;
  double ce_loss = 0.0;   // mean over valid positions
  double accuracy = 0.0;  // greedy agreement at valid positions
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double wall_clock_sec = 0.0;
  double final_accuracy = 0.0;  // whole-dataset greedy agreement after training
  std::string checkpoint_path;
};

// One context window: a slice of a unified trajectory. Windows never cross
// a done boundary; tails shorter than C are padded with validity false.
struct Window {
  int traj = 0;
  int start = 0;
  int len = 0;
};

std::vector<Window> chunk(const UnifiedTrajectory& trajectory, int context_length);
std::vector<Window> chunk_dataset(const UnifiedDataset& ds, int context_length);

// state ‖ observation ‖ one-hot agent id (‖ return-to-go when configured)
std::vector<double> build_token(const ModelConfig& cfg, const std::vector<double>& state,
                                const std::vector<double>& obs, int agent_id,
                                double return_to_go);

ContextBatch build_batch(const UnifiedDataset& ds, const ModelConfig& cfg,
                         const std::vector<Window>& windows);

// Mean over valid positions of -log p(a_t) under the availability-masked
// softmax; invalid positions contribute nothing to sum or denominator.
Tensor ce_loss(const std::vector<Tensor>& logits, const ContextBatch& batch);

// 0.5 * mean over valid positions of (return - value)^2.
Tensor value_loss(const std::vector<Tensor>& values, const ContextBatch& batch);

// Greedy-action agreement with the recorded actions over the whole dataset.
double action_agreement(const UnifiedDataset& ds, const ModelParams& params);

using EpochSink = std::function<void(const EpochStats&)>;

// Algorithm: supervised pre-training by masked cross-entropy over shuffled
// chunks; optionally regresses the value head onto discounted return-to-go.
TrainReport pretrain(const UnifiedDataset& ds, ModelParams& params,
                     const OfflineConfig& cfg, const EpochSink& sink = nullptr);

}  // namespace madt
