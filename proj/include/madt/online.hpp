#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "madt/dataset.hpp"
#include "madt/env.hpp"
#include "madt/model.hpp"
#include "madt/offline.hpp"
#include "madt/optim.hpp"

namespace madt {

struct PPOConfig {
  double discount = 0.99;
  double clip_eps = 0.2;
  int ppo_epochs = 5;       // paper range 5-15
  double online_lr = 1e-4;  // paper uses 1e-4 or 5e-4
  int buffer_size = 64;     // episodes per collection
  int eval_epochs = 32;
  int64_t total_env_steps = 0;
  uint64_t seed = 0;
  int mini_batch_size = 128;  // context windows per update batch
  double value_coef = 0.5;
  double grad_clip = 10.0;
  double entropy_coef = 0.0;
  bool reinforce = false;  // plain return-weighted log-prob arm
  bool use_gae = false;    // non-default generalized-advantage variant
  double gae_lambda = 0.95;
  double rtg_prompt = 1.0;  // initial return prompt when use_return_token
  std::vector<double> return_thresholds;

  void validate() const;
};

// Everything the update needs, per agent-timestep, grouped per agent
// trajectory so updates re-chunk exactly like collection.
struct RolloutStep {
  UnifiedStep core;  // unified-dim state/obs/avail, scaled reward, rtg token
  double reward_raw = 0.0;
  double logp_behavior = 0.0;
  double value = 0.0;
  double ret = 0.0;      // discounted return-to-go (scaled rewards)
  double adv = 0.0;      // normalized advantage
  double adv_raw = 0.0;  // pre-normalization
};

struct RolloutTraj {
  int agent_id = 0;
  std::vector<RolloutStep> steps;
};

struct RolloutBuffer {
  std::vector<RolloutTraj> trajs;
  int n_episodes = 0;
  int64_t env_steps = 0;  // team steps consumed from the budget
  std::vector<double> episode_returns_raw;
  std::vector<uint8_t> episode_wins;

  double mean_return() const;
  double success_rate() const;
};

// Runs whole episodes with per-agent context windows (sessions reset at
// multiples of the model context length) until `n_episodes` or the step
// budget runs out.
RolloutBuffer collect(GridEnv& env, const ModelParams& params, int n_episodes,
                      Rng& rng, const PPOConfig& cfg,
                      int64_t step_budget_remaining = -1,
                      ActMode mode = ActMode::kSample);

// Monte-Carlo return-to-go and advantage = return - value, normalized to
// zero mean / unit variance across the buffer.
void compute_advantage(RolloutBuffer& buffer, const PPOConfig& cfg);

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double mean_weight = 0.0;
  int minibatches = 0;
};

UpdateStats ppo_update(const RolloutBuffer& buffer, ModelParams& params, Adam& opt,
                       const PPOConfig& cfg, Rng& rng);

// Per-sample pessimistic surrogate min(w*A, clip(w, 1-eps, 1+eps)*A) as
// recorded tensor ops; the quantity ppo_update maximizes.
Tensor clipped_surrogate(const Tensor& ratio, const Tensor& adv, double clip_eps);

// The loss one whole-buffer update minibatch would see (policy + value +
// entropy terms per cfg); exposed so gradient-direction properties can be
// checked without stepping an optimizer.
Tensor ppo_batch_loss(const RolloutBuffer& buffer, const ModelParams& params,
                      const PPOConfig& cfg, UpdateStats* stats = nullptr);

struct EvalResult {
  double mean_return = 0.0;
  double success_rate = 0.0;
};

EvalResult evaluate(GridEnv& env, const ModelParams& params, int episodes,
                    uint64_t seed, const PPOConfig& cfg);

struct RandomBaseline {
  double mean_return = 0.0;
  double std_return = 0.0;
  double stderr_return = 0.0;
};

RandomBaseline random_policy_baseline(GridEnv& env, int episodes, uint64_t seed);

struct IterStats {
  int iteration = 0;
  int64_t env_steps = 0;
  double collect_return = 0.0;
  double collect_success = 0.0;
  double eval_return = 0.0;
  double eval_success = 0.0;
  UpdateStats update;
  bool updated = false;
};

struct FinetuneReport {
  std::vector<IterStats> iterations;
  std::map<double, int64_t> steps_to_threshold;  // -1 when never reached
  bool insufficient_budget = false;
  EvalResult final_eval;
};

using IterSink = std::function<void(const IterStats&)>;

// Alternates collect / compute_advantage / ppo_update until the env-step
// budget is spent; greedy evaluation after every iteration drives the
// learning curve and the steps-to-threshold table.
FinetuneReport finetune(const ScenarioDef& scenario, ModelParams& params,
                        const PPOConfig& cfg, const IterSink& sink = nullptr);

}  // namespace madt
