#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "madt/rng.hpp"
#include "madt/tensor.hpp"

namespace madt {

enum class ActMode { kGreedy, kSample };

struct ModelConfig {
  int n_layer = 2;
  int n_head = 2;
  int n_embd = 32;
  int context_length = 32;
  int max_timestep = 400;
  int universal_obs_dim = 0;
  int universal_state_dim = 0;
  int universal_action_dim = 0;
  int max_agents = 0;
  bool use_return_token = false;  // optional return-conditioned input, off by default

  int token_dim() const {
    return universal_state_dim + universal_obs_dim + max_agents +
           (use_return_token ? 1 : 0);
  }
  int head_dim() const { return n_embd / n_head; }
  int ffn_dim() const { return 4 * n_embd; }

  void validate() const;
};

// One training window for a batch of agent trajectories. Tokens are
// state ‖ observation ‖ one-hot agent id (‖ return-to-go when enabled);
// invalid positions are zero-padded tails past the episode end.
struct ContextBatch {
  int batch = 0;
  int context = 0;   // C
  int token_dim = 0;
  int action_dim = 0;
  std::vector<double> tokens;      // [batch * C * token_dim]
  std::vector<int> timesteps;      // [batch * C] absolute environment timestep
  std::vector<uint8_t> avail;      // [batch * C * action_dim]
  std::vector<uint8_t> valid;      // [batch * C]
  std::vector<int> actions;        // [batch * C] targets (training only)
  std::vector<double> returns;     // [batch * C] value-regression targets

  void validate(const ModelConfig& cfg) const;
};

// Shared-across-agents transformer weights. All tensors are requires_grad
// leaves owned by this struct; named access drives the checkpoint format.
struct ModelParams {
  ModelConfig cfg;

  Tensor embed_w, embed_b;
  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor wq, wk, wv, wo;
    Tensor ln2_g, ln2_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };
  std::vector<Block> blocks;
  Tensor lnf_g, lnf_b;
  Tensor action_w, action_b;
  Tensor value_w, value_b;

  static ModelParams init(const ModelConfig& cfg, Rng& rng);

  std::vector<std::pair<std::string, Tensor>> named() const;
  std::vector<Tensor> parameters() const;
  void zero_grad() const;
  bool all_finite() const;

  void save(const std::string& path, const std::string& provenance) const;
  static ModelParams load(const std::string& path);
};

// component 2i = sin(pos / 10000^(2i/d)), 2i+1 = cos with the same angle
Tensor positional_encoding(int pos, int d_model, int max_timestep);

// Multi-head causal self-attention over one window [C x n_embd] with the
// additive lower-triangular mask and 1/sqrt(d_k) scaling.
Tensor causal_attention(const Tensor& x, const ModelParams::Block& blk,
                        const ModelConfig& cfg);

struct ForwardResult {
  // per batch row: action logits [C x action_dim] with the availability
  // sentinel already applied, and values [C]
  std::vector<Tensor> logits;
  std::vector<Tensor> values;
};

ForwardResult forward(const ContextBatch& batch, const ModelParams& params);

// Greedy argmax over legal logits (lowest index wins ties) or a draw from
// the availability-masked softmax.
int act_from_logits(const std::vector<double>& logits,
                    const std::vector<uint8_t>& avail, ActMode mode, Rng& rng);

// Log-probability of `action` under the availability-masked softmax of a
// raw logits row.
double masked_log_prob(const std::vector<double>& logits,
                       const std::vector<uint8_t>& avail, int action);

// Incremental evaluator for rollouts: feeds one token at a time and caches
// per-layer keys/values so each step costs one attention row. Produces
// bitwise the same logits as forward() over the same window.
class RolloutSession {
 public:
  RolloutSession(const ModelParams& params);

  void reset();  // start a fresh context window
  int length() const { return static_cast<int>(pos_.size()); }

  struct StepOut {
    std::vector<double> logits;  // masked action logits
    double value = 0.0;
  };
  StepOut step(const std::vector<double>& token, int timestep,
               const std::vector<uint8_t>& avail);

 private:
  const ModelParams& p_;
  std::vector<std::vector<double>> k_cache_, v_cache_;  // per layer, row-major
  std::vector<int> pos_;
};

}  // namespace madt
