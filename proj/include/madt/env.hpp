#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "madt/rng.hpp"

namespace madt {

// Discrete actions share a common prefix across every scenario so the
// action-space union is meaningful: no-op, four moves, then extras.
enum Action : int {
  kNoop = 0,
  kNorth = 1,
  kSouth = 2,
  kEast = 3,
  kWest = 4,
  kTag = 5,
};

enum class PolicyTier { kPoor, kMedium, kGood };

// Per-scenario metadata driving universal-model unification.
struct TaskSpec {
  std::string scenario_id;
  int n_agents = 0;
  int obs_dim = 0;
  int state_dim = 0;
  int n_actions = 0;
  int max_episode_len = 0;
  double reward_min = 0.0;
  double reward_max = 0.0;
  std::string win_predicate;
};

struct StepOutcome {
  std::vector<double> state;                  // global, normalized
  std::vector<std::vector<double>> obs;       // per agent
  std::vector<std::vector<uint8_t>> avail;    // per agent, n_actions
  double reward = 0.0;                        // shared team reward
  bool done = false;
  bool won = false;
};

// Declarative scenario definition; fixed placements pin exact layouts for
// tests, otherwise reset() samples distinct cells from the seed.
struct ScenarioDef {
  std::string id;
  int grid_w = 7;
  int grid_h = 7;
  int n_agents = 2;
  int n_targets = 2;
  bool tag_to_capture = false;  // false: capture on touch
  int sight = 3;                // Manhattan sight radius
  int max_episode_len = 40;
  double time_penalty = -0.01;
  double shaping_coef = 1.0;
  double capture_bonus = 1.0;
  double win_bonus = 5.0;
  std::vector<std::pair<int, int>> fixed_agents;
  std::vector<std::pair<int, int>> fixed_targets;

  TaskSpec task_spec() const;
};

// key = value text, one per line; agent_at / target_at may repeat
ScenarioDef parse_scenario_config(const std::string& text);

// Cooperative team-reach-and-tag gridworld. Deterministic: (scenario,
// seed, action sequence) fully determines every outcome.
class GridEnv {
 public:
  explicit GridEnv(ScenarioDef def);

  const ScenarioDef& def() const { return def_; }
  const TaskSpec& spec() const { return spec_; }

  StepOutcome reset(uint64_t seed);
  StepOutcome step(const std::vector<int>& joint_action);

  bool done() const { return done_; }
  int timestep() const { return t_; }

  std::vector<uint8_t> availability(int agent) const;

  // full-view accessors for the scripted dataset generators
  const std::vector<std::pair<int, int>>& agent_positions() const { return agents_; }
  const std::vector<std::pair<int, int>>& target_positions() const { return targets_; }
  const std::vector<uint8_t>& captured() const { return captured_; }

 private:
  StepOutcome snapshot(double reward, bool done, bool won) const;
  double potential() const;

  ScenarioDef def_;
  TaskSpec spec_;
  std::vector<std::pair<int, int>> agents_, targets_;
  std::vector<uint8_t> captured_;
  int t_ = 0;
  bool done_ = true;
};

// Scripted behavior policies for dataset generation. They read the
// environment's full view: the good tier is a shortest-path coordinator,
// which partial observations cannot support.
int scripted_action(PolicyTier tier, const GridEnv& env, int agent, Rng& rng);

// The built-in scenario family: five training variants with pairwise
// different (n_agents, obs_dim, n_actions) plus one held-out scenario.
std::vector<ScenarioDef> scenario_registry();
const ScenarioDef& find_scenario(const std::string& id);
std::vector<std::string> default_training_list();
std::string holdout_scenario_id();

}  // namespace madt
