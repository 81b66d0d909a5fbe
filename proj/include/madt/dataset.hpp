#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "madt/env.hpp"

namespace madt {

// One agent-timestep: (s, o, a, r, done, v).
struct TimestepRecord {
  std::vector<double> state;
  std::vector<double> obs;
  int action = 0;
  double reward = 0.0;
  bool done = false;
  std::vector<uint8_t> avail;
};

// Ordered records for one agent in one episode; the unit chunked into
// training contexts.
struct Trajectory {
  int agent_id = 0;
  std::vector<TimestepRecord> steps;
};

struct DatasetManifest {
  std::string scenario_id;
  std::string tier;
  int n_episodes = 0;
  int64_t n_samples = 0;  // agent-timesteps
  double reward_mean = 0.0;
  double reward_std = 0.0;  // population
  double return_mean = 0.0;
  double return_std = 0.0;
  uint64_t generator_seed = 0;
  int schema_version = 1;
};

// Per-episode storage block; the shared fields (state, reward, done) are
// stored once and fanned out to per-agent trajectories on load.
struct EpisodeBlock {
  std::vector<std::vector<double>> states;            // [T][state_dim]
  std::vector<std::vector<std::vector<double>>> obs;  // [T][n_agents][obs_dim]
  std::vector<std::vector<int>> actions;              // [T][n_agents]
  std::vector<double> rewards;                        // [T]
  std::vector<uint8_t> dones;                         // [T]
  std::vector<std::vector<std::vector<uint8_t>>> avail;  // [T][n_agents][n_actions]
};

struct Dataset {
  TaskSpec spec;
  DatasetManifest manifest;
  std::vector<EpisodeBlock> episodes;

  std::vector<Trajectory> trajectories() const;
};

// --- generation and serialization ---

Dataset generate(const ScenarioDef& def, PolicyTier tier, int n_episodes, uint64_t seed);

std::string tier_name(PolicyTier tier);
PolicyTier tier_from_name(const std::string& name);

// One file per (scenario, tier): magic, JSON manifest header, then
// length-prefixed binary episode blocks (LE float64 + 32-bit ints).
inline constexpr const char* kDatasetMagic = "MADT-DATA-1\n";

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Recomputes count / mean / std (population) over per-record rewards and
// per-episode returns straight from the records.
DatasetManifest recompute_stats(const Dataset& ds);

// --- universal unification (§ feature padding / action union / reward
// scaling / agent ids) ---

struct UniversalDims {
  int state_dim = 0;
  int obs_dim = 0;
  int action_dim = 0;
  int max_agents = 0;
};

std::vector<double> pad_features(const std::vector<double>& vec, int target_dim,
                                 const std::string& scenario_id);

std::pair<std::vector<uint8_t>, int> unify_actions(const std::vector<uint8_t>& mask,
                                                   int action, int target_n,
                                                   const std::string& scenario_id);

// r' = (r - min) / (max - min) from the declared TaskSpec range.
double scale_reward(double r, const TaskSpec& spec);
double unscale_reward(double r_scaled, const TaskSpec& spec);

struct UnifiedStep {
  std::vector<double> state;  // padded to universal state_dim
  std::vector<double> obs;    // padded to universal obs_dim
  int action = 0;
  double reward = 0.0;        // scaled to [0,1]
  bool done = false;
  std::vector<uint8_t> avail;  // widened to universal action_dim
  double return_to_go = 0.0;   // discounted, over scaled rewards
};

struct UnifiedTrajectory {
  int scenario_index = 0;  // into UnifiedDataset::sources
  int agent_id = 0;
  std::vector<UnifiedStep> steps;
};

struct UnifiedDataset {
  UniversalDims dims;
  std::vector<TaskSpec> sources;
  std::vector<UnifiedTrajectory> trajectories;
  double discount = 0.99;  // used for the stored return-to-go

  int64_t n_samples() const;
};

UnifiedDataset merge(const std::vector<Dataset>& datasets, const UniversalDims& dims,
                     double discount = 0.99);

}  // namespace madt
