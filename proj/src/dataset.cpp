#include "madt/dataset.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "madt/errors.hpp"

namespace madt {

using nlohmann::json;

std::string tier_name(PolicyTier tier) {
  switch (tier) {
    case PolicyTier::kPoor: return "poor";
    case PolicyTier::kMedium: return "medium";
    case PolicyTier::kGood: return "good";
  }
  return "?";
}

PolicyTier tier_from_name(const std::string& name) {
  if (name == "poor") return PolicyTier::kPoor;
  if (name == "medium") return PolicyTier::kMedium;
  if (name == "good") return PolicyTier::kGood;
  throw ConfigError("unknown tier '" + name + "' (poor|medium|good)");
}

std::vector<Trajectory> Dataset::trajectories() const {
  std::vector<Trajectory> out;
  for (const auto& ep : episodes) {
    const int T = static_cast<int>(ep.states.size());
    const int n_agents = T > 0 ? static_cast<int>(ep.obs[0].size()) : spec.n_agents;
    for (int i = 0; i < n_agents; ++i) {
      Trajectory tr;
      tr.agent_id = i;
      tr.steps.reserve(static_cast<size_t>(T));
      for (int t = 0; t < T; ++t) {
        TimestepRecord rec;
        rec.state = ep.states[static_cast<size_t>(t)];
        rec.obs = ep.obs[static_cast<size_t>(t)][static_cast<size_t>(i)];
        rec.action = ep.actions[static_cast<size_t>(t)][static_cast<size_t>(i)];
        rec.reward = ep.rewards[static_cast<size_t>(t)];
        rec.done = ep.dones[static_cast<size_t>(t)] != 0;
        rec.avail = ep.avail[static_cast<size_t>(t)][static_cast<size_t>(i)];
        tr.steps.push_back(std::move(rec));
      }
      out.push_back(std::move(tr));
    }
  }
  return out;
}

Dataset generate(const ScenarioDef& def, PolicyTier tier, int n_episodes, uint64_t seed) {
  if (n_episodes < 0) throw ConfigError("n_episodes must be >= 0");
  Dataset ds;
  ds.spec = def.task_spec();
  ds.manifest.scenario_id = def.id;
  ds.manifest.tier = tier_name(tier);
  ds.manifest.generator_seed = seed;

  GridEnv env(def);
  for (int ep = 0; ep < n_episodes; ++ep) {
    // per-episode derived seeds keep episodes independent of ordering
    Rng rng(derive_seed(seed, "episode:" + std::to_string(ep)));
    StepOutcome view = env.reset(derive_seed(seed, "layout:" + std::to_string(ep)));

    EpisodeBlock block;
    while (!env.done()) {
      std::vector<int> joint(static_cast<size_t>(def.n_agents));
      for (int i = 0; i < def.n_agents; ++i) joint[static_cast<size_t>(i)] = scripted_action(tier, env, i, rng);

      block.states.push_back(view.state);
      block.obs.push_back(view.obs);
      block.avail.push_back(view.avail);
      block.actions.push_back(joint);

      view = env.step(joint);
      block.rewards.push_back(view.reward);
      block.dones.push_back(view.done ? 1 : 0);
    }
    ds.episodes.push_back(std::move(block));
  }
  ds.manifest = recompute_stats(ds);
  ds.manifest.scenario_id = def.id;
  ds.manifest.tier = tier_name(tier);
  ds.manifest.generator_seed = seed;
  return ds;
}

DatasetManifest recompute_stats(const Dataset& ds) {
  DatasetManifest m = ds.manifest;
  m.n_episodes = static_cast<int>(ds.episodes.size());

  // two-pass mean/std over per-record rewards (each agent-timestep carries
  // the shared team reward) and over per-episode returns
  int64_t n = 0;
  double sum = 0.0;
  double ret_sum = 0.0;
  for (const auto& ep : ds.episodes) {
    const int64_t agents = ep.obs.empty() ? ds.spec.n_agents
                                          : static_cast<int64_t>(ep.obs[0].size());
    double ret = 0.0;
    for (double r : ep.rewards) {
      sum += r * static_cast<double>(agents);
      ret += r;
    }
    n += static_cast<int64_t>(ep.rewards.size()) * agents;
    ret_sum += ret;
  }
  m.n_samples = n;
  m.reward_mean = n > 0 ? sum / static_cast<double>(n) : 0.0;
  m.return_mean = m.n_episodes > 0 ? ret_sum / m.n_episodes : 0.0;

  double var = 0.0, ret_var = 0.0;
  for (const auto& ep : ds.episodes) {
    const int64_t agents = ep.obs.empty() ? ds.spec.n_agents
                                          : static_cast<int64_t>(ep.obs[0].size());
    double ret = 0.0;
    for (double r : ep.rewards) {
      var += (r - m.reward_mean) * (r - m.reward_mean) * static_cast<double>(agents);
      ret += r;
    }
    ret_var += (ret - m.return_mean) * (ret - m.return_mean);
  }
  m.reward_std = n > 0 ? std::sqrt(var / static_cast<double>(n)) : 0.0;
  m.return_std = m.n_episodes > 0 ? std::sqrt(ret_var / m.n_episodes) : 0.0;
  return m;
}

namespace {

json manifest_to_json(const DatasetManifest& m, const TaskSpec& spec) {
  json j;
  j["scenario_id"] = m.scenario_id;
  j["tier"] = m.tier;
  j["n_episodes"] = m.n_episodes;
  j["n_samples"] = m.n_samples;
  j["reward_mean"] = m.reward_mean;
  j["reward_std"] = m.reward_std;
  j["return_mean"] = m.return_mean;
  j["return_std"] = m.return_std;
  j["generator_seed"] = m.generator_seed;
  j["schema_version"] = m.schema_version;
  j["task"] = {{"scenario_id", spec.scenario_id},
               {"n_agents", spec.n_agents},
               {"obs_dim", spec.obs_dim},
               {"state_dim", spec.state_dim},
               {"n_actions", spec.n_actions},
               {"max_episode_len", spec.max_episode_len},
               {"reward_min", spec.reward_min},
               {"reward_max", spec.reward_max},
               {"win_predicate", spec.win_predicate}};
  return j;
}

void manifest_from_json(const json& j, DatasetManifest& m, TaskSpec& spec) {
  m.scenario_id = j.at("scenario_id").get<std::string>();
  m.tier = j.at("tier").get<std::string>();
  m.n_episodes = j.at("n_episodes").get<int>();
  m.n_samples = j.at("n_samples").get<int64_t>();
  m.reward_mean = j.at("reward_mean").get<double>();
  m.reward_std = j.at("reward_std").get<double>();
  m.return_mean = j.at("return_mean").get<double>();
  m.return_std = j.at("return_std").get<double>();
  m.generator_seed = j.at("generator_seed").get<uint64_t>();
  m.schema_version = j.at("schema_version").get<int>();
  const json& t = j.at("task");
  spec.scenario_id = t.at("scenario_id").get<std::string>();
  spec.n_agents = t.at("n_agents").get<int>();
  spec.obs_dim = t.at("obs_dim").get<int>();
  spec.state_dim = t.at("state_dim").get<int>();
  spec.n_actions = t.at("n_actions").get<int>();
  spec.max_episode_len = t.at("max_episode_len").get<int>();
  spec.reward_min = t.at("reward_min").get<double>();
  spec.reward_max = t.at("reward_max").get<double>();
  spec.win_predicate = t.at("win_predicate").get<std::string>();
}

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated dataset file: " + path);
  return v;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open dataset for writing: " + path);
  out.write(kDatasetMagic, static_cast<std::streamsize>(std::strlen(kDatasetMagic)));
  const std::string header = manifest_to_json(ds.manifest, ds.spec).dump();
  put(out, static_cast<uint32_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  put(out, static_cast<uint32_t>(ds.episodes.size()));
  for (const auto& ep : ds.episodes) {
    const uint32_t T = static_cast<uint32_t>(ep.states.size());
    const uint32_t n_agents = T > 0 ? static_cast<uint32_t>(ep.obs[0].size())
                                    : static_cast<uint32_t>(ds.spec.n_agents);
    // block length in bytes after this prefix, so readers can seek
    const uint64_t doubles = static_cast<uint64_t>(T) * ds.spec.state_dim +
                             static_cast<uint64_t>(T) * n_agents * ds.spec.obs_dim +
                             static_cast<uint64_t>(T);
    const uint64_t ints = static_cast<uint64_t>(T) * n_agents +      // actions
                          static_cast<uint64_t>(T) +                 // dones
                          static_cast<uint64_t>(T) * n_agents * ds.spec.n_actions;
    put(out, static_cast<uint64_t>(8 + doubles * 8 + ints * 4));
    put(out, T);
    put(out, n_agents);
    for (const auto& s : ep.states)
      out.write(reinterpret_cast<const char*>(s.data()),
                static_cast<std::streamsize>(s.size() * sizeof(double)));
    for (const auto& per_agent : ep.obs)
      for (const auto& o : per_agent)
        out.write(reinterpret_cast<const char*>(o.data()),
                  static_cast<std::streamsize>(o.size() * sizeof(double)));
    out.write(reinterpret_cast<const char*>(ep.rewards.data()),
              static_cast<std::streamsize>(ep.rewards.size() * sizeof(double)));
    for (const auto& acts : ep.actions)
      for (int a : acts) put(out, static_cast<int32_t>(a));
    for (uint8_t d : ep.dones) put(out, static_cast<int32_t>(d));
    for (const auto& per_agent : ep.avail)
      for (const auto& m : per_agent)
        for (uint8_t b : m) put(out, static_cast<int32_t>(b));
  }
  if (!out) throw DataError("write failed for dataset: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset: " + path);
  std::string magic(std::strlen(kDatasetMagic), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kDatasetMagic) throw DataError("bad dataset magic in " + path);

  const uint32_t hlen = get<uint32_t>(in, path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw DataError("truncated dataset header in " + path);

  Dataset ds;
  try {
    manifest_from_json(json::parse(hs), ds.manifest, ds.spec);
  } catch (const json::exception& e) {
    throw DataError("unparsable dataset header in " + path + ": " + e.what());
  }

  const uint32_t n_episodes = get<uint32_t>(in, path);
  ds.episodes.reserve(n_episodes);
  for (uint32_t e = 0; e < n_episodes; ++e) {
    (void)get<uint64_t>(in, path);  // block length
    const uint32_t T = get<uint32_t>(in, path);
    const uint32_t n_agents = get<uint32_t>(in, path);
    EpisodeBlock ep;
    ep.states.assign(T, std::vector<double>(static_cast<size_t>(ds.spec.state_dim)));
    for (auto& s : ep.states)
      in.read(reinterpret_cast<char*>(s.data()),
              static_cast<std::streamsize>(s.size() * sizeof(double)));
    ep.obs.assign(T, std::vector<std::vector<double>>(
                         n_agents, std::vector<double>(static_cast<size_t>(ds.spec.obs_dim))));
    for (auto& per_agent : ep.obs)
      for (auto& o : per_agent)
        in.read(reinterpret_cast<char*>(o.data()),
                static_cast<std::streamsize>(o.size() * sizeof(double)));
    ep.rewards.assign(T, 0.0);
    in.read(reinterpret_cast<char*>(ep.rewards.data()),
            static_cast<std::streamsize>(ep.rewards.size() * sizeof(double)));
    ep.actions.assign(T, std::vector<int>(n_agents));
    for (auto& acts : ep.actions)
      for (auto& a : acts) a = get<int32_t>(in, path);
    ep.dones.assign(T, 0);
    for (auto& d : ep.dones) d = static_cast<uint8_t>(get<int32_t>(in, path));
    ep.avail.assign(T, std::vector<std::vector<uint8_t>>(
                           n_agents, std::vector<uint8_t>(static_cast<size_t>(ds.spec.n_actions))));
    for (auto& per_agent : ep.avail)
      for (auto& m : per_agent)
        for (auto& b : m) b = static_cast<uint8_t>(get<int32_t>(in, path));
    if (!in) throw DataError("truncated episode block in " + path);
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

// --- unification ---

std::vector<double> pad_features(const std::vector<double>& vec, int target_dim,
                                 const std::string& scenario_id) {
  if (static_cast<int>(vec.size()) > target_dim) {
    throw DataError("scenario " + scenario_id + ": feature dim " +
                    std::to_string(vec.size()) + " exceeds universal dim " +
                    std::to_string(target_dim));
  }
  std::vector<double> out = vec;
  out.resize(static_cast<size_t>(target_dim), 0.0);
  return out;
}

std::pair<std::vector<uint8_t>, int> unify_actions(const std::vector<uint8_t>& mask,
                                                   int action, int target_n,
                                                   const std::string& scenario_id) {
  if (static_cast<int>(mask.size()) > target_n) {
    throw DataError("scenario " + scenario_id + ": action space " +
                    std::to_string(mask.size()) + " exceeds universal " +
                    std::to_string(target_n));
  }
  if (action < 0 || action >= static_cast<int>(mask.size()) ||
      !mask[static_cast<size_t>(action)]) {
    throw DataError("scenario " + scenario_id + ": recorded action " +
                    std::to_string(action) + " illegal under its mask");
  }
  std::vector<uint8_t> widened = mask;
  widened.resize(static_cast<size_t>(target_n), 0);
  return {widened, action};  // shared-prefix semantics: the index is unchanged
}

double scale_reward(double r, const TaskSpec& spec) {
  const double span = spec.reward_max - spec.reward_min;
  if (span <= 0.0) {
    throw DataError("scenario " + spec.scenario_id + ": degenerate reward range");
  }
  return (r - spec.reward_min) / span;
}

double unscale_reward(double r_scaled, const TaskSpec& spec) {
  return r_scaled * (spec.reward_max - spec.reward_min) + spec.reward_min;
}

int64_t UnifiedDataset::n_samples() const {
  int64_t n = 0;
  for (const auto& tr : trajectories) n += static_cast<int64_t>(tr.steps.size());
  return n;
}

UnifiedDataset merge(const std::vector<Dataset>& datasets, const UniversalDims& dims,
                     double discount) {
  UnifiedDataset out;
  out.dims = dims;
  out.discount = discount;

  for (size_t d = 0; d < datasets.size(); ++d) {
    const Dataset& ds = datasets[d];
    const TaskSpec& spec = ds.spec;
    if (spec.n_agents > dims.max_agents) {
      throw DataError("scenario " + spec.scenario_id + ": " +
                      std::to_string(spec.n_agents) + " agents exceed max_agents " +
                      std::to_string(dims.max_agents));
    }
    out.sources.push_back(spec);
    for (const Trajectory& tr : ds.trajectories()) {
      UnifiedTrajectory ut;
      ut.scenario_index = static_cast<int>(d);
      ut.agent_id = tr.agent_id;
      ut.steps.reserve(tr.steps.size());
      for (const TimestepRecord& rec : tr.steps) {
        UnifiedStep us;
        us.state = pad_features(rec.state, dims.state_dim, spec.scenario_id);
        us.obs = pad_features(rec.obs, dims.obs_dim, spec.scenario_id);
        auto [mask, action] =
            unify_actions(rec.avail, rec.action, dims.action_dim, spec.scenario_id);
        us.avail = std::move(mask);
        us.action = action;
        us.reward = scale_reward(rec.reward, spec);
        us.done = rec.done;
        ut.steps.push_back(std::move(us));
      }
      // discounted return-to-go over the scaled rewards
      double acc = 0.0;
      for (auto it = ut.steps.rbegin(); it != ut.steps.rend(); ++it) {
        acc = it->reward + discount * acc;
        it->return_to_go = acc;
      }
      out.trajectories.push_back(std::move(ut));
    }
  }
  return out;
}

}  // namespace madt
