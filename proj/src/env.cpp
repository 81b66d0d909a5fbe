#include "madt/env.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "madt/errors.hpp"

namespace madt {

namespace {

int manhattan(std::pair<int, int> a, std::pair<int, int> b) {
  return std::abs(a.first - b.first) + std::abs(a.second - b.second);
}

}  // namespace

TaskSpec ScenarioDef::task_spec() const {
  TaskSpec s;
  s.scenario_id = id;
  s.n_agents = n_agents;
  s.obs_dim = 2 + 3 * (n_agents - 1) + 4 * n_targets;
  s.state_dim = 2 * n_agents + 3 * n_targets;
  s.n_actions = tag_to_capture ? 6 : 5;
  s.max_episode_len = max_episode_len;
  const int d = grid_w + grid_h;
  s.reward_min = time_penalty - shaping_coef * n_targets / static_cast<double>(d);
  s.reward_max = time_penalty + shaping_coef * n_targets / static_cast<double>(d) +
                 capture_bonus * n_targets + win_bonus;
  s.win_predicate = "all targets captured";
  return s;
}

ScenarioDef parse_scenario_config(const std::string& text) {
  ScenarioDef def;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto parse_xy = [&lineno](const std::string& v) {
    size_t comma = v.find(',');
    if (comma == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected x,y, got '" + v + "'");
    }
    return std::make_pair(std::stoi(v.substr(0, comma)), std::stoi(v.substr(comma + 1)));
  };
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos) {
        throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      }
      continue;
    }
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "scenario_id") def.id = val;
    else if (key == "grid_w") def.grid_w = std::stoi(val);
    else if (key == "grid_h") def.grid_h = std::stoi(val);
    else if (key == "n_agents") def.n_agents = std::stoi(val);
    else if (key == "n_targets") def.n_targets = std::stoi(val);
    else if (key == "tag_to_capture") def.tag_to_capture = (val == "true" || val == "1");
    else if (key == "sight") def.sight = std::stoi(val);
    else if (key == "max_episode_len") def.max_episode_len = std::stoi(val);
    else if (key == "time_penalty") def.time_penalty = std::stod(val);
    else if (key == "shaping_coef") def.shaping_coef = std::stod(val);
    else if (key == "capture_bonus") def.capture_bonus = std::stod(val);
    else if (key == "win_bonus") def.win_bonus = std::stod(val);
    else if (key == "agent_at") def.fixed_agents.push_back(parse_xy(val));
    else if (key == "target_at") def.fixed_targets.push_back(parse_xy(val));
    else throw ConfigError("unknown scenario key '" + key + "' on line " + std::to_string(lineno));
  }
  if (def.id.empty()) throw ConfigError("scenario config missing scenario_id");
  return def;
}

GridEnv::GridEnv(ScenarioDef def) : def_(std::move(def)), spec_(def_.task_spec()) {
  if (def_.n_agents < 1 || def_.n_targets < 1) {
    throw ConfigError("scenario " + def_.id + " needs at least one agent and target");
  }
  if (def_.grid_w < 2 || def_.grid_h < 2) {
    throw ConfigError("scenario " + def_.id + " grid too small");
  }
  if (!def_.fixed_agents.empty() &&
      static_cast<int>(def_.fixed_agents.size()) != def_.n_agents) {
    throw ConfigError("scenario " + def_.id + " pins " +
                      std::to_string(def_.fixed_agents.size()) + " agents, needs " +
                      std::to_string(def_.n_agents));
  }
  if (!def_.fixed_targets.empty() &&
      static_cast<int>(def_.fixed_targets.size()) != def_.n_targets) {
    throw ConfigError("scenario " + def_.id + " pins wrong target count");
  }
}

StepOutcome GridEnv::reset(uint64_t seed) {
  agents_.clear();
  targets_.clear();
  captured_.assign(static_cast<size_t>(def_.n_targets), 0);
  t_ = 0;
  done_ = false;

  if (!def_.fixed_agents.empty()) {
    agents_ = def_.fixed_agents;
    targets_ = def_.fixed_targets;
  } else {
    Rng rng(derive_seed(seed, "layout:" + def_.id));
    std::vector<int> cells(static_cast<size_t>(def_.grid_w * def_.grid_h));
    for (size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
    rng.shuffle(cells);
    const int need = def_.n_agents + def_.n_targets;
    for (int i = 0; i < need; ++i) {
      const int c = cells[static_cast<size_t>(i)];
      auto xy = std::make_pair(c % def_.grid_w, c / def_.grid_w);
      if (i < def_.n_agents) agents_.push_back(xy);
      else targets_.push_back(xy);
    }
  }
  for (auto [x, y] : agents_) {
    if (x < 0 || x >= def_.grid_w || y < 0 || y >= def_.grid_h) {
      throw ConfigError("scenario " + def_.id + " places an agent off-grid");
    }
  }
  for (auto [x, y] : targets_) {
    if (x < 0 || x >= def_.grid_w || y < 0 || y >= def_.grid_h) {
      throw ConfigError("scenario " + def_.id + " places a target off-grid");
    }
  }
  return snapshot(0.0, false, false);
}

std::vector<uint8_t> GridEnv::availability(int agent) const {
  std::vector<uint8_t> m(static_cast<size_t>(spec_.n_actions), 0);
  m[kNoop] = 1;
  const auto [x, y] = agents_[static_cast<size_t>(agent)];
  if (y + 1 < def_.grid_h) m[kNorth] = 1;
  if (y > 0) m[kSouth] = 1;
  if (x + 1 < def_.grid_w) m[kEast] = 1;
  if (x > 0) m[kWest] = 1;
  if (def_.tag_to_capture) {
    for (int t = 0; t < def_.n_targets; ++t) {
      if (!captured_[static_cast<size_t>(t)] &&
          targets_[static_cast<size_t>(t)] == agents_[static_cast<size_t>(agent)]) {
        m[kTag] = 1;
        break;
      }
    }
  }
  return m;
}

double GridEnv::potential() const {
  // negative sum of uncaptured targets' distance to the nearest agent,
  // normalized by grid_w + grid_h
  double phi = 0.0;
  for (int t = 0; t < def_.n_targets; ++t) {
    if (captured_[static_cast<size_t>(t)]) continue;
    int best = def_.grid_w + def_.grid_h;
    for (const auto& a : agents_) best = std::min(best, manhattan(a, targets_[static_cast<size_t>(t)]));
    phi -= static_cast<double>(best);
  }
  return phi / static_cast<double>(def_.grid_w + def_.grid_h);
}

StepOutcome GridEnv::step(const std::vector<int>& joint_action) {
  if (done_) throw ContractError("step() after episode end; reset first");
  if (static_cast<int>(joint_action.size()) != def_.n_agents) {
    throw ContractError("joint action has " + std::to_string(joint_action.size()) +
                        " entries for " + std::to_string(def_.n_agents) + " agents");
  }
  for (int i = 0; i < def_.n_agents; ++i) {
    const auto m = availability(i);
    const int a = joint_action[static_cast<size_t>(i)];
    if (a < 0 || a >= spec_.n_actions || !m[static_cast<size_t>(a)]) {
      throw ContractError("agent " + std::to_string(i) + " action " + std::to_string(a) +
                          " illegal at t=" + std::to_string(t_));
    }
  }

  const double phi_before = potential();

  // simultaneous moves; agents may share cells
  for (int i = 0; i < def_.n_agents; ++i) {
    auto& [x, y] = agents_[static_cast<size_t>(i)];
    switch (joint_action[static_cast<size_t>(i)]) {
      case kNorth: ++y; break;
      case kSouth: --y; break;
      case kEast: ++x; break;
      case kWest: --x; break;
      default: break;
    }
  }

  int captures = 0;
  for (int t = 0; t < def_.n_targets; ++t) {
    if (captured_[static_cast<size_t>(t)]) continue;
    bool hit = false;
    for (int i = 0; i < def_.n_agents; ++i) {
      if (agents_[static_cast<size_t>(i)] != targets_[static_cast<size_t>(t)]) continue;
      if (def_.tag_to_capture) {
        hit = hit || joint_action[static_cast<size_t>(i)] == kTag;
      } else {
        hit = true;
      }
    }
    if (hit) {
      captured_[static_cast<size_t>(t)] = 1;
      ++captures;
    }
  }

  const bool won = std::all_of(captured_.begin(), captured_.end(),
                               [](uint8_t c) { return c != 0; });
  ++t_;
  const bool timeout = t_ >= def_.max_episode_len;
  done_ = won || timeout;

  double reward = def_.time_penalty +
                  def_.shaping_coef * (potential() - phi_before) +
                  def_.capture_bonus * captures + (won ? def_.win_bonus : 0.0);
  // the declared range bounds the reward exactly; rounding in the potential
  // difference can stray a few ulps past it
  reward = std::clamp(reward, spec_.reward_min, spec_.reward_max);
  return snapshot(reward, done_, won);
}

StepOutcome GridEnv::snapshot(double reward, bool done, bool won) const {
  StepOutcome out;
  out.reward = reward;
  out.done = done;
  out.won = won;

  const double nx = def_.grid_w > 1 ? 1.0 / (def_.grid_w - 1) : 1.0;
  const double ny = def_.grid_h > 1 ? 1.0 / (def_.grid_h - 1) : 1.0;

  out.state.reserve(static_cast<size_t>(spec_.state_dim));
  for (const auto& [x, y] : agents_) {
    out.state.push_back(x * nx);
    out.state.push_back(y * ny);
  }
  for (int t = 0; t < def_.n_targets; ++t) {
    out.state.push_back(targets_[static_cast<size_t>(t)].first * nx);
    out.state.push_back(targets_[static_cast<size_t>(t)].second * ny);
    out.state.push_back(captured_[static_cast<size_t>(t)] ? 1.0 : 0.0);
  }

  out.obs.resize(static_cast<size_t>(def_.n_agents));
  out.avail.resize(static_cast<size_t>(def_.n_agents));
  for (int i = 0; i < def_.n_agents; ++i) {
    auto& o = out.obs[static_cast<size_t>(i)];
    o.reserve(static_cast<size_t>(spec_.obs_dim));
    const auto self = agents_[static_cast<size_t>(i)];
    o.push_back(self.first * nx);
    o.push_back(self.second * ny);
    for (int j = 0; j < def_.n_agents; ++j) {
      if (j == i) continue;
      const auto other = agents_[static_cast<size_t>(j)];
      if (manhattan(self, other) <= def_.sight) {
        o.push_back((other.first - self.first) * nx);
        o.push_back((other.second - self.second) * ny);
        o.push_back(1.0);
      } else {
        o.push_back(0.0);
        o.push_back(0.0);
        o.push_back(0.0);
      }
    }
    for (int t = 0; t < def_.n_targets; ++t) {
      const auto tgt = targets_[static_cast<size_t>(t)];
      if (manhattan(self, tgt) <= def_.sight) {
        o.push_back((tgt.first - self.first) * nx);
        o.push_back((tgt.second - self.second) * ny);
        o.push_back(1.0);
      } else {
        o.push_back(0.0);
        o.push_back(0.0);
        o.push_back(0.0);
      }
      o.push_back(captured_[static_cast<size_t>(t)] ? 1.0 : 0.0);
    }
    out.avail[static_cast<size_t>(i)] = availability(i);
  }
  return out;
}

namespace {

// deterministic coordinator: agents claim nearest unclaimed targets in
// index order, then walk the shortest path (x axis first)
int good_action(const GridEnv& env, int agent) {
  const auto& agents = env.agent_positions();
  const auto& targets = env.target_positions();
  const auto& captured = env.captured();
  const int n_agents = static_cast<int>(agents.size());
  const int n_targets = static_cast<int>(targets.size());

  std::vector<int> claim(static_cast<size_t>(n_agents), -1);
  std::vector<uint8_t> claimed(static_cast<size_t>(n_targets), 0);
  for (int i = 0; i < n_agents; ++i) {
    int best = -1, best_d = 1 << 20;
    for (int t = 0; t < n_targets; ++t) {
      if (captured[static_cast<size_t>(t)] || claimed[static_cast<size_t>(t)]) continue;
      const int d = manhattan(agents[static_cast<size_t>(i)], targets[static_cast<size_t>(t)]);
      if (d < best_d) {
        best_d = d;
        best = t;
      }
    }
    if (best < 0) {
      // more agents than remaining targets: head for the nearest uncaptured
      for (int t = 0; t < n_targets; ++t) {
        if (captured[static_cast<size_t>(t)]) continue;
        const int d = manhattan(agents[static_cast<size_t>(i)], targets[static_cast<size_t>(t)]);
        if (d < best_d) {
          best_d = d;
          best = t;
        }
      }
    } else {
      claimed[static_cast<size_t>(best)] = 1;
    }
    claim[static_cast<size_t>(i)] = best;
  }

  const int tgt = claim[static_cast<size_t>(agent)];
  if (tgt < 0) return kNoop;  // everything captured
  const auto self = agents[static_cast<size_t>(agent)];
  const auto goal = targets[static_cast<size_t>(tgt)];
  if (self == goal) {
    return env.def().tag_to_capture ? kTag : kNoop;
  }
  const int dx = goal.first - self.first;
  const int dy = goal.second - self.second;
  if (dx > 0) return kEast;
  if (dx < 0) return kWest;
  return dy > 0 ? kNorth : kSouth;
}

int random_legal(const std::vector<uint8_t>& avail, Rng& rng) {
  int n_legal = 0;
  for (uint8_t a : avail) n_legal += a ? 1 : 0;
  int pick = rng.uniform_int(n_legal);
  for (size_t a = 0; a < avail.size(); ++a) {
    if (!avail[a]) continue;
    if (pick-- == 0) return static_cast<int>(a);
  }
  throw ContractError("no legal action");
}

}  // namespace

int scripted_action(PolicyTier tier, const GridEnv& env, int agent, Rng& rng) {
  const int good = good_action(env, agent);
  if (tier == PolicyTier::kGood) return good;
  const double u = rng.uniform();
  const double noise = tier == PolicyTier::kMedium ? 0.35 : 0.9;
  if (u < noise) {
    const auto avail = env.availability(agent);
    return random_legal(avail, rng);
  }
  return good;
}

std::vector<ScenarioDef> scenario_registry() {
  std::vector<ScenarioDef> defs;

  ScenarioDef s1;
  s1.id = "cross2";
  s1.grid_w = s1.grid_h = 6;
  s1.n_agents = 2;
  s1.n_targets = 2;
  s1.tag_to_capture = false;
  s1.sight = 3;
  s1.max_episode_len = 32;
  s1.win_bonus = 5.0;
  defs.push_back(s1);

  ScenarioDef s2;
  s2.id = "tagteam3";
  s2.grid_w = s2.grid_h = 7;
  s2.n_agents = 3;
  s2.n_targets = 2;
  s2.tag_to_capture = true;
  s2.sight = 3;
  s2.max_episode_len = 40;
  s2.win_bonus = 8.0;
  defs.push_back(s2);

  ScenarioDef s3;
  s3.id = "sweep2";
  s3.grid_w = s3.grid_h = 7;
  s3.n_agents = 2;
  s3.n_targets = 3;
  s3.tag_to_capture = true;
  s3.sight = 4;
  s3.max_episode_len = 56;
  s3.win_bonus = 6.0;
  defs.push_back(s3);

  ScenarioDef s4;
  s4.id = "quad4";
  s4.grid_w = s4.grid_h = 8;
  s4.n_agents = 4;
  s4.n_targets = 4;
  s4.tag_to_capture = false;
  s4.sight = 3;
  s4.max_episode_len = 48;
  s4.win_bonus = 10.0;
  defs.push_back(s4);

  ScenarioDef s5;
  s5.id = "trio1";
  s5.grid_w = s5.grid_h = 5;
  s5.n_agents = 3;
  s5.n_targets = 1;
  s5.tag_to_capture = false;
  s5.sight = 2;
  s5.max_episode_len = 24;
  s5.win_bonus = 4.0;
  defs.push_back(s5);

  // held out from the default training list for zero-shot evaluation
  ScenarioDef h;
  h.id = "duo2_holdout";
  h.grid_w = h.grid_h = 7;
  h.n_agents = 3;
  h.n_targets = 2;
  h.tag_to_capture = false;
  h.sight = 3;
  h.max_episode_len = 40;
  h.win_bonus = 7.0;
  defs.push_back(h);

  return defs;
}

const ScenarioDef& find_scenario(const std::string& id) {
  static const std::vector<ScenarioDef> defs = scenario_registry();
  for (const auto& d : defs)
    if (d.id == id) return d;
  std::string known;
  for (const auto& d : defs) known += (known.empty() ? "" : ", ") + d.id;
  throw ConfigError("unknown scenario '" + id + "'; registered: " + known);
}

std::vector<std::string> default_training_list() {
  return {"cross2", "tagteam3", "sweep2", "quad4", "trio1"};
}

std::string holdout_scenario_id() { return "duo2_holdout"; }

}  // namespace madt
