#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "madt/dataset.hpp"
#include "madt/errors.hpp"

using namespace madt;

namespace {

UniversalDims default_dims() {
  UniversalDims d;
  d.state_dim = 20;
  d.obs_dim = 27;
  d.action_dim = 6;
  d.max_agents = 4;
  return d;
}

}  // namespace

TEST_CASE("empty dataset generates a valid zero manifest") {
  Dataset ds = generate(find_scenario("cross2"), PolicyTier::kGood, 0, 7);
  CHECK(ds.manifest.n_samples == 0);
  CHECK(ds.manifest.n_episodes == 0);
  const std::string path = "/tmp/madt_empty.mad";
  save_dataset(ds, path);
  Dataset back = load_dataset(path);
  CHECK(back.manifest.n_samples == 0);
  CHECK(back.episodes.empty());
  std::remove(path.c_str());
}

TEST_CASE("manifest stats match a brute-force recomputation") {
  Dataset ds = generate(find_scenario("cross2"), PolicyTier::kMedium, 40, 3);
  // flat two-pass oracle over the per-agent-timestep reward stream
  std::vector<double> rewards;
  for (const auto& tr : ds.trajectories())
    for (const auto& step : tr.steps) rewards.push_back(step.reward);
  CHECK(static_cast<int64_t>(rewards.size()) == ds.manifest.n_samples);
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(rewards.size());
  CHECK(std::abs(ds.manifest.reward_mean - mean) < 1e-9);
  CHECK(std::abs(ds.manifest.reward_std - std::sqrt(var)) < 1e-9);

  DatasetManifest again = recompute_stats(ds);
  CHECK(again.reward_mean == ds.manifest.reward_mean);
  CHECK(again.reward_std == ds.manifest.reward_std);
  CHECK(again.n_samples == ds.manifest.n_samples);
}

TEST_CASE("hand stats cases") {
  // rewards [1,1,1] -> mean 1 std 0; [0,2] -> mean 1 std 1
  Dataset ds;
  ds.spec = find_scenario("cross2").task_spec();
  EpisodeBlock ep;
  const int T = 3;
  ep.states.assign(T, std::vector<double>(static_cast<size_t>(ds.spec.state_dim), 0.0));
  ep.obs.assign(T, {std::vector<double>(static_cast<size_t>(ds.spec.obs_dim), 0.0)});
  ep.actions.assign(T, {0});
  ep.rewards = {1, 1, 1};
  ep.dones = {0, 0, 1};
  ep.avail.assign(T, {std::vector<uint8_t>(static_cast<size_t>(ds.spec.n_actions), 1)});
  ds.episodes.push_back(ep);
  DatasetManifest m = recompute_stats(ds);
  CHECK(m.reward_mean == doctest::Approx(1.0));
  CHECK(m.reward_std == doctest::Approx(0.0));

  ds.episodes[0].rewards = {0, 2};
  ds.episodes[0].states.resize(2);
  ds.episodes[0].obs.resize(2);
  ds.episodes[0].actions.resize(2);
  ds.episodes[0].dones = {0, 1};
  ds.episodes[0].avail.resize(2);
  m = recompute_stats(ds);
  CHECK(m.reward_mean == doctest::Approx(1.0));
  CHECK(m.reward_std == doctest::Approx(1.0));
}

TEST_CASE("serialization round trip is bitwise") {
  Dataset ds = generate(find_scenario("tagteam3"), PolicyTier::kPoor, 25, 11);
  const std::string path = "/tmp/madt_roundtrip.mad";
  save_dataset(ds, path);
  Dataset back = load_dataset(path);

  REQUIRE(back.episodes.size() == ds.episodes.size());
  CHECK(back.manifest.reward_mean == ds.manifest.reward_mean);
  CHECK(back.manifest.n_samples == ds.manifest.n_samples);
  CHECK(back.spec.obs_dim == ds.spec.obs_dim);
  for (size_t e = 0; e < ds.episodes.size(); ++e) {
    CHECK(back.episodes[e].states == ds.episodes[e].states);
    CHECK(back.episodes[e].obs == ds.episodes[e].obs);
    CHECK(back.episodes[e].actions == ds.episodes[e].actions);
    CHECK(back.episodes[e].rewards == ds.episodes[e].rewards);
    CHECK(back.episodes[e].dones == ds.episodes[e].dones);
    CHECK(back.episodes[e].avail == ds.episodes[e].avail);
  }
  std::remove(path.c_str());
}

TEST_CASE("tier ordering visible in manifests") {
  Dataset poor = generate(find_scenario("cross2"), PolicyTier::kPoor, 50, 5);
  Dataset good = generate(find_scenario("cross2"), PolicyTier::kGood, 50, 5);
  CHECK(good.manifest.return_mean > poor.manifest.return_mean);
}

TEST_CASE("pad_features") {
  CHECK(pad_features({1, 2, 3}, 5, "x") == std::vector<double>{1, 2, 3, 0, 0});
  CHECK(pad_features({1, 2, 3}, 3, "x") == std::vector<double>{1, 2, 3});
  CHECK(pad_features({0, 0}, 4, "x") == std::vector<double>{0, 0, 0, 0});
  CHECK_THROWS_WITH_AS(pad_features({1, 2, 3}, 2, "cross2"), doctest::Contains("cross2"),
                       DataError);
}

TEST_CASE("unify_actions") {
  auto [mask, action] = unify_actions({1, 1, 0}, 1, 5, "x");
  CHECK(mask == std::vector<uint8_t>{1, 1, 0, 0, 0});
  CHECK(action == 1);
  CHECK_THROWS_AS(unify_actions({1, 0}, 1, 5, "x"), DataError);   // illegal action
  CHECK_THROWS_AS(unify_actions({1, 1, 1}, 0, 2, "x"), DataError);  // shrink
}

TEST_CASE("reward scaling endpoints and round trip") {
  TaskSpec spec;
  spec.scenario_id = "r";
  spec.reward_min = 0.0;
  spec.reward_max = 20.0;
  CHECK(scale_reward(10.0, spec) == doctest::Approx(0.5));
  CHECK(scale_reward(0.0, spec) == 0.0);
  CHECK(scale_reward(20.0, spec) == 1.0);

  Rng rng(3);
  TaskSpec s2 = find_scenario("quad4").task_spec();
  for (int i = 0; i < 1000; ++i) {
    const double r = s2.reward_min + rng.uniform() * (s2.reward_max - s2.reward_min);
    CHECK(std::abs(unscale_reward(scale_reward(r, s2), s2) - r) < 1e-12);
  }

  TaskSpec deg = spec;
  deg.reward_max = deg.reward_min;
  CHECK_THROWS_AS(scale_reward(1.0, deg), DataError);
}

TEST_CASE("merge unifies a single dataset up to padding and scaling") {
  Dataset ds = generate(find_scenario("cross2"), PolicyTier::kGood, 10, 21);
  UnifiedDataset uni = merge({ds}, default_dims());
  CHECK(uni.sources.size() == 1);
  CHECK(uni.n_samples() == ds.manifest.n_samples);

  const auto trajs = ds.trajectories();
  REQUIRE(uni.trajectories.size() == trajs.size());
  for (size_t i = 0; i < trajs.size(); ++i) {
    const auto& raw = trajs[i];
    const auto& u = uni.trajectories[i];
    REQUIRE(u.steps.size() == raw.steps.size());
    CHECK(u.agent_id == raw.agent_id);
    for (size_t t = 0; t < raw.steps.size(); ++t) {
      // prefix preserved, tail zero
      for (size_t k = 0; k < raw.steps[t].obs.size(); ++k)
        CHECK(u.steps[t].obs[k] == raw.steps[t].obs[k]);
      for (size_t k = raw.steps[t].obs.size(); k < u.steps[t].obs.size(); ++k)
        CHECK(u.steps[t].obs[k] == 0.0);
      CHECK(u.steps[t].action == raw.steps[t].action);
      CHECK(u.steps[t].reward ==
            doctest::Approx(scale_reward(raw.steps[t].reward, ds.spec)).epsilon(1e-12));
      CHECK(u.steps[t].reward >= 0.0);
      CHECK(u.steps[t].reward <= 1.0);
    }
  }
}

TEST_CASE("merged corpus satisfies the unified invariants") {
  std::vector<Dataset> parts;
  int64_t total = 0;
  for (const auto& id : default_training_list()) {
    parts.push_back(generate(find_scenario(id), PolicyTier::kMedium, 8, 31));
    total += parts.back().manifest.n_samples;
  }
  UnifiedDataset uni = merge(parts, default_dims());
  CHECK(uni.n_samples() == total);
  CHECK(uni.sources.size() == parts.size());

  for (const auto& tr : uni.trajectories) {
    const TaskSpec& src = uni.sources[static_cast<size_t>(tr.scenario_index)];
    for (const auto& s : tr.steps) {
      CHECK(static_cast<int>(s.state.size()) == 20);
      CHECK(static_cast<int>(s.obs.size()) == 27);
      CHECK(static_cast<int>(s.avail.size()) == 6);
      CHECK(s.reward >= 0.0);
      CHECK(s.reward <= 1.0);
      // padding slots never legal, recorded actions never in padding
      for (int a = src.n_actions; a < 6; ++a) CHECK(s.avail[static_cast<size_t>(a)] == 0);
      CHECK(s.action < src.n_actions);
      CHECK(s.avail[static_cast<size_t>(s.action)] == 1);
    }
    // return-to-go telescopes: rtg_t = r_t + gamma * rtg_{t+1}
    for (size_t t = 0; t + 1 < tr.steps.size(); ++t) {
      CHECK(std::abs(tr.steps[t].return_to_go - tr.steps[t].reward -
                     uni.discount * tr.steps[t + 1].return_to_go) < 1e-12);
    }
  }
}

TEST_CASE("merge rejects oversized scenarios") {
  Dataset ds = generate(find_scenario("quad4"), PolicyTier::kPoor, 2, 1);
  UniversalDims tiny;
  tiny.state_dim = 4;
  tiny.obs_dim = 4;
  tiny.action_dim = 5;
  tiny.max_agents = 4;
  CHECK_THROWS_WITH_AS(merge({ds}, tiny), doctest::Contains("quad4"), DataError);
}

TEST_CASE("manifest integrity after disk round trip") {
  Dataset ds = generate(find_scenario("sweep2"), PolicyTier::kGood, 15, 9);
  const std::string path = "/tmp/madt_integrity.mad";
  save_dataset(ds, path);
  Dataset back = load_dataset(path);
  DatasetManifest re = recompute_stats(back);
  CHECK(re.n_samples == back.manifest.n_samples);
  CHECK(std::abs(re.reward_mean - back.manifest.reward_mean) < 1e-12);
  CHECK(std::abs(re.reward_std - back.manifest.reward_std) < 1e-12);
  CHECK(std::abs(re.return_mean - back.manifest.return_mean) < 1e-12);
  std::remove(path.c_str());
}
