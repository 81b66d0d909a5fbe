#include "madt/online.hpp"

#include <algorithm>
#include <cmath>

#include "madt/errors.hpp"

namespace madt {

void PPOConfig::validate() const {
  if (clip_eps <= 0.0 || clip_eps >= 1.0) throw ConfigError("clip_eps must be in (0,1)");
  if (discount <= 0.0 || discount > 1.0) throw ConfigError("discount must be in (0,1]");
  if (ppo_epochs < 1) throw ConfigError("ppo_epochs must be >= 1");
  if (online_lr <= 0.0) throw ConfigError("online_lr must be positive");
  if (buffer_size < 1) throw ConfigError("buffer_size must be >= 1");
  if (eval_epochs < 1) throw ConfigError("eval_epochs must be >= 1");
}

double RolloutBuffer::mean_return() const {
  if (episode_returns_raw.empty()) return 0.0;
  double s = 0.0;
  for (double r : episode_returns_raw) s += r;
  return s / static_cast<double>(episode_returns_raw.size());
}

double RolloutBuffer::success_rate() const {
  if (episode_wins.empty()) return 0.0;
  double s = 0.0;
  for (uint8_t w : episode_wins) s += w ? 1.0 : 0.0;
  return s / static_cast<double>(episode_wins.size());
}

RolloutBuffer collect(GridEnv& env, const ModelParams& params, int n_episodes,
                      Rng& rng, const PPOConfig& cfg, int64_t step_budget_remaining,
                      ActMode mode) {
  const ModelConfig& mc = params.cfg;
  const TaskSpec& spec = env.spec();
  if (spec.state_dim > mc.universal_state_dim || spec.obs_dim > mc.universal_obs_dim ||
      spec.n_actions > mc.universal_action_dim || spec.n_agents > mc.max_agents) {
    throw ConfigError("scenario " + spec.scenario_id + " does not fit the model's universal dims");
  }

  NoGradGuard ng;
  RolloutBuffer buf;
  std::vector<RolloutSession> sessions;
  sessions.reserve(static_cast<size_t>(spec.n_agents));
  for (int i = 0; i < spec.n_agents; ++i) sessions.emplace_back(params);

  for (int ep = 0; ep < n_episodes; ++ep) {
    if (step_budget_remaining >= 0 && buf.env_steps >= step_budget_remaining) break;

    StepOutcome view = env.reset(rng.next_u64());
    std::vector<RolloutTraj> trajs(static_cast<size_t>(spec.n_agents));
    for (int i = 0; i < spec.n_agents; ++i) {
      trajs[static_cast<size_t>(i)].agent_id = i;
      sessions[static_cast<size_t>(i)].reset();
    }
    double episode_return_raw = 0.0;
    double cum_scaled = 0.0;
    bool won = false;
    int t = 0;

    while (!env.done()) {
      if (t > 0 && t % mc.context_length == 0) {
        for (auto& s : sessions) s.reset();
      }
      std::vector<int> joint(static_cast<size_t>(spec.n_agents));
      std::vector<RolloutStep> pending(static_cast<size_t>(spec.n_agents));
      for (int i = 0; i < spec.n_agents; ++i) {
        RolloutStep rs;
        rs.core.state = pad_features(view.state, mc.universal_state_dim, spec.scenario_id);
        rs.core.obs = pad_features(view.obs[static_cast<size_t>(i)], mc.universal_obs_dim,
                                   spec.scenario_id);
        rs.core.avail = view.avail[static_cast<size_t>(i)];
        rs.core.avail.resize(static_cast<size_t>(mc.universal_action_dim), 0);
        rs.core.return_to_go = std::max(cfg.rtg_prompt - cum_scaled, 0.0);

        const std::vector<double> tok = build_token(mc, rs.core.state, rs.core.obs, i,
                                                    rs.core.return_to_go);
        RolloutSession::StepOut so =
            sessions[static_cast<size_t>(i)].step(tok, t, rs.core.avail);
        const int a = act_from_logits(so.logits, rs.core.avail, mode, rng);
        rs.core.action = a;
        rs.logp_behavior = masked_log_prob(so.logits, rs.core.avail, a);
        rs.value = so.value;
        joint[static_cast<size_t>(i)] = a;
        pending[static_cast<size_t>(i)] = std::move(rs);
      }

      view = env.step(joint);
      const double r_scaled = scale_reward(view.reward, spec);
      episode_return_raw += view.reward;
      cum_scaled += r_scaled;
      won = view.won;
      for (int i = 0; i < spec.n_agents; ++i) {
        pending[static_cast<size_t>(i)].core.reward = r_scaled;
        pending[static_cast<size_t>(i)].reward_raw = view.reward;
        pending[static_cast<size_t>(i)].core.done = view.done;
        trajs[static_cast<size_t>(i)].steps.push_back(std::move(pending[static_cast<size_t>(i)]));
      }
      ++t;
      ++buf.env_steps;
    }

    for (auto& tr : trajs) buf.trajs.push_back(std::move(tr));
    buf.episode_returns_raw.push_back(episode_return_raw);
    buf.episode_wins.push_back(won ? 1 : 0);
    ++buf.n_episodes;
  }
  return buf;
}

void compute_advantage(RolloutBuffer& buffer, const PPOConfig& cfg) {
  for (auto& tr : buffer.trajs) {
    if (cfg.use_gae) {
      double gae = 0.0;
      for (int t = static_cast<int>(tr.steps.size()) - 1; t >= 0; --t) {
        auto& s = tr.steps[static_cast<size_t>(t)];
        const double v_next =
            t + 1 < static_cast<int>(tr.steps.size()) ? tr.steps[static_cast<size_t>(t) + 1].value : 0.0;
        const double delta = s.core.reward + cfg.discount * v_next - s.value;
        gae = delta + cfg.discount * cfg.gae_lambda * gae;
        s.adv_raw = gae;
        s.ret = gae + s.value;
      }
    } else {
      double acc = 0.0;
      for (int t = static_cast<int>(tr.steps.size()) - 1; t >= 0; --t) {
        auto& s = tr.steps[static_cast<size_t>(t)];
        acc = s.core.reward + cfg.discount * acc;
        s.ret = acc;
        s.adv_raw = s.ret - s.value;
      }
    }
  }

  // batch normalization to zero mean / unit variance
  int64_t n = 0;
  double mean = 0.0;
  for (const auto& tr : buffer.trajs)
    for (const auto& s : tr.steps) {
      mean += s.adv_raw;
      ++n;
    }
  if (n == 0) return;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (const auto& tr : buffer.trajs)
    for (const auto& s : tr.steps) var += (s.adv_raw - mean) * (s.adv_raw - mean);
  var /= static_cast<double>(n);
  const double denom = std::sqrt(var) + 1e-8;
  for (auto& tr : buffer.trajs)
    for (auto& s : tr.steps) {
      s.adv = (s.adv_raw - mean) / denom;
      if (!std::isfinite(s.adv) || !std::isfinite(s.ret)) {
        throw NumericalError("non-finite advantage or return in buffer");
      }
    }
}

namespace {

struct OnlineWindow {
  int traj = 0;
  int start = 0;
  int len = 0;
};

struct OnlineBatch {
  ContextBatch base;
  std::vector<double> logp_old;  // [batch * C]
  std::vector<double> adv;
  std::vector<double> ret;
};

OnlineBatch build_online_batch(const RolloutBuffer& buffer, const ModelConfig& cfg,
                               const std::vector<OnlineWindow>& windows) {
  OnlineBatch ob;
  ContextBatch& b = ob.base;
  b.batch = static_cast<int>(windows.size());
  b.context = 1;
  for (const OnlineWindow& w : windows) b.context = std::max(b.context, w.len);
  b.context = std::min(b.context, cfg.context_length);
  b.token_dim = cfg.token_dim();
  b.action_dim = cfg.universal_action_dim;
  const size_t bc = static_cast<size_t>(b.batch) * b.context;
  b.tokens.assign(bc * b.token_dim, 0.0);
  b.timesteps.assign(bc, 0);
  b.avail.assign(bc * b.action_dim, 1);
  b.valid.assign(bc, 0);
  b.actions.assign(bc, 0);
  b.returns.assign(bc, 0.0);
  ob.logp_old.assign(bc, 0.0);
  ob.adv.assign(bc, 0.0);
  ob.ret.assign(bc, 0.0);

  for (int w = 0; w < b.batch; ++w) {
    const OnlineWindow& win = windows[static_cast<size_t>(w)];
    const RolloutTraj& tr = buffer.trajs[static_cast<size_t>(win.traj)];
    for (int p = 0; p < win.len; ++p) {
      const RolloutStep& s = tr.steps[static_cast<size_t>(win.start + p)];
      const size_t pos = static_cast<size_t>(w) * b.context + p;
      const std::vector<double> tok =
          build_token(cfg, s.core.state, s.core.obs, tr.agent_id, s.core.return_to_go);
      std::copy(tok.begin(), tok.end(), b.tokens.begin() + pos * b.token_dim);
      b.timesteps[pos] = win.start + p;
      std::copy(s.core.avail.begin(), s.core.avail.end(), b.avail.begin() + pos * b.action_dim);
      b.valid[pos] = 1;
      b.actions[pos] = s.core.action;
      b.returns[pos] = s.ret;
      ob.logp_old[pos] = s.logp_behavior;
      ob.adv[pos] = s.adv;
      ob.ret[pos] = s.ret;
    }
  }
  return ob;
}

std::vector<OnlineWindow> chunk_buffer(const RolloutBuffer& buffer, int context_length) {
  std::vector<OnlineWindow> out;
  for (size_t i = 0; i < buffer.trajs.size(); ++i) {
    const int n = static_cast<int>(buffer.trajs[i].steps.size());
    for (int w = 0; w < n; w += context_length) {
      OnlineWindow win;
      win.traj = static_cast<int>(i);
      win.start = w;
      win.len = std::min(context_length, n - w);
      out.push_back(win);
    }
  }
  return out;
}

Tensor avail_mask_tensor(const ContextBatch& batch, int row) {
  Tensor m = Tensor::zeros({batch.context, batch.action_dim});
  for (int t = 0; t < batch.context; ++t)
    for (int a = 0; a < batch.action_dim; ++a)
      if (!batch.avail[(static_cast<size_t>(row) * batch.context + t) * batch.action_dim + a])
        m.data()[static_cast<size_t>(t) * batch.action_dim + a] = kMaskSentinel;
  return m;
}

}  // namespace

Tensor clipped_surrogate(const Tensor& ratio, const Tensor& adv, double clip_eps) {
  Tensor unclipped = mul(ratio, adv);
  Tensor clipped = mul(clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv);
  return minimum(unclipped, clipped);
}

namespace {

struct MinibatchTerms {
  Tensor loss;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double weight_sum = 0.0;
  int64_t n_valid = 0;
};

MinibatchTerms minibatch_loss(const RolloutBuffer& buffer, const ModelParams& params,
                              const PPOConfig& cfg,
                              const std::vector<OnlineWindow>& part) {
  MinibatchTerms out;
  OnlineBatch ob = build_online_batch(buffer, params.cfg, part);
  const ContextBatch& batch = ob.base;
  for (uint8_t v : batch.valid) out.n_valid += v ? 1 : 0;
  if (out.n_valid == 0) return out;

  ForwardResult fr = forward(batch, params);

  Tensor obj_total, vloss_total, ent_total;
  for (int w = 0; w < batch.batch; ++w) {
    std::vector<int> targets(batch.actions.begin() + static_cast<size_t>(w) * batch.context,
                             batch.actions.begin() + static_cast<size_t>(w + 1) * batch.context);
    Tensor mask = avail_mask_tensor(batch, w);
    Tensor lp = gather_log_probs(fr.logits[static_cast<size_t>(w)], mask, targets);

    Tensor valid_ind = Tensor::zeros({batch.context});
    Tensor adv_c = Tensor::zeros({batch.context});
    Tensor ret_c = Tensor::zeros({batch.context});
    Tensor lp_old_c = Tensor::zeros({batch.context});
    for (int t = 0; t < batch.context; ++t) {
      const size_t pos = static_cast<size_t>(w) * batch.context + t;
      valid_ind.data()[static_cast<size_t>(t)] = batch.valid[pos] ? 1.0 : 0.0;
      adv_c.data()[static_cast<size_t>(t)] = ob.adv[pos];
      ret_c.data()[static_cast<size_t>(t)] = ob.ret[pos];
      lp_old_c.data()[static_cast<size_t>(t)] = ob.logp_old[pos];
    }

    Tensor obj;
    if (cfg.reinforce) {
      // plain return-weighted log-prob objective
      obj = mul(lp, ret_c);
    } else {
      Tensor ratio = exp(sub(lp, lp_old_c));
      for (int t = 0; t < batch.context; ++t) {
        const size_t pos = static_cast<size_t>(w) * batch.context + t;
        if (!batch.valid[pos]) continue;
        if (!std::isfinite(ratio.at(t))) {
          throw NumericalError("non-finite importance weight: logp_new=" +
                               std::to_string(lp.at(t)) + " logp_old=" +
                               std::to_string(ob.logp_old[pos]));
        }
        out.weight_sum += ratio.at(t);
      }
      obj = clipped_surrogate(ratio, adv_c, cfg.clip_eps);
    }
    Tensor obj_masked = sum(mul(obj, valid_ind));
    obj_total = w == 0 ? obj_masked : add(obj_total, obj_masked);

    Tensor diff = sub(fr.values[static_cast<size_t>(w)], ret_c);
    Tensor vl = sum(mul(mul(diff, diff), valid_ind));
    vloss_total = w == 0 ? vl : add(vloss_total, vl);

    Tensor ent = sum(mul(masked_entropy(fr.logits[static_cast<size_t>(w)], mask), valid_ind));
    ent_total = w == 0 ? ent : add(ent_total, ent);
  }

  const double inv_n = 1.0 / static_cast<double>(out.n_valid);
  Tensor policy_loss = scale(obj_total, -inv_n);
  Tensor vloss = scale(vloss_total, 0.5 * inv_n);
  Tensor entropy = scale(ent_total, inv_n);

  Tensor loss = policy_loss;
  if (!cfg.reinforce) loss = add(loss, scale(vloss, cfg.value_coef));
  if (cfg.entropy_coef != 0.0) loss = sub(loss, scale(entropy, cfg.entropy_coef));

  out.loss = loss;
  out.policy_loss = policy_loss.item();
  out.value_loss = vloss.item();
  out.entropy = entropy.item();
  return out;
}

}  // namespace

Tensor ppo_batch_loss(const RolloutBuffer& buffer, const ModelParams& params,
                      const PPOConfig& cfg, UpdateStats* stats) {
  const std::vector<OnlineWindow> windows = chunk_buffer(buffer, params.cfg.context_length);
  MinibatchTerms terms = minibatch_loss(buffer, params, cfg, windows);
  if (stats) {
    stats->policy_loss = terms.policy_loss;
    stats->value_loss = terms.value_loss;
    stats->entropy = terms.entropy;
    stats->mean_weight =
        terms.n_valid > 0 ? terms.weight_sum / static_cast<double>(terms.n_valid) : 0.0;
    stats->minibatches = 1;
  }
  return terms.loss;
}

UpdateStats ppo_update(const RolloutBuffer& buffer, ModelParams& params, Adam& opt,
                       const PPOConfig& cfg, Rng& rng) {
  UpdateStats stats;
  std::vector<OnlineWindow> windows = chunk_buffer(buffer, params.cfg.context_length);
  if (windows.empty()) return stats;

  double policy_sum = 0.0, value_sum = 0.0, entropy_sum = 0.0, w_sum = 0.0;
  int64_t pos_count = 0;

  for (int epoch = 0; epoch < (cfg.reinforce ? 1 : cfg.ppo_epochs); ++epoch) {
    rng.shuffle(windows);
    for (size_t at = 0; at < windows.size(); at += static_cast<size_t>(cfg.mini_batch_size)) {
      const std::vector<OnlineWindow> part(
          windows.begin() + static_cast<long>(at),
          windows.begin() + static_cast<long>(std::min(
                                at + static_cast<size_t>(cfg.mini_batch_size), windows.size())));
      MinibatchTerms terms = minibatch_loss(buffer, params, cfg, part);
      if (terms.n_valid == 0) continue;
      if (!std::isfinite(terms.loss.item())) {
        throw NumericalError("non-finite PPO loss");
      }
      opt.zero_grad();
      backward(terms.loss);
      clip_grad_norm(params.parameters(), cfg.grad_clip);
      opt.step();

      policy_sum += terms.policy_loss;
      value_sum += terms.value_loss;
      entropy_sum += terms.entropy;
      w_sum += terms.weight_sum;
      pos_count += terms.n_valid;
      ++stats.minibatches;
    }
  }
  if (stats.minibatches > 0) {
    stats.policy_loss = policy_sum / stats.minibatches;
    stats.value_loss = value_sum / stats.minibatches;
    stats.entropy = entropy_sum / stats.minibatches;
    stats.mean_weight = pos_count > 0 ? w_sum / static_cast<double>(pos_count) : 0.0;
  }
  if (!params.all_finite()) throw NumericalError("non-finite parameter after ppo_update");
  return stats;
}

EvalResult evaluate(GridEnv& env, const ModelParams& params, int episodes,
                    uint64_t seed, const PPOConfig& cfg) {
  if (episodes < 1) throw ContractError("evaluate: episodes must be >= 1");
  Rng rng(derive_seed(seed, "eval"));
  RolloutBuffer buf = collect(env, params, episodes, rng, cfg, -1, ActMode::kGreedy);
  EvalResult r;
  r.mean_return = buf.mean_return();
  r.success_rate = buf.success_rate();
  return r;
}

RandomBaseline random_policy_baseline(GridEnv& env, int episodes, uint64_t seed) {
  Rng rng(derive_seed(seed, "random-baseline"));
  std::vector<double> returns;
  returns.reserve(static_cast<size_t>(episodes));
  for (int ep = 0; ep < episodes; ++ep) {
    env.reset(rng.next_u64());
    double ret = 0.0;
    while (!env.done()) {
      std::vector<int> joint(static_cast<size_t>(env.spec().n_agents));
      for (int i = 0; i < env.spec().n_agents; ++i) {
        const auto avail = env.availability(i);
        int n_legal = 0;
        for (uint8_t a : avail) n_legal += a ? 1 : 0;
        int pick = rng.uniform_int(n_legal);
        for (size_t a = 0; a < avail.size(); ++a) {
          if (!avail[a]) continue;
          if (pick-- == 0) {
            joint[static_cast<size_t>(i)] = static_cast<int>(a);
            break;
          }
        }
      }
      ret += env.step(joint).reward;
    }
    returns.push_back(ret);
  }
  RandomBaseline b;
  for (double r : returns) b.mean_return += r;
  b.mean_return /= static_cast<double>(returns.size());
  double var = 0.0;
  for (double r : returns) var += (r - b.mean_return) * (r - b.mean_return);
  var /= static_cast<double>(returns.size());
  b.std_return = std::sqrt(var);
  b.stderr_return = b.std_return / std::sqrt(static_cast<double>(returns.size()));
  return b;
}

FinetuneReport finetune(const ScenarioDef& scenario, ModelParams& params,
                        const PPOConfig& cfg, const IterSink& sink) {
  cfg.validate();
  GridEnv env(scenario);
  GridEnv eval_env(scenario);
  Adam opt(params.parameters(), cfg.online_lr);
  Rng rollout_rng(derive_seed(cfg.seed, "rollout"));
  Rng update_rng(derive_seed(cfg.seed, "update"));

  FinetuneReport report;
  for (double thr : cfg.return_thresholds) report.steps_to_threshold[thr] = -1;

  auto record_eval = [&](IterStats& is, int64_t steps) {
    EvalResult ev = evaluate(eval_env, params, cfg.eval_epochs,
                             derive_seed(cfg.seed, "eval-iter-" + std::to_string(is.iteration)),
                             cfg);
    is.eval_return = ev.mean_return;
    is.eval_success = ev.success_rate;
    for (auto& [thr, at] : report.steps_to_threshold) {
      if (at < 0 && ev.mean_return >= thr) at = steps;
    }
    return ev;
  };

  // iteration 0: evaluation before any training
  {
    IterStats is;
    is.iteration = 0;
    is.env_steps = 0;
    report.final_eval = record_eval(is, 0);
    report.iterations.push_back(is);
    if (sink) sink(is);
  }

  int64_t steps_used = 0;
  int iteration = 1;
  while (steps_used < cfg.total_env_steps) {
    RolloutBuffer buf =
        collect(env, params, cfg.buffer_size, rollout_rng, cfg, cfg.total_env_steps - steps_used);
    steps_used += buf.env_steps;

    IterStats is;
    is.iteration = iteration;
    is.env_steps = steps_used;
    is.collect_return = buf.mean_return();
    is.collect_success = buf.success_rate();

    if (buf.n_episodes == cfg.buffer_size) {
      compute_advantage(buf, cfg);
      is.update = ppo_update(buf, params, opt, cfg, update_rng);
      is.updated = true;
    } else {
      report.insufficient_budget = true;
    }

    report.final_eval = record_eval(is, steps_used);
    report.iterations.push_back(is);
    if (sink) sink(is);
    ++iteration;
    if (buf.n_episodes == 0) break;  // budget exhausted before a single episode
  }
  return report;
}

}  // namespace madt
