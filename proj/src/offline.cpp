#include "madt/offline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "madt/errors.hpp"

namespace madt {

std::vector<Window> chunk(const UnifiedTrajectory& trajectory, int context_length) {
  if (context_length < 1) throw ContractError("context_length must be >= 1");
  std::vector<Window> out;
  const int n = static_cast<int>(trajectory.steps.size());
  int seg_start = 0;
  for (int t = 0; t < n; ++t) {
    const bool boundary = trajectory.steps[static_cast<size_t>(t)].done || t == n - 1;
    if (!boundary) continue;
    // windows tile [seg_start, t]
    for (int w = seg_start; w <= t; w += context_length) {
      Window win;
      win.start = w;
      win.len = std::min(context_length, t - w + 1);
      out.push_back(win);
    }
    seg_start = t + 1;
  }
  return out;
}

std::vector<Window> chunk_dataset(const UnifiedDataset& ds, int context_length) {
  std::vector<Window> out;
  for (size_t i = 0; i < ds.trajectories.size(); ++i) {
    for (Window w : chunk(ds.trajectories[i], context_length)) {
      w.traj = static_cast<int>(i);
      out.push_back(w);
    }
  }
  return out;
}

std::vector<double> build_token(const ModelConfig& cfg, const std::vector<double>& state,
                                const std::vector<double>& obs, int agent_id,
                                double return_to_go) {
  if (static_cast<int>(state.size()) != cfg.universal_state_dim ||
      static_cast<int>(obs.size()) != cfg.universal_obs_dim) {
    throw DimensionError("token build: state/obs dims " +
                         std::to_string(state.size()) + "/" + std::to_string(obs.size()) +
                         " vs universal " + std::to_string(cfg.universal_state_dim) + "/" +
                         std::to_string(cfg.universal_obs_dim));
  }
  if (agent_id < 0 || agent_id >= cfg.max_agents) {
    throw ContractError("agent id " + std::to_string(agent_id) + " outside max_agents " +
                        std::to_string(cfg.max_agents));
  }
  std::vector<double> tok;
  tok.reserve(static_cast<size_t>(cfg.token_dim()));
  tok.insert(tok.end(), state.begin(), state.end());
  tok.insert(tok.end(), obs.begin(), obs.end());
  for (int i = 0; i < cfg.max_agents; ++i) tok.push_back(i == agent_id ? 1.0 : 0.0);
  if (cfg.use_return_token) tok.push_back(return_to_go);
  return tok;
}

ContextBatch build_batch(const UnifiedDataset& ds, const ModelConfig& cfg,
                         const std::vector<Window>& windows) {
  ContextBatch b;
  b.batch = static_cast<int>(windows.size());
  // trim to the longest window in this batch; causality keeps the
  // per-position math identical to a full-length context
  b.context = 1;
  for (const Window& w : windows) b.context = std::max(b.context, w.len);
  b.context = std::min(b.context, cfg.context_length);
  b.token_dim = cfg.token_dim();
  b.action_dim = cfg.universal_action_dim;
  const size_t bc = static_cast<size_t>(b.batch) * b.context;
  b.tokens.assign(bc * b.token_dim, 0.0);
  b.timesteps.assign(bc, 0);
  b.avail.assign(bc * b.action_dim, 1);  // padding rows stay all-legal
  b.valid.assign(bc, 0);
  b.actions.assign(bc, 0);
  b.returns.assign(bc, 0.0);

  for (int w = 0; w < b.batch; ++w) {
    const Window& win = windows[static_cast<size_t>(w)];
    const UnifiedTrajectory& tr = ds.trajectories[static_cast<size_t>(win.traj)];
    for (int p = 0; p < win.len; ++p) {
      const UnifiedStep& step = tr.steps[static_cast<size_t>(win.start + p)];
      const size_t pos = static_cast<size_t>(w) * b.context + p;
      if (static_cast<int>(step.avail.size()) != b.action_dim) {
        throw DataError("trajectory " + std::to_string(win.traj) + " timestep " +
                        std::to_string(win.start + p) + ": mask width " +
                        std::to_string(step.avail.size()) + " != universal " +
                        std::to_string(b.action_dim));
      }
      if (step.action < 0 || step.action >= b.action_dim ||
          !step.avail[static_cast<size_t>(step.action)]) {
        throw DataError("trajectory " + std::to_string(win.traj) + " timestep " +
                        std::to_string(win.start + p) + ": action " +
                        std::to_string(step.action) + " unavailable");
      }
      const std::vector<double> tok =
          build_token(cfg, step.state, step.obs, tr.agent_id, step.return_to_go);
      std::copy(tok.begin(), tok.end(), b.tokens.begin() + pos * b.token_dim);
      b.timesteps[pos] = win.start + p;
      std::copy(step.avail.begin(), step.avail.end(),
                b.avail.begin() + pos * b.action_dim);
      b.valid[pos] = 1;
      b.actions[pos] = step.action;
      b.returns[pos] = step.return_to_go;
    }
  }
  return b;
}

namespace {

Tensor avail_mask_tensor(const ContextBatch& batch, int row) {
  Tensor m = Tensor::zeros({batch.context, batch.action_dim});
  for (int t = 0; t < batch.context; ++t)
    for (int a = 0; a < batch.action_dim; ++a)
      if (!batch.avail[(static_cast<size_t>(row) * batch.context + t) * batch.action_dim + a])
        m.data()[static_cast<size_t>(t) * batch.action_dim + a] = kMaskSentinel;
  return m;
}

Tensor valid_indicator(const ContextBatch& batch, int row) {
  Tensor v = Tensor::zeros({batch.context});
  for (int t = 0; t < batch.context; ++t)
    v.data()[static_cast<size_t>(t)] =
        batch.valid[static_cast<size_t>(row) * batch.context + t] ? 1.0 : 0.0;
  return v;
}

int64_t count_valid(const ContextBatch& batch) {
  int64_t n = 0;
  for (uint8_t v : batch.valid) n += v ? 1 : 0;
  return n;
}

}  // namespace

Tensor ce_loss(const std::vector<Tensor>& logits, const ContextBatch& batch) {
  if (static_cast<int>(logits.size()) != batch.batch) {
    throw DimensionError("ce_loss: " + std::to_string(logits.size()) +
                         " logit rows for batch " + std::to_string(batch.batch));
  }
  const int64_t n_valid = count_valid(batch);
  if (n_valid == 0) throw ContractError("ce_loss: batch has no valid positions");

  Tensor total;
  for (int w = 0; w < batch.batch; ++w) {
    std::vector<int> targets(batch.actions.begin() + static_cast<size_t>(w) * batch.context,
                             batch.actions.begin() + static_cast<size_t>(w + 1) * batch.context);
    Tensor lp = gather_log_probs(logits[static_cast<size_t>(w)],
                                 avail_mask_tensor(batch, w), targets);
    Tensor s = sum(mul(lp, valid_indicator(batch, w)));
    total = w == 0 ? s : add(total, s);
  }
  return scale(total, -1.0 / static_cast<double>(n_valid));
}

Tensor value_loss(const std::vector<Tensor>& values, const ContextBatch& batch) {
  if (static_cast<int>(values.size()) != batch.batch) {
    throw DimensionError("value_loss: " + std::to_string(values.size()) +
                         " value rows for batch " + std::to_string(batch.batch));
  }
  const int64_t n_valid = count_valid(batch);
  if (n_valid == 0) throw ContractError("value_loss: batch has no valid positions");

  Tensor total;
  for (int w = 0; w < batch.batch; ++w) {
    Tensor target = Tensor::from_data(
        {batch.context},
        std::vector<double>(batch.returns.begin() + static_cast<size_t>(w) * batch.context,
                            batch.returns.begin() + static_cast<size_t>(w + 1) * batch.context));
    Tensor diff = sub(values[static_cast<size_t>(w)], target);
    Tensor s = sum(mul(mul(diff, diff), valid_indicator(batch, w)));
    total = w == 0 ? s : add(total, s);
  }
  return scale(total, 0.5 / static_cast<double>(n_valid));
}

double action_agreement(const UnifiedDataset& ds, const ModelParams& params) {
  NoGradGuard ng;
  const std::vector<Window> windows = chunk_dataset(ds, params.cfg.context_length);
  if (windows.empty()) return 0.0;
  int64_t hits = 0, n = 0;
  // modest batches keep the peak footprint low
  const size_t kBatch = 64;
  Rng dummy(1);
  for (size_t at = 0; at < windows.size(); at += kBatch) {
    const std::vector<Window> part(windows.begin() + static_cast<long>(at),
                                   windows.begin() + static_cast<long>(std::min(at + kBatch, windows.size())));
    ContextBatch batch = build_batch(ds, params.cfg, part);
    ForwardResult fr = forward(batch, params);
    for (int w = 0; w < batch.batch; ++w) {
      for (int t = 0; t < batch.context; ++t) {
        const size_t pos = static_cast<size_t>(w) * batch.context + t;
        if (!batch.valid[pos]) continue;
        std::vector<double> row(batch.action_dim);
        std::vector<uint8_t> avail(batch.avail.begin() + pos * batch.action_dim,
                                   batch.avail.begin() + (pos + 1) * batch.action_dim);
        for (int a = 0; a < batch.action_dim; ++a)
          row[static_cast<size_t>(a)] = fr.logits[static_cast<size_t>(w)].at(t, a);
        const int pick = act_from_logits(row, avail, ActMode::kGreedy, dummy);
        hits += pick == batch.actions[pos] ? 1 : 0;
        ++n;
      }
    }
  }
  return n > 0 ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
}

TrainReport pretrain(const UnifiedDataset& ds, ModelParams& params,
                     const OfflineConfig& cfg, const EpochSink& sink) {
  if (cfg.learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  if (cfg.mini_batch_size < 1) throw ConfigError("mini_batch_size must be >= 1");
  if (ds.trajectories.empty()) throw DataError("no trajectories");

  const auto t_begin = std::chrono::steady_clock::now();
  std::vector<Window> windows = chunk_dataset(ds, cfg.context_length);
  Rng shuffle_rng(derive_seed(cfg.seed, "offline-shuffle"));
  Adam opt(params.parameters(), cfg.learning_rate);

  TrainReport report;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(windows);
    double ce_sum = 0.0;
    int64_t valid_total = 0, hit_total = 0;
    for (size_t at = 0; at < windows.size(); at += static_cast<size_t>(cfg.mini_batch_size)) {
      const std::vector<Window> part(
          windows.begin() + static_cast<long>(at),
          windows.begin() + static_cast<long>(std::min(
                                at + static_cast<size_t>(cfg.mini_batch_size), windows.size())));
      ContextBatch batch = build_batch(ds, params.cfg, part);
      ForwardResult fr = forward(batch, params);
      Tensor loss = ce_loss(fr.logits, batch);
      const double ce_val = loss.item();
      if (cfg.offline_train_critic) {
        loss = add(loss, scale(value_loss(fr.values, batch), cfg.value_coef));
      }
      if (!std::isfinite(loss.item())) {
        std::string dump = "NaN loss at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(at / cfg.mini_batch_size) + "; windows:";
        for (const Window& w : part)
          dump += " (traj " + std::to_string(w.traj) + " start " + std::to_string(w.start) + ")";
        throw NumericalError(dump);
      }
      opt.zero_grad();
      backward(loss);
      opt.step();

      // training-time stats from the pre-update logits
      const int64_t n_valid_batch = [&] {
        int64_t n = 0;
        for (uint8_t v : batch.valid) n += v ? 1 : 0;
        return n;
      }();
      ce_sum += ce_val * static_cast<double>(n_valid_batch);
      valid_total += n_valid_batch;
      Rng dummy(1);
      for (int w = 0; w < batch.batch; ++w)
        for (int t = 0; t < batch.context; ++t) {
          const size_t pos = static_cast<size_t>(w) * batch.context + t;
          if (!batch.valid[pos]) continue;
          std::vector<double> row(batch.action_dim);
          std::vector<uint8_t> avail(batch.avail.begin() + pos * batch.action_dim,
                                     batch.avail.begin() + (pos + 1) * batch.action_dim);
          for (int a = 0; a < batch.action_dim; ++a)
            row[static_cast<size_t>(a)] = fr.logits[static_cast<size_t>(w)].at(t, a);
          hit_total +=
              act_from_logits(row, avail, ActMode::kGreedy, dummy) == batch.actions[pos] ? 1 : 0;
        }
    }
    EpochStats es;
    es.epoch = epoch;
    es.ce_loss = valid_total > 0 ? ce_sum / static_cast<double>(valid_total) : 0.0;
    es.accuracy = valid_total > 0 ? static_cast<double>(hit_total) / static_cast<double>(valid_total) : 0.0;
    report.epochs.push_back(es);
    if (sink) sink(es);
    if (!params.all_finite()) {
      throw NumericalError("non-finite parameter after epoch " + std::to_string(epoch));
    }
  }
  report.final_accuracy = action_agreement(ds, params);
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  return report;
}

}  // namespace madt
