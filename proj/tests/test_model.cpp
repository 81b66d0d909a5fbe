#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "madt/errors.hpp"
#include "madt/model.hpp"
#include "madt/offline.hpp"

using namespace madt;

namespace {

ModelConfig tiny_config(int n_layer = 1, int n_head = 1, int n_embd = 4, int C = 2) {
  ModelConfig cfg;
  cfg.n_layer = n_layer;
  cfg.n_head = n_head;
  cfg.n_embd = n_embd;
  cfg.context_length = C;
  cfg.max_timestep = 64;
  cfg.universal_state_dim = 3;
  cfg.universal_obs_dim = 4;
  cfg.universal_action_dim = 4;
  cfg.max_agents = 2;
  return cfg;
}

ContextBatch random_batch(const ModelConfig& cfg, Rng& rng, int batch = 2) {
  ContextBatch b;
  b.batch = batch;
  b.context = cfg.context_length;
  b.token_dim = cfg.token_dim();
  b.action_dim = cfg.universal_action_dim;
  const size_t bc = static_cast<size_t>(batch) * b.context;
  b.tokens.resize(bc * b.token_dim);
  for (double& v : b.tokens) v = rng.uniform() * 2.0 - 1.0;
  b.timesteps.assign(bc, 0);
  for (size_t i = 0; i < bc; ++i) b.timesteps[i] = static_cast<int>(i % b.context);
  b.avail.assign(bc * b.action_dim, 0);
  for (size_t i = 0; i < bc; ++i) {
    const int keep = rng.uniform_int(b.action_dim);
    for (int a = 0; a < b.action_dim; ++a) {
      b.avail[i * b.action_dim + a] = (a == keep || rng.uniform() < 0.7) ? 1 : 0;
    }
  }
  b.valid.assign(bc, 1);
  b.actions.assign(bc, 0);
  b.returns.assign(bc, 0.0);
  return b;
}

// straight-line reimplementation of the whole network for the oracle test:
// plain loops, no Tensor machinery
std::vector<std::vector<double>> straight_line_forward(
    const ContextBatch& b, const ModelParams& p, int row) {
  const ModelConfig& cfg = p.cfg;
  const int C = b.context, td = b.token_dim, d = cfg.n_embd;
  const int dk = d / cfg.n_head;

  auto norm_affine = [&](std::vector<double>& v, const Tensor& g, const Tensor& bb) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    const double is = 1.0 / std::sqrt(var + 1e-5);
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i)
      out[i] = (v[i] - mean) * is * g.data()[i] + bb.data()[i];
    return out;
  };

  std::vector<std::vector<double>> h(static_cast<size_t>(C), std::vector<double>(static_cast<size_t>(d), 0.0));
  for (int t = 0; t < C; ++t) {
    for (int j = 0; j < d; ++j) {
      double s = p.embed_b.data()[static_cast<size_t>(j)];
      for (int k = 0; k < td; ++k)
        s += b.tokens[(static_cast<size_t>(row) * C + t) * td + k] *
             p.embed_w.data()[static_cast<size_t>(k) * d + j];
      h[static_cast<size_t>(t)][static_cast<size_t>(j)] = s;
    }
    const int pos = b.timesteps[static_cast<size_t>(row) * C + t];
    for (int i = 0; 2 * i < d; ++i) {
      const double angle = pos / std::pow(10000.0, (2.0 * i) / d);
      h[static_cast<size_t>(t)][static_cast<size_t>(2 * i)] += std::sin(angle);
      if (2 * i + 1 < d) h[static_cast<size_t>(t)][static_cast<size_t>(2 * i + 1)] += std::cos(angle);
    }
  }

  for (const auto& blk : p.blocks) {
    std::vector<std::vector<double>> normed(static_cast<size_t>(C));
    for (int t = 0; t < C; ++t)
      normed[static_cast<size_t>(t)] = norm_affine(h[static_cast<size_t>(t)], blk.ln1_g, blk.ln1_b);
    auto project = [&](const Tensor& w, const std::vector<double>& v) {
      std::vector<double> out(static_cast<size_t>(d), 0.0);
      for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k)
          out[static_cast<size_t>(j)] += v[static_cast<size_t>(k)] * w.data()[static_cast<size_t>(k) * d + j];
      return out;
    };
    std::vector<std::vector<double>> q(static_cast<size_t>(C)), kk(static_cast<size_t>(C)), vv(static_cast<size_t>(C));
    for (int t = 0; t < C; ++t) {
      q[static_cast<size_t>(t)] = project(blk.wq, normed[static_cast<size_t>(t)]);
      kk[static_cast<size_t>(t)] = project(blk.wk, normed[static_cast<size_t>(t)]);
      vv[static_cast<size_t>(t)] = project(blk.wv, normed[static_cast<size_t>(t)]);
    }
    for (int t = 0; t < C; ++t) {
      std::vector<double> attn(static_cast<size_t>(d), 0.0);
      for (int head = 0; head < cfg.n_head; ++head) {
        const int off = head * dk;
        std::vector<double> scores(static_cast<size_t>(t) + 1, 0.0);
        for (int j = 0; j <= t; ++j) {
          for (int e = 0; e < dk; ++e)
            scores[static_cast<size_t>(j)] += q[static_cast<size_t>(t)][static_cast<size_t>(off + e)] *
                                              kk[static_cast<size_t>(j)][static_cast<size_t>(off + e)];
          scores[static_cast<size_t>(j)] /= std::sqrt(static_cast<double>(dk));
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double z = 0.0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          z += s;
        }
        for (double& s : scores) s /= z;
        for (int j = 0; j <= t; ++j)
          for (int e = 0; e < dk; ++e)
            attn[static_cast<size_t>(off + e)] += scores[static_cast<size_t>(j)] *
                                                  vv[static_cast<size_t>(j)][static_cast<size_t>(off + e)];
      }
      const std::vector<double> proj = project(blk.wo, attn);
      for (int j = 0; j < d; ++j) h[static_cast<size_t>(t)][static_cast<size_t>(j)] += proj[static_cast<size_t>(j)];
    }
    for (int t = 0; t < C; ++t) {
      const std::vector<double> n2 = norm_affine(h[static_cast<size_t>(t)], blk.ln2_g, blk.ln2_b);
      std::vector<double> f1(static_cast<size_t>(cfg.ffn_dim()), 0.0);
      for (int j = 0; j < cfg.ffn_dim(); ++j) {
        double s = blk.ffn_b1.data()[static_cast<size_t>(j)];
        for (int k = 0; k < d; ++k)
          s += n2[static_cast<size_t>(k)] * blk.ffn_w1.data()[static_cast<size_t>(k) * cfg.ffn_dim() + j];
        f1[static_cast<size_t>(j)] = std::max(0.0, s);
      }
      for (int j = 0; j < d; ++j) {
        double s = blk.ffn_b2.data()[static_cast<size_t>(j)];
        for (int k = 0; k < cfg.ffn_dim(); ++k)
          s += f1[static_cast<size_t>(k)] * blk.ffn_w2.data()[static_cast<size_t>(k) * d + j];
        h[static_cast<size_t>(t)][static_cast<size_t>(j)] += s;
      }
    }
  }

  std::vector<std::vector<double>> logits(static_cast<size_t>(C),
                                          std::vector<double>(static_cast<size_t>(b.action_dim), 0.0));
  for (int t = 0; t < C; ++t) {
    const std::vector<double> y = norm_affine(h[static_cast<size_t>(t)], p.lnf_g, p.lnf_b);
    for (int a = 0; a < b.action_dim; ++a) {
      double s = p.action_b.data()[static_cast<size_t>(a)];
      for (int k = 0; k < d; ++k)
        s += y[static_cast<size_t>(k)] * p.action_w.data()[static_cast<size_t>(k) * b.action_dim + a];
      if (!b.avail[(static_cast<size_t>(row) * C + t) * b.action_dim + a]) s += kMaskSentinel;
      logits[static_cast<size_t>(t)][static_cast<size_t>(a)] = s;
    }
  }
  return logits;
}

}  // namespace

TEST_CASE("positional encoding closed form") {
  const int d = 32;
  Tensor p0 = positional_encoding(0, d, 400);
  for (int i = 0; i < d; i += 2) CHECK(p0.at(i) == 0.0);
  for (int i = 1; i < d; i += 2) CHECK(p0.at(i) == 1.0);

  Tensor p1 = positional_encoding(1, d, 400);
  CHECK(p1.at(0) == doctest::Approx(0.8414709848078965).epsilon(1e-9));
  CHECK(p1.at(1) == doctest::Approx(0.5403023058681398).epsilon(1e-9));

  CHECK_THROWS_AS(positional_encoding(401, d, 400), ContractError);
  CHECK_THROWS_AS(positional_encoding(-1, d, 400), ContractError);
}

TEST_CASE("positional encoding matches direct evaluation across range") {
  const int d = 32;
  for (int pos = 0; pos <= 400; ++pos) {
    Tensor pe = positional_encoding(pos, d, 400);
    for (int i = 0; 2 * i < d; ++i) {
      const double angle = pos / std::pow(10000.0, (2.0 * i) / d);
      CHECK(std::abs(pe.at(2 * i) - std::sin(angle)) < 1e-6);
      CHECK(std::abs(pe.at(2 * i + 1) - std::cos(angle)) < 1e-6);
    }
  }
}

TEST_CASE("single-position attention weight is one") {
  // with C=1 the attention matrix is [[1]], so the output equals v . Wo
  ModelConfig cfg = tiny_config(1, 1, 2, 1);
  Rng rng(3);
  ModelParams p = ModelParams::init(cfg, rng);
  Tensor x = Tensor::from_data({1, 2}, {0.3, -0.7});
  Tensor out = causal_attention(x, p.blocks[0], cfg);
  Tensor v = matmul(x, p.blocks[0].wv);
  Tensor expect = matmul(v, p.blocks[0].wo);
  for (int i = 0; i < 2; ++i) CHECK(out.at(0, i) == doctest::Approx(expect.at(0, i)).epsilon(1e-12));
}

TEST_CASE("three-token attention matches brute-force oracle") {
  // hand-set single head of extent 2 against three explicit lines of math
  ModelConfig cfg = tiny_config(1, 1, 2, 3);
  Rng rng(4);
  ModelParams p = ModelParams::init(cfg, rng);
  p.blocks[0].wq = Tensor::from_data({2, 2}, {1.0, 0.2, -0.3, 0.5}, true);
  p.blocks[0].wk = Tensor::from_data({2, 2}, {0.7, -0.1, 0.4, 0.9}, true);
  p.blocks[0].wv = Tensor::from_data({2, 2}, {0.2, 0.8, -0.5, 0.3}, true);
  p.blocks[0].wo = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0}, true);
  Tensor x = Tensor::from_data({3, 2}, {0.1, 0.4, -0.2, 0.3, 0.5, -0.6});

  Tensor got = causal_attention(x, p.blocks[0], cfg);

  // oracle: explicit q/k/v rows, masked rows softmaxed by hand
  double q[3][2], k[3][2], v[3][2];
  for (int t = 0; t < 3; ++t)
    for (int j = 0; j < 2; ++j) {
      q[t][j] = x.at(t, 0) * p.blocks[0].wq.at(0, j) + x.at(t, 1) * p.blocks[0].wq.at(1, j);
      k[t][j] = x.at(t, 0) * p.blocks[0].wk.at(0, j) + x.at(t, 1) * p.blocks[0].wk.at(1, j);
      v[t][j] = x.at(t, 0) * p.blocks[0].wv.at(0, j) + x.at(t, 1) * p.blocks[0].wv.at(1, j);
    }
  for (int t = 0; t < 3; ++t) {
    double w[3] = {0, 0, 0};
    double z = 0.0;
    for (int j = 0; j <= t; ++j) {
      w[j] = std::exp((q[t][0] * k[j][0] + q[t][1] * k[j][1]) / std::sqrt(2.0));
      z += w[j];
    }
    for (int e = 0; e < 2; ++e) {
      double o = 0.0;
      for (int j = 0; j <= t; ++j) o += (w[j] / z) * v[j][e];
      CHECK(std::abs(got.at(t, e) - o) < 1e-12);
    }
  }
}

TEST_CASE("causality: perturbing future tokens leaves logits bitwise unchanged") {
  ModelConfig cfg = tiny_config(2, 2, 8, 4);
  Rng rng(7);
  ModelParams p = ModelParams::init(cfg, rng);
  ContextBatch b = random_batch(cfg, rng, 1);
  ForwardResult base = forward(b, p);

  for (int trial = 0; trial < 25; ++trial) {
    const int t_protect = rng.uniform_int(cfg.context_length - 1);
    ContextBatch b2 = b;
    for (int t = t_protect + 1; t < cfg.context_length; ++t)
      for (int k = 0; k < b.token_dim; ++k)
        b2.tokens[static_cast<size_t>(t) * b.token_dim + k] += rng.uniform() * 3.0 - 1.5;
    ForwardResult pert = forward(b2, p);
    for (int t = 0; t <= t_protect; ++t)
      for (int a = 0; a < b.action_dim; ++a)
        CHECK(pert.logits[0].at(t, a) == base.logits[0].at(t, a));  // exact
  }
}

TEST_CASE("forward masks unavailable actions to probability zero") {
  ModelConfig cfg = tiny_config();
  Rng rng(9);
  ModelParams p = ModelParams::init(cfg, rng);
  ContextBatch b = random_batch(cfg, rng, 3);
  ForwardResult fr = forward(b, p);
  for (int w = 0; w < b.batch; ++w) {
    Tensor zero_mask = Tensor::zeros({b.context, b.action_dim});
    for (int t = 0; t < b.context; ++t)
      for (int a = 0; a < b.action_dim; ++a)
        if (!b.avail[(static_cast<size_t>(w) * b.context + t) * b.action_dim + a])
          zero_mask.data()[static_cast<size_t>(t) * b.action_dim + a] = kMaskSentinel;
    Tensor probs = masked_softmax(fr.logits[static_cast<size_t>(w)], zero_mask);
    for (int t = 0; t < b.context; ++t)
      for (int a = 0; a < b.action_dim; ++a) {
        CHECK(std::isfinite(fr.logits[static_cast<size_t>(w)].at(t, a)));
        if (!b.avail[(static_cast<size_t>(w) * b.context + t) * b.action_dim + a])
          CHECK(probs.at(t, a) == 0.0);
      }
  }
}

TEST_CASE("identical context rows produce identical logits") {
  ModelConfig cfg = tiny_config(2, 2, 8, 3);
  Rng rng(10);
  ModelParams p = ModelParams::init(cfg, rng);
  ContextBatch b = random_batch(cfg, rng, 2);
  // copy row 0 into row 1 wholesale
  const size_t ct = static_cast<size_t>(b.context);
  for (size_t i = 0; i < ct * b.token_dim; ++i) b.tokens[ct * b.token_dim + i] = b.tokens[i];
  for (size_t i = 0; i < ct; ++i) {
    b.timesteps[ct + i] = b.timesteps[i];
    for (int a = 0; a < b.action_dim; ++a)
      b.avail[(ct + i) * b.action_dim + a] = b.avail[i * b.action_dim + a];
  }
  ForwardResult fr = forward(b, p);
  for (int t = 0; t < b.context; ++t)
    for (int a = 0; a < b.action_dim; ++a)
      CHECK(fr.logits[0].at(t, a) == fr.logits[1].at(t, a));
}

TEST_CASE("forward matches independent straight-line reimplementation") {
  ModelConfig cfg = tiny_config(1, 1, 4, 2);
  Rng rng(12);
  ModelParams p = ModelParams::init(cfg, rng);
  ContextBatch b = random_batch(cfg, rng, 2);
  ForwardResult fr = forward(b, p);
  for (int row = 0; row < b.batch; ++row) {
    auto oracle = straight_line_forward(b, p, row);
    for (int t = 0; t < b.context; ++t)
      for (int a = 0; a < b.action_dim; ++a)
        CHECK(std::abs(fr.logits[static_cast<size_t>(row)].at(t, a) -
                       oracle[static_cast<size_t>(t)][static_cast<size_t>(a)]) < 1e-10);
  }
}

TEST_CASE("act: greedy, mask override, tie-break, errors") {
  Rng rng(1);
  CHECK(act_from_logits({2, 5, 1}, {1, 1, 1}, ActMode::kGreedy, rng) == 1);
  CHECK(act_from_logits({2, 5, 1}, {1, 0, 1}, ActMode::kGreedy, rng) == 0);
  CHECK(act_from_logits({3, 3, 3}, {1, 1, 1}, ActMode::kGreedy, rng) == 0);  // lowest index
  CHECK_THROWS_WITH_AS(act_from_logits({1, 2}, {0, 0}, ActMode::kGreedy, rng),
                       doctest::Contains("no legal action"), ContractError);
}

TEST_CASE("argmax invariance under constant shift of legal logits") {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + rng.uniform_int(6);
    std::vector<double> logits(static_cast<size_t>(n));
    std::vector<uint8_t> avail(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) logits[static_cast<size_t>(i)] = rng.uniform() * 10 - 5;
    avail[static_cast<size_t>(rng.uniform_int(n))] = 1;
    for (int i = 0; i < n; ++i)
      if (rng.uniform() < 0.5) avail[static_cast<size_t>(i)] = 1;
    const int base = act_from_logits(logits, avail, ActMode::kGreedy, rng);
    const double shift = rng.uniform() * 100 - 50;
    for (double& v : logits) v += shift;
    CHECK(act_from_logits(logits, avail, ActMode::kGreedy, rng) == base);
  }
}

TEST_CASE("uniform sampling frequencies") {
  Rng rng(23);
  std::vector<double> logits{0.7, 0.7, 0.7, 0.7};
  std::vector<uint8_t> avail{1, 1, 1, 1};
  std::vector<int> counts(4, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i)
    counts[static_cast<size_t>(act_from_logits(logits, avail, ActMode::kSample, rng))]++;
  for (int a = 0; a < 4; ++a)
    CHECK(std::abs(counts[static_cast<size_t>(a)] / static_cast<double>(draws) - 0.25) < 0.01);
}

TEST_CASE("sampled actions are always legal") {
  Rng rng(29);
  for (int i = 0; i < 20000; ++i) {
    const int n = 2 + rng.uniform_int(6);
    std::vector<double> logits(static_cast<size_t>(n));
    std::vector<uint8_t> avail(static_cast<size_t>(n), 0);
    for (int j = 0; j < n; ++j) logits[static_cast<size_t>(j)] = rng.uniform() * 8 - 4;
    avail[static_cast<size_t>(rng.uniform_int(n))] = 1;
    for (int j = 0; j < n; ++j)
      if (rng.uniform() < 0.3) avail[static_cast<size_t>(j)] = 1;
    const int a = act_from_logits(logits, avail, ActMode::kSample, rng);
    CHECK(avail[static_cast<size_t>(a)] == 1);
  }
}

TEST_CASE("full model gradient check at C=2, n_embd=4") {
  ModelConfig cfg = tiny_config(1, 1, 4, 2);
  Rng rng(37);
  ModelParams p = ModelParams::init(cfg, rng);
  ContextBatch b = random_batch(cfg, rng, 1);
  for (size_t i = 0; i < b.valid.size(); ++i) {
    for (int a = 0; a < b.action_dim; ++a)
      if (b.avail[i * b.action_dim + a]) {
        b.actions[i] = a;
        break;
      }
  }

  // gradient wrt the embedding matrix through the whole forward + CE
  const Tensor embed0 = p.embed_w;
  auto f = [&](const Tensor& w) {
    ModelParams q = p;
    q.embed_w = w;
    ForwardResult fr = forward(b, q);
    return ce_loss(fr.logits, b);
  };
  const double err = grad_check(f, Tensor::from_data(embed0.shape(), embed0.data()), 1e-5);
  CHECK(err < 1e-3);
}

TEST_CASE("rollout session reproduces window forward bitwise") {
  ModelConfig cfg = tiny_config(2, 2, 8, 6);
  Rng rng(41);
  ModelParams p = ModelParams::init(cfg, rng);
  ContextBatch b = random_batch(cfg, rng, 1);
  ForwardResult fr = forward(b, p);

  RolloutSession session(p);
  for (int t = 0; t < cfg.context_length; ++t) {
    std::vector<double> tok(b.tokens.begin() + static_cast<size_t>(t) * b.token_dim,
                            b.tokens.begin() + static_cast<size_t>(t + 1) * b.token_dim);
    std::vector<uint8_t> avail(b.avail.begin() + static_cast<size_t>(t) * b.action_dim,
                               b.avail.begin() + static_cast<size_t>(t + 1) * b.action_dim);
    RolloutSession::StepOut so = session.step(tok, b.timesteps[static_cast<size_t>(t)], avail);
    for (int a = 0; a < b.action_dim; ++a) CHECK(so.logits[static_cast<size_t>(a)] == fr.logits[0].at(t, a));
    CHECK(so.value == fr.values[0].at(t));
  }
}

TEST_CASE("checkpoint round trip restores exact parameters and config") {
  ModelConfig cfg = tiny_config(2, 2, 8, 3);
  Rng rng(43);
  ModelParams p = ModelParams::init(cfg, rng);
  const std::string path = "/tmp/madt_test_model.ckpt";
  p.save(path, "unit test");
  ModelParams q = ModelParams::load(path);
  CHECK(q.cfg.n_layer == cfg.n_layer);
  CHECK(q.cfg.universal_action_dim == cfg.universal_action_dim);
  auto pn = p.named();
  auto qn = q.named();
  REQUIRE(pn.size() == qn.size());
  for (size_t i = 0; i < pn.size(); ++i) {
    CHECK(pn[i].first == qn[i].first);
    REQUIRE(pn[i].second.data().size() == qn[i].second.data().size());
    for (size_t j = 0; j < pn[i].second.data().size(); ++j)
      CHECK(pn[i].second.data()[j] == qn[i].second.data()[j]);  // bitwise
  }
  std::remove(path.c_str());
  std::remove((path + ".card.txt").c_str());
}

TEST_CASE("forward rejects a valid position with no legal action") {
  ModelConfig cfg = tiny_config();
  Rng rng(47);
  ModelParams p = ModelParams::init(cfg, rng);
  ContextBatch b = random_batch(cfg, rng, 1);
  for (int a = 0; a < b.action_dim; ++a) b.avail[static_cast<size_t>(a)] = 0;
  CHECK_THROWS_WITH_AS(forward(b, p), doctest::Contains("no legal action"), ContractError);
}
