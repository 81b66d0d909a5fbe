#include "madt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "madt/checkpoint.hpp"
#include "madt/errors.hpp"

namespace madt {

void ModelConfig::validate() const {
  if (n_layer < 1 || n_head < 1 || n_embd < 1) {
    throw ConfigError("model dims must be positive");
  }
  if (n_embd % n_head != 0) {
    throw ConfigError("n_embd (" + std::to_string(n_embd) +
                      ") not divisible by n_head (" + std::to_string(n_head) + ")");
  }
  if (context_length < 1) throw ConfigError("context_length must be >= 1");
  if (max_timestep < 1) throw ConfigError("max_timestep must be >= 1");
  if (universal_obs_dim < 1 || universal_state_dim < 1 || universal_action_dim < 2 ||
      max_agents < 1) {
    throw ConfigError("universal dims must be set before building a model");
  }
}

void ContextBatch::validate(const ModelConfig& cfg) const {
  if (token_dim != cfg.token_dim()) {
    throw DimensionError("batch token_dim " + std::to_string(token_dim) +
                         " != model token_dim " + std::to_string(cfg.token_dim()));
  }
  if (action_dim != cfg.universal_action_dim) {
    throw DimensionError("batch action_dim " + std::to_string(action_dim) +
                         " != universal_action_dim " +
                         std::to_string(cfg.universal_action_dim));
  }
  const size_t bc = static_cast<size_t>(batch) * context;
  if (tokens.size() != bc * token_dim || timesteps.size() != bc ||
      avail.size() != bc * action_dim || valid.size() != bc) {
    throw DimensionError("inconsistent ContextBatch buffer sizes");
  }
  for (size_t i = 0; i < bc; ++i) {
    if (!valid[i]) continue;
    bool any = false;
    for (int a = 0; a < action_dim; ++a) any = any || avail[i * action_dim + a];
    if (!any) {
      throw ContractError("no legal action at valid position " + std::to_string(i));
    }
  }
}

Tensor positional_encoding(int pos, int d_model, int max_timestep) {
  if (pos < 0 || pos > max_timestep) {
    throw ContractError("positional_encoding: pos " + std::to_string(pos) +
                        " outside [0, " + std::to_string(max_timestep) + "]");
  }
  std::vector<double> out(static_cast<size_t>(d_model));
  for (int i = 0; 2 * i < d_model; ++i) {
    const double angle = pos / std::pow(10000.0, (2.0 * i) / d_model);
    out[static_cast<size_t>(2 * i)] = std::sin(angle);
    if (2 * i + 1 < d_model) out[static_cast<size_t>(2 * i + 1)] = std::cos(angle);
  }
  return Tensor::from_data({d_model}, std::move(out));
}

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  const double s = 0.02;
  auto rn = [&](std::vector<int> shape) { return Tensor::randn(std::move(shape), rng, s, true); };
  auto zeros = [&](std::vector<int> shape) { return Tensor::zeros(std::move(shape), true); };
  auto ones = [&](int n) {
    Tensor t = Tensor::zeros({n}, true);
    std::fill(t.data().begin(), t.data().end(), 1.0);
    return t;
  };
  const int d = cfg.n_embd;
  p.embed_w = rn({cfg.token_dim(), d});
  p.embed_b = zeros({d});
  for (int l = 0; l < cfg.n_layer; ++l) {
    Block b;
    b.ln1_g = ones(d);
    b.ln1_b = zeros({d});
    b.wq = rn({d, d});
    b.wk = rn({d, d});
    b.wv = rn({d, d});
    b.wo = rn({d, d});
    b.ln2_g = ones(d);
    b.ln2_b = zeros({d});
    b.ffn_w1 = rn({d, cfg.ffn_dim()});
    b.ffn_b1 = zeros({cfg.ffn_dim()});
    b.ffn_w2 = rn({cfg.ffn_dim(), d});
    b.ffn_b2 = zeros({d});
    p.blocks.push_back(std::move(b));
  }
  p.lnf_g = ones(d);
  p.lnf_b = zeros({d});
  p.action_w = rn({d, cfg.universal_action_dim});
  p.action_b = zeros({cfg.universal_action_dim});
  p.value_w = rn({d, 1});
  p.value_b = zeros({1});
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed.w", embed_w);
  out.emplace_back("embed.b", embed_b);
  for (size_t l = 0; l < blocks.size(); ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    const Block& b = blocks[l];
    out.emplace_back(pre + "ln1.g", b.ln1_g);
    out.emplace_back(pre + "ln1.b", b.ln1_b);
    out.emplace_back(pre + "attn.wq", b.wq);
    out.emplace_back(pre + "attn.wk", b.wk);
    out.emplace_back(pre + "attn.wv", b.wv);
    out.emplace_back(pre + "attn.wo", b.wo);
    out.emplace_back(pre + "ln2.g", b.ln2_g);
    out.emplace_back(pre + "ln2.b", b.ln2_b);
    out.emplace_back(pre + "ffn.w1", b.ffn_w1);
    out.emplace_back(pre + "ffn.b1", b.ffn_b1);
    out.emplace_back(pre + "ffn.w2", b.ffn_w2);
    out.emplace_back(pre + "ffn.b2", b.ffn_b2);
  }
  out.emplace_back("lnf.g", lnf_g);
  out.emplace_back("lnf.b", lnf_b);
  out.emplace_back("action_head.w", action_w);
  out.emplace_back("action_head.b", action_b);
  out.emplace_back("value_head.w", value_w);
  out.emplace_back("value_head.b", value_b);
  return out;
}

std::vector<Tensor> ModelParams::parameters() const {
  std::vector<Tensor> ps;
  for (auto& [name, t] : named()) ps.push_back(t);
  return ps;
}

void ModelParams::zero_grad() const {
  for (auto& t : parameters()) const_cast<Tensor&>(t).zero_grad();
}

bool ModelParams::all_finite() const {
  for (const auto& t : parameters())
    for (double v : t.data())
      if (!std::isfinite(v)) return false;
  return true;
}

namespace {

std::map<std::string, std::string> config_fields(const ModelConfig& c) {
  return {
      {"n_layer", std::to_string(c.n_layer)},
      {"n_head", std::to_string(c.n_head)},
      {"n_embd", std::to_string(c.n_embd)},
      {"context_length", std::to_string(c.context_length)},
      {"max_timestep", std::to_string(c.max_timestep)},
      {"universal_obs_dim", std::to_string(c.universal_obs_dim)},
      {"universal_state_dim", std::to_string(c.universal_state_dim)},
      {"universal_action_dim", std::to_string(c.universal_action_dim)},
      {"max_agents", std::to_string(c.max_agents)},
      {"use_return_token", c.use_return_token ? "1" : "0"},
  };
}

ModelConfig config_from_fields(const std::map<std::string, std::string>& f) {
  ModelConfig c;
  auto geti = [&f](const char* key) {
    auto it = f.find(key);
    if (it == f.end()) throw DataError(std::string("checkpoint header missing ") + key);
    return std::stoi(it->second);
  };
  c.n_layer = geti("n_layer");
  c.n_head = geti("n_head");
  c.n_embd = geti("n_embd");
  c.context_length = geti("context_length");
  c.max_timestep = geti("max_timestep");
  c.universal_obs_dim = geti("universal_obs_dim");
  c.universal_state_dim = geti("universal_state_dim");
  c.universal_action_dim = geti("universal_action_dim");
  c.max_agents = geti("max_agents");
  c.use_return_token = geti("use_return_token") != 0;
  return c;
}

}  // namespace

void ModelParams::save(const std::string& path, const std::string& provenance) const {
  std::vector<NamedTensor> nts;
  for (auto& [name, t] : named()) nts.push_back({name, t});
  auto fields = config_fields(cfg);
  write_checkpoint(path, fields, nts);

  std::ofstream card(path + ".card.txt");
  card << "model card\n==========\n";
  for (const auto& [k, v] : fields) card << k << " = " << v << "\n";
  card << "provenance: " << provenance << "\n";
}

ModelParams ModelParams::load(const std::string& path) {
  LoadedCheckpoint ck = read_checkpoint(path);
  ModelConfig cfg = config_from_fields(ck.header_fields);
  ModelParams p;
  p.cfg = cfg;
  auto take = [&ck, &path](const std::string& name) {
    const Tensor* t = ck.find(name);
    if (!t) throw DataError("checkpoint " + path + " missing parameter " + name);
    return Tensor::from_data(t->shape(), t->data(), true);
  };
  p.embed_w = take("embed.w");
  p.embed_b = take("embed.b");
  for (int l = 0; l < cfg.n_layer; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    Block b;
    b.ln1_g = take(pre + "ln1.g");
    b.ln1_b = take(pre + "ln1.b");
    b.wq = take(pre + "attn.wq");
    b.wk = take(pre + "attn.wk");
    b.wv = take(pre + "attn.wv");
    b.wo = take(pre + "attn.wo");
    b.ln2_g = take(pre + "ln2.g");
    b.ln2_b = take(pre + "ln2.b");
    b.ffn_w1 = take(pre + "ffn.w1");
    b.ffn_b1 = take(pre + "ffn.b1");
    b.ffn_w2 = take(pre + "ffn.w2");
    b.ffn_b2 = take(pre + "ffn.b2");
    p.blocks.push_back(std::move(b));
  }
  p.lnf_g = take("lnf.g");
  p.lnf_b = take("lnf.b");
  p.action_w = take("action_head.w");
  p.action_b = take("action_head.b");
  p.value_w = take("value_head.w");
  p.value_b = take("value_head.b");
  return p;
}

namespace {

Tensor affine_norm(const Tensor& x, const Tensor& g, const Tensor& b) {
  return add_rowvec(mul_rowvec(layer_norm(x), g), b);
}

Tensor causal_mask(int c) {
  Tensor m = Tensor::zeros({c, c});
  for (int i = 0; i < c; ++i)
    for (int j = i + 1; j < c; ++j) m.data()[static_cast<size_t>(i) * c + j] = kMaskSentinel;
  return m;
}

}  // namespace

Tensor causal_attention(const Tensor& x, const ModelParams::Block& blk,
                        const ModelConfig& cfg) {
  const int c = x.dim(0);
  const int dk = cfg.head_dim();
  Tensor q = matmul(x, blk.wq);
  Tensor k = matmul(x, blk.wk);
  Tensor v = matmul(x, blk.wv);
  Tensor mask = causal_mask(c);
  Tensor heads;
  for (int h = 0; h < cfg.n_head; ++h) {
    Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
    Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
    Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
    Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dk)));
    Tensor att = masked_softmax(scores, mask);
    Tensor oh = matmul(att, vh);
    heads = h == 0 ? oh : concat_cols(heads, oh);
  }
  return matmul(heads, blk.wo);
}

ForwardResult forward(const ContextBatch& batch, const ModelParams& params) {
  const ModelConfig& cfg = params.cfg;
  batch.validate(cfg);
  const int c = batch.context;
  const int td = batch.token_dim;
  const int ad = batch.action_dim;

  ForwardResult out;
  out.logits.reserve(static_cast<size_t>(batch.batch));
  out.values.reserve(static_cast<size_t>(batch.batch));

  for (int b = 0; b < batch.batch; ++b) {
    const size_t tok0 = static_cast<size_t>(b) * c * td;
    Tensor x_tok = Tensor::from_data(
        {c, td}, std::vector<double>(batch.tokens.begin() + tok0,
                                     batch.tokens.begin() + tok0 + static_cast<size_t>(c) * td));
    Tensor h = linear(x_tok, params.embed_w, params.embed_b);

    Tensor pe = Tensor::zeros({c, cfg.n_embd});
    for (int t = 0; t < c; ++t) {
      Tensor row = positional_encoding(batch.timesteps[static_cast<size_t>(b) * c + t],
                                       cfg.n_embd, cfg.max_timestep);
      std::copy(row.data().begin(), row.data().end(),
                pe.data().begin() + static_cast<size_t>(t) * cfg.n_embd);
    }
    h = add(h, pe);

    for (const auto& blk : params.blocks) {
      h = add(h, causal_attention(affine_norm(h, blk.ln1_g, blk.ln1_b), blk, cfg));
      Tensor f = affine_norm(h, blk.ln2_g, blk.ln2_b);
      f = linear(relu(linear(f, blk.ffn_w1, blk.ffn_b1)), blk.ffn_w2, blk.ffn_b2);
      h = add(h, f);
    }
    h = affine_norm(h, params.lnf_g, params.lnf_b);

    Tensor logits = linear(h, params.action_w, params.action_b);
    Tensor avail_mask = Tensor::zeros({c, ad});
    for (int t = 0; t < c; ++t)
      for (int a = 0; a < ad; ++a)
        if (!batch.avail[(static_cast<size_t>(b) * c + t) * ad + a])
          avail_mask.data()[static_cast<size_t>(t) * ad + a] = kMaskSentinel;
    logits = add(logits, avail_mask);

    Tensor values = reshape(linear(h, params.value_w, params.value_b), {c});

    for (double v : logits.data())
      if (!std::isfinite(v)) throw NumericalError("non-finite logits in forward");

    out.logits.push_back(std::move(logits));
    out.values.push_back(std::move(values));
  }
  return out;
}

int act_from_logits(const std::vector<double>& logits,
                    const std::vector<uint8_t>& avail, ActMode mode, Rng& rng) {
  const int n = static_cast<int>(logits.size());
  if (avail.size() != logits.size()) {
    throw DimensionError("act: logits/avail size mismatch");
  }
  int first_legal = -1;
  for (int a = 0; a < n; ++a)
    if (avail[static_cast<size_t>(a)]) {
      first_legal = a;
      break;
    }
  if (first_legal < 0) throw ContractError("no legal action");

  if (mode == ActMode::kGreedy) {
    int best = first_legal;
    for (int a = first_legal + 1; a < n; ++a)
      if (avail[static_cast<size_t>(a)] && logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(best)])
        best = a;
    return best;
  }

  // sample from the masked softmax
  double mx = logits[static_cast<size_t>(first_legal)];
  for (int a = 0; a < n; ++a)
    if (avail[static_cast<size_t>(a)]) mx = std::max(mx, logits[static_cast<size_t>(a)]);
  std::vector<double> p(static_cast<size_t>(n), 0.0);
  double z = 0.0;
  for (int a = 0; a < n; ++a)
    if (avail[static_cast<size_t>(a)]) {
      p[static_cast<size_t>(a)] = std::exp(logits[static_cast<size_t>(a)] - mx);
      z += p[static_cast<size_t>(a)];
    }
  const double r = rng.uniform() * z;
  double cum = 0.0;
  int last_legal = first_legal;
  for (int a = 0; a < n; ++a) {
    if (!avail[static_cast<size_t>(a)]) continue;
    cum += p[static_cast<size_t>(a)];
    last_legal = a;
    if (r < cum) return a;
  }
  return last_legal;
}

double masked_log_prob(const std::vector<double>& logits,
                       const std::vector<uint8_t>& avail, int action) {
  const int n = static_cast<int>(logits.size());
  if (action < 0 || action >= n || !avail[static_cast<size_t>(action)]) {
    throw ContractError("masked_log_prob: action " + std::to_string(action) + " illegal");
  }
  double mx = logits[static_cast<size_t>(action)];
  for (int a = 0; a < n; ++a)
    if (avail[static_cast<size_t>(a)]) mx = std::max(mx, logits[static_cast<size_t>(a)]);
  double z = 0.0;
  for (int a = 0; a < n; ++a)
    if (avail[static_cast<size_t>(a)]) z += std::exp(logits[static_cast<size_t>(a)] - mx);
  return (logits[static_cast<size_t>(action)] - mx) - std::log(z);
}

// --- incremental rollout evaluation ---

RolloutSession::RolloutSession(const ModelParams& params) : p_(params) {
  k_cache_.resize(static_cast<size_t>(p_.cfg.n_layer));
  v_cache_.resize(static_cast<size_t>(p_.cfg.n_layer));
}

void RolloutSession::reset() {
  for (auto& k : k_cache_) k.clear();
  for (auto& v : v_cache_) v.clear();
  pos_.clear();
}

namespace {

// row' = row * W (+ b); plain loops matching matmul's accumulation order
void row_matmul(const double* row, const Tensor& w, const Tensor& b,
                double* out, bool has_bias) {
  const int k = w.dim(0), n = w.dim(1);
  for (int j = 0; j < n; ++j) out[j] = 0.0;
  for (int kk = 0; kk < k; ++kk) {
    const double av = row[kk];
    const double* wrow = w.data().data() + static_cast<size_t>(kk) * n;
    for (int j = 0; j < n; ++j) out[j] += av * wrow[j];
  }
  if (has_bias)
    for (int j = 0; j < n; ++j) out[j] += b.data()[static_cast<size_t>(j)];
}

void row_norm_affine(const double* row, int n, const Tensor& g, const Tensor& b,
                     double* out) {
  double mean = 0.0;
  for (int c = 0; c < n; ++c) mean += row[c];
  mean /= n;
  double var = 0.0;
  for (int c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
  var /= n;
  const double is = 1.0 / std::sqrt(var + kLayerNormEps);
  for (int c = 0; c < n; ++c)
    out[c] = (row[c] - mean) * is * g.data()[static_cast<size_t>(c)] +
             b.data()[static_cast<size_t>(c)];
}

}  // namespace

RolloutSession::StepOut RolloutSession::step(const std::vector<double>& token,
                                             int timestep,
                                             const std::vector<uint8_t>& avail) {
  const ModelConfig& cfg = p_.cfg;
  if (static_cast<int>(token.size()) != cfg.token_dim()) {
    throw DimensionError("session token dim " + std::to_string(token.size()) +
                         " != " + std::to_string(cfg.token_dim()));
  }
  if (length() >= cfg.context_length) {
    throw ContractError("session window full; reset() before next chunk");
  }
  const int d = cfg.n_embd;
  const int dk = cfg.head_dim();

  std::vector<double> x(static_cast<size_t>(d));
  row_matmul(token.data(), p_.embed_w, p_.embed_b, x.data(), true);
  Tensor pe = positional_encoding(timestep, d, cfg.max_timestep);
  for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += pe.data()[static_cast<size_t>(i)];

  std::vector<double> a(static_cast<size_t>(d)), q(static_cast<size_t>(d));
  std::vector<double> krow(static_cast<size_t>(d)), vrow(static_cast<size_t>(d));
  std::vector<double> attn_out(static_cast<size_t>(d)), proj(static_cast<size_t>(d));
  std::vector<double> f1(static_cast<size_t>(cfg.ffn_dim()));

  for (int l = 0; l < cfg.n_layer; ++l) {
    const auto& blk = p_.blocks[static_cast<size_t>(l)];
    row_norm_affine(x.data(), d, blk.ln1_g, blk.ln1_b, a.data());
    row_matmul(a.data(), blk.wq, blk.wq, q.data(), false);
    row_matmul(a.data(), blk.wk, blk.wk, krow.data(), false);
    row_matmul(a.data(), blk.wv, blk.wv, vrow.data(), false);
    auto& kc = k_cache_[static_cast<size_t>(l)];
    auto& vc = v_cache_[static_cast<size_t>(l)];
    kc.insert(kc.end(), krow.begin(), krow.end());
    vc.insert(vc.end(), vrow.begin(), vrow.end());
    const int t = static_cast<int>(kc.size() / d) - 1;

    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    for (int h = 0; h < cfg.n_head; ++h) {
      const int off = h * dk;
      // scaled scores against cached keys, then softmax over positions <= t
      std::vector<double> scores(static_cast<size_t>(t) + 1);
      for (int j = 0; j <= t; ++j) {
        double s = 0.0;
        const double* kj = kc.data() + static_cast<size_t>(j) * d + off;
        for (int e = 0; e < dk; ++e) s += q[static_cast<size_t>(off + e)] * kj[e];
        scores[static_cast<size_t>(j)] = s * inv_sqrt_dk;
      }
      double mxs = scores[0];
      for (int j = 1; j <= t; ++j) mxs = std::max(mxs, scores[static_cast<size_t>(j)]);
      double z = 0.0;
      for (int j = 0; j <= t; ++j) {
        scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mxs);
        z += scores[static_cast<size_t>(j)];
      }
      for (int j = 0; j <= t; ++j) scores[static_cast<size_t>(j)] /= z;
      for (int e = 0; e < dk; ++e) attn_out[static_cast<size_t>(off + e)] = 0.0;
      for (int j = 0; j <= t; ++j) {
        const double w = scores[static_cast<size_t>(j)];
        const double* vj = vc.data() + static_cast<size_t>(j) * d + off;
        for (int e = 0; e < dk; ++e) attn_out[static_cast<size_t>(off + e)] += w * vj[e];
      }
    }
    row_matmul(attn_out.data(), blk.wo, blk.wo, proj.data(), false);
    for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];

    row_norm_affine(x.data(), d, blk.ln2_g, blk.ln2_b, a.data());
    row_matmul(a.data(), blk.ffn_w1, blk.ffn_b1, f1.data(), true);
    for (double& fv : f1) fv = fv > 0.0 ? fv : 0.0;
    row_matmul(f1.data(), blk.ffn_w2, blk.ffn_b2, proj.data(), true);
    for (int i = 0; i < d; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
  }

  row_norm_affine(x.data(), d, p_.lnf_g, p_.lnf_b, a.data());

  StepOut so;
  so.logits.resize(static_cast<size_t>(cfg.universal_action_dim));
  row_matmul(a.data(), p_.action_w, p_.action_b, so.logits.data(), true);
  if (avail.size() != so.logits.size()) {
    throw DimensionError("session avail size mismatch");
  }
  for (size_t i = 0; i < so.logits.size(); ++i)
    if (!avail[i]) so.logits[i] += kMaskSentinel;
  double v = 0.0;
  for (int i = 0; i < d; ++i)
    v += a[static_cast<size_t>(i)] * p_.value_w.data()[static_cast<size_t>(i)];
  so.value = v + p_.value_b.data()[0];

  pos_.push_back(timestep);
  return so;
}

}  // namespace madt
