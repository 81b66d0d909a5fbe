#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "madt/checkpoint.hpp"
#include "madt/config.hpp"
#include "madt/dataset.hpp"
#include "madt/env.hpp"
#include "madt/errors.hpp"
#include "madt/offline.hpp"
#include "madt/online.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace madt;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

UniversalDims registry_dims() {
  UniversalDims d;
  for (const auto& def : scenario_registry()) {
    const TaskSpec s = def.task_spec();
    d.state_dim = std::max(d.state_dim, s.state_dim);
    d.obs_dim = std::max(d.obs_dim, s.obs_dim);
    d.action_dim = std::max(d.action_dim, s.n_actions);
    d.max_agents = std::max(d.max_agents, s.n_agents);
  }
  return d;
}

ModelConfig model_config_from(const RunConfig& cfg) {
  cfg.validate_section(
      "model", {"n_layer", "n_head", "n_embd", "context_length", "max_timestep",
                "universal_state_dim", "universal_obs_dim", "universal_action_dim",
                "max_agents", "use_return_token"});
  const UniversalDims reg = registry_dims();
  ModelConfig m;
  m.n_layer = static_cast<int>(cfg.get_int("model", "n_layer", 2));
  m.n_head = static_cast<int>(cfg.get_int("model", "n_head", 2));
  m.n_embd = static_cast<int>(cfg.get_int("model", "n_embd", 32));
  m.context_length = static_cast<int>(cfg.get_int("model", "context_length", 32));
  m.max_timestep = static_cast<int>(cfg.get_int("model", "max_timestep", 400));
  m.universal_state_dim =
      static_cast<int>(cfg.get_int("model", "universal_state_dim", reg.state_dim));
  m.universal_obs_dim =
      static_cast<int>(cfg.get_int("model", "universal_obs_dim", reg.obs_dim));
  m.universal_action_dim =
      static_cast<int>(cfg.get_int("model", "universal_action_dim", reg.action_dim));
  m.max_agents = static_cast<int>(cfg.get_int("model", "max_agents", reg.max_agents));
  m.use_return_token = cfg.get_flag("model", "use_return_token", false);
  return m;
}

OfflineConfig offline_config_from(const RunConfig& cfg, const ModelConfig& m) {
  cfg.validate_section("pretrain",
                       {"offline_lr", "mini_batch_size", "epochs", "seed",
                        "offline_train_critic", "value_coef", "discount"});
  OfflineConfig o;
  o.learning_rate = cfg.get_real("pretrain", "offline_lr", 1e-4);
  o.mini_batch_size = static_cast<int>(cfg.get_int("pretrain", "mini_batch_size", 128));
  o.epochs = static_cast<int>(cfg.get_int("pretrain", "epochs", 20));
  o.context_length = m.context_length;
  o.seed = static_cast<uint64_t>(cfg.get_int("pretrain", "seed", 1));
  o.offline_train_critic = cfg.get_flag("pretrain", "offline_train_critic", true);
  o.value_coef = cfg.get_real("pretrain", "value_coef", 0.5);
  return o;
}

PPOConfig ppo_config_from(const RunConfig& cfg) {
  cfg.validate_section(
      "finetune", {"discount", "clip_eps", "online_ppo_epochs", "online_lr",
                   "online_buffer_size", "eval_epochs", "total_env_steps", "seed",
                   "mini_batch_size", "value_coef", "grad_clip", "entropy_coef",
                   "reinforce", "use_gae", "gae_lambda", "rtg_prompt",
                   "return_thresholds"});
  PPOConfig p;
  p.discount = cfg.get_real("finetune", "discount", 0.99);
  p.clip_eps = cfg.get_real("finetune", "clip_eps", 0.2);
  p.ppo_epochs = static_cast<int>(cfg.get_int("finetune", "online_ppo_epochs", 5));
  p.online_lr = cfg.get_real("finetune", "online_lr", 1e-4);
  p.buffer_size = static_cast<int>(cfg.get_int("finetune", "online_buffer_size", 64));
  p.eval_epochs = static_cast<int>(cfg.get_int("finetune", "eval_epochs", 32));
  p.total_env_steps = cfg.get_int("finetune", "total_env_steps", 50000);
  p.seed = static_cast<uint64_t>(cfg.get_int("finetune", "seed", 1));
  p.mini_batch_size = static_cast<int>(cfg.get_int("finetune", "mini_batch_size", 128));
  p.value_coef = cfg.get_real("finetune", "value_coef", 0.5);
  p.grad_clip = cfg.get_real("finetune", "grad_clip", 10.0);
  p.entropy_coef = cfg.get_real("finetune", "entropy_coef", 0.0);
  p.reinforce = cfg.get_flag("finetune", "reinforce", false);
  p.use_gae = cfg.get_flag("finetune", "use_gae", false);
  p.gae_lambda = cfg.get_real("finetune", "gae_lambda", 0.95);
  p.rtg_prompt = cfg.get_real("finetune", "rtg_prompt", 1.0);
  for (const std::string& t : cfg.get_list("finetune", "return_thresholds", {})) {
    p.return_thresholds.push_back(std::stod(t));
  }
  return p;
}

std::vector<std::string> dataset_files(const std::string& dir) {
  std::vector<std::string> files;
  if (!fs::exists(dir)) throw DataError("data directory does not exist: " + dir);
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".mad") files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .mad dataset files under " + dir);
  return files;
}

void write_run_meta(const std::string& out_dir, const RunConfig& resolved,
                    uint64_t seed, const std::vector<std::string>& binary_inputs) {
  fs::create_directories(out_dir);
  std::ofstream cfg_echo(out_dir + "/resolved.cfg");
  cfg_echo << resolved.dump();
  json meta;
  meta["seed"] = seed;
  meta["inputs"] = json::object();
  for (const auto& path : binary_inputs) {
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016" PRIx64, file_content_hash(path));
    meta["inputs"][path] = hex;
  }
  std::ofstream meta_out(out_dir + "/run_meta.json");
  meta_out << meta.dump(2) << "\n";
}

void append_jsonl(std::ofstream& out, const json& j) { out << j.dump() << "\n"; }

int cmd_gen_data(const std::string& scenario, const std::string& tier, int episodes,
                 uint64_t seed, const std::string& out_dir) {
  const ScenarioDef& def = find_scenario(scenario);
  Dataset ds = generate(def, tier_from_name(tier), episodes, seed);
  fs::create_directories(out_dir);
  const std::string path = out_dir + "/" + scenario + "-" + tier + ".mad";
  save_dataset(ds, path);
  std::printf("wrote %s: %d episodes, %lld samples, reward %.4f (+/- %.4f), return %.4f\n",
              path.c_str(), ds.manifest.n_episodes,
              static_cast<long long>(ds.manifest.n_samples), ds.manifest.reward_mean,
              ds.manifest.reward_std, ds.manifest.return_mean);
  return 0;
}

int cmd_stats(const std::string& data_dir) {
  std::printf("%-16s | %-8s | %10s | %s\n", "Maps", "Quality", "# Samples",
              "Reward mean (+/- std)");
  std::printf("-----------------|----------|------------|----------------------\n");
  for (const auto& file : dataset_files(data_dir)) {
    Dataset ds = load_dataset(file);
    const DatasetManifest re = recompute_stats(ds);
    if (re.n_samples != ds.manifest.n_samples ||
        std::abs(re.reward_mean - ds.manifest.reward_mean) > 1e-9) {
      throw DataError("manifest mismatch against recomputed stats in " + file);
    }
    std::printf("%-16s | %-8s | %10lld | %.2f (+/- %.2f)\n",
                ds.manifest.scenario_id.c_str(), ds.manifest.tier.c_str(),
                static_cast<long long>(ds.manifest.n_samples), ds.manifest.reward_mean,
                ds.manifest.reward_std);
  }
  return 0;
}

int cmd_pretrain(const std::string& data_dir, const std::string& config_path,
                 const std::string& out_ckpt) {
  RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_file(config_path);
  ModelConfig mc = model_config_from(cfg);
  OfflineConfig oc = offline_config_from(cfg, mc);

  const std::vector<std::string> files = dataset_files(data_dir);
  std::vector<Dataset> parts;
  for (const auto& f : files) parts.push_back(load_dataset(f));
  UniversalDims dims{mc.universal_state_dim, mc.universal_obs_dim,
                     mc.universal_action_dim, mc.max_agents};
  UnifiedDataset ds = merge(parts, dims, cfg.get_real("pretrain", "discount", 0.99));

  const std::string parent = fs::path(out_ckpt).parent_path().string();
  const std::string run_dir = parent.empty() ? "." : parent;
  write_run_meta(run_dir, cfg, oc.seed, files);

  Rng init(derive_seed(oc.seed, "init"));
  ModelParams params = ModelParams::init(mc, init);

  std::ofstream metrics(run_dir + "/pretrain_metrics.jsonl");
  TrainReport report = pretrain(ds, params, oc, [&metrics](const EpochStats& e) {
    append_jsonl(metrics, json{{"epoch", e.epoch}, {"ce_loss", e.ce_loss},
                               {"accuracy", e.accuracy}});
  });
  params.save(out_ckpt, "pretrain on " + data_dir);
  std::printf("pretrained %d epochs: final ce %.4f, agreement %.4f, wall %.1fs -> %s\n",
              static_cast<int>(report.epochs.size()),
              report.epochs.empty() ? 0.0 : report.epochs.back().ce_loss,
              report.final_accuracy, report.wall_clock_sec, out_ckpt.c_str());
  return 0;
}

void write_threshold_csv(const std::string& path, const FinetuneReport& rep) {
  std::ofstream thr(path);
  thr << "threshold,env_steps\n";
  for (const auto& [t, steps] : rep.steps_to_threshold) {
    thr << t << "," << (steps < 0 ? "inf" : std::to_string(steps)) << "\n";
  }
}

int cmd_finetune(const std::string& scenario, const std::string& ckpt,
                 const std::string& config_path, const std::string& out_dir) {
  RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_file(config_path);
  PPOConfig pc = ppo_config_from(cfg);
  const ScenarioDef& def = find_scenario(scenario);

  const bool from_scratch = ckpt.empty() || ckpt == "none";
  ModelParams params = [&] {
    if (from_scratch) {
      ModelConfig mc = model_config_from(cfg);
      Rng init(derive_seed(pc.seed, "init"));
      return ModelParams::init(mc, init);
    }
    return ModelParams::load(ckpt);
  }();

  std::vector<std::string> inputs;
  if (!from_scratch) inputs.push_back(ckpt);
  write_run_meta(out_dir, cfg, pc.seed, inputs);

  std::ofstream metrics(out_dir + "/finetune_metrics.jsonl");
  FinetuneReport rep = finetune(def, params, pc, [&metrics](const IterStats& it) {
    append_jsonl(metrics,
                 json{{"iteration", it.iteration},
                      {"env_steps", it.env_steps},
                      {"mean_return", it.eval_return},
                      {"success_rate", it.eval_success},
                      {"collect_return", it.collect_return},
                      {"updated", it.updated}});
  });
  write_threshold_csv(out_dir + "/steps_to_threshold.csv", rep);
  params.save(out_dir + "/final.ckpt",
              "finetune " + scenario + " from " + (from_scratch ? "scratch" : ckpt));
  if (rep.insufficient_budget) std::printf("insufficient budget: no full buffer collected\n");
  std::printf("finetune done: %zu iterations, final eval return %.3f success %.2f\n",
              rep.iterations.size(), rep.final_eval.mean_return,
              rep.final_eval.success_rate);
  return 0;
}

int cmd_evaluate(const std::string& scenario, const std::string& ckpt, int episodes,
                 uint64_t seed) {
  ModelParams params = ModelParams::load(ckpt);
  GridEnv env(find_scenario(scenario));
  PPOConfig pc;
  EvalResult r = evaluate(env, params, episodes, seed, pc);
  std::printf("scenario %s: mean return %.4f, success rate %.4f over %d episodes\n",
              scenario.c_str(), r.mean_return, r.success_rate, episodes);
  return 0;
}

int cmd_compare(const std::string& scenario, const std::string& ckpt,
                const std::string& config_path, const std::string& out_dir, int seeds,
                double target_return) {
  RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_file(config_path);
  PPOConfig base = ppo_config_from(cfg);
  if (target_return != 0.0) base.return_thresholds = {target_return};
  const ScenarioDef& def = find_scenario(scenario);
  fs::create_directories(out_dir);
  const bool have_ckpt = !(ckpt.empty() || ckpt == "none");
  write_run_meta(out_dir, cfg, base.seed,
                 have_ckpt ? std::vector<std::string>{ckpt} : std::vector<std::string>{});

  std::ofstream table(out_dir + "/steps_to_threshold.csv", std::ios::app);
  if (table.tellp() == 0) table << "arm,seed,threshold,env_steps\n";
  std::ofstream curves(out_dir + "/curves.csv", std::ios::app);
  if (curves.tellp() == 0) curves << "arm,seed,iteration,env_steps,eval_return,success_rate\n";

  for (int s = 0; s < seeds; ++s) {
    for (const std::string arm : {"pretrained", "scratch"}) {
      if (arm == "pretrained" && !have_ckpt) continue;
      const std::string marker =
          out_dir + "/done_" + arm + "_" + std::to_string(s) + ".json";
      if (fs::exists(marker)) continue;  // resumable at run granularity

      PPOConfig pc = base;
      pc.seed = derive_seed(base.seed, arm + "-" + std::to_string(s));
      ModelParams params = [&] {
        if (arm == "pretrained") return ModelParams::load(ckpt);
        ModelConfig mc = model_config_from(cfg);
        Rng init(derive_seed(pc.seed, "init"));
        return ModelParams::init(mc, init);
      }();

      FinetuneReport rep = finetune(def, params, pc);
      for (const auto& it : rep.iterations) {
        curves << arm << "," << s << "," << it.iteration << "," << it.env_steps << ","
               << it.eval_return << "," << it.eval_success << "\n";
      }
      for (const auto& [t, steps] : rep.steps_to_threshold) {
        table << arm << "," << s << "," << t << ","
              << (steps < 0 ? "inf" : std::to_string(steps)) << "\n";
      }
      std::ofstream done(marker);
      done << json{{"final_return", rep.final_eval.mean_return}}.dump() << "\n";
      std::printf("%s seed %d: final return %.3f\n", arm.c_str(), s,
                  rep.final_eval.mean_return);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-agent decision transformer: offline pre-training and PPO fine-tuning"};
  app.require_subcommand(1);

  std::string scenario, tier = "good", data_dir, config_path, out_path, ckpt;
  int episodes = 100;
  uint64_t seed = 1;
  int seeds = 5;
  double target_return = 0.0;

  auto* gen = app.add_subcommand("gen-data", "roll out a scripted tier and write a dataset");
  gen->add_option("--scenario", scenario)->required();
  gen->add_option("--tier", tier)->check(CLI::IsMember({"poor", "medium", "good"}));
  gen->add_option("--episodes", episodes);
  gen->add_option("--seed", seed);
  gen->add_option("--out", out_path)->required();

  auto* st = app.add_subcommand("stats", "print manifest statistics for a dataset directory");
  st->add_option("--data", data_dir)->required();

  auto* pre = app.add_subcommand("pretrain", "supervised pre-training from datasets");
  pre->add_option("--data", data_dir)->required();
  pre->add_option("--config", config_path);
  pre->add_option("--out", out_path)->required();

  auto* fin = app.add_subcommand("finetune", "PPO fine-tuning, optionally from a checkpoint");
  fin->add_option("--env", scenario)->required();
  fin->add_option("--ckpt", ckpt);
  fin->add_option("--config", config_path);
  fin->add_option("--out", out_path)->required();

  auto* ev = app.add_subcommand("evaluate", "greedy evaluation of a checkpoint");
  ev->add_option("--env", scenario)->required();
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--episodes", episodes);
  ev->add_option("--seed", seed);

  auto* cmp = app.add_subcommand("compare", "matched pretrained vs from-scratch fine-tunes");
  cmp->add_option("--env", scenario)->required();
  cmp->add_option("--ckpt", ckpt);
  cmp->add_option("--config", config_path);
  cmp->add_option("--out", out_path)->required();
  cmp->add_option("--seeds", seeds);
  cmp->add_option("--target-return", target_return);

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_data(scenario, tier, episodes, seed, out_path);
    if (st->parsed()) return cmd_stats(data_dir);
    if (pre->parsed()) return cmd_pretrain(data_dir, config_path, out_path);
    if (fin->parsed()) return cmd_finetune(scenario, ckpt, config_path, out_path);
    if (ev->parsed()) return cmd_evaluate(scenario, ckpt, episodes, seed);
    if (cmp->parsed())
      return cmd_compare(scenario, ckpt, config_path, out_path, seeds, target_return);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical abort: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
