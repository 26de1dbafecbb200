// Command-line front end: train / surgery / attack / eval / inspect.
//
// Exit codes: 0 success, 1 usage error (bad flags, unknown config keys,
// missing required settings), 2 data or format error (unreadable or corrupt
// files, bad labels), 3 numeric failure (diverged training, evaluation
// shortfall, shape faults at run time).

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "linbp/bench.hpp"
#include "linbp/linbp.hpp"
#include "linbp/tensor_io.hpp"

using namespace linbp;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  for (const auto& tok : detail::split_csv_list(s)) out.push_back(std::stoi(tok));
  return out;
}

struct DataFlags {
  std::string data = "synthetic";
  uint64_t data_seed = 7;
  int classes = 10;
  int per_class = 200;
  int img_c = 3, img_h = 16, img_w = 16;
  std::string cifar_files;

  void attach(CLI::App* cmd) {
    cmd->add_option("--data", data, "Data source: synthetic|cifar");
    cmd->add_option("--data-seed", data_seed, "Generator seed for the synthetic pool");
    cmd->add_option("--classes", classes, "Synthetic class count");
    cmd->add_option("--per-class", per_class, "Synthetic samples per class");
    cmd->add_option("--img-c", img_c, "Synthetic image channels");
    cmd->add_option("--img-h", img_h, "Synthetic image height");
    cmd->add_option("--img-w", img_w, "Synthetic image width");
    cmd->add_option("--cifar-files", cifar_files, "Comma-separated CIFAR-10 .bin files");
  }

  Dataset load(const std::string& tag) const {
    if (data == "synthetic")
      return make_synthetic(classes, per_class, {img_c, img_h, img_w}, data_seed, {}, tag);
    if (data == "cifar") {
      if (cifar_files.empty()) throw ConfigError("--cifar-files is required with --data cifar");
      return load_cifar10_bin(detail::split_csv_list(cifar_files), tag);
    }
    throw ConfigError("unknown data source '" + data + "'; expected synthetic|cifar");
  }
};

int cmd_train(const DataFlags& data, const std::string& arch, const TrainSpec& spec,
              const std::string& decay_epochs_csv, int train_per_class, const std::string& out) {
  TrainSpec ts = spec;
  if (!decay_epochs_csv.empty()) ts.decay_epochs = parse_int_list(decay_epochs_csv);
  Dataset pool = data.load("pool");
  auto [train_ds, test_ds] = split_train_test(pool, train_per_class);
  if (train_ds.size() == 0 || test_ds.size() == 0)
    throw ConfigError("train/test split is empty; raise --per-class above --train-per-class");
  Network net = make_zoo_model(arch, train_ds.image_shape(), pool.num_classes);
  Rng init_rng(ts.rng_seed);
  init_params(net, init_rng);
  std::printf("training %s on %d samples (%d test), %d epochs\n", arch.c_str(), train_ds.size(),
              test_ds.size(), ts.epochs);
  TrainResult res = train(net, train_ds, &test_ds, ts);
  for (const auto& m : res.metrics)
    std::printf("epoch %2d  lr %.4f  loss %.4f  train %.4f  test %.4f\n", m.epoch, m.lr,
                m.train_loss, m.train_acc, m.test_acc);
  CheckpointMeta meta;
  meta["arch"] = arch;
  meta["epochs"] = std::to_string(ts.epochs);
  meta["rng_seed"] = std::to_string(ts.rng_seed);
  if (!res.metrics.empty()) {
    meta["final_train_acc"] = detail::fmt_rate(res.metrics.back().train_acc);
    meta["final_test_acc"] = detail::fmt_rate(res.metrics.back().test_acc);
  }
  save_checkpoint(res.net, out, meta);
  std::printf("saved %s\n", out.c_str());
  return 0;
}

int cmd_surgery(const std::string& in, int from_layer, const std::string& out) {
  LoadedCheckpoint ck = load_checkpoint(in);
  SurgeryResult res = lins_remove_relus(ck.net, from_layer);
  if (res.removed == 0)
    std::fprintf(stderr, "warning: no ReLU at or after layer %d; model unchanged\n", from_layer);
  CheckpointMeta meta = ck.meta;
  meta["surgery_from_layer"] = std::to_string(from_layer);
  meta["surgery_removed"] = std::to_string(res.removed);
  save_checkpoint(res.net, out, meta);
  std::printf("removed %d activation(s); saved %s\n", res.removed, out.c_str());
  return 0;
}

int cmd_inspect(const std::string& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  std::printf("%s", checkpoint_descriptor(ck.net, ck.meta).c_str());
  size_t params = 0;
  for (const auto& l : ck.net.layers) {
    std::vector<const Tensor*> ps;
    detail::collect_layer_params(l, ps);
    for (auto* t : ps) params += t->numel();
  }
  std::printf("parameters %zu\n", params);
  return 0;
}

ExperimentConfig merge_config(const std::string& config_path,
                              const std::map<std::string, std::string>& overrides) {
  std::map<std::string, std::string> kv;
  if (!config_path.empty()) kv = read_kv_file(config_path);
  for (const auto& [k, v] : overrides) kv[k] = v;
  return config_from_kv(kv);
}

int cmd_eval(const ExperimentConfig& cfg) {
  EvalReport report = run_eval(cfg);
  std::printf("%-28s %-8s %6s %12s %10s\n", "victim", "role", "n", "fooling_rate", "mean_linf");
  for (const auto& r : report.rows)
    std::printf("%-28s %-8s %6d %12s %10s\n", r.victim_id.c_str(),
                r.is_source ? "source*" : "victim", r.n, detail::fmt_rate(r.fooling_rate).c_str(),
                detail::fmt_linf(r.mean_linf).c_str());
  if (!cfg.report_path.empty()) std::printf("report written to %s\n", cfg.report_path.c_str());
  return 0;
}

int cmd_attack(const ExperimentConfig& cfg, const std::string& out_tensors,
               const std::string& out_meta) {
  if (cfg.source_paths.empty()) throw ConfigError("attack: missing 'source' checkpoint path");
  EvalModels models;
  for (const auto& p : cfg.source_paths) {
    models.sources.push_back(load_checkpoint(p).net);
    models.source_ids.push_back(p);
  }
  for (const auto& p : cfg.victim_paths) {
    models.victims.push_back(load_checkpoint(p).net);
    models.victim_ids.push_back(p);
  }
  Dataset pool;
  if (cfg.data == "synthetic")
    pool = make_synthetic(cfg.classes, cfg.samples_per_class, cfg.img_shape, cfg.data_seed);
  else
    pool = load_cifar10_bin(cfg.cifar_files, "test");

  std::vector<const Network*> filter_models;
  filter_models.push_back(&models.sources[0]);
  for (const auto& v : models.victims) filter_models.push_back(&v);
  std::vector<std::vector<int>> preds;
  for (const Network* m : filter_models) preds.push_back(predict_batch(*m, pool.images));

  std::vector<int> order(pool.size());
  for (int i = 0; i < pool.size(); ++i) order[i] = i;
  Rng sel_rng = Rng::for_stream(cfg.rng_seed, 2);
  sel_rng.shuffle(order);
  std::vector<int> chosen;
  for (int idx : order) {
    bool ok = true;
    if (cfg.filter_correct)
      for (size_t m = 0; m < preds.size() && ok; ++m) ok = preds[m][idx] == pool.labels[idx];
    if (ok) chosen.push_back(idx);
    if (static_cast<int>(chosen.size()) == cfg.sample_count) break;
  }
  if (static_cast<int>(chosen.size()) < cfg.sample_count)
    throw EvalError("sample shortfall: requested " + std::to_string(cfg.sample_count) +
                    ", only " + std::to_string(chosen.size()) + " available");

  const std::vector<int> ishape = pool.image_shape();
  Tensor stack({cfg.sample_count, ishape[0], ishape[1], ishape[2]});
  const size_t stride = Tensor::checked_numel(ishape);
  std::FILE* meta_f = nullptr;
  if (!out_meta.empty()) {
    meta_f = std::fopen(out_meta.c_str(), "w");
    if (!meta_f) throw IoError("cannot write " + out_meta);
    std::fprintf(meta_f, "pool_index,label,pred_clean,pred_adv,linf\n");
  }
  int fooled = 0;
  for (int i = 0; i < cfg.sample_count; ++i) {
    const Tensor x = pool.image(chosen[i]);
    const int y = pool.labels[chosen[i]];
    const AdvResult adv = detail::craft_sample(models, cfg, cfg.attack, x, y,
                                               cfg.rng_seed + static_cast<uint64_t>(i));
    std::copy(adv.x_adv.data.begin(), adv.x_adv.data.end(), stack.data.begin() + i * stride);
    fooled += adv.source_fooled;
    if (meta_f)
      std::fprintf(meta_f, "%d,%d,%d,%d,%.6f\n", chosen[i], y, predict(models.sources[0], x),
                   predict(models.sources[0], adv.x_adv), adv.achieved_linf);
  }
  if (meta_f) std::fclose(meta_f);
  save_tensor(stack, out_tensors);
  std::printf("crafted %d adversarial examples, source fooling %.4f, saved %s\n", cfg.sample_count,
              static_cast<double>(fooled) / cfg.sample_count, out_tensors.c_str());
  return 0;
}

// Registers one override-able config option; only values the user actually
// set are merged over the config file.
void add_kv_option(CLI::App* cmd, std::map<std::string, std::string>& sink, const std::string& key,
                   const std::string& help) {
  cmd->add_option_function<std::string>(
      "--" + key, [&sink, key](const std::string& v) { sink[key] = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transfer-attack workbench: model training, surgery, attacks, evaluation"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a zoo model and save a checkpoint");
  DataFlags train_data;
  train_data.attach(train_cmd);
  std::string arch = "convnet";
  TrainSpec tspec;
  std::string decay_csv;
  int train_per_class = 150;
  std::string train_out = "model.ckpt";
  train_cmd->add_option("--arch", arch, "convnet|convnet_wide|resnet_small|mlp");
  train_cmd->add_option("--epochs", tspec.epochs, "Training epochs");
  train_cmd->add_option("--batch", tspec.batch_size, "Batch size");
  train_cmd->add_option("--lr", tspec.learning_rate, "Initial learning rate");
  train_cmd->add_option("--momentum", tspec.momentum, "SGD momentum");
  train_cmd->add_option("--weight-decay", tspec.weight_decay, "Weight decay");
  train_cmd->add_option("--decay-epochs", decay_csv, "Comma list of epochs where lr decays");
  train_cmd->add_option("--decay-factor", tspec.decay_factor, "Learning-rate decay factor");
  train_cmd->add_option("--freeze-prefix", tspec.freeze_prefix,
                        "Freeze parameters of layers below this id");
  train_cmd->add_flag("--augment", tspec.augment, "Horizontal flip + random crop");
  train_cmd->add_option("--seed", tspec.rng_seed, "Training seed (init, shuffle)");
  train_cmd->add_option("--train-per-class", train_per_class,
                        "Samples per class for the train split; the rest go to test");
  train_cmd->add_option("--out", train_out, "Checkpoint output path");

  // surgery
  auto* surgery_cmd = app.add_subcommand("surgery", "Remove ReLUs from a checkpointed model");
  std::string surgery_in, surgery_out = "surgated.ckpt";
  int from_layer = 0;
  surgery_cmd->add_option("--in", surgery_in, "Input checkpoint")->required();
  surgery_cmd->add_option("--from-layer", from_layer, "Remove ReLUs at/after this layer id")
      ->required();
  surgery_cmd->add_option("--out", surgery_out, "Output checkpoint");

  // attack
  auto* attack_cmd = app.add_subcommand("attack", "Craft and save adversarial tensors");
  std::string attack_config;
  std::map<std::string, std::string> attack_kv;
  std::string attack_out = "adv.lbpt", attack_meta;
  attack_cmd->add_option("--config", attack_config, "Flat key=value config file");
  for (const auto& key : experiment_config_keys())
    add_kv_option(attack_cmd, attack_kv, key, "config key (overrides --config)");
  attack_cmd->add_option("--out", attack_out, "Adversarial tensor output (LBPT)");
  attack_cmd->add_option("--meta-out", attack_meta, "Optional per-sample csv");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Transferability evaluation harness");
  std::string eval_config;
  std::map<std::string, std::string> eval_kv;
  eval_cmd->add_option("--config", eval_config, "Flat key=value config file");
  for (const auto& key : experiment_config_keys())
    add_kv_option(eval_cmd, eval_kv, key, "config key (overrides --config)");

  // inspect
  auto* inspect_cmd = app.add_subcommand("inspect", "Print checkpoint architecture and metadata");
  std::string inspect_path;
  inspect_cmd->add_option("--ckpt", inspect_path, "Checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train_cmd) return cmd_train(train_data, arch, tspec, decay_csv, train_per_class, train_out);
    if (*surgery_cmd) return cmd_surgery(surgery_in, from_layer, surgery_out);
    if (*attack_cmd) return cmd_attack(merge_config(attack_config, attack_kv), attack_out, attack_meta);
    if (*eval_cmd) return cmd_eval(merge_config(eval_config, eval_kv));
    if (*inspect_cmd) return cmd_inspect(inspect_path);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  } catch (const SplitError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const IntegrityError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const VersionError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const IndexError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  }
  return 0;
}
