// Copyright 2026 The MaskAlign Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "maskalign/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <random>
#include <string>

#include "maskalign/maskalign.hpp"

namespace maskalign {
namespace {

std::string or_default(const std::string& value, const std::string& fallback) {
  return value.empty() ? fallback : value;
}

Dataset load_split(const RunConfig& rc, bool train_split, std::size_t limit) {
  const std::string dir = rc.str("data_dir");
  if (dir.empty()) throw ConfigError("data_dir is not set");
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("data directory '" + dir + "' does not exist");
  if (train_split) {
    Dataset d;
    for (int i = 1; i <= 5 && d.size() < limit; ++i) {
      d.append(load_cifar10_file((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string()));
    }
    return d.head(limit);
  }
  return load_cifar10_file((fs::path(dir) / "test_batch.bin").string()).head(limit);
}

ViT<float> load_backbone(const RunConfig& rc) {
  const std::string path = rc.str("checkpoint");
  if (path.empty()) throw ConfigError("checkpoint is not set (use a path, or 'random' for a fresh encoder)");
  if (path == "random") {
    std::mt19937_64 rng(rc.integer("seed"));
    return ViT<float>::init(rc.vit_config(), rng);
  }
  return vit_from_checkpoint(load_checkpoint(path));
}

void log_epoch(std::ostream& err, const char* phase, const EpochLog& log) {
  err << phase << " epoch " << log.epoch + 1 << " loss " << log.mean_loss;
  if (log.accuracy) err << " acc " << *log.accuracy;
  err << "\n";
}

int cmd_train_teacher(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const auto cfg = rc.train_config();
  const auto vit_cfg = rc.vit_config();
  Dataset train = load_split(rc, true, rc.size("train_subset"));
  Dataset val = load_split(rc, false, rc.size("val_subset"));
  auto result = train_teacher(vit_cfg, cfg, train, val, [&](const EpochLog& l) { log_epoch(err, "teacher", l); });
  const std::string path = or_default(rc.str("output"), "teacher.ckpt");
  save_checkpoint(path, result.checkpoint);
  out << "val_accuracy " << result.val_accuracy << "\ncheckpoint " << path << "\n";
  return kExitOk;
}

int cmd_pretrain(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const auto cfg = rc.train_config();
  const auto vit_cfg = rc.vit_config();
  const std::string teacher_path = rc.str("teacher");
  if (teacher_path.empty()) throw ConfigError("teacher is not set");
  FrozenTeacher teacher = FrozenTeacher::load(teacher_path);
  Dataset train = load_split(rc, true, rc.size("train_subset"));
  auto result = pretrain(vit_cfg, cfg, teacher, train, [&](const EpochLog& l) { log_epoch(err, "pretrain", l); });
  const std::string path = or_default(rc.str("output"), "student.ckpt");
  const std::string trace = or_default(rc.str("trace"), path + ".loss.csv");
  save_checkpoint(path, result.student);
  save_checkpoint(path + ".align", result.alignment_head);
  write_trace_csv(trace, result.trace);
  out << "steps " << result.total_steps << "\ncheckpoint " << path << "\ntrace " << trace << "\n";
  return kExitOk;
}

int cmd_probe(const RunConfig& rc, std::ostream& out, std::ostream&) {
  const auto cfg = rc.train_config();
  ViT<float> backbone = load_backbone(rc);
  Dataset train = load_split(rc, true, rc.size("train_subset"));
  Dataset test = load_split(rc, false, rc.size("test_subset"));
  auto result = linear_probe(backbone, train, test, cfg);
  out << "probe_accuracy " << result.accuracy << "\ntrain_accuracy " << result.train_accuracy << "\n";
  return kExitOk;
}

int cmd_finetune(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const auto cfg = rc.train_config();
  ViT<float> backbone = load_backbone(rc);
  Dataset train = load_split(rc, true, rc.size("train_subset"));
  Dataset test = load_split(rc, false, rc.size("test_subset"));
  auto result = finetune(backbone, train, test, cfg, [&](const EpochLog& l) { log_epoch(err, "finetune", l); });
  const std::string path = or_default(rc.str("output"), "finetuned.ckpt");
  save_checkpoint(path, result.checkpoint);
  out << "finetune_accuracy " << result.accuracy << "\ncheckpoint " << path << "\n";
  return kExitOk;
}

int cmd_export_attn(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  ViT<float> vit = load_backbone(rc);
  const std::size_t index = rc.size("image_index");
  Dataset test = load_split(rc, false, index + 1);
  if (index >= test.size()) throw ConfigError("image_index " + std::to_string(index) + " is past the test split");
  AttentionMap map = attention_map(vit, test.image(index));
  if (map.degenerate) err << "warning: constant attention map, writing all zeros\n";
  const std::string path = or_default(rc.str("output"), "attention.pgm");
  write_pgm(path, map.image);
  out << "attention " << path << " " << map.image.width << "x" << map.image.height << "\n";
  return kExitOk;
}

int cmd_bench_cost(const RunConfig& rc, std::ostream& out, std::ostream&) {
  const Paradigm paradigm = parse_paradigm(rc.str("paradigm"));
  const CostReport r = bench_cost(rc.cost_dims(), rc.real("mask_ratio"), paradigm, rc.size("repeats"),
                                  rc.integer("seed"));
  const std::string csv = cost_csv_header() + "\n" + cost_csv_row(r) + "\n";
  out << csv;
  if (!rc.str("output").empty()) {
    std::ofstream f(rc.str("output"), std::ios::trunc);
    if (!f) throw IoError("cannot open '" + rc.str("output") + "' for writing");
    f << csv;
  }
  return kExitOk;
}

const char* describe(const std::string& command) {
  static const std::map<std::string, const char*> d{
      {"train-teacher", "Supervised training of the frozen teacher encoder"},
      {"pretrain", "Masked feature-alignment pretraining of a student against a teacher"},
      {"probe", "Linear probe on frozen features of a checkpoint (or 'random')"},
      {"finetune", "End-to-end fine-tuning with layer-wise lr decay"},
      {"export-attn", "Write the last block's [CLS] attention for one test image as PGM"},
      {"bench-cost", "Analytic and measured encoder cost for one paradigm, as CSV"},
  };
  return d.at(command);
}

int dispatch(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const std::string& c = rc.command();
  if (c == "train-teacher") return cmd_train_teacher(rc, out, err);
  if (c == "pretrain") return cmd_pretrain(rc, out, err);
  if (c == "probe") return cmd_probe(rc, out, err);
  if (c == "finetune") return cmd_finetune(rc, out, err);
  if (c == "export-attn") return cmd_export_attn(rc, out, err);
  if (c == "bench-cost") return cmd_bench_cost(rc, out, err);
  throw UsageError("unknown command '" + c + "'");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked feature-alignment pretraining for small vision transformers", "maskalign"};
  app.require_subcommand(1);

  struct Sub {
    CLI::App* app;
    std::string config_file;
    std::map<std::string, std::string> overrides;
  };
  std::map<std::string, Sub> subs;
  for (const auto& name : run_commands()) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, describe(name));
    s.app->add_option("--config", s.config_file, "key = value configuration file");
    const RunConfig defaults = RunConfig::defaults(name);
    for (const auto& [key, value] : defaults.values()) {
      std::string dashed = key;
      for (auto& ch : dashed)
        if (ch == '_') ch = '-';
      std::string names = "--" + key;
      if (dashed != key) names += ",--" + dashed;
      s.app->add_option(names, s.overrides[key], "default: " + (value.empty() ? std::string("(unset)") : value));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  for (auto& [name, s] : subs) {
    if (!s.app->parsed()) continue;
    try {
      RunConfig rc = RunConfig::defaults(name);
      if (!s.config_file.empty()) rc.apply_file(s.config_file);
      for (const auto& [key, value] : s.overrides) {
        if (s.app->get_option("--" + key)->count() > 0) rc.set(key, value);
      }
      err << "# resolved config for " << name << "\n" << rc.resolved_text();
      return dispatch(rc, out, err);
    } catch (const UsageError& e) {
      err << "error: " << e.what() << "\n";
      return kExitUsage;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kExitFailure;
    }
  }
  return kExitUsage;
}

}  // namespace maskalign
