#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "joadaa/ablation.hpp"
#include "joadaa/checkpoint.hpp"
#include "joadaa/evaluation.hpp"
#include "joadaa/report.hpp"
#include "joadaa/synth_data.hpp"
#include "joadaa/training.hpp"

namespace joadaa {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitIo = 3, kExitNumeric = 4, kExitVersion = 5 };

namespace cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct Flags {
  std::string config;
  std::string dataset;
  std::string out;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::string horizons;
  std::string memory_mode;
  std::string head;
  bool no_anticipation = false;
  bool resume = false;
  bool oracle = false;
  int stop_after_epoch = 0;
  int videos = 4;
  std::vector<std::string> runs;
};

inline std::vector<int> parse_horizons(const std::string& text, std::vector<int> fallback) {
  if (text.empty()) return fallback;
  std::vector<int> out;
  for (const auto& part : KeyValueConfig::split(text, ',')) {
    const int h = KeyValueConfig::parse_value<int>("--horizons", part);
    if (h < 1) throw ConfigError("--horizons entries must be >= 1");
    out.push_back(h);
  }
  if (out.empty()) throw ConfigError("--horizons is empty");
  return out;
}

/// Config file (if any) with command-line overrides applied on top.
inline KeyValueConfig resolved_config(const Flags& f) {
  KeyValueConfig kv;
  if (!f.config.empty()) kv = KeyValueConfig::load(f.config);
  if (!f.memory_mode.empty()) kv.set("memory_mode", to_string(parse_memory_mode(f.memory_mode)));
  if (!f.head.empty()) kv.set("head", to_string(parse_head_type(f.head)));
  if (f.no_anticipation) {
    kv.set("anticipation_frames", "0");
    kv.set("w_anticipation", "0");
  }
  return kv;
}

inline json config_json(const KeyValueConfig& kv) {
  json j = json::object();
  for (const auto& [k, v] : kv.entries()) {
    if (!j.contains(k)) {
      j[k] = v;
    } else {
      if (!j[k].is_array()) j[k] = json::array({j[k]});
      j[k].push_back(v);
    }
  }
  return j;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void prepare_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + out.string());
}

inline void write_manifest(const fs::path& out, const std::string& command, const KeyValueConfig& kv,
                           std::optional<std::uint64_t> seed, const json& artifacts) {
  json m;
  m["command"] = command;
  m["config"] = config_json(kv);
  m["seed"] = seed ? json(*seed) : json(nullptr);
  // Paths inside the output directory are stored relative to it.
  json rel = artifacts;
  const fs::path base = out.lexically_normal();
  for (auto& [k, v] : rel.items()) {
    auto fix = [&](json& x) {
      if (!x.is_string()) return;
      const fs::path p = fs::path(x.get<std::string>()).lexically_normal();
      const fs::path r = p.lexically_relative(base);
      if (!r.empty() && *r.begin() != "..") x = r.string();
    };
    if (v.is_array()) {
      for (auto& e : v) fix(e);
    } else {
      fix(v);
    }
  }
  m["artifacts"] = rel;
  m["tool_version"] = kToolVersion;
  write_text(out / "manifest.json", m.dump(2) + "\n");
}

inline void require_flag(const std::string& value, const std::string& name) {
  if (value.empty()) throw ConfigError("missing required flag " + name);
}

/// Model config for a dataset: shape keys come from the data, and the head
/// defaults to softmax for sparse data and sigmoid for dense data.
inline ModelConfig model_config_for(const KeyValueConfig& kv, const Dataset& data) {
  ModelConfig mc = ModelConfig::read(kv);
  const int dim = data.train.front().features.feature_dim();
  if (kv.has("feature_dim") && mc.feature_dim != dim)
    throw ConfigError("config feature_dim " + std::to_string(mc.feature_dim) + " differs from dataset feature_dim " +
                      std::to_string(dim));
  if (kv.has("num_classes") && mc.num_classes != data.vocab.num_classes())
    throw ConfigError("config num_classes differs from the dataset vocabulary size");
  mc.feature_dim = dim;
  mc.num_classes = data.vocab.num_classes();
  if (!kv.has("head_mode"))
    mc.head_mode = data.density() == DensityMode::sparse ? HeadMode::softmax : HeadMode::sigmoid;
  mc.validate();
  return mc;
}

inline void append_line(const fs::path& p, const std::string& line) {
  std::ofstream out(p, std::ios::app);
  if (!out) throw IoError("cannot append to " + p.string());
  out << line << "\n";
}

/// Keeps the first `n` lines of a text file.
inline void truncate_lines(const fs::path& p, int n) {
  std::istringstream in(fs::exists(p) ? read_text(p) : std::string());
  std::string kept, line;
  for (int i = 0; i < n && std::getline(in, line); ++i) kept += line + "\n";
  write_text(p, kept);
}

inline int cmd_gen_data(const Flags& f, std::ostream& out) {
  require_flag(f.config, "--config");
  require_flag(f.out, "--out");
  KeyValueConfig kv = resolved_config(f);
  if (f.seed) kv.set_value("data_seed", *f.seed);
  const auto cfg = DatasetConfig::read(kv);
  const fs::path root(f.out);
  prepare_out(root);
  write_manifest(root, "gen-data", kv, cfg.seed,
                 {{"dataset", root.string()}, {"train", (root / "train").string()}, {"test", (root / "test").string()}});
  const Dataset ds = make_dataset(cfg);
  write_dataset(root, ds, kv);
  out << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test videos to " << root.string() << "\n";
  return kExitOk;
}

inline int cmd_train(const Flags& f, std::ostream& out) {
  require_flag(f.dataset, "--dataset");
  require_flag(f.out, "--out");
  KeyValueConfig kv = resolved_config(f);
  if (f.seed) kv.set_value("seed", *f.seed);
  const Dataset data = load_dataset(f.dataset);
  const ModelConfig mc = model_config_for(kv, data);
  const TrainConfig tc = TrainConfig::read(kv);
  tc.validate();
  const int eval_every = kv.get_or("eval_every", 1);
  const fs::path root(f.out);
  const fs::path last = root / "last.ckpt", final_ck = root / "model.ckpt", log = root / "metrics.jsonl";
  prepare_out(root);
  write_manifest(root, "train", kv, tc.seed,
                 {{"dataset", f.dataset}, {"checkpoint", final_ck.string()}, {"last_checkpoint", last.string()},
                  {"metrics", log.string()}});

  Trainer<float> trainer(mc, tc, data.train);
  if (f.resume) {
    if (!fs::exists(last)) throw IoError("--resume: no checkpoint at " + last.string());
    trainer.restore(read_checkpoint(last));
    truncate_lines(log, trainer.epochs_done());
    out << "resumed at epoch " << trainer.epochs_done() << "\n";
  } else {
    write_text(log, "");
  }
  while (!trainer.finished()) {
    EpochRecord rec = trainer.run_epoch();
    if (eval_every > 0 && (rec.epoch % eval_every == 0 || trainer.finished())) {
      ModelPredictor<float> pred(trainer.model());
      rec.eval_map = streaming_eval<float>(pred, data.test, streaming_options_for(mc, {})).oad.mAP;
    }
    append_line(log, rec.to_json_line());
    write_checkpoint(last, trainer.state());
    out << rec.to_json_line() << "\n";
    if (f.stop_after_epoch > 0 && rec.epoch >= f.stop_after_epoch && !trainer.finished()) {
      out << "stopped after epoch " << rec.epoch << "\n";
      return kExitOk;
    }
  }
  write_checkpoint(final_ck, trainer.state());
  out << "wrote " << final_ck.string() << "\n";
  return kExitOk;
}

/// Loads a checkpoint's model, refusing flags/config that contradict it.
inline std::unique_ptr<JoadaaModel<float>> load_model(const Flags& f, const KeyValueConfig& kv) {
  const Checkpoint ck = read_checkpoint(f.checkpoint);
  const ModelConfig stored = ModelConfig::read(ck.config);
  if (!(ModelConfig::read(kv, stored) == stored))
    throw VersionError("requested model settings do not match checkpoint " + f.checkpoint);
  auto model = std::make_unique<JoadaaModel<float>>(stored, 0);
  load_parameters(ck, *model);
  return model;
}

inline json report_json(const EvalReport& r) {
  json j;
  j["horizon"] = r.horizon;
  j["mAP"] = r.mAP;
  j["num_frames_evaluated"] = r.num_frames_evaluated;
  json ap = json::array();
  for (double x : r.per_class_ap) ap.push_back(std::isnan(x) ? json(nullptr) : json(x));
  j["per_class_ap"] = ap;
  j["excluded_classes"] = r.excluded_classes;
  return j;
}

inline int cmd_eval(const Flags& f, std::ostream& out) {
  require_flag(f.dataset, "--dataset");
  require_flag(f.out, "--out");
  if (!f.oracle) require_flag(f.checkpoint, "--checkpoint");
  const KeyValueConfig kv = resolved_config(f);
  const auto horizons = parse_horizons(f.horizons, {1, 2, 4, 6});
  const Dataset data = load_dataset(f.dataset);
  const fs::path root(f.out);
  prepare_out(root);
  write_manifest(root, "eval", kv, f.seed,
                 {{"dataset", f.dataset}, {"checkpoint", f.checkpoint}, {"eval", (root / "eval.json").string()},
                  {"table", (root / "eval.txt").string()}});
  StreamingOptions opt;
  opt.horizons = horizons;
  opt.horizon_counts_current = kv.get_or("horizon_counts_current", false);
  StreamingResult res;
  if (f.oracle) {
    const ModelConfig mc = ModelConfig::read(kv);
    opt.memory_mode = mc.memory_mode;
    opt.long_capacity = mc.long_capacity;
    opt.short_capacity = mc.short_capacity;
    const int nf = *std::max_element(horizons.begin(), horizons.end());
    res = streaming_eval<float>(OraclePredictor(data.test, nf), data.test, opt);
  } else {
    const auto model = load_model(f, kv);
    const auto& mc = model->config();
    if (mc.num_classes != data.vocab.num_classes() || mc.feature_dim != data.test.front().features.feature_dim())
      throw VersionError("checkpoint shape does not match dataset " + f.dataset);
    opt.memory_mode = mc.memory_mode;
    opt.long_capacity = mc.long_capacity;
    opt.short_capacity = mc.short_capacity;
    res = streaming_eval<float>(ModelPredictor<float>(*model), data.test, opt);
  }
  json j;
  j["oad"] = report_json(res.oad);
  j["aa"] = json::array();
  for (const auto& [h, rep] : res.aa) j["aa"].push_back(report_json(rep));
  j["actions"] = data.vocab.actions();
  write_text(root / "eval.json", j.dump(2) + "\n");
  const std::string table = format_report_table(res, data.vocab);
  write_text(root / "eval.txt", table);
  out << table;
  return kExitOk;
}

inline AblationSpec ablation_spec(const Flags& f, const KeyValueConfig& kv, const Dataset& data) {
  AblationSpec spec;
  spec.model = model_config_for(kv, data);
  spec.train = TrainConfig::read(kv);
  spec.train.validate();
  spec.horizons = parse_horizons(f.horizons, {1, 2, 4, 6});
  if (kv.has("seeds")) {
    spec.seeds.clear();
    for (const auto& s : KeyValueConfig::split(kv.require_string("seeds"), ','))
      spec.seeds.push_back(KeyValueConfig::parse_value<std::uint64_t>("seeds", s));
  }
  if (f.seed) {
    spec.seeds.clear();
    for (std::uint64_t i = 0; i < 5; ++i) spec.seeds.push_back(*f.seed + i);
  }
  if (kv.has("cell")) {
    spec.cells.clear();
    for (const auto& c : kv.get_all("cell")) spec.cells.push_back(AblationCell::parse(c));
  }
  std::erase_if(spec.cells, [&](const AblationCell& c) {
    return (!f.memory_mode.empty() && c.memory != parse_memory_mode(f.memory_mode)) ||
           (!f.head.empty() && c.head != parse_head_type(f.head)) || (f.no_anticipation && c.anticipation);
  });
  if (spec.cells.empty()) throw ConfigError("no ablation cells left after applying flags");
  spec.threads = threads_from_env();
  return spec;
}

inline int cmd_ablate(const Flags& f, std::ostream& out) {
  require_flag(f.config, "--config");
  require_flag(f.out, "--out");
  KeyValueConfig kv = KeyValueConfig::load(f.config);
  const fs::path root(f.out);
  prepare_out(root);
  const fs::path data_dir = f.dataset.empty() ? root / "dataset" : fs::path(f.dataset);
  write_manifest(root, "ablate", kv, f.seed,
                 {{"dataset", data_dir.string()}, {"table", (root / "ablation.csv").string()},
                  {"summary", (root / "ablation.md").string()}});
  Dataset data;
  if (f.dataset.empty()) {
    data = make_dataset(DatasetConfig::read(kv));
    write_dataset(data_dir, data, kv);
  } else {
    data = load_dataset(data_dir);
  }
  // Model flags select cells here rather than overriding config keys.
  const AblationSpec spec = ablation_spec(f, kv, data);
  const auto rows = run_ablation(data, spec, [&](const AblationRow& r) {
    out << r.cell << " seed " << r.seed << ": OAD mAP " << r.oad_map << "\n";
  });
  const std::string csv = ablation_csv(rows, spec.horizons);
  write_text(root / "ablation.csv", csv);
  write_text(root / "ablation.md", ablation_markdown(parse_ablation_csv(csv)));
  out << ablation_markdown(parse_ablation_csv(csv));
  return kExitOk;
}

inline int cmd_report(const Flags& f, std::ostream& out) {
  require_flag(f.out, "--out");
  if (f.runs.empty() && f.checkpoint.empty()) throw ConfigError("report needs --runs or --checkpoint");
  const fs::path root(f.out);
  prepare_out(root);
  const KeyValueConfig kv = resolved_config(f);
  json artifacts = json::object();
  if (!f.runs.empty()) artifacts["tables"] = {(root / "ablation.csv").string(), (root / "ablation.md").string()};
  if (!f.checkpoint.empty()) artifacts["timelines"] = (root / "timelines").string();
  write_manifest(root, "report", kv, f.seed, artifacts);

  if (!f.runs.empty()) {
    AblationTable merged;
    for (const auto& run : f.runs) {
      const auto t = parse_ablation_csv(read_text(fs::path(run) / "ablation.csv"));
      if (merged.rows.empty()) merged.horizons = t.horizons;
      else if (merged.horizons != t.horizons) throw ConfigError("ablation runs use different horizon columns");
      merged.rows.insert(merged.rows.end(), t.rows.begin(), t.rows.end());
    }
    if (!f.horizons.empty()) merged.horizons = parse_horizons(f.horizons, {});
    write_text(root / "ablation.csv", ablation_csv(merged.rows, merged.horizons));
    write_text(root / "ablation.md", ablation_markdown(merged));
    out << "ablation rows: " << merged.rows.size() << "\n";
  }
  if (!f.checkpoint.empty()) {
    require_flag(f.dataset, "--dataset");
    const Dataset data = load_dataset(f.dataset);
    const auto model = load_model(f, kv);
    const auto& mc = model->config();
    std::vector<int> horizons = parse_horizons(f.horizons, {std::min(6, mc.anticipation_frames)});
    if (mc.anticipation_frames == 0) horizons.clear();
    ModelPredictor<float> pred(*model);
    fs::create_directories(root / "timelines");
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(std::max(f.videos, 0)), data.test.size());
    for (std::size_t v = 0; v < count; ++v) {
      const auto& video = data.test[v];
      const Eigen::Index n = video.num_frames();
      MemoryBank<float> bank(mc.long_capacity, mc.short_capacity, mc.feature_dim);
      std::vector<TimelineBand> bands{{"ground truth", video.timeline.labels.cast<double>()},
                                      {"online detection", Matrix<double>::Zero(n, mc.num_classes)}};
      for (int h : horizons) {
        if (h > mc.anticipation_frames) throw ConfigError("horizon exceeds the model's anticipation frames");
        bands.push_back({"anticipation @" + std::to_string(h), Matrix<double>::Zero(n, mc.num_classes)});
      }
      for (Eigen::Index t = 0; t < n; ++t) {
        bank.push(RowVector<float>(video.features.features.row(t)));
        const auto fs_ = pred(bank.window(mc.memory_mode), StreamContext{v, t});
        bands[1].values.row(t) = fs_.online;
        for (std::size_t i = 0; i < horizons.size(); ++i)
          if (t + horizons[i] < n) bands[2 + i].values.row(t + horizons[i]) = fs_.anticipation.row(horizons[i]);
      }
      write_text(root / "timelines" / (video.id + ".svg"), render_timeline_svg(video.id, bands, data.vocab));
    }
    out << "timelines: " << count << "\n";
  }
  return kExitOk;
}

}  // namespace cli

/// Entry point shared by the tool and the tests. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Joint online action detection and anticipation toolkit"};
  app.require_subcommand(1);
  cli::Flags f;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "key = value config file");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--seed", f.seed, "seed override");
  };
  auto model_flags = [&](CLI::App* sub) {
    sub->add_option("--memory-mode", f.memory_mode, "short or long_short");
    sub->add_flag("--no-anticipation", f.no_anticipation, "disable anticipation queries and loss");
    sub->add_option("--head", f.head, "fused or fc");
  };
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  common(gen);
  auto* trn = app.add_subcommand("train", "train a model");
  common(trn);
  model_flags(trn);
  trn->add_option("--dataset", f.dataset, "dataset directory");
  trn->add_flag("--resume", f.resume, "continue from <out>/last.ckpt");
  trn->add_option("--stop-after-epoch", f.stop_after_epoch)->group("");
  auto* ev = app.add_subcommand("eval", "streaming evaluation of a checkpoint");
  common(ev);
  model_flags(ev);
  ev->add_option("--dataset", f.dataset, "dataset directory");
  ev->add_option("--checkpoint", f.checkpoint, "checkpoint file");
  ev->add_option("--horizons", f.horizons, "comma-separated anticipation horizons");
  ev->add_flag("--oracle", f.oracle, "score ground truth instead of a model");
  auto* abl = app.add_subcommand("ablate", "train and evaluate the comparison grid");
  common(abl);
  model_flags(abl);
  abl->add_option("--dataset", f.dataset, "existing dataset directory");
  abl->add_option("--horizons", f.horizons, "comma-separated anticipation horizons");
  auto* rep = app.add_subcommand("report", "render tables and timeline figures");
  common(rep);
  rep->add_option("--runs", f.runs, "ablation output directories");
  rep->add_option("--checkpoint", f.checkpoint, "checkpoint for timeline figures");
  rep->add_option("--dataset", f.dataset, "dataset directory");
  rep->add_option("--horizons", f.horizons, "comma-separated anticipation horizons");
  rep->add_option("--videos", f.videos, "number of test videos to draw");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cli::cmd_gen_data(f, out);
    if (trn->parsed()) return cli::cmd_train(f, out);
    if (ev->parsed()) return cli::cmd_eval(f, out);
    if (abl->parsed()) return cli::cmd_ablate(f, out);
    return cli::cmd_report(f, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const VersionError& e) {
    err << "version mismatch: " << e.what() << "\n";
    return kExitVersion;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace joadaa
