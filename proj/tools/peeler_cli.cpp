// peeler: command-line front end.
//
//   peeler gen-data  [--classes C --dim D --samples S --within-std s --seed n] [--out file]
//   peeler train     [--preset p] [--config file] [--set key=value ...] [--seed n] [--out dir] [--resume ckpt]
//   peeler eval      --checkpoint ckpt [--episodes n --way N --shot K --query Q --open-way M --open-query Qo]
//                    [--seed n] [--workers w] [--out dir]
//   peeler sweep     [train options] --axis name --values v1,v2,... [--open-total T]
//   peeler inspect   ckpt-or-run-dir
//
// Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical
// abort, 1 anything else.

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "peeler/peeler.hpp"

namespace fs = std::filesystem;
using namespace peeler;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

fs::path out_root() {
  const char* env = std::getenv("PEELER_OUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Advisory lock: one writer per run directory. A lock left by a dead process
// is taken over.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const auto pid = std::to_string(::getpid()) + "\n";
        if (::write(fd, pid.data(), pid.size()) < 0) {
          ::close(fd);
          throw Error("cannot write lock file " + path_.string());
        }
        ::close(fd);
        return;
      }
      if (errno != EEXIST) throw Error("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
      long owner = 0;
      std::ifstream(path_) >> owner;
      if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno != ESRCH)) {
        throw Error("run directory " + dir.string() + " is locked by process " + std::to_string(owner));
      }
      fs::remove(path_);
    }
    throw Error("cannot acquire lock " + path_.string());
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

// Options shared by train and sweep.
struct ConfigArgs {
  std::string preset = "desk";
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> workers;

  void attach(CLI::App* app) {
    app->add_option("--preset", preset, "base preset (desk, paper-fewshot, paper-largescale)");
    app->add_option("--config", config_path, "key = value config file applied on top of the preset");
    app->add_option("--set", sets, "override one key, key=value (repeatable)");
    app->add_option("--seed", seed, "base seed");
    app->add_option("--out", out, "run directory");
    app->add_option("--workers", workers, "evaluation worker threads");
  }

  TrainConfig resolve() const {
    TrainConfig cfg = peeler::preset(preset);
    if (!config_path.empty()) cfg = load_config(config_path, cfg);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (!out.empty()) cfg.out = out;
    if (workers) cfg.workers = *workers;
    cfg.validate();
    return cfg;
  }
};

fs::path run_dir_for(const TrainConfig& cfg, const std::string& verb) {
  if (!cfg.out.empty()) return cfg.out;
  return out_root() / (verb + "-" + config_hash(cfg).substr(0, 12));
}

void write_config_echo(const fs::path& dir, const TrainConfig& cfg) {
  write_file(dir / "config.txt", "# config_hash " + config_hash(cfg) + "\n" + serialize_config(cfg));
}

// Trains into `dir`; writes the stream, periodic checkpoints, the final
// checkpoint and a summary.
TrainLoopState run_training(const TrainConfig& cfg, const Workspace& ws, const fs::path& dir,
                            std::optional<TrainLoopState> resumed = std::nullopt) {
  fs::create_directories(dir);
  write_config_echo(dir, cfg);
  const bool resuming = resumed.has_value();
  TrainLoopState state = resuming ? std::move(*resumed) : init_train_state(cfg, ws);

  std::ofstream stream(dir / "train.jsonl", resuming ? std::ios::app : std::ios::trunc);
  if (!stream) throw DataError("cannot write " + (dir / "train.jsonl").string());
  TrainHooks hooks;
  hooks.on_log = [&](const TrainRecord& r) {
    stream << train_record_json(r).dump() << '\n' << std::flush;
    std::printf("episode %6llu/%llu  lr %.1e  ce %.4f  open %.4f  total %.4f\n",
                static_cast<unsigned long long>(r.episode), static_cast<unsigned long long>(cfg.episodes), r.lr,
                r.closed_ce, r.open_entropy_term, r.total);
    std::fflush(stdout);
  };
  hooks.on_checkpoint = [&](const TrainLoopState& s) {
    fs::create_directories(dir / "checkpoints");
    char name[64];
    std::snprintf(name, sizeof name, "episode-%06llu.ckpt", static_cast<unsigned long long>(s.episode));
    save_checkpoint(dir / "checkpoints" / name, cfg, s);
  };
  hooks.on_rejected_step = [](std::uint64_t e) {
    std::fprintf(stderr, "warning: episode %llu produced a non-finite gradient; step skipped\n",
                 static_cast<unsigned long long>(e));
  };
  train(state, cfg, ws, hooks);
  save_checkpoint(dir / "checkpoint.txt", cfg, state);
  write_file(dir / "train_summary.json", train_summary_json(cfg, state).dump(2) + "\n");
  return state;
}

AggregateReport run_evaluation(const TrainConfig& cfg, const TrainLoopState& state, const Workspace& ws,
                               const fs::path& dir, const std::string& checkpoint_text) {
  if (state.model.config.input_dim != ws.data.dim()) {
    throw DataError("checkpoint expects " + std::to_string(state.model.config.input_dim) +
                    " input features, dataset has " + std::to_string(ws.data.dim()));
  }
  EvalSetup setup;
  setup.episode = cfg.eval_episode;
  setup.n_episodes = cfg.eval_episodes;
  setup.base_seed = cfg.eval_seed;
  setup.workers = cfg.workers;
  const auto report = evaluate(state.model, ws.data, ws.split, setup, ws.holdout ? &*ws.holdout : nullptr);

  EvalContext ctx{config_hash(cfg), sha256_hex(checkpoint_text), state.episode, cfg.eval_seed, cfg.eval_episode,
                  cfg.large_scale()};
  fs::create_directories(dir);
  write_file(dir / "summary.json", summary_json(ctx, report).dump(2) + "\n");
  const auto text = summary_text(ctx, report);
  write_file(dir / "summary.txt", text);
  write_file(dir / "episodes.jsonl", episodes_jsonl(report));
  std::fputs(text.c_str(), stdout);
  return report;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const SyntheticSpec& spec, std::string out, const std::string& delimiter) {
  if (delimiter != "comma" && delimiter != "tab") throw ConfigError("--delimiter must be comma or tab");
  const auto ds = generate_gaussian_mixture(spec);
  if (out.empty()) {
    out = (out_root() / ("synthetic-c" + std::to_string(spec.n_classes) + "-d" + std::to_string(spec.dim) + "-n" +
                         std::to_string(spec.samples_per_class) + "-s" + std::to_string(spec.seed) + ".csv"))
              .string();
  }
  const fs::path path(out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_delimited(ds, path, delimiter == "tab" ? '\t' : ',');
  std::printf("wrote %zu rows: %zu classes x %zu samples, %zu features -> %s\n", ds.size(), ds.n_classes(),
              spec.samples_per_class, ds.dim(), path.string().c_str());
  return kOk;
}

int cmd_train(const ConfigArgs& args, const std::string& resume) {
  TrainConfig cfg = args.resolve();
  std::optional<TrainLoopState> resumed;
  if (!resume.empty()) {
    auto ck = load_checkpoint(resume);
    if (ck.config_hash != config_hash(cfg)) {
      throw ConfigError("resume: checkpoint config hash " + ck.config_hash + " does not match this run's " +
                        config_hash(cfg));
    }
    resumed = std::move(ck.state);
    if (cfg.out.empty()) cfg.out = fs::path(resume).parent_path().string();
    if (cfg.out.empty()) cfg.out = ".";
  }
  const auto dir = run_dir_for(cfg, "train");
  RunLock lock(dir);
  std::printf("run %s\nconfig_hash %s\n", dir.string().c_str(), config_hash(cfg).c_str());
  const auto ws = prepare_workspace(cfg);
  if (resumed && resumed->model.config.input_dim != ws.data.dim()) {
    throw DataError("resume: checkpoint expects " + std::to_string(resumed->model.config.input_dim) +
                    " input features, dataset has " + std::to_string(ws.data.dim()));
  }
  const auto state = run_training(cfg, ws, dir, std::move(resumed));
  std::printf("final checkpoint %s (episode %llu)\n", (dir / "checkpoint.txt").string().c_str(),
              static_cast<unsigned long long>(state.episode));
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string out;
  std::optional<std::size_t> episodes, way, shot, query, open_way, open_query, workers;
  std::optional<std::uint64_t> seed;
};

int cmd_eval(const EvalArgs& a) {
  fs::path ck_path = a.checkpoint;
  if (fs::is_directory(ck_path)) ck_path /= "checkpoint.txt";
  const auto text = read_file(ck_path);
  auto ck = checkpoint_from_string(text, ck_path.string());
  TrainConfig cfg = ck.config;
  if (a.episodes) cfg.eval_episodes = *a.episodes;
  if (a.way) cfg.eval_episode.way = *a.way;
  if (a.shot) cfg.eval_episode.shot = *a.shot;
  if (a.query) cfg.eval_episode.query_per_class = *a.query;
  if (a.open_way) cfg.eval_episode.open_way = *a.open_way;
  if (a.open_query) cfg.eval_episode.open_query_per_class = *a.open_query;
  if (a.seed) cfg.eval_seed = *a.seed;
  if (a.workers) cfg.workers = *a.workers;
  if (cfg.large_scale() && a.way) {
    std::fprintf(stderr, "note: large-scale evaluation sees every trained class; --way is ignored\n");
  }
  cfg.validate();
  const fs::path dir = a.out.empty() ? ck_path.parent_path() / "eval" : fs::path(a.out);
  RunLock lock(dir);
  const auto ws = prepare_workspace(cfg);
  if (ws.split.train_classes.size() != ck.learned_classes && cfg.large_scale()) {
    throw DataError("checkpoint was trained on " + std::to_string(ck.learned_classes) + " classes, split has " +
                    std::to_string(ws.split.train_classes.size()));
  }
  run_evaluation(cfg, ck.state, ws, dir, text);
  return kOk;
}

const std::vector<std::string> kSweepAxes = {"way", "open_way", "eval.way", "eval.open_way", "eval.open_query"};

int cmd_sweep(const ConfigArgs& args, const std::string& axis, const std::vector<std::size_t>& values,
              std::optional<std::size_t> open_total) {
  if (std::find(kSweepAxes.begin(), kSweepAxes.end(), axis) == kSweepAxes.end()) {
    std::string valid;
    for (const auto& a : kSweepAxes) valid += (valid.empty() ? "" : ", ") + a;
    throw ConfigError("unknown sweep axis '" + axis + "' (valid axes: " + valid + ")");
  }
  if (values.empty()) throw ConfigError("sweep: --values is empty");
  if (open_total && axis != "eval.open_way") throw ConfigError("--open-total only applies to axis eval.open_way");
  const TrainConfig base = args.resolve();
  const fs::path dir = base.out.empty() ? out_root() / ("sweep-" + config_hash(base).substr(0, 12) + "-" + axis)
                                        : fs::path(base.out);
  RunLock lock(dir);

  // Values that change only evaluation settings reuse one trained model.
  std::map<std::string, TrainLoopState> trained;
  auto train_key = [](const TrainConfig& c) {
    std::string key;
    std::istringstream in(serialize_config(c, true));
    for (std::string line; std::getline(in, line);)
      if (line.rfind("eval.", 0) != 0) key += line + "\n";
    return key;
  };

  json rows = json::array();
  std::string table = "value\topen_query\taccuracy\taccuracy_ci95\tauroc\tauroc_ci95\n";
  for (const auto v : values) {
    TrainConfig cfg = base;
    cfg.out.clear();
    if (axis == "way") {
      cfg.episode.way = v;
      cfg.eval_episode.way = v;
    } else if (axis == "open_way") {
      cfg.episode.open_way = v;
    } else if (axis == "eval.way") {
      cfg.eval_episode.way = v;
    } else if (axis == "eval.open_way") {
      cfg.eval_episode.open_way = v;
      if (open_total) {
        if (v == 0 || *open_total < v) throw ConfigError("--open-total must be at least each open-class count");
        cfg.eval_episode.open_query_per_class = *open_total / v;
      }
    } else {
      cfg.eval_episode.open_query_per_class = v;
    }
    cfg.validate();
    const fs::path sub = dir / (axis + "=" + std::to_string(v));
    std::printf("== %s = %zu (%s)\n", axis.c_str(), v, sub.string().c_str());
    const auto ws = prepare_workspace(cfg);
    const auto key = train_key(cfg);
    auto it = trained.find(key);
    if (it == trained.end()) {
      it = trained.emplace(key, run_training(cfg, ws, sub)).first;
    } else {
      fs::create_directories(sub);
      write_config_echo(sub, cfg);
      save_checkpoint(sub / "checkpoint.txt", cfg, it->second);
      write_file(sub / "train_summary.json", train_summary_json(cfg, it->second).dump(2) + "\n");
    }
    const auto text = read_file(sub / "checkpoint.txt");
    const auto r = run_evaluation(cfg, it->second, ws, sub, text);

    json row{{"axis", axis},
             {"value", v},
             {"open_query", cfg.eval_episode.open_query_per_class},
             {"accuracy", interval_json(r.accuracy)},
             {"auroc", r.auroc ? interval_json(*r.auroc) : json(nullptr)}};
    rows.push_back(row);
    char line[256];
    if (r.auroc) {
      std::snprintf(line, sizeof line, "%zu\t%zu\t%.4f\t%.4f\t%.4f\t%.4f\n", v, cfg.eval_episode.open_query_per_class,
                    r.accuracy.mean, r.accuracy.half_width, r.auroc->mean, r.auroc->half_width);
    } else {
      std::snprintf(line, sizeof line, "%zu\t%zu\t%.4f\t%.4f\tabsent\tabsent\n", v,
                    cfg.eval_episode.open_query_per_class, r.accuracy.mean, r.accuracy.half_width);
    }
    table += line;
  }
  write_file(dir / "sweep.tsv", table);
  std::string jsonl;
  for (const auto& r : rows) jsonl += r.dump() + "\n";
  write_file(dir / "sweep.jsonl", jsonl);
  std::printf("\n%s", table.c_str());
  return kOk;
}

int cmd_inspect(const std::string& target) {
  fs::path p = target;
  if (fs::is_directory(p)) p /= "checkpoint.txt";
  const auto text = read_file(p);
  const auto ck = checkpoint_from_string(text, p.string());
  const auto& s = ck.state;
  std::printf("checkpoint       %s\n", p.string().c_str());
  std::printf("sha256           %s\n", sha256_hex(text).c_str());
  std::printf("config_hash      %s\n", ck.config_hash.c_str());
  std::printf("mode             %s\n", ck.config.large_scale() ? "largescale" : "fewshot");
  std::printf("head             %s\n", get_config_value(ck.config, "head").c_str());
  std::printf("base_seed        %llu\n", static_cast<unsigned long long>(s.base_seed));
  std::printf("episode          %llu / %llu\n", static_cast<unsigned long long>(s.episode),
              static_cast<unsigned long long>(ck.config.episodes));
  std::printf("input_dim        %zu\n", ck.input_dim);
  std::printf("learned_classes  %zu\n", ck.learned_classes);
  std::printf("adam_step        %llu\n", static_cast<unsigned long long>(s.adam.step));
  std::printf("rejected_steps   %llu\n", static_cast<unsigned long long>(s.stats.rejected_steps));
  if (s.stats.count) {
    std::printf("mean_total_loss  %.6f\n", s.stats.sum_total / static_cast<double>(s.stats.count));
  }
  std::size_t total = 0;
  for (const auto& prm : s.model.parameters()) {
    std::printf("  %-22s %s\n", prm.name.c_str(), shape_str(prm.tensor->shape()).c_str());
    total += prm.tensor->size();
  }
  std::printf("parameters       %zu\n", total);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"peeler: open-set few-shot learning with prototype heads"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  std::string gen_out, gen_delim = "comma";
  auto* gen = app.add_subcommand("gen-data", "write a synthetic Gaussian-mixture dataset");
  gen->add_option("--classes", spec.n_classes, "number of classes")->capture_default_str();
  gen->add_option("--dim", spec.dim, "feature dimension")->capture_default_str();
  gen->add_option("--samples", spec.samples_per_class, "samples per class")->capture_default_str();
  gen->add_option("--center-scale", spec.center_scale, "class centers uniform in [-s, s]^dim")->capture_default_str();
  gen->add_option("--within-std", spec.within_std, "within-class standard deviation")->capture_default_str();
  gen->add_option("--seed", spec.seed, "generator seed")->capture_default_str();
  gen->add_option("--out", gen_out, "output file");
  gen->add_option("--delimiter", gen_delim, "comma or tab")->capture_default_str();

  ConfigArgs train_args;
  std::string resume;
  auto* tr = app.add_subcommand("train", "episodic training");
  train_args.attach(tr);
  tr->add_option("--resume", resume, "continue from a checkpoint of the same config");

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on test-class episodes");
  ev->add_option("--checkpoint", eval_args.checkpoint, "checkpoint file or run directory")->required();
  ev->add_option("--out", eval_args.out, "report directory (default: <checkpoint dir>/eval)");
  ev->add_option("--episodes", eval_args.episodes, "number of evaluation episodes");
  ev->add_option("--way", eval_args.way, "seen classes per episode");
  ev->add_option("--shot", eval_args.shot, "support samples per seen class");
  ev->add_option("--query", eval_args.query, "closed queries per seen class");
  ev->add_option("--open-way", eval_args.open_way, "unseen classes per episode (0: accuracy only)");
  ev->add_option("--open-query", eval_args.open_query, "queries per unseen class");
  ev->add_option("--seed", eval_args.seed, "evaluation seed");
  ev->add_option("--workers", eval_args.workers, "worker threads");

  ConfigArgs sweep_args;
  std::string axis;
  std::vector<std::size_t> values;
  std::optional<std::size_t> open_total;
  auto* sw = app.add_subcommand("sweep", "train and evaluate once per value of one axis");
  sweep_args.attach(sw);
  sw->add_option("--axis", axis, "way | open_way | eval.way | eval.open_way | eval.open_query")->required();
  sw->add_option("--values", values, "comma-separated values")->required()->delimiter(',');
  sw->add_option("--open-total", open_total, "with eval.open_way: fixed total open queries per episode");

  std::string inspect_target;
  auto* in = app.add_subcommand("inspect", "print checkpoint metadata");
  in->add_option("checkpoint", inspect_target, "checkpoint file or run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(spec, gen_out, gen_delim);
    if (tr->parsed()) return cmd_train(train_args, resume);
    if (ev->parsed()) return cmd_eval(eval_args);
    if (sw->parsed()) return cmd_sweep(sweep_args, axis, values, open_total);
    if (in->parsed()) return cmd_inspect(inspect_target);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical abort: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kOther;
  }
  return kOther;
}
