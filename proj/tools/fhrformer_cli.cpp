// fhrformer: synth | preprocess | train | eval | inpaint | forecast
//
// Every subcommand takes settings from an optional flat `key = value` file
// (--config) with flags layered on top, writes its outputs under --out, and
// echoes the fully resolved settings to <out>/resolved_config.txt so a run can
// be repeated exactly. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fhrformer/checkpoint.hpp"
#include "fhrformer/metrics.hpp"
#include "fhrformer/reconstructor.hpp"
#include "fhrformer/signalio.hpp"
#include "fhrformer/synthgen.hpp"
#include "fhrformer/tasks.hpp"
#include "fhrformer/trainer.hpp"

namespace fs = std::filesystem;
using namespace fhrformer;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Settings

const std::set<std::string> kCommonKeys{"seed", "profile", "patch_size", "mask_ratio", "out"};

const std::map<std::string, std::set<std::string>> kCommandKeys{
    {"synth",
     {"episodes", "val_episodes", "test_episodes", "length", "gap_count", "gap_len_min_s", "gap_len_max_s",
      "artifact_count", "noise_std_bpm"}},
    {"preprocess", {"input", "length"}},
    {"train",
     {"data", "checkpoint", "length", "epochs", "learning_rate", "weight_decay", "batch_size", "early_stop_patience",
      "scheduler_patience", "scheduler_factor", "dropout", "alpha", "d_model", "n_heads", "ffn_dim", "enc_layers",
      "dec_layers"}},
    {"eval", {"data", "checkpoint", "split", "sweep"}},
    {"inpaint", {"input", "checkpoint"}},
    {"forecast", {"input", "checkpoint", "context", "step", "horizon", "bounds_data"}},
};

class Settings {
 public:
  explicit Settings(std::string command) : command_(std::move(command)) {}

  void load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      const std::string key = trim(line.substr(0, eq));
      if (key.empty() && eq == std::string::npos) continue;
      if (eq == std::string::npos) {
        throw UsageError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
      }
      set(key, trim(line.substr(eq + 1)));
    }
  }

  void set(const std::string& key, const std::string& value) {
    if (!kCommonKeys.count(key) && !kCommandKeys.at(command_).count(key)) {
      throw UsageError("unknown setting '" + key + "' for " + command_);
    }
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string str(const std::string& key, const std::string& fallback) {
    if (!has(key)) values_[key] = fallback;
    return values_[key];
  }
  std::string required(const std::string& key) {
    if (!has(key) || values_[key].empty()) throw UsageError(command_ + ": missing required setting '" + key + "'");
    return values_[key];
  }
  double num(const std::string& key, double fallback) {
    const auto s = str(key, signal::detail::format_double(fallback));
    double v = 0.0;
    if (!signal::detail::parse_double(s, v)) throw UsageError("setting '" + key + "' is not a number: " + s);
    return v;
  }
  std::size_t count(const std::string& key, std::size_t fallback) {
    const double v = num(key, static_cast<double>(fallback));
    if (v < 0.0 || v != std::floor(v)) throw UsageError("setting '" + key + "' must be a non-negative integer");
    return static_cast<std::size_t>(v);
  }

  /// key = value lines, sorted, for the echo file.
  void write(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "# fhrformer " << command_ << '\n';
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::string command_;
  std::map<std::string, std::string> values_;
};

// Flags shared by every subcommand, applied over the config file.
struct CommonFlags {
  std::string config, seed, patch_size, mask_ratio, profile, checkpoint, out;
  std::map<std::string, std::string> extra;  // subcommand-specific flag -> value
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "flat key = value settings file");
  sub->add_option("--seed", f.seed, "master seed");
  sub->add_option("--patch-size", f.patch_size, "samples per patch");
  sub->add_option("--mask-ratio", f.mask_ratio, "fraction of patches hidden");
  sub->add_option("--profile", f.profile, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
  sub->add_option("--checkpoint", f.checkpoint, "model checkpoint");
  sub->add_option("--out", f.out, "output directory");
}

Settings resolve(const std::string& command, const CommonFlags& f) {
  Settings s(command);
  if (!f.config.empty()) s.load_file(f.config);
  const std::pair<const char*, const std::string*> flags[] = {
      {"seed", &f.seed}, {"patch_size", &f.patch_size}, {"mask_ratio", &f.mask_ratio}, {"profile", &f.profile},
      {"out", &f.out}};
  for (const auto& [key, value] : flags)
    if (!value->empty()) s.set(key, *value);
  if (!f.checkpoint.empty()) s.set("checkpoint", f.checkpoint);
  for (const auto& [key, value] : f.extra)
    if (!value.empty()) s.set(key, value);
  return s;
}

bool full_profile(Settings& s) {
  const auto p = s.str("profile", "desk");
  if (p != "desk" && p != "paper") throw UsageError("profile must be desk or paper");
  return p == "paper";
}

fs::path output_dir(Settings& s) {
  const fs::path out = s.required("out");
  fs::create_directories(out);
  return out;
}

// ---------------------------------------------------------------------------
// Data helpers

std::vector<fs::path> csv_files(const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

std::vector<signal::FHRSeries> load_split(const fs::path& dir) {
  std::vector<signal::FHRSeries> out;
  for (const auto& f : csv_files(dir)) out.push_back(signal::read_series(f));
  if (out.empty()) throw DataError("no series files in " + dir.string());
  return out;
}

model::ModelWeights load_model(Settings& s) {
  const auto w = model::load_checkpoint(s.required("checkpoint"));
  if (s.has("patch_size") && s.count("patch_size", 0) != w.config.patch_size) {
    throw UsageError("--patch-size " + s.str("patch_size", "") + " differs from the checkpoint's " +
                     std::to_string(w.config.patch_size));
  }
  return w;
}

std::uint64_t seed_of(Settings& s) { return static_cast<std::uint64_t>(s.count("seed", 0)); }

// ---------------------------------------------------------------------------
// Subcommands

void run_synth(Settings& s) {
  const bool full = full_profile(s);
  auto cfg = full ? synth::SynthConfig{} : synth::short_config();
  cfg.length = s.count("length", cfg.length);
  cfg.gap_count = s.count("gap_count", 2);
  cfg.gap_len_s = {s.num("gap_len_min_s", 30.0), s.num("gap_len_max_s", 60.0)};
  cfg.artifact_count = s.count("artifact_count", 5);
  cfg.noise_std_bpm = s.num("noise_std_bpm", cfg.noise_std_bpm);
  cfg.validate();
  const std::size_t n = s.count("episodes", 64);
  const std::size_t held_out = std::max<std::size_t>(1, n / 10);
  const std::size_t n_val = s.count("val_episodes", held_out), n_test = s.count("test_episodes", held_out);
  const fs::path out = output_dir(s);
  synth::write_dataset(out, synth::build_dataset(n, n_val, n_test, cfg, seed_of(s)));
  s.write(out / "resolved_config.txt");
  std::cout << "wrote " << n + n_val + n_test << " episodes to " << out.string() << '\n';
}

void run_preprocess(Settings& s) {
  const bool full = full_profile(s);
  const fs::path in = s.required("input");
  signal::PreprocessConfig pc;
  pc.length = s.count("length", full ? signal::kDefaultLength : 720);
  const fs::path out = output_dir(s);
  std::size_t total = 0;
  for (const char* split : {"train", "val", "test"}) {
    const auto files = csv_files(in / split);
    if (files.empty()) continue;
    fs::create_directories(out / split);
    for (const auto& f : files) {
      signal::write_series(out / split / f.filename(), signal::preprocess(signal::parse_recording(f), pc));
      ++total;
    }
  }
  if (total == 0) throw DataError("no recordings under " + in.string() + "/{train,val,test}");
  s.write(out / "resolved_config.txt");
  std::cout << "preprocessed " << total << " recordings\n";
}

void run_train(Settings& s) {
  const bool full = full_profile(s);
  const std::size_t ps = s.count("patch_size", 30);
  auto mc = full ? model::ModelConfig::full(ps) : model::ModelConfig::desk(ps);
  mc.length = s.count("length", mc.length);
  mc.mask_ratio = s.num("mask_ratio", mc.mask_ratio);
  mc.dropout = s.num("dropout", mc.dropout);
  mc.d_model = s.count("d_model", mc.d_model);
  mc.n_heads = s.count("n_heads", mc.n_heads);
  mc.ffn_dim = s.count("ffn_dim", mc.ffn_dim);
  mc.n_enc_layers = s.count("enc_layers", mc.n_enc_layers);
  mc.n_dec_layers = s.count("dec_layers", mc.n_dec_layers);

  train::TrainConfig tc;
  tc.learning_rate = s.num("learning_rate", full ? 1e-4 : 1e-3);
  tc.weight_decay = s.num("weight_decay", tc.weight_decay);
  tc.batch_size = s.count("batch_size", full ? 128 : 16);
  tc.max_epochs = s.count("epochs", 100);
  tc.early_stop_patience = s.count("early_stop_patience", tc.early_stop_patience);
  tc.scheduler_patience = s.count("scheduler_patience", tc.scheduler_patience);
  tc.scheduler_factor = s.num("scheduler_factor", tc.scheduler_factor);
  tc.loss.alpha = s.num("alpha", tc.loss.alpha);
  tc.seed = seed_of(s);
  try {
    mc.validate();
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const fs::path data = s.required("data");
  const auto train_set = load_split(data / "train");
  const auto val_set = load_split(data / "val");
  const fs::path out = output_dir(s);
  tc.checkpoint_path = out / "best.ckpt";
  std::optional<model::ModelWeights> initial;
  if (s.has("checkpoint")) initial = model::load_checkpoint(s.required("checkpoint"), mc);
  s.write(out / "resolved_config.txt");

  std::ofstream log(out / "train_log.csv");
  log << "epoch,train_loss,val_loss,lr,seconds\n";
  log.precision(17);
  const auto result = train::fit(train_set, val_set, mc, tc, std::move(initial), [&](const train::EpochLog& e) {
    log << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << ',' << e.seconds << '\n' << std::flush;
    std::cout << "epoch " << e.epoch << "  train " << e.train_loss << "  val " << e.val_loss << "  lr " << e.lr << '\n';
  });
  std::cout << "best validation loss " << result.best_val_loss << " at epoch " << result.best_epoch
            << (result.stopped_early ? " (early stop)" : "") << '\n';
}

std::vector<double> parse_ratios(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    double v = 0.0;
    if (!signal::detail::parse_double(item, v) || !(v > 0.0 && v < 1.0)) {
      throw UsageError("sweep entries must be ratios in (0, 1): " + item);
    }
    out.push_back(v);
  }
  return out;
}

void run_eval(Settings& s) {
  full_profile(s);
  const auto w = load_model(s);
  const fs::path data = s.required("data");
  const auto set = load_split(data / s.str("split", "test"));
  const metrics::EvalConfig cfg{w.config.patch_size, s.num("mask_ratio", w.config.mask_ratio), seed_of(s)};
  const fs::path out = output_dir(s);
  const auto sweep = parse_ratios(s.str("sweep", "0.05,0.15,0.25,0.35,0.5"));
  s.write(out / "resolved_config.txt");
  const auto rec = model_reconstructor(w);

  const auto result = metrics::evaluate(rec, set, cfg, &w);
  std::ofstream csv(out / "report.csv");
  metrics::write_report_csv(csv, result);
  std::ofstream table(out / "report.txt");
  metrics::write_report_table(table, result);
  metrics::write_report_table(std::cout, result);

  // Masking-ratio sweep: one row per ratio, same seed.
  std::ofstream sw(out / "mask_sweep.csv");
  sw << "mask_ratio,rl,rmse_bpm,mae_bpm,psnr_db,ssim,cc\n";
  for (double r : sweep) {
    const auto a = metrics::evaluate(rec, set, {cfg.patch_size, r, cfg.seed}).aggregate;
    sw << r << ',' << a.rl << ',' << a.rmse << ',' << a.mae << ',' << a.psnr_db << ',' << a.ssim << ',' << a.cc << '\n';
  }
}

void run_inpaint(Settings& s) {
  full_profile(s);
  const auto w = load_model(s);
  const fs::path input = s.required("input");
  const auto series = signal::preprocess(signal::parse_recording(input), {w.config.length, {}});
  const fs::path out = output_dir(s);
  s.write(out / "resolved_config.txt");
  const auto r = tasks::inpaint(series, model_reconstructor(w), w.config.patch_size);
  if (!r.notice.empty()) std::cerr << r.notice << '\n';
  std::ofstream csv(out / "inpainted.csv");
  tasks::write_inpainted(csv, r);
  std::cout << "replaced " << std::count(r.replaced.begin(), r.replaced.end(), 1) << " samples in "
            << r.masked_patches << " patches\n";
}

void run_forecast(Settings& s) {
  const bool full = full_profile(s);
  const auto w = load_model(s);
  tasks::ForecastConfig cfg;
  cfg.patch_size = w.config.patch_size;
  cfg.step_len = s.count("step", w.config.patch_size);
  cfg.context_len = s.count("context", full ? 3600 : w.config.length - cfg.step_len);
  cfg.horizon = s.count("horizon", cfg.step_len);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto history = signal::preprocess(signal::parse_recording(fs::path(s.required("input"))),
                                          {cfg.context_len, {}});
  const auto rec = model_reconstructor(w);
  std::vector<double> bounds;
  if (s.has("bounds_data")) {
    auto val = load_split(fs::path(s.required("bounds_data")));
    bounds = tasks::forecast_error_bounds(rec, val, cfg);
  }
  const fs::path out = output_dir(s);
  s.write(out / "resolved_config.txt");
  const auto r = tasks::forecast(history.values, cfg, rec, bounds);
  std::ofstream csv(out / "forecast.csv");
  tasks::write_forecast(csv, r);
  std::cout << "forecast " << r.predictions.size() << " samples in " << r.iterations << " steps\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FHR masked-transformer toolkit"};
  app.require_subcommand(1);
  std::map<std::string, CommonFlags> flags;
  auto sub = [&](const std::string& name, const std::string& help) {
    auto* s = app.add_subcommand(name, help);
    add_common(s, flags[name]);
    return s;
  };
  auto extra = [&](CLI::App* s, const std::string& flag, const std::string& key, const std::string& help) {
    s->add_option(flag, flags[s->get_name()].extra[key], help);
  };

  auto* synth_cmd = sub("synth", "generate a synthetic dataset");
  extra(synth_cmd, "--episodes", "episodes", "training episodes (val/test default to a tenth, min 1)");
  extra(synth_cmd, "--length", "length", "samples per episode");
  auto* pre_cmd = sub("preprocess", "artifact correction, gap filling, fixed length");
  extra(pre_cmd, "--input", "input", "dataset directory with train/val/test recordings");
  auto* train_cmd = sub("train", "self-supervised training");
  extra(train_cmd, "--data", "data", "preprocessed dataset directory");
  extra(train_cmd, "--epochs", "epochs", "maximum epochs");
  auto* eval_cmd = sub("eval", "metrics on a split");
  extra(eval_cmd, "--data", "data", "preprocessed dataset directory");
  extra(eval_cmd, "--split", "split", "split to evaluate (default test)");
  auto* inpaint_cmd = sub("inpaint", "fill dropout gaps in a recording");
  extra(inpaint_cmd, "--input", "input", "recording CSV");
  auto* forecast_cmd = sub("forecast", "recursive forecast from a recording");
  extra(forecast_cmd, "--input", "input", "recording CSV (history)");
  extra(forecast_cmd, "--horizon", "horizon", "samples to predict");
  extra(forecast_cmd, "--bounds-data", "bounds_data", "series directory for error bounds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const std::map<std::string, void (*)(Settings&)> handlers{
      {"synth", run_synth}, {"preprocess", run_preprocess}, {"train", run_train},
      {"eval", run_eval},   {"inpaint", run_inpaint},       {"forecast", run_forecast}};
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    Settings settings = resolve(command, flags[command]);
    handlers.at(command)(settings);
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    // DataError, CheckpointError, filesystem errors.
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  }
}
