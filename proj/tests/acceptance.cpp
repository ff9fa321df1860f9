// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// `acceptance 7 8` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fhrformer/checkpoint.hpp"
#include "fhrformer/metrics.hpp"
#include "fhrformer/synthgen.hpp"
#include "fhrformer/tasks.hpp"
#include "fhrformer/trainer.hpp"
#include "test_support.hpp"

using namespace fhrformer;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Fixed unit map: [0, 1] <-> [0, 220] bpm.
double bpm(double unit) { return unit * 220.0; }

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---------------------------------------------------------------------------
// Desk-scale training shared by criteria 7, 8 and 9

constexpr std::size_t kTrainEpisodes = 64;
constexpr std::size_t kHeldOutEpisodes = 16;
constexpr std::uint64_t kSeeds[] = {11, 22, 33};

// Desk architecture; small batches and a 0.5 training mask ratio. With 64
// episodes the model overfits long before 600 epochs, and fit() keeps the
// best-validation weights.
struct Recipe {
  std::size_t epochs = 600;
  double learning_rate = 2e-3;
  std::size_t batch_size = 4;
  double dropout = 0.0;
  double weight_decay = 0.0;
  double mask_ratio = 0.5;
};

const Recipe kDeskRecipe{};

signal::FHRSeries to_series(const synth::SyntheticEpisode& ep, std::size_t length) {
  auto s = signal::preprocess(ep.recording, {length, {}});
  s.episode_id = ep.episode_id;
  return s;
}

std::vector<signal::FHRSeries> to_series(const std::vector<synth::SyntheticEpisode>& eps, std::size_t length) {
  std::vector<signal::FHRSeries> out;
  for (const auto& e : eps) out.push_back(to_series(e, length));
  return out;
}

model::ModelWeights desk_train(const synth::Dataset& ds, std::size_t patch_size, std::uint64_t seed,
                               const Recipe& r = kDeskRecipe) {
  auto mc = model::ModelConfig::desk(patch_size);
  mc.dropout = r.dropout;
  mc.mask_ratio = r.mask_ratio;
  train::TrainConfig tc;
  tc.learning_rate = r.learning_rate;
  tc.batch_size = r.batch_size;
  tc.weight_decay = r.weight_decay;
  tc.max_epochs = r.epochs;
  tc.early_stop_patience = r.epochs;
  tc.scheduler_patience = r.epochs;
  tc.seed = seed;
  const auto fit = train::fit(to_series(ds.train, mc.length), to_series(ds.val, mc.length), mc, tc);
  std::cerr << "  trained p_s=" << patch_size << " seed " << seed << ": best val " << fit.best_val_loss << " at epoch "
            << fit.best_epoch << '\n';
  return fit.best_weights;
}

// p_s=30 desk models, one per seed; criteria 7 and 8 share them.
std::vector<model::ModelWeights>& desk_models_30() {
  static std::vector<model::ModelWeights> models = [] {
    std::vector<model::ModelWeights> out;
    for (auto seed : kSeeds)
      out.push_back(desk_train(synth::build_dataset(kTrainEpisodes, kHeldOutEpisodes, kHeldOutEpisodes,
                                                    synth::short_config(), seed),
                               30, seed));
    return out;
  }();
  return models;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Outcome gradient_check() {
  auto mc = model::ModelConfig::desk(30);
  mc.length = 120;
  mc.d_model = 16;
  mc.ffn_dim = 32;
  mc.n_heads = 2;
  mc.n_enc_layers = 1;
  mc.n_dec_layers = 1;
  mc.dropout = 0.0;
  auto w = model::ModelWeights::initialize(mc, 5);
  std::mt19937_64 gen(1);
  const auto x = test::uniform_vector(120, gen, 0.45, 0.75);
  const auto mask = model::MaskSpec::hiding(4, {1, 3});
  const auto targets = model::masked_targets(x, mask, 30);
  const objective::LossConfig lc{0.95, 1.0};
  auto loss_of = [&] {
    return objective::compute_loss(model::forward(x, mask, w).predicted_masked, targets, lc);
  };

  w.zero_grad();
  diff::backward(loss_of().total);
  auto params = w.parameters();
  // Five-point stencil: at a loss near 25 a two-point difference with a tiny
  // step resolves only ~2e-9, too coarse for the exactly-zero key-bias gradients.
  const double h = 1e-3;
  double worst = 0.0;
  std::string worst_at;
  std::size_t checked = 0;
  for (auto& p : params) {
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    auto values = p.tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      auto at = [&](double offset) {
        values[i] = orig + offset;
        return loss_of().total_value;
      };
      const double numeric = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
      values[i] = orig;
      const double err = std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      if (err > worst) {
        worst = err;
        worst_at = p.name + "[" + std::to_string(i) + "]";
      }
      ++checked;
    }
  }
  return {worst < 1e-4, fmt("%zu parameters, max relative error %.3g at %s", checked, worst, worst_at.c_str())};
}

// ---------------------------------------------------------------------------
// 2. Loss oracles

Outcome loss_oracles() {
  std::mt19937_64 gen(2);
  double worst_recon = 0.0, worst_focal = 0.0;
  for (std::size_t ps : {30u, 60u, 120u}) {
    for (int t = 0; t < 100; ++t) {
      const std::size_t rows = 1 + gen() % 5;
      std::vector<std::vector<double>> a(rows), b(rows);
      std::vector<double> fa, fb;
      for (std::size_t r = 0; r < rows; ++r) {
        a[r] = test::uniform_vector(ps, gen);
        b[r] = test::uniform_vector(ps, gen);
        fa.insert(fa.end(), a[r].begin(), a[r].end());
        fb.insert(fb.end(), b[r].begin(), b[r].end());
      }
      const double recon = objective::recon_loss(diff::Tensor::constant({rows, ps}, fa),
                                                 diff::Tensor::constant({rows, ps}, fb))
                               .item();
      worst_recon = std::max(worst_recon, std::abs(recon - test::recon_oracle(a, b)));
      const double focal =
          objective::focal_freq_patch(diff::Tensor::constant({ps}, a[0]), diff::Tensor::constant({ps}, b[0])).item();
      worst_focal = std::max(worst_focal, std::abs(focal - test::focal_oracle(a[0], b[0], 1.0)));
    }
  }
  return {worst_recon <= 1e-9 && worst_focal <= 1e-9,
          fmt("300 instances each; max |diff| recon %.3g, focal %.3g", worst_recon, worst_focal)};
}

// ---------------------------------------------------------------------------
// 3. Passthrough of visible patches

Outcome passthrough() {
  std::mt19937_64 gen(3);
  std::size_t mismatches = 0, pairs = 0;
  for (std::uint64_t wseed = 0; wseed < 10; ++wseed) {
    auto mc = model::ModelConfig::desk(30);
    const auto w = model::ModelWeights::initialize(mc, wseed);
    Rng rng(wseed);
    for (int t = 0; t < 100; ++t, ++pairs) {
      const std::size_t n = 2 + gen() % 30;
      const auto x = test::uniform_vector(n * 30, gen);
      const double ratio = std::uniform_real_distribution<double>(0.05, 0.9)(gen);
      const auto mask = model::sample_mask(n, ratio, rng);
      const auto fwd = model::forward(x, mask, w);
      for (auto p : mask.visible())
        for (std::size_t j = p * 30; j < (p + 1) * 30; ++j) mismatches += fwd.reconstruction[j] != x[j];
    }
  }
  return {mismatches == 0, fmt("%zu pairs, %zu visible samples differ", pairs, mismatches)};
}

// ---------------------------------------------------------------------------
// 4. Mask sampler

Outcome mask_sampler() {
  Rng rng(4);
  bool ok = true;
  std::string detail;
  for (double gamma : {0.05, 0.15, 0.35}) {
    double total = 0.0;
    std::size_t degenerate = 0;
    for (int d = 0; d < 10000; ++d) {
      const auto m = model::sample_mask(240, gamma, rng);
      const auto masked = m.masked().size();
      degenerate += masked < 1 || masked > 239;
      total += static_cast<double>(masked) / 240.0;
    }
    const double mean = total / 10000.0;
    const bool good = std::abs(mean - gamma) <= 1.0 / 240.0 && degenerate == 0;
    ok = ok && good;
    detail += fmt("gamma %.2f: mean %.5f, %zu degenerate; ", gamma, mean, degenerate);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 5. Metric identities and the poison probe

Outcome metric_identities() {
  std::vector<signal::FHRSeries> set;
  auto cfg = synth::short_config();
  cfg.gap_count = 2;
  for (std::uint64_t k = 0; k < 6; ++k) set.push_back(to_series(synth::make_episode(cfg, 50 + k, "m" + std::to_string(k)), 720));
  const auto w = model::ModelWeights::initialize(model::ModelConfig::desk(30), 5);

  const auto same = metrics::evaluate(copy_reconstructor(), set, {30, 0.35, 9}, &w).aggregate;
  bool ok = same.mse <= 1e-10 && same.rmse <= 1e-10 && same.mae <= 1e-10 && same.fid && *same.fid <= 1e-6 &&
            std::abs(same.ssim - 1.0) <= 1e-10 && std::abs(same.cc - 1.0) <= 1e-10;
  std::string detail = fmt("identical: mse %.2g mae %.2g fid %.2g ssim-1 %.2g cc-1 %.2g", same.mse, same.mae,
                           same.fid ? *same.fid : -1.0, same.ssim - 1.0, same.cc - 1.0);

  // Poison every interpolated position in the prediction; pointwise metrics must not move.
  const auto rec = model_reconstructor(w);
  const Reconstructor poisoned = [&](std::span<const double> x, const model::MaskSpec& m) {
    auto out = rec(x, m);
    for (const auto& s : set)
      if (std::equal(x.begin(), x.end(), s.values.begin()))
        for (std::size_t i = 0; i < out.size(); ++i)
          if (!s.observed[i]) out[i] = 7.0;
    return out;
  };
  const metrics::EvalConfig ec{30, 0.5, 3};
  const auto a = metrics::evaluate(rec, set, ec), b = metrics::evaluate(poisoned, set, ec);
  std::size_t moved = 0, probed = 0;
  for (std::size_t k = 0; k < set.size(); ++k) {
    moved += a.series[k].errors.mse != b.series[k].errors.mse || a.series[k].errors.mae != b.series[k].errors.mae ||
             a.series[k].psnr_db != b.series[k].psnr_db || a.series[k].cc != b.series[k].cc;
    probed += a.series[k].rl != b.series[k].rl;  // the loss sees the poison, so it did land in masked patches
  }
  ok = ok && moved == 0 && probed > 0;
  detail += fmt("; poison reached %zu series, moved pointwise metrics in %zu", probed, moved);
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 6. Overfit probe

Outcome overfit_probe() {
  const auto ds = synth::build_dataset(8, 2, 1, synth::short_config(), 6);
  auto mc = model::ModelConfig::desk(30);
  train::TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.max_epochs = 200;
  // The probe measures how far the training loss can fall, so nothing stops it early.
  tc.early_stop_patience = 200;
  tc.scheduler_patience = 200;
  tc.seed = 6;
  const auto r = train::fit(to_series(ds.train, 720), to_series(ds.val, 720), mc, tc);
  const double first = r.log.front().train_loss, last = r.log.back().train_loss;
  return {last <= 0.1 * first && r.log.size() <= 200,
          fmt("epoch 1 loss %.4g, epoch %zu loss %.4g (ratio %.4f)", first, r.log.size(), last, last / first)};
}

// ---------------------------------------------------------------------------
// 7. Inpainting against linear interpolation

Outcome inpainting_vs_linear() {
  auto cfg = synth::short_config();
  cfg.gap_count = 2;
  cfg.gap_len_s = {30.0, 60.0};
  std::vector<double> model_rmse, linear_rmse;
  for (std::size_t s = 0; s < std::size(kSeeds); ++s) {
    const auto rec = model_reconstructor(desk_models_30()[s]);
    double se_model = 0.0, se_linear = 0.0;
    std::size_t n = 0;
    for (std::uint64_t k = 0; k < 64; ++k) {
      const auto ep = synth::make_episode(cfg, derive_seed(kSeeds[s] + 7000, k), "g" + std::to_string(k));
      const auto series = to_series(ep, 720);
      const auto filled = tasks::inpaint(series, rec, 30).series.values;
      for (const auto& gap : ep.gaps)
        for (std::size_t i = gap.start; i < gap.start + gap.length; ++i) {
          const double truth = ep.clean.fhr_bpm[i];
          se_model += std::pow(bpm(filled[i]) - truth, 2);
          se_linear += std::pow(bpm(series.values[i]) - truth, 2);
          ++n;
        }
    }
    model_rmse.push_back(std::sqrt(se_model / n));
    linear_rmse.push_back(std::sqrt(se_linear / n));
  }
  const double m = median3(model_rmse), l = median3(linear_rmse);
  return {m < l, fmt("median RMSE model %.3f bpm, linear %.3f bpm (per seed model %.3f/%.3f/%.3f, linear %.3f/%.3f/%.3f)",
                     m, l, model_rmse[0], model_rmse[1], model_rmse[2], linear_rmse[0], linear_rmse[1],
                     linear_rmse[2])};
}

// ---------------------------------------------------------------------------
// 8. Patch-size trend

Outcome patch_size_trend() {
  std::vector<double> rmse30, rmse120;
  for (std::size_t s = 0; s < std::size(kSeeds); ++s) {
    const auto ds =
        synth::build_dataset(kTrainEpisodes, kHeldOutEpisodes, kHeldOutEpisodes, synth::short_config(), kSeeds[s]);
    const auto test_set = to_series(ds.test, 720);
    const auto& w30 = desk_models_30()[s];
    const auto w120 = desk_train(ds, 120, kSeeds[s]);
    const std::uint64_t eval_seed = kSeeds[s] + 8000;
    rmse30.push_back(metrics::evaluate(model_reconstructor(w30), test_set, {30, 0.15, eval_seed}).aggregate.rmse);
    rmse120.push_back(metrics::evaluate(model_reconstructor(w120), test_set, {120, 0.15, eval_seed}).aggregate.rmse);
  }
  const double a = median3(rmse30), b = median3(rmse120);
  return {a <= b, fmt("median test RMSE p_s=30 %.3f bpm, p_s=120 %.3f bpm (per seed %.3f/%.3f/%.3f vs %.3f/%.3f/%.3f)",
                      a, b, rmse30[0], rmse30[1], rmse30[2], rmse120[0], rmse120[1], rmse120[2])};
}

// ---------------------------------------------------------------------------
// 9. Forecast contracts

Outcome forecast_contracts() {
  auto cfg = synth::short_config();
  cfg.n_accels = 0;
  cfg.n_decels = 0;
  cfg.noise_std_bpm = 0.0;
  const auto ds = synth::build_dataset(kTrainEpisodes, kHeldOutEpisodes, 32, cfg, 9);
  const auto w = desk_train(ds, 30, 9);
  const auto rec = model_reconstructor(w);
  const tasks::ForecastConfig fc{690, 30, 30, 30};

  // Arithmetic and determinism.
  const auto history0 = to_series(ds.test[0], 720).values;
  const auto long_run = tasks::forecast(history0, {690, 30, 90, 30}, rec);
  const auto odd_run = tasks::forecast(history0, {690, 30, 100, 30}, rec);
  const bool arithmetic = long_run.iterations == 3 && long_run.predictions.size() == 90 && odd_run.iterations == 4 &&
                          odd_run.predictions.size() == 100;
  const bool deterministic = tasks::forecast(history0, {690, 30, 90, 30}, rec).predictions == long_run.predictions;

  // One step against holding the last value.
  double se_model = 0.0, se_hold = 0.0;
  std::size_t n = 0;
  for (const auto& ep : ds.test) {
    const auto s = to_series(ep, 720);
    const std::vector<double> history(s.values.begin(), s.values.begin() + 690);
    const auto pred = tasks::forecast(history, fc, rec).predictions;
    const double hold = bpm(history.back());
    for (std::size_t j = 0; j < 30; ++j) {
      const double truth = ep.clean.fhr_bpm[690 + j];
      se_model += std::pow(pred[j] - truth, 2);
      se_hold += std::pow(hold - truth, 2);
      ++n;
    }
  }
  const double rmse_model = std::sqrt(se_model / n), rmse_hold = std::sqrt(se_hold / n);

  // Error bounds against a per-offset std computed here.
  const auto val = to_series(ds.val, 720);
  const auto bounds = tasks::forecast_error_bounds(rec, val, fc);
  double worst = 0.0;
  for (std::size_t j = 0; j < 30; ++j) {
    std::vector<double> residuals;
    for (const auto& s : val) {
      std::vector<double> window(s.values.end() - 720, s.values.end() - 30);
      window.resize(720, window.back());
      const auto out = rec(window, model::MaskSpec::hiding(24, {23}));
      residuals.push_back((std::clamp(out[690 + j], 0.0, 1.0) - s.values[690 + j]) * signal::kMaxBpm);
    }
    worst = std::max(worst, std::abs(bounds[j] - test::pop_std(residuals)));
  }
  const bool bounds_ok = bounds.size() == 30 && worst <= 1e-10;
  return {arithmetic && deterministic && rmse_model <= rmse_hold && bounds_ok,
          fmt("arithmetic %s, deterministic %s, one-step RMSE model %.3f vs hold %.3f bpm, bounds max |diff| %.2g",
              arithmetic ? "ok" : "bad", deterministic ? "ok" : "bad", rmse_model, rmse_hold, worst)};
}

// ---------------------------------------------------------------------------
// 10. Training-loop semantics

Outcome training_semantics() {
  std::string detail;
  // Frozen weights make every epoch after the first non-improving.
  auto mc = model::ModelConfig::desk(30);
  mc.d_model = 16;
  mc.ffn_dim = 32;
  mc.n_heads = 2;
  const auto ds = synth::build_dataset(2, 2, 1, synth::short_config(), 10);
  train::TrainConfig tc;
  tc.freeze_weights = true;
  tc.max_epochs = 100;
  const auto r = train::fit(to_series(ds.train, 720), to_series(ds.val, 720), mc, tc);
  const bool stop_ok = r.stopped_early && r.log.size() == 21 && tc.early_stop_patience == 20;
  detail += fmt("early stop after %zu epochs (best at %zu); ", r.log.size(), r.best_epoch);

  const train::TrainConfig defaults;
  train::PlateauScheduler sched(defaults.learning_rate, defaults.scheduler_factor, defaults.scheduler_patience);
  sched.step(1.0);
  std::size_t flat = 0;
  while (sched.lr() == defaults.learning_rate && flat < 50) {
    sched.step(1.0);
    ++flat;
  }
  const bool sched_ok = flat == 5 && std::abs(sched.lr() - defaults.learning_rate * 0.1) < 1e-18;
  detail += fmt("lr decayed after %zu flat epochs; ", flat);

  std::ostringstream first, second;
  model::write_checkpoint(first, r.best_weights);
  std::istringstream in(first.str());
  const auto loaded = model::read_checkpoint(in, mc);
  model::write_checkpoint(second, loaded);
  bool bits_ok = first.str() == second.str();
  const auto pa = r.best_weights.parameters(), pb = loaded.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    bits_ok = bits_ok && std::ranges::equal(pa[i].tensor.values(), pb[i].tensor.values());
  detail += bits_ok ? "checkpoint round trip bit-exact" : "checkpoint round trip differs";
  return {stop_ok && sched_ok && bits_ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{gradient_check,       loss_oracles,   passthrough,
                                                       mask_sampler,         metric_identities, overfit_probe,
                                                       inpainting_vs_linear, patch_size_trend, forecast_contracts,
                                                       training_semantics};
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << i + 1 << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail
              << fmt("  [%.1f s]", secs) << std::endl;
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
