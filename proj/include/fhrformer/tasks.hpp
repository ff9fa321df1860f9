#pragma once

// Downstream uses of a trained reconstructor: gap inpainting and recursive
// forecasting with per-offset error bounds.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fhrformer/errors.hpp"
#include "fhrformer/model.hpp"
#include "fhrformer/reconstructor.hpp"
#include "fhrformer/signalio.hpp"

namespace fhrformer::tasks {

// ---------------------------------------------------------------------------
// Inpainting

struct InpaintResult {
  signal::FHRSeries series;            // observed flags are carried over unchanged
  std::vector<std::uint8_t> replaced;  // 1 where a prediction was written
  std::size_t masked_patches = 0;
  std::string notice;  // non-empty when the input needed no work
};

/// Patches holding at least one unobserved sample.
inline std::vector<std::size_t> patches_with_gaps(std::span<const std::uint8_t> observed, std::size_t patch_size) {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p * patch_size < observed.size(); ++p) {
    for (std::size_t j = p * patch_size; j < (p + 1) * patch_size; ++j)
      if (!observed[j]) {
        out.push_back(p);
        break;
      }
  }
  return out;
}

inline InpaintResult inpaint(const signal::FHRSeries& series, const Reconstructor& reconstruct, std::size_t patch_size) {
  if (patch_size == 0 || series.size() % patch_size != 0) {
    throw DataError("series length " + std::to_string(series.size()) + " is not a multiple of the patch size " +
                    std::to_string(patch_size));
  }
  if (series.observed.size() != series.size()) throw DataError("series values/mask length differ");
  InpaintResult r;
  r.series = series;
  r.replaced.assign(series.size(), 0);
  const std::size_t n = series.size() / patch_size;
  const auto gaps = patches_with_gaps(series.observed, patch_size);
  if (gaps.empty()) {
    r.notice = "no missing samples in '" + series.episode_id + "'; returned unchanged";
    return r;
  }
  if (gaps.size() == n) throw DataError("every patch of '" + series.episode_id + "' has missing samples; no context");
  const auto mask = model::MaskSpec::hiding(n, gaps);
  const auto predicted = reconstruct(series.values, mask);
  r.masked_patches = gaps.size();
  for (auto p : gaps)
    for (std::size_t j = p * patch_size; j < (p + 1) * patch_size; ++j) {
      if (series.observed[j]) continue;
      r.series.values[j] = std::clamp(predicted[j], 0.0, 1.0);
      r.replaced[j] = 1;
    }
  return r;
}

/// signalio series schema plus a `replaced` column, values in bpm.
inline void write_inpainted(std::ostream& out, const InpaintResult& r) {
  out << "t,fhr_bpm,observed,replaced\n";
  const auto bpm = signal::denormalize(r.series.values);
  for (std::size_t i = 0; i < bpm.size(); ++i) {
    out << signal::detail::format_double(static_cast<double>(i) / signal::kSampleRateHz) << ','
        << signal::detail::format_double(bpm[i]) << ',' << int(r.series.observed[i]) << ',' << int(r.replaced[i]) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Forecasting

struct ForecastConfig {
  std::size_t context_len = 3600;
  std::size_t step_len = 30;
  std::size_t horizon = 30;
  std::size_t patch_size = 30;

  void validate() const {
    if (patch_size == 0) throw std::invalid_argument("patch size must be positive");
    if (context_len == 0 || context_len % patch_size != 0) {
      throw std::invalid_argument("context length must be a positive multiple of the patch size");
    }
    if (step_len == 0 || step_len % patch_size != 0) {
      throw std::invalid_argument("step length must be a positive multiple of the patch size");
    }
    if (horizon < step_len) throw std::invalid_argument("horizon must be at least one step");
  }
  std::size_t window_len() const { return context_len + step_len; }
  std::size_t iterations() const { return (horizon + step_len - 1) / step_len; }
};

struct ForecastResult {
  std::vector<double> predictions;  // bpm, horizon samples
  std::vector<double> band;         // bpm, +/- per predicted sample (empty without bounds)
  std::size_t iterations = 0;
};

/// Predicts the block that follows `window` (context_len samples): the window
/// is extended by one step, the final step_len/p_s patches are masked, and
/// the masked prediction is returned in normalized units, clipped to [0, 1].
/// The appended block is a hold of the last value; the model never sees it.
inline std::vector<double> predict_next_block(std::span<const double> context, const ForecastConfig& cfg,
                                              const Reconstructor& reconstruct) {
  std::vector<double> window(context.begin(), context.end());
  window.resize(cfg.window_len(), context.back());
  const std::size_t n = cfg.window_len() / cfg.patch_size;
  const std::size_t hidden = cfg.step_len / cfg.patch_size;
  std::vector<std::size_t> masked;
  for (std::size_t p = n - hidden; p < n; ++p) masked.push_back(p);
  const auto predicted = reconstruct(window, model::MaskSpec::hiding(n, masked));
  std::vector<double> out(cfg.step_len);
  for (std::size_t j = 0; j < cfg.step_len; ++j) out[j] = std::clamp(predicted[cfg.context_len + j], 0.0, 1.0);
  return out;
}

/// Recursive forecast from the last context_len samples of `history`
/// (normalized units). Optional per-offset `bounds` (bpm, step_len values)
/// are repeated across steps to form the band.
inline ForecastResult forecast(std::span<const double> history, const ForecastConfig& cfg,
                               const Reconstructor& reconstruct, std::span<const double> bounds = {}) {
  cfg.validate();
  if (history.size() < cfg.context_len) {
    throw DataError("forecast needs at least " + std::to_string(cfg.context_len) + " history samples, got " +
                    std::to_string(history.size()));
  }
  if (!bounds.empty() && bounds.size() != cfg.step_len) {
    throw std::invalid_argument("error bounds must have step_len values");
  }
  std::vector<double> context(history.end() - static_cast<std::ptrdiff_t>(cfg.context_len), history.end());
  std::vector<double> predicted;
  ForecastResult r;
  while (predicted.size() < cfg.horizon) {
    const auto block = predict_next_block(context, cfg, reconstruct);
    predicted.insert(predicted.end(), block.begin(), block.end());
    context.erase(context.begin(), context.begin() + static_cast<std::ptrdiff_t>(cfg.step_len));
    context.insert(context.end(), block.begin(), block.end());
    ++r.iterations;
  }
  predicted.resize(cfg.horizon);
  r.predictions = signal::denormalize(predicted);
  if (!bounds.empty()) {
    r.band.resize(cfg.horizon);
    for (std::size_t t = 0; t < cfg.horizon; ++t) r.band[t] = bounds[t % cfg.step_len];
  }
  return r;
}

/// Per-offset standard deviation (bpm, population form) of one-step residuals
/// over the validation series, each anchored at its final window.
inline std::vector<double> forecast_error_bounds(const Reconstructor& reconstruct,
                                                 const std::vector<signal::FHRSeries>& validation,
                                                 const ForecastConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<double>> residuals;
  for (const auto& s : validation) {
    if (s.size() < cfg.window_len()) continue;
    const auto end = s.values.end();
    const std::span<const double> context(end - static_cast<std::ptrdiff_t>(cfg.window_len()),
                                          end - static_cast<std::ptrdiff_t>(cfg.step_len));
    const auto block = predict_next_block(context, cfg, reconstruct);
    std::vector<double> res(cfg.step_len);
    for (std::size_t j = 0; j < cfg.step_len; ++j) {
      const double truth = s.values[s.size() - cfg.step_len + j];
      res[j] = (block[j] - truth) * signal::kMaxBpm;
    }
    residuals.push_back(std::move(res));
  }
  if (residuals.size() < 2) {
    throw DataError("error bounds need at least 2 validation series of " + std::to_string(cfg.window_len()) +
                    " samples");
  }
  const double n = static_cast<double>(residuals.size());
  std::vector<double> out(cfg.step_len);
  for (std::size_t j = 0; j < cfg.step_len; ++j) {
    double mean = 0.0;
    for (const auto& r : residuals) mean += r[j];
    mean /= n;
    double var = 0.0;
    for (const auto& r : residuals) var += (r[j] - mean) * (r[j] - mean);
    out[j] = std::sqrt(var / n);
  }
  return out;
}

/// `t` is seconds after the end of the history.
inline void write_forecast(std::ostream& out, const ForecastResult& r) {
  out << "t,pred_bpm,lower_bpm,upper_bpm\n";
  for (std::size_t i = 0; i < r.predictions.size(); ++i) {
    const double b = r.band.empty() ? 0.0 : r.band[i];
    const double p = r.predictions[i];
    out << signal::detail::format_double(static_cast<double>(i + 1) / signal::kSampleRateHz) << ','
        << signal::detail::format_double(p) << ',' << signal::detail::format_double(p - b) << ',' << signal::detail::format_double(p + b)
        << '\n';
  }
}

}  // namespace fhrformer::tasks
