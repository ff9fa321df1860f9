#pragma once

// Synthetic FHR-like recordings with known ground truth: dropout gaps and
// Doppler doubling/halving artifacts are injected at recorded positions so
// downstream code can be scored against them.
//
// Signal model: baseline + a few sinusoids whose frequencies lie in the
// variability band + Gaussian-shaped accelerations (positive) and
// decelerations (negative) + white Gaussian noise, clipped to [30, 220] bpm.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "fhrformer/errors.hpp"
#include "fhrformer/random.hpp"
#include "fhrformer/signalio.hpp"

namespace fhrformer::synth {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct SynthConfig {
  std::size_t length = signal::kDefaultLength;  // samples at 2 Hz; 720 for the short mode
  Range baseline_bpm{110.0, 160.0};
  Range variability_amp_bpm{5.0, 15.0};
  Range variability_freq_hz{0.03, 0.2};
  std::size_t variability_components = 3;
  std::size_t n_accels = 2;
  std::size_t n_decels = 1;
  Range accel_amp_bpm{15.0, 25.0};
  Range accel_duration_s{15.0, 40.0};
  Range decel_amp_bpm{15.0, 30.0};
  Range decel_duration_s{20.0, 60.0};
  double noise_std_bpm = 1.0;
  std::size_t gap_count = 0;
  Range gap_len_s{30.0, 60.0};
  std::size_t artifact_count = 0;
  std::uint64_t seed = 0;

  void validate() const {
    auto check = [](const Range& r, const char* name, bool positive) {
      if (!(r.lo <= r.hi) || (positive && r.lo <= 0.0) || r.lo < 0.0) {
        throw std::invalid_argument(std::string("synth config: invalid range for ") + name);
      }
    };
    if (length < 2) throw std::invalid_argument("synth config: length must be >= 2");
    check(baseline_bpm, "baseline_bpm", true);
    if (baseline_bpm.lo < 30.0 || baseline_bpm.hi > 220.0) {
      throw std::invalid_argument("synth config: baseline outside the device band [30, 220]");
    }
    check(variability_amp_bpm, "variability_amp_bpm", false);
    check(variability_freq_hz, "variability_freq_hz", true);
    check(accel_amp_bpm, "accel_amp_bpm", false);
    check(accel_duration_s, "accel_duration_s", true);
    check(decel_amp_bpm, "decel_amp_bpm", false);
    check(decel_duration_s, "decel_duration_s", true);
    check(gap_len_s, "gap_len_s", true);
    if (noise_std_bpm < 0.0) throw std::invalid_argument("synth config: negative noise_std_bpm");
  }
};

/// Short mode used by tests and the desk profile.
inline SynthConfig short_config() {
  SynthConfig c;
  c.length = 720;
  c.n_accels = 1;
  c.n_decels = 1;
  return c;
}

struct GapInterval {
  std::size_t start = 0;
  std::size_t length = 0;
};

struct ArtifactSite {
  std::size_t index = 0;
  double factor = 1.0;  // 2 or 0.5
};

namespace detail {
enum Stream : std::uint64_t { kSignal = 1, kGaps = 2, kArtifacts = 3 };
}

/// Fully observed recording; a pure function of cfg (including cfg.seed).
inline signal::RawRecording generate_signal(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, detail::kSignal));
  const std::size_t n = cfg.length;
  const double fs = signal::kSampleRateHz;
  const double baseline = rng.uniform(cfg.baseline_bpm.lo, cfg.baseline_bpm.hi);
  std::vector<double> x(n, baseline);

  if (cfg.variability_components > 0) {
    const double total_amp = rng.uniform(cfg.variability_amp_bpm.lo, cfg.variability_amp_bpm.hi);
    std::vector<double> weights(cfg.variability_components);
    double wsum = 0.0;
    for (auto& w : weights) wsum += (w = 0.2 + rng.uniform());
    for (std::size_t c = 0; c < cfg.variability_components; ++c) {
      const double amp = total_amp * weights[c] / wsum;
      const double freq = rng.uniform(cfg.variability_freq_hz.lo, cfg.variability_freq_hz.hi);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      if (amp == 0.0) continue;
      for (std::size_t i = 0; i < n; ++i)
        x[i] += amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / fs + phase);
    }
  }

  auto add_bump = [&](double amp, double duration_s) {
    const double center = rng.uniform(0.0, static_cast<double>(n));
    const double sigma = duration_s * fs / 4.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = (static_cast<double>(i) - center) / sigma;
      if (std::abs(z) < 8.0) x[i] += amp * std::exp(-0.5 * z * z);
    }
  };
  for (std::size_t k = 0; k < cfg.n_accels; ++k) {
    const double amp = rng.uniform(cfg.accel_amp_bpm.lo, cfg.accel_amp_bpm.hi);
    add_bump(amp, rng.uniform(cfg.accel_duration_s.lo, cfg.accel_duration_s.hi));
  }
  for (std::size_t k = 0; k < cfg.n_decels; ++k) {
    const double amp = rng.uniform(cfg.decel_amp_bpm.lo, cfg.decel_amp_bpm.hi);
    add_bump(-amp, rng.uniform(cfg.decel_duration_s.lo, cfg.decel_duration_s.hi));
  }
  if (cfg.noise_std_bpm > 0.0)
    for (auto& v : x) v += cfg.noise_std_bpm * rng.normal();
  for (auto& v : x) v = std::clamp(v, 30.0, 220.0);

  signal::RawRecording rec;
  rec.fhr_bpm = std::move(x);
  rec.observed.assign(n, 1);
  return rec;
}

struct DropoutResult {
  signal::RawRecording recording;
  std::vector<GapInterval> gaps;  // sorted by start, pairwise disjoint and non-adjacent
};

/// Marks cfg.gap_count disjoint intervals missing. Lengths are drawn from
/// cfg.gap_len_s (whole samples at 2 Hz); free space is split at uniformly
/// drawn cut points so every placement succeeds without rejection.
inline DropoutResult inject_dropouts(const signal::RawRecording& rec, const SynthConfig& cfg) {
  DropoutResult out{rec, {}};
  if (cfg.gap_count == 0) return out;
  const std::size_t n = rec.size();
  const auto max_len = static_cast<std::size_t>(std::llround(cfg.gap_len_s.hi * signal::kSampleRateHz));
  if (static_cast<double>(cfg.gap_count * max_len) > 0.9 * static_cast<double>(n)) {
    throw DataError("requested gap mass exceeds 90% of the signal");
  }
  Rng rng(derive_seed(cfg.seed, detail::kGaps));
  std::vector<std::size_t> lengths(cfg.gap_count);
  std::size_t total = 0;
  for (auto& len : lengths) {
    const auto lo = static_cast<std::size_t>(std::llround(cfg.gap_len_s.lo * signal::kSampleRateHz));
    len = lo + static_cast<std::size_t>(rng.below(max_len - lo + 1));
    len = std::max<std::size_t>(len, 1);
    total += len;
  }
  // Gaps are separated by at least one observed sample.
  const std::size_t separators = cfg.gap_count - 1;
  if (total + separators > n) throw DataError("gaps do not fit inside the signal");
  const std::size_t slack = n - total - separators;
  std::vector<std::size_t> cuts(cfg.gap_count);
  for (auto& c : cuts) c = static_cast<std::size_t>(rng.below(slack + 1));
  std::sort(cuts.begin(), cuts.end());
  std::size_t cursor = 0, prev_cut = 0;
  for (std::size_t g = 0; g < cfg.gap_count; ++g) {
    cursor += cuts[g] - prev_cut;
    prev_cut = cuts[g];
    out.gaps.push_back({cursor, lengths[g]});
    for (std::size_t i = cursor; i < cursor + lengths[g]; ++i) {
      out.recording.observed[i] = 0;
      out.recording.fhr_bpm[i] = 0.0;
    }
    cursor += lengths[g] + 1;
  }
  return out;
}

struct ArtifactResult {
  signal::RawRecording recording;
  std::vector<ArtifactSite> sites;  // sorted by index
};

/// Replaces cfg.artifact_count distinct observed samples by exactly 2x or 0.5x
/// their value. A doubling that would leave the parser's bpm band is turned
/// into a halving so damaged recordings still load.
inline ArtifactResult inject_doppler_artifacts(const signal::RawRecording& rec, const SynthConfig& cfg) {
  ArtifactResult out{rec, {}};
  if (cfg.artifact_count == 0) return out;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < rec.size(); ++i)
    if (rec.observed[i]) candidates.push_back(i);
  if (candidates.size() < cfg.artifact_count) throw DataError("not enough observed samples for artifacts");
  Rng rng(derive_seed(cfg.seed, detail::kArtifacts));
  // Partial Fisher-Yates.
  for (std::size_t k = 0; k < cfg.artifact_count; ++k) {
    const std::size_t j = k + static_cast<std::size_t>(rng.below(candidates.size() - k));
    std::swap(candidates[k], candidates[j]);
    double factor = rng.uniform() < 0.5 ? 2.0 : 0.5;
    if (rec.fhr_bpm[candidates[k]] * factor >= signal::kParseCeilingBpm) factor = 0.5;
    out.sites.push_back({candidates[k], factor});
  }
  std::sort(out.sites.begin(), out.sites.end(), [](auto& a, auto& b) { return a.index < b.index; });
  for (const auto& s : out.sites) out.recording.fhr_bpm[s.index] *= s.factor;
  return out;
}

struct SyntheticEpisode {
  std::string episode_id;
  std::string split;
  std::uint64_t seed = 0;
  signal::RawRecording clean;      // ground truth, fully observed
  signal::RawRecording recording;  // with gaps and artifacts
  std::vector<GapInterval> gaps;
  std::vector<ArtifactSite> artifacts;
};

/// Clean signal, then dropouts, then artifacts on the remaining observed samples.
inline SyntheticEpisode make_episode(SynthConfig cfg, std::uint64_t seed, std::string episode_id) {
  cfg.seed = seed;
  SyntheticEpisode ep;
  ep.episode_id = std::move(episode_id);
  ep.seed = seed;
  ep.clean = generate_signal(cfg);
  ep.clean.episode_id = ep.episode_id;
  auto dropped = inject_dropouts(ep.clean, cfg);
  auto damaged = inject_doppler_artifacts(dropped.recording, cfg);
  ep.recording = std::move(damaged.recording);
  ep.gaps = std::move(dropped.gaps);
  ep.artifacts = std::move(damaged.sites);
  return ep;
}

struct Dataset {
  std::vector<SyntheticEpisode> train, val, test;
};

/// Three disjoint episode-level splits. Episode k (counted across all splits)
/// gets seed derive_seed(master_seed, k) and id "ep%05d".
inline Dataset build_dataset(std::size_t n_train, std::size_t n_val, std::size_t n_test, const SynthConfig& cfg,
                             std::uint64_t master_seed) {
  if (n_train < 1 || n_val < 1 || n_test < 1) throw DataError("every split needs at least one episode");
  Dataset ds;
  std::size_t k = 0;
  auto fill = [&](std::vector<SyntheticEpisode>& split, std::size_t count, const char* name) {
    for (std::size_t i = 0; i < count; ++i, ++k) {
      char id[32];
      std::snprintf(id, sizeof(id), "ep%05zu", k);
      auto ep = make_episode(cfg, derive_seed(master_seed, k), id);
      ep.split = name;
      split.push_back(std::move(ep));
    }
  };
  fill(ds.train, n_train, "train");
  fill(ds.val, n_val, "val");
  fill(ds.test, n_test, "test");
  return ds;
}

/// One JSON object per line: episode_id, split, seed, length, gaps [[start,len],...],
/// artifacts [[index,factor],...].
inline nlohmann::json manifest_entry(const SyntheticEpisode& ep) {
  nlohmann::json j;
  j["episode_id"] = ep.episode_id;
  j["split"] = ep.split;
  j["seed"] = ep.seed;
  j["length"] = ep.clean.size();
  j["gaps"] = nlohmann::json::array();
  for (const auto& g : ep.gaps) j["gaps"].push_back({g.start, g.length});
  j["artifacts"] = nlohmann::json::array();
  for (const auto& a : ep.artifacts) j["artifacts"].push_back({a.index, a.factor});
  return j;
}

/// Layout: <dir>/<split>/<id>.csv (damaged), <dir>/truth/<split>/<id>.csv
/// (clean), <dir>/manifest.jsonl.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::ofstream manifest;
  fs::create_directories(dir);
  manifest.open(dir / "manifest.jsonl");
  if (!manifest) throw DataError("cannot write " + (dir / "manifest.jsonl").string());
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (const auto& ep : *split) {
      fs::create_directories(dir / ep.split);
      fs::create_directories(dir / "truth" / ep.split);
      signal::write_recording(dir / ep.split / (ep.episode_id + ".csv"), ep.recording);
      signal::write_recording(dir / "truth" / ep.split / (ep.episode_id + ".csv"), ep.clean);
      manifest << manifest_entry(ep).dump() << '\n';
    }
  }
}

}  // namespace fhrformer::synth
