#pragma once

// Recording ingestion and the preprocessing pipeline:
//   Doppler artifact correction -> linear gap fill (mask retained)
//   -> fixed length (keep the tail, left zero-pad) -> 0..220 bpm normalization.
//
// CSV schema for recordings and series files:
//   t,fhr_bpm,observed
//   0,140,1
//   0.5,,0
// `t` advances in 0.5 s steps (2 Hz). `observed` is 0 or 1; a missing sample
// may carry any placeholder (or empty) bpm.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "fhrformer/errors.hpp"

namespace fhrformer::signal {

inline constexpr double kSampleRateHz = 2.0;
inline constexpr double kMaxBpm = 220.0;
inline constexpr double kParseCeilingBpm = 300.0;
inline constexpr std::size_t kDefaultLength = 7200;

struct RawRecording {
  double sample_rate_hz = kSampleRateHz;
  std::vector<double> fhr_bpm;        // 0 at missing samples
  std::vector<std::uint8_t> observed;  // 1 = observed sample
  std::string episode_id;

  std::size_t size() const { return fhr_bpm.size(); }
  std::size_t missing_count() const {
    return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), std::uint8_t{0}));
  }
};

/// Preprocessed, fixed-length series in normalized units.
struct FHRSeries {
  std::vector<double> values;          // in [0, 1]
  std::vector<std::uint8_t> observed;  // 0 at interpolated or padded samples
  std::string episode_id;

  std::size_t size() const { return values.size(); }
};

struct DopplerConfig {
  std::size_t window = 15;  // observed neighbours used for the reference median
  double tolerance = 0.15;
};

struct PreprocessConfig {
  std::size_t length = kDefaultLength;
  DopplerConfig doppler;
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string trimmed(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  return s;
}

}  // namespace detail

/// Parses the recording CSV. Missing samples (observed=0, empty bpm, or
/// bpm <= 0) are stored as 0 with observed=0.
inline RawRecording parse_recording(std::istream& in, std::string episode_id = {}) {
  RawRecording rec;
  rec.episode_id = std::move(episode_id);
  std::string line;
  if (!std::getline(in, line)) throw DataError("no samples");
  if (detail::trimmed(line) != "t,fhr_bpm,observed") {
    throw DataError("line 1: expected header 't,fhr_bpm,observed'");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trimmed(line);
    if (line.empty()) continue;
    const auto cells = detail::split_commas(line);
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (cells.size() != 3) throw DataError(where + "expected 3 fields, got " + std::to_string(cells.size()));
    double t = 0.0;
    if (!detail::parse_double(cells[0], t)) throw DataError(where + "bad time value");
    const double expected_t = static_cast<double>(rec.size()) / kSampleRateHz;
    if (std::abs(t - expected_t) > 1e-6) {
      throw DataError(where + "time " + detail::format_double(t) + " does not follow the 2 Hz grid (expected " +
                      detail::format_double(expected_t) + ")");
    }
    double flag = 0.0;
    if (!detail::parse_double(cells[2], flag) || (flag != 0.0 && flag != 1.0)) {
      throw DataError(where + "observed must be 0 or 1");
    }
    double bpm = 0.0;
    const bool has_bpm = detail::parse_double(cells[1], bpm);
    if (!has_bpm && !cells[1].empty() && cells[1].find_first_not_of(" \t") != std::string_view::npos) {
      throw DataError(where + "bad bpm value");
    }
    bool observed = flag == 1.0 && has_bpm && bpm > 0.0;
    if (observed && (!std::isfinite(bpm) || bpm >= kParseCeilingBpm)) {
      throw DataError(where + "bpm " + std::string(cells[1]) + " outside (0, 300)");
    }
    rec.fhr_bpm.push_back(observed ? bpm : 0.0);
    rec.observed.push_back(observed ? 1 : 0);
  }
  if (rec.fhr_bpm.empty()) throw DataError("no samples");
  return rec;
}

inline RawRecording parse_recording(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return parse_recording(in, path.stem().string());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

/// Writes values in shortest round-trip form, so parse(write(r)) is bit-exact.
inline void write_recording(std::ostream& out, const RawRecording& rec) {
  if (rec.sample_rate_hz != kSampleRateHz) throw DataError("only 2 Hz recordings can be written");
  out << "t,fhr_bpm,observed\n";
  for (std::size_t i = 0; i < rec.size(); ++i) {
    out << detail::format_double(static_cast<double>(i) / kSampleRateHz) << ','
        << detail::format_double(rec.fhr_bpm[i]) << ',' << int(rec.observed[i]) << '\n';
  }
}

inline void write_recording(const std::filesystem::path& path, const RawRecording& rec) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_recording(out, rec);
}

// ---------------------------------------------------------------------------
// Artifact correction

/// Stand-in for Doppler doubling/halving removal. Each observed sample is
/// compared with the median of its `window` nearest observed neighbours
/// (by index distance, left first on ties). A ratio in [2-tau, 2+tau] halves
/// the sample; a ratio in [0.5-tau/4, 0.5+tau/4] doubles it. Medians are
/// taken over the uncorrected input. The observed mask is unchanged.
inline RawRecording correct_doppler_artifacts(const RawRecording& rec, const DopplerConfig& cfg = {},
                                              std::size_t* corrected = nullptr) {
  RawRecording out = rec;
  std::vector<std::size_t> obs;
  for (std::size_t i = 0; i < rec.size(); ++i)
    if (rec.observed[i]) obs.push_back(i);
  std::size_t n_fixed = 0;
  std::vector<double> neigh;
  for (std::size_t j = 0; j < obs.size(); ++j) {
    neigh.clear();
    std::size_t left = j, right = j + 1;  // obs[left-1] and obs[right] are the next candidates
    while (neigh.size() < cfg.window && (left > 0 || right < obs.size())) {
      const bool take_left =
          left > 0 && (right >= obs.size() || obs[j] - obs[left - 1] <= obs[right] - obs[j]);
      if (take_left) {
        neigh.push_back(rec.fhr_bpm[obs[--left]]);
      } else {
        neigh.push_back(rec.fhr_bpm[obs[right++]]);
      }
    }
    if (neigh.empty()) continue;
    const std::size_t mid = neigh.size() / 2;
    std::nth_element(neigh.begin(), neigh.begin() + mid, neigh.end());
    double median = neigh[mid];
    if (neigh.size() % 2 == 0) {
      const double lower = *std::max_element(neigh.begin(), neigh.begin() + mid);
      median = 0.5 * (median + lower);
    }
    if (median <= 0.0) continue;
    const double v = rec.fhr_bpm[obs[j]];
    const double ratio = v / median;
    if (ratio >= 2.0 - cfg.tolerance && ratio <= 2.0 + cfg.tolerance) {
      out.fhr_bpm[obs[j]] = v * 0.5;
      ++n_fixed;
    } else if (ratio >= 0.5 - cfg.tolerance / 4.0 && ratio <= 0.5 + cfg.tolerance / 4.0) {
      out.fhr_bpm[obs[j]] = v * 2.0;
      ++n_fixed;
    }
  }
  if (corrected) *corrected = n_fixed;
  return out;
}

// ---------------------------------------------------------------------------
// Gap filling, length fixing, normalization

struct MaskedValues {
  std::vector<double> values;
  std::vector<std::uint8_t> observed;
};

/// Interior gaps are linearly interpolated between the flanking observed
/// samples; leading and trailing gaps hold the nearest observed value.
inline MaskedValues fill_gaps_linear(const RawRecording& rec) {
  MaskedValues out{rec.fhr_bpm, rec.observed};
  const std::size_t n = rec.size();
  std::size_t first = n;
  for (std::size_t i = 0; i < n; ++i)
    if (rec.observed[i]) {
      first = i;
      break;
    }
  if (first == n) throw DataError("recording '" + rec.episode_id + "' has no observed samples");
  for (std::size_t i = 0; i < first; ++i) out.values[i] = rec.fhr_bpm[first];
  std::size_t prev = first;
  for (std::size_t i = first + 1; i < n; ++i) {
    if (!rec.observed[i]) continue;
    if (i > prev + 1) {
      const double a = rec.fhr_bpm[prev], b = rec.fhr_bpm[i];
      const double span = static_cast<double>(i - prev);
      for (std::size_t k = prev + 1; k < i; ++k) out.values[k] = a + (b - a) * static_cast<double>(k - prev) / span;
    }
    prev = i;
  }
  for (std::size_t i = prev + 1; i < n; ++i) out.values[i] = rec.fhr_bpm[prev];
  return out;
}

/// Keeps the last `length` samples, or left-pads with zeros (mask 0) so the
/// end of the signal stays aligned with the end of the window.
inline MaskedValues fix_length(MaskedValues in, std::size_t length = kDefaultLength) {
  const std::size_t n = in.values.size();
  if (n == length) return in;
  MaskedValues out;
  if (n > length) {
    out.values.assign(in.values.end() - static_cast<std::ptrdiff_t>(length), in.values.end());
    out.observed.assign(in.observed.end() - static_cast<std::ptrdiff_t>(length), in.observed.end());
  } else {
    out.values.assign(length - n, 0.0);
    out.observed.assign(length - n, 0);
    out.values.insert(out.values.end(), in.values.begin(), in.values.end());
    out.observed.insert(out.observed.end(), in.observed.begin(), in.observed.end());
  }
  return out;
}

/// bpm -> [0, 1] by the fixed 220 bpm map. Values above 220 are clamped to 1
/// and counted in `clamped`.
inline std::vector<double> normalize(std::span<const double> bpm, std::size_t* clamped = nullptr) {
  std::vector<double> out(bpm.size());
  std::size_t n_clamped = 0;
  for (std::size_t i = 0; i < bpm.size(); ++i) {
    if (!(bpm[i] >= 0.0)) throw DataError("normalize: negative or NaN bpm");
    if (bpm[i] > kMaxBpm) {
      out[i] = 1.0;
      ++n_clamped;
    } else {
      out[i] = bpm[i] / kMaxBpm;
    }
  }
  if (clamped) *clamped = n_clamped;
  return out;
}

inline std::vector<double> denormalize(std::span<const double> unit) {
  std::vector<double> out(unit.size());
  for (std::size_t i = 0; i < unit.size(); ++i) out[i] = unit[i] * kMaxBpm;
  return out;
}

/// Throws DataError if the series breaks a length, range or mask invariant.
inline void validate_series(const FHRSeries& s, std::size_t expected_length = 0) {
  if (s.values.size() != s.observed.size()) throw DataError("series values/mask length differ");
  if (expected_length && s.values.size() != expected_length) {
    throw DataError("series '" + s.episode_id + "' has length " + std::to_string(s.values.size()) + ", expected " +
                    std::to_string(expected_length));
  }
  for (double v : s.values)
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("series '" + s.episode_id + "' has a value outside [0,1]");
}

/// Full pipeline. `clamped`, if given, receives the number of >220 bpm samples.
inline FHRSeries preprocess(const RawRecording& rec, const PreprocessConfig& cfg = {},
                            std::size_t* clamped = nullptr) {
  if (rec.sample_rate_hz != kSampleRateHz) throw DataError("sample rate must be 2 Hz");
  const RawRecording corrected = correct_doppler_artifacts(rec, cfg.doppler);
  MaskedValues filled = fix_length(fill_gaps_linear(corrected), cfg.length);
  FHRSeries s;
  s.values = normalize(filled.values, clamped);
  s.observed = std::move(filled.observed);
  s.episode_id = rec.episode_id;
  return s;
}

// ---------------------------------------------------------------------------
// Series files (same schema, bpm de-normalized)

inline void write_series(std::ostream& out, const FHRSeries& s) {
  RawRecording rec;
  rec.fhr_bpm = denormalize(s.values);
  rec.observed = s.observed;
  write_recording(out, rec);
}

inline void write_series(const std::filesystem::path& path, const FHRSeries& s) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_series(out, s);
}

/// Reads a series file. Unobserved rows keep their stored (interpolated) value.
inline FHRSeries read_series(std::istream& in, std::string episode_id = {}) {
  FHRSeries s;
  s.episode_id = std::move(episode_id);
  std::string line;
  if (!std::getline(in, line) || detail::trimmed(line) != "t,fhr_bpm,observed") {
    throw DataError("line 1: expected header 't,fhr_bpm,observed'");
  }
  std::size_t line_no = 1;
  std::vector<double> bpm;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trimmed(line);
    if (line.empty()) continue;
    const auto cells = detail::split_commas(line);
    double v = 0.0, flag = 0.0;
    if (cells.size() < 3 || !detail::parse_double(cells[1], v) || !detail::parse_double(cells[2], flag) ||
        (flag != 0.0 && flag != 1.0)) {
      throw DataError("line " + std::to_string(line_no) + ": malformed series row");
    }
    bpm.push_back(v);
    s.observed.push_back(flag == 1.0 ? 1 : 0);
  }
  if (bpm.empty()) throw DataError("no samples");
  s.values = normalize(bpm);
  return s;
}

inline FHRSeries read_series(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return read_series(in, path.stem().string());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace fhrformer::signal
