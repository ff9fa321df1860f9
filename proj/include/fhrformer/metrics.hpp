#pragma once

// Reconstruction quality metrics.
//
// Pointwise metrics (MSE, RMSE, MAE, PSNR, CC) use only the evaluation mask:
// samples that lie in a masked patch AND were originally observed. Values are
// compared in bpm.
//
// 1-D SSIM: Gaussian-weighted sliding window of 61 samples (sigma 7.5),
// stride 1, C1 = (0.01 R)^2, C2 = (0.03 R)^2 with R = 220 bpm; the mean over
// all full windows. Signals shorter than the window use one uniformly
// weighted global window.
//
// FID: Frechet distance between Gaussians fitted to mean-pooled encoder
// latents (eval mode, every patch visible) of the real and reconstructed sets.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fhrformer/model.hpp"
#include "fhrformer/random.hpp"
#include "fhrformer/reconstructor.hpp"
#include "fhrformer/signalio.hpp"

namespace fhrformer::metrics {

inline constexpr double kPsnrCapDb = 200.0;

struct PointErrors {
  double mse = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  std::size_t n_points = 0;
  bool evaluable = false;  // false: no evaluable points; the numbers are not meaningful
};

namespace detail {
inline void require_aligned(std::size_t a, std::size_t b, std::size_t m) {
  if (a != b || a != m) throw std::invalid_argument("metric inputs have different lengths");
}
}  // namespace detail

/// Samples in masked patches that were originally observed.
inline std::vector<std::uint8_t> evaluation_mask(std::span<const std::uint8_t> observed, const model::MaskSpec& mask,
                                                 std::size_t patch_size) {
  std::vector<std::uint8_t> out(observed.size(), 0);
  for (auto i : mask.masked())
    for (std::size_t j = i * patch_size; j < (i + 1) * patch_size; ++j) out[j] = observed[j];
  return out;
}

inline PointErrors masked_point_errors(std::span<const double> truth, std::span<const double> recon,
                                       std::span<const std::uint8_t> eval_mask) {
  detail::require_aligned(truth.size(), recon.size(), eval_mask.size());
  PointErrors e;
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!eval_mask[i]) continue;
    const double d = recon[i] - truth[i];
    se += d * d;
    ae += std::abs(d);
    ++e.n_points;
  }
  if (e.n_points == 0) return e;
  e.evaluable = true;
  e.mse = se / static_cast<double>(e.n_points);
  e.rmse = std::sqrt(e.mse);
  e.mae = ae / static_cast<double>(e.n_points);
  return e;
}

/// 10 log10(max^2 / MSE) with max taken over the evaluated truth samples.
/// MSE == 0 gives kPsnrCapDb; no evaluable points gives nullopt.
inline std::optional<double> psnr(std::span<const double> truth, std::span<const double> recon,
                                  std::span<const std::uint8_t> eval_mask) {
  const auto e = masked_point_errors(truth, recon, eval_mask);
  if (!e.evaluable) return std::nullopt;
  double peak = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (eval_mask[i]) peak = std::max(peak, std::abs(truth[i]));
  if (e.mse == 0.0) return kPsnrCapDb;
  if (peak == 0.0) return std::nullopt;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / e.mse));
}

/// Pearson correlation over the evaluable samples; nullopt with fewer than
/// two points or zero variance on either side.
inline std::optional<double> cc(std::span<const double> truth, std::span<const double> recon,
                                std::span<const std::uint8_t> eval_mask) {
  detail::require_aligned(truth.size(), recon.size(), eval_mask.size());
  double n = 0.0, mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (eval_mask[i]) {
      n += 1.0;
      mx += truth[i];
      my += recon[i];
    }
  if (n < 2.0) return std::nullopt;
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (eval_mask[i]) {
      const double dx = truth[i] - mx, dy = recon[i] - my;
      sxy += dx * dy;
      sxx += dx * dx;
      syy += dy * dy;
    }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct SsimConfig {
  std::size_t window = 61;
  double sigma = 7.5;
  double dynamic_range = signal::kMaxBpm;
  double k1 = 0.01;
  double k2 = 0.03;
};

namespace detail {
inline double ssim_window(std::span<const double> x, std::span<const double> y, std::span<const double> w,
                          const SsimConfig& cfg) {
  const double c1 = (cfg.k1 * cfg.dynamic_range) * (cfg.k1 * cfg.dynamic_range);
  const double c2 = (cfg.k2 * cfg.dynamic_range) * (cfg.k2 * cfg.dynamic_range);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    mx += w[i] * x[i];
    my += w[i] * y[i];
  }
  double vx = 0.0, vy = 0.0, cxy = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    vx += w[i] * (x[i] - mx) * (x[i] - mx);
    vy += w[i] * (y[i] - my) * (y[i] - my);
    cxy += w[i] * (x[i] - mx) * (y[i] - my);
  }
  return ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}
}  // namespace detail

/// Normalized Gaussian window weights.
inline std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> w(n);
  const double center = (static_cast<double>(n) - 1.0) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = (static_cast<double>(i) - center) / sigma;
    total += (w[i] = std::exp(-0.5 * z * z));
  }
  for (auto& v : w) v /= total;
  return w;
}

inline double ssim_1d(std::span<const double> x, std::span<const double> y, const SsimConfig& cfg = {}) {
  if (x.size() != y.size() || x.empty()) throw std::invalid_argument("ssim_1d: signals must be non-empty and aligned");
  if (x.size() < cfg.window) {
    const std::vector<double> w(x.size(), 1.0 / static_cast<double>(x.size()));
    return detail::ssim_window(x, y, w, cfg);
  }
  const auto w = gaussian_window(cfg.window, cfg.sigma);
  const std::size_t count = x.size() - cfg.window + 1;
  double total = 0.0;
  for (std::size_t s = 0; s < count; ++s) total += detail::ssim_window(x.subspan(s, cfg.window), y.subspan(s, cfg.window), w, cfg);
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Frechet distance

struct FrechetResult {
  double distance = 0.0;
  bool regularized = false;  // covariance was singular; eps*I added to both
};

using FeatureSet = std::vector<std::vector<double>>;

namespace detail {

inline Eigen::MatrixXd to_matrix(const FeatureSet& set) {
  if (set.size() < 2) throw std::invalid_argument("Frechet distance needs at least 2 samples per set");
  const std::size_t dim = set[0].size();
  Eigen::MatrixXd m(set.size(), dim);
  for (std::size_t r = 0; r < set.size(); ++r) {
    if (set[r].size() != dim) throw std::invalid_argument("feature vectors differ in length");
    for (std::size_t c = 0; c < dim; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = set[r][c];
  }
  return m;
}

inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

inline bool is_singular(const Eigen::MatrixXd& s) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s, Eigen::EigenvaluesOnly);
  const double hi = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  return es.eigenvalues().minCoeff() <= 1e-12 * hi;
}

}  // namespace detail

/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)); sample covariances
/// (n - 1), matrix root via S1^(1/2) S2 S1^(1/2) with eigenvalues clamped at 0.
inline FrechetResult frechet_distance(const FeatureSet& a, const FeatureSet& b, double eps = 1e-6) {
  const Eigen::MatrixXd fa = detail::to_matrix(a), fb = detail::to_matrix(b);
  if (fa.cols() != fb.cols()) throw std::invalid_argument("feature sets differ in dimension");
  const Eigen::RowVectorXd mu_a = fa.colwise().mean(), mu_b = fb.colwise().mean();
  const Eigen::MatrixXd ca = fa.rowwise() - mu_a, cb = fb.rowwise() - mu_b;
  Eigen::MatrixXd sa = (ca.transpose() * ca) / static_cast<double>(fa.rows() - 1);
  Eigen::MatrixXd sb = (cb.transpose() * cb) / static_cast<double>(fb.rows() - 1);
  FrechetResult r;
  if (detail::is_singular(sa) || detail::is_singular(sb)) {
    const auto id = Eigen::MatrixXd::Identity(sa.rows(), sa.cols());
    sa += eps * id;
    sb += eps * id;
    r.regularized = true;
  }
  const Eigen::MatrixXd root_a = detail::sqrt_psd(sa);
  const Eigen::MatrixXd inner = root_a * sb * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  r.distance = std::max(0.0, (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_root);
  return r;
}

/// Mean-pooled encoder latents of a series (eval mode, all patches visible).
inline std::vector<double> encoder_features(const model::ModelWeights& w, std::span<const double> series) {
  const auto patches = model::patchify(series, w.config.patch_size);
  std::vector<std::size_t> all(patches.count);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  model::ForwardContext ctx{model::Mode::eval, 0, 0.0, 0};
  const auto z = model::encode_patches(patches, all, w, ctx);
  std::vector<double> f(z.cols(), 0.0);
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t c = 0; c < z.cols(); ++c) f[c] += z.at(r, c);
  for (auto& v : f) v /= static_cast<double>(z.rows());
  return f;
}

inline FrechetResult fid(const std::vector<std::vector<double>>& real, const std::vector<std::vector<double>>& recon,
                         const model::ModelWeights& encoder) {
  FeatureSet fa, fb;
  for (const auto& s : real) fa.push_back(encoder_features(encoder, s));
  for (const auto& s : recon) fb.push_back(encoder_features(encoder, s));
  return frechet_distance(fa, fb);
}

// ---------------------------------------------------------------------------
// Evaluation

struct SeriesMetrics {
  std::string episode_id;
  double rl = 0.0;  // masked-patch squared-error sum per patch, normalized units
  PointErrors errors;
  std::optional<double> psnr_db;
  double ssim = 0.0;
  std::optional<double> cc;
};

struct MetricsReport {
  double rl = 0.0;
  double mse = 0.0;   // bpm^2
  double rmse = 0.0;  // bpm, sqrt(mse)
  double mae = 0.0;   // bpm
  double psnr_db = 0.0;
  double ssim = 0.0;
  std::optional<double> fid;
  bool fid_regularized = false;
  double cc = 0.0;
  std::size_t n_points = 0;
  std::size_t n_series = 0;
  std::size_t n_unevaluable = 0;  // series without evaluable points
};

struct EvaluationResult {
  std::vector<SeriesMetrics> series;
  MetricsReport aggregate;
};

struct EvalConfig {
  std::size_t patch_size = 30;
  double mask_ratio = 0.15;
  std::uint64_t seed = 0;
};

/// Mask for series `index` of an evaluation run.
inline model::MaskSpec evaluation_patch_mask(std::size_t n_patches, const EvalConfig& cfg, std::size_t index) {
  Rng rng(derive_seed(cfg.seed, index));
  return model::sample_mask(n_patches, cfg.mask_ratio, rng);
}

/// Masks each series (deterministically from cfg.seed), reconstructs, and
/// scores it. Aggregates are per-series means, except RMSE = sqrt(mean MSE)
/// and FID, which is computed once over the whole set (only when an encoder
/// is supplied and there are at least two series).
inline EvaluationResult evaluate(const Reconstructor& reconstruct, const std::vector<signal::FHRSeries>& set,
                                 const EvalConfig& cfg, const model::ModelWeights* feature_encoder = nullptr) {
  EvaluationResult out;
  std::vector<std::vector<double>> real_unit, recon_unit;
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto& s = set[k];
    const auto mask = evaluation_patch_mask(s.size() / cfg.patch_size, cfg, k);
    const auto predicted = reconstruct(s.values, mask);
    const auto composed = compose_samples(s.values, predicted, mask, cfg.patch_size);
    SeriesMetrics m;
    m.episode_id = s.episode_id;
    double se = 0.0;
    for (auto i : mask.masked())
      for (std::size_t j = i * cfg.patch_size; j < (i + 1) * cfg.patch_size; ++j)
        se += (predicted[j] - s.values[j]) * (predicted[j] - s.values[j]);
    m.rl = se / static_cast<double>(mask.masked().size());
    const auto truth = signal::denormalize(s.values);
    const auto recon = signal::denormalize(composed);
    const auto emask = evaluation_mask(s.observed, mask, cfg.patch_size);
    m.errors = masked_point_errors(truth, recon, emask);
    m.psnr_db = psnr(truth, recon, emask);
    m.ssim = ssim_1d(truth, recon);
    m.cc = cc(truth, recon, emask);
    out.series.push_back(m);
    real_unit.push_back(s.values);
    recon_unit.push_back(composed);
  }

  auto& agg = out.aggregate;
  agg.n_series = out.series.size();
  std::size_t n_err = 0, n_psnr = 0, n_cc = 0;
  for (const auto& m : out.series) {
    agg.rl += m.rl;
    agg.ssim += m.ssim;
    if (m.errors.evaluable) {
      agg.mse += m.errors.mse;
      agg.mae += m.errors.mae;
      agg.n_points += m.errors.n_points;
      ++n_err;
    } else {
      ++agg.n_unevaluable;
    }
    if (m.psnr_db) {
      agg.psnr_db += *m.psnr_db;
      ++n_psnr;
    }
    if (m.cc) {
      agg.cc += *m.cc;
      ++n_cc;
    }
  }
  if (agg.n_series) {
    agg.rl /= static_cast<double>(agg.n_series);
    agg.ssim /= static_cast<double>(agg.n_series);
  }
  if (n_err) {
    agg.mse /= static_cast<double>(n_err);
    agg.mae /= static_cast<double>(n_err);
  }
  agg.rmse = std::sqrt(agg.mse);
  if (n_psnr) agg.psnr_db /= static_cast<double>(n_psnr);
  if (n_cc) agg.cc /= static_cast<double>(n_cc);
  if (feature_encoder && set.size() >= 2) {
    const auto f = fid(real_unit, recon_unit, *feature_encoder);
    agg.fid = f.distance;
    agg.fid_regularized = f.regularized;
  }
  return out;
}

namespace detail {
inline void put_optional(std::ostream& out, const std::optional<double>& v) {
  if (v) out << *v;
}
}  // namespace detail

/// One row per series plus a final "aggregate" row. Undefined values are empty cells.
inline void write_report_csv(std::ostream& out, const EvaluationResult& r) {
  out.precision(10);
  out << "episode_id,rl,mse_bpm2,rmse_bpm,mae_bpm,psnr_db,ssim,fid,cc,n_points\n";
  for (const auto& m : r.series) {
    out << m.episode_id << ',' << m.rl << ',';
    if (m.errors.evaluable) out << m.errors.mse << ',' << m.errors.rmse << ',' << m.errors.mae << ',';
    else out << ",,,";
    detail::put_optional(out, m.psnr_db);
    out << ',' << m.ssim << ",,";
    detail::put_optional(out, m.cc);
    out << ',' << m.errors.n_points << '\n';
  }
  const auto& a = r.aggregate;
  out << "aggregate," << a.rl << ',' << a.mse << ',' << a.rmse << ',' << a.mae << ',' << a.psnr_db << ',' << a.ssim
      << ',';
  detail::put_optional(out, a.fid);
  out << ',' << a.cc << ',' << a.n_points << '\n';
}

inline void write_report_table(std::ostream& out, const EvaluationResult& r, const SsimConfig& ssim_cfg = {}) {
  const auto& a = r.aggregate;
  out << "# SSIM window " << ssim_cfg.window << " samples, sigma " << ssim_cfg.sigma << ", R " << ssim_cfg.dynamic_range
      << " bpm; PSNR cap " << kPsnrCapDb << " dB; FID on mean-pooled encoder latents\n";
  out << "series evaluated : " << a.n_series << " (" << a.n_unevaluable << " without evaluable points)\n";
  out << "points evaluated : " << a.n_points << '\n';
  out << "RL               : " << a.rl << '\n';
  out << "MSE  (bpm^2)     : " << a.mse << '\n';
  out << "RMSE (bpm)       : " << a.rmse << '\n';
  out << "MAE  (bpm)       : " << a.mae << '\n';
  out << "PSNR (dB)        : " << a.psnr_db << '\n';
  out << "SSIM             : " << a.ssim << '\n';
  out << "FID              : ";
  if (a.fid) out << *a.fid << (a.fid_regularized ? " (covariance regularized)" : "");
  else out << "n/a";
  out << '\n' << "CC               : " << a.cc << '\n';
}

}  // namespace fhrformer::metrics
