#pragma once

// Training objective over the masked patches only:
//   recon = (1/|M|) sum_i ||x_hat_i - x_i||^2        (per-patch squared-error sum)
//   freq  = (1/|M|) sum_i (1/K) sum_k (1 - exp(-D_ik))^beta * D_ik,
//           D_ik = | |F(x_hat_i)_k| - |F(x_i)_k| |,  Hann window, K = p_s/2 + 1
//   total = alpha * recon + (1 - alpha) * freq

#include <cstddef>
#include <stdexcept>

#include "fhrformer/diffcore.hpp"

namespace fhrformer::objective {

using diff::Tensor;

struct LossConfig {
  double alpha = 0.95;
  double beta = 1.0;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
    if (!(beta >= 0.0)) throw std::invalid_argument("beta must be >= 0");
  }
};

/// Number of frequency bins compared per patch.
inline std::size_t frequency_bins(std::size_t patch_size) { return diff::one_sided_bins(patch_size); }

namespace detail {
inline void require_rows(const Tensor& predicted, const Tensor& target, const char* what) {
  if (predicted.rank() != 2 || predicted.shape() != target.shape()) {
    throw std::invalid_argument(std::string(what) + ": predicted " + diff::shape_string(predicted.shape()) +
                                " vs target " + diff::shape_string(target.shape()));
  }
  if (predicted.rows() == 0) throw std::invalid_argument(std::string(what) + ": no masked patches");
}
}  // namespace detail

/// Masked-patch MSE; rows are patches. Scalar tensor.
inline Tensor recon_loss(const Tensor& predicted, const Tensor& target) {
  detail::require_rows(predicted, target, "recon_loss");
  return diff::scale(diff::sum(diff::square(diff::sub(predicted, target))), 1.0 / static_cast<double>(predicted.rows()));
}

/// Focal-weighted spectral distance per element, [rows, K].
inline Tensor focal_frequency_terms(const Tensor& predicted, const Tensor& target, double beta) {
  const Tensor delta = diff::abs(diff::sub(diff::dft_magnitude(predicted), diff::dft_magnitude(target)));
  if (beta == 0.0) return delta;
  Tensor weight = diff::scale(diff::exp(diff::scale(delta, -1.0)), -1.0, 1.0);
  if (beta != 1.0) weight = diff::pow(weight, beta);
  return diff::mul(weight, delta);
}

/// Loss of one patch pair (vectors of length p_s). Scalar tensor.
inline Tensor focal_freq_patch(const Tensor& target, const Tensor& predicted, double beta = 1.0) {
  if (target.size() != predicted.size() || target.size() == 0) {
    throw std::invalid_argument("focal_freq_patch: patch lengths differ");
  }
  const std::size_t n = target.size();
  return diff::mean(focal_frequency_terms(diff::reshape(predicted, {1, n}), diff::reshape(target, {1, n}), beta));
}

/// Mean of per-patch focal frequency losses over the masked patches.
inline Tensor freq_loss(const Tensor& predicted, const Tensor& target, double beta = 1.0) {
  detail::require_rows(predicted, target, "freq_loss");
  return diff::mean(focal_frequency_terms(predicted, target, beta));
}

inline Tensor total_loss(const Tensor& recon, const Tensor& freq, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  return diff::add(diff::scale(recon, alpha), diff::scale(freq, 1.0 - alpha));
}

struct LossBreakdown {
  Tensor total;  // differentiable
  double recon = 0.0;
  double freq = 0.0;
  double total_value = 0.0;
  std::size_t masked_count = 0;
};

/// Full objective on aligned [|M|, p_s] predicted and target rows.
inline LossBreakdown compute_loss(const Tensor& predicted, const Tensor& target, const LossConfig& cfg) {
  cfg.validate();
  const Tensor r = recon_loss(predicted, target);
  const Tensor f = freq_loss(predicted, target, cfg.beta);
  LossBreakdown out;
  out.total = total_loss(r, f, cfg.alpha);
  out.recon = r.item();
  out.freq = f.item();
  out.total_value = out.total.item();
  out.masked_count = predicted.rows();
  return out;
}

}  // namespace fhrformer::objective
