#pragma once

#include <functional>
#include <span>
#include <vector>

#include "fhrformer/model.hpp"

namespace fhrformer {

/// Anything that predicts every sample of a window given a patch mask. The
/// result has the window's length; callers decide which samples to keep.
using Reconstructor = std::function<std::vector<double>(std::span<const double> window, const model::MaskSpec& mask)>;

/// Eval-mode model prediction (x_hat for every patch, unpatchified). Holds a
/// reference: `w` must outlive the returned callable.
inline Reconstructor model_reconstructor(const model::ModelWeights& w) {
  return [&w](std::span<const double> window, const model::MaskSpec& mask) {
    const auto r = model::forward(window, mask, w, {model::Mode::eval, 0});
    const auto v = r.predicted.values();
    return std::vector<double>(v.begin(), v.end());
  };
}

/// "Perfect copy" reconstructor: returns its input unchanged.
inline Reconstructor copy_reconstructor() {
  return [](std::span<const double> window, const model::MaskSpec&) {
    return std::vector<double>(window.begin(), window.end());
  };
}

/// Original samples at visible patches, `predicted` at masked ones.
inline std::vector<double> compose_samples(std::span<const double> original, std::span<const double> predicted,
                                           const model::MaskSpec& mask, std::size_t patch_size) {
  std::vector<double> out(original.begin(), original.end());
  for (auto i : mask.masked())
    for (std::size_t j = i * patch_size; j < (i + 1) * patch_size; ++j) out[j] = predicted[j];
  return out;
}

}  // namespace fhrformer
