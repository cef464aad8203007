// include/olsofu/estimator.hpp
//
// Soft confusion matrix on D_0' and the black-box shift estimate
// s = C^{-1} * mean_x f(x).

#pragma once

#include <cstdint>

#include "olsofu/model.hpp"
#include "olsofu/numkit.hpp"
#include "olsofu/synthdata.hpp"

namespace olsofu {

// Confusion matrices with a smaller minimum singular value are rejected.
inline constexpr double kMinConfusionSigma = 1e-8;
inline constexpr double kDefaultConfusionLambda = 0.01;

struct ConfusionMatrix {
  Matrix values;  // C[i][j] = mean predicted prob of i over class-j points
  double sigma_min = 0.0;
  std::uint64_t model_fingerprint = 0;

  std::size_t size() const { return values.rows(); }
};

// Builds C from per-point probabilities and labels; shared by the model
// overload and by callers that already hold the probabilities.
ConfusionMatrix confusion_from_probs(const Matrix& probs, const std::vector<int>& labels, int num_classes,
                                     std::uint64_t model_fingerprint);
ConfusionMatrix confusion_matrix(const ModelParams& f, const LabeledSet& val);

// (1 - lambda) C + lambda I; keeps the fingerprint.
ConfusionMatrix regularize_confusion(const ConfusionMatrix& c, double lambda);

struct MarginalEstimate {
  Vector raw;
  SimplexVector clipped = SimplexVector::uniform(1);
};

// s = C^{-1} mean_prob, clipped = project_simplex(s).
MarginalEstimate bbse_from_mean(const ConfusionMatrix& c, std::span<const double> mean_prob);
Vector mean_rows(const Matrix& m);

// Requires C to have been measured on the same model f.
MarginalEstimate bbse_estimate(const ModelParams& f, const ConfusionMatrix& c, const Matrix& batch_inputs);

}  // namespace olsofu
