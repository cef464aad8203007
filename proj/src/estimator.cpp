// src/estimator.cpp

#include "olsofu/estimator.hpp"

#include <string>

#include "olsofu/errors.hpp"

namespace olsofu {

ConfusionMatrix confusion_from_probs(const Matrix& probs, const std::vector<int>& labels, int num_classes,
                                     std::uint64_t model_fingerprint) {
  const auto k = static_cast<std::size_t>(num_classes);
  if (probs.cols() != k || labels.size() != probs.rows())
    throw InvalidArgument("confusion_matrix: probabilities do not match the labels");
  ConfusionMatrix c;
  c.values = Matrix(k, k);
  c.model_fingerprint = model_fingerprint;
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto j = static_cast<std::size_t>(labels[n]);
    ++counts[j];
    for (std::size_t i = 0; i < k; ++i) c.values(i, j) += probs(n, i);
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (counts[j] == 0)
      throw InvalidArgument("confusion_matrix: validation set has no example of class " + std::to_string(j));
    for (std::size_t i = 0; i < k; ++i) c.values(i, j) /= static_cast<double>(counts[j]);
  }
  c.sigma_min = min_singular_value(c.values);
  if (c.sigma_min < kMinConfusionSigma)
    throw IllConditionedConfusion("confusion_matrix: minimum singular value " + std::to_string(c.sigma_min) +
                                      " is below the invertibility threshold",
                                  c.sigma_min);
  return c;
}

ConfusionMatrix confusion_matrix(const ModelParams& f, const LabeledSet& val) {
  if (val.num_classes != static_cast<int>(f.num_classes()))
    throw InvalidArgument("confusion_matrix: class count mismatch");
  const Matrix probs = forward_batch(f, val.inputs).probs;
  return confusion_from_probs(probs, val.labels, val.num_classes, f.fingerprint());
}

ConfusionMatrix regularize_confusion(const ConfusionMatrix& c, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("regularize_confusion: lambda must be in [0, 1]");
  ConfusionMatrix out = c;
  const std::size_t k = c.size();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      out.values(i, j) = (1.0 - lambda) * c.values(i, j) + (i == j ? lambda : 0.0);
  out.sigma_min = min_singular_value(out.values);
  return out;
}

Vector mean_rows(const Matrix& m) {
  if (m.rows() == 0) throw InvalidArgument("mean_rows: empty matrix");
  Vector mean(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) mean[j] += m(i, j);
  for (double& v : mean) v /= static_cast<double>(m.rows());
  return mean;
}

MarginalEstimate bbse_from_mean(const ConfusionMatrix& c, std::span<const double> mean_prob) {
  if (mean_prob.size() != c.size()) throw InvalidArgument("bbse_estimate: dimension mismatch");
  MarginalEstimate est;
  est.raw = solve_linear(c.values, mean_prob);
  est.clipped = project_simplex(est.raw);
  return est;
}

MarginalEstimate bbse_estimate(const ModelParams& f, const ConfusionMatrix& c, const Matrix& batch_inputs) {
  if (c.model_fingerprint != f.fingerprint())
    throw ContractViolation("bbse_estimate: confusion matrix was measured on a different model");
  if (c.size() != f.num_classes()) throw InvalidArgument("bbse_estimate: dimension mismatch");
  return bbse_from_mean(c, mean_rows(forward_batch(f, batch_inputs).probs));
}

}  // namespace olsofu
