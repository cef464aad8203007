#include <doctest.h>

#include "olsofu/errors.hpp"
#include "olsofu/estimator.hpp"
#include "olsofu/validate.hpp"

using namespace olsofu;

namespace {

ConfusionMatrix make_c(std::initializer_list<std::initializer_list<double>> rows) {
  ConfusionMatrix c;
  c.values = Matrix::from_rows(rows);
  c.sigma_min = min_singular_value(c.values);
  return c;
}

}  // namespace

TEST_CASE("confusion matrix by hand") {
  const Matrix probs = Matrix::from_rows({{0.9, 0.1}, {0.9, 0.1}, {0.2, 0.8}});
  const ConfusionMatrix c = confusion_from_probs(probs, {0, 0, 1}, 2, 77);
  CHECK(c.values(0, 0) == doctest::Approx(0.9));
  CHECK(c.values(1, 0) == doctest::Approx(0.1));
  CHECK(c.values(0, 1) == doctest::Approx(0.2));
  CHECK(c.values(1, 1) == doctest::Approx(0.8));
  CHECK(c.model_fingerprint == 77);

  const Matrix hot = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const ConfusionMatrix id = confusion_from_probs(hot, {0, 1, 2}, 3, 0);
  CHECK(id.values == Matrix::identity(3));
  CHECK(id.sigma_min == doctest::Approx(1.0));
}

TEST_CASE("degenerate confusion matrices are refused") {
  const Matrix uniform(4, 2, 0.5);
  CHECK_THROWS_AS(confusion_from_probs(uniform, {0, 1, 0, 1}, 2, 0), IllConditionedConfusion);
  const Matrix probs = Matrix::from_rows({{0.9, 0.1}, {0.8, 0.2}});
  CHECK_THROWS_AS(confusion_from_probs(probs, {0, 0}, 2, 0), InvalidArgument);
}

TEST_CASE("regularization") {
  const ConfusionMatrix c = make_c({{0.7, 0.4}, {0.3, 0.6}});
  CHECK(regularize_confusion(c, 0.0).values == c.values);
  CHECK(regularize_confusion(c, 1.0).values == Matrix::identity(2));
  ConfusionMatrix flat;
  flat.values = Matrix(3, 3, 1.0 / 3);
  CHECK(regularize_confusion(flat, 0.1).sigma_min == doctest::Approx(0.1));
  CHECK_THROWS_AS(regularize_confusion(c, 1.5), InvalidArgument);
}

TEST_CASE("BBSE examples") {
  const ConfusionMatrix id = make_c({{1, 0}, {0, 1}});
  CHECK(bbse_from_mean(id, Vector{0.3, 0.7}).raw == Vector{0.3, 0.7});

  const ConfusionMatrix c = make_c({{0.9, 0.1}, {0.1, 0.9}});
  const MarginalEstimate half = bbse_from_mean(c, Vector{0.5, 0.5});
  CHECK(half.raw[0] == doctest::Approx(0.5));
  const MarginalEstimate edge = bbse_from_mean(c, Vector{0.9, 0.1});
  CHECK(edge.raw[0] == doctest::Approx(1.0));
  CHECK(edge.raw[1] == doctest::Approx(0.0));

  // Estimates off the simplex are projected back for the OLS step.
  const MarginalEstimate over = bbse_from_mean(c, Vector{0.95, 0.05});
  CHECK(over.raw[0] > 1.0);
  CHECK(over.clipped[0] == doctest::Approx(1.0));
  CHECK(is_on_simplex(over.clipped.values()));
}

TEST_CASE("estimate must use the confusion matrix of the same model") {
  DataSpec spec;
  spec.n_train = 200;
  spec.n_test_pool = 40;
  const SourceData src = make_source_data(spec, 1);
  ModelParams f = init_model(ModelArch{}, 3);
  for (std::size_t k = 0; k < 4; ++k) f.linear_head.weight(k, k) += 3.0;
  const ConfusionMatrix c = confusion_matrix(f, src.val);
  CHECK_NOTHROW(bbse_estimate(f, c, src.test_pool.inputs));
  ModelParams g = f;
  g.temperature = 2.0;
  CHECK_THROWS_AS(bbse_estimate(g, c, src.test_pool.inputs), ContractViolation);
}

TEST_CASE("BBSE is unbiased under exact label shift") {
  const CheckResult r = check_p3_bbse_unbiased();
  INFO(r.detail);
  CHECK(r.pass);
}
