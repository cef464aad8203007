#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "olsofu/errors.hpp"
#include "olsofu/numkit.hpp"
#include "olsofu/validate.hpp"

#ifdef OLSOFU_HAVE_EIGEN
#include <Eigen/SVD>
#endif

using namespace olsofu;

namespace {

// Threshold rule applied in input order instead of sorted order. Wrong
// whenever the largest entries are not first.
Vector project_without_sort(std::span<const double> v) {
  double cum = 0.0, theta = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    cum += v[i];
    const double t = (cum - 1.0) / static_cast<double>(i + 1);
    if (v[i] - t > 0.0) theta = t;
  }
  Vector p(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = std::max(0.0, v[i] - theta);
  return p;
}

}  // namespace

TEST_CASE("project_simplex examples") {
  const Vector a = {0.2, 0.3, 0.5};
  CHECK(project_simplex(a).values() == a);

  const SimplexVector b = project_simplex(Vector{0.6, 0.6});
  CHECK(b[0] == doctest::Approx(0.5));
  CHECK(b[1] == doctest::Approx(0.5));

  const SimplexVector c = project_simplex(Vector{1.2, -0.1, 0.3});
  CHECK(c[0] == doctest::Approx(0.95));
  CHECK(c[1] == doctest::Approx(0.0));
  CHECK(c[2] == doctest::Approx(0.05));
}

TEST_CASE("project_simplex matches the grid oracle and is idempotent") {
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    const Vector v = {rng.uniform(-1, 2), rng.uniform(-1, 2), rng.uniform(-1, 2)};
    const SimplexVector p = project_simplex(v);
    CHECK(linf_distance(p.values(), grid_projection_oracle(v, 400)) <= 1.0 / 400 + 1e-12);
    CHECK(project_simplex(p.values()) == p);
  }
}

TEST_CASE("projection check catches a projection that skips the sort") {
  const CheckResult good = check_p1_projection([](std::span<const double> v) { return project_simplex(v).values(); });
  CHECK(good.pass);
  const CheckResult bad = check_p1_projection(project_without_sort);
  CHECK_FALSE(bad.pass);
}

TEST_CASE("SimplexVector rejects vectors off the simplex") {
  CHECK_THROWS_AS(SimplexVector(Vector{0.5, 0.6}), InvalidArgument);
  CHECK_THROWS_AS(SimplexVector(Vector{1.5, -0.5}), InvalidArgument);
  CHECK_NOTHROW(SimplexVector(Vector{0.25, 0.75}));
  const SimplexVector m = SimplexVector::mix(0.25, SimplexVector::one_hot(2, 0), SimplexVector::one_hot(2, 1));
  CHECK(m[0] == doctest::Approx(0.25));
}

TEST_CASE("solve_linear examples") {
  const Vector x1 = solve_linear(Matrix::identity(2), Vector{0.3, 0.7});
  CHECK(x1[0] == doctest::Approx(0.3));
  CHECK(x1[1] == doctest::Approx(0.7));

  const Vector x2 = solve_linear(Matrix::from_rows({{0.9, 0.1}, {0.1, 0.9}}), Vector{0.9, 0.1});
  CHECK(x2[0] == doctest::Approx(1.0));
  CHECK(x2[1] == doctest::Approx(0.0));

  const Vector x3 = solve_linear(Matrix::from_rows({{2, 0}, {0, 4}}), Vector{2, 2});
  CHECK(x3[0] == doctest::Approx(1.0));
  CHECK(x3[1] == doctest::Approx(0.5));
}

TEST_CASE("solve_linear refuses singular and ill-conditioned systems") {
  CHECK_THROWS_AS(solve_linear(Matrix::from_rows({{1, 2}, {2, 4}}), Vector{1, 1}), SingularMatrix);
  CHECK_THROWS_AS(solve_linear(Matrix::from_rows({{1, 0}, {0, 1e-12}}), Vector{1, 1}), SingularMatrix);
  try {
    solve_linear(Matrix::from_rows({{1, 0}, {0, 1e-12}}), Vector{1, 1});
  } catch (const SingularMatrix& e) {
    CHECK(e.condition_number() > kMaxConditionNumber);
  }
  CHECK(condition_number(Matrix::from_rows({{2, 0}, {0, 4}})) == doctest::Approx(2.0));
}

TEST_CASE("singular values") {
  CHECK(min_singular_value(Matrix::identity(3)) == doctest::Approx(1.0));
  CHECK(min_singular_value(Matrix::from_rows({{2, 0}, {0, 0.5}})) == doctest::Approx(0.5));
  CHECK(min_singular_value(Matrix::from_rows({{1, 1}, {1, 1}})) == 0.0);
}

#ifdef OLSOFU_HAVE_EIGEN
TEST_CASE("singular values agree with Eigen's SVD") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix a(4, 4);
    Eigen::MatrixXd e(4, 4);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) e(i, j) = a(i, j) = rng.normal();
    const Vector ours = singular_values(a);
    const Eigen::VectorXd ref = Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues();
    for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(ours[k] - ref(k)) < 1e-6);
  }
}
#endif

TEST_CASE("softmax") {
  const Vector u = softmax(Vector{0, 0, 0});
  for (double p : u) CHECK(p == doctest::Approx(1.0 / 3));
  const Vector s = softmax(Vector{1, 2});
  CHECK(s[0] == doctest::Approx(0.26894).epsilon(1e-5));
  CHECK(s[1] == doctest::Approx(0.73106).epsilon(1e-5));
  const Vector hot = softmax(Vector{3, 5}, 1e9);
  CHECK(hot[0] == doctest::Approx(0.5));
  const Vector big = softmax(Vector{1000, 0});
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(all_finite(big));
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  CHECK(argmax(Vector{0.3, 0.3, 0.1}) == 0);
  CHECK(argmax(Vector{0.1, 0.4, 0.4}) == 1);
}

TEST_CASE("Rng is deterministic and roughly uniform") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 5; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(a.next_u64() != c.next_u64());

  Rng r(7);
  double sum = 0.0, sumsq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sumsq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.02);
  CHECK(std::abs(sumsq / n - 1.0) < 0.02);

  std::vector<int> counts(3, 0);
  for (int i = 0; i < 30000; ++i) ++counts[r.categorical(Vector{1, 2, 0})];
  CHECK(counts[2] == 0);
  CHECK(std::abs(counts[1] / 30000.0 - 2.0 / 3) < 0.02);
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
}
