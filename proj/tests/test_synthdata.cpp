#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "olsofu/errors.hpp"
#include "olsofu/synthdata.hpp"

using namespace olsofu;

TEST_CASE("source data shapes and defaults") {
  DataSpec spec;
  spec.n_train = 400;
  spec.n_test_pool = 200;
  const SourceData src = make_source_data(spec, 3);
  CHECK(src.train.size() == 400);
  CHECK(src.val.size() == 100);
  CHECK(src.test_pool.size() == 200);
  CHECK(src.train.dim() == 8);
  CHECK(src.q0 == SimplexVector::uniform(4));
  for (std::size_t c : src.test_pool.class_counts()) CHECK(c == 50);

  const SourceData again = make_source_data(spec, 3);
  CHECK(again.train.inputs == src.train.inputs);
  CHECK(again.train.labels == src.train.labels);
}

TEST_CASE("point-mass classes are perfectly separable") {
  DataSpec spec;
  spec.num_classes = 2;
  spec.dim = 2;
  spec.class_means = {{1.0, 0.0}, {-1.0, 0.0}};
  spec.cov_scale = 0.0;
  spec.n_train = 50;
  const SourceData src = make_source_data(spec, 1);
  for (std::size_t i = 0; i < src.train.size(); ++i) {
    const double x = src.train.inputs(i, 0);
    CHECK(x == (src.train.labels[i] == 0 ? 1.0 : -1.0));
  }
}

TEST_CASE("invalid data specs are rejected") {
  DataSpec spec;
  spec.num_classes = 1;
  CHECK_THROWS_AS(spec.validate(), InvalidArgument);
  DataSpec bad_q0;
  bad_q0.q0 = Vector{0.5, 0.5, 0.0, 0.0};
  CHECK_THROWS_AS(bad_q0.validate(), InvalidArgument);
}

TEST_CASE("sinusoidal shift") {
  ShiftPattern p = default_shift(ShiftKind::sinusoidal, 3, 100, 0);
  CHECK(p.period() == 10);
  const auto alpha = mixing_weights(p);
  // alpha_t = sin(pi * (t mod L) / L)
  CHECK(alpha[9] == 0.0);                                // t = 10, i = 0
  CHECK(marginal_at(p, 10) == p.q_prime);                // q_t = q'
  CHECK(alpha[4] == doctest::Approx(1.0));                // t = 5, i = L/2
  CHECK(linf_distance(marginal_at(p, 5).values(), p.q.values()) < 1e-12);
  CHECK(alpha[1] == doctest::Approx(std::sin(2 * M_PI / 10)));
}

TEST_CASE("bernoulli shift") {
  ShiftPattern p = default_shift(ShiftKind::bernoulli, 2, 1000, 9);
  CHECK(p.resolved_switch_prob() == doctest::Approx(0.96838).epsilon(1e-5));
  const auto alpha = mixing_weights(p);
  CHECK(alpha[0] == 0.0);
  int flips = 0;
  for (std::size_t t = 1; t < alpha.size(); ++t) {
    CHECK((alpha[t] == 0.0 || alpha[t] == 1.0));
    flips += alpha[t] != alpha[t - 1] ? 1 : 0;
  }
  CHECK(flips > 900);
  CHECK(mixing_weights(p) == alpha);
  p.seed = 10;
  CHECK(mixing_weights(p) != alpha);
}

TEST_CASE("constant and monotone shifts") {
  const ShiftPattern c = default_shift(ShiftKind::constant, 4, 20, 0);
  for (const SimplexVector& q : marginal_sequence(c)) CHECK(q == c.q);
  CHECK(shift_severity(marginal_sequence(c)) == 0.0);

  const ShiftPattern m = default_shift(ShiftKind::monotone, 4, 11, 0);
  const auto seq = marginal_sequence(m);
  CHECK(seq.front() == m.q_prime);
  CHECK(linf_distance(seq.back().values(), m.q.values()) < 1e-12);
  CHECK(shift_severity(seq) == doctest::Approx(l1_distance(m.q.values(), m.q_prime.values())));
}

TEST_CASE("every marginal lies on the simplex") {
  for (ShiftKind k : {ShiftKind::sinusoidal, ShiftKind::bernoulli, ShiftKind::constant, ShiftKind::monotone}) {
    ShiftPattern p = default_shift(k, 5, 200, 4);
    p.q = SimplexVector({0.1, 0.2, 0.3, 0.2, 0.2});
    for (const SimplexVector& q : marginal_sequence(p)) CHECK(is_on_simplex(q.values()));
  }
  CHECK(parse_shift_kind("bernoulli") == ShiftKind::bernoulli);
  CHECK_THROWS_AS(parse_shift_kind("square"), InvalidArgument);
}

TEST_CASE("corruptions") {
  Rng rng(1);
  const Vector x = {1.0, 0.0, 5.0};
  CHECK(corrupt(x, CorruptionSpec{}, rng) == x);

  CorruptionSpec rot{CorruptionKind::rotate2d, 0.0, 90.0};
  const Vector r = corrupt(x, rot, rng);
  CHECK(r[0] == doctest::Approx(0.0));
  CHECK(r[1] == doctest::Approx(1.0));
  CHECK(r[2] == 5.0);

  CorruptionSpec noise{CorruptionKind::gaussian_noise, 0.07, 0.0};
  const int n = 100000;
  double sum = 0.0, sumsq = 0.0;
  const Vector zero = {0.0, 0.0};
  for (int i = 0; i < n; ++i) {
    const double d = corrupt(zero, noise, rng)[0];
    sum += d;
    sumsq += d * d;
  }
  const double var = sumsq / n - (sum / n) * (sum / n);
  CHECK(var == doctest::Approx(0.0049).epsilon(0.03));
}

TEST_CASE("sample_batch") {
  DataSpec spec;
  spec.num_classes = 2;
  spec.dim = 2;
  spec.n_train = 40;
  spec.n_test_pool = 2000;
  const SourceData src = make_source_data(spec, 2);
  const ClassPool pool(src.test_pool);
  Rng rng(3);

  const TestBatch b = sample_batch(SimplexVector::one_hot(2, 1), 10, pool, CorruptionSpec{}, rng);
  CHECK(b.inputs.rows() == 10);
  CHECK(b.inputs.cols() == 2);
  for (int y : b.hidden_labels) CHECK(y == 1);

  const TestBatch big = sample_batch(SimplexVector::uniform(2), 100000, pool, CorruptionSpec{}, rng);
  double ones = 0;
  for (int y : big.hidden_labels) ones += y;
  CHECK(std::abs(ones / 100000 - 0.5) < 0.01);

  LabeledSet lonely;
  lonely.num_classes = 2;
  lonely.inputs = Matrix(1, 2);
  lonely.labels = {0};
  const ClassPool thin(lonely);
  CHECK_THROWS_AS(sample_batch(SimplexVector::uniform(2), 5, thin, CorruptionSpec{}, rng), DataExhausted);
}

TEST_CASE("csv round trip") {
  DataSpec spec;
  spec.n_train = 40;
  spec.n_test_pool = 8;
  const SourceData src = make_source_data(spec, 5);
  const auto path = std::filesystem::temp_directory_path() / "olsofu_csv_roundtrip.csv";
  write_csv(src.train, path);
  const LabeledSet back = read_csv(path);
  std::filesystem::remove(path);
  CHECK(back.labels == src.train.labels);
  CHECK(back.inputs == src.train.inputs);
}
