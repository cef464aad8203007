#include <doctest.h>

#include <cmath>

#include "olsofu/errors.hpp"
#include "olsofu/ols.hpp"
#include "olsofu/validate.hpp"

using namespace olsofu;

namespace {

Vector random_simplex(std::size_t k, Rng& rng) {
  Vector v(k);
  double sum = 0.0;
  for (double& x : v) sum += (x = rng.uniform() + 1e-3);
  for (double& x : v) x /= sum;
  return v;
}

struct Fixture {
  SourceData src;
  ModelParams f;
  TrainCache cache;

  Fixture() {
    DataSpec spec;
    spec.n_train = 300;
    spec.n_test_pool = 40;
    src = make_source_data(spec, 21);
    TrainConfig cfg;
    cfg.epochs = 5;
    f = calibrate_temperature(train_supervised(src.train, ModelArch{}, cfg).model, src.val);
    cache = make_train_cache(f, src.train);
  }
};

const Fixture& fixture() {
  static const Fixture fx;
  return fx;
}

OlsConfig config(Algorithm a, int horizon = 100) {
  OlsConfig c;
  c.algorithm = a;
  c.horizon = horizon;
  return c;
}

}  // namespace

TEST_CASE("reweighting") {
  const SimplexVector q0({0.5, 0.5});
  CHECK(reweight_probs(Vector{0.5, 0.5}, marginal_ratio(Vector{2.0 / 3, 1.0 / 3}, q0))[0] ==
        doctest::Approx(2.0 / 3));
  CHECK(reweight_probs(Vector{0.3, 0.7}, Vector{1.0, 1.0}) == Vector{0.3, 0.7});
  CHECK(reweight_probs(Vector{0.0, 1.0}, Vector{5.0, 0.5}) == Vector{0.0, 1.0});

  const Fixture& fx = fixture();
  const auto row = fx.src.test_pool.inputs.row(0);
  const Vector x(row.begin(), row.end());
  const SimplexVector same = reweight_predict(fx.f, fx.src.q0, fx.src.q0, x);
  CHECK(linf_distance(same.values(), forward(fx.f, x).probs) < 1e-15);
}

TEST_CASE("FTH") {
  const SimplexVector q0 = SimplexVector::uniform(2);
  OlsState st = init_ols(config(Algorithm::fth), fixture().f, SimplexVector::uniform(4), 1.0);
  CHECK(*current_weight(st) == SimplexVector::uniform(4));

  FthState fth{Vector(2, 0.0), 0, q0};
  fth = fth_step(fth, SimplexVector({1.0, 0.0}));
  CHECK(fth.p == SimplexVector({1.0, 0.0}));
  fth = fth_step(fth, SimplexVector({0.0, 1.0}));
  CHECK(fth.p == SimplexVector({0.5, 0.5}));

  const CheckResult r = check_p6_fth_exact();
  CHECK(r.pass);
}

TEST_CASE("FTFWH windows") {
  Rng rng(2);
  std::vector<SimplexVector> s;
  for (int i = 0; i < 5; ++i) s.emplace_back(random_simplex(3, rng));
  const SimplexVector q0 = SimplexVector::uniform(3);

  FtfwhState w1{1, {}, q0};
  FtfwhState w3{3, {}, q0};
  FtfwhState wide{100, {}, q0};
  FthState fth{Vector(3, 0.0), 0, q0};
  for (const auto& v : s) {
    w1 = ftfwh_step(w1, v);
    w3 = ftfwh_step(w3, v);
    wide = ftfwh_step(wide, v);
    fth = fth_step(fth, v);
    CHECK(w1.p == v);
    CHECK(linf_distance(wide.p.values(), fth.p.values()) < 1e-15);
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const double brute = (s[2][k] + s[3][k] + s[4][k]) / 3.0;
    CHECK(std::abs(w3.p[k] - brute) < 1e-12);
  }
}

TEST_CASE("FLH-FTL") {
  const SimplexVector q0 = SimplexVector::uniform(3);
  const SimplexVector v({0.6, 0.3, 0.1});
  const SimplexVector u({0.1, 0.1, 0.8});

  OlsState st = init_ols(config(Algorithm::flhftl), fixture().f, SimplexVector::uniform(4), 1.0);
  CHECK(std::get<FlhState>(st.data).eta == 2.0);

  FlhState one;
  one.eta = 1.5;
  one.q_tilde = q0;
  one = flhftl_step(one, v);
  CHECK(one.q_tilde == v);

  FlhState constant = one;
  for (int t = 0; t < 30; ++t) constant = flhftl_step(constant, v);
  CHECK(linf_distance(constant.q_tilde.values(), v.values()) < 1e-12);

  // Piecewise-constant: v for t <= 50, u afterwards. FLH should track the
  // switch while plain FTL stays stuck halfway.
  FlhState flh;
  flh.eta = 1.5;
  flh.q_tilde = q0;
  FthState ftl{Vector(3, 0.0), 0, q0};
  for (int t = 1; t <= 100; ++t) {
    const SimplexVector& s = t <= 50 ? v : u;
    flh = flhftl_step(flh, s);
    ftl = fth_step(ftl, s);
  }
  const double flh_err = l1_distance(flh.q_tilde.values(), u.values());
  CHECK(flh_err < 0.05);
  CHECK(flh_err < l1_distance(ftl.p.values(), u.values()));

  FlhState capped;
  capped.eta = 1.5;
  capped.max_experts = 10;
  capped.q_tilde = q0;
  for (int t = 0; t < 40; ++t) capped = flhftl_step(capped, v);
  CHECK(capped.experts.size() == 10);
  CHECK(capped.experts.front().birth == 31);
}

TEST_CASE("ROGD Jacobian matches finite differences") {
  const Fixture& fx = fixture();
  Rng rng(3);
  const Vector p = random_simplex(4, rng);
  const Matrix jac = rogd_jacobian(fx.cache, p, fx.src.q0);
  const double h = 1e-6;
  for (std::size_t j = 0; j < 4; ++j) {
    Vector hi = p, lo = p;
    hi[j] += h;
    lo[j] -= h;
    const Vector rh = rogd_class_risks(fx.cache, hi, fx.src.q0);
    const Vector rl = rogd_class_risks(fx.cache, lo, fx.src.q0);
    for (std::size_t k = 0; k < 4; ++k) {
      const double fd = (rh[k] - rl[k]) / (2 * h);
      CHECK(std::abs(jac(k, j) - fd) / std::max({std::abs(fd), std::abs(jac(k, j)), 1e-6}) < 1e-3);
    }
  }
}

TEST_CASE("ROGD step size and simplex postcondition") {
  const Fixture& fx = fixture();
  RogdState frozen{fx.src.q0, 0.0, 0.0, 100, 50, 0};
  const Vector s = {0.7, 0.1, 0.1, 0.1};
  CHECK(rogd_step(frozen, s, fx.cache, fx.src.q0).p == fx.src.q0);

  RogdState st{fx.src.q0, std::nullopt, 0.0, 100, 50, 0};
  for (int t = 0; t < 20; ++t) {
    st = rogd_step(st, s, fx.cache, fx.src.q0);
    CHECK(is_on_simplex(st.p.values()));
  }
  CHECK(st.l_hat > 0.0);
  CHECK(st.p[0] > 0.25);
}

TEST_CASE("UOGD") {
  const Fixture& fx = fixture();
  const DenseLayer w0 = folded_head(fx.f);
  const Vector s = {0.4, 0.3, 0.2, 0.1};

  CHECK(uogd_step(UogdState{w0, 0.0, 100.0}, s, fx.cache).head == w0);

  // One-hot weights reduce to the single-class gradient.
  LayerGrad g;
  weighted_class_risk(w0, fx.cache, Vector{0, 0, 1, 0}, &g);
  const UogdState moved = uogd_step(UogdState{w0, 0.1, 1e9}, Vector{0, 0, 1, 0}, fx.cache);
  for (std::size_t i = 0; i < g.weight.data().size(); ++i)
    CHECK(moved.head.weight.data()[i] == doctest::Approx(w0.weight.data()[i] - 0.1 * g.weight.data()[i]));

  // Gradient of the weighted risk against finite differences.
  weighted_class_risk(w0, fx.cache, s, &g);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t idx = rng.uniform_index(w0.weight.data().size());
    DenseLayer hi = w0, lo = w0;
    hi.weight.data()[idx] += 1e-5;
    lo.weight.data()[idx] -= 1e-5;
    const double fd =
        (weighted_class_risk(hi, fx.cache, s, nullptr) - weighted_class_risk(lo, fx.cache, s, nullptr)) / 2e-5;
    const double an = g.weight.data()[idx];
    CHECK(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}) < 1e-4);
  }

  // The Frobenius ball is enforced.
  const UogdState small = uogd_step(UogdState{w0, 10.0, 0.5}, s, fx.cache);
  double sq = 0.0;
  for (double v : small.head.weight.data()) sq += v * v;
  for (double v : small.head.bias) sq += v * v;
  CHECK(std::sqrt(sq) <= 0.5 + 1e-12);
}

TEST_CASE("ATLAS pool") {
  CHECK(atlas_pool_size(1000) == 7);
  CHECK(atlas_pool_size(1) == 2);
  const auto etas = atlas_learning_rates(1000, 4, 0.5);
  CHECK(etas.size() == 7);
  CHECK(etas[0] == doctest::Approx(0.5 / std::sqrt(4000.0)));
  for (std::size_t i = 1; i < etas.size(); ++i) CHECK(etas[i] == doctest::Approx(2 * etas[i - 1]));
  CHECK(check_p10_atlas_pool().pass);
}

TEST_CASE("ATLAS with identical experts reproduces the single expert") {
  const Fixture& fx = fixture();
  const DenseLayer w0 = folded_head(fx.f);
  AtlasState at;
  for (int i = 0; i < 3; ++i) at.experts.push_back(UogdState{w0, 0.05, 100.0});
  at.cumulative_risk.assign(3, 0.0);
  at.meta.assign(3, 1.0 / 3);
  at.eps = 0.1;
  at.combined = w0;
  UogdState single{w0, 0.05, 100.0};
  const Vector s = {0.1, 0.2, 0.3, 0.4};
  for (int t = 0; t < 5; ++t) {
    at = atlas_step(at, s, fx.cache);
    single = uogd_step(single, s, fx.cache);
  }
  CHECK(at.combined == single.head);
}

TEST_CASE("ols_step keeps reweighting weights on the simplex") {
  const Fixture& fx = fixture();
  Rng rng(5);
  for (Algorithm a : {Algorithm::fth, Algorithm::ftfwh, Algorithm::rogd, Algorithm::flhftl}) {
    OlsState st = init_ols(config(a), fx.f, fx.src.q0, 0.5);
    for (int t = 0; t < 30; ++t) {
      Vector raw = random_simplex(4, rng);
      raw[0] += 0.3;
      raw[1] -= 0.3;
      const MarginalEstimate s{raw, project_simplex(raw)};
      st = ols_step(st, s, fx.cache);
      REQUIRE(current_weight(st));
      CHECK(is_on_simplex(current_weight(st)->values()));
    }
    CHECK(st.t == 30);
    CHECK(current_head(st) == nullptr);
  }
  const OlsState u = init_ols(config(Algorithm::uogd), fx.f, fx.src.q0, 0.5);
  CHECK(current_head(u) != nullptr);
  CHECK_FALSE(current_weight(u));
}

TEST_CASE("state hash tracks the output") {
  const Fixture& fx = fixture();
  OlsState a = init_ols(config(Algorithm::fth), fx.f, fx.src.q0, 0.5);
  OlsState b = a;
  CHECK(state_hash(a) == state_hash(b));
  const Vector raw = {0.7, 0.1, 0.1, 0.1};
  b = ols_step(b, MarginalEstimate{raw, SimplexVector(raw)}, fx.cache);
  CHECK(state_hash(a) != state_hash(b));
}

TEST_CASE("algorithm names round-trip") {
  for (Algorithm a : kAllAlgorithms) CHECK(parse_algorithm(to_string(a)) == a);
  CHECK(parse_algorithm("none") == Algorithm::none);
  CHECK_THROWS_AS(parse_algorithm("adam"), InvalidArgument);
  OlsConfig bad;
  bad.horizon = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}
