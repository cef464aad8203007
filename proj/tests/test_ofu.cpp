#include <doctest.h>

#include <cmath>
#include <map>

#include "olsofu/errors.hpp"
#include "olsofu/harness.hpp"
#include "olsofu/ofu.hpp"

using namespace olsofu;

namespace {

struct Small {
  SourceData src;
  ModelParams f0;
  double sigma_min = 0.0;

  Small() {
    DataSpec spec;
    spec.n_train = 300;
    spec.n_test_pool = 200;
    src = make_source_data(spec, 31);
    TrainConfig cfg;
    cfg.epochs = 8;
    f0 = calibrate_temperature(train_supervised(src.train, ModelArch{}, cfg).model, src.val);
    sigma_min = confusion_matrix(f0, src.val).sigma_min;
  }
};

const Small& small() {
  static const Small s;
  return s;
}

Matrix random_inputs(std::size_t n, Rng& rng) {
  Matrix x(n, 8);
  for (double& v : x.data()) v = 2.0 * rng.normal();
  return x;
}

double mean_entropy(const ModelParams& m, const Matrix& x) {
  const Matrix p = forward_batch(m, x).probs;
  double h = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (double v : p.row(i))
      if (v > 0.0) h -= v * std::log(v);
  return h / static_cast<double>(p.rows());
}

// Records the model each estimate reads and every model produced by an
// update, keyed by step.
class AuditObserver : public OfuObserver {
 public:
  void on_estimate(int t, std::uint64_t fp) override { read[t] = fp; }
  void on_feature_update(int t, std::uint64_t fp) override { produced[t] = fp; }

  std::map<int, std::uint64_t> read;
  std::map<int, std::uint64_t> produced;
};

}  // namespace

TEST_CASE("ssl losses") {
  ModelParams m = init_model(ModelArch{}, 1);
  Rng rng(2);
  const Matrix x = random_inputs(4, rng);
  for (double& w : m.linear_head.weight.data()) w = 0.0;
  for (double& b : m.linear_head.bias) b = 0.0;
  const LossGrad uniform = ssl_loss_grad(SslSpec{SslKind::entropy}, x, m, rng);
  CHECK(uniform.loss == doctest::Approx(std::log(4.0)));

  m.linear_head.bias = {500.0, 0.0, 0.0, 0.0};
  const LossGrad onehot = ssl_loss_grad(SslSpec{SslKind::entropy}, x, m, rng);
  CHECK(onehot.loss == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("feature_update contract") {
  const ModelParams& f0 = small().f0;
  Rng rng(3);
  const Matrix x = random_inputs(10, rng);
  CHECK_THROWS_AS(feature_update(f0, x, SslSpec{SslKind::none}, rng), ContractViolation);

  for (SslKind k : {SslKind::rotation, SslKind::entropy, SslKind::infonce}) {
    SslSpec spec{k, 0.0};
    CHECK(feature_update(f0, x, spec, rng) == f0);
    spec.lr = 0.1;
    const ModelParams g = feature_update(f0, x, spec, rng);
    CHECK(g.linear_head == f0.linear_head);
    CHECK(g.temperature == f0.temperature);
    CHECK_FALSE(g.feat_layers == f0.feat_layers);
    if (k != SslKind::rotation) CHECK(g.ssl_head == f0.ssl_head);
  }
}

TEST_CASE("one entropy step lowers the batch entropy") {
  ModelParams m = small().f0;
  Rng rng(4);
  const Matrix x = random_inputs(10, rng);
  const double before = mean_entropy(m, x);
  const ModelParams after = feature_update(m, x, SslSpec{SslKind::entropy, 0.05}, rng);
  CHECK(mean_entropy(after, x) < before);
}

TEST_CASE("estimates never read a model fitted to the current batch") {
  const Small& s = small();
  OfuConfig cfg;
  cfg.ols.algorithm = Algorithm::fth;
  cfg.ols.horizon = 12;
  cfg.ssl = SslSpec{SslKind::rotation, 0.1};
  cfg.ssl.ba = 3;
  OfuState st = init_ofu(cfg, s.f0, s.src, s.sigma_min, 5);
  const std::uint64_t initial = st.current.model.fingerprint();
  Rng rng(6);
  AuditObserver audit;
  for (int t = 1; t <= 12; ++t) st = ofu_step(std::move(st), random_inputs(10, rng), cfg, s.src, nullptr, &audit);

  CHECK(st.feature_updates == 4);
  CHECK(audit.produced.size() == 4);
  std::uint64_t latest = initial;
  for (int t = 1; t <= 12; ++t) {
    // The model read at step t is the one available before S_t arrived.
    CHECK(audit.read.at(t) == latest);
    if (audit.produced.count(t)) {
      CHECK(audit.produced.at(t) != audit.read.at(t));
      latest = audit.produced.at(t);
    }
  }
}

TEST_CASE("feature updates happen every ba steps") {
  Scenario sc;
  sc.T = 100;
  sc.data.n_train = 300;
  sc.train.epochs = 5;
  sc.algorithm = Algorithm::fth;
  sc.ssl = SslSpec{SslKind::entropy, 0.1};
  sc.ssl.ba = 50;
  const Pretrained pre = pretrain(sc);
  CHECK(run_online(sc, pre).feature_updates == 2);
  sc.ssl.ba = 30;
  CHECK(run_online(sc, pre).feature_updates == 3);
  sc.ssl.ba = 0;
  CHECK(sc.ssl.resolved_ba() == 1);
  sc.ssl.kind = SslKind::infonce;
  CHECK(sc.ssl.resolved_ba() == 50);
}

TEST_CASE("ssl none leaves the wrapper equal to bare OLS") {
  const Small& s = small();
  OfuConfig cfg;
  cfg.ols.algorithm = Algorithm::flhftl;
  cfg.ols.horizon = 20;
  OfuState st = init_ofu(cfg, s.f0, s.src, s.sigma_min, 5);
  const ModelParams start = st.current.model;
  Rng rng(7);
  for (int t = 0; t < 20; ++t) st = ofu_step(std::move(st), random_inputs(10, rng), cfg, s.src);
  CHECK(st.current.model == start);
  CHECK(st.feature_updates == 0);
}

TEST_CASE("compose_output") {
  const Small& s = small();
  Rng rng(8);
  const Matrix x = random_inputs(20, rng);

  OlsConfig fth_cfg;
  fth_cfg.algorithm = Algorithm::fth;
  const OlsState fth = init_ols(fth_cfg, s.f0, s.src.q0, s.sigma_min);
  const Matrix fth_probs = predict_probs(compose_output(s.f0, fth, Algorithm::fth), x);
  const Matrix base = forward_batch(s.f0, x).probs;
  for (std::size_t i = 0; i < x.rows(); ++i) CHECK(linf_distance(fth_probs.row(i), base.row(i)) < 1e-12);
  CHECK_THROWS_AS(compose_output(s.f0, fth, Algorithm::flhftl), ContractViolation);

  OlsConfig flh_cfg;
  flh_cfg.algorithm = Algorithm::flhftl;
  OlsState flh = init_ols(flh_cfg, s.f0, s.src.q0, s.sigma_min);
  const TrainCache cache = make_train_cache(s.f0, s.src.train);
  const Vector raw = {0.4, 0.2, 0.2, 0.2};
  flh = ols_step(flh, MarginalEstimate{raw, SimplexVector(raw)}, cache);
  const Matrix composed = predict_probs(compose_output(s.f0, flh, Algorithm::flhftl), x);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto row = x.row(i);
    const SimplexVector direct = reweight_predict(s.f0, *current_weight(flh), s.src.q0, Vector(row.begin(), row.end()));
    CHECK(linf_distance(composed.row(i), direct.values()) < 1e-12);
  }

  OlsConfig u_cfg;
  u_cfg.algorithm = Algorithm::uogd;
  const OlsState u = init_ols(u_cfg, s.f0, s.src.q0, s.sigma_min);
  const Predictor pu = compose_output(s.f0, u, Algorithm::uogd);
  CHECK_FALSE(pu.ratio);
  CHECK(pu.model.linear_head == *current_head(u));
  CHECK(pu.model.temperature == 1.0);
  // The folded head reproduces the calibrated model's predictions.
  const Matrix a = predict_probs(pu, x);
  const Matrix b = forward_batch(s.f0, x).probs;
  for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-9));
}
