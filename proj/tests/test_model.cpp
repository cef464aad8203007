#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "olsofu/errors.hpp"
#include "olsofu/model.hpp"
#include "olsofu/validate.hpp"

using namespace olsofu;

namespace {

DenseLayer identity_layer(std::size_t n) {
  DenseLayer l;
  l.weight = Matrix::identity(n);
  l.bias = Vector(n, 0.0);
  return l;
}

ModelParams identity_model() {
  ModelParams m;
  m.feat_layers = {identity_layer(2)};
  m.linear_head = identity_layer(2);
  m.ssl_head.weight = Matrix(kRotationClasses, 2);
  m.ssl_head.bias = Vector(kRotationClasses, 0.0);
  return m;
}

SourceData small_source(std::uint64_t seed, std::size_t n_train = 600) {
  DataSpec spec;
  spec.n_train = n_train;
  spec.n_test_pool = 100;
  return make_source_data(spec, seed);
}

TrainConfig quick_train() {
  TrainConfig cfg;
  cfg.epochs = 15;
  return cfg;
}

}  // namespace

TEST_CASE("forward examples") {
  ModelParams m = identity_model();
  const ForwardResult r = forward(m, Vector{1.0, 2.0});
  CHECK(r.probs[0] == doctest::Approx(0.26894).epsilon(1e-5));
  CHECK(r.probs[1] == doctest::Approx(0.73106).epsilon(1e-5));

  m.temperature = 1e9;
  const ForwardResult hot = forward(m, Vector{1.0, 2.0});
  CHECK(hot.probs[0] == doctest::Approx(0.5));

  ModelParams z = init_model(ModelArch{}, 1);
  for (double& w : z.linear_head.weight.data()) w = 0.0;
  for (double& b : z.linear_head.bias) b = 0.0;
  const ForwardResult u = forward(z, Vector(8, 0.3));
  for (double p : u.probs) CHECK(p == doctest::Approx(0.25));
}

TEST_CASE("forward probabilities stay on the simplex") {
  const ModelParams m = init_model(ModelArch{}, 2);
  Rng rng(3);
  Matrix x(50, 8);
  for (double& v : x.data()) v = 10.0 * rng.normal();
  const BatchForward fb = forward_batch(m, x);
  for (std::size_t i = 0; i < 50; ++i) CHECK(is_on_simplex(fb.probs.row(i)));
  CHECK(fb.features.cols() == m.feature_dim());
  CHECK(extract_features(m, x) == fb.features);
}

TEST_CASE("backward contract and optimum") {
  ModelParams m = identity_model();
  LossBatch b;
  b.inputs = Matrix::from_rows({{40.0, 0.0}});
  b.labels = {0};
  CHECK_THROWS_AS(backward(m, b, LossKind::cross_entropy, kScopeNone), InvalidArgument);
  const LossGrad lg = backward(m, b, LossKind::cross_entropy, kScopeAll);
  CHECK(lg.loss < 1e-12);
  for (double g : flatten(lg.grad, kScopeAll)) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("analytic gradients match finite differences for every loss and scope") {
  const CheckResult r = check_p2_gradients();
  INFO(r.detail);
  CHECK(r.pass);
  CHECK(r.value < 1e-4);
}

TEST_CASE("flatten and unflatten are inverse") {
  ModelParams m = init_model(ModelArch{4, {6}, 3}, 4);
  for (unsigned scope : {unsigned(kScopeFeat), unsigned(kScopeLinear), unsigned(kScopeSsl), unsigned(kScopeAll)}) {
    Vector v = flatten(m, scope);
    for (double& x : v) x += 1.0;
    ModelParams c = m;
    unflatten(c, scope, v);
    CHECK(flatten(c, scope) == v);
    const unsigned rest = kScopeAll & ~scope;
    if (rest != 0) CHECK(flatten(c, rest) == flatten(m, rest));
  }
}

TEST_CASE("supervised training separates separable data") {
  DataSpec spec;
  spec.num_classes = 2;
  spec.dim = 2;
  spec.class_means = {{2.0, 0.0}, {-2.0, 0.0}};
  spec.cov_scale = 0.1;
  spec.n_train = 400;
  spec.n_test_pool = 10;
  const SourceData src = make_source_data(spec, 6);
  const TrainResult tr = train_supervised(src.train, ModelArch{2, {8}, 2}, quick_train(), SslKind::none);
  CHECK(accuracy(tr.model, src.train) > 0.99);
  CHECK(tr.epoch_losses.size() == 15);
  CHECK(tr.epoch_losses.back() < tr.epoch_losses.front());

  TrainConfig defaults;
  CHECK(defaults.learning_rate == 0.1);
  CHECK(defaults.momentum == 0.9);
  CHECK(defaults.weight_decay == 1e-4);
  CHECK(defaults.seed == 4242);
}

TEST_CASE("training is seeded") {
  const SourceData src = small_source(7, 200);
  const TrainResult a = train_supervised(src.train, ModelArch{}, quick_train());
  const TrainResult b = train_supervised(src.train, ModelArch{}, quick_train());
  CHECK(a.model == b.model);
  TrainConfig other = quick_train();
  other.seed = 1;
  CHECK_FALSE(train_supervised(src.train, ModelArch{}, other).model == a.model);
}

TEST_CASE("retrain_linear freezes features and reaches the same optimum") {
  const SourceData src = small_source(8, 2000);
  const ModelParams f = train_supervised(src.train, ModelArch{}, quick_train()).model;
  const ModelParams r1 = retrain_linear(f, src.train, 1);
  const ModelParams r2 = retrain_linear(r1, src.train, 2);
  CHECK(r1.feat_layers == f.feat_layers);
  CHECK(r1.ssl_head == f.ssl_head);
  CHECK(r1.temperature == 1.0);

  auto ce = [&](const ModelParams& m) {
    return nll(forward_batch(m, src.train.inputs).logits, src.train.labels, 1.0);
  };
  CHECK(std::abs(ce(r1) - ce(r2)) < 1e-3);
  CHECK(std::abs(accuracy(r1, src.val) - accuracy(f, src.val)) <= 0.01 + 1e-12);
}

TEST_CASE("temperature fitting") {
  Rng rng(9);
  const std::size_t n = 20000;
  Matrix logits(n, 3);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < 3; ++k) logits(i, k) = 2.0 * rng.normal();
    labels[i] = static_cast<int>(rng.categorical(softmax(logits.row(i))));
  }
  const double t1 = fit_temperature(logits, labels);
  CHECK(t1 >= 0.8);
  CHECK(t1 <= 1.25);

  Matrix sharp = logits;
  for (double& v : sharp.data()) v *= 5.0;
  CHECK(fit_temperature(sharp, labels) == doctest::Approx(5.0).epsilon(0.1));

  const Matrix flat(100, 3, 0.7);
  CHECK(fit_temperature(flat, std::vector<int>(100, 1)) == 1.0);
  CHECK(nll(flat, std::vector<int>(100, 1), 3.0) == doctest::Approx(std::log(3.0)));
}

TEST_CASE("calibration never increases validation NLL") {
  const CheckResult r = check_p11_calibration();
  CHECK(r.pass);
}

TEST_CASE("checkpoints round-trip exactly") {
  ModelParams m = init_model(ModelArch{}, 10);
  m.temperature = 1.2345678901234567;
  const auto path = std::filesystem::temp_directory_path() / "olsofu_model_roundtrip.bin";
  save_binary(m, path);
  const ModelParams back = load_binary(path);
  std::filesystem::remove(path);
  CHECK(back == m);
  CHECK(back.fingerprint() == m.fingerprint());
  CHECK(from_json_string(to_json_string(m)) == m);

  ModelParams other = m;
  other.linear_head.bias[0] += 1e-15;
  CHECK(other.fingerprint() != m.fingerprint());
  CHECK(other.feature_fingerprint() == m.feature_fingerprint());
}

TEST_CASE("loading garbage fails cleanly") {
  const auto path = std::filesystem::temp_directory_path() / "olsofu_model_garbage.bin";
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("not a model", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_binary(path), Error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(from_json_string("{\"feat_layers\": 3}"), Error);
}
