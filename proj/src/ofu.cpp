// src/ofu.cpp

#include "olsofu/ofu.hpp"

#include <cmath>

#include "olsofu/errors.hpp"

namespace olsofu {

void SslSpec::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidArgument("SslSpec: lr must be >= 0");
  if (ba < 0) throw InvalidArgument("SslSpec: ba must be >= 1 (or 0 for the default)");
  if (!(infonce_temperature > 0.0)) throw InvalidArgument("SslSpec: infonce_temperature must be > 0");
  if (!(augment_noise >= 0.0)) throw InvalidArgument("SslSpec: augment_noise must be >= 0");
  if (inner_steps < 1) throw InvalidArgument("SslSpec: inner_steps must be >= 1");
}

int SslSpec::resolved_ba() const {
  if (ba > 0) return ba;
  return kind == SslKind::infonce ? 50 : 1;
}

LossGrad ssl_loss_grad(const SslSpec& spec, const Matrix& inputs, const ModelParams& m, Rng& rng) {
  LossBatch batch;
  switch (spec.kind) {
    case SslKind::none:
      throw ContractViolation("ssl_loss_grad: ssl kind is none");
    case SslKind::rotation: {
      std::vector<int> ids(inputs.rows());
      for (int& id : ids) id = static_cast<int>(rng.uniform_index(kRotationClasses));
      batch.inputs = rotate_rows(inputs, ids);
      batch.labels = std::move(ids);
      return backward(m, batch, LossKind::rotation, kScopeFeat | kScopeSsl);
    }
    case SslKind::entropy:
      batch.inputs = inputs;
      return backward(m, batch, LossKind::entropy, kScopeFeat);
    case SslKind::infonce: {
      if (inputs.rows() < 2) throw InvalidArgument("infonce: batch needs at least 2 inputs");
      batch.inputs = inputs;
      batch.positives = inputs;
      for (double& v : batch.positives.data()) v += spec.augment_noise * rng.normal();
      batch.infonce_temperature = spec.infonce_temperature;
      return backward(m, batch, LossKind::infonce, kScopeFeat);
    }
  }
  throw ContractViolation("ssl_loss_grad: unknown ssl kind");
}

ModelParams feature_update(const ModelParams& m, const Matrix& inputs, const SslSpec& spec, Rng& rng) {
  if (spec.kind == SslKind::none) throw ContractViolation("feature_update: ssl kind is none");
  spec.validate();
  const unsigned scope = spec.kind == SslKind::rotation ? (kScopeFeat | kScopeSsl) : kScopeFeat;
  ModelParams out = m;
  for (int step = 0; step < spec.inner_steps; ++step) {
    const LossGrad lg = ssl_loss_grad(spec, inputs, out, rng);
    if (spec.lr == 0.0) continue;
    Vector params = flatten(out, scope);
    const Vector g = flatten(lg.grad, scope);
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= spec.lr * g[i];
    unflatten(out, scope, params);
  }
  return out;
}

ModelParams refresh_head(const ModelParams& m, const SourceData& src, std::uint64_t seed, const RetrainConfig& cfg) {
  return calibrate_temperature(retrain_linear(m, src.train, seed, cfg), src.val);
}

void OfuConfig::validate() const {
  ols.validate();
  ssl.validate();
  if (!(confusion_lambda >= 0.0 && confusion_lambda <= 1.0))
    throw InvalidArgument("OfuConfig: confusion_lambda must be in [0, 1]");
}

AdaptedModel measure_model(ModelParams model, const SourceData& src, double confusion_lambda) {
  AdaptedModel a;
  a.confusion = regularize_confusion(confusion_matrix(model, src.val), confusion_lambda);
  a.cache = make_train_cache(model, src.train);
  a.model = std::move(model);
  return a;
}

OfuState init_ofu(const OfuConfig& cfg, const ModelParams& f0, const SourceData& src, double sigma_min,
                  std::uint64_t ssl_seed) {
  cfg.validate();
  OfuState st;
  st.current = measure_model(f0, src, cfg.confusion_lambda);
  st.ols = init_ols(cfg.ols, f0, src.q0, sigma_min);
  st.accumulated = Matrix(0, f0.input_dim());
  st.ssl_rng = Rng(ssl_seed);
  return st;
}

OfuState ofu_step(OfuState st, const Matrix& batch_inputs, const OfuConfig& cfg, const SourceData& src,
                  MarginalEstimate* s_out, OfuObserver* observer) {
  ++st.t;
  // Step 1: the estimate reads f_t'', which no update has fitted to S_t.
  if (observer) observer->on_estimate(st.t, st.current.model.fingerprint());
  MarginalEstimate s = bbse_estimate(st.current.model, st.current.confusion, batch_inputs);
  st.ols = ols_step(st.ols, s, st.current.cache);
  if (s_out) *s_out = std::move(s);

  if (cfg.ssl.kind == SslKind::none) return st;

  // Step 2: buffer S_t; update once ba batches are in.
  for (std::size_t i = 0; i < batch_inputs.rows(); ++i) st.accumulated.append_row(batch_inputs.row(i));
  const auto ba = static_cast<std::size_t>(cfg.ssl.resolved_ba());
  if (st.accumulated.rows() < ba * batch_inputs.rows()) return st;

  ModelParams updated = feature_update(st.current.model, st.accumulated, cfg.ssl, st.ssl_rng);
  st.accumulated.clear_rows();

  // Step 3: fresh head on D_0, calibration on D_0'.
  const std::uint64_t seed = derive_seed(cfg.retrain_seed, static_cast<std::uint64_t>(st.feature_updates));
  ++st.feature_updates;
  st.current = measure_model(refresh_head(updated, src, seed, cfg.retrain), src, cfg.confusion_lambda);
  if (observer) observer->on_feature_update(st.t, st.current.model.fingerprint());
  return st;
}

Predictor compose_output(const ModelParams& f_dd, const OlsState& ols, Algorithm tag) {
  if (tag != ols.algorithm) throw ContractViolation("compose_output: algorithm tag does not match the OLS state");
  Predictor p{f_dd, std::nullopt};
  if (is_reweighting(tag)) {
    const auto w = current_weight(ols);
    if (!w) throw ContractViolation("compose_output: reweighting state without a weight vector");
    p.ratio = marginal_ratio(w->span(), ols.q0);
  } else if (is_last_layer(tag)) {
    const DenseLayer* head = current_head(ols);
    if (!head) throw ContractViolation("compose_output: last-layer state without a head");
    p.model.linear_head = *head;
    p.model.temperature = 1.0;
  }
  return p;
}

Matrix predict_probs(const Predictor& p, const Matrix& inputs) {
  Matrix probs = forward_batch(p.model, inputs).probs;
  if (p.ratio) {
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      const Vector r = reweight_probs(probs.row(i), *p.ratio);
      std::copy(r.begin(), r.end(), probs.row(i).begin());
    }
  }
  return probs;
}

}  // namespace olsofu
