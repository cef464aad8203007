// include/olsofu/ofu.hpp
//
// The OLS-OFU wrapper: estimate with f_t'' and run the revised OLS step,
// then update the feature extractor on the unlabeled batch, then retrain
// the linear head on D_0 and recalibrate on D_0'.

#pragma once

#include <cstdint>
#include <optional>

#include "olsofu/estimator.hpp"
#include "olsofu/model.hpp"
#include "olsofu/ols.hpp"
#include "olsofu/synthdata.hpp"

namespace olsofu {

struct SslSpec {
  SslKind kind = SslKind::none;
  double lr = 0.1;
  int ba = 0;  // 0 selects 50 for infonce and 1 otherwise
  double infonce_temperature = 0.1;
  double augment_noise = 0.1;
  int inner_steps = 1;

  void validate() const;
  int resolved_ba() const;
};

// Loss and gradient (feature extractor, plus ssl head for rotation).
LossGrad ssl_loss_grad(const SslSpec& spec, const Matrix& inputs, const ModelParams& m, Rng& rng);

// inner_steps gradient steps on the SSL loss; the classification head is
// never touched.
ModelParams feature_update(const ModelParams& m, const Matrix& inputs, const SslSpec& spec, Rng& rng);

// Retrain the head on D_0 from a fresh init, then calibrate on D_0'.
ModelParams refresh_head(const ModelParams& m, const SourceData& src, std::uint64_t seed,
                         const RetrainConfig& cfg = {});

struct OfuConfig {
  OlsConfig ols;
  SslSpec ssl;
  double confusion_lambda = kDefaultConfusionLambda;
  RetrainConfig retrain;
  std::uint64_t retrain_seed = 0;

  void validate() const;
};

// Records which model each estimate read and which model each update
// produced, so tests can audit the data flow.
class OfuObserver {
 public:
  virtual ~OfuObserver() = default;
  virtual void on_estimate(int t, std::uint64_t model_fingerprint) = 0;
  virtual void on_feature_update(int t, std::uint64_t new_model_fingerprint) = 0;
};

// The model together with everything measured on it.
struct AdaptedModel {
  ModelParams model;
  ConfusionMatrix confusion;  // regularized, paired with `model`
  TrainCache cache;
};

AdaptedModel measure_model(ModelParams model, const SourceData& src, double confusion_lambda);

struct OfuState {
  AdaptedModel current;  // f_t''
  OlsState ols;
  Matrix accumulated;
  int t = 0;
  int feature_updates = 0;
  Rng ssl_rng{0};
};

// f0 is the calibrated pretrained model; sigma_min seeds the ATLAS pool.
OfuState init_ofu(const OfuConfig& cfg, const ModelParams& f0, const SourceData& src, double sigma_min,
                  std::uint64_t ssl_seed);

// Steps 1-3 on one unlabeled batch. `s_out` receives the estimate.
OfuState ofu_step(OfuState st, const Matrix& batch_inputs, const OfuConfig& cfg, const SourceData& src,
                  MarginalEstimate* s_out = nullptr, OfuObserver* observer = nullptr);

// Prediction model: reweighted f'' for reweighting methods, f'' features
// with the OLS head for last-layer methods, f'' itself for none.
struct Predictor {
  ModelParams model;
  std::optional<Vector> ratio;
};

Predictor compose_output(const ModelParams& f_dd, const OlsState& ols, Algorithm tag);
Matrix predict_probs(const Predictor& p, const Matrix& inputs);

}  // namespace olsofu
