// include/olsofu/model.hpp
//
// Small dense network: tanh feature extractor, linear classification head
// and a 4-way rotation head sharing the features. Forward and backward
// passes are written out by hand.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "olsofu/numkit.hpp"
#include "olsofu/synthdata.hpp"

namespace olsofu {

enum class Activation { identity, tanh };

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::identity;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

inline constexpr std::size_t kRotationClasses = 4;
inline constexpr double kRotationDegrees[kRotationClasses] = {0.0, 90.0, 180.0, 270.0};

struct ModelParams {
  std::vector<DenseLayer> feat_layers;
  DenseLayer linear_head;  // K x h
  DenseLayer ssl_head;     // 4 x h
  double temperature = 1.0;

  std::size_t input_dim() const;
  std::size_t feature_dim() const;
  std::size_t num_classes() const { return linear_head.out_dim(); }

  void validate() const;
  // FNV-1a over every parameter bit and the temperature.
  std::uint64_t fingerprint() const;
  // Fingerprint of the feature extractor alone.
  std::uint64_t feature_fingerprint() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct ModelArch {
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden = {32, 32};
  std::size_t num_classes = 4;
};

// Symmetric uniform init scaled by 1/sqrt(fan_in).
ModelParams init_model(const ModelArch& arch, std::uint64_t seed);
DenseLayer init_layer(std::size_t in, std::size_t out, Activation act, Rng& rng);

struct ForwardResult {
  Vector probs;
  Vector features;
  Vector logits;
};

struct BatchForward {
  Matrix probs;     // n x K
  Matrix features;  // n x h
  Matrix logits;    // n x K
};

ForwardResult forward(const ModelParams& m, std::span<const double> x);
BatchForward forward_batch(const ModelParams& m, const Matrix& x);
Matrix extract_features(const ModelParams& m, const Matrix& x);
// Probabilities of the classification head on precomputed features.
Matrix head_probs(const DenseLayer& head, double temperature, const Matrix& features);

enum class LossKind { cross_entropy, entropy, rotation, infonce };

std::string to_string(LossKind kind);

// Parameter groups a gradient may touch.
enum Scope : unsigned {
  kScopeNone = 0,
  kScopeFeat = 1u << 0,
  kScopeLinear = 1u << 1,
  kScopeSsl = 1u << 2,
  kScopeAll = kScopeFeat | kScopeLinear | kScopeSsl,
};

struct LayerGrad {
  Matrix weight;
  Vector bias;
};

struct Gradients {
  std::vector<LayerGrad> feat;
  LayerGrad linear;
  LayerGrad ssl;

  static Gradients zeros_like(const ModelParams& m);
};

// One loss evaluation's inputs. For rotation the inputs are already rotated
// and labels hold rotation indices; infonce pairs inputs with positives.
struct LossBatch {
  Matrix inputs;
  std::vector<int> labels;
  Matrix positives;
  double infonce_temperature = 0.1;
};

struct LossGrad {
  double loss = 0.0;
  Gradients grad;
};

// Batch-mean loss and its exact gradient restricted to `scope`.
LossGrad backward(const ModelParams& m, const LossBatch& batch, LossKind kind, unsigned scope);
double loss_value(const ModelParams& m, const LossBatch& batch, LossKind kind);

// Flat views in a fixed order: feature layers (weight, bias), linear head,
// ssl head. Only groups in `scope` are included.
Vector flatten(const ModelParams& m, unsigned scope);
void unflatten(ModelParams& m, unsigned scope, std::span<const double> values);
Vector flatten(const Gradients& g, unsigned scope);

struct TrainConfig {
  int epochs = 40;
  std::size_t batch_size = 200;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 4242;

  void validate() const;
};

enum class SslKind { none, rotation, entropy, infonce };

std::string to_string(SslKind kind);
SslKind parse_ssl_kind(const std::string& name);

struct TrainResult {
  ModelParams model;
  std::vector<double> epoch_losses;
};

// Rotates each row's first two coordinates by the degrees of its index.
Matrix rotate_rows(const Matrix& x, const std::vector<int>& rotation_ids);

// Mini-batch SGD (momentum, weight decay) on CE + ssl_weight * ssl loss.
// Only rotation is supported as a pretraining auxiliary loss.
TrainResult train_supervised(const LabeledSet& train, const ModelArch& arch, const TrainConfig& cfg,
                             SslKind ssl_kind = SslKind::rotation, double ssl_weight = 1.0);

struct RetrainConfig {
  int max_iterations = 500;
  double grad_tolerance = 1e-6;
  // Also stops once an accepted step improves the objective by less than
  // this fraction; the loss is then converged to well below 1e-6.
  double f_tolerance = 1e-10;
  double l2 = 1e-4;
};

// Weighted CE of a linear head on fixed features: sum_i w_i * ce_i with
// logits divided by `temperature`. Writes the gradient when `grad` is set.
double head_loss_grad(const DenseLayer& head, double temperature, const Matrix& features,
                      const std::vector<int>& labels, std::span<const double> sample_weights,
                      LayerGrad* grad);

// Freezes the features, draws a fresh head and minimizes mean CE on `train`.
// The result has temperature 1.
ModelParams retrain_linear(const ModelParams& m, const LabeledSet& train, std::uint64_t seed,
                           const RetrainConfig& cfg = {});
ModelParams retrain_linear_on_features(const ModelParams& m, const Matrix& features,
                                       const std::vector<int>& labels, std::uint64_t seed,
                                       const RetrainConfig& cfg = {});

// Mean negative log-likelihood of labels under softmax(logits / T).
double nll(const Matrix& logits, const std::vector<int>& labels, double temperature);

// Golden-section search over log T in [-3, 3]; keeps T = 1 unless the
// search strictly improves the validation NLL.
double fit_temperature(const Matrix& logits, const std::vector<int>& labels);
ModelParams calibrate_temperature(const ModelParams& m, const LabeledSet& val);

double accuracy(const ModelParams& m, const LabeledSet& set);

// Checkpoints. Binary is bit-exact; JSON round-trips values exactly.
void save_binary(const ModelParams& m, const std::filesystem::path& path);
ModelParams load_binary(const std::filesystem::path& path);
std::string to_json_string(const ModelParams& m);
ModelParams from_json_string(const std::string& text);

}  // namespace olsofu
