// include/olsofu/ols.hpp
//
// Online label shift algorithms in their revised form. Each state is a
// plain value and each step returns the next state, so runs can be replayed
// and compared bit-for-bit.

#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string_view>
#include <variant>
#include <vector>

#include "olsofu/estimator.hpp"
#include "olsofu/model.hpp"
#include "olsofu/numkit.hpp"

namespace olsofu {

enum class Algorithm { none, fth, ftfwh, rogd, flhftl, uogd, atlas };

std::string_view to_string(Algorithm a);
Algorithm parse_algorithm(std::string_view name);
// FTH, FTFWH, ROGD and FLHFTL predict by reweighting f''.
bool is_reweighting(Algorithm a);
// UOGD and ATLAS maintain their own linear head.
bool is_last_layer(Algorithm a);

inline constexpr Algorithm kAllAlgorithms[] = {Algorithm::fth,    Algorithm::ftfwh, Algorithm::rogd,
                                               Algorithm::flhftl, Algorithm::uogd,  Algorithm::atlas};

// What the algorithms read from D_0 under the current model f_t''.
struct TrainCache {
  Matrix features;  // n x h
  Matrix probs;     // n x K (calibrated)
  std::vector<int> labels;
  std::vector<std::size_t> class_counts;
  std::uint64_t model_fingerprint = 0;
};

TrainCache make_train_cache(const ModelParams& f, const LabeledSet& train);

// p / q0 elementwise; q0 must be strictly positive.
Vector marginal_ratio(std::span<const double> p, const SimplexVector& q0);
// probs[k] * ratio[k], renormalized. Falls back to probs if all mass vanishes.
Vector reweight_probs(std::span<const double> probs, std::span<const double> ratio);
SimplexVector reweight_predict(const ModelParams& base, const SimplexVector& p, const SimplexVector& q0,
                               std::span<const double> x);

struct OlsConfig {
  Algorithm algorithm = Algorithm::fth;
  int horizon = 1000;
  std::size_t ftfwh_window = 100;
  std::optional<double> rogd_eta;  // default sqrt(2/T) / L_hat
  int rogd_warmup = 50;
  double flh_eta = 0.0;  // 0 selects K/2
  std::size_t flh_max_experts = 200;
  std::optional<double> uogd_eta;  // default 1/sqrt(T)
  double uogd_radius = 100.0;
  std::optional<double> atlas_eps;  // default sqrt(8/T)

  void validate() const;
};

struct FthState {
  Vector sum;
  int count = 0;
  SimplexVector p = SimplexVector::uniform(1);
};

struct FtfwhState {
  std::size_t window = 100;
  std::deque<Vector> recent;
  SimplexVector p = SimplexVector::uniform(1);
};

struct RogdState {
  SimplexVector p = SimplexVector::uniform(1);
  std::optional<double> fixed_eta;
  double l_hat = 0.0;
  int horizon = 1;
  int warmup = 50;
  int t = 0;
};

struct FlhExpert {
  int birth = 0;
  Vector sum;
  int count = 0;
};

struct FlhState {
  std::vector<FlhExpert> experts;
  Vector log_weights;
  double eta = 1.0;
  std::size_t max_experts = 200;
  int t = 0;
  SimplexVector q_tilde = SimplexVector::uniform(1);
};

// A linear head w = (W, b) applied to features with temperature 1.
struct UogdState {
  DenseLayer head;
  double eta = 0.0;
  double radius = 100.0;
};

struct AtlasState {
  std::vector<UogdState> experts;
  Vector cumulative_risk;
  Vector meta;  // p_{t,i}
  double eps = 0.0;
  DenseLayer combined;
};

struct OlsState {
  Algorithm algorithm = Algorithm::none;
  int t = 0;
  SimplexVector q0 = SimplexVector::uniform(1);
  std::variant<std::monostate, FthState, FtfwhState, RogdState, FlhState, UogdState, AtlasState> data;
};

int atlas_pool_size(int horizon);
std::vector<double> atlas_learning_rates(int horizon, std::size_t num_classes, double sigma_min);

// Head of a calibrated model with the temperature folded into the weights.
DenseLayer folded_head(const ModelParams& f);

// f0 is the calibrated pretrained model; sigma_min its confusion sigma.
OlsState init_ols(const OlsConfig& cfg, const ModelParams& f0, const SimplexVector& q0, double sigma_min);

FthState fth_step(FthState st, const SimplexVector& s);
FtfwhState ftfwh_step(FtfwhState st, const SimplexVector& s);
FlhState flhftl_step(FlhState st, const SimplexVector& s);

// Per-class surrogate risks 1 - mean reweighted prob of the true class and
// their Jacobian in p (rows k, columns j). p need not lie on the simplex.
Vector rogd_class_risks(const TrainCache& cache, std::span<const double> p, const SimplexVector& q0);
Matrix rogd_jacobian(const TrainCache& cache, std::span<const double> p, const SimplexVector& q0);
RogdState rogd_step(RogdState st, std::span<const double> s_raw, const TrainCache& cache, const SimplexVector& q0);

// sum_k s[k] * R^k(w) and its gradient, R^k the mean CE on class k of D_0.
double weighted_class_risk(const DenseLayer& head, const TrainCache& cache, std::span<const double> s,
                           LayerGrad* grad);
UogdState uogd_step(UogdState st, std::span<const double> s_raw, const TrainCache& cache);
AtlasState atlas_step(AtlasState st, std::span<const double> s_raw, const TrainCache& cache);

OlsState ols_step(const OlsState& st, const MarginalEstimate& s, const TrainCache& cache);

// p_{t+1} for reweighting algorithms.
std::optional<SimplexVector> current_weight(const OlsState& st);
// w_{t+1} for last-layer algorithms.
const DenseLayer* current_head(const OlsState& st);

// Hash of the state's output (p or w) for trace snapshots.
std::uint64_t state_hash(const OlsState& st);

}  // namespace olsofu
