// include/olsofu/harness.hpp
//
// The online evaluation loop, oracle comparators, the ordering-bias
// experiment and summary statistics.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "olsofu/estimator.hpp"
#include "olsofu/model.hpp"
#include "olsofu/ofu.hpp"
#include "olsofu/ols.hpp"
#include "olsofu/synthdata.hpp"

namespace olsofu {

enum class Order { predict_first, update_first };
// ols runs the bare revised OLS on f_0; ols_ofu runs the wrapper.
enum class Mode { ols, ols_ofu };

std::string_view to_string(Order o);
Order parse_order(std::string_view name);
std::string_view to_string(Mode m);
Mode parse_mode(std::string_view name);

struct ShiftSpec {
  ShiftKind kind = ShiftKind::sinusoidal;
  std::optional<Vector> q;        // default uniform
  std::optional<Vector> q_prime;  // default one-hot on class 0
  std::optional<double> switch_prob;
};

struct Seeds {
  std::uint64_t data_seed = 1;
  std::uint64_t shift_seed = 2;
  std::uint64_t run_seed = 8610;
};

struct Scenario {
  DataSpec data;
  ShiftSpec shift;
  CorruptionSpec corruption;
  Algorithm algorithm = Algorithm::fth;
  SslSpec ssl;
  int T = 1000;
  std::size_t B = 10;
  Order order = Order::predict_first;
  Mode mode = Mode::ols_ofu;
  Seeds seeds;
  TrainConfig train;
  ModelArch arch;
  double pretrain_ssl_weight = 1.0;
  OlsConfig ols;  // algorithm and horizon are taken from the fields above
  double confusion_lambda = kDefaultConfusionLambda;
  RetrainConfig retrain;

  void validate() const;
  ShiftPattern shift_pattern() const;
  OlsConfig ols_config() const;
  OfuConfig ofu_config() const;
};

// Source data plus the calibrated f_0, shared by runs that only differ in
// the online part of the scenario.
struct Pretrained {
  SourceData data;
  ModelParams f0;
  ConfusionMatrix confusion0;  // unregularized
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> epoch_losses;
};

Pretrained pretrain(const Scenario& sc);

struct StepRecord {
  SimplexVector q = SimplexVector::uniform(1);
  Vector s;
  int errors = 0;
  long cum_errors = 0;
  int oracle_errors = 0;  // f_t'' reweighted by q_t / q0
  int frozen_errors = 0;  // f_0 reweighted by q_t / q0
  std::uint64_t state_hash = 0;
  std::uint64_t model_fingerprint = 0;
  double sigma_min = 0.0;
};

struct OnlineTrace {
  std::vector<StepRecord> steps;
  std::size_t batch_size = 0;
  int num_classes = 0;
  double avg_error = 0.0;
  double oracle_avg_error = 0.0;
  double frozen_avg_error = 0.0;
  double v_t = 0.0;
  int feature_updates = 0;
};

// Runs t = 1..T. Module errors are rethrown as StepError naming t.
OnlineTrace run_online(const Scenario& sc, const Pretrained& pre, OfuObserver* observer = nullptr);
OnlineTrace run_online(const Scenario& sc);

// The same loop scored with the true-marginal reweighting of f_t''
// (frozen = false) or of f_0 (frozen = true).
OnlineTrace oracle_trace(const Scenario& sc, const Pretrained& pre, bool frozen);

// lhs: average error of the oracle-reweighted updated models; rhs: the same
// for frozen f_0. holds when lhs < rhs.
struct FeatureGainResult {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

FeatureGainResult feature_gain_from_trace(const OnlineTrace& trace);
FeatureGainResult feature_gain_check(const Scenario& sc, const Pretrained& pre);

struct BiasResult {
  Vector bias;
  Vector stderr_;
  bool flagged = false;
  Vector mean_estimate;
};

struct BiasTestConfig {
  std::size_t n_trials = 1000;
  std::size_t batch_size = 10;
  bool violate_order = false;
  SslSpec ssl{SslKind::entropy, 0.5};
  RetrainConfig retrain;
};

// Batches are drawn from D_0' itself with lambda = 0. violate_order = true
// adapts the model to the batch before estimating with it.
BiasResult order_bias_test(const ModelParams& f, const SourceData& src, const SimplexVector& q,
                           const BiasTestConfig& cfg, Rng& rng);

double pearson(std::span<const double> xs, std::span<const double> ys);

struct SummaryRow {
  std::string key;
  std::size_t replicates = 0;
  double avg_error_mean = 0.0;
  double avg_error_std = 0.0;
  double v_t_mean = 0.0;
  std::optional<double> gain_lhs;
  std::optional<double> gain_rhs;
};

struct KeyedTrace {
  std::string key;
  const OnlineTrace* trace = nullptr;
  bool has_feature_gain = false;
};

// Groups by key (sorted) and reports mean and sample std over replicates.
std::vector<SummaryRow> summarize(const std::vector<KeyedTrace>& traces);

std::string trace_csv(const OnlineTrace& trace);
void write_text_atomic(const std::filesystem::path& path, const std::string& content);

// Formats with %.*g for stable text output.
std::string format_double(double v, int digits = 17);

}  // namespace olsofu
