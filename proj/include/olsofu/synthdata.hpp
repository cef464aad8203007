// include/olsofu/synthdata.hpp
//
// Synthetic source data (Gaussian class-conditionals), the online label
// shift processes, and covariate corruptions that turn exact label shift
// into generalized label shift.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include "olsofu/numkit.hpp"

namespace olsofu {

struct LabeledSet {
  Matrix inputs;            // n x d
  std::vector<int> labels;  // n entries in [0, num_classes)
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.cols(); }
  std::vector<std::size_t> class_counts() const;
};

struct DataSpec {
  int num_classes = 4;
  int dim = 8;
  // Explicit means override the default mean_scale * e_k placement.
  std::vector<Vector> class_means;
  double mean_scale = 2.0;
  double cov_scale = 1.0;
  std::size_t n_train = 2000;
  std::size_t n_val = 0;  // 0 selects the 4:1 train/val ratio
  std::size_t n_test_pool = 5000;
  std::optional<Vector> q0;  // source marginal; uniform when unset

  void validate() const;
  std::vector<Vector> resolved_means() const;
  std::size_t resolved_n_val() const { return n_val > 0 ? n_val : std::max<std::size_t>(1, n_train / 4); }
  SimplexVector resolved_q0() const;
};

struct SourceData {
  LabeledSet train;
  LabeledSet val;
  LabeledSet test_pool;  // class-stratified, reused across steps
  SimplexVector q0 = SimplexVector::uniform(1);
};

SourceData make_source_data(const DataSpec& spec, std::uint64_t seed);

enum class ShiftKind { sinusoidal, bernoulli, constant, monotone };

std::string_view to_string(ShiftKind kind);
ShiftKind parse_shift_kind(std::string_view name);

struct ShiftPattern {
  ShiftKind kind = ShiftKind::sinusoidal;
  SimplexVector q = SimplexVector::uniform(2);
  SimplexVector q_prime = SimplexVector::one_hot(2, 0);
  int horizon = 1000;
  std::optional<double> switch_prob;  // bernoulli only; default 1 - 1/sqrt(T)
  std::uint64_t seed = 0;             // drives the bernoulli bit flips

  void validate() const;
  double resolved_switch_prob() const;
  int period() const;  // sinusoidal L = round(sqrt(T))
};

// q = uniform and q' = one-hot on class 0.
ShiftPattern default_shift(ShiftKind kind, int num_classes, int horizon, std::uint64_t seed);

// alpha_1..alpha_T (index 0 holds alpha_1).
std::vector<double> mixing_weights(const ShiftPattern& pattern);
SimplexVector marginal_at(const ShiftPattern& pattern, int t);
std::vector<SimplexVector> marginal_sequence(const ShiftPattern& pattern);

// V_T = sum_{t>=2} ||q_t - q_{t-1}||_1.
double shift_severity(const std::vector<SimplexVector>& marginals);

enum class CorruptionKind { none, rotate2d, gaussian_noise, affine };

std::string_view to_string(CorruptionKind kind);
CorruptionKind parse_corruption_kind(std::string_view name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::none;
  double severity = 0.0;
  double angle_degrees = 0.0;

  void validate() const;
};

void corrupt_in_place(std::span<double> x, const CorruptionSpec& spec, Rng& rng);
Vector corrupt(std::span<const double> x, const CorruptionSpec& spec, Rng& rng);

// Rotates (x[0], x[1]) by the given angle, leaving other coordinates.
void rotate_plane(std::span<double> x, double degrees);

// Per-class index over a labeled set, built once for repeated sampling.
class ClassPool {
 public:
  explicit ClassPool(const LabeledSet& set);
  const LabeledSet& set() const { return *set_; }
  const std::vector<std::size_t>& members(int k) const { return members_[k]; }

 private:
  const LabeledSet* set_;
  std::vector<std::vector<std::size_t>> members_;
};

// A test batch. hidden_labels exist for scoring only; adaptation code is
// handed `inputs` alone.
struct TestBatch {
  Matrix inputs;
  std::vector<int> hidden_labels;
};

TestBatch sample_batch(const SimplexVector& q, std::size_t batch_size, const ClassPool& pool,
                       const CorruptionSpec& corruption, Rng& rng);

// CSV with header x1..xd,label.
void write_csv(const LabeledSet& set, const std::filesystem::path& path);
LabeledSet read_csv(const std::filesystem::path& path);

}  // namespace olsofu
