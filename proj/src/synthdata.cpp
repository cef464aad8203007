// src/synthdata.cpp

#include "olsofu/synthdata.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "olsofu/errors.hpp"

namespace olsofu {

namespace {

constexpr double kPi = 3.14159265358979323846;

LabeledSet draw_set(const std::vector<Vector>& means, double cov_scale,
                    const std::vector<int>& labels, int num_classes, Rng& rng) {
  const std::size_t d = means.front().size();
  LabeledSet set;
  set.num_classes = num_classes;
  set.labels = labels;
  set.inputs = Matrix(labels.size(), d);
  const double sd = std::sqrt(cov_scale);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Vector& mu = means[static_cast<std::size_t>(labels[i])];
    for (std::size_t j = 0; j < d; ++j) set.inputs(i, j) = mu[j] + sd * rng.normal();
  }
  return set;
}

std::vector<int> draw_labels(const SimplexVector& q, std::size_t n, Rng& rng) {
  std::vector<int> labels(n);
  for (auto& y : labels) y = static_cast<int>(rng.categorical(q.span()));
  return labels;
}

}  // namespace

std::vector<std::size_t> LabeledSet::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

void DataSpec::validate() const {
  if (num_classes < 2) throw InvalidArgument("DataSpec: need at least 2 classes");
  if (dim < 2) throw InvalidArgument("DataSpec: need dim >= 2");
  if (n_train == 0 || n_test_pool == 0) throw InvalidArgument("DataSpec: sample counts must be positive");
  if (!(cov_scale >= 0.0) || !std::isfinite(cov_scale))
    throw InvalidArgument("DataSpec: cov_scale must be >= 0");
  const auto means = resolved_means();
  if (cov_scale == 0.0) {
    for (std::size_t a = 0; a < means.size(); ++a)
      for (std::size_t b = a + 1; b < means.size(); ++b)
        if (means[a] == means[b])
          throw InvalidArgument("DataSpec: identical class means with zero covariance");
  }
  if (q0) {
    if (q0->size() != static_cast<std::size_t>(num_classes))
      throw InvalidArgument("DataSpec: q0 length must equal num_classes");
    for (double v : *q0)
      if (!(v > 0.0)) throw InvalidArgument("DataSpec: q0 must be strictly positive");
    (void)SimplexVector(*q0);
  }
}

std::vector<Vector> DataSpec::resolved_means() const {
  const auto k = static_cast<std::size_t>(num_classes);
  const auto d = static_cast<std::size_t>(dim);
  if (!class_means.empty()) {
    if (class_means.size() != k) throw InvalidArgument("DataSpec: need one mean per class");
    for (const auto& m : class_means)
      if (m.size() != d) throw InvalidArgument("DataSpec: class mean has wrong dimension");
    return class_means;
  }
  if (d < k) throw InvalidArgument("DataSpec: default means need dim >= num_classes");
  std::vector<Vector> means(k, Vector(d, 0.0));
  for (std::size_t c = 0; c < k; ++c) means[c][c] = mean_scale;
  return means;
}

SimplexVector DataSpec::resolved_q0() const {
  return q0 ? SimplexVector(*q0) : SimplexVector::uniform(static_cast<std::size_t>(num_classes));
}

SourceData make_source_data(const DataSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto means = spec.resolved_means();
  const SimplexVector q0 = spec.resolved_q0();
  Rng rng(seed);

  SourceData data;
  data.q0 = q0;
  data.train = draw_set(means, spec.cov_scale, draw_labels(q0, spec.n_train, rng), spec.num_classes, rng);
  data.val = draw_set(means, spec.cov_scale, draw_labels(q0, spec.resolved_n_val(), rng),
                      spec.num_classes, rng);

  std::vector<int> pool_labels(spec.n_test_pool);
  for (std::size_t i = 0; i < pool_labels.size(); ++i)
    pool_labels[i] = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
  data.test_pool = draw_set(means, spec.cov_scale, pool_labels, spec.num_classes, rng);

  for (std::size_t c : data.train.class_counts())
    if (c == 0) throw InvalidArgument("make_source_data: a class is missing from the train split");
  return data;
}

// ---------------------------------------------------------------------------
// Shift processes

std::string_view to_string(ShiftKind kind) {
  switch (kind) {
    case ShiftKind::sinusoidal: return "sinusoidal";
    case ShiftKind::bernoulli: return "bernoulli";
    case ShiftKind::constant: return "constant";
    case ShiftKind::monotone: return "monotone";
  }
  return "?";
}

ShiftKind parse_shift_kind(std::string_view name) {
  if (name == "sinusoidal") return ShiftKind::sinusoidal;
  if (name == "bernoulli") return ShiftKind::bernoulli;
  if (name == "constant") return ShiftKind::constant;
  if (name == "monotone") return ShiftKind::monotone;
  throw InvalidArgument("unknown shift kind: " + std::string(name));
}

void ShiftPattern::validate() const {
  if (horizon < 1) throw InvalidArgument("ShiftPattern: horizon must be >= 1");
  if (q.size() != q_prime.size()) throw InvalidArgument("ShiftPattern: q and q' differ in length");
  if (switch_prob && !(*switch_prob >= 0.0 && *switch_prob <= 1.0))
    throw InvalidArgument("ShiftPattern: switch_prob outside [0,1]");
}

double ShiftPattern::resolved_switch_prob() const {
  return switch_prob ? *switch_prob : 1.0 - 1.0 / std::sqrt(static_cast<double>(horizon));
}

int ShiftPattern::period() const {
  return std::max(1, static_cast<int>(std::lround(std::sqrt(static_cast<double>(horizon)))));
}

ShiftPattern default_shift(ShiftKind kind, int num_classes, int horizon, std::uint64_t seed) {
  ShiftPattern p;
  p.kind = kind;
  p.q = SimplexVector::uniform(static_cast<std::size_t>(num_classes));
  p.q_prime = SimplexVector::one_hot(static_cast<std::size_t>(num_classes), 0);
  p.horizon = horizon;
  p.seed = seed;
  return p;
}

std::vector<double> mixing_weights(const ShiftPattern& pattern) {
  pattern.validate();
  const int T = pattern.horizon;
  std::vector<double> alpha(static_cast<std::size_t>(T));
  switch (pattern.kind) {
    case ShiftKind::sinusoidal: {
      const int L = pattern.period();
      for (int t = 1; t <= T; ++t) alpha[t - 1] = std::sin((t % L) * kPi / L);
      break;
    }
    case ShiftKind::bernoulli: {
      Rng rng(pattern.seed);
      const double flip = pattern.resolved_switch_prob();
      double a = 0.0;
      for (int t = 1; t <= T; ++t) {
        if (t > 1 && rng.bernoulli(flip)) a = 1.0 - a;
        alpha[t - 1] = a;
      }
      break;
    }
    case ShiftKind::constant:
      std::fill(alpha.begin(), alpha.end(), 1.0);
      break;
    case ShiftKind::monotone:
      // Runs from q' at t=1 to q at t=T, so the path length is ||q - q'||_1.
      for (int t = 1; t <= T; ++t) alpha[t - 1] = T == 1 ? 1.0 : static_cast<double>(t - 1) / (T - 1);
      break;
  }
  // sin can overshoot 1 by an ulp.
  for (double& a : alpha) a = std::clamp(a, 0.0, 1.0);
  return alpha;
}

SimplexVector marginal_at(const ShiftPattern& pattern, int t) {
  if (t < 1 || t > pattern.horizon)
    throw InvalidArgument("marginal_at: t=" + std::to_string(t) + " outside [1, T]");
  const auto alpha = mixing_weights(pattern);
  return SimplexVector::mix(alpha[t - 1], pattern.q, pattern.q_prime);
}

std::vector<SimplexVector> marginal_sequence(const ShiftPattern& pattern) {
  const auto alpha = mixing_weights(pattern);
  std::vector<SimplexVector> out;
  out.reserve(alpha.size());
  for (double a : alpha) out.push_back(SimplexVector::mix(a, pattern.q, pattern.q_prime));
  return out;
}

double shift_severity(const std::vector<SimplexVector>& marginals) {
  double v = 0.0;
  for (std::size_t t = 1; t < marginals.size(); ++t)
    v += l1_distance(marginals[t].span(), marginals[t - 1].span());
  return v;
}

// ---------------------------------------------------------------------------
// Corruptions

std::string_view to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::none: return "none";
    case CorruptionKind::rotate2d: return "rotate2d";
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::affine: return "affine";
  }
  return "?";
}

CorruptionKind parse_corruption_kind(std::string_view name) {
  if (name == "none") return CorruptionKind::none;
  if (name == "rotate2d") return CorruptionKind::rotate2d;
  if (name == "gaussian_noise") return CorruptionKind::gaussian_noise;
  if (name == "affine") return CorruptionKind::affine;
  throw InvalidArgument("unknown corruption kind: " + std::string(name));
}

void CorruptionSpec::validate() const {
  if (!(severity >= 0.0) || !std::isfinite(severity))
    throw InvalidArgument("CorruptionSpec: severity must be >= 0");
  if (!std::isfinite(angle_degrees)) throw InvalidArgument("CorruptionSpec: angle must be finite");
}

void rotate_plane(std::span<double> x, double degrees) {
  if (x.size() < 2) throw InvalidArgument("rotate_plane: need at least two coordinates");
  const double rad = degrees * kPi / 180.0;
  const double c = std::cos(rad);
  const double s = std::sin(rad);
  const double x0 = x[0];
  const double x1 = x[1];
  x[0] = c * x0 - s * x1;
  x[1] = s * x0 + c * x1;
}

void corrupt_in_place(std::span<double> x, const CorruptionSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case CorruptionKind::none:
      return;
    case CorruptionKind::rotate2d:
      rotate_plane(x, spec.angle_degrees);
      return;
    case CorruptionKind::gaussian_noise:
      for (double& v : x) v += spec.severity * rng.normal();
      return;
    case CorruptionKind::affine:
      for (double& v : x) v = (1.0 + spec.severity) * v + spec.severity;
      return;
  }
}

Vector corrupt(std::span<const double> x, const CorruptionSpec& spec, Rng& rng) {
  Vector out(x.begin(), x.end());
  corrupt_in_place(out, spec, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Batches

ClassPool::ClassPool(const LabeledSet& set)
    : set_(&set), members_(static_cast<std::size_t>(set.num_classes)) {
  for (std::size_t i = 0; i < set.size(); ++i)
    members_[static_cast<std::size_t>(set.labels[i])].push_back(i);
}

TestBatch sample_batch(const SimplexVector& q, std::size_t batch_size, const ClassPool& pool,
                       const CorruptionSpec& corruption, Rng& rng) {
  const LabeledSet& set = pool.set();
  if (q.size() != static_cast<std::size_t>(set.num_classes))
    throw InvalidArgument("sample_batch: marginal length does not match class count");
  for (std::size_t k = 0; k < q.size(); ++k)
    if (q[k] > 0.0 && pool.members(static_cast<int>(k)).empty())
      throw DataExhausted("sample_batch: no pool entries for class " + std::to_string(k));

  TestBatch batch;
  batch.inputs = Matrix(batch_size, set.dim());
  batch.hidden_labels.resize(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const int y = static_cast<int>(rng.categorical(q.span()));
    const auto& members = pool.members(y);
    const std::size_t src = members[rng.uniform_index(members.size())];
    auto row = batch.inputs.row(b);
    std::copy(set.inputs.row(src).begin(), set.inputs.row(src).end(), row.begin());
    corrupt_in_place(row, corruption, rng);
    batch.hidden_labels[b] = y;
  }
  return batch;
}

// ---------------------------------------------------------------------------
// CSV

void write_csv(const LabeledSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("write_csv: cannot open " + path.string());
  for (std::size_t j = 0; j < set.dim(); ++j) out << 'x' << (j + 1) << ',';
  out << "label\n";
  out.precision(17);
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (double v : set.inputs.row(i)) out << v << ',';
    out << set.labels[i] << '\n';
  }
}

LabeledSet read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("read_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument("read_csv: missing header");
  LabeledSet set;
  int max_label = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    Vector row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (row.empty()) continue;
    const int label = static_cast<int>(row.back());
    row.pop_back();
    set.inputs.append_row(row);
    set.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  set.num_classes = max_label + 1;
  return set;
}

}  // namespace olsofu
