// src/numkit.cpp

#include "olsofu/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "olsofu/errors.hpp"

namespace olsofu {

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m;
  for (const auto& r : rows) m.append_row(std::vector<double>(r));
  return m;
}

void Matrix::append_row(std::span<const double> values) {
  if (rows_ == 0 && data_.empty()) {
    cols_ = values.size();
  } else if (values.size() != cols_) {
    throw InvalidArgument("append_row: width " + std::to_string(values.size()) +
                          " does not match " + std::to_string(cols_));
  }
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw InvalidArgument("matvec: dimension mismatch");
  Vector y(a.rows(), 0.0);
  for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row(r), x);
  return y;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw InvalidArgument("matmul: dimension mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  }
  return c;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double l1_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

double linf_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s = std::max(s, std::abs(a[i] - b[i]));
  return s;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Simplex

bool is_on_simplex(std::span<const double> v, double tol) {
  if (v.empty()) return false;
  double sum = 0.0;
  for (double x : v) {
    if (!(x >= 0.0) || !std::isfinite(x)) return false;
    sum += x;
  }
  return std::abs(sum - 1.0) <= tol;
}

SimplexVector::SimplexVector(Vector values) : values_(std::move(values)) {
  if (!is_on_simplex(values_, kSumTolerance))
    throw InvalidArgument("SimplexVector: entries must be >= 0 and sum to 1");
}

SimplexVector SimplexVector::uniform(std::size_t k) {
  if (k == 0) throw InvalidArgument("SimplexVector::uniform: k must be positive");
  return SimplexVector(Vector(k, 1.0 / static_cast<double>(k)));
}

SimplexVector SimplexVector::one_hot(std::size_t k, std::size_t index) {
  if (index >= k) throw InvalidArgument("SimplexVector::one_hot: index out of range");
  Vector v(k, 0.0);
  v[index] = 1.0;
  return SimplexVector(std::move(v));
}

SimplexVector SimplexVector::mix(double a, const SimplexVector& x, const SimplexVector& y) {
  if (x.size() != y.size()) throw InvalidArgument("SimplexVector::mix: size mismatch");
  if (!(a >= 0.0 && a <= 1.0)) throw InvalidArgument("SimplexVector::mix: weight outside [0,1]");
  Vector v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a * x[i] + (1.0 - a) * y[i];
  return SimplexVector(std::move(v));
}

SimplexVector project_simplex(std::span<const double> v) {
  if (v.empty()) throw InvalidArgument("project_simplex: empty vector");
  if (!all_finite(v)) throw InvalidArgument("project_simplex: non-finite input");
  if (is_on_simplex(v, 1e-12)) return SimplexVector(Vector(v.begin(), v.end()));

  Vector u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumulative += u[j];
    const double candidate = (cumulative - 1.0) / static_cast<double>(j + 1);
    if (u[j] - candidate > 0.0) theta = candidate;
  }
  Vector p(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = std::max(v[i] - theta, 0.0);
  return SimplexVector(std::move(p));
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace {

struct LuFactors {
  Matrix lu;
  std::vector<std::size_t> perm;
  bool singular = false;
};

LuFactors lu_factor(const Matrix& a) {
  const std::size_t n = a.rows();
  LuFactors f{a, std::vector<std::size_t>(n), false};
  std::iota(f.perm.begin(), f.perm.end(), 0);
  Matrix& m = f.lu;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t pivot = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(m(i, k)) > std::abs(m(pivot, k))) pivot = i;
    if (m(pivot, k) == 0.0) {
      f.singular = true;
      return f;
    }
    if (pivot != k) {
      for (std::size_t c = 0; c < n; ++c) std::swap(m(k, c), m(pivot, c));
      std::swap(f.perm[k], f.perm[pivot]);
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      m(i, k) /= m(k, k);
      const double lik = m(i, k);
      if (lik == 0.0) continue;
      for (std::size_t c = k + 1; c < n; ++c) m(i, c) -= lik * m(k, c);
    }
  }
  return f;
}

Vector lu_solve(const LuFactors& f, std::span<const double> b) {
  const std::size_t n = f.lu.rows();
  Vector x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = b[f.perm[i]];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < i; ++k) x[i] -= f.lu(i, k) * x[k];
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) x[i] -= f.lu(i, k) * x[k];
    x[i] /= f.lu(i, i);
  }
  return x;
}

double one_norm(const Matrix& a) {
  double best = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r) s += std::abs(a(r, c));
    best = std::max(best, s);
  }
  return best;
}

double condition_from_factors(const Matrix& a, const LuFactors& f) {
  if (f.singular) return std::numeric_limits<double>::infinity();
  const std::size_t n = a.rows();
  double inv_norm = 0.0;
  Vector e(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    e[c] = 1.0;
    const Vector col = lu_solve(f, e);
    e[c] = 0.0;
    double s = 0.0;
    for (double x : col) s += std::abs(x);
    if (!std::isfinite(s)) return std::numeric_limits<double>::infinity();
    inv_norm = std::max(inv_norm, s);
  }
  return one_norm(a) * inv_norm;
}

void require_square(const Matrix& a, const char* who) {
  if (a.rows() != a.cols() || a.rows() == 0)
    throw InvalidArgument(std::string(who) + ": matrix must be square and nonempty");
  if (!all_finite(a.data())) throw InvalidArgument(std::string(who) + ": non-finite entries");
}

}  // namespace

double condition_number(const Matrix& a) {
  require_square(a, "condition_number");
  return condition_from_factors(a, lu_factor(a));
}

Vector solve_linear(const Matrix& a, std::span<const double> b) {
  require_square(a, "solve_linear");
  if (b.size() != a.rows()) throw InvalidArgument("solve_linear: rhs length mismatch");
  if (!all_finite(b)) throw InvalidArgument("solve_linear: non-finite rhs");

  const LuFactors f = lu_factor(a);
  const double cond = condition_from_factors(a, f);
  if (!(cond <= kMaxConditionNumber))
    throw SingularMatrix("solve_linear: condition number " + std::to_string(cond) +
                             " exceeds limit",
                         cond);

  Vector x = lu_solve(f, b);
  // One sweep of iterative refinement.
  Vector r(b.begin(), b.end());
  const Vector ax = matvec(a, x);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= ax[i];
  const Vector dx = lu_solve(f, r);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += dx[i];
  return x;
}

Vector singular_values(const Matrix& a) {
  if (!all_finite(a.data())) throw InvalidArgument("singular_values: non-finite entries");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  Matrix u = a;
  constexpr double kEps = 1e-15;
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += u(i, p) * u(i, p);
          beta += u(i, q) * u(i, q);
          gamma += u(i, p) * u(i, q);
        }
        if (gamma == 0.0 || std::abs(gamma) <= kEps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double up = u(i, p);
          const double uq = u(i, q);
          u(i, p) = c * up - s * uq;
          u(i, q) = s * up + c * uq;
        }
      }
    }
    if (!rotated) break;
  }
  Vector sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += u(i, j) * u(i, j);
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.begin(), sv.end(), std::greater<>());
  // Only min(m, n) values are meaningful; the rest are zero by construction.
  sv.resize(std::min(m, n));
  const double floor = sv.empty() ? 0.0 : 1e-14 * sv.front();
  for (double& s : sv)
    if (s <= floor) s = 0.0;
  return sv;
}

double min_singular_value(const Matrix& a) {
  const Vector sv = singular_values(a);
  return sv.empty() ? 0.0 : sv.back();
}

Vector softmax(std::span<const double> z, double temperature) {
  if (!(temperature > 0.0)) throw InvalidArgument("softmax: temperature must be positive");
  if (z.empty()) throw InvalidArgument("softmax: empty input");
  const double zmax = *std::max_element(z.begin(), z.end());
  Vector p(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp((z[i] - zmax) / temperature);
    total += p[i];
  }
  for (double& x : p) x /= total;
  return p;
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// Random numbers

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {
inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

Rng::Rng(std::uint64_t seed) {
  for (int i = 0; i < 4; ++i) s_[i] = derive_seed(seed, static_cast<std::uint64_t>(i));
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  // Box-Muller; the first uniform is shifted away from zero.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw InvalidArgument("Rng::uniform_index: n must be positive");
  // Lemire's multiply-shift with rejection for an unbiased draw.
  const std::uint64_t bound = n;
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t x = next_u64();
    __extension__ using u128 = unsigned __int128;
    const u128 m = static_cast<u128>(x) * bound;
    if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::size_t>(m >> 64);
  }
}

bool Rng::bernoulli(double p) { return uniform() < p; }

std::size_t Rng::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw InvalidArgument("Rng::categorical: weights must have positive mass");
  const double target = uniform() * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last_positive = i;
    if (target < acc) return i;
  }
  return last_positive;
}

}  // namespace olsofu
