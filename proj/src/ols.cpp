// src/ols.cpp

#include "olsofu/ols.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "olsofu/errors.hpp"

namespace olsofu {

namespace {

constexpr double kMassFloor = 1e-300;

std::uint64_t fnv(std::uint64_t h, const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

double layer_norm(const DenseLayer& head) {
  double s = 0.0;
  for (double v : head.weight.data()) s += v * v;
  for (double v : head.bias) s += v * v;
  return std::sqrt(s);
}

void scale_layer(DenseLayer& head, double c) {
  for (double& v : head.weight.data()) v *= c;
  for (double& v : head.bias) v *= c;
}

double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

SimplexVector mean_of(const Vector& sum, int count) {
  Vector m(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) m[i] = sum[i] / count;
  return project_simplex(m);
}

}  // namespace

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::none: return "none";
    case Algorithm::fth: return "fth";
    case Algorithm::ftfwh: return "ftfwh";
    case Algorithm::rogd: return "rogd";
    case Algorithm::flhftl: return "flhftl";
    case Algorithm::uogd: return "uogd";
    case Algorithm::atlas: return "atlas";
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view name) {
  for (Algorithm a : {Algorithm::none, Algorithm::fth, Algorithm::ftfwh, Algorithm::rogd, Algorithm::flhftl,
                      Algorithm::uogd, Algorithm::atlas})
    if (to_string(a) == name) return a;
  throw InvalidArgument("unknown algorithm: " + std::string(name));
}

bool is_reweighting(Algorithm a) {
  return a == Algorithm::fth || a == Algorithm::ftfwh || a == Algorithm::rogd || a == Algorithm::flhftl;
}

bool is_last_layer(Algorithm a) { return a == Algorithm::uogd || a == Algorithm::atlas; }

TrainCache make_train_cache(const ModelParams& f, const LabeledSet& train) {
  TrainCache cache;
  BatchForward fw = forward_batch(f, train.inputs);
  cache.features = std::move(fw.features);
  cache.probs = std::move(fw.probs);
  cache.labels = train.labels;
  cache.class_counts = train.class_counts();
  cache.model_fingerprint = f.fingerprint();
  for (std::size_t c : cache.class_counts)
    if (c == 0) throw InvalidArgument("make_train_cache: a class slice of D_0 is empty");
  return cache;
}

Vector marginal_ratio(std::span<const double> p, const SimplexVector& q0) {
  if (p.size() != q0.size()) throw InvalidArgument("marginal_ratio: dimension mismatch");
  Vector r(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (!(q0[k] > 0.0)) throw InvalidArgument("marginal_ratio: q0 must be strictly positive");
    r[k] = p[k] / q0[k];
  }
  return r;
}

Vector reweight_probs(std::span<const double> probs, std::span<const double> ratio) {
  if (probs.size() != ratio.size()) throw InvalidArgument("reweight_probs: dimension mismatch");
  Vector out(probs.size());
  double z = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    out[k] = probs[k] * ratio[k];
    z += out[k];
  }
  if (!(z > 0.0)) return Vector(probs.begin(), probs.end());
  for (double& v : out) v /= z;
  return out;
}

SimplexVector reweight_predict(const ModelParams& base, const SimplexVector& p, const SimplexVector& q0,
                               std::span<const double> x) {
  const Vector ratio = marginal_ratio(p.span(), q0);
  return project_simplex(reweight_probs(forward(base, x).probs, ratio));
}

void OlsConfig::validate() const {
  if (horizon < 1) throw InvalidArgument("OlsConfig: horizon must be >= 1");
  if (ftfwh_window < 1) throw InvalidArgument("OlsConfig: ftfwh_window must be >= 1");
  if (rogd_eta && !(*rogd_eta >= 0.0)) throw InvalidArgument("OlsConfig: rogd_eta must be >= 0");
  if (rogd_warmup < 1) throw InvalidArgument("OlsConfig: rogd_warmup must be >= 1");
  if (flh_eta < 0.0) throw InvalidArgument("OlsConfig: flh_eta must be >= 0");
  if (flh_max_experts < 1) throw InvalidArgument("OlsConfig: flh_max_experts must be >= 1");
  if (uogd_eta && !(*uogd_eta >= 0.0)) throw InvalidArgument("OlsConfig: uogd_eta must be >= 0");
  if (!(uogd_radius > 0.0)) throw InvalidArgument("OlsConfig: uogd_radius must be > 0");
  if (atlas_eps && !(*atlas_eps > 0.0)) throw InvalidArgument("OlsConfig: atlas_eps must be > 0");
}

int atlas_pool_size(int horizon) {
  if (horizon < 1) throw InvalidArgument("atlas_pool_size: horizon must be >= 1");
  return 1 + static_cast<int>(std::ceil(0.5 * std::log2(1.0 + 2.0 * horizon)));
}

std::vector<double> atlas_learning_rates(int horizon, std::size_t num_classes, double sigma_min) {
  const int n = atlas_pool_size(horizon);
  const double base = sigma_min / std::sqrt(static_cast<double>(num_classes) * horizon);
  std::vector<double> etas(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) etas[static_cast<std::size_t>(i)] = base * std::ldexp(1.0, i);
  return etas;
}

DenseLayer folded_head(const ModelParams& f) {
  DenseLayer head = f.linear_head;
  scale_layer(head, 1.0 / f.temperature);
  return head;
}

OlsState init_ols(const OlsConfig& cfg, const ModelParams& f0, const SimplexVector& q0, double sigma_min) {
  cfg.validate();
  const std::size_t k = q0.size();
  if (f0.num_classes() != k) throw InvalidArgument("init_ols: model and q0 disagree on K");
  OlsState st;
  st.algorithm = cfg.algorithm;
  st.q0 = q0;
  const double T = cfg.horizon;
  switch (cfg.algorithm) {
    case Algorithm::none:
      break;
    case Algorithm::fth:
      st.data = FthState{Vector(k, 0.0), 0, q0};
      break;
    case Algorithm::ftfwh:
      st.data = FtfwhState{cfg.ftfwh_window, {}, q0};
      break;
    case Algorithm::rogd:
      st.data = RogdState{q0, cfg.rogd_eta, 0.0, cfg.horizon, cfg.rogd_warmup, 0};
      break;
    case Algorithm::flhftl: {
      FlhState flh;
      flh.eta = cfg.flh_eta > 0.0 ? cfg.flh_eta : 0.5 * static_cast<double>(k);
      flh.max_experts = cfg.flh_max_experts;
      flh.q_tilde = q0;
      st.data = std::move(flh);
      break;
    }
    case Algorithm::uogd:
      st.data = UogdState{folded_head(f0), cfg.uogd_eta.value_or(1.0 / std::sqrt(T)), cfg.uogd_radius};
      break;
    case Algorithm::atlas: {
      AtlasState at;
      for (double eta : atlas_learning_rates(cfg.horizon, k, sigma_min))
        at.experts.push_back(UogdState{folded_head(f0), eta, cfg.uogd_radius});
      const std::size_t n = at.experts.size();
      at.cumulative_risk.assign(n, 0.0);
      at.meta.assign(n, 1.0 / static_cast<double>(n));
      at.eps = cfg.atlas_eps.value_or(std::sqrt(8.0 / T));
      at.combined = at.experts.front().head;
      st.data = std::move(at);
      break;
    }
  }
  return st;
}

// ---------------------------------------------------------------------------

FthState fth_step(FthState st, const SimplexVector& s) {
  if (st.sum.size() != s.size()) throw InvalidArgument("fth_step: dimension mismatch");
  for (std::size_t k = 0; k < s.size(); ++k) st.sum[k] += s[k];
  ++st.count;
  st.p = mean_of(st.sum, st.count);
  return st;
}

FtfwhState ftfwh_step(FtfwhState st, const SimplexVector& s) {
  st.recent.push_back(s.values());
  while (st.recent.size() > st.window) st.recent.pop_front();
  // Summed afresh each step so no drift accumulates from subtraction.
  Vector sum(s.size(), 0.0);
  for (const auto& v : st.recent)
    for (std::size_t k = 0; k < v.size(); ++k) sum[k] += v[k];
  st.p = mean_of(sum, static_cast<int>(st.recent.size()));
  return st;
}

FlhState flhftl_step(FlhState st, const SimplexVector& s) {
  const std::size_t k = s.size();
  ++st.t;
  // Score every existing expert on the prediction it made before seeing s.
  for (std::size_t j = 0; j < st.experts.size(); ++j) {
    const FlhExpert& e = st.experts[j];
    double loss = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = e.sum[c] / e.count - s[c];
      loss += d * d;
    }
    st.log_weights[j] -= st.eta * loss;
  }
  for (auto& e : st.experts) {
    for (std::size_t c = 0; c < k; ++c) e.sum[c] += s[c];
    ++e.count;
  }
  // New expert gets 1/(t+1) of the mass, or all of it if it is alone.
  if (!st.experts.empty()) {
    const double lse = log_sum_exp(st.log_weights);
    const double keep = std::log(1.0 - 1.0 / (st.t + 1.0));
    for (double& lw : st.log_weights) lw = lw - lse + keep;
    st.log_weights.push_back(-std::log(st.t + 1.0));
  } else {
    st.log_weights.push_back(0.0);
  }
  st.experts.push_back(FlhExpert{st.t, s.values(), 1});
  while (st.experts.size() > st.max_experts) {
    st.experts.erase(st.experts.begin());
    st.log_weights.erase(st.log_weights.begin());
  }
  const double lse = log_sum_exp(st.log_weights);
  Vector pred(k, 0.0);
  for (std::size_t j = 0; j < st.experts.size(); ++j) {
    const double w = std::exp(st.log_weights[j] - lse);
    for (std::size_t c = 0; c < k; ++c) pred[c] += w * st.experts[j].sum[c] / st.experts[j].count;
  }
  st.q_tilde = project_simplex(pred);
  return st;
}

Vector rogd_class_risks(const TrainCache& cache, std::span<const double> p, const SimplexVector& q0) {
  const std::size_t k = q0.size();
  const Vector r = marginal_ratio(p, q0);
  Vector risk(k, 0.0);
  for (std::size_t i = 0; i < cache.labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(cache.labels[i]);
    const auto f = cache.probs.row(i);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += f[c] * r[c];
    z = std::max(z, kMassFloor);
    risk[y] += f[y] * r[y] / z;
  }
  for (std::size_t c = 0; c < k; ++c) risk[c] = 1.0 - risk[c] / static_cast<double>(cache.class_counts[c]);
  return risk;
}

Matrix rogd_jacobian(const TrainCache& cache, std::span<const double> p, const SimplexVector& q0) {
  const std::size_t k = q0.size();
  const Vector r = marginal_ratio(p, q0);
  Matrix jac(k, k);
  for (std::size_t i = 0; i < cache.labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(cache.labels[i]);
    const auto f = cache.probs.row(i);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += f[c] * r[c];
    z = std::max(z, kMassFloor);
    const double g = f[y] * r[y] / z;
    // d g_y / d p_j = (delta_yj f_y - g_y f_j) / (Z q0_j)
    for (std::size_t j = 0; j < k; ++j)
      jac(y, j) -= ((j == y ? f[y] : 0.0) - g * f[j]) / (z * q0[j]);
  }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < k; ++j) jac(c, j) /= static_cast<double>(cache.class_counts[c]);
  return jac;
}

RogdState rogd_step(RogdState st, std::span<const double> s_raw, const TrainCache& cache, const SimplexVector& q0) {
  const std::size_t k = q0.size();
  if (s_raw.size() != k) throw InvalidArgument("rogd_step: dimension mismatch");
  ++st.t;
  const Matrix jac = rogd_jacobian(cache, st.p.span(), q0);
  Vector grad(k, 0.0);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < k; ++j) grad[j] += jac(c, j) * s_raw[c];
  double eta = 0.0;
  if (st.fixed_eta) {
    eta = *st.fixed_eta;
  } else {
    if (st.t <= st.warmup) st.l_hat = std::max(st.l_hat, norm2(grad));
    if (st.l_hat > 0.0) eta = std::sqrt(2.0 / st.horizon) / st.l_hat;
  }
  if (eta == 0.0) return st;
  Vector next(k);
  for (std::size_t j = 0; j < k; ++j) next[j] = st.p[j] - eta * grad[j];
  st.p = project_simplex(next);
  return st;
}

double weighted_class_risk(const DenseLayer& head, const TrainCache& cache, std::span<const double> s,
                           LayerGrad* grad) {
  const std::size_t n = cache.labels.size();
  if (s.size() != cache.class_counts.size()) throw InvalidArgument("weighted_class_risk: dimension mismatch");
  Vector weights(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(cache.labels[i]);
    weights[i] = s[y] / static_cast<double>(cache.class_counts[y]);
  }
  return head_loss_grad(head, 1.0, cache.features, cache.labels, weights, grad);
}

namespace {

// One UOGD step that also reports the risk at the pre-step head.
double uogd_update(UogdState& st, std::span<const double> s_raw, const TrainCache& cache) {
  LayerGrad g;
  const double risk = weighted_class_risk(st.head, cache, s_raw, &g);
  if (st.eta != 0.0) {
    auto w = st.head.weight.data();
    auto gw = g.weight.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= st.eta * gw[i];
    for (std::size_t i = 0; i < st.head.bias.size(); ++i) st.head.bias[i] -= st.eta * g.bias[i];
    const double norm = layer_norm(st.head);
    if (norm > st.radius) scale_layer(st.head, st.radius / norm);
  }
  return risk;
}

}  // namespace

UogdState uogd_step(UogdState st, std::span<const double> s_raw, const TrainCache& cache) {
  uogd_update(st, s_raw, cache);
  return st;
}

AtlasState atlas_step(AtlasState st, std::span<const double> s_raw, const TrainCache& cache) {
  const std::size_t n = st.experts.size();
  if (n == 0) throw InvalidArgument("atlas_step: empty pool");
  for (std::size_t i = 0; i < n; ++i) st.cumulative_risk[i] += uogd_update(st.experts[i], s_raw, cache);
  Vector logits(n);
  for (std::size_t i = 0; i < n; ++i) logits[i] = -st.eps * st.cumulative_risk[i];
  const double lse = log_sum_exp(logits);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    st.meta[i] = std::exp(logits[i] - lse);
    total += st.meta[i];
  }
  for (double& m : st.meta) m /= total;
  // w_1 + sum_i p_i (w_i - w_1): identical experts reproduce w_1 exactly.
  const DenseLayer& base = st.experts.front().head;
  st.combined = base;
  auto cw = st.combined.weight.data();
  for (std::size_t i = 1; i < n; ++i) {
    const DenseLayer& e = st.experts[i].head;
    auto ew = e.weight.data();
    auto bw = base.weight.data();
    for (std::size_t j = 0; j < cw.size(); ++j) cw[j] += st.meta[i] * (ew[j] - bw[j]);
    for (std::size_t j = 0; j < st.combined.bias.size(); ++j)
      st.combined.bias[j] += st.meta[i] * (e.bias[j] - base.bias[j]);
  }
  return st;
}

OlsState ols_step(const OlsState& st, const MarginalEstimate& s, const TrainCache& cache) {
  OlsState next = st;
  ++next.t;
  switch (st.algorithm) {
    case Algorithm::none:
      break;
    case Algorithm::fth:
      next.data = fth_step(std::get<FthState>(st.data), s.clipped);
      break;
    case Algorithm::ftfwh:
      next.data = ftfwh_step(std::get<FtfwhState>(st.data), s.clipped);
      break;
    case Algorithm::rogd:
      next.data = rogd_step(std::get<RogdState>(st.data), s.raw, cache, st.q0);
      break;
    case Algorithm::flhftl:
      next.data = flhftl_step(std::get<FlhState>(st.data), s.clipped);
      break;
    case Algorithm::uogd:
      next.data = uogd_step(std::get<UogdState>(st.data), s.raw, cache);
      break;
    case Algorithm::atlas:
      next.data = atlas_step(std::get<AtlasState>(st.data), s.raw, cache);
      break;
  }
  return next;
}

std::optional<SimplexVector> current_weight(const OlsState& st) {
  if (const auto* x = std::get_if<FthState>(&st.data)) return x->p;
  if (const auto* x = std::get_if<FtfwhState>(&st.data)) return x->p;
  if (const auto* x = std::get_if<RogdState>(&st.data)) return x->p;
  if (const auto* x = std::get_if<FlhState>(&st.data)) return x->q_tilde;
  return std::nullopt;
}

const DenseLayer* current_head(const OlsState& st) {
  if (const auto* x = std::get_if<UogdState>(&st.data)) return &x->head;
  if (const auto* x = std::get_if<AtlasState>(&st.data)) return &x->combined;
  return nullptr;
}

std::uint64_t state_hash(const OlsState& st) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv(h, &st.t, sizeof st.t);
  if (auto p = current_weight(st)) h = fnv(h, p->values().data(), p->size() * sizeof(double));
  if (const DenseLayer* w = current_head(st)) {
    h = fnv(h, w->weight.data().data(), w->weight.data().size() * sizeof(double));
    h = fnv(h, w->bias.data(), w->bias.size() * sizeof(double));
  }
  return h;
}

}  // namespace olsofu
