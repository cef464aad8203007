// src/model.cpp

#include "olsofu/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "olsofu/errors.hpp"

namespace olsofu {

namespace {

double activate(Activation act, double z) { return act == Activation::tanh ? std::tanh(z) : z; }

// Applies one layer to every row of `in`.
Matrix apply_layer(const DenseLayer& layer, const Matrix& in) {
  const std::size_t n = in.rows();
  const std::size_t out = layer.out_dim();
  const std::size_t k = layer.in_dim();
  Matrix z(n, out);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = in.row(i).data();
    double* zi = z.row(i).data();
    for (std::size_t o = 0; o < out; ++o) {
      const double* w = layer.weight.row(o).data();
      double acc = layer.bias[o];
      for (std::size_t j = 0; j < k; ++j) acc += w[j] * x[j];
      zi[o] = activate(layer.activation, acc);
    }
  }
  return z;
}

// acts[0] is the input, acts.back() the features.
std::vector<Matrix> feature_activations(const ModelParams& m, const Matrix& x) {
  if (x.cols() != m.input_dim())
    throw InvalidArgument("forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                          std::to_string(m.input_dim()));
  std::vector<Matrix> acts;
  acts.reserve(m.feat_layers.size() + 1);
  acts.push_back(x);
  for (const auto& layer : m.feat_layers) acts.push_back(apply_layer(layer, acts.back()));
  return acts;
}

void softmax_rows_in_place(Matrix& logits, double temperature) {
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    const Vector p = softmax(row, temperature);
    std::copy(p.begin(), p.end(), row.begin());
  }
}

// Log-softmax of z / T for one row.
Vector log_softmax(std::span<const double> z, double temperature) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v / temperature);
  double sum = 0.0;
  for (double v : z) sum += std::exp(v / temperature - mx);
  const double lse = mx + std::log(sum);
  Vector out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] / temperature - lse;
  return out;
}

LayerGrad zero_grad(const DenseLayer& layer) {
  return {Matrix(layer.weight.rows(), layer.weight.cols()), Vector(layer.bias.size(), 0.0)};
}

// Accumulates head gradients from dlogits (n x out) and returns dfeatures.
Matrix head_backward(const DenseLayer& head, const Matrix& features, const Matrix& dlogits,
                     LayerGrad* grad, bool want_dfeat) {
  const std::size_t n = features.rows();
  const std::size_t h = features.cols();
  const std::size_t out = head.out_dim();
  Matrix dfeat;
  if (want_dfeat) dfeat = Matrix(n, h);
  for (std::size_t i = 0; i < n; ++i) {
    const double* f = features.row(i).data();
    const double* d = dlogits.row(i).data();
    for (std::size_t o = 0; o < out; ++o) {
      if (d[o] == 0.0) continue;
      if (grad) {
        double* gw = grad->weight.row(o).data();
        for (std::size_t j = 0; j < h; ++j) gw[j] += d[o] * f[j];
        grad->bias[o] += d[o];
      }
      if (want_dfeat) {
        const double* w = head.weight.row(o).data();
        double* df = dfeat.row(i).data();
        for (std::size_t j = 0; j < h; ++j) df[j] += d[o] * w[j];
      }
    }
  }
  return dfeat;
}

// Backpropagates d(loss)/d(features) through the extractor.
void feat_backward(const ModelParams& m, const std::vector<Matrix>& acts, Matrix delta, Gradients& g) {
  for (std::size_t l = m.feat_layers.size(); l-- > 0;) {
    const DenseLayer& layer = m.feat_layers[l];
    const Matrix& out = acts[l + 1];
    const Matrix& in = acts[l];
    if (layer.activation == Activation::tanh) {
      auto d = delta.data();
      auto a = out.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - a[i] * a[i];
    }
    LayerGrad& lg = g.feat[l];
    const std::size_t n = in.rows();
    const std::size_t k = layer.in_dim();
    const std::size_t o_dim = layer.out_dim();
    Matrix next;
    if (l > 0) next = Matrix(n, k);
    for (std::size_t i = 0; i < n; ++i) {
      const double* x = in.row(i).data();
      const double* d = delta.row(i).data();
      for (std::size_t o = 0; o < o_dim; ++o) {
        if (d[o] == 0.0) continue;
        double* gw = lg.weight.row(o).data();
        for (std::size_t j = 0; j < k; ++j) gw[j] += d[o] * x[j];
        lg.bias[o] += d[o];
        if (l > 0) {
          const double* w = layer.weight.row(o).data();
          double* nx = next.row(i).data();
          for (std::size_t j = 0; j < k; ++j) nx[j] += d[o] * w[j];
        }
      }
    }
    delta = std::move(next);
  }
}

constexpr double kNormEps = 1e-12;

LossGrad compute_loss(const ModelParams& m, const LossBatch& batch, LossKind kind, unsigned scope,
                      bool want_grad) {
  const std::size_t n = batch.inputs.rows();
  if (n == 0) throw InvalidArgument("backward: empty batch");
  const bool needs_labels = kind == LossKind::cross_entropy || kind == LossKind::rotation;
  if (needs_labels && batch.labels.size() != n)
    throw InvalidArgument("backward: " + to_string(kind) + " needs one label per input");
  if (!needs_labels && !batch.labels.empty())
    throw InvalidArgument("backward: " + to_string(kind) + " takes no labels");

  LossGrad out;
  if (want_grad) out.grad = Gradients::zeros_like(m);
  const bool feat = want_grad && (scope & kScopeFeat);
  const double inv_n = 1.0 / static_cast<double>(n);

  const auto acts = feature_activations(m, batch.inputs);
  const Matrix& features = acts.back();
  const std::size_t h = features.cols();

  auto label_head_ce = [&](const DenseLayer& head, double temperature, LayerGrad* grad,
                           std::size_t classes) -> Matrix {
    Matrix logits = apply_layer(head, features);
    Matrix dlogits(n, classes);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const int y = batch.labels[i];
      if (y < 0 || static_cast<std::size_t>(y) >= classes)
        throw InvalidArgument("backward: label out of range");
      const Vector lp = log_softmax(logits.row(i), temperature);
      loss -= lp[y];
      for (std::size_t c = 0; c < classes; ++c)
        dlogits(i, c) = (std::exp(lp[c]) - (static_cast<int>(c) == y ? 1.0 : 0.0)) * inv_n / temperature;
    }
    out.loss = loss * inv_n;
    if (!want_grad) return {};
    return head_backward(head, features, dlogits, grad, feat);
  };

  Matrix dfeat;
  switch (kind) {
    case LossKind::cross_entropy: {
      LayerGrad* g = want_grad && (scope & kScopeLinear) ? &out.grad.linear : nullptr;
      dfeat = label_head_ce(m.linear_head, m.temperature, g, m.num_classes());
      break;
    }
    case LossKind::rotation: {
      LayerGrad* g = want_grad && (scope & kScopeSsl) ? &out.grad.ssl : nullptr;
      dfeat = label_head_ce(m.ssl_head, 1.0, g, kRotationClasses);
      break;
    }
    case LossKind::entropy: {
      const std::size_t k = m.num_classes();
      Matrix logits = apply_layer(m.linear_head, features);
      Matrix dlogits(n, k);
      double loss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const Vector lp = log_softmax(logits.row(i), m.temperature);
        double hi = 0.0;
        for (std::size_t c = 0; c < k; ++c) hi -= std::exp(lp[c]) * lp[c];
        loss += hi;
        for (std::size_t c = 0; c < k; ++c) {
          const double p = std::exp(lp[c]);
          dlogits(i, c) = -p * (lp[c] + hi) * inv_n / m.temperature;
        }
      }
      out.loss = loss * inv_n;
      if (want_grad) {
        LayerGrad* g = (scope & kScopeLinear) ? &out.grad.linear : nullptr;
        dfeat = head_backward(m.linear_head, features, dlogits, g, feat);
      }
      break;
    }
    case LossKind::infonce: {
      if (n < 2) throw InvalidArgument("infonce: batch needs at least 2 inputs");
      if (batch.positives.rows() != n || batch.positives.cols() != batch.inputs.cols())
        throw InvalidArgument("infonce: positives must match the input shape");
      if (!(batch.infonce_temperature > 0.0)) throw InvalidArgument("infonce: temperature must be > 0");
      const double tau = batch.infonce_temperature;
      const auto pacts = feature_activations(m, batch.positives);
      const Matrix& zp = pacts.back();
      Matrix u(n, h), v(n, h);
      Vector nu(n), nv(n);
      for (std::size_t i = 0; i < n; ++i) {
        nu[i] = std::sqrt(dot(features.row(i), features.row(i)) + kNormEps);
        nv[i] = std::sqrt(dot(zp.row(i), zp.row(i)) + kNormEps);
        for (std::size_t j = 0; j < h; ++j) {
          u(i, j) = features(i, j) / nu[i];
          v(i, j) = zp(i, j) / nv[i];
        }
      }
      Matrix ds(n, n);
      double loss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        Vector s(n);
        for (std::size_t j = 0; j < n; ++j) s[j] = dot(u.row(i), v.row(j));
        const Vector lp = log_softmax(s, tau);
        loss -= lp[i];
        for (std::size_t j = 0; j < n; ++j) ds(i, j) = (std::exp(lp[j]) - (i == j ? 1.0 : 0.0)) * inv_n / tau;
      }
      out.loss = loss * inv_n;
      if (feat) {
        Matrix du(n, h), dv(n, h);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double d = ds(i, j);
            for (std::size_t c = 0; c < h; ++c) {
              du(i, c) += d * v(j, c);
              dv(j, c) += d * u(i, c);
            }
          }
        // Through the normalization z / sqrt(|z|^2 + eps).
        auto through_norm = [&](const Matrix& unit, const Vector& norms, const Matrix& dunit) {
          Matrix dz(n, h);
          for (std::size_t i = 0; i < n; ++i) {
            const double proj = dot(unit.row(i), dunit.row(i));
            for (std::size_t c = 0; c < h; ++c) dz(i, c) = (dunit(i, c) - unit(i, c) * proj) / norms[i];
          }
          return dz;
        };
        dfeat = through_norm(u, nu, du);
        feat_backward(m, pacts, through_norm(v, nv, dv), out.grad);
      }
      break;
    }
  }

  if (feat) feat_backward(m, acts, std::move(dfeat), out.grad);
  return out;
}

std::uint64_t fnv_bytes(std::uint64_t h, const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv_layer(std::uint64_t h, const DenseLayer& layer) {
  const std::uint64_t dims[2] = {layer.weight.rows(), layer.weight.cols()};
  h = fnv_bytes(h, dims, sizeof dims);
  h = fnv_bytes(h, layer.weight.data().data(), layer.weight.data().size() * sizeof(double));
  h = fnv_bytes(h, layer.bias.data(), layer.bias.size() * sizeof(double));
  const int act = static_cast<int>(layer.activation);
  return fnv_bytes(h, &act, sizeof act);
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

template <class F>
void for_each_block(const ModelParams& m, unsigned scope, F&& f) {
  if (scope & kScopeFeat)
    for (std::size_t l = 0; l < m.feat_layers.size(); ++l) f(0, l);
  if (scope & kScopeLinear) f(1, 0);
  if (scope & kScopeSsl) f(2, 0);
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t ModelParams::input_dim() const {
  return feat_layers.empty() ? linear_head.in_dim() : feat_layers.front().in_dim();
}

std::size_t ModelParams::feature_dim() const { return linear_head.in_dim(); }

void ModelParams::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw InvalidArgument("ModelParams: temperature must be positive and finite");
  std::size_t width = input_dim();
  auto check = [&](const DenseLayer& layer, std::size_t in, const char* name) {
    if (layer.in_dim() != in || layer.bias.size() != layer.out_dim())
      throw InvalidArgument(std::string("ModelParams: inconsistent dimensions in ") + name);
    if (!all_finite(layer.weight.data()) || !all_finite(layer.bias))
      throw InvalidArgument(std::string("ModelParams: non-finite entries in ") + name);
  };
  for (const auto& layer : feat_layers) {
    check(layer, width, "feature layer");
    width = layer.out_dim();
  }
  check(linear_head, width, "linear head");
  check(ssl_head, width, "ssl head");
  if (ssl_head.out_dim() != kRotationClasses) throw InvalidArgument("ModelParams: ssl head must have 4 outputs");
}

std::uint64_t ModelParams::fingerprint() const {
  std::uint64_t h = feature_fingerprint();
  h = fnv_layer(h, linear_head);
  h = fnv_layer(h, ssl_head);
  return fnv_bytes(h, &temperature, sizeof temperature);
}

std::uint64_t ModelParams::feature_fingerprint() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& layer : feat_layers) h = fnv_layer(h, layer);
  return h;
}

DenseLayer init_layer(std::size_t in, std::size_t out, Activation act, Rng& rng) {
  DenseLayer layer;
  layer.weight = Matrix(out, in);
  layer.bias.assign(out, 0.0);
  layer.activation = act;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& w : layer.weight.data()) w = rng.uniform(-bound, bound);
  for (double& b : layer.bias) b = rng.uniform(-bound, bound);
  return layer;
}

ModelParams init_model(const ModelArch& arch, std::uint64_t seed) {
  if (arch.input_dim == 0 || arch.num_classes < 2) throw InvalidArgument("init_model: bad architecture");
  Rng rng(seed);
  ModelParams m;
  std::size_t width = arch.input_dim;
  for (std::size_t hdim : arch.hidden) {
    if (hdim == 0) throw InvalidArgument("init_model: zero-width hidden layer");
    m.feat_layers.push_back(init_layer(width, hdim, Activation::tanh, rng));
    width = hdim;
  }
  m.linear_head = init_layer(width, arch.num_classes, Activation::identity, rng);
  m.ssl_head = init_layer(width, kRotationClasses, Activation::identity, rng);
  m.temperature = 1.0;
  return m;
}

ForwardResult forward(const ModelParams& m, std::span<const double> x) {
  Matrix in(1, x.size());
  std::copy(x.begin(), x.end(), in.row(0).begin());
  BatchForward b = forward_batch(m, in);
  return {Vector(b.probs.row(0).begin(), b.probs.row(0).end()),
          Vector(b.features.row(0).begin(), b.features.row(0).end()),
          Vector(b.logits.row(0).begin(), b.logits.row(0).end())};
}

BatchForward forward_batch(const ModelParams& m, const Matrix& x) {
  BatchForward out;
  out.features = extract_features(m, x);
  out.logits = apply_layer(m.linear_head, out.features);
  out.probs = out.logits;
  softmax_rows_in_place(out.probs, m.temperature);
  return out;
}

Matrix extract_features(const ModelParams& m, const Matrix& x) {
  auto acts = feature_activations(m, x);
  return std::move(acts.back());
}

Matrix head_probs(const DenseLayer& head, double temperature, const Matrix& features) {
  Matrix p = apply_layer(head, features);
  softmax_rows_in_place(p, temperature);
  return p;
}

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::cross_entropy: return "cross_entropy";
    case LossKind::entropy: return "entropy";
    case LossKind::rotation: return "rotation";
    case LossKind::infonce: return "infonce";
  }
  return "?";
}

Gradients Gradients::zeros_like(const ModelParams& m) {
  Gradients g;
  for (const auto& layer : m.feat_layers) g.feat.push_back(zero_grad(layer));
  g.linear = zero_grad(m.linear_head);
  g.ssl = zero_grad(m.ssl_head);
  return g;
}

LossGrad backward(const ModelParams& m, const LossBatch& batch, LossKind kind, unsigned scope) {
  if ((scope & kScopeAll) == 0) throw InvalidArgument("backward: empty scope");
  return compute_loss(m, batch, kind, scope, true);
}

double loss_value(const ModelParams& m, const LossBatch& batch, LossKind kind) {
  return compute_loss(m, batch, kind, kScopeNone, false).loss;
}

Vector flatten(const ModelParams& m, unsigned scope) {
  Vector out;
  for_each_block(m, scope, [&](int part, std::size_t l) {
    const DenseLayer& layer = part == 0 ? m.feat_layers[l] : part == 1 ? m.linear_head : m.ssl_head;
    out.insert(out.end(), layer.weight.data().begin(), layer.weight.data().end());
    out.insert(out.end(), layer.bias.begin(), layer.bias.end());
  });
  return out;
}

void unflatten(ModelParams& m, unsigned scope, std::span<const double> values) {
  std::size_t pos = 0;
  for_each_block(m, scope, [&](int part, std::size_t l) {
    DenseLayer& layer = part == 0 ? m.feat_layers[l] : part == 1 ? m.linear_head : m.ssl_head;
    auto w = layer.weight.data();
    if (pos + w.size() + layer.bias.size() > values.size()) throw InvalidArgument("unflatten: too few values");
    std::copy_n(values.begin() + pos, w.size(), w.begin());
    pos += w.size();
    std::copy_n(values.begin() + pos, layer.bias.size(), layer.bias.begin());
    pos += layer.bias.size();
  });
  if (pos != values.size()) throw InvalidArgument("unflatten: too many values");
}

Vector flatten(const Gradients& g, unsigned scope) {
  Vector out;
  auto push = [&](const LayerGrad& lg) {
    out.insert(out.end(), lg.weight.data().begin(), lg.weight.data().end());
    out.insert(out.end(), lg.bias.begin(), lg.bias.end());
  };
  if (scope & kScopeFeat)
    for (const auto& lg : g.feat) push(lg);
  if (scope & kScopeLinear) push(g.linear);
  if (scope & kScopeSsl) push(g.ssl);
  return out;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw InvalidArgument("TrainConfig: epochs and batch_size must be positive");
  if (!(learning_rate > 0.0)) throw InvalidArgument("TrainConfig: learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("TrainConfig: momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("TrainConfig: weight_decay must be >= 0");
}

std::string to_string(SslKind kind) {
  switch (kind) {
    case SslKind::none: return "none";
    case SslKind::rotation: return "rotation";
    case SslKind::entropy: return "entropy";
    case SslKind::infonce: return "infonce";
  }
  return "?";
}

SslKind parse_ssl_kind(const std::string& name) {
  if (name == "none") return SslKind::none;
  if (name == "rotation") return SslKind::rotation;
  if (name == "entropy") return SslKind::entropy;
  if (name == "infonce") return SslKind::infonce;
  throw InvalidArgument("unknown ssl kind: " + name);
}

Matrix rotate_rows(const Matrix& x, const std::vector<int>& rotation_ids) {
  if (rotation_ids.size() != x.rows()) throw InvalidArgument("rotate_rows: need one id per row");
  Matrix out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const int id = rotation_ids[i];
    if (id < 0 || id >= static_cast<int>(kRotationClasses)) throw InvalidArgument("rotate_rows: bad rotation id");
    if (id != 0) rotate_plane(out.row(i), kRotationDegrees[id]);
  }
  return out;
}

TrainResult train_supervised(const LabeledSet& train, const ModelArch& arch, const TrainConfig& cfg,
                             SslKind ssl_kind, double ssl_weight) {
  cfg.validate();
  if (train.size() == 0) throw InvalidArgument("train_supervised: empty train set");
  for (std::size_t c : train.class_counts())
    if (c == 0) throw InvalidArgument("train_supervised: train set misses a class");
  if (ssl_kind != SslKind::none && ssl_kind != SslKind::rotation && ssl_weight > 0.0)
    throw InvalidArgument("train_supervised: only rotation is supported as a pretraining ssl loss");
  const bool use_ssl = ssl_kind == SslKind::rotation && ssl_weight > 0.0;

  TrainResult result;
  result.model = init_model(arch, derive_seed(cfg.seed, 1));
  Rng rng(derive_seed(cfg.seed, 2));
  ModelParams& m = result.model;

  Vector params = flatten(m, kScopeAll);
  Vector velocity(params.size(), 0.0);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      LossBatch batch;
      batch.inputs = Matrix(end - start, train.dim());
      for (std::size_t i = start; i < end; ++i) {
        auto src = train.inputs.row(order[i]);
        std::copy(src.begin(), src.end(), batch.inputs.row(i - start).begin());
        batch.labels.push_back(train.labels[order[i]]);
      }
      LossGrad ce = backward(m, batch, LossKind::cross_entropy, kScopeAll);
      Vector g = flatten(ce.grad, kScopeAll);
      double loss = ce.loss;
      if (use_ssl) {
        LossBatch rot;
        std::vector<int> ids(batch.labels.size());
        for (int& id : ids) id = static_cast<int>(rng.uniform_index(kRotationClasses));
        rot.inputs = rotate_rows(batch.inputs, ids);
        rot.labels = std::move(ids);
        LossGrad rg = backward(m, rot, LossKind::rotation, kScopeAll);
        const Vector g2 = flatten(rg.grad, kScopeAll);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += ssl_weight * g2[i];
        loss += ssl_weight * rg.loss;
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] + g[i] + cfg.weight_decay * params[i];
        params[i] -= cfg.learning_rate * velocity[i];
      }
      unflatten(m, kScopeAll, params);
      epoch_loss += loss * static_cast<double>(end - start);
    }
    epoch_loss /= static_cast<double>(order.size());
    if (!std::isfinite(epoch_loss) || !all_finite(params))
      throw TrainingDiverged("train_supervised: loss diverged in epoch " + std::to_string(epoch), epoch);
    result.epoch_losses.push_back(epoch_loss);
  }
  return result;
}

double head_loss_grad(const DenseLayer& head, double temperature, const Matrix& features,
                      const std::vector<int>& labels, std::span<const double> sample_weights,
                      LayerGrad* grad) {
  const std::size_t n = features.rows();
  const std::size_t k = head.out_dim();
  const std::size_t h = features.cols();
  if (labels.size() != n || sample_weights.size() != n || head.in_dim() != h)
    throw InvalidArgument("head_loss_grad: shape mismatch");
  if (grad) *grad = zero_grad(head);
  double total = 0.0;
  Vector z(k);
  for (std::size_t i = 0; i < n; ++i) {
    const double wi = sample_weights[i];
    if (wi == 0.0) continue;
    const double* f = features.row(i).data();
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      const double* w = head.weight.row(c).data();
      double acc = head.bias[c];
      for (std::size_t j = 0; j < h; ++j) acc += w[j] * f[j];
      z[c] = acc / temperature;
      mx = std::max(mx, z[c]);
    }
    const auto y = static_cast<std::size_t>(labels[i]);
    const double zy = z[y] - mx;
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      z[c] = std::exp(z[c] - mx);
      sum += z[c];
    }
    // z now holds unnormalized probabilities.
    total -= wi * (zy - std::log(sum));
    if (grad) {
      for (std::size_t c = 0; c < k; ++c) {
        const double d = wi * (z[c] / sum - (c == y ? 1.0 : 0.0)) / temperature;
        double* gw = grad->weight.row(c).data();
        for (std::size_t j = 0; j < h; ++j) gw[j] += d * f[j];
        grad->bias[c] += d;
      }
    }
  }
  return total;
}

namespace {

// Mean CE plus l2/2 * ||W||^2 on a flat (W, b) head.
struct HeadObjective {
  const Matrix& features;
  const std::vector<int>& labels;
  Vector weights;
  double l2;
  std::size_t k, h;

  DenseLayer unpack(std::span<const double> x) const {
    DenseLayer head;
    head.weight = Matrix(k, h);
    std::copy_n(x.begin(), k * h, head.weight.data().begin());
    head.bias.assign(x.begin() + static_cast<std::ptrdiff_t>(k * h), x.end());
    return head;
  }

  double operator()(std::span<const double> x, Vector& g) const {
    const DenseLayer head = unpack(x);
    LayerGrad lg;
    double f = head_loss_grad(head, 1.0, features, labels, weights, &lg);
    g.assign(x.size(), 0.0);
    std::copy(lg.weight.data().begin(), lg.weight.data().end(), g.begin());
    std::copy(lg.bias.begin(), lg.bias.end(), g.begin() + static_cast<std::ptrdiff_t>(k * h));
    for (std::size_t i = 0; i < k * h; ++i) {
      f += 0.5 * l2 * x[i] * x[i];
      g[i] += l2 * x[i];
    }
    return f;
  }
};

}  // namespace

ModelParams retrain_linear_on_features(const ModelParams& m, const Matrix& features,
                                       const std::vector<int>& labels, std::uint64_t seed,
                                       const RetrainConfig& cfg) {
  const std::size_t n = features.rows();
  const std::size_t k = m.num_classes();
  const std::size_t h = m.feature_dim();
  if (n == 0 || labels.size() != n || features.cols() != h)
    throw InvalidArgument("retrain_linear: features and labels do not match the model");

  Rng rng(seed);
  DenseLayer fresh = init_layer(h, k, Activation::identity, rng);
  HeadObjective obj{features, labels, Vector(n, 1.0 / static_cast<double>(n)), cfg.l2, k, h};

  Vector x(fresh.weight.data().begin(), fresh.weight.data().end());
  x.insert(x.end(), fresh.bias.begin(), fresh.bias.end());
  Vector g;
  double f = obj(x, g);

  // L-BFGS with Armijo backtracking.
  constexpr std::size_t kMemory = 10;
  std::vector<Vector> s_hist, y_hist;
  std::vector<double> rho_hist;
  Vector xn, gn;
  bool stalled = false;
  for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
    if (norm2(g) < cfg.grad_tolerance) break;
    Vector d = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t j = s_hist.size(); j-- > 0;) {
      alpha[j] = rho_hist[j] * dot(s_hist[j], d);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= alpha[j] * y_hist[j][i];
    }
    if (!s_hist.empty()) {
      const double gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
      for (double& v : d) v *= gamma;
    }
    for (std::size_t j = 0; j < s_hist.size(); ++j) {
      const double beta = rho_hist[j] * dot(y_hist[j], d);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += (alpha[j] - beta) * s_hist[j][i];
    }
    for (double& v : d) v = -v;
    double slope = dot(g, d);
    if (!(slope < 0.0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      d = g;
      for (double& v : d) v = -v;
      slope = dot(g, d);
    }
    double step = s_hist.empty() ? std::min(1.0, 1.0 / norm2(g)) : 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      xn = x;
      for (std::size_t i = 0; i < x.size(); ++i) xn[i] += step * d[i];
      const double fn = obj(xn, gn);
      if (std::isfinite(fn) && fn <= f + 1e-4 * step * slope) {
        Vector s(x.size()), y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
          s[i] = xn[i] - x[i];
          y[i] = gn[i] - g[i];
        }
        const double sy = dot(s, y);
        if (sy > 1e-12) {
          if (s_hist.size() == kMemory) {
            s_hist.erase(s_hist.begin());
            y_hist.erase(y_hist.begin());
            rho_hist.erase(rho_hist.begin());
          }
          s_hist.push_back(std::move(s));
          y_hist.push_back(std::move(y));
          rho_hist.push_back(1.0 / sy);
        }
        x.swap(xn);
        g.swap(gn);
        stalled = (f - fn) <= cfg.f_tolerance * (1.0 + std::abs(fn));
        f = fn;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!std::isfinite(f))
      throw TrainingDiverged("retrain_linear: objective diverged at iteration " + std::to_string(iter), iter);
    if (!accepted || stalled) break;
  }

  ModelParams out = m;
  out.linear_head = obj.unpack(x);
  out.temperature = 1.0;
  return out;
}

ModelParams retrain_linear(const ModelParams& m, const LabeledSet& train, std::uint64_t seed,
                           const RetrainConfig& cfg) {
  return retrain_linear_on_features(m, extract_features(m, train.inputs), train.labels, seed, cfg);
}

double nll(const Matrix& logits, const std::vector<int>& labels, double temperature) {
  if (logits.rows() == 0 || labels.size() != logits.rows()) throw InvalidArgument("nll: shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) total -= log_softmax(logits.row(i), temperature)[labels[i]];
  return total / static_cast<double>(logits.rows());
}

double fit_temperature(const Matrix& logits, const std::vector<int>& labels) {
  auto objective = [&](double log_t) { return nll(logits, labels, std::exp(log_t)); };
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = -3.0, b = 3.0;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = objective(c), fd = objective(d);
  while (b - a > 1e-7) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = objective(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = objective(d);
    }
  }
  const double best = 0.5 * (a + b);
  return objective(best) < objective(0.0) ? std::exp(best) : 1.0;
}

ModelParams calibrate_temperature(const ModelParams& m, const LabeledSet& val) {
  if (val.size() == 0) throw InvalidArgument("calibrate_temperature: empty validation set");
  const Matrix logits = forward_batch(m, val.inputs).logits;
  ModelParams out = m;
  out.temperature = fit_temperature(logits, val.labels);
  return out;
}

double accuracy(const ModelParams& m, const LabeledSet& set) {
  if (set.size() == 0) throw InvalidArgument("accuracy: empty set");
  const Matrix probs = forward_batch(m, set.inputs).probs;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i)
    if (static_cast<int>(argmax(probs.row(i))) == set.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'O', 'L', 'S', 'O', 'F', 'U', 'M', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw InvalidArgument("load_binary: truncated checkpoint");
  return v;
}

void put_layer(std::ostream& out, const DenseLayer& layer) {
  put<std::uint8_t>(out, static_cast<std::uint8_t>(layer.activation));
  put<std::uint64_t>(out, layer.weight.rows());
  put<std::uint64_t>(out, layer.weight.cols());
  out.write(reinterpret_cast<const char*>(layer.weight.data().data()),
            static_cast<std::streamsize>(layer.weight.data().size() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(layer.bias.data()),
            static_cast<std::streamsize>(layer.bias.size() * sizeof(double)));
}

DenseLayer get_layer(std::istream& in) {
  DenseLayer layer;
  const auto act = get<std::uint8_t>(in);
  if (act > 1) throw InvalidArgument("load_binary: bad activation tag");
  layer.activation = static_cast<Activation>(act);
  const auto rows = get<std::uint64_t>(in);
  const auto cols = get<std::uint64_t>(in);
  if (rows > (1u << 20) || cols > (1u << 20)) throw InvalidArgument("load_binary: implausible layer size");
  layer.weight = Matrix(rows, cols);
  layer.bias.assign(rows, 0.0);
  in.read(reinterpret_cast<char*>(layer.weight.data().data()),
          static_cast<std::streamsize>(rows * cols * sizeof(double)));
  in.read(reinterpret_cast<char*>(layer.bias.data()), static_cast<std::streamsize>(rows * sizeof(double)));
  if (!in) throw InvalidArgument("load_binary: truncated checkpoint");
  return layer;
}

nlohmann::ordered_json layer_json(const DenseLayer& layer) {
  nlohmann::ordered_json j;
  j["activation"] = layer.activation == Activation::tanh ? "tanh" : "identity";
  j["rows"] = layer.weight.rows();
  j["cols"] = layer.weight.cols();
  j["weight"] = std::vector<double>(layer.weight.data().begin(), layer.weight.data().end());
  j["bias"] = layer.bias;
  return j;
}

DenseLayer layer_from_json(const nlohmann::json& j) {
  DenseLayer layer;
  const std::string act = j.at("activation").get<std::string>();
  if (act == "tanh") layer.activation = Activation::tanh;
  else if (act == "identity") layer.activation = Activation::identity;
  else throw InvalidArgument("checkpoint json: bad activation " + act);
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  const auto w = j.at("weight").get<std::vector<double>>();
  layer.bias = j.at("bias").get<std::vector<double>>();
  if (w.size() != rows * cols || layer.bias.size() != rows) throw InvalidArgument("checkpoint json: size mismatch");
  layer.weight = Matrix(rows, cols);
  std::copy(w.begin(), w.end(), layer.weight.data().begin());
  return layer;
}

}  // namespace

void save_binary(const ModelParams& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("save_binary: cannot open " + path.string());
  out.write(kMagic, sizeof kMagic);
  put(out, kCheckpointVersion);
  put<std::uint64_t>(out, m.feat_layers.size());
  for (const auto& layer : m.feat_layers) put_layer(out, layer);
  put_layer(out, m.linear_head);
  put_layer(out, m.ssl_head);
  put(out, m.temperature);
  if (!out) throw InvalidArgument("save_binary: write failed for " + path.string());
}

ModelParams load_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("load_binary: cannot open " + path.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw InvalidArgument("load_binary: bad magic");
  if (get<std::uint32_t>(in) != kCheckpointVersion) throw InvalidArgument("load_binary: unsupported version");
  ModelParams m;
  const auto layers = get<std::uint64_t>(in);
  if (layers > 64) throw InvalidArgument("load_binary: implausible layer count");
  for (std::uint64_t l = 0; l < layers; ++l) m.feat_layers.push_back(get_layer(in));
  m.linear_head = get_layer(in);
  m.ssl_head = get_layer(in);
  m.temperature = get<double>(in);
  m.validate();
  return m;
}

std::string to_json_string(const ModelParams& m) {
  nlohmann::ordered_json j;
  j["version"] = kCheckpointVersion;
  j["feat_layers"] = nlohmann::ordered_json::array();
  for (const auto& layer : m.feat_layers) j["feat_layers"].push_back(layer_json(layer));
  j["linear_head"] = layer_json(m.linear_head);
  j["ssl_head"] = layer_json(m.ssl_head);
  j["temperature"] = m.temperature;
  return j.dump();
}

ModelParams from_json_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("checkpoint json: ") + e.what());
  }
  ModelParams m;
  try {
    if (j.at("version").get<std::uint32_t>() != kCheckpointVersion)
      throw InvalidArgument("checkpoint json: unsupported version");
    for (const auto& layer : j.at("feat_layers")) m.feat_layers.push_back(layer_from_json(layer));
    m.linear_head = layer_from_json(j.at("linear_head"));
    m.ssl_head = layer_from_json(j.at("ssl_head"));
    m.temperature = j.at("temperature").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("checkpoint json: ") + e.what());
  }
  m.validate();
  return m;
}

}  // namespace olsofu
