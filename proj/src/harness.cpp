// src/harness.cpp

#include "olsofu/harness.hpp"

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "olsofu/errors.hpp"

namespace olsofu {

std::string_view to_string(Order o) { return o == Order::predict_first ? "predict_first" : "update_first"; }

Order parse_order(std::string_view name) {
  if (name == "predict_first") return Order::predict_first;
  if (name == "update_first") return Order::update_first;
  throw InvalidArgument("unknown order: " + std::string(name));
}

std::string_view to_string(Mode m) { return m == Mode::ols ? "ols" : "ols_ofu"; }

Mode parse_mode(std::string_view name) {
  if (name == "ols") return Mode::ols;
  if (name == "ols_ofu") return Mode::ols_ofu;
  throw InvalidArgument("unknown mode: " + std::string(name));
}

void Scenario::validate() const {
  if (T < 1) throw InvalidArgument("Scenario: T must be >= 1");
  if (B < 1) throw InvalidArgument("Scenario: B must be >= 1");
  data.validate();
  corruption.validate();
  ssl.validate();
  train.validate();
  ols_config().validate();
  if (corruption.kind == CorruptionKind::rotate2d && data.dim < 2)
    throw InvalidArgument("Scenario: rotate2d needs dim >= 2");
  if (ssl.kind == SslKind::infonce && B * static_cast<std::size_t>(ssl.resolved_ba()) < 2)
    throw InvalidArgument("Scenario: infonce needs at least 2 inputs per update");
  (void)shift_pattern();
}

ShiftPattern Scenario::shift_pattern() const {
  const auto k = static_cast<std::size_t>(data.num_classes);
  ShiftPattern p;
  p.kind = shift.kind;
  p.q = shift.q ? SimplexVector(*shift.q) : SimplexVector::uniform(k);
  p.q_prime = shift.q_prime ? SimplexVector(*shift.q_prime) : SimplexVector::one_hot(k, 0);
  if (p.q.size() != k || p.q_prime.size() != k) throw InvalidArgument("Scenario: shift marginals must have K entries");
  p.horizon = T;
  p.switch_prob = shift.switch_prob;
  p.seed = seeds.shift_seed;
  p.validate();
  return p;
}

OlsConfig Scenario::ols_config() const {
  OlsConfig c = ols;
  c.algorithm = algorithm;
  c.horizon = T;
  return c;
}

OfuConfig Scenario::ofu_config() const {
  OfuConfig c;
  c.ols = ols_config();
  c.ssl = ssl;
  c.confusion_lambda = confusion_lambda;
  c.retrain = retrain;
  c.retrain_seed = derive_seed(seeds.run_seed, 3);
  return c;
}

Pretrained pretrain(const Scenario& sc) {
  sc.data.validate();
  Pretrained pre;
  pre.data = make_source_data(sc.data, sc.seeds.data_seed);
  ModelArch arch = sc.arch;
  arch.input_dim = static_cast<std::size_t>(sc.data.dim);
  arch.num_classes = static_cast<std::size_t>(sc.data.num_classes);
  TrainResult tr = train_supervised(pre.data.train, arch, sc.train, SslKind::rotation, sc.pretrain_ssl_weight);
  pre.epoch_losses = std::move(tr.epoch_losses);
  pre.f0 = calibrate_temperature(tr.model, pre.data.val);
  pre.confusion0 = confusion_matrix(pre.f0, pre.data.val);
  pre.train_accuracy = accuracy(pre.f0, pre.data.train);
  pre.val_accuracy = accuracy(pre.f0, pre.data.val);
  return pre;
}

namespace {

int count_errors(const Matrix& probs, const std::vector<int>& labels) {
  int errors = 0;
  for (std::size_t i = 0; i < probs.rows(); ++i)
    if (static_cast<int>(argmax(probs.row(i))) != labels[i]) ++errors;
  return errors;
}

int reweighted_errors(const Matrix& probs, const Vector& ratio, const std::vector<int>& labels) {
  int errors = 0;
  for (std::size_t i = 0; i < probs.rows(); ++i)
    if (static_cast<int>(argmax(reweight_probs(probs.row(i), ratio))) != labels[i]) ++errors;
  return errors;
}

// The adaptation side of one run, hiding the two modes behind one interface.
class Adapter {
 public:
  Adapter(const Scenario& sc, const Pretrained& pre, OfuObserver* observer)
      : sc_(sc), pre_(pre), observer_(observer), cfg_(sc.ofu_config()) {
    if (sc.mode == Mode::ols) {
      base_ = measure_model(pre.f0, pre.data, sc.confusion_lambda);
      ols_ = init_ols(cfg_.ols, pre.f0, pre.data.q0, pre.confusion0.sigma_min);
    } else {
      ofu_ = init_ofu(cfg_, pre.f0, pre.data, pre.confusion0.sigma_min, derive_seed(sc.seeds.run_seed, 2));
    }
  }

  const ModelParams& model() const { return ofu_ ? ofu_->current.model : base_.model; }
  const OlsState& ols() const { return ofu_ ? ofu_->ols : ols_; }
  double sigma_min() const { return ofu_ ? ofu_->current.confusion.sigma_min : base_.confusion.sigma_min; }
  int feature_updates() const { return ofu_ ? ofu_->feature_updates : 0; }

  MarginalEstimate adapt(const Matrix& inputs) {
    MarginalEstimate s;
    if (ofu_) {
      *ofu_ = ofu_step(std::move(*ofu_), inputs, cfg_, pre_.data, &s, observer_);
    } else {
      s = bbse_estimate(base_.model, base_.confusion, inputs);
      ols_ = ols_step(ols_, s, base_.cache);
    }
    return s;
  }

 private:
  const Scenario& sc_;
  const Pretrained& pre_;
  OfuObserver* observer_;
  OfuConfig cfg_;
  AdaptedModel base_;
  OlsState ols_;
  std::optional<OfuState> ofu_;
};

}  // namespace

OnlineTrace run_online(const Scenario& sc, const Pretrained& pre, OfuObserver* observer) {
  sc.validate();
  const ShiftPattern pattern = sc.shift_pattern();
  const auto marginals = marginal_sequence(pattern);
  const ClassPool pool(pre.data.test_pool);
  Rng batch_rng(derive_seed(sc.seeds.run_seed, 1));
  const SimplexVector& q0 = pre.data.q0;

  Adapter adapter(sc, pre, observer);
  OnlineTrace trace;
  trace.batch_size = sc.B;
  trace.num_classes = sc.data.num_classes;
  trace.v_t = shift_severity(marginals);
  trace.steps.reserve(static_cast<std::size_t>(sc.T));

  long cum = 0, oracle_total = 0, frozen_total = 0;
  for (int t = 1; t <= sc.T; ++t) {
    try {
      StepRecord rec;
      rec.q = marginals[static_cast<std::size_t>(t - 1)];
      const TestBatch batch = sample_batch(rec.q, sc.B, pool, sc.corruption, batch_rng);
      const Vector true_ratio = marginal_ratio(rec.q.span(), q0);

      auto score = [&] {
        const Predictor pred = compose_output(adapter.model(), adapter.ols(), sc.algorithm);
        rec.errors = count_errors(predict_probs(pred, batch.inputs), batch.hidden_labels);
        const Matrix dd_probs = forward_batch(adapter.model(), batch.inputs).probs;
        rec.oracle_errors = reweighted_errors(dd_probs, true_ratio, batch.hidden_labels);
        if (adapter.model() == pre.f0) {
          rec.frozen_errors = rec.oracle_errors;
        } else {
          const Matrix f0_probs = forward_batch(pre.f0, batch.inputs).probs;
          rec.frozen_errors = reweighted_errors(f0_probs, true_ratio, batch.hidden_labels);
        }
      };

      if (sc.order == Order::predict_first) {
        score();
        rec.s = adapter.adapt(batch.inputs).raw;
      } else {
        rec.s = adapter.adapt(batch.inputs).raw;
        score();
      }
      cum += rec.errors;
      oracle_total += rec.oracle_errors;
      frozen_total += rec.frozen_errors;
      rec.cum_errors = cum;
      rec.state_hash = state_hash(adapter.ols());
      rec.model_fingerprint = adapter.model().fingerprint();
      rec.sigma_min = adapter.sigma_min();
      trace.steps.push_back(std::move(rec));
    } catch (const StepError&) {
      throw;
    } catch (const Error& e) {
      throw StepError(t, e.what());
    }
  }
  const double denom = static_cast<double>(sc.T) * static_cast<double>(sc.B);
  trace.avg_error = static_cast<double>(cum) / denom;
  trace.oracle_avg_error = static_cast<double>(oracle_total) / denom;
  trace.frozen_avg_error = static_cast<double>(frozen_total) / denom;
  trace.feature_updates = adapter.feature_updates();
  return trace;
}

OnlineTrace run_online(const Scenario& sc) {
  const Pretrained pre = pretrain(sc);
  return run_online(sc, pre);
}

OnlineTrace oracle_trace(const Scenario& sc, const Pretrained& pre, bool frozen) {
  OnlineTrace trace = run_online(sc, pre);
  long cum = 0;
  for (auto& rec : trace.steps) {
    rec.errors = frozen ? rec.frozen_errors : rec.oracle_errors;
    cum += rec.errors;
    rec.cum_errors = cum;
  }
  trace.avg_error = frozen ? trace.frozen_avg_error : trace.oracle_avg_error;
  return trace;
}

FeatureGainResult feature_gain_from_trace(const OnlineTrace& trace) {
  return {trace.oracle_avg_error, trace.frozen_avg_error, trace.oracle_avg_error < trace.frozen_avg_error};
}

FeatureGainResult feature_gain_check(const Scenario& sc, const Pretrained& pre) { return feature_gain_from_trace(run_online(sc, pre)); }

BiasResult order_bias_test(const ModelParams& f, const SourceData& src, const SimplexVector& q,
                           const BiasTestConfig& cfg, Rng& rng) {
  if (cfg.n_trials < 2) throw InvalidArgument("order_bias_test: need at least 2 trials");
  if (cfg.violate_order && cfg.ssl.kind == SslKind::none)
    throw InvalidArgument("order_bias_test: violated ordering needs an ssl loss");
  const std::size_t k = q.size();
  const ConfusionMatrix c = confusion_matrix(f, src.val);
  const ClassPool pool(src.val);
  const CorruptionSpec clean;
  Vector sum(k, 0.0), sumsq(k, 0.0);
  for (std::size_t trial = 0; trial < cfg.n_trials; ++trial) {
    const TestBatch batch = sample_batch(q, cfg.batch_size, pool, clean, rng);
    Vector s;
    if (!cfg.violate_order) {
      s = bbse_estimate(f, c, batch.inputs).raw;
    } else {
      const ModelParams adapted = feature_update(f, batch.inputs, cfg.ssl, rng);
      const ModelParams refreshed = refresh_head(adapted, src, derive_seed(0x5eed, trial), cfg.retrain);
      s = bbse_estimate(refreshed, confusion_matrix(refreshed, src.val), batch.inputs).raw;
    }
    for (std::size_t j = 0; j < k; ++j) {
      sum[j] += s[j];
      sumsq[j] += s[j] * s[j];
    }
  }
  BiasResult r;
  const auto n = static_cast<double>(cfg.n_trials);
  r.bias.resize(k);
  r.stderr_.resize(k);
  r.mean_estimate.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    const double mean = sum[j] / n;
    const double var = std::max(0.0, (sumsq[j] - n * mean * mean) / (n - 1.0));
    r.mean_estimate[j] = mean;
    r.bias[j] = mean - q[j];
    r.stderr_[j] = std::sqrt(var / n);
    // A zero-variance estimator is flagged only if its bias is not rounding.
    const double tol = std::max(3.0 * r.stderr_[j], 1e-9);
    if (std::abs(r.bias[j]) > tol) r.flagged = true;
  }
  return r;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw InvalidArgument("pearson: length mismatch");
  if (xs.size() < 2) throw UndefinedCorrelation("pearson: need at least 2 points");
  const auto n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<SummaryRow> summarize(const std::vector<KeyedTrace>& traces) {
  if (traces.empty()) throw InvalidArgument("summarize: no traces");
  std::map<std::string, std::vector<const KeyedTrace*>> groups;
  for (const auto& kt : traces) {
    if (!kt.trace) throw InvalidArgument("summarize: null trace");
    groups[kt.key].push_back(&kt);
  }
  std::vector<SummaryRow> rows;
  for (const auto& [key, members] : groups) {
    SummaryRow row;
    row.key = key;
    row.replicates = members.size();
    const auto n = static_cast<double>(members.size());
    double sum = 0.0, vt = 0.0, lhs = 0.0, rhs = 0.0;
    bool gain = true;
    for (const auto* m : members) {
      sum += m->trace->avg_error;
      vt += m->trace->v_t;
      lhs += m->trace->oracle_avg_error;
      rhs += m->trace->frozen_avg_error;
      gain = gain && m->has_feature_gain;
    }
    row.avg_error_mean = sum / n;
    row.v_t_mean = vt / n;
    double ss = 0.0;
    for (const auto* m : members) ss += (m->trace->avg_error - row.avg_error_mean) * (m->trace->avg_error - row.avg_error_mean);
    row.avg_error_std = members.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    if (gain) {
      row.gain_lhs = lhs / n;
      row.gain_rhs = rhs / n;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_double(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string trace_csv(const OnlineTrace& trace) {
  std::ostringstream out;
  const int k = trace.num_classes;
  out << 't';
  for (int i = 0; i < k; ++i) out << ",q_" << i;
  for (int i = 0; i < k; ++i) out << ",s_" << i;
  out << ",errors,cum_errors\n";
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const StepRecord& r = trace.steps[t];
    out << (t + 1);
    for (int i = 0; i < k; ++i) out << ',' << format_double(r.q[static_cast<std::size_t>(i)]);
    for (int i = 0; i < k; ++i) out << ',' << format_double(r.s[static_cast<std::size_t>(i)]);
    out << ',' << r.errors << ',' << r.cum_errors << '\n';
  }
  return out.str();
}

void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw Error("write failed for " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace olsofu
