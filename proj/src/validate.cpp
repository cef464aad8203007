// src/validate.cpp

#include "olsofu/validate.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "olsofu/cli.hpp"
#include "olsofu/errors.hpp"
#include "olsofu/harness.hpp"

namespace olsofu {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

CheckResult begin_check(std::string id, std::string name, std::string threshold) {
  CheckResult r;
  r.id = std::move(id);
  r.name = std::move(name);
  r.threshold = std::move(threshold);
  return r;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Vector random_simplex(std::size_t k, Rng& rng) {
  Vector v(k);
  double sum = 0.0;
  for (double& x : v) {
    x = -std::log(1.0 - rng.uniform());
    sum += x;
  }
  for (double& x : v) x /= sum;
  return v;
}

// Small network for derivative checks.
ModelParams gradient_model(std::uint64_t seed) {
  ModelArch arch;
  arch.input_dim = 3;
  arch.hidden = {5, 4};
  arch.num_classes = 3;
  return init_model(arch, seed);
}

double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

// Exact per-class error of the Bayes rule for isotropic Gaussian classes,
// estimated on a large fresh Monte-Carlo sample per class.
class BayesErrorOracle {
 public:
  BayesErrorOracle(const DataSpec& spec, std::size_t per_class, std::uint64_t seed) : means_(spec.resolved_means()) {
    const std::size_t k = means_.size();
    const std::size_t d = means_[0].size();
    const double sd = std::sqrt(spec.cov_scale);
    Rng rng(seed);
    loglik_.resize(k);
    for (std::size_t c = 0; c < k; ++c) {
      loglik_[c] = Matrix(per_class, k);
      Vector x(d);
      for (std::size_t i = 0; i < per_class; ++i) {
        for (std::size_t j = 0; j < d; ++j) x[j] = means_[c][j] + sd * rng.normal();
        for (std::size_t m = 0; m < k; ++m) {
          double sq = 0.0;
          for (std::size_t j = 0; j < d; ++j) sq += (x[j] - means_[m][j]) * (x[j] - means_[m][j]);
          loglik_[c](i, m) = -sq / (2.0 * spec.cov_scale);
        }
      }
    }
  }

  double error(const SimplexVector& q) {
    auto it = cache_.find(q.values());
    if (it != cache_.end()) return it->second;
    const std::size_t k = q.size();
    double err = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (q[c] == 0.0) continue;
      const Matrix& ll = loglik_[c];
      std::size_t wrong = 0;
      for (std::size_t i = 0; i < ll.rows(); ++i) {
        std::size_t best = k;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t m = 0; m < k; ++m) {
          if (q[m] == 0.0) continue;
          const double score = std::log(q[m]) + ll(i, m);
          if (score > best_score) {
            best_score = score;
            best = m;
          }
        }
        if (best != c) ++wrong;
      }
      err += q[c] * static_cast<double>(wrong) / static_cast<double>(ll.rows());
    }
    cache_.emplace(q.values(), err);
    return err;
  }

 private:
  std::vector<Vector> means_;
  std::vector<Matrix> loglik_;
  std::map<Vector, double> cache_;
};

// Four well-separated classes in the rotation plane; the corruption then
// rotates test inputs by 30 degrees.
Scenario rotated_plane_scenario(int seed_index) {
  Scenario sc;
  sc.T = 300;
  sc.data.num_classes = 4;
  sc.data.dim = 2;
  sc.data.cov_scale = 0.5;
  sc.data.n_train = 600;
  sc.data.n_test_pool = 2000;
  const double angles[4] = {0.0, 70.0, 150.0, 250.0};
  for (double a : angles) {
    const double rad = a * M_PI / 180.0;
    sc.data.class_means.push_back({3.0 * std::cos(rad), 3.0 * std::sin(rad)});
  }
  sc.corruption.kind = CorruptionKind::rotate2d;
  sc.corruption.angle_degrees = 30.0;
  sc.algorithm = Algorithm::flhftl;
  sc.ssl.kind = SslKind::rotation;
  sc.ssl.lr = 0.1;
  sc.seeds.data_seed = 100 + static_cast<std::uint64_t>(seed_index);
  sc.seeds.shift_seed = 200 + static_cast<std::uint64_t>(seed_index);
  sc.seeds.run_seed = 8610 + static_cast<std::uint64_t>(seed_index);
  return sc;
}

}  // namespace

Vector grid_projection_oracle(std::span<const double> v, int steps) {
  if (v.size() != 3) throw InvalidArgument("grid_projection_oracle: 3-vectors only");
  const double h = 1.0 / steps;
  double best = std::numeric_limits<double>::infinity();
  Vector arg(3, 0.0);
  for (int i = 0; i <= steps; ++i) {
    const double a = i * h;
    const double da = (a - v[0]) * (a - v[0]);
    if (da >= best) continue;
    for (int j = 0; i + j <= steps; ++j) {
      const double b = j * h;
      const double c = (steps - i - j) * h;
      const double d = da + (b - v[1]) * (b - v[1]) + (c - v[2]) * (c - v[2]);
      if (d < best) {
        best = d;
        arg = {a, b, c};
      }
    }
  }
  return arg;
}

CheckResult check_p1_projection(const ProjectionFn& project) {
  CheckResult r = begin_check("P1", "simplex projection matches grid oracle", "max |p - grid|_inf <= 1e-3, time < 1 s");
  Rng rng(101);
  std::vector<Vector> inputs;
  for (int i = 0; i < 100; ++i) inputs.push_back({rng.uniform(-1.5, 2.0), rng.uniform(-1.5, 2.0), rng.uniform(-1.5, 2.0)});
  const auto t0 = Clock::now();
  std::vector<Vector> outs;
  for (const Vector& v : inputs) outs.push_back(project(v));
  const double proj_seconds = seconds_since(t0);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Vector g = grid_projection_oracle(inputs[i]);
    if (outs[i].size() != 3) {
      worst = std::numeric_limits<double>::infinity();
      break;
    }
    worst = std::max(worst, linf_distance(outs[i], g));
  }
  r.value = worst;
  r.pass = worst <= 1e-3 && proj_seconds < 1.0;
  r.detail = "projection time " + fmt("%.2e", proj_seconds) + " s";
  return r;
}

CheckResult check_p2_gradients() {
  CheckResult r = begin_check("P2", "analytic gradients match finite differences", "max rel err < 1e-4");
  const double eps = 1e-5;
  Rng rng(202);
  ModelParams m = gradient_model(7);
  const std::size_t n = 6;

  LossBatch cls;
  cls.inputs = Matrix(n, 3);
  for (double& x : cls.inputs.data()) x = rng.normal();
  for (std::size_t i = 0; i < n; ++i) cls.labels.push_back(static_cast<int>(rng.uniform_index(3)));

  LossBatch ent;
  ent.inputs = cls.inputs;

  LossBatch rot;
  rot.inputs = cls.inputs;
  for (std::size_t i = 0; i < n; ++i) rot.labels.push_back(static_cast<int>(rng.uniform_index(kRotationClasses)));

  LossBatch nce;
  nce.inputs = cls.inputs;
  nce.positives = cls.inputs;
  for (double& x : nce.positives.data()) x += 0.1 * rng.normal();
  nce.infonce_temperature = 0.5;

  struct Case {
    LossKind kind;
    const LossBatch* batch;
    std::vector<unsigned> scopes;
  };
  const std::vector<Case> cases = {
      {LossKind::cross_entropy, &cls, {kScopeFeat, kScopeLinear, kScopeAll}},
      {LossKind::entropy, &ent, {kScopeFeat, kScopeLinear, kScopeAll}},
      {LossKind::rotation, &rot, {kScopeFeat, kScopeSsl, kScopeAll}},
      {LossKind::infonce, &nce, {kScopeFeat, kScopeAll}},
  };

  double worst = 0.0;
  double leak = 0.0;
  int checked = 0;
  for (const Case& c : cases) {
    for (unsigned scope : c.scopes) {
      const LossGrad lg = backward(m, *c.batch, c.kind, scope);
      const Vector g = flatten(lg.grad, scope);
      const unsigned outside = kScopeAll & ~scope;
      if (outside != 0) {
        for (double x : flatten(lg.grad, outside)) leak = std::max(leak, std::abs(x));
      }
      const Vector theta = flatten(m, scope);
      for (int s = 0; s < 20; ++s) {
        const std::size_t idx = rng.uniform_index(theta.size());
        Vector p = theta;
        p[idx] += eps;
        ModelParams mp = m;
        unflatten(mp, scope, p);
        p[idx] = theta[idx] - eps;
        ModelParams mm = m;
        unflatten(mm, scope, p);
        const double fd = (loss_value(mp, *c.batch, c.kind) - loss_value(mm, *c.batch, c.kind)) / (2.0 * eps);
        worst = std::max(worst, relative_error(g[idx], fd));
        ++checked;
      }
    }
  }
  r.value = worst;
  r.pass = worst < 1e-4 && leak == 0.0;
  r.detail = std::to_string(checked) + " coordinates, max |grad| outside scope " + fmt("%.1e", leak);
  return r;
}

CheckResult check_p3_bbse_unbiased() {
  CheckResult r = begin_check("P3", "BBSE is unbiased under exact label shift", "|mean(s) - q|_inf < 0.02");
  Scenario sc;
  sc.data.mean_scale = 3.0;
  sc.data.n_val = 20000;
  sc.data.n_test_pool = 20000;
  sc.seeds.data_seed = 303;
  const Pretrained pre = pretrain(sc);
  const SimplexVector q({0.4, 0.3, 0.2, 0.1});
  const ClassPool pool(pre.data.test_pool);
  const CorruptionSpec clean;
  Rng rng(3031);
  Vector mean(4, 0.0);
  const int n_batches = 5000;
  for (int b = 0; b < n_batches; ++b) {
    const TestBatch batch = sample_batch(q, 10, pool, clean, rng);
    const MarginalEstimate s = bbse_estimate(pre.f0, pre.confusion0, batch.inputs);
    for (std::size_t k = 0; k < 4; ++k) mean[k] += s.raw[k] / n_batches;
  }
  r.value = linf_distance(mean, q.values());
  r.pass = r.value < 0.02;
  r.detail = "sigma_min " + fmt("%.3f", pre.confusion0.sigma_min);
  return r;
}

CheckResult check_p4_order_bias() {
  CheckResult r = begin_check("P4", "ordering audit: adapt-then-estimate is biased",
                "flagged when violated, not flagged when respected");
  Scenario sc;
  sc.data.n_train = 400;
  sc.data.n_val = 400;
  sc.seeds.data_seed = 404;
  const Pretrained pre = pretrain(sc);
  // The refreshed head undoes most of the batch-specific sharpening, so the
  // leftover bias is small: a skewed q keeps it one-signed and many trials
  // resolve it.
  const SimplexVector q({0.97, 0.01, 0.01, 0.01});
  BiasTestConfig cfg;
  cfg.n_trials = 4000;
  cfg.retrain.max_iterations = 60;
  cfg.violate_order = false;
  Rng rng_a(4041);
  const BiasResult ok = order_bias_test(pre.f0, pre.data, q, cfg, rng_a);
  cfg.violate_order = true;
  Rng rng_b(4042);
  const BiasResult bad = order_bias_test(pre.f0, pre.data, q, cfg, rng_b);
  double z = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) z = std::max(z, std::abs(bad.bias[k]) / std::max(bad.stderr_[k], 1e-12));
  r.value = z;
  r.pass = bad.flagged && !ok.flagged;
  r.detail = "max |bias|/stderr " + fmt("%.2f", z) + ", violated flagged=" + (bad.flagged ? "yes" : "no") +
             " respected flagged=" + (ok.flagged ? "yes" : "no");
  return r;
}

CheckResult check_p5_bayes_oracle() {
  CheckResult r = begin_check("P5", "oracle error matches the Bayes error", "|oracle - bayes| < 0.01");
  Scenario sc;
  sc.data.mean_scale = 3.0;
  sc.data.n_train = 8000;
  sc.data.n_test_pool = 20000;
  sc.mode = Mode::ols;
  sc.algorithm = Algorithm::none;
  sc.seeds.data_seed = 505;
  const Pretrained pre = pretrain(sc);
  const OnlineTrace tr = run_online(sc, pre);
  BayesErrorOracle bayes(sc.data, 125000, 5051);
  const std::vector<SimplexVector> qs = marginal_sequence(sc.shift_pattern());
  double expected = 0.0;
  for (const SimplexVector& q : qs) expected += bayes.error(q);
  expected /= static_cast<double>(qs.size());
  r.value = std::abs(tr.oracle_avg_error - expected);
  r.pass = r.value < 0.01;
  r.detail = "oracle " + fmt("%.4f", tr.oracle_avg_error) + " bayes " + fmt("%.4f", expected);
  return r;
}

CheckResult check_p6_fth_exact() {
  CheckResult r = begin_check("P6", "FTH running mean equals brute force", "max error <= 1e-12");
  Rng rng(606);
  const std::size_t k = 5;
  OlsConfig cfg;
  cfg.algorithm = Algorithm::fth;
  cfg.horizon = 1000;
  const ModelParams f0 = init_model(ModelArch{8, {4}, k}, 1);
  const SimplexVector q0(random_simplex(k, rng));
  OlsState st = init_ols(cfg, f0, q0, 1.0);
  FthState fth = std::get<FthState>(st.data);
  double worst = linf_distance(fth.p.values(), q0.values());
  std::vector<Vector> history;
  for (int t = 1; t <= 1000; ++t) {
    const SimplexVector s(random_simplex(k, rng));
    history.push_back(s.values());
    fth = fth_step(fth, s);
    Vector brute(k, 0.0);
    for (const Vector& h : history)
      for (std::size_t j = 0; j < k; ++j) brute[j] += h[j];
    for (double& x : brute) x /= static_cast<double>(history.size());
    worst = std::max(worst, linf_distance(fth.p.values(), brute));
  }
  r.value = worst;
  r.pass = worst <= 1e-12;
  return r;
}

CheckResult check_p7_regret_decay() {
  CheckResult r = begin_check("P7", "FLH-FTL excess error shrinks with T", "median R(2000) < median R(250)");
  Scenario sc;
  sc.algorithm = Algorithm::flhftl;
  sc.mode = Mode::ols;
  sc.shift.kind = ShiftKind::sinusoidal;
  sc.seeds.data_seed = 707;
  const Pretrained pre = pretrain(sc);
  std::vector<double> short_r, long_r;
  for (int s = 0; s < 5; ++s) {
    sc.seeds.run_seed = 7070 + static_cast<std::uint64_t>(s);
    sc.T = 250;
    const OnlineTrace a = run_online(sc, pre);
    short_r.push_back(a.avg_error - a.oracle_avg_error);
    sc.T = 2000;
    const OnlineTrace b = run_online(sc, pre);
    long_r.push_back(b.avg_error - b.oracle_avg_error);
  }
  const double rs = median(short_r);
  const double rl = median(long_r);
  r.value = rl - rs;
  r.pass = rl < rs;
  r.detail = "R(250) " + fmt("%.4f", rs) + " R(2000) " + fmt("%.4f", rl);
  return r;
}

CheckResult check_p8_feature_gain() {
  CheckResult r = begin_check("P8", "feature updates help under rotation",
                ">= 4/5 seeds with lhs < rhs and OFU error < OLS error");
  int gain_wins = 0;
  int err_wins = 0;
  for (int s = 0; s < 5; ++s) {
    Scenario sc = rotated_plane_scenario(s);
    const Pretrained pre = pretrain(sc);
    sc.mode = Mode::ols;
    const OnlineTrace bare = run_online(sc, pre);
    sc.mode = Mode::ols_ofu;
    const OnlineTrace ofu = run_online(sc, pre);
    const FeatureGainResult e = feature_gain_from_trace(ofu);
    gain_wins += e.lhs < e.rhs ? 1 : 0;
    err_wins += ofu.avg_error < bare.avg_error ? 1 : 0;
  }
  r.value = std::min(gain_wins, err_wins);
  r.pass = gain_wins >= 4 && err_wins >= 4;
  r.detail = "gain " + std::to_string(gain_wins) + "/5, error " + std::to_string(err_wins) + "/5";
  return r;
}

CheckResult check_p9_wrapper_degeneracy() {
  CheckResult r = begin_check("P9", "wrapper without SSL reproduces bare OLS", "6/6 algorithms bit-identical");
  Scenario sc;
  sc.T = 200;
  sc.data.n_train = 1000;
  sc.seeds.data_seed = 909;
  sc.ssl.kind = SslKind::none;
  const Pretrained pre = pretrain(sc);
  int identical = 0;
  std::string mismatches;
  for (Algorithm a : kAllAlgorithms) {
    sc.algorithm = a;
    sc.mode = Mode::ols;
    const OnlineTrace bare = run_online(sc, pre);
    sc.mode = Mode::ols_ofu;
    const OnlineTrace wrapped = run_online(sc, pre);
    bool same = trace_csv(bare) == trace_csv(wrapped) && wrapped.feature_updates == 0 &&
                bare.steps.size() == wrapped.steps.size();
    for (std::size_t t = 0; same && t < bare.steps.size(); ++t) {
      same = bare.steps[t].state_hash == wrapped.steps[t].state_hash &&
             bare.steps[t].model_fingerprint == wrapped.steps[t].model_fingerprint;
    }
    if (same) {
      ++identical;
    } else {
      mismatches += std::string(mismatches.empty() ? "" : ",") + std::string(to_string(a));
    }
  }
  r.value = identical;
  r.pass = identical == 6;
  r.detail = mismatches.empty() ? "all traces identical" : "differs: " + mismatches;
  return r;
}

CheckResult check_p10_atlas_pool() {
  CheckResult r = begin_check("P10", "ATLAS pool size and uniform prior", "N = 7 and p_1,i = 1/7 exactly");
  OlsConfig cfg;
  cfg.algorithm = Algorithm::atlas;
  cfg.horizon = 1000;
  const ModelParams f0 = init_model(ModelArch{}, 10);
  const OlsState st = init_ols(cfg, f0, SimplexVector::uniform(4), 0.5);
  const AtlasState& at = std::get<AtlasState>(st.data);
  bool uniform = at.meta.size() == 7;
  for (double p : at.meta) uniform = uniform && p == 1.0 / 7.0;
  r.value = static_cast<double>(at.experts.size());
  r.pass = at.experts.size() == 7 && uniform && atlas_pool_size(1000) == 7;
  return r;
}

CheckResult check_p11_calibration() {
  CheckResult r = begin_check("P11", "temperature scaling never raises validation NLL", "20/20 models");
  DataSpec spec;
  spec.n_train = 400;
  const SourceData src = make_source_data(spec, 1111);
  Rng rng(1112);
  int ok = 0;
  double worst = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < 20; ++i) {
    ModelParams m = init_model(ModelArch{}, 2000 + static_cast<std::uint64_t>(i));
    const double scale = rng.uniform(0.2, 8.0);
    for (double& w : m.linear_head.weight.data()) w *= scale;
    const BatchForward fb = forward_batch(m, src.val.inputs);
    const double before = nll(fb.logits, src.val.labels, 1.0);
    const double temp = fit_temperature(fb.logits, src.val.labels);
    const double after = nll(fb.logits, src.val.labels, temp);
    worst = std::max(worst, after - before);
    ok += after <= before ? 1 : 0;
  }
  r.value = worst;
  r.pass = ok == 20;
  r.detail = std::to_string(ok) + "/20, max NLL change " + fmt("%.2e", worst);
  return r;
}

CheckResult check_p12_determinism() {
  CheckResult r = begin_check("P12", "identical config gives identical trace", "byte-identical trace.csv");
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / ("olsofu_p12_" + std::to_string(::getpid()));
  fs::create_directories(root);
  const fs::path config = root / "config.json";
  {
    std::ofstream out(config);
    out << R"({"T": 60, "algorithm": "flhftl", "ssl": {"kind": "rotation"},)"
        << R"( "corruption": {"kind": "gaussian_noise", "severity": 0.3},)"
        << R"( "data": {"n_train": 400}, "train": {"epochs": 10}})";
  }
  auto read = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  };
  std::ostringstream sink;
  std::string traces[2];
  int codes[2];
  for (int i = 0; i < 2; ++i) {
    CliOptions opts;
    opts.config = config;
    opts.out = root / ("run" + std::to_string(i));
    codes[i] = cmd_run(opts, sink, sink);
    traces[i] = read(*opts.out / "trace.csv");
  }
  fs::remove_all(root);
  r.value = static_cast<double>(traces[0].size());
  r.pass = codes[0] == 0 && codes[1] == 0 && !traces[0].empty() && traces[0] == traces[1];
  r.detail = traces[0] == traces[1] ? "traces identical" : "traces differ";
  return r;
}

std::vector<CheckEntry> acceptance_checks() {
  return {
      {"P1", [] { return check_p1_projection([](std::span<const double> v) { return project_simplex(v).values(); }); }},
      {"P2", check_p2_gradients},
      {"P3", check_p3_bbse_unbiased},
      {"P4", check_p4_order_bias},
      {"P5", check_p5_bayes_oracle},
      {"P6", check_p6_fth_exact},
      {"P7", check_p7_regret_decay},
      {"P8", check_p8_feature_gain},
      {"P9", check_p9_wrapper_degeneracy},
      {"P10", check_p10_atlas_pool},
      {"P11", check_p11_calibration},
      {"P12", check_p12_determinism},
  };
}

std::string format_check_line(const CheckResult& r) {
  std::ostringstream out;
  out << (r.pass ? "PASS " : "FAIL ") << r.id << "  " << r.name << "  value=" << format_double(r.value, 6)
      << "  threshold: " << r.threshold << "  (" << fmt("%.1f", r.seconds) << " s)";
  if (!r.detail.empty()) out << "  " << r.detail;
  return out.str();
}

std::vector<CheckResult> run_acceptance(const std::set<std::string>& only, std::ostream& out) {
  std::vector<CheckResult> results;
  for (const CheckEntry& c : acceptance_checks()) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = Clock::now();
    CheckResult r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r.id = c.id;
      r.name = "raised an exception";
      r.pass = false;
      r.detail = e.what();
    }
    r.seconds = seconds_since(t0);
    out << format_check_line(r) << std::endl;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace olsofu
