// src/cli.cpp

#include "olsofu/cli.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "olsofu/errors.hpp"
#include "olsofu/validate.hpp"

namespace olsofu {

namespace {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

bool has_feature_gain(const Scenario& sc) { return sc.mode == Mode::ols_ofu && sc.ssl.kind != SslKind::none; }

void write_binary_atomic(const ModelParams& m, const fs::path& path) {
  fs::path tmp = path;
  tmp += ".tmp";
  save_binary(m, tmp);
  fs::rename(tmp, path);
}

// Runs `body`, translating the error hierarchy into exit codes.
int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TrainingDiverged& e) {
    err << "training diverged: " << e.what() << "\n";
    return kExitTraining;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

ojson summary_json(const Scenario& sc, const Pretrained& pre, const OnlineTrace& tr) {
  ojson j;
  j["algorithm"] = to_string(sc.algorithm);
  j["mode"] = to_string(sc.mode);
  j["ssl"] = to_string(sc.ssl.kind);
  j["shift"] = to_string(sc.shift.kind);
  j["corruption"] = to_string(sc.corruption.kind);
  j["T"] = sc.T;
  j["B"] = sc.B;
  j["run_seed"] = sc.seeds.run_seed;
  j["avg_error"] = tr.avg_error;
  j["V_T"] = tr.v_t;
  j["oracle_avg_error"] = tr.oracle_avg_error;
  j["frozen_avg_error"] = tr.frozen_avg_error;
  j["feature_updates"] = tr.feature_updates;
  j["val_accuracy"] = pre.val_accuracy;
  j["sigma_min"] = pre.confusion0.sigma_min;
  if (has_feature_gain(sc)) {
    const FeatureGainResult e = feature_gain_from_trace(tr);
    j["feature_gain"] = ojson{{"lhs", e.lhs}, {"rhs", e.rhs}, {"holds", e.holds}};
  } else {
    j["feature_gain"] = nullptr;
  }
  return j;
}

struct SweepRow {
  Scenario sc;
  std::string status = "pending";
  OnlineTrace trace;
  std::optional<double> delta_error;
};

std::string row_key(const Scenario& sc, bool with_seed) {
  std::string k = std::string(to_string(sc.shift.kind)) + "/" + std::string(to_string(sc.corruption.kind)) + "/" +
                  std::string(to_string(sc.algorithm)) + "/" + to_string(sc.ssl.kind);
  if (with_seed) k += "/" + std::to_string(sc.seeds.run_seed);
  return k;
}

}  // namespace

RunConfig resolve_config(const CliOptions& opts) {
  RunConfig cfg = opts.config ? load_config(*opts.config) : parse_config("{}");
  if (opts.seed) cfg.scenario.seeds.run_seed = *opts.seed;
  if (opts.order) cfg.scenario.order = *opts.order;
  if (opts.out) cfg.out_dir = opts.out->string();
  if (const char* env = std::getenv("OLSOFU_OUT"); env != nullptr && *env != '\0') cfg.out_dir = env;
  if (opts.jobs < 1) throw ConfigError("--jobs must be >= 1");
  return cfg;
}

Pretrained obtain_pretrained(const RunConfig& cfg) {
  const Scenario& sc = cfg.scenario;
  if (!cfg.checkpoint) return pretrain(sc);
  Pretrained pre;
  pre.data = make_source_data(sc.data, sc.seeds.data_seed);
  pre.f0 = load_binary(*cfg.checkpoint);
  if (pre.f0.input_dim() != static_cast<std::size_t>(sc.data.dim) ||
      pre.f0.num_classes() != static_cast<std::size_t>(sc.data.num_classes)) {
    throw ConfigError("checkpoint shape does not match data.dim / data.num_classes");
  }
  pre.confusion0 = confusion_matrix(pre.f0, pre.data.val);
  pre.train_accuracy = accuracy(pre.f0, pre.data.train);
  pre.val_accuracy = accuracy(pre.f0, pre.data.val);
  return pre;
}

int cmd_pretrain(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(opts);
    const Pretrained pre = pretrain(cfg.scenario);
    const fs::path dir = cfg.out_dir;
    fs::create_directories(dir);
    write_binary_atomic(pre.f0, dir / "f0.ckpt");
    ojson side;
    side["train_accuracy"] = pre.train_accuracy;
    side["val_accuracy"] = pre.val_accuracy;
    side["sigma_min"] = pre.confusion0.sigma_min;
    side["temperature"] = pre.f0.temperature;
    side["fingerprint"] = pre.f0.fingerprint();
    side["epoch_losses"] = pre.epoch_losses;
    write_text_atomic(dir / "f0.json", side.dump(2) + "\n");
    out << "train_accuracy=" << fixed(pre.train_accuracy, 4) << " val_accuracy=" << fixed(pre.val_accuracy, 4)
        << " sigma_min=" << fixed(pre.confusion0.sigma_min, 4) << " checkpoint=" << (dir / "f0.ckpt").string()
        << "\n";
    return kExitOk;
  });
}

int cmd_run(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(opts);
    const Scenario& sc = cfg.scenario;
    const Pretrained pre = obtain_pretrained(cfg);
    const OnlineTrace tr = run_online(sc, pre);
    const fs::path dir = cfg.out_dir;
    fs::create_directories(dir);
    write_text_atomic(dir / "trace.csv", trace_csv(tr));
    const ojson summary = summary_json(sc, pre, tr);
    write_text_atomic(dir / "summary.json", summary.dump(2) + "\n");
    write_text_atomic(dir / "config.json", to_json(cfg).dump(2) + "\n");
    out << "avg_error=" << fixed(tr.avg_error, 4) << " V_T=" << fixed(tr.v_t, 4);
    if (has_feature_gain(sc)) {
      const FeatureGainResult e = feature_gain_from_trace(tr);
      out << " gain_lhs=" << fixed(e.lhs, 4) << " gain_rhs=" << fixed(e.rhs, 4);
    }
    out << " out=" << dir.string() << "\n";
    return kExitOk;
  });
}

int cmd_sweep(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig cfg = resolve_config(opts);
    const Scenario& base = cfg.scenario;
    const SweepAxes& ax = cfg.sweep;

    auto or_base = [](const auto& axis, auto fallback) {
      return axis.empty() ? std::vector<decltype(fallback)>{fallback} : axis;
    };
    const auto shifts = or_base(ax.shifts, base.shift.kind);
    const auto corruptions = or_base(ax.corruptions, base.corruption);
    const auto algorithms = or_base(ax.algorithms, base.algorithm);
    const auto ssls = or_base(ax.ssl, base.ssl.kind);
    const auto seeds = or_base(ax.run_seeds, base.seeds.run_seed);

    std::vector<SweepRow> rows;
    for (ShiftKind sh : shifts)
      for (const CorruptionSpec& co : corruptions)
        for (Algorithm a : algorithms)
          for (SslKind k : ssls)
            for (std::uint64_t seed : seeds) {
              SweepRow r;
              r.sc = base;
              r.sc.shift.kind = sh;
              r.sc.corruption = co;
              r.sc.algorithm = a;
              r.sc.ssl.kind = k;
              r.sc.seeds.run_seed = seed;
              rows.push_back(std::move(r));
            }

    // f_0 depends only on data and training settings, which no axis touches.
    const Pretrained pre = obtain_pretrained(cfg);

    std::atomic<std::size_t> next{0};
    std::mutex log_mu;
    auto worker = [&] {
      for (std::size_t i = next++; i < rows.size(); i = next++) {
        SweepRow& r = rows[i];
        try {
          r.sc.validate();
          r.trace = run_online(r.sc, pre);
          r.status = "ok";
        } catch (const std::exception& e) {
          r.status = std::string("error: ") + e.what();
          std::lock_guard<std::mutex> lock(log_mu);
          err << "sweep row " << row_key(r.sc, true) << " failed: " << e.what() << "\n";
        }
      }
    };
    const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(opts.jobs), rows.size());
    std::vector<std::thread> pool;
    for (std::size_t i = 1; i < n_threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    // Delta_error against the ssl = none row of the same cell and seed.
    std::map<std::string, double> none_error;
    for (const SweepRow& r : rows) {
      if (r.status == "ok" && r.sc.ssl.kind == SslKind::none) none_error[row_key(r.sc, true)] = r.trace.avg_error;
    }
    std::vector<double> d_gain, d_err;
    for (SweepRow& r : rows) {
      if (r.status != "ok" || !has_feature_gain(r.sc)) continue;
      Scenario probe = r.sc;
      probe.ssl.kind = SslKind::none;
      auto it = none_error.find(row_key(probe, true));
      if (it == none_error.end()) continue;
      r.delta_error = it->second - r.trace.avg_error;
      const FeatureGainResult e = feature_gain_from_trace(r.trace);
      d_gain.push_back(e.rhs - e.lhs);
      d_err.push_back(*r.delta_error);
    }

    std::ostringstream runs;
    runs << "shift,corruption,algorithm,ssl,run_seed,status,avg_error,V_T,gain_lhs,gain_rhs,delta_error,delta_gain\n";
    std::size_t succeeded = 0;
    std::vector<KeyedTrace> keyed;
    for (const SweepRow& r : rows) {
      runs << to_string(r.sc.shift.kind) << ',' << to_string(r.sc.corruption.kind) << ','
           << to_string(r.sc.algorithm) << ',' << to_string(r.sc.ssl.kind) << ',' << r.sc.seeds.run_seed << ',';
      std::string status = r.status;
      for (char& c : status)
        if (c == ',' || c == '\n') c = ';';
      runs << status << ',';
      if (r.status != "ok") {
        runs << ",,,,,\n";
        continue;
      }
      ++succeeded;
      keyed.push_back({row_key(r.sc, false), &r.trace, has_feature_gain(r.sc)});
      runs << fixed(r.trace.avg_error, 6) << ',' << fixed(r.trace.v_t, 6) << ',';
      if (has_feature_gain(r.sc)) {
        const FeatureGainResult e = feature_gain_from_trace(r.trace);
        runs << fixed(e.lhs, 4) << ',' << fixed(e.rhs, 4) << ',';
        runs << (r.delta_error ? fixed(*r.delta_error, 6) : "") << ',' << fixed(e.rhs - e.lhs, 4);
      } else {
        runs << ",,,";
      }
      runs << '\n';
    }

    std::ostringstream summ;
    summ << "key,replicates,avg_error_mean,avg_error_std,V_T_mean,gain_lhs,gain_rhs\n";
    for (const SummaryRow& s : summarize(keyed)) {
      summ << s.key << ',' << s.replicates << ',' << fixed(s.avg_error_mean, 6) << ','
           << fixed(s.avg_error_std, 6) << ',' << fixed(s.v_t_mean, 6) << ','
           << (s.gain_lhs ? fixed(*s.gain_lhs, 4) : "") << ',' << (s.gain_rhs ? fixed(*s.gain_rhs, 4) : "") << '\n';
    }

    ojson meta;
    meta["rows"] = rows.size();
    meta["succeeded"] = succeeded;
    meta["correlation_pairs"] = d_gain.size();
    try {
      meta["pearson_delta_gain_delta_error"] = pearson(d_gain, d_err);
    } catch (const UndefinedCorrelation& e) {
      meta["pearson_delta_gain_delta_error"] = nullptr;
      meta["pearson_note"] = e.what();
    }

    const fs::path dir = cfg.out_dir;
    fs::create_directories(dir);
    write_text_atomic(dir / "sweep_runs.csv", runs.str());
    write_text_atomic(dir / "sweep_summary.csv", summ.str());
    write_text_atomic(dir / "sweep.json", meta.dump(2) + "\n");
    write_text_atomic(dir / "config.json", to_json(cfg).dump(2) + "\n");
    out << "rows=" << rows.size() << " succeeded=" << succeeded << " out=" << dir.string() << "\n";
    return succeeded > 0 ? kExitOk : kExitRuntime;
  });
}

int cmd_validate(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::set<std::string> known;
    for (const CheckEntry& c : acceptance_checks()) known.insert(c.id);
    for (const std::string& id : opts.only) {
      if (!known.count(id)) throw ConfigError("unknown check id '" + id + "'");
    }
    const auto results = run_acceptance(opts.only, out);
    std::size_t passed = 0;
    for (const CheckResult& r : results) passed += r.pass ? 1 : 0;
    out << passed << "/" << results.size() << " checks passed\n";
    return passed == results.size() ? kExitOk : kExitValidation;
  });
}

int run_cli(int argc, char** argv) {
  CLI::App app{"olsofu: online label shift adaptation with online feature updates"};
  app.require_subcommand(1);
  app.footer(config_help());

  CliOptions opts;
  std::string config_path, out_dir, order_name;
  std::uint64_t seed = 0;
  std::vector<std::string> checks;

  auto common = [&](CLI::App* sub, bool with_jobs) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--out", out_dir, "output directory (OLSOFU_OUT takes precedence)");
    sub->add_option("--seed", seed, "override seeds.run_seed");
    sub->add_option("--order", order_name, "predict_first or update_first")
        ->check(CLI::IsMember({"predict_first", "update_first"}));
    if (with_jobs) sub->add_option("--jobs", opts.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->footer(config_help());
  };

  CLI::App* pre = app.add_subcommand("pretrain", "train and calibrate f_0, write a checkpoint");
  common(pre, false);
  CLI::App* run = app.add_subcommand("run", "run one online scenario");
  common(run, false);
  CLI::App* sweep = app.add_subcommand("sweep", "run the cross product of the sweep axes");
  common(sweep, true);
  CLI::App* val = app.add_subcommand("validate", "run the acceptance checks");
  val->add_option("--check", checks, "only run these check ids (P1..P12)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  auto apply = [&](CLI::App* sub) {
    if (sub->count("--config")) opts.config = config_path;
    if (sub->count("--out")) opts.out = out_dir;
    if (sub->count("--seed")) opts.seed = seed;
    if (sub->count("--order")) opts.order = parse_order(order_name);
  };

  if (pre->parsed()) {
    apply(pre);
    return cmd_pretrain(opts, std::cout, std::cerr);
  }
  if (run->parsed()) {
    apply(run);
    return cmd_run(opts, std::cout, std::cerr);
  }
  if (sweep->parsed()) {
    apply(sweep);
    return cmd_sweep(opts, std::cout, std::cerr);
  }
  opts.only.insert(checks.begin(), checks.end());
  return cmd_validate(opts, std::cout, std::cerr);
}

}  // namespace olsofu
