// src/config.cpp

#include "olsofu/config.hpp"

#include <fstream>
#include <sstream>

#include "olsofu/errors.hpp"

namespace olsofu {

namespace {

using ojson = nlohmann::ordered_json;

template <class T>
ojson opt(const std::optional<T>& v) {
  return v ? ojson(*v) : ojson(nullptr);
}

ojson corruption_json(const CorruptionSpec& c) {
  return ojson{{"kind", to_string(c.kind)}, {"severity", c.severity}, {"angle_degrees", c.angle_degrees}};
}

// Copies `patch` over `base`, refusing keys that `base` does not define.
void merge_checked(ojson& base, const ojson& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config: " + (path.empty() ? std::string("document") : path) +
                                            " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    ojson& slot = base[it.key()];
    if (slot.is_object() && !it.value().is_null()) {
      merge_checked(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

template <class T>
T get(const ojson& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: bad value for '" + path + key + "': " + e.what());
  }
}

template <class T>
std::optional<T> get_opt(const ojson& j, const char* key, const std::string& path) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return get<T>(j, key, path);
}

CorruptionSpec parse_corruption(const ojson& j, const std::string& path) {
  CorruptionSpec c;
  c.kind = parse_corruption_kind(get<std::string>(j, "kind", path));
  c.severity = get<double>(j, "severity", path);
  c.angle_degrees = get<double>(j, "angle_degrees", path);
  return c;
}

RunConfig from_json(const ojson& j) {
  RunConfig cfg;
  Scenario& sc = cfg.scenario;

  const ojson& d = j.at("data");
  sc.data.num_classes = get<int>(d, "num_classes", "data.");
  sc.data.dim = get<int>(d, "dim", "data.");
  sc.data.class_means = get_opt<std::vector<Vector>>(d, "class_means", "data.").value_or(std::vector<Vector>{});
  sc.data.mean_scale = get<double>(d, "mean_scale", "data.");
  sc.data.cov_scale = get<double>(d, "cov_scale", "data.");
  sc.data.n_train = get<std::size_t>(d, "n_train", "data.");
  sc.data.n_val = get<std::size_t>(d, "n_val", "data.");
  sc.data.n_test_pool = get<std::size_t>(d, "n_test_pool", "data.");
  sc.data.q0 = get_opt<Vector>(d, "q0", "data.");

  const ojson& s = j.at("shift");
  sc.shift.kind = parse_shift_kind(get<std::string>(s, "kind", "shift."));
  sc.shift.q = get_opt<Vector>(s, "q", "shift.");
  sc.shift.q_prime = get_opt<Vector>(s, "q_prime", "shift.");
  sc.shift.switch_prob = get_opt<double>(s, "switch_prob", "shift.");

  sc.corruption = parse_corruption(j.at("corruption"), "corruption.");
  sc.algorithm = parse_algorithm(get<std::string>(j, "algorithm", ""));
  sc.mode = parse_mode(get<std::string>(j, "mode", ""));

  const ojson& ssl = j.at("ssl");
  sc.ssl.kind = parse_ssl_kind(get<std::string>(ssl, "kind", "ssl."));
  sc.ssl.lr = get<double>(ssl, "lr", "ssl.");
  sc.ssl.ba = get<int>(ssl, "ba", "ssl.");
  sc.ssl.infonce_temperature = get<double>(ssl, "infonce_temperature", "ssl.");
  sc.ssl.augment_noise = get<double>(ssl, "augment_noise", "ssl.");
  sc.ssl.inner_steps = get<int>(ssl, "inner_steps", "ssl.");

  sc.T = get<int>(j, "T", "");
  sc.B = get<std::size_t>(j, "B", "");
  sc.order = parse_order(get<std::string>(j, "order", ""));

  const ojson& seeds = j.at("seeds");
  sc.seeds.data_seed = get<std::uint64_t>(seeds, "data_seed", "seeds.");
  sc.seeds.shift_seed = get<std::uint64_t>(seeds, "shift_seed", "seeds.");
  sc.seeds.run_seed = get<std::uint64_t>(seeds, "run_seed", "seeds.");

  const ojson& tr = j.at("train");
  sc.train.epochs = get<int>(tr, "epochs", "train.");
  sc.train.batch_size = get<std::size_t>(tr, "batch_size", "train.");
  sc.train.learning_rate = get<double>(tr, "learning_rate", "train.");
  sc.train.momentum = get<double>(tr, "momentum", "train.");
  sc.train.weight_decay = get<double>(tr, "weight_decay", "train.");
  sc.train.seed = get<std::uint64_t>(tr, "seed", "train.");

  sc.arch.hidden = get<std::vector<std::size_t>>(j.at("arch"), "hidden", "arch.");
  sc.pretrain_ssl_weight = get<double>(j, "pretrain_ssl_weight", "");

  const ojson& o = j.at("ols");
  sc.ols.ftfwh_window = get<std::size_t>(o, "ftfwh_window", "ols.");
  sc.ols.rogd_eta = get_opt<double>(o, "rogd_eta", "ols.");
  sc.ols.rogd_warmup = get<int>(o, "rogd_warmup", "ols.");
  sc.ols.flh_eta = get<double>(o, "flh_eta", "ols.");
  sc.ols.flh_max_experts = get<std::size_t>(o, "flh_max_experts", "ols.");
  sc.ols.uogd_eta = get_opt<double>(o, "uogd_eta", "ols.");
  sc.ols.uogd_radius = get<double>(o, "uogd_radius", "ols.");
  sc.ols.atlas_eps = get_opt<double>(o, "atlas_eps", "ols.");

  sc.confusion_lambda = get<double>(j, "confusion_lambda", "");
  const ojson& rt = j.at("retrain");
  sc.retrain.max_iterations = get<int>(rt, "max_iterations", "retrain.");
  sc.retrain.grad_tolerance = get<double>(rt, "grad_tolerance", "retrain.");
  sc.retrain.f_tolerance = get<double>(rt, "f_tolerance", "retrain.");
  sc.retrain.l2 = get<double>(rt, "l2", "retrain.");

  cfg.checkpoint = get_opt<std::string>(j, "checkpoint", "");
  cfg.out_dir = get<std::string>(j, "out_dir", "");

  const ojson& sw = j.at("sweep");
  for (const auto& a : get<std::vector<std::string>>(sw, "algorithms", "sweep."))
    cfg.sweep.algorithms.push_back(parse_algorithm(a));
  for (const auto& a : get<std::vector<std::string>>(sw, "ssl", "sweep.")) cfg.sweep.ssl.push_back(parse_ssl_kind(a));
  for (const auto& a : get<std::vector<std::string>>(sw, "shifts", "sweep."))
    cfg.sweep.shifts.push_back(parse_shift_kind(a));
  const ojson& cs = sw.at("corruptions");
  if (!cs.is_array()) throw ConfigError("config: sweep.corruptions must be an array");
  for (const auto& c : cs) {
    ojson full = corruption_json(CorruptionSpec{});
    merge_checked(full, c, "sweep.corruptions[]");
    cfg.sweep.corruptions.push_back(parse_corruption(full, "sweep.corruptions[]."));
  }
  cfg.sweep.run_seeds = get<std::vector<std::uint64_t>>(sw, "run_seeds", "sweep.");
  return cfg;
}

void flatten_help(const ojson& j, const std::string& prefix, std::ostringstream& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.value().is_object()) {
      flatten_help(it.value(), key, out);
    } else {
      out << "  " << key << " = " << it.value().dump() << '\n';
    }
  }
}

}  // namespace

ojson to_json(const RunConfig& cfg) {
  const Scenario& sc = cfg.scenario;
  ojson j;
  j["data"] = ojson{{"num_classes", sc.data.num_classes},
                    {"dim", sc.data.dim},
                    {"class_means", sc.data.class_means.empty() ? ojson(nullptr) : ojson(sc.data.class_means)},
                    {"mean_scale", sc.data.mean_scale},
                    {"cov_scale", sc.data.cov_scale},
                    {"n_train", sc.data.n_train},
                    {"n_val", sc.data.n_val},
                    {"n_test_pool", sc.data.n_test_pool},
                    {"q0", opt(sc.data.q0)}};
  j["shift"] = ojson{{"kind", to_string(sc.shift.kind)},
                     {"q", opt(sc.shift.q)},
                     {"q_prime", opt(sc.shift.q_prime)},
                     {"switch_prob", opt(sc.shift.switch_prob)}};
  j["corruption"] = corruption_json(sc.corruption);
  j["algorithm"] = to_string(sc.algorithm);
  j["mode"] = to_string(sc.mode);
  j["ssl"] = ojson{{"kind", to_string(sc.ssl.kind)},
                   {"lr", sc.ssl.lr},
                   {"ba", sc.ssl.ba},
                   {"infonce_temperature", sc.ssl.infonce_temperature},
                   {"augment_noise", sc.ssl.augment_noise},
                   {"inner_steps", sc.ssl.inner_steps}};
  j["T"] = sc.T;
  j["B"] = sc.B;
  j["order"] = to_string(sc.order);
  j["seeds"] = ojson{{"data_seed", sc.seeds.data_seed},
                     {"shift_seed", sc.seeds.shift_seed},
                     {"run_seed", sc.seeds.run_seed}};
  j["train"] = ojson{{"epochs", sc.train.epochs},
                     {"batch_size", sc.train.batch_size},
                     {"learning_rate", sc.train.learning_rate},
                     {"momentum", sc.train.momentum},
                     {"weight_decay", sc.train.weight_decay},
                     {"seed", sc.train.seed}};
  j["arch"] = ojson{{"hidden", sc.arch.hidden}};
  j["pretrain_ssl_weight"] = sc.pretrain_ssl_weight;
  j["ols"] = ojson{{"ftfwh_window", sc.ols.ftfwh_window},
                   {"rogd_eta", opt(sc.ols.rogd_eta)},
                   {"rogd_warmup", sc.ols.rogd_warmup},
                   {"flh_eta", sc.ols.flh_eta},
                   {"flh_max_experts", sc.ols.flh_max_experts},
                   {"uogd_eta", opt(sc.ols.uogd_eta)},
                   {"uogd_radius", sc.ols.uogd_radius},
                   {"atlas_eps", opt(sc.ols.atlas_eps)}};
  j["confusion_lambda"] = sc.confusion_lambda;
  j["retrain"] = ojson{{"max_iterations", sc.retrain.max_iterations},
                       {"grad_tolerance", sc.retrain.grad_tolerance},
                       {"f_tolerance", sc.retrain.f_tolerance},
                       {"l2", sc.retrain.l2}};
  j["checkpoint"] = opt(cfg.checkpoint);
  j["out_dir"] = cfg.out_dir;

  ojson sw;
  sw["algorithms"] = ojson::array();
  for (Algorithm a : cfg.sweep.algorithms) sw["algorithms"].push_back(to_string(a));
  sw["ssl"] = ojson::array();
  for (SslKind s : cfg.sweep.ssl) sw["ssl"].push_back(to_string(s));
  sw["shifts"] = ojson::array();
  for (ShiftKind s : cfg.sweep.shifts) sw["shifts"].push_back(to_string(s));
  sw["corruptions"] = ojson::array();
  for (const auto& c : cfg.sweep.corruptions) sw["corruptions"].push_back(corruption_json(c));
  sw["run_seeds"] = cfg.sweep.run_seeds;
  j["sweep"] = std::move(sw);
  return j;
}

ojson default_config_json() { return to_json(RunConfig{}); }

RunConfig parse_config(const std::string& text) {
  ojson user;
  try {
    user = ojson::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  ojson merged = default_config_json();
  merge_checked(merged, user, "");
  RunConfig cfg;
  try {
    cfg = from_json(merged);
    cfg.scenario.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string config_help() {
  std::ostringstream out;
  out << "Config keys (JSON, dotted paths) and defaults:\n";
  flatten_help(default_config_json(), "", out);
  out << "  sweep.corruptions[] entries take keys kind, severity, angle_degrees\n";
  return out.str();
}

}  // namespace olsofu
