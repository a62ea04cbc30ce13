#include "longtail/config.hpp"

#include "longtail/flops.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace longtail {

namespace {

class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {}

  bool has(const std::string& key) const { return j_.contains(key); }

  Reader child(const std::string& key) const {
    if (!j_.contains(key) || !j_.at(key).is_object())
      throw ConfigError(path_ + key + ": expected an object");
    return Reader(j_.at(key), path_ + key + ".");
  }

  template <typename T>
  void get(const std::string& key, T& out) const {
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + key + ": wrong type");
    }
  }

  void get_positive(const std::string& key, int& out) const {
    get(key, out);
    if (j_.contains(key) && out < 1) throw ConfigError(path_ + key + ": must be >= 1");
  }

  void require_known(const std::set<std::string>& known) const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!known.count(it.key())) throw ConfigError(path_ + it.key() + ": unknown key");
  }

  const nlohmann::json& raw() const { return j_; }
  const std::string& path() const { return path_; }

 private:
  const nlohmann::json& j_;
  std::string path_;
};

void parse_universe(const Reader& r, UniverseConfig& u) {
  r.require_known({"profile_dim", "vocab_size", "max_seq_len", "n_scenarios", "shared_strength",
                   "noise_rate", "size_profile", "label_sharpness", "test_frac", "support_frac"});
  r.get_positive("profile_dim", u.profile_dim);
  r.get_positive("vocab_size", u.vocab_size);
  r.get_positive("max_seq_len", u.max_seq_len);
  r.get_positive("n_scenarios", u.n_scenarios);
  r.get("shared_strength", u.shared_strength);
  r.get("noise_rate", u.noise_rate);
  r.get("size_profile", u.size_profile);
  r.get("label_sharpness", u.label_sharpness);
  r.get("test_frac", u.test_frac);
  r.get("support_frac", u.support_frac);
  if (u.size_profile.empty()) {
    // long-tailed default sizes
    u.size_profile.resize(static_cast<std::size_t>(u.n_scenarios));
    for (int i = 0; i < u.n_scenarios; ++i)
      u.size_profile[static_cast<std::size_t>(i)] = std::max(200, 2000 - 320 * i);
  }
  try {
    u.validate();
  } catch (const std::exception& e) {
    throw ConfigError(r.path() + ": " + e.what());
  }
}

void parse_arch(const Reader& r, ArchConfig& a) {
  r.require_known({"encoder_kind", "n_encoder_layers", "hidden_dim", "intermediate_dim",
                   "profile_mlp_dims", "head_mlp_dims", "embed_dim", "attention_heads"});
  std::string kind = a.encoder_kind == EncoderKind::recurrent ? "recurrent" : "attention";
  r.get("encoder_kind", kind);
  if (kind == "recurrent")
    a.encoder_kind = EncoderKind::recurrent;
  else if (kind == "attention")
    a.encoder_kind = EncoderKind::attention;
  else
    throw ConfigError(r.path() + "encoder_kind: must be 'recurrent' or 'attention'");
  r.get_positive("n_encoder_layers", a.n_encoder_layers);
  r.get_positive("hidden_dim", a.hidden_dim);
  r.get_positive("intermediate_dim", a.intermediate_dim);
  r.get("profile_mlp_dims", a.profile_mlp_dims);
  r.get("head_mlp_dims", a.head_mlp_dims);
  r.get("embed_dim", a.embed_dim);
  r.get_positive("attention_heads", a.attention_heads);
}

void parse_train(const Reader& r, TrainConfig& t) {
  r.require_known({"learning_rate", "batch_size", "epochs", "optimizer"});
  r.get("learning_rate", t.learning_rate);
  if (t.learning_rate <= 0.0) throw ConfigError(r.path() + "learning_rate: must be positive");
  r.get_positive("batch_size", t.batch_size);
  r.get_positive("epochs", t.epochs);
  std::string opt = t.optimizer == TrainConfig::Optimizer::adam ? "adam" : "sgd";
  r.get("optimizer", opt);
  if (opt == "adam")
    t.optimizer = TrainConfig::Optimizer::adam;
  else if (opt == "sgd")
    t.optimizer = TrainConfig::Optimizer::sgd;
  else
    throw ConfigError(r.path() + "optimizer: must be 'adam' or 'sgd'");
}

void parse_meta(const Reader& r, MetaConfig& m) {
  r.require_known({"gamma", "eta", "inner_steps", "batch_size", "staleness_bound",
                   "second_order", "refresh_epochs"});
  r.get("gamma", m.gamma);
  r.get("eta", m.eta);
  r.get_positive("inner_steps", m.inner_steps);
  r.get_positive("batch_size", m.batch_size);
  r.get("staleness_bound", m.staleness_bound);
  r.get("second_order", m.second_order);
  int refresh_epochs = m.refresh.epochs;
  r.get("refresh_epochs", refresh_epochs);
  m.refresh.epochs = refresh_epochs;
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw ConfigError(r.path() + ": " + e.what());
  }
}

void parse_nas(const Reader& r, NasConfig& n) {
  r.require_known({"lambda", "delta", "beta", "arch_lr", "tau_start", "tau_end", "epochs",
                   "batch_size", "flops_budget", "train_split"});
  if (r.has("lambda")) {
    if (r.raw().at("lambda").is_string()) {
      if (r.raw().at("lambda").get<std::string>() != "auto")
        throw ConfigError(r.path() + "lambda: must be a number or 'auto'");
      n.lambda = -1.0;
    } else {
      r.get("lambda", n.lambda);
      if (n.lambda < 0.0) throw ConfigError(r.path() + "lambda: must be >= 0 or 'auto'");
    }
  }
  r.get("delta", n.delta);
  if (n.delta < 0.0) throw ConfigError(r.path() + "delta: must be >= 0");
  r.get("beta", n.beta);
  r.get("arch_lr", n.arch_lr);
  r.get("tau_start", n.tau_start);
  r.get("tau_end", n.tau_end);
  r.get_positive("epochs", n.epochs);
  r.get_positive("batch_size", n.batch_size);
  long budget = n.flops_budget;
  r.get("flops_budget", budget);
  if (budget < 0) throw ConfigError(r.path() + "flops_budget: must be >= 0");
  n.flops_budget = budget;
  r.get("train_split", n.train_split);
  try {
    n.validate();
  } catch (const std::exception& e) {
    throw ConfigError(r.path() + ": " + e.what());
  }
}

void parse_init(const Reader& r, InitConfig& i) {
  r.require_known({"n_initial_scenarios", "use_hpo", "hpo_trials", "use_nas"});
  r.get_positive("n_initial_scenarios", i.n_initial_scenarios);
  r.get("use_hpo", i.use_hpo);
  r.get_positive("hpo_trials", i.hpo_trials);
  r.get("use_nas", i.use_nas);
}

}  // namespace

ExperimentConfig ExperimentConfig::desk_default() {
  ExperimentConfig c;
  c.universe.n_scenarios = 6;
  c.universe.size_profile = {2000, 1500, 1200, 900, 700, 500};
  c.universe.shared_strength = 0.9;
  c.universe.noise_rate = 0.05;

  c.heavy.encoder_kind = EncoderKind::recurrent;
  c.heavy.n_encoder_layers = 6;
  c.heavy.hidden_dim = 12;
  c.heavy.embed_dim = 12;
  c.heavy.profile_dim = c.universe.profile_dim;
  c.heavy.vocab_size = c.universe.vocab_size;
  c.heavy.max_seq_len = c.universe.max_seq_len;

  c.light = c.heavy;
  c.light.n_encoder_layers = 3;

  c.train.batch_size = 128;
  c.train.epochs = 5;

  c.meta.gamma = 0.2;
  c.meta.inner_steps = 2;

  c.nas.epochs = 18;
  c.nas.batch_size = 64;

  c.init.n_initial_scenarios = 6;
  return c;
}

void ExperimentConfig::validate() const {
  universe.validate();
  ArchConfig h = heavy, l = light;
  h.profile_dim = l.profile_dim = universe.profile_dim;
  h.vocab_size = l.vocab_size = universe.vocab_size;
  h.max_seq_len = l.max_seq_len = universe.max_seq_len;
  h.validate();
  l.validate();
  meta.validate();
  nas.validate();
  if (strategies.empty()) throw ConfigError("strategies: must not be empty");
  for (const std::string& s : strategies)
    if (s != "SinH" && s != "MeH" && s != "MeL" && s != "Ours")
      throw ConfigError("strategies: unknown strategy '" + s + "'");
  if (seeds.empty()) throw ConfigError("seeds: must not be empty");
  if (latency_batch < 1) throw ConfigError("latency_batch: must be >= 1");
  if (latency_reps < 3) throw ConfigError("latency_reps: must be >= 3");
  if (nas.flops_budget > 0 && nas.flops_budget < model_flops(l))
    throw ConfigError(
        "nas.flops_budget: below the pre-defined light model's own count (" +
        std::to_string(model_flops(l)) + ")");
}

ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  Reader root(j, "");
  root.require_known({"universe", "heavy", "light", "train", "meta", "nas", "init",
                      "strategies", "seeds", "out_dir", "latency_batch", "latency_reps"});
  ExperimentConfig c = ExperimentConfig::desk_default();
  if (root.has("universe")) parse_universe(root.child("universe"), c.universe);
  if (root.has("heavy")) parse_arch(root.child("heavy"), c.heavy);
  if (root.has("light")) parse_arch(root.child("light"), c.light);
  if (root.has("train")) parse_train(root.child("train"), c.train);
  if (root.has("meta")) parse_meta(root.child("meta"), c.meta);
  if (root.has("nas")) parse_nas(root.child("nas"), c.nas);
  if (root.has("init")) parse_init(root.child("init"), c.init);
  root.get("strategies", c.strategies);
  root.get("seeds", c.seeds);
  root.get("out_dir", c.out_dir);
  root.get("latency_batch", c.latency_batch);
  root.get("latency_reps", c.latency_reps);
  // the universe fixes the input shape
  c.heavy.profile_dim = c.light.profile_dim = c.universe.profile_dim;
  c.heavy.vocab_size = c.light.vocab_size = c.universe.vocab_size;
  c.heavy.max_seq_len = c.light.max_seq_len = c.universe.max_seq_len;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
  }
  return parse_config(j);
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::ostringstream ss;
  ss << cfg.universe.n_scenarios << ":" << cfg.universe.shared_strength << ":"
     << cfg.universe.noise_rate << ":" << cfg.train.learning_rate << ":" << cfg.train.epochs
     << ":" << cfg.meta.gamma << ":" << cfg.meta.resolved_eta() << ":" << cfg.nas.delta << ":"
     << cfg.nas.epochs;
  for (int s : cfg.universe.size_profile) ss << "," << s;
  std::ostringstream out;
  out << std::hex << fnv1a(ss.str());
  return out.str();
}

}  // namespace longtail
