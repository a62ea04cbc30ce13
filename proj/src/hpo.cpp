#include "longtail/hpo.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace longtail {

std::string to_string(const ParamValue& v) {
  if (std::holds_alternative<double>(v)) return std::to_string(std::get<double>(v));
  if (std::holds_alternative<long>(v)) return std::to_string(std::get<long>(v));
  return std::get<std::string>(v);
}

void SearchSpaceSpec::validate() const {
  if (params.empty()) throw std::invalid_argument("SearchSpaceSpec: empty");
  std::set<std::string> names;
  for (const ParamSpec& p : params) {
    if (!names.insert(p.name).second)
      throw std::invalid_argument("SearchSpaceSpec: duplicate param " + p.name);
    switch (p.kind) {
      case ParamSpec::Kind::categorical:
        if (p.categories.empty())
          throw std::invalid_argument("SearchSpaceSpec: " + p.name + " has no categories");
        break;
      case ParamSpec::Kind::log_uniform:
        if (!(p.lo > 0.0) || !(p.hi > p.lo))
          throw std::invalid_argument("SearchSpaceSpec: " + p.name +
                                      " needs 0 < lo < hi for a log-uniform domain");
        break;
      case ParamSpec::Kind::integer_range:
        if (p.int_hi < p.int_lo)
          throw std::invalid_argument("SearchSpaceSpec: " + p.name + " has an empty range");
        break;
    }
  }
}

const ParamSpec& SearchSpaceSpec::at(const std::string& name) const {
  for (const ParamSpec& p : params)
    if (p.name == name) return p;
  throw std::invalid_argument("SearchSpaceSpec: unknown param " + name);
}

SearchSpaceSpec default_arch_space() {
  SearchSpaceSpec s;
  s.params.push_back({"learning_rate",
                      ParamSpec::Kind::categorical,
                      {"0.01", "0.003", "0.001", "0.0003"},
                      0,
                      0,
                      0,
                      0});
  s.params.push_back(
      {"profile_mlp_dims", ParamSpec::Kind::categorical, {"32,32", "64,32", "64,64", "32"}, 0, 0, 0, 0});
  ParamSpec enc;
  enc.name = "n_encoder_layers";
  enc.kind = ParamSpec::Kind::integer_range;
  enc.int_lo = 2;
  enc.int_hi = 6;
  s.params.push_back(enc);
  s.params.push_back(
      {"head_mlp_dims", ParamSpec::Kind::categorical, {"32,32", "64,32", "32"}, 0, 0, 0, 0});
  return s;
}

bool TrialContext::deadline_exceeded() const {
  return elapsed_ && elapsed_() > deadline_elapsed_limit_;
}

bool TrialContext::report(int step, double metric) {
  if (my_reports_) my_reports_->emplace_back(step, metric);
  if (step_history_ == nullptr) return false;
  auto it = step_history_->find(step);
  if (it == step_history_->end() || it->second.size() < 3) return false;
  std::vector<double> vals = it->second;
  std::nth_element(vals.begin(), vals.begin() + static_cast<long>(vals.size() / 2), vals.end());
  const double median = vals[vals.size() / 2];
  if (metric < median) {
    early_stopped_ = true;
    return true;
  }
  return false;
}

TrialConfig random_suggest(const SearchSpaceSpec& space, Rng& rng) {
  TrialConfig cfg;
  for (const ParamSpec& p : space.params) {
    switch (p.kind) {
      case ParamSpec::Kind::categorical:
        cfg[p.name] = p.categories[static_cast<std::size_t>(
            rng.uniform_int(static_cast<int>(p.categories.size())))];
        break;
      case ParamSpec::Kind::log_uniform:
        cfg[p.name] = std::exp(rng.uniform(std::log(p.lo), std::log(p.hi)));
        break;
      case ParamSpec::Kind::integer_range:
        cfg[p.name] =
            p.int_lo + static_cast<long>(rng.uniform_int(static_cast<int>(p.int_hi - p.int_lo + 1)));
        break;
    }
  }
  return cfg;
}

namespace {

// axis-aligned sampling region: per-dimension interval (log space for reals)
// or allowed category set
struct Region {
  std::map<std::string, std::pair<double, double>> real_bounds;  // in log space
  std::map<std::string, std::pair<long, long>> int_bounds;
  std::map<std::string, std::vector<std::string>> cat_allowed;

  bool contains(const SearchSpaceSpec& space, const TrialConfig& cfg) const {
    for (const ParamSpec& p : space.params) {
      const ParamValue& v = cfg.at(p.name);
      switch (p.kind) {
        case ParamSpec::Kind::categorical: {
          const auto& allowed = cat_allowed.at(p.name);
          if (std::find(allowed.begin(), allowed.end(), std::get<std::string>(v)) ==
              allowed.end())
            return false;
          break;
        }
        case ParamSpec::Kind::log_uniform: {
          const double x = std::log(std::get<double>(v));
          const auto& [lo, hi] = real_bounds.at(p.name);
          if (x < lo || x > hi) return false;
          break;
        }
        case ParamSpec::Kind::integer_range: {
          const long x = std::get<long>(v);
          const auto& [lo, hi] = int_bounds.at(p.name);
          if (x < lo || x > hi) return false;
          break;
        }
      }
    }
    return true;
  }
};

double real_of(const ParamValue& v) { return std::get<double>(v); }
long int_of(const ParamValue& v) { return std::get<long>(v); }

}  // namespace

TrialConfig racos_suggest(const std::vector<TrialRecord>& history, const SearchSpaceSpec& space,
                          double positive_fraction, double epsilon, Rng& rng) {
  space.validate();
  std::vector<const TrialRecord*> completed;
  for (const TrialRecord& t : history)
    if (t.has_metric()) completed.push_back(&t);
  if (completed.empty() || rng.uniform() < epsilon) return random_suggest(space, rng);

  std::sort(completed.begin(), completed.end(),
            [](const TrialRecord* a, const TrialRecord* b) { return a->metric > b->metric; });
  const auto n_pos = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(positive_fraction *
                                            static_cast<double>(completed.size()))));
  std::vector<const TrialRecord*> positives(completed.begin(),
                                            completed.begin() + static_cast<long>(n_pos));
  std::vector<const TrialRecord*> negatives(completed.begin() + static_cast<long>(n_pos),
                                            completed.end());

  // start from the full space; categoricals collapse to the positive value set
  Region region;
  for (const ParamSpec& p : space.params) {
    switch (p.kind) {
      case ParamSpec::Kind::categorical: {
        std::vector<std::string> seen;
        for (const TrialRecord* t : positives) {
          const std::string& v = std::get<std::string>(t->config.at(p.name));
          if (std::find(seen.begin(), seen.end(), v) == seen.end()) seen.push_back(v);
        }
        region.cat_allowed[p.name] = std::move(seen);
        break;
      }
      case ParamSpec::Kind::log_uniform:
        region.real_bounds[p.name] = {std::log(p.lo), std::log(p.hi)};
        break;
      case ParamSpec::Kind::integer_range:
        region.int_bounds[p.name] = {p.int_lo, p.int_hi};
        break;
    }
  }

  // positive bounding box per numeric dimension
  std::map<std::string, std::pair<double, double>> pos_real;
  std::map<std::string, std::pair<long, long>> pos_int;
  for (const ParamSpec& p : space.params) {
    if (p.kind == ParamSpec::Kind::log_uniform) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (const TrialRecord* t : positives) {
        const double x = std::log(real_of(t->config.at(p.name)));
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
      pos_real[p.name] = {lo, hi};
    } else if (p.kind == ParamSpec::Kind::integer_range) {
      long lo = std::numeric_limits<long>::max(), hi = std::numeric_limits<long>::min();
      for (const TrialRecord* t : positives) {
        const long x = int_of(t->config.at(p.name));
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
      pos_int[p.name] = {lo, hi};
    }
  }

  // shrink numeric bounds to exclude each negative still inside the region;
  // the new boundary lands uniformly between the positive box and the negative
  std::vector<const TrialRecord*> shuffled = negatives;
  rng.shuffle(shuffled);
  for (const TrialRecord* neg : shuffled) {
    if (!region.contains(space, neg->config)) continue;
    std::vector<const ParamSpec*> dims;
    for (const ParamSpec& p : space.params) dims.push_back(&p);
    rng.shuffle(dims);
    for (const ParamSpec* p : dims) {
      if (p->kind == ParamSpec::Kind::log_uniform) {
        const double x = std::log(real_of(neg->config.at(p->name)));
        auto& [lo, hi] = region.real_bounds[p->name];
        const auto& [plo, phi] = pos_real[p->name];
        if (x > phi && x <= hi) {
          hi = phi + (x - phi) * rng.uniform();
          break;
        }
        if (x < plo && x >= lo) {
          lo = x + (plo - x) * rng.uniform();
          break;
        }
      } else if (p->kind == ParamSpec::Kind::integer_range) {
        const long x = int_of(neg->config.at(p->name));
        auto& [lo, hi] = region.int_bounds[p->name];
        const auto& [plo, phi] = pos_int[p->name];
        if (x > phi && x <= hi) {
          hi = phi + static_cast<long>(rng.uniform_int(static_cast<int>(x - phi)));
          break;
        }
        if (x < plo && x >= lo) {
          lo = x + 1 + static_cast<long>(rng.uniform_int(static_cast<int>(plo - x)));
          break;
        }
      }
      // categorical negatives are already outside unless they share a
      // positive value, which cannot be excluded
    }
  }

  TrialConfig cfg;
  for (const ParamSpec& p : space.params) {
    switch (p.kind) {
      case ParamSpec::Kind::categorical: {
        const auto& allowed = region.cat_allowed[p.name];
        cfg[p.name] =
            allowed[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(allowed.size())))];
        break;
      }
      case ParamSpec::Kind::log_uniform: {
        auto [lo, hi] = region.real_bounds[p.name];
        if (!(hi >= lo)) {  // degenerate region, fall back to the full space
          lo = std::log(p.lo);
          hi = std::log(p.hi);
        }
        cfg[p.name] = std::exp(rng.uniform(lo, hi));
        break;
      }
      case ParamSpec::Kind::integer_range: {
        auto [lo, hi] = region.int_bounds[p.name];
        if (hi < lo) {
          lo = p.int_lo;
          hi = p.int_hi;
        }
        cfg[p.name] = lo + static_cast<long>(rng.uniform_int(static_cast<int>(hi - lo + 1)));
        break;
      }
    }
  }
  return cfg;
}

namespace {

nlohmann::json config_to_json(const TrialConfig& cfg) {
  nlohmann::json j;
  for (const auto& [k, v] : cfg) {
    if (std::holds_alternative<double>(v))
      j[k] = std::get<double>(v);
    else if (std::holds_alternative<long>(v))
      j[k] = std::get<long>(v);
    else
      j[k] = std::get<std::string>(v);
  }
  return j;
}

const char* status_name(TrialRecord::Status s) {
  switch (s) {
    case TrialRecord::Status::done:
      return "done";
    case TrialRecord::Status::early_stopped:
      return "early-stopped";
    case TrialRecord::Status::timed_out:
      return "timed-out";
    case TrialRecord::Status::failed:
      return "failed";
  }
  return "unknown";
}

}  // namespace

struct OptimizeLoop {
  static HpoResult run(const Objective& objective, const SearchSpaceSpec& space,
                       const TrialBudget& budget, const HpoOptions& options) {
    space.validate();
    if (budget.max_trials < 1) throw std::invalid_argument("optimize: max_trials must be >= 1");
    const auto t_start = std::chrono::steady_clock::now();
    auto total_elapsed = [&]() {
      return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    };

    std::ofstream record;
    if (!options.history_path.empty()) {
      record.open(options.history_path, std::ios::app);
      if (!record) throw std::runtime_error("optimize: cannot open " + options.history_path);
    }

    HpoResult result;
    Rng rng(mix_seed(options.seed, 0x4AC0));
    std::map<int, std::vector<double>> step_history;

    for (int trial_id = 0; trial_id < budget.max_trials; ++trial_id) {
      if (total_elapsed() > budget.max_total_seconds) break;
      TrialConfig cfg;
      if (static_cast<std::size_t>(trial_id) < options.initial_configs.size())
        cfg = options.initial_configs[static_cast<std::size_t>(trial_id)];
      else if (options.method == HpoMethod::random)
        cfg = random_suggest(space, rng);
      else
        cfg = racos_suggest(result.history, space, options.positive_fraction, options.epsilon,
                            rng);

      TrialRecord rec;
      rec.trial_id = trial_id;
      rec.config = cfg;
      const auto t0 = std::chrono::steady_clock::now();
      auto trial_elapsed = [t0]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      };
      TrialContext ctx;
      ctx.deadline_elapsed_limit_ = budget.per_trial_seconds;
      ctx.elapsed_ = trial_elapsed;
      ctx.step_history_ = &step_history;
      std::vector<std::pair<int, double>> reports;
      ctx.my_reports_ = &reports;
      try {
        const double metric = objective(cfg, ctx);
        rec.wall_time_seconds = trial_elapsed();
        if (rec.wall_time_seconds > budget.per_trial_seconds) {
          rec.status = TrialRecord::Status::timed_out;
        } else if (ctx.early_stopped()) {
          rec.status = TrialRecord::Status::early_stopped;
          rec.metric = metric;
        } else {
          rec.status = TrialRecord::Status::done;
          rec.metric = metric;
        }
      } catch (const std::exception&) {
        rec.wall_time_seconds = trial_elapsed();
        rec.status = TrialRecord::Status::failed;
      }
      for (const auto& [step, metric] : reports) step_history[step].push_back(metric);
      if (record.is_open()) {
        nlohmann::json j;
        j["trial_id"] = rec.trial_id;
        j["config"] = config_to_json(rec.config);
        j["status"] = status_name(rec.status);
        if (rec.has_metric()) j["metric"] = rec.metric;
        j["wall_time_seconds"] = rec.wall_time_seconds;
        record << j.dump() << "\n";
        record.flush();
      }
      result.history.push_back(std::move(rec));
    }

    const TrialRecord* best = nullptr;
    for (const TrialRecord& t : result.history)
      if (t.has_metric() && (best == nullptr || t.metric > best->metric)) best = &t;
    if (best == nullptr) throw std::runtime_error("optimize: every trial failed");
    result.best = *best;
    return result;
  }
};

HpoResult optimize(const Objective& objective, const SearchSpaceSpec& space,
                   const TrialBudget& budget, const HpoOptions& options) {
  return OptimizeLoop::run(objective, space, budget, options);
}

}  // namespace longtail
