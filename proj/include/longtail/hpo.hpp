#pragma once

// Library-form hyperparameter optimization: a RACOS-style classification
// based optimizer as the default and random search as the baseline, with
// trial/time budgets, cooperative per-trial deadlines and median-rule early
// stopping.

#include "longtail/common.hpp"

#include <functional>
#include <limits>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace longtail {

using ParamValue = std::variant<double, long, std::string>;
using TrialConfig = std::map<std::string, ParamValue>;

std::string to_string(const ParamValue& v);

struct ParamSpec {
  enum class Kind { categorical, log_uniform, integer_range };
  std::string name;
  Kind kind = Kind::categorical;
  std::vector<std::string> categories;
  double lo = 0.0, hi = 0.0;  // log_uniform bounds, both positive
  long int_lo = 0, int_hi = 0;
};

struct SearchSpaceSpec {
  std::vector<ParamSpec> params;
  void validate() const;
  const ParamSpec& at(const std::string& name) const;
};

// Fig.-style default space for tuning the pre-designed architecture.
SearchSpaceSpec default_arch_space();

struct TrialRecord {
  int trial_id = -1;
  TrialConfig config;
  enum class Status { done, early_stopped, timed_out, failed } status = Status::failed;
  double metric = std::numeric_limits<double>::quiet_NaN();  // set iff done/early_stopped
  double wall_time_seconds = 0.0;

  bool has_metric() const { return status == Status::done || status == Status::early_stopped; }
};

struct TrialBudget {
  int max_trials = 50;
  double max_total_seconds = std::numeric_limits<double>::infinity();
  double per_trial_seconds = std::numeric_limits<double>::infinity();
};

// Handed to the objective: a cooperative deadline token plus intermediate
// metric reporting. report() returns true when the median stopping rule says
// the trial is futureless and should return now.
class TrialContext {
 public:
  bool deadline_exceeded() const;
  bool report(int step, double metric);
  bool early_stopped() const { return early_stopped_; }

 private:
  friend struct OptimizeLoop;
  double deadline_elapsed_limit_ = std::numeric_limits<double>::infinity();
  std::function<double()> elapsed_;
  const std::map<int, std::vector<double>>* step_history_ = nullptr;
  std::vector<std::pair<int, double>>* my_reports_ = nullptr;
  bool early_stopped_ = false;
};

using Objective = std::function<double(const TrialConfig&, TrialContext&)>;

enum class HpoMethod { racos, random };

struct HpoOptions {
  HpoMethod method = HpoMethod::racos;
  double positive_fraction = 0.2;  // top fraction treated as positive samples
  double epsilon = 0.1;            // full-space exploration probability
  std::uint64_t seed = 0;
  std::vector<TrialConfig> initial_configs;  // evaluated first, in order
  std::string history_path;                  // optional append-only record file
};

struct HpoResult {
  TrialRecord best;
  std::vector<TrialRecord> history;
};

// Runs the suggest/observe loop until the trial or time budget is exhausted.
// Failed trials are recorded and skipped; throws only if every trial failed.
HpoResult optimize(const Objective& objective, const SearchSpaceSpec& space,
                   const TrialBudget& budget, const HpoOptions& options);

TrialConfig random_suggest(const SearchSpaceSpec& space, Rng& rng);

// Classification-based suggestion: learns an axis-aligned region containing
// the top-fraction positives and excluding sampled negatives, samples inside
// it with probability 1-epsilon and from the full space otherwise.
TrialConfig racos_suggest(const std::vector<TrialRecord>& history, const SearchSpaceSpec& space,
                          double positive_fraction, double epsilon, Rng& rng);

}  // namespace longtail
