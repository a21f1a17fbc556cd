#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "seqdef/attack.hpp"
#include "seqdef/data.hpp"
#include "seqdef/defense.hpp"
#include "seqdef/embed.hpp"
#include "seqdef/ensemble.hpp"
#include "seqdef/model.hpp"
#include "seqdef/proximity.hpp"
#include "seqdef/signatures.hpp"
#include "seqdef/squeeze.hpp"

namespace seqdef {

// The undefended baseline behind the common defense interface: never flags,
// always answers with the bare classifier's decision.
class NullDefense : public Defense {
 public:
  explicit NullDefense(const RnnClassifier& classifier);
  std::string id() const override;
  DefenseDecision decide(const TokenSeq& seq) const override;

 private:
  const RnnClassifier* model_;
};

// Percentage of the adversarial set the defended system still catches,
// counting both detector flags and plain malicious classifications. The set
// is expected to hold attack outputs that evade the undefended classifier.
double adversarial_recall(const Defense& defense, const std::vector<TokenSeq>& adversarial);

// Clean-set scoring. Flagged inputs count as malicious predictions, which
// DefenseDecision already folds into its label.
EvalStats defended_accuracy(const Defense& defense, const Dataset& clean);

// Everything one experiment needs. All randomness derives from `seed`; the
// seeds inside the nested configs are overridden with mixed substreams.
struct ExperimentPlan {
  // synthetic dataset
  int32_t vocab_size = 50;
  int32_t len_min = 40;
  int32_t len_max = 80;
  double overlap = 0.3;
  SplitCounts counts;

  // baseline classifier and its training
  ModelConfig classifier;
  TrainConfig training;
  SubstituteSpec substitute;

  // attacks
  int32_t attack_samples = 100;
  int32_t max_insertions_per_window = -1;  // -1 keeps the attack default
  int32_t random_seeds = 5;
  int32_t adaptive_iteration_cap = 10;

  // defense rows to evaluate, in report order
  std::vector<std::string> defenses = {"squeeze", "signatures", "neighbor",
                                       "ensemble", "defgen", "advtrain"};

  // defense knobs
  GloveConfig embedding;
  int32_t squeeze_radius = 5;
  int32_t squeeze_target = 25;
  SignatureConfig signatures;
  int32_t signature_pool = 60;  // malicious training rows attacked for mining
  EnsembleConfig ensemble;
  DefGenConfig defgen;
  int32_t generator_order = 2;
  double generator_smoothing = 0.1;
  double advtrain_fraction = 0.5;

  // reporting. Wall-clock overheads always land in the JSON sidecar; the CSV
  // prints them only when csv_timings is set, so the default CSV is bitwise
  // reproducible across reruns.
  bool csv_timings = false;
  uint64_t seed = 0;
};

// The defaults behind the eval subcommand: a desk-scale defense comparison.
ExperimentPlan make_desk_plan();

struct DefenseRow {
  std::string defense;
  double adaptive_recall = 0.0;  // percent
  double whitebox_recall = 0.0;
  double blackbox_recall = 0.0;
  double random_recall = 0.0;  // mean of the per-seed recalls
  std::vector<double> random_recalls;
  size_t adaptive_set = 0;  // this row's adaptive denominator
  double clean_accuracy = 0.0;  // percent
  double fpr = 0.0;             // percent
  double train_overhead_s = 0.0;
  double inference_overhead_s = 0.0;
};

struct MetricsReport {
  std::vector<DefenseRow> rows;  // "none" first, then plan order
  uint64_t seed = 0;
  size_t attacked = 0;       // malicious test samples attacked per variant
  size_t whitebox_set = 0;   // shared denominators
  size_t blackbox_set = 0;
  std::vector<size_t> random_sets;
  double baseline_train_s = 0.0;
  double baseline_accuracy = 0.0;  // fraction, undefended
  double baseline_fpr = 0.0;
};

// Pinned CSV rendering of the report (header + one row per defense).
std::string report_csv(const MetricsReport& report, bool csv_timings);

// Runs the full pipeline: dataset, baseline, substitute, attack sets, every
// planned defense with its best adaptive attack, then writes the CSV and a
// <csv>.meta.json sidecar with the full metadata. Deterministic given the
// plan seed (sidecar timings excepted).
MetricsReport run_experiment_table(const ExperimentPlan& plan,
                                   const std::filesystem::path& csv_path);

}  // namespace seqdef
