#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "seqdef/attack.hpp"
#include "seqdef/data.hpp"
#include "seqdef/defense.hpp"
#include "seqdef/model.hpp"

namespace seqdef {

enum class EnsembleVariant {
  kRegular,
  kSubsequence,
  kBagging,
  kBaggingSubsequence,
  kAdversarial,
  kAdversarialSubsequence,
};

std::string ensemble_variant_name(EnsembleVariant variant);
EnsembleVariant parse_ensemble_variant(const std::string& name);
bool variant_uses_offsets(EnsembleVariant variant);
bool variant_uses_bagging(EnsembleVariant variant);
bool variant_uses_adversarial(EnsembleVariant variant);

enum class Voting { kSoft, kHard };

std::string voting_name(Voting voting);
Voting parse_voting(const std::string& name);

struct EnsembleConfig {
  EnsembleVariant variant = EnsembleVariant::kRegular;
  int32_t size = 9;
  Voting voting = Voting::kSoft;
  // Per-member view offsets for subsequence variants. Empty means the
  // arithmetic progression 0, s, 2s, ... with stride s = ceil(window / 14).
  std::vector<int32_t> offsets;
  // Share of malicious training samples swapped for their attacked variants
  // in adversarial ensembles.
  double adversarial_fraction = 0.5;
  // When false (default) every adversarial member trains on one shared pool
  // of attack outputs; when true each member gets its own independently
  // seeded pool over the same selected samples.
  bool per_member_pools = false;
  uint64_t seed = 0;
};

// Exact training provenance of one member: enough to rebuild its training
// set and reproduce its parameters bit for bit.
struct MemberRecipe {
  int32_t offset = 0;
  uint64_t init_seed = 0;
  uint64_t train_seed = 0;
  uint64_t bagging_seed = 0;
  // With-replacement draw of training-set rows; empty means the full set.
  std::vector<size_t> bag;
  // Adversarial pool this member trained against; empty means none.
  std::string pool_id;
};

struct Ensemble {
  EnsembleConfig config;
  std::vector<RnnClassifier> members;
  std::vector<MemberRecipe> recipes;
  // Training-set rows whose sequences were swapped for attack outputs
  // (adversarial variants only; identical for every member).
  std::vector<size_t> replaced_rows;
};

// Trains config.size members. Model and train seeds are overridden per
// member; everything else in model_cfg/train_cfg applies to every member.
// Adversarial variants need `source` (its target must be non-null).
Ensemble train_ensemble(const EnsembleConfig& config, const ModelConfig& model_cfg,
                        const TrainConfig& train_cfg, const Dataset& train,
                        const AdversarialExampleSource* source = nullptr);

// The suffix of `seq` a member at `offset` sees at inference time.
TokenSeq member_view(const TokenSeq& seq, int32_t offset);

struct EnsemblePrediction {
  Label label = Label::kBenign;
  // Soft voting: mean member confidence. Hard voting: malicious member share.
  double vote = 0.0;
  std::vector<double> member_confidences;
  std::vector<Label> member_labels;
};

EnsemblePrediction ensemble_predict(const Ensemble& ensemble, const TokenSeq& seq,
                                    Voting voting);
EnsemblePrediction ensemble_predict(const Ensemble& ensemble, const TokenSeq& seq);

// Attacker-facing handles for the adaptive ensemble procedure.
std::vector<MemberView> member_views(const Ensemble& ensemble);

// Manifest (ensemble.json) plus one checkpoint file per member, all in `dir`.
void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& dir);
Ensemble load_ensemble(const std::filesystem::path& dir);

struct AdvTrainResult {
  RnnClassifier model;
  // Ids of the malicious training samples swapped for attack outputs.
  std::vector<std::string> replaced_ids;
  // Selected samples the attack could not start from because the source's
  // target already classified them benign; kept unperturbed.
  int64_t attack_failures = 0;
};

// Retrains from scratch on the training set with floor(fraction *
// malicious_count) malicious samples replaced by their attacked variants,
// labels unchanged. fraction 0 reproduces the baseline bit for bit given the
// same configs.
AdvTrainResult adversarial_training(const Dataset& train, const AdversarialExampleSource& source,
                                    double fraction, const ModelConfig& model_cfg,
                                    const TrainConfig& train_cfg);

class EnsembleDefense : public Defense {
 public:
  explicit EnsembleDefense(const Ensemble& ensemble);
  std::string id() const override;
  DefenseDecision decide(const TokenSeq& seq) const override;

 private:
  const Ensemble* ensemble_;
};

class AdvTrainDefense : public Defense {
 public:
  explicit AdvTrainDefense(const RnnClassifier& retrained);
  std::string id() const override;
  DefenseDecision decide(const TokenSeq& seq) const override;

 private:
  const RnnClassifier* model_;
};

}  // namespace seqdef
