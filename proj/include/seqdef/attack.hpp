#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "seqdef/data.hpp"
#include "seqdef/defense.hpp"
#include "seqdef/model.hpp"

namespace seqdef {

enum class AttackVariant : uint8_t { kWhitebox, kBlackbox, kRandom };

const char* variant_name(AttackVariant variant);
AttackVariant parse_variant(const std::string& text);

struct AttackConfig {
  int32_t n = 140;                        // sliding window length; must equal the model window
  int32_t max_insertions_per_window = -1; // -1 resolves to ceil(2n/3) - 1
  AttackVariant variant = AttackVariant::kWhitebox;
  std::string adaptive_target;            // defense id for adaptive_attack
  int32_t adaptive_iteration_cap = 10;
  uint64_t seed = 0;
  std::vector<int32_t> candidates;        // insertion alphabet; empty = whole vocabulary

  int32_t budget() const;                 // resolved insertion cap per window
};

// One replayable insertion: the token was inserted at absolute position
// window * n + position of the evolving sequence (0-based, insert-before).
struct Insertion {
  int32_t window = 0;
  int32_t position = 0;
  int32_t token = 0;

  bool operator==(const Insertion&) const = default;
};

struct AttackResult {
  TokenSeq original;
  TokenSeq perturbed;
  std::vector<Insertion> insertions;
  bool evaded = false;
  int64_t queries = 0;  // target-model window evaluations
};

// Token minimizing ||sign(one_hot(window) - one_hot(insert(window, position,
// token))) - sign(jacobian)||_2 over the flattened window matrices, with
// sign(0) = 0. Ties fall to the lowest token index. `candidates` empty means
// every non-padding token.
int32_t select_insertion(const Eigen::MatrixXd& jacobian, std::span<const int32_t> window,
                         int32_t position, int32_t vocab_size,
                         std::span<const int32_t> candidates = {});

// Re-applies a logged insertion list to a sequence.
TokenSeq replay_insertions(const TokenSeq& original, const std::vector<Insertion>& insertions,
                           int32_t n);

// Sliding-window insertion attack: per window, repeatedly pick a uniform
// random position and insert the gradient-selected token while the target
// still labels the window malicious and the per-window budget remains.
// Tokens pushed out of a window become the start of the next one. White-box
// passes the target itself as gradient_source; black-box passes a substitute.
AttackResult attack_sequence(const RnnClassifier& target, const RnnClassifier& gradient_source,
                             const TokenSeq& seq, const AttackConfig& config);

// Same loop with uniform random token choice instead of the gradient argmin.
AttackResult attack_random(const RnnClassifier& target, const TokenSeq& seq,
                           const AttackConfig& config);

struct SubstituteSpec {
  int32_t hidden_units = 64;
  int32_t epochs = 10;
  uint64_t seed = 0;
  bool operator==(const SubstituteSpec&) const = default;
};

// GRU substitute fitted with Adadelta on the holdout, relabeled by the
// target's own predictions.
RnnClassifier train_substitute(const RnnClassifier& target, const Dataset& holdout,
                               const SubstituteSpec& spec);

// Defense-aware attacks. `defense_id` selects the procedure; `system` must
// carry the handles that procedure consults (see DefendedModel). Success
// means the full defended decision on the output is benign.
AttackResult adaptive_attack(const std::string& defense_id, const DefendedModel& system,
                             const TokenSeq& seq, const AttackConfig& config);

// Reproducible attack stream for consumers needing many adversarial
// examples (adversarial training, signature mining). perturb() alternates
// white-box and black-box by salt parity when a substitute is present, and
// derives the per-call seed from (config.seed, salt).
struct AdversarialExampleSource {
  const RnnClassifier* target = nullptr;
  const RnnClassifier* substitute = nullptr;
  AttackConfig config;

  AttackResult perturb(const TokenSeq& seq, uint64_t salt) const;
};

}  // namespace seqdef
