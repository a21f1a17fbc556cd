#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seqdef/data.hpp"

namespace seqdef {

class RnnClassifier;
struct SqueezeDetector;
struct SignatureSet;

// Outcome of running a defended classifier on one sequence. `flagged` means
// the defense's detector fired; flagged inputs are labeled malicious, so
// `label` already reflects that coercion.
struct DefenseDecision {
  Label label = Label::kBenign;
  bool flagged = false;
  double confidence = 0.0;
};

class Defense {
 public:
  virtual ~Defense() = default;
  virtual std::string id() const = 0;
  virtual DefenseDecision decide(const TokenSeq& seq) const = 0;
};

// One ensemble member as seen by an attacker: the classifier plus the token
// offset its training inputs started from.
struct MemberView {
  const RnnClassifier* classifier = nullptr;
  int32_t offset = 0;
};

// Everything an adaptive attacker may consult about a defended system. Only
// the handles needed by the matching adaptive procedure have to be set:
// every procedure needs `defense` and `classifier`; squeeze additionally
// needs `squeeze`, signatures needs `signatures`, ensemble needs `members`.
struct DefendedModel {
  const Defense* defense = nullptr;
  const RnnClassifier* classifier = nullptr;
  const SqueezeDetector* squeeze = nullptr;
  const SignatureSet* signatures = nullptr;
  std::vector<MemberView> members;
};

}  // namespace seqdef
