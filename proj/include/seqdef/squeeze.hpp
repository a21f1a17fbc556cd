#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "seqdef/defense.hpp"
#include "seqdef/embed.hpp"
#include "seqdef/model.hpp"

namespace seqdef {

// One merged cluster of vocabulary tokens. The representative is the member
// whose original embedding sits closest to the group's center of mass (ties
// fall to the lowest token index).
struct MergeGroup {
  std::vector<int32_t> members;
  Eigen::RowVectorXd center;
  int32_t representative = 0;
};

// Total token -> representative mapping. table has vocab_size()+1 entries;
// index 0 is padding and always maps to itself. groups may be empty when the
// map was loaded from disk (only the table and target survive serialization).
struct SqueezeMap {
  std::vector<int32_t> table;
  std::vector<MergeGroup> groups;
  int32_t target_size = 0;

  int32_t vocab_size() const { return static_cast<int32_t>(table.size()) - 1; }
  int32_t apply(int32_t token) const;
  std::vector<int32_t> representatives() const;
};

// Greedy agglomerative merging of the two Euclidean-closest group centers
// until `target` groups remain. Merged center of mass is the member-count
// weighted mean; the merged group takes the lower list position. Distance
// ties break toward the lexicographically lowest position pair.
SqueezeMap build_squeeze_map(const EmbeddingMatrix& embedding, int32_t target);

TokenSeq apply_squeeze(const SqueezeMap& map, const TokenSeq& seq);
std::vector<int32_t> apply_squeeze(const SqueezeMap& map, std::span<const int32_t> window);

// Max over all training windows of |f(w) - f(squeeze(w))| where f is the
// window malicious confidence. By construction no training sample can exceed
// the returned threshold.
double calibrate_threshold(const SqueezeMap& map, const RnnClassifier& classifier,
                           const Dataset& train);

struct SqueezeDetector {
  SqueezeMap map;
  double threshold = 0.0;
};

struct SqueezeVerdict {
  bool adversarial = false;
  double original_confidence = 0.0;
  double squeezed_confidence = 0.0;
  double max_difference = 0.0;
  Label label = Label::kBenign;
};

// Flags a sequence as adversarial iff some window moves by more than the
// calibrated threshold under squeezing. Flagged sequences are labeled
// malicious; otherwise the original classification stands.
SqueezeVerdict detect(const SqueezeDetector& detector, const RnnClassifier& classifier,
                      const TokenSeq& seq);

void save_squeeze(const SqueezeDetector& detector, const std::filesystem::path& path);
SqueezeDetector load_squeeze(const std::filesystem::path& path);

// Full defended system: squeeze detector in front of the base classifier.
class SqueezeDefense : public Defense {
 public:
  SqueezeDefense(const RnnClassifier& classifier, const SqueezeDetector& detector)
      : classifier_(&classifier), detector_(&detector) {}
  std::string id() const override { return "squeeze"; }
  DefenseDecision decide(const TokenSeq& seq) const override;

 private:
  const RnnClassifier* classifier_;
  const SqueezeDetector* detector_;
};

}  // namespace seqdef
