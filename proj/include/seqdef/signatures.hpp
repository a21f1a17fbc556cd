#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <utility>
#include <vector>

#include "seqdef/data.hpp"
#include "seqdef/defense.hpp"
#include "seqdef/model.hpp"

namespace seqdef {

using Ngram = std::vector<int32_t>;

// Sample-presence n-gram counts: a sample contributes at most 1 to each
// distinct n-gram it contains, no matter how often the gram repeats inside
// it. Grams containing the padding index are never counted.
std::map<Ngram, int64_t> count_ngrams(const std::vector<TokenSeq>& corpus, int32_t n);

struct NgramStats {
  int32_t n = 5;
  // gram -> (adversarial sample count, benign training sample count)
  std::map<Ngram, std::pair<int64_t, int64_t>> counts;
  int64_t adv_samples = 0;
  int64_t benign_samples = 0;
};

NgramStats build_ngram_stats(const std::vector<TokenSeq>& x_adv,
                             const std::vector<TokenSeq>& x_benign_train, int32_t n);

// adv / (adv + benign); 0 for grams never seen in either corpus.
double adv_ngram_probability(const NgramStats& stats, const Ngram& gram);

struct SignatureConfig {
  int32_t n = 5;
  double threshold_p = 1.0;    // membership: p_adv >= threshold_p
  int32_t threshold_sigs = 1;  // detection: distinct matches >= threshold_sigs
};

struct SignatureSet {
  SignatureConfig config;
  std::map<Ngram, double> signatures;  // gram -> its p_adv at build time
};

SignatureSet build_signature_set(const std::vector<TokenSeq>& x_adv,
                                 const std::vector<TokenSeq>& x_benign_train,
                                 const SignatureConfig& config);

struct SignatureVerdict {
  bool adversarial = false;
  std::vector<Ngram> matched;
};

// Scans the full unpadded sequence; adversarial iff the number of distinct
// matched signatures reaches the detection threshold.
SignatureVerdict detect(const SignatureSet& set, const TokenSeq& seq);

void save_signatures(const SignatureSet& set, const Vocabulary& vocab,
                     const std::filesystem::path& path);
SignatureSet load_signatures(const std::filesystem::path& path, const Vocabulary& vocab);

// Full defended system: signature detector in front of the base classifier.
class SignatureDefense : public Defense {
 public:
  SignatureDefense(const RnnClassifier& classifier, const SignatureSet& set)
      : classifier_(&classifier), set_(&set) {}
  std::string id() const override { return "signatures"; }
  DefenseDecision decide(const TokenSeq& seq) const override;

 private:
  const RnnClassifier* classifier_;
  const SignatureSet* set_;
};

}  // namespace seqdef
