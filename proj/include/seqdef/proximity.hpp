#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "seqdef/data.hpp"
#include "seqdef/defense.hpp"
#include "seqdef/model.hpp"

namespace seqdef {

// Flattened one-hot training windows (row dimension window * vocab_width)
// with their source sample ids and labels, queried by Euclidean distance.
struct NeighborIndex {
  Eigen::MatrixXd vectors;  // one row per training window, exact one-hots
  std::vector<std::string> sample_ids;
  std::vector<Label> labels;
  int32_t window = 0;
  int32_t vocab_width = 0;
  std::string metric = "euclidean";

  int64_t rows() const { return vectors.rows(); }
  // Decodes a stored vector back to its window tokens.
  std::vector<int32_t> window_tokens(int64_t row) const;
};

NeighborIndex build_index(const ModelConfig& config, const Dataset& train);

struct NeighborHit {
  int64_t row = -1;
  double distance_sq = 0.0;
};

// Euclidean-nearest stored window; ties resolve to the lowest row.
NeighborHit nearest_window(const NeighborIndex& index, std::span<const int32_t> window);

struct NeighborWindowChoice {
  int64_t row = -1;
  double distance_sq = 0.0;
  double confidence = 0.0;
};

struct NeighborDecision {
  Label label = Label::kBenign;
  double confidence = 0.0;  // highest neighbor-window confidence
  std::string neighbor_id;  // source sample of the decisive window
  std::vector<NeighborWindowChoice> windows;
};

// Scores each input window by the classifier's confidence on its nearest
// training window; the sequence is malicious iff any window's neighbor
// confidence reaches 0.5.
NeighborDecision nearest_neighbor_defend(const NeighborIndex& index,
                                         const RnnClassifier& classifier, const TokenSeq& seq);

// Order-k autoregressive next-token model: MLE tables with additive
// smoothing over the non-padding vocabulary. The context->distribution table
// holds every observed context of length 0..order (the empty context is the
// start distribution); unobserved contexts fall back to uniform.
struct GeneratorModel {
  Label klass = Label::kBenign;
  int32_t order = 2;
  double smoothing = 0.1;
  uint64_t seed = 0;
  int32_t vocab_size = 0;
  std::map<std::vector<int32_t>, std::vector<double>> tables;  // probs for tokens 1..V
};

GeneratorModel train_generator(const std::vector<TokenSeq>& samples, int32_t vocab_size,
                               Label klass, int32_t order, uint64_t seed,
                               double smoothing = 0.1);

// `count` sequences of exactly `length` tokens, sampled autoregressively.
// Sequence i is drawn from its own stream keyed by (seed, i), so extending
// the count keeps earlier sequences identical.
std::vector<TokenSeq> generate_sequences(const GeneratorModel& generator, int32_t count,
                                         int32_t length);

void save_generator(const GeneratorModel& generator, const std::filesystem::path& path);
GeneratorModel load_generator(const std::filesystem::path& path);

struct DefGenConfig {
  int32_t m_generated = 50;  // per class
  std::string distance = "euclidean";
};

struct DefGenWindowChoice {
  size_t pool_index = 0;
  double distance_sq = 0.0;
  double confidence = 0.0;
  Label pool_label = Label::kBenign;
};

struct DefGenDecision {
  Label label = Label::kBenign;
  double confidence = 0.0;
  std::vector<DefGenWindowChoice> windows;
};

// The generated reference pool: m benign then m malicious window-length
// sequences, in generation order.
struct DefGenPool {
  std::vector<TokenSeq> sequences;
  std::vector<Label> labels;
};

DefGenPool make_defgen_pool(const GeneratorModel& benign, const GeneratorModel& malicious,
                            const DefGenConfig& config, int32_t length);

// Per input window, substitutes the Euclidean-nearest pool sequence (ties to
// the lowest pool index) and returns the classifier's confidence on it; the
// any-window-malicious rule aggregates.
DefGenDecision defgen_defend_with_pool(const DefGenPool& pool, const RnnClassifier& classifier,
                                       const TokenSeq& seq);

DefGenDecision defgen_defend(const GeneratorModel& benign, const GeneratorModel& malicious,
                             const RnnClassifier& classifier, const DefGenConfig& config,
                             const TokenSeq& seq);

class NeighborDefense : public Defense {
 public:
  NeighborDefense(const RnnClassifier& classifier, const NeighborIndex& index)
      : classifier_(&classifier), index_(&index) {}
  std::string id() const override { return "neighbor"; }
  DefenseDecision decide(const TokenSeq& seq) const override;

 private:
  const RnnClassifier* classifier_;
  const NeighborIndex* index_;
};

class DefGenDefense : public Defense {
 public:
  // Generates the 2m reference pool once up front.
  DefGenDefense(const RnnClassifier& classifier, const GeneratorModel& benign,
                const GeneratorModel& malicious, const DefGenConfig& config);
  std::string id() const override { return "defgen"; }
  DefenseDecision decide(const TokenSeq& seq) const override;
  const DefGenPool& pool() const { return pool_; }

 private:
  const RnnClassifier* classifier_;
  DefGenPool pool_;
};

}  // namespace seqdef
