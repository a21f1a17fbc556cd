#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <utility>
#include <vector>

#include "seqdef/data.hpp"

namespace seqdef {

// Symmetric weighted co-occurrence counts over a token corpus. Both ordered
// directions of every pair are stored, so iteration visits (i,j) and (j,i).
struct CooccurrenceCounts {
  int32_t vocab_size = 0;
  int32_t radius = 0;
  int64_t corpus_tokens = 0;
  std::map<std::pair<int32_t, int32_t>, double> pairs;

  double at(int32_t i, int32_t j) const;
  bool empty() const { return pairs.empty(); }
};

// Dense token embeddings, one row per vocabulary token (row t-1 holds token
// t; padding has no row). Tokens that never co-occurred with anything keep a
// zero row and are listed in unseen_tokens.
struct EmbeddingMatrix {
  Eigen::MatrixXd vectors;
  std::vector<int32_t> unseen_tokens;

  int32_t vocab_size() const { return static_cast<int32_t>(vectors.rows()); }
  int32_t dim() const { return static_cast<int32_t>(vectors.cols()); }
  Eigen::RowVectorXd row(int32_t token) const;
};

struct GloveConfig {
  int32_t dim = 32;
  int32_t iterations = 30;
  double learning_rate = 0.05;
  double x_max = 100.0;
  double alpha = 0.75;
  uint64_t seed = 0;
};

struct GloveResult {
  EmbeddingMatrix embedding;
  // objective_history[0] is the objective at initialization, followed by one
  // entry per full pass over the co-occurrence entries.
  std::vector<double> objective_history;
};

// Accumulates weighted counts: each ordered pair within `radius` positions
// adds 1/distance to both (i,j) and (j,i). Padding tokens contribute nothing.
CooccurrenceCounts build_cooccurrence(const Dataset& data, int32_t vocab_size, int32_t radius);

// Weighted least squares on log co-occurrence with AdaGrad updates. The final
// embedding is the sum of the word and context vectors.
GloveResult train_embeddings(const CooccurrenceCounts& counts, const GloveConfig& config);

double pairwise_distance(const EmbeddingMatrix& embedding, int32_t i, int32_t j);

// Token whose embedding is Euclidean-closest to `point`; ties break toward
// the lowest token index.
int32_t nearest_token(const EmbeddingMatrix& embedding, const Eigen::RowVectorXd& point);

void save_embedding(const EmbeddingMatrix& embedding, const std::filesystem::path& path);
EmbeddingMatrix load_embedding(const std::filesystem::path& path);

}  // namespace seqdef
