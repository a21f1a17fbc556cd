#include "seqdef/embed.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

#include "seqdef/rng.hpp"

namespace seqdef {

namespace {

constexpr uint64_t kInitSalt = 0x9107e;
constexpr uint64_t kPassSalt = 0xada9;

}  // namespace

double CooccurrenceCounts::at(int32_t i, int32_t j) const {
  auto it = pairs.find({i, j});
  return it == pairs.end() ? 0.0 : it->second;
}

Eigen::RowVectorXd EmbeddingMatrix::row(int32_t token) const {
  if (token < 1 || token > vocab_size()) {
    throw std::out_of_range("embedding row: token index " + std::to_string(token) +
                            " outside 1.." + std::to_string(vocab_size()));
  }
  return vectors.row(token - 1);
}

CooccurrenceCounts build_cooccurrence(const Dataset& data, int32_t vocab_size, int32_t radius) {
  if (vocab_size < 1) throw std::invalid_argument("build_cooccurrence: vocab_size must be >= 1");
  if (radius < 1) throw std::invalid_argument("build_cooccurrence: radius must be >= 1");

  CooccurrenceCounts counts;
  counts.vocab_size = vocab_size;
  counts.radius = radius;
  for (const auto& sample : data.samples) {
    const auto& toks = sample.seq.tokens;
    const auto len = static_cast<int64_t>(toks.size());
    for (int64_t p = 0; p < len; ++p) {
      const int32_t a = toks[p];
      if (a < 0 || a > vocab_size) {
        throw std::invalid_argument("build_cooccurrence: sample " + sample.id +
                                    " has token " + std::to_string(a) +
                                    " outside vocabulary");
      }
      if (a == kPadIndex) continue;
      ++counts.corpus_tokens;
      const int64_t hi = std::min(len - 1, p + radius);
      for (int64_t q = p + 1; q <= hi; ++q) {
        const int32_t b = toks[q];
        if (b < 0 || b > vocab_size) {
          throw std::invalid_argument("build_cooccurrence: sample " + sample.id +
                                      " has token " + std::to_string(b) +
                                      " outside vocabulary");
        }
        if (b == kPadIndex) continue;
        const double w = 1.0 / static_cast<double>(q - p);
        counts.pairs[{a, b}] += w;
        counts.pairs[{b, a}] += w;
      }
    }
  }
  return counts;
}

GloveResult train_embeddings(const CooccurrenceCounts& counts, const GloveConfig& config) {
  if (config.dim < 1) throw std::invalid_argument("train_embeddings: dim must be >= 1");
  if (config.iterations < 0) throw std::invalid_argument("train_embeddings: negative iterations");
  if (counts.empty()) throw std::invalid_argument("train_embeddings: empty co-occurrence counts");
  const int32_t vocab = counts.vocab_size;
  const int32_t d = config.dim;

  Eigen::MatrixXd w(vocab, d), wt(vocab, d);
  Eigen::VectorXd b(vocab), bt(vocab);
  Rng init_rng(mix_seed(config.seed, kInitSalt));
  auto draw = [&] { return (init_rng.unit() - 0.5) / static_cast<double>(d); };
  for (int32_t r = 0; r < vocab; ++r) {
    for (int32_t c = 0; c < d; ++c) w(r, c) = draw();
  }
  for (int32_t r = 0; r < vocab; ++r) {
    for (int32_t c = 0; c < d; ++c) wt(r, c) = draw();
  }
  for (int32_t r = 0; r < vocab; ++r) b(r) = draw();
  for (int32_t r = 0; r < vocab; ++r) bt(r) = draw();

  Eigen::MatrixXd acc_w = Eigen::MatrixXd::Ones(vocab, d);
  Eigen::MatrixXd acc_wt = Eigen::MatrixXd::Ones(vocab, d);
  Eigen::VectorXd acc_b = Eigen::VectorXd::Ones(vocab);
  Eigen::VectorXd acc_bt = Eigen::VectorXd::Ones(vocab);

  struct Entry {
    int32_t i, j;
    double x, fw, logx;
  };
  std::vector<Entry> entries;
  entries.reserve(counts.pairs.size());
  for (const auto& [key, x] : counts.pairs) {
    if (x <= 0.0) continue;
    Entry e;
    e.i = key.first - 1;
    e.j = key.second - 1;
    e.x = x;
    e.fw = std::min(1.0, std::pow(x / config.x_max, config.alpha));
    e.logx = std::log(x);
    entries.push_back(e);
  }
  if (entries.empty()) throw std::invalid_argument("train_embeddings: empty co-occurrence counts");

  auto objective = [&] {
    double total = 0.0;
    for (const auto& e : entries) {
      const double diff = w.row(e.i).dot(wt.row(e.j)) + b(e.i) + bt(e.j) - e.logx;
      total += e.fw * diff * diff;
    }
    return total;
  };

  GloveResult result;
  result.objective_history.push_back(objective());

  std::vector<size_t> order(entries.size());
  std::iota(order.begin(), order.end(), size_t{0});
  const double lr = config.learning_rate;
  for (int32_t pass = 0; pass < config.iterations; ++pass) {
    Rng pass_rng(mix_seed(config.seed, kPassSalt, static_cast<uint64_t>(pass)));
    pass_rng.shuffle(order);
    for (size_t idx : order) {
      const Entry& e = entries[idx];
      const Eigen::RowVectorXd wi = w.row(e.i);
      const Eigen::RowVectorXd wtj = wt.row(e.j);
      const double diff = wi.dot(wtj) + b(e.i) + bt(e.j) - e.logx;
      const double g = 2.0 * e.fw * diff;

      const Eigen::RowVectorXd gw = g * wtj;
      const Eigen::RowVectorXd gwt = g * wi;
      acc_w.row(e.i) += gw.cwiseProduct(gw);
      acc_wt.row(e.j) += gwt.cwiseProduct(gwt);
      acc_b(e.i) += g * g;
      acc_bt(e.j) += g * g;
      w.row(e.i) -= lr * gw.cwiseQuotient(acc_w.row(e.i).cwiseSqrt());
      wt.row(e.j) -= lr * gwt.cwiseQuotient(acc_wt.row(e.j).cwiseSqrt());
      b(e.i) -= lr * g / std::sqrt(acc_b(e.i));
      bt(e.j) -= lr * g / std::sqrt(acc_bt(e.j));
    }
    result.objective_history.push_back(objective());
  }

  std::vector<bool> seen(static_cast<size_t>(vocab), false);
  for (const auto& e : entries) {
    seen[static_cast<size_t>(e.i)] = true;
    seen[static_cast<size_t>(e.j)] = true;
  }
  result.embedding.vectors = w + wt;
  for (int32_t t = 0; t < vocab; ++t) {
    if (!seen[static_cast<size_t>(t)]) {
      result.embedding.vectors.row(t).setZero();
      result.embedding.unseen_tokens.push_back(t + 1);
    }
  }
  return result;
}

double pairwise_distance(const EmbeddingMatrix& embedding, int32_t i, int32_t j) {
  return (embedding.row(i) - embedding.row(j)).norm();
}

int32_t nearest_token(const EmbeddingMatrix& embedding, const Eigen::RowVectorXd& point) {
  if (embedding.vocab_size() == 0) throw std::invalid_argument("nearest_token: empty embedding");
  if (point.cols() != embedding.dim()) {
    throw std::invalid_argument("nearest_token: point dimension mismatch");
  }
  int32_t best = 1;
  double best_d = (embedding.vectors.row(0) - point).squaredNorm();
  for (int32_t t = 2; t <= embedding.vocab_size(); ++t) {
    const double d = (embedding.vectors.row(t - 1) - point).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = t;
    }
  }
  return best;
}

void save_embedding(const EmbeddingMatrix& embedding, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "seqdef-embedding 1\n";
  out << embedding.vocab_size() << ' ' << embedding.dim() << '\n';
  char buf[32];
  for (int32_t r = 0; r < embedding.vocab_size(); ++r) {
    for (int32_t c = 0; c < embedding.dim(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", embedding.vectors(r, c));
      out << (c ? " " : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("error writing " + path.string());
}

EmbeddingMatrix load_embedding(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "seqdef-embedding" || version != 1) {
    throw std::runtime_error(path.string() + ": not an embedding file");
  }
  int32_t vocab = 0, d = 0;
  if (!(in >> vocab >> d) || vocab < 1 || d < 1) {
    throw std::runtime_error(path.string() + ": bad embedding header");
  }
  EmbeddingMatrix embedding;
  embedding.vectors.resize(vocab, d);
  for (int32_t r = 0; r < vocab; ++r) {
    for (int32_t c = 0; c < d; ++c) {
      if (!(in >> embedding.vectors(r, c))) {
        throw std::runtime_error(path.string() + ": truncated embedding matrix");
      }
    }
  }
  for (int32_t r = 0; r < vocab; ++r) {
    if (embedding.vectors.row(r).isZero(0.0)) embedding.unseen_tokens.push_back(r + 1);
  }
  return embedding;
}

}  // namespace seqdef
