#include "seqdef/proximity.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "seqdef/rng.hpp"

namespace seqdef {

namespace {

void check_window_shape(const NeighborIndex& index, const RnnClassifier& classifier) {
  if (classifier.config().window != index.window ||
      classifier.config().vocab_width != index.vocab_width) {
    throw std::invalid_argument("classifier and neighbor index shapes do not match");
  }
}

// Exact squared Euclidean distance between two one-hot window encodings:
// twice the number of positions whose tokens differ.
double onehot_distance_sq(std::span<const int32_t> a, std::span<const int32_t> b) {
  int64_t differing = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) ++differing;
  }
  return 2.0 * static_cast<double>(differing);
}

const std::vector<double>* table_row(const GeneratorModel& generator,
                                     const std::vector<int32_t>& context) {
  const auto it = generator.tables.find(context);
  return it == generator.tables.end() ? nullptr : &it->second;
}

}  // namespace

std::vector<int32_t> NeighborIndex::window_tokens(int64_t row) const {
  if (row < 0 || row >= vectors.rows()) {
    throw std::out_of_range("neighbor index row out of range");
  }
  std::vector<int32_t> tokens(static_cast<size_t>(window));
  for (int32_t pos = 0; pos < window; ++pos) {
    int32_t tok = -1;
    for (int32_t c = 0; c < vocab_width; ++c) {
      if (vectors(row, static_cast<int64_t>(pos) * vocab_width + c) == 1.0) {
        tok = c;
        break;
      }
    }
    if (tok < 0) throw std::runtime_error("neighbor index row is not one-hot");
    tokens[static_cast<size_t>(pos)] = tok;
  }
  return tokens;
}

NeighborIndex build_index(const ModelConfig& config, const Dataset& train) {
  if (train.samples.empty()) throw std::invalid_argument("build_index: empty training set");
  if (config.window < 1 || config.vocab_width < 2) {
    throw std::invalid_argument("build_index: invalid classifier shape");
  }
  NeighborIndex index;
  index.window = config.window;
  index.vocab_width = config.vocab_width;

  int64_t total = 0;
  for (const auto& sample : train.samples) {
    total += static_cast<int64_t>(split_windows(sample.seq, config.window).size());
  }
  index.vectors = Eigen::MatrixXd::Zero(total, static_cast<int64_t>(config.window) *
                                                   config.vocab_width);
  index.sample_ids.reserve(static_cast<size_t>(total));
  index.labels.reserve(static_cast<size_t>(total));

  int64_t row = 0;
  for (const auto& sample : train.samples) {
    for (const auto& window : split_windows(sample.seq, config.window)) {
      for (int32_t pos = 0; pos < config.window; ++pos) {
        const int32_t tok = window[static_cast<size_t>(pos)];
        if (tok < 0 || tok >= config.vocab_width) {
          throw std::invalid_argument("build_index: token outside vocabulary in sample " +
                                      sample.id);
        }
        index.vectors(row, static_cast<int64_t>(pos) * config.vocab_width + tok) = 1.0;
      }
      index.sample_ids.push_back(sample.id);
      index.labels.push_back(sample.label);
      ++row;
    }
  }
  return index;
}

NeighborHit nearest_window(const NeighborIndex& index, std::span<const int32_t> window) {
  if (index.rows() == 0) throw std::invalid_argument("nearest_window: empty index");
  if (static_cast<int32_t>(window.size()) != index.window) {
    throw std::invalid_argument("nearest_window: window length mismatch");
  }
  // dot(query, row) counts matching positions, so the nearest row maximizes
  // it; sums of ones are exact, which keeps tie detection exact too.
  Eigen::VectorXd dots = Eigen::VectorXd::Zero(index.rows());
  for (int32_t pos = 0; pos < index.window; ++pos) {
    const int32_t tok = window[static_cast<size_t>(pos)];
    if (tok < 0 || tok >= index.vocab_width) {
      throw std::invalid_argument("nearest_window: token outside vocabulary");
    }
    dots += index.vectors.col(static_cast<int64_t>(pos) * index.vocab_width + tok);
  }
  int64_t best = 0;
  for (int64_t r = 1; r < index.rows(); ++r) {
    if (dots(r) > dots(best)) best = r;
  }
  NeighborHit hit;
  hit.row = best;
  hit.distance_sq = 2.0 * (static_cast<double>(index.window) - dots(best));
  return hit;
}

NeighborDecision nearest_neighbor_defend(const NeighborIndex& index,
                                         const RnnClassifier& classifier, const TokenSeq& seq) {
  check_window_shape(index, classifier);
  NeighborDecision decision;
  size_t decisive = 0;
  std::vector<int64_t> rows;
  for (const auto& window : split_windows(seq, index.window)) {
    const NeighborHit hit = nearest_window(index, window);
    NeighborWindowChoice choice;
    choice.row = hit.row;
    choice.distance_sq = hit.distance_sq;
    choice.confidence = classifier.window_confidence(index.window_tokens(hit.row));
    if (decision.windows.empty() || choice.confidence > decision.confidence) {
      decision.confidence = choice.confidence;
      decisive = decision.windows.size();
    }
    decision.windows.push_back(choice);
    rows.push_back(hit.row);
  }
  decision.label = decision.confidence >= 0.5 ? Label::kMalicious : Label::kBenign;
  decision.neighbor_id = index.sample_ids[static_cast<size_t>(rows[decisive])];
  return decision;
}

GeneratorModel train_generator(const std::vector<TokenSeq>& samples, int32_t vocab_size,
                               Label klass, int32_t order, uint64_t seed, double smoothing) {
  if (samples.empty()) throw std::invalid_argument("train_generator: empty class corpus");
  if (vocab_size < 1) throw std::invalid_argument("train_generator: empty vocabulary");
  if (order < 1) throw std::invalid_argument("train_generator: order must be >= 1");
  if (smoothing < 0.0) throw std::invalid_argument("train_generator: negative smoothing");

  GeneratorModel generator;
  generator.klass = klass;
  generator.order = order;
  generator.smoothing = smoothing;
  generator.seed = seed;
  generator.vocab_size = vocab_size;

  std::map<std::vector<int32_t>, std::vector<int64_t>> counts;
  for (const auto& seq : samples) {
    const size_t len = seq.real_length();
    for (size_t i = 0; i < len; ++i) {
      const int32_t tok = seq.tokens[i];
      if (tok < 1 || tok > vocab_size) {
        throw std::invalid_argument("train_generator: token outside vocabulary");
      }
      const size_t ctx_len = std::min<size_t>(static_cast<size_t>(order), i);
      const std::vector<int32_t> ctx(seq.tokens.begin() + static_cast<std::ptrdiff_t>(i - ctx_len),
                                     seq.tokens.begin() + static_cast<std::ptrdiff_t>(i));
      auto [it, inserted] = counts.try_emplace(ctx, static_cast<size_t>(vocab_size), 0);
      it->second[static_cast<size_t>(tok) - 1] += 1;
    }
  }

  for (const auto& [ctx, row] : counts) {
    int64_t total = 0;
    for (int64_t c : row) total += c;
    std::vector<double> probs(static_cast<size_t>(vocab_size));
    const double denom = static_cast<double>(total) + smoothing * vocab_size;
    for (size_t t = 0; t < probs.size(); ++t) {
      probs[t] = (static_cast<double>(row[t]) + smoothing) / denom;
    }
    generator.tables.emplace(ctx, std::move(probs));
  }
  return generator;
}

std::vector<TokenSeq> generate_sequences(const GeneratorModel& generator, int32_t count,
                                         int32_t length) {
  if (count < 0) throw std::invalid_argument("generate_sequences: negative count");
  if (length < 1) throw std::invalid_argument("generate_sequences: length must be >= 1");
  if (generator.vocab_size < 1) throw std::invalid_argument("generate_sequences: untrained model");
  const std::vector<double> uniform(static_cast<size_t>(generator.vocab_size),
                                    1.0 / generator.vocab_size);
  std::vector<TokenSeq> out;
  out.reserve(static_cast<size_t>(count));
  for (int32_t idx = 0; idx < count; ++idx) {
    Rng rng(mix_seed(generator.seed, 0x6e19, static_cast<uint64_t>(idx)));
    std::vector<int32_t> tokens;
    tokens.reserve(static_cast<size_t>(length));
    for (int32_t i = 0; i < length; ++i) {
      const size_t ctx_len =
          std::min<size_t>(static_cast<size_t>(generator.order), tokens.size());
      const std::vector<int32_t> ctx(tokens.end() - static_cast<std::ptrdiff_t>(ctx_len),
                                     tokens.end());
      const std::vector<double>* probs = table_row(generator, ctx);
      const size_t drawn = rng.weighted(probs != nullptr ? *probs : uniform);
      tokens.push_back(static_cast<int32_t>(drawn) + 1);
    }
    out.emplace_back(std::move(tokens));
  }
  return out;
}

void save_generator(const GeneratorModel& generator, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "seqdef-generator 1\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", generator.smoothing);
  out << label_name(generator.klass) << ' ' << generator.order << ' ' << buf << ' '
      << generator.seed << ' ' << generator.vocab_size << ' ' << generator.tables.size() << '\n';
  for (const auto& [ctx, probs] : generator.tables) {
    out << ctx.size();
    for (int32_t t : ctx) out << ' ' << t;
    for (double p : probs) {
      std::snprintf(buf, sizeof buf, "%.17g", p);
      out << ' ' << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

GeneratorModel load_generator(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "seqdef-generator" || version != 1) {
    throw std::runtime_error("not a generator file: " + path.string());
  }
  GeneratorModel generator;
  std::string klass;
  size_t rows = 0;
  if (!(in >> klass >> generator.order >> generator.smoothing >> generator.seed >>
        generator.vocab_size >> rows)) {
    throw std::runtime_error("truncated generator header: " + path.string());
  }
  generator.klass = parse_label(klass);
  if (generator.order < 1 || generator.vocab_size < 1 || generator.smoothing < 0.0) {
    throw std::runtime_error("invalid generator header: " + path.string());
  }
  for (size_t r = 0; r < rows; ++r) {
    size_t ctx_len = 0;
    if (!(in >> ctx_len) || ctx_len > static_cast<size_t>(generator.order)) {
      throw std::runtime_error("invalid generator row in " + path.string());
    }
    std::vector<int32_t> ctx(ctx_len);
    for (auto& t : ctx) {
      if (!(in >> t) || t < 1 || t > generator.vocab_size) {
        throw std::runtime_error("invalid generator context in " + path.string());
      }
    }
    std::vector<double> probs(static_cast<size_t>(generator.vocab_size));
    double sum = 0.0;
    for (auto& p : probs) {
      if (!(in >> p) || p < 0.0) {
        throw std::runtime_error("invalid generator probability in " + path.string());
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw std::runtime_error("generator row does not sum to one in " + path.string());
    }
    if (!generator.tables.emplace(std::move(ctx), std::move(probs)).second) {
      throw std::runtime_error("duplicate generator context in " + path.string());
    }
  }
  return generator;
}

DefGenPool make_defgen_pool(const GeneratorModel& benign, const GeneratorModel& malicious,
                            const DefGenConfig& config, int32_t length) {
  if (config.m_generated < 1) throw std::invalid_argument("defgen: m_generated must be >= 1");
  if (benign.vocab_size != malicious.vocab_size) {
    throw std::invalid_argument("defgen: generators disagree on vocabulary size");
  }
  DefGenPool pool;
  for (auto& seq : generate_sequences(benign, config.m_generated, length)) {
    pool.sequences.push_back(std::move(seq));
    pool.labels.push_back(Label::kBenign);
  }
  for (auto& seq : generate_sequences(malicious, config.m_generated, length)) {
    pool.sequences.push_back(std::move(seq));
    pool.labels.push_back(Label::kMalicious);
  }
  return pool;
}

DefGenDecision defgen_defend_with_pool(const DefGenPool& pool, const RnnClassifier& classifier,
                                       const TokenSeq& seq) {
  if (pool.sequences.empty()) throw std::invalid_argument("defgen: empty reference pool");
  const int32_t n = classifier.config().window;
  for (const auto& ref : pool.sequences) {
    if (static_cast<int32_t>(ref.size()) != n) {
      throw std::invalid_argument("defgen: pool sequence length does not match the window");
    }
  }
  DefGenDecision decision;
  for (const auto& window : split_windows(seq, n)) {
    size_t best = 0;
    double best_dist = onehot_distance_sq(window, pool.sequences[0].tokens);
    for (size_t p = 1; p < pool.sequences.size(); ++p) {
      const double d = onehot_distance_sq(window, pool.sequences[p].tokens);
      if (d < best_dist) {
        best = p;
        best_dist = d;
      }
    }
    DefGenWindowChoice choice;
    choice.pool_index = best;
    choice.distance_sq = best_dist;
    choice.confidence = classifier.window_confidence(pool.sequences[best].tokens);
    choice.pool_label = pool.labels[best];
    decision.confidence = std::max(decision.confidence, choice.confidence);
    decision.windows.push_back(choice);
  }
  decision.label = decision.confidence >= 0.5 ? Label::kMalicious : Label::kBenign;
  return decision;
}

DefGenDecision defgen_defend(const GeneratorModel& benign, const GeneratorModel& malicious,
                             const RnnClassifier& classifier, const DefGenConfig& config,
                             const TokenSeq& seq) {
  if (benign.vocab_size + 1 != classifier.config().vocab_width) {
    throw std::invalid_argument("defgen: generator vocabulary does not match the classifier");
  }
  const DefGenPool pool =
      make_defgen_pool(benign, malicious, config, classifier.config().window);
  return defgen_defend_with_pool(pool, classifier, seq);
}

DefenseDecision NeighborDefense::decide(const TokenSeq& seq) const {
  const NeighborDecision d = nearest_neighbor_defend(*index_, *classifier_, seq);
  DefenseDecision out;
  out.label = d.label;
  out.flagged = false;
  out.confidence = d.confidence;
  return out;
}

DefGenDefense::DefGenDefense(const RnnClassifier& classifier, const GeneratorModel& benign,
                             const GeneratorModel& malicious, const DefGenConfig& config)
    : classifier_(&classifier) {
  if (benign.vocab_size + 1 != classifier.config().vocab_width) {
    throw std::invalid_argument("defgen: generator vocabulary does not match the classifier");
  }
  pool_ = make_defgen_pool(benign, malicious, config, classifier.config().window);
}

DefenseDecision DefGenDefense::decide(const TokenSeq& seq) const {
  const DefGenDecision d = defgen_defend_with_pool(pool_, *classifier_, seq);
  DefenseDecision out;
  out.label = d.label;
  out.flagged = false;
  out.confidence = d.confidence;
  return out;
}

}  // namespace seqdef
