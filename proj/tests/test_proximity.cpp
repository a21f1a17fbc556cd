#include "seqdef/proximity.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "seqdef/attack.hpp"
#include "seqdef/rng.hpp"

using namespace seqdef;
namespace fs = std::filesystem;

namespace {

constexpr int32_t kCold = 1;
constexpr int32_t kHot = 4;
constexpr int32_t kWidth = 7;
constexpr int32_t kWindow = 10;

// Same order-free rig as the attack tests: a window is malicious iff it has
// a hot token and no cold token, and the gradient argmin is always cold.
RnnClassifier rigged_model() {
  ModelConfig cfg;
  cfg.cell = CellKind::kSimpleRnn;
  cfg.hidden_units = 2;
  cfg.window = kWindow;
  cfg.vocab_width = kWidth;
  cfg.dropout = 0.0;
  cfg.seed = 1;
  auto model = RnnClassifier::init(cfg);
  auto& W = model.tensor("layer0.fwd.W");
  W.setZero();
  W(0, kHot) = 8.0;
  W(1, kCold) = -12.0;
  auto& U = model.tensor("layer0.fwd.U");
  U.setZero();
  U(0, 0) = 5.0;
  U(1, 1) = 5.0;
  model.tensor("layer0.fwd.b") << 0.0, 2.5;
  model.tensor("dense.w") << 10.0, 10.0;
  model.tensor("dense.b") << -13.0;
  return model;
}

Dataset random_corpus(int samples, uint64_t seed, int32_t len_min = 1, int32_t len_max = 25) {
  Rng rng(seed);
  Dataset out;
  for (int k = 0; k < samples; ++k) {
    const auto len = static_cast<size_t>(rng.int_in(len_min, len_max));
    std::vector<int32_t> toks(len);
    for (auto& t : toks) t = static_cast<int32_t>(rng.int_in(1, 6));
    const Label label = rng.bernoulli(0.5) ? Label::kMalicious : Label::kBenign;
    out.samples.push_back({"s" + std::to_string(k), label, TokenSeq(std::move(toks))});
  }
  return out;
}

int64_t hamming(std::span<const int32_t> a, std::span<const int32_t> b) {
  int64_t d = 0;
  for (size_t i = 0; i < a.size(); ++i) d += a[i] != b[i] ? 1 : 0;
  return d;
}

std::vector<TokenSeq> repeated(const std::vector<int32_t>& tokens, int copies) {
  return std::vector<TokenSeq>(static_cast<size_t>(copies), TokenSeq(tokens));
}

fs::path temp_file(const char* name) {
  return fs::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("the index stores one row per training window") {
  ModelConfig cfg;
  cfg.window = kWindow;
  cfg.vocab_width = kWidth;
  Dataset train;
  Rng rng(3);
  for (size_t len : {11u, 20u, 15u}) {
    std::vector<int32_t> toks(len);
    for (auto& t : toks) t = static_cast<int32_t>(rng.int_in(1, 6));
    train.samples.push_back({"s" + std::to_string(len), Label::kBenign, TokenSeq(std::move(toks))});
  }
  const auto index = build_index(cfg, train);
  CHECK(index.rows() == 6);
  CHECK(index.vectors.cols() == kWindow * kWidth);
  CHECK(index.sample_ids.size() == 6);
  CHECK(index.labels.size() == 6);
  CHECK(index.sample_ids[0] == "s11");
  CHECK(index.sample_ids[1] == "s11");
  CHECK(index.sample_ids[2] == "s20");

  CHECK_THROWS_AS(build_index(cfg, Dataset{}), std::invalid_argument);
  Dataset bad;
  bad.samples.push_back({"x", Label::kBenign, TokenSeq({9})});
  CHECK_THROWS_AS(build_index(cfg, bad), std::invalid_argument);
}

TEST_CASE("stored vectors decode back to their window tokens") {
  ModelConfig cfg;
  cfg.window = kWindow;
  cfg.vocab_width = kWidth;
  const auto train = random_corpus(10, 5);
  const auto index = build_index(cfg, train);
  int64_t row = 0;
  for (const auto& sample : train.samples) {
    for (const auto& window : split_windows(sample.seq, kWindow)) {
      CHECK(index.window_tokens(row) == window);
      ++row;
    }
  }
  CHECK(row == index.rows());
  CHECK_THROWS_AS(index.window_tokens(row), std::out_of_range);
  CHECK_THROWS_AS(index.window_tokens(-1), std::out_of_range);
}

TEST_CASE("squared Euclidean distance is twice the Hamming distance") {
  ModelConfig cfg;
  cfg.window = kWindow;
  cfg.vocab_width = kWidth;
  const auto train = random_corpus(20, 7);
  const auto index = build_index(cfg, train);
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = static_cast<int64_t>(rng.below(static_cast<uint64_t>(index.rows())));
    const auto b = static_cast<int64_t>(rng.below(static_cast<uint64_t>(index.rows())));
    const double dist = (index.vectors.row(a) - index.vectors.row(b)).squaredNorm();
    const auto ta = index.window_tokens(a);
    const auto tb = index.window_tokens(b);
    CHECK(dist == 2.0 * static_cast<double>(hamming(ta, tb)));
  }
}

TEST_CASE("a stored window is its own nearest neighbor, ties to the lowest row") {
  ModelConfig cfg;
  cfg.window = 4;
  cfg.vocab_width = kWidth;
  Dataset train;
  train.samples.push_back({"a", Label::kBenign, TokenSeq({1, 2, 3, 4})});
  train.samples.push_back({"b", Label::kBenign, TokenSeq({5, 6, 5, 6})});
  train.samples.push_back({"c", Label::kBenign, TokenSeq({2, 2, 2, 2})});
  train.samples.push_back({"dup", Label::kBenign, TokenSeq({5, 6, 5, 6})});
  const auto index = build_index(cfg, train);

  const std::vector<int32_t> own = {2, 2, 2, 2};
  const auto hit = nearest_window(index, own);
  CHECK(hit.row == 2);
  CHECK(hit.distance_sq == 0.0);

  const std::vector<int32_t> dup = {5, 6, 5, 6};
  CHECK(nearest_window(index, dup).row == 1);  // rows 1 and 3 tie at distance 0

  CHECK_THROWS_AS(nearest_window(index, std::vector<int32_t>{1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(nearest_window(index, std::vector<int32_t>{1, 2, 3, 9}),
                  std::invalid_argument);
}

TEST_CASE("nearest lookup matches a brute-force linear scan") {
  ModelConfig cfg;
  cfg.window = kWindow;
  cfg.vocab_width = kWidth;
  const auto train = random_corpus(30, 13);
  const auto index = build_index(cfg, train);
  Rng rng(17);
  for (int q = 0; q < 200; ++q) {
    std::vector<int32_t> query(kWindow);
    const auto real = static_cast<size_t>(rng.int_in(1, kWindow));
    for (size_t i = 0; i < static_cast<size_t>(kWindow); ++i) {
      query[i] = i < real ? static_cast<int32_t>(rng.int_in(1, 6)) : kPadIndex;
    }
    Eigen::VectorXd flat = Eigen::VectorXd::Zero(index.vectors.cols());
    for (int32_t pos = 0; pos < kWindow; ++pos) {
      flat(static_cast<int64_t>(pos) * kWidth + query[static_cast<size_t>(pos)]) = 1.0;
    }
    int64_t want = 0;
    double want_dist = (index.vectors.row(0).transpose() - flat).squaredNorm();
    for (int64_t r = 1; r < index.rows(); ++r) {
      const double d = (index.vectors.row(r).transpose() - flat).squaredNorm();
      if (d < want_dist) {
        want = r;
        want_dist = d;
      }
    }
    const auto hit = nearest_window(index, query);
    CHECK(hit.row == want);
    CHECK(hit.distance_sq == want_dist);
  }
}

TEST_CASE("the defended decision follows the nearest neighbor's confidence") {
  const auto model = rigged_model();
  Dataset train;
  train.samples.push_back({"ben0", Label::kBenign, TokenSeq({2, 3, 2, 3, 2, 3, 2, 3, 2, 3})});
  train.samples.push_back({"ben1", Label::kBenign, TokenSeq({3, 3, 3, 3, 3, 2, 2, 2, 2, 2})});
  train.samples.push_back({"mal0", Label::kMalicious,
                           TokenSeq({kHot, 5, 5, 5, 5, 5, 5, 5, 5, 5})});
  const auto index = build_index(model.config(), train);

  // one token away from a benign row
  const auto benign_like = nearest_neighbor_defend(
      index, model, TokenSeq({2, 3, 2, 3, 2, 5, 2, 3, 2, 3}));
  CHECK(benign_like.label == Label::kBenign);
  CHECK(benign_like.neighbor_id == "ben0");
  CHECK(benign_like.windows.size() == 1);
  CHECK(benign_like.windows[0].row == 0);
  CHECK(benign_like.windows[0].distance_sq == 2.0);

  // one token away from the malicious row
  const auto mal_like = nearest_neighbor_defend(
      index, model, TokenSeq({kHot, 5, 5, 6, 5, 5, 5, 5, 5, 5}));
  CHECK(mal_like.label == Label::kMalicious);
  CHECK(mal_like.neighbor_id == "mal0");

  // two windows; only the second is near the malicious row
  std::vector<int32_t> both = {2, 3, 2, 3, 2, 3, 2, 3, 2, 3,
                               kHot, 5, 5, 5, 5, 5, 5, 5, 5, 6};
  const auto two = nearest_neighbor_defend(index, model, TokenSeq(std::move(both)));
  CHECK(two.label == Label::kMalicious);
  CHECK(two.windows.size() == 2);
  CHECK(two.windows[0].row == 0);
  CHECK(two.windows[1].row == 2);
  CHECK(two.neighbor_id == "mal0");

  ModelConfig other = model.config();
  other.window = 12;
  const auto wrong = RnnClassifier::init(other);
  CHECK_THROWS_AS(nearest_neighbor_defend(index, wrong, TokenSeq({1})), std::invalid_argument);
}

TEST_CASE("an attacked window stays nearest to its unperturbed origin") {
  const auto model = rigged_model();
  Dataset train;
  train.samples.push_back({"mal", Label::kMalicious,
                           TokenSeq({kHot, 5, 5, 5, 5, 5, 5, 5, 5, 5})});
  train.samples.push_back({"ben0", Label::kBenign, TokenSeq({2, 3, 2, 3, 2, 3, 2, 3, 2, 3})});
  train.samples.push_back({"ben1", Label::kBenign, TokenSeq({kCold, 2, 3, kCold, 2, 3, 2, 3, 2, 2})});
  const auto index = build_index(model.config(), train);

  const auto r = attack_sequence(model, model, train.samples[0].seq, [] {
    AttackConfig cfg;
    cfg.n = kWindow;
    cfg.seed = 9;
    return cfg;
  }());
  CHECK(r.evaded);  // the base classifier is fooled by the inserted cold
  CHECK(model.classify_sequence(r.perturbed).label == Label::kBenign);

  // the defense is not: the perturbed window is still Hamming-close to its origin
  const auto defended = nearest_neighbor_defend(index, model, r.perturbed);
  CHECK(defended.label == Label::kMalicious);
  CHECK(defended.windows[0].row == 0);
  CHECK(defended.neighbor_id == "mal");

  NeighborDefense defense(model, index);
  CHECK(defense.id() == "neighbor");
  const auto decision = defense.decide(r.perturbed);
  CHECK(decision.label == Label::kMalicious);
  CHECK_FALSE(decision.flagged);
  CHECK(decision.confidence == defended.confidence);
}

TEST_CASE("a generator trained on one repeated trace reproduces it") {
  const auto samples = repeated({1, 2, 3}, 10);
  const auto gen = train_generator(samples, 3, Label::kBenign, 2, 21, 0.01);
  CHECK(gen.tables.size() == 3);  // contexts {}, {1}, {1,2}
  for (const auto& [ctx, probs] : gen.tables) {
    double sum = 0.0;
    for (double p : probs) sum += p;
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
  // empty context: 10 counts of token 1, smoothing 0.01 over 3 tokens
  const auto& start = gen.tables.at({});
  CHECK(start[0] == doctest::Approx((10.0 + 0.01) / (10.0 + 0.03)).epsilon(1e-12));

  const auto again = train_generator(samples, 3, Label::kBenign, 2, 21, 0.01);
  CHECK(gen.tables == again.tables);
  // the tables are MLE statistics; the seed only drives sampling
  const auto other_seed = train_generator(samples, 3, Label::kBenign, 2, 99, 0.01);
  CHECK(gen.tables == other_seed.tables);

  const auto drawn = generate_sequences(gen, 20, 3);
  int exact = 0;
  for (const auto& seq : drawn) {
    if (seq == TokenSeq({1, 2, 3})) ++exact;
  }
  CHECK(exact >= 15);

  CHECK_THROWS_AS(train_generator({}, 3, Label::kBenign, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(train_generator(samples, 0, Label::kBenign, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(train_generator(samples, 3, Label::kBenign, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(train_generator(samples, 2, Label::kBenign, 2, 0), std::invalid_argument);
}

TEST_CASE("generated unigram frequencies track the training corpus") {
  Rng rng(23);
  const std::vector<double> weights = {1.0, 2.0, 3.0, 4.0, 5.0};
  std::vector<TokenSeq> corpus;
  std::vector<double> corpus_freq(5, 0.0);
  for (int s = 0; s < 200; ++s) {
    std::vector<int32_t> toks(50);
    for (auto& t : toks) {
      t = static_cast<int32_t>(rng.weighted(weights)) + 1;
      corpus_freq[static_cast<size_t>(t) - 1] += 1.0;
    }
    corpus.emplace_back(std::move(toks));
  }
  for (auto& f : corpus_freq) f /= 200.0 * 50.0;

  const auto gen = train_generator(corpus, 5, Label::kBenign, 2, 29, 0.1);
  std::vector<double> gen_freq(5, 0.0);
  for (const auto& seq : generate_sequences(gen, 100, 100)) {
    for (int32_t t : seq.tokens) gen_freq[static_cast<size_t>(t) - 1] += 1.0;
  }
  for (auto& f : gen_freq) f /= 100.0 * 100.0;
  double l1 = 0.0;
  for (size_t t = 0; t < 5; ++t) l1 += std::abs(gen_freq[t] - corpus_freq[t]);
  CHECK(l1 <= 0.05);
}

TEST_CASE("sequence generation is seeded per sequence") {
  const auto samples = repeated({1, 2, 3, 2, 1}, 5);
  const auto gen = train_generator(samples, 3, Label::kBenign, 2, 31);
  CHECK(generate_sequences(gen, 0, 8).empty());
  const auto ten = generate_sequences(gen, 10, 8);
  CHECK(ten.size() == 10);
  for (const auto& seq : ten) {
    CHECK(seq.size() == 8);
    for (int32_t t : seq.tokens) {
      CHECK(t >= 1);
      CHECK(t <= 3);
    }
  }
  const auto five = generate_sequences(gen, 5, 8);
  for (size_t i = 0; i < 5; ++i) CHECK(five[i] == ten[i]);
  CHECK(generate_sequences(gen, 10, 8) == ten);

  CHECK_THROWS_AS(generate_sequences(gen, -1, 8), std::invalid_argument);
  CHECK_THROWS_AS(generate_sequences(gen, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate_sequences(GeneratorModel{}, 1, 8), std::invalid_argument);
}

TEST_CASE("generator files round-trip exactly") {
  const auto samples = repeated({2, 1, 3, 1, 2}, 4);
  auto gen = train_generator(samples, 3, Label::kMalicious, 2, 37, 0.25);
  const auto path = temp_file("seqdef_gen_roundtrip.txt");
  save_generator(gen, path);
  const auto loaded = load_generator(path);
  CHECK(loaded.klass == gen.klass);
  CHECK(loaded.order == gen.order);
  CHECK(loaded.smoothing == gen.smoothing);
  CHECK(loaded.seed == gen.seed);
  CHECK(loaded.vocab_size == gen.vocab_size);
  CHECK(loaded.tables == gen.tables);
  CHECK(generate_sequences(loaded, 5, 6) == generate_sequences(gen, 5, 6));
  fs::remove(path);

  const auto bad = temp_file("seqdef_gen_bad.txt");
  std::ofstream(bad) << "not-a-generator 1\n";
  CHECK_THROWS_AS(load_generator(bad), std::runtime_error);
  std::ofstream(bad) << "seqdef-generator 1\nbenign 2 0.1 7 3 1\n0 0.5 0.3 0.1\n";
  CHECK_THROWS_WITH_AS(load_generator(bad), doctest::Contains("sum"), std::runtime_error);
  std::ofstream(bad) << "seqdef-generator 1\nbenign 2 0.1 7 3 2\n0 0.5 0.25 0.25\n0 1 0 0\n";
  CHECK_THROWS_WITH_AS(load_generator(bad), doctest::Contains("duplicate"), std::runtime_error);
  std::ofstream(bad) << "seqdef-generator 1\nbenign 2 0.1 7 3 1\n0 0.5\n";
  CHECK_THROWS_AS(load_generator(bad), std::runtime_error);
  fs::remove(bad);
}

TEST_CASE("defgen nearest selection matches brute force over the pool") {
  const auto model = rigged_model();
  const auto benign = train_generator(repeated({2, 3, 2, 3, 2, 3, 2, 3, 2, 3}, 6), 6,
                                      Label::kBenign, 2, 41, 0.02);
  const auto malicious = train_generator(repeated({kHot, 5, 6, 5, 6, 5, 6, 5, 6, 5}, 6), 6,
                                         Label::kMalicious, 2, 43, 0.02);
  DefGenConfig cfg;
  cfg.m_generated = 10;
  const auto pool = make_defgen_pool(benign, malicious, cfg, kWindow);
  CHECK(pool.sequences.size() == 20);
  CHECK(pool.labels[0] == Label::kBenign);
  CHECK(pool.labels[10] == Label::kMalicious);

  Rng rng(47);
  for (int q = 0; q < 50; ++q) {
    std::vector<int32_t> toks(kWindow);
    for (auto& t : toks) t = static_cast<int32_t>(rng.int_in(1, 6));
    const TokenSeq query(std::move(toks));
    const auto decision = defgen_defend_with_pool(pool, model, query);
    REQUIRE(decision.windows.size() == 1);

    const Eigen::MatrixXd q_hot = one_hot_window(query.tokens, kWidth);
    size_t want = 0;
    double want_dist = 1e300;
    for (size_t p = 0; p < pool.sequences.size(); ++p) {
      const double d =
          (one_hot_window(pool.sequences[p].tokens, kWidth) - q_hot).squaredNorm();
      if (d < want_dist) {
        want = p;
        want_dist = d;
      }
    }
    CHECK(decision.windows[0].pool_index == want);
    CHECK(decision.windows[0].distance_sq == want_dist);
    CHECK(decision.windows[0].pool_label == pool.labels[want]);
  }
}

TEST_CASE("defgen with the input in the pool returns the base prediction") {
  const auto model = rigged_model();
  const TokenSeq query({kHot, 5, 6, 5, 6, 5, 6, 5, 6, 5});
  DefGenPool pool;
  pool.sequences = {TokenSeq({2, 3, 2, 3, 2, 3, 2, 3, 2, 3}), query};
  pool.labels = {Label::kBenign, Label::kMalicious};
  const auto decision = defgen_defend_with_pool(pool, model, query);
  CHECK(decision.windows[0].pool_index == 1);
  CHECK(decision.windows[0].distance_sq == 0.0);
  CHECK(decision.confidence == model.window_confidence(query.tokens));
  CHECK(decision.label == model.classify_sequence(query).label);
}

TEST_CASE("defgen classifies by the nearest generated reference") {
  const auto model = rigged_model();
  const auto benign = train_generator(repeated({2, 3, 2, 3, 2, 3, 2, 3, 2, 3}, 6), 6,
                                      Label::kBenign, 2, 53, 0.02);
  const auto malicious = train_generator(repeated({kHot, 5, 6, 5, 6, 5, 6, 5, 6, 5}, 6), 6,
                                         Label::kMalicious, 2, 59, 0.02);
  DefGenConfig cfg;
  cfg.m_generated = 10;

  const auto ben = defgen_defend(benign, malicious, model, cfg,
                                 TokenSeq({2, 3, 2, 5, 2, 3, 2, 3, 2, 3}));
  CHECK(ben.label == Label::kBenign);
  const auto mal = defgen_defend(benign, malicious, model, cfg,
                                 TokenSeq({kHot, 5, 6, 5, 6, 2, 6, 5, 6, 5}));
  CHECK(mal.label == Label::kMalicious);

  std::vector<int32_t> both = {2, 3, 2, 3, 2, 3, 2, 3, 2, 3,
                               kHot, 5, 6, 5, 6, 5, 6, 5, 6, 5};
  const auto two = defgen_defend(benign, malicious, model, cfg, TokenSeq(std::move(both)));
  CHECK(two.label == Label::kMalicious);
  CHECK(two.windows.size() == 2);

  DefGenConfig zero;
  zero.m_generated = 0;
  CHECK_THROWS_AS(defgen_defend(benign, malicious, model, zero, TokenSeq({1})),
                  std::invalid_argument);
  const auto tiny = train_generator(repeated({1, 2}, 3), 2, Label::kBenign, 2, 61);
  CHECK_THROWS_AS(defgen_defend(tiny, malicious, model, cfg, TokenSeq({1})),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_defgen_pool(tiny, malicious, cfg, kWindow), std::invalid_argument);
}

TEST_CASE("proximity defenses drive the adaptive restart attack") {
  const auto model = rigged_model();
  Dataset train;
  train.samples.push_back({"ben0", Label::kBenign, TokenSeq({kCold, 2, 3, 2, kCold, 3, 2, 3, 2, 3})});
  train.samples.push_back({"ben1", Label::kBenign, TokenSeq({3, kCold, 2, 2, 3, kCold, 3, 2, 2, 3})});
  train.samples.push_back({"mal0", Label::kMalicious, TokenSeq({kHot, 5, 6, 5, 6, 5, 6, 5, 6, 5})});
  const auto index = build_index(model.config(), train);
  NeighborDefense neighbor(model, index);

  const auto benign_gen = train_generator(repeated({kCold, 2, 3, 2, kCold, 3, 2, 3, 2, 3}, 6), 6,
                                          Label::kBenign, 2, 67, 0.02);
  const auto malicious_gen = train_generator(repeated({kHot, 5, 6, 5, 6, 5, 6, 5, 6, 5}, 6), 6,
                                             Label::kMalicious, 2, 71, 0.02);
  DefGenConfig gen_cfg;
  gen_cfg.m_generated = 10;
  DefGenDefense defgen(model, benign_gen, malicious_gen, gen_cfg);
  CHECK(defgen.id() == "defgen");
  CHECK(defgen.pool().sequences.size() == 20);

  const TokenSeq seq({5, 6, kHot, 5, 6, 5, 6, 5, 6, 5, 6, 5});
  AttackConfig cfg;
  cfg.n = kWindow;
  cfg.seed = 73;
  cfg.adaptive_iteration_cap = 4;

  for (const Defense* defense : {static_cast<const Defense*>(&neighbor),
                                 static_cast<const Defense*>(&defgen)}) {
    DefendedModel system;
    system.defense = defense;
    system.classifier = &model;
    const auto r = adaptive_attack(defense->id(), system, seq, cfg);
    CHECK(r.queries > 0);
    CHECK(r.evaded == (defense->decide(r.perturbed).label == Label::kBenign));
    const auto again = adaptive_attack(defense->id(), system, seq, cfg);
    CHECK(r.perturbed == again.perturbed);
    CHECK(r.evaded == again.evaded);
  }
}
