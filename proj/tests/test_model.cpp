#include "seqdef/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "seqdef/rng.hpp"

using namespace seqdef;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  auto dir = fs::temp_directory_path() / "seqdef_test_model";
  fs::create_directories(dir);
  return dir / name;
}

ModelConfig small_config(CellKind cell, uint64_t seed, int hidden = 4, int window = 5,
                         int width = 7, bool bidir = false, int depth = 1) {
  ModelConfig c;
  c.cell = cell;
  c.hidden_units = hidden;
  c.window = window;
  c.vocab_width = width;
  c.dropout = 0.0;
  c.bidirectional = bidir;
  c.depth = depth;
  c.seed = seed;
  return c;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Central finite difference of the dense-input logit at the one-hot point.
Eigen::MatrixXd fd_jacobian(const RnnClassifier& model, const std::vector<int32_t>& window,
                            double h = 1e-5) {
  Eigen::MatrixXd x = one_hot_window(window, model.config().vocab_width);
  Eigen::MatrixXd jac(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double keep = x(r, c);
      x(r, c) = keep + h;
      const double up = model.window_logit_dense(x);
      x(r, c) = keep - h;
      const double down = model.window_logit_dense(x);
      x(r, c) = keep;
      jac(r, c) = (up - down) / (2.0 * h);
    }
  }
  return jac;
}

double max_rel_error(const Eigen::MatrixXd& got, const Eigen::MatrixXd& want) {
  double worst = 0.0;
  for (Eigen::Index r = 0; r < got.rows(); ++r) {
    for (Eigen::Index c = 0; c < got.cols(); ++c) {
      const double denom = std::max(std::abs(want(r, c)), 1e-6);
      worst = std::max(worst, std::abs(got(r, c) - want(r, c)) / denom);
    }
  }
  return worst;
}

Dataset tiny_task(int benign, int malicious, uint64_t seed) {
  // Benign traces draw from tokens {1,2,3}, malicious from {4,5,6}.
  Dataset d;
  Rng rng(seed);
  for (int i = 0; i < benign + malicious; ++i) {
    const bool mal = i >= benign;
    TokenSeq seq;
    const int len = static_cast<int>(rng.int_in(8, 16));
    for (int t = 0; t < len; ++t) {
      seq.tokens.push_back(static_cast<int32_t>(rng.int_in(1, 3)) + (mal ? 3 : 0));
    }
    d.samples.push_back({"s" + std::to_string(i), mal ? Label::kMalicious : Label::kBenign,
                         std::move(seq)});
  }
  return d;
}

}  // namespace

TEST_CASE("init is deterministic per seed and validates its config") {
  auto a = RnnClassifier::init(small_config(CellKind::kLstm, 3));
  auto b = RnnClassifier::init(small_config(CellKind::kLstm, 3));
  auto c = RnnClassifier::init(small_config(CellKind::kLstm, 4));
  CHECK(a.same_parameters(b));
  CHECK_FALSE(a.same_parameters(c));

  ModelConfig bad = small_config(CellKind::kLstm, 1);
  bad.vocab_width = 1;
  CHECK_THROWS_AS(RnnClassifier::init(bad), std::invalid_argument);
  bad = small_config(CellKind::kLstm, 1);
  bad.dropout = 1.0;
  CHECK_THROWS_AS(RnnClassifier::init(bad), std::invalid_argument);
  bad = small_config(CellKind::kLstm, 1);
  bad.depth = 0;
  CHECK_THROWS_AS(RnnClassifier::init(bad), std::invalid_argument);
}

TEST_CASE("zero output weights give confidence exactly one half") {
  auto model = RnnClassifier::init(small_config(CellKind::kGru, 9));
  model.tensor("dense.w").setZero();
  model.tensor("dense.b").setZero();
  std::vector<int32_t> window{1, 2, 3, 0, 0};
  CHECK(model.window_confidence(window) == 0.5);
}

TEST_CASE("all-padding windows evaluate to a finite confidence") {
  for (CellKind cell : {CellKind::kSimpleRnn, CellKind::kLstm, CellKind::kGru}) {
    auto model = RnnClassifier::init(small_config(cell, 17));
    std::vector<int32_t> window(5, kPadIndex);
    const double conf = model.window_confidence(window);
    CHECK(std::isfinite(conf));
    CHECK(conf > 0.0);
    CHECK(conf < 1.0);
  }
}

TEST_CASE("one-unit simple cell matches the closed-form recurrence") {
  ModelConfig cfg = small_config(CellKind::kSimpleRnn, 0, 1, 2, 3);
  auto model = RnnClassifier::init(cfg);
  auto& W = model.tensor("layer0.fwd.W");
  auto& U = model.tensor("layer0.fwd.U");
  auto& b = model.tensor("layer0.fwd.b");
  W << 0.3, -0.8, 0.5;
  U << 0.7;
  b << 0.1;
  model.tensor("dense.w") << 1.4;
  model.tensor("dense.b") << -0.2;

  const std::vector<int32_t> window{1, 2};
  const double h1 = std::tanh(-0.8 + 0.1);
  const double h2 = std::tanh(0.5 + 0.7 * h1 + 0.1);
  const double logit = 1.4 * std::max(h2, 0.0) - 0.2;
  CHECK(model.window_logit(window) == doctest::Approx(logit).epsilon(1e-12));
  CHECK(model.window_confidence(window) == doctest::Approx(sig(logit)).epsilon(1e-12));
}

TEST_CASE("one-unit GRU matches the closed-form recurrence") {
  ModelConfig cfg = small_config(CellKind::kGru, 0, 1, 2, 3);
  auto model = RnnClassifier::init(cfg);
  auto& W = model.tensor("layer0.fwd.W");  // rows: z, r, n
  auto& U = model.tensor("layer0.fwd.U");
  auto& b = model.tensor("layer0.fwd.b");
  W << 0.2, -0.4, 0.6,
       0.5, 0.3, -0.7,
       -0.1, 0.8, 0.4;
  U << 0.9, -0.5, 0.3;
  b << 0.05, -0.15, 0.25;
  model.tensor("dense.w") << -1.1;
  model.tensor("dense.b") << 0.3;

  const std::vector<int32_t> window{2, 1};
  // Step 1 (token 2), h0 = 0.
  const double z1 = sig(0.6 + 0.05);
  const double n1 = std::tanh(0.4 + 0.25);
  const double h1 = (1.0 - z1) * n1;
  // Step 2 (token 1).
  const double z2 = sig(-0.4 + 0.9 * h1 + 0.05);
  const double r2 = sig(0.3 + (-0.5) * h1 + (-0.15));
  const double n2 = std::tanh(0.8 + 0.3 * (r2 * h1) + 0.25);
  const double h2 = (1.0 - z2) * n2 + z2 * h1;
  const double logit = -1.1 * std::max(h2, 0.0) + 0.3;
  CHECK(model.window_logit(window) == doctest::Approx(logit).epsilon(1e-12));
}

TEST_CASE("classify_sequence flags a sequence when any window is malicious") {
  ModelConfig cfg = small_config(CellKind::kSimpleRnn, 0, 1, 4, 4);
  auto model = RnnClassifier::init(cfg);
  model.tensor("layer0.fwd.W") << 0.0, 6.0, -6.0, -6.0;  // token 1 drives the state up
  model.tensor("layer0.fwd.U") << 0.0;
  model.tensor("layer0.fwd.b") << 0.0;
  model.tensor("dense.w") << 8.0;
  model.tensor("dense.b") << -4.0;

  // Window 2 contains the hot token; window 1 does not.
  TokenSeq mixed({2, 3, 2, 2, 3, 3, 3, 1});
  auto decision = model.classify_sequence(mixed);
  REQUIRE(decision.window_confidences.size() == 2);
  CHECK(decision.window_confidences[0] < 0.5);
  CHECK(decision.window_confidences[1] >= 0.5);
  CHECK(decision.label == Label::kMalicious);
  CHECK(decision.confidence == decision.window_confidences[1]);

  TokenSeq clean({2, 3, 2, 2, 3, 3, 3, 2});
  CHECK(model.classify_sequence(clean).label == Label::kBenign);
}

TEST_CASE("dense path reproduces the token path bitwise") {
  for (CellKind cell : {CellKind::kSimpleRnn, CellKind::kLstm, CellKind::kGru}) {
    for (bool bidir : {false, true}) {
      auto model = RnnClassifier::init(small_config(cell, 23, 4, 5, 7, bidir, 2));
      std::vector<int32_t> window{3, 0, 6, 1, 1};
      const double sparse = model.window_logit(window);
      const double dense = model.window_logit_dense(one_hot_window(window, 7));
      CHECK(sparse == dense);
    }
  }
}

TEST_CASE("input_jacobian of a zero-weight network is zero") {
  auto model = RnnClassifier::init(small_config(CellKind::kLstm, 5));
  for (auto& t : model.tensors()) t.value.setZero();
  std::vector<int32_t> window{1, 2, 3, 4, 5};
  CHECK(model.input_jacobian(window).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("input_jacobian matches central finite differences") {
  for (CellKind cell : {CellKind::kSimpleRnn, CellKind::kLstm, CellKind::kGru}) {
    auto model = RnnClassifier::init(small_config(cell, 31, 4, 5, 7));
    std::vector<int32_t> window{2, 5, 0, 1, 6};
    const Eigen::MatrixXd analytic = model.input_jacobian(window);
    const Eigen::MatrixXd numeric = fd_jacobian(model, window);
    CHECK(max_rel_error(analytic, numeric) <= 1e-4);
  }
}

TEST_CASE("input_jacobian matches finite differences for stacked bidirectional nets") {
  auto model = RnnClassifier::init(small_config(CellKind::kLstm, 37, 3, 4, 6, true, 2));
  std::vector<int32_t> window{1, 4, 2, 0};
  CHECK(max_rel_error(model.input_jacobian(window), fd_jacobian(model, window)) <= 1e-4);
}

TEST_CASE("permuting vocabulary channels permutes Jacobian columns identically") {
  auto base = RnnClassifier::init(small_config(CellKind::kLstm, 41, 4, 5, 6, true));
  auto permuted = base;
  // Rotate channels: channel c moves to (c + 1) mod width.
  const int width = 6;
  auto pi = [width](int32_t c) { return static_cast<int32_t>((c + 1) % width); };
  for (const char* name : {"layer0.fwd.W", "layer0.bwd.W"}) {
    Eigen::MatrixXd& w = permuted.tensor(name);
    const Eigen::MatrixXd old = w;
    for (int c = 0; c < width; ++c) w.col(pi(c)) = old.col(c);
  }
  std::vector<int32_t> window{2, 0, 5, 1, 3};
  std::vector<int32_t> mapped(window.size());
  for (size_t i = 0; i < window.size(); ++i) mapped[i] = pi(window[i]);

  const Eigen::MatrixXd jac = base.input_jacobian(window);
  const Eigen::MatrixXd jac_mapped = permuted.input_jacobian(mapped);
  for (Eigen::Index r = 0; r < jac.rows(); ++r) {
    for (int c = 0; c < width; ++c) {
      CHECK(jac_mapped(r, pi(c)) == jac(r, c));
    }
  }
}

TEST_CASE("parameter gradients match finite differences") {
  for (CellKind cell : {CellKind::kSimpleRnn, CellKind::kLstm, CellKind::kGru}) {
    auto model = RnnClassifier::init(small_config(cell, 43, 3, 4, 5, true, 2));
    std::vector<int32_t> window{1, 3, 0, 4};
    const double y = 1.0;
    auto [loss, grads] = model.window_loss_gradients(window, y);
    CHECK(std::isfinite(loss));
    const double h = 1e-6;
    double worst = 0.0;
    for (size_t i = 0; i < model.tensors().size(); ++i) {
      Eigen::MatrixXd& value = model.tensors()[i].value;
      for (Eigen::Index r = 0; r < value.rows(); ++r) {
        for (Eigen::Index c = 0; c < value.cols(); ++c) {
          const double keep = value(r, c);
          value(r, c) = keep + h;
          const double up = model.window_loss(window, y);
          value(r, c) = keep - h;
          const double down = model.window_loss(window, y);
          value(r, c) = keep;
          const double fd = (up - down) / (2.0 * h);
          const double denom = std::max(std::abs(fd), 1e-6);
          worst = std::max(worst, std::abs(grads[i](r, c) - fd) / denom);
        }
      }
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("parameter gradients stay correct under fixed dropout masks") {
  ModelConfig cfg = small_config(CellKind::kGru, 47, 3, 4, 5);
  cfg.dropout = 0.3;
  auto model = RnnClassifier::init(cfg);
  std::vector<int32_t> window{2, 1, 4, 3};
  const uint64_t mask_seed = 99;
  auto [loss, grads] = model.window_loss_gradients(window, 0.0, mask_seed);
  CHECK(std::isfinite(loss));
  const double h = 1e-6;
  double worst = 0.0;
  for (size_t i = 0; i < model.tensors().size(); ++i) {
    Eigen::MatrixXd& value = model.tensors()[i].value;
    for (Eigen::Index r = 0; r < value.rows(); ++r) {
      for (Eigen::Index c = 0; c < value.cols(); ++c) {
        const double keep = value(r, c);
        value(r, c) = keep + h;
        const double up = model.window_loss(window, 0.0, mask_seed);
        value(r, c) = keep - h;
        const double down = model.window_loss(window, 0.0, mask_seed);
        value(r, c) = keep;
        const double fd = (up - down) / (2.0 * h);
        const double denom = std::max(std::abs(fd), 1e-6);
        worst = std::max(worst, std::abs(grads[i](r, c) - fd) / denom);
      }
    }
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("dropout changes the training-path output but not the inference path") {
  ModelConfig cfg = small_config(CellKind::kLstm, 53);
  cfg.dropout = 0.5;
  auto model = RnnClassifier::init(cfg);
  std::vector<int32_t> window{1, 2, 3, 4, 5};
  const double plain = model.window_confidence(window);
  CHECK(model.window_confidence(window) == plain);
  bool differs = false;
  for (uint64_t seed = 0; seed < 8 && !differs; ++seed) {
    differs = model.window_confidence_train(window, seed) != plain;
  }
  CHECK(differs);
}

TEST_CASE("fit with zero epochs leaves parameters unchanged") {
  auto model = RnnClassifier::init(small_config(CellKind::kLstm, 59));
  auto copy = model;
  TrainConfig tc;
  tc.epochs = 0;
  Dataset d = tiny_task(4, 4, 1);
  auto history = model.fit(d, tc);
  CHECK(history.empty());
  CHECK(model.same_parameters(copy));
}

TEST_CASE("training is bitwise reproducible for a fixed seed") {
  ModelConfig cfg = small_config(CellKind::kGru, 61, 4, 6, 7);
  cfg.dropout = 0.2;
  Dataset d = tiny_task(10, 10, 2);
  TrainConfig tc;
  tc.epochs = 3;
  tc.seed = 5;
  auto a = RnnClassifier::init(cfg);
  auto b = RnnClassifier::init(cfg);
  auto ha = a.fit(d, tc);
  auto hb = b.fit(d, tc);
  CHECK(ha == hb);
  CHECK(a.same_parameters(b));
}

TEST_CASE("LSTM with Adam separates an easy task") {
  ModelConfig cfg = small_config(CellKind::kLstm, 67, 8, 10, 7);
  cfg.dropout = 0.2;
  Dataset train = tiny_task(60, 60, 3);
  TrainConfig tc;
  tc.epochs = 50;
  tc.seed = 7;
  auto model = RnnClassifier::init(cfg);
  auto history = model.fit(train, tc);
  REQUIRE(history.size() == 50);
  CHECK(history.back() < history.front());
  CHECK(model.trained());
  EvalStats stats = evaluate_accuracy(model, train);
  CHECK(stats.accuracy >= 0.95);
}

TEST_CASE("GRU with Adadelta separates an easy task") {
  ModelConfig cfg = small_config(CellKind::kGru, 71, 8, 10, 7);
  cfg.dropout = 0.2;
  Dataset train = tiny_task(60, 60, 4);
  TrainConfig tc;
  tc.optimizer = Optimizer::kAdadelta;
  tc.epochs = 15;
  tc.seed = 9;
  auto model = RnnClassifier::init(cfg);
  model.fit(train, tc);
  CHECK(evaluate_accuracy(model, train).accuracy >= 0.9);
}

TEST_CASE("fit aborts with a diagnostic when the loss turns non-finite") {
  auto model = RnnClassifier::init(small_config(CellKind::kSimpleRnn, 73));
  model.tensor("dense.b")(0, 0) = std::nan("");
  Dataset d = tiny_task(4, 4, 5);
  TrainConfig tc;
  tc.epochs = 1;
  CHECK_THROWS_WITH_AS(model.fit(d, tc), doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("evaluate_accuracy matches a hand confusion tally") {
  ModelConfig cfg = small_config(CellKind::kLstm, 79, 8, 10, 7);
  Dataset train = tiny_task(30, 30, 6);
  TrainConfig tc;
  tc.epochs = 8;
  tc.seed = 11;
  auto model = RnnClassifier::init(cfg);
  model.fit(train, tc);

  Dataset eval = tiny_task(12, 8, 7);
  size_t correct = 0, fp = 0, benign = 0;
  for (const auto& s : eval.samples) {
    const Label got = model.classify_sequence(s.seq).label;
    if (got == s.label) ++correct;
    if (s.label == Label::kBenign) {
      ++benign;
      if (got == Label::kMalicious) ++fp;
    }
  }
  EvalStats stats = evaluate_accuracy(model, eval);
  CHECK(stats.total == 20);
  CHECK(stats.correct == correct);
  CHECK(stats.accuracy == doctest::Approx(static_cast<double>(correct) / 20.0));
  CHECK(stats.fpr == doctest::Approx(static_cast<double>(fp) / static_cast<double>(benign)));
  CHECK_THROWS_AS(evaluate_accuracy(model, Dataset{}), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip bitwise and reject corrupt files") {
  ModelConfig cfg = small_config(CellKind::kLstm, 83, 4, 5, 7, true, 2);
  cfg.dropout = 0.2;
  auto model = RnnClassifier::init(cfg);
  Dataset d = tiny_task(6, 6, 8);
  TrainConfig tc;
  tc.epochs = 2;
  model.fit(d, tc);

  auto path = temp_file("model.ckpt");
  model.save(path);
  auto loaded = RnnClassifier::load(path);
  CHECK(loaded.same_parameters(model));
  CHECK(loaded.trained());
  CHECK(loaded.config().cell == cfg.cell);
  CHECK(loaded.config().bidirectional);
  CHECK(loaded.config().depth == 2);
  std::vector<int32_t> window{1, 2, 3, 4, 5};
  CHECK(loaded.window_logit(window) == model.window_logit(window));

  // Truncated files must be rejected.
  auto broken = temp_file("broken.ckpt");
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(broken, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(RnnClassifier::load(broken), std::runtime_error);

  // Bad magic must be rejected.
  auto junk = temp_file("junk.ckpt");
  {
    std::ofstream out(junk, std::ios::binary);
    out << "not a checkpoint";
  }
  CHECK_THROWS_AS(RnnClassifier::load(junk), std::runtime_error);
}

TEST_CASE("window inputs are validated") {
  auto model = RnnClassifier::init(small_config(CellKind::kLstm, 89));
  std::vector<int32_t> short_window{1, 2};
  CHECK_THROWS_AS(model.window_logit(short_window), std::invalid_argument);
  std::vector<int32_t> bad_token{1, 2, 3, 4, 7};
  CHECK_THROWS_AS(model.window_logit(bad_token), std::invalid_argument);
  Eigen::MatrixXd wrong = Eigen::MatrixXd::Zero(5, 9);
  CHECK_THROWS_AS(model.window_logit_dense(wrong), std::invalid_argument);
}
