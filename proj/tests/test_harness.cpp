#include "seqdef/harness.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "seqdef/rng.hpp"

using namespace seqdef;
namespace fs = std::filesystem;

namespace {

constexpr int32_t kCold = 1;
constexpr int32_t kHot = 4;
constexpr int32_t kWidth = 7;
constexpr int32_t kWindow = 10;

// Same order-free rig as the attack tests: a window is malicious iff it has
// a hot token and no cold token.
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

class FlagAll : public Defense {
 public:
  std::string id() const override { return "flagall"; }
  DefenseDecision decide(const TokenSeq&) const override {
    return {Label::kMalicious, true, 1.0};
  }
};

// Flags without relabeling: scoring must coerce the flag to malicious.
class FlagOnly : public Defense {
 public:
  std::string id() const override { return "flagonly"; }
  DefenseDecision decide(const TokenSeq&) const override {
    return {Label::kBenign, true, 0.0};
  }
};

// Labels malicious iff the sequence contains the witness token.
class WitnessDefense : public Defense {
 public:
  explicit WitnessDefense(int32_t witness) : witness_(witness) {}
  std::string id() const override { return "witness"; }
  DefenseDecision decide(const TokenSeq& seq) const override {
    const bool hit = std::find(seq.tokens.begin(), seq.tokens.end(), witness_) !=
                     seq.tokens.end();
    return {hit ? Label::kMalicious : Label::kBenign, false, hit ? 1.0 : 0.0};
  }

 private:
  int32_t witness_;
};

ExperimentPlan tiny_plan() {
  ExperimentPlan plan;
  plan.vocab_size = 8;
  plan.len_min = 10;
  plan.len_max = 16;
  plan.overlap = 0.2;
  plan.counts.train_benign = 30;
  plan.counts.train_malicious = 30;
  plan.counts.test_benign = 15;
  plan.counts.test_malicious = 15;
  plan.counts.holdout_benign = 10;
  plan.counts.holdout_malicious = 10;
  plan.classifier.cell = CellKind::kSimpleRnn;
  plan.classifier.hidden_units = 8;
  plan.classifier.window = 8;
  plan.training.epochs = 30;
  plan.substitute.hidden_units = 8;
  plan.substitute.epochs = 20;
  plan.attack_samples = 5;
  plan.random_seeds = 2;
  plan.adaptive_iteration_cap = 3;
  plan.embedding.dim = 8;
  plan.embedding.iterations = 10;
  plan.squeeze_radius = 3;
  plan.squeeze_target = 4;
  plan.signatures.n = 3;
  plan.signature_pool = 10;
  plan.ensemble.variant = EnsembleVariant::kSubsequence;
  plan.ensemble.size = 3;
  plan.defgen.m_generated = 10;
  plan.seed = 7;
  return plan;
}

fs::path temp_dir(const char* name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("the null defense answers with the bare classifier") {
  const auto model = rigged_model();
  const NullDefense none(model);
  CHECK(none.id() == "none");
  for (const auto& seq : {TokenSeq({kHot, 5, 6}), TokenSeq({2, 3, 2}), TokenSeq{}}) {
    const auto own = model.classify_sequence(seq);
    const auto decision = none.decide(seq);
    CHECK(decision.label == own.label);
    CHECK(decision.confidence == own.confidence);
    CHECK_FALSE(decision.flagged);
  }
}

TEST_CASE("adversarial recall counts flags and malicious labels") {
  std::vector<TokenSeq> set;
  for (int k = 0; k < 10; ++k) {
    // four of ten carry the witness token 9
    std::vector<int32_t> toks = {2, 3, 2};
    if (k < 4) toks.push_back(9);
    set.emplace_back(std::move(toks));
  }
  CHECK(adversarial_recall(FlagAll{}, set) == 100.0);
  CHECK(adversarial_recall(WitnessDefense{9}, set) == 40.0);
  CHECK(adversarial_recall(WitnessDefense{8}, set) == 0.0);
  CHECK(adversarial_recall(FlagOnly{}, set) == 100.0);  // the flag alone counts
  CHECK_THROWS_AS(adversarial_recall(FlagAll{}, {}), std::invalid_argument);
}

TEST_CASE("defended accuracy coerces flags and matches a confusion oracle") {
  const auto model = rigged_model();
  Dataset test;
  // rig truth: malicious iff hot present and no cold
  test.samples.push_back({"m-hit", Label::kMalicious, TokenSeq({kHot, 5, 6})});
  test.samples.push_back({"m-miss", Label::kMalicious, TokenSeq({kCold, kHot, 5})});
  test.samples.push_back({"b-ok", Label::kBenign, TokenSeq({2, 3, 2})});
  test.samples.push_back({"b-ok2", Label::kBenign, TokenSeq({3, 3, 3})});
  test.samples.push_back({"b-fp", Label::kBenign, TokenSeq({kHot, 2, 2})});

  const NullDefense none(model);
  const auto stats = defended_accuracy(none, test);
  // by hand: m-hit correct, m-miss wrong, b-ok/b-ok2 correct, b-fp wrong
  CHECK(stats.total == 5);
  CHECK(stats.correct == 3);
  CHECK(stats.accuracy == 0.6);
  CHECK(stats.benign_total == 3);
  CHECK(stats.false_positives == 1);
  CHECK(stats.fpr == doctest::Approx(1.0 / 3.0));

  // identical to the bare-model tally
  const auto bare = evaluate_accuracy(model, test);
  CHECK(stats.accuracy == bare.accuracy);
  CHECK(stats.fpr == bare.fpr);

  // flag-everything: perfect malicious recall, all benign wrong
  const auto all = defended_accuracy(FlagAll{}, test);
  CHECK(all.fpr == 1.0);
  CHECK(all.accuracy == doctest::Approx(2.0 / 5.0));

  // a bare flag counts as a malicious prediction even with a benign label
  const auto only = defended_accuracy(FlagOnly{}, test);
  CHECK(only.fpr == 1.0);
  CHECK(only.accuracy == doctest::Approx(2.0 / 5.0));

  CHECK_THROWS_AS(defended_accuracy(none, Dataset{}), std::invalid_argument);
}

TEST_CASE("the report renders to the pinned CSV shape") {
  MetricsReport report;
  DefenseRow none;
  none.defense = "none";
  none.clean_accuracy = 94.8;
  none.fpr = 4.4;
  none.inference_overhead_s = 1.25;
  DefenseRow row;
  row.defense = "squeeze";
  row.adaptive_recall = 38.76;
  row.whitebox_recall = 86.96;
  row.blackbox_recall = 80.0;
  row.random_recall = 55.5;
  row.clean_accuracy = 94.0;
  row.fpr = 5.0;
  row.train_overhead_s = 3.141;
  row.inference_overhead_s = 2.0;
  report.rows = {none, row};

  const auto csv = report_csv(report, false);
  CHECK(csv ==
        "defense,adaptive_recall,whitebox_recall,blackbox_recall,random_recall,"
        "clean_accuracy,fpr,train_overhead_s,inference_overhead_s\n"
        "none,0.00,0.00,0.00,0.00,94.80,4.40,0.000,0.000\n"
        "squeeze,38.76,86.96,80.00,55.50,94.00,5.00,0.000,0.000\n");

  const auto timed = report_csv(report, true);
  CHECK(timed.find("squeeze,38.76,86.96,80.00,55.50,94.00,5.00,3.141,2.000\n") !=
        std::string::npos);
  CHECK(timed.find("none,0.00,0.00,0.00,0.00,94.80,4.40,0.000,1.250\n") != std::string::npos);
}

TEST_CASE("the experiment table runs end to end and reproduces bitwise") {
  const auto dir = temp_dir("seqdef_harness_e2e");
  const auto plan = tiny_plan();
  const auto report = run_experiment_table(plan, dir / "table.csv");

  REQUIRE(report.rows.size() == 7);
  CHECK(report.rows[0].defense == "none");
  for (size_t d = 0; d < plan.defenses.size(); ++d) {
    CHECK(report.rows[d + 1].defense == plan.defenses[d]);
  }
  CHECK(report.attacked > 0);
  CHECK(report.whitebox_set > 0);
  CHECK(report.blackbox_set > 0);
  CHECK(report.random_sets.size() == 2);
  CHECK(report.random_sets[0] + report.random_sets[1] > 0);
  CHECK(report.baseline_accuracy >= 0.9);
  CHECK(report.baseline_fpr <= 0.1);

  // the undefended row is exactly zero by construction of the sets
  CHECK(report.rows[0].adaptive_recall == 0.0);
  CHECK(report.rows[0].whitebox_recall == 0.0);
  CHECK(report.rows[0].blackbox_recall == 0.0);
  CHECK(report.rows[0].random_recall == 0.0);

  for (const auto& row : report.rows) {
    for (const double v : {row.adaptive_recall, row.whitebox_recall, row.blackbox_recall,
                           row.random_recall, row.clean_accuracy, row.fpr}) {
      CHECK(v >= 0.0);
      CHECK(v <= 100.0);
    }
    REQUIRE(row.random_recalls.size() == 2);
    // the random column is the mean of the per-seed recalls over nonempty sets
    double sum = 0.0;
    int32_t runs = 0;
    for (size_t s = 0; s < row.random_recalls.size(); ++s) {
      if (report.random_sets[s] > 0) {
        sum += row.random_recalls[s];
        ++runs;
      }
    }
    CHECK(row.random_recall == (runs == 0 ? 0.0 : sum / runs));
  }

  const auto csv = slurp(dir / "table.csv");
  CHECK(csv.rfind("defense,adaptive_recall,whitebox_recall,blackbox_recall,random_recall,"
                  "clean_accuracy,fpr,train_overhead_s,inference_overhead_s\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 8);
  CHECK(csv.find(",0.000,0.000\n") != std::string::npos);  // timings zeroed by default

  const auto meta = nlohmann::json::parse(slurp(dir / "table.csv.meta.json"));
  CHECK(meta.at("plan").at("seed").get<uint64_t>() == 7);
  CHECK(meta.at("denominators").at("whitebox").get<size_t>() == report.whitebox_set);
  CHECK(meta.at("rows").size() == 7);
  CHECK(meta.at("attacked").get<size_t>() == report.attacked);
  CHECK(meta.at("denominator_rule").get<std::string>() ==
        "attack outputs that evade the undefended classifier");

  // bitwise CSV reproduction on a rerun with the same plan
  const auto again = run_experiment_table(plan, dir / "again.csv");
  CHECK(slurp(dir / "again.csv") == csv);
  for (size_t r = 0; r < report.rows.size(); ++r) {
    CHECK(again.rows[r].adaptive_recall == report.rows[r].adaptive_recall);
    CHECK(again.rows[r].whitebox_recall == report.rows[r].whitebox_recall);
    CHECK(again.rows[r].blackbox_recall == report.rows[r].blackbox_recall);
    CHECK(again.rows[r].random_recall == report.rows[r].random_recall);
    CHECK(again.rows[r].clean_accuracy == report.rows[r].clean_accuracy);
    CHECK(again.rows[r].fpr == report.rows[r].fpr);
  }
  fs::remove_all(dir);
}

TEST_CASE("a plan without defenses reports only the baseline row") {
  const auto dir = temp_dir("seqdef_harness_baseline");
  auto plan = tiny_plan();
  plan.defenses.clear();
  plan.attack_samples = 3;
  const auto report = run_experiment_table(plan, dir / "table.csv");
  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].defense == "none");
  CHECK(std::count_if(report.rows[0].random_recalls.begin(),
                      report.rows[0].random_recalls.end(),
                      [](double r) { return r == 0.0; }) == 2);
  fs::remove_all(dir);
}

TEST_CASE("plan validation rejects broken inputs") {
  const auto dir = temp_dir("seqdef_harness_invalid");
  auto plan = tiny_plan();
  plan.defenses = {"squeeze", "firewall"};
  CHECK_THROWS_WITH_AS(run_experiment_table(plan, dir / "t.csv"),
                       doctest::Contains("unknown defense id"), std::runtime_error);

  auto bad = tiny_plan();
  bad.attack_samples = 0;
  CHECK_THROWS_AS(run_experiment_table(bad, dir / "t.csv"), std::invalid_argument);
  bad = tiny_plan();
  bad.random_seeds = 0;
  CHECK_THROWS_AS(run_experiment_table(bad, dir / "t.csv"), std::invalid_argument);
  bad = tiny_plan();
  bad.vocab_size = 1;
  CHECK_THROWS_AS(run_experiment_table(bad, dir / "t.csv"), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("the desk plan pins the reference experiment") {
  const auto plan = make_desk_plan();
  CHECK(plan.vocab_size == 50);
  CHECK(plan.len_min == 40);
  CHECK(plan.len_max == 80);
  CHECK(plan.overlap == 0.3);
  CHECK(plan.counts.train_benign == 1000);
  CHECK(plan.counts.train_malicious == 1000);
  CHECK(plan.counts.test_benign == 250);
  CHECK(plan.counts.test_malicious == 250);
  CHECK(plan.counts.holdout_benign + plan.counts.holdout_malicious == 70);
  CHECK(plan.classifier.cell == CellKind::kLstm);
  CHECK(plan.classifier.hidden_units == 32);
  CHECK(plan.classifier.window == 40);
  CHECK(plan.training.epochs == 8);
  CHECK(plan.attack_samples == 100);
  CHECK(plan.random_seeds == 5);
  CHECK(plan.defenses.size() == 6);
  CHECK(plan.ensemble.variant == EnsembleVariant::kSubsequence);
  CHECK(plan.ensemble.size == 9);
  CHECK(plan.ensemble.voting == Voting::kSoft);
  CHECK(plan.squeeze_target == 25);
  CHECK(plan.signatures.n == 5);
  CHECK(plan.signatures.threshold_p == 1.0);
  CHECK(plan.signatures.threshold_sigs == 1);
  CHECK(plan.defgen.m_generated == 50);
  CHECK(plan.advtrain_fraction == 0.5);
  CHECK_FALSE(plan.csv_timings);
}
