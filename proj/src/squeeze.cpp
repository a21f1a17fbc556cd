#include "seqdef/squeeze.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

namespace seqdef {

int32_t SqueezeMap::apply(int32_t token) const {
  if (token < 0 || token > vocab_size()) {
    throw std::out_of_range("squeeze map: token index " + std::to_string(token) +
                            " outside 0.." + std::to_string(vocab_size()));
  }
  return table[static_cast<size_t>(token)];
}

std::vector<int32_t> SqueezeMap::representatives() const {
  std::set<int32_t> reps;
  for (size_t t = 1; t < table.size(); ++t) reps.insert(table[t]);
  return {reps.begin(), reps.end()};
}

SqueezeMap build_squeeze_map(const EmbeddingMatrix& embedding, int32_t target) {
  const int32_t vocab = embedding.vocab_size();
  if (target < 1 || target > vocab) {
    throw std::invalid_argument("build_squeeze_map: target size " + std::to_string(target) +
                                " outside 1.." + std::to_string(vocab));
  }

  struct Working {
    std::vector<int32_t> members;
    Eigen::RowVectorXd center;
    int64_t count;
  };
  std::vector<Working> groups;
  groups.reserve(static_cast<size_t>(vocab));
  for (int32_t t = 1; t <= vocab; ++t) {
    groups.push_back({{t}, embedding.row(t), 1});
  }

  while (static_cast<int32_t>(groups.size()) > target) {
    size_t best_i = 0, best_j = 1;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i + 1 < groups.size(); ++i) {
      for (size_t j = i + 1; j < groups.size(); ++j) {
        const double d = (groups[i].center - groups[j].center).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best_i = i;
          best_j = j;
        }
      }
    }
    Working& gi = groups[best_i];
    Working& gj = groups[best_j];
    const double ni = static_cast<double>(gi.count);
    const double nj = static_cast<double>(gj.count);
    gi.center = (gi.center * ni + gj.center * nj) / (ni + nj);
    gi.members.insert(gi.members.end(), gj.members.begin(), gj.members.end());
    std::sort(gi.members.begin(), gi.members.end());
    gi.count += gj.count;
    groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(best_j));
  }

  SqueezeMap map;
  map.target_size = target;
  map.table.assign(static_cast<size_t>(vocab) + 1, 0);
  for (const Working& g : groups) {
    int32_t rep = g.members.front();
    double rep_d = std::numeric_limits<double>::infinity();
    for (int32_t m : g.members) {
      const double d = (embedding.row(m) - g.center).squaredNorm();
      if (d < rep_d) {
        rep_d = d;
        rep = m;
      }
    }
    for (int32_t m : g.members) map.table[static_cast<size_t>(m)] = rep;
    map.groups.push_back({g.members, g.center, rep});
  }
  return map;
}

std::vector<int32_t> apply_squeeze(const SqueezeMap& map, std::span<const int32_t> window) {
  std::vector<int32_t> out(window.size());
  for (size_t i = 0; i < window.size(); ++i) out[i] = map.apply(window[i]);
  return out;
}

TokenSeq apply_squeeze(const SqueezeMap& map, const TokenSeq& seq) {
  return TokenSeq{apply_squeeze(map, std::span<const int32_t>(seq.tokens))};
}

double calibrate_threshold(const SqueezeMap& map, const RnnClassifier& classifier,
                           const Dataset& train) {
  if (train.samples.empty()) {
    throw std::invalid_argument("calibrate_threshold: empty training set");
  }
  if (map.vocab_size() + 1 != classifier.config().vocab_width) {
    throw std::invalid_argument("calibrate_threshold: squeeze map vocabulary does not match "
                                "classifier input width");
  }
  double worst = 0.0;
  for (const auto& sample : train.samples) {
    for (const auto& window : split_windows(sample.seq, classifier.config().window)) {
      const double orig = classifier.window_confidence(window);
      const double squeezed = classifier.window_confidence(apply_squeeze(map, window));
      worst = std::max(worst, std::abs(orig - squeezed));
    }
  }
  return worst;
}

SqueezeVerdict detect(const SqueezeDetector& detector, const RnnClassifier& classifier,
                      const TokenSeq& seq) {
  SqueezeVerdict verdict;
  verdict.original_confidence = 0.0;
  verdict.squeezed_confidence = 0.0;
  for (const auto& window : split_windows(seq, classifier.config().window)) {
    const double orig = classifier.window_confidence(window);
    const double squeezed = classifier.window_confidence(apply_squeeze(detector.map, window));
    verdict.original_confidence = std::max(verdict.original_confidence, orig);
    verdict.squeezed_confidence = std::max(verdict.squeezed_confidence, squeezed);
    verdict.max_difference = std::max(verdict.max_difference, std::abs(orig - squeezed));
  }
  verdict.adversarial = verdict.max_difference > detector.threshold;
  if (verdict.adversarial) {
    verdict.label = Label::kMalicious;
  } else {
    verdict.label = verdict.original_confidence >= 0.5 ? Label::kMalicious : Label::kBenign;
  }
  return verdict;
}

DefenseDecision SqueezeDefense::decide(const TokenSeq& seq) const {
  const SqueezeVerdict verdict = detect(*detector_, *classifier_, seq);
  DefenseDecision decision;
  decision.label = verdict.label;
  decision.flagged = verdict.adversarial;
  decision.confidence = verdict.original_confidence;
  return decision;
}

void save_squeeze(const SqueezeDetector& detector, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", detector.threshold);
  out << "seqdef-squeeze 1\n";
  out << detector.map.vocab_size() << ' ' << detector.map.target_size << ' ' << buf << '\n';
  for (int32_t t = 1; t <= detector.map.vocab_size(); ++t) {
    out << t << ' ' << detector.map.table[static_cast<size_t>(t)] << '\n';
  }
  if (!out) throw std::runtime_error("error writing " + path.string());
}

SqueezeDetector load_squeeze(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "seqdef-squeeze" || version != 1) {
    throw std::runtime_error(path.string() + ": not a squeeze map file");
  }
  SqueezeDetector detector;
  int32_t vocab = 0;
  if (!(in >> vocab >> detector.map.target_size >> detector.threshold) || vocab < 1 ||
      detector.map.target_size < 1 || detector.map.target_size > vocab ||
      !std::isfinite(detector.threshold) || detector.threshold < 0.0) {
    throw std::runtime_error(path.string() + ": bad squeeze header");
  }
  detector.map.table.assign(static_cast<size_t>(vocab) + 1, 0);
  std::vector<bool> filled(static_cast<size_t>(vocab) + 1, false);
  for (int32_t n = 0; n < vocab; ++n) {
    int32_t tok = 0, rep = 0;
    if (!(in >> tok >> rep) || tok < 1 || tok > vocab || rep < 1 || rep > vocab) {
      throw std::runtime_error(path.string() + ": truncated or invalid squeeze table");
    }
    if (filled[static_cast<size_t>(tok)]) {
      throw std::runtime_error(path.string() + ": duplicate token " + std::to_string(tok));
    }
    filled[static_cast<size_t>(tok)] = true;
    detector.map.table[static_cast<size_t>(tok)] = rep;
  }
  for (int32_t t = 1; t <= vocab; ++t) {
    const int32_t rep = detector.map.table[static_cast<size_t>(t)];
    if (detector.map.table[static_cast<size_t>(rep)] != rep) {
      throw std::runtime_error(path.string() + ": squeeze table is not idempotent at token " +
                               std::to_string(t));
    }
  }
  const auto reps = detector.map.representatives();
  if (static_cast<int32_t>(reps.size()) != detector.map.target_size) {
    throw std::runtime_error(path.string() + ": representative count does not match header");
  }
  // Rebuild member groups; centers are not persisted.
  for (int32_t rep : reps) {
    MergeGroup g;
    g.representative = rep;
    for (int32_t t = 1; t <= vocab; ++t) {
      if (detector.map.table[static_cast<size_t>(t)] == rep) g.members.push_back(t);
    }
    detector.map.groups.push_back(std::move(g));
  }
  return detector;
}

}  // namespace seqdef
