#include "seqdef/signatures.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace seqdef {

namespace {

// Distinct non-padding n-grams of one sequence.
std::set<Ngram> grams_of(const TokenSeq& seq, int32_t n) {
  std::set<Ngram> grams;
  const auto& t = seq.tokens;
  if (static_cast<int32_t>(t.size()) < n) return grams;
  for (size_t start = 0; start + static_cast<size_t>(n) <= t.size(); ++start) {
    Ngram gram(t.begin() + static_cast<std::ptrdiff_t>(start),
               t.begin() + static_cast<std::ptrdiff_t>(start) + n);
    if (std::find(gram.begin(), gram.end(), kPadIndex) != gram.end()) continue;
    grams.insert(std::move(gram));
  }
  return grams;
}

}  // namespace

std::map<Ngram, int64_t> count_ngrams(const std::vector<TokenSeq>& corpus, int32_t n) {
  if (n < 1) throw std::invalid_argument("count_ngrams: n must be >= 1");
  std::map<Ngram, int64_t> counts;
  for (const auto& seq : corpus) {
    for (const auto& gram : grams_of(seq, n)) ++counts[gram];
  }
  return counts;
}

NgramStats build_ngram_stats(const std::vector<TokenSeq>& x_adv,
                             const std::vector<TokenSeq>& x_benign_train, int32_t n) {
  NgramStats stats;
  stats.n = n;
  stats.adv_samples = static_cast<int64_t>(x_adv.size());
  stats.benign_samples = static_cast<int64_t>(x_benign_train.size());
  for (const auto& [gram, c] : count_ngrams(x_adv, n)) stats.counts[gram].first = c;
  for (const auto& [gram, c] : count_ngrams(x_benign_train, n)) stats.counts[gram].second = c;
  return stats;
}

double adv_ngram_probability(const NgramStats& stats, const Ngram& gram) {
  if (static_cast<int32_t>(gram.size()) != stats.n) {
    throw std::invalid_argument("adv_ngram_probability: gram length does not match n");
  }
  auto it = stats.counts.find(gram);
  if (it == stats.counts.end()) return 0.0;
  const auto [adv, benign] = it->second;
  if (adv + benign == 0) return 0.0;
  return static_cast<double>(adv) / static_cast<double>(adv + benign);
}

SignatureSet build_signature_set(const std::vector<TokenSeq>& x_adv,
                                 const std::vector<TokenSeq>& x_benign_train,
                                 const SignatureConfig& config) {
  if (x_adv.empty()) throw std::invalid_argument("build_signature_set: empty adversarial set");
  SignatureSet set;
  set.config = config;
  const NgramStats stats = build_ngram_stats(x_adv, x_benign_train, config.n);
  for (const auto& [gram, counts] : stats.counts) {
    if (counts.first == 0) continue;  // must be present in the adversarial corpus
    const double p = adv_ngram_probability(stats, gram);
    if (p >= config.threshold_p) set.signatures.emplace(gram, p);
  }
  return set;
}

SignatureVerdict detect(const SignatureSet& set, const TokenSeq& seq) {
  SignatureVerdict verdict;
  for (const auto& gram : grams_of(seq, set.config.n)) {
    if (set.signatures.count(gram)) verdict.matched.push_back(gram);
  }
  verdict.adversarial =
      static_cast<int32_t>(verdict.matched.size()) >= set.config.threshold_sigs;
  return verdict;
}

void save_signatures(const SignatureSet& set, const Vocabulary& vocab,
                     const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", set.config.threshold_p);
  out << "seqdef-signatures 1\n";
  out << set.config.n << ' ' << buf << ' ' << set.config.threshold_sigs << ' '
      << set.signatures.size() << '\n';
  for (const auto& [gram, p] : set.signatures) {
    for (size_t i = 0; i < gram.size(); ++i) {
      out << (i ? " " : "") << vocab.name(gram[i]);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("error writing " + path.string());
}

SignatureSet load_signatures(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "seqdef-signatures" || version != 1) {
    throw std::runtime_error(path.string() + ": not a signature file");
  }
  SignatureSet set;
  size_t count = 0;
  if (!(in >> set.config.n >> set.config.threshold_p >> set.config.threshold_sigs >> count) ||
      set.config.n < 1 || set.config.threshold_sigs < 1) {
    throw std::runtime_error(path.string() + ": bad signature header");
  }
  std::string line;
  std::getline(in, line);
  size_t loaded = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream words(line);
    Ngram gram;
    std::string word;
    while (words >> word) gram.push_back(vocab.lookup(word));
    if (static_cast<int32_t>(gram.size()) != set.config.n) {
      throw std::runtime_error(path.string() + ": signature of wrong length: " + line);
    }
    set.signatures.emplace(std::move(gram), set.config.threshold_p);
    ++loaded;
  }
  if (loaded != count) {
    throw std::runtime_error(path.string() + ": expected " + std::to_string(count) +
                             " signatures, found " + std::to_string(loaded));
  }
  return set;
}

DefenseDecision SignatureDefense::decide(const TokenSeq& seq) const {
  DefenseDecision decision;
  const auto verdict = detect(*set_, seq);
  const auto base = classifier_->classify_sequence(seq);
  decision.flagged = verdict.adversarial;
  decision.confidence = base.confidence;
  decision.label = decision.flagged ? Label::kMalicious : base.label;
  return decision;
}

}  // namespace seqdef
