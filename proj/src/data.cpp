#include "seqdef/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "nlohmann/json.hpp"
#include "seqdef/rng.hpp"

namespace seqdef {

using nlohmann::json;

const char* label_name(Label label) {
  return label == Label::kMalicious ? "malicious" : "benign";
}

Label parse_label(const std::string& text) {
  if (text == "benign") return Label::kBenign;
  if (text == "malicious") return Label::kMalicious;
  throw std::invalid_argument("unknown label \"" + text + "\"");
}

size_t TokenSeq::real_length() const {
  size_t end = tokens.size();
  while (end > 0 && tokens[end - 1] == kPadIndex) --end;
  return end;
}

size_t Dataset::count(Label label) const {
  size_t n = 0;
  for (const auto& s : samples) {
    if (s.label == label) ++n;
  }
  return n;
}

Vocabulary::Vocabulary(std::vector<std::string> sorted_names) : names_(std::move(sorted_names)) {
  for (size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].empty()) throw std::invalid_argument("vocabulary: empty token name");
    if (i > 0 && !(names_[i - 1] < names_[i])) {
      throw std::invalid_argument("vocabulary: names must be strictly increasing");
    }
    index_.emplace(names_[i], static_cast<int32_t>(i + 1));
  }
}

Vocabulary Vocabulary::from_corpus(const std::vector<RawSample>& corpus) {
  std::set<std::string> distinct;
  for (const auto& sample : corpus) {
    for (const auto& token : sample.tokens) {
      if (token.empty()) throw std::invalid_argument("vocabulary: empty token in corpus");
      distinct.insert(token);
    }
  }
  if (distinct.empty()) throw std::invalid_argument("vocabulary: corpus has no tokens");
  return Vocabulary(std::vector<std::string>(distinct.begin(), distinct.end()));
}

const std::string& Vocabulary::name(int32_t index) const {
  if (index < 1 || index > size()) {
    throw std::out_of_range("vocabulary: index " + std::to_string(index) + " out of range");
  }
  return names_[static_cast<size_t>(index - 1)];
}

int32_t Vocabulary::lookup(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw std::out_of_range("vocabulary: unknown token \"" + token + "\"");
  return it->second;
}

bool Vocabulary::contains(const std::string& token) const {
  return index_.find(token) != index_.end();
}

std::vector<std::vector<int32_t>> split_windows(const TokenSeq& seq, int32_t window) {
  if (window <= 0) throw std::invalid_argument("split_windows: window must be positive");
  const size_t m = static_cast<size_t>(window);
  const size_t len = seq.tokens.size();
  const size_t count = len == 0 ? 1 : (len + m - 1) / m;
  std::vector<std::vector<int32_t>> out(count, std::vector<int32_t>(m, kPadIndex));
  for (size_t i = 0; i < len; ++i) {
    out[i / m][i % m] = seq.tokens[i];
  }
  return out;
}

TokenSeq encode_tokens(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
  TokenSeq seq;
  seq.tokens.reserve(tokens.size());
  for (const auto& t : tokens) seq.tokens.push_back(vocab.lookup(t));
  return seq;
}

std::vector<std::string> decode_tokens(const TokenSeq& seq, const Vocabulary& vocab) {
  std::vector<std::string> out;
  const size_t real = seq.real_length();
  out.reserve(real);
  for (size_t i = 0; i < real; ++i) {
    if (seq.tokens[i] == kPadIndex) {
      throw std::invalid_argument("decode_tokens: interior padding at position " + std::to_string(i));
    }
    out.push_back(vocab.name(seq.tokens[i]));
  }
  return out;
}

Dataset encode_dataset(const std::vector<RawSample>& raw, const Vocabulary& vocab) {
  Dataset out;
  out.samples.reserve(raw.size());
  for (const auto& r : raw) {
    out.samples.push_back({r.id, r.label, encode_tokens(r.tokens, vocab)});
  }
  return out;
}

namespace {

// How much of each row's mass sits on its hot structure. Small vocabularies
// concentrate hard (short windows still need decisive per-token evidence);
// large ones spread evidence across many transitions so that no single token
// is conclusive and insertion attacks have room to steer.
double hot_concentration(int32_t vocab_size) {
  return std::clamp(0.95 - 0.011 * static_cast<double>(vocab_size), 0.42, 0.86);
}

// Benign rows concentrate a little harder than malicious ones: benign
// windows then carry wider margins (keeping the false positive rate down)
// and the benign anchors make sharper steering tokens.
double benign_concentration(int32_t vocab_size) {
  return std::min(0.88, 1.12 * hot_concentration(vocab_size));
}

// Benign anchor weight ladder: the class keeps three always-hot anchor
// tokens whose row weights fall off geometrically, so the strongest anchor
// is a stable steering token while its siblings grade down from it.
constexpr double kAnchorLadder = 4.0;

// One class half of the vocabulary, tokens [lo, hi]. Wide halves get the
// structured layout: an anchor triple at the front plus twin pairs behind
// it; narrow halves fall back to a plain hot-set draw.
struct HalfLayout {
  int32_t lo = 0;
  int32_t hi = 0;
  bool structured = false;
  std::vector<std::pair<int32_t, int32_t>> pairs;
};

HalfLayout half_layout(int32_t lo, int32_t hi) {
  HalfLayout half;
  half.lo = lo;
  half.hi = hi;
  half.structured = hi - lo + 1 >= 9;
  if (half.structured) {
    for (int32_t t = lo + 3; t + 1 <= hi; t += 2) half.pairs.emplace_back(t, t + 1);
  }
  return half;
}

// Plain row: up to 4 hot next-tokens drawn from the half share `mass`, the
// rest of the vocabulary shares the floor uniformly.
std::vector<double> plain_row(int32_t vocab_size, const HalfLayout& half, double mass, Rng& rng) {
  std::vector<double> row(static_cast<size_t>(vocab_size), 0.0);
  const int span = half.hi - half.lo + 1;
  const int k = std::min(3, span);
  std::vector<int32_t> pool(static_cast<size_t>(span));
  for (int i = 0; i < span; ++i) pool[static_cast<size_t>(i)] = half.lo + i;
  rng.shuffle(pool);
  std::vector<double> weights(static_cast<size_t>(k));
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    weights[static_cast<size_t>(i)] = 0.25 + rng.unit();
    total += weights[static_cast<size_t>(i)];
  }
  for (int i = 0; i < k; ++i) {
    row[static_cast<size_t>(pool[static_cast<size_t>(i)] - 1)] = mass * weights[static_cast<size_t>(i)] / total;
  }
  const double floor_each = (1.0 - mass) / vocab_size;
  for (auto& v : row) v += floor_each;
  double sum = 0.0;
  for (double v : row) sum += v;
  for (auto& v : row) v /= sum;
  return row;
}

// Structured row: 42% of `mass` on the anchor triple (geometric ladder when
// `ladder`, near-equal otherwise), the rest on two twin pairs drawn from the
// half's pair list. Twins share their pair's hot membership with only a few
// percent of weight jitter, so they are near-synonyms row by row.
std::vector<double> structured_row(int32_t vocab_size, const HalfLayout& half, double mass,
                                   bool ladder, Rng& rng) {
  std::vector<double> row(static_cast<size_t>(vocab_size), 0.0);
  const double anchor_mass = 0.42 * mass;
  const double pair_mass = mass - anchor_mass;

  double anchor_w[3];
  double anchor_total = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double base = ladder ? std::pow(kAnchorLadder, 2 - a) : 1.0;
    anchor_w[a] = base * (0.94 + 0.12 * rng.unit());
    anchor_total += anchor_w[a];
  }
  for (int a = 0; a < 3; ++a) {
    row[static_cast<size_t>(half.lo - 1 + a)] = anchor_mass * anchor_w[a] / anchor_total;
  }

  std::vector<size_t> order(half.pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const size_t chosen = std::min<size_t>(2, order.size());
  std::vector<double> pair_w(chosen);
  double pair_total = 0.0;
  for (size_t i = 0; i < chosen; ++i) {
    pair_w[i] = 0.25 + rng.unit();
    pair_total += pair_w[i];
  }
  for (size_t i = 0; i < chosen; ++i) {
    const auto& pr = half.pairs[order[i]];
    const double share = pair_mass * pair_w[i] / pair_total;
    const double a = 0.97 + 0.06 * rng.unit();
    const double b = 0.97 + 0.06 * rng.unit();
    row[static_cast<size_t>(pr.first - 1)] = share * a / (a + b);
    row[static_cast<size_t>(pr.second - 1)] = share * b / (a + b);
  }

  const double floor_each = (1.0 - mass) / vocab_size;
  for (auto& v : row) v += floor_each;
  double sum = 0.0;
  for (double v : row) sum += v;
  for (auto& v : row) v /= sum;
  return row;
}

std::vector<double> class_row(int32_t vocab_size, const HalfLayout& half, double mass,
                              bool ladder, Rng& rng) {
  return half.structured ? structured_row(vocab_size, half, mass, ladder, rng)
                         : plain_row(vocab_size, half, mass, rng);
}

TokenSeq sample_trace(const std::vector<std::vector<double>>& rows, int32_t len, Rng& rng) {
  TokenSeq seq;
  seq.tokens.reserve(static_cast<size_t>(len));
  int32_t prev = kPadIndex;
  for (int32_t i = 0; i < len; ++i) {
    const auto& row = rows[static_cast<size_t>(prev)];
    const int32_t next = static_cast<int32_t>(rng.weighted(row)) + 1;
    seq.tokens.push_back(next);
    prev = next;
  }
  return seq;
}

void fill_split(Dataset& split, const SynthSpec& spec, int benign, int malicious,
                const char* tag, Rng& rng) {
  char id[48];
  for (int i = 0; i < benign; ++i) {
    const int32_t len = static_cast<int32_t>(rng.int_in(spec.len_min, spec.len_max));
    std::snprintf(id, sizeof id, "b_%s_%05d", tag, i);
    split.samples.push_back({id, Label::kBenign, sample_trace(spec.benign_rows, len, rng)});
  }
  for (int i = 0; i < malicious; ++i) {
    const int32_t len = static_cast<int32_t>(rng.int_in(spec.len_min, spec.len_max));
    std::snprintf(id, sizeof id, "m_%s_%05d", tag, i);
    split.samples.push_back({id, Label::kMalicious, sample_trace(spec.malicious_rows, len, rng)});
  }
}

}  // namespace

SynthSpec SynthSpec::make(int32_t vocab_size, int32_t len_min, int32_t len_max,
                          double overlap, uint64_t seed) {
  if (vocab_size < 2) throw std::invalid_argument("SynthSpec: vocab_size must be at least 2");
  if (len_min < 1 || len_max < len_min) throw std::invalid_argument("SynthSpec: bad length range");
  if (overlap < 0.0 || overlap > 1.0) throw std::invalid_argument("SynthSpec: overlap outside [0,1]");
  SynthSpec spec;
  spec.vocab_size = vocab_size;
  spec.len_min = len_min;
  spec.len_max = len_max;
  spec.overlap = overlap;
  spec.seed = seed;

  const int32_t core = (vocab_size + 1) / 2;
  const HalfLayout benign_half = half_layout(1, core);
  const HalfLayout malicious_half = half_layout(core + 1, vocab_size);
  const double benign_mass = benign_concentration(vocab_size);
  const double malicious_mass = hot_concentration(vocab_size);
  Rng benign_rng(mix_seed(seed, 0xb1));
  Rng malicious_rng(mix_seed(seed, 0xa2));
  const size_t row_count = static_cast<size_t>(vocab_size) + 1;
  spec.benign_rows.resize(row_count);
  spec.malicious_rows.resize(row_count);
  for (size_t r = 0; r < row_count; ++r) {
    auto b = class_row(vocab_size, benign_half, benign_mass, true, benign_rng);
    auto m = class_row(vocab_size, malicious_half, malicious_mass, false, malicious_rng);
    spec.benign_rows[r] = b;
    auto& blended = spec.malicious_rows[r];
    blended.resize(static_cast<size_t>(vocab_size));
    for (size_t c = 0; c < blended.size(); ++c) {
      blended[c] = overlap * b[c] + (1.0 - overlap) * m[c];
    }
  }
  return spec;
}

SynthDataset generate_synthetic(const SynthSpec& spec, const SplitCounts& counts) {
  SynthDataset out;
  int digits = 1;
  for (int32_t v = spec.vocab_size; v >= 10 && digits < 10; v /= 10) ++digits;
  std::vector<std::string> names;
  names.reserve(static_cast<size_t>(spec.vocab_size));
  for (int32_t t = 1; t <= spec.vocab_size; ++t) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "api_%0*d", digits, t);
    names.emplace_back(buf);
  }
  out.vocab = Vocabulary(std::move(names));

  Rng train_rng(mix_seed(spec.seed, 1));
  Rng validation_rng(mix_seed(spec.seed, 2));
  Rng test_rng(mix_seed(spec.seed, 3));
  Rng holdout_rng(mix_seed(spec.seed, 4));
  fill_split(out.train, spec, counts.train_benign, counts.train_malicious, "train", train_rng);
  fill_split(out.validation, spec, counts.validation_benign, counts.validation_malicious, "val",
             validation_rng);
  fill_split(out.test, spec, counts.test_benign, counts.test_malicious, "test", test_rng);
  fill_split(out.holdout, spec, counts.holdout_benign, counts.holdout_malicious, "hold",
             holdout_rng);
  return out;
}

std::vector<RawSample> load_raw_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file " + path.string());
  std::vector<RawSample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": malformed JSON: " + e.what());
    }
    try {
      if (!obj.is_object()) throw std::invalid_argument("line is not a JSON object");
      RawSample sample;
      if (obj.contains("id")) sample.id = obj.at("id").get<std::string>();
      sample.label = parse_label(obj.at("label").get<std::string>());
      sample.tokens = obj.at("tokens").get<std::vector<std::string>>();
      out.push_back(std::move(sample));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_raw_dataset(const std::vector<RawSample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file " + path.string());
  for (const auto& sample : samples) {
    json obj;
    if (!sample.id.empty()) obj["id"] = sample.id;
    obj["label"] = label_name(sample.label);
    obj["tokens"] = sample.tokens;
    out << obj.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing dataset file " + path.string());
}

std::vector<RawSample> to_raw(const Dataset& dataset, const Vocabulary& vocab) {
  std::vector<RawSample> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) {
    out.push_back({s.id, s.label, decode_tokens(s.seq, vocab)});
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& path, const Vocabulary& vocab) {
  return encode_dataset(load_raw_dataset(path), vocab);
}

void save_dataset(const Dataset& dataset, const Vocabulary& vocab,
                  const std::filesystem::path& path) {
  save_raw_dataset(to_raw(dataset, vocab), path);
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary file " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    names.push_back(line);
  }
  return Vocabulary(std::move(names));
}

void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
  for (const auto& name : vocab.names()) out << name << '\n';
  if (!out) throw std::runtime_error("failed writing vocabulary file " + path.string());
}

Dataset filter_min_length(const Dataset& dataset, size_t min_len) {
  Dataset out;
  for (const auto& s : dataset.samples) {
    if (s.seq.real_length() >= min_len) out.samples.push_back(s);
  }
  return out;
}

}  // namespace seqdef
