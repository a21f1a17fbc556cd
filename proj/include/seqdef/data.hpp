#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace seqdef {

// Reserved padding index. It is part of the one-hot width but never appears
// in a vocabulary listing, an n-gram, or an insertion candidate set.
constexpr int32_t kPadIndex = 0;

enum class Label : uint8_t { kBenign = 0, kMalicious = 1 };

const char* label_name(Label label);
Label parse_label(const std::string& text);

// Token-index sequence. Indices lie in [0, |D|]; padding may only occur as a
// trailing run, so the real content is always a prefix.
struct TokenSeq {
  std::vector<int32_t> tokens;

  TokenSeq() = default;
  explicit TokenSeq(std::vector<int32_t> t) : tokens(std::move(t)) {}

  size_t size() const { return tokens.size(); }
  // Length of the prefix before the trailing padding run.
  size_t real_length() const;
  bool operator==(const TokenSeq& other) const = default;
};

struct LabeledSample {
  std::string id;
  Label label = Label::kBenign;
  TokenSeq seq;
};

struct Dataset {
  std::vector<LabeledSample> samples;

  size_t size() const { return samples.size(); }
  size_t count(Label label) const;
};

// Raw (string-token) form, as stored in JSONL files.
struct RawSample {
  std::string id;
  Label label = Label::kBenign;
  std::vector<std::string> tokens;
};

// Immutable token-name table. Index 0 is reserved for padding; real tokens
// occupy 1..size() in lexicographic name order.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> sorted_names);

  static Vocabulary from_corpus(const std::vector<RawSample>& corpus);

  int32_t size() const { return static_cast<int32_t>(names_.size()); }  // |D|
  int32_t width() const { return size() + 1; }                          // one-hot channels

  // Token name for index in [1, |D|].
  const std::string& name(int32_t index) const;
  // Index for a known token name; throws std::out_of_range otherwise.
  int32_t lookup(const std::string& token) const;
  bool contains(const std::string& token) const;

  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int32_t> index_;
};

// Fixed-length windows covering the sequence: ceil(len / window) of them,
// the last one padded with kPadIndex. An empty sequence yields one
// all-padding window so every sequence has at least one classifiable unit.
std::vector<std::vector<int32_t>> split_windows(const TokenSeq& seq, int32_t window);

TokenSeq encode_tokens(const std::vector<std::string>& tokens, const Vocabulary& vocab);
std::vector<std::string> decode_tokens(const TokenSeq& seq, const Vocabulary& vocab);

Dataset encode_dataset(const std::vector<RawSample>& raw, const Vocabulary& vocab);

// Order-1 synthetic trace family. The two class tables are blended so that
// `overlap` interpolates between fully separable (0) and identical (1)
// transition structure.
struct SynthSpec {
  int32_t vocab_size = 0;
  int32_t len_min = 0;
  int32_t len_max = 0;
  double overlap = 0.0;
  uint64_t seed = 0;

  // Row-stochastic tables, one row per previous token (row 0 = sequence
  // start), one column per next token (column t-1 for token t).
  std::vector<std::vector<double>> benign_rows;
  std::vector<std::vector<double>> malicious_rows;

  static SynthSpec make(int32_t vocab_size, int32_t len_min, int32_t len_max,
                        double overlap, uint64_t seed);
};

struct SplitCounts {
  int train_benign = 0;
  int train_malicious = 0;
  int validation_benign = 0;
  int validation_malicious = 0;
  int test_benign = 0;
  int test_malicious = 0;
  int holdout_benign = 0;
  int holdout_malicious = 0;
};

struct SynthDataset {
  Vocabulary vocab;
  Dataset train;
  Dataset validation;
  Dataset test;
  Dataset holdout;
};

SynthDataset generate_synthetic(const SynthSpec& spec, const SplitCounts& counts);

// JSONL dataset files: one object per line with keys "label", "tokens" and
// an optional "id". Parse errors carry the 1-based line number.
std::vector<RawSample> load_raw_dataset(const std::filesystem::path& path);
void save_raw_dataset(const std::vector<RawSample>& samples, const std::filesystem::path& path);

std::vector<RawSample> to_raw(const Dataset& dataset, const Vocabulary& vocab);

Dataset load_dataset(const std::filesystem::path& path, const Vocabulary& vocab);
void save_dataset(const Dataset& dataset, const Vocabulary& vocab, const std::filesystem::path& path);

// Vocabulary files: one token per line; line k (1-based) is index k.
Vocabulary load_vocabulary(const std::filesystem::path& path);
void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);

// Drops samples with fewer than min_len real tokens (ingestion filter).
Dataset filter_min_length(const Dataset& dataset, size_t min_len);

}  // namespace seqdef
