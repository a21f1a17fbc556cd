#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "seqdef/data.hpp"

namespace seqdef {

enum class CellKind : uint8_t { kSimpleRnn = 0, kLstm = 1, kGru = 2 };
enum class Optimizer : uint8_t { kAdam = 0, kAdadelta = 1 };

const char* cell_name(CellKind cell);
CellKind parse_cell(const std::string& text);
const char* optimizer_name(Optimizer opt);
Optimizer parse_optimizer(const std::string& text);

struct ModelConfig {
  CellKind cell = CellKind::kLstm;
  int32_t hidden_units = 128;
  int32_t window = 140;
  int32_t vocab_width = 0;  // |D| + 1 one-hot channels, padding included
  double dropout = 0.2;
  bool bidirectional = false;
  int32_t depth = 1;  // stacked recurrent layers
  uint64_t seed = 0;
};

struct TrainConfig {
  Optimizer optimizer = Optimizer::kAdam;
  int32_t epochs = 10;
  int32_t batch_size = 32;
  double learning_rate = 0.0;  // 0 picks the optimizer default (adam 1e-3, adadelta 1.0)
  uint64_t seed = 0;
};

struct SequenceDecision {
  Label label = Label::kBenign;
  double confidence = 0.0;  // highest window confidence
  std::vector<double> window_confidences;
};

struct NamedTensor {
  std::string name;
  Eigen::MatrixXd value;  // vectors are stored as k x 1
};

// Windowed recurrent binary classifier over one-hot token windows.
//
// Architecture: `depth` recurrent layers (simple/LSTM/GRU cells, optionally
// bidirectional), final-state pooling, ReLU on the pooled features, then a
// dense layer to one logit with sigmoid read-out. Gate blocks are stacked
// row-wise inside each W/U/b tensor: LSTM order [i f g o], GRU order [z r n].
// Dropout (inputs and recurrent state, shared mask across time steps) is
// active only on the training path. All math is double precision.
class RnnClassifier {
 public:
  static RnnClassifier init(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  bool trained() const { return trained_; }

  // Inference on one token window of exactly config.window entries.
  double window_logit(std::span<const int32_t> window) const;
  double window_confidence(std::span<const int32_t> window) const;

  // Same network evaluated on a dense (window x vocab_width) input. The
  // one-hot encoding of a token window produces bitwise identical logits.
  double window_logit_dense(const Eigen::MatrixXd& x) const;

  // Training-mode evaluation with dropout masks derived from mask_seed.
  double window_confidence_train(std::span<const int32_t> window, uint64_t mask_seed) const;

  // Malicious iff any window confidence reaches the threshold.
  SequenceDecision classify_sequence(const TokenSeq& seq, double threshold = 0.5) const;

  // d(malicious logit) / d(one-hot input); rows = window positions,
  // columns = vocabulary channels (padding channel included).
  Eigen::MatrixXd input_jacobian(std::span<const int32_t> window) const;

  // BCE loss for one labeled window; a mask seed activates dropout with
  // masks derived from it, so repeated calls are reproducible.
  double window_loss(std::span<const int32_t> window, double y,
                     std::optional<uint64_t> mask_seed = std::nullopt) const;

  // Loss plus parameter gradients in checkpoint tensor order.
  std::pair<double, std::vector<Eigen::MatrixXd>> window_loss_gradients(
      std::span<const int32_t> window, double y,
      std::optional<uint64_t> mask_seed = std::nullopt) const;

  // Windowed BCE training; every window inherits its sequence label.
  // Returns the per-epoch mean loss. Throws if the loss turns non-finite.
  std::vector<double> fit(const Dataset& train, const TrainConfig& config);

  void save(const std::filesystem::path& path) const;
  static RnnClassifier load(const std::filesystem::path& path);

  // Raw parameter access (checkpoint layout order); used by tooling/tests.
  std::vector<NamedTensor>& tensors() { return tensors_; }
  const std::vector<NamedTensor>& tensors() const { return tensors_; }
  Eigen::MatrixXd& tensor(const std::string& name);

  bool same_parameters(const RnnClassifier& other) const;

 private:
  RnnClassifier() = default;

  struct Shape;
  struct Cache;
  struct Masks;
  void forward_window(const int32_t* tokens, const Eigen::MatrixXd* dense, const Masks* masks,
                      Cache& cache) const;
  void backward_window(const Cache& cache, double dlogit, const Masks* masks,
                       std::vector<Eigen::MatrixXd>* grads, Eigen::MatrixXd* input_grad) const;
  Masks draw_masks(uint64_t mask_seed) const;
  int dirs() const { return config_.bidirectional ? 2 : 1; }
  int gates() const;
  int feat_dim() const;
  int layer_input_dim(int layer) const;
  size_t tensor_index(int layer, int dir, int which) const;  // which: 0=W 1=U 2=b
  size_t dense_w_index() const;
  size_t dense_b_index() const;

  ModelConfig config_;
  std::vector<NamedTensor> tensors_;
  bool trained_ = false;
};

struct EvalStats {
  double accuracy = 0.0;
  double fpr = 0.0;
  size_t total = 0;
  size_t correct = 0;
  size_t benign_total = 0;
  size_t false_positives = 0;
};

EvalStats evaluate_accuracy(const RnnClassifier& model, const Dataset& dataset);

// Dense one-hot encoding of a token window (rows = positions).
Eigen::MatrixXd one_hot_window(std::span<const int32_t> window, int32_t vocab_width);

}  // namespace seqdef
