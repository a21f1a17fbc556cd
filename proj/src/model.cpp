#include "seqdef/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "seqdef/rng.hpp"

namespace seqdef {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Numerically stable BCE on the logit.
double bce_with_logit(double logit, double y) {
  return std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
}

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'S', 'Q', 'D', 'F'};
constexpr const char* kPooling = "final_state";

}  // namespace

const char* cell_name(CellKind cell) {
  switch (cell) {
    case CellKind::kSimpleRnn: return "rnn";
    case CellKind::kLstm: return "lstm";
    case CellKind::kGru: return "gru";
  }
  throw std::logic_error("cell_name: bad cell kind");
}

CellKind parse_cell(const std::string& text) {
  if (text == "rnn") return CellKind::kSimpleRnn;
  if (text == "lstm") return CellKind::kLstm;
  if (text == "gru") return CellKind::kGru;
  throw std::invalid_argument("unknown cell kind \"" + text + "\" (rnn|lstm|gru)");
}

const char* optimizer_name(Optimizer opt) {
  return opt == Optimizer::kAdam ? "adam" : "adadelta";
}

Optimizer parse_optimizer(const std::string& text) {
  if (text == "adam") return Optimizer::kAdam;
  if (text == "adadelta") return Optimizer::kAdadelta;
  throw std::invalid_argument("unknown optimizer \"" + text + "\" (adam|adadelta)");
}

int RnnClassifier::gates() const {
  switch (config_.cell) {
    case CellKind::kSimpleRnn: return 1;
    case CellKind::kLstm: return 4;
    case CellKind::kGru: return 3;
  }
  throw std::logic_error("gates: bad cell kind");
}

int RnnClassifier::feat_dim() const { return config_.hidden_units * dirs(); }

int RnnClassifier::layer_input_dim(int layer) const {
  return layer == 0 ? config_.vocab_width : config_.hidden_units * dirs();
}

size_t RnnClassifier::tensor_index(int layer, int dir, int which) const {
  return static_cast<size_t>((layer * dirs() + dir) * 3 + which);
}

size_t RnnClassifier::dense_w_index() const {
  return static_cast<size_t>(config_.depth * dirs() * 3);
}

size_t RnnClassifier::dense_b_index() const { return dense_w_index() + 1; }

RnnClassifier RnnClassifier::init(const ModelConfig& config) {
  if (config.vocab_width < 2) throw std::invalid_argument("init: vocab_width must be at least 2");
  if (config.hidden_units < 1) throw std::invalid_argument("init: hidden_units must be positive");
  if (config.window < 1) throw std::invalid_argument("init: window must be positive");
  if (config.depth < 1) throw std::invalid_argument("init: depth must be positive");
  if (config.dropout < 0.0 || config.dropout >= 1.0) {
    throw std::invalid_argument("init: dropout must lie in [0, 1)");
  }

  RnnClassifier model;
  model.config_ = config;
  const int h = config.hidden_units;
  const int g = model.gates();

  Rng rng(config.seed);
  auto fill = [&rng](Eigen::MatrixXd& m, double scale) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        m(r, c) = (2.0 * rng.unit() - 1.0) * scale;
      }
    }
  };

  for (int layer = 0; layer < config.depth; ++layer) {
    const int in_dim = model.layer_input_dim(layer);
    for (int dir = 0; dir < model.dirs(); ++dir) {
      const std::string prefix =
          "layer" + std::to_string(layer) + (dir == 0 ? ".fwd." : ".bwd.");
      NamedTensor w{prefix + "W", Eigen::MatrixXd(g * h, in_dim)};
      NamedTensor u{prefix + "U", Eigen::MatrixXd(g * h, h)};
      NamedTensor b{prefix + "b", Eigen::MatrixXd::Zero(g * h, 1)};
      fill(w.value, 1.0 / std::sqrt(static_cast<double>(in_dim)));
      fill(u.value, 1.0 / std::sqrt(static_cast<double>(h)));
      model.tensors_.push_back(std::move(w));
      model.tensors_.push_back(std::move(u));
      model.tensors_.push_back(std::move(b));
    }
  }
  NamedTensor dense_w{"dense.w", Eigen::MatrixXd(model.feat_dim(), 1)};
  fill(dense_w.value, 1.0 / std::sqrt(static_cast<double>(model.feat_dim())));
  model.tensors_.push_back(std::move(dense_w));
  model.tensors_.push_back({"dense.b", Eigen::MatrixXd::Zero(1, 1)});
  return model;
}

Eigen::MatrixXd& RnnClassifier::tensor(const std::string& name) {
  for (auto& t : tensors_) {
    if (t.name == name) return t.value;
  }
  throw std::out_of_range("tensor: no parameter named " + name);
}

bool RnnClassifier::same_parameters(const RnnClassifier& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  for (size_t i = 0; i < tensors_.size(); ++i) {
    const auto& a = tensors_[i].value;
    const auto& b = other.tensors_[i].value;
    if (tensors_[i].name != other.tensors_[i].name) return false;
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.size())) != 0) {
      return false;
    }
  }
  return true;
}

// Dropout masks in pre-scaled form: entry 0 drops, entry 1/(1-p) keeps.
// Empty vectors mean "no dropout" on that path.
struct RnnClassifier::Masks {
  std::vector<Eigen::VectorXd> input;                    // per layer
  std::vector<std::vector<Eigen::VectorXd>> recurrent;   // [layer][dir]
};

RnnClassifier::Masks RnnClassifier::draw_masks(uint64_t mask_seed) const {
  Masks masks;
  masks.input.resize(static_cast<size_t>(config_.depth));
  masks.recurrent.assign(static_cast<size_t>(config_.depth),
                         std::vector<Eigen::VectorXd>(static_cast<size_t>(dirs())));
  const double p = config_.dropout;
  if (p <= 0.0) return masks;
  Rng rng(mask_seed);
  const double keep_scale = 1.0 / (1.0 - p);
  auto draw = [&rng, p, keep_scale](Eigen::Index n) {
    Eigen::VectorXd mask(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mask[i] = rng.unit() < p ? 0.0 : keep_scale;
    }
    return mask;
  };
  for (int layer = 0; layer < config_.depth; ++layer) {
    masks.input[static_cast<size_t>(layer)] = draw(layer_input_dim(layer));
    for (int dir = 0; dir < dirs(); ++dir) {
      masks.recurrent[static_cast<size_t>(layer)][static_cast<size_t>(dir)] =
          draw(config_.hidden_units);
    }
  }
  return masks;
}

namespace {

struct DirCache {
  std::vector<Eigen::VectorXd> h;        // state at position t
  std::vector<Eigen::VectorXd> h_tilde;  // recurrent-masked previous state
  // LSTM
  std::vector<Eigen::VectorXd> gi, gf, gg, go, c, tc;
  // GRU
  std::vector<Eigen::VectorXd> gz, gr, gn, rh;
};

}  // namespace

struct RnnClassifier::Cache {
  const int32_t* tokens = nullptr;
  Eigen::MatrixXd dense;                        // used when tokens == nullptr
  std::vector<Eigen::MatrixXd> layer_out;       // per layer: window x (h*dirs)
  std::vector<std::vector<DirCache>> scans;     // [layer][dir]
  Eigen::VectorXd feat;
  Eigen::VectorXd relu;
  double logit = 0.0;
};

void RnnClassifier::forward_window(const int32_t* tokens, const Eigen::MatrixXd* dense,
                                   const Masks* masks, Cache& cache) const {
  const int m = config_.window;
  const int h = config_.hidden_units;
  const int d_count = dirs();
  const int g = gates();

  cache.tokens = tokens;
  if (tokens == nullptr) {
    cache.dense = *dense;
  }
  cache.layer_out.assign(static_cast<size_t>(config_.depth),
                         Eigen::MatrixXd::Zero(m, h * d_count));
  cache.scans.assign(static_cast<size_t>(config_.depth),
                     std::vector<DirCache>(static_cast<size_t>(d_count)));

  for (int layer = 0; layer < config_.depth; ++layer) {
    const Eigen::VectorXd* in_mask = nullptr;
    if (masks && masks->input[static_cast<size_t>(layer)].size() > 0) {
      in_mask = &masks->input[static_cast<size_t>(layer)];
    }
    for (int dir = 0; dir < d_count; ++dir) {
      const auto& W = tensors_[tensor_index(layer, dir, 0)].value;
      const auto& U = tensors_[tensor_index(layer, dir, 1)].value;
      const Eigen::VectorXd b = tensors_[tensor_index(layer, dir, 2)].value.col(0);
      const Eigen::VectorXd* rec_mask = nullptr;
      if (masks &&
          masks->recurrent[static_cast<size_t>(layer)][static_cast<size_t>(dir)].size() > 0) {
        rec_mask = &masks->recurrent[static_cast<size_t>(layer)][static_cast<size_t>(dir)];
      }

      DirCache& sc = cache.scans[static_cast<size_t>(layer)][static_cast<size_t>(dir)];
      sc.h.assign(static_cast<size_t>(m), Eigen::VectorXd());
      sc.h_tilde.assign(static_cast<size_t>(m), Eigen::VectorXd());
      if (config_.cell == CellKind::kLstm) {
        sc.gi.assign(static_cast<size_t>(m), Eigen::VectorXd());
        sc.gf.assign(static_cast<size_t>(m), Eigen::VectorXd());
        sc.gg.assign(static_cast<size_t>(m), Eigen::VectorXd());
        sc.go.assign(static_cast<size_t>(m), Eigen::VectorXd());
        sc.c.assign(static_cast<size_t>(m), Eigen::VectorXd());
        sc.tc.assign(static_cast<size_t>(m), Eigen::VectorXd());
      } else if (config_.cell == CellKind::kGru) {
        sc.gz.assign(static_cast<size_t>(m), Eigen::VectorXd());
        sc.gr.assign(static_cast<size_t>(m), Eigen::VectorXd());
        sc.gn.assign(static_cast<size_t>(m), Eigen::VectorXd());
        sc.rh.assign(static_cast<size_t>(m), Eigen::VectorXd());
      }

      Eigen::VectorXd h_prev = Eigen::VectorXd::Zero(h);
      Eigen::VectorXd c_prev = Eigen::VectorXd::Zero(h);
      for (int s = 0; s < m; ++s) {
        const int t = dir == 0 ? s : m - 1 - s;

        Eigen::VectorXd wx(g * h);
        if (layer == 0 && tokens != nullptr) {
          const int32_t tok = tokens[t];
          const double scale = in_mask ? (*in_mask)[tok] : 1.0;
          wx = W.col(tok) * scale;
        } else {
          Eigen::VectorXd x = layer == 0
                                  ? Eigen::VectorXd(cache.dense.row(t).transpose())
                                  : Eigen::VectorXd(
                                        cache.layer_out[static_cast<size_t>(layer - 1)]
                                            .row(t)
                                            .transpose());
          if (in_mask) x.array() *= in_mask->array();
          wx.noalias() = W * x;
        }

        Eigen::VectorXd h_tilde = rec_mask ? h_prev.cwiseProduct(*rec_mask) : h_prev;
        Eigen::VectorXd h_new;
        switch (config_.cell) {
          case CellKind::kSimpleRnn: {
            Eigen::VectorXd a = wx + U * h_tilde + b;
            h_new = a.array().tanh();
            break;
          }
          case CellKind::kLstm: {
            Eigen::VectorXd pre = wx + U * h_tilde + b;
            Eigen::VectorXd gi = pre.segment(0, h).unaryExpr([](double v) { return sigmoid(v); });
            Eigen::VectorXd gf = pre.segment(h, h).unaryExpr([](double v) { return sigmoid(v); });
            Eigen::VectorXd gg = pre.segment(2 * h, h).array().tanh();
            Eigen::VectorXd go = pre.segment(3 * h, h).unaryExpr([](double v) { return sigmoid(v); });
            Eigen::VectorXd c = gf.cwiseProduct(c_prev) + gi.cwiseProduct(gg);
            Eigen::VectorXd tc = c.array().tanh();
            h_new = go.cwiseProduct(tc);
            sc.gi[static_cast<size_t>(t)] = std::move(gi);
            sc.gf[static_cast<size_t>(t)] = std::move(gf);
            sc.gg[static_cast<size_t>(t)] = std::move(gg);
            sc.go[static_cast<size_t>(t)] = std::move(go);
            sc.c[static_cast<size_t>(t)] = c;
            sc.tc[static_cast<size_t>(t)] = std::move(tc);
            c_prev = std::move(c);
            break;
          }
          case CellKind::kGru: {
            Eigen::VectorXd az = wx.segment(0, h) + U.middleRows(0, h) * h_tilde + b.segment(0, h);
            Eigen::VectorXd ar = wx.segment(h, h) + U.middleRows(h, h) * h_tilde + b.segment(h, h);
            Eigen::VectorXd gz = az.unaryExpr([](double v) { return sigmoid(v); });
            Eigen::VectorXd gr = ar.unaryExpr([](double v) { return sigmoid(v); });
            Eigen::VectorXd rh = gr.cwiseProduct(h_tilde);
            Eigen::VectorXd an =
                wx.segment(2 * h, h) + U.middleRows(2 * h, h) * rh + b.segment(2 * h, h);
            Eigen::VectorXd gn = an.array().tanh();
            h_new = (Eigen::VectorXd::Ones(h) - gz).cwiseProduct(gn) + gz.cwiseProduct(h_prev);
            sc.gz[static_cast<size_t>(t)] = std::move(gz);
            sc.gr[static_cast<size_t>(t)] = std::move(gr);
            sc.gn[static_cast<size_t>(t)] = std::move(gn);
            sc.rh[static_cast<size_t>(t)] = std::move(rh);
            break;
          }
        }
        sc.h_tilde[static_cast<size_t>(t)] = std::move(h_tilde);
        sc.h[static_cast<size_t>(t)] = h_new;
        cache.layer_out[static_cast<size_t>(layer)].row(t).segment(dir * h, h) =
            h_new.transpose();
        h_prev = std::move(h_new);
      }
    }
  }

  cache.feat.resize(feat_dim());
  cache.feat.segment(0, h) = cache.scans[static_cast<size_t>(config_.depth - 1)][0].h
      [static_cast<size_t>(m - 1)];
  if (d_count == 2) {
    cache.feat.segment(h, h) = cache.scans[static_cast<size_t>(config_.depth - 1)][1].h[0];
  }
  cache.relu = cache.feat.cwiseMax(0.0);
  cache.logit = tensors_[dense_w_index()].value.col(0).dot(cache.relu) +
                tensors_[dense_b_index()].value(0, 0);
}

void RnnClassifier::backward_window(const Cache& cache, double dlogit, const Masks* masks,
                                    std::vector<Eigen::MatrixXd>* grads,
                                    Eigen::MatrixXd* input_grad) const {
  const int m = config_.window;
  const int h = config_.hidden_units;
  const int d_count = dirs();

  if (grads) {
    (*grads)[dense_w_index()].col(0) += cache.relu * dlogit;
    (*grads)[dense_b_index()](0, 0) += dlogit;
  }

  Eigen::VectorXd dfeat = tensors_[dense_w_index()].value.col(0) * dlogit;
  for (Eigen::Index k = 0; k < dfeat.size(); ++k) {
    if (cache.feat[k] <= 0.0) dfeat[k] = 0.0;
  }

  Eigen::MatrixXd d_out = Eigen::MatrixXd::Zero(m, h * d_count);
  d_out.row(m - 1).segment(0, h) += dfeat.segment(0, h).transpose();
  if (d_count == 2) {
    d_out.row(0).segment(h, h) += dfeat.segment(h, h).transpose();
  }

  for (int layer = config_.depth - 1; layer >= 0; --layer) {
    const Eigen::VectorXd* in_mask = nullptr;
    if (masks && masks->input[static_cast<size_t>(layer)].size() > 0) {
      in_mask = &masks->input[static_cast<size_t>(layer)];
    }
    const bool want_d_in = layer > 0 || input_grad != nullptr;
    Eigen::MatrixXd d_in;
    if (want_d_in) d_in = Eigen::MatrixXd::Zero(m, layer_input_dim(layer));

    for (int dir = 0; dir < d_count; ++dir) {
      const auto& W = tensors_[tensor_index(layer, dir, 0)].value;
      const auto& U = tensors_[tensor_index(layer, dir, 1)].value;
      Eigen::MatrixXd* gW = grads ? &(*grads)[tensor_index(layer, dir, 0)] : nullptr;
      Eigen::MatrixXd* gU = grads ? &(*grads)[tensor_index(layer, dir, 1)] : nullptr;
      Eigen::MatrixXd* gb = grads ? &(*grads)[tensor_index(layer, dir, 2)] : nullptr;
      const Eigen::VectorXd* rec_mask = nullptr;
      if (masks &&
          masks->recurrent[static_cast<size_t>(layer)][static_cast<size_t>(dir)].size() > 0) {
        rec_mask = &masks->recurrent[static_cast<size_t>(layer)][static_cast<size_t>(dir)];
      }
      const DirCache& sc = cache.scans[static_cast<size_t>(layer)][static_cast<size_t>(dir)];

      Eigen::VectorXd dh_carry = Eigen::VectorXd::Zero(h);
      Eigen::VectorXd dc_carry = Eigen::VectorXd::Zero(h);
      for (int s = m - 1; s >= 0; --s) {
        // Reverse of the scan: dir 0 walks t = m-1..0, dir 1 walks t = 0..m-1.
        const int t = dir == 0 ? s : m - 1 - s;
        const int pt = dir == 0 ? t - 1 : t + 1;  // scan-order predecessor
        const bool has_prev = pt >= 0 && pt < m;

        Eigen::VectorXd dh =
            d_out.row(t).segment(dir * h, h).transpose() + dh_carry;
        const Eigen::VectorXd& h_tilde = sc.h_tilde[static_cast<size_t>(t)];
        Eigen::VectorXd da;       // gate preactivation gradients, stacked
        Eigen::VectorXd dh_prev;  // gradient into the scan predecessor state

        switch (config_.cell) {
          case CellKind::kSimpleRnn: {
            const Eigen::VectorXd& ht = sc.h[static_cast<size_t>(t)];
            da = dh.cwiseProduct(Eigen::VectorXd::Ones(h) - ht.cwiseProduct(ht));
            dh_prev = U.transpose() * da;
            if (rec_mask) dh_prev.array() *= rec_mask->array();
            if (gU) gU->noalias() += da * h_tilde.transpose();
            break;
          }
          case CellKind::kLstm: {
            const Eigen::VectorXd& gi = sc.gi[static_cast<size_t>(t)];
            const Eigen::VectorXd& gf = sc.gf[static_cast<size_t>(t)];
            const Eigen::VectorXd& gg = sc.gg[static_cast<size_t>(t)];
            const Eigen::VectorXd& go = sc.go[static_cast<size_t>(t)];
            const Eigen::VectorXd& tc = sc.tc[static_cast<size_t>(t)];
            const Eigen::VectorXd c_prev =
                has_prev ? sc.c[static_cast<size_t>(pt)] : Eigen::VectorXd::Zero(h);
            Eigen::VectorXd do_ = dh.cwiseProduct(tc);
            Eigen::VectorXd dc =
                dc_carry + dh.cwiseProduct(go).cwiseProduct(
                               Eigen::VectorXd::Ones(h) - tc.cwiseProduct(tc));
            Eigen::VectorXd di = dc.cwiseProduct(gg);
            Eigen::VectorXd dg = dc.cwiseProduct(gi);
            Eigen::VectorXd df = dc.cwiseProduct(c_prev);
            dc_carry = dc.cwiseProduct(gf);
            da.resize(4 * h);
            da.segment(0, h) =
                di.cwiseProduct(gi).cwiseProduct(Eigen::VectorXd::Ones(h) - gi);
            da.segment(h, h) =
                df.cwiseProduct(gf).cwiseProduct(Eigen::VectorXd::Ones(h) - gf);
            da.segment(2 * h, h) =
                dg.cwiseProduct(Eigen::VectorXd::Ones(h) - gg.cwiseProduct(gg));
            da.segment(3 * h, h) =
                do_.cwiseProduct(go).cwiseProduct(Eigen::VectorXd::Ones(h) - go);
            dh_prev = U.transpose() * da;
            if (rec_mask) dh_prev.array() *= rec_mask->array();
            if (gU) gU->noalias() += da * h_tilde.transpose();
            break;
          }
          case CellKind::kGru: {
            const Eigen::VectorXd& gz = sc.gz[static_cast<size_t>(t)];
            const Eigen::VectorXd& gr = sc.gr[static_cast<size_t>(t)];
            const Eigen::VectorXd& gn = sc.gn[static_cast<size_t>(t)];
            const Eigen::VectorXd& rh = sc.rh[static_cast<size_t>(t)];
            const Eigen::VectorXd h_prev_raw =
                has_prev ? sc.h[static_cast<size_t>(pt)] : Eigen::VectorXd::Zero(h);
            Eigen::VectorXd dn = dh.cwiseProduct(Eigen::VectorXd::Ones(h) - gz);
            Eigen::VectorXd dz = dh.cwiseProduct(h_prev_raw - gn);
            dh_prev = dh.cwiseProduct(gz);  // leak path uses the raw state
            Eigen::VectorXd dan =
                dn.cwiseProduct(Eigen::VectorXd::Ones(h) - gn.cwiseProduct(gn));
            Eigen::VectorXd drh = U.middleRows(2 * h, h).transpose() * dan;
            Eigen::VectorXd dr = drh.cwiseProduct(h_tilde);
            Eigen::VectorXd dh_tilde = drh.cwiseProduct(gr);
            Eigen::VectorXd daz =
                dz.cwiseProduct(gz).cwiseProduct(Eigen::VectorXd::Ones(h) - gz);
            Eigen::VectorXd dar =
                dr.cwiseProduct(gr).cwiseProduct(Eigen::VectorXd::Ones(h) - gr);
            dh_tilde.noalias() += U.middleRows(0, h).transpose() * daz;
            dh_tilde.noalias() += U.middleRows(h, h).transpose() * dar;
            if (rec_mask) dh_tilde.array() *= rec_mask->array();
            dh_prev += dh_tilde;
            da.resize(3 * h);
            da.segment(0, h) = daz;
            da.segment(h, h) = dar;
            da.segment(2 * h, h) = dan;
            if (gU) {
              gU->middleRows(0, h).noalias() += daz * h_tilde.transpose();
              gU->middleRows(h, h).noalias() += dar * h_tilde.transpose();
              gU->middleRows(2 * h, h).noalias() += dan * rh.transpose();
            }
            break;
          }
        }

        if (gb) gb->col(0) += da;
        if (gW) {
          if (layer == 0 && cache.tokens != nullptr) {
            const int32_t tok = cache.tokens[t];
            const double scale = in_mask ? (*in_mask)[tok] : 1.0;
            if (scale != 0.0) gW->col(tok) += da * scale;
          } else {
            Eigen::VectorXd x = layer == 0
                                    ? Eigen::VectorXd(cache.dense.row(t).transpose())
                                    : Eigen::VectorXd(
                                          cache.layer_out[static_cast<size_t>(layer - 1)]
                                              .row(t)
                                              .transpose());
            if (in_mask) x.array() *= in_mask->array();
            gW->noalias() += da * x.transpose();
          }
        }
        if (want_d_in) {
          Eigen::VectorXd dx = W.transpose() * da;
          if (in_mask) dx.array() *= in_mask->array();
          d_in.row(t) += dx.transpose();
        }
        dh_carry = std::move(dh_prev);
      }
    }

    if (layer > 0) {
      d_out = std::move(d_in);
    } else if (input_grad) {
      *input_grad = std::move(d_in);
    }
  }
}

double RnnClassifier::window_logit(std::span<const int32_t> window) const {
  if (static_cast<int32_t>(window.size()) != config_.window) {
    throw std::invalid_argument("window_logit: window length mismatch");
  }
  for (int32_t tok : window) {
    if (tok < 0 || tok >= config_.vocab_width) {
      throw std::invalid_argument("window_logit: token index out of range");
    }
  }
  Cache cache;
  forward_window(window.data(), nullptr, nullptr, cache);
  return cache.logit;
}

double RnnClassifier::window_confidence(std::span<const int32_t> window) const {
  return sigmoid(window_logit(window));
}

double RnnClassifier::window_logit_dense(const Eigen::MatrixXd& x) const {
  if (x.rows() != config_.window || x.cols() != config_.vocab_width) {
    throw std::invalid_argument("window_logit_dense: input shape mismatch");
  }
  Cache cache;
  forward_window(nullptr, &x, nullptr, cache);
  return cache.logit;
}

double RnnClassifier::window_confidence_train(std::span<const int32_t> window,
                                              uint64_t mask_seed) const {
  if (static_cast<int32_t>(window.size()) != config_.window) {
    throw std::invalid_argument("window_confidence_train: window length mismatch");
  }
  Masks masks = draw_masks(mask_seed);
  Cache cache;
  forward_window(window.data(), nullptr, &masks, cache);
  return sigmoid(cache.logit);
}

SequenceDecision RnnClassifier::classify_sequence(const TokenSeq& seq, double threshold) const {
  SequenceDecision decision;
  decision.confidence = 0.0;
  for (const auto& window : split_windows(seq, config_.window)) {
    const double conf = window_confidence(window);
    decision.window_confidences.push_back(conf);
    decision.confidence = std::max(decision.confidence, conf);
  }
  decision.label =
      decision.confidence >= threshold ? Label::kMalicious : Label::kBenign;
  return decision;
}

Eigen::MatrixXd RnnClassifier::input_jacobian(std::span<const int32_t> window) const {
  if (static_cast<int32_t>(window.size()) != config_.window) {
    throw std::invalid_argument("input_jacobian: window length mismatch");
  }
  for (int32_t tok : window) {
    if (tok < 0 || tok >= config_.vocab_width) {
      throw std::invalid_argument("input_jacobian: token index out of range");
    }
  }
  Cache cache;
  forward_window(window.data(), nullptr, nullptr, cache);
  Eigen::MatrixXd jac;
  backward_window(cache, 1.0, nullptr, nullptr, &jac);
  return jac;
}

double RnnClassifier::window_loss(std::span<const int32_t> window, double y,
                                  std::optional<uint64_t> mask_seed) const {
  if (static_cast<int32_t>(window.size()) != config_.window) {
    throw std::invalid_argument("window_loss: window length mismatch");
  }
  Masks masks;
  const Masks* mp = nullptr;
  if (mask_seed.has_value() && config_.dropout > 0.0) {
    masks = draw_masks(*mask_seed);
    mp = &masks;
  }
  Cache cache;
  forward_window(window.data(), nullptr, mp, cache);
  return bce_with_logit(cache.logit, y);
}

std::pair<double, std::vector<Eigen::MatrixXd>> RnnClassifier::window_loss_gradients(
    std::span<const int32_t> window, double y, std::optional<uint64_t> mask_seed) const {
  if (static_cast<int32_t>(window.size()) != config_.window) {
    throw std::invalid_argument("window_loss_gradients: window length mismatch");
  }
  Masks masks;
  const Masks* mp = nullptr;
  if (mask_seed.has_value() && config_.dropout > 0.0) {
    masks = draw_masks(*mask_seed);
    mp = &masks;
  }
  Cache cache;
  forward_window(window.data(), nullptr, mp, cache);
  std::vector<Eigen::MatrixXd> grads;
  grads.reserve(tensors_.size());
  for (const auto& t : tensors_) {
    grads.emplace_back(Eigen::MatrixXd::Zero(t.value.rows(), t.value.cols()));
  }
  backward_window(cache, sigmoid(cache.logit) - y, mp, &grads, nullptr);
  return {bce_with_logit(cache.logit, y), std::move(grads)};
}

std::vector<double> RnnClassifier::fit(const Dataset& train, const TrainConfig& tc) {
  if (train.samples.empty()) throw std::invalid_argument("fit: empty training set");
  if (tc.batch_size < 1) throw std::invalid_argument("fit: batch_size must be positive");
  if (tc.epochs < 0) throw std::invalid_argument("fit: epochs must be non-negative");

  struct Row {
    std::vector<int32_t> window;
    double y;
  };
  std::vector<Row> rows;
  for (const auto& sample : train.samples) {
    for (int32_t tok : sample.seq.tokens) {
      if (tok < 0 || tok >= config_.vocab_width) {
        throw std::invalid_argument("fit: token index out of range in sample " + sample.id);
      }
    }
    for (auto& window : split_windows(sample.seq, config_.window)) {
      rows.push_back({std::move(window), sample.label == Label::kMalicious ? 1.0 : 0.0});
    }
  }

  const double lr = tc.learning_rate > 0.0
                        ? tc.learning_rate
                        : (tc.optimizer == Optimizer::kAdam ? 1e-3 : 1.0);

  std::vector<Eigen::MatrixXd> grads, opt_a, opt_b;
  grads.reserve(tensors_.size());
  for (const auto& t : tensors_) {
    grads.emplace_back(Eigen::MatrixXd::Zero(t.value.rows(), t.value.cols()));
    opt_a.emplace_back(Eigen::MatrixXd::Zero(t.value.rows(), t.value.cols()));
    opt_b.emplace_back(Eigen::MatrixXd::Zero(t.value.rows(), t.value.cols()));
  }
  int64_t adam_t = 0;

  std::vector<double> history;
  std::vector<size_t> order(rows.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(tc.seed, 0x50, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;

    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tc.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(tc.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      for (auto& g : grads) g.setZero();

      for (size_t k = start; k < end; ++k) {
        const Row& row = rows[order[k]];
        Masks masks = draw_masks(
            mix_seed(tc.seed, 0x6d00 + static_cast<uint64_t>(epoch), order[k]));
        Cache cache;
        forward_window(row.window.data(), nullptr, config_.dropout > 0.0 ? &masks : nullptr,
                       cache);
        const double loss = bce_with_logit(cache.logit, row.y);
        if (!std::isfinite(loss)) {
          throw std::runtime_error(
              "fit: training diverged (non-finite loss) at epoch " + std::to_string(epoch) +
              ", row " + std::to_string(order[k]));
        }
        loss_sum += loss;
        const double dlogit = (sigmoid(cache.logit) - row.y) * inv_batch;
        backward_window(cache, dlogit, config_.dropout > 0.0 ? &masks : nullptr, &grads,
                        nullptr);
      }

      if (tc.optimizer == Optimizer::kAdam) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++adam_t;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_t));
        for (size_t i = 0; i < tensors_.size(); ++i) {
          opt_a[i] = b1 * opt_a[i] + (1.0 - b1) * grads[i];
          opt_b[i] = b2 * opt_b[i] + (1.0 - b2) * grads[i].cwiseProduct(grads[i]);
          tensors_[i].value.array() -=
              lr * (opt_a[i].array() / c1) / ((opt_b[i].array() / c2).sqrt() + eps);
        }
      } else {
        constexpr double rho = 0.95, eps = 1e-6;
        for (size_t i = 0; i < tensors_.size(); ++i) {
          opt_a[i] = rho * opt_a[i] + (1.0 - rho) * grads[i].cwiseProduct(grads[i]);
          Eigen::ArrayXXd step = ((opt_b[i].array() + eps) / (opt_a[i].array() + eps)).sqrt() *
                                 grads[i].array();
          tensors_[i].value.array() -= lr * step;
          opt_b[i] = rho * opt_b[i] + (1.0 - rho) * (step * step).matrix();
        }
      }
    }

    history.push_back(loss_sum / static_cast<double>(rows.size()));
  }

  if (tc.epochs > 0) trained_ = true;
  return history;
}

namespace {

void write_bytes(std::ofstream& out, const void* data, size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ofstream& out, T value) {
  write_bytes(out, &value, sizeof value);
}

void write_string(std::ofstream& out, const std::string& s) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  write_bytes(out, s.data(), s.size());
}

void read_bytes(std::ifstream& in, void* data, size_t n) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
}

template <typename T>
T read_pod(std::ifstream& in) {
  T value;
  read_bytes(in, &value, sizeof value);
  return value;
}

std::string read_string(std::ifstream& in) {
  const uint32_t n = read_pod<uint32_t>(in);
  if (n > 4096) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  read_bytes(in, s.data(), n);
  return s;
}

}  // namespace

void RnnClassifier::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  write_bytes(out, kCheckpointMagic, 4);
  write_pod<uint32_t>(out, kCheckpointVersion);
  write_pod<uint8_t>(out, static_cast<uint8_t>(config_.cell));
  write_pod<int32_t>(out, config_.hidden_units);
  write_pod<int32_t>(out, config_.window);
  write_pod<int32_t>(out, config_.vocab_width);
  write_pod<double>(out, config_.dropout);
  write_pod<uint8_t>(out, config_.bidirectional ? 1 : 0);
  write_pod<int32_t>(out, config_.depth);
  write_pod<uint64_t>(out, config_.seed);
  write_string(out, kPooling);
  write_pod<uint8_t>(out, trained_ ? 1 : 0);
  write_pod<uint32_t>(out, static_cast<uint32_t>(tensors_.size()));
  for (const auto& t : tensors_) {
    write_string(out, t.name);
    write_pod<uint32_t>(out, static_cast<uint32_t>(t.value.rows()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(t.value.cols()));
    for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) {
        write_pod<double>(out, t.value(r, c));
      }
    }
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

RnnClassifier RnnClassifier::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  read_bytes(in, magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  const uint32_t version = read_pod<uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  ModelConfig config;
  config.cell = static_cast<CellKind>(read_pod<uint8_t>(in));
  config.hidden_units = read_pod<int32_t>(in);
  config.window = read_pod<int32_t>(in);
  config.vocab_width = read_pod<int32_t>(in);
  config.dropout = read_pod<double>(in);
  config.bidirectional = read_pod<uint8_t>(in) != 0;
  config.depth = read_pod<int32_t>(in);
  config.seed = read_pod<uint64_t>(in);
  const std::string pooling = read_string(in);
  if (pooling != kPooling) {
    throw std::runtime_error("checkpoint: unsupported pooling \"" + pooling + "\"");
  }
  const bool trained = read_pod<uint8_t>(in) != 0;

  RnnClassifier model = RnnClassifier::init(config);
  model.trained_ = trained;
  const uint32_t count = read_pod<uint32_t>(in);
  if (count != model.tensors_.size()) {
    throw std::runtime_error("checkpoint: tensor count mismatch");
  }
  for (auto& t : model.tensors_) {
    const std::string name = read_string(in);
    const uint32_t rows = read_pod<uint32_t>(in);
    const uint32_t cols = read_pod<uint32_t>(in);
    if (name != t.name || rows != static_cast<uint32_t>(t.value.rows()) ||
        cols != static_cast<uint32_t>(t.value.cols())) {
      throw std::runtime_error("checkpoint: tensor \"" + name +
                               "\" does not match the declared config");
    }
    for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) {
        t.value(r, c) = read_pod<double>(in);
      }
    }
  }
  return model;
}

EvalStats evaluate_accuracy(const RnnClassifier& model, const Dataset& dataset) {
  if (dataset.samples.empty()) throw std::invalid_argument("evaluate_accuracy: empty dataset");
  EvalStats stats;
  for (const auto& sample : dataset.samples) {
    const Label predicted = model.classify_sequence(sample.seq).label;
    ++stats.total;
    if (predicted == sample.label) ++stats.correct;
    if (sample.label == Label::kBenign) {
      ++stats.benign_total;
      if (predicted == Label::kMalicious) ++stats.false_positives;
    }
  }
  stats.accuracy = static_cast<double>(stats.correct) / static_cast<double>(stats.total);
  stats.fpr = stats.benign_total == 0
                  ? 0.0
                  : static_cast<double>(stats.false_positives) /
                        static_cast<double>(stats.benign_total);
  return stats;
}

Eigen::MatrixXd one_hot_window(std::span<const int32_t> window, int32_t vocab_width) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(window.size()),
                                            vocab_width);
  for (size_t t = 0; t < window.size(); ++t) {
    if (window[t] < 0 || window[t] >= vocab_width) {
      throw std::invalid_argument("one_hot_window: token index out of range");
    }
    x(static_cast<Eigen::Index>(t), window[t]) = 1.0;
  }
  return x;
}

}  // namespace seqdef
