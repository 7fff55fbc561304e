#pragma once

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qcs/autodiff.hpp"
#include "qcs/rng.hpp"

namespace qcs::nn {

using ad::Mat;
using ad::Var;
using ad::Vec;

// Ordered, named registry of trainable leaves. Registration order fixes both
// the initialization stream and the checkpoint layout.
class ParamStore {
 public:
  Var add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    for (const auto& [n, v] : items_)
      if (n == name) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    Var v = ad::leaf(Mat::Zero(rows, cols));
    items_.emplace_back(name, v);
    return v;
  }

  // Uniform fill in [-scale, scale], column-major entry order.
  void init_uniform(Rng& rng, double scale = 0.1) {
    for (auto& [name, v] : items_) {
      double* p = v->value.data();
      for (Eigen::Index i = 0; i < v->value.size(); ++i) p[i] = rng.uniform(-scale, scale);
    }
  }

  std::size_t count() const {
    std::size_t total = 0;
    for (const auto& [n, v] : items_) total += static_cast<std::size_t>(v->value.size());
    return total;
  }

  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }

  bool all_finite() const {
    for (const auto& [n, v] : items_)
      if (!v->value.allFinite()) return false;
    return true;
  }

  void zero_grad() {
    for (auto& [n, v] : items_) v->grad.setZero();
  }

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

inline constexpr std::uint32_t kParamBlobVersion = 1;

// Little-endian parameter blob: version, count, then (name, rows, cols, data)
// per parameter in registration order.
inline std::vector<char> serialize_params(const ParamStore& store) {
  std::vector<char> buf;
  auto put = [&buf](const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    buf.insert(buf.end(), c, c + n);
  };
  auto put_u32 = [&](std::uint32_t v) { put(&v, 4); };
  auto put_u64 = [&](std::uint64_t v) { put(&v, 8); };
  put_u32(kParamBlobVersion);
  put_u64(store.items().size());
  for (const auto& [name, v] : store.items()) {
    put_u64(name.size());
    put(name.data(), name.size());
    put_u64(static_cast<std::uint64_t>(v->value.rows()));
    put_u64(static_cast<std::uint64_t>(v->value.cols()));
    put(v->value.data(), sizeof(double) * static_cast<std::size_t>(v->value.size()));
  }
  return buf;
}

inline void deserialize_params(ParamStore& store, const std::vector<char>& buf) {
  std::size_t at = 0;
  auto need = [&](std::size_t n) {
    if (at + n > buf.size()) throw std::runtime_error("parameter blob truncated");
  };
  auto get_u32 = [&]() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + at, 4);
    at += 4;
    return v;
  };
  auto get_u64 = [&]() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, buf.data() + at, 8);
    at += 8;
    return v;
  };
  std::uint32_t version = get_u32();
  if (version != kParamBlobVersion)
    throw std::runtime_error("parameter blob format version " + std::to_string(version) +
                             " does not match expected " + std::to_string(kParamBlobVersion));
  std::uint64_t count = get_u64();
  if (count != store.items().size()) throw std::runtime_error("parameter blob: field count mismatch");
  for (const auto& [name, v] : store.items()) {
    std::uint64_t len = get_u64();
    need(len);
    std::string got(buf.data() + at, len);
    at += len;
    if (got != name) throw std::runtime_error("parameter blob: expected " + name + ", found " + got);
    auto rows = static_cast<Eigen::Index>(get_u64());
    auto cols = static_cast<Eigen::Index>(get_u64());
    if (rows != v->value.rows() || cols != v->value.cols())
      throw std::runtime_error("parameter blob: shape mismatch for " + name);
    std::size_t bytes = sizeof(double) * static_cast<std::size_t>(rows * cols);
    need(bytes);
    std::memcpy(v->value.data(), buf.data() + at, bytes);
    at += bytes;
  }
}

inline void write_file(const std::string& path, const std::vector<char>& buf) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  std::streamsize n = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(n));
  in.read(buf.data(), n);
  return buf;
}

// Adam with optional global-norm gradient clipping. State lives per parameter
// in registration order; steps are fully deterministic.
class Adam {
 public:
  explicit Adam(ParamStore& store, double lr, double clip_norm = 5.0, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : store_(store), lr_(lr), clip_norm_(clip_norm), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [n, v] : store.items()) {
      m_.push_back(Mat::Zero(v->value.rows(), v->value.cols()));
      v_.push_back(Mat::Zero(v->value.rows(), v->value.cols()));
    }
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

  void zero_grad() { store_.zero_grad(); }

  // Applies one update from the accumulated gradients. Throws if any updated
  // parameter stops being finite.
  void step() {
    double sq = 0;
    for (const auto& [n, p] : store_.items())
      if (p->grad.size() != 0) sq += p->grad.squaredNorm();
    double scale = 1.0;
    double norm = std::sqrt(sq);
    if (clip_norm_ > 0 && norm > clip_norm_) scale = clip_norm_ / norm;

    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    std::size_t i = 0;
    for (const auto& [name, p] : store_.items()) {
      Mat g = p->grad.size() == 0 ? Mat::Zero(p->value.rows(), p->value.cols())
                                  : Mat(p->grad * scale);
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
      Mat mhat = m_[i] / bc1;
      Mat vhat = v_[i] / bc2;
      p->value -= lr_ * (mhat.array() / (vhat.array().sqrt() + eps_)).matrix();
      if (!p->value.allFinite())
        throw std::runtime_error("non-finite parameter after update: " + name);
      ++i;
    }
  }

 private:
  ParamStore& store_;
  double lr_, clip_norm_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<Mat> m_, v_;
};

struct LstmState {
  Var h;
  Var c;
};

// Single LSTM cell; the four gates share one fused affine map.
class LstmCell {
 public:
  LstmCell() = default;
  LstmCell(ParamStore& store, const std::string& prefix, Eigen::Index input_dim,
           Eigen::Index hidden_dim)
      : hidden_(hidden_dim) {
    wx_ = store.add(prefix + ".wx", 4 * hidden_dim, input_dim);
    wh_ = store.add(prefix + ".wh", 4 * hidden_dim, hidden_dim);
    b_ = store.add(prefix + ".b", 4 * hidden_dim, 1);
  }

  Eigen::Index hidden_dim() const { return hidden_; }

  LstmState initial_state() const {
    return {ad::constant(Mat::Zero(hidden_, 1)), ad::constant(Mat::Zero(hidden_, 1))};
  }

  LstmState step(const Var& x, const LstmState& prev) const {
    Var z = ad::add(ad::add(ad::matmul(wx_, x), ad::matmul(wh_, prev.h)), b_);
    Var i = ad::sigmoid(ad::rows(z, 0, hidden_));
    Var f = ad::sigmoid(ad::rows(z, hidden_, hidden_));
    Var g = ad::tanh_(ad::rows(z, 2 * hidden_, hidden_));
    Var o = ad::sigmoid(ad::rows(z, 3 * hidden_, hidden_));
    Var c = ad::add(ad::mul(f, prev.c), ad::mul(i, g));
    Var h = ad::mul(o, ad::tanh_(c));
    return {h, c};
  }

 private:
  Eigen::Index hidden_ = 0;
  Var wx_, wh_, b_;
};

class Dense {
 public:
  Dense() = default;
  Dense(ParamStore& store, const std::string& prefix, Eigen::Index in_dim, Eigen::Index out_dim) {
    w_ = store.add(prefix + ".w", out_dim, in_dim);
    b_ = store.add(prefix + ".b", out_dim, 1);
  }
  Var operator()(const Var& x) const { return ad::add(ad::matmul(w_, x), b_); }

 private:
  Var w_, b_;
};

// Bi-directional LSTM pass over embedded positions. Returns per-position
// outputs (forward and backward states concatenated) plus the two final
// states.
struct BiLstmOut {
  std::vector<Var> outputs;  // each (2H x 1)
  Var final_fwd;             // (H x 1), state after the last position
  Var final_bwd;             // (H x 1), state after the first position
};

inline BiLstmOut bilstm_run(const LstmCell& fwd, const LstmCell& bwd,
                            const std::vector<Var>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("bilstm_run: empty input");
  std::vector<Var> hs_f(inputs.size()), hs_b(inputs.size());
  LstmState sf = fwd.initial_state();
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    sf = fwd.step(inputs[t], sf);
    hs_f[t] = sf.h;
  }
  LstmState sb = bwd.initial_state();
  for (std::size_t t = inputs.size(); t-- > 0;) {
    sb = bwd.step(inputs[t], sb);
    hs_b[t] = sb.h;
  }
  BiLstmOut out;
  out.outputs.reserve(inputs.size());
  for (std::size_t t = 0; t < inputs.size(); ++t) out.outputs.push_back(ad::vcat({hs_f[t], hs_b[t]}));
  out.final_fwd = hs_f.back();
  out.final_bwd = hs_b.front();
  return out;
}

}  // namespace qcs::nn
