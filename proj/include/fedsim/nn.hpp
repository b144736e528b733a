#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// Two fixed architectures. PaperCNN is the image classifier used at CIFAR
// scale: conv(3->32, 3x3, pad 1) + ReLU + maxpool 2x2, conv(32->64, 3x3,
// pad 1) + ReLU + maxpool 2x2, fc(4096->128) + ReLU, fc(128->10), log-softmax.
// ToyMLP is a two-layer perceptron for desk-scale runs; its dimensions are
// chosen at init time and carried by the layer shapes.
enum class ArchitectureId : std::uint8_t { PaperCNN = 0, ToyMLP = 1 };

struct Architecture {
  ArchitectureId id = ArchitectureId::ToyMLP;
  int input_dim = 0;    // ToyMLP only
  int hidden_dim = 0;   // ToyMLP only
  int num_classes = 0;

  static Architecture paper_cnn() {
    Architecture a;
    a.id = ArchitectureId::PaperCNN;
    a.num_classes = 10;
    return a;
  }

  static Architecture toy_mlp(int input_dim, int hidden_dim, int num_classes) {
    if (input_dim < 1 || hidden_dim < 1 || num_classes < 2)
      throw domain_error("toy_mlp: dimensions must be positive, classes >= 2");
    Architecture a;
    a.id = ArchitectureId::ToyMLP;
    a.input_dim = input_dim;
    a.hidden_dim = hidden_dim;
    a.num_classes = num_classes;
    return a;
  }
};

// PaperCNN fixed sizes.
namespace cnn {
constexpr int kInChannels = 3;
constexpr int kInSide = 32;
constexpr int kConv1Out = 32;
constexpr int kConv2Out = 64;
constexpr int kKernel = 3;
constexpr int kFcHidden = 128;
constexpr int kClasses = 10;
constexpr int kPool1Side = 16;  // 32 -> pool -> 16
constexpr int kPool2Side = 8;   // 16 -> pool -> 8
constexpr int kFlat = kConv2Out * kPool2Side * kPool2Side;  // 4096
}  // namespace cnn

struct LayerParam {
  std::string name;
  Tensor value;
};

// Flat ordered collection of layer tensors; the unit that clients train and
// the server aggregates.
struct ModelParams {
  ArchitectureId arch = ArchitectureId::ToyMLP;
  std::vector<LayerParam> layers;

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.value.size();
    return n;
  }

  const Tensor& at(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return l.value;
    throw domain_error("ModelParams: no layer named " + name);
  }

  Tensor& at(const std::string& name) {
    for (auto& l : layers)
      if (l.name == name) return l.value;
    throw domain_error("ModelParams: no layer named " + name);
  }
};

inline void require_same_schema(const ModelParams& a, const ModelParams& b,
                                const char* context) {
  if (a.arch != b.arch || a.layers.size() != b.layers.size())
    throw domain_error(std::string(context) + ": architecture mismatch");
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].name != b.layers[i].name ||
        !a.layers[i].value.shape_equals(b.layers[i].value))
      throw domain_error(std::string(context) + ": layer mismatch at " +
                         a.layers[i].name);
  }
}

// Reconstructs the Architecture descriptor from layer shapes.
inline Architecture architecture_of(const ModelParams& m) {
  if (m.arch == ArchitectureId::PaperCNN) return Architecture::paper_cnn();
  const Tensor& w1 = m.at("fc1.weight");
  const Tensor& w2 = m.at("fc2.weight");
  return Architecture::toy_mlp(w1.shape[1], w1.shape[0], w2.shape[0]);
}

inline void validate_schema(const ModelParams& m) {
  auto expect = [&](const std::string& name, std::vector<int> shape) {
    const Tensor& t = m.at(name);
    if (t.shape != shape) {
      Tensor want;
      want.shape = std::move(shape);
      throw domain_error("model layer " + name + ": expected shape " +
                         want.shape_str() + ", got " + t.shape_str());
    }
  };
  if (m.arch == ArchitectureId::PaperCNN) {
    using namespace cnn;
    if (m.layers.size() != 8) throw domain_error("PaperCNN: expected 8 layers");
    expect("conv1.weight", {kConv1Out, kInChannels, kKernel, kKernel});
    expect("conv1.bias", {kConv1Out});
    expect("conv2.weight", {kConv2Out, kConv1Out, kKernel, kKernel});
    expect("conv2.bias", {kConv2Out});
    expect("fc1.weight", {kFcHidden, kFlat});
    expect("fc1.bias", {kFcHidden});
    expect("fc2.weight", {kClasses, kFcHidden});
    expect("fc2.bias", {kClasses});
  } else {
    if (m.layers.size() != 4) throw domain_error("ToyMLP: expected 4 layers");
    const Tensor& w1 = m.at("fc1.weight");
    if (w1.shape.size() != 2) throw domain_error("ToyMLP: fc1.weight not 2-d");
    const int hidden = w1.shape[0];
    const Tensor& w2 = m.at("fc2.weight");
    if (w2.shape.size() != 2 || w2.shape[1] != hidden)
      throw domain_error("ToyMLP: fc2.weight inconsistent with fc1");
    expect("fc1.bias", {hidden});
    expect("fc2.bias", {w2.shape[0]});
  }
}

// He-normal initialization: weights ~ N(0, 2/fan_in), biases zero.
// Deterministic for a fixed seed; layers are filled in declaration order.
inline ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
  Rng rng(derive_seed(seed, Stream::Init));
  auto he_tensor = [&](std::vector<int> shape, int fan_in) {
    Tensor t = Tensor::zeros(std::move(shape));
    const double stddev = std::sqrt(2.0 / fan_in);
    for (auto& v : t.data) v = static_cast<float>(rng.normal(0.0, stddev));
    return t;
  };
  ModelParams m;
  m.arch = arch.id;
  if (arch.id == ArchitectureId::PaperCNN) {
    using namespace cnn;
    const int fan1 = kInChannels * kKernel * kKernel;
    const int fan2 = kConv1Out * kKernel * kKernel;
    m.layers.push_back({"conv1.weight",
                        he_tensor({kConv1Out, kInChannels, kKernel, kKernel}, fan1)});
    m.layers.push_back({"conv1.bias", Tensor::zeros({kConv1Out})});
    m.layers.push_back({"conv2.weight",
                        he_tensor({kConv2Out, kConv1Out, kKernel, kKernel}, fan2)});
    m.layers.push_back({"conv2.bias", Tensor::zeros({kConv2Out})});
    m.layers.push_back({"fc1.weight", he_tensor({kFcHidden, kFlat}, kFlat)});
    m.layers.push_back({"fc1.bias", Tensor::zeros({kFcHidden})});
    m.layers.push_back({"fc2.weight", he_tensor({kClasses, kFcHidden}, kFcHidden)});
    m.layers.push_back({"fc2.bias", Tensor::zeros({kClasses})});
  } else {
    m.layers.push_back({"fc1.weight",
                        he_tensor({arch.hidden_dim, arch.input_dim}, arch.input_dim)});
    m.layers.push_back({"fc1.bias", Tensor::zeros({arch.hidden_dim})});
    m.layers.push_back({"fc2.weight",
                        he_tensor({arch.num_classes, arch.hidden_dim}, arch.hidden_dim)});
    m.layers.push_back({"fc2.bias", Tensor::zeros({arch.num_classes})});
  }
  return m;
}

enum class LossKind { NLL, NLLWithProximal };

struct LossConfig {
  LossKind kind = LossKind::NLL;
  double mu = 0.0;                      // proximal coefficient
  const ModelParams* anchor = nullptr;  // global weights, proximal variant only

  static LossConfig nll() { return LossConfig{}; }
  static LossConfig proximal(double mu, const ModelParams& anchor) {
    LossConfig c;
    c.kind = LossKind::NLLWithProximal;
    c.mu = mu;
    c.anchor = &anchor;
    return c;
  }
};

inline void validate_loss_config(const LossConfig& c, const ModelParams& model) {
  if (c.mu < 0.0) throw domain_error("loss config: mu must be nonnegative");
  if (c.kind == LossKind::NLLWithProximal) {
    if (c.anchor == nullptr)
      throw domain_error("loss config: proximal loss requires an anchor");
    require_same_schema(model, *c.anchor, "loss config anchor");
  }
}

namespace detail {

// Per-batch intermediate activations kept for backpropagation. Activations are
// float32; only the final log-softmax row reductions run in double.
struct ForwardTrace {
  // CNN path
  Tensor a1;          // conv1 post-ReLU   [B,32,32,32]
  Tensor p1;          // pool1 output      [B,32,16,16]
  std::vector<int> idx1;  // argmax flat indices into a1, one per p1 value
  Tensor a2;          // conv2 post-ReLU   [B,64,16,16]
  Tensor p2;          // pool2 output      [B,64,8,8]
  std::vector<int> idx2;
  // shared tail (CNN: input p2 flattened; MLP: input batch)
  Tensor fz1;         // fc1 pre-activation
  Tensor fa1;         // fc1 post-ReLU
  Tensor logits;      // fc2 output
};

inline void conv_forward(const Tensor& in, const Tensor& w, const Tensor& b,
                         Tensor& out, bool relu) {
  const int B = in.shape[0], IC = in.shape[1], H = in.shape[2], W = in.shape[3];
  const int OC = w.shape[0], K = w.shape[2];
  const int pad = K / 2;
  if (w.shape[1] != IC)
    throw domain_error("conv: input channels " + std::to_string(IC) +
                       " do not match weight " + w.shape_str());
  out = Tensor::zeros({B, OC, H, W});
  const std::size_t in_c = static_cast<std::size_t>(H) * W;
  const std::size_t in_b = in_c * IC;
  const std::size_t out_c = static_cast<std::size_t>(H) * W;
  const std::size_t out_b = out_c * OC;
  const std::size_t w_ic = static_cast<std::size_t>(K) * K;
  const std::size_t w_oc = w_ic * IC;
  for (int n = 0; n < B; ++n) {
    for (int oc = 0; oc < OC; ++oc) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          double acc = b.data[oc];
          for (int ic = 0; ic < IC; ++ic) {
            const float* wp = &w.data[oc * w_oc + ic * w_ic];
            const float* ip = &in.data[n * in_b + ic * in_c];
            for (int ky = 0; ky < K; ++ky) {
              const int iy = y + ky - pad;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < K; ++kx) {
                const int ix = x + kx - pad;
                if (ix < 0 || ix >= W) continue;
                acc += static_cast<double>(wp[ky * K + kx]) * ip[iy * W + ix];
              }
            }
          }
          if (relu && acc < 0.0) acc = 0.0;
          out.data[n * out_b + oc * out_c + y * W + x] = static_cast<float>(acc);
        }
      }
    }
  }
}

// 2x2 max pooling, stride 2; records the flat source index of each maximum
// (first in scan order on ties) for the backward pass.
inline void maxpool_forward(const Tensor& in, Tensor& out,
                            std::vector<int>& argmax) {
  const int B = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
  const int OH = H / 2, OW = W / 2;
  out = Tensor::zeros({B, C, OH, OW});
  argmax.assign(out.size(), 0);
  std::size_t o = 0;
  for (int n = 0; n < B; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * H * W;
      for (int y = 0; y < OH; ++y) {
        for (int x = 0; x < OW; ++x) {
          int best = static_cast<int>(base + (2 * y) * W + 2 * x);
          float bv = in.data[best];
          const int cand[3] = {static_cast<int>(base + (2 * y) * W + 2 * x + 1),
                               static_cast<int>(base + (2 * y + 1) * W + 2 * x),
                               static_cast<int>(base + (2 * y + 1) * W + 2 * x + 1)};
          for (int k = 0; k < 3; ++k) {
            if (in.data[cand[k]] > bv) {
              bv = in.data[cand[k]];
              best = cand[k];
            }
          }
          out.data[o] = bv;
          argmax[o] = best;
          ++o;
        }
      }
    }
  }
}

// y = x * W^T + b, optional ReLU; pre-activation stored in z.
inline void linear_forward(const Tensor& in, const Tensor& w, const Tensor& b,
                           Tensor& z, Tensor& a, bool relu) {
  const int B = in.shape[0];
  const int F = in.shape[1];
  const int O = w.shape[0];
  if (w.shape[1] != F)
    throw domain_error("linear: input dim " + std::to_string(F) +
                       " does not match weight " + w.shape_str());
  z = Tensor::zeros({B, O});
  for (int n = 0; n < B; ++n) {
    const float* xp = &in.data[static_cast<std::size_t>(n) * F];
    for (int o = 0; o < O; ++o) {
      const float* wp = &w.data[static_cast<std::size_t>(o) * F];
      double acc = b.data[o];
      for (int f = 0; f < F; ++f) acc += static_cast<double>(wp[f]) * xp[f];
      z.data[static_cast<std::size_t>(n) * O + o] = static_cast<float>(acc);
    }
  }
  if (relu) {
    a = z;
    for (auto& v : a.data) v = v > 0.0f ? v : 0.0f;
  }
}

// Row-wise log-softmax in double precision.
inline Tensor log_softmax(const Tensor& logits) {
  const int B = logits.shape[0], K = logits.shape[1];
  Tensor out = Tensor::zeros({B, K});
  for (int n = 0; n < B; ++n) {
    const float* row = &logits.data[static_cast<std::size_t>(n) * K];
    double mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(row[k]));
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += std::exp(row[k] - mx);
    const double lse = mx + std::log(sum);
    for (int k = 0; k < K; ++k)
      out.data[static_cast<std::size_t>(n) * K + k] =
          static_cast<float>(row[k] - lse);
  }
  return out;
}

inline Tensor flatten_keep_batch(const Tensor& t) {
  Tensor out = t;
  const int B = t.shape[0];
  out.shape = {B, static_cast<int>(t.size()) / B};
  return out;
}

inline Tensor forward_traced(const ModelParams& model, const Tensor& batch,
                             ForwardTrace& trace) {
  validate_schema(model);
  if (model.arch == ArchitectureId::PaperCNN) {
    using namespace cnn;
    if (batch.shape.size() != 4 || batch.shape[1] != kInChannels ||
        batch.shape[2] != kInSide || batch.shape[3] != kInSide)
      throw domain_error("forward: PaperCNN expects [B,3,32,32], got " +
                         batch.shape_str());
    conv_forward(batch, model.at("conv1.weight"), model.at("conv1.bias"),
                 trace.a1, /*relu=*/true);
    maxpool_forward(trace.a1, trace.p1, trace.idx1);
    conv_forward(trace.p1, model.at("conv2.weight"), model.at("conv2.bias"),
                 trace.a2, /*relu=*/true);
    maxpool_forward(trace.a2, trace.p2, trace.idx2);
    const Tensor flat = flatten_keep_batch(trace.p2);
    linear_forward(flat, model.at("fc1.weight"), model.at("fc1.bias"),
                   trace.fz1, trace.fa1, /*relu=*/true);
    Tensor unused;
    linear_forward(trace.fa1, model.at("fc2.weight"), model.at("fc2.bias"),
                   trace.logits, unused, /*relu=*/false);
  } else {
    const Architecture arch = architecture_of(model);
    if (batch.shape.size() != 2 || batch.shape[1] != arch.input_dim)
      throw domain_error("forward: ToyMLP expects [B," +
                         std::to_string(arch.input_dim) + "], got " +
                         batch.shape_str());
    linear_forward(batch, model.at("fc1.weight"), model.at("fc1.bias"),
                   trace.fz1, trace.fa1, /*relu=*/true);
    Tensor unused;
    linear_forward(trace.fa1, model.at("fc2.weight"), model.at("fc2.bias"),
                   trace.logits, unused, /*relu=*/false);
  }
  Tensor logp = log_softmax(trace.logits);
  require_finite(logp, "forward");
  return logp;
}

}  // namespace detail

// Forward pass; returns per-example log-probabilities [B, num_classes].
inline Tensor forward(const ModelParams& model, const Tensor& batch) {
  detail::ForwardTrace trace;
  return detail::forward_traced(model, batch, trace);
}

// Negative log-likelihood, mean over the batch, accumulated in double.
// The proximal variant adds (mu/2)*||model - anchor||^2 over all layers.
inline double nll_loss(const Tensor& logprobs, const std::vector<int>& labels,
                       const LossConfig& config, const ModelParams& model) {
  validate_loss_config(config, model);
  const int B = logprobs.shape[0], K = logprobs.shape[1];
  if (static_cast<int>(labels.size()) != B)
    throw domain_error("nll_loss: labels size does not match batch");
  double acc = 0.0;
  for (int n = 0; n < B; ++n) {
    const int y = labels[n];
    if (y < 0 || y >= K)
      throw domain_error("nll_loss: label " + std::to_string(y) +
                         " out of range [0," + std::to_string(K) + ")");
    acc -= logprobs.data[static_cast<std::size_t>(n) * K + y];
  }
  double loss = acc / B;
  if (config.kind == LossKind::NLLWithProximal && config.mu != 0.0) {
    double sq = 0.0;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      const auto& mv = model.layers[l].value.data;
      const auto& av = config.anchor->layers[l].value.data;
      for (std::size_t i = 0; i < mv.size(); ++i) {
        const double d = static_cast<double>(mv[i]) - av[i];
        sq += d * d;
      }
    }
    loss += 0.5 * config.mu * sq;
  }
  if (!std::isfinite(loss)) throw numeric_error("nll_loss: non-finite loss");
  return loss;
}

namespace detail {

// Accumulates per-parameter gradients in double, mirroring the model layout.
struct GradAccum {
  std::vector<std::vector<double>> grads;

  explicit GradAccum(const ModelParams& m) {
    grads.reserve(m.layers.size());
    for (const auto& l : m.layers)
      grads.emplace_back(l.value.size(), 0.0);
  }

  ModelParams finish(const ModelParams& m) const {
    ModelParams out;
    out.arch = m.arch;
    out.layers.reserve(m.layers.size());
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      Tensor t = Tensor::zeros(m.layers[l].value.shape);
      for (std::size_t i = 0; i < t.data.size(); ++i)
        t.data[i] = static_cast<float>(grads[l][i]);
      require_finite(t, "backward");
      out.layers.push_back({m.layers[l].name, std::move(t)});
    }
    return out;
  }
};

inline void linear_backward(const Tensor& in, const Tensor& w,
                            const std::vector<double>& dout,
                            std::vector<double>& dw, std::vector<double>& db,
                            std::vector<double>* din) {
  const int B = in.shape[0], F = in.shape[1], O = w.shape[0];
  for (int n = 0; n < B; ++n) {
    const float* xp = &in.data[static_cast<std::size_t>(n) * F];
    const double* dp = &dout[static_cast<std::size_t>(n) * O];
    for (int o = 0; o < O; ++o) {
      const double d = dp[o];
      if (d == 0.0) continue;
      db[o] += d;
      double* dwp = &dw[static_cast<std::size_t>(o) * F];
      for (int f = 0; f < F; ++f) dwp[f] += d * xp[f];
    }
    if (din) {
      double* dip = &(*din)[static_cast<std::size_t>(n) * F];
      for (int o = 0; o < O; ++o) {
        const double d = dp[o];
        if (d == 0.0) continue;
        const float* wp = &w.data[static_cast<std::size_t>(o) * F];
        for (int f = 0; f < F; ++f) dip[f] += d * wp[f];
      }
    }
  }
}

inline void conv_backward(const Tensor& in, const Tensor& w,
                          const std::vector<double>& dout,
                          std::vector<double>& dw, std::vector<double>& db,
                          std::vector<double>* din) {
  const int B = in.shape[0], IC = in.shape[1], H = in.shape[2], W = in.shape[3];
  const int OC = w.shape[0], K = w.shape[2];
  const int pad = K / 2;
  const std::size_t in_c = static_cast<std::size_t>(H) * W;
  const std::size_t in_b = in_c * IC;
  const std::size_t out_c = static_cast<std::size_t>(H) * W;
  const std::size_t out_b = out_c * OC;
  const std::size_t w_ic = static_cast<std::size_t>(K) * K;
  const std::size_t w_oc = w_ic * IC;
  for (int n = 0; n < B; ++n) {
    for (int oc = 0; oc < OC; ++oc) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const double d = dout[n * out_b + oc * out_c + y * W + x];
          if (d == 0.0) continue;
          db[oc] += d;
          for (int ic = 0; ic < IC; ++ic) {
            double* dwp = &dw[oc * w_oc + ic * w_ic];
            const float* ip = &in.data[n * in_b + ic * in_c];
            double* dip = din ? &(*din)[n * in_b + ic * in_c] : nullptr;
            const float* wp = &w.data[oc * w_oc + ic * w_ic];
            for (int ky = 0; ky < K; ++ky) {
              const int iy = y + ky - pad;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < K; ++kx) {
                const int ix = x + kx - pad;
                if (ix < 0 || ix >= W) continue;
                dwp[ky * K + kx] += d * ip[iy * W + ix];
                if (dip) dip[iy * W + ix] += d * wp[ky * K + kx];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// Backpropagation for the mean-NLL loss (plus proximal term when configured).
// Returns gradients with the same layer layout as the model.
inline ModelParams backward(const ModelParams& model, const Tensor& batch,
                            const std::vector<int>& labels,
                            const LossConfig& config) {
  validate_loss_config(config, model);
  detail::ForwardTrace trace;
  const Tensor logp = detail::forward_traced(model, batch, trace);
  const int B = logp.shape[0], K = logp.shape[1];
  if (static_cast<int>(labels.size()) != B)
    throw domain_error("backward: labels size does not match batch");

  // d(mean NLL)/d(logits) = (softmax - onehot) / B
  std::vector<double> dlogits(static_cast<std::size_t>(B) * K);
  for (int n = 0; n < B; ++n) {
    const int y = labels[n];
    if (y < 0 || y >= K)
      throw domain_error("backward: label out of range");
    for (int k = 0; k < K; ++k) {
      const double p = std::exp(logp.data[static_cast<std::size_t>(n) * K + k]);
      dlogits[static_cast<std::size_t>(n) * K + k] =
          (p - (k == y ? 1.0 : 0.0)) / B;
    }
  }

  detail::GradAccum acc(model);
  auto grad_of = [&](const char* name) -> std::vector<double>& {
    for (std::size_t l = 0; l < model.layers.size(); ++l)
      if (model.layers[l].name == name) return acc.grads[l];
    throw domain_error(std::string("backward: no layer ") + name);
  };

  if (model.arch == ArchitectureId::PaperCNN) {
    using namespace cnn;
    const Tensor flat = detail::flatten_keep_batch(trace.p2);
    std::vector<double> dfa1(trace.fa1.size(), 0.0);
    detail::linear_backward(trace.fa1, model.at("fc2.weight"), dlogits,
                            grad_of("fc2.weight"), grad_of("fc2.bias"), &dfa1);
    for (std::size_t i = 0; i < dfa1.size(); ++i)
      if (trace.fz1.data[i] <= 0.0f) dfa1[i] = 0.0;
    std::vector<double> dflat(flat.size(), 0.0);
    detail::linear_backward(flat, model.at("fc1.weight"), dfa1,
                            grad_of("fc1.weight"), grad_of("fc1.bias"), &dflat);
    // pool2 scatter, then ReLU mask of conv2 (a2 stores post-ReLU values)
    std::vector<double> da2(trace.a2.size(), 0.0);
    for (std::size_t i = 0; i < dflat.size(); ++i)
      da2[trace.idx2[i]] += dflat[i];
    for (std::size_t i = 0; i < da2.size(); ++i)
      if (trace.a2.data[i] <= 0.0f) da2[i] = 0.0;
    std::vector<double> dp1(trace.p1.size(), 0.0);
    detail::conv_backward(trace.p1, model.at("conv2.weight"), da2,
                          grad_of("conv2.weight"), grad_of("conv2.bias"), &dp1);
    std::vector<double> da1(trace.a1.size(), 0.0);
    for (std::size_t i = 0; i < dp1.size(); ++i)
      da1[trace.idx1[i]] += dp1[i];
    for (std::size_t i = 0; i < da1.size(); ++i)
      if (trace.a1.data[i] <= 0.0f) da1[i] = 0.0;
    detail::conv_backward(batch, model.at("conv1.weight"), da1,
                          grad_of("conv1.weight"), grad_of("conv1.bias"),
                          nullptr);
  } else {
    std::vector<double> dfa1(trace.fa1.size(), 0.0);
    detail::linear_backward(trace.fa1, model.at("fc2.weight"), dlogits,
                            grad_of("fc2.weight"), grad_of("fc2.bias"), &dfa1);
    for (std::size_t i = 0; i < dfa1.size(); ++i)
      if (trace.fz1.data[i] <= 0.0f) dfa1[i] = 0.0;
    detail::linear_backward(batch, model.at("fc1.weight"), dfa1,
                            grad_of("fc1.weight"), grad_of("fc1.bias"), nullptr);
  }

  // Proximal gradient mu*(w - anchor). Skipped entirely at mu == 0 so the
  // proximal configuration is bit-identical to plain NLL there.
  if (config.kind == LossKind::NLLWithProximal && config.mu != 0.0) {
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      const auto& mv = model.layers[l].value.data;
      const auto& av = config.anchor->layers[l].value.data;
      for (std::size_t i = 0; i < mv.size(); ++i)
        acc.grads[l][i] += config.mu * (static_cast<double>(mv[i]) - av[i]);
    }
  }
  return acc.finish(model);
}

// Plain SGD: out = model - lr * grads, element-wise in float32.
inline ModelParams sgd_step(const ModelParams& model, const ModelParams& grads,
                            double lr) {
  require_same_schema(model, grads, "sgd_step");
  if (lr == 0.0) return model;
  ModelParams out;
  out.arch = model.arch;
  out.layers.reserve(model.layers.size());
  const float flr = static_cast<float>(lr);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Tensor t = model.layers[l].value;
    const auto& g = grads.layers[l].value.data;
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] -= flr * g[i];
    require_finite(t, "sgd_step");
    out.layers.push_back({model.layers[l].name, std::move(t)});
  }
  return out;
}

}  // namespace fedsim
