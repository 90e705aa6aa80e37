#include "capsule/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace capsule {

const char* op_name(OpKind kind) {
  switch (kind) {
  case OpKind::Leaf: return "leaf";
  case OpKind::Add: return "add";
  case OpKind::Sub: return "sub";
  case OpKind::Mul: return "mul";
  case OpKind::Scale: return "scale";
  case OpKind::AddScalar: return "add_scalar";
  case OpKind::Relu: return "relu";
  case OpKind::Sigmoid: return "sigmoid";
  case OpKind::Clamp: return "clamp";
  case OpKind::Log: return "log";
  case OpKind::Matmul: return "matmul";
  case OpKind::Conv2d: return "conv2d";
  case OpKind::ChannelBias: return "channel_bias";
  case OpKind::Softmax: return "softmax";
  case OpKind::ReduceSum: return "reduce_sum";
  case OpKind::Norm: return "norm";
  case OpKind::Squash: return "squash";
  case OpKind::Gather: return "gather";
  case OpKind::CapsuleTransform: return "capsule_transform";
  case OpKind::WeightedSum: return "weighted_sum";
  case OpKind::Agreement: return "agreement";
  case OpKind::Count: break;
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw std::logic_error("use of an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ != nullptr && tape_->requires_grad(id_); }

Tensor Gradients::operator[](const Var& leaf) const {
  if (auto it = grads_.find(leaf.id()); it != grads_.end()) return it->second;
  if (auto it = shapes_.find(leaf.id()); it != shapes_.end()) return Tensor::zeros(it->second);
  throw std::invalid_argument(fmt::format("node {} is not a requires_grad leaf of this backward pass",
                                          leaf.id()));
}

bool Gradients::contains(const Var& leaf) const {
  return grads_.contains(leaf.id()) || shapes_.contains(leaf.id());
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), requires_grad, OpKind::Leaf, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(OpKind kind, Tensor value, std::vector<Var> operands, BackwardFn rule) {
  Node node{std::move(value), false, kind, {}, {}};
  node.operands.reserve(operands.size());
  for (const auto& v : operands) {
    if (v.tape() != this) throw std::invalid_argument("operand recorded on a different tape");
    node.operands.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (node.requires_grad) node.rule = std::move(rule);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::set_backward_scale(OpKind kind, double factor) {
  if (!scaled_) {
    backward_scale_.fill(1.0);
    scaled_ = true;
  }
  backward_scale_[static_cast<std::size_t>(kind)] = factor;
}

Gradients Tape::backward(const Var& loss) const {
  if (loss.tape() != this || loss.id() >= nodes_.size()) {
    throw std::invalid_argument("loss was not recorded on this tape");
  }
  if (nodes_[loss.id()].value.size() != 1) {
    throw ShapeError(fmt::format("loss must be a single element, got shape {}",
                                 to_string(nodes_[loss.id()].value.shape())));
  }

  std::vector<std::vector<double>> grads(loss.id() + 1);
  grads[loss.id()] = {1.0};
  std::vector<std::span<double>> spans;
  std::vector<double> scaled;

  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (grads[id].empty() || !node.requires_grad || node.kind == OpKind::Leaf || !node.rule) {
      continue;
    }
    spans.assign(node.operands.size(), {});
    for (std::size_t k = 0; k < node.operands.size(); ++k) {
      const auto op = node.operands[k];
      if (!nodes_[op].requires_grad) continue;
      if (grads[op].empty()) grads[op].assign(nodes_[op].value.size(), 0.0);
      spans[k] = grads[op];
    }
    std::span<const double> grad_out = grads[id];
    if (scaled_) {
      const double factor = backward_scale_[static_cast<std::size_t>(node.kind)];
      if (factor != 1.0) {
        scaled.assign(grad_out.begin(), grad_out.end());
        for (auto& g : scaled) g *= factor;
        grad_out = scaled;
      }
    }
    node.rule(grad_out, spans);
    grads[id].clear();
    grads[id].shrink_to_fit();
  }

  Gradients out;
  for (std::size_t id = 0; id <= loss.id(); ++id) {
    const Node& node = nodes_[id];
    if (node.kind != OpKind::Leaf || !node.requires_grad) continue;
    if (grads[id].empty()) {
      out.shapes_.emplace(id, node.value.shape());
    } else {
      out.grads_.emplace(id, Tensor::from(node.value.shape(), std::move(grads[id])));
    }
  }
  return out;
}

Gradients backward(const Tape& tape, const Var& loss) { return tape.backward(loss); }

namespace {

Tape& tape_of(const Var& v) {
  if (v.tape() == nullptr) throw std::logic_error("use of an unbound Var");
  return *v.tape();
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, to_string(a.shape()),
                                 to_string(b.shape())));
  }
}

template <typename F>
Tensor map_values(const Tensor& t, F f) {
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(t[i]);
  return Tensor::from(t.shape(), std::move(out));
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k != axis) out.push_back(shape[k]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t k = 0; k < axis; ++k) s.outer *= shape[k];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) s.inner *= shape[k];
  return s;
}

void check_axis(const Var& t, std::size_t axis, const char* op) {
  if (axis >= t.shape().size()) {
    throw ShapeError(fmt::format("{}: axis {} invalid for shape {}", op, axis, to_string(t.shape())));
  }
}

} // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  const auto& x = a.value();
  const auto& y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return tape_of(a).record(OpKind::Add, Tensor::from(x.shape(), std::move(out)), {a, b},
                           [](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (auto& g : gi) {
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
                             }
                           });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  const auto& x = a.value();
  const auto& y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return tape_of(a).record(OpKind::Sub, Tensor::from(x.shape(), std::move(out)), {a, b},
                           [](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += go[i];
                             for (std::size_t i = 0; i < gi[1].size(); ++i) gi[1][i] -= go[i];
                           });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  const Tensor x = a.value();
  const Tensor y = b.value();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return tape_of(a).record(OpKind::Mul, Tensor::from(x.shape(), std::move(out)), {a, b},
                           [x, y](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += go[i] * y[i];
                             for (std::size_t i = 0; i < gi[1].size(); ++i) gi[1][i] += go[i] * x[i];
                           });
}

Var scale(const Var& a, double factor) {
  return tape_of(a).record(OpKind::Scale, map_values(a.value(), [=](double v) { return v * factor; }),
                           {a}, [=](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += go[i] * factor;
                           });
}

Var add_scalar(const Var& a, double offset) {
  return tape_of(a).record(OpKind::AddScalar,
                           map_values(a.value(), [=](double v) { return v + offset; }), {a},
                           [](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += go[i];
                           });
}

Var relu(const Var& a) {
  const Tensor x = a.value();
  return tape_of(a).record(OpKind::Relu, map_values(x, [](double v) { return v > 0.0 ? v : 0.0; }),
                           {a}, [x](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t i = 0; i < gi[0].size(); ++i) {
                               if (x[i] > 0.0) gi[0][i] += go[i];
                             }
                           });
}

Var sigmoid(const Var& a) {
  Tensor y = map_values(a.value(), [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  return tape_of(a).record(OpKind::Sigmoid, y, {a},
                           [y](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t i = 0; i < gi[0].size(); ++i) {
                               gi[0][i] += go[i] * y[i] * (1.0 - y[i]);
                             }
                           });
}

Var clamp(const Var& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument(fmt::format("clamp: lo {} > hi {}", lo, hi));
  const Tensor x = a.value();
  return tape_of(a).record(OpKind::Clamp, map_values(x, [=](double v) { return std::clamp(v, lo, hi); }),
                           {a}, [x, lo, hi](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t i = 0; i < gi[0].size(); ++i) {
                               if (x[i] > lo && x[i] < hi) gi[0][i] += go[i];
                             }
                           });
}

Var log(const Var& a) {
  const Tensor x = a.value();
  return tape_of(a).record(OpKind::Log, map_values(x, [](double v) { return std::log(v); }), {a},
                           [x](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += go[i] / x[i];
                           });
}

Var matmul(const Var& a, const Var& b) {
  const Tensor x = a.value();
  const Tensor y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw ShapeError(fmt::format("matmul: incompatible shapes {} and {}", to_string(x.shape()),
                                 to_string(y.shape())));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += xv * y[p * n + j];
    }
  }
  return tape_of(a).record(
      OpKind::Matmul, Tensor::from({m, n}, std::move(out)), {a, b},
      [x, y, m, k, n](std::span<const double> go, std::span<std::span<double>> gi) {
        // dA = G * B^T
        if (!gi[0].empty()) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * y[p * n + j];
              gi[0][i * k + p] += acc;
            }
          }
        }
        // dB = A^T * G
        if (!gi[1].empty()) {
          for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t i = 0; i < m; ++i) {
              const double xv = x[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gi[1][p * n + j] += xv * go[i * n + j];
            }
          }
        }
      });
}

Var conv2d(const Var& input, const Var& kernels, std::size_t stride) {
  const Tensor in = input.value();
  const Tensor ker = kernels.value();
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (in.rank() != 3 || ker.rank() != 4 || ker.dim(1) != in.dim(0)) {
    throw ShapeError(fmt::format("conv2d: input {} incompatible with kernels {}",
                                 to_string(in.shape()), to_string(ker.shape())));
  }
  const std::size_t cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t cout = ker.dim(0), kh = ker.dim(2), kw = ker.dim(3);
  if (kh > h || kw > w) {
    throw ShapeError(fmt::format("conv2d: kernel {}x{} larger than input {}x{}", kh, kw, h, w));
  }
  const std::size_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;

  std::vector<double> out(cout * oh * ow, 0.0);
  for (std::size_t o = 0; o < cout; ++o) {
    double* dst = out.data() + o * oh * ow;
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = ker[((o * cin + c) * kh + ky) * kw + kx];
          for (std::size_t y = 0; y < oh; ++y) {
            const double* src = in.begin() + (c * h + y * stride + ky) * w + kx;
            double* row = dst + y * ow;
            for (std::size_t x = 0; x < ow; ++x) row[x] += wv * src[x * stride];
          }
        }
      }
    }
  }

  return tape_of(input).record(
      OpKind::Conv2d, Tensor::from({cout, oh, ow}, std::move(out)), {input, kernels},
      [=](std::span<const double> go, std::span<std::span<double>> gi) {
        auto gin = gi[0];
        auto gker = gi[1];
        for (std::size_t o = 0; o < cout; ++o) {
          const double* g = go.data() + o * oh * ow;
          for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::size_t kidx = ((o * cin + c) * kh + ky) * kw + kx;
                const double wv = ker[kidx];
                double acc = 0.0;
                for (std::size_t y = 0; y < oh; ++y) {
                  const std::size_t base = (c * h + y * stride + ky) * w + kx;
                  const double* src = in.begin() + base;
                  const double* grow = g + y * ow;
                  if (!gker.empty()) {
                    for (std::size_t x = 0; x < ow; ++x) acc += grow[x] * src[x * stride];
                  }
                  if (!gin.empty()) {
                    double* dst = gin.data() + base;
                    for (std::size_t x = 0; x < ow; ++x) dst[x * stride] += grow[x] * wv;
                  }
                }
                if (!gker.empty()) gker[kidx] += acc;
              }
            }
          }
        }
      });
}

Var add_channel_bias(const Var& input, const Var& bias) {
  const Tensor& in = input.value();
  const Tensor& b = bias.value();
  if (b.rank() != 1 || b.dim(0) != in.dim(0)) {
    throw ShapeError(fmt::format("add_channel_bias: bias {} does not match input {}",
                                 to_string(b.shape()), to_string(in.shape())));
  }
  const std::size_t channels = in.dim(0), inner = in.size() / channels;
  std::vector<double> out(in.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] = in[c * inner + i] + b[c];
  }
  return tape_of(input).record(
      OpKind::ChannelBias, Tensor::from(in.shape(), std::move(out)), {input, bias},
      [channels, inner](std::span<const double> go, std::span<std::span<double>> gi) {
        for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += go[i];
        if (!gi[1].empty()) {
          for (std::size_t c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < inner; ++i) acc += go[c * inner + i];
            gi[1][c] += acc;
          }
        }
      });
}

Var softmax_axis(const Var& t, std::size_t axis) {
  check_axis(t, axis, "softmax_axis");
  const Tensor& x = t.value();
  const auto s = split_at(x.shape(), axis);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const double e = std::exp(x[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  }
  Tensor y = Tensor::from(x.shape(), std::move(out));
  return tape_of(t).record(OpKind::Softmax, y, {t},
                           [y, s](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t o = 0; o < s.outer; ++o) {
                               for (std::size_t i = 0; i < s.inner; ++i) {
                                 const std::size_t base = o * s.extent * s.inner + i;
                                 double dot = 0.0;
                                 for (std::size_t k = 0; k < s.extent; ++k) {
                                   dot += go[base + k * s.inner] * y[base + k * s.inner];
                                 }
                                 for (std::size_t k = 0; k < s.extent; ++k) {
                                   const std::size_t idx = base + k * s.inner;
                                   gi[0][idx] += y[idx] * (go[idx] - dot);
                                 }
                               }
                             }
                           });
}

Var reduce_sum(const Var& t, std::size_t axis) {
  check_axis(t, axis, "reduce_sum");
  const Tensor& x = t.value();
  const auto s = split_at(x.shape(), axis);
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.extent; ++k) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        out[o * s.inner + i] += x[(o * s.extent + k) * s.inner + i];
      }
    }
  }
  return tape_of(t).record(OpKind::ReduceSum,
                           Tensor::from(drop_axis(x.shape(), axis), std::move(out)), {t},
                           [s](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t o = 0; o < s.outer; ++o) {
                               for (std::size_t k = 0; k < s.extent; ++k) {
                                 for (std::size_t i = 0; i < s.inner; ++i) {
                                   gi[0][(o * s.extent + k) * s.inner + i] += go[o * s.inner + i];
                                 }
                               }
                             }
                           });
}

Var sum(const Var& t) {
  const Tensor& x = t.value();
  double total = 0.0;
  for (double v : x.data()) total += v;
  return tape_of(t).record(OpKind::ReduceSum, Tensor::scalar(total), {t},
                           [](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (auto& g : gi[0]) g += go[0];
                           });
}

Var norm_last_axis(const Var& t) {
  const Tensor x = t.value();
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < d; ++k) acc += x[r * d + k] * x[r * d + k];
    out[r] = std::sqrt(acc);
  }
  Tensor n = Tensor::from(drop_axis(x.shape(), x.rank() - 1), std::move(out));
  return tape_of(t).record(OpKind::Norm, n, {t},
                           [x, n, d, rows](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t r = 0; r < rows; ++r) {
                               if (n[r] == 0.0) continue;
                               const double f = go[r] / n[r];
                               for (std::size_t k = 0; k < d; ++k) gi[0][r * d + k] += f * x[r * d + k];
                             }
                           });
}

Var squash(const Var& t) {
  const Tensor s = t.value();
  const std::size_t d = s.shape().back();
  const std::size_t rows = s.size() / d;
  std::vector<double> out(s.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double n2 = 0.0;
    for (std::size_t k = 0; k < d; ++k) n2 += s[r * d + k] * s[r * d + k];
    const double f = std::sqrt(n2) / (1.0 + n2);
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] = f * s[r * d + k];
  }
  // dv/ds = f(n) I + (f'(n)/n) s s^T, f(n) = n/(1+n^2), f'(n) = (1-n^2)/(1+n^2)^2.
  return tape_of(t).record(OpKind::Squash, Tensor::from(s.shape(), std::move(out)), {t},
                           [s, d, rows](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t r = 0; r < rows; ++r) {
                               double n2 = 0.0, dot = 0.0;
                               for (std::size_t k = 0; k < d; ++k) {
                                 n2 += s[r * d + k] * s[r * d + k];
                                 dot += s[r * d + k] * go[r * d + k];
                               }
                               if (n2 == 0.0) continue;
                               const double n = std::sqrt(n2);
                               const double f = n / (1.0 + n2);
                               const double fp_over_n = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2) * n);
                               for (std::size_t k = 0; k < d; ++k) {
                                 gi[0][r * d + k] += f * go[r * d + k] + fp_over_n * dot * s[r * d + k];
                               }
                             }
                           });
}

Var gather(const Var& t, std::vector<std::size_t> source, Shape shape) {
  const Tensor& x = t.value();
  if (element_count(shape) != source.size()) {
    throw ShapeError(fmt::format("gather: {} indices for shape {}", source.size(), to_string(shape)));
  }
  std::vector<double> out(source.size());
  for (std::size_t j = 0; j < source.size(); ++j) {
    if (source[j] >= x.size()) {
      throw ShapeError(fmt::format("gather: index {} out of range for {} elements", source[j], x.size()));
    }
    out[j] = x[source[j]];
  }
  return tape_of(t).record(OpKind::Gather, Tensor::from(std::move(shape), std::move(out)), {t},
                           [source = std::move(source)](std::span<const double> go,
                                                        std::span<std::span<double>> gi) {
                             for (std::size_t j = 0; j < source.size(); ++j) gi[0][source[j]] += go[j];
                           });
}

Var reshape(const Var& t, Shape shape) {
  return tape_of(t).record(OpKind::Gather, t.value().reshape(std::move(shape)), {t},
                           [](std::span<const double> go, std::span<std::span<double>> gi) {
                             for (std::size_t i = 0; i < gi[0].size(); ++i) gi[0][i] += go[i];
                           });
}

Var capsule_transform(const Var& weights, const Var& u) {
  const Tensor w = weights.value();
  const Tensor x = u.value();
  if (w.rank() != 4 || x.rank() != 2 || w.dim(0) != x.dim(0) || w.dim(3) != x.dim(1)) {
    throw ShapeError(fmt::format("capsule_transform: weights {} incompatible with capsules {}",
                                 to_string(w.shape()), to_string(x.shape())));
  }
  const std::size_t n = w.dim(0), classes = w.dim(1), dout = w.dim(2), din = w.dim(3);
  std::vector<double> out(n * classes * dout, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ui = x.begin() + i * din;
    for (std::size_t j = 0; j < classes; ++j) {
      for (std::size_t o = 0; o < dout; ++o) {
        const double* row = w.begin() + ((i * classes + j) * dout + o) * din;
        double acc = 0.0;
        for (std::size_t k = 0; k < din; ++k) acc += row[k] * ui[k];
        out[(i * classes + j) * dout + o] = acc;
      }
    }
  }
  return tape_of(weights).record(
      OpKind::CapsuleTransform, Tensor::from({n, classes, dout}, std::move(out)), {weights, u},
      [w, x, n, classes, dout, din](std::span<const double> go, std::span<std::span<double>> gi) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < classes; ++j) {
            for (std::size_t o = 0; o < dout; ++o) {
              const std::size_t row = ((i * classes + j) * dout + o) * din;
              const double g = go[(i * classes + j) * dout + o];
              if (!gi[0].empty()) {
                for (std::size_t k = 0; k < din; ++k) gi[0][row + k] += g * x[i * din + k];
              }
              if (!gi[1].empty()) {
                for (std::size_t k = 0; k < din; ++k) gi[1][i * din + k] += g * w[row + k];
              }
            }
          }
        }
      });
}

Var weighted_sum(const Var& coupling, const Var& u_hat) {
  const Tensor c = coupling.value();
  const Tensor uh = u_hat.value();
  if (c.rank() != 2 || uh.rank() != 3 || c.dim(0) != uh.dim(0) || c.dim(1) != uh.dim(1)) {
    throw ShapeError(fmt::format("weighted_sum: coupling {} incompatible with predictions {}",
                                 to_string(c.shape()), to_string(uh.shape())));
  }
  const std::size_t n = uh.dim(0), classes = uh.dim(1), d = uh.dim(2);
  std::vector<double> out(classes * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < classes; ++j) {
      const double cij = c[i * classes + j];
      for (std::size_t k = 0; k < d; ++k) out[j * d + k] += cij * uh[(i * classes + j) * d + k];
    }
  }
  return tape_of(coupling).record(
      OpKind::WeightedSum, Tensor::from({classes, d}, std::move(out)), {coupling, u_hat},
      [c, uh, n, classes, d](std::span<const double> go, std::span<std::span<double>> gi) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < classes; ++j) {
            const std::size_t base = (i * classes + j) * d;
            if (!gi[0].empty()) {
              double acc = 0.0;
              for (std::size_t k = 0; k < d; ++k) acc += go[j * d + k] * uh[base + k];
              gi[0][i * classes + j] += acc;
            }
            if (!gi[1].empty()) {
              const double cij = c[i * classes + j];
              for (std::size_t k = 0; k < d; ++k) gi[1][base + k] += cij * go[j * d + k];
            }
          }
        }
      });
}

Var agreement(const Var& u_hat, const Var& v) {
  const Tensor uh = u_hat.value();
  const Tensor out_caps = v.value();
  if (uh.rank() != 3 || out_caps.rank() != 2 || uh.dim(1) != out_caps.dim(0) ||
      uh.dim(2) != out_caps.dim(1)) {
    throw ShapeError(fmt::format("agreement: predictions {} incompatible with outputs {}",
                                 to_string(uh.shape()), to_string(out_caps.shape())));
  }
  const std::size_t n = uh.dim(0), classes = uh.dim(1), d = uh.dim(2);
  std::vector<double> out(n * classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < classes; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += uh[(i * classes + j) * d + k] * out_caps[j * d + k];
      out[i * classes + j] = acc;
    }
  }
  return tape_of(u_hat).record(
      OpKind::Agreement, Tensor::from({n, classes}, std::move(out)), {u_hat, v},
      [uh, out_caps, n, classes, d](std::span<const double> go, std::span<std::span<double>> gi) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < classes; ++j) {
            const double g = go[i * classes + j];
            const std::size_t base = (i * classes + j) * d;
            if (!gi[0].empty()) {
              for (std::size_t k = 0; k < d; ++k) gi[0][base + k] += g * out_caps[j * d + k];
            }
            if (!gi[1].empty()) {
              for (std::size_t k = 0; k < d; ++k) gi[1][j * d + k] += g * uh[base + k];
            }
          }
        }
      });
}

FiniteDiffReport finite_diff_check(const ScalarFunction& f, std::span<const Tensor> params,
                                   double eps, const std::function<void(Tape&)>& configure_tape) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    if (configure_tape) configure_tape(tape);
    std::vector<Var> vars;
    for (const auto& p : params) vars.push_back(tape.leaf(p, true));
    const Var loss = f(tape, vars);
    const Gradients grads = tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(grads[v]);
  }

  auto evaluate = [&](std::size_t which, std::size_t element, double delta) {
    Tape tape;
    std::vector<Var> vars;
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (p == which) {
        auto data = params[p].to_vector();
        data[element] += delta;
        vars.push_back(tape.constant(Tensor::from(params[p].shape(), std::move(data))));
      } else {
        vars.push_back(tape.constant(params[p]));
      }
    }
    return f(tape, vars).value()[0];
  };

  FiniteDiffReport report;
  report.per_param.assign(params.size(), 0.0);
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t e = 0; e < params[p].size(); ++e) {
      const double numeric = (evaluate(p, e, eps) - evaluate(p, e, -eps)) / (2.0 * eps);
      const double a = analytic[p][e];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      report.per_param[p] = std::max(report.per_param[p], err);
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_param = p;
        report.worst_element = e;
      }
    }
  }
  return report;
}

} // namespace capsule
