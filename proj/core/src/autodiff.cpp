#include "unlearn/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace unlearn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw std::invalid_argument("operands recorded on different tapes");
}

}  // namespace

const Tensor& Var::value() const {
  if (!tape) throw std::logic_error("Var is not attached to a tape");
  return tape->value(*this);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::leaf(Tensor& external) {
  Node n;
  n.value = external;
  n.value.clear_grad();
  n.requires_grad = external.requires_grad();
  n.bound = &external;
  return push(std::move(n));
}

std::vector<double> Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
  return n.grad;
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_[i].requires_grad; });
  if (n.requires_grad) n.backward = std::move(backward);
  n.inputs = std::move(inputs);
  return push(std::move(n));
}

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw std::invalid_argument("backward on an empty tape");
  if (loss.tape != this || loss.id >= nodes_.size()) throw std::invalid_argument("loss does not belong to this tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw std::invalid_argument("backward needs a scalar loss, got shape " +
                                shape_string(nodes_[loss.id].value.shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  grad_buffer(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
  }
  for (auto& n : nodes_) {
    if (n.bound && n.requires_grad) {
      auto dst = n.bound->mutable_grad();
      if (!n.grad.empty()) {
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }
}

double log_loss_value(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw std::out_of_range("label " + std::to_string(label) + " outside [0, " + std::to_string(logits.size()) + ")");
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double z : logits) s += std::exp(z - m);
  return m + std::log(s) - logits[label];
}

namespace ops {

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0),
          "matmul: cannot multiply " + shape_string(A.shape()) + " by " + shape_string(B.shape()));
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Tensor out(Shape{n, m});
  MapMat(out.data().data(), n, m).noalias() = ConstMapMat(A.data().data(), n, k) * ConstMapMat(B.data().data(), k, m);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib, n, k, m](Tape& t, std::size_t self) {
    ConstMapMat g(t.node_grad(self).data(), n, m);
    if (t.node_requires_grad(ia)) {
      MapMat(t.grad_buffer(ia).data(), n, k).noalias() += g * ConstMapMat(t.node_value(ib).data().data(), k, m).transpose();
    }
    if (t.node_requires_grad(ib)) {
      MapMat(t.grad_buffer(ib).data(), k, m).noalias() += ConstMapMat(t.node_value(ia).data().data(), n, k).transpose() * g;
    }
  });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  require_same_tape(x, weight);
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  require(X.rank() == 2 && W.rank() == 2 && X.dim(1) == W.dim(1),
          "linear: input " + shape_string(X.shape()) + " incompatible with weight " + shape_string(W.shape()));
  const std::size_t n = X.dim(0), k = X.dim(1), m = W.dim(0);
  Tensor out(Shape{n, m});
  MapMat y(out.data().data(), n, m);
  y.noalias() = ConstMapMat(X.data().data(), n, k) * ConstMapMat(W.data().data(), m, k).transpose();
  std::vector<std::size_t> inputs{x.id, weight.id};
  if (bias) {
    require_same_tape(x, *bias);
    const Tensor& B = bias->value();
    require(B.rank() == 1 && B.dim(0) == m,
            "linear: bias " + shape_string(B.shape()) + " does not match " + std::to_string(m) + " outputs");
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(B.data().data(), static_cast<Eigen::Index>(m));
    inputs.push_back(bias->id);
  }
  const std::size_t ix = x.id, iw = weight.id;
  const std::optional<std::size_t> ib = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  return x.tape->record(std::move(out), std::move(inputs), [ix, iw, ib, n, k, m](Tape& t, std::size_t self) {
    ConstMapMat g(t.node_grad(self).data(), n, m);
    if (t.node_requires_grad(ix)) {
      MapMat(t.grad_buffer(ix).data(), n, k).noalias() += g * ConstMapMat(t.node_value(iw).data().data(), m, k);
    }
    if (t.node_requires_grad(iw)) {
      MapMat(t.grad_buffer(iw).data(), m, k).noalias() += g.transpose() * ConstMapMat(t.node_value(ix).data().data(), n, k);
    }
    if (ib && t.node_requires_grad(*ib)) {
      Eigen::Map<Eigen::RowVectorXd>(t.grad_buffer(*ib).data(), static_cast<Eigen::Index>(m)) += g.colwise().sum();
    }
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.shape() == B.shape(), "add: shape " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.node_grad(self);
    for (std::size_t input : {ia, ib}) {
      if (!t.node_requires_grad(input)) continue;
      auto d = t.grad_buffer(input);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.shape() == B.shape(), "mul: shape " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
    auto g = t.node_grad(self);
    if (t.node_requires_grad(ia)) {
      auto d = t.grad_buffer(ia);
      const auto& other = t.node_value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
    }
    if (t.node_requires_grad(ib)) {
      auto d = t.grad_buffer(ib);
      const auto& other = t.node_value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * other[i];
    }
  });
}

Var sum(Var a) {
  const Tensor& A = a.value();
  double s = 0.0;
  for (double v : A.data()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.node_grad(self)[0];
    for (double& d : t.grad_buffer(ia)) d += g;
  });
}

Var relu(Var a) {
  const Tensor& A = a.value();
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] > 0.0 ? A[i] : 0.0;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    auto g = t.node_grad(self);
    auto d = t.grad_buffer(ia);
    const auto& x = t.node_value(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) d[i] += g[i];
    }
  });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
  std::size_t rows() const { return n * oh * ow; }
  std::size_t cols() const { return c * kh * kw; }
};

void im2col(const ConvGeometry& g, const double* x, double* col) {
  for (std::size_t ni = 0; ni < g.n; ++ni) {
    for (std::size_t y = 0; y < g.oh; ++y) {
      for (std::size_t xo = 0; xo < g.ow; ++xo) {
        double* row = col + ((ni * g.oh + y) * g.ow + xo) * g.cols();
        for (std::size_t ci = 0; ci < g.c; ++ci) {
          const double* plane = x + (ni * g.c + ci) * g.h * g.w;
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                  ix < static_cast<std::ptrdiff_t>(g.w);
              *row++ = inside ? plane[iy * static_cast<std::ptrdiff_t>(g.w) + ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* dx) {
  for (std::size_t ni = 0; ni < g.n; ++ni) {
    for (std::size_t y = 0; y < g.oh; ++y) {
      for (std::size_t xo = 0; xo < g.ow; ++xo) {
        const double* row = col + ((ni * g.oh + y) * g.ow + xo) * g.cols();
        for (std::size_t ci = 0; ci < g.c; ++ci) {
          double* plane = dx + (ni * g.c + ci) * g.h * g.w;
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            for (std::size_t kx = 0; kx < g.kw; ++kx, ++row) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) && ix < static_cast<std::ptrdiff_t>(g.w)) {
                plane[iy * static_cast<std::ptrdiff_t>(g.w) + ix] += *row;
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var weight, std::optional<Var> bias, Conv2dOptions options) {
  require_same_tape(x, weight);
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  require(X.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_string(X.shape()));
  require(W.rank() == 4, "conv2d: weight must be [O,C,KH,KW], got " + shape_string(W.shape()));
  require(X.dim(1) == W.dim(1), "conv2d: input has " + std::to_string(X.dim(1)) + " channels but weight expects " +
                                    std::to_string(W.dim(1)));
  require(options.stride >= 1, "conv2d: stride must be positive");
  ConvGeometry g{X.dim(0), X.dim(1), X.dim(2), X.dim(3), W.dim(0), W.dim(2), W.dim(3), 0, 0, options.stride,
                 options.padding};
  require(g.h + 2 * g.pad >= g.kh && g.w + 2 * g.pad >= g.kw,
          "conv2d: kernel " + shape_string(W.shape()) + " larger than padded input " + shape_string(X.shape()));
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  auto col = std::make_shared<std::vector<double>>(g.rows() * g.cols());
  im2col(g, X.data().data(), col->data());
  RowMat y = ConstMapMat(col->data(), g.rows(), g.cols()) * ConstMapMat(W.data().data(), g.o, g.cols()).transpose();

  std::vector<std::size_t> inputs{x.id, weight.id};
  const double* b = nullptr;
  if (bias) {
    require_same_tape(x, *bias);
    require(bias->value().rank() == 1 && bias->value().dim(0) == g.o,
            "conv2d: bias " + shape_string(bias->value().shape()) + " does not match " + std::to_string(g.o) +
                " output channels");
    b = bias->value().data().data();
    inputs.push_back(bias->id);
  }
  Tensor out(Shape{g.n, g.o, g.oh, g.ow});
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t ni = 0; ni < g.n; ++ni) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t r = ni * plane + p;
      for (std::size_t oc = 0; oc < g.o; ++oc) {
        out[(ni * g.o + oc) * plane + p] = y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(oc)) + (b ? b[oc] : 0.0);
      }
    }
  }

  const std::size_t ix = x.id, iw = weight.id;
  const std::optional<std::size_t> ib = bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  return x.tape->record(std::move(out), std::move(inputs), [g, col, ix, iw, ib](Tape& t, std::size_t self) {
    auto grad = t.node_grad(self);
    const std::size_t plane = g.oh * g.ow;
    RowMat dy(static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.o));
    for (std::size_t ni = 0; ni < g.n; ++ni) {
      for (std::size_t oc = 0; oc < g.o; ++oc) {
        const double* src = grad.data() + (ni * g.o + oc) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          dy(static_cast<Eigen::Index>(ni * plane + p), static_cast<Eigen::Index>(oc)) = src[p];
        }
      }
    }
    if (t.node_requires_grad(iw)) {
      MapMat(t.grad_buffer(iw).data(), g.o, g.cols()).noalias() += dy.transpose() * ConstMapMat(col->data(), g.rows(), g.cols());
    }
    if (ib && t.node_requires_grad(*ib)) {
      Eigen::Map<Eigen::RowVectorXd>(t.grad_buffer(*ib).data(), static_cast<Eigen::Index>(g.o)) += dy.colwise().sum();
    }
    if (t.node_requires_grad(ix)) {
      RowMat dcol = dy * ConstMapMat(t.node_value(iw).data().data(), g.o, g.cols());
      col2im(g, dcol.data(), t.grad_buffer(ix).data());
    }
  });
}

Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training, BatchNormOptions options) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const Tensor& X = x.value();
  require(X.rank() == 4, "batchnorm2d: input must be [N,C,H,W], got " + shape_string(X.shape()));
  const std::size_t n = X.dim(0), c = X.dim(1), plane = X.dim(2) * X.dim(3);
  require(gamma.value().size() == c && beta.value().size() == c,
          "batchnorm2d: affine parameters must have " + std::to_string(c) + " entries");
  require(stats.running_mean.size() == c && stats.running_var.size() == c,
          "batchnorm2d: running statistics must have " + std::to_string(c) + " entries");
  if (training && n < 2) {
    throw std::invalid_argument("batchnorm2d: training mode needs a batch of at least 2 samples, got " +
                                std::to_string(n));
  }
  const double count = static_cast<double>(n * plane);
  std::vector<double> mean(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0.0;
      for (std::size_t ni = 0; ni < n; ++ni) {
        const double* p = X.data().data() + (ni * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) s += p[k];
      }
      const double mu = s / count;
      double v = 0.0;
      for (std::size_t ni = 0; ni < n; ++ni) {
        const double* p = X.data().data() + (ni * c + ch) * plane;
        for (std::size_t k = 0; k < plane; ++k) v += (p[k] - mu) * (p[k] - mu);
      }
      const double var = v / count;
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + options.eps);
      stats.running_mean[ch] = (1.0 - options.momentum) * stats.running_mean[ch] + options.momentum * mu;
      stats.running_var[ch] =
          (1.0 - options.momentum) * stats.running_var[ch] + options.momentum * (v / (count - 1.0));
    } else {
      mean[ch] = stats.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(stats.running_var[ch] + options.eps);
    }
  }
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  Tensor xhat(X.shape());
  Tensor out(X.shape());
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (ni * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double h = (X[base + k] - mean[ch]) * inv_std[ch];
        xhat[base + k] = h;
        out[base + k] = G[ch] * h + B[ch];
      }
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ibeta = beta.id;
  auto saved = std::make_shared<Tensor>(std::move(xhat));
  return x.tape->record(
      std::move(out), {ix, ig, ibeta},
      [saved, inv_std, ix, ig, ibeta, n, c, plane, count, training](Tape& t, std::size_t self) {
        auto g = t.node_grad(self);
        const Tensor& h = *saved;
        std::vector<double> sum_g(c, 0.0), sum_gh(c, 0.0);
        for (std::size_t ni = 0; ni < n; ++ni) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (ni * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) {
              sum_g[ch] += g[base + k];
              sum_gh[ch] += g[base + k] * h[base + k];
            }
          }
        }
        if (t.node_requires_grad(ig)) {
          auto d = t.grad_buffer(ig);
          for (std::size_t ch = 0; ch < c; ++ch) d[ch] += sum_gh[ch];
        }
        if (t.node_requires_grad(ibeta)) {
          auto d = t.grad_buffer(ibeta);
          for (std::size_t ch = 0; ch < c; ++ch) d[ch] += sum_g[ch];
        }
        if (t.node_requires_grad(ix)) {
          const auto& G = t.node_value(ig);
          auto d = t.grad_buffer(ix);
          for (std::size_t ni = 0; ni < n; ++ni) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (ni * c + ch) * plane;
              const double scale = G[ch] * inv_std[ch];
              for (std::size_t k = 0; k < plane; ++k) {
                if (training) {
                  d[base + k] += scale * (g[base + k] - sum_g[ch] / count - h[base + k] * sum_gh[ch] / count);
                } else {
                  d[base + k] += scale * g[base + k];
                }
              }
            }
          }
        }
      });
}

namespace {

Var pool2d(Var x, std::size_t k, bool take_max) {
  const Tensor& X = x.value();
  require(X.rank() == 4, "pool2d: input must be [N,C,H,W], got " + shape_string(X.shape()));
  require(k >= 1 && X.dim(2) >= k && X.dim(3) >= k,
          "pool2d: window " + std::to_string(k) + " does not fit input " + shape_string(X.shape()));
  const std::size_t n = X.dim(0), c = X.dim(1), h = X.dim(2), w = X.dim(3);
  const std::size_t oh = h / k, ow = w / k;
  Tensor out(Shape{n, c, oh, ow});
  auto source = std::make_shared<std::vector<std::size_t>>();
  if (take_max) source->resize(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* in = X.data().data() + plane * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const std::size_t o = (plane * oh + y) * ow + xo;
        double best = -std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        double acc = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = (y * k + dy) * w + xo * k + dx;
            if (in[idx] > best) {
              best = in[idx];
              arg = plane * h * w + idx;
            }
            acc += in[idx];
          }
        }
        if (take_max) {
          out[o] = best;
          (*source)[o] = arg;
        } else {
          out[o] = acc / static_cast<double>(k * k);
        }
      }
    }
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [source, take_max, ix, n, c, h, w, oh, ow, k](Tape& t, std::size_t self) {
    auto g = t.node_grad(self);
    auto d = t.grad_buffer(ix);
    if (take_max) {
      for (std::size_t o = 0; o < g.size(); ++o) d[(*source)[o]] += g[o];
      return;
    }
    const double share = 1.0 / static_cast<double>(k * k);
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xo = 0; xo < ow; ++xo) {
          const double v = g[(plane * oh + y) * ow + xo] * share;
          for (std::size_t dy = 0; dy < k; ++dy) {
            for (std::size_t dx = 0; dx < k; ++dx) d[plane * h * w + (y * k + dy) * w + xo * k + dx] += v;
          }
        }
      }
    }
  });
}

}  // namespace

Var maxpool2d(Var x, std::size_t k) { return pool2d(x, k, true); }
Var avgpool2d(Var x, std::size_t k) { return pool2d(x, k, false); }

Var flatten(Var x) {
  const Tensor& X = x.value();
  require(X.rank() >= 1, "flatten: scalar input");
  const std::size_t n = X.dim(0);
  const std::size_t rest = n ? X.size() / n : 0;
  const std::size_t ix = x.id;
  return x.tape->record(X.reshaped(Shape{n, rest}), {ix}, [ix](Tape& t, std::size_t self) {
    auto g = t.node_grad(self);
    auto d = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& Z = logits.value();
  require(Z.rank() == 1 || Z.rank() == 2, "softmax_cross_entropy: logits must be rank 1 or 2, got " +
                                              shape_string(Z.shape()));
  const std::size_t n = Z.rank() == 1 ? 1 : Z.dim(0);
  const std::size_t k = Z.rank() == 1 ? Z.dim(0) : Z.dim(1);
  require(labels.size() == n, "softmax_cross_entropy: " + std::to_string(n) + " rows but " +
                                  std::to_string(labels.size()) + " labels");
  require(n > 0 && k > 0, "softmax_cross_entropy: empty logits");
  auto probs = std::make_shared<std::vector<double>>(n * k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(k) + ")");
    }
    const double* z = Z.data().data() + i * k;
    const double m = *std::max_element(z, z + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(z[j] - lse);
    total += lse - z[y];
  }
  std::vector<int> targets(labels.begin(), labels.end());
  const std::size_t iz = logits.id;
  return logits.tape->record(Tensor::scalar(total / static_cast<double>(n)), {iz},
                             [probs, targets, iz, n, k](Tape& t, std::size_t self) {
                               const double g = t.node_grad(self)[0] / static_cast<double>(n);
                               auto d = t.grad_buffer(iz);
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < k; ++j) {
                                   const double onehot = static_cast<int>(j) == targets[i] ? 1.0 : 0.0;
                                   d[i * k + j] += g * ((*probs)[i * k + j] - onehot);
                                 }
                               }
                             });
}

Var half_squared_error(Var predictions, std::span<const double> targets) {
  const Tensor& P = predictions.value();
  require(P.rank() == 1 || (P.rank() == 2 && P.dim(1) == 1),
          "half_squared_error: predictions must be [N] or [N,1], got " + shape_string(P.shape()));
  const std::size_t n = P.dim(0);
  require(targets.size() == n, "half_squared_error: " + std::to_string(n) + " predictions but " +
                                   std::to_string(targets.size()) + " targets");
  require(n > 0, "half_squared_error: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += 0.5 * (P[i] - targets[i]) * (P[i] - targets[i]);
  std::vector<double> y(targets.begin(), targets.end());
  const std::size_t ip = predictions.id;
  return predictions.tape->record(Tensor::scalar(total / static_cast<double>(n)), {ip},
                                  [y, ip, n](Tape& t, std::size_t self) {
                                    const double g = t.node_grad(self)[0] / static_cast<double>(n);
                                    auto d = t.grad_buffer(ip);
                                    const auto& p = t.node_value(ip);
                                    for (std::size_t i = 0; i < n; ++i) d[i] += g * (p[i] - y[i]);
                                  });
}

}  // namespace ops
}  // namespace unlearn
