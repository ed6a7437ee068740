#include "dynseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace dynseg::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op, const char* name) {
  require(t.defined(), std::string(op) + ": " + name + " is undefined");
  require(t.rank() == rank, std::string(op) + ": " + name + " must have rank " +
                                std::to_string(rank) + ", got " + shape_str(t.shape()));
}

struct ConvGeom {
  Index channels, height, width, kh, kw, stride, pad, out_h, out_w;
  Index rows() const { return channels * kh * kw; }
  Index cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const Index L = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        T* dst = cols + ((c * g.kh + ki) * g.kw + kj) * L;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          T* drow = dst + oh * g.out_w;
          const Index ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.height) {
            std::fill(drow, drow + g.out_w, T(0));
            continue;
          }
          const T* src = x + (c * g.height + ih) * g.width;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + kj;
            drow[ow] = (iw >= 0 && iw < g.width) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* x) {
  const Index L = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const T* src = cols + ((c * g.kh + ki) * g.kw + kj) * L;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.height) continue;
          const T* srow = src + oh * g.out_w;
          T* drow = x + (c * g.height + ih) * g.width;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.width) drow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

// Result shape for binary elementwise ops: exact match or one scalar side.
template <typename T>
Shape binary_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  require(a.defined() && b.defined(), std::string(op) + ": undefined operand");
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

// Adds `g` (full-size) into the gradient of `t`, reducing when `t` is a broadcast scalar.
template <typename T>
void accumulate(const BasicTensor<T>& t, const std::vector<T>& g, T factor = T(1)) {
  if (!wants_grad(t)) return;
  auto& dst = grad_of(t);
  if (dst.size() == g.size()) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
  } else {
    T s = 0;
    for (T v : g) s += v;
    dst[0] += factor * s;
  }
}

template <typename T>
std::size_t bidx(const BasicTensor<T>& t, std::size_t i) {
  return t.numel() == 1 ? 0 : i;
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                      Index stride, Index pad) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(w, 4, "conv2d", "weight");
  require(stride >= 1 && pad >= 0, "conv2d: stride must be >= 1 and pad >= 0");
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == C, "conv2d: input has " + std::to_string(C) + " channels, weight " +
                             shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  if (bias.defined()) {
    require(static_cast<Index>(bias.numel()) == O,
            "conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(O) +
                " output channels");
  }
  const Index span_h = H + 2 * pad - kh, span_w = W + 2 * pad - kw;
  require(span_h >= 0 && span_w >= 0, "conv2d: kernel " + shape_str(w.shape()) +
                                          " does not fit padded input " + shape_str(x.shape()));
  require(span_h % stride == 0 && span_w % stride == 0,
          "conv2d: output size is not exact for input " + shape_str(x.shape()) + ", kernel " +
              std::to_string(kh) + "x" + std::to_string(kw) + ", stride " +
              std::to_string(stride) + ", pad " + std::to_string(pad));

  const ConvGeom g{C, H, W, kh, kw, stride, pad, span_h / stride + 1, span_w / stride + 1};
  const Index K = g.rows(), L = g.cols();
  const bool keep_cols = GradMode::enabled() && wants_grad(w);
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>((keep_cols ? N : 1) * K * L));
  std::vector<T> out(static_cast<std::size_t>(N * O * L));

  ConstMatMap<T> wm(w.data().data(), O, K);
  for (Index n = 0; n < N; ++n) {
    T* cn = cols->data() + (keep_cols ? n * K * L : 0);
    im2col(x.data().data() + n * C * H * W, g, cn);
    MatMap<T> om(out.data() + n * O * L, O, L);
    om.noalias() = wm * ConstMatMap<T>(cn, K, L);
    if (bias.defined()) {
      for (Index o = 0; o < O; ++o) om.row(o).array() += bias.data()[static_cast<std::size_t>(o)];
    }
  }

  return make_result<T>(
      "conv2d", Shape{N, O, g.out_h, g.out_w}, std::move(out), {x, w, bias},
      [x, w, bias, cols, g, N, O, K, L](const TensorNode<T>& self) {
        const T* gout = self.grad.data();
        if (wants_grad(w)) {
          MatMap<T> gw(grad_of(w).data(), O, K);
          for (Index n = 0; n < N; ++n) {
            gw.noalias() += ConstMatMap<T>(gout + n * O * L, O, L) *
                            ConstMatMap<T>(cols->data() + n * K * L, K, L).transpose();
          }
        }
        if (wants_grad(bias)) {
          auto& gb = grad_of(bias);
          for (Index n = 0; n < N; ++n) {
            for (Index o = 0; o < O; ++o) {
              const T* row = gout + (n * O + o) * L;
              T s = 0;
              for (Index l = 0; l < L; ++l) s += row[l];
              gb[static_cast<std::size_t>(o)] += s;
            }
          }
        }
        if (wants_grad(x)) {
          auto& gx = grad_of(x);
          std::vector<T> gcols(static_cast<std::size_t>(K * L));
          ConstMatMap<T> wm(w.data().data(), O, K);
          const Index plane = g.channels * g.height * g.width;
          for (Index n = 0; n < N; ++n) {
            MatMap<T>(gcols.data(), K, L).noalias() =
                wm.transpose() * ConstMatMap<T>(gout + n * O * L, O, L);
            col2im_add(gcols.data(), g, gx.data() + n * plane);
          }
        }
      });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  return make_result<T>("relu", x.shape(), std::move(out), {x}, [x](const TensorNode<T>& self) {
    auto& gx = grad_of(x);
    const auto xd = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xd[i] > T(0)) gx[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& x, T slope) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = v > T(0) ? v : slope * v;
  return make_result<T>("leaky_relu", x.shape(), std::move(out), {x},
                        [x, slope](const TensorNode<T>& self) {
                          auto& gx = grad_of(x);
                          const auto xd = x.data();
                          for (std::size_t i = 0; i < gx.size(); ++i) {
                            gx[i] += xd[i] > T(0) ? self.grad[i] : slope * self.grad[i];
                          }
                        });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-xd[i]));
  auto saved = std::make_shared<std::vector<T>>(out);
  return make_result<T>("sigmoid", x.shape(), std::move(out), {x},
                        [x, saved](const TensorNode<T>& self) {
                          auto& gx = grad_of(x);
                          for (std::size_t i = 0; i < gx.size(); ++i) {
                            const T s = (*saved)[i];
                            gx[i] += self.grad[i] * s * (T(1) - s);
                          }
                        });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  Shape shape = binary_shape(a, b, "add");
  std::vector<T> out(static_cast<std::size_t>(numel(shape)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[bidx(a, i)] + b.data()[bidx(b, i)];
  return make_result<T>("add", std::move(shape), std::move(out), {a, b},
                        [a, b](const TensorNode<T>& self) {
                          accumulate(a, self.grad);
                          accumulate(b, self.grad);
                        });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  Shape shape = binary_shape(a, b, "sub");
  std::vector<T> out(static_cast<std::size_t>(numel(shape)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[bidx(a, i)] - b.data()[bidx(b, i)];
  return make_result<T>("sub", std::move(shape), std::move(out), {a, b},
                        [a, b](const TensorNode<T>& self) {
                          accumulate(a, self.grad);
                          accumulate(b, self.grad, T(-1));
                        });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  Shape shape = binary_shape(a, b, "mul");
  std::vector<T> out(static_cast<std::size_t>(numel(shape)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[bidx(a, i)] * b.data()[bidx(b, i)];
  return make_result<T>("mul", std::move(shape), std::move(out), {a, b},
                        [a, b](const TensorNode<T>& self) {
                          const std::size_t n = self.grad.size();
                          std::vector<T> g(n);
                          if (wants_grad(a)) {
                            for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * b.data()[bidx(b, i)];
                            accumulate(a, g);
                          }
                          if (wants_grad(b)) {
                            for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * a.data()[bidx(a, i)];
                            accumulate(b, g);
                          }
                        });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T c) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v *= c;
  return make_result<T>("scale", x.shape(), std::move(out), {x},
                        [x, c](const TensorNode<T>& self) { accumulate(x, self.grad, c); });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T c) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v += c;
  return make_result<T>("add_scalar", x.shape(), std::move(out), {x},
                        [x](const TensorNode<T>& self) { accumulate(x, self.grad); });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_result<T>("sum", Shape{}, std::vector<T>{s}, {x}, [x](const TensorNode<T>& self) {
    auto& gx = grad_of(x);
    for (T& g : gx) g += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  require(x.numel() > 0, "mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> instance_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                             const BasicTensor<T>& beta, T eps) {
  require_rank(x, 4, "instance_norm", "input");
  const Index N = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
  require(M >= 1, "instance_norm: empty spatial extent");
  require(static_cast<Index>(gamma.numel()) == C && static_cast<Index>(beta.numel()) == C,
          "instance_norm: gamma/beta must have " + std::to_string(C) + " elements");

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N * C));
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (Index nc = 0; nc < N * C; ++nc) {
    const Index c = nc % C;
    const T* src = xd + nc * M;
    T mu = 0;
    for (Index i = 0; i < M; ++i) mu += src[i];
    mu /= static_cast<T>(M);
    T var = 0;
    for (Index i = 0; i < M; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(M);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(nc)] = is;
    const T ga = gamma.data()[static_cast<std::size_t>(c)], be = beta.data()[static_cast<std::size_t>(c)];
    T* xh = xhat->data() + nc * M;
    T* o = out.data() + nc * M;
    for (Index i = 0; i < M; ++i) {
      xh[i] = (src[i] - mu) * is;
      o[i] = ga * xh[i] + be;
    }
  }

  return make_result<T>(
      "instance_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, N, C, M](const TensorNode<T>& self) {
        const T* gy = self.grad.data();
        std::vector<T>* gg = wants_grad(gamma) ? &grad_of(gamma) : nullptr;
        std::vector<T>* gbeta = wants_grad(beta) ? &grad_of(beta) : nullptr;
        std::vector<T>* gx = wants_grad(x) ? &grad_of(x) : nullptr;
        for (Index nc = 0; nc < N * C; ++nc) {
          const std::size_t c = static_cast<std::size_t>(nc % C);
          const T* g = gy + nc * M;
          const T* xh = xhat->data() + nc * M;
          T sum_g = 0, sum_gx = 0;
          for (Index i = 0; i < M; ++i) {
            sum_g += g[i];
            sum_gx += g[i] * xh[i];
          }
          if (gg) (*gg)[c] += sum_gx;
          if (gbeta) (*gbeta)[c] += sum_g;
          if (gx) {
            const T ga = gamma.data()[c];
            const T k = ga * (*inv_std)[static_cast<std::size_t>(nc)] / static_cast<T>(M);
            T* dst = gx->data() + nc * M;
            for (Index i = 0; i < M; ++i) {
              dst[i] += k * (static_cast<T>(M) * g[i] - sum_g - xh[i] * sum_gx);
            }
          }
        }
      });
}

namespace {

struct Tap {
  Index lo, hi;
  double frac;
};

std::vector<Tap> bilinear_taps(Index in, Index out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const Index lo = static_cast<Index>(std::floor(src));
    const Index hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename T>
BasicTensor<T> interpolate_bilinear(const BasicTensor<T>& x, Index out_h, Index out_w) {
  require_rank(x, 4, "interpolate_bilinear", "input");
  require(out_h >= 1 && out_w >= 1, "interpolate_bilinear: output size must be positive");
  const Index NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  auto ty = std::make_shared<std::vector<Tap>>(bilinear_taps(H, out_h));
  auto tx = std::make_shared<std::vector<Tap>>(bilinear_taps(W, out_w));
  std::vector<T> out(static_cast<std::size_t>(NC * out_h * out_w));
  const T* xd = x.data().data();
  for (Index p = 0; p < NC; ++p) {
    const T* src = xd + p * H * W;
    T* dst = out.data() + p * out_h * out_w;
    for (Index i = 0; i < out_h; ++i) {
      const Tap& a = (*ty)[static_cast<std::size_t>(i)];
      const T fy = static_cast<T>(a.frac);
      const T* r0 = src + a.lo * W;
      const T* r1 = src + a.hi * W;
      for (Index j = 0; j < out_w; ++j) {
        const Tap& b = (*tx)[static_cast<std::size_t>(j)];
        const T fx = static_cast<T>(b.frac);
        const T top = r0[b.lo] * (T(1) - fx) + r0[b.hi] * fx;
        const T bot = r1[b.lo] * (T(1) - fx) + r1[b.hi] * fx;
        dst[i * out_w + j] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  return make_result<T>(
      "interpolate_bilinear", Shape{x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x},
      [x, ty, tx, NC, H, W, out_h, out_w](const TensorNode<T>& self) {
        auto& gx = grad_of(x);
        for (Index p = 0; p < NC; ++p) {
          const T* g = self.grad.data() + p * out_h * out_w;
          T* dst = gx.data() + p * H * W;
          for (Index i = 0; i < out_h; ++i) {
            const Tap& a = (*ty)[static_cast<std::size_t>(i)];
            const T fy = static_cast<T>(a.frac);
            for (Index j = 0; j < out_w; ++j) {
              const Tap& b = (*tx)[static_cast<std::size_t>(j)];
              const T fx = static_cast<T>(b.frac);
              const T v = g[i * out_w + j];
              dst[a.lo * W + b.lo] += v * (T(1) - fy) * (T(1) - fx);
              dst[a.lo * W + b.hi] += v * (T(1) - fy) * fx;
              dst[a.hi * W + b.lo] += v * fy * (T(1) - fx);
              dst[a.hi * W + b.hi] += v * fy * fx;
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, Index axis) {
  require(x.defined() && x.rank() >= 1, "softmax: input must have rank >= 1");
  const Index rank = static_cast<Index>(x.rank());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "softmax: axis out of range for " + shape_str(x.shape()));
  Index outer = 1, inner = 1;
  for (Index d = 0; d < axis; ++d) outer *= x.dim(static_cast<std::size_t>(d));
  for (Index d = axis + 1; d < rank; ++d) inner *= x.dim(static_cast<std::size_t>(d));
  const Index n = x.dim(static_cast<std::size_t>(axis));
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (Index k = 0; k < n; ++k) mx = std::max(mx, xd[base + k * inner]);
      T s = 0;
      for (Index k = 0; k < n; ++k) {
        const T e = std::exp(xd[base + k * inner] - mx);
        out[static_cast<std::size_t>(base + k * inner)] = e;
        s += e;
      }
      for (Index k = 0; k < n; ++k) out[static_cast<std::size_t>(base + k * inner)] /= s;
    }
  }
  auto saved = std::make_shared<std::vector<T>>(out);
  return make_result<T>("softmax", x.shape(), std::move(out), {x},
                        [x, saved, outer, inner, n](const TensorNode<T>& self) {
                          auto& gx = grad_of(x);
                          const T* y = saved->data();
                          const T* g = self.grad.data();
                          for (Index o = 0; o < outer; ++o) {
                            for (Index in = 0; in < inner; ++in) {
                              const Index base = o * n * inner + in;
                              T dot = 0;
                              for (Index k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
                              for (Index k = 0; k < n; ++k) {
                                const Index i = base + k * inner;
                                gx[static_cast<std::size_t>(i)] += y[i] * (g[i] - dot);
                              }
                            }
                          }
                        });
}

template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, Index kernel, Index stride) {
  require_rank(x, 4, "max_pool2d", "input");
  require(kernel >= 1 && stride >= 1, "max_pool2d: kernel and stride must be >= 1");
  const Index NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H >= kernel && W >= kernel, "max_pool2d: window " + std::to_string(kernel) +
                                          " does not fit input " + shape_str(x.shape()));
  const Index Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  std::vector<T> out(static_cast<std::size_t>(NC * Ho * Wo));
  auto arg = std::make_shared<std::vector<Index>>(out.size());
  const T* xd = x.data().data();
  for (Index p = 0; p < NC; ++p) {
    for (Index i = 0; i < Ho; ++i) {
      for (Index j = 0; j < Wo; ++j) {
        Index best = p * H * W + (i * stride) * W + j * stride;
        for (Index u = 0; u < kernel; ++u) {
          for (Index v = 0; v < kernel; ++v) {
            const Index idx = p * H * W + (i * stride + u) * W + j * stride + v;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        const std::size_t o = static_cast<std::size_t>((p * Ho + i) * Wo + j);
        out[o] = xd[best];
        (*arg)[o] = best;
      }
    }
  }
  return make_result<T>("max_pool2d", Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {x},
                        [x, arg](const TensorNode<T>& self) {
                          auto& gx = grad_of(x);
                          for (std::size_t o = 0; o < arg->size(); ++o) {
                            gx[static_cast<std::size_t>((*arg)[o])] += self.grad[o];
                          }
                        });
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const Index NC = x.dim(0) * x.dim(1), M = x.dim(2) * x.dim(3);
  require(M >= 1, "global_avg_pool: empty spatial extent");
  std::vector<T> out(static_cast<std::size_t>(NC));
  for (Index p = 0; p < NC; ++p) {
    T s = 0;
    for (Index i = 0; i < M; ++i) s += x.data()[static_cast<std::size_t>(p * M + i)];
    out[static_cast<std::size_t>(p)] = s / static_cast<T>(M);
  }
  return make_result<T>("global_avg_pool", Shape{x.dim(0), x.dim(1)}, std::move(out), {x},
                        [x, NC, M](const TensorNode<T>& self) {
                          auto& gx = grad_of(x);
                          for (Index p = 0; p < NC; ++p) {
                            const T g = self.grad[static_cast<std::size_t>(p)] / static_cast<T>(M);
                            for (Index i = 0; i < M; ++i) gx[static_cast<std::size_t>(p * M + i)] += g;
                          }
                        });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  const Index N = x.dim(0), In = x.dim(1), Out = w.dim(0);
  require(w.dim(1) == In, "linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                              shape_str(w.shape()));
  if (b.defined()) {
    require(static_cast<Index>(b.numel()) == Out, "linear: bias size mismatch");
  }
  std::vector<T> out(static_cast<std::size_t>(N * Out));
  MatMap<T> om(out.data(), N, Out);
  om.noalias() = ConstMatMap<T>(x.data().data(), N, In) *
                 ConstMatMap<T>(w.data().data(), Out, In).transpose();
  if (b.defined()) {
    for (Index n = 0; n < N; ++n) {
      for (Index o = 0; o < Out; ++o) om(n, o) += b.data()[static_cast<std::size_t>(o)];
    }
  }
  return make_result<T>("linear", Shape{N, Out}, std::move(out), {x, w, b},
                        [x, w, b, N, In, Out](const TensorNode<T>& self) {
                          ConstMatMap<T> g(self.grad.data(), N, Out);
                          if (wants_grad(w)) {
                            MatMap<T>(grad_of(w).data(), Out, In).noalias() +=
                                g.transpose() * ConstMatMap<T>(x.data().data(), N, In);
                          }
                          if (wants_grad(b)) {
                            auto& gb = grad_of(b);
                            for (Index n = 0; n < N; ++n) {
                              for (Index o = 0; o < Out; ++o) gb[static_cast<std::size_t>(o)] += g(n, o);
                            }
                          }
                          if (wants_grad(x)) {
                            MatMap<T>(grad_of(x).data(), N, In).noalias() +=
                                g * ConstMatMap<T>(w.data().data(), Out, In);
                          }
                        });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, Index axis) {
  require(!xs.empty(), "concat: no inputs");
  const Shape& first = xs.front().shape();
  const Index rank = static_cast<Index>(first.size());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "concat: axis out of range");
  Shape shape = first;
  shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& t : xs) {
    require(t.rank() == first.size(), "concat: rank mismatch");
    for (Index d = 0; d < rank; ++d) {
      if (d != axis) {
        require(t.dim(static_cast<std::size_t>(d)) == first[static_cast<std::size_t>(d)],
                "concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(first));
      }
    }
    shape[static_cast<std::size_t>(axis)] += t.dim(static_cast<std::size_t>(axis));
  }
  Index outer = 1, inner = 1;
  for (Index d = 0; d < axis; ++d) outer *= first[static_cast<std::size_t>(d)];
  for (Index d = axis + 1; d < rank; ++d) inner *= first[static_cast<std::size_t>(d)];
  const Index total = shape[static_cast<std::size_t>(axis)];
  std::vector<T> out(static_cast<std::size_t>(numel(shape)));
  Index offset = 0;
  for (const auto& t : xs) {
    const Index block = t.dim(static_cast<std::size_t>(axis)) * inner;
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(t.data().data() + o * block, block, out.data() + o * total * inner + offset);
    }
    offset += block;
  }
  return make_result<T>("concat", std::move(shape), std::move(out), xs,
                        [xs, axis, outer, inner, total](const TensorNode<T>& self) {
                          Index off = 0;
                          for (const auto& t : xs) {
                            const Index block = t.dim(static_cast<std::size_t>(axis)) * inner;
                            if (wants_grad(t)) {
                              auto& g = grad_of(t);
                              for (Index o = 0; o < outer; ++o) {
                                const T* src = self.grad.data() + o * total * inner + off;
                                T* dst = g.data() + o * block;
                                for (Index i = 0; i < block; ++i) dst[i] += src[i];
                              }
                            }
                            off += block;
                          }
                        });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape) {
  require(numel(shape) == static_cast<Index>(x.numel()),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", shape, std::move(out), {x},
                        [x](const TensorNode<T>& self) { accumulate(x, self.grad); });
}

template <typename T>
BasicTensor<T> straight_through(const std::vector<T>& hard, const BasicTensor<T>& soft) {
  require(hard.size() == soft.numel(), "straight_through: size mismatch");
  return make_result<T>("straight_through", soft.shape(), hard, {soft},
                        [soft](const TensorNode<T>& self) { accumulate(soft, self.grad); });
}

#define DYNSEG_INSTANTIATE_OPS(T)                                                                  \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                                 const BasicTensor<T>&, Index, Index);                             \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                             \
  template BasicTensor<T> leaky_relu(const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                          \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                         \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                              \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                             \
  template BasicTensor<T> instance_norm(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                        const BasicTensor<T>&, T);                                 \
  template BasicTensor<T> interpolate_bilinear(const BasicTensor<T>&, Index, Index);               \
  template BasicTensor<T> softmax(const BasicTensor<T>&, Index);                                   \
  template BasicTensor<T> max_pool2d(const BasicTensor<T>&, Index, Index);                         \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                  \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,                     \
                                 const BasicTensor<T>&);                                           \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, Index);                       \
  template BasicTensor<T> reshape(const BasicTensor<T>&, const Shape&);                            \
  template BasicTensor<T> straight_through(const std::vector<T>&, const BasicTensor<T>&);

DYNSEG_INSTANTIATE_OPS(float)
DYNSEG_INSTANTIATE_OPS(double)

#undef DYNSEG_INSTANTIATE_OPS

}  // namespace dynseg::ops
