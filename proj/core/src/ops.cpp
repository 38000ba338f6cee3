#include "collab/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

namespace collab {

namespace {

template <typename T>
using NodeT = detail::Node<T>;

// Runs `fn(parent_grad)` only when the parent participates in the graph.
template <typename T, typename F>
void into(NodeT<T>& self, std::size_t parent, F&& fn) {
  auto& p = *self.parents[parent];
  if (!p.requires_grad) return;
  p.ensure_grad();
  fn(p.grad, p.value);
}

void expect_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    fail(ErrorKind::dimension, std::string(what) + " expects rank " + std::to_string(rank) +
                                   ", got shape " + shape_str(s));
  }
}

void expect_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    fail(ErrorKind::dimension,
         std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

struct ConvGeom {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t cols() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

ConvGeom conv_geometry(const Shape& in, const Shape& k, std::size_t stride, std::size_t pad) {
  expect_rank(in, 4, "conv2d input");
  expect_rank(k, 4, "conv2d kernel");
  if (in[1] != k[1]) {
    fail(ErrorKind::dimension, "conv2d: input has " + std::to_string(in[1]) +
                                   " channels but kernel expects " + std::to_string(k[1]));
  }
  if (stride < 1) fail(ErrorKind::parameter, "conv2d: stride must be >= 1");
  ConvGeom g{in[0], in[1], in[2], in[3], k[0], k[2], k[3], stride, pad, 0, 0};
  const std::size_t ph = g.h + 2 * pad;
  const std::size_t pw = g.w + 2 * pad;
  if (ph < g.kh || pw < g.kw) {
    fail(ErrorKind::dimension, "conv2d: kernel " + shape_str(k) + " larger than padded input " +
                                   shape_str(in));
  }
  if ((ph - g.kh) % stride != 0 || (pw - g.kw) % stride != 0) {
    fail(ErrorKind::dimension, "conv2d: non-integral output extent for input " + shape_str(in) +
                                   ", kernel " + shape_str(k) + ", stride " +
                                   std::to_string(stride));
  }
  g.oh = (ph - g.kh) / stride + 1;
  g.ow = (pw - g.kw) / stride + 1;
  return g;
}

// Unfolds sample `n` into a (C*Kh*Kw) x (OH*OW) matrix.
template <typename T>
void im2col(const ConvGeom& g, const T* x, std::vector<T>& cols) {
  cols.assign(g.cols() * g.positions(), T(0));
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* plane = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        T* out = cols.data() + row * g.positions();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            out[oy * g.ow + ox] = plane[iy * static_cast<long>(g.w) + ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeom& g, const std::vector<T>& cols, T* dx) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c; ++c) {
    T* plane = dx + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        const T* in = cols.data() + row * g.positions();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            plane[iy * static_cast<long>(g.w) + ix] += in[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv2d_impl(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>* bias,
                      std::size_t stride, std::size_t padding) {
  const ConvGeom g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.f)) {
    fail(ErrorKind::dimension, "conv2d: bias shape " + shape_str(bias->shape()) +
                                   " does not match " + std::to_string(g.f) + " filters");
  }
  const std::size_t P = g.positions();
  const std::size_t Q = g.cols();
  std::vector<T> out(g.n * g.f * P, T(0));
  std::vector<T> cols;
  const T* x = input.values().data();
  const T* w = kernel.values().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, x + n * g.c * g.h * g.w, cols);
    T* o = out.data() + n * g.f * P;
    for (std::size_t f = 0; f < g.f; ++f) {
      T* orow = o + f * P;
      if (bias) std::fill(orow, orow + P, bias->values()[f]);
      const T* wrow = w + f * Q;
      for (std::size_t q = 0; q < Q; ++q) {
        const T wv = wrow[q];
        const T* crow = cols.data() + q * P;
        for (std::size_t p = 0; p < P; ++p) orow[p] += wv * crow[p];
      }
    }
  }
  std::vector<Tensor<T>> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return Tensor<T>::from_op(
      {g.n, g.f, g.oh, g.ow}, std::move(out), "conv2d", std::move(inputs), [g](NodeT<T>& self) {
        const std::size_t P = g.positions();
        const std::size_t Q = g.cols();
        const auto& gout = self.grad;
        const auto& xin = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        const bool need_x = self.parents[0]->requires_grad;
        const bool need_w = self.parents[1]->requires_grad;
        if (need_x) self.parents[0]->ensure_grad();
        if (need_w) self.parents[1]->ensure_grad();
        std::vector<T> cols;
        std::vector<T> dcols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* go = gout.data() + n * g.f * P;
          if (need_w) {
            im2col(g, xin.data() + n * g.c * g.h * g.w, cols);
            T* dw = self.parents[1]->grad.data();
            for (std::size_t f = 0; f < g.f; ++f) {
              const T* grow = go + f * P;
              for (std::size_t q = 0; q < Q; ++q) {
                const T* crow = cols.data() + q * P;
                T acc = T(0);
                for (std::size_t p = 0; p < P; ++p) acc += grow[p] * crow[p];
                dw[f * Q + q] += acc;
              }
            }
          }
          if (need_x) {
            dcols.assign(Q * P, T(0));
            for (std::size_t f = 0; f < g.f; ++f) {
              const T* grow = go + f * P;
              const T* wrow = wv.data() + f * Q;
              for (std::size_t q = 0; q < Q; ++q) {
                const T wq = wrow[q];
                T* drow = dcols.data() + q * P;
                for (std::size_t p = 0; p < P; ++p) drow[p] += wq * grow[p];
              }
            }
            col2im(g, dcols, self.parents[0]->grad.data() + n * g.c * g.h * g.w);
          }
        }
        if (self.parents.size() > 2) {
          into<T>(self, 2, [&](std::vector<T>& db, const std::vector<T>&) {
            for (std::size_t n = 0; n < g.n; ++n) {
              for (std::size_t f = 0; f < g.f; ++f) {
                const T* grow = gout.data() + (n * g.f + f) * P;
                T acc = T(0);
                for (std::size_t p = 0; p < P; ++p) acc += grow[p];
                db[f] += acc;
              }
            }
          });
        }
      });
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* what) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) fail(ErrorKind::numeric, std::string(what) + ": non-finite input");
  }
}

// Rows x classes view of a rank-1 or rank-2 tensor.
std::pair<std::size_t, std::size_t> row_layout(const Shape& s, const char* what) {
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  fail(ErrorKind::dimension, std::string(what) + " expects rank 1 or 2, got " + shape_str(s));
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding) {
  return conv2d_impl<T>(input, kernel, nullptr, stride, padding);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  return conv2d_impl<T>(input, kernel, &bias, stride, padding);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  expect_rank(input.shape(), 2, "linear input");
  expect_rank(weight.shape(), 2, "linear weight");
  const std::size_t N = input.dim(0), D = input.dim(1), M = weight.dim(1);
  if (weight.dim(0) != D) {
    fail(ErrorKind::dimension, "linear: input " + shape_str(input.shape()) +
                                   " incompatible with weight " + shape_str(weight.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != M) {
    fail(ErrorKind::dimension, "linear: bias " + shape_str(bias.shape()) + " should be [" +
                                   std::to_string(M) + "]");
  }
  std::vector<T> out(N * M);
  const T* x = input.values().data();
  const T* w = weight.values().data();
  const T* b = bias.values().data();
  for (std::size_t n = 0; n < N; ++n) {
    T* o = out.data() + n * M;
    std::copy(b, b + M, o);
    for (std::size_t d = 0; d < D; ++d) {
      const T xv = x[n * D + d];
      const T* wrow = w + d * M;
      for (std::size_t j = 0; j < M; ++j) o[j] += xv * wrow[j];
    }
  }
  return Tensor<T>::from_op({N, M}, std::move(out), "linear", {input, weight, bias},
                            [N, D, M](NodeT<T>& self) {
                              const auto& g = self.grad;
                              into<T>(self, 0, [&](std::vector<T>& dx, const std::vector<T>&) {
                                const auto& w = self.parents[1]->value;
                                for (std::size_t n = 0; n < N; ++n) {
                                  for (std::size_t d = 0; d < D; ++d) {
                                    T acc = T(0);
                                    for (std::size_t j = 0; j < M; ++j)
                                      acc += g[n * M + j] * w[d * M + j];
                                    dx[n * D + d] += acc;
                                  }
                                }
                              });
                              into<T>(self, 1, [&](std::vector<T>& dw, const std::vector<T>&) {
                                const auto& x = self.parents[0]->value;
                                for (std::size_t n = 0; n < N; ++n) {
                                  for (std::size_t d = 0; d < D; ++d) {
                                    const T xv = x[n * D + d];
                                    for (std::size_t j = 0; j < M; ++j)
                                      dw[d * M + j] += xv * g[n * M + j];
                                  }
                                }
                              });
                              into<T>(self, 2, [&](std::vector<T>& db, const std::vector<T>&) {
                                for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t j = 0; j < M; ++j) db[j] += g[n * M + j];
                              });
                            });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode, bool update_running) {
  expect_rank(input.shape(), 4, "batchnorm2d input");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    fail(ErrorKind::dimension, "batchnorm2d: gamma/beta must have shape [" + std::to_string(C) +
                                   "]");
  }
  if (state.running_mean.size() != C || state.running_var.size() != C) {
    fail(ErrorKind::dimension, "batchnorm2d: running statistics sized for " +
                                   std::to_string(state.running_mean.size()) + " channels, input has " +
                                   std::to_string(C));
  }
  const std::size_t M = N * HW;
  if (mode == Mode::train && M < 2) {
    fail(ErrorKind::degenerate,
         "batchnorm2d: train mode needs at least 2 values per channel, got " + std::to_string(M));
  }
  const T* x = input.values().data();
  const T* gm = gamma.values().data();
  const T* bt = beta.values().data();
  std::vector<T> xhat(input.numel());
  std::vector<T> invstd(C);
  std::vector<T> out(input.numel());
  for (std::size_t c = 0; c < C; ++c) {
    T mu, var;
    if (mode == Mode::train) {
      T s = T(0);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < HW; ++k) s += x[(n * C + c) * HW + k];
      mu = s / static_cast<T>(M);
      T v = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < HW; ++k) {
          const T d = x[(n * C + c) * HW + k] - mu;
          v += d * d;
        }
      }
      var = v / static_cast<T>(M);
      if (update_running) {
        state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mu;
        state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * var;
      }
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    invstd[c] = T(1) / std::sqrt(var + state.eps);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < HW; ++k) {
        const std::size_t idx = (n * C + c) * HW + k;
        xhat[idx] = (x[idx] - mu) * invstd[c];
        out[idx] = gm[c] * xhat[idx] + bt[c];
      }
    }
  }
  const bool batch_stats = mode == Mode::train;
  return Tensor<T>::from_op(
      input.shape(), std::move(out), "batchnorm2d", {input, gamma, beta},
      [N, C, HW, M, batch_stats, xhat = std::move(xhat), invstd = std::move(invstd)](NodeT<T>& self) {
        const auto& g = self.grad;
        const auto& gm = self.parents[1]->value;
        std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t k = 0; k < HW; ++k) {
              const std::size_t idx = (n * C + c) * HW + k;
              sum_g[c] += g[idx];
              sum_gx[c] += g[idx] * xhat[idx];
            }
          }
        }
        into<T>(self, 0, [&](std::vector<T>& dx, const std::vector<T>&) {
          const T inv_m = T(1) / static_cast<T>(M);
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
              for (std::size_t k = 0; k < HW; ++k) {
                const std::size_t idx = (n * C + c) * HW + k;
                if (batch_stats) {
                  dx[idx] += gm[c] * invstd[c] *
                             (g[idx] - inv_m * sum_g[c] - xhat[idx] * inv_m * sum_gx[c]);
                } else {
                  dx[idx] += gm[c] * invstd[c] * g[idx];
                }
              }
            }
          }
        });
        into<T>(self, 1, [&](std::vector<T>& dg, const std::vector<T>&) {
          for (std::size_t c = 0; c < C; ++c) dg[c] += sum_gx[c];
        });
        into<T>(self, 2, [&](std::vector<T>& db, const std::vector<T>&) {
          for (std::size_t c = 0; c < C; ++c) db[c] += sum_g[c];
        });
      });
}

namespace {

// Shared pooling core: windows given as [row_begin,row_end) x [col_begin,col_end).
template <typename T, typename WindowFn>
Tensor<T> pool_impl(const Tensor<T>& input, std::size_t oh, std::size_t ow, const char* op,
                    WindowFn window) {
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  std::vector<T> out(N * C * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  const T* x = input.values().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = x + nc * H * W;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const auto [r0, r1, c0, c1] = window(i, j);
        std::size_t best = r0 * W + c0;
        for (std::size_t r = r0; r < r1; ++r) {
          for (std::size_t c = c0; c < c1; ++c) {
            if (plane[r * W + c] > plane[best]) best = r * W + c;
          }
        }
        const std::size_t o = (nc * oh + i) * ow + j;
        out[o] = plane[best];
        argmax[o] = nc * H * W + best;
      }
    }
  }
  if (KinkProbe::active()) {
    for (std::size_t a : argmax) KinkProbe::record(a);
  }
  return Tensor<T>::from_op({N, C, oh, ow}, std::move(out), op, {input},
                            [argmax = std::move(argmax)](NodeT<T>& self) {
                              into<T>(self, 0, [&](std::vector<T>& dx, const std::vector<T>&) {
                                for (std::size_t o = 0; o < argmax.size(); ++o)
                                  dx[argmax[o]] += self.grad[o];
                              });
                            });
}

}  // namespace

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t window, std::size_t stride) {
  expect_rank(input.shape(), 4, "maxpool2d input");
  if (window < 1 || stride < 1) fail(ErrorKind::parameter, "maxpool2d: window and stride must be >= 1");
  const std::size_t H = input.dim(2), W = input.dim(3);
  if (window > H || window > W) {
    fail(ErrorKind::dimension, "maxpool2d: window " + std::to_string(window) +
                                   " larger than input " + shape_str(input.shape()));
  }
  const std::size_t oh = (H - window) / stride + 1;
  const std::size_t ow = (W - window) / stride + 1;
  return pool_impl<T>(input, oh, ow, "maxpool2d", [=](std::size_t i, std::size_t j) {
    return std::array<std::size_t, 4>{i * stride, i * stride + window, j * stride,
                                      j * stride + window};
  });
}

template <typename T>
Tensor<T> adaptive_maxpool2d(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  expect_rank(input.shape(), 4, "adaptive_maxpool2d input");
  if (out_h < 1 || out_w < 1) fail(ErrorKind::parameter, "adaptive_maxpool2d: empty output grid");
  const std::size_t H = input.dim(2), W = input.dim(3);
  return pool_impl<T>(input, out_h, out_w, "adaptive_maxpool2d", [=](std::size_t i, std::size_t j) {
    return std::array<std::size_t, 4>{i * H / out_h, ((i + 1) * H + out_h - 1) / out_h,
                                      j * W / out_w, ((j + 1) * W + out_w - 1) / out_w};
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.values().begin(), input.values().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  if (KinkProbe::active()) {
    const auto x = input.values();
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      bits = (bits << 1) | (x[i] > T(0) ? 1u : 0u);
      if (i % 64 == 63 || i + 1 == x.size()) {
        KinkProbe::record(bits);
        bits = 0;
      }
    }
  }
  return Tensor<T>::from_op(input.shape(), std::move(out), "relu", {input}, [](NodeT<T>& self) {
    const bool faulty = active_fault() == Fault::relu_backward;
    into<T>(self, 0, [&](std::vector<T>& dx, const std::vector<T>& x) {
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (x[i] > T(0) || faulty) dx[i] += self.grad[i];
      }
    });
  });
}

template <typename T>
Tensor<T> dropout_apply(const Tensor<T>& input, const Tensor<T>& mask, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    fail(ErrorKind::parameter, "dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
  expect_same(input.shape(), mask.shape(), "dropout_apply");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> out(input.numel());
  const auto x = input.values();
  const auto m = mask.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (m[i] != T(0) && m[i] != T(1)) fail(ErrorKind::parameter, "dropout mask must be 0/1");
    out[i] = x[i] * m[i] * keep_scale;
  }
  return Tensor<T>::from_op(input.shape(), std::move(out), "dropout", {input, mask},
                            [keep_scale](NodeT<T>& self) {
                              const auto& m = self.parents[1]->value;
                              into<T>(self, 0, [&](std::vector<T>& dx, const std::vector<T>&) {
                                for (std::size_t i = 0; i < dx.size(); ++i)
                                  dx[i] += self.grad[i] * m[i] * keep_scale;
                              });
                            });
}

template <typename T>
Tensor<T> softmax_temperature(const Tensor<T>& logits, double temperature) {
  if (!(temperature > 0.0)) fail(ErrorKind::parameter, "softmax temperature must be > 0");
  check_finite(logits, "softmax_temperature");
  const auto [rows, m] = row_layout(logits.shape(), "softmax_temperature");
  if (m < 1) fail(ErrorKind::dimension, "softmax over zero classes");
  const T inv_t = static_cast<T>(1.0 / temperature);
  const auto z = logits.values();
  std::vector<T> p(z.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * m;
    T* pr = p.data() + r * m;
    const T mx = *std::max_element(zr, zr + m);
    T s = T(0);
    for (std::size_t k = 0; k < m; ++k) {
      pr[k] = std::exp((zr[k] - mx) * inv_t);
      s += pr[k];
    }
    for (std::size_t k = 0; k < m; ++k) pr[k] /= s;
  }
  return Tensor<T>::from_op(logits.shape(), p, "softmax", {logits},
                            [rows = rows, m = m, inv_t](NodeT<T>& self) {
                              const auto& p = self.value;
                              const auto& g = self.grad;
                              into<T>(self, 0, [&](std::vector<T>& dz, const std::vector<T>&) {
                                for (std::size_t r = 0; r < rows; ++r) {
                                  T dot = T(0);
                                  for (std::size_t k = 0; k < m; ++k)
                                    dot += g[r * m + k] * p[r * m + k];
                                  for (std::size_t k = 0; k < m; ++k)
                                    dz[r * m + k] += inv_t * p[r * m + k] * (g[r * m + k] - dot);
                                }
                              });
                            });
}

template <typename T>
Tensor<T> log_softmax_temperature(const Tensor<T>& logits, double temperature) {
  if (!(temperature > 0.0)) fail(ErrorKind::parameter, "softmax temperature must be > 0");
  check_finite(logits, "log_softmax_temperature");
  const auto [rows, m] = row_layout(logits.shape(), "log_softmax_temperature");
  if (m < 1) fail(ErrorKind::dimension, "softmax over zero classes");
  const T inv_t = static_cast<T>(1.0 / temperature);
  const auto z = logits.values();
  std::vector<T> out(z.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * m;
    T* o = out.data() + r * m;
    const T mx = *std::max_element(zr, zr + m);
    T s = T(0);
    for (std::size_t k = 0; k < m; ++k) s += std::exp((zr[k] - mx) * inv_t);
    const T lse = std::log(s);
    for (std::size_t k = 0; k < m; ++k) o[k] = (zr[k] - mx) * inv_t - lse;
  }
  return Tensor<T>::from_op(logits.shape(), std::move(out), "log_softmax", {logits},
                            [rows = rows, m = m, inv_t](NodeT<T>& self) {
                              const auto& lp = self.value;
                              const auto& g = self.grad;
                              into<T>(self, 0, [&](std::vector<T>& dz, const std::vector<T>&) {
                                for (std::size_t r = 0; r < rows; ++r) {
                                  T gs = T(0);
                                  for (std::size_t k = 0; k < m; ++k) gs += g[r * m + k];
                                  for (std::size_t k = 0; k < m; ++k) {
                                    dz[r * m + k] +=
                                        inv_t * (g[r * m + k] - std::exp(lp[r * m + k]) * gs);
                                  }
                                }
                              });
                            });
}

template <typename T>
Tensor<T> detach(const Tensor<T>& input) {
  return Tensor<T>::constant(input.shape(),
                             std::vector<T>(input.values().begin(), input.values().end()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  expect_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "add", {a, b}, [](NodeT<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      into<T>(self, k, [&](std::vector<T>& d, const std::vector<T>&) {
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
      });
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  expect_same(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "sub", {a, b}, [](NodeT<T>& self) {
    into<T>(self, 0, [&](std::vector<T>& d, const std::vector<T>&) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    });
    into<T>(self, 1, [&](std::vector<T>& d, const std::vector<T>&) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= self.grad[i];
    });
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  expect_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "mul", {a, b}, [](NodeT<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    into<T>(self, 0, [&](std::vector<T>& d, const std::vector<T>&) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * bv[i];
    });
    into<T>(self, 1, [&](std::vector<T>& d, const std::vector<T>&) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * av[i];
    });
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  std::vector<T> out(a.values().begin(), a.values().end());
  for (T& v : out) v *= f;
  return Tensor<T>::from_op(a.shape(), std::move(out), "scale", {a}, [f](NodeT<T>& self) {
    const T df = active_fault() == Fault::scale_backward ? f * T(1.1) : f;
    into<T>(self, 0, [&](std::vector<T>& d, const std::vector<T>&) {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * df;
    });
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  return Tensor<T>::from_op({}, {s}, "sum", {a}, [](NodeT<T>& self) {
    into<T>(self, 0, [&](std::vector<T>& d, const std::vector<T>&) {
      for (T& v : d) v += self.grad[0];
    });
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) fail(ErrorKind::dimension, "mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    fail(ErrorKind::dimension, "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return Tensor<T>::from_op(std::move(shape), std::vector<T>(a.values().begin(), a.values().end()),
                            "reshape", {a}, [](NodeT<T>& self) {
                              into<T>(self, 0, [&](std::vector<T>& d, const std::vector<T>&) {
                                for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
                              });
                            });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  if (a.rank() < 1) fail(ErrorKind::dimension, "flatten needs a batch axis");
  const std::size_t n = a.dim(0);
  return reshape(a, {n, n == 0 ? 0 : a.numel() / n});
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  expect_rank(a.shape(), 2, "matmul lhs");
  expect_rank(b.shape(), 2, "matmul rhs");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) {
    fail(ErrorKind::dimension, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(M * N, T(0));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const T aik = av[i * K + k];
      for (std::size_t j = 0; j < N; ++j) out[i * N + j] += aik * bv[k * N + j];
    }
  return Tensor<T>::from_op({M, N}, std::move(out), "matmul", {a, b}, [M, K, N](NodeT<T>& self) {
    const auto& g = self.grad;
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    into<T>(self, 0, [&](std::vector<T>& da, const std::vector<T>&) {
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          T acc = T(0);
          for (std::size_t j = 0; j < N; ++j) acc += g[i * N + j] * bv[k * N + j];
          da[i * K + k] += acc;
        }
    });
    into<T>(self, 1, [&](std::vector<T>& db, const std::vector<T>&) {
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          const T aik = av[i * K + k];
          for (std::size_t j = 0; j < N; ++j) db[k * N + j] += aik * g[i * N + j];
        }
    });
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  expect_rank(a.shape(), 2, "transpose");
  const std::size_t R = a.dim(0), C = a.dim(1);
  std::vector<T> out(R * C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = a.values()[r * C + c];
  return Tensor<T>::from_op({C, R}, std::move(out), "transpose", {a}, [R, C](NodeT<T>& self) {
    into<T>(self, 0, [&](std::vector<T>& d, const std::vector<T>&) {
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) d[r * C + c] += self.grad[c * R + r];
    });
  });
}

template <typename T>
Tensor<T> spatial_std(const Tensor<T>& maps) {
  expect_rank(maps.shape(), 4, "spatial_std input");
  const std::size_t N = maps.dim(0), C = maps.dim(1), HW = maps.dim(2) * maps.dim(3);
  if (HW < 1) fail(ErrorKind::dimension, "spatial_std over empty maps");
  const T* x = maps.values().data();
  std::vector<T> out(N * C);
  std::vector<T> means(N * C);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* p = x + nc * HW;
    T s = T(0);
    for (std::size_t k = 0; k < HW; ++k) s += p[k];
    const T mu = s / static_cast<T>(HW);
    T v = T(0);
    for (std::size_t k = 0; k < HW; ++k) v += (p[k] - mu) * (p[k] - mu);
    means[nc] = mu;
    out[nc] = std::sqrt(v / static_cast<T>(HW));
  }
  return Tensor<T>::from_op({N, C}, std::move(out), "spatial_std", {maps},
                            [N, C, HW, means = std::move(means)](NodeT<T>& self) {
                              into<T>(self, 0, [&](std::vector<T>& dx, const std::vector<T>& x) {
                                for (std::size_t nc = 0; nc < N * C; ++nc) {
                                  const T sigma = self.value[nc];
                                  if (sigma <= T(0)) continue;
                                  const T coef = self.grad[nc] / (static_cast<T>(HW) * sigma);
                                  for (std::size_t k = 0; k < HW; ++k)
                                    dx[nc * HW + k] += coef * (x[nc * HW + k] - means[nc]);
                                }
                              });
                            });
}

template <typename T>
Tensor<T> center_columns(const Tensor<T>& x) {
  expect_rank(x.shape(), 2, "center_columns");
  const std::size_t N = x.dim(0), D = x.dim(1);
  if (N < 1) fail(ErrorKind::dimension, "center_columns on an empty batch");
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t d = 0; d < D; ++d) {
    T s = T(0);
    for (std::size_t n = 0; n < N; ++n) s += out[n * D + d];
    const T mu = s / static_cast<T>(N);
    for (std::size_t n = 0; n < N; ++n) out[n * D + d] -= mu;
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), "center_columns", {x},
                            [N, D](NodeT<T>& self) {
                              into<T>(self, 0, [&](std::vector<T>& dx, const std::vector<T>&) {
                                for (std::size_t d = 0; d < D; ++d) {
                                  T s = T(0);
                                  for (std::size_t n = 0; n < N; ++n) s += self.grad[n * D + d];
                                  const T mg = s / static_cast<T>(N);
                                  for (std::size_t n = 0; n < N; ++n)
                                    dx[n * D + d] += self.grad[n * D + d] - mg;
                                }
                              });
                            });
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& x, double norm_eps) {
  expect_rank(x.shape(), 2, "cosine_similarity");
  const std::size_t N = x.dim(0), D = x.dim(1);
  if (N < 2) {
    fail(ErrorKind::input, "similarity matrix needs a batch of at least 2, got " + std::to_string(N));
  }
  const T eps = static_cast<T>(norm_eps);
  const T* xv = x.values().data();
  std::vector<T> norms(N), unit(N * D);
  for (std::size_t i = 0; i < N; ++i) {
    T s = T(0);
    for (std::size_t d = 0; d < D; ++d) s += xv[i * D + d] * xv[i * D + d];
    norms[i] = std::sqrt(s);
    for (std::size_t d = 0; d < D; ++d) unit[i * D + d] = xv[i * D + d] / (norms[i] + eps);
  }
  std::vector<T> out(N * N);
  for (std::size_t i = 0; i < N; ++i) {
    out[i * N + i] = T(1);
    for (std::size_t j = 0; j < i; ++j) {
      T s = T(0);
      for (std::size_t d = 0; d < D; ++d) s += unit[i * D + d] * unit[j * D + d];
      out[i * N + j] = s;
      out[j * N + i] = s;
    }
  }
  return Tensor<T>::from_op(
      {N, N}, std::move(out), "cosine_similarity", {x},
      [N, D, eps, norms = std::move(norms), unit = std::move(unit)](NodeT<T>& self) {
        into<T>(self, 0, [&](std::vector<T>& dx, const std::vector<T>& xv) {
          const auto& g = self.grad;
          std::vector<T> du(D);
          for (std::size_t i = 0; i < N; ++i) {
            std::fill(du.begin(), du.end(), T(0));
            for (std::size_t j = 0; j < N; ++j) {
              if (j == i) continue;
              const T w = g[i * N + j] + g[j * N + i];
              for (std::size_t d = 0; d < D; ++d) du[d] += w * unit[j * D + d];
            }
            // u = x / (|x| + eps)  =>  du/dx = I/r - x x^T / (r^2 |x|)
            const T r = norms[i] + eps;
            T proj = T(0);
            for (std::size_t d = 0; d < D; ++d) proj += xv[i * D + d] * du[d];
            const T radial = norms[i] > T(0) ? proj / (r * r * norms[i]) : T(0);
            for (std::size_t d = 0; d < D; ++d)
              dx[i * D + d] += du[d] / r - radial * xv[i * D + d];
          }
        });
      });
}

template <typename T>
Tensor<T> standardize_rows(const Tensor<T>& x, double std_eps) {
  expect_rank(x.shape(), 2, "standardize_rows");
  const std::size_t R = x.dim(0), G = x.dim(1);
  if (G < 1) fail(ErrorKind::dimension, "standardize_rows on empty rows");
  const T eps = static_cast<T>(std_eps);
  const T* xv = x.values().data();
  std::vector<T> out(R * G);
  std::vector<T> denom(R);
  std::vector<char> guarded(R);
  for (std::size_t r = 0; r < R; ++r) {
    T s = T(0);
    for (std::size_t k = 0; k < G; ++k) s += xv[r * G + k];
    const T mu = s / static_cast<T>(G);
    T v = T(0);
    for (std::size_t k = 0; k < G; ++k) v += (xv[r * G + k] - mu) * (xv[r * G + k] - mu);
    const T sigma = std::sqrt(v / static_cast<T>(G));
    guarded[r] = sigma <= eps;
    denom[r] = guarded[r] ? eps : sigma;
    for (std::size_t k = 0; k < G; ++k) out[r * G + k] = (xv[r * G + k] - mu) / denom[r];
  }
  return Tensor<T>::from_op(
      x.shape(), out, "standardize_rows", {x},
      [R, G, denom = std::move(denom), guarded = std::move(guarded)](NodeT<T>& self) {
        into<T>(self, 0, [&](std::vector<T>& dx, const std::vector<T>&) {
          const auto& y = self.value;
          const auto& g = self.grad;
          for (std::size_t r = 0; r < R; ++r) {
            T mg = T(0), mgy = T(0);
            for (std::size_t k = 0; k < G; ++k) {
              mg += g[r * G + k];
              mgy += g[r * G + k] * y[r * G + k];
            }
            mg /= static_cast<T>(G);
            mgy /= static_cast<T>(G);
            for (std::size_t k = 0; k < G; ++k) {
              T v = g[r * G + k] - mg;
              if (!guarded[r]) v -= y[r * G + k] * mgy;
              dx[r * G + k] += v / denom[r];
            }
          }
        });
      });
}

template <typename T>
Tensor<T> zero_diagonal(const Tensor<T>& a) {
  expect_rank(a.shape(), 2, "zero_diagonal");
  const std::size_t N = a.dim(0);
  if (a.dim(1) != N) fail(ErrorKind::dimension, "zero_diagonal needs a square matrix");
  std::vector<T> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < N; ++i) out[i * N + i] = T(0);
  return Tensor<T>::from_op(a.shape(), std::move(out), "zero_diagonal", {a}, [N](NodeT<T>& self) {
    into<T>(self, 0, [&](std::vector<T>& d, const std::vector<T>&) {
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
          if (i != j) d[i * N + j] += self.grad[i * N + j];
    });
  });
}

template <typename T>
Tensor<T> frobenius_norm(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v * v;
  const T norm = std::sqrt(s);
  return Tensor<T>::from_op({}, {norm}, "frobenius_norm", {a}, [norm](NodeT<T>& self) {
    if (norm <= T(0)) return;
    into<T>(self, 0, [&](std::vector<T>& d, const std::vector<T>& av) {
      const T coef = self.grad[0] / norm;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += coef * av[i];
    });
  });
}

template <typename T>
Tensor<T> one_hot(const std::vector<int>& labels, std::size_t classes) {
  std::vector<T> out(labels.size() * classes, T(0));
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= classes) {
      fail(ErrorKind::input, "label " + std::to_string(labels[n]) + " outside [0, " +
                                 std::to_string(classes) + ")");
    }
    out[n * classes + static_cast<std::size_t>(labels[n])] = T(1);
  }
  return Tensor<T>::constant({labels.size(), classes}, std::move(out));
}

#define COLLAB_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);     \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                            std::size_t);                                                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                 BatchNormState<T>&, Mode, bool);                              \
  template Tensor<T> maxpool2d(const Tensor<T>&, std::size_t, std::size_t);                    \
  template Tensor<T> adaptive_maxpool2d(const Tensor<T>&, std::size_t, std::size_t);           \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> dropout_apply(const Tensor<T>&, const Tensor<T>&, double);                \
  template Tensor<T> softmax_temperature(const Tensor<T>&, double);                            \
  template Tensor<T> log_softmax_temperature(const Tensor<T>&, double);                        \
  template Tensor<T> detach(const Tensor<T>&);                                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, double);                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> flatten(const Tensor<T>&);                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> spatial_std(const Tensor<T>&);                                            \
  template Tensor<T> center_columns(const Tensor<T>&);                                         \
  template Tensor<T> cosine_similarity(const Tensor<T>&, double);                              \
  template Tensor<T> standardize_rows(const Tensor<T>&, double);                               \
  template Tensor<T> zero_diagonal(const Tensor<T>&);                                          \
  template Tensor<T> frobenius_norm(const Tensor<T>&);                                         \
  template Tensor<T> one_hot(const std::vector<int>&, std::size_t);

COLLAB_INSTANTIATE_OPS(float)
COLLAB_INSTANTIATE_OPS(double)

#undef COLLAB_INSTANTIATE_OPS

}  // namespace collab
