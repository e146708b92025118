#include "mmfusion/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace mmf {

int64_t conv_out_extent(int64_t in, int64_t kernel, int64_t stride, int64_t pad) {
  if (stride < 1) throw ConfigError("stride must be >= 1, got " + std::to_string(stride));
  if (kernel < 1) throw ConfigError("kernel extent must be >= 1, got " + std::to_string(kernel));
  if (pad < 0) throw ConfigError("padding must be >= 0, got " + std::to_string(pad));
  const int64_t span = in + 2 * pad - kernel;
  if (span < 0)
    throw ConfigError("kernel " + std::to_string(kernel) + " exceeds padded extent " +
                      std::to_string(in + 2 * pad));
  return span / stride + 1;
}

namespace {

// 2D and 3D convolution/pooling share one implementation over [N,C,D,H,W]; 2D runs with D=1.
constexpr int64_t kMaxCachedColumns = int64_t{1} << 24;

struct Geometry {
  int64_t n, c, d, h, w;        // input
  int64_t kd, kh, kw;           // kernel
  int64_t sd, sh, sw;           // stride
  int64_t pd, ph, pw;           // padding
  int64_t od, oh, ow;           // output
  int64_t in_plane() const { return d * h * w; }
  int64_t out_plane() const { return od * oh * ow; }
  int64_t kvol() const { return kd * kh * kw; }
};

Geometry make_geometry(const Shape& in5, Ext3 k, Ext3 s, Ext3 p) {
  Geometry g{};
  g.n = in5[0];
  g.c = in5[1];
  g.d = in5[2];
  g.h = in5[3];
  g.w = in5[4];
  g.kd = k[0];
  g.kh = k[1];
  g.kw = k[2];
  g.sd = s[0];
  g.sh = s[1];
  g.sw = s[2];
  g.pd = p[0];
  g.ph = p[1];
  g.pw = p[2];
  g.od = conv_out_extent(g.d, g.kd, g.sd, g.pd);
  g.oh = conv_out_extent(g.h, g.kh, g.sh, g.ph);
  g.ow = conv_out_extent(g.w, g.kw, g.sw, g.pw);
  return g;
}

// Fixed-order 8-lane partial sums: vectorizable and deterministic.
template <typename T>
T dot(const T* a, const T* b, int64_t n) {
  T lanes[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) lanes[j] += a[i + j] * b[i + j];
  T acc = 0;
  for (int j = 0; j < 8; ++j) acc += lanes[j];
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// col[(c, kd, kh, kw), (od, oh, ow)] for one sample.
template <typename T>
void im2col(const T* x, const Geometry& g, T* col) {
  const int64_t P = g.out_plane();
  int64_t row = 0;
  for (int64_t c = 0; c < g.c; ++c) {
    const T* xc = x + c * g.in_plane();
    for (int64_t a = 0; a < g.kd; ++a)
      for (int64_t b = 0; b < g.kh; ++b)
        for (int64_t e = 0; e < g.kw; ++e, ++row) {
          T* out = col + row * P;
          for (int64_t z = 0; z < g.od; ++z) {
            const int64_t iz = z * g.sd - g.pd + a;
            for (int64_t y = 0; y < g.oh; ++y) {
              const int64_t iy = y * g.sh - g.ph + b;
              T* o = out + (z * g.oh + y) * g.ow;
              if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) {
                std::fill(o, o + g.ow, T(0));
                continue;
              }
              const T* src = xc + (iz * g.h + iy) * g.w;
              for (int64_t q = 0; q < g.ow; ++q) {
                const int64_t ix = q * g.sw - g.pw + e;
                o[q] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
              }
            }
          }
        }
  }
}

template <typename T>
void col2im_add(const T* col, const Geometry& g, T* gx) {
  const int64_t P = g.out_plane();
  int64_t row = 0;
  for (int64_t c = 0; c < g.c; ++c) {
    T* xc = gx + c * g.in_plane();
    for (int64_t a = 0; a < g.kd; ++a)
      for (int64_t b = 0; b < g.kh; ++b)
        for (int64_t e = 0; e < g.kw; ++e, ++row) {
          const T* in = col + row * P;
          for (int64_t z = 0; z < g.od; ++z) {
            const int64_t iz = z * g.sd - g.pd + a;
            if (iz < 0 || iz >= g.d) continue;
            for (int64_t y = 0; y < g.oh; ++y) {
              const int64_t iy = y * g.sh - g.ph + b;
              if (iy < 0 || iy >= g.h) continue;
              const T* o = in + (z * g.oh + y) * g.ow;
              T* dst = xc + (iz * g.h + iy) * g.w;
              for (int64_t q = 0; q < g.ow; ++q) {
                const int64_t ix = q * g.sw - g.pw + e;
                if (ix >= 0 && ix < g.w) dst[ix] += o[q];
              }
            }
          }
        }
  }
}

template <typename T>
Tensor<T> conv_nd(const char* name, const Tensor<T>& input, const Tensor<T>& weight,
                  const Tensor<T>& bias, const Shape& in5, const Shape& w5, Ext3 stride, Ext3 pad,
                  bool is2d) {
  if (in5[1] != w5[1])
    throw ConfigError(std::string(name) + ": input has " + std::to_string(in5[1]) +
                      " channels but weight expects " + std::to_string(w5[1]));
  const Geometry g = make_geometry(in5, {w5[2], w5[3], w5[4]}, stride, pad);
  const int64_t O = w5[0];
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O))
    throw ConfigError(std::string(name) + ": bias shape " + shape_str(bias.shape()) +
                      " does not match " + std::to_string(O) + " output channels");
  const int64_t K = g.c * g.kvol();
  const int64_t P = g.out_plane();

  Shape out_shape = is2d ? Shape{g.n, O, g.oh, g.ow} : Shape{g.n, O, g.od, g.oh, g.ow};
  NDArray<T> out(out_shape);
  // Column buffers are kept for the weight gradient when recording and small enough;
  // otherwise backward recomputes them.
  const bool recording = GradMode::enabled() && (input.requires_grad() || weight.requires_grad() ||
                                                  (bias.defined() && bias.requires_grad()));
  const bool keep = recording && weight.requires_grad() && K * P * g.n <= kMaxCachedColumns;
  auto cols = std::make_shared<std::vector<T>>(static_cast<size_t>(K * P * (keep ? g.n : 1)));
  const T* x = input.value().data();
  const T* wt = weight.value().data();
  for (int64_t n = 0; n < g.n; ++n) {
    T* colp = cols->data() + (keep ? n * K * P : 0);
    im2col(x + n * g.c * g.in_plane(), g, colp);
    const std::span<const T> col(colp, static_cast<size_t>(K * P));
    T* on = out.data() + n * O * P;
    for (int64_t o = 0; o < O; ++o) {
      T* orow = on + o * P;
      const T b0 = bias.defined() ? bias.value()[o] : T(0);
      std::fill(orow, orow + P, b0);
      const T* wrow = wt + o * K;
      for (int64_t r = 0; r < K; ++r) {
        const T wv = wrow[r];
        const T* crow = col.data() + r * P;
        for (int64_t p = 0; p < P; ++p) orow[p] += wv * crow[p];
      }
    }
  }

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return Tensor<T>::make_result(
      name, std::move(out), inputs, [g, O, K, P, has_bias, keep, cols](detail::Node<T>& self) {
        const auto& gout = *self.grad;
        auto& xin = *self.inputs[0];
        auto& win = *self.inputs[1];
        std::vector<T> col(keep ? 0 : static_cast<size_t>(K * P));
        std::vector<T> gcol(static_cast<size_t>(K * P));
        if (has_bias && self.inputs[2]->requires_grad) {
          auto& gb = self.inputs[2]->grad_buffer();
          for (int64_t n = 0; n < g.n; ++n)
            for (int64_t o = 0; o < O; ++o) {
              const T* gr = gout.data() + (n * O + o) * P;
              T acc = 0;
              for (int64_t p = 0; p < P; ++p) acc += gr[p];
              gb[o] += acc;
            }
        }
        const T* wt = win.value.data();
        for (int64_t n = 0; n < g.n; ++n) {
          const T* gn = gout.data() + n * O * P;
          if (win.requires_grad) {
            const T* colp = col.data();
            if (keep) {
              colp = cols->data() + n * K * P;
            } else {
              im2col(xin.value.data() + n * g.c * g.in_plane(), g, col.data());
            }
            T* gw = win.grad_buffer().data();
            for (int64_t o = 0; o < O; ++o) {
              const T* gr = gn + o * P;
              for (int64_t r = 0; r < K; ++r) {
                const T* crow = colp + r * P;
                gw[o * K + r] += dot(gr, crow, P);
              }
            }
          }
          if (xin.requires_grad) {
            std::fill(gcol.begin(), gcol.end(), T(0));
            for (int64_t o = 0; o < O; ++o) {
              const T* gr = gn + o * P;
              for (int64_t r = 0; r < K; ++r) {
                const T wv = wt[o * K + r];
                T* grow = gcol.data() + r * P;
                for (int64_t p = 0; p < P; ++p) grow[p] += wv * gr[p];
              }
            }
            col2im_add(gcol.data(), g, xin.grad_buffer().data() + n * g.c * g.in_plane());
          }
        }
      });
}

template <typename T>
Tensor<T> max_pool_nd(const char* name, const Tensor<T>& x, const Shape& in5, Ext3 k, Ext3 s,
                      Ext3 p, bool is2d) {
  for (int i = 0; i < 3; ++i)
    if (p[i] > k[i] / 2)
      throw ConfigError(std::string(name) + ": padding " + std::to_string(p[i]) +
                        " exceeds half the kernel " + std::to_string(k[i]));
  const Geometry g = make_geometry(in5, k, s, p);
  const int64_t NC = g.n * g.c;
  const int64_t P = g.out_plane();
  Shape out_shape = is2d ? Shape{g.n, g.c, g.oh, g.ow} : Shape{g.n, g.c, g.od, g.oh, g.ow};
  NDArray<T> out(out_shape);
  std::vector<int64_t> argmax(static_cast<size_t>(NC * P));
  const T* xv = x.value().data();
  for (int64_t nc = 0; nc < NC; ++nc) {
    const T* xp = xv + nc * g.in_plane();
    for (int64_t z = 0; z < g.od; ++z)
      for (int64_t y = 0; y < g.oh; ++y)
        for (int64_t q = 0; q < g.ow; ++q) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t best_i = -1;
          for (int64_t a = 0; a < g.kd; ++a) {
            const int64_t iz = z * g.sd - g.pd + a;
            if (iz < 0 || iz >= g.d) continue;
            for (int64_t b = 0; b < g.kh; ++b) {
              const int64_t iy = y * g.sh - g.ph + b;
              if (iy < 0 || iy >= g.h) continue;
              for (int64_t e = 0; e < g.kw; ++e) {
                const int64_t ix = q * g.sw - g.pw + e;
                if (ix < 0 || ix >= g.w) continue;
                const int64_t idx = (iz * g.h + iy) * g.w + ix;
                if (best_i < 0 || xp[idx] > best) {
                  best = xp[idx];
                  best_i = idx;
                }
              }
            }
          }
          const int64_t o = (z * g.oh + y) * g.ow + q;
          out[nc * P + o] = best;
          argmax[static_cast<size_t>(nc * P + o)] = best_i;
        }
  }
  return Tensor<T>::make_result(name, std::move(out), {x},
                                [g, NC, P, argmax = std::move(argmax)](detail::Node<T>& self) {
                                  auto& gx = self.inputs[0]->grad_buffer();
                                  const auto& go = *self.grad;
                                  for (int64_t nc = 0; nc < NC; ++nc)
                                    for (int64_t o = 0; o < P; ++o)
                                      gx[nc * g.in_plane() + argmax[static_cast<size_t>(nc * P + o)]] +=
                                          go[nc * P + o];
                                });
}

void require_rank(const Shape& s, size_t rank, const char* what) {
  if (s.size() != rank)
    throw InputError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(s));
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Ext2 stride,
                 Ext2 padding) {
  require_rank(input.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  const auto& i = input.shape();
  const auto& w = weight.shape();
  return conv_nd<T>("conv2d", input, weight, bias, {i[0], i[1], 1, i[2], i[3]},
                    {w[0], w[1], 1, w[2], w[3]}, {1, stride[0], stride[1]},
                    {0, padding[0], padding[1]}, true);
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Ext3 stride,
                 Ext3 padding) {
  require_rank(input.shape(), 5, "conv3d input");
  require_rank(weight.shape(), 5, "conv3d weight");
  return conv_nd<T>("conv3d", input, weight, bias, input.shape(), weight.shape(), stride, padding,
                    false);
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, Ext2 kernel, Ext2 stride, Ext2 padding) {
  require_rank(x.shape(), 4, "max_pool2d");
  const auto& s = x.shape();
  return max_pool_nd<T>("max_pool2d", x, {s[0], s[1], 1, s[2], s[3]}, {1, kernel[0], kernel[1]},
                        {1, stride[0], stride[1]}, {0, padding[0], padding[1]}, true);
}

template <typename T>
Tensor<T> max_pool3d(const Tensor<T>& x, Ext3 kernel, Ext3 stride, Ext3 padding) {
  require_rank(x.shape(), 5, "max_pool3d");
  return max_pool_nd<T>("max_pool3d", x, x.shape(), kernel, stride, padding, false);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  NDArray<T> out(x.shape());
  const auto& v = x.value();
  for (int64_t i = 0; i < v.size(); ++i) out[i] = v[i] > T(0) ? v[i] : T(0);
  return Tensor<T>::make_result("relu", std::move(out), {x}, [](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& gx = in.grad_buffer();
    for (int64_t i = 0; i < gx.size(); ++i)
      if (in.value[i] > T(0)) gx[i] += (*self.grad)[i];
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ConfigError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  NDArray<T> out(a.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return Tensor<T>::make_result("add", std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (int64_t i = 0; i < g.size(); ++i) g[i] += (*self.grad)[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ConfigError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  NDArray<T> out(a.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return Tensor<T>::make_result("mul", std::move(out), {a, b}, [](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    const auto& go = *self.grad;
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (int64_t i = 0; i < g.size(); ++i) g[i] += go[i] * y.value[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (int64_t i = 0; i < g.size(); ++i) g[i] += go[i] * x.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  NDArray<T> out(x.shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * factor;
  return Tensor<T>::make_result("scale", std::move(out), {x}, [factor](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int64_t i = 0; i < g.size(); ++i) g[i] += (*self.grad)[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (auto v : x.value().values()) acc += v;
  return Tensor<T>::make_result("sum", NDArray<T>({1}, acc), {x}, [](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T go = (*self.grad)[0];
    for (int64_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  return Tensor<T>::make_result("reshape", x.value().reshaped(std::move(shape)), {x},
                                [](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad_buffer();
                                  for (int64_t i = 0; i < g.size(); ++i) g[i] += (*self.grad)[i];
                                });
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     NDArray<T>& running_mean, NDArray<T>& running_var, bool training, T momentum,
                     T eps) {
  const auto& s = x.shape();
  if (s.size() < 2) throw InputError("batch_norm: expected [N,C,...], got " + shape_str(s));
  const int64_t N = s[0], C = s[1];
  const int64_t S = x.size() / (N * C);
  const int64_t M = N * S;
  if (gamma.size() != C || beta.size() != C || running_mean.size() != C || running_var.size() != C)
    throw ConfigError("batch_norm: parameter size does not match " + std::to_string(C) + " channels");
  if (training && M <= 1)
    throw InputError("batch_norm: training mode needs more than one value per channel, got " +
                     std::to_string(M));

  const auto& xv = x.value();
  NDArray<T> out(s);
  std::vector<T> mean(static_cast<size_t>(C)), invstd(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c) {
    T mu, var;
    if (training) {
      T acc = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = xv.data() + (n * C + c) * S;
        for (int64_t i = 0; i < S; ++i) acc += p[i];
      }
      mu = acc / T(M);
      T sq = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* p = xv.data() + (n * C + c) * S;
        for (int64_t i = 0; i < S; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / T(M);
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * sq / T(M - 1);
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    mean[c] = mu;
    invstd[c] = T(1) / std::sqrt(var + eps);
    const T gm = gamma.value()[c], bt = beta.value()[c];
    for (int64_t n = 0; n < N; ++n) {
      const T* p = xv.data() + (n * C + c) * S;
      T* o = out.data() + (n * C + c) * S;
      for (int64_t i = 0; i < S; ++i) o[i] = gm * (p[i] - mu) * invstd[c] + bt;
    }
  }

  return Tensor<T>::make_result(
      "batch_norm", std::move(out), {x, gamma, beta},
      [N, C, S, M, training, mean = std::move(mean), invstd = std::move(invstd)](detail::Node<T>& self) {
        auto& xn = *self.inputs[0];
        auto& gn = *self.inputs[1];
        auto& bn = *self.inputs[2];
        const auto& go = *self.grad;
        for (int64_t c = 0; c < C; ++c) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (int64_t n = 0; n < N; ++n) {
            const T* p = xn.value.data() + (n * C + c) * S;
            const T* d = go.data() + (n * C + c) * S;
            for (int64_t i = 0; i < S; ++i) {
              sum_dy += d[i];
              sum_dy_xhat += d[i] * (p[i] - mean[c]) * invstd[c];
            }
          }
          if (gn.requires_grad) gn.grad_buffer()[c] += sum_dy_xhat;
          if (bn.requires_grad) bn.grad_buffer()[c] += sum_dy;
          if (!xn.requires_grad) continue;
          const T gm = gn.value[c];
          auto& gx = xn.grad_buffer();
          for (int64_t n = 0; n < N; ++n) {
            const T* p = xn.value.data() + (n * C + c) * S;
            const T* d = go.data() + (n * C + c) * S;
            T* gxp = gx.data() + (n * C + c) * S;
            for (int64_t i = 0; i < S; ++i) {
              if (training) {
                const T xhat = (p[i] - mean[c]) * invstd[c];
                gxp[i] += gm * invstd[c] * (d[i] - sum_dy / T(M) - xhat * sum_dy_xhat / T(M));
              } else {
                gxp[i] += gm * invstd[c] * d[i];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() < 3) throw InputError("global_avg_pool: expected [N,C,...], got " + shape_str(s));
  const int64_t NC = s[0] * s[1];
  const int64_t S = x.size() / NC;
  NDArray<T> out({s[0], s[1]});
  for (int64_t i = 0; i < NC; ++i) {
    T acc = 0;
    const T* p = x.value().data() + i * S;
    for (int64_t j = 0; j < S; ++j) acc += p[j];
    out[i] = acc / T(S);
  }
  return Tensor<T>::make_result("global_avg_pool", std::move(out), {x}, [NC, S](detail::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int64_t i = 0; i < NC; ++i) {
      const T v = (*self.grad)[i] / T(S);
      for (int64_t j = 0; j < S; ++j) g[i * S + j] += v;
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  const int64_t N = x.dim(0), F = x.dim(1), K = weight.dim(0);
  if (weight.dim(1) != F)
    throw ConfigError("linear: input width " + std::to_string(F) + " but weight expects " +
                      std::to_string(weight.dim(1)));
  if (bias.defined() && bias.size() != K) throw ConfigError("linear: bias size mismatch");
  NDArray<T> out({N, K});
  const T* xv = x.value().data();
  const T* wv = weight.value().data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t k = 0; k < K; ++k) {
      T acc = bias.defined() ? bias.value()[k] : T(0);
      for (int64_t f = 0; f < F; ++f) acc += xv[n * F + f] * wv[k * F + f];
      out[n * K + k] = acc;
    }
  std::vector<Tensor<T>> inputs{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return Tensor<T>::make_result("linear", std::move(out), inputs, [N, F, K, has_bias](detail::Node<T>& self) {
    auto& xn = *self.inputs[0];
    auto& wn = *self.inputs[1];
    const auto& go = *self.grad;
    if (xn.requires_grad) {
      auto& gx = xn.grad_buffer();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k) {
          const T g = go[n * K + k];
          for (int64_t f = 0; f < F; ++f) gx[n * F + f] += g * wn.value[k * F + f];
        }
    }
    if (wn.requires_grad) {
      auto& gw = wn.grad_buffer();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k) {
          const T g = go[n * K + k];
          for (int64_t f = 0; f < F; ++f) gw[k * F + f] += g * xn.value[n * F + f];
        }
    }
    if (has_bias && self.inputs[2]->requires_grad) {
      auto& gb = self.inputs[2]->grad_buffer();
      for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k) gb[k] += go[n * K + k];
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& tensors, size_t axis) {
  if (tensors.empty()) throw ConfigError("concat: no inputs");
  const Shape& first = tensors[0].shape();
  if (axis >= first.size())
    throw ConfigError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : tensors) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok)
      throw ConfigError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first) +
                        " along axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= first[i];
  for (size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const int64_t total = out_shape[axis];

  NDArray<T> out(out_shape);
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& t : tensors) {
    offsets.push_back(off);
    const int64_t len = t.shape()[axis] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(t.value().data() + o * len, len, out.data() + (o * total + off) * inner);
    off += t.shape()[axis];
  }
  return Tensor<T>::make_result(
      "concat", std::move(out), tensors,
      [outer, inner, total, offsets = std::move(offsets)](detail::Node<T>& self) {
        for (size_t k = 0; k < self.inputs.size(); ++k) {
          auto& in = *self.inputs[k];
          if (!in.requires_grad) continue;
          const int64_t len = in.value.size() / outer;
          auto& g = in.grad_buffer();
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = self.grad->data() + (o * total + offsets[k]) * inner;
            T* dst = g.data() + o * len;
            for (int64_t i = 0; i < len; ++i) dst[i] += src[i];
          }
        }
      });
}

template <typename T>
NDArray<T> softmax(const NDArray<T>& logits) {
  require_rank(logits.shape(), 2, "softmax");
  const int64_t N = logits.dim(0), K = logits.dim(1);
  NDArray<T> out(logits.shape());
  for (int64_t n = 0; n < N; ++n) {
    const T* row = logits.data() + n * K;
    T mx = *std::max_element(row, row + K);
    T z = 0;
    for (int64_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (int64_t k = 0; k < K; ++k) out[n * K + k] = std::exp(row[k] - mx) / z;
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int64_t> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const int64_t N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != N)
    throw InputError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(N));
  for (auto l : labels)
    if (l < 0 || l >= K)
      throw InputError("softmax_cross_entropy: label " + std::to_string(l) + " outside [0," +
                       std::to_string(K) + ")");
  NDArray<T> probs = softmax(logits.value());
  T loss = 0;
  for (int64_t n = 0; n < N; ++n) {
    const T* row = logits.value().data() + n * K;
    T mx = *std::max_element(row, row + K);
    T z = 0;
    for (int64_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    loss += std::log(z) + mx - row[labels[static_cast<size_t>(n)]];
  }
  loss /= T(N);
  std::vector<int64_t> lab(labels.begin(), labels.end());
  return Tensor<T>::make_result(
      "softmax_cross_entropy", NDArray<T>({1}, loss), {logits},
      [N, K, probs = std::move(probs), lab = std::move(lab)](detail::Node<T>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const T go = (*self.grad)[0] / T(N);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t k = 0; k < K; ++k) {
            const T onehot = (k == lab[static_cast<size_t>(n)]) ? T(1) : T(0);
            g[n * K + k] += go * (probs[n * K + k] - onehot);
          }
      });
}

#define MMF_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Ext2, Ext2);         \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Ext3, Ext3);         \
  template Tensor<T> relu(const Tensor<T>&);                                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> scale(const Tensor<T>&, T);                                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                 \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, NDArray<T>&,     \
                                NDArray<T>&, bool, T, T);                                              \
  template Tensor<T> max_pool2d(const Tensor<T>&, Ext2, Ext2, Ext2);                                   \
  template Tensor<T> max_pool3d(const Tensor<T>&, Ext3, Ext3, Ext3);                                   \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, size_t);                                    \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int64_t>);                \
  template NDArray<T> softmax(const NDArray<T>&);

MMF_INSTANTIATE_OPS(float)
MMF_INSTANTIATE_OPS(double)

}  // namespace mmf
