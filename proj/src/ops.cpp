#include "rashnet/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace rashnet {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) throw ShapeError(std::string(op) + ": dtype mismatch");
}

struct ConvGeometry {
  std::int64_t n, c, h, w;
  std::int64_t o, kh, kw;
  std::int64_t oh, ow;
  std::int64_t stride, pad;

  std::int64_t patch() const { return c * kh * kw; }
  std::int64_t positions() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, Conv2dOptions opt) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  require_same_dtype(input, kernel, "conv2d");
  if (opt.stride < 1) throw ShapeError("conv2d: stride must be positive");
  if (opt.padding < 0) throw ShapeError("conv2d: padding must be nonnegative");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.o = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  if (kernel.dim(1) != g.c) {
    throw ShapeError("conv2d: input has " + std::to_string(g.c) + " channels, kernel expects " +
                     std::to_string(kernel.dim(1)));
  }
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.oh = window_output_extent(g.h, g.kh, g.stride, g.pad);
  g.ow = window_output_extent(g.w, g.kw, g.stride, g.pad);
  return g;
}

template <class T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const std::int64_t positions = g.positions();
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * positions;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, T(0));
            continue;
          }
          const T* src = image + (c * g.h + iy) * g.w;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* image) {
  const std::int64_t positions = g.positions();
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * positions;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = image + (c * g.h + iy) * g.w;
          const T* src = row + oy * g.ow;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <class T>
Tensor conv_forward(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                    const ConvGeometry& g) {
  Tensor out({g.n, g.o, g.oh, g.ow}, input.dtype());
  auto in = input.data<T>();
  auto k = kernel.data<T>();
  auto dst = out.data<T>();
  ConstMapMat<T> wmat(k.data(), g.o, g.patch());
  Buffer<T> cols;
  if (!g.pointwise()) cols.resize(static_cast<std::size_t>(g.patch() * g.positions()));
  for (std::int64_t n = 0; n < g.n; ++n) {
    const T* image = in.data() + n * g.c * g.h * g.w;
    const T* colp = image;
    if (!g.pointwise()) {
      im2col(image, g, cols.data());
      colp = cols.data();
    }
    ConstMapMat<T> cmat(colp, g.patch(), g.positions());
    MapMat<T> omat(dst.data() + n * g.o * g.positions(), g.o, g.positions());
    omat.noalias() = wmat * cmat;
    if (bias) {
      auto b = bias->data<T>();
      for (std::int64_t o = 0; o < g.o; ++o) omat.row(o).array() += b[o];
    }
  }
  return out;
}

template <class T>
void conv_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out,
                   const ConvGeometry& g, Tensor* grad_input, Tensor* grad_kernel,
                   Tensor* grad_bias) {
  auto in = input.data<T>();
  auto go = grad_out.data<T>();
  ConstMapMat<T> wmat(kernel.data<T>().data(), g.o, g.patch());
  Buffer<T> cols(static_cast<std::size_t>(g.patch() * g.positions()));
  Buffer<T> dcols;
  if (grad_input) dcols.resize(cols.size());
  for (std::int64_t n = 0; n < g.n; ++n) {
    const T* image = in.data() + n * g.c * g.h * g.w;
    ConstMapMat<T> gmat(go.data() + n * g.o * g.positions(), g.o, g.positions());
    if (grad_kernel) {
      const T* colp = image;
      if (!g.pointwise()) {
        im2col(image, g, cols.data());
        colp = cols.data();
      }
      ConstMapMat<T> cmat(colp, g.patch(), g.positions());
      MapMat<T> gk(grad_kernel->data<T>().data(), g.o, g.patch());
      gk.noalias() += gmat * cmat.transpose();
    }
    if (grad_input) {
      T* gi = grad_input->data<T>().data() + n * g.c * g.h * g.w;
      if (g.pointwise()) {
        MapMat<T> gimat(gi, g.c, g.positions());
        gimat.noalias() = wmat.transpose() * gmat;
      } else {
        MapMat<T> dmat(dcols.data(), g.patch(), g.positions());
        dmat.noalias() = wmat.transpose() * gmat;
        col2im(dcols.data(), g, gi);
      }
    }
    if (grad_bias) {
      auto gb = grad_bias->data<T>();
      for (std::int64_t o = 0; o < g.o; ++o) {
        T acc = 0;
        for (std::int64_t q = 0; q < g.positions(); ++q) acc += gmat(o, q);
        gb[o] += acc;
      }
    }
  }
}

}  // namespace

std::int64_t window_output_extent(std::int64_t in, std::int64_t window, std::int64_t stride,
                                  std::int64_t pad) {
  if (window < 1 || stride < 1 || pad < 0) {
    throw ShapeError("window must be >= 1, stride >= 1, padding >= 0");
  }
  if (in + 2 * pad < window) {
    throw ShapeError("window " + std::to_string(window) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - window) / stride + 1;
}

Variable conv2d(const Variable& input, const Variable& kernel, const Variable* bias,
                Conv2dOptions options) {
  const ConvGeometry g = conv_geometry(input.value(), kernel.value(), options);
  if (bias) {
    if (bias->value().rank() != 1 || bias->value().dim(0) != g.o) {
      throw ShapeError("conv2d: bias must have shape [" + std::to_string(g.o) + "]");
    }
    require_same_dtype(input.value(), bias->value(), "conv2d");
  }
  Tensor out = dispatch_dtype(input.dtype(), [&]<class T>() {
    return conv_forward<T>(input.value(), kernel.value(), bias ? &bias->value() : nullptr, g);
  });
  std::vector<Variable> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return make_result(std::move(out), inputs, "conv2d",
                     [input, kernel, g, has_bias](const Tensor& grad_out) {
                       std::vector<std::optional<Tensor>> grads(has_bias ? 3 : 2);
                       Tensor gi, gk, gb;
                       if (input.requires_grad()) gi = Tensor(input.shape(), input.dtype());
                       if (kernel.requires_grad()) gk = Tensor(kernel.shape(), kernel.dtype());
                       if (has_bias) gb = Tensor({g.o}, input.dtype());
                       dispatch_dtype(input.dtype(), [&]<class T>() {
                         conv_backward<T>(input.value(), kernel.value(), grad_out, g,
                                          input.requires_grad() ? &gi : nullptr,
                                          kernel.requires_grad() ? &gk : nullptr,
                                          has_bias ? &gb : nullptr);
                       });
                       if (input.requires_grad()) grads[0] = std::move(gi);
                       if (kernel.requires_grad()) grads[1] = std::move(gk);
                       if (has_bias) grads[2] = std::move(gb);
                       return grads;
                     });
}

Tensor conv2d_reference(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                        Conv2dOptions options) {
  const ConvGeometry g = conv_geometry(input, kernel, options);
  Tensor out({g.n, g.o, g.oh, g.ow}, input.dtype());
  dispatch_dtype(input.dtype(), [&]<class T>() {
    auto in = input.data<T>();
    auto k = kernel.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t o = 0; o < g.o; ++o) {
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            double acc = bias ? bias->get(o) : 0.0;
            for (std::int64_t c = 0; c < g.c; ++c) {
              for (std::int64_t ki = 0; ki < g.kh; ++ki) {
                const std::int64_t iy = oy * g.stride - g.pad + ki;
                if (iy < 0 || iy >= g.h) continue;
                for (std::int64_t kj = 0; kj < g.kw; ++kj) {
                  const std::int64_t ix = ox * g.stride - g.pad + kj;
                  if (ix < 0 || ix >= g.w) continue;
                  acc += static_cast<double>(in[((n * g.c + c) * g.h + iy) * g.w + ix]) *
                         static_cast<double>(k[((o * g.c + c) * g.kh + ki) * g.kw + kj]);
                }
              }
            }
            dst[((n * g.o + o) * g.oh + oy) * g.ow + ox] = static_cast<T>(acc);
          }
        }
      }
    }
  });
  return out;
}

Variable max_pool2d(const Variable& input, Pool2dOptions opt) {
  const Tensor& x = input.value();
  require_rank(x, 4, "max_pool2d", "input");
  if (opt.padding >= opt.window) {
    throw ShapeError("max_pool2d: padding must be smaller than the window");
  }
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = window_output_extent(h, opt.window, opt.stride, opt.padding);
  const std::int64_t ow = window_output_extent(w, opt.window, opt.stride, opt.padding);
  Tensor out({n, c, oh, ow}, x.dtype());
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
  dispatch_dtype(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    std::int64_t idx = 0;
    for (std::int64_t plane = 0; plane < n * c; ++plane) {
      const T* p = src.data() + plane * h * w;
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox, ++idx) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t best_at = -1;
          for (std::int64_t ki = 0; ki < opt.window; ++ki) {
            const std::int64_t iy = oy * opt.stride - opt.padding + ki;
            if (iy < 0 || iy >= h) continue;
            for (std::int64_t kj = 0; kj < opt.window; ++kj) {
              const std::int64_t ix = ox * opt.stride - opt.padding + kj;
              if (ix < 0 || ix >= w) continue;
              const T v = p[iy * w + ix];
              // A NaN anywhere in the window propagates.
              if (best_at < 0 || v > best || (v != v && best == best)) {
                best = v;
                best_at = plane * h * w + iy * w + ix;
              }
            }
          }
          dst[idx] = best;
          (*argmax)[static_cast<std::size_t>(idx)] = best_at;
        }
      }
    }
  });
  return make_result(std::move(out), {input}, "max_pool2d", [input, argmax](const Tensor& g) {
    Tensor gi(input.shape(), input.dtype());
    dispatch_dtype(g.dtype(), [&]<class T>() {
      auto src = g.data<T>();
      auto dst = gi.data<T>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[(*argmax)[i]] += src[i];
    });
    return std::vector<std::optional<Tensor>>{std::move(gi)};
  });
}

Variable global_avg_pool2d(const Variable& input) {
  const Tensor& x = input.value();
  require_rank(x, 4, "global_avg_pool2d", "input");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c}, x.dtype());
  dispatch_dtype(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t i = 0; i < n * c; ++i) {
      T acc = 0;
      for (std::int64_t j = 0; j < hw; ++j) acc += src[i * hw + j];
      dst[i] = acc / static_cast<T>(hw);
    }
  });
  return make_result(std::move(out), {input}, "global_avg_pool2d", [input, n, c, hw](const Tensor& g) {
    Tensor gi(input.shape(), input.dtype());
    dispatch_dtype(g.dtype(), [&]<class T>() {
      auto src = g.data<T>();
      auto dst = gi.data<T>();
      for (std::int64_t i = 0; i < n * c; ++i) {
        const T v = src[i] / static_cast<T>(hw);
        std::fill(dst.begin() + i * hw, dst.begin() + (i + 1) * hw, v);
      }
    });
    return std::vector<std::optional<Tensor>>{std::move(gi)};
  });
}

Variable batch_norm2d(const Variable& input, const Variable& gamma, const Variable& beta,
                      Tensor& running_mean, Tensor& running_var, BatchNormOptions opt) {
  const Tensor& x = input.value();
  require_rank(x, 4, "batch_norm2d", "input");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::int64_t m = n * hw;
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma.value(), &beta.value(), &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw ShapeError("batch_norm2d: per-channel tensors must have shape [" + std::to_string(c) +
                       "], got " + shape_str(t->shape()));
    }
    require_same_dtype(x, *t, "batch_norm2d");
  }
  if (!(opt.eps > 0)) throw std::invalid_argument("batch_norm2d: eps must be positive");
  if (opt.mode == NormMode::train && m == 1) {
    throw ShapeError("batch_norm2d: train mode needs more than one value per channel");
  }

  Tensor out(x.shape(), x.dtype());
  Tensor xhat(x.shape(), x.dtype());
  Tensor invstd({c}, x.dtype());
  const bool train = opt.mode == NormMode::train;

  dispatch_dtype(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    auto xh = xhat.data<T>();
    auto is = invstd.data<T>();
    auto gm = gamma.value().data<T>();
    auto bt = beta.value().data<T>();
    auto rm = running_mean.data<T>();
    auto rv = running_var.data<T>();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double mean = 0, var = 0;
      if (train) {
        for (std::int64_t b = 0; b < n; ++b) {
          const T* p = src.data() + (b * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) mean += p[j];
        }
        mean /= static_cast<double>(m);
        for (std::int64_t b = 0; b < n; ++b) {
          const T* p = src.data() + (b * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) {
            const double d = p[j] - mean;
            var += d * d;
          }
        }
        var /= static_cast<double>(m);
        if (opt.update_running_stats) {
          const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
          rm[ch] = static_cast<T>((1 - opt.momentum) * rm[ch] + opt.momentum * mean);
          rv[ch] = static_cast<T>((1 - opt.momentum) * rv[ch] + opt.momentum * unbiased);
        }
      } else {
        mean = rm[ch];
        var = rv[ch];
      }
      const T inv = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const T mu = static_cast<T>(mean);
      is[ch] = inv;
      for (std::int64_t b = 0; b < n; ++b) {
        const std::int64_t base = (b * c + ch) * hw;
        for (std::int64_t j = 0; j < hw; ++j) {
          const T v = (src[base + j] - mu) * inv;
          xh[base + j] = v;
          dst[base + j] = gm[ch] * v + bt[ch];
        }
      }
    }
  });

  return make_result(
      std::move(out), {input, gamma, beta}, "batch_norm2d",
      [input, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), train, n, c, hw,
       m](const Tensor& g) {
        Tensor gi(input.shape(), input.dtype());
        Tensor gg({c}, input.dtype());
        Tensor gb({c}, input.dtype());
        dispatch_dtype(g.dtype(), [&]<class T>() {
          auto dy = g.data<T>();
          auto xh = xhat.data<T>();
          auto is = invstd.data<T>();
          auto gm = gamma.value().data<T>();
          auto dx = gi.data<T>();
          for (std::int64_t ch = 0; ch < c; ++ch) {
            double sum_dy = 0, sum_dy_xhat = 0;
            for (std::int64_t b = 0; b < n; ++b) {
              const std::int64_t base = (b * c + ch) * hw;
              for (std::int64_t j = 0; j < hw; ++j) {
                sum_dy += dy[base + j];
                sum_dy_xhat += static_cast<double>(dy[base + j]) * xh[base + j];
              }
            }
            gg.data<T>()[ch] = static_cast<T>(sum_dy_xhat);
            gb.data<T>()[ch] = static_cast<T>(sum_dy);
            const T scale = gm[ch] * is[ch];
            if (train) {
              const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(m));
              const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(m));
              for (std::int64_t b = 0; b < n; ++b) {
                const std::int64_t base = (b * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) {
                  dx[base + j] = scale * (dy[base + j] - mean_dy - xh[base + j] * mean_dy_xhat);
                }
              }
            } else {
              for (std::int64_t b = 0; b < n; ++b) {
                const std::int64_t base = (b * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) dx[base + j] = scale * dy[base + j];
              }
            }
          }
        });
        std::vector<std::optional<Tensor>> grads(3);
        if (input.requires_grad()) grads[0] = std::move(gi);
        if (gamma.requires_grad()) grads[1] = std::move(gg);
        if (beta.requires_grad()) grads[2] = std::move(gb);
        return grads;
      });
}

Variable affine(const Variable& input, const Variable& weight, const Variable& bias) {
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  require_rank(x, 2, "affine", "input");
  require_rank(w, 2, "affine", "weight");
  require_same_dtype(x, w, "affine");
  require_same_dtype(x, bias.value(), "affine");
  const std::int64_t n = x.dim(0), d = x.dim(1), k = w.dim(1);
  if (w.dim(0) != d) {
    throw ShapeError("affine: input width " + std::to_string(d) + " does not match weight " +
                     shape_str(w.shape()));
  }
  if (bias.value().rank() != 1 || bias.value().dim(0) != k) {
    throw ShapeError("affine: bias must have shape [" + std::to_string(k) + "]");
  }
  Tensor out({n, k}, x.dtype());
  dispatch_dtype(x.dtype(), [&]<class T>() {
    ConstMapMat<T> xm(x.data<T>().data(), n, d);
    ConstMapMat<T> wm(w.data<T>().data(), d, k);
    MapMat<T> om(out.data<T>().data(), n, k);
    om.noalias() = xm * wm;
    auto b = bias.value().data<T>();
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < k; ++j) om(i, j) += b[j];
    }
  });
  return make_result(std::move(out), {input, weight, bias}, "affine",
                     [input, weight, bias, n, d, k](const Tensor& g) {
                       std::vector<std::optional<Tensor>> grads(3);
                       dispatch_dtype(g.dtype(), [&]<class T>() {
                         ConstMapMat<T> gm(g.data<T>().data(), n, k);
                         if (input.requires_grad()) {
                           Tensor gi({n, d}, g.dtype());
                           ConstMapMat<T> wm(weight.value().data<T>().data(), d, k);
                           MapMat<T>(gi.data<T>().data(), n, d).noalias() = gm * wm.transpose();
                           grads[0] = std::move(gi);
                         }
                         if (weight.requires_grad()) {
                           Tensor gw({d, k}, g.dtype());
                           ConstMapMat<T> xm(input.value().data<T>().data(), n, d);
                           MapMat<T>(gw.data<T>().data(), d, k).noalias() = xm.transpose() * gm;
                           grads[1] = std::move(gw);
                         }
                         if (bias.requires_grad()) {
                           Tensor gb({k}, g.dtype());
                           auto b = gb.data<T>();
                           for (std::int64_t i = 0; i < n; ++i) {
                             for (std::int64_t j = 0; j < k; ++j) b[j] += gm(i, j);
                           }
                           grads[2] = std::move(gb);
                         }
                       });
                       return grads;
                     });
}

Variable relu(const Variable& input) {
  Tensor out(input.shape(), input.dtype());
  dispatch_dtype(input.dtype(), [&]<class T>() {
    auto src = input.value().data<T>();
    auto dst = out.data<T>();
    // NaN passes through rather than being clamped to zero.
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = !(src[i] <= T(0)) ? src[i] : T(0);
  });
  return make_result(std::move(out), {input}, "relu", [input](const Tensor& g) {
    Tensor gi(input.shape(), input.dtype());
    dispatch_dtype(g.dtype(), [&]<class T>() {
      auto x = input.value().data<T>();
      auto src = g.data<T>();
      auto dst = gi.data<T>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = x[i] > T(0) ? src[i] : T(0);
    });
    return std::vector<std::optional<Tensor>>{std::move(gi)};
  });
}

Variable add(const Variable& a, const Variable& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  require_same_dtype(a.value(), b.value(), "add");
  Tensor out = a.value();
  accumulate(out, b.value());
  return make_result(std::move(out), {a, b}, "add", [a, b](const Tensor& g) {
    std::vector<std::optional<Tensor>> grads(2);
    if (a.requires_grad()) grads[0] = g;
    if (b.requires_grad()) grads[1] = g;
    return grads;
  });
}

Variable mul(const Variable& a, const Variable& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  require_same_dtype(a.value(), b.value(), "mul");
  Tensor out(a.shape(), a.dtype());
  dispatch_dtype(a.dtype(), [&]<class T>() {
    auto x = a.value().data<T>();
    auto y = b.value().data<T>();
    auto dst = out.data<T>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = x[i] * y[i];
  });
  return make_result(std::move(out), {a, b}, "mul", [a, b](const Tensor& g) {
    std::vector<std::optional<Tensor>> grads(2);
    dispatch_dtype(g.dtype(), [&]<class T>() {
      auto gs = g.data<T>();
      auto scaled = [&](const Variable& other) {
        Tensor t(other.shape(), other.dtype());
        auto o = other.value().data<T>();
        auto d = t.data<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = gs[i] * o[i];
        return t;
      };
      if (a.requires_grad()) grads[0] = scaled(b);
      if (b.requires_grad()) grads[1] = scaled(a);
    });
    return grads;
  });
}

Variable sum(const Variable& input) {
  Tensor out(Shape{}, input.dtype());
  dispatch_dtype(input.dtype(), [&]<class T>() {
    T acc = 0;
    for (T v : input.value().data<T>()) acc += v;
    out.data<T>()[0] = acc;
  });
  return make_result(std::move(out), {input}, "sum", [input](const Tensor& g) {
    return std::vector<std::optional<Tensor>>{Tensor::full(input.shape(), g.get(0), input.dtype())};
  });
}

Variable flatten(const Variable& input) {
  const Shape& s = input.shape();
  if (s.empty()) throw ShapeError("flatten: scalar input");
  std::int64_t rest = 1;
  for (std::size_t i = 1; i < s.size(); ++i) rest *= s[i];
  return make_result(input.value().reshaped({s[0], rest}), {input}, "flatten",
                     [input](const Tensor& g) {
                       return std::vector<std::optional<Tensor>>{g.reshaped(input.shape())};
                     });
}

Tensor softmax(const Tensor& logits) {
  require_rank(logits, 2, "softmax", "logits");
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape(), logits.dtype());
  dispatch_dtype(logits.dtype(), [&]<class T>() {
    auto src = logits.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t i = 0; i < n; ++i) {
      const T* row = src.data() + i * k;
      const T mx = *std::max_element(row, row + k);
      double z = 0;
      for (std::int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      for (std::int64_t j = 0; j < k; ++j) {
        dst[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
      }
    }
  });
  return out;
}

CrossEntropyResult softmax_cross_entropy(const Variable& logits, std::span<const int> targets) {
  const Tensor& x = logits.value();
  require_rank(x, 2, "softmax_cross_entropy", "logits");
  const std::int64_t n = x.dim(0), k = x.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for batch of " + std::to_string(n));
  }
  for (int t : targets) {
    if (t < 0 || t >= k) {
      throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) +
                              " outside [0," + std::to_string(k) + ")");
    }
  }
  Tensor probs = softmax(x);
  Tensor loss(Shape{}, x.dtype());
  dispatch_dtype(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    double total = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const T* row = src.data() + i * k;
      const T mx = *std::max_element(row, row + k);
      double z = 0;
      for (std::int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      total += std::log(z) - static_cast<double>(row[targets[static_cast<std::size_t>(i)]] - mx);
    }
    loss.data<T>()[0] = static_cast<T>(total / static_cast<double>(n));
  });
  std::vector<int> saved(targets.begin(), targets.end());
  Variable result = make_result(
      std::move(loss), {logits}, "softmax_cross_entropy",
      [probs, saved = std::move(saved), n, k](const Tensor& g) {
        Tensor gi = probs;
        dispatch_dtype(gi.dtype(), [&]<class T>() {
          auto d = gi.data<T>();
          const T scale = static_cast<T>(g.get(0) / static_cast<double>(n));
          for (std::int64_t i = 0; i < n; ++i) {
            d[i * k + saved[static_cast<std::size_t>(i)]] -= T(1);
            for (std::int64_t j = 0; j < k; ++j) d[i * k + j] *= scale;
          }
        });
        return std::vector<std::optional<Tensor>>{std::move(gi)};
      });
  return {std::move(result), std::move(probs)};
}

}  // namespace rashnet
