#include "branchconnect/ops.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace branchconnect {

std::size_t SlidingOutputSize(std::size_t input, std::size_t window, std::size_t stride, std::size_t pad,
                              const char* what) {
  if (window == 0 || stride == 0) throw ShapeError(std::string(what) + ": window and stride must be >= 1");
  const std::size_t padded = input + 2 * pad;
  if (window > padded) {
    throw ShapeError(std::string(what) + ": window " + std::to_string(window) + " exceeds padded input " +
                     std::to_string(padded));
  }
  return (padded - window) / stride + 1;
}

namespace kernels {

namespace {

// crow[j] += a0*b0[j] + ... applied left to right, so the result is the same
// as four separate passes while crow is loaded and stored once.
inline void AxpyRows4(Scalar* crow, const Scalar* b0, const Scalar* b1, const Scalar* b2, const Scalar* b3,
                      Scalar a0, Scalar a1, Scalar a2, Scalar a3, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    Scalar v = crow[j];
    v += a0 * b0[j];
    v += a1 * b1[j];
    v += a2 * b2[j];
    v += a3 * b3[j];
    crow[j] = v;
  }
}

inline void AxpyRow(Scalar* crow, const Scalar* b, Scalar a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) crow[j] += a * b[j];
}

}  // namespace

void Gemm(std::span<const Scalar> a, std::span<const Scalar> b, std::span<Scalar> c, std::size_t m,
          std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + m * n, Scalar{0});
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* crow = c.data() + i * n;
    const Scalar* arow = a.data() + i * k;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const Scalar* brow = b.data() + p * n;
      AxpyRows4(crow, brow, brow + n, brow + 2 * n, brow + 3 * n, arow[p], arow[p + 1], arow[p + 2], arow[p + 3], n);
    }
    for (; p < k; ++p) AxpyRow(crow, b.data() + p * n, arow[p], n);
  }
}

void GemmTransA(std::span<const Scalar> a, std::span<const Scalar> b, std::span<Scalar> c, std::size_t m,
                std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + m * n, Scalar{0});
  for (std::size_t i = 0; i < m; ++i) {
    Scalar* crow = c.data() + i * n;
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const Scalar* brow = b.data() + p * n;
      AxpyRows4(crow, brow, brow + n, brow + 2 * n, brow + 3 * n, a[p * m + i], a[(p + 1) * m + i],
                a[(p + 2) * m + i], a[(p + 3) * m + i], n);
    }
    for (; p < k; ++p) AxpyRow(crow, b.data() + p * n, a[p * m + i], n);
  }
}

void GemmTransB(std::span<const Scalar> a, std::span<const Scalar> b, std::span<Scalar> c, std::size_t m,
                std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const Scalar* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Scalar* brow = b.data() + j * k;
      Scalar acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
    }
  }
}

void Im2Col(std::span<const Scalar> image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel_h, std::size_t kernel_w, std::size_t stride, std::size_t pad,
            std::span<Scalar> columns, std::size_t row_stride) {
  const std::size_t out_h = (height + 2 * pad - kernel_h) / stride + 1;
  const std::size_t out_w = (width + 2 * pad - kernel_w) / stride + 1;
  if (row_stride == 0) row_stride = out_h * out_w;
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < kernel_w; ++kj, ++row) {
        Scalar* dst = columns.data() + row * row_stride;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t x =
                static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(height) &&
                                x < static_cast<std::ptrdiff_t>(width);
            dst[oy * out_w + ox] = inside ? image[(c * height + y) * width + x] : Scalar{0};
          }
        }
      }
    }
  }
}

void Col2Im(std::span<const Scalar> columns, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel_h, std::size_t kernel_w, std::size_t stride, std::size_t pad,
            std::span<Scalar> image, std::size_t row_stride) {
  const std::size_t out_h = (height + 2 * pad - kernel_h) / stride + 1;
  const std::size_t out_w = (width + 2 * pad - kernel_w) / stride + 1;
  if (row_stride == 0) row_stride = out_h * out_w;
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < kernel_w; ++kj, ++row) {
        const Scalar* src = columns.data() + row * row_stride;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(height)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const std::ptrdiff_t x =
                static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(width)) continue;
            image[(c * height + y) * width + x] += src[oy * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace kernels

namespace {

constexpr std::size_t kConvChunkColumns = 4096;

void RequireRank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     ShapeString(t.shape()));
  }
}

}  // namespace

Var Conv2d(Tape& tape, Var input, Var weight, Var bias, Conv2dParams params) {
  const Tensor& x = tape.value(input);
  const Tensor& w = tape.value(weight);
  const Tensor& b = tape.value(bias);
  RequireRank(x, 4, "conv2d input");
  RequireRank(w, 4, "conv2d weight");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c) {
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels but weight " +
                     ShapeString(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  RequireShape(b, {o}, "conv2d bias");
  const std::size_t oh = SlidingOutputSize(h, kh, params.stride, params.pad, "conv2d height");
  const std::size_t ow = SlidingOutputSize(wd, kw, params.stride, params.pad, "conv2d width");
  const std::size_t patch = c * kh * kw;
  const std::size_t spatial = oh * ow;

  // Images are unfolded in chunks into one wide column matrix so that each
  // GEMM row spans several images.
  const std::size_t chunk = std::clamp<std::size_t>(kConvChunkColumns / spatial, 1, n);

  Tensor out({n, o, oh, ow});
  {
    std::vector<Scalar> cols(patch * chunk * spatial);
    std::vector<Scalar> y(o * chunk * spatial);
    for (std::size_t first = 0; first < n; first += chunk) {
      const std::size_t count = std::min(chunk, n - first);
      const std::size_t width = count * spatial;
      for (std::size_t i = 0; i < count; ++i) {
        kernels::Im2Col(x.data().subspan((first + i) * c * h * wd, c * h * wd), c, h, wd, kh, kw, params.stride,
                        params.pad, std::span<Scalar>(cols).subspan(i * spatial), width);
      }
      kernels::Gemm(w.data(), cols, y, o, patch, width, false);
      for (std::size_t i = 0; i < count; ++i) {
        Scalar* dst = out.data().data() + (first + i) * o * spatial;
        for (std::size_t oc = 0; oc < o; ++oc) {
          const Scalar* src = y.data() + oc * width + i * spatial;
          for (std::size_t s = 0; s < spatial; ++s) dst[oc * spatial + s] = src[s] + b[oc];
        }
      }
    }
  }

  auto backward = [input, weight, bias, params, n, c, h, wd, o, kh, kw, patch, spatial, chunk](Tape& t,
                                                                                                const Tensor& g) {
    const Tensor& xv = t.value(input);
    const Tensor& wv = t.value(weight);
    const bool need_x = t.requires_grad(input);
    const bool need_w = t.requires_grad(weight);
    const bool need_b = t.requires_grad(bias);
    Tensor* dx = need_x ? &t.GradBuffer(input) : nullptr;
    Tensor* dw = need_w ? &t.GradBuffer(weight) : nullptr;
    Tensor* db = need_b ? &t.GradBuffer(bias) : nullptr;
    std::vector<Scalar> gy(o * chunk * spatial);
    std::vector<Scalar> cols(need_w ? patch * chunk * spatial : 0);
    std::vector<Scalar> cols_t(need_w ? chunk * spatial * patch : 0);
    std::vector<Scalar> dcols(need_x ? patch * chunk * spatial : 0);
    for (std::size_t first = 0; first < n; first += chunk) {
      const std::size_t count = std::min(chunk, n - first);
      const std::size_t width = count * spatial;
      for (std::size_t i = 0; i < count; ++i) {
        const Scalar* src = g.data().data() + (first + i) * o * spatial;
        for (std::size_t oc = 0; oc < o; ++oc) {
          std::copy_n(src + oc * spatial, spatial, gy.data() + oc * width + i * spatial);
        }
      }
      if (need_b) {
        for (std::size_t oc = 0; oc < o; ++oc) {
          Scalar acc = 0;
          for (std::size_t s = 0; s < width; ++s) acc += gy[oc * width + s];
          (*db)[oc] += acc;
        }
      }
      if (need_w) {
        for (std::size_t i = 0; i < count; ++i) {
          kernels::Im2Col(xv.data().subspan((first + i) * c * h * wd, c * h * wd), c, h, wd, kh, kw,
                          params.stride, params.pad, std::span<Scalar>(cols).subspan(i * spatial), width);
        }
        for (std::size_t p = 0; p < patch; ++p) {
          for (std::size_t s = 0; s < width; ++s) cols_t[s * patch + p] = cols[p * width + s];
        }
        kernels::Gemm(gy, cols_t, dw->data(), o, width, patch, true);
      }
      if (need_x) {
        kernels::GemmTransA(wv.data(), gy, dcols, patch, o, width, false);
        for (std::size_t i = 0; i < count; ++i) {
          kernels::Col2Im(std::span<const Scalar>(dcols).subspan(i * spatial), c, h, wd, kh, kw, params.stride,
                          params.pad, dx->data().subspan((first + i) * c * h * wd, c * h * wd), width);
        }
      }
    }
  };
  return tape.Record(std::move(out), {input, weight, bias}, backward, "conv2d");
}

Var Pool2d(Tape& tape, Var input, Pool2dParams params) {
  const Tensor& x = tape.value(input);
  RequireRank(x, 4, "pool2d input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = SlidingOutputSize(h, params.window, params.stride, params.pad, "pool2d height");
  const std::size_t ow = SlidingOutputSize(w, params.window, params.stride, params.pad, "pool2d width");
  Tensor out({n, c, oh, ow});
  // For max pooling, flat index of the selected input element per output.
  std::vector<std::size_t> argmax(params.kind == PoolKind::kMax ? out.size() : 0);
  const Scalar area = static_cast<Scalar>(params.window * params.window);
  std::size_t o_idx = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const Scalar* src = x.data().data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o_idx) {
        Scalar best = -std::numeric_limits<Scalar>::infinity();
        std::size_t best_idx = 0;
        Scalar acc = 0;
        for (std::size_t ky = 0; ky < params.window; ++ky) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * params.stride + ky) -
                                   static_cast<std::ptrdiff_t>(params.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < params.window; ++kx) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * params.stride + kx) -
                                      static_cast<std::ptrdiff_t>(params.pad);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
            const Scalar v = src[y * w + xx];
            acc += v;
            if (v > best || (std::isnan(v) && !std::isnan(best))) {
              best = v;
              best_idx = plane * h * w + y * w + xx;
            }
          }
        }
        if (params.kind == PoolKind::kMax) {
          out[o_idx] = best;
          argmax[o_idx] = best_idx;
        } else {
          out[o_idx] = acc / area;
        }
      }
    }
  }

  auto backward = [input, params, n, c, h, w, oh, ow, area, argmax = std::move(argmax)](Tape& t,
                                                                                       const Tensor& g) {
    Tensor& dx = t.GradBuffer(input);
    if (params.kind == PoolKind::kMax) {
      for (std::size_t i = 0; i < g.size(); ++i) dx[argmax[i]] += g[i];
      return;
    }
    std::size_t o_idx = 0;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      Scalar* dst = dx.data().data() + plane * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox, ++o_idx) {
          const Scalar share = g[o_idx] / area;
          for (std::size_t ky = 0; ky < params.window; ++ky) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * params.stride + ky) -
                                     static_cast<std::ptrdiff_t>(params.pad);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < params.window; ++kx) {
              const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * params.stride + kx) -
                                        static_cast<std::ptrdiff_t>(params.pad);
              if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[y * w + xx] += share;
            }
          }
        }
      }
    }
  };
  return tape.Record(std::move(out), {input}, std::move(backward), "pool2d");
}

Var GlobalAvgPool(Tape& tape, Var input) {
  const Tensor& x = tape.value(input);
  RequireRank(x, 4, "global_avg_pool input");
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    Scalar acc = 0;
    for (std::size_t i = 0; i < s; ++i) acc += x[p * s + i];
    out[p] = acc / static_cast<Scalar>(s);
  }
  auto backward = [input, n, c, s](Tape& t, const Tensor& g) {
    Tensor& dx = t.GradBuffer(input);
    for (std::size_t p = 0; p < n * c; ++p) {
      const Scalar share = g[p] / static_cast<Scalar>(s);
      for (std::size_t i = 0; i < s; ++i) dx[p * s + i] += share;
    }
  };
  return tape.Record(std::move(out), {input}, backward, "global_avg_pool");
}

Var Affine(Tape& tape, Var input, Var weight, Var bias) {
  const Tensor& x = tape.value(input);
  const Tensor& w = tape.value(weight);
  const Tensor& b = tape.value(bias);
  RequireRank(x, 2, "affine input");
  RequireRank(w, 2, "affine weight");
  const std::size_t n = x.dim(0), d = x.dim(1), u = w.dim(1);
  if (w.dim(0) != d) {
    throw ShapeError("affine: input " + ShapeString(x.shape()) + " incompatible with weight " +
                     ShapeString(w.shape()));
  }
  RequireShape(b, {u}, "affine bias");
  Tensor out({n, u});
  kernels::Gemm(x.data(), w.data(), out.data(), n, d, u, false);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < u; ++j) out[i * u + j] += b[j];
  }
  auto backward = [input, weight, bias, n, d, u](Tape& t, const Tensor& g) {
    if (t.requires_grad(input)) {
      kernels::GemmTransB(g.data(), t.value(weight).data(), t.GradBuffer(input).data(), n, u, d, true);
    }
    if (t.requires_grad(weight)) {
      kernels::GemmTransA(t.value(input).data(), g.data(), t.GradBuffer(weight).data(), d, n, u, true);
    }
    if (t.requires_grad(bias)) {
      Tensor& db = t.GradBuffer(bias);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < u; ++j) db[j] += g[i * u + j];
      }
    }
  };
  return tape.Record(std::move(out), {input, weight, bias}, backward, "affine");
}

Var Relu(Tape& tape, Var input) {
  const Tensor& x = tape.value(input);
  Tensor out(x.shape());
  // NaN passes through so non-finite values stay visible downstream.
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] < 0 ? Scalar{0} : x[i];
  auto backward = [input](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(input);
    Tensor& dx = t.GradBuffer(input);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0) dx[i] += g[i];
    }
  };
  return tape.Record(std::move(out), {input}, backward, "relu");
}

Var Flatten(Tape& tape, Var input) {
  const Tensor& x = tape.value(input);
  if (x.rank() < 1) throw ShapeError("flatten: empty shape");
  const std::size_t n = x.dim(0);
  Tensor out = x.Reshaped({n, x.size() / n});
  auto backward = [input](Tape& t, const Tensor& g) { t.AccumulateGrad(input, g); };
  return tape.Record(std::move(out), {input}, backward, "flatten");
}

Var AddN(Tape& tape, std::span<const Var> inputs) {
  if (inputs.empty()) throw ShapeError("add_n: no inputs");
  Tensor out = tape.value(inputs[0]);
  for (std::size_t k = 1; k < inputs.size(); ++k) {
    const Tensor& v = tape.value(inputs[k]);
    RequireShape(v, out.shape(), "add_n operand");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
  }
  std::vector<Var> ins(inputs.begin(), inputs.end());
  auto backward = [ins](Tape& t, const Tensor& g) {
    for (Var v : ins) t.AccumulateGrad(v, g);
  };
  return tape.Record(std::move(out), ins, backward, "add_n");
}

Var Scale(Tape& tape, Var input, Scalar factor) {
  Tensor out = tape.value(input);
  for (Scalar& v : out.data()) v *= factor;
  auto backward = [input, factor](Tape& t, const Tensor& g) {
    Tensor& dx = t.GradBuffer(input);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += factor * g[i];
  };
  return tape.Record(std::move(out), {input}, backward, "scale");
}

Var Sum(Tape& tape, Var input) {
  Scalar acc = 0;
  for (Scalar v : tape.value(input).data()) acc += v;
  auto backward = [input](Tape& t, const Tensor& g) {
    Tensor& dx = t.GradBuffer(input);
    for (Scalar& v : dx.data()) v += g[0];
  };
  return tape.Record(Tensor::Scalar0(acc), {input}, backward, "sum");
}

Tensor Softmax(const Tensor& logits) {
  RequireRank(logits, 2, "softmax input");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    Scalar mx = logits[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
    Scalar z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      p[i * c + j] = std::exp(logits[i * c + j] - mx);
      z += p[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= z;
  }
  return p;
}

Var SoftmaxCrossEntropy(Tape& tape, Var logits, std::span<const int> labels) {
  const Tensor& x = tape.value(logits);
  RequireRank(x, 2, "softmax_cross_entropy logits");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw Error("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) +
                  ")");
    }
  }
  Scalar loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Scalar mx = x[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    Scalar z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[i * c + j] - mx);
    loss += std::log(z) + mx - x[i * c + static_cast<std::size_t>(labels[i])];
  }
  loss /= static_cast<Scalar>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  auto backward = [logits, ys, n, c](Tape& t, const Tensor& g) {
    Tensor p = Softmax(t.value(logits));
    Tensor& dx = t.GradBuffer(logits);
    const Scalar scale = g[0] / static_cast<Scalar>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const Scalar onehot = static_cast<std::size_t>(ys[i]) == j ? Scalar{1} : Scalar{0};
        dx[i * c + j] += (p[i * c + j] - onehot) * scale;
      }
    }
  };
  return tape.Record(Tensor::Scalar0(loss), {logits}, backward, "softmax_cross_entropy");
}

}  // namespace branchconnect
