#include "dmae/ops.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <string>

namespace dmae {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace ops {
namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<MatRM<T>>;
template <typename T>
using CMap = Eigen::Map<const MatRM<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

[[noreturn]] void dim_error(const char* op, const char* operand, const std::string& detail) {
  throw Error(ErrorCode::kDimension,
              std::string(op) + ": operand '" + operand + "' " + detail);
}

void expect_rank(const char* op, const char* operand, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    dim_error(op, operand,
              "expected rank " + std::to_string(rank) + ", got shape " + shape_string(s));
  }
}

void expect_shape(const char* op, const char* operand, const Shape& s, const Shape& want) {
  if (s != want) {
    dim_error(op, operand, "has shape " + shape_string(s) + ", expected " + shape_string(want));
  }
}

// (k-1-j)*dilation: how far back tap j reads.
inline std::size_t tap_lag(std::size_t k, std::size_t j, std::size_t dilation) {
  return (k - 1 - j) * dilation;
}

// Row (i, j) of the column matrix holds input channel i shifted by the lag
// of tap j: into the past for kForward, into the future for kBackward.
template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t len, std::size_t k,
            std::size_t dilation, Direction dir, T* col) {
  for (std::size_t i = 0; i < cin; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      T* row = col + (i * k + j) * len;
      const std::size_t lag = std::min(tap_lag(k, j, dilation), len);
      const T* src = x + i * len;
      if (dir == Direction::kForward) {
        std::fill(row, row + lag, T(0));
        std::copy(src, src + (len - lag), row + lag);
      } else {
        std::copy(src + lag, src + len, row);
        std::fill(row + (len - lag), row + len, T(0));
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t cin, std::size_t len, std::size_t k,
                std::size_t dilation, Direction dir, T* dx) {
  for (std::size_t i = 0; i < cin; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const T* row = col + (i * k + j) * len;
      const std::size_t lag = std::min(tap_lag(k, j, dilation), len);
      T* dst = dx + i * len;
      if (dir == Direction::kForward) {
        for (std::size_t t = lag; t < len; ++t) dst[t - lag] += row[t];
      } else {
        for (std::size_t t = 0; t + lag < len; ++t) dst[t + lag] += row[t];
      }
    }
  }
}

}  // namespace

template <typename T>
Var linear(Graph<T>& g, Var x, Var weight, Var bias) {
  const auto& xv = g.value(x);
  const auto& wv = g.value(weight);
  expect_rank("linear", "weight", wv.shape(), 2);
  const std::size_t din = wv.dim(0), dout = wv.dim(1);
  if (xv.rank() == 0 || xv.shape().back() != din) {
    dim_error("linear", "x",
              "trailing dimension of " + shape_string(xv.shape()) + " != weight rows " +
                  std::to_string(din));
  }
  if (bias.valid()) expect_shape("linear", "bias", g.value(bias).shape(), Shape{dout});
  const std::size_t rows = xv.size() / din;
  Shape out_shape = xv.shape();
  out_shape.back() = dout;
  Tensor<T> y(out_shape);
  Map<T> ym(y.data(), rows, dout);
  ym.noalias() = CMap<T>(xv.data(), rows, din) * CMap<T>(wv.data(), din, dout);
  if (bias.valid()) ym.rowwise() += CVecMap<T>(g.value(bias).data(), dout).transpose();
  return g.emit(std::move(y), {x, weight, bias}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    CMap<T> dym(dy.data(), rows, dout);
    if (gr.requires_grad(x)) {
      Map<T>(gr.grad(x).data(), rows, din).noalias() +=
          dym * CMap<T>(gr.value(weight).data(), din, dout).transpose();
    }
    if (gr.requires_grad(weight)) {
      Map<T>(gr.grad(weight).data(), din, dout).noalias() +=
          CMap<T>(gr.value(x).data(), rows, din).transpose() * dym;
    }
    if (gr.requires_grad(bias)) {
      VecMap<T>(gr.grad(bias).data(), dout) += dym.colwise().sum().transpose();
    }
  });
}

template <typename T>
Var channel_linear(Graph<T>& g, Var x, Var weight, Var bias) {
  const auto& xv = g.value(x);
  const auto& wv = g.value(weight);
  expect_rank("channel_linear", "x", xv.shape(), 3);
  expect_rank("channel_linear", "weight", wv.shape(), 2);
  const std::size_t batch = xv.dim(0), cin = xv.dim(1), len = xv.dim(2);
  const std::size_t cout = wv.dim(1);
  if (wv.dim(0) != cin) {
    dim_error("channel_linear", "x",
              "channel count " + std::to_string(cin) + " != weight rows " +
                  std::to_string(wv.dim(0)));
  }
  if (bias.valid()) expect_shape("channel_linear", "bias", g.value(bias).shape(), Shape{cout});
  Tensor<T> y(Shape{batch, cout, len});
  CMap<T> w(wv.data(), cin, cout);
  for (std::size_t b = 0; b < batch; ++b) {
    Map<T> yb(y.data() + b * cout * len, cout, len);
    yb.noalias() = w.transpose() * CMap<T>(xv.data() + b * cin * len, cin, len);
    if (bias.valid()) yb.colwise() += CVecMap<T>(g.value(bias).data(), cout);
  }
  return g.emit(std::move(y), {x, weight, bias}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    CMap<T> w(gr.value(weight).data(), cin, cout);
    for (std::size_t b = 0; b < batch; ++b) {
      CMap<T> dyb(dy.data() + b * cout * len, cout, len);
      if (gr.requires_grad(x)) {
        Map<T>(gr.grad(x).data() + b * cin * len, cin, len).noalias() += w * dyb;
      }
      if (gr.requires_grad(weight)) {
        Map<T>(gr.grad(weight).data(), cin, cout).noalias() +=
            CMap<T>(gr.value(x).data() + b * cin * len, cin, len) * dyb.transpose();
      }
      if (gr.requires_grad(bias)) {
        VecMap<T>(gr.grad(bias).data(), cout) += dyb.rowwise().sum();
      }
    }
  });
}

template <typename T>
Var channel_linear(Graph<T>& g, std::span<const Var> parts, Var weight, Var bias) {
  if (parts.empty()) throw Error(ErrorCode::kDimension, "channel_linear: no inputs");
  const auto& wv = g.value(weight);
  expect_rank("channel_linear", "weight", wv.shape(), 2);
  const auto& first = g.value(parts[0]);
  expect_rank("channel_linear", "x", first.shape(), 3);
  const std::size_t batch = first.dim(0), len = first.dim(2), cout = wv.dim(1);
  std::vector<std::size_t> widths, offsets;
  std::size_t total = 0;
  for (Var p : parts) {
    const auto& v = g.value(p);
    expect_rank("channel_linear", "x", v.shape(), 3);
    if (v.dim(0) != batch || v.dim(2) != len) {
      dim_error("channel_linear", "x", "part " + shape_string(v.shape()) + " incompatible with " +
                                           shape_string(first.shape()));
    }
    offsets.push_back(total);
    widths.push_back(v.dim(1));
    total += v.dim(1);
  }
  if (wv.dim(0) != total) {
    dim_error("channel_linear", "weight", "rows " + std::to_string(wv.dim(0)) +
                                              " != total input channels " + std::to_string(total));
  }
  if (bias.valid()) expect_shape("channel_linear", "bias", g.value(bias).shape(), Shape{cout});
  Tensor<T> y(Shape{batch, cout, len});
  for (std::size_t b = 0; b < batch; ++b) {
    Map<T> yb(y.data() + b * cout * len, cout, len);
    for (std::size_t p = 0; p < parts.size(); ++p) {
      CMap<T> wp(wv.data() + offsets[p] * cout, widths[p], cout);
      CMap<T> xb(g.value(parts[p]).data() + b * widths[p] * len, widths[p], len);
      if (p == 0) {
        yb.noalias() = wp.transpose() * xb;
      } else {
        yb.noalias() += wp.transpose() * xb;
      }
    }
    if (bias.valid()) yb.colwise() += CVecMap<T>(g.value(bias).data(), cout);
  }
  std::vector<Var> all(parts.begin(), parts.end());
  all.push_back(weight);
  all.push_back(bias);
  std::vector<Var> inputs(parts.begin(), parts.end());
  return g.emit(std::move(y), std::span<const Var>(all), [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    const T* w = gr.value(weight).data();
    for (std::size_t b = 0; b < batch; ++b) {
      CMap<T> dyb(dy.data() + b * cout * len, cout, len);
      for (std::size_t p = 0; p < inputs.size(); ++p) {
        const Var x = inputs[p];
        const std::size_t cin = widths[p];
        if (gr.requires_grad(x)) {
          Map<T>(gr.grad(x).data() + b * cin * len, cin, len).noalias() +=
              CMap<T>(w + offsets[p] * cout, cin, cout) * dyb;
        }
        if (gr.requires_grad(weight)) {
          Map<T>(gr.grad(weight).data() + offsets[p] * cout, cin, cout).noalias() +=
              CMap<T>(gr.value(x).data() + b * cin * len, cin, len) * dyb.transpose();
        }
      }
      if (gr.requires_grad(bias)) {
        VecMap<T>(gr.grad(bias).data(), cout) += dyb.rowwise().sum();
      }
    }
  });
}

template <typename T>
Var causal_conv(Graph<T>& g, Var x, Var kernel, std::size_t dilation, Direction dir) {
  if (dilation == 0) throw Error(ErrorCode::kConfig, "causal_conv: dilation must be >= 1");
  const auto& xv = g.value(x);
  const auto& kv = g.value(kernel);
  expect_rank("causal_conv", "x", xv.shape(), 3);
  const std::size_t batch = xv.dim(0), cin = xv.dim(1), len = xv.dim(2);
  const bool per_sample = kv.rank() == 4;
  if (!per_sample) expect_rank("causal_conv", "kernel", kv.shape(), 3);
  const std::size_t off = per_sample ? 1 : 0;
  if (per_sample && kv.dim(0) != batch) {
    dim_error("causal_conv", "kernel", "batch " + std::to_string(kv.dim(0)) +
                                           " != input batch " + std::to_string(batch));
  }
  const std::size_t cout = kv.dim(off), k = kv.dim(off + 2);
  if (kv.dim(off + 1) != cin) {
    dim_error("causal_conv", "kernel",
              "input channels " + std::to_string(kv.dim(off + 1)) + " != x channels " +
                  std::to_string(cin));
  }
  const std::size_t kstride = per_sample ? cout * cin * k : 0;
  Tensor<T> y(Shape{batch, cout, len});
  AlignedVector<T> col(cin * k * len);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(xv.data() + b * cin * len, cin, len, k, dilation, dir, col.data());
    Map<T>(y.data() + b * cout * len, cout, len).noalias() =
        CMap<T>(kv.data() + b * kstride, cout, cin * k) * CMap<T>(col.data(), cin * k, len);
  }
  return g.emit(std::move(y), {x, kernel}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    const auto& xval = gr.value(x);
    const auto& kval = gr.value(kernel);
    const bool need_x = gr.requires_grad(x), need_k = gr.requires_grad(kernel);
    AlignedVector<T> colbuf(cin * k * len);
    for (std::size_t b = 0; b < batch; ++b) {
      CMap<T> dyb(dy.data() + b * cout * len, cout, len);
      if (need_k) {
        im2col(xval.data() + b * cin * len, cin, len, k, dilation, dir, colbuf.data());
        Map<T>(gr.grad(kernel).data() + b * kstride, cout, cin * k).noalias() +=
            dyb * CMap<T>(colbuf.data(), cin * k, len).transpose();
      }
      if (need_x) {
        Map<T>(colbuf.data(), cin * k, len).noalias() =
            CMap<T>(kval.data() + b * kstride, cout, cin * k).transpose() * dyb;
        col2im_add(colbuf.data(), cin, len, k, dilation, dir, gr.grad(x).data() + b * cin * len);
      }
    }
  });
}

template <typename T>
Var flip_time(Graph<T>& g, Var x) {
  const auto& xv = g.value(x);
  if (xv.rank() == 0) dim_error("flip_time", "x", "must have at least one axis");
  const std::size_t len = xv.shape().back(), rows = xv.size() / std::max<std::size_t>(len, 1);
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    std::reverse_copy(xv.data() + r * len, xv.data() + (r + 1) * len, y.data() + r * len);
  }
  return g.emit(std::move(y), {x}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    auto& dx = gr.grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t t = 0; t < len; ++t) dx[r * len + t] += dy[r * len + len - 1 - t];
    }
  });
}

template <typename T>
Var concat(Graph<T>& g, std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw Error(ErrorCode::kDimension, "concat: no operands");
  const Shape& first = g.value(parts[0]).shape();
  if (axis >= first.size()) dim_error("concat", "axis", "out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= first[a];
  for (std::size_t a = axis + 1; a < first.size(); ++a) inner *= first[a];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    Shape s = g.value(p).shape();
    if (s.size() != first.size()) dim_error("concat", "part", "rank mismatch");
    for (std::size_t a = 0; a < s.size(); ++a) {
      if (a != axis && s[a] != first[a]) {
        dim_error("concat", "part", "shape " + shape_string(s) + " incompatible with " +
                                        shape_string(first));
      }
    }
    widths.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  Tensor<T> y(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = g.value(parts[p]);
    const std::size_t block = widths[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data() + o * block, block, y.data() + o * total * inner + offset * inner);
    }
    offset += widths[p];
  }
  std::vector<Var> ids(parts.begin(), parts.end());
  return g.emit(std::move(y), parts,
                [=](Graph<T>& gr, Var o) {
                  const auto& dy = gr.grad(o);
                  std::size_t off = 0;
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    const std::size_t block = widths[p] * inner;
                    if (gr.requires_grad(ids[p])) {
                      auto& dx = gr.grad(ids[p]);
                      for (std::size_t q = 0; q < outer; ++q) {
                        const T* src = dy.data() + q * total * inner + off * inner;
                        T* dst = dx.data() + q * block;
                        for (std::size_t e = 0; e < block; ++e) dst[e] += src[e];
                      }
                    }
                    off += widths[p];
                  }
                });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape shape) {
  const auto& xv = g.value(x);
  if (shape_size(shape) != xv.size()) {
    dim_error("reshape", "x", "cannot reshape " + shape_string(xv.shape()) + " to " +
                                  shape_string(shape));
  }
  return g.emit(xv.reshaped(std::move(shape)), {x}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    auto& dx = gr.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  });
}

template <typename T>
Var relu(Graph<T>& g, Var x) {
  Tensor<T> y = g.value(x);
  for (auto& v : y.storage()) v = v > T(0) ? v : T(0);
  return g.emit(std::move(y), {x}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    const auto& xv = gr.value(x);
    auto& dx = gr.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (xv[i] > T(0)) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& av = g.value(a);
  expect_shape("add", "b", g.value(b).shape(), av.shape());
  Tensor<T> y = av;
  const auto& bv = g.value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return g.emit(std::move(y), {a, b}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    for (Var v : {a, b}) {
      if (!gr.requires_grad(v)) continue;
      auto& dx = gr.grad(v);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var scale(Graph<T>& g, Var x, T factor) {
  Tensor<T> y = g.value(x);
  for (auto& v : y.storage()) v *= factor;
  return g.emit(std::move(y), {x}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    auto& dx = gr.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * dy[i];
  });
}

template <typename T>
Var mul_const(Graph<T>& g, Var x, const Tensor<T>& c) {
  expect_shape("mul_const", "c", c.shape(), g.value(x).shape());
  Tensor<T> y = g.value(x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c[i];
  return g.emit(std::move(y), {x}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    auto& dx = gr.grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += c[i] * dy[i];
  });
}

template <typename T>
Var blend(Graph<T>& g, const Tensor<T>& mask, Var a, Var b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  expect_shape("blend", "mask", mask.shape(), av.shape());
  expect_shape("blend", "b", bv.shape(), av.shape());
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = mask[i] != T(0) ? av[i] : bv[i];
  }
  return g.emit(std::move(y), {a, b}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    if (gr.requires_grad(a)) {
      auto& da = gr.grad(a);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += mask[i] * dy[i];
    }
    if (gr.requires_grad(b)) {
      auto& db = gr.grad(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += (T(1) - mask[i]) * dy[i];
    }
  });
}

template <typename T>
std::vector<T> softmax_tempered(std::span<const T> scores, T temperature) {
  if (!(temperature > T(0))) {
    throw Error(ErrorCode::kConfig, "softmax_tempered: temperature must be positive");
  }
  std::vector<T> w(scores.size());
  if (scores.empty()) return w;
  const T peak = *std::max_element(scores.begin(), scores.end());
  T total = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp((scores[i] - peak) / temperature);
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

template <typename T>
Var softmax_tempered(Graph<T>& g, Var scores, T temperature) {
  const auto& sv = g.value(scores);
  if (sv.rank() == 0) dim_error("softmax_tempered", "scores", "must have an axis");
  const std::size_t width = sv.shape().back();
  const std::size_t rows = sv.size() / width;
  Tensor<T> y(sv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto w = softmax_tempered<T>(std::span<const T>(sv.data() + r * width, width), temperature);
    std::copy(w.begin(), w.end(), y.data() + r * width);
  }
  return g.emit(std::move(y), {scores}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    const auto& w = gr.value(out);
    auto& ds = gr.grad(scores);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t i = 0; i < width; ++i) dot += w[r * width + i] * dy[r * width + i];
      for (std::size_t i = 0; i < width; ++i) {
        const std::size_t q = r * width + i;
        ds[q] += w[q] * (dy[q] - dot) / temperature;
      }
    }
  });
}

template <typename T>
Var avg_pool(Graph<T>& g, Var x, std::size_t axis) {
  const auto& xv = g.value(x);
  if (axis >= xv.rank()) dim_error("avg_pool", "axis", "out of range for " + shape_string(xv.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t n = xv.dim(axis);
  for (std::size_t a = 0; a < axis; ++a) outer *= xv.dim(a);
  for (std::size_t a = axis + 1; a < xv.rank(); ++a) inner *= xv.dim(a);
  Shape out_shape = xv.shape();
  out_shape[axis] = 1;
  Tensor<T> y(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) {
      const T* src = xv.data() + (o * n + j) * inner;
      T* dst = y.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
    for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] /= static_cast<T>(n);
  }
  return g.emit(std::move(y), {x}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    auto& dx = gr.grad(x);
    const T inv = T(1) / static_cast<T>(n);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < n; ++j) {
        T* dst = dx.data() + (o * n + j) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += dy[o * inner + i] * inv;
      }
    }
  });
}

template <typename T>
Var last_step(Graph<T>& g, Var x) {
  const auto& xv = g.value(x);
  if (xv.rank() < 2 || xv.shape().back() == 0) {
    dim_error("last_step", "x", "needs a non-empty last axis, got " + shape_string(xv.shape()));
  }
  const std::size_t len = xv.shape().back(), rows = xv.size() / len;
  Tensor<T> y(Shape(xv.shape().begin(), xv.shape().end() - 1));
  for (std::size_t r = 0; r < rows; ++r) y[r] = xv[r * len + len - 1];
  return g.emit(std::move(y), {x}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    auto& dx = gr.grad(x);
    for (std::size_t r = 0; r < rows; ++r) dx[r * len + len - 1] += dy[r];
  });
}

template <typename T>
Var kernel_mix(Graph<T>& g, Var alpha, Var bank) {
  const auto& av = g.value(alpha);
  const auto& bv = g.value(bank);
  expect_rank("kernel_mix", "alpha", av.shape(), 2);
  if (bv.rank() < 2 || bv.dim(0) != av.dim(1)) {
    dim_error("kernel_mix", "bank", "leading dimension of " + shape_string(bv.shape()) +
                                        " != candidate count " + std::to_string(av.dim(1)));
  }
  const std::size_t batch = av.dim(0), groups = av.dim(1), per = bv.size() / groups;
  Shape out_shape = bv.shape();
  out_shape[0] = batch;
  Tensor<T> y(out_shape);
  Map<T>(y.data(), batch, per).noalias() =
      CMap<T>(av.data(), batch, groups) * CMap<T>(bv.data(), groups, per);
  return g.emit(std::move(y), {alpha, bank}, [=](Graph<T>& gr, Var out) {
    CMap<T> dy(gr.grad(out).data(), batch, per);
    if (gr.requires_grad(alpha)) {
      Map<T>(gr.grad(alpha).data(), batch, groups).noalias() +=
          dy * CMap<T>(gr.value(bank).data(), groups, per).transpose();
    }
    if (gr.requires_grad(bank)) {
      Map<T>(gr.grad(bank).data(), groups, per).noalias() +=
          CMap<T>(gr.value(alpha).data(), batch, groups).transpose() * dy;
    }
  });
}

template <typename T>
Var dynamic_conv(Graph<T>& g, Var x, Var alpha, Var bank, std::size_t dilation,
                 Direction dir) {
  if (dilation == 0) throw Error(ErrorCode::kConfig, "dynamic_conv: dilation must be >= 1");
  const auto& xv = g.value(x);
  const auto& av = g.value(alpha);
  const auto& bv = g.value(bank);
  expect_rank("dynamic_conv", "x", xv.shape(), 3);
  expect_rank("dynamic_conv", "alpha", av.shape(), 2);
  expect_rank("dynamic_conv", "bank", bv.shape(), 4);
  const std::size_t batch = xv.dim(0), cin = xv.dim(1), len = xv.dim(2);
  const std::size_t groups = bv.dim(0), cout = bv.dim(1), k = bv.dim(3);
  if (av.dim(0) != batch || av.dim(1) != groups) {
    dim_error("dynamic_conv", "alpha", "shape " + shape_string(av.shape()) + " != [" +
                                           std::to_string(batch) + "," +
                                           std::to_string(groups) + "]");
  }
  if (bv.dim(2) != cin) {
    dim_error("dynamic_conv", "bank", "input channels " + std::to_string(bv.dim(2)) +
                                          " != x channels " + std::to_string(cin));
  }
  const std::size_t per = cout * cin * k, rows = cin * k;
  // A constant alpha with identical rows (warm-up) means one shared kernel.
  bool shared = !g.requires_grad(alpha);
  for (std::size_t b = 1; shared && b < batch; ++b) {
    shared = std::equal(av.data(), av.data() + groups, av.data() + b * groups);
  }
  Tensor<T> y(Shape{batch, cout, len});
  AlignedVector<T> w(per), col(rows * len);
  CMap<T> bank_m(bv.data(), groups, per);
  for (std::size_t b = 0; b < batch; ++b) {
    if (b == 0 || !shared) {
      VecMap<T>(w.data(), per).noalias() =
          bank_m.transpose() * CVecMap<T>(av.data() + b * groups, groups);
    }
    im2col(xv.data() + b * cin * len, cin, len, k, dilation, dir, col.data());
    Map<T>(y.data() + b * cout * len, cout, len).noalias() =
        CMap<T>(w.data(), cout, rows) * CMap<T>(col.data(), rows, len);
  }
  return g.emit(std::move(y), {x, alpha, bank}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    const auto& xval = gr.value(x);
    const auto& aval = gr.value(alpha);
    CMap<T> bank_v(gr.value(bank).data(), groups, per);
    const bool need_x = gr.requires_grad(x), need_a = gr.requires_grad(alpha),
               need_b = gr.requires_grad(bank);
    AlignedVector<T> wbuf(per), dw(per, T(0)), colbuf(rows * len);
    for (std::size_t b = 0; b < batch; ++b) {
      CMap<T> dyb(dy.data() + b * cout * len, cout, len);
      CVecMap<T> ab(aval.data() + b * groups, groups);
      if (need_a || need_b) {
        im2col(xval.data() + b * cin * len, cin, len, k, dilation, dir, colbuf.data());
        Map<T> dwm(dw.data(), cout, rows);
        if (shared) {
          dwm.noalias() += dyb * CMap<T>(colbuf.data(), rows, len).transpose();
        } else {
          dwm.noalias() = dyb * CMap<T>(colbuf.data(), rows, len).transpose();
          CVecMap<T> dwv(dw.data(), per);
          if (need_a) VecMap<T>(gr.grad(alpha).data() + b * groups, groups) += bank_v * dwv;
          if (need_b) Map<T>(gr.grad(bank).data(), groups, per).noalias() += ab * dwv.transpose();
        }
      }
      if (need_x) {
        if (b == 0 || !shared) VecMap<T>(wbuf.data(), per).noalias() = bank_v.transpose() * ab;
        Map<T>(colbuf.data(), rows, len).noalias() =
            CMap<T>(wbuf.data(), cout, rows).transpose() * dyb;
        col2im_add(colbuf.data(), cin, len, k, dilation, dir, gr.grad(x).data() + b * cin * len);
      }
    }
    if (shared && need_b) {
      Map<T>(gr.grad(bank).data(), groups, per).noalias() +=
          CVecMap<T>(aval.data(), groups) * CVecMap<T>(dw.data(), per).transpose();
    }
  });
}

template <typename T>
Var batch_norm(Graph<T>& g, Var x, Var gamma, Var beta, BatchNormState<T>& state,
               bool training) {
  const auto& xv = g.value(x);
  expect_rank("batch_norm", "x", xv.shape(), 3);
  const std::size_t batch = xv.dim(0), ch = xv.dim(1), len = xv.dim(2);
  expect_shape("batch_norm", "gamma", g.value(gamma).shape(), Shape{ch});
  expect_shape("batch_norm", "beta", g.value(beta).shape(), Shape{ch});
  expect_shape("batch_norm", "running_mean", state.running_mean.shape(), Shape{ch});
  const std::size_t count = batch * len;
  std::vector<T> mean(ch, T(0)), invstd(ch, T(0));
  if (training) {
    std::vector<T> var(ch, T(0));
    for (std::size_t c = 0; c < ch; ++c) {
      T s = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* row = xv.data() + (b * ch + c) * len;
        for (std::size_t t = 0; t < len; ++t) s += row[t];
      }
      mean[c] = s / static_cast<T>(count);
      T q = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* row = xv.data() + (b * ch + c) * len;
        for (std::size_t t = 0; t < len; ++t) q += (row[t] - mean[c]) * (row[t] - mean[c]);
      }
      var[c] = q / static_cast<T>(count);
      invstd[c] = T(1) / std::sqrt(var[c] + state.eps);
      const T unbiased = count > 1 ? q / static_cast<T>(count - 1) : var[c];
      state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
      state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = T(1) / std::sqrt(state.running_var[c] + state.eps);
    }
  }
  const auto& gv = g.value(gamma);
  const auto& bv = g.value(beta);
  Tensor<T> y(xv.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < ch; ++c) {
      const T* row = xv.data() + (b * ch + c) * len;
      T* dst = y.data() + (b * ch + c) * len;
      for (std::size_t t = 0; t < len; ++t) dst[t] = gv[c] * (row[t] - mean[c]) * invstd[c] + bv[c];
    }
  }
  return g.emit(std::move(y), {x, gamma, beta}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    const auto& xin = gr.value(x);
    const auto& gam = gr.value(gamma);
    for (std::size_t c = 0; c < ch; ++c) {
      T sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = (b * ch + c) * len;
        for (std::size_t t = 0; t < len; ++t) {
          const T xhat = (xin[base + t] - mean[c]) * invstd[c];
          sum_dy += dy[base + t];
          sum_dy_xhat += dy[base + t] * xhat;
        }
      }
      if (gr.requires_grad(gamma)) gr.grad(gamma)[c] += sum_dy_xhat;
      if (gr.requires_grad(beta)) gr.grad(beta)[c] += sum_dy;
      if (!gr.requires_grad(x)) continue;
      auto& dx = gr.grad(x);
      const T n = static_cast<T>(count);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = (b * ch + c) * len;
        for (std::size_t t = 0; t < len; ++t) {
          if (training) {
            const T xhat = (xin[base + t] - mean[c]) * invstd[c];
            dx[base + t] += gam[c] * invstd[c] / n *
                            (n * dy[base + t] - sum_dy - xhat * sum_dy_xhat);
          } else {
            dx[base + t] += gam[c] * invstd[c] * dy[base + t];
          }
        }
      }
    }
  });
}

template <typename T>
Var asf_fuse(Graph<T>& g, std::span<const Var> scales, Var w_global, Var w_local, Var v,
             T temperature, bool uniform, Tensor<T>* weights_out) {
  if (scales.size() != 3) {
    throw Error(ErrorCode::kConfig,
                "asf_fuse: expected 3 scale maps, got " + std::to_string(scales.size()));
  }
  const Shape s0 = g.value(scales[0]).shape();
  expect_rank("asf_fuse", "H", s0, 3);
  for (Var h : scales) expect_shape("asf_fuse", "H", g.value(h).shape(), s0);
  const std::size_t batch = s0[0], hs = s0[1], len = s0[2];
  const auto& wg = g.value(w_global);
  expect_rank("asf_fuse", "W_g", wg.shape(), 2);
  if (wg.dim(0) != hs) dim_error("asf_fuse", "W_g", "rows != hidden width");
  const std::size_t ha = wg.dim(1);
  expect_shape("asf_fuse", "W_H", g.value(w_local).shape(), Shape{hs, ha});
  expect_shape("asf_fuse", "v", g.value(v).shape(), Shape{ha});

  const Var h1 = scales[0], h2 = scales[1], h3 = scales[2];
  const std::array<const T*, 3> hp = {g.value(h1).data(), g.value(h2).data(), g.value(h3).data()};
  const std::size_t plane = hs * len;

  Tensor<T> alpha(Shape{batch, 3, len}, T(1) / T(3));
  // Saved for backward: global reference vectors and tanh activations.
  Tensor<T> hg(Shape{batch, hs});
  Tensor<T> z(uniform ? Shape{0} : Shape{batch, 3, ha, len});
  if (!uniform) {
    CMap<T> wgm(wg.data(), hs, ha);
    CMap<T> whm(g.value(w_local).data(), hs, ha);
    CVecMap<T> vv(g.value(v).data(), ha);
    for (std::size_t b = 0; b < batch; ++b) {
      Eigen::Matrix<T, Eigen::Dynamic, 1> ref = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(hs);
      for (std::size_t i = 0; i < 3; ++i) {
        ref += CMap<T>(hp[i] + b * plane, hs, len).rowwise().sum();
      }
      ref /= static_cast<T>(3 * len);
      VecMap<T>(hg.data() + b * hs, hs) = ref;
      const Eigen::Matrix<T, Eigen::Dynamic, 1> proj = wgm.transpose() * ref;
      for (std::size_t i = 0; i < 3; ++i) {
        Map<T> zi(z.data() + ((b * 3 + i) * ha) * len, ha, len);
        zi.noalias() = whm.transpose() * CMap<T>(hp[i] + b * plane, hs, len);
        zi.colwise() += proj;
        zi = zi.array().tanh();
      }
      for (std::size_t t = 0; t < len; ++t) {
        std::array<T, 3> e{};
        for (std::size_t i = 0; i < 3; ++i) {
          CMap<T> zi(z.data() + ((b * 3 + i) * ha) * len, ha, len);
          e[i] = vv.dot(zi.col(t));
        }
        auto w = softmax_tempered<T>(std::span<const T>(e.data(), 3), temperature);
        for (std::size_t i = 0; i < 3; ++i) alpha[(b * 3 + i) * len + t] = w[i];
      }
    }
  }
  Tensor<T> y(s0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < hs; ++c) {
      for (std::size_t t = 0; t < len; ++t) {
        T acc = 0;
        for (std::size_t i = 0; i < 3; ++i) {
          acc += alpha[(b * 3 + i) * len + t] * hp[i][b * plane + c * len + t];
        }
        y[b * plane + c * len + t] = acc;
      }
    }
  }
  if (weights_out != nullptr) *weights_out = alpha;

  const std::array<Var, 6> parents = {h1, h2, h3, w_global, w_local, v};
  return g.emit(std::move(y), parents, [=, alpha = std::move(alpha), hg = std::move(hg),
                                         z = std::move(z)](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    const std::array<Var, 3> hv = {h1, h2, h3};
    std::array<const T*, 3> hd = {gr.value(h1).data(), gr.value(h2).data(), gr.value(h3).data()};
    std::array<T*, 3> dh{};
    for (std::size_t i = 0; i < 3; ++i) {
      dh[i] = gr.requires_grad(hv[i]) ? gr.grad(hv[i]).data() : nullptr;
    }
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < 3; ++i) {
        if (dh[i] == nullptr) continue;
        for (std::size_t c = 0; c < hs; ++c) {
          for (std::size_t t = 0; t < len; ++t) {
            dh[i][b * plane + c * len + t] += alpha[(b * 3 + i) * len + t] * dy[b * plane + c * len + t];
          }
        }
      }
    }
    if (uniform) return;
    CMap<T> wgm(gr.value(w_global).data(), hs, ha);
    CMap<T> whm(gr.value(w_local).data(), hs, ha);
    CVecMap<T> vv(gr.value(v).data(), ha);
    MatRM<T> dpre(ha, len);
    for (std::size_t b = 0; b < batch; ++b) {
      Eigen::Matrix<T, Eigen::Dynamic, 1> dproj = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(ha);
      // de[i][t]
      std::array<std::vector<T>, 3> de;
      for (auto& d : de) d.assign(len, T(0));
      for (std::size_t t = 0; t < len; ++t) {
        std::array<T, 3> da{};
        for (std::size_t i = 0; i < 3; ++i) {
          T s = 0;
          for (std::size_t c = 0; c < hs; ++c) {
            s += dy[b * plane + c * len + t] * hd[i][b * plane + c * len + t];
          }
          da[i] = s;
        }
        T dot = 0;
        for (std::size_t i = 0; i < 3; ++i) dot += alpha[(b * 3 + i) * len + t] * da[i];
        for (std::size_t i = 0; i < 3; ++i) {
          de[i][t] = alpha[(b * 3 + i) * len + t] * (da[i] - dot) / temperature;
        }
      }
      for (std::size_t i = 0; i < 3; ++i) {
        CMap<T> zi(z.data() + ((b * 3 + i) * ha) * len, ha, len);
        CVecMap<T> dei(de[i].data(), len);
        if (gr.requires_grad(v)) VecMap<T>(gr.grad(v).data(), ha) += zi * dei;
        dpre = (vv * dei.transpose()).array() * (T(1) - zi.array().square());
        dproj += dpre.rowwise().sum();
        if (gr.requires_grad(w_local)) {
          Map<T>(gr.grad(w_local).data(), hs, ha).noalias() +=
              CMap<T>(hd[i] + b * plane, hs, len) * dpre.transpose();
        }
        if (dh[i] != nullptr) {
          Map<T>(dh[i] + b * plane, hs, len).noalias() += whm * dpre;
        }
      }
      CVecMap<T> ref(hg.data() + b * hs, hs);
      if (gr.requires_grad(w_global)) {
        Map<T>(gr.grad(w_global).data(), hs, ha).noalias() += ref * dproj.transpose();
      }
      const Eigen::Matrix<T, Eigen::Dynamic, 1> dref = (wgm * dproj) / static_cast<T>(3 * len);
      for (std::size_t i = 0; i < 3; ++i) {
        if (dh[i] == nullptr) continue;
        Map<T>(dh[i] + b * plane, hs, len).colwise() += dref;
      }
    }
  });
}

template <typename T>
Var masked_norm_ratio(Graph<T>& g, Var pred, const Tensor<T>& target, const Tensor<T>& mask) {
  const auto& pv = g.value(pred);
  expect_shape("masked_norm_ratio", "target", target.shape(), pv.shape());
  expect_shape("masked_norm_ratio", "mask", mask.shape(), pv.shape());
  if (pv.rank() < 1) dim_error("masked_norm_ratio", "pred", "needs a batch axis");
  const std::size_t batch = pv.dim(0), per = pv.size() / std::max<std::size_t>(batch, 1);
  Tensor<T> y(Shape{batch});
  std::vector<T> num(batch, T(0)), den(batch, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    T n2 = 0, d2 = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const T r = (pv[i] - target[i]) * mask[i];
      n2 += r * r;
      d2 += mask[i] * mask[i];
    }
    num[b] = std::sqrt(n2);
    den[b] = std::sqrt(d2);
    y[b] = den[b] > T(0) ? num[b] / den[b] : T(0);
  }
  return g.emit(std::move(y), {pred}, [=](Graph<T>& gr, Var out) {
    const auto& dy = gr.grad(out);
    const auto& p = gr.value(pred);
    auto& dp = gr.grad(pred);
    for (std::size_t b = 0; b < batch; ++b) {
      if (den[b] == T(0) || num[b] == T(0)) continue;
      const T k = dy[b] / (num[b] * den[b]);
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
        dp[i] += k * (p[i] - target[i]) * mask[i] * mask[i];
      }
    }
  });
}

template <typename T>
Var mean_all(Graph<T>& g, Var x) {
  const auto& xv = g.value(x);
  T s = 0;
  for (T v : xv.values()) s += v;
  const std::size_t n = xv.size();
  Tensor<T> y(Shape{1}, n ? s / static_cast<T>(n) : T(0));
  return g.emit(std::move(y), {x}, [=](Graph<T>& gr, Var out) {
    const T d = gr.grad(out)[0] / static_cast<T>(n);
    auto& dx = gr.grad(x);
    for (auto& v : dx.storage()) v += d;
  });
}

template <typename T>
Var mse(Graph<T>& g, Var pred, const Tensor<T>& target) {
  const auto& pv = g.value(pred);
  expect_shape("mse", "target", target.shape(), pv.shape());
  T s = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += (pv[i] - target[i]) * (pv[i] - target[i]);
  const std::size_t n = pv.size();
  Tensor<T> y(Shape{1}, s / static_cast<T>(n));
  return g.emit(std::move(y), {pred}, [=](Graph<T>& gr, Var out) {
    const T d = gr.grad(out)[0] * T(2) / static_cast<T>(n);
    const auto& p = gr.value(pred);
    auto& dp = gr.grad(pred);
    for (std::size_t i = 0; i < n; ++i) dp[i] += d * (p[i] - target[i]);
  });
}

template <typename T>
Var softmax_cross_entropy(Graph<T>& g, Var logits, std::span<const int> labels) {
  const auto& lv = g.value(logits);
  expect_rank("softmax_cross_entropy", "logits", lv.shape(), 2);
  const std::size_t rows = lv.dim(0), classes = lv.dim(1);
  if (labels.size() != rows) dim_error("softmax_cross_entropy", "labels", "count != rows");
  Tensor<T> probs(lv.shape());
  T loss = 0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= classes) {
      throw Error(ErrorCode::kData, "softmax_cross_entropy: label " + std::to_string(lab[r]) +
                                        " outside [0, " + std::to_string(classes) + ")");
    }
    auto p = softmax_tempered<T>(std::span<const T>(lv.data() + r * classes, classes), T(1));
    std::copy(p.begin(), p.end(), probs.data() + r * classes);
    loss -= std::log(std::max(p[lab[r]], std::numeric_limits<T>::min()));
  }
  Tensor<T> y(Shape{1}, loss / static_cast<T>(rows));
  return g.emit(std::move(y), {logits}, [=, probs = std::move(probs)](Graph<T>& gr, Var out) {
    const T d = gr.grad(out)[0] / static_cast<T>(rows);
    auto& dl = gr.grad(logits);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < classes; ++c) {
        const T onehot = static_cast<int>(c) == lab[r] ? T(1) : T(0);
        dl[r * classes + c] += d * (probs[r * classes + c] - onehot);
      }
    }
  });
}

#define DMAE_INSTANTIATE_OPS(T)                                                              \
  template Var linear<T>(Graph<T>&, Var, Var, Var);                                          \
  template Var channel_linear<T>(Graph<T>&, Var, Var, Var);                                  \
  template Var causal_conv<T>(Graph<T>&, Var, Var, std::size_t, Direction);                  \
  template Var flip_time<T>(Graph<T>&, Var);                                                 \
  template Var concat<T>(Graph<T>&, std::span<const Var>, std::size_t);                      \
  template Var reshape<T>(Graph<T>&, Var, Shape);                                            \
  template Var relu<T>(Graph<T>&, Var);                                                      \
  template Var add<T>(Graph<T>&, Var, Var);                                                  \
  template Var scale<T>(Graph<T>&, Var, T);                                                  \
  template Var mul_const<T>(Graph<T>&, Var, const Tensor<T>&);                               \
  template Var blend<T>(Graph<T>&, const Tensor<T>&, Var, Var);                              \
  template Var softmax_tempered<T>(Graph<T>&, Var, T);                                       \
  template Var avg_pool<T>(Graph<T>&, Var, std::size_t);                                     \
  template Var last_step<T>(Graph<T>&, Var);                                                 \
  template Var kernel_mix<T>(Graph<T>&, Var, Var);                                           \
  template Var dynamic_conv<T>(Graph<T>&, Var, Var, Var, std::size_t, Direction);           \
  template Var channel_linear<T>(Graph<T>&, std::span<const Var>, Var, Var);                 \
  template Var batch_norm<T>(Graph<T>&, Var, Var, Var, BatchNormState<T>&, bool);            \
  template Var asf_fuse<T>(Graph<T>&, std::span<const Var>, Var, Var, Var, T, bool,          \
                           Tensor<T>*);                                                      \
  template Var masked_norm_ratio<T>(Graph<T>&, Var, const Tensor<T>&, const Tensor<T>&);     \
  template Var mean_all<T>(Graph<T>&, Var);                                                  \
  template Var mse<T>(Graph<T>&, Var, const Tensor<T>&);                                     \
  template Var softmax_cross_entropy<T>(Graph<T>&, Var, std::span<const int>);               \
  template std::vector<T> softmax_tempered<T>(std::span<const T>, T);

DMAE_INSTANTIATE_OPS(float)
DMAE_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace dmae
