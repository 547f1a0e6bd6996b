#include "filtergraft/convref.hpp"

#include <cmath>
#include <string>

#include "filtergraft/error.hpp"

namespace fg::ref {

namespace {

void require_nchw(const Tensor& x, const char* what) {
  if (x.rank() != 4) throw Error(ErrorKind::shape_mismatch, std::string(what) + " must be rank-4 NCHW");
  for (auto d : x.shape)
    if (d <= 0) throw Error(ErrorKind::shape_mismatch, std::string(what) + " has a non-positive dimension");
}

}  // namespace

Tensor depthwise_conv_ref(const Tensor& x, const Tensor& kernels, int stride, int padding, const Tensor* bias) {
  require_nchw(x, "input");
  if (stride <= 0) throw Error(ErrorKind::invalid_argument, "stride must be positive");
  if (padding < 0) throw Error(ErrorKind::invalid_argument, "padding must be non-negative");
  if (kernels.rank() != 3 || kernels.dim(0) != x.dim(1)) {
    throw Error(ErrorKind::shape_mismatch, "kernels " + shape_str(kernels.shape) + " vs input channels " +
                                               std::to_string(x.dim(1)));
  }
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t kh = kernels.dim(1), kw = kernels.dim(2);
  if (kh > H + 2 * padding || kw > W + 2 * padding) {
    throw Error(ErrorKind::shape_mismatch, "kernel larger than padded input");
  }
  if (bias && bias->size() != C) throw Error(ErrorKind::shape_mismatch, "bias length");
  const std::int64_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * padding - kw) / stride + 1;
  Tensor y({N, C, Ho, Wo});
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t oy = 0; oy < Ho; ++oy) {
        for (std::int64_t ox = 0; ox < Wo; ++ox) {
          double acc = bias ? bias->data[c] : 0.0;
          for (std::int64_t i = 0; i < kh; ++i) {
            for (std::int64_t j = 0; j < kw; ++j) {
              const std::int64_t iy = oy * stride + i - padding;
              const std::int64_t ix = ox * stride + j - padding;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += static_cast<double>(x.at(n, c, iy, ix)) * kernels.data[(c * kh + i) * kw + j];
            }
          }
          y.at(n, c, oy, ox) = static_cast<float>(acc);
        }
      }
    }
  }
  return y;
}

Tensor pointwise_conv_ref(const Tensor& y, const Tensor& w, const Tensor* bias) {
  require_nchw(y, "input");
  if (w.rank() != 2 || w.dim(1) != y.dim(1)) {
    throw Error(ErrorKind::shape_mismatch, "weight " + shape_str(w.shape) + " vs input channels " +
                                               std::to_string(y.dim(1)));
  }
  const std::int64_t N = y.dim(0), Cin = y.dim(1), H = y.dim(2), W = y.dim(3), Cout = w.dim(0);
  if (bias && bias->size() != Cout) throw Error(ErrorKind::shape_mismatch, "bias length");
  Tensor z({N, Cout, H, W});
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t o = 0; o < Cout; ++o)
      for (std::int64_t r = 0; r < H; ++r)
        for (std::int64_t col = 0; col < W; ++col) {
          double acc = bias ? bias->data[o] : 0.0;
          for (std::int64_t c = 0; c < Cin; ++c) acc += static_cast<double>(w.data[o * Cin + c]) * y.at(n, c, r, col);
          z.at(n, o, r, col) = static_cast<float>(acc);
        }
  return z;
}

Tensor channel_layernorm_ref(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_nchw(x, "input");
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor y(x.shape);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t col = 0; col < W; ++col) {
        double mean = 0.0, var = 0.0;
        for (std::int64_t c = 0; c < C; ++c) mean += x.at(n, c, r, col);
        mean /= static_cast<double>(C);
        for (std::int64_t c = 0; c < C; ++c) var += std::pow(x.at(n, c, r, col) - mean, 2);
        var /= static_cast<double>(C);
        for (std::int64_t c = 0; c < C; ++c) {
          y.at(n, c, r, col) =
              static_cast<float>((x.at(n, c, r, col) - mean) / std::sqrt(var + eps) * gamma.data[c] + beta.data[c]);
        }
      }
  return y;
}

Tensor gelu_ref(const Tensor& x) {
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double v = x.data[i];
    y.data[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
  }
  return y;
}

BlockWeights BlockWeights::from_model(const ModelHandle& model, int stage, int block) {
  const auto& P = model.params;
  const std::string bp = "stages." + std::to_string(stage) + ".blocks." + std::to_string(block) + ".";
  BlockWeights w;
  w.kind = model.spec.block_kind;
  w.dw_weight = P.at(bp + "dwconv.weight");
  w.dw_bias = P.at(bp + "dwconv.bias");
  w.norm_weight = P.at(bp + "norm.weight");
  w.norm_bias = P.at(bp + "norm.bias");
  const std::string in = w.kind == BlockKind::standard_ds ? "pwconv1" : "proj_in";
  const std::string out = w.kind == BlockKind::standard_ds ? "pwconv2" : "proj_out";
  w.in_weight = P.at(bp + in + ".weight");
  w.in_bias = P.at(bp + in + ".bias");
  w.out_weight = P.at(bp + out + ".weight");
  w.out_bias = P.at(bp + out + ".bias");
  return w;
}

Tensor ds_block_pre_norm_ref(const Tensor& x, const BlockWeights& w) {
  const int pad = static_cast<int>(w.dw_weight.dim(1) / 2);
  return depthwise_conv_ref(x, w.dw_weight, 1, pad, &w.dw_bias);
}

Tensor ds_block_ref(const Tensor& x, const BlockWeights& w, std::optional<int> padding, double eps) {
  require_nchw(x, "input");
  const int pad = padding.value_or(static_cast<int>(w.dw_weight.dim(1) / 2));
  Tensor branch;
  if (w.kind == BlockKind::standard_ds) {
    const Tensor d = depthwise_conv_ref(x, w.dw_weight, 1, pad, &w.dw_bias);
    const Tensor n = channel_layernorm_ref(d, w.norm_weight, w.norm_bias, eps);
    const Tensor h = gelu_ref(pointwise_conv_ref(n, w.in_weight, &w.in_bias));
    branch = pointwise_conv_ref(h, w.out_weight, &w.out_bias);
  } else {
    const Tensor n = channel_layernorm_ref(x, w.norm_weight, w.norm_bias, eps);
    const Tensor u = pointwise_conv_ref(n, w.in_weight, &w.in_bias);
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor a({N, C, H, W}), b({N, C, H, W});
    for (std::int64_t i = 0; i < N; ++i)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t r = 0; r < H; ++r)
          for (std::int64_t col = 0; col < W; ++col) {
            a.at(i, c, r, col) = u.at(i, c, r, col);
            b.at(i, c, r, col) = u.at(i, C + c, r, col);
          }
    const Tensor g = depthwise_conv_ref(b, w.dw_weight, 1, pad, &w.dw_bias);
    Tensor m(a.shape);
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = a.data[i] * g.data[i];
    branch = pointwise_conv_ref(m, w.out_weight, &w.out_bias);
  }
  if (branch.shape != x.shape) throw Error(ErrorKind::shape_mismatch, "block output shape differs from input");
  for (std::size_t i = 0; i < branch.data.size(); ++i) branch.data[i] += x.data[i];
  return branch;
}

}  // namespace fg::ref
