#pragma once

#include <optional>

#include "filtergraft/archzoo.hpp"
#include "filtergraft/tensor.hpp"

// Brute-force reference convolutions in NCHW layout. These exist to check the
// training backend; they share no code with it.
namespace fg::ref {

// Y_c = X_c (*) K_c for each channel independently. Cross-correlation (no
// kernel flip), zero padding, dilation 1. K has shape (C, kh, kw).
Tensor depthwise_conv_ref(const Tensor& x, const Tensor& kernels, int stride, int padding,
                          const Tensor* bias = nullptr);

// Z[:, o] = sum_c W[o, c] * Y[:, c] at every spatial location. W is (C_out, C_in).
Tensor pointwise_conv_ref(const Tensor& y, const Tensor& w, const Tensor* bias = nullptr);

// Layer norm over channels at each (n, h, w).
Tensor channel_layernorm_ref(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor gelu_ref(const Tensor& x);

struct BlockWeights {
  BlockKind kind = BlockKind::standard_ds;
  Tensor dw_weight, dw_bias;
  Tensor norm_weight, norm_bias;
  Tensor in_weight, in_bias;    // pwconv1 or proj_in
  Tensor out_weight, out_bias;  // pwconv2 or proj_out

  static BlockWeights from_model(const ModelHandle& model, int stage, int block);
};

// Full residual block composed from the reference ops. `padding` defaults to
// kernel/2 (same-size output).
Tensor ds_block_ref(const Tensor& x, const BlockWeights& w, std::optional<int> padding = std::nullopt,
                    double eps = 1e-6);

// Branch output before the residual add and before normalization, for the
// standard block only: depthwise(x) + bias.
Tensor ds_block_pre_norm_ref(const Tensor& x, const BlockWeights& w);

}  // namespace fg::ref
