#pragma once

#include <cstdint>
#include <vector>

#include "filtergraft/archzoo.hpp"
#include "filtergraft/tensor.hpp"

// Training backend. Activations are channels-last (N, H, W, C) so that 1x1
// convolutions become row-major GEMMs over N*H*W rows.
namespace fg::nn {

inline constexpr float kNormEps = 1e-6f;

// --- primitive ops on raw NHWC buffers ---------------------------------------

// y[rows, cout] = x[rows, cin] * w^T + b, with w of shape (cout, cin).
void linear_forward(const float* x, std::int64_t rows, const Tensor& w, const Tensor& b, float* y);
// Accumulates into dw/db when non-null; writes dx when non-null.
void linear_backward(const float* x, const float* dy, std::int64_t rows, const Tensor& w, float* dx, Tensor* dw,
                     Tensor* db);

struct Dims {
  std::int64_t n, h, w, c;
  std::int64_t rows() const { return n * h * w; }
  std::int64_t size() const { return n * h * w * c; }
};

// Stride 1, zero padding k/2, cross-correlation. w has shape (C, k, k).
void depthwise_forward(const float* x, Dims d, const Tensor& w, const Tensor& b, float* y);
void depthwise_backward(const float* x, const float* dy, Dims d, const Tensor& w, float* dx, Tensor* dw, Tensor* db);

void layernorm_forward(const float* x, std::int64_t rows, std::int64_t c, const Tensor& gamma, const Tensor& beta,
                       float* y, float* xhat, float* rstd);
void layernorm_backward(const float* dy, const float* xhat, const float* rstd, std::int64_t rows, std::int64_t c,
                        const Tensor& gamma, float* dx, Tensor* dgamma, Tensor* dbeta);

void gelu_forward(const float* x, std::int64_t n, float* y);
void gelu_backward(const float* x, const float* dy, std::int64_t n, float* dx);

// Non-overlapping p x p patches, stride p. w has shape (cout, cin, p, p).
void patchify(const float* x, Dims d, std::int64_t p, float* patches);
void unpatchify_add(const float* dpatches, Dims d, std::int64_t p, float* dx);

// --- tensor-level conveniences (used by tests and the oracle checks) ---------

Tensor depthwise_conv(const Tensor& x_nhwc, const Tensor& w, const Tensor& b);
Tensor pointwise_conv(const Tensor& x_nhwc, const Tensor& w, const Tensor& b);
// Runs a single residual block of a built model on an NHWC input.
Tensor block_forward(const ModelHandle& model, int stage, int block, const Tensor& x_nhwc);

// --- whole-network forward/backward ------------------------------------------

struct Tape;

class Network {
 public:
  explicit Network(const ModelHandle& model);
  ~Network();
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  // x is (N, H, W, C). Returns logits (N, num_classes). Records activations
  // for backward() when `record` is true.
  Tensor forward(const Tensor& x, bool record);

  // Accumulates parameter gradients into grads (aligned with the model's
  // ParamMap order). Parameters with need_grad[i] == false get no weight
  // gradient, but input gradients still flow through them.
  void backward(const Tensor& dlogits, std::vector<Tensor>& grads, const std::vector<bool>& need_grad);

  // Gradient w.r.t. the network input from the last backward(), if requested.
  void set_want_input_grad(bool v) { want_input_grad_ = v; }
  const Tensor& input_grad() const { return input_grad_; }

 private:
  const ModelHandle& model_;
  Tape* tape_;
  bool want_input_grad_ = false;
  Tensor input_grad_;
};

// Mean softmax cross-entropy with label smoothing. Writes d(loss)/d(logits).
double cross_entropy(const Tensor& logits, const std::vector<int>& labels, double smoothing, Tensor* dlogits);

std::vector<Tensor> zero_grads(const ModelHandle& model);

}  // namespace fg::nn
