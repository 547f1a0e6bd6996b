#include "filtergraft/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "filtergraft/error.hpp"

namespace fg::nn {

namespace {

using MatR = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using CVec = Eigen::Map<const Eigen::RowVectorXf>;

std::int64_t out_features(const Tensor& w) { return w.dim(0); }
std::int64_t in_features(const Tensor& w) { return w.size() / w.dim(0); }

}  // namespace

void linear_forward(const float* x, std::int64_t rows, const Tensor& w, const Tensor& b, float* y) {
  const auto cout = out_features(w), cin = in_features(w);
  CMapR X(x, rows, cin);
  CMapR W(w.ptr(), cout, cin);
  MapR Y(y, rows, cout);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += CVec(b.ptr(), cout);
}

void linear_backward(const float* x, const float* dy, std::int64_t rows, const Tensor& w, float* dx, Tensor* dw,
                     Tensor* db) {
  const auto cout = out_features(w), cin = in_features(w);
  CMapR X(x, rows, cin);
  CMapR DY(dy, rows, cout);
  CMapR W(w.ptr(), cout, cin);
  if (dx) {
    MapR DX(dx, rows, cin);
    DX.noalias() = DY * W;
  }
  if (dw) {
    MapR DW(dw->ptr(), cout, cin);
    DW.noalias() += DY.transpose() * X;
  }
  if (db) {
    Eigen::Map<Eigen::RowVectorXf> DB(db->ptr(), cout);
    DB += DY.colwise().sum();
  }
}

namespace {

// (C, k, k) -> (k*k, C) so the inner loop runs over contiguous channels.
FloatBuffer transpose_kernel(const Tensor& w) {
  const auto c = w.dim(0), kk = w.dim(1) * w.dim(2);
  FloatBuffer t(static_cast<std::size_t>(c * kk));
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < kk; ++i) t[i * c + ch] = w.data[ch * kk + i];
  return t;
}

}  // namespace

void depthwise_forward(const float* x, Dims d, const Tensor& w, const Tensor& b, float* y) {
  if (w.rank() != 3 || w.dim(0) != d.c) {
    throw Error(ErrorKind::shape_mismatch, "depthwise kernel " + shape_str(w.shape) + " for " +
                                               std::to_string(d.c) + " channels");
  }
  const std::int64_t kh = w.dim(1), kw = w.dim(2), ph = kh / 2, pw = kw / 2, C = d.c;
  const auto wt = transpose_kernel(w);
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t oy = 0; oy < d.h; ++oy) {
      for (std::int64_t ox = 0; ox < d.w; ++ox) {
        float* o = y + ((n * d.h + oy) * d.w + ox) * C;
        for (std::int64_t c = 0; c < C; ++c) o[c] = b.data[c];
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t iy = oy + ky - ph;
          if (iy < 0 || iy >= d.h) continue;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t ix = ox + kx - pw;
            if (ix < 0 || ix >= d.w) continue;
            const float* in = x + ((n * d.h + iy) * d.w + ix) * C;
            const float* k = wt.data() + (ky * kw + kx) * C;
            for (std::int64_t c = 0; c < C; ++c) o[c] += in[c] * k[c];
          }
        }
      }
    }
  }
}

void depthwise_backward(const float* x, const float* dy, Dims d, const Tensor& w, float* dx, Tensor* dw,
                        Tensor* db) {
  const std::int64_t kh = w.dim(1), kw = w.dim(2), ph = kh / 2, pw = kw / 2, C = d.c;
  const auto wt = transpose_kernel(w);
  FloatBuffer dwt(dw ? wt.size() : 0, 0.0f);
  if (dx) std::fill(dx, dx + d.size(), 0.0f);
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t oy = 0; oy < d.h; ++oy) {
      for (std::int64_t ox = 0; ox < d.w; ++ox) {
        const float* g = dy + ((n * d.h + oy) * d.w + ox) * C;
        if (db)
          for (std::int64_t c = 0; c < C; ++c) db->data[c] += g[c];
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t iy = oy + ky - ph;
          if (iy < 0 || iy >= d.h) continue;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t ix = ox + kx - pw;
            if (ix < 0 || ix >= d.w) continue;
            const std::int64_t off = ((n * d.h + iy) * d.w + ix) * C;
            const std::int64_t tap = (ky * kw + kx) * C;
            if (dx) {
              float* di = dx + off;
              const float* k = wt.data() + tap;
              for (std::int64_t c = 0; c < C; ++c) di[c] += g[c] * k[c];
            }
            if (dw) {
              const float* in = x + off;
              float* acc = dwt.data() + tap;
              for (std::int64_t c = 0; c < C; ++c) acc[c] += g[c] * in[c];
            }
          }
        }
      }
    }
  }
  if (dw) {
    const std::int64_t kk = kh * kw;
    for (std::int64_t ch = 0; ch < C; ++ch)
      for (std::int64_t i = 0; i < kk; ++i) dw->data[ch * kk + i] += dwt[i * C + ch];
  }
}

void layernorm_forward(const float* x, std::int64_t rows, std::int64_t c, const Tensor& gamma, const Tensor& beta,
                       float* y, float* xhat, float* rstd) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* xr = x + r * c;
    double mean = 0.0;
    for (std::int64_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t i = 0; i < c; ++i) {
      const double dv = xr[i] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(c);
    const auto rs = static_cast<float>(1.0 / std::sqrt(var + kNormEps));
    const auto m = static_cast<float>(mean);
    if (rstd) rstd[r] = rs;
    float* yr = y + r * c;
    float* hr = xhat ? xhat + r * c : nullptr;
    for (std::int64_t i = 0; i < c; ++i) {
      const float h = (xr[i] - m) * rs;
      if (hr) hr[i] = h;
      yr[i] = h * gamma.data[i] + beta.data[i];
    }
  }
}

void layernorm_backward(const float* dy, const float* xhat, const float* rstd, std::int64_t rows, std::int64_t c,
                        const Tensor& gamma, float* dx, Tensor* dgamma, Tensor* dbeta) {
  FloatBuffer dxhat(static_cast<std::size_t>(c));
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* g = dy + r * c;
    const float* h = xhat + r * c;
    double sum = 0.0, dot = 0.0;
    for (std::int64_t i = 0; i < c; ++i) {
      dxhat[i] = g[i] * gamma.data[i];
      sum += dxhat[i];
      dot += static_cast<double>(dxhat[i]) * h[i];
      if (dgamma) dgamma->data[i] += g[i] * h[i];
      if (dbeta) dbeta->data[i] += g[i];
    }
    if (dx) {
      const auto mean_d = static_cast<float>(sum / static_cast<double>(c));
      const auto mean_dh = static_cast<float>(dot / static_cast<double>(c));
      float* o = dx + r * c;
      for (std::int64_t i = 0; i < c; ++i) o[i] = rstd[r] * (dxhat[i] - mean_d - h[i] * mean_dh);
    }
  }
}

void gelu_forward(const float* x, std::int64_t n, float* y) {
  constexpr float inv_sqrt2 = 0.70710678118654752f;
  for (std::int64_t i = 0; i < n; ++i) y[i] = 0.5f * x[i] * (1.0f + std::erf(x[i] * inv_sqrt2));
}

void gelu_backward(const float* x, const float* dy, std::int64_t n, float* dx) {
  constexpr float inv_sqrt2 = 0.70710678118654752f;
  constexpr float inv_sqrt_2pi = 0.39894228040143268f;
  for (std::int64_t i = 0; i < n; ++i) {
    const float cdf = 0.5f * (1.0f + std::erf(x[i] * inv_sqrt2));
    const float pdf = inv_sqrt_2pi * std::exp(-0.5f * x[i] * x[i]);
    dx[i] = dy[i] * (cdf + x[i] * pdf);
  }
}

void patchify(const float* x, Dims d, std::int64_t p, float* patches) {
  const std::int64_t ho = d.h / p, wo = d.w / p, cols = d.c * p * p;
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        float* row = patches + ((n * ho + oy) * wo + ox) * cols;
        for (std::int64_t py = 0; py < p; ++py)
          for (std::int64_t px = 0; px < p; ++px) {
            const float* in = x + ((n * d.h + oy * p + py) * d.w + ox * p + px) * d.c;
            for (std::int64_t c = 0; c < d.c; ++c) row[(c * p + py) * p + px] = in[c];
          }
      }
}

void unpatchify_add(const float* dpatches, Dims d, std::int64_t p, float* dx) {
  const std::int64_t ho = d.h / p, wo = d.w / p, cols = d.c * p * p;
  for (std::int64_t n = 0; n < d.n; ++n)
    for (std::int64_t oy = 0; oy < ho; ++oy)
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        const float* row = dpatches + ((n * ho + oy) * wo + ox) * cols;
        for (std::int64_t py = 0; py < p; ++py)
          for (std::int64_t px = 0; px < p; ++px) {
            float* out = dx + ((n * d.h + oy * p + py) * d.w + ox * p + px) * d.c;
            for (std::int64_t c = 0; c < d.c; ++c) out[c] += row[(c * p + py) * p + px];
          }
      }
}

// --- tensor conveniences ------------------------------------------------------

namespace {

Dims dims_of(const Tensor& x) {
  if (x.rank() != 4) throw Error(ErrorKind::shape_mismatch, "expected NHWC tensor, got " + shape_str(x.shape));
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

}  // namespace

Tensor depthwise_conv(const Tensor& x_nhwc, const Tensor& w, const Tensor& b) {
  const Dims d = dims_of(x_nhwc);
  Tensor y(x_nhwc.shape);
  depthwise_forward(x_nhwc.ptr(), d, w, b, y.ptr());
  return y;
}

Tensor pointwise_conv(const Tensor& x_nhwc, const Tensor& w, const Tensor& b) {
  const Dims d = dims_of(x_nhwc);
  if (in_features(w) != d.c) {
    throw Error(ErrorKind::shape_mismatch, "pointwise weight " + shape_str(w.shape) + " for " +
                                               std::to_string(d.c) + " channels");
  }
  Tensor y({d.n, d.h, d.w, out_features(w)});
  linear_forward(x_nhwc.ptr(), d.rows(), w, b, y.ptr());
  return y;
}

// --- network ------------------------------------------------------------------

struct BlockCache {
  Dims d{};
  Tensor x, dw_out, xhat, rstd, normed, hidden, act;  // standard
  Tensor u, gate_in, mixed;                            // gated (dw_out shared)
};

struct DownCache {
  bool present = false;
  Dims in{};
  std::int64_t patch = 1;
  Tensor xhat, rstd, patches;
};

struct Tape {
  Dims input{};
  Tensor stem_patches, stem_xhat, stem_rstd;
  Dims stem_out{};
  std::vector<DownCache> downs;
  std::vector<std::vector<BlockCache>> blocks;
  Dims last{};
  Tensor pooled_xhat, pooled_rstd, head_in;
  std::int64_t batch = 0;
};

namespace {

std::string block_prefix(int stage, int block) {
  return "stages." + std::to_string(stage) + ".blocks." + std::to_string(block);
}

// Forward for one block; fills the cache when non-null. x and y are NHWC with
// dims d; y may not alias x.
void run_block(const ModelHandle& m, int stage, int block, const float* x, Dims d, float* y, BlockCache* cache) {
  const auto& P = m.params;
  const std::string bp = block_prefix(stage, block);
  const std::int64_t rows = d.rows(), C = d.c;
  BlockCache local;
  BlockCache& bc = cache ? *cache : local;
  bc.d = d;
  if (cache) { bc.x = Tensor({rows, C}); std::copy_n(x, rows * C, bc.x.ptr()); }

  if (m.spec.block_kind == BlockKind::standard_ds) {
    bc.dw_out = Tensor({rows, C});
    depthwise_forward(x, d, P.at(bp + ".dwconv.weight"), P.at(bp + ".dwconv.bias"), bc.dw_out.ptr());
    bc.xhat = Tensor({rows, C});
    bc.rstd = Tensor({rows});
    bc.normed = Tensor({rows, C});
    layernorm_forward(bc.dw_out.ptr(), rows, C, P.at(bp + ".norm.weight"), P.at(bp + ".norm.bias"),
                      bc.normed.ptr(), bc.xhat.ptr(), bc.rstd.ptr());
    const auto& w1 = P.at(bp + ".pwconv1.weight");
    bc.hidden = Tensor({rows, w1.dim(0)});
    linear_forward(bc.normed.ptr(), rows, w1, P.at(bp + ".pwconv1.bias"), bc.hidden.ptr());
    bc.act = Tensor(bc.hidden.shape);
    gelu_forward(bc.hidden.ptr(), bc.hidden.size(), bc.act.ptr());
    linear_forward(bc.act.ptr(), rows, P.at(bp + ".pwconv2.weight"), P.at(bp + ".pwconv2.bias"), y);
  } else {
    bc.xhat = Tensor({rows, C});
    bc.rstd = Tensor({rows});
    bc.normed = Tensor({rows, C});
    layernorm_forward(x, rows, C, P.at(bp + ".norm.weight"), P.at(bp + ".norm.bias"), bc.normed.ptr(),
                      bc.xhat.ptr(), bc.rstd.ptr());
    bc.u = Tensor({rows, 2 * C});
    linear_forward(bc.normed.ptr(), rows, P.at(bp + ".proj_in.weight"), P.at(bp + ".proj_in.bias"), bc.u.ptr());
    bc.gate_in = Tensor({rows, C});
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy_n(bc.u.ptr() + r * 2 * C + C, C, bc.gate_in.ptr() + r * C);
    bc.dw_out = Tensor({rows, C});
    depthwise_forward(bc.gate_in.ptr(), d, P.at(bp + ".dwconv.weight"), P.at(bp + ".dwconv.bias"),
                      bc.dw_out.ptr());
    bc.mixed = Tensor({rows, C});
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* a = bc.u.ptr() + r * 2 * C;
      const float* g = bc.dw_out.ptr() + r * C;
      float* o = bc.mixed.ptr() + r * C;
      for (std::int64_t c = 0; c < C; ++c) o[c] = a[c] * g[c];
    }
    linear_forward(bc.mixed.ptr(), rows, P.at(bp + ".proj_out.weight"), P.at(bp + ".proj_out.bias"), y);
  }
  for (std::int64_t i = 0; i < rows * C; ++i) y[i] += x[i];
}

}  // namespace

Tensor block_forward(const ModelHandle& model, int stage, int block, const Tensor& x_nhwc) {
  const Dims d = dims_of(x_nhwc);
  Tensor y(x_nhwc.shape);
  run_block(model, stage, block, x_nhwc.ptr(), d, y.ptr(), nullptr);
  return y;
}

Network::Network(const ModelHandle& model) : model_(model), tape_(new Tape) {}
Network::~Network() { delete tape_; }

Tensor Network::forward(const Tensor& x, bool record) {
  const auto& P = model_.params;
  const auto& spec = model_.spec;
  Tape& t = *tape_;
  const Dims in = dims_of(x);
  if (in.h != spec.input.height || in.w != spec.input.width || in.c != spec.input.channels) {
    throw Error(ErrorKind::shape_mismatch, "input " + shape_str(x.shape) + " does not match arch input");
  }
  t = Tape{};
  t.input = in;
  t.batch = in.n;

  // Stem.
  const std::int64_t p = spec.stem_patch;
  Dims cur{in.n, in.h / p, in.w / p, spec.stem_channels};
  Tensor patches({cur.rows(), in.c * p * p});
  patchify(x.ptr(), in, p, patches.ptr());
  Tensor pre({cur.rows(), cur.c});
  linear_forward(patches.ptr(), cur.rows(), P.at("stem.weight"), P.at("stem.bias"), pre.ptr());
  Tensor act({cur.rows(), cur.c});
  Tensor xhat({cur.rows(), cur.c}), rstd({cur.rows()});
  layernorm_forward(pre.ptr(), cur.rows(), cur.c, P.at("stem.norm.weight"), P.at("stem.norm.bias"), act.ptr(),
                    xhat.ptr(), rstd.ptr());
  if (record) {
    t.stem_patches = std::move(patches);
    t.stem_xhat = std::move(xhat);
    t.stem_rstd = std::move(rstd);
  }
  t.stem_out = cur;

  t.downs.resize(spec.stages.size());
  t.blocks.resize(spec.stages.size());
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const auto& st = spec.stages[s];
    const std::string sp = "stages." + std::to_string(s);
    if (P.contains(sp + ".downsample.weight")) {
      auto& dc = t.downs[s];
      dc.present = true;
      dc.in = cur;
      const auto& w = P.at(sp + ".downsample.weight");
      dc.patch = w.dim(2);
      Tensor normed({cur.rows(), cur.c});
      Tensor dxhat({cur.rows(), cur.c}), drstd({cur.rows()});
      layernorm_forward(act.ptr(), cur.rows(), cur.c, P.at(sp + ".downsample.norm.weight"),
                        P.at(sp + ".downsample.norm.bias"), normed.ptr(), dxhat.ptr(), drstd.ptr());
      Dims next{cur.n, cur.h / dc.patch, cur.w / dc.patch, st.channels};
      Tensor dp({next.rows(), cur.c * dc.patch * dc.patch});
      patchify(normed.ptr(), cur, dc.patch, dp.ptr());
      Tensor out({next.rows(), next.c});
      linear_forward(dp.ptr(), next.rows(), w, P.at(sp + ".downsample.bias"), out.ptr());
      if (record) {
        dc.xhat = std::move(dxhat);
        dc.rstd = std::move(drstd);
        dc.patches = std::move(dp);
      }
      act = std::move(out);
      cur = next;
    }
    t.blocks[s].resize(static_cast<std::size_t>(st.num_blocks));
    for (int b = 0; b < st.num_blocks; ++b) {
      Tensor out({cur.rows(), cur.c});
      run_block(model_, static_cast<int>(s), b, act.ptr(), cur, out.ptr(), record ? &t.blocks[s][b] : nullptr);
      act = std::move(out);
    }
  }
  t.last = cur;

  // Head: global average pool, norm, linear.
  const std::int64_t hw = cur.h * cur.w;
  Tensor pooled({cur.n, cur.c});
  for (std::int64_t n = 0; n < cur.n; ++n) {
    float* o = pooled.ptr() + n * cur.c;
    for (std::int64_t i = 0; i < hw; ++i) {
      const float* a = act.ptr() + (n * hw + i) * cur.c;
      for (std::int64_t c = 0; c < cur.c; ++c) o[c] += a[c];
    }
    for (std::int64_t c = 0; c < cur.c; ++c) o[c] /= static_cast<float>(hw);
  }
  Tensor head_in({cur.n, cur.c}), pxhat({cur.n, cur.c}), prstd({cur.n});
  layernorm_forward(pooled.ptr(), cur.n, cur.c, P.at("head.norm.weight"), P.at("head.norm.bias"), head_in.ptr(),
                    pxhat.ptr(), prstd.ptr());
  const auto& fc = P.at("head.fc.weight");
  Tensor logits({cur.n, fc.dim(0)});
  linear_forward(head_in.ptr(), cur.n, fc, P.at("head.fc.bias"), logits.ptr());
  if (record) {
    t.pooled_xhat = std::move(pxhat);
    t.pooled_rstd = std::move(prstd);
    t.head_in = std::move(head_in);
  }
  return logits;
}

void Network::backward(const Tensor& dlogits, std::vector<Tensor>& grads, const std::vector<bool>& need_grad) {
  const auto& P = model_.params;
  const auto& spec = model_.spec;
  Tape& t = *tape_;
  if (t.head_in.size() == 0) throw Error(ErrorKind::invalid_argument, "backward() without a recorded forward()");
  auto G = [&](const std::string& name) -> Tensor* {
    const auto i = P.index_of(name);
    return need_grad[i] ? &grads[i] : nullptr;
  };

  // Head.
  const Dims cur = t.last;
  const std::int64_t hw = cur.h * cur.w;
  Tensor dhead({cur.n, cur.c});
  linear_backward(t.head_in.ptr(), dlogits.ptr(), cur.n, P.at("head.fc.weight"), dhead.ptr(), G("head.fc.weight"),
                  G("head.fc.bias"));
  Tensor dpooled({cur.n, cur.c});
  layernorm_backward(dhead.ptr(), t.pooled_xhat.ptr(), t.pooled_rstd.ptr(), cur.n, cur.c, P.at("head.norm.weight"),
                     dpooled.ptr(), G("head.norm.weight"), G("head.norm.bias"));
  Tensor dact({cur.rows(), cur.c});
  for (std::int64_t n = 0; n < cur.n; ++n) {
    const float* g = dpooled.ptr() + n * cur.c;
    for (std::int64_t i = 0; i < hw; ++i) {
      float* o = dact.ptr() + (n * hw + i) * cur.c;
      for (std::int64_t c = 0; c < cur.c; ++c) o[c] = g[c] / static_cast<float>(hw);
    }
  }

  for (std::size_t si = spec.stages.size(); si-- > 0;) {
    const int s = static_cast<int>(si);
    for (int b = spec.stages[si].num_blocks; b-- > 0;) {
      BlockCache& bc = t.blocks[si][b];
      const std::string bp = block_prefix(s, b);
      const Dims d = bc.d;
      const std::int64_t rows = d.rows(), C = d.c;
      // Residual: dx = dy + d(branch)/dx.
      Tensor dx = dact;
      if (spec.block_kind == BlockKind::standard_ds) {
        Tensor dgelu(bc.act.shape);
        linear_backward(bc.act.ptr(), dact.ptr(), rows, P.at(bp + ".pwconv2.weight"), dgelu.ptr(),
                        G(bp + ".pwconv2.weight"), G(bp + ".pwconv2.bias"));
        Tensor dhidden(bc.hidden.shape);
        gelu_backward(bc.hidden.ptr(), dgelu.ptr(), dgelu.size(), dhidden.ptr());
        Tensor dnormed({rows, C});
        linear_backward(bc.normed.ptr(), dhidden.ptr(), rows, P.at(bp + ".pwconv1.weight"), dnormed.ptr(),
                        G(bp + ".pwconv1.weight"), G(bp + ".pwconv1.bias"));
        Tensor ddw({rows, C});
        layernorm_backward(dnormed.ptr(), bc.xhat.ptr(), bc.rstd.ptr(), rows, C, P.at(bp + ".norm.weight"),
                           ddw.ptr(), G(bp + ".norm.weight"), G(bp + ".norm.bias"));
        Tensor dxin({rows, C});
        depthwise_backward(bc.x.ptr(), ddw.ptr(), d, P.at(bp + ".dwconv.weight"), dxin.ptr(),
                           G(bp + ".dwconv.weight"), G(bp + ".dwconv.bias"));
        for (std::int64_t i = 0; i < rows * C; ++i) dx.data[i] += dxin.data[i];
      } else {
        Tensor dmixed({rows, C});
        linear_backward(bc.mixed.ptr(), dact.ptr(), rows, P.at(bp + ".proj_out.weight"), dmixed.ptr(),
                        G(bp + ".proj_out.weight"), G(bp + ".proj_out.bias"));
        Tensor du({rows, 2 * C});
        Tensor dgate({rows, C});
        for (std::int64_t r = 0; r < rows; ++r) {
          const float* a = bc.u.ptr() + r * 2 * C;
          const float* g = bc.dw_out.ptr() + r * C;
          const float* dm = dmixed.ptr() + r * C;
          float* da = du.ptr() + r * 2 * C;
          float* dg = dgate.ptr() + r * C;
          for (std::int64_t c = 0; c < C; ++c) {
            da[c] = dm[c] * g[c];
            dg[c] = dm[c] * a[c];
          }
        }
        Tensor dgate_in({rows, C});
        depthwise_backward(bc.gate_in.ptr(), dgate.ptr(), d, P.at(bp + ".dwconv.weight"), dgate_in.ptr(),
                           G(bp + ".dwconv.weight"), G(bp + ".dwconv.bias"));
        for (std::int64_t r = 0; r < rows; ++r)
          std::copy_n(dgate_in.ptr() + r * C, C, du.ptr() + r * 2 * C + C);
        Tensor dnormed({rows, C});
        linear_backward(bc.normed.ptr(), du.ptr(), rows, P.at(bp + ".proj_in.weight"), dnormed.ptr(),
                        G(bp + ".proj_in.weight"), G(bp + ".proj_in.bias"));
        Tensor dxin({rows, C});
        layernorm_backward(dnormed.ptr(), bc.xhat.ptr(), bc.rstd.ptr(), rows, C, P.at(bp + ".norm.weight"),
                           dxin.ptr(), G(bp + ".norm.weight"), G(bp + ".norm.bias"));
        for (std::int64_t i = 0; i < rows * C; ++i) dx.data[i] += dxin.data[i];
      }
      dact = std::move(dx);
    }
    const auto& dc = t.downs[si];
    if (dc.present) {
      const std::string sp = "stages." + std::to_string(s);
      const Dims in = dc.in;
      const auto& w = P.at(sp + ".downsample.weight");
      const std::int64_t out_rows = in.n * (in.h / dc.patch) * (in.w / dc.patch);
      Tensor dpatches(dc.patches.shape);
      linear_backward(dc.patches.ptr(), dact.ptr(), out_rows, w, dpatches.ptr(), G(sp + ".downsample.weight"),
                      G(sp + ".downsample.bias"));
      Tensor dnormed({in.rows(), in.c});
      unpatchify_add(dpatches.ptr(), in, dc.patch, dnormed.ptr());
      Tensor dprev({in.rows(), in.c});
      layernorm_backward(dnormed.ptr(), dc.xhat.ptr(), dc.rstd.ptr(), in.rows(), in.c,
                         P.at(sp + ".downsample.norm.weight"), dprev.ptr(), G(sp + ".downsample.norm.weight"),
                         G(sp + ".downsample.norm.bias"));
      dact = std::move(dprev);
    }
  }

  // Stem.
  const Dims so = t.stem_out;
  Tensor dpre({so.rows(), so.c});
  layernorm_backward(dact.ptr(), t.stem_xhat.ptr(), t.stem_rstd.ptr(), so.rows(), so.c, P.at("stem.norm.weight"),
                     dpre.ptr(), G("stem.norm.weight"), G("stem.norm.bias"));
  Tensor dpatches;
  if (want_input_grad_) dpatches = Tensor(t.stem_patches.shape);
  linear_backward(t.stem_patches.ptr(), dpre.ptr(), so.rows(), P.at("stem.weight"),
                  want_input_grad_ ? dpatches.ptr() : nullptr, G("stem.weight"), G("stem.bias"));
  if (want_input_grad_) {
    const Dims in = t.input;
    input_grad_ = Tensor({in.n, in.h, in.w, in.c});
    unpatchify_add(dpatches.ptr(), in, spec.stem_patch, input_grad_.ptr());
  }
}

double cross_entropy(const Tensor& logits, const std::vector<int>& labels, double smoothing, Tensor* dlogits) {
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) throw Error(ErrorKind::shape_mismatch, "label count");
  if (dlogits) *dlogits = Tensor(logits.shape);
  double total = 0.0;
  std::vector<double> prob(static_cast<std::size_t>(k));
  const double off = smoothing / static_cast<double>(k);
  const double on = 1.0 - smoothing + off;
  for (std::int64_t i = 0; i < n; ++i) {
    const float* z = logits.ptr() + i * k;
    const double mx = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      prob[j] = std::exp(static_cast<double>(z[j]) - mx);
      sum += prob[j];
    }
    const double log_sum = std::log(sum);
    for (std::int64_t j = 0; j < k; ++j) {
      const double q = (j == labels[i]) ? on : off;
      const double logp = static_cast<double>(z[j]) - mx - log_sum;
      total -= q * logp;
      if (dlogits) dlogits->data[i * k + j] = static_cast<float>((prob[j] / sum - q) / static_cast<double>(n));
    }
  }
  return total / static_cast<double>(n);
}

std::vector<Tensor> zero_grads(const ModelHandle& model) {
  std::vector<Tensor> g;
  g.reserve(model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) g.emplace_back(model.params.value(i).shape, 0.0f);
  return g;
}

}  // namespace fg::nn
