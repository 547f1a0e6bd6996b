#include "filtergraft/verify.hpp"

#include <algorithm>
#include <cstdio>

#include "filtergraft/convref.hpp"
#include "filtergraft/nn.hpp"
#include "filtergraft/rng.hpp"

namespace fg {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.normal() * scale);
  return t;
}

int pick(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

}  // namespace

std::string BackendCheck::summary() const {
  char buf[200];
  std::snprintf(buf, sizeof buf, "cases=%d depthwise=%.3g pointwise=%.3g block=%.3g", cases, max_depthwise,
                max_pointwise, max_block);
  return buf;
}

BackendCheck verify_backend(int cases, std::uint64_t seed) {
  BackendCheck out;
  out.cases = cases;
  for (int i = 0; i < cases; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const int n = pick(rng, 1, 3), c = pick(rng, 1, 16), h = pick(rng, 3, 12), w = pick(rng, 3, 12);
    const int k = 3 + 2 * pick(rng, 0, 2);

    const Tensor x = random_tensor({n, c, h, w}, rng);
    const Tensor kern = random_tensor({c, k, k}, rng, 0.3);
    const Tensor bias = random_tensor({c}, rng, 0.1);
    const Tensor ref_dw = nchw_to_nhwc(ref::depthwise_conv_ref(x, kern, 1, k / 2, &bias));
    const Tensor got_dw = nn::depthwise_conv(nchw_to_nhwc(x), kern, bias);
    out.max_depthwise = std::max<double>(out.max_depthwise, max_abs_diff(ref_dw, got_dw));

    const int cout = pick(rng, 1, 24);
    const Tensor pw = random_tensor({cout, c}, rng, 0.3);
    const Tensor pb = random_tensor({cout}, rng, 0.1);
    const Tensor ref_pw = nchw_to_nhwc(ref::pointwise_conv_ref(x, pw, &pb));
    const Tensor got_pw = nn::pointwise_conv(nchw_to_nhwc(x), pw, pb);
    out.max_pointwise = std::max<double>(out.max_pointwise, max_abs_diff(ref_pw, got_pw));

    ArchSpec spec;
    spec.name = "probe";
    spec.block_kind = i % 2 == 0 ? BlockKind::standard_ds : BlockKind::gated_ds;
    spec.stem_patch = 1;
    spec.stem_channels = c;
    spec.stages = {StageSpec{1, c, k}};
    spec.input = InputSize{h, w, 3};
    ModelHandle model = build_model(spec, derive_seed(derive_seed(seed, "probe"), static_cast<std::uint64_t>(i)));
    for (std::size_t p = 0; p < model.params.size(); ++p)
      for (auto& v : model.params.value(p).data) v += static_cast<float>(rng.normal() * 0.05);
    const Tensor ref_block =
        nchw_to_nhwc(ref::ds_block_ref(x, ref::BlockWeights::from_model(model, 0, 0), std::nullopt, nn::kNormEps));
    const Tensor got_block = nn::block_forward(model, 0, 0, nchw_to_nhwc(x));
    out.max_block = std::max<double>(out.max_block, max_abs_diff(ref_block, got_block));
  }
  return out;
}

}  // namespace fg
