#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "filtergraft/digest.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/rng.hpp"
#include "filtergraft/tensor.hpp"

namespace fg {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_spec: return "invalid-spec";
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::shape_mismatch: return "shape-mismatch";
    case ErrorKind::heterogeneous_kernel_size: return "heterogeneous-kernel-size";
    case ErrorKind::kernel_size_mismatch: return "kernel-size-mismatch";
    case ErrorKind::layer_shape_mismatch: return "layer-shape-mismatch";
    case ErrorKind::insufficient_stack: return "insufficient-stack";
    case ErrorKind::unknown_parameter: return "unknown-parameter-name";
    case ErrorKind::unknown_dataset: return "unknown-dataset";
    case ErrorKind::download_failure: return "download-failure";
    case ErrorKind::digest_mismatch: return "digest-mismatch";
    case ErrorKind::no_split_table: return "no-split-table";
    case ErrorKind::nan_loss: return "nan-loss";
    case ErrorKind::mask_violation: return "mask-violation";
    case ErrorKind::zero_baseline: return "zero-baseline";
    case ErrorKind::duplicate_run: return "duplicate-run";
    case ErrorKind::io_failure: return "io-failure";
    case ErrorKind::incomplete_matrix: return "incomplete-matrix";
    case ErrorKind::no_records: return "no-records";
    case ErrorKind::empty_layer: return "empty-layer";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::format_error: return "format-error";
  }
  return "unknown";
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(values.begin(), values.end()) {
  if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
    throw Error(ErrorKind::shape_mismatch,
                "value count " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }
}

Tensor nchw_to_nhwc(const Tensor& x) {
  if (x.rank() != 4) throw Error(ErrorKind::shape_mismatch, "expected rank-4 tensor");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({n, h, w, c});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t col = 0; col < w; ++col) y.at(i, r, col, ch) = x.at(i, ch, r, col);
  return y;
}

Tensor nhwc_to_nchw(const Tensor& x) {
  if (x.rank() != 4) throw Error(ErrorKind::shape_mismatch, "expected rank-4 tensor");
  const auto n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor y({n, c, h, w});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t r = 0; r < h; ++r)
      for (std::int64_t col = 0; col < w; ++col)
        for (std::int64_t ch = 0; ch < c; ++ch) y.at(i, ch, r, col) = x.at(i, r, col, ch);
  return y;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw Error(ErrorKind::shape_mismatch, shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  float m = 0.0f;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

// --- digests ---------------------------------------------------------------

namespace {

std::string to_hex(const unsigned char* bytes, unsigned len) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(len * 2, '0');
  for (unsigned i = 0; i < len; ++i) {
    out[2 * i] = digits[bytes[i] >> 4];
    out[2 * i + 1] = digits[bytes[i] & 0xf];
  }
  return out;
}

}  // namespace

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  if (!ctx_ || EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::io_failure, "sha256 init failed");
  }
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(std::span<const std::uint8_t> bytes) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), bytes.data(), bytes.size());
}

void Sha256::update(std::string_view text) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), text.data(), text.size());
}

std::string Sha256::hex_final() {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &len);
  return to_hex(md, len);
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex_final();
}

std::string sha256_hex(std::string_view text) {
  Sha256 h;
  h.update(text);
  return h.hex_final();
}

std::string tensor_digest(const Tensor& t) {
  static_assert(sizeof(float) == 4);
  Sha256 h;
  if constexpr (std::endian::native == std::endian::little) {
    h.update(std::span(reinterpret_cast<const std::uint8_t*>(t.data.data()), t.data.size() * 4));
  } else {
    std::vector<std::uint8_t> buf(t.data.size() * 4);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(t.data[i]);
      for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    h.update(buf);
  }
  return h.hex_final();
}

std::string file_sha256(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io_failure, "cannot open " + path);
  Sha256 h;
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = in.gcount();
    if (got > 0) h.update(std::span(reinterpret_cast<const std::uint8_t*>(buf.data()), static_cast<std::size_t>(got)));
  }
  return h.hex_final();
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(p);
  return p;
}

}  // namespace fg
