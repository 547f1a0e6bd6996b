#include "filtergraft/archive.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <regex>

#include "filtergraft/error.hpp"

namespace fg::archive {

namespace {

void put16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint16_t get16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
std::uint32_t get32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint64_t get64(const std::uint8_t* p) {
  return static_cast<std::uint64_t>(get32(p)) | (static_cast<std::uint64_t>(get32(p + 4)) << 32);
}

[[noreturn]] void bad(const std::string& what) { throw Error(ErrorKind::format_error, what); }

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "<f4") return 4;
  if (dtype == "|u1" || dtype == "<u1") return 1;
  bad("unsupported dtype " + dtype);
}

}  // namespace

NamedArray from_tensor(std::string name, const Tensor& t) {
  NamedArray a;
  a.name = std::move(name);
  a.shape = t.shape;
  a.dtype = "<f4";
  a.bytes.resize(t.data.size() * 4);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t.data[i]);
    for (int b = 0; b < 4; ++b) a.bytes[4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return a;
}

NamedArray from_text(std::string name, const std::string& text) {
  NamedArray a;
  a.name = std::move(name);
  a.shape = {static_cast<std::int64_t>(text.size())};
  a.dtype = "|u1";
  a.bytes.assign(text.begin(), text.end());
  return a;
}

Tensor to_tensor(const NamedArray& a) {
  if (a.dtype != "<f4") bad(a.name + ": expected float32 array, got " + a.dtype);
  std::vector<float> values(a.bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = std::bit_cast<float>(get32(&a.bytes[4 * i]));
  return Tensor(a.shape, std::move(values));
}

std::string to_text(const NamedArray& a) { return std::string(a.bytes.begin(), a.bytes.end()); }

std::vector<std::uint8_t> encode_npy(const NamedArray& a) {
  std::string shape = "(";
  for (std::size_t i = 0; i < a.shape.size(); ++i) {
    shape += std::to_string(a.shape[i]);
    shape += (a.shape.size() == 1 || i + 1 < a.shape.size()) ? "," : "";
    if (i + 1 < a.shape.size()) shape += " ";
  }
  shape += ")";
  std::string header = "{'descr': '" + a.dtype + "', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t preamble = 10;
  std::size_t total = preamble + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');

  std::vector<std::uint8_t> out = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  put16(out, static_cast<std::uint16_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), a.bytes.begin(), a.bytes.end());
  return out;
}

NamedArray decode_npy(std::string name, const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 10 || bytes[0] != 0x93 || std::memcmp(&bytes[1], "NUMPY", 5) != 0) bad(name + ": not an npy");
  const int major = bytes[6];
  std::size_t header_len, offset;
  if (major == 1) {
    header_len = get16(&bytes[8]);
    offset = 10;
  } else {
    if (bytes.size() < 12) bad(name + ": truncated npy");
    header_len = get32(&bytes[8]);
    offset = 12;
  }
  if (offset + header_len > bytes.size()) bad(name + ": truncated npy header");
  const std::string header(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                           bytes.begin() + static_cast<std::ptrdiff_t>(offset + header_len));
  NamedArray a;
  a.name = std::move(name);
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('descr':\s*'([^']+)')"))) bad(a.name + ": no descr");
  a.dtype = m[1];
  if (std::regex_search(header, m, std::regex(R"('fortran_order':\s*True)"))) bad(a.name + ": fortran order");
  if (!std::regex_search(header, m, std::regex(R"('shape':\s*\(([^)]*)\))"))) bad(a.name + ": no shape");
  const std::string dims = m[1];
  static const std::regex digits(R"(\d+)");
  std::sregex_iterator it(dims.begin(), dims.end(), digits), end;
  for (; it != end; ++it) a.shape.push_back(std::stoll(it->str()));
  const std::size_t count = static_cast<std::size_t>(numel(a.shape)) * dtype_size(a.dtype);
  const std::size_t data_at = offset + header_len;
  if (data_at + count > bytes.size()) bad(a.name + ": truncated npy data");
  a.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(data_at),
                 bytes.begin() + static_cast<std::ptrdiff_t>(data_at + count));
  if (a.dtype == "<u1") a.dtype = "|u1";
  return a;
}

void write_npz(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  std::vector<std::uint8_t> out, central;
  // Fixed DOS timestamp (1980-01-01) keeps archives byte-reproducible.
  constexpr std::uint16_t kTime = 0, kDate = (0 << 9) | (1 << 5) | 1;
  for (const auto& a : arrays) {
    const auto payload = encode_npy(a);
    const std::string member = a.name + ".npy";
    const auto crc = static_cast<std::uint32_t>(crc32(0L, payload.data(), static_cast<uInt>(payload.size())));
    const auto size = static_cast<std::uint32_t>(payload.size());
    const auto local_offset = static_cast<std::uint32_t>(out.size());

    put32(out, 0x04034b50);
    put16(out, 20);
    put16(out, 0);
    put16(out, 0);  // stored
    put16(out, kTime);
    put16(out, kDate);
    put32(out, crc);
    put32(out, size);
    put32(out, size);
    put16(out, static_cast<std::uint16_t>(member.size()));
    put16(out, 0);
    out.insert(out.end(), member.begin(), member.end());
    out.insert(out.end(), payload.begin(), payload.end());

    put32(central, 0x02014b50);
    put16(central, 20);
    put16(central, 20);
    put16(central, 0);
    put16(central, 0);
    put16(central, kTime);
    put16(central, kDate);
    put32(central, crc);
    put32(central, size);
    put32(central, size);
    put16(central, static_cast<std::uint16_t>(member.size()));
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put32(central, 0);
    put32(central, local_offset);
    central.insert(central.end(), member.begin(), member.end());
  }
  const auto cd_offset = static_cast<std::uint32_t>(out.size());
  out.insert(out.end(), central.begin(), central.end());
  put32(out, 0x06054b50);
  put16(out, 0);
  put16(out, 0);
  put16(out, static_cast<std::uint16_t>(arrays.size()));
  put16(out, static_cast<std::uint16_t>(arrays.size()));
  put32(out, static_cast<std::uint32_t>(central.size()));
  put32(out, cd_offset);
  put16(out, 0);

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorKind::io_failure, "cannot write " + tmp);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(ErrorKind::io_failure, "short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace {

std::vector<std::uint8_t> inflate_raw(const std::uint8_t* src, std::size_t n, std::size_t expected) {
  std::vector<std::uint8_t> out(expected);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) bad("inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(src);
  zs.avail_in = static_cast<uInt>(n);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || zs.total_out != expected) bad("corrupt deflate stream");
  return out;
}

}  // namespace

std::vector<NamedArray> read_npz(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::io_failure, "cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 22) bad(path.string() + ": not a zip archive");

  std::size_t eocd = std::string::npos;
  for (std::size_t i = buf.size() - 22 + 1; i-- > 0;) {
    if (get32(&buf[i]) == 0x06054b50) {
      eocd = i;
      break;
    }
  }
  if (eocd == std::string::npos) bad(path.string() + ": no end-of-central-directory record");
  std::uint64_t entries = get16(&buf[eocd + 10]);
  std::uint64_t cd_offset = get32(&buf[eocd + 16]);
  if (cd_offset == 0xffffffffu || entries == 0xffffu) {
    if (eocd < 20 || get32(&buf[eocd - 20]) != 0x07064b50) bad("zip64 locator missing");
    const std::uint64_t z64 = get64(&buf[eocd - 20 + 8]);
    if (z64 + 56 > buf.size() || get32(&buf[z64]) != 0x06064b50) bad("zip64 record missing");
    entries = get64(&buf[z64 + 32]);
    cd_offset = get64(&buf[z64 + 48]);
  }

  std::vector<NamedArray> arrays;
  std::size_t p = cd_offset;
  for (std::uint64_t e = 0; e < entries; ++e) {
    if (p + 46 > buf.size() || get32(&buf[p]) != 0x02014b50) bad("corrupt central directory");
    const std::uint16_t method = get16(&buf[p + 10]);
    const std::uint32_t crc = get32(&buf[p + 16]);
    std::uint64_t csize = get32(&buf[p + 20]);
    std::uint64_t usize = get32(&buf[p + 24]);
    const std::uint16_t name_len = get16(&buf[p + 28]);
    const std::uint16_t extra_len = get16(&buf[p + 30]);
    const std::uint16_t comment_len = get16(&buf[p + 32]);
    std::uint64_t local = get32(&buf[p + 42]);
    std::string name(buf.begin() + static_cast<std::ptrdiff_t>(p + 46),
                     buf.begin() + static_cast<std::ptrdiff_t>(p + 46 + name_len));
    // zip64 extended information: fields present only when saturated.
    std::size_t x = p + 46 + name_len;
    const std::size_t xend = x + extra_len;
    while (x + 4 <= xend) {
      const std::uint16_t id = get16(&buf[x]);
      const std::uint16_t len = get16(&buf[x + 2]);
      if (id == 0x0001) {
        std::size_t q = x + 4;
        if (usize == 0xffffffffu) { usize = get64(&buf[q]); q += 8; }
        if (csize == 0xffffffffu) { csize = get64(&buf[q]); q += 8; }
        if (local == 0xffffffffu) { local = get64(&buf[q]); }
      }
      x += 4 + len;
    }
    p = xend + comment_len;

    if (local + 30 > buf.size() || get32(&buf[local]) != 0x04034b50) bad("corrupt local header for " + name);
    const std::size_t data = local + 30 + get16(&buf[local + 26]) + get16(&buf[local + 28]);
    if (data + csize > buf.size()) bad("truncated member " + name);
    std::vector<std::uint8_t> payload;
    if (method == 0) {
      payload.assign(buf.begin() + static_cast<std::ptrdiff_t>(data),
                     buf.begin() + static_cast<std::ptrdiff_t>(data + csize));
    } else if (method == 8) {
      payload = inflate_raw(&buf[data], csize, usize);
    } else {
      bad("unsupported compression method for " + name);
    }
    if (static_cast<std::uint32_t>(crc32(0L, payload.data(), static_cast<uInt>(payload.size()))) != crc) {
      bad("crc mismatch for " + name);
    }
    if (name.ends_with(".npy")) name.resize(name.size() - 4);
    arrays.push_back(decode_npy(std::move(name), payload));
  }
  return arrays;
}

const NamedArray& find(const std::vector<NamedArray>& arrays, const std::string& name) {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw Error(ErrorKind::format_error, "archive has no member " + name);
}

}  // namespace fg::archive
