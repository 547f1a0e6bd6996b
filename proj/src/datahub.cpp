#include "filtergraft/datahub.hpp"

#include <curl/curl.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "filtergraft/digest.hpp"
#include "filtergraft/error.hpp"
#include "filtergraft/fsutil.hpp"
#include "filtergraft/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fg {

namespace {

std::vector<std::string> split_csv(const char* s) {
  std::vector<std::string> out;
  std::string cur;
  for (const char* p = s; *p; ++p) {
    if (*p == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (*p != ' ') {
      cur.push_back(*p);
    }
  }
  out.push_back(cur);
  return out;
}

constexpr const char* kCifar100Fine =
    "apple,aquarium_fish,baby,bear,beaver,bed,bee,beetle,bicycle,bottle,bowl,boy,bridge,bus,butterfly,camel,"
    "can,castle,caterpillar,cattle,chair,chimpanzee,clock,cloud,cockroach,couch,crab,crocodile,cup,dinosaur,"
    "dolphin,elephant,flatfish,forest,fox,girl,hamster,house,kangaroo,keyboard,lamp,lawn_mower,leopard,lion,"
    "lizard,lobster,man,maple_tree,motorcycle,mountain,mouse,mushroom,oak_tree,orange,orchid,otter,palm_tree,"
    "pear,pickup_truck,pine_tree,plain,plate,poppy,porcupine,possum,rabbit,raccoon,ray,road,rocket,rose,sea,"
    "seal,shark,shrew,skunk,skyscraper,snail,snake,spider,squirrel,streetcar,sunflower,sweet_pepper,table,"
    "tank,telephone,television,tiger,tractor,train,trout,tulip,turtle,wardrobe,whale,willow_tree,wolf,woman,"
    "worm";

// Shape families of the procedural sets. Geometric families have crisp edges,
// organic ones soft falloff.
enum class Family {
  rect, triangle, cross, stripes, frame, checker,
  blob, twin_blobs, spots, ring, crescent, star, streak, cloud, ripple, teardrop, bubbles, vine, petals, leaf
};

struct ProcFamily {
  const char* name;
  Family family;
};

constexpr std::array<ProcFamily, 10> kObjects10 = {{{"rect", Family::rect},
                                                    {"triangle", Family::triangle},
                                                    {"cross", Family::cross},
                                                    {"stripes", Family::stripes},
                                                    {"blob", Family::blob},
                                                    {"twin_blobs", Family::twin_blobs},
                                                    {"spots", Family::spots},
                                                    {"ring", Family::ring},
                                                    {"crescent", Family::crescent},
                                                    {"star", Family::star}}};

constexpr std::array<ProcFamily, 20> kObjects20 = {{{"rect", Family::rect},
                                                    {"triangle", Family::triangle},
                                                    {"cross", Family::cross},
                                                    {"stripes", Family::stripes},
                                                    {"frame", Family::frame},
                                                    {"checker", Family::checker},
                                                    {"blob", Family::blob},
                                                    {"twin_blobs", Family::twin_blobs},
                                                    {"spots", Family::spots},
                                                    {"ring", Family::ring},
                                                    {"crescent", Family::crescent},
                                                    {"star", Family::star},
                                                    {"streak", Family::streak},
                                                    {"cloud", Family::cloud},
                                                    {"ripple", Family::ripple},
                                                    {"teardrop", Family::teardrop},
                                                    {"bubbles", Family::bubbles},
                                                    {"vine", Family::vine},
                                                    {"petals", Family::petals},
                                                    {"leaf", Family::leaf}}};

constexpr std::array<ProcFamily, 10> kSilhouettes10 = {{{"rect", Family::rect},
                                                        {"triangle", Family::triangle},
                                                        {"cross", Family::cross},
                                                        {"frame", Family::frame},
                                                        {"checker", Family::checker},
                                                        {"blob", Family::blob},
                                                        {"ring", Family::ring},
                                                        {"star", Family::star},
                                                        {"crescent", Family::crescent},
                                                        {"teardrop", Family::teardrop}}};

template <std::size_t N>
std::vector<std::string> family_names(const std::array<ProcFamily, N>& fams) {
  std::vector<std::string> out;
  for (const auto& f : fams) out.emplace_back(f.name);
  return out;
}

std::vector<DatasetSpec> build_registry() {
  std::vector<DatasetSpec> r;
  r.push_back({"cifar10", 10, 50000, 10000, 32, 3, "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
               split_csv("airplane,automobile,bird,cat,deer,dog,frog,horse,ship,truck")});
  r.push_back({"cifar100", 100, 50000, 10000, 32, 3, "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
               split_csv(kCifar100Fine)});
  r.push_back({"fashion_mnist", 10, 60000, 10000, 32, 3,
               "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
               split_csv("tshirt_top,trouser,pullover,dress,coat,sandal,shirt,sneaker,bag,ankle_boot")});
  r.push_back({"stl10_small", 10, 5000, 8000, 64, 3, "http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz",
               split_csv("airplane,bird,car,cat,deer,dog,horse,monkey,ship,truck")});
  r.push_back({"synth_objects10", 10, 5000, 2000, 32, 3, "builtin:objects", family_names(kObjects10)});
  r.push_back({"synth_objects20", 20, 8000, 4000, 32, 3, "builtin:objects", family_names(kObjects20)});
  r.push_back({"synth_silhouettes10", 10, 4000, 2000, 32, 3, "builtin:silhouettes", family_names(kSilhouettes10)});
  return r;
}

bool is_builtin(const DatasetSpec& spec) { return spec.source.rfind("builtin:", 0) == 0; }

}  // namespace

const std::vector<DatasetSpec>& dataset_registry() {
  static const std::vector<DatasetSpec> registry = build_registry();
  return registry;
}

const DatasetSpec& dataset_spec(const std::string& name) {
  for (const auto& d : dataset_registry())
    if (d.name == name) return d;
  throw Error(ErrorKind::unknown_dataset, "'" + name + "' is not registered");
}

// --- tar / gzip ----------------------------------------------------------------------

namespace tarball {

namespace {

struct GzFile {
  gzFile f;
  explicit GzFile(const fs::path& p) : f(gzopen(p.c_str(), "rb")) {
    if (!f) throw Error(ErrorKind::io_failure, "cannot open " + p.string());
    gzbuffer(f, 1 << 18);
  }
  ~GzFile() { gzclose(f); }
  // Reads exactly n bytes unless EOF; returns bytes read.
  std::size_t read(void* dst, std::size_t n) {
    std::size_t got = 0;
    auto* out = static_cast<char*>(dst);
    while (got < n) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n - got, 1u << 30));
      const int r = gzread(f, out + got, chunk);
      if (r < 0) throw Error(ErrorKind::format_error, "corrupt gzip stream");
      if (r == 0) break;
      got += static_cast<std::size_t>(r);
    }
    return got;
  }
};

std::uint64_t parse_octal(const char* p, std::size_t n) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < n && p[i]; ++i) {
    if (p[i] == ' ') continue;
    if (p[i] < '0' || p[i] > '7') break;
    v = v * 8 + static_cast<std::uint64_t>(p[i] - '0');
  }
  return v;
}

// Iterates members; `sink(name, size, reader)` must consume exactly size bytes
// through reader or return false to have them skipped.
template <typename Sink>
void walk_tar(GzFile& gz, Sink&& sink) {
  std::array<char, 512> hdr{};
  std::string long_name;
  while (true) {
    if (gz.read(hdr.data(), 512) != 512) return;
    if (std::all_of(hdr.begin(), hdr.end(), [](char c) { return c == 0; })) return;
    const std::uint64_t size = parse_octal(hdr.data() + 124, 12);
    const char type = hdr[156];
    std::string name(hdr.data(), strnlen(hdr.data(), 100));
    const std::string prefix(hdr.data() + 345, strnlen(hdr.data() + 345, 155));
    if (std::memcmp(hdr.data() + 257, "ustar", 5) == 0 && !prefix.empty()) name = prefix + "/" + name;
    if (!long_name.empty()) {
      name = long_name;
      long_name.clear();
    }
    const std::uint64_t padded = (size + 511) / 512 * 512;
    if (type == 'L') {
      std::string buf(padded, '\0');
      gz.read(buf.data(), padded);
      long_name.assign(buf.c_str());
      continue;
    }
    const bool regular = type == '0' || type == '\0';
    std::uint64_t consumed = 0;
    if (regular) {
      auto reader = [&](void* dst, std::size_t n) {
        const auto got = gz.read(dst, n);
        consumed += got;
        return got;
      };
      sink(name, size, reader);
    }
    std::vector<char> skip(64 * 1024);
    std::uint64_t left = padded - consumed;
    while (left > 0) {
      const auto n = static_cast<std::size_t>(std::min<std::uint64_t>(left, skip.size()));
      if (gz.read(skip.data(), n) != n) throw Error(ErrorKind::format_error, "truncated tar archive");
      left -= n;
    }
  }
}

}  // namespace

std::vector<Member> read_tar_gz(const fs::path& path) {
  GzFile gz(path);
  std::vector<Member> out;
  walk_tar(gz, [&](const std::string& name, std::uint64_t size, auto& reader) {
    Member m{name, std::vector<std::uint8_t>(size)};
    if (reader(m.data.data(), size) != size) throw Error(ErrorKind::format_error, "truncated member " + name);
    out.push_back(std::move(m));
  });
  return out;
}

std::vector<fs::path> extract_tar_gz(const fs::path& path,
                                     const std::function<fs::path(const std::string& member)>& select) {
  GzFile gz(path);
  std::vector<fs::path> written;
  walk_tar(gz, [&](const std::string& name, std::uint64_t size, auto& reader) {
    const fs::path dest = select(name);
    if (dest.empty()) return;
    if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
    const fs::path tmp = dest.string() + ".part";
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    std::vector<char> buf(1 << 20);
    std::uint64_t left = size;
    while (left > 0) {
      const auto n = static_cast<std::size_t>(std::min<std::uint64_t>(left, buf.size()));
      if (reader(buf.data(), n) != n) throw Error(ErrorKind::format_error, "truncated member " + name);
      out.write(buf.data(), static_cast<std::streamsize>(n));
      left -= n;
    }
    out.close();
    if (!out) throw Error(ErrorKind::io_failure, "cannot write " + tmp.string());
    fs::rename(tmp, dest);
    written.push_back(dest);
  });
  return written;
}

std::vector<std::uint8_t> gunzip_file(const fs::path& path) {
  GzFile gz(path);
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> buf(1 << 20);
  while (true) {
    const auto n = gz.read(buf.data(), buf.size());
    out.insert(out.end(), buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n));
    if (n < buf.size()) break;
  }
  return out;
}

}  // namespace tarball

// --- fetching --------------------------------------------------------------------------

namespace {

std::once_flag g_curl_once;

std::size_t curl_write(char* ptr, std::size_t size, std::size_t nmemb, void* userdata) {
  auto* out = static_cast<std::ofstream*>(userdata);
  out->write(ptr, static_cast<std::streamsize>(size * nmemb));
  return *out ? size * nmemb : 0;
}

void download(const std::string& url, const fs::path& dest) {
  std::call_once(g_curl_once, [] { curl_global_init(CURL_GLOBAL_DEFAULT); });
  fs::create_directories(dest.parent_path());
  const fs::path tmp = dest.string() + ".part";
  std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io_failure, "cannot write " + tmp.string());
  CURL* curl = curl_easy_init();
  if (!curl) throw Error(ErrorKind::download_failure, "curl init failed");
  char errbuf[CURL_ERROR_SIZE] = {0};
  curl_easy_setopt(curl, CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl, CURLOPT_WRITEFUNCTION, curl_write);
  curl_easy_setopt(curl, CURLOPT_WRITEDATA, &out);
  curl_easy_setopt(curl, CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(curl, CURLOPT_FAILONERROR, 1L);
  curl_easy_setopt(curl, CURLOPT_CONNECTTIMEOUT, 30L);
  curl_easy_setopt(curl, CURLOPT_LOW_SPEED_LIMIT, 1024L);
  curl_easy_setopt(curl, CURLOPT_LOW_SPEED_TIME, 60L);
  curl_easy_setopt(curl, CURLOPT_ERRORBUFFER, errbuf);
  const CURLcode rc = curl_easy_perform(curl);
  curl_easy_cleanup(curl);
  out.close();
  if (rc != CURLE_OK) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw Error(ErrorKind::download_failure,
                url + ": " + (errbuf[0] ? std::string(errbuf) : std::string(curl_easy_strerror(rc))));
  }
  fs::rename(tmp, dest);
}

// Base URL and archive file name for a registry locator, honoring the mirror.
std::string resolve_url(const DatasetSpec& spec, const std::string& file) {
  std::string base;
  if (const char* mirror = std::getenv("FILTERGRAFT_DATA_MIRROR"); mirror && *mirror) {
    base = mirror;
  } else {
    base = spec.source;
    if (base.back() != '/') base = base.substr(0, base.rfind('/') + 1);
  }
  if (base.back() != '/') base.push_back('/');
  return base + file;
}

std::string basename_of(const std::string& member) {
  const auto slash = member.rfind('/');
  return slash == std::string::npos ? member : member.substr(slash + 1);
}

// Downloads and unpacks into raw/, keeping only the payload files the parser reads.
void fetch_remote(const DatasetSpec& spec, const fs::path& raw) {
  const fs::path downloads = raw.parent_path() / "download";
  auto fetch_archive = [&](const std::string& file, const std::set<std::string>& keep) {
    const fs::path archive = downloads / file;
    download(resolve_url(spec, file), archive);
    const auto written = tarball::extract_tar_gz(archive, [&](const std::string& member) -> fs::path {
      const auto base = basename_of(member);
      return keep.count(base) ? raw / base : fs::path{};
    });
    if (written.size() != keep.size()) {
      throw Error(ErrorKind::format_error,
                  file + ": expected " + std::to_string(keep.size()) + " payload members, found " +
                      std::to_string(written.size()));
    }
  };
  if (spec.name == "cifar10") {
    fetch_archive("cifar-10-binary.tar.gz", {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                                             "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"});
  } else if (spec.name == "cifar100") {
    fetch_archive("cifar-100-binary.tar.gz", {"train.bin", "test.bin"});
  } else if (spec.name == "stl10_small") {
    fetch_archive("stl10_binary.tar.gz", {"train_X.bin", "train_y.bin", "test_X.bin", "test_y.bin"});
  } else if (spec.name == "fashion_mnist") {
    for (const char* f : {"train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz", "t10k-images-idx3-ubyte.gz",
                          "t10k-labels-idx1-ubyte.gz"}) {
      download(resolve_url(spec, f), raw / f);
    }
  } else {
    throw Error(ErrorKind::unknown_dataset, "no fetch recipe for " + spec.name);
  }
  std::error_code ec;
  fs::remove_all(downloads, ec);
}

void write_records(const fs::path& path, const DatasetSpec& spec, bool train) {
  const std::int64_t n = train ? spec.train_size : spec.test_size;
  const std::size_t px = static_cast<std::size_t>(spec.image_size) * spec.image_size * spec.channels;
  std::vector<std::uint8_t> buf;
  buf.reserve(static_cast<std::size_t>(n) * (px + 1));
  for (std::int64_t i = 0; i < n; ++i) {
    int label = 0;
    const auto img = render_procedural(spec, train, i, &label);
    buf.push_back(static_cast<std::uint8_t>(label));
    buf.insert(buf.end(), img.begin(), img.end());
  }
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".part";
  std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  out.close();
  if (!out) throw Error(ErrorKind::io_failure, "cannot write " + tmp.string());
  fs::rename(tmp, path);
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::io_failure, "cannot open " + p.string());
  in.seekg(0, std::ios::end);
  const auto n = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> out(n);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n));
  return out;
}

std::vector<std::string> raw_files(const fs::path& raw) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(raw))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), raw).generic_string());
  std::sort(files.begin(), files.end());
  return files;
}

std::string combine_digests(const json& files) {
  std::string text;
  for (const auto& [name, digest] : files.items()) text += name + ":" + digest.get<std::string>() + "\n";
  return sha256_hex(text);
}

// --- parsers ---------------------------------------------------------------------------

// CIFAR binary: per record `label_bytes` label bytes, then 3x32x32 CHW pixels.
void parse_cifar(const std::vector<std::uint8_t>& bytes, int label_bytes, int label_offset, Split& s) {
  constexpr std::size_t px = 3 * 32 * 32;
  const std::size_t rec = px + static_cast<std::size_t>(label_bytes);
  if (bytes.size() % rec != 0) throw Error(ErrorKind::format_error, "cifar batch size not a record multiple");
  const std::size_t n = bytes.size() / rec;
  const std::size_t base = s.labels.size();
  s.images.resize((base + n) * px);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    s.labels.push_back(r[label_offset]);
    const std::uint8_t* chw = r + label_bytes;
    std::uint8_t* hwc = s.images.data() + (base + i) * px;
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 1024; ++p) hwc[p * 3 + c] = chw[c * 1024 + p];
  }
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

// IDX images (28x28 gray) padded by 2 to 32x32 and replicated to 3 channels.
void parse_idx(const std::vector<std::uint8_t>& images, const std::vector<std::uint8_t>& labels, Split& s) {
  if (images.size() < 16 || be32(images.data()) != 2051) throw Error(ErrorKind::format_error, "bad idx3 header");
  if (labels.size() < 8 || be32(labels.data()) != 2049) throw Error(ErrorKind::format_error, "bad idx1 header");
  const std::uint32_t n = be32(images.data() + 4), rows = be32(images.data() + 8), cols = be32(images.data() + 12);
  if (be32(labels.data() + 4) != n || rows != 28 || cols != 28 || images.size() != 16 + std::size_t{n} * 784 ||
      labels.size() != 8 + std::size_t{n}) {
    throw Error(ErrorKind::format_error, "idx sizes inconsistent");
  }
  s.images.assign(std::size_t{n} * 32 * 32 * 3, 0);
  for (std::uint32_t i = 0; i < n; ++i) {
    s.labels.push_back(labels[8 + i]);
    const std::uint8_t* src = images.data() + 16 + std::size_t{i} * 784;
    std::uint8_t* dst = s.images.data() + std::size_t{i} * 3072;
    for (int y = 0; y < 28; ++y)
      for (int x = 0; x < 28; ++x)
        for (int c = 0; c < 3; ++c) dst[((y + 2) * 32 + (x + 2)) * 3 + c] = src[y * 28 + x];
  }
}

// STL-10 binary: 3x96x96 per image in column-major channel planes; area-resampled to 64.
void parse_stl(const std::vector<std::uint8_t>& images, const std::vector<std::uint8_t>& labels, Split& s) {
  constexpr int in = 96, out = 64;
  constexpr std::size_t rec = 3 * in * in;
  if (images.size() % rec != 0 || images.size() / rec != labels.size())
    throw Error(ErrorKind::format_error, "stl10 sizes inconsistent");
  const std::size_t n = labels.size();
  s.images.assign(n * out * out * 3, 0);
  // Each output cell spans 1.5 input pixels: weights over the three touched pixels.
  auto taps = [](int o, std::array<std::pair<int, float>, 2>& t) {
    const float lo = o * 1.5f;
    const int p0 = static_cast<int>(lo);
    const float w0 = std::min(1.0f, p0 + 1 - lo);
    t[0] = {p0, w0};
    t[1] = {p0 + 1, 1.5f - w0};
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 1 || labels[i] > 10) throw Error(ErrorKind::format_error, "stl10 label out of range");
    s.labels.push_back(labels[i] - 1);
    const std::uint8_t* src = images.data() + i * rec;
    std::uint8_t* dst = s.images.data() + i * out * out * 3;
    std::array<std::pair<int, float>, 2> ty{}, tx{};
    for (int oy = 0; oy < out; ++oy) {
      taps(oy, ty);
      for (int ox = 0; ox < out; ++ox) {
        taps(ox, tx);
        for (int c = 0; c < 3; ++c) {
          float acc = 0.0f;
          for (const auto& [py, wy] : ty)
            for (const auto& [px, wx] : tx) acc += wy * wx * src[c * in * in + px * in + py];
          dst[(oy * out + ox) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(acc / 2.25f, 0.0f, 255.0f)));
        }
      }
    }
  }
}

void parse_records(const std::vector<std::uint8_t>& bytes, std::size_t px, Split& s) {
  const std::size_t rec = px + 1;
  if (bytes.size() % rec != 0) throw Error(ErrorKind::format_error, "record file size mismatch");
  const std::size_t n = bytes.size() / rec;
  s.images.resize(n * px);
  for (std::size_t i = 0; i < n; ++i) {
    s.labels.push_back(bytes[i * rec]);
    std::memcpy(s.images.data() + i * px, bytes.data() + i * rec + 1, px);
  }
}

void parse_dataset(const DatasetSpec& spec, const fs::path& raw, DatasetHandle& h) {
  for (Split* s : {&h.train, &h.test}) {
    s->height = s->width = spec.image_size;
    s->channels = spec.channels;
  }
  if (spec.name == "cifar10") {
    for (int b = 1; b <= 5; ++b)
      parse_cifar(read_bytes(raw / ("data_batch_" + std::to_string(b) + ".bin")), 1, 0, h.train);
    parse_cifar(read_bytes(raw / "test_batch.bin"), 1, 0, h.test);
  } else if (spec.name == "cifar100") {
    parse_cifar(read_bytes(raw / "train.bin"), 2, 1, h.train);
    parse_cifar(read_bytes(raw / "test.bin"), 2, 1, h.test);
  } else if (spec.name == "fashion_mnist") {
    parse_idx(tarball::gunzip_file(raw / "train-images-idx3-ubyte.gz"),
              tarball::gunzip_file(raw / "train-labels-idx1-ubyte.gz"), h.train);
    parse_idx(tarball::gunzip_file(raw / "t10k-images-idx3-ubyte.gz"),
              tarball::gunzip_file(raw / "t10k-labels-idx1-ubyte.gz"), h.test);
  } else if (spec.name == "stl10_small") {
    parse_stl(read_bytes(raw / "train_X.bin"), read_bytes(raw / "train_y.bin"), h.train);
    parse_stl(read_bytes(raw / "test_X.bin"), read_bytes(raw / "test_y.bin"), h.test);
  } else {
    const std::size_t px = static_cast<std::size_t>(spec.image_size) * spec.image_size * spec.channels;
    parse_records(read_bytes(raw / "train.bin"), px, h.train);
    parse_records(read_bytes(raw / "test.bin"), px, h.test);
  }
  for (const Split* s : {&h.train, &h.test}) {
    const std::int64_t want = s == &h.train ? spec.train_size : spec.test_size;
    if (s->size() != want) {
      throw Error(ErrorKind::format_error, spec.name + ": expected " + std::to_string(want) + " records, parsed " +
                                               std::to_string(s->size()));
    }
    for (int label : s->labels)
      if (label < 0 || label >= spec.num_classes) throw Error(ErrorKind::format_error, "label out of range");
  }
  for (Split* s : {&h.train, &h.test}) {
    s->source_index.resize(static_cast<std::size_t>(s->size()));
    std::iota(s->source_index.begin(), s->source_index.end(), std::int64_t{0});
  }
}

std::pair<std::vector<float>, std::vector<float>> channel_stats(const Split& s) {
  const auto c = static_cast<std::size_t>(s.channels);
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  for (std::size_t i = 0; i < s.images.size(); ++i) {
    const double v = s.images[i] / 255.0;
    sum[i % c] += v;
    sq[i % c] += v * v;
  }
  const double count = static_cast<double>(s.images.size() / c);
  std::vector<float> mean(c), sd(c);
  for (std::size_t k = 0; k < c; ++k) {
    const double m = sum[k] / count;
    mean[k] = static_cast<float>(m);
    sd[k] = static_cast<float>(std::sqrt(std::max(sq[k] / count - m * m, 1e-12)));
  }
  return {mean, sd};
}

}  // namespace

bool dataset_available_offline(const std::string& name, const fs::path& root) {
  const auto& spec = dataset_spec(name);
  return is_builtin(spec) || fs::exists(root / name / "digest.json");
}

DatasetHandle load_dataset(const std::string& name, const fs::path& root) {
  const DatasetSpec& spec = dataset_spec(name);
  const fs::path dir = root / name;
  const fs::path raw = dir / "raw";
  const fs::path digest_path = dir / "digest.json";
  const fs::path stats_path = dir / "stats.json";
  FileLock lock(dir / ".lock");

  if (!fs::exists(digest_path)) {
    std::error_code ec;
    fs::remove_all(raw, ec);
    if (is_builtin(spec)) {
      write_records(raw / "train.bin", spec, true);
      write_records(raw / "test.bin", spec, false);
    } else {
      fetch_remote(spec, raw);
    }
    json files = json::object();
    for (const auto& f : raw_files(raw)) files[f] = file_sha256((raw / f).string());
    json d = {{"dataset", name}, {"source", spec.source}, {"files", files}, {"content_digest", combine_digests(files)}};
    write_text_file_atomic(digest_path, d.dump(2) + "\n");
  }

  const json recorded = json::parse(read_text_file(digest_path));
  const json& files = recorded.at("files");
  if (!fs::exists(raw) || raw_files(raw).size() != files.size())
    throw Error(ErrorKind::digest_mismatch, name + ": cached file set differs from digest.json");
  for (const auto& [file, digest] : files.items()) {
    const fs::path p = raw / file;
    if (!fs::exists(p)) throw Error(ErrorKind::digest_mismatch, name + ": missing cached file " + file);
    const auto actual = file_sha256(p.string());
    if (actual != digest.get<std::string>())
      throw Error(ErrorKind::digest_mismatch, name + "/" + file + ": expected " + digest.get<std::string>() +
                                                  ", found " + actual);
  }

  DatasetHandle h;
  h.spec = spec;
  h.base_name = name;
  h.content_digest = recorded.at("content_digest").get<std::string>();
  parse_dataset(spec, raw, h);

  bool have_stats = false;
  if (fs::exists(stats_path)) {
    const json st = json::parse(read_text_file(stats_path));
    if (st.value("content_digest", "") == h.content_digest) {
      h.mean = st.at("mean").get<std::vector<float>>();
      h.stddev = st.at("std").get<std::vector<float>>();
      have_stats = true;
    }
  }
  if (!have_stats) {
    std::tie(h.mean, h.stddev) = channel_stats(h.train);
    json st = {{"content_digest", h.content_digest}, {"mean", h.mean}, {"std", h.stddev}};
    write_text_file_atomic(stats_path, st.dump(2) + "\n");
  }
  return h;
}

// --- semantic splits -------------------------------------------------------------------

SplitTable load_split_table(const std::string& dataset, const fs::path& config_root) {
  const fs::path p = config_root / "splits" / (dataset + ".json");
  if (!fs::exists(p)) throw Error(ErrorKind::no_split_table, "no split table for " + dataset + " (" + p.string() + ")");
  const json j = json::parse(read_text_file(p));
  SplitTable t;
  t.dataset = j.at("dataset").get<std::string>();
  const auto& parts = j.at("partitions");
  if (!parts.is_array() || parts.size() != 2) throw Error(ErrorKind::invalid_spec, p.string() + ": need two partitions");
  for (int i = 0; i < 2; ++i) {
    auto& dst = i == 0 ? t.a : t.b;
    dst.label = parts[i].at("label").get<std::string>();
    dst.classes = parts[i].at("classes").get<std::vector<std::string>>();
  }
  return t;
}

namespace {

DatasetHandle make_partition(const DatasetHandle& base, const SplitTable::Partition& part,
                             const std::vector<int>& class_ids) {
  std::vector<int> remap(static_cast<std::size_t>(base.spec.num_classes), -1);
  for (std::size_t i = 0; i < class_ids.size(); ++i) remap[static_cast<std::size_t>(class_ids[i])] = static_cast<int>(i);
  DatasetHandle h;
  h.base_name = base.base_name;
  h.spec = base.spec;
  h.spec.name = base.spec.name + ":" + part.label;
  h.spec.num_classes = static_cast<int>(class_ids.size());
  h.spec.class_names.clear();
  for (int id : class_ids) h.spec.class_names.push_back(base.spec.class_names[static_cast<std::size_t>(id)]);
  h.mean = base.mean;
  h.stddev = base.stddev;
  h.content_digest = sha256_hex(base.content_digest + "|" + h.spec.name);
  for (bool train : {true, false}) {
    const Split& src = train ? base.train : base.test;
    Split& dst = train ? h.train : h.test;
    dst.height = src.height;
    dst.width = src.width;
    dst.channels = src.channels;
    const std::size_t px = static_cast<std::size_t>(src.height * src.width * src.channels);
    for (std::int64_t i = 0; i < src.size(); ++i) {
      const int m = remap[static_cast<std::size_t>(src.labels[static_cast<std::size_t>(i)])];
      if (m < 0) continue;
      dst.labels.push_back(m);
      dst.source_index.push_back(src.source_index[static_cast<std::size_t>(i)]);
      dst.images.insert(dst.images.end(), src.image(i), src.image(i) + px);
    }
    (train ? h.spec.train_size : h.spec.test_size) = dst.size();
  }
  return h;
}

}  // namespace

std::pair<DatasetHandle, DatasetHandle> semantic_split(const DatasetHandle& base, const SplitTable& table) {
  if (table.dataset != base.base_name || base.spec.name != base.base_name)
    throw Error(ErrorKind::invalid_argument, "split table for " + table.dataset + " applied to " + base.spec.name);
  const auto& names = base.spec.class_names;
  std::vector<int> owner(names.size(), -1);
  std::array<std::vector<int>, 2> ids;
  for (int p = 0; p < 2; ++p) {
    const auto& part = p == 0 ? table.a : table.b;
    for (const auto& cls : part.classes) {
      const auto it = std::find(names.begin(), names.end(), cls);
      if (it == names.end()) throw Error(ErrorKind::invalid_spec, "split table names unknown class '" + cls + "'");
      const auto id = static_cast<std::size_t>(it - names.begin());
      if (owner[id] != -1) throw Error(ErrorKind::invalid_spec, "class '" + cls + "' listed twice in split table");
      owner[id] = p;
      ids[static_cast<std::size_t>(p)].push_back(static_cast<int>(id));
    }
  }
  for (std::size_t i = 0; i < owner.size(); ++i)
    if (owner[i] == -1) throw Error(ErrorKind::invalid_spec, "split table omits class '" + names[i] + "'");
  for (auto& v : ids) std::sort(v.begin(), v.end());
  return {make_partition(base, table.a, ids[0]), make_partition(base, table.b, ids[1])};
}

std::pair<DatasetHandle, DatasetHandle> semantic_split(const std::string& name, const fs::path& root,
                                                       const fs::path& config_root) {
  dataset_spec(name);
  const SplitTable table = load_split_table(name, config_root);
  return semantic_split(load_dataset(name, root), table);
}

DatasetHandle load_dataset_ref(const std::string& ref, const fs::path& root, const fs::path& config_root) {
  const auto colon = ref.find(':');
  if (colon == std::string::npos) return load_dataset(ref, root);
  const std::string name = ref.substr(0, colon), label = ref.substr(colon + 1);
  dataset_spec(name);
  const SplitTable table = load_split_table(name, config_root);
  if (label != table.a.label && label != table.b.label)
    throw Error(ErrorKind::invalid_argument, "split table for " + name + " has no partition '" + label + "'");
  auto parts = semantic_split(load_dataset(name, root), table);
  return label == table.a.label ? std::move(parts.first) : std::move(parts.second);
}

// --- loaders ---------------------------------------------------------------------------

BatchIterator::BatchIterator(const DatasetHandle& handle, const Split& split, int batch, AugmentPolicy augment,
                             bool shuffle, std::uint64_t seed)
    : handle_(&handle), split_(&split), batch_(batch), augment_(augment), shuffle_(shuffle), seed_(seed) {
  if (batch < 1) throw Error(ErrorKind::invalid_argument, "batch must be >= 1");
  begin_epoch(0);
}

void BatchIterator::begin_epoch(int epoch) {
  epoch_ = epoch;
  cursor_ = 0;
  const auto n = static_cast<std::size_t>(split_->size());
  order_.resize(n);
  if (shuffle_) {
    const auto p = permutation(n, derive_seed(seed_, static_cast<std::uint64_t>(epoch), 0x0a11ULL));
    for (std::size_t i = 0; i < n; ++i) order_[i] = static_cast<std::int64_t>(p[i]);
  } else {
    std::iota(order_.begin(), order_.end(), std::int64_t{0});
  }
}

std::int64_t BatchIterator::batches_per_epoch() const { return (split_->size() + batch_ - 1) / batch_; }

bool BatchIterator::next(Batch& out) {
  const std::int64_t n = split_->size();
  if (cursor_ >= n) return false;
  const std::int64_t b = std::min<std::int64_t>(batch_, n - cursor_);
  const std::int64_t H = split_->height, W = split_->width, C = split_->channels;
  out.images = Tensor({b, H, W, C});
  out.labels.resize(static_cast<std::size_t>(b));
  out.indices.resize(static_cast<std::size_t>(b));
  std::vector<float> scale(static_cast<std::size_t>(C)), shift(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    scale[c] = 1.0f / (255.0f * handle_->stddev[c]);
    shift[c] = -handle_->mean[c] / handle_->stddev[c];
  }
  constexpr int pad = 4;
  for (std::int64_t k = 0; k < b; ++k) {
    const std::int64_t idx = order_[static_cast<std::size_t>(cursor_ + k)];
    out.labels[k] = split_->labels[static_cast<std::size_t>(idx)];
    out.indices[k] = idx;
    const std::uint8_t* src = split_->image(idx);
    float* dst = out.images.ptr() + k * H * W * C;
    int dy = 0, dx = 0;
    bool flip = false;
    if (augment_ == AugmentPolicy::crop_flip) {
      Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(epoch_), static_cast<std::uint64_t>(idx) + 1));
      dy = static_cast<int>(rng.below(2 * pad + 1)) - pad;
      dx = static_cast<int>(rng.below(2 * pad + 1)) - pad;
      flip = rng.below(2) == 1;
    }
    for (std::int64_t y = 0; y < H; ++y) {
      const std::int64_t sy = y + dy;
      for (std::int64_t x = 0; x < W; ++x) {
        const std::int64_t sx = (flip ? W - 1 - x : x) + dx;
        float* o = dst + (y * W + x) * C;
        if (sy < 0 || sy >= H || sx < 0 || sx >= W) {
          for (std::int64_t c = 0; c < C; ++c) o[c] = shift[c];
        } else {
          const std::uint8_t* p = src + (sy * W + sx) * C;
          for (std::int64_t c = 0; c < C; ++c) o[c] = p[c] * scale[c] + shift[c];
        }
      }
    }
  }
  cursor_ += b;
  return true;
}

Loaders make_loaders(const DatasetHandle& handle, int batch, AugmentPolicy augment, std::uint64_t seed) {
  return Loaders{BatchIterator(handle, handle.train, batch, augment, true, seed),
                 BatchIterator(handle, handle.test, batch, AugmentPolicy::none, false, seed)};
}

std::vector<float> normalized_image(const DatasetHandle& handle, const Split& split, std::int64_t i) {
  const std::int64_t px = split.height * split.width, C = split.channels;
  std::vector<float> out(static_cast<std::size_t>(px * C));
  const std::uint8_t* src = split.image(i);
  // Same arithmetic as BatchIterator so the two agree bit for bit.
  for (std::int64_t p = 0; p < px; ++p)
    for (std::int64_t c = 0; c < C; ++c) {
      const float scale = 1.0f / (255.0f * handle.stddev[c]), shift = -handle.mean[c] / handle.stddev[c];
      out[p * C + c] = src[p * C + c] * scale + shift;
    }
  return out;
}

// --- procedural generator --------------------------------------------------------------

namespace {

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

double sd_box(double u, double v, double hx, double hy) {
  const double dx = std::fabs(u) - hx, dy = std::fabs(v) - hy;
  return std::hypot(std::max(dx, 0.0), std::max(dy, 0.0)) + std::min(std::max(dx, dy), 0.0);
}

double sd_triangle(double u, double v) {
  const double k = std::sqrt(3.0);
  double px = std::fabs(u) - 0.9, py = -v + 0.9 / k;
  if (px + k * py > 0.0) {
    const double nx = (px - k * py) / 2.0, ny = (-k * px - py) / 2.0;
    px = nx;
    py = ny;
  }
  px -= std::clamp(px, -1.8, 0.0);
  return -std::hypot(px, py) * (py < 0 ? -1.0 : 1.0);
}

// Per-image random extras for families with multiple parts.
struct Extras {
  std::array<std::array<double, 3>, 6> parts{};
  std::array<double, 6> phase{};
};

// Coverage in [0, 1] at object coordinates (u, v); `px` is pixels per unit.
double coverage(Family f, double u, double v, double px, const Extras& ex) {
  const double r = std::hypot(u, v);
  const double theta = std::atan2(v, u);
  auto crisp = [px](double sd) { return std::clamp(0.5 - sd * px, 0.0, 1.0); };
  auto soft = [px](double sd, double blur) { return std::clamp(0.5 - sd * px / blur, 0.0, 1.0); };
  switch (f) {
    case Family::rect: return crisp(sd_box(u, v, 0.95, 0.6));
    case Family::triangle: return crisp(sd_triangle(u, v));
    case Family::cross: return crisp(std::min(sd_box(u, v, 0.95, 0.26), sd_box(u, v, 0.26, 0.95)));
    case Family::stripes: {
      const double s = u * 1.6;
      const double bars = (std::fabs(s - std::round(s)) - 0.25) / 1.6;
      return crisp(std::max(sd_box(u, v, 0.95, 0.8), bars));
    }
    case Family::frame: return crisp(std::max(sd_box(u, v, 0.9, 0.9), -sd_box(u, v, 0.55, 0.55)));
    case Family::checker: {
      const int cell = static_cast<int>(std::floor((u + 0.9) * 1.67)) + static_cast<int>(std::floor((v + 0.9) * 1.67));
      return (cell % 2 == 0) ? crisp(sd_box(u, v, 0.9, 0.9)) : 0.0;
    }
    case Family::blob: return smoothstep(0.25, 0.65, std::exp(-(u * u + (v / 0.7) * (v / 0.7)) * 1.3));
    case Family::twin_blobs: {
      const double g = std::max(std::exp(-((u - 0.5) * (u - 0.5) + v * v) * 5.0),
                                std::exp(-((u + 0.5) * (u + 0.5) + v * v) * 5.0));
      return smoothstep(0.25, 0.65, g);
    }
    case Family::spots: {
      double g = 0.0;
      for (const auto& s : ex.parts) {
        const double d2 = (u - s[0]) * (u - s[0]) + (v - s[1]) * (v - s[1]);
        g = std::max(g, std::exp(-d2 / (s[2] * s[2])));
      }
      return smoothstep(0.3, 0.7, g);
    }
    case Family::ring: return smoothstep(0.3, 0.8, std::exp(-((r - 0.72) / 0.2) * ((r - 0.72) / 0.2)));
    case Family::crescent: {
      const double d2 = std::hypot(u - 0.45, v - 0.15) - 0.8;
      return soft(std::max(r - 0.95, -d2), 2.5);
    }
    case Family::star: return soft(r - (0.6 + 0.32 * std::cos(5.0 * theta)), 1.8);
    case Family::streak: {
      const double c = (v - 0.35 * std::sin(2.2 * u + ex.phase[0])) / 0.17;
      return smoothstep(0.3, 0.8, std::exp(-c * c) * smoothstep(1.35, 0.95, std::fabs(u)));
    }
    case Family::cloud: {
      double field = 0.0;
      for (int i = 0; i < 3; ++i) field += std::sin(ex.parts[i][0] * 4.0 * u + ex.parts[i][1] * 4.0 * v + ex.phase[i]);
      return smoothstep(0.0, 0.4, 1.0 - r + 0.15 * field);
    }
    case Family::ripple:
      return smoothstep(0.35, 0.65, (0.5 + 0.5 * std::cos(9.0 * r)) * std::exp(-r * r * 0.9));
    case Family::teardrop: {
      const double half = 0.12 + 0.28 * (1.0 - u);
      return soft(std::hypot(u, v / (half * 1.4)) - 0.95, 2.0);
    }
    case Family::bubbles: {
      double g = 0.0;
      for (int i = 0; i < 4; ++i) {
        const auto& s = ex.parts[i];
        const double d = std::hypot(u - s[0], v - s[1]) - s[2];
        g = std::max(g, std::exp(-(d / 0.08) * (d / 0.08)));
      }
      return smoothstep(0.3, 0.8, g);
    }
    case Family::vine: {
      const double c = (v - 0.45 * std::sin(3.5 * u + ex.phase[0])) / 0.12;
      return smoothstep(0.3, 0.8, std::exp(-c * c) * smoothstep(1.45, 1.05, std::fabs(u)));
    }
    case Family::petals: return soft(r - (0.28 + 0.65 * std::max(0.0, std::cos(3.0 * theta))), 1.8);
    case Family::leaf: {
      const double body = soft(std::hypot(u, v / 0.45) - 0.95, 2.0);
      const double vein = std::exp(-(v / 0.06) * (v / 0.06)) * (std::fabs(u) < 0.85 ? 1.0 : 0.0);
      return body * (1.0 - 0.75 * vein);
    }
  }
  return 0.0;
}

double luma(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace

std::vector<std::uint8_t> render_procedural(const DatasetSpec& spec, bool train, std::int64_t index, int* label) {
  if (!is_builtin(spec)) throw Error(ErrorKind::invalid_argument, spec.name + " is not a built-in dataset");
  const bool silhouettes = spec.source == "builtin:silhouettes";
  std::vector<Family> fams;
  if (spec.name == "synth_objects10") {
    for (const auto& f : kObjects10) fams.push_back(f.family);
  } else if (spec.name == "synth_objects20") {
    for (const auto& f : kObjects20) fams.push_back(f.family);
  } else {
    for (const auto& f : kSilhouettes10) fams.push_back(f.family);
  }
  const int cls = static_cast<int>(index % static_cast<std::int64_t>(fams.size()));
  if (label) *label = cls;
  const Family fam = fams[static_cast<std::size_t>(cls)];

  Rng rng(derive_seed(hash_name(spec.name), train ? 1u : 2u, static_cast<std::uint64_t>(index)));
  const int S = spec.image_size;
  const double mid = (S - 1) / 2.0;

  std::array<double, 3> bg{}, fg{}, bg2{};
  double radius, jitter;
  if (silhouettes) {
    const double g = rng.uniform(0.02, 0.2);
    bg = {g, g, g};
    bg2 = bg;
    const double f = rng.uniform(0.55, 0.95);
    fg = {f, f, f};
    radius = rng.uniform(9.0, 13.0);
    jitter = 2.5;
  } else {
    for (auto& c : bg) c = rng.uniform(0.1, 0.9);
    for (std::size_t c = 0; c < 3; ++c) bg2[c] = std::clamp(bg[c] + rng.uniform(-0.15, 0.15), 0.0, 1.0);
    for (int attempt = 0; attempt < 32; ++attempt) {
      for (auto& c : fg) c = rng.uniform(0.0, 1.0);
      if (std::fabs(luma(fg) - luma(bg)) > 0.4) break;
    }
    radius = rng.uniform(9.0, 13.0);
    jitter = 3.0;
  }
  const double cx = mid + rng.uniform(-jitter, jitter), cy = mid + rng.uniform(-jitter, jitter);
  const double rot = rng.uniform(-0.6, 0.6);
  const double aspect = rng.uniform(0.85, 1.15);
  const double ca = std::cos(rot), sa = std::sin(rot);

  Extras ex;
  for (auto& p : ex.parts) p = {rng.uniform(-0.75, 0.75), rng.uniform(-0.75, 0.75), rng.uniform(0.22, 0.34)};
  for (auto& ph : ex.phase) ph = rng.uniform(0.0, 2.0 * M_PI);

  // Low-frequency background field.
  const double fx = rng.uniform(0.5, 2.0) * 2.0 * M_PI / S, fy = rng.uniform(0.5, 2.0) * 2.0 * M_PI / S;
  const double bphase = rng.uniform(0.0, 2.0 * M_PI);
  const double shade = rng.uniform(0.8, 1.0);  // foreground light falloff
  const double lx = rng.uniform(-1.0, 1.0), ly = rng.uniform(-1.0, 1.0);

  // Optional small distractor shared by all classes.
  const bool distract = !silhouettes && rng.uniform() < 0.5;
  const double dxp = rng.uniform(2.0, S - 3.0), dyp = rng.uniform(2.0, S - 3.0), drad = rng.uniform(1.5, 3.0);
  std::array<double, 3> dcol{};
  for (auto& c : dcol) c = rng.uniform(0.0, 1.0);

  const double noise = silhouettes ? 0.03 : 0.03;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(S) * S * spec.channels);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double t = 0.5 + 0.5 * std::sin(fx * x + fy * y + bphase);
      const double dx = x - cx, dy = y - cy;
      const double u = (dx * ca + dy * sa) / radius * aspect;
      const double v = (-dx * sa + dy * ca) / radius;
      const double a = coverage(fam, u, v, radius, ex);
      const double light = silhouettes ? 1.0 : shade + (1.0 - shade) * 0.5 * (1.0 + (u * lx + v * ly) * 0.5);
      double dmask = 0.0;
      if (distract) dmask = 0.7 * std::exp(-((x - dxp) * (x - dxp) + (y - dyp) * (y - dyp)) / (drad * drad));
      const double n = rng.normal() * noise;
      for (int c = 0; c < spec.channels; ++c) {
        const auto ci = static_cast<std::size_t>(silhouettes ? 0 : c);
        double val = bg[ci] * (1.0 - t) + bg2[ci] * t;
        val = val * (1.0 - dmask) + dcol[ci] * dmask;
        val = val * (1.0 - a) + fg[ci] * light * a;
        val += n + (silhouettes ? 0.0 : rng.normal() * noise * 0.3);
        out[(static_cast<std::size_t>(y) * S + x) * spec.channels + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
      }
    }
  }
  return out;
}

}  // namespace fg
