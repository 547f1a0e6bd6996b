#include "filtergraft/paths.hpp"

#include <cstdlib>

namespace fg {

std::filesystem::path default_config_root() {
  if (const char* env = std::getenv("FILTERGRAFT_CONFIGS"); env && *env) return env;
  if (std::filesystem::is_directory("configs")) return "configs";
#ifdef FILTERGRAFT_SOURCE_DIR
  return std::filesystem::path(FILTERGRAFT_SOURCE_DIR) / "configs";
#else
  return "configs";
#endif
}

std::filesystem::path default_data_root() {
  if (const char* env = std::getenv("FILTERGRAFT_DATA"); env && *env) return env;
  return "data";
}

}  // namespace fg

// --- files -------------------------------------------------------------------

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <fstream>
#include <sstream>

#include "filtergraft/error.hpp"
#include "filtergraft/fsutil.hpp"

namespace fg {

FileLock::FileLock(const std::filesystem::path& lock_path) {
  if (lock_path.has_parent_path()) std::filesystem::create_directories(lock_path.parent_path());
  fd_ = ::open(lock_path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error(ErrorKind::io_failure, "cannot open lock " + lock_path.string());
  while (::flock(fd_, LOCK_EX) != 0) {
    if (errno != EINTR) {
      ::close(fd_);
      throw Error(ErrorKind::io_failure, "cannot lock " + lock_path.string());
    }
  }
}

FileLock::~FileLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io_failure, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text_file_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw Error(ErrorKind::io_failure, "cannot write " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace fg
