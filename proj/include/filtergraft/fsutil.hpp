#pragma once

#include <filesystem>
#include <string>

namespace fg {

// Exclusive advisory lock (flock) on a lock file, held for the object's lifetime.
class FileLock {
 public:
  explicit FileLock(const std::filesystem::path& lock_path);
  ~FileLock();
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

std::string read_text_file(const std::filesystem::path& path);
// Writes to a sibling temp file then renames over the target.
void write_text_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace fg
