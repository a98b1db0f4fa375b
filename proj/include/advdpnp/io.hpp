// File plumbing shared by checkpointing and the CLI: atomic writes
// (temp-and-rename, so artifacts are either complete or absent) and a
// per-output-directory lock file.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "advdpnp/tensor.hpp"

namespace advdpnp {

inline void atomic_write_file(const std::filesystem::path& path,
                              const std::string& payload) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.flush();
    if (!out) throw ConfigError("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw ConfigError("cannot finalize " + path.string());
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return data;
}

// One experiment process at a time per output directory.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir)
      : path_(dir / ".advdpnp.lock") {
    std::filesystem::create_directories(dir);
    if (std::filesystem::exists(path_)) {
      throw ConfigError("output directory is locked by another run: " +
                        path_.string());
    }
    std::ofstream out(path_);
    if (!out) throw ConfigError("cannot create lock file " + path_.string());
    out << "locked\n";
    held_ = true;
  }
  ~DirLock() {
    if (held_) {
      std::error_code ec;
      std::filesystem::remove(path_, ec);
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
  bool held_ = false;
};

}  // namespace advdpnp
