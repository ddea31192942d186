#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "p2mam/corpus.hpp"
#include "p2mam/rng.hpp"

namespace testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    p2mam::Rng rng(std::hash<std::string>{}(tag) ^ reinterpret_cast<std::uintptr_t>(this));
    path_ = fs::temp_directory_path() / ("p2mam-" + tag + "-" + std::to_string(rng.next() % 1000000007ULL));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Random successor function on 1..m with succ(a) != a.
inline std::vector<p2mam::ItemId> random_successor(std::size_t m, p2mam::Rng& rng) {
  std::vector<p2mam::ItemId> succ(m + 1, 0);
  for (std::size_t a = 1; a <= m; ++a) {
    p2mam::ItemId b;
    do {
      b = static_cast<p2mam::ItemId>(1 + rng.below(m));
    } while (b == a);
    succ[a] = b;
  }
  return succ;
}

// Sessions that follow succ from a random start item.
inline std::vector<p2mam::Session> chain_sessions(const std::vector<p2mam::ItemId>& succ, std::size_t count,
                                                  std::size_t length, p2mam::Rng& rng) {
  const std::size_t m = succ.size() - 1;
  std::vector<p2mam::Session> sessions;
  for (std::size_t s = 0; s < count; ++s) {
    p2mam::Session session{static_cast<p2mam::ItemId>(1 + rng.below(m))};
    while (session.size() < length) session.push_back(succ[session.back()]);
    sessions.push_back(std::move(session));
  }
  return sessions;
}

inline std::string sessions_text(const std::vector<p2mam::Session>& sessions) {
  std::string out;
  for (const auto& s : sessions) {
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + ("i" + std::to_string(s[i]));
    out += '\n';
  }
  return out;
}

}  // namespace testing
