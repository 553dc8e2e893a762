#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "tard/error.hpp"
#include "tard/rng.hpp"

namespace tard::test_support {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    tard::Rng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(::getpid()));
    path_ = std::filesystem::temp_directory_path() / ("tard_" + tag + "_" + std::to_string(rng.next_u64() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

template <typename Fn>
ErrorKind error_kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a tard::Error";
  return ErrorKind::kUsage;
}

}  // namespace tard::test_support

#define EXPECT_TARD_ERROR(expr, kind_) EXPECT_EQ(::tard::test_support::error_kind_of([&] { (void)(expr); }), kind_)
