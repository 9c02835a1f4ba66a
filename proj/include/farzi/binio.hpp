#pragma once

// Little-endian binary records with offset-aware error reporting.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "farzi/errors.hpp"

namespace farzi::binio {

namespace detail {
template <class T>
T to_le(T x) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(x);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return x;
}
}  // namespace detail

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw ConfigError("cannot open '" + path + "' for writing");
  }

  void bytes(std::string_view s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

  template <class T>
  void scalar(T x) {
    x = detail::to_le(x);
    out_.write(reinterpret_cast<const char*>(&x), sizeof(T));
  }
  void u32(std::uint32_t x) { scalar(x); }
  void u64(std::uint64_t x) { scalar(x); }
  void f64(double x) { scalar(x); }
  void f64s(std::span<const double> xs) {
    if constexpr (std::endian::native == std::endian::little) {
      out_.write(reinterpret_cast<const char*>(xs.data()), static_cast<std::streamsize>(xs.size() * sizeof(double)));
    } else {
      for (double x : xs) f64(x);
    }
  }

  void close() {
    out_.close();
    if (!out_) throw ConfigError("failed writing '" + path_ + "'");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

/// Whole-file reader. Every read past the end raises FormatError naming the
/// offset where the missing data should have started.
class Reader {
 public:
  explicit Reader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    data_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  /// Checks a fixed signature and reports the first differing byte.
  void expect_magic(std::string_view magic) {
    for (std::size_t i = 0; i < magic.size(); ++i) {
      if (pos_ + i >= data_.size()) throw FormatError("truncated file, magic incomplete", pos_ + i);
      if (data_[pos_ + i] != magic[i]) {
        throw FormatError("bad magic bytes (expected \"" + std::string(magic) + "\")", pos_ + i);
      }
    }
    pos_ += magic.size();
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  template <class T>
  T scalar(const char* what) {
    need(sizeof(T), what);
    T x;
    std::memcpy(&x, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return detail::to_le(x);
  }
  std::uint32_t u32(const char* what) { return scalar<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return scalar<std::uint64_t>(what); }
  double f64(const char* what) { return scalar<double>(what); }

  void f64s(std::span<double> out, const char* what) {
    if (out.size() > remaining() / sizeof(double)) throw FormatError(std::string("truncated file in ") + what, pos_);
    for (auto& x : out) x = f64(what);
  }

  void expect_end() const {
    if (pos_ != data_.size()) throw FormatError("trailing bytes after payload", pos_);
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > remaining()) throw FormatError(std::string("truncated file in ") + what, pos_);
  }

  std::vector<char> data_;
  std::size_t pos_ = 0;
};

}  // namespace farzi::binio
