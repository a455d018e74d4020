#pragma once

// Little-endian primitive encoding shared by the checkpoint and dataset
// containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace unlearn::detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&value, bytes, sizeof(T));
  }
  return value;
}

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void raw(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { v = to_little(v); raw(&v, sizeof v); }
  void u64(std::uint64_t v) { v = to_little(v); raw(&v, sizeof v); }
  void i32(std::int32_t v) { v = to_little(v); raw(&v, sizeof v); }
  void f64(double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    u64(bits);
  }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void f64s(const std::vector<double>& v) {
    u64(v.size());
    for (double d : v) f64(d);
  }
  void u64s(const std::vector<std::uint64_t>& v) {
    u64(v.size());
    for (auto d : v) u64(d);
  }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  void raw(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw std::runtime_error("truncated container");
  }
  std::uint32_t u32() { std::uint32_t v; raw(&v, sizeof v); return to_little(v); }
  std::uint64_t u64() { std::uint64_t v; raw(&v, sizeof v); return to_little(v); }
  std::int32_t i32() { std::int32_t v; raw(&v, sizeof v); return to_little(v); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = bounded(u64());
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::vector<double> f64s() {
    std::vector<double> v(bounded(u64()));
    for (auto& d : v) d = f64();
    return v;
  }
  std::vector<std::uint64_t> u64s() {
    std::vector<std::uint64_t> v(bounded(u64()));
    for (auto& d : v) d = u64();
    return v;
  }

 private:
  static std::size_t bounded(std::uint64_t n) {
    if (n > (std::uint64_t{1} << 32)) throw std::runtime_error("container length field out of range");
    return static_cast<std::size_t>(n);
  }
  std::istream& in_;
};

}  // namespace unlearn::detail
