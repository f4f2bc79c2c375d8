#pragma once

// MTNS v1 tensor container:
//   "MTNS0001" | u8 dtype (0 = f32, 1 = f64) | u8 rank | rank x u64 LE extents | LE row-major payload

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mustgan/tensor.hpp"

namespace mustgan {

class MtnsError : public std::runtime_error {
 public:
  MtnsError(const std::filesystem::path& path, const std::string& what)
      : std::runtime_error(path.string() + ": " + what), path_(path) {}
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline constexpr std::array<char, 8> kMtnsMagic = {'M', 'T', 'N', 'S', '0', '0', '0', '1'};

namespace detail {

template <class U>
U to_little_endian(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return v;
}

}  // namespace detail

template <class T>
std::vector<char> encode_mtns(const Tensor<T>& t) {
  std::vector<char> out(kMtnsMagic.begin(), kMtnsMagic.end());
  out.push_back(static_cast<char>(dtype_of<T>()));
  if (t.rank() > 255) throw std::invalid_argument("MTNS rank must fit in one byte");
  out.push_back(static_cast<char>(t.rank()));
  auto put = [&out](auto v) {
    v = detail::to_little_endian(v);
    const char* p = reinterpret_cast<const char*>(&v);
    out.insert(out.end(), p, p + sizeof(v));
  };
  for (std::size_t d : t.shape()) put(static_cast<std::uint64_t>(d));
  out.reserve(out.size() + t.numel() * sizeof(T));
  for (T v : t.values()) put(v);
  return out;
}

template <class T>
Tensor<T> decode_mtns(const std::vector<char>& bytes, const std::filesystem::path& origin = {}) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) throw MtnsError(origin, std::string("truncated ") + what);
  };
  need(kMtnsMagic.size() + 2, "header");
  if (!std::equal(kMtnsMagic.begin(), kMtnsMagic.end(), bytes.begin())) throw MtnsError(origin, "bad magic");
  pos = kMtnsMagic.size();
  const auto code = static_cast<std::uint8_t>(bytes[pos++]);
  if (code > 1) throw MtnsError(origin, "unknown dtype code " + std::to_string(code));
  if (static_cast<DType>(code) != dtype_of<T>())
    throw MtnsError(origin, std::string("dtype is ") + (code == 0 ? "f32" : "f64") + ", expected " +
                                (dtype_of<T>() == DType::f32 ? "f32" : "f64"));
  const std::size_t rank = static_cast<std::uint8_t>(bytes[pos++]);
  need(rank * 8, "extents");
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + pos, 8);
    pos += 8;
    d = static_cast<std::size_t>(detail::to_little_endian(v));
  }
  const std::size_t n = element_count(shape);
  if ((bytes.size() - pos) != n * sizeof(T))
    throw MtnsError(origin, "payload holds " + std::to_string(bytes.size() - pos) + " bytes, shape " + to_string(shape) +
                                " needs " + std::to_string(n * sizeof(T)));
  std::vector<T> values(n);
  for (auto& v : values) {
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    v = detail::to_little_endian(v);
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

inline void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::filesystem::create_directories(path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw MtnsError(path, "cannot open for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw MtnsError(path, "write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MtnsError(path, "cannot open for reading");
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

template <class T>
void write_mtns(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file_atomic(path, encode_mtns(t));
}

template <class T>
Tensor<T> read_mtns(const std::filesystem::path& path) {
  return decode_mtns<T>(read_file(path), path);
}

}  // namespace mustgan
