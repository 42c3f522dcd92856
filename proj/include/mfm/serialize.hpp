#pragma once

// Flat binary parameter files:
//   "MFM1"
//   repeated until EOF, in ascending name order:
//     u32 name_length, name bytes, u32 rank, rank x u32 dims, prod(dims) x f32
// All integers and floats little-endian.

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "mfm/autograd.hpp"

namespace mfm {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kParamMagic[4] = {'M', 'F', 'M', '1'};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw IoError("truncated parameter file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace detail

/// Encodes a parameter set; values are stored as 32-bit floats regardless of T.
/// Names are prefixed with `prefix` (e.g. "fusion/") when non-empty.
template <typename T>
std::string encode_params(const ParameterSet<T>& params, const std::string& prefix = "") {
  std::string out(kParamMagic, 4);
  for (const auto& [name, p] : params) {
    const std::string full = prefix + name;
    detail::put_u32(out, static_cast<std::uint32_t>(full.size()));
    out += full;
    detail::put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (auto v : p.value.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

/// Decodes a parameter file. When `prefix` is non-empty only entries carrying
/// it are kept and the prefix is stripped.
template <typename T>
ParameterSet<T> decode_params(std::string_view bytes, const std::string& prefix = "") {
  if (bytes.size() < 4 || bytes.substr(0, 4) != std::string_view(kParamMagic, 4))
    throw IoError("bad parameter file magic");
  ParameterSet<T> out;
  std::size_t pos = 4;
  std::string last;
  while (pos < bytes.size()) {
    const auto len = detail::get_u32(bytes, pos);
    if (pos + len > bytes.size()) throw IoError("truncated parameter name");
    std::string name(bytes.substr(pos, len));
    pos += len;
    if (!last.empty() && name <= last) throw IoError("parameter names not in ascending order at " + name);
    last = name;
    const auto rank = detail::get_u32(bytes, pos);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u32(bytes, pos);
    Tensor<T> value(shape);
    for (auto& v : value.data()) v = static_cast<T>(std::bit_cast<float>(detail::get_u32(bytes, pos)));
    if (prefix.empty())
      out.add(name, std::move(value));
    else if (name.rfind(prefix, 0) == 0)
      out.add(name.substr(prefix.size()), std::move(value));
  }
  return out;
}

/// Writes `content` to `path` through a temporary file and a rename.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

template <typename T>
void save_params(const std::filesystem::path& path, const ParameterSet<T>& params, const std::string& prefix = "") {
  write_file_atomic(path, encode_params(params, prefix));
}

template <typename T>
ParameterSet<T> load_params(const std::filesystem::path& path, const std::string& prefix = "") {
  return decode_params<T>(read_file(path), prefix);
}

/// Rounds every value through 32-bit float storage, matching a save/load round trip.
template <typename T>
void quantize_to_storage(ParameterSet<T>& params) {
  for (auto& [_, p] : params)
    for (auto& v : p.value.data()) v = static_cast<T>(static_cast<float>(v));
}

}  // namespace mfm
