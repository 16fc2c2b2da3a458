#include "clickseg/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace clickseg {

namespace {

constexpr char kMagic[4] = {'A', 'B', 'S', 'W'};

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& why) {
  throw FormatError(path.string() + ": " + why);
}

template <class UInt>
void put_le(std::ostream& out, UInt v) {
  unsigned char b[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i)
    b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(UInt));
}

template <class UInt>
UInt get_le(std::istream& in) {
  unsigned char b[sizeof(UInt)];
  in.read(reinterpret_cast<char*>(b), sizeof(UInt));
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(path, "cannot open for writing");
  out.write(kMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& [name, tensor] : entries) {
    if (name.size() > UINT16_MAX) fail(path, "tensor name too long: " + name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& shape = tensor.shape();
    if (shape.size() > UINT8_MAX) fail(path, "tensor rank too large: " + name);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
    for (Index d : shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < tensor.size(); ++i)
      put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(tensor.at(i)));
  }
  if (!out) fail(path, "short write");
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) fail(path, "bad weights magic");
  const auto version = get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    fail(path, "unsupported weights version " + std::to_string(version));

  NamedTensors entries;
  while (true) {
    const auto name_len = get_le<std::uint16_t>(in);
    if (in.eof()) break;
    if (!in) fail(path, "truncated record header");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = get_le<std::uint8_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(get_le<std::uint32_t>(in));
    if (!in) fail(path, "truncated shape in record " + name);
    ArrayXd values(numel(shape));
    for (Index i = 0; i < values.size(); ++i)
      values[i] = std::bit_cast<double>(get_le<std::uint64_t>(in));
    if (!in) fail(path, "truncated values in record " + name);
    entries.emplace_back(std::move(name), Tensor::from_array(shape, std::move(values)));
  }
  return entries;
}

}  // namespace clickseg
