#include "rehydil/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace rehydil {

static_assert(std::endian::native == std::endian::little, "tensor files are little-endian");

namespace {

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("read_tensor: truncated header");
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  const Shape& s = t.shape();
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  for (std::size_t d : s) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw std::runtime_error("write_tensor: dimension too large");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  auto data = t.data();
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write_tensor: stream error");
}

Tensor read_tensor(std::istream& in) {
  const std::uint32_t rank = get_u32(in);
  if (rank == 0 || rank > 8) throw std::runtime_error("read_tensor: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(in);
  std::vector<double> data(shape_numel(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw std::runtime_error("read_tensor: truncated payload");
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_tensor(in);
}

}  // namespace rehydil
