#pragma once

#include <iosfwd>

#include "rehydil/tensor.hpp"

namespace rehydil {

/// Binary tensor layout: u32 rank, rank x u32 dims, then numel float64
/// values; little-endian, row-major. Gradient state is not stored.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace rehydil
