#pragma once

// VPN1 checkpoints: "VPN1", then per parameter a u16 name length, the UTF-8
// name, a u8 rank, rank u32 extents, and the row-major f32 values. All
// integers and floats are little-endian. Optimizer state is not stored.

#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "vpnet/binary_io.hpp"
#include "vpnet/optim.hpp"

namespace vpnet {

template <typename T>
void write_checkpoint(std::ostream& os, const ParameterSet<T>& params) {
  os.write("VPN1", 4);
  for (const auto& p : params) {
    if (p.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw UsageError("checkpoint: parameter name too long: " + p.name);
    }
    if (p.value.rank() > std::numeric_limits<std::uint8_t>::max()) {
      throw UsageError("checkpoint: rank too large for " + p.name);
    }
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t e : p.value.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    for (T v : p.value.data()) io::write_f32(os, static_cast<float>(v));
  }
}

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline std::vector<CheckpointEntry> read_checkpoint(std::istream& is) {
  io::expect_magic(is, "VPN1", "checkpoint");
  std::vector<CheckpointEntry> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    CheckpointEntry e;
    const auto len = io::read_le<std::uint16_t>(is, "checkpoint name length");
    e.name.resize(len);
    if (!is.read(e.name.data(), len)) throw FormatError("checkpoint: truncated name");
    const auto rank = io::read_le<std::uint8_t>(is, "checkpoint rank");
    if (rank == 0) throw FormatError("checkpoint: zero rank for " + e.name);
    for (unsigned r = 0; r < rank; ++r) {
      const auto ext = io::read_le<std::uint32_t>(is, "checkpoint extent");
      if (ext == 0) throw FormatError("checkpoint: zero extent for " + e.name);
      e.shape.push_back(ext);
    }
    const std::size_t n = element_count(e.shape);
    e.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) e.values[i] = io::read_f32(is, "checkpoint values of " + e.name);
    out.push_back(std::move(e));
  }
  return out;
}

/// Loads values into an existing set. Names and shapes must match exactly;
/// moments and step counts are reset.
template <typename T>
void load_checkpoint(std::istream& is, ParameterSet<T>& params) {
  const auto entries = read_checkpoint(is);
  if (entries.size() != params.size()) {
    throw FormatError("checkpoint: holds " + std::to_string(entries.size()) + " parameters, model expects " +
                      std::to_string(params.size()));
  }
  for (const auto& e : entries) {
    auto* p = params.find(e.name);
    if (p == nullptr) throw FormatError("checkpoint: unexpected parameter " + e.name);
    if (p->value.shape() != e.shape) {
      throw FormatError("checkpoint: shape of " + e.name + " is " + to_string(e.shape) + ", model expects " +
                        to_string(p->value.shape()));
    }
    for (std::size_t i = 0; i < e.values.size(); ++i) p->value[i] = static_cast<T>(e.values[i]);
    std::fill(p->first_moment.begin(), p->first_moment.end(), T{0});
    std::fill(p->second_moment.begin(), p->second_moment.end(), T{0});
    p->step = 0;
  }
}

template <typename T>
void save_checkpoint_file(const std::string& path, const ParameterSet<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write checkpoint: " + path);
  write_checkpoint(os, params);
}

template <typename T>
void load_checkpoint_file(const std::string& path, ParameterSet<T>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("missing checkpoint: " + path);
  load_checkpoint(is, params);
}

}  // namespace vpnet
