#include "kdas/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "kdas/binary_io.hpp"

namespace kdas {

namespace binio {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace binio

std::string encode_checkpoint(const NamedTensors& entries) {
  std::string out = "ODTW";
  binio::put<std::uint32_t>(out, kCheckpointVersion);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw std::invalid_argument("checkpoint: entry name too long: " + name.substr(0, 32) + "...");
    }
    if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw std::invalid_argument("checkpoint: rank too large");
    binio::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (Eigen::Index i = 0; i < t.size(); ++i) binio::put<double>(out, t[i]);
  }
  return out;
}

NamedTensors decode_checkpoint(const std::string& bytes) {
  binio::Reader in(bytes, "checkpoint");
  if (in.bytes(4) != "ODTW") in.fail("bad magic (expected ODTW)");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) in.fail("unsupported version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>();
  NamedTensors entries;
  entries.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = in.get<std::uint16_t>();
    std::string name = in.bytes(len);
    const auto rank = in.get<std::uint8_t>();
    Shape shape;
    for (int r = 0; r < rank; ++r) {
      const auto d = in.get<std::uint32_t>();
      if (d == 0) in.fail("zero dimension in entry '" + name + "'");
      shape.push_back(d);
    }
    Array values(numel(shape));
    for (Eigen::Index i = 0; i < values.size(); ++i) values[i] = in.get<double>();
    entries.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!in.done()) in.fail("trailing bytes");
  return entries;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& entries) {
  binio::write_file(path.string(), encode_checkpoint(entries));
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binio::read_file(path.string()));
}

}  // namespace kdas
