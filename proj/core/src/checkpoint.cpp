#include "ultravar/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "ultravar/error.hpp"

namespace uvar {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T> void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
  std::size_t end;

  void need(std::size_t n) const {
    if (n > end - pos) throw ParseError("checkpoint: truncated");
  }
  template <class T> T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_checkpoint(const std::string& config_json, const ParamList& tensors) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, config_json.size());
  out.insert(out.end(), config_json.begin(), config_json.end());
  put<std::uint64_t>(out, tensors.size());
  std::set<std::string> seen;
  for (const auto& t : tensors) {
    if (!seen.insert(t.name).second) throw ContractError("checkpoint: duplicate tensor '" + t.name + "'");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.tensor.rank()));
    for (auto d : t.tensor.shape()) put<std::uint64_t>(out, d);
    for (float v : t.tensor.data()) put<float>(out, v);
  }
  put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
  return out;
}

CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) + 4 + 4 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw ParseError("checkpoint: bad magic");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (crc32_of(bytes.data(), bytes.size() - 4) != stored) throw ParseError("checkpoint: CRC mismatch (file corrupted)");
  Reader r{bytes, sizeof(kCheckpointMagic), bytes.size() - 4};
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint: unsupported version " + std::to_string(version) + ", expected " +
                     std::to_string(kCheckpointVersion));
  CheckpointData data;
  data.config_json = r.str(r.get<std::uint64_t>());
  const auto count = r.get<std::uint64_t>();
  std::set<std::string> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.get<std::uint32_t>());
    if (!seen.insert(t.name).second) throw ParseError("checkpoint: duplicate tensor '" + t.name + "'");
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw ParseError("checkpoint: implausible rank for '" + t.name + "'");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.get<std::uint64_t>();
      if (d != 0 && numel > (r.end - r.pos) / d) throw ParseError("checkpoint: tensor '" + t.name + "' too large");
      numel *= d;
    }
    r.need(numel * sizeof(float));
    std::vector<float> values(numel);
    std::memcpy(values.data(), bytes.data() + r.pos, numel * sizeof(float));
    r.pos += numel * sizeof(float);
    t.tensor = Tensor(shape, std::move(values));
    data.tensors.push_back(std::move(t));
  }
  if (r.pos != r.end) throw ParseError("checkpoint: trailing bytes before CRC");
  return data;
}

void save_checkpoint(const std::filesystem::path& path, const std::string& config_json, const ParamList& tensors) {
  const auto bytes = encode_checkpoint(config_json, tensors);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace uvar
