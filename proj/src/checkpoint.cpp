#include "mfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace mfuse {

namespace {

constexpr char kMagic[8] = {'M', 'F', 'U', 'S', 'E', 'C', 'K', '\0'};

template <class U>
void put(std::ostream& os, U v) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(bytes, sizeof(U));
}

template <class U>
U get(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw Error("checkpoint: truncated file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(std::ostream& os, const ParamStore& params, std::uint64_t config_digest) {
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, config_digest);
  put<std::uint64_t>(os, params.size());
  for (const auto& p : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put<std::uint64_t>(os, d);
    for (double v : p.value.values()) put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw Error("checkpoint: write failed");
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, std::uint64_t config_digest) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("checkpoint: cannot open " + path.string() + " for writing");
  save_checkpoint(os, params, config_digest);
}

void load_checkpoint(std::istream& is, ParamStore& params, std::uint64_t config_digest) {
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw Error("checkpoint: bad magic, not a checkpoint file");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
  const auto digest = get<std::uint64_t>(is);
  if (digest != config_digest) throw Error("checkpoint: written for a different model config");
  const auto count = get<std::uint64_t>(is);
  if (count != params.size()) {
    throw Error("checkpoint: holds " + std::to_string(count) + " parameters, model has " +
                std::to_string(params.size()));
  }
  std::vector<std::vector<double>> loaded;
  loaded.reserve(params.size());
  for (const auto& p : params) {
    const auto name_len = get<std::uint32_t>(is);
    if (name_len > 4096) throw Error("checkpoint: corrupt parameter name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw Error("checkpoint: truncated file");
    if (name != p.name) throw Error("checkpoint: expected parameter " + p.name + ", found " + name);
    const auto rank = get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
    if (shape != p.value.shape()) {
      throw ShapeError("checkpoint: parameter " + name + " has shape " + to_string(shape) + ", model expects " +
                       to_string(p.value.shape()));
    }
    std::vector<double> values(p.value.numel());
    for (double& v : values) v = std::bit_cast<double>(get<std::uint64_t>(is));
    loaded.push_back(std::move(values));
  }
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    params[i].value = Tensor(params[i].value.shape(), std::move(loaded[i]));
  }
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& params, std::uint64_t config_digest) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path.string());
  load_checkpoint(is, params, config_digest);
}

}  // namespace mfuse
