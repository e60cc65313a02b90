#include "spnas/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "spnas/error.hpp"

namespace spnas {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'N', 'A', 'S', 'C', 'K', 'P'};

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const std::string& in, std::size_t& pos, const std::string& path, const char* what) {
  if (pos + sizeof(T) > in.size())
    throw FormatError("checkpoint '" + path + "': truncated " + what + " at byte offset " + std::to_string(pos));
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return v;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a.value;
  return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json manifest{{"meta", ckpt.meta}, {"arrays", nlohmann::json::array()}};
  std::size_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    manifest["arrays"].push_back(
        {{"name", a.name}, {"shape", a.value.shape()}, {"offset", offset}, {"count", a.value.numel()}});
    offset += a.value.numel();
  }
  const std::string text = manifest.dump();

  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& a : ckpt.arrays)
    for (double v : a.value.vec()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));

  // Write-then-rename so a crash never leaves a half-written "last good" file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw ConfigError("cannot write checkpoint '" + tmp + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw ConfigError("cannot write checkpoint '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw ConfigError("cannot move checkpoint into '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint '" + path + "'");
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (in.size() < sizeof kMagic || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0)
    throw FormatError("checkpoint '" + path + "': bad magic at byte offset 0");
  std::size_t pos = sizeof kMagic;
  const auto version = get_le<std::uint32_t>(in, pos, path, "version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  const auto len = get_le<std::uint64_t>(in, pos, path, "manifest length");
  if (pos + len > in.size())
    throw FormatError("checkpoint '" + path + "': truncated manifest at byte offset " + std::to_string(pos));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in.substr(pos, len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint '" + path + "': bad manifest: " + e.what());
  }
  pos += len;
  const std::size_t blob = pos;

  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& a : manifest.at("arrays")) {
    const Shape shape = a.at("shape").get<Shape>();
    const std::size_t offset = a.at("offset").get<std::size_t>();
    const std::size_t count = a.at("count").get<std::size_t>();
    Tensor t(shape);
    if (t.numel() != count) throw FormatError("checkpoint '" + path + "': shape/count mismatch for " + a.at("name").get<std::string>());
    std::size_t p = blob + 8 * offset;
    for (std::size_t i = 0; i < count; ++i) t[i] = std::bit_cast<double>(get_le<std::uint64_t>(in, p, path, "array data"));
    ckpt.arrays.push_back({a.at("name").get<std::string>(), std::move(t)});
  }
  return ckpt;
}

}  // namespace spnas
