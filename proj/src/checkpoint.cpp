#include "geico/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace geico::ckpt {

namespace {

constexpr char kMagic[8] = {'G', 'E', 'I', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw CorruptError("checkpoint truncated");
  return v;
}

}  // namespace

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json manifest = ck.manifest;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& t : ck.tensors) manifest["tensors"].push_back(t.shape());
  const std::string text = manifest.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(kMagic, sizeof kMagic);
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ck.tensors)
      out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw CorruptError("bad checkpoint magic in " + path.string());
  }
  const std::uint64_t len = get_u64(in);
  if (len > (std::uint64_t{1} << 30)) throw CorruptError("checkpoint manifest too large");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw CorruptError("checkpoint truncated");
  Checkpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(text);
    for (const auto& s : ck.manifest.at("tensors")) {
      Shape shape = s.get<Shape>();
      std::vector<double> v(numel(shape));
      if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)))) {
        throw CorruptError("checkpoint blob truncated");
      }
      ck.tensors.emplace_back(std::move(shape), std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptError("trailing bytes after checkpoint blob");
  ck.manifest.erase("tensors");
  return ck;
}

}  // namespace geico::ckpt
