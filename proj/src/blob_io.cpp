#include "recycle/blob_io.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace recycle {

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(buf, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw std::runtime_error("blob: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_blob(std::ostream& out, const Tensor& t) {
  put_u64(out, t.rank());
  for (std::size_t e : t.shape()) put_u64(out, e);
  std::string bytes(t.size() * 4, '\0');
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor read_blob(std::istream& in) {
  const std::uint64_t rank = get_u64(in);
  if (rank > 8) throw std::runtime_error("blob: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get_u64(in);
  const std::size_t count = shape_size(shape);
  std::string bytes(count * 4, '\0');
  if (!in.read(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw std::runtime_error("blob: truncated payload");
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    data[i] = std::bit_cast<float>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

std::vector<BlobEntry> write_blob_file(const std::filesystem::path& path, const ParamMap& params) {
  std::ostringstream os(std::ios::binary);
  std::vector<BlobEntry> index;
  for (const auto& [name, t] : params) {
    index.push_back(BlobEntry{name, static_cast<std::uint64_t>(os.tellp()), t.shape()});
    write_blob(os, t);
  }
  write_file_atomic(path, os.str());
  return index;
}

ParamMap read_blob_file(const std::filesystem::path& path, const std::vector<BlobEntry>& index) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open weight file " + path.string());
  ParamMap out;
  for (const auto& entry : index) {
    in.seekg(static_cast<std::streamoff>(entry.offset));
    Tensor t = read_blob(in);
    if (t.shape() != entry.shape)
      throw ValidationError("weight file " + path.string() + ": blob '" + entry.name + "' has shape " +
                            shape_str(t.shape()) + ", manifest says " + shape_str(entry.shape));
    out.emplace(entry.name, std::move(t));
  }
  return out;
}

nlohmann::json blob_index_to_json(const std::vector<BlobEntry>& index) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : index) j.push_back({{"name", e.name}, {"offset", e.offset}, {"shape", e.shape}});
  return j;
}

std::vector<BlobEntry> blob_index_from_json(const nlohmann::json& j) {
  std::vector<BlobEntry> index;
  for (const auto& e : j)
    index.push_back(BlobEntry{e.at("name").get<std::string>(), e.at("offset").get<std::uint64_t>(),
                              e.at("shape").get<Shape>()});
  return index;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  return hash_bytes(std::as_bytes(std::span<const char>(bytes.data(), bytes.size())));
}

}  // namespace recycle
