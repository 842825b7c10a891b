#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "recycle/optim.hpp"
#include "recycle/tensor.hpp"

namespace recycle {

// Weight blob layout (all little-endian):
//   u64 rank, u64 extent[rank], f32 value[product(extents)]

void write_blob(std::ostream& out, const Tensor& t);
Tensor read_blob(std::istream& in);

/// Location of one named blob inside a weight file.
struct BlobEntry {
  std::string name;
  std::uint64_t offset = 0;
  Shape shape;
};

/// Writes every tensor of `params` (in name order) and returns the index.
std::vector<BlobEntry> write_blob_file(const std::filesystem::path& path, const ParamMap& params);
ParamMap read_blob_file(const std::filesystem::path& path, const std::vector<BlobEntry>& index);

nlohmann::json blob_index_to_json(const std::vector<BlobEntry>& index);
std::vector<BlobEntry> blob_index_from_json(const nlohmann::json& j);

/// Writes `contents` to a temp file beside `path`, then renames over it.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

/// FNV-1a of a file's bytes.
std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace recycle
