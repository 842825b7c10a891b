#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "recycle/source_factory.hpp"

namespace recycle {

/// On-disk source pool: manifest.json, backbone.bin and model_<id>.bin.
/// Append-only; the manifest is rewritten atomically after each model file
/// is in place, so readers never see a record without its weights.
class Pool {
 public:
  /// Creates a fresh pool holding `backbone`. Refuses a non-empty directory
  /// unless `force` is set, in which case previous pool files are replaced.
  static Pool create(const std::filesystem::path& dir, const Backbone& backbone, bool force = false);
  static Pool open(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }
  const Backbone& backbone() const { return backbone_; }
  const nlohmann::json& manifest() const { return manifest_; }

  std::size_t size() const { return manifest_.at("models").size(); }
  std::vector<int> ids() const;
  SourceModelRecord load(int id) const;
  std::vector<SourceModelRecord> load_all() const;

  /// Assigns the next id, writes the weights, then the manifest. Returns the id.
  int append(SourceModelRecord record);

 private:
  Pool() = default;
  void write_manifest() const;

  std::filesystem::path dir_;
  Backbone backbone_;
  nlohmann::json manifest_;
};

}  // namespace recycle
