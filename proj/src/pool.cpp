#include "recycle/pool.hpp"

#include "recycle/blob_io.hpp"

namespace recycle {

namespace fs = std::filesystem;

namespace {

constexpr int kFormat = 1;

std::string model_file(int id) { return "model_" + std::to_string(id) + ".bin"; }

}  // namespace

Pool Pool::create(const fs::path& dir, const Backbone& backbone, bool force) {
  if (fs::exists(dir / "manifest.json") && !force)
    throw ValidationError("pool " + dir.string() + " already exists (use --force to replace it)");
  if (force && fs::exists(dir)) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      const std::string name = entry.path().filename().string();
      if (name == "manifest.json" || name == "backbone.bin" || (name.rfind("model_", 0) == 0 && entry.path().extension() == ".bin"))
        fs::remove(entry.path());
    }
  }
  fs::create_directories(dir);
  Pool pool;
  pool.dir_ = dir;
  pool.backbone_ = backbone;
  const auto index = write_blob_file(dir / "backbone.bin", backbone_params(backbone));
  pool.manifest_ = {{"format", kFormat},
                    {"backbone",
                     {{"config", backbone.config},
                      {"file", "backbone.bin"},
                      {"hash", backbone_hash(backbone)},
                      {"index", blob_index_to_json(index)}}},
                    {"models", nlohmann::json::array()}};
  pool.write_manifest();
  return pool;
}

Pool Pool::open(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw ValidationError("no pool manifest at " + manifest_path.string());
  Pool pool;
  pool.dir_ = dir;
  pool.manifest_ = nlohmann::json::parse(read_file(manifest_path));
  if (pool.manifest_.value("format", 0) != kFormat) throw ValidationError("unsupported pool format in " + manifest_path.string());
  const auto& bb = pool.manifest_.at("backbone");
  const BackboneConfig config = bb.at("config").get<BackboneConfig>();
  pool.backbone_ =
      backbone_from_params(config, read_blob_file(dir / bb.at("file").get<std::string>(), blob_index_from_json(bb.at("index"))));
  if (backbone_hash(pool.backbone_) != bb.at("hash").get<std::uint64_t>())
    throw ValidationError("pool backbone hash does not match the manifest");
  return pool;
}

std::vector<int> Pool::ids() const {
  std::vector<int> out;
  for (const auto& m : manifest_.at("models")) out.push_back(m.at("id").get<int>());
  return out;
}

SourceModelRecord Pool::load(int id) const {
  for (const auto& m : manifest_.at("models")) {
    if (m.at("id").get<int>() != id) continue;
    SourceModelRecord rec;
    rec.id = id;
    rec.task_id = m.at("task_id").get<std::string>();
    rec.family = m.at("family").get<std::string>();
    rec.classes = m.at("classes").get<std::vector<int>>();
    rec.eft = EftConfig{m.at("eft").at("a").get<std::size_t>(), m.at("eft").at("b").get<std::size_t>(),
                        m.at("eft").at("gamma").get<int>()};
    rec.feature_dim = m.at("feature_dim").get<std::size_t>();
    rec.val_accuracy = m.at("val_accuracy").get<double>();
    rec.set_params(read_blob_file(dir_ / m.at("file").get<std::string>(), blob_index_from_json(m.at("index"))));
    rec.validate(backbone_.config);
    return rec;
  }
  throw ValidationError("pool has no model with id " + std::to_string(id));
}

std::vector<SourceModelRecord> Pool::load_all() const {
  std::vector<SourceModelRecord> out;
  for (int id : ids()) out.push_back(load(id));
  return out;
}

int Pool::append(SourceModelRecord record) {
  int next = 0;
  for (int id : ids()) next = std::max(next, id + 1);
  record.id = next;
  record.validate(backbone_.config);
  const std::string file = model_file(next);
  if (fs::exists(dir_ / file)) throw std::runtime_error("pool: refusing to overwrite " + (dir_ / file).string());
  const auto index = write_blob_file(dir_ / file, record.params());
  manifest_.at("models").push_back({{"id", next},
                                    {"task_id", record.task_id},
                                    {"family", record.family},
                                    {"classes", record.classes},
                                    {"num_classes", record.num_classes()},
                                    {"feature_dim", record.feature_dim},
                                    {"eft", {{"a", record.eft.a}, {"b", record.eft.b}, {"gamma", record.eft.gamma}}},
                                    {"val_accuracy", record.val_accuracy},
                                    {"file", file},
                                    {"hash", file_hash(dir_ / file)},
                                    {"index", blob_index_to_json(index)}});
  write_manifest();
  return next;
}

void Pool::write_manifest() const { write_file_atomic(dir_ / "manifest.json", manifest_.dump(2) + "\n"); }

}  // namespace recycle
