#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <zlib.h>

#include "instructdiff/error.hpp"
#include "instructdiff/trainer.hpp"

namespace instructdiff {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host order");

namespace {

constexpr char kMagic[8] = {'I', 'D', 'C', 'K', 'P', 'T', '0', '1'};

std::uint32_t crc_of(const float* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n * sizeof(float))));
}

struct Section {
  const char* name;
  const ParameterSet<float>* set;
};

std::size_t shape_count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace

void require_layout(const ParameterSet<float>& params, const BackboneConfig& config) {
  std::vector<std::string> missing, unexpected, mismatched;
  std::set<std::string> expected;
  for (const auto& spec : parameter_layout(config)) {
    expected.insert(spec.path);
    if (!params.contains(spec.path)) {
      missing.push_back(spec.path);
    } else if (params.entry(spec.path).shape != spec.shape) {
      mismatched.push_back(spec.path);
    }
  }
  for (const auto& path : params.paths())
    if (!expected.count(path)) unexpected.push_back(path);
  if (missing.empty() && unexpected.empty() && mismatched.empty()) return;
  std::string msg = "parameter layout does not match the backbone config";
  const auto list = [&](const char* label, const std::vector<std::string>& v) {
    if (v.empty()) return;
    msg += std::string("; ") + label + " (" + std::to_string(v.size()) + "):";
    for (const auto& p : v) msg += " " + p;
  };
  list("missing", missing);
  list("unexpected", unexpected);
  list("shape mismatch", mismatched);
  throw ValidationError(msg);
}

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ckpt) {
  ordered_json manifest;
  manifest["format"] = "instructdiff-checkpoint";
  manifest["schema_version"] = ckpt.schema_version;
  manifest["step"] = ckpt.step;
  manifest["backbone"] = to_json(ckpt.backbone);
  manifest["config"] = ckpt.config;
  manifest["optimizer"] = {{"kind", std::string(to_string(ckpt.optimizer.kind))}, {"updates", ckpt.optimizer.updates}};
  ordered_json tensors = ordered_json::array();
  const Section sections[] = {{"params", &ckpt.params}, {"ema", &ckpt.ema}, {"optimizer", &ckpt.optimizer.slots}};
  std::size_t offset = 0;
  for (const auto& s : sections) {
    for (const auto& [path, e] : s.set->entries()) {
      tensors.push_back({{"section", s.name},
                         {"path", path},
                         {"shape", e.shape},
                         {"offset", offset},
                         {"count", e.values.size()},
                         {"crc32", crc_of(e.values.data(), e.values.size())}});
      offset += e.values.size();
    }
  }
  manifest["tensors"] = tensors;
  const std::string text = manifest.dump();

  std::vector<unsigned char> out(sizeof kMagic + 8 + text.size() + offset * sizeof(float));
  unsigned char* p = out.data();
  std::memcpy(p, kMagic, sizeof kMagic);
  p += sizeof kMagic;
  const std::uint64_t len = text.size();
  std::memcpy(p, &len, 8);
  p += 8;
  std::memcpy(p, text.data(), text.size());
  p += text.size();
  for (const auto& s : sections) {
    for (const auto& [path, e] : s.set->entries()) {
      std::memcpy(p, e.values.data(), e.values.size() * sizeof(float));
      p += e.values.size() * sizeof(float);
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw ValidationError("not a checkpoint file (bad magic)");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof kMagic, 8);
  const std::size_t header = sizeof kMagic + 8;
  if (len > bytes.size() - header) throw ValidationError("checkpoint truncated inside the manifest");
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(header + len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.schema_version = manifest.at("schema_version").get<int>();
    if (ck.schema_version != kCheckpointSchema) {
      throw ValidationError("checkpoint schema version " + std::to_string(ck.schema_version) + ", expected " +
                            std::to_string(kCheckpointSchema));
    }
    ck.step = manifest.at("step").get<std::int64_t>();
    ck.backbone = backbone_config_from_json(nlohmann::json::parse(manifest.at("backbone").dump()));
    ck.config = manifest.at("config");
    const auto& opt = manifest.at("optimizer");
    const auto kind = opt.at("kind").get<std::string>();
    if (kind != "adam" && kind != "adafactor") throw ValidationError("unknown optimizer kind '" + kind + "'");
    ck.optimizer.kind = kind == "adam" ? OptimizerKind::kAdam : OptimizerKind::kAdafactor;
    ck.optimizer.updates = opt.at("updates").get<std::int64_t>();

    const unsigned char* payload = bytes.data() + header + len;
    const std::size_t payload_floats = (bytes.size() - header - len) / sizeof(float);
    for (const auto& t : manifest.at("tensors")) {
      const auto section = t.at("section").get<std::string>();
      const auto path = t.at("path").get<std::string>();
      const auto shape = t.at("shape").get<std::vector<int>>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      const std::string where = section + "/" + path;
      if (shape_count(shape) != count) throw ValidationError("checkpoint tensor " + where + ": shape does not match count");
      if (offset > payload_floats || count > payload_floats - offset) {
        throw ValidationError("checkpoint truncated: tensor " + where + " runs past the end of the file");
      }
      std::vector<float> values(count);
      std::memcpy(values.data(), payload + offset * sizeof(float), count * sizeof(float));
      if (crc_of(values.data(), count) != t.at("crc32").get<std::uint32_t>()) {
        throw ValidationError("checkpoint checksum mismatch in tensor " + where);
      }
      ParameterSet<float>* dst = section == "params" ? &ck.params
                                 : section == "ema"  ? &ck.ema
                                 : section == "optimizer" ? &ck.optimizer.slots
                                                         : nullptr;
      if (!dst) throw ValidationError("checkpoint has unknown section '" + section + "'");
      dst->add(path, shape, std::move(values));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint manifest: ") + e.what());
  }
  require_layout(ck.params, ck.backbone);
  if (!ck.ema.same_layout(ck.params)) throw ValidationError("checkpoint EMA paths differ from the live parameters");
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace instructdiff
