#include "vesselseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace vesselseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path suffixed(const fs::path& stem, const char* suffix) { return fs::path(stem.string() + suffix); }

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

}  // namespace

template <typename S>
void save_checkpoint(const fs::path& stem, const NamedTensors<S>& tensors, const json& extra) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  json manifest = extra;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["dtype"] = "float32";
  json entries = json::array();
  std::ofstream blob(suffixed(stem, ".bin"), std::ios::binary);
  if (!blob) throw Error("cannot write " + suffixed(stem, ".bin").string());
  std::int64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const auto& dims = t.shape().dims;
    entries.push_back({{"name", name}, {"shape", std::vector<Index>(dims.begin(), dims.end())}, {"offset", offset}});
    const Eigen::ArrayXf values = t.value().template cast<float>();
    blob.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
    offset += values.size() * 4;
  }
  manifest["parameters"] = entries;
  manifest["total_bytes"] = offset;
  std::ofstream mo(suffixed(stem, ".json"));
  mo << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const fs::path& stem) {
  std::ifstream mi(suffixed(stem, ".json"));
  if (!mi) throw FormatError("manifest", "cannot open " + suffixed(stem, ".json").string());
  Checkpoint ck;
  try {
    ck.manifest = json::parse(mi);
  } catch (const json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  if (!ck.manifest.contains("format_version") || ck.manifest["format_version"] != kCheckpointFormatVersion)
    throw FormatError("format_version", "unsupported checkpoint format version");
  std::ifstream bi(suffixed(stem, ".bin"), std::ios::binary);
  if (!bi) throw FormatError("blob", "cannot open " + suffixed(stem, ".bin").string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bi)), std::istreambuf_iterator<char>());
  for (const auto& e : ck.manifest.at("parameters")) {
    const auto dims = e.at("shape").get<std::vector<Index>>();
    if (dims.size() != 5) throw FormatError("shape", "expected 5 axes for " + e.at("name").get<std::string>());
    Shape shape(dims[0], dims[1], dims[2], dims[3], dims[4]);
    const auto offset = e.at("offset").get<std::int64_t>();
    const auto nbytes = shape.numel() * 4;
    if (offset < 0 || offset + nbytes > static_cast<std::int64_t>(bytes.size()))
      throw FormatError("offset", "tensor " + e.at("name").get<std::string>() + " exceeds blob");
    Eigen::ArrayXf values(shape.numel());
    std::memcpy(values.data(), bytes.data() + offset, static_cast<size_t>(nbytes));
    ck.tensors.emplace_back(e.at("name").get<std::string>(), Tensor<float>(shape, std::move(values)));
  }
  return ck;
}

template <typename S>
void assign_tensors(const Checkpoint& ckpt, NamedTensors<S>& into) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
  for (auto& [name, t] : into) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("parameters", "checkpoint lacks tensor " + name);
    if (!(it->second->shape() == t.shape()))
      throw FormatError("shape", "tensor " + name + " has shape " + it->second->shape().str() + ", expected " +
                                     t.shape().str());
    t.value() = it->second->value().template cast<S>();
  }
}

template void save_checkpoint(const fs::path&, const NamedTensors<float>&, const json&);
template void save_checkpoint(const fs::path&, const NamedTensors<double>&, const json&);
template void assign_tensors(const Checkpoint&, NamedTensors<float>&);
template void assign_tensors(const Checkpoint&, NamedTensors<double>&);

}  // namespace vesselseg
