#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vesselseg/tensor.hpp"

namespace vesselseg {

inline constexpr int kCheckpointFormatVersion = 1;

template <typename S>
using NamedTensors = std::vector<std::pair<std::string, Tensor<S>>>;

/// Writes `<stem>.bin` (little-endian float32 values of every tensor, back to
/// back) and `<stem>.json` (format_version, per-tensor name/shape/byte offset,
/// plus any caller-supplied `extra` keys).
template <typename S>
void save_checkpoint(const std::filesystem::path& stem, const NamedTensors<S>& tensors,
                     const nlohmann::json& extra = nlohmann::json::object());

struct Checkpoint {
  nlohmann::json manifest;
  NamedTensors<float> tensors;
};

/// Reads a checkpoint; rejects unknown format versions and inconsistent blobs.
Checkpoint load_checkpoint(const std::filesystem::path& stem);

/// Copies checkpoint values into same-named, same-shaped tensors.
template <typename S>
void assign_tensors(const Checkpoint& ckpt, NamedTensors<S>& into);

}  // namespace vesselseg
