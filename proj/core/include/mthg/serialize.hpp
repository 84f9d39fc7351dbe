#pragma once

#include <filesystem>

#include "mthg/links.hpp"

namespace mthg {

// Versioned binary container shared by link and ensemble models: magic
// "HGM1", little-endian u32 version, length-prefixed kind tag and
// hyperparameter JSON, the channel-order list, then the parameter array as
// little-endian 64-bit floats.
void save_model(const std::filesystem::path& path, const ModelBlob& blob);
ModelBlob load_model(const std::filesystem::path& path);

}  // namespace mthg
