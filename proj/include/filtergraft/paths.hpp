#pragma once

#include <filesystem>

namespace fg {

// FILTERGRAFT_CONFIGS, else ./configs when present, else the configs/ tree of
// the source checkout this binary was built from.
std::filesystem::path default_config_root();

// FILTERGRAFT_DATA, else ./data.
std::filesystem::path default_data_root();

}  // namespace fg
