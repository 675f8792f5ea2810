#pragma once

#include "detkd/tensor.hpp"

#include <string>
#include <vector>

namespace detkd {

/// Versioned JSON parameter checkpoint:
///   {"format_version": 1, "params": {name: {"shape": [...], "data": [...]}}}
std::string checkpoint_to_json(const std::vector<const Param*>& params);
void checkpoint_save(const std::string& path, const std::vector<const Param*>& params);

/// Loads into the given params by name; every name must be present with a
/// matching shape, and the file must not contain extra params.
void checkpoint_load_json(const std::string& text, const std::vector<Param*>& params);
void checkpoint_load(const std::string& path, const std::vector<Param*>& params);

}  // namespace detkd
