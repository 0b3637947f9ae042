// SPDX-License-Identifier: Apache-2.0
//
// Self-describing binary model files:
//
//   "SCOPEMDL" | u32 version | u64 model_id | u32 header_len | header text
//   | u64 value_count | value_count little-endian f64 weights in layout order
//
// Loading recomputes the model id and rejects the file if it differs.

#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "scope/model.hpp"

namespace scope {

class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string serialize_model(const ModelParams& params);
ModelParams parse_model(const std::string& bytes);

void save_model(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_model(const std::filesystem::path& path);

}  // namespace scope
