// SPDX-License-Identifier: Apache-2.0
//
// Text formats for attribution maps and faithfulness reports. Numbers are
// hex floats, so round trips are exact; the last line is an FNV-1a digest of
// everything above it.

#pragma once

#include <optional>
#include <string>

#include "scope/evaluation.hpp"

namespace scope {

class FormatError : public std::invalid_argument {
 public:
  FormatError(int line, const std::string& message);
  int line() const { return line_; }

 private:
  int line_;
};

std::string format_double(double v);
std::optional<double> parse_double(std::string_view text);  // finite values only

std::string serialize_map(const AttributionMap& map);
// Throws FormatError and nothing else.
AttributionMap parse_map(std::string_view text);

std::string serialize_report(const FaithfulnessReport& report);
// Throws FormatError and nothing else.
FaithfulnessReport parse_report(std::string_view text);

}  // namespace scope
