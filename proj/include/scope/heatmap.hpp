// SPDX-License-Identifier: Apache-2.0
//
// Token heatmaps for attribution maps: a static HTML document and a plain-text
// rendering. Intensity is |score| / max |score| rounded to three decimals;
// held-fixed tokens are hatched and never colored, target tokens outlined.
// Stage maps render as bar lists.

#pragma once

#include <string>

#include "scope/attribution.hpp"

namespace scope {

struct Heatmap {
  std::string html;
  std::string text;
};

// Display intensity of every entry, in map order (0 for infeasible entries).
std::vector<double> display_intensities(const AttributionMap& map);

Heatmap render_heatmap(const AttributionMap& map, const PromptedInstance& instance, const AttributionContract& contract,
                       const Vocab& vocab);

}  // namespace scope
