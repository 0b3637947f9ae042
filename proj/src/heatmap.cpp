// SPDX-License-Identifier: Apache-2.0

#include "scope/heatmap.hpp"

#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include "scope/hash.hpp"

namespace scope {

namespace {

struct Cell {
  std::string token;
  std::optional<FeatureRef> ref;
  bool fixed = false;
  bool target = false;
  bool scored = false;
  double intensity = 0.0;
  int sign = 0;
};

std::string escape_html(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::vector<Cell> token_cells(const AttributionMap& map, const PromptedInstance& in, const AttributionContract& c,
                              const Vocab& vocab) {
  std::vector<Cell> cells;
  auto name = [&](int id) { return id >= 0 && id < vocab.size() ? vocab.token(id) : std::string("?"); };
  for (int i = 0; i < static_cast<int>(in.prompt.size()); ++i) {
    cells.push_back({name(in.prompt[static_cast<std::size_t>(i)]), FeatureRef::prompt(i)});
  }
  const int t = c.target.index;
  if (in.generation) {
    const auto& y = *in.generation;
    for (int j = 0; j < static_cast<int>(y.size()); ++j) {
      Cell cell{name(y[static_cast<std::size_t>(j)]), FeatureRef::prefix(j)};
      cell.target = (c.target.kind == TargetKind::token && j == t - 1) || (c.target.kind == TargetKind::span && j < t);
      cells.push_back(cell);
    }
  } else if (in.trajectory) {
    const auto& tr = *in.trajectory;
    const auto& last = tr.states().back();
    for (int i = 0; i < tr.response_len(); ++i) {
      const Slot& s = last[static_cast<std::size_t>(i)];
      Cell cell{name(s.token), FeatureRef::state(s.committed_at, i)};
      cell.target = c.target.kind == TargetKind::final_output ||
                    (c.target.kind == TargetKind::state && s.committed_at == t);
      cells.push_back(cell);
    }
  } else if (in.class_target) {
    Cell cell{"class " + std::to_string(*in.class_target), std::nullopt};
    cell.target = true;
    cells.push_back(cell);
  }
  const auto intensity = display_intensities(map);
  for (auto& cell : cells) {
    if (!cell.ref) continue;
    cell.fixed = c.held_fixed.count(*cell.ref) > 0;
    for (std::size_t k = 0; k < map.entries.size(); ++k) {
      if (map.entries[k].ref == *cell.ref && map.entries[k].score && !cell.fixed) {
        cell.scored = true;
        cell.intensity = intensity[k];
        cell.sign = *map.entries[k].score > 0 ? 1 : *map.entries[k].score < 0 ? -1 : 0;
      }
    }
  }
  return cells;
}

std::string header_text(const AttributionMap& map) {
  return "contract " + hex64(map.contract_id.hash) + "  method " + describe(map.method) + "  model " +
         hex64(map.model_id) + "\n";
}

std::string bar(double intensity, char c) {
  return std::string(static_cast<std::size_t>(std::lround(intensity * 20.0)), c);
}

const char* kStyle =
    "body{font-family:sans-serif;margin:2em}"
    ".tok{display:inline-block;font-family:monospace;padding:3px 5px;margin:2px;border:2px solid transparent}"
    ".fixed{background:repeating-linear-gradient(45deg,#bbb 0 3px,#eee 3px 7px);color:#555}"
    ".target{border-color:#000}"
    ".stage{font-family:monospace;margin:2px 0}"
    ".bar{display:inline-block;height:0.9em;background:#c41e1e;vertical-align:middle}"
    ".neg{background:#1e50c4}"
    ".meta{color:#444;font-size:90%}";

}  // namespace

std::vector<double> display_intensities(const AttributionMap& map) {
  double hi = 0.0;
  for (const auto& e : map.entries) {
    if (e.score) hi = std::max(hi, std::abs(*e.score));
  }
  std::vector<double> out;
  for (const auto& e : map.entries) {
    out.push_back(hi > 0.0 && e.score ? std::round(std::abs(*e.score) / hi * 1000.0) / 1000.0 : 0.0);
  }
  return out;
}

Heatmap render_heatmap(const AttributionMap& map, const PromptedInstance& instance, const AttributionContract& contract,
                       const Vocab& vocab) {
  Heatmap h;
  const std::string head = header_text(map);
  h.html = "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>attribution map</title><style>" +
           std::string(kStyle) + "</style></head><body>\n<p class=\"meta\">" + escape_html(head) + "</p>\n";
  h.text = head;

  const bool stages = !map.entries.empty() && map.entries.front().ref.kind == FeatureKind::stage;
  if (stages) {
    const auto intensity = display_intensities(map);
    h.html += "<div class=\"stages\">\n";
    for (std::size_t k = 0; k < map.entries.size(); ++k) {
      const auto& e = map.entries[k];
      const std::string ref = to_string(e.ref);
      if (!e.score) {
        h.html += "<div class=\"stage\">" + ref + " infeasible</div>\n";
        h.text += ref + "  infeasible\n";
        continue;
      }
      const bool neg = *e.score < 0;
      h.html += "<div class=\"stage\">" + ref + " " + fixed3(intensity[k]) + " <span class=\"bar" +
                (neg ? " neg" : "") + "\" style=\"width:" + fixed3(intensity[k] * 20.0) + "em\"></span></div>\n";
      h.text += ref + "  " + (neg ? "-" : "+") + " " + fixed3(intensity[k]) + "  " + bar(intensity[k], '#') + "\n";
    }
    h.html += "</div>\n</body></html>\n";
    return h;
  }

  h.html += "<div class=\"seq\">";
  std::ostringstream text;
  text << std::left << std::setw(12) << "feature" << std::setw(10) << "token" << std::setw(14) << "role"
       << std::setw(10) << "intensity"
       << "bar\n";
  for (const auto& cell : token_cells(map, instance, contract, vocab)) {
    std::string cls = "tok";
    if (cell.fixed) cls += " fixed";
    if (cell.target) cls += " target";
    std::string style;
    if (cell.scored) {
      style = std::string(" style=\"background:rgba(") + (cell.sign < 0 ? "30,80,196," : "196,30,30,") +
              fixed3(cell.intensity) + ")\"";
    }
    const std::string ref = cell.ref ? to_string(*cell.ref) : "-";
    h.html += "<span class=\"" + cls + "\" data-ref=\"" + ref + "\"" + style + ">" + escape_html(cell.token) + "</span>";

    std::string role = cell.fixed ? "fixed" : cell.scored ? "eligible" : "";
    if (cell.target) role += role.empty() ? "target" : "+target";
    if (role.empty()) role = "-";
    std::string shade = cell.fixed ? std::string(20, '/') : cell.scored ? bar(cell.intensity, cell.sign < 0 ? '=' : '#') : "";
    text << std::setw(12) << ref << std::setw(10) << (cell.target ? "[" + cell.token + "]" : cell.token)
         << std::setw(14) << role << std::setw(10) << (cell.scored ? fixed3(cell.intensity) : "-") << shade << "\n";
  }
  h.html += "</div>\n</body></html>\n";
  std::string body = text.str();
  // Trailing spaces from column padding are not part of the rendering.
  std::string trimmed;
  std::istringstream lines(body);
  for (std::string line; std::getline(lines, line);) {
    line.erase(line.find_last_not_of(' ') + 1);
    trimmed += line + "\n";
  }
  h.text += trimmed;
  return h;
}

}  // namespace scope
