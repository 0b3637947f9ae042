// SPDX-License-Identifier: Apache-2.0

#include "scope/artifacts.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "scope/hash.hpp"

namespace scope {

namespace {

constexpr const char* kMapHeader = "scope-map 1";
constexpr const char* kReportHeader = "scope-report 1";

std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) {
      out.emplace_back(text.substr(pos));
      break;
    }
    out.emplace_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  return out;
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::optional<std::uint64_t> parse_dec(std::string_view s) {
  if (s.empty() || s.size() > 20) return std::nullopt;
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::string contract_block(const ContractId& id) {
  std::string out = "contract-id " + hex64(id.hash) + "\n";
  for (const auto& line : split_lines(id.canonical)) out += "contract " + line + "\n";
  return out;
}

std::string policy_text(const PerturbationPolicy& p) {
  return std::string(to_string(p.mode)) + " " + to_string(p.replacement) + " " + to_string(p.rescoring);
}

std::string with_digest(std::string body) {
  body += "digest " + hex64(fnv1a(body)) + "\n";
  return body;
}

// Sequential reader over the lines of a digested document.
class Reader {
 public:
  Reader(std::string_view text, const char* header) {
    if (text.empty() || text.back() != '\n') throw FormatError(0, "document must end with a newline");
    lines_ = split_lines(text);
    if (lines_.empty() || lines_.front() != header) throw FormatError(1, std::string("expected '") + header + "'");
    const std::string& last = lines_.back();
    if (last.rfind("digest ", 0) != 0) throw FormatError(static_cast<int>(lines_.size()), "missing digest line");
    std::uint64_t want = 0;
    if (!parse_hex64(last.substr(7), want)) throw FormatError(static_cast<int>(lines_.size()), "bad digest");
    const std::string_view body = text.substr(0, text.size() - last.size() - 1);
    if (fnv1a(body) != want) throw FormatError(static_cast<int>(lines_.size()), "digest mismatch: content was modified");
    lines_.pop_back();
    i_ = 1;
  }

  bool done() const { return i_ >= lines_.size(); }
  int line_no() const { return static_cast<int>(i_) + 1; }
  const std::string& peek() const {
    if (done()) throw FormatError(line_no(), "unexpected end of document");
    return lines_[i_];
  }

  // The rest of the next line after "key ", or the empty string for a bare key.
  std::string expect(const std::string& key) {
    const std::string& line = peek();
    if (line == key) {
      ++i_;
      return {};
    }
    if (line.rfind(key + " ", 0) != 0) throw FormatError(line_no(), "expected '" + key + "'");
    ++i_;
    return line.substr(key.size() + 1);
  }

  bool next_is(const std::string& key) const { return !done() && (lines_[i_] == key || lines_[i_].rfind(key + " ", 0) == 0); }

  [[noreturn]] void fail(const std::string& message) const { throw FormatError(static_cast<int>(i_), message); }

  ContractId contract() {
    std::uint64_t hash = 0;
    if (!parse_hex64(expect("contract-id"), hash)) fail("bad contract id");
    std::string canonical;
    while (next_is("contract")) canonical += expect("contract") + "\n";
    ContractId id;
    try {
      id = canonical_id(parse_contract(canonical));
    } catch (const std::exception& e) {
      fail(std::string("bad contract: ") + e.what());
    }
    if (id.canonical != canonical || id.hash != hash) fail("contract text does not match its id");
    return id;
  }

  std::uint64_t hex(const std::string& key) {
    std::uint64_t v = 0;
    if (!parse_hex64(expect(key), v)) fail("bad hex value for " + key);
    return v;
  }

  std::uint64_t dec(const std::string& key) {
    auto v = parse_dec(expect(key));
    if (!v) fail("bad integer for " + key);
    return *v;
  }

  std::size_t index() const { return i_; }
  const std::vector<std::string>& lines() const { return lines_; }
  void skip_to(std::size_t i) { i_ = i; }

 private:
  std::vector<std::string> lines_;
  std::size_t i_ = 0;
};

PerturbationPolicy parse_policy(const Reader& r, const std::vector<std::string>& w, std::size_t from) {
  if (w.size() != from + 3) r.fail("expected mode, replacement and rescoring");
  auto m = parse_perturb_mode(w[from]);
  auto b = parse_baseline_kind(w[from + 1]);
  auto s = parse_rescoring(w[from + 2]);
  if (!m || !b || !s || w[from + 1] != to_string(*b)) r.fail("bad perturbation policy");
  return {*m, *b, *s};
}

AttributionMap read_map(Reader& r) {
  AttributionMap map;
  map.contract_id = r.contract();
  auto method = parse_method(r.expect("method"));
  if (!method) r.fail("bad method");
  map.method = *method;
  map.model_id = r.hex("model-id");
  map.instance_digest = r.hex("instance");
  map.seed = r.dec("seed");
  const auto n = r.dec("entries");
  if (n > r.lines().size()) r.fail("entry count exceeds the document");
  for (std::uint64_t k = 0; k < n; ++k) {
    const auto w = words(r.expect("entry"));
    if (w.size() != 2) r.fail("expected 'entry REF SCORE'");
    auto ref = parse_feature_ref(w[0]);
    if (!ref) r.fail("bad feature reference");
    std::optional<double> score;
    if (w[1] != "infeasible") {
      score = parse_double(w[1]);
      if (!score || format_double(*score) != w[1]) r.fail("bad score");
    }
    if (!map.entries.empty() && !(map.entries.back().ref < *ref)) r.fail("entries out of order");
    map.entries.push_back({*ref, score});
  }
  return map;
}

std::string map_body(const AttributionMap& map) {
  std::string out = std::string(kMapHeader) + "\n";
  out += contract_block(map.contract_id);
  out += "method " + describe(map.method) + "\n";
  out += "model-id " + hex64(map.model_id) + "\n";
  out += "instance " + hex64(map.instance_digest) + "\n";
  out += "seed " + std::to_string(map.seed) + "\n";
  out += "entries " + std::to_string(map.entries.size()) + "\n";
  for (const auto& e : map.entries) {
    out += "entry " + to_string(e.ref) + " " + (e.score ? format_double(*e.score) : std::string("infeasible")) + "\n";
  }
  return out;
}

std::string curve_text(const char* role, const FaithfulnessCurve& c) {
  std::string out = std::string("curve ") + role + " " + std::to_string(c.ordering_seed) + " " + policy_text(c.policy) + "\n";
  out += "order";
  for (const auto& r : c.order) out += " " + to_string(r);
  out += "\nscores";
  for (double s : c.scores) out += " " + format_double(s);
  return out + "\n";
}

std::string aopc_text(const char* name, const std::optional<double>& v) {
  return std::string("aopc ") + name + " " + (v ? format_double(*v) : std::string("none")) + "\n";
}

}  // namespace

FormatError::FormatError(int line, const std::string& message)
    : std::invalid_argument(line > 0 ? "line " + std::to_string(line) + ": " + message : message), line_(line) {}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

std::optional<double> parse_double(std::string_view text) {
  if (text.empty() || text.size() > 40) return std::nullopt;
  const std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::string serialize_map(const AttributionMap& map) { return with_digest(map_body(map)); }

AttributionMap parse_map(std::string_view text) {
  try {
    Reader r(text, kMapHeader);
    AttributionMap map = read_map(r);
    if (!r.done()) r.fail("unexpected trailing content");
    return map;
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(0, std::string("unreadable map: ") + e.what());
  }
}

std::string serialize_report(const FaithfulnessReport& rep) {
  std::string out = std::string(kReportHeader) + "\n";
  out += contract_block(rep.contract_id);
  out += "method " + describe(rep.method) + "\n";
  out += "policy " + policy_text(rep.policy) + "\n";
  out += "k " + std::to_string(rep.k) + "\n";
  out += "seed " + std::to_string(rep.seed) + "\n";
  out += "map-begin\n" + serialize_map(rep.map) + "map-end\n";
  if (rep.deletion) out += curve_text("deletion", *rep.deletion);
  if (rep.insertion) out += curve_text("insertion", *rep.insertion);
  for (const auto& c : rep.random_deletion) out += curve_text("random_deletion", c);
  for (const auto& c : rep.random_insertion) out += curve_text("random_insertion", c);
  out += aopc_text("deletion", rep.deletion_aopc);
  out += aopc_text("insertion", rep.insertion_aopc);
  out += aopc_text("random_deletion", rep.random_deletion_aopc);
  out += aopc_text("random_insertion", rep.random_insertion_aopc);
  return with_digest(out);
}

FaithfulnessReport parse_report(std::string_view text) {
  try {
    Reader r(text, kReportHeader);
    FaithfulnessReport rep;
    rep.contract_id = r.contract();
    auto method = parse_method(r.expect("method"));
    if (!method) r.fail("bad method");
    rep.method = *method;
    rep.policy = parse_policy(r, words(r.expect("policy")), 0);
    const auto k = r.dec("k");
    if (k > 1000000) r.fail("K out of range");
    rep.k = static_cast<int>(k);
    rep.seed = r.dec("seed");

    r.expect("map-begin");
    std::string map_text;
    while (!r.next_is("map-end")) {
      map_text += r.peek() + "\n";
      r.skip_to(r.index() + 1);
    }
    r.expect("map-end");
    try {
      rep.map = parse_map(map_text);
    } catch (const FormatError& e) {
      r.fail(std::string("embedded map: ") + e.what());
    }
    if (rep.map.contract_id != rep.contract_id) r.fail("map belongs to another contract");

    while (r.next_is("curve")) {
      const auto w = words(r.expect("curve"));
      if (w.size() != 5) r.fail("expected 'curve ROLE SEED MODE REPLACEMENT RESCORING'");
      FaithfulnessCurve c;
      const std::string& role = w[0];
      const bool random = role == "random_deletion" || role == "random_insertion";
      if (!random && role != "deletion" && role != "insertion") r.fail("unknown curve role");
      c.direction = role == "deletion" || role == "random_deletion" ? CurveDirection::deletion : CurveDirection::insertion;
      c.source = random ? OrderingSource::random : OrderingSource::map;
      auto seed = parse_dec(w[1]);
      if (!seed) r.fail("bad ordering seed");
      c.ordering_seed = *seed;
      c.policy = parse_policy(r, w, 2);
      for (const auto& s : words(r.expect("order"))) {
        auto ref = parse_feature_ref(s);
        if (!ref) r.fail("bad feature reference in order");
        c.order.push_back(*ref);
      }
      for (const auto& s : words(r.expect("scores"))) {
        auto v = parse_double(s);
        if (!v) r.fail("bad curve score");
        c.scores.push_back(*v);
      }
      if (c.scores.size() != c.order.size() + 1 || c.k() != rep.k) r.fail("curve length does not match K");
      if (role == "deletion") {
        if (rep.deletion) r.fail("second deletion curve");
        rep.deletion = c;
      } else if (role == "insertion") {
        if (rep.insertion) r.fail("second insertion curve");
        rep.insertion = c;
      } else {
        (role == "random_deletion" ? rep.random_deletion : rep.random_insertion).push_back(c);
      }
    }
    for (auto [name, slot] : {std::pair{"deletion", &rep.deletion_aopc}, std::pair{"insertion", &rep.insertion_aopc},
                              std::pair{"random_deletion", &rep.random_deletion_aopc},
                              std::pair{"random_insertion", &rep.random_insertion_aopc}}) {
      const auto w = words(r.expect("aopc"));
      if (w.size() != 2 || w[0] != name) r.fail(std::string("expected 'aopc ") + name + "'");
      if (w[1] != "none") {
        *slot = parse_double(w[1]);
        if (!*slot) r.fail("bad AOPC value");
      }
    }
    if (!r.done()) r.fail("unexpected trailing content");
    return rep;
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(0, std::string("unreadable report: ") + e.what());
  }
}

}  // namespace scope
