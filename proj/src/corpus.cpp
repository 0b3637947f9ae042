// SPDX-License-Identifier: Apache-2.0

#include "scope/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "scope/rng.hpp"

namespace scope {

namespace {

constexpr int kMaxVocab = 4096;

Example sentence_example(const Vocab& v, const std::vector<int>& lexemes) {
  Example ex;
  ex.prompt.push_back(v.id("TR:"));
  for (int i : lexemes) ex.prompt.push_back(syn_source_id(v, i));
  ex.prompt.push_back(v.sep());
  for (int i : lexemes) ex.response.push_back(syn_target_id(v, i));
  ex.response.push_back(v.eos());
  return ex;
}

}  // namespace

Vocab syn_vocab(int k) {
  if (k < 2) throw std::invalid_argument("syn corpus needs K >= 2");
  if (5 + 2 * static_cast<long>(k) > kMaxVocab) {
    throw std::invalid_argument("vocab budget exceeded: K=" + std::to_string(k) + " needs more than " +
                                std::to_string(kMaxVocab) + " tokens");
  }
  std::vector<std::string> ordinary{"TR:"};
  for (int i = 1; i <= k; ++i) ordinary.push_back("s" + std::to_string(i));
  for (int i = 1; i <= k; ++i) ordinary.push_back("t" + std::to_string(i));
  return Vocab::with_specials(ordinary);
}

int syn_source_id(const Vocab& vocab, int i) { return vocab.id("s" + std::to_string(i)); }
int syn_target_id(const Vocab& vocab, int i) { return vocab.id("t" + std::to_string(i)); }

int syn_translate(const Vocab& vocab, int source_id) {
  if (source_id < 0 || source_id >= vocab.size()) return -1;
  const std::string& tok = vocab.token(source_id);
  if (tok.size() < 2 || tok[0] != 's') return -1;
  auto id = vocab.find("t" + tok.substr(1));
  return id ? *id : -1;
}

SynCorpus make_syn_corpus(int k, int min_len, int max_len, int n_pairs, std::uint64_t seed, double heldout_fraction) {
  SynCorpus c;
  c.k = k;
  c.seed = seed;
  c.vocab = syn_vocab(k);
  if (min_len < 1 || max_len < min_len || max_len > k) {
    throw std::invalid_argument("sentence lengths must satisfy 1 <= min <= max <= K");
  }
  if (n_pairs < 0) throw std::invalid_argument("negative pair count");
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw std::invalid_argument("held-out fraction outside [0, 1)");

  Rng rng(derive_seed(seed, 1));
  std::vector<int> lexicon(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) lexicon[static_cast<std::size_t>(i)] = i + 1;
  std::vector<std::vector<int>> draws;
  for (int n = 0; n < n_pairs; ++n) {
    const int len = min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len - min_len + 1)));
    std::vector<int> pick = lexicon;
    rng.shuffle(pick);
    pick.resize(static_cast<std::size_t>(len));
    draws.push_back(std::move(pick));
  }

  std::set<std::vector<int>> distinct(draws.begin(), draws.end());
  std::vector<std::vector<int>> types(distinct.begin(), distinct.end());
  Rng split(derive_seed(seed, 2));
  split.shuffle(types);
  const auto n_held = static_cast<std::size_t>(std::floor(heldout_fraction * static_cast<double>(types.size())));
  const std::set<std::vector<int>> held(types.begin(), types.begin() + static_cast<std::ptrdiff_t>(n_held));
  for (const auto& s : types) {
    if (held.count(s)) c.heldout.push_back(sentence_example(c.vocab, s));
  }
  for (const auto& s : draws) {
    if (!held.count(s)) c.train.push_back(sentence_example(c.vocab, s));
  }
  return c;
}

std::string serialize_corpus(const SynCorpus& c) {
  std::string out = "scope-syn-corpus 1\nk " + std::to_string(c.k) + "\nseed " + std::to_string(c.seed) + "\n";
  auto line = [&](const char* split, const Example& ex) {
    out += std::string(split) + "\t" + c.vocab.decode(ex.prompt) + "\t" + c.vocab.decode(ex.response) + "\n";
  };
  for (const auto& ex : c.train) line("train", ex);
  for (const auto& ex : c.heldout) line("heldout", ex);
  return out;
}

SynCorpus parse_corpus(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  auto need = [&](const std::string& prefix) {
    if (!std::getline(in, line) || line.rfind(prefix, 0) != 0) throw std::invalid_argument("corpus: expected '" + prefix + "'");
    return line.substr(prefix.size());
  };
  if (need("scope-syn-corpus 1") != "") throw std::invalid_argument("corpus: bad header");
  SynCorpus c;
  try {
    c.k = std::stoi(need("k "));
    c.seed = std::stoull(need("seed "));
  } catch (const std::logic_error&) {
    throw std::invalid_argument("corpus: bad k or seed");
  }
  c.vocab = syn_vocab(c.k);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos) throw std::invalid_argument("corpus: expected 'split<TAB>prompt<TAB>response'");
    Example ex;
    ex.prompt = c.vocab.encode(line.substr(a + 1, b - a - 1));
    ex.response = c.vocab.encode(line.substr(b + 1));
    const std::string split = line.substr(0, a);
    if (split == "train") {
      c.train.push_back(std::move(ex));
    } else if (split == "heldout") {
      c.heldout.push_back(std::move(ex));
    } else {
      throw std::invalid_argument("corpus: unknown split '" + split + "'");
    }
  }
  return c;
}

}  // namespace scope
