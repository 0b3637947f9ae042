// SPDX-License-Identifier: Apache-2.0

#include "scope/vocab.hpp"

#include <set>
#include <stdexcept>

namespace scope {

Vocab::Vocab(std::vector<std::string> tokens, SpecialTokens special) : tokens_(std::move(tokens)), special_(special) {
  for (int i = 0; i < size(); ++i) {
    const auto& t = tokens_[static_cast<std::size_t>(i)];
    if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) {
      throw std::invalid_argument("vocab token " + std::to_string(i) + " is empty or contains whitespace");
    }
    if (!index_.emplace(t, i).second) throw std::invalid_argument("duplicate vocab token '" + t + "'");
  }
  const int ids[] = {special.pad, special.mask, special.sep, special.eos};
  std::set<int> distinct(std::begin(ids), std::end(ids));
  if (distinct.size() != 4) throw std::invalid_argument("special token indices must be distinct");
  for (int id : ids) {
    if (id < 0 || id >= size()) throw std::invalid_argument("special token index out of range");
  }
}

Vocab Vocab::with_specials(const std::vector<std::string>& ordinary) {
  std::vector<std::string> tokens = {"PAD", "MASK", "SEP", "EOS"};
  tokens.insert(tokens.end(), ordinary.begin(), ordinary.end());
  return Vocab(std::move(tokens), SpecialTokens{0, 1, 2, 3});
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocab");
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocab::id(std::string_view token) const {
  if (auto id = find(token)) return *id;
  throw std::invalid_argument("unknown token '" + std::string(token) + "'");
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t') ++j;
    if (j > i) out.push_back(id(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

}  // namespace scope
