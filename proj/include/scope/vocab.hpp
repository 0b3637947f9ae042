// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace scope {

struct SpecialTokens {
  int pad = 0;
  int mask = 1;
  int sep = 2;
  int eos = 3;
};

// Symbolic vocabulary. Text is tokenized on whitespace only.
class Vocab {
 public:
  Vocab() = default;
  Vocab(std::vector<std::string> tokens, SpecialTokens special);

  // PAD, MASK, SEP, EOS at indices 0..3 followed by `ordinary`.
  static Vocab with_specials(const std::vector<std::string>& ordinary);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  const SpecialTokens& special() const { return special_; }
  int pad() const { return special_.pad; }
  int mask() const { return special_.mask; }
  int sep() const { return special_.sep; }
  int eos() const { return special_.eos; }

  std::optional<int> find(std::string_view token) const;
  int id(std::string_view token) const;  // throws std::invalid_argument for unknown tokens
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  bool operator==(const Vocab& other) const {
    return tokens_ == other.tokens_ && special_.pad == other.special_.pad && special_.mask == other.special_.mask &&
           special_.sep == other.special_.sep && special_.eos == other.special_.eos;
  }

 private:
  std::vector<std::string> tokens_;
  SpecialTokens special_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace scope
