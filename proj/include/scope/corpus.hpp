// SPDX-License-Identifier: Apache-2.0
//
// Synthetic translation corpus: a lexicon s_i <-> t_i, prompts
// "TR: s_a s_b ... SEP" and responses "t_a t_b ... EOS". Tokens within one
// sentence are distinct, so every target position has exactly one aligned
// source token.

#pragma once

#include <string>
#include <vector>

#include "scope/train.hpp"

namespace scope {

struct SynCorpus {
  int k = 0;
  std::uint64_t seed = 0;
  Vocab vocab;
  std::vector<Example> train;
  std::vector<Example> heldout;  // sentences that never occur in `train`

  bool operator==(const SynCorpus&) const = default;
};

// PAD MASK SEP EOS, then "TR:", s1..sK, t1..tK.
Vocab syn_vocab(int k);
int syn_source_id(const Vocab& vocab, int i);  // s_i, 1-based
int syn_target_id(const Vocab& vocab, int i);  // t_i, 1-based
// t_i for a source token s_i, or -1 for anything else.
int syn_translate(const Vocab& vocab, int source_id);

// Draws `n_pairs` sentences with lengths uniform in [min_len, max_len]; a
// `heldout_fraction` of the distinct sentences (chosen by seed) goes to the
// held-out split. Throws std::invalid_argument for K < 2, bad lengths or a
// vocabulary over 4096 tokens.
SynCorpus make_syn_corpus(int k, int min_len, int max_len, int n_pairs, std::uint64_t seed,
                          double heldout_fraction = 0.2);

std::string serialize_corpus(const SynCorpus& corpus);
// Throws std::invalid_argument on malformed input.
SynCorpus parse_corpus(std::string_view text);

}  // namespace scope
