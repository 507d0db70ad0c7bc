#pragma once

#include <optional>
#include <string>
#include <vector>

#include "swm/tensor.hpp"

namespace swm {

struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Action-word vocabulary. Token ids are verbs first, then prepositions,
/// both in stored order; id -1 means "no token" (zero embedding slot).
struct Lexicon {
  std::vector<std::string> verbs;
  std::vector<std::string> prepositions;
  int n_max = 2;
  int embed_dim = 64;
  uint64_t seed = 0;

  bool is_verb(const std::string& tok) const;
  bool is_prep(const std::string& tok) const;
  int64_t token_id(const std::string& tok) const;  // -1 if absent
  const std::string& token_name(int64_t id) const;
  int64_t vocab_size() const { return static_cast<int64_t>(verbs.size() + prepositions.size()); }

  std::string to_json() const;
  static Lexicon from_json(const std::string& text);
  void save(const std::string& path) const;
  static Lexicon load(const std::string& path);
};

Lexicon build_lexicon(const std::vector<std::string>& corpus,
                      const std::vector<std::string>& verb_list,
                      const std::vector<std::string>& prep_list);

/// Trie over action-word sequences; layer parity alternates verb/preposition.
struct ActionTree {
  struct Node {
    std::string token;
    int layer = -1;  // root is -1; even layers verbs, odd prepositions
    std::vector<int> children;
  };
  std::vector<Node> nodes;  // nodes[0] is the root sentinel

  ActionTree() { nodes.push_back({}); }
  int node_count() const { return static_cast<int>(nodes.size()); }
  int find_child(int node, const std::string& token) const;
};

ActionTree build_tree(const std::vector<std::string>& corpus, const Lexicon& lexicon);

struct ActionPair {
  std::string verb;
  std::string prep;  // empty means none
};

struct ActionSequence {
  std::vector<ActionPair> pairs;
  size_t n() const { return pairs.size(); }
};

/// Lowercased whitespace tokens of `text` that are lexicon action words, in order.
std::vector<std::string> extract_action_words(const std::string& text, const Lexicon& lexicon);

ActionSequence parse_instruction(const std::string& instruction, const ActionTree& tree,
                                 const Lexicon& lexicon);

/// One clause per (verb, prep) pair, split at verb boundaries.
std::vector<std::string> decompose_primitives(const std::string& instruction,
                                              const Lexicon& lexicon);

/// Deterministic per-token embedding vectors (CLIP stand-in; also the init
/// values of the trainable text table).
struct EmbeddingTable {
  int dim = 64;
  Tensor table;  // [vocab, dim]
  Lexicon lexicon;

  static EmbeddingTable create(const Lexicon& lexicon, int dim, uint64_t seed);
  static Tensor init_rows(const Lexicon& lexicon, int dim, uint64_t seed);
};

/// Fixed-width slot layout [2*n_max, d]: verb_i at slot 2i, prep_i at 2i+1,
/// absent tokens and unused slots are zero rows.
Tensor embed_instruction(const ActionSequence& seq, const EmbeddingTable& table, int n_max);

/// Slot token ids for the same layout (-1 for zero slots); feeds the trainable
/// table lookup during training.
std::vector<int64_t> slot_token_ids(const ActionSequence& seq, const Lexicon& lexicon, int n_max);

/// Largest pair count over the corpus.
int corpus_n_max(const std::vector<std::string>& corpus, const ActionTree& tree,
                 const Lexicon& lexicon);

}  // namespace swm
