#include "swm/action_tree.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace swm {

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) out.push_back(lower(w));
  return out;
}

// Walks the action-word sequence of `instruction`, enforcing the alternation
// invariant, and hands each token to `step(token, is_verb)`.
template <typename Fn>
void walk_action_words(const std::string& instruction, const Lexicon& lex, Fn&& step) {
  int layer = 0;  // parity of the next expected token: even verb, odd prep
  bool seen_verb = false;
  for (const auto& tok : tokenize(instruction)) {
    bool v = lex.is_verb(tok);
    bool p = lex.is_prep(tok);
    if (!v && !p) continue;
    if (p && !seen_verb)
      throw ParseError("preposition '" + tok + "' before any verb in: " + instruction);
    if (v && layer % 2 != 0)
      throw ParseError("verb '" + tok + "' where a preposition is expected in: " +
                       instruction);
    if (p && layer % 2 == 0)
      throw ParseError("preposition '" + tok + "' where a verb is expected in: " +
                       instruction);
    step(tok, v);
    seen_verb = true;
    ++layer;
  }
  if (!seen_verb) throw ParseError("no lexicon verb in: " + instruction);
}

}  // namespace

bool Lexicon::is_verb(const std::string& tok) const {
  return std::find(verbs.begin(), verbs.end(), tok) != verbs.end();
}

bool Lexicon::is_prep(const std::string& tok) const {
  return std::find(prepositions.begin(), prepositions.end(), tok) != prepositions.end();
}

int64_t Lexicon::token_id(const std::string& tok) const {
  for (size_t i = 0; i < verbs.size(); ++i)
    if (verbs[i] == tok) return static_cast<int64_t>(i);
  for (size_t i = 0; i < prepositions.size(); ++i)
    if (prepositions[i] == tok) return static_cast<int64_t>(verbs.size() + i);
  return -1;
}

const std::string& Lexicon::token_name(int64_t id) const {
  if (id < 0 || id >= vocab_size()) throw ValueError("token id out of range");
  size_t u = static_cast<size_t>(id);
  return u < verbs.size() ? verbs[u] : prepositions[u - verbs.size()];
}

std::string Lexicon::to_json() const {
  nlohmann::json j;
  j["verbs"] = verbs;
  j["prepositions"] = prepositions;
  j["n_max"] = n_max;
  j["embed_dim"] = embed_dim;
  j["seed"] = seed;
  return j.dump(2);
}

Lexicon Lexicon::from_json(const std::string& text) {
  Lexicon lex;
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    lex.verbs = j.at("verbs").get<std::vector<std::string>>();
    lex.prepositions = j.at("prepositions").get<std::vector<std::string>>();
    lex.n_max = j.at("n_max").get<int>();
    lex.embed_dim = j.at("embed_dim").get<int>();
    lex.seed = j.at("seed").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(std::string("bad lexicon json: ") + e.what());
  }
  for (const auto& v : lex.verbs)
    if (lex.is_prep(v)) throw ValueError("token in both lists: " + v);
  return lex;
}

void Lexicon::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << to_json() << "\n";
}

Lexicon Lexicon::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

Lexicon build_lexicon(const std::vector<std::string>& corpus,
                      const std::vector<std::string>& verb_list,
                      const std::vector<std::string>& prep_list) {
  std::set<std::string> verbs_lc, preps_lc;
  for (const auto& v : verb_list) verbs_lc.insert(lower(v));
  for (const auto& p : prep_list) preps_lc.insert(lower(p));
  for (const auto& v : verbs_lc)
    if (preps_lc.count(v)) throw ValueError("token in both lists: " + v);

  std::set<std::string> seen;
  for (const auto& line : corpus)
    for (const auto& t : tokenize(line)) seen.insert(t);

  Lexicon lex;
  for (const auto& v : verb_list)
    if (seen.count(lower(v))) lex.verbs.push_back(lower(v));
  for (const auto& p : prep_list)
    if (seen.count(lower(p))) lex.prepositions.push_back(lower(p));
  return lex;
}

int ActionTree::find_child(int node, const std::string& token) const {
  for (int c : nodes[static_cast<size_t>(node)].children)
    if (nodes[static_cast<size_t>(c)].token == token) return c;
  return -1;
}

std::vector<std::string> extract_action_words(const std::string& text, const Lexicon& lex) {
  std::vector<std::string> out;
  for (const auto& tok : tokenize(text))
    if (lex.is_verb(tok) || lex.is_prep(tok)) out.push_back(tok);
  return out;
}

ActionTree build_tree(const std::vector<std::string>& corpus, const Lexicon& lex) {
  ActionTree tree;
  for (const auto& line : corpus) {
    int node = 0;
    int layer = 0;
    walk_action_words(line, lex, [&](const std::string& tok, bool) {
      int child = tree.find_child(node, tok);
      if (child < 0) {
        child = tree.node_count();
        tree.nodes.push_back({tok, layer, {}});
        tree.nodes[static_cast<size_t>(node)].children.push_back(child);
      }
      node = child;
      ++layer;
    });
  }
  return tree;
}

ActionSequence parse_instruction(const std::string& instruction, const ActionTree& tree,
                                 const Lexicon& lex) {
  // First gather the action words (alternation and verb-first enforced here).
  std::vector<std::string> words;
  walk_action_words(instruction, lex, [&](const std::string& tok, bool) {
    words.push_back(tok);
  });

  // Then require the sequence to be a root path of the tree.
  int node = 0;
  std::string matched;
  for (const auto& tok : words) {
    int child = tree.find_child(node, tok);
    if (child < 0)
      throw ParseError("unknown composition; longest matched prefix: '" + matched +
                       "' then '" + tok + "' in: " + instruction);
    node = child;
    matched += (matched.empty() ? "" : " ") + tok;
  }

  ActionSequence seq;
  for (size_t i = 0; i < words.size(); i += 2) {
    ActionPair p;
    p.verb = words[i];
    if (i + 1 < words.size()) p.prep = words[i + 1];
    seq.pairs.push_back(p);
  }
  return seq;
}

std::vector<std::string> decompose_primitives(const std::string& instruction,
                                              const Lexicon& lex) {
  std::vector<std::string> toks;
  {
    std::istringstream ss(instruction);
    std::string w;
    while (ss >> w) toks.push_back(w);
  }
  std::vector<size_t> verb_at;
  for (size_t i = 0; i < toks.size(); ++i)
    if (lex.is_verb(lower(toks[i]))) verb_at.push_back(i);
  if (verb_at.empty()) throw ParseError("no lexicon verb in: " + instruction);
  for (size_t i = 0; i < verb_at[0]; ++i)
    if (lex.is_prep(lower(toks[i])))
      throw ParseError("preposition before any verb in: " + instruction);

  std::vector<std::string> prims;
  for (size_t i = 0; i < verb_at.size(); ++i) {
    size_t begin = verb_at[i];
    size_t end = (i + 1 < verb_at.size()) ? verb_at[i + 1] : toks.size();
    // Drop connector words dangling at the clause end.
    while (end > begin + 1) {
      std::string t = lower(toks[end - 1]);
      if (t == "and" || t == "then") {
        --end;
      } else {
        break;
      }
    }
    std::string clause;
    for (size_t k = begin; k < end; ++k) {
      if (!clause.empty()) clause += ' ';
      clause += toks[k];
    }
    prims.push_back(clause);
  }
  return prims;
}

Tensor EmbeddingTable::init_rows(const Lexicon& lex, int dim, uint64_t seed) {
  Tensor t = Tensor::zeros({lex.vocab_size(), dim});
  const float scale = 1.0f / std::sqrt(static_cast<float>(dim));
  for (int64_t i = 0; i < lex.vocab_size(); ++i) {
    Rng rng(name_seed(seed, "text.token." + lex.token_name(i)));
    for (int j = 0; j < dim; ++j)
      t.at({i, j}) = static_cast<float>(rng.normal()) * scale;
  }
  return t;
}

EmbeddingTable EmbeddingTable::create(const Lexicon& lex, int dim, uint64_t seed) {
  EmbeddingTable tab;
  tab.dim = dim;
  tab.lexicon = lex;
  tab.table = init_rows(lex, dim, seed);
  return tab;
}

std::vector<int64_t> slot_token_ids(const ActionSequence& seq, const Lexicon& lex,
                                    int n_max) {
  if (static_cast<int>(seq.n()) > n_max)
    throw ValueError("sequence has " + std::to_string(seq.n()) + " pairs, capacity " +
                     std::to_string(n_max));
  std::vector<int64_t> ids(static_cast<size_t>(2 * n_max), -1);
  for (size_t i = 0; i < seq.pairs.size(); ++i) {
    ids[2 * i] = lex.token_id(seq.pairs[i].verb);
    if (ids[2 * i] < 0) throw ValueError("verb not in lexicon: " + seq.pairs[i].verb);
    if (!seq.pairs[i].prep.empty()) {
      ids[2 * i + 1] = lex.token_id(seq.pairs[i].prep);
      if (ids[2 * i + 1] < 0)
        throw ValueError("preposition not in lexicon: " + seq.pairs[i].prep);
    }
  }
  return ids;
}

Tensor embed_instruction(const ActionSequence& seq, const EmbeddingTable& table, int n_max) {
  auto ids = slot_token_ids(seq, table.lexicon, n_max);
  Tensor out = Tensor::zeros({static_cast<int64_t>(2 * n_max), table.dim});
  for (size_t s = 0; s < ids.size(); ++s) {
    if (ids[s] < 0) continue;
    for (int j = 0; j < table.dim; ++j)
      out.at({static_cast<int64_t>(s), j}) = table.table.at({ids[s], j});
  }
  return out;
}

int corpus_n_max(const std::vector<std::string>& corpus, const ActionTree& tree,
                 const Lexicon& lex) {
  int best = 0;
  for (const auto& line : corpus)
    best = std::max(best, static_cast<int>(parse_instruction(line, tree, lex).n()));
  return best;
}

}  // namespace swm
