#pragma once

// Synthetic sequence-classification data: the majority task, nested ListOps
// expressions, and a generic JSONL loader for pre-tokenized text.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "selssm/numkit.hpp"

namespace selssm {

struct LabeledSequence {
  std::vector<int> tokens;
  int label = 0;
};

struct DatasetSplit {
  std::vector<LabeledSequence> examples;
  int T = 0;            // fixed sequence length after pad/truncate
  int vocab_size = 0;   // V
  int num_classes = 0;  // K
};

// Malformed input; `position` is a token index for expressions and a 1-based
// line number for JSONL files.
class parse_error : public std::runtime_error {
 public:
  std::size_t position;
  parse_error(const std::string& msg, std::size_t pos)
      : std::runtime_error(msg + " (position " + std::to_string(pos) + ")"),
        position(pos) {}
};

// Well-formed input carrying values the task cannot accept.
class data_error : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Token strings <-> ids with id 0 reserved for padding.
struct Vocabulary {
  std::unordered_map<std::string, int> to_id;
  std::vector<std::string> to_token;  // index = id

  int size() const { return static_cast<int>(to_token.size()); }

  int id(const std::string& token) const {
    auto it = to_id.find(token);
    if (it == to_id.end()) throw data_error("unknown token: " + token);
    return it->second;
  }
};

inline Vocabulary make_vocabulary(const std::vector<std::string>& tokens_in_id_order) {
  Vocabulary v;
  v.to_token = tokens_in_id_order;
  for (std::size_t i = 0; i < tokens_in_id_order.size(); ++i) {
    if (!v.to_id.emplace(tokens_in_id_order[i], static_cast<int>(i)).second)
      throw data_error("duplicate token in vocabulary: " + tokens_in_id_order[i]);
  }
  if (v.to_token.empty() || v.to_token[0] != "<pad>")
    throw data_error("vocabulary must reserve id 0 for <pad>");
  return v;
}

// ---------------------------------------------------------------------------
// Majority task: binary tokens, label 1 iff ones outnumber zeros.

inline int majority_label(const std::vector<int>& tokens) {
  long long ones = std::count(tokens.begin(), tokens.end(), 1);
  long long zeros = static_cast<long long>(tokens.size()) - ones;
  return ones > zeros ? 1 : 0;
}

// m sequences of length T over {0,1}.  Per sequence the one-count k is drawn
// uniformly from 0..T, ones are placed at uniform positions, the label is
// fixed from the clean counts, and only then round(flip_frac * k) of the ones
// are flipped back to zero.  Noise therefore never raises the one-count and
// never touches the label.
inline DatasetSplit gen_majority(int m, int T, double flip_frac, std::uint64_t seed) {
  if (m < 0 || T < 1) throw std::invalid_argument("need m >= 0 and T >= 1");
  if (!(flip_frac >= 0.0 && flip_frac < 1.0))
    throw std::invalid_argument("flip_frac must lie in [0, 1)");
  DatasetSplit split;
  split.T = T;
  split.vocab_size = 2;
  split.num_classes = 2;
  split.examples.reserve(m);
  Rng rng(seed);
  std::vector<int> positions(T);
  for (int i = 0; i < m; ++i) {
    int k = rng.int_in(0, T);
    std::iota(positions.begin(), positions.end(), 0);
    rng.shuffle(positions);
    LabeledSequence ex;
    ex.tokens.assign(T, 0);
    for (int j = 0; j < k; ++j) ex.tokens[positions[j]] = 1;
    ex.label = k > T - k ? 1 : 0;
    // The shuffled prefix is already uniformly random, so flipping its first
    // entries selects a uniform subset of the ones without extra draws.
    int flips = static_cast<int>(std::llround(flip_frac * k));
    for (int j = 0; j < flips; ++j) ex.tokens[positions[j]] = 0;
    split.examples.push_back(std::move(ex));
  }
  return split;
}

// ---------------------------------------------------------------------------
// ListOps: bracketed prefix expressions over MAX, MIN, MED, SUM and digits.

inline Vocabulary listops_vocabulary() {
  return make_vocabulary({"<pad>", "0", "1", "2", "3", "4", "5", "6", "7", "8",
                          "9", "[", "]", "(", ")", "MAX", "MIN", "MED", "SUM"});
}

namespace detail {

inline int apply_listops_op(const std::string& op, const std::vector<int>& args,
                            std::size_t pos) {
  if (args.empty()) throw parse_error("operator " + op + " has no arguments", pos);
  if (op == "MAX") return *std::max_element(args.begin(), args.end());
  if (op == "MIN") return *std::min_element(args.begin(), args.end());
  if (op == "MED") {
    std::vector<int> sorted = args;
    std::sort(sorted.begin(), sorted.end());
    return sorted[(sorted.size() - 1) / 2];  // lower median on even arity
  }
  if (op == "SUM") {
    long long s = std::accumulate(args.begin(), args.end(), 0LL);
    return static_cast<int>(s % 10);
  }
  throw parse_error("unknown operator " + op, pos);
}

inline bool is_listops_digit(const std::string& t) {
  return t.size() == 1 && t[0] >= '0' && t[0] <= '9';
}

// expr := digit | '[' op expr+ ']'.  Parentheses are grouping noise in the
// vocabulary and are skipped wherever they appear.
inline int eval_listops_at(const std::vector<std::string>& toks, std::size_t& pos) {
  while (pos < toks.size() && (toks[pos] == "(" || toks[pos] == ")")) ++pos;
  if (pos >= toks.size()) throw parse_error("unexpected end of expression", pos);
  const std::string& t = toks[pos];
  if (is_listops_digit(t)) {
    ++pos;
    return t[0] - '0';
  }
  if (t != "[") throw parse_error("expected digit or '[', got " + t, pos);
  std::size_t op_pos = ++pos;
  if (pos >= toks.size()) throw parse_error("missing operator after '['", pos);
  std::string op = toks[pos++];
  std::vector<int> args;
  while (true) {
    while (pos < toks.size() && (toks[pos] == "(" || toks[pos] == ")")) ++pos;
    if (pos >= toks.size()) throw parse_error("missing ']'", pos);
    if (toks[pos] == "]") {
      ++pos;
      break;
    }
    args.push_back(eval_listops_at(toks, pos));
  }
  return apply_listops_op(op, args, op_pos);
}

}  // namespace detail

// Evaluate one expression to its digit.
inline int eval_listops(const std::vector<std::string>& tokens) {
  std::size_t pos = 0;
  int value = detail::eval_listops_at(tokens, pos);
  while (pos < tokens.size() && (tokens[pos] == "(" || tokens[pos] == ")")) ++pos;
  if (pos != tokens.size())
    throw parse_error("trailing tokens after expression", pos);
  return value;
}

// Id-sequence overload: strips padding, maps ids back to strings.
inline int eval_listops(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::vector<std::string> toks;
  toks.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= vocab.size())
      throw data_error("token id outside vocabulary: " + std::to_string(id));
    if (id == 0) continue;  // padding
    toks.push_back(vocab.to_token[id]);
  }
  return eval_listops(toks);
}

// m nested expressions whose pre-pad token length lands in
// [T_target - 5, T_target + 5]; sequences are padded to T_target + 5.
// The tree is grown additively (a digit child costs 1 token, an operator
// child with its mandatory first digit costs 4) so the drawn length is hit
// exactly and generation cannot fail.
inline DatasetSplit gen_listops(int m, int T_target, std::uint64_t seed) {
  if (m < 0) throw std::invalid_argument("need m >= 0");
  if (T_target < 10) throw std::invalid_argument("need T_target >= 10");
  const char* const kOps[4] = {"MAX", "MIN", "MED", "SUM"};

  Vocabulary vocab = listops_vocabulary();
  DatasetSplit split;
  split.T = T_target + 5;
  split.vocab_size = vocab.size();
  split.num_classes = 10;
  split.examples.reserve(m);

  struct Node {
    int op = -1;     // index into kOps; -1 marks a digit leaf
    int digit = 0;
    std::vector<int> children;
  };

  Rng rng(seed);
  for (int i = 0; i < m; ++i) {
    int target_len = rng.int_in(T_target - 5, T_target + 5);
    std::vector<Node> nodes;
    std::vector<int> op_nodes;

    auto add_digit = [&](int parent) {
      nodes.push_back(Node{-1, rng.int_in(0, 9), {}});
      nodes[parent].children.push_back(static_cast<int>(nodes.size()) - 1);
    };
    nodes.push_back(Node{rng.int_in(0, 3), 0, {}});
    op_nodes.push_back(0);
    add_digit(0);
    int count = 4;  // "[ op digit ]"
    while (count < target_len) {
      int parent = op_nodes[static_cast<int>(rng.below(op_nodes.size()))];
      if (count + 4 <= target_len && rng.uniform01() < 0.3) {
        nodes.push_back(Node{rng.int_in(0, 3), 0, {}});
        int child = static_cast<int>(nodes.size()) - 1;
        nodes[parent].children.push_back(child);
        op_nodes.push_back(child);
        add_digit(child);
        count += 4;
      } else {
        add_digit(parent);
        count += 1;
      }
    }

    std::vector<std::string> toks;
    toks.reserve(target_len);
    auto serialize = [&](auto&& self, int idx) -> void {
      const Node& n = nodes[idx];
      if (n.op < 0) {
        toks.push_back(std::string(1, static_cast<char>('0' + n.digit)));
        return;
      }
      toks.push_back("[");
      toks.push_back(kOps[n.op]);
      for (int c : n.children) self(self, c);
      toks.push_back("]");
    };
    serialize(serialize, 0);

    LabeledSequence ex;
    ex.label = eval_listops(toks);
    ex.tokens.reserve(split.T);
    for (const std::string& t : toks) ex.tokens.push_back(vocab.id(t));
    ex.tokens.resize(split.T, 0);
    split.examples.push_back(std::move(ex));
  }
  return split;
}

// ---------------------------------------------------------------------------
// Generic pre-tokenized JSONL loader and writers.

// One {"tokens": [...], "label": int} object per line.  Tokens may be ids or
// strings; strings go through the vocabulary.  Sequences are right-truncated
// to T or right-padded with id 0; num_classes is max label + 1.  In strict
// mode an unknown string token raises data_error, otherwise it maps to pad.
inline DatasetSplit load_text_jsonl(const std::string& path, const Vocabulary& vocab,
                                    int T, bool strict = true) {
  if (T < 1) throw std::invalid_argument("need T >= 1");
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);
  DatasetSplit split;
  split.T = T;
  split.vocab_size = vocab.size();
  split.num_classes = 0;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw parse_error(std::string("malformed JSONL line: ") + e.what(), line_no);
    }
    if (!j.is_object() || !j.contains("tokens") || !j.contains("label") ||
        !j["tokens"].is_array() || !j["label"].is_number_integer())
      throw parse_error("line must be {\"tokens\": [...], \"label\": int}", line_no);

    LabeledSequence ex;
    ex.label = j["label"].get<int>();
    if (ex.label < 0) throw data_error("negative label on line " + std::to_string(line_no));
    ex.tokens.reserve(T);
    for (const auto& t : j["tokens"]) {
      if (static_cast<int>(ex.tokens.size()) == T) break;  // right-truncate
      if (t.is_number_integer()) {
        int id = t.get<int>();
        if (id < 0 || id >= vocab.size())
          throw data_error("token id " + std::to_string(id) + " outside vocabulary on line " +
                           std::to_string(line_no));
        ex.tokens.push_back(id);
      } else if (t.is_string()) {
        auto it = vocab.to_id.find(t.get<std::string>());
        if (it == vocab.to_id.end()) {
          if (strict)
            throw data_error("unknown token \"" + t.get<std::string>() + "\" on line " +
                             std::to_string(line_no));
          ex.tokens.push_back(0);
        } else {
          ex.tokens.push_back(it->second);
        }
      } else {
        throw parse_error("tokens must be ints or strings", line_no);
      }
    }
    ex.tokens.resize(T, 0);  // right-pad
    split.num_classes = std::max(split.num_classes, ex.label + 1);
    split.examples.push_back(std::move(ex));
  }
  if (split.examples.empty())
    std::cerr << "warning: dataset file " << path << " yielded no examples\n";
  return split;
}

inline void write_jsonl(const DatasetSplit& split, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open dataset for writing: " + path);
  for (const LabeledSequence& ex : split.examples) {
    nlohmann::json j;
    j["tokens"] = ex.tokens;
    j["label"] = ex.label;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing dataset: " + path);
}

inline void write_vocabulary(const Vocabulary& vocab, const std::string& path) {
  nlohmann::json j = nlohmann::json::object();
  for (int i = 0; i < vocab.size(); ++i) j[vocab.to_token[i]] = i;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open vocabulary for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing vocabulary: " + path);
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed vocabulary " + path + ": " + e.what());
  }
  if (!j.is_object()) throw data_error("vocabulary must be a JSON object");
  std::vector<std::string> by_id(j.size());
  std::vector<bool> seen(j.size(), false);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_number_integer()) throw data_error("vocabulary ids must be integers");
    int id = it.value().get<int>();
    if (id < 0 || id >= static_cast<int>(j.size()) || seen[id])
      throw data_error("vocabulary ids must form 0..V-1 without repeats");
    seen[id] = true;
    by_id[id] = it.key();
  }
  return make_vocabulary(by_id);
}

}  // namespace selssm
