#include "pgc/prompt.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "pgc/error.hpp"

namespace pgc::prompt {
namespace {

bool is_word_byte(unsigned char c) { return c >= 0x80 || std::isalnum(c) != 0; }

bool is_word(std::string_view token) { return !token.empty() && is_word_byte(static_cast<unsigned char>(token[0])); }

std::string capitalize(std::string word) {
  if (!word.empty()) word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
  return word;
}

// "{Category} Question: {q} Rationale: {r}" or without the category.
std::string turn_segment(const corpus::ConversationTurn& turn, const CategoryVocab* categories) {
  std::string s;
  if (categories != nullptr) s += categorize(turn.question, *categories) + " ";
  s += "Question: " + turn.question + " Rationale: " + turn.rationale;
  return s;
}

}  // namespace

Version version_from_number(int n) {
  switch (n) {
    case 1: return Version::QuestionRationale;
    case 2: return Version::QuestionDescription;
    case 3: return Version::ConversationHistory;
    default: throw UsageError("prompt version must be 1, 2 or 3 (got " + std::to_string(n) + ")");
  }
}

int version_number(Version v) { return static_cast<int>(v); }

bool CategoryVocab::contains(std::string_view word) const {
  return std::find(categories.begin(), categories.end(), word) != categories.end();
}

std::string first_word(std::string_view question) {
  for (auto& t : tokenize(question)) {
    if (is_word(t)) return t;
  }
  return {};
}

CategoryVocab build_category_vocab(std::span<const corpus::DialogueExample> examples, std::size_t k) {
  if (k == 0) throw UsageError("category vocabulary size must be at least 1");
  if (examples.empty()) throw DataError("cannot build a category vocabulary from zero examples");
  std::map<std::string, std::size_t> counts;
  for (const auto& e : examples) {
    if (auto w = first_word(e.turn.question); !w.empty()) ++counts[w];
  }
  if (counts.empty()) throw DataError("no question in the examples starts with a word");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  CategoryVocab vocab;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) vocab.categories.push_back(ranked[i].first);
  return vocab;
}

std::string categorize(std::string_view question, const CategoryVocab& vocab) {
  const std::string w = first_word(question);
  if (w.empty() || !vocab.contains(w)) return std::string(kOtherCategory);
  return capitalize(w);
}

std::vector<std::string> WordTokenizer::tokenize(std::string_view text) const {
  std::vector<std::string> tokens;
  std::string word;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_word_byte(c)) {
      word.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
      continue;
    }
    if (!word.empty()) tokens.push_back(std::move(word));
    word.clear();
    if (std::ispunct(c)) tokens.emplace_back(1, ch);
  }
  if (!word.empty()) tokens.push_back(std::move(word));
  return tokens;
}

std::string WordTokenizer::detokenize(std::span<const std::string> tokens) const {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) { return WordTokenizer().tokenize(text); }
std::string detokenize(std::span<const std::string> tokens) { return WordTokenizer().detokenize(tokens); }

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{"<pad>", "<unk>", "<bos>", "<eos>"}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  static const std::vector<std::string> specials{"<pad>", "<unk>", "<bos>", "<eos>"};
  if (tokens_.size() < specials.size() || !std::equal(specials.begin(), specials.end(), tokens_.begin())) {
    throw DataError("vocabulary must start with <pad> <unk> <bos> <eos>");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::build(std::span<const std::vector<std::string>> token_lists, std::size_t max_size,
                             std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto& list : token_lists) {
    for (const auto& t : list) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, n] : counts) {
    if (n >= min_count) ranked.emplace_back(tok, n);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = Vocabulary().tokens();
  for (auto& [tok, n] : ranked) {
    if (tokens.size() >= max_size) break;
    if (std::find(tokens.begin(), tokens.begin() + kNumSpecial, tok) == tokens.begin() + kNumSpecial) {
      tokens.push_back(tok);
    }
  }
  return Vocabulary(std::move(tokens));
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("vocabulary id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

// ---------------------------------------------------------------------------

std::string prompt_text(const corpus::DialogueExample& example, const PromptVersion& version,
                        const CategoryVocab& categories) {
  switch (version.version) {
    case Version::QuestionRationale:
      return turn_segment(example.turn, nullptr);
    case Version::QuestionDescription:
      return turn_segment(example.turn, &categories);
    case Version::ConversationHistory: {
      if (version.history_depth < 0) throw UsageError("history_depth must be non-negative");
      const std::size_t depth = std::min(example.history.size(), static_cast<std::size_t>(version.history_depth));
      std::string s;
      for (std::size_t i = example.history.size() - depth; i < example.history.size(); ++i) {
        const auto& h = example.history[i];
        s += turn_segment(h, &categories) + " Answer: " + h.answer + " ";
      }
      return s + turn_segment(example.turn, &categories) + " Answer:";
    }
  }
  throw UsageError("unknown prompt version");
}

PromptedExample build_prompt(const corpus::DialogueExample& example, const PromptVersion& version,
                             const CategoryVocab& categories, const Vocabulary& vocab, const Tokenizer& tokenizer) {
  PromptedExample p;
  p.source_text = prompt_text(example, version, categories);
  p.target_text = example.turn.answer;
  p.source_tokens = tokenizer.tokenize(p.source_text);
  p.origin = example;

  const int base = static_cast<int>(vocab.size());
  auto oov_id = [&](const std::string& tok) -> int {
    auto it = std::find(p.oov_tokens.begin(), p.oov_tokens.end(), tok);
    return it == p.oov_tokens.end() ? -1 : base + static_cast<int>(it - p.oov_tokens.begin());
  };
  for (const auto& t : p.source_tokens) {
    if (vocab.contains(t)) {
      p.source_ids.push_back(vocab.id(t));
    } else {
      int id = oov_id(t);
      if (id < 0) {
        p.oov_tokens.push_back(t);
        id = base + static_cast<int>(p.oov_tokens.size()) - 1;
      }
      p.source_ids.push_back(id);
    }
  }

  if (!p.target_text.empty()) {
    for (const auto& t : tokenizer.tokenize(p.target_text)) {
      if (vocab.contains(t)) {
        p.target_ids.push_back(vocab.id(t));
      } else {
        const int id = oov_id(t);
        p.target_ids.push_back(id < 0 ? Vocabulary::kUnk : id);
      }
    }
    p.target_ids.push_back(Vocabulary::kEos);
  }
  return p;
}

std::string decode_ids(std::span<const int> ids, const Vocabulary& vocab, std::span<const std::string> oov_tokens) {
  std::vector<std::string> words;
  const int base = static_cast<int>(vocab.size());
  for (int id : ids) {
    if (id == Vocabulary::kEos) break;
    if (id == Vocabulary::kPad || id == Vocabulary::kBos) continue;
    if (id >= base) {
      const auto k = static_cast<std::size_t>(id - base);
      if (k >= oov_tokens.size()) throw DataError("extended id " + std::to_string(id) + " has no source token");
      words.push_back(oov_tokens[k]);
    } else {
      words.push_back(vocab.token(id));
    }
  }
  return detokenize(words);
}

}  // namespace pgc::prompt
