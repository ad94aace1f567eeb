#pragma once

// Prompt templates (question/rationale, question description, conversation
// history), question categories, tokenization and the generator vocabulary.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pgc/corpus.hpp"

namespace pgc::prompt {

enum class Version { QuestionRationale = 1, QuestionDescription = 2, ConversationHistory = 3 };

struct PromptVersion {
  Version version = Version::ConversationHistory;
  int history_depth = 1;  // V3 only

  bool operator==(const PromptVersion&) const = default;
};

Version version_from_number(int n);
int version_number(Version v);

inline constexpr std::string_view kOtherCategory = "Other";

struct CategoryVocab {
  std::vector<std::string> categories;  // lowercase, by descending frequency

  bool contains(std::string_view word) const;
};

/// Lowercased leading word of a question (first alphanumeric token), or "".
std::string first_word(std::string_view question);

/// The k most frequent question-initial words; ties broken lexicographically.
CategoryVocab build_category_vocab(std::span<const corpus::DialogueExample> examples, std::size_t k);

/// Capitalised interrogative word, or "Other" when it is not in the vocab.
std::string categorize(std::string_view question, const CategoryVocab& vocab);

/// Word-level tokenizer interface; a subword tokenizer can replace it.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<std::string> tokenize(std::string_view text) const = 0;
  virtual std::string detokenize(std::span<const std::string> tokens) const = 0;
};

/// Lowercased alphanumeric runs and single punctuation marks.
class WordTokenizer final : public Tokenizer {
 public:
  std::vector<std::string> tokenize(std::string_view text) const override;
  std::string detokenize(std::span<const std::string> tokens) const override;
};

std::vector<std::string> tokenize(std::string_view text);
std::string detokenize(std::span<const std::string> tokens);

/// Fixed generator vocabulary. Ids 0..3 are reserved for the special tokens.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kNumSpecial = 4;

  Vocabulary();
  /// Rebuilds from a full token list whose first entries are the specials.
  explicit Vocabulary(std::vector<std::string> tokens);

  /// Most frequent tokens (count >= min_count) up to max_size entries
  /// including specials; ties broken lexicographically.
  static Vocabulary build(std::span<const std::vector<std::string>> token_lists, std::size_t max_size,
                          std::size_t min_count = 1);

  int id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct PromptedExample {
  std::string source_text;
  std::string target_text;  // gold answer; empty at inference
  std::vector<std::string> source_tokens;
  /// Extended-vocabulary ids: vocabulary ids, or size()+k for the k-th
  /// distinct source token outside the vocabulary.
  std::vector<int> source_ids;
  std::vector<std::string> oov_tokens;
  /// Gold ids in the extended vocabulary followed by EOS; empty without a target.
  std::vector<int> target_ids;
  corpus::DialogueExample origin;
};

/// Source text of the chosen template (segments joined by single spaces).
std::string prompt_text(const corpus::DialogueExample& example, const PromptVersion& version,
                        const CategoryVocab& categories);

PromptedExample build_prompt(const corpus::DialogueExample& example, const PromptVersion& version,
                             const CategoryVocab& categories, const Vocabulary& vocab,
                             const Tokenizer& tokenizer = WordTokenizer());

/// Maps extended ids back to surface text, stopping at EOS.
std::string decode_ids(std::span<const int> ids, const Vocabulary& vocab, std::span<const std::string> oov_tokens);

}  // namespace pgc::prompt
