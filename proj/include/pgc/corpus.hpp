#pragma once

// CoQA ingestion: per-turn examples with conversation history and the
// extractive/generative split.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pgc::corpus {

enum class AnswerClass { Extractive, Generative };

std::string_view to_string(AnswerClass c);
AnswerClass answer_class_from_string(std::string_view s);

struct ConversationTurn {
  int turn_id = 1;
  std::string question;
  std::string rationale;  // CoQA span_text, trimmed; empty iff span_start == -1
  std::string answer;     // CoQA input_text
  int span_start = -1;

  bool operator==(const ConversationTurn&) const = default;
};

struct DialogueExample {
  std::string story_id;
  ConversationTurn turn;
  std::vector<ConversationTurn> history;  // oldest first
  AnswerClass answer_class = AnswerClass::Generative;
  // Extra human answers (CoQA dev); only used for multi-reference scoring.
  std::vector<std::string> additional_answers;

  /// Primary answer first, then the additional answers.
  std::vector<std::string> references() const;

  bool operator==(const DialogueExample&) const = default;
};

struct CorpusStats {
  std::size_t n_examples = 0;
  std::size_t n_extractive = 0;
  std::size_t n_generative = 0;
  double extractive_fraction = 0.0;
};

/// Extractive iff the normalized answer is a non-empty contiguous token
/// subsequence of the normalized rationale.
AnswerClass classify_answer(std::string_view answer, std::string_view rationale);

/// For extractive examples, shrinks the rationale to the shortest run of
/// whole words whose normalization equals the normalized answer.
DialogueExample tighten_rationale(DialogueExample example);

CorpusStats compute_stats(std::span<const DialogueExample> examples);

/// Parses CoQA JSON text. Throws ParseError (with byte offset) on bad JSON
/// and DataError on structural problems.
std::vector<DialogueExample> ingest_text(std::string_view json_text);
std::vector<DialogueExample> ingest(const std::filesystem::path& path);

// Line-delimited example store.
std::string to_json_line(const DialogueExample& example);
DialogueExample from_json_line(std::string_view line);
void write_jsonl(std::ostream& out, std::span<const DialogueExample> examples);
std::vector<DialogueExample> read_jsonl(std::istream& in);

/// Reads either a CoQA JSON file or a .jsonl example store.
std::vector<DialogueExample> load_examples(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);

}  // namespace pgc::corpus
