#include "pgc/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "pgc/error.hpp"
#include "pgc/metrics.hpp"

namespace pgc::corpus {
namespace {

using nlohmann::json;

struct Word {
  std::size_t begin;
  std::size_t end;
};

bool is_ascii_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::size_t space_width(std::string_view s, std::size_t i) {
  if (is_ascii_space(s[i])) return 1;
  if (static_cast<unsigned char>(s[i]) == 0xC2 && i + 1 < s.size() && static_cast<unsigned char>(s[i + 1]) == 0xA0) {
    return 2;
  }
  return 0;
}

std::vector<Word> split_words(std::string_view s) {
  std::vector<Word> words;
  std::size_t i = 0;
  while (i < s.size()) {
    if (std::size_t w = space_width(s, i); w > 0) {
      i += w;
      continue;
    }
    const std::size_t begin = i;
    while (i < s.size() && space_width(s, i) == 0) ++i;
    words.push_back({begin, i});
  }
  return words;
}

std::string trim(std::string_view s, std::size_t* leading = nullptr) {
  const auto words = split_words(s);
  if (words.empty()) {
    if (leading) *leading = 0;
    return {};
  }
  if (leading) *leading = words.front().begin;
  return std::string(s.substr(words.front().begin, words.back().end - words.front().begin));
}

template <typename T>
T required(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw DataError(where + ": missing field '" + key + "'");
  try {
    return it->template get<T>();
  } catch (const json::exception& e) {
    throw DataError(where + ": field '" + key + "' has the wrong type");
  }
}

json turn_to_json(const ConversationTurn& t) {
  return json{{"turn_id", t.turn_id},
              {"question", t.question},
              {"rationale", t.rationale},
              {"answer", t.answer},
              {"span_start", t.span_start}};
}

ConversationTurn turn_from_json(const json& j) {
  ConversationTurn t;
  t.turn_id = required<int>(j, "turn_id", "turn");
  t.question = required<std::string>(j, "question", "turn");
  t.rationale = required<std::string>(j, "rationale", "turn");
  t.answer = required<std::string>(j, "answer", "turn");
  t.span_start = required<int>(j, "span_start", "turn");
  if (t.rationale.empty() != (t.span_start == -1)) {
    throw DataError("turn " + std::to_string(t.turn_id) + ": rationale must be empty exactly when span_start is -1");
  }
  return t;
}

}  // namespace

std::string_view to_string(AnswerClass c) { return c == AnswerClass::Extractive ? "Extractive" : "Generative"; }

AnswerClass answer_class_from_string(std::string_view s) {
  if (s == "Extractive") return AnswerClass::Extractive;
  if (s == "Generative") return AnswerClass::Generative;
  throw DataError("unknown answer_class '" + std::string(s) + "'");
}

std::vector<std::string> DialogueExample::references() const {
  std::vector<std::string> refs{turn.answer};
  refs.insert(refs.end(), additional_answers.begin(), additional_answers.end());
  return refs;
}

AnswerClass classify_answer(std::string_view answer, std::string_view rationale) {
  const auto needle = eval::normalized_tokens(answer);
  if (needle.empty()) return AnswerClass::Generative;
  const auto hay = eval::normalized_tokens(rationale);
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end() ? AnswerClass::Extractive
                                                                                         : AnswerClass::Generative;
}

DialogueExample tighten_rationale(DialogueExample example) {
  if (example.answer_class != AnswerClass::Extractive) return example;
  const std::string& rationale = example.turn.rationale;
  const auto needle = eval::normalized_tokens(example.turn.answer);

  // Normalized tokens of the rationale, each tagged with its source word.
  std::vector<std::string> tokens;
  std::vector<std::size_t> owner;
  const auto words = split_words(rationale);
  for (std::size_t w = 0; w < words.size(); ++w) {
    for (auto& t : eval::normalized_tokens(std::string_view(rationale).substr(words[w].begin, words[w].end - words[w].begin))) {
      tokens.push_back(std::move(t));
      owner.push_back(w);
    }
  }
  const auto hit = std::search(tokens.begin(), tokens.end(), needle.begin(), needle.end());
  if (needle.empty() || hit == tokens.end()) return example;
  const std::size_t first = static_cast<std::size_t>(hit - tokens.begin());
  const Word& a = words[owner[first]];
  const Word& b = words[owner[first + needle.size() - 1]];
  example.turn.rationale = rationale.substr(a.begin, b.end - a.begin);
  if (example.turn.span_start >= 0) example.turn.span_start += static_cast<int>(a.begin);
  return example;
}

CorpusStats compute_stats(std::span<const DialogueExample> examples) {
  CorpusStats s;
  s.n_examples = examples.size();
  for (const auto& e : examples) {
    if (e.answer_class == AnswerClass::Extractive) {
      ++s.n_extractive;
    } else {
      ++s.n_generative;
    }
  }
  s.extractive_fraction =
      s.n_examples == 0 ? 0.0 : static_cast<double>(s.n_extractive) / static_cast<double>(s.n_examples);
  return s;
}

std::vector<DialogueExample> ingest_text(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed CoQA JSON: ") + e.what(), e.byte);
  }
  if (!doc.is_object() || !doc.contains("data") || !doc["data"].is_array()) {
    throw DataError("CoQA JSON must have a top-level 'data' array");
  }

  std::vector<DialogueExample> out;
  for (const json& item : doc["data"]) {
    if (!item.is_object()) throw DataError("CoQA 'data' entries must be objects");
    const std::string story_id = item.contains("id") ? item["id"].get<std::string>() : std::to_string(out.size());
    const std::string where = "story '" + story_id + "'";
    if (!item.contains("questions") || !item.contains("answers")) {
      throw DataError(where + ": missing 'questions' or 'answers'");
    }
    const json& questions = item["questions"];
    const json& answers = item["answers"];
    if (questions.size() != answers.size()) {
      throw DataError(where + ": " + std::to_string(questions.size()) + " questions but " +
                      std::to_string(answers.size()) + " answers");
    }

    // turn_id -> additional human answers (dev set only).
    std::map<int, std::vector<std::string>> extra;
    if (item.contains("additional_answers")) {
      for (const auto& [key, list] : item["additional_answers"].items()) {
        for (const json& a : list) {
          extra[required<int>(a, "turn_id", where)].push_back(trim(required<std::string>(a, "input_text", where)));
        }
      }
    }

    std::vector<ConversationTurn> turns;
    for (std::size_t i = 0; i < questions.size(); ++i) {
      const json& q = questions[i];
      const json& a = answers[i];
      const int q_turn = required<int>(q, "turn_id", where);
      const int a_turn = required<int>(a, "turn_id", where);
      if (q_turn != a_turn) {
        throw DataError(where + ": question turn_id " + std::to_string(q_turn) + " paired with answer turn_id " +
                        std::to_string(a_turn));
      }
      if (q_turn < 1 || (!turns.empty() && q_turn <= turns.back().turn_id)) {
        throw DataError(where + ": turn_id " + std::to_string(q_turn) + " is not strictly increasing from 1");
      }
      ConversationTurn t;
      t.turn_id = q_turn;
      t.question = trim(required<std::string>(q, "input_text", where));
      t.answer = trim(required<std::string>(a, "input_text", where));
      const int span_start = a.contains("span_start") ? a["span_start"].get<int>() : -1;
      if (span_start >= 0) {
        std::size_t leading = 0;
        t.rationale = trim(required<std::string>(a, "span_text", where), &leading);
        t.span_start = t.rationale.empty() ? -1 : span_start + static_cast<int>(leading);
      }
      turns.push_back(std::move(t));
    }

    for (std::size_t i = 0; i < turns.size(); ++i) {
      DialogueExample ex;
      ex.story_id = story_id;
      ex.turn = turns[i];
      ex.history.assign(turns.begin(), turns.begin() + static_cast<std::ptrdiff_t>(i));
      ex.answer_class = classify_answer(ex.turn.answer, ex.turn.rationale);
      if (auto it = extra.find(ex.turn.turn_id); it != extra.end()) ex.additional_answers = it->second;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<DialogueExample> ingest(const std::filesystem::path& path) { return ingest_text(read_file(path)); }

std::string to_json_line(const DialogueExample& e) {
  json history = json::array();
  for (const auto& t : e.history) history.push_back(turn_to_json(t));
  json j{{"story_id", e.story_id},
         {"turn", turn_to_json(e.turn)},
         {"history", std::move(history)},
         {"answer_class", std::string(to_string(e.answer_class))}};
  if (!e.additional_answers.empty()) j["additional_answers"] = e.additional_answers;
  return j.dump();
}

DialogueExample from_json_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed example line: ") + e.what(), e.byte);
  }
  DialogueExample e;
  e.story_id = required<std::string>(j, "story_id", "example");
  e.turn = turn_from_json(j.at("turn"));
  for (const json& t : j.at("history")) e.history.push_back(turn_from_json(t));
  e.answer_class = answer_class_from_string(required<std::string>(j, "answer_class", "example"));
  if (j.contains("additional_answers")) e.additional_answers = j["additional_answers"].get<std::vector<std::string>>();
  if (e.answer_class != classify_answer(e.turn.answer, e.turn.rationale)) {
    throw DataError("example " + e.story_id + "/" + std::to_string(e.turn.turn_id) +
                    ": answer_class disagrees with the answer/rationale overlap rule");
  }
  return e;
}

void write_jsonl(std::ostream& out, std::span<const DialogueExample> examples) {
  for (const auto& e : examples) out << to_json_line(e) << '\n';
}

std::vector<DialogueExample> read_jsonl(std::istream& in) {
  std::vector<DialogueExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(from_json_line(line));
    } catch (const ParseError& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<DialogueExample> load_examples(const std::filesystem::path& path) {
  if (path.extension() == ".jsonl") {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    return read_jsonl(in);
  }
  return ingest(path);
}

}  // namespace pgc::corpus
