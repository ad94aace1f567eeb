#pragma once

// CoQA/SQuAD-style answer normalization and token-overlap scoring.

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pgc::eval {

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
std::string normalize(std::string_view text);

/// Whitespace tokens of normalize(text).
std::vector<std::string> normalized_tokens(std::string_view text);

int em(std::string_view pred, std::string_view gold);
double f1(std::string_view pred, std::string_view gold);

enum class ReferenceMode { Single, Max };

struct Score {
  double em = 0.0;
  double f1 = 0.0;
};

/// Single mode scores against references[0]; Max takes the best reference.
Score score_multi(std::string_view pred, std::span<const std::string> references,
                  ReferenceMode mode = ReferenceMode::Single);

}  // namespace pgc::eval
