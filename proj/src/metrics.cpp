#include "pgc/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "pgc/error.hpp"

namespace pgc::eval {
namespace {

bool is_space(unsigned char c) { return std::isspace(c) != 0; }

bool is_article(std::string_view w) { return w == "a" || w == "an" || w == "the"; }

}  // namespace

std::vector<std::string> normalized_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty() && !is_article(current)) tokens.push_back(current);
    current.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    // U+00A0 no-break space counts as whitespace, as in Python's str.split.
    if (c == 0xC2 && i + 1 < text.size() && static_cast<unsigned char>(text[i + 1]) == 0xA0) {
      flush();
      ++i;
    } else if (is_space(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      continue;
    } else {
      current.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    }
  }
  flush();
  return tokens;
}

std::string normalize(std::string_view text) {
  std::string out;
  for (const auto& t : normalized_tokens(text)) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

int em(std::string_view pred, std::string_view gold) { return normalize(pred) == normalize(gold) ? 1 : 0; }

double f1(std::string_view pred, std::string_view gold) {
  const auto p = normalized_tokens(pred);
  const auto g = normalized_tokens(gold);
  if (p.empty() || g.empty()) return p.empty() && g.empty() ? 1.0 : 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : g) ++counts[t];
  int overlap = 0;
  for (const auto& t : p) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

Score score_multi(std::string_view pred, std::span<const std::string> references, ReferenceMode mode) {
  if (references.empty()) throw DataError("score_multi: no reference answers");
  if (mode == ReferenceMode::Single) return {static_cast<double>(em(pred, references[0])), f1(pred, references[0])};
  Score best;
  for (const auto& ref : references) {
    best.em = std::max(best.em, static_cast<double>(em(pred, ref)));
    best.f1 = std::max(best.f1, f1(pred, ref));
  }
  return best;
}

}  // namespace pgc::eval
