#pragma once

#include <cctype>
#include <string>
#include <vector>

namespace qcs {

enum class TokenSource { code, description, query };

struct TokenStream {
  std::vector<std::string> tokens;
  TokenSource source = TokenSource::code;

  bool empty() const { return tokens.empty(); }
  std::size_t size() const { return tokens.size(); }
};

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

namespace detail {

enum class CharClass { lower, upper, digit, other };

inline CharClass classify(unsigned char c) {
  if (c >= 'a' && c <= 'z') return CharClass::lower;
  if (c >= 'A' && c <= 'Z') return CharClass::upper;
  if (c >= '0' && c <= '9') return CharClass::digit;
  // Non-ASCII bytes are kept inside tokens so UTF-8 words survive intact.
  if (c >= 0x80) return CharClass::lower;
  return CharClass::other;
}

inline char to_lower_ascii(unsigned char c) {
  if (c >= 'A' && c <= 'Z') return static_cast<char>(c - 'A' + 'a');
  return static_cast<char>(c);
}

}  // namespace detail

// Splits identifiers and free text into lowercase tokens.
//
// Boundaries: any non-alphanumeric character (underscores, whitespace,
// punctuation), lower->upper transitions, and letter<->digit transitions.
// A run of capitals stays together as one acronym token, except that the
// final capital before a lowercase letter starts the next token:
// "HTTPServer" -> [http, server], "parseJSONResponse2" -> [parse, json,
// response, 2]. Empty fragments are dropped; empty input yields an empty
// stream.
inline TokenStream tokenize_identifier(const std::string& raw,
                                       TokenSource source = TokenSource::code) {
  using detail::CharClass;
  TokenStream out;
  out.source = source;

  const std::size_t n = raw.size();
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) {
      out.tokens.push_back(cur);
      cur.clear();
    }
  };

  for (std::size_t i = 0; i < n; ++i) {
    unsigned char c = static_cast<unsigned char>(raw[i]);
    CharClass cls = detail::classify(c);
    if (cls == CharClass::other) {
      flush();
      continue;
    }
    if (!cur.empty()) {
      CharClass prev = detail::classify(static_cast<unsigned char>(raw[i - 1]));
      bool boundary = false;
      if (prev != CharClass::upper && cls == CharClass::upper) {
        boundary = true;  // lower->upper or digit->upper
      } else if ((prev == CharClass::digit) != (cls == CharClass::digit)) {
        boundary = true;  // letter<->digit
      } else if (prev == CharClass::upper && cls == CharClass::lower) {
        // End of an acronym run: the previous capital belongs to this token.
        if (cur.size() > 1) {
          char carried = cur.back();
          cur.pop_back();
          flush();
          cur.push_back(carried);
        }
      }
      if (boundary) flush();
    }
    cur.push_back(detail::to_lower_ascii(c));
  }
  flush();
  return out;
}

}  // namespace qcs
