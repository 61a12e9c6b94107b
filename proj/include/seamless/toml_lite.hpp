#pragma once

// Reader for the TOML subset used by run configs. Produces nlohmann::json.
// Supported: comments, [table], [a.b], [[array.of.tables]], bare/quoted and
// dotted keys, basic and literal strings, integers, floats, booleans,
// (multi-line) arrays and inline tables. Not supported: dates, multi-line
// strings.

#include <cctype>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "seamless/errors.hpp"

namespace seamless::toml_lite {

using json = nlohmann::json;

class Parser {
 public:
  explicit Parser(std::string_view text) : s_(text) {}

  json parse() {
    json root = json::object();
    json* table = &root;
    while (true) {
      skip_ws_comments_newlines();
      if (eof()) break;
      if (peek() == '[') {
        const bool array_table = s_.substr(pos_, 2) == "[[";
        pos_ += array_table ? 2 : 1;
        std::vector<std::string> path = parse_key_path();
        skip_inline_ws();
        expect(array_table ? "]]" : "]");
        table = &open_table(root, path, array_table);
      } else {
        parse_key_value(*table);
      }
      skip_inline_ws();
      skip_comment();
      if (!eof() && peek() != '\n' && peek() != '\r') fail("expected end of line");
    }
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    int line = 1;
    for (std::size_t i = 0; i < pos_ && i < s_.size(); ++i) line += s_[i] == '\n';
    throw ConfigError("TOML parse error at line " + std::to_string(line) + ": " + what);
  }

  bool eof() const { return pos_ >= s_.size(); }
  char peek() const { return eof() ? '\0' : s_[pos_]; }
  void expect(std::string_view tok) {
    if (s_.substr(pos_, tok.size()) != tok) fail("expected '" + std::string(tok) + "'");
    pos_ += tok.size();
  }

  void skip_inline_ws() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }
  void skip_comment() {
    if (peek() == '#')
      while (!eof() && peek() != '\n') ++pos_;
  }
  void skip_ws_comments_newlines() {
    while (!eof()) {
      const char c = peek();
      if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos_;
      } else if (c == '#') {
        skip_comment();
      } else {
        break;
      }
    }
  }

  std::string parse_simple_key() {
    skip_inline_ws();
    if (peek() == '"') return parse_basic_string();
    if (peek() == '\'') return parse_literal_string();
    const std::size_t start = pos_;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) ++pos_;
    if (start == pos_) fail("expected a key");
    return std::string(s_.substr(start, pos_ - start));
  }

  std::vector<std::string> parse_key_path() {
    std::vector<std::string> path{parse_simple_key()};
    skip_inline_ws();
    while (peek() == '.') {
      ++pos_;
      path.push_back(parse_simple_key());
      skip_inline_ws();
    }
    return path;
  }

  json& open_table(json& root, const std::vector<std::string>& path, bool array_table) {
    json* cur = &root;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      json& next = (*cur)[path[i]];
      if (next.is_null()) next = json::object();
      cur = next.is_array() ? &next.back() : &next;
      if (!cur->is_object()) fail("key '" + path[i] + "' is not a table");
    }
    json& leaf = (*cur)[path.back()];
    if (array_table) {
      if (leaf.is_null()) leaf = json::array();
      if (!leaf.is_array()) fail("key '" + path.back() + "' is not an array of tables");
      leaf.push_back(json::object());
      return leaf.back();
    }
    if (leaf.is_null()) leaf = json::object();
    if (!leaf.is_object()) fail("key '" + path.back() + "' redefined as a table");
    return leaf;
  }

  void parse_key_value(json& table) {
    std::vector<std::string> path = parse_key_path();
    skip_inline_ws();
    expect("=");
    skip_inline_ws();
    json* cur = &table;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      json& next = (*cur)[path[i]];
      if (next.is_null()) next = json::object();
      if (!next.is_object()) fail("key '" + path[i] + "' is not a table");
      cur = &next;
    }
    if (cur->contains(path.back())) fail("duplicate key '" + path.back() + "'");
    (*cur)[path.back()] = parse_value();
  }

  std::string parse_basic_string() {
    expect("\"");
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      char c = s_[pos_++];
      if (c == '"') break;
      if (c != '\\') {
        out += c;
        continue;
      }
      if (eof()) fail("bad escape");
      c = s_[pos_++];
      switch (c) {
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        default: fail(std::string("unsupported escape \\") + c);
      }
    }
    return out;
  }

  std::string parse_literal_string() {
    expect("'");
    const std::size_t start = pos_;
    while (!eof() && peek() != '\'' && peek() != '\n') ++pos_;
    if (peek() != '\'') fail("unterminated literal string");
    std::string out(s_.substr(start, pos_ - start));
    ++pos_;
    return out;
  }

  json parse_value() {
    const char c = peek();
    if (c == '"') return parse_basic_string();
    if (c == '\'') return parse_literal_string();
    if (c == '[') return parse_array();
    if (c == '{') return parse_inline_table();
    if (s_.substr(pos_, 4) == "true") {
      pos_ += 4;
      return true;
    }
    if (s_.substr(pos_, 5) == "false") {
      pos_ += 5;
      return false;
    }
    return parse_number();
  }

  json parse_array() {
    expect("[");
    json arr = json::array();
    while (true) {
      skip_ws_comments_newlines();
      if (peek() == ']') {
        ++pos_;
        return arr;
      }
      arr.push_back(parse_value());
      skip_ws_comments_newlines();
      if (peek() == ',') {
        ++pos_;
      } else if (peek() != ']') {
        fail("expected ',' or ']' in array");
      }
    }
  }

  json parse_inline_table() {
    expect("{");
    json obj = json::object();
    skip_inline_ws();
    if (peek() == '}') {
      ++pos_;
      return obj;
    }
    while (true) {
      parse_key_value(obj);
      skip_inline_ws();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      expect("}");
      return obj;
    }
  }

  json parse_number() {
    const std::size_t start = pos_;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '+' || peek() == '-' ||
                      peek() == '.' || peek() == '_'))
      ++pos_;
    std::string tok;
    for (char ch : s_.substr(start, pos_ - start))
      if (ch != '_') tok += ch;
    if (tok.empty()) fail("expected a value");
    std::string body = (tok[0] == '+' || tok[0] == '-') ? tok.substr(1) : tok;
    const double sign = tok[0] == '-' ? -1.0 : 1.0;
    if (body == "inf") return sign * std::numeric_limits<double>::infinity();
    if (body == "nan") return std::numeric_limits<double>::quiet_NaN();
    try {
      std::size_t used = 0;
      if (tok.find_first_of(".eE") == std::string::npos) {
        const long long v = std::stoll(tok, &used, 10);
        if (used == tok.size()) return v;
      } else {
        const double v = std::stod(tok, &used);
        if (used == tok.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("invalid value '" + tok + "'");
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

inline json parse(std::string_view text) { return Parser(text).parse(); }

}  // namespace seamless::toml_lite
