#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "dnpo/model.hpp"

namespace dnpo {

// Character-level vocabulary backed by a text file: one glyph per line,
// line number = token id. Line 0 must be the literal `<eos>` marker.
class Vocab {
 public:
  static Vocab load(const std::string& path);
  // Builds from glyph list (index = id); glyphs[0] must be "<eos>".
  static Vocab from_glyphs(std::vector<std::string> glyphs);

  int size() const { return static_cast<int>(glyphs_.size()); }

  // Token ids for each character of `text`; unknown characters are an error.
  std::vector<int> encode(const std::string& text) const;
  // encode + terminating end-of-sequence token; the shape every stored
  // response has in memory.
  std::vector<int> encode_response(const std::string& text) const;
  // Concatenated glyphs; a trailing end-of-sequence token is dropped, one
  // anywhere else is an error.
  std::string decode(const std::vector<int>& tokens) const;

  void save(const std::string& path) const;

 private:
  std::vector<std::string> glyphs_;
  std::unordered_map<char, int> char_to_id_;
};

}  // namespace dnpo
