#include "dnpo/tokenizer.hpp"

#include <fstream>
#include <stdexcept>

namespace dnpo {

namespace {
constexpr const char* kEosGlyph = "<eos>";
}

Vocab Vocab::from_glyphs(std::vector<std::string> glyphs) {
  if (glyphs.empty() || glyphs[0] != kEosGlyph)
    throw std::invalid_argument("Vocab: first glyph must be " + std::string(kEosGlyph));
  Vocab v;
  v.glyphs_ = std::move(glyphs);
  for (size_t i = 1; i < v.glyphs_.size(); ++i) {
    const std::string& g = v.glyphs_[i];
    if (g.size() != 1)
      throw std::invalid_argument("Vocab: glyph at line " + std::to_string(i) +
                                  " must be a single character");
    if (!v.char_to_id_.emplace(g[0], static_cast<int>(i)).second)
      throw std::invalid_argument("Vocab: duplicate glyph at line " + std::to_string(i));
  }
  return v;
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("Vocab: cannot open " + path);
  std::vector<std::string> glyphs;
  std::string line;
  while (std::getline(in, line)) glyphs.push_back(line);
  return from_glyphs(std::move(glyphs));
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("Vocab: cannot write " + path);
  for (const std::string& g : glyphs_) out << g << "\n";
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) {
    auto it = char_to_id_.find(c);
    if (it == char_to_id_.end())
      throw std::invalid_argument("Vocab: character '" + std::string(1, c) +
                                  "' not in vocabulary");
    out.push_back(it->second);
  }
  return out;
}

std::vector<int> Vocab::encode_response(const std::string& text) const {
  std::vector<int> out = encode(text);
  out.push_back(kEosId);
  return out;
}

std::string Vocab::decode(const std::vector<int>& tokens) const {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    int t = tokens[i];
    if (t < 0 || t >= size())
      throw std::invalid_argument("Vocab: token id " + std::to_string(t) + " out of range");
    if (t == kEosId) {
      if (i + 1 != tokens.size())
        throw std::invalid_argument("Vocab: end-of-sequence token before end of sequence");
      break;
    }
    out += glyphs_[t];
  }
  return out;
}

}  // namespace dnpo
