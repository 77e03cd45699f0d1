#include "mmcl/tokenizer.hpp"

#include <cctype>

#include "mmcl/util.hpp"

namespace mmcl {

namespace {

constexpr std::size_t kMaxCharsPerWord = 100;

bool is_punct(unsigned char c) { return std::ispunct(c) != 0; }

}  // namespace

Tokenizer Tokenizer::from_vocab_text(std::string_view text) {
  Tokenizer t;
  for (auto line : split(text, '\n')) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (t.ids_.contains(line)) throw Error("duplicate vocabulary token \"" + line + "\"");
    t.ids_.emplace(line, static_cast<std::int32_t>(t.tokens_.size()));
    t.tokens_.push_back(std::move(line));
  }
  auto require = [&](const char* tok) {
    auto it = t.ids_.find(tok);
    if (it == t.ids_.end()) throw Error(std::string("vocabulary lacks ") + tok);
    return it->second;
  };
  t.pad_ = require("[PAD]");
  t.unk_ = require("[UNK]");
  t.cls_ = require("[CLS]");
  t.sep_ = require("[SEP]");
  t.hash_ = sha256_hex(join(t.tokens_, "\n"));
  return t;
}

Tokenizer Tokenizer::from_file(const std::filesystem::path& path) {
  return from_vocab_text(read_file(path));
}

const Tokenizer& Tokenizer::builtin() {
  static const Tokenizer t = from_vocab_text(builtin_vocab_text());
  return t;
}

std::int32_t Tokenizer::id_of(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? unk_ : it->second;
}

std::vector<std::string> Tokenizer::basic_split(std::string_view text) const {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && is_punct(c)) {
      flush();
      words.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    }
  }
  flush();
  return words;
}

void Tokenizer::word_pieces(std::string_view word, std::vector<std::int32_t>& out) const {
  if (word.size() > kMaxCharsPerWord) {
    out.push_back(unk_);
    return;
  }
  std::vector<std::int32_t> pieces;
  std::size_t start = 0;
  while (start < word.size()) {
    std::size_t end = word.size();
    std::int32_t found = -1;
    while (start < end) {
      std::string sub(word.substr(start, end - start));
      if (start > 0) sub.insert(0, "##");
      if (auto it = ids_.find(sub); it != ids_.end()) {
        found = it->second;
        break;
      }
      --end;
    }
    if (found < 0) {
      out.push_back(unk_);
      return;
    }
    pieces.push_back(found);
    start = end;
  }
  out.insert(out.end(), pieces.begin(), pieces.end());
}

TokenSequence Tokenizer::encode(std::string_view text, std::size_t max_length) const {
  if (trim(text).empty()) throw Error("cannot tokenize empty text");
  if (max_length < 2) throw Error("max_length must leave room for [CLS] and [SEP]");
  std::vector<std::int32_t> body;
  for (const auto& w : basic_split(text)) word_pieces(w, body);

  TokenSequence seq;
  seq.untruncated_pieces = body.size();
  const std::size_t room = max_length - 2;
  if (body.size() > room) {
    body.resize(room);
    seq.truncated = true;
  }
  seq.ids.reserve(body.size() + 2);
  seq.ids.push_back(cls_);
  seq.ids.insert(seq.ids.end(), body.begin(), body.end());
  seq.ids.push_back(sep_);
  seq.summary_position = 0;
  return seq;
}

std::vector<std::string> Tokenizer::pieces(std::string_view text) const {
  std::vector<std::int32_t> ids;
  for (const auto& w : basic_split(text)) word_pieces(w, ids);
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(token(id));
  return out;
}

}  // namespace mmcl
