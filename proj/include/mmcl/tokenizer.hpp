#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mmcl {

inline constexpr std::size_t kMaxSequenceLength = 512;

struct TokenSequence {
  std::vector<std::int32_t> ids;
  /// Index whose final hidden state summarizes the sequence ([CLS]).
  std::size_t summary_position = 0;
  bool truncated = false;
  /// Word pieces before truncation, excluding [CLS]/[SEP].
  std::size_t untruncated_pieces = 0;
};

/// BERT-style WordPiece tokenizer: lowercase, split on whitespace and
/// punctuation, then greedy longest-match-first sub-words with "##"
/// continuation pieces. Sequences are [CLS] pieces... [SEP].
class Tokenizer {
 public:
  /// One token per line; must define [PAD], [UNK], [CLS] and [SEP].
  static Tokenizer from_vocab_text(std::string_view text);
  static Tokenizer from_file(const std::filesystem::path& path);
  /// The fixture vocabulary compiled into the library.
  static const Tokenizer& builtin();

  TokenSequence encode(std::string_view text, std::size_t max_length = kMaxSequenceLength) const;
  /// Word pieces of `text` without special tokens or truncation.
  std::vector<std::string> pieces(std::string_view text) const;

  std::size_t vocab_size() const { return tokens_.size(); }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::int32_t id_of(std::string_view token) const;
  /// SHA-256 of the vocabulary, one token per line.
  const std::string& vocab_hash() const { return hash_; }

  std::int32_t pad_id() const { return pad_; }
  std::int32_t unk_id() const { return unk_; }
  std::int32_t cls_id() const { return cls_; }
  std::int32_t sep_id() const { return sep_; }

 private:
  void word_pieces(std::string_view word, std::vector<std::int32_t>& out) const;
  std::vector<std::string> basic_split(std::string_view text) const;

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
  std::string hash_;
  std::int32_t pad_ = 0, unk_ = 0, cls_ = 0, sep_ = 0;
};

/// Text of the compiled-in vocabulary file.
std::string_view builtin_vocab_text();

}  // namespace mmcl
