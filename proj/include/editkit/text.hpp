#pragma once

#include "editkit/common.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace editkit::text {

inline constexpr int kSeqLen = 77;
inline constexpr int kPadId = 0;
inline constexpr const char* kSeparator = ".";

/// Paraphrase templates for one attribute. `keywords` are the words that mark
/// a sentence as talking about this attribute.
struct AttributeTemplates {
  std::string name;
  std::vector<std::string> keywords;
  std::vector<std::string> positive;
  std::vector<std::string> negative;
};

class InstructionTemplateSet {
 public:
  InstructionTemplateSet() = default;
  explicit InstructionTemplateSet(std::vector<AttributeTemplates> attributes);

  int n_attributes() const { return static_cast<int>(attributes_.size()); }
  const AttributeTemplates& attribute(int attr) const;
  const std::vector<std::string>& templates(int attr, int sign) const;
  int find(const std::string& name) const;  // -1 when absent

  /// Indices of attributes whose keywords occur in `text`.
  std::vector<int> mentioned_attributes(const std::string& text) const;

  /// Every (attribute, sign) has >= 5 distinct templates, each mentioning
  /// exactly its own attribute. Throws std::invalid_argument otherwise.
  void validate(int min_templates = 5) const;

  std::string to_json() const;
  static InstructionTemplateSet from_json(const std::string& json_text);
  static InstructionTemplateSet load(const std::filesystem::path& path);

 private:
  std::vector<AttributeTemplates> attributes_;
};

/// Training paraphrases for the built-in attribute list.
InstructionTemplateSet builtin_templates();
/// Held-out evaluation paraphrases (positive direction), never used in training.
InstructionTemplateSet builtin_test_templates();

std::string render_instruction(const InstructionTemplateSet& templates, int attr, int sign, Rng& rng);

/// Lowercased word/punctuation split used by the tokenizer.
std::vector<std::string> split_words(const std::string& text);

class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words, int size = 256);
  /// Sorted union of every word in the given template sets plus the separator.
  static Vocabulary from_templates(const std::vector<const InstructionTemplateSet*>& sets,
                                   int size = 256);

  int size() const { return size_; }
  int id(const std::string& word) const;  // throws on unknown word
  const std::string& word(int id) const;
  const std::vector<std::string>& words() const { return words_; }
  std::string fingerprint() const;

 private:
  int size_;
  std::vector<std::string> words_;  // words_[i] has id i + 1
  std::map<std::string, int> index_;
};

struct TokenSequence {
  std::array<int, kSeqLen> ids{};
  int start_offset = 0;

  int token_count() const;
  int last_nonzero() const;  // -1 for all-pad
  bool operator==(const TokenSequence&) const = default;
};

TokenSequence tokenize(const Vocabulary& vocab, const std::string& text);
std::string detokenize(const Vocabulary& vocab, const TokenSequence& seq);

/// Shifts the non-pad tokens right by an offset drawn uniformly from
/// {0..min(max_start, 76 - last_nonzero)}.
TokenSequence place_with_tpr(const TokenSequence& seq, Rng& rng, int max_start = 30);
/// Deterministic variant with an explicit offset (clamped to the legal range).
TokenSequence place_at(const TokenSequence& seq, int offset);

/// 77 x d_txt; row i is exactly zero iff token i is pad.
using TextEmbeddingSeq = MatrixD;

/// Frozen stand-in for the text tower: seeded token table plus sinusoidal
/// positions on non-pad rows.
class TextEmbedder {
 public:
  TextEmbedder(int vocab_size, int d_txt, uint64_t seed);

  int d_txt() const { return static_cast<int>(table_.cols()); }
  uint64_t seed() const { return seed_; }
  TextEmbeddingSeq embed(const TokenSequence& seq) const;
  static double positional(int pos, int dim, int d_txt);

 private:
  MatrixD table_;
  uint64_t seed_;
};

/// Vocabulary plus embedder: instruction text to a 77-row embedding.
struct TextEncoder {
  Vocabulary vocab;
  TextEmbedder embedder;

  TextEmbeddingSeq encode(const std::string& text) const { return embedder.embed(tokenize(vocab, text)); }
};

/// Joins instructions with " . ", normalizing trailing separators.
std::string concat_instructions(const std::vector<std::string>& texts);

}  // namespace editkit::text
