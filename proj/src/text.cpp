#include "editkit/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

namespace editkit::text {

using ordered_json = nlohmann::ordered_json;

namespace {

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '\'';
}

bool is_punct_token(char c) {
  return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':';
}

}  // namespace

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (is_word_char(c)) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      continue;
    }
    if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    if (is_punct_token(c)) {
      out.emplace_back(1, c);
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      throw std::invalid_argument(std::string("unsupported character in instruction: '") + c + "'");
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// ---------------------------------------------------------------------------
// Templates

InstructionTemplateSet::InstructionTemplateSet(std::vector<AttributeTemplates> attributes)
    : attributes_(std::move(attributes)) {}

const AttributeTemplates& InstructionTemplateSet::attribute(int attr) const {
  if (attr < 0 || attr >= n_attributes())
    throw std::out_of_range("unknown attribute index " + std::to_string(attr));
  return attributes_[attr];
}

const std::vector<std::string>& InstructionTemplateSet::templates(int attr, int sign) const {
  const auto& a = attribute(attr);
  if (sign == 1) return a.positive;
  if (sign == -1) return a.negative;
  throw std::invalid_argument("sign must be +1 or -1");
}

int InstructionTemplateSet::find(const std::string& name) const {
  for (int i = 0; i < n_attributes(); ++i)
    if (attributes_[i].name == name) return i;
  return -1;
}

std::vector<int> InstructionTemplateSet::mentioned_attributes(const std::string& text) const {
  const auto words = split_words(text);
  std::vector<int> out;
  for (int a = 0; a < n_attributes(); ++a) {
    const auto& kw = attributes_[a].keywords;
    const bool hit = std::any_of(words.begin(), words.end(), [&](const std::string& w) {
      return std::find(kw.begin(), kw.end(), w) != kw.end();
    });
    if (hit) out.push_back(a);
  }
  return out;
}

void InstructionTemplateSet::validate(int min_templates) const {
  if (attributes_.empty()) throw std::invalid_argument("template set is empty");
  for (int a = 0; a < n_attributes(); ++a) {
    const auto& attr = attributes_[a];
    if (attr.keywords.empty())
      throw std::invalid_argument("attribute '" + attr.name + "' has no keywords");
    for (int sign : {1, -1}) {
      const auto& list = templates(a, sign);
      if (static_cast<int>(std::set<std::string>(list.begin(), list.end()).size()) < min_templates)
        throw std::invalid_argument("attribute '" + attr.name + "' sign " + std::to_string(sign) +
                                    " has fewer than " + std::to_string(min_templates) +
                                    " distinct templates");
      for (const auto& t : list) {
        const auto hits = mentioned_attributes(t);
        if (hits.size() != 1 || hits[0] != a)
          throw std::invalid_argument("template \"" + t + "\" must mention exactly attribute '" +
                                      attr.name + "'");
      }
    }
  }
}

std::string InstructionTemplateSet::to_json() const {
  ordered_json j = ordered_json::object();
  for (const auto& a : attributes_) {
    j[a.name]["+"] = a.positive;
    j[a.name]["-"] = a.negative;
    j[a.name]["keywords"] = a.keywords;
  }
  return j.dump(2);
}

InstructionTemplateSet InstructionTemplateSet::from_json(const std::string& json_text) {
  const ordered_json j = ordered_json::parse(json_text);
  std::vector<AttributeTemplates> attrs;
  for (const auto& [name, entry] : j.items()) {
    AttributeTemplates a;
    a.name = name;
    a.positive = entry.at("+").get<std::vector<std::string>>();
    a.negative = entry.at("-").get<std::vector<std::string>>();
    if (entry.contains("keywords"))
      a.keywords = entry.at("keywords").get<std::vector<std::string>>();
    else
      a.keywords = split_words(name);
    attrs.push_back(std::move(a));
  }
  return InstructionTemplateSet(std::move(attrs));
}

InstructionTemplateSet InstructionTemplateSet::load(const std::filesystem::path& path) {
  return from_json(read_text_file(path));
}

InstructionTemplateSet builtin_templates() {
  return InstructionTemplateSet({
      {"bangs",
       {"bangs", "fringe"},
       {"add bangs", "give the person bangs", "put some bangs on the forehead",
        "the face should have bangs", "let the hair fall into a fringe",
        "cut a fringe over the forehead"},
       {"remove the bangs", "take away the bangs", "get rid of the fringe",
        "brush the bangs away from the forehead", "no more bangs"}},
      {"eyeglasses",
       {"eyeglasses", "glasses", "spectacles"},
       {"add eyeglasses", "give the person glasses", "put on a pair of eyeglasses",
        "let the person wear spectacles", "the face should wear glasses"},
       {"remove the eyeglasses", "take off the glasses", "get rid of the spectacles",
        "no more eyeglasses", "the person should not wear glasses"}},
      {"smile",
       {"smile", "smiling", "happy", "grin", "cheerful"},
       {"add a smile", "make the person smile", "give the face a big smile",
        "make the person look happy", "let the person grin"},
       {"remove the smile", "make the person stop smiling", "take away the grin",
        "the face should not smile", "wipe off the smile"}},
      {"age",
       {"age", "aged", "old", "older", "elderly", "young", "younger", "youthful"},
       {"make the person older", "make the face look aged", "turn the person into an elderly person",
        "let the person grow old", "make the person look older"},
       {"make the person younger", "make the face look youthful", "turn back the years to look young",
        "let the person look young again", "make the face younger"}},
      {"beard",
       {"beard", "bearded", "stubble"},
       {"add a beard", "give the person a beard", "let a beard grow", "put some stubble on the chin",
        "make the face bearded"},
       {"remove the beard", "shave off the beard", "get rid of the stubble", "take away the beard",
        "the face should have no beard"}},
      {"gray_hair",
       {"gray", "grey", "silver"},
       {"make the hair gray", "turn the hair gray", "give the person gray hair",
        "color the hair silver", "let the hair go grey"},
       {"remove the gray hair", "make the hair less gray", "get rid of the grey hair",
        "color over the silver hair", "no more gray hair"}},
      {"makeup",
       {"makeup", "lipstick"},
       {"add makeup", "put on some makeup", "give the person lipstick", "apply lipstick to the lips",
        "let the face wear makeup"},
       {"remove the makeup", "wipe off the lipstick", "take away the makeup",
        "get rid of the lipstick", "no more makeup"}},
      {"bald",
       {"bald", "baldness"},
       {"make the person bald", "shave the head bald", "turn the person bald",
        "give the person a bald head", "let the head go bald"},
       {"remove the baldness", "make the person not bald", "grow hair back on the bald head",
        "cover the bald spot with hair", "the head should no longer be bald"}},
  });
}

InstructionTemplateSet builtin_test_templates() {
  // Negative lists mirror the positive ones so the set shares the schema;
  // evaluation only draws from the positive direction. Words come from the
  // training vocabulary: the frozen table gives unseen words no meaning.
  auto make = [](std::string name, std::vector<std::string> kw, std::vector<std::string> pos) {
    return AttributeTemplates{std::move(name), std::move(kw), pos, pos};
  };
  return InstructionTemplateSet({
      make("bangs", {"bangs", "fringe"},
           {"give the face bangs", "put a fringe on the person", "let the hair have bangs",
            "cut some bangs", "the person should have a fringe"}),
      make("eyeglasses", {"eyeglasses", "glasses", "spectacles"},
           {"add glasses", "put spectacles on the face", "give the face a pair of glasses",
            "let the person wear eyeglasses", "the person should wear spectacles"}),
      make("smile", {"smile", "smiling", "happy", "grin", "cheerful"},
           {"add a big grin", "make the face smile", "give the person a smile",
            "let the face look happy", "the person should grin"}),
      make("age", {"age", "aged", "old", "older", "elderly", "young", "younger", "youthful"},
           {"make the face older", "let the face grow old", "turn the face elderly",
            "make the person look aged", "give the face an old look"}),
      make("beard", {"beard", "bearded", "stubble"},
           {"give the face a beard", "add some stubble", "let the person grow a beard",
            "put a beard on the chin", "make the person bearded"}),
      make("gray_hair", {"gray", "grey", "silver"},
           {"make the hair grey", "give the person silver hair", "turn the hair silver",
            "color the hair gray", "let the hair go gray"}),
      make("makeup", {"makeup", "lipstick"},
           {"give the person makeup", "put lipstick on the lips", "apply some makeup",
            "add lipstick", "let the person wear lipstick"}),
      make("bald", {"bald", "baldness"},
           {"make the head bald", "give the person baldness", "shave the person bald",
            "turn the head bald", "let the person go bald"}),
  });
}

std::string render_instruction(const InstructionTemplateSet& templates, int attr, int sign, Rng& rng) {
  const auto& list = templates.templates(attr, sign);
  if (list.empty()) throw std::invalid_argument("no templates for attribute");
  return list[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(list.size()) - 1))];
}

// ---------------------------------------------------------------------------
// Vocabulary / tokenization

Vocabulary::Vocabulary(std::vector<std::string> words, int size) : size_(size), words_(std::move(words)) {
  if (static_cast<int>(words_.size()) > size_ - 1)
    throw std::invalid_argument("vocabulary of " + std::to_string(words_.size()) +
                                " words exceeds size " + std::to_string(size_));
  for (size_t i = 0; i < words_.size(); ++i) {
    if (words_[i].empty()) throw std::invalid_argument("empty vocabulary word");
    if (!index_.emplace(words_[i], static_cast<int>(i) + 1).second)
      throw std::invalid_argument("duplicate vocabulary word: " + words_[i]);
  }
}

Vocabulary Vocabulary::from_templates(const std::vector<const InstructionTemplateSet*>& sets, int size) {
  std::set<std::string> words{kSeparator};
  for (const auto* s : sets)
    for (int a = 0; a < s->n_attributes(); ++a)
      for (int sign : {1, -1})
        for (const auto& t : s->templates(a, sign))
          for (auto& w : split_words(t)) words.insert(std::move(w));
  return Vocabulary(std::vector<std::string>(words.begin(), words.end()), size);
}

int Vocabulary::id(const std::string& word) const {
  const auto it = index_.find(word);
  if (it == index_.end()) throw std::invalid_argument("unknown word: '" + word + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id <= 0 || id > static_cast<int>(words_.size()))
    throw std::out_of_range("token id has no word: " + std::to_string(id));
  return words_[static_cast<size_t>(id) - 1];
}

std::string Vocabulary::fingerprint() const {
  std::string joined = std::to_string(size_);
  for (const auto& w : words_) joined += "\n" + w;
  return sha256_hex(joined);
}

int TokenSequence::token_count() const {
  return static_cast<int>(std::count_if(ids.begin(), ids.end(), [](int id) { return id != kPadId; }));
}

int TokenSequence::last_nonzero() const {
  for (int i = kSeqLen - 1; i >= 0; --i)
    if (ids[i] != kPadId) return i;
  return -1;
}

TokenSequence tokenize(const Vocabulary& vocab, const std::string& text) {
  const auto words = split_words(text);
  if (static_cast<int>(words.size()) > kSeqLen)
    throw std::length_error("instruction has " + std::to_string(words.size()) +
                            " tokens; the limit is 77");
  TokenSequence seq;
  for (size_t i = 0; i < words.size(); ++i) seq.ids[i] = vocab.id(words[i]);
  return seq;
}

std::string detokenize(const Vocabulary& vocab, const TokenSequence& seq) {
  std::string out;
  for (int id : seq.ids) {
    if (id == kPadId) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.word(id);
  }
  return out;
}

TokenSequence place_at(const TokenSequence& seq, int offset) {
  const int last = seq.last_nonzero();
  if (last < 0) return seq;
  offset = std::clamp(offset, 0, kSeqLen - 1 - last);
  TokenSequence out;
  out.start_offset = seq.start_offset + offset;
  for (int i = 0; i <= last; ++i) out.ids[i + offset] = seq.ids[i];
  return out;
}

TokenSequence place_with_tpr(const TokenSequence& seq, Rng& rng, int max_start) {
  const int last = seq.last_nonzero();
  if (last < 0) return seq;
  const int hi = std::min(std::max(max_start, 0), kSeqLen - 1 - last);
  return place_at(seq, rng.uniform_int(0, hi));
}

// ---------------------------------------------------------------------------
// Embedding

TextEmbedder::TextEmbedder(int vocab_size, int d_txt, uint64_t seed) : seed_(seed) {
  if (vocab_size <= 1 || d_txt <= 0) throw std::invalid_argument("invalid text embedder dims");
  Rng rng(derive_seed(seed, "token_table"));
  table_ = rng.normal_matrix(vocab_size, d_txt);
  table_.row(kPadId).setZero();
  round_to_float(table_);
}

double TextEmbedder::positional(int pos, int dim, int d_txt) {
  const int pair = dim / 2;
  const double angle = pos / std::pow(10000.0, 2.0 * pair / d_txt);
  return dim % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

TextEmbeddingSeq TextEmbedder::embed(const TokenSequence& seq) const {
  TextEmbeddingSeq out = TextEmbeddingSeq::Zero(kSeqLen, d_txt());
  for (int i = 0; i < kSeqLen; ++i) {
    const int id = seq.ids[i];
    if (id == kPadId) continue;
    if (id < 0 || id >= table_.rows()) throw std::out_of_range("token id out of range");
    for (int j = 0; j < d_txt(); ++j) out(i, j) = table_(id, j) + positional(i, j, d_txt());
  }
  return out;
}

std::string concat_instructions(const std::vector<std::string>& texts) {
  std::vector<std::string> parts;
  for (const auto& t : texts) {
    auto words = split_words(t);
    while (!words.empty() && words.back() == kSeparator) words.pop_back();
    if (words.empty()) continue;
    std::string joined;
    for (const auto& w : words) joined += (joined.empty() ? "" : " ") + w;
    parts.push_back(std::move(joined));
  }
  std::string out;
  size_t total = 0;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += " . ", ++total;
    out += parts[i];
    total += split_words(parts[i]).size();
  }
  if (total > static_cast<size_t>(kSeqLen))
    throw std::length_error("concatenated instruction overflows 77 tokens");
  return out;
}

}  // namespace editkit::text
