#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "editkit/text.hpp"

#include <set>

using namespace editkit;
using namespace editkit::text;

namespace {

// 0.99 quantile of chi-square with 30 degrees of freedom
constexpr double kChi2Df30 = 50.892;

const Vocabulary& vocab() {
  static const InstructionTemplateSet train = builtin_templates(), test = builtin_test_templates();
  static const Vocabulary v = Vocabulary::from_templates({&train, &test});
  return v;
}

double chi2(const std::vector<int>& counts, double expected) {
  double s = 0.0;
  for (int c : counts) s += (c - expected) * (c - expected) / expected;
  return s;
}

}  // namespace

TEST_CASE("builtin templates") {
  const auto t = builtin_templates();
  CHECK(t.n_attributes() >= 6);
  CHECK_NOTHROW(t.validate(5));
  CHECK_NOTHROW(builtin_test_templates().validate(5));
  for (int a = 0; a < t.n_attributes(); ++a)
    for (int s : {1, -1})
      for (const auto& line : t.templates(a, s)) CHECK(t.mentioned_attributes(line) == std::vector<int>{a});
  CHECK(t.find("bangs") >= 0);
  CHECK(t.find("wings") == -1);
  CHECK_THROWS_AS(t.templates(99, 1), std::out_of_range);
  CHECK_THROWS_AS(t.templates(0, 0), std::invalid_argument);

  // test paraphrases are new sentences over the training vocabulary
  const auto test = builtin_test_templates();
  const Vocabulary train_vocab = Vocabulary::from_templates({&t});
  for (int a = 0; a < test.n_attributes(); ++a)
    for (const auto& line : test.templates(a, 1)) {
      for (int s : {1, -1}) {
        const auto& train = t.templates(t.find(test.attribute(a).name), s);
        CHECK(std::find(train.begin(), train.end(), line) == train.end());
      }
      CHECK_NOTHROW(tokenize(train_vocab, line));
    }

  const auto back = InstructionTemplateSet::from_json(t.to_json());
  CHECK(back.to_json() == t.to_json());
  InstructionTemplateSet thin({{"bangs", {"bangs"}, {"add bangs"}, {"remove bangs"}}});
  CHECK_THROWS_AS(thin.validate(5), std::invalid_argument);
}

TEST_CASE("render instruction") {
  const auto t = builtin_templates();
  Rng a(11), b(11);
  CHECK(render_instruction(t, 2, 1, a) == render_instruction(t, 2, 1, b));
  Rng rng(12);
  for (int attr = 0; attr < t.n_attributes(); ++attr)
    for (int s : {1, -1}) {
      std::set<std::string> seen;
      for (int i = 0; i < 1000; ++i) {
        const std::string line = render_instruction(t, attr, s, rng);
        seen.insert(line);
        if (i < 20) CHECK_NOTHROW(tokenize(vocab(), line));
      }
      CHECK(seen.size() == t.templates(attr, s).size());
      CHECK(seen.size() >= 5);
    }
  CHECK_THROWS_AS(render_instruction(t, -1, 1, rng), std::out_of_range);
}

TEST_CASE("vocabulary and tokenizer") {
  const Vocabulary& v = vocab();
  CHECK(v.size() == 256);
  for (int id = 1; id <= static_cast<int>(v.words().size()); ++id) CHECK(v.id(v.word(id)) == id);
  CHECK_THROWS_AS(v.word(0), std::out_of_range);
  CHECK_THROWS_AS(v.id("zeppelin"), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary({"a", "a"}), std::invalid_argument);

  const TokenSequence empty = tokenize(v, "");
  CHECK(empty.token_count() == 0);
  CHECK(empty.last_nonzero() == -1);
  CHECK(empty.start_offset == 0);

  const Vocabulary small({"a", "add", "and", "bangs", "smile", "."});
  const TokenSequence s = tokenize(small, "Add bangs and add a smile");
  CHECK(s.token_count() == 6);
  CHECK(s.last_nonzero() == 5);
  CHECK(detokenize(small, s) == "add bangs and add a smile");
  CHECK_THROWS_AS(tokenize(small, "add wings"), std::invalid_argument);
  std::string long_text;
  for (int i = 0; i < 78; ++i) long_text += "a ";
  CHECK_THROWS_AS(tokenize(small, long_text), std::length_error);

  const auto t = builtin_templates();
  for (int a = 0; a < t.n_attributes(); ++a)
    for (int sg : {1, -1})
      for (const auto& line : t.templates(a, sg)) {
        std::string norm;
        for (const auto& w : split_words(line)) norm += (norm.empty() ? "" : " ") + w;
        CHECK(detokenize(v, tokenize(v, line)) == norm);
      }
}

TEST_CASE("token position randomization") {
  const Vocabulary& v = vocab();
  const TokenSequence s = tokenize(v, "add bangs");
  CHECK(place_at(s, 0) == s);
  CHECK(place_at(s, 500).last_nonzero() == 76);

  Rng rng(13);
  std::vector<int> counts(31, 0);
  for (int i = 0; i < 10000; ++i) {
    const TokenSequence p = place_with_tpr(s, rng);
    REQUIRE(p.last_nonzero() < 77);
    const int off = p.start_offset;
    REQUIRE(off >= 0);
    REQUIRE(off <= 30);
    ++counts[off];
    CHECK(p.ids[off] == s.ids[0]);
    CHECK(p.ids[off + 1] == s.ids[1]);
    CHECK(p.token_count() == 2);
  }
  CHECK(chi2(counts, 10000.0 / 31) < kChi2Df30);

  // long instruction: range clamped so the last token stays in place
  std::string text;
  for (int i = 0; i < 37; ++i) text += "add bangs ";
  const TokenSequence longseq = tokenize(v, text.substr(0, text.size() - 1) + " .");
  REQUIRE(longseq.last_nonzero() == 74);
  std::set<int> offsets;
  for (int i = 0; i < 2000; ++i) {
    const TokenSequence p = place_with_tpr(longseq, rng);
    CHECK(p.last_nonzero() <= 76);
    offsets.insert(p.start_offset);
  }
  CHECK(offsets == std::set<int>{0, 1, 2});
  CHECK(place_with_tpr(TokenSequence{}, rng).token_count() == 0);
}

TEST_CASE("embedding") {
  const Vocabulary& v = vocab();
  const TextEmbedder e(v.size(), 16, 21);
  CHECK(e.embed(TokenSequence{}).cwiseAbs().maxCoeff() == 0.0);
  const TokenSequence s = tokenize(v, "give the person bangs");
  const MatrixD a = e.embed(s);
  CHECK(a == e.embed(s));
  for (int i = 0; i < kSeqLen; ++i) CHECK((a.row(i).cwiseAbs().maxCoeff() == 0.0) == (s.ids[i] == kPadId));
  const MatrixD shifted = e.embed(place_at(s, 10));
  for (int i = 0; i < 4; ++i) CHECK((shifted.row(10 + i) - a.row(i)).norm() > 1e-3);
  CHECK(TextEmbedder(v.size(), 16, 21).embed(s) == a);
  CHECK(TextEmbedder(v.size(), 16, 22).embed(s) != a);
  TokenSequence bad;
  bad.ids[0] = 999;
  CHECK_THROWS_AS(e.embed(bad), std::out_of_range);

  // distinct (token, position) pairs give distinct rows
  std::set<std::vector<double>> rows;
  int used = 0;
  for (int id = 1; id <= static_cast<int>(v.words().size()); id += 7) {
    TokenSequence one;
    one.ids[0] = id;
    for (int off : {0, 5, 30}) {
      const MatrixD m = e.embed(place_at(one, off));
      std::vector<double> r(16);
      for (int j = 0; j < 16; ++j) r[j] = m(off, j);
      rows.insert(r);
      ++used;
    }
  }
  CHECK(static_cast<int>(rows.size()) == used);
}

TEST_CASE("concatenation") {
  CHECK(concat_instructions({"add bangs"}) == "add bangs");
  CHECK(concat_instructions({"add bangs ."}) == "add bangs");
  CHECK(concat_instructions({"add bangs", "add a smile"}) == "add bangs . add a smile");
  std::string big;
  for (int i = 0; i < 40; ++i) big += "a ";
  CHECK_THROWS_AS(concat_instructions({big, big}), std::length_error);

  // every 3-instruction composite of the builtin templates fits
  const auto t = builtin_templates();
  size_t longest[3] = {0, 0, 0};
  std::string pick[3];
  for (int a = 0; a < t.n_attributes(); ++a)
    for (int s : {1, -1})
      for (const auto& line : t.templates(a, s)) {
        const size_t n = split_words(line).size();
        for (int slot = 0; slot < 3; ++slot)
          if (n > longest[slot]) {
            for (int j = 2; j > slot; --j) longest[j] = longest[j - 1], pick[j] = pick[j - 1];
            longest[slot] = n, pick[slot] = line;
            break;
          }
      }
  const std::string worst = concat_instructions({pick[0], pick[1], pick[2]});
  CHECK(tokenize(vocab(), worst).token_count() <= kSeqLen);
  CHECK(longest[0] + longest[1] + longest[2] + 2 <= static_cast<size_t>(kSeqLen));
}
