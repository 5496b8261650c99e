#include <gtest/gtest.h>

#include "oracles.hpp"
#include "rbg/model.hpp"
#include "rbg/reader.hpp"
#include "support.hpp"

using namespace rbg;

TEST(Reader, SingleTokenDocumentIsCertain)
{
    const Corpus c({make_document("d", "t", "x")});
    RbgModel<double> m(test::corpus_vocab(c), test::tiny_config());
    const auto in = build_pair_input(m.vocab(), m.vocab().tokenize("q"), c[0], 40);
    const auto s = predict_spans(m.params(), m.reader(), in, m.config().heads);
    ASSERT_EQ(s.start_probs.size(), 1u);
    EXPECT_EQ(s.start_probs[0], 1.0);
    EXPECT_EQ(s.end_probs[0], 1.0);
}

TEST(Reader, TruncatedDocumentIsAnError)
{
    const Corpus c({make_document("d", "long title here", "x y z")});
    RbgModel<double> m(test::corpus_vocab(c), test::tiny_config());
    const auto in = build_pair_input(m.vocab(), m.vocab().tokenize("q"), c[0], 4);
    EXPECT_EQ(in.body_count, 0u);
    try {
        (void)predict_spans(m.params(), m.reader(), in, m.config().heads);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_STREQ(e.what(), "document truncated away");
    }
}

TEST(Evidence, UniformSpansOverFourAndSixTokens)
{
    SpanDistributions<double> s{0, std::vector<double>(10, 0.1), std::vector<double>(10, 0.1)};
    const std::vector<TokenSpan> sents{{0, 4}, {4, 10}};
    const auto ev = sentence_evidence(s, sents);
    ASSERT_EQ(ev.size(), 2u);
    EXPECT_NEAR(ev[0], 0.4, 1e-15);
    EXPECT_NEAR(ev[1], 0.6, 1e-15);

    const std::vector<TokenSpan> one{{0, 10}};
    EXPECT_NEAR(sentence_evidence(s, one)[0], 1.0, 1e-15);
    const std::vector<TokenSpan> short_spans{{0, 4}, {4, 9}};
    EXPECT_THROW(sentence_evidence(s, short_spans), std::invalid_argument);
}

TEST(Evidence, CrossDocumentNormalization)
{
    const std::vector<std::vector<double>> one{{0.25, 0.75}};
    const std::vector<std::vector<TokenSpan>> one_spans{{{0, 1}, {1, 2}}};
    const auto k1 = normalize_across_docs(one, one_spans);
    EXPECT_EQ(k1.probs(), (std::vector<double>{0.25, 0.75}));

    const std::vector<std::vector<double>> two{{0.25, 0.75}, {1.0}};
    const std::vector<std::vector<TokenSpan>> two_spans{{{0, 1}, {1, 2}}, {{0, 3}}};
    const auto k2 = normalize_across_docs(two, two_spans);
    EXPECT_EQ(k2.probs(), (std::vector<double>{0.125, 0.375, 0.5}));
    EXPECT_EQ(k2.sentences[2].doc_index, 1u);

    const std::vector<std::vector<double>> zero{{0.0}};
    const std::vector<std::vector<TokenSpan>> zero_spans{{{0, 1}}};
    EXPECT_THROW(normalize_across_docs(zero, zero_spans), std::invalid_argument);
}

TEST(Evidence, MatchesTokenLoopOracle)
{
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const auto c = test::random_corpus(rng, 6, 4, 7);
        RbgModel<double> m(test::corpus_vocab(c), test::tiny_config(seed));
        const auto k = 1 + rng.uniform_index(4);
        std::vector<std::size_t> docs;
        for (std::size_t i = 0; i < k; ++i) {
            docs.push_back(rng.uniform_index(c.size()));
        }
        const auto ex = test::make_example(m.vocab(), test::random_text(rng, 1, 4), c, docs);
        const auto got = read_evidence(m, ex).probs();
        const auto want = oracle::evidence_by_token_loop(m, ex);
        ASSERT_EQ(got.size(), want.size());
        double sum = 0;
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_NEAR(got[i], want[i], 1e-12) << "seed " << seed;
            sum += got[i];
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}
