#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "rbg/model.hpp"
#include "support.hpp"

using namespace rbg;

namespace {

struct Fixture {
    Corpus corpus;
    RbgModel<double> model;
    Example example;
};

Fixture make_fixture(std::uint64_t seed, std::size_t k, ModelConfig cfg = test::tiny_config())
{
    Rng rng(seed);
    auto c = test::random_corpus(rng, 6, 3, 5);
    cfg.seed = seed;
    RbgModel<double> m(test::corpus_vocab(c), cfg);
    std::vector<std::size_t> docs;
    for (std::size_t i = 0; i < k; ++i) {
        docs.push_back(i % c.size());
    }
    Fixture f{std::move(c), std::move(m), {}};
    f.example = test::make_example(f.model.vocab(), test::random_text(rng, 1, 4), f.corpus, docs);
    return f;
}

double sum(const std::vector<double>& v)
{
    double s = 0;
    for (double x : v) {
        s += x;
    }
    return s;
}

}  // namespace

TEST(Copy, SpreadsSentenceMassOverTokens)
{
    // One document: three marker/title positions, then "a a b" (sentence 0) and "c" (sentence 1).
    const int a = 8, b = 9, c = 10;
    BankLayout layout;
    layout.lengths = {7};
    layout.sentence_counts = {2};
    layout.alignment = {{0, 5, -1}, {0, 6, -1}, {0, 7, -1}, {0, a, 0}, {0, a, 0}, {0, b, 0}, {0, c, 1}};
    const std::vector<std::vector<double>> scores{{0.9, 0.1}};
    const std::vector<std::vector<TokenSpan>> spans{{{0, 3}, {3, 4}}};
    const auto ev = normalize_across_docs(scores, spans);

    const auto p = copy_distribution(ev, layout, CopyNorm::spread, 12);
    EXPECT_NEAR(p[a], 0.6, 1e-15);
    EXPECT_NEAR(p[b], 0.3, 1e-15);
    EXPECT_NEAR(p[c], 0.1, 1e-15);
    EXPECT_NEAR(sum(p), 1.0, 1e-15);

    const auto oracle = oracle::spread_copy({{a, a, b}, {c}}, {0.9, 0.1});
    for (const auto& [tok, prob] : oracle) {
        EXPECT_NEAR(p[static_cast<std::size_t>(tok)], prob, 1e-15);
    }

    // raw-renorm: 1.8, 0.9, 0.1 over a total of 2.8.
    const auto r = copy_distribution(ev, layout, CopyNorm::raw_renorm, 12);
    EXPECT_NEAR(r[a], 1.8 / 2.8, 1e-15);
    EXPECT_NEAR(r[b], 0.9 / 2.8, 1e-15);
    EXPECT_NEAR(r[c], 0.1 / 2.8, 1e-15);
}

TEST(Copy, TwoTokenSentenceSplitsEvenly)
{
    BankLayout layout{{2}, {1}, {{0, 8, 0}, {0, 9, 0}}};
    const std::vector<std::vector<double>> scores{{1.0}};
    const std::vector<std::vector<TokenSpan>> spans{{{0, 2}}};
    const auto p = copy_distribution(normalize_across_docs(scores, spans), layout, CopyNorm::spread, 10);
    EXPECT_EQ(p[8], 0.5);
    EXPECT_EQ(p[9], 0.5);
}

TEST(DecodeStep, DistributionsAndGateEndpoints)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto f = make_fixture(seed, 1 + seed % 3);
        const auto bank = encode_all(f.model, f.example);
        const auto ev = read_evidence(f.model, f.example);
        const std::vector<int> prefix{Vocabulary::bos, 9, 10};
        const auto out = decode_step(f.model, bank, prefix, ev);
        EXPECT_NEAR(sum(out.vocab_probs), 1.0, 1e-12);
        EXPECT_NEAR(sum(out.copy_probs), 1.0, 1e-12);
        EXPECT_NEAR(sum(out.mixture), 1.0, 1e-12);
        EXPECT_NEAR(sum(out.attention), 1.0, 1e-12);
        EXPECT_GT(out.gate, 0.0);
        EXPECT_LT(out.gate, 1.0);
        for (std::size_t w = 0; w < out.mixture.size(); ++w) {
            EXPECT_NEAR(out.mixture[w], out.gate * out.vocab_probs[w] + (1 - out.gate) * out.copy_probs[w], 1e-15);
        }

        const auto gen_only = decode_step(f.model, bank, prefix, ev, std::optional<double>(1.0));
        EXPECT_EQ(gen_only.mixture, gen_only.vocab_probs);
        const auto copy_only = decode_step(f.model, bank, prefix, ev, std::optional<double>(0.0));
        EXPECT_EQ(copy_only.mixture, copy_only.copy_probs);
        EXPECT_TRUE(gen_only.attention.empty());
    }
}

TEST(DecodeStep, RejectsEvidenceForOtherDocuments)
{
    auto f = make_fixture(1, 2);
    const auto bank = encode_all(f.model, f.example);
    auto one = f.example;
    one.docs.resize(1);
    const auto ev = read_evidence(f.model, one);
    const std::vector<int> prefix{Vocabulary::bos};
    EXPECT_THROW(decode_step(f.model, bank, prefix, ev), std::invalid_argument);
}

TEST(Fusion, SingleDocumentEqualsPlainEncoderDecoder)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto f = make_fixture(seed, 1);
        const auto bank = encode_all(f.model, f.example);
        const auto ev = read_evidence(f.model, f.example);
        const std::vector<int> prefix{Vocabulary::bos, 8, 11};
        const auto fid = decode_step(f.model, bank, prefix, ev);

        // Plain path: one encoder pass over the single input, decoder on top.
        Tape<double> t(false);
        Graph<double> g(t, f.model.params());
        const auto in = build_pair_input(f.model.vocab(), f.example.question, *f.example.docs[0],
                                         static_cast<std::size_t>(f.model.config().max_source));
        Var h_enc = encode_sequence(g, f.model.generator().encoder, in.ids, f.model.config().heads);
        const auto mem = project_memory(g, f.model.generator().decoder, h_enc);
        Var h = decode_sequence(g, f.model.generator().decoder, prefix, mem, f.model.config().heads);
        Var last = t.slice_rows(h, t.value(h).rows() - 1, 1);
        Var probs = t.softmax_rows(linear(g, f.model.generator().lm_head, last));

        EXPECT_TRUE(bank.states == t.value(h_enc)) << "seed " << seed;
        EXPECT_EQ(fid.h_dec, row_vector<double>(t.value(last))) << "seed " << seed;
        EXPECT_EQ(fid.vocab_probs, row_vector<double>(t.value(probs))) << "seed " << seed;
    }
}

TEST(Fusion, DocumentsAreEncodedIndependently)
{
    auto f = make_fixture(4, 3);
    const auto before = encode_all(f.model, f.example);
    const auto other = make_document("zz", "t0", "w1 w2 w3. w4");
    f.example.docs[2] = &other;
    const auto after = encode_all(f.model, f.example);
    EXPECT_TRUE(before.blocks[0] == after.blocks[0]);
    EXPECT_TRUE(before.blocks[1] == after.blocks[1]);
    EXPECT_FALSE(before.blocks[2] == after.blocks[2]);
    EXPECT_THROW(encode_all(f.model, Example{f.example.question, {}}), std::invalid_argument);
}

TEST(Fusion, EncoderAttentionGrowsLinearlyInK)
{
    auto f = make_fixture(2, 1);
    ForwardStats one;
    (void)encode_all(f.model, f.example, &one);
    for (std::size_t k : {2, 4, 8}) {
        Example ex{f.example.question, std::vector<const Document*>(k, f.example.docs[0])};
        ForwardStats s;
        (void)encode_all(f.model, ex, &s);
        EXPECT_EQ(s.encoder_attention_entries, k * one.encoder_attention_entries);
    }
}

TEST(Decoding, IncrementalStepsMatchFullRecompute)
{
    auto f = make_fixture(6, 2);
    const auto bank = encode_all(f.model, f.example);
    const auto ev = read_evidence(f.model, f.example);
    DecodingContext<double> ctx(f.model, f.example, RunOptions{});
    DecoderCache<double> cache;
    std::vector<int> prefix{Vocabulary::bos};
    for (int tok : {9, 12, 8, 10}) {
        const auto inc = ctx.step(cache, prefix.back());
        const auto full = decode_step(f.model, bank, prefix, ev).mixture;
        ASSERT_EQ(inc.size(), full.size());
        for (std::size_t w = 0; w < inc.size(); ++w) {
            EXPECT_NEAR(inc[w], full[w], 1e-12);
        }
        prefix.push_back(tok);
    }
}

TEST(Decoding, BeamOneIsGreedy)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto f = make_fixture(seed, 2);
        const auto greedy = generate_greedy(f.model, f.example, 12);
        const auto beam = generate(f.model, f.example, DecodeConfig{1, 12});
        EXPECT_EQ(greedy, beam) << "seed " << seed;
    }
}

TEST(Decoding, BeamSearchOnAScriptedDistribution)
{
    // Step 0: A=0.6, B=0.4. After A: EOS=0.5, x=0.5. After B: EOS=0.9.
    // Greedy picks A then stalls at 0.3; beam 2 finds B EOS at 0.36.
    const int eos = 2, A = 3, B = 4, X = 5;
    using State = std::vector<int>;
    auto step = [&](State& s, int tok) {
        s.push_back(tok);
        std::vector<double> p(6, 1e-9);
        if (s.size() == 1) {
            p[A] = 0.6;
            p[B] = 0.4;
        } else if (s.back() == A) {
            p[eos] = 0.5;
            p[X] = 0.5;
        } else if (s.back() == B) {
            p[eos] = 0.9;
            p[X] = 0.1;
        } else {
            p[eos] = 1.0;
        }
        return p;
    };
    const auto best = beam_search(State{}, step, 1, eos, 2, 5);
    EXPECT_EQ(best.tokens, std::vector<int>{B});
    EXPECT_NEAR(best.score, std::log(0.4 * 0.9), 1e-12);
    const auto greedy = beam_search(State{}, step, 1, eos, 1, 5);
    EXPECT_EQ(greedy.tokens, std::vector<int>{A});
    EXPECT_THROW(beam_search(State{}, step, 1, eos, 0, 5), std::invalid_argument);
}

TEST(Loss, UniformVocabularyGivesLogV)
{
    auto f = make_fixture(3, 2);
    auto& ps = f.model.params();
    const auto& head = f.model.generator().lm_head;
    ps[head.weight].value.setZero();
    ps[head.bias].value.setZero();
    const std::vector<int> target{Vocabulary::bos, 9, 10, Vocabulary::eos};
    RunOptions no_copy;
    no_copy.gate_override = 1.0;
    const double loss = sequence_loss_value(f.model, f.example, target, no_copy);
    EXPECT_NEAR(loss, std::log(double(f.model.vocab().size())), 1e-12);
    EXPECT_THROW(sequence_loss_value(f.model, f.example, std::vector<int>{9, 10}), std::invalid_argument);
}

TEST(Instrumentation, FixedGateSkipsReaderAndGate)
{
    auto f = make_fixture(5, 3);
    RunOptions off;
    off.gate_override = 1.0;
    ForwardStats s;
    auto grads = f.model.params().zero_grads();
    const std::vector<int> target{Vocabulary::bos, 9, Vocabulary::eos};
    (void)loss_and_grad(f.model, f.example, target, off, grads, 1.0, &s);
    EXPECT_EQ(s.reader_calls, 0u);
    EXPECT_EQ(s.gate_evaluations, 0u);
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (f.model.params()[i].name.rfind("reader.", 0) == 0 ||
            f.model.params()[i].name.rfind("gen.gate", 0) == 0) {
            EXPECT_EQ(grads[i].norm(), 0.0) << f.model.params()[i].name;
        }
    }
    ForwardStats on;
    (void)loss_and_grad(f.model, f.example, target, RunOptions{}, grads, 1.0, &on);
    EXPECT_EQ(on.reader_calls, 3u);
    EXPECT_EQ(on.gate_evaluations, 2u);
}

TEST(Checkpoint, RoundTripIsExact)
{
    auto f = make_fixture(7, 2);
    const auto path = (std::filesystem::temp_directory_path() / "rbg_model.ckpt").string();
    save_checkpoint(path, f.model);
    const auto back = load_checkpoint<double>(path);
    EXPECT_TRUE(back.vocab() == f.model.vocab());
    ASSERT_EQ(back.params().size(), f.model.params().size());
    for (std::size_t i = 0; i < back.params().size(); ++i) {
        EXPECT_TRUE(back.params()[i].value == f.model.params()[i].value) << back.params()[i].name;
    }
    const std::vector<int> target{Vocabulary::bos, 9, Vocabulary::eos};
    EXPECT_EQ(sequence_loss_value(back, f.example, target), sequence_loss_value(f.model, f.example, target));
}
