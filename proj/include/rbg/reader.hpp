#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "corpus.hpp"
#include "input.hpp"
#include "nn.hpp"

namespace rbg {

/// Encoder plus start/end heads (d -> 1 each).
struct ReaderSlots {
    EncoderSlots encoder;
    LinearSlots start;
    LinearSlots end;
};

template <typename T>
ReaderSlots add_reader(ParameterSet<T>& ps, int vocab_size, int layers, const TransformerShape& shape, Rng& rng)
{
    ReaderSlots r;
    const auto table = ps.add("reader.embed", random_matrix<T>(vocab_size, shape.d_model, 1.0, rng));
    r.encoder = add_encoder(ps, "reader.encoder", table, layers, shape, rng);
    r.start = add_linear(ps, "reader.start", shape.d_model, 1, rng);
    r.end = add_linear(ps, "reader.end", shape.d_model, 1, rng);
    return r;
}

/// Start/end distributions over the surviving body tokens of one document.
template <typename T>
struct SpanDistributions {
    std::size_t doc_index = 0;
    std::vector<T> start_probs;
    std::vector<T> end_probs;
};

/// Tape handles produced by the reader for one (question, document) pair.
struct SpanVars {
    Var start_full;  // 1 x input length, zero outside the body
    Var end_full;
    Var start;  // 1 x body_count
    Var end;
};

inline AttentionMask body_mask(const PairInput& in)
{
    std::vector<std::uint8_t> allowed(in.ids.size(), 0);
    for (std::size_t i = 0; i < in.body_count; ++i) {
        allowed[in.body_begin + i] = 1;
    }
    return AttentionMask::columns(std::move(allowed));
}

template <typename T>
SpanVars predict_spans(Graph<T>& g, const ReaderSlots& r, const PairInput& in, int heads)
{
    if (in.body_count == 0) {
        throw std::invalid_argument("document truncated away");
    }
    auto& t = g.tape;
    ++t.stats.reader_calls;
    // The reader's encoder does not count toward the generator's attention budget.
    const auto saved = t.stats.encoder_attention_entries;
    Var h = encode_sequence(g, r.encoder, in.ids, heads);
    t.stats.encoder_attention_entries = saved;
    const auto mask = body_mask(in);
    SpanVars s;
    s.start_full = t.softmax_rows(t.transpose(linear(g, r.start, h)), mask);
    s.end_full = t.softmax_rows(t.transpose(linear(g, r.end, h)), mask);
    const auto b = static_cast<Eigen::Index>(in.body_begin);
    const auto n = static_cast<Eigen::Index>(in.body_count);
    s.start = t.slice_cols(s.start_full, b, n);
    s.end = t.slice_cols(s.end_full, b, n);
    return s;
}

/// Per-sentence evidence: half the start plus end mass over each sentence's tokens.
template <typename T>
Var sentence_evidence(Tape<T>& t, Var start, Var end, std::span<const TokenSpan> sentences)
{
    const auto n = t.value(start).cols();
    if (t.value(end).cols() != n) {
        throw std::invalid_argument("start/end length mismatch");
    }
    if (sentences.empty() || static_cast<Eigen::Index>(sentences.back().end) != n) {
        throw std::invalid_argument("sentence spans do not align with span distributions");
    }
    std::vector<SparseEntry<T>> entries;
    entries.reserve(static_cast<std::size_t>(n));
    for (std::size_t s = 0; s < sentences.size(); ++s) {
        for (std::size_t i = sentences[s].begin; i < sentences[s].end; ++i) {
            entries.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(s), T(0.5)});
        }
    }
    return t.sparse_map(t.add(start, end), std::move(entries), static_cast<Eigen::Index>(sentences.size()));
}

/// Concatenates per-document sentence scores and renormalizes them to sum to one.
template <typename T>
Var normalize_across_docs(Tape<T>& t, std::span<const Var> per_doc)
{
    if (per_doc.empty()) {
        throw std::invalid_argument("no documents to normalize");
    }
    Var all = per_doc.size() == 1 ? per_doc[0] : t.concat_cols(per_doc);
    return t.normalize_sum(all);
}

// ---- value-level API ----------------------------------------------------------

struct EvidenceSentence {
    std::size_t doc_index = 0;
    TokenSpan span;
    double prob = 0;
};

/// Sentence probabilities across all K documents, ordered by (doc, sentence start).
struct EvidenceDistribution {
    std::vector<EvidenceSentence> sentences;
    std::vector<std::vector<double>> per_doc_scores;

    [[nodiscard]] std::size_t doc_count() const { return per_doc_scores.size(); }

    [[nodiscard]] std::vector<double> probs() const
    {
        std::vector<double> p;
        p.reserve(sentences.size());
        for (const auto& s : sentences) {
            p.push_back(s.prob);
        }
        return p;
    }
};

template <typename T>
Matrix<T> row_matrix(std::span<const T> v)
{
    Matrix<T> m(1, static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
        m(0, static_cast<Eigen::Index>(i)) = v[i];
    }
    return m;
}

template <typename T>
std::vector<T> row_vector(const Matrix<T>& m)
{
    return {m.data(), m.data() + m.size()};
}

template <typename T>
SpanDistributions<T> predict_spans(const ParameterSet<T>& params, const ReaderSlots& r, const PairInput& in,
                                   int heads, std::size_t doc_index = 0)
{
    Tape<T> t(false);
    Graph<T> g(t, params);
    const auto s = predict_spans(g, r, in, heads);
    return {doc_index, row_vector<T>(t.value(s.start)), row_vector<T>(t.value(s.end))};
}

template <typename T>
std::vector<T> sentence_evidence(const SpanDistributions<T>& spans, std::span<const TokenSpan> clipped)
{
    if (spans.start_probs.size() != spans.end_probs.size()) {
        throw std::invalid_argument("start/end length mismatch");
    }
    Tape<T> t(false);
    Var s = t.constant(row_matrix<T>(spans.start_probs));
    Var e = t.constant(row_matrix<T>(spans.end_probs));
    return row_vector<T>(t.value(sentence_evidence(t, s, e, clipped)));
}

inline EvidenceDistribution make_evidence(std::span<const std::vector<double>> per_doc_scores,
                                          std::span<const std::vector<TokenSpan>> per_doc_spans,
                                          std::span<const double> normalized)
{
    EvidenceDistribution ev;
    std::size_t at = 0;
    for (std::size_t d = 0; d < per_doc_scores.size(); ++d) {
        ev.per_doc_scores.push_back(per_doc_scores[d]);
        for (std::size_t s = 0; s < per_doc_scores[d].size(); ++s) {
            ev.sentences.push_back({d, per_doc_spans[d][s], normalized[at++]});
        }
    }
    return ev;
}

inline EvidenceDistribution normalize_across_docs(std::span<const std::vector<double>> per_doc_scores,
                                                  std::span<const std::vector<TokenSpan>> per_doc_spans)
{
    if (per_doc_scores.empty()) {
        throw std::invalid_argument("no documents to normalize");
    }
    if (per_doc_spans.size() != per_doc_scores.size()) {
        throw std::invalid_argument("per-document scores and spans disagree");
    }
    Tape<double> t(false);
    std::vector<Var> parts;
    for (std::size_t d = 0; d < per_doc_scores.size(); ++d) {
        if (per_doc_scores[d].empty() || per_doc_scores[d].size() != per_doc_spans[d].size()) {
            throw std::invalid_argument("empty or misaligned per-document scores");
        }
        parts.push_back(t.constant(row_matrix<double>(per_doc_scores[d])));
    }
    Var all = parts.size() == 1 ? parts[0] : t.concat_cols(parts);
    if (!(t.value(all).sum() > 0.0)) {
        throw std::invalid_argument("evidence scores sum to zero");
    }
    const auto norm = row_vector<double>(t.value(t.normalize_sum(all)));
    return make_evidence(per_doc_scores, per_doc_spans, norm);
}

}  // namespace rbg
