#pragma once

#include <span>
#include <vector>

#include "corpus.hpp"

namespace rbg {

/// Token ids of "question: Q title: T context: body", right-truncated, plus
/// where the surviving body tokens sit.
struct PairInput {
    std::vector<int> ids;
    std::size_t body_begin = 0;
    std::size_t body_count = 0;
};

inline PairInput build_pair_input(const Vocabulary& vocab, std::span<const int> question, const Document& doc,
                                  std::size_t max_len)
{
    PairInput in;
    in.ids.push_back(Vocabulary::question_marker);
    in.ids.insert(in.ids.end(), question.begin(), question.end());
    in.ids.push_back(Vocabulary::title_marker);
    for (const auto& w : doc.title_words) {
        in.ids.push_back(vocab.id(w));
    }
    in.ids.push_back(Vocabulary::context_marker);
    in.body_begin = in.ids.size();
    for (const auto& w : doc.words) {
        in.ids.push_back(vocab.id(w));
    }
    if (in.ids.size() > max_len) {
        in.ids.resize(max_len);
    }
    in.body_count = in.ids.size() > in.body_begin ? in.ids.size() - in.body_begin : 0;
    if (in.body_begin > in.ids.size()) {
        in.body_begin = in.ids.size();
    }
    return in;
}

/// Sentence spans clipped to the first `body_count` tokens; sentences that
/// lose every token are dropped.
inline std::vector<TokenSpan> clip_sentences(std::span<const TokenSpan> sentences, std::size_t body_count)
{
    std::vector<TokenSpan> out;
    for (const auto& s : sentences) {
        if (s.begin >= body_count) {
            break;
        }
        out.push_back({s.begin, std::min(s.end, body_count)});
    }
    return out;
}

}  // namespace rbg
