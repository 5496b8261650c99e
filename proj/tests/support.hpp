#pragma once

// Test-only helpers: seeded fixtures and a central finite-difference oracle
// that never touches the tape's backward pass.

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rbg/corpus.hpp"
#include "rbg/model.hpp"
#include "rbg/nn.hpp"
#include "rbg/retrieval.hpp"
#include "rbg/rng.hpp"

namespace rbg::test {

/// Central difference of f with respect to ps[slot].value(index).
inline double central_difference(ParameterSet<double>& ps, std::size_t slot, Eigen::Index index,
                                 const std::function<double()>& f, double h = 1e-5)
{
    double& x = ps[slot].value.data()[index];
    const double saved = x;
    x = saved + h;
    const double up = f();
    x = saved - h;
    const double down = f();
    x = saved;
    return (up - down) / (2 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Random words from a small alphabet, joined into sentences.
inline std::string random_text(Rng& rng, std::size_t sentences, std::size_t max_words, std::size_t alphabet = 12)
{
    std::string out;
    for (std::size_t s = 0; s < sentences; ++s) {
        const auto n = 1 + rng.uniform_index(max_words);
        for (std::size_t w = 0; w < n; ++w) {
            if (!out.empty()) {
                out += ' ';
            }
            out += "w" + std::to_string(rng.uniform_index(alphabet));
        }
        out += '.';
    }
    return out;
}

inline Corpus random_corpus(Rng& rng, std::size_t docs, std::size_t max_sentences = 3, std::size_t max_words = 6)
{
    std::vector<Document> out;
    for (std::size_t i = 0; i < docs; ++i) {
        const auto n = 1 + rng.uniform_index(max_sentences);
        char id[32];
        std::snprintf(id, sizeof id, "d%03zu", i);
        out.push_back(make_document(id, "t" + std::to_string(i % 7), random_text(rng, n, max_words)));
    }
    return Corpus(std::move(out));
}

/// Sentences like "w3 w1 Kilo w7 w2." with a capitalized name after the
/// first word, so every sentence passes the entity filter.
inline Corpus entity_corpus(Rng& rng, std::size_t docs, std::size_t sentences, std::size_t alphabet = 30)
{
    static const char* names[] = {"Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot", "Golf", "Hotel",
                                  "India", "Juliet", "Kilo", "Lima", "Mike", "November", "Oscar", "Papa"};
    std::vector<Document> out;
    for (std::size_t d = 0; d < docs; ++d) {
        std::string text;
        for (std::size_t s = 0; s < sentences; ++s) {
            const auto n = 5 + rng.uniform_index(8);
            const auto at = 1 + rng.uniform_index(n - 1);
            for (std::size_t w = 0; w < n; ++w) {
                text += text.empty() ? "" : " ";
                text += w == at ? std::string(names[rng.uniform_index(16)])
                                : "w" + std::to_string(rng.uniform_index(alphabet));
            }
            text += '.';
        }
        char id[32];
        std::snprintf(id, sizeof id, "e%04zu", d);
        out.push_back(make_document(id, names[d % 16], text));
    }
    return Corpus(std::move(out));
}

inline Vocabulary corpus_vocab(const Corpus& c)
{
    return build_vocabulary(c, std::span<const Question>(), 1);
}

/// Reserved tokens plus "w0".."w{n-2}" and ".", so the size is exact.
inline Vocabulary sized_vocab(std::size_t size)
{
    std::vector<std::string> toks = Vocabulary::reserved_tokens();
    while (toks.size() + 1 < size) {
        toks.push_back("w" + std::to_string(toks.size() - Vocabulary::reserved_count));
    }
    toks.push_back(".");
    return Vocabulary(std::move(toks));
}

inline ModelConfig tiny_config(std::uint64_t seed = 1)
{
    ModelConfig c;
    c.d_model = 8;
    c.heads = 2;
    c.ffn_dim = 16;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.reader_layers = 1;
    c.max_source = 40;
    c.seed = seed;
    return c;
}

inline Example make_example(const Vocabulary& v, const std::string& question, const Corpus& c,
                            std::span<const std::size_t> doc_indices)
{
    Example ex;
    ex.question = v.tokenize(question);
    for (auto i : doc_indices) {
        ex.docs.push_back(&c[i]);
    }
    return ex;
}

inline std::vector<int> target_ids(const Vocabulary& v, const std::string& text)
{
    std::vector<int> t{Vocabulary::bos};
    const auto body = v.tokenize(text);
    t.insert(t.end(), body.begin(), body.end());
    t.push_back(Vocabulary::eos);
    return t;
}

/// Synthetic copy task: every answer is a verbatim sentence of one of the K
/// documents handed to its question. Question i asks about the unique key
/// word "k<i>" that appears only in its answer sentence.
struct CopyTask {
    Corpus corpus;
    std::vector<Question> train;
    std::vector<Question> valid;
    std::map<std::string, RetrievedSet> retrieved;

    [[nodiscard]] RetrievedSet retrieve(const Question& q, std::size_t k) const
    {
        auto r = retrieved.at(q.q_id);
        r.docs.resize(std::min(k, r.docs.size()));
        return r;
    }
};

/// QA pairs whose answer is a verbatim sentence of the gold document. Each
/// document answers two questions about different sentences, and a question
/// quotes `cues` words of its sentence, so the evidence depends on the question.
inline CopyTask copy_task(std::uint64_t seed, std::size_t pairs, std::size_t valid, std::size_t k = 3,
                          std::size_t alphabet = 150, std::size_t cues = 2)
{
    constexpr std::size_t sentences = 3;
    constexpr std::size_t per_doc = 2;
    Rng rng(seed);
    auto sentence = [&] {
        std::vector<std::string> s(5 + rng.uniform_index(3));
        for (auto& w : s) {
            w = "w" + std::to_string(rng.uniform_index(alphabet));
        }
        return s;
    };
    auto join = [](const std::vector<std::string>& ws) {
        std::string s;
        for (const auto& w : ws) {
            s += (s.empty() ? "" : " ") + w;
        }
        return s + ".";
    };
    const std::size_t n_docs = std::max(k, (pairs + per_doc - 1) / per_doc);
    std::vector<Document> docs;
    std::vector<std::vector<std::vector<std::string>>> body;
    for (std::size_t d = 0; d < n_docs; ++d) {
        body.emplace_back();
        std::string text;
        for (std::size_t s = 0; s < sentences; ++s) {
            body.back().push_back(sentence());
            text += (s ? " " : "") + join(body.back().back());
        }
        char id[32];
        std::snprintf(id, sizeof id, "c%04zu", d);
        docs.push_back(make_document(id, "topic " + std::to_string(d % 5), text));
    }
    CopyTask task{Corpus(std::move(docs)), {}, {}, {}};
    std::vector<std::size_t> first_slot(n_docs);
    for (auto& f : first_slot) {
        f = rng.uniform_index(sentences);
    }
    for (std::size_t i = 0; i < pairs; ++i) {
        const auto d = i % n_docs;
        const auto slot = (first_slot[d] + i / n_docs) % sentences;
        const auto& words = body[d][slot];
        std::string text = "what is said about";
        for (std::size_t c = 0; c < cues; ++c) {
            text += " " + words[rng.uniform_index(words.size())];
        }
        const auto& gold = task.corpus[d].doc_id;
        Question q{"q" + std::to_string(i), text, {join(words)}, std::vector<std::string>{gold}};
        // The gold document sits at a random rank among K-1 neighbours.
        std::vector<std::string> ids{gold};
        for (std::size_t j = 1; j < k; ++j) {
            ids.push_back(task.corpus[(d + j) % n_docs].doc_id);
        }
        std::swap(ids[0], ids[rng.uniform_index(ids.size())]);
        RetrievedSet r{q.q_id, {}, RetrievalMode::dense};
        for (std::size_t j = 0; j < ids.size(); ++j) {
            r.docs.push_back({ids[j], double(k - j)});
        }
        task.retrieved.emplace(q.q_id, std::move(r));
        (i + valid < pairs ? task.train : task.valid).push_back(std::move(q));
    }
    return task;
}

struct GradCheck {
    std::size_t checked = 0;
    double worst = 0;
    std::map<std::string, std::size_t> per_group;  // "reader", "gate", ... -> entries checked
};

inline std::string param_group(const std::string& name)
{
    if (name.rfind("reader.", 0) == 0) {
        return "reader";
    }
    if (name.rfind("gen.gate", 0) == 0) {
        return "gate";
    }
    if (name.rfind("gen.decoder", 0) == 0) {
        return "decoder";
    }
    if (name.rfind("gen.encoder", 0) == 0) {
        return "encoder";
    }
    return "other";
}

/// Compares tape gradients of the sequence loss with central differences on
/// `per_slot` random entries of every parameter tensor. Entries whose
/// gradient is below `min_grad` in magnitude are skipped.
inline GradCheck gradient_check(RbgModel<double>& m, const Example& ex, std::span<const int> target,
                                std::size_t per_slot, Rng& rng, double min_grad = 1e-6)
{
    auto grads = m.params().zero_grads();
    (void)loss_and_grad(m, ex, target, RunOptions{}, grads);
    GradCheck out;
    for (std::size_t s = 0; s < m.params().size(); ++s) {
        const auto n = static_cast<std::uint64_t>(m.params()[s].value.size());
        for (std::size_t j = 0; j < per_slot; ++j) {
            const auto i = static_cast<Eigen::Index>(rng.uniform_index(n));
            const double analytic = grads[s].data()[i];
            if (std::abs(analytic) < min_grad) {
                continue;
            }
            const double fd = central_difference(m.params(), s, i, [&] { return sequence_loss_value(m, ex, target); });
            out.worst = std::max(out.worst, relative_error(analytic, fd));
            ++out.checked;
            ++out.per_group[param_group(m.params()[s].name)];
        }
    }
    return out;
}

}  // namespace rbg::test
