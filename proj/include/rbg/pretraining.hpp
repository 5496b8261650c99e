#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "json.hpp"
#include "retrieval.hpp"
#include "rng.hpp"
#include "step.hpp"

namespace rbg {

/// Which corpus sentences may serve as recovery targets.
struct SentenceFilter {
    std::size_t min_words = 5;
    std::size_t max_words = 60;
    /// Require a capitalized word somewhere after the first token.
    bool require_entity = true;

    [[nodiscard]] bool accepts(std::span<const RawToken> raw, const TokenSpan& s) const
    {
        const auto n = s.size();
        if (n < min_words || n > max_words) {
            return false;
        }
        if (!require_entity) {
            return true;
        }
        for (std::size_t i = s.begin + 1; i < s.end; ++i) {
            const auto c = static_cast<unsigned char>(raw[i].text.front());
            if (c < 128 && std::isupper(c) != 0) {
                return true;
            }
        }
        return false;
    }
};

struct MaskOptions {
    double rate = 0.3;
};

/// Number of masked words for a sentence of `len` words. A positive rate
/// always masks at least one word.
inline std::size_t mask_count(std::size_t len, double rate)
{
    if (rate <= 0 || len == 0) {
        return 0;
    }
    const auto n = static_cast<std::size_t>(std::floor(rate * static_cast<double>(len) + 1e-9));
    return std::min(len, std::max<std::size_t>(1, n));
}

/// Words are kept as strings so the file is independent of any vocabulary;
/// masked words read "<mask>".
struct RarExample {
    std::string doc_id;
    std::size_t sentence_index = 0;
    std::vector<std::string> sentence;
    std::vector<std::string> pseudo_query;
    std::vector<std::string> retrieved;
    std::vector<std::size_t> mask_positions;

    friend bool operator==(const RarExample&, const RarExample&) = default;
};

inline nlohmann::json to_json(const RarExample& e)
{
    return {{"doc_id", e.doc_id},         {"sentence_index", e.sentence_index},
            {"sentence", e.sentence},     {"pseudo_query", e.pseudo_query},
            {"retrieved", e.retrieved},   {"mask_positions", e.mask_positions}};
}

inline RarExample rar_from_json(const nlohmann::json& j)
{
    RarExample e;
    e.doc_id = j.at("doc_id").get<std::string>();
    e.sentence_index = j.at("sentence_index").get<std::size_t>();
    e.sentence = j.at("sentence").get<std::vector<std::string>>();
    e.pseudo_query = j.at("pseudo_query").get<std::vector<std::string>>();
    e.retrieved = j.at("retrieved").get<std::vector<std::string>>();
    e.mask_positions = j.at("mask_positions").get<std::vector<std::size_t>>();
    if (e.sentence.size() != e.pseudo_query.size()) {
        throw DataError("RAR example " + e.doc_id + "#" + std::to_string(e.sentence_index) +
                        ": pseudo query length differs from sentence");
    }
    for (auto p : e.mask_positions) {
        if (p >= e.sentence.size()) {
            throw DataError("RAR example " + e.doc_id + ": mask position out of range");
        }
    }
    return e;
}

inline std::vector<RarExample> load_rar_examples(const std::string& path)
{
    std::vector<RarExample> out;
    for_each_jsonl(path, [&](const nlohmann::json& j) { out.push_back(rar_from_json(j)); });
    return out;
}

inline void save_rar_examples(const std::string& path, const std::vector<RarExample>& examples)
{
    std::vector<nlohmann::json> rows;
    for (const auto& e : examples) {
        rows.push_back(to_json(e));
    }
    write_jsonl(path, rows);
}

/// Masks one sentence and retrieves its support. Randomness comes from a seed
/// derived from the sentence's identity, so the result does not depend on
/// which other sentences were drawn.
inline RarExample make_rar_example(const Document& doc, std::size_t sentence_index, const Bm25Index& bm25,
                                   std::size_t k, std::uint64_t seed, const MaskOptions& mask)
{
    const auto& span = doc.sentences.at(sentence_index);
    RarExample e;
    e.doc_id = doc.doc_id;
    e.sentence_index = sentence_index;
    e.sentence.assign(doc.words.begin() + static_cast<std::ptrdiff_t>(span.begin),
                      doc.words.begin() + static_cast<std::ptrdiff_t>(span.end));
    e.pseudo_query = e.sentence;

    Rng rng(derive_seed(seed, "rar.mask:" + doc.doc_id + "#" + std::to_string(sentence_index)));
    std::vector<std::size_t> order(e.sentence.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto m = mask_count(e.sentence.size(), mask.rate);
    for (std::size_t i = 0; i < m; ++i) {
        std::swap(order[i], order[i + rng.uniform_index(order.size() - i)]);
    }
    e.mask_positions.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m));
    std::sort(e.mask_positions.begin(), e.mask_positions.end());
    for (auto p : e.mask_positions) {
        e.pseudo_query[p] = Vocabulary::reserved_tokens()[Vocabulary::mask];
    }

    for (const auto& d : bm25.retrieve(e.sentence, k, doc.doc_id).docs) {
        e.retrieved.push_back(d.doc_id);
    }
    return e;
}

/// Samples `n` qualifying sentences and turns each into a recovery example.
/// A sentence qualifies if the filter accepts it and BM25 finds at least one
/// other document for it. Output is ordered by (doc_id, sentence index).
inline std::vector<RarExample> build_rar_examples(const Corpus& corpus, const Bm25Index& bm25,
                                                  const SentenceFilter& filter, std::size_t k, std::size_t n,
                                                  std::uint64_t seed, const MaskOptions& mask = {})
{
    if (n < 1 || k < 1) {
        throw std::invalid_argument("build_rar_examples: n and k must be >= 1");
    }
    struct Candidate {
        std::size_t doc;
        std::size_t sentence;
    };
    std::vector<Candidate> pool;
    for (std::size_t d = 0; d < corpus.size(); ++d) {
        const auto& doc = corpus[d];
        const auto raw = split_raw(doc.text);
        for (std::size_t s = 0; s < doc.sentences.size(); ++s) {
            if (!filter.accepts(raw, doc.sentences[s])) {
                continue;
            }
            const auto& span = doc.sentences[s];
            const std::vector<std::string> words(doc.words.begin() + static_cast<std::ptrdiff_t>(span.begin),
                                                 doc.words.begin() + static_cast<std::ptrdiff_t>(span.end));
            if (!bm25.retrieve(words, 1, doc.doc_id).docs.empty()) {
                pool.push_back({d, s});
            }
        }
    }
    if (pool.size() < n) {
        throw DataError("RAR: " + std::to_string(pool.size()) + " qualifying sentences, " + std::to_string(n) +
                        " requested (short by " + std::to_string(n - pool.size()) + ")");
    }
    Rng rng(derive_seed(seed, "rar.sample"));
    for (std::size_t i = 0; i < n; ++i) {
        std::swap(pool[i], pool[i + rng.uniform_index(pool.size() - i)]);
    }
    pool.resize(n);
    std::sort(pool.begin(), pool.end(), [&](const Candidate& a, const Candidate& b) {
        const auto& ia = corpus[a.doc].doc_id;
        const auto& ib = corpus[b.doc].doc_id;
        return ia != ib ? ia < ib : a.sentence < b.sentence;
    });
    std::vector<RarExample> out;
    out.reserve(n);
    for (const auto& c : pool) {
        out.push_back(make_rar_example(corpus[c.doc], c.sentence, bm25, k, seed, mask));
    }
    return out;
}

/// The recovery task as a generation example: masked sentence in, sentence out.
inline BatchItem rar_item(const RarExample& e, const Corpus& corpus, const Vocabulary& vocab)
{
    BatchItem item;
    item.id = e.doc_id + "#" + std::to_string(e.sentence_index);
    item.example.question = vocab.encode(e.pseudo_query);
    for (const auto& id : e.retrieved) {
        item.example.docs.push_back(&corpus.by_id(id));
    }
    if (item.example.docs.empty()) {
        throw DataError("RAR example " + item.id + " has no retrieved documents");
    }
    item.target.push_back(Vocabulary::bos);
    const auto body = vocab.encode(e.sentence);
    item.target.insert(item.target.end(), body.begin(), body.end());
    item.target.push_back(Vocabulary::eos);
    return item;
}

struct PretrainConfig {
    std::size_t steps = 100;
    std::size_t batch_size = 1;
    AdamConfig adam;
    std::uint64_t seed = 0;
    bool reader_frozen = false;
    std::size_t gate_warmup = 100;  // leading steps with the gate held at 1
};

struct PretrainResult {
    std::vector<double> step_losses;
    std::vector<double> epoch_losses;  // mean over the steps of each pass through the examples
};

/// Trains the whole model to recover each sentence from its pseudo query and
/// retrieved documents. Examples are visited in a seeded shuffled order per pass.
template <typename T>
PretrainResult pretrain(RbgModel<T>& model, const Corpus& corpus, std::span<const RarExample> examples,
                        const PretrainConfig& cfg)
{
    if (examples.empty() || cfg.batch_size < 1) {
        throw std::invalid_argument("pretrain: need examples and a positive batch size");
    }
    std::vector<BatchItem> items;
    for (const auto& e : examples) {
        items.push_back(rar_item(e, corpus, model.vocab()));
    }
    model.set_reader_trainable(!cfg.reader_frozen);
    AdamW<T> opt(model.params(), cfg.adam);
    Rng rng(derive_seed(cfg.seed, "pretrain.order"));

    PretrainResult out;
    std::vector<std::size_t> order(items.size());
    std::size_t cursor = order.size();
    double epoch_sum = 0;
    std::size_t epoch_steps = 0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<BatchItem> batch;
        while (batch.size() < cfg.batch_size) {
            if (cursor == order.size()) {
                if (epoch_steps > 0) {
                    out.epoch_losses.push_back(epoch_sum / double(epoch_steps));
                    epoch_sum = 0;
                    epoch_steps = 0;
                }
                std::iota(order.begin(), order.end(), std::size_t{0});
                for (std::size_t i = order.size(); i > 1; --i) {
                    std::swap(order[i - 1], order[rng.uniform_index(i)]);
                }
                cursor = 0;
            }
            batch.push_back(items[order[cursor++]]);
        }
        RunOptions run;
        if (step < cfg.gate_warmup) {
            run.gate_override = 1.0;
        }
        const double loss = batch_step(model, opt, std::span<const BatchItem>(batch), run);
        out.step_losses.push_back(loss);
        epoch_sum += loss;
        ++epoch_steps;
    }
    if (epoch_steps > 0) {
        out.epoch_losses.push_back(epoch_sum / double(epoch_steps));
    }
    model.set_reader_trainable(true);
    return out;
}

}  // namespace rbg
