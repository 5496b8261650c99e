#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "corpus.hpp"
#include "input.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "serialize.hpp"

namespace rbg {

enum class RetrievalMode { dense, bm25, random };

inline std::string to_string(RetrievalMode m)
{
    switch (m) {
    case RetrievalMode::dense: return "dense";
    case RetrievalMode::bm25: return "bm25";
    case RetrievalMode::random: return "random";
    }
    return "dense";
}

inline RetrievalMode parse_retrieval_mode(const std::string& s)
{
    if (s == "dense") {
        return RetrievalMode::dense;
    }
    if (s == "bm25") {
        return RetrievalMode::bm25;
    }
    if (s == "random") {
        return RetrievalMode::random;
    }
    throw std::invalid_argument("unknown retrieval mode: " + s);
}

struct ScoredDoc {
    std::string doc_id;
    double score = 0;
    friend bool operator==(const ScoredDoc&, const ScoredDoc&) = default;
};

/// Ranked documents for one question: score descending, ties by doc_id ascending.
struct RetrievedSet {
    std::string q_id;
    std::vector<ScoredDoc> docs;
    RetrievalMode mode = RetrievalMode::dense;
};

inline bool ranks_before(const ScoredDoc& a, const ScoredDoc& b)
{
    return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
}

inline bool is_well_ordered(const RetrievedSet& r)
{
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < r.docs.size(); ++i) {
        if (!seen.insert(r.docs[i].doc_id).second) {
            return false;
        }
        if (i > 0 && ranks_before(r.docs[i], r.docs[i - 1])) {
            return false;
        }
    }
    return true;
}

inline nlohmann::json to_json(const RetrievedSet& r)
{
    nlohmann::json docs = nlohmann::json::array();
    for (const auto& d : r.docs) {
        docs.push_back({{"doc_id", d.doc_id}, {"score", d.score}});
    }
    return {{"id", r.q_id}, {"mode", to_string(r.mode)}, {"docs", docs}};
}

inline RetrievedSet retrieved_from_json(const nlohmann::json& j)
{
    RetrievedSet r;
    r.q_id = j.at("id").get<std::string>();
    r.mode = parse_retrieval_mode(j.value("mode", std::string("dense")));
    for (const auto& d : j.at("docs")) {
        r.docs.push_back({d.at("doc_id").get<std::string>(), d.at("score").get<double>()});
    }
    return r;
}

inline std::vector<RetrievedSet> load_retrievals(const std::string& path)
{
    std::vector<RetrievedSet> out;
    for_each_jsonl(path, [&](const nlohmann::json& j) { out.push_back(retrieved_from_json(j)); });
    return out;
}

// ---- dense bi-encoder ---------------------------------------------------------

inline double score(std::span<const double> q, std::span<const double> d)
{
    if (q.size() != d.size()) {
        throw std::invalid_argument("score: dimension mismatch");
    }
    double s = 0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        s += q[i] * d[i];
    }
    return s;
}

struct DenseEncoderConfig {
    int d_model = 64;
    int heads = 4;
    int ffn_dim = 128;
    int layers = 2;
    int max_len = 300;
    std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const DenseEncoderConfig& c)
{
    return {{"d_model", c.d_model}, {"heads", c.heads}, {"ffn_dim", c.ffn_dim},
            {"layers", c.layers},   {"max_len", c.max_len}, {"seed", c.seed}};
}

inline DenseEncoderConfig dense_config_from_json(const nlohmann::json& j)
{
    DenseEncoderConfig c;
    c.d_model = j.at("d_model");
    c.heads = j.at("heads");
    c.ffn_dim = j.at("ffn_dim");
    c.layers = j.at("layers");
    c.max_len = j.at("max_len");
    c.seed = j.at("seed");
    return c;
}

/// Toy transformer encoder whose first-position output is the embedding.
/// Questions and documents share one set of weights.
class DenseEncoder {
  public:
    DenseEncoder(Vocabulary vocab, DenseEncoderConfig config) : m_vocab(std::move(vocab)), m_config(config)
    {
        if (config.d_model % config.heads != 0) {
            throw std::invalid_argument("d_model must be divisible by heads");
        }
        Rng rng(derive_seed(config.seed, "retriever.init"));
        const TransformerShape shape{config.d_model, config.heads, config.ffn_dim};
        const auto table = m_params.add(
            "retriever.embed", random_matrix<double>(static_cast<Eigen::Index>(m_vocab.size()), config.d_model, 1.0, rng));
        m_slots = add_encoder(m_params, "retriever.encoder", table, config.layers, shape, rng);
    }

    [[nodiscard]] const Vocabulary& vocabulary() const { return m_vocab; }
    [[nodiscard]] const DenseEncoderConfig& config() const { return m_config; }
    ParameterSet<double>& params() { return m_params; }
    [[nodiscard]] const ParameterSet<double>& params() const { return m_params; }
    [[nodiscard]] int dim() const { return m_config.d_model; }

    [[nodiscard]] std::vector<int> question_ids(const std::string& text) const
    {
        std::vector<int> ids{Vocabulary::question_marker};
        const auto q = m_vocab.tokenize(text);
        ids.insert(ids.end(), q.begin(), q.end());
        return ids;
    }

    [[nodiscard]] std::vector<int> document_ids(const Document& d) const
    {
        std::vector<int> ids{Vocabulary::title_marker};
        for (const auto& w : d.title_words) {
            ids.push_back(m_vocab.id(w));
        }
        ids.push_back(Vocabulary::context_marker);
        for (const auto& w : d.words) {
            ids.push_back(m_vocab.id(w));
        }
        return ids;
    }

    [[nodiscard]] std::vector<double> embed(std::span<const int> ids) const
    {
        const auto n = std::min(ids.size(), static_cast<std::size_t>(m_config.max_len));
        if (n == 0) {
            throw std::invalid_argument("empty encoder input");
        }
        Tape<double> tape(false);
        Graph<double> g(tape, m_params);
        Var h = encode_sequence(g, m_slots, ids.first(n), m_config.heads);
        const auto& hv = tape.value(h);
        return {hv.row(0).data(), hv.row(0).data() + hv.cols()};
    }

  private:
    Vocabulary m_vocab;
    DenseEncoderConfig m_config;
    ParameterSet<double> m_params;
    EncoderSlots m_slots;
};

/// Exact inner-product index: one embedding row per document.
class DenseIndex {
  public:
    DenseIndex(DenseEncoder encoder, std::vector<std::string> doc_ids, Matrix<double> embeddings)
        : m_encoder(std::move(encoder)), m_doc_ids(std::move(doc_ids)), m_embeddings(std::move(embeddings))
    {
        if (static_cast<std::size_t>(m_embeddings.rows()) != m_doc_ids.size()) {
            throw DataError("dense index row count does not match doc id count");
        }
        if (m_embeddings.cols() != m_encoder.dim()) {
            throw DataError("dense index dimension does not match encoder");
        }
        std::unordered_set<std::string> seen;
        for (const auto& id : m_doc_ids) {
            if (!seen.insert(id).second) {
                throw DataError("duplicate doc id in dense index: " + id);
            }
        }
    }

    /// Embeds every document; `jobs` workers fill disjoint rows.
    static DenseIndex build(const Corpus& corpus, DenseEncoder encoder, int jobs = 1)
    {
        Matrix<double> emb(static_cast<Eigen::Index>(corpus.size()), encoder.dim());
        std::vector<std::string> ids;
        for (const auto& d : corpus.docs()) {
            ids.push_back(d.doc_id);
        }
        auto work = [&](std::size_t start, std::size_t stride) {
            for (std::size_t i = start; i < corpus.size(); i += stride) {
                const auto v = encoder.embed(encoder.document_ids(corpus[i]));
                for (std::size_t j = 0; j < v.size(); ++j) {
                    emb(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
                }
            }
        };
        const auto n = static_cast<std::size_t>(std::max(1, jobs));
        if (n == 1) {
            work(0, 1);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t t = 0; t < n; ++t) {
                pool.emplace_back(work, t, n);
            }
            for (auto& t : pool) {
                t.join();
            }
        }
        return DenseIndex(std::move(encoder), std::move(ids), std::move(emb));
    }

    [[nodiscard]] std::size_t size() const { return m_doc_ids.size(); }
    [[nodiscard]] int dim() const { return m_encoder.dim(); }
    [[nodiscard]] const DenseEncoder& encoder() const { return m_encoder; }
    [[nodiscard]] const std::vector<std::string>& doc_ids() const { return m_doc_ids; }
    [[nodiscard]] const Matrix<double>& embeddings() const { return m_embeddings; }

    [[nodiscard]] std::span<const double> row(std::size_t i) const
    {
        return {m_embeddings.row(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(dim())};
    }

    [[nodiscard]] RetrievedSet top_k(const std::string& q_id, std::span<const double> query, std::size_t k) const
    {
        if (k < 1) {
            throw std::invalid_argument("K must be >= 1");
        }
        if (k > size()) {
            throw std::invalid_argument("K exceeds corpus size");
        }
        std::vector<ScoredDoc> all;
        all.reserve(size());
        for (std::size_t i = 0; i < size(); ++i) {
            all.push_back({m_doc_ids[i], score(query, row(i))});
        }
        std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), ranks_before);
        all.resize(k);
        return {q_id, std::move(all), RetrievalMode::dense};
    }

    /// Layout (little-endian): "RBGDIDX1", u64 d, u64 count, count*d f64
    /// row-major, count doc ids (u32 length + bytes), then the encoder:
    /// u32-length config JSON, vocabulary, parameter tensors.
    void save(const std::string& path) const
    {
        BinaryWriter w;
        w.magic("RBGDIDX1");
        w.u64(static_cast<std::uint64_t>(dim()));
        w.u64(size());
        for (Eigen::Index i = 0; i < m_embeddings.size(); ++i) {
            w.f64(m_embeddings.data()[i]);
        }
        for (const auto& id : m_doc_ids) {
            w.str(id);
        }
        w.str(to_json(m_encoder.config()).dump());
        w.vocabulary(m_encoder.vocabulary());
        w.parameters(m_encoder.params());
        w.save(path);
    }

    static DenseIndex load(const std::string& path)
    {
        auto r = BinaryReader::open(path);
        r.expect_magic("RBGDIDX1");
        const auto d = r.u64();
        const auto count = r.u64();
        Matrix<double> emb(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(d));
        for (Eigen::Index i = 0; i < emb.size(); ++i) {
            emb.data()[i] = r.f64();
        }
        std::vector<std::string> ids;
        for (std::uint64_t i = 0; i < count; ++i) {
            ids.push_back(r.str());
        }
        const auto config = dense_config_from_json(nlohmann::json::parse(r.str()));
        DenseEncoder enc(r.vocabulary(), config);
        r.parameters_into(enc.params());
        return DenseIndex(std::move(enc), std::move(ids), std::move(emb));
    }

  private:
    DenseEncoder m_encoder;
    std::vector<std::string> m_doc_ids;
    Matrix<double> m_embeddings;
};

inline RetrievedSet retrieve_top_k(const DenseIndex& index, const Question& question, std::size_t k)
{
    if (k > index.size()) {
        throw std::invalid_argument("K exceeds corpus size");
    }
    const auto& enc = index.encoder();
    const auto q = enc.embed(enc.question_ids(question.text));
    return index.top_k(question.q_id, q, k);
}

// ---- BM25 -------------------------------------------------------------------

struct Posting {
    std::uint32_t doc = 0;
    std::uint32_t tf = 0;
};

/// Okapi BM25 over lowercased title + body tokens.
class Bm25Index {
  public:
    static constexpr double default_k1 = 1.2;
    static constexpr double default_b = 0.75;

    static Bm25Index build(const Corpus& corpus, double k1 = default_k1, double b = default_b)
    {
        Bm25Index idx;
        idx.m_k1 = k1;
        idx.m_b = b;
        double total = 0;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            const auto& d = corpus[i];
            idx.m_doc_ids.push_back(d.doc_id);
            std::map<std::string, std::uint32_t> tf;
            for (const auto& w : d.title_words) {
                ++tf[w];
            }
            for (const auto& w : d.words) {
                ++tf[w];
            }
            const auto len = static_cast<std::uint32_t>(d.title_words.size() + d.words.size());
            idx.m_lengths.push_back(len);
            total += len;
            for (const auto& [term, n] : tf) {
                idx.m_postings[term].push_back({static_cast<std::uint32_t>(i), n});
            }
        }
        idx.m_avg_length = corpus.empty() ? 0.0 : total / static_cast<double>(corpus.size());
        return idx;
    }

    [[nodiscard]] std::size_t size() const { return m_doc_ids.size(); }
    [[nodiscard]] double k1() const { return m_k1; }
    [[nodiscard]] double b() const { return m_b; }
    [[nodiscard]] double average_length() const { return m_avg_length; }
    [[nodiscard]] const std::vector<std::string>& doc_ids() const { return m_doc_ids; }

    [[nodiscard]] double idf(const std::string& term) const
    {
        auto it = m_postings.find(term);
        const double df = it == m_postings.end() ? 0.0 : static_cast<double>(it->second.size());
        const double n = static_cast<double>(size());
        return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
    }

    /// Scores of every document that shares at least one term with the query.
    [[nodiscard]] std::map<std::uint32_t, double> scores(std::span<const std::string> query) const
    {
        std::map<std::uint32_t, double> acc;
        for (const auto& term : query) {
            auto it = m_postings.find(term);
            if (it == m_postings.end()) {
                continue;
            }
            const double w = idf(term);
            for (const auto& p : it->second) {
                const double tf = p.tf;
                const double norm = 1.0 - m_b + m_b * m_lengths[p.doc] / m_avg_length;
                acc[p.doc] += w * tf * (m_k1 + 1.0) / (tf + m_k1 * norm);
            }
        }
        return acc;
    }

    [[nodiscard]] RetrievedSet retrieve(std::span<const std::string> query, std::size_t k,
                                        const std::optional<std::string>& exclude_id = std::nullopt,
                                        std::string q_id = {}) const
    {
        if (k < 1) {
            throw std::invalid_argument("k must be >= 1");
        }
        std::vector<ScoredDoc> hits;
        for (const auto& [doc, s] : scores(query)) {
            if (exclude_id && m_doc_ids[doc] == *exclude_id) {
                continue;
            }
            hits.push_back({m_doc_ids[doc], s});
        }
        const auto keep = std::min(k, hits.size());
        std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(), ranks_before);
        hits.resize(keep);
        return {std::move(q_id), std::move(hits), RetrievalMode::bm25};
    }

    [[nodiscard]] nlohmann::json to_json() const
    {
        nlohmann::json postings = nlohmann::json::object();
        for (const auto& [term, list] : m_postings) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& p : list) {
                arr.push_back({p.doc, p.tf});
            }
            postings[term] = arr;
        }
        return {{"format", "rbg-bm25"}, {"version", 1},          {"k1", m_k1},
                {"b", m_b},              {"doc_ids", m_doc_ids}, {"doc_lengths", m_lengths},
                {"avg_length", m_avg_length}, {"postings", postings}};
    }

    static Bm25Index from_json(const nlohmann::json& j)
    {
        if (j.value("format", std::string()) != "rbg-bm25") {
            throw DataError("not a BM25 index");
        }
        Bm25Index idx;
        idx.m_k1 = j.at("k1");
        idx.m_b = j.at("b");
        idx.m_doc_ids = j.at("doc_ids").get<std::vector<std::string>>();
        idx.m_lengths = j.at("doc_lengths").get<std::vector<std::uint32_t>>();
        idx.m_avg_length = j.at("avg_length");
        for (const auto& [term, arr] : j.at("postings").items()) {
            auto& list = idx.m_postings[term];
            for (const auto& p : arr) {
                list.push_back({p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>()});
            }
            if (!std::is_sorted(list.begin(), list.end(), [](auto& a, auto& c) { return a.doc < c.doc; })) {
                throw DataError("BM25 postings not sorted for term " + term);
            }
        }
        if (idx.m_lengths.size() != idx.m_doc_ids.size()) {
            throw DataError("BM25 length table does not match doc ids");
        }
        return idx;
    }

  private:
    double m_k1 = default_k1;
    double m_b = default_b;
    std::vector<std::string> m_doc_ids;
    std::vector<std::uint32_t> m_lengths;
    double m_avg_length = 0;
    std::map<std::string, std::vector<Posting>> m_postings;
};

// ---- random + metrics -----------------------------------------------------------

/// K documents drawn uniformly without replacement; scores are 0, so the
/// result is ordered by doc_id.
inline RetrievedSet random_retrieve(const Corpus& corpus, std::size_t k, std::uint64_t seed, std::string q_id = {})
{
    if (k > corpus.size()) {
        throw std::invalid_argument("K exceeds corpus size");
    }
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
        const auto j = i + rng.uniform_index(order.size() - i);
        std::swap(order[i], order[j]);
    }
    std::vector<ScoredDoc> docs;
    for (std::size_t i = 0; i < k; ++i) {
        docs.push_back({corpus[order[i]].doc_id, 0.0});
    }
    std::sort(docs.begin(), docs.end(), ranks_before);
    return {std::move(q_id), std::move(docs), RetrievalMode::random};
}

struct RetrievalMetrics {
    double r_precision = 0;
    double recall_at_5 = 0;
};

inline RetrievalMetrics retrieval_metrics(const RetrievedSet& retrieved, std::span<const std::string> gold)
{
    if (gold.empty()) {
        throw std::invalid_argument("no provenance");
    }
    const std::unordered_set<std::string> g(gold.begin(), gold.end());
    std::size_t in_r = 0;
    std::size_t in_5 = 0;
    for (std::size_t i = 0; i < retrieved.docs.size(); ++i) {
        const bool hit = g.count(retrieved.docs[i].doc_id) != 0;
        in_r += (hit && i < g.size()) ? 1 : 0;
        in_5 += (hit && i < 5) ? 1 : 0;
    }
    const auto n = static_cast<double>(g.size());
    return {static_cast<double>(in_r) / n, static_cast<double>(in_5) / n};
}

}  // namespace rbg
