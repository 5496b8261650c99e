#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "rng.hpp"

namespace rbg {

/// Malformed or inconsistent input data.
class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Half-open token range [begin, end).
struct TokenSpan {
    std::size_t begin = 0;
    std::size_t end = 0;

    [[nodiscard]] std::size_t size() const { return end - begin; }
    friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

/// A token with its byte range in the original text, case preserved.
struct RawToken {
    std::string text;
    std::size_t begin = 0;
    std::size_t end = 0;
};

inline bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c) != 0; }
inline bool is_ascii_space(unsigned char c) { return c < 128 && std::isspace(c) != 0; }

inline std::string ascii_lower(std::string_view s)
{
    std::string out(s);
    for (char& c : out) {
        if (static_cast<unsigned char>(c) < 128) {
            c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
    }
    return out;
}

/// Splits on whitespace; every ASCII punctuation character is its own token.
inline std::vector<RawToken> split_raw(std::string_view text)
{
    std::vector<RawToken> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (is_ascii_space(c)) {
            ++i;
        } else if (is_ascii_punct(c)) {
            out.push_back({std::string(1, text[i]), i, i + 1});
            ++i;
        } else {
            const std::size_t start = i;
            while (i < text.size() && !is_ascii_space(static_cast<unsigned char>(text[i])) &&
                   !is_ascii_punct(static_cast<unsigned char>(text[i]))) {
                ++i;
            }
            out.push_back({std::string(text.substr(start, i - start)), start, i});
        }
    }
    return out;
}

/// Lowercased word-level tokens.
inline std::vector<std::string> tokenize_words(std::string_view text)
{
    std::vector<std::string> out;
    for (auto& t : split_raw(text)) {
        out.push_back(ascii_lower(t.text));
    }
    return out;
}

/// Sentence spans over the tokens of `text`. A sentence ends at '.', '!' or
/// '?' when followed by whitespace or the end of the text; whatever is left
/// over forms the last sentence.
inline std::vector<TokenSpan> segment_sentences(std::string_view text)
{
    const auto toks = split_raw(text);
    std::vector<TokenSpan> spans;
    std::size_t start = 0;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        const auto& t = toks[i].text;
        const bool terminator = t == "." || t == "!" || t == "?";
        const bool boundary =
            toks[i].end == text.size() || is_ascii_space(static_cast<unsigned char>(text[toks[i].end]));
        if (terminator && boundary) {
            spans.push_back({start, i + 1});
            start = i + 1;
        }
    }
    if (start < toks.size()) {
        spans.push_back({start, toks.size()});
    }
    return spans;
}

struct Document {
    std::string doc_id;
    std::string title;
    std::string text;
    std::vector<std::string> title_words;
    std::vector<std::string> words;
    std::vector<TokenSpan> sentences;
};

inline void check_partition(const Document& d)
{
    std::size_t at = 0;
    for (const auto& s : d.sentences) {
        if (s.begin != at || s.end <= s.begin) {
            throw DataError("sentence spans do not partition document " + d.doc_id);
        }
        at = s.end;
    }
    if (at != d.words.size()) {
        throw DataError("sentence spans do not cover document " + d.doc_id);
    }
}

inline Document make_document(std::string doc_id, std::string title, std::string text)
{
    Document d{std::move(doc_id), std::move(title), std::move(text), {}, {}, {}};
    d.title_words = tokenize_words(d.title);
    d.words = tokenize_words(d.text);
    d.sentences = segment_sentences(d.text);
    check_partition(d);
    return d;
}

struct Question {
    std::string q_id;
    std::string text;
    std::vector<std::string> gold_answers;
    std::optional<std::vector<std::string>> gold_provenance;
};

/// Documents with lookup by id.
class Corpus {
  public:
    Corpus() = default;
    explicit Corpus(std::vector<Document> docs) : m_docs(std::move(docs))
    {
        for (std::size_t i = 0; i < m_docs.size(); ++i) {
            if (!m_index.emplace(m_docs[i].doc_id, i).second) {
                throw DataError("duplicate doc id: " + m_docs[i].doc_id);
            }
        }
    }

    [[nodiscard]] std::size_t size() const { return m_docs.size(); }
    [[nodiscard]] bool empty() const { return m_docs.empty(); }
    [[nodiscard]] const std::vector<Document>& docs() const { return m_docs; }
    [[nodiscard]] const Document& operator[](std::size_t i) const { return m_docs.at(i); }
    [[nodiscard]] bool contains(const std::string& id) const { return m_index.count(id) != 0; }

    [[nodiscard]] std::size_t index_of(const std::string& id) const
    {
        auto it = m_index.find(id);
        if (it == m_index.end()) {
            throw DataError("unknown doc id: " + id);
        }
        return it->second;
    }
    [[nodiscard]] const Document& by_id(const std::string& id) const { return m_docs[index_of(id)]; }

  private:
    std::vector<Document> m_docs;
    std::unordered_map<std::string, std::size_t> m_index;
};

/// Token <-> id bijection with reserved ids at the front.
class Vocabulary {
  public:
    static constexpr int pad = 0;
    static constexpr int bos = 1;
    static constexpr int eos = 2;
    static constexpr int unk = 3;
    static constexpr int mask = 4;
    static constexpr int question_marker = 5;
    static constexpr int title_marker = 6;
    static constexpr int context_marker = 7;
    static constexpr int reserved_count = 8;

    static const std::vector<std::string>& reserved_tokens()
    {
        static const std::vector<std::string> r{"<pad>",     "<s>",    "</s>",     "<unk>",
                                                "<mask>",    "question:", "title:", "context:"};
        return r;
    }

    Vocabulary() : Vocabulary(reserved_tokens()) {}

    /// Rebuilds from an id-ordered token list (the first entries must be the reserved tokens).
    explicit Vocabulary(std::vector<std::string> tokens) : m_tokens(std::move(tokens))
    {
        const auto& r = reserved_tokens();
        if (m_tokens.size() < r.size() || !std::equal(r.begin(), r.end(), m_tokens.begin())) {
            throw DataError("vocabulary does not start with the reserved tokens");
        }
        for (std::size_t i = 0; i < m_tokens.size(); ++i) {
            if (!m_ids.emplace(m_tokens[i], static_cast<int>(i)).second) {
                throw DataError("duplicate vocabulary token: " + m_tokens[i]);
            }
        }
    }

    [[nodiscard]] std::size_t size() const { return m_tokens.size(); }
    [[nodiscard]] const std::vector<std::string>& tokens() const { return m_tokens; }
    [[nodiscard]] bool contains(std::string_view tok) const { return m_ids.count(std::string(tok)) != 0; }

    [[nodiscard]] int id(const std::string& tok) const
    {
        auto it = m_ids.find(tok);
        return it == m_ids.end() ? unk : it->second;
    }

    [[nodiscard]] const std::string& token(int id) const { return m_tokens.at(static_cast<std::size_t>(id)); }

    [[nodiscard]] std::vector<int> encode(std::span<const std::string> words) const
    {
        std::vector<int> out;
        out.reserve(words.size());
        for (const auto& w : words) {
            out.push_back(id(w));
        }
        return out;
    }

    [[nodiscard]] std::vector<int> tokenize(std::string_view text) const
    {
        const auto w = tokenize_words(text);
        return encode(w);
    }

    /// Space-joined tokens.
    [[nodiscard]] std::string decode(std::span<const int> ids) const
    {
        std::string out;
        for (int i : ids) {
            if (!out.empty()) {
                out += ' ';
            }
            out += token(i);
        }
        return out;
    }

    /// Like decode, without PAD/BOS/EOS.
    [[nodiscard]] std::string decode_answer(std::span<const int> ids) const
    {
        std::vector<int> kept;
        for (int i : ids) {
            if (i != pad && i != bos && i != eos) {
                kept.push_back(i);
            }
        }
        return decode(kept);
    }

    [[nodiscard]] std::uint64_t hash() const
    {
        std::uint64_t h = fnv1a64("");
        for (const auto& t : m_tokens) {
            h = fnv1a64(t, h);
            h = fnv1a64(std::string_view("\n"), h);
        }
        return h;
    }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.m_tokens == b.m_tokens; }

  private:
    std::vector<std::string> m_tokens;
    std::unordered_map<std::string, int> m_ids;
};

/// Reserved tokens, then every token seen at least min_count times ordered by
/// (frequency desc, token asc).
inline Vocabulary build_vocabulary(const Corpus& corpus, std::span<const Question> questions, int min_count)
{
    if (min_count < 1) {
        throw std::invalid_argument("min_count must be >= 1");
    }
    std::map<std::string, std::int64_t> counts;
    auto add = [&](const std::vector<std::string>& words) {
        for (const auto& w : words) {
            ++counts[w];
        }
    };
    for (const auto& d : corpus.docs()) {
        add(d.title_words);
        add(d.words);
    }
    for (const auto& q : questions) {
        add(tokenize_words(q.text));
        for (const auto& a : q.gold_answers) {
            add(tokenize_words(a));
        }
    }
    std::vector<std::pair<std::string, std::int64_t>> ranked;
    const auto& reserved = Vocabulary::reserved_tokens();
    for (auto& [tok, n] : counts) {
        if (n >= min_count && std::find(reserved.begin(), reserved.end(), tok) == reserved.end()) {
            ranked.emplace_back(tok, n);
        }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    std::vector<std::string> tokens = reserved;
    for (auto& [tok, n] : ranked) {
        tokens.push_back(tok);
    }
    return Vocabulary(std::move(tokens));
}

// ---- JSONL I/O --------------------------------------------------------------

template <typename Fn>
void for_each_jsonl(const std::string& path, Fn&& fn)
{
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path);
    }
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        try {
            fn(j);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& rows)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + path);
    }
    for (const auto& r : rows) {
        out << r.dump() << '\n';
    }
}

/// Corpus JSONL: {"id", "title", "text"} per line.
inline Corpus load_corpus(const std::string& path)
{
    std::vector<Document> docs;
    for_each_jsonl(path, [&](const nlohmann::json& j) {
        docs.push_back(make_document(j.at("id").get<std::string>(), j.value("title", std::string()),
                                     j.at("text").get<std::string>()));
    });
    return Corpus(std::move(docs));
}

/// QA JSONL: {"id", "question", "answers": [...], "provenance": [...]?} per line.
inline std::vector<Question> load_questions(const std::string& path, const Corpus* corpus = nullptr)
{
    std::vector<Question> out;
    std::unordered_map<std::string, int> seen;
    for_each_jsonl(path, [&](const nlohmann::json& j) {
        Question q;
        q.q_id = j.at("id").get<std::string>();
        q.text = j.at("question").get<std::string>();
        if (j.contains("answers")) {
            q.gold_answers = j.at("answers").get<std::vector<std::string>>();
        }
        if (j.contains("provenance") && !j.at("provenance").is_null()) {
            q.gold_provenance = j.at("provenance").get<std::vector<std::string>>();
            if (corpus != nullptr) {
                for (const auto& id : *q.gold_provenance) {
                    if (!corpus->contains(id)) {
                        throw DataError("question " + q.q_id + " cites unknown doc " + id);
                    }
                }
            }
        }
        if (!seen.emplace(q.q_id, 1).second) {
            throw DataError("duplicate question id: " + q.q_id);
        }
        out.push_back(std::move(q));
    });
    return out;
}

}  // namespace rbg
