#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "corpus.hpp"
#include "json.hpp"
#include "retrieval.hpp"

namespace rbg {

// ---- normalization ------------------------------------------------------------

/// Lowercases, deletes ASCII punctuation and splits on whitespace. Articles
/// ("a", "an", "the") are kept unless `drop_articles` is set.
inline std::vector<std::string> normalized_tokens(std::string_view text, bool drop_articles = false)
{
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            if (!(drop_articles && (cur == "a" || cur == "an" || cur == "the"))) {
                out.push_back(cur);
            }
            cur.clear();
        }
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (is_ascii_space(c)) {
            flush();
        } else if (!is_ascii_punct(c)) {
            cur += (c < 128) ? static_cast<char>(std::tolower(c)) : ch;
        }
    }
    flush();
    return out;
}

inline std::string normalize_answer(std::string_view text, bool drop_articles = false)
{
    std::string out;
    for (const auto& t : normalized_tokens(text, drop_articles)) {
        if (!out.empty()) {
            out += ' ';
        }
        out += t;
    }
    return out;
}

// ---- answer metrics --------------------------------------------------------------

namespace detail {

inline void require_references(std::span<const std::string> refs)
{
    if (refs.empty()) {
        throw std::invalid_argument("at least one reference is required");
    }
}

inline double f1_tokens(const std::vector<std::string>& pred, const std::vector<std::string>& ref)
{
    if (pred.empty() || ref.empty()) {
        return pred.empty() && ref.empty() ? 1.0 : 0.0;
    }
    std::map<std::string, int> counts;
    for (const auto& t : ref) {
        ++counts[t];
    }
    int common = 0;
    for (const auto& t : pred) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0) {
        return 0.0;
    }
    const double p = double(common) / double(pred.size());
    const double r = double(common) / double(ref.size());
    return 2 * p * r / (p + r);
}

/// Length of the longest common subsequence, two-row DP.
inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b)
{
    std::vector<std::size_t> prev(b.size() + 1, 0);
    std::vector<std::size_t> cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline double rouge_l_tokens(const std::vector<std::string>& pred, const std::vector<std::string>& ref)
{
    if (pred.empty() || ref.empty()) {
        return pred.empty() && ref.empty() ? 1.0 : 0.0;
    }
    const auto lcs = static_cast<double>(lcs_length(pred, ref));
    if (lcs == 0) {
        return 0.0;
    }
    const double p = lcs / double(pred.size());
    const double r = lcs / double(ref.size());
    return 2 * p * r / (p + r);
}

}  // namespace detail

/// Unigram F1 over normalized token bags, max over references.
inline double unigram_f1(std::string_view prediction, std::span<const std::string> references)
{
    detail::require_references(references);
    const auto pred = normalized_tokens(prediction);
    double best = 0;
    for (const auto& r : references) {
        best = std::max(best, detail::f1_tokens(pred, normalized_tokens(r)));
    }
    return best;
}

/// Balanced LCS F-measure over normalized tokens, max over references.
inline double rouge_l(std::string_view prediction, std::span<const std::string> references)
{
    detail::require_references(references);
    const auto pred = normalized_tokens(prediction);
    double best = 0;
    for (const auto& r : references) {
        best = std::max(best, detail::rouge_l_tokens(pred, normalized_tokens(r)));
    }
    return best;
}

/// ROUGE-L credited only when retrieval was perfect.
inline double kilt_rl(double rouge, double r_precision) { return r_precision >= 1.0 ? rouge : 0.0; }

// ---- faithfulness ------------------------------------------------------------------

struct FaithfulnessRecord {
    std::string q_id;
    std::vector<std::string> gold;
    std::string generated;
    bool hit = false;
};

/// True when `needle` occurs in `hay` as a contiguous run of whole tokens.
inline bool contains_tokens(const std::vector<std::string>& hay, const std::vector<std::string>& needle)
{
    if (needle.empty() || needle.size() > hay.size()) {
        return false;
    }
    return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

inline FaithfulnessRecord make_faithfulness_record(std::string q_id, std::vector<std::string> gold,
                                                   std::string generated)
{
    FaithfulnessRecord r{std::move(q_id), std::move(gold), std::move(generated), false};
    const auto hay = normalized_tokens(r.generated);
    for (const auto& g : r.gold) {
        if (contains_tokens(hay, normalized_tokens(g))) {
            r.hit = true;
            break;
        }
    }
    return r;
}

inline double faithfulness_recall(std::span<const FaithfulnessRecord> records)
{
    if (records.empty()) {
        throw std::invalid_argument("faithfulness_recall: no records");
    }
    std::size_t hits = 0;
    for (const auto& r : records) {
        hits += r.hit ? 1 : 0;
    }
    return double(hits) / double(records.size());
}

// ---- overlap ------------------------------------------------------------------------

/// Fraction of the gold answer's n-gram positions found anywhere in the documents.
inline double ngram_overlap(std::string_view gold, std::span<const std::string> docs, int n = 1)
{
    if (n < 1) {
        throw std::invalid_argument("ngram_overlap: n must be >= 1");
    }
    const auto g = normalized_tokens(gold);
    const auto un = static_cast<std::size_t>(n);
    if (g.size() < un) {
        return 0.0;
    }
    std::set<std::vector<std::string>> pool;
    for (const auto& d : docs) {
        const auto t = normalized_tokens(d);
        for (std::size_t i = 0; i + un <= t.size(); ++i) {
            pool.emplace(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + un));
        }
    }
    std::size_t found = 0;
    const std::size_t total = g.size() - un + 1;
    for (std::size_t i = 0; i < total; ++i) {
        std::vector<std::string> gram(g.begin() + static_cast<std::ptrdiff_t>(i),
                                      g.begin() + static_cast<std::ptrdiff_t>(i + un));
        found += pool.count(gram);
    }
    return double(found) / double(total);
}

// ---- reports ------------------------------------------------------------------------

struct QuestionRecord {
    std::string q_id;
    std::string prediction;
    double rouge_l = 0;
    double f1 = 0;
    std::optional<double> r_precision;
    std::optional<double> recall_at_5;
    std::optional<double> kilt_rl;
    std::optional<double> top1_score;
    std::optional<double> overlap;
};

struct MetricMeans {
    double rouge_l = 0;
    double f1 = 0;
    std::optional<double> r_precision;
    std::optional<double> recall_at_5;
    std::optional<double> kilt_rl;
};

struct EvalReport {
    std::vector<QuestionRecord> records;
    MetricMeans means;
};

namespace detail {

template <typename Get>
std::optional<double> optional_mean(const std::vector<QuestionRecord>& rs, Get get)
{
    double sum = 0;
    std::size_t n = 0;
    for (const auto& r : rs) {
        if (auto v = get(r)) {
            sum += *v;
            ++n;
        }
    }
    if (n == 0) {
        return std::nullopt;
    }
    return sum / double(n);
}

}  // namespace detail

inline MetricMeans compute_means(const std::vector<QuestionRecord>& rs)
{
    MetricMeans m;
    m.rouge_l = detail::optional_mean(rs, [](const QuestionRecord& r) { return std::optional<double>(r.rouge_l); })
                    .value_or(0.0);
    m.f1 = detail::optional_mean(rs, [](const QuestionRecord& r) { return std::optional<double>(r.f1); }).value_or(0.0);
    m.r_precision = detail::optional_mean(rs, [](const QuestionRecord& r) { return r.r_precision; });
    m.recall_at_5 = detail::optional_mean(rs, [](const QuestionRecord& r) { return r.recall_at_5; });
    m.kilt_rl = detail::optional_mean(rs, [](const QuestionRecord& r) { return r.kilt_rl; });
    return m;
}

/// Scores one prediction. `retrieved` and `corpus` are optional; without them
/// retrieval metrics, top-1 score and overlap stay empty.
inline QuestionRecord score_question(const Question& q, std::string prediction, const RetrievedSet* retrieved = nullptr,
                                     const Corpus* corpus = nullptr, int overlap_n = 1)
{
    QuestionRecord r;
    r.q_id = q.q_id;
    r.rouge_l = rouge_l(prediction, q.gold_answers);
    r.f1 = unigram_f1(prediction, q.gold_answers);
    r.prediction = std::move(prediction);
    if (retrieved != nullptr) {
        if (!retrieved->docs.empty()) {
            r.top1_score = retrieved->docs.front().score;
        }
        if (q.gold_provenance && !q.gold_provenance->empty()) {
            const auto m = retrieval_metrics(*retrieved, *q.gold_provenance);
            r.r_precision = m.r_precision;
            r.recall_at_5 = m.recall_at_5;
            r.kilt_rl = kilt_rl(r.rouge_l, m.r_precision);
        }
        if (corpus != nullptr) {
            std::vector<std::string> texts;
            for (const auto& d : retrieved->docs) {
                texts.push_back(corpus->by_id(d.doc_id).text);
            }
            double best = 0;
            for (const auto& g : q.gold_answers) {
                best = std::max(best, ngram_overlap(g, texts, overlap_n));
            }
            r.overlap = best;
        }
    }
    return r;
}

inline EvalReport make_report(std::vector<QuestionRecord> records)
{
    EvalReport rep;
    rep.records = std::move(records);
    rep.means = compute_means(rep.records);
    return rep;
}

struct Bin {
    double threshold = 0;
    std::size_t count = 0;
    std::optional<double> mean_rouge_l;
};

struct FineGrainedTables {
    std::vector<Bin> by_score;
    std::vector<Bin> by_overlap;
};

namespace detail {

template <typename Get>
std::vector<Bin> bin_by(const std::vector<QuestionRecord>& rs, std::span<const double> thresholds, Get get)
{
    std::vector<Bin> out;
    for (double t : thresholds) {
        Bin b{t, 0, std::nullopt};
        double sum = 0;
        for (const auto& r : rs) {
            const auto v = get(r);
            if (v && *v > t) {
                ++b.count;
                sum += r.rouge_l;
            }
        }
        if (b.count > 0) {
            b.mean_rouge_l = sum / double(b.count);
        }
        out.push_back(b);
    }
    // Nesting: a higher threshold can only shrink the subset.
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t j = 0; j < out.size(); ++j) {
            if (out[i].threshold < out[j].threshold && out[j].count > out[i].count) {
                throw std::logic_error("bin nesting violated");
            }
        }
    }
    return out;
}

}  // namespace detail

/// Mean ROUGE-L and count of the questions whose value strictly exceeds each threshold.
inline FineGrainedTables fine_grained_report(const EvalReport& report, std::span<const double> score_thresholds,
                                             std::span<const double> overlap_thresholds)
{
    FineGrainedTables t;
    t.by_score = detail::bin_by(report.records, score_thresholds, [](const QuestionRecord& r) { return r.top1_score; });
    t.by_overlap = detail::bin_by(report.records, overlap_thresholds, [](const QuestionRecord& r) { return r.overlap; });
    return t;
}

// ---- rendering -------------------------------------------------------------------------

inline std::string format_metric(std::optional<double> v, int precision = 4)
{
    if (!v) {
        return "—";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", precision, *v);
    return buf;
}

inline std::string render_bins(const std::string& title, const std::vector<Bin>& bins)
{
    std::ostringstream os;
    os << title << "\n";
    os << "  threshold   count   ROUGE-L\n";
    for (const auto& b : bins) {
        char line[96];
        std::snprintf(line, sizeof line, "  > %-8s %6zu   %s\n", format_metric(b.threshold, 2).c_str(), b.count,
                      format_metric(b.mean_rouge_l).c_str());
        os << line;
    }
    return os.str();
}

inline std::string render_report(const EvalReport& rep, const FineGrainedTables* bins = nullptr)
{
    std::ostringstream os;
    os << "questions  ROUGE-L  F1      RPr     R@5     KILT-RL\n";
    char line[128];
    std::snprintf(line, sizeof line, "%-10zu %-8s %-7s %-7s %-7s %s\n", rep.records.size(),
                  format_metric(rep.means.rouge_l).c_str(), format_metric(rep.means.f1).c_str(),
                  format_metric(rep.means.r_precision).c_str(), format_metric(rep.means.recall_at_5).c_str(),
                  format_metric(rep.means.kilt_rl).c_str());
    os << line;
    if (bins != nullptr) {
        os << "\n" << render_bins("by top-1 retrieval score", bins->by_score);
        os << "\n" << render_bins("by answer n-gram overlap", bins->by_overlap);
    }
    return os.str();
}

inline nlohmann::json optional_json(std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json to_json(const std::vector<Bin>& bins)
{
    auto out = nlohmann::json::array();
    for (const auto& b : bins) {
        out.push_back({{"threshold", b.threshold}, {"count", b.count}, {"mean_rouge_l", optional_json(b.mean_rouge_l)}});
    }
    return out;
}

inline nlohmann::json to_json(const EvalReport& rep, const FineGrainedTables* bins = nullptr)
{
    auto records = nlohmann::json::array();
    for (const auto& r : rep.records) {
        records.push_back({{"id", r.q_id},
                           {"prediction", r.prediction},
                           {"rouge_l", r.rouge_l},
                           {"f1", r.f1},
                           {"r_precision", optional_json(r.r_precision)},
                           {"recall_at_5", optional_json(r.recall_at_5)},
                           {"kilt_rl", optional_json(r.kilt_rl)},
                           {"top1_score", optional_json(r.top1_score)},
                           {"overlap", optional_json(r.overlap)}});
    }
    nlohmann::json j{{"count", rep.records.size()},
                     {"means",
                      {{"rouge_l", rep.means.rouge_l},
                       {"f1", rep.means.f1},
                       {"r_precision", optional_json(rep.means.r_precision)},
                       {"recall_at_5", optional_json(rep.means.recall_at_5)},
                       {"kilt_rl", optional_json(rep.means.kilt_rl)}}},
                     {"records", records}};
    if (bins != nullptr) {
        j["bins"] = {{"by_score", to_json(bins->by_score)}, {"by_overlap", to_json(bins->by_overlap)}};
    }
    return j;
}

}  // namespace rbg
