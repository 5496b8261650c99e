#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "corpus.hpp"
#include "evaluation.hpp"
#include "json.hpp"
#include "pretraining.hpp"
#include "retrieval.hpp"
#include "training.hpp"

namespace rbg::cli {

/// Bad flags or option values. Exit code 2.
class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A required input that does not exist. Exit code 1, path reported.
class MissingFile : public DataError {
  public:
    explicit MissingFile(std::string p) : DataError("missing file: " + p), path(std::move(p)) {}
    std::string path;
};

inline std::string utc_now()
{
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

inline std::string hex64(std::uint64_t v)
{
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

/// Records one command run; written as `<output>.manifest.json` beside the
/// primary output.
class Manifest {
  public:
    Manifest(std::string command, std::uint64_t seed) : m_command(std::move(command)), m_seed(seed), m_started(utc_now())
    {
    }

    /// Registers an input, failing early if it is missing.
    const std::string& input(const std::string& path)
    {
        if (!std::filesystem::is_regular_file(path)) {
            throw MissingFile(path);
        }
        m_inputs[path] = hex64(file_hash(path));
        return path;
    }

    void output(const std::string& path) { m_outputs.push_back(path); }
    void config(nlohmann::json c) { m_config = std::move(c); }

    [[nodiscard]] nlohmann::json to_json() const
    {
        return {{"command", m_command}, {"config", m_config},   {"inputs", m_inputs},   {"seed", m_seed},
                {"outputs", m_outputs}, {"started", m_started}, {"finished", utc_now()}};
    }

    void write(const std::string& primary) const
    {
        const auto path = primary + ".manifest.json";
        std::ofstream out(path);
        if (!out) {
            throw DataError("cannot write " + path);
        }
        out << to_json().dump(2) << '\n';
    }

  private:
    std::string m_command;
    std::uint64_t m_seed;
    std::string m_started;
    nlohmann::json m_config = nlohmann::json::object();
    std::map<std::string, std::string> m_inputs;
    std::vector<std::string> m_outputs;
};

inline void write_text(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + path);
    }
    out << text;
}

inline bool is_dense_index(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    char magic[8] = {};
    in.read(magic, sizeof magic);
    return in.gcount() == 8 && std::string(magic, 8) == "RBGDIDX1";
}

/// Where documents for a question come from: a precomputed retrieval file or
/// an index queried on demand.
class RetrievalSource {
  public:
    static RetrievalSource from_file(const std::string& path)
    {
        RetrievalSource s;
        for (auto& r : load_retrievals(path)) {
            const auto id = r.q_id;
            s.m_cached.emplace(id, std::move(r));
        }
        return s;
    }

    static RetrievalSource from_index(const std::string& path)
    {
        RetrievalSource s;
        if (is_dense_index(path)) {
            s.m_dense = std::make_shared<DenseIndex>(DenseIndex::load(path));
        } else {
            std::ifstream in(path);
            nlohmann::json j;
            try {
                in >> j;
            } catch (const nlohmann::json::exception& e) {
                throw DataError(path + ": not a dense index or BM25 JSON: " + e.what());
            }
            s.m_bm25 = std::make_shared<Bm25Index>(Bm25Index::from_json(j));
        }
        return s;
    }

    [[nodiscard]] RetrievedSet operator()(const Question& q, std::size_t k) const
    {
        if (m_dense) {
            return retrieve_top_k(*m_dense, q, std::min(k, m_dense->size()));
        }
        if (m_bm25) {
            return m_bm25->retrieve(tokenize_words(q.text), k, std::nullopt, q.q_id);
        }
        const auto it = m_cached.find(q.q_id);
        if (it == m_cached.end()) {
            throw DataError("no retrieval for question " + q.q_id);
        }
        auto r = it->second;
        r.docs.resize(std::min(k, r.docs.size()));
        return r;
    }

    [[nodiscard]] RetrieveFn fn() const
    {
        return [self = *this](const Question& q, std::size_t k) { return self(q, k); };
    }

  private:
    std::map<std::string, RetrievedSet> m_cached;
    std::shared_ptr<DenseIndex> m_dense;
    std::shared_ptr<Bm25Index> m_bm25;
};

struct Options {
    std::uint64_t seed = 0;
    bool seed_given = false;
    int jobs = 1;

    // shared inputs and outputs
    std::string corpus, questions, out, index, retrievals, checkpoint, config, examples;
    std::string train, valid, predictions, gold, log, state_out, resume, retrievals_out;
    std::vector<std::string> overrides;
    std::size_t k = 10;
    int beam = 4;
    int max_target = 300;
    bool no_reader = false;
    bool random_retrieval = false;

    // index
    std::string mode = "dense";
    int dense_d = 64;
    int dense_heads = 4;
    int dense_ffn = 128;
    int dense_layers = 2;
    int dense_max_len = 300;

    // pretrain-build / pretrain
    std::size_t n = 1000;
    double mask_rate = 0.3;
    std::size_t min_words = 5;
    std::size_t max_words = 60;
    bool no_entity_filter = false;
    std::size_t steps = 100;
    std::size_t batch_size = 1;
    std::size_t gate_warmup = 100;
    bool reader_frozen = false;

    // evaluate / ablate
    std::vector<double> score_thresholds;
    std::vector<double> overlap_thresholds;
    int ngram = 1;
    std::vector<std::string> variants;
};

inline TrainConfig resolve_train_config(const Options& o)
{
    TrainConfig c = o.config.empty() ? TrainConfig{} : load_train_config(o.config);
    for (const auto& kv : o.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw UsageError("--set expects key=value, got " + kv);
        }
        set_config_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    }
    if (o.seed_given) {
        c.seed = o.seed;
    }
    c.validate();
    return c;
}

inline RetrievalSource retrieval_source(const Options& o, Manifest& m)
{
    if (!o.retrievals.empty() && !o.index.empty()) {
        throw UsageError("give either --retrievals or --index, not both");
    }
    if (!o.retrievals.empty()) {
        return RetrievalSource::from_file(m.input(o.retrievals));
    }
    if (!o.index.empty()) {
        return RetrievalSource::from_index(m.input(o.index));
    }
    throw UsageError("one of --retrievals or --index is required");
}

inline void write_predictions(const std::string& path, const std::vector<Question>& qs,
                              const std::vector<std::string>& answers)
{
    std::vector<nlohmann::json> rows;
    for (std::size_t i = 0; i < qs.size(); ++i) {
        rows.push_back({{"id", qs[i].q_id}, {"answer", answers[i]}});
    }
    write_jsonl(path, rows);
}

// ---- subcommands ---------------------------------------------------------------------

inline void cmd_index(const Options& o, std::ostream& out)
{
    Manifest m("index", o.seed);
    const Corpus corpus = load_corpus(m.input(o.corpus));
    nlohmann::json cfg{{"mode", o.mode}, {"jobs", o.jobs}};
    if (parse_retrieval_mode(o.mode) == RetrievalMode::bm25) {
        write_text(o.out, Bm25Index::build(corpus).to_json().dump() + "\n");
    } else if (o.mode == "dense") {
        DenseEncoderConfig dc{o.dense_d, o.dense_heads, o.dense_ffn, o.dense_layers, o.dense_max_len, o.seed};
        cfg["encoder"] = to_json(dc);
        DenseEncoder enc(build_vocabulary(corpus, {}, 1), dc);
        DenseIndex::build(corpus, std::move(enc), o.jobs).save(o.out);
    } else {
        throw UsageError("--mode must be dense or bm25");
    }
    m.config(cfg);
    m.output(o.out);
    m.write(o.out);
    out << "indexed " << corpus.size() << " documents -> " << o.out << "\n";
}

inline void cmd_retrieve(const Options& o, std::ostream& out)
{
    Manifest m("retrieve", o.seed);
    const auto source = RetrievalSource::from_index(m.input(o.index));
    const auto qs = load_questions(m.input(o.questions));
    std::vector<nlohmann::json> rows;
    for (const auto& q : qs) {
        rows.push_back(to_json(source(q, o.k)));
    }
    write_jsonl(o.out, rows);
    m.config({{"k", o.k}});
    m.output(o.out);
    m.write(o.out);
    out << "retrieved top-" << o.k << " for " << qs.size() << " questions -> " << o.out << "\n";
}

inline void cmd_pretrain_build(const Options& o, std::ostream& out)
{
    Manifest m("pretrain-build", o.seed);
    const Corpus corpus = load_corpus(m.input(o.corpus));
    SentenceFilter filter;
    filter.min_words = o.min_words;
    filter.max_words = o.max_words;
    filter.require_entity = !o.no_entity_filter;
    const auto examples =
        build_rar_examples(corpus, Bm25Index::build(corpus), filter, o.k, o.n, o.seed, MaskOptions{o.mask_rate});
    save_rar_examples(o.out, examples);
    m.config({{"k", o.k},
              {"n", o.n},
              {"mask_rate", o.mask_rate},
              {"min_words", o.min_words},
              {"max_words", o.max_words},
              {"require_entity", filter.require_entity}});
    m.output(o.out);
    m.write(o.out);
    out << "built " << examples.size() << " recovery examples -> " << o.out << "\n";
}

inline void cmd_pretrain(const Options& o, std::ostream& out)
{
    Manifest m("pretrain", o.seed);
    const auto tc = resolve_train_config(o);
    const Corpus corpus = load_corpus(m.input(o.corpus));
    const auto examples = load_rar_examples(m.input(o.examples));
    // The vocabulary must also cover the questions the checkpoint will be fine-tuned on.
    std::vector<Question> qs;
    if (!o.questions.empty()) {
        qs = load_questions(m.input(o.questions));
    }
    RbgModel<double> model(build_vocabulary(corpus, qs, tc.min_count), tc.model_config());
    PretrainConfig pc;
    pc.steps = o.steps;
    pc.batch_size = o.batch_size;
    pc.adam = tc.adam();
    pc.seed = tc.seed;
    pc.reader_frozen = o.reader_frozen;
    pc.gate_warmup = o.gate_warmup;
    const auto result = pretrain(model, corpus, std::span<const RarExample>(examples), pc);
    save_checkpoint(o.out, model);
    const auto curve = o.out + ".curve.json";
    write_text(curve, nlohmann::json{{"epoch_losses", result.epoch_losses}, {"step_losses", result.step_losses}}.dump() +
                          "\n");
    auto cfg = to_json(tc);
    cfg["steps"] = o.steps;
    cfg["batch_size"] = o.batch_size;
    cfg["gate_warmup"] = o.gate_warmup;
    cfg["reader_frozen"] = o.reader_frozen;
    m.config(cfg);
    m.output(o.out);
    m.output(curve);
    m.write(o.out);
    out << "pretrained " << o.steps << " steps, loss " << result.step_losses.front() << " -> "
        << result.step_losses.back() << " -> " << o.out << "\n";
}

inline void cmd_train(const Options& o, std::ostream& out)
{
    Manifest m("train", o.seed);
    const auto tc = resolve_train_config(o);
    if (!tc.from_pretrained.empty()) {
        m.input(tc.from_pretrained);
    }
    const Corpus corpus = load_corpus(m.input(o.corpus));
    auto train = load_questions(m.input(o.train), &corpus);
    std::vector<Question> valid;
    if (!o.valid.empty()) {
        valid = load_questions(m.input(o.valid), &corpus);
    }
    const auto source = retrieval_source(o, m);
    Trainer<double> trainer(tc, corpus, std::move(train), std::move(valid), source.fn());
    if (!o.resume.empty()) {
        trainer.restore_state(m.input(o.resume));
    }
    const auto log_path = o.log.empty() ? o.out + ".log.jsonl" : o.log;
    std::ofstream log(log_path, o.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) {
        throw DataError("cannot write " + log_path);
    }
    trainer.on_log([&log](const nlohmann::json& row) { log << row.dump() << '\n'; });
    trainer.run();
    save_checkpoint(o.out, trainer.best_model());
    m.output(o.out);
    m.output(log_path);
    if (!o.state_out.empty()) {
        trainer.save_state(o.state_out);
        m.output(o.state_out);
    }
    m.config(to_json(tc));
    m.write(o.out);
    out << "trained " << trainer.step() << " steps; best step " << trainer.best_step();
    if (trainer.best_metric()) {
        out << " (validation ROUGE-L " << *trainer.best_metric() << ")";
    }
    out << " -> " << o.out << "\n";
}

/// Answers each question with the checkpoint; also returns the document sets used.
inline std::vector<std::string> answer_all(const RbgModel<double>& model, const Corpus& corpus,
                                           const std::vector<Question>& qs, const RetrievalSource& source,
                                           const Options& o, std::vector<RetrievedSet>* used)
{
    RunOptions run;
    if (o.no_reader) {
        run.gate_override = 1.0;
    }
    const DecodeConfig dc{o.beam, o.max_target};
    std::vector<std::string> answers;
    for (const auto& q : qs) {
        auto set = inference_set(corpus, q, source.fn(), o.k, o.random_retrieval, o.seed);
        answers.push_back(generate_answer(model, q, resolve_docs(corpus, set), dc, run));
        if (used != nullptr) {
            used->push_back(std::move(set));
        }
    }
    return answers;
}

inline void cmd_generate(const Options& o, std::ostream& out)
{
    Manifest m("generate", o.seed);
    const auto model = load_checkpoint<double>(m.input(o.checkpoint));
    const Corpus corpus = load_corpus(m.input(o.corpus));
    const auto qs = load_questions(m.input(o.questions));
    const auto source = retrieval_source(o, m);
    std::vector<RetrievedSet> used;
    const auto answers = answer_all(model, corpus, qs, source, o, &used);
    write_predictions(o.out, qs, answers);
    m.output(o.out);
    if (!o.retrievals_out.empty()) {
        std::vector<nlohmann::json> rows;
        for (const auto& r : used) {
            rows.push_back(to_json(r));
        }
        write_jsonl(o.retrievals_out, rows);
        m.output(o.retrievals_out);
    }
    m.config({{"k", o.k},
              {"beam", o.beam},
              {"max_target", o.max_target},
              {"no_reader", o.no_reader},
              {"random_retrieval", o.random_retrieval}});
    m.write(o.out);
    out << "generated " << answers.size() << " answers -> " << o.out << "\n";
}

inline void cmd_evaluate(const Options& o, std::ostream& out)
{
    Manifest m("evaluate", o.seed);
    std::optional<Corpus> corpus;
    if (!o.corpus.empty()) {
        corpus = load_corpus(m.input(o.corpus));
    }
    const auto gold = load_questions(m.input(o.gold));
    std::map<std::string, std::string> predictions;
    for_each_jsonl(m.input(o.predictions), [&](const nlohmann::json& j) {
        predictions[j.at("id").get<std::string>()] = j.at("answer").get<std::string>();
    });
    std::map<std::string, RetrievedSet> retrieved;
    if (!o.retrievals.empty()) {
        for (auto& r : load_retrievals(m.input(o.retrievals))) {
            const auto id = r.q_id;
            retrieved.emplace(id, std::move(r));
        }
    }
    std::vector<QuestionRecord> records;
    for (const auto& q : gold) {
        const auto p = predictions.find(q.q_id);
        if (p == predictions.end()) {
            throw DataError("no prediction for question " + q.q_id);
        }
        const auto r = retrieved.find(q.q_id);
        const RetrievedSet* rs = r == retrieved.end() ? nullptr : &r->second;
        if (!o.retrievals.empty() && rs == nullptr) {
            throw DataError("no retrieval for question " + q.q_id);
        }
        records.push_back(score_question(q, p->second, rs, corpus ? &*corpus : nullptr, o.ngram));
    }
    const auto report = make_report(std::move(records));
    std::optional<FineGrainedTables> bins;
    if (!o.score_thresholds.empty() || !o.overlap_thresholds.empty()) {
        bins = fine_grained_report(report, o.score_thresholds, o.overlap_thresholds);
    }
    const auto* b = bins ? &*bins : nullptr;
    write_text(o.out, to_json(report, b).dump(2) + "\n");
    const auto table = render_report(report, b);
    write_text(o.out + ".txt", table);
    m.config({{"ngram", o.ngram}, {"score_thresholds", o.score_thresholds}, {"overlap_thresholds", o.overlap_thresholds}});
    m.output(o.out);
    m.output(o.out + ".txt");
    m.write(o.out);
    out << table;
}

inline void cmd_ablate(const Options& o, std::ostream& out)
{
    Manifest m("ablate", o.seed);
    const auto tc = resolve_train_config(o);
    if (!tc.from_pretrained.empty()) {
        m.input(tc.from_pretrained);
    }
    const Corpus corpus = load_corpus(m.input(o.corpus));
    const auto train = load_questions(m.input(o.train), &corpus);
    const auto valid = load_questions(m.input(o.valid), &corpus);
    const auto source = retrieval_source(o, m);
    const auto variants = o.variants.empty() ? ablation_variants() : o.variants;
    nlohmann::json rows = nlohmann::json::array();
    nlohmann::json reports = nlohmann::json::object();
    for (const auto& v : variants) {
        const auto r = ablate<double>(tc, v, corpus, train, valid, source.fn());
        rows.push_back({{"variant", v},
                        {"rouge_l", r.report.means.rouge_l},
                        {"f1", r.report.means.f1},
                        {"best_step", r.best_step},
                        {"gate_evaluations", r.stats.gate_evaluations}});
        reports[v] = to_json(r.report);
        out << std::left << std::setw(18) << v << " ROUGE-L " << format_metric(r.report.means.rouge_l) << "  F1 "
            << format_metric(r.report.means.f1) << "\n";
    }
    write_text(o.out, nlohmann::json{{"rows", rows}, {"reports", reports}}.dump(2) + "\n");
    auto cfg = to_json(tc);
    cfg["variants"] = variants;
    m.config(cfg);
    m.output(o.out);
    m.write(o.out);
}

inline void cmd_faithfulness(const Options& o, std::ostream& out)
{
    Manifest m("faithfulness", o.seed);
    const auto model = load_checkpoint<double>(m.input(o.checkpoint));
    const Corpus corpus = load_corpus(m.input(o.corpus));
    const auto qs = load_questions(m.input(o.questions));
    for (const auto& q : qs) {
        if (q.gold_answers.empty()) {
            throw DataError("question " + q.q_id + " has no gold answers");
        }
    }
    const auto source = retrieval_source(o, m);
    const auto answers = answer_all(model, corpus, qs, source, o, nullptr);
    std::vector<FaithfulnessRecord> records;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < qs.size(); ++i) {
        records.push_back(make_faithfulness_record(qs[i].q_id, qs[i].gold_answers, answers[i]));
        rows.push_back({{"id", qs[i].q_id}, {"gold", qs[i].gold_answers}, {"generated", answers[i]}, {"hit", records.back().hit}});
    }
    const double recall = faithfulness_recall(records);
    write_text(o.out, nlohmann::json{{"recall", recall}, {"count", records.size()}, {"rows", rows}}.dump(2) + "\n");
    m.config({{"k", o.k}, {"beam", o.beam}, {"max_target", o.max_target}});
    m.output(o.out);
    m.write(o.out);
    out << "faithfulness recall " << format_metric(recall) << " over " << records.size() << " questions\n";
}

// ---- entry point ------------------------------------------------------------------------

inline void report_error(std::ostream& err, const std::string& kind, const std::string& message,
                         const std::string& path = {})
{
    nlohmann::json j{{"error", kind}, {"message", message}};
    if (!path.empty()) {
        j["path"] = path;
    }
    err << j.dump() << "\n";
}

/// Runs one subcommand. Exit codes: 0 success, 1 data or runtime error, 2 usage error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"Read-before-generate long-form QA toolkit"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--seed", o.seed, "run seed")->each([&o](const std::string&) { o.seed_given = true; });
    app.add_option("--jobs", o.jobs, "worker cap")->check(CLI::PositiveNumber);

    auto* index = app.add_subcommand("index", "build a dense or BM25 index over a corpus");
    index->add_option("--corpus", o.corpus)->required();
    index->add_option("--out", o.out)->required();
    index->add_option("--mode", o.mode)->check(CLI::IsMember({"dense", "bm25"}));
    index->add_option("--d-model", o.dense_d);
    index->add_option("--heads", o.dense_heads);
    index->add_option("--ffn-dim", o.dense_ffn);
    index->add_option("--layers", o.dense_layers);
    index->add_option("--max-len", o.dense_max_len);

    auto* retrieve = app.add_subcommand("retrieve", "top-K documents per question");
    retrieve->add_option("--index", o.index)->required();
    retrieve->add_option("--questions", o.questions)->required();
    retrieve->add_option("--k", o.k);
    retrieve->add_option("--out", o.out)->required();

    auto* build = app.add_subcommand("pretrain-build", "build retrieval-augmented recovery examples");
    build->add_option("--corpus", o.corpus)->required();
    build->add_option("--k", o.k);
    build->add_option("--n", o.n);
    build->add_option("--seed", o.seed)->each([&o](const std::string&) { o.seed_given = true; });
    build->add_option("--out", o.out)->required();
    build->add_option("--mask-rate", o.mask_rate);
    build->add_option("--min-words", o.min_words);
    build->add_option("--max-words", o.max_words);
    build->add_flag("--no-entity-filter", o.no_entity_filter);

    auto* pre = app.add_subcommand("pretrain", "pre-train on recovery examples");
    pre->add_option("--examples", o.examples)->required();
    pre->add_option("--corpus", o.corpus)->required();
    pre->add_option("--out", o.out)->required();
    pre->add_option("--questions", o.questions, "extra vocabulary source (fine-tuning questions)");
    pre->add_option("--config", o.config);
    pre->add_option("--set", o.overrides);
    pre->add_option("--steps", o.steps);
    pre->add_option("--batch-size", o.batch_size);
    pre->add_option("--gate-warmup", o.gate_warmup);
    pre->add_flag("--reader-frozen", o.reader_frozen);

    auto add_training_inputs = [&o](CLI::App* c) {
        c->add_option("--config", o.config);
        c->add_option("--set", o.overrides, "key=value config override");
        c->add_option("--corpus", o.corpus)->required();
        c->add_option("--train", o.train)->required();
        c->add_option("--retrievals", o.retrievals);
        c->add_option("--index", o.index);
        c->add_option("--out", o.out)->required();
    };
    auto* train = app.add_subcommand("train", "fine-tune reader and generator");
    add_training_inputs(train);
    train->add_option("--valid", o.valid);
    train->add_option("--log", o.log);
    train->add_option("--state-out", o.state_out);
    train->add_option("--resume", o.resume);

    auto add_decoding = [&o](CLI::App* c) {
        c->add_option("--checkpoint", o.checkpoint)->required();
        c->add_option("--questions", o.questions)->required();
        c->add_option("--corpus", o.corpus)->required();
        c->add_option("--k", o.k);
        c->add_option("--beam", o.beam)->check(CLI::PositiveNumber);
        c->add_option("--max-target", o.max_target)->check(CLI::PositiveNumber);
        c->add_option("--retrievals", o.retrievals);
        c->add_option("--index", o.index);
        c->add_flag("--no-reader", o.no_reader);
        c->add_flag("--random-retrieval", o.random_retrieval);
        c->add_option("--out", o.out)->required();
    };
    auto* generate = app.add_subcommand("generate", "answer questions with a checkpoint");
    add_decoding(generate);
    generate->add_option("--retrievals-out", o.retrievals_out);

    auto* evaluate = app.add_subcommand("evaluate", "score predictions");
    evaluate->add_option("--predictions", o.predictions)->required();
    evaluate->add_option("--gold", o.gold)->required();
    evaluate->add_option("--retrievals", o.retrievals);
    evaluate->add_option("--corpus", o.corpus);
    evaluate->add_option("--out", o.out)->required();
    evaluate->add_option("--score-thresholds", o.score_thresholds)->delimiter(',');
    evaluate->add_option("--overlap-thresholds", o.overlap_thresholds)->delimiter(',');
    evaluate->add_option("--ngram", o.ngram)->check(CLI::PositiveNumber);

    auto* abl = app.add_subcommand("ablate", "train and score ablation variants");
    add_training_inputs(abl);
    abl->add_option("--valid", o.valid)->required();
    abl->add_option("--variants", o.variants)->delimiter(',')->check(CLI::IsMember(ablation_variants()));

    auto* faith = app.add_subcommand("faithfulness", "zero-shot recall of short answers in long generations");
    add_decoding(faith);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    try {
        const std::map<CLI::App*, void (*)(const Options&, std::ostream&)> table{
            {index, cmd_index},       {retrieve, cmd_retrieve}, {build, cmd_pretrain_build},
            {pre, cmd_pretrain},      {train, cmd_train},       {generate, cmd_generate},
            {evaluate, cmd_evaluate}, {abl, cmd_ablate},        {faith, cmd_faithfulness}};
        for (const auto& [sub, fn] : table) {
            if (sub->parsed()) {
                fn(o, out);
            }
        }
    } catch (const UsageError& e) {
        report_error(err, "usage", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        report_error(err, "usage", e.what());
        return 2;
    } catch (const MissingFile& e) {
        report_error(err, "data", e.what(), e.path);
        return 1;
    } catch (const std::exception& e) {
        report_error(err, "data", e.what());
        return 1;
    }
    return 0;
}

}  // namespace rbg::cli
