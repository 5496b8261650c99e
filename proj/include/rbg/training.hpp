#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "evaluation.hpp"
#include "json.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "retrieval.hpp"
#include "serialize.hpp"
#include "step.hpp"

namespace rbg {

struct TrainConfig {
    double learning_rate = 5e-5;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    std::size_t batch_size = 4;
    std::size_t max_steps = 1000;
    std::size_t eval_interval = 500;
    std::size_t k = 10;
    std::uint64_t seed = 0;
    bool no_reader = false;
    bool reader_frozen = false;
    bool random_retrieval = false;
    // Steps trained with the gate held at 1 before the reader joins. A randomly
    // initialized vocabulary softmax loses to the copy distribution early on and
    // the gate then saturates toward copying, starving the generator.
    std::size_t gate_warmup = 100;
    std::string from_pretrained;  // checkpoint path; empty means random init
    int d_model = 64;
    int heads = 4;
    int ffn_dim = 256;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int reader_layers = 2;
    int max_source = 300;
    std::string copy_norm = "spread";
    int min_count = 1;
    int beam_size = 4;
    int max_target = 300;

    void validate() const
    {
        if (!(learning_rate > 0) || weight_decay < 0 || clip_norm < 0 || batch_size == 0 || max_steps == 0 ||
            eval_interval == 0 || k == 0 || d_model <= 0 || heads <= 0 || ffn_dim <= 0 || max_source <= 0 ||
            min_count <= 0 || beam_size <= 0 || max_target <= 0 || encoder_layers <= 0 || decoder_layers <= 0 ||
            reader_layers <= 0) {
            throw std::invalid_argument("train config: numeric fields must be positive");
        }
        if (no_reader && reader_frozen) {
            throw std::invalid_argument("train config: no_reader and reader_frozen are mutually exclusive");
        }
        parse_copy_norm(copy_norm);
    }

    [[nodiscard]] ModelConfig model_config() const
    {
        ModelConfig m;
        m.d_model = d_model;
        m.heads = heads;
        m.ffn_dim = ffn_dim;
        m.encoder_layers = encoder_layers;
        m.decoder_layers = decoder_layers;
        m.reader_layers = reader_layers;
        m.max_source = max_source;
        m.copy_norm = parse_copy_norm(copy_norm);
        m.seed = seed;
        return m;
    }

    [[nodiscard]] RunOptions run_options() const
    {
        RunOptions o;
        if (no_reader) {
            o.gate_override = 1.0;
        }
        return o;
    }

    /// Options for the optimizer step that follows `completed` steps.
    [[nodiscard]] RunOptions training_options(std::size_t completed) const
    {
        auto o = run_options();
        if (completed < gate_warmup) {
            o.gate_override = 1.0;
        }
        return o;
    }

    [[nodiscard]] AdamConfig adam() const
    {
        AdamConfig a;
        a.learning_rate = learning_rate;
        a.weight_decay = weight_decay;
        a.clip_norm = clip_norm;
        return a;
    }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1") {
        return true;
    }
    if (v == "false" || v == "0") {
        return false;
    }
    throw std::invalid_argument("config key " + key + ": expected true/false, got " + v);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v)
{
    std::istringstream is(v);
    N out{};
    is >> out;
    if (!is || !is.eof()) {
        throw std::invalid_argument("config key " + key + ": bad number " + v);
    }
    return out;
}

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

/// Sets one field by name. Unknown keys are an error.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value)
{
    using detail::parse_bool;
    using detail::parse_number;
    if (key == "learning_rate") c.learning_rate = parse_number<double>(key, value);
    else if (key == "weight_decay") c.weight_decay = parse_number<double>(key, value);
    else if (key == "clip_norm") c.clip_norm = parse_number<double>(key, value);
    else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(key, value);
    else if (key == "max_steps") c.max_steps = parse_number<std::size_t>(key, value);
    else if (key == "eval_interval") c.eval_interval = parse_number<std::size_t>(key, value);
    else if (key == "k") c.k = parse_number<std::size_t>(key, value);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "no_reader") c.no_reader = parse_bool(key, value);
    else if (key == "reader_frozen") c.reader_frozen = parse_bool(key, value);
    else if (key == "gate_warmup") c.gate_warmup = parse_number<std::size_t>(key, value);
    else if (key == "random_retrieval") c.random_retrieval = parse_bool(key, value);
    else if (key == "from_pretrained") c.from_pretrained = value;
    else if (key == "d_model") c.d_model = parse_number<int>(key, value);
    else if (key == "heads") c.heads = parse_number<int>(key, value);
    else if (key == "ffn_dim") c.ffn_dim = parse_number<int>(key, value);
    else if (key == "encoder_layers") c.encoder_layers = parse_number<int>(key, value);
    else if (key == "decoder_layers") c.decoder_layers = parse_number<int>(key, value);
    else if (key == "reader_layers") c.reader_layers = parse_number<int>(key, value);
    else if (key == "max_source") c.max_source = parse_number<int>(key, value);
    else if (key == "copy_norm") c.copy_norm = value;
    else if (key == "min_count") c.min_count = parse_number<int>(key, value);
    else if (key == "beam_size") c.beam_size = parse_number<int>(key, value);
    else if (key == "max_target") c.max_target = parse_number<int>(key, value);
    else throw std::invalid_argument("unknown config key: " + key);
}

/// `key = value` lines; '#' starts a comment.
inline TrainConfig parse_train_config(std::istream& in, TrainConfig base = {})
{
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) {
            line.resize(hash);
        }
        line = detail::trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        }
        set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return base;
}

inline TrainConfig load_train_config(const std::string& path, TrainConfig base = {})
{
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path);
    }
    return parse_train_config(in, base);
}

inline nlohmann::json to_json(const TrainConfig& c)
{
    return {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
            {"clip_norm", c.clip_norm},         {"batch_size", c.batch_size},
            {"max_steps", c.max_steps},         {"eval_interval", c.eval_interval},
            {"k", c.k},                         {"seed", c.seed},
            {"no_reader", c.no_reader},         {"reader_frozen", c.reader_frozen},
            {"random_retrieval", c.random_retrieval}, {"gate_warmup", c.gate_warmup},
            {"from_pretrained", c.from_pretrained},
            {"d_model", c.d_model},             {"heads", c.heads},
            {"ffn_dim", c.ffn_dim},             {"encoder_layers", c.encoder_layers},
            {"decoder_layers", c.decoder_layers}, {"reader_layers", c.reader_layers},
            {"max_source", c.max_source},       {"copy_norm", c.copy_norm},
            {"min_count", c.min_count},         {"beam_size", c.beam_size},
            {"max_target", c.max_target}};
}

/// Returns the retrieved doc ids for one question (top-K).
using RetrieveFn = std::function<RetrievedSet(const Question&, std::size_t k)>;

/// The retriever's top-K for one question, or K random documents when `random` is set.
inline RetrievedSet inference_set(const Corpus& corpus, const Question& q, const RetrieveFn& retrieve, std::size_t k,
                                  bool random, std::uint64_t seed)
{
    auto set = random ? random_retrieve(corpus, k, derive_seed(seed, "random.retrieval:" + q.q_id), q.q_id)
                      : retrieve(q, k);
    if (set.docs.empty()) {
        throw DataError("no documents retrieved for question " + q.q_id);
    }
    return set;
}

inline std::vector<const Document*> resolve_docs(const Corpus& corpus, const RetrievedSet& set)
{
    std::vector<const Document*> docs;
    for (const auto& d : set.docs) {
        docs.push_back(&corpus.by_id(d.doc_id));
    }
    return docs;
}

inline std::vector<const Document*> inference_docs(const Corpus& corpus, const Question& q, const RetrieveFn& retrieve,
                                                   std::size_t k, bool random, std::uint64_t seed)
{
    return resolve_docs(corpus, inference_set(corpus, q, retrieve, k, random, seed));
}

template <typename T>
std::string generate_answer(const RbgModel<T>& m, const Question& q, std::vector<const Document*> docs,
                            const DecodeConfig& dc, const RunOptions& run, ForwardStats* stats = nullptr)
{
    Example ex{m.vocab().tokenize(q.text), std::move(docs)};
    ForwardStats local;
    const auto ids = generate(m, ex, dc, run, &local);
    if (stats != nullptr) {
        stats->encoder_attention_entries += local.encoder_attention_entries;
        stats->gate_evaluations += local.gate_evaluations;
        stats->reader_calls += local.reader_calls;
    }
    return m.vocab().decode_answer(ids);
}

/// Fine-tunes reader and generator on QA pairs, checking validation ROUGE-L
/// every `eval_interval` steps and at the end.
template <typename T>
class Trainer {
  public:
    Trainer(TrainConfig config, const Corpus& corpus, std::vector<Question> train, std::vector<Question> valid,
            const RetrieveFn& retrieve, std::optional<RbgModel<T>> init = std::nullopt)
        : m_config(std::move(config)),
          m_corpus(corpus),
          m_train(std::move(train)),
          m_valid(std::move(valid)),
          m_model(init ? std::move(*init) : make_model(m_config, corpus, m_train)),
          m_rng(derive_seed(m_config.seed, "train.batches"))
    {
        m_config.validate();
        if (m_train.empty()) {
            throw DataError("no training questions");
        }
        m_model.set_reader_trainable(!m_config.reader_frozen);
        m_opt = AdamW<T>(m_model.params(), m_config.adam());
        // Retrieval happens once per question; the retriever is not trained.
        for (const auto& q : m_train) {
            if (q.gold_answers.empty()) {
                throw DataError("training question " + q.q_id + " has no answers");
            }
            BatchItem item;
            item.id = q.q_id;
            item.example = {m_model.vocab().tokenize(q.text), inference_docs(corpus, q, retrieve, m_config.k, false, 0)};
            item.target = answer_target(m_model.vocab(), q.gold_answers.front());
            m_items.push_back(std::move(item));
        }
        for (const auto& q : m_valid) {
            m_valid_docs.push_back(inference_docs(corpus, q, retrieve, m_config.k, m_config.random_retrieval,
                                                  m_config.seed));
        }
    }

    static RbgModel<T> make_model(const TrainConfig& c, const Corpus& corpus, const std::vector<Question>& train)
    {
        if (!c.from_pretrained.empty()) {
            return load_checkpoint<T>(c.from_pretrained);
        }
        return RbgModel<T>(build_vocabulary(corpus, train, c.min_count), c.model_config());
    }

    [[nodiscard]] const TrainConfig& config() const { return m_config; }
    [[nodiscard]] const RbgModel<T>& model() const { return m_model; }
    RbgModel<T>& model() { return m_model; }
    [[nodiscard]] std::size_t step() const { return m_step; }
    [[nodiscard]] const std::vector<double>& losses() const { return m_losses; }
    [[nodiscard]] const std::vector<nlohmann::json>& log() const { return m_log; }
    [[nodiscard]] const ForwardStats& stats() const { return m_stats; }
    [[nodiscard]] std::optional<double> best_metric() const { return m_best_metric; }
    [[nodiscard]] std::size_t best_step() const { return m_best_step; }

    [[nodiscard]] const std::vector<const Document*>& train_docs(std::size_t i) const
    {
        return m_items.at(i).example.docs;
    }
    [[nodiscard]] const std::vector<const Document*>& valid_docs(std::size_t i) const { return m_valid_docs.at(i); }

    /// Mean sequence loss over every training question under the current parameters.
    [[nodiscard]] double training_loss() const
    {
        double sum = 0;
        for (const auto& item : m_items) {
            sum += static_cast<double>(sequence_loss_value(m_model, item.example, item.target, m_config.run_options()));
        }
        return sum / double(m_items.size());
    }

    /// Called with every log row as it is produced.
    void on_log(std::function<void(const nlohmann::json&)> sink) { m_sink = std::move(sink); }

    double train_step()
    {
        std::vector<BatchItem> batch;
        for (std::size_t i = 0; i < m_config.batch_size; ++i) {
            batch.push_back(m_items[m_rng.uniform_index(m_items.size())]);
        }
        const double loss =
            batch_step(m_model, m_opt, std::span<const BatchItem>(batch), m_config.training_options(m_step), &m_stats);
        ++m_step;
        m_losses.push_back(loss);
        emit({{"step", m_step}, {"loss", loss}, {"lr", m_config.learning_rate}});
        return loss;
    }

    /// Mean validation ROUGE-L under the current parameters.
    double validate(ForwardStats* stats = nullptr) const
    {
        if (m_valid.empty()) {
            return 0.0;
        }
        double sum = 0;
        for (std::size_t i = 0; i < m_valid.size(); ++i) {
            const auto answer = generate_answer(m_model, m_valid[i], m_valid_docs[i], decode_config(),
                                                m_config.run_options(), stats);
            sum += rouge_l(answer, m_valid[i].gold_answers);
        }
        return sum / double(m_valid.size());
    }

    [[nodiscard]] DecodeConfig decode_config() const { return {m_config.beam_size, m_config.max_target}; }

    /// Trains up to `until` steps (default: max_steps).
    void run(std::optional<std::size_t> until = std::nullopt)
    {
        const auto end = std::min(until.value_or(m_config.max_steps), m_config.max_steps);
        while (m_step < end) {
            train_step();
            if (m_step % m_config.eval_interval == 0 || m_step == m_config.max_steps) {
                evaluate_and_track();
            }
        }
    }

    void evaluate_and_track()
    {
        if (m_valid.empty()) {
            m_best_step = m_step;
            m_best_params = snapshot();
            return;
        }
        const double r = validate(&m_stats);
        // Ties keep the earlier checkpoint.
        if (!m_best_metric || r > *m_best_metric) {
            m_best_metric = r;
            m_best_step = m_step;
            m_best_params = snapshot();
        }
        emit({{"step", m_step}, {"valid_rouge_l", r}, {"best_rouge_l", *m_best_metric}, {"best_step", m_best_step}});
    }

    /// The model with the best validation parameters loaded (or the current ones
    /// when nothing was evaluated).
    [[nodiscard]] RbgModel<T> best_model() const
    {
        RbgModel<T> m = m_model;
        if (!m_best_params.empty()) {
            for (std::size_t i = 0; i < m.params().size(); ++i) {
                m.params()[i].value = m_best_params[i];
            }
        }
        return m;
    }

    // ---- resumable state ----------------------------------------------------------

    /// Layout: "RBGSTAT1", u64 step, model container, u64 adam steps, adam
    /// first and second moments, u32 has_best, f64 best metric, u64 best step,
    /// best parameter tensors (when present), rng state string, loss history.
    void save_state(const std::string& path) const
    {
        BinaryWriter w;
        w.magic("RBGSTAT1");
        w.u64(m_step);
        write_model(w, m_model);
        w.u64(m_opt.steps());
        w.tensors(m_model.params(), m_opt.first_moment());
        w.tensors(m_model.params(), m_opt.second_moment());
        w.u32(m_best_params.empty() ? 0 : 1);
        w.f64(m_best_metric.value_or(0.0));
        w.u32(m_best_metric ? 1 : 0);
        w.u64(m_best_step);
        if (!m_best_params.empty()) {
            w.tensors(m_model.params(), m_best_params);
        }
        w.str(m_rng.state());
        w.u64(m_losses.size());
        for (double l : m_losses) {
            w.f64(l);
        }
        w.save(path);
    }

    void restore_state(const std::string& path)
    {
        auto r = BinaryReader::open(path);
        r.expect_magic("RBGSTAT1");
        m_step = r.u64();
        auto model = read_model<T>(r);
        if (!(model.vocab() == m_model.vocab())) {
            throw DataError("state file vocabulary does not match the trainer");
        }
        for (std::size_t i = 0; i < m_model.params().size(); ++i) {
            m_model.params()[i].value = model.params()[i].value;
        }
        const auto t = r.u64();
        auto m1 = r.tensors_for(m_model.params());
        auto m2 = r.tensors_for(m_model.params());
        m_opt.restore(t, std::move(m1), std::move(m2));
        const bool has_best_params = r.u32() != 0;
        const double best = r.f64();
        const bool has_best = r.u32() != 0;
        m_best_metric = has_best ? std::optional<double>(best) : std::nullopt;
        m_best_step = r.u64();
        m_best_params.clear();
        if (has_best_params) {
            m_best_params = r.tensors_for(m_model.params());
        }
        m_rng.restore(r.str());
        m_losses.resize(r.u64());
        for (double& l : m_losses) {
            l = r.f64();
        }
        if (!r.at_end()) {
            throw DataError("trailing bytes in state file " + path);
        }
    }

  private:
    std::vector<Matrix<T>> snapshot() const
    {
        std::vector<Matrix<T>> out;
        for (const auto& p : m_model.params()) {
            out.push_back(p.value);
        }
        return out;
    }

    void emit(nlohmann::json row)
    {
        m_log.push_back(row);
        if (m_sink) {
            m_sink(row);
        }
    }

    TrainConfig m_config;
    const Corpus& m_corpus;
    std::vector<Question> m_train;
    std::vector<Question> m_valid;
    RbgModel<T> m_model;
    AdamW<T> m_opt;
    Rng m_rng;
    std::vector<BatchItem> m_items;
    std::vector<std::vector<const Document*>> m_valid_docs;
    std::size_t m_step = 0;
    std::vector<double> m_losses;
    std::vector<nlohmann::json> m_log;
    std::function<void(const nlohmann::json&)> m_sink;
    ForwardStats m_stats;
    std::optional<double> m_best_metric;
    std::size_t m_best_step = 0;
    std::vector<Matrix<T>> m_best_params;
};

// ---- ablations ------------------------------------------------------------------------

inline const std::vector<std::string>& ablation_variants()
{
    static const std::vector<std::string> v{"full", "no_reader", "no_pretrain", "no_both", "reader_frozen",
                                            "random_retrieval"};
    return v;
}

/// The training configuration of a named variant. "no_pretrain" and "no_both"
/// drop `from_pretrained`; the other switches map onto the matching flags.
inline TrainConfig ablation_config(TrainConfig base, const std::string& which)
{
    base.no_reader = false;
    base.reader_frozen = false;
    base.random_retrieval = false;
    if (which == "full") {
    } else if (which == "no_reader") {
        base.no_reader = true;
    } else if (which == "no_pretrain") {
        base.from_pretrained.clear();
    } else if (which == "no_both") {
        base.no_reader = true;
        base.from_pretrained.clear();
    } else if (which == "reader_frozen") {
        base.reader_frozen = true;
    } else if (which == "random_retrieval") {
        base.random_retrieval = true;
    } else {
        throw std::invalid_argument("unknown ablation variant: " + which);
    }
    return base;
}

struct AblationResult {
    std::string variant;
    TrainConfig config;
    EvalReport report;
    ForwardStats stats;
    std::size_t best_step = 0;
};

/// Trains the variant, decodes the validation set with its best checkpoint and scores it.
template <typename T>
AblationResult ablate(const TrainConfig& base, const std::string& which, const Corpus& corpus,
                      const std::vector<Question>& train, const std::vector<Question>& valid,
                      const RetrieveFn& retrieve)
{
    AblationResult out;
    out.variant = which;
    out.config = ablation_config(base, which);
    Trainer<T> trainer(out.config, corpus, train, valid, retrieve);
    trainer.run();
    const auto model = trainer.best_model();
    std::vector<QuestionRecord> records;
    for (const auto& q : valid) {
        const auto used = inference_set(corpus, q, retrieve, out.config.k, out.config.random_retrieval,
                                        out.config.seed);
        const auto docs = resolve_docs(corpus, used);
        const auto answer = generate_answer(model, q, docs, trainer.decode_config(), out.config.run_options(),
                                            &out.stats);
        records.push_back(score_question(q, answer, &used, &corpus));
    }
    out.report = make_report(std::move(records));
    out.stats.gate_evaluations += trainer.stats().gate_evaluations;
    out.stats.reader_calls += trainer.stats().reader_calls;
    out.stats.encoder_attention_entries += trainer.stats().encoder_attention_entries;
    out.best_step = trainer.best_step();
    return out;
}

}  // namespace rbg
