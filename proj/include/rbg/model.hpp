#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "generator.hpp"
#include "input.hpp"
#include "nn.hpp"
#include "reader.hpp"
#include "serialize.hpp"

namespace rbg {

struct ModelConfig {
    int d_model = 64;
    int heads = 4;
    int ffn_dim = 256;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int reader_layers = 2;
    /// Token budget of each "question: Q title: T context: body" input, shared by reader and generator.
    int max_source = 300;
    CopyNorm copy_norm = CopyNorm::spread;
    std::uint64_t seed = 0;

    [[nodiscard]] TransformerShape shape() const { return {d_model, heads, ffn_dim}; }
};

inline nlohmann::json to_json(const ModelConfig& c)
{
    return {{"d_model", c.d_model},
            {"heads", c.heads},
            {"ffn_dim", c.ffn_dim},
            {"encoder_layers", c.encoder_layers},
            {"decoder_layers", c.decoder_layers},
            {"reader_layers", c.reader_layers},
            {"max_source", c.max_source},
            {"copy_norm", to_string(c.copy_norm)},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j)
{
    ModelConfig c;
    c.d_model = j.at("d_model");
    c.heads = j.at("heads");
    c.ffn_dim = j.at("ffn_dim");
    c.encoder_layers = j.at("encoder_layers");
    c.decoder_layers = j.at("decoder_layers");
    c.reader_layers = j.at("reader_layers");
    c.max_source = j.at("max_source");
    c.copy_norm = parse_copy_norm(j.at("copy_norm"));
    c.seed = j.at("seed");
    return c;
}

/// Reader and fusion-in-decoder generator sharing one vocabulary and one parameter set.
template <typename T>
class RbgModel {
  public:
    RbgModel(Vocabulary vocab, ModelConfig config) : m_vocab(std::move(vocab)), m_config(config)
    {
        if (config.d_model <= 0 || config.heads <= 0 || config.d_model % config.heads != 0) {
            throw std::invalid_argument("d_model must be a positive multiple of heads");
        }
        if (config.max_source < 4) {
            throw std::invalid_argument("max_source too small");
        }
        const auto v = static_cast<int>(m_vocab.size());
        Rng gen_rng(derive_seed(config.seed, "generator.init"));
        m_gen = add_generator(m_params, v, config.encoder_layers, config.decoder_layers, config.shape(), gen_rng);
        Rng reader_rng(derive_seed(config.seed, "reader.init"));
        m_reader = add_reader(m_params, v, config.reader_layers, config.shape(), reader_rng);
    }

    [[nodiscard]] const Vocabulary& vocab() const { return m_vocab; }
    [[nodiscard]] const ModelConfig& config() const { return m_config; }
    ParameterSet<T>& params() { return m_params; }
    [[nodiscard]] const ParameterSet<T>& params() const { return m_params; }
    [[nodiscard]] const GeneratorSlots& generator() const { return m_gen; }
    [[nodiscard]] const ReaderSlots& reader() const { return m_reader; }

    void set_reader_trainable(bool trainable)
    {
        for (auto& p : m_params) {
            if (p.name.rfind("reader.", 0) == 0) {
                p.trainable = trainable;
            }
        }
    }

    [[nodiscard]] std::uint64_t reader_hash() const { return m_params.hash("reader."); }

  private:
    Vocabulary m_vocab;
    ModelConfig m_config;
    ParameterSet<T> m_params;
    GeneratorSlots m_gen;
    ReaderSlots m_reader;
};

/// One question with its K documents.
struct Example {
    std::vector<int> question;
    std::vector<const Document*> docs;
};

struct RunOptions {
    /// Fixes p_gen for every step. At 1 the reader is never run.
    std::optional<double> gate_override;
};

inline bool skips_reader(const RunOptions& o) { return o.gate_override && *o.gate_override == 1.0; }

template <typename T>
std::vector<PairInput> pair_inputs(const RbgModel<T>& m, const Example& ex)
{
    std::vector<PairInput> out;
    for (const Document* d : ex.docs) {
        out.push_back(build_pair_input(m.vocab(), ex.question, *d, static_cast<std::size_t>(m.config().max_source)));
        if (out.back().body_count == 0) {
            throw std::invalid_argument("document truncated away");
        }
    }
    return out;
}

inline std::vector<std::vector<TokenSpan>> clipped_sentences(const Example& ex, std::span<const PairInput> inputs)
{
    std::vector<std::vector<TokenSpan>> out;
    for (std::size_t d = 0; d < inputs.size(); ++d) {
        out.push_back(clip_sentences(ex.docs[d]->sentences, inputs[d].body_count));
    }
    return out;
}

/// Everything the decoder needs for one example, recorded on a tape.
struct ContextVars {
    std::vector<PairInput> inputs;
    std::vector<std::vector<TokenSpan>> clipped;
    BankLayout layout;
    BankVars bank;
    std::vector<Var> per_doc_evidence;
    Var evidence;  // 1 x S, invalid when the reader is skipped
    Var copy;      // 1 x V, invalid when the reader is skipped
    CrossMemory memory;
};

template <typename T>
Var read_evidence(Graph<T>& g, const RbgModel<T>& m, std::span<const PairInput> inputs,
                  std::span<const std::vector<TokenSpan>> clipped, std::vector<Var>* per_doc = nullptr)
{
    std::vector<Var> parts;
    for (std::size_t d = 0; d < inputs.size(); ++d) {
        const auto spans = predict_spans(g, m.reader(), inputs[d], m.config().heads);
        parts.push_back(sentence_evidence(g.tape, spans.start, spans.end, clipped[d]));
    }
    if (per_doc != nullptr) {
        *per_doc = parts;
    }
    return normalize_across_docs(g.tape, std::span<const Var>(parts));
}

template <typename T>
ContextVars build_context(Graph<T>& g, const RbgModel<T>& m, const Example& ex, const RunOptions& opt)
{
    if (ex.docs.empty()) {
        throw std::invalid_argument("at least one document is required");
    }
    ContextVars c;
    c.inputs = pair_inputs(m, ex);
    c.clipped = clipped_sentences(ex, c.inputs);
    c.layout = make_layout(c.inputs, c.clipped);
    c.bank = encode_all(g, m.generator(), std::span<const PairInput>(c.inputs), m.config().heads);
    if (!skips_reader(opt)) {
        c.evidence = read_evidence(g, m, c.inputs, c.clipped, &c.per_doc_evidence);
        c.copy = copy_distribution(g.tape, c.evidence, c.layout, m.config().copy_norm, m.vocab().size());
    }
    c.memory = project_memory(g, m.generator().decoder, c.bank.states);
    return c;
}

template <typename T>
std::optional<T> gate_of(const RunOptions& opt)
{
    if (!opt.gate_override) {
        return std::nullopt;
    }
    return static_cast<T>(*opt.gate_override);
}

/// Teacher-forced mean negative log-likelihood of `target` (BOS ... EOS)
/// under the gated mixture distribution.
template <typename T>
Var sequence_loss(Graph<T>& g, const RbgModel<T>& m, const Example& ex, std::span<const int> target,
                  const RunOptions& opt = {})
{
    if (target.size() < 2 || target.front() != Vocabulary::bos || target.back() != Vocabulary::eos) {
        throw std::invalid_argument("target must start with BOS and end with EOS");
    }
    const auto ctx = build_context(g, m, ex, opt);
    const auto inputs = target.first(target.size() - 1);
    const auto labels = target.subspan(1);
    Var h_dec = decode_sequence(g, m.generator().decoder, inputs, ctx.memory, m.config().heads);
    const auto head = pointer_head(g, m.generator(), h_dec, ctx.bank.states, ctx.copy, gate_of<T>(opt));
    return g.tape.nll_mean(head.mixture, labels);
}

template <typename T>
T sequence_loss_value(const RbgModel<T>& m, const Example& ex, std::span<const int> target, const RunOptions& opt = {})
{
    Tape<T> t(false);
    Graph<T> g(t, m.params());
    return t.value(sequence_loss(g, m, ex, target, opt))(0, 0);
}

/// Loss and parameter gradients for one example.
template <typename T>
T loss_and_grad(const RbgModel<T>& m, const Example& ex, std::span<const int> target, const RunOptions& opt,
                std::vector<Matrix<T>>& grads, T weight = T(1), ForwardStats* stats = nullptr)
{
    Tape<T> t(true);
    Graph<T> g(t, m.params());
    Var loss = sequence_loss(g, m, ex, target, opt);
    t.backward(loss, weight);
    t.accumulate(grads);
    if (stats != nullptr) {
        stats->encoder_attention_entries += t.stats.encoder_attention_entries;
        stats->gate_evaluations += t.stats.gate_evaluations;
        stats->reader_calls += t.stats.reader_calls;
    }
    return t.value(loss)(0, 0);
}

// ---- value-level operations ----------------------------------------------------

/// Concatenated encoder outputs with their provenance.
template <typename T>
struct EncoderBank {
    Matrix<T> states;
    std::vector<Matrix<T>> blocks;
    BankLayout layout;
};

template <typename T>
EncoderBank<T> encode_all(const RbgModel<T>& m, const Example& ex, ForwardStats* stats = nullptr)
{
    Tape<T> t(false);
    Graph<T> g(t, m.params());
    const auto inputs = pair_inputs(m, ex);
    const auto clipped = clipped_sentences(ex, inputs);
    const auto bank = encode_all(g, m.generator(), std::span<const PairInput>(inputs), m.config().heads);
    EncoderBank<T> out;
    out.states = t.value(bank.states);
    for (Var b : bank.blocks) {
        out.blocks.push_back(t.value(b));
    }
    out.layout = make_layout(inputs, clipped);
    if (stats != nullptr) {
        *stats = t.stats;
    }
    return out;
}

template <typename T>
EvidenceDistribution read_evidence(const RbgModel<T>& m, const Example& ex)
{
    Tape<T> t(false);
    Graph<T> g(t, m.params());
    const auto inputs = pair_inputs(m, ex);
    const auto clipped = clipped_sentences(ex, inputs);
    std::vector<Var> per_doc;
    Var ev = read_evidence(g, m, std::span<const PairInput>(inputs), std::span<const std::vector<TokenSpan>>(clipped),
                           &per_doc);
    std::vector<std::vector<double>> scores;
    for (Var v : per_doc) {
        const auto& row = t.value(v);
        scores.emplace_back(row.data(), row.data() + row.size());
    }
    const auto& norm = t.value(ev);
    std::vector<double> normalized(norm.data(), norm.data() + norm.size());
    return make_evidence(scores, clipped, normalized);
}

inline std::vector<double> copy_distribution(const EvidenceDistribution& ev, const BankLayout& layout, CopyNorm norm,
                                             std::size_t vocab_size)
{
    if (ev.doc_count() != layout.sentence_counts.size()) {
        throw std::invalid_argument("evidence/bank mismatch");
    }
    Tape<double> t(false);
    Var e = t.constant(row_matrix<double>(ev.probs()));
    return row_vector<double>(t.value(copy_distribution(t, e, layout, norm, vocab_size)));
}

template <typename T>
struct DecoderStepOutput {
    std::vector<T> h_dec;
    std::vector<T> attention;
    std::vector<T> context;
    T gate = 0;
    std::vector<T> vocab_probs;
    std::vector<T> copy_probs;
    std::vector<T> mixture;
};

/// Distribution for the next token after `prefix` (which starts with BOS).
template <typename T>
DecoderStepOutput<T> decode_step(const RbgModel<T>& m, const EncoderBank<T>& bank, std::span<const int> prefix,
                                 const EvidenceDistribution& evidence, std::optional<T> gate_override = std::nullopt)
{
    if (prefix.empty() || prefix.front() != Vocabulary::bos) {
        throw std::invalid_argument("prefix must start with BOS");
    }
    if (evidence.doc_count() != bank.layout.sentence_counts.size()) {
        throw std::invalid_argument("evidence/bank mismatch");
    }
    Tape<T> t(false);
    Graph<T> g(t, m.params());
    Var h_enc = t.view(bank.states);
    std::vector<T> ev;
    for (double p : evidence.probs()) {
        ev.push_back(static_cast<T>(p));
    }
    Var copy = copy_distribution(t, t.constant(row_matrix<T>(ev)), bank.layout, m.config().copy_norm, m.vocab().size());
    const auto memory = project_memory(g, m.generator().decoder, h_enc);
    Var h = decode_sequence(g, m.generator().decoder, prefix, memory, m.config().heads);
    Var last = t.slice_rows(h, t.value(h).rows() - 1, 1);
    const auto head = pointer_head(g, m.generator(), last, h_enc, copy, gate_override);
    DecoderStepOutput<T> out;
    out.h_dec = row_vector<T>(t.value(last));
    if (head.attention.valid()) {
        out.attention = row_vector<T>(t.value(head.attention));
        out.context = row_vector<T>(t.value(head.context));
    }
    out.gate = t.value(head.gate)(0, 0);
    out.vocab_probs = row_vector<T>(t.value(head.vocab_probs));
    out.copy_probs = row_vector<T>(t.value(copy));
    out.mixture = row_vector<T>(t.value(head.mixture));
    return out;
}

/// Precomputed per-question state for incremental decoding.
template <typename T>
class DecodingContext {
  public:
    DecodingContext(const RbgModel<T>& m, const Example& ex, const RunOptions& opt) : m_model(m), m_opt(opt)
    {
        Tape<T> t(false);
        Graph<T> g(t, m.params());
        const auto ctx = build_context(g, m, ex, opt);
        m_states = t.value(ctx.bank.states);
        for (std::size_t l = 0; l < ctx.memory.keys.size(); ++l) {
            m_keys.push_back(t.value(ctx.memory.keys[l]));
            m_values.push_back(t.value(ctx.memory.values[l]));
        }
        if (ctx.copy.valid()) {
            m_copy = t.value(ctx.copy);
            m_has_copy = true;
        }
        stats = t.stats;
    }

    /// Feeds one token and returns the next-token mixture distribution.
    std::vector<T> step(DecoderCache<T>& cache, int token)
    {
        Tape<T> t(false);
        Graph<T> g(t, m_model.params());
        CrossMemory memory;
        for (std::size_t l = 0; l < m_keys.size(); ++l) {
            memory.keys.push_back(t.view(m_keys[l]));
            memory.values.push_back(t.view(m_values[l]));
        }
        const int ids[1] = {token};
        Var h = decode_sequence(g, m_model.generator().decoder, std::span<const int>(ids, 1), memory,
                                m_model.config().heads, &cache);
        Var copy = m_has_copy ? t.view(m_copy) : Var{};
        const auto head = pointer_head(g, m_model.generator(), h, t.view(m_states), copy, gate_of<T>(m_opt));
        stats.gate_evaluations += t.stats.gate_evaluations;
        return row_vector<T>(t.value(head.mixture));
    }

    ForwardStats stats;

  private:
    const RbgModel<T>& m_model;
    RunOptions m_opt;
    Matrix<T> m_states;
    std::vector<Matrix<T>> m_keys;
    std::vector<Matrix<T>> m_values;
    Matrix<T> m_copy;
    bool m_has_copy = false;
};

struct DecodeConfig {
    int beam_size = 4;
    int max_target = 300;
};

template <typename T>
std::vector<int> generate(const RbgModel<T>& m, const Example& ex, const DecodeConfig& dc, const RunOptions& opt = {},
                          ForwardStats* stats = nullptr)
{
    DecodingContext<T> ctx(m, ex, opt);
    auto step = [&ctx](DecoderCache<T>& cache, int token) { return ctx.step(cache, token); };
    auto best = beam_search(DecoderCache<T>{}, step, Vocabulary::bos, Vocabulary::eos, dc.beam_size, dc.max_target);
    if (stats != nullptr) {
        *stats = ctx.stats;
    }
    return best.tokens;
}

template <typename T>
std::vector<int> generate_greedy(const RbgModel<T>& m, const Example& ex, int max_target, const RunOptions& opt = {})
{
    DecodingContext<T> ctx(m, ex, opt);
    auto step = [&ctx](DecoderCache<T>& cache, int token) { return ctx.step(cache, token); };
    return greedy_search(DecoderCache<T>{}, step, Vocabulary::bos, Vocabulary::eos, max_target);
}

// ---- checkpoints ------------------------------------------------------------------

inline constexpr std::uint32_t checkpoint_version = 1;

/// Layout (little-endian): "RBGCKPT1", u32 version, u64 vocabulary hash,
/// u32-length model config JSON, vocabulary (u32 count + strings), parameter
/// tensors (u32 count; name, u32 rows, u32 cols, f64 values each).
template <typename T>
void write_model(BinaryWriter& w, const RbgModel<T>& m)
{
    w.magic("RBGCKPT1");
    w.u32(checkpoint_version);
    w.u64(m.vocab().hash());
    w.str(to_json(m.config()).dump());
    w.vocabulary(m.vocab());
    w.parameters(m.params());
}

template <typename T>
RbgModel<T> read_model(BinaryReader& r)
{
    r.expect_magic("RBGCKPT1");
    const auto version = r.u32();
    if (version != checkpoint_version) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto vocab_hash = r.u64();
    const auto config = model_config_from_json(nlohmann::json::parse(r.str()));
    auto vocab = r.vocabulary();
    if (vocab.hash() != vocab_hash) {
        throw DataError("checkpoint vocabulary hash mismatch");
    }
    RbgModel<T> m(std::move(vocab), config);
    r.parameters_into(m.params());
    return m;
}

template <typename T>
void save_checkpoint(const std::string& path, const RbgModel<T>& m)
{
    BinaryWriter w;
    write_model(w, m);
    w.save(path);
}

template <typename T>
RbgModel<T> load_checkpoint(const std::string& path)
{
    auto r = BinaryReader::open(path);
    return read_model<T>(r);
}

}  // namespace rbg
