#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "input.hpp"
#include "nn.hpp"
#include "reader.hpp"

namespace rbg {

/// How sentence evidence becomes a distribution over word types.
enum class CopyNorm {
    spread,      // each sentence's mass split evenly over its token positions
    raw_renorm,  // sentence mass added once per token occurrence, then renormalized
};

inline std::string to_string(CopyNorm c) { return c == CopyNorm::spread ? "spread" : "raw-renorm"; }

inline CopyNorm parse_copy_norm(const std::string& s)
{
    if (s == "spread") {
        return CopyNorm::spread;
    }
    if (s == "raw-renorm") {
        return CopyNorm::raw_renorm;
    }
    throw std::invalid_argument("unknown copy_norm: " + s);
}

struct GeneratorSlots {
    std::size_t embed = 0;
    EncoderSlots encoder;
    DecoderSlots decoder;
    LinearSlots lm_head;
    std::size_t gate_context = 0;  // d x 1
    std::size_t gate_decoder = 0;  // d x 1
};

template <typename T>
GeneratorSlots add_generator(ParameterSet<T>& ps, int vocab_size, int encoder_layers, int decoder_layers,
                             const TransformerShape& shape, Rng& rng)
{
    GeneratorSlots g;
    g.embed = ps.add("gen.embed", random_matrix<T>(vocab_size, shape.d_model, 1.0, rng));
    g.encoder = add_encoder(ps, "gen.encoder", g.embed, encoder_layers, shape, rng);
    g.decoder = add_decoder(ps, "gen.decoder", g.embed, decoder_layers, shape, rng);
    g.lm_head = add_linear(ps, "gen.lm_head", shape.d_model, vocab_size, rng);
    const double s = 1.0 / std::sqrt(double(shape.d_model));
    g.gate_context = ps.add("gen.gate.context", random_matrix<T>(shape.d_model, 1, s, rng));
    g.gate_decoder = ps.add("gen.gate.decoder", random_matrix<T>(shape.d_model, 1, s, rng));
    return g;
}

/// Where each row of the concatenated encoder output came from.
struct AlignedPosition {
    std::uint32_t doc = 0;
    int token = 0;
    int sentence = -1;  // clipped sentence index within the doc; -1 outside the body
};

struct BankLayout {
    std::vector<std::size_t> lengths;
    std::vector<std::size_t> sentence_counts;
    std::vector<AlignedPosition> alignment;

    [[nodiscard]] std::size_t total_length() const { return alignment.size(); }
};

inline BankLayout make_layout(std::span<const PairInput> inputs, std::span<const std::vector<TokenSpan>> clipped)
{
    if (inputs.size() != clipped.size()) {
        throw std::invalid_argument("inputs and sentence spans disagree");
    }
    BankLayout layout;
    for (std::size_t d = 0; d < inputs.size(); ++d) {
        const auto& in = inputs[d];
        layout.lengths.push_back(in.ids.size());
        layout.sentence_counts.push_back(clipped[d].size());
        std::size_t sent = 0;
        for (std::size_t p = 0; p < in.ids.size(); ++p) {
            int s = -1;
            if (p >= in.body_begin && p < in.body_begin + in.body_count) {
                const auto local = p - in.body_begin;
                while (clipped[d][sent].end <= local) {
                    ++sent;
                }
                s = static_cast<int>(sent);
            }
            layout.alignment.push_back({static_cast<std::uint32_t>(d), in.ids[p], s});
        }
    }
    return layout;
}

/// Per-document encoder passes; no attention crosses document boundaries.
struct BankVars {
    std::vector<Var> blocks;
    Var states;  // concatenation of blocks, (sum of lengths) x d
};

template <typename T>
BankVars encode_all(Graph<T>& g, const GeneratorSlots& gen, std::span<const PairInput> inputs, int heads)
{
    if (inputs.empty()) {
        throw std::invalid_argument("encode_all: no documents");
    }
    BankVars bank;
    for (const auto& in : inputs) {
        bank.blocks.push_back(encode_sequence(g, gen.encoder, in.ids, heads));
    }
    bank.states = bank.blocks.size() == 1 ? bank.blocks[0] : g.tape.concat_rows(bank.blocks);
    return bank;
}

/// Sparse map from global sentence index to vocabulary id for the copy distribution.
template <typename T>
std::vector<SparseEntry<T>> copy_entries(const BankLayout& layout, CopyNorm norm)
{
    std::vector<std::size_t> offsets(layout.sentence_counts.size(), 0);
    for (std::size_t d = 1; d < offsets.size(); ++d) {
        offsets[d] = offsets[d - 1] + layout.sentence_counts[d - 1];
    }
    std::vector<std::size_t> sizes(offsets.empty() ? 0 : offsets.back() + layout.sentence_counts.back(), 0);
    for (const auto& a : layout.alignment) {
        if (a.sentence >= 0) {
            ++sizes[offsets[a.doc] + static_cast<std::size_t>(a.sentence)];
        }
    }
    std::vector<SparseEntry<T>> entries;
    for (const auto& a : layout.alignment) {
        if (a.sentence < 0) {
            continue;
        }
        const auto s = offsets[a.doc] + static_cast<std::size_t>(a.sentence);
        const T w = norm == CopyNorm::spread ? T(1) / static_cast<T>(sizes[s]) : T(1);
        entries.push_back({static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(a.token), w});
    }
    return entries;
}

inline std::size_t total_sentences(const BankLayout& layout)
{
    std::size_t n = 0;
    for (auto c : layout.sentence_counts) {
        n += c;
    }
    return n;
}

/// Copy distribution over the vocabulary (1 x V) from sentence evidence (1 x S).
template <typename T>
Var copy_distribution(Tape<T>& t, Var evidence, const BankLayout& layout, CopyNorm norm, std::size_t vocab_size)
{
    if (static_cast<std::size_t>(t.value(evidence).cols()) != total_sentences(layout)) {
        throw std::invalid_argument("evidence/bank mismatch");
    }
    Var out = t.sparse_map(evidence, copy_entries<T>(layout, norm), static_cast<Eigen::Index>(vocab_size));
    return norm == CopyNorm::raw_renorm ? t.normalize_sum(out) : out;
}

/// Outputs of the pointer-generator head for every decoder row.
struct HeadVars {
    Var attention;    // rows x source, invalid when the gate is overridden
    Var context;      // rows x d, invalid when the gate is overridden
    Var gate;         // rows x 1
    Var vocab_probs;  // rows x V
    Var mixture;      // rows x V
};

/// Gate attention over the concatenated encoder states, gate, vocabulary
/// softmax and the gated mixture with the copy distribution.
template <typename T>
HeadVars pointer_head(Graph<T>& g, const GeneratorSlots& gen, Var h_dec, Var h_enc, Var copy,
                      std::optional<T> gate_override)
{
    auto& t = g.tape;
    HeadVars out;
    const auto rows = t.value(h_dec).rows();
    if (gate_override) {
        out.gate = t.constant(Matrix<T>::Constant(rows, 1, *gate_override));
    } else {
        out.attention = t.softmax_rows(t.matmul_nt(h_dec, h_enc));
        out.context = t.matmul(out.attention, h_enc);
        Var logit = t.add(t.matmul(out.context, g.param(gen.gate_context)), t.matmul(h_dec, g.param(gen.gate_decoder)));
        out.gate = t.sigmoid(logit);
        t.stats.gate_evaluations += static_cast<std::uint64_t>(rows);
    }
    out.vocab_probs = t.softmax_rows(linear(g, gen.lm_head, h_dec));
    if (gate_override && *gate_override == T(1) && !copy.valid()) {
        out.mixture = out.vocab_probs;
    } else {
        if (!copy.valid()) {
            throw std::invalid_argument("copy distribution required unless the gate is fixed at 1");
        }
        out.mixture = t.mix(out.gate, out.vocab_probs, copy);
    }
    return out;
}

// ---- decoding -------------------------------------------------------------------

struct Hypothesis {
    std::vector<int> tokens;  // excludes BOS and EOS
    double score = 0;
    bool finished = false;
};

/// Greedy argmax decoding. `step(state, token)` feeds one token and returns
/// the next-token distribution.
template <typename State, typename StepFn>
std::vector<int> greedy_search(State state, StepFn&& step, int bos, int eos, int max_target)
{
    std::vector<int> out;
    int last = bos;
    for (int t = 0; t < max_target; ++t) {
        const auto probs = step(state, last);
        const auto best = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        if (best == eos) {
            break;
        }
        out.push_back(best);
        last = best;
    }
    return out;
}

/// Length-bounded beam search on summed log-probabilities, no length penalty.
/// Candidates rank by (score desc, parent beam asc, token asc), so beam 1 is
/// exactly greedy decoding.
template <typename State, typename StepFn>
Hypothesis beam_search(State state, StepFn&& step, int bos, int eos, int beam_size, int max_target)
{
    if (beam_size < 1 || max_target < 1) {
        throw std::invalid_argument("beam_size and max_target must be >= 1");
    }
    struct Alive {
        Hypothesis hyp;
        State state;
        int last;
    };
    struct Candidate {
        double score;
        std::size_t parent;
        int token;
    };
    std::vector<Alive> alive{{Hypothesis{}, std::move(state), bos}};
    std::vector<Hypothesis> finished;
    const auto beam = static_cast<std::size_t>(beam_size);

    for (int t = 0; t < max_target && !alive.empty(); ++t) {
        std::vector<Candidate> cands;
        for (std::size_t b = 0; b < alive.size(); ++b) {
            const auto probs = step(alive[b].state, alive[b].last);
            for (std::size_t w = 0; w < probs.size(); ++w) {
                cands.push_back({alive[b].hyp.score + std::log(static_cast<double>(probs[w])), b,
                                 static_cast<int>(w)});
            }
        }
        const auto keep = std::min(cands.size(), 2 * beam);
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [](const Candidate& a, const Candidate& b) {
                              if (a.score != b.score) {
                                  return a.score > b.score;
                              }
                              return a.parent != b.parent ? a.parent < b.parent : a.token < b.token;
                          });
        std::vector<Alive> next;
        for (std::size_t i = 0; i < keep && next.size() < beam; ++i) {
            const auto& c = cands[i];
            Hypothesis h = alive[c.parent].hyp;
            h.score = c.score;
            if (c.token == eos) {
                if (i < beam) {
                    h.finished = true;
                    finished.push_back(std::move(h));
                }
                continue;
            }
            h.tokens.push_back(c.token);
            next.push_back({std::move(h), alive[c.parent].state, c.token});
        }
        alive = std::move(next);
        if (!finished.empty()) {
            double best_done = -std::numeric_limits<double>::infinity();
            for (const auto& f : finished) {
                best_done = std::max(best_done, f.score);
            }
            double best_alive = -std::numeric_limits<double>::infinity();
            for (const auto& a : alive) {
                best_alive = std::max(best_alive, a.hyp.score);
            }
            // Scores only fall as hypotheses grow, so nothing alive can win.
            if (best_done >= best_alive) {
                break;
            }
        }
    }
    std::vector<Hypothesis> pool = finished;
    for (auto& a : alive) {
        pool.push_back(a.hyp);
    }
    // Earliest-finished wins ties: finished hypotheses come first in the pool.
    const auto best = std::max_element(pool.begin(), pool.end(), [](const Hypothesis& a, const Hypothesis& b) {
        return a.score < b.score;
    });
    return *best;
}

}  // namespace rbg
