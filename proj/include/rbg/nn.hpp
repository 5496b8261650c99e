#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace rbg {

template <typename T>
struct Parameter {
    std::string name;
    Matrix<T> value;
    bool trainable = true;
};

/// Ordered, named parameter tensors. Slots are stable once added.
template <typename T>
class ParameterSet {
  public:
    std::size_t add(std::string name, Matrix<T> init)
    {
        if (m_index.count(name) != 0) {
            throw std::invalid_argument("duplicate parameter " + name);
        }
        m_index.emplace(name, m_params.size());
        m_params.push_back({std::move(name), std::move(init), true});
        return m_params.size() - 1;
    }

    [[nodiscard]] std::size_t size() const { return m_params.size(); }
    Parameter<T>& operator[](std::size_t i) { return m_params.at(i); }
    const Parameter<T>& operator[](std::size_t i) const { return m_params.at(i); }
    [[nodiscard]] auto begin() const { return m_params.begin(); }
    [[nodiscard]] auto end() const { return m_params.end(); }
    auto begin() { return m_params.begin(); }
    auto end() { return m_params.end(); }

    [[nodiscard]] std::optional<std::size_t> find(const std::string& name) const
    {
        auto it = m_index.find(name);
        if (it == m_index.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    [[nodiscard]] std::size_t scalar_count() const
    {
        std::size_t n = 0;
        for (const auto& p : m_params) {
            n += static_cast<std::size_t>(p.value.size());
        }
        return n;
    }

    /// Zero-filled gradient buffers, one per slot.
    [[nodiscard]] std::vector<Matrix<T>> zero_grads() const
    {
        std::vector<Matrix<T>> g;
        g.reserve(m_params.size());
        for (const auto& p : m_params) {
            g.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
        }
        return g;
    }

    /// Hash of names, shapes, and raw values of the parameters whose name starts with prefix.
    [[nodiscard]] std::uint64_t hash(const std::string& prefix = "") const
    {
        std::uint64_t h = fnv1a64("");
        for (const auto& p : m_params) {
            if (p.name.rfind(prefix, 0) != 0) {
                continue;
            }
            h = fnv1a64(p.name, h);
            const auto* bytes = reinterpret_cast<const char*>(p.value.data());
            h = fnv1a64(std::string_view(bytes, static_cast<std::size_t>(p.value.size()) * sizeof(T)), h);
        }
        return h;
    }

  private:
    std::vector<Parameter<T>> m_params;
    std::unordered_map<std::string, std::size_t> m_index;
};

/// A tape bound to a parameter set; each parameter becomes one leaf per tape.
template <typename T>
class Graph {
  public:
    Graph(Tape<T>& tape, const ParameterSet<T>& params) : tape(tape), params(params), m_bound(params.size()) {}

    Var param(std::size_t slot)
    {
        Var& v = m_bound.at(slot);
        if (!v.valid()) {
            v = tape.parameter(params[slot].value, slot, params[slot].trainable);
        }
        return v;
    }

    Tape<T>& tape;
    const ParameterSet<T>& params;

  private:
    std::vector<Var> m_bound;
};

// ---- layer slots ------------------------------------------------------------

struct LinearSlots {
    std::size_t weight = 0;  // in x out
    std::size_t bias = 0;    // 1 x out
};

struct LayerNormSlots {
    std::size_t gain = 0;
    std::size_t bias = 0;
};

struct AttentionSlots {
    LinearSlots q, k, v, out;
};

struct EncoderLayerSlots {
    AttentionSlots self;
    LayerNormSlots ln_attn;
    LinearSlots ff_in, ff_out;
    LayerNormSlots ln_ff;
};

struct DecoderLayerSlots {
    AttentionSlots self;
    LayerNormSlots ln_self;
    AttentionSlots cross;
    LayerNormSlots ln_cross;
    LinearSlots ff_in, ff_out;
    LayerNormSlots ln_ff;
};

struct TransformerShape {
    int d_model = 64;
    int heads = 4;
    int ffn_dim = 256;
};

struct EncoderSlots {
    std::size_t embed = 0;  // vocab x d
    LayerNormSlots ln_embed;
    std::vector<EncoderLayerSlots> layers;
};

struct DecoderSlots {
    std::size_t embed = 0;
    LayerNormSlots ln_embed;
    std::vector<DecoderLayerSlots> layers;
};

// ---- registration -----------------------------------------------------------

template <typename T>
Matrix<T> random_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng)
{
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<T>(rng.normal() * stddev);
    }
    return m;
}

template <typename T>
LinearSlots add_linear(ParameterSet<T>& ps, const std::string& name, int in, int out, Rng& rng)
{
    LinearSlots s;
    s.weight = ps.add(name + ".weight", random_matrix<T>(in, out, 1.0 / std::sqrt(double(in)), rng));
    s.bias = ps.add(name + ".bias", Matrix<T>::Zero(1, out));
    return s;
}

template <typename T>
LayerNormSlots add_layer_norm(ParameterSet<T>& ps, const std::string& name, int d)
{
    return {ps.add(name + ".gain", Matrix<T>::Ones(1, d)), ps.add(name + ".bias", Matrix<T>::Zero(1, d))};
}

template <typename T>
AttentionSlots add_attention(ParameterSet<T>& ps, const std::string& name, int d, Rng& rng)
{
    return {add_linear(ps, name + ".q", d, d, rng), add_linear(ps, name + ".k", d, d, rng),
            add_linear(ps, name + ".v", d, d, rng), add_linear(ps, name + ".out", d, d, rng)};
}

template <typename T>
EncoderSlots add_encoder(ParameterSet<T>& ps, const std::string& name, std::size_t embed_slot, int layers,
                         const TransformerShape& shape, Rng& rng)
{
    EncoderSlots e;
    e.embed = embed_slot;
    e.ln_embed = add_layer_norm(ps, name + ".ln_embed", shape.d_model);
    for (int l = 0; l < layers; ++l) {
        const std::string p = name + ".layer" + std::to_string(l);
        EncoderLayerSlots s;
        s.self = add_attention(ps, p + ".self", shape.d_model, rng);
        s.ln_attn = add_layer_norm(ps, p + ".ln_attn", shape.d_model);
        s.ff_in = add_linear(ps, p + ".ff_in", shape.d_model, shape.ffn_dim, rng);
        s.ff_out = add_linear(ps, p + ".ff_out", shape.ffn_dim, shape.d_model, rng);
        s.ln_ff = add_layer_norm(ps, p + ".ln_ff", shape.d_model);
        e.layers.push_back(s);
    }
    return e;
}

template <typename T>
DecoderSlots add_decoder(ParameterSet<T>& ps, const std::string& name, std::size_t embed_slot, int layers,
                         const TransformerShape& shape, Rng& rng)
{
    DecoderSlots dec;
    dec.embed = embed_slot;
    dec.ln_embed = add_layer_norm(ps, name + ".ln_embed", shape.d_model);
    for (int l = 0; l < layers; ++l) {
        const std::string p = name + ".layer" + std::to_string(l);
        DecoderLayerSlots s;
        s.self = add_attention(ps, p + ".self", shape.d_model, rng);
        s.ln_self = add_layer_norm(ps, p + ".ln_self", shape.d_model);
        s.cross = add_attention(ps, p + ".cross", shape.d_model, rng);
        s.ln_cross = add_layer_norm(ps, p + ".ln_cross", shape.d_model);
        s.ff_in = add_linear(ps, p + ".ff_in", shape.d_model, shape.ffn_dim, rng);
        s.ff_out = add_linear(ps, p + ".ff_out", shape.ffn_dim, shape.d_model, rng);
        s.ln_ff = add_layer_norm(ps, p + ".ln_ff", shape.d_model);
        dec.layers.push_back(s);
    }
    return dec;
}

// ---- forward ----------------------------------------------------------------

template <typename T>
Matrix<T> sinusoidal_positions(std::size_t offset, std::size_t count, int d)
{
    Matrix<T> pe(static_cast<Eigen::Index>(count), d);
    for (std::size_t i = 0; i < count; ++i) {
        const double pos = static_cast<double>(offset + i);
        for (int j = 0; j < d; j += 2) {
            const double freq = std::pow(10000.0, -double(j) / d);
            pe(static_cast<Eigen::Index>(i), j) = static_cast<T>(std::sin(pos * freq));
            if (j + 1 < d) {
                pe(static_cast<Eigen::Index>(i), j + 1) = static_cast<T>(std::cos(pos * freq));
            }
        }
    }
    return pe;
}

template <typename T>
Var linear(Graph<T>& g, const LinearSlots& s, Var x)
{
    return g.tape.add_row(g.tape.matmul(x, g.param(s.weight)), g.param(s.bias));
}

template <typename T>
Var layer_norm(Graph<T>& g, const LayerNormSlots& s, Var x)
{
    return g.tape.layer_norm(x, g.param(s.gain), g.param(s.bias));
}

/// Multi-head scaled dot-product attention over already projected keys and values.
/// Returns the output projection of the concatenated heads.
template <typename T>
Var attend(Graph<T>& g, const AttentionSlots& s, Var queries, Var keys, Var values, const AttentionMask& mask,
           int heads, std::uint64_t* entry_counter = nullptr)
{
    auto& t = g.tape;
    const auto d = t.value(queries).cols();
    const auto dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = t.slice_cols(queries, h * dh, dh);
        Var kh = t.slice_cols(keys, h * dh, dh);
        Var vh = t.slice_cols(values, h * dh, dh);
        Var scores = t.scale(t.matmul_nt(qh, kh), scale);
        if (entry_counter != nullptr) {
            *entry_counter += static_cast<std::uint64_t>(t.value(scores).size());
        }
        outs.push_back(t.matmul(t.softmax_rows(scores, mask), vh));
    }
    Var merged = heads == 1 ? outs[0] : t.concat_cols(outs);
    return linear(g, s.out, merged);
}

template <typename T>
Var feed_forward(Graph<T>& g, const LinearSlots& in, const LinearSlots& out, Var x)
{
    return linear(g, out, g.tape.gelu(linear(g, in, x)));
}

template <typename T>
Var embed(Graph<T>& g, std::size_t table, const LayerNormSlots& ln, std::span<const int> ids, std::size_t offset)
{
    auto& t = g.tape;
    const auto d = static_cast<int>(g.params[table].value.cols());
    Var tok = t.gather_rows(g.param(table), ids);
    Var pos = t.constant(sinusoidal_positions<T>(offset, ids.size(), d));
    return layer_norm(g, ln, t.add(tok, pos));
}

/// Post-LN transformer encoder over one sequence; returns (len x d).
template <typename T>
Var encode_sequence(Graph<T>& g, const EncoderSlots& enc, std::span<const int> ids, int heads)
{
    if (ids.empty()) {
        throw std::invalid_argument("empty encoder input");
    }
    auto& t = g.tape;
    Var h = embed(g, enc.embed, enc.ln_embed, ids, 0);
    for (const auto& layer : enc.layers) {
        Var q = linear(g, layer.self.q, h);
        Var k = linear(g, layer.self.k, h);
        Var v = linear(g, layer.self.v, h);
        Var a = attend(g, layer.self, q, k, v, AttentionMask::full(), heads, &t.stats.encoder_attention_entries);
        h = layer_norm(g, layer.ln_attn, t.add(h, a));
        h = layer_norm(g, layer.ln_ff, t.add(h, feed_forward(g, layer.ff_in, layer.ff_out, h)));
    }
    return h;
}

/// Projected encoder memory for each decoder layer's cross-attention.
struct CrossMemory {
    std::vector<Var> keys;
    std::vector<Var> values;
};

template <typename T>
CrossMemory project_memory(Graph<T>& g, const DecoderSlots& dec, Var memory)
{
    CrossMemory m;
    for (const auto& layer : dec.layers) {
        m.keys.push_back(linear(g, layer.cross.k, memory));
        m.values.push_back(linear(g, layer.cross.v, memory));
    }
    return m;
}

/// Self-attention keys/values of already decoded positions, per layer.
template <typename T>
struct DecoderCache {
    std::vector<Matrix<T>> keys;
    std::vector<Matrix<T>> values;
    std::size_t length = 0;
};

/// Decoder stack over `ids`, which sit at positions [cache.length, cache.length + n).
/// Without a cache all positions are processed at once with a causal mask.
template <typename T>
Var decode_sequence(Graph<T>& g, const DecoderSlots& dec, std::span<const int> ids, const CrossMemory& memory,
                    int heads, DecoderCache<T>* cache = nullptr)
{
    auto& t = g.tape;
    const std::size_t past = cache != nullptr ? cache->length : 0;
    if (cache != nullptr && cache->keys.empty()) {
        cache->keys.resize(dec.layers.size());
        cache->values.resize(dec.layers.size());
    }
    Var h = embed(g, dec.embed, dec.ln_embed, ids, past);
    for (std::size_t l = 0; l < dec.layers.size(); ++l) {
        const auto& layer = dec.layers[l];
        Var q = linear(g, layer.self.q, h);
        Var k = linear(g, layer.self.k, h);
        Var v = linear(g, layer.self.v, h);
        if (past > 0) {
            std::vector<Var> ks{t.constant(cache->keys[l]), k};
            std::vector<Var> vs{t.constant(cache->values[l]), v};
            k = t.concat_rows(ks);
            v = t.concat_rows(vs);
        }
        if (cache != nullptr) {
            cache->keys[l] = t.value(k);
            cache->values[l] = t.value(v);
        }
        Var a = attend(g, layer.self, q, k, v, AttentionMask::causal(past), heads);
        Var hb = layer_norm(g, layer.ln_self, t.add(h, a));
        Var cq = linear(g, layer.cross.q, hb);
        Var c = attend(g, layer.cross, cq, memory.keys[l], memory.values[l], AttentionMask::full(), heads);
        Var hd = layer_norm(g, layer.ln_cross, t.add(hb, c));
        h = layer_norm(g, layer.ln_ff, t.add(hd, feed_forward(g, layer.ff_in, layer.ff_out, hd)));
    }
    if (cache != nullptr) {
        cache->length = past + ids.size();
    }
    return h;
}

}  // namespace rbg
