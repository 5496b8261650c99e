#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace rbg {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Handle to a node recorded on a Tape.
struct Var {
    static constexpr std::uint32_t npos = std::numeric_limits<std::uint32_t>::max();
    std::uint32_t id = npos;

    [[nodiscard]] bool valid() const { return id != npos; }
};

/// Which key columns a query row may attend to.
struct AttentionMask {
    enum class Kind { none, causal, columns };
    Kind kind = Kind::none;
    /// causal: query row i sees key j iff j <= i + offset.
    std::size_t offset = 0;
    /// columns: allowed[j] != 0 for every row.
    std::vector<std::uint8_t> allowed;

    static AttentionMask full() { return {}; }
    static AttentionMask causal(std::size_t offset)
    {
        AttentionMask m;
        m.kind = Kind::causal;
        m.offset = offset;
        return m;
    }
    static AttentionMask columns(std::vector<std::uint8_t> allowed)
    {
        AttentionMask m;
        m.kind = Kind::columns;
        m.allowed = std::move(allowed);
        return m;
    }

    [[nodiscard]] bool permits(std::size_t row, std::size_t col) const
    {
        switch (kind) {
        case Kind::none: return true;
        case Kind::causal: return col <= row + offset;
        case Kind::columns: return allowed[col] != 0;
        }
        return true;
    }
};

/// Counters filled in while a forward pass runs.
struct ForwardStats {
    std::uint64_t encoder_attention_entries = 0;
    std::uint64_t gate_evaluations = 0;
    std::uint64_t reader_calls = 0;
};

/// One (row, column, weight) entry of a sparse linear map.
template <typename T>
struct SparseEntry {
    std::uint32_t row;
    std::uint32_t col;
    T weight;
};

/// Reverse-mode autodiff tape over dense row-major matrices.
///
/// Every op evaluates eagerly. When recording, ops whose inputs need a
/// gradient also store a backward closure; `backward` replays them in
/// reverse order. Parameter leaves remember their slot so gradients can be
/// reduced into an external buffer with `accumulate`.
template <typename T>
class Tape {
  public:
    using Mat = Matrix<T>;

    explicit Tape(bool record = true) : m_record(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    ForwardStats stats;

    [[nodiscard]] bool recording() const { return m_record; }
    [[nodiscard]] std::size_t size() const { return m_nodes.size(); }

    Var constant(Mat value)
    {
        Node n;
        n.value = std::move(value);
        return push(std::move(n));
    }

    /// Constant leaf that refers to an external matrix instead of copying it.
    /// The matrix must outlive the tape.
    Var view(const Mat& value)
    {
        Node n;
        n.ref = &value;
        return push(std::move(n));
    }

    /// Leaf bound to an externally owned parameter. The matrix must outlive the tape.
    Var parameter(const Mat& value, std::size_t slot, bool trainable = true)
    {
        Node n;
        n.ref = &value;
        n.slot = static_cast<std::int64_t>(slot);
        n.needs_grad = m_record && trainable;
        return push(std::move(n));
    }

    [[nodiscard]] const Mat& value(Var v) const
    {
        const Node& n = m_nodes.at(v.id);
        return n.ref != nullptr ? *n.ref : n.value;
    }

    [[nodiscard]] bool needs_grad(Var v) const { return m_nodes.at(v.id).needs_grad; }

    /// Gradient of the last backward root w.r.t. v (empty if none reached it).
    [[nodiscard]] const Mat& grad(Var v) const { return m_nodes.at(v.id).grad; }

    void backward(Var root, T seed = T(1))
    {
        const Mat& rv = value(root);
        backward(root, Mat::Constant(rv.rows(), rv.cols(), seed));
    }

    /// Backpropagates an explicit output gradient.
    void backward(Var root, Mat seed)
    {
        Node& r = m_nodes.at(root.id);
        if (!r.needs_grad) {
            return;
        }
        const Mat& rv = value(root);
        if (seed.rows() != rv.rows() || seed.cols() != rv.cols()) {
            throw std::invalid_argument("backward: seed shape mismatch");
        }
        r.grad = std::move(seed);
        for (std::size_t i = root.id + 1; i-- > 0;) {
            Node& n = m_nodes[i];
            if (n.back && n.grad.size() != 0) {
                n.back(n.grad);
            }
        }
    }

    /// Adds every parameter leaf's gradient into grads[slot].
    void accumulate(std::vector<Mat>& grads) const
    {
        for (const Node& n : m_nodes) {
            if (n.slot >= 0 && n.grad.size() != 0) {
                auto& g = grads.at(static_cast<std::size_t>(n.slot));
                if (g.size() == 0) {
                    g = Mat::Zero(n.grad.rows(), n.grad.cols());
                }
                g += n.grad;
            }
        }
    }

    // ---- ops ---------------------------------------------------------------

    Var matmul(Var a, Var b)
    {
        const Mat& av = value(a);
        const Mat& bv = value(b);
        check(av.cols() == bv.rows(), "matmul: inner dimension mismatch");
        Mat out;
        out.noalias() = av * bv;
        return record(std::move(out), {a, b}, [this, a, b](const Mat& g) {
            if (needs_grad(a)) {
                grad_ref(a).noalias() += g * value(b).transpose();
            }
            if (needs_grad(b)) {
                grad_ref(b).noalias() += value(a).transpose() * g;
            }
        });
    }

    /// a * b^T
    Var matmul_nt(Var a, Var b)
    {
        const Mat& av = value(a);
        const Mat& bv = value(b);
        check(av.cols() == bv.cols(), "matmul_nt: inner dimension mismatch");
        Mat out;
        out.noalias() = av * bv.transpose();
        return record(std::move(out), {a, b}, [this, a, b](const Mat& g) {
            if (needs_grad(a)) {
                grad_ref(a).noalias() += g * value(b);
            }
            if (needs_grad(b)) {
                grad_ref(b).noalias() += g.transpose() * value(a);
            }
        });
    }

    Var add(Var a, Var b)
    {
        const Mat& av = value(a);
        const Mat& bv = value(b);
        check(av.rows() == bv.rows() && av.cols() == bv.cols(), "add: shape mismatch");
        Mat out = av + bv;
        return record(std::move(out), {a, b}, [this, a, b](const Mat& g) {
            if (needs_grad(a)) {
                grad_ref(a) += g;
            }
            if (needs_grad(b)) {
                grad_ref(b) += g;
            }
        });
    }

    /// Adds the 1 x n row `r` to every row of `a`.
    Var add_row(Var a, Var r)
    {
        const Mat& av = value(a);
        const Mat& rv = value(r);
        check(rv.rows() == 1 && rv.cols() == av.cols(), "add_row: shape mismatch");
        Mat out = av.rowwise() + rv.row(0);
        return record(std::move(out), {a, r}, [this, a, r](const Mat& g) {
            if (needs_grad(a)) {
                grad_ref(a) += g;
            }
            if (needs_grad(r)) {
                grad_ref(r) += g.colwise().sum();
            }
        });
    }

    Var scale(Var a, T s)
    {
        Mat out = value(a) * s;
        return record(std::move(out), {a}, [this, a, s](const Mat& g) { grad_ref(a) += g * s; });
    }

    Var transpose(Var a)
    {
        Mat out = value(a).transpose();
        return record(std::move(out), {a}, [this, a](const Mat& g) { grad_ref(a) += g.transpose(); });
    }

    /// GELU, tanh approximation.
    Var gelu(Var a)
    {
        const Mat& x = value(a);
        const T c = std::sqrt(T(2) / T(3.14159265358979323846));
        const T k = T(0.044715);
        Mat out(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const T v = x.data()[i];
            out.data()[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
        }
        return record(std::move(out), {a}, [this, a, c, k](const Mat& g) {
            const Mat& xv = value(a);
            Mat& ga = grad_ref(a);
            for (Eigen::Index i = 0; i < xv.size(); ++i) {
                const T v = xv.data()[i];
                const T t = std::tanh(c * (v + k * v * v * v));
                const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
                ga.data()[i] += g.data()[i] * d;
            }
        });
    }

    Var sigmoid(Var a)
    {
        Mat out = value(a).unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
        return record(std::move(out), {a}, [this, a, id = next_id()](const Mat& g) {
            const Mat& y = value(Var{id});
            grad_ref(a) += (g.array() * y.array() * (T(1) - y.array())).matrix();
        });
    }

    /// Row-wise layer normalization with affine 1 x n gain and bias.
    Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5))
    {
        const Mat& xv = value(x);
        const Mat& gv = value(gain);
        const Mat& bv = value(bias);
        const auto n = xv.cols();
        check(gv.cols() == n && bv.cols() == n, "layer_norm: parameter shape mismatch");
        Mat xhat(xv.rows(), n);
        std::vector<T> inv_std(static_cast<std::size_t>(xv.rows()));
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            const T mean = xv.row(r).mean();
            const T var = (xv.row(r).array() - mean).square().mean();
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(r)] = is;
            xhat.row(r) = (xv.row(r).array() - mean) * is;
        }
        Mat out = (xhat.array().rowwise() * gv.row(0).array()).matrix();
        out.rowwise() += bv.row(0);
        return record(std::move(out), {x, gain, bias},
                      [this, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Mat& g) {
                          if (needs_grad(gain)) {
                              grad_ref(gain) += (g.array() * xhat.array()).matrix().colwise().sum();
                          }
                          if (needs_grad(bias)) {
                              grad_ref(bias) += g.colwise().sum();
                          }
                          if (needs_grad(x)) {
                              const auto& gv2 = value(gain);
                              Mat& gx = grad_ref(x);
                              const T n_inv = T(1) / static_cast<T>(xhat.cols());
                              for (Eigen::Index r = 0; r < g.rows(); ++r) {
                                  auto dxhat = (g.row(r).array() * gv2.row(0).array()).eval();
                                  const T m1 = dxhat.sum() * n_inv;
                                  const T m2 = (dxhat * xhat.row(r).array()).sum() * n_inv;
                                  gx.row(r).array() += inv_std[static_cast<std::size_t>(r)] *
                                                       (dxhat - m1 - xhat.row(r).array() * m2);
                              }
                          }
                      });
    }

    /// Softmax along each row; masked entries get exactly zero probability.
    Var softmax_rows(Var a, const AttentionMask& mask = {})
    {
        const Mat& x = value(a);
        Mat out = Mat::Zero(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            T mx = -std::numeric_limits<T>::infinity();
            bool any = false;
            for (Eigen::Index c = 0; c < x.cols(); ++c) {
                if (mask.permits(static_cast<std::size_t>(r), static_cast<std::size_t>(c))) {
                    mx = std::max(mx, x(r, c));
                    any = true;
                }
            }
            check(any, "softmax_rows: every position masked");
            T total = 0;
            for (Eigen::Index c = 0; c < x.cols(); ++c) {
                if (mask.permits(static_cast<std::size_t>(r), static_cast<std::size_t>(c))) {
                    const T e = std::exp(x(r, c) - mx);
                    out(r, c) = e;
                    total += e;
                }
            }
            out.row(r) /= total;
        }
        return record(std::move(out), {a}, [this, a, id = next_id()](const Mat& g) {
            const Mat& p = value(Var{id});
            Mat& ga = grad_ref(a);
            for (Eigen::Index r = 0; r < p.rows(); ++r) {
                const T dot = (g.row(r).array() * p.row(r).array()).sum();
                ga.row(r).array() += p.row(r).array() * (g.row(r).array() - dot);
            }
        });
    }

    /// Rows of `table` selected by ids (embedding lookup).
    Var gather_rows(Var table, std::span<const int> ids)
    {
        const Mat& t = value(table);
        Mat out(static_cast<Eigen::Index>(ids.size()), t.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            check(ids[i] >= 0 && ids[i] < t.rows(), "gather_rows: id out of range");
            out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
        }
        return record(std::move(out), {table},
                      [this, table, idv = std::vector<int>(ids.begin(), ids.end())](const Mat& g) {
                          Mat& gt = grad_ref(table);
                          for (std::size_t i = 0; i < idv.size(); ++i) {
                              gt.row(idv[i]) += g.row(static_cast<Eigen::Index>(i));
                          }
                      });
    }

    Var concat_rows(std::span<const Var> parts)
    {
        check(!parts.empty(), "concat_rows: no inputs");
        const auto cols = value(parts[0]).cols();
        Eigen::Index rows = 0;
        for (Var p : parts) {
            check(value(p).cols() == cols, "concat_rows: column mismatch");
            rows += value(p).rows();
        }
        Mat out(rows, cols);
        Eigen::Index at = 0;
        for (Var p : parts) {
            const Mat& pv = value(p);
            out.middleRows(at, pv.rows()) = pv;
            at += pv.rows();
        }
        std::vector<Var> pv(parts.begin(), parts.end());
        return record_many(std::move(out), pv, [this, pv](const Mat& g) {
            Eigen::Index off = 0;
            for (Var p : pv) {
                const auto r = value(p).rows();
                if (needs_grad(p)) {
                    grad_ref(p) += g.middleRows(off, r);
                }
                off += r;
            }
        });
    }

    Var concat_cols(std::span<const Var> parts)
    {
        check(!parts.empty(), "concat_cols: no inputs");
        const auto rows = value(parts[0]).rows();
        Eigen::Index cols = 0;
        for (Var p : parts) {
            check(value(p).rows() == rows, "concat_cols: row mismatch");
            cols += value(p).cols();
        }
        Mat out(rows, cols);
        Eigen::Index at = 0;
        for (Var p : parts) {
            const Mat& pv = value(p);
            out.middleCols(at, pv.cols()) = pv;
            at += pv.cols();
        }
        std::vector<Var> pv(parts.begin(), parts.end());
        return record_many(std::move(out), pv, [this, pv](const Mat& g) {
            Eigen::Index off = 0;
            for (Var p : pv) {
                const auto c = value(p).cols();
                if (needs_grad(p)) {
                    grad_ref(p) += g.middleCols(off, c);
                }
                off += c;
            }
        });
    }

    Var slice_rows(Var a, Eigen::Index start, Eigen::Index count)
    {
        const Mat& av = value(a);
        check(start >= 0 && count >= 0 && start + count <= av.rows(), "slice_rows: out of range");
        Mat out = av.middleRows(start, count);
        return record(std::move(out), {a},
                      [this, a, start, count](const Mat& g) { grad_ref(a).middleRows(start, count) += g; });
    }

    Var slice_cols(Var a, Eigen::Index start, Eigen::Index count)
    {
        const Mat& av = value(a);
        check(start >= 0 && count >= 0 && start + count <= av.cols(), "slice_cols: out of range");
        Mat out = av.middleCols(start, count);
        return record(std::move(out), {a},
                      [this, a, start, count](const Mat& g) { grad_ref(a).middleCols(start, count) += g; });
    }

    /// gate (T x 1), a (T x V), b (1 x V): gate * a + (1 - gate) * b, row by row.
    Var mix(Var gate, Var a, Var b)
    {
        const Mat& gv = value(gate);
        const Mat& av = value(a);
        const Mat& bv = value(b);
        check(gv.cols() == 1 && gv.rows() == av.rows(), "mix: gate shape mismatch");
        check(bv.rows() == 1 && bv.cols() == av.cols(), "mix: copy row shape mismatch");
        Mat out(av.rows(), av.cols());
        for (Eigen::Index r = 0; r < av.rows(); ++r) {
            const T p = gv(r, 0);
            out.row(r) = p * av.row(r) + (T(1) - p) * bv.row(0);
        }
        return record(std::move(out), {gate, a, b}, [this, gate, a, b](const Mat& g) {
            const Mat& gv2 = value(gate);
            const Mat& av2 = value(a);
            const Mat& bv2 = value(b);
            if (needs_grad(gate)) {
                Mat& gg = grad_ref(gate);
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    gg(r, 0) += (g.row(r).array() * (av2.row(r).array() - bv2.row(0).array())).sum();
                }
            }
            if (needs_grad(a)) {
                grad_ref(a) += (g.array().colwise() * gv2.col(0).array()).matrix();
            }
            if (needs_grad(b)) {
                Mat& gb = grad_ref(b);
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    gb.row(0) += (T(1) - gv2(r, 0)) * g.row(r);
                }
            }
        });
    }

    /// Mean over rows of -log p[r, target[r]]; returns a 1 x 1 node.
    Var nll_mean(Var probs, std::span<const int> targets)
    {
        const Mat& p = value(probs);
        check(static_cast<Eigen::Index>(targets.size()) == p.rows(), "nll_mean: target count mismatch");
        check(!targets.empty(), "nll_mean: empty target");
        T total = 0;
        for (std::size_t r = 0; r < targets.size(); ++r) {
            check(targets[r] >= 0 && targets[r] < p.cols(), "nll_mean: target out of range");
            total -= std::log(p(static_cast<Eigen::Index>(r), targets[r]));
        }
        Mat out(1, 1);
        out(0, 0) = total / static_cast<T>(targets.size());
        return record(std::move(out), {probs},
                      [this, probs, tv = std::vector<int>(targets.begin(), targets.end())](const Mat& g) {
                          const Mat& pv = value(probs);
                          Mat& gp = grad_ref(probs);
                          const T w = g(0, 0) / static_cast<T>(tv.size());
                          for (std::size_t r = 0; r < tv.size(); ++r) {
                              const auto row = static_cast<Eigen::Index>(r);
                              gp(row, tv[r]) -= w / pv(row, tv[r]);
                          }
                      });
    }

    /// Divides a non-negative matrix by the sum of all its entries.
    Var normalize_sum(Var a)
    {
        const Mat& av = value(a);
        const T total = av.sum();
        check(total > T(0) && std::isfinite(total), "normalize_sum: non-positive total");
        Mat out = av / total;
        return record(std::move(out), {a}, [this, a, total, id = next_id()](const Mat& g) {
            const Mat& y = value(Var{id});
            const T dot = (g.array() * y.array()).sum();
            grad_ref(a).array() += (g.array() - dot) / total;
        });
    }

    /// out (1 x cols) = x (1 x rows) through a sparse rows x cols map.
    Var sparse_map(Var x, std::vector<SparseEntry<T>> entries, Eigen::Index cols)
    {
        const Mat& xv = value(x);
        check(xv.rows() == 1, "sparse_map: expects a row vector");
        Mat out = Mat::Zero(1, cols);
        for (const auto& e : entries) {
            check(e.row < xv.cols() && e.col < cols, "sparse_map: entry out of range");
            out(0, e.col) += xv(0, e.row) * e.weight;
        }
        return record(std::move(out), {x}, [this, x, entries = std::move(entries)](const Mat& g) {
            Mat& gx = grad_ref(x);
            for (const auto& e : entries) {
                gx(0, e.row) += g(0, e.col) * e.weight;
            }
        });
    }

  private:
    struct Node {
        Mat value;
        const Mat* ref = nullptr;
        Mat grad;
        std::function<void(const Mat&)> back;
        std::int64_t slot = -1;
        bool needs_grad = false;
    };

    static void check(bool ok, const char* what)
    {
        if (!ok) {
            throw std::invalid_argument(what);
        }
    }

    [[nodiscard]] std::uint32_t next_id() const { return static_cast<std::uint32_t>(m_nodes.size()); }

    Var push(Node n)
    {
        m_nodes.push_back(std::move(n));
        return Var{static_cast<std::uint32_t>(m_nodes.size() - 1)};
    }

    Mat& grad_ref(Var v)
    {
        Node& n = m_nodes[v.id];
        if (n.grad.size() == 0) {
            const Mat& val = n.ref != nullptr ? *n.ref : n.value;
            n.grad = Mat::Zero(val.rows(), val.cols());
        }
        return n.grad;
    }

    template <typename Fn>
    Var record(Mat out, std::initializer_list<Var> inputs, Fn&& fn)
    {
        bool any = false;
        for (Var v : inputs) {
            any = any || m_nodes[v.id].needs_grad;
        }
        return finish(std::move(out), any, std::forward<Fn>(fn));
    }

    template <typename Fn>
    Var record_many(Mat out, const std::vector<Var>& inputs, Fn&& fn)
    {
        bool any = false;
        for (Var v : inputs) {
            any = any || m_nodes[v.id].needs_grad;
        }
        return finish(std::move(out), any, std::forward<Fn>(fn));
    }

    template <typename Fn>
    Var finish(Mat out, bool any, Fn&& fn)
    {
        Node n;
        n.value = std::move(out);
        n.needs_grad = m_record && any;
        if (n.needs_grad) {
            n.back = std::forward<Fn>(fn);
        }
        return push(std::move(n));
    }

    bool m_record;
    std::vector<Node> m_nodes;
};

}  // namespace rbg
