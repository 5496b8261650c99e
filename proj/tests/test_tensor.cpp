#include <gtest/gtest.h>

#include "rbg/nn.hpp"
#include "rbg/tensor.hpp"
#include "support.hpp"

using namespace rbg;
using Mat = Matrix<double>;

namespace {

// Checks every parameter entry against central differences of sum(out .* weights).
void check_op(ParameterSet<double>& ps, const std::function<Var(Graph<double>&)>& build, double tol = 1e-6)
{
    Rng rng(99);
    Tape<double> tape(true);
    Graph<double> g(tape, ps);
    Var out = build(g);
    const Mat weights = random_matrix<double>(tape.value(out).rows(), tape.value(out).cols(), 1.0, rng);
    tape.backward(out, weights);
    std::vector<Mat> grads = ps.zero_grads();
    tape.accumulate(grads);

    for (std::size_t s = 0; s < ps.size(); ++s) {
        for (Eigen::Index i = 0; i < ps[s].value.size(); ++i) {
            const double fd = test::central_difference(ps, s, i, [&] {
                Tape<double> t(false);
                Graph<double> gg(t, ps);
                return (t.value(build(gg)).array() * weights.array()).sum();
            });
            EXPECT_NEAR(grads[s].data()[i], fd, tol * std::max(1.0, std::abs(fd)))
                << ps[s].name << "[" << i << "]";
        }
    }
}

}  // namespace

TEST(Tape, MatmulAndTransposeGradients)
{
    Rng rng(1);
    ParameterSet<double> ps;
    auto a = ps.add("a", random_matrix<double>(3, 4, 1.0, rng));
    auto b = ps.add("b", random_matrix<double>(4, 2, 1.0, rng));
    auto c = ps.add("c", random_matrix<double>(5, 4, 1.0, rng));
    check_op(ps, [&](Graph<double>& g) {
        auto& t = g.tape;
        Var ab = t.matmul(g.param(a), g.param(b));
        Var ac = t.matmul_nt(g.param(a), g.param(c));
        return t.concat_cols(std::vector<Var>{ab, ac, t.transpose(t.transpose(ac))});
    });
}

TEST(Tape, ElementwiseGradients)
{
    Rng rng(2);
    ParameterSet<double> ps;
    auto a = ps.add("a", random_matrix<double>(3, 4, 1.0, rng));
    auto r = ps.add("r", random_matrix<double>(1, 4, 1.0, rng));
    check_op(ps, [&](Graph<double>& g) {
        auto& t = g.tape;
        Var x = t.add_row(g.param(a), g.param(r));
        return t.add(t.gelu(x), t.scale(t.sigmoid(x), 0.7));
    });
}

TEST(Tape, LayerNormGradients)
{
    Rng rng(3);
    ParameterSet<double> ps;
    auto x = ps.add("x", random_matrix<double>(3, 5, 1.0, rng));
    auto gain = ps.add("gain", random_matrix<double>(1, 5, 1.0, rng));
    auto bias = ps.add("bias", random_matrix<double>(1, 5, 1.0, rng));
    check_op(ps, [&](Graph<double>& g) { return g.tape.layer_norm(g.param(x), g.param(gain), g.param(bias)); });
}

TEST(Tape, MaskedSoftmaxGradientsAndZeros)
{
    Rng rng(4);
    ParameterSet<double> ps;
    auto x = ps.add("x", random_matrix<double>(3, 5, 1.0, rng));
    check_op(ps, [&](Graph<double>& g) { return g.tape.softmax_rows(g.param(x), AttentionMask::causal(1)); });
    check_op(ps, [&](Graph<double>& g) {
        return g.tape.softmax_rows(g.param(x), AttentionMask::columns({0, 1, 1, 0, 1}));
    });

    Tape<double> t(false);
    Graph<double> g(t, ps);
    const auto& p = t.value(t.softmax_rows(g.param(x), AttentionMask::columns({0, 1, 1, 0, 1})));
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        EXPECT_EQ(p(r, 0), 0.0);
        EXPECT_EQ(p(r, 3), 0.0);
        EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
    }
}

TEST(Tape, GatherSliceConcatGradients)
{
    Rng rng(5);
    ParameterSet<double> ps;
    auto table = ps.add("table", random_matrix<double>(6, 3, 1.0, rng));
    const std::vector<int> ids{2, 0, 2, 5};
    check_op(ps, [&](Graph<double>& g) {
        auto& t = g.tape;
        Var e = t.gather_rows(g.param(table), ids);
        Var top = t.slice_rows(e, 1, 2);
        Var left = t.slice_cols(e, 0, 2);
        return t.concat_rows(std::vector<Var>{t.concat_cols(std::vector<Var>{top, t.slice_rows(left, 0, 2)}),
                                              t.concat_cols(std::vector<Var>{t.slice_rows(e, 0, 2),
                                                                             t.slice_rows(left, 2, 2)})});
    });
}

TEST(Tape, MixNllNormalizeSparseGradients)
{
    Rng rng(6);
    ParameterSet<double> ps;
    auto logits = ps.add("logits", random_matrix<double>(3, 4, 1.0, rng));
    auto gate = ps.add("gate", random_matrix<double>(3, 1, 1.0, rng));
    auto ev = ps.add("ev", Mat::Constant(1, 3, 0.5) + random_matrix<double>(1, 3, 0.1, rng));
    std::vector<SparseEntry<double>> entries{{0, 1, 0.5}, {0, 2, 0.5}, {1, 1, 1.0}, {2, 3, 1.0}};
    const std::vector<int> targets{1, 3, 0};
    check_op(ps, [&](Graph<double>& g) {
        auto& t = g.tape;
        Var copy = t.normalize_sum(t.sparse_map(g.param(ev), entries, 4));
        Var p = t.mix(t.sigmoid(g.param(gate)), t.softmax_rows(g.param(logits)), copy);
        return t.concat_cols(std::vector<Var>{t.slice_rows(p, 0, 1), t.nll_mean(p, targets)});
    });
}

TEST(Tape, FrozenParametersReceiveNoGradient)
{
    Rng rng(7);
    ParameterSet<double> ps;
    auto a = ps.add("a", random_matrix<double>(2, 2, 1.0, rng));
    auto b = ps.add("b", random_matrix<double>(2, 2, 1.0, rng));
    ps[b].trainable = false;
    Tape<double> t(true);
    Graph<double> g(t, ps);
    Var out = t.matmul(g.param(a), g.param(b));
    Var s = t.nll_mean(t.softmax_rows(out), std::vector<int>{0, 1});
    t.backward(s);
    auto grads = ps.zero_grads();
    t.accumulate(grads);
    EXPECT_GT(grads[a].norm(), 0.0);
    EXPECT_EQ(grads[b].norm(), 0.0);
}

TEST(Tape, NoRecordTapeStoresNoGradients)
{
    ParameterSet<double> ps;
    auto a = ps.add("a", Mat::Ones(2, 2));
    Tape<double> t(false);
    Graph<double> g(t, ps);
    Var out = t.scale(g.param(a), 2.0);
    EXPECT_FALSE(t.needs_grad(out));
    t.backward(out);
    EXPECT_EQ(t.grad(out).size(), 0);
}
