#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "morphtag/numeric.hpp"

using namespace morphtag;

namespace {

// Central differences computed here, independently of grad_check.
double fd_max_rel_error(const std::function<Var(Graph&)>& build, ParameterSet& params, double eps = 1e-5) {
    {
        Graph g;
        Var root = build(g);
        params.zero_grad();
        g.backward(root);
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            const double keep = p.value[k];
            p.value[k] = keep + eps;
            double up;
            {
                Graph g;
                up = build(g).value().item();
            }
            p.value[k] = keep - eps;
            double down;
            {
                Graph g;
                down = build(g).value().item();
            }
            p.value[k] = keep;
            const double num = (up - down) / (2 * eps);
            const double a = p.grad[k];
            worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
        }
    }
    return worst;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

struct ExprParams {
    ParameterSet set;
    Parameter* w;
    Parameter* u;
    Parameter* b;
    Parameter* table;

    explicit ExprParams(std::uint64_t seed) {
        Rng rng(seed);
        w = &set.add("w", {3, 3}, Init::Glorot, rng);
        u = &set.add("u", {3}, Init::Zeros, rng);
        b = &set.add("b", {3}, Init::Zeros, rng);
        table = &set.add("table", {4, 3}, Init::Glorot, rng);
        for (double& v : u->value.data()) v = rng.uniform(-1, 1);
        for (double& v : b->value.data()) v = rng.uniform(-0.5, 0.5);
    }
};

// Random composition of every differentiable op, always yielding a length-3 vector.
Var random_expr(Graph& g, ExprParams& p, Rng& rng, int depth) {
    if (depth == 0) {
        switch (rng.below(3)) {
            case 0: return g.param(*p.u);
            case 1: return embedding(g.param(*p.table), rng.below(4));
            default: return g.input(random_tensor({3}, rng));
        }
    }
    Var a = random_expr(g, p, rng, depth - 1);
    switch (rng.below(10)) {
        case 0: return matmul(g.param(*p.w), a);
        case 1: return affine(g.param(*p.w), a, g.param(*p.b));
        case 2: return add(a, random_expr(g, p, rng, depth - 1));
        case 3: return mul(a, random_expr(g, p, rng, depth - 1));
        case 4: return tanh(a);
        case 5: return sigmoid(a);
        case 6: return log_softmax(a);
        case 7: return slice(concat({a, random_expr(g, p, rng, depth - 1)}), 1 + rng.below(3), 3);
        case 8: return sub(scale(a, 0.7), g.param(*p.b));
        default: {
            Var s = stack_rows(std::vector<Var>{a, tanh(a)});
            return concat({sum(a), logsumexp(a), pick(matmul(s, g.param(*p.u)), rng.below(2))});
        }
    }
}

}  // namespace

TEST(Tensor, ShapeInvariants) {
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.at(1, 2), 6.0);
    EXPECT_EQ(t.row(1)[0], 4.0);
    EXPECT_THROW(t.item(), ShapeError);
}

TEST(Ops, MatmulIdentity) {
    Rng rng(3);
    Graph g;
    Tensor m = random_tensor({3, 5}, rng);
    Var r = matmul(g.input(Tensor::identity(3)), g.input(m));
    EXPECT_EQ(r.value(), m);
}

TEST(Ops, ShapeErrorNamesOpAndShapes) {
    Graph g;
    Var a = g.input(Tensor({2, 3}));
    Var b = g.input(Tensor({2}));
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[2]"), std::string::npos) << msg;
    }
    EXPECT_THROW(add(g.input(Tensor({3})), g.input(Tensor({4}))), ShapeError);
    EXPECT_THROW(slice(g.input(Tensor({3})), 2, 2), ShapeError);
    EXPECT_THROW(embedding(g.input(Tensor({2, 2})), 2), ShapeError);
}

TEST(Ops, LogsumexpOfZeros) {
    Graph g;
    EXPECT_NEAR(logsumexp(g.input(Tensor::vector({0, 0}))).value().item(), std::log(2.0), 1e-15);
    EXPECT_NEAR(morphtag::logsumexp(std::vector<double>{1000, 1000}), 1000 + std::log(2.0), 1e-12);
}

TEST(Ops, LogsumexpShiftInvariance) {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        std::vector<double> v(n), w(n);
        const double c = rng.uniform(-50, 50);
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = rng.uniform(-10, 10);
            w[i] = v[i] + c;
        }
        EXPECT_NEAR(morphtag::logsumexp(w), morphtag::logsumexp(v) + c, 1e-12);
    }
}

TEST(Ops, LogSoftmaxNormalizes) {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        Graph g;
        Var y = log_softmax(g.input(random_tensor({1 + rng.below(10)}, rng, -30, 30)));
        double s = 0;
        for (double v : y.value().data()) s += std::exp(v);
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Backward, TanhAtZero) {
    Rng rng(1);
    ParameterSet ps;
    auto& x = ps.add("x", {1}, Init::Zeros, rng);
    Graph g;
    g.backward(sum(tanh(g.param(x))));
    EXPECT_DOUBLE_EQ(x.grad[0], 1.0);
}

TEST(Backward, Square) {
    Rng rng(1);
    ParameterSet ps;
    auto& x = ps.add("x", {1}, Init::Zeros, rng);
    x.value[0] = 3.0;
    Graph g;
    Var xv = g.param(x);
    g.backward(sum(mul(xv, xv)));
    EXPECT_DOUBLE_EQ(x.grad[0], 6.0);
}

TEST(Backward, MatvecGradientIsOuterProduct) {
    Rng rng(5);
    ParameterSet ps;
    auto& w = ps.add("W", {4, 3}, Init::Glorot, rng);
    Tensor v = random_tensor({3}, rng);
    Graph g;
    auto grads = compute_gradients(sum(matmul(g.param(w), g.input(v))), ps);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(grads.at("W").at(r, c), v[c]);
}

TEST(Backward, RejectsNonScalarRoot) {
    Graph g;
    Var v = g.input(Tensor({3}));
    EXPECT_THROW(g.backward(v), ShapeError);
}

TEST(Backward, UnreachedParametersHoldZero) {
    Rng rng(5);
    ParameterSet ps;
    auto& a = ps.add("a", {2}, Init::Zeros, rng);
    auto& b = ps.add("b", {2}, Init::Zeros, rng);
    b.grad.fill(7.0);
    Graph g;
    Var unused = g.param(b);
    (void)unused;
    auto grads = compute_gradients(sum(g.param(a)), ps);
    EXPECT_EQ(grads.at("a"), Tensor::vector({1, 1}));
    EXPECT_EQ(grads.at("b"), Tensor({2}));
}

TEST(Backward, SharedSubexpressionAccumulates) {
    Rng rng(5);
    ParameterSet ps;
    auto& x = ps.add("x", {1}, Init::Zeros, rng);
    x.value[0] = 0.3;
    Graph g;
    Var t = tanh(g.param(x));
    g.backward(sum(add(t, mul(t, t))));
    const double th = std::tanh(0.3);
    EXPECT_NEAR(x.grad[0], (1 + 2 * th) * (1 - th * th), 1e-15);
}

TEST(Backward, RandomExpressionsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        ExprParams p(1000 + seed);
        const int depth = 1 + static_cast<int>(seed % 4);
        auto build = [&](Graph& g) {
            Rng rng(seed);
            Var v = random_expr(g, p, rng, depth);
            return seed % 2 ? logsumexp(v) : sum(mul(v, v));
        };
        EXPECT_LE(fd_max_rel_error(build, p.set), 1e-4) << "expression seed " << seed;
    }
}

TEST(Backward, RebuildIsBitIdentical) {
    auto run = [] {
        ExprParams p(77);
        Graph g;
        Rng rng(9);
        Var root = sum(random_expr(g, p, rng, 4));
        p.set.zero_grad();
        g.backward(root);
        std::vector<double> out{root.value().item()};
        for (std::size_t i = 0; i < p.set.size(); ++i)
            for (double v : p.set[i].grad.data()) out.push_back(v);
        return out;
    };
    EXPECT_EQ(run(), run());
}

TEST(Lstm, ZeroParamsGiveZeroState) {
    Rng rng(1);
    ParameterSet ps;
    auto lp = LstmParams::create(ps, "l", 3, 2, rng);
    lp.weight->value.fill(0.0);
    Graph g;
    auto s = lstm_cell(g, lp, g.input(Tensor({3})), lstm_zero_state(g, 2));
    EXPECT_EQ(s.h.value(), Tensor({2}));
    EXPECT_EQ(s.c.value(), Tensor({2}));
}

TEST(Lstm, SaturatedForgetGateKeepsCell) {
    Rng rng(1);
    ParameterSet ps;
    auto lp = LstmParams::create(ps, "l", 3, 2, rng);
    lp.weight->value.fill(0.0);
    lp.bias->value.fill(0.0);
    lp.bias->value[2] = lp.bias->value[3] = 50.0;  // f-gate rows
    Graph g;
    LstmState prev{g.input(Tensor::vector({0.1, -0.4})), g.input(Tensor::vector({0.8, -1.3}))};
    auto s = lstm_cell(g, lp, g.input(random_tensor({3}, rng)), prev);
    EXPECT_NEAR(s.c.value()[0], 0.8, 1e-12);
    EXPECT_NEAR(s.c.value()[1], -1.3, 1e-12);
    EXPECT_NEAR(s.h.value()[0], 0.5 * std::tanh(0.8), 1e-12);
}

TEST(Lstm, DimensionMismatch) {
    Rng rng(1);
    ParameterSet ps;
    auto lp = LstmParams::create(ps, "l", 3, 2, rng);
    Graph g;
    EXPECT_THROW(lstm_cell(g, lp, g.input(Tensor({4})), lstm_zero_state(g, 2)), ShapeError);
    EXPECT_THROW(lstm_cell(g, lp, g.input(Tensor({3})), lstm_zero_state(g, 3)), ShapeError);
}

TEST(Lstm, GradientsMatchFiniteDifferences) {
    Rng rng(4);
    ParameterSet ps;
    auto lp = LstmParams::create(ps, "l", 3, 4, rng);
    for (double& v : lp.bias->value.data()) v = rng.uniform(-1, 1);
    std::vector<Tensor> xs;
    for (int t = 0; t < 3; ++t) xs.push_back(random_tensor({3}, rng));
    auto build = [&](Graph& g) {
        LstmState s = lstm_zero_state(g, 4);
        for (const auto& x : xs) s = lstm_cell(g, lp, g.input(x), s);
        return sum(mul(s.h, s.c));
    };
    EXPECT_LE(fd_max_rel_error(build, ps), 1e-4);
    EXPECT_TRUE(grad_check(build, ps).passed);
}

TEST(GradCheck, QuadraticIsExact) {
    Rng rng(2);
    ParameterSet ps;
    auto& x = ps.add("x", {5}, Init::Zeros, rng);
    for (double& v : x.value.data()) v = rng.uniform(-2, 2);
    auto report = grad_check([&](Graph& g) { Var v = g.param(x); return sum(mul(v, v)); }, ps);
    EXPECT_TRUE(report.passed);
    EXPECT_LT(report.max_rel_error, 1e-8);
    EXPECT_EQ(report.checked, 5u);
}

TEST(GradCheck, FlagsWrongGradient) {
    Rng rng(2);
    ParameterSet ps;
    auto& x = ps.add("x", {2}, Init::Zeros, rng);
    x.value.fill(1.0);
    auto wrong = [&](Graph& g) {
        Var v = g.param(x);
        Tensor val = Tensor::scalar(3.0 * v.value()[0] + v.value()[1]);
        return g.custom({v.id()}, val, [id = v.id()](Graph& gr, std::uint32_t self) {
            gr.grad(id)[0] += gr.grad(self)[0];  // should be 3
            gr.grad(id)[1] += gr.grad(self)[0];
        });
    };
    auto report = grad_check(wrong, ps);
    EXPECT_FALSE(report.passed);
    EXPECT_EQ(report.worst_param, "x");
    EXPECT_EQ(report.worst_index, 0u);
    EXPECT_THROW(grad_check(wrong, ps, {.eps = 0.0}), std::invalid_argument);
}

TEST(RngTest, SeedReproducesSequence) {
    Rng a(123), b(123), c(124);
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next();
        EXPECT_EQ(x, b.next());
        (void)c;
    }
    Rng d(5);
    for (int i = 0; i < 1000; ++i) {
        const double u = d.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
        EXPECT_LT(d.below(7), 7u);
    }
    EXPECT_NE(Rng(1).next(), Rng(2).next());
}

TEST(Init, GlorotBoundsAndZeroVectors) {
    Rng rng(8);
    ParameterSet ps;
    auto& w = ps.add("w", {10, 6}, Init::Glorot, rng);
    auto& b = ps.add("b", {10}, Init::Glorot, rng);
    const double a = std::sqrt(6.0 / 16.0);
    bool nonzero = false;
    for (double v : w.value.data()) {
        EXPECT_LE(std::abs(v), a);
        nonzero |= v != 0.0;
    }
    EXPECT_TRUE(nonzero);
    EXPECT_EQ(b.value, Tensor({10}));
    EXPECT_THROW(ps.add("w", {2}, Init::Zeros, rng), std::invalid_argument);
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
    Rng rng(1);
    ParameterSet ps;
    auto& x = ps.add("x", {2}, Init::Zeros, rng);
    x.value = Tensor::vector({1.0, -2.0});
    x.grad = Tensor::vector({0.5, -3.0});
    Adam adam({.learning_rate = 0.01, .clip_norm = 0.0});
    adam.step(ps);
    EXPECT_NEAR(x.value[0], 1.0 - 0.01, 1e-9);
    EXPECT_NEAR(x.value[1], -2.0 + 0.01, 1e-9);
}

TEST(AdamTest, ClipsGlobalNorm) {
    Rng rng(1);
    ParameterSet ps;
    auto& x = ps.add("x", {2}, Init::Zeros, rng);
    x.grad = Tensor::vector({30.0, 40.0});
    ps.clip_grad_norm(5.0);
    EXPECT_NEAR(x.grad[0], 3.0, 1e-12);
    EXPECT_NEAR(x.grad[1], 4.0, 1e-12);
    EXPECT_NEAR(ps.grad_norm(), 5.0, 1e-12);
}

TEST(AdamTest, MinimizesQuadratic) {
    Rng rng(1);
    ParameterSet ps;
    auto& x = ps.add("x", {3}, Init::Zeros, rng);
    x.value = Tensor::vector({2.0, -1.0, 0.5});
    Adam adam({.learning_rate = 0.05});
    for (int i = 0; i < 2000; ++i) {
        Graph g;
        Var v = g.param(x);
        ps.zero_grad();
        g.backward(sum(mul(v, v)));
        adam.step(ps);
    }
    for (double v : x.value.data()) EXPECT_NEAR(v, 0.0, 1e-2);
}

TEST(Container, RoundTripAndLayout) {
    Rng rng(3);
    ParameterSet ps;
    ps.add("enc.W", {2, 3}, Init::Glorot, rng);
    auto& b = ps.add("enc.b", {2}, Init::Zeros, rng);
    b.value = Tensor::vector({1.5, -0.25});
    std::stringstream ss;
    write_container(ss, "{\"k\":1}", ps);
    const std::string bytes = ss.str();
    ASSERT_GE(bytes.size(), 20u);
    EXPECT_EQ(bytes.substr(0, 8), "MTAGPARM");
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);  // version, little-endian
    EXPECT_EQ(bytes[9], 0);
    EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 7);  // manifest length
    EXPECT_EQ(bytes.substr(20, 7), "{\"k\":1}");

    auto c = read_container(ss);
    EXPECT_EQ(c.manifest, "{\"k\":1}");
    ASSERT_EQ(c.entries.size(), 2u);
    EXPECT_EQ(c.entries[0].name, "enc.W");
    EXPECT_EQ(c.entries[0].value, ps[0].value);
    EXPECT_EQ(c.entries[1].value, b.value);

    ParameterSet other;
    Rng rng2(99);
    other.add("enc.W", {2, 3}, Init::Glorot, rng2);
    other.add("enc.b", {2}, Init::Zeros, rng2);
    load_parameters(other, c.entries);
    EXPECT_EQ(other[0].value, ps[0].value);
    EXPECT_EQ(other[1].value, b.value);
}

TEST(Container, RejectsBadInput) {
    std::stringstream bad("NOTMAGIC........");
    EXPECT_THROW(read_container(bad), FormatError);

    Rng rng(3);
    ParameterSet ps;
    ps.add("a", {2}, Init::Zeros, rng);
    std::stringstream ss;
    write_container(ss, "", ps);
    std::string truncated = ss.str();
    truncated.resize(truncated.size() - 4);
    std::stringstream ts(truncated);
    EXPECT_THROW(read_container(ts), FormatError);

    ParameterSet wrong_name;
    wrong_name.add("b", {2}, Init::Zeros, rng);
    ParameterSet wrong_shape;
    wrong_shape.add("a", {3}, Init::Zeros, rng);
    std::stringstream again(ss.str());
    auto c = read_container(again);
    EXPECT_THROW(load_parameters(wrong_name, c.entries), FormatError);
    EXPECT_THROW(load_parameters(wrong_shape, c.entries), FormatError);
}
