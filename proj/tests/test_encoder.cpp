#include <gtest/gtest.h>

#include "morphtag/encoder.hpp"

using namespace morphtag;

namespace {

EncoderConfig small(std::size_t layers = 1, bool shortcut = false) {
    EncoderConfig c;
    c.word_dim = 4;
    c.char_dim = 3;
    c.char_hidden = 3;
    c.hidden = 4;
    c.layers = layers;
    c.shortcut = shortcut;
    return c;
}

std::vector<TokenIds> sentence(std::initializer_list<std::size_t> words) {
    std::vector<TokenIds> out;
    std::size_t k = 1;
    for (auto w : words) out.push_back({w, {k++ % 5 + 1, 2, w % 5 + 1}});
    return out;
}

void randomize_biases(ParameterSet& ps, Rng& rng) {
    for (std::size_t i = 0; i < ps.size(); ++i)
        if (ps[i].value.rank() == 1)
            for (double& v : ps[i].value.data()) v = rng.uniform(-0.5, 0.5);
}

double sum_all(const HiddenStates& s) {
    double total = 0;
    for (const auto& layer : s)
        for (const auto& v : layer)
            for (double x : v.value().data()) total += x;
    return total;
}

}  // namespace

TEST(Encoder, LayerInputDims) {
    auto c = small(3, true);
    EXPECT_EQ(c.layer_input_dim(0), 4u + 6u);
    EXPECT_EQ(c.layer_input_dim(1), 8u + 10u);
    c.shortcut = false;
    EXPECT_EQ(c.layer_input_dim(2), 8u);
}

TEST(Encoder, Shapes) {
    Rng rng(1);
    ParameterSet ps;
    Encoder enc(small(2, true), 6, 6, ps, rng);
    Graph g;
    auto one = enc.encode(g, sentence({1}), 2);
    ASSERT_EQ(one.size(), 2u);
    for (const auto& layer : one) {
        ASSERT_EQ(layer.size(), 1u);
        EXPECT_EQ(layer[0].shape(), Shape{8});
    }
    auto three = enc.encode(g, sentence({1, 0, 5}), 1);
    EXPECT_EQ(three.size(), 1u);
    EXPECT_EQ(three[0].size(), 3u);
    EXPECT_EQ(enc.embed_token(g, {3, {1, 2}}).shape(), Shape{10});
    EXPECT_THROW(enc.encode(g, sentence({1}), 3), std::out_of_range);
    EXPECT_THROW(enc.encode(g, sentence({1}), 0), std::out_of_range);
}

TEST(Encoder, OovWordsDifferBySpelling) {
    Rng rng(2);
    ParameterSet ps;
    Encoder enc(small(), 6, 6, ps, rng);
    Graph g;
    Var a = enc.embed_token(g, {Vocab::kUnk, {1, 2, 3}});
    Var b = enc.embed_token(g, {Vocab::kUnk, {3, 2, 1}});
    EXPECT_NE(a.value(), b.value());
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.value()[i], b.value()[i]);  // same UNK word row
}

TEST(Encoder, CharacterEmbeddingsReceiveGradient) {
    Rng rng(3);
    ParameterSet ps;
    Encoder enc(small(), 6, 8, ps, rng);
    const TokenIds token{2, {1, 4, 7}};
    Graph g;
    compute_gradients(sum(enc.embed_token(g, token)), ps);
    const auto& grad = ps.at("encoder.char_emb").grad;
    for (std::size_t row = 0; row < 8; ++row) {
        double mag = 0;
        for (std::size_t k = 0; k < 3; ++k) mag += std::abs(grad.at(row, k));
        const bool used = row == 1 || row == 4 || row == 7;
        EXPECT_EQ(mag > 0, used) << "row " << row;
    }
}

TEST(Encoder, ReversedInputWithSwappedDirections) {
    Rng rng(4);
    ParameterSet a;
    Encoder enc(small(), 6, 6, a, rng);
    randomize_biases(a, rng);
    Rng rng2(99);
    ParameterSet b;
    Encoder swapped(small(), 6, 6, b, rng2);
    for (std::size_t i = 0; i < a.size(); ++i) b[i].value = a[i].value;
    std::swap(b.at("encoder.layer0.fwd.W").value, b.at("encoder.layer0.bwd.W").value);
    std::swap(b.at("encoder.layer0.fwd.b").value, b.at("encoder.layer0.bwd.b").value);

    auto s = sentence({1, 2, 3, 4});
    auto r = s;
    std::reverse(r.begin(), r.end());
    Graph g;
    const auto out = enc.encode(g, s, 1)[0];
    const auto rev = swapped.encode(g, r, 1)[0];
    const std::size_t n = s.size(), h = 4;
    for (std::size_t t = 0; t < n; ++t) {
        const Tensor& o = out[n - 1 - t].value();
        const Tensor& q = rev[t].value();
        for (std::size_t k = 0; k < h; ++k) {
            EXPECT_NEAR(q[k], o[h + k], 1e-14);
            EXPECT_NEAR(q[h + k], o[k], 1e-14);
        }
    }
}

TEST(Encoder, GradientsMatchFiniteDifferences) {
    Rng rng(5);
    ParameterSet ps;
    Encoder enc(small(2, true), 5, 6, ps, rng);
    randomize_biases(ps, rng);
    const auto s = sentence({1, 4, 0});
    auto loss = [&](Graph& g) {
        auto states = enc.encode(g, s, 2);
        std::vector<Var> parts;
        for (const auto& v : states.back()) parts.push_back(v);
        Var all = concat(parts);
        return sum(mul(all, all));
    };
    auto report = grad_check(loss, ps, {.max_entries_per_param = 40});
    EXPECT_TRUE(report.passed) << report.worst_param << "[" << report.worst_index << "] rel " << report.max_rel_error;
}

TEST(Encoder, ShortcutKeepsInputsReachable) {
    for (bool shortcut : {true, false}) {
        Rng rng(6);
        ParameterSet ps;
        Encoder enc(small(2, shortcut), 5, 6, ps, rng);
        ps.at("encoder.layer0.fwd.W").value.fill(0.0);
        ps.at("encoder.layer0.bwd.W").value.fill(0.0);
        // zero the layer-1 columns reading layer-0 output and the recurrent state
        for (const char* name : {"encoder.layer1.fwd.W", "encoder.layer1.bwd.W"}) {
            Tensor& w = ps.at(name).value;
            for (std::size_t r = 0; r < w.rows(); ++r)
                for (std::size_t c = 0; c < w.cols(); ++c) {
                    const bool shortcut_col = shortcut && c >= 8 && c < 18;
                    if (!shortcut_col) w[r * w.cols() + c] = 0.0;
                }
        }
        Graph g;
        auto states = enc.encode(g, sentence({1, 2}), 2);
        Var root = sum(concat(std::vector<Var>(states[1].begin(), states[1].end())));
        auto grads = compute_gradients(root, ps);
        double mag = 0;
        for (double v : grads.at("encoder.word_emb").data()) mag += std::abs(v);
        if (shortcut)
            EXPECT_GT(mag, 0.0);
        else
            EXPECT_EQ(mag, 0.0);
    }
}

TEST(Encoder, DeterministicUnderSeed) {
    auto run = [] {
        Rng rng(7);
        ParameterSet ps;
        Encoder enc(small(2), 6, 6, ps, rng);
        Graph g;
        return sum_all(enc.encode(g, sentence({1, 2, 3}), 2));
    };
    EXPECT_EQ(run(), run());
}

TEST(Encoder, ShapesIndependentOfTokens) {
    Rng rng(8);
    ParameterSet ps;
    Encoder enc(small(), 6, 6, ps, rng);
    Graph g;
    auto a = enc.encode(g, {{1, {1}}, {2, {1, 2, 3, 4, 5}}}, 1);
    auto b = enc.encode(g, {{0, {}}, {5, {5}}}, 1);
    for (std::size_t t = 0; t < 2; ++t) EXPECT_EQ(a[0][t].shape(), b[0][t].shape());
}
