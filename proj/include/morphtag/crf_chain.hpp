#pragma once

// Linear-chain CRF: exact forward-backward, Viterbi and the negative
// log-likelihood as a fused autodiff node.

#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphtag/numeric.hpp"

namespace morphtag {

/// Emission lattice (T x L) plus transition (L x L), start (L) and end (L) scores, all log-space.
struct ChainScores {
    const Tensor& emissions;
    const Tensor& transitions;
    const Tensor& start;
    const Tensor& end;

    std::size_t length() const { return emissions.rows(); }
    std::size_t labels() const { return emissions.cols(); }

    void validate() const {
        if (emissions.rank() != 2) throw ShapeError("chain crf: emissions must be T x L, got " + shape_string(emissions.shape()));
        const std::size_t l = labels();
        if (transitions.shape() != Shape{l, l} || start.shape() != Shape{l} || end.shape() != Shape{l})
            throw ShapeError("chain crf: potentials " + shape_string(transitions.shape()) + "/" +
                             shape_string(start.shape()) + "/" + shape_string(end.shape()) +
                             " do not match emissions " + shape_string(emissions.shape()));
    }
};

struct ChainMarginals {
    double log_z = 0.0;
    Tensor node;              // T x L
    std::vector<Tensor> edge;  // T-1 entries of L x L; edge[t](i, j) = P(y_t = i, y_{t+1} = j)
};

struct ViterbiResult {
    std::vector<std::size_t> path;
    double score = 0.0;
};

namespace detail {

inline Tensor chain_alpha(const ChainScores& s) {
    const std::size_t n = s.length(), l = s.labels();
    Tensor alpha({n, l});
    for (std::size_t y = 0; y < l; ++y) alpha.at(0, y) = s.start[y] + s.emissions.at(0, y);
    std::vector<double> buf(l);
    for (std::size_t t = 1; t < n; ++t)
        for (std::size_t y = 0; y < l; ++y) {
            for (std::size_t p = 0; p < l; ++p) buf[p] = alpha.at(t - 1, p) + s.transitions.at(p, y);
            alpha.at(t, y) = s.emissions.at(t, y) + logsumexp(buf);
        }
    return alpha;
}

inline Tensor chain_beta(const ChainScores& s) {
    const std::size_t n = s.length(), l = s.labels();
    Tensor beta({n, l});
    for (std::size_t y = 0; y < l; ++y) beta.at(n - 1, y) = s.end[y];
    std::vector<double> buf(l);
    for (std::size_t t = n - 1; t-- > 0;)
        for (std::size_t y = 0; y < l; ++y) {
            for (std::size_t q = 0; q < l; ++q) buf[q] = s.transitions.at(y, q) + s.emissions.at(t + 1, q) + beta.at(t + 1, q);
            beta.at(t, y) = logsumexp(buf);
        }
    return beta;
}

}  // namespace detail

inline double log_partition(const ChainScores& s) {
    s.validate();
    const Tensor alpha = detail::chain_alpha(s);
    const std::size_t n = s.length(), l = s.labels();
    std::vector<double> fin(l);
    for (std::size_t y = 0; y < l; ++y) fin[y] = alpha.at(n - 1, y) + s.end[y];
    return logsumexp(fin);
}

inline double path_score(const ChainScores& s, std::span<const std::size_t> path) {
    s.validate();
    if (path.size() != s.length()) throw std::invalid_argument("path_score: path length differs from lattice");
    for (auto y : path)
        if (y >= s.labels()) throw std::out_of_range("path_score: label " + std::to_string(y) + " out of range");
    double score = s.start[path[0]] + s.end[path.back()];
    for (std::size_t t = 0; t < path.size(); ++t) {
        score += s.emissions.at(t, path[t]);
        if (t > 0) score += s.transitions.at(path[t - 1], path[t]);
    }
    return score;
}

/// Highest-scoring path; ties go to the lower label index.
inline ViterbiResult viterbi(const ChainScores& s) {
    s.validate();
    const std::size_t n = s.length(), l = s.labels();
    Tensor delta({n, l});
    std::vector<std::size_t> back(n * l, 0);
    for (std::size_t y = 0; y < l; ++y) delta.at(0, y) = s.start[y] + s.emissions.at(0, y);
    for (std::size_t t = 1; t < n; ++t)
        for (std::size_t y = 0; y < l; ++y) {
            std::size_t arg = 0;
            double best = delta.at(t - 1, 0) + s.transitions.at(0, y);
            for (std::size_t p = 1; p < l; ++p) {
                const double v = delta.at(t - 1, p) + s.transitions.at(p, y);
                if (v > best) {
                    best = v;
                    arg = p;
                }
            }
            delta.at(t, y) = best + s.emissions.at(t, y);
            back[t * l + y] = arg;
        }
    ViterbiResult r;
    r.path.assign(n, 0);
    double best = delta.at(n - 1, 0) + s.end[0];
    for (std::size_t y = 1; y < l; ++y) {
        const double v = delta.at(n - 1, y) + s.end[y];
        if (v > best) {
            best = v;
            r.path[n - 1] = y;
        }
    }
    r.score = best;
    for (std::size_t t = n - 1; t > 0; --t) r.path[t - 1] = back[t * l + r.path[t]];
    return r;
}

inline ChainMarginals marginals(const ChainScores& s) {
    s.validate();
    const std::size_t n = s.length(), l = s.labels();
    const Tensor alpha = detail::chain_alpha(s);
    const Tensor beta = detail::chain_beta(s);
    ChainMarginals m;
    std::vector<double> fin(l);
    for (std::size_t y = 0; y < l; ++y) fin[y] = alpha.at(n - 1, y) + s.end[y];
    m.log_z = logsumexp(fin);
    m.node = Tensor({n, l});
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t y = 0; y < l; ++y) m.node.at(t, y) = std::exp(alpha.at(t, y) + beta.at(t, y) - m.log_z);
    for (std::size_t t = 0; t + 1 < n; ++t) {
        Tensor e({l, l});
        for (std::size_t i = 0; i < l; ++i)
            for (std::size_t j = 0; j < l; ++j)
                e.at(i, j) = std::exp(alpha.at(t, i) + s.transitions.at(i, j) + s.emissions.at(t + 1, j) +
                                      beta.at(t + 1, j) - m.log_z);
        m.edge.push_back(std::move(e));
    }
    return m;
}

/// -score(gold) + log Z.
inline double chain_nll(const ChainScores& s, std::span<const std::size_t> gold) {
    return log_partition(s) - path_score(s, gold);
}

/// Fused NLL node. Gradients: emissions/start/end get node marginals minus gold
/// indicators, transitions get summed edge marginals minus gold transition counts.
inline Var chain_crf_nll(Var emissions, Var transitions, Var start, Var end, std::span<const std::size_t> gold) {
    Graph& g = emissions.graph();
    const ChainScores s{emissions.value(), transitions.value(), start.value(), end.value()};
    s.validate();
    if (gold.size() != s.length()) throw std::invalid_argument("chain_crf_nll: gold length differs from lattice");
    for (auto y : gold)
        if (y >= s.labels()) throw std::out_of_range("chain_crf_nll: gold label " + std::to_string(y) + " out of range");
    auto m = std::make_shared<ChainMarginals>(marginals(s));
    const double loss = m->log_z - path_score(s, gold);
    auto path = std::make_shared<std::vector<std::size_t>>(gold.begin(), gold.end());
    const std::uint32_t e_id = emissions.id(), tr_id = transitions.id(), st_id = start.id(), en_id = end.id();
    return g.custom({e_id, tr_id, st_id, en_id}, Tensor::scalar(loss), [=](Graph& graph, std::uint32_t self) {
        const double up = graph.grad(self)[0];
        const std::size_t n = m->node.rows(), l = m->node.cols();
        const auto& y = *path;
        if (graph.needs_grad(e_id)) {
            Tensor& ge = graph.grad(e_id);
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t k = 0; k < l; ++k) ge.at(t, k) += up * m->node.at(t, k);
                ge.at(t, y[t]) -= up;
            }
        }
        if (graph.needs_grad(tr_id)) {
            Tensor& gt = graph.grad(tr_id);
            for (std::size_t t = 0; t + 1 < n; ++t) {
                const Tensor& e = m->edge[t];
                for (std::size_t i = 0; i < l * l; ++i) gt[i] += up * e[i];
                gt.at(y[t], y[t + 1]) -= up;
            }
        }
        if (graph.needs_grad(st_id)) {
            Tensor& gs = graph.grad(st_id);
            for (std::size_t k = 0; k < l; ++k) gs[k] += up * m->node.at(0, k);
            gs[y[0]] -= up;
        }
        if (graph.needs_grad(en_id)) {
            Tensor& gn = graph.grad(en_id);
            for (std::size_t k = 0; k < l; ++k) gn[k] += up * m->node.at(n - 1, k);
            gn[y[n - 1]] -= up;
        }
    });
}

/// Emission projection plus chain potentials for one label set.
class ChainCrfLayer {
public:
    ChainCrfLayer() = default;

    ChainCrfLayer(ParameterSet& params, const std::string& prefix, std::size_t input_dim, std::size_t labels, Rng& rng)
        : labels_(labels) {
        if (labels == 0) throw std::invalid_argument("chain crf layer needs at least one label");
        emit_w_ = &params.add(prefix + ".emit.W", {labels, input_dim}, Init::Glorot, rng);
        emit_b_ = &params.add(prefix + ".emit.b", {labels}, Init::Zeros, rng);
        trans_ = &params.add(prefix + ".trans", {labels, labels}, Init::Glorot, rng);
        start_ = &params.add(prefix + ".start", {labels}, Init::Zeros, rng);
        end_ = &params.add(prefix + ".end", {labels}, Init::Zeros, rng);
    }

    std::size_t labels() const noexcept { return labels_; }

    Var emissions(Graph& g, const std::vector<Var>& hidden) const {
        std::vector<Var> rows;
        rows.reserve(hidden.size());
        Var w = g.param(*emit_w_), b = g.param(*emit_b_);
        for (const Var& h : hidden) rows.push_back(affine(w, h, b));
        return stack_rows(rows);
    }

    Var nll(Graph& g, const std::vector<Var>& hidden, std::span<const std::size_t> gold) const {
        return chain_crf_nll(emissions(g, hidden), g.param(*trans_), g.param(*start_), g.param(*end_), gold);
    }

    ViterbiResult decode(Graph& g, const std::vector<Var>& hidden) const {
        Var e = emissions(g, hidden);
        return viterbi(ChainScores{e.value(), trans_->value, start_->value, end_->value});
    }

    Parameter& emission_bias() const { return *emit_b_; }
    Parameter& transitions() const { return *trans_; }

private:
    std::size_t labels_ = 0;
    Parameter* emit_w_ = nullptr;
    Parameter* emit_b_ = nullptr;
    Parameter* trans_ = nullptr;
    Parameter* start_ = nullptr;
    Parameter* end_ = nullptr;
};

}  // namespace morphtag
