#pragma once

// Pairwise factor graphs with damped synchronous sum-product (loopy BP), and the
// factorial CRF that couples one chain per grammatical category through
// cotemporal factors.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "morphtag/numeric.hpp"
#include "morphtag/tagset.hpp"

namespace morphtag {

/// Discrete variables with log-space unary potentials and pairwise log-space factors.
class FactorGraph {
public:
    struct Factor {
        std::size_t first;
        std::size_t second;
        Tensor table;  // domain(first) x domain(second)
    };

    std::size_t add_variable(Tensor unary) {
        if (unary.rank() != 1) throw ShapeError("factor graph: unary must be rank 1, got " + shape_string(unary.shape()));
        unary_.push_back(std::move(unary));
        neighbours_.emplace_back();
        return unary_.size() - 1;
    }

    std::size_t add_factor(std::size_t a, std::size_t b, Tensor table) {
        if (a >= unary_.size() || b >= unary_.size() || a == b)
            throw std::invalid_argument("factor graph: bad factor endpoints");
        if (table.shape() != Shape{domain(a), domain(b)})
            throw ShapeError("factor graph: table " + shape_string(table.shape()) + " does not match domains [" +
                             std::to_string(domain(a)) + "x" + std::to_string(domain(b)) + "]");
        factors_.push_back({a, b, std::move(table)});
        neighbours_[a].push_back(factors_.size() - 1);
        neighbours_[b].push_back(factors_.size() - 1);
        return factors_.size() - 1;
    }

    std::size_t variable_count() const noexcept { return unary_.size(); }
    std::size_t factor_count() const noexcept { return factors_.size(); }
    std::size_t domain(std::size_t v) const { return unary_.at(v).size(); }
    const Tensor& unary(std::size_t v) const { return unary_.at(v); }
    const Factor& factor(std::size_t f) const { return factors_.at(f); }
    const std::vector<std::size_t>& neighbours(std::size_t v) const { return neighbours_.at(v); }

    /// Unnormalised log score of a full assignment.
    double score(std::span<const std::size_t> assignment) const {
        double s = 0.0;
        for (std::size_t v = 0; v < unary_.size(); ++v) s += unary_[v][assignment[v]];
        for (const auto& f : factors_) s += f.table.at(assignment[f.first], assignment[f.second]);
        return s;
    }

private:
    std::vector<Tensor> unary_;
    std::vector<Factor> factors_;
    std::vector<std::vector<std::size_t>> neighbours_;
};

struct BpOptions {
    std::size_t max_iters = 50;
    double damping = 0.5;
    double tol = 1e-5;

    void validate() const {
        if (max_iters < 1) throw std::invalid_argument("loopy_bp: max_iters must be >= 1");
        if (!(damping >= 0.0 && damping < 1.0)) throw std::invalid_argument("loopy_bp: damping must be in [0, 1)");
        if (!(tol > 0.0)) throw std::invalid_argument("loopy_bp: tol must be positive");
    }
};

/// Factor-to-variable messages in log space, normalised to max 0.
struct BpState {
    std::vector<Tensor> to_first;   // per factor, message to factor.first
    std::vector<Tensor> to_second;  // per factor, message to factor.second
    std::size_t iterations = 0;
    double max_delta = std::numeric_limits<double>::infinity();
};

struct BpResult {
    std::vector<Tensor> variable;  // normalised beliefs
    std::vector<Tensor> factor;    // normalised joint beliefs
    bool converged = false;
    std::size_t iterations = 0;
    double max_delta = 0.0;
    /// Bethe approximation of log Z at the final beliefs (exact on trees).
    double log_z = 0.0;
};

namespace detail {

/// log sum_{y} exp(table(x, y) + in(y)) for every x (or over x when `transpose`),
/// normalised so the maximum entry is 0.
inline void factor_message(const Tensor& expt, double table_max, const Tensor& table, const std::vector<double>& in,
                           bool transpose, Tensor& out) {
    const std::size_t rows = table.rows(), cols = table.cols();
    const double in_max = *std::max_element(in.begin(), in.end());
    std::vector<double> e(in.size());
    for (std::size_t k = 0; k < in.size(); ++k) e[k] = std::exp(in[k] - in_max);
    const std::size_t n_out = transpose ? cols : rows;
    bool underflow = false;
    for (std::size_t x = 0; x < n_out; ++x) {
        double s = 0.0;
        if (!transpose) {
            const double* row = expt.data().data() + x * cols;
            for (std::size_t y = 0; y < cols; ++y) s += row[y] * e[y];
        } else {
            for (std::size_t y = 0; y < rows; ++y) s += expt[y * cols + x] * e[y];
        }
        if (s <= 0.0) underflow = true;
        out[x] = std::log(s);
    }
    if (underflow) {
        std::vector<double> buf(in.size());
        for (std::size_t x = 0; x < n_out; ++x) {
            for (std::size_t y = 0; y < in.size(); ++y)
                buf[y] = (transpose ? table.at(y, x) : table.at(x, y)) + in[y];
            out[x] = logsumexp(buf);
        }
    } else {
        for (std::size_t x = 0; x < n_out; ++x) out[x] += table_max + in_max;
    }
    const double m = *std::max_element(out.data().begin(), out.data().end());
    for (double& v : out.data()) v -= m;
}

inline void normalise_log(std::vector<double>& v, Tensor& probs) {
    const double lse = logsumexp(v);
    for (std::size_t k = 0; k < v.size(); ++k) probs[k] = std::exp(v[k] - lse);
}

// Neumaier summation; the Bethe sum adds thousands of small terms to a large total
struct CompensatedSum {
    double sum = 0.0, carry = 0.0;

    void add(double x) {
        const double t = sum + x;
        carry += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
        sum = t;
    }
    double value() const { return sum + carry; }
};

inline double xlogx_sum(std::span<const double> p) {
    CompensatedSum s;
    for (double x : p)
        if (x > 0.0) s.add(x * std::log(x));
    return s.value();
}

}  // namespace detail

/// Synchronous (flooding) sum-product. Each sweep recomputes every factor-to-variable
/// message from the previous sweep's messages; stored messages are damped as
/// m <- (1 - damping) m_new + damping m_old in log space. Unaries act as local
/// evidence, so a graph without factors converges on the first sweep.
inline BpResult loopy_bp(const FactorGraph& graph, const BpOptions& opts, BpState* state_out = nullptr) {
    opts.validate();
    const std::size_t nv = graph.variable_count(), nf = graph.factor_count();
    BpState st;
    std::vector<Tensor> exp_tables(nf);
    std::vector<double> table_max(nf);
    for (std::size_t f = 0; f < nf; ++f) {
        const auto& fac = graph.factor(f);
        st.to_first.emplace_back(Shape{graph.domain(fac.first)});
        st.to_second.emplace_back(Shape{graph.domain(fac.second)});
        const auto d = fac.table.data();
        table_max[f] = *std::max_element(d.begin(), d.end());
        exp_tables[f] = Tensor(fac.table.shape());
        for (std::size_t k = 0; k < d.size(); ++k) exp_tables[f][k] = std::exp(d[k] - table_max[f]);
    }

    auto totals = [&] {
        std::vector<std::vector<double>> tot(nv);
        for (std::size_t v = 0; v < nv; ++v) {
            const auto u = graph.unary(v).data();
            tot[v].assign(u.begin(), u.end());
        }
        for (std::size_t f = 0; f < nf; ++f) {
            const auto& fac = graph.factor(f);
            for (std::size_t k = 0; k < st.to_first[f].size(); ++k) tot[fac.first][k] += st.to_first[f][k];
            for (std::size_t k = 0; k < st.to_second[f].size(); ++k) tot[fac.second][k] += st.to_second[f][k];
        }
        return tot;
    };

    BpResult result;
    std::vector<Tensor> next_first(st.to_first), next_second(st.to_second);
    for (std::size_t it = 1; it <= opts.max_iters; ++it) {
        const auto tot = totals();
        for (std::size_t f = 0; f < nf; ++f) {
            const auto& fac = graph.factor(f);
            // Variable-to-factor message: everything at the variable except this factor's own message.
            std::vector<double> from_second(tot[fac.second]);
            for (std::size_t k = 0; k < from_second.size(); ++k) from_second[k] -= st.to_second[f][k];
            std::vector<double> from_first(tot[fac.first]);
            for (std::size_t k = 0; k < from_first.size(); ++k) from_first[k] -= st.to_first[f][k];
            detail::factor_message(exp_tables[f], table_max[f], fac.table, from_second, false, next_first[f]);
            detail::factor_message(exp_tables[f], table_max[f], fac.table, from_first, true, next_second[f]);
        }
        double delta = 0.0;
        auto relax = [&](Tensor& old, Tensor& fresh) {
            for (std::size_t k = 0; k < old.size(); ++k) {
                const double v = (1.0 - opts.damping) * fresh[k] + opts.damping * old[k];
                delta = std::max(delta, std::abs(v - old[k]));
                old[k] = v;
            }
            const double m = *std::max_element(old.data().begin(), old.data().end());
            for (double& v : old.data()) v -= m;
        };
        for (std::size_t f = 0; f < nf; ++f) {
            relax(st.to_first[f], next_first[f]);
            relax(st.to_second[f], next_second[f]);
        }
        st.iterations = it;
        st.max_delta = delta;
        if (delta < opts.tol) {
            result.converged = true;
            break;
        }
    }
    result.iterations = st.iterations;
    result.max_delta = st.max_delta;

    const auto tot = totals();
    for (std::size_t v = 0; v < nv; ++v) {
        std::vector<double> t = tot[v];
        Tensor b(Shape{t.size()});
        detail::normalise_log(t, b);
        result.variable.push_back(std::move(b));
    }
    detail::CompensatedSum log_z;
    for (std::size_t f = 0; f < nf; ++f) {
        const auto& fac = graph.factor(f);
        const std::size_t r = fac.table.rows(), c = fac.table.cols();
        std::vector<double> joint(r * c);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                joint[i * c + j] = fac.table.at(i, j) + (tot[fac.first][i] - st.to_first[f][i]) +
                                   (tot[fac.second][j] - st.to_second[f][j]);
        Tensor b({r, c});
        detail::normalise_log(joint, b);
        for (std::size_t k = 0; k < r * c; ++k)
            if (b[k] > 0.0) log_z.add(b[k] * (fac.table[k] - std::log(b[k])));
        result.factor.push_back(std::move(b));
    }
    for (std::size_t v = 0; v < nv; ++v) {
        const auto& b = result.variable[v];
        const auto& u = graph.unary(v);
        for (std::size_t k = 0; k < b.size(); ++k) log_z.add(b[k] * u[k]);
        const double degree = static_cast<double>(graph.neighbours(v).size());
        log_z.add((degree - 1.0) * detail::xlogx_sum(b.data()));
    }
    result.log_z = log_z.value();
    if (state_out) *state_out = std::move(st);
    return result;
}

// ---------------------------------------------------------------------------
// Factorial CRF
// ---------------------------------------------------------------------------

using CategoryPair = std::pair<Category, Category>;

/// All 21 unordered category pairs in canonical order.
inline std::vector<CategoryPair> all_category_pairs() {
    std::vector<CategoryPair> out;
    for (std::size_t a = 0; a < kNumCategories; ++a)
        for (std::size_t b = a + 1; b < kNumCategories; ++b) out.emplace_back(kCategories[a], kCategories[b]);
    return out;
}

/// Which parameter a factor's table came from, for gradient routing.
struct FcrfFactorOrigin {
    enum class Kind { Transition, Cotemporal } kind;
    std::size_t index;  // category index for transitions, pair index for cotemporal factors
    std::size_t time;
};

/// Variables are numbered t * 7 + category.
struct FcrfGraph {
    FactorGraph graph;
    std::vector<FcrfFactorOrigin> origin;
    std::size_t length = 0;

    static std::size_t variable(std::size_t t, Category c) { return t * kNumCategories + index_of(c); }
};

/// Builds the per-sentence factor graph from per-category emission lattices
/// (T x L_c each), per-category transition tables and per-pair cotemporal tables.
inline FcrfGraph build_fcrf_graph(const std::array<const Tensor*, kNumCategories>& emissions,
                                  const std::array<const Tensor*, kNumCategories>& transitions,
                                  const std::vector<CategoryPair>& pairs, const std::vector<const Tensor*>& pair_tables) {
    if (pairs.size() != pair_tables.size()) throw std::invalid_argument("fcrf graph: pair table count mismatch");
    FcrfGraph out;
    out.length = emissions[0]->rows();
    if (out.length == 0) throw std::invalid_argument("fcrf graph: empty sentence");
    for (std::size_t t = 0; t < out.length; ++t)
        for (auto c : kCategories) {
            const Tensor& e = *emissions[index_of(c)];
            if (e.rows() != out.length) throw ShapeError("fcrf graph: emission lattices disagree on length");
            auto row = e.row(t);
            out.graph.add_variable(Tensor::vector({row.begin(), row.end()}));
        }
    for (std::size_t t = 0; t < out.length; ++t) {
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            out.graph.add_factor(FcrfGraph::variable(t, pairs[p].first), FcrfGraph::variable(t, pairs[p].second),
                                 *pair_tables[p]);
            out.origin.push_back({FcrfFactorOrigin::Kind::Cotemporal, p, t});
        }
        if (t + 1 < out.length) {
            for (auto c : kCategories) {
                out.graph.add_factor(FcrfGraph::variable(t, c), FcrfGraph::variable(t + 1, c),
                                     *transitions[index_of(c)]);
                out.origin.push_back({FcrfFactorOrigin::Kind::Transition, index_of(c), t});
            }
        }
    }
    return out;
}

/// Per-variable argmax of the marginals (lowest index on ties), NA dropped, assembled.
inline std::vector<TagPrediction> decode_fcrf(const TagScheme& scheme, const FcrfGraph& graph, const BpResult& bp) {
    std::vector<TagPrediction> out;
    for (std::size_t t = 0; t < graph.length; ++t) {
        std::vector<ValueId> values;
        for (auto c : kCategories) {
            const Tensor& b = bp.variable[FcrfGraph::variable(t, c)];
            std::size_t arg = 0;
            for (std::size_t k = 1; k < b.size(); ++k)
                if (b[k] > b[arg]) arg = k;
            if (auto v = category_value(scheme, c, arg)) values.push_back(*v);
        }
        out.push_back(assemble(scheme, std::move(values)));
    }
    return out;
}

/// Emission projections and transitions per category (domain = values + NA) and
/// one cotemporal table per configured category pair.
class FcrfLayer {
public:
    FcrfLayer() = default;

    FcrfLayer(ParameterSet& params, const std::string& prefix, std::size_t input_dim, const TagScheme& scheme,
              std::vector<CategoryPair> pairs, Rng& rng)
        : pairs_(std::move(pairs)) {
        for (auto c : kCategories) {
            const std::size_t l = scheme.category_size(c) + 1;
            const std::string p = prefix + "." + std::string(category_name(c));
            emit_w_[index_of(c)] = &params.add(p + ".emit.W", {l, input_dim}, Init::Glorot, rng);
            emit_b_[index_of(c)] = &params.add(p + ".emit.b", {l}, Init::Zeros, rng);
            trans_[index_of(c)] = &params.add(p + ".trans", {l, l}, Init::Glorot, rng);
        }
        for (const auto& [a, b] : pairs_) {
            if (a == b) throw std::invalid_argument("fcrf: cotemporal pair must join two different categories");
            pair_tables_.push_back(&params.add(
                prefix + ".pair." + std::string(category_name(a)) + "." + std::string(category_name(b)),
                {scheme.category_size(a) + 1, scheme.category_size(b) + 1}, Init::Glorot, rng));
        }
    }

    const std::vector<CategoryPair>& pairs() const noexcept { return pairs_; }

    std::array<Var, kNumCategories> emissions(Graph& g, const std::vector<Var>& hidden) const {
        std::array<Var, kNumCategories> out;
        for (std::size_t c = 0; c < kNumCategories; ++c) {
            Var w = g.param(*emit_w_[c]), b = g.param(*emit_b_[c]);
            std::vector<Var> rows;
            for (const Var& h : hidden) rows.push_back(affine(w, h, b));
            out[c] = stack_rows(rows);
        }
        return out;
    }

    FcrfGraph graph_from(const std::array<Var, kNumCategories>& emissions) const {
        std::array<const Tensor*, kNumCategories> e{}, tr{};
        for (std::size_t c = 0; c < kNumCategories; ++c) {
            e[c] = &emissions[c].value();
            tr[c] = &trans_[c]->value;
        }
        std::vector<const Tensor*> pt;
        for (auto* p : pair_tables_) pt.push_back(&p->value);
        return build_fcrf_graph(e, tr, pairs_, pt);
    }

    /// Bethe surrogate NLL: log Z_Bethe - score(gold). Gradients of every log-potential
    /// are BP beliefs minus gold indicators.
    Var nll(Graph& g, const std::vector<Var>& hidden, const std::vector<std::array<std::size_t, kNumCategories>>& gold,
            const BpOptions& bp_opts) const {
        if (gold.size() != hidden.size()) throw std::invalid_argument("fcrf nll: gold length differs from sentence");
        const auto em = emissions(g, hidden);
        auto fg = std::make_shared<FcrfGraph>(graph_from(em));
        const std::size_t n = hidden.size();
        std::vector<std::size_t> assignment(n * kNumCategories);
        for (std::size_t t = 0; t < n; ++t)
            for (auto c : kCategories) {
                const std::size_t y = gold[t][index_of(c)];
                if (y >= fg->graph.domain(FcrfGraph::variable(t, c)))
                    throw std::out_of_range("fcrf nll: gold label " + std::to_string(y) + " out of range for " +
                                            std::string(category_name(c)));
                assignment[FcrfGraph::variable(t, c)] = y;
            }
        auto bp = std::make_shared<BpResult>(loopy_bp(fg->graph, bp_opts));
        const double loss = bp->log_z - fg->graph.score(assignment);

        std::vector<std::uint32_t> parents;
        for (const Var& v : em) parents.push_back(v.id());
        for (auto* p : trans_) parents.push_back(g.param(*p).id());
        for (auto* p : pair_tables_) parents.push_back(g.param(*p).id());
        auto gold_assign = std::make_shared<std::vector<std::size_t>>(std::move(assignment));
        return g.custom(parents, Tensor::scalar(loss), [=](Graph& graph, std::uint32_t self) {
            const double up = graph.grad(self)[0];
            const auto& y = *gold_assign;
            for (std::size_t c = 0; c < kNumCategories; ++c) {
                if (!graph.needs_grad(parents[c])) continue;
                Tensor& ge = graph.grad(parents[c]);
                for (std::size_t t = 0; t < n; ++t) {
                    const std::size_t v = t * kNumCategories + c;
                    const Tensor& b = bp->variable[v];
                    for (std::size_t k = 0; k < b.size(); ++k) ge.at(t, k) += up * b[k];
                    ge.at(t, y[v]) -= up;
                }
            }
            for (std::size_t f = 0; f < fg->origin.size(); ++f) {
                const auto& o = fg->origin[f];
                const std::uint32_t pid = o.kind == FcrfFactorOrigin::Kind::Transition
                                              ? parents[kNumCategories + o.index]
                                              : parents[2 * kNumCategories + o.index];
                if (!graph.needs_grad(pid)) continue;
                Tensor& gt = graph.grad(pid);
                const Tensor& b = bp->factor[f];
                for (std::size_t k = 0; k < b.size(); ++k) gt[k] += up * b[k];
                const auto& fac = fg->graph.factor(f);
                gt.at(y[fac.first], y[fac.second]) -= up;
            }
        });
    }

    std::vector<TagPrediction> decode(Graph& g, const std::vector<Var>& hidden, const TagScheme& scheme,
                                      const BpOptions& bp_opts) const {
        const auto fg = graph_from(emissions(g, hidden));
        return decode_fcrf(scheme, fg, loopy_bp(fg.graph, bp_opts));
    }

    Parameter& emission_bias(Category c) const { return *emit_b_[index_of(c)]; }

private:
    std::vector<CategoryPair> pairs_;
    std::array<Parameter*, kNumCategories> emit_w_{};
    std::array<Parameter*, kNumCategories> emit_b_{};
    std::array<Parameter*, kNumCategories> trans_{};
    std::vector<Parameter*> pair_tables_;
};

}  // namespace morphtag
