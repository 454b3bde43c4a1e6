#pragma once

// Evaluation protocol: exact-match token accuracy, category-level F1 with
// partial credit, misprediction pairs, syncretism- and unseen-restricted scores,
// and paired t-tests over per-sentence scores.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "morphtag/corpus.hpp"
#include "morphtag/tagset.hpp"

namespace morphtag {

class MisalignedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PredictedToken {
    std::string surface;
    CompositeTag gold;
    TagPrediction pred;

    bool exact() const { return pred.tag && *pred.tag == gold; }
};

struct PredictedSentence {
    std::vector<PredictedToken> tokens;
};

struct PredictionFile {
    std::vector<PredictedSentence> sentences;

    std::size_t token_count() const {
        std::size_t n = 0;
        for (const auto& s : sentences) n += s.tokens.size();
        return n;
    }
};

/// Pairs gold sentences with per-token predictions; counts must agree sentence by sentence.
inline PredictionFile align(const Corpus& gold, const std::vector<std::vector<TagPrediction>>& predictions) {
    if (gold.size() != predictions.size())
        throw MisalignedError("misaligned: " + std::to_string(gold.size()) + " gold sentences vs " +
                              std::to_string(predictions.size()) + " predicted");
    PredictionFile out;
    for (std::size_t s = 0; s < gold.size(); ++s) {
        const auto& gs = gold.sentences[s];
        if (gs.size() != predictions[s].size())
            throw MisalignedError("misaligned: sentence " + std::to_string(s + 1) + " has " +
                                  std::to_string(gs.size()) + " gold tokens vs " +
                                  std::to_string(predictions[s].size()) + " predicted");
        PredictedSentence ps;
        for (std::size_t t = 0; t < gs.size(); ++t) ps.tokens.push_back({gs.tokens[t].surface, gs.tokens[t].gold, predictions[s][t]});
        out.sentences.push_back(std::move(ps));
    }
    return out;
}

// Prediction file: surface<TAB>gold<TAB>prediction, blank line between sentences.

inline PredictionFile read_predictions(std::istream& in, const TagScheme& scheme, const std::string& source = "<stream>") {
    PredictionFile file;
    PredictedSentence current;
    std::string line;
    std::size_t lineno = 0;
    auto flush = [&] {
        if (!current.tokens.empty()) file.sentences.push_back(std::move(current));
        current = PredictedSentence{};
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            flush();
            continue;
        }
        if (line.front() == '#') continue;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos)
            throw MisalignedError(source + ":" + std::to_string(lineno) + ": expected surface<TAB>gold<TAB>prediction");
        PredictedToken tok;
        tok.surface = line.substr(0, t1);
        try {
            tok.gold = scheme.parse_label(line.substr(t1 + 1, t2 - t1 - 1));
            tok.pred = parse_prediction_label(scheme, line.substr(t2 + 1));
        } catch (const TagError& e) {
            throw CorpusError(source, lineno, e.what());
        }
        current.tokens.push_back(std::move(tok));
    }
    flush();
    return file;
}

inline PredictionFile load_predictions(const std::string& path, const TagScheme& scheme) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open prediction file: " + path);
    return read_predictions(in, scheme, path);
}

inline void write_predictions(std::ostream& out, const PredictionFile& file, const TagScheme& scheme) {
    for (std::size_t s = 0; s < file.sentences.size(); ++s) {
        if (s) out << '\n';
        for (const auto& t : file.sentences[s].tokens)
            out << t.surface << '\t' << scheme.to_monolithic(t.gold) << '\t' << prediction_label(scheme, t.pred) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

struct F1Counts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;

    std::size_t support() const noexcept { return tp + fn; }
    /// Absent when there is nothing to score (no gold and no predictions).
    std::optional<double> f1() const {
        const std::size_t denom = 2 * tp + fp + fn;
        if (denom == 0) return std::nullopt;
        return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    }
    F1Counts& operator+=(const F1Counts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
    friend bool operator==(const F1Counts&, const F1Counts&) = default;
};

/// Macro averaging granularity: over the seven categories (default) or over individual feature values.
enum class Averaging { Category, Value };

struct EvalOptions {
    Averaging averaging = Averaging::Category;
    std::size_t jobs = 1;
};

struct MetricsReport {
    std::size_t tokens = 0;
    std::size_t exact = 0;
    std::optional<double> token_accuracy;
    std::optional<double> macro_f1;
    std::optional<double> micro_f1;
    std::array<F1Counts, kNumCategories> categories{};
    std::vector<F1Counts> values;  // by ValueId
    Averaging averaging = Averaging::Category;

    std::optional<double> category_f1(Category c) const { return categories[index_of(c)].f1(); }
};

namespace detail {

struct Tally {
    std::size_t tokens = 0;
    std::size_t exact = 0;
    std::array<F1Counts, kNumCategories> categories{};
    std::vector<F1Counts> values = std::vector<F1Counts>(kNumValues);

    void add(const TagScheme& scheme, const PredictedToken& tok) {
        ++tokens;
        if (tok.exact()) ++exact;
        std::array<std::set<ValueId>, kNumCategories> predicted;
        for (ValueId v : tok.pred.values) predicted[index_of(scheme.category_of(v))].insert(v);
        for (auto c : kCategories) {
            const auto gold = tok.gold[c];
            const auto& pred = predicted[index_of(c)];
            auto& cc = categories[index_of(c)];
            if (gold && pred.contains(*gold)) {
                ++cc.tp;
                ++values[gold->index].tp;
            } else if (gold) {
                ++cc.fn;
                ++values[gold->index].fn;
            }
            for (ValueId p : pred) {
                if (gold && p == *gold) continue;
                ++cc.fp;
                ++values[p.index].fp;
            }
        }
    }

    Tally& operator+=(const Tally& o) {
        tokens += o.tokens;
        exact += o.exact;
        for (std::size_t c = 0; c < kNumCategories; ++c) categories[c] += o.categories[c];
        for (std::size_t v = 0; v < values.size(); ++v) values[v] += o.values[v];
        return *this;
    }
};

inline MetricsReport finish(const Tally& t, Averaging averaging) {
    MetricsReport r;
    r.tokens = t.tokens;
    r.exact = t.exact;
    r.categories = t.categories;
    r.values = t.values;
    r.averaging = averaging;
    if (t.tokens == 0) return r;
    r.token_accuracy = static_cast<double>(t.exact) / static_cast<double>(t.tokens);
    F1Counts pooled;
    double macro = 0.0;
    std::size_t counted = 0;
    auto include = [&](const F1Counts& c) {
        if (c.support() == 0) return;
        macro += *c.f1();
        ++counted;
    };
    for (const auto& c : t.categories) {
        pooled += c;
        if (averaging == Averaging::Category) include(c);
    }
    if (averaging == Averaging::Value)
        for (const auto& v : t.values) include(v);
    if (counted) r.macro_f1 = macro / static_cast<double>(counted);
    r.micro_f1 = pooled.f1();
    return r;
}

template <typename Pred>
Tally tally_tokens(const TagScheme& scheme, const PredictionFile& file, Pred&& keep) {
    Tally t;
    for (const auto& s : file.sentences)
        for (const auto& tok : s.tokens)
            if (keep(tok)) t.add(scheme, tok);
    return t;
}

}  // namespace detail

/// Token accuracy plus per-category F1, macro and micro F1. Sentences are tallied
/// in `jobs` contiguous chunks; integer counts make the result independent of jobs.
inline MetricsReport evaluate(const TagScheme& scheme, const PredictionFile& file, const EvalOptions& opts = {}) {
    const std::size_t n = file.sentences.size();
    const std::size_t jobs = std::max<std::size_t>(1, std::min(opts.jobs, std::max<std::size_t>(n, 1)));
    std::vector<detail::Tally> parts(jobs);
    auto work = [&](std::size_t j) {
        for (std::size_t s = j * n / jobs; s < (j + 1) * n / jobs; ++s)
            for (const auto& tok : file.sentences[s].tokens) parts[j].add(scheme, tok);
    };
    if (jobs == 1) {
        work(0);
    } else {
        std::vector<std::thread> threads;
        for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(work, j);
        for (auto& th : threads) th.join();
    }
    detail::Tally total;
    for (const auto& p : parts) total += p;
    return detail::finish(total, opts.averaging);
}

inline double token_accuracy(const TagScheme& scheme, const PredictionFile& file) {
    auto r = evaluate(scheme, file);
    if (!r.token_accuracy) throw std::invalid_argument("token_accuracy: empty prediction file");
    return *r.token_accuracy;
}

inline MetricsReport category_f1(const TagScheme& scheme, const PredictionFile& file, Averaging averaging = Averaging::Category) {
    return evaluate(scheme, file, {averaging, 1});
}

/// Macro F1 of each sentence on its own, the unit of the paired t-test.
inline std::vector<double> sentence_macro_f1(const TagScheme& scheme, const PredictionFile& file,
                                             Averaging averaging = Averaging::Category) {
    std::vector<double> out;
    for (const auto& s : file.sentences) {
        detail::Tally t;
        for (const auto& tok : s.tokens) t.add(scheme, tok);
        out.push_back(detail::finish(t, averaging).macro_f1.value_or(0.0));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Error analysis
// ---------------------------------------------------------------------------

struct LabelPair {
    std::string gold;
    std::string pred;  // "INVALID" for invalid composites
    std::size_t count = 0;

    friend bool operator==(const LabelPair&, const LabelPair&) = default;
};

inline std::string pair_pred_label(const TagScheme& scheme, const TagPrediction& p) {
    return p.tag ? scheme.to_monolithic(*p.tag) : std::string(kInvalidLabel);
}

/// Counts (gold, predicted) label pairs over inexact tokens; descending by count,
/// ties by lexicographic (gold, pred). All pairs when k == 0.
inline std::vector<LabelPair> misprediction_pairs(const TagScheme& scheme, const PredictionFile& file, std::size_t k) {
    std::map<std::pair<std::string, std::string>, std::size_t> counts;
    for (const auto& s : file.sentences)
        for (const auto& tok : s.tokens)
            if (!tok.exact()) ++counts[{scheme.to_monolithic(tok.gold), pair_pred_label(scheme, tok.pred)}];
    std::vector<LabelPair> pairs;
    for (const auto& [key, n] : counts) pairs.push_back({key.first, key.second, n});
    std::stable_sort(pairs.begin(), pairs.end(), [](const LabelPair& a, const LabelPair& b) {
        if (a.count != b.count) return a.count > b.count;
        return std::tie(a.gold, a.pred) < std::tie(b.gold, b.pred);
    });
    if (k > 0 && pairs.size() > k) pairs.resize(k);
    return pairs;
}

struct RestrictedScore {
    std::size_t tokens = 0;
    std::optional<double> macro_f1;     // absent when no token qualifies
    std::optional<double> exact_match;  // absent when no token qualifies
};

namespace detail {
inline RestrictedScore restricted(const Tally& t) {
    RestrictedScore r;
    r.tokens = t.tokens;
    if (t.tokens == 0) return r;
    const auto m = finish(t, Averaging::Category);
    r.macro_f1 = m.macro_f1;
    r.exact_match = m.token_accuracy;
    return r;
}
}  // namespace detail

/// Macro F1 over tokens with a syncretic surface form whose (gold, pred) pair is
/// among `top`, plus correctly predicted syncretic tokens whose gold label is the
/// gold side of one of those pairs.
inline RestrictedScore syncretism_f1(const TagScheme& scheme, const PredictionFile& file, const SyncretismIndex& index,
                                     const std::vector<LabelPair>& top) {
    std::set<std::pair<std::string, std::string>> pairs;
    std::set<std::string> gold_labels;
    for (const auto& p : top) {
        pairs.emplace(p.gold, p.pred);
        gold_labels.insert(p.gold);
    }
    auto t = detail::tally_tokens(scheme, file, [&](const PredictedToken& tok) {
        if (!index.is_syncretic(tok.surface)) return false;
        const std::string gold = scheme.to_monolithic(tok.gold);
        if (tok.exact()) return gold_labels.contains(gold);
        return pairs.contains({gold, pair_pred_label(scheme, tok.pred)});
    });
    return detail::restricted(t);
}

/// Scores restricted to tokens whose gold label never occurs in training.
inline RestrictedScore unseen_report(const TagScheme& scheme, const PredictionFile& file,
                                     const std::set<std::string>& train_labels) {
    auto t = detail::tally_tokens(scheme, file, [&](const PredictedToken& tok) {
        return !train_labels.contains(scheme.to_monolithic(tok.gold));
    });
    return detail::restricted(t);
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

namespace detail {

/// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 500;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace detail

/// Regularised incomplete beta I_x(a, b); accurate to about 1e-12 for moderate a, b.
inline double incomplete_beta(double a, double b, double x) {
    if (x < 0.0 || x > 1.0) throw std::domain_error("incomplete_beta: x outside [0, 1]");
    if (x == 0.0 || x == 1.0) return x;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * detail::beta_continued_fraction(a, b, x) / a;
    return 1.0 - std::exp(log_front) * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// Two-tailed p value of Student's t with `dof` degrees of freedom.
inline double student_t_two_tailed(double t, double dof) {
    if (std::isinf(t)) return 0.0;
    return incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
}

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    std::size_t n = 0;
    double mean_difference = 0.0;
    /// Differences are constant and nonzero: t is infinite and p is reported as 0.
    bool degenerate = false;
};

/// Paired t-test on a - b. All-zero differences give t = 0, p = 1.
inline TTestResult paired_ttest(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("paired_ttest: length mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    if (a.size() < 2) throw std::invalid_argument("paired_ttest: need at least two pairs");
    const std::size_t n = a.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    double mean = 0.0;
    for (double x : d) mean += x;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double x : d) ss += (x - mean) * (x - mean);
    TTestResult r;
    r.n = n;
    r.mean_difference = mean;
    const bool all_zero = std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; });
    if (all_zero) return r;
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (sd == 0.0 || sd <= 1e-15 * std::abs(mean)) {
        r.degenerate = true;
        r.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
        r.p = 0.0;
        return r;
    }
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    r.p = student_t_two_tailed(r.t, static_cast<double>(n - 1));
    return r;
}

// ---------------------------------------------------------------------------
// Reports (schema "morphtag.metrics/1")
// ---------------------------------------------------------------------------

inline nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    nlohmann::json cats = nlohmann::json::object();
    for (auto c : kCategories) {
        const auto& cc = r.categories[index_of(c)];
        cats[std::string(category_name(c))] = {
            {"f1", optional_json(cc.f1())}, {"tp", cc.tp}, {"fp", cc.fp}, {"fn", cc.fn}, {"support", cc.support()}};
    }
    return {{"schema", "morphtag.metrics/1"},
            {"averaging", r.averaging == Averaging::Category ? "category" : "value"},
            {"tokens", r.tokens},
            {"exact", r.exact},
            {"token_accuracy", optional_json(r.token_accuracy)},
            {"macro_f1", optional_json(r.macro_f1)},
            {"micro_f1", optional_json(r.micro_f1)},
            {"categories", cats}};
}

inline nlohmann::json restricted_to_json(const RestrictedScore& r) {
    return {{"tokens", r.tokens}, {"macro_f1", optional_json(r.macro_f1)}, {"exact_match", optional_json(r.exact_match)}};
}

inline nlohmann::json pairs_to_json(const std::vector<LabelPair>& pairs) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : pairs) out.push_back({{"gold", p.gold}, {"pred", p.pred}, {"count", p.count}});
    return out;
}

inline nlohmann::json ttest_to_json(const TTestResult& r) {
    nlohmann::json t = std::isfinite(r.t) ? nlohmann::json(r.t) : nlohmann::json(r.t > 0 ? "inf" : "-inf");
    return {{"t", t}, {"p", r.p}, {"n", r.n}, {"mean_difference", r.mean_difference}, {"degenerate", r.degenerate}};
}

}  // namespace morphtag
