#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "morphtag/evalkit.hpp"
#include "support.hpp"
#include "ttest_reference.hpp"

using namespace morphtag;
using support::scheme;

namespace {

PredictionFile parse(const std::string& text) {
    std::istringstream in(text);
    return read_predictions(in, scheme());
}

PredictionFile metrics_fixture() { return load_predictions(support::fixture("metrics10.tsv"), scheme()); }

nlohmann::json expected() {
    std::ifstream in(support::fixture("metrics10_expected.json"));
    return nlohmann::json::parse(in);
}

double frac(const nlohmann::json& j) { return j[0].get<double>() / j[1].get<double>(); }

PredictionFile perfect(const Corpus& c) {
    std::vector<std::vector<TagPrediction>> preds;
    for (const auto& s : c.sentences) {
        preds.emplace_back();
        for (const auto& t : s.tokens) preds.back().push_back(prediction_of(t.gold));
    }
    return align(c, preds);
}

}  // namespace

TEST(Metrics, HandComputedFixture) {
    const auto file = metrics_fixture();
    const auto want = expected();
    ASSERT_EQ(file.token_count(), want["tokens"].get<std::size_t>());
    const auto r = evaluate(scheme(), file);
    EXPECT_EQ(r.exact, want["exact"].get<std::size_t>());
    EXPECT_NEAR(*r.token_accuracy, frac(want["token_accuracy"]), 1e-12);
    EXPECT_NEAR(token_accuracy(scheme(), file), 0.7, 1e-12);
    EXPECT_NEAR(*r.macro_f1, frac(want["macro_f1"]), 1e-12);
    EXPECT_NEAR(*r.micro_f1, frac(want["micro_f1"]), 1e-12);
    for (auto c : kCategories) {
        const auto& w = want["categories"][std::string(category_name(c))];
        const auto& got = r.categories[index_of(c)];
        EXPECT_EQ(got.tp, w["tp"].get<std::size_t>()) << category_name(c);
        EXPECT_EQ(got.fp, w["fp"].get<std::size_t>()) << category_name(c);
        EXPECT_EQ(got.fn, w["fn"].get<std::size_t>()) << category_name(c);
        EXPECT_NEAR(*r.category_f1(c), frac(w["f1"]), 1e-12) << category_name(c);
    }
    const auto pairs = misprediction_pairs(scheme(), file, 10);
    ASSERT_EQ(pairs.size(), want["pairs"].size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        EXPECT_EQ(pairs[i].gold, want["pairs"][i][0].get<std::string>());
        EXPECT_EQ(pairs[i].pred, want["pairs"][i][1].get<std::string>());
        EXPECT_EQ(pairs[i].count, want["pairs"][i][2].get<std::size_t>());
    }
    EXPECT_EQ(misprediction_pairs(scheme(), file, 2).size(), 2u);
}

TEST(Metrics, ValueAveragingMatchesDirectCount) {
    const auto file = metrics_fixture();
    std::map<std::string, F1Counts> per_value;
    for (const auto& s : file.sentences)
        for (const auto& t : s.tokens) {
            const auto gold = TagScheme::values_of(t.gold);
            for (auto g : gold) {
                const bool hit = std::find(t.pred.values.begin(), t.pred.values.end(), g) != t.pred.values.end();
                ++(hit ? per_value[scheme().value_name(g)].tp : per_value[scheme().value_name(g)].fn);
            }
            for (auto p : t.pred.values)
                if (std::find(gold.begin(), gold.end(), p) == gold.end()) ++per_value[scheme().value_name(p)].fp;
        }
    double sum = 0;
    std::size_t n = 0;
    for (const auto& [name, c] : per_value)
        if (c.tp + c.fn > 0) {
            sum += 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn);
            ++n;
        }
    const auto r = evaluate(scheme(), file, {Averaging::Value, 1});
    EXPECT_NEAR(*r.macro_f1, sum / n, 1e-12);
    EXPECT_NEAR(*r.micro_f1, *evaluate(scheme(), file).micro_f1, 1e-15);
}

TEST(Metrics, PerfectPredictions) {
    const auto corpus = support::load_fixture("overfit20.tsv");
    const auto r = evaluate(scheme(), perfect(corpus));
    EXPECT_EQ(*r.token_accuracy, 1.0);
    EXPECT_EQ(*r.macro_f1, 1.0);
    EXPECT_EQ(*r.micro_f1, 1.0);
    EXPECT_TRUE(misprediction_pairs(scheme(), perfect(corpus), 25).empty());
}

TEST(Metrics, CaseOnlyErrorIsNotExact) {
    const auto f = parse("vanam\tNoun|acc|sg|n|a\tNoun|nom|sg|n|a\n");
    EXPECT_EQ(token_accuracy(scheme(), f), 0.0);
    EXPECT_EQ(*evaluate(scheme(), f).category_f1(Category::Number), 1.0);
}

TEST(Metrics, OmittingGenderOnlyHurtsGender) {
    auto file = perfect(support::load_fixture("overfit20.tsv"));
    const auto gender = [](ValueId v) { return scheme().category_of(v) == Category::Gender; };
    for (auto& s : file.sentences)
        for (auto& t : s.tokens) {
            auto vals = t.pred.values;
            vals.erase(std::remove_if(vals.begin(), vals.end(), gender), vals.end());
            t.pred = assemble(scheme(), vals);
        }
    const auto r = evaluate(scheme(), file);
    EXPECT_EQ(*r.category_f1(Category::Gender), 0.0);
    for (auto c : kCategories)
        if (c != Category::Gender && r.categories[index_of(c)].support() > 0) {
            EXPECT_EQ(*r.category_f1(c), 1.0);
        }
}

TEST(Metrics, InvariantUnderReorderingAndJobs) {
    auto file = metrics_fixture();
    const auto base = metrics_to_json(evaluate(scheme(), file));
    std::reverse(file.sentences.begin(), file.sentences.end());
    EXPECT_EQ(metrics_to_json(evaluate(scheme(), file)), base);
    for (std::size_t jobs : {2u, 3u, 16u}) EXPECT_EQ(metrics_to_json(evaluate(scheme(), file, {Averaging::Category, jobs})), base);
}

TEST(Metrics, EmptyFileHasNoScores) {
    const auto r = evaluate(scheme(), PredictionFile{});
    EXPECT_FALSE(r.token_accuracy.has_value());
    EXPECT_FALSE(r.macro_f1.has_value());
    EXPECT_THROW(token_accuracy(scheme(), PredictionFile{}), std::invalid_argument);
    EXPECT_TRUE(metrics_to_json(r)["macro_f1"].is_null());
}

TEST(Metrics, Misalignment) {
    const auto corpus = support::load_fixture("two_sentences.tsv");
    std::vector<std::vector<TagPrediction>> preds(1);
    EXPECT_THROW(align(corpus, preds), MisalignedError);
    preds.resize(2);
    EXPECT_THROW(align(corpus, preds), MisalignedError);
    EXPECT_THROW(parse("a\tCompound|a\n"), MisalignedError);
    EXPECT_THROW(parse("a\tCompound|a\tCompound|a\tx\n"), MisalignedError);
    EXPECT_THROW(parse("a\tCompound|a\tINVALID:bogus\n"), CorpusError);
}

TEST(PredictionIo, RoundTrip) {
    const auto file = metrics_fixture();
    std::ostringstream out;
    write_predictions(out, file, scheme());
    const auto back = parse(out.str());
    std::ostringstream again;
    write_predictions(again, back, scheme());
    EXPECT_EQ(out.str(), again.str());
    EXPECT_EQ(back.sentences.size(), 2u);
    EXPECT_NE(out.str().find("INVALID:nom+pl"), std::string::npos);
}

TEST(Pairs, CountsOrderAndTotals) {
    std::string text;
    for (int i = 0; i < 3; ++i) text += "devaḥ\tNoun|nom|sg|m|a\tNoun|voc|sg|m|a\n";
    text += "devāḥ\tNoun|nom|sg|m|a\tNoun|nom|pl|m|a\n";
    text += "rāmaḥ\tNoun|nom|sg|m|a\tNoun|nom|sg|m|a\n";
    const auto f = parse(text);
    const auto pairs = misprediction_pairs(scheme(), f, 25);
    ASSERT_EQ(pairs.size(), 2u);
    EXPECT_EQ(pairs[0], (LabelPair{"Noun|nom|sg|m|a", "Noun|voc|sg|m|a", 3}));
    EXPECT_EQ(pairs[1].pred, "Noun|nom|pl|m|a");

    const auto file = metrics_fixture();
    std::size_t total = 0;
    for (const auto& p : misprediction_pairs(scheme(), file, 0)) total += p.count;
    EXPECT_EQ(total + evaluate(scheme(), file).exact, file.token_count());
}

TEST(Syncretism, HandComputedSubset) {
    const auto file = parse(
        "devaḥ\tNoun|nom|sg|m|a\tNoun|voc|sg|m|a\n"
        "devaḥ\tNoun|voc|sg|m|a\tNoun|voc|sg|m|a\n"
        "devaḥ\tNoun|nom|sg|m|a\tNoun|nom|sg|m|a\n"
        "vanam\tNoun|acc|sg|n|a\tNoun|nom|sg|n|a\n"
        "gacchati\tFiniteVerb|present|sg|3rd\tFiniteVerb|present|sg|2nd\n");
    Corpus ref;
    ref.sentences.push_back({{Token{"vanam", scheme().parse_label("Noun|nom|sg|n|a")}}});
    for (const auto& s : file.sentences) {
        Sentence copy;
        for (const auto& t : s.tokens) copy.tokens.push_back({t.surface, t.gold});
        ref.sentences.push_back(copy);
    }
    const auto idx = SyncretismIndex::build(ref, scheme());
    const std::vector<LabelPair> top{{"Noun|nom|sg|m|a", "Noun|voc|sg|m|a", 1}};
    // tokens 1 and 3 qualify: Case tp 1 fp 1 fn 1, Number/Gender/LastChar perfect
    const auto r = syncretism_f1(scheme(), file, idx, top);
    EXPECT_EQ(r.tokens, 2u);
    EXPECT_NEAR(*r.macro_f1, (0.5 + 1 + 1 + 1) / 4.0, 1e-12);
    EXPECT_NEAR(*r.exact_match, 0.5, 1e-12);

    const auto none = syncretism_f1(scheme(), file, SyncretismIndex::build(Corpus{}, scheme()), top);
    EXPECT_EQ(none.tokens, 0u);
    EXPECT_FALSE(none.macro_f1.has_value());
    EXPECT_TRUE(restricted_to_json(none)["macro_f1"].is_null());
}

TEST(Syncretism, AllCorrectScoresOne) {
    const auto file = parse(
        "devaḥ\tNoun|nom|sg|m|a\tNoun|nom|sg|m|a\n"
        "devaḥ\tNoun|voc|sg|m|a\tNoun|voc|sg|m|a\n");
    Corpus ref;
    ref.sentences.push_back({{Token{"devaḥ", scheme().parse_label("Noun|nom|sg|m|a")},
                              Token{"devaḥ", scheme().parse_label("Noun|voc|sg|m|a")}}});
    const std::vector<LabelPair> top{{"Noun|nom|sg|m|a", "Noun|voc|sg|m|a", 4}, {"Noun|voc|sg|m|a", "Noun|nom|sg|m|a", 2}};
    const auto r = syncretism_f1(scheme(), file, SyncretismIndex::build(ref, scheme()), top);
    EXPECT_EQ(r.tokens, 2u);
    EXPECT_EQ(*r.macro_f1, 1.0);
}

TEST(Unseen, HandComputedSubset) {
    const auto file = parse(
        "rāmaḥ\tNoun|nom|sg|m|a\tNoun|voc|sg|m|a\n"
        "vanam\tNoun|acc|sg|n|a\tNoun|nom|sg|n|a\n"
        "punar\tOthers|adverb\tOthers|adverb\n");
    const std::set<std::string> train{"Noun|nom|sg|m|a"};
    const auto r = unseen_report(scheme(), file, train);
    EXPECT_EQ(r.tokens, 2u);
    EXPECT_NEAR(*r.macro_f1, (0.0 + 1 + 1 + 1 + 1) / 5.0, 1e-12);  // Case has no true positive
    EXPECT_NEAR(*r.exact_match, 0.5, 1e-12);
    const auto all_seen = unseen_report(scheme(), file, {"Noun|nom|sg|m|a", "Noun|acc|sg|n|a", "Others|adverb"});
    EXPECT_FALSE(all_seen.macro_f1.has_value());
    EXPECT_FALSE(all_seen.exact_match.has_value());
}

TEST(TTest, MatchesHighPrecisionReference) {
    for (const auto& ref : ttest_references()) {
        const std::vector<double> zeros(ref.differences.size(), 0.0);
        const auto r = paired_ttest(ref.differences, zeros);
        EXPECT_NEAR(r.t, ref.t, 1e-6);
        EXPECT_NEAR(r.p, ref.p, 1e-6);
        EXPECT_NEAR(r.p, ref.p, 1e-9 * ref.p + 1e-14);
        EXPECT_FALSE(r.degenerate);
    }
}

TEST(TTest, IdenticalInputsAndDegenerateDifferences) {
    const std::vector<double> a{0.3, 0.5, 0.9, 0.1};
    const auto same = paired_ttest(a, a);
    EXPECT_EQ(same.t, 0.0);
    EXPECT_EQ(same.p, 1.0);
    const std::vector<double> ones{1, 1, 1, 1}, zeros(4, 0.0);
    const auto deg = paired_ttest(ones, zeros);
    EXPECT_TRUE(deg.degenerate);
    EXPECT_EQ(deg.p, 0.0);
    EXPECT_TRUE(std::isinf(deg.t));
    EXPECT_EQ(ttest_to_json(deg)["t"], "inf");
    EXPECT_THROW(paired_ttest(ones, std::vector<double>{1, 2}), std::invalid_argument);
    EXPECT_THROW(paired_ttest(std::vector<double>{1}, std::vector<double>{0}), std::invalid_argument);
}

TEST(TTest, SwappingArgumentsFlipsSign) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.below(30);
        std::vector<double> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = rng.uniform(0, 1);
            b[i] = rng.uniform(0, 1);
        }
        const auto ab = paired_ttest(a, b), ba = paired_ttest(b, a);
        EXPECT_NEAR(ab.t, -ba.t, 1e-12 * std::max(1.0, std::abs(ab.t)));
        EXPECT_NEAR(ab.p, ba.p, 1e-12);
        EXPECT_GE(ab.p, 0.0);
        EXPECT_LE(ab.p, 1.0);
    }
}

TEST(TTest, IncompleteBetaKnownValues) {
    EXPECT_NEAR(incomplete_beta(1, 1, 0.3), 0.3, 1e-14);
    EXPECT_NEAR(incomplete_beta(2, 3, 0.4), 0.5248, 1e-13);
    EXPECT_NEAR(student_t_two_tailed(0.0, 7), 1.0, 1e-14);
    // dof 1 is Cauchy: p = 1 - 2 atan(t) / pi
    EXPECT_NEAR(student_t_two_tailed(2.0, 1), 1.0 - 2.0 * std::atan(2.0) / std::acos(-1.0), 1e-12);
    EXPECT_THROW(incomplete_beta(1, 1, 1.5), std::domain_error);
}

TEST(SentenceScores, OnePerSentence) {
    const auto file = metrics_fixture();
    const auto s = sentence_macro_f1(scheme(), file);
    ASSERT_EQ(s.size(), 2u);
    // first sentence: only the Case confusion on "vanam"; Case tp 2 fp 1 fn 1
    EXPECT_NEAR(s[0], (1 + 4.0 / 6 + 1 + 1 + 1 + 1 + 1) / 7.0, 1e-12);
}
