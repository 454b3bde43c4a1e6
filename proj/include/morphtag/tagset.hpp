#pragma once

// Composite morphological tag algebra: grammatical categories, inflectional
// classes and their required categories, and the composite <-> monolithic
// label bijection.

#include <algorithm>
#include <array>
#include <bitset>
#include <compare>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace morphtag {

enum class Category : std::uint8_t { Tense, Case, Number, Gender, Person, LastChar, Other };
inline constexpr std::size_t kNumCategories = 7;
inline constexpr std::array<Category, kNumCategories> kCategories = {
    Category::Tense,  Category::Case,     Category::Number, Category::Gender,
    Category::Person, Category::LastChar, Category::Other,
};

enum class WordClass : std::uint8_t { Noun, FiniteVerb, Participle, Compound, Others };
inline constexpr std::size_t kNumClasses = 5;
inline constexpr std::array<WordClass, kNumClasses> kWordClasses = {
    WordClass::Noun, WordClass::FiniteVerb, WordClass::Participle, WordClass::Compound, WordClass::Others,
};

using CategorySet = std::bitset<kNumCategories>;

constexpr std::size_t index_of(Category c) noexcept { return static_cast<std::size_t>(c); }
constexpr std::size_t index_of(WordClass c) noexcept { return static_cast<std::size_t>(c); }

inline std::string_view category_name(Category c) {
    static constexpr std::array<std::string_view, kNumCategories> names = {
        "Tense", "Case", "Number", "Gender", "Person", "LastChar", "Other"};
    return names[index_of(c)];
}

inline char category_letter(Category c) {
    static constexpr std::array<char, kNumCategories> letters = {'T', 'C', 'N', 'G', 'P', 'L', 'O'};
    return letters[index_of(c)];
}

inline std::optional<Category> category_from_name(std::string_view name) {
    for (auto c : kCategories)
        if (category_name(c) == name) return c;
    return std::nullopt;
}

inline std::optional<Category> category_from_letter(char letter) {
    for (auto c : kCategories)
        if (category_letter(c) == letter) return c;
    return std::nullopt;
}

inline std::string_view class_name(WordClass c) {
    static constexpr std::array<std::string_view, kNumClasses> names = {"Noun", "FiniteVerb", "Participle",
                                                                        "Compound", "Others"};
    return names[index_of(c)];
}

inline std::optional<WordClass> class_from_name(std::string_view name) {
    for (auto c : kWordClasses)
        if (class_name(c) == name) return c;
    return std::nullopt;
}

/// Global feature-value index, unique across categories.
struct ValueId {
    std::uint16_t index = 0;
    friend auto operator<=>(const ValueId&, const ValueId&) = default;
};

/// Value counts per category and the category sets of each class.
inline constexpr std::array<std::size_t, kNumCategories> kCategorySizes = {18, 8, 3, 3, 3, 31, 5};
inline constexpr std::size_t kNumValues = 71;

inline CategorySet required_categories(WordClass c) {
    CategorySet s;
    auto set = [&](std::initializer_list<Category> cs) {
        for (auto x : cs) s.set(index_of(x));
    };
    switch (c) {
        case WordClass::Noun: set({Category::Case, Category::Number, Category::Gender, Category::LastChar}); break;
        case WordClass::FiniteVerb: set({Category::Tense, Category::Person, Category::Number}); break;
        case WordClass::Participle:
            set({Category::Tense, Category::Case, Category::Number, Category::Gender, Category::LastChar});
            break;
        case WordClass::Compound: set({Category::LastChar}); break;
        case WordClass::Others: set({Category::Other}); break;
    }
    return s;
}

struct CompositeTag {
    WordClass word_class = WordClass::Others;
    std::array<std::optional<ValueId>, kNumCategories> values{};

    std::optional<ValueId> operator[](Category c) const { return values[index_of(c)]; }
    friend bool operator==(const CompositeTag&, const CompositeTag&) = default;
};

class TagError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class TagErrorKind { None, UnknownValue, DuplicateCategory, Incomplete, OverComplete, BadClass, Empty };

struct CompositeParse {
    std::optional<CompositeTag> tag;
    TagErrorKind kind = TagErrorKind::None;
    std::string error;

    bool ok() const noexcept { return tag.has_value(); }
};

inline constexpr std::string_view kStartMarker = "<START>";
inline constexpr std::string_view kEndMarker = "<END>";
inline constexpr std::string_view kNaMarker = "<NA>";
inline constexpr std::string_view kInvalidLabel = "INVALID";

/// Positions of the markers and values in value_vocabulary().
inline constexpr std::size_t kStartSymbol = 0;
inline constexpr std::size_t kEndSymbol = 1;
inline constexpr std::size_t kNaSymbol = 2;
inline constexpr std::size_t kFirstValueSymbol = 3;
inline constexpr std::size_t kVocabularySize = kNumValues + kFirstValueSymbol;

/// Immutable categories/values/class constraints. Values are numbered category by
/// category in canonical order (T, C, N, G, P, L, O).
class TagScheme {
public:
    /// Validates exact category sizes, value-name uniqueness and class constraints.
    static TagScheme from_json(const nlohmann::json& doc) {
        TagScheme s;
        if (!doc.is_object() || !doc.contains("categories") || !doc.contains("classes"))
            throw TagError("scheme: expected object with 'categories' and 'classes'");
        std::array<std::optional<std::vector<std::string>>, kNumCategories> by_cat;
        for (const auto& cat : doc.at("categories")) {
            const auto name = cat.at("name").get<std::string>();
            auto c = category_from_name(name);
            if (!c) throw TagError("scheme: unknown category '" + name + "'");
            if (by_cat[index_of(*c)]) throw TagError("scheme: category '" + name + "' listed twice");
            by_cat[index_of(*c)] = cat.at("values").get<std::vector<std::string>>();
        }
        for (auto c : kCategories) {
            const auto& vals = by_cat[index_of(c)];
            if (!vals) throw TagError("scheme: missing category '" + std::string(category_name(c)) + "'");
            if (vals->size() != kCategorySizes[index_of(c)])
                throw TagError("scheme: category '" + std::string(category_name(c)) + "' has " +
                               std::to_string(vals->size()) + " values, expected " +
                               std::to_string(kCategorySizes[index_of(c)]));
            s.first_[index_of(c)] = s.names_.size();
            for (const auto& v : *vals) {
                check_value_name(v);
                if (s.lookup_.contains(v)) throw TagError("scheme: value '" + v + "' is not globally unique");
                s.lookup_.emplace(v, ValueId{static_cast<std::uint16_t>(s.names_.size())});
                s.names_.push_back(v);
                s.category_of_.push_back(c);
            }
        }
        std::array<bool, kNumClasses> seen{};
        for (const auto& cls : doc.at("classes")) {
            const auto name = cls.at("name").get<std::string>();
            auto wc = class_from_name(name);
            if (!wc) throw TagError("scheme: unknown class '" + name + "'");
            if (seen[index_of(*wc)]) throw TagError("scheme: class '" + name + "' listed twice");
            seen[index_of(*wc)] = true;
            CategorySet set;
            for (const auto& cn : cls.at("categories").get<std::vector<std::string>>()) {
                auto c = category_from_name(cn);
                if (!c) throw TagError("scheme: class '" + name + "' names unknown category '" + cn + "'");
                set.set(index_of(*c));
            }
            if (set != required_categories(*wc))
                throw TagError("scheme: class '" + name + "' has categories that differ from the tagset definition");
        }
        for (auto wc : kWordClasses)
            if (!seen[index_of(wc)]) throw TagError("scheme: missing class '" + std::string(class_name(wc)) + "'");
        s.source_ = doc;
        return s;
    }

    static TagScheme load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open scheme file: " + path);
        nlohmann::json doc;
        try {
            in >> doc;
        } catch (const nlohmann::json::exception& e) {
            throw TagError("scheme " + path + ": " + e.what());
        }
        return from_json(doc);
    }

    /// Placeholder value names satisfying the tagset counts.
    static TagScheme standard() { return from_json(standard_json()); }

    static nlohmann::json standard_json() {
        using V = std::vector<std::string>;
        nlohmann::json doc;
        doc["categories"] = nlohmann::json::array({
            {{"name", "Tense"},
             {"values", V{"present", "imperfect", "perfect", "aorist", "future", "periphrastic_future",
                          "conditional", "optative", "imperative", "benedictive", "injunctive", "subjunctive",
                          "past_participle", "past_active_participle", "present_participle", "future_participle",
                          "perfect_participle", "gerundive"}}},
            {{"name", "Case"}, {"values", V{"nom", "acc", "ins", "dat", "abl", "gen", "loc", "voc"}}},
            {{"name", "Number"}, {"values", V{"sg", "du", "pl"}}},
            {{"name", "Gender"}, {"values", V{"m", "f", "n"}}},
            {{"name", "Person"}, {"values", V{"1st", "2nd", "3rd"}}},
            {{"name", "LastChar"},
             {"values", V{"a", "ā", "i", "ī", "u", "ū", "ṛ", "e", "ai", "o", "au", "k", "g", "c", "j", "ṭ",
                          "ḍ", "ṇ", "t", "d", "p", "b", "bh", "y", "r", "l", "v", "ś", "ṣ", "s", "h"}}},
            {{"name", "Other"}, {"values", V{"infinitive", "absolutive", "indeclinable", "adverb", "interjection"}}},
        });
        nlohmann::json classes = nlohmann::json::array();
        for (auto wc : kWordClasses) {
            V cats;
            for (auto c : kCategories)
                if (required_categories(wc).test(index_of(c))) cats.emplace_back(category_name(c));
            classes.push_back({{"name", std::string(class_name(wc))}, {"categories", cats}});
        }
        doc["classes"] = classes;
        return doc;
    }

    const nlohmann::json& to_json() const noexcept { return source_; }

    std::size_t value_count() const noexcept { return names_.size(); }
    std::size_t category_size(Category c) const noexcept { return kCategorySizes[index_of(c)]; }
    Category category_of(ValueId v) const { return category_of_.at(v.index); }
    const std::string& value_name(ValueId v) const { return names_.at(v.index); }
    std::size_t local_index(ValueId v) const { return v.index - first_[index_of(category_of(v))]; }

    ValueId value_at(Category c, std::size_t local) const {
        if (local >= category_size(c)) throw std::out_of_range("value_at: index out of range");
        return ValueId{static_cast<std::uint16_t>(first_[index_of(c)] + local)};
    }

    std::optional<ValueId> find_value(std::string_view name) const {
        auto it = lookup_.find(std::string(name));
        if (it == lookup_.end()) return std::nullopt;
        return it->second;
    }

    ValueId value(std::string_view name) const {
        if (auto v = find_value(name)) return *v;
        throw TagError("unknown value '" + std::string(name) + "'");
    }

    /// Number of distinct composite tags for a class: product of its category sizes.
    std::size_t label_space_size(WordClass wc) const {
        std::size_t n = 1;
        const auto req = required_categories(wc);
        for (auto c : kCategories)
            if (req.test(index_of(c))) n *= category_size(c);
        return n;
    }

    std::size_t total_label_space() const {
        std::size_t n = 0;
        for (auto wc : kWordClasses) n += label_space_size(wc);
        return n;
    }

    /// Markers START, END, NA followed by every value in global order (74 entries).
    std::vector<std::string> value_vocabulary() const {
        std::vector<std::string> vocab = {std::string(kStartMarker), std::string(kEndMarker),
                                          std::string(kNaMarker)};
        vocab.insert(vocab.end(), names_.begin(), names_.end());
        return vocab;
    }

    /// "Class|v1|v2|..." with values in canonical category order.
    std::string to_monolithic(const CompositeTag& tag) const {
        std::string out(class_name(tag.word_class));
        for (auto c : kCategories) {
            if (auto v = tag[c]) {
                out += '|';
                out += value_name(*v);
            }
        }
        return out;
    }

    /// Builds a tag from an unordered value multiset; the class is recovered from
    /// the set of categories present.
    CompositeParse parse_composite(std::span<const ValueId> values) const {
        CompositeParse r;
        if (values.empty()) {
            r.kind = TagErrorKind::Empty;
            r.error = "empty: no feature values";
            return r;
        }
        CompositeTag tag;
        CategorySet present;
        for (ValueId v : values) {
            if (v.index >= names_.size()) {
                r.kind = TagErrorKind::UnknownValue;
                r.error = "unknown value index " + std::to_string(v.index);
                return r;
            }
            const Category c = category_of(v);
            if (present.test(index_of(c))) {
                r.kind = TagErrorKind::DuplicateCategory;
                r.error = "duplicate category: " + std::string(category_name(c)) + " given '" +
                          value_name(*tag[c]) + "' and '" + value_name(v) + "'";
                return r;
            }
            present.set(index_of(c));
            tag.values[index_of(c)] = v;
        }
        std::optional<WordClass> best;
        for (auto wc : kWordClasses) {
            const auto req = required_categories(wc);
            if (req == present) {
                tag.word_class = wc;
                r.tag = tag;
                return r;
            }
            if ((req & present) == present && (!best || req.count() < required_categories(*best).count())) best = wc;
        }
        if (best) {
            r.kind = TagErrorKind::Incomplete;
            r.error = "incomplete: " + std::string(class_name(*best)) + " missing ";
            const auto missing = required_categories(*best) & ~present;
            bool first = true;
            for (auto c : kCategories) {
                if (!missing.test(index_of(c))) continue;
                if (!first) r.error += ", ";
                r.error += category_name(c);
                first = false;
            }
            return r;
        }
        r.kind = TagErrorKind::OverComplete;
        r.error = "over-complete: no class requires exactly {";
        bool first = true;
        for (auto c : kCategories) {
            if (!present.test(index_of(c))) continue;
            if (!first) r.error += ", ";
            r.error += category_name(c);
            first = false;
        }
        r.error += "}";
        return r;
    }

    CompositeParse parse_composite(std::span<const std::string> names) const {
        std::vector<ValueId> ids;
        for (const auto& n : names) {
            auto v = find_value(n);
            if (!v) {
                CompositeParse r;
                r.kind = TagErrorKind::UnknownValue;
                r.error = "unknown value '" + n + "'";
                return r;
            }
            ids.push_back(*v);
        }
        return parse_composite(std::span<const ValueId>(ids));
    }

    /// Parses "Class|v1|...". The class must agree with the value categories.
    CompositeParse try_parse_label(std::string_view label) const {
        CompositeParse r;
        std::vector<std::string> parts;
        std::size_t start = 0;
        while (true) {
            const auto bar = label.find('|', start);
            parts.emplace_back(label.substr(start, bar == std::string_view::npos ? std::string_view::npos : bar - start));
            if (bar == std::string_view::npos) break;
            start = bar + 1;
        }
        auto wc = class_from_name(parts.front());
        if (!wc) {
            r.kind = TagErrorKind::BadClass;
            r.error = "unknown class '" + parts.front() + "'";
            return r;
        }
        r = parse_composite(std::span<const std::string>(parts).subspan(1));
        if (!r.ok()) return r;
        if (r.tag->word_class != *wc) {
            r.kind = TagErrorKind::BadClass;
            r.error = "class mismatch: label says " + parts.front() + " but values form " +
                      std::string(class_name(r.tag->word_class));
            r.tag.reset();
            return r;
        }
        // Canonical order is required so that string equality matches tag equality.
        if (to_monolithic(*r.tag) != label) {
            r.kind = TagErrorKind::BadClass;
            r.error = "values not in canonical category order: '" + std::string(label) + "'";
            r.tag.reset();
        }
        return r;
    }

    CompositeTag parse_label(std::string_view label) const {
        auto r = try_parse_label(label);
        if (!r.ok()) throw TagError(r.error);
        return *r.tag;
    }

    /// Tag with the given values (by name); throws on any constraint violation.
    CompositeTag make_tag(std::initializer_list<std::string_view> names) const {
        std::vector<std::string> owned(names.begin(), names.end());
        auto r = parse_composite(std::span<const std::string>(owned));
        if (!r.ok()) throw TagError(r.error);
        return *r.tag;
    }

    /// Values of a tag in canonical category order.
    static std::vector<ValueId> values_of(const CompositeTag& tag) {
        std::vector<ValueId> out;
        for (auto c : kCategories)
            if (auto v = tag[c]) out.push_back(*v);
        return out;
    }

    friend bool operator==(const TagScheme& a, const TagScheme& b) { return a.names_ == b.names_; }

private:
    static void check_value_name(const std::string& v) {
        if (v.empty()) throw TagError("scheme: empty value name");
        if (v.find_first_of("|+\t\n\r ") != std::string::npos)
            throw TagError("scheme: value '" + v + "' contains a reserved character");
        if (v == kStartMarker || v == kEndMarker || v == kNaMarker || v == kInvalidLabel ||
            class_from_name(v).has_value())
            throw TagError("scheme: value '" + v + "' collides with a reserved name");
    }

    std::vector<std::string> names_;
    std::vector<Category> category_of_;
    std::array<std::size_t, kNumCategories> first_{};
    std::unordered_map<std::string, ValueId> lookup_;
    nlohmann::json source_;
};

/// Decoder output: raw values plus the composite tag when they form a valid one.
struct TagPrediction {
    std::vector<ValueId> values;
    std::optional<CompositeTag> tag;

    bool valid() const noexcept { return tag.has_value(); }
};

/// Never repairs: invalid value sets are kept verbatim with no tag.
inline TagPrediction assemble(const TagScheme& scheme, std::vector<ValueId> values) {
    auto parsed = scheme.parse_composite(std::span<const ValueId>(values));
    return {std::move(values), parsed.tag};
}

inline TagPrediction prediction_of(const CompositeTag& tag) { return {TagScheme::values_of(tag), tag}; }

/// Monolithic label for valid predictions, "INVALID:v1+v2+..." otherwise.
inline std::string prediction_label(const TagScheme& scheme, const TagPrediction& p) {
    if (p.tag) return scheme.to_monolithic(*p.tag);
    std::string out(kInvalidLabel);
    out += ':';
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        if (i) out += '+';
        out += scheme.value_name(p.values[i]);
    }
    return out;
}

/// Inverse of prediction_label.
inline TagPrediction parse_prediction_label(const TagScheme& scheme, std::string_view label) {
    const std::string prefix = std::string(kInvalidLabel) + ":";
    if (label.substr(0, prefix.size()) == prefix) {
        std::vector<ValueId> values;
        std::string_view rest = label.substr(prefix.size());
        while (!rest.empty()) {
            const auto plus = rest.find('+');
            values.push_back(scheme.value(rest.substr(0, plus)));
            if (plus == std::string_view::npos) break;
            rest = rest.substr(plus + 1);
        }
        auto parsed = scheme.parse_composite(std::span<const ValueId>(values));
        if (parsed.ok()) throw TagError("prediction '" + std::string(label) + "' is marked INVALID but forms a valid tag");
        return {std::move(values), std::nullopt};
    }
    return prediction_of(scheme.parse_label(label));
}

/// Per-category label index used by factorised heads: value's local index, or the
/// category size for NA (category absent from the tag's class).
inline std::array<std::size_t, kNumCategories> category_labels(const TagScheme& scheme, const CompositeTag& tag) {
    std::array<std::size_t, kNumCategories> out{};
    for (auto c : kCategories) {
        auto v = tag[c];
        out[index_of(c)] = v ? scheme.local_index(*v) : scheme.category_size(c);
    }
    return out;
}

/// Inverse of category_labels for one category; NA yields nothing.
inline std::optional<ValueId> category_value(const TagScheme& scheme, Category c, std::size_t label) {
    if (label >= scheme.category_size(c)) return std::nullopt;
    return scheme.value_at(c, label);
}

}  // namespace morphtag
