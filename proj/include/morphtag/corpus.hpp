#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "morphtag/numeric.hpp"
#include "morphtag/tagset.hpp"

namespace morphtag {

struct Token {
    std::string surface;
    CompositeTag gold;
};

struct Sentence {
    std::vector<Token> tokens;

    std::size_t size() const noexcept { return tokens.size(); }
};

struct Corpus {
    std::vector<Sentence> sentences;

    std::size_t size() const noexcept { return sentences.size(); }
    bool empty() const noexcept { return sentences.empty(); }
    std::size_t token_count() const {
        std::size_t n = 0;
        for (const auto& s : sentences) n += s.size();
        return n;
    }
};

class CorpusError : public std::runtime_error {
public:
    CorpusError(const std::string& source, std::size_t line, const std::string& cause)
        : std::runtime_error(source + ":" + std::to_string(line) + ": " + cause), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// ---------------------------------------------------------------------------
// UTF-8
// ---------------------------------------------------------------------------

/// Decodes UTF-8 into code points; malformed bytes decode as U+FFFD.
inline std::u32string utf8_decode(std::string_view s) {
    std::u32string out;
    for (std::size_t i = 0; i < s.size();) {
        const auto b = static_cast<unsigned char>(s[i]);
        int len = b < 0x80 ? 1 : (b >> 5) == 0x6 ? 2 : (b >> 4) == 0xE ? 3 : (b >> 3) == 0x1E ? 4 : 0;
        if (len == 0 || i + len > s.size()) {
            out.push_back(0xFFFD);
            ++i;
            continue;
        }
        char32_t cp = len == 1 ? b : (b & (0x7F >> len));
        bool ok = true;
        for (int k = 1; k < len; ++k) {
            const auto cb = static_cast<unsigned char>(s[i + k]);
            if ((cb >> 6) != 0x2) ok = false;
            cp = (cp << 6) | (cb & 0x3F);
        }
        out.push_back(ok ? cp : char32_t{0xFFFD});
        i += ok ? len : 1;
    }
    return out;
}

inline std::string utf8_encode(char32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return out;
}

// ---------------------------------------------------------------------------
// TSV corpus format: "surface<TAB>monolithic-label" per line, blank line between
// sentences, '#' lines ignored.
// ---------------------------------------------------------------------------

inline Corpus read_tsv(std::istream& in, const TagScheme& scheme, const std::string& source = "<stream>") {
    Corpus corpus;
    Sentence current;
    std::string line;
    std::size_t lineno = 0;
    auto flush = [&] {
        if (!current.tokens.empty()) corpus.sentences.push_back(std::move(current));
        current = Sentence{};
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            flush();
            continue;
        }
        if (line.front() == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw CorpusError(source, lineno, "expected surface<TAB>label");
        if (line.find('\t', tab + 1) != std::string::npos)
            throw CorpusError(source, lineno, "expected exactly two tab-separated columns");
        Token tok;
        tok.surface = line.substr(0, tab);
        if (tok.surface.empty()) throw CorpusError(source, lineno, "empty surface form");
        auto parsed = scheme.try_parse_label(std::string_view(line).substr(tab + 1));
        if (!parsed.ok()) throw CorpusError(source, lineno, parsed.error);
        tok.gold = *parsed.tag;
        current.tokens.push_back(std::move(tok));
    }
    flush();
    return corpus;
}

inline Corpus load_tsv(const std::string& path, const TagScheme& scheme) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path);
    return read_tsv(in, scheme, path);
}

/// Normalized form: one token per line, a single blank line between sentences.
inline void write_tsv(std::ostream& out, const Corpus& corpus, const TagScheme& scheme) {
    for (std::size_t s = 0; s < corpus.sentences.size(); ++s) {
        if (s) out << '\n';
        for (const auto& tok : corpus.sentences[s].tokens) out << tok.surface << '\t' << scheme.to_monolithic(tok.gold) << '\n';
    }
}

inline void save_tsv(const std::string& path, const Corpus& corpus, const TagScheme& scheme) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write corpus file: " + path);
    write_tsv(out, corpus, scheme);
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Word and character indices; index 0 is UNK in both.
class Vocab {
public:
    static constexpr std::size_t kUnk = 0;

    /// Words below `min_word_freq` map to UNK; every seen character is kept.
    static Vocab build(const Corpus& corpus, std::size_t min_word_freq = 2) {
        Vocab v;
        std::map<std::string, std::size_t> freq;
        std::set<char32_t> chars;
        for (const auto& s : corpus.sentences)
            for (const auto& t : s.tokens) {
                ++freq[t.surface];
                for (char32_t c : utf8_decode(t.surface)) chars.insert(c);
            }
        v.words_.push_back("<UNK>");
        v.word_freq_.push_back(0);
        for (const auto& [w, n] : freq) {
            if (n >= min_word_freq) {
                v.word_index_.emplace(w, v.words_.size());
                v.words_.push_back(w);
                v.word_freq_.push_back(n);
            } else {
                v.word_freq_[kUnk] += n;
            }
        }
        v.chars_.push_back(0);
        for (char32_t c : chars) {
            v.char_index_.emplace(c, v.chars_.size());
            v.chars_.push_back(c);
        }
        return v;
    }

    std::size_t word_count() const noexcept { return words_.size(); }
    std::size_t char_count() const noexcept { return chars_.size(); }
    std::size_t frequency(std::size_t word) const { return word_freq_.at(word); }
    const std::string& word(std::size_t i) const { return words_.at(i); }

    std::size_t word_id(const std::string& w) const {
        auto it = word_index_.find(w);
        return it == word_index_.end() ? kUnk : it->second;
    }

    std::size_t char_id(char32_t c) const {
        auto it = char_index_.find(c);
        return it == char_index_.end() ? kUnk : it->second;
    }

    std::vector<std::size_t> char_ids(std::string_view surface) const {
        std::vector<std::size_t> ids;
        for (char32_t c : utf8_decode(surface)) ids.push_back(char_id(c));
        return ids;
    }

    nlohmann::json to_json() const {
        std::vector<std::string> chars;
        for (std::size_t i = 1; i < chars_.size(); ++i) chars.push_back(utf8_encode(chars_[i]));
        return {{"words", std::vector<std::string>(words_.begin() + 1, words_.end())},
                {"word_freq", word_freq_},
                {"chars", chars}};
    }

    static Vocab from_json(const nlohmann::json& j) {
        Vocab v;
        v.words_.push_back("<UNK>");
        for (const auto& w : j.at("words").get<std::vector<std::string>>()) {
            v.word_index_.emplace(w, v.words_.size());
            v.words_.push_back(w);
        }
        v.word_freq_ = j.at("word_freq").get<std::vector<std::size_t>>();
        if (v.word_freq_.size() != v.words_.size()) throw std::invalid_argument("vocab: word_freq length mismatch");
        v.chars_.push_back(0);
        for (const auto& c : j.at("chars").get<std::vector<std::string>>()) {
            auto cps = utf8_decode(c);
            if (cps.size() != 1) throw std::invalid_argument("vocab: character entry is not a single code point");
            v.char_index_.emplace(cps[0], v.chars_.size());
            v.chars_.push_back(cps[0]);
        }
        return v;
    }

private:
    std::vector<std::string> words_;
    std::vector<std::size_t> word_freq_;
    std::unordered_map<std::string, std::size_t> word_index_;
    std::vector<char32_t> chars_;
    std::unordered_map<char32_t, std::size_t> char_index_;
};

// ---------------------------------------------------------------------------
// Feature coverage and sampling
// ---------------------------------------------------------------------------

struct CoverageReport {
    std::size_t threshold = 1;
    std::vector<std::size_t> counts;  // indexed by ValueId
    std::vector<ValueId> deficient;

    bool passed() const noexcept { return deficient.empty(); }
};

inline std::vector<std::size_t> value_counts(const Corpus& corpus, const TagScheme& scheme) {
    std::vector<std::size_t> counts(scheme.value_count(), 0);
    for (const auto& s : corpus.sentences)
        for (const auto& t : s.tokens)
            for (auto v : t.gold.values)
                if (v) ++counts[v->index];
    return counts;
}

inline CoverageReport check_feature_coverage(const Corpus& corpus, const TagScheme& scheme, std::size_t threshold) {
    if (threshold < 1) throw std::invalid_argument("coverage threshold must be >= 1");
    CoverageReport r;
    r.threshold = threshold;
    r.counts = value_counts(corpus, scheme);
    for (std::size_t i = 0; i < r.counts.size(); ++i)
        if (r.counts[i] < threshold) r.deficient.push_back(ValueId{static_cast<std::uint16_t>(i)});
    return r;
}

inline nlohmann::json coverage_to_json(const CoverageReport& r, const TagScheme& scheme) {
    nlohmann::json counts = nlohmann::json::object();
    for (std::size_t i = 0; i < r.counts.size(); ++i)
        counts[scheme.value_name(ValueId{static_cast<std::uint16_t>(i)})] = r.counts[i];
    nlohmann::json deficient = nlohmann::json::array();
    for (auto v : r.deficient) deficient.push_back({{"value", scheme.value_name(v)}, {"count", r.counts[v.index]}});
    return {{"schema", "morphtag.coverage/1"},
            {"threshold", r.threshold},
            {"passed", r.passed()},
            {"counts", counts},
            {"deficient", deficient}};
}

/// Greedy coverage sampler: repeatedly takes the rarest still-deficient value and
/// adds the unused pool sentence that covers the most deficient occurrences of it.
/// Best effort; values absent from the pool stay deficient.
inline Corpus sample_for_coverage(const Corpus& pool, const TagScheme& scheme, std::size_t threshold,
                                  std::size_t max_sentences = 0) {
    std::vector<std::vector<std::size_t>> sent_counts;
    for (const auto& s : pool.sentences) {
        std::vector<std::size_t> c(scheme.value_count(), 0);
        for (const auto& t : s.tokens)
            for (auto v : t.gold.values)
                if (v) ++c[v->index];
        sent_counts.push_back(std::move(c));
    }
    std::vector<std::size_t> have(scheme.value_count(), 0);
    std::vector<char> used(pool.size(), 0);
    std::vector<std::size_t> chosen;
    while (max_sentences == 0 || chosen.size() < max_sentences) {
        std::optional<std::size_t> target;
        for (std::size_t v = 0; v < have.size(); ++v) {
            if (have[v] >= threshold) continue;
            bool available = false;
            for (std::size_t s = 0; s < pool.size() && !available; ++s) available = !used[s] && sent_counts[s][v] > 0;
            if (available && (!target || have[v] < have[*target])) target = v;
        }
        if (!target) break;
        std::size_t best = pool.size();
        std::size_t best_gain = 0;
        for (std::size_t s = 0; s < pool.size(); ++s) {
            if (used[s] || sent_counts[s][*target] == 0) continue;
            std::size_t gain = 0;
            for (std::size_t v = 0; v < have.size(); ++v)
                if (have[v] < threshold) gain += std::min(sent_counts[s][v], threshold - have[v]);
            if (best == pool.size() || gain > best_gain) {
                best = s;
                best_gain = gain;
            }
        }
        used[best] = 1;
        chosen.push_back(best);
        for (std::size_t v = 0; v < have.size(); ++v) have[v] += sent_counts[best][v];
    }
    std::sort(chosen.begin(), chosen.end());
    Corpus out;
    for (auto s : chosen) out.sentences.push_back(pool.sentences[s]);
    return out;
}

// ---------------------------------------------------------------------------
// Unseen-label split and syncretism index
// ---------------------------------------------------------------------------

inline std::set<std::string> label_set(const Corpus& corpus, const TagScheme& scheme) {
    std::set<std::string> labels;
    for (const auto& s : corpus.sentences)
        for (const auto& t : s.tokens) labels.insert(scheme.to_monolithic(t.gold));
    return labels;
}

/// Pool sentences containing at least one token whose monolithic label never occurs in train.
inline Corpus split_unseen(const Corpus& train, const Corpus& pool, const TagScheme& scheme) {
    const auto known = label_set(train, scheme);
    Corpus out;
    for (const auto& s : pool.sentences) {
        const bool novel = std::any_of(s.tokens.begin(), s.tokens.end(),
                                       [&](const Token& t) { return !known.contains(scheme.to_monolithic(t.gold)); });
        if (novel) out.sentences.push_back(s);
    }
    return out;
}

/// Surface form -> monolithic labels attested for it in a reference corpus.
class SyncretismIndex {
public:
    static SyncretismIndex build(const Corpus& reference, const TagScheme& scheme) {
        SyncretismIndex idx;
        for (const auto& s : reference.sentences)
            for (const auto& t : s.tokens) idx.forms_[t.surface].insert(scheme.to_monolithic(t.gold));
        return idx;
    }

    const std::set<std::string>* labels(const std::string& form) const {
        auto it = forms_.find(form);
        return it == forms_.end() ? nullptr : &it->second;
    }

    bool is_syncretic(const std::string& form) const {
        const auto* l = labels(form);
        return l && l->size() > 1;
    }

    std::size_t form_count() const noexcept { return forms_.size(); }
    const std::map<std::string, std::set<std::string>>& forms() const noexcept { return forms_; }

private:
    std::map<std::string, std::set<std::string>> forms_;
};

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

struct SynthOptions {
    std::size_t sentences = 20;
    std::size_t min_length = 3;
    std::size_t max_length = 8;
    /// When nonzero, generation continues past `sentences` until every value occurs this often.
    std::size_t min_value_count = 0;
    /// Prefixes per lexical class; small pools make word forms recur.
    std::size_t stems = 6;
    /// Nominative and vocative share their surface suffix (a classic syncretism).
    bool nom_voc_syncretism = true;
    std::uint64_t seed = 42;
};

namespace detail {

inline std::string value_code(const TagScheme& scheme, ValueId v, bool nom_voc_syncretism) {
    static constexpr std::string_view consonants = "kgcjtdnpbmyrlvsh";
    static constexpr std::string_view vowels = "aiueo";
    if (nom_voc_syncretism && scheme.value_name(v) == "voc")
        if (auto nom = scheme.find_value("nom")) v = *nom;
    std::string code;
    code += consonants[(v.index / vowels.size()) % consonants.size()];
    code += vowels[v.index % vowels.size()];
    return code;
}

}  // namespace detail

/// Generates a corpus whose surface forms are a stem plus per-value suffix codes,
/// so tags are recoverable from characters and (for syncretic cases) context.
/// Every word class appears; with min_value_count > 0 every value reaches that count.
inline Corpus synthesize_corpus(const TagScheme& scheme, const SynthOptions& opts) {
    if (opts.min_length == 0 || opts.max_length < opts.min_length)
        throw std::invalid_argument("synthesize_corpus: bad sentence length range");
    Rng rng(opts.seed);
    static constexpr std::array<std::string_view, 10> syllables = {"ra", "va", "dha", "ma", "pu",
                                                                   "ni", "ka", "su", "ja", "ti"};
    std::vector<std::string> prefixes;
    for (std::size_t i = 0; i < std::max<std::size_t>(opts.stems, 1); ++i) {
        std::string p(syllables[rng.below(syllables.size())]);
        p += syllables[rng.below(syllables.size())];
        prefixes.push_back(p);
    }

    std::vector<std::size_t> counts(scheme.value_count(), 0);
    auto pick_value = [&](Category c) {
        const std::size_t n = scheme.category_size(c);
        if (opts.min_value_count == 0) return scheme.value_at(c, rng.below(n));
        std::size_t lowest = counts[scheme.value_at(c, 0).index];
        for (std::size_t k = 1; k < n; ++k) lowest = std::min(lowest, counts[scheme.value_at(c, k).index]);
        std::vector<ValueId> candidates;
        for (std::size_t k = 0; k < n; ++k)
            if (counts[scheme.value_at(c, k).index] == lowest) candidates.push_back(scheme.value_at(c, k));
        return candidates[rng.below(candidates.size())];
    };
    auto covered = [&] {
        return opts.min_value_count == 0 ||
               std::all_of(counts.begin(), counts.end(), [&](std::size_t n) { return n >= opts.min_value_count; });
    };

    Corpus corpus;
    std::size_t token_index = 0;
    while (corpus.size() < opts.sentences || !covered()) {
        Sentence s;
        const std::size_t len = opts.min_length + rng.below(opts.max_length - opts.min_length + 1);
        for (std::size_t i = 0; i < len; ++i, ++token_index) {
            // Cycle classes for the first tokens so every class appears early.
            const WordClass wc = token_index < kNumClasses ? kWordClasses[token_index]
                                                            : kWordClasses[rng.below(kNumClasses)];
            CompositeTag tag;
            tag.word_class = wc;
            const auto req = required_categories(wc);
            for (auto c : kCategories)
                if (req.test(index_of(c))) tag.values[index_of(c)] = pick_value(c);
            for (auto v : tag.values)
                if (v) ++counts[v->index];

            std::string surface = prefixes[rng.below(prefixes.size())];
            if (auto lc = tag[Category::LastChar]) surface += scheme.value_name(*lc);
            for (auto c : kCategories) {
                if (c == Category::LastChar) continue;
                if (auto v = tag[c]) surface += detail::value_code(scheme, *v, opts.nom_voc_syncretism);
            }
            if (wc == WordClass::Compound) surface += "-";
            s.tokens.push_back({std::move(surface), tag});
        }
        corpus.sentences.push_back(std::move(s));
    }
    return corpus;
}

}  // namespace morphtag
