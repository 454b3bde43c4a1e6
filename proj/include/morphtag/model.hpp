#pragma once

// Tagger models behind one interface: MonSeq (chain CRF over monolithic labels),
// FCRF, Seq, and the multi-task CRF stacks MTL-Shared and MTL-Hierarchy.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "morphtag/corpus.hpp"
#include "morphtag/crf_chain.hpp"
#include "morphtag/encoder.hpp"
#include "morphtag/evalkit.hpp"
#include "morphtag/fcrf.hpp"
#include "morphtag/numeric.hpp"
#include "morphtag/seqgen.hpp"
#include "morphtag/tagset.hpp"

namespace morphtag {

enum class ModelKind { MonSeq, Fcrf, Seq, MtlShared, MtlHierarchy };
inline constexpr std::array<ModelKind, 5> kModelKinds = {ModelKind::MonSeq, ModelKind::Fcrf, ModelKind::Seq,
                                                         ModelKind::MtlShared, ModelKind::MtlHierarchy};

inline std::string_view kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::MonSeq: return "MonSeq";
        case ModelKind::Fcrf: return "FCRF";
        case ModelKind::Seq: return "Seq";
        case ModelKind::MtlShared: return "MTL-Shared";
        case ModelKind::MtlHierarchy: return "MTL-Hierarchy";
    }
    return "?";
}

inline std::optional<ModelKind> kind_from_name(std::string_view name) {
    auto lower = [](std::string_view s) {
        std::string out(s);
        for (char& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        return out;
    };
    for (auto k : kModelKinds)
        if (lower(kind_name(k)) == lower(name)) return k;
    return std::nullopt;
}

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Supervision levels, shallow to deep. "N-G-C-T-L" puts Number at level 1 and
/// LastChar at level 5; '+' groups categories on one level ("N+G-C"). Categories
/// that are not listed attach at the deepest level.
struct Hierarchy {
    std::string text;
    std::vector<CategorySet> levels;
    std::array<std::size_t, kNumCategories> level_of{};  // 0-based

    std::size_t depth() const noexcept { return levels.size(); }

    static Hierarchy parse(std::string_view text) {
        Hierarchy h;
        h.text = std::string(text);
        if (text.empty()) throw ConfigError("hierarchy: empty order string");
        CategorySet seen;
        std::size_t start = 0;
        while (start <= text.size()) {
            const auto dash = text.find('-', start);
            const auto level = text.substr(start, dash == std::string_view::npos ? std::string_view::npos : dash - start);
            if (level.empty()) throw ConfigError("hierarchy '" + h.text + "': empty level");
            CategorySet set;
            std::size_t pos = 0;
            while (pos < level.size()) {
                const auto plus = level.find('+', pos);
                const auto tok = level.substr(pos, plus == std::string_view::npos ? std::string_view::npos : plus - pos);
                if (tok.size() != 1) throw ConfigError("hierarchy '" + h.text + "': bad category '" + std::string(tok) + "'");
                auto c = category_from_letter(tok[0]);
                if (!c) throw ConfigError("hierarchy '" + h.text + "': unknown category letter '" + std::string(tok) + "'");
                if (seen.test(index_of(*c)))
                    throw ConfigError("hierarchy '" + h.text + "': category '" + std::string(tok) + "' listed twice");
                seen.set(index_of(*c));
                set.set(index_of(*c));
                if (plus == std::string_view::npos) break;
                pos = plus + 1;
                if (pos == level.size()) throw ConfigError("hierarchy '" + h.text + "': dangling '+'");
            }
            h.levels.push_back(set);
            if (dash == std::string_view::npos) break;
            start = dash + 1;
            if (start == text.size()) throw ConfigError("hierarchy '" + h.text + "': dangling '-'");
        }
        for (auto c : kCategories)
            if (!seen.test(index_of(c))) h.levels.back().set(index_of(c));
        for (std::size_t l = 0; l < h.levels.size(); ++l)
            for (auto c : kCategories)
                if (h.levels[l].test(index_of(c))) h.level_of[index_of(c)] = l;
        return h;
    }
};

inline constexpr std::string_view kDefaultHierarchy = "N-G-C-T-L";

struct ModelConfig {
    ModelKind kind = ModelKind::MtlHierarchy;
    EncoderConfig encoder;
    SeqDecoderConfig seq;
    std::string hierarchy = std::string(kDefaultHierarchy);
    std::vector<CategoryPair> fcrf_pairs = all_category_pairs();
    BpOptions bp;
    AdamOptions optimizer;
    std::size_t word_min_freq = 2;
    std::uint64_t seed = 42;

    nlohmann::json to_json() const {
        nlohmann::json pairs = nlohmann::json::array();
        for (const auto& [a, b] : fcrf_pairs) pairs.push_back(std::string{category_letter(a), category_letter(b)});
        return {{"kind", std::string(kind_name(kind))},
                {"encoder",
                 {{"word_dim", encoder.word_dim},
                  {"char_dim", encoder.char_dim},
                  {"char_hidden", encoder.char_hidden},
                  {"hidden", encoder.hidden},
                  {"layers", encoder.layers},
                  {"shortcut", encoder.shortcut}}},
                {"seq", {{"value_dim", seq.value_dim}, {"hidden", seq.hidden}, {"max_len", seq.max_len}}},
                {"hierarchy", hierarchy},
                {"fcrf_pairs", pairs},
                {"bp", {{"max_iters", bp.max_iters}, {"damping", bp.damping}, {"tol", bp.tol}}},
                {"optimizer",
                 {{"learning_rate", optimizer.learning_rate},
                  {"beta1", optimizer.beta1},
                  {"beta2", optimizer.beta2},
                  {"epsilon", optimizer.epsilon},
                  {"clip_norm", optimizer.clip_norm}}},
                {"word_min_freq", word_min_freq},
                {"seed", seed}};
    }

    /// Missing keys keep their defaults, so partial config files are accepted.
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        auto get = [](const nlohmann::json& obj, const char* key, auto& out) {
            if (obj.contains(key)) out = obj.at(key).get<std::decay_t<decltype(out)>>();
        };
        if (j.contains("kind")) {
            auto k = kind_from_name(j.at("kind").get<std::string>());
            if (!k) throw ConfigError("unknown model kind '" + j.at("kind").get<std::string>() + "'");
            c.kind = *k;
        }
        if (j.contains("encoder")) {
            const auto& e = j.at("encoder");
            get(e, "word_dim", c.encoder.word_dim);
            get(e, "char_dim", c.encoder.char_dim);
            get(e, "char_hidden", c.encoder.char_hidden);
            get(e, "hidden", c.encoder.hidden);
            get(e, "layers", c.encoder.layers);
            get(e, "shortcut", c.encoder.shortcut);
        }
        if (j.contains("seq")) {
            const auto& s = j.at("seq");
            get(s, "value_dim", c.seq.value_dim);
            get(s, "hidden", c.seq.hidden);
            get(s, "max_len", c.seq.max_len);
        }
        get(j, "hierarchy", c.hierarchy);
        if (j.contains("fcrf_pairs")) {
            c.fcrf_pairs.clear();
            for (const auto& p : j.at("fcrf_pairs")) {
                const auto s = p.get<std::string>();
                auto a = s.size() == 2 ? category_from_letter(s[0]) : std::nullopt;
                auto b = s.size() == 2 ? category_from_letter(s[1]) : std::nullopt;
                if (!a || !b || *a == *b) throw ConfigError("bad cotemporal pair '" + s + "'");
                c.fcrf_pairs.emplace_back(*a, *b);
            }
        }
        if (j.contains("bp")) {
            const auto& b = j.at("bp");
            get(b, "max_iters", c.bp.max_iters);
            get(b, "damping", c.bp.damping);
            get(b, "tol", c.bp.tol);
        }
        if (j.contains("optimizer")) {
            const auto& o = j.at("optimizer");
            get(o, "learning_rate", c.optimizer.learning_rate);
            get(o, "beta1", c.optimizer.beta1);
            get(o, "beta2", c.optimizer.beta2);
            get(o, "epsilon", c.optimizer.epsilon);
            get(o, "clip_norm", c.optimizer.clip_norm);
        }
        get(j, "word_min_freq", c.word_min_freq);
        get(j, "seed", c.seed);
        return c;
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    std::optional<double> dev_accuracy;
    std::optional<double> dev_macro_f1;
};

class TaggerModel {
public:
    /// Vocabulary and (for MonSeq) the label set come from the training corpus.
    static TaggerModel build(const ModelConfig& cfg, const Corpus& train, const TagScheme& scheme) {
        const auto labels = label_set(train, scheme);
        return build(cfg, Vocab::build(train, cfg.word_min_freq), scheme, {labels.begin(), labels.end()});
    }

    static TaggerModel build(const ModelConfig& cfg, Vocab vocab, const TagScheme& scheme,
                             std::vector<std::string> monolithic_labels) {
        TaggerModel m;
        m.cfg_ = cfg;
        m.scheme_ = std::make_shared<const TagScheme>(scheme);
        m.vocab_ = std::move(vocab);
        m.params_ = std::make_unique<ParameterSet>();
        Rng rng(cfg.seed);

        EncoderConfig enc = cfg.encoder;
        if (cfg.kind == ModelKind::MtlHierarchy) {
            m.hierarchy_ = Hierarchy::parse(cfg.hierarchy);
            enc.layers = m.hierarchy_.depth();
            enc.shortcut = true;
        } else if (cfg.kind == ModelKind::MtlShared) {
            m.hierarchy_ = Hierarchy::parse("T+C+N+G+P+L+O");
            enc.layers = 1;
        }
        m.cfg_.encoder = enc;
        m.encoder_ = Encoder(enc, m.vocab_.word_count(), m.vocab_.char_count(), *m.params_, rng);
        const std::size_t width = enc.output_dim();

        switch (cfg.kind) {
            case ModelKind::MonSeq: {
                std::sort(monolithic_labels.begin(), monolithic_labels.end());
                monolithic_labels.erase(std::unique(monolithic_labels.begin(), monolithic_labels.end()),
                                        monolithic_labels.end());
                if (monolithic_labels.empty()) throw ConfigError("MonSeq needs at least one training label");
                for (const auto& l : monolithic_labels) {
                    scheme.parse_label(l);
                    m.label_index_.emplace(l, m.labels_.size());
                    m.labels_.push_back(l);
                }
                m.monseq_ = ChainCrfLayer(*m.params_, "head.monseq", width, m.labels_.size(), rng);
                break;
            }
            case ModelKind::Fcrf:
                m.fcrf_ = FcrfLayer(*m.params_, "head.fcrf", width, scheme, cfg.fcrf_pairs, rng);
                break;
            case ModelKind::Seq:
                m.seq_ = SeqDecoder(*m.params_, "head.seq", width, cfg.seq, rng);
                break;
            case ModelKind::MtlShared:
            case ModelKind::MtlHierarchy:
                for (auto c : kCategories)
                    m.heads_[index_of(c)] = ChainCrfLayer(*m.params_, "head." + std::string(category_name(c)), width,
                                                          scheme.category_size(c) + 1, rng);
                break;
        }
        return m;
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    ModelKind kind() const noexcept { return cfg_.kind; }
    const TagScheme& scheme() const noexcept { return *scheme_; }
    const Vocab& vocab() const noexcept { return vocab_; }
    ParameterSet& params() noexcept { return *params_; }
    const ParameterSet& params() const noexcept { return *params_; }
    const Encoder& encoder() const noexcept { return encoder_; }
    const Hierarchy& hierarchy() const noexcept { return hierarchy_; }
    const std::vector<std::string>& monolithic_labels() const noexcept { return labels_; }
    const ChainCrfLayer& head(Category c) const { return heads_[index_of(c)]; }
    const ChainCrfLayer& monseq_head() const noexcept { return monseq_; }
    const FcrfLayer& fcrf_head() const noexcept { return fcrf_; }
    const SeqDecoder& seq_head() const noexcept { return seq_; }

    bool is_multitask() const noexcept { return cfg_.kind == ModelKind::MtlShared || cfg_.kind == ModelKind::MtlHierarchy; }

    /// 1-based encoder layer that supervises a category's head.
    std::size_t level_of(Category c) const {
        if (!is_multitask()) return encoder_.layer_count();
        return hierarchy_.level_of[index_of(c)] + 1;
    }

    /// Whether the model can output this tag at all. Only MonSeq has a closed label set.
    bool can_output(const CompositeTag& tag) const {
        if (cfg_.kind != ModelKind::MonSeq) return true;
        return label_index_.contains(scheme_->to_monolithic(tag));
    }

    /// Training loss of one sentence: all task losses summed with equal weight.
    Var loss(Graph& g, const Sentence& sentence) const {
        const auto ids = token_ids(vocab_, sentence);
        const auto states = encoder_.encode(g, ids, encoder_.layer_count());
        const auto& top = states.back();
        switch (cfg_.kind) {
            case ModelKind::MonSeq: {
                std::vector<std::size_t> gold;
                for (const auto& t : sentence.tokens) {
                    const auto label = scheme_->to_monolithic(t.gold);
                    auto it = label_index_.find(label);
                    if (it == label_index_.end()) throw std::out_of_range("MonSeq: label '" + label + "' not in the output space");
                    gold.push_back(it->second);
                }
                return monseq_.nll(g, top, gold);
            }
            case ModelKind::Fcrf: {
                std::vector<std::array<std::size_t, kNumCategories>> gold;
                for (const auto& t : sentence.tokens) gold.push_back(category_labels(*scheme_, t.gold));
                return fcrf_.nll(g, top, gold, cfg_.bp);
            }
            case ModelKind::Seq: {
                std::vector<Var> terms;
                for (std::size_t i = 0; i < sentence.size(); ++i)
                    terms.push_back(seq_.teacher_forced_nll(g, top[i], seq_gold_outputs(sentence.tokens[i].gold)));
                return terms.size() == 1 ? terms[0] : sum(concat(terms));
            }
            case ModelKind::MtlShared:
            case ModelKind::MtlHierarchy: {
                std::vector<Var> terms;
                for (auto c : kCategories) terms.push_back(task_loss_from(states, sentence, c));
                return sum(concat(terms));
            }
        }
        throw std::logic_error("unreachable");
    }

    /// Loss of a single category task. The head reads its own level, so the loss
    /// reaches only that head, the encoder layers at or below the level, and the embeddings.
    Var task_loss(Graph& g, const Sentence& sentence, Category c) const {
        if (!is_multitask()) throw std::logic_error("task_loss: only multi-task models have per-category tasks");
        const auto ids = token_ids(vocab_, sentence);
        const auto states = encoder_.encode(g, ids, level_of(c));
        return task_loss_from(states, sentence, c);
    }

    std::vector<TagPrediction> predict(const Sentence& sentence) const {
        Graph g;
        const auto ids = token_ids(vocab_, sentence);
        const auto states = encoder_.encode(g, ids, encoder_.layer_count());
        const auto& top = states.back();
        std::vector<TagPrediction> out;
        switch (cfg_.kind) {
            case ModelKind::MonSeq: {
                for (auto y : monseq_.decode(g, top).path) out.push_back(prediction_of(scheme_->parse_label(labels_[y])));
                break;
            }
            case ModelKind::Fcrf:
                out = fcrf_.decode(g, top, *scheme_, cfg_.bp);
                break;
            case ModelKind::Seq:
                for (const Var& h : top) out.push_back(assemble(*scheme_, seq_.decode_greedy(g, h)));
                break;
            case ModelKind::MtlShared:
            case ModelKind::MtlHierarchy: {
                std::vector<std::vector<ValueId>> values(sentence.size());
                for (auto c : kCategories) {
                    const auto path = heads_[index_of(c)].decode(g, states[level_of(c) - 1]).path;
                    for (std::size_t t = 0; t < path.size(); ++t)
                        if (auto v = category_value(*scheme_, c, path[t])) values[t].push_back(*v);
                }
                for (auto& v : values) {
                    std::sort(v.begin(), v.end());
                    out.push_back(assemble(*scheme_, std::move(v)));
                }
                break;
            }
        }
        return out;
    }

    std::string manifest() const {
        nlohmann::json m = {{"format", "morphtag.model/1"},
                            {"config", cfg_.to_json()},
                            {"scheme", scheme_->to_json()},
                            {"vocab", vocab_.to_json()},
                            {"labels", labels_}};
        return m.dump();
    }

    void save(std::ostream& os) const { write_container(os, manifest(), *params_); }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write model file: " + path);
        save(out);
        if (!out) throw std::runtime_error("error writing model file: " + path);
    }

    static TaggerModel load(std::istream& is) {
        auto container = read_container(is);
        nlohmann::json m;
        try {
            m = nlohmann::json::parse(container.manifest);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("model manifest: ") + e.what());
        }
        if (m.value("format", "") != "morphtag.model/1") throw FormatError("model manifest: unsupported format");
        auto cfg = ModelConfig::from_json(m.at("config"));
        auto scheme = TagScheme::from_json(m.at("scheme"));
        auto model = build(cfg, Vocab::from_json(m.at("vocab")), scheme, m.at("labels").get<std::vector<std::string>>());
        load_parameters(*model.params_, container.entries);
        return model;
    }

    static TaggerModel load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open model file: " + path);
        return load(in);
    }

private:
    Var task_loss_from(const HiddenStates& states, const Sentence& sentence, Category c) const {
        std::vector<std::size_t> gold;
        for (const auto& t : sentence.tokens) gold.push_back(category_labels(*scheme_, t.gold)[index_of(c)]);
        return heads_[index_of(c)].nll(states.front().front().graph(), states[level_of(c) - 1], gold);
    }

    ModelConfig cfg_;
    std::shared_ptr<const TagScheme> scheme_;
    Vocab vocab_;
    std::unique_ptr<ParameterSet> params_;
    Encoder encoder_;
    Hierarchy hierarchy_;
    std::vector<std::string> labels_;
    std::unordered_map<std::string, std::size_t> label_index_;
    ChainCrfLayer monseq_;
    FcrfLayer fcrf_;
    SeqDecoder seq_;
    std::array<ChainCrfLayer, kNumCategories> heads_;
};

inline std::vector<std::vector<TagPrediction>> predict_corpus(const TaggerModel& model, const Corpus& corpus,
                                                              std::size_t jobs = 1) {
    std::vector<std::vector<TagPrediction>> out(corpus.size());
    const std::size_t n = corpus.size();
    jobs = std::max<std::size_t>(1, std::min(jobs, std::max<std::size_t>(n, 1)));
    auto work = [&](std::size_t j) {
        for (std::size_t s = j * n / jobs; s < (j + 1) * n / jobs; ++s) out[s] = model.predict(corpus.sentences[s]);
    };
    if (jobs == 1) {
        work(0);
    } else {
        std::vector<std::thread> threads;
        for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(work, j);
        for (auto& t : threads) t.join();
    }
    return out;
}

inline MetricsReport evaluate_model(const TaggerModel& model, const Corpus& corpus, std::size_t jobs = 1) {
    return evaluate(model.scheme(), align(corpus, predict_corpus(model, corpus, jobs)), {Averaging::Category, jobs});
}

struct TrainOptions {
    std::size_t epochs = 300;
    /// Epochs without dev macro-F1 improvement before stopping; 0 disables.
    std::size_t patience = 10;
    /// Stop once dev accuracy and macro F1 are both exactly 1.
    bool stop_when_perfect = true;
};

struct TrainingLog {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
};

inline nlohmann::json epoch_to_json(const EpochRecord& r) {
    return {{"epoch", r.epoch},
            {"loss", r.loss},
            {"dev_accuracy", optional_json(r.dev_accuracy)},
            {"dev_macro_f1", optional_json(r.dev_macro_f1)}};
}

/// Per-sentence Adam steps in a seeded shuffled order. Keeps the parameters of the
/// best dev macro-F1 epoch. Writes one JSON record per epoch to `log_out` if given.
inline TrainingLog train(TaggerModel& model, const Corpus& train_corpus, const Corpus& dev, const TrainOptions& opts,
                         std::ostream* log_out = nullptr) {
    if (train_corpus.empty()) throw std::invalid_argument("train: empty training corpus");
    Adam adam(model.config().optimizer);
    Rng order_rng(model.config().seed ^ 0x9E3779B97F4A7C15ULL);
    std::vector<std::size_t> order(train_corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    ParameterSet& params = model.params();

    TrainingLog log;
    std::optional<double> best;
    std::vector<Tensor> best_params = params.snapshot();
    std::size_t since_best = 0;
    for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
        order_rng.shuffle(std::span<std::size_t>(order));
        double total = 0.0;
        for (std::size_t idx : order) {
            Graph g;
            Var loss = model.loss(g, train_corpus.sentences[idx]);
            const double value = loss.value().item();
            if (!std::isfinite(value))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", sentence " +
                                   std::to_string(idx + 1) + " (" + std::string(kind_name(model.kind())) + ")");
            total += value;
            params.zero_grad();
            g.backward(loss);
            adam.step(params);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = total;
        if (!dev.empty()) {
            const auto m = evaluate_model(model, dev);
            rec.dev_accuracy = m.token_accuracy;
            rec.dev_macro_f1 = m.macro_f1;
        }
        log.epochs.push_back(rec);
        if (log_out) *log_out << epoch_to_json(rec).dump() << '\n';
        if (dev.empty()) {
            log.best_epoch = epoch;
            continue;
        }
        const double score = rec.dev_macro_f1.value_or(0.0);
        if (!best || score > *best) {
            best = score;
            best_params = params.snapshot();
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            ++since_best;
        }
        if (opts.stop_when_perfect && rec.dev_accuracy == 1.0 && rec.dev_macro_f1 == 1.0) break;
        if (opts.patience > 0 && since_best >= opts.patience) break;
    }
    if (!dev.empty()) params.restore(best_params);
    return log;
}

}  // namespace morphtag
