#pragma once

// Token encoder: word embedding concatenated with a character BiLSTM summary,
// fed through a stack of word-level BiLSTM layers. With shortcut connections the
// token embedding is appended to the input of every layer above the first.

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphtag/corpus.hpp"
#include "morphtag/numeric.hpp"

namespace morphtag {

struct EncoderConfig {
    std::size_t word_dim = 32;
    std::size_t char_dim = 16;
    std::size_t char_hidden = 16;
    std::size_t hidden = 32;
    std::size_t layers = 1;
    bool shortcut = false;

    std::size_t token_dim() const noexcept { return word_dim + 2 * char_hidden; }
    std::size_t output_dim() const noexcept { return 2 * hidden; }
    std::size_t layer_input_dim(std::size_t layer) const noexcept {
        if (layer == 0) return token_dim();
        return output_dim() + (shortcut ? token_dim() : 0);
    }
};

/// Token as vocabulary indices.
struct TokenIds {
    std::size_t word = Vocab::kUnk;
    std::vector<std::size_t> chars;
};

inline std::vector<TokenIds> token_ids(const Vocab& vocab, const Sentence& sentence) {
    std::vector<TokenIds> out;
    out.reserve(sentence.size());
    for (const auto& t : sentence.tokens) out.push_back({vocab.word_id(t.surface), vocab.char_ids(t.surface)});
    return out;
}

struct BiLstmParams {
    LstmParams forward;
    LstmParams backward;
};

/// Runs both directions over `inputs`; output t is forward_t ‖ backward_t.
inline std::vector<Var> bilstm(Graph& g, const BiLstmParams& p, const std::vector<Var>& inputs) {
    const std::size_t n = inputs.size();
    std::vector<Var> fwd(n), bwd(n);
    LstmState s = lstm_zero_state(g, p.forward.hidden_dim);
    for (std::size_t t = 0; t < n; ++t) {
        s = lstm_cell(g, p.forward, inputs[t], s);
        fwd[t] = s.h;
    }
    s = lstm_zero_state(g, p.backward.hidden_dim);
    for (std::size_t t = n; t-- > 0;) {
        s = lstm_cell(g, p.backward, inputs[t], s);
        bwd[t] = s.h;
    }
    std::vector<Var> out(n);
    for (std::size_t t = 0; t < n; ++t) out[t] = concat({fwd[t], bwd[t]});
    return out;
}

/// states[layer][token], each of width 2·hidden.
using HiddenStates = std::vector<std::vector<Var>>;

class Encoder {
public:
    Encoder() = default;

    Encoder(const EncoderConfig& cfg, std::size_t word_vocab, std::size_t char_vocab, ParameterSet& params, Rng& rng)
        : cfg_(cfg) {
        if (cfg.layers == 0) throw std::invalid_argument("encoder: at least one layer required");
        word_emb_ = &params.add("encoder.word_emb", {word_vocab, cfg.word_dim}, Init::Glorot, rng);
        char_emb_ = &params.add("encoder.char_emb", {char_vocab, cfg.char_dim}, Init::Glorot, rng);
        chars_.forward = LstmParams::create(params, "encoder.char_fwd", cfg.char_dim, cfg.char_hidden, rng);
        chars_.backward = LstmParams::create(params, "encoder.char_bwd", cfg.char_dim, cfg.char_hidden, rng);
        for (std::size_t k = 0; k < cfg.layers; ++k) {
            const std::string prefix = "encoder.layer" + std::to_string(k);
            BiLstmParams layer;
            layer.forward = LstmParams::create(params, prefix + ".fwd", cfg.layer_input_dim(k), cfg.hidden, rng);
            layer.backward = LstmParams::create(params, prefix + ".bwd", cfg.layer_input_dim(k), cfg.hidden, rng);
            layers_.push_back(layer);
        }
    }

    const EncoderConfig& config() const noexcept { return cfg_; }
    std::size_t layer_count() const noexcept { return layers_.size(); }

    /// word-embedding ‖ final forward char state ‖ final backward char state.
    Var embed_token(Graph& g, const TokenIds& token) const {
        Var word = embedding(g.param(*word_emb_), token.word);
        std::vector<Var> chars;
        chars.reserve(std::max<std::size_t>(token.chars.size(), 1));
        for (auto c : token.chars) chars.push_back(embedding(g.param(*char_emb_), c));
        if (chars.empty()) chars.push_back(embedding(g.param(*char_emb_), Vocab::kUnk));
        LstmState fwd = lstm_zero_state(g, cfg_.char_hidden);
        for (const Var& c : chars) fwd = lstm_cell(g, chars_.forward, c, fwd);
        LstmState bwd = lstm_zero_state(g, cfg_.char_hidden);
        for (auto it = chars.rbegin(); it != chars.rend(); ++it) bwd = lstm_cell(g, chars_.backward, *it, bwd);
        return concat({word, fwd.h, bwd.h});
    }

    /// Hidden states for layers [0, depth).
    HiddenStates encode(Graph& g, const std::vector<TokenIds>& sentence, std::size_t depth) const {
        if (depth == 0 || depth > layers_.size())
            throw std::out_of_range("encode: depth " + std::to_string(depth) + " outside [1, " +
                                    std::to_string(layers_.size()) + "]");
        if (sentence.empty()) throw std::invalid_argument("encode: empty sentence");
        std::vector<Var> embedded;
        embedded.reserve(sentence.size());
        for (const auto& t : sentence) embedded.push_back(embed_token(g, t));
        HiddenStates states;
        std::vector<Var> input = embedded;
        for (std::size_t k = 0; k < depth; ++k) {
            if (k > 0) {
                input = states.back();
                if (cfg_.shortcut)
                    for (std::size_t t = 0; t < input.size(); ++t) input[t] = concat({input[t], embedded[t]});
            }
            states.push_back(bilstm(g, layers_[k], input));
        }
        return states;
    }

    const BiLstmParams& layer(std::size_t k) const { return layers_.at(k); }

private:
    EncoderConfig cfg_;
    Parameter* word_emb_ = nullptr;
    Parameter* char_emb_ = nullptr;
    BiLstmParams chars_;
    std::vector<BiLstmParams> layers_;
};

}  // namespace morphtag
