#pragma once

// Per-token feature-sequence decoder: an LSTM that emits feature values one at a
// time, conditioned on the token's context vector and the previous value.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "morphtag/numeric.hpp"
#include "morphtag/tagset.hpp"

namespace morphtag {

/// Output symbols: 0..70 are feature values (by ValueId), 71 is END.
inline constexpr std::size_t kSeqEndOutput = kNumValues;
inline constexpr std::size_t kSeqOutputs = kNumValues + 1;

struct SeqDecoderConfig {
    std::size_t value_dim = 32;
    std::size_t hidden = 32;
    std::size_t max_len = 8;
};

/// Gold output sequence for a tag: values in canonical category order, then END.
inline std::vector<std::size_t> seq_gold_outputs(const CompositeTag& tag) {
    std::vector<std::size_t> out;
    for (auto v : TagScheme::values_of(tag)) out.push_back(v.index);
    out.push_back(kSeqEndOutput);
    return out;
}

class SeqDecoder {
public:
    SeqDecoder() = default;

    SeqDecoder(ParameterSet& params, const std::string& prefix, std::size_t context_dim, const SeqDecoderConfig& cfg,
               Rng& rng)
        : cfg_(cfg) {
        value_emb_ = &params.add(prefix + ".value_emb", {kVocabularySize, cfg.value_dim}, Init::Glorot, rng);
        lstm_ = LstmParams::create(params, prefix + ".lstm", cfg.value_dim + context_dim, cfg.hidden, rng);
        out_w_ = &params.add(prefix + ".out.W", {kSeqOutputs, cfg.hidden}, Init::Glorot, rng);
        out_b_ = &params.add(prefix + ".out.b", {kSeqOutputs}, Init::Zeros, rng);
    }

    const SeqDecoderConfig& config() const noexcept { return cfg_; }

    /// Sum over steps of -log p(gold symbol | gold history, context).
    Var teacher_forced_nll(Graph& g, Var context, std::span<const std::size_t> gold) const {
        if (gold.empty()) throw std::invalid_argument("teacher_forced_nll: empty gold sequence");
        std::vector<Var> terms;
        LstmState state = lstm_zero_state(g, cfg_.hidden);
        std::size_t prev = kStartSymbol;
        for (std::size_t sym : gold) {
            if (sym >= kSeqOutputs) throw std::out_of_range("teacher_forced_nll: symbol " + std::to_string(sym) + " not in vocabulary");
            Var logp = step(g, context, prev, state);
            terms.push_back(pick(logp, sym));
            prev = sym == kSeqEndOutput ? kEndSymbol : kFirstValueSymbol + sym;
        }
        Var total = terms.size() == 1 ? terms[0] : sum(concat(terms));
        return scale(total, -1.0);
    }

    /// Feeds back each argmax (lowest index on ties) until END or max_len symbols.
    std::vector<ValueId> decode_greedy(Graph& g, Var context, std::size_t max_len) const {
        if (max_len < 1) throw std::invalid_argument("decode_greedy: max_len must be >= 1");
        std::vector<ValueId> out;
        LstmState state = lstm_zero_state(g, cfg_.hidden);
        std::size_t prev = kStartSymbol;
        while (out.size() < max_len) {
            const Tensor& logp = step(g, context, prev, state).value();
            std::size_t arg = 0;
            for (std::size_t k = 1; k < logp.size(); ++k)
                if (logp[k] > logp[arg]) arg = k;
            if (arg == kSeqEndOutput) break;
            out.push_back(ValueId{static_cast<std::uint16_t>(arg)});
            prev = kFirstValueSymbol + arg;
        }
        return out;
    }

    std::vector<ValueId> decode_greedy(Graph& g, Var context) const { return decode_greedy(g, context, cfg_.max_len); }

    Parameter& value_embedding() const { return *value_emb_; }
    const LstmParams& lstm() const noexcept { return lstm_; }
    Parameter& output_weight() const { return *out_w_; }
    Parameter& output_bias() const { return *out_b_; }

private:
    Var step(Graph& g, Var context, std::size_t prev_symbol, LstmState& state) const {
        Var input = concat({embedding(g.param(*value_emb_), prev_symbol), context});
        state = lstm_cell(g, lstm_, input, state);
        return log_softmax(affine(g.param(*out_w_), state.h, g.param(*out_b_)));
    }

    SeqDecoderConfig cfg_;
    Parameter* value_emb_ = nullptr;
    LstmParams lstm_;
    Parameter* out_w_ = nullptr;
    Parameter* out_b_ = nullptr;
};

}  // namespace morphtag
