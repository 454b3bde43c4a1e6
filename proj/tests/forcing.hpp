#pragma once

// Hand-set parameters that make a head emit a chosen output regardless of its input.

#include <vector>

#include "morphtag/model.hpp"
#include "morphtag/seqgen.hpp"

namespace forcing {

using namespace morphtag;

// Needs value_dim == hidden == kVocabularySize. The embedding is one-hot, the LSTM
// copies the previous symbol into h, and the projection maps each previous symbol
// to its successor in `values` followed by END. Values must be distinct.
inline void force_seq(const SeqDecoder& dec, const std::vector<ValueId>& values, double margin = 50.0) {
    const std::size_t v = kVocabularySize;
    Tensor& emb = dec.value_embedding().value;
    emb.fill(0.0);
    for (std::size_t s = 0; s < v; ++s) emb.at(s, s) = 1.0;
    Tensor& w = dec.lstm().weight->value;
    Tensor& b = dec.lstm().bias->value;
    w.fill(0.0);
    b.fill(0.0);
    for (std::size_t k = 0; k < v; ++k) {
        b[k] = 20.0;           // input gate open
        b[v + k] = -20.0;      // forget gate shut
        b[2 * v + k] = 20.0;   // output gate open
        w.at(3 * v + k, k) = 20.0;
    }
    Tensor& out = dec.output_weight().value;
    out.fill(0.0);
    dec.output_bias().value.fill(0.0);
    std::size_t prev = kStartSymbol;
    for (auto val : values) {
        out.at(val.index, prev) = margin;
        prev = kFirstValueSymbol + val.index;
    }
    out.at(kSeqEndOutput, prev) = margin;
}

// Per-category CRF heads (FCRF or the multi-task heads): weights, transitions and
// pair tables go to zero and each emission bias puts `margin` on the tag's value or NA.
inline void force_categories(TaggerModel& model, const CompositeTag& tag, double margin = 50.0) {
    const std::string base = model.kind() == ModelKind::Fcrf ? "head.fcrf." : "head.";
    auto& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i)
        if (ps[i].name.rfind(base, 0) == 0) ps[i].value.fill(0.0);
    const auto labels = category_labels(model.scheme(), tag);
    for (auto c : kCategories)
        ps.at(base + std::string(category_name(c)) + ".emit.b").value[labels[index_of(c)]] = margin;
}

}  // namespace forcing
