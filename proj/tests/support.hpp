#pragma once

#include <string>

#include "morphtag/model.hpp"

namespace support {

using namespace morphtag;

inline const TagScheme& scheme() {
    static const TagScheme s = TagScheme::standard();
    return s;
}

inline std::string fixture(const std::string& name) { return std::string(MORPHTAG_FIXTURES) + "/" + name; }

inline Corpus load_fixture(const std::string& name) { return load_tsv(fixture(name), scheme()); }

inline ModelConfig small_config(ModelKind kind, std::uint64_t seed = 42) {
    ModelConfig c;
    c.kind = kind;
    c.encoder.word_dim = 8;
    c.encoder.char_dim = 4;
    c.encoder.char_hidden = 4;
    c.encoder.hidden = 8;
    c.seq.value_dim = 8;
    c.seq.hidden = 8;
    c.word_min_freq = 1;
    c.seed = seed;
    return c;
}

// 0 for embeddings and character encoders, k for encoder layer k-1 and heads at level k
inline std::size_t param_level(const TaggerModel& model, const std::string& name) {
    const std::string layer = "encoder.layer";
    if (name.rfind(layer, 0) == 0) return std::stoul(name.substr(layer.size())) + 1;
    if (name.rfind("head.", 0) == 0) {
        const auto rest = name.substr(5, name.find('.', 5) - 5);
        for (auto c : kCategories)
            if (category_name(c) == rest) return model.level_of(c);
        return model.encoder().layer_count();
    }
    return 0;
}

inline bool all_zero(const Tensor& t) {
    for (double v : t.data())
        if (v != 0.0) return false;
    return true;
}

}  // namespace support
