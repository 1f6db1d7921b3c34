#include "tad/pyramid.hpp"

#include "tad/errors.hpp"

namespace tad {

void PyramidConfig::validate() const {
    if (model_dim < 1) throw ConfigError("pyramid.model_dim must be >= 1");
    if (num_levels < 1) throw ConfigError("pyramid.num_levels must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw ConfigError("pyramid.kernel_size must be a positive odd integer");
    }
}

std::vector<int> pyramid_lengths(int t1, int num_levels) {
    std::vector<int> lengths(num_levels);
    for (int l = 0; l < num_levels; ++l) lengths[l] = level_length(t1, l + 1);
    return lengths;
}

Pyramid::Pyramid(nn::ParamStore& ps, const PyramidConfig& cfg, int in_channels, Rng& rng)
    : cfg_(cfg) {
    cfg_.validate();
    // channel projection only; bias-free so zero input stays zero
    embed_ = nn::Conv1d::create(ps, "pyramid.embed", in_channels, cfg.model_dim, 1, 1, rng,
                                /*bias=*/false);
    for (int l = 2; l <= cfg.num_levels; ++l) {
        std::string base = "pyramid.level" + std::to_string(l);
        convs_.push_back(nn::Conv1d::create(ps, base + ".conv", cfg.model_dim, cfg.model_dim,
                                            cfg.kernel_size, 2, rng, /*bias=*/false));
        norms_.push_back(nn::LayerNorm::create(ps, base + ".norm", cfg.model_dim));
    }
}

ad::Var Pyramid::embed(nn::TapeBinding& p, ad::Var features, int valid_len) const {
    if (features.cols() != p[embed_.w].rows()) {
        throw DataError("embed: channel mismatch (got " + std::to_string(features.cols()) +
                        ", expected " + std::to_string(p[embed_.w].rows()) + ")");
    }
    ad::Var z = embed_.apply(p, features, features.rows());
    return ad::zero_rows_after(z, valid_len);
}

Pyramid::Levels Pyramid::build(nn::TapeBinding& p, ad::Var z1, int valid_len,
                               bool apply_norm) const {
    Levels out;
    out.features.push_back(z1);
    out.valid_lengths.push_back(valid_len);
    ad::Var prev = z1;
    int prev_valid = valid_len;
    for (size_t i = 0; i < convs_.size(); ++i) {
        ad::Var z = convs_[i].apply(p, prev, prev.rows());
        int valid = (prev_valid + 1) / 2;
        if (apply_norm) z = norms_[i].apply(p, z);
        z = ad::zero_rows_after(z, valid);
        out.features.push_back(z);
        out.valid_lengths.push_back(valid);
        prev = z;
        prev_valid = valid;
    }
    return out;
}

}  // namespace tad
