#include "tad/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "tad/config.hpp"
#include "tad/errors.hpp"

namespace tad {

using ad::Var;
using json = nlohmann::ordered_json;

CoordExpression coord_expression_from_string(const std::string& s) {
    if (s == "time_aligned") return CoordExpression::time_aligned;
    if (s == "normalized") return CoordExpression::normalized;
    throw ConfigError("unknown coord.expression '" + s + "' (expected time_aligned|normalized)");
}

std::string to_string(CoordExpression c) {
    return c == CoordExpression::time_aligned ? "time_aligned" : "normalized";
}

SelectMode select_mode_from_string(const std::string& s) {
    if (s == "adaptive") return SelectMode::adaptive;
    if (s == "fixed") return SelectMode::fixed;
    throw ConfigError("unknown select.mode '" + s + "' (expected adaptive|fixed)");
}

std::string to_string(SelectMode m) { return m == SelectMode::adaptive ? "adaptive" : "fixed"; }

void AttentionConfig::validate() const {
    if (num_heads < 1 || points_per_level < 1) {
        throw ConfigError("model.heads and model.points must be >= 1");
    }
    if (num_encoder_layers < 1 || num_decoder_layers < 1) {
        throw ConfigError("model.enc_layers and model.dec_layers must be >= 1");
    }
}

void ModelConfig::validate() const {
    pyramid.validate();
    attn.validate();
    if (in_channels < 1) throw ConfigError("model input channels must be >= 1");
    if (num_classes < 1) throw ConfigError("model.num_classes must be >= 1");
    if (ffn_dim < 1) throw ConfigError("model.ffn_dim must be >= 1");
    if (pyramid.model_dim % attn.num_heads != 0) {
        throw ConfigError("model.dim must be divisible by model.heads");
    }
    if (pyramid.model_dim % 4 != 0) {
        throw ConfigError("model.dim must be divisible by 4 (positional feature banks)");
    }
    if (!(base_scale > 0.0)) throw ConfigError("coord.base_scale must be > 0");
    if (select.t_sector < 1 || select.k < 1 || select.fixed_n < 1) {
        throw ConfigError("select.t_sector, select.k and select.fixed_n must be >= 1");
    }
}

Vec deformable_sample(const Mat& level_features, double location) {
    const int t = static_cast<int>(level_features.rows());
    if (t == 1) return level_features.row(0);
    double cl = std::clamp(location, 0.0, static_cast<double>(t - 1));
    int lo = std::min(static_cast<int>(std::floor(cl)), t - 2);
    double frac = cl - lo;
    return (1.0 - frac) * level_features.row(lo).transpose() +
           frac * level_features.row(lo + 1).transpose();
}

Mat sinusoidal_position_encoding(int len, int dim) {
    Mat pe(len, dim);
    for (int pos = 0; pos < len; ++pos) {
        for (int i = 0; i < dim / 2; ++i) {
            double denom = std::pow(10000.0, (2.0 * i) / dim);
            pe(pos, 2 * i) = std::sin(pos / denom);
            pe(pos, 2 * i + 1) = std::cos(pos / denom);
        }
    }
    return pe;
}

// ---------------------------------------------------------------------------
// layer blocks
// ---------------------------------------------------------------------------

struct Model::EncoderLayer {
    nn::Linear off_head, attn_head, value_proj, out_proj, ffn1, ffn2;
    nn::LayerNorm norm1, norm2;
};

struct Model::DecoderLayer {
    nn::Linear sa_q, sa_k, sa_v, sa_o;
    nn::LayerNorm norm1;
    nn::Linear cross_off, cross_attn, cross_out;
    nn::LayerNorm norm2;
    nn::Linear ffn1, ffn2;
    nn::LayerNorm norm3;
    nn::Linear cls_head;
    nn::Linear off_hidden, off_out;
};

namespace {

constexpr double kFocalPrior = 0.05;  // initial positive rate of class heads
constexpr double kNormEps = 1e-4;     // clamp for normalized-mode references

// non-integer spread so initial samples never sit exactly on grid points
void init_sampling_bias(nn::ParamStore& ps, const nn::Linear& lin, int heads, int levels,
                        int points) {
    Mat& b = ps.value(lin.b);
    for (int h = 0; h < heads; ++h) {
        double sign = (h % 2 == 0) ? 1.0 : -1.0;
        for (int l = 0; l < levels; ++l) {
            for (int k = 0; k < points; ++k) {
                b(0, (h * levels + l) * points + k) = sign * (k + 0.5) * 0.7;
            }
        }
    }
}

void init_class_bias(nn::ParamStore& ps, const nn::Linear& lin) {
    ps.value(lin.b).setConstant(-std::log((1.0 - kFocalPrior) / kFocalPrior));
}

std::vector<double> geometric_freqs(int count, double lambda_min, double lambda_max) {
    std::vector<double> freqs(count);
    for (int i = 0; i < count; ++i) {
        double t = count > 1 ? static_cast<double>(i) / (count - 1) : 0.0;
        double lambda = lambda_min * std::pow(lambda_max / lambda_min, t);
        freqs[i] = 2.0 * M_PI / lambda;
    }
    return freqs;
}

}  // namespace

Model::~Model() = default;

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg.init_seed);
    const int d = cfg.pyramid.model_dim;
    const int hlk = cfg.attn.num_heads * cfg.pyramid.num_levels * cfg.attn.points_per_level;

    pyramid_ = Pyramid(params_, cfg.pyramid, cfg.in_channels, rng);

    for (int i = 0; i < cfg.attn.num_encoder_layers; ++i) {
        std::string base = "enc" + std::to_string(i);
        EncoderLayer layer;
        layer.off_head = nn::Linear::zeros(params_, base + ".off", d, hlk);
        init_sampling_bias(params_, layer.off_head, cfg.attn.num_heads, cfg.pyramid.num_levels,
                           cfg.attn.points_per_level);
        layer.attn_head = nn::Linear::zeros(params_, base + ".attn", d, hlk);
        layer.value_proj = nn::Linear::create(params_, base + ".value", d, d, rng);
        layer.out_proj = nn::Linear::create(params_, base + ".out", d, d, rng);
        layer.ffn1 = nn::Linear::create(params_, base + ".ffn1", d, cfg.ffn_dim, rng);
        layer.ffn2 = nn::Linear::create(params_, base + ".ffn2", cfg.ffn_dim, d, rng);
        layer.norm1 = nn::LayerNorm::create(params_, base + ".norm1", d);
        layer.norm2 = nn::LayerNorm::create(params_, base + ".norm2", d);
        enc_layers_.push_back(layer);
    }

    enc_fg_head_ = nn::Linear::create(params_, "enc_head.fg", d, 1, rng);
    init_class_bias(params_, enc_fg_head_);
    enc_off_hidden_ = nn::Linear::create(params_, "enc_head.off_hidden", d, d, rng);
    enc_off_out_ = nn::Linear::zeros(params_, "enc_head.off_out", d, 2);

    query_init_ = nn::Linear::create(params_, "query_init", d, d, rng);
    query_init_norm_ = nn::LayerNorm::create(params_, "query_init_norm", d);
    const_query_embed_ = params_.add("query_const_embed", Mat::Zero(1, d));
    pos_hidden_ = nn::Linear::create(params_, "pos_embed.hidden", d, d, rng);
    pos_out_ = nn::Linear::create(params_, "pos_embed.out", d, d, rng);
    dec_value_proj_ = nn::Linear::create(params_, "dec_value", d, d, rng);

    for (int i = 0; i < cfg.attn.num_decoder_layers; ++i) {
        std::string base = "dec" + std::to_string(i);
        DecoderLayer layer;
        layer.sa_q = nn::Linear::create(params_, base + ".sa_q", d, d, rng);
        layer.sa_k = nn::Linear::create(params_, base + ".sa_k", d, d, rng);
        layer.sa_v = nn::Linear::create(params_, base + ".sa_v", d, d, rng);
        layer.sa_o = nn::Linear::create(params_, base + ".sa_o", d, d, rng);
        layer.norm1 = nn::LayerNorm::create(params_, base + ".norm1", d);
        layer.cross_off = nn::Linear::zeros(params_, base + ".cross_off", d, hlk);
        init_sampling_bias(params_, layer.cross_off, cfg.attn.num_heads, cfg.pyramid.num_levels,
                           cfg.attn.points_per_level);
        layer.cross_attn = nn::Linear::zeros(params_, base + ".cross_attn", d, hlk);
        layer.cross_out = nn::Linear::create(params_, base + ".cross_out", d, d, rng);
        layer.norm2 = nn::LayerNorm::create(params_, base + ".norm2", d);
        layer.ffn1 = nn::Linear::create(params_, base + ".ffn1", d, cfg.ffn_dim, rng);
        layer.ffn2 = nn::Linear::create(params_, base + ".ffn2", cfg.ffn_dim, d, rng);
        layer.norm3 = nn::LayerNorm::create(params_, base + ".norm3", d);
        layer.cls_head = nn::Linear::create(params_, base + ".cls", d, cfg.num_classes, rng);
        init_class_bias(params_, layer.cls_head);
        layer.off_hidden = nn::Linear::create(params_, base + ".off_hidden", d, d, rng);
        layer.off_out = nn::Linear::zeros(params_, base + ".off_out", d, 2);
        dec_layers_.push_back(layer);
    }

    const int f = d / 4;
    center_freqs_ = geometric_freqs(f, 1.0, 2048.0);   // seconds
    width_freqs_ = geometric_freqs(f, 0.5, 32.0);      // log-width units
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

namespace {

/// Differentiable segment coordinates; representation depends on the
/// coordinate expression. a/b are (N x 1):
///   time_aligned: a = center (s), b = ln(half-width)
///   normalized:   a = raw center logit, b = raw width logit
struct SegState {
    Var a, b;
};

struct SecondsView {
    Var center, log_width;
};

SecondsView to_seconds(const SegState& st, CoordExpression mode, double duration) {
    if (mode == CoordExpression::time_aligned) return {st.a, st.b};
    Var center = ad::scale(ad::sigmoid_v(st.a), duration);
    Var logw = ad::add_scalar(ad::log_sigmoid(st.b), std::log(duration));
    return {center, logw};
}

}  // namespace

Model::Forward Model::forward(ad::Graph& g, const VideoMeta& meta, const Mat& values,
                              bool constant_params, const std::vector<int>* query_perm) const {
    meta.validate();
    if (values.rows() < meta.num_features || values.cols() != meta.channels) {
        throw DataError("forward: feature matrix shape mismatch for " + meta.video_id);
    }
    if (meta.duration_sec < meta.snippet_duration()) {
        throw DataError("forward: video " + meta.video_id + " is shorter than one snippet");
    }
    const int num_levels = cfg_.pyramid.num_levels;
    const int heads = cfg_.attn.num_heads;
    const int points = cfg_.attn.points_per_level;
    const int hlk = heads * num_levels * points;
    const int d = cfg_.pyramid.model_dim;
    const double duration = meta.duration_sec;

    Forward fwd;
    fwd.binding = nn::TapeBinding(g, params_, constant_params);
    nn::TapeBinding& p = fwd.binding;

    // --- pyramid ---
    Var input = g.constant(values);
    Var z1 = pyramid_.embed(p, input, meta.num_features);
    Pyramid::Levels levels = pyramid_.build(p, z1, meta.num_features);

    // per-level step sizes and reference grids (valid lengths)
    std::vector<double> step(num_levels);
    std::vector<ReferenceGrid> grids;
    for (int l = 0; l < num_levels; ++l) {
        step[l] = meta.stride * static_cast<double>(1 << l) / meta.fps;
        grids.push_back(
            make_reference_grid(meta, l + 1, num_levels, cfg_.base_scale, cfg_.grid_mode));
    }

    // physical layout of the stacked memory matrix
    ad::LevelLayout layout;
    layout.offsets.resize(num_levels);
    layout.lengths.resize(num_levels);
    int phys = 0;
    for (int l = 0; l < num_levels; ++l) {
        layout.offsets[l] = phys;
        layout.lengths[l] = levels.valid_lengths[l];
        phys += levels.features[l].rows();
    }
    layout.total_rows = phys;
    fwd.layout = layout;

    // positional encoding per level (index-based), then flatten
    std::vector<Var> with_pe;
    for (int l = 0; l < num_levels; ++l) {
        Var feat = levels.features[l];
        if (cfg_.use_pos_enc) {
            Var pe = g.constant(sinusoidal_position_encoding(feat.rows(), d));
            feat = ad::add(feat, pe);
        }
        with_pe.push_back(feat);
    }
    Var src = concat_rows(with_pe);

    // encoder sampling base locations: every physical position samples around
    // its own time at every target level
    Mat base_loc(phys, hlk);
    for (int l = 0; l < num_levels; ++l) {
        const int len = static_cast<int>(levels.features[l].rows());
        for (int t = 0; t < len; ++t) {
            double time = (t + 0.5) * step[l];
            int row = layout.offsets[l] + t;
            for (int c = 0; c < hlk; ++c) {
                int tl = (c / points) % num_levels;
                base_loc(row, c) = time / step[tl] - 0.5;
            }
        }
    }
    Var base_loc_v = g.constant(base_loc);

    // --- encoder layers ---
    for (size_t li = 0; li < enc_layers_.size(); ++li) {
        const EncoderLayer& el = enc_layers_[li];
        if (cfg_.attn.encoder_self_attn) {
            Var off = el.off_head.apply(p, src);
            Var attn = ad::softmax_groups(el.attn_head.apply(p, src), num_levels * points);
            if (li == 0) {
                // capture for tests: weights over (levels x points) per head
                fwd.enc_attention = attn.val();
            }
            Var loc = ad::add(base_loc_v, off);
            Var value = el.value_proj.apply(p, src);
            Var sampled = ad::deformable_aggregate(value, loc, attn, layout, heads);
            Var out = el.out_proj.apply(p, sampled);
            src = el.norm1.apply(p, ad::add(src, out));
        }
        Var ff = el.ffn2.apply(p, ad::relu(el.ffn1.apply(p, src)));
        src = el.norm2.apply(p, ad::add(src, ff));
    }
    fwd.memory = src;

    // --- encoder proposal heads over valid positions ---
    std::vector<int> valid_rows;
    for (int l = 0; l < num_levels; ++l) {
        for (int t = 0; t < layout.lengths[l]; ++t) valid_rows.push_back(layout.offsets[l] + t);
    }
    const int np = static_cast<int>(valid_rows.size());
    Var enc_valid = ad::gather_rows(src, valid_rows);
    Var fg_logit = enc_fg_head_.apply(p, enc_valid);
    Var enc_off = enc_off_out_.apply(p, ad::relu(enc_off_hidden_.apply(p, enc_valid)));
    Var enc_dc = ad::slice_cols(enc_off, 0, 1);
    Var enc_dd = ad::slice_cols(enc_off, 1, 1);

    // reference vectors over valid positions
    Mat ref_c(np, 1), ref_w(np, 1);
    {
        int i = 0;
        for (int l = 0; l < num_levels; ++l) {
            for (int t = 0; t < layout.lengths[l]; ++t, ++i) {
                ref_c(i, 0) = grids[l].centers[t];
                ref_w(i, 0) = grids[l].width;
            }
        }
    }

    SegState enc_state;
    if (cfg_.coord == CoordExpression::time_aligned) {
        // Eq.-4 style decode: center = ref_c + dc * ref_w, logw = ln(ref_w) + dd
        Var ref_cv = g.constant(ref_c);
        Var ref_wv = g.constant(ref_w);
        enc_state.a = ad::add(ref_cv, ad::mul(enc_dc, ref_wv));
        enc_state.b = ad::add(g.constant(ref_w.array().log().matrix()), enc_dd);
    } else {
        // normalized baseline: refine duration-normalized references in logit
        // space, exactly sigma(logit(ref) + delta)
        Mat rc0(np, 1), rd0(np, 1);
        for (int i = 0; i < np; ++i) {
            double c01 = std::clamp(ref_c(i, 0) / duration, kNormEps, 1.0 - kNormEps);
            double d01 = std::clamp(ref_w(i, 0) / duration, kNormEps, 1.0 - kNormEps);
            rc0(i, 0) = logit(c01);
            rd0(i, 0) = logit(d01);
        }
        enc_state.a = ad::add(g.constant(rc0), enc_dc);
        enc_state.b = ad::add(g.constant(rd0), enc_dd);
    }
    SecondsView enc_sec = to_seconds(enc_state, cfg_.coord, duration);
    fwd.encoder_vars = EncoderVars{enc_sec.center, enc_sec.log_width, fg_logit};

    // --- plain encoder output ---
    EncoderOutput& enc = fwd.encoder;
    enc.memory.resize(num_levels);
    const Mat& mem_plain = src.val();
    for (int l = 0; l < num_levels; ++l) {
        enc.memory[l] = mem_plain.middleRows(layout.offsets[l], layout.lengths[l]);
    }
    enc.positions.reserve(np);
    for (int l = 0; l < num_levels; ++l) {
        for (int t = 0; t < layout.lengths[l]; ++t) {
            enc.positions.push_back(EncoderPosition{l + 1, t, grids[l].centers[t]});
        }
    }
    enc.foreground_scores.resize(np);
    enc.offsets.resize(np);
    enc.proposals.reserve(np);
    const Mat& fg_plain = fg_logit.val();
    const Mat& dc_plain = enc_dc.val();
    const Mat& dd_plain = enc_dd.val();
    const Mat& c_plain = enc_sec.center.val();
    const Mat& lw_plain = enc_sec.log_width.val();
    for (int i = 0; i < np; ++i) {
        enc.foreground_scores[i] = sigmoid(fg_plain(i, 0));
        enc.offsets[i] = OffsetPair{dc_plain(i, 0), dd_plain(i, 0)};
        enc.proposals.emplace_back(c_plain(i, 0), std::exp(lw_plain(i, 0)));
    }

    // --- query selection ---
    if (cfg_.select.mode == SelectMode::adaptive) {
        SectorPlan plan = plan_sectors(meta.num_features, cfg_.select.t_sector, step[0]);
        fwd.queries = select_adaptive(enc, plan, cfg_.select.k);
    } else {
        fwd.queries = select_fixed_topk(enc, std::min(cfg_.select.fixed_n, np));
    }
    if (query_perm != nullptr) {
        assert(static_cast<int>(query_perm->size()) == fwd.queries.size());
        QuerySet permuted;
        permuted.content_seeds = fwd.queries.content_seeds;
        for (size_t i = 0; i < query_perm->size(); ++i) {
            permuted.items.push_back(fwd.queries.items[(*query_perm)[i]]);
            permuted.content_seeds.row(static_cast<int>(i)) =
                fwd.queries.content_seeds.row((*query_perm)[i]);
        }
        fwd.queries = std::move(permuted);
    }
    const int nq = fwd.queries.size();

    // --- decoder ---
    std::vector<int> flat_idx(nq), mem_rows(nq);
    for (int q = 0; q < nq; ++q) {
        const QueryItem& item = fwd.queries.items[q];
        flat_idx[q] = item.flat_index;
        mem_rows[q] = layout.offsets[item.level - 1] + item.t;
    }

    Var embed;
    const bool cross = cfg_.attn.decoder_cross_attn;
    if (cross) {
        Var seeds = ad::gather_rows(src, mem_rows);
        embed = query_init_norm_.apply(p, query_init_.apply(p, seeds));
    } else {
        // information-flow cut: content carries no video evidence
        embed = ad::matmul(g.constant(Mat::Ones(nq, 1)), p[const_query_embed_]);
    }

    SegState state{ad::gather_rows(enc_state.a, flat_idx), ad::gather_rows(enc_state.b, flat_idx)};

    fwd.layer_segments.resize(cfg_.attn.num_decoder_layers + 1);
    {
        SecondsView sec = to_seconds(state, cfg_.coord, duration);
        const Mat& c0 = sec.center.val();
        const Mat& l0 = sec.log_width.val();
        for (int q = 0; q < nq; ++q) {
            fwd.layer_segments[0].emplace_back(c0(q, 0), std::exp(l0(q, 0)));
        }
    }

    Var dec_value = dec_value_proj_.apply(p, src);
    Mat level_scale(nq, hlk);
    for (int c = 0; c < hlk; ++c) {
        int tl = (c / points) % num_levels;
        level_scale.col(c).setConstant(1.0 / step[tl]);
    }
    Var level_scale_v = g.constant(level_scale);
    const int dh = d / heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int li = 0; li < cfg_.attn.num_decoder_layers; ++li) {
        const DecoderLayer& dl = dec_layers_[li];
        SecondsView sec = to_seconds(state, cfg_.coord, duration);

        // positional embedding from the current segment estimate; with
        // cross-attention ablated location information is withheld entirely
        Var pos;
        if (cross) {
            Var cf = ad::freq_features(sec.center, center_freqs_);
            Var wf = ad::freq_features(sec.log_width, width_freqs_);
            Var feat = ad::concat_cols({cf, wf});
            pos = pos_out_.apply(p, ad::relu(pos_hidden_.apply(p, feat)));
        }

        if (cfg_.attn.decoder_self_attn) {
            Var qk_in = cross ? ad::add(embed, pos) : embed;
            Var qm = dl.sa_q.apply(p, qk_in);
            Var km = dl.sa_k.apply(p, qk_in);
            Var vm = dl.sa_v.apply(p, embed);
            std::vector<Var> head_outs;
            for (int h = 0; h < heads; ++h) {
                Var qh = ad::slice_cols(qm, h * dh, dh);
                Var kh = ad::slice_cols(km, h * dh, dh);
                Var vh = ad::slice_cols(vm, h * dh, dh);
                Var scores = ad::scale(ad::matmul_nt(qh, kh), attn_scale);
                Var probs = ad::softmax_rows(scores);
                head_outs.push_back(ad::matmul(probs, vh));
            }
            Var sa = dl.sa_o.apply(p, ad::concat_cols(head_outs));
            embed = dl.norm1.apply(p, ad::add(embed, sa));
        }

        if (cross) {
            Var qfeat = ad::add(embed, pos);
            Var off = dl.cross_off.apply(p, qfeat);
            Var attn = ad::softmax_groups(dl.cross_attn.apply(p, qfeat), num_levels * points);
            Var width = ad::exp_v(sec.log_width);
            Var loc_sec = ad::colwise_add(ad::colwise_mul(off, width), sec.center);
            Var loc = ad::add_scalar(ad::mul(loc_sec, level_scale_v), -0.5);
            Var sampled = ad::deformable_aggregate(dec_value, loc, attn, layout, heads);
            Var ca = dl.cross_out.apply(p, sampled);
            embed = dl.norm2.apply(p, ad::add(embed, ca));
        }

        Var ff = dl.ffn2.apply(p, ad::relu(dl.ffn1.apply(p, embed)));
        embed = dl.norm3.apply(p, ad::add(embed, ff));

        Var logits = dl.cls_head.apply(p, embed);
        Var off2 = dl.off_out.apply(p, ad::relu(dl.off_hidden.apply(p, embed)));
        Var dc = ad::slice_cols(off2, 0, 1);
        Var dd = ad::slice_cols(off2, 1, 1);

        if (cfg_.coord == CoordExpression::time_aligned) {
            Var width = ad::exp_v(state.b);
            state.a = ad::add(state.a, ad::mul(dc, width));
            state.b = ad::add(state.b, dd);
        } else {
            state.a = ad::add(state.a, dc);
            state.b = ad::add(state.b, dd);
        }

        SecondsView out_sec = to_seconds(state, cfg_.coord, duration);
        fwd.layers.push_back(LayerVars{out_sec.center, out_sec.log_width, logits});
        const Mat& cv = out_sec.center.val();
        const Mat& lv = out_sec.log_width.val();
        for (int q = 0; q < nq; ++q) {
            fwd.layer_segments[li + 1].emplace_back(cv(q, 0), std::exp(lv(q, 0)));
        }
    }

    return fwd;
}

Model::LossResult Model::forward_loss(ad::Graph& g, const FeatureSequence& video,
                                      const std::vector<ActionInstance>& gt,
                                      const LossWeights& w,
                                      const std::vector<MatchResult>* fixed_matches,
                                      const MatchResult* fixed_encoder_match) const {
    LossResult res;
    res.fwd = forward(g, video.meta, video.values, /*constant_params=*/false);
    res.loss = total_loss_ad(g, res.fwd.layers, &res.fwd.encoder_vars, gt, w, fixed_matches,
                             fixed_encoder_match);
    return res;
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

namespace {

DetectionSet assemble_detections(const std::string& video_id, double duration,
                                 const std::vector<Segment>& segments, const Mat& logits,
                                 const PredictOptions& opts) {
    DetectionSet out;
    out.video_id = video_id;
    const int nq = static_cast<int>(segments.size());
    out.items.reserve(nq);
    for (int q = 0; q < nq; ++q) {
        int best = 0;
        for (int c = 1; c < logits.cols(); ++c) {
            if (logits(q, c) > logits(q, best)) best = c;
        }
        Detection det{clip_to_window(segments[q], duration), best, sigmoid(logits(q, best))};
        out.items.push_back(det);
    }
    if (opts.top_n_cap && static_cast<int>(out.items.size()) > *opts.top_n_cap) {
        std::stable_sort(out.items.begin(), out.items.end(), [](const auto& a, const auto& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.segment.start() < b.segment.start();
        });
        out.items.erase(out.items.begin() + *opts.top_n_cap, out.items.end());
    }
    return out;
}

}  // namespace

DetectionSet Model::predict(const FeatureSequence& video, const PredictOptions& opts) const {
    video.validate();
    ad::Graph g;
    Forward fwd = forward(g, video.meta, video.values, /*constant_params=*/true);
    return assemble_detections(video.meta.video_id, video.meta.duration_sec,
                               fwd.layer_segments.back(), fwd.layers.back().logits.val(), opts);
}

PredictDetail Model::predict_detail(const FeatureSequence& video) const {
    video.validate();
    ad::Graph g;
    Forward fwd = forward(g, video.meta, video.values, /*constant_params=*/true);
    PredictDetail det;
    det.video_id = video.meta.video_id;
    det.duration_sec = video.meta.duration_sec;
    det.coord = cfg_.coord;
    det.encoder = fwd.encoder;
    det.queries = fwd.queries;
    det.layer_segments = fwd.layer_segments;
    det.final_logits = fwd.layers.back().logits.val();

    // reconstruct the layer L_D-1 state and final offsets in the mode's raw
    // representation so the final decode can be replayed with perturbations
    const int nq = fwd.queries.size();
    const int last = cfg_.attn.num_decoder_layers;
    det.prev_a.resize(nq, 1);
    det.prev_b.resize(nq, 1);
    det.final_dc.resize(nq, 1);
    det.final_dd.resize(nq, 1);
    const auto& prev_seg = fwd.layer_segments[last - 1];
    const auto& last_seg = fwd.layer_segments[last];
    for (int q = 0; q < nq; ++q) {
        if (cfg_.coord == CoordExpression::time_aligned) {
            det.prev_a(q, 0) = prev_seg[q].center();
            det.prev_b(q, 0) = std::log(prev_seg[q].width());
            det.final_dd(q, 0) = std::log(last_seg[q].width()) - det.prev_b(q, 0);
            det.final_dc(q, 0) = (last_seg[q].center() - det.prev_a(q, 0)) / prev_seg[q].width();
        } else {
            double dur = det.duration_sec;
            det.prev_a(q, 0) = logit(std::clamp(prev_seg[q].center() / dur, 1e-12, 1.0 - 1e-12));
            det.prev_b(q, 0) = logit(std::clamp(prev_seg[q].width() / dur, 1e-12, 1.0 - 1e-12));
            double ra = logit(std::clamp(last_seg[q].center() / dur, 1e-12, 1.0 - 1e-12));
            double rb = logit(std::clamp(last_seg[q].width() / dur, 1e-12, 1.0 - 1e-12));
            det.final_dc(q, 0) = ra - det.prev_a(q, 0);
            det.final_dd(q, 0) = rb - det.prev_b(q, 0);
        }
    }
    return det;
}

DetectionSet Model::redecode_final(const PredictDetail& detail, const Vec* eps_center,
                                   const Vec* eps_width, const PredictOptions& opts) const {
    const int nq = static_cast<int>(detail.prev_a.rows());
    std::vector<Segment> segments;
    segments.reserve(nq);
    for (int q = 0; q < nq; ++q) {
        double dc = detail.final_dc(q, 0) + (eps_center ? (*eps_center)(q) : 0.0);
        double dd = detail.final_dd(q, 0) + (eps_width ? (*eps_width)(q) : 0.0);
        if (detail.coord == CoordExpression::time_aligned) {
            double w_prev = std::exp(detail.prev_b(q, 0));
            segments.emplace_back(detail.prev_a(q, 0) + dc * w_prev,
                                  std::exp(detail.prev_b(q, 0) + dd));
        } else {
            double c = sigmoid(detail.prev_a(q, 0) + dc) * detail.duration_sec;
            double w = sigmoid(detail.prev_b(q, 0) + dd) * detail.duration_sec;
            segments.emplace_back(c, w);
        }
    }
    return assemble_detections(detail.video_id, detail.duration_sec, segments,
                               detail.final_logits, opts);
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& c) {
    json j;
    j["model_dim"] = c.pyramid.model_dim;
    j["num_levels"] = c.pyramid.num_levels;
    j["kernel_size"] = c.pyramid.kernel_size;
    j["num_heads"] = c.attn.num_heads;
    j["points_per_level"] = c.attn.points_per_level;
    j["num_encoder_layers"] = c.attn.num_encoder_layers;
    j["num_decoder_layers"] = c.attn.num_decoder_layers;
    j["encoder_self_attn"] = c.attn.encoder_self_attn;
    j["decoder_self_attn"] = c.attn.decoder_self_attn;
    j["decoder_cross_attn"] = c.attn.decoder_cross_attn;
    j["select_mode"] = to_string(c.select.mode);
    j["select_t_sector"] = c.select.t_sector;
    j["select_k"] = c.select.k;
    j["select_fixed_n"] = c.select.fixed_n;
    j["in_channels"] = c.in_channels;
    j["num_classes"] = c.num_classes;
    j["ffn_dim"] = c.ffn_dim;
    j["coord"] = to_string(c.coord);
    j["grid_mode"] = to_string(c.grid_mode);
    j["base_scale"] = c.base_scale;
    j["use_pos_enc"] = c.use_pos_enc;
    j["init_seed"] = c.init_seed;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.pyramid.model_dim = j.at("model_dim").get<int>();
    c.pyramid.num_levels = j.at("num_levels").get<int>();
    c.pyramid.kernel_size = j.at("kernel_size").get<int>();
    c.attn.num_heads = j.at("num_heads").get<int>();
    c.attn.points_per_level = j.at("points_per_level").get<int>();
    c.attn.num_encoder_layers = j.at("num_encoder_layers").get<int>();
    c.attn.num_decoder_layers = j.at("num_decoder_layers").get<int>();
    c.attn.encoder_self_attn = j.at("encoder_self_attn").get<bool>();
    c.attn.decoder_self_attn = j.at("decoder_self_attn").get<bool>();
    c.attn.decoder_cross_attn = j.at("decoder_cross_attn").get<bool>();
    c.select.mode = select_mode_from_string(j.at("select_mode").get<std::string>());
    c.select.t_sector = j.at("select_t_sector").get<int>();
    c.select.k = j.at("select_k").get<int>();
    c.select.fixed_n = j.at("select_fixed_n").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.coord = coord_expression_from_string(j.at("coord").get<std::string>());
    c.grid_mode = grid_mode_from_string(j.at("grid_mode").get<std::string>());
    c.base_scale = j.at("base_scale").get<double>();
    c.use_pos_enc = j.at("use_pos_enc").get<bool>();
    c.init_seed = j.at("init_seed").get<uint64_t>();
    return c;
}

constexpr char kMagic[9] = "TADCKPT1";

}  // namespace

void Model::save_checkpoint(const std::filesystem::path& path,
                            const std::map<std::string, std::string>& extra_scalars,
                            const std::vector<std::pair<std::string, Mat>>& extra_tensors) const {
    json header;
    header["format_version"] = 1;
    header["model"] = config_to_json(cfg_);
    header["extra"] = extra_scalars;
    json tensors = json::array();
    for (int i = 0; i < params_.count(); ++i) {
        const Mat& t = params_.value(i);
        tensors.push_back({{"name", params_.name(i)}, {"rows", t.rows()}, {"cols", t.cols()}});
    }
    for (const auto& [name, t] : extra_tensors) {
        tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    }
    header["tensors"] = tensors;
    std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(kMagic, 8);
    uint64_t hl = hs.size();
    out.write(reinterpret_cast<const char*>(&hl), sizeof(hl));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    auto write_mat = [&out](const Mat& t) {
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(sizeof(double) * t.size()));
    };
    for (int i = 0; i < params_.count(); ++i) write_mat(params_.value(i));
    for (const auto& [name, t] : extra_tensors) write_mat(t);
    if (!out) throw DataError("short write while saving checkpoint " + path.string());
}

Model::LoadedCheckpoint Model::load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw DataError("not a checkpoint file (bad magic): " + path.string());
    }
    uint64_t hl = 0;
    in.read(reinterpret_cast<char*>(&hl), sizeof(hl));
    std::string hs(hl, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hl));
    if (!in) throw DataError("truncated checkpoint header: " + path.string());
    json header;
    try {
        header = json::parse(hs);
    } catch (const json::exception& e) {
        throw DataError("malformed checkpoint header: " + std::string(e.what()));
    }

    LoadedCheckpoint loaded;
    loaded.model = std::make_unique<Model>(config_from_json(header.at("model")));
    for (auto& [k, v] : header.at("extra").items()) {
        loaded.extra_scalars[k] = v.get<std::string>();
    }
    for (const auto& tj : header.at("tensors")) {
        std::string name = tj.at("name").get<std::string>();
        long rows = tj.at("rows").get<long>();
        long cols = tj.at("cols").get<long>();
        Mat t(rows, cols);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(sizeof(double) * t.size()));
        if (!in) throw DataError("truncated tensor payload at '" + name + "'");
        int id = loaded.model->params_.find(name);
        if (id >= 0) {
            Mat& dst = loaded.model->params_.value(id);
            if (dst.rows() != rows || dst.cols() != cols) {
                throw DataError("tensor '" + name + "' has shape " + std::to_string(rows) + "x" +
                                std::to_string(cols) + ", model expects " +
                                std::to_string(dst.rows()) + "x" + std::to_string(dst.cols()));
            }
            dst = t;
        } else {
            loaded.extra_tensors.emplace_back(name, std::move(t));
        }
    }
    return loaded;
}

ModelConfig model_config_from(const Config& cfg, int in_channels, int num_classes) {
    ModelConfig c;
    c.in_channels = in_channels;
    c.num_classes = num_classes;
    int dim = cfg.get_int("model.dim", c.pyramid.model_dim);
    if (cfg.has("pyramid.model_dim")) {
        int pdim = cfg.get_int("pyramid.model_dim", dim);
        if (cfg.has("model.dim") && pdim != dim) {
            throw ConfigError("model.dim and pyramid.model_dim disagree");
        }
        dim = pdim;
    }
    c.pyramid.model_dim = dim;
    c.pyramid.num_levels = cfg.get_int("pyramid.num_levels", c.pyramid.num_levels);
    c.pyramid.kernel_size = cfg.get_int("pyramid.kernel_size", c.pyramid.kernel_size);
    c.attn.num_encoder_layers = cfg.get_int("model.enc_layers", c.attn.num_encoder_layers);
    c.attn.num_decoder_layers = cfg.get_int("model.dec_layers", c.attn.num_decoder_layers);
    c.attn.num_heads = cfg.get_int("model.heads", c.attn.num_heads);
    c.attn.points_per_level = cfg.get_int("model.points", c.attn.points_per_level);
    c.attn.encoder_self_attn = !cfg.get_bool("model.ablate_enc_self", false);
    c.attn.decoder_self_attn = !cfg.get_bool("model.ablate_dec_self", false);
    c.attn.decoder_cross_attn = !cfg.get_bool("model.ablate_dec_cross", false);
    c.ffn_dim = cfg.get_int("model.ffn_dim", c.ffn_dim);
    c.use_pos_enc = cfg.get_bool("model.pos_enc", c.use_pos_enc);
    c.coord = coord_expression_from_string(
        cfg.get_string("coord.expression", to_string(c.coord)));
    c.grid_mode = grid_mode_from_string(cfg.get_string("coord.mode", to_string(c.grid_mode)));
    c.base_scale = cfg.get_real("coord.base_scale", c.base_scale);
    c.select.mode = select_mode_from_string(cfg.get_string("select.mode", to_string(c.select.mode)));
    c.select.t_sector = cfg.get_int("select.t_sector", c.select.t_sector);
    c.select.k = cfg.get_int("select.k", c.select.k);
    c.select.fixed_n = cfg.get_int("select.fixed_n", c.select.fixed_n);
    c.init_seed = static_cast<uint64_t>(cfg.get_int64("model.seed", 1));
    c.validate();
    return c;
}

}  // namespace tad
