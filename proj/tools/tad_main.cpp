#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "tad/config.hpp"
#include "tad/errors.hpp"
#include "tad/metrics.hpp"
#include "tad/model.hpp"
#include "tad/svgplot.hpp"
#include "tad/synth.hpp"
#include "tad/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace tad;

namespace {

// ---------------------------------------------------------------------------
// config plumbing
// ---------------------------------------------------------------------------

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
    Config cfg;
    if (!path.empty()) cfg = Config::from_file(path);
    for (const std::string& kv : overrides) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

GenConfig gen_config_from(const Config& cfg) {
    GenConfig g;
    g.seed = static_cast<uint64_t>(cfg.get_int64("gen.seed", 1));
    g.num_videos = cfg.get_int("gen.num_videos", g.num_videos);
    g.min_sec = cfg.get_real("gen.min_sec", g.min_sec);
    g.max_sec = cfg.get_real("gen.max_sec", g.max_sec);
    g.fps = cfg.get_real("gen.fps", g.fps);
    g.stride = cfg.get_int("gen.stride", g.stride);
    g.channels = cfg.get_int("gen.channels", g.channels);
    g.num_classes = cfg.get_int("gen.num_classes", g.num_classes);
    g.instances_per_minute = cfg.get_real("gen.instances_per_minute", g.instances_per_minute);
    g.class_signature_dim = cfg.get_int("gen.class_signature_dim", g.class_signature_dim);
    g.noise_std = cfg.get_real("gen.noise_std", g.noise_std);
    g.min_gap_sec = cfg.get_real("gen.min_gap_sec", g.min_gap_sec);
    g.val_fraction = cfg.get_real("gen.val_fraction", g.val_fraction);
    g.validate();
    return g;
}

TrainConfig train_config_from(const Config& cfg) {
    TrainConfig t;
    t.epochs = cfg.get_int("train.epochs", t.epochs);
    t.batch_size = cfg.get_int("train.batch_size", t.batch_size);
    t.learning_rate = cfg.get_real("train.learning_rate", t.learning_rate);
    t.weight_decay = cfg.get_real("train.weight_decay", t.weight_decay);
    t.grad_clip_norm = cfg.get_real("train.grad_clip_norm", t.grad_clip_norm);
    t.seed = static_cast<uint64_t>(cfg.get_int64("train.seed", 1));
    t.eval_every = cfg.get_int("train.eval_every", t.eval_every);
    t.checkpoint_every = cfg.get_int("train.checkpoint_every", t.checkpoint_every);
    return t;
}

LossWeights loss_weights_from(const Config& cfg) {
    LossWeights w;
    w.w_cls = cfg.get_real("loss.w_cls", w.w_cls);
    w.w_diou = cfg.get_real("loss.w_diou", w.w_diou);
    w.w_logwidth = cfg.get_real("loss.w_logwidth", w.w_logwidth);
    w.focal_gamma = cfg.get_real("loss.focal_gamma", w.focal_gamma);
    w.focal_alpha = cfg.get_real("loss.focal_alpha", w.focal_alpha);
    w.aux_enabled = cfg.get_bool("loss.aux", w.aux_enabled);
    w.validate();
    return w;
}

EvalConfig eval_config_from(const Config& cfg) {
    EvalConfig e;
    e.iou_thresholds = cfg.get_real_list("eval.iou", e.iou_thresholds);
    if (cfg.has("eval.top_n_cap")) e.top_n_cap = cfg.get_int("eval.top_n_cap", 0);
    if (cfg.has("eval.buckets")) {
        auto edges = cfg.get_real_list("eval.buckets", {});
        if (edges.size() != 4) throw ConfigError("eval.buckets needs exactly 4 edges");
        e.bucket_edges = {{edges[0], edges[1], edges[2], edges[3]}};
    }
    e.validate();
    return e;
}

void reject_unread_keys(const Config& cfg) {
    auto unread = cfg.unread_keys();
    if (unread.empty()) return;
    std::string msg = "unknown config keys:";
    for (const auto& k : unread) msg += " " + k;
    throw ConfigError(msg);
}

int dataset_channels(const Dataset& ds) { return ds.videos.at(0).features.meta.channels; }
int dataset_classes(const Dataset& ds) { return static_cast<int>(ds.label_names.size()); }

Dataset load_dataset_checked(const std::string& dir) {
    if (dir.empty()) throw ConfigError("--data is required");
    if (!fs::exists(dir)) throw DataError("dataset directory not found: " + dir);
    Dataset ds = load_dataset(dir);
    if (ds.videos.empty()) throw DataError("dataset is empty: " + dir);
    return ds;
}

// ---------------------------------------------------------------------------
// shared output helpers
// ---------------------------------------------------------------------------

json map_table_to_json(const MapTable& t) {
    json j;
    j["thresholds"] = t.thresholds;
    j["per_threshold"] = t.per_threshold;
    j["average"] = t.average;
    return j;
}

json fn_buckets_to_json(const FnBuckets& fb) {
    json j;
    j["edges_sec"] = fb.edges;
    j["labels"] = std::vector<std::string>{FnBuckets::kLabels[0], FnBuckets::kLabels[1],
                                           FnBuckets::kLabels[2], FnBuckets::kLabels[3],
                                           FnBuckets::kLabels[4]};
    j["gt_counts"] = fb.gt_counts;
    j["fn_counts"] = fb.fn_counts;
    j["rates"] = fb.rates;
    return j;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json predictions_to_json(const std::vector<DetectionSet>& preds) {
    json j = json::object();
    for (const auto& ds : preds) {
        json list = json::array();
        for (const auto& d : ds.items) {
            list.push_back({{"start", d.segment.start()},
                            {"end", d.segment.end()},
                            {"label", d.label},
                            {"score", d.score}});
        }
        j[ds.video_id] = list;
    }
    return j;
}

std::vector<DetectionSet> predict_split(const Model& model,
                                        const std::vector<const VideoSample*>& videos,
                                        const PredictOptions& opts) {
    std::vector<DetectionSet> preds;
    preds.reserve(videos.size());
    for (const VideoSample* v : videos) preds.push_back(model.predict(v->features, opts));
    return preds;
}

/// Rebuild a loaded model under a modified config (e.g. forced fixed top-k);
/// parameter tensors carry over by name.
std::unique_ptr<Model> rebuild_with_config(const Model& src, const ModelConfig& cfg) {
    auto out = std::make_unique<Model>(cfg);
    for (int i = 0; i < src.params().count(); ++i) {
        int id = out->params().find(src.params().name(i));
        if (id < 0) throw DataError("parameter " + src.params().name(i) + " missing after rebuild");
        out->params().value(id) = src.params().value(i);
    }
    return out;
}

struct EvalOutputs {
    MapTable map;
    FnBuckets fn;
};

EvalOutputs evaluate_preds(const std::vector<DetectionSet>& preds, const GroundTruth& gts,
                           const EvalConfig& ecfg) {
    EvalOutputs out;
    out.map = mean_ap(preds, gts, ecfg);
    out.fn = false_negative_buckets(preds, gts, ecfg);
    return out;
}

std::string map_summary_line(const std::string& name, const MapTable& t) {
    std::string line = name + ":";
    char buf[64];
    for (size_t i = 0; i < t.thresholds.size(); ++i) {
        std::snprintf(buf, sizeof(buf), " mAP@%.2f=%.4f", t.thresholds[i], t.per_threshold[i]);
        line += buf;
    }
    std::snprintf(buf, sizeof(buf), " mAP@AVG=%.4f", t.average);
    line += buf;
    return line;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    long long seed = -1;  // <0: keep config value
};

int cmd_generate(const CommonArgs& common, const std::string& out_dir, bool force) {
    Config cfg = load_config(common.config_path, common.overrides);
    if (common.seed >= 0) cfg.set("gen.seed", std::to_string(common.seed));
    GenConfig gc = gen_config_from(cfg);
    reject_unread_keys(cfg);
    if (out_dir.empty()) throw ConfigError("--out is required");
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force) {
        throw ConfigError("output directory " + out_dir + " is not empty (use --force)");
    }

    Dataset ds = generate(gc);
    save_dataset(ds, out_dir);

    std::vector<double> durations;
    long instances = 0;
    int train_count = 0;
    for (const auto& v : ds.videos) {
        durations.push_back(v.features.meta.duration_sec);
        instances += static_cast<long>(v.annotations.size());
        train_count += v.is_val ? 0 : 1;
    }
    std::sort(durations.begin(), durations.end());
    auto q = [&](double p) { return durations[static_cast<size_t>(p * (durations.size() - 1))]; };
    std::cout << "wrote " << ds.videos.size() << " videos (" << train_count << " train, "
              << ds.videos.size() - train_count << " val) to " << out_dir << "\n"
              << "durations sec: min=" << durations.front() << " q25=" << q(0.25)
              << " median=" << q(0.5) << " q75=" << q(0.75) << " max=" << durations.back() << "\n"
              << "instances: " << instances << " total";
    if (ds.dropped_instances > 0) {
        std::cout << " (" << ds.dropped_instances << " dropped to satisfy packing)";
    }
    std::cout << "\n";
    return 0;
}

json history_to_json(const Config& cfg_echo, const TrainResult& result) {
    json j;
    json echo = json::object();
    for (const auto& [k, v] : cfg_echo.entries()) echo[k] = v;
    j["config"] = echo;
    json epochs = json::array();
    for (const auto& e : result.history) {
        json ej;
        ej["epoch"] = e.epoch;
        ej["loss_total"] = e.loss_total;
        ej["loss_cls"] = e.loss_cls;
        ej["loss_diou"] = e.loss_diou;
        ej["loss_logwidth"] = e.loss_logwidth;
        ej["loss_encoder"] = e.loss_encoder;
        if (!std::isnan(e.instability)) ej["instability"] = e.instability;
        if (!std::isnan(e.map_avg)) ej["map_avg"] = e.map_avg;
        epochs.push_back(ej);
    }
    j["epochs"] = epochs;
    return j;
}

int cmd_train(const CommonArgs& common, const std::string& data_dir, const std::string& out_dir,
              int threads, int epochs_override, const std::string& resume_path) {
    Config cfg = load_config(common.config_path, common.overrides);
    if (common.seed >= 0) cfg.set("train.seed", std::to_string(common.seed));
    if (epochs_override >= 0) cfg.set("train.epochs", std::to_string(epochs_override));
    if (out_dir.empty()) throw ConfigError("--out is required");

    Dataset ds = load_dataset_checked(data_dir);
    TrainConfig tc = train_config_from(cfg);
    tc.threads = threads;
    tc.checkpoint_dir = (fs::path(out_dir) / "checkpoints").string();
    LossWeights lw = loss_weights_from(cfg);
    EvalConfig ec = eval_config_from(cfg);

    std::unique_ptr<Model> model;
    Model::LoadedCheckpoint resume;
    if (!resume_path.empty()) {
        resume = Model::load_checkpoint(resume_path);
        model = std::move(resume.model);
        // the checkpoint is authoritative for the architecture
    } else {
        ModelConfig mc = model_config_from(cfg, dataset_channels(ds), dataset_classes(ds));
        model = std::make_unique<Model>(mc);
    }
    reject_unread_keys(cfg);
    fs::create_directories(out_dir);

    TrainResult result = train(*model, ds, tc, lw, ec,
                               resume_path.empty() ? nullptr : &resume);

    write_json(fs::path(out_dir) / "history.json", history_to_json(cfg, result));
    json is_curves;
    is_curves["epochs"] = json::array();
    for (const auto& e : result.history) {
        if (!std::isnan(e.instability)) {
            is_curves["epochs"].push_back({{"epoch", e.epoch}, {"is", e.instability}});
        }
    }
    write_json(fs::path(out_dir) / "is_log.json", is_curves);

    const auto& last = result.history.back();
    std::cout << "trained " << result.history.size() << " epochs; final loss "
              << last.loss_total;
    if (!std::isnan(last.map_avg)) std::cout << " val mAP@AVG " << last.map_avg;
    std::cout << "\ncheckpoint: "
              << (fs::path(tc.checkpoint_dir) / ("epoch_" + std::to_string(last.epoch) + ".ckpt"))
                     .string()
              << "\n";
    return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& data_dir, const std::string& ckpt,
             const std::string& out_dir, double nms_thr, int fixed_topk,
             const std::string& iou_list, const std::string& split, int top_n) {
    Config cfg = load_config(common.config_path, common.overrides);
    if (!iou_list.empty()) cfg.set("eval.iou", iou_list);
    if (top_n > 0) cfg.set("eval.top_n_cap", std::to_string(top_n));
    EvalConfig ec = eval_config_from(cfg);
    if (out_dir.empty()) throw ConfigError("--out is required");
    if (ckpt.empty()) throw ConfigError("--checkpoint is required");

    Dataset ds = load_dataset_checked(data_dir);
    auto loaded = Model::load_checkpoint(ckpt);
    std::unique_ptr<Model> model = std::move(loaded.model);

    // reject config-file attempts to silently change the model architecture
    for (const auto& [k, v] : cfg.entries()) {
        if (k.rfind("model.", 0) == 0 || k.rfind("pyramid.", 0) == 0 ||
            k.rfind("coord.", 0) == 0 || k.rfind("select.", 0) == 0) {
            throw ConfigError("checkpoint/config mismatch: '" + k +
                              "' cannot be overridden at eval time (the checkpoint is "
                              "authoritative); use the dedicated flags instead");
        }
    }
    reject_unread_keys(cfg);

    if (fixed_topk > 0) {
        ModelConfig mc = model->config();
        mc.select.mode = SelectMode::fixed;
        mc.select.fixed_n = fixed_topk;
        model = rebuild_with_config(*model, mc);
    }

    bool use_val = split != "train";
    auto videos = ds.split(use_val);
    if (videos.empty()) throw DataError("requested split has no videos");
    GroundTruth gts = ds.ground_truth(use_val);

    PredictOptions popts;
    if (ec.top_n_cap) popts.top_n_cap = ec.top_n_cap;
    std::vector<DetectionSet> preds = predict_split(*model, videos, popts);

    fs::create_directories(out_dir);
    EvalOutputs plain = evaluate_preds(preds, gts, ec);
    write_json(fs::path(out_dir) / "predictions.json", predictions_to_json(preds));
    json results;
    results["map"] = map_table_to_json(plain.map);
    results["fn_buckets"] = fn_buckets_to_json(plain.fn);
    results["num_videos"] = videos.size();
    write_json(fs::path(out_dir) / "results.json", results);

    std::string summary = map_summary_line("no-postprocessing", plain.map) + "\n";
    if (nms_thr > 0.0) {
        std::vector<DetectionSet> suppressed;
        suppressed.reserve(preds.size());
        for (const auto& p : preds) suppressed.push_back(nms(p, nms_thr));
        EvalOutputs with_nms = evaluate_preds(suppressed, gts, ec);
        write_json(fs::path(out_dir) / "predictions_nms.json", predictions_to_json(suppressed));
        json nms_results;
        nms_results["map"] = map_table_to_json(with_nms.map);
        nms_results["fn_buckets"] = fn_buckets_to_json(with_nms.fn);
        nms_results["nms_iou"] = nms_thr;
        nms_results["delta_vs_plain"] = with_nms.map.average - plain.map.average;
        write_json(fs::path(out_dir) / "results_nms.json", nms_results);
        summary += map_summary_line("with-nms", with_nms.map) + "\n";
        char buf[96];
        std::snprintf(buf, sizeof(buf), "nms delta: %+.4f\n",
                      with_nms.map.average - plain.map.average);
        summary += buf;
    }
    write_text(fs::path(out_dir) / "summary.txt", summary);
    std::cout << summary;
    return 0;
}

int cmd_probe_noise(const CommonArgs& common, const std::string& data_dir,
                    const std::string& ckpt, const std::string& out_dir,
                    const std::string& alphas_str, int trials, const std::string& iou_list) {
    Config cfg = load_config(common.config_path, common.overrides);
    if (!iou_list.empty()) cfg.set("eval.iou", iou_list);
    EvalConfig ec = eval_config_from(cfg);
    reject_unread_keys(cfg);
    if (ckpt.empty()) throw ConfigError("--checkpoint is required");
    if (out_dir.empty()) throw ConfigError("--out is required");
    if (trials < 1) throw ConfigError("--trials must be >= 1");

    std::vector<double> alphas;
    for (const auto& tok : split(alphas_str, ',')) {
        if (tok.empty()) continue;
        char* end = nullptr;
        double v = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0') {
            throw ConfigError("non-numeric alpha '" + tok + "'");
        }
        if (v < 0) throw ConfigError("alphas must be >= 0");
        alphas.push_back(v);
    }
    if (alphas.empty()) throw ConfigError("--alphas list is empty");

    Dataset ds = load_dataset_checked(data_dir);
    auto loaded = Model::load_checkpoint(ckpt);
    auto videos = ds.split(true);
    if (videos.empty()) throw DataError("no validation videos to probe");

    uint64_t seed = common.seed >= 0 ? static_cast<uint64_t>(common.seed) : 1;
    json out;
    out["alphas"] = alphas;
    out["trials"] = trials;
    out["coord"] = to_string(loaded.model->config().coord);
    json per_target = json::object();
    std::vector<svg::Series> series;
    for (NoiseTarget target : {NoiseTarget::center, NoiseTarget::width}) {
        std::string name = target == NoiseTarget::center ? "center" : "width";
        json deltas = json::array();
        svg::Series s;
        s.label = name;
        for (double a : alphas) {
            NoiseProbeResult r = noise_probe(*loaded.model, videos, a, target, trials, seed, ec);
            deltas.push_back({{"alpha", a},
                              {"delta_map_avg", r.mean_delta},
                              {"clean_map_avg", r.clean_map}});
            s.xs.push_back(a);
            s.ys.push_back(r.mean_delta);
        }
        per_target[name] = deltas;
        series.push_back(s);
    }
    out["delta_map"] = per_target;
    fs::create_directories(out_dir);
    write_json(fs::path(out_dir) / "noise_probe.json", out);
    svg::write_line_chart(fs::path(out_dir) / "noise_probe.svg",
                          "noise sensitivity (delta mAP@AVG)", "alpha", "delta mAP@AVG", series);
    std::cout << "noise probe written to " << out_dir << "\n";
    return 0;
}

int cmd_ablate(const CommonArgs& common, const std::string& data_dir, const std::string& grid_path,
               const std::string& out_dir, int threads) {
    if (grid_path.empty()) throw ConfigError("--grid is required");
    if (out_dir.empty()) throw ConfigError("--out is required");
    std::ifstream gin(grid_path);
    if (!gin) throw DataError("cannot open grid file " + grid_path);
    json grid;
    try {
        grid = json::parse(gin);
    } catch (const json::exception& e) {
        throw ConfigError("malformed grid file: " + std::string(e.what()));
    }
    if (!grid.contains("axes") || !grid["axes"].is_array() || grid["axes"].empty()) {
        throw ConfigError("grid file needs a non-empty 'axes' array");
    }

    Dataset ds = load_dataset_checked(data_dir);

    // cross product of axis values
    struct Axis {
        std::string key;
        std::vector<std::string> values;
    };
    std::vector<Axis> axes;
    for (const auto& aj : grid["axes"]) {
        Axis axis;
        axis.key = aj.at("key").get<std::string>();
        for (const auto& v : aj.at("values")) axis.values.push_back(v.get<std::string>());
        if (axis.values.empty()) throw ConfigError("axis '" + axis.key + "' has no values");
        axes.push_back(axis);
    }
    size_t total = 1;
    for (const auto& a : axes) total *= a.values.size();

    // training cells are grouped so eval-only axes reuse the trained model
    struct Cell {
        std::map<std::string, std::string> assignment;
        std::string train_key;
    };
    std::vector<Cell> cells;
    for (size_t index = 0; index < total; ++index) {
        size_t rest = index;
        Cell cell;
        for (const auto& a : axes) {
            cell.assignment[a.key] = a.values[rest % a.values.size()];
            rest /= a.values.size();
        }
        for (const auto& [k, v] : cell.assignment) {
            if (k.rfind("eval.", 0) != 0) cell.train_key += k + "=" + v + ";";
        }
        cells.push_back(cell);
    }

    fs::create_directories(out_dir);
    std::map<std::string, fs::path> trained;  // train_key -> checkpoint path
    json rows = json::array();
    std::string summary;
    json is_curves = json::object();

    for (size_t ci = 0; ci < cells.size(); ++ci) {
        const Cell& cell = cells[ci];
        Config cfg = load_config(common.config_path, common.overrides);
        if (grid.contains("base")) {
            for (const auto& [k, v] : grid["base"].items()) {
                cfg.set(k, v.is_string() ? v.get<std::string>() : v.dump());
            }
        }
        double nms_iou = 0.0;
        for (const auto& [k, v] : cell.assignment) {
            if (k == "eval.nms") {
                if (v != "off") {
                    char* end = nullptr;
                    nms_iou = std::strtod(v.c_str(), &end);
                    if (end == v.c_str() || *end != '\0' || nms_iou <= 0 || nms_iou >= 1) {
                        throw ConfigError("eval.nms must be 'off' or a threshold in (0,1), got " +
                                          v);
                    }
                }
            } else {
                cfg.set(k, v);
            }
        }
        if (common.seed >= 0) cfg.set("train.seed", std::to_string(common.seed));

        TrainConfig tc = train_config_from(cfg);
        tc.threads = threads;
        LossWeights lwt = loss_weights_from(cfg);
        EvalConfig ec = eval_config_from(cfg);
        ModelConfig mc = model_config_from(cfg, dataset_channels(ds), dataset_classes(ds));
        reject_unread_keys(cfg);

        fs::path cell_dir = fs::path(out_dir) / ("cell_" + std::to_string(ci));
        double final_is = std::numeric_limits<double>::quiet_NaN();
        fs::path ckpt;
        auto it = trained.find(cell.train_key);
        if (it == trained.end()) {
            Model model(mc);
            tc.checkpoint_dir = (cell_dir / "checkpoints").string();
            TrainResult tr = train(model, ds, tc, lwt, ec);
            ckpt = fs::path(tc.checkpoint_dir) /
                   ("epoch_" + std::to_string(tr.history.back().epoch) + ".ckpt");
            trained[cell.train_key] = ckpt;
            json curve = json::array();
            for (const auto& e : tr.history) {
                if (!std::isnan(e.instability)) {
                    curve.push_back({{"epoch", e.epoch}, {"is", e.instability}});
                }
            }
            is_curves[cell.train_key] = curve;
        } else {
            ckpt = it->second;
        }

        auto loaded = Model::load_checkpoint(ckpt);
        auto videos = ds.split(true);
        GroundTruth gts = ds.ground_truth(true);
        std::vector<DetectionSet> preds = predict_split(*loaded.model, videos, {});
        if (nms_iou > 0.0) {
            std::vector<DetectionSet> sup;
            sup.reserve(preds.size());
            for (const auto& p : preds) sup.push_back(nms(p, nms_iou));
            preds = std::move(sup);
        }
        MapTable map = mean_ap(preds, gts, ec);
        if (!is_curves[cell.train_key].empty()) {
            final_is = is_curves[cell.train_key].back().at("is").get<double>();
        }

        json row;
        json assign = json::object();
        for (const auto& [k, v] : cell.assignment) assign[k] = v;
        row["cell"] = assign;
        row["map"] = map_table_to_json(map);
        if (!std::isnan(final_is)) row["final_is"] = final_is;
        rows.push_back(row);

        std::string line;
        for (const auto& [k, v] : cell.assignment) line += k + "=" + v + " ";
        char buf[96];
        std::snprintf(buf, sizeof(buf), "-> mAP@AVG=%.4f final_IS=%.4f", map.average, final_is);
        summary += line + buf + "\n";
    }

    json out;
    out["rows"] = rows;
    write_json(fs::path(out_dir) / "ablate_results.json", out);
    write_json(fs::path(out_dir) / "is_curves.json", is_curves);
    write_text(fs::path(out_dir) / "ablate_summary.txt", summary);

    std::vector<svg::Series> is_series;
    for (const auto& [key, curve] : is_curves.items()) {
        svg::Series s;
        s.label = key.empty() ? "default" : key;
        for (const auto& pt : curve) {
            s.xs.push_back(pt.at("epoch").get<double>());
            s.ys.push_back(pt.at("is").get<double>());
        }
        is_series.push_back(s);
    }
    if (!is_series.empty()) {
        svg::write_line_chart(fs::path(out_dir) / "is_curves.svg", "matching instability",
                              "epoch", "IS", is_series);
    }
    std::cout << summary;
    return 0;
}

int cmd_plot(const std::string& input_path, const std::string& out_dir) {
    if (input_path.empty()) throw ConfigError("--history is required");
    if (out_dir.empty()) throw ConfigError("--out is required");
    std::ifstream in(input_path);
    if (!in) throw DataError("cannot open " + input_path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("malformed history file: " + std::string(e.what()));
    }
    fs::create_directories(out_dir);

    if (j.contains("epochs")) {
        // training history: loss curves + IS curve
        svg::Series loss, is;
        loss.label = "loss_total";
        is.label = "IS";
        std::vector<svg::Series> map_series;
        svg::Series map_s;
        map_s.label = "val mAP@AVG";
        for (const auto& e : j["epochs"]) {
            if (!e.contains("epoch") || !e.contains("loss_total")) {
                throw DataError("history schema error: epochs entries need 'epoch' and "
                                "'loss_total'");
            }
            double ep = e["epoch"].get<double>();
            loss.xs.push_back(ep);
            loss.ys.push_back(e["loss_total"].get<double>());
            if (e.contains("instability")) {
                is.xs.push_back(ep);
                is.ys.push_back(e["instability"].get<double>());
            }
            if (e.contains("map_avg")) {
                map_s.xs.push_back(ep);
                map_s.ys.push_back(e["map_avg"].get<double>());
            }
        }
        svg::write_line_chart(fs::path(out_dir) / "loss_curve.svg", "training loss", "epoch",
                              "loss", {loss});
        if (!is.xs.empty()) {
            svg::write_line_chart(fs::path(out_dir) / "is_curve.svg", "matching instability",
                                  "epoch", "IS", {is});
        }
        if (!map_s.xs.empty()) {
            svg::write_line_chart(fs::path(out_dir) / "map_curve.svg", "validation mAP@AVG",
                                  "epoch", "mAP@AVG", {map_s});
        }
        std::cout << "wrote training curves to " << out_dir << "\n";
        return 0;
    }
    if (j.contains("fn_buckets")) {
        const auto& fb = j["fn_buckets"];
        if (!fb.contains("rates") || !fb.contains("labels")) {
            throw DataError("results schema error: fn_buckets needs 'rates' and 'labels'");
        }
        svg::Series rates;
        rates.label = "FN rate";
        std::vector<std::string> labels;
        for (const auto& l : fb["labels"]) labels.push_back(l.get<std::string>());
        for (const auto& r : fb["rates"]) rates.ys.push_back(r.get<double>());
        svg::write_bar_chart(fs::path(out_dir) / "fn_buckets.svg",
                             "false negatives by instance length", labels, {rates});
        std::cout << "wrote fn bucket chart to " << out_dir << "\n";
        return 0;
    }
    if (j.contains("delta_map")) {
        std::vector<svg::Series> series;
        for (const auto& [name, deltas] : j["delta_map"].items()) {
            svg::Series s;
            s.label = name;
            for (const auto& d : deltas) {
                s.xs.push_back(d.at("alpha").get<double>());
                s.ys.push_back(d.at("delta_map_avg").get<double>());
            }
            series.push_back(s);
        }
        svg::write_line_chart(fs::path(out_dir) / "noise_probe.svg",
                              "noise sensitivity (delta mAP@AVG)", "alpha", "delta mAP@AVG",
                              series);
        std::cout << "wrote noise chart to " << out_dir << "\n";
        return 0;
    }
    throw DataError("history schema error: expected 'epochs', 'fn_buckets' or 'delta_map'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"query-based temporal action detection on synthetic timelines"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string data_dir, out_dir, ckpt, grid_path, resume_path;
    std::string alphas = "0.01,0.1,0.3";
    std::string iou_list, split = "val", history_path;
    bool force = false;
    int threads = 0, trials = 20, fixed_topk = 0, epochs_override = -1, top_n = 0;
    double nms_thr = 0.0;

    auto add_common = [&](CLI::App* cmd, bool with_config = true) {
        if (with_config) {
            cmd->add_option("--config", common.config_path, "key=value config file");
            cmd->add_option("--set", common.overrides, "override: key=value (repeatable)");
        }
        cmd->add_option("--seed", common.seed, "master seed override");
    };

    CLI::App* gen = app.add_subcommand("generate-data", "write a synthetic dataset directory");
    add_common(gen);
    gen->add_option("--out", out_dir, "output dataset directory")->required();
    gen->add_flag("--force", force, "overwrite a non-empty output directory");

    CLI::App* train_cmd = app.add_subcommand("train", "train a detector");
    add_common(train_cmd);
    train_cmd->add_option("--data", data_dir, "dataset directory")->required();
    train_cmd->add_option("--out", out_dir, "run output directory")->required();
    train_cmd->add_option("--threads", threads, "worker threads (0 = auto)");
    train_cmd->add_option("--epochs", epochs_override, "override train.epochs");
    train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (NMS-free by default)");
    add_common(eval_cmd);
    eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
    eval_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    eval_cmd->add_option("--out", out_dir, "output directory")->required();
    eval_cmd->add_option("--nms", nms_thr, "also evaluate with NMS at this IoU");
    eval_cmd->add_option("--fixed-topk", fixed_topk, "switch query selection to global top-N");
    eval_cmd->add_option("--iou", iou_list, "comma-separated IoU thresholds");
    eval_cmd->add_option("--split", split, "val (default) or train");
    eval_cmd->add_option("--top-n", top_n, "cap detections per video before scoring");

    CLI::App* ablate_cmd = app.add_subcommand("ablate", "run a config grid and tabulate results");
    add_common(ablate_cmd);
    ablate_cmd->add_option("--data", data_dir, "dataset directory")->required();
    ablate_cmd->add_option("--grid", grid_path, "grid JSON file")->required();
    ablate_cmd->add_option("--out", out_dir, "output directory")->required();
    ablate_cmd->add_option("--threads", threads, "worker threads per cell (0 = auto)");

    CLI::App* probe_cmd = app.add_subcommand("probe-noise", "offset-noise sensitivity probe");
    add_common(probe_cmd);
    probe_cmd->add_option("--data", data_dir, "dataset directory")->required();
    probe_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    probe_cmd->add_option("--out", out_dir, "output directory")->required();
    probe_cmd->add_option("--alphas", alphas, "comma-separated noise amplitudes");
    probe_cmd->add_option("--trials", trials, "trials per amplitude");
    probe_cmd->add_option("--iou", iou_list, "comma-separated IoU thresholds");

    CLI::App* plot_cmd = app.add_subcommand("plot", "render charts from result JSON files");
    plot_cmd->add_option("--history", history_path, "history/results/noise JSON file")->required();
    plot_cmd->add_option("--out", out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_generate(common, out_dir, force);
        if (train_cmd->parsed()) {
            return cmd_train(common, data_dir, out_dir, threads, epochs_override, resume_path);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(common, data_dir, ckpt, out_dir, nms_thr, fixed_topk, iou_list, split,
                            top_n);
        }
        if (ablate_cmd->parsed()) {
            return cmd_ablate(common, data_dir, grid_path, out_dir, threads);
        }
        if (probe_cmd->parsed()) {
            return cmd_probe_noise(common, data_dir, ckpt, out_dir, alphas, trials, iou_list);
        }
        if (plot_cmd->parsed()) return cmd_plot(history_path, out_dir);
        std::cerr << "error: config: no subcommand\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: data: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: runtime: " << e.what() << "\n";
        return 4;
    }
}
