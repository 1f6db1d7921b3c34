#include "tad/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "tad/errors.hpp"

namespace tad {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

void GenConfig::validate() const {
    if (num_videos < 1) throw ConfigError("gen.num_videos must be >= 1");
    if (!(min_sec > 0.0) || !(min_sec < max_sec)) {
        throw ConfigError("invalid length law: need 0 < gen.min_sec < gen.max_sec");
    }
    if (!(fps > 0.0) || stride < 1) throw ConfigError("gen.fps/gen.stride invalid");
    if (channels < 1 || num_classes < 1) throw ConfigError("gen.channels/gen.num_classes invalid");
    if (class_signature_dim < 1 || class_signature_dim > channels) {
        throw ConfigError("gen.class_signature_dim must be in [1, channels]");
    }
    if (!(noise_std >= 0.0)) throw ConfigError("gen.noise_std must be >= 0");
    if (!(min_gap_sec >= 0.0)) throw ConfigError("gen.min_gap_sec must be >= 0");
    if (!(val_fraction >= 0.0) || !(val_fraction < 1.0)) {
        throw ConfigError("gen.val_fraction must be in [0, 1)");
    }
    if (!(instances_per_minute >= 0.0)) throw ConfigError("gen.instances_per_minute must be >= 0");
}

std::vector<const VideoSample*> Dataset::split(bool val) const {
    std::vector<const VideoSample*> out;
    for (const auto& v : videos) {
        if (v.is_val == val) out.push_back(&v);
    }
    return out;
}

std::map<std::string, std::vector<ActionInstance>> Dataset::ground_truth(bool val) const {
    std::map<std::string, std::vector<ActionInstance>> out;
    for (const auto& v : videos) {
        if (v.is_val == val) out[v.features.meta.video_id] = v.annotations;
    }
    return out;
}

namespace {

std::string video_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "v%04d", index);
    return buf;
}

Mat class_signatures(const GenConfig& cfg) {
    // fixed random unit vectors confined to the first signature_dim channels
    Rng rng(hash_combine(cfg.seed, std::string("signatures")));
    Mat sig = Mat::Zero(cfg.num_classes, cfg.channels);
    for (int c = 0; c < cfg.num_classes; ++c) {
        double norm2 = 0.0;
        for (int j = 0; j < cfg.class_signature_dim; ++j) {
            double v = rng.normal();
            sig(c, j) = v;
            norm2 += v * v;
        }
        sig.row(c) /= std::sqrt(norm2);
    }
    return sig;
}

struct PlacedVideo {
    double duration = 0.0;
    std::vector<ActionInstance> instances;
    int dropped = 0;
};

PlacedVideo place_instances(const GenConfig& cfg, Rng& rng) {
    PlacedVideo out;
    out.duration = rng.log_uniform(cfg.min_sec, cfg.max_sec);

    int count = std::max(1, rng.poisson(out.duration * cfg.instances_per_minute / 60.0));
    std::vector<double> lengths(count);
    std::vector<int> classes(count);
    const double len_lo = 0.5;
    const double len_hi = std::max(0.15 * out.duration, len_lo * 1.2);
    for (int i = 0; i < count; ++i) {
        lengths[i] = rng.log_uniform(len_lo, len_hi);
        classes[i] = static_cast<int>(rng.below(cfg.num_classes));
    }

    // drop instances from the back until the packing fits
    auto free_space = [&](int n) {
        double used = 0.0;
        for (int i = 0; i < n; ++i) used += lengths[i];
        return out.duration - used - (n - 1) * cfg.min_gap_sec;
    };
    int n = count;
    while (n > 1 && free_space(n) < 0.0) --n;
    out.dropped = count - n;

    // spread the remaining slack over n+1 gaps
    double free = std::max(0.0, free_space(n));
    std::vector<double> weights(n + 1);
    double wsum = 0.0;
    for (auto& w : weights) {
        w = -std::log(1.0 - rng.uniform());
        wsum += w;
    }
    double t = 0.0;
    for (int i = 0; i < n; ++i) {
        t += free * weights[i] / wsum;
        double start = t;
        double end = std::min(start + lengths[i], out.duration);
        out.instances.push_back(ActionInstance{start, end, classes[i]});
        t = end + cfg.min_gap_sec;
    }
    return out;
}

void add_instance_envelope(Mat& values, const ActionInstance& inst, const Mat& signatures,
                           double snippet) {
    const double c = 0.5 * (inst.start + inst.end);
    const double w = 0.5 * (inst.end - inst.start);
    const int t0 = std::max(0, static_cast<int>(std::floor(inst.start / snippet - 0.5)));
    const int t1 =
        std::min<int>(static_cast<int>(values.rows()) - 1,
                      static_cast<int>(std::ceil(inst.end / snippet - 0.5)));
    for (int t = t0; t <= t1; ++t) {
        double tau = (t + 0.5) * snippet;
        double env = 1.0 - std::abs(tau - c) / w;
        if (env <= 0.0) continue;
        values.row(t) += env * signatures.row(inst.label);
    }
}

}  // namespace

Dataset generate(const GenConfig& cfg) {
    cfg.validate();
    Dataset ds;
    for (int c = 0; c < cfg.num_classes; ++c) ds.label_names.push_back("class_" + std::to_string(c));
    Mat signatures = class_signatures(cfg);
    const double snippet = cfg.stride / cfg.fps;
    const int num_train =
        static_cast<int>(std::lround(cfg.num_videos * (1.0 - cfg.val_fraction)));

    ds.videos.resize(cfg.num_videos);
    for (int i = 0; i < cfg.num_videos; ++i) {
        Rng rng(hash_combine(cfg.seed, static_cast<uint64_t>(i)));
        PlacedVideo placed = place_instances(cfg, rng);
        ds.dropped_instances += placed.dropped;

        VideoSample& sample = ds.videos[i];
        sample.is_val = i >= num_train;
        sample.annotations = placed.instances;

        VideoMeta& meta = sample.features.meta;
        meta.video_id = video_name(i);
        meta.fps = cfg.fps;
        meta.stride = cfg.stride;
        meta.channels = cfg.channels;
        meta.duration_sec = placed.duration;
        meta.num_features = std::max(1, static_cast<int>(std::floor(placed.duration / snippet)));

        Mat values(meta.num_features, cfg.channels);
        for (int t = 0; t < meta.num_features; ++t) {
            for (int c = 0; c < cfg.channels; ++c) values(t, c) = rng.normal(0.0, cfg.noise_std);
        }
        for (const auto& inst : placed.instances) {
            add_instance_envelope(values, inst, signatures, snippet);
        }
        // quantize to f32 so in-memory features equal their on-disk form
        for (int t = 0; t < values.rows(); ++t) {
            for (int c = 0; c < values.cols(); ++c) {
                values(t, c) = static_cast<double>(static_cast<float>(values(t, c)));
            }
        }
        sample.features.values = std::move(values);
        sample.features.validate();
    }
    return ds;
}

// ---------------------------------------------------------------------------
// on-disk format
// ---------------------------------------------------------------------------

namespace {

uint64_t feature_checksum(const std::vector<float>& buf) {
    return fnv1a64(buf.data(), buf.size() * sizeof(float));
}

std::string hex64(uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

json load_json_file(const fs::path& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw DataError("missing " + what + ": " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("malformed " + what + " (" + path.string() + "): " + e.what());
    }
}

}  // namespace

void save_dataset(const Dataset& ds, const fs::path& dir) {
    fs::create_directories(dir / "features");

    json manifest;
    manifest["version"] = 1;
    json videos = json::array();
    for (const auto& v : ds.videos) {
        const VideoMeta& m = v.features.meta;
        std::vector<float> buf(static_cast<size_t>(m.num_features) * m.channels);
        for (int t = 0; t < m.num_features; ++t) {
            for (int c = 0; c < m.channels; ++c) {
                buf[static_cast<size_t>(t) * m.channels + c] =
                    static_cast<float>(v.features.values(t, c));
            }
        }
        std::string rel = "features/" + m.video_id + ".f32";
        std::ofstream fout(dir / rel, std::ios::binary);
        if (!fout) throw DataError("cannot write " + (dir / rel).string());
        fout.write(reinterpret_cast<const char*>(buf.data()),
                   static_cast<std::streamsize>(buf.size() * sizeof(float)));

        videos.push_back({{"id", m.video_id},
                          {"fps", m.fps},
                          {"stride", m.stride},
                          {"num_features", m.num_features},
                          {"channels", m.channels},
                          {"duration_sec", m.duration_sec},
                          {"feature_file", rel},
                          {"split", v.is_val ? "val" : "train"},
                          {"checksum_fnv1a64", hex64(feature_checksum(buf))}});
    }
    manifest["videos"] = videos;
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";

    json ann;
    for (const auto& v : ds.videos) {
        json list = json::array();
        for (const auto& a : v.annotations) {
            list.push_back({{"start", a.start}, {"end", a.end}, {"label", a.label}});
        }
        ann[v.features.meta.video_id] = list;
    }
    std::ofstream(dir / "annotations.json") << ann.dump(2) << "\n";

    json labels;
    for (size_t i = 0; i < ds.label_names.size(); ++i) {
        labels[std::to_string(i)] = ds.label_names[i];
    }
    std::ofstream(dir / "labels.json") << labels.dump(2) << "\n";
}

Dataset load_dataset(const fs::path& dir) {
    json manifest = load_json_file(dir / "manifest.json", "manifest");
    if (!manifest.contains("version") || manifest["version"].get<int>() != 1) {
        throw DataError("manifest version mismatch in " + (dir / "manifest.json").string());
    }
    json ann = load_json_file(dir / "annotations.json", "annotations");
    json labels = load_json_file(dir / "labels.json", "labels file");

    Dataset ds;
    ds.label_names.resize(labels.size());
    for (auto& [k, v] : labels.items()) {
        size_t idx = std::stoul(k);
        if (idx >= ds.label_names.size()) ds.label_names.resize(idx + 1);
        ds.label_names[idx] = v.get<std::string>();
    }

    for (const auto& vj : manifest.at("videos")) {
        VideoSample sample;
        VideoMeta& m = sample.features.meta;
        m.video_id = vj.at("id").get<std::string>();
        m.fps = vj.at("fps").get<double>();
        m.stride = vj.at("stride").get<int>();
        m.num_features = vj.at("num_features").get<int>();
        m.channels = vj.at("channels").get<int>();
        m.duration_sec = vj.at("duration_sec").get<double>();
        sample.is_val = vj.at("split").get<std::string>() == "val";

        fs::path fpath = dir / vj.at("feature_file").get<std::string>();
        std::ifstream fin(fpath, std::ios::binary);
        if (!fin) throw DataError("missing feature file " + fpath.string());
        fin.seekg(0, std::ios::end);
        auto bytes = static_cast<size_t>(fin.tellg());
        fin.seekg(0);
        size_t expected = static_cast<size_t>(m.num_features) * m.channels * sizeof(float);
        if (bytes != expected) {
            throw DataError("feature shape mismatch for video " + m.video_id + ": " + fpath.string() +
                            " holds " + std::to_string(bytes) + " bytes, manifest implies " +
                            std::to_string(expected));
        }
        std::vector<float> buf(static_cast<size_t>(m.num_features) * m.channels);
        fin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
        if (!fin) throw DataError("short read on " + fpath.string());
        if (vj.contains("checksum_fnv1a64")) {
            if (hex64(feature_checksum(buf)) != vj.at("checksum_fnv1a64").get<std::string>()) {
                throw DataError("checksum failure for video " + m.video_id + " (" + fpath.string() +
                                ")");
            }
        }
        Mat values(m.num_features, m.channels);
        for (int t = 0; t < m.num_features; ++t) {
            for (int c = 0; c < m.channels; ++c) {
                values(t, c) = buf[static_cast<size_t>(t) * m.channels + c];
            }
        }
        sample.features.values = std::move(values);
        sample.features.validate();

        if (ann.contains(m.video_id)) {
            for (const auto& aj : ann.at(m.video_id)) {
                sample.annotations.push_back(ActionInstance{aj.at("start").get<double>(),
                                                            aj.at("end").get<double>(),
                                                            aj.at("label").get<int>()});
            }
        }
        ds.videos.push_back(std::move(sample));
    }
    return ds;
}

}  // namespace tad
