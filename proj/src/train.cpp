#include "tad/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <thread>

#include "tad/errors.hpp"

namespace tad {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (!(grad_clip_norm > 0.0)) throw ConfigError("train.grad_clip_norm must be > 0");
    if (eval_every < 0 || checkpoint_every < 0 || threads < 0) {
        throw ConfigError("train.eval_every/checkpoint_every/threads must be >= 0");
    }
}

namespace {

struct Adam {
    std::vector<Mat> m, v;
    long step = 0;
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    void init(const nn::ParamStore& ps) {
        m.resize(ps.count());
        v.resize(ps.count());
        for (int i = 0; i < ps.count(); ++i) {
            m[i] = Mat::Zero(ps.value(i).rows(), ps.value(i).cols());
            v[i] = Mat::Zero(ps.value(i).rows(), ps.value(i).cols());
        }
    }

    void update(nn::ParamStore& ps, const std::vector<Mat>& grads, double lr, double wd) {
        ++step;
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
        for (int i = 0; i < ps.count(); ++i) {
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grads[i];
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grads[i].cwiseProduct(grads[i]);
            Mat& p = ps.value(i);
            p -= lr * ((m[i] / bc1).array() / ((v[i] / bc2).array().sqrt() + kEps)).matrix();
            p -= (lr * wd) * p;
        }
    }
};

struct VideoResult {
    std::vector<Mat> grads;
    LossBreakdown breakdown;
    std::string video_id;
    std::exception_ptr error;  // captured so worker threads never unwind
};

void run_video(const Model& model, const VideoSample& video, const LossWeights& weights,
               VideoResult& out) {
    out.video_id = video.features.meta.video_id;
    try {
        ad::Graph g;
        g.reserve(2048);
        Model::LossResult res = model.forward_loss(g, video.features, video.annotations, weights);
        out.breakdown = res.loss.breakdown;
        if (!std::isfinite(out.breakdown.total)) {
            throw NumericError("non-finite loss on video " + out.video_id);
        }
        g.backward(res.loss.loss);
        res.fwd.binding.export_grads(out.grads);
    } catch (...) {
        out.error = std::current_exception();
    }
}

void rethrow_video_error(const VideoResult& r) {
    try {
        std::rethrow_exception(r.error);
    } catch (const ConfigError&) {
        throw;
    } catch (const DataError&) {
        throw;
    } catch (const NumericError&) {
        throw;
    } catch (const std::exception& e) {
        throw NumericError("failure on video " + r.video_id + ": " + e.what());
    }
}

int auto_threads(int requested) {
    if (requested > 0) return requested;
    unsigned hw = std::thread::hardware_concurrency();
    return std::max(1, std::min<int>(static_cast<int>(hw), 8));
}

}  // namespace

TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg,
                  const LossWeights& weights, const EvalConfig& eval_cfg,
                  const Model::LoadedCheckpoint* resume) {
    cfg.validate();
    weights.validate();
    std::vector<const VideoSample*> train_videos = data.split(false);
    if (train_videos.empty()) throw DataError("train: dataset has no training videos");
    std::vector<const VideoSample*> val_videos = data.split(true);
    const int threads = auto_threads(cfg.threads);

    // batches group videos of similar length (sorted by T0, stable on id)
    std::vector<int> by_length(train_videos.size());
    for (size_t i = 0; i < by_length.size(); ++i) by_length[i] = static_cast<int>(i);
    std::sort(by_length.begin(), by_length.end(), [&](int a, int b) {
        int ta = train_videos[a]->features.meta.num_features;
        int tb = train_videos[b]->features.meta.num_features;
        if (ta != tb) return ta < tb;
        return train_videos[a]->features.meta.video_id < train_videos[b]->features.meta.video_id;
    });
    std::vector<std::vector<int>> batches;
    for (size_t at = 0; at < by_length.size(); at += cfg.batch_size) {
        size_t end = std::min(by_length.size(), at + cfg.batch_size);
        batches.emplace_back(by_length.begin() + at, by_length.begin() + end);
    }

    // schedule: short linear warmup, cosine decay to 10% over the full run
    const long total_steps = static_cast<long>(batches.size()) * cfg.epochs;
    const long warmup_steps = std::min<long>(100, total_steps / 20 + 1);
    auto lr_at = [&](long step) {
        double warm = step < warmup_steps ? static_cast<double>(step + 1) / warmup_steps : 1.0;
        double t = total_steps > 0 ? static_cast<double>(step) / total_steps : 0.0;
        double cos_factor = 0.1 + 0.45 * (1.0 + std::cos(M_PI * t));
        return cfg.learning_rate * warm * cos_factor;
    };

    Adam adam;
    adam.init(model.params());
    int start_epoch = 1;
    if (resume != nullptr) {
        for (const auto& [name, tensor] : resume->extra_tensors) {
            if (name.rfind("opt.m.", 0) == 0) {
                int id = model.params().find(name.substr(6));
                if (id < 0) throw DataError("resume: unknown optimizer tensor " + name);
                adam.m[id] = tensor;
            } else if (name.rfind("opt.v.", 0) == 0) {
                int id = model.params().find(name.substr(6));
                if (id < 0) throw DataError("resume: unknown optimizer tensor " + name);
                adam.v[id] = tensor;
            }
        }
        auto it = resume->extra_scalars.find("adam_step");
        if (it != resume->extra_scalars.end()) adam.step = std::stol(it->second);
        it = resume->extra_scalars.find("epoch");
        if (it != resume->extra_scalars.end()) start_epoch = std::stoi(it->second) + 1;
    }

    TrainResult result;
    GroundTruth val_gt = data.ground_truth(true);

    auto save_ckpt = [&](int epoch) {
        if (cfg.checkpoint_dir.empty()) return;
        std::filesystem::create_directories(cfg.checkpoint_dir);
        std::vector<std::pair<std::string, Mat>> extra;
        for (int i = 0; i < model.params().count(); ++i) {
            extra.emplace_back("opt.m." + model.params().name(i), adam.m[i]);
            extra.emplace_back("opt.v." + model.params().name(i), adam.v[i]);
        }
        std::map<std::string, std::string> scalars{
            {"epoch", std::to_string(epoch)},
            {"adam_step", std::to_string(adam.step)},
        };
        model.save_checkpoint(std::filesystem::path(cfg.checkpoint_dir) /
                                  ("epoch_" + std::to_string(epoch) + ".ckpt"),
                              scalars, extra);
    };

    std::vector<Mat> batch_grads(model.params().count());

    for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        // shuffle batch order: pure function of (seed, epoch)
        std::vector<int> order(batches.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        Rng shuffle_rng(hash_combine(hash_combine(cfg.seed, std::string("shuffle")),
                                     static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        EpochStats stats;
        stats.epoch = epoch;
        long video_count = 0;

        for (int bi : order) {
            const std::vector<int>& batch = batches[bi];
            std::vector<VideoResult> results(batch.size());

            if (threads <= 1 || batch.size() <= 1) {
                for (size_t i = 0; i < batch.size(); ++i) {
                    run_video(model, *train_videos[batch[i]], weights, results[i]);
                }
            } else {
                std::vector<std::thread> pool;
                std::atomic<size_t> next{0};
                for (int w = 0; w < std::min<int>(threads, static_cast<int>(batch.size())); ++w) {
                    pool.emplace_back([&]() {
                        for (;;) {
                            size_t i = next.fetch_add(1);
                            if (i >= batch.size()) break;
                            run_video(model, *train_videos[batch[i]], weights, results[i]);
                        }
                    });
                }
                for (auto& th : pool) th.join();
            }

            // reduce in video order -> identical for any thread count
            for (int p = 0; p < model.params().count(); ++p) {
                batch_grads[p] = Mat::Zero(model.params().value(p).rows(),
                                           model.params().value(p).cols());
            }
            for (const VideoResult& r : results) {
                if (r.error) rethrow_video_error(r);
                for (int p = 0; p < model.params().count(); ++p) batch_grads[p] += r.grads[p];
                stats.loss_total += r.breakdown.total;
                stats.loss_cls += r.breakdown.cls;
                stats.loss_diou += r.breakdown.diou;
                stats.loss_logwidth += r.breakdown.logwidth;
                stats.loss_encoder += r.breakdown.encoder;
                ++video_count;
            }
            const double inv_b = 1.0 / static_cast<double>(batch.size());
            double norm2 = 0.0;
            for (auto& gmat : batch_grads) {
                gmat *= inv_b;
                norm2 += gmat.squaredNorm();
            }
            double norm = std::sqrt(norm2);
            if (norm > cfg.grad_clip_norm) {
                double scale = cfg.grad_clip_norm / norm;
                for (auto& gmat : batch_grads) gmat *= scale;
            }
            adam.update(model.params(), batch_grads, lr_at(adam.step), cfg.weight_decay);

            // record final-layer assignments for the instability log
            for (size_t i = 0; i < batch.size(); ++i) {
                const VideoSample& video = *train_videos[batch[i]];
                const MatchResult& match = results[i].breakdown.per_layer.back();
                result.is_log.record(epoch, video.features.meta.video_id,
                                     match.gt_to_query(static_cast<int>(video.annotations.size())));
            }
        }

        stats.loss_total /= static_cast<double>(video_count);
        stats.loss_cls /= static_cast<double>(video_count);
        stats.loss_diou /= static_cast<double>(video_count);
        stats.loss_logwidth /= static_cast<double>(video_count);
        stats.loss_encoder /= static_cast<double>(video_count);
        if (epoch > start_epoch || (resume != nullptr && result.is_log.has_epoch(epoch - 1))) {
            stats.instability = result.is_log.instability(epoch);
        }

        if (cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) &&
            !val_videos.empty()) {
            std::vector<DetectionSet> preds;
            preds.reserve(val_videos.size());
            for (const VideoSample* v : val_videos) preds.push_back(model.predict(v->features));
            stats.map_avg = mean_ap(preds, val_gt, eval_cfg).average;
        }

        stats.wall_sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(stats);

        bool last = epoch == cfg.epochs;
        if (last || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)) {
            save_ckpt(epoch);
        }
    }
    return result;
}

}  // namespace tad
