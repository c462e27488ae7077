#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dpidm/checkpoint.hpp"
#include "dpidm/diffusion.hpp"
#include "dpidm/pipeline.hpp"

namespace dpidm {

template <typename T>
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::map<std::string, Tensor<T>> m, v;
    std::map<std::string, int64_t> steps;

    void apply(ParamStore<T>& params, const std::string& name, const Tensor<T>& grad) {
        Tensor<T>& p = params.at(name);
        if (!p.same_shape(grad)) throw ShapeError("adam: grad shape mismatch for " + name);
        Tensor<T>& mm = m.try_emplace(name, Tensor<T>(p.shape)).first->second;
        Tensor<T>& vv = v.try_emplace(name, Tensor<T>(p.shape)).first->second;
        const int64_t t = ++steps[name];
        const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
        const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(beta1, static_cast<double>(t))));
        const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(beta2, static_cast<double>(t))));
        const T step_size = static_cast<T>(lr);
        const T e = static_cast<T>(eps);
        for (int64_t i = 0; i < p.numel(); ++i) {
            mm[i] = b1 * mm[i] + (T(1) - b1) * grad[i];
            vv[i] = b2 * vv[i] + (T(1) - b2) * grad[i] * grad[i];
            p[i] -= step_size * (mm[i] * c1) / (std::sqrt(vv[i] * c2) + e);
        }
    }
};

struct TrainConfig {
    int64_t batch_size = 4;
    int64_t clip_length = 8;
    double lr = 3e-4;
    int64_t total_iters = 2000;
    double lambda_video = 1e-3;
    double keypoint_drop = 0.05;
    double garment_cond_drop = 0.1;
    uint64_t seed = 0;
    int64_t checkpoint_interval = 500;
    double flip_prob = 0.5;
    int64_t codec_iters = 400;
    double codec_lr = 2e-3;
    int64_t codec_batch = 8;
    int64_t diff_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;

    void validate() const {
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (clip_length < 2) throw ConfigError("train.clip_length must be >= 2 for video phases");
        if (!(lr > 0)) throw ConfigError("train.lr must be positive");
        if (total_iters < 0) throw ConfigError("train.total_iters must be >= 0");
        if (keypoint_drop < 0 || keypoint_drop > 1) throw ConfigError("train.keypoint_drop in [0,1]");
        if (garment_cond_drop < 0 || garment_cond_drop > 1)
            throw ConfigError("train.garment_cond_drop in [0,1]");
    }
};

struct StepRecord {
    int64_t iter = 0;
    char phase = 'A';
    double ldm = 0, tra = 0, total = 0;
};

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<StepRecord>& log) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write metrics log: " + path.string());
    f << "iter,phase,ldm,tra,total\n";
    for (const auto& r : log)
        f << r.iter << "," << r.phase << "," << r.ldm << "," << r.tra << "," << r.total << "\n";
}

// Training phase -> trainable parameter groups. The four attention families
// alternate per the joint image-video strategy; everything else except the
// frozen codec trains in both phases.
inline bool phase_trains(char phase, ParamGroup g) {
    switch (g) {
        case ParamGroup::codec: return false;
        case ParamGroup::shared: return true;
        case ParamGroup::pasa:
        case ParamGroup::ca: return phase == 'A';
        case ParamGroup::tsa:
        case ParamGroup::pata: return phase == 'B';
    }
    return false;
}

template <typename T>
class Trainer {
  public:
    Trainer(Model<T>& model, TrainConfig cfg)
        : model_(model),
          cfg_(std::move(cfg)),
          sched_(NoiseSchedule::linear(cfg_.diff_steps, cfg_.beta_start, cfg_.beta_end)) {
        cfg_.validate();
        adam_.lr = cfg_.lr;
    }

    const NoiseSchedule& schedule() const { return sched_; }
    AdamState<T>& adam() { return adam_; }
    const std::vector<StepRecord>& log() const { return log_; }

    // Reconstruction pretraining of the latent codec, then per-channel latent
    // standardization statistics. The codec is frozen afterwards.
    void pretrain_codec(const std::vector<TryOnSample>& data) {
        if (data.empty()) throw ConfigError("dataset is empty");
        AdamState<T> codec_adam;
        codec_adam.lr = cfg_.codec_lr;
        std::vector<std::string> codec_params;
        for (const auto& name : model_.params.order())
            if (param_group(name) == ParamGroup::codec && name.rfind("codec.norm", 0) != 0)
                codec_params.push_back(name);

        for (int64_t it = 0; it < cfg_.codec_iters; ++it) {
            Rng rng(mix_seed(cfg_.seed, 0xC0DEC + static_cast<uint64_t>(it)));
            Tensor<T> x = sample_frames(data, cfg_.codec_batch, rng);
            Tape<T> tape;
            TapeModel<T> tm(tape, model_, [&](const std::string& n) {
                return param_group(n) == ParamGroup::codec && n.rfind("codec.norm", 0) != 0;
            });
            Value z = codec_encode_tape(tape, tm, tape.constant(x), false);
            Value y = codec_decode_tape(tape, tm, z, false);
            Value loss = tape.mse(y, tape.constant(x));
            tape.backward(loss);
            const double lv = static_cast<double>(tape.val(loss)[0]);
            if (!std::isfinite(lv))
                throw NumericError("codec pretraining diverged at iter " + std::to_string(it));
            for (const auto& name : codec_params)
                if (tape.has_grad(tm.at(name))) codec_adam.apply(model_.params, name, tape.grad(tm.at(name)));
        }
        compute_latent_stats(data);
    }

    // One optimizer step. Even iterations are phase A (single random frames,
    // image mode, lambda = 0, PASA/CA groups); odd iterations are phase B
    // (T consecutive frames, video mode, lambda = lambda_video, TSA/PATA).
    StepRecord train_step(int64_t iter, const std::vector<TryOnSample>& data) {
        if (data.empty()) throw ConfigError("dataset is empty");
        const char phase = iter % 2 == 0 ? 'A' : 'B';
        const ClipMode mode = phase == 'A' ? ClipMode::image : ClipMode::video;
        LossConfig loss_cfg;
        loss_cfg.lambda = phase == 'A' ? 0.0 : cfg_.lambda_video;

        const uint64_t step_seed = mix_seed(cfg_.seed, 0x57E9000ull + static_cast<uint64_t>(iter));
        Rng sel(mix_seed(step_seed, 0x5E1));

        Tape<T> tape;
        TapeModel<T> tm(tape, model_, [&](const std::string& n) {
            return phase_trains(phase, param_group(n));
        });

        Value total{};
        double ldm_sum = 0, tra_sum = 0;
        for (int64_t b = 0; b < cfg_.batch_size; ++b) {
            const auto& sample = data[static_cast<size_t>(sel.uniform_int(static_cast<int64_t>(data.size())))];
            const int64_t frames = sample.target_video.shape[0];
            int64_t t0 = 0, len = 1;
            if (mode == ClipMode::image) {
                t0 = sel.uniform_int(frames);
                len = 1;
            } else {
                len = std::min(cfg_.clip_length, frames);
                t0 = sel.uniform_int(frames - len + 1);
            }
            Prepared prep = prepare_clip(sample, t0, len, step_seed, b);
            DenoiseValues dv = denoise_step_tape(tape, tm, prep.batch, mode, prep.dropped);
            TotalLossValues<T> lv = total_loss_tape(tape, dv.eps, tape.constant(prep.eps),
                                                    mode == ClipMode::video ? dv.records
                                                                            : std::vector<Value>{},
                                                    loss_cfg);
            ldm_sum += static_cast<double>(tape.val(lv.ldm)[0]);
            tra_sum += static_cast<double>(tape.val(lv.tra)[0]);
            total = b == 0 ? lv.total : tape.add(total, lv.total);
        }
        total = tape.scale(total, static_cast<T>(1.0 / static_cast<double>(cfg_.batch_size)));

        StepRecord rec;
        rec.iter = iter;
        rec.phase = phase;
        rec.ldm = ldm_sum / static_cast<double>(cfg_.batch_size);
        rec.tra = tra_sum / static_cast<double>(cfg_.batch_size);
        rec.total = rec.ldm + loss_cfg.lambda * rec.tra;
        if (!std::isfinite(rec.total))
            throw NumericError("non-finite training loss at iter " + std::to_string(iter) + " phase " +
                               std::string(1, phase) + ": ldm=" + std::to_string(rec.ldm) +
                               " tra=" + std::to_string(rec.tra));

        tape.backward(total);
        for (const auto& name : model_.params.order()) {
            if (!phase_trains(phase, param_group(name))) continue;
            const Value v = tm.at(name);
            if (tape.has_grad(v)) adam_.apply(model_.params, name, tape.grad(v));
        }
        return rec;
    }

    void run(const std::vector<TryOnSample>& data,
             const std::function<void(int64_t)>& on_checkpoint = {}) {
        if (data.empty()) throw ConfigError("dataset is empty");
        if (cfg_.codec_iters > 0) pretrain_codec(data);
        for (int64_t iter = 0; iter < cfg_.total_iters; ++iter) {
            log_.push_back(train_step(iter, data));
            if (on_checkpoint && cfg_.checkpoint_interval > 0 &&
                (iter + 1) % cfg_.checkpoint_interval == 0)
                on_checkpoint(iter + 1);
        }
    }

    struct Prepared {
        DenoiseBatch<T> batch;
        Tensor<T> eps;
        bool dropped = false;
    };

    // Clip extraction + augmentation + encoding for one batch slot.
    Prepared prepare_clip(const TryOnSample& sample, int64_t t0, int64_t len, uint64_t step_seed,
                          int64_t slot) {
        Rng aug(mix_seed(step_seed, 0xA06000ull + static_cast<uint64_t>(slot)));
        const bool flip = aug.bernoulli(cfg_.flip_prob);
        const bool dropped = aug.bernoulli(cfg_.garment_cond_drop);
        const int64_t t_step = aug.uniform_int(sched_.num_steps());

        Tensor<T> target = clip_frames(sample.target_video, t0, len).template cast<T>();
        Tensor<T> agnostic = clip_frames(sample.agnostic_video, t0, len).template cast<T>();
        Tensor<T> mask = clip_frames(sample.agnostic_mask, t0, len).template cast<T>();
        Tensor<T> garment = sample.garment_image.template cast<T>();
        std::vector<SkeletonPose> poses(sample.human_pose.begin() + t0,
                                        sample.human_pose.begin() + t0 + len);
        SkeletonPose gpose = sample.garment_pose;

        const int64_t W = target.shape[3];
        if (flip) {
            target = flip_horizontal(target);
            agnostic = flip_horizontal(agnostic);
            mask = flip_horizontal(mask);
            garment = flip_horizontal(garment);
            for (auto& p : poses) p = mirror_pose(p, W);
            gpose = mirror_pose(gpose, W);
        }
        for (size_t f = 0; f < poses.size(); ++f)
            poses[f] = drop_keypoints(poses[f], cfg_.keypoint_drop,
                                      mix_seed(step_seed, 0xD509000ull + static_cast<uint64_t>(slot) * 1024 + f));
        gpose = drop_keypoints(gpose, cfg_.keypoint_drop,
                               mix_seed(step_seed, 0xD50A000ull + static_cast<uint64_t>(slot)));

        Prepared prep;
        prep.batch = make_conditions(model_, agnostic, mask, poses, gpose, garment);
        prep.dropped = dropped;
        Tensor<T> z0 = encode_latent(model_, target);
        Rng nrng(mix_seed(step_seed, 0xEE5000ull + static_cast<uint64_t>(slot)));
        prep.eps = Tensor<T>(z0.shape);
        for (auto& v : prep.eps.data) v = static_cast<T>(nrng.normal());
        prep.batch.z_t = add_noise(z0, prep.eps, sched_, t_step);
        prep.batch.t = t_step;
        return prep;
    }

  private:
    Model<T>& model_;
    TrainConfig cfg_;
    NoiseSchedule sched_;
    AdamState<T> adam_;
    std::vector<StepRecord> log_;

    Tensor<T> sample_frames(const std::vector<TryOnSample>& data, int64_t count, Rng& rng) {
        const int64_t H = data[0].target_video.shape[2], W = data[0].target_video.shape[3];
        Tensor<T> out(Shape{count, 3, H, W});
        const int64_t chw = 3 * H * W;
        for (int64_t i = 0; i < count; ++i) {
            const auto& s = data[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(data.size())))];
            const Tensor<float>* src = &s.target_video;
            if (rng.bernoulli(0.25)) src = &s.source_video;
            const int64_t f = rng.uniform_int(src->shape[0]);
            for (int64_t p = 0; p < chw; ++p)
                out[i * chw + p] = static_cast<T>(src->ptr()[f * chw + p]);
        }
        return out;
    }

    void compute_latent_stats(const std::vector<TryOnSample>& data) {
        Rng rng(mix_seed(cfg_.seed, 0x57A75));
        const int64_t n_frames = std::min<int64_t>(64, static_cast<int64_t>(data.size()) * 4);
        Tensor<T> frames = sample_frames(data, n_frames, rng);
        Tape<T> tape(false);
        TapeModel<T> tm(tape, model_);
        Tensor<T> z = tape.val(codec_encode_tape(tape, tm, tape.constant(frames), false));
        const int64_t C = z.shape[1], per = z.numel() / C, HW = z.shape[2] * z.shape[3];
        Tensor<T>& mean = model_.params.at("codec.norm_mean");
        Tensor<T>& stdv = model_.params.at("codec.norm_std");
        for (int64_t c = 0; c < C; ++c) {
            double mu = 0;
            for (int64_t n = 0; n < z.shape[0]; ++n) {
                const T* row = z.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) mu += static_cast<double>(row[i]);
            }
            mu /= static_cast<double>(per);
            double var = 0;
            for (int64_t n = 0; n < z.shape[0]; ++n) {
                const T* row = z.ptr() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    const double d = static_cast<double>(row[i]) - mu;
                    var += d * d;
                }
            }
            var /= static_cast<double>(per);
            mean[c] = static_cast<T>(mu);
            stdv[c] = static_cast<T>(std::max(1e-3, std::sqrt(var)));
        }
    }
};

// Mean absolute reconstruction error of the frozen codec on given frames.
template <typename T>
double codec_mae(const Model<T>& model, const Tensor<T>& frames) {
    const Tensor<T> rec = decode_latent(model, encode_latent(model, frames));
    double acc = 0;
    for (int64_t i = 0; i < frames.numel(); ++i)
        acc += std::abs(static_cast<double>(rec[i]) - static_cast<double>(frames[i]));
    return acc / static_cast<double>(frames.numel());
}

inline CheckpointContainer pack_checkpoint(const Model<float>& model, const AdamState<float>& adam,
                                           uint64_t iteration, const std::string& config_text) {
    CheckpointContainer c;
    c.config_text = config_text;
    c.iteration = iteration;
    for (const auto& name : model.params.order()) c.params.emplace_back(name, model.params.at(name));
    for (const auto& [name, t] : adam.m) c.opt_state.emplace_back("adam.m." + name, t);
    for (const auto& [name, t] : adam.v) c.opt_state.emplace_back("adam.v." + name, t);
    for (const auto& [name, s] : adam.steps) {
        Tensor<float> t(Shape{1});
        t[0] = static_cast<float>(s);
        c.opt_state.emplace_back("adam.t." + name, t);
    }
    return c;
}

inline void unpack_optimizer(const CheckpointContainer& c, AdamState<float>& adam) {
    for (const auto& [name, t] : c.opt_state) {
        if (name.rfind("adam.m.", 0) == 0)
            adam.m[name.substr(7)] = t;
        else if (name.rfind("adam.v.", 0) == 0)
            adam.v[name.substr(7)] = t;
        else if (name.rfind("adam.t.", 0) == 0)
            adam.steps[name.substr(7)] = static_cast<int64_t>(t[0]);
    }
}

}  // namespace dpidm
