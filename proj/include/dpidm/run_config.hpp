#pragma once

#include <set>
#include <sstream>
#include <string>

#include "dpidm/checkpoint.hpp"
#include "dpidm/config.hpp"
#include "dpidm/network.hpp"
#include "dpidm/training.hpp"

namespace dpidm {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

inline const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys{
        "data.canvas_h", "data.canvas_w",
        "model.widths", "model.d_pose", "model.d_cond", "model.heads", "model.tsa_window",
        "model.adapter_ratio", "model.groups", "model.temb_dim",
        "diffusion.steps", "diffusion.beta_start", "diffusion.beta_end",
        "train.batch_size", "train.clip_length", "train.lr", "train.total_iters",
        "train.lambda_video", "train.keypoint_drop", "train.garment_cond_drop", "train.seed",
        "train.checkpoint_interval", "train.flip_prob", "train.codec_iters", "train.codec_lr",
        "train.codec_batch",
    };
    return keys;
}

inline RunConfig run_config_from(const KvConfig& kv) {
    const std::string unknown = kv.first_unknown_key(known_config_keys());
    if (!unknown.empty()) throw ConfigError("unknown config key: " + unknown);
    RunConfig rc;
    ModelConfig& m = rc.model;
    m.canvas_h = kv.get_int("data.canvas_h", m.canvas_h);
    m.canvas_w = kv.get_int("data.canvas_w", m.canvas_w);
    m.widths = kv.get_int_list("model.widths", m.widths);
    m.d_pose = kv.get_int("model.d_pose", m.d_pose);
    m.d_cond = kv.get_int("model.d_cond", m.d_cond);
    m.heads = static_cast<int>(kv.get_int("model.heads", m.heads));
    m.tsa_window = static_cast<int>(kv.get_int("model.tsa_window", m.tsa_window));
    m.adapter_ratio = kv.get_int("model.adapter_ratio", m.adapter_ratio);
    m.groups = static_cast<int>(kv.get_int("model.groups", m.groups));
    m.temb_dim = kv.get_int("model.temb_dim", m.temb_dim);

    TrainConfig& t = rc.train;
    t.diff_steps = kv.get_int("diffusion.steps", t.diff_steps);
    t.beta_start = kv.get_double("diffusion.beta_start", t.beta_start);
    t.beta_end = kv.get_double("diffusion.beta_end", t.beta_end);
    t.batch_size = kv.get_int("train.batch_size", t.batch_size);
    t.clip_length = kv.get_int("train.clip_length", t.clip_length);
    t.lr = kv.get_double("train.lr", t.lr);
    t.total_iters = kv.get_int("train.total_iters", t.total_iters);
    t.lambda_video = kv.get_double("train.lambda_video", t.lambda_video);
    t.keypoint_drop = kv.get_double("train.keypoint_drop", t.keypoint_drop);
    t.garment_cond_drop = kv.get_double("train.garment_cond_drop", t.garment_cond_drop);
    t.seed = static_cast<uint64_t>(kv.get_int("train.seed", static_cast<int64_t>(t.seed)));
    t.checkpoint_interval = kv.get_int("train.checkpoint_interval", t.checkpoint_interval);
    t.flip_prob = kv.get_double("train.flip_prob", t.flip_prob);
    t.codec_iters = kv.get_int("train.codec_iters", t.codec_iters);
    t.codec_lr = kv.get_double("train.codec_lr", t.codec_lr);
    t.codec_batch = kv.get_int("train.codec_batch", t.codec_batch);
    return rc;
}

// Canonical resolved snapshot; round-trips through run_config_from.
inline std::string serialize_run_config(const RunConfig& rc) {
    std::ostringstream os;
    os << "data.canvas_h = " << rc.model.canvas_h << "\n";
    os << "data.canvas_w = " << rc.model.canvas_w << "\n";
    os << "model.widths = ";
    for (size_t i = 0; i < rc.model.widths.size(); ++i) os << (i ? "," : "") << rc.model.widths[i];
    os << "\n";
    os << "model.d_pose = " << rc.model.d_pose << "\n";
    os << "model.d_cond = " << rc.model.d_cond << "\n";
    os << "model.heads = " << rc.model.heads << "\n";
    os << "model.tsa_window = " << rc.model.tsa_window << "\n";
    os << "model.adapter_ratio = " << rc.model.adapter_ratio << "\n";
    os << "model.groups = " << rc.model.groups << "\n";
    os << "model.temb_dim = " << rc.model.temb_dim << "\n";
    os << "diffusion.steps = " << rc.train.diff_steps << "\n";
    os << "diffusion.beta_start = " << rc.train.beta_start << "\n";
    os << "diffusion.beta_end = " << rc.train.beta_end << "\n";
    os << "train.batch_size = " << rc.train.batch_size << "\n";
    os << "train.clip_length = " << rc.train.clip_length << "\n";
    os << "train.lr = " << rc.train.lr << "\n";
    os << "train.total_iters = " << rc.train.total_iters << "\n";
    os << "train.lambda_video = " << rc.train.lambda_video << "\n";
    os << "train.keypoint_drop = " << rc.train.keypoint_drop << "\n";
    os << "train.garment_cond_drop = " << rc.train.garment_cond_drop << "\n";
    os << "train.seed = " << rc.train.seed << "\n";
    os << "train.checkpoint_interval = " << rc.train.checkpoint_interval << "\n";
    os << "train.flip_prob = " << rc.train.flip_prob << "\n";
    os << "train.codec_iters = " << rc.train.codec_iters << "\n";
    os << "train.codec_lr = " << rc.train.codec_lr << "\n";
    os << "train.codec_batch = " << rc.train.codec_batch << "\n";
    return os.str();
}

// Rebuilds the model from a checkpoint's config snapshot and loads weights.
inline Model<float> model_from_checkpoint(const CheckpointContainer& c, RunConfig* out_cfg = nullptr) {
    RunConfig rc = run_config_from(KvConfig::parse_text(c.config_text));
    Model<float> model = Model<float>::init(rc.model, rc.train.seed);
    load_into_model(c, model);
    if (out_cfg) *out_cfg = rc;
    return model;
}

}  // namespace dpidm
