// dpidm — desk-scale video virtual try-on: data generation, training,
// sampling, evaluation, and checkpoint inspection.
//
// Exit codes: 0 success, 2 usage/config error, 3 numerical failure,
// 4 checkpoint incompatibility.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dpidm/inference.hpp"
#include "dpidm/metrics.hpp"
#include "dpidm/run_config.hpp"
#include "dpidm/synthdata.hpp"

namespace fs = std::filesystem;
using namespace dpidm;

namespace {

std::pair<int64_t, int64_t> parse_size(const std::string& s) {
    const size_t x = s.find('x');
    if (x == std::string::npos) throw ConfigError("--size must be HxW, e.g. 64x48");
    try {
        return {std::stoll(s.substr(0, x)), std::stoll(s.substr(x + 1))};
    } catch (...) {
        throw ConfigError("--size must be HxW, e.g. 64x48");
    }
}

std::vector<SceneSpec> make_specs(int64_t count, uint64_t seed, int64_t frames, int64_t h, int64_t w) {
    std::vector<SceneSpec> specs;
    for (int64_t i = 0; i < count; ++i) {
        SceneSpec spec;
        spec.seed = mix_seed(seed, 0xDA7A + static_cast<uint64_t>(i));
        spec.num_frames = frames;
        spec.canvas_h = h;
        spec.canvas_w = w;
        spec.motion = static_cast<MotionProfile>(i % 3);
        spec.garment_kind = static_cast<GarmentKind>((i / 3) % 3);
        spec.texture = static_cast<TextureKind>(i % 3);
        Rng prng(mix_seed(spec.seed, 0x9A1));
        for (auto& c : spec.palette)
            c = Rgb{static_cast<float>(prng.uniform(0.1, 0.95)), static_cast<float>(prng.uniform(0.1, 0.95)),
                    static_cast<float>(prng.uniform(0.1, 0.95))};
        spec.validate();
        specs.push_back(spec);
    }
    return specs;
}

std::vector<TryOnSample> load_dataset(const fs::path& manifest_path) {
    const auto entries = read_manifest(manifest_path);
    const fs::path root = manifest_path.parent_path();
    std::vector<TryOnSample> data;
    data.reserve(entries.size());
    for (const auto& e : entries) data.push_back(read_sample(root / e.dir));
    return data;
}

void write_frames(const Tensor<float>& frames, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    const int64_t N = frames.shape[0], H = frames.shape[2], W = frames.shape[3];
    const int64_t chw = 3 * H * W;
    for (int64_t f = 0; f < N; ++f) {
        Tensor<float> img(Shape{3, H, W});
        std::copy_n(frames.ptr() + f * chw, chw, img.ptr());
        char name[32];
        std::snprintf(name, sizeof(name), "out_%04lld.png", static_cast<long long>(f));
        write_png(out_dir / name, to_image_u8(img));
    }
}

void write_contact_sheet(const Tensor<float>& frames, const fs::path& path) {
    const int64_t N = frames.shape[0], H = frames.shape[2], W = frames.shape[3];
    const int64_t cols = std::min<int64_t>(8, N);
    const int64_t rows = (N + cols - 1) / cols;
    Tensor<float> sheet(Shape{3, rows * H, cols * W}, 1.f);
    for (int64_t f = 0; f < N; ++f) {
        const int64_t r = f / cols, c = f % cols;
        for (int64_t ch = 0; ch < 3; ++ch)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x)
                    sheet.at(ch, r * H + y, c * W + x) = frames.at(f, ch, y, x);
    }
    write_png(path, to_image_u8(sheet));
}

TryOnInput<float> tryon_input_from(const TryOnSample& sample, const Tensor<float>& garment_image,
                                   const SkeletonPose& garment_pose) {
    TryOnInput<float> in;
    in.source = sample.source_video;
    in.mask = sample.agnostic_mask;
    in.human_poses = sample.human_pose;
    in.garment_image = garment_image;
    in.garment_pose = garment_pose;
    return in;
}

int cmd_make_data(const std::string& out, int64_t count, uint64_t seed, int64_t frames,
                  const std::string& size) {
    const auto [h, w] = parse_size(size);
    const auto specs = make_specs(count, seed, frames, h, w);
    const fs::path manifest = write_dataset(specs, out);
    std::cout << manifest.string() << "\n";
    return 0;
}

int cmd_train(const std::string& data, const std::string& config, const std::string& out) {
    KvConfig kv = config.empty() ? KvConfig{} : KvConfig::parse_file(config);
    RunConfig rc = run_config_from(kv);

    const auto dataset = load_dataset(data);
    if (dataset.empty()) throw ConfigError("dataset is empty: " + data);
    rc.model.canvas_h = dataset[0].target_video.shape[2];
    rc.model.canvas_w = dataset[0].target_video.shape[3];
    if (kv.has("data.canvas_h") && kv.get_int("data.canvas_h", 0) != rc.model.canvas_h)
        throw ConfigError("data.canvas_h does not match dataset frames");
    if (kv.has("data.canvas_w") && kv.get_int("data.canvas_w", 0) != rc.model.canvas_w)
        throw ConfigError("data.canvas_w does not match dataset frames");
    rc.model.validate();

    fs::create_directories(out);
    Model<float> model = Model<float>::init(rc.model, rc.train.seed);
    Trainer<float> trainer(model, rc.train);
    const std::string snapshot = serialize_run_config(rc);
    auto save = [&](int64_t iter, const fs::path& path) {
        save_checkpoint(path, pack_checkpoint(model, trainer.adam(), static_cast<uint64_t>(iter), snapshot));
    };
    try {
        trainer.run(dataset, [&](int64_t iter) {
            char name[48];
            std::snprintf(name, sizeof(name), "ckpt_%06lld.bin", static_cast<long long>(iter));
            save(iter, fs::path(out) / name);
        });
    } catch (const NumericError& e) {
        const fs::path dump = fs::path(out) / "diagnostics.txt";
        std::ofstream d(dump);
        d << e.what() << "\n";
        write_metrics_csv(fs::path(out) / "metrics.csv", trainer.log());
        std::cerr << "error: " << e.what() << "\ndiagnostics: " << dump.string() << "\n";
        return 3;
    }
    save(rc.train.total_iters, fs::path(out) / "checkpoint.bin");
    write_metrics_csv(fs::path(out) / "metrics.csv", trainer.log());
    std::cout << (fs::path(out) / "checkpoint.bin").string() << "\n";
    return 0;
}

struct GarmentRef {
    Tensor<float> image;
    SkeletonPose pose;
};

GarmentRef load_garment(const std::string& path) {
    GarmentRef g;
    if (fs::is_directory(path)) {
        g.image = from_image_u8<float>(read_png(fs::path(path) / "garment.png"));
        g.pose = read_poses_txt(fs::path(path) / "poses.txt").second;
    } else {
        g.image = from_image_u8<float>(read_png(path));
        g.pose = SkeletonPose::empty(SkeletonKind::garment_upper);  // landmarks unknown: all absent
    }
    return g;
}

int cmd_sample(const std::string& ckpt, const std::string& video, const std::string& garment,
               const std::string& out, int64_t window, int64_t stride, int64_t steps,
               double guidance, uint64_t seed) {
    const CheckpointContainer c = load_checkpoint(ckpt);
    RunConfig rc;
    Model<float> model = model_from_checkpoint(c, &rc);
    const TryOnSample sample = read_sample(video);
    if (sample.source_video.shape[2] != rc.model.canvas_h ||
        sample.source_video.shape[3] != rc.model.canvas_w)
        throw ConfigError("input video resolution does not match the checkpoint");
    const GarmentRef g = load_garment(garment);

    TryOnOptions opt;
    opt.window = window > 0 ? window : rc.train.clip_length;
    opt.stride = stride > 0 ? stride : std::max<int64_t>(1, opt.window / 2);
    opt.steps = steps;
    opt.guidance = guidance;
    opt.seed = seed;
    std::cout << "window=" << opt.window << " stride=" << opt.stride << " steps=" << opt.steps
              << " guidance=" << opt.guidance << " seed=" << opt.seed << "\n";
    const NoiseSchedule sched = NoiseSchedule::linear(rc.train.diff_steps, rc.train.beta_start,
                                                      rc.train.beta_end);
    const Tensor<float> frames =
        tryon_video(model, tryon_input_from(sample, g.image, g.pose), opt, sched);
    write_frames(frames, out);
    write_contact_sheet(frames, fs::path(out) / "sheet.png");
    std::cout << out << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out,
             int64_t steps, uint64_t seed, bool bypass) {
    std::unique_ptr<Model<float>> model;
    RunConfig rc;
    if (!bypass) {
        const CheckpointContainer c = load_checkpoint(ckpt);
        model = std::make_unique<Model<float>>(model_from_checkpoint(c, &rc));
    }
    const auto entries = read_manifest(data);
    const fs::path root = fs::path(data).parent_path();
    std::ofstream csv(out);
    if (!csv) throw IoError("cannot write report: " + out);
    csv << "sample_id,ssim,flicker_raw,flicker_excess,tra_stat\n";
    double sum_ssim = 0, sum_raw = 0, sum_excess = 0, sum_tra = 0;
    const NoiseSchedule sched = bypass ? NoiseSchedule::linear(200)
                                       : NoiseSchedule::linear(rc.train.diff_steps,
                                                               rc.train.beta_start, rc.train.beta_end);
    for (const auto& e : entries) {
        const TryOnSample sample = read_sample(root / e.dir);
        Tensor<float> output;
        double tra = 0;
        if (bypass) {
            output = sample.target_video;
        } else {
            TryOnOptions opt;
            opt.window = std::min<int64_t>(rc.train.clip_length, sample.source_video.shape[0]);
            opt.stride = std::max<int64_t>(1, opt.window / 2);
            opt.steps = steps;
            opt.guidance = 1.5;
            opt.seed = seed;
            output = tryon_video(*model,
                                 tryon_input_from(sample, sample.garment_image, sample.garment_pose),
                                 opt, sched);
            if (sample.target_video.shape[0] >= 2)
                tra = tra_statistic(*model, {sample}, sched, rc.train.clip_length);
        }
        const int64_t N = output.shape[0], chw = output.numel() / N;
        double s = 0;
        for (int64_t f = 0; f < N; ++f) {
            Tensor<float> a(Shape{3, output.shape[2], output.shape[3]});
            Tensor<float> b = a;
            std::copy_n(output.ptr() + f * chw, chw, a.ptr());
            std::copy_n(sample.target_video.ptr() + f * chw, chw, b.ptr());
            s += ssim(a, b);
        }
        s /= static_cast<double>(N);
        FlickerResult fl{0, 0};
        if (N >= 2) fl = flicker_index(output, sample.target_video, sample.agnostic_mask);
        csv << e.dir << "," << s << "," << fl.raw << "," << fl.excess << "," << tra << "\n";
        sum_ssim += s;
        sum_raw += fl.raw;
        sum_excess += fl.excess;
        sum_tra += tra;
    }
    if (!entries.empty()) {
        const double n = static_cast<double>(entries.size());
        csv << "mean," << sum_ssim / n << "," << sum_raw / n << "," << sum_excess / n << ","
            << sum_tra / n << "\n";
    }
    std::cout << out << "\n";
    return 0;
}

int cmd_inspect(const std::string& ckpt) {
    const CheckpointContainer c = load_checkpoint(ckpt);
    std::cout << "version: " << c.version << "\niteration: " << c.iteration << "\nconfig:\n";
    std::istringstream cfg(c.config_text);
    std::string line;
    while (std::getline(cfg, line)) std::cout << "  " << line << "\n";
    int64_t total = 0;
    std::cout << "parameters (" << c.params.size() << "):\n";
    for (const auto& [name, t] : c.params) {
        std::cout << "  " << name << " " << shape_str(t.shape) << "\n";
        total += t.numel();
    }
    std::cout << "total parameter count: " << total << "\n";
    std::cout << "optimizer entries: " << c.opt_state.size() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dpidm: pose-interaction video try-on diffusion, desk scale"};
    app.require_subcommand(1);

    auto* mk = app.add_subcommand("make-data", "generate a synthetic try-on dataset");
    std::string mk_out, mk_size = "64x48";
    int64_t mk_count = 8, mk_frames = 8;
    uint64_t mk_seed = 0;
    mk->add_option("--out", mk_out, "output dataset root")->required();
    mk->add_option("--count", mk_count, "number of samples");
    mk->add_option("--seed", mk_seed, "dataset seed");
    mk->add_option("--frames", mk_frames, "frames per video");
    mk->add_option("--size", mk_size, "canvas HxW");

    auto* tr = app.add_subcommand("train", "train on a dataset manifest");
    std::string tr_data, tr_config, tr_out;
    tr->add_option("--data", tr_data, "dataset manifest path")->required();
    tr->add_option("--config", tr_config, "key = value config file");
    tr->add_option("--out", tr_out, "output directory")->required();

    auto* sa = app.add_subcommand("sample", "run try-on on a video");
    std::string sa_ckpt, sa_video, sa_garment, sa_out;
    int64_t sa_window = 0, sa_stride = 0, sa_steps = 20;
    double sa_guidance = 1.5;
    uint64_t sa_seed = 0;
    sa->add_option("--ckpt", sa_ckpt, "checkpoint path")->required();
    sa->add_option("--video", sa_video, "input sample directory")->required();
    sa->add_option("--garment", sa_garment, "garment sample directory or PNG")->required();
    sa->add_option("--out", sa_out, "output directory")->required();
    sa->add_option("--window", sa_window, "sliding window length (default: training clip length)");
    sa->add_option("--stride", sa_stride, "window stride (default: window/2)");
    sa->add_option("--steps", sa_steps, "DDIM steps");
    sa->add_option("--guidance", sa_guidance, "classifier-free guidance scale");
    sa->add_option("--seed", sa_seed, "sampling seed");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a test manifest");
    std::string ev_ckpt, ev_data, ev_out;
    int64_t ev_steps = 12;
    uint64_t ev_seed = 0;
    bool ev_bypass = false;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path");
    ev->add_option("--data", ev_data, "test manifest path")->required();
    ev->add_option("--out", ev_out, "output CSV path")->required();
    ev->add_option("--steps", ev_steps, "DDIM steps");
    ev->add_option("--seed", ev_seed, "sampling seed");
    ev->add_flag("--bypass", ev_bypass, "evaluate ground truth against itself");

    auto* in = app.add_subcommand("inspect", "print checkpoint contents");
    std::string in_ckpt;
    in->add_option("--ckpt", in_ckpt, "checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*mk) return cmd_make_data(mk_out, mk_count, mk_seed, mk_frames, mk_size);
        if (*tr) return cmd_train(tr_data, tr_config, tr_out);
        if (*sa)
            return cmd_sample(sa_ckpt, sa_video, sa_garment, sa_out, sa_window, sa_stride, sa_steps,
                              sa_guidance, sa_seed);
        if (*ev) {
            if (!ev_bypass && ev_ckpt.empty()) throw ConfigError("eval requires --ckpt (or --bypass)");
            return cmd_eval(ev_ckpt, ev_data, ev_out, ev_steps, ev_seed, ev_bypass);
        }
        if (*in) return cmd_inspect(in_ckpt);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
