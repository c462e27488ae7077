#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace std;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
};

fs::path work_dir() {
    static const fs::path p = [] {
        const fs::path d = fs::temp_directory_path() / "dpidm_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return p;
}

RunResult run(const std::string& args) {
    static int n = 0;
    const fs::path log = work_dir() / ("log_" + std::to_string(n++) + ".txt");
    const std::string cmd = std::string(DPIDM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    r.out = ss.str();
    return r;
}

std::string tree_digest(const fs::path& root) {
    // stable digest of all file bytes under root
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::ostringstream os;
    for (const auto& p : files) {
        std::ifstream f(p, std::ios::binary);
        std::stringstream ss;
        ss << f.rdbuf();
        const std::string bytes = ss.str();
        size_t h = std::hash<std::string>{}(bytes);
        os << fs::relative(p, root).string() << ":" << bytes.size() << ":" << h << "\n";
    }
    return os.str();
}

const char* kTinyConfig =
    "model.widths = 8,16,32\n"
    "model.d_pose = 8\n"
    "model.d_cond = 8\n"
    "model.heads = 2\n"
    "model.groups = 4\n"
    "model.temb_dim = 16\n"
    "diffusion.steps = 1000\n"
    "train.batch_size = 2\n"
    "train.clip_length = 2\n"
    "train.total_iters = 12\n"
    "train.codec_iters = 40\n"
    "train.codec_batch = 4\n"
    "train.checkpoint_interval = 6\n";

}  // namespace

TEST(Cli, MakeDataCountZero) {
    const fs::path out = work_dir() / "empty_ds";
    const RunResult r = run("make-data --out " + out.string() + " --count 0");
    EXPECT_EQ(r.code, 0);
    std::ifstream manifest(out / "manifest.txt");
    ASSERT_TRUE(manifest.good());
    std::string line;
    EXPECT_FALSE(static_cast<bool>(std::getline(manifest, line)));
}

TEST(Cli, MakeDataDeterministicTrees) {
    const fs::path a = work_dir() / "ds_a";
    const fs::path b = work_dir() / "ds_b";
    ASSERT_EQ(run("make-data --out " + a.string() + " --count 4 --seed 7 --frames 4 --size 32x32").code, 0);
    ASSERT_EQ(run("make-data --out " + b.string() + " --count 4 --seed 7 --frames 4 --size 32x32").code, 0);
    EXPECT_EQ(tree_digest(a), tree_digest(b));
}

TEST(Cli, MakeDataBadSizeNamesDivisibility) {
    const RunResult r = run("make-data --out " + (work_dir() / "bad").string() + " --size 63x48");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("divisible"), std::string::npos);
}

TEST(Cli, TrainMissingDataPath) {
    const RunResult r = run("train --data " + (work_dir() / "nope.txt").string() + " --out " +
                            (work_dir() / "run").string());
    EXPECT_EQ(r.code, 2);
}

TEST(Cli, TrainUnknownConfigKeyNamed) {
    const fs::path ds = work_dir() / "ds_train";
    ASSERT_EQ(run("make-data --out " + ds.string() + " --count 2 --frames 4 --size 32x32").code, 0);
    const fs::path cfg = work_dir() / "bad.cfg";
    std::ofstream(cfg) << "train.typo_key = 3\n";
    const RunResult r = run("train --data " + (ds / "manifest.txt").string() + " --config " +
                            cfg.string() + " --out " + (work_dir() / "run2").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("train.typo_key"), std::string::npos);
}

TEST(Cli, TrainSampleEvalInspectPipeline) {
    const fs::path ds = work_dir() / "ds_pipe";
    ASSERT_EQ(run("make-data --out " + ds.string() + " --count 3 --seed 3 --frames 4 --size 32x32").code, 0);
    const fs::path cfg = work_dir() / "tiny.cfg";
    std::ofstream(cfg) << kTinyConfig;
    const fs::path out = work_dir() / "run_pipe";
    const RunResult tr = run("train --data " + (ds / "manifest.txt").string() + " --config " +
                             cfg.string() + " --out " + out.string());
    ASSERT_EQ(tr.code, 0) << tr.out;
    ASSERT_TRUE(fs::exists(out / "checkpoint.bin"));
    ASSERT_TRUE(fs::exists(out / "ckpt_000006.bin"));  // interval checkpoint
    ASSERT_TRUE(fs::exists(out / "metrics.csv"));

    const RunResult insp = run("inspect --ckpt " + (out / "checkpoint.bin").string());
    EXPECT_EQ(insp.code, 0);
    EXPECT_NE(insp.out.find("iteration: 12"), std::string::npos);
    EXPECT_NE(insp.out.find("main.in_conv.w"), std::string::npos);

    // sample with defaults: window defaults to the training clip length,
    // guidance defaults to 1.5
    const fs::path sout = work_dir() / "sample_out";
    const RunResult sa = run("sample --ckpt " + (out / "checkpoint.bin").string() + " --video " +
                             (ds / "sample_0000").string() + " --garment " +
                             (ds / "sample_0001").string() + " --out " + sout.string() +
                             " --steps 3 --seed 5");
    ASSERT_EQ(sa.code, 0) << sa.out;
    EXPECT_NE(sa.out.find("window=2"), std::string::npos);
    EXPECT_NE(sa.out.find("guidance=1.5"), std::string::npos);
    EXPECT_TRUE(fs::exists(sout / "out_0000.png"));
    EXPECT_TRUE(fs::exists(sout / "out_0003.png"));
    EXPECT_TRUE(fs::exists(sout / "sheet.png"));

    // byte-identical across reruns with the same flags and seed
    const fs::path sout2 = work_dir() / "sample_out2";
    const RunResult sa2 = run("sample --ckpt " + (out / "checkpoint.bin").string() + " --video " +
                              (ds / "sample_0000").string() + " --garment " +
                              (ds / "sample_0001").string() + " --out " + sout2.string() +
                              " --steps 3 --seed 5");
    ASSERT_EQ(sa2.code, 0);
    EXPECT_EQ(tree_digest(sout), tree_digest(sout2));

    // eval writes one row per sample plus a mean line
    const fs::path csv = work_dir() / "eval.csv";
    const RunResult ev = run("eval --ckpt " + (out / "checkpoint.bin").string() + " --data " +
                             (ds / "manifest.txt").string() + " --out " + csv.string() +
                             " --steps 2");
    ASSERT_EQ(ev.code, 0) << ev.out;
    std::ifstream f(csv);
    std::string line;
    int rows = 0;
    std::getline(f, line);
    EXPECT_EQ(line, "sample_id,ssim,flicker_raw,flicker_excess,tra_stat");
    while (std::getline(f, line))
        if (!line.empty()) ++rows;
    EXPECT_EQ(rows, 3 + 1);  // 3 samples + mean line
}

TEST(Cli, EvalBypassGroundTruth) {
    const fs::path ds = work_dir() / "ds_bypass";
    ASSERT_EQ(run("make-data --out " + ds.string() + " --count 2 --seed 9 --frames 4 --size 32x32").code, 0);
    const fs::path csv = work_dir() / "bypass.csv";
    const RunResult r = run("eval --bypass --data " + (ds / "manifest.txt").string() + " --out " +
                            csv.string());
    ASSERT_EQ(r.code, 0) << r.out;
    std::ifstream f(csv);
    std::string header, row;
    std::getline(f, header);
    std::getline(f, row);
    std::stringstream ss(row);
    std::string id, ssim_s, raw_s, excess_s;
    std::getline(ss, id, ',');
    std::getline(ss, ssim_s, ',');
    std::getline(ss, raw_s, ',');
    std::getline(ss, excess_s, ',');
    EXPECT_DOUBLE_EQ(std::stod(ssim_s), 1.0);
    EXPECT_DOUBLE_EQ(std::stod(excess_s), 0.0);
}

TEST(Cli, EvalEmptyManifestHeaderOnly) {
    const fs::path ds = work_dir() / "ds_none";
    ASSERT_EQ(run("make-data --out " + ds.string() + " --count 0").code, 0);
    const fs::path csv = work_dir() / "none.csv";
    const RunResult r = run("eval --bypass --data " + (ds / "manifest.txt").string() + " --out " +
                            csv.string());
    EXPECT_EQ(r.code, 0);
    std::ifstream f(csv);
    std::string line;
    int lines = 0;
    while (std::getline(f, line))
        if (!line.empty()) ++lines;
    EXPECT_EQ(lines, 1);  // header only
}

TEST(Cli, CorruptCheckpointExitFour) {
    const fs::path fake = work_dir() / "fake.bin";
    std::ofstream(fake) << "garbage bytes";
    const RunResult r = run("inspect --ckpt " + fake.string());
    EXPECT_EQ(r.code, 4);
    const RunResult s = run("sample --ckpt " + fake.string() + " --video x --garment y --out z");
    EXPECT_EQ(s.code, 4);
}

TEST(Cli, UnknownFlagExitsTwo) {
    EXPECT_EQ(run("make-data --out /tmp/x --definitely-not-a-flag 1").code, 2);
    EXPECT_EQ(run("train --out-only").code, 2);
}
