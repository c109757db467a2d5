#include <gtest/gtest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <sys/wait.h>

#include "relkd/trainer/run.hpp"
#include "support/helpers.hpp"

using namespace relkd;
using relkd::testing::read_text;
using relkd::testing::TempDir;
using relkd::testing::write_text;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code = -1;
    std::string out, err;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

Outcome relkd_cli(const std::string& args, const fs::path& scratch) {
    const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
    const std::string cmd = quote(RELKD_CLI_PATH) + " " + args + " >" + quote(out.string()) + " 2>" + quote(err.string());
    const int status = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.out = read_text(out);
    o.err = read_text(err);
    return o;
}

std::string data(const std::string& rel) { return relkd::testing::data_dir() + "/" + rel; }
std::string configs(const std::string& rel) { return relkd::testing::data_dir() + "/../configs/" + rel; }

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_text(p)); }

nlohmann::json without_timestamps(nlohmann::json j) {
    j.erase("started_at");
    j.erase("finished_at");
    return j;
}

std::vector<double> csv_column(const fs::path& p, std::size_t col) {
    std::vector<double> out;
    std::istringstream in(read_text(p));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        for (std::size_t i = 0; i <= col; ++i) std::getline(ss, cell, ',');
        out.push_back(std::stod(cell));
    }
    return out;
}

const char* kShortTrain =
    "lr_peak = 1e-3\nwarmup_steps = 3\ntotal_steps = 30\nbatch_size = 4\nseq_len = 32\ncheckpoint_every = 10\n";

/// One vocab and one briefly trained canonical teacher shared by the suite.
class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("cli");
        const auto& d = *dir_;
        write_text(d / "short.cfg", kShortTrain);
        auto r = relkd_cli("build-vocab --corpus " + data("toy/train.txt") + " --out " + (d / "vocab.txt").string() +
                               " --size 400",
                           d.path());
        ASSERT_EQ(r.code, 0) << r.err;
        r = relkd_cli("pretrain-teacher --config " + configs("teacher.cfg") + " --train-config " + (d / "short.cfg").string() +
                          " --corpus " + data("toy/train.txt") + " --vocab " + (d / "vocab.txt").string() + " --out " +
                          (d / "teacher").string(),
                      d.path());
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }

    static std::string vocab() { return (*dir_ / "vocab.txt").string(); }
    static std::string teacher() { return (*dir_ / "teacher" / "ckpt_00000030.ckpt").string(); }
    static std::string short_train() { return (*dir_ / "short.cfg").string(); }

    std::string distill_args(const std::string& student, const fs::path& out, const std::string& teacher_path = teacher(),
                             const std::string& relation = configs("relation.cfg")) {
        return "distill --teacher " + teacher_path + " --student-config " + configs(student) + " --relation-config " +
               relation + " --train-config " + short_train() + " --corpus " + data("toy/train.txt") +
               " --vocab " + vocab() + " --out " + out.string();
    }

    static TempDir* dir_;
    TempDir tmp_{"cli_case"};
};

TempDir* Cli::dir_ = nullptr;

}  // namespace

TEST_F(Cli, BuildVocabWritesVocabAndManifest) {
    auto r = relkd_cli("build-vocab --corpus " + data("toy/train.txt") + " --out " + (tmp_ / "v.txt").string() + " --size 50",
                       tmp_.path());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(textdata::load_vocab(tmp_ / "v.txt").size(), 50u);
    const auto m = read_json(tmp_ / "v.txt.manifest.json");
    EXPECT_EQ(m["command"], "build-vocab");
    EXPECT_EQ(m["status"], "ok");
    EXPECT_EQ(m["config"]["size"], 50);
    EXPECT_EQ(m["inputs"][0]["sha256"].get<std::string>().size(), 64u);
    EXPECT_TRUE(m.contains("started_at") && m.contains("finished_at") && m.contains("version"));
}

TEST_F(Cli, BuildVocabIsIdempotent) {
    const std::string base = "build-vocab --corpus " + data("toy/train.txt") + " --size 60 --out ";
    ASSERT_EQ(relkd_cli(base + (tmp_ / "a.txt").string(), tmp_.path()).code, 0);
    ASSERT_EQ(relkd_cli(base + (tmp_ / "a2.txt").string(), tmp_.path()).code, 0);
    EXPECT_EQ(read_text(tmp_ / "a.txt"), read_text(tmp_ / "a2.txt"));
    ASSERT_EQ(relkd_cli(base + (tmp_ / "a.txt").string(), tmp_.path()).code, 0);
    auto m1 = without_timestamps(read_json(tmp_ / "a.txt.manifest.json"));
    auto m2 = without_timestamps(read_json(tmp_ / "a2.txt.manifest.json"));
    m2["config"]["out"] = m1["config"]["out"];
    EXPECT_EQ(m1, m2);
}

TEST_F(Cli, BuildVocabErrors) {
    auto r = relkd_cli("build-vocab --corpus " + (tmp_ / "missing.txt").string() + " --out " + (tmp_ / "v.txt").string(),
                       tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("missing.txt"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(tmp_ / "v.txt"));

    r = relkd_cli("build-vocab --corpus " + data("toy/train.txt") + " --out " + (tmp_ / "v.txt").string() + " --size 3",
                  tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("max_size must be >= 4"), std::string::npos) << r.err;
    EXPECT_EQ(read_json(tmp_ / "v.txt.manifest.json")["status"], "failed");

    EXPECT_EQ(relkd_cli("build-vocab --bogus", tmp_.path()).code, 1);
    EXPECT_EQ(relkd_cli("", tmp_.path()).code, 1);
}

TEST_F(Cli, PretrainTeacherLowersLossAndIsReproducible) {
    write_text(tmp_ / "tiny.cfg", "n_layers = 1\nhidden = 32\nn_heads = 4\nmax_seq_len = 32\ndropout = 0.0\n");
    write_text(tmp_ / "train.cfg",
               "lr_peak = 3e-3\nwarmup_steps = 20\nbatch_size = 8\nseq_len = 32\ncheckpoint_every = 100\n");
    const std::string args = "pretrain-teacher --config " + (tmp_ / "tiny.cfg").string() + " --train-config " +
                             (tmp_ / "train.cfg").string() + " --steps 200 --seed 5 --corpus " + data("toy/valid.txt") +
                             " --vocab " + vocab() + " --out ";
    auto r = relkd_cli(args + (tmp_ / "a").string(), tmp_.path());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto losses = csv_column(tmp_ / "a" / "mlm_loss.csv", 2);
    ASSERT_GT(losses.size(), 150u);
    double head = 0, tail = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        head += losses[i];
        tail += losses[losses.size() - 1 - i];
    }
    EXPECT_LT(tail, head);
    EXPECT_TRUE(fs::exists(tmp_ / "a" / "ckpt_00000100.ckpt"));
    EXPECT_EQ(read_json(tmp_ / "a" / "manifest.json")["config"]["train"]["total_steps"], 200);

    ASSERT_EQ(relkd_cli(args + (tmp_ / "b").string(), tmp_.path()).code, 0);
    EXPECT_EQ(read_text(tmp_ / "a" / "ckpt_00000200.ckpt"), read_text(tmp_ / "b" / "ckpt_00000200.ckpt"));

    r = relkd_cli("pretrain-teacher --config " + (tmp_ / "tiny.cfg").string() + " --steps 0 --corpus " +
                      data("toy/valid.txt") + " --vocab " + vocab() + " --out " + (tmp_ / "c").string(),
                  tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("total_steps"), std::string::npos) << r.err;

    write_text(tmp_ / "typo.cfg", "n_layer = 1\n");
    r = relkd_cli("pretrain-teacher --config " + (tmp_ / "typo.cfg").string() + " --corpus " + data("toy/valid.txt") +
                      " --vocab " + vocab() + " --out " + (tmp_ / "d").string(),
                  tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("unknown key(s): n_layer"), std::string::npos) << r.err;
}

TEST_F(Cli, DistillBothStudentFamilies) {
    for (const std::string student : {"student_matched.cfg", "student_cross.cfg"}) {
        const auto out = tmp_ / student;
        auto r = relkd_cli(distill_args(student, out), tmp_.path());
        ASSERT_EQ(r.code, 0) << student << ": " << r.err;
        EXPECT_EQ(trainer::list_checkpoints(out).size(), 3u);
        EXPECT_TRUE(fs::exists(out / "loss.csv"));
        const auto m = read_json(out / "manifest.json");
        EXPECT_EQ(m["status"], "ok");
        EXPECT_EQ(m["inputs"].size(), 6u);
    }
    EXPECT_EQ(read_json(tmp_ / "student_cross.cfg" / "run.json")["student_config"]["pos_kind"], "absolute");
}

TEST_F(Cli, DistillRerunIsByteIdenticalAndLeavesInputsAlone) {
    const auto before = read_text(teacher());
    ASSERT_EQ(relkd_cli(distill_args("student_cross.cfg", tmp_ / "a"), tmp_.path()).code, 0);
    ASSERT_EQ(relkd_cli(distill_args("student_cross.cfg", tmp_ / "b"), tmp_.path()).code, 0);
    for (const char* f : {"ckpt_00000010.ckpt", "ckpt_00000030.ckpt", "loss.csv", "run.json"}) {
        EXPECT_EQ(read_text(tmp_ / "a" / f), read_text(tmp_ / "b" / f)) << f;
    }
    auto ma = without_timestamps(read_json(tmp_ / "a" / "manifest.json"));
    auto mb = without_timestamps(read_json(tmp_ / "b" / "manifest.json"));
    mb["config"]["out"] = ma["config"]["out"];
    EXPECT_EQ(ma, mb);
    EXPECT_EQ(read_text(teacher()), before);
}

TEST_F(Cli, DistillRejectsBadInputsBeforeTraining) {
    write_text(tmp_ / "rel.cfg", "teacher_layer = 3\nrelation_heads = 48\n");
    auto r = relkd_cli(distill_args("student_cross.cfg", tmp_ / "a", teacher(), (tmp_ / "rel.cfg").string()),
                       tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("relation_heads 48 does not divide"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(tmp_ / "a" / "loss.csv"));
    EXPECT_EQ(read_json(tmp_ / "a" / "manifest.json")["status"], "failed");

    auto bytes = read_text(teacher());
    bytes[bytes.size() / 2] ^= 0x5A;
    bytes.resize(bytes.size() - 7);
    write_text(tmp_ / "broken.ckpt", bytes);
    r = relkd_cli(distill_args("student_cross.cfg", tmp_ / "b", (tmp_ / "broken.ckpt").string()), tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("broken.ckpt"), std::string::npos) << r.err;
}

TEST_F(Cli, SelectCheckpointPicksTheArgmin) {
    ASSERT_EQ(relkd_cli(distill_args("student_cross.cfg", tmp_ / "run"), tmp_.path()).code, 0);
    auto r = relkd_cli("select-checkpoint --run-dir " + (tmp_ / "run").string() + " --validation-corpus " +
                           data("toy/valid.txt") + " --teacher " + teacher() + " --out " + (tmp_ / "sel").string(),
                       tmp_.path());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.err.find("warning"), std::string::npos) << r.err;
    const auto best = read_json(tmp_ / "sel" / "best.json");

    // Independent scoring of every checkpoint through the library.
    const auto vocab_ = textdata::load_vocab(vocab());
    const auto t = encoder::load_checkpoint(teacher());
    const auto rel = distill::relation_config_from_kv(util::KvConfig::parse_file(configs("relation.cfg")));
    const auto batches = textdata::fixed_batches(textdata::read_lines(data("toy/valid.txt")), vocab_, 4, 32);
    std::size_t arg = 0;
    double lo = 0;
    for (std::size_t step : {10, 20, 30}) {
        const auto s = encoder::load_checkpoint(tmp_ / "run" / trainer::checkpoint_name(step));
        const double v = trainer::evaluate_distill_loss(t.weights, s.weights, rel, batches);
        if (arg == 0 || v <= lo) {
            arg = step;
            lo = v;
        }
    }
    EXPECT_EQ(best["step"], arg);
    EXPECT_EQ(best["val_loss"].get<double>(), lo);
    EXPECT_EQ(best["path"], (tmp_ / "run" / trainer::checkpoint_name(arg)).string());
}

TEST_F(Cli, SelectCheckpointWarningsAndErrors) {
    ASSERT_EQ(relkd_cli(distill_args("student_cross.cfg", tmp_ / "run"), tmp_.path()).code, 0);
    const std::string tail = " --teacher " + teacher() + " --out " + (tmp_ / "sel").string();
    auto r = relkd_cli("select-checkpoint --run-dir " + (tmp_ / "run").string() + " --validation-corpus " +
                           data("toy/train.txt") + tail,
                       tmp_.path());
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("warning: validation corpus"), std::string::npos) << r.err;
    EXPECT_TRUE(fs::exists(tmp_ / "sel" / "best.json"));

    fs::create_directories(tmp_ / "empty");
    fs::copy_file(tmp_ / "run" / "run.json", tmp_ / "empty" / "run.json");
    r = relkd_cli("select-checkpoint --run-dir " + (tmp_ / "empty").string() + " --vocab " + vocab() +
                      " --validation-corpus " + data("toy/valid.txt") + tail,
                  tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("no checkpoints"), std::string::npos) << r.err;

    write_text(tmp_ / "run" / "ckpt_00000020.ckpt", "TIMECKP1 truncated");
    r = relkd_cli("select-checkpoint --run-dir " + (tmp_ / "run").string() + " --validation-corpus " +
                      data("toy/valid.txt") + tail,
                  tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("ckpt_00000020.ckpt"), std::string::npos) << r.err;
}

TEST_F(Cli, BenchConstantPowerSweep) {
    const std::string args = "bench --model " + teacher() + " --corpus " + data("toy/valid.txt") + " --vocab " + vocab() +
                             " --seq-len 32 --warmup 2 --measured 40 --poll-hz 1000 --sweep 1,8,32 --out ";
    auto r = relkd_cli(args + (tmp_ / "b").string() + " --power-backend constant:100", tmp_.path());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rep = read_json(tmp_ / "b" / "bench.json");
    ASSERT_EQ(rep["rows"].size(), 3u);
    for (const auto& row : rep["rows"]) {
        ASSERT_TRUE(row["ok"].get<bool>()) << row.dump();
        EXPECT_EQ(row["mean_watts"].get<double>(), 100.0);
        const double expect = 100.0 * row["wall_seconds"].get<double>() / row["samples"].get<double>();
        EXPECT_NEAR(row["j_per_sample"].get<double>(), expect, 1e-9 * expect);
    }
    EXPECT_GT(rep["latency_bs1_ms"].get<double>(), 0.0);
    EXPECT_FALSE(rep["optimal_j_per_sample"].is_null());
    const auto csv = read_text(tmp_ / "b" / "bench.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    EXPECT_NE(csv.find(",100,"), std::string::npos) << csv;
    EXPECT_FALSE(read_json(tmp_ / "b" / "manifest.json")["config"]["environment"].is_null());

    r = relkd_cli(args + (tmp_ / "c").string() + " --power-backend trace:" + (tmp_ / "missing.csv").string(), tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("missing.csv"), std::string::npos) << r.err;

    r = relkd_cli(args + (tmp_ / "d").string() + " --power-backend rapl", tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("constant:<watts>, trace:<csv>, command:<shell command>, none"), std::string::npos) << r.err;

    r = relkd_cli(args + (tmp_ / "e").string() + " --sweep 8,4", tmp_.path());
    EXPECT_EQ(r.code, 1);
}

TEST_F(Cli, AnalyzeReferenceTables) {
    const std::string args = "analyze --scores " + data("reference_tables/scores.csv") + " --efficiency " +
                             data("reference_tables/efficiency.csv") + " --baseline XLM-R-Large --out ";
    auto r = relkd_cli(args + (tmp_ / "a").string(), tmp_.path());
    ASSERT_EQ(r.code, 0) << r.err;
    const auto csv = read_text(tmp_ / "a" / "summary.csv");
    EXPECT_NE(csv.find("TiME-m,89.9,88.4,91.1,93.2,82.4,80.8,88.1,87.7,"), std::string::npos) << csv;
    EXPECT_NE(csv.find("TiME-xs,86.2,84.8,87.6,91.1,75.8,76.0,86.0,83.9,1.89,5.8,9321.1,25.2,"), std::string::npos) << csv;
    const auto s = read_json(tmp_ / "a" / "summary.json");
    EXPECT_EQ(s["latency_frontier"], nlohmann::json({"TiME-xs", "TiME-m", "XLM-R-Base", "XLM-R-Large"}));
    EXPECT_EQ(s["energy_frontier"], nlohmann::json({"TiME-xs", "TiME-s", "TiME-m", "XLM-R-Base", "XLM-R-Large"}));
    EXPECT_NE(r.err.find("energy_vs_throughput_per_batch"), std::string::npos) << r.err;

    ASSERT_EQ(relkd_cli(args + (tmp_ / "b").string(), tmp_.path()).code, 0);
    for (const char* f : {"summary.csv", "summary.json", "score_vs_latency.csv", "score_vs_optimal_energy.csv"}) {
        EXPECT_EQ(read_text(tmp_ / "a" / f), read_text(tmp_ / "b" / f)) << f;
    }
}

TEST_F(Cli, AnalyzeSelfBaselineAndErrors) {
    write_text(tmp_ / "s.csv", "model,lang,score\nsolo,en,70\n");
    write_text(tmp_ / "e.csv", "model,latency_bs1_ms,peak_throughput_sps,optimal_j_per_sample\nsolo,4,100,0.3\n");
    const std::string base = "analyze --efficiency " + (tmp_ / "e.csv").string() + " --out " + (tmp_ / "o").string();
    auto r = relkd_cli(base + " --scores " + (tmp_ / "s.csv").string() + " --baseline solo", tmp_.path());
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(read_text(tmp_ / "o" / "summary.csv").find("solo,70.0,70.0,4,1.0,100,1.0,0.3,1.0\n"), std::string::npos)
        << read_text(tmp_ / "o" / "summary.csv");

    r = relkd_cli(base + " --scores " + (tmp_ / "s.csv").string() + " --baseline XLM-R-Large", tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("XLM-R-Large"), std::string::npos) << r.err;

    write_text(tmp_ / "bad.csv", "model,lang,score\nsolo,en,105\n");
    r = relkd_cli(base + " --scores " + (tmp_ / "bad.csv").string() + " --baseline solo", tmp_.path());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("105"), std::string::npos) << r.err;
}
