#include <gtest/gtest.h>
#include <sys/wait.h>

#include <filesystem>

#include "evocomp/io.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace evocomp;
using evocomp::io::json;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run cli(const std::string& args, const fs::path& dir) {
    const auto log = dir / "out.txt";
    const std::string cmd = std::string(EVOCOMP_CLI) + " " + args + " >" + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return {WIFEXITED(rc) ? WEXITSTATUS(rc) : -1, io::read_file(log.string())};
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = evocomp::testing::scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string p(const std::string& name) const { return (dir_ / name).string(); }

    void small_dataset(const std::string& sub, const std::string& extra = "") {
        ASSERT_EQ(cli("gen --n-samples 12 --tokens 12 --groups 3 --dim 16 --text-tokens 3 --seed 4 --out " + p(sub) +
                          " " + extra,
                      dir_)
                      .code,
                  0);
    }

    fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenIsDeterministic) {
    small_dataset("a");
    small_dataset("b");
    for (const char* f : {"dataset.evc", "anchors.evc", "truth.jsonl", "dataset.evc.json"})
        EXPECT_EQ(io::read_file(p(std::string("a/") + f)), io::read_file(p(std::string("b/") + f))) << f;
    const auto man = json::parse(io::read_file(p("a/gen.manifest.json")));
    EXPECT_EQ(man["command"], "gen");
    EXPECT_EQ(man["seeds"]["generator"], 4);
    EXPECT_TRUE(man.contains("wall_clock_seconds"));
}

TEST_F(Cli, InvalidConfigExitsTwo) {
    EXPECT_EQ(cli("gen --groups 0 --out " + p("x"), dir_).code, 2);
    EXPECT_EQ(cli("gen --no-such-flag --out " + p("x"), dir_).code, 2);
    EXPECT_EQ(cli("", dir_).code, 2);
}

TEST_F(Cli, MissingInputExitsThree) {
    EXPECT_EQ(cli("train --data " + p("none.evc") + " --labels " + p("none.jsonl") + " --out " + p("o.evp"), dir_).code,
              3);
}

TEST_F(Cli, SeedFromEnvironment) {
    const auto run = [&](const std::string& env, const std::string& out) {
        const std::string cmd = env + " " + std::string(EVOCOMP_CLI) + " gen --n-samples 2 --out " + p(out) +
                                " >/dev/null 2>&1";
        return std::system(cmd.c_str());
    };
    ASSERT_EQ(run("EVOCOMP_SEED=9", "env"), 0);
    ASSERT_EQ(cli("gen --n-samples 2 --seed 9 --out " + p("flag"), dir_).code, 0);
    EXPECT_EQ(io::read_file(p("env/dataset.evc")), io::read_file(p("flag/dataset.evc")));
}

TEST_F(Cli, ConfigFileBelowFlags) {
    io::write_file(p("cfg.toml"), "[gen]\nn-samples = 3\nseed = 5\n");
    ASSERT_EQ(cli("--config " + p("cfg.toml") + " gen --seed 6 --out " + p("c"), dir_).code, 0);
    const auto man = json::parse(io::read_file(p("c/gen.manifest.json")));
    EXPECT_EQ(man["config"]["samples"], 3);
    EXPECT_EQ(man["seeds"]["generator"], 6);
}

TEST_F(Cli, LabelTrainEvalFlow) {
    small_dataset("d");
    const auto data = p("d/dataset.evc");
    ASSERT_EQ(cli("label --data " + data + " --out " + p("l.jsonl") + " --seed 4", dir_).code, 0);
    const auto labels = io::read_labels(p("l.jsonl"));
    ASSERT_EQ(labels.size(), 12u);
    EXPECT_EQ(labels[0].scorer_id, "planted:4");

    ASSERT_EQ(cli("train --data " + data + " --labels " + p("l.jsonl") + " --out " + p("m.evp") +
                      " --epochs 3 --quiet --history " + p("h.csv"),
                  dir_)
                  .code,
              0);
    const auto history = io::read_file(p("h.csv"));
    EXPECT_EQ(history.substr(0, history.find('\n')), "epoch,step,primary,cs,total,lr,val_total");
    EXPECT_EQ(std::count(history.begin(), history.end(), '\n'), 4);

    const auto r = cli("eval --data " + data + " --params " + p("m.evp") + " --labels " + p("l.jsonl") + " --truth " +
                           p("d/truth.jsonl") + " --out " + p("r.json"),
                       dir_);
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("trained"), std::string::npos);
    const auto report = json::parse(io::read_file(p("r.json")));
    for (const char* k : {"trained", "random", "untrained"}) {
        const double f1 = report["metrics"][k]["f1"];
        EXPECT_GE(f1, 0.0);
        EXPECT_LE(f1, 1.0);
    }
    EXPECT_EQ(report["per_sample"].size(), 12u);
    EXPECT_TRUE(fs::exists(p("r.json.manifest.json")));
    EXPECT_TRUE(fs::exists(p("m.evp.manifest.json")));
}

TEST_F(Cli, OracleAndRestriction) {
    small_dataset("d");
    const auto data = p("d/dataset.evc");
    ASSERT_EQ(cli("label --oracle --data " + data + " --out " + p("o.jsonl"), dir_).code, 0);
    ASSERT_EQ(cli("label --restrict top_k=1 --data " + data + " --out " + p("k.jsonl"), dir_).code, 0);
    EXPECT_EQ(cli("label --restrict top_k=0 --data " + data + " --out " + p("bad.jsonl"), dir_).code, 2);
    EXPECT_EQ(cli("label --oracle --oracle-cap 1 --data " + data + " --out " + p("cap.jsonl"), dir_).code, 3);
    for (const auto& r : io::read_labels(p("k.jsonl"))) EXPECT_EQ(r.mask.retained(), 1u);
}

TEST_F(Cli, CompressKeepsTopR) {
    small_dataset("d");
    const auto data = p("d/dataset.evc");
    ASSERT_EQ(cli("label --data " + data + " --out " + p("l.jsonl"), dir_).code, 0);
    ASSERT_EQ(cli("train --quiet --epochs 1 --d-model 8 --heads 2 --data " + data + " --labels " + p("l.jsonl") +
                      " --out " + p("m.evp"),
                  dir_)
                  .code,
              0);
    ASSERT_EQ(cli("compress --r 4 --data " + data + " --params " + p("m.evp") + " --out " + p("c.evc"), dir_).code, 0);
    const auto reduced = io::read_dataset(p("c.evc"));
    const auto full = io::read_dataset(data);
    ASSERT_EQ(reduced.size(), full.size());
    const auto kept = io::read_manifest(p("c.evc"))["kept"];
    for (std::size_t i = 0; i < reduced.size(); ++i) {
        ASSERT_EQ(reduced[i].n(), 4u);
        EXPECT_EQ(reduced[i].d(), 16u);
        const auto idx = kept[reduced[i].id].get<std::vector<std::size_t>>();
        for (std::size_t k = 0; k < 4; ++k)
            for (std::size_t e = 0; e < 16; ++e) EXPECT_EQ(reduced[i].visual(k, e), full[i].visual(idx[k], e));
    }
    EXPECT_EQ(cli("compress --r 99 --data " + data + " --params " + p("m.evp") + " --out " + p("c2.evc"), dir_).code, 3);
}

TEST_F(Cli, RenderText) {
    EXPECT_EQ(cli("render --bits 1001 --width 2", dir_).out, "#.\n.#\n");
    EXPECT_EQ(cli("render --bits 11111 --width 2", dir_).out, "##\n##\n# \n");
    const auto a = cli("render --bits 0110 --width 3", dir_).out;
    EXPECT_EQ(a, cli("render --bits 0110 --width 3", dir_).out);
    EXPECT_EQ(a, ".##\n.  \n");
    EXPECT_EQ(cli("render --bits 10x1", dir_).code, 2);
}

TEST_F(Cli, RenderPpm) {
    ASSERT_EQ(cli("render --bits 1001 --width 2 --format ppm --cell 4 --out " + p("m.ppm"), dir_).code, 0);
    const auto bytes = io::read_file(p("m.ppm"));
    const std::string header = "P6\n8 8\n255\n";
    ASSERT_EQ(bytes.substr(0, header.size()), header);
    EXPECT_EQ(bytes.size(), header.size() + 8 * 8 * 3);
}

TEST_F(Cli, BenchEmptyDataset) {
    ASSERT_EQ(cli("gen --n-samples 0 --out " + p("e"), dir_).code, 0);
    const auto r = cli("bench --data " + p("e/dataset.evc") + " --out " + p("b.json"), dir_);
    ASSERT_EQ(r.code, 0) << r.out;
    const auto report = json::parse(io::read_file(p("b.json")));
    EXPECT_TRUE(report["runs"].empty());
}

TEST_F(Cli, BenchReportsThroughput) {
    small_dataset("d");
    const auto r = cli("bench --samples 1 --workers 1,2 --latency-us 10 --q 8 --p 2 --iters 2 --data " +
                           p("d/dataset.evc") + " --out " + p("b.json") + " --order-log " + p("order.txt"),
                       dir_);
    ASSERT_EQ(r.code, 0) << r.out;
    const auto report = json::parse(io::read_file(p("b.json")));
    ASSERT_EQ(report["runs"].size(), 2u);
    EXPECT_EQ(report["runs"][0]["evaluations"], report["runs"][1]["evaluations"]);
    EXPECT_GT(report["runs"][0]["masks_per_second"].get<double>(), 0.0);
    const auto order = io::read_file(p("order.txt"));
    EXPECT_EQ(static_cast<std::size_t>(std::count(order.begin(), order.end(), '\n')),
              report["runs"][0]["evaluations"].get<std::size_t>());
}

TEST_F(Cli, RemoteLabelsMatchInProcess) {
    ASSERT_EQ(cli("gen --family pooled --n-samples 4 --tokens 10 --groups 3 --dim 8 --seed 2 --out " + p("d"), dir_)
                  .code,
              0);
    const auto data = p("d/dataset.evc");
    ASSERT_EQ(cli("label --scorer pooled --scorer-seed 9 --data " + data + " --out " + p("local.jsonl"), dir_).code, 0);
    const std::string cmd = std::string(EVOCOMP_FAKE_SCORER) + " --mode pooled --seed 9";
    const auto r = cli("label --scorer remote --cmd '" + cmd + "' --data " + data + " --out " + p("remote.jsonl"), dir_);
    ASSERT_EQ(r.code, 0) << r.out;
    const auto a = io::read_labels(p("local.jsonl")), b = io::read_labels(p("remote.jsonl"));
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].mask, b[i].mask);
        EXPECT_NEAR(a[i].loss, b[i].loss, 1e-9);
    }
}

TEST_F(Cli, RemoteFailureExitsFour) {
    small_dataset("d");
    const std::string cmd = std::string(EVOCOMP_FAKE_SCORER) + " --mode error";
    EXPECT_EQ(cli("label --scorer remote --cmd '" + cmd + "' --data " + p("d/dataset.evc") + " --out " + p("l.jsonl"),
                  dir_)
                  .code,
              4);
    EXPECT_EQ(cli("label --scorer remote --data " + p("d/dataset.evc") + " --out " + p("l.jsonl"), dir_).code, 2);
}

TEST_F(Cli, GradCheckCommand) {
    EXPECT_EQ(cli("grad-check --configs 3", dir_).code, 0);
    const auto r = cli("grad-check --configs 2 --corrupt", dir_);
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("PASS"), std::string::npos);
}

TEST_F(Cli, ShowDefaults) {
    const auto r = cli("--show-defaults", dir_);
    ASSERT_EQ(r.code, 0);
    const auto j = json::parse(r.out);
    EXPECT_EQ(j["evolution"]["population_size"]["value"], 48);
    EXPECT_EQ(j["evolution"]["population_size"]["source"], "method");
    EXPECT_EQ(j["compressor"]["d_model"]["source"], "implementation");
}
