#include <gtest/gtest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "infrank/infrank.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / (std::string("infrank_cli_") + info->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override {
        if (!HasFailure()) fs::remove_all(dir_);
    }

    fs::path path(const std::string& rel) const { return dir_ / rel; }

    RunResult run(const std::string& args, const std::string& env = "") const {
        const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
        const std::string cmd = "cd '" + dir_.string() + "' && " + env + (env.empty() ? "" : " ") + "'" +
                                INFRANK_CLI_PATH + "' " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
        const int status = std::system(cmd.c_str());
        RunResult r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    // 100-point toy problem with 40% flips, used by most tests below.
    void make_toy(const std::string& out = "toy") const {
        const auto r = run("generate toy --n 100 --noise 0.4 --seed 7 --out " + out);
        ASSERT_EQ(r.code, 0) << r.err;
    }

    fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenerateToyHasExactFlipCount) {
    make_toy();
    const auto ds = infrank::load_dataset(path("toy/dataset.json"));
    EXPECT_EQ(ds.size(), 100u);
    EXPECT_EQ(infrank::detection_metrics(ds, {}).flipped_total, 40u);
    const auto man = read_json(path("toy/dataset.json"));
    EXPECT_DOUBLE_EQ(man["noise_spec"]["ratio"].get<double>(), 0.4);
    EXPECT_TRUE(fs::exists(path("toy/run.json")));
}

TEST_F(Cli, GenerateIsReproducible) {
    make_toy("a");
    make_toy("b");
    EXPECT_EQ(slurp(path("a/dataset.csv")), slurp(path("b/dataset.csv")));
    EXPECT_EQ(slurp(path("a/dataset.json")), slurp(path("b/dataset.json")));
}

TEST_F(Cli, GenerateBlobsRowCount) {
    const auto r = run("generate blobs --k 10 --per-class 100 --out blobs");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto ds = infrank::load_dataset(path("blobs/dataset.json"));
    EXPECT_EQ(ds.size(), 1000u);
    EXPECT_EQ(ds.num_classes(), 10);
}

TEST_F(Cli, GenerateRejectsBadNoise) {
    EXPECT_EQ(run("generate toy --noise 1.5 --out x").code, static_cast<int>(infrank::ErrorKind::kInvalidArgument));
    EXPECT_EQ(run("generate toy --noise -0.1 --out x").code, static_cast<int>(infrank::ErrorKind::kInvalidArgument));
}

TEST_F(Cli, TrainWritesCheckpointAndMetrics) {
    make_toy();
    const auto r = run("train --data toy/dataset.json --layers 2,50,2 --epochs 50 --seed 3 --out t1");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(path("t1/model.json")));
    const auto m = read_json(path("t1/metrics.json"));
    EXPECT_TRUE(m.contains("train_acc"));
    EXPECT_TRUE(m.contains("val_acc"));
    EXPECT_EQ(m["val_size"], 10);
    EXPECT_EQ(infrank::load_model(path("t1/model.json")).layer_dims, (std::vector<int>{2, 50, 2}));
}

TEST_F(Cli, TrainSeedRepeatGivesIdenticalBytes) {
    make_toy();
    ASSERT_EQ(run("train --data toy/dataset.json --epochs 30 --seed 3 --out a").code, 0);
    ASSERT_EQ(run("train --data toy/dataset.json --epochs 30 --seed 3 --out b").code, 0);
    ASSERT_EQ(run("train --data toy/dataset.json --epochs 30 --seed 4 --out c").code, 0);
    EXPECT_EQ(slurp(path("a/model.json")), slurp(path("b/model.json")));
    EXPECT_NE(slurp(path("a/model.json")), slurp(path("c/model.json")));
}

TEST_F(Cli, MissingDatasetNamesThePath) {
    const auto r = run("train --data nowhere/missing.json --out t");
    EXPECT_EQ(r.code, static_cast<int>(infrank::ErrorKind::kIo));
    EXPECT_NE(r.err.find("nowhere/missing.json"), std::string::npos) << r.err;
}

TEST_F(Cli, ConfigFileAndFlagOverride) {
    make_toy();
    std::ofstream(path("cfg.json")) << R"({"data": "toy/dataset.json", "seed": 5,
        "train": {"epochs": 5, "learning_rate": 0.05}, "layers": [2, 8, 2]})";
    const auto r = run("train --config cfg.json --epochs 7 --out t");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto run_json = read_json(path("t/run.json"));
    EXPECT_EQ(run_json["config"]["train"]["epochs"], 7);
    EXPECT_DOUBLE_EQ(run_json["config"]["train"]["learning_rate"].get<double>(), 0.05);
    EXPECT_EQ(run_json["config"]["seed"], 5);
    EXPECT_EQ(run_json["config"]["layers"], json({2, 8, 2}));
}

TEST_F(Cli, ConfigErrorsNameTheField) {
    std::ofstream(path("typo.json")) << R"({"train": {"epoch": 5}})";
    auto r = run("train --config typo.json --out t");
    EXPECT_EQ(r.code, static_cast<int>(infrank::ErrorKind::kConfig));
    EXPECT_NE(r.err.find("train.epoch"), std::string::npos) << r.err;

    std::ofstream(path("type.json")) << R"({"train": {"epochs": "many"}})";
    r = run("train --config type.json --out t");
    EXPECT_EQ(r.code, static_cast<int>(infrank::ErrorKind::kConfig));
    EXPECT_NE(r.err.find("train.epochs"), std::string::npos) << r.err;

    std::ofstream(path("broken.json")) << "{\n  \"seed\": 1,\n  oops\n}";
    r = run("train --config broken.json --out t");
    EXPECT_EQ(r.code, static_cast<int>(infrank::ErrorKind::kConfig));
    EXPECT_NE(r.err.find("line 3"), std::string::npos) << r.err;
}

TEST_F(Cli, BadArgumentsExitWithInvalidArgument) {
    EXPECT_EQ(run("train --epochs").code, static_cast<int>(infrank::ErrorKind::kInvalidArgument));
    EXPECT_EQ(run("frobnicate").code, static_cast<int>(infrank::ErrorKind::kInvalidArgument));
    EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, AuditDumpsScoresWithVotesInRange) {
    make_toy();
    ASSERT_EQ(run("train --data toy/dataset.json --layers 2,50,2 --epochs 300 --batch-size 10 --out t").code, 0);
    const auto r = run("audit --data toy/dataset.json --model t/model.json --gamma 2 --ground-truth --out a");
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream is(path("a/scores.csv"));
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "id,osm,osd_k0,osd_k1,votes,selected");
    std::size_t rows = 0, selected = 0;
    while (std::getline(is, line)) {
        const auto cells = infrank::detail::split_row(line);
        ASSERT_EQ(cells.size(), 6u);
        const int votes = std::stoi(std::string(cells[4]));
        EXPECT_GE(votes, 0);
        EXPECT_LE(votes, 2);
        selected += cells[5] == "1";
        ++rows;
    }
    EXPECT_EQ(rows, 90u);
    const auto audit = read_json(path("a/audit.json"));
    EXPECT_EQ(audit["selected_size"], selected);
    EXPECT_TRUE(audit.contains("ground_truth"));
    EXPECT_EQ(audit["ground_truth"]["flipped_total"], 40);  // validation draws only clean rows
    EXPECT_NE(r.out.find("precision"), std::string::npos);
}

TEST_F(Cli, AuditOfCleanDataReportsSelectionSize) {
    ASSERT_EQ(run("generate blobs --k 3 --per-class 30 --out clean").code, 0);
    const auto r = run("audit --data clean/dataset.json --epochs 100 --out a");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto audit = read_json(path("a/audit.json"));
    EXPECT_TRUE(audit["selected_size"].is_number_unsigned());
    EXPECT_EQ(audit["gamma"], 3);  // 8 clipped to K
    EXPECT_NE(r.out.find("selected"), std::string::npos);
}

TEST_F(Cli, AuditSmallLossSelector) {
    make_toy();
    const auto r = run("audit --data toy/dataset.json --epochs 20 --selector small-loss --ground-truth --out a");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(path("a/selection.csv")));
    EXPECT_FALSE(fs::exists(path("a/scores.csv")));
    EXPECT_EQ(slurp(path("a/selection.csv")).substr(0, 17), "id,loss,selected\n");
    EXPECT_EQ(read_json(path("a/audit.json"))["selector"], "small-loss");
}

TEST_F(Cli, AuditDimensionMismatch) {
    make_toy();
    ASSERT_EQ(run("generate blobs --k 4 --per-class 10 --out blobs").code, 0);
    ASSERT_EQ(run("train --data toy/dataset.json --epochs 5 --out t").code, 0);
    const auto r = run("audit --data blobs/dataset.json --model t/model.json --out a");
    EXPECT_EQ(r.code, static_cast<int>(infrank::ErrorKind::kDimensionMismatch)) << r.err;
}

TEST_F(Cli, AuditGroundTruthNeedsTrueLabels) {
    std::ofstream(path("plain.csv")) << "id,f0,label,trusted\n0,0.1,0,1\n1,0.2,0,0\n2,0.3,0,0\n3,0.9,1,1\n4,1.0,1,0\n5,1.1,1,0\n";
    std::ofstream(path("plain.json")) << R"({"num_classes": 2, "feature_dim": 1, "path": "plain.csv"})";
    const auto r = run("audit --data plain.json --val-per-class 1 --epochs 5 --ground-truth --out a");
    EXPECT_EQ(r.code, static_cast<int>(infrank::ErrorKind::kMissingTrueLabel)) << r.err;
}

TEST_F(Cli, PosttrainWritesPlotSeriesAndRunTree) {
    make_toy();
    const auto start = std::chrono::steady_clock::now();
    const auto r = run("posttrain --data toy/dataset.json --layers 2,50,2 --epochs 2000 --batch-size 10 "
                       "--gamma 2 --delta -1 --seed 7 --out p");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_LT(secs, 60.0);

    const auto report = read_json(path("p/report.json"));
    const auto rounds = report["rounds"].size();
    EXPECT_EQ(rounds, 3u);  // a negative delta keeps every round
    std::ifstream is(path("p/rounds.csv"));
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "round,acc,noise_ratio,removed");
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        EXPECT_EQ(line.rfind(std::to_string(rows + 1) + ",", 0), 0u) << line;
        ++rows;
    }
    EXPECT_EQ(rows, rounds);
    for (std::size_t i = 1; i <= rounds; ++i)
        EXPECT_TRUE(fs::exists(path("p/rounds/round_" + std::to_string(i) + "/model_in.json")));
    for (const char* f : {"model.json", "initial_model.json", "clean.csv", "refined.csv", "final_model.json", "run.json"})
        EXPECT_TRUE(fs::exists(path(std::string("p/") + f))) << f;
    EXPECT_TRUE(report.contains("refinement"));
    const auto refined = infrank::load_dataset(path("p/refined.json"));
    EXPECT_EQ(refined.size(), report["final_clean_size"].get<std::size_t>() +
                                  report["refinement"]["kept"].get<std::size_t>());
}

TEST_F(Cli, PosttrainSingleRoundAndReproducibleTree) {
    make_toy();
    const std::string args = "posttrain --data toy/dataset.json --epochs 300 --gamma 2 --rounds 1 --delta -1 --out ";
    ASSERT_EQ(run(args + "a").code, 0);
    ASSERT_EQ(run(args + "b").code, 0);
    EXPECT_EQ(read_json(path("a/report.json"))["rounds"].size(), 1u);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(path("a"))) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), path("a"));
        if (rel == "run.json") continue;  // records the output directory name
        EXPECT_EQ(slurp(e.path()), slurp(path("b") / rel)) << rel;
        ++files;
    }
    EXPECT_GT(files, 5u);
}

TEST_F(Cli, PosttrainNoRefineSkipsFinalRetrain) {
    make_toy();
    const auto r = run("posttrain --data toy/dataset.json --epochs 100 --gamma 2 --no-refine --out p");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_FALSE(fs::exists(path("p/final_model.json")));
    EXPECT_FALSE(read_json(path("p/report.json")).contains("refinement"));
}

TEST_F(Cli, MetricsFromRemovedIds) {
    make_toy();
    const auto ds = infrank::load_dataset(path("toy/dataset.json"));
    {
        std::ofstream os(path("removed.txt"));
        os << "id\n";
        for (const auto& s : ds)
            if (s.is_flipped()) os << s.id << '\n';
    }
    const auto r = run("metrics --data toy/dataset.json --removed removed.txt --out m");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = read_json(path("m/metrics.json"));
    EXPECT_DOUBLE_EQ(j["precision"].get<double>(), 1.0);
    EXPECT_DOUBLE_EQ(j["remaining_noise_ratio"].get<double>(), 0.0);
    EXPECT_EQ(j, json::parse(r.out));
}

TEST_F(Cli, MetricsFromCleanDataset) {
    make_toy();
    ASSERT_EQ(run("posttrain --data toy/dataset.json --epochs 100 --gamma 2 --delta -1 --rounds 1 --no-refine --out p")
                  .code,
              0);
    const auto r = run("metrics --data toy/dataset.json --clean p/clean.json");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(r.out);
    const auto report = read_json(path("p/report.json"));
    EXPECT_EQ(j["removed"].get<std::size_t>(), 10 + report["rounds"][0]["num_removed"].get<std::size_t>());
}

TEST_F(Cli, MetricsNeedsExactlyOneSource) {
    make_toy();
    EXPECT_EQ(run("metrics --data toy/dataset.json").code, static_cast<int>(infrank::ErrorKind::kInvalidArgument));
}

TEST_F(Cli, EnvironmentSetsDefaultOutputDir) {
    const auto r = run("generate toy --n 20", "INFRANK_OUTPUT_DIR=envout");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(path("envout/generate/dataset.csv")));
}
