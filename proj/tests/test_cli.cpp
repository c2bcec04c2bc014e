#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tcrf/run_config.hpp"
#include "tcrf/synthetic.hpp"

namespace fs = std::filesystem;
using namespace tcrf;

namespace {

const fs::path kFixtures = TCRF_FIXTURES;

struct CliRun {
    int code;
    std::string output;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

const char* kTiny =
    " --set d_model=16 --set heads=2 --set layers=1 --set d_ff=32 --set token_embedding_dim=16"
    " --set max_epochs=3 --set seed=5";

class Cli : public ::testing::Test {
protected:
    fs::path dir;

    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::temp_directory_path() / (std::string("tcrf_cli_") + info->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    CliRun run(const std::string& args) const {
        const fs::path log = dir / "cli.log";
        const std::string cmd = std::string(TCRF_CLI) + " " + args + " > " + log.string() + " 2>&1";
        const int status = std::system(cmd.c_str());
        return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
    }

    fs::path synth(std::size_t n, std::uint64_t seed, const std::string& name) const {
        const fs::path p = dir / name;
        write_conll_file(p.string(), generate_synthetic_corpus(n, seed));
        return p;
    }

    std::string train_args(const fs::path& train, const fs::path& dev, const fs::path& out) const {
        return "train --train " + train.string() + " --dev " + dev.string() + " -o " + out.string() + kTiny;
    }
};

std::size_t line_count(const std::string& s) {
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST(RunConfigParse, CommentsOverridesAndUnknownKeys) {
    RunConfig rc;
    std::istringstream in("# comment\nbatch_size = 10   # trailing\n\n model_shape=classify_head\n");
    rc.parse(in);
    EXPECT_EQ(rc.get_size("batch_size"), 10u);
    EXPECT_EQ(rc.shape(), ModelShape::classify_head);
    rc.apply_override("learning_rate=0.01");
    EXPECT_EQ(rc.get_double("learning_rate"), 0.01);

    std::istringstream bad("batch_size = 4\nbatchsize = 4\n");
    try {
        RunConfig r2;
        r2.parse(bad, "x.cfg");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_NE(std::string(e.what()).find("batchsize"), std::string::npos);
    }
    EXPECT_THROW(rc.apply_override("nope=1"), ValidationError);
    EXPECT_THROW(rc.apply_override("batch_size"), ValidationError);
}

TEST(RunConfigParse, TypedValuesAndDefaults) {
    RunConfig rc;
    const TrainConfig tc = rc.train_config();
    EXPECT_EQ(tc.batch_size, 4u);
    EXPECT_EQ(tc.learning_rate, 0.005);
    EXPECT_EQ(tc.patience, 20u);
    EXPECT_FALSE(tc.grad_clip_norm.has_value());
    const EncoderConfig ec = rc.encoder_config();
    EXPECT_EQ(ec.d_model, 512u);
    EXPECT_EQ(ec.token_embedding_dim, 600u);
    rc.set("batch_size", "four");
    EXPECT_THROW(rc.train_config(), ValidationError);
    rc.set("batch_size", "0");
    EXPECT_THROW(rc.train_config(), ValidationError);
    rc.set("batch_size", "4");
    rc.set("grad_clip_norm", "5");
    EXPECT_EQ(*rc.train_config().grad_clip_norm, 5.0);
    rc.set("model_shape", "bilstm");
    EXPECT_THROW(rc.shape(), ValidationError);
}

TEST(RunConfigParse, ResolvedEchoReplays) {
    RunConfig rc;
    rc.set("train", "a.conll");
    rc.set("seed", "17");
    std::ostringstream out;
    rc.write_resolved(out);
    RunConfig back;
    std::istringstream in(out.str());
    back.parse(in);
    std::ostringstream again;
    back.write_resolved(again);
    EXPECT_EQ(out.str(), again.str());
    EXPECT_EQ(line_count(out.str()), RunConfig::defaults().size() + 1);
}

TEST_F(Cli, PrepareSplitsAndWritesDistribution) {
    const auto all = synth(100, 1, "all.conll");
    const CliRun r = run("prepare -i " + all.string() + " --dev-fraction 0.10 --seed 7 -o " + (dir / "prep").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const Dataset train = read_conll_file((dir / "prep/train.conll").string());
    const Dataset dev = read_conll_file((dir / "prep/dev.conll").string());
    EXPECT_EQ(train.size(), 90u);
    EXPECT_EQ(dev.size(), 10u);
    EXPECT_EQ(line_count(slurp(dir / "prep/label_distribution.csv")), 1 + 37u * 2);
    EXPECT_TRUE(fs::exists(dir / "prep/resolved_config.txt"));

    const CliRun with_test =
        run("prepare -i " + all.string() + " --test " + all.string() + " -o " + (dir / "prep3").string());
    ASSERT_EQ(with_test.code, 0) << with_test.output;
    EXPECT_EQ(line_count(slurp(dir / "prep3/label_distribution.csv")), 1 + 37u * 3);
}

TEST_F(Cli, PrepareRejectsBadLabel) {
    const fs::path bad = dir / "bad.conll";
    std::ofstream(bad) << "aspirin S-Drug\n\nx Q-Drug\n";
    const CliRun r = run("prepare -i " + bad.string() + " -o " + (dir / "out").string());
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.output.find(bad.string() + ":3:"), std::string::npos) << r.output;
}

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    const auto c = synth(20, 2, "c.conll");
    const CliRun unknown = run(train_args(c, c, dir / "r") + " --set colour=blue");
    EXPECT_EQ(unknown.code, 2);
    EXPECT_NE(unknown.output.find("colour"), std::string::npos);

    const fs::path cfg = dir / "bad.cfg";
    std::ofstream(cfg) << "# run\nbatch_size = 4\nlearnig_rate = 0.1\n";
    const CliRun bad_cfg = run("train -c " + cfg.string() + " --train " + c.string() + " --dev " + c.string());
    EXPECT_EQ(bad_cfg.code, 2);
    EXPECT_NE(bad_cfg.output.find(":3:"), std::string::npos) << bad_cfg.output;
}

TEST_F(Cli, TrainWritesArtifactsDeterministically) {
    const auto tr = synth(40, 3, "train.conll");
    const auto dv = synth(10, 4, "dev.conll");
    ASSERT_EQ(run(train_args(tr, dv, dir / "a")).code, 0);
    const CliRun second = run(train_args(tr, dv, dir / "b"));
    ASSERT_EQ(second.code, 0) << second.output;
    for (const char* f : {"best.ckpt", "last.ckpt", "epoch_log.csv", "f1_curve.csv", "model_summary.csv",
                          "resolved_config.txt"}) {
        EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
    }
    EXPECT_GE(line_count(slurp(dir / "a/epoch_log.csv")), 2u);
    for (const char* f : {"epoch_log.csv", "f1_curve.csv", "best.ckpt", "last.ckpt", "model_summary.csv"}) {
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
    }
    EXPECT_EQ(slurp(dir / "a/model_summary.csv").rfind("Model,Trainable parameters\nTransformerCRF,", 0), 0u);
    EXPECT_NE(second.output.find("TransformerCRF,"), std::string::npos);

    // the resolved echo alone replays the run
    const CliRun replay = run("train -c " + (dir / "a/resolved_config.txt").string() + " -o " + (dir / "c").string());
    ASSERT_EQ(replay.code, 0) << replay.output;
    EXPECT_EQ(slurp(dir / "a/epoch_log.csv"), slurp(dir / "c/epoch_log.csv"));
    EXPECT_EQ(slurp(dir / "a/last.ckpt"), slurp(dir / "c/last.ckpt"));
}

TEST_F(Cli, ResumeContinuesRun) {
    const auto tr = synth(30, 3, "train.conll");
    const auto dv = synth(8, 4, "dev.conll");
    ASSERT_EQ(run(train_args(tr, dv, dir / "full")).code, 0);
    ASSERT_EQ(run(train_args(tr, dv, dir / "part") + " --set max_epochs=1").code, 0);
    const CliRun resumed = run(train_args(tr, dv, dir / "resumed") + " --resume " + (dir / "part").string());
    ASSERT_EQ(resumed.code, 0) << resumed.output;
    EXPECT_EQ(slurp(dir / "full/epoch_log.csv"), slurp(dir / "resumed/epoch_log.csv"));
    EXPECT_EQ(slurp(dir / "full/last.ckpt"), slurp(dir / "resumed/last.ckpt"));
}

TEST_F(Cli, FrozenShapeNeedsEmissions) {
    const auto c = synth(10, 2, "c.conll");
    const CliRun r = run(train_args(c, c, dir / "r") + " --shape frozen_emissions_crf");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("--emissions"), std::string::npos) << r.output;
}

TEST_F(Cli, FrozenShapeEndToEnd) {
    const Dataset train = generate_synthetic_corpus(20, 6), dev = generate_synthetic_corpus(6, 7);
    write_conll_file((dir / "train.conll").string(), train);
    write_conll_file((dir / "dev.conll").string(), dev);
    auto lattices = [](const Dataset& d) {
        std::vector<EmissionLattice> out;
        Rng rng(1);
        for (const auto& s : d.sentences) {
            EmissionLattice e;
            e.scores = Matrix::Zero(static_cast<Eigen::Index>(s.size()), 37);
            for (Eigen::Index i = 0; i < e.scores.size(); ++i) e.scores.data()[i] = rng.uniform(-1, 1);
            for (std::size_t t = 0; t < s.size(); ++t) e.scores(static_cast<Eigen::Index>(t), s.gold[t].index()) += 3.0;
            out.push_back(e);
        }
        return out;
    };
    {
        std::ofstream a(dir / "train.emissions"), b(dir / "dev.emissions");
        write_emissions(a, lattices(train));
        write_emissions(b, lattices(dev));
    }
    const std::string files = " --emissions " + (dir / "train.emissions").string() + " --dev-emissions " +
                              (dir / "dev.emissions").string();
    const CliRun t = run(train_args(dir / "train.conll", dir / "dev.conll", dir / "r") +
                      " --shape frozen_emissions_crf" + files);
    ASSERT_EQ(t.code, 0) << t.output;
    EXPECT_NE(slurp(dir / "r/model_summary.csv").find("FrozenEmissionsCRF," + std::to_string(37 * 37 + 2 * 37)),
              std::string::npos);
    const CliRun p = run("predict --checkpoint " + (dir / "r/best.ckpt").string() + " -i " +
                      (dir / "dev.conll").string() + " -o " + (dir / "pred.conll").string() + " --emissions " +
                      (dir / "dev.emissions").string());
    ASSERT_EQ(p.code, 0) << p.output;
    EXPECT_EQ(read_conll_file((dir / "pred.conll").string()).size(), dev.size());
    const CliRun missing = run("predict --checkpoint " + (dir / "r/best.ckpt").string() + " -i " +
                            (dir / "dev.conll").string() + " -o " + (dir / "pred2.conll").string());
    EXPECT_EQ(missing.code, 2);
}

TEST_F(Cli, PredictEmptyInput) {
    const auto tr = synth(10, 3, "train.conll");
    ASSERT_EQ(run(train_args(tr, tr, dir / "r") + " --set max_epochs=1").code, 0);
    std::ofstream(dir / "empty.conll").close();
    const CliRun r = run("predict --checkpoint " + (dir / "r/best.ckpt").string() + " -i " +
                      (dir / "empty.conll").string() + " -o " + (dir / "out.conll").string());
    EXPECT_EQ(r.code, 0) << r.output;
    ASSERT_TRUE(fs::exists(dir / "out.conll"));
    EXPECT_EQ(fs::file_size(dir / "out.conll"), 0u);
}

TEST_F(Cli, PredictRejectsForeignLabels) {
    const auto tr = synth(10, 3, "train.conll");
    ASSERT_EQ(run(train_args(tr, tr, dir / "r") + " --set max_epochs=1").code, 0);
    std::ofstream(dir / "foreign.conll") << "aspirin B-Medication\n";
    const CliRun r = run("predict --checkpoint " + (dir / "r/best.ckpt").string() + " -i " +
                      (dir / "foreign.conll").string() + " -o " + (dir / "out.conll").string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("B-Medication"), std::string::npos);
}

TEST_F(Cli, OverfitPredictEvaluate) {
    const auto tr = synth(12, 8, "train.conll");
    const CliRun t = run(train_args(tr, tr, dir / "r") + " --set max_epochs=40 --set patience=40 --set dropout=0");
    ASSERT_EQ(t.code, 0) << t.output;
    const CliRun p = run("predict --checkpoint " + (dir / "r/best.ckpt").string() + " -i " + tr.string() + " -o " +
                      (dir / "pred.conll").string());
    ASSERT_EQ(p.code, 0) << p.output;
    const Dataset pred = read_conll_file((dir / "pred.conll").string());
    for (const auto& s : pred.sentences) EXPECT_EQ(count_invalid_transitions(s.gold), 0u);
    const CliRun e = run("evaluate --gold " + tr.string() + " --pred " + (dir / "pred.conll").string() + " -o " +
                      (dir / "rep").string());
    ASSERT_EQ(e.code, 0) << e.output;
    const std::string table = slurp(dir / "rep/entity_report.csv");
    EXPECT_EQ(table.rfind("Acc,Pre,Rec,F1,Corr\n100.00%,100.00%,100.00%,100.00%,", 0), 0u) << table;
}

TEST_F(Cli, EvaluateFixtureBundle) {
    const CliRun r = run("evaluate --gold " + (kFixtures / "metric_gold.conll").string() + " --pred " +
                      (kFixtures / "metric_pred.conll").string() + " -o " + (dir / "rep").string());
    ASSERT_EQ(r.code, 0) << r.output;
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir / "rep")) {
        ++files;
        EXPECT_EQ(slurp(e.path()), slurp(kFixtures / "metric_expected" / e.path().filename()))
            << e.path().filename();
    }
    EXPECT_EQ(files, 6u);

    const CliRun labelled = run("evaluate --gold " + (kFixtures / "metric_gold.conll").string() + " --pred " +
                             (kFixtures / "metric_gold.conll").string() + " -o " + (dir / "perfect").string() +
                             " --report-epoch 1");
    ASSERT_EQ(labelled.code, 0);
    const std::string table = slurp(dir / "perfect/entity_report.csv");
    EXPECT_EQ(table.rfind("# epoch: 1\nAcc,Pre,Rec,F1,Corr\n100.00%,100.00%,100.00%,100.00%,12\n", 0), 0u);
}

TEST_F(Cli, EvaluateMisalignedInputs) {
    const auto a = synth(5, 1, "a.conll");
    const auto b = synth(4, 1, "b.conll");
    const CliRun r = run("evaluate --gold " + a.string() + " --pred " + b.string() + " -o " + (dir / "rep").string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("sentences"), std::string::npos);
}

TEST_F(Cli, SweepWritesOneCurvePerSize) {
    const auto tr = synth(30, 3, "train.conll");
    const auto dv = synth(8, 4, "dev.conll");
    const std::string data = " --train " + tr.string() + " --dev " + dv.string() + kTiny + " --set max_epochs=2";
    const CliRun r = run("sweep --batch-sizes 1,4,10 -o " + (dir / "sw").string() + data);
    ASSERT_EQ(r.code, 0) << r.output;
    for (const char* f : {"curve_bs1.csv", "curve_bs4.csv", "curve_bs10.csv"}) {
        EXPECT_TRUE(fs::exists(dir / "sw" / f)) << f;
        EXPECT_LE(line_count(slurp(dir / "sw" / f)), 1u + 2u);
    }
    EXPECT_NE(slurp(dir / "sw/curve_bs1.csv"), slurp(dir / "sw/curve_bs10.csv"));

    // a single size reproduces the training run's curve
    ASSERT_EQ(run("sweep --batch-sizes 4 -o " + (dir / "one").string() + data).code, 0);
    ASSERT_EQ(run("train -o " + (dir / "t").string() + data).code, 0);
    EXPECT_EQ(slurp(dir / "one/curve_bs4.csv"), slurp(dir / "t/epoch_log.csv"));

    EXPECT_EQ(run("sweep --batch-sizes 4,0 -o " + (dir / "z").string() + data).code, 2);
    EXPECT_EQ(run("sweep --batch-sizes 4,x -o " + (dir / "z").string() + data).code, 2);
}

TEST_F(Cli, OutputRootEnvironmentVariable) {
    const auto all = synth(20, 1, "all.conll");
    ::setenv("TCRF_OUTPUT_ROOT", (dir / "root").string().c_str(), 1);
    const CliRun r = run("prepare -i " + all.string() + " -o relative/prep");
    ::unsetenv("TCRF_OUTPUT_ROOT");
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_TRUE(fs::exists(dir / "root/relative/prep/train.conll"));
}

TEST_F(Cli, SynthCorpus) {
    ASSERT_EQ(run("synth -n 7 --seed 2 -o " + (dir / "s.conll").string()).code, 0);
    EXPECT_EQ(read_conll_file((dir / "s.conll").string()).sentences, generate_synthetic_corpus(7, 2).sentences);
}
