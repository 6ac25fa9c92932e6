#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "vssa/checkpoint.hpp"
#include "vssa/dataset.hpp"

using namespace vssa;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
    fs::path path;
    explicit TmpDir(const std::string& tag) : path(fs::temp_directory_path() / ("vssa_cli_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TmpDir() { fs::remove_all(path); }
};

// Exit code of the driver binary, with stdout/stderr captured to a file.
int run(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(VSSA_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -2;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

int count_lines(const fs::path& p) {
    std::ifstream is(p);
    std::string line;
    int n = 0;
    while (std::getline(is, line)) ++n;
    return n;
}

// Fast settings shared by every training invocation below.
std::string tiny_train_flags() {
    return "--set iterations=10 --set base_size=96 --set width_multiplier=0.0625 --set attention_hidden=4 "
           "--set batch_size=2";
}

}  // namespace

TEST_CASE("gen-data writes the advertised file counts") {
    TmpDir tmp("gen");
    const fs::path log = tmp.path / "log";
    const fs::path ds = tmp.path / "ds";
    CHECK(run("gen-data --out " + ds.string() + " --train 8 --test 4 --image-size 96", log) == 0);

    int ppm = 0;
    for (const auto& e : fs::directory_iterator(ds / "images")) {
        if (e.path().extension() == ".ppm") ++ppm;
    }
    CHECK(ppm == 12);
    CHECK(count_lines(ds / "train.txt") == 8);  // one sign per image by default
    CHECK(count_lines(ds / "test.txt") == 4);
    CHECK(fs::exists(ds / "manifest.txt"));
}

TEST_CASE("gen-data is reproducible and refuses to clobber") {
    TmpDir tmp("repro");
    const fs::path log = tmp.path / "log";
    const std::string flags = " --train 3 --test 2 --seed 9 --image-size 96 --distractors 1";
    CHECK(run("gen-data --out " + (tmp.path / "a").string() + flags, log) == 0);
    CHECK(run("gen-data --out " + (tmp.path / "b").string() + flags, log) == 0);

    for (const auto& e : fs::recursive_directory_iterator(tmp.path / "a")) {
        if (!e.is_regular_file()) continue;
        const fs::path rel = fs::relative(e.path(), tmp.path / "a");
        CHECK(slurp(e.path()) == slurp(tmp.path / "b" / rel));
    }

    CHECK(run("gen-data --out " + (tmp.path / "a").string() + flags, log) == 1);
    CHECK(slurp(log).find("--force") != std::string::npos);
    CHECK(run("gen-data --out " + (tmp.path / "a").string() + flags + " --force", log) == 0);
}

TEST_CASE("train emits checkpoint, loss history and resolved config") {
    TmpDir tmp("train");
    const fs::path log = tmp.path / "log";
    const fs::path ds = tmp.path / "ds";
    REQUIRE(run("gen-data --out " + ds.string() + " --train 3 --test 1 --image-size 96", log) == 0);

    const fs::path ckpt = tmp.path / "run" / "model.ckpt";
    CHECK(run("train --data " + ds.string() + " --out " + ckpt.string() + " " + tiny_train_flags(), log) == 0);
    CHECK(fs::exists(ckpt));
    CHECK(count_lines(fs::path(ckpt.string() + ".loss.txt")) == 11);  // header + 10 iterations

    // The resolved config re-parses and reproduces the run's settings.
    const std::string cfg = slurp(fs::path(ckpt.string() + ".cfg"));
    CHECK(cfg.find("iterations = 10") != std::string::npos);
    CHECK(cfg.find("base_size = 96") != std::string::npos);
    CHECK(cfg.find("orientation = vertical") != std::string::npos);

    // Defaults-applied path is logged when no config file is given.
    CHECK(slurp(log).find("defaults in effect") != std::string::npos);
}

TEST_CASE("orientation none leaves no sequence-head tensors in the checkpoint") {
    TmpDir tmp("orient");
    const fs::path log = tmp.path / "log";
    const fs::path ds = tmp.path / "ds";
    REQUIRE(run("gen-data --out " + ds.string() + " --train 2 --test 1 --image-size 96", log) == 0);

    const fs::path plain = tmp.path / "plain.ckpt";
    REQUIRE(run("train --data " + ds.string() + " --out " + plain.string() + " --orientation none " +
                    "--set iterations=2 --set base_size=96 --set width_multiplier=0.0625 --set attention_hidden=4",
                log) == 0);
    bool saw_conv_head = false;
    for (const auto& t : read_checkpoint(plain)) {
        CHECK(t.name.find(".enc.") == std::string::npos);
        CHECK(t.name.find(".dec.") == std::string::npos);
        CHECK(t.name.find(".att.") == std::string::npos);
        if (t.name == "head32.w") saw_conv_head = true;
    }
    CHECK(saw_conv_head);

    const fs::path vert = tmp.path / "vert.ckpt";
    REQUIRE(run("train --data " + ds.string() + " --out " + vert.string() + " --orientation vertical " +
                    "--set iterations=2 --set base_size=96 --set width_multiplier=0.0625 --set attention_hidden=4",
                log) == 0);
    bool saw_seq_head = false;
    for (const auto& t : read_checkpoint(vert)) {
        if (t.name.find(".enc.") != std::string::npos) saw_seq_head = true;
    }
    CHECK(saw_seq_head);
}

TEST_CASE("eval and detect consume a trained checkpoint") {
    TmpDir tmp("evaldetect");
    const fs::path log = tmp.path / "log";
    const fs::path ds = tmp.path / "ds";
    REQUIRE(run("gen-data --out " + ds.string() + " --train 3 --test 2 --image-size 96", log) == 0);
    const fs::path ckpt = tmp.path / "model.ckpt";
    REQUIRE(run("train --data " + ds.string() + " --out " + ckpt.string() + " " + tiny_train_flags(), log) == 0);

    const fs::path report = tmp.path / "report.txt";
    CHECK(run("eval --ckpt " + ckpt.string() + " --data " + ds.string() + " --split test --out " + report.string(),
              log) == 0);
    CHECK(slurp(log).find("mAP") != std::string::npos);
    CHECK(slurp(report).find("mAP") != std::string::npos);

    const fs::path overlay = tmp.path / "overlay.ppm";
    CHECK(run("detect --ckpt " + ckpt.string() + " --image " + (ds / "images" / "test_00000.ppm").string() +
                  " --out " + overlay.string() + " --thresh 0.05",
              log) == 0);
    CHECK(fs::exists(overlay));
    CHECK(fs::exists(tmp.path / "overlay.txt"));

    // Nothing above an impossible threshold: empty list, byte-identical copy.
    const fs::path clean = tmp.path / "clean.ppm";
    CHECK(run("detect --ckpt " + ckpt.string() + " --image " + (ds / "images" / "test_00000.ppm").string() +
                  " --out " + clean.string() + " --thresh 0.999999",
              log) == 0);
    CHECK(slurp(tmp.path / "clean.txt").empty());
    CHECK(slurp(clean) == slurp(ds / "images" / "test_00000.ppm"));
}

TEST_CASE("usage, data and numerical failures map to distinct exit codes") {
    TmpDir tmp("exits");
    const fs::path log = tmp.path / "log";

    CHECK(run("", log) == 1);                       // missing subcommand
    CHECK(run("train", log) == 1);                  // missing required --data
    CHECK(run("frobnicate", log) == 1);             // unknown subcommand
    CHECK(run("gradcheck --op nonsense", log) == 1);

    CHECK(run("train --data " + (tmp.path / "absent").string() + " --set iterations=1", log) == 2);
    CHECK(slurp(log).find("error:") != std::string::npos);

    const fs::path ds = tmp.path / "ds";
    REQUIRE(run("gen-data --out " + ds.string() + " --train 2 --test 1 --image-size 96", log) == 0);
    CHECK(run("train --data " + ds.string() + " --set bogus_key=1", log) == 1);

    // A truncated checkpoint is a data error, not a crash.
    const fs::path ckpt = tmp.path / "model.ckpt";
    REQUIRE(run("train --data " + ds.string() + " --out " + ckpt.string() + " " + tiny_train_flags(), log) == 0);
    const std::string bytes = slurp(ckpt);
    std::ofstream(tmp.path / "cut.ckpt", std::ios::binary).write(bytes.data(), bytes.size() / 2);
    CHECK(run("eval --ckpt " + (tmp.path / "cut.ckpt").string() + " --data " + ds.string(), log) == 2);
    CHECK(slurp(log).find("truncated") != std::string::npos);
}

TEST_CASE("gradcheck subcommand runs a single named probe") {
    TmpDir tmp("gradcheck");
    const fs::path log = tmp.path / "log";
    CHECK(run("gradcheck --op relu", log) == 0);
    const std::string out = slurp(log);
    CHECK(out.find("relu: ok") != std::string::npos);
}

TEST_CASE("a config file seeds the run and flags override it") {
    TmpDir tmp("cfgfile");
    const fs::path log = tmp.path / "log";
    const fs::path ds = tmp.path / "ds";
    REQUIRE(run("gen-data --out " + ds.string() + " --train 2 --test 1 --image-size 96", log) == 0);

    const fs::path cfg = tmp.path / "train.cfg";
    std::ofstream(cfg) << "iterations = 3\nbase_size = 96\nwidth_multiplier = 0.0625\nattention_hidden = 4\n"
                          "orientation = horizontal\n";
    const fs::path ckpt = tmp.path / "model.ckpt";
    CHECK(run("train --config " + cfg.string() + " --data " + ds.string() + " --out " + ckpt.string() +
                  " --orientation vertical --set iterations=2",
              log) == 0);
    const std::string resolved = slurp(fs::path(ckpt.string() + ".cfg"));
    CHECK(resolved.find("orientation = vertical") != std::string::npos);  // flag beat the file
    CHECK(resolved.find("iterations = 2") != std::string::npos);          // --set beat the file
    CHECK(resolved.find("base_size = 96") != std::string::npos);          // file value kept
}
