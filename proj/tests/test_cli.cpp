#include <doctest/doctest.h>

#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "rdkv/pipeline.hpp"
#include "rdkv/quantizer.hpp"

namespace fs = std::filesystem;

TEST_SUITE_BEGIN("cli");

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run(const std::string& args) {
    const std::string cmd = std::string(RDKV_CLI_PATH) + " " + args + " 2>&1";
    std::array<char, 512> buf{};
    RunResult res;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (fgets(buf.data(), buf.size(), pipe)) res.output += buf.data();
    const int status = pclose(pipe);
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return res;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("rdkv_cli_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

const std::string kGenFlags =
    "--layers 1 --q-heads 4 --kv-heads 2 --head-dim 16 --seq-len 64 --window 8";

}  // namespace

TEST_CASE("gen is deterministic and loadable") {
    TempDir dir;
    auto a = run("gen --seed 3 " + kGenFlags + " -o " + dir.file("a.rdkvc"));
    CHECK(a.exit_code == 0);
    auto b = run("gen --seed 3 " + kGenFlags + " -o " + dir.file("b.rdkvc"));
    CHECK(b.exit_code == 0);
    CHECK(slurp(dir.file("a.rdkvc")) == slurp(dir.file("b.rdkvc")));

    auto cache = rdkv::load_cache_file(dir.file("a.rdkvc"));
    CHECK(cache.shape.seq_len == 64);
    CHECK(cache.probe_window == 8);

    auto bad = run("gen --head-dim 0 -o " + dir.file("c.rdkvc"));
    CHECK(bad.exit_code != 0);
}

TEST_CASE("calibrate emits a valid tables file") {
    TempDir dir;
    REQUIRE(run("gen --seed 1 " + kGenFlags + " -o " + dir.file("c1.rdkvc")).exit_code == 0);
    REQUIRE(run("gen --seed 2 " + kGenFlags + " -o " + dir.file("c2.rdkvc")).exit_code == 0);
    auto res = run("calibrate --granularity both -o " + dir.file("tables.json") + " " +
                   dir.file("c1.rdkvc") + " " + dir.file("c2.rdkvc"));
    CHECK(res.exit_code == 0);
    auto tables = rdkv::load_distortion_tables(dir.file("tables.json"));
    REQUIRE(tables.size() == 2);
    for (const auto& t : tables) CHECK_NOTHROW(t.validate());

    auto missing = run("calibrate -o " + dir.file("x.json"));
    CHECK(missing.exit_code != 0);
}

TEST_CASE("allocate, dump-bits and verify work end to end") {
    TempDir dir;
    REQUIRE(run("gen --seed 9 " + kGenFlags + " -o " + dir.file("c.rdkvc")).exit_code == 0);
    REQUIRE(run("calibrate -o " + dir.file("t.json") + " " + dir.file("c.rdkvc")).exit_code == 0);

    auto alloc = run("allocate --cache " + dir.file("c.rdkvc") + " --tables " + dir.file("t.json") +
                     " --budget-tokens 32 --window 8 -o " + dir.file("out"));
    CHECK(alloc.exit_code == 0);
    CHECK(fs::exists(dir.file("out.alloc.json")));
    CHECK(fs::exists(dir.file("out.rdkvp")));

    auto model_alloc = rdkv::load_allocation(dir.file("out.alloc.json"));
    CHECK(model_alloc.shape.seq_len == 64);

    // achieved bits stay near the budget and outputs are byte-deterministic
    const auto budget = rdkv::head_budget(model_alloc.spec, 16, 2);
    const double budget_total = budget.head_bits * 1 * 2;
    CHECK(std::abs(model_alloc.total_achieved_bits() - budget_total) / budget_total < 0.05);
    auto again = run("allocate --cache " + dir.file("c.rdkvc") + " --tables " + dir.file("t.json") +
                     " --budget-tokens 32 --window 8 -o " + dir.file("out2"));
    CHECK(again.exit_code == 0);
    CHECK(slurp(dir.file("out.alloc.json")) == slurp(dir.file("out2.alloc.json")));
    CHECK(slurp(dir.file("out.rdkvp")) == slurp(dir.file("out2.rdkvp")));

    auto dump = run("dump-bits --alloc " + dir.file("out.alloc.json") +
                    " --layer 0 --head 1 --kind token -o " + dir.file("bits.csv"));
    CHECK(dump.exit_code == 0);
    {
        std::istringstream in(slurp(dir.file("bits.csv")));
        std::string line;
        int rows = -1;
        while (std::getline(in, line)) ++rows;
        CHECK(rows == 64);
    }

    auto verify = run("verify --cache " + dir.file("c.rdkvc") + " --packed " + dir.file("out.rdkvp") +
                      " --queries 4 --seed 11");
    CHECK(verify.exit_code == 0);
    CHECK(verify.output.find("PASS") != std::string::npos);

    auto missing_tables = run("allocate --cache " + dir.file("c.rdkvc") + " --tables " +
                              dir.file("nope.json") + " -o " + dir.file("y"));
    CHECK(missing_tables.exit_code != 0);
}

TEST_CASE("saturated budget verifies at 1e-6 and tampering is caught") {
    TempDir dir;
    REQUIRE(run("gen --seed 5 " + kGenFlags + " -o " + dir.file("c.rdkvc")).exit_code == 0);
    REQUIRE(run("calibrate -o " + dir.file("t.json") + " " + dir.file("c.rdkvc")).exit_code == 0);
    // n >= T * H_kv saturates every head
    auto alloc = run("allocate --cache " + dir.file("c.rdkvc") + " --tables " + dir.file("t.json") +
                     " --budget-tokens 128 --window 8 -o " + dir.file("full"));
    REQUIRE(alloc.exit_code == 0);
    auto verify = run("verify --cache " + dir.file("c.rdkvc") + " --packed " +
                      dir.file("full.rdkvp") + " --queries 4 --seed 1 --tol 1e-6");
    CHECK(verify.exit_code == 0);

    // every unit of a saturated run sits at 16 bits
    REQUIRE(run("dump-bits --alloc " + dir.file("full.alloc.json") +
                " --layer 0 --head 0 --kind channel -o " + dir.file("ch.csv"))
                .exit_code == 0);
    {
        std::istringstream in(slurp(dir.file("ch.csv")));
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line)) {
            CHECK(line.substr(line.rfind(',') + 1) == "16");
        }
    }

    // flip one byte near the end of the payload blob
    auto bytes = slurp(dir.file("full.rdkvp"));
    bytes[bytes.size() - 5] = static_cast<char>(bytes[bytes.size() - 5] ^ 0x5A);
    std::ofstream(dir.file("tampered.rdkvp"), std::ios::binary) << bytes;
    auto tampered = run("verify --cache " + dir.file("c.rdkvc") + " --packed " +
                        dir.file("tampered.rdkvp") + " --queries 4 --seed 1 --tol 1e-6");
    CHECK(tampered.exit_code != 0);
    CHECK(tampered.output.find("FAIL") != std::string::npos);
}

TEST_CASE("sweep CSV is deterministic and well-formed") {
    TempDir dir;
    REQUIRE(run("gen --seed 21 " + kGenFlags + " -o " + dir.file("s1.rdkvc")).exit_code == 0);
    REQUIRE(run("gen --seed 22 " + kGenFlags + " -o " + dir.file("s2.rdkvc")).exit_code == 0);
    REQUIRE(run("calibrate -o " + dir.file("t.json") + " " + dir.file("s1.rdkvc")).exit_code == 0);

    const std::string cmd = "sweep --tables " + dir.file("t.json") +
                            " --grid 2,16 --window 8 -o " + dir.file("sweep.csv") + " " +
                            dir.file("s1.rdkvc") + " " + dir.file("s2.rdkvc");
    CHECK(run(cmd).exit_code == 0);
    auto first = slurp(dir.file("sweep.csv"));
    CHECK(first.rfind("seq_id,avg_bits,primal,dual,feasible\n", 0) == 0);
    CHECK(run(cmd).exit_code == 0);
    CHECK(slurp(dir.file("sweep.csv")) == first);

    auto empty_grid = run("sweep --tables " + dir.file("t.json") + " --grid '' -o " +
                          dir.file("x.csv") + " " + dir.file("s1.rdkvc"));
    CHECK(empty_grid.exit_code != 0);

    auto with_plot = run("sweep --tables " + dir.file("t.json") + " --grid 2,16 --window 8 -o " +
                         dir.file("p.csv") + " --plot " + dir.file("p.svg") + " " +
                         dir.file("s1.rdkvc"));
    CHECK(with_plot.exit_code == 0);
    auto svg = slurp(dir.file("p.svg"));
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("polyline") != std::string::npos);
}

TEST_SUITE_END();
