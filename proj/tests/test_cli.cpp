#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "codonball/io.hpp"
#include "codonball/train.hpp"

#ifndef CODONBALL_BIN
#define CODONBALL_BIN "./codonball"
#endif
#ifndef CODONBALL_GEN_BIN
#define CODONBALL_GEN_BIN "./codonball-gen"
#endif

using nlohmann::json;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string out;
};

RunResult run(const std::string& args) {
    RunResult result;
    FILE* pipe = popen((args + " 2>&1").c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf;
    while (fgets(buf.data(), buf.size(), pipe)) result.out += buf.data();
    const int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("codonball_cli_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

// first stdout line is the resolved config echo
json first_line_json(const std::string& out) {
    const auto eol = out.find('\n');
    REQUIRE(eol != std::string::npos);
    return json::parse(out.substr(0, eol));
}

} // namespace

TEST_CASE("cli: help and unknown commands") {
    CHECK(run(std::string(CODONBALL_BIN) + " --help").exit_code == 0);
    CHECK(run(std::string(CODONBALL_BIN) + " frobnicate").exit_code != 0);
}

TEST_CASE("cli: geomcheck passes and echoes its config") {
    TempDir tmp;
    auto res = run(std::string(CODONBALL_BIN) + " geomcheck --cases 50 --seed 3 --report " +
                   tmp.file("geom.json"));
    CHECK(res.exit_code == 0);
    json config = first_line_json(res.out);
    CHECK(config["command"] == "geomcheck");
    CHECK(config["cases"] == 50);
    auto report = codonball::io::read_json_file(tmp.file("geom.json"));
    REQUIRE(report["curvatures"].size() == 3);   // the default c sweep
    CHECK(report["curvatures"][0]["curvature"] == 0.2);
    CHECK(report["curvatures"][1]["curvature"] == 0.5);
    CHECK(report["curvatures"][2]["curvature"] == 1.0);

    // widened projection epsilon must break exp/log inversion
    auto fault = run(std::string(CODONBALL_BIN) + " geomcheck --cases 50 --boundary-eps 1e-1");
    CHECK(fault.exit_code != 0);
}

TEST_CASE("cli: embed-tree writes prototypes, missing file rejected") {
    TempDir tmp;
    auto res = run(std::string(CODONBALL_BIN) + " embed-tree --dim 8 --refine-steps 5 --out " +
                   tmp.file("p.json") + " --distortion-report " + tmp.file("d.json"));
    CHECK(res.exit_code == 0);
    auto protos = codonball::io::load_prototypes(tmp.file("p.json"));
    CHECK(protos.count() == 70);
    CHECK(protos.dim() == 8);
    auto report = codonball::io::read_json_file(tmp.file("d.json"));
    CHECK(report["pair_count"] == 4278);

    // low dimensions still run (higher distortion expected)
    auto flat = run(std::string(CODONBALL_BIN) + " embed-tree --dim 2 --refine-steps 2 --out " +
                    tmp.file("p2.json"));
    CHECK(flat.exit_code == 0);
    CHECK(codonball::io::load_prototypes(tmp.file("p2.json")).dim() == 2);

    auto missing = run(std::string(CODONBALL_BIN) + " embed-tree --tree " + tmp.file("nope.json"));
    CHECK(missing.exit_code == 1);
}

TEST_CASE("cli: pretrain pipeline with determinism and validation errors") {
    TempDir tmp;
    REQUIRE(run(std::string(CODONBALL_GEN_BIN) + " --out " + tmp.file("c.fasta") +
                " --sequences 32 --length 12 --seed 5")
                .exit_code == 0);

    const std::string base = std::string(CODONBALL_BIN) + " pretrain " + tmp.file("c.fasta") +
                             " --steps 6 --batch-size 4 --seed 9 --head xe";
    auto r1 = run(base + " --out " + tmp.file("run1"));
    CHECK(r1.exit_code == 0);
    json config = first_line_json(r1.out);
    CHECK(config["head"] == "xe");
    CHECK(config["alpha"] == 0.0);   // xe defaults to plain cross-entropy

    auto r2 = run(base + " --out " + tmp.file("run2"));
    CHECK(r2.exit_code == 0);
    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    };
    CHECK(slurp(tmp.file("run1") + "/metrics.jsonl") == slurp(tmp.file("run2") + "/metrics.jsonl"));
    CHECK(slurp(tmp.file("run1") + "/checkpoint.bin") == slurp(tmp.file("run2") + "/checkpoint.bin"));

    // helm baseline combination: xe head with an explicit alpha
    auto helm = run(base + " --alpha 0.2 --out " + tmp.file("run3"));
    CHECK(helm.exit_code == 0);
    CHECK(first_line_json(helm.out)["alpha"] == 0.2);

    // prototype head without a prototype file is a validation error
    auto noproto = run(std::string(CODONBALL_BIN) + " pretrain " + tmp.file("c.fasta") +
                       " --head proto-dist --steps 2 --out " + tmp.file("run4"));
    CHECK(noproto.exit_code == 1);

    // unknown config keys are rejected
    std::ofstream cfg(tmp.file("bad.json"));
    cfg << R"({"steps": 4, "mystery": 1})";
    cfg.close();
    auto badcfg = run(std::string(CODONBALL_BIN) + " pretrain " + tmp.file("c.fasta") +
                      " --config " + tmp.file("bad.json") + " --out " + tmp.file("run5"));
    CHECK(badcfg.exit_code == 1);
    CHECK(badcfg.out.find("mystery") != std::string::npos);
}

TEST_CASE("cli: probe evaluates the 12-cell grid and validates inputs") {
    TempDir tmp;
    REQUIRE(run(std::string(CODONBALL_GEN_BIN) + " --out " + tmp.file("c.fasta") +
                " --sequences 60 --length 12 --seed 5 --bias-temp 2.0" +
                " --family-weight Alanine=10 --labels " + tmp.file("c.csv"))
                .exit_code == 0);
    REQUIRE(run(std::string(CODONBALL_BIN) + " pretrain " + tmp.file("c.fasta") +
                " --steps 2 --batch-size 4 --head xe --out " + tmp.file("run"))
                .exit_code == 0);

    auto ok = run(std::string(CODONBALL_BIN) + " probe " + tmp.file("run") + "/checkpoint.bin " +
                  tmp.file("c.csv") + " --epochs 2 --channels 8 --report " + tmp.file("rep.json"));
    CHECK(ok.exit_code == 0);
    auto report = codonball::io::read_json_file(tmp.file("rep.json"));
    CHECK(report["cells"].size() == 12);
    CHECK(report.contains("test_metric"));

    std::ofstream csv(tmp.file("bad.csv"));
    csv << "sequence,label\nATGGCT,notanumber\n";
    csv.close();
    auto bad = run(std::string(CODONBALL_BIN) + " probe " + tmp.file("run") + "/checkpoint.bin " +
                   tmp.file("bad.csv"));
    CHECK(bad.exit_code == 1);

    auto nometric = run(std::string(CODONBALL_BIN) + " probe " + tmp.file("run") +
                        "/checkpoint.bin " + tmp.file("bad.csv") + " --metric banana");
    CHECK(nometric.exit_code == 1);
}

TEST_CASE("cli: analyze emits csv and json, checks prediction alignment") {
    TempDir tmp;
    std::ofstream fasta(tmp.file("c.fasta"));
    fasta << ">gc\nGCGCGC\n>at\nATATAT\n";
    fasta.close();

    auto res = run(std::string(CODONBALL_BIN) + " analyze " + tmp.file("c.fasta") + " --csv " +
                   tmp.file("s.csv") + " --json " + tmp.file("a.json"));
    CHECK(res.exit_code == 0);
    std::ifstream csv(tmp.file("s.csv"));
    std::string header, row1;
    std::getline(csv, header);
    std::getline(csv, row1);
    CHECK(header == "name,length,length_bin,gc,gc_bin");
    CHECK(row1.find("gc,6,out_of_range,1,high") != std::string::npos);

    // aligned predictions produce a confusion section
    std::ofstream preds(tmp.file("p.json"));
    preds << R"({"pairs":[{"pred":[1,2],"target":[1,3]}]})";
    preds.close();
    auto with_preds = run(std::string(CODONBALL_BIN) + " analyze " + tmp.file("c.fasta") +
                          " --predictions " + tmp.file("p.json") + " --csv " + tmp.file("s2.csv") +
                          " --json " + tmp.file("a2.json"));
    CHECK(with_preds.exit_code == 0);
    auto aggregate = codonball::io::read_json_file(tmp.file("a2.json"));
    CHECK(aggregate["confusion"]["errors"] == 1);

    std::ofstream badpreds(tmp.file("bad.json"));
    badpreds << R"({"pairs":[{"pred":[1,2],"target":[1]}]})";
    badpreds.close();
    auto misaligned = run(std::string(CODONBALL_BIN) + " analyze " + tmp.file("c.fasta") +
                          " --predictions " + tmp.file("bad.json") + " --csv " + tmp.file("s3.csv") +
                          " --json " + tmp.file("a3.json"));
    CHECK(misaligned.exit_code == 1);
}
