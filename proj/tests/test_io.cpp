#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "codonball/io.hpp"
#include "codonball/treembed.hpp"

using namespace codonball;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("codonball_io_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

} // namespace

TEST_CASE("fasta round trip and validation") {
    TempDir tmp;
    std::vector<io::FastaRecord> records = {{"a", "ATGGCTTAA"}, {"b", std::string(130, 'A')}};
    io::write_fasta(tmp.file("x.fasta"), records);
    auto back = io::read_fasta(tmp.file("x.fasta"));
    REQUIRE(back.size() == 2);
    CHECK(back[0].name == "a");
    CHECK(back[0].sequence == "ATGGCTTAA");
    CHECK(back[1].sequence == records[1].sequence);   // line wrapping undone

    std::ofstream bad(tmp.file("bad.fasta"));
    bad << "ATG\n";
    bad.close();
    CHECK_THROWS_WITH_AS(io::read_fasta(tmp.file("bad.fasta")), doctest::Contains(":1"),
                         ValidationError);
    CHECK_THROWS_AS(io::read_fasta(tmp.file("missing.fasta")), ValidationError);
}

TEST_CASE("tree json round trip") {
    TempDir tmp;
    auto tree = hierarchy::CodonTree::standard();
    io::write_tree(tmp.file("tree.json"), tree);
    auto back = io::read_tree(tmp.file("tree.json"));
    CHECK(back.size() == tree.size());
    CHECK(back.leaves().size() == 70);
    for (int token : {0, 20, 69})
        CHECK(back.family_of_token(token) == tree.family_of_token(token));

    auto j = io::tree_to_json(tree);
    j["nodes"][5]["kind"] = "banana";
    CHECK_THROWS_AS(io::tree_from_json(j), ValidationError);
}

TEST_CASE("base64 round trip") {
    std::mt19937_64 rng(3);
    for (std::size_t len : {0u, 1u, 2u, 3u, 17u, 1000u}) {
        std::vector<std::uint8_t> data(len);
        for (auto& b : data) b = static_cast<std::uint8_t>(rng());
        CHECK(io::base64_decode(io::base64_encode(data.data(), data.size())) == data);
    }
    CHECK_THROWS_AS(io::base64_decode("@@@@"), ValidationError);
}

TEST_CASE("prototype file round trips bit-exactly") {
    TempDir tmp;
    auto tree = hierarchy::CodonTree::standard();
    auto emb = treembed::embed_tree_constructive(tree, 8, 0.5, 2.0, 3);
    auto protos = treembed::leaf_prototypes(emb, tree, 0.1, 1.05);

    io::save_prototypes(tmp.file("p.json"), protos);
    auto back = io::load_prototypes(tmp.file("p.json"));
    CHECK(back.points == protos.points);   // bit-exact
    CHECK(back.token_order == protos.token_order);
    CHECK(back.curvature == protos.curvature);
    CHECK(back.tau == protos.tau);
    CHECK(back.cone_k == protos.cone_k);
    CHECK(back.cone_eta == protos.cone_eta);

    // saving again produces identical bytes
    io::save_prototypes(tmp.file("p2.json"), back);
    std::ifstream f1(tmp.file("p.json")), f2(tmp.file("p2.json"));
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
}

TEST_CASE("tensor archive round trip") {
    TempDir tmp;
    io::TensorArchive archive;
    archive.meta = {{"note", "test"}, {"step", 17}};
    std::mt19937_64 rng(5);
    std::normal_distribution<double> gauss;
    Eigen::MatrixXd a(3, 4), b(1, 7);
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = gauss(rng);
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = gauss(rng);
    archive.tensors.emplace_back("a", a);
    archive.tensors.emplace_back("b", b);

    io::save_archive(tmp.file("t.bin"), archive);
    auto back = io::load_archive(tmp.file("t.bin"));
    CHECK(back.meta["note"] == "test");
    CHECK(back.at("a") == a);
    CHECK(back.at("b") == b);
    CHECK_FALSE(back.has("c"));
    CHECK_THROWS_AS(back.at("c"), ValidationError);

    std::ofstream junk(tmp.file("junk.bin"), std::ios::binary);
    junk << "notanarchive";
    junk.close();
    CHECK_THROWS_AS(io::load_archive(tmp.file("junk.bin")), ValidationError);
}

TEST_CASE("labeled csv") {
    TempDir tmp;
    io::LabeledData data;
    data.sequences = {"ATGGCT", "GCTGCT"};
    data.labels = {0.25, 0.5};
    io::write_labeled_csv(tmp.file("d.csv"), data);
    auto back = io::read_labeled_csv(tmp.file("d.csv"));
    CHECK(back.sequences == data.sequences);
    CHECK(back.labels == data.labels);

    std::ofstream noseq(tmp.file("noseq.csv"));
    noseq << "label,foo\n1,2\n";
    noseq.close();
    CHECK_THROWS_WITH_AS(io::read_labeled_csv(tmp.file("noseq.csv")),
                         doctest::Contains("sequence"), ValidationError);

    std::ofstream nolabel(tmp.file("nolabel.csv"));
    nolabel << "sequence\nATG\n";
    nolabel.close();
    CHECK_THROWS_WITH_AS(io::read_labeled_csv(tmp.file("nolabel.csv")),
                         doctest::Contains("label"), ValidationError);

    std::ofstream badnum(tmp.file("badnum.csv"));
    badnum << "sequence,label\nATG,abc\n";
    badnum.close();
    CHECK_THROWS_AS(io::read_labeled_csv(tmp.file("badnum.csv")), ValidationError);
}

TEST_CASE("jsonl append and read") {
    TempDir tmp;
    const std::string path = tmp.file("log.jsonl");
    io::append_jsonl(path, {{"step", 1}, {"loss", 0.5}});
    io::append_jsonl(path, {{"step", 2}, {"loss", 0.25}});
    auto rows = io::read_jsonl(path);
    REQUIRE(rows.size() == 2);
    CHECK(rows[1]["step"] == 2);
}
