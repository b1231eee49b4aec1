#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "helpers.hpp"

using namespace protext;
using num::Tensor;
using num::TensorStore;

namespace {

TensorStore sample_store(std::uint64_t seed) {
    Rng rng(seed);
    TensorStore s;
    s.tensors.emplace("w.a", Tensor::gaussian({3, 4}, rng));
    s.tensors.emplace("w.b", Tensor::gaussian({7}, rng, 0.1));
    s.extra["note"] = "sample";
    return s;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("tensor store round trip is bitwise exact") {
    const auto dir = testutil::temp_dir("store");
    TensorStore s = sample_store(5);
    s.save(dir / "w.json");
    TensorStore r = TensorStore::load(dir / "w.json");
    REQUIRE(r.tensors.size() == 2);
    REQUIRE(r.tensors.at("w.a").bitwise_equal(s.tensors.at("w.a")));
    REQUIRE(r.tensors.at("w.b").bitwise_equal(s.tensors.at("w.b")));
    REQUIRE(r.tensors.at("w.a").shape == std::vector<std::size_t>{3, 4});
    REQUIRE(r.extra.at("note") == "sample");
}

TEST_CASE("tensor store writes identical bytes on repeated saves") {
    const auto dir = testutil::temp_dir("store-repeat");
    TensorStore s = sample_store(6);
    s.save(dir / "a.json");
    const std::string manifest = file_bytes(dir / "a.json");
    const std::string blob = file_bytes(dir / "a.bin");
    s.save(dir / "a.json");
    REQUIRE(file_bytes(dir / "a.json") == manifest);
    REQUIRE(file_bytes(dir / "a.bin") == blob);
    // a second store with the same content writes the same blob
    sample_store(6).save(dir / "b.json");
    REQUIRE(file_bytes(dir / "b.bin") == blob);
}

TEST_CASE("fingerprint tracks content") {
    TensorStore a = sample_store(7);
    TensorStore b = sample_store(7);
    REQUIRE(a.fingerprint() == b.fingerprint());
    b.tensors.at("w.b").data[0] += 1e-9;
    REQUIRE(a.fingerprint() != b.fingerprint());
    TensorStore c = sample_store(7);
    c.tensors.emplace("w.c", Tensor::zeros({1}));
    REQUIRE(a.fingerprint() != c.fingerprint());
}

TEST_CASE("fingerprint survives a save/load cycle") {
    const auto dir = testutil::temp_dir("store-fp");
    TensorStore s = sample_store(8);
    s.save(dir / "w.json");
    REQUIRE(TensorStore::load(dir / "w.json").fingerprint() == s.fingerprint());
}

TEST_CASE("tensor store load failures") {
    const auto dir = testutil::temp_dir("store-bad");
    REQUIRE_THROWS_AS(TensorStore::load(dir / "missing.json"), IoError);

    TensorStore s = sample_store(9);
    s.save(dir / "w.json");
    SECTION("data blob removed") {
        std::filesystem::remove(dir / "w.bin");
        REQUIRE_THROWS_AS(TensorStore::load(dir / "w.json"), IoError);
    }
    SECTION("manifest corrupted") {
        std::ofstream out(dir / "w.json");
        out << "{\"tensors\": 3}";
        out.close();
        REQUIRE_THROWS_AS(TensorStore::load(dir / "w.json"), IoError);
    }
    SECTION("blob truncated") {
        std::filesystem::resize_file(dir / "w.bin", 8);
        REQUIRE_THROWS_AS(TensorStore::load(dir / "w.json"), IoError);
    }
}

TEST_CASE("non-finite tensors are rejected on load") {
    const auto dir = testutil::temp_dir("store-nan");
    TensorStore s = sample_store(10);
    s.tensors.at("w.a").data[2] = std::numeric_limits<double>::quiet_NaN();
    // save does not inspect values; load must
    s.save(dir / "w.json");
    REQUIRE_THROWS_AS(TensorStore::load(dir / "w.json"), NumericError);
}
