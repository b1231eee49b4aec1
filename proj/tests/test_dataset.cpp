#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>

#include "helpers.hpp"

using namespace protext;
using data::ClassRecord;
using data::FixtureClient;
using data::GenerateOptions;
using data::PairSource;
using data::PromptDataset;
using data::PromptPair;
using data::QueryTemplate;
using data::RawOutputs;
using data::Split;

namespace {

std::vector<ClassRecord> fixture_classes() {
    return {{0, "fennec fox", "", Split::base},
            {1, "snow leopard", "", Split::base},
            {2, "red panda", "", Split::novel}};
}

// Fails with a transient error a fixed number of times before succeeding.
class FlakyClient final : public data::LlmClient {
public:
    FlakyClient(std::size_t failures, std::size_t n) : failures_(failures), n_(n) {}

    std::vector<std::string> complete(const std::string&, std::size_t n, int, int) override {
        ++calls;
        if (calls <= failures_) {
            throw data::TransientError("simulated outage");
        }
        return std::vector<std::string>(std::min(n, n_), "a description");
    }

    std::string describe() const override { return "flaky"; }

    std::size_t calls = 0;

private:
    std::size_t failures_;
    std::size_t n_;
};

}  // namespace

TEST_CASE("render_template substitutes the class name and suffix") {
    ClassRecord plain{0, "dog", "", Split::all};
    ClassRecord suffixed{1, "rose", ", a type of flower", Split::all};
    REQUIRE(data::render_template("a photo of a {CLS}", plain) == "a photo of a dog");
    REQUIRE(data::render_template("a photo of a {CLS}.", suffixed) ==
            "a photo of a rose, a type of flower.");
    REQUIRE_THROWS_AS(data::render_template("no placeholder", plain), ValidationError);
    REQUIRE_THROWS_AS(data::render_template("{CLS} and {CLS}", plain), ValidationError);
}

TEST_CASE("the stock query set has the five expected entries") {
    const auto q = data::default_query_templates();
    REQUIRE(q.size() == 5);
    REQUIRE(q[0].text == "Describe what a(n) {CLS} looks like.");
    REQUIRE(q[1].text == "How can you identify a(n) {CLS}?");
    REQUIRE(q[2].text == "What does a(n) {CLS} look like?");
    REQUIRE(q[3].text == "Describe an image from the internet of a(n) {CLS}.");
    REQUIRE(q[4].text == "A caption of an image of a(n) {CLS}.");
    for (int i = 0; i < 5; ++i) {
        REQUIRE(q[i].id == i);
    }
}

TEST_CASE("fixture curation yields M*N*C pairs with one input per class") {
    FixtureClient client(PROTEXT_FIXTURE_DIR);
    GenerateOptions opt;
    opt.outputs_per_query = 4;
    std::size_t filtered = 0;
    const auto outputs = data::generate_outputs(fixture_classes(),
                                                data::default_query_templates(), client, opt,
                                                &filtered);
    REQUIRE(filtered == 0);
    data::DatasetMeta meta;
    meta.outputs_per_query = 4;
    meta.query_count = 5;
    meta.generator = client.describe();
    PromptDataset ds = data::assemble_dataset(fixture_classes(), "a photo of a {CLS}", outputs,
                                              PairSource::fixture, meta);
    REQUIRE(ds.pairs.size() == 60);
    std::map<int, std::set<std::string>> inputs;
    for (const PromptPair& p : ds.pairs) {
        inputs[p.class_id].insert(p.input_text);
    }
    REQUIRE(inputs.size() == 3);
    for (const auto& [cid, texts] : inputs) {
        REQUIRE(texts.size() == 1);
    }
    REQUIRE(inputs.at(0).count("a photo of a fennec fox") == 1);
}

TEST_CASE("blank completions are dropped and counted") {
    const auto dir = testutil::temp_dir("fixture-blank");
    std::filesystem::create_directories(dir / "0");
    {
        std::ofstream out(dir / "0" / "0.txt");
        out << "a real description\n   \nanother description\n";
    }
    FixtureClient client(dir);
    GenerateOptions opt;
    opt.outputs_per_query = 3;
    std::size_t filtered = 0;
    const auto outputs = data::generate_outputs({{0, "thing", "", Split::all}},
                                                {{"{CLS}?", 0}}, client, opt, &filtered);
    REQUIRE(filtered == 1);
    REQUIRE(outputs.size() == 1);
    REQUIRE(outputs[0].texts.size() == 2);
}

TEST_CASE("fixture files shorter than M are an error") {
    FixtureClient client(PROTEXT_FIXTURE_DIR);
    GenerateOptions opt;
    opt.outputs_per_query = 10;
    REQUIRE_THROWS_AS(data::generate_outputs(fixture_classes(),
                                             data::default_query_templates(), client, opt),
                      IoError);
}

TEST_CASE("missing fixture directory or file is an io error") {
    REQUIRE_THROWS_AS(FixtureClient("/nonexistent/fixtures"), IoError);
    FixtureClient client(PROTEXT_FIXTURE_DIR);
    GenerateOptions opt;
    REQUIRE_THROWS_AS(data::generate_outputs({{9, "ghost", "", Split::all}},
                                             {{"{CLS}?", 0}}, client, opt),
                      IoError);
}

TEST_CASE("transient failures retry with backoff then succeed") {
    FlakyClient client(2, 4);
    GenerateOptions opt;
    opt.outputs_per_query = 2;
    opt.max_retries = 3;
    opt.backoff_ms = 1;
    const auto outputs =
        data::generate_outputs({{0, "x", "", Split::all}}, {{"{CLS}?", 0}}, client, opt);
    REQUIRE(outputs[0].texts.size() == 2);
    REQUIRE(client.calls == 3);
}

TEST_CASE("retries exhaust into an io error") {
    FlakyClient client(10, 4);
    GenerateOptions opt;
    opt.max_retries = 2;
    opt.backoff_ms = 1;
    REQUIRE_THROWS_AS(
        data::generate_outputs({{0, "x", "", Split::all}}, {{"{CLS}?", 0}}, client, opt),
        IoError);
    REQUIRE(client.calls == 3);
}

TEST_CASE("handcrafted assembly renders K templates per class") {
    const std::vector<std::string> templates = {"a photo of a {CLS}.", "art of the {CLS}.",
                                                "a toy {CLS}."};
    PromptDataset ds = data::assemble_handcrafted(fixture_classes(), "a photo of a {CLS}",
                                                  templates, PairSource::handcrafted_80);
    REQUIRE(ds.pairs.size() == 9);
    REQUIRE(ds.meta.generator == "handcrafted");
    REQUIRE(ds.meta.query_count == 3);
    REQUIRE(ds.pairs[0].output_text == "a photo of a fennec fox.");
    REQUIRE(ds.pairs[1].output_text == "art of the fennec fox.");
    REQUIRE(ds.pairs[0].source == PairSource::handcrafted_80);
}

TEST_CASE("dataset JSONL round trip is identity") {
    std::vector<RawOutputs> outputs = {{0, {"desc a", "desc b"}},
                                       {1, {"desc c", "desc d"}},
                                       {2, {"desc e", "desc f"}}};
    data::DatasetMeta meta;
    meta.outputs_per_query = 2;
    meta.query_count = 1;
    meta.generator = "fixture:test";
    PromptDataset ds = data::assemble_dataset(fixture_classes(), "a photo of a {CLS}", outputs,
                                              PairSource::fixture, meta);
    const auto dir = testutil::temp_dir("dataset");
    data::save_dataset(ds, dir / "pairs.jsonl");
    PromptDataset r = data::load_dataset(dir / "pairs.jsonl");
    REQUIRE(r.pairs.size() == ds.pairs.size());
    for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
        REQUIRE(r.pairs[i].class_id == ds.pairs[i].class_id);
        REQUIRE(r.pairs[i].input_text == ds.pairs[i].input_text);
        REQUIRE(r.pairs[i].output_text == ds.pairs[i].output_text);
        REQUIRE(r.pairs[i].source == ds.pairs[i].source);
    }
    REQUIRE(r.classes.size() == 3);
    REQUIRE(r.classes[2].split == Split::novel);
    REQUIRE(r.meta.outputs_per_query == 2);
    REQUIRE(r.meta.query_count == 1);
    REQUIRE(r.meta.generator == "fixture:test");
    REQUIRE(r.meta.input_template == "a photo of a {CLS}");

    // a second save of the loaded dataset produces identical bytes
    data::save_dataset(r, dir / "pairs2.jsonl");
    auto bytes = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string{std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>()};
    };
    REQUIRE(bytes(dir / "pairs.jsonl") == bytes(dir / "pairs2.jsonl"));
    REQUIRE(bytes(data::dataset_header_path(dir / "pairs.jsonl")) ==
            bytes(data::dataset_header_path(dir / "pairs2.jsonl")));
}

TEST_CASE("dataset load failures carry the offending line") {
    const auto dir = testutil::temp_dir("dataset-bad");
    REQUIRE_THROWS_AS(data::load_dataset(dir / "missing.jsonl"), IoError);

    {
        std::ofstream h(data::dataset_header_path(dir / "p.jsonl"));
        h << R"({"version":"0","classes":[{"class_id":0,"name":"x"}],"meta":{}})";
        std::ofstream out(dir / "p.jsonl");
        out << R"({"class_id":0,"input":"a x","output":"y","source":"fixture"})" << "\n";
        out << "{broken\n";
    }
    try {
        data::load_dataset(dir / "p.jsonl");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("dataset validation rejects inconsistent content") {
    PromptDataset ds;
    ds.classes = fixture_classes();
    ds.meta.generator = "fixture:x";

    SECTION("duplicate class name") {
        ds.classes.push_back({5, "red panda", "", Split::base});
        REQUIRE_THROWS_AS(ds.validate(), ValidationError);
    }
    SECTION("duplicate class id") {
        ds.classes.push_back({0, "other", "", Split::base});
        REQUIRE_THROWS_AS(ds.validate(), ValidationError);
    }
    SECTION("unknown class id in a pair") {
        ds.pairs.push_back({7, "a photo", "desc", PairSource::fixture});
        REQUIRE_THROWS_AS(ds.validate(), ValidationError);
    }
    SECTION("diverging input text within a class") {
        ds.pairs.push_back({0, "input one", "d1", PairSource::fixture});
        ds.pairs.push_back({0, "input two", "d2", PairSource::fixture});
        REQUIRE_THROWS_AS(ds.validate(), ValidationError);
    }
    SECTION("empty output") {
        ds.pairs.push_back({0, "input", "", PairSource::fixture});
        REQUIRE_THROWS_AS(ds.validate(), ValidationError);
    }
    SECTION("pair count must be M*N*C when unfiltered") {
        ds.meta.outputs_per_query = 2;
        ds.meta.query_count = 2;
        ds.pairs.push_back({0, "input", "d", PairSource::fixture});
        REQUIRE_THROWS_AS(ds.validate(), ValidationError);
    }
}

TEST_CASE("split filters select the right classes and pairs") {
    PromptDataset ds;
    ds.classes = fixture_classes();
    ds.meta.generator = "fixture:x";
    ds.pairs = {{0, "a", "d0", PairSource::fixture},
                {1, "b", "d1", PairSource::fixture},
                {2, "c", "d2", PairSource::fixture}};
    REQUIRE(ds.classes_in(Split::base).size() == 2);
    REQUIRE(ds.classes_in(Split::novel).size() == 1);
    REQUIRE(ds.classes_in(Split::all).size() == 3);
    REQUIRE(ds.pairs_in(Split::base).size() == 2);
    REQUIRE(ds.pairs_in(Split::novel).size() == 1);
    REQUIRE(ds.pairs_in(Split::novel)[0].class_id == 2);
}

TEST_CASE("template lists skip comments and blank lines") {
    const auto dir = testutil::temp_dir("templates");
    {
        std::ofstream out(dir / "t.txt");
        out << "# header comment\n\na photo of a {CLS}.\n   \nart of the {CLS}.\n";
    }
    const auto t = data::load_template_list(dir / "t.txt");
    REQUIRE(t == std::vector<std::string>{"a photo of a {CLS}.", "art of the {CLS}."});
    REQUIRE_THROWS_AS(data::load_template_list(dir / "absent.txt"), IoError);
}
