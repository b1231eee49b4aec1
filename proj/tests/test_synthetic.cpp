#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "helpers.hpp"

using namespace protext;
using cli::SyntheticWorld;
using cli::SyntheticWorldConfig;
using num::Tensor;

namespace {

SyntheticWorldConfig small_config(std::uint64_t seed = 5) {
    SyntheticWorldConfig cfg;
    cfg.num_classes = 6;
    cfg.base_count = 3;
    cfg.novel_count = 3;
    cfg.descriptions_per_class = 5;
    cfg.images_per_class = 4;
    cfg.words_per_class = 3;
    cfg.sigma = 0.2;
    cfg.seed = seed;
    cfg.encoder = text::EncoderConfig{1, 16, 4, 4.0, 16, 8, num::GeluKind::tanh_approx};
    return cfg;
}

}  // namespace

TEST_CASE("synthetic world structure") {
    SyntheticWorldConfig cfg = small_config();
    SyntheticWorld world = cli::make_synthetic_world(cfg);

    REQUIRE(world.dataset.classes.size() == 6);
    REQUIRE(world.dataset.classes_in(data::Split::base).size() == 3);
    REQUIRE(world.dataset.classes_in(data::Split::novel).size() == 3);
    REQUIRE(world.dataset.pairs.size() == 6 * 5);
    REQUIRE(world.dataset.classes[0].name == "object00");
    REQUIRE(world.dataset.classes[5].name == "object05");
    REQUIRE(world.dataset.meta.generator == "synthetic");

    // every pair of a class shares the rendered template input
    for (const data::PromptPair& p : world.dataset.pairs) {
        const std::string expect =
            "a photo of a object0" + std::to_string(p.class_id);
        REQUIRE(p.input_text == expect);
        REQUIRE_FALSE(p.output_text.empty());
    }

    REQUIRE(world.images_base.count() == 3 * 4);
    REQUIRE(world.images_novel.count() == 3 * 4);
    for (int l : world.images_base.labels) {
        REQUIRE(l >= 0);
        REQUIRE(l < 3);
    }
    world.images_base.validate();
    world.images_novel.validate();

    // vocabulary covers the templates, names, and trait words
    for (const std::string& w :
         {std::string("a"), std::string("photo"), std::string("of"),
          std::string("object03"), std::string("trait05c")}) {
        REQUIRE(world.vocab.lookup(w) != world.vocab.unk_id);
    }

    // every description survives tokenization without falling back to [unk]
    for (const data::PromptPair& p : world.dataset.pairs) {
        const text::TokenSequence seq =
            text::tokenize(p.output_text, world.vocab, cfg.encoder.context_length);
        for (std::uint32_t id : seq.ids) {
            REQUIRE(id != world.vocab.unk_id);
        }
    }

    world.dataset.validate();
}

TEST_CASE("synthetic world is a pure function of its config") {
    SyntheticWorld a = cli::make_synthetic_world(small_config(9));
    SyntheticWorld b = cli::make_synthetic_world(small_config(9));
    SyntheticWorld c = cli::make_synthetic_world(small_config(10));

    REQUIRE(a.weights.fingerprint() == b.weights.fingerprint());
    REQUIRE(a.images_base.features.bitwise_equal(b.images_base.features));
    REQUIRE(a.images_novel.features.bitwise_equal(b.images_novel.features));
    REQUIRE(a.dataset.pairs.size() == b.dataset.pairs.size());
    for (std::size_t i = 0; i < a.dataset.pairs.size(); ++i) {
        REQUIRE(a.dataset.pairs[i].output_text == b.dataset.pairs[i].output_text);
    }

    REQUIRE(a.weights.fingerprint() != c.weights.fingerprint());
    REQUIRE_FALSE(a.images_base.features.bitwise_equal(c.images_base.features));
}

TEST_CASE("most descriptions omit the class name") {
    SyntheticWorldConfig cfg = small_config(3);
    cfg.descriptions_per_class = 40;
    SyntheticWorld world = cli::make_synthetic_world(cfg);
    std::size_t with_name = 0;
    for (const data::PromptPair& p : world.dataset.pairs) {
        const std::string& name =
            world.dataset.classes[static_cast<std::size_t>(p.class_id)].name;
        if (p.output_text.find(name) != std::string::npos) ++with_name;
    }
    REQUIRE(with_name > 0);
    REQUIRE(with_name < world.dataset.pairs.size() / 2);
}

TEST_CASE("full name correlation copies the trait embeddings") {
    SyntheticWorldConfig cfg = small_config(4);
    cfg.name_correlation = 1.0;
    SyntheticWorld world = cli::make_synthetic_world(cfg);
    const Tensor& emb = world.weights.t("token_embedding");
    const std::size_t dm = cfg.encoder.d_model;
    const std::uint32_t name_id = world.vocab.lookup("object01");
    const std::uint32_t word_id = world.vocab.lookup("trait01a");
    for (std::size_t j = 0; j < dm; ++j) {
        REQUIRE(emb.data[word_id * dm + j] == emb.data[name_id * dm + j]);
    }
}

TEST_CASE("lower sigma gives tighter image clusters") {
    SyntheticWorldConfig tight = small_config(6);
    tight.sigma = 0.05;
    SyntheticWorldConfig loose = small_config(6);
    loose.sigma = 0.8;
    SyntheticWorld wt = cli::make_synthetic_world(tight);
    SyntheticWorld wl = cli::make_synthetic_world(loose);
    auto spread = [](const eval::ImageFeatureSet& set) {
        // mean pairwise cosine within the first class
        double acc = 0.0;
        std::size_t n = 0;
        const std::size_t d = set.dim();
        for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t j = i + 1; j < 4; ++j) {
                acc += num::cosine_similarity({&set.features.data[i * d], d},
                                              {&set.features.data[j * d], d});
                ++n;
            }
        }
        return acc / static_cast<double>(n);
    };
    REQUIRE(spread(wt.images_base) > spread(wl.images_base));
}

TEST_CASE("config json round trip and validation") {
    SyntheticWorldConfig cfg = small_config(11);
    SyntheticWorldConfig back = SyntheticWorldConfig::from_json(cfg.to_json());
    REQUIRE(back.num_classes == cfg.num_classes);
    REQUIRE(back.sigma == cfg.sigma);
    REQUIRE(back.seed == cfg.seed);
    REQUIRE(back.encoder.d_model == cfg.encoder.d_model);

    SyntheticWorldConfig bad = small_config();
    bad.base_count = 4;  // 4 + 3 != 6
    REQUIRE_THROWS_AS(bad.validate(), ValidationError);
    bad = small_config();
    bad.name_correlation = 1.5;
    REQUIRE_THROWS_AS(bad.validate(), ValidationError);
    bad = small_config();
    bad.sigma = -0.1;
    REQUIRE_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("run_synthetic produces a fully populated report") {
    SyntheticWorld world = cli::make_synthetic_world(small_config(12));
    train::TrainConfig tc;
    tc.prompt_length = 2;
    tc.prompt_depth = 1;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seed = 12;
    cli::SyntheticReport report = cli::run_synthetic(world, tc);

    for (double v : {report.base_prompted, report.base_plain, report.base_ensembled,
                     report.novel_prompted, report.novel_plain, report.novel_ensembled}) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }
    REQUIRE(std::isfinite(report.final_loss));
    const nlohmann::json j = report.to_json();
    REQUIRE(j["base"].contains("prompted"));
    REQUIRE(j["novel"].contains("plain-template"));
    REQUIRE(j["harmonic_mean"].contains("prompted"));
    REQUIRE(report.to_text().find("prompted") != std::string::npos);

    // same world + config reproduce the same numbers
    cli::SyntheticReport again = cli::run_synthetic(world, tc);
    REQUIRE(again.base_prompted == report.base_prompted);
    REQUIRE(again.final_loss == report.final_loss);
}

TEST_CASE("zero sigma gives the ensembled head a perfect score") {
    SyntheticWorldConfig cfg = small_config(13);
    cfg.sigma = 0.0;
    SyntheticWorld world = cli::make_synthetic_world(cfg);
    for (data::Split split : {data::Split::base, data::Split::novel}) {
        data::PromptDataset part;
        part.classes = world.dataset.classes_in(split);
        part.pairs = world.dataset.pairs_in(split);
        part.meta = world.dataset.meta;
        const eval::ClassifierHead head =
            eval::build_head_ensemble(part, world.weights, world.vocab, 100.0);
        const eval::ImageFeatureSet& images =
            split == data::Split::base ? world.images_base : world.images_novel;
        REQUIRE(eval::evaluate(images, head, "zero-sigma").top1 == 1.0);
    }
}

TEST_CASE("zero sigma plain-template accuracy matches a nearest-neighbor oracle") {
    SyntheticWorldConfig cfg = small_config(14);
    cfg.sigma = 0.0;
    SyntheticWorld world = cli::make_synthetic_world(cfg);
    const std::vector<data::ClassRecord> base = world.dataset.classes_in(data::Split::base);
    const eval::ClassifierHead head =
        eval::build_head_plain(base, world.weights, world.vocab);

    // template features straight from the frozen encoder
    const std::size_t d = cfg.encoder.projection_dim;
    std::vector<Tensor> temps;
    for (const data::ClassRecord& c : base) {
        temps.push_back(text::encode(
            text::tokenize(data::render_template(eval::kDefaultInputTemplate, c),
                           world.vocab, cfg.encoder.context_length),
            world.weights));
    }

    const eval::ImageFeatureSet& images = world.images_base;
    const eval::Classification got = eval::classify(images, head);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < images.count(); ++i) {
        int best = 0;
        double best_cos = -2.0;
        for (std::size_t c = 0; c < temps.size(); ++c) {
            double dot = 0.0, ni = 0.0, nt = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double a = images.features.data[i * d + j];
                const double b = temps[c].data[j];
                dot += a * b;
                ni += a * a;
                nt += b * b;
            }
            const double cos = dot / std::sqrt(ni * nt);
            if (cos > best_cos) {
                best_cos = cos;
                best = static_cast<int>(c);
            }
        }
        REQUIRE(got.predictions[i] == best);
        correct += best == images.labels[i] ? 1 : 0;
    }
    const eval::EvalReport report = eval::evaluate(images, head, "zero-sigma-plain");
    REQUIRE(report.top1 ==
            static_cast<double>(correct) / static_cast<double>(images.count()));
}

TEST_CASE("training on a description subset") {
    SyntheticWorld world = cli::make_synthetic_world(small_config(15));  // pool of 5
    train::TrainConfig tc;
    tc.prompt_length = 2;
    tc.prompt_depth = 1;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seed = 4;

    // the full pool and an explicit m == pool run are the same run
    const cli::SyntheticReport all = cli::run_synthetic(world, tc, 100.0);
    const cli::SyntheticReport full = cli::run_synthetic(world, tc, 100.0, 5);
    REQUIRE(full.base_prompted == all.base_prompted);
    REQUIRE(full.base_ensembled == all.base_ensembled);
    REQUIRE(full.final_loss == all.final_loss);

    // a strict subset changes the ensembled estimate but scores the same images
    const cli::SyntheticReport sub = cli::run_synthetic(world, tc, 100.0, 2);
    REQUIRE(sub.base_ensembled != all.base_ensembled);

    REQUIRE_THROWS_AS(cli::run_synthetic(world, tc, 100.0, 6), ValidationError);
}
