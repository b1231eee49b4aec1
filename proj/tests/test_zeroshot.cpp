#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"

using namespace protext;
using data::ClassRecord;
using data::Split;
using eval::ClassifierHead;
using eval::HeadProvenance;
using eval::ImageFeatureSet;
using num::Tensor;
using text::EncoderWeights;
using text::Vocabulary;

namespace {

Tensor unit_rows(std::size_t rows, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t = Tensor::gaussian({rows, d}, rng);
    for (std::size_t r = 0; r < rows; ++r) {
        double n2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) n2 += t.at(r, c) * t.at(r, c);
        const double inv = 1.0 / std::sqrt(n2);
        for (std::size_t c = 0; c < d; ++c) t.at(r, c) *= inv;
    }
    return t;
}

ImageFeatureSet random_images(std::size_t n, std::size_t classes, std::size_t d,
                              std::uint64_t seed) {
    ImageFeatureSet set;
    set.features = unit_rows(n, d, seed);
    set.normalized = true;
    Rng rng(seed + 1);
    for (std::size_t i = 0; i < n; ++i) {
        set.labels.push_back(static_cast<int>(rng.below(classes)));
    }
    for (std::size_t c = 0; c < classes; ++c) {
        set.class_names.push_back("class" + std::to_string(c));
    }
    return set;
}

ClassifierHead random_head(std::size_t classes, std::size_t d, std::uint64_t seed,
                           double tau = 100.0) {
    ClassifierHead head;
    head.class_features = unit_rows(classes, d, seed);
    head.tau = tau;
    for (std::size_t c = 0; c < classes; ++c) {
        head.class_names.push_back("class" + std::to_string(c));
    }
    return head;
}

Vocabulary toy_vocab() {
    return text::make_vocabulary({"a", "photo", "of", "dog", "cat", "bird", "fur"});
}

}  // namespace

TEST_CASE("classify matches a brute-force cosine softmax") {
    Rng rng(40);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t C = 2 + rng.below(9);   // <= 10
        const std::size_t N = 1 + rng.below(50);  // <= 50
        const std::size_t d = 3 + rng.below(6);
        const double tau = 0.5 + 20.0 * rng.uniform();
        ImageFeatureSet images = random_images(N, C, d, 100 + trial);
        ClassifierHead head = random_head(C, d, 200 + trial, tau);
        eval::Classification got = eval::classify(images, head);

        for (std::size_t i = 0; i < N; ++i) {
            std::vector<double> logits(C);
            for (std::size_t c = 0; c < C; ++c) {
                double dot = 0.0, ni = 0.0, nc = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double a = images.features.at(i, k);
                    const double b = head.class_features.at(c, k);
                    dot += a * b;
                    ni += a * a;
                    nc += b * b;
                }
                logits[c] = tau * dot / (std::sqrt(ni) * std::sqrt(nc));
            }
            double mx = logits[0];
            std::size_t arg = 0;
            for (std::size_t c = 1; c < C; ++c) {
                if (logits[c] > mx) {
                    mx = logits[c];
                    arg = c;
                }
            }
            double z = 0.0;
            for (double l : logits) z += std::exp(l - mx);
            for (std::size_t c = 0; c < C; ++c) {
                const double p = std::exp(logits[c] - mx) / z;
                REQUIRE(std::fabs(got.probabilities.at(i, c) - p) < 1e-9);
            }
            REQUIRE(got.predictions[i] == static_cast<int>(arg));
        }
    }
}

TEST_CASE("argmax is invariant under the temperature") {
    ImageFeatureSet images = random_images(40, 6, 8, 7);
    eval::Classification a = eval::classify(images, random_head(6, 8, 8, 1.0));
    eval::Classification b = eval::classify(images, random_head(6, 8, 8, 250.0));
    REQUIRE(a.predictions == b.predictions);
    // probabilities sharpen with tau but stay row-stochastic
    for (std::size_t i = 0; i < images.count(); ++i) {
        double sa = 0.0, sb = 0.0;
        for (std::size_t c = 0; c < 6; ++c) {
            sa += a.probabilities.at(i, c);
            sb += b.probabilities.at(i, c);
        }
        REQUIRE(sa == Catch::Approx(1.0).margin(1e-12));
        REQUIRE(sb == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("exact similarity ties resolve to the lowest class index") {
    ImageFeatureSet images;
    images.features = Tensor({1, 2}, {1.0, 0.0});
    images.labels = {0};
    images.class_names = {"x", "y", "z"};
    images.normalized = true;
    ClassifierHead head;
    // classes 1 and 2 are identical rows, both nearer than class 0
    head.class_features = Tensor({3, 2}, {0.0, 1.0, 1.0, 0.0, 1.0, 0.0});
    head.class_names = {"x", "y", "z"};
    eval::Classification got = eval::classify(images, head);
    REQUIRE(got.predictions[0] == 1);
}

TEST_CASE("published-scale arithmetic reproduces the reported summaries") {
    REQUIRE(eval::harmonic_mean(72.95, 76.98) == Catch::Approx(74.91).margin(0.01));
    const std::vector<double> transfer_row = {94.81, 91.01, 66.00, 72.35, 86.66,
                                              24.72, 67.34, 47.93, 51.86, 69.60};
    REQUIRE(eval::aggregate(transfer_row) == Catch::Approx(67.23).margin(0.01));
}

TEST_CASE("harmonic mean and aggregate validate their inputs") {
    REQUIRE_THROWS_AS(eval::harmonic_mean(0.0, 50.0), ValidationError);
    REQUIRE_THROWS_AS(eval::aggregate({}), ValidationError);
    REQUIRE(eval::harmonic_mean(50.0, 50.0) == Catch::Approx(50.0).margin(1e-12));
}

TEST_CASE("confidence summary on hand-built probabilities") {
    eval::EvalReport r;
    Tensor probs({2, 3}, {0.8, 0.1, 0.1, 0.5, 0.3, 0.2});
    eval::confidence_report(probs, {0, 1}, r);
    REQUIRE(r.confidence_correct == Catch::Approx((0.8 + 0.3) / 2).margin(1e-12));
    REQUIRE(r.confidence_incorrect ==
            Catch::Approx((0.2 / 2 + 0.7 / 2) / 2).margin(1e-12));
}

TEST_CASE("evaluate fills per-class accuracy and tags") {
    ImageFeatureSet images;
    images.features = Tensor({4, 2}, {1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0});
    images.labels = {0, 1, 1, 1};
    images.class_names = {"right", "up"};
    images.normalized = true;
    ClassifierHead head;
    head.class_features = Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
    head.class_names = {"right", "up"};
    head.provenance = HeadProvenance::ensembled;
    eval::EvalReport r = eval::evaluate(images, head, "toy");
    REQUIRE(r.top1 == Catch::Approx(0.75).margin(1e-12));
    REQUIRE(r.per_class_accuracy[0] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(r.per_class_accuracy[1] == Catch::Approx(2.0 / 3.0).margin(1e-12));
    REQUIRE(r.sample_count == 4);
    REQUIRE(r.head_provenance == "ensembled");
    REQUIRE(r.dataset_tag == "toy");
    REQUIRE(r.to_json()["top1"] == r.top1);
    REQUIRE(r.to_text({"right", "up"}).find("right") != std::string::npos);
}

TEST_CASE("head builders produce unit rows and the right provenance") {
    Vocabulary v = toy_vocab();
    Rng rng(21);
    EncoderWeights w =
        text::generate_encoder_weights(testutil::toy_encoder_config(), v.size(), rng);
    std::vector<ClassRecord> classes = {{0, "dog", "", Split::base},
                                        {1, "cat", "", Split::base}};
    ClassifierHead plain = eval::build_head_plain(classes, w, v);
    REQUIRE(plain.provenance == HeadProvenance::plain_template);
    REQUIRE(plain.class_count() == 2);
    plain.validate();

    data::PromptDataset ds;
    ds.classes = classes;
    ds.meta.generator = "fixture:test";
    ds.pairs = {{0, "a photo of a dog", "a dog of fur", data::PairSource::fixture},
                {0, "a photo of a dog", "a dog photo", data::PairSource::fixture},
                {1, "a photo of a cat", "a cat of fur", data::PairSource::fixture}};
    ClassifierHead ens = eval::build_head_ensemble(ds, w, v);
    REQUIRE(ens.provenance == HeadProvenance::ensembled);
    ens.validate();

    train::TrainConfig cfg;
    cfg.prompt_length = 2;
    cfg.epochs = 1;
    cfg.batch_size = 3;
    cfg.seed = 2;
    train::TrainResult r = train::train(ds, w, v, cfg);
    ClassifierHead prompted = eval::build_head(classes, r.checkpoint, w, v);
    REQUIRE(prompted.provenance == HeadProvenance::prompted);
    prompted.validate();

    // same class list, three different heads
    REQUIRE_FALSE(prompted.class_features.bitwise_equal(plain.class_features));
    REQUIRE_FALSE(ens.class_features.bitwise_equal(plain.class_features));
}

TEST_CASE("head construction identities") {
    Vocabulary v = toy_vocab();
    Rng rng(24);
    EncoderWeights w =
        text::generate_encoder_weights(testutil::toy_encoder_config(), v.size(), rng);
    std::vector<ClassRecord> classes = {{0, "dog", "", Split::base},
                                        {1, "cat", "", Split::base},
                                        {2, "bird", "", Split::base}};

    // a T=0 checkpoint builds the plain-template head, bit for bit
    train::PromptCheckpoint zero;
    zero.prompts.T = 0;
    zero.prompts.J = 1;
    zero.prompts.layers = {Tensor::zeros({0, w.config.d_model})};
    zero.encoder_fingerprint = w.fingerprint();
    const ClassifierHead from_zero = eval::build_head(classes, zero, w, v);
    const ClassifierHead plain = eval::build_head_plain(classes, w, v);
    REQUIRE(from_zero.class_features.bitwise_equal(plain.class_features));

    data::PromptDataset ds;
    ds.classes = classes;
    ds.meta.generator = "fixture:test";
    ds.pairs = {{0, "a photo of a dog", "a dog of fur", data::PairSource::fixture},
                {1, "a photo of a cat", "a cat of fur", data::PairSource::fixture},
                {2, "a photo of a bird", "a bird of fur", data::PairSource::fixture}};
    train::TrainConfig cfg;
    cfg.prompt_length = 2;
    cfg.epochs = 1;
    cfg.batch_size = 3;
    cfg.seed = 5;
    const train::TrainResult r = train::train(ds, w, v, cfg);

    // building twice is bitwise deterministic
    const ClassifierHead once = eval::build_head(classes, r.checkpoint, w, v);
    const ClassifierHead twice = eval::build_head(classes, r.checkpoint, w, v);
    REQUIRE(once.class_features.bitwise_equal(twice.class_features));

    // every row is the per-class encode_prompted feature
    const std::size_t d = w.config.projection_dim;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        const text::TokenSequence seq =
            text::tokenize(data::render_template(eval::kDefaultInputTemplate, classes[c]),
                           v, w.config.context_length);
        const Tensor f = text::encode_prompted(seq, r.checkpoint.prompts, w);
        for (std::size_t j = 0; j < d; ++j) {
            REQUIRE(once.class_features.at(c, j) == f.data[j]);
        }
    }
}

TEST_CASE("ensemble head arithmetic identities") {
    Vocabulary v = toy_vocab();
    Rng rng(25);
    EncoderWeights w =
        text::generate_encoder_weights(testutil::toy_encoder_config(), v.size(), rng);
    std::vector<ClassRecord> classes = {{0, "dog", "", Split::base},
                                        {1, "cat", "", Split::base}};
    data::PromptDataset single;
    single.classes = classes;
    single.meta.generator = "fixture:test";
    single.pairs = {{0, "a photo of a dog", "a dog of fur", data::PairSource::fixture},
                    {1, "a photo of a cat", "a cat of fur", data::PairSource::fixture}};

    // one description per class: the head is that description's frozen feature
    const ClassifierHead one = eval::build_head_ensemble(single, w, v);
    const std::size_t d = w.config.projection_dim;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        const Tensor f = text::encode(
            text::tokenize(single.pairs[c].output_text, v, w.config.context_length), w);
        for (std::size_t j = 0; j < d; ++j) {
            REQUIRE(one.class_features.at(c, j) == Catch::Approx(f.data[j]).margin(1e-12));
        }
    }

    // duplicating a description does not move the mean
    data::PromptDataset doubled = single;
    doubled.pairs.push_back(single.pairs[0]);
    doubled.pairs.push_back(single.pairs[1]);
    const ClassifierHead two = eval::build_head_ensemble(doubled, w, v);
    REQUIRE(two.class_features.bitwise_equal(one.class_features));
}

TEST_CASE("classify at special geometries") {
    ImageFeatureSet images;
    images.features = Tensor({2, 4}, {0.0, 0.0, 0.0, 1.0,    // orthogonal to every class
                                      0.0, 1.0, 0.0, 0.0});  // exactly class 1
    images.labels = {0, 1};
    images.class_names = {"x", "y", "z"};
    images.normalized = true;
    ClassifierHead head;
    head.class_features = Tensor({3, 4}, {1.0, 0.0, 0.0, 0.0,
                                          0.0, 1.0, 0.0, 0.0,
                                          0.0, 0.0, 1.0, 0.0});
    head.class_names = {"x", "y", "z"};
    head.tau = 100.0;
    const eval::Classification got = eval::classify(images, head);

    // equidistant image: uniform probabilities, tie broken to class 0
    for (std::size_t c = 0; c < 3; ++c) {
        REQUIRE(got.probabilities.at(0, c) == Catch::Approx(1.0 / 3.0).margin(1e-12));
    }
    REQUIRE(got.predictions[0] == 0);

    // image on class 1 with orthogonal alternatives: confident and correct
    REQUIRE(got.predictions[1] == 1);
    REQUIRE(got.probabilities.at(1, 1) > 0.99);
}

TEST_CASE("permuting class order permutes probability columns") {
    ImageFeatureSet images = random_images(12, 5, 6, 91);
    ClassifierHead head = random_head(5, 6, 92);
    const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
    ClassifierHead shuffled;
    shuffled.tau = head.tau;
    shuffled.class_features = Tensor::zeros({5, 6});
    for (std::size_t c = 0; c < 5; ++c) {
        for (std::size_t j = 0; j < 6; ++j) {
            shuffled.class_features.at(c, j) = head.class_features.at(perm[c], j);
        }
        shuffled.class_names.push_back(head.class_names[perm[c]]);
    }
    const eval::Classification a = eval::classify(images, head);
    const eval::Classification b = eval::classify(images, shuffled);
    for (std::size_t i = 0; i < images.count(); ++i) {
        for (std::size_t c = 0; c < 5; ++c) {
            REQUIRE(b.probabilities.at(i, c) ==
                    Catch::Approx(a.probabilities.at(i, perm[c])).margin(1e-12));
        }
        REQUIRE(static_cast<std::size_t>(a.predictions[i]) ==
                perm[static_cast<std::size_t>(b.predictions[i])]);
    }
}

TEST_CASE("a checkpoint from different encoder weights is rejected") {
    Vocabulary v = toy_vocab();
    Rng rng1(22), rng2(23);
    EncoderWeights w1 =
        text::generate_encoder_weights(testutil::toy_encoder_config(), v.size(), rng1);
    EncoderWeights w2 =
        text::generate_encoder_weights(testutil::toy_encoder_config(), v.size(), rng2);
    data::PromptDataset ds;
    ds.classes = {{0, "dog", "", Split::all}, {1, "cat", "", Split::all}};
    ds.meta.generator = "fixture:test";
    ds.pairs = {{0, "a photo of a dog", "a dog", data::PairSource::fixture},
                {1, "a photo of a cat", "a cat", data::PairSource::fixture}};
    train::TrainConfig cfg;
    cfg.prompt_length = 2;
    cfg.epochs = 1;
    cfg.batch_size = 2;
    train::TrainResult r = train::train(ds, w1, v, cfg);
    REQUIRE_THROWS_AS(eval::build_head(ds.classes, r.checkpoint, w2, v), ValidationError);
}

TEST_CASE("synthetic image features are labeled, unit, and seeded") {
    Tensor class_features = unit_rows(3, 6, 30);
    std::vector<std::string> names = {"a", "b", "c"};
    Rng r1(31), r2(31), r3(32);
    ImageFeatureSet s1 = eval::make_image_features(class_features, names, 5, 0.2, r1);
    ImageFeatureSet s2 = eval::make_image_features(class_features, names, 5, 0.2, r2);
    ImageFeatureSet s3 = eval::make_image_features(class_features, names, 5, 0.2, r3);
    REQUIRE(s1.count() == 15);
    REQUIRE(s1.labels[0] == 0);
    REQUIRE(s1.labels[14] == 2);
    REQUIRE(s1.features.bitwise_equal(s2.features));
    REQUIRE_FALSE(s1.features.bitwise_equal(s3.features));
    s1.validate();
    // zero sigma reproduces the class features exactly (already unit)
    Rng r4(33);
    ImageFeatureSet s4 = eval::make_image_features(class_features, names, 1, 0.0, r4);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t k = 0; k < 6; ++k) {
            REQUIRE(s4.features.at(c, k) == Catch::Approx(class_features.at(c, k)).margin(1e-12));
        }
    }
}

TEST_CASE("image feature files round trip in both formats") {
    const auto dir = testutil::temp_dir("imgfeat");
    Tensor class_features = unit_rows(2, 4, 34);
    Rng rng(35);
    ImageFeatureSet set =
        eval::make_image_features(class_features, {"a", "b"}, 3, 0.1, rng);

    eval::save_image_features(set, dir / "feat.json");
    ImageFeatureSet m = eval::load_image_features(dir / "feat.json");
    REQUIRE(m.features.bitwise_equal(set.features));
    REQUIRE(m.labels == set.labels);
    REQUIRE(m.class_names == set.class_names);
    REQUIRE(m.normalized == set.normalized);

    eval::save_image_features_jsonl(set, dir / "feat.jsonl");
    ImageFeatureSet j = eval::load_image_features(dir / "feat.jsonl");
    REQUIRE(j.labels == set.labels);
    REQUIRE(j.class_names == set.class_names);
    for (std::size_t i = 0; i < set.features.size(); ++i) {
        REQUIRE(j.features.data[i] == Catch::Approx(set.features.data[i]).margin(1e-12));
    }
}

TEST_CASE("image feature validation failures") {
    ImageFeatureSet set;
    set.features = Tensor({2, 3}, {1, 0, 0, 0, 1, 0});
    set.class_names = {"only"};
    set.labels = {0, 1};  // label 1 out of range
    REQUIRE_THROWS_AS(set.validate(), ValidationError);
    set.class_names = {"a", "b"};
    set.normalized = true;
    set.features.data[0] = 2.0;  // no longer unit
    REQUIRE_THROWS_AS(set.validate(), ValidationError);

    ClassifierHead head;
    head.class_features = Tensor({1, 3}, {1, 0, 0});
    head.class_names = {"solo"};
    REQUIRE_THROWS_AS(head.validate(), ValidationError);
}

TEST_CASE("dimension mismatch between images and head is rejected") {
    ImageFeatureSet images = random_images(4, 2, 5, 36);
    ClassifierHead head = random_head(2, 7, 37);
    REQUIRE_THROWS_AS(eval::classify(images, head), ValidationError);
}
