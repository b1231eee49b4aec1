#pragma once

// Seeded desk-scale world for end-to-end experiments. A toy encoder is
// generated, per-class description strings are synthesized from
// class-distinctive words, and image features are noisy copies of the frozen
// ensembled description features. The distinctive-word token embeddings are
// correlated with their class-name embedding (rho * name + sqrt(1-rho^2) *
// noise), so the description centroid of a class is a smooth function of its
// name embedding: prompts trained on base classes have structure to transfer
// to novel class names.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "protext/common.hpp"
#include "protext/dataset.hpp"
#include "protext/encoder.hpp"
#include "protext/tokenizer.hpp"
#include "protext/trainer.hpp"
#include "protext/zeroshot.hpp"

namespace protext::cli {

struct SyntheticWorldConfig {
    std::size_t num_classes = 20;
    std::size_t base_count = 10;
    std::size_t novel_count = 10;
    std::size_t descriptions_per_class = 20;
    double sigma = 0.3;
    std::uint64_t seed = 17;
    std::size_t images_per_class = 50;
    double name_correlation = 0.9;
    std::size_t words_per_class = 10;
    text::EncoderConfig encoder{2, 32, 4, 4.0, 32, 16, num::GeluKind::tanh_approx};

    void validate() const {
        if (num_classes < 2) {
            throw ValidationError("synthetic world needs at least 2 classes");
        }
        if (base_count + novel_count != num_classes) {
            throw ValidationError("base + novel split must sum to num_classes");
        }
        if (sigma < 0.0) {
            throw ValidationError("sigma must be >= 0");
        }
        if (descriptions_per_class < 1 || images_per_class < 1 || words_per_class < 1) {
            throw ValidationError("descriptions, images, and words per class must be >= 1");
        }
        if (name_correlation < 0.0 || name_correlation > 1.0) {
            throw ValidationError("name_correlation must lie in [0, 1]");
        }
        encoder.validate();
    }

    nlohmann::json to_json() const {
        return {{"num_classes", num_classes},
                {"base_count", base_count},
                {"novel_count", novel_count},
                {"descriptions_per_class", descriptions_per_class},
                {"sigma", sigma},
                {"seed", seed},
                {"images_per_class", images_per_class},
                {"name_correlation", name_correlation},
                {"words_per_class", words_per_class},
                {"encoder", encoder.to_json()}};
    }

    static SyntheticWorldConfig from_json(const nlohmann::json& j) {
        SyntheticWorldConfig c;
        c.num_classes = j.value("num_classes", c.num_classes);
        c.base_count = j.value("base_count", c.base_count);
        c.novel_count = j.value("novel_count", c.novel_count);
        c.descriptions_per_class =
            j.value("descriptions_per_class", c.descriptions_per_class);
        c.sigma = j.value("sigma", c.sigma);
        c.seed = j.value("seed", c.seed);
        c.images_per_class = j.value("images_per_class", c.images_per_class);
        c.name_correlation = j.value("name_correlation", c.name_correlation);
        c.words_per_class = j.value("words_per_class", c.words_per_class);
        if (j.contains("encoder")) {
            c.encoder = text::EncoderConfig::from_json(j.at("encoder"));
        }
        c.validate();
        return c;
    }
};

struct SyntheticWorld {
    SyntheticWorldConfig config;
    text::Vocabulary vocab;
    text::EncoderWeights weights;
    data::PromptDataset dataset;        // all classes, split-tagged
    eval::ImageFeatureSet images_base;  // labels index base-class order
    eval::ImageFeatureSet images_novel; // labels index novel-class order
};

namespace detail {

inline const std::vector<std::string>& filler_words() {
    static const std::vector<std::string> words = {
        "the",  "this", "it",   "has",  "with", "and",  "is",   "often",
        "seen", "look", "like", "very", "its",  "that", "kind", "usually"};
    return words;
}

// Description sentence shapes. Most avoid the class name on purpose: the gap
// between the template feature and the description centroid is exactly what
// prompt training has to learn.
inline std::string make_description(const std::string& name,
                                    const std::vector<std::string>& words, Rng& rng) {
    auto w = [&]() { return words[rng.below(words.size())]; };
    switch (rng.below(5)) {
        case 0: return "it has " + w() + " and " + w();
        case 1: return "this kind usually has " + w() + " with " + w();
        case 2: return "it is often seen with " + w() + " and " + w() + " and " + w();
        case 3: return "the " + name + " has " + w() + " and " + w();
        default: return "look for " + w() + " with " + w();
    }
}

}  // namespace detail

inline SyntheticWorld make_synthetic_world(const SyntheticWorldConfig& config) {
    config.validate();
    Rng rng(config.seed);

    std::vector<std::string> class_names;
    std::vector<std::vector<std::string>> class_words(config.num_classes);
    std::vector<std::string> vocab_words = detail::filler_words();
    vocab_words.insert(vocab_words.begin(), {"a", "photo", "of", "for"});
    for (std::size_t c = 0; c < config.num_classes; ++c) {
        char name[32];
        std::snprintf(name, sizeof(name), "object%02zu", c);
        class_names.emplace_back(name);
        vocab_words.emplace_back(name);
        for (std::size_t k = 0; k < config.words_per_class; ++k) {
            // The suffix must survive the tokenizer, so spell the index with
            // letters instead of punctuation or digits.
            std::string word = "trait" + std::string(name).substr(6);
            for (char digit : std::to_string(k)) {
                word.push_back(static_cast<char>('a' + (digit - '0')));
            }
            class_words[c].emplace_back(word);
            vocab_words.emplace_back(word);
        }
    }

    SyntheticWorld world;
    world.config = config;
    world.vocab = text::make_vocabulary(vocab_words);
    world.weights = generate_encoder_weights(config.encoder, world.vocab.size(), rng);

    // Rewrite the class-name and distinctive-word embeddings. Stock gaussian
    // rows are too small for a couple of class tokens to survive the shared
    // sentence structure, so names get unit-norm directions and each trait
    // word sits at cosine name_correlation from its class name.
    {
        num::Tensor emb = world.weights.t("token_embedding");
        const std::size_t dm = config.encoder.d_model;
        const double rho = config.name_correlation;
        const double mix = std::sqrt(1.0 - rho * rho);
        auto draw_unit = [&]() {
            std::vector<double> v(dm);
            double norm = 0.0;
            while (norm < 1e-9) {
                norm = 0.0;
                for (double& x : v) {
                    x = rng.gaussian();
                    norm += x * x;
                }
                norm = std::sqrt(norm);
            }
            for (double& x : v) x /= norm;
            return v;
        };
        for (std::size_t c = 0; c < config.num_classes; ++c) {
            const std::uint32_t name_id = world.vocab.lookup(class_names[c]);
            const std::vector<double> u = draw_unit();
            for (std::size_t j = 0; j < dm; ++j) {
                emb.data[name_id * dm + j] = u[j];
            }
            for (const std::string& word : class_words[c]) {
                const std::uint32_t word_id = world.vocab.lookup(word);
                std::vector<double> v = draw_unit();
                double residual = 0.0;
                while (residual < 1e-6) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < dm; ++j) dot += v[j] * u[j];
                    residual = 0.0;
                    for (std::size_t j = 0; j < dm; ++j) {
                        v[j] -= dot * u[j];
                        residual += v[j] * v[j];
                    }
                    residual = std::sqrt(residual);
                    if (residual < 1e-6) v = draw_unit();
                }
                for (std::size_t j = 0; j < dm; ++j) {
                    emb.data[word_id * dm + j] = rho * u[j] + mix * v[j] / residual;
                }
            }
        }
        world.weights.store.put("token_embedding", std::move(emb));
    }

    // Classes, descriptions, dataset.
    std::vector<data::ClassRecord> classes;
    for (std::size_t c = 0; c < config.num_classes; ++c) {
        data::ClassRecord rec;
        rec.class_id = static_cast<int>(c);
        rec.name = class_names[c];
        rec.split = c < config.base_count ? data::Split::base : data::Split::novel;
        classes.push_back(std::move(rec));
    }
    std::vector<data::RawOutputs> outputs;
    for (std::size_t c = 0; c < config.num_classes; ++c) {
        data::RawOutputs raw;
        raw.class_id = static_cast<int>(c);
        for (std::size_t m = 0; m < config.descriptions_per_class; ++m) {
            raw.texts.push_back(
                detail::make_description(class_names[c], class_words[c], rng));
        }
        outputs.push_back(std::move(raw));
    }
    data::DatasetMeta meta;
    meta.generator = "synthetic";
    meta.outputs_per_query = config.descriptions_per_class;
    meta.query_count = 1;
    world.dataset = data::assemble_dataset(classes, eval::kDefaultInputTemplate, outputs,
                                           data::PairSource::fixture, meta);

    // Image features: noisy copies of the frozen ensembled description
    // features, one per-split set with labels in split order.
    const std::map<int, num::Tensor> targets =
        train::ensemble_targets(world.dataset, world.weights, world.vocab);
    auto build_images = [&](data::Split split) {
        const std::vector<data::ClassRecord> split_classes = world.dataset.classes_in(split);
        const std::size_t d = config.encoder.projection_dim;
        num::Tensor class_features = num::Tensor::zeros({split_classes.size(), d});
        std::vector<std::string> names;
        for (std::size_t i = 0; i < split_classes.size(); ++i) {
            const num::Tensor& f = targets.at(split_classes[i].class_id);
            std::copy(f.data.begin(), f.data.end(), &class_features.data[i * d]);
            names.push_back(split_classes[i].name);
        }
        return eval::make_image_features(class_features, names, config.images_per_class,
                                         config.sigma, rng);
    };
    world.images_base = build_images(data::Split::base);
    world.images_novel = build_images(data::Split::novel);
    return world;
}

struct SyntheticReport {
    double base_prompted = 0.0;
    double base_plain = 0.0;
    double base_ensembled = 0.0;
    double novel_prompted = 0.0;
    double novel_plain = 0.0;
    double novel_ensembled = 0.0;
    double hm_prompted = 0.0;
    double hm_plain = 0.0;
    double final_loss = 0.0;

    nlohmann::json to_json() const {
        return {{"base", {{"prompted", base_prompted},
                          {"plain-template", base_plain},
                          {"ensembled", base_ensembled}}},
                {"novel", {{"prompted", novel_prompted},
                           {"plain-template", novel_plain},
                           {"ensembled", novel_ensembled}}},
                {"harmonic_mean", {{"prompted", hm_prompted}, {"plain-template", hm_plain}}},
                {"final_loss", final_loss}};
    }

    std::string to_text() const {
        char buf[128];
        std::string s = "head              base    novel\n";
        std::snprintf(buf, sizeof(buf), "prompted        %6.4f   %6.4f\n", base_prompted,
                      novel_prompted);
        s += buf;
        std::snprintf(buf, sizeof(buf), "plain-template  %6.4f   %6.4f\n", base_plain,
                      novel_plain);
        s += buf;
        std::snprintf(buf, sizeof(buf), "ensembled       %6.4f   %6.4f\n", base_ensembled,
                      novel_ensembled);
        s += buf;
        std::snprintf(buf, sizeof(buf), "HM prompted %.4f  HM plain-template %.4f\n",
                      hm_prompted, hm_plain);
        s += buf;
        return s;
    }
};

// Trains prompts on base-class text only, then scores every head on both
// splits (prompt transfer to novel classes mirrors the base-to-novel
// protocol). train_descriptions > 0 restricts training and the ensembled
// baselines to the first m descriptions of each class while the image
// features stay tied to the full pool, so sweeping it measures how well m
// samples estimate the fixed concept.
inline SyntheticReport run_synthetic(const SyntheticWorld& world,
                                     const train::TrainConfig& train_config,
                                     double tau = 100.0,
                                     std::size_t train_descriptions = 0) {
    if (train_descriptions > world.config.descriptions_per_class) {
        throw ValidationError("cannot train on more descriptions than the world holds");
    }
    auto take_pairs = [&](data::Split split) {
        std::vector<data::PromptPair> pairs = world.dataset.pairs_in(split);
        if (train_descriptions == 0) {
            return pairs;
        }
        std::map<int, std::size_t> taken;
        std::vector<data::PromptPair> kept;
        for (data::PromptPair& p : pairs) {
            if (taken[p.class_id]++ < train_descriptions) {
                kept.push_back(std::move(p));
            }
        }
        return kept;
    };
    data::PromptDataset base_data;
    base_data.classes = world.dataset.classes_in(data::Split::base);
    base_data.pairs = take_pairs(data::Split::base);
    base_data.meta = world.dataset.meta;
    if (train_descriptions > 0) {
        base_data.meta.outputs_per_query = train_descriptions;
    }

    const train::TrainResult trained =
        train::train(base_data, world.weights, world.vocab, train_config);

    const std::vector<data::ClassRecord> base_classes =
        world.dataset.classes_in(data::Split::base);
    const std::vector<data::ClassRecord> novel_classes =
        world.dataset.classes_in(data::Split::novel);
    data::PromptDataset novel_data;
    novel_data.classes = novel_classes;
    novel_data.pairs = take_pairs(data::Split::novel);
    novel_data.meta = world.dataset.meta;
    if (train_descriptions > 0) {
        novel_data.meta.outputs_per_query = train_descriptions;
    }

    SyntheticReport report;
    report.final_loss = trained.checkpoint.final_loss;
    auto top1 = [&](const eval::ClassifierHead& head, const eval::ImageFeatureSet& images) {
        return eval::evaluate(images, head, "synthetic").top1;
    };
    report.base_prompted =
        top1(eval::build_head(base_classes, trained.checkpoint, world.weights, world.vocab,
                              eval::kDefaultInputTemplate, tau),
             world.images_base);
    report.novel_prompted =
        top1(eval::build_head(novel_classes, trained.checkpoint, world.weights, world.vocab,
                              eval::kDefaultInputTemplate, tau),
             world.images_novel);
    report.base_plain =
        top1(eval::build_head_plain(base_classes, world.weights, world.vocab,
                                    eval::kDefaultInputTemplate, tau),
             world.images_base);
    report.novel_plain =
        top1(eval::build_head_plain(novel_classes, world.weights, world.vocab,
                                    eval::kDefaultInputTemplate, tau),
             world.images_novel);
    report.base_ensembled =
        top1(eval::build_head_ensemble(base_data, world.weights, world.vocab, tau),
             world.images_base);
    report.novel_ensembled =
        top1(eval::build_head_ensemble(novel_data, world.weights, world.vocab, tau),
             world.images_novel);
    if (report.base_prompted > 0.0 && report.novel_prompted > 0.0) {
        report.hm_prompted = eval::harmonic_mean(report.base_prompted, report.novel_prompted);
    }
    if (report.base_plain > 0.0 && report.novel_plain > 0.0) {
        report.hm_plain = eval::harmonic_mean(report.base_plain, report.novel_plain);
    }
    return report;
}

}  // namespace protext::cli
