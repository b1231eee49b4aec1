#pragma once

// Zero-shot classification over precomputed image features: build a
// classifier head from prompted features, ensembled description features, or
// plain templates; classify by softmax over temperature-scaled cosine
// similarities; report the paper-style metrics (top-1, base/novel harmonic
// mean, cross-dataset aggregate, confidence split).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "protext/common.hpp"
#include "protext/dataset.hpp"
#include "protext/encoder.hpp"
#include "protext/tensor.hpp"
#include "protext/tensor_store.hpp"
#include "protext/tokenizer.hpp"
#include "protext/trainer.hpp"

namespace protext::eval {

struct ImageFeatureSet {
    num::Tensor features;  // [N, d]
    std::vector<int> labels;
    std::vector<std::string> class_names;
    bool normalized = false;

    std::size_t count() const { return features.rows(); }
    std::size_t dim() const { return features.cols(); }

    void validate() const {
        if (features.rank() != 2 || labels.size() != features.rows()) {
            throw ValidationError("image feature set shape/label mismatch");
        }
        for (int l : labels) {
            if (l < 0 || static_cast<std::size_t>(l) >= class_names.size()) {
                throw ValidationError("image label out of range: " + std::to_string(l));
            }
        }
        if (normalized) {
            for (std::size_t i = 0; i < features.rows(); ++i) {
                const double norm =
                    num::l2_norm({&features.data[i * features.cols()], features.cols()});
                if (std::fabs(norm - 1.0) > 1e-9) {
                    throw ValidationError("feature row " + std::to_string(i) +
                                          " not unit-norm but normalized flag set");
                }
            }
        }
    }
};

enum class HeadProvenance { prompted, ensembled, plain_template };

inline std::string provenance_name(HeadProvenance p) {
    switch (p) {
        case HeadProvenance::prompted: return "prompted";
        case HeadProvenance::ensembled: return "ensembled";
        case HeadProvenance::plain_template: return "plain-template";
    }
    return "?";
}

struct ClassifierHead {
    num::Tensor class_features;  // [C, d], unit rows
    std::vector<std::string> class_names;
    HeadProvenance provenance = HeadProvenance::plain_template;
    double tau = 100.0;

    std::size_t class_count() const { return class_features.rows(); }

    void validate() const {
        if (class_features.rank() != 2 || class_features.rows() < 2) {
            throw ValidationError("classifier head needs at least 2 classes");
        }
        if (class_names.size() != class_features.rows()) {
            throw ValidationError("head class name count mismatch");
        }
        for (std::size_t i = 0; i < class_features.rows(); ++i) {
            const double norm = num::l2_norm(
                {&class_features.data[i * class_features.cols()], class_features.cols()});
            if (std::fabs(norm - 1.0) > 1e-9) {
                throw ValidationError("head row " + std::to_string(i) + " not unit-norm");
            }
        }
    }
};

inline constexpr const char* kDefaultInputTemplate = "a photo of a {CLS}";

// Head from learned prompts: each class name rides the input template
// through the prompted encoder.
inline ClassifierHead build_head(const std::vector<data::ClassRecord>& classes,
                                 const train::PromptCheckpoint& checkpoint,
                                 const text::EncoderWeights& weights,
                                 const text::Vocabulary& vocab,
                                 const std::string& input_template = kDefaultInputTemplate,
                                 double tau = 100.0) {
    if (checkpoint.encoder_fingerprint != weights.fingerprint()) {
        throw ValidationError("checkpoint encoder fingerprint " +
                              checkpoint.encoder_fingerprint +
                              " does not match loaded weights " + weights.fingerprint());
    }
    checkpoint.prompts.validate(weights.config);
    ClassifierHead head;
    head.provenance = HeadProvenance::prompted;
    head.tau = tau;
    const std::size_t d = weights.config.projection_dim;
    head.class_features = num::Tensor::zeros({classes.size(), d});
    for (std::size_t c = 0; c < classes.size(); ++c) {
        const std::string text = data::render_template(input_template, classes[c]);
        const text::TokenSequence seq =
            text::tokenize(text, vocab, weights.config.context_length);
        const num::Tensor f = text::encode_prompted(seq, checkpoint.prompts, weights);
        std::copy(f.data.begin(), f.data.end(), &head.class_features.data[c * d]);
        head.class_names.push_back(classes[c].name);
    }
    head.validate();
    return head;
}

// Training-free head from the frozen encoder and the bare template.
inline ClassifierHead build_head_plain(const std::vector<data::ClassRecord>& classes,
                                       const text::EncoderWeights& weights,
                                       const text::Vocabulary& vocab,
                                       const std::string& input_template = kDefaultInputTemplate,
                                       double tau = 100.0) {
    ClassifierHead head;
    head.provenance = HeadProvenance::plain_template;
    head.tau = tau;
    const std::size_t d = weights.config.projection_dim;
    head.class_features = num::Tensor::zeros({classes.size(), d});
    for (std::size_t c = 0; c < classes.size(); ++c) {
        const std::string text = data::render_template(input_template, classes[c]);
        const text::TokenSequence seq =
            text::tokenize(text, vocab, weights.config.context_length);
        const num::Tensor f = text::encode(seq, weights);
        std::copy(f.data.begin(), f.data.end(), &head.class_features.data[c * d]);
        head.class_names.push_back(classes[c].name);
    }
    head.validate();
    return head;
}

// Training-free head averaging the frozen features of each class's
// descriptions: normalize each, mean, re-normalize.
inline ClassifierHead build_head_ensemble(const data::PromptDataset& dataset,
                                          const text::EncoderWeights& weights,
                                          const text::Vocabulary& vocab, double tau = 100.0) {
    const std::map<int, num::Tensor> targets =
        train::ensemble_targets(dataset, weights, vocab);
    ClassifierHead head;
    head.provenance = HeadProvenance::ensembled;
    head.tau = tau;
    const std::size_t d = weights.config.projection_dim;
    head.class_features = num::Tensor::zeros({dataset.classes.size(), d});
    for (std::size_t c = 0; c < dataset.classes.size(); ++c) {
        const num::Tensor& f = targets.at(dataset.classes[c].class_id);
        std::copy(f.data.begin(), f.data.end(), &head.class_features.data[c * d]);
        head.class_names.push_back(dataset.classes[c].name);
    }
    head.validate();
    return head;
}

struct Classification {
    num::Tensor probabilities;  // [N, C], rows sum to 1
    std::vector<int> predictions;
};

// softmax_i over tau * cos(image, class_i); argmax ties break to the lowest
// class index.
inline Classification classify(const ImageFeatureSet& images, const ClassifierHead& head) {
    images.validate();
    head.validate();
    if (images.dim() != head.class_features.cols()) {
        throw ValidationError("image dim " + std::to_string(images.dim()) +
                              " != head dim " + std::to_string(head.class_features.cols()));
    }
    const std::size_t N = images.count();
    const std::size_t C = head.class_count();
    const std::size_t d = images.dim();
    Classification out;
    out.probabilities = num::Tensor::zeros({N, C});
    out.predictions.resize(N);
    for (std::size_t i = 0; i < N; ++i) {
        std::span<const double> img{&images.features.data[i * d], d};
        double* row = &out.probabilities.data[i * C];
        for (std::size_t c = 0; c < C; ++c) {
            row[c] = head.tau * num::cosine_similarity(
                                    img, {&head.class_features.data[c * d], d});
        }
        double mx = row[0];
        std::size_t arg = 0;
        for (std::size_t c = 1; c < C; ++c) {
            if (row[c] > mx) {
                mx = row[c];
                arg = c;
            }
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (std::size_t c = 0; c < C; ++c) {
            row[c] /= sum;
        }
        out.predictions[i] = static_cast<int>(arg);
    }
    num::require_finite(out.probabilities, "classify probabilities");
    return out;
}

inline double top1_accuracy(const std::vector<int>& predictions,
                            const std::vector<int>& labels) {
    if (predictions.empty() || predictions.size() != labels.size()) {
        throw ValidationError("top1_accuracy: empty or mismatched inputs");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        hits += predictions[i] == labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

inline double harmonic_mean(double base, double novel) {
    if (base <= 0.0 || novel <= 0.0) {
        throw ValidationError("harmonic_mean requires positive accuracies");
    }
    return 2.0 * base * novel / (base + novel);
}

inline double aggregate(const std::vector<double>& accuracies) {
    if (accuracies.empty()) {
        throw ValidationError("aggregate of empty accuracy list");
    }
    double s = 0.0;
    for (double a : accuracies) {
        s += a;
    }
    return s / static_cast<double>(accuracies.size());
}

struct EvalReport {
    double top1 = 0.0;
    std::vector<double> per_class_accuracy;
    double confidence_correct = 0.0;    // mean probability on the true class
    double confidence_incorrect = 0.0;  // mean probability per incorrect class
    std::string dataset_tag;
    std::string head_provenance;
    std::size_t sample_count = 0;

    nlohmann::json to_json() const {
        return {{"dataset", dataset_tag},
                {"head", head_provenance},
                {"samples", sample_count},
                {"top1", top1},
                {"per_class_accuracy", per_class_accuracy},
                {"confidence_correct", confidence_correct},
                {"confidence_incorrect", confidence_incorrect}};
    }

    std::string to_text(const std::vector<std::string>& class_names = {}) const {
        char buf[160];
        std::string s;
        std::snprintf(buf, sizeof(buf), "dataset: %s  head: %s  samples: %zu\n",
                      dataset_tag.c_str(), head_provenance.c_str(), sample_count);
        s += buf;
        std::snprintf(buf, sizeof(buf), "top-1 accuracy        %8.4f\n", top1);
        s += buf;
        std::snprintf(buf, sizeof(buf), "confidence (correct)  %8.4f\n", confidence_correct);
        s += buf;
        std::snprintf(buf, sizeof(buf), "confidence (incorrect)%8.4f\n", confidence_incorrect);
        s += buf;
        s += "per-class accuracy\n";
        for (std::size_t c = 0; c < per_class_accuracy.size(); ++c) {
            const std::string name =
                c < class_names.size() ? class_names[c] : ("class " + std::to_string(c));
            std::snprintf(buf, sizeof(buf), "  %-24s %8.4f\n", name.c_str(),
                          per_class_accuracy[c]);
            s += buf;
        }
        return s;
    }
};

// Mean probability on the true class, and mean probability mass per
// incorrect class ((1 - p_true) / (C - 1), averaged over samples).
inline void confidence_report(const num::Tensor& probabilities, const std::vector<int>& labels,
                              EvalReport& report) {
    const std::size_t N = probabilities.rows();
    const std::size_t C = probabilities.cols();
    if (N == 0 || labels.size() != N || C < 2) {
        throw ValidationError("confidence_report: invalid inputs");
    }
    double correct = 0.0;
    double incorrect = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        const double p_true = probabilities.data[i * C + static_cast<std::size_t>(labels[i])];
        correct += p_true;
        incorrect += (1.0 - p_true) / static_cast<double>(C - 1);
    }
    report.confidence_correct = correct / static_cast<double>(N);
    report.confidence_incorrect = incorrect / static_cast<double>(N);
}

inline EvalReport evaluate(const ImageFeatureSet& images, const ClassifierHead& head,
                           const std::string& dataset_tag) {
    const Classification cls = classify(images, head);
    EvalReport report;
    report.dataset_tag = dataset_tag;
    report.head_provenance = provenance_name(head.provenance);
    report.sample_count = images.count();
    report.top1 = top1_accuracy(cls.predictions, images.labels);
    const std::size_t C = head.class_count();
    std::vector<std::size_t> per_class_hits(C, 0), per_class_total(C, 0);
    for (std::size_t i = 0; i < images.labels.size(); ++i) {
        const std::size_t l = static_cast<std::size_t>(images.labels[i]);
        per_class_total[l] += 1;
        per_class_hits[l] += cls.predictions[i] == images.labels[i] ? 1 : 0;
    }
    for (std::size_t c = 0; c < C; ++c) {
        report.per_class_accuracy.push_back(
            per_class_total[c] == 0
                ? 0.0
                : static_cast<double>(per_class_hits[c]) /
                      static_cast<double>(per_class_total[c]));
    }
    confidence_report(cls.probabilities, images.labels, report);
    return report;
}

// Seeded synthetic image features: unit-normalized class feature plus
// Gaussian noise, re-normalized.
inline ImageFeatureSet make_image_features(const num::Tensor& class_features,
                                           const std::vector<std::string>& class_names,
                                           std::size_t images_per_class, double sigma,
                                           Rng& rng) {
    if (class_features.rank() != 2 || class_features.rows() != class_names.size()) {
        throw ValidationError("make_image_features: class feature/name mismatch");
    }
    if (sigma < 0.0) {
        throw ValidationError("make_image_features: sigma must be >= 0");
    }
    const std::size_t C = class_features.rows();
    const std::size_t d = class_features.cols();
    ImageFeatureSet set;
    set.class_names = class_names;
    set.normalized = true;
    set.features = num::Tensor::zeros({C * images_per_class, d});
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t k = 0; k < images_per_class; ++k) {
            const std::size_t row = c * images_per_class + k;
            double* out = &set.features.data[row * d];
            for (std::size_t j = 0; j < d; ++j) {
                out[j] = class_features.data[c * d + j] + sigma * rng.gaussian();
            }
            const double norm = num::l2_norm({out, d});
            if (norm < 1e-12) {
                throw NumericError("synthetic image feature collapsed to zero");
            }
            for (std::size_t j = 0; j < d; ++j) {
                out[j] /= norm;
            }
            set.labels.push_back(static_cast<int>(c));
        }
    }
    set.validate();
    return set;
}

// Binary form: JSON manifest {"d","n","class_names","labels","data_file"}
// plus the float64 blob of features.
inline void save_image_features(const ImageFeatureSet& set,
                                const std::filesystem::path& manifest_path) {
    set.validate();
    num::TensorStore store;
    store.put("features", set.features);
    store.extra = nlohmann::json::object();
    store.extra["d"] = set.dim();
    store.extra["n"] = set.count();
    store.extra["class_names"] = set.class_names;
    store.extra["labels"] = set.labels;
    store.extra["normalized"] = set.normalized;
    store.save(manifest_path);
}

inline ImageFeatureSet load_image_features_manifest(const std::filesystem::path& manifest_path) {
    num::TensorStore store = num::TensorStore::load(manifest_path);
    ImageFeatureSet set;
    set.features = store.get("features");
    try {
        set.class_names = store.extra.at("class_names").get<std::vector<std::string>>();
        set.labels = store.extra.at("labels").get<std::vector<int>>();
        set.normalized = store.extra.value("normalized", false);
        const std::size_t d = store.extra.at("d").get<std::size_t>();
        const std::size_t n = store.extra.at("n").get<std::size_t>();
        if (d != set.dim() || n != set.count()) {
            throw ValidationError("image feature manifest d/n disagree with blob");
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("image feature manifest missing field: " + std::string(e.what()));
    }
    set.validate();
    return set;
}

// Tiny-fixture JSONL form: first line {"class_names": [...]}, then one
// {"label", "feature"} object per image.
inline void save_image_features_jsonl(const ImageFeatureSet& set,
                                      const std::filesystem::path& path) {
    set.validate();
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write image features " + path.string());
    }
    out << nlohmann::json{{"class_names", set.class_names},
                          {"normalized", set.normalized}}
               .dump()
        << "\n";
    const std::size_t d = set.dim();
    for (std::size_t i = 0; i < set.count(); ++i) {
        std::vector<double> row(set.features.data.begin() + i * d,
                                set.features.data.begin() + (i + 1) * d);
        out << nlohmann::json{{"label", set.labels[i]}, {"feature", row}}.dump() << "\n";
    }
}

inline ImageFeatureSet load_image_features_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read image features " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw IoError("image feature file empty: " + path.string());
    }
    ImageFeatureSet set;
    std::vector<double> flat;
    std::size_t d = 0;
    try {
        nlohmann::json header = nlohmann::json::parse(line);
        set.class_names = header.at("class_names").get<std::vector<std::string>>();
        set.normalized = header.value("normalized", false);
        std::size_t line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (data::is_blank(line)) {
                continue;
            }
            nlohmann::json j = nlohmann::json::parse(line);
            const std::vector<double> row = j.at("feature").get<std::vector<double>>();
            if (d == 0) {
                d = row.size();
            } else if (row.size() != d) {
                throw IoError("image feature line " + std::to_string(line_no) +
                              ": inconsistent dimension");
            }
            flat.insert(flat.end(), row.begin(), row.end());
            set.labels.push_back(j.at("label").get<int>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed image feature file " + path.string() + ": " + e.what());
    }
    if (set.labels.empty()) {
        throw IoError("image feature file has no rows: " + path.string());
    }
    set.features = num::Tensor({set.labels.size(), d}, std::move(flat));
    set.validate();
    return set;
}

inline ImageFeatureSet load_image_features(const std::filesystem::path& path) {
    return path.extension() == ".jsonl" ? load_image_features_jsonl(path)
                                        : load_image_features_manifest(path);
}

}  // namespace protext::eval
