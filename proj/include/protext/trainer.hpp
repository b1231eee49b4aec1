#pragma once

// Prompt (and adapter-baseline) training against the contextual mapping
// objective: pull the prompted feature of each class-name input toward the
// frozen feature of an LLM description of that class. Targets are frozen, so
// they are encoded once up front; only the prompted path is recorded on the
// tape each step.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protext/common.hpp"
#include "protext/dataset.hpp"
#include "protext/encoder.hpp"
#include "protext/optimizer.hpp"
#include "protext/tape.hpp"
#include "protext/tensor.hpp"
#include "protext/tensor_store.hpp"
#include "protext/tokenizer.hpp"

namespace protext::train {

enum class LossKind { mse, l1, contrastive };
enum class TargetMode { per_sample, ensembled };

inline std::string loss_name(LossKind k) {
    switch (k) {
        case LossKind::mse: return "mse";
        case LossKind::l1: return "l1";
        case LossKind::contrastive: return "contrastive";
    }
    return "?";
}

inline LossKind parse_loss(const std::string& s) {
    if (s == "mse") return LossKind::mse;
    if (s == "l1") return LossKind::l1;
    if (s == "contrastive") return LossKind::contrastive;
    throw ValidationError("unknown loss kind: " + s);
}

inline std::string target_name(TargetMode m) {
    return m == TargetMode::per_sample ? "per-sample" : "ensembled";
}

inline TargetMode parse_target(const std::string& s) {
    if (s == "per-sample") return TargetMode::per_sample;
    if (s == "ensembled") return TargetMode::ensembled;
    throw ValidationError("unknown target mode: " + s);
}

struct TrainConfig {
    std::size_t prompt_length = 4;  // T
    std::size_t prompt_depth = 1;   // J
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double lr = 0.002;
    num::DecayKind schedule = num::DecayKind::cosine;
    std::size_t warmup_epochs = 5;
    LossKind loss = LossKind::mse;
    TargetMode target = TargetMode::per_sample;
    std::uint64_t seed = 0;
    double contrastive_temperature = 0.07;
    std::string init_text = "a photo of a";
    bool normalize_features = true;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;

    void validate() const {
        if (prompt_depth < 1) {
            throw ValidationError("prompt depth J must be >= 1");
        }
        if (batch_size < 1 || lr <= 0.0 || contrastive_temperature <= 0.0) {
            throw ValidationError("batch size, lr, and temperature must be positive");
        }
    }

    num::AdamWConfig adamw() const { return {lr, beta1, beta2, adam_eps, weight_decay}; }

    nlohmann::json to_json() const {
        return {{"prompt_length", prompt_length},
                {"prompt_depth", prompt_depth},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"schedule", schedule == num::DecayKind::cosine ? "cosine" : "constant"},
                {"warmup_epochs", warmup_epochs},
                {"loss", loss_name(loss)},
                {"target", target_name(target)},
                {"seed", seed},
                {"contrastive_temperature", contrastive_temperature},
                {"init_text", init_text},
                {"normalize_features", normalize_features},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_eps", adam_eps},
                {"weight_decay", weight_decay}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.prompt_length = j.value("prompt_length", c.prompt_length);
        c.prompt_depth = j.value("prompt_depth", c.prompt_depth);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.lr = j.value("lr", c.lr);
        const std::string sched = j.value("schedule", "cosine");
        if (sched == "cosine") {
            c.schedule = num::DecayKind::cosine;
        } else if (sched == "constant") {
            c.schedule = num::DecayKind::constant;
        } else {
            throw ValidationError("unknown schedule: " + sched);
        }
        c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
        c.loss = parse_loss(j.value("loss", "mse"));
        c.target = parse_target(j.value("target", "per-sample"));
        c.seed = j.value("seed", c.seed);
        c.contrastive_temperature = j.value("contrastive_temperature", c.contrastive_temperature);
        c.init_text = j.value("init_text", c.init_text);
        c.normalize_features = j.value("normalize_features", c.normalize_features);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.validate();
        return c;
    }
};

// Per-sample mapping losses on feature vectors of dimension d:
//   mse = (1/d) sum_i (a_i - b_i)^2      l1 = (1/d) sum_i |a_i - b_i|
inline double mapping_loss(const num::Tensor& g_p, const num::Tensor& g, LossKind kind) {
    if (!g_p.same_shape(g)) {
        throw ValidationError("mapping_loss dimension mismatch: " + g_p.shape_str() + " vs " +
                              g.shape_str());
    }
    const double d = static_cast<double>(g_p.size());
    switch (kind) {
        case LossKind::mse: {
            double s = 0.0;
            for (std::size_t i = 0; i < g_p.size(); ++i) {
                const double diff = g_p.data[i] - g.data[i];
                s += diff * diff;
            }
            return s / d;
        }
        case LossKind::l1: {
            double s = 0.0;
            for (std::size_t i = 0; i < g_p.size(); ++i) {
                s += std::fabs(g_p.data[i] - g.data[i]);
            }
            return s / d;
        }
        case LossKind::contrastive:
            // A lone pair has no negatives; the batch-level op handles B > 1.
            return 0.0;
    }
    return 0.0;
}

// Batch loss over feature nodes already on the tape. For mse/l1 the batch
// loss is the arithmetic mean of per-sample losses; contrastive is symmetric
// InfoNCE over the in-batch similarity matrix (no label-aware masking, so
// same-class samples in a batch do act as negatives).
inline num::Tape::NodeId batch_loss_node(num::Tape& tape,
                                         const std::vector<num::Tape::NodeId>& predicted,
                                         const std::vector<num::Tape::NodeId>& target,
                                         LossKind kind, double temperature) {
    if (predicted.empty() || predicted.size() != target.size()) {
        throw ValidationError("batch_loss: feature lists empty or mismatched");
    }
    const std::size_t B = predicted.size();
    if (kind == LossKind::contrastive) {
        std::vector<num::Tape::NodeId> prows, trows;
        for (std::size_t i = 0; i < B; ++i) {
            const std::size_t d = tape.value(predicted[i]).size();
            prows.push_back(tape.reshape(predicted[i], {1, d}));
            trows.push_back(tape.reshape(target[i], {1, d}));
        }
        num::Tape::NodeId P = tape.concat_rows(prows);
        num::Tape::NodeId T = tape.concat_rows(trows);
        num::Tape::NodeId logits = tape.scale(tape.matmul_nt(P, T), 1.0 / temperature);
        num::Tape::NodeId row_lse = tape.sum(tape.logsumexp_rows(logits));
        num::Tape::NodeId col_lse = tape.sum(tape.logsumexp_rows(tape.transpose(logits)));
        num::Tape::NodeId diag = tape.scale(tape.diag_sum(logits), 2.0);
        return tape.scale(tape.sub(tape.add(row_lse, col_lse), diag),
                          1.0 / (2.0 * static_cast<double>(B)));
    }
    num::Tape::NodeId acc = 0;
    bool first = true;
    for (std::size_t i = 0; i < B; ++i) {
        num::Tape::NodeId diff = tape.sub(predicted[i], target[i]);
        num::Tape::NodeId per =
            kind == LossKind::mse ? tape.mean(tape.mul(diff, diff)) : tape.mean(tape.abs(diff));
        acc = first ? per : tape.add(acc, per);
        first = false;
    }
    return tape.scale(acc, 1.0 / static_cast<double>(B));
}

// Convenience scalar form over materialized feature tensors.
inline double batch_loss(const std::vector<num::Tensor>& predicted,
                         const std::vector<num::Tensor>& target, LossKind kind,
                         double temperature) {
    num::Tape tape;
    std::vector<num::Tape::NodeId> p, t;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        p.push_back(tape.constant(predicted[i]));
        t.push_back(tape.constant(target[i]));
    }
    return tape.value(batch_loss_node(tape, p, t, kind, temperature)).data[0];
}

// Frozen feature of a text: encode and read either the normalized feature or
// the raw projection, depending on `normalized`.
inline num::Tensor frozen_feature(const std::string& text, const text::Vocabulary& vocab,
                                  const text::EncoderWeights& weights, bool normalized) {
    const text::TokenSequence seq =
        text::tokenize(text, vocab, weights.config.context_length);
    num::Tape tape;
    const text::ForwardTrace trace = text::encode_trace(tape, seq, weights);
    if (normalized) {
        return tape.value(trace.feature);
    }
    const num::Tensor& raw = tape.value(trace.projected);
    return num::Tensor({raw.size()}, raw.data);
}

// Per class: L2-normalized mean of the normalized frozen features of all its
// outputs. A class without outputs, or an ensemble whose mean collapses to
// (near) zero, is an error.
inline std::map<int, num::Tensor> ensemble_targets(const data::PromptDataset& dataset,
                                                   const text::EncoderWeights& weights,
                                                   const text::Vocabulary& vocab) {
    std::map<int, num::Tensor> sums;
    std::map<int, std::size_t> counts;
    std::map<std::string, num::Tensor> cache;
    for (const data::PromptPair& p : dataset.pairs) {
        auto cit = cache.find(p.output_text);
        if (cit == cache.end()) {
            cit = cache.emplace(p.output_text,
                                frozen_feature(p.output_text, vocab, weights, true))
                      .first;
        }
        const num::Tensor& f = cit->second;
        auto sit = sums.find(p.class_id);
        if (sit == sums.end()) {
            sums.emplace(p.class_id, f);
        } else {
            for (std::size_t i = 0; i < f.size(); ++i) {
                sit->second.data[i] += f.data[i];
            }
        }
        counts[p.class_id] += 1;
    }
    std::map<int, num::Tensor> out;
    for (const data::ClassRecord& c : dataset.classes) {
        auto sit = sums.find(c.class_id);
        if (sit == sums.end()) {
            throw ValidationError("class " + c.name + " has zero outputs to ensemble");
        }
        num::Tensor mean = sit->second;
        const double n = static_cast<double>(counts[c.class_id]);
        for (double& v : mean.data) {
            v /= n;
        }
        const double norm = num::l2_norm(mean.data);
        if (norm < 1e-9) {
            throw NumericError("degenerate ensemble for class " + c.name +
                               " (mean feature is zero)");
        }
        for (double& v : mean.data) {
            v /= norm;
        }
        out.emplace(c.class_id, std::move(mean));
    }
    return out;
}

struct TraceRow {
    std::uint64_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
};

inline void save_loss_trace(const std::vector<TraceRow>& rows,
                            const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write loss trace " + path.string());
    }
    out << "step,epoch,lr,loss\n";
    char buf[96];
    for (const TraceRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%llu,%zu,%.17g,%.17g\n",
                      static_cast<unsigned long long>(r.step), r.epoch, r.lr, r.loss);
        out << buf;
    }
}

struct PromptCheckpoint {
    text::PromptSet prompts;
    std::string encoder_fingerprint;
    TrainConfig config;
    double final_loss = 0.0;
    std::string version = kVersion;

    void save(const std::filesystem::path& path) const {
        num::TensorStore store;
        for (std::size_t j = 0; j < prompts.layers.size(); ++j) {
            store.put("prompt." + std::to_string(j), prompts.layers[j]);
        }
        store.extra = nlohmann::json::object();
        store.extra["version"] = version;
        store.extra["encoder_fingerprint"] = encoder_fingerprint;
        store.extra["T"] = prompts.T;
        store.extra["J"] = prompts.J;
        store.extra["config"] = config.to_json();
        store.extra["final_loss"] = final_loss;
        store.save(path);
    }

    static PromptCheckpoint load(const std::filesystem::path& path) {
        num::TensorStore store = num::TensorStore::load(path);
        PromptCheckpoint ck;
        try {
            ck.version = store.extra.at("version").get<std::string>();
            ck.encoder_fingerprint = store.extra.at("encoder_fingerprint").get<std::string>();
            ck.prompts.T = store.extra.at("T").get<std::size_t>();
            ck.prompts.J = store.extra.at("J").get<std::size_t>();
            ck.config = TrainConfig::from_json(store.extra.at("config"));
            ck.final_loss = store.extra.at("final_loss").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw IoError("checkpoint manifest missing field: " + std::string(e.what()));
        }
        ck.prompts.init_text = ck.config.init_text;
        for (std::size_t j = 0; j < ck.prompts.J; ++j) {
            ck.prompts.layers.push_back(store.get("prompt." + std::to_string(j)));
        }
        return ck;
    }

    std::string fingerprint() const {
        num::TensorStore store;
        for (std::size_t j = 0; j < prompts.layers.size(); ++j) {
            store.put("prompt." + std::to_string(j), prompts.layers[j]);
        }
        return store.fingerprint();
    }
};

namespace detail {

inline text::PromptSet prompts_from_params(const num::ParameterSet& params, std::size_t T,
                                           std::size_t J, const std::string& init_text) {
    text::PromptSet p;
    p.T = T;
    p.J = J;
    p.init_text = init_text;
    for (std::size_t j = 0; j < J; ++j) {
        p.layers.push_back(params.at("prompt." + std::to_string(j)).value);
    }
    return p;
}

struct Sample {
    text::TokenSequence input;
    num::Tensor target;
};

// Tokenized inputs plus frozen target features for every pair, with the
// target mode already applied.
inline std::vector<Sample> prepare_samples(const data::PromptDataset& dataset,
                                           const text::EncoderWeights& weights,
                                           const text::Vocabulary& vocab,
                                           const TrainConfig& config) {
    std::map<std::string, text::TokenSequence> input_cache;
    std::map<std::string, num::Tensor> target_cache;
    std::map<int, num::Tensor> ensembled;
    if (config.target == TargetMode::ensembled) {
        ensembled = ensemble_targets(dataset, weights, vocab);
    }
    std::vector<Sample> samples;
    samples.reserve(dataset.pairs.size());
    for (const data::PromptPair& p : dataset.pairs) {
        auto iit = input_cache.find(p.input_text);
        if (iit == input_cache.end()) {
            iit = input_cache
                      .emplace(p.input_text,
                               text::tokenize(p.input_text, vocab,
                                              weights.config.context_length))
                      .first;
        }
        num::Tensor target;
        if (config.target == TargetMode::ensembled) {
            target = ensembled.at(p.class_id);
        } else {
            auto tit = target_cache.find(p.output_text);
            if (tit == target_cache.end()) {
                tit = target_cache
                          .emplace(p.output_text,
                                   frozen_feature(p.output_text, vocab, weights,
                                                  config.normalize_features))
                          .first;
            }
            target = tit->second;
        }
        samples.push_back({iit->second, std::move(target)});
    }
    return samples;
}

}  // namespace detail

struct TrainResult {
    PromptCheckpoint checkpoint;
    std::vector<TraceRow> trace;
};

inline TrainResult train(const data::PromptDataset& dataset, const text::EncoderWeights& weights,
                         const text::Vocabulary& vocab, const TrainConfig& config) {
    config.validate();
    dataset.validate();
    if (dataset.pairs.empty()) {
        throw ValidationError("training dataset has no pairs");
    }
    Rng rng(config.seed);
    text::PromptSet init = text::make_prompt_set(weights.config, weights, vocab,
                                                 config.prompt_length, config.prompt_depth,
                                                 config.init_text, rng);
    num::ParameterSet params = text::prompt_parameter_set(init);

    const std::vector<detail::Sample> samples =
        detail::prepare_samples(dataset, weights, vocab, config);
    const std::size_t n = samples.size();
    const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const std::uint64_t total_steps = config.epochs * steps_per_epoch;
    num::LrSchedule schedule{config.lr,
                             std::min<std::uint64_t>(config.warmup_epochs * steps_per_epoch,
                                                     total_steps),
                             std::max<std::uint64_t>(total_steps, 1), config.schedule};
    num::AdamW opt(config.adamw());

    std::vector<TraceRow> trace;
    trace.reserve(total_steps);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    std::uint64_t step = 0;
    double last_loss = 0.0;
    bool any_step = false;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t end = std::min(n, start + config.batch_size);
            num::Tape tape;
            text::PromptNodes nodes;
            nodes.T = config.prompt_length;
            nodes.J = config.prompt_depth;
            for (std::size_t j = 0; j < config.prompt_depth; ++j) {
                const std::string id = "prompt." + std::to_string(j);
                nodes.layers.push_back(tape.parameter(id, params.at(id).value, true));
            }
            std::vector<num::Tape::NodeId> predicted, target;
            for (std::size_t i = start; i < end; ++i) {
                const detail::Sample& s = samples[order[i]];
                const text::ForwardTrace t = text::encode_trace(tape, s.input, weights, &nodes);
                if (config.normalize_features) {
                    predicted.push_back(t.feature);
                } else {
                    predicted.push_back(
                        tape.reshape(t.projected, {tape.value(t.projected).size()}));
                }
                target.push_back(tape.constant(s.target));
            }
            const num::Tape::NodeId loss = batch_loss_node(
                tape, predicted, target, config.loss, config.contrastive_temperature);
            const double lr_now = schedule.at(step);
            const num::GradientMap grads = tape.backward(loss, params);
            opt.step(params, grads, lr_now);
            last_loss = tape.value(loss).data[0];
            trace.push_back({step, epoch, lr_now, last_loss});
            any_step = true;
            ++step;
        }
    }

    // With zero steps the checkpoint equals initialization; report the loss
    // of the first batch at init so final_loss is still meaningful.
    if (!any_step) {
        num::Tape tape;
        text::PromptNodes nodes = text::register_prompts(tape, init, /*trainable=*/false);
        std::vector<num::Tape::NodeId> predicted, target;
        for (std::size_t i = 0; i < std::min<std::size_t>(n, config.batch_size); ++i) {
            const text::ForwardTrace t = text::encode_trace(tape, samples[i].input, weights,
                                                            &nodes);
            predicted.push_back(config.normalize_features
                                    ? t.feature
                                    : tape.reshape(t.projected,
                                                   {tape.value(t.projected).size()}));
            target.push_back(tape.constant(samples[i].target));
        }
        last_loss = tape.value(batch_loss_node(tape, predicted, target, config.loss,
                                               config.contrastive_temperature))
                        .data[0];
    }

    TrainResult result;
    result.checkpoint.prompts = detail::prompts_from_params(params, config.prompt_length,
                                                            config.prompt_depth,
                                                            config.init_text);
    result.checkpoint.encoder_fingerprint = weights.fingerprint();
    result.checkpoint.config = config;
    result.checkpoint.final_loss = last_loss;
    result.trace = std::move(trace);
    return result;
}

enum class AdapterKind { linear, mlp };

inline std::string adapter_name(AdapterKind k) {
    return k == AdapterKind::linear ? "linear" : "mlp";
}

inline AdapterKind parse_adapter(const std::string& s) {
    if (s == "linear") return AdapterKind::linear;
    if (s == "mlp") return AdapterKind::mlp;
    throw ValidationError("unknown adapter kind: " + s);
}

// Feature-space baseline: a small trainable transform A on the frozen text
// feature, blended residually, normalized. End-to-end shape is [d -> d].
struct AdapterWeights {
    AdapterKind kind = AdapterKind::linear;
    num::TensorStore::Map tensors;
    double alpha = 0.2;
    std::size_t reduction = 4;

    static AdapterWeights make(AdapterKind kind, std::size_t d, double alpha,
                               std::size_t reduction, Rng& rng) {
        AdapterWeights a;
        a.kind = kind;
        a.alpha = alpha;
        a.reduction = reduction;
        if (kind == AdapterKind::linear) {
            num::Tensor w = num::Tensor::zeros({d, d});
            for (std::size_t i = 0; i < d; ++i) {
                w.data[i * d + i] = 1.0;
            }
            a.tensors.emplace("adapter.weight", std::move(w));
            a.tensors.emplace("adapter.bias", num::Tensor::zeros({d}));
        } else {
            const std::size_t hidden = std::max<std::size_t>(1, d / reduction);
            const double scale = 1.0 / std::sqrt(static_cast<double>(d));
            a.tensors.emplace("adapter.fc_weight",
                              num::Tensor::gaussian({d, hidden}, rng, scale));
            a.tensors.emplace("adapter.fc_bias", num::Tensor::zeros({hidden}));
            a.tensors.emplace("adapter.proj_weight",
                              num::Tensor::gaussian({hidden, d}, rng, scale));
            a.tensors.emplace("adapter.proj_bias", num::Tensor::zeros({d}));
        }
        return a;
    }

    std::size_t hidden_width(std::size_t d) const {
        return std::max<std::size_t>(1, d / reduction);
    }

    num::ParameterSet parameter_set() const {
        num::ParameterSet p;
        for (const auto& [name, t] : tensors) {
            p[name] = {t, /*trainable=*/true};
        }
        return p;
    }
};

inline num::TensorStore::Map params_to_map(const num::ParameterSet& params) {
    num::TensorStore::Map m;
    for (const auto& [name, p] : params) {
        m.emplace(name, p.value);
    }
    return m;
}

// normalize(alpha * A(f) + (1 - alpha) * f) for a frozen base feature f that
// enters the tape as a constant row.
inline num::Tape::NodeId adapter_feature_node(num::Tape& tape, const AdapterWeights& adapter,
                                              const num::ParameterSet& params,
                                              const num::Tensor& base_feature) {
    const std::size_t d = base_feature.size();
    num::Tape::NodeId f =
        tape.constant(num::Tensor({1, d}, base_feature.data));
    num::Tape::NodeId a;
    if (adapter.kind == AdapterKind::linear) {
        a = tape.add_rowvec(
            tape.matmul(f, tape.parameter("adapter.weight", params.at("adapter.weight").value,
                                          true)),
            tape.parameter("adapter.bias", params.at("adapter.bias").value, true));
    } else {
        num::Tape::NodeId h = tape.add_rowvec(
            tape.matmul(f, tape.parameter("adapter.fc_weight",
                                          params.at("adapter.fc_weight").value, true)),
            tape.parameter("adapter.fc_bias", params.at("adapter.fc_bias").value, true));
        h = tape.gelu(h, num::GeluKind::tanh_approx);
        a = tape.add_rowvec(
            tape.matmul(h, tape.parameter("adapter.proj_weight",
                                          params.at("adapter.proj_weight").value, true)),
            tape.parameter("adapter.proj_bias", params.at("adapter.proj_bias").value, true));
    }
    num::Tape::NodeId blended =
        tape.add(tape.scale(a, adapter.alpha), tape.scale(f, 1.0 - adapter.alpha));
    return tape.reshape(tape.l2_normalize(blended), {d});
}

struct AdapterTrainResult {
    AdapterWeights adapter;
    std::vector<TraceRow> trace;
    double final_loss = 0.0;
};

// Same loop as train(), but the trainable transform sits on the frozen
// feature instead of inside the encoder, so base features are precomputed.
inline AdapterTrainResult train_adapter(const data::PromptDataset& dataset,
                                        const text::EncoderWeights& weights,
                                        const text::Vocabulary& vocab, const TrainConfig& config,
                                        AdapterKind kind, double alpha = 0.2,
                                        std::size_t reduction = 4) {
    config.validate();
    dataset.validate();
    if (dataset.pairs.empty()) {
        throw ValidationError("training dataset has no pairs");
    }
    Rng rng(config.seed);
    AdapterWeights adapter =
        AdapterWeights::make(kind, weights.config.projection_dim, alpha, reduction, rng);
    num::ParameterSet params = adapter.parameter_set();

    const std::vector<detail::Sample> samples =
        detail::prepare_samples(dataset, weights, vocab, config);
    std::map<std::string, num::Tensor> base_cache;
    std::vector<const num::Tensor*> base(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string& text = samples[i].input.source_text;
        auto it = base_cache.find(text);
        if (it == base_cache.end()) {
            it = base_cache.emplace(text, frozen_feature(text, vocab, weights, true)).first;
        }
        base[i] = &it->second;
    }

    const std::size_t n = samples.size();
    const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const std::uint64_t total_steps = config.epochs * steps_per_epoch;
    num::LrSchedule schedule{config.lr,
                             std::min<std::uint64_t>(config.warmup_epochs * steps_per_epoch,
                                                     total_steps),
                             std::max<std::uint64_t>(total_steps, 1), config.schedule};
    num::AdamW opt(config.adamw());

    AdapterTrainResult result;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    std::uint64_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t end = std::min(n, start + config.batch_size);
            num::Tape tape;
            std::vector<num::Tape::NodeId> predicted, target;
            for (std::size_t i = start; i < end; ++i) {
                predicted.push_back(
                    adapter_feature_node(tape, adapter, params, *base[order[i]]));
                target.push_back(tape.constant(samples[order[i]].target));
            }
            const num::Tape::NodeId loss = batch_loss_node(
                tape, predicted, target, config.loss, config.contrastive_temperature);
            const double lr_now = schedule.at(step);
            const num::GradientMap grads = tape.backward(loss, params);
            opt.step(params, grads, lr_now);
            result.final_loss = tape.value(loss).data[0];
            result.trace.push_back({step, epoch, lr_now, result.final_loss});
            ++step;
        }
    }
    adapter.tensors = params_to_map(params);
    result.adapter = std::move(adapter);
    return result;
}

}  // namespace protext::train
