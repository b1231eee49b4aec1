#pragma once

// Frozen CLIP-style transformer text encoder with deep language prompting.
// The forward pass is recorded on a Tape so the frozen path (encode) and the
// prompted path (encode_prompted) share one implementation; encoder weights
// enter the tape as frozen parameters, prompts as trainable ones.
//
// Sequence layout of the prompted path, before positional embeddings:
//   [SOS, P(0) rows 0..T-1, template tokens, EOS, padding]
// For layers j = 1..J-1 the block input rows at the prompt positions are
// replaced by P(j), discarding whatever the previous block produced there.
//
// Attention is causally masked; rows past EOS cannot influence the readout,
// so by default only the first eos+1 rows are computed. `full_length` runs
// every context position (used by the masking property checks).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "protext/common.hpp"
#include "protext/tape.hpp"
#include "protext/tensor.hpp"
#include "protext/tensor_store.hpp"
#include "protext/tokenizer.hpp"

namespace protext::text {

struct EncoderConfig {
    std::size_t num_layers = 2;
    std::size_t d_model = 16;
    std::size_t num_heads = 2;
    double mlp_ratio = 4.0;
    std::size_t context_length = 32;
    std::size_t projection_dim = 8;
    num::GeluKind gelu = num::GeluKind::tanh_approx;

    std::size_t mlp_hidden() const {
        return static_cast<std::size_t>(std::llround(static_cast<double>(d_model) * mlp_ratio));
    }

    void validate() const {
        if (d_model == 0 || num_heads == 0 || d_model % num_heads != 0) {
            throw ValidationError("d_model must be a positive multiple of num_heads");
        }
        if (context_length < 2 || projection_dim == 0 || mlp_hidden() == 0) {
            throw ValidationError("invalid encoder dimensions");
        }
    }

    nlohmann::json to_json() const {
        return {{"num_layers", num_layers},
                {"d_model", d_model},
                {"num_heads", num_heads},
                {"mlp_ratio", mlp_ratio},
                {"context_length", context_length},
                {"projection_dim", projection_dim},
                {"gelu", gelu == num::GeluKind::tanh_approx ? "tanh" : "exact"}};
    }

    static EncoderConfig from_json(const nlohmann::json& j) {
        EncoderConfig c;
        try {
            c.num_layers = j.at("num_layers").get<std::size_t>();
            c.d_model = j.at("d_model").get<std::size_t>();
            c.num_heads = j.at("num_heads").get<std::size_t>();
            c.mlp_ratio = j.at("mlp_ratio").get<double>();
            c.context_length = j.at("context_length").get<std::size_t>();
            c.projection_dim = j.at("projection_dim").get<std::size_t>();
            const std::string g = j.value("gelu", "tanh");
            if (g == "tanh") {
                c.gelu = num::GeluKind::tanh_approx;
            } else if (g == "exact") {
                c.gelu = num::GeluKind::exact;
            } else {
                throw ValidationError("unknown gelu kind: " + g);
            }
        } catch (const nlohmann::json::exception& e) {
            throw IoError("encoder config malformed: " + std::string(e.what()));
        }
        c.validate();
        return c;
    }
};

struct EncoderWeights {
    EncoderConfig config;
    num::TensorStore store;

    const num::Tensor& t(const std::string& name) const { return store.get(name); }
    std::size_t vocab_size() const { return t("token_embedding").rows(); }

    // Required tensor names in manifest order.
    static std::vector<std::string> tensor_names(const EncoderConfig& c) {
        std::vector<std::string> names = {"token_embedding", "positional_embedding"};
        for (std::size_t i = 0; i < c.num_layers; ++i) {
            const std::string p = "layers." + std::to_string(i) + ".";
            for (const char* s :
                 {"ln1.gamma", "ln1.beta", "attn.qkv_weight", "attn.qkv_bias", "attn.out_weight",
                  "attn.out_bias", "ln2.gamma", "ln2.beta", "mlp.fc_weight", "mlp.fc_bias",
                  "mlp.proj_weight", "mlp.proj_bias"}) {
                names.push_back(p + s);
            }
        }
        names.push_back("ln_final.gamma");
        names.push_back("ln_final.beta");
        names.push_back("text_projection");
        return names;
    }

    void validate() const {
        config.validate();
        const std::size_t dm = config.d_model;
        const std::size_t hidden = config.mlp_hidden();
        auto expect = [&](const std::string& name, std::vector<std::size_t> shape) {
            const num::Tensor& x = t(name);
            if (x.shape != shape) {
                throw ValidationError("weight tensor " + name + " has shape " + x.shape_str());
            }
        };
        if (t("token_embedding").rank() != 2 || t("token_embedding").cols() != dm) {
            throw ValidationError("token_embedding must be [vocab, d_model]");
        }
        expect("positional_embedding", {config.context_length, dm});
        for (std::size_t i = 0; i < config.num_layers; ++i) {
            const std::string p = "layers." + std::to_string(i) + ".";
            expect(p + "ln1.gamma", {dm});
            expect(p + "ln1.beta", {dm});
            expect(p + "attn.qkv_weight", {dm, 3 * dm});
            expect(p + "attn.qkv_bias", {3 * dm});
            expect(p + "attn.out_weight", {dm, dm});
            expect(p + "attn.out_bias", {dm});
            expect(p + "ln2.gamma", {dm});
            expect(p + "ln2.beta", {dm});
            expect(p + "mlp.fc_weight", {dm, hidden});
            expect(p + "mlp.fc_bias", {hidden});
            expect(p + "mlp.proj_weight", {hidden, dm});
            expect(p + "mlp.proj_bias", {dm});
        }
        expect("ln_final.gamma", {dm});
        expect("ln_final.beta", {dm});
        expect("text_projection", {dm, config.projection_dim});
    }

    std::string fingerprint() const {
        const std::uint64_t h = fnv1a64(store.fingerprint() + config.to_json().dump());
        return to_hex(h);
    }

    void save(const std::filesystem::path& manifest_path) const {
        num::TensorStore out = store;
        out.extra = nlohmann::json::object();
        out.extra["config"] = config.to_json();
        out.save(manifest_path);
    }

    static EncoderWeights load(const std::filesystem::path& manifest_path) {
        EncoderWeights w;
        w.store = num::TensorStore::load(manifest_path);
        if (!w.store.extra.contains("config")) {
            throw IoError("weights manifest missing \"config\": " + manifest_path.string());
        }
        w.config = EncoderConfig::from_json(w.store.extra["config"]);
        w.validate();
        return w;
    }
};

// Seeded toy weights for tests and the synthetic world. Layer norms start at
// identity; everything else is gaussian with transformer-typical scales.
inline EncoderWeights generate_encoder_weights(const EncoderConfig& config,
                                               std::size_t vocab_size, Rng& rng) {
    config.validate();
    if (vocab_size == 0) {
        throw ValidationError("vocab_size must be positive");
    }
    const std::size_t dm = config.d_model;
    const std::size_t hidden = config.mlp_hidden();
    const double wscale = 1.0 / std::sqrt(static_cast<double>(dm));
    EncoderWeights w;
    w.config = config;
    auto& ts = w.store;
    ts.put("token_embedding", num::Tensor::gaussian({vocab_size, dm}, rng, 0.05));
    ts.put("positional_embedding",
           num::Tensor::gaussian({config.context_length, dm}, rng, 0.02));
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        const std::string p = "layers." + std::to_string(i) + ".";
        ts.put(p + "ln1.gamma", num::Tensor::full({dm}, 1.0));
        ts.put(p + "ln1.beta", num::Tensor::zeros({dm}));
        ts.put(p + "attn.qkv_weight", num::Tensor::gaussian({dm, 3 * dm}, rng, wscale));
        ts.put(p + "attn.qkv_bias", num::Tensor::zeros({3 * dm}));
        ts.put(p + "attn.out_weight", num::Tensor::gaussian({dm, dm}, rng, wscale));
        ts.put(p + "attn.out_bias", num::Tensor::zeros({dm}));
        ts.put(p + "ln2.gamma", num::Tensor::full({dm}, 1.0));
        ts.put(p + "ln2.beta", num::Tensor::zeros({dm}));
        ts.put(p + "mlp.fc_weight", num::Tensor::gaussian({dm, hidden}, rng, wscale));
        ts.put(p + "mlp.fc_bias", num::Tensor::zeros({hidden}));
        ts.put(p + "mlp.proj_weight", num::Tensor::gaussian({hidden, dm}, rng, wscale));
        ts.put(p + "mlp.proj_bias", num::Tensor::zeros({dm}));
    }
    ts.put("ln_final.gamma", num::Tensor::full({dm}, 1.0));
    ts.put("ln_final.beta", num::Tensor::zeros({dm}));
    ts.put("text_projection", num::Tensor::gaussian({dm, config.projection_dim}, rng, wscale));
    w.validate();
    return w;
}

struct PromptSet {
    std::vector<num::Tensor> layers;  // J tensors, each [T, d_model]
    std::size_t T = 0;
    std::size_t J = 1;
    std::string init_text;

    void validate(const EncoderConfig& config) const {
        if (J < 1 || J > std::max<std::size_t>(config.num_layers, 1)) {
            throw ValidationError("prompt depth J out of range");
        }
        if (layers.size() != J) {
            throw ValidationError("prompt set must hold exactly J layer tensors");
        }
        for (const num::Tensor& t : layers) {
            if (t.shape != std::vector<std::size_t>{T, config.d_model}) {
                throw ValidationError("prompt tensor must be [T, d_model], got " + t.shape_str());
            }
        }
    }
};

// Layer 0 starts from the word embeddings of init_text (padded with small
// random rows if T exceeds the word count); deeper layers start random.
inline PromptSet make_prompt_set(const EncoderConfig& config, const EncoderWeights& weights,
                                 const Vocabulary& vocab, std::size_t T, std::size_t J,
                                 const std::string& init_text, Rng& rng) {
    PromptSet p;
    p.T = T;
    p.J = J;
    p.init_text = init_text;
    const std::size_t dm = config.d_model;
    num::Tensor layer0 = num::Tensor::gaussian({T, dm}, rng, 0.02);
    if (!init_text.empty()) {
        const std::vector<std::string> words = split_words(init_text);
        const num::Tensor& emb = weights.t("token_embedding");
        for (std::size_t r = 0; r < std::min(T, words.size()); ++r) {
            const std::uint32_t id = vocab.lookup(words[r]);
            std::copy(&emb.data[id * dm], &emb.data[(id + 1) * dm], &layer0.data[r * dm]);
        }
    }
    p.layers.push_back(std::move(layer0));
    for (std::size_t j = 1; j < J; ++j) {
        p.layers.push_back(num::Tensor::gaussian({T, dm}, rng, 0.02));
    }
    p.validate(config);
    return p;
}

// Tape handles to the prompt tensors, registered as parameters
// "prompt.0".."prompt.J-1".
struct PromptNodes {
    std::vector<num::Tape::NodeId> layers;
    std::size_t T = 0;
    std::size_t J = 1;
};

inline PromptNodes register_prompts(num::Tape& tape, const PromptSet& prompts,
                                    bool trainable = true) {
    PromptNodes n;
    n.T = prompts.T;
    n.J = prompts.J;
    for (std::size_t j = 0; j < prompts.layers.size(); ++j) {
        n.layers.push_back(
            tape.parameter("prompt." + std::to_string(j), prompts.layers[j], trainable));
    }
    return n;
}

inline num::ParameterSet prompt_parameter_set(const PromptSet& prompts) {
    num::ParameterSet params;
    for (std::size_t j = 0; j < prompts.layers.size(); ++j) {
        params["prompt." + std::to_string(j)] = {prompts.layers[j], /*trainable=*/true};
    }
    return params;
}

// Node ids of interest from one recorded forward pass.
struct ForwardTrace {
    num::Tape::NodeId embedded = 0;                 // layer-0 input incl. positions
    std::vector<num::Tape::NodeId> block_inputs;    // post prompt replacement
    std::vector<num::Tape::NodeId> block_outputs;
    num::Tape::NodeId final_hidden = 0;             // after final layer norm
    num::Tape::NodeId projected = 0;                // [1, d], before normalization
    num::Tape::NodeId feature = 0;                  // [d], L2-normalized
    std::size_t eos_position = 0;                   // in the prompted sequence
    std::size_t active_length = 0;
};

inline ForwardTrace encode_trace(num::Tape& tape, const TokenSequence& tokens,
                                 const EncoderWeights& weights,
                                 const PromptNodes* prompts = nullptr,
                                 bool full_length = false) {
    const EncoderConfig& cfg = weights.config;
    const std::size_t dm = cfg.d_model;
    const std::size_t ctx = cfg.context_length;
    if (tokens.ids.size() != ctx) {
        throw ValidationError("token sequence length does not match context_length");
    }
    const num::Tensor& emb = weights.t("token_embedding");
    for (std::uint32_t id : tokens.ids) {
        if (id >= emb.rows()) {
            throw ValidationError("token id out of range: " + std::to_string(id));
        }
    }
    const std::size_t T = prompts ? prompts->T : 0;
    const std::size_t J = prompts ? prompts->J : 0;
    if (tokens.eos_position + T >= ctx) {
        throw ValidationError("prompt length overflows context: eos at " +
                              std::to_string(tokens.eos_position) + " + T=" + std::to_string(T) +
                              " >= " + std::to_string(ctx));
    }
    const std::size_t eos = tokens.eos_position + T;
    const std::size_t active = full_length ? ctx : eos + 1;

    auto weight_node = [&](const std::string& name) {
        return tape.parameter(name, weights.t(name), /*trainable=*/false);
    };

    auto embed_rows = [&](std::size_t first, std::size_t last) {
        num::Tensor rows = num::Tensor::zeros({last - first, dm});
        for (std::size_t i = first; i < last; ++i) {
            const std::uint32_t id = tokens.ids[i];
            std::copy(&emb.data[id * dm], &emb.data[(id + 1) * dm],
                      &rows.data[(i - first) * dm]);
        }
        return rows;
    };

    ForwardTrace trace;
    trace.eos_position = eos;
    trace.active_length = active;

    num::Tape::NodeId x;
    if (prompts) {
        // [SOS] + P(0) + original tokens 1..(active-T)
        const num::Tape::NodeId pre = tape.constant(embed_rows(0, 1));
        const num::Tape::NodeId post = tape.constant(embed_rows(1, active - T));
        const std::array<num::Tape::NodeId, 3> parts{pre, prompts->layers[0], post};
        x = tape.concat_rows(parts);
    } else {
        x = tape.constant(embed_rows(0, active));
    }
    {
        const num::Tensor& pos = weights.t("positional_embedding");
        num::Tensor pos_slice({active, dm},
                              {pos.data.begin(), pos.data.begin() + active * dm});
        x = tape.add(x, tape.constant(std::move(pos_slice)));
    }
    trace.embedded = x;

    const std::size_t heads = cfg.num_heads;
    const std::size_t dh = dm / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t layer = 0; layer < cfg.num_layers; ++layer) {
        if (prompts && layer >= 1 && layer < J && T > 0) {
            // Discard previous block's outputs at prompt rows 1..T.
            const std::array<num::Tape::NodeId, 3> parts{
                tape.slice_rows(x, 0, 1), prompts->layers[layer],
                tape.slice_rows(x, 1 + T, active)};
            x = tape.concat_rows(parts);
        }
        trace.block_inputs.push_back(x);

        const std::string p = "layers." + std::to_string(layer) + ".";
        num::Tape::NodeId h =
            tape.layer_norm(x, weight_node(p + "ln1.gamma"), weight_node(p + "ln1.beta"));
        num::Tape::NodeId qkv =
            tape.add_rowvec(tape.matmul(h, weight_node(p + "attn.qkv_weight")),
                            weight_node(p + "attn.qkv_bias"));
        std::vector<num::Tape::NodeId> head_outs;
        head_outs.reserve(heads);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            const num::Tape::NodeId q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh);
            const num::Tape::NodeId k = tape.slice_cols(qkv, dm + hd * dh, dm + (hd + 1) * dh);
            const num::Tape::NodeId v =
                tape.slice_cols(qkv, 2 * dm + hd * dh, 2 * dm + (hd + 1) * dh);
            const num::Tape::NodeId att =
                tape.causal_softmax(tape.scale(tape.matmul_nt(q, k), att_scale));
            head_outs.push_back(tape.matmul(att, v));
        }
        num::Tape::NodeId merged = tape.concat_cols(head_outs);
        num::Tape::NodeId attn_out =
            tape.add_rowvec(tape.matmul(merged, weight_node(p + "attn.out_weight")),
                            weight_node(p + "attn.out_bias"));
        x = tape.add(x, attn_out);

        num::Tape::NodeId h2 =
            tape.layer_norm(x, weight_node(p + "ln2.gamma"), weight_node(p + "ln2.beta"));
        num::Tape::NodeId fc = tape.add_rowvec(tape.matmul(h2, weight_node(p + "mlp.fc_weight")),
                                               weight_node(p + "mlp.fc_bias"));
        num::Tape::NodeId act = tape.gelu(fc, cfg.gelu);
        num::Tape::NodeId proj =
            tape.add_rowvec(tape.matmul(act, weight_node(p + "mlp.proj_weight")),
                            weight_node(p + "mlp.proj_bias"));
        x = tape.add(x, proj);
        trace.block_outputs.push_back(x);
    }

    x = tape.layer_norm(x, weight_node("ln_final.gamma"), weight_node("ln_final.beta"));
    trace.final_hidden = x;

    num::Tape::NodeId readout = tape.slice_rows(x, eos, eos + 1);
    trace.projected = tape.matmul(readout, weight_node("text_projection"));
    trace.feature = tape.reshape(tape.l2_normalize(trace.projected), {cfg.projection_dim});
    return trace;
}

// Frozen path: feature of the plain token sequence.
inline num::Tensor encode(const TokenSequence& tokens, const EncoderWeights& weights) {
    num::Tape tape;
    return tape.value(encode_trace(tape, tokens, weights).feature);
}

// Prompted path: feature with deep language prompts spliced in.
inline num::Tensor encode_prompted(const TokenSequence& tokens, const PromptSet& prompts,
                                   const EncoderWeights& weights) {
    prompts.validate(weights.config);
    num::Tape tape;
    PromptNodes nodes = register_prompts(tape, prompts, /*trainable=*/false);
    return tape.value(encode_trace(tape, tokens, weights, &nodes).feature);
}

// Materialized per-layer states for property checks.
struct EncoderStates {
    num::Tensor embedded;
    std::vector<num::Tensor> block_inputs;
    std::vector<num::Tensor> block_outputs;
    num::Tensor final_hidden;
    std::size_t eos_position = 0;
};

inline EncoderStates forward_states(const TokenSequence& tokens, const EncoderWeights& weights,
                                    const PromptSet* prompts = nullptr,
                                    bool full_length = true) {
    num::Tape tape;
    PromptNodes nodes;
    if (prompts) {
        prompts->validate(weights.config);
        nodes = register_prompts(tape, *prompts, /*trainable=*/false);
    }
    ForwardTrace trace =
        encode_trace(tape, tokens, weights, prompts ? &nodes : nullptr, full_length);
    EncoderStates s;
    s.embedded = tape.value(trace.embedded);
    for (num::Tape::NodeId n : trace.block_inputs) {
        s.block_inputs.push_back(tape.value(n));
    }
    for (num::Tape::NodeId n : trace.block_outputs) {
        s.block_outputs.push_back(tape.value(n));
    }
    s.final_hidden = tape.value(trace.final_hidden);
    s.eos_position = trace.eos_position;
    return s;
}

// For each prompt vector, the k vocabulary words whose token embeddings are
// nearest in Euclidean distance; ties break toward the lower token id.
inline std::vector<std::vector<std::vector<std::string>>> nearest_vocab_words(
    const PromptSet& prompts, const EncoderWeights& weights, const Vocabulary& vocab,
    std::size_t k) {
    if (k > vocab.size()) {
        throw ValidationError("nearest_vocab_words: k exceeds vocabulary size");
    }
    const num::Tensor& emb = weights.t("token_embedding");
    if (vocab.size() != emb.rows()) {
        throw ValidationError("vocabulary size does not match token_embedding rows");
    }
    const std::size_t dm = weights.config.d_model;
    std::vector<std::vector<std::vector<std::string>>> out;
    for (const num::Tensor& layer : prompts.layers) {
        std::vector<std::vector<std::string>> per_vector;
        for (std::size_t r = 0; r < layer.rows(); ++r) {
            std::vector<std::pair<double, std::uint32_t>> dist;
            dist.reserve(emb.rows());
            for (std::size_t v = 0; v < emb.rows(); ++v) {
                double d2 = 0.0;
                for (std::size_t j = 0; j < dm; ++j) {
                    const double d = layer.data[r * dm + j] - emb.data[v * dm + j];
                    d2 += d * d;
                }
                dist.emplace_back(d2, static_cast<std::uint32_t>(v));
            }
            std::stable_sort(dist.begin(), dist.end());
            std::vector<std::string> words;
            for (std::size_t i = 0; i < k; ++i) {
                words.push_back(vocab.word(dist[i].second));
            }
            per_vector.push_back(std::move(words));
        }
        out.push_back(std::move(per_vector));
    }
    return out;
}

}  // namespace protext::text
