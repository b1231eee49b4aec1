#pragma once

// Command implementations behind the CLI: curate, train, eval, ablate,
// inspect, synthetic. Every command takes an effective JSON config (file
// config with explicit flags already applied on top), writes its artifacts,
// and drops a run-manifest JSON next to each artifact recording the exact
// config, seed, and input hashes. Manifests carry no timestamps, so a rerun
// from the same inputs is byte-identical.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protext/common.hpp"
#include "protext/dataset.hpp"
#include "protext/encoder.hpp"
#include "protext/llm_client.hpp"
#include "protext/synthetic.hpp"
#include "protext/tokenizer.hpp"
#include "protext/trainer.hpp"
#include "protext/zeroshot.hpp"

namespace protext::cli {

namespace fs = std::filesystem;

inline nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

// <artifact>.manifest.json: everything needed to reproduce the artifact
// bit-for-bit (command, effective config, seed, input hashes). No clocks.
inline void write_run_manifest(const fs::path& artifact, const std::string& command,
                               const nlohmann::json& effective_config, std::uint64_t seed,
                               const std::vector<std::pair<std::string, fs::path>>& inputs) {
    nlohmann::json manifest;
    manifest["version"] = kVersion;
    manifest["command"] = command;
    manifest["config"] = effective_config;
    manifest["seed"] = seed;
    nlohmann::json in = nlohmann::json::object();
    for (const auto& [label, path] : inputs) {
        if (fs::is_regular_file(path)) {
            in[label] = {{"path", path.string()}, {"fnv1a64", hash_file_hex(path)}};
        } else {
            in[label] = {{"path", path.string()}};
        }
    }
    manifest["inputs"] = in;
    manifest["artifact"] = artifact.filename().string();
    fs::path mpath = artifact;
    mpath += ".manifest.json";
    write_json_file(mpath, manifest);
}

inline std::string require_str(const nlohmann::json& cfg, const std::string& key,
                               const std::string& what) {
    if (!cfg.contains(key) || !cfg[key].is_string() || cfg[key].get<std::string>().empty()) {
        throw ValidationError(what + " requires --" + key);
    }
    return cfg[key].get<std::string>();
}

// Class list file: JSON array of {"name", "suffix"?, "split"?} or bare
// strings; class_id is the array index unless given explicitly.
inline std::vector<data::ClassRecord> load_class_list(const fs::path& path) {
    const nlohmann::json j = read_json_file(path);
    if (!j.is_array() || j.empty()) {
        throw ValidationError("class list must be a non-empty JSON array: " + path.string());
    }
    std::vector<data::ClassRecord> classes;
    int next_id = 0;
    for (const auto& item : j) {
        data::ClassRecord rec;
        if (item.is_string()) {
            rec.name = item.get<std::string>();
        } else {
            rec.name = item.at("name").get<std::string>();
            rec.concept_suffix = item.value("suffix", "");
            rec.split = data::parse_split(item.value("split", "all"));
            if (item.contains("class_id")) {
                next_id = item["class_id"].get<int>();
            }
        }
        rec.class_id = next_id++;
        classes.push_back(std::move(rec));
    }
    return classes;
}

inline std::vector<data::QueryTemplate> load_query_templates(const fs::path& path) {
    const std::vector<std::string> lines = data::load_template_list(path);
    if (lines.empty()) {
        throw ValidationError("query template file is empty: " + path.string());
    }
    std::vector<data::QueryTemplate> out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        out.push_back({lines[i], static_cast<int>(i)});
    }
    return out;
}

inline int cmd_curate(const nlohmann::json& cfg) {
    const fs::path out = require_str(cfg, "out", "curate");
    const fs::path classes_path = require_str(cfg, "classes", "curate");
    const std::vector<data::ClassRecord> classes = load_class_list(classes_path);
    const std::string input_template =
        cfg.value("input_template", std::string(eval::kDefaultInputTemplate));
    std::vector<std::pair<std::string, fs::path>> inputs = {{"classes", classes_path}};

    data::PromptDataset ds;
    if (cfg.contains("templates")) {
        // Handcrafted mode: K template renderings per class.
        const fs::path tpath = cfg["templates"].get<std::string>();
        inputs.emplace_back("templates", tpath);
        const std::vector<std::string> templates = data::load_template_list(tpath);
        const data::PairSource source =
            data::parse_source(cfg.value("source", std::string("handcrafted-80")));
        ds = data::assemble_handcrafted(classes, input_template, templates, source);
    } else {
        std::vector<data::QueryTemplate> queries;
        if (cfg.contains("queries")) {
            const fs::path qpath = cfg["queries"].get<std::string>();
            inputs.emplace_back("queries", qpath);
            queries = load_query_templates(qpath);
        } else {
            queries = data::default_query_templates();
        }
        data::GenerateOptions gen;
        gen.outputs_per_query = cfg.value("m", std::size_t{1});
        gen.max_retries = cfg.value("retries", std::size_t{3});
        gen.backoff_ms = cfg.value("backoff_ms", std::size_t{100});
        std::unique_ptr<data::LlmClient> client;
        data::PairSource source;
        if (cfg.contains("fixtures")) {
            const fs::path fdir = cfg["fixtures"].get<std::string>();
            inputs.emplace_back("fixtures", fdir);
            client = std::make_unique<data::FixtureClient>(fdir);
            source = data::PairSource::fixture;
        } else {
            client = std::make_unique<data::HttpClient>(data::HttpClient::from_env());
            source = data::PairSource::llm;
        }
        std::size_t filtered = 0;
        const std::vector<data::RawOutputs> outputs =
            data::generate_outputs(classes, queries, *client, gen, &filtered);
        data::DatasetMeta meta;
        meta.outputs_per_query = gen.outputs_per_query;
        meta.query_count = queries.size();
        meta.generator = client->describe();
        meta.filtered = filtered;
        ds = data::assemble_dataset(classes, input_template, outputs, source, meta);
    }
    data::save_dataset(ds, out);
    write_run_manifest(out, "curate", cfg, cfg.value("seed", std::uint64_t{0}), inputs);
    log_info("curate: wrote " + std::to_string(ds.pairs.size()) + " pairs for " +
             std::to_string(ds.classes.size()) + " classes to " + out.string());
    return 0;
}

inline train::TrainConfig train_config_from(const nlohmann::json& cfg) {
    return cfg.contains("train") ? train::TrainConfig::from_json(cfg["train"])
                                 : train::TrainConfig{};
}

inline int cmd_train(const nlohmann::json& cfg) {
    const fs::path out = require_str(cfg, "out", "train");
    const fs::path vocab_path = require_str(cfg, "vocab", "train");
    const fs::path weights_path = require_str(cfg, "weights", "train");
    const fs::path dataset_path = require_str(cfg, "dataset", "train");
    const text::Vocabulary vocab = text::load_vocabulary(vocab_path);
    const text::EncoderWeights weights = text::EncoderWeights::load(weights_path);
    data::PromptDataset dataset = data::load_dataset(dataset_path);
    const data::Split split = data::parse_split(cfg.value("split", std::string("all")));
    if (split != data::Split::all) {
        data::PromptDataset sub;
        sub.classes = dataset.classes_in(split);
        sub.pairs = dataset.pairs_in(split);
        sub.meta = dataset.meta;
        dataset = std::move(sub);
    }
    train::TrainConfig tc = train_config_from(cfg);
    if (cfg.contains("seed")) {
        tc.seed = cfg["seed"].get<std::uint64_t>();
    }
    const train::TrainResult result = train::train(dataset, weights, vocab, tc);
    result.checkpoint.save(out);
    fs::path trace_path = out;
    trace_path += ".trace.csv";
    train::save_loss_trace(result.trace, trace_path);
    const std::vector<std::pair<std::string, fs::path>> inputs = {
        {"vocab", vocab_path}, {"weights", weights_path}, {"dataset", dataset_path}};
    write_run_manifest(out, "train", cfg, tc.seed, inputs);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", result.checkpoint.final_loss);
    log_info("train: " + std::to_string(result.trace.size()) + " steps, final loss " + buf +
             ", checkpoint " + out.string());
    return 0;
}

inline std::vector<data::ClassRecord> classes_from_names(
    const std::vector<std::string>& names) {
    std::vector<data::ClassRecord> classes;
    for (std::size_t i = 0; i < names.size(); ++i) {
        classes.push_back({static_cast<int>(i), names[i], "", data::Split::all});
    }
    return classes;
}

inline int cmd_eval(const nlohmann::json& cfg) {
    const fs::path out = require_str(cfg, "out", "eval");
    const fs::path vocab_path = require_str(cfg, "vocab", "eval");
    const fs::path weights_path = require_str(cfg, "weights", "eval");
    const fs::path features_path = require_str(cfg, "features", "eval");
    const text::Vocabulary vocab = text::load_vocabulary(vocab_path);
    const text::EncoderWeights weights = text::EncoderWeights::load(weights_path);
    const eval::ImageFeatureSet images = eval::load_image_features(features_path);
    const double tau = cfg.value("tau", 100.0);
    const std::string input_template =
        cfg.value("input_template", std::string(eval::kDefaultInputTemplate));
    const std::string head_kind = cfg.value("head", std::string("plain"));
    std::vector<std::pair<std::string, fs::path>> inputs = {
        {"vocab", vocab_path}, {"weights", weights_path}, {"features", features_path}};

    eval::ClassifierHead head;
    if (cfg.contains("checkpoint")) {
        const fs::path ck_path = cfg["checkpoint"].get<std::string>();
        inputs.emplace_back("checkpoint", ck_path);
        const train::PromptCheckpoint ck = train::PromptCheckpoint::load(ck_path);
        head = eval::build_head(classes_from_names(images.class_names), ck, weights, vocab,
                                input_template, tau);
    } else if (head_kind == "plain") {
        head = eval::build_head_plain(classes_from_names(images.class_names), weights, vocab,
                                      input_template, tau);
    } else if (head_kind == "ensembled") {
        const fs::path dataset_path = require_str(cfg, "dataset", "eval --head ensembled");
        inputs.emplace_back("dataset", dataset_path);
        const data::PromptDataset dataset = data::load_dataset(dataset_path);
        head = eval::build_head_ensemble(dataset, weights, vocab, tau);
    } else {
        throw ValidationError("unknown head kind: " + head_kind +
                              " (use a checkpoint, plain, or ensembled)");
    }
    const eval::EvalReport report =
        eval::evaluate(images, head, cfg.value("tag", features_path.filename().string()));
    write_json_file(out, report.to_json());
    fs::path text_path = out;
    text_path += ".txt";
    write_text_file(text_path, report.to_text(head.class_names));
    write_run_manifest(out, "eval", cfg, cfg.value("seed", std::uint64_t{0}), inputs);
    std::fputs(report.to_text(head.class_names).c_str(), stdout);
    return 0;
}

inline int cmd_inspect(const nlohmann::json& cfg) {
    const fs::path out = require_str(cfg, "out", "inspect");
    const fs::path vocab_path = require_str(cfg, "vocab", "inspect");
    const fs::path weights_path = require_str(cfg, "weights", "inspect");
    const fs::path ck_path = require_str(cfg, "checkpoint", "inspect");
    const std::size_t k = cfg.value("k", std::size_t{5});
    const text::Vocabulary vocab = text::load_vocabulary(vocab_path);
    const text::EncoderWeights weights = text::EncoderWeights::load(weights_path);
    const train::PromptCheckpoint ck = train::PromptCheckpoint::load(ck_path);
    if (ck.encoder_fingerprint != weights.fingerprint()) {
        throw ValidationError("checkpoint encoder fingerprint does not match weights");
    }
    const auto table = text::nearest_vocab_words(ck.prompts, weights, vocab, k);
    nlohmann::json j = nlohmann::json::array();
    std::string text;
    for (std::size_t layer = 0; layer < table.size(); ++layer) {
        for (std::size_t t = 0; t < table[layer].size(); ++t) {
            nlohmann::json row;
            row["layer"] = layer;
            row["prompt"] = t;
            row["words"] = table[layer][t];
            j.push_back(row);
            char buf[64];
            std::snprintf(buf, sizeof(buf), "layer %2zu prompt %2zu: ", layer, t);
            text += buf;
            for (const std::string& w : table[layer][t]) {
                text += w + " ";
            }
            text += "\n";
        }
    }
    write_json_file(out, j);
    fs::path text_path = out;
    text_path += ".txt";
    write_text_file(text_path, text);
    write_run_manifest(out, "inspect", cfg, cfg.value("seed", std::uint64_t{0}),
                       {{"vocab", vocab_path}, {"weights", weights_path},
                        {"checkpoint", ck_path}});
    std::fputs(text.c_str(), stdout);
    return 0;
}

inline SyntheticWorldConfig world_config_from(const nlohmann::json& cfg) {
    SyntheticWorldConfig wc;
    if (cfg.contains("world")) {
        wc = SyntheticWorldConfig::from_json(cfg["world"]);
    }
    if (cfg.contains("seed")) {
        wc.seed = cfg["seed"].get<std::uint64_t>();
    }
    return wc;
}

// Synthetic-world training defaults; tighter than the file-driven defaults.
inline train::TrainConfig synthetic_train_defaults() {
    train::TrainConfig tc;
    tc.prompt_length = 4;
    tc.prompt_depth = 2;
    tc.epochs = 30;
    tc.batch_size = 32;
    tc.lr = 0.02;
    tc.warmup_epochs = 3;
    return tc;
}

inline int cmd_synthetic(const nlohmann::json& cfg) {
    const fs::path out = require_str(cfg, "out", "synthetic");
    const SyntheticWorldConfig wc = world_config_from(cfg);
    nlohmann::json tj = synthetic_train_defaults().to_json();
    if (cfg.contains("train")) {
        tj.update(cfg["train"]);
    }
    train::TrainConfig tc = train::TrainConfig::from_json(tj);
    if (!cfg.contains("train") || !cfg["train"].contains("seed")) {
        tc.seed = derive_seed(wc.seed, 1);
    }
    const double tau = cfg.value("tau", 100.0);
    const SyntheticWorld world = make_synthetic_world(wc);
    const SyntheticReport report = run_synthetic(world, tc, tau);
    write_json_file(out, report.to_json());
    fs::path text_path = out;
    text_path += ".txt";
    write_text_file(text_path, report.to_text());
    write_run_manifest(out, "synthetic", cfg, wc.seed, {});
    if (cfg.value("emit_dir", std::string()).size() > 0) {
        const fs::path dir = cfg["emit_dir"].get<std::string>();
        std::error_code ec;
        fs::create_directories(dir, ec);
        text::save_vocabulary(world.vocab, dir / "vocab.json");
        world.weights.save(dir / "weights.json");
        data::save_dataset(world.dataset, dir / "dataset.jsonl");
        eval::save_image_features(world.images_base, dir / "features_base.json");
        eval::save_image_features(world.images_novel, dir / "features_novel.json");
        log_info("synthetic: emitted world artifacts to " + dir.string());
    }
    std::fputs(report.to_text().c_str(), stdout);
    return 0;
}

struct SweepCell {
    std::size_t T = 0;
    std::size_t J = 0;
    train::LossKind loss = train::LossKind::mse;
    train::TargetMode target = train::TargetMode::per_sample;
    std::size_t descriptions = 0;
};

inline int cmd_ablate(const nlohmann::json& cfg) {
    const fs::path out = require_str(cfg, "out", "ablate");
    const SyntheticWorldConfig base_wc = world_config_from(cfg);
    nlohmann::json tj = synthetic_train_defaults().to_json();
    if (cfg.contains("train")) {
        tj.update(cfg["train"]);
    }
    const train::TrainConfig base_tc = train::TrainConfig::from_json(tj);
    const double tau = cfg.value("tau", 100.0);
    const std::size_t seeds = cfg.value("seeds", std::size_t{1});
    const nlohmann::json sweep = cfg.value("sweep", nlohmann::json::object());
    const std::vector<std::size_t> axis_T =
        sweep.value("T", std::vector<std::size_t>{base_tc.prompt_length});
    const std::vector<std::size_t> axis_J =
        sweep.value("J", std::vector<std::size_t>{base_tc.prompt_depth});
    std::vector<train::LossKind> axis_loss;
    for (const std::string& s :
         sweep.value("loss", std::vector<std::string>{loss_name(base_tc.loss)})) {
        axis_loss.push_back(train::parse_loss(s));
    }
    std::vector<train::TargetMode> axis_target;
    for (const std::string& s :
         sweep.value("target", std::vector<std::string>{target_name(base_tc.target)})) {
        axis_target.push_back(train::parse_target(s));
    }
    const std::vector<std::size_t> axis_desc = sweep.value(
        "descriptions", std::vector<std::size_t>{base_wc.descriptions_per_class});
    if (axis_T.empty() || axis_J.empty() || axis_loss.empty() || axis_target.empty() ||
        axis_desc.empty()) {
        throw ValidationError("empty sweep axis");
    }
    if (!sweep.is_object() || sweep.empty()) {
        throw ValidationError("empty sweep: pass at least one axis under \"sweep\"");
    }
    for (std::size_t desc : axis_desc) {
        if (desc < 1 || desc > base_wc.descriptions_per_class) {
            throw ValidationError(
                "descriptions sweep values must lie in [1, descriptions_per_class]");
        }
    }

    std::string csv = "T,J,loss,target,descriptions,seed,base_prompted,novel_prompted,"
                      "novel_plain,final_loss\n";
    std::string text =
        "   T   J        loss      target  desc  seed  base_prompt  novel_prompt  "
        "novel_plain      loss\n";
    std::size_t cell_index = 0;
    // One world per seed; the descriptions axis subsamples its training pool
    // so every cell scores against the same image features.
    std::map<std::uint64_t, SyntheticWorld> worlds;
    for (std::size_t T : axis_T) {
        for (std::size_t J : axis_J) {
            for (train::LossKind loss : axis_loss) {
                for (train::TargetMode target : axis_target) {
                    for (std::size_t desc : axis_desc) {
                        for (std::size_t s = 0; s < seeds; ++s) {
                            const std::uint64_t cell_seed =
                                derive_seed(base_wc.seed, cell_index);
                            ++cell_index;
                            SyntheticWorldConfig wc = base_wc;
                            wc.seed = derive_seed(base_wc.seed, 1000 + s);
                            auto wit = worlds.find(wc.seed);
                            if (wit == worlds.end()) {
                                wit = worlds.emplace(wc.seed, make_synthetic_world(wc)).first;
                            }
                            train::TrainConfig tc = base_tc;
                            tc.prompt_length = T;
                            tc.prompt_depth = J;
                            tc.loss = loss;
                            tc.target = target;
                            tc.seed = cell_seed;
                            const SyntheticReport r =
                                run_synthetic(wit->second, tc, tau, desc);
                            char buf[256];
                            std::snprintf(buf, sizeof(buf), "%zu,%zu,%s,%s,%zu,%zu,%.6f,%.6f,%.6f,%.8g\n",
                                          T, J, loss_name(loss).c_str(),
                                          target_name(target).c_str(), desc, s,
                                          r.base_prompted, r.novel_prompted, r.novel_plain,
                                          r.final_loss);
                            csv += buf;
                            std::snprintf(buf, sizeof(buf),
                                          "%4zu%4zu%12s%12s%6zu%6zu     %8.4f      %8.4f     "
                                          "%8.4f%10.4g\n",
                                          T, J, loss_name(loss).c_str(),
                                          target_name(target).c_str(), desc, s,
                                          r.base_prompted, r.novel_prompted, r.novel_plain,
                                          r.final_loss);
                            text += buf;
                        }
                    }
                }
            }
        }
    }
    write_text_file(out, csv);
    fs::path text_path = out;
    text_path += ".txt";
    write_text_file(text_path, text);
    write_run_manifest(out, "ablate", cfg, base_wc.seed, {});
    std::fputs(text.c_str(), stdout);
    return 0;
}

}  // namespace protext::cli
