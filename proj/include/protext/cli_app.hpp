#pragma once

// Argument parsing for the protext binary. Kept separate from main() so
// tests can drive the full CLI in-process. Config precedence: JSON file via
// --config first, then any explicitly passed flag on top (flag wins).

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "protext/commands.hpp"

namespace protext::cli {

namespace detail {

// Train-loop overrides shared by train, synthetic, and ablate.
struct TrainFlags {
    std::optional<std::size_t> prompt_length, prompt_depth, epochs, batch_size, warmup_epochs;
    std::optional<double> lr, contrastive_temperature;
    std::optional<std::string> schedule, loss, target, init_text;
    std::optional<int> normalize_features;

    void add(CLI::App* sub) {
        sub->add_option("-T,--prompt-length", prompt_length, "learnable prompt count T");
        sub->add_option("-J,--prompt-depth", prompt_depth, "prompted transformer depth J");
        sub->add_option("--epochs", epochs, "training epochs");
        sub->add_option("--batch-size", batch_size, "batch size");
        sub->add_option("--lr", lr, "base learning rate");
        sub->add_option("--warmup-epochs", warmup_epochs, "linear warmup epochs");
        sub->add_option("--schedule", schedule, "lr decay: cosine|constant");
        sub->add_option("--loss", loss, "loss kind: mse|l1|contrastive");
        sub->add_option("--target", target, "target mode: per-sample|ensembled");
        sub->add_option("--contrastive-temperature", contrastive_temperature,
                        "InfoNCE temperature");
        sub->add_option("--init-text", init_text, "layer-0 prompt init text");
        sub->add_option("--normalize-features", normalize_features,
                        "compute loss on normalized features (0|1)");
    }

    void apply(nlohmann::json& cfg) const {
        nlohmann::json& t = cfg["train"];
        if (!t.is_object()) {
            t = nlohmann::json::object();
        }
        if (prompt_length) t["prompt_length"] = *prompt_length;
        if (prompt_depth) t["prompt_depth"] = *prompt_depth;
        if (epochs) t["epochs"] = *epochs;
        if (batch_size) t["batch_size"] = *batch_size;
        if (warmup_epochs) t["warmup_epochs"] = *warmup_epochs;
        if (lr) t["lr"] = *lr;
        if (contrastive_temperature) t["contrastive_temperature"] = *contrastive_temperature;
        if (schedule) t["schedule"] = *schedule;
        if (loss) t["loss"] = *loss;
        if (target) t["target"] = *target;
        if (init_text) t["init_text"] = *init_text;
        if (normalize_features) t["normalize_features"] = *normalize_features != 0;
        if (t.empty()) {
            cfg.erase("train");
        }
    }
};

// Synthetic-world overrides shared by synthetic and ablate.
struct WorldFlags {
    std::optional<std::size_t> num_classes, base_count, novel_count, descriptions,
        images_per_class, words_per_class;
    std::optional<double> sigma, name_correlation;
    std::optional<std::size_t> enc_layers, enc_dmodel, enc_heads, enc_ctx, enc_dim;

    void add(CLI::App* sub) {
        sub->add_option("--num-classes", num_classes, "total classes C");
        sub->add_option("--base-count", base_count, "base split size");
        sub->add_option("--novel-count", novel_count, "novel split size");
        sub->add_option("--descriptions", descriptions, "descriptions per class");
        sub->add_option("--sigma", sigma, "image feature noise level");
        sub->add_option("--images-per-class", images_per_class, "images per class");
        sub->add_option("--name-correlation", name_correlation,
                        "distinctive-word/name embedding correlation rho");
        sub->add_option("--words-per-class", words_per_class, "distinctive words per class");
        sub->add_option("--enc-layers", enc_layers, "toy encoder layers");
        sub->add_option("--enc-dmodel", enc_dmodel, "toy encoder width");
        sub->add_option("--enc-heads", enc_heads, "toy encoder heads");
        sub->add_option("--enc-ctx", enc_ctx, "toy encoder context length");
        sub->add_option("--enc-dim", enc_dim, "toy encoder projection dim");
    }

    void apply(nlohmann::json& cfg) const {
        nlohmann::json& w = cfg["world"];
        if (!w.is_object()) {
            w = nlohmann::json::object();
        }
        if (num_classes) w["num_classes"] = *num_classes;
        if (base_count) w["base_count"] = *base_count;
        if (novel_count) w["novel_count"] = *novel_count;
        if (descriptions) w["descriptions_per_class"] = *descriptions;
        if (sigma) w["sigma"] = *sigma;
        if (images_per_class) w["images_per_class"] = *images_per_class;
        if (name_correlation) w["name_correlation"] = *name_correlation;
        if (words_per_class) w["words_per_class"] = *words_per_class;
        if (enc_layers || enc_dmodel || enc_heads || enc_ctx || enc_dim) {
            nlohmann::json e = w.contains("encoder")
                                   ? w["encoder"]
                                   : SyntheticWorldConfig{}.encoder.to_json();
            if (enc_layers) e["num_layers"] = *enc_layers;
            if (enc_dmodel) e["d_model"] = *enc_dmodel;
            if (enc_heads) e["num_heads"] = *enc_heads;
            if (enc_ctx) e["context_length"] = *enc_ctx;
            if (enc_dim) e["projection_dim"] = *enc_dim;
            w["encoder"] = e;
        }
        if (w.empty()) {
            cfg.erase("world");
        }
    }
};

}  // namespace detail

inline int run_cli(const std::vector<std::string>& argv) {
    CLI::App app{"prompt learning with text-only supervision for a frozen text encoder"};
    app.require_subcommand(1);

    std::optional<std::string> config_path, out, level_flag;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "JSON config file (flags override it)")
        ->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "root RNG seed");
    app.add_option("--out", out, "output artifact path");
    app.add_option("--log-level", level_flag, "debug|info|warn|error|off");

    auto base_cfg = [&]() {
        nlohmann::json cfg =
            config_path ? read_json_file(*config_path) : nlohmann::json::object();
        if (seed) cfg["seed"] = *seed;
        if (out) cfg["out"] = *out;
        if (level_flag) {
            log_level() = parse_log_level(*level_flag);
        } else if (cfg.contains("log_level")) {
            log_level() = parse_log_level(cfg["log_level"].get<std::string>());
        }
        return cfg;
    };

    int rc = 0;

    // curate
    auto* curate = app.add_subcommand("curate", "build a text-to-text dataset");
    std::optional<std::string> cu_classes, cu_fixtures, cu_queries, cu_templates, cu_source,
        cu_input_template;
    std::optional<std::size_t> cu_m, cu_retries, cu_backoff;
    curate->add_option("--classes", cu_classes, "class list JSON")->check(CLI::ExistingFile);
    curate->add_option("--fixtures", cu_fixtures, "fixture directory (offline client)");
    curate->add_option("--queries", cu_queries, "query template file (one per line)");
    curate->add_option("--templates", cu_templates, "handcrafted template file");
    curate->add_option("--source", cu_source, "handcrafted-80|handcrafted-attribute");
    curate->add_option("--input-template", cu_input_template, "class-name input template");
    curate->add_option("-m,--outputs-per-query", cu_m, "completions per query (M)");
    curate->add_option("--retries", cu_retries, "max transient retries");
    curate->add_option("--backoff-ms", cu_backoff, "base retry backoff in ms");
    curate->callback([&]() {
        nlohmann::json cfg = base_cfg();
        if (cu_classes) cfg["classes"] = *cu_classes;
        if (cu_fixtures) cfg["fixtures"] = *cu_fixtures;
        if (cu_queries) cfg["queries"] = *cu_queries;
        if (cu_templates) cfg["templates"] = *cu_templates;
        if (cu_source) cfg["source"] = *cu_source;
        if (cu_input_template) cfg["input_template"] = *cu_input_template;
        if (cu_m) cfg["m"] = *cu_m;
        if (cu_retries) cfg["retries"] = *cu_retries;
        if (cu_backoff) cfg["backoff_ms"] = *cu_backoff;
        rc = cmd_curate(cfg);
    });

    // train
    auto* tr = app.add_subcommand("train", "optimize prompts on a dataset");
    std::optional<std::string> tr_vocab, tr_weights, tr_dataset, tr_split;
    detail::TrainFlags tr_flags;
    tr->add_option("--vocab", tr_vocab, "vocabulary JSON")->check(CLI::ExistingFile);
    tr->add_option("--weights", tr_weights, "encoder weights manifest")
        ->check(CLI::ExistingFile);
    tr->add_option("--dataset", tr_dataset, "dataset JSONL")->check(CLI::ExistingFile);
    tr->add_option("--split", tr_split, "train on: all|base|novel");
    tr_flags.add(tr);
    tr->callback([&]() {
        nlohmann::json cfg = base_cfg();
        if (tr_vocab) cfg["vocab"] = *tr_vocab;
        if (tr_weights) cfg["weights"] = *tr_weights;
        if (tr_dataset) cfg["dataset"] = *tr_dataset;
        if (tr_split) cfg["split"] = *tr_split;
        tr_flags.apply(cfg);
        rc = cmd_train(cfg);
    });

    // eval
    auto* ev = app.add_subcommand("eval", "zero-shot classification report");
    std::optional<std::string> ev_vocab, ev_weights, ev_features, ev_checkpoint, ev_head,
        ev_dataset, ev_tag, ev_input_template;
    std::optional<double> ev_tau;
    ev->add_option("--vocab", ev_vocab, "vocabulary JSON")->check(CLI::ExistingFile);
    ev->add_option("--weights", ev_weights, "encoder weights manifest")
        ->check(CLI::ExistingFile);
    ev->add_option("--features", ev_features, "image feature file (.json or .jsonl)")
        ->check(CLI::ExistingFile);
    ev->add_option("--checkpoint", ev_checkpoint, "prompt checkpoint (prompted head)");
    ev->add_option("--head", ev_head, "plain|ensembled (when no checkpoint)");
    ev->add_option("--dataset", ev_dataset, "dataset JSONL (for ensembled head)");
    ev->add_option("--tau", ev_tau, "softmax temperature");
    ev->add_option("--tag", ev_tag, "dataset tag for the report");
    ev->add_option("--input-template", ev_input_template, "class-name input template");
    ev->callback([&]() {
        nlohmann::json cfg = base_cfg();
        if (ev_vocab) cfg["vocab"] = *ev_vocab;
        if (ev_weights) cfg["weights"] = *ev_weights;
        if (ev_features) cfg["features"] = *ev_features;
        if (ev_checkpoint) cfg["checkpoint"] = *ev_checkpoint;
        if (ev_head) cfg["head"] = *ev_head;
        if (ev_dataset) cfg["dataset"] = *ev_dataset;
        if (ev_tau) cfg["tau"] = *ev_tau;
        if (ev_tag) cfg["tag"] = *ev_tag;
        if (ev_input_template) cfg["input_template"] = *ev_input_template;
        rc = cmd_eval(cfg);
    });

    // inspect
    auto* in = app.add_subcommand("inspect", "nearest vocabulary words per prompt vector");
    std::optional<std::string> in_vocab, in_weights, in_checkpoint;
    std::optional<std::size_t> in_k;
    in->add_option("--vocab", in_vocab, "vocabulary JSON")->check(CLI::ExistingFile);
    in->add_option("--weights", in_weights, "encoder weights manifest")
        ->check(CLI::ExistingFile);
    in->add_option("--checkpoint", in_checkpoint, "prompt checkpoint")
        ->check(CLI::ExistingFile);
    in->add_option("-k,--top-k", in_k, "words per prompt vector");
    in->callback([&]() {
        nlohmann::json cfg = base_cfg();
        if (in_vocab) cfg["vocab"] = *in_vocab;
        if (in_weights) cfg["weights"] = *in_weights;
        if (in_checkpoint) cfg["checkpoint"] = *in_checkpoint;
        if (in_k) cfg["k"] = *in_k;
        rc = cmd_inspect(cfg);
    });

    // synthetic
    auto* sy = app.add_subcommand("synthetic", "end-to-end desk-scale benchmark");
    detail::WorldFlags sy_world;
    detail::TrainFlags sy_train;
    std::optional<double> sy_tau;
    std::optional<std::string> sy_emit;
    sy_world.add(sy);
    sy_train.add(sy);
    sy->add_option("--tau", sy_tau, "softmax temperature");
    sy->add_option("--emit-dir", sy_emit, "also write world artifacts to this directory");
    sy->callback([&]() {
        nlohmann::json cfg = base_cfg();
        sy_world.apply(cfg);
        sy_train.apply(cfg);
        if (sy_tau) cfg["tau"] = *sy_tau;
        if (sy_emit) cfg["emit_dir"] = *sy_emit;
        rc = cmd_synthetic(cfg);
    });

    // ablate
    auto* ab = app.add_subcommand("ablate", "sweep over prompt/loss/target/data axes");
    detail::WorldFlags ab_world;
    detail::TrainFlags ab_train;
    std::optional<double> ab_tau;
    std::optional<std::size_t> ab_seeds;
    std::vector<std::size_t> ab_T, ab_J, ab_desc;
    std::vector<std::string> ab_loss, ab_target;
    ab_world.add(ab);
    ab_train.add(ab);
    ab->add_option("--tau", ab_tau, "softmax temperature");
    ab->add_option("--seeds", ab_seeds, "seeds per cell");
    ab->add_option("--sweep-t", ab_T, "prompt length axis")->delimiter(',');
    ab->add_option("--sweep-j", ab_J, "prompt depth axis")->delimiter(',');
    ab->add_option("--sweep-loss", ab_loss, "loss kind axis")->delimiter(',');
    ab->add_option("--sweep-target", ab_target, "target mode axis")->delimiter(',');
    ab->add_option("--sweep-desc", ab_desc, "descriptions-per-class axis")->delimiter(',');
    ab->callback([&]() {
        nlohmann::json cfg = base_cfg();
        ab_world.apply(cfg);
        ab_train.apply(cfg);
        if (ab_tau) cfg["tau"] = *ab_tau;
        if (ab_seeds) cfg["seeds"] = *ab_seeds;
        nlohmann::json sweep =
            cfg.contains("sweep") ? cfg["sweep"] : nlohmann::json::object();
        if (!ab_T.empty()) sweep["T"] = ab_T;
        if (!ab_J.empty()) sweep["J"] = ab_J;
        if (!ab_loss.empty()) sweep["loss"] = ab_loss;
        if (!ab_target.empty()) sweep["target"] = ab_target;
        if (!ab_desc.empty()) sweep["descriptions"] = ab_desc;
        cfg["sweep"] = sweep;
        rc = cmd_ablate(cfg);
    });

    std::vector<const char*> cargv;
    cargv.reserve(argv.size());
    for (const std::string& a : argv) {
        cargv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(cargv.size()), cargv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return rc;
}

}  // namespace protext::cli
