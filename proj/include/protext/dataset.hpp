#pragma once

// Text-to-text training data: one template-rendered input per class paired
// with many description outputs (LLM-generated, fixture, or handcrafted
// template lists). Persistence is JSONL (one pair per line) plus a sidecar
// header JSON holding the class table and generation metadata.

#include <cctype>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "protext/common.hpp"
#include "protext/llm_client.hpp"

namespace protext::data {

enum class Split { base, novel, all };

inline std::string split_name(Split s) {
    switch (s) {
        case Split::base: return "base";
        case Split::novel: return "novel";
        case Split::all: return "all";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "base") return Split::base;
    if (s == "novel") return Split::novel;
    if (s == "all") return Split::all;
    throw ValidationError("unknown split: " + s);
}

struct ClassRecord {
    int class_id = 0;
    std::string name;
    std::string concept_suffix;  // e.g. ", a type of flower"; empty when absent
    Split split = Split::all;
};

struct QueryTemplate {
    std::string text;  // exactly one {CLS} placeholder
    int id = 0;
};

// The five stock class-description queries.
inline std::vector<QueryTemplate> default_query_templates() {
    return {{"Describe what a(n) {CLS} looks like.", 0},
            {"How can you identify a(n) {CLS}?", 1},
            {"What does a(n) {CLS} look like?", 2},
            {"Describe an image from the internet of a(n) {CLS}.", 3},
            {"A caption of an image of a(n) {CLS}.", 4}};
}

enum class PairSource { llm, handcrafted_80, handcrafted_attribute, fixture };

inline std::string source_name(PairSource s) {
    switch (s) {
        case PairSource::llm: return "llm";
        case PairSource::handcrafted_80: return "handcrafted-80";
        case PairSource::handcrafted_attribute: return "handcrafted-attribute";
        case PairSource::fixture: return "fixture";
    }
    return "?";
}

inline PairSource parse_source(const std::string& s) {
    if (s == "llm") return PairSource::llm;
    if (s == "handcrafted-80") return PairSource::handcrafted_80;
    if (s == "handcrafted-attribute") return PairSource::handcrafted_attribute;
    if (s == "fixture") return PairSource::fixture;
    throw ValidationError("unknown pair source: " + s);
}

struct PromptPair {
    int class_id = 0;
    std::string input_text;
    std::string output_text;
    PairSource source = PairSource::llm;
};

struct DatasetMeta {
    std::size_t outputs_per_query = 0;  // M
    std::size_t query_count = 0;        // N
    std::string generator;              // client tag or "handcrafted"
    std::string input_template;
    std::size_t filtered = 0;  // completions dropped as blank
};

struct PromptDataset {
    std::vector<PromptPair> pairs;
    std::vector<ClassRecord> classes;
    DatasetMeta meta;

    const ClassRecord& class_of(int class_id) const {
        for (const ClassRecord& c : classes) {
            if (c.class_id == class_id) {
                return c;
            }
        }
        throw ValidationError("pair references unknown class_id " + std::to_string(class_id));
    }

    void validate() const {
        std::map<std::string, int> names;
        std::map<int, int> ids;
        for (const ClassRecord& c : classes) {
            if (!names.emplace(c.name, c.class_id).second) {
                throw ValidationError("duplicate class name: " + c.name);
            }
            if (!ids.emplace(c.class_id, 0).second) {
                throw ValidationError("duplicate class_id " + std::to_string(c.class_id));
            }
        }
        std::map<int, const std::string*> seen_input;
        for (const PromptPair& p : pairs) {
            class_of(p.class_id);
            if (p.output_text.empty()) {
                throw ValidationError("empty output_text for class_id " +
                                      std::to_string(p.class_id));
            }
            auto [it, inserted] = seen_input.emplace(p.class_id, &p.input_text);
            if (!inserted && *it->second != p.input_text) {
                throw ValidationError("class_id " + std::to_string(p.class_id) +
                                      " has diverging input_text");
            }
        }
        // Unfiltered pure-LLM datasets carry exactly M*N pairs per class.
        if (meta.generator != "handcrafted" && meta.outputs_per_query > 0 &&
            meta.query_count > 0 && meta.filtered == 0 && !classes.empty()) {
            const std::size_t expect =
                meta.outputs_per_query * meta.query_count * classes.size();
            if (!pairs.empty() && pairs.size() != expect) {
                throw ValidationError("pair count " + std::to_string(pairs.size()) +
                                      " does not match M*N*C = " + std::to_string(expect));
            }
        }
    }

    std::vector<ClassRecord> classes_in(Split s) const {
        if (s == Split::all) {
            return classes;
        }
        std::vector<ClassRecord> out;
        for (const ClassRecord& c : classes) {
            if (c.split == s) {
                out.push_back(c);
            }
        }
        return out;
    }

    // Pairs restricted to the classes of a split.
    std::vector<PromptPair> pairs_in(Split s) const {
        if (s == Split::all) {
            return pairs;
        }
        std::vector<PromptPair> out;
        for (const PromptPair& p : pairs) {
            if (class_of(p.class_id).split == s) {
                out.push_back(p);
            }
        }
        return out;
    }
};

// Substitutes the single {CLS} placeholder; the class's concept suffix rides
// along directly after the name.
inline std::string render_template(const std::string& tmpl, const ClassRecord& cls) {
    const std::string placeholder = "{CLS}";
    const std::size_t at = tmpl.find(placeholder);
    if (at == std::string::npos) {
        throw ValidationError("template missing {CLS}: " + tmpl);
    }
    if (tmpl.find(placeholder, at + 1) != std::string::npos) {
        throw ValidationError("template has multiple {CLS}: " + tmpl);
    }
    std::string out = tmpl;
    out.replace(at, placeholder.size(), cls.name + cls.concept_suffix);
    return out;
}

inline std::vector<std::string> build_inputs(const std::vector<ClassRecord>& classes,
                                             const std::string& tmpl) {
    std::vector<std::string> out;
    out.reserve(classes.size());
    for (const ClassRecord& c : classes) {
        out.push_back(render_template(tmpl, c));
    }
    return out;
}

struct RawOutputs {
    int class_id = 0;
    std::vector<std::string> texts;  // blank completions already dropped
};

struct GenerateOptions {
    std::size_t outputs_per_query = 1;  // M
    std::size_t max_retries = 3;
    std::size_t backoff_ms = 100;  // doubles per retry
};

inline bool is_blank(const std::string& s) {
    for (char c : s) {
        if (!std::isspace(static_cast<unsigned char>(c))) {
            return false;
        }
    }
    return true;
}

// M completions per query per class; blank completions are dropped with a
// warning and counted in `filtered_out`. Transient client failures retry
// with exponential backoff until max_retries is exhausted.
inline std::vector<RawOutputs> generate_outputs(const std::vector<ClassRecord>& classes,
                                                const std::vector<QueryTemplate>& queries,
                                                LlmClient& client, const GenerateOptions& opt,
                                                std::size_t* filtered_out = nullptr) {
    if (opt.outputs_per_query < 1) {
        throw ValidationError("outputs per query (M) must be >= 1");
    }
    if (queries.empty()) {
        throw ValidationError("query template list is empty");
    }
    std::size_t filtered = 0;
    std::vector<RawOutputs> all;
    all.reserve(classes.size());
    for (const ClassRecord& cls : classes) {
        RawOutputs raw;
        raw.class_id = cls.class_id;
        for (const QueryTemplate& q : queries) {
            const std::string prompt = render_template(q.text, cls);
            std::vector<std::string> completions;
            std::size_t attempt = 0;
            for (;;) {
                try {
                    completions =
                        client.complete(prompt, opt.outputs_per_query, cls.class_id, q.id);
                    break;
                } catch (const TransientError& e) {
                    if (attempt >= opt.max_retries) {
                        throw IoError("client exhausted retries for class " + cls.name + ": " +
                                      e.what());
                    }
                    const auto delay =
                        std::chrono::milliseconds(opt.backoff_ms << attempt);
                    log_warn("transient client failure (" + std::string(e.what()) +
                             "), retrying");
                    std::this_thread::sleep_for(delay);
                    ++attempt;
                }
            }
            for (std::string& text : completions) {
                if (is_blank(text)) {
                    log_warn("dropping blank completion for class " + cls.name + ", query " +
                             std::to_string(q.id));
                    ++filtered;
                    continue;
                }
                raw.texts.push_back(std::move(text));
            }
        }
        all.push_back(std::move(raw));
    }
    if (filtered_out != nullptr) {
        *filtered_out = filtered;
    }
    return all;
}

// LLM mode: every output of a class pairs with that class's single input.
inline PromptDataset assemble_dataset(const std::vector<ClassRecord>& classes,
                                      const std::string& input_template,
                                      const std::vector<RawOutputs>& outputs,
                                      PairSource source, DatasetMeta meta) {
    PromptDataset ds;
    ds.classes = classes;
    meta.input_template = input_template;
    ds.meta = std::move(meta);
    std::map<int, std::string> inputs;
    for (const ClassRecord& c : classes) {
        inputs[c.class_id] = render_template(input_template, c);
    }
    for (const RawOutputs& raw : outputs) {
        auto it = inputs.find(raw.class_id);
        if (it == inputs.end()) {
            throw ValidationError("orphan outputs for class_id " +
                                  std::to_string(raw.class_id));
        }
        for (const std::string& text : raw.texts) {
            ds.pairs.push_back({raw.class_id, it->second, text, source});
        }
    }
    ds.validate();
    return ds;
}

// Handcrafted mode: each of the K templates renders with the class name to
// form an output, all paired with the same class-name input (K pairs/class).
inline PromptDataset assemble_handcrafted(const std::vector<ClassRecord>& classes,
                                          const std::string& input_template,
                                          const std::vector<std::string>& templates,
                                          PairSource source) {
    if (templates.empty()) {
        throw ValidationError("handcrafted template list is empty");
    }
    PromptDataset ds;
    ds.classes = classes;
    ds.meta.generator = "handcrafted";
    ds.meta.input_template = input_template;
    ds.meta.query_count = templates.size();
    ds.meta.outputs_per_query = 1;
    for (const ClassRecord& c : classes) {
        const std::string input = render_template(input_template, c);
        for (const std::string& tmpl : templates) {
            ds.pairs.push_back({c.class_id, input, render_template(tmpl, c), source});
        }
    }
    ds.validate();
    return ds;
}

// One template per non-blank line; '#' lines are comments.
inline std::vector<std::string> load_template_list(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read template list " + path.string());
    }
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (is_blank(line) || line[0] == '#') {
            continue;
        }
        out.push_back(line);
    }
    return out;
}

inline std::filesystem::path dataset_header_path(const std::filesystem::path& pairs_path) {
    std::filesystem::path p = pairs_path;
    p += ".header.json";
    return p;
}

inline void save_dataset(const PromptDataset& ds, const std::filesystem::path& path) {
    ds.validate();
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write dataset " + path.string());
    }
    for (const PromptPair& p : ds.pairs) {
        nlohmann::json j = {{"class_id", p.class_id},
                            {"class_name", ds.class_of(p.class_id).name},
                            {"input", p.input_text},
                            {"output", p.output_text},
                            {"source", source_name(p.source)}};
        out << j.dump() << "\n";
    }
    nlohmann::json header;
    header["version"] = kVersion;
    nlohmann::json classes = nlohmann::json::array();
    for (const ClassRecord& c : ds.classes) {
        classes.push_back({{"class_id", c.class_id},
                           {"name", c.name},
                           {"suffix", c.concept_suffix},
                           {"split", split_name(c.split)}});
    }
    header["classes"] = classes;
    header["meta"] = {{"M", ds.meta.outputs_per_query},
                      {"N", ds.meta.query_count},
                      {"generator", ds.meta.generator},
                      {"input_template", ds.meta.input_template},
                      {"filtered", ds.meta.filtered}};
    std::ofstream hout(dataset_header_path(path));
    if (!hout) {
        throw IoError("cannot write dataset header " + dataset_header_path(path).string());
    }
    hout << header.dump(2) << "\n";
}

inline PromptDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream hin(dataset_header_path(path));
    if (!hin) {
        throw IoError("cannot read dataset header " + dataset_header_path(path).string());
    }
    nlohmann::json header;
    try {
        hin >> header;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed dataset header: " + std::string(e.what()));
    }
    PromptDataset ds;
    try {
        for (const auto& c : header.at("classes")) {
            ClassRecord rec;
            rec.class_id = c.at("class_id").get<int>();
            rec.name = c.at("name").get<std::string>();
            rec.concept_suffix = c.value("suffix", "");
            rec.split = parse_split(c.value("split", "all"));
            ds.classes.push_back(std::move(rec));
        }
        const auto& meta = header.at("meta");
        ds.meta.outputs_per_query = meta.value("M", std::size_t{0});
        ds.meta.query_count = meta.value("N", std::size_t{0});
        ds.meta.generator = meta.value("generator", "");
        ds.meta.input_template = meta.value("input_template", "");
        ds.meta.filtered = meta.value("filtered", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw IoError("dataset header missing field: " + std::string(e.what()));
    }
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read dataset " + path.string());
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (is_blank(line)) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            PromptPair p;
            p.class_id = j.at("class_id").get<int>();
            p.input_text = j.at("input").get<std::string>();
            p.output_text = j.at("output").get<std::string>();
            p.source = parse_source(j.at("source").get<std::string>());
            ds.pairs.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("dataset " + path.string() + " line " + std::to_string(line_no) +
                          ": " + e.what());
        }
    }
    ds.validate();
    return ds;
}

}  // namespace protext::data
