#pragma once

// Completion clients for curation. Two implementations: an offline fixture
// reader (the default everywhere in tests) and an HTTP JSON client. Both
// answer "give me n completions for this rendered query"; the class and
// query ids route fixture lookups and never leave the process.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "protext/common.hpp"

namespace protext::data {

// Retry-worthy failure (timeouts, 5xx, rate limits).
class TransientError : public IoError {
public:
    using IoError::IoError;
};

class LlmClient {
public:
    virtual ~LlmClient() = default;
    virtual std::vector<std::string> complete(const std::string& prompt, std::size_t n,
                                              int class_id, int query_id) = 0;
    virtual std::string describe() const = 0;
};

// Reads <root>/<class_id>/<query_id>.txt with one completion per line.
// Completions come back verbatim (blank lines included); filtering is the
// caller's job. Fewer lines than requested is an error, extra lines are
// ignored.
class FixtureClient final : public LlmClient {
public:
    explicit FixtureClient(std::filesystem::path root) : root_(std::move(root)) {
        if (!std::filesystem::is_directory(root_)) {
            throw IoError("fixture directory not found: " + root_.string());
        }
    }

    std::vector<std::string> complete(const std::string&, std::size_t n, int class_id,
                                      int query_id) override {
        const std::filesystem::path file =
            root_ / std::to_string(class_id) / (std::to_string(query_id) + ".txt");
        std::ifstream in(file);
        if (!in) {
            throw IoError("fixture missing: " + file.string());
        }
        std::vector<std::string> lines;
        std::string line;
        while (lines.size() < n && std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            lines.push_back(line);
        }
        if (lines.size() < n) {
            throw IoError("fixture " + file.string() + " has " + std::to_string(lines.size()) +
                          " completions, need " + std::to_string(n));
        }
        return lines;
    }

    std::string describe() const override { return "fixture:" + root_.string(); }

private:
    std::filesystem::path root_;
};

// POSTs {"prompt","n","max_tokens","temperature"} and expects
// {"completions": [...]} back. Endpoint and key come from PROTEXT_LLM_URL
// and PROTEXT_LLM_KEY.
struct HttpClientOptions {
    double temperature = 0.99;
    std::size_t max_tokens = 160;
    int timeout_seconds = 60;
};

class HttpClient final : public LlmClient {
public:
    using Options = HttpClientOptions;

    HttpClient(std::string url, std::string key, Options opt = {})
        : url_(std::move(url)), key_(std::move(key)), opt_(opt) {
        const std::size_t scheme = url_.find("://");
        if (scheme == std::string::npos) {
            throw ValidationError("LLM endpoint must include scheme: " + url_);
        }
        const std::size_t slash = url_.find('/', scheme + 3);
        base_ = slash == std::string::npos ? url_ : url_.substr(0, slash);
        path_ = slash == std::string::npos ? "/" : url_.substr(slash);
    }

    static HttpClient from_env() {
        const char* url = std::getenv("PROTEXT_LLM_URL");
        if (url == nullptr || *url == '\0') {
            throw ValidationError("PROTEXT_LLM_URL is not set");
        }
        const char* key = std::getenv("PROTEXT_LLM_KEY");
        return HttpClient(url, key ? key : "");
    }

    std::vector<std::string> complete(const std::string& prompt, std::size_t n, int, int) override;

    std::string describe() const override { return "http:" + url_; }

private:
    std::string url_;
    std::string key_;
    Options opt_;
    std::string base_;
    std::string path_;
};

}  // namespace protext::data

// httplib is heavy; the HTTP path is only compiled where it is used.
#ifdef PROTEXT_ENABLE_HTTP
#include <httplib.h>

namespace protext::data {

inline std::vector<std::string> HttpClient::complete(const std::string& prompt, std::size_t n,
                                                     int, int) {
    httplib::Client cli(base_);
    cli.set_read_timeout(opt_.timeout_seconds, 0);
    cli.set_connection_timeout(opt_.timeout_seconds, 0);
    httplib::Headers headers;
    if (!key_.empty()) {
        headers.emplace("Authorization", "Bearer " + key_);
    }
    nlohmann::json body = {{"prompt", prompt},
                           {"n", n},
                           {"max_tokens", opt_.max_tokens},
                           {"temperature", opt_.temperature}};
    auto res = cli.Post(path_, headers, body.dump(), "application/json");
    if (!res) {
        throw TransientError("LLM endpoint unreachable: " + base_);
    }
    if (res->status == 429 || res->status >= 500) {
        throw TransientError("LLM endpoint returned status " + std::to_string(res->status));
    }
    if (res->status != 200) {
        throw IoError("LLM endpoint returned status " + std::to_string(res->status));
    }
    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(res->body);
        return parsed.at("completions").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed LLM response: " + std::string(e.what()));
    }
}

}  // namespace protext::data
#else

namespace protext::data {

inline std::vector<std::string> HttpClient::complete(const std::string&, std::size_t, int, int) {
    throw ValidationError("HTTP client support was not compiled in (PROTEXT_ENABLE_HTTP)");
}

}  // namespace protext::data
#endif
