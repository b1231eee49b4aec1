#pragma once

// On-disk tensor container: a JSON manifest naming each tensor with its shape
// and byte offset, next to a flat little-endian float64 blob. Used for both
// encoder weight files and training checkpoints.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "protext/common.hpp"
#include "protext/tensor.hpp"

namespace protext::num {

namespace detail {

inline void write_f64_le(std::ofstream& out, const std::vector<double>& values) {
    static_assert(sizeof(double) == 8);
    for (double v : values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        unsigned char bytes[8];
        for (int i = 0; i < 8; ++i) {
            bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        }
        out.write(reinterpret_cast<const char*>(bytes), 8);
    }
}

inline std::vector<double> read_f64_le(std::ifstream& in, std::size_t count) {
    std::vector<double> values(count);
    std::vector<unsigned char> raw(count * 8);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw IoError("tensor blob truncated");
    }
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(raw[i * 8 + b]) << (8 * b);
        }
        double v;
        std::memcpy(&v, &bits, 8);
        values[i] = v;
    }
    return values;
}

}  // namespace detail

class TensorStore {
public:
    // Ordered by name so blob layout and manifests are deterministic.
    using Map = std::map<std::string, Tensor>;

    Map tensors;
    nlohmann::json extra;  // caller metadata stored alongside the tensor table

    bool contains(const std::string& name) const { return tensors.count(name) != 0; }

    const Tensor& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw ValidationError("tensor store missing tensor: " + name);
        }
        return it->second;
    }

    void put(const std::string& name, Tensor t) { tensors.insert_or_assign(name, std::move(t)); }

    // FNV-1a over names, shapes, and raw values; stable across save/load.
    std::string fingerprint() const {
        std::uint64_t h = fnv1a64("", 0);
        for (const auto& [name, t] : tensors) {
            h = fnv1a64(name, h);
            for (std::size_t d : t.shape) {
                const std::uint64_t v = d;
                h = fnv1a64(&v, 8, h);
            }
            h = fnv1a64(t.data.data(), t.data.size() * 8, h);
        }
        return to_hex(h);
    }

    // Writes <path> (JSON manifest) and the blob next to it. The manifest's
    // "data_file" is a bare filename resolved relative to the manifest.
    void save(const std::filesystem::path& manifest_path) const {
        const std::filesystem::path blob_path =
            std::filesystem::path(manifest_path).replace_extension(".bin");
        std::ofstream blob(blob_path, std::ios::binary);
        if (!blob) {
            throw IoError("cannot write tensor blob " + blob_path.string());
        }
        nlohmann::json table = nlohmann::json::object();
        std::size_t offset = 0;
        for (const auto& [name, t] : tensors) {
            nlohmann::json entry;
            entry["shape"] = t.shape;
            entry["data_file"] = blob_path.filename().string();
            entry["offset"] = offset;
            table[name] = entry;
            detail::write_f64_le(blob, t.data);
            offset += t.data.size() * 8;
        }
        blob.close();
        nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
        manifest["tensors"] = table;
        std::ofstream out(manifest_path);
        if (!out) {
            throw IoError("cannot write tensor manifest " + manifest_path.string());
        }
        out << manifest.dump(2) << "\n";
    }

    static TensorStore load(const std::filesystem::path& manifest_path) {
        std::ifstream in(manifest_path);
        if (!in) {
            throw IoError("cannot read tensor manifest " + manifest_path.string());
        }
        nlohmann::json manifest;
        try {
            in >> manifest;
        } catch (const nlohmann::json::exception& e) {
            throw IoError("malformed tensor manifest " + manifest_path.string() + ": " +
                          e.what());
        }
        if (!manifest.contains("tensors") || !manifest["tensors"].is_object()) {
            throw IoError("tensor manifest missing \"tensors\" table: " + manifest_path.string());
        }
        TensorStore store;
        std::map<std::string, std::ifstream> blobs;
        for (const auto& [name, entry] : manifest["tensors"].items()) {
            std::vector<std::size_t> shape;
            std::string data_file;
            std::size_t offset = 0;
            try {
                shape = entry.at("shape").get<std::vector<std::size_t>>();
                data_file = entry.at("data_file").get<std::string>();
                offset = entry.at("offset").get<std::size_t>();
            } catch (const nlohmann::json::exception& e) {
                throw IoError("tensor entry " + name + " malformed: " + e.what());
            }
            const std::filesystem::path blob_path = manifest_path.parent_path() / data_file;
            auto [it, inserted] = blobs.try_emplace(data_file);
            if (inserted) {
                it->second.open(blob_path, std::ios::binary);
                if (!it->second) {
                    throw IoError("cannot read tensor blob " + blob_path.string());
                }
            }
            std::ifstream& blob = it->second;
            blob.seekg(static_cast<std::streamoff>(offset));
            if (!blob) {
                throw IoError("bad offset for tensor " + name);
            }
            Tensor t(shape, detail::read_f64_le(blob, Tensor::element_count(shape)));
            require_finite(t, "loaded tensor " + name);
            store.tensors.emplace(name, std::move(t));
        }
        manifest.erase("tensors");
        store.extra = std::move(manifest);
        return store;
    }
};

}  // namespace protext::num
