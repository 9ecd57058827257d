#pragma once

// Checkpoint archive: 8-byte magic, little-endian u64 header length, a JSON
// header {format_version, kind, config, step, tensors:[{name,shape,offset}]},
// then the tensors as raw little-endian float64 in header order.

#include "m3face/core/autograd.hpp"
#include "m3face/core/error.hpp"
#include "m3face/core/rng.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace m3face {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'M', '3', 'F', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointFormatVersion = 1;

struct TensorEntry {
    ag::Shape shape;
    std::vector<double> data;
};

struct Checkpoint {
    std::string kind;
    nlohmann::json config = nlohmann::json::object();
    long step = 0;
    nlohmann::json extra = nlohmann::json::object();
    std::map<std::string, TensorEntry> tensors;

    template <typename Model>
    void put_model(const Model& model, const std::string& prefix = "") {
        model.visit_params([&](const ag::Param& p) { tensors[prefix + p.name] = {p.shape, p.value}; });
    }

    /// Copies tensors into the model's parameters; every parameter must exist
    /// with a matching shape.
    template <typename Model>
    void get_model(Model& model, const std::string& prefix = "") const {
        model.visit_params([&](ag::Param& p) {
            auto it = tensors.find(prefix + p.name);
            if (it == tensors.end()) throw ValidationError("checkpoint is missing tensor '" + prefix + p.name + "'");
            if (it->second.shape != p.shape)
                throw ValidationError("checkpoint tensor '" + prefix + p.name + "' has shape " +
                                      ag::shape_str(it->second.shape) + ", expected " + ag::shape_str(p.shape));
            p.value = it->second.data;
        });
    }

    bool has_prefix(const std::string& prefix) const {
        auto it = tensors.lower_bound(prefix);
        return it != tensors.end() && it->first.compare(0, prefix.size(), prefix) == 0;
    }
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    nlohmann::json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["kind"] = ck.kind;
    header["config"] = ck.config;
    header["step"] = ck.step;
    header["extra"] = ck.extra;
    auto entries = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ck.tensors) {
        entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.data.size();
    }
    header["tensors"] = entries;
    const std::string hs = header.dump();
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t hlen = hs.size();
    out.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out += hs;
    for (const auto& [name, t] : ck.tensors)
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < sizeof(kCheckpointMagic) + 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw ValidationError("not a checkpoint archive (bad magic)");
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 8, sizeof(hlen));
    if (16 + hlen > bytes.size()) throw ValidationError("checkpoint header truncated");
    const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
    if (header.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw ValidationError("unsupported checkpoint format_version " + header.at("format_version").dump());
    Checkpoint ck;
    ck.kind = header.at("kind").get<std::string>();
    ck.config = header.at("config");
    ck.step = header.at("step").get<long>();
    ck.extra = header.value("extra", nlohmann::json::object());
    const std::size_t base = 16 + hlen;
    for (const auto& e : header.at("tensors")) {
        TensorEntry t;
        t.shape = e.at("shape").get<ag::Shape>();
        const std::size_t n = ag::numel(t.shape);
        const std::size_t off = base + e.at("offset").get<std::size_t>() * sizeof(double);
        if (off + n * sizeof(double) > bytes.size()) throw ValidationError("checkpoint data truncated");
        t.data.resize(n);
        std::memcpy(t.data.data(), bytes.data() + off, n * sizeof(double));
        ck.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
    }
    return ck;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StageError("io", "cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw StageError("io", "cannot write '" + tmp + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    std::filesystem::rename(tmp, path);
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

inline std::string content_hash(const std::string& bytes) { return hex64(fnv1a64(bytes)); }

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    write_file_bytes(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file_bytes(path));
}

inline std::string file_hash(const std::filesystem::path& path) { return content_hash(read_file_bytes(path)); }

}  // namespace m3face
