#include "m2s/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace m2s {

namespace {
constexpr const char* kMagic = "M2S1";
}

void save_checkpoint(const std::string& path, const ParamRefs<float>& params,
                     std::uint64_t config_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("checkpoint: cannot write '" + path + "'");
    out << kMagic << "\n";
    out << "hash " << hex64(config_hash) << "\n";
    out << "dtype f32\n";
    out << "params " << params.size() << "\n";
    for (const auto& p : params) {
        const Shape4& s = p.tensor.shape();
        out << "p " << p.name << " " << s.n << " " << s.c << " " << s.h << " " << s.w
            << "\n";
    }
    out << "payload\n";
    for (const auto& p : params) {
        const auto& v = p.tensor.value();
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(float)));
    }
    if (!out) throw ValidationError("checkpoint: write failed for '" + path + "'");
}

namespace {

struct ManifestEntry {
    std::string name;
    Shape4 shape;
};

struct Manifest {
    std::uint64_t hash = 0;
    std::vector<ManifestEntry> entries;
    std::streampos payload_start;
};

Manifest read_manifest(std::ifstream& in, const std::string& path) {
    Manifest m;
    std::string line;
    if (!std::getline(in, line) || line != kMagic) {
        throw ValidationError("checkpoint: '" + path + "' is not a " + kMagic + " file");
    }
    std::size_t count = 0;
    bool saw_payload = false;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "hash") {
            std::string hex;
            ls >> hex;
            m.hash = std::stoull(hex, nullptr, 16);
        } else if (tag == "dtype") {
            std::string d;
            ls >> d;
            if (d != "f32") {
                throw ValidationError("checkpoint: unsupported dtype '" + d + "'");
            }
        } else if (tag == "params") {
            ls >> count;
        } else if (tag == "p") {
            ManifestEntry e;
            ls >> e.name >> e.shape.n >> e.shape.c >> e.shape.h >> e.shape.w;
            if (!ls) throw ValidationError("checkpoint: malformed manifest line: " + line);
            m.entries.push_back(std::move(e));
        } else if (tag == "payload") {
            saw_payload = true;
            break;
        } else {
            throw ValidationError("checkpoint: unknown manifest tag '" + tag + "'");
        }
    }
    if (!saw_payload) throw ValidationError("checkpoint: missing payload marker in '" + path + "'");
    if (m.entries.size() != count) {
        throw ValidationError("checkpoint: manifest count " + std::to_string(count) +
                              " != entries " + std::to_string(m.entries.size()));
    }
    m.payload_start = in.tellg();
    return m;
}

}  // namespace

void load_checkpoint(const std::string& path, ParamRefs<float>& params,
                     std::uint64_t expected_hash, bool force) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("checkpoint: cannot open '" + path + "'");
    Manifest m = read_manifest(in, path);
    if (m.hash != expected_hash && !force) {
        throw ValidationError("checkpoint: config hash " + hex64(m.hash) +
                              " does not match the model config hash " +
                              hex64(expected_hash) + " (pass --force to override)");
    }
    if (m.entries.size() != params.size()) {
        throw ValidationError("checkpoint: has " + std::to_string(m.entries.size()) +
                              " parameters, model has " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (m.entries[i].name != params[i].name) {
            throw ValidationError("checkpoint: parameter " + std::to_string(i) + " is '" +
                                  m.entries[i].name + "', model expects '" +
                                  params[i].name + "'");
        }
        if (m.entries[i].shape != params[i].tensor.shape()) {
            throw ValidationError("checkpoint: parameter '" + params[i].name + "' has shape " +
                                  m.entries[i].shape.str() + ", model expects " +
                                  params[i].tensor.shape().str());
        }
    }
    for (auto& p : params) {
        auto& v = p.tensor.mutable_value();
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(float)));
        if (!in) throw ValidationError("checkpoint: truncated payload in '" + path + "'");
    }
}

std::uint64_t checkpoint_config_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("checkpoint: cannot open '" + path + "'");
    return read_manifest(in, path).hash;
}

}  // namespace m2s
