#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dpidm/network.hpp"
#include "dpidm/tensor.hpp"

namespace dpidm {

// Binary checkpoint container. Layout (all little-endian):
//   magic "DPIDMCKP" | u32 version | u64 config_len | config bytes (UTF-8)
//   u64 iteration
//   u32 n_params  { u32 name_len | name | u32 ndim | u64 dims[] | f32 data[] }
//   u32 n_opt     { same encoding }
struct CheckpointContainer {
    static constexpr char kMagic[8] = {'D', 'P', 'I', 'D', 'M', 'C', 'K', 'P'};
    static constexpr uint32_t kVersion = 1;

    uint32_t version = kVersion;
    std::string config_text;
    uint64_t iteration = 0;
    std::vector<std::pair<std::string, Tensor<float>>> params;
    std::vector<std::pair<std::string, Tensor<float>>> opt_state;

    const Tensor<float>* find_param(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace ckpt_detail {

inline void put_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ofstream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }

struct Reader {
    const std::vector<char>& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw CheckpointError("checkpoint truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(buf.data() + pos, n);
        pos += n;
        return s;
    }
};

inline void write_entries(std::ofstream& f,
                          const std::vector<std::pair<std::string, Tensor<float>>>& entries) {
    put_u32(f, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        put_u32(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(f, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) put_u64(f, static_cast<uint64_t>(d));
        f.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
}

inline std::vector<std::pair<std::string, Tensor<float>>> read_entries(Reader& r) {
    const uint32_t n = r.u32();
    std::vector<std::pair<std::string, Tensor<float>>> out;
    out.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        const uint32_t name_len = r.u32();
        std::string name = r.str(name_len);
        const uint32_t ndim = r.u32();
        if (ndim > 8) throw CheckpointError("checkpoint entry '" + name + "' has absurd rank");
        Shape shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int64_t>(r.u64());
        Tensor<float> t(shape);
        r.need(t.data.size() * sizeof(float));
        std::memcpy(t.data.data(), r.buf.data() + r.pos, t.data.size() * sizeof(float));
        r.pos += t.data.size() * sizeof(float);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace ckpt_detail

// Atomic write: temp file in the same directory, then rename.
inline void save_checkpoint(const std::filesystem::path& path, const CheckpointContainer& c) {
    namespace fs = std::filesystem;
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("cannot open for writing: " + tmp.string());
        f.write(CheckpointContainer::kMagic, 8);
        ckpt_detail::put_u32(f, c.version);
        ckpt_detail::put_u64(f, static_cast<uint64_t>(c.config_text.size()));
        f.write(c.config_text.data(), static_cast<std::streamsize>(c.config_text.size()));
        ckpt_detail::put_u64(f, c.iteration);
        ckpt_detail::write_entries(f, c.params);
        ckpt_detail::write_entries(f, c.opt_state);
        if (!f) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place: " + path.string());
}

inline CheckpointContainer load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint: " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    ckpt_detail::Reader r{buf};
    const std::string magic = r.str(8);
    if (std::memcmp(magic.data(), CheckpointContainer::kMagic, 8) != 0)
        throw CheckpointError("bad checkpoint magic in " + path.string());
    CheckpointContainer c;
    c.version = r.u32();
    if (c.version != CheckpointContainer::kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version));
    const uint64_t cfg_len = r.u64();
    c.config_text = r.str(cfg_len);
    c.iteration = r.u64();
    c.params = ckpt_detail::read_entries(r);
    c.opt_state = ckpt_detail::read_entries(r);
    return c;
}

// Copies container parameters into the model. Every model parameter must be
// present with matching dims; the first mismatch aborts (model untouched).
inline void load_into_model(const CheckpointContainer& c, Model<float>& model) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& [n, t] : c.params) by_name[n] = &t;
    for (const auto& name : model.params.order()) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw CheckpointError("incompatible checkpoint: missing parameter '" + name + "'");
        if (it->second->shape != model.params.at(name).shape)
            throw CheckpointError("incompatible checkpoint: parameter '" + name + "' has dims " +
                                  shape_str(it->second->shape) + ", model expects " +
                                  shape_str(model.params.at(name).shape));
    }
    for (const auto& name : model.params.order()) model.params.at(name) = *by_name.at(name);
}

}  // namespace dpidm
