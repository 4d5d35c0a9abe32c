// Copyright (c) 2026, The idalign Authors
// SPDX-License-Identifier: Apache-2.0

#include "idalign/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "idalign/errors.hpp"

namespace idalign {

namespace {

constexpr std::array<char, 8> kMagic{'I', 'D', 'A', 'C', 'K', 'P', 'T', '\0'};

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) {
        throw VersionError("checkpoint truncated");
    }
    return v;
}

std::string get_bytes(std::istream& is, std::uint32_t n) {
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) {
        throw VersionError("checkpoint truncated");
    }
    return s;
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.compare(0, prefix.size(), prefix) == 0; }

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : arrays) {
        if (n == name) {
            return &t;
        }
    }
    return nullptr;
}

Checkpoint make_checkpoint(const ParamList& params, nlohmann::json meta) {
    Checkpoint c;
    c.meta = std::move(meta);
    for (const auto& p : params) {
        c.arrays.emplace_back(p.name, p.var.value());
    }
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw std::runtime_error("cannot write checkpoint " + tmp.string());
        }
        os.write(kMagic.data(), kMagic.size());
        put_u32(os, kCheckpointVersion);
        const std::string meta = ckpt.meta.dump();
        put_u32(os, static_cast<std::uint32_t>(meta.size()));
        os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
        put_u32(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
        for (const auto& [name, t] : ckpt.arrays) {
            put_u32(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            put_u32(os, static_cast<std::uint32_t>(t.rank()));
            for (int d : t.shape()) {
                put_u32(os, static_cast<std::uint32_t>(d));
            }
            os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
        }
        if (!os) {
            throw std::runtime_error("failed writing checkpoint " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open checkpoint " + path.string());
    }
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) {
        throw VersionError("not a checkpoint: " + path.string());
    }
    const std::uint32_t version = get_u32(is);
    if (version != kCheckpointVersion) {
        throw VersionError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint c;
    c.meta = nlohmann::json::parse(get_bytes(is, get_u32(is)));
    const std::uint32_t count = get_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = get_bytes(is, get_u32(is));
        const std::uint32_t rank = get_u32(is);
        Shape shape;
        for (std::uint32_t r = 0; r < rank; ++r) {
            shape.push_back(static_cast<int>(get_u32(is)));
        }
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!is) {
            throw VersionError("checkpoint truncated in array " + name);
        }
        c.arrays.emplace_back(std::move(name), std::move(t));
    }
    return c;
}

void load_into(const Checkpoint& ckpt, const ParamList& params, const std::string& prefix) {
    std::vector<const std::pair<std::string, Tensor>*> selected;
    for (const auto& entry : ckpt.arrays) {
        if (starts_with(entry.first, prefix)) {
            selected.push_back(&entry);
        }
    }
    std::size_t expected = 0;
    for (const auto& p : params) {
        expected += starts_with(p.name, prefix) ? 1 : 0;
    }
    if (selected.size() != expected) {
        throw VersionError("census mismatch: checkpoint has " + std::to_string(selected.size()) +
                           " arrays under '" + prefix + "', model expects " + std::to_string(expected));
    }
    std::size_t k = 0;
    for (const auto& p : params) {
        if (!starts_with(p.name, prefix)) {
            continue;
        }
        const auto& [name, t] = *selected[k++];
        if (name != p.name || t.shape() != p.var.shape()) {
            throw VersionError("census mismatch at '" + p.name + "' " + shape_str(p.var.shape()) + " vs '" + name +
                               "' " + shape_str(t.shape()));
        }
    }
    k = 0;
    for (const auto& p : params) {
        if (starts_with(p.name, prefix)) {
            Var v = p.var;
            v.mutable_value() = selected[k++]->second;
        }
    }
}

Checkpoint merge_checkpoints(const std::vector<const Checkpoint*>& parts, nlohmann::json meta) {
    Checkpoint c;
    c.meta = std::move(meta);
    for (const Checkpoint* p : parts) {
        c.arrays.insert(c.arrays.end(), p->arrays.begin(), p->arrays.end());
    }
    return c;
}

}  // namespace idalign
