#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "evocomp/compressor.hpp"
#include "evocomp/core.hpp"
#include "evocomp/grouping.hpp"

namespace evocomp::io {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Little-endian primitives

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffU));
}

inline void put_f32(std::string& out, double v) {
    put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

class Reader {
public:
    Reader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    bool done() const { return pos_ == bytes_.size(); }

    std::string take(std::size_t count) {
        if (bytes_.size() - pos_ < count) throw Error(Errc::format, what_ + ": truncated at byte " + std::to_string(pos_));
        std::string s = bytes_.substr(pos_, count);
        pos_ += count;
        return s;
    }

    std::uint32_t u32() {
        const std::string s = take(4);
        std::uint32_t v = 0;
        for (int b = 3; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(b)]);
        return v;
    }

    double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }

private:
    const std::string& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io, "cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::io, "write failed for '" + path + "'");
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string checksum(const std::string& bytes) { return "fnv1a64:" + hex64(fnv1a64(bytes)); }

// ---------------------------------------------------------------------------
// "EVC1" sample container

inline void append_record(std::string& out, const Sample& s) {
    out += "EVC1";
    put_u32(out, static_cast<std::uint32_t>(s.n()));
    put_u32(out, static_cast<std::uint32_t>(s.m()));
    put_u32(out, static_cast<std::uint32_t>(s.d()));
    put_u32(out, static_cast<std::uint32_t>(s.id.size()));
    out += s.id;
    for (double v : s.visual.data) put_f32(out, v);
    for (double v : s.text.data) put_f32(out, v);
}

inline std::string encode_samples(const std::vector<Sample>& samples) {
    std::string out;
    for (const auto& s : samples) append_record(out, s);
    return out;
}

inline std::vector<Sample> decode_samples(const std::string& bytes, const std::string& what = "dataset") {
    Reader r(bytes, what);
    std::vector<Sample> out;
    while (!r.done()) {
        if (r.take(4) != "EVC1") throw Error(Errc::format, what + ": bad record magic");
        Sample s;
        const auto n = r.u32(), m = r.u32(), d = r.u32(), idlen = r.u32();
        s.id = r.take(idlen);
        s.visual = Matrix(n, d);
        for (auto& v : s.visual.data) v = r.f32();
        s.text = Matrix(m, d);
        for (auto& v : s.text.data) v = r.f32();
        out.push_back(std::move(s));
    }
    return out;
}

inline std::string manifest_path(const std::string& container) { return container + ".json"; }

/// Writes the container and its JSON sidecar (record count, checksum, plus `extra` fields).
inline void write_dataset(const std::string& path, const std::vector<Sample>& samples, const json& extra = json::object()) {
    const std::string bytes = encode_samples(samples);
    write_file(path, bytes);
    json m = extra;
    m["format"] = "EVC1";
    m["records"] = samples.size();
    m["checksum"] = checksum(bytes);
    write_file(manifest_path(path), m.dump(2) + "\n");
}

inline json read_manifest(const std::string& container) {
    try {
        return json::parse(read_file(manifest_path(container)));
    } catch (const json::exception& e) {
        throw Error(Errc::format, "manifest for '" + container + "': " + e.what());
    }
}

/// Reads a container; when a sidecar exists its record count and checksum must match.
inline std::vector<Sample> read_dataset(const std::string& path) {
    const std::string bytes = read_file(path);
    auto samples = decode_samples(bytes, path);
    std::ifstream probe(manifest_path(path));
    if (probe) {
        const json m = read_manifest(path);
        if (m.value("records", samples.size()) != samples.size())
            throw Error(Errc::format, path + ": record count differs from manifest");
        if (m.contains("checksum") && m["checksum"].get<std::string>() != checksum(bytes))
            throw Error(Errc::format, path + ": checksum differs from manifest");
    }
    return samples;
}

inline AnchorSet read_anchors(const std::string& path) {
    auto recs = read_dataset(path);
    if (recs.size() != 1) throw Error(Errc::format, path + ": anchor file must hold exactly one record");
    AnchorSet a{std::move(recs.front().visual)};
    validate_anchors(a);
    return a;
}

inline void write_anchors(const std::string& path, const AnchorSet& a, const json& extra = json::object()) {
    Sample s;
    s.id = "anchors";
    s.visual = a.anchors;
    s.text = Matrix(0, a.anchors.cols);
    write_dataset(path, {s}, extra);
}

// ---------------------------------------------------------------------------
// LabelRecord JSON lines

inline json to_json(const LabelRecord& r) {
    json mask = json::array();
    for (auto b : r.mask.bits) mask.push_back(static_cast<int>(b));
    return json{{"sample_id", r.sample_id}, {"mask", mask},       {"loss", r.loss},
                {"partition_digest", r.partition_digest}, {"scorer_id", r.scorer_id}, {"seed", r.seed}};
}

inline LabelRecord label_from_json(const json& j) {
    LabelRecord r;
    try {
        r.sample_id = j.at("sample_id").get<std::string>();
        for (const auto& b : j.at("mask")) {
            const int v = b.get<int>();
            if (v != 0 && v != 1) throw Error(Errc::format, "mask entries must be 0 or 1");
            r.mask.bits.push_back(static_cast<std::uint8_t>(v));
        }
        r.loss = j.at("loss").get<double>();
        r.partition_digest = j.at("partition_digest").get<std::string>();
        r.scorer_id = j.at("scorer_id").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw Error(Errc::format, std::string("label record: ") + e.what());
    }
    return r;
}

inline std::string encode_labels(const std::vector<LabelRecord>& recs) {
    std::string out;
    for (const auto& r : recs) out += to_json(r).dump() + "\n";
    return out;
}

inline std::vector<LabelRecord> decode_labels(const std::string& text) {
    std::vector<LabelRecord> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw Error(Errc::format, std::string("label line: ") + e.what());
        }
        out.push_back(label_from_json(j));
    }
    return out;
}

inline void write_labels(const std::string& path, const std::vector<LabelRecord>& recs) {
    write_file(path, encode_labels(recs));
}

inline std::vector<LabelRecord> read_labels(const std::string& path) { return decode_labels(read_file(path)); }

// ---------------------------------------------------------------------------
// Compressor configuration and "EVP1" parameter files

inline json to_json(const GhmConfig& g) {
    json j{{"momentum", g.momentum}};
    if (const auto* u = std::get_if<GhmUnitRegion>(&g.mode)) {
        j["mode"] = "unit_region";
        j["bins"] = u->bins;
    } else {
        j["mode"] = "exact";
        j["epsilon"] = std::get<GhmExact>(g.mode).epsilon;
    }
    return j;
}

inline GhmConfig ghm_from_json(const json& j) {
    GhmConfig g;
    g.momentum = j.value("momentum", 0.0);
    if (j.value("mode", std::string("unit_region")) == "exact")
        g.mode = GhmExact{j.value("epsilon", 0.01)};
    else
        g.mode = GhmUnitRegion{j.value("bins", std::size_t{100})};
    return g;
}

inline json to_json(const CompressorConfig& c) {
    return json{{"d_model", c.d_model},
                {"heads", c.heads},
                {"mlp_ratio", c.mlp_ratio},
                {"use_positions", c.use_positions},
                {"epochs", c.epochs},
                {"lr0", c.lr0},
                {"schedule", "cosine"},
                {"batch_size", c.batch_size},
                {"alpha", c.alpha},
                {"ghm", to_json(c.ghm)},
                {"loss", std::string(loss_kind_name(c.loss))},
                {"focal_gamma", c.focal_gamma},
                {"focal_alpha", c.focal_alpha},
                {"no_text", c.no_text},
                {"init_std", c.init_std},
                {"val_fraction", c.val_fraction},
                {"seed", c.seed}};
}

inline CompressorConfig compressor_config_from_json(const json& j) {
    CompressorConfig c;
    try {
        c.d_model = j.value("d_model", c.d_model);
        c.heads = j.value("heads", c.heads);
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
        c.use_positions = j.value("use_positions", c.use_positions);
        c.epochs = j.value("epochs", c.epochs);
        c.lr0 = j.value("lr0", c.lr0);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.alpha = j.value("alpha", c.alpha);
        if (j.contains("ghm")) c.ghm = ghm_from_json(j["ghm"]);
        c.loss = parse_loss_kind(j.value("loss", std::string("ghm+cs")));
        c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
        c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
        c.no_text = j.value("no_text", c.no_text);
        c.init_std = j.value("init_std", c.init_std);
        c.val_fraction = j.value("val_fraction", c.val_fraction);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw Error(Errc::format, std::string("compressor config: ") + e.what());
    }
    return c;
}

inline std::string encode_params(const CompressorParams& p, const CompressorConfig& cfg) {
    std::string out = "EVP1";
    const std::string header = to_json(cfg).dump();
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    std::uint32_t count = 0;
    p.for_each([&](std::string_view, const Matrix&) { ++count; });
    put_u32(out, count);
    p.for_each([&](std::string_view name, const Matrix& m) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_u32(out, 2);
        put_u32(out, static_cast<std::uint32_t>(m.rows));
        put_u32(out, static_cast<std::uint32_t>(m.cols));
        for (double v : m.data) put_f32(out, v);
    });
    return out;
}

struct ParamFile {
    CompressorConfig config;
    CompressorParams params;
};

inline ParamFile decode_params(const std::string& bytes, const std::string& what = "parameter file") {
    Reader r(bytes, what);
    if (r.take(4) != "EVP1") throw Error(Errc::format, what + ": bad magic");
    ParamFile f;
    try {
        f.config = compressor_config_from_json(json::parse(r.take(r.u32())));
    } catch (const json::exception& e) {
        throw Error(Errc::format, what + ": header: " + e.what());
    }
    f.params = shaped_params(f.config);
    std::map<std::string, Matrix> tensors;
    const auto count = r.u32();
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::string name = r.take(r.u32());
        const auto rank = r.u32();
        std::vector<std::uint32_t> dims(rank);
        for (auto& dim : dims) dim = r.u32();
        std::size_t rows = 1, cols = 1;
        if (rank == 1) cols = dims[0];
        if (rank == 2) rows = dims[0], cols = dims[1];
        if (rank > 2) throw Error(Errc::format, what + ": tensor '" + name + "' has rank > 2");
        Matrix m(rows, cols);
        for (auto& v : m.data) v = r.f32();
        tensors[name] = std::move(m);
    }
    if (!r.done()) throw Error(Errc::format, what + ": trailing bytes");
    f.params.for_each([&](std::string_view name, Matrix& m) {
        const auto it = tensors.find(std::string(name));
        if (it == tensors.end()) throw Error(Errc::format, what + ": missing tensor '" + std::string(name) + "'");
        if (it->second.rows != m.rows || it->second.cols != m.cols)
            throw Error(Errc::dimension_mismatch, what + ": tensor '" + std::string(name) + "' has the wrong shape");
        m = it->second;
    });
    return f;
}

inline void write_params(const std::string& path, const CompressorParams& p, const CompressorConfig& cfg) {
    write_file(path, encode_params(p, cfg));
}

inline ParamFile read_params(const std::string& path) { return decode_params(read_file(path), path); }

/// Checksum of the serialised 32-bit parameter arrays (config excluded).
inline std::string params_checksum(const CompressorParams& p) {
    std::string bytes;
    p.for_each([&](std::string_view name, const Matrix& m) {
        bytes += name;
        for (double v : m.data) put_f32(bytes, v);
    });
    return checksum(bytes);
}

}  // namespace evocomp::io
