#pragma once

// Named-tensor container used for both pretrained imports (f32 payloads) and
// training checkpoints (f64 payloads + optimizer moments + a metadata blob).
//
// Layout, all little-endian:
//   magic "RPDTENS1" (8 bytes)
//   u32 entry count
//   per entry: u16 name_len | name | u8 dtype (0=f32,1=f64,2=raw)
//              | u8 ndim | u64 dims[ndim] | payload
//
// Containers are deterministic: no timestamps, no absolute paths, entries in
// insertion order.

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rpd/encoder.hpp"

namespace rpd {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

enum class Dtype : uint8_t { f32 = 0, f64 = 1, raw = 2 };

struct ContainerEntry {
    std::string name;
    Dtype dtype = Dtype::f32;
    std::vector<uint64_t> dims;
    std::vector<unsigned char> payload;

    uint64_t element_count() const {
        uint64_t n = 1;
        for (uint64_t d : dims) n *= d;
        return n;
    }
};

class TensorContainer {
public:
    void add_f32(const std::string& name, const Tensor& t) {
        ContainerEntry e;
        e.name = name;
        e.dtype = Dtype::f32;
        e.dims = {uint64_t(t.rows), uint64_t(t.cols)};
        e.payload.resize(size_t(t.size()) * 4);
        for (int64_t i = 0; i < t.size(); ++i) {
            float f = float(t.v[size_t(i)]);
            std::memcpy(e.payload.data() + size_t(i) * 4, &f, 4);
        }
        push(std::move(e));
    }

    // Import-style entry with an arbitrary source shape (e.g. conv weights).
    void add_f32(const std::string& name, std::vector<uint64_t> dims,
                 const std::vector<double>& vals) {
        ContainerEntry e;
        e.name = name;
        e.dtype = Dtype::f32;
        e.dims = std::move(dims);
        RPD_CHECK(e.element_count() == vals.size(), "add_f32: dims do not match value count");
        e.payload.resize(vals.size() * 4);
        for (size_t i = 0; i < vals.size(); ++i) {
            float f = float(vals[i]);
            std::memcpy(e.payload.data() + i * 4, &f, 4);
        }
        push(std::move(e));
    }

    void add_f64(const std::string& name, const Tensor& t) {
        ContainerEntry e;
        e.name = name;
        e.dtype = Dtype::f64;
        e.dims = {uint64_t(t.rows), uint64_t(t.cols)};
        e.payload.resize(size_t(t.size()) * 8);
        std::memcpy(e.payload.data(), t.v.data(), e.payload.size());
        push(std::move(e));
    }

    void add_raw(const std::string& name, const std::string& bytes) {
        ContainerEntry e;
        e.name = name;
        e.dtype = Dtype::raw;
        e.dims = {uint64_t(bytes.size())};
        e.payload.assign(bytes.begin(), bytes.end());
        push(std::move(e));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const ContainerEntry& entry(const std::string& name) const {
        auto it = index_.find(name);
        RPD_CHECK_T(it != index_.end(), LoadError, "container has no entry named '", name, "'");
        return entries_[it->second];
    }

    // Decodes a numeric entry as a 2-D tensor: 1-D data becomes a row vector,
    // higher-rank data keeps dims[0] as rows and flattens the rest.
    Tensor tensor2d(const std::string& name) const {
        const ContainerEntry& e = entry(name);
        RPD_CHECK_T(e.dtype != Dtype::raw, LoadError, "entry '", name, "' is not numeric");
        uint64_t n = e.element_count();
        int64_t rows = e.dims.size() >= 2 ? int64_t(e.dims[0]) : 1;
        RPD_CHECK_T(rows > 0 && n % uint64_t(rows) == 0, LoadError, "entry '", name,
                    "' has degenerate dims");
        Tensor t(rows, int64_t(n / uint64_t(rows)));
        if (e.dtype == Dtype::f64) {
            std::memcpy(t.v.data(), e.payload.data(), size_t(n) * 8);
        } else {
            for (uint64_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, e.payload.data() + size_t(i) * 4, 4);
                t.v[size_t(i)] = double(f);
            }
        }
        return t;
    }

    std::string raw(const std::string& name) const {
        const ContainerEntry& e = entry(name);
        RPD_CHECK_T(e.dtype == Dtype::raw, LoadError, "entry '", name, "' is not raw bytes");
        return std::string(e.payload.begin(), e.payload.end());
    }

    const std::vector<ContainerEntry>& entries() const { return entries_; }

    void write(const std::string& path) const {
        std::string buf;
        buf.append("RPDTENS1", 8);
        append_pod(buf, uint32_t(entries_.size()));
        for (const ContainerEntry& e : entries_) {
            RPD_CHECK(e.name.size() <= 0xffff, "entry name too long");
            append_pod(buf, uint16_t(e.name.size()));
            buf.append(e.name);
            append_pod(buf, uint8_t(e.dtype));
            RPD_CHECK(e.dims.size() <= 0xff, "too many dims");
            append_pod(buf, uint8_t(e.dims.size()));
            for (uint64_t d : e.dims) append_pod(buf, d);
            buf.append(reinterpret_cast<const char*>(e.payload.data()), e.payload.size());
        }
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        RPD_CHECK_T(f.good(), LoadError, "cannot open '", path, "' for writing");
        f.write(buf.data(), std::streamsize(buf.size()));
        RPD_CHECK_T(f.good(), LoadError, "short write to '", path, "'");
    }

    static TensorContainer read(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        RPD_CHECK_T(f.good(), LoadError, "cannot open '", path, "'");
        std::stringstream ss;
        ss << f.rdbuf();
        std::string buf = ss.str();

        TensorContainer c;
        size_t off = 0;
        auto need = [&](size_t n, const char* what) {
            RPD_CHECK_T(off + n <= buf.size(), LoadError, "truncated container '", path,
                        "' while reading ", what);
        };
        need(8, "magic");
        RPD_CHECK_T(std::memcmp(buf.data(), "RPDTENS1", 8) == 0, LoadError, "'", path,
                    "' is not a tensor container (bad magic)");
        off = 8;
        uint32_t count = read_pod<uint32_t>(buf, off, need, "entry count");
        for (uint32_t k = 0; k < count; ++k) {
            ContainerEntry e;
            uint16_t nl = read_pod<uint16_t>(buf, off, need, "name length");
            need(nl, "name");
            e.name.assign(buf.data() + off, nl);
            off += nl;
            uint8_t dt = read_pod<uint8_t>(buf, off, need, "dtype");
            RPD_CHECK_T(dt <= 2, LoadError, "entry '", e.name, "': unknown dtype ", int(dt));
            e.dtype = Dtype(dt);
            uint8_t nd = read_pod<uint8_t>(buf, off, need, "ndim");
            for (uint8_t i = 0; i < nd; ++i)
                e.dims.push_back(read_pod<uint64_t>(buf, off, need, "dims"));
            uint64_t bytes = e.element_count();
            if (e.dtype == Dtype::f32) bytes *= 4;
            if (e.dtype == Dtype::f64) bytes *= 8;
            RPD_CHECK_T(bytes < (1ull << 33), LoadError, "entry '", e.name,
                        "' payload implausibly large");
            need(size_t(bytes), "payload");
            e.payload.assign(buf.begin() + std::ptrdiff_t(off),
                             buf.begin() + std::ptrdiff_t(off + bytes));
            off += size_t(bytes);
            c.push(std::move(e));
        }
        RPD_CHECK_T(off == buf.size(), LoadError, "trailing bytes in container '", path, "'");
        return c;
    }

private:
    template <typename T>
    static void append_pod(std::string& buf, T v) {
        char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        buf.append(b, sizeof(T));
    }
    template <typename T, typename NeedFn>
    static T read_pod(const std::string& buf, size_t& off, NeedFn&& need, const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, buf.data() + off, sizeof(T));
        off += sizeof(T);
        return v;
    }
    void push(ContainerEntry e) {
        RPD_CHECK_T(index_.count(e.name) == 0, LoadError, "duplicate entry '", e.name, "'");
        index_[e.name] = entries_.size();
        entries_.push_back(std::move(e));
    }

    std::vector<ContainerEntry> entries_;
    std::map<std::string, size_t> index_;
};

// ---- pretrained import ----

// Map file: one "external_name internal_name" pair per line, '#' comments.
inline std::vector<std::pair<std::string, std::string>> parse_name_map(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::istringstream ls(line);
        std::string ext, internal, extra;
        if (!(ls >> ext)) continue;  // blank
        RPD_CHECK_T(bool(ls >> internal) && !(ls >> extra), LoadError,
                    "name map line ", lineno, ": expected 'external internal'");
        out.emplace_back(ext, internal);
    }
    return out;
}

inline std::vector<std::pair<std::string, std::string>> read_name_map(const std::string& path) {
    std::ifstream f(path);
    RPD_CHECK_T(f.good(), LoadError, "cannot open name map '", path, "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_name_map(ss.str());
}

// Copies mapped tensors into the model. Reshape is allowed whenever element
// counts agree (conv kernels, [1,1,D] class tokens). All problems are
// collected first and reported in one LoadError; on failure no parameter is
// touched.
inline void load_pretrained(ModelState& ms, const TensorContainer& c,
                            const std::vector<std::pair<std::string, std::string>>& map) {
    std::vector<std::string> problems;
    std::vector<std::pair<Param*, Tensor>> staged;
    for (const auto& [ext, internal] : map) {
        if (!ms.params.has(internal)) {
            problems.push_back("unknown internal param '" + internal + "'");
            continue;
        }
        Param& p = ms.params.get(internal);
        if (!c.has(ext)) {
            problems.push_back("missing tensor '" + ext + "'");
            continue;
        }
        const ContainerEntry& e = c.entry(ext);
        if (e.dtype == Dtype::raw || int64_t(e.element_count()) != p.value.size()) {
            problems.push_back("shape mismatch '" + ext + "' (" +
                               std::to_string(e.element_count()) + " elements) -> '" + internal +
                               "' (" + std::to_string(p.value.size()) + ")");
            continue;
        }
        Tensor src = c.tensor2d(ext);
        staged.emplace_back(&p, Tensor(p.value.rows, p.value.cols, std::move(src.v)));
    }
    if (!problems.empty()) {
        std::string msg = "load_pretrained failed:";
        for (const std::string& s : problems) msg += "\n  " + s;
        throw LoadError(msg);
    }
    for (auto& [p, t] : staged) p->value = std::move(t);
}

// ---- checkpoints ----

inline void save_checkpoint(const std::string& path, const ModelState& ms, const Adam* opt,
                            const std::string& meta_json) {
    TensorContainer c;
    for (const Param* p : ms.params.all()) {
        c.add_f64(p->name, p->value);
        if (opt) {
            auto it = opt->slots().find(p->name);
            if (it != opt->slots().end()) {
                c.add_f64(p->name + ".adam_m", it->second.m);
                c.add_f64(p->name + ".adam_v", it->second.v);
                c.add_f64(p->name + ".adam_t", Tensor::scalar(double(it->second.t)));
            }
        }
    }
    c.add_raw("__meta__", meta_json);
    c.write(path);
}

// Restores parameter values (exact shape match required) and, when opt is
// given, optimizer moments. Returns the metadata blob.
inline std::string load_checkpoint(const std::string& path, ModelState& ms, Adam* opt) {
    TensorContainer c = TensorContainer::read(path);
    std::vector<std::string> problems;
    std::vector<std::pair<Param*, Tensor>> staged;
    for (Param* p : ms.params.all()) {
        if (!c.has(p->name)) {
            problems.push_back("missing param '" + p->name + "'");
            continue;
        }
        Tensor t = c.tensor2d(p->name);
        if (!t.same_shape(p->value)) {
            problems.push_back("shape mismatch '" + p->name + "'");
            continue;
        }
        staged.emplace_back(p, std::move(t));
    }
    if (!c.has("__meta__")) problems.push_back("missing '__meta__'");
    if (!problems.empty()) {
        std::string msg = "load_checkpoint('" + path + "') failed:";
        for (const std::string& s : problems) msg += "\n  " + s;
        throw LoadError(msg);
    }
    for (auto& [p, t] : staged) p->value = std::move(t);
    if (opt) {
        opt->slots().clear();
        for (Param* p : ms.params.all()) {
            if (!c.has(p->name + ".adam_m")) continue;
            AdamSlot s;
            s.m = c.tensor2d(p->name + ".adam_m");
            s.v = c.tensor2d(p->name + ".adam_v");
            RPD_CHECK_T(s.m.same_shape(p->value) && s.v.same_shape(p->value), LoadError,
                        "checkpoint moments for '", p->name, "' have wrong shape");
            s.t = int64_t(c.tensor2d(p->name + ".adam_t")(0, 0));
            opt->slots()[p->name] = std::move(s);
        }
    }
    return c.raw("__meta__");
}

}  // namespace rpd
