#pragma once

// Toy two-domain dataset, binary point-cloud files, text manifests, ingestion.
//
// Point file layout, little-endian: magic "RPDPNTS1" (8 bytes), u32 count N,
// then N*3 float32 xyz rows. Manifests are plain text, one token list per
// line: a header (format, domain, class table, sample count) followed by
// `sample <relative-path> <label>` lines.

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rpd/geometry.hpp"

namespace rpd {

enum class Domain { kSource, kTarget };

inline const char* domain_name(Domain d) { return d == Domain::kSource ? "source" : "target"; }

inline Domain parse_domain(const std::string& s) {
    if (s == "source") return Domain::kSource;
    if (s == "target") return Domain::kTarget;
    throw IngestError("unknown domain '" + s + "' (expected source|target)");
}

// ---- toy shapes ----

inline const std::vector<std::string>& toy_class_names() {
    static const std::vector<std::string> names = {"sphere", "box", "cylinder", "cone", "torus"};
    return names;
}

namespace detail {

// Shape samplers draw surface points with per-cloud parameter jitter so each
// class has intra-class variation. All geometry is centered with z up; the
// final normalize_unit_sphere removes absolute scale.

inline Tensor sample_sphere(Rng& rng, int64_t n) {
    double a = rng.uniform(0.6, 1.0), b = rng.uniform(0.6, 1.0), c = rng.uniform(0.6, 1.0);
    Tensor pts(n, 3);
    for (int64_t i = 0; i < n; ++i) {
        double x = rng.normal(), y = rng.normal(), z = rng.normal();
        double r = std::sqrt(x * x + y * y + z * z);
        while (r < 1e-9) {
            x = rng.normal(); y = rng.normal(); z = rng.normal();
            r = std::sqrt(x * x + y * y + z * z);
        }
        pts(i, 0) = a * x / r;
        pts(i, 1) = b * y / r;
        pts(i, 2) = c * z / r;
    }
    return pts;
}

inline Tensor sample_box(Rng& rng, int64_t n) {
    double h[3] = {rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0)};
    // face areas per axis pair (two faces each)
    double area[3] = {h[1] * h[2], h[0] * h[2], h[0] * h[1]};
    double total = area[0] + area[1] + area[2];
    Tensor pts(n, 3);
    for (int64_t i = 0; i < n; ++i) {
        double u = rng.uniform() * total;
        int axis = u < area[0] ? 0 : (u < area[0] + area[1] ? 1 : 2);
        double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        for (int c = 0; c < 3; ++c) pts(i, c) = rng.uniform(-h[c], h[c]);
        pts(i, axis) = sign * h[axis];
    }
    return pts;
}

inline Tensor sample_cylinder(Rng& rng, int64_t n) {
    double r = rng.uniform(0.3, 0.7), hh = rng.uniform(0.5, 1.0);
    double side = 2.0 * kPi * r * 2.0 * hh, caps = 2.0 * kPi * r * r;
    Tensor pts(n, 3);
    for (int64_t i = 0; i < n; ++i) {
        double a = rng.uniform(0.0, 2.0 * kPi);
        if (rng.uniform() * (side + caps) < side) {
            pts(i, 0) = r * std::cos(a);
            pts(i, 1) = r * std::sin(a);
            pts(i, 2) = rng.uniform(-hh, hh);
        } else {
            double rad = r * std::sqrt(rng.uniform());
            pts(i, 0) = rad * std::cos(a);
            pts(i, 1) = rad * std::sin(a);
            pts(i, 2) = rng.uniform() < 0.5 ? -hh : hh;
        }
    }
    return pts;
}

inline Tensor sample_cone(Rng& rng, int64_t n) {
    double r = rng.uniform(0.4, 0.8), h = rng.uniform(0.8, 1.6);
    double slant = kPi * r * std::sqrt(r * r + h * h), base = kPi * r * r;
    Tensor pts(n, 3);
    for (int64_t i = 0; i < n; ++i) {
        double a = rng.uniform(0.0, 2.0 * kPi);
        if (rng.uniform() * (slant + base) < slant) {
            double f = std::sqrt(rng.uniform());  // area-uniform along the unrolled sector
            pts(i, 0) = r * f * std::cos(a);
            pts(i, 1) = r * f * std::sin(a);
            pts(i, 2) = h * (0.5 - f);
        } else {
            double rad = r * std::sqrt(rng.uniform());
            pts(i, 0) = rad * std::cos(a);
            pts(i, 1) = rad * std::sin(a);
            pts(i, 2) = -0.5 * h;
        }
    }
    return pts;
}

inline Tensor sample_torus(Rng& rng, int64_t n) {
    double R = rng.uniform(0.55, 0.8), r = rng.uniform(0.12, 0.3);
    Tensor pts(n, 3);
    for (int64_t i = 0; i < n; ++i) {
        double theta = rng.uniform(0.0, 2.0 * kPi);
        double phi;
        for (;;) {  // reject against the surface-area Jacobian R + r*cos(phi)
            phi = rng.uniform(0.0, 2.0 * kPi);
            if (rng.uniform() * (R + r) <= R + r * std::cos(phi)) break;
        }
        double rad = R + r * std::cos(phi);
        pts(i, 0) = rad * std::cos(theta);
        pts(i, 1) = rad * std::sin(theta);
        pts(i, 2) = r * std::sin(phi);
    }
    return pts;
}

inline Tensor sample_toy_shape(int64_t cls, Rng& rng, int64_t n) {
    switch (cls) {
        case 0: return sample_sphere(rng, n);
        case 1: return sample_box(rng, n);
        case 2: return sample_cylinder(rng, n);
        case 3: return sample_cone(rng, n);
        default: return sample_torus(rng, n);
    }
}

}  // namespace detail

struct ToyDataset {
    Domain domain = Domain::kSource;
    std::vector<std::string> class_names;
    std::vector<PointCloud> clouds;
};

// Deterministic two-domain sampler. Both domains draw shapes with jittered
// parameters and a random z rotation; the target domain additionally gets
// scan-style corruption (jitter sigma 0.02 + 30% hole drop) after
// normalization.
inline ToyDataset generate_toy_dataset(int64_t n_per_class, int64_t classes, Domain domain,
                                       uint64_t seed, int64_t n_points = 256) {
    RPD_CHECK_T(classes >= 2, ConfigError, "generate_toy_dataset: need classes >= 2");
    RPD_CHECK_T(classes <= int64_t(toy_class_names().size()), ConfigError,
                "generate_toy_dataset: toy sampler provides ", toy_class_names().size(),
                " shape classes, got ", classes);
    RPD_CHECK_T(n_per_class >= 1, ConfigError, "generate_toy_dataset: need n_per_class >= 1");
    RPD_CHECK_T(n_points >= 64, ConfigError, "generate_toy_dataset: need n_points >= 64");

    ToyDataset ds;
    ds.domain = domain;
    ds.class_names.assign(toy_class_names().begin(), toy_class_names().begin() + classes);
    for (int64_t c = 0; c < classes; ++c) {
        for (int64_t i = 0; i < n_per_class; ++i) {
            Rng rng(derive_seed(seed, "toy.sample",
                                {uint64_t(domain), uint64_t(c), uint64_t(i)}));
            PointCloud cloud;
            cloud.points = detail::sample_toy_shape(c, rng, n_points);
            cloud.points = rotate_points(cloud.points, rotation_z(rng.uniform(0.0, 2.0 * kPi)));
            std::ostringstream id;
            id << domain_name(domain) << "/" << ds.class_names[size_t(c)] << "/";
            id.fill('0');
            id.width(4);
            id << i;
            cloud.id = id.str();
            cloud.label = c;
            cloud = normalize_unit_sphere(cloud);
            if (domain == Domain::kTarget) {
                AugmentSpec corrupt;
                corrupt.jitter = true;
                corrupt.jitter_sigma = 0.02;
                corrupt.drop_holes = true;
                corrupt.drop_fraction = 0.3;
                corrupt.seed = derive_seed(seed, "toy.corrupt", {uint64_t(c), uint64_t(i)});
                cloud = augment(cloud, corrupt);
            }
            ds.clouds.push_back(std::move(cloud));
        }
    }
    return ds;
}

// ---- point files ----

inline constexpr char kPointMagic[8] = {'R', 'P', 'D', 'P', 'N', 'T', 'S', '1'};

inline void write_point_file(const std::string& path, const Tensor& pts) {
    RPD_CHECK(pts.cols == 3 && pts.rows >= 1, "write_point_file: expected [N,3], got ", pts.rows,
              "x", pts.cols);
    std::ofstream f(path, std::ios::binary);
    RPD_CHECK_T(f.good(), IngestError, "write_point_file: cannot open '", path, "'");
    f.write(kPointMagic, 8);
    uint32_t n = uint32_t(pts.rows);
    f.write(reinterpret_cast<const char*>(&n), 4);
    std::vector<float> row(3);
    for (int64_t i = 0; i < pts.rows; ++i) {
        for (int64_t c = 0; c < 3; ++c) row[size_t(c)] = float(pts(i, c));
        f.write(reinterpret_cast<const char*>(row.data()), 12);
    }
    RPD_CHECK_T(f.good(), IngestError, "write_point_file: write failed for '", path, "'");
}

inline Tensor read_point_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    RPD_CHECK_T(f.good(), IngestError, "read_point_file: cannot open '", path, "'");
    char magic[8];
    f.read(magic, 8);
    RPD_CHECK_T(f.gcount() == 8 && std::memcmp(magic, kPointMagic, 8) == 0, IngestError,
                "read_point_file: bad magic in '", path, "'");
    uint32_t n = 0;
    f.read(reinterpret_cast<char*>(&n), 4);
    RPD_CHECK_T(f.gcount() == 4 && n >= 1 && n <= (1u << 26), IngestError,
                "read_point_file: bad point count in '", path, "'");
    Tensor pts(int64_t(n), 3);
    std::vector<float> buf(size_t(n) * 3);
    f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
    RPD_CHECK_T(f.gcount() == std::streamsize(buf.size() * 4), IngestError,
                "read_point_file: truncated payload in '", path, "'");
    for (size_t i = 0; i < buf.size(); ++i) pts.v[i] = double(buf[i]);
    RPD_CHECK_T(pts.all_finite(), IngestError, "read_point_file: non-finite value in '", path,
                "'");
    return pts;
}

// Whitespace xyz importer: three numeric columns per line, '#' comments and
// blank lines skipped.
inline Tensor read_xyz_file(const std::string& path) {
    std::ifstream f(path);
    RPD_CHECK_T(f.good(), IngestError, "read_xyz_file: cannot open '", path, "'");
    std::vector<double> vals;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        double x, y, z;
        RPD_CHECK_T(bool(ls >> x >> y >> z), IngestError, "read_xyz_file: '", path, "' line ",
                    lineno, ": expected 3 numeric columns");
        std::string extra;
        RPD_CHECK_T(!(ls >> extra), IngestError, "read_xyz_file: '", path, "' line ", lineno,
                    ": expected 3 columns");
        vals.push_back(x);
        vals.push_back(y);
        vals.push_back(z);
    }
    RPD_CHECK_T(!vals.empty(), IngestError, "read_xyz_file: no points in '", path, "'");
    int64_t n = int64_t(vals.size() / 3);
    Tensor pts(n, 3, std::move(vals));
    RPD_CHECK_T(pts.all_finite(), IngestError, "read_xyz_file: non-finite value in '", path, "'");
    return pts;
}

inline Tensor read_points_any(const std::string& path) {
    std::string ext = std::filesystem::path(path).extension().string();
    return ext == ".rpc" ? read_point_file(path) : read_xyz_file(path);
}

// ---- manifests ----

struct ManifestEntry {
    std::string file;  // relative to manifest root
    int64_t label = -1;
};

struct DatasetManifest {
    std::string root;
    Domain domain = Domain::kSource;
    std::vector<std::string> class_names;
    std::vector<ManifestEntry> entries;
};

inline void check_manifest(const DatasetManifest& m) {
    int64_t c = int64_t(m.class_names.size());
    RPD_CHECK_T(c >= 2, IngestError, "manifest: need at least 2 classes, got ", c);
    for (const std::string& name : m.class_names)
        RPD_CHECK_T(!name.empty() && name.find_first_of(" \t") == std::string::npos, IngestError,
                    "manifest: bad class name '", name, "'");
    for (const ManifestEntry& e : m.entries) {
        RPD_CHECK_T(!e.file.empty(), IngestError, "manifest: empty sample path");
        RPD_CHECK_T(e.label >= 0 && e.label < c, IngestError, "manifest: label ", e.label,
                    " for '", e.file, "' outside [0, ", c, ")");
    }
}

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
    check_manifest(m);
    std::ofstream f(path);
    RPD_CHECK_T(f.good(), IngestError, "write_manifest: cannot open '", path, "'");
    f << "rpd-manifest 1\n";
    f << "domain " << domain_name(m.domain) << "\n";
    f << "classes " << m.class_names.size() << "\n";
    for (size_t i = 0; i < m.class_names.size(); ++i)
        f << "class " << i << " " << m.class_names[i] << "\n";
    f << "samples " << m.entries.size() << "\n";
    for (const ManifestEntry& e : m.entries) f << "sample " << e.file << " " << e.label << "\n";
    RPD_CHECK_T(f.good(), IngestError, "write_manifest: write failed for '", path, "'");
}

inline DatasetManifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    RPD_CHECK_T(f.good(), IngestError, "read_manifest: cannot open '", path, "'");
    DatasetManifest m;
    m.root = std::filesystem::path(path).parent_path().string();
    std::string line;
    int64_t lineno = 0;
    auto fail = [&](const std::string& why) -> IngestError {
        return IngestError("read_manifest: '" + path + "' line " + std::to_string(lineno) + ": " +
                           why);
    };
    int64_t declared_classes = -1, declared_samples = -1;
    while (std::getline(f, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        if (key == "rpd-manifest") {
            int v = 0;
            if (!(ls >> v) || v != 1) throw fail("unsupported manifest version");
        } else if (key == "domain") {
            std::string d;
            if (!(ls >> d)) throw fail("missing domain");
            m.domain = parse_domain(d);
        } else if (key == "classes") {
            if (!(ls >> declared_classes)) throw fail("bad class count");
        } else if (key == "class") {
            int64_t idx;
            std::string name;
            if (!(ls >> idx >> name)) throw fail("bad class line");
            if (idx != int64_t(m.class_names.size())) throw fail("class indices out of order");
            m.class_names.push_back(name);
        } else if (key == "samples") {
            if (!(ls >> declared_samples)) throw fail("bad sample count");
        } else if (key == "sample") {
            ManifestEntry e;
            if (!(ls >> e.file >> e.label)) throw fail("bad sample line");
            m.entries.push_back(std::move(e));
        } else {
            throw fail("unknown key '" + key + "'");
        }
    }
    if (declared_classes != int64_t(m.class_names.size()))
        throw IngestError("read_manifest: '" + path + "': class count mismatch");
    if (declared_samples != int64_t(m.entries.size()))
        throw IngestError("read_manifest: '" + path + "': sample count mismatch");
    try {
        check_manifest(m);
    } catch (const IngestError& e) {
        throw IngestError("read_manifest: '" + path + "': " + e.what());
    }
    return m;
}

// Writes <dir>/<class>/<index>.rpc files plus <dir>/manifest.txt; returns the
// manifest path. Point payloads round-trip through float32.
inline std::string write_toy_dataset(const std::string& dir, const ToyDataset& ds) {
    namespace fs = std::filesystem;
    DatasetManifest m;
    m.root = dir;
    m.domain = ds.domain;
    m.class_names = ds.class_names;
    std::vector<int64_t> per_class(ds.class_names.size(), 0);
    for (const PointCloud& cloud : ds.clouds) {
        RPD_CHECK(cloud.label >= 0 && cloud.label < int64_t(ds.class_names.size()),
                  "write_toy_dataset: bad label for '", cloud.id, "'");
        const std::string& cname = ds.class_names[size_t(cloud.label)];
        std::ostringstream rel;
        rel << cname << "/";
        rel.fill('0');
        rel.width(4);
        rel << per_class[size_t(cloud.label)]++ << ".rpc";
        fs::create_directories(fs::path(dir) / cname);
        write_point_file((fs::path(dir) / rel.str()).string(), cloud.points);
        m.entries.push_back({rel.str(), cloud.label});
    }
    std::string mpath = (fs::path(dir) / "manifest.txt").string();
    write_manifest(mpath, m);
    return mpath;
}

// Streams the manifest in listed order: read, resample to n_points, normalize.
// Resampling seeds derive from (seed, sample id) so the result is independent
// of manifest ordering. Ids are "<domain>/<relative path>".
inline std::vector<PointCloud> load_dataset(const DatasetManifest& m, int64_t n_points,
                                            uint64_t seed) {
    namespace fs = std::filesystem;
    check_manifest(m);
    RPD_CHECK(n_points >= 1, "load_dataset: n_points must be >= 1");
    std::vector<PointCloud> out;
    out.reserve(m.entries.size());
    for (const ManifestEntry& e : m.entries) {
        std::string path = (fs::path(m.root) / e.file).string();
        PointCloud cloud;
        cloud.points = read_points_any(path);
        cloud.id = std::string(domain_name(m.domain)) + "/" + e.file;
        cloud.label = e.label;
        cloud = resample_to(cloud, n_points, derive_seed(seed, "load.resample",
                                                         {hash_str(cloud.id)}));
        cloud = normalize_unit_sphere(cloud);
        out.push_back(std::move(cloud));
    }
    return out;
}

}  // namespace rpd
