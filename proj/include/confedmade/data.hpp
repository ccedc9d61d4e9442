#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "confedmade/errors.hpp"
#include "confedmade/linalg.hpp"
#include "confedmade/rng.hpp"

namespace confedmade {

// Disjoint row-index lists selecting the usual three splits out of one
// dataset. Empty lists simply mean the split was not materialized.
struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
    std::vector<std::size_t> test;
};

struct BinaryDataset {
    DenseMatrix x;            // n x D with {0,1} entries
    std::vector<int> labels;  // empty when the source has none
    SplitIndices splits;
    std::string provenance;

    std::size_t n() const { return x.rows; }
    std::size_t dim() const { return x.cols; }

    void validate() const {
        if (!labels.empty() && labels.size() != x.rows) {
            throw ValidationError("dataset: label count does not match row count");
        }
        for (double v : x.values) {
            if (v != 0.0 && v != 1.0) {
                throw ValidationError("dataset: entry " + std::to_string(v) + " is not binary");
            }
        }
        std::vector<bool> seen(x.rows, false);
        std::size_t covered = 0;
        for (const auto* part : {&splits.train, &splits.validation, &splits.test}) {
            for (std::size_t i : *part) {
                if (i >= x.rows) throw ValidationError("dataset: split index out of range");
                if (seen[i]) throw ValidationError("dataset: splits overlap at row " +
                                                   std::to_string(i));
                seen[i] = true;
                ++covered;
            }
        }
        if (covered > x.rows) throw ValidationError("dataset: splits cover more than N rows");
    }
};

// Values are on the unit scale; strictly above the threshold becomes 1.
// Idempotent on data that is already binary.
inline void binarize(DenseMatrix& x, double threshold = 0.5) {
    for (double& v : x.values) v = v > threshold ? 1.0 : 0.0;
}

inline void scale_to_unit(DenseMatrix& x, double denom = 255.0) {
    for (double& v : x.values) v /= denom;
}

inline BinaryDataset concat_datasets(const BinaryDataset& a, const BinaryDataset& b) {
    if (a.n() == 0) return b;
    if (b.n() == 0) return a;
    if (a.dim() != b.dim()) throw DimensionError("concat_datasets: width mismatch");
    BinaryDataset out;
    out.provenance = a.provenance == b.provenance ? a.provenance
                                                  : a.provenance + "+" + b.provenance;
    out.x = DenseMatrix(a.n() + b.n(), a.dim());
    std::copy(a.x.values.begin(), a.x.values.end(), out.x.values.begin());
    std::copy(b.x.values.begin(), b.x.values.end(), out.x.values.begin() + a.x.size());
    const bool has_labels = !a.labels.empty() || !b.labels.empty();
    if (has_labels) {
        out.labels.resize(out.n(), -1);
        for (std::size_t i = 0; i < a.labels.size(); ++i) out.labels[i] = a.labels[i];
        for (std::size_t i = 0; i < b.labels.size(); ++i) out.labels[a.n() + i] = b.labels[i];
    }
    return out;
}

inline BinaryDataset take_rows(const BinaryDataset& ds, const std::vector<std::size_t>& idx) {
    BinaryDataset out;
    out.provenance = ds.provenance;
    out.x = DenseMatrix(idx.size(), ds.dim());
    if (!ds.labels.empty()) out.labels.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= ds.n()) throw ValidationError("take_rows: index out of range");
        std::copy(ds.x.row(idx[i]), ds.x.row(idx[i]) + ds.dim(), out.x.row(i));
        if (!ds.labels.empty()) out.labels[i] = ds.labels[idx[i]];
    }
    return out;
}

inline BinaryDataset filter_by_labels(const BinaryDataset& ds, const std::vector<int>& keep) {
    if (ds.labels.empty()) throw ValidationError("filter_by_labels: dataset has no labels");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.n(); ++i) {
        if (std::find(keep.begin(), keep.end(), ds.labels[i]) != keep.end()) idx.push_back(i);
    }
    return take_rows(ds, idx);
}

// Deterministic shuffled split into consecutive fractions (they must sum to
// at most 1; a final remainder part is implied when they sum below 1).
inline std::vector<BinaryDataset> split_dataset(const BinaryDataset& ds,
                                                const std::vector<double>& fractions,
                                                RngStream& rng) {
    double total = 0.0;
    for (double f : fractions) {
        if (f < 0.0) throw ValidationError("split_dataset: negative fraction");
        total += f;
    }
    if (total > 1.0 + 1e-12) throw ValidationError("split_dataset: fractions exceed 1");
    std::vector<std::size_t> perm(ds.n());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);

    std::vector<BinaryDataset> parts;
    std::size_t start = 0;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        std::size_t count = static_cast<std::size_t>(fractions[i] * static_cast<double>(ds.n()));
        if (i + 1 == fractions.size() && total > 1.0 - 1e-12) count = ds.n() - start;
        count = std::min(count, ds.n() - start);
        parts.push_back(take_rows(
            ds, std::vector<std::size_t>(perm.begin() + start, perm.begin() + start + count)));
        start += count;
    }
    return parts;
}

// --- IDX files --------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

inline std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in,
                                         const std::string& path) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK) throw IoError("zlib init failed");
    std::vector<unsigned char> out;
    out.reserve(in.size() * 4);
    unsigned char buf[1 << 16];
    zs.next_in = const_cast<unsigned char*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = buf;
        zs.avail_out = sizeof(buf);
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw FormatError("gzip decode failed for " + path);
        }
        out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
    }
    inflateEnd(&zs);
    return out;
}

inline std::vector<unsigned char> read_file_maybe_gzip(const std::string& path) {
    auto bytes = read_file_bytes(path);
    if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return gunzip(bytes, path);
    return bytes;
}

inline std::uint32_t be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

}  // namespace detail

struct IdxData {
    std::vector<std::size_t> dims;
    std::vector<unsigned char> bytes;
};

// IDX container of unsigned bytes, transparently gunzipped. Dimension 0 is
// the example count, remaining dimensions are flattened into features.
inline IdxData load_idx(const std::string& path) {
    const auto raw = detail::read_file_maybe_gzip(path);
    if (raw.size() < 4) throw FormatError("idx file too short: " + path);
    if (raw[0] != 0 || raw[1] != 0) throw FormatError("bad idx magic in " + path);
    if (raw[2] != 0x08) throw FormatError("idx dtype is not unsigned byte in " + path);
    const std::size_t ndim = raw[3];
    if (ndim == 0 || ndim > 4) throw FormatError("unsupported idx rank in " + path);
    if (raw.size() < 4 + 4 * ndim) throw FormatError("idx header truncated: " + path);

    IdxData out;
    std::size_t total = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
        const std::size_t d = detail::be32(raw.data() + 4 + 4 * i);
        out.dims.push_back(d);
        total *= d;
    }
    const std::size_t expected = 4 + 4 * ndim + total;
    if (raw.size() != expected) {
        throw FormatError("idx payload size mismatch in " + path + ": expected " +
                          std::to_string(expected) + " bytes, got " +
                          std::to_string(raw.size()) + " (payload starts at offset " +
                          std::to_string(4 + 4 * ndim) + ")");
    }
    out.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(4 + 4 * ndim), raw.end());
    return out;
}

inline DenseMatrix load_idx_matrix(const std::string& path) {
    const IdxData idx = load_idx(path);
    if (idx.dims.size() < 2) throw FormatError("expected rank >= 2 idx file: " + path);
    std::size_t features = 1;
    for (std::size_t i = 1; i < idx.dims.size(); ++i) features *= idx.dims[i];
    DenseMatrix m(idx.dims[0], features);
    for (std::size_t i = 0; i < idx.bytes.size(); ++i) {
        m.values[i] = static_cast<double>(idx.bytes[i]);
    }
    return m;
}

inline std::vector<int> load_idx_labels(const std::string& path) {
    const IdxData idx = load_idx(path);
    if (idx.dims.size() != 1) throw FormatError("expected rank 1 idx file: " + path);
    std::vector<int> labels(idx.bytes.size());
    for (std::size_t i = 0; i < idx.bytes.size(); ++i) labels[i] = idx.bytes[i];
    return labels;
}

inline void save_idx_images(const std::string& path, const DenseMatrix& x, std::size_t side) {
    if (side * side != x.cols) throw DimensionError("save_idx_images: not square images");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    const unsigned char magic[4] = {0, 0, 0x08, 3};
    f.write(reinterpret_cast<const char*>(magic), 4);
    const std::uint32_t dims[3] = {static_cast<std::uint32_t>(x.rows),
                                   static_cast<std::uint32_t>(side),
                                   static_cast<std::uint32_t>(side)};
    for (std::uint32_t d : dims) {
        unsigned char b[4] = {static_cast<unsigned char>(d >> 24),
                              static_cast<unsigned char>(d >> 16),
                              static_cast<unsigned char>(d >> 8), static_cast<unsigned char>(d)};
        f.write(reinterpret_cast<const char*>(b), 4);
    }
    for (double v : x.values) {
        const unsigned char b = v >= 0.5 ? 255 : 0;
        f.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!f) throw IoError("write failed: " + path);
}

inline void save_idx_labels(const std::string& path, const std::vector<int>& labels) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    const unsigned char magic[4] = {0, 0, 0x08, 1};
    f.write(reinterpret_cast<const char*>(magic), 4);
    const std::uint32_t n = static_cast<std::uint32_t>(labels.size());
    unsigned char b[4] = {static_cast<unsigned char>(n >> 24), static_cast<unsigned char>(n >> 16),
                          static_cast<unsigned char>(n >> 8), static_cast<unsigned char>(n)};
    f.write(reinterpret_cast<const char*>(b), 4);
    for (int v : labels) {
        if (v < 0 || v > 255) throw ValidationError("save_idx_labels: label outside byte range");
        const unsigned char c = static_cast<unsigned char>(v);
        f.write(reinterpret_cast<const char*>(&c), 1);
    }
    if (!f) throw IoError("write failed: " + path);
}

inline BinaryDataset load_idx_images_binarized(const std::string& images_path,
                                               const std::string& labels_path,
                                               double threshold = 0.5) {
    BinaryDataset ds;
    ds.provenance = images_path;
    ds.x = load_idx_matrix(images_path);
    scale_to_unit(ds.x);
    binarize(ds.x, threshold);
    if (!labels_path.empty()) ds.labels = load_idx_labels(labels_path);
    ds.validate();
    return ds;
}

// --- CSV --------------------------------------------------------------------

// Comma-separated rows of strictly 0/1 cells, optional single header line.
// With label_column=true the final column is an integer class label (any
// integer, not restricted to 0/1).
inline BinaryDataset load_binary_csv(const std::string& path, bool label_column) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open csv: " + path);
    BinaryDataset ds;
    ds.provenance = path;
    std::vector<double> flat;
    std::size_t cols = 0, line_no = 0;
    bool any_row = false;
    std::string line;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        bool parse_failed = false;
        std::size_t col_no = 0;
        while (std::getline(ss, cell, ',')) {
            ++col_no;
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                parse_failed = true;
            }
            if (!parse_failed && used != cell.size()) parse_failed = true;
            if (parse_failed) break;
            row.push_back(v);
        }
        if (parse_failed) {
            // a single non-numeric first line is a header
            if (!any_row && line_no == 1) continue;
            throw FormatError(path + ":" + std::to_string(line_no) + " col " +
                              std::to_string(col_no) + ": cell '" + cell + "' is not numeric");
        }
        if (!any_row) {
            cols = row.size();
            if (cols < (label_column ? 2u : 1u)) throw FormatError(path + ": too few columns");
            any_row = true;
        } else if (row.size() != cols) {
            throw FormatError(path + ":" + std::to_string(line_no) + ": expected " +
                              std::to_string(cols) + " columns, got " +
                              std::to_string(row.size()));
        }
        if (label_column) {
            ds.labels.push_back(static_cast<int>(row.back()));
            row.pop_back();
        }
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (row[c] != 0.0 && row[c] != 1.0) {
                throw FormatError(path + ":" + std::to_string(line_no) + " col " +
                                  std::to_string(c + 1) + ": value " + std::to_string(row[c]) +
                                  " is not binary");
            }
        }
        flat.insert(flat.end(), row.begin(), row.end());
    }
    const std::size_t width = label_column ? (cols > 0 ? cols - 1 : 0) : cols;
    if (!any_row || width == 0) {
        ds.x = DenseMatrix(0, width);
        return ds;
    }
    ds.x = DenseMatrix(flat.size() / width, width);
    ds.x.values = std::move(flat);
    return ds;
}

// --- synthetic data -----------------------------------------------------------

// iid product-of-Bernoulli rows; per-dimension probabilities drawn once.
inline BinaryDataset synth_binary(std::size_t n, std::size_t d, RngStream& rng) {
    Vector probs(d);
    for (double& p : probs) p = rng.uniform(0.15, 0.85);
    BinaryDataset ds;
    ds.x = DenseMatrix(n, d);
    for (std::size_t s = 0; s < n; ++s) {
        double* row = ds.x.row(s);
        for (std::size_t j = 0; j < d; ++j) row[j] = rng.bernoulli(probs[j]) ? 1.0 : 0.0;
    }
    return ds;
}

// Finite mixture of product-of-Bernoulli components; the true likelihood is
// available in closed form, which gives tests an exact target.
struct BernoulliMixture {
    std::vector<double> weights;
    std::vector<Vector> prototypes;  // per component, per-dimension P(x=1)

    std::size_t dim() const { return prototypes.empty() ? 0 : prototypes[0].size(); }
};

inline BernoulliMixture random_mixture(std::size_t components, std::size_t d, RngStream& rng) {
    if (components == 0 || d == 0) throw ValidationError("random_mixture: empty shape");
    BernoulliMixture mix;
    mix.weights.resize(components);
    double total = 0.0;
    for (double& w : mix.weights) {
        w = rng.uniform(0.5, 1.5);
        total += w;
    }
    for (double& w : mix.weights) w /= total;
    mix.prototypes.resize(components);
    for (auto& proto : mix.prototypes) {
        proto.resize(d);
        for (double& p : proto) p = rng.uniform(0.1, 0.9);
    }
    return mix;
}

inline BinaryDataset sample_mixture(const BernoulliMixture& mix, std::size_t n, RngStream& rng) {
    BinaryDataset ds;
    ds.x = DenseMatrix(n, mix.dim());
    ds.labels.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
        const double u = rng.uniform01();
        double acc = 0.0;
        std::size_t k = mix.weights.size() - 1;
        for (std::size_t i = 0; i < mix.weights.size(); ++i) {
            acc += mix.weights[i];
            if (u < acc) {
                k = i;
                break;
            }
        }
        ds.labels[s] = static_cast<int>(k);
        const Vector& proto = mix.prototypes[k];
        double* row = ds.x.row(s);
        for (std::size_t j = 0; j < mix.dim(); ++j) {
            row[j] = rng.bernoulli(proto[j]) ? 1.0 : 0.0;
        }
    }
    return ds;
}

// Mean of -log p(x) under the mixture, exact per row (log-sum-exp over
// components).
inline double mixture_nll(const BernoulliMixture& mix, const DenseMatrix& x) {
    if (x.cols != mix.dim()) throw DimensionError("mixture_nll: width mismatch");
    double total = 0.0;
    for (std::size_t s = 0; s < x.rows; ++s) {
        const double* row = x.row(s);
        double best = -1e300;
        std::vector<double> logs(mix.weights.size());
        for (std::size_t k = 0; k < mix.weights.size(); ++k) {
            double lp = std::log(mix.weights[k]);
            const Vector& proto = mix.prototypes[k];
            for (std::size_t j = 0; j < x.cols; ++j) {
                lp += row[j] != 0.0 ? std::log(proto[j]) : std::log1p(-proto[j]);
            }
            logs[k] = lp;
            best = std::max(best, lp);
        }
        double sum = 0.0;
        for (double lp : logs) sum += std::exp(lp - best);
        total -= best + std::log(sum);
    }
    return total / static_cast<double>(x.rows);
}

// Class-structured binary images: one fixed random prototype per class,
// drawn on a coarse grid and upsampled so classes have spatial structure,
// plus independent pixel flips. Stands in for a digit corpus when no image
// files are on disk; the generator is fully determined by its seed.
struct SyntheticImageSpec {
    std::size_t side = 14;
    std::size_t classes = 10;
    double flip_noise = 0.08;
    std::uint64_t prototype_seed = 9001;
};

inline std::vector<Vector> class_prototypes(const SyntheticImageSpec& spec) {
    if (spec.side < 2 || spec.side % 2 != 0) {
        throw ConfigError("synthetic images need an even side of at least 2");
    }
    RngStream rng(derive_seed(spec.prototype_seed, "image-prototypes", {}));
    const std::size_t coarse = spec.side / 2;
    std::vector<Vector> protos(spec.classes);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        Vector grid(coarse * coarse);
        for (double& v : grid) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        Vector img(spec.side * spec.side);
        for (std::size_t r = 0; r < spec.side; ++r) {
            for (std::size_t col = 0; col < spec.side; ++col) {
                img[r * spec.side + col] = grid[(r / 2) * coarse + (col / 2)];
            }
        }
        protos[c] = std::move(img);
    }
    return protos;
}

inline BinaryDataset synth_class_images(const SyntheticImageSpec& spec,
                                        const std::vector<std::size_t>& counts_per_class,
                                        RngStream& rng) {
    if (counts_per_class.size() != spec.classes) {
        throw DimensionError("synth_class_images: counts size must equal class count");
    }
    const auto protos = class_prototypes(spec);
    std::size_t total = 0;
    for (std::size_t c : counts_per_class) total += c;
    BinaryDataset ds;
    ds.x = DenseMatrix(total, spec.side * spec.side);
    ds.labels.resize(total);
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        for (std::size_t i = 0; i < counts_per_class[c]; ++i, ++row) {
            ds.labels[row] = static_cast<int>(c);
            double* out = ds.x.row(row);
            const Vector& proto = protos[c];
            for (std::size_t j = 0; j < proto.size(); ++j) {
                const bool flip = rng.bernoulli(spec.flip_noise);
                out[j] = flip ? 1.0 - proto[j] : proto[j];
            }
        }
    }
    return ds;
}

}  // namespace confedmade
