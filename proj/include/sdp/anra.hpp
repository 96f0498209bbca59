#pragma once

// Adaptive noise reduction and augmentation: exact-duplicate removal, IQR
// outlier clipping, z-normalization and minority-class interpolation
// oversampling.

#include <sdp/dataset.hpp>
#include <sdp/error.hpp>
#include <sdp/rng.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <set>
#include <utility>
#include <vector>

namespace sdp {

struct AnraConfig {
    bool dedup = true;
    double iqr_multiplier = 3.0;
    int knn_k = 5;
    double target_ratio = 1.0;
    double jitter_sigma = 0.01;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (!(iqr_multiplier > 0.0))
            throw ConfigError("anra.iqr_multiplier must be > 0");
        if (knn_k < 1)
            throw ConfigError("anra.knn_k must be >= 1");
        if (!(target_ratio > 0.0 && target_ratio <= 1.0))
            throw ConfigError("anra.target_ratio must be in (0, 1]");
        if (!(jitter_sigma >= 0.0))
            throw ConfigError("anra.jitter_sigma must be >= 0");
    }
};

struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;
    std::vector<bool> constant;

    std::size_t arity() const noexcept { return mean.size(); }

    void normalize_in_place(std::span<double> x) const
    {
        for (std::size_t f = 0; f < x.size(); ++f)
            x[f] = constant[f] ? 0.0 : (x[f] - mean[f]) / std[f];
    }

    bool operator==(const NormStats&) const = default;
};

struct ClipBounds {
    std::vector<double> lower;
    std::vector<double> upper;
};

struct Provenance {
    std::size_t rows_dropped_dup = 0;
    std::size_t rows_clipped = 0;
    std::size_t synthetic_added = 0;
};

struct PreprocessedDataset {
    Dataset data;
    NormStats norm;
    ClipBounds bounds;
    Provenance provenance;
};

struct DedupResult {
    Dataset data;
    std::size_t dropped = 0;
};

/// Keeps the first occurrence of each bitwise-identical (features, label) tuple.
inline DedupResult deduplicate(const Dataset& ds)
{
    DedupResult out{Dataset{ds.schema, {}}, 0};
    std::set<std::vector<std::uint64_t>> seen;
    for (const auto& r : ds.records) {
        std::vector<std::uint64_t> key;
        key.reserve(r.features.size() + 1);
        for (double v : r.features)
            key.push_back(std::bit_cast<std::uint64_t>(v));
        key.push_back(static_cast<std::uint64_t>(r.label));
        if (seen.insert(std::move(key)).second)
            out.data.records.push_back(r);
        else
            ++out.dropped;
    }
    return out;
}

/// Quantile by linear interpolation between order statistics at q*(n-1).
inline double quantile_sorted(std::span<const double> sorted, double q)
{
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct ClipResult {
    Dataset data;
    ClipBounds bounds;
    std::vector<std::size_t> clipped_per_feature;
    std::size_t rows_clipped = 0;
};

inline ClipBounds iqr_bounds(const Dataset& ds, double iqr_multiplier)
{
    ClipBounds b;
    std::vector<double> column(ds.size());
    for (std::size_t f = 0; f < ds.arity(); ++f) {
        for (std::size_t i = 0; i < ds.size(); ++i)
            column[i] = ds.records[i].features[f];
        std::sort(column.begin(), column.end());
        const double q1 = quantile_sorted(column, 0.25);
        const double q3 = quantile_sorted(column, 0.75);
        const double iqr = q3 - q1;
        b.lower.push_back(q1 - iqr_multiplier * iqr);
        b.upper.push_back(q3 + iqr_multiplier * iqr);
    }
    return b;
}

inline ClipResult apply_clip(const Dataset& ds, const ClipBounds& bounds)
{
    ClipResult out{ds, bounds, std::vector<std::size_t>(ds.arity(), 0), 0};
    for (auto& r : out.data.records) {
        bool touched = false;
        for (std::size_t f = 0; f < r.features.size(); ++f) {
            const double v = std::clamp(r.features[f], bounds.lower[f], bounds.upper[f]);
            if (v != r.features[f]) {
                r.features[f] = v;
                ++out.clipped_per_feature[f];
                touched = true;
            }
        }
        out.rows_clipped += touched ? 1 : 0;
    }
    return out;
}

inline ClipResult clip_outliers(const Dataset& ds, double iqr_multiplier)
{
    if (ds.records.empty())
        throw DataError("clip_outliers: dataset is empty");
    return apply_clip(ds, iqr_bounds(ds, iqr_multiplier));
}

inline NormStats fit_normalize(const Dataset& train)
{
    const auto summary = describe(train);
    NormStats ns;
    for (const auto& st : summary.features) {
        ns.mean.push_back(st.mean);
        ns.std.push_back(st.std);
        ns.constant.push_back(st.std == 0.0);
    }
    return ns;
}

inline Dataset apply_normalize(const Dataset& ds, const NormStats& norm)
{
    if (ds.arity() != norm.arity())
        throw DataError("apply_normalize: dataset arity " + std::to_string(ds.arity()) +
                        " does not match normalization arity " + std::to_string(norm.arity()));
    Dataset out = ds;
    for (auto& r : out.records)
        norm.normalize_in_place(r.features);
    return out;
}

struct AugmentResult {
    Dataset data;
    std::size_t synthetic_added = 0;
};

namespace detail {

/// Up to k nearest other members (Euclidean), distance then index ascending.
inline std::vector<std::vector<std::size_t>> nearest_neighbours(
    const std::vector<const MetricRecord*>& pts, std::size_t k)
{
    std::vector<std::vector<std::size_t>> out(pts.size());
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        dist.clear();
        for (std::size_t j = 0; j < pts.size(); ++j) {
            if (j == i)
                continue;
            double d2 = 0.0;
            for (std::size_t f = 0; f < pts[i]->features.size(); ++f) {
                const double d = pts[i]->features[f] - pts[j]->features[f];
                d2 += d * d;
            }
            dist.emplace_back(d2, j);
        }
        const auto kk = std::min(k, dist.size());
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
        for (std::size_t n = 0; n < kk; ++n)
            out[i].push_back(dist[n].second);
    }
    return out;
}

} // namespace detail

/// Adds synthetic minority records until minority >= ceil(target_ratio * majority).
/// Each one interpolates a random real minority record toward one of its k
/// nearest real minority neighbours; a lone minority record is jittered instead.
inline AugmentResult augment_minority(const Dataset& ds, const AnraConfig& config)
{
    config.validate();
    const auto counts = ds.class_counts();
    if (counts[0] == 0 || counts[1] == 0)
        throw DataError("augment_minority: both classes must be present");

    AugmentResult out{ds, 0};
    const int minority = counts[1] < counts[0] ? 1 : 0;
    const std::size_t n_min = counts[static_cast<std::size_t>(minority)];
    const std::size_t n_maj = counts[static_cast<std::size_t>(1 - minority)];
    const auto wanted = static_cast<std::size_t>(
        std::ceil(config.target_ratio * static_cast<double>(n_maj) - 1e-9));
    if (n_min >= wanted)
        return out;
    const std::size_t needed = wanted - n_min;

    std::vector<const MetricRecord*> pool;
    for (const auto& r : ds.records)
        if (r.label == minority && r.origin == Origin::real)
            pool.push_back(&r);
    if (pool.empty())
        for (const auto& r : ds.records)
            if (r.label == minority)
                pool.push_back(&r);

    Rng rng(derive_seed(config.seed, 0xa097));
    out.data.records.reserve(ds.size() + needed);
    if (pool.size() == 1) {
        for (std::size_t s = 0; s < needed; ++s) {
            MetricRecord rec{pool.front()->features, minority, Origin::synthetic};
            for (double& v : rec.features)
                v += config.jitter_sigma * rng.normal();
            out.data.records.push_back(std::move(rec));
        }
    } else {
        const auto k = std::min(static_cast<std::size_t>(config.knn_k), pool.size() - 1);
        const auto neighbours = detail::nearest_neighbours(pool, k);
        for (std::size_t s = 0; s < needed; ++s) {
            const std::size_t a = rng.index(pool.size());
            const std::size_t b = neighbours[a][rng.index(neighbours[a].size())];
            const double u = rng.uniform();
            MetricRecord rec{pool[a]->features, minority, Origin::synthetic};
            for (std::size_t f = 0; f < rec.features.size(); ++f)
                rec.features[f] += u * (pool[b]->features[f] - pool[a]->features[f]);
            out.data.records.push_back(std::move(rec));
        }
    }
    out.synthetic_added = needed;
    return out;
}

/// Cleaning half of the pipeline: dedup, clip, fit and apply normalization.
/// The result is what hyperparameter search consumes before augmentation.
inline PreprocessedDataset anra_clean(const Dataset& ds, const AnraConfig& config)
{
    config.validate();
    ds.validate();
    PreprocessedDataset out;
    Dataset work = ds;
    if (config.dedup) {
        auto d = deduplicate(work);
        out.provenance.rows_dropped_dup = d.dropped;
        work = std::move(d.data);
    }
    auto clipped = clip_outliers(work, config.iqr_multiplier);
    out.provenance.rows_clipped = clipped.rows_clipped;
    out.bounds = std::move(clipped.bounds);
    out.norm = fit_normalize(clipped.data);
    out.data = apply_normalize(clipped.data, out.norm);
    return out;
}

inline PreprocessedDataset anra_augment(PreprocessedDataset cleaned, const AnraConfig& config)
{
    auto aug = augment_minority(cleaned.data, config);
    cleaned.data = std::move(aug.data);
    cleaned.provenance.synthetic_added = aug.synthetic_added;
    return cleaned;
}

inline PreprocessedDataset anra_pipeline(const Dataset& ds, const AnraConfig& config)
{
    return anra_augment(anra_clean(ds, config), config);
}

/// Test-time transform: training clip bounds are not applied, only the
/// training normalization.
inline Dataset anra_transform(const Dataset& ds, const NormStats& norm)
{
    return apply_normalize(ds, norm);
}

} // namespace sdp
