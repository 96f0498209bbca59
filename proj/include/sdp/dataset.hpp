#pragma once

// Code-metric datasets: schema, CSV loading, summaries and stratified splits.

#include <sdp/error.hpp>
#include <sdp/rng.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sdp {

enum class Origin { real, synthetic };

struct FeatureSchema {
    std::vector<std::string> feature_names;
    std::string label_name;

    std::size_t arity() const noexcept { return feature_names.size(); }

    void validate() const
    {
        if (feature_names.empty())
            throw ConfigError("schema needs at least one feature");
        std::set<std::string> seen;
        for (const auto& name : feature_names) {
            if (name.empty())
                throw ConfigError("schema feature names must be nonempty");
            if (!seen.insert(name).second)
                throw ConfigError("duplicate schema feature '" + name + "'");
        }
        if (label_name.empty())
            throw ConfigError("schema label name must be nonempty");
        if (seen.count(label_name))
            throw ConfigError("label '" + label_name + "' is also listed as a feature");
    }

    /// Metrics named in the defect-prediction literature plus a `defect` label.
    static FeatureSchema defaults()
    {
        return {{"loc", "cyclomatic_complexity", "dit", "cbo"}, "defect"};
    }

    bool operator==(const FeatureSchema&) const = default;
};

struct MetricRecord {
    std::vector<double> features;
    int label = 0;
    Origin origin = Origin::real;

    bool operator==(const MetricRecord&) const = default;
};

struct Dataset {
    FeatureSchema schema;
    std::vector<MetricRecord> records;

    std::size_t size() const noexcept { return records.size(); }
    std::size_t arity() const noexcept { return schema.arity(); }

    std::array<std::size_t, 2> class_counts() const noexcept
    {
        std::array<std::size_t, 2> counts{0, 0};
        for (const auto& r : records)
            ++counts[static_cast<std::size_t>(r.label)];
        return counts;
    }

    /// Copy of the records at `indices`, in the given order.
    Dataset subset(std::span<const std::size_t> indices) const
    {
        Dataset out{schema, {}};
        out.records.reserve(indices.size());
        for (std::size_t i : indices)
            out.records.push_back(records.at(i));
        return out;
    }

    void validate() const
    {
        if (records.empty())
            throw DataError("dataset has no records");
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& r = records[i];
            if (r.features.size() != arity())
                throw DataError("record " + std::to_string(i) + " has " +
                                std::to_string(r.features.size()) + " features, schema has " +
                                std::to_string(arity()));
            if (r.label != 0 && r.label != 1)
                throw DataError("record " + std::to_string(i) + " has label outside {0,1}");
            for (double v : r.features)
                if (!std::isfinite(v))
                    throw DataError("record " + std::to_string(i) + " has a non-finite feature");
        }
    }

    bool operator==(const Dataset&) const = default;
};

namespace detail {

inline std::string_view trim(std::string_view s)
{
    const auto ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos)
        return {};
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep = ',')
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        out.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
        if (pos == std::string_view::npos)
            break;
        start = pos + 1;
    }
    return out;
}

inline bool parse_real(std::string_view text, double& out)
{
    if (text.empty())
        return false;
    if (text.front() == '+')
        text.remove_prefix(1);
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
    return ec == std::errc{} && ptr == text.data() + text.size();
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_real(double v)
{
    std::array<char, 32> buf{};
    const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

} // namespace detail

/// Reads a comma-separated file with a header row. Columns are selected and
/// ordered by `schema`; other columns are ignored.
inline Dataset load_csv(std::istream& in, const FeatureSchema& schema,
                        const std::string& source = "<stream>")
{
    schema.validate();
    std::string line;
    if (!std::getline(in, line))
        throw DataError(source + ": empty file, expected a header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0)
        line.erase(0, 3);

    const auto header = detail::split_fields(line);
    std::unordered_map<std::string, std::size_t> column;
    for (std::size_t i = 0; i < header.size(); ++i)
        column.emplace(std::string(header[i]), i);

    auto locate = [&](const std::string& name) {
        const auto it = column.find(name);
        if (it == column.end())
            throw DataError(source + ": missing column '" + name + "' in header");
        return it->second;
    };
    std::vector<std::size_t> feature_cols;
    for (const auto& name : schema.feature_names)
        feature_cols.push_back(locate(name));
    const std::size_t label_col = locate(schema.label_name);

    Dataset ds{schema, {}};
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty())
            continue;
        const auto fields = detail::split_fields(line);
        if (fields.size() != header.size())
            throw DataError(source + ": line " + std::to_string(line_no) + " has " +
                            std::to_string(fields.size()) + " fields, header has " +
                            std::to_string(header.size()));
        MetricRecord rec;
        rec.features.reserve(feature_cols.size());
        for (std::size_t f = 0; f < feature_cols.size(); ++f) {
            double v = 0.0;
            const auto cell = fields[feature_cols[f]];
            if (!detail::parse_real(cell, v) || !std::isfinite(v))
                throw DataError(source + ": line " + std::to_string(line_no) + ": column '" +
                                schema.feature_names[f] + "' is not a finite number ('" +
                                std::string(cell) + "')");
            rec.features.push_back(v);
        }
        double label = 0.0;
        const auto label_cell = fields[label_col];
        if (!detail::parse_real(label_cell, label) || (label != 0.0 && label != 1.0))
            throw DataError(source + ": line " + std::to_string(line_no) + ": label '" +
                            std::string(label_cell) + "' is not 0 or 1");
        rec.label = label == 1.0 ? 1 : 0;
        ds.records.push_back(std::move(rec));
    }
    if (ds.records.empty())
        throw DataError(source + ": no data rows after the header");
    return ds;
}

inline Dataset load_csv(const std::string& path, const FeatureSchema& schema)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open data file '" + path + "'");
    return load_csv(in, schema, path);
}

/// Writes the schema columns, the label and an `origin` column.
inline void write_csv(std::ostream& out, const Dataset& ds)
{
    for (const auto& name : ds.schema.feature_names)
        out << name << ',';
    out << ds.schema.label_name << ",origin\n";
    for (const auto& r : ds.records) {
        for (double v : r.features)
            out << detail::format_real(v) << ',';
        out << r.label << ',' << (r.origin == Origin::real ? "real" : "synthetic") << '\n';
    }
}

struct FeatureStats {
    double min = 0.0;
    double max = 0.0;
    double mean = 0.0;
    double std = 0.0; // population convention
};

struct DatasetSummary {
    std::size_t n = 0;
    std::array<std::size_t, 2> class_counts{0, 0};
    std::size_t real_count = 0;
    std::size_t synthetic_count = 0;
    std::vector<FeatureStats> features;
};

inline DatasetSummary describe(const Dataset& ds)
{
    if (ds.records.empty())
        throw DataError("describe: dataset is empty");
    DatasetSummary s;
    s.n = ds.size();
    s.class_counts = ds.class_counts();
    for (const auto& r : ds.records)
        (r.origin == Origin::real ? s.real_count : s.synthetic_count)++;

    s.features.resize(ds.arity());
    for (std::size_t f = 0; f < ds.arity(); ++f) {
        auto& st = s.features[f];
        st.min = std::numeric_limits<double>::infinity();
        st.max = -std::numeric_limits<double>::infinity();
        double sum = 0.0;
        for (const auto& r : ds.records) {
            const double v = r.features[f];
            st.min = std::min(st.min, v);
            st.max = std::max(st.max, v);
            sum += v;
        }
        st.mean = sum / static_cast<double>(s.n);
        double ss = 0.0;
        for (const auto& r : ds.records) {
            const double d = r.features[f] - st.mean;
            ss += d * d;
        }
        st.std = std::sqrt(ss / static_cast<double>(s.n));
    }
    return s;
}

struct SplitPair {
    Dataset train;
    Dataset test;
    int tp_percent = 0;
    std::vector<std::size_t> train_indices; // into the input dataset, ascending
    std::vector<std::size_t> test_indices;
};

/// Per-class train counts for a training percentage. Each class gets
/// floor(n_c * tp / 100); the records still needed to reach round(n * tp / 100)
/// go to the classes with the largest fractional parts, lower label first on ties.
inline std::array<std::size_t, 2> stratified_train_counts(std::array<std::size_t, 2> counts,
                                                          int tp_percent)
{
    const auto tp = static_cast<std::size_t>(tp_percent);
    std::array<std::size_t, 2> train{counts[0] * tp / 100, counts[1] * tp / 100};
    const std::size_t n = counts[0] + counts[1];
    const std::size_t target = (n * tp + 50) / 100;
    std::size_t extra = target - std::min(target, train[0] + train[1]);

    std::array<std::size_t, 2> order{0, 1};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return (counts[a] * tp) % 100 > (counts[b] * tp) % 100;
    });
    for (std::size_t c : order) {
        if (extra == 0)
            break;
        if ((counts[c] * tp) % 100 != 0 && train[c] < counts[c]) {
            ++train[c];
            --extra;
        }
    }
    return train;
}

/// Stratified split. Within each class the records are permuted by a stream
/// seeded from (seed, label) alone, and the first k go to train, so a larger
/// training percentage always extends a smaller one.
inline SplitPair stratified_split(const Dataset& ds, int tp_percent, std::uint64_t seed)
{
    if (tp_percent < 1 || tp_percent > 99)
        throw ConfigError("training percentage must be in [1, 99], got " +
                          std::to_string(tp_percent));
    std::array<std::vector<std::size_t>, 2> by_class;
    for (std::size_t i = 0; i < ds.size(); ++i)
        by_class[static_cast<std::size_t>(ds.records[i].label)].push_back(i);
    for (int c = 0; c < 2; ++c)
        if (by_class[c].empty())
            throw DataError("stratified split: class " + std::to_string(c) + " has no records");

    const auto train_counts =
        stratified_train_counts({by_class[0].size(), by_class[1].size()}, tp_percent);

    SplitPair out;
    out.tp_percent = tp_percent;
    for (std::size_t c = 0; c < 2; ++c) {
        auto& members = by_class[c];
        Rng rng(derive_seed(seed, 0x5717 + c));
        rng.shuffle(std::span<std::size_t>(members));
        out.train_indices.insert(out.train_indices.end(), members.begin(),
                                 members.begin() + static_cast<std::ptrdiff_t>(train_counts[c]));
        out.test_indices.insert(out.test_indices.end(),
                                members.begin() + static_cast<std::ptrdiff_t>(train_counts[c]),
                                members.end());
    }
    std::sort(out.train_indices.begin(), out.train_indices.end());
    std::sort(out.test_indices.begin(), out.test_indices.end());
    out.train = ds.subset(out.train_indices);
    out.test = ds.subset(out.test_indices);
    return out;
}

} // namespace sdp
