#pragma once

// Run configuration: a sectioned `key = value` text file with `#` comments.
//
//   [data]      path, features (comma list), label
//   [anra]      dedup, iqr_multiplier, knn_k, target_ratio, jitter_sigma
//   [ade]       pop_size, max_generations, c_adapt, init_mu_f, init_mu_cr,
//               f_scale, cr_sigma, stagnation_generations, threads
//   [space]     <hyperparameter> = <linear|log> <real|int> <lower> <upper>
//   [model]     every HyperParams field
//   [baseline]  learning_rate, epochs, batch_size
//   [run]       tps, seed, output_dir, report_format, fitness_metric, include_untuned
//
// Unknown sections and keys are errors. Overrides use `section.key=value`.

#include <sdp/ade.hpp>
#include <sdp/anra.hpp>
#include <sdp/dataset.hpp>
#include <sdp/error.hpp>
#include <sdp/evaluation.hpp>
#include <sdp/model.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace sdp {

enum class ReportFormat { csv, md, json };

inline std::string to_string(ReportFormat f)
{
    switch (f) {
    case ReportFormat::csv: return "csv";
    case ReportFormat::md: return "md";
    case ReportFormat::json: return "json";
    }
    return "csv";
}

inline ReportFormat parse_report_format(std::string_view s)
{
    if (s == "csv") return ReportFormat::csv;
    if (s == "md") return ReportFormat::md;
    if (s == "json") return ReportFormat::json;
    throw ConfigError("report format must be csv, md or json, got '" + std::string(s) + "'");
}

struct RunConfig {
    std::string data_path;
    FeatureSchema schema = FeatureSchema::defaults();
    AnraConfig anra;
    AdeConfig ade;
    SearchSpace space = default_search_space();
    HyperParams model;
    LogRegConfig baseline;
    std::vector<int> tps = default_training_percentages();
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    ReportFormat report_format = ReportFormat::csv;
    FitnessMetric fitness_metric = FitnessMetric::f1;
    bool include_untuned = false;

    void validate() const
    {
        schema.validate();
        anra.validate();
        ade.validate();
        space.validate();
        model.validate();
        (void)apply_hyper_values(model, decode(std::vector<double>(space.size(), 0.0), space));
        if (baseline.epochs < 0 || baseline.batch_size < 1 || !(baseline.learning_rate > 0.0))
            throw ConfigError("baseline: needs learning_rate > 0, epochs >= 0, batch_size >= 1");
        if (tps.empty())
            throw ConfigError("run.tps must list at least one training percentage");
        for (int tp : tps)
            if (tp < 1 || tp > 99)
                throw ConfigError("run.tps entries must be in [1, 99], got " + std::to_string(tp));
        if (output_dir.empty())
            throw ConfigError("run.output_dir must be nonempty");
    }

    /// Seeds for the stochastic stages all derive from the one run seed.
    SweepConfig sweep_config() const
    {
        SweepConfig s;
        s.anra = anra;
        s.ade = ade;
        s.space = space;
        s.base = model;
        s.metric = fitness_metric;
        s.logreg = baseline;
        s.include_untuned = include_untuned;
        return s;
    }
};

namespace detail {

inline std::string key_error(const std::string& key, const char* expected, std::string_view got)
{
    return "config key '" + key + "': expected " + expected + ", got '" + std::string(got) + "'";
}

inline double cfg_real(const std::string& key, std::string_view v)
{
    double out = 0.0;
    if (!parse_real(v, out) || !std::isfinite(out))
        throw ConfigError(key_error(key, "a real number", v));
    return out;
}

inline std::int64_t cfg_int(const std::string& key, std::string_view v)
{
    std::int64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw ConfigError(key_error(key, "an integer", v));
    return out;
}

inline int cfg_int32(const std::string& key, std::string_view v)
{
    const auto x = cfg_int(key, v);
    if (x < INT32_MIN || x > INT32_MAX)
        throw ConfigError(key_error(key, "a 32-bit integer", v));
    return static_cast<int>(x);
}

inline std::uint64_t cfg_u64(const std::string& key, std::string_view v)
{
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw ConfigError(key_error(key, "a nonnegative integer", v));
    return out;
}

inline bool cfg_bool(const std::string& key, std::string_view v)
{
    if (v == "true" || v == "yes" || v == "1" || v == "on") return true;
    if (v == "false" || v == "no" || v == "0" || v == "off") return false;
    throw ConfigError(key_error(key, "a boolean", v));
}

inline std::vector<std::string> cfg_list(std::string_view v)
{
    std::vector<std::string> out;
    if (trim(v).empty())
        return out;
    for (auto item : split_fields(v))
        out.emplace_back(item);
    return out;
}

inline Dimension cfg_dimension(const std::string& key, const std::string& name, std::string_view v)
{
    std::istringstream in{std::string(v)};
    std::string scale, kind, lo, hi, extra;
    if (!(in >> scale >> kind >> lo >> hi) || (in >> extra))
        throw ConfigError(key_error(key, "'<linear|log> <real|int> <lower> <upper>'", v));
    Dimension d;
    d.name = name;
    if (scale == "linear") d.scale = Scale::linear;
    else if (scale == "log") d.scale = Scale::log;
    else throw ConfigError(key_error(key, "scale linear or log", scale));
    if (kind == "real") d.kind = Kind::continuous;
    else if (kind == "int") d.kind = Kind::integer;
    else throw ConfigError(key_error(key, "kind real or int", kind));
    d.lower = cfg_real(key, lo);
    d.upper = cfg_real(key, hi);
    return d;
}

using Setter = std::function<void(RunConfig&, const std::string& key, std::string_view value)>;

inline const std::map<std::string, Setter>& config_setters()
{
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
#define SDP_REAL(k, field) t[k] = [](RunConfig& c, const std::string& key, std::string_view v) { c.field = cfg_real(key, v); }
#define SDP_INT(k, field) t[k] = [](RunConfig& c, const std::string& key, std::string_view v) { c.field = cfg_int32(key, v); }
#define SDP_BOOL(k, field) t[k] = [](RunConfig& c, const std::string& key, std::string_view v) { c.field = cfg_bool(key, v); }
        t["data.path"] = [](RunConfig& c, const std::string&, std::string_view v) { c.data_path = std::string(v); };
        t["data.features"] = [](RunConfig& c, const std::string&, std::string_view v) { c.schema.feature_names = cfg_list(v); };
        t["data.label"] = [](RunConfig& c, const std::string&, std::string_view v) { c.schema.label_name = std::string(v); };

        SDP_BOOL("anra.dedup", anra.dedup);
        SDP_REAL("anra.iqr_multiplier", anra.iqr_multiplier);
        SDP_INT("anra.knn_k", anra.knn_k);
        SDP_REAL("anra.target_ratio", anra.target_ratio);
        SDP_REAL("anra.jitter_sigma", anra.jitter_sigma);

        SDP_INT("ade.pop_size", ade.pop_size);
        SDP_INT("ade.max_generations", ade.max_generations);
        SDP_REAL("ade.c_adapt", ade.c_adapt);
        SDP_REAL("ade.init_mu_f", ade.init_mu_f);
        SDP_REAL("ade.init_mu_cr", ade.init_mu_cr);
        SDP_REAL("ade.f_scale", ade.f_scale);
        SDP_REAL("ade.cr_sigma", ade.cr_sigma);
        SDP_INT("ade.stagnation_generations", ade.stagnation_generations);
        SDP_INT("ade.threads", ade.threads);

        SDP_REAL("model.learning_rate", model.learning_rate);
        SDP_REAL("model.l2_reg", model.l2_reg);
        SDP_INT("model.n_layers", model.n_layers);
        SDP_INT("model.latent_dim", model.latent_dim);
        SDP_INT("model.token_count", model.token_count);
        SDP_REAL("model.kl_weight", model.kl_weight);
        SDP_REAL("model.recon_weight", model.recon_weight);
        SDP_INT("model.epochs", model.epochs);
        SDP_INT("model.batch_size", model.batch_size);
        SDP_INT("model.head_count", model.head_count);
        SDP_INT("model.hidden_dim", model.hidden_dim);

        SDP_REAL("baseline.learning_rate", baseline.learning_rate);
        SDP_INT("baseline.epochs", baseline.epochs);
        SDP_INT("baseline.batch_size", baseline.batch_size);

        t["run.tps"] = [](RunConfig& c, const std::string& key, std::string_view v) {
            c.tps.clear();
            for (const auto& item : cfg_list(v))
                c.tps.push_back(cfg_int32(key, item));
        };
        t["run.seed"] = [](RunConfig& c, const std::string& key, std::string_view v) { c.seed = cfg_u64(key, v); };
        t["run.output_dir"] = [](RunConfig& c, const std::string&, std::string_view v) { c.output_dir = std::string(v); };
        t["run.report_format"] = [](RunConfig& c, const std::string&, std::string_view v) { c.report_format = parse_report_format(v); };
        t["run.fitness_metric"] = [](RunConfig& c, const std::string& key, std::string_view v) {
            if (v == "f1") c.fitness_metric = FitnessMetric::f1;
            else if (v == "accuracy") c.fitness_metric = FitnessMetric::accuracy;
            else throw ConfigError(key_error(key, "f1 or accuracy", v));
        };
        SDP_BOOL("run.include_untuned", include_untuned);
#undef SDP_REAL
#undef SDP_INT
#undef SDP_BOOL
        return t;
    }();
    return table;
}

/// Applies one `section.key = value` assignment. A [space] entry replaces the
/// default search space the first time one is seen.
class ConfigBuilder {
public:
    void set(const std::string& section, const std::string& key, std::string_view value,
             const std::string& where)
    {
        const std::string full = section + "." + key;
        if (section == "space") {
            if (!_space_replaced) {
                _config.space.dims.clear();
                _space_replaced = true;
            }
            auto dim = cfg_dimension(full, key, value);
            for (auto& d : _config.space.dims)
                if (d.name == key) {
                    d = dim;
                    return;
                }
            _config.space.dims.push_back(std::move(dim));
            return;
        }
        const auto& setters = config_setters();
        const auto it = setters.find(full);
        if (it == setters.end())
            throw ConfigError(where + "unknown config key '" + key + "'" +
                              (section.empty() ? std::string() : " in section [" + section + "]"));
        it->second(_config, full, value);
    }

    RunConfig& config() { return _config; }

private:
    RunConfig _config;
    bool _space_replaced = false;
};

inline std::pair<std::string, std::string> split_qualified(std::string_view key)
{
    const auto dot = key.find('.');
    if (dot == std::string_view::npos)
        return {"", std::string(key)};
    return {std::string(key.substr(0, dot)), std::string(key.substr(dot + 1))};
}

} // namespace detail

/// Parses config text, then applies `section.key=value` overrides in order.
inline RunConfig parse_config_text(std::string_view text, const std::vector<std::string>& overrides = {},
                                   const std::string& source = "<config>")
{
    static const std::set<std::string> sections{"data", "anra", "ade", "space", "model", "baseline", "run"};
    detail::ConfigBuilder builder;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = raw;
        if (const auto hash = line.find('#'); hash != std::string_view::npos)
            line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty())
            continue;
        const std::string where = source + ":" + std::to_string(line_no) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError(where + "malformed section header");
            section = std::string(detail::trim(line.substr(1, line.size() - 2)));
            if (!sections.count(section))
                throw ConfigError(where + "unknown config section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError(where + "expected 'key = value'");
        const std::string key(detail::trim(line.substr(0, eq)));
        const auto value = detail::trim(line.substr(eq + 1));
        if (section.empty()) {
            const auto [sec, k] = detail::split_qualified(key);
            builder.set(sec, k, value, where);
        } else {
            builder.set(section, key, value, where);
        }
    }
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + o + "' must look like section.key=value");
        const auto [sec, k] = detail::split_qualified(detail::trim(std::string_view(o).substr(0, eq)));
        builder.set(sec, k, detail::trim(std::string_view(o).substr(eq + 1)), "override: ");
    }
    builder.config().validate();
    return builder.config();
}

inline RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides = {})
{
    if (path.empty())
        return parse_config_text("", overrides);
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), overrides, path);
}

/// Fully resolved config; parse_config_text(to_config_text(c)) reproduces c.
inline std::string to_config_text(const RunConfig& c)
{
    using detail::format_real;
    std::ostringstream o;
    auto list = [](const auto& items) {
        std::string s;
        for (const auto& i : items) {
            if (!s.empty())
                s += ", ";
            if constexpr (std::is_same_v<std::decay_t<decltype(i)>, std::string>)
                s += i;
            else
                s += std::to_string(i);
        }
        return s;
    };
    o << "[data]\n"
      << "path = " << c.data_path << '\n'
      << "features = " << list(c.schema.feature_names) << '\n'
      << "label = " << c.schema.label_name << "\n\n";
    o << "[anra]\n"
      << "dedup = " << (c.anra.dedup ? "true" : "false") << '\n'
      << "iqr_multiplier = " << format_real(c.anra.iqr_multiplier) << '\n'
      << "knn_k = " << c.anra.knn_k << '\n'
      << "target_ratio = " << format_real(c.anra.target_ratio) << '\n'
      << "jitter_sigma = " << format_real(c.anra.jitter_sigma) << "\n\n";
    o << "[ade]\n"
      << "pop_size = " << c.ade.pop_size << '\n'
      << "max_generations = " << c.ade.max_generations << '\n'
      << "c_adapt = " << format_real(c.ade.c_adapt) << '\n'
      << "init_mu_f = " << format_real(c.ade.init_mu_f) << '\n'
      << "init_mu_cr = " << format_real(c.ade.init_mu_cr) << '\n'
      << "f_scale = " << format_real(c.ade.f_scale) << '\n'
      << "cr_sigma = " << format_real(c.ade.cr_sigma) << '\n'
      << "stagnation_generations = " << c.ade.stagnation_generations << '\n'
      << "threads = " << c.ade.threads << "\n\n";
    o << "[space]\n";
    for (const auto& d : c.space.dims)
        o << d.name << " = " << (d.scale == Scale::log ? "log" : "linear") << ' '
          << (d.kind == Kind::integer ? "int" : "real") << ' ' << format_real(d.lower) << ' '
          << format_real(d.upper) << '\n';
    const auto& h = c.model;
    o << "\n[model]\n"
      << "learning_rate = " << format_real(h.learning_rate) << '\n'
      << "l2_reg = " << format_real(h.l2_reg) << '\n'
      << "n_layers = " << h.n_layers << '\n'
      << "latent_dim = " << h.latent_dim << '\n'
      << "token_count = " << h.token_count << '\n'
      << "kl_weight = " << format_real(h.kl_weight) << '\n'
      << "recon_weight = " << format_real(h.recon_weight) << '\n'
      << "epochs = " << h.epochs << '\n'
      << "batch_size = " << h.batch_size << '\n'
      << "head_count = " << h.head_count << '\n'
      << "hidden_dim = " << h.hidden_dim << "\n\n";
    o << "[baseline]\n"
      << "learning_rate = " << format_real(c.baseline.learning_rate) << '\n'
      << "epochs = " << c.baseline.epochs << '\n'
      << "batch_size = " << c.baseline.batch_size << "\n\n";
    o << "[run]\n"
      << "tps = " << list(c.tps) << '\n'
      << "seed = " << c.seed << '\n'
      << "output_dir = " << c.output_dir << '\n'
      << "report_format = " << to_string(c.report_format) << '\n'
      << "fitness_metric = " << (c.fitness_metric == FitnessMetric::f1 ? "f1" : "accuracy") << '\n'
      << "include_untuned = " << (c.include_untuned ? "true" : "false") << '\n';
    return o.str();
}

} // namespace sdp
