#pragma once

// Confusion-matrix metrics, the hyperparameter fitness function, the
// logistic-regression baseline, and training-percentage sweeps.

#include <sdp/ade.hpp>
#include <sdp/anra.hpp>
#include <sdp/dataset.hpp>
#include <sdp/error.hpp>
#include <sdp/model.hpp>
#include <sdp/rng.hpp>

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace sdp {

struct ConfusionMatrix {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::size_t total() const noexcept { return tp + fp + fn + tn; }
    bool operator==(const ConfusionMatrix&) const = default;
};

/// Positive class is "defective" (label 1).
inline ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> labels)
{
    if (predicted.size() != labels.size())
        throw ConfigError("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                          std::to_string(labels.size()) + " labels");
    if (predicted.empty())
        throw ConfigError("confusion: no predictions");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool p = predicted[i] == 1, y = labels[i] == 1;
        (p ? (y ? cm.tp : cm.fp) : (y ? cm.fn : cm.tn))++;
    }
    return cm;
}

inline ConfusionMatrix confusion(std::span<const Prediction> predictions, std::span<const int> labels)
{
    std::vector<int> predicted;
    predicted.reserve(predictions.size());
    for (const auto& p : predictions)
        predicted.push_back(p.label);
    return confusion(predicted, labels);
}

struct Metrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool precision_degenerate = false; // tp + fp == 0
    bool recall_degenerate = false;    // tp + fn == 0
    bool f1_degenerate = false;        // precision + recall == 0

    /// Semicolon-joined degenerate flags, empty when none.
    std::string flags() const
    {
        std::string s;
        auto add = [&](bool on, const char* name) {
            if (on)
                s += (s.empty() ? "" : ";") + std::string(name);
        };
        add(precision_degenerate, "precision_undefined");
        add(recall_degenerate, "recall_undefined");
        add(f1_degenerate, "f1_undefined");
        return s;
    }

    bool operator==(const Metrics&) const = default;
};

/// Zero denominators yield 0 with the matching flag set, never NaN.
inline Metrics metrics(const ConfusionMatrix& cm)
{
    if (cm.total() == 0)
        throw ConfigError("metrics: empty confusion matrix");
    Metrics m;
    const auto ratio = [](std::size_t num, std::size_t den, bool& degenerate) {
        degenerate = den == 0;
        return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    bool unused = false;
    m.accuracy = ratio(cm.tp + cm.tn, cm.total(), unused);
    m.precision = ratio(cm.tp, cm.tp + cm.fp, m.precision_degenerate);
    m.recall = ratio(cm.tp, cm.tp + cm.fn, m.recall_degenerate);
    const double den = m.precision + m.recall;
    m.f1_degenerate = den == 0.0;
    m.f1 = den == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / den;
    return m;
}

// ---------------------------------------------------------------------------
// Fitness of a hyperparameter setting

enum class FitnessMetric { f1, accuracy };

/// Overrides the fields of `base` named in `values`.
inline HyperParams apply_hyper_values(HyperParams base, const NamedValues& values)
{
    for (const auto& [name, v] : values) {
        const int iv = static_cast<int>(std::lround(v));
        if (name == "learning_rate") base.learning_rate = v;
        else if (name == "l2_reg") base.l2_reg = v;
        else if (name == "n_layers") base.n_layers = iv;
        else if (name == "latent_dim") base.latent_dim = iv;
        else if (name == "token_count") base.token_count = iv;
        else if (name == "kl_weight") base.kl_weight = v;
        else if (name == "recon_weight") base.recon_weight = v;
        else if (name == "epochs") base.epochs = iv;
        else if (name == "batch_size") base.batch_size = iv;
        else if (name == "head_count") base.head_count = iv;
        else if (name == "hidden_dim") base.hidden_dim = iv;
        else
            throw ConfigError("unknown hyperparameter '" + name + "' in search space");
    }
    return base;
}

/// Learning rate, L2 coefficient and transformer depth.
inline SearchSpace default_search_space()
{
    return {{{"learning_rate", 0.01, 0.2, Scale::log, Kind::continuous},
             {"l2_reg", 1e-6, 1e-3, Scale::log, Kind::continuous},
             {"n_layers", 1, 3, Scale::linear, Kind::integer}}};
}

template <typename Classify>
Metrics evaluate_on(const Dataset& normalized, Classify&& classify)
{
    std::vector<int> predicted, labels;
    predicted.reserve(normalized.size());
    labels.reserve(normalized.size());
    for (const auto& r : normalized.records) {
        predicted.push_back(classify(r.features).label);
        labels.push_back(r.label);
    }
    return metrics(confusion(predicted, labels));
}

/// Inner 80/20 holdout on cleaned, normalized, not yet augmented training
/// data: augment the inner-train part, train, score the inner-validation part.
/// Divergent training scores -1.
inline double fitness_evaluate(const PreprocessedDataset& cleaned, const HyperParams& hyper,
                               const AnraConfig& anra, FitnessMetric metric, std::uint64_t seed)
{
    const auto inner = stratified_split(cleaned.data, 80, derive_seed(seed, 0xf17));
    PreprocessedDataset inner_train{inner.train, cleaned.norm, cleaned.bounds, {}};
    AnraConfig aug = anra;
    aug.seed = derive_seed(seed, 0xa06);
    try {
        const auto model = train(anra_augment(std::move(inner_train), aug), hyper,
                                 derive_seed(seed, 0x74a));
        const auto m = evaluate_on(inner.test, [&](std::span<const double> x) {
            return infer_normalized(model, x);
        });
        return metric == FitnessMetric::f1 ? m.f1 : m.accuracy;
    } catch (const NumericError&) {
        return -1.0;
    }
}

/// The objective handed to ADE: genome -> fitness. Each genome gets its own
/// seed from (run seed, genome bits), so evaluation order does not matter.
struct FitnessObjective {
    const PreprocessedDataset* cleaned;
    SearchSpace space;
    HyperParams base;
    AnraConfig anra;
    FitnessMetric metric = FitnessMetric::f1;
    std::uint64_t seed = 0;

    HyperParams hyper_for(std::span<const double> genome) const
    {
        auto h = apply_hyper_values(base, decode(genome, space));
        h.validate();
        return h;
    }

    double operator()(std::span<const double> genome) const
    {
        return fitness_evaluate(*cleaned, hyper_for(genome), anra, metric,
                                derive_seed(seed, hash_reals(genome)));
    }
};

// ---------------------------------------------------------------------------
// Logistic-regression baseline

struct LogRegConfig {
    double learning_rate = 0.1;
    int epochs = 200;
    int batch_size = 32;
};

struct LogisticModel {
    std::vector<double> weights;
    double bias = 0.0;
    NormStats norm;
    std::vector<double> loss_history;

    Prediction predict_normalized(std::span<const double> x) const
    {
        double logit = bias;
        for (std::size_t f = 0; f < x.size(); ++f)
            logit += weights[f] * x[f];
        return Prediction::from_logit(logit);
    }
};

struct LogRegGradient {
    double loss = 0.0;
    std::vector<double> d_weights;
    double d_bias = 0.0;
};

/// Mean binary cross-entropy and its gradient.
inline LogRegGradient logreg_gradient(const Batch& batch, std::span<const double> weights, double bias)
{
    LogRegGradient g;
    g.d_weights.assign(weights.size(), 0.0);
    const auto n = batch.features.rows();
    for (Eigen::Index r = 0; r < n; ++r) {
        double logit = bias;
        for (std::size_t f = 0; f < weights.size(); ++f)
            logit += weights[f] * batch.features(r, static_cast<Eigen::Index>(f));
        const int y = batch.labels[static_cast<std::size_t>(r)];
        g.loss += detail::softplus(logit) - y * logit;
        const double d = Prediction::from_logit(logit).probability - y;
        for (std::size_t f = 0; f < weights.size(); ++f)
            g.d_weights[f] += d * batch.features(r, static_cast<Eigen::Index>(f));
        g.d_bias += d;
    }
    const double inv = 1.0 / static_cast<double>(n);
    g.loss *= inv;
    for (double& w : g.d_weights)
        w *= inv;
    g.d_bias *= inv;
    return g;
}

/// Mini-batch gradient descent from zero weights; batches drawn by a seeded shuffle.
inline LogisticModel train_baseline_logreg(const PreprocessedDataset& train_set,
                                           const LogRegConfig& config, std::uint64_t seed)
{
    const auto counts = train_set.data.class_counts();
    if (counts[0] == 0 || counts[1] == 0)
        throw DataError("logistic regression: training set must contain both classes");
    LogisticModel m;
    m.weights.assign(train_set.data.arity(), 0.0);
    m.norm = train_set.norm;
    const Batch all = to_batch(train_set.data);
    const auto n = static_cast<std::size_t>(all.features.rows());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, 0x10a));
    Batch batch;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        double total = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(config.batch_size));
            batch.features.resize(static_cast<Eigen::Index>(stop - start), all.features.cols());
            batch.labels.resize(stop - start);
            for (std::size_t r = start; r < stop; ++r) {
                batch.features.row(static_cast<Eigen::Index>(r - start)) =
                    all.features.row(static_cast<Eigen::Index>(order[r]));
                batch.labels[r - start] = all.labels[order[r]];
            }
            const auto g = logreg_gradient(batch, m.weights, m.bias);
            total += g.loss * static_cast<double>(stop - start);
            for (std::size_t f = 0; f < m.weights.size(); ++f)
                m.weights[f] -= config.learning_rate * g.d_weights[f];
            m.bias -= config.learning_rate * g.d_bias;
        }
        if (!std::isfinite(total))
            throw NumericError("logistic regression diverged at epoch " + std::to_string(epoch));
        m.loss_history.push_back(total / static_cast<double>(n));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Sweeps

inline const std::string kTunedModelName = "ADE-QVAET";
inline const std::string kBaselineModelName = "LR";
inline const std::string kUntunedModelName = "QVAET-untuned";

struct SweepRow {
    int tp_percent = 0;
    std::string model;
    Metrics metrics;
    std::uint64_t seed = 0;
    std::string flags; // degenerate-metric flags, or "failed:<reason>"

    bool operator==(const SweepRow&) const = default;
};

/// Tuning details for one training percentage.
struct SweepCell {
    int tp_percent = 0;
    HyperParams tuned;
    double tuned_fitness = 0.0;
    double default_fitness = 0.0;
    Provenance provenance;
    std::vector<GenerationRecord> history;
};

struct SweepReport {
    std::vector<SweepRow> rows;
    std::vector<SweepCell> cells;
};

struct SweepConfig {
    AnraConfig anra;
    AdeConfig ade;
    SearchSpace space = default_search_space();
    HyperParams base;
    FitnessMetric metric = FitnessMetric::f1;
    LogRegConfig logreg;
    bool include_untuned = false;
};

inline std::vector<int> default_training_percentages() { return {40, 50, 60, 70, 80, 90}; }

inline SweepRow make_row(int tp, const std::string& model, const Metrics& m, std::uint64_t seed)
{
    return {tp, model, m, seed, m.flags()};
}

/// Split and cleaning for one training percentage. All stochastic stages of
/// a cell draw their seeds from `cell_seed`.
struct PreparedCell {
    int tp_percent = 0;
    std::uint64_t cell_seed = 0;
    SplitPair split;
    AnraConfig anra;
    PreprocessedDataset cleaned; // normalized, not augmented
};

inline PreparedCell prepare_cell(const Dataset& ds, int tp, const SweepConfig& config,
                                 std::uint64_t seed)
{
    PreparedCell cell;
    cell.tp_percent = tp;
    cell.cell_seed = derive_seed(seed, static_cast<std::uint64_t>(tp));
    cell.split = stratified_split(ds, tp, seed);
    cell.anra = config.anra;
    cell.anra.seed = derive_seed(cell.cell_seed, 0xa);
    cell.cleaned = anra_clean(cell.split.train, cell.anra);
    return cell;
}

inline FitnessObjective make_objective(const PreparedCell& cell, const SweepConfig& config)
{
    return {&cell.cleaned, config.space, config.base, cell.anra, config.metric,
            derive_seed(cell.cell_seed, 0xf)};
}

struct TuningOutcome {
    OptimizationResult search;
    HyperParams tuned;
};

inline TuningOutcome tune_cell(const PreparedCell& cell, const SweepConfig& config)
{
    const auto objective = make_objective(cell, config);
    AdeConfig ade = config.ade;
    ade.seed = derive_seed(cell.cell_seed, 0xade);
    auto search = optimize(objective, config.space, ade);
    const auto tuned = objective.hyper_for(search.best_genome);
    return {std::move(search), tuned};
}

/// Fitness of the untuned base hyperparameters under the same protocol.
inline double default_fitness(const PreparedCell& cell, const SweepConfig& config)
{
    return fitness_evaluate(cell.cleaned, config.base, cell.anra, config.metric,
                            derive_seed(cell.cell_seed, 0xdef));
}

inline PreprocessedDataset augmented_training_set(const PreparedCell& cell)
{
    return anra_augment(cell.cleaned, cell.anra);
}

inline std::uint64_t final_training_seed(const PreparedCell& cell)
{
    return derive_seed(cell.cell_seed, 0x7);
}

/// Test metrics from raw test records through the model's stored normalization.
inline Metrics test_metrics(const TrainedModel& model, const Dataset& raw_test)
{
    return evaluate_on(raw_test, [&](std::span<const double> x) { return infer(model, x); });
}

/// One cell: split, clean, tune, train on the augmented training portion,
/// score tuned model and baselines on the untouched test portion.
inline void run_sweep_cell(const Dataset& ds, int tp, const SweepConfig& config,
                           std::uint64_t seed, SweepReport& report)
{
    const auto prepared = prepare_cell(ds, tp, config, seed);
    auto tuning = tune_cell(prepared, config);

    SweepCell cell;
    cell.tp_percent = tp;
    cell.tuned = tuning.tuned;
    cell.tuned_fitness = tuning.search.best_fitness;
    cell.default_fitness = default_fitness(prepared, config);
    cell.history = std::move(tuning.search.history);

    const auto full = augmented_training_set(prepared);
    cell.provenance = full.provenance;
    const auto& test = prepared.split.test;
    const auto model = train(full, tuning.tuned, final_training_seed(prepared));
    const auto lr = train_baseline_logreg(full, config.logreg, derive_seed(prepared.cell_seed, 0x1));
    const auto lr_metrics = evaluate_on(anra_transform(test, full.norm), [&](std::span<const double> x) {
        return lr.predict_normalized(x);
    });

    report.rows.push_back(make_row(tp, kTunedModelName, test_metrics(model, test), seed));
    report.rows.push_back(make_row(tp, kBaselineModelName, lr_metrics, seed));
    if (config.include_untuned) {
        const auto plain = train(full, config.base, final_training_seed(prepared));
        report.rows.push_back(make_row(tp, kUntunedModelName, test_metrics(plain, test), seed));
    }
    report.cells.push_back(std::move(cell));
}

inline std::vector<std::string> sweep_model_names(const SweepConfig& config)
{
    std::vector<std::string> names{kTunedModelName, kBaselineModelName};
    if (config.include_untuned)
        names.push_back(kUntunedModelName);
    return names;
}

/// Rows come out in tp order, models in fixed order within a tp. A cell that
/// throws becomes flagged zero rows instead of aborting the sweep.
inline SweepReport tp_sweep(const Dataset& ds, const std::vector<int>& tps,
                            const SweepConfig& config, std::uint64_t seed)
{
    if (tps.empty())
        throw ConfigError("sweep: no training percentages given");
    ds.validate();
    SweepReport report;
    for (int tp : tps) {
        const auto before = report.rows.size();
        try {
            run_sweep_cell(ds, tp, config, seed, report);
        } catch (const std::exception& e) {
            report.rows.resize(before);
            std::string reason = e.what();
            for (char& c : reason)
                if (c == ',' || c == '\n' || c == '\r')
                    c = ' ';
            for (const auto& name : sweep_model_names(config))
                report.rows.push_back({tp, name, Metrics{}, seed, "failed:" + reason});
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Report serialization

inline std::string format_metric(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

/// Columns: tp,model,accuracy,precision,recall,f1,seed,flags.
inline void write_report_csv(std::ostream& out, const std::vector<SweepRow>& rows)
{
    out << "tp,model,accuracy,precision,recall,f1,seed,flags\n";
    for (const auto& r : rows)
        out << r.tp_percent << ',' << r.model << ',' << format_metric(r.metrics.accuracy) << ','
            << format_metric(r.metrics.precision) << ',' << format_metric(r.metrics.recall) << ','
            << format_metric(r.metrics.f1) << ',' << r.seed << ',' << r.flags << '\n';
}

inline std::vector<SweepRow> read_report_csv(std::istream& in, const std::string& source = "<stream>")
{
    std::string line;
    if (!std::getline(in, line) ||
        detail::trim(line) != "tp,model,accuracy,precision,recall,f1,seed,flags")
        throw DataError(source + ": not a sweep report (unexpected header)");
    std::vector<SweepRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty())
            continue;
        const auto f = detail::split_fields(line);
        auto bad = [&] { return DataError(source + ": malformed report line " + std::to_string(line_no)); };
        if (f.size() != 8)
            throw bad();
        SweepRow r;
        double tp = 0;
        if (!detail::parse_real(f[0], tp) || !detail::parse_real(f[2], r.metrics.accuracy) ||
            !detail::parse_real(f[3], r.metrics.precision) ||
            !detail::parse_real(f[4], r.metrics.recall) || !detail::parse_real(f[5], r.metrics.f1))
            throw bad();
        r.tp_percent = static_cast<int>(tp);
        r.model = std::string(f[1]);
        const auto [p, ec] = std::from_chars(f[6].data(), f[6].data() + f[6].size(), r.seed);
        if (ec != std::errc{})
            throw bad();
        r.flags = std::string(f[7]);
        r.metrics.precision_degenerate = r.flags.find("precision_undefined") != std::string::npos;
        r.metrics.recall_degenerate = r.flags.find("recall_undefined") != std::string::npos;
        r.metrics.f1_degenerate = r.flags.find("f1_undefined") != std::string::npos;
        rows.push_back(std::move(r));
    }
    return rows;
}

/// Percentages with two decimals, one row per (tp, model).
inline void write_report_markdown(std::ostream& out, const std::vector<SweepRow>& rows)
{
    out << "tp | model | accuracy | precision | recall | f1\n";
    out << "---|---|---|---|---|---\n";
    char buf[64];
    auto pct = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
        return std::string(buf);
    };
    for (const auto& r : rows)
        out << r.tp_percent << " | " << r.model << " | " << pct(r.metrics.accuracy) << " | "
            << pct(r.metrics.precision) << " | " << pct(r.metrics.recall) << " | "
            << pct(r.metrics.f1) << '\n';
}

inline nlohmann::ordered_json report_json(const std::vector<SweepRow>& rows)
{
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : rows)
        arr.push_back({{"tp", r.tp_percent},
                       {"model", r.model},
                       {"accuracy", r.metrics.accuracy},
                       {"precision", r.metrics.precision},
                       {"recall", r.metrics.recall},
                       {"f1", r.metrics.f1},
                       {"seed", r.seed},
                       {"flags", r.flags}});
    return {{"rows", arr}};
}

inline void write_report_json(std::ostream& out, const std::vector<SweepRow>& rows)
{
    out << report_json(rows).dump(2) << '\n';
}

} // namespace sdp
