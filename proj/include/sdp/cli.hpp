#pragma once

// Batch front end. `run` never calls exit(); it returns the process status:
// 0 success, 1 usage or config error, 2 data error, 3 numeric failure.

#include <sdp/ade.hpp>
#include <sdp/anra.hpp>
#include <sdp/config.hpp>
#include <sdp/dataset.hpp>
#include <sdp/error.hpp>
#include <sdp/evaluation.hpp>
#include <sdp/model.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace sdp::cli {

namespace fs = std::filesystem;

enum ExitCode : int { ok = 0, usage_error = 1, data_error = 2, numeric_error = 3 };

struct Options {
    std::string config_path;
    std::string data;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<int> tps;
    std::string format;
    std::string model_out;
    std::string model_in;
    std::string input;
    std::vector<std::string> sets;
};

/// Explicit flags are applied after `--set` assignments and after the file.
inline std::vector<std::string> overrides_from(const Options& o)
{
    std::vector<std::string> out = o.sets;
    if (!o.data.empty())
        out.push_back("data.path=" + o.data);
    if (o.seed)
        out.push_back("run.seed=" + std::to_string(*o.seed));
    if (!o.out.empty())
        out.push_back("run.output_dir=" + o.out);
    if (!o.format.empty())
        out.push_back("run.report_format=" + o.format);
    if (!o.tps.empty()) {
        std::string list;
        for (int tp : o.tps)
            list += (list.empty() ? "" : ",") + std::to_string(tp);
        out.push_back("run.tps=" + list);
    }
    return out;
}

class Session {
public:
    Session(const Options& opts, std::ostream& out) : _opts(opts), _out(out)
    {
        _config = parse_config(opts.config_path, overrides_from(opts));
        if (!opts.config_path.empty())
            _inputs.push_back(opts.config_path);
    }

    const RunConfig& config() const { return _config; }
    const Options& options() const { return _opts; }
    std::ostream& log() { return _out; }

    fs::path output_path(const std::string& name) const { return fs::path(_config.output_dir) / name; }

    void note_input(const std::string& path) { _inputs.push_back(path); }

    /// Creates the output directory and echoes the resolved config there.
    void begin()
    {
        std::error_code ec;
        fs::create_directories(_config.output_dir, ec);
        if (ec)
            throw ConfigError("cannot create output directory '" + _config.output_dir + "': " + ec.message());
        write_text(output_path("resolved.cfg"), to_config_text(_config));
        write_text(output_path("seed.txt"), std::to_string(_config.seed) + "\n");
    }

    /// Refuses to write over any file this run reads.
    std::ofstream open_output(const fs::path& path)
    {
        for (const auto& input : _inputs) {
            std::error_code ec;
            if (fs::equivalent(path, input, ec))
                throw ConfigError("refusing to overwrite input file '" + input + "'");
        }
        std::ofstream f(path, std::ios::binary);
        if (!f)
            throw ConfigError("cannot write '" + path.string() + "'");
        return f;
    }

    void write_text(const fs::path& path, const std::string& text)
    {
        auto f = open_output(path);
        f << text;
    }

    Dataset load_data(const FeatureSchema& schema)
    {
        if (_config.data_path.empty())
            throw ConfigError("no data file given (use --data or [data] path)");
        note_input(_config.data_path);
        return load_csv(_config.data_path, schema);
    }

    Dataset load_data() { return load_data(_config.schema); }

    int first_tp() const { return _config.tps.front(); }

private:
    Options _opts;
    std::ostream& _out;
    RunConfig _config;
    std::vector<std::string> _inputs;
};

inline std::string format_full(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_metrics_csv(std::ostream& out, const Metrics& m)
{
    out << "accuracy,precision,recall,f1,flags\n"
        << format_full(m.accuracy) << ',' << format_full(m.precision) << ',' << format_full(m.recall)
        << ',' << format_full(m.f1) << ',' << m.flags() << '\n';
}

inline void print_metrics(std::ostream& out, const Metrics& m)
{
    out << "accuracy " << format_metric(m.accuracy) << "  precision " << format_metric(m.precision)
        << "  recall " << format_metric(m.recall) << "  f1 " << format_metric(m.f1);
    if (!m.flags().empty())
        out << "  [" << m.flags() << ']';
    out << '\n';
}

inline nlohmann::ordered_json provenance_json(const Provenance& p)
{
    return {{"rows_dropped_dup", p.rows_dropped_dup},
            {"rows_clipped", p.rows_clipped},
            {"synthetic_added", p.synthetic_added}};
}

inline std::string hyper_text(const NamedValues& values)
{
    std::string s;
    for (const auto& [name, v] : values)
        s += (s.empty() ? "" : " ") + name + "=" + detail::format_real(v);
    return s;
}

inline void cmd_preprocess(Session& s)
{
    const auto& cfg = s.config();
    const auto raw = s.load_data();
    s.begin();
    auto anra = cfg.anra;
    anra.seed = derive_seed(cfg.seed, 0xa);
    const auto pre = anra_pipeline(raw, anra);

    auto csv = s.open_output(s.output_path("preprocessed.csv"));
    write_csv(csv, pre.data);

    nlohmann::ordered_json j;
    j["rows_in"] = raw.size();
    j["rows_out"] = pre.data.size();
    j["provenance"] = provenance_json(pre.provenance);
    j["norm_mean"] = pre.norm.mean;
    j["norm_std"] = pre.norm.std;
    s.write_text(s.output_path("provenance.json"), j.dump(2) + "\n");

    const auto counts = pre.data.class_counts();
    s.log() << "preprocess: " << raw.size() << " rows in, " << pre.data.size() << " rows out (dropped "
            << pre.provenance.rows_dropped_dup << ", clipped " << pre.provenance.rows_clipped
            << ", synthetic " << pre.provenance.synthetic_added << "; class counts " << counts[0] << "/"
            << counts[1] << ")\n";
}

inline void cmd_tune(Session& s)
{
    const auto& cfg = s.config();
    const auto raw = s.load_data();
    s.begin();
    const auto sweep = cfg.sweep_config();
    const auto cell = prepare_cell(raw, s.first_tp(), sweep, cfg.seed);
    const auto outcome = tune_cell(cell, sweep);

    auto hist = s.open_output(s.output_path("ade_history.csv"));
    write_history_csv(hist, outcome.search.history);

    RunConfig tuned = cfg;
    tuned.model = outcome.tuned;
    s.write_text(s.output_path("tuned.cfg"), to_config_text(tuned));

    s.log() << "tune: tp " << cell.tp_percent << ", best fitness " << format_metric(outcome.search.best_fitness)
            << " after " << outcome.search.history.size() << " generations\n"
            << "tune: " << hyper_text(outcome.search.best_decoded) << '\n';
}

inline std::string default_model_path(const Session& s) { return s.output_path("model.sdpm").string(); }

inline void cmd_train(Session& s)
{
    const auto& cfg = s.config();
    const auto raw = s.load_data();
    s.begin();
    const auto sweep = cfg.sweep_config();
    const auto cell = prepare_cell(raw, s.first_tp(), sweep, cfg.seed);
    const auto model = train(augmented_training_set(cell), cfg.model, final_training_seed(cell));
    const auto m = test_metrics(model, cell.split.test);

    const auto path = s.options().model_out.empty() ? default_model_path(s) : s.options().model_out;
    {
        auto f = s.open_output(path);
        save_checkpoint(f, model);
    }
    auto metrics_file = s.open_output(s.output_path("train_metrics.csv"));
    write_metrics_csv(metrics_file, m);

    s.log() << "train: tp " << cell.tp_percent << ", " << model.loss_history.size() << " epochs, final loss "
            << format_metric(model.loss_history.empty() ? 0.0 : model.loss_history.back())
            << ", checkpoint " << path << '\n';
    s.log() << "train: test ";
    print_metrics(s.log(), m);
}

inline void cmd_evaluate(Session& s)
{
    const auto path = s.options().model_in.empty() ? default_model_path(s) : s.options().model_in;
    s.note_input(path);
    const auto model = load_checkpoint(path);
    const auto& cfg = s.config();
    const auto raw = s.load_data(model.schema);
    s.begin();
    const auto split = stratified_split(raw, s.first_tp(), cfg.seed);
    const auto m = test_metrics(model, split.test);

    auto f = s.open_output(s.output_path("evaluate_metrics.csv"));
    write_metrics_csv(f, m);
    s.log() << "evaluate: tp " << s.first_tp() << ", " << split.test.size() << " test rows\n";
    s.log() << "evaluate: ";
    print_metrics(s.log(), m);
}

inline void write_rows(std::ostream& out, const std::vector<SweepRow>& rows, ReportFormat format)
{
    switch (format) {
    case ReportFormat::csv: write_report_csv(out, rows); break;
    case ReportFormat::md: write_report_markdown(out, rows); break;
    case ReportFormat::json: write_report_json(out, rows); break;
    }
}

inline nlohmann::ordered_json cells_json(const std::vector<SweepCell>& cells)
{
    auto arr = nlohmann::ordered_json::array();
    for (const auto& c : cells) {
        const auto& h = c.tuned;
        arr.push_back({{"tp", c.tp_percent},
                       {"tuned_fitness", c.tuned_fitness},
                       {"default_fitness", c.default_fitness},
                       {"tuned", {{"learning_rate", h.learning_rate}, {"l2_reg", h.l2_reg}, {"n_layers", h.n_layers}}},
                       {"generations", c.history.size()},
                       {"provenance", provenance_json(c.provenance)}});
    }
    return arr;
}

inline void cmd_sweep(Session& s)
{
    const auto& cfg = s.config();
    const auto raw = s.load_data();
    s.begin();
    const auto report = tp_sweep(raw, cfg.tps, cfg.sweep_config(), cfg.seed);

    {
        auto f = s.open_output(s.output_path("sweep.csv"));
        write_report_csv(f, report.rows);
    }
    if (cfg.report_format != ReportFormat::csv) {
        auto f = s.open_output(s.output_path("sweep." + to_string(cfg.report_format)));
        write_rows(f, report.rows, cfg.report_format);
    }
    s.write_text(s.output_path("sweep_cells.json"), cells_json(report.cells).dump(2) + "\n");
    for (const auto& c : report.cells) {
        auto f = s.open_output(s.output_path("ade_history_tp" + std::to_string(c.tp_percent) + ".csv"));
        write_history_csv(f, c.history);
    }
    write_report_markdown(s.log(), report.rows);
}

inline void cmd_report(Session& s)
{
    const auto input = s.options().input.empty() ? s.output_path("sweep.csv").string() : s.options().input;
    s.note_input(input);
    std::ifstream in(input);
    if (!in)
        throw DataError("cannot open report file '" + input + "'");
    const auto rows = read_report_csv(in, input);
    s.begin();
    const auto format = s.config().report_format;
    std::ostringstream text;
    write_rows(text, rows, format);
    s.write_text(s.output_path("report." + to_string(format)), text.str());
    s.log() << text.str();
}

inline CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, Options& o)
{
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config_path, "Run config file");
    sub->add_option("--data", o.data, "Input metrics CSV");
    sub->add_option("--seed", o.seed, "Run seed");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--tp", o.tps, "Training percentages (repeatable, space or comma separated)")->delimiter(',');
    sub->add_option("--format", o.format, "Report format")->check(CLI::IsMember({"csv", "md", "json"}));
    sub->add_option("--set", o.sets, "Config override section.key=value (repeatable)")->allow_extra_args(false);
    return sub;
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Software defect prediction toolkit"};
    app.require_subcommand(1);
    Options o;
    add_command(app, "preprocess", "Clean and balance a dataset", o);
    add_command(app, "tune", "Tune hyperparameters with adaptive DE", o);
    add_command(app, "train", "Train a model and save a checkpoint", o)
        ->add_option("--model-out", o.model_out, "Checkpoint to write");
    add_command(app, "evaluate", "Score a checkpoint on the test split", o)
        ->add_option("--model-in", o.model_in, "Checkpoint to read");
    add_command(app, "sweep", "Tune, train and score across training percentages", o);
    add_command(app, "report", "Render a stored sweep CSV", o)
        ->add_option("--in", o.input, "Sweep CSV to render");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage_error;
    }

    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    try {
        Session s(o, out);
        if (name == "preprocess") cmd_preprocess(s);
        else if (name == "tune") cmd_tune(s);
        else if (name == "train") cmd_train(s);
        else if (name == "evaluate") cmd_evaluate(s);
        else if (name == "sweep") cmd_sweep(s);
        else if (name == "report") cmd_report(s);
        return ok;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return usage_error;
    } catch (const DataError& e) {
        err << "error: " << e.what() << '\n';
        return data_error;
    } catch (const NumericError& e) {
        err << "error: " << e.what() << '\n';
        return numeric_error;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return data_error;
    }
}

} // namespace sdp::cli
