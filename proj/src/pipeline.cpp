#include "optrisk/pipeline.hpp"

#include "optrisk/backtest.hpp"
#include "optrisk/black_scholes.hpp"
#include "optrisk/errors.hpp"
#include "optrisk/fhs.hpp"
#include "optrisk/io.hpp"
#include "optrisk/static_arbitrage.hpp"

#include <boost/math/distributions/normal.hpp>
#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace optrisk {

namespace {

using nlohmann::json;

constexpr const char* header_prefix = "# optrisk-artifact ";

// Reads keys of one YAML mapping and rejects the ones nobody asked for.
class Section {
public:
    Section(YAML::Node node, std::string path) : node_(std::move(node)), path_(std::move(path)) {
        if (node_ && !node_.IsNull() && !node_.IsMap()) {
            throw UsageError("config: '" + name() + "' must be a mapping");
        }
    }

    template <class T>
    bool read(const std::string& key, T& out) {
        allowed_.insert(key);
        if (!node_ || !node_.IsMap() || !node_[key]) {
            return false;
        }
        try {
            out = node_[key].as<T>();
        } catch (const YAML::Exception& e) {
            throw UsageError("config: bad value for '" + path_ + key + "': " + e.what());
        }
        return true;
    }

    Section child(const std::string& key) {
        allowed_.insert(key);
        if (!node_ || !node_.IsMap() || !node_[key]) {
            return Section(YAML::Node(), path_ + key + ".");
        }
        return Section(node_[key], path_ + key + ".");
    }

    void finish() const {
        if (!node_ || !node_.IsMap()) {
            return;
        }
        for (const auto& kv : node_) {
            const auto key = kv.first.as<std::string>();
            if (!allowed_.count(key)) {
                throw UsageError("config: unknown key '" + path_ + key + "'");
            }
        }
    }

private:
    YAML::Node node_;
    std::string path_;
    std::set<std::string> allowed_;

    std::string name() const { return path_.empty() ? "<root>" : path_.substr(0, path_.size() - 1); }
};

void apply_override(YAML::Node& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw UsageError("--set expects key=value, got '" + assignment + "'");
    }
    const std::vector<std::string> keys = split(assignment.substr(0, eq), '.');
    YAML::Node value;
    try {
        value = YAML::Load(assignment.substr(eq + 1));
    } catch (const YAML::Exception& e) {
        throw UsageError("--set " + assignment + ": " + e.what());
    }
    YAML::Node cur = root;
    for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
        if (!cur[keys[i]] || !cur[keys[i]].IsMap()) {
            cur[keys[i]] = YAML::Node(YAML::NodeType::Map);
        }
        YAML::Node next = cur[keys[i]];
        cur.reset(next);
    }
    cur[keys.back()] = value;
}

void read_training(Section s, TrainingConfig& cfg) {
    s.read("hidden", cfg.hidden);
    s.read("epochs", cfg.epochs);
    s.read("batch", cfg.batch);
    s.read("learning_rate", cfg.learning_rate);
    s.read("validation_fraction", cfg.validation_fraction);
    s.read("sparsity", cfg.sparsity);
    s.finish();
}

json training_json(const TrainingConfig& cfg) {
    return {{"hidden", cfg.hidden},
            {"epochs", cfg.epochs},
            {"batch", cfg.batch},
            {"learning_rate", cfg.learning_rate},
            {"validation_fraction", cfg.validation_fraction},
            {"sparsity", cfg.sparsity}};
}

json header_json(const ArtifactHeader& h) {
    return {{"schema", h.schema}, {"stage", h.stage}, {"config", h.config}, {"inputs", h.inputs}};
}

ArtifactHeader header_from_json(const json& j, const std::filesystem::path& path) {
    try {
        ArtifactHeader h;
        h.schema = j.at("schema").get<int>();
        h.stage = j.at("stage").get<std::string>();
        h.config = j.at("config").get<std::string>();
        h.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
        return h;
    } catch (const json::exception& e) {
        throw UsageError(path.string() + ": malformed artifact header: " + e.what());
    }
}

std::string digest(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

std::string fmt(double x) { return format_double(x); }

SurfacePanel panel_rows(const SurfacePanel& panel, Eigen::Index begin, Eigen::Index end) {
    SurfacePanel out;
    out.lattice = panel.lattice;
    out.dt = panel.dt;
    out.prices = panel.prices.middleRows(begin, end - begin);
    const auto b = static_cast<std::ptrdiff_t>(begin), e = static_cast<std::ptrdiff_t>(end);
    out.dates.assign(panel.dates.begin() + b, panel.dates.begin() + e);
    out.labels.assign(panel.labels.begin() + b, panel.labels.begin() + e);
    out.spot.assign(panel.spot.begin() + b, panel.spot.begin() + e);
    return out;
}

// Rows used for decoding and training: everything before the test window.
SurfacePanel training_panel(const SurfacePanel& panel, const RunConfig& config) {
    const auto test = static_cast<Eigen::Index>(config.backtest.test_days);
    const Eigen::Index train = panel.rows() - test;
    if (train < 60) {
        throw UsageError("panel has " + std::to_string(panel.rows()) + " rows; holding out backtest.test_days = " +
                         std::to_string(test) + " leaves fewer than 60 for decode and train");
    }
    return panel_rows(panel, 0, train);
}

// Working state of one stage: input resolution, headers and output collection.
class StageRun {
public:
    StageRun(std::string stage, const RunConfig& config) : stage_(std::move(stage)), config_(config) {
        header_.stage = stage_;
        result_.stage = stage_;
        header_.config = config_hash(config_, stage_);
    }

    std::filesystem::path path(const std::string& name) const { return config_.run_path() / name; }

    // Registers an upstream artifact; throws naming the producing stage when absent.
    std::string input(const std::string& name, const std::string& producer) {
        const auto p = path(name);
        return input_path(p, name, producer);
    }

    std::string input_path(const std::filesystem::path& p, const std::string& name, const std::string& producer) {
        if (!std::filesystem::exists(p)) {
            throw UsageError(stage_ + ": missing artifact " + p.string() + "; run `optrisk " + producer + "` first");
        }
        std::string bytes = read_file(p);
        header_.inputs[name] = sha256_hex(bytes);
        return bytes;
    }

    // Payload of an upstream artifact, after checking it belongs to this config.
    std::string artifact_input(const std::string& name, const std::string& producer) {
        input(name, producer);
        auto [header, payload] = read_artifact(path(name));
        if (header.config != config_hash(config_, header.stage)) {
            throw UsageError(stage_ + ": " + name + " was produced under config " + header.config.substr(0, 12) +
                             ", current config is " + config_hash(config_, header.stage).substr(0, 12) + "; rerun `optrisk " + producer +
                             "`");
        }
        return payload;
    }

    void output(const std::string& name, const std::string& payload) {
        write_artifact(path(name), header_, payload);
        result_.artifacts.push_back(name);
    }

    void message(std::string text) { result_.messages.push_back(std::move(text)); }

    StageResult finish() { return std::move(result_); }

private:
    std::string stage_;
    const RunConfig& config_;
    ArtifactHeader header_;
    StageResult result_;
};

HestonParams synth_params(const RunConfig& c) {
    return HestonParams::from_rho(c.synth.spot, c.synth.initial_var, c.synth.long_run_var, c.synth.reversion,
                                  c.synth.vol_of_vol, c.synth.rho);
}

SynthOptions synth_options(const RunConfig& c) {
    SynthOptions o;
    o.long_run_vol = c.synth.long_run_vol;
    o.price_noise = c.synth.price_noise;
    o.label = c.synth.label;
    o.start_date = c.synth.start_date;
    return o;
}

std::vector<double> quote_deltas(const RunConfig& c) {
    if (!c.synth.quote_deltas.empty()) {
        return c.synth.quote_deltas;
    }
    // Wider than the lattice labels so the quotes bracket every node as vol moves.
    std::vector<double> deltas;
    for (int i = 1; i <= 19; ++i) {
        deltas.push_back(0.05 * i);
    }
    return deltas;
}

LatticeOptions lattice_options(const RunConfig& c) {
    LatticeOptions o = c.lattice;
    if (o.deltas.empty()) {
        o.deltas = standard_deltas();
    }
    return o;
}

void stage_synth(StageRun& run, const RunConfig& c) {
    const HestonParams params = synth_params(c);
    const SynthOptions options = synth_options(c);
    const RawQuotePanel raw =
        synthesize_raw_panel(params, c.synth.tau_days, quote_deltas(c), c.synth.days, c.seed, options);
    std::ostringstream quotes;
    write_raw_panel(quotes, raw);
    run.output("raw_quotes.csv", quotes.str());

    const HestonPath path = simulate_heston_path(params, c.synth.days, c.seed, options);
    std::ostringstream truth;
    truth << "date,spot,initial_var,long_run_var,reversion,corr_vol,indep_vol\n";
    for (std::size_t t = 0; t < path.params.size(); ++t) {
        const HestonParams& p = path.params[t];
        truth << path.dates[t] << ',' << fmt(p.spot) << ',' << fmt(p.initial_var) << ',' << fmt(p.long_run_var)
              << ',' << fmt(p.reversion) << ',' << fmt(p.corr_vol) << ',' << fmt(p.indep_vol) << '\n';
    }
    run.output("heston_path.csv", truth.str());
    run.message("synth: " + std::to_string(raw.quotes.size()) + " quotes over " + std::to_string(c.synth.days) +
                " days");
}

void stage_ingest(StageRun& run, const RunConfig& c) {
    std::string text;
    if (c.raw_quotes.empty()) {
        text = run.artifact_input("raw_quotes.csv", "synth");
    } else {
        // External quotes are plain CSV without an artifact header.
        const std::filesystem::path p = c.data_root / c.raw_quotes;
        text = run.input_path(p, c.raw_quotes, "ingest with an existing raw_quotes file");
        if (text.rfind(header_prefix, 0) == 0) {
            text = read_artifact(p).second;
        }
    }
    std::istringstream in(text);
    const RawQuotePanel raw = read_raw_panel(in);
    const IngestResult result = ingest(raw, lattice_options(c));
    std::ostringstream panel;
    write_panel(panel, result.panel);
    run.output("panel.csv", panel.str());

    const IngestStats& s = result.stats;
    json stats = {{"dates_in", s.dates_in},
                  {"dates_kept", s.dates_kept},
                  {"raw_violating_dates", s.raw_violating_dates},
                  {"interpolated_violating_dates", s.interpolated_violating_dates},
                  {"raw_violation_fraction", s.raw_violation_fraction},
                  {"interpolated_violation_fraction", s.interpolated_violation_fraction},
                  {"mean_repair_l1", s.mean_repair_l1},
                  {"lattice_nodes", result.panel.lattice.size()},
                  {"lattice_expiries", result.panel.lattice.expiries().size()},
                  {"skipped", s.skipped}};
    run.output("ingest_stats.json", stats.dump(2));
    run.message("ingest: kept " + std::to_string(s.dates_kept) + " of " + std::to_string(s.dates_in) + " dates on " +
                std::to_string(result.panel.lattice.size()) + " lattice nodes; " +
                std::to_string(s.raw_violating_dates) + " raw dates violated static-arbitrage constraints");
}

SurfacePanel load_panel(StageRun& run) {
    std::istringstream in(run.artifact_input("panel.csv", "ingest"));
    return read_panel(in);
}

FactorModel load_factors(StageRun& run) {
    std::istringstream in(run.artifact_input("factor_model.txt", "decode"));
    return read_factor_model(in);
}

void stage_decode(StageRun& run, const RunConfig& c) {
    const SurfacePanel panel = load_panel(run);
    const SurfacePanel train = training_panel(panel, c);
    const ConstraintSystem constraints = build_constraints(train.lattice);
    FactorModel model = decode_primary(train, compute_vega_weights(train), constraints, c.decode);
    attach_secondary(model, c.secondary);

    std::ostringstream factors;
    write_factor_model(factors, model);
    run.output("factor_model.txt", factors.str());

    std::ostringstream table;
    table << "factors | MAPE | PDA | PSAS\n";
    std::vector<int> counts{0};
    for (int k = 1; k <= c.secondary; k *= 2) {
        counts.push_back(k);
    }
    if (counts.back() != c.secondary) {
        counts.push_back(c.secondary);
    }
    for (int k : counts) {
        const ReconstructionMetrics m = compute_metrics(model, train, constraints, k);
        auto pct = [](double x) {
            std::ostringstream o;
            o << std::fixed << std::setprecision(2) << 100.0 * x << '%';
            return o.str();
        };
        table << model.primary() << " primary + " << k << " secondary | " << pct(m.mape) << " | " << pct(m.pda)
              << " | " << pct(m.psas) << '\n';
    }
    run.output("decode_metrics.txt", table.str());

    std::ostringstream series;
    series << "date,label";
    for (Eigen::Index j = 0; j < model.primary(); ++j) {
        series << ",xi" << j + 1;
    }
    for (Eigen::Index j = 0; j < model.secondary(); ++j) {
        series << ",xi_sec" << j + 1;
    }
    series << ",arbitrage\n";
    for (Eigen::Index t = 0; t < model.xi.rows(); ++t) {
        const auto i = static_cast<std::size_t>(t);
        series << train.dates[i] << ',' << train.labels[i];
        for (Eigen::Index j = 0; j < model.primary(); ++j) {
            series << ',' << fmt(model.xi(t, j));
        }
        for (Eigen::Index j = 0; j < model.secondary(); ++j) {
            series << ',' << fmt(model.xi_sec(t, j));
        }
        series << ',' << (model.arbitrage_flags[i] ? 1 : 0) << '\n';
    }
    run.output("factor_series.csv", series.str());
    run.message("decode: " + std::to_string(model.primary()) + " primary and " +
                std::to_string(model.secondary()) + " secondary factors on " + std::to_string(train.rows()) +
                " training rows");
    run.message(table.str());
}

ModelFitOptions fit_options(const RunConfig& c) {
    ModelFitOptions o = c.train;
    o.factor_training.seed = c.seed;
    o.index_training.seed = c.seed + 1;
    return o;
}

void stage_train(StageRun& run, const RunConfig& c) {
    const SurfacePanel panel = load_panel(run);
    const FactorModel factors = load_factors(run);
    const SurfacePanel train = training_panel(panel, c);
    const ModelFit fit = fit_model_set(factors, train, fit_options(c));
    run.output("models.json", model_set_to_json(fit.models));

    const TrainingHistory& fh = fit.models.factor_history;
    const TrainingHistory& ih = fit.models.index_history;
    std::ostringstream curves;
    curves << "epoch,factor_train,factor_validation,index_train,index_validation\n";
    const std::size_t epochs = std::max(fh.validation_loss.size(), ih.validation_loss.size());
    auto cell = [](const std::vector<double>& v, std::size_t i) { return i < v.size() ? fmt(v[i]) : std::string(); };
    for (std::size_t e = 0; e < epochs; ++e) {
        curves << e << ',' << (e > 0 ? cell(fh.train_loss, e - 1) : "") << ',' << cell(fh.validation_loss, e) << ','
               << (e > 0 ? cell(ih.train_loss, e - 1) : "") << ',' << cell(ih.validation_loss, e) << '\n';
    }
    run.output("loss_curves.csv", curves.str());

    // Sorted standardized residuals against standard normal quantiles.
    const Eigen::MatrixXd& z = fit.models.residuals.rows;
    const boost::math::normal normal;
    std::ostringstream qq;
    qq << "series,rank,normal_quantile,residual\n";
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
        std::vector<double> col(z.col(j).data(), z.col(j).data() + z.rows());
        std::sort(col.begin(), col.end());
        const std::string name = j == 0 ? "index" : "xi" + std::to_string(j);
        for (std::size_t i = 0; i < col.size(); ++i) {
            const double p = (static_cast<double>(i) + 0.5) / static_cast<double>(col.size());
            qq << name << ',' << i << ',' << fmt(boost::math::quantile(normal, p)) << ',' << fmt(col[i]) << '\n';
        }
    }
    run.output("residual_qq.csv", qq.str());
    run.message("train: factor SDE " + std::to_string(fh.train_samples) + " samples, final validation loss " +
                (fh.validation_loss.empty() ? std::string("n/a") : fmt(fh.validation_loss.back())) + "; index " +
                std::to_string(ih.train_samples) + " samples");
    for (const auto& w : fit.warnings) {
        run.message("warning: " + w);
    }
}

void stage_simulate(StageRun& run, const RunConfig& c) {
    const SurfacePanel panel = load_panel(run);
    const FactorModel factors = load_factors(run);
    const ModelSet models = model_set_from_json(run.artifact_input("models.json", "train"));
    const ConstraintSystem constraints = build_constraints(panel.lattice);
    const ScenarioEngine engine(models, factors, constraints);

    const Eigen::Index row = c.simulate.start_row < 0 ? panel.rows() - 1 : c.simulate.start_row;
    if (row < 0 || row >= panel.rows()) {
        throw UsageError("simulate.start_row " + std::to_string(c.simulate.start_row) + " is outside the panel");
    }
    const auto r = static_cast<std::size_t>(row);
    const MarketState start = engine.decode_state(panel.prices.row(row).transpose(), panel.spot[r], panel.labels[r]);
    SimulationOptions options;
    options.mode = c.simulate.mode;
    options.seed = c.seed;
    options.keep_paths = true;
    options.threads = c.threads;
    const ScenarioSet set = engine.simulate(start, c.simulate.horizon_days * panel.dt, c.simulate.scenarios, options);

    ScenarioSet terminal = set;
    for (Scenario& s : terminal.scenarios) {
        s.path.resize(0, 0);
    }
    std::ostringstream out;
    write_scenarios(out, terminal, panel.lattice);
    run.output("scenarios.csv", out.str());

    ScenarioSet kept = set;
    kept.scenarios.resize(std::min(c.simulate.paths, set.scenarios.size()));
    std::ostringstream paths;
    write_scenarios(paths, kept, panel.lattice);
    run.output("paths.csv", paths.str());

    const LiquidLattice& lattice = panel.lattice;
    std::ostringstream ivs;
    ivs << "scenario,tau,m,delta,price,implied_vol\n";
    auto snapshot = [&](const std::string& id, const Eigen::VectorXd& surface) {
        for (std::size_t j = 0; j < lattice.size(); ++j) {
            const double price = surface(static_cast<Eigen::Index>(j));
            std::string vol;
            try {
                vol = fmt(implied_vol(price, lattice[j].tau, lattice[j].m));
            } catch (const InversionError&) {
            }
            ivs << id << ',' << fmt(lattice[j].tau) << ',' << fmt(lattice[j].m) << ',' << fmt(lattice[j].delta)
                << ',' << fmt(price) << ',' << vol << '\n';
        }
    };
    snapshot("today", panel.prices.row(row).transpose());
    for (const Scenario& s : kept.scenarios) {
        snapshot(std::to_string(s.id), s.surface);
    }
    run.output("ivs_snapshots.csv", ivs.str());

    std::ostringstream vix;
    vix << "scenario,step,spot,vix\n";
    const Eigen::Index d = factors.primary();
    for (const Scenario& s : kept.scenarios) {
        for (Eigen::Index k = 0; k < s.path.rows(); ++k) {
            const Eigen::VectorXd xi = s.path.row(k).segment(1, d).transpose();
            const Eigen::VectorXd xi_sec = s.path.row(k).tail(s.path.cols() - 1 - d).transpose();
            const Eigen::VectorXd surface = k + 1 == s.path.rows() ? s.surface : engine.surface(xi, xi_sec);
            vix << s.id << ',' << k << ',' << fmt(s.path(k, 0)) << ',' << fmt(vix_index(surface, lattice)) << '\n';
        }
    }
    run.output("vix_series.csv", vix.str());
    run.message("simulate: " + std::to_string(set.scenarios.size()) + " scenarios over " +
                std::to_string(c.simulate.horizon_days) + " days from " + panel.dates[r] + "; " +
                std::to_string(set.stats.safeguarded_steps) + " of " + std::to_string(set.stats.steps) +
                " steps safeguarded, " + std::to_string(set.stats.repaired) + " surfaces repaired");
}

void stage_backtest(StageRun& run, const RunConfig& c) {
    const std::string& name = c.backtest.engine;
    if (name != "nsde" && name != "fhs") {
        throw UsageError("backtest.engine must be nsde or fhs, got '" + name + "'");
    }
    const SurfacePanel panel = load_panel(run);
    const auto catalog = build_catalog(panel.lattice);
    BacktestOptions options;
    options.horizons = c.backtest.horizons;
    options.alphas = c.backtest.alphas;
    options.scenarios = c.backtest.scenarios;
    options.seed = c.seed;
    options.threads = c.threads;
    options.test_begin = panel.rows() - static_cast<Eigen::Index>(c.backtest.test_days);
    if (options.test_begin < 1) {
        throw UsageError("backtest.test_days exceeds the panel length");
    }

    BacktestReport report;
    if (name == "nsde") {
        const FactorModel factors = load_factors(run);
        const ModelSet models = model_set_from_json(run.artifact_input("models.json", "train"));
        const ConstraintSystem constraints = build_constraints(panel.lattice);
        const ScenarioEngine engine(models, factors, constraints);
        report = run_backtest(NsdeRiskEngine(engine, panel, c.simulate.mode), panel, catalog, options);
    } else {
        const SurfacePanel train = training_panel(panel, c);
        const auto fits =
            calibrate_history(panel.prices, panel.lattice, compute_vega_weights(train).lambda, panel.spot);
        std::ostringstream history;
        write_parameter_history(history, panel.dates, fits);
        run.output("heston_history.csv", history.str());
        std::vector<HestonParams> params;
        for (const auto& f : fits) {
            params.push_back(f.params);
        }
        report = run_backtest(FhsRiskEngine(panel, params, heston_default_tolerance, c.backtest.fhs_decay), panel,
                              catalog, options);
    }

    const std::string stem = "backtest_" + name;
    std::ostringstream records, summary, breaches, ratios;
    write_backtest_records(records, report, catalog);
    write_backtest_summary(summary, report);
    write_breach_series(breaches, report, catalog);
    write_trough_to_peak(ratios, report, catalog);
    run.output(stem + "_records.jsonl", records.str());
    run.output(stem + "_summary.txt", summary.str());
    run.output(stem + "_breaches.csv", breaches.str());
    run.output(stem + "_trough_to_peak.csv", ratios.str());
    json log = {{"engine", report.engine},
                {"portfolios", catalog.size()},
                {"scenarios", report.scenarios},
                {"seed", report.seed},
                {"repaired_scenarios", report.repaired_scenarios},
                {"skipped", report.skipped},
                {"warnings", report.warnings}};
    run.output(stem + "_log.json", log.dump(2));
    run.message(summary.str());
    run.message("backtest: " + std::to_string(catalog.size()) + " portfolios, " +
                std::to_string(report.skipped.size()) + " skipped forecast dates");
}

bool stage_current(const std::string& stage, const RunConfig& config) {
    const std::string hash = config_hash(config, stage);
    for (const auto& name : stage_outputs(stage, config)) {
        const auto p = config.run_path() / name;
        if (!std::filesystem::exists(p)) {
            return false;
        }
        ArtifactHeader h;
        try {
            h = read_artifact_header(p);
        } catch (const Error&) {
            return false;
        }
        if (h.schema != artifact_schema_version || h.config != hash) {
            return false;
        }
        for (const auto& [input, sha] : h.inputs) {
            const auto q = input == config.raw_quotes && !input.empty() ? config.data_root / input
                                                                        : config.run_path() / input;
            if (!std::filesystem::exists(q) || digest(q) != sha) {
                return false;
            }
        }
    }
    return true;
}

}  // namespace

RunConfig parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml_text);
    } catch (const YAML::Exception& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    if (!root || root.IsNull()) {
        root = YAML::Node(YAML::NodeType::Map);
    }
    for (const auto& o : overrides) {
        apply_override(root, o);
    }

    RunConfig c;
    Section top(root, "");
    if (!top.read("seed", c.seed)) {
        throw UsageError("config: 'seed' is required");
    }
    top.read("threads", c.threads);
    {
        Section s = top.child("paths");
        s.read("run_dir", c.run_dir);
        s.read("raw_quotes", c.raw_quotes);
        s.finish();
    }
    {
        Section s = top.child("synth");
        s.read("days", c.synth.days);
        s.read("spot", c.synth.spot);
        s.read("initial_var", c.synth.initial_var);
        s.read("long_run_var", c.synth.long_run_var);
        s.read("reversion", c.synth.reversion);
        s.read("vol_of_vol", c.synth.vol_of_vol);
        s.read("rho", c.synth.rho);
        s.read("long_run_vol", c.synth.long_run_vol);
        s.read("price_noise", c.synth.price_noise);
        s.read("tau_days", c.synth.tau_days);
        s.read("quote_deltas", c.synth.quote_deltas);
        s.read("label", c.synth.label);
        s.read("start_date", c.synth.start_date);
        s.finish();
    }
    {
        Section s = top.child("lattice");
        s.read("deltas", c.lattice.deltas);
        s.read("min_dates", c.lattice.min_dates);
        s.finish();
    }
    {
        Section s = top.child("decode");
        s.read("primary", c.decode.primary);
        s.read("secondary", c.secondary);
        s.read("search_components", c.decode.search_components);
        s.read("angle_grid", c.decode.angle_grid);
        s.read("sweeps", c.decode.sweeps);
        s.read("pda_sample_dates", c.decode.pda_sample_dates);
        s.finish();
    }
    {
        Section s = top.child("train");
        read_training(s.child("factor"), c.train.factor_training);
        read_training(s.child("index"), c.train.index_training);
        s.read("joint", c.train.joint);
        s.read("damping_fraction", c.train.damping_fraction);
        s.finish();
    }
    {
        Section s = top.child("simulate");
        s.read("horizon_days", c.simulate.horizon_days);
        s.read("scenarios", c.simulate.scenarios);
        s.read("paths", c.simulate.paths);
        std::string mode;
        if (s.read("innovations", mode)) {
            c.simulate.mode = parse_innovation_mode(mode);
        }
        s.read("start_row", c.simulate.start_row);
        s.finish();
    }
    {
        Section s = top.child("backtest");
        s.read("engine", c.backtest.engine);
        s.read("horizons", c.backtest.horizons);
        s.read("alphas", c.backtest.alphas);
        s.read("scenarios", c.backtest.scenarios);
        s.read("test_days", c.backtest.test_days);
        s.read("fhs_decay", c.backtest.fhs_decay);
        s.finish();
    }
    top.finish();

    if (c.decode.primary != 2 && c.decode.primary != 3) {
        throw UsageError("config: decode.primary must be 2 or 3");
    }
    if (c.secondary < 0 || c.synth.days < 2 || c.simulate.horizon_days < 1 || c.simulate.scenarios == 0) {
        throw UsageError("config: decode.secondary, synth.days, simulate.horizon_days and simulate.scenarios must be "
                         "positive");
    }
    if (c.backtest.engine != "nsde" && c.backtest.engine != "fhs") {
        throw UsageError("config: backtest.engine must be nsde or fhs");
    }
    if (c.threads == 0) {
        c.threads = 1;
    }
    const char* root_env = std::getenv("OPTRISK_DATA_ROOT");
    c.data_root = root_env && *root_env ? std::filesystem::path(root_env) : std::filesystem::current_path();
    return c;
}

RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
    if (!std::filesystem::exists(file)) {
        throw UsageError("config file " + file.string() + " does not exist");
    }
    return parse_config(read_file(file), overrides);
}

std::string canonical_config(const RunConfig& c, const std::string& stage) {
    const auto& names = stage_names;
    const auto pos = std::find(names.begin(), names.end(), stage);
    if (pos == names.end()) {
        throw UsageError("unknown stage '" + stage + "'");
    }
    // Stages form a chain, except that backtest does not read simulate outputs.
    auto upto = [&](const char* s) {
        return std::find(names.begin(), names.end(), s) <= pos && !(stage == "backtest" && std::string(s) == "simulate");
    };
    json j;
    j["schema"] = artifact_schema_version;
    j["seed"] = c.seed;
    if (c.raw_quotes.empty()) {
        j["synth"] = {{"days", c.synth.days},
                      {"spot", c.synth.spot},
                      {"initial_var", c.synth.initial_var},
                      {"long_run_var", c.synth.long_run_var},
                      {"reversion", c.synth.reversion},
                      {"vol_of_vol", c.synth.vol_of_vol},
                      {"rho", c.synth.rho},
                      {"long_run_vol", c.synth.long_run_vol},
                      {"price_noise", c.synth.price_noise},
                      {"tau_days", c.synth.tau_days},
                      {"quote_deltas", quote_deltas(c)},
                      {"label", c.synth.label},
                      {"start_date", c.synth.start_date}};
    }
    if (upto("ingest")) {
        j["raw_quotes"] = c.raw_quotes;
        j["lattice"] = {{"deltas", lattice_options(c).deltas}, {"min_dates", c.lattice.min_dates}};
    }
    if (upto("decode")) {
        j["decode"] = {{"primary", c.decode.primary},
                       {"secondary", c.secondary},
                       {"search_components", c.decode.search_components},
                       {"angle_grid", c.decode.angle_grid},
                       {"sweeps", c.decode.sweeps},
                       {"pda_sample_dates", c.decode.pda_sample_dates},
                       {"test_days", c.backtest.test_days}};
    }
    if (upto("train")) {
        j["train"] = {{"factor", training_json(c.train.factor_training)},
                      {"index", training_json(c.train.index_training)},
                      {"joint", c.train.joint},
                      {"damping_fraction", c.train.damping_fraction}};
    }
    if (upto("simulate")) {
        j["simulate"] = {{"horizon_days", c.simulate.horizon_days},
                         {"scenarios", c.simulate.scenarios},
                         {"paths", c.simulate.paths},
                         {"innovations", to_string(c.simulate.mode)},
                         {"start_row", c.simulate.start_row}};
    }
    if (upto("backtest")) {
        // The engine is part of the artifact names, so runs of both engines coexist.
        j["backtest"] = {{"horizons", c.backtest.horizons},
                         {"alphas", c.backtest.alphas},
                         {"scenarios", c.backtest.scenarios},
                         {"innovations", to_string(c.simulate.mode)},
                         {"fhs_decay", c.backtest.fhs_decay}};
    }
    return j.dump();
}

std::string config_hash(const RunConfig& config, const std::string& stage) {
    return sha256_hex(canonical_config(config, stage));
}


void write_artifact(const std::filesystem::path& path, const ArtifactHeader& header, const std::string& payload) {
    const std::string ext = path.extension().string();
    std::string content;
    if (ext == ".json") {
        json wrapped = {{"artifact", header_json(header)}, {"payload", json::parse(payload)}};
        content = wrapped.dump(1) + "\n";
    } else if (ext == ".jsonl") {
        content = json{{"artifact", header_json(header)}}.dump() + "\n" + payload;
    } else {
        content = header_prefix + header_json(header).dump() + "\n" + payload;
    }
    std::filesystem::create_directories(path.parent_path());
    write_file_atomic(path, content);
}

std::pair<ArtifactHeader, std::string> read_artifact(const std::filesystem::path& path) {
    const std::string content = read_file(path);
    const std::string ext = path.extension().string();
    try {
        if (ext == ".json") {
            const json j = json::parse(content);
            return {header_from_json(j.at("artifact"), path), j.at("payload").dump()};
        }
        const auto eol = content.find('\n');
        const std::string first = content.substr(0, eol);
        const std::string rest = eol == std::string::npos ? std::string() : content.substr(eol + 1);
        if (ext == ".jsonl") {
            return {header_from_json(json::parse(first).at("artifact"), path), rest};
        }
        if (first.rfind(header_prefix, 0) != 0) {
            throw UsageError(path.string() + " has no artifact header");
        }
        return {header_from_json(json::parse(first.substr(std::string(header_prefix).size())), path), rest};
    } catch (const json::exception& e) {
        throw UsageError(path.string() + ": malformed artifact: " + e.what());
    }
}

ArtifactHeader read_artifact_header(const std::filesystem::path& path) { return read_artifact(path).first; }

std::vector<std::string> stage_outputs(const std::string& stage, const RunConfig& config) {
    if (stage == "synth") {
        return {"raw_quotes.csv", "heston_path.csv"};
    }
    if (stage == "ingest") {
        return {"panel.csv", "ingest_stats.json"};
    }
    if (stage == "decode") {
        return {"factor_model.txt", "decode_metrics.txt", "factor_series.csv"};
    }
    if (stage == "train") {
        return {"models.json", "loss_curves.csv", "residual_qq.csv"};
    }
    if (stage == "simulate") {
        return {"scenarios.csv", "paths.csv", "ivs_snapshots.csv", "vix_series.csv"};
    }
    if (stage == "backtest") {
        const std::string stem = "backtest_" + config.backtest.engine;
        std::vector<std::string> out{stem + "_records.jsonl", stem + "_summary.txt", stem + "_breaches.csv",
                                     stem + "_trough_to_peak.csv", stem + "_log.json"};
        if (config.backtest.engine == "fhs") {
            out.insert(out.begin(), "heston_history.csv");
        }
        return out;
    }
    throw UsageError("unknown stage '" + stage + "'");
}

StageResult run_stage(const std::string& stage, const RunConfig& config, bool force) {
    const std::vector<std::string> outputs = stage_outputs(stage, config);
    if (!force && stage_current(stage, config)) {
        StageResult r{stage, true, outputs, {stage + ": outputs are current for config " +
                                             config_hash(config, stage).substr(0, 12) + ", nothing to do"}};
        return r;
    }
    const auto start = std::chrono::steady_clock::now();
    StageRun run(stage, config);
    if (stage == "synth") {
        stage_synth(run, config);
    } else if (stage == "ingest") {
        stage_ingest(run, config);
    } else if (stage == "decode") {
        stage_decode(run, config);
    } else if (stage == "train") {
        stage_train(run, config);
    } else if (stage == "simulate") {
        stage_simulate(run, config);
    } else {
        stage_backtest(run, config);
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ofstream log(config.run_path() / "run.log", std::ios::app);
    log << utc_timestamp() << ' ' << stage << " config=" << config_hash(config, stage) << " seconds=" << std::fixed
        << std::setprecision(2) << seconds << " threads=" << config.threads << '\n';
    return run.finish();
}

VerifyReport verify_run(const RunConfig& config) {
    VerifyReport report;
    const auto dir = config.run_path();
    if (!std::filesystem::is_directory(dir)) {
        report.problems.push_back("run directory " + dir.string() + " does not exist");
        return report;
    }
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().filename() != "run.log" &&
            entry.path().filename().string().find(".tmp") == std::string::npos) {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
        const std::string name = p.filename().string();
        report.artifacts.emplace_back(name, digest(p));
        ArtifactHeader h;
        try {
            h = read_artifact_header(p);
        } catch (const Error& e) {
            report.problems.push_back(name + ": " + e.what());
            continue;
        }
        if (h.schema != artifact_schema_version) {
            report.problems.push_back(name + ": schema " + std::to_string(h.schema) + ", expected " +
                                      std::to_string(artifact_schema_version));
        }
        const std::string hash = config_hash(config, h.stage);
        if (h.config != hash) {
            report.problems.push_back(name + ": " + h.stage + " config " + h.config.substr(0, 12) +
                                      " differs from current " + hash.substr(0, 12));
        }
        for (const auto& [input, sha] : h.inputs) {
            const auto q = !config.raw_quotes.empty() && input == config.raw_quotes ? config.data_root / input
                                                                                     : dir / input;
            if (!std::filesystem::exists(q)) {
                report.problems.push_back(name + ": input " + input + " is missing");
            } else if (digest(q) != sha) {
                report.problems.push_back(name + ": input " + input + " changed after " + h.stage + " ran");
            }
        }
    }
    if (files.empty()) {
        report.problems.push_back("run directory " + dir.string() + " holds no artifacts");
    }
    return report;
}

}  // namespace optrisk
