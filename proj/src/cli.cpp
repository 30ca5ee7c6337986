#include "cbwsdid/cli.hpp"

#include "cbwsdid/error.hpp"
#include "cbwsdid/pipeline.hpp"
#include "cbwsdid/report.hpp"
#include "cbwsdid/simulate.hpp"
#include "cbwsdid/textio.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace cbwsdid {

namespace {

using nlohmann::json;

enum class Kind { Int, Real, Text, TextList, IntList, Flag, CovariateLags };

struct OptionSpec {
    const char* name;
    Kind kind;
    const char* help;
};

// Options shared by estimate and diagnose.
const std::vector<OptionSpec> kDataOptions = {
    {"data", Kind::Text, "panel file (delimited text with a header row)"},
    {"unit", Kind::Text, "unit id column"},
    {"time", Kind::Text, "integer period column"},
    {"outcome", Kind::Text, "outcome column"},
    {"treatment", Kind::Text, "0/1 treatment column"},
    {"covariates", Kind::TextList, "covariate columns, comma separated"},
    {"delimiter", Kind::Text, "field delimiter: ',' or 'tab'"},
};

const std::vector<OptionSpec> kStackOptions = {
    {"mode", Kind::Text, "absorbing | episode01 | episode10"},
    {"kappa-pre", Kind::Int, "pre-treatment periods in the window (>= 1)"},
    {"kappa-post", Kind::Int, "post-treatment periods in the window (>= 0)"},
    {"lags", Kind::Int, "treatment-history length L in episode modes"},
    {"onset-only", Kind::Flag, "episode treated units need D = 1 at onset only"},
};

const std::vector<OptionSpec> kDesignOptions = {
    {"design", Kind::Text, "uniform | match | ebalance"},
    {"ratio", Kind::Int, "controls matched per treated unit"},
    {"replace", Kind::Flag, "match with replacement"},
    {"no-replace", Kind::Flag, "match without replacement"},
    {"distance", Kind::Text, "mahalanobis | rank-mahalanobis"},
    {"caliper", Kind::Real, "maximum matching distance"},
    {"exact", Kind::TextList, "covariates that must agree exactly (read at a-1)"},
    {"outcome-lags", Kind::IntList, "outcome lags used as design covariates"},
    {"covariate-lags", Kind::CovariateLags, "NAME:LAG,LAG;NAME:LAG covariate lags"},
    {"log", Kind::TextList, "variables entered in logs ('outcome' for the outcome)"},
    {"lenient-missing", Kind::Flag, "drop treated units lacking design lags instead of failing"},
    {"balance-tol", Kind::Real, "entropy balancing moment tolerance"},
    {"balance-max-iter", Kind::Int, "entropy balancing iteration cap"},
    {"on-failure", Kind::Text, "error | uniform when balancing does not converge"},
};

const std::vector<OptionSpec> kInferenceOptions = {
    {"se", Kind::Text, "analytic | bootstrap"},
    {"bootstrap", Kind::Int, "bootstrap replicates B"},
    {"cluster", Kind::Text, "unit | frame-unit"},
    {"seed", Kind::Int, "random seed"},
    {"threads", Kind::Int, "worker cap; results do not depend on it"},
    {"uncorrected", Kind::Flag, "set all control weights to 1 (plain stacked regression)"},
};

const std::vector<OptionSpec> kOutputOptions = {
    {"out", Kind::Text, "output path prefix"},
    {"plot", Kind::Text, "event-study SVG path"},
};

const std::vector<OptionSpec> kSimulateOptions = {
    {"units", Kind::Int, "number of units S"},
    {"seed", Kind::Int, "random seed"},
    {"null", Kind::Flag, "placebo process: no effects, no selection"},
    {"out", Kind::Text, "output path"},
};

const std::vector<OptionSpec> kMonteCarloOptions = {
    {"reps", Kind::Int, "replicates"},
    {"estimators", Kind::TextList, "sdid, wsdid, match, ebalance"},
    {"threads", Kind::Int, "worker cap; results do not depend on it"},
    {"kappa-pre", Kind::Int, "pre-treatment periods in the window"},
    {"kappa-post", Kind::Int, "post-treatment periods in the window"},
};

// Keys excluded from echoed configs so outputs do not depend on them.
const std::set<std::string> kNotEchoed = {"threads", "config"};

std::vector<OptionSpec> concat(std::initializer_list<const std::vector<OptionSpec>*> groups,
                               std::set<std::string> seen = {}) {
    std::vector<OptionSpec> out;
    for (const auto* g : groups)
        for (const auto& o : *g)
            if (seen.insert(o.name).second) out.push_back(o);
    return out;
}

struct Command {
    CLI::App* app = nullptr;
    std::vector<OptionSpec> options;
    std::map<std::string, std::vector<std::string>> raw;
    std::string config_path;
};

void register_options(Command& cmd) {
    cmd.app->add_option("--config", cmd.config_path, "JSON config; flags override its keys");
    for (const auto& o : cmd.options) {
        const std::string flag = std::string("--") + o.name;
        auto& slot = cmd.raw[o.name];
        if (o.kind == Kind::Flag) {
            cmd.app->add_flag_callback(flag, [&slot] { slot.push_back("true"); }, o.help);
        } else {
            auto* opt = cmd.app->add_option(flag, slot, o.help);
            switch (o.kind) {
                case Kind::Int: opt->type_name("INT"); break;
                case Kind::Real: opt->type_name("NUM"); break;
                case Kind::IntList: opt->type_name("INT,..."); break;
                case Kind::TextList: opt->type_name("NAME,..."); break;
                case Kind::CovariateLags: opt->type_name("SPEC"); break;
                default: opt->type_name("TEXT"); break;
            }
            opt->expected(1);
            if (o.kind == Kind::CovariateLags || o.kind == Kind::TextList || o.kind == Kind::IntList)
                opt->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
            else
                opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        }
    }
}

std::vector<std::string> split_list(const std::string& text, char sep = ',') {
    std::vector<std::string> out;
    for (auto& item : split_delimited(text, sep))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::int64_t to_int(const std::string& flag, const std::string& text) {
    const auto v = parse_integer(text);
    if (!v) throw InputError("--" + flag + " expects an integer, got '" + text + "'", {flag});
    return *v;
}

double to_real(const std::string& flag, const std::string& text) {
    const auto v = parse_real(text);
    if (!v) throw InputError("--" + flag + " expects a number, got '" + text + "'", {flag});
    return *v;
}

json covariate_lags_from_text(const std::vector<std::string>& items) {
    json out = json::object();
    for (const auto& item : items) {
        for (const auto& group : split_list(item, ';')) {
            const auto colon = group.find(':');
            if (colon == std::string::npos || colon == 0)
                throw InputError("--covariate-lags expects NAME:LAG[,LAG...], got '" + group + "'",
                                 {"covariate-lags"});
            json lags = json::array();
            for (const auto& l : split_list(group.substr(colon + 1)))
                lags.push_back(to_int("covariate-lags", l));
            out[group.substr(0, colon)] = lags;
        }
    }
    return out;
}

json flags_to_json(const Command& cmd) {
    json out = json::object();
    for (const auto& o : cmd.options) {
        const auto& values = cmd.raw.at(o.name);
        if (values.empty()) continue;
        switch (o.kind) {
            case Kind::Flag: out[o.name] = true; break;
            case Kind::Int: out[o.name] = to_int(o.name, values.back()); break;
            case Kind::Real: out[o.name] = to_real(o.name, values.back()); break;
            case Kind::Text: out[o.name] = values.back(); break;
            case Kind::TextList: {
                json arr = json::array();
                for (const auto& v : values)
                    for (const auto& item : split_list(v)) arr.push_back(item);
                out[o.name] = arr;
                break;
            }
            case Kind::IntList: {
                json arr = json::array();
                for (const auto& v : values)
                    for (const auto& item : split_list(v)) arr.push_back(to_int(o.name, item));
                out[o.name] = arr;
                break;
            }
            case Kind::CovariateLags: out[o.name] = covariate_lags_from_text(values); break;
        }
    }
    // --replace and --no-replace collapse into one key.
    if (out.contains("no-replace")) {
        if (out.contains("replace")) throw InputError("--replace and --no-replace are exclusive");
        out.erase("no-replace");
        out["replace"] = false;
    }
    return out;
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config file '" + path + "'", {path});
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw InputError("config file '" + path + "' is not valid JSON: " + e.what(), {path});
    }
    if (!j.is_object()) throw InputError("config file must hold a JSON object", {path});
    return j;
}

// Defaults, then the config file, then flags. Unknown keys are errors.
json merge_config(const Command& cmd, const json& defaults, const std::set<std::string>& extra_keys = {}) {
    std::set<std::string> known(extra_keys);
    for (const auto& o : cmd.options) known.insert(o.name);
    known.erase("no-replace");
    json merged = defaults;
    const auto file = load_config(cmd.config_path);
    for (const auto& [k, v] : file.items()) {
        if (!known.count(k)) throw InputError("unknown config key '" + k + "'", {k});
        merged[k] = v;
    }
    const auto flags = flags_to_json(cmd);
    for (const auto& [k, v] : flags.items()) merged[k] = v;
    return merged;
}

json echoed(const json& config) {
    json out = json::object();
    for (const auto& [k, v] : config.items())
        if (!kNotEchoed.count(k)) out[k] = v;
    return out;
}

template <typename T>
T get(const json& cfg, const std::string& key) {
    try {
        return cfg.at(key).get<T>();
    } catch (const json::exception&) {
        throw InputError("config key '" + key + "' is missing or has the wrong type", {key});
    }
}

bool has(const json& cfg, const std::string& key) { return cfg.contains(key) && !cfg.at(key).is_null(); }

char parse_delimiter(const std::string& text) {
    if (text == "tab" || text == "\\t" || text == "\t") return '\t';
    if (text.size() == 1) return text[0];
    throw InputError("delimiter must be a single character or 'tab'", {"delimiter"});
}

json estimation_defaults() {
    return {{"unit", "unit"},           {"time", "time"},
            {"outcome", "y"},           {"treatment", "d"},
            {"covariates", json::array()}, {"delimiter", ","},
            {"mode", "absorbing"},      {"kappa-pre", 3},
            {"kappa-post", 2},          {"lags", 1},
            {"onset-only", false},      {"design", "uniform"},
            {"ratio", 1},               {"replace", true},
            {"distance", "mahalanobis"}, {"exact", json::array()},
            {"outcome-lags", json::array()}, {"covariate-lags", json::object()},
            {"log", json::array()},     {"lenient-missing", false},
            {"balance-tol", 1e-8},      {"balance-max-iter", 200},
            {"on-failure", "error"},    {"se", "analytic"},
            {"bootstrap", 999},         {"cluster", "unit"},
            {"seed", 1},                {"threads", 1},
            {"uncorrected", false}};
}

PanelSchema schema_from(const json& cfg) {
    PanelSchema s;
    s.unit = get<std::string>(cfg, "unit");
    s.time = get<std::string>(cfg, "time");
    s.outcome = get<std::string>(cfg, "outcome");
    s.treatment = get<std::string>(cfg, "treatment");
    s.covariates = get<std::vector<std::string>>(cfg, "covariates");
    s.delimiter = parse_delimiter(get<std::string>(cfg, "delimiter"));
    return s;
}

EventWindow window_from(const json& cfg) {
    EventWindow w{get<int>(cfg, "kappa-pre"), get<int>(cfg, "kappa-post")};
    w.validate();
    return w;
}

DesignOptions design_from(const json& cfg) {
    DesignOptions d;
    const auto method = get<std::string>(cfg, "design");
    if (method == "uniform") d.method = DesignMethod::Uniform;
    else if (method == "match") d.method = DesignMethod::NearestNeighbor;
    else if (method == "ebalance") d.method = DesignMethod::Entropy;
    else throw InputError("--design must be uniform, match or ebalance, got '" + method + "'", {"design"});

    auto& cov = d.covariates;
    cov.outcome_lags = get<std::vector<int>>(cfg, "outcome-lags");
    const auto& lags = cfg.at("covariate-lags");
    if (!lags.is_object()) throw InputError("covariate-lags must map covariate names to lag lists", {"covariate-lags"});
    for (const auto& [name, list] : lags.items()) {
        try {
            cov.covariate_lags.emplace_back(name, list.get<std::vector<int>>());
        } catch (const json::exception&) {
            throw InputError("covariate-lags for '" + name + "' must be a list of integers", {name});
        }
    }
    cov.exact = get<std::vector<std::string>>(cfg, "exact");
    for (const auto& name : get<std::vector<std::string>>(cfg, "log")) cov.log_transform.insert(name);
    cov.treated_missing_is_error = !get<bool>(cfg, "lenient-missing");

    d.match.ratio = get<int>(cfg, "ratio");
    if (d.match.ratio < 1) throw InputError("--ratio must be at least 1", {"ratio"});
    d.match.replacement = get<bool>(cfg, "replace");
    const auto distance = get<std::string>(cfg, "distance");
    if (distance == "mahalanobis") d.match.distance = Distance::Mahalanobis;
    else if (distance == "rank-mahalanobis" || distance == "rank") d.match.distance = Distance::RankMahalanobis;
    else throw InputError("--distance must be mahalanobis or rank-mahalanobis", {"distance"});
    if (has(cfg, "caliper")) {
        d.match.caliper = get<double>(cfg, "caliper");
        if (!(*d.match.caliper > 0)) throw InputError("--caliper must be positive", {"caliper"});
    }

    d.balance.tolerance = get<double>(cfg, "balance-tol");
    if (!(d.balance.tolerance > 0)) throw InputError("--balance-tol must be positive", {"balance-tol"});
    d.balance.max_iter = get<int>(cfg, "balance-max-iter");
    if (d.balance.max_iter < 1) throw InputError("--balance-max-iter must be at least 1", {"balance-max-iter"});
    const auto on_failure = get<std::string>(cfg, "on-failure");
    if (on_failure == "error") d.balance.on_failure = OnFailure::Error;
    else if (on_failure == "uniform") d.balance.on_failure = OnFailure::FallbackUniform;
    else throw InputError("--on-failure must be error or uniform", {"on-failure"});
    return d;
}

RunSpec run_spec_from(const json& cfg) {
    RunSpec spec;
    const auto mode = get<std::string>(cfg, "mode");
    if (mode == "absorbing") spec.mode = FrameMode::Absorbing;
    else if (mode == "episode01") spec.mode = FrameMode::Episode01;
    else if (mode == "episode10") spec.mode = FrameMode::Episode10;
    else throw InputError("--mode must be absorbing, episode01 or episode10, got '" + mode + "'", {"mode"});
    spec.window = window_from(cfg);
    spec.lags = get<int>(cfg, "lags");
    if (spec.mode != FrameMode::Absorbing && spec.lags < 1)
        throw InputError("episode modes need --lags >= 1", {"lags"});
    spec.onset_only = get<bool>(cfg, "onset-only");
    spec.design = design_from(cfg);

    const auto se = get<std::string>(cfg, "se");
    if (se == "analytic") spec.inference = Inference::Analytic;
    else if (se == "bootstrap") spec.inference = Inference::Bootstrap;
    else throw InputError("--se must be analytic or bootstrap", {"se"});
    spec.bootstrap.replicates = get<int>(cfg, "bootstrap");
    if (spec.bootstrap.replicates < 2) throw InputError("--bootstrap needs at least 2 replicates", {"bootstrap"});
    spec.bootstrap.seed = get<std::uint64_t>(cfg, "seed");
    spec.bootstrap.threads = get<int>(cfg, "threads");
    if (spec.bootstrap.threads < 1) throw InputError("--threads must be at least 1", {"threads"});

    const auto cluster = get<std::string>(cfg, "cluster");
    if (cluster == "unit") spec.cluster = ClusterLevel::Unit;
    else if (cluster == "frame-unit") spec.cluster = ClusterLevel::FrameUnit;
    else throw InputError("--cluster must be unit or frame-unit", {"cluster"});
    spec.uncorrected = get<bool>(cfg, "uncorrected");
    return spec;
}

std::ofstream open_output(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write '" + path + "'", {path});
    return f;
}

void write_json(const std::string& path, const json& doc) {
    auto f = open_output(path);
    f << doc.dump(2) << '\n';
}

struct EstimationInputs {
    json config;
    PanelData panel;
    RunSpec spec;
};

EstimationInputs prepare_estimation(const Command& cmd) {
    EstimationInputs in;
    in.config = merge_config(cmd, estimation_defaults());
    if (!has(in.config, "data")) throw InputError("--data is required", {"data"});
    // Asking for B replicates implies bootstrap inference unless --se says otherwise.
    const auto file = load_config(cmd.config_path);
    const bool se_given = !cmd.raw.at("se").empty() || file.contains("se");
    const bool bootstrap_given = !cmd.raw.at("bootstrap").empty() || file.contains("bootstrap");
    if (bootstrap_given && !se_given) in.config["se"] = "bootstrap";
    in.spec = run_spec_from(in.config);
    in.panel = load_panel_file(get<std::string>(in.config, "data"), schema_from(in.config));
    return in;
}

int cmd_estimate(const Command& cmd, std::ostream& out) {
    auto in = prepare_estimation(cmd);
    const auto run = run_estimation(in.panel, in.spec);
    if (has(in.config, "out")) {
        const auto prefix = get<std::string>(in.config, "out");
        {
            auto f = open_output(prefix + ".csv");
            write_result_csv(f, run.result);
        }
        {
            auto f = open_output(prefix + "_weights.csv");
            write_weights_csv(f, run.plan, in.panel, run.design, run.weights);
        }
        auto doc = run_to_json(run, in.panel);
        doc["config"] = echoed(in.config);
        write_json(prefix + ".json", doc);
    } else {
        write_result_csv(out, run.result);
    }
    if (has(in.config, "plot")) {
        auto f = open_output(get<std::string>(in.config, "plot"));
        write_event_study_svg(f, run.result);
    }
    return kExitOk;
}

int cmd_diagnose(const Command& cmd, std::ostream& out) {
    auto in = prepare_estimation(cmd);
    // Diagnostics need no standard errors.
    in.spec.inference = Inference::Analytic;
    const auto run = run_estimation(in.panel, in.spec);
    write_diagnosis(out, run, in.panel);
    if (has(in.config, "out")) {
        auto doc = run_to_json(run, in.panel);
        doc["config"] = echoed(in.config);
        write_json(get<std::string>(in.config, "out") + ".json", doc);
    }
    return kExitOk;
}

DgpParams dgp_from(const json& cfg) {
    DgpParams p = get<bool>(cfg, "null") ? DgpParams::null_config() : DgpParams{};
    if (has(cfg, "dgp")) p = dgp_from_json(cfg.at("dgp"), p);
    p.units = get<int>(cfg, "units");
    p.validate();
    return p;
}

int cmd_simulate(const Command& cmd, std::ostream& out) {
    const json defaults = {{"units", 500}, {"seed", 1}, {"null", false}};
    auto cfg = merge_config(cmd, defaults, {"dgp"});
    const auto params = dgp_from(cfg);
    const auto panel = simulate_panel(params, get<std::uint64_t>(cfg, "seed"));
    PanelSchema schema;
    schema.covariates = {"x1", "x2"};
    if (has(cfg, "out")) {
        auto f = open_output(get<std::string>(cfg, "out"));
        write_panel(f, panel, schema);
    } else {
        write_panel(out, panel, schema);
    }
    return kExitOk;
}

int cmd_montecarlo(const Command& cmd, std::ostream& out) {
    const auto mc_defaults = McConfig::defaults();
    json defaults = estimation_defaults();
    for (const char* k : {"unit", "time", "outcome", "treatment", "covariates", "delimiter", "mode", "lags",
                          "onset-only", "design", "se", "bootstrap", "cluster", "uncorrected"})
        defaults.erase(k);
    defaults["units"] = 500;
    defaults["null"] = false;
    defaults["reps"] = mc_defaults.reps;
    defaults["seed"] = mc_defaults.seed;
    defaults["estimators"] = {"match", "ebalance", "sdid", "wsdid"};
    defaults["ratio"] = mc_defaults.design.match.ratio;
    defaults["outcome-lags"] = mc_defaults.design.covariates.outcome_lags;
    defaults["covariate-lags"] = {{"x1", {1}}};
    defaults["exact"] = mc_defaults.design.covariates.exact;

    auto cfg = merge_config(cmd, defaults, {"dgp"});
    cfg["design"] = "uniform";  // read by design_from; each arm sets its own method
    const auto params = dgp_from(cfg);

    McConfig mc = mc_defaults;
    mc.reps = get<int>(cfg, "reps");
    if (mc.reps < 1) throw InputError("--reps must be at least 1", {"reps"});
    mc.seed = get<std::uint64_t>(cfg, "seed");
    mc.threads = get<int>(cfg, "threads");
    if (mc.threads < 1) throw InputError("--threads must be at least 1", {"threads"});
    mc.window = window_from(cfg);
    mc.design = design_from(cfg);
    mc.estimators.clear();
    for (const auto& name : get<std::vector<std::string>>(cfg, "estimators"))
        mc.estimators.push_back(parse_mc_estimator(name));
    if (mc.estimators.empty()) throw InputError("--estimators must name at least one estimator", {"estimators"});
    cfg.erase("design");

    const auto result = monte_carlo(params, mc);
    if (has(cfg, "out")) {
        const auto prefix = get<std::string>(cfg, "out");
        {
            auto f = open_output(prefix + ".csv");
            write_mc_csv(f, result);
        }
        json failures = json::object();
        for (std::size_t k = 0; k < mc.estimators.size(); ++k) failures[to_string(mc.estimators[k])] = result.failures[k];
        json manifest = {{"dgp", dgp_to_json(params)},
                         {"seed", mc.seed},
                         {"reps", mc.reps},
                         {"failures", failures},
                         {"config", echoed(cfg)}};
        write_json(prefix + ".json", manifest);
    } else {
        write_mc_csv(out, result);
    }
    return kExitOk;
}

void report_error(std::ostream& err, const Error& e) {
    err << "error: " << e.what() << '\n';
    for (const auto& d : e.details()) err << "  - " << d << '\n';
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Covariate-balanced weighted stacked difference-in-differences", "cbwsdid"};
    app.require_subcommand(1);

    Command estimate, diagnose, simulate, montecarlo;
    estimate.app = app.add_subcommand("estimate", "estimate an event study");
    estimate.options = concat({&kDataOptions, &kStackOptions, &kDesignOptions, &kInferenceOptions, &kOutputOptions});
    diagnose.app = app.add_subcommand("diagnose", "print frames, balance tables and weight summaries");
    diagnose.options = concat({&kDataOptions, &kStackOptions, &kDesignOptions, &kInferenceOptions, &kOutputOptions});
    simulate.app = app.add_subcommand("simulate", "write one simulated panel");
    simulate.options = kSimulateOptions;
    montecarlo.app = app.add_subcommand("montecarlo", "run the Monte Carlo comparison");
    montecarlo.options = concat({&kMonteCarloOptions, &kSimulateOptions, &kDesignOptions}, {"design"});
    for (auto* c : {&estimate, &diagnose, &simulate, &montecarlo}) register_options(*c);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitInput;
    }

    try {
        if (estimate.app->parsed()) return cmd_estimate(estimate, out);
        if (diagnose.app->parsed()) return cmd_diagnose(diagnose, out);
        if (simulate.app->parsed()) return cmd_simulate(simulate, out);
        if (montecarlo.app->parsed()) return cmd_montecarlo(montecarlo, out);
    } catch (const Error& e) {
        report_error(err, e);
        return e.kind() == ErrorKind::Input ? kExitInput : kExitEstimation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitEstimation;
    }
    return kExitInput;
}

}  // namespace cbwsdid
