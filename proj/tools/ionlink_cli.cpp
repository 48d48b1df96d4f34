#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ionlink/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ionlink;

namespace {

enum Exit { Ok = 0, ConfigFailure = 1, BackgroundOnly = 2, NumericFailure = 3 };

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "ionlink_out";
    std::optional<double> duration;
    std::optional<std::int64_t> triggers;
    std::string input;
};

RunConfig load(const Options& o) {
    RunConfig c = o.config.empty() ? parse_config_string("") : parse_config(o.config);
    if (o.seed) c.seed = o.seed;
    if (o.duration) {
        if (!(*o.duration > 0)) throw ConfigError("--duration", "must be > 0");
        c.run_duration_s = *o.duration;
    }
    if (o.triggers) {
        if (*o.triggers < 1) throw ConfigError("--triggers", "must be >= 1");
        c.run_triggers = *o.triggers;
    }
    return c;
}

fs::path output_dir(const Options& o) {
    fs::path p(o.out);
    fs::create_directories(p);
    return p;
}

fs::path input_file(const Options& o) {
    if (o.input.empty()) throw ConfigError("--input", "this command needs an input file");
    return o.input;
}

int print(const Report& r, int code = Ok) {
    std::cout << r.text();
    return code;
}

int run(const std::string& command, const Options& o) {
    if (command == "schema") {
        std::cout << schema_text();
        return Ok;
    }
    const RunConfig cfg = load(o);
    if (command == "wavepacket") return print(run_wavepacket(cfg, output_dir(o)).report);
    if (command == "t1scan") return print(run_t1scan(cfg, output_dir(o)).report);
    if (command == "ratio") return print(run_ratio(cfg).report);
    if (command == "calibrate") return print(run_calibrate(cfg, output_dir(o)).report);
    if (command == "budget") return print(run_budget(cfg, output_dir(o)).report);
    if (command == "cw-run") return print(run_cw_link(cfg, cfg.run_duration_s, output_dir(o)).output.report);
    if (command == "seq-run") {
        const auto r = run_sequence_link(cfg, cfg.run_triggers, output_dir(o));
        return print(r.output.report, r.background_only ? BackgroundOnly : Ok);
    }
    if (command == "analyze") return print(run_analyze(cfg, input_file(o), o.duration, output_dir(o)).output.report);
    if (command == "correlate") {
        const auto r = run_correlate(cfg, input_file(o), o.duration, output_dir(o));
        return print(r.output.report, r.background_only ? BackgroundOnly : Ok);
    }
    throw ConfigError("", "unknown command " + command);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Heralded single-photon link between two trapped ions"};
    app.require_subcommand(1);
    Options o;

    struct Command {
        const char* name;
        const char* help;
    };
    const Command commands[] = {
        {"wavepacket", "photon arrival-time density after the 850 nm switch-on"},
        {"t1scan", "inverse wave packet duration versus 850 nm power"},
        {"cw-run", "continuous transmission and receiver dark periods"},
        {"seq-run", "triggered transmission, heralding efficiency and correlation"},
        {"analyze", "dark-period analysis of a detections or intervals file"},
        {"correlate", "trigger-jump correlation of a jumps or detections file"},
        {"budget", "efficiency chain and spectral overlap"},
        {"calibrate", "grid search for the three-photon resonance settings"},
        {"ratio", "steady-state R393/R397 with and without the 866 nm laser"},
        {"schema", "list every configuration key"},
    };
    std::string chosen;
    for (const auto& c : commands) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", o.config, "configuration file")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "master random seed");
        sub->add_option("--out", o.out, "output directory")->capture_default_str();
        sub->add_option("--duration", o.duration, "simulated or analysed duration in seconds");
        sub->add_option("--triggers", o.triggers, "number of sequence triggers");
        sub->add_option("--input", o.input, "input CSV file for analyze and correlate");
        sub->callback([&chosen, name = std::string(c.name)] { chosen = name; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return ConfigFailure;
    }

    try {
        return run(chosen, o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return ConfigFailure;
    } catch (const BackgroundOnlyError& e) {
        std::cerr << e.what() << "\n";
        return BackgroundOnly;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return NumericFailure;
    } catch (const DomainError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return ConfigFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return ConfigFailure;
    }
}
