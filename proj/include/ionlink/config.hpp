#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "analysis.hpp"
#include "bloch.hpp"
#include "channel.hpp"
#include "emitter.hpp"
#include "errors.hpp"
#include "receiver.hpp"

namespace ionlink {

struct LaserSettings {
    double rabi_mhz = 0.0;
    double detuning_mhz = 0.0;
    std::string polarization = "isotropic";
};

struct RunConfig {
    std::optional<std::uint64_t> seed;
    std::string atom_file;  // empty selects the built-in 40Ca+ model
    double field_gauss = 3.0;

    LaserSettings laser397{60.0, -10.0, "perpendicular"};
    LaserSettings laser866{60.0, -10.0, "perpendicular"};
    LaserSettings laser850{10.0, 0.0, "pi"};
    LaserSettings laser854{0.0, 0.0, "isotropic"};
    double abs_tol = 1e-10;
    double rel_tol = 1e-8;

    double wavepacket_window_us = 20.0;
    int wavepacket_points = 8001;
    double t1scan_power_min = 1.0;
    double t1scan_power_max = 30.0;
    int t1scan_points = 12;

    SequenceSchedule schedule;
    std::string emitter_arrival = "exponential";  // or "bloch"
    double emitter_t1_us = 1.1;
    double pump_success_prob = 0.95;
    double cw_rate_hz = 18e3;

    ChannelBudget channel;
    double photon_linewidth_mhz = 6.0;
    double p_peak = 4.3e-4;

    ReceiverParams receiver;

    double jump_bin_ms = 1.0;
    double jump_threshold = -1.0;
    int jump_hysteresis = 2;
    double jump_gap_factor = 10.0;
    double correlation_bin_us = 0.8;

    double run_duration_s = 60.0;
    std::int64_t run_triggers = 1000000;
    bool write_events = true;
    bool write_detections = true;

    // Keys that were present in the parsed file.
    std::vector<std::string> explicit_keys;

    bool is_explicit(const std::string& key) const {
        return std::find(explicit_keys.begin(), explicit_keys.end(), key) != explicit_keys.end();
    }
};

// ---------------------------------------------------------------------------
// Value formatting

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string trim(std::string_view s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string_view::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return std::string(s.substr(a, b - a + 1));
}

inline double parse_double(const std::string& key, const std::string& v) {
    double x = 0.0;
    const char* end = v.data() + v.size();
    auto r = std::from_chars(v.data(), end, x);
    if (r.ec != std::errc() || r.ptr != end || !std::isfinite(x)) throw ConfigError(key, "expected a number, got '" + v + "'");
    return x;
}

template <class Int>
Int parse_int(const std::string& key, const std::string& v) {
    Int x = 0;
    const char* end = v.data() + v.size();
    auto r = std::from_chars(v.data(), end, x);
    if (r.ec != std::errc() || r.ptr != end) throw ConfigError(key, "expected an integer, got '" + v + "'");
    return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(key, "expected true or false, got '" + v + "'");
}

}  // namespace detail

inline Polarization parse_polarization(const std::string& s) {
    if (s == "sigma-") return Polarization::sigma_minus();
    if (s == "pi") return Polarization::linear_pi();
    if (s == "sigma+") return Polarization::sigma_plus();
    if (s == "isotropic") return Polarization::from_amplitudes(1, 1, 1);
    if (s == "perpendicular") return Polarization::from_amplitudes(1, 0, 1);
    // Explicit real spherical amplitudes "a:b:c" for q = -1, 0, +1.
    std::array<double, 3> a{};
    std::size_t pos = 0;
    for (int i = 0; i < 3; ++i) {
        const auto next = s.find(':', pos);
        if ((i < 2) != (next != std::string::npos)) throw DomainError("unknown polarization '" + s + "'");
        const std::string part = s.substr(pos, i < 2 ? next - pos : std::string::npos);
        a[i] = detail::parse_double("polarization", part);
        pos = next + 1;
    }
    if (a[0] == 0 && a[1] == 0 && a[2] == 0) throw DomainError("polarization amplitudes are all zero");
    return Polarization::from_amplitudes(a[0], a[1], a[2]);
}

// ---------------------------------------------------------------------------
// Schema

struct ConfigKey {
    std::string key;
    std::string unit;
    std::string description;
    bool assumption;  // default encodes a modelling assumption not fixed by measurement
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

namespace detail {

template <class T>
ConfigKey number_key(std::string key, std::string unit, std::string desc, bool assumption, T RunConfig::*field) {
    auto k = key;
    return {std::move(key), std::move(unit), std::move(desc), assumption,
            [field](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<T>) return format_double(c.*field);
                else return std::to_string(c.*field);
            },
            [field, k](RunConfig& c, const std::string& v) {
                if constexpr (std::is_floating_point_v<T>) c.*field = parse_double(k, v);
                else c.*field = parse_int<T>(k, v);
            }};
}

template <class Sub>
ConfigKey nested_key(std::string key, std::string unit, std::string desc, bool assumption, Sub RunConfig::*outer,
                     double Sub::*inner) {
    auto k = key;
    return {std::move(key), std::move(unit), std::move(desc), assumption,
            [outer, inner](const RunConfig& c) { return format_double(c.*outer.*inner); },
            [outer, inner, k](RunConfig& c, const std::string& v) { c.*outer.*inner = parse_double(k, v); }};
}

inline ConfigKey bool_key(std::string key, std::string desc, bool RunConfig::*field) {
    auto k = key;
    return {std::move(key), "bool", std::move(desc), false,
            [field](const RunConfig& c) { return std::string(c.*field ? "true" : "false"); },
            [field, k](RunConfig& c, const std::string& v) { c.*field = parse_bool(k, v); }};
}

inline ConfigKey string_key(std::string key, std::string desc, std::string RunConfig::*field) {
    return {std::move(key), "text", std::move(desc), false, [field](const RunConfig& c) { return c.*field; },
            [field](RunConfig& c, const std::string& v) { c.*field = v; }};
}

inline void laser_keys(std::vector<ConfigKey>& out, const std::string& nm, LaserSettings RunConfig::*laser) {
    const std::string p = "laser." + nm + ".";
    out.push_back(nested_key(p + "rabi_mhz", "MHz", nm + " nm Rabi frequency / 2pi; 0 switches the laser off", true,
                             laser, &LaserSettings::rabi_mhz));
    out.push_back(nested_key(p + "detuning_mhz", "MHz", nm + " nm detuning / 2pi (laser minus atom)", true, laser,
                             &LaserSettings::detuning_mhz));
    out.push_back({p + "polarization", "text",
                   "sigma-, pi, sigma+, isotropic, perpendicular, or real amplitudes a:b:c for q = -1:0:+1", true,
                   [laser](const RunConfig& c) { return (c.*laser).polarization; },
                   [laser, p](RunConfig& c, const std::string& v) {
                       try {
                           parse_polarization(v);
                       } catch (const DomainError& e) {
                           throw ConfigError(p + "polarization", e.what());
                       }
                       (c.*laser).polarization = v;
                   }});
}

}  // namespace detail

inline const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = [] {
        using namespace detail;
        std::vector<ConfigKey> s;
        s.push_back({"seed", "u64", "master random seed; required unless given on the command line", false,
                     [](const RunConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); },
                     [](RunConfig& c, const std::string& v) {
                         if (v.empty()) c.seed.reset();
                         else c.seed = parse_int<std::uint64_t>("seed", v);
                     }});
        s.push_back(string_key("atom.file", "atom model file; empty selects the built-in 40Ca+ data", &RunConfig::atom_file));
        s.push_back(number_key("field.gauss", "G", "magnetic field strength", true, &RunConfig::field_gauss));
        laser_keys(s, "397", &RunConfig::laser397);
        laser_keys(s, "866", &RunConfig::laser866);
        laser_keys(s, "850", &RunConfig::laser850);
        laser_keys(s, "854", &RunConfig::laser854);
        s.push_back(number_key("bloch.abs_tol", "1", "integrator absolute tolerance", false, &RunConfig::abs_tol));
        s.push_back(number_key("bloch.rel_tol", "1", "integrator relative tolerance", false, &RunConfig::rel_tol));
        s.push_back(number_key("wavepacket.window_us", "us", "integration window after the 850 nm switch-on", false,
                               &RunConfig::wavepacket_window_us));
        s.push_back(number_key("wavepacket.points", "1", "output grid points", false, &RunConfig::wavepacket_points));
        s.push_back(number_key("t1scan.power_min", "1", "lowest 850 nm power relative to laser.850", false,
                               &RunConfig::t1scan_power_min));
        s.push_back(number_key("t1scan.power_max", "1", "highest 850 nm power relative to laser.850", false,
                               &RunConfig::t1scan_power_max));
        s.push_back(number_key("t1scan.points", "1", "log-spaced scan points", false, &RunConfig::t1scan_points));
        s.push_back(nested_key("schedule.repetition_rate_hz", "Hz", "sequence repetition rate", false,
                               &RunConfig::schedule, &SequenceSchedule::repetition_rate));
        s.push_back(nested_key("schedule.cooling_s", "s", "cooling phase before the trigger", true, &RunConfig::schedule,
                               &SequenceSchedule::cooling_duration));
        s.push_back(nested_key("schedule.pump_window_s", "s", "850 nm pump window", true, &RunConfig::schedule,
                               &SequenceSchedule::pump_window));
        s.push_back(nested_key("schedule.repump_s", "s", "854 nm repump phase", true, &RunConfig::schedule,
                               &SequenceSchedule::repump_duration));
        s.push_back(string_key("emitter.arrival", "arrival-time density: exponential (emitter.t1_us) or bloch",
                               &RunConfig::emitter_arrival));
        s.push_back(number_key("emitter.t1_us", "us", "wave packet 1/e time for exponential arrivals", false,
                               &RunConfig::emitter_t1_us));
        s.push_back(number_key("emitter.pump_success_prob", "1", "probability of a photon per trigger", true,
                               &RunConfig::pump_success_prob));
        s.push_back(number_key("emitter.cw_rate_hz", "Hz", "continuous generation rate into the fiber mode", false,
                               &RunConfig::cw_rate_hz));
        s.push_back(nested_key("channel.collection_efficiency", "1", "objective collection", false, &RunConfig::channel,
                               &ChannelBudget::collection_efficiency));
        s.push_back(nested_key("channel.fiber_coupling_efficiency", "1", "single-mode fiber coupling", true,
                               &RunConfig::channel, &ChannelBudget::fiber_coupling_efficiency));
        s.push_back(nested_key("channel.fiber_transmission", "1", "fiber and optics to the receiver", true,
                               &RunConfig::channel, &ChannelBudget::fiber_transmission));
        s.push_back(nested_key("channel.detector_quantum_efficiency", "1", "photon counter efficiency", false,
                               &RunConfig::channel, &ChannelBudget::detector_quantum_efficiency));
        s.push_back(number_key("spectrum.linewidth_mhz", "MHz", "FWHM of each photon spectral component", false,
                               &RunConfig::photon_linewidth_mhz));
        s.push_back(number_key("spectrum.p_peak", "1", "absorption probability of a resonant laser photon", false,
                               &RunConfig::p_peak));
        s.push_back(nested_key("receiver.pump_rate", "1/s", "bright to dark pumping rate", true, &RunConfig::receiver,
                               &ReceiverParams::pump_rate));
        s.push_back(nested_key("receiver.spontaneous_rate", "1/s", "D5/2 decay rate", false, &RunConfig::receiver,
                               &ReceiverParams::spontaneous_rate));
        s.push_back(nested_key("receiver.background_rate", "1/s", "dark to bright rate from stray 854 nm light", true,
                               &RunConfig::receiver, &ReceiverParams::background_rate));
        s.push_back(nested_key("receiver.p_abs", "1", "absorption probability per incident photon", true,
                               &RunConfig::receiver, &ReceiverParams::p_abs));
        s.push_back(nested_key("receiver.p_jump", "1", "probability that an absorption returns the ion to S1/2", false,
                               &RunConfig::receiver, &ReceiverParams::p_jump));
        s.push_back(nested_key("receiver.p_d32", "1", "extra jump probability through D3/2", true, &RunConfig::receiver,
                               &ReceiverParams::p_d32));
        s.push_back(nested_key("receiver.bright_detection_rate", "1/s", "397 nm detection rate while bright", false,
                               &RunConfig::receiver, &ReceiverParams::bright_detection_rate));
        s.push_back(nested_key("receiver.dark_count_rate", "1/s", "detection rate while dark", true,
                               &RunConfig::receiver, &ReceiverParams::dark_count_rate));
        s.push_back(number_key("analysis.bin_ms", "ms", "jump detection bin width", false, &RunConfig::jump_bin_ms));
        s.push_back(number_key("analysis.threshold", "counts", "dark/bright threshold per bin; negative selects 10% of bright",
                               false, &RunConfig::jump_threshold));
        s.push_back(number_key("analysis.hysteresis_bins", "1", "consecutive bins needed for a state change", false,
                               &RunConfig::jump_hysteresis));
        s.push_back(number_key("analysis.gap_factor", "1", "edge refinement gap in units of 1/bright rate", false,
                               &RunConfig::jump_gap_factor));
        s.push_back(number_key("analysis.correlation_bin_us", "us", "correlation histogram bin", false,
                               &RunConfig::correlation_bin_us));
        s.push_back(number_key("run.duration_s", "s", "simulated time for cw-run", false, &RunConfig::run_duration_s));
        s.push_back(number_key("run.triggers", "1", "number of triggers for seq-run", false, &RunConfig::run_triggers));
        s.push_back(bool_key("output.events", "write the photon event log", &RunConfig::write_events));
        s.push_back(bool_key("output.detections", "write the 397 nm detection time stamps", &RunConfig::write_detections));
        return s;
    }();
    return schema;
}

inline const ConfigKey* find_config_key(const std::string& key) {
    for (const auto& k : config_schema())
        if (k.key == key) return &k;
    return nullptr;
}

// ---------------------------------------------------------------------------
// Validation and conversion to module types

inline AtomModel load_atom(const RunConfig& c) {
    if (c.atom_file.empty()) return default_atom_model();
    try {
        return load_atom_model(c.atom_file);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError("atom.file", e.what());
    }
}

inline void validate(const RunConfig& c) {
    auto positive = [](const char* key, double v) {
        if (!(v > 0)) throw ConfigError(key, "must be > 0");
    };
    auto nonneg = [](const char* key, double v) {
        if (!(v >= 0)) throw ConfigError(key, "must be >= 0");
    };
    auto fraction = [](const char* key, double v) {
        if (!(v >= 0 && v <= 1)) throw ConfigError(key, "must lie in [0, 1]");
    };
    nonneg("field.gauss", c.field_gauss);
    nonneg("laser.397.rabi_mhz", c.laser397.rabi_mhz);
    nonneg("laser.866.rabi_mhz", c.laser866.rabi_mhz);
    nonneg("laser.850.rabi_mhz", c.laser850.rabi_mhz);
    nonneg("laser.854.rabi_mhz", c.laser854.rabi_mhz);
    positive("bloch.abs_tol", c.abs_tol);
    positive("bloch.rel_tol", c.rel_tol);
    positive("wavepacket.window_us", c.wavepacket_window_us);
    if (c.wavepacket_points < 3) throw ConfigError("wavepacket.points", "must be >= 3");
    positive("t1scan.power_min", c.t1scan_power_min);
    if (!(c.t1scan_power_max > c.t1scan_power_min)) throw ConfigError("t1scan.power_max", "must exceed t1scan.power_min");
    if (c.t1scan_points < 2) throw ConfigError("t1scan.points", "must be >= 2");
    positive("schedule.repetition_rate_hz", c.schedule.repetition_rate);
    nonneg("schedule.cooling_s", c.schedule.cooling_duration);
    nonneg("schedule.pump_window_s", c.schedule.pump_window);
    nonneg("schedule.repump_s", c.schedule.repump_duration);
    try {
        c.schedule.validate();
    } catch (const DomainError& e) {
        throw ConfigError("schedule.repetition_rate_hz", e.what());
    }
    if (c.emitter_arrival != "exponential" && c.emitter_arrival != "bloch")
        throw ConfigError("emitter.arrival", "must be exponential or bloch");
    positive("emitter.t1_us", c.emitter_t1_us);
    fraction("emitter.pump_success_prob", c.pump_success_prob);
    nonneg("emitter.cw_rate_hz", c.cw_rate_hz);
    fraction("channel.collection_efficiency", c.channel.collection_efficiency);
    fraction("channel.fiber_coupling_efficiency", c.channel.fiber_coupling_efficiency);
    fraction("channel.fiber_transmission", c.channel.fiber_transmission);
    fraction("channel.detector_quantum_efficiency", c.channel.detector_quantum_efficiency);
    positive("spectrum.linewidth_mhz", c.photon_linewidth_mhz);
    fraction("spectrum.p_peak", c.p_peak);
    nonneg("receiver.pump_rate", c.receiver.pump_rate);
    nonneg("receiver.spontaneous_rate", c.receiver.spontaneous_rate);
    nonneg("receiver.background_rate", c.receiver.background_rate);
    fraction("receiver.p_abs", c.receiver.p_abs);
    fraction("receiver.p_jump", c.receiver.p_jump);
    fraction("receiver.p_d32", c.receiver.p_d32);
    nonneg("receiver.bright_detection_rate", c.receiver.bright_detection_rate);
    nonneg("receiver.dark_count_rate", c.receiver.dark_count_rate);
    positive("analysis.bin_ms", c.jump_bin_ms);
    if (c.jump_hysteresis < 1) throw ConfigError("analysis.hysteresis_bins", "must be >= 1");
    positive("analysis.gap_factor", c.jump_gap_factor);
    positive("analysis.correlation_bin_us", c.correlation_bin_us);
    positive("run.duration_s", c.run_duration_s);
    if (c.run_triggers < 1) throw ConfigError("run.triggers", "must be >= 1");
}

// Lasers for the triggered sequence: 397 and 866 nm on throughout, the 850 nm pulse
// switched on at t = 0, no 854 nm light.
inline BlochConfig sequence_bloch_config(const RunConfig& c) {
    BlochConfig b;
    b.atom = load_atom(c);
    b.field = MagneticField::from_gauss(c.field_gauss);
    b.tolerances.absolute = c.abs_tol;
    b.tolerances.relative = c.rel_tol;
    auto add = [&](LevelId lo, LevelId up, const LaserSettings& s, ActiveWindow w) {
        b.lasers.push_back({lo, up, mhz_to_angular(s.detuning_mhz), mhz_to_angular(s.rabi_mhz),
                            parse_polarization(s.polarization), w});
    };
    add(LevelId::S12, LevelId::P12, c.laser397, ActiveWindow::always());
    add(LevelId::D32, LevelId::P12, c.laser866, ActiveWindow::always());
    add(LevelId::D32, LevelId::P32, c.laser850, ActiveWindow::from(0.0));
    return b;
}

// All lasers on continuously, including 854 nm when its Rabi frequency is nonzero.
inline BlochConfig cw_bloch_config(const RunConfig& c) {
    BlochConfig b = continuous(sequence_bloch_config(c));
    if (c.laser854.rabi_mhz > 0)
        b.lasers.push_back({LevelId::D52, LevelId::P32, mhz_to_angular(c.laser854.detuning_mhz),
                            mhz_to_angular(c.laser854.rabi_mhz), parse_polarization(c.laser854.polarization),
                            ActiveWindow::always()});
    return b;
}

inline WavepacketOptions wavepacket_options(const RunConfig& c) {
    WavepacketOptions o;
    o.window = c.wavepacket_window_us * microsecond;
    o.points = c.wavepacket_points;
    return o;
}

inline JumpDetectorConfig jump_detector_config(const RunConfig& c) {
    JumpDetectorConfig j;
    j.bin_width = c.jump_bin_ms * 1e-3;
    j.expected_bright_rate = c.receiver.bright_detection_rate;
    j.expected_dark_rate = c.receiver.dark_count_rate;
    j.threshold = c.jump_threshold;
    j.hysteresis_bins = c.jump_hysteresis;
    j.gap_factor = c.jump_gap_factor;
    return j;
}

// ---------------------------------------------------------------------------
// Text format: one "key = value" per line, '#' starts a comment.

inline RunConfig parse_config_text(std::istream& in) {
    RunConfig c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string t = detail::trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError("", "line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(std::string_view(t).substr(0, eq));
        const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
        const ConfigKey* k = find_config_key(key);
        if (!k) throw ConfigError(key, "unknown key");
        if (c.is_explicit(key)) throw ConfigError(key, "given more than once");
        k->set(c, value);
        c.explicit_keys.push_back(key);
    }
    validate(c);
    return c;
}

inline RunConfig parse_config_string(const std::string& text) {
    std::istringstream in(text);
    return parse_config_text(in);
}

inline RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open config file " + path);
    return parse_config_text(in);
}

inline std::string emit_config(const RunConfig& c) {
    std::string out;
    for (const auto& k : config_schema()) out += k.key + " = " + k.get(c) + "\n";
    return out;
}

inline bool same_settings(const RunConfig& a, const RunConfig& b) { return emit_config(a) == emit_config(b); }

inline std::string config_hash(const RunConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(emit_config(c))));
    return buf;
}

inline std::string schema_text() {
    std::string out = "# key | unit | default | assumption | description\n";
    const RunConfig d;
    for (const auto& k : config_schema())
        out += k.key + " | " + k.unit + " | " + k.get(d) + " | " + (k.assumption ? "yes" : "no") + " | " +
               k.description + "\n";
    return out;
}

// Provenance of every assumption-bearing setting: "default" or "config".
inline std::vector<std::pair<std::string, std::string>> assumption_provenance(const RunConfig& c) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : config_schema())
        if (k.assumption) out.emplace_back(k.key, k.get(c) + (c.is_explicit(k.key) ? " (config)" : " (default)"));
    return out;
}

}  // namespace ionlink
