#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "analysis.hpp"
#include "bloch.hpp"
#include "channel.hpp"
#include "config.hpp"
#include "emitter.hpp"
#include "receiver.hpp"

#ifndef IONLINK_VERSION
#define IONLINK_VERSION "0.0.0"
#endif

namespace ionlink {

// ---------------------------------------------------------------------------
// Reports and files

/// Ordered "key = value" lines.
struct Report {
    std::vector<std::pair<std::string, std::string>> entries;

    void add(const std::string& key, const std::string& value) { entries.emplace_back(key, value); }
    void add(const std::string& key, double v) { add(key, detail::format_double(v)); }
    void add(const std::string& key, std::int64_t v) { add(key, std::to_string(v)); }
    void add(const std::string& key, std::size_t v) { add(key, std::to_string(v)); }
    void add(const std::string& key, int v) { add(key, std::to_string(v)); }
    void add(const std::string& key, bool v) { add(key, std::string(v ? "true" : "false")); }
    void add(const std::string& key, const char* v) { add(key, std::string(v)); }

    const std::string* find(const std::string& key) const {
        for (const auto& [k, v] : entries)
            if (k == key) return &v;
        return nullptr;
    }

    std::string text() const {
        std::string out;
        for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
        return out;
    }
};

/// Buffered CSV writer; numbers are formatted locale-independently.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::string& header) : out_(path, std::ios::binary) {
        if (!out_) throw Error("cannot write " + path.string());
        buf_ = header + "\n";
    }
    ~CsvWriter() { flush(); }

    CsvWriter& field(std::int64_t v) {
        sep();
        char b[24];
        buf_.append(b, std::to_chars(b, b + sizeof b, v).ptr);
        return *this;
    }
    CsvWriter& field(double v) {
        sep();
        buf_ += detail::format_double(v);
        return *this;
    }
    CsvWriter& field(std::string_view v) {
        sep();
        buf_ += v;
        return *this;
    }
    CsvWriter& empty() {
        sep();
        return *this;
    }
    void end_row() {
        buf_ += '\n';
        first_ = true;
        if (buf_.size() > (1u << 20)) flush();
    }
    void flush() {
        out_.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        buf_.clear();
    }

private:
    void sep() {
        if (!first_) buf_ += ',';
        first_ = false;
    }
    std::ofstream out_;
    std::string buf_;
    bool first_ = true;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

inline void write_manifest(const std::filesystem::path& dir, const std::string& command, const RunConfig& cfg,
                           const std::vector<std::string>& artifacts) {
    Report m;
    m.add("tool", "ionlink");
    m.add("version", IONLINK_VERSION);
    m.add("command", command);
    m.add("seed", cfg.seed ? std::to_string(*cfg.seed) : std::string("none"));
    m.add("config_hash", config_hash(cfg));
    for (const auto& a : artifacts) m.add("artifact", a);
    for (const auto& [k, v] : assumption_provenance(cfg)) m.add("assumption." + k, v);
    for (const auto& k : config_schema()) m.add("config." + k.key, k.get(cfg));
    write_text(dir / "manifest.txt", m.text());
}

inline void write_event(CsvWriter& w, const PhotonEvent& ev) {
    if (ev.trigger) w.field(ev.trigger->index).field(to_ns(ev.trigger->time));
    else w.empty().empty();
    w.field(to_ns(ev.emission_time)).field(static_cast<std::int64_t>(ev.spectral_component));
    w.field(static_cast<std::int64_t>(ev.flags.bits));
    w.end_row();
}

inline const char* events_header = "trigger_index,trigger_time_ns,emission_time_ns,spectral_component,flags";
inline const char* intervals_header = "state,start_ns,end_ns,cause";
inline const char* jumps_header = "dark_start_ns,dark_end_ns,first_bright_ns,censored_start,censored_end";

inline void write_intervals(const std::filesystem::path& path, const ReceiverTrajectory& traj) {
    CsvWriter w(path, intervals_header);
    for (const auto& iv : traj.intervals) {
        w.field(to_string(iv.state)).field(to_ns(iv.start)).field(to_ns(iv.end)).field(to_string(iv.cause));
        w.end_row();
    }
}

inline void write_jumps(const std::filesystem::path& path, const std::vector<JumpRecord>& jumps) {
    CsvWriter w(path, jumps_header);
    for (const auto& j : jumps) {
        w.field(to_ns(j.dark_start)).field(to_ns(j.dark_end));
        if (j.first_bright_detection) w.field(to_ns(*j.first_bright_detection));
        else w.empty();
        w.field(static_cast<std::int64_t>(j.censored_start)).field(static_cast<std::int64_t>(j.censored_end));
        w.end_row();
    }
}

inline void write_histogram(const std::filesystem::path& path, double bin_width, const std::vector<std::int64_t>& counts) {
    CsvWriter w(path, "bin_start_ns,count");
    const std::int64_t b = to_ns(bin_width);
    for (std::size_t i = 0; i < counts.size(); ++i) {
        w.field(static_cast<std::int64_t>(i) * b).field(counts[i]);
        w.end_row();
    }
}

// ---------------------------------------------------------------------------
// Reading files back

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        const auto c = line.find(',', pos);
        out.push_back(line.substr(pos, c == std::string::npos ? std::string::npos : c - pos));
        if (c == std::string::npos) break;
        pos = c + 1;
    }
    return out;
}

inline std::int64_t parse_ns(const std::string& s) { return parse_int<std::int64_t>("csv", trim(s)); }

}  // namespace detail

inline std::string read_csv_header(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    std::string h;
    std::getline(in, h);
    return detail::trim(h);
}

inline std::vector<double> read_detections(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    if (detail::trim(line) != "time_ns") throw Error(path.string() + ": not a detections file");
    std::vector<double> t;
    while (std::getline(in, line))
        if (!detail::trim(line).empty()) t.push_back(from_ns(detail::parse_ns(line)));
    return t;
}

inline ReceiverTrajectory read_intervals(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    if (detail::trim(line) != intervals_header) throw Error(path.string() + ": not an intervals file");
    ReceiverTrajectory traj;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split_csv(detail::trim(line));
        if (f.size() != 4) throw Error(path.string() + ": malformed row");
        Interval iv{f[0] == "bright" ? IonState::Bright : IonState::Dark, from_ns(detail::parse_ns(f[1])),
                    from_ns(detail::parse_ns(f[2])), EndCause::RunEnd};
        for (auto c : {EndCause::Pump, EndCause::Spontaneous, EndCause::Background, EndCause::Absorption, EndCause::RunEnd})
            if (to_string(c) == f[3]) iv.cause = c;
        traj.intervals.push_back(iv);
    }
    if (!traj.intervals.empty()) traj.duration = traj.intervals.back().end;
    return traj;
}

inline std::vector<JumpRecord> read_jumps(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    if (detail::trim(line) != jumps_header) throw Error(path.string() + ": not a jumps file");
    std::vector<JumpRecord> out;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split_csv(detail::trim(line));
        if (f.size() != 5) throw Error(path.string() + ": malformed row");
        JumpRecord j{from_ns(detail::parse_ns(f[0])), from_ns(detail::parse_ns(f[1])), std::nullopt, f[3] == "1",
                     f[4] == "1"};
        if (!f[2].empty()) j.first_bright_detection = from_ns(detail::parse_ns(f[2]));
        out.push_back(j);
    }
    return out;
}

// Dark periods of a simulated trajectory that ended by a transition (not by the run end).
inline std::vector<double> true_dark_durations(const ReceiverTrajectory& traj) {
    std::vector<double> d;
    for (const auto& iv : traj.intervals)
        if (iv.state == IonState::Dark && iv.cause != EndCause::RunEnd && iv.end > iv.start) d.push_back(iv.end - iv.start);
    return d;
}

// ---------------------------------------------------------------------------
// Photon spectrum and budget

inline PhotonSpectrum photon_spectrum(const RunConfig& c) {
    return zeeman_photon_spectrum(load_atom(c), MagneticField::from_gauss(c.field_gauss),
                                  mhz_to_angular(c.photon_linewidth_mhz));
}

inline AbsorberLine absorber_line(const RunConfig& c) {
    return zeeman_absorber_line(load_atom(c), MagneticField::from_gauss(c.field_gauss));
}

struct BudgetEstimate {
    double spectral_overlap;
    double p_abs_effective;        // p_peak x overlap
    double single_mode_rate;       // triggered photons per second in the fiber mode
    double transmitted_rate;       // triggered photons per second at the receiver
    double cw_detected_rate;       // cw photons per second on the sender-side counter
    double cw_transmitted_rate;
    double cw_absorption_rate;     // 1/s, using receiver.p_abs x p_jump
    double heralding_efficiency;   // absorption jumps per trigger, receiver ready
};

inline BudgetEstimate estimate_budget(const RunConfig& c) {
    BudgetEstimate b{};
    b.spectral_overlap = spectral_overlap(photon_spectrum(c), absorber_line(c));
    b.p_abs_effective = effective_absorption_prob(c.p_peak, b.spectral_overlap);
    const double rep = c.schedule.repetition_rate;
    b.single_mode_rate = rep * c.pump_success_prob * c.channel.product(Stage::Collected, Stage::FiberCoupled);
    b.transmitted_rate = rep * c.pump_success_prob * c.channel.product(Stage::Collected, Stage::FiberTransmitted);
    b.cw_detected_rate = c.cw_rate_hz * c.channel.detector_quantum_efficiency;
    b.cw_transmitted_rate = c.cw_rate_hz * c.channel.fiber_transmission;
    const double p_jump_abs = c.receiver.p_abs * c.receiver.effective_p_jump();
    b.cw_absorption_rate = b.cw_transmitted_rate * p_jump_abs;
    b.heralding_efficiency =
        c.pump_success_prob * c.channel.product(Stage::Collected, Stage::FiberTransmitted) * p_jump_abs;
    return b;
}

// ---------------------------------------------------------------------------
// Commands

struct RunOutput {
    Report report;
    std::vector<std::string> artifacts;
};

namespace detail {

inline std::uint64_t require_seed(const RunConfig& c) {
    if (!c.seed) throw ConfigError("seed", "a seed is required (config key seed or --seed)");
    return *c.seed;
}

inline void finish(const std::optional<std::filesystem::path>& out, const std::string& command, const RunConfig& cfg,
                   RunOutput& r) {
    if (!out) return;
    write_text(*out / "report.txt", r.report.text());
    r.artifacts.push_back("report.txt");
    write_manifest(*out, command, cfg, r.artifacts);
}

inline void add_provenance(Report& r, const RunConfig& c) {
    for (const auto& [k, v] : assumption_provenance(c)) r.add("assumption." + k, v);
}

}  // namespace detail

inline RunOutput run_wavepacket(const RunConfig& cfg, const std::optional<std::filesystem::path>& out) {
    RunOutput r;
    const auto wp = wavepacket(sequence_bloch_config(cfg), wavepacket_options(cfg));
    const auto peak = std::max_element(wp.density.begin(), wp.density.end()) - wp.density.begin();
    r.report.add("t1_s", wp.t1);
    r.report.add("pumping_probability", wp.pumping_probability);
    r.report.add("peak_time_s", wp.time[static_cast<std::size_t>(peak)]);
    detail::add_provenance(r.report, cfg);
    if (out) {
        CsvWriter w(*out / "wavepacket.csv", "time_s,value");
        for (std::size_t i = 0; i < wp.time.size(); ++i) {
            w.field(wp.time[i]).field(wp.density[i]);
            w.end_row();
        }
        r.artifacts.push_back("wavepacket.csv");
    }
    detail::finish(out, "wavepacket", cfg, r);
    return r;
}

inline std::vector<double> log_spaced(double lo, double hi, int n) {
    std::vector<double> v;
    for (int i = 0; i < n; ++i) v.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1)));
    v.back() = hi;
    return v;
}

inline RunOutput run_t1scan(const RunConfig& cfg, const std::optional<std::filesystem::path>& out) {
    RunOutput r;
    const auto curve = t1_vs_power(sequence_bloch_config(cfg),
                                   log_spaced(cfg.t1scan_power_min, cfg.t1scan_power_max, cfg.t1scan_points),
                                   wavepacket_options(cfg));
    bool monotone = true;
    for (std::size_t i = 1; i < curve.size(); ++i) monotone = monotone && curve[i].inverse_t1 > curve[i - 1].inverse_t1;
    r.report.add("points", curve.size());
    r.report.add("t1_max_s", curve.front().t1);
    r.report.add("t1_min_s", curve.back().t1);
    r.report.add("strictly_monotone", monotone);
    detail::add_provenance(r.report, cfg);
    if (out) {
        CsvWriter w(*out / "t1scan.csv", "power_rel,value");
        for (const auto& p : curve) {
            w.field(p.power_rel).field(p.inverse_t1);
            w.end_row();
        }
        r.artifacts.push_back("t1scan.csv");
    }
    detail::finish(out, "t1scan", cfg, r);
    return r;
}

/// Streams 397 nm detections of a trajectory through the jump detector, optionally
/// writing them to a file.
inline std::vector<JumpRecord> detect_from_trajectory(const ReceiverTrajectory& traj, const RunConfig& cfg,
                                                      std::uint64_t seed, CsvWriter* detections) {
    DetectionStream stream(traj, cfg.receiver, seed);
    JumpDetector det(jump_detector_config(cfg), 0.0);
    while (auto t = stream.next()) {
        det.push(*t);
        if (detections) {
            detections->field(to_ns(*t));
            detections->end_row();
        }
    }
    return det.finish(traj.duration);
}

struct CwRunResult {
    RunOutput output;
    ReceiverTrajectory trajectory;
    std::size_t photons_incident = 0;
    ExpFit true_fit{};
    std::optional<ExpFit> detected_fit;
    std::vector<JumpRecord> jumps;
};

/// Continuous transmission: fiber-mode photons at emitter.cw_rate_hz, thinned by the fiber
/// and absorbed by the receiver. `detect` also runs the 397 nm detection and jump analysis.
inline CwRunResult run_cw_link(const RunConfig& cfg, double duration, const std::optional<std::filesystem::path>& out,
                               bool detect = true) {
    const std::uint64_t seed = detail::require_seed(cfg);
    CwRunResult res;
    auto& rep = res.output.report;

    CwSource source(duration, cfg.cw_rate_hz, photon_spectrum(cfg).weights(), derive_seed(seed, "emitter"));
    ChannelThinner thin(cfg.channel, derive_seed(seed, "channel"), Stage::FiberTransmitted);
    std::optional<CsvWriter> events;
    if (out && cfg.write_events) {
        events.emplace(*out / "events.csv", events_header);
        res.output.artifacts.push_back("events.csv");
    }
    std::size_t incident = 0;
    auto feed = [&]() -> std::optional<double> {
        while (auto ev = source.next()) {
            thin.apply(*ev);
            if (events) write_event(*events, *ev);
            if (ev->reaches_receiver()) {
                ++incident;
                return ev->emission_time;
            }
        }
        return std::nullopt;
    };
    res.trajectory = simulate(duration, feed, cfg.receiver, derive_seed(seed, "receiver"));
    res.photons_incident = incident;
    if (events) events->flush();

    const auto durations = true_dark_durations(res.trajectory);
    const double incident_rate = static_cast<double>(incident) / duration;
    const double expected_rate = cfg.receiver.dark_exit_rate() +
                                 incident_rate * cfg.receiver.p_abs * cfg.receiver.effective_p_jump();
    rep.add("duration_s", duration);
    rep.add("incident_photons", incident);
    rep.add("incident_rate_hz", incident_rate);
    rep.add("dark_periods", durations.size());
    rep.add("absorption_jumps", res.trajectory.count(EndCause::Absorption));
    rep.add("expected_tau_s", 1.0 / expected_rate);
    if (durations.size() >= 2) {
        res.true_fit = fit_exponential(durations);
        rep.add("tau_s", res.true_fit.tau);
        rep.add("tau_stderr_s", res.true_fit.tau_stderr);
    }

    if (out) {
        write_intervals(*out / "intervals.csv", res.trajectory);
        res.output.artifacts.push_back("intervals.csv");
    }
    if (detect) {
        std::optional<CsvWriter> det_out;
        if (out && cfg.write_detections) {
            det_out.emplace(*out / "detections.csv", "time_ns");
            res.output.artifacts.push_back("detections.csv");
        }
        res.jumps = detect_from_trajectory(res.trajectory, cfg, derive_seed(seed, "detections"),
                                           det_out ? &*det_out : nullptr);
        const auto measured = dark_durations(res.jumps);
        rep.add("detected_dark_periods", measured.size());
        if (measured.size() >= 2) {
            res.detected_fit = fit_exponential(measured);
            rep.add("detected_tau_s", res.detected_fit->tau);
            rep.add("detected_tau_stderr_s", res.detected_fit->tau_stderr);
        }
        if (out) {
            write_jumps(*out / "jumps.csv", res.jumps);
            const auto h = histogram(measured, 0.05, 5.0);
            write_histogram(*out / "dark_histogram.csv", h.bin_width, h.counts);
            res.output.artifacts.push_back("jumps.csv");
            res.output.artifacts.push_back("dark_histogram.csv");
        }
    }
    detail::add_provenance(rep, cfg);
    detail::finish(out, "cw-run", cfg, res.output);
    return res;
}

inline ArrivalSampler arrival_sampler(const RunConfig& cfg) {
    const double window = cfg.schedule.pump_window;
    if (cfg.emitter_arrival == "bloch") {
        auto opt = wavepacket_options(cfg);
        opt.window = std::min(opt.window, window);
        const auto wp = wavepacket(sequence_bloch_config(cfg), opt);
        return ArrivalSampler::truncated(wp.time, wp.density, window);
    }
    const double t1 = cfg.emitter_t1_us * microsecond;
    const int n = 4001;
    std::vector<double> t(n), g(n);
    for (int i = 0; i < n; ++i) {
        t[i] = window * i / (n - 1);
        g[i] = std::exp(-t[i] / t1);
    }
    return ArrivalSampler(std::move(t), std::move(g));
}

// Number of k in [0, n) with trigger_time(k) in [a, b).
inline std::int64_t triggers_in(const SequenceSchedule& s, std::int64_t n, double a, double b) {
    const std::int64_t p = to_ns(s.period()), c = to_ns(s.cooling_duration);
    auto first_at_or_after = [&](double t) {
        const std::int64_t x = to_ns(t) - c;
        if (x <= 0) return std::int64_t{0};
        return std::min(n, (x + p - 1) / p);
    };
    return std::max<std::int64_t>(0, first_at_or_after(b) - first_at_or_after(a));
}

struct SeqRunResult {
    RunOutput output;
    std::int64_t triggers = 0;
    std::size_t photons_emitted = 0;
    std::size_t photons_transmitted = 0;
    std::size_t absorption_jumps = 0;
    std::int64_t ready_triggers = 0;  // triggers while the receiver was dark
    double heralding_efficiency = 0.0;
    double heralding_stderr = 0.0;
    double heralding_all_triggers = 0.0;
    double analytic_heralding = 0.0;
    ReceiverTrajectory trajectory;
    std::vector<JumpRecord> jumps;
    std::optional<CorrelationHistogram> correlation;
    bool background_only = false;
};

/// Triggered link: emitter -> channel -> receiver -> detection -> jumps -> correlation.
inline SeqRunResult run_sequence_link(const RunConfig& cfg, std::int64_t triggers,
                                      const std::optional<std::filesystem::path>& out, bool analyze = true) {
    const std::uint64_t seed = detail::require_seed(cfg);
    SeqRunResult res;
    res.triggers = triggers;
    auto& rep = res.output.report;

    const ArrivalSampler g = arrival_sampler(cfg);
    SequenceSource source(triggers, cfg.schedule, g, cfg.pump_success_prob, photon_spectrum(cfg).weights(),
                          derive_seed(seed, "emitter"));
    ChannelThinner thin(cfg.channel, derive_seed(seed, "channel"));
    std::optional<CsvWriter> events;
    if (out && cfg.write_events) {
        events.emplace(*out / "events.csv", events_header);
        res.output.artifacts.push_back("events.csv");
    }
    auto feed = [&]() -> std::optional<double> {
        while (auto ev = source.next()) {
            ++res.photons_emitted;
            thin.apply(*ev);
            if (events) write_event(*events, *ev);
            if (ev->reaches_receiver()) {
                ++res.photons_transmitted;
                return ev->emission_time;
            }
        }
        return std::nullopt;
    };
    const double duration = static_cast<double>(triggers) * cfg.schedule.period();
    res.trajectory = simulate(duration, feed, cfg.receiver, derive_seed(seed, "receiver"));
    if (events) events->flush();

    res.absorption_jumps = res.trajectory.count(EndCause::Absorption);
    for (const auto& iv : res.trajectory.intervals)
        if (iv.state == IonState::Dark) res.ready_triggers += triggers_in(cfg.schedule, triggers, iv.start, iv.end);
    const double n_abs = static_cast<double>(res.absorption_jumps);
    if (res.ready_triggers > 0) {
        res.heralding_efficiency = n_abs / static_cast<double>(res.ready_triggers);
        res.heralding_stderr = std::sqrt(std::max(n_abs, 1.0)) / static_cast<double>(res.ready_triggers);
    }
    res.heralding_all_triggers = n_abs / static_cast<double>(triggers);
    res.analytic_heralding = estimate_budget(cfg).heralding_efficiency;

    rep.add("triggers", triggers);
    rep.add("duration_s", duration);
    rep.add("photons_emitted", res.photons_emitted);
    rep.add("photons_transmitted", res.photons_transmitted);
    rep.add("absorption_jumps", res.absorption_jumps);
    rep.add("ready_triggers", res.ready_triggers);
    rep.add("heralding_efficiency", res.heralding_efficiency);
    rep.add("heralding_efficiency_stderr", res.heralding_stderr);
    rep.add("heralding_efficiency_all_triggers", res.heralding_all_triggers);
    rep.add("heralding_efficiency_analytic", res.analytic_heralding);

    if (out) {
        write_intervals(*out / "intervals.csv", res.trajectory);
        res.output.artifacts.push_back("intervals.csv");
    }
    if (analyze) {
        std::optional<CsvWriter> det_out;
        if (out && cfg.write_detections) {
            det_out.emplace(*out / "detections.csv", "time_ns");
            res.output.artifacts.push_back("detections.csv");
        }
        res.jumps = detect_from_trajectory(res.trajectory, cfg, derive_seed(seed, "detections"),
                                           det_out ? &*det_out : nullptr);
        auto h = correlate(PeriodicTriggers{cfg.schedule.trigger_time(0), cfg.schedule.period()}, res.jumps,
                           cfg.correlation_bin_us * microsecond);
        rep.add("detected_jumps", res.jumps.size());
        try {
            h.fit = fit_correlation(h);
        } catch (const BackgroundOnlyError&) {
            res.background_only = true;
        }
        rep.add("background_only", res.background_only);
        if (h.fit) {
            rep.add("fit.t0_s", h.fit->t0);
            rep.add("fit.tau_rise_s", h.fit->tau_rise);
            rep.add("fit.tau_rise_stderr_s", h.fit->tau_rise_err);
            rep.add("fit.tau_decay_s", h.fit->tau_decay);
            rep.add("fit.tau_decay_stderr_s", h.fit->tau_decay_err);
            rep.add("fit.amplitude", h.fit->amplitude);
            rep.add("fit.background_per_bin", h.fit->background_per_bin);
            rep.add("fit.chi2", h.fit->chi2);
            rep.add("fit.dof", h.fit->dof);
        }
        if (out) {
            write_jumps(*out / "jumps.csv", res.jumps);
            write_histogram(*out / "correlation.csv", h.bin_width, h.counts);
            res.output.artifacts.push_back("jumps.csv");
            res.output.artifacts.push_back("correlation.csv");
        }
        res.correlation = std::move(h);
    }
    detail::add_provenance(rep, cfg);
    detail::finish(out, "seq-run", cfg, res.output);
    return res;
}

struct AnalyzeResult {
    RunOutput output;
    std::vector<JumpRecord> jumps;
    std::optional<ExpFit> fit;
};

/// Dark-period analysis of a detections file (time_ns) or an intervals file.
inline AnalyzeResult run_analyze(const RunConfig& cfg, const std::filesystem::path& input, std::optional<double> t_end,
                                 const std::optional<std::filesystem::path>& out) {
    AnalyzeResult res;
    auto& rep = res.output.report;
    const std::string header = read_csv_header(input);
    std::vector<double> durations;
    if (header == "time_ns") {
        const auto det = read_detections(input);
        const double end = t_end ? *t_end : (det.empty() ? cfg.run_duration_s : det.back());
        res.jumps = detect_jumps(det, 0.0, end, jump_detector_config(cfg));
        durations = dark_durations(res.jumps);
        rep.add("input", "detections");
        rep.add("detections", det.size());
        rep.add("jumps", res.jumps.size());
    } else if (header == intervals_header) {
        durations = true_dark_durations(read_intervals(input));
        rep.add("input", "intervals");
    } else {
        throw ConfigError("input", "unrecognised file " + input.string());
    }
    rep.add("dark_periods", durations.size());
    if (durations.size() >= 2) {
        res.fit = fit_exponential(durations);
        rep.add("tau_s", res.fit->tau);
        rep.add("tau_stderr_s", res.fit->tau_stderr);
        rep.add("rate_per_s", 1.0 / res.fit->tau);
    }
    if (out) {
        if (!res.jumps.empty()) {
            write_jumps(*out / "jumps.csv", res.jumps);
            res.output.artifacts.push_back("jumps.csv");
        }
        const auto h = histogram(durations, 0.05, 5.0);
        write_histogram(*out / "dark_histogram.csv", h.bin_width, h.counts);
        res.output.artifacts.push_back("dark_histogram.csv");
    }
    detail::finish(out, "analyze", cfg, res.output);
    return res;
}

struct CorrelateResult {
    RunOutput output;
    CorrelationHistogram histogram;
    bool background_only = false;
};

/// Trigger-jump correlation from a jumps file (or a detections file, analysed first),
/// with triggers on the configured schedule.
inline CorrelateResult run_correlate(const RunConfig& cfg, const std::filesystem::path& input,
                                     std::optional<double> t_end, const std::optional<std::filesystem::path>& out) {
    std::vector<JumpRecord> jumps;
    const std::string header = read_csv_header(input);
    if (header == jumps_header) {
        jumps = read_jumps(input);
    } else if (header == "time_ns") {
        const auto det = read_detections(input);
        jumps = detect_jumps(det, 0.0, t_end ? *t_end : (det.empty() ? 0.0 : det.back()), jump_detector_config(cfg));
    } else {
        throw ConfigError("input", "unrecognised file " + input.string());
    }
    CorrelateResult res{{}, correlate(PeriodicTriggers{cfg.schedule.trigger_time(0), cfg.schedule.period()}, jumps,
                                      cfg.correlation_bin_us * microsecond),
                        false};
    auto& rep = res.output.report;
    rep.add("jumps", jumps.size());
    rep.add("period_s", res.histogram.period);
    rep.add("bin_width_s", res.histogram.bin_width);
    try {
        res.histogram.fit = fit_correlation(res.histogram);
    } catch (const BackgroundOnlyError&) {
        res.background_only = true;
    }
    rep.add("background_only", res.background_only);
    if (const auto& f = res.histogram.fit) {
        rep.add("fit.t0_s", f->t0);
        rep.add("fit.tau_rise_s", f->tau_rise);
        rep.add("fit.tau_rise_stderr_s", f->tau_rise_err);
        rep.add("fit.tau_decay_s", f->tau_decay);
        rep.add("fit.tau_decay_stderr_s", f->tau_decay_err);
        rep.add("fit.amplitude", f->amplitude);
        rep.add("fit.background_per_bin", f->background_per_bin);
        rep.add("fit.chi2", f->chi2);
        rep.add("fit.dof", f->dof);
    }
    if (out) {
        write_histogram(*out / "correlation.csv", res.histogram.bin_width, res.histogram.counts);
        res.output.artifacts.push_back("correlation.csv");
    }
    detail::finish(out, "correlate", cfg, res.output);
    return res;
}

inline RunOutput run_budget(const RunConfig& cfg, const std::optional<std::filesystem::path>& out) {
    RunOutput r;
    const auto b = estimate_budget(cfg);
    auto& rep = r.report;
    rep.add("spectral_overlap", b.spectral_overlap);
    rep.add("p_abs_effective", b.p_abs_effective);
    rep.add("stage_product_to_fiber", cfg.channel.product(Stage::Collected, Stage::FiberCoupled));
    rep.add("stage_product_to_receiver", cfg.channel.product(Stage::Collected, Stage::FiberTransmitted));
    rep.add("triggered_single_mode_rate_hz", b.single_mode_rate);
    rep.add("triggered_transmitted_rate_hz", b.transmitted_rate);
    rep.add("cw_detected_rate_hz", b.cw_detected_rate);
    rep.add("cw_transmitted_rate_hz", b.cw_transmitted_rate);
    rep.add("cw_absorption_rate_per_s", b.cw_absorption_rate);
    rep.add("heralding_efficiency", b.heralding_efficiency);
    detail::add_provenance(rep, cfg);
    if (out) {
        const auto photon = photon_spectrum(cfg);
        const auto absorber = absorber_line(cfg);
        CsvWriter w(*out / "overlap.csv", "detuning_hz,overlap");
        for (int i = -200; i <= 200; ++i) {
            const double d = i * 0.25e6;
            w.field(d).field(spectral_overlap(shifted(photon, two_pi * d), absorber));
            w.end_row();
        }
        r.artifacts.push_back("overlap.csv");
    }
    detail::finish(out, "budget", cfg, r);
    return r;
}

/// Grid of laser settings searched by `calibrate`.
inline ThreePhotonScan default_three_photon_scan() {
    ThreePhotonScan s;
    s.rabi397 = {mhz_to_angular(5), mhz_to_angular(10), mhz_to_angular(20)};
    s.rabi866 = {mhz_to_angular(20), mhz_to_angular(40), mhz_to_angular(80)};
    s.rabi850 = {mhz_to_angular(5), mhz_to_angular(10), mhz_to_angular(20)};
    s.rabi854 = {mhz_to_angular(1), mhz_to_angular(2), mhz_to_angular(5)};
    s.detuning397 = {mhz_to_angular(-10), 0.0};
    s.detuning866 = {mhz_to_angular(-10), 0.0, mhz_to_angular(10)};
    return s;
}

inline RunConfig apply_calibration(RunConfig c, const BlochConfig& b) {
    auto put = [&](LaserSettings& s, int nm) {
        const LaserField* l = find_laser(b, nm);
        if (!l) return;
        s.rabi_mhz = angular_to_mhz(l->rabi);
        s.detuning_mhz = angular_to_mhz(l->detuning);
    };
    put(c.laser397, 397);
    put(c.laser866, 866);
    put(c.laser850, 850);
    put(c.laser854, 854);
    return c;
}

inline RunOutput run_calibrate(const RunConfig& cfg, const std::optional<std::filesystem::path>& out) {
    RunOutput r;
    RunConfig base = cfg;
    if (base.laser854.rabi_mhz <= 0) base.laser854.rabi_mhz = 1.0;
    const auto result = calibrate_three_photon(cw_bloch_config(base), default_three_photon_scan());
    const RunConfig calibrated = apply_calibration(base, result.config);
    r.report.add("ratio_393_397", result.ratio);
    r.report.add("ratio_393_397_without_866", result.ratio_without_866);
    r.report.add("enhancement", result.ratio / result.ratio_without_866);
    for (const auto& k : config_schema())
        if (k.key.rfind("laser.", 0) == 0) r.report.add(k.key, k.get(calibrated));
    if (out) {
        write_text(*out / "calibrated.conf", emit_config(calibrated));
        r.artifacts.push_back("calibrated.conf");
    }
    detail::finish(out, "calibrate", cfg, r);
    return r;
}

/// Steady-state R393/R397 of the configured lasers, with and without the 866 nm laser.
inline RunOutput run_ratio(const RunConfig& cfg) {
    RunOutput r;
    const BlochConfig b = cw_bloch_config(cfg);
    const double with = scattering_ratio(b);
    const double without = scattering_ratio(without_laser(b, 866));
    r.report.add("ratio_393_397", with);
    r.report.add("ratio_393_397_without_866", without);
    r.report.add("enhancement", with / without);
    return r;
}

}  // namespace ionlink
