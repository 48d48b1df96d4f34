#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "ionlink/pipeline.hpp"

using namespace ionlink;
namespace fs = std::filesystem;

namespace {

const std::string data_dir = IONLINK_DATA_DIR;

struct Outcome {
    bool pass;
    std::string detail;
};

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

RunConfig paper_like(std::uint64_t seed) {
    RunConfig c = parse_config(data_dir + "/paper_like.conf");
    c.seed = seed;
    return c;
}

bool within(double v, double lo, double hi) { return v >= lo && v <= hi; }

Outcome dark_period_statistics() {
    const double duration = 3600.0;
    Stopwatch sw;
    RunConfig off = paper_like(101);
    off.cw_rate_hz = 0.0;
    const auto r_off = run_cw_link(off, duration, std::nullopt, false);
    const RunConfig on = paper_like(102);
    const auto r_on = run_cw_link(on, duration, std::nullopt, false);
    const double elapsed = sw.seconds();

    const auto& f_off = r_off.true_fit;
    const auto& f_on = r_on.true_fit;
    const double incident = static_cast<double>(r_on.photons_incident) / duration;
    const double expected_on =
        1.0 / (on.receiver.dark_exit_rate() + incident * on.receiver.p_abs * on.receiver.effective_p_jump());
    const auto rate = absorption_rate(f_on, f_off);
    const bool ok = std::abs(f_off.tau - 1.022) <= 3 * f_off.tau_stderr &&
                    std::abs(f_on.tau - expected_on) <= 3 * f_on.tau_stderr && within(f_on.tau, 0.235, 0.260) &&
                    std::abs(rate.rate - 3.0) <= 0.2 && elapsed < 10.0;
    return {ok, fmt("tau_off=%.4f(%.4f) s tau_on=%.4f(%.4f) s expected_on=%.4f s incident=%.0f Hz R_abs=%.3f(%.3f) /s "
                    "runtime=%.2f s",
                    f_off.tau, f_off.tau_stderr, f_on.tau, f_on.tau_stderr, expected_on, incident, rate.rate,
                    rate.error, elapsed)};
}

Outcome absorption_chain() {
    const RunConfig c = paper_like(1);
    const double overlap = spectral_overlap(photon_spectrum(c), absorber_line(c));
    const double p = effective_absorption_prob(c.p_peak, overlap);
    RunConfig spec_default = c;
    spec_default.field_gauss = RunConfig{}.field_gauss;
    const double overlap3 = spectral_overlap(photon_spectrum(spec_default), absorber_line(spec_default));
    return {within(p, 2.0e-4, 3.0e-4),
            fmt("B=%.1f G overlap=%.4f p_abs=%.3e (at %.1f G: overlap=%.4f p_abs=%.3e)", c.field_gauss, overlap, p,
                spec_default.field_gauss, overlap3, effective_absorption_prob(c.p_peak, overlap3))};
}

Outcome correlation_function() {
    RunConfig c = paper_like(103);
    c.schedule.repetition_rate = 31.25e3;
    c.emitter_arrival = "exponential";
    c.emitter_t1_us = 1.1;
    c.receiver.bright_detection_rate = 3e5;
    const auto triggers = static_cast<std::int64_t>(65 * 60 * c.schedule.repetition_rate);
    Stopwatch sw;
    const auto r = run_sequence_link(c, triggers, std::nullopt, true);
    const double elapsed = sw.seconds();
    if (!r.correlation || !r.correlation->fit)
        return {false, fmt("no correlation peak (background only) after %.1f s", elapsed)};
    const auto& h = *r.correlation;
    const auto& f = *h.fit;

    // Folding: integer-ns period tiled by the bins, and the periodic form equals the
    // explicit nearest-preceding-trigger form.
    const std::int64_t period_ns = to_ns(h.period), bin_ns = to_ns(h.bin_width);
    bool folds = period_ns == to_ns(c.schedule.period()) && period_ns % bin_ns == 0 &&
                 static_cast<std::int64_t>(h.counts.size()) * bin_ns == period_ns;
    std::vector<std::int64_t> explicit_counts(h.counts.size(), 0);
    for (const auto& j : r.jumps) {
        if (!j.first_bright_detection || j.censored_end) continue;
        const std::int64_t t_ns = to_ns(*j.first_bright_detection);
        const std::int64_t k = (t_ns - to_ns(c.schedule.cooling_duration)) / period_ns;
        const std::int64_t delay = t_ns - to_ns(c.schedule.trigger_time(k));
        ++explicit_counts[static_cast<std::size_t>(delay / bin_ns)];
    }
    folds = folds && explicit_counts == h.counts;
    std::int64_t total = 0, usable = 0;
    for (auto n : h.counts) total += n;
    for (const auto& j : r.jumps) usable += (j.first_bright_detection && !j.censored_end);
    folds = folds && total == usable;

    const bool ok = std::abs(f.tau_decay / 3e-6 - 1) <= 0.15 && std::abs(f.tau_rise / 1.1e-6 - 1) <= 0.25 &&
                    std::abs(f.background_per_bin / 80 - 1) <= 0.30 && folds && elapsed < 120.0;
    return {ok, fmt("tau_decay=%.3f(%.3f) us tau_rise=%.3f(%.3f) us t0=%.3f us background=%.1f(%.1f)/bin "
                    "amplitude=%.0f jumps=%zu folds=%s runtime=%.1f s",
                    f.tau_decay * 1e6, f.tau_decay_err * 1e6, f.tau_rise * 1e6, f.tau_rise_err * 1e6, f.t0 * 1e6,
                    f.background_per_bin, f.background_err, f.amplitude, r.jumps.size(), folds ? "yes" : "no",
                    elapsed)};
}

// Mean of an exponential truncated at w, solved for the scale.
double truncated_exponential_mle(double mean, double w) {
    auto m = [&](double t) { return t - w * std::exp(-w / t) / (1 - std::exp(-w / t)); };
    double lo = 1e-3 * mean, hi = 1e3 * mean;
    for (int i = 0; i < 200; ++i) {
        const double mid = std::sqrt(lo * hi);
        (m(mid) < mean ? lo : hi) = mid;
    }
    return std::sqrt(lo * hi);
}

Outcome wave_packets() {
    const RunConfig c = paper_like(104);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);

    // Full solver wave packet: fitted tail versus arrivals drawn from it.
    const auto wp = wavepacket(sequence_bloch_config(c), wavepacket_options(c));
    const ArrivalSampler g(wp.time, wp.density);
    const auto peak = std::max_element(wp.density.begin(), wp.density.end()) - wp.density.begin();
    const double cut = wp.time[peak] + wp.t1;
    double sum = 0.0;
    int n = 0;
    for (int i = 0; i < 100000; ++i) {
        const double t = g.sample(u(rng));
        if (t > cut) {
            sum += t - cut;
            ++n;
        }
    }
    const double sampled_t1 = truncated_exponential_mle(sum / n, wp.time.back() - cut);
    bool ok = std::isfinite(wp.t1) && std::abs(sampled_t1 / wp.t1 - 1) <= 0.05;

    // Emitter arrival density used by seq-run.
    RunConfig e = c;
    e.emitter_t1_us = 1.1;
    const auto ga = arrival_sampler(e);
    double s2 = 0.0;
    for (int i = 0; i < 100000; ++i) s2 += ga.sample(u(rng));
    const double emitter_t1 = truncated_exponential_mle(s2 / 100000, e.schedule.pump_window);
    ok = ok && std::abs(emitter_t1 / 1.1e-6 - 1) <= 0.05;

    // Calibrated 850 nm power scan.
    const auto scan = t1_vs_power(sequence_bloch_config(c),
                                  log_spaced(c.t1scan_power_min, c.t1scan_power_max, c.t1scan_points),
                                  wavepacket_options(c));
    bool monotone = true, in_range = true;
    double t_min = INFINITY, t_max = 0;
    for (std::size_t i = 0; i < scan.size(); ++i) {
        if (i > 0 && !(scan[i].inverse_t1 > scan[i - 1].inverse_t1)) monotone = false;
        in_range = in_range && within(scan[i].t1, 0.8e-6, 6e-6);
        t_min = std::min(t_min, scan[i].t1);
        t_max = std::max(t_max, scan[i].t1);
    }
    const bool spans = t_min <= 0.9e-6 && t_max >= 5.4e-6;
    ok = ok && monotone && in_range && spans;

    // Reduced rate equations at low saturation.
    BlochConfig low;
    const auto iso = Polarization::from_amplitudes(1, 1, 1);
    low.lasers.push_back({LevelId::S12, LevelId::P12, 0.0, mhz_to_angular(20), iso, ActiveWindow::always()});
    low.lasers.push_back({LevelId::D32, LevelId::P12, 0.0, mhz_to_angular(10), iso, ActiveWindow::always()});
    low.lasers.push_back({LevelId::D32, LevelId::P32, 0.0, mhz_to_angular(0.5), iso, ActiveWindow::from(0.0)});
    double worst = 0.0;
    for (double p : {1.0, 4.0, 16.0}) {
        const BlochConfig b = with_power(low, 850, p);
        const double full = 1.0 / wavepacket(b, {400e-6 / p, 4001}).t1;
        worst = std::max(worst, std::abs(full / rate_equation_pumping_rate(b) - 1));
    }
    ok = ok && worst <= 0.15;
    return {ok, fmt("T1 tail=%.3f us sampled=%.3f us; emitter T1 %.3f us; scan T1 %.3f..%.3f us monotone=%s "
                    "in_range=%s; rate-equation deviation %.1f%%",
                    wp.t1 * 1e6, sampled_t1 * 1e6, emitter_t1 * 1e6, t_min * 1e6, t_max * 1e6,
                    monotone ? "yes" : "no", in_range ? "yes" : "no", worst * 100)};
}

Outcome three_photon() {
    const RunConfig c = parse_config(data_dir + "/three_photon.conf");
    const BlochConfig b = cw_bloch_config(c);
    const auto* l397 = find_laser(b, 397);
    const auto* l866 = find_laser(b, 866);
    const auto* l850 = find_laser(b, 850);
    const bool resonant = std::abs(l397->detuning - l866->detuning + l850->detuning) < 1e-6;
    const double with = scattering_ratio(b);
    const double without = scattering_ratio(without_laser(b, 866));
    const bool ok = resonant && with >= 1.0 && without <= 0.08 && with / without >= 12;
    return {ok, fmt("R393/R397=%.3f without 866=%.4f enhancement=%.1f resonance=%s", with, without, with / without,
                    resonant ? "yes" : "no")};
}

Outcome heralding() {
    const RunConfig c = paper_like(106);
    const std::int64_t triggers = 200000000;
    Stopwatch sw;
    const auto r = run_sequence_link(c, triggers, std::nullopt, false);
    const double z = (r.heralding_efficiency - r.analytic_heralding) / r.heralding_stderr;
    const bool ok = within(r.heralding_efficiency, 3e-6, 12e-6) && std::abs(z) <= 3;
    return {ok, fmt("heralding=%.3e(%.1e) per ready trigger, analytic=%.3e, z=%.2f, per trigger overall=%.3e, "
                    "absorption jumps=%zu, runtime=%.1f s",
                    r.heralding_efficiency, r.heralding_stderr, r.analytic_heralding, z, r.heralding_all_triggers,
                    r.absorption_jumps, sw.seconds())};
}

Outcome solver() {
    std::istringstream two("level S12 1 2.00225 0\nlevel P32 3 1.3341 25414.4\ndecay P32 S12 393 1 rate:0\n");
    BlochConfig rabi;
    rabi.atom = parse_atom_model(two);
    rabi.field = MagneticField::from_gauss(0.0);
    rabi.levels = {LevelId::S12, LevelId::P32};
    rabi.lasers.push_back({LevelId::S12, LevelId::P32, 0.0, mhz_to_angular(1), Polarization::sigma_plus(),
                           ActiveWindow::always()});
    const BlochGenerator g1(rabi);
    std::vector<double> t(501);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 5e-6 * i / 500;
    const auto s1 = evolve(g1, DensityMatrix::pure(g1.basis(), {LevelId::S12, 1}), 5e-6, t);
    double rabi_err = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i)
        rabi_err = std::max(rabi_err, std::abs(s1[i].population(LevelId::P32) -
                                               std::pow(std::sin(0.5 * mhz_to_angular(1) * t[i]), 2)));

    BlochConfig driven = sequence_bloch_config(paper_like(1));
    const BlochGenerator g2(driven);
    IntegratorStats stats;
    std::vector<double> t2(401);
    for (std::size_t i = 0; i < t2.size(); ++i) t2[i] = 400e-6 * i / 400;
    const auto s2 = evolve(g2, DensityMatrix::uniform(g2.basis(), LevelId::S12), 400e-6, t2, 0.0, &stats);
    double drift = 0.0, min_eig = 0.0;
    for (const auto& s : s2) {
        drift = std::max(drift, std::abs(s.trace() - 1));
        min_eig = std::min(min_eig, s.min_eigenvalue());
    }

    BlochConfig none;
    const BlochGenerator g3(none);
    const double gamma = none.atom.total_decay_rate(LevelId::P32);
    std::vector<double> t3(61);
    for (std::size_t i = 0; i < t3.size(); ++i) t3[i] = 3.0 / gamma * i / 60;
    const auto s3 = evolve(g3, DensityMatrix::pure(g3.basis(), {LevelId::P32, 3}), t3.back(), t3);
    double decay_err = 0.0;
    for (std::size_t i = 0; i < t3.size(); ++i)
        decay_err = std::max(decay_err, std::abs(s3[i].population(LevelId::P32) / std::exp(-gamma * t3[i]) - 1));

    const bool ok = rabi_err < 1e-6 && stats.steps >= 10000 && drift < 1e-9 && min_eig > -1e-8 && decay_err < 1e-6;
    return {ok, fmt("rabi error=%.2e trace drift=%.2e over %zu steps min eigenvalue=%.2e decay error=%.2e", rabi_err,
                    drift, stats.steps, min_eig, decay_err)};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "ionlink_acceptance_determinism";
    fs::remove_all(root);
    RunConfig c = paper_like(108);
    std::size_t files = 0;
    bool same = true;
    for (const std::string cmd : {"seq-run", "cw-run"}) {
        for (const char* run : {"a", "b"}) {
            const fs::path dir = root / cmd / run;
            fs::create_directories(dir);
            if (cmd == "seq-run") run_sequence_link(c, 3000000, dir);
            else run_cw_link(c, 30.0, dir);
        }
        for (const auto& e : fs::directory_iterator(root / cmd / "a")) {
            same = same && slurp(e.path()) == slurp(root / cmd / "b" / e.path().filename());
            ++files;
        }
    }
    fs::remove_all(root);
    return {same && files >= 10, fmt("%zu artifacts compared byte for byte", files)};
}

}  // namespace

int main() {
    const std::pair<const char*, std::function<Outcome()>> criteria[] = {
        {"1 dark-period statistics", dark_period_statistics},
        {"2 absorption-probability chain", absorption_chain},
        {"3 correlation function", correlation_function},
        {"4 wave packets", wave_packets},
        {"5 three-photon enhancement", three_photon},
        {"6 heralding budget", heralding},
        {"7 solver correctness", solver},
        {"8 determinism", determinism},
    };
    int failed = 0;
    for (const auto& [name, check] : criteria) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("criterion %s: %s  %s\n", name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
