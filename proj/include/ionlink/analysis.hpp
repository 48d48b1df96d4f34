#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/NonLinearOptimization>

#include "errors.hpp"
#include "units.hpp"

namespace ionlink {

// ---------------------------------------------------------------------------
// Quantum-jump detection

struct JumpRecord {
    double dark_start;
    double dark_end;
    std::optional<double> first_bright_detection;
    bool censored_start = false;  // dark at the beginning of the trace
    bool censored_end = false;    // still dark at the end of the trace

    bool complete() const { return !censored_start && !censored_end; }
    double duration() const { return dark_end - dark_start; }
};

struct JumpDetectorConfig {
    double bin_width = 1e-3;             // s
    double expected_bright_rate = 3e5;   // 1/s
    double expected_dark_rate = 200.0;   // 1/s
    double threshold = -1.0;             // counts per bin; negative selects 10% of the bright level
    int hysteresis_bins = 2;
    double gap_factor = 10.0;            // refinement gap, in units of 1/expected_bright_rate

    double threshold_counts() const { return threshold < 0 ? 0.1 * expected_bright_rate * bin_width : threshold; }
};

/// Streaming threshold detector over binned 397 nm counts. A state change needs
/// `hysteresis_bins` consecutive bins on the other side of the threshold; the dark
/// period edges are then refined to the last/first detection belonging to a bright run.
class JumpDetector {
public:
    JumpDetector(JumpDetectorConfig cfg, double t_begin) : cfg_(cfg), t0_(t_begin) {
        if (!(cfg_.bin_width > 0)) throw DomainError("bin width must be > 0");
        if (cfg_.hysteresis_bins < 1) throw DomainError("hysteresis must be >= 1 bin");
        const double thr = cfg_.threshold_counts();
        const double lo = cfg_.expected_dark_rate * cfg_.bin_width;
        const double hi = cfg_.expected_bright_rate * cfg_.bin_width;
        if (!(thr > lo && thr < hi)) throw DomainError("threshold must lie strictly between dark and bright counts per bin");
        gap_ = cfg_.gap_factor / cfg_.expected_bright_rate;
    }

    void push(double t) {
        if (t < last_) throw DomainError("detections must be time ordered");
        last_ = t;
        if (t < t0_) return;
        const auto b = bin_of(t);
        while (cur_ < b) close_bin();
        ++count_;
        recent_.push_back(t);
    }

    std::vector<JumpRecord> finish(double t_end) {
        const auto b_end = static_cast<std::int64_t>(std::floor((t_end - t0_) / cfg_.bin_width));
        while (cur_ < b_end) close_bin();
        if (state_ == State::Unknown) {
            // Shorter than one bin: classify what we have.
            close_bin();
        }
        if (state_ == State::Dark)
            records_.push_back({dark_start_, t_end, std::nullopt, dark_censored_start_, true});
        state_ = State::Done;
        return std::move(records_);
    }

private:
    enum class State { Unknown, Bright, Dark, Done };

    std::int64_t bin_of(double t) const { return static_cast<std::int64_t>(std::floor((t - t0_) / cfg_.bin_width)); }
    double bin_start(std::int64_t b) const { return t0_ + static_cast<double>(b) * cfg_.bin_width; }

    void close_bin() {
        const bool low = static_cast<double>(count_) < cfg_.threshold_counts();
        const std::int64_t b = cur_;
        switch (state_) {
            case State::Unknown:
                if (low) {
                    state_ = State::Dark;
                    dark_start_ = t0_;
                    dark_censored_start_ = true;
                } else {
                    state_ = State::Bright;
                }
                break;
            case State::Bright:
                if (low) {
                    if (run_++ == 0) cand_ = b;
                    if (run_ >= cfg_.hysteresis_bins) {
                        state_ = State::Dark;
                        run_ = 0;
                        dark_start_ = refine_start(cand_);
                        dark_censored_start_ = false;
                    }
                } else {
                    run_ = 0;
                }
                break;
            case State::Dark:
                if (!low) {
                    if (run_++ == 0) cand_ = b;
                    if (run_ >= cfg_.hysteresis_bins) {
                        state_ = State::Bright;
                        run_ = 0;
                        const double end = refine_end(cand_);
                        records_.push_back({dark_start_, std::max(end, std::nextafter(dark_start_, INFINITY)), end,
                                            dark_censored_start_, false});
                    }
                } else {
                    run_ = 0;
                }
                break;
            case State::Done: break;
        }
        ++cur_;
        count_ = 0;
        const double keep_from = bin_start(cur_ - cfg_.hysteresis_bins - 2);
        while (!recent_.empty() && recent_.front() < keep_from) recent_.pop_front();
    }

    // Last detection in bins [cand-1, cand] that follows another detection within the gap.
    double refine_start(std::int64_t cand) const {
        const double lo = bin_start(cand - 1), hi = bin_start(cand + 1);
        double best = bin_start(cand);
        for (std::size_t i = 1; i < recent_.size(); ++i) {
            const double t = recent_[i];
            if (t < lo || t >= hi) continue;
            if (t - recent_[i - 1] < gap_) best = t;
        }
        return best;
    }

    // First detection in bins [cand-1, cand] that is followed by another within the gap.
    double refine_end(std::int64_t cand) const {
        const double lo = bin_start(cand - 1), hi = bin_start(cand + 1);
        for (std::size_t i = 0; i + 1 < recent_.size(); ++i) {
            const double t = recent_[i];
            if (t < lo || t >= hi) continue;
            if (recent_[i + 1] - t < gap_) return t;
        }
        for (double t : recent_)
            if (t >= bin_start(cand)) return t;
        return bin_start(cand);
    }

    JumpDetectorConfig cfg_;
    double t0_;
    double gap_;
    double last_ = -std::numeric_limits<double>::infinity();
    std::int64_t cur_ = 0;
    std::int64_t count_ = 0;
    std::deque<double> recent_;
    State state_ = State::Unknown;
    int run_ = 0;
    std::int64_t cand_ = 0;
    double dark_start_ = 0.0;
    bool dark_censored_start_ = false;
    std::vector<JumpRecord> records_;
};

inline std::vector<JumpRecord> detect_jumps(std::span<const double> detections, double t_begin, double t_end,
                                            const JumpDetectorConfig& cfg = {}) {
    JumpDetector det(cfg, t_begin);
    for (double t : detections) det.push(t);
    return det.finish(t_end);
}

// ---------------------------------------------------------------------------
// Exponential dwell-time fits

struct ExpFit {
    double tau;
    double tau_stderr;
    std::size_t n_samples;
};

/// Maximum-likelihood exponential fit: tau is the sample mean, stderr tau/sqrt(n).
inline ExpFit fit_exponential(std::span<const double> durations) {
    if (durations.size() < 2) throw DomainError("exponential fit needs at least two durations");
    double sum = 0.0;
    for (double d : durations) {
        if (!(d > 0)) throw DomainError("durations must be > 0");
        sum += d;
    }
    const double n = static_cast<double>(durations.size());
    const double tau = sum / n;
    return {tau, tau / std::sqrt(n), durations.size()};
}

inline std::vector<double> dark_durations(const std::vector<JumpRecord>& jumps) {
    std::vector<double> d;
    for (const auto& j : jumps)
        if (j.complete()) d.push_back(j.duration());
    return d;
}

struct RateEstimate {
    double rate;
    double error;
};

inline RateEstimate absorption_rate(const ExpFit& on, const ExpFit& off) {
    if (!(on.tau > 0 && off.tau > 0)) throw DomainError("fits must have tau > 0");
    const double r = 1.0 / on.tau - 1.0 / off.tau;
    const double s_on = on.tau_stderr / (on.tau * on.tau);
    const double s_off = off.tau_stderr / (off.tau * off.tau);
    return {r, std::hypot(s_on, s_off)};
}

inline double absorption_probability(double rate, double incident_rate) {
    if (!(incident_rate > 0)) throw DomainError("incident rate must be > 0");
    return rate / incident_rate;
}

struct Histogram {
    double bin_width;
    std::vector<std::int64_t> counts;
};

inline Histogram histogram(std::span<const double> values, double bin_width, double upper) {
    if (!(bin_width > 0) || !(upper > 0)) throw DomainError("bad histogram range");
    Histogram h{bin_width, std::vector<std::int64_t>(static_cast<std::size_t>(std::ceil(upper / bin_width)), 0)};
    for (double v : values) {
        if (v < 0 || v >= upper) continue;
        ++h.counts[static_cast<std::size_t>(v / bin_width)];
    }
    return h;
}

// ---------------------------------------------------------------------------
// Trigger-absorption correlation

struct CorrelationFit {
    double t0, tau_rise, tau_decay, amplitude, background_per_bin;
    double t0_err, tau_rise_err, tau_decay_err, amplitude_err, background_err;
    double chi2;
    std::size_t dof;
};

struct CorrelationHistogram {
    double bin_width;  // s
    double period;     // s
    std::vector<std::int64_t> counts;
    std::optional<CorrelationFit> fit;

    double bin_start(std::size_t i) const { return static_cast<double>(i) * bin_width; }
    double bin_end(std::size_t i) const { return std::min(period, static_cast<double>(i + 1) * bin_width); }
};

struct PeriodicTriggers {
    double first;   // s
    double period;  // s
};

namespace detail {

inline CorrelationHistogram empty_histogram(double period, double bin) {
    if (!(period > 0) || !(bin > 0)) throw DomainError("period and bin must be > 0");
    const std::int64_t p_ns = to_ns(period), b_ns = to_ns(bin);
    if (p_ns <= 0 || b_ns <= 0) throw DomainError("period and bin must be at least 1 ns");
    const auto nbins = static_cast<std::size_t>((p_ns + b_ns - 1) / b_ns);
    return {from_ns(b_ns), from_ns(p_ns), std::vector<std::int64_t>(nbins, 0), std::nullopt};
}

inline void add_delay(CorrelationHistogram& h, std::int64_t delay_ns) {
    const std::int64_t p_ns = to_ns(h.period), b_ns = to_ns(h.bin_width);
    const std::int64_t folded = ((delay_ns % p_ns) + p_ns) % p_ns;
    ++h.counts[static_cast<std::size_t>(folded / b_ns)];
}

}  // namespace detail

/// Histogram of (first bright detection - preceding trigger) modulo the period,
/// computed on integer nanoseconds so that folding is exact.
inline CorrelationHistogram correlate(std::span<const double> trigger_times, const std::vector<JumpRecord>& jumps,
                                      double period, double bin) {
    auto h = detail::empty_histogram(period, bin);
    if (trigger_times.empty()) return h;
    for (const auto& j : jumps) {
        if (!j.first_bright_detection || j.censored_end) continue;
        const double t = *j.first_bright_detection;
        auto it = std::upper_bound(trigger_times.begin(), trigger_times.end(), t);
        const double trig = it == trigger_times.begin() ? trigger_times.front() : *(it - 1);
        detail::add_delay(h, to_ns(t) - to_ns(trig));
    }
    return h;
}

inline CorrelationHistogram correlate(PeriodicTriggers triggers, const std::vector<JumpRecord>& jumps, double bin) {
    auto h = detail::empty_histogram(triggers.period, bin);
    const std::int64_t first_ns = to_ns(triggers.first);
    for (const auto& j : jumps) {
        if (!j.first_bright_detection || j.censored_end) continue;
        detail::add_delay(h, to_ns(*j.first_bright_detection) - first_ns);
    }
    return h;
}

namespace detail {

// Cumulative of the unit-area shape [exp(-x/td) - exp(-x/tr)] / (td - tr), x >= 0.
inline double rise_decay_cdf(double x, double tr, double td) {
    if (x <= 0) return 0.0;
    if (std::abs(td - tr) < 1e-6 * std::max(td, tr)) {
        const double tau = 0.5 * (td + tr);
        return 1.0 - (1.0 + x / tau) * std::exp(-x / tau);
    }
    return 1.0 - (td * std::exp(-x / td) - tr * std::exp(-x / tr)) / (td - tr);
}

// Expected counts in [a, b) for correlated events wrapping with the period.
inline double folded_mass(double a, double b, double period, double t0, double tr, double td) {
    const double tmax = std::max(tr, td);
    double m = 0.0;
    for (int k = 0; k < 10000; ++k) {
        const double off = k * period;
        const double hi = rise_decay_cdf(b + off - t0, tr, td);
        const double lo = rise_decay_cdf(a + off - t0, tr, td);
        m += hi - lo;
        if (a + off - t0 > 40.0 * tmax) break;
    }
    return m;
}

struct CorrelationModel {
    const CorrelationHistogram* h;
    const std::vector<double>* weights;  // 1/sigma per bin

    // Parameters: t0, log tau_rise, log tau_decay, amplitude, background (times in us).
    Eigen::VectorXd expected(const Eigen::VectorXd& p) const {
        const double us = 1e-6;
        const double t0 = p[0] * us, tr = std::exp(p[1]) * us, td = std::exp(p[2]) * us;
        Eigen::VectorXd e(static_cast<Eigen::Index>(h->counts.size()));
        for (std::size_t i = 0; i < h->counts.size(); ++i) {
            const double frac = (h->bin_end(i) - h->bin_start(i)) / h->bin_width;
            e[i] = p[4] * frac + p[3] * folded_mass(h->bin_start(i), h->bin_end(i), h->period, t0, tr, td);
        }
        return e;
    }
};

struct LmFunctor {
    using Scalar = double;
    enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };
    using InputType = Eigen::VectorXd;
    using ValueType = Eigen::VectorXd;
    using JacobianType = Eigen::MatrixXd;

    CorrelationModel model;
    int m;

    int inputs() const { return 5; }
    int values() const { return m; }

    int operator()(const Eigen::VectorXd& p, Eigen::VectorXd& r) const {
        const Eigen::VectorXd e = model.expected(p);
        for (int i = 0; i < m; ++i)
            r[i] = (e[i] - static_cast<double>(model.h->counts[i])) * (*model.weights)[i];
        return 0;
    }
};

}  // namespace detail

inline double correlation_model_counts(const CorrelationHistogram& h, std::size_t bin, const CorrelationFit& f) {
    const double frac = (h.bin_end(bin) - h.bin_start(bin)) / h.bin_width;
    return f.background_per_bin * frac +
           f.amplitude * detail::folded_mass(h.bin_start(bin), h.bin_end(bin), h.period, f.t0, f.tau_rise, f.tau_decay);
}

/// Least-squares fit of background + (rise x decay) exponential convolution starting at t0.
/// The amplitude is the total number of correlated events. Throws BackgroundOnlyError if no
/// bin exceeds the median by 5 sigma.
inline CorrelationFit fit_correlation(const CorrelationHistogram& h) {
    const int m = static_cast<int>(h.counts.size());
    if (m < 6) throw DomainError("correlation fit needs at least 6 bins");
    std::vector<double> sorted(h.counts.begin(), h.counts.end());
    std::nth_element(sorted.begin(), sorted.begin() + m / 2, sorted.end());
    const double median = sorted[m / 2];
    const auto peak_it = std::max_element(h.counts.begin(), h.counts.end());
    const double peak = static_cast<double>(*peak_it);
    if (!(peak > median + 5.0 * std::sqrt(std::max(median, 1.0)))) throw BackgroundOnlyError();

    const std::size_t ipk = static_cast<std::size_t>(peak_it - h.counts.begin());
    double excess = 0.0;
    for (auto c : h.counts) excess += std::max(0.0, static_cast<double>(c) - median);
    const double bin_us = h.bin_width * 1e6;
    const double decay_guess = std::max(0.5 * bin_us, excess / std::max(peak - median, 1.0) * bin_us * 0.7);
    std::size_t ion = ipk;
    while (ion > 0 && static_cast<double>(h.counts[ion - 1]) > median + 3.0 * std::sqrt(std::max(median, 1.0))) --ion;
    const double t0_guess = std::max(0.0, (static_cast<double>(ion) - 1.0) * bin_us);

    std::vector<double> weights(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) weights[i] = 1.0 / std::sqrt(std::max(static_cast<double>(h.counts[i]), 1.0));

    auto run = [&](Eigen::VectorXd p) {
        detail::LmFunctor f{{&h, &weights}, m};
        Eigen::NumericalDiff<detail::LmFunctor> nd(f);
        Eigen::LevenbergMarquardt<Eigen::NumericalDiff<detail::LmFunctor>> lm(nd);
        lm.parameters.maxfev = 4000;
        lm.parameters.xtol = 1e-10;
        lm.parameters.ftol = 1e-10;
        lm.minimize(p);
        Eigen::VectorXd r(m);
        f(p, r);
        return std::pair{p, r.squaredNorm()};
    };

    Eigen::VectorXd best;
    double best_chi2 = std::numeric_limits<double>::infinity();
    for (double rise_frac : {0.15, 0.4, 0.8}) {
        Eigen::VectorXd p(5);
        p << t0_guess, std::log(rise_frac * decay_guess), std::log(decay_guess), excess, median;
        // Two passes: data-based weights, then weights from the fitted model.
        for (int i = 0; i < m; ++i) weights[i] = 1.0 / std::sqrt(std::max(static_cast<double>(h.counts[i]), 1.0));
        auto [p1, c1] = run(p);
        const Eigen::VectorXd e = detail::CorrelationModel{&h, &weights}.expected(p1);
        for (int i = 0; i < m; ++i) weights[i] = 1.0 / std::sqrt(std::max(e[i], 1.0));
        auto [p2, c2] = run(p1);
        if (c2 < best_chi2 && p2.allFinite()) {
            best_chi2 = c2;
            best = p2;
        }
    }
    if (best.size() == 0) throw NumericError("correlation fit did not converge");

    // Covariance from the weighted Jacobian at the optimum (weights from that model).
    const Eigen::VectorXd e = detail::CorrelationModel{&h, &weights}.expected(best);
    for (int i = 0; i < m; ++i) weights[i] = 1.0 / std::sqrt(std::max(e[i], 1.0));
    detail::LmFunctor f{{&h, &weights}, m};
    Eigen::NumericalDiff<detail::LmFunctor> nd(f);
    Eigen::MatrixXd J(m, 5);
    nd.df(best, J);
    Eigen::VectorXd r(m);
    f(best, r);
    const Eigen::MatrixXd cov = (J.transpose() * J).completeOrthogonalDecomposition().pseudoInverse();

    CorrelationFit fit{};
    const double us = 1e-6;
    double tr = std::exp(best[1]) * us, td = std::exp(best[2]) * us;
    double tr_err = tr * std::sqrt(std::max(0.0, cov(1, 1)));
    double td_err = td * std::sqrt(std::max(0.0, cov(2, 2)));
    if (tr > td) {
        std::swap(tr, td);
        std::swap(tr_err, td_err);
    }
    fit.t0 = best[0] * us;
    fit.tau_rise = tr;
    fit.tau_decay = td;
    fit.amplitude = best[3];
    fit.background_per_bin = best[4];
    fit.t0_err = std::sqrt(std::max(0.0, cov(0, 0))) * us;
    fit.tau_rise_err = tr_err;
    fit.tau_decay_err = td_err;
    fit.amplitude_err = std::sqrt(std::max(0.0, cov(3, 3)));
    fit.background_err = std::sqrt(std::max(0.0, cov(4, 4)));
    fit.chi2 = r.squaredNorm();
    fit.dof = static_cast<std::size_t>(m - 5);
    if (!(fit.tau_rise > 0 && fit.tau_decay > 0)) throw NumericError("correlation fit returned non-positive time constants");
    return fit;
}

}  // namespace ionlink
