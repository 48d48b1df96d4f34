#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "ionlink/analysis.hpp"
#include "ionlink/receiver.hpp"

using namespace ionlink;

namespace {

JumpRecord jump_at(double first_bright) { return {first_bright - 0.1, first_bright - 1e-6, first_bright, false, false}; }

const double period = 1.0 / 31.25e3;
const double bin = 0.8e-6;

// Jumps whose first bright detection is t0 + Exp(tr) + Exp(td) after a trigger,
// plus uniformly distributed uncorrelated ones.
std::vector<JumpRecord> synthetic_jumps(int correlated, int uncorrelated, double t0, double tr, double td,
                                        std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::exponential_distribution<double> rise(1 / tr), decay(1 / td);
    std::uniform_int_distribution<int> trig(0, 1000000);
    std::uniform_real_distribution<double> u(0.0, 1e6 * period);
    std::vector<double> t;
    for (int i = 0; i < correlated; ++i) t.push_back(trig(rng) * period + t0 + rise(rng) + decay(rng));
    for (int i = 0; i < uncorrelated; ++i) t.push_back(u(rng));
    std::sort(t.begin(), t.end());
    std::vector<JumpRecord> out;
    for (double x : t) out.push_back(jump_at(x));
    return out;
}

std::vector<double> draws(double tau, int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::exponential_distribution<double> e(1 / tau);
    std::vector<double> v(n);
    for (auto& x : v) x = e(rng);
    return v;
}

std::vector<JumpRecord> detect_streamed(const ReceiverTrajectory& traj, const ReceiverParams& p, std::uint64_t seed) {
    DetectionStream stream(traj, p, seed);
    JumpDetector det({}, 0.0);
    while (auto t = stream.next()) det.push(*t);
    return det.finish(traj.duration);
}

ReceiverTrajectory bright_only(double duration) {
    ReceiverTrajectory t;
    t.duration = duration;
    t.intervals.push_back({IonState::Bright, 0.0, duration, EndCause::RunEnd});
    return t;
}

}  // namespace

TEST(Analysis, BrightTraceHasNoJumps) {
    const ReceiverParams p;
    const auto det = synthesize_trace(bright_only(5.0), p, 1);
    EXPECT_TRUE(detect_jumps(det, 0.0, 5.0).empty());
}

TEST(Analysis, EmptyTraceIsOneDarkPeriod) {
    const auto jumps = detect_jumps({}, 0.0, 2.0);
    ASSERT_EQ(jumps.size(), 1u);
    EXPECT_EQ(jumps[0].dark_start, 0.0);
    EXPECT_EQ(jumps[0].dark_end, 2.0);
    EXPECT_TRUE(jumps[0].censored_start);
    EXPECT_TRUE(jumps[0].censored_end);
}

TEST(Analysis, ThresholdMustSeparateLevels) {
    JumpDetectorConfig c;
    c.threshold = 0.1;
    EXPECT_THROW(detect_jumps({}, 0.0, 1.0, c), DomainError);
    c.threshold = 400;
    EXPECT_THROW(detect_jumps({}, 0.0, 1.0, c), DomainError);
}

TEST(Analysis, RecoversGroundTruthDarkPeriods) {
    const ReceiverParams p;
    Rng photons(3);
    double t = 0.0;
    auto feed = [&]() -> std::optional<double> { return t += photons.exponential(12e3); };
    const auto traj = simulate(600.0, feed, p, 4);
    const auto jumps = detect_streamed(traj, p, 5);
    const double tol = 2e-3;
    int long_periods = 0, recovered = 0;
    for (const auto& iv : traj.intervals) {
        if (iv.state != IonState::Dark || iv.cause == EndCause::RunEnd || iv.end - iv.start < 10e-3) continue;
        ++long_periods;
        const bool found = std::any_of(jumps.begin(), jumps.end(), [&](const JumpRecord& j) {
            return std::abs(j.dark_start - iv.start) <= tol && std::abs(j.dark_end - iv.end) <= tol;
        });
        recovered += found;
    }
    ASSERT_GT(long_periods, 300);
    EXPECT_GE(recovered, 0.99 * long_periods);
    for (const auto& j : jumps) {
        EXPECT_LT(j.dark_start, j.dark_end);
        if (j.first_bright_detection) EXPECT_LE(j.dark_end, *j.first_bright_detection);
    }
}

TEST(Analysis, DetectedDarkPeriodsReproduceGeneratingRate) {
    const ReceiverParams p;
    const auto traj = simulate(800.0, []() -> std::optional<double> { return std::nullopt; }, p, 6);
    const auto d = dark_durations(detect_streamed(traj, p, 7));
    ASSERT_GE(d.size(), 300u);
    const auto fit = fit_exponential(d);
    EXPECT_NEAR(fit.tau, 1.0 / p.dark_exit_rate(), 3 * fit.tau_stderr);
}

TEST(Analysis, ExponentialFit) {
    const std::vector<double> same(10, 0.3);
    EXPECT_DOUBLE_EQ(fit_exponential(same).tau, 0.3);
    const auto fit = fit_exponential(draws(0.247, 10000, 8));
    EXPECT_NEAR(fit.tau, 0.247, 3 * 0.247 / 100);
    EXPECT_NEAR(fit.tau_stderr, fit.tau / 100, 1e-12);
    EXPECT_THROW(fit_exponential(std::vector<double>{}), DomainError);
    EXPECT_THROW(fit_exponential(std::vector<double>{1.0, -1.0}), DomainError);
}

TEST(Analysis, AbsorptionRate) {
    const ExpFit on{0.247, 0.006, 1000}, off{1.022, 0.033, 1000};
    EXPECT_NEAR(absorption_rate(on, off).rate, 3.07, 0.005);
    EXPECT_EQ(absorption_rate(off, off).rate, 0.0);
}

TEST(Analysis, AbsorptionRateErrorMatchesBootstrap) {
    const auto on = draws(0.247, 2000, 9), off = draws(1.022, 1500, 10);
    const auto est = absorption_rate(fit_exponential(on), fit_exponential(off));
    std::mt19937_64 rng(11);
    std::vector<double> rates;
    std::vector<double> a(on.size()), b(off.size());
    for (int r = 0; r < 10000; ++r) {
        std::uniform_int_distribution<std::size_t> pa(0, on.size() - 1), pb(0, off.size() - 1);
        for (auto& x : a) x = on[pa(rng)];
        for (auto& x : b) x = off[pb(rng)];
        rates.push_back(absorption_rate(fit_exponential(a), fit_exponential(b)).rate);
    }
    double m = 0.0, s = 0.0;
    for (double x : rates) m += x;
    m /= rates.size();
    for (double x : rates) s += (x - m) * (x - m);
    s = std::sqrt(s / (rates.size() - 1));
    EXPECT_NEAR(est.error / s, 1.0, 0.1);
}

TEST(Analysis, AbsorptionProbability) {
    EXPECT_NEAR(absorption_probability(3.0, 12e3), 2.5e-4, 1e-15);
    EXPECT_EQ(absorption_probability(0.0, 12e3), 0.0);
    EXPECT_DOUBLE_EQ(absorption_probability(3.0, 24e3), 0.5 * absorption_probability(3.0, 12e3));
    EXPECT_THROW(absorption_probability(3.0, 0.0), DomainError);
}

TEST(Analysis, JumpAtTriggerLandsInFirstBin) {
    const std::vector<double> triggers{0.0, period, 2 * period, 3 * period};
    const auto h = correlate(triggers, {jump_at(2 * period)}, period, bin);
    EXPECT_EQ(h.counts.size(), 40u);
    EXPECT_EQ(h.counts[0], 1);
    EXPECT_EQ(std::accumulate(h.counts.begin(), h.counts.end(), std::int64_t{0}), 1);
}

TEST(Analysis, UncorrelatedJumpsGiveFlatHistogram) {
    const auto jumps = synthetic_jumps(0, 40000, 0, 1, 1, 12);
    const auto h = correlate(PeriodicTriggers{0.0, period}, jumps, bin);
    const double expected = 40000.0 / h.counts.size();
    double chi2 = 0.0;
    for (auto c : h.counts) chi2 += std::pow(c - expected, 2) / expected;
    const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(h.counts.size() - 1), chi2));
    EXPECT_GT(p, 0.001);
    EXPECT_THROW(fit_correlation(h), BackgroundOnlyError);
}

TEST(Analysis, CorrelationIsInvariantUnderPeriodShifts) {
    const auto jumps = synthetic_jumps(2000, 2000, 0.8e-6, 1.1e-6, 3e-6, 13);
    std::vector<double> triggers;
    for (int k = 0; k <= 1000001; ++k) triggers.push_back(k * period);
    const auto h = correlate(triggers, jumps, period, bin);
    for (int shift : {1, 7, 1000}) {
        std::vector<double> tt;
        for (double t : triggers) tt.push_back(t + shift * period);
        std::vector<JumpRecord> jj;
        for (auto j : jumps) {
            j.first_bright_detection = *j.first_bright_detection + shift * period;
            jj.push_back(j);
        }
        EXPECT_EQ(correlate(tt, jj, period, bin).counts, h.counts) << shift;
    }
    EXPECT_EQ(correlate(PeriodicTriggers{0.0, period}, jumps, bin).counts, h.counts);
}

TEST(Analysis, FitRecoversModelParameters) {
    const double t0 = 0.8e-6, tr = 1.1e-6, td = 3e-6;
    const auto h = correlate(PeriodicTriggers{0.0, period}, synthetic_jumps(200000, 100000, t0, tr, td, 14), bin);
    const auto f = fit_correlation(h);
    EXPECT_NEAR(f.t0 / t0, 1.0, 0.1);
    EXPECT_NEAR(f.tau_rise / tr, 1.0, 0.1);
    EXPECT_NEAR(f.tau_decay / td, 1.0, 0.1);
    EXPECT_NEAR(f.amplitude / 200000, 1.0, 0.1);
    EXPECT_NEAR(f.background_per_bin / (100000.0 / 40), 1.0, 0.1);
}

TEST(Analysis, FitIsUnbiasedAcrossSeeds) {
    const double t0 = 0.8e-6, tr = 1.1e-6, td = 3e-6;
    const int correlated = 4000, uncorrelated = 3200;
    double s_t0 = 0, s_tr = 0, s_td = 0, s_a = 0, s_b = 0;
    const int seeds = 50;
    for (int s = 0; s < seeds; ++s) {
        const auto h = correlate(PeriodicTriggers{0.0, period},
                                 synthetic_jumps(correlated, uncorrelated, t0, tr, td, 100 + s), bin);
        const auto f = fit_correlation(h);
        s_t0 += f.t0;
        s_tr += f.tau_rise;
        s_td += f.tau_decay;
        s_a += f.amplitude;
        s_b += f.background_per_bin;
    }
    EXPECT_NEAR(s_t0 / seeds / t0, 1.0, 0.1);
    EXPECT_NEAR(s_tr / seeds / tr, 1.0, 0.1);
    EXPECT_NEAR(s_td / seeds / td, 1.0, 0.1);
    EXPECT_NEAR(s_a / seeds / correlated, 1.0, 0.1);
    EXPECT_NEAR(s_b / seeds / (uncorrelated * bin / period), 1.0, 0.1);
}

TEST(Analysis, BackgroundMatchesUncorrelatedJumpCount) {
    const int uncorrelated = 3200;
    const auto h = correlate(PeriodicTriggers{0.0, period},
                             synthetic_jumps(4000, uncorrelated, 0.8e-6, 1.1e-6, 3e-6, 15), bin);
    const auto f = fit_correlation(h);
    const double expected = uncorrelated * bin / period;
    EXPECT_NEAR(f.background_per_bin, expected, 3 * std::max(f.background_err, std::sqrt(expected / h.counts.size())));
}

TEST(Analysis, FoldedModelConservesArea) {
    CorrelationHistogram h{bin, period, std::vector<std::int64_t>(40, 0), std::nullopt};
    CorrelationFit f{};
    f.t0 = 20e-6;
    f.tau_rise = 1.1e-6;
    f.tau_decay = 9e-6;
    f.amplitude = 1000;
    double total = 0.0;
    for (std::size_t i = 0; i < h.counts.size(); ++i) total += correlation_model_counts(h, i, f);
    EXPECT_NEAR(total, 1000.0, 1e-6);
}

TEST(Analysis, Histogram) {
    const std::vector<double> v{0.01, 0.06, 0.07, 4.99, 5.5, -1.0};
    const auto h = histogram(v, 0.05, 5.0);
    EXPECT_EQ(h.counts.size(), 100u);
    EXPECT_EQ(h.counts[0], 1);
    EXPECT_EQ(h.counts[1], 2);
    EXPECT_EQ(h.counts[99], 1);
}
