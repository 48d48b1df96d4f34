#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "ionlink/receiver.hpp"

using namespace ionlink;

namespace {

std::vector<double> dark_durations(const ReceiverTrajectory& t) {
    std::vector<double> d;
    for (const auto& iv : t.intervals)
        if (iv.state == IonState::Dark && iv.cause != EndCause::RunEnd) d.push_back(iv.end - iv.start);
    return d;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// Photons arriving as a Poisson stream at `rate`.
auto poisson_feed(double rate, std::uint64_t seed) {
    return [rng = Rng(seed), t = 0.0, rate]() mutable -> std::optional<double> {
        t += rng.exponential(rate);
        return t;
    };
}

auto no_photons() {
    return []() -> std::optional<double> { return std::nullopt; };
}

}  // namespace

TEST(Receiver, DefaultsCloseOnTheDarkLifetime) {
    const ReceiverParams p;
    EXPECT_NEAR(1.0 / p.dark_exit_rate(), 1.022, 1e-12);
    EXPECT_NEAR(p.background_rate, 0.12, 0.005);
    EXPECT_NEAR(p.p_abs * p.p_jump, 2.5e-4, 1e-15);
}

TEST(Receiver, DarkPeriodsWithoutPhotons) {
    const ReceiverParams p;
    const auto traj = simulate(4000.0, no_photons(), p, 1);
    const auto d = dark_durations(traj);
    ASSERT_GT(d.size(), 1000u);
    const double tau = mean(d), se = tau / std::sqrt(static_cast<double>(d.size()));
    EXPECT_NEAR(tau, 1.022, 3 * se);
    EXPECT_EQ(traj.count(EndCause::Absorption), 0u);
}

TEST(Receiver, DarkPeriodsWithPhotons) {
    const ReceiverParams p;
    const auto traj = simulate(2000.0, poisson_feed(12e3, 2), p, 3);
    const auto d = dark_durations(traj);
    const double tau = mean(d), se = tau / std::sqrt(static_cast<double>(d.size()));
    const double expected = 1.0 / (p.dark_exit_rate() + 12e3 * p.p_abs * p.p_jump);
    EXPECT_NEAR(expected, 0.252, 0.001);
    EXPECT_NEAR(tau, expected, 3 * se);
}

TEST(Receiver, AbsorptionMultipliesTheHazard) {
    ReceiverParams p;
    p.p_abs = 1e-3;
    const double r_in = 5e3;
    const auto off = dark_durations(simulate(3000.0, no_photons(), p, 4));
    const auto on = dark_durations(simulate(1500.0, poisson_feed(r_in, 5), p, 6));
    const double factor = 1 + r_in * p.p_abs * p.p_jump / p.dark_exit_rate();
    const double ratio = mean(off) / mean(on);
    const double rel = std::hypot(1 / std::sqrt(double(off.size())), 1 / std::sqrt(double(on.size())));
    EXPECT_NEAR(ratio / factor, 1.0, 3 * rel);
}

TEST(Receiver, DarkDurationsAreExponential) {
    const ReceiverParams p;
    auto d = dark_durations(simulate(3000.0, no_photons(), p, 7));
    ASSERT_GE(d.size(), 1000u);
    std::sort(d.begin(), d.end());
    const double rate = p.dark_exit_rate(), n = static_cast<double>(d.size());
    double ks = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double f = 1 - std::exp(-rate * d[i]);
        ks = std::max({ks, std::abs(f - i / n), std::abs((i + 1) / n - f)});
    }
    EXPECT_LT(ks, 1.628 / std::sqrt(n));
}

TEST(Receiver, NoPumpingStaysBright) {
    ReceiverParams p;
    p.pump_rate = 0;
    const auto traj = simulate(100.0, poisson_feed(1e3, 1), p, 8);
    ASSERT_EQ(traj.intervals.size(), 1u);
    EXPECT_EQ(traj.intervals[0].state, IonState::Bright);
    EXPECT_EQ(traj.intervals[0].start, 0.0);
    EXPECT_EQ(traj.intervals[0].end, 100.0);
    EXPECT_EQ(traj.intervals[0].cause, EndCause::RunEnd);
}

TEST(Receiver, IntervalsAreContiguousAndAlternate) {
    const auto traj = simulate(500.0, poisson_feed(12e3, 9), ReceiverParams{}, 10);
    ASSERT_FALSE(traj.intervals.empty());
    EXPECT_EQ(traj.intervals.front().start, 0.0);
    EXPECT_EQ(traj.intervals.back().end, 500.0);
    for (std::size_t i = 0; i < traj.intervals.size(); ++i) {
        const auto& iv = traj.intervals[i];
        EXPECT_LT(iv.start, iv.end);
        if (iv.cause == EndCause::Absorption || iv.cause == EndCause::Spontaneous || iv.cause == EndCause::Background)
            EXPECT_EQ(iv.state, IonState::Dark);
        if (i > 0) {
            EXPECT_EQ(iv.start, traj.intervals[i - 1].end);
            EXPECT_NE(iv.state, traj.intervals[i - 1].state);
        }
    }
    EXPECT_GT(traj.count(EndCause::Absorption), 0u);
}

TEST(Receiver, UnorderedPhotonsAreRejected) {
    std::vector<double> t{0.5, 0.2};
    std::size_t i = 0;
    auto feed = [&]() -> std::optional<double> {
        if (i < t.size()) return t[i++];
        return std::nullopt;
    };
    EXPECT_THROW(simulate(1.0, feed, ReceiverParams{}, 1), DomainError);
}

TEST(Receiver, NoDarkCountsMeansSilentDarkPeriods) {
    ReceiverParams p;
    p.dark_count_rate = 0;
    const auto traj = simulate(100.0, no_photons(), p, 11);
    const auto det = synthesize_trace(traj, p, 12);
    std::size_t k = 0;
    for (double t : det) {
        while (traj.intervals[k].end <= t) ++k;
        ASSERT_LE(traj.intervals[k].start, t);
        EXPECT_EQ(traj.intervals[k].state, IonState::Bright);
    }
}

TEST(Receiver, BrightDetectionCount) {
    ReceiverParams p;
    p.pump_rate = 0;
    const auto traj = simulate(1.0, no_photons(), p, 13);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto det = synthesize_trace(traj, p, seed);
        EXPECT_NEAR(static_cast<double>(det.size()), 3e5, 3 * std::sqrt(3e5));
    }
}

TEST(Receiver, FirstDetectionAfterReturnToBright) {
    const ReceiverParams p;
    const auto traj = simulate(1000.0, poisson_feed(12e3, 14), p, 15);
    DetectionStream stream(traj, p, 16);
    auto det = stream.next();
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i + 1 < traj.intervals.size(); ++i) {
        if (traj.intervals[i].state != IonState::Dark) continue;
        const double edge = traj.intervals[i].end;
        while (det && *det < edge) det = stream.next();
        if (!det) break;
        sum += *det - edge;
        ++n;
    }
    ASSERT_GT(n, 500);
    EXPECT_NEAR(sum / n / 3.33e-6, 1.0, 0.15);
}

TEST(Receiver, TrajectoriesAreReproducible) {
    const auto a = simulate(200.0, poisson_feed(12e3, 1), ReceiverParams{}, 17);
    const auto b = simulate(200.0, poisson_feed(12e3, 1), ReceiverParams{}, 17);
    ASSERT_EQ(a.intervals.size(), b.intervals.size());
    for (std::size_t i = 0; i < a.intervals.size(); ++i) {
        EXPECT_EQ(a.intervals[i].end, b.intervals[i].end);
        EXPECT_EQ(a.intervals[i].cause, b.intervals[i].cause);
    }
    EXPECT_EQ(synthesize_trace(a, ReceiverParams{}, 3), synthesize_trace(b, ReceiverParams{}, 3));
}

TEST(Receiver, ParameterValidation) {
    ReceiverParams p;
    p.p_abs = 1.5;
    EXPECT_THROW(p.validate(), DomainError);
    p = {};
    p.dark_count_rate = -1;
    EXPECT_THROW(p.validate(), DomainError);
    EXPECT_THROW(simulate(0.0, no_photons(), ReceiverParams{}, 1), DomainError);
}
