#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "emitter.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace ionlink {

struct ReceiverParams {
    double pump_rate = 2.0;                        // bright -> dark, 1/s
    double spontaneous_rate = 1.0 / 1.168;         // D5/2 decay, 1/s
    double background_rate = 1.0 / 1.022 - 1.0 / 1.168;  // stray 854 nm light, 1/s
    double p_abs = 2.5e-4 / 0.9347;                // absorption probability per incident photon
    double p_jump = 0.9347;                        // P3/2 -> S1/2 after absorption
    double p_d32 = 0.0;                            // extra jump probability via D3/2, when enabled
    double bright_detection_rate = 3e5;            // 1/s
    double dark_count_rate = 200.0;                // 1/s

    double effective_p_jump() const { return std::min(1.0, p_jump + p_d32); }
    double dark_exit_rate() const { return spontaneous_rate + background_rate; }

    void validate() const {
        auto rate = [](double v, const char* name) {
            if (!(v >= 0) || !std::isfinite(v)) throw DomainError(std::string(name) + " must be >= 0");
        };
        auto prob = [](double v, const char* name) {
            if (!(v >= 0 && v <= 1)) throw DomainError(std::string(name) + " must lie in [0, 1]");
        };
        rate(pump_rate, "pump_rate");
        rate(spontaneous_rate, "spontaneous_rate");
        rate(background_rate, "background_rate");
        rate(bright_detection_rate, "bright_detection_rate");
        rate(dark_count_rate, "dark_count_rate");
        prob(p_abs, "p_abs");
        prob(p_jump, "p_jump");
        prob(p_d32, "p_d32");
    }
};

enum class IonState : std::uint8_t { Bright, Dark };
enum class EndCause : std::uint8_t { Pump, Spontaneous, Background, Absorption, RunEnd };

constexpr std::string_view to_string(IonState s) { return s == IonState::Bright ? "bright" : "dark"; }

constexpr std::string_view to_string(EndCause c) {
    switch (c) {
        case EndCause::Pump: return "pump";
        case EndCause::Spontaneous: return "spontaneous";
        case EndCause::Background: return "background";
        case EndCause::Absorption: return "absorption";
        case EndCause::RunEnd: return "run_end";
    }
    return "?";
}

struct Interval {
    IonState state;
    double start;
    double end;
    EndCause cause;
};

struct ReceiverTrajectory {
    double duration = 0.0;
    std::vector<Interval> intervals;

    std::size_t count(EndCause c) const {
        std::size_t n = 0;
        for (const auto& iv : intervals) n += (iv.cause == c);
        return n;
    }
};

/// Quantum-jump Monte Carlo of the receiver. `next_arrival` yields incident photon
/// arrival times in nondecreasing order, or nullopt when exhausted. The ion starts bright.
template <class Feed>
ReceiverTrajectory simulate(double duration, Feed&& next_arrival, const ReceiverParams& params, std::uint64_t seed) {
    if (!(duration > 0)) throw DomainError("duration must be > 0");
    params.validate();
    Rng rng(seed);
    ReceiverTrajectory traj;
    traj.duration = duration;

    std::optional<double> pending = next_arrival();
    double last_arrival = -INFINITY;
    auto advance = [&] {
        pending = next_arrival();
        if (pending) {
            if (*pending < last_arrival) throw DomainError("incident photons are not time ordered");
            last_arrival = *pending;
        }
    };
    if (pending) last_arrival = *pending;

    const double p_jump = params.effective_p_jump();
    double t = 0.0;
    IonState state = IonState::Bright;
    while (t < duration) {
        if (state == IonState::Bright) {
            const double end = t + rng.exponential(params.pump_rate);
            // Photons hitting a bright ion have no effect.
            while (pending && *pending < std::min(end, duration)) advance();
            if (end >= duration) {
                traj.intervals.push_back({state, t, duration, EndCause::RunEnd});
                break;
            }
            traj.intervals.push_back({state, t, end, EndCause::Pump});
            t = end;
            state = IonState::Dark;
        } else {
            const double w_sp = rng.exponential(params.spontaneous_rate);
            const double w_bg = rng.exponential(params.background_rate);
            double end = t + std::min(w_sp, w_bg);
            EndCause cause = w_sp <= w_bg ? EndCause::Spontaneous : EndCause::Background;
            while (pending && *pending < std::min(end, duration)) {
                const double arrival = *pending;
                advance();
                if (arrival < t) continue;
                if (rng.bernoulli(params.p_abs) && rng.bernoulli(p_jump)) {
                    end = arrival;
                    cause = EndCause::Absorption;
                    break;
                }
            }
            if (end >= duration) {
                traj.intervals.push_back({state, t, duration, EndCause::RunEnd});
                break;
            }
            traj.intervals.push_back({state, t, end, cause});
            t = end;
            state = IonState::Bright;
        }
    }
    // Drain so that ordering errors after the last transition are still reported.
    while (pending && *pending < duration) advance();
    return traj;
}

inline ReceiverTrajectory simulate(double duration, const std::vector<PhotonEvent>& photons,
                                   const ReceiverParams& params, std::uint64_t seed) {
    std::size_t i = 0;
    auto feed = [&]() -> std::optional<double> {
        while (i < photons.size()) {
            const auto& ev = photons[i++];
            if (ev.reaches_receiver()) return ev.emission_time;
        }
        return std::nullopt;
    };
    return simulate(duration, feed, params, seed);
}

/// Lazily generated 397 nm detection time stamps: Poisson at the bright rate while
/// bright and at the dark-count rate while dark.
class DetectionStream {
public:
    DetectionStream(const ReceiverTrajectory& traj, const ReceiverParams& params, std::uint64_t seed)
        : traj_(&traj), bright_(params.bright_detection_rate), dark_(params.dark_count_rate), rng_(seed) {
        if (!traj.intervals.empty()) t_ = traj.intervals.front().start;
    }

    std::optional<double> next() {
        while (k_ < traj_->intervals.size()) {
            const Interval& iv = traj_->intervals[k_];
            const double rate = iv.state == IonState::Bright ? bright_ : dark_;
            const double cand = t_ + rng_.exponential(rate);
            if (cand < iv.end) {
                t_ = cand;
                return cand;
            }
            // Memoryless: restart the clock at the boundary.
            ++k_;
            t_ = iv.end;
        }
        return std::nullopt;
    }

private:
    const ReceiverTrajectory* traj_;
    double bright_, dark_;
    Rng rng_;
    std::size_t k_ = 0;
    double t_ = 0.0;
};

inline std::vector<double> synthesize_trace(const ReceiverTrajectory& traj, const ReceiverParams& params,
                                            std::uint64_t seed) {
    DetectionStream stream(traj, params, seed);
    std::vector<double> out;
    while (auto t = stream.next()) out.push_back(*t);
    return out;
}

}  // namespace ionlink
