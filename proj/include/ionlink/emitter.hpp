#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace ionlink {

/// Phases of one repetition of the triggered sequence:
/// [cooling][pump window (850 nm on)][repump (854 nm)], then idle until the next period.
struct SequenceSchedule {
    double repetition_rate = 125e3;  // Hz
    double cooling_duration = 3e-6;
    double pump_window = 4e-6;
    double repump_duration = 1e-6;

    double period() const { return 1.0 / repetition_rate; }

    // Onset of the 850 nm pulse, which serves as the herald time stamp.
    double trigger_time(std::int64_t index) const {
        return static_cast<double>(index) * period() + cooling_duration;
    }

    void validate() const {
        if (!(repetition_rate > 0)) throw DomainError("repetition_rate must be > 0");
        if (cooling_duration < 0 || pump_window < 0 || repump_duration < 0)
            throw DomainError("sequence phase durations must be >= 0");
        if (cooling_duration + pump_window + repump_duration > period() * (1 + 1e-12))
            throw DomainError("sequence phases exceed the repetition period");
    }
};

/// Survival through the link stages. A photon lost at one stage is lost at all later ones.
enum class Stage : int { Collected = 0, FiberCoupled = 1, FiberTransmitted = 2, Detected = 3 };
inline constexpr int stage_count = 4;

struct StageFlags {
    std::uint8_t bits = 0;

    bool has(Stage s) const { return bits & (1u << static_cast<int>(s)); }
    void set(Stage s) { bits |= static_cast<std::uint8_t>(1u << static_cast<int>(s)); }

    // Set bits form a prefix of the stage order.
    bool monotone() const { return (bits & (bits + 1)) == 0; }
};

struct Trigger {
    std::int64_t index;
    double time;  // s
};

struct PhotonEvent {
    std::optional<Trigger> trigger;  // absent for continuous generation
    double emission_time = 0.0;      // s, absolute
    int spectral_component = 0;
    StageFlags flags;

    double emission_offset() const { return trigger ? emission_time - trigger->time : 0.0; }
    bool reaches_receiver() const { return flags.has(Stage::FiberTransmitted); }
};

/// Piecewise-linear arrival-time density with exact inverse-CDF sampling.
class ArrivalSampler {
public:
    ArrivalSampler(std::vector<double> time, std::vector<double> density)
        : t_(std::move(time)), g_(std::move(density)) {
        if (t_.size() != g_.size() || t_.size() < 2) throw DomainError("arrival density needs >= 2 samples");
        cum_.assign(t_.size(), 0.0);
        for (std::size_t i = 1; i < t_.size(); ++i) {
            if (!(t_[i] > t_[i - 1])) throw DomainError("arrival grid must be increasing");
            if (g_[i] < 0 || g_[i - 1] < 0) throw DomainError("arrival density must be >= 0");
            cum_[i] = cum_[i - 1] + 0.5 * (g_[i] + g_[i - 1]) * (t_[i] - t_[i - 1]);
        }
        if (!(cum_.back() > 0)) throw DomainError("arrival density is identically zero");
    }

    // Restricts the density to [t_front, t_end]; the grid is cut at the last sample <= t_end.
    static ArrivalSampler truncated(const std::vector<double>& time, const std::vector<double>& density, double t_end) {
        std::vector<double> t, g;
        for (std::size_t i = 0; i < time.size() && time[i] <= t_end; ++i) {
            t.push_back(time[i]);
            g.push_back(density[i]);
        }
        return ArrivalSampler(std::move(t), std::move(g));
    }

    double total_mass() const { return cum_.back(); }
    double front() const { return t_.front(); }
    double back() const { return t_.back(); }

    double cdf(double t) const {
        if (t <= t_.front()) return 0.0;
        if (t >= t_.back()) return 1.0;
        const auto i = static_cast<std::size_t>(std::upper_bound(t_.begin(), t_.end(), t) - t_.begin()) - 1;
        const double h = t_[i + 1] - t_[i], x = t - t_[i];
        const double s = (g_[i + 1] - g_[i]) / h;
        return (cum_[i] + g_[i] * x + 0.5 * s * x * x) / cum_.back();
    }

    double sample(double u) const {
        if (u < 0 || u >= 1) throw DomainError("uniform variate must lie in [0, 1)");
        const double target = u * cum_.back();
        // First segment whose cumulative end exceeds the target.
        const auto it = std::upper_bound(cum_.begin() + 1, cum_.end(), target);
        const auto i = static_cast<std::size_t>(it - cum_.begin()) - 1;
        const double r = target - cum_[i];
        const double h = t_[i + 1] - t_[i];
        const double s = (g_[i + 1] - g_[i]) / h;
        double x;
        if (r <= 0) {
            x = 0.0;
        } else if (std::abs(s) * r < 1e-14 * std::max(g_[i] * g_[i], 1e-300)) {
            x = r / g_[i];
        } else {
            x = 2.0 * r / (g_[i] + std::sqrt(std::max(0.0, g_[i] * g_[i] + 2.0 * s * r)));
        }
        return t_[i] + std::clamp(x, 0.0, h);
    }

private:
    std::vector<double> t_, g_, cum_;
};

inline double sample_arrival(const ArrivalSampler& g, double u) { return g.sample(u); }

inline int sample_component(std::span<const double> weights, double u) {
    double acc = 0.0, total = 0.0;
    for (double w : weights) total += w;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u * total < acc) return static_cast<int>(i);
    }
    return weights.empty() ? 0 : static_cast<int>(weights.size() - 1);
}

/// Lazily generated triggered photon stream; yields only triggers that emitted.
class SequenceSource {
public:
    SequenceSource(std::int64_t n_triggers, SequenceSchedule schedule, const ArrivalSampler& g,
                   double pump_success_prob, std::vector<double> component_weights, std::uint64_t seed)
        : n_(n_triggers), schedule_(schedule), g_(&g), p_(pump_success_prob),
          weights_(std::move(component_weights)), rng_(seed) {
        if (n_ < 1) throw DomainError("n_triggers must be >= 1");
        schedule_.validate();
        if (p_ < 0 || p_ > 1) throw DomainError("pump_success_prob must lie in [0, 1]");
        if (g.back() > schedule_.pump_window * (1 + 1e-9) + 1e-15)
            throw DomainError("arrival density extends beyond the pump window");
        if (weights_.empty()) weights_ = {1.0};
    }

    std::int64_t triggers_issued() const { return next_; }

    std::optional<PhotonEvent> next() {
        while (next_ < n_) {
            const std::int64_t k = next_++;
            if (!rng_.bernoulli(p_)) continue;
            PhotonEvent ev;
            ev.trigger = Trigger{k, schedule_.trigger_time(k)};
            ev.emission_time = ev.trigger->time + g_->sample(rng_.uniform());
            ev.spectral_component = sample_component(weights_, rng_.uniform());
            return ev;
        }
        return std::nullopt;
    }

private:
    std::int64_t n_;
    SequenceSchedule schedule_;
    const ArrivalSampler* g_;
    double p_;
    std::vector<double> weights_;
    Rng rng_;
    std::int64_t next_ = 0;
};

inline std::vector<PhotonEvent> run_sequence(std::int64_t n_triggers, const SequenceSchedule& schedule,
                                             const ArrivalSampler& g, double pump_success_prob,
                                             std::vector<double> component_weights, std::uint64_t seed) {
    SequenceSource src(n_triggers, schedule, g, pump_success_prob, std::move(component_weights), seed);
    std::vector<PhotonEvent> out;
    while (auto ev = src.next()) out.push_back(*ev);
    return out;
}

/// Continuous generation into the single fiber mode: a homogeneous Poisson process.
/// Events are born already collected and fiber coupled.
class CwSource {
public:
    CwSource(double duration, double rate, std::vector<double> component_weights, std::uint64_t seed)
        : duration_(duration), rate_(rate), weights_(std::move(component_weights)), rng_(seed) {
        if (!(duration_ > 0)) throw DomainError("duration must be > 0");
        if (rate_ < 0) throw DomainError("rate must be >= 0");
        if (weights_.empty()) weights_ = {1.0};
    }

    std::optional<PhotonEvent> next() {
        if (rate_ <= 0) return std::nullopt;
        t_ += rng_.exponential(rate_);
        if (t_ >= duration_) {
            rate_ = 0;
            return std::nullopt;
        }
        PhotonEvent ev;
        ev.emission_time = t_;
        ev.spectral_component = sample_component(weights_, rng_.uniform());
        ev.flags.set(Stage::Collected);
        ev.flags.set(Stage::FiberCoupled);
        return ev;
    }

private:
    double duration_, rate_;
    std::vector<double> weights_;
    Rng rng_;
    double t_ = 0.0;
};

inline std::vector<PhotonEvent> run_cw(double duration, double rate, std::vector<double> component_weights,
                                       std::uint64_t seed) {
    CwSource src(duration, rate, std::move(component_weights), seed);
    std::vector<PhotonEvent> out;
    while (auto ev = src.next()) out.push_back(*ev);
    return out;
}

}  // namespace ionlink
