#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "atom.hpp"
#include "emitter.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace ionlink {

struct ChannelBudget {
    double collection_efficiency = 0.04;
    double fiber_coupling_efficiency = 0.63;
    double fiber_transmission = 0.667;
    double detector_quantum_efficiency = 0.24;

    std::array<double, stage_count> stages() const {
        return {collection_efficiency, fiber_coupling_efficiency, fiber_transmission, detector_quantum_efficiency};
    }

    // Product of stage efficiencies from `first` through `last` inclusive.
    double product(Stage first, Stage last) const {
        const auto s = stages();
        double p = 1.0;
        for (int i = static_cast<int>(first); i <= static_cast<int>(last); ++i) p *= s[i];
        return p;
    }

    void validate() const {
        const char* names[] = {"collection_efficiency", "fiber_coupling_efficiency", "fiber_transmission",
                               "detector_quantum_efficiency"};
        const auto s = stages();
        for (int i = 0; i < stage_count; ++i)
            if (!(s[i] >= 0 && s[i] <= 1)) throw DomainError(std::string(names[i]) + " must lie in [0, 1]");
    }
};

/// Independent Bernoulli thinning per stage, starting at `first`. Earlier stages must
/// already be marked as survived.
class ChannelThinner {
public:
    ChannelThinner(ChannelBudget budget, std::uint64_t seed, Stage first = Stage::Collected)
        : budget_(budget), rng_(seed), first_(first) {
        budget_.validate();
    }

    void apply(PhotonEvent& ev) {
        for (int i = 0; i < static_cast<int>(first_); ++i)
            if (!ev.flags.has(static_cast<Stage>(i)))
                throw DomainError("photon has not passed the stages before the thinning start");
        const auto s = budget_.stages();
        for (int i = static_cast<int>(first_); i < stage_count; ++i) {
            if (!rng_.bernoulli(s[i])) return;
            ev.flags.set(static_cast<Stage>(i));
        }
    }

private:
    ChannelBudget budget_;
    Rng rng_;
    Stage first_;
};

inline std::vector<PhotonEvent> transmit(std::vector<PhotonEvent> events, const ChannelBudget& budget,
                                         std::uint64_t seed, Stage first = Stage::Collected) {
    for (std::size_t i = 1; i < events.size(); ++i)
        if (events[i].emission_time < events[i - 1].emission_time) throw DomainError("events must be time ordered");
    ChannelThinner thin(budget, seed, first);
    for (auto& ev : events) thin.apply(ev);
    return events;
}

// ---------------------------------------------------------------------------
// Spectral model

struct SpectralComponent {
    double center_offset;   // rad/s
    double weight;
    double linewidth_fwhm;  // rad/s
};

struct PhotonSpectrum {
    std::vector<SpectralComponent> components;

    std::vector<double> weights() const {
        std::vector<double> w;
        for (const auto& c : components) w.push_back(c.weight);
        return w;
    }

    void validate() const {
        if (components.empty()) throw DomainError("photon spectrum has no components");
        double sum = 0.0;
        for (const auto& c : components) {
            if (c.weight < 0) throw DomainError("spectral weights must be >= 0");
            if (c.linewidth_fwhm < 0) throw DomainError("linewidths must be >= 0");
            sum += c.weight;
        }
        if (std::abs(sum - 1.0) > 1e-12) throw DomainError("spectral weights must sum to 1");
    }
};

struct LineComponent {
    double center_offset;  // rad/s
    double weight;
};

struct AbsorberLine {
    std::vector<LineComponent> components;
    double natural_linewidth_fwhm;  // rad/s

    void validate() const {
        if (components.empty()) throw DomainError("absorber has no components");
        if (!(natural_linewidth_fwhm > 0)) throw DomainError("absorber linewidth must be > 0");
        double sum = 0.0;
        for (const auto& c : components) {
            if (c.weight < 0) throw DomainError("absorber weights must be >= 0");
            sum += c.weight;
        }
        if (std::abs(sum - 1.0) > 1e-12) throw DomainError("absorber weights must sum to 1");
    }
};

// Normalised Lorentzian of full width `fwhm` evaluated at detuning `d`.
inline double lorentzian(double d, double fwhm) {
    return (fwhm / (2.0 * std::numbers::pi)) / (d * d + 0.25 * fwhm * fwhm);
}

/// Absorption strength of the photon relative to a monochromatic on-resonance photon on a
/// single absorber line. Lorentzian convolution adds the widths.
inline double spectral_overlap(const PhotonSpectrum& photon, const AbsorberLine& absorber) {
    photon.validate();
    absorber.validate();
    const double gamma = absorber.natural_linewidth_fwhm;
    double sum = 0.0;
    for (const auto& p : photon.components)
        for (const auto& a : absorber.components)
            sum += p.weight * a.weight * lorentzian(p.center_offset - a.center_offset, p.linewidth_fwhm + gamma);
    return sum / lorentzian(0.0, gamma);
}

inline PhotonSpectrum shifted(PhotonSpectrum s, double offset) {
    for (auto& c : s.components) c.center_offset += offset;
    return s;
}

inline double effective_absorption_prob(double p_peak, double overlap) {
    if (p_peak < 0 || p_peak > 1) throw DomainError("p_peak must lie in [0, 1]");
    if (overlap < 0 || overlap > 1) throw DomainError("overlap must lie in [0, 1]");
    return p_peak * overlap;
}

namespace detail {

// D5/2 <-> P3/2 Zeeman lines grouped by polarization; centre is the strength-weighted mean.
inline std::array<LineComponent, 3> zeeman_groups_854(const AtomModel& atom, MagneticField field) {
    std::array<LineComponent, 3> groups{};
    std::array<double, 3> strength{}, moment{};
    for (const auto& lo : atom.sublevels(LevelId::D52))
        for (const auto& up : atom.sublevels(LevelId::P32)) {
            const int dq = up.two_m - lo.two_m;
            if (std::abs(dq) > 2) continue;
            const int q = dq / 2;
            const double c = atom.coupling_amplitude(lo, up, q);
            const double w = c * c;
            const double freq = atom.zeeman_shift(up, field) - atom.zeeman_shift(lo, field);
            strength[q + 1] += w;
            moment[q + 1] += w * freq;
        }
    const double total = strength[0] + strength[1] + strength[2];
    for (int i = 0; i < 3; ++i) groups[i] = {moment[i] / strength[i], strength[i] / total};
    return groups;
}

}  // namespace detail

/// Photon emitted on P3/2 -> D5/2: one component per polarization at the Zeeman-split
/// line centres, each with the generation-limited Lorentzian width.
inline PhotonSpectrum zeeman_photon_spectrum(const AtomModel& atom, MagneticField field, double linewidth_fwhm) {
    PhotonSpectrum s;
    for (const auto& g : detail::zeeman_groups_854(atom, field))
        s.components.push_back({g.center_offset, g.weight, linewidth_fwhm});
    return s;
}

/// Receiver ion in D5/2 absorbing on D5/2 -> P3/2, with the P3/2 natural width.
inline AbsorberLine zeeman_absorber_line(const AtomModel& atom, MagneticField field) {
    AbsorberLine a;
    for (const auto& g : detail::zeeman_groups_854(atom, field)) a.components.push_back(g);
    a.natural_linewidth_fwhm = atom.total_decay_rate(LevelId::P32) + atom.total_decay_rate(LevelId::D52);
    return a;
}

}  // namespace ionlink
