#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "ionlink/channel.hpp"

using namespace ionlink;

namespace {

ChannelBudget perfect() { return {1.0, 1.0, 1.0, 1.0}; }

double closed_form_lorentzian(double d, double fwhm) {
    const double g = 0.5 * fwhm;
    return g / std::numbers::pi / (d * d + g * g);
}

PhotonSpectrum single(double offset, double width) { return {{{offset, 1.0, width}}}; }
AbsorberLine line(double offset, double width) { return {{{offset, 1.0}}, width}; }

const double p32_width = mhz_to_angular(22.99);

}  // namespace

TEST(Channel, PerfectBudgetIsIdentity) {
    const auto ev = run_cw(1.0, 5e3, {}, 2);
    std::vector<PhotonEvent> born = ev;
    for (auto& e : born) e.flags = {};
    const auto out = transmit(born, perfect(), 3);
    ASSERT_EQ(out.size(), born.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        EXPECT_EQ(out[i].emission_time, born[i].emission_time);
        EXPECT_EQ(out[i].flags.bits, 0b1111);
    }
}

TEST(Channel, DetectorThinsSingleModeStream) {
    ChannelBudget b = perfect();
    b.detector_quantum_efficiency = 0.24;
    const double duration = 20.0;
    const auto out = transmit(run_cw(duration, 18e3, {}, 4), b, 5, Stage::FiberTransmitted);
    std::size_t detected = 0;
    for (const auto& e : out) detected += e.flags.has(Stage::Detected);
    const double expected = 18e3 * 0.24 * duration;
    EXPECT_NEAR(expected / duration, 4.32e3, 1.0);
    EXPECT_NEAR(static_cast<double>(detected), expected, 3 * std::sqrt(expected));
}

TEST(Channel, ZeroEfficiencyStageBlocksEverything) {
    for (int s = 0; s < stage_count; ++s) {
        ChannelBudget b = perfect();
        auto st = b.stages();
        st[s] = 0.0;
        b = {st[0], st[1], st[2], st[3]};
        std::vector<PhotonEvent> ev(1000);
        for (std::size_t i = 0; i < ev.size(); ++i) ev[i].emission_time = i * 1e-6;
        for (const auto& e : transmit(ev, b, 6)) {
            EXPECT_FALSE(e.flags.has(static_cast<Stage>(s)));
            EXPECT_TRUE(e.flags.monotone());
        }
    }
}

TEST(Channel, FlagsStayMonotoneAndMatchStageProduct) {
    const ChannelBudget b{0.3, 0.6, 0.8, 0.5};
    std::vector<PhotonEvent> ev(200000);
    for (std::size_t i = 0; i < ev.size(); ++i) ev[i].emission_time = i * 1e-6;
    const auto out = transmit(ev, b, 8);
    std::array<double, stage_count> survived{};
    for (const auto& e : out) {
        ASSERT_TRUE(e.flags.monotone());
        for (int s = 0; s < stage_count; ++s) survived[s] += e.flags.has(static_cast<Stage>(s));
    }
    const double n = static_cast<double>(ev.size());
    for (int s = 0; s < stage_count; ++s) {
        const double p = b.product(Stage::Collected, static_cast<Stage>(s));
        EXPECT_NEAR(survived[s], n * p, 3 * std::sqrt(n * p * (1 - p)));
    }
}

TEST(Channel, RejectsUnorderedEventsAndBadBudget) {
    std::vector<PhotonEvent> ev(2);
    ev[0].emission_time = 2.0;
    ev[1].emission_time = 1.0;
    EXPECT_THROW(transmit(ev, perfect(), 1), DomainError);
    EXPECT_THROW(transmit({}, ChannelBudget{1.2, 1, 1, 1}, 1), DomainError);
}

TEST(Channel, OverlapOfNarrowPhotonOnResonanceIsOne) {
    EXPECT_NEAR(spectral_overlap(single(0, 0), line(0, p32_width)), 1.0, 1e-12);
}

TEST(Channel, OverlapOfTwoLorentzians) {
    const double g1 = mhz_to_angular(6), g2 = p32_width, d = mhz_to_angular(4);
    const double expected = closed_form_lorentzian(d, g1 + g2) / closed_form_lorentzian(0, g2);
    EXPECT_NEAR(spectral_overlap(single(d, g1), line(0, g2)), expected, 1e-12);
}

TEST(Channel, OverlapIsSymmetricAtFixedNormalisation) {
    const double g1 = mhz_to_angular(6), g2 = p32_width, d = mhz_to_angular(7);
    const double ab = spectral_overlap(single(d, g1), line(0, g2)) * lorentzian(0, g2);
    const double ba = spectral_overlap(single(0, g2), line(d, g1)) * lorentzian(0, g1);
    EXPECT_NEAR(ab / ba, 1.0, 1e-12);
}

TEST(Channel, OverlapDecreasesWithDetuningAndWidth) {
    double prev = 2.0;
    for (int i = 0; i <= 40; ++i) {
        const double v = spectral_overlap(single(mhz_to_angular(i), mhz_to_angular(6)), line(0, p32_width));
        EXPECT_LT(v, prev);
        EXPECT_NEAR(v, spectral_overlap(single(-mhz_to_angular(i), mhz_to_angular(6)), line(0, p32_width)), 1e-14);
        prev = v;
    }
    prev = 2.0;
    for (int w = 0; w <= 40; ++w) {
        const double v = spectral_overlap(single(0, mhz_to_angular(w)), line(0, p32_width));
        EXPECT_LT(v, prev);
        prev = v;
    }
}

TEST(Channel, PaperLikeOverlap) {
    const AtomModel atom = default_atom_model();
    for (double gauss : {3.0, 6.0}) {
        const auto field = MagneticField::from_gauss(gauss);
        const auto photon = zeeman_photon_spectrum(atom, field, mhz_to_angular(6));
        const auto absorber = zeeman_absorber_line(atom, field);
        EXPECT_NEAR(absorber.natural_linewidth_fwhm / p32_width, 1.0, 0.005);
        EXPECT_NEAR(spectral_overlap(photon, absorber), 2.5 / 4.3, 0.15) << gauss;
    }
}

TEST(Channel, ZeemanSpectrumWeights) {
    const AtomModel atom = default_atom_model();
    const auto photon = zeeman_photon_spectrum(atom, MagneticField::from_gauss(3.0), mhz_to_angular(6));
    ASSERT_EQ(photon.components.size(), 3u);
    EXPECT_NO_THROW(photon.validate());
    // Mirror symmetry of the sigma components.
    EXPECT_NEAR(photon.components[0].weight, photon.components[2].weight, 1e-12);
    EXPECT_NEAR(photon.components[0].center_offset, -photon.components[2].center_offset, 1e-3);
    EXPECT_NEAR(photon.components[1].center_offset, 0.0, 1e-3);
}

TEST(Channel, EffectiveAbsorptionProbability) {
    EXPECT_NEAR(effective_absorption_prob(4.3e-4, 0.58), 2.5e-4, 0.01e-4);
    EXPECT_EQ(effective_absorption_prob(4.3e-4, 1.0), 4.3e-4);
    EXPECT_EQ(effective_absorption_prob(0.0, 0.58), 0.0);
    EXPECT_THROW(effective_absorption_prob(-0.1, 0.5), DomainError);
    EXPECT_THROW(effective_absorption_prob(0.1, 1.5), DomainError);
}
