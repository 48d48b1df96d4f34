#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <gsl/gsl_sf_coupling.h>

#include "errors.hpp"
#include "units.hpp"

namespace ionlink {

enum class LevelId { S12, P12, P32, D32, D52 };

inline constexpr std::array all_levels{LevelId::S12, LevelId::P12, LevelId::P32, LevelId::D32,
                                       LevelId::D52};

constexpr std::string_view level_key(LevelId id) {
    switch (id) {
        case LevelId::S12: return "S12";
        case LevelId::P12: return "P12";
        case LevelId::P32: return "P32";
        case LevelId::D32: return "D32";
        case LevelId::D52: return "D52";
    }
    return "?";
}

constexpr std::string_view level_label(LevelId id) {
    switch (id) {
        case LevelId::S12: return "S1/2";
        case LevelId::P12: return "P1/2";
        case LevelId::P32: return "P3/2";
        case LevelId::D32: return "D3/2";
        case LevelId::D52: return "D5/2";
    }
    return "?";
}

inline std::optional<LevelId> parse_level(std::string_view s) {
    for (LevelId id : all_levels)
        if (s == level_key(id) || s == level_label(id)) return id;
    return std::nullopt;
}

// Angular momenta are stored doubled so half-integers stay exact.
struct Level {
    LevelId id;
    int two_j;
    double g_j;
    double energy_cm;  // only used to order levels

    double j() const { return 0.5 * two_j; }
    int multiplicity() const { return two_j + 1; }
};

struct ZeemanState {
    LevelId level;
    int two_m;

    double m() const { return 0.5 * two_m; }
    friend bool operator==(const ZeemanState&, const ZeemanState&) = default;
};

struct DecayChannel {
    LevelId upper;
    LevelId lower;
    double partial_rate;  // rad/s
    int wavelength_nm;
    int rank = 1;  // 1 dipole, 2 quadrupole
};

struct MagneticField {
    double tesla = 0.0;

    static MagneticField from_gauss(double g) {
        if (g < 0) throw DomainError("magnetic field magnitude must be >= 0");
        return {g * gauss};
    }
};

/// <j1 m1; j2 m2 | J M>, all arguments doubled.
inline double clebsch_gordan(int two_j1, int two_m1, int two_j2, int two_m2, int two_J, int two_M) {
    if (two_m1 + two_m2 != two_M) return 0.0;
    const double w3j = gsl_sf_coupling_3j(two_j1, two_j2, two_J, two_m1, two_m2, -two_M);
    const int phase2 = two_j1 - two_j2 + two_M;  // always even for valid inputs
    const double sign = ((phase2 / 2) % 2 == 0) ? 1.0 : -1.0;
    return sign * std::sqrt(two_J + 1.0) * w3j;
}

/// Level scheme, decay channels and Zeeman structure of the ion.
/// Immutable after construction.
class AtomModel {
public:
    AtomModel(std::vector<Level> levels, std::vector<DecayChannel> channels)
        : levels_(std::move(levels)), channels_(std::move(channels)) {
        for (const auto& lv : levels_) {
            if (lv.two_j <= 0 || lv.two_j % 2 == 0)
                throw DomainError(std::string(level_label(lv.id)) + ": J must be half-integer");
            if (!(lv.g_j > 0)) throw DomainError(std::string(level_label(lv.id)) + ": gJ must be > 0");
        }
        for (const auto& ch : channels_) {
            if (!(ch.partial_rate >= 0)) throw DomainError("decay rate must be >= 0");
            if (level(ch.upper).energy_cm <= level(ch.lower).energy_cm)
                throw DomainError("decay channel upper level must lie above lower level");
            if (ch.rank != 1 && ch.rank != 2) throw DomainError("decay rank must be 1 or 2");
        }
    }

    std::span<const Level> levels() const { return levels_; }
    std::span<const DecayChannel> channels() const { return channels_; }

    bool has_level(LevelId id) const {
        return std::any_of(levels_.begin(), levels_.end(), [&](const Level& l) { return l.id == id; });
    }

    const Level& level(LevelId id) const {
        for (const auto& l : levels_)
            if (l.id == id) return l;
        throw DomainError("unknown level " + std::string(level_label(id)));
    }

    double total_decay_rate(LevelId id) const {
        level(id);
        double sum = 0.0;
        for (const auto& ch : channels_)
            if (ch.upper == id) sum += ch.partial_rate;
        return sum;
    }

    double partial_rate(LevelId upper, LevelId lower) const {
        double sum = 0.0;
        for (const auto& ch : channels_)
            if (ch.upper == upper && ch.lower == lower) sum += ch.partial_rate;
        return sum;
    }

    double branching_ratio(LevelId upper, LevelId lower) const {
        const double total = total_decay_rate(upper);
        if (total <= 0.0)
            throw DomainError(std::string(level_label(upper)) + " has zero total decay rate");
        return partial_rate(upper, lower) / total;
    }

    const DecayChannel* channel_by_wavelength(int nm) const {
        for (const auto& ch : channels_)
            if (ch.wavelength_nm == nm) return &ch;
        return nullptr;
    }

    bool dipole_connected(LevelId a, LevelId b) const {
        for (const auto& ch : channels_)
            if (ch.rank == 1 && ((ch.upper == a && ch.lower == b) || (ch.upper == b && ch.lower == a)))
                return true;
        return false;
    }

    double zeeman_shift(const ZeemanState& s, MagneticField field) const {
        return bohr_magneton_angular * level(s.level).g_j * s.m() * field.tesla;
    }

    /// Relative multipole amplitude lower -> upper with spherical component q.
    /// Normalised so that, for each upper sublevel, the sum of squares over
    /// lower sublevels and q is 1.
    double transition_amplitude(const ZeemanState& lower, const ZeemanState& upper, int q,
                                int rank) const {
        const Level& lo = level(lower.level);
        const Level& up = level(upper.level);
        if (upper.two_m != lower.two_m + 2 * q) return 0.0;
        if (std::abs(lower.two_m) > lo.two_j || std::abs(upper.two_m) > up.two_j) return 0.0;
        return clebsch_gordan(lo.two_j, lower.two_m, 2 * rank, 2 * q, up.two_j, upper.two_m);
    }

    double coupling_amplitude(const ZeemanState& lower, const ZeemanState& upper, int q) const {
        if (q < -1 || q > 1) throw DomainError("polarization component q must be -1, 0 or +1");
        if (!dipole_connected(lower.level, upper.level))
            throw DomainError(std::string(level_label(lower.level)) + " and " +
                              std::string(level_label(upper.level)) + " are not dipole connected");
        return transition_amplitude(lower, upper, q, 1);
    }

    std::vector<ZeemanState> sublevels(LevelId id) const {
        const Level& lv = level(id);
        std::vector<ZeemanState> out;
        for (int tm = -lv.two_j; tm <= lv.two_j; tm += 2) out.push_back({id, tm});
        return out;
    }

private:
    std::vector<Level> levels_;
    std::vector<DecayChannel> channels_;
};

// Structured-text atom description. One record per line:
//   level <id> <2J> <gJ> <energy_cm>
//   decay <upper> <lower> <wavelength_nm> <rank> <rate-spec>
// rate-spec is one of
//   mhz:<f>                    partial rate 2pi*f MHz
//   branch:<b>:<total_mhz>     b * 2pi*total MHz
//   lifetime:<s>               1/s
//   closure:<b>:<lower>        remainder that makes upper->lower branching equal b
inline AtomModel parse_atom_model(std::istream& in) {
    std::vector<Level> levels;
    struct Pending {
        DecayChannel ch;
        std::string spec;
        int line;
    };
    std::vector<Pending> pending;
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& msg) -> ConfigError {
        return ConfigError("atom line " + std::to_string(lineno), msg);
    };
    auto id_of = [&](const std::string& s) {
        auto id = parse_level(s);
        if (!id) throw fail("unknown level '" + s + "'");
        return *id;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (auto p = line.find('#'); p != std::string::npos) line.erase(p);
        std::istringstream ss(line);
        std::string kind;
        if (!(ss >> kind)) continue;
        if (kind == "level") {
            std::string id;
            Level lv{};
            if (!(ss >> id >> lv.two_j >> lv.g_j >> lv.energy_cm)) throw fail("malformed level record");
            lv.id = id_of(id);
            levels.push_back(lv);
        } else if (kind == "decay") {
            std::string up, lo, spec;
            Pending p{};
            if (!(ss >> up >> lo >> p.ch.wavelength_nm >> p.ch.rank >> spec))
                throw fail("malformed decay record");
            p.ch.upper = id_of(up);
            p.ch.lower = id_of(lo);
            p.spec = spec;
            p.line = lineno;
            pending.push_back(p);
        } else {
            throw fail("unknown record '" + kind + "'");
        }
    }

    auto field = [](const std::string& spec, int idx) {
        std::vector<std::string> parts;
        std::stringstream ss(spec);
        std::string item;
        while (std::getline(ss, item, ':')) parts.push_back(item);
        if (idx >= static_cast<int>(parts.size())) return std::string{};
        return parts[idx];
    };
    auto number = [&](const std::string& s, int line) {
        char* end = nullptr;
        const double v = std::strtod(s.c_str(), &end);
        if (s.empty() || *end != '\0') throw ConfigError("atom line " + std::to_string(line), "bad number '" + s + "'");
        return v;
    };

    std::vector<DecayChannel> channels;
    std::vector<Pending> closures;
    for (auto& p : pending) {
        const std::string kind = field(p.spec, 0);
        if (kind == "mhz") {
            p.ch.partial_rate = mhz_to_angular(number(field(p.spec, 1), p.line));
        } else if (kind == "branch") {
            p.ch.partial_rate = number(field(p.spec, 1), p.line) * mhz_to_angular(number(field(p.spec, 2), p.line));
        } else if (kind == "lifetime") {
            const double tau = number(field(p.spec, 1), p.line);
            p.ch.partial_rate = tau > 0 ? 1.0 / tau : 0.0;
        } else if (kind == "rate") {
            p.ch.partial_rate = number(field(p.spec, 1), p.line);
        } else if (kind == "closure") {
            closures.push_back(p);
            continue;
        } else {
            throw ConfigError("atom line " + std::to_string(p.line), "unknown rate spec '" + p.spec + "'");
        }
        channels.push_back(p.ch);
    }
    for (auto& p : closures) {
        const double b = number(field(p.spec, 1), p.line);
        const auto ref = parse_level(field(p.spec, 2));
        if (!ref || !(b > 0 && b <= 1))
            throw ConfigError("atom line " + std::to_string(p.line), "bad closure spec '" + p.spec + "'");
        double ref_rate = 0.0, others = 0.0;
        for (const auto& ch : channels) {
            if (ch.upper != p.ch.upper) continue;
            (ch.lower == *ref ? ref_rate : others) += ch.partial_rate;
        }
        const double remainder = ref_rate / b - ref_rate - others;
        if (remainder < -1e-9 * ref_rate)
            throw ConfigError("atom line " + std::to_string(p.line), "closure gives negative rate");
        p.ch.partial_rate = std::max(0.0, remainder);
        channels.push_back(p.ch);
    }
    return AtomModel(std::move(levels), std::move(channels));
}

inline constexpr std::string_view default_atom_text = R"(# 40Ca+ fine-structure levels and decay channels
# level <id> <2J> <gJ> <energy_cm>
level S12 1 2.00225 0
level D32 3 0.79955 13650.2
level D52 5 1.20033 13710.9
level P12 1 0.66587 25191.5
level P32 3 1.33410 25414.4

# decay <upper> <lower> <wavelength_nm> <rank> <rate-spec>
decay P32 S12 393 1 mhz:21.49
decay P32 D52 854 1 mhz:1.35
decay P32 D32 850 1 closure:0.9347:S12
decay P12 S12 397 1 branch:0.935:22.42
decay P12 D32 866 1 branch:0.065:22.42
decay D52 S12 729 2 lifetime:1.168
decay D32 S12 732 2 rate:0
)";

inline AtomModel default_atom_model() {
    std::istringstream in{std::string(default_atom_text)};
    return parse_atom_model(in);
}

inline AtomModel load_atom_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("atom.file", "cannot open '" + path + "'");
    return parse_atom_model(in);
}

}  // namespace ionlink
