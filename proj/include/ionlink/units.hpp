#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ionlink {

inline constexpr double two_pi = 2.0 * std::numbers::pi;

// Bohr magneton over hbar, in rad/s per tesla.
inline constexpr double bohr_magneton_angular = 9.2740100783e-24 / 1.054571817e-34;

inline constexpr double gauss = 1e-4;  // tesla
inline constexpr double microsecond = 1e-6;
inline constexpr double nanosecond = 1e-9;

constexpr double mhz_to_angular(double mhz) { return two_pi * mhz * 1e6; }
constexpr double angular_to_mhz(double w) { return w / two_pi * 1e-6; }

// File timestamps are integer nanoseconds; physics uses SI seconds.
inline std::int64_t to_ns(double seconds) { return std::llround(seconds * 1e9); }
constexpr double from_ns(std::int64_t ns) { return static_cast<double>(ns) * 1e-9; }

}  // namespace ionlink
