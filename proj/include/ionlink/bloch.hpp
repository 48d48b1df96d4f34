#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <boost/numeric/odeint.hpp>

#include "atom.hpp"
#include "density_matrix.hpp"
#include "errors.hpp"
#include "units.hpp"

namespace ionlink {

/// Spherical polarization amplitudes (a-, a0, a+), normalised.
struct Polarization {
    cplx minus{0.0}, pi{1.0}, plus{0.0};

    static Polarization sigma_minus() { return {1.0, 0.0, 0.0}; }
    static Polarization linear_pi() { return {0.0, 1.0, 0.0}; }
    static Polarization sigma_plus() { return {0.0, 0.0, 1.0}; }

    // Real relative weights (not squared), normalised to unit norm.
    static Polarization from_amplitudes(double m, double p, double pl) {
        const double n = std::sqrt(m * m + p * p + pl * pl);
        if (!(n > 0)) throw DomainError("polarization amplitudes must not all vanish");
        return {m / n, p / n, pl / n};
    }

    cplx component(int q) const { return q < 0 ? minus : (q == 0 ? pi : plus); }
    double norm2() const { return std::norm(minus) + std::norm(pi) + std::norm(plus); }
};

struct ActiveWindow {
    double start = -std::numeric_limits<double>::infinity();
    double end = std::numeric_limits<double>::infinity();

    static ActiveWindow always() { return {}; }
    static ActiveWindow from(double t) { return {t, std::numeric_limits<double>::infinity()}; }
    bool contains(double t) const { return t >= start && t < end; }
};

struct LaserField {
    LevelId lower;
    LevelId upper;
    double detuning = 0.0;  // rad/s, laser minus Zeeman-free line centre
    double rabi = 0.0;      // rad/s, on the reduced dipole
    Polarization polarization;
    ActiveWindow window;
};

struct Tolerances {
    double absolute = 1e-10;
    double relative = 1e-8;
    bool check_invariants = true;
};

struct BlochConfig {
    AtomModel atom = default_atom_model();
    MagneticField field = MagneticField::from_gauss(3.0);
    std::vector<LaserField> lasers;
    std::vector<LevelId> levels{all_levels.begin(), all_levels.end()};
    Tolerances tolerances;
};

// Wavelength label of the dipole channel a laser drives, or 0 if none.
inline int laser_wavelength(const AtomModel& atom, const LaserField& l) {
    for (const auto& ch : atom.channels())
        if (ch.rank == 1 && ch.upper == l.upper && ch.lower == l.lower) return ch.wavelength_nm;
    return 0;
}

inline const LaserField* find_laser(const BlochConfig& cfg, int wavelength_nm) {
    for (const auto& l : cfg.lasers)
        if (laser_wavelength(cfg.atom, l) == wavelength_nm) return &l;
    return nullptr;
}

inline LaserField* find_laser(BlochConfig& cfg, int wavelength_nm) {
    for (auto& l : cfg.lasers)
        if (laser_wavelength(cfg.atom, l) == wavelength_nm) return &l;
    return nullptr;
}

inline BlochConfig without_laser(BlochConfig cfg, int wavelength_nm) {
    std::erase_if(cfg.lasers, [&](const LaserField& l) { return laser_wavelength(cfg.atom, l) == wavelength_nm; });
    return cfg;
}

// Same lasers, all switched on permanently.
inline BlochConfig continuous(BlochConfig cfg) {
    for (auto& l : cfg.lasers) l.window = ActiveWindow::always();
    return cfg;
}

struct IntegratorStats {
    std::size_t steps = 0;
    double min_step = std::numeric_limits<double>::infinity();
    double max_step = 0.0;
};

/// Lindblad generator in the rotating frame (RWA) for a fixed set of lasers:
///   drho/dt = -i[H, rho] + sum_k C_k rho C_k^+ - 1/2 {C_k^+ C_k, rho}
/// acting on vec(rho) in column-major order.
class BlochGenerator {
public:
    using SparseC = Eigen::SparseMatrix<cplx>;
    using SparseR = Eigen::SparseMatrix<double, Eigen::RowMajor>;

    explicit BlochGenerator(const BlochConfig& cfg) : cfg_(cfg) {
        validate();
        for (LevelId id : cfg_.levels)
            for (const auto& s : cfg_.atom.sublevels(id)) basis_.push_back(s);
        compute_frame();
        build_collapse_ops();
    }

    const BlochConfig& config() const { return cfg_; }
    const std::vector<ZeemanState>& basis() const { return basis_; }
    Eigen::Index dim() const { return static_cast<Eigen::Index>(basis_.size()); }

    double frame_energy(LevelId id) const { return frame_.at(id); }

    // Sorted finite window edges; the generator is constant between them.
    std::vector<double> switch_times() const {
        std::vector<double> t;
        for (const auto& l : cfg_.lasers) {
            if (std::isfinite(l.window.start)) t.push_back(l.window.start);
            if (std::isfinite(l.window.end)) t.push_back(l.window.end);
        }
        std::sort(t.begin(), t.end());
        t.erase(std::unique(t.begin(), t.end()), t.end());
        return t;
    }

    Eigen::MatrixXcd hamiltonian(double t) const {
        const Eigen::Index n = dim();
        Eigen::MatrixXcd h = Eigen::MatrixXcd::Zero(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
            h(i, i) = frame_.at(basis_[i].level) + cfg_.atom.zeeman_shift(basis_[i], cfg_.field);
        for (const auto& laser : cfg_.lasers) {
            if (!laser.window.contains(t) || laser.rabi == 0.0) continue;
            for (Eigen::Index u = 0; u < n; ++u) {
                if (basis_[u].level != laser.upper) continue;
                for (Eigen::Index l = 0; l < n; ++l) {
                    if (basis_[l].level != laser.lower) continue;
                    const int dq = basis_[u].two_m - basis_[l].two_m;
                    if (dq % 2 != 0 || std::abs(dq) > 2) continue;
                    const int q = dq / 2;
                    const cplx a = laser.polarization.component(q);
                    if (a == 0.0) continue;
                    const double c = cfg_.atom.coupling_amplitude(basis_[l], basis_[u], q);
                    h(u, l) += 0.5 * laser.rabi * a * c;
                    h(l, u) += std::conj(0.5 * laser.rabi * a * c);
                }
            }
        }
        return h;
    }

    SparseC liouvillian(double t) const {
        const Eigen::Index n = dim();
        const Eigen::MatrixXcd h = hamiltonian(t);
        const cplx I(0.0, 1.0);
        std::vector<Eigen::Triplet<cplx>> trip;
        auto idx = [n](Eigen::Index i, Eigen::Index j) { return i + n * j; };

        // -i H rho + i rho H, with the anticommutator part of the dissipator folded in as
        // an effective non-Hermitian Hamiltonian H - i K / 2.
        Eigen::MatrixXcd heff = h;
        for (const auto& [k, decay] : anticommutator_) heff(k, k) -= 0.5 * I * decay;
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index k = 0; k < n; ++k) {
                if (heff(i, k) == 0.0) continue;
                for (Eigen::Index j = 0; j < n; ++j) trip.emplace_back(idx(i, j), idx(k, j), -I * heff(i, k));
            }
        for (Eigen::Index l = 0; l < n; ++l)
            for (Eigen::Index j = 0; j < n; ++j) {
                const cplx hd = std::conj(heff(j, l));  // (rho Heff^+)_ij = sum_l rho_il conj(Heff_jl)
                if (hd == 0.0) continue;
                for (Eigen::Index i = 0; i < n; ++i) trip.emplace_back(idx(i, j), idx(i, l), I * hd);
            }
        // C rho C^+
        for (const auto& op : collapse_)
            for (const auto& a : op)
                for (const auto& b : op)
                    trip.emplace_back(idx(a.row, b.row), idx(a.col, b.col), a.value * std::conj(b.value));

        SparseC L(n * n, n * n);
        L.setFromTriplets(trip.begin(), trip.end());
        L.prune(cplx(0.0));
        return L;
    }

    // [[Re L, -Im L], [Im L, Re L]] acting on [Re vec rho; Im vec rho].
    SparseR real_liouvillian(double t) const {
        const SparseC L = liouvillian(t);
        const Eigen::Index N = L.rows();
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(static_cast<std::size_t>(L.nonZeros()) * 4);
        for (int k = 0; k < L.outerSize(); ++k)
            for (SparseC::InnerIterator it(L, k); it; ++it) {
                const double re = it.value().real(), im = it.value().imag();
                const auto r = it.row(), c = it.col();
                if (re != 0.0) {
                    trip.emplace_back(r, c, re);
                    trip.emplace_back(r + N, c + N, re);
                }
                if (im != 0.0) {
                    trip.emplace_back(r, c + N, -im);
                    trip.emplace_back(r + N, c, im);
                }
            }
        SparseR R(2 * N, 2 * N);
        R.setFromTriplets(trip.begin(), trip.end());
        return R;
    }

    // Generator on the n^2 real coordinates of a Hermitian matrix (see detail::pack), so that
    // integration cannot drift off the Hermitian subspace.
    SparseR hermitian_liouvillian(double t) const {
        const Eigen::Index n = dim(), N = n * n;
        std::vector<Eigen::Triplet<double>> e, p;
        Eigen::Index k = 0;
        for (Eigen::Index j = 0; j < n; ++j)
            for (Eigen::Index i = 0; i <= j; ++i) {
                const Eigen::Index ij = i + n * j, ji = j + n * i;
                if (i == j) {
                    e.emplace_back(ij, k, 1.0);
                    p.emplace_back(k, ij, 1.0);
                    ++k;
                    continue;
                }
                e.emplace_back(ij, k, 1.0);
                e.emplace_back(ji, k, 1.0);
                p.emplace_back(k, ij, 1.0);
                ++k;
                e.emplace_back(ij + N, k, 1.0);
                e.emplace_back(ji + N, k, -1.0);
                p.emplace_back(k, ij + N, 1.0);
                ++k;
            }
        SparseR E(2 * N, N), P(N, 2 * N);
        E.setFromTriplets(e.begin(), e.end());
        P.setFromTriplets(p.begin(), p.end());
        SparseR H = P * (real_liouvillian(t) * E);
        H.prune(0.0);
        return H;
    }

    Eigen::MatrixXcd apply(double t, const Eigen::MatrixXcd& rho) const {
        const Eigen::Index n = dim();
        Eigen::VectorXcd v = Eigen::Map<const Eigen::VectorXcd>(rho.data(), n * n);
        Eigen::VectorXcd out = liouvillian(t) * v;
        return Eigen::Map<Eigen::MatrixXcd>(out.data(), n, n);
    }

private:
    struct Entry {
        Eigen::Index row, col;
        double value;
    };

    void validate() const {
        for (LevelId id : cfg_.levels)
            if (!cfg_.atom.has_level(id)) throw DomainError("included level missing from atom model");
        auto included = [&](LevelId id) {
            return std::find(cfg_.levels.begin(), cfg_.levels.end(), id) != cfg_.levels.end();
        };
        for (const auto& l : cfg_.lasers) {
            if (!cfg_.atom.dipole_connected(l.lower, l.upper))
                throw DomainError(std::string("laser addresses non-dipole pair ") +
                                  std::string(level_label(l.lower)) + "-" + std::string(level_label(l.upper)));
            if (!included(l.lower) || !included(l.upper)) throw DomainError("laser addresses an excluded level");
            if (!(l.rabi >= 0)) throw DomainError("rabi frequency must be >= 0");
            if (std::abs(l.polarization.norm2() - 1.0) > 1e-12) throw DomainError("polarization not normalized");
        }
        for (const auto& ch : cfg_.atom.channels())
            if (included(ch.upper) && !included(ch.lower) && ch.partial_rate > 0)
                throw DomainError("decay channel leaves the included levels");
    }

    // Rotating-frame level energies; lasers must form a forest over the levels.
    void compute_frame() {
        for (LevelId id : cfg_.levels) frame_[id] = 0.0;
        std::map<LevelId, bool> seen;
        for (LevelId root : cfg_.levels) {
            if (seen[root]) continue;
            seen[root] = true;
            std::queue<LevelId> todo;
            todo.push(root);
            while (!todo.empty()) {
                const LevelId cur = todo.front();
                todo.pop();
                for (const auto& l : cfg_.lasers) {
                    LevelId next;
                    double e;
                    if (l.lower == cur) {
                        next = l.upper;
                        e = frame_[cur] - l.detuning;
                    } else if (l.upper == cur) {
                        next = l.lower;
                        e = frame_[cur] + l.detuning;
                    } else {
                        continue;
                    }
                    if (seen[next]) {
                        if (std::abs(frame_[next] - e) > 1e-9 * (1.0 + std::abs(e)))
                            throw DomainError("lasers form a closed loop with inconsistent detunings");
                        continue;
                    }
                    seen[next] = true;
                    frame_[next] = e;
                    todo.push(next);
                }
            }
        }
    }

    void build_collapse_ops() {
        const Eigen::Index n = dim();
        for (const auto& ch : cfg_.atom.channels()) {
            if (ch.partial_rate <= 0) continue;
            if (std::find(cfg_.levels.begin(), cfg_.levels.end(), ch.upper) == cfg_.levels.end()) continue;
            const double amp = std::sqrt(ch.partial_rate);
            for (int q = -ch.rank; q <= ch.rank; ++q) {
                std::vector<Entry> op;
                for (Eigen::Index u = 0; u < n; ++u) {
                    if (basis_[u].level != ch.upper) continue;
                    for (Eigen::Index l = 0; l < n; ++l) {
                        if (basis_[l].level != ch.lower) continue;
                        const double c = cfg_.atom.transition_amplitude(basis_[l], basis_[u], q, ch.rank);
                        if (c != 0.0) op.push_back({l, u, amp * c});
                    }
                }
                if (op.empty()) continue;
                for (const auto& e : op) anticommutator_[e.col] += e.value * e.value;
                collapse_.push_back(std::move(op));
            }
        }
    }

    BlochConfig cfg_;
    std::vector<ZeemanState> basis_;
    std::map<LevelId, double> frame_;
    std::vector<std::vector<Entry>> collapse_;
    // Diagonal of sum_k C_k^+ C_k; diagonal because each C_k maps distinct upper sublevels
    // to distinct lower sublevels within one polarization component.
    std::map<Eigen::Index, double> anticommutator_;
};

namespace detail {

struct LinearOde {
    const BlochGenerator::SparseR* L;
    void operator()(const std::vector<double>& x, std::vector<double>& dxdt, double) const {
        const auto n = static_cast<Eigen::Index>(x.size());
        Eigen::Map<const Eigen::VectorXd> xv(x.data(), n);
        Eigen::Map<Eigen::VectorXd> dv(dxdt.data(), n);
        dv.noalias() = (*L) * xv;
    }
};

// Hermitian matrix <-> real coordinates: column by column over the upper triangle,
// rho_jj for diagonal entries and (Re, Im) of rho_ij for i < j.
inline std::vector<double> pack(const Eigen::MatrixXcd& rho) {
    const Eigen::Index n = rho.rows();
    std::vector<double> x;
    x.reserve(static_cast<std::size_t>(n * n));
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i <= j; ++i) {
            x.push_back(rho(i, j).real());
            if (i != j) x.push_back(rho(i, j).imag());
        }
    return x;
}

inline Eigen::MatrixXcd unpack(const std::vector<double>& x, Eigen::Index n) {
    Eigen::MatrixXcd rho(n, n);
    std::size_t k = 0;
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i <= j; ++i) {
            if (i == j) {
                rho(i, i) = x[k++];
                continue;
            }
            rho(i, j) = cplx(x[k], x[k + 1]);
            rho(j, i) = cplx(x[k], -x[k + 1]);
            k += 2;
        }
    return rho;
}

}  // namespace detail

/// Integrates from rho0 at time t_start over `duration`, returning the state at each
/// requested time (absolute times, within [t_start, t_start + duration]).
inline std::vector<DensityMatrix> evolve(const BlochGenerator& gen, const DensityMatrix& rho0, double duration,
                                         const std::vector<double>& output_times, double t_start = 0.0,
                                         IntegratorStats* stats = nullptr) {
    namespace odeint = boost::numeric::odeint;
    if (!(duration > 0)) throw DomainError("duration must be > 0");
    if (rho0.basis != gen.basis()) throw DomainError("initial state basis does not match generator");
    rho0.validate();
    const double t_end = t_start + duration;
    for (std::size_t i = 0; i < output_times.size(); ++i) {
        if (output_times[i] < t_start - 1e-15 || output_times[i] > t_end + 1e-15)
            throw DomainError("output time outside the evolution interval");
        if (i > 0 && output_times[i] < output_times[i - 1]) throw DomainError("output times must be sorted");
    }

    const Tolerances& tol = gen.config().tolerances;
    std::vector<double> cuts{t_start};
    for (double s : gen.switch_times())
        if (s > t_start && s < t_end) cuts.push_back(s);
    cuts.push_back(t_end);

    IntegratorStats local;
    std::vector<DensityMatrix> out;
    out.reserve(output_times.size());
    std::vector<double> x = detail::pack(rho0.rho);
    std::vector<double> xo(x.size());
    std::size_t next = 0;
    const Eigen::Index n = gen.dim();

    auto emit = [&](const std::vector<double>& state, double t) {
        DensityMatrix d{gen.basis(), detail::unpack(state, n)};
        if (tol.check_invariants) {
            try {
                d.validate();
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " at t=" + std::to_string(t) +
                                   " s; tighten integrator tolerances (abs=" + std::to_string(tol.absolute) +
                                   ", rel=" + std::to_string(tol.relative) + ")");
            }
        }
        out.push_back(std::move(d));
    };

    for (std::size_t seg = 0; seg + 1 < cuts.size(); ++seg) {
        const double a = cuts[seg], b = cuts[seg + 1];
        const auto L = gen.hermitian_liouvillian(0.5 * (a + b));
        detail::LinearOde sys{&L};
        while (next < output_times.size() && output_times[next] <= a) emit(x, output_times[next++]);

        double scale = 1.0;
        for (int k = 0; k < L.outerSize(); ++k)
            for (BlochGenerator::SparseR::InnerIterator it(L, k); it; ++it) scale = std::max(scale, std::abs(it.value()));
        auto stepper = odeint::make_dense_output(tol.absolute, tol.relative, odeint::runge_kutta_dopri5<std::vector<double>>());
        stepper.initialize(x, a, std::min(0.1 / scale, b - a));
        try {
            while (stepper.current_time() < b) {
                const auto [t0, t1] = stepper.do_step(sys);
                const double h = t1 - t0;
                ++local.steps;
                local.min_step = std::min(local.min_step, h);
                local.max_step = std::max(local.max_step, h);
                if (!(h > 0) || !std::isfinite(stepper.current_state()[0]))
                    throw NumericError("integrator produced a non-finite state at t=" + std::to_string(t1));
                while (next < output_times.size() && output_times[next] <= std::min(t1, b) && output_times[next] > a) {
                    stepper.calc_state(output_times[next], xo);
                    emit(xo, output_times[next++]);
                }
            }
        } catch (const NumericError&) {
            throw;
        } catch (const std::exception& e) {
            throw NumericError(std::string("integrator failed in [") + std::to_string(a) + ", " + std::to_string(b) +
                               "] s: " + e.what());
        }
        stepper.calc_state(b, x);
    }
    while (next < output_times.size()) emit(x, output_times[next++]);
    if (stats) *stats = local;
    return out;
}

inline std::vector<DensityMatrix> evolve(const BlochConfig& cfg, const DensityMatrix& rho0, double duration,
                                         const std::vector<double>& output_times, IntegratorStats* stats = nullptr) {
    return evolve(BlochGenerator(cfg), rho0, duration, output_times, 0.0, stats);
}

/// Stationary state of the generator active at time t.
inline DensityMatrix steady_state(const BlochGenerator& gen, double t = 0.0) {
    const Eigen::Index n = gen.dim();
    Eigen::MatrixXcd L = Eigen::MatrixXcd(gen.liouvillian(t));
    Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(n * n);
    // The populations' equations are linearly dependent (trace preservation); replace the
    // first by the normalisation condition.
    L.row(0).setZero();
    for (Eigen::Index i = 0; i < n; ++i) L(0, i + n * i) = 1.0;
    rhs(0) = 1.0;
    Eigen::VectorXcd v = L.partialPivLu().solve(rhs);
    if (!v.allFinite()) throw NumericError("steady state solve failed");
    Eigen::MatrixXcd rho = Eigen::Map<Eigen::MatrixXcd>(v.data(), n, n);
    rho = 0.5 * (rho + rho.adjoint()).eval();
    return DensityMatrix{gen.basis(), rho};
}

inline DensityMatrix steady_state(const BlochConfig& cfg, double t = 0.0) {
    return steady_state(BlochGenerator(cfg), t);
}

/// Photon scattering rate per decay channel wavelength (photons/s).
inline std::map<int, double> scattering_rates(const BlochConfig& cfg, const DensityMatrix& rho) {
    std::map<int, double> rates;
    for (const auto& ch : cfg.atom.channels()) {
        double pop = 0.0;
        if (std::find(cfg.levels.begin(), cfg.levels.end(), ch.upper) != cfg.levels.end()) pop = rho.population(ch.upper);
        rates[ch.wavelength_nm] += ch.partial_rate * pop;
    }
    return rates;
}

/// Steady-state R393/R397 with all configured lasers on continuously.
inline double scattering_ratio(const BlochConfig& cfg, int numerator_nm = 393, int denominator_nm = 397) {
    const BlochConfig cw = continuous(cfg);
    const auto rates = scattering_rates(cw, steady_state(cw));
    const double den = rates.count(denominator_nm) ? rates.at(denominator_nm) : 0.0;
    if (den <= 0) throw NumericError("no scattering on the reference transition");
    return rates.at(numerator_nm) / den;
}

// ---------------------------------------------------------------------------
// Wave packets

struct WavepacketOptions {
    double window = 40e-6;  // s after the pump laser switches on
    int points = 4001;
};

struct Wavepacket {
    std::vector<double> time;     // s
    std::vector<double> density;  // photons per second (emission rate into the 854 channel)
    double t1 = 0.0;              // s; +inf when nothing is emitted, NaN if not fitted
    double pumping_probability = 0.0;
};

/// 1/e time of the exponential tail after the peak, by a least-squares fit
/// of log(y) weighted by y^2 over points above 1e-3 of the peak.
inline double fit_exponential_tail(const std::vector<double>& t, const std::vector<double>& y) {
    if (t.size() != y.size() || t.size() < 3) throw DomainError("tail fit needs at least 3 samples");
    const auto peak_it = std::max_element(y.begin(), y.end());
    const double peak = *peak_it;
    if (!(peak > 0)) return std::numeric_limits<double>::infinity();
    double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::size_t used = 0;
    for (auto i = static_cast<std::size_t>(peak_it - y.begin()); i < y.size(); ++i) {
        if (y[i] < 1e-3 * peak) break;
        const double w = y[i] * y[i];
        const double ly = std::log(y[i]);
        sw += w;
        sx += w * t[i];
        sy += w * ly;
        sxx += w * t[i] * t[i];
        sxy += w * t[i] * ly;
        ++used;
    }
    if (used < 3) throw NumericError("exponential tail has fewer than 3 usable samples");
    const double slope = (sw * sxy - sx * sy) / (sw * sxx - sx * sx);
    if (!(slope < 0)) throw NumericError("wave packet tail is not decaying");
    return -1.0 / slope;
}

inline double trapezoid(const std::vector<double>& t, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 1; i < t.size(); ++i) s += 0.5 * (y[i] + y[i - 1]) * (t[i] - t[i - 1]);
    return s;
}

/// Arrival-time density of the 854 nm photon after the 850 nm laser switches on at t = 0.
/// The ion starts in the steady state of the lasers active just before t = 0.
/// t1 is left unset (NaN); see wavepacket().
inline Wavepacket arrival_density(const BlochConfig& cfg, const WavepacketOptions& opt = {}) {
    if (!find_laser(cfg, 850)) throw DomainError("no emission path: 850 nm laser absent");
    const DecayChannel* emit = cfg.atom.channel_by_wavelength(854);
    if (!emit) throw DomainError("no emission path: atom has no 854 nm channel");
    if (opt.points < 3 || !(opt.window > 0)) throw DomainError("bad wave packet grid");

    const BlochGenerator gen(cfg);
    const DensityMatrix rho0 = steady_state(gen, std::nextafter(0.0, -1.0));

    Wavepacket wp;
    wp.time.resize(static_cast<std::size_t>(opt.points));
    for (int i = 0; i < opt.points; ++i) wp.time[i] = opt.window * i / (opt.points - 1);
    const auto states = evolve(gen, rho0, opt.window, wp.time, 0.0);
    wp.density.resize(wp.time.size());
    for (std::size_t i = 0; i < states.size(); ++i)
        wp.density[i] = std::max(0.0, emit->partial_rate * states[i].population(emit->upper));
    wp.pumping_probability = trapezoid(wp.time, wp.density);
    wp.t1 = std::numeric_limits<double>::quiet_NaN();
    return wp;
}

/// arrival_density() plus the tail fit. Throws NumericError if the window ends before the tail decays.
inline Wavepacket wavepacket(const BlochConfig& cfg, const WavepacketOptions& opt = {}) {
    Wavepacket wp = arrival_density(cfg, opt);
    const double peak = *std::max_element(wp.density.begin(), wp.density.end());
    wp.t1 = peak > 1e-300 ? fit_exponential_tail(wp.time, wp.density) : std::numeric_limits<double>::infinity();
    return wp;
}

inline BlochConfig with_power(BlochConfig cfg, int wavelength_nm, double relative_power) {
    LaserField* l = find_laser(cfg, wavelength_nm);
    if (!l) throw DomainError("laser " + std::to_string(wavelength_nm) + " nm absent");
    l->rabi *= std::sqrt(relative_power);
    return cfg;
}

struct T1Point {
    double power_rel;
    double inverse_t1;  // 1/s
    double t1;          // s
};

/// 1/T1 versus 850 nm power, relative to the configured Rabi frequency (power ~ Rabi^2).
inline std::vector<T1Point> t1_vs_power(const BlochConfig& cfg, const std::vector<double>& powers,
                                        const WavepacketOptions& opt = {}) {
    std::vector<T1Point> out;
    for (std::size_t i = 0; i < powers.size(); ++i) {
        if (!(powers[i] > 0)) throw DomainError("powers must be > 0");
        if (i > 0 && powers[i] <= powers[i - 1]) throw DomainError("powers must be increasing");
        const auto wp = wavepacket(with_power(cfg, 850, powers[i]), opt);
        out.push_back({powers[i], 1.0 / wp.t1, wp.t1});
    }
    return out;
}

/// Relative 850 nm power giving the target T1, by bisection in log(power) over [lo, hi].
inline double power_for_t1(const BlochConfig& cfg, double target_t1, double lo, double hi,
                           const WavepacketOptions& opt = {}, int iterations = 40) {
    auto t1_at = [&](double p) { return wavepacket(with_power(cfg, 850, p), opt).t1; };
    double tlo = t1_at(lo), thi = t1_at(hi);
    if (!(tlo >= target_t1 && thi <= target_t1))
        throw NumericError("target T1 not bracketed by the power range");
    for (int i = 0; i < iterations; ++i) {
        const double mid = std::sqrt(lo * hi);
        const double tm = t1_at(mid);
        if (tm > target_t1) lo = mid; else hi = mid;
        if (hi / lo < 1 + 1e-6) break;
    }
    return std::sqrt(lo * hi);
}

// ---------------------------------------------------------------------------
// Reduced five-level rate-equation model

/// Population rate matrix M (dp/dt = M p) over atom levels in `all_levels` order, with
/// each laser replaced by weak-field Lorentzian transfer rates averaged over sublevels.
inline Eigen::Matrix<double, 5, 5> rate_matrix(const BlochConfig& cfg, double t) {
    Eigen::Matrix<double, 5, 5> M = Eigen::Matrix<double, 5, 5>::Zero();
    auto ix = [](LevelId id) { return static_cast<int>(id); };
    const AtomModel& atom = cfg.atom;
    for (const auto& ch : atom.channels()) {
        M(ix(ch.lower), ix(ch.upper)) += ch.partial_rate;
        M(ix(ch.upper), ix(ch.upper)) -= ch.partial_rate;
    }
    for (const auto& laser : cfg.lasers) {
        if (!laser.window.contains(t) || laser.rabi == 0.0) continue;
        const double gamma = 0.5 * (atom.total_decay_rate(laser.upper) + atom.total_decay_rate(laser.lower));
        double sum = 0.0;
        for (const auto& lo : atom.sublevels(laser.lower))
            for (const auto& up : atom.sublevels(laser.upper)) {
                const int dq = up.two_m - lo.two_m;
                if (std::abs(dq) > 2) continue;
                const int q = dq / 2;
                const double c = atom.coupling_amplitude(lo, up, q);
                const double om = laser.rabi * std::abs(laser.polarization.component(q)) * c;
                const double det = laser.detuning - (atom.zeeman_shift(up, cfg.field) - atom.zeeman_shift(lo, cfg.field));
                sum += 0.5 * om * om * gamma / (det * det + gamma * gamma);
            }
        const double up_rate = sum / atom.level(laser.lower).multiplicity();
        const double down_rate = sum / atom.level(laser.upper).multiplicity();
        const int l = ix(laser.lower), u = ix(laser.upper);
        M(u, l) += up_rate;
        M(l, l) -= up_rate;
        M(l, u) += down_rate;
        M(u, u) -= down_rate;
    }
    return M;
}

/// Slowest population loss rate into D5/2 once the pump lasers are on (D5/2 treated as a sink).
inline double rate_equation_pumping_rate(const BlochConfig& cfg) {
    const auto M = rate_matrix(cfg, 0.0);
    const int sink = static_cast<int>(LevelId::D52);
    Eigen::Matrix4d B;
    for (int r = 0, rr = 0; r < 5; ++r) {
        if (r == sink) continue;
        for (int c = 0, cc = 0; c < 5; ++c) {
            if (c == sink) continue;
            B(rr, cc++) = M(r, c);
        }
        ++rr;
    }
    Eigen::EigenSolver<Eigen::Matrix4d> es(B);
    double slowest = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < 4; ++i) slowest = std::max(slowest, es.eigenvalues()[i].real());
    return -slowest;
}

inline Eigen::Matrix<double, 5, 1> rate_equation_steady_state(const BlochConfig& cfg, double t = 0.0) {
    Eigen::Matrix<double, 5, 5> M = rate_matrix(cfg, t);
    Eigen::Matrix<double, 5, 1> rhs = Eigen::Matrix<double, 5, 1>::Zero();
    M.row(0).setOnes();
    rhs(0) = 1.0;
    return M.fullPivLu().solve(rhs);
}

// ---------------------------------------------------------------------------
// Three-photon calibration

struct ThreePhotonScan {
    std::vector<double> rabi397, rabi866, rabi850, rabi854;  // rad/s
    std::vector<double> detuning397, detuning866;            // rad/s
};

struct CalibrationResult {
    BlochConfig config;
    double ratio = 0.0;               // R393/R397 with all lasers
    double ratio_without_866 = 0.0;   // consecutive pumping
};

/// Grid search maximising steady-state R393/R397 with the 850 nm detuning fixed by
/// the three-photon resonance (d397 - d866 + d850 = 0). The base config must contain
/// the four lasers; their polarizations are kept.
inline CalibrationResult calibrate_three_photon(const BlochConfig& base, const ThreePhotonScan& scan) {
    for (int nm : {397, 866, 850, 854})
        if (!find_laser(base, nm)) throw DomainError("calibration needs the " + std::to_string(nm) + " nm laser");
    CalibrationResult best;
    best.ratio = -1.0;
    BlochConfig cfg = continuous(base);
    cfg.tolerances.check_invariants = false;
    for (double d397 : scan.detuning397)
        for (double d866 : scan.detuning866)
            for (double r397 : scan.rabi397)
                for (double r866 : scan.rabi866)
                    for (double r850 : scan.rabi850)
                        for (double r854 : scan.rabi854) {
                            find_laser(cfg, 397)->detuning = d397;
                            find_laser(cfg, 397)->rabi = r397;
                            find_laser(cfg, 866)->detuning = d866;
                            find_laser(cfg, 866)->rabi = r866;
                            find_laser(cfg, 850)->detuning = d866 - d397;
                            find_laser(cfg, 850)->rabi = r850;
                            find_laser(cfg, 854)->rabi = r854;
                            double ratio;
                            try {
                                ratio = scattering_ratio(cfg);
                            } catch (const NumericError&) {
                                continue;
                            }
                            if (ratio > best.ratio) {
                                best.ratio = ratio;
                                best.config = cfg;
                            }
                        }
    if (best.ratio < 0) throw NumericError("calibration scan found no valid configuration");
    best.config.tolerances = base.tolerances;
    // Restore the base windows on the winning parameters.
    for (std::size_t i = 0; i < best.config.lasers.size(); ++i) best.config.lasers[i].window = base.lasers[i].window;
    best.ratio_without_866 = scattering_ratio(without_laser(best.config, 866));
    return best;
}

}  // namespace ionlink
