#pragma once

#include <complex>
#include <vector>

#include <Eigen/Dense>

#include "atom.hpp"
#include "errors.hpp"

namespace ionlink {

using cplx = std::complex<double>;

/// Density matrix over an ordered list of Zeeman sublevels.
struct DensityMatrix {
    std::vector<ZeemanState> basis;
    Eigen::MatrixXcd rho;

    static DensityMatrix pure(std::vector<ZeemanState> basis, const ZeemanState& s) {
        DensityMatrix d{std::move(basis), {}};
        const auto n = static_cast<Eigen::Index>(d.basis.size());
        d.rho = Eigen::MatrixXcd::Zero(n, n);
        d.rho(d.index_of(s), d.index_of(s)) = 1.0;
        return d;
    }

    // Equal mixture of all sublevels of one level.
    static DensityMatrix uniform(std::vector<ZeemanState> basis, LevelId level) {
        DensityMatrix d{std::move(basis), {}};
        const auto n = static_cast<Eigen::Index>(d.basis.size());
        d.rho = Eigen::MatrixXcd::Zero(n, n);
        int count = 0;
        for (const auto& s : d.basis) count += (s.level == level);
        if (count == 0) throw DomainError("level not in basis");
        for (Eigen::Index i = 0; i < n; ++i)
            if (d.basis[i].level == level) d.rho(i, i) = 1.0 / count;
        return d;
    }

    Eigen::Index index_of(const ZeemanState& s) const {
        for (std::size_t i = 0; i < basis.size(); ++i)
            if (basis[i] == s) return static_cast<Eigen::Index>(i);
        throw DomainError("state not in basis");
    }

    double population(LevelId level) const {
        double p = 0.0;
        for (std::size_t i = 0; i < basis.size(); ++i)
            if (basis[i].level == level) p += rho(i, i).real();
        return p;
    }

    double trace() const { return rho.trace().real(); }

    double hermiticity_error() const { return (rho - rho.adjoint()).cwiseAbs().maxCoeff(); }

    double min_eigenvalue() const {
        const Eigen::MatrixXcd h = 0.5 * (rho + rho.adjoint());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(h, Eigen::EigenvaluesOnly);
        return es.eigenvalues().minCoeff();
    }

    // Throws unless Hermitian, unit trace and positive semidefinite to the given tolerances.
    void validate(double herm_tol = 1e-10, double trace_tol = 1e-9, double pos_tol = 1e-8) const {
        if (hermiticity_error() > herm_tol) throw NumericError("density matrix is not Hermitian");
        if (std::abs(trace() - 1.0) > trace_tol) throw NumericError("density matrix trace deviates from 1");
        if (min_eigenvalue() < -pos_tol) throw NumericError("density matrix has a negative eigenvalue");
    }
};

}  // namespace ionlink
