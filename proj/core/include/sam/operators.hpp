#pragma once

#include <array>
#include <vector>

#include "sam/grid.hpp"

namespace sam {

/// Per-voxel symmetric blocks, the Hessian fields fed to the solver.
/// diag layout: ncomp planes of M values. full layout: packed upper
/// triangles, ncomp*(ncomp+1)/2 planes of M values.
struct BlockField {
    int ncomp = 1;
    bool full = false;
    std::vector<double> h;

    static std::size_t packed_size(int b) { return static_cast<std::size_t>(b) * (b + 1) / 2; }
    static std::size_t packed_index(int i, int j, int b) {
        if (i > j) std::swap(i, j);
        return static_cast<std::size_t>(i) * b - static_cast<std::size_t>(i) * (i - 1) / 2 + (j - i);
    }
};

/// Frequency-domain representation of a differential operator on a periodic
/// grid. Spectra come from central finite-difference stencils, so apply()
/// agrees with an explicit sparse-stencil matrix product to rounding.
///
/// Scalar kind (3 weights): w0 |a|^2 + w1 |grad a|^2 + w2 |grad^2 a|^2,
/// one positive eigenvalue per frequency bin.
/// Vector kind (5 weights): adds the linear-elasticity terms
/// (w3/4) |Dv + Dv^T|_F^2 + w4 Tr(Dv)^2, giving a real symmetric DxD
/// matrix per bin: alpha(k) I + gamma q q^T with q_d = sin(2 pi k_d / n_d).
class OperatorKernel {
public:
    enum class Kind { scalar, vector };

    static OperatorKernel make_scalar(const Grid& grid, const std::array<double, 3>& omega);
    static OperatorKernel make_vector(const Grid& grid, const std::array<double, 5>& omega);

    const Grid& grid() const { return grid_; }
    Kind kind() const { return kind_; }
    int field_components() const { return kind_ == Kind::vector ? grid_.nd : 1; }
    bool invertible() const { return omega0_ > 0.0; }
    double omega0() const { return omega0_; }

    /// Smallest / largest eigenvalue over all frequency bins.
    double min_eigenvalue() const;
    double max_eigenvalue() const;

    /// L . field. Scalar kernels accept any number of channels (ncomp);
    /// vector kernels require ncomp == D. Layout: component-major, each
    /// component a contiguous plane of M values.
    std::vector<double> apply(const std::vector<double>& field, int ncomp) const;

    /// Green's function: L^g u with apply(greens(u)) == u. Requires
    /// an invertible kernel (omega0 > 0).
    std::vector<double> greens(const std::vector<double>& field, int ncomp) const;

    /// Spectral inverse of (diag(hbar) + w L), the circulant preconditioner
    /// used by solve_regularised. hbar has one entry per component.
    std::vector<double> precondition(const std::vector<double>& field,
                                     const std::vector<double>& hbar, double w) const;

private:
    OperatorKernel() = default;

    Grid grid_;
    Kind kind_ = Kind::scalar;
    double omega0_ = 0.0;
    double gamma_ = 0.0;           // vector kind: w3/2 + w4
    std::vector<double> alpha_;    // per-bin isotropic eigenvalue
    std::array<std::vector<double>, 3> sintab_; // sin(2 pi i / n_d) per axis

    template <typename Fn> void for_each_bin(Fn&& fn) const;
    friend struct KernelTestAccess;
};

struct SolveOptions {
    double tol = 1e-6;   // relative residual
    int max_iter = 200;
};

/// Solve (H + w L) x = rhs by preconditioned conjugate gradient with the
/// circulant preconditioner (hbar + w L)^-1, hbar = mean diagonal of H.
/// Throws SolveError (carrying the achieved residual) on non-convergence.
std::vector<double> solve_regularised(const BlockField& H, const OperatorKernel& L, double w,
                                      const std::vector<double>& rhs, const SolveOptions& opt = {});

} // namespace sam
