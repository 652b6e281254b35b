#include "sam/operators.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <string>

#include "sam/error.hpp"
#include "sam/fft.hpp"

namespace sam {

namespace {

// sum of sin^2 over axes; the symbol of the composed central-difference
// Laplacian-like stencil B = sum_d Dd^T Dd
inline double s_of(const std::array<double, 3>& q) {
    return q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
}

void check_nonnegative(const double* w, int n, const char* what) {
    for (int i = 0; i < n; ++i)
        if (w[i] < 0.0)
            throw Error(std::string(what) + ": weights must be non-negative, got omega[" +
                        std::to_string(i) + "] = " + std::to_string(w[i]));
}

} // namespace

template <typename Fn>
void OperatorKernel::for_each_bin(Fn&& fn) const {
    std::int64_t m = 0;
    std::array<double, 3> q{0.0, 0.0, 0.0};
    for (int i0 = 0; i0 < grid_.n[0]; ++i0) {
        q[0] = sintab_[0][i0];
        for (int i1 = 0; i1 < grid_.n[1]; ++i1) {
            q[1] = sintab_[1][i1];
            for (int i2 = 0; i2 < grid_.n[2]; ++i2) {
                q[2] = sintab_[2][i2];
                fn(m++, q);
            }
        }
    }
}

OperatorKernel OperatorKernel::make_scalar(const Grid& grid, const std::array<double, 3>& omega) {
    check_nonnegative(omega.data(), 3, "make_scalar_kernel");
    OperatorKernel k;
    k.grid_ = grid;
    k.kind_ = Kind::scalar;
    k.omega0_ = omega[0];
    k.gamma_ = 0.0;
    for (int d = 0; d < 3; ++d) {
        k.sintab_[d].resize(grid.n[d]);
        for (int i = 0; i < grid.n[d]; ++i)
            k.sintab_[d][i] = grid.n[d] > 1 ? std::sin(2.0 * std::numbers::pi * i / grid.n[d]) : 0.0;
    }
    k.alpha_.resize(static_cast<std::size_t>(grid.voxels()));
    k.for_each_bin([&](std::int64_t m, const std::array<double, 3>& q) {
        const double s = s_of(q);
        k.alpha_[m] = omega[0] + omega[1] * s + omega[2] * s * s;
    });
    return k;
}

OperatorKernel OperatorKernel::make_vector(const Grid& grid, const std::array<double, 5>& omega) {
    check_nonnegative(omega.data(), 5, "make_vector_kernel");
    if (omega[0] <= 0.0)
        throw Error("make_vector_kernel: omega0 must be positive, the Green's function is "
                    "undefined otherwise");
    OperatorKernel k;
    k.grid_ = grid;
    k.kind_ = Kind::vector;
    k.omega0_ = omega[0];
    k.gamma_ = 0.5 * omega[3] + omega[4];
    for (int d = 0; d < 3; ++d) {
        k.sintab_[d].resize(grid.n[d]);
        for (int i = 0; i < grid.n[d]; ++i)
            k.sintab_[d][i] = grid.n[d] > 1 ? std::sin(2.0 * std::numbers::pi * i / grid.n[d]) : 0.0;
    }
    k.alpha_.resize(static_cast<std::size_t>(grid.voxels()));
    k.for_each_bin([&](std::int64_t m, const std::array<double, 3>& q) {
        const double s = s_of(q);
        k.alpha_[m] = omega[0] + omega[1] * s + omega[2] * s * s + 0.5 * omega[3] * s;
    });
    return k;
}

double OperatorKernel::min_eigenvalue() const {
    // gamma >= 0, so alpha is the small eigenvalue of every bin
    double lo = alpha_[0];
    for (double a : alpha_) lo = std::min(lo, a);
    return lo;
}

double OperatorKernel::max_eigenvalue() const {
    double hi = 0.0;
    for_each_bin([&](std::int64_t m, const std::array<double, 3>& q) {
        hi = std::max(hi, alpha_[m] + gamma_ * s_of(q));
    });
    return hi;
}

std::vector<double> OperatorKernel::apply(const std::vector<double>& field, int ncomp) const {
    const std::size_t m = static_cast<std::size_t>(grid_.voxels());
    if (kind_ == Kind::vector && ncomp != grid_.nd)
        throw Error("OperatorKernel::apply: vector kernel needs D components");
    if (field.size() != m * static_cast<std::size_t>(ncomp))
        throw Error("OperatorKernel::apply: field size mismatch");

    std::vector<double> out(field.size());
    if (kind_ == Kind::scalar) {
        for (int c = 0; c < ncomp; ++c) {
            auto spec = fft_forward(grid_, field.data() + c * m);
            for (std::size_t i = 0; i < m; ++i) spec[i] *= alpha_[i];
            fft_inverse(grid_, spec, out.data() + c * m);
        }
        return out;
    }
    const int D = grid_.nd;
    std::vector<std::vector<std::complex<double>>> spec(D);
    for (int d = 0; d < D; ++d) spec[d] = fft_forward(grid_, field.data() + d * m);
    for_each_bin([&](std::int64_t b, const std::array<double, 3>& q) {
        std::complex<double> qv{0.0, 0.0};
        for (int d = 0; d < D; ++d) qv += q[d] * spec[d][b];
        for (int d = 0; d < D; ++d)
            spec[d][b] = alpha_[b] * spec[d][b] + gamma_ * q[d] * qv;
    });
    for (int d = 0; d < D; ++d) fft_inverse(grid_, spec[d], out.data() + d * m);
    return out;
}

std::vector<double> OperatorKernel::greens(const std::vector<double>& field, int ncomp) const {
    if (!invertible())
        throw Error("OperatorKernel::greens: kernel is not invertible (omega0 == 0)");
    const std::size_t m = static_cast<std::size_t>(grid_.voxels());
    if (kind_ == Kind::vector && ncomp != grid_.nd)
        throw Error("OperatorKernel::greens: vector kernel needs D components");
    if (field.size() != m * static_cast<std::size_t>(ncomp))
        throw Error("OperatorKernel::greens: field size mismatch");

    std::vector<double> out(field.size());
    if (kind_ == Kind::scalar) {
        for (int c = 0; c < ncomp; ++c) {
            auto spec = fft_forward(grid_, field.data() + c * m);
            for (std::size_t i = 0; i < m; ++i) spec[i] /= alpha_[i];
            fft_inverse(grid_, spec, out.data() + c * m);
        }
        return out;
    }
    const int D = grid_.nd;
    std::vector<std::vector<std::complex<double>>> spec(D);
    for (int d = 0; d < D; ++d) spec[d] = fft_forward(grid_, field.data() + d * m);
    // (alpha I + gamma q q^T)^-1 = (1/alpha)(I - gamma q q^T / (alpha + gamma |q|^2))
    for_each_bin([&](std::int64_t b, const std::array<double, 3>& q) {
        const double a = alpha_[b];
        std::complex<double> qv{0.0, 0.0};
        for (int d = 0; d < D; ++d) qv += q[d] * spec[d][b];
        const double denom = a + gamma_ * s_of(q);
        for (int d = 0; d < D; ++d)
            spec[d][b] = (spec[d][b] - (gamma_ / denom) * q[d] * qv) / a;
    });
    for (int d = 0; d < D; ++d) fft_inverse(grid_, spec[d], out.data() + d * m);
    return out;
}

std::vector<double> OperatorKernel::precondition(const std::vector<double>& field,
                                                 const std::vector<double>& hbar, double w) const {
    const std::size_t m = static_cast<std::size_t>(grid_.voxels());
    const int ncomp = static_cast<int>(hbar.size());
    if (field.size() != m * hbar.size())
        throw Error("OperatorKernel::precondition: field size mismatch");

    std::vector<double> out(field.size());
    if (kind_ == Kind::scalar) {
        for (int c = 0; c < ncomp; ++c) {
            auto spec = fft_forward(grid_, field.data() + c * m);
            for (std::size_t i = 0; i < m; ++i) spec[i] /= (hbar[c] + w * alpha_[i]);
            fft_inverse(grid_, spec, out.data() + c * m);
        }
        return out;
    }
    const int D = grid_.nd;
    std::vector<std::vector<std::complex<double>>> spec(D);
    for (int d = 0; d < D; ++d) spec[d] = fft_forward(grid_, field.data() + d * m);
    // Sherman-Morrison on (Delta + w gamma q q^T), Delta = diag(hbar_d + w alpha)
    for_each_bin([&](std::int64_t b, const std::array<double, 3>& q) {
        std::array<double, 3> dinv{};
        for (int d = 0; d < D; ++d) dinv[d] = 1.0 / (hbar[d] + w * alpha_[b]);
        const double c = w * gamma_;
        std::complex<double> qdr{0.0, 0.0};
        double qdq = 0.0;
        for (int d = 0; d < D; ++d) {
            qdr += q[d] * dinv[d] * spec[d][b];
            qdq += q[d] * dinv[d] * q[d];
        }
        const std::complex<double> corr = (c * qdr) / (1.0 + c * qdq);
        for (int d = 0; d < D; ++d)
            spec[d][b] = dinv[d] * (spec[d][b] - corr * q[d]);
    });
    for (int d = 0; d < D; ++d) fft_inverse(grid_, spec[d], out.data() + d * m);
    return out;
}

namespace {

// y = H x, per-voxel block multiply
void block_multiply(const BlockField& H, const Grid& g, const std::vector<double>& x,
                    std::vector<double>& y) {
    const std::size_t m = static_cast<std::size_t>(g.voxels());
    const int b = H.ncomp;
    if (!H.full) {
        for (int c = 0; c < b; ++c)
            for (std::size_t i = 0; i < m; ++i) y[c * m + i] = H.h[c * m + i] * x[c * m + i];
        return;
    }
    std::fill(y.begin(), y.end(), 0.0);
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j) {
            const std::size_t p = BlockField::packed_index(i, j, b);
            const double* hij = H.h.data() + p * m;
            const double* xj = x.data() + static_cast<std::size_t>(j) * m;
            double* yi = y.data() + static_cast<std::size_t>(i) * m;
            for (std::size_t v = 0; v < m; ++v) yi[v] += hij[v] * xj[v];
        }
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace

std::vector<double> solve_regularised(const BlockField& H, const OperatorKernel& L, double w,
                                      const std::vector<double>& rhs, const SolveOptions& opt) {
    const Grid& g = L.grid();
    const std::size_t m = static_cast<std::size_t>(g.voxels());
    const int ncomp = H.ncomp;
    if (L.kind() == OperatorKernel::Kind::vector && ncomp != g.nd)
        throw Error("solve_regularised: vector kernel needs D-component blocks");
    const std::size_t expected = H.full ? BlockField::packed_size(ncomp) * m
                                        : static_cast<std::size_t>(ncomp) * m;
    if (H.h.size() != expected) throw Error("solve_regularised: Hessian field size mismatch");
    if (rhs.size() != static_cast<std::size_t>(ncomp) * m)
        throw Error("solve_regularised: rhs size mismatch");
    if (w < 0.0) throw Error("solve_regularised: regularisation weight must be >= 0");

    // mean diagonal of H per component, for the circulant preconditioner
    std::vector<double> hbar(ncomp, 0.0);
    for (int c = 0; c < ncomp; ++c) {
        const std::size_t p = H.full ? BlockField::packed_index(c, c, ncomp) * m
                                     : static_cast<std::size_t>(c) * m;
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += H.h[p + i];
        hbar[c] = s / static_cast<double>(m);
        if (hbar[c] < 0.0) hbar[c] = 0.0;
        if (hbar[c] == 0.0 && !(w > 0.0 && L.invertible()))
            throw Error("solve_regularised: singular system (zero H diagonal and "
                        "non-invertible regulariser)");
    }

    const double bnorm = std::sqrt(dot(rhs, rhs));
    std::vector<double> x(rhs.size(), 0.0);
    if (bnorm == 0.0) return x;

    auto matvec = [&](const std::vector<double>& v) {
        std::vector<double> y(v.size());
        block_multiply(H, g, v, y);
        if (w != 0.0) {
            std::vector<double> lv = L.apply(v, ncomp);
            for (std::size_t i = 0; i < y.size(); ++i) y[i] += w * lv[i];
        }
        return y;
    };

    std::vector<double> r = rhs;
    std::vector<double> z = L.precondition(r, hbar, w);
    std::vector<double> p = z;
    double rz = dot(r, z);
    double res = 1.0;
    for (int it = 0; it < opt.max_iter; ++it) {
        std::vector<double> ap = matvec(p);
        const double pap = dot(p, ap);
        if (pap <= 0.0)
            throw SolveError("solve_regularised: system not positive definite", res);
        const double a = rz / pap;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += a * p[i];
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= a * ap[i];
        res = std::sqrt(dot(r, r)) / bnorm;
        if (res <= opt.tol) return x;
        z = L.precondition(r, hbar, w);
        const double rz2 = dot(r, z);
        const double beta = rz2 / rz;
        rz = rz2;
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = z[i] + beta * p[i];
    }
    throw SolveError("solve_regularised: no convergence after " + std::to_string(opt.max_iter) +
                         " iterations, residual " + std::to_string(res),
                     res);
}

} // namespace sam
