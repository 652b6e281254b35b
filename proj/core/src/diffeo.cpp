#include "sam/diffeo.hpp"

#include <cmath>
#include <cstring>

#include "sam/error.hpp"

namespace sam {

namespace {

// Corner indices and weights of the multilinear stencil at one point.
struct Stencil {
    int n = 0;
    std::int64_t idx[8];
    double w[8];
};

inline void make_stencil(const Grid& g, const double* pos, Stencil& st) {
    int base[3] = {0, 0, 0};
    double f[3] = {0.0, 0.0, 0.0};
    for (int d = 0; d < g.nd; ++d) {
        const double p = pos[d];
        const double fl = std::floor(p);
        base[d] = static_cast<int>(fl);
        f[d] = p - fl;
    }
    if (g.nd == 2) {
        const int i0 = wrap_index(base[0], g.n[0]), j0 = wrap_index(base[0] + 1, g.n[0]);
        const int i1 = wrap_index(base[1], g.n[1]), j1 = wrap_index(base[1] + 1, g.n[1]);
        const double f0 = f[0], f1 = f[1];
        st.n = 4;
        st.idx[0] = g.index(i0, i1);
        st.idx[1] = g.index(i0, j1);
        st.idx[2] = g.index(j0, i1);
        st.idx[3] = g.index(j0, j1);
        st.w[0] = (1 - f0) * (1 - f1);
        st.w[1] = (1 - f0) * f1;
        st.w[2] = f0 * (1 - f1);
        st.w[3] = f0 * f1;
    } else {
        const int i0 = wrap_index(base[0], g.n[0]), j0 = wrap_index(base[0] + 1, g.n[0]);
        const int i1 = wrap_index(base[1], g.n[1]), j1 = wrap_index(base[1] + 1, g.n[1]);
        const int i2 = wrap_index(base[2], g.n[2]), j2 = wrap_index(base[2] + 1, g.n[2]);
        const double f0 = f[0], f1 = f[1], f2 = f[2];
        st.n = 8;
        int k = 0;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                for (int c = 0; c < 2; ++c) {
                    st.idx[k] = g.index(a ? j0 : i0, b ? j1 : i1, c ? j2 : i2);
                    st.w[k] = (a ? f0 : 1 - f0) * (b ? f1 : 1 - f1) * (c ? f2 : 1 - f2);
                    ++k;
                }
    }
}

inline void check_psi(const Grid& g, const std::vector<double>& psi, const char* who) {
    if (psi.size() != static_cast<std::size_t>(g.nd) * g.voxels())
        throw Error(std::string(who) + ": deformation size mismatch");
}

// wrap a coordinate difference onto (-n/2, n/2]
inline double wrap_delta(double d, int n) {
    return d - n * std::round(d / n);
}

} // namespace

Deformation identity_deformation(const Grid& grid) {
    Deformation out;
    out.grid = grid;
    const std::int64_t m = grid.voxels();
    out.psi.resize(static_cast<std::size_t>(grid.nd) * m);
    std::int64_t i = 0;
    for (int i0 = 0; i0 < grid.n[0]; ++i0)
        for (int i1 = 0; i1 < grid.n[1]; ++i1)
            for (int i2 = 0; i2 < grid.n[2]; ++i2, ++i) {
                out.psi[i] = i0;
                out.psi[m + i] = i1;
                if (grid.nd == 3) out.psi[2 * m + i] = i2;
            }
    return out;
}

std::vector<double> pull(const Grid& grid, const std::vector<double>& image, int channels,
                         const std::vector<double>& psi) {
    check_psi(grid, psi, "pull");
    const std::int64_t m = grid.voxels();
    if (image.size() != static_cast<std::size_t>(channels) * m)
        throw Error("pull: image size mismatch");
    std::vector<double> out(image.size(), 0.0);
    Stencil st;
    double pos[3];
    for (std::int64_t v = 0; v < m; ++v) {
        for (int d = 0; d < grid.nd; ++d) pos[d] = psi[d * m + v];
        make_stencil(grid, pos, st);
        for (int c = 0; c < channels; ++c) {
            const double* img = image.data() + static_cast<std::size_t>(c) * m;
            double acc = 0.0;
            for (int k = 0; k < st.n; ++k) acc += st.w[k] * img[st.idx[k]];
            out[static_cast<std::size_t>(c) * m + v] = acc;
        }
    }
    return out;
}

std::vector<double> push(const Grid& grid, const std::vector<double>& image, int channels,
                         const std::vector<double>& psi) {
    check_psi(grid, psi, "push");
    const std::int64_t m = grid.voxels();
    if (image.size() != static_cast<std::size_t>(channels) * m)
        throw Error("push: image size mismatch");
    std::vector<double> out(image.size(), 0.0);
    Stencil st;
    double pos[3];
    for (std::int64_t v = 0; v < m; ++v) {
        for (int d = 0; d < grid.nd; ++d) pos[d] = psi[d * m + v];
        make_stencil(grid, pos, st);
        for (int c = 0; c < channels; ++c) {
            const double val = image[static_cast<std::size_t>(c) * m + v];
            double* o = out.data() + static_cast<std::size_t>(c) * m;
            for (int k = 0; k < st.n; ++k) o[st.idx[k]] += st.w[k] * val;
        }
    }
    return out;
}

std::vector<double> spatial_gradient(const Grid& grid, const std::vector<double>& image,
                                     int channels) {
    const std::int64_t m = grid.voxels();
    if (image.size() != static_cast<std::size_t>(channels) * m)
        throw Error("spatial_gradient: image size mismatch");
    const int D = grid.nd;
    std::vector<double> out(static_cast<std::size_t>(channels) * D * m);
    for (int c = 0; c < channels; ++c) {
        const double* img = image.data() + static_cast<std::size_t>(c) * m;
        std::int64_t v = 0;
        for (int i0 = 0; i0 < grid.n[0]; ++i0)
            for (int i1 = 0; i1 < grid.n[1]; ++i1)
                for (int i2 = 0; i2 < grid.n[2]; ++i2, ++v) {
                    const int idx[3] = {i0, i1, i2};
                    for (int d = 0; d < D; ++d) {
                        int up[3] = {i0, i1, i2}, dn[3] = {i0, i1, i2};
                        up[d] = wrap_index(idx[d] + 1, grid.n[d]);
                        dn[d] = wrap_index(idx[d] - 1, grid.n[d]);
                        const double hi = img[grid.index(up[0], up[1], up[2])];
                        const double lo = img[grid.index(dn[0], dn[1], dn[2])];
                        out[(static_cast<std::size_t>(c) * D + d) * m + v] = 0.5 * (hi - lo);
                    }
                }
    }
    return out;
}

void jacobian(const Grid& grid, const std::vector<double>& psi, std::vector<double>& jac,
              std::vector<double>& jac_det) {
    check_psi(grid, psi, "jacobian");
    const std::int64_t m = grid.voxels();
    const int D = grid.nd;

    // displacement convention: differentiate psi - id, then add the identity
    std::vector<double> disp(psi.size());
    {
        Deformation id = identity_deformation(grid);
        for (std::size_t i = 0; i < psi.size(); ++i) disp[i] = psi[i] - id.psi[i];
    }
    std::vector<double> dgrad = spatial_gradient(grid, disp, D); // (d * D + e) * M

    jac.assign(static_cast<std::size_t>(D) * D * m, 0.0);
    jac_det.assign(static_cast<std::size_t>(m), 0.0);
    for (std::int64_t v = 0; v < m; ++v) {
        double J[3][3] = {{0}};
        for (int d = 0; d < D; ++d)
            for (int e = 0; e < D; ++e) {
                J[d][e] = dgrad[(static_cast<std::size_t>(d) * D + e) * m + v] + (d == e ? 1.0 : 0.0);
                jac[(static_cast<std::size_t>(d) * D + e) * m + v] = J[d][e];
            }
        if (D == 2)
            jac_det[v] = J[0][0] * J[1][1] - J[0][1] * J[1][0];
        else
            jac_det[v] = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                         J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                         J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
    }
}

namespace {

// psi_new(x) = points(x) + disp_outer(points(x)); interpolating the
// displacement field keeps the composition well defined across the seam.
std::vector<double> compose_at_points(const Grid& grid, const std::vector<double>& outer_psi,
                                      const std::vector<double>& points) {
    const std::int64_t m = grid.voxels();
    const int D = grid.nd;
    std::vector<double> disp(outer_psi.size());
    {
        Deformation id = identity_deformation(grid);
        for (std::size_t i = 0; i < outer_psi.size(); ++i) disp[i] = outer_psi[i] - id.psi[i];
    }
    std::vector<double> disp_at = pull(grid, disp, D, points);
    std::vector<double> out(points.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = points[i] + disp_at[i];
    return out;
}

} // namespace

Deformation compose(const Deformation& outer, const Deformation& inner) {
    if (outer.grid != inner.grid) throw Error("compose: grid mismatch");
    Deformation out;
    out.grid = outer.grid;
    out.psi = compose_at_points(outer.grid, outer.psi, inner.psi);
    return out;
}

Deformation shoot(const std::vector<double>& v0, const OperatorKernel& kernel_v, int t_steps) {
    const Grid& g = kernel_v.grid();
    if (kernel_v.kind() != OperatorKernel::Kind::vector)
        throw Error("shoot: a vector kernel is required");
    if (!kernel_v.invertible()) throw Error("shoot: kernel is not invertible");
    if (t_steps < 1) throw Error("shoot: t_steps must be >= 1");
    const std::int64_t m = g.voxels();
    const int D = g.nd;
    if (v0.size() != static_cast<std::size_t>(D) * m) throw Error("shoot: velocity size mismatch");
    for (double x : v0)
        if (!std::isfinite(x)) throw Error("shoot: velocity contains NaN or infinity");

    Deformation psi = identity_deformation(g);
    bool all_zero = true;
    for (double x : v0)
        if (x != 0.0) { all_zero = false; break; }
    if (all_zero) return psi;

    const std::vector<double> u0 = kernel_v.apply(v0, D);
    std::vector<double> jac, det;
    for (int t = 0; t < t_steps; ++t) {
        jacobian(g, psi.psi, jac, det);
        std::vector<double> u0_psi = pull(g, u0, D, psi.psi);
        // u = |Dpsi| (Dpsi)^T u0(psi)
        std::vector<double> u(static_cast<std::size_t>(D) * m);
        for (std::int64_t v = 0; v < m; ++v)
            for (int d = 0; d < D; ++d) {
                double acc = 0.0;
                for (int e = 0; e < D; ++e)
                    acc += jac[(static_cast<std::size_t>(e) * D + d) * m + v] * u0_psi[e * m + v];
                u[static_cast<std::size_t>(d) * m + v] = det[v] * acc;
            }
        std::vector<double> vel = kernel_v.greens(u, D);
        // psi <- psi(id - v/T)
        Deformation id = identity_deformation(g);
        std::vector<double> points(psi.psi.size());
        const double step = 1.0 / static_cast<double>(t_steps);
        for (std::size_t i = 0; i < points.size(); ++i) points[i] = id.psi[i] - step * vel[i];
        psi.psi = compose_at_points(g, psi.psi, points);
    }
    return psi;
}

double mean_displacement(const Deformation& psi) {
    const Grid& g = psi.grid;
    const std::int64_t m = g.voxels();
    Deformation id = identity_deformation(g);
    double acc = 0.0;
    for (std::int64_t v = 0; v < m; ++v) {
        double d2 = 0.0;
        for (int d = 0; d < g.nd; ++d) {
            const double dd = wrap_delta(psi.psi[d * m + v] - id.psi[d * m + v], g.n[d]);
            d2 += dd * dd;
        }
        acc += std::sqrt(d2);
    }
    return acc / static_cast<double>(m);
}

} // namespace sam
