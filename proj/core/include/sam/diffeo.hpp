#pragma once

#include <vector>

#include "sam/grid.hpp"
#include "sam/operators.hpp"

namespace sam {

/// Dense sampling map on a periodic grid. psi stores absolute voxel
/// coordinates, component-major (D planes of M). Jacobian and determinant
/// fields are filled on demand by jacobian().
struct Deformation {
    Grid grid;
    std::vector<double> psi;     // D * M
    std::vector<double> jac;     // D * D * M, entry (d,e) = d psi_d / d x_e; empty unless computed
    std::vector<double> jac_det; // M; empty unless computed

    bool has_jacobian() const { return !jac.empty(); }
};

Deformation identity_deformation(const Grid& grid);

/// Integrate an initial velocity to a diffeomorphism by geodesic shooting:
/// momentum u0 = L v0 is transported along the evolving map and the map is
/// composed with small backward steps id - v/T. A zero velocity returns the
/// identity exactly; a constant velocity c gives psi(x) = x - c.
Deformation shoot(const std::vector<double>& v0, const OperatorKernel& kernel_v, int t_steps);

/// Multilinear periodic resampling of a C-channel image at psi ("pull",
/// a' = a(psi)). Linear in the image; interpolation weights sum to 1.
std::vector<double> pull(const Grid& grid, const std::vector<double>& image, int channels,
                         const std::vector<double>& psi);

/// Exact adjoint of pull: scatter with the same weights ("push-forward").
std::vector<double> push(const Grid& grid, const std::vector<double>& image, int channels,
                         const std::vector<double>& psi);

/// Jacobian of psi (identity part included) by central differences of the
/// displacement field, plus per-voxel determinants.
void jacobian(const Grid& grid, const std::vector<double>& psi, std::vector<double>& jac,
              std::vector<double>& jac_det);

/// Central-difference spatial gradient with periodic wrap.
/// Layout: (c * D + d) * M + m.
std::vector<double> spatial_gradient(const Grid& grid, const std::vector<double>& image,
                                     int channels);

/// Composition outer(inner(x)), evaluated by interpolating the displacement
/// field of the outer map at the inner map's points.
Deformation compose(const Deformation& outer, const Deformation& inner);

/// Mean wrap-aware voxel distance of psi from the identity map.
double mean_displacement(const Deformation& psi);

} // namespace sam
