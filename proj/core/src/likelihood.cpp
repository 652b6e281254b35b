#include "sam/likelihood.hpp"

#include <cmath>
#include <numbers>

#include "sam/accum.hpp"
#include "sam/error.hpp"
#include "sam/hyper.hpp"

namespace sam {

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454836; // ln(2 pi)

void check_sigma2(const NoiseModel& m, int channels) {
    if (m.kind != DataKind::continuous) return;
    if (static_cast<int>(m.sigma2.size()) != channels)
        throw Error("likelihood: sigma2 must have one entry per channel");
    for (double s : m.sigma2)
        if (!(s >= kSigma2Floor))
            throw Error("likelihood: sigma2 below the variance floor");
}

} // namespace

double energy(const NoiseModel& model, const Grid& grid, int channels, const float* f,
              const std::vector<double>& a_warped, const std::uint8_t* mask) {
    const std::int64_t m = grid.voxels();
    if (a_warped.size() != static_cast<std::size_t>(channels) * m)
        throw Error("energy: reconstruction size mismatch");
    check_sigma2(model, channels);

    double J = 0.0;
    switch (model.kind) {
        case DataKind::continuous: {
            for (int c = 0; c < channels; ++c) {
                const double s2 = model.sigma2[c];
                const double lognorm = 0.5 * (kLog2Pi + std::log(s2));
                const double inv2 = 0.5 / s2;
                const double* a = a_warped.data() + static_cast<std::size_t>(c) * m;
                const float* fc = f + static_cast<std::size_t>(c) * m;
                for (std::int64_t v = 0; v < m; ++v) {
                    if (!mask[v]) continue;
                    if (std::isnan(a[v])) throw Error("energy: NaN in reconstruction");
                    const double r = a[v] - fc[v];
                    J += lognorm + inv2 * r * r;
                }
            }
            break;
        }
        case DataKind::binary: {
            for (int c = 0; c < channels; ++c) {
                const double* a = a_warped.data() + static_cast<std::size_t>(c) * m;
                const float* fc = f + static_cast<std::size_t>(c) * m;
                for (std::int64_t v = 0; v < m; ++v) {
                    if (!mask[v]) continue;
                    if (std::isnan(a[v])) throw Error("energy: NaN in reconstruction");
                    J += softplus(a[v]) - fc[v] * a[v];
                }
            }
            break;
        }
        case DataKind::categorical: {
            if (channels < 2) throw Error("energy: categorical needs C >= 2");
            for (std::int64_t v = 0; v < m; ++v) {
                if (!mask[v]) continue;
                double astar = a_warped[v];
                for (int c = 1; c < channels; ++c)
                    astar = std::max(astar, a_warped[static_cast<std::size_t>(c) * m + v]);
                if (std::isnan(astar)) throw Error("energy: NaN in reconstruction");
                double lse = 0.0, dotp = 0.0;
                for (int c = 0; c < channels; ++c) {
                    const double ac = a_warped[static_cast<std::size_t>(c) * m + v];
                    lse += std::exp(ac - astar);
                    dotp += ac * f[static_cast<std::size_t>(c) * m + v];
                }
                J += astar + std::log(lse) - dotp;
            }
            break;
        }
    }
    return J;
}

EnergyStats energy_stats(const NoiseModel& model, const Grid& grid, int channels, const float* f,
                         const std::vector<double>& a_warped, const std::uint8_t* mask) {
    EnergyStats out;
    out.J = energy(model, grid, channels, f, a_warped, mask);
    out.rss.assign(channels, 0.0);
    const std::int64_t m = grid.voxels();
    for (std::int64_t v = 0; v < m; ++v) {
        if (!mask[v]) continue;
        ++out.observed;
        for (int c = 0; c < channels; ++c) {
            const double r = a_warped[static_cast<std::size_t>(c) * m + v] -
                             f[static_cast<std::size_t>(c) * m + v];
            out.rss[c] += r * r;
        }
    }
    return out;
}

LikelihoodDerivs derivatives(const NoiseModel& model, const Grid& grid, int channels,
                             const float* f, const std::vector<double>& a, const Deformation& psi,
                             const std::uint8_t* mask) {
    const std::int64_t m = grid.voxels();
    if (a.size() != static_cast<std::size_t>(channels) * m)
        throw Error("derivatives: appearance size mismatch");
    check_sigma2(model, channels);

    const std::vector<double> aw = pull(grid, a, channels, psi.psi);

    LikelihoodDerivs out;
    out.J = energy(model, grid, channels, f, aw, mask);

    std::vector<double> resid(static_cast<std::size_t>(channels) * m, 0.0);
    const bool full = model.kind == DataKind::categorical;
    const std::size_t nw = full ? BlockField::packed_size(channels) : static_cast<std::size_t>(channels);
    std::vector<double> weights(nw * m, 0.0);

    switch (model.kind) {
        case DataKind::continuous: {
            for (int c = 0; c < channels; ++c) {
                const double inv = 1.0 / model.sigma2[c];
                const double* av = aw.data() + static_cast<std::size_t>(c) * m;
                const float* fc = f + static_cast<std::size_t>(c) * m;
                for (std::int64_t v = 0; v < m; ++v) {
                    if (!mask[v]) continue;
                    resid[static_cast<std::size_t>(c) * m + v] = (av[v] - fc[v]) * inv;
                    weights[static_cast<std::size_t>(c) * m + v] = inv;
                }
            }
            break;
        }
        case DataKind::binary: {
            for (int c = 0; c < channels; ++c) {
                const double* av = aw.data() + static_cast<std::size_t>(c) * m;
                const float* fc = f + static_cast<std::size_t>(c) * m;
                for (std::int64_t v = 0; v < m; ++v) {
                    if (!mask[v]) continue;
                    const double s = sigmoid(av[v]);
                    resid[static_cast<std::size_t>(c) * m + v] = s - fc[v];
                    weights[static_cast<std::size_t>(c) * m + v] = s * (1.0 - s);
                }
            }
            break;
        }
        case DataKind::categorical: {
            std::vector<double> s(channels);
            for (std::int64_t v = 0; v < m; ++v) {
                if (!mask[v]) continue;
                double astar = aw[v];
                for (int c = 1; c < channels; ++c)
                    astar = std::max(astar, aw[static_cast<std::size_t>(c) * m + v]);
                double z = 0.0;
                for (int c = 0; c < channels; ++c) {
                    s[c] = std::exp(aw[static_cast<std::size_t>(c) * m + v] - astar);
                    z += s[c];
                }
                for (int c = 0; c < channels; ++c) s[c] /= z;
                for (int c = 0; c < channels; ++c) {
                    resid[static_cast<std::size_t>(c) * m + v] =
                        s[c] - f[static_cast<std::size_t>(c) * m + v];
                    for (int d = c; d < channels; ++d) {
                        const double w = s[c] * ((c == d ? 1.0 : 0.0) - s[d]);
                        weights[BlockField::packed_index(c, d, channels) * m + v] = w;
                    }
                }
            }
            break;
        }
    }

    out.g = push(grid, resid, channels, psi.psi);
    out.H.ncomp = channels;
    out.H.full = full;
    out.H.h = push(grid, weights, static_cast<int>(nw), psi.psi);
    return out;
}

std::vector<double> squash(const NoiseModel& model, const Grid& grid, int channels,
                           const std::vector<double>& a) {
    const std::int64_t m = grid.voxels();
    if (a.size() != static_cast<std::size_t>(channels) * m)
        throw Error("squash: size mismatch");
    std::vector<double> out(a.size());
    switch (model.kind) {
        case DataKind::continuous:
            out = a;
            break;
        case DataKind::binary:
            for (std::size_t i = 0; i < a.size(); ++i) out[i] = sigmoid(a[i]);
            break;
        case DataKind::categorical: {
            for (std::int64_t v = 0; v < m; ++v) {
                double astar = a[v];
                for (int c = 1; c < channels; ++c)
                    astar = std::max(astar, a[static_cast<std::size_t>(c) * m + v]);
                double z = 0.0;
                for (int c = 0; c < channels; ++c) {
                    const double e = std::exp(a[static_cast<std::size_t>(c) * m + v] - astar);
                    out[static_cast<std::size_t>(c) * m + v] = e;
                    z += e;
                }
                for (int c = 0; c < channels; ++c) out[static_cast<std::size_t>(c) * m + v] /= z;
            }
            break;
        }
    }
    return out;
}

std::vector<double> update_sigma2(const ImageDataset& ds,
                                  const std::vector<std::vector<double>>& recons) {
    if (ds.kind != DataKind::continuous)
        throw Error("update_sigma2: only defined for the Gaussian kind");
    if (static_cast<int>(recons.size()) != ds.n_images)
        throw Error("update_sigma2: need one reconstruction per image");
    const std::int64_t m = ds.voxels();
    std::vector<ExactSum> rss(ds.channels);
    std::int64_t observed = 0;
    for (int n = 0; n < ds.n_images; ++n) {
        const float* f = ds.image(n);
        const std::uint8_t* mask = ds.image_mask(n);
        const std::vector<double>& a = recons[n];
        if (a.size() != static_cast<std::size_t>(ds.channels) * m)
            throw Error("update_sigma2: reconstruction size mismatch");
        for (std::int64_t v = 0; v < m; ++v) {
            if (!mask[v]) continue;
            ++observed;
            for (int c = 0; c < ds.channels; ++c) {
                const double r = a[static_cast<std::size_t>(c) * m + v] -
                                 f[static_cast<std::size_t>(c) * m + v];
                rss[c].add(r * r);
            }
        }
    }
    if (observed == 0) throw Error("update_sigma2: no observed voxels");
    std::vector<double> s2(ds.channels);
    for (int c = 0; c < ds.channels; ++c)
        s2[c] = std::max(rss[c].value() / static_cast<double>(observed), kSigma2Floor);
    return s2;
}

} // namespace sam
