#include "sam/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>

namespace sam {
namespace {

struct PlanPair {
    fftw_plan fwd = nullptr;
    fftw_plan bwd = nullptr;
};

// Plan creation is not thread-safe in FFTW; execution via the new-array
// interface is. FFTW_UNALIGNED keeps the plans valid for any caller buffer.
class PlanCache {
public:
    static PlanCache& instance() {
        static PlanCache c;
        return c;
    }

    PlanPair get(const Grid& g) {
        std::lock_guard<std::mutex> lock(mu_);
        const auto key = std::array<int, 3>{g.n[0], g.n[1], g.n[2]};
        auto it = plans_.find(key);
        if (it != plans_.end()) return it->second;

        const std::size_t m = static_cast<std::size_t>(g.voxels());
        std::vector<std::complex<double>> a(m), b(m);
        auto* fa = reinterpret_cast<fftw_complex*>(a.data());
        auto* fb = reinterpret_cast<fftw_complex*>(b.data());
        const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
        PlanPair p;
        if (g.nd == 2) {
            p.fwd = fftw_plan_dft_2d(g.n[0], g.n[1], fa, fb, FFTW_FORWARD, flags);
            p.bwd = fftw_plan_dft_2d(g.n[0], g.n[1], fa, fb, FFTW_BACKWARD, flags);
        } else {
            p.fwd = fftw_plan_dft_3d(g.n[0], g.n[1], g.n[2], fa, fb, FFTW_FORWARD, flags);
            p.bwd = fftw_plan_dft_3d(g.n[0], g.n[1], g.n[2], fa, fb, FFTW_BACKWARD, flags);
        }
        plans_[key] = p;
        return p;
    }

private:
    std::mutex mu_;
    std::map<std::array<int, 3>, PlanPair> plans_;
};

} // namespace

std::vector<std::complex<double>> fft_forward(const Grid& grid, const double* field) {
    const std::size_t m = static_cast<std::size_t>(grid.voxels());
    std::vector<std::complex<double>> in(m), out(m);
    for (std::size_t i = 0; i < m; ++i) in[i] = field[i];
    PlanPair p = PlanCache::instance().get(grid);
    fftw_execute_dft(p.fwd, reinterpret_cast<fftw_complex*>(in.data()),
                     reinterpret_cast<fftw_complex*>(out.data()));
    return out;
}

void fft_inverse(const Grid& grid, const std::vector<std::complex<double>>& spec, double* out) {
    const std::size_t m = static_cast<std::size_t>(grid.voxels());
    if (spec.size() != m) throw Error("fft_inverse: spectrum size mismatch");
    std::vector<std::complex<double>> in(spec), tmp(m);
    PlanPair p = PlanCache::instance().get(grid);
    fftw_execute_dft(p.bwd, reinterpret_cast<fftw_complex*>(in.data()),
                     reinterpret_cast<fftw_complex*>(tmp.data()));
    const double scale = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) out[i] = tmp[i].real() * scale;
}

} // namespace sam
