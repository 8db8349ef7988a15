#pragma once

#include <cstdint>
#include <vector>

#include "tada/autodiff.hpp"
#include "tada/tensor.hpp"

namespace tada::tomo {

/// Parallel-beam acquisition. Angles are in radians, strictly increasing,
/// within [0, pi). Each axial slice is an independent 2-D Radon problem.
struct Geometry {
    int num_views = 0;
    std::vector<double> angles;
    int num_det = 0;
    double det_spacing = 1.0;
    int num_slices = 0;

    static Geometry uniform(int num_views, int num_det, int num_slices, double det_spacing = 1.0);

    /// Smallest detector count covering a ny-by-nx slice diagonal whose bins
    /// align with the pixel lattice (same parity as nx).
    static int covering_det_count(int ny, int nx);

    void validate() const;
    void validate_for_slice(int ny, int nx) const;
    std::int64_t sinogram_size() const {
        return static_cast<std::int64_t>(num_slices) * num_views * num_det;
    }
};

struct Volume {
    std::int64_t nz = 0, ny = 0, nx = 0;
    std::vector<float> data;

    Volume() = default;
    Volume(std::int64_t nz_, std::int64_t ny_, std::int64_t nx_)
        : nz(nz_), ny(ny_), nx(nx_), data(static_cast<std::size_t>(nz_ * ny_ * nx_), 0.0f) {}

    std::int64_t numel() const { return nz * ny * nx; }
    float& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[(z * ny + y) * nx + x]; }
    float at(std::int64_t z, std::int64_t y, std::int64_t x) const { return data[(z * ny + y) * nx + x]; }
};

/// Measurements indexed (slice, view, detector bin).
struct Sinogram {
    std::int64_t num_slices = 0, num_views = 0, num_det = 0;
    std::vector<float> data;

    Sinogram() = default;
    Sinogram(std::int64_t s, std::int64_t v, std::int64_t d)
        : num_slices(s), num_views(v), num_det(d), data(static_cast<std::size_t>(s * v * d), 0.0f) {}

    std::int64_t numel() const { return num_slices * num_views * num_det; }
    float& at(std::int64_t s, std::int64_t v, std::int64_t d) {
        return data[(s * num_views + v) * num_det + d];
    }
    float at(std::int64_t s, std::int64_t v, std::int64_t d) const {
        return data[(s * num_views + v) * num_det + d];
    }
};

enum class FbpFilter { RamLak, Hann };

/// Raw Radon kernels shared by the float-domain API and the autodiff op.
/// Both operate slice by slice; the adjoint applies the exact transpose of
/// the forward interpolation weights.
template <typename T>
void radon_forward(const T* volume, std::int64_t nz, std::int64_t ny, std::int64_t nx,
                   const Geometry& g, T* sinogram);
template <typename T>
void radon_adjoint_add(const T* sinogram, const Geometry& g, std::int64_t nz, std::int64_t ny,
                       std::int64_t nx, T* volume);

Sinogram forward_project(const Volume& x, const Geometry& g);
Volume back_project(const Sinogram& y, const Geometry& g, std::int64_t ny, std::int64_t nx);
Volume fbp(const Sinogram& y, const Geometry& g, std::int64_t ny, std::int64_t nx,
           FbpFilter filter = FbpFilter::RamLak);

/// Records forward_project on the tape; backward is back_project of the
/// upstream gradient. Input may be (nz,ny,nx) or (1,1,nz,ny,nx); output has
/// shape (num_slices, num_views, num_det).
template <typename T>
Var<T> projector_op(Tape<T>& tape, Var<T> volume, const Geometry& g);

/// y = A x + n with n ~ N(0, sigma^2 I) drawn from the seed.
Sinogram synthesize_measurements(const Volume& x, const Geometry& g, double noise_sigma,
                                 std::uint64_t seed);

}  // namespace tada::tomo
