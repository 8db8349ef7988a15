#pragma once

#include <vector>

#include "tada/tomo.hpp"

namespace tada::classical {

struct AsdPocsConfig {
    int iterations = 500;
    int num_subsets = 30;
    int tv_steps_per_iter = 50;
    double relaxation = 1.0;       // data-update lambda, in (0, 2)
    double relaxation_decay = 0.995;
    double tv_step_fraction = 0.2; // of the data-update magnitude
    bool nonnegativity = true;

    void validate() const;
};

struct AsdPocsTraceRow {
    int iteration;
    double data_residual;              // ||A x - y||_2 after the full iteration
    double tv_value;
    double data_residual_after_update; // ||A x - y||_2 right after the data-update phase
};

struct AsdPocsResult {
    tomo::Volume volume;
    std::vector<AsdPocsTraceRow> trace;
};

/// Smoothed isotropic 3-D total variation: forward differences, zero-gradient
/// boundary, sqrt(dx^2 + dy^2 + dz^2 + eps^2) summed over voxels.
double total_variation(const tomo::Volume& x, double eps = 1e-8);

/// Gradient of the smoothed TV functional, same shape as x.
tomo::Volume tv_gradient(const tomo::Volume& x, double eps = 1e-8);

/// One steepest-descent step of length `step` along the unit-normalized TV
/// gradient. A zero-gradient input is returned unchanged.
tomo::Volume tv_descent_step(const tomo::Volume& x, double step, double eps = 1e-8);

/// One pass of SART-style data updates over angularly interleaved view
/// subsets. Exposed separately so the tv_steps_per_iter == 0 reduction of
/// asd_pocs can be checked against it.
void sart_pass(tomo::Volume& x, const tomo::Sinogram& y, const tomo::Geometry& g, int num_subsets,
               double relaxation);

AsdPocsResult asd_pocs(const tomo::Sinogram& y, const tomo::Geometry& g, std::int64_t ny,
                       std::int64_t nx, const AsdPocsConfig& cfg);

}  // namespace tada::classical
