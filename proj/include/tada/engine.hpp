#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tada/autodiff.hpp"
#include "tada/tomo.hpp"
#include "tada/unet.hpp"

namespace tada::engine {

struct TadaConfig {
    double alpha = 0.5;        // input-noise fraction
    double beta = 1e-2;        // denoising regularization weight
    double gamma = 1e-2;       // input-blend rate
    int p = 1;                 // norm exponent, 1 or 2
    int iterations = 4000;     // desk-scale default; 50000 at paper scale
    double learning_rate = 1e-3;
    double lr_decay = 1.0;     // per-iteration multiplicative decay; 1 = constant lr
    double ema_decay = 0.99;
    std::uint64_t seed = 0;
    int eval_every = 50;
    unet::UNetConfig net;

    void validate() const;
};

struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::int64_t step_count = 0;
    std::vector<Tensor<float>> m, v;
};

/// Standard Adam update with bias correction; lazily sizes the moment
/// accumulators on first use. A non-finite gradient aborts the run with a
/// diagnostic naming the parameter.
void adam_step(std::vector<unet::Param<float>>& params, AdamState& state, double learning_rate);

struct EmaState {
    Tensor<float> shadow;
    double decay = 0.99;
    bool initialized = false;

    void update(const Tensor<float>& x);
};

struct TraceRow {
    int iteration;
    double loss, data_fidelity, regularizer;  // regularizer is unweighted ||z - x_hat||_p^p
    double psnr_ema, ssim_ema;                // NaN when no ground truth is given
};
using RunTrace = std::vector<TraceRow>;

/// sigma = alpha * max(|z|).
float noise_sigma(const Tensor<float>& z, double alpha);
float noise_sigma(const tomo::Volume& z, double alpha);

template <typename T>
struct TadaLoss {
    Var<T> total;          // data_fidelity + beta * regularizer
    Var<T> data_fidelity;  // ||A x_hat - y||_p^p
    Var<T> regularizer;    // ||z - x_hat||_p^p, z held constant
};

/// Builds the loss on the tape. x_hat must have shape (1,1,nz,ny,nx); z is
/// treated as a constant, so no gradient flows into it.
template <typename T>
TadaLoss<T> tada_loss(Tape<T>& tape, const Tensor<T>& y, Var<T> x_hat, const Tensor<T>& z,
                      const tomo::Geometry& g, T beta, int p);

/// z' = (1 - gamma) * z + gamma * x_hat, elementwise.
Tensor<float> input_update(const Tensor<float>& z, const Tensor<float>& x_hat, double gamma);

/// Per-iteration hook for tests and instrumentation.
struct IterationView {
    int iteration;
    float sigma;
    const Tensor<float>& eta;
    const Tensor<float>& z_before;
    const Tensor<float>& z_after;
    const Tensor<float>& x_hat;
};
using IterationObserver = std::function<void(const IterationView&)>;

struct RunResult {
    tomo::Volume volume;  // EMA of the network outputs
    RunTrace trace;
};

RunResult run_tada_dip(const tomo::Sinogram& y, const tomo::Geometry& g, std::int64_t ny,
                       std::int64_t nx, const TadaConfig& cfg,
                       const tomo::Volume* ground_truth = nullptr,
                       const IterationObserver& observer = nullptr);

/// Fixed-input DIP: alpha, beta, gamma are ignored; z is drawn once.
RunResult run_vanilla_dip(const tomo::Sinogram& y, const tomo::Geometry& g, std::int64_t ny,
                          std::int64_t nx, const TadaConfig& cfg,
                          const tomo::Volume* ground_truth = nullptr,
                          const IterationObserver& observer = nullptr);

/// CSV with columns iteration, loss, data_fidelity, regularizer, psnr_ema,
/// ssim_ema. Written whole-file atomically.
void write_trace_csv(const std::string& path, const RunTrace& trace);
std::string trace_to_csv(const RunTrace& trace);

}  // namespace tada::engine
