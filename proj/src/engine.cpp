#include "tada/engine.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "tada/random.hpp"
#include "tada/toolkit.hpp"

namespace tada::engine {

void TadaConfig::validate() const {
    if (alpha < 0.0) throw std::invalid_argument("tada config: alpha must be >= 0");
    if (beta < 0.0) throw std::invalid_argument("tada config: beta must be >= 0");
    if (gamma < 0.0 || gamma > 1.0) throw std::invalid_argument("tada config: gamma must lie in [0, 1]");
    if (p != 1 && p != 2) throw std::invalid_argument("tada config: p must be 1 or 2");
    if (iterations < 1) throw std::invalid_argument("tada config: iterations must be >= 1");
    if (learning_rate <= 0.0) throw std::invalid_argument("tada config: learning_rate must be > 0");
    if (lr_decay <= 0.0 || lr_decay > 1.0)
        throw std::invalid_argument("tada config: lr_decay must lie in (0, 1]");
    if (ema_decay < 0.0 || ema_decay >= 1.0)
        throw std::invalid_argument("tada config: ema_decay must lie in [0, 1)");
    if (eval_every < 1) throw std::invalid_argument("tada config: eval_every must be >= 1");
    net.validate();
}

void adam_step(std::vector<unet::Param<float>>& params, AdamState& state, double learning_rate) {
    if (state.m.empty()) {
        state.m.reserve(params.size());
        state.v.reserve(params.size());
        for (const auto& p : params) {
            state.m.emplace_back(p.value.shape);
            state.v.emplace_back(p.value.shape);
        }
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("adam_step: state was initialized for a different parameter set");
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!all_finite(p.grad))
            throw std::runtime_error("adam_step: non-finite gradient for parameter '" + p.name + "'");
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::int64_t j = 0; j < p.value.numel(); ++j) {
            const double g = p.grad[j];
            m[j] = static_cast<float>(state.beta1 * m[j] + (1.0 - state.beta1) * g);
            v[j] = static_cast<float>(state.beta2 * v[j] + (1.0 - state.beta2) * g * g);
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            p.value[j] -= static_cast<float>(learning_rate * m_hat / (std::sqrt(v_hat) + state.eps));
        }
    }
}

void EmaState::update(const Tensor<float>& x) {
    if (!initialized) {
        shadow = x;
        initialized = true;
        return;
    }
    if (!same_shape(shadow, x))
        throw std::invalid_argument("ema: update shape " + shape_str(x.shape) +
                                    " does not match shadow shape " + shape_str(shadow.shape));
    const auto d = static_cast<float>(decay);
    for (std::int64_t i = 0; i < shadow.numel(); ++i) shadow[i] = d * shadow[i] + (1.0f - d) * x[i];
}

float noise_sigma(const Tensor<float>& z, double alpha) {
    if (alpha < 0.0) throw std::invalid_argument("noise_sigma: alpha must be >= 0");
    float peak = 0.0f;
    for (float v : z.data) peak = std::max(peak, std::abs(v));
    return static_cast<float>(alpha) * peak;
}

float noise_sigma(const tomo::Volume& z, double alpha) {
    if (alpha < 0.0) throw std::invalid_argument("noise_sigma: alpha must be >= 0");
    float peak = 0.0f;
    for (float v : z.data) peak = std::max(peak, std::abs(v));
    return static_cast<float>(alpha) * peak;
}

template <typename T>
TadaLoss<T> tada_loss(Tape<T>& tape, const Tensor<T>& y, Var<T> x_hat, const Tensor<T>& z,
                      const tomo::Geometry& g, T beta, int p) {
    if (p != 1 && p != 2) throw std::invalid_argument("tada_loss: p must be 1 or 2");
    if (!same_shape(x_hat.value(), z))
        throw std::invalid_argument("tada_loss: z shape " + shape_str(z.shape) +
                                    " does not match x_hat shape " + shape_str(x_hat.value().shape));
    auto lp_sum = [&](Var<T> residual) {
        return p == 1 ? tape.sum(tape.abs(residual)) : tape.sum(tape.square(residual));
    };
    Var<T> projection = tomo::projector_op(tape, x_hat, g);
    Var<T> data = lp_sum(tape.sub(projection, tape.constant(y)));
    Var<T> reg = lp_sum(tape.sub(tape.constant(z), x_hat));
    TadaLoss<T> loss;
    loss.data_fidelity = data;
    loss.regularizer = reg;
    loss.total = tape.add(data, tape.scale(reg, beta));
    return loss;
}

template TadaLoss<float> tada_loss<float>(Tape<float>&, const Tensor<float>&, Var<float>,
                                          const Tensor<float>&, const tomo::Geometry&, float, int);
template TadaLoss<double> tada_loss<double>(Tape<double>&, const Tensor<double>&, Var<double>,
                                            const Tensor<double>&, const tomo::Geometry&, double, int);

Tensor<float> input_update(const Tensor<float>& z, const Tensor<float>& x_hat, double gamma) {
    if (!same_shape(z, x_hat))
        throw std::invalid_argument("input_update: shape mismatch " + shape_str(z.shape) + " vs " +
                                    shape_str(x_hat.shape));
    Tensor<float> out(z.shape);
    const auto gm = static_cast<float>(gamma);
    for (std::int64_t i = 0; i < z.numel(); ++i) out[i] = (1.0f - gm) * z[i] + gm * x_hat[i];
    return out;
}

namespace {

tomo::Volume tensor_to_volume(const Tensor<float>& t, std::int64_t nz, std::int64_t ny, std::int64_t nx) {
    tomo::Volume v(nz, ny, nx);
    v.data = t.data;
    return v;
}

RunResult run_dip(const tomo::Sinogram& y, const tomo::Geometry& g, std::int64_t ny, std::int64_t nx,
                  const TadaConfig& cfg, const tomo::Volume* ground_truth,
                  const IterationObserver& observer, bool input_adaptive) {
    cfg.validate();
    g.validate_for_slice(static_cast<int>(ny), static_cast<int>(nx));
    if (y.num_slices != g.num_slices || y.num_views != g.num_views || y.num_det != g.num_det)
        throw std::invalid_argument("dip: sinogram shape does not match geometry");
    const std::int64_t nz = g.num_slices;
    if (ground_truth && (ground_truth->nz != nz || ground_truth->ny != ny || ground_truth->nx != nx))
        throw std::invalid_argument("dip: ground truth shape does not match the reconstruction grid");

    auto model = unet::UNet<float>::build(cfg.net, cfg.seed);
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);  // distinct stream from weight init

    Tensor<float> y_tensor({y.num_slices, y.num_views, y.num_det}, y.data);
    Tensor<float> z({1, 1, nz, ny, nx});
    fill_normal(z, rng);

    Tape<float> tape;
    AdamState adam;
    EmaState ema;
    ema.decay = cfg.ema_decay;
    RunResult result;

    Tensor<float> eta(z.shape);
    for (int it = 1; it <= cfg.iterations; ++it) {
        float sigma = 0.0f;
        Tensor<float> net_input = z;
        if (input_adaptive) {
            sigma = noise_sigma(z, cfg.alpha);
            fill_normal(eta, rng);
            for (auto& v : eta.data) v *= sigma;
            for (std::int64_t i = 0; i < net_input.numel(); ++i) net_input[i] += eta[i];
        }

        tape.reset();
        model.zero_grad();
        Var<float> x_hat = model.forward(tape, tape.constant(net_input));

        double loss_value, data_value, reg_value;
        if (input_adaptive) {
            TadaLoss<float> loss =
                tada_loss(tape, y_tensor, x_hat, z, g, static_cast<float>(cfg.beta), cfg.p);
            loss_value = loss.total.value()[0];
            data_value = loss.data_fidelity.value()[0];
            reg_value = loss.regularizer.value()[0];
            if (!std::isfinite(loss_value))
                throw std::runtime_error("dip: loss is not finite at iteration " + std::to_string(it));
            tape.backward(loss.total);
        } else {
            Var<float> projection = tomo::projector_op(tape, x_hat, g);
            Var<float> residual = tape.sub(projection, tape.constant(y_tensor));
            Var<float> data = cfg.p == 1 ? tape.sum(tape.abs(residual)) : tape.sum(tape.square(residual));
            loss_value = data_value = data.value()[0];
            reg_value = 0.0;
            if (!std::isfinite(loss_value))
                throw std::runtime_error("dip: loss is not finite at iteration " + std::to_string(it));
            tape.backward(data);
        }
        adam_step(model.params(), adam, cfg.learning_rate * std::pow(cfg.lr_decay, it - 1));

        const Tensor<float>& x_hat_value = x_hat.value();  // detached below by copying data only
        ema.update(x_hat_value);

        if (input_adaptive) {
            Tensor<float> z_next = input_update(z, x_hat_value, cfg.gamma);
            if (observer) observer({it, sigma, eta, z, z_next, x_hat_value});
            z = std::move(z_next);
        } else if (observer) {
            observer({it, sigma, eta, z, z, x_hat_value});
        }

        if (it % cfg.eval_every == 0 || it == cfg.iterations) {
            TraceRow row{};
            row.iteration = it;
            row.loss = loss_value;
            row.data_fidelity = data_value;
            row.regularizer = reg_value;
            row.psnr_ema = std::numeric_limits<double>::quiet_NaN();
            row.ssim_ema = std::numeric_limits<double>::quiet_NaN();
            if (ground_truth) {
                tomo::Volume rec = tensor_to_volume(ema.shadow, nz, ny, nx);
                row.psnr_ema = toolkit::psnr(rec, *ground_truth);
                row.ssim_ema = toolkit::ssim(rec, *ground_truth);
            }
            result.trace.push_back(row);
        }
    }
    result.volume = tensor_to_volume(ema.shadow, nz, ny, nx);
    return result;
}

}  // namespace

RunResult run_tada_dip(const tomo::Sinogram& y, const tomo::Geometry& g, std::int64_t ny,
                       std::int64_t nx, const TadaConfig& cfg, const tomo::Volume* ground_truth,
                       const IterationObserver& observer) {
    return run_dip(y, g, ny, nx, cfg, ground_truth, observer, true);
}

RunResult run_vanilla_dip(const tomo::Sinogram& y, const tomo::Geometry& g, std::int64_t ny,
                          std::int64_t nx, const TadaConfig& cfg, const tomo::Volume* ground_truth,
                          const IterationObserver& observer) {
    return run_dip(y, g, ny, nx, cfg, ground_truth, observer, false);
}

std::string trace_to_csv(const RunTrace& trace) {
    std::ostringstream os;
    os.precision(10);
    os << "iteration,loss,data_fidelity,regularizer,psnr_ema,ssim_ema\n";
    for (const auto& row : trace)
        os << row.iteration << ',' << row.loss << ',' << row.data_fidelity << ',' << row.regularizer
           << ',' << row.psnr_ema << ',' << row.ssim_ema << '\n';
    return os.str();
}

void write_trace_csv(const std::string& path, const RunTrace& trace) {
    toolkit::atomic_write_file(path, trace_to_csv(trace));
}

}  // namespace tada::engine
